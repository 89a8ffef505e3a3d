//! Episodic finite-horizon test MDPs with known dynamics.
//!
//! * [`BumpLine`]: `S = A = [0, 1]`, reward `max(0, 1 − 2|a − s|)`, drift
//!   `s' = clamp(s + 0.2(a − 0.5))`, optionally with uniform state noise.
//! * [`TabularChain`]: a chain of states with left/right moves and unit
//!   reward at the right end.
//! * [`Misspecified`]: any environment with a bounded, non-Lipschitz
//!   perturbation `ε·sin(f·π·a₀)` added to its reward.
//!
//! All randomness flows through a [`SeedStream`] keyed by `(seed, episode)`,
//! so an episode is a pure function of its configuration, seed and index.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::metric_space::MetricSpace;

/// Number of quadrature nodes used to enumerate uniform state noise.
const NOISE_QUADRATURE_NODES: usize = 16;

/// Counter-based random stream: one independent ChaCha stream per episode.
#[derive(Debug, Clone)]
pub struct SeedStream(ChaCha8Rng);

impl SeedStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub name: String,
    pub params: serde_json::Value,
}

/// An episodic MDP `(S, A, P, r, H)`.
pub trait Environment: Send + Sync {
    fn space(&self) -> &Arc<MetricSpace>;

    fn horizon(&self) -> usize;

    fn descriptor(&self) -> EnvDescriptor;

    /// A Lipschitz constant for the Lipschitz part of `Q*` under the space's metric.
    fn lipschitz(&self) -> f64;

    /// `r_h(s, a) ∈ [0, 1]`.
    fn reward(&self, h: usize, s: &[f64], a: &[f64]) -> f64;

    /// Samples `s' ~ P_h(·|s, a)`.
    fn next_state(&self, h: usize, s: &[f64], a: &[f64], noise: &mut SeedStream) -> Vec<f64>;

    /// `P_h(·|s, a)` as weighted next states. Exact for deterministic
    /// dynamics; a midpoint quadrature of the noise otherwise.
    fn transitions(&self, h: usize, s: &[f64], a: &[f64]) -> Vec<(f64, Vec<f64>)>;

    /// Whether transitions are deterministic. The start state may still be
    /// random; returns from a given start are then exact.
    fn is_deterministic(&self) -> bool;

    fn initial_state(&self, noise: &mut SeedStream) -> Vec<f64>;
}

/// Draws the initial state of an episode.
pub fn reset(env: &dyn Environment, stream: &mut SeedStream) -> Result<Vec<f64>> {
    let s = env.initial_state(stream);
    env.space().check_state(&s)?;
    Ok(s)
}

/// Initial state of episode `k` under `seed`.
pub fn reset_episode(env: &dyn Environment, k: usize, seed: u64) -> Result<Vec<f64>> {
    reset(env, &mut SeedStream::new(seed, k as u64))
}

/// One validated transition: returns `(r_h(s, a), s')`.
pub fn step(env: &dyn Environment, h: usize, s: &[f64], a: &[f64], noise: &mut SeedStream) -> Result<(f64, Vec<f64>)> {
    if h == 0 || h > env.horizon() {
        return Err(Error::Contract(format!("step {h} outside 1..={}", env.horizon())));
    }
    env.space().check_state(s)?;
    env.space().check_action(a)?;
    let r = env.reward(h, s, a);
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Invariant(format!("reward {r} outside [0, 1] at step {h}")));
    }
    let next = env.next_state(h, s, a, noise);
    env.space().check_state(&next)?;
    Ok((r, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    Fixed(f64),
    Uniform,
}

#[derive(Debug, Clone)]
pub struct BumpLine {
    space: Arc<MetricSpace>,
    horizon: usize,
    start: Start,
    noise: f64,
}

impl BumpLine {
    pub const DRIFT: f64 = 0.2;

    /// Deterministic dynamics, fixed start at `s₁ = 0.5`.
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        Ok(Self {
            space: Arc::new(MetricSpace::unit_box(1, 1)?),
            horizon,
            start: Start::Fixed(0.5),
            noise: 0.0,
        })
    }

    pub fn with_start(mut self, start: Start) -> Result<Self> {
        if let Start::Fixed(s) = start {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!("start state {s} outside [0, 1]")));
            }
        }
        self.start = start;
        Ok(self)
    }

    /// Adds `Uniform(−noise, noise)` to every transition.
    pub fn with_noise(mut self, noise: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&noise) {
            return Err(Error::Domain(format!("noise amplitude {noise} outside [0, 0.5]")));
        }
        self.noise = noise;
        Ok(self)
    }

    fn drift(s: f64, a: f64) -> f64 {
        s + Self::DRIFT * (a - 0.5)
    }
}

impl Environment for BumpLine {
    fn space(&self) -> &Arc<MetricSpace> {
        &self.space
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: "bump_line".into(),
            params: json!({ "start": self.start, "noise": self.noise }),
        }
    }

    fn lipschitz(&self) -> f64 {
        // |Δ|a − s|| ≤ 2·dist under the max metric, and the bump has slope 2.
        4.0
    }

    fn reward(&self, _h: usize, s: &[f64], a: &[f64]) -> f64 {
        (1.0 - 2.0 * (a[0] - s[0]).abs()).max(0.0)
    }

    fn next_state(&self, _h: usize, s: &[f64], a: &[f64], noise: &mut SeedStream) -> Vec<f64> {
        let jitter = if self.noise > 0.0 {
            self.noise * (2.0 * noise.uniform() - 1.0)
        } else {
            0.0
        };
        vec![(Self::drift(s[0], a[0]) + jitter).clamp(0.0, 1.0)]
    }

    fn transitions(&self, _h: usize, s: &[f64], a: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let base = Self::drift(s[0], a[0]);
        if self.noise == 0.0 {
            return vec![(1.0, vec![base.clamp(0.0, 1.0)])];
        }
        let n = NOISE_QUADRATURE_NODES;
        (0..n)
            .map(|i| {
                let z = -1.0 + (2 * i + 1) as f64 / n as f64;
                (1.0 / n as f64, vec![(base + self.noise * z).clamp(0.0, 1.0)])
            })
            .collect()
    }

    fn is_deterministic(&self) -> bool {
        self.noise == 0.0
    }

    fn initial_state(&self, noise: &mut SeedStream) -> Vec<f64> {
        match self.start {
            Start::Fixed(s) => vec![s],
            Start::Uniform => vec![noise.uniform()],
        }
    }
}

/// States `0..n`, start at 0; action 0 moves left, the last action moves
/// right, any other action stays. Reward 1 at the rightmost state.
#[derive(Debug, Clone)]
pub struct TabularChain {
    space: Arc<MetricSpace>,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
}

impl TabularChain {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize) -> Result<Self> {
        if num_states < 2 || num_actions < 2 {
            return Err(Error::Contract("chain needs at least 2 states and 2 actions".into()));
        }
        if horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        Ok(Self {
            space: Arc::new(MetricSpace::tabular(num_states, num_actions)?),
            horizon,
            num_states,
            num_actions,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

impl Environment for TabularChain {
    fn space(&self) -> &Arc<MetricSpace> {
        &self.space
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: "tabular_chain".into(),
            params: json!({ "num_states": self.num_states, "num_actions": self.num_actions }),
        }
    }

    fn lipschitz(&self) -> f64 {
        // Q* ∈ [0, H] and distinct pairs sit at distance 1.
        self.horizon as f64
    }

    fn reward(&self, _h: usize, s: &[f64], _a: &[f64]) -> f64 {
        if s[0] as usize == self.num_states - 1 {
            1.0
        } else {
            0.0
        }
    }

    fn next_state(&self, h: usize, s: &[f64], a: &[f64], _noise: &mut SeedStream) -> Vec<f64> {
        self.transitions(h, s, a).remove(0).1
    }

    fn transitions(&self, _h: usize, s: &[f64], a: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let (s, a) = (s[0] as usize, a[0] as usize);
        let next = if a == 0 {
            s.saturating_sub(1)
        } else if a == self.num_actions - 1 {
            (s + 1).min(self.num_states - 1)
        } else {
            s
        };
        vec![(1.0, vec![next as f64])]
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn initial_state(&self, _noise: &mut SeedStream) -> Vec<f64> {
        vec![0.0]
    }
}

/// Reward `clamp(r + ε·sin(f·π·a₀), 0, 1)` over a base environment.
pub struct Misspecified {
    base: Box<dyn Environment>,
    epsilon: f64,
    frequency: f64,
}

/// Wraps `env` with a perturbation bounded by `epsilon` in absolute value.
pub fn make_misspecified(env: Box<dyn Environment>, epsilon: f64, frequency: f64) -> Result<Misspecified> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Contract(format!("misspecification {epsilon} must be >= 0")));
    }
    if !frequency.is_finite() {
        return Err(Error::Contract(format!("frequency {frequency} must be finite")));
    }
    Ok(Misspecified {
        base: env,
        epsilon,
        frequency,
    })
}

impl Misspecified {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn perturbation(&self, a: &[f64]) -> f64 {
        self.epsilon * (self.frequency * PI * a[0]).sin()
    }
}

impl Environment for Misspecified {
    fn space(&self) -> &Arc<MetricSpace> {
        self.base.space()
    }

    fn horizon(&self) -> usize {
        self.base.horizon()
    }

    fn descriptor(&self) -> EnvDescriptor {
        let inner = self.base.descriptor();
        EnvDescriptor {
            name: format!("misspecified({})", inner.name),
            params: json!({
                "base": inner.params,
                "epsilon": self.epsilon,
                "frequency": self.frequency,
            }),
        }
    }

    fn lipschitz(&self) -> f64 {
        self.base.lipschitz()
    }

    fn reward(&self, h: usize, s: &[f64], a: &[f64]) -> f64 {
        if self.epsilon == 0.0 {
            return self.base.reward(h, s, a);
        }
        (self.base.reward(h, s, a) + self.perturbation(a)).clamp(0.0, 1.0)
    }

    fn next_state(&self, h: usize, s: &[f64], a: &[f64], noise: &mut SeedStream) -> Vec<f64> {
        self.base.next_state(h, s, a, noise)
    }

    fn transitions(&self, h: usize, s: &[f64], a: &[f64]) -> Vec<(f64, Vec<f64>)> {
        self.base.transitions(h, s, a)
    }

    fn is_deterministic(&self) -> bool {
        self.base.is_deterministic()
    }

    fn initial_state(&self, noise: &mut SeedStream) -> Vec<f64> {
        self.base.initial_state(noise)
    }
}
