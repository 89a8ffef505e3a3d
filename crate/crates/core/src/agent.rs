//! The zooming Q-learner.
//!
//! One [`Partition`] per step. Each step of an episode selects the relevant
//! ball with the largest index, acts at its witness action, queries the
//! next step's value estimate, then updates the selected ball and possibly
//! activates a child at the visited pair. The next-step value is read before
//! the current step is updated, and partitions of different steps never
//! interact.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{self, Environment, SeedStream};
use crate::error::{Error, Result};
use crate::metric_space::{MetricSpace, Point};
use crate::partition::{activation_threshold, Partition, RelevantBall};

/// Run-level constants: horizon `H`, episode budget `K`, Lipschitz
/// constant `L`, failure probability `p`, and `iota = ln(4·H·K²/p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub horizon: usize,
    pub episodes: usize,
    pub lipschitz: f64,
    pub p: f64,
    pub iota: f64,
}

impl HyperParams {
    pub fn new(horizon: usize, episodes: usize, lipschitz: f64, p: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        if episodes == 0 {
            return Err(Error::Contract("episode count must be at least 1".into()));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::Contract(format!(
                "Lipschitz constant {lipschitz} must be positive"
            )));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Contract(format!("failure probability {p} outside (0, 1)")));
        }
        let (h, k) = (horizon as f64, episodes as f64);
        let iota = (4.0 * h * k * k / p).ln();
        Ok(Self {
            horizon,
            episodes,
            lipschitz,
            p,
            iota,
        })
    }
}

/// `α_t = (H + 1) / (H + t)`.
pub fn learning_rate(t: u64, horizon: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Contract("learning rate is defined for t >= 1".into()));
    }
    let h = horizon as f64;
    Ok((h + 1.0) / (h + t as f64))
}

/// `α_t^0 = Π_{j=1..t} (1 − α_j)` and `α_t^i = α_i Π_{j=i+1..t} (1 − α_j)`
/// for `i = 1..t`. Returns `(α_t^0, [α_t^1, …, α_t^t])`.
pub fn alpha_weights(t: u64, horizon: usize) -> (f64, Vec<f64>) {
    let h = horizon as f64;
    let alpha = |j: u64| (h + 1.0) / (h + j as f64);
    let mut weights = vec![0.0; t as usize];
    // Suffix product Π_{j=i+1..t} (1 − α_j), built from the top down.
    let mut tail = 1.0;
    for i in (1..=t).rev() {
        weights[i as usize - 1] = alpha(i) * tail;
        tail *= 1.0 - alpha(i);
    }
    (tail, weights)
}

/// Hoeffding-style bonus `u_t = 4·sqrt(H³·ι / t)`.
pub fn bonus(t: u64, hyper: &HyperParams) -> Result<f64> {
    if t == 0 {
        return Err(Error::Contract("bonus is defined for t >= 1".into()));
    }
    let h = hyper.horizon as f64;
    Ok(4.0 * (h * h * h * hyper.iota / t as f64).sqrt())
}

/// One transition of an episode and the statistics it fed into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub h: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Selected ball (or net cell, for the baselines).
    pub ball_id: usize,
    pub depth: u32,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Clipped value estimate of the next state; 0 at the last step.
    pub v_next: f64,
    /// Visit count of the selected ball after this step's increment.
    pub t_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub k: usize,
    pub initial_state: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// `Σ_h r_h` along the executed trajectory.
    pub realized_return: f64,
    /// The learner's value estimate `V̂_1(s_1)` at the start of the episode.
    pub initial_value_estimate: f64,
}

/// A deterministic map `(h, s) → a`.
pub trait Policy {
    fn act(&self, h: usize, s: &[f64]) -> Result<Vec<f64>>;
}

/// An episodic learner that can be driven by the experiment harness.
pub trait Learner: Send {
    fn name(&self) -> &'static str;

    /// Plays episode `k`; all environment noise comes from `(seed, k)`.
    fn run_episode(&mut self, env: &dyn Environment, k: usize, seed: u64) -> Result<EpisodeRecord>;

    /// Number of value cells held across all steps.
    fn memory_cells(&self) -> usize;
}

/// A relevant ball with its current index.
#[derive(Debug, Clone)]
struct Scored {
    rel: RelevantBall,
    index: f64,
    depth: u32,
}

/// Result of one statistics update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub t: u64,
    pub target: f64,
    pub child: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ZoomAgent {
    partitions: Vec<Partition>,
    hyper: HyperParams,
    episode: usize,
    rng_seed: u64,
    duplicate_activations: u64,
}

impl ZoomAgent {
    pub fn new(space: Arc<MetricSpace>, hyper: HyperParams, rng_seed: u64) -> Result<Self> {
        let partitions = (1..=hyper.horizon)
            .map(|h| {
                Partition::new(space.clone(), h, hyper.horizon)
                    .map(|p| p.with_witness_seed(rng_seed.wrapping_add(h as u64)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            partitions,
            hyper,
            episode: 0,
            rng_seed,
            duplicate_activations: 0,
        })
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    /// Episodes completed so far.
    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Partition of step `h` (1-based).
    pub fn partition(&self, h: usize) -> Result<&Partition> {
        h.checked_sub(1)
            .and_then(|i| self.partitions.get(i))
            .ok_or_else(|| Error::Contract(format!("step {h} outside 1..={}", self.hyper.horizon)))
    }

    fn partition_mut(&mut self, h: usize) -> Result<&mut Partition> {
        let horizon = self.hyper.horizon;
        h.checked_sub(1)
            .and_then(|i| self.partitions.get_mut(i))
            .ok_or_else(|| Error::Contract(format!("step {h} outside 1..={horizon}")))
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn total_balls(&self) -> usize {
        self.partitions.iter().map(Partition::len).sum()
    }

    /// Activations skipped because the child center already existed.
    pub fn duplicate_activations(&self) -> u64 {
        self.duplicate_activations
    }

    fn scored(&self, h: usize, s: &[f64]) -> Result<Vec<Scored>> {
        let part = self.partition(h)?;
        part.relevant_balls(s)?
            .into_iter()
            .map(|rel| {
                let b = part.ball(rel.ball_id)?;
                Ok(Scored {
                    index: part.index_of(b, self.hyper.lipschitz),
                    depth: b.depth,
                    rel,
                })
            })
            .collect()
    }

    /// Highest index; ties go to the smaller radius, then the lower id.
    fn best(scored: &[Scored]) -> Result<&Scored> {
        scored
            .iter()
            .max_by(|a, b| {
                a.index
                    .total_cmp(&b.index)
                    .then(a.depth.cmp(&b.depth))
                    .then(b.rel.ball_id.cmp(&a.rel.ball_id))
            })
            .ok_or_else(|| Error::Invariant("empty relevant set".into()))
    }

    fn clipped_value(&self, scored: &[Scored]) -> Result<f64> {
        Ok(Self::best(scored)?.index.min(self.hyper.horizon as f64))
    }

    /// The relevant ball of largest index at state `s`, with its witness action.
    pub fn select_ball(&self, h: usize, s: &[f64]) -> Result<(usize, Vec<f64>)> {
        let scored = self.scored(h, s)?;
        let best = Self::best(&scored)?;
        Ok((best.rel.ball_id, best.rel.witness.clone()))
    }

    /// `V̂_h(s) = min(H, max index over relevant balls)`, and 0 past the horizon.
    pub fn value_estimate(&self, h: usize, s: &[f64]) -> Result<f64> {
        if h == self.hyper.horizon + 1 {
            return Ok(0.0);
        }
        self.clipped_value(&self.scored(h, s)?)
    }

    /// Increments the visit count of the selected ball, blends its `q_hat`
    /// toward `r + v_next + u_t + 2L·rad` with rate `α_t`, then activates a
    /// child at `(state, action)` once the count reaches `4^depth`.
    /// Fills in `record.t_after`.
    pub fn update(&mut self, h: usize, record: &mut StepRecord) -> Result<UpdateOutcome> {
        let hyper = self.hyper;
        let part = self.partition_mut(h)?;
        let ball = part.ball_mut(record.ball_id)?;
        ball.visits += 1;
        let t = ball.visits;
        let alpha = learning_rate(t, hyper.horizon)?;
        let target = record.reward + record.v_next + bonus(t, &hyper)? + 2.0 * hyper.lipschitz * ball.radius();
        ball.q_hat = (1.0 - alpha) * ball.q_hat + alpha * target;
        record.t_after = t;

        let (depth, mature) = (ball.depth, ball.visits >= activation_threshold(ball.depth));
        let mut child = None;
        if mature {
            let center = Point::new(record.state.clone(), record.action.clone());
            let duplicate = part
                .balls()
                .iter()
                .any(|o| o.depth == depth + 1 && part.space().distance(&o.center, &center) == 0.0);
            if duplicate {
                log::warn!(
                    "step {h}: child of ball {} at {center:?} already exists, not duplicating",
                    record.ball_id
                );
                self.duplicate_activations += 1;
            } else {
                child = Some(part.activate_child(record.ball_id, center, hyper.horizon)?);
            }
        }
        Ok(UpdateOutcome { t, target, child })
    }

    /// Frozen copy of the current greedy rule.
    pub fn snapshot(&self) -> GreedySnapshot {
        GreedySnapshot { agent: self.clone() }
    }
}

impl Learner for ZoomAgent {
    fn name(&self) -> &'static str {
        "zoomrl"
    }

    fn run_episode(&mut self, env: &dyn Environment, k: usize, seed: u64) -> Result<EpisodeRecord> {
        if k != self.episode + 1 || k > self.hyper.episodes {
            return Err(Error::Contract(format!(
                "episode {k} out of order (completed {}, budget {})",
                self.episode, self.hyper.episodes
            )));
        }
        let horizon = self.hyper.horizon;
        if env.horizon() != horizon {
            return Err(Error::Contract(format!(
                "environment horizon {} differs from agent horizon {horizon}",
                env.horizon()
            )));
        }
        let mut stream = SeedStream::new(seed, k as u64);
        let initial_state = env::reset(env, &mut stream)?;
        let mut s = initial_state.clone();
        let mut scored = self.scored(1, &s)?;
        let initial_value_estimate = self.clipped_value(&scored)?;
        let mut steps = Vec::with_capacity(horizon);
        let mut realized_return = 0.0;

        for h in 1..=horizon {
            let pick = Self::best(&scored)?.clone();
            let (reward, next_state) = env::step(env, h, &s, &pick.rel.witness, &mut stream)?;
            realized_return += reward;

            // The next-step query runs on partition h+1, which this step's
            // update leaves untouched, so it doubles as that step's selection.
            let (v_next, next_scored) = if h < horizon {
                let ns = self.scored(h + 1, &next_state)?;
                (self.clipped_value(&ns)?, ns)
            } else {
                (0.0, Vec::new())
            };

            let mut rec = StepRecord {
                k,
                h,
                state: s,
                action: pick.rel.witness,
                ball_id: pick.rel.ball_id,
                depth: pick.depth,
                reward,
                next_state: next_state.clone(),
                v_next,
                t_after: 0,
            };
            self.update(h, &mut rec)?;
            steps.push(rec);
            s = next_state;
            scored = next_scored;
        }
        self.episode = k;
        Ok(EpisodeRecord {
            k,
            initial_state,
            steps,
            realized_return,
            initial_value_estimate,
        })
    }

    fn memory_cells(&self) -> usize {
        self.total_balls()
    }
}

/// The greedy-by-index rule of a [`ZoomAgent`], frozen at some point.
#[derive(Debug, Clone)]
pub struct GreedySnapshot {
    agent: ZoomAgent,
}

impl Policy for GreedySnapshot {
    fn act(&self, h: usize, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.agent.select_ball(h, s)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BumpLine, TabularChain};

    fn hyper(h: usize, l: f64) -> HyperParams {
        HyperParams::new(h, 1000, l, 0.1).unwrap()
    }

    #[test]
    fn iota_uses_natural_log() {
        let hp = HyperParams::new(3, 100, 1.0, 0.1).unwrap();
        assert!((hp.iota - (4.0f64 * 3.0 * 1e4 / 0.1).ln()).abs() < 1e-12);
        assert!(HyperParams::new(0, 1, 1.0, 0.1).is_err());
        assert!(HyperParams::new(1, 1, 0.0, 0.1).is_err());
        assert!(HyperParams::new(1, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn learning_rate_examples() {
        for h in [1, 2, 7] {
            assert_eq!(learning_rate(1, h).unwrap(), 1.0);
        }
        assert_eq!(learning_rate(3, 1).unwrap(), 0.5);
        assert!(matches!(learning_rate(0, 1), Err(Error::Contract(_))));
        let seq: Vec<f64> = (1..200).map(|t| learning_rate(t, 3).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] < w[0]));
        assert!(learning_rate(1_000_000, 3).unwrap() < 1e-5);
    }

    #[test]
    fn alpha_weight_examples() {
        let (a0, w) = alpha_weights(0, 4);
        assert_eq!(a0, 1.0);
        assert!(w.is_empty());
        for t in 1..50 {
            let (a0, w) = alpha_weights(t, 2);
            assert_eq!(a0, 0.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (_, w) = alpha_weights(3, 1);
        let expected = [1.0 / 6.0, 1.0 / 3.0, 0.5];
        for (x, e) in w.iter().zip(expected) {
            assert!((x - e).abs() < 1e-15, "{w:?}");
        }
    }

    #[test]
    fn alpha_weights_match_incremental_recursion() {
        // α_t^i = (1 − α_t) α_{t−1}^i for i < t, and α_t^t = α_t.
        for h in [1, 3, 5] {
            let mut w: Vec<f64> = Vec::new();
            for t in 1..=300u64 {
                let a = learning_rate(t, h).unwrap();
                for x in w.iter_mut() {
                    *x *= 1.0 - a;
                }
                w.push(a);
                let (_, direct) = alpha_weights(t, h);
                for (x, y) in w.iter().zip(&direct) {
                    assert!((x - y).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn bonus_examples() {
        let mut hp = hyper(1, 1.0);
        hp.iota = 1.0;
        assert_eq!(bonus(16, &hp).unwrap(), 1.0);
        let mut hp2 = hyper(2, 1.0);
        hp2.iota = 1.0;
        assert_eq!(bonus(2, &hp2).unwrap(), 8.0);
        let seq: Vec<f64> = (1..100).map(|t| bonus(t, &hp).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(bonus(0, &hp), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_agent_selects_root_and_clips_value() {
        let sp = Arc::new(MetricSpace::unit_box(1, 1).unwrap());
        let agent = ZoomAgent::new(sp, hyper(2, 1.0), 0).unwrap();
        assert_eq!(agent.select_ball(1, &[0.3]).unwrap(), (0, vec![0.5]));
        assert_eq!(agent.partition(1).unwrap().index(0, 1.0).unwrap(), 3.0);
        assert_eq!(agent.value_estimate(1, &[0.3]).unwrap(), 2.0);
        assert_eq!(agent.value_estimate(3, &[0.3]).unwrap(), 0.0);
    }

    fn agent_with_balls(balls: Vec<crate::partition::Ball>) -> ZoomAgent {
        let sp = Arc::new(MetricSpace::unit_box(1, 1).unwrap());
        let mut agent = ZoomAgent::new(sp.clone(), hyper(1, 1.0), 0).unwrap();
        agent.partitions[0] = Partition::from_balls(sp, 1, balls);
        agent
    }

    fn b(s: f64, a: f64, depth: u32, q: f64) -> crate::partition::Ball {
        crate::partition::Ball {
            id: 0,
            center: Point::new(vec![s], vec![a]),
            depth,
            parent_id: if depth == 0 { None } else { Some(0) },
            q_hat: q,
            visits: 0,
        }
    }

    #[test]
    fn selection_is_argmax_of_index() {
        // Root fully covered at s = 0.5 by two depth-1 balls; indices 0.5 + q.
        let agent = agent_with_balls(vec![b(0.5, 0.5, 0, 10.0), b(0.5, 0.2, 1, 2.0), b(0.5, 0.8, 1, 2.5)]);
        let part = agent.partition(1).unwrap();
        assert_eq!(part.index(1, 1.0).unwrap(), 2.5);
        assert_eq!(part.index(2, 1.0).unwrap(), 3.0);
        assert_eq!(agent.select_ball(1, &[0.5]).unwrap().0, 2);
    }

    #[test]
    fn ties_prefer_the_smaller_ball() {
        // Root index 1 + 1.5 = 2.5; child index 0.5 + min(2.0, 1.5 + 0.5) = 2.5.
        let agent = agent_with_balls(vec![b(0.5, 0.5, 0, 1.5), b(0.5, 0.0, 1, 2.0)]);
        let part = agent.partition(1).unwrap();
        assert_eq!(part.index(0, 1.0).unwrap(), 2.5);
        assert_eq!(part.index(1, 1.0).unwrap(), 0.5 + 2.0);
        let rel = part.relevant_balls(&[0.5]).unwrap();
        assert_eq!(rel.len(), 2);
        assert_eq!(agent.select_ball(1, &[0.5]).unwrap().0, 1);
    }

    #[test]
    fn first_update_discards_the_prior() {
        let sp = Arc::new(MetricSpace::unit_box(1, 1).unwrap());
        let mut agent = ZoomAgent::new(sp, hyper(2, 1.0), 0).unwrap();
        let mut rec = StepRecord {
            k: 1,
            h: 1,
            state: vec![0.2],
            action: vec![0.5],
            ball_id: 0,
            depth: 0,
            reward: 0.7,
            next_state: vec![0.4],
            v_next: 1.5,
            t_after: 0,
        };
        let out = agent.update(1, &mut rec).unwrap();
        let u1 = bonus(1, agent.hyper()).unwrap();
        let q = agent.partition(1).unwrap().ball(0).unwrap().q_hat;
        assert_eq!(q, 0.7 + 1.5 + u1 + 2.0 * 1.0 * 1.0);
        assert_eq!((out.t, rec.t_after), (1, 1));
        // Root activates on its first visit.
        assert_eq!(out.child, Some(1));
        let child = agent.partition(1).unwrap().ball(1).unwrap();
        assert_eq!(
            (child.depth, child.center.state[0], child.center.action[0]),
            (1, 0.2, 0.5)
        );
        assert_eq!(agent.partition(2).unwrap().len(), 1);
    }

    #[test]
    fn episode_shape_and_returns() {
        let env = BumpLine::new(1).unwrap();
        let mut agent = ZoomAgent::new(env.space().clone(), hyper(1, 4.0), 0).unwrap();
        let ep = agent.run_episode(&env, 1, 5).unwrap();
        assert_eq!(ep.steps.len(), 1);
        assert!((0.0..=1.0).contains(&ep.realized_return));
        assert!(agent.run_episode(&env, 3, 5).is_err());

        let env = TabularChain::new(5, 2, 6).unwrap();
        let mut agent = ZoomAgent::new(env.space().clone(), hyper(6, 6.0), 0).unwrap();
        for k in 1..=50 {
            let ep = agent.run_episode(&env, k, 1).unwrap();
            assert_eq!(ep.steps.len(), 6);
            assert!((0.0..=6.0).contains(&ep.realized_return));
            for st in &ep.steps {
                assert!((0.0..=6.0).contains(&st.v_next));
                assert!((0.0..=1.0).contains(&st.reward));
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let env = BumpLine::new(2).unwrap();
        let run = || {
            let mut agent = ZoomAgent::new(env.space().clone(), hyper(2, 4.0), 9).unwrap();
            (1..=40)
                .map(|k| agent.run_episode(&env, k, 9).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_policy_matches_behaviour() {
        let env = BumpLine::new(3).unwrap();
        let mut agent = ZoomAgent::new(env.space().clone(), hyper(3, 4.0), 1).unwrap();
        for k in 1..=30 {
            let snap = agent.snapshot();
            let ep = agent.run_episode(&env, k, 4).unwrap();
            for st in &ep.steps {
                assert_eq!(snap.act(st.h, &st.state).unwrap(), st.action);
            }
        }
    }
}
