//! Fixed-discretization comparators.
//!
//! [`NetAgent`] runs optimistic Q-learning over a uniform covering net of the
//! whole space, chosen before learning starts. With a tabular space and
//! `eps = 0.5` the net is one cell per state-action pair, which is tabular
//! Q-learning with Hoeffding bonuses. Both reuse the learning rate and bonus
//! of the zooming agent.

use std::sync::Arc;

use crate::agent::{bonus, learning_rate, EpisodeRecord, HyperParams, Learner, Policy, StepRecord};
use crate::env::{self, Environment, SeedStream};
use crate::error::{Error, Result};
use crate::metric_space::MetricSpace;

/// Net radius `K^(−1/(d+2))`, capped at 1.
pub fn default_net_eps(episodes: usize, covering_dim: f64) -> Result<f64> {
    if episodes == 0 || !(covering_dim >= 0.0 && covering_dim.is_finite()) {
        return Err(Error::Contract(format!(
            "need K >= 1 and d >= 0, got K = {episodes}, d = {covering_dim}"
        )));
    }
    Ok((episodes as f64).powf(-1.0 / (covering_dim + 2.0)).min(1.0))
}

/// Discrete space with unit distance between distinct pairs.
pub fn tabular_metric_space(num_states: usize, num_actions: usize) -> Result<MetricSpace> {
    MetricSpace::tabular(num_states, num_actions)
}

#[derive(Debug, Clone)]
pub struct NetAgent {
    name: &'static str,
    space: Arc<MetricSpace>,
    hyper: HyperParams,
    eps: f64,
    /// Discretization term added to every target.
    bias: f64,
    net_states: Vec<Vec<f64>>,
    net_actions: Vec<Vec<f64>>,
    /// `q[h-1][si * |actions| + ai]`, initialized to `H`.
    q: Vec<Vec<f64>>,
    visits: Vec<Vec<u64>>,
    episode: usize,
}

impl NetAgent {
    /// Q-learning over `covering_net(eps)` with target bias `2L·eps`.
    pub fn new(space: Arc<MetricSpace>, eps: f64, hyper: HyperParams) -> Result<Self> {
        let bias = 2.0 * hyper.lipschitz * eps;
        Self::build("nbql", space, eps, hyper, bias)
    }

    /// One cell per pair of a tabular space, with no discretization bias.
    pub fn tabular_qucb(space: Arc<MetricSpace>, hyper: HyperParams) -> Result<Self> {
        if !space.is_tabular() {
            return Err(Error::Contract("tabular Q-UCB needs a tabular space".into()));
        }
        Self::build("tabular_qucb", space, 0.5, hyper, 0.0)
    }

    fn build(name: &'static str, space: Arc<MetricSpace>, eps: f64, hyper: HyperParams, bias: f64) -> Result<Self> {
        let net = space.covering_net(eps)?;
        let mut net_states: Vec<Vec<f64>> = Vec::new();
        let mut net_actions: Vec<Vec<f64>> = Vec::new();
        for p in &net {
            if !net_states.contains(&p.state) {
                net_states.push(p.state.clone());
            }
            if !net_actions.contains(&p.action) {
                net_actions.push(p.action.clone());
            }
        }
        let cells = net_states.len() * net_actions.len();
        if cells != net.len() {
            return Err(Error::Invariant(format!(
                "covering net of {} points is not a product of {} states and {} actions",
                net.len(),
                net_states.len(),
                net_actions.len()
            )));
        }
        let h = hyper.horizon;
        Ok(Self {
            name,
            space,
            hyper,
            eps,
            bias,
            net_states,
            net_actions,
            q: vec![vec![h as f64; cells]; h],
            visits: vec![vec![0; cells]; h],
            episode: 0,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    /// Number of net points, `|net states| × |net actions|`.
    pub fn net_size(&self) -> usize {
        self.net_states.len() * self.net_actions.len()
    }

    pub fn net_states(&self) -> &[Vec<f64>] {
        &self.net_states
    }

    pub fn net_actions(&self) -> &[Vec<f64>] {
        &self.net_actions
    }

    pub fn q_hat(&self, h: usize, cell: usize) -> Result<f64> {
        self.check_step(h)?;
        self.q[h - 1].get(cell).copied().ok_or(Error::UnknownBall(cell))
    }

    pub fn visits(&self, h: usize, cell: usize) -> Result<u64> {
        self.check_step(h)?;
        self.visits[h - 1].get(cell).copied().ok_or(Error::UnknownBall(cell))
    }

    fn check_step(&self, h: usize) -> Result<()> {
        if h == 0 || h > self.hyper.horizon {
            return Err(Error::Contract(format!("step {h} outside 1..={}", self.hyper.horizon)));
        }
        Ok(())
    }

    /// Nearest net state, ties to the lowest index.
    fn snap(&self, s: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, ns) in self.net_states.iter().enumerate() {
            let d = self.space.state_distance(s, ns);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Greedy cell at `s`: argmax of `q_hat` over net actions at the
    /// nearest net state, ties to the lowest action index.
    pub fn select_cell(&self, h: usize, s: &[f64]) -> Result<usize> {
        self.check_step(h)?;
        self.space.check_state(s)?;
        let na = self.net_actions.len();
        let base = self.snap(s) * na;
        let row = &self.q[h - 1][base..base + na];
        let mut best = 0;
        for (i, &q) in row.iter().enumerate() {
            if q > row[best] {
                best = i;
            }
        }
        Ok(base + best)
    }

    /// `min(H, max_a q_hat)` at the nearest net state; 0 past the horizon.
    pub fn value_estimate(&self, h: usize, s: &[f64]) -> Result<f64> {
        if h == self.hyper.horizon + 1 {
            return Ok(0.0);
        }
        let cell = self.select_cell(h, s)?;
        Ok(self.q[h - 1][cell].min(self.hyper.horizon as f64))
    }

    fn update(&mut self, h: usize, cell: usize, reward: f64, v_next: f64) -> Result<u64> {
        let visits = &mut self.visits[h - 1][cell];
        *visits += 1;
        let t = *visits;
        let alpha = learning_rate(t, self.hyper.horizon)?;
        let target = reward + v_next + bonus(t, &self.hyper)? + self.bias;
        let q = &mut self.q[h - 1][cell];
        *q = (1.0 - alpha) * *q + alpha * target;
        Ok(t)
    }
}

impl Policy for NetAgent {
    fn act(&self, h: usize, s: &[f64]) -> Result<Vec<f64>> {
        let cell = self.select_cell(h, s)?;
        Ok(self.net_actions[cell % self.net_actions.len()].clone())
    }
}

impl Learner for NetAgent {
    fn name(&self) -> &'static str {
        self.name
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
        let initial_value_estimate = self.value_estimate(1, &initial_state)?;
        let mut s = initial_state.clone();
        let mut steps = Vec::with_capacity(horizon);
        let mut realized_return = 0.0;
        for h in 1..=horizon {
            let cell = self.select_cell(h, &s)?;
            let action = self.net_actions[cell % self.net_actions.len()].clone();
            let (reward, next_state) = env::step(env, h, &s, &action, &mut stream)?;
            realized_return += reward;
            let v_next = self.value_estimate(h + 1, &next_state)?;
            let t_after = self.update(h, cell, reward, v_next)?;
            steps.push(StepRecord {
                k,
                h,
                state: s,
                action,
                ball_id: cell,
                depth: 0,
                reward,
                next_state: next_state.clone(),
                v_next,
                t_after,
            });
            s = next_state;
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
        self.net_size() * self.hyper.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ZoomAgent;
    use crate::env::{BumpLine, TabularChain};
    use crate::metric_space::Point;

    fn hyper(h: usize, k: usize, l: f64) -> HyperParams {
        HyperParams::new(h, k, l, 0.1).unwrap()
    }

    #[test]
    fn default_eps_examples() {
        assert_eq!(default_net_eps(4096, 2.0).unwrap(), 0.125);
        assert_eq!(default_net_eps(1, 2.0).unwrap(), 1.0);
        assert!(default_net_eps(0, 2.0).is_err());
    }

    #[test]
    fn unit_eps_is_a_single_cell() {
        let env = BumpLine::new(2).unwrap();
        let mut agent = NetAgent::new(env.space().clone(), 1.0, hyper(2, 10, 4.0)).unwrap();
        assert_eq!(agent.net_size(), 1);
        for k in 1..=10 {
            let rec = agent.run_episode(&env, k, 3).unwrap();
            assert!(rec.steps.iter().all(|st| st.ball_id == 0 && st.action == vec![0.5]));
            assert!((0.0..=2.0).contains(&rec.realized_return));
        }
        assert_eq!(agent.memory_cells(), 2);
    }

    #[test]
    fn tabular_net_has_one_cell_per_pair() {
        let space = Arc::new(tabular_metric_space(5, 2).unwrap());
        let agent = NetAgent::new(space.clone(), 0.5, hyper(5, 10, 5.0)).unwrap();
        assert_eq!(agent.net_size(), 10);
        let q = NetAgent::tabular_qucb(space, hyper(5, 10, 5.0)).unwrap();
        assert_eq!(q.net_size(), 10);
        assert_eq!(q.name(), "tabular_qucb");
        assert!(NetAgent::tabular_qucb(Arc::new(MetricSpace::unit_box(1, 1).unwrap()), hyper(2, 10, 1.0)).is_err());
    }

    #[test]
    fn single_pair_tabular_space() {
        let space = tabular_metric_space(1, 1).unwrap();
        assert_eq!(space.analytic_packing_number(0.5), 1);
        assert_eq!(space.analytic_packing_number(1.0), 1);
        let space = tabular_metric_space(5, 2).unwrap();
        assert_eq!(space.analytic_packing_number(0.99), 10);
        assert_eq!(space.analytic_packing_number(1.0), 1);
    }

    #[test]
    fn first_update_replaces_the_prior() {
        let env = TabularChain::new(5, 2, 3).unwrap();
        let h3 = hyper(3, 100, 3.0);
        let mut agent = NetAgent::tabular_qucb(env.space().clone(), h3).unwrap();
        let rec = agent.run_episode(&env, 1, 0).unwrap();
        let st = &rec.steps[0];
        // α_1 = 1, so q_hat is exactly the first target.
        let expect = st.reward + st.v_next + bonus(1, &h3).unwrap();
        assert!((agent.q_hat(1, st.ball_id).unwrap() - expect).abs() < 1e-12);
        assert_eq!(agent.visits(1, st.ball_id).unwrap(), 1);
    }

    #[test]
    fn episodes_are_reproducible() {
        let env = BumpLine::new(3).unwrap();
        let run = || {
            let mut a = NetAgent::new(env.space().clone(), 0.125, hyper(3, 50, 4.0)).unwrap();
            (1..=50)
                .map(|k| a.run_episode(&env, k, 11).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zooming_refines_onto_the_tabular_net() {
        let env = TabularChain::new(5, 2, 5).unwrap();
        let h = hyper(5, 300, 5.0);
        let mut zoom = ZoomAgent::new(env.space().clone(), h, 4).unwrap();
        let mut net = NetAgent::new(env.space().clone(), 0.5, h).unwrap();
        let cells: Vec<Point> = net
            .net_states()
            .iter()
            .flat_map(|s| net.net_actions().iter().map(move |a| Point::new(s.clone(), a.clone())))
            .collect();
        for k in 1..=300 {
            let zr = zoom.run_episode(&env, k, 4).unwrap();
            net.run_episode(&env, k, 4).unwrap();
            for st in &zr.steps {
                let p = Point::new(st.state.clone(), st.action.clone());
                assert!(cells.contains(&p));
            }
        }
        for part in zoom.partitions() {
            for b in part.balls().iter().filter(|b| b.depth >= 1) {
                assert!(cells.contains(&b.center), "center {:?} is not a net cell", b.center);
            }
        }
    }
}
