//! Ground truth by backward induction on a grid, policy evaluation by
//! rollout, and regret accounting.
//!
//! States and actions live on the regular per-axis grid of
//! [`MetricSpace::grid_points`]; next states are snapped to the nearest grid
//! cell. Tabular spaces are enumerated exactly.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{EpisodeRecord, Policy};
use crate::env::{self, Environment, SeedStream};
use crate::error::{Error, Result};
use crate::metric_space::{MetricSpace, Point, MAX_GRID_DIMENSION};

/// Smallest per-axis resolution accepted for continuous spaces.
pub const MIN_GRID_RESOLUTION: usize = 16;

/// Rollouts used to evaluate a policy on a stochastic environment.
pub const MONTE_CARLO_ROLLOUTS: usize = 512;

/// Slack for regret increments on exactly evaluated environments.
pub const REGRET_TOLERANCE: f64 = 1e-9;

/// A regular grid over one side (states or actions) of the space.
#[derive(Debug, Clone)]
struct AxisGrid {
    axes: Vec<Vec<f64>>,
    tabular: bool,
}

impl AxisGrid {
    fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    /// Lexicographic index of the nearest cell.
    fn snap(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (ax, &v) in self.axes.iter().zip(x) {
            let n = ax.len();
            let i = if n == 1 {
                0
            } else if self.tabular {
                (v.round().max(0.0) as usize).min(n - 1)
            } else {
                let (lo, hi) = (ax[0], ax[n - 1]);
                let f = (v - lo) / (hi - lo) * (n - 1) as f64;
                (f.round().max(0.0) as usize).min(n - 1)
            };
            idx = idx * n + i;
        }
        idx
    }

    fn coords(&self, mut idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (d, ax) in self.axes.iter().enumerate().rev() {
            out[d] = ax[idx % ax.len()];
            idx /= ax.len();
        }
        out
    }

    fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.axes.len()];
        for (d, ax) in self.axes.iter().enumerate().rev() {
            out[d] = idx % ax.len();
            idx /= ax.len();
        }
        out
    }
}

/// `Q*_h` and `V*_h` on the oracle grid, for `h = 1..=H` (and `V*_{H+1} = 0`).
#[derive(Debug, Clone)]
pub struct ValueTable {
    space: Arc<MetricSpace>,
    horizon: usize,
    resolution: usize,
    states: AxisGrid,
    actions: AxisGrid,
    state_points: Vec<Vec<f64>>,
    action_points: Vec<Vec<f64>>,
    /// `q[h-1][si * |A_grid| + ai]`.
    q: Vec<Vec<f64>>,
    /// `v[h-1][si]`, with `v[H]` all zero.
    v: Vec<Vec<f64>>,
}

impl ValueTable {
    /// Backward induction `h = H, …, 1` of the Bellman optimality equation.
    pub fn new(env: &dyn Environment, resolution: usize) -> Result<Self> {
        let space = env.space().clone();
        let tabular = space.is_tabular();
        if !tabular && space.dim() > MAX_GRID_DIMENSION {
            return Err(Error::Precision(format!(
                "grid oracle supports dimension <= {MAX_GRID_DIMENSION}, space has {}",
                space.dim()
            )));
        }
        if !tabular && resolution < MIN_GRID_RESOLUTION {
            return Err(Error::Contract(format!(
                "grid resolution {resolution} below {MIN_GRID_RESOLUTION}"
            )));
        }
        let grid = |bounds: &[crate::metric_space::Interval]| AxisGrid {
            axes: bounds.iter().map(|iv| space.axis_grid(iv, resolution)).collect(),
            tabular,
        };
        let states = grid(space.state_bounds());
        let actions = grid(space.action_bounds());
        let state_points: Vec<Vec<f64>> = (0..states.len()).map(|i| states.coords(i)).collect();
        let action_points: Vec<Vec<f64>> = (0..actions.len()).map(|i| actions.coords(i)).collect();

        let horizon = env.horizon();
        let na = action_points.len();
        let mut q = vec![Vec::new(); horizon];
        let mut v = vec![Vec::new(); horizon + 1];
        v[horizon] = vec![0.0; state_points.len()];
        for h in (1..=horizon).rev() {
            let v_next = &v[h];
            let rows: Vec<Vec<f64>> = state_points
                .par_iter()
                .map(|s| {
                    action_points
                        .iter()
                        .map(|a| {
                            let future: f64 = env
                                .transitions(h, s, a)
                                .iter()
                                .map(|(w, s2)| w * v_next[states.snap(s2)])
                                .sum();
                            env.reward(h, s, a) + future
                        })
                        .collect()
                })
                .collect();
            v[h - 1] = rows
                .iter()
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut flat = Vec::with_capacity(rows.len() * na);
            rows.into_iter().for_each(|row| flat.extend(row));
            q[h - 1] = flat;
        }
        Ok(Self {
            space,
            horizon,
            resolution,
            states,
            actions,
            state_points,
            action_points,
            q,
            v,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn space(&self) -> &Arc<MetricSpace> {
        &self.space
    }

    pub fn num_state_cells(&self) -> usize {
        self.state_points.len()
    }

    pub fn num_action_cells(&self) -> usize {
        self.action_points.len()
    }

    fn check_step(&self, h: usize, allow_terminal: bool) -> Result<()> {
        let top = if allow_terminal { self.horizon + 1 } else { self.horizon };
        if h == 0 || h > top {
            return Err(Error::Contract(format!("step {h} outside 1..={top}")));
        }
        Ok(())
    }

    /// `V*_h(s)` at the nearest grid state; `h = H + 1` gives 0.
    pub fn v_star(&self, h: usize, s: &[f64]) -> Result<f64> {
        self.check_step(h, true)?;
        self.space.check_state(s)?;
        Ok(self.v[h - 1][self.states.snap(s)])
    }

    /// `Q*_h(s, a)` at the nearest grid pair.
    pub fn q_star(&self, h: usize, s: &[f64], a: &[f64]) -> Result<f64> {
        self.check_step(h, false)?;
        self.space.check_state(s)?;
        self.space.check_action(a)?;
        let na = self.action_points.len();
        Ok(self.q[h - 1][self.states.snap(s) * na + self.actions.snap(a)])
    }

    /// `V*_h` over all grid states, in lexicographic order.
    pub fn v_row(&self, h: usize) -> Result<&[f64]> {
        self.check_step(h, true)?;
        Ok(&self.v[h - 1])
    }

    /// Largest `|Q*_h − (r_h + Σ w·V*_{h+1}(snap(s')))|` over all cells and steps.
    pub fn bellman_residual(&self, env: &dyn Environment) -> f64 {
        let na = self.action_points.len();
        (1..=self.horizon)
            .flat_map(|h| (0..self.state_points.len()).map(move |si| (h, si)))
            .par_bridge()
            .map(|(h, si)| {
                let s = &self.state_points[si];
                let mut worst: f64 = 0.0;
                for (ai, a) in self.action_points.iter().enumerate() {
                    let future: f64 = env
                        .transitions(h, s, a)
                        .iter()
                        .map(|(w, s2)| w * self.v[h][self.states.snap(s2)])
                        .sum();
                    let target = env.reward(h, s, a) + future;
                    worst = worst.max((self.q[h - 1][si * na + ai] - target).abs());
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Largest finite-difference ratio `|ΔQ*_h| / dist` between neighboring
    /// grid cells (all `3^d − 1` neighbors), over all steps. Tabular spaces
    /// compare every pair.
    pub fn lipschitz_estimate(&self) -> f64 {
        let na = self.action_points.len();
        let point = |idx: usize| {
            Point::new(
                self.state_points[idx / na].clone(),
                self.action_points[idx % na].clone(),
            )
        };
        let cells = self.state_points.len() * na;
        if self.space.is_tabular() {
            let mut best: f64 = 0.0;
            for q in &self.q {
                for i in 0..cells {
                    for j in (i + 1)..cells {
                        let d = self.space.distance(&point(i), &point(j));
                        if d > 0.0 {
                            best = best.max((q[i] - q[j]).abs() / d);
                        }
                    }
                }
            }
            return best;
        }

        let shape: Vec<usize> = self
            .states
            .axes
            .iter()
            .chain(&self.actions.axes)
            .map(Vec::len)
            .collect();
        let ds = self.states.axes.len();
        let offsets: Vec<Vec<i64>> = (0..3usize.pow(shape.len() as u32))
            .map(|mut c| {
                (0..shape.len())
                    .map(|_| {
                        let o = (c % 3) as i64 - 1;
                        c /= 3;
                        o
                    })
                    .collect::<Vec<i64>>()
            })
            .filter(|o| o.iter().any(|&x| x != 0))
            .collect();
        let split = |idx: usize| {
            let mut m = self.states.multi_index(idx / na);
            m.extend(self.actions.multi_index(idx % na));
            m
        };
        let join = |m: &[usize]| {
            let si = m[..ds].iter().zip(&shape[..ds]).fold(0, |acc, (&i, &n)| acc * n + i);
            let ai = m[ds..].iter().zip(&shape[ds..]).fold(0, |acc, (&i, &n)| acc * n + i);
            si * na + ai
        };
        (0..cells)
            .into_par_iter()
            .map(|i| {
                let m = split(i);
                let x = point(i);
                let mut best: f64 = 0.0;
                for off in &offsets {
                    let nb: Option<Vec<usize>> = m
                        .iter()
                        .zip(off)
                        .zip(&shape)
                        .map(|((&c, &o), &n)| {
                            let t = c as i64 + o;
                            (0..n as i64).contains(&t).then_some(t as usize)
                        })
                        .collect();
                    let Some(nb) = nb else { continue };
                    let j = join(&nb);
                    let d = self.space.distance(&x, &point(j));
                    if d > 0.0 {
                        for q in &self.q {
                            best = best.max((q[i] - q[j]).abs() / d);
                        }
                    }
                }
                best
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Sup-norm distance from `Q*_h` to its best `L`-Lipschitz approximation,
    /// on the sub-grid keeping every `stride`-th point per axis. The optimum
    /// is attained by the mean of the upper and lower McShane envelopes.
    pub fn lipschitz_fit_deviation(&self, h: usize, lipschitz: f64, stride: usize) -> Result<f64> {
        self.check_step(h, false)?;
        if stride == 0 {
            return Err(Error::Contract("stride must be at least 1".into()));
        }
        let na = self.action_points.len();
        let keep = |g: &AxisGrid, idx: usize| g.multi_index(idx).iter().all(|&i| i % stride == 0);
        let cells: Vec<(Point, f64)> = (0..self.state_points.len())
            .filter(|&si| keep(&self.states, si))
            .flat_map(|si| {
                (0..na)
                    .filter(move |&ai| keep(&self.actions, ai))
                    .map(move |ai| (si, ai))
            })
            .map(|(si, ai)| {
                (
                    Point::new(self.state_points[si].clone(), self.action_points[ai].clone()),
                    self.q[h - 1][si * na + ai],
                )
            })
            .collect();
        let dev = cells
            .par_iter()
            .map(|(x, fx)| {
                let mut upper = f64::INFINITY;
                let mut lower = f64::NEG_INFINITY;
                for (y, fy) in &cells {
                    let d = lipschitz * self.space.distance(x, y);
                    upper = upper.min(fy + d);
                    lower = lower.max(fy - d);
                }
                (fx - 0.5 * (upper + lower)).abs()
            })
            .reduce(|| 0.0, f64::max);
        Ok(dev)
    }

    /// The greedy policy of the table: argmax over action cells at the
    /// nearest grid state, ties to the lowest action index.
    pub fn greedy_policy(&self) -> GridGreedy<'_> {
        GridGreedy { table: self }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridGreedy<'a> {
    table: &'a ValueTable,
}

impl Policy for GridGreedy<'_> {
    fn act(&self, h: usize, s: &[f64]) -> Result<Vec<f64>> {
        let t = self.table;
        t.check_step(h, false)?;
        t.space.check_state(s)?;
        let na = t.action_points.len();
        let row = &t.q[h - 1][t.states.snap(s) * na..][..na];
        let mut best = 0;
        for (i, &q) in row.iter().enumerate() {
            if q > row[best] {
                best = i;
            }
        }
        Ok(t.action_points[best].clone())
    }
}

/// `V^π_1(s_1)` with its Monte-Carlo standard error (0 when exact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub mean: f64,
    pub std_err: f64,
    pub rollouts: usize,
    pub exact: bool,
}

/// Evaluates a deterministic policy from `s1` by forward rollout: a single
/// rollout on deterministic dynamics, otherwise [`MONTE_CARLO_ROLLOUTS`]
/// seeded rollouts.
pub fn evaluate_policy(env: &dyn Environment, policy: &dyn Policy, s1: &[f64], seed: u64) -> Result<PolicyValue> {
    env.space().check_state(s1)?;
    let rollout = |i: u64| -> Result<f64> {
        let mut noise = SeedStream::new(seed, i);
        let mut s = s1.to_vec();
        let mut total = 0.0;
        for h in 1..=env.horizon() {
            let a = policy.act(h, &s)?;
            let (r, next) = env::step(env, h, &s, &a, &mut noise)?;
            total += r;
            s = next;
        }
        Ok(total)
    };
    if env.is_deterministic() {
        return Ok(PolicyValue {
            mean: rollout(0)?,
            std_err: 0.0,
            rollouts: 1,
            exact: true,
        });
    }
    let m = MONTE_CARLO_ROLLOUTS;
    let returns = (0..m as u64).map(rollout).collect::<Result<Vec<f64>>>()?;
    let mean = returns.iter().sum::<f64>() / m as f64;
    let var = returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok(PolicyValue {
        mean,
        std_err: (var / m as f64).sqrt(),
        rollouts: m,
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub k: usize,
    pub v_star: f64,
    pub v_pi: f64,
    pub increment: f64,
    pub cumulative: f64,
    /// False when `v_pi` is a realized return on a stochastic environment.
    pub exact: bool,
}

/// Per-episode and cumulative regret of a run.
///
/// On deterministic environments the behavior during episode `k` is a fixed
/// deterministic map `(h, s) → a`, so the realized return is `V^{π_k}_1(s_1)`
/// exactly. On stochastic environments the realized return is an unbiased
/// estimate and the rows are flagged as inexact.
pub fn regret_curve(
    env: &dyn Environment,
    records: &[EpisodeRecord],
    table: &ValueTable,
    episodes: usize,
) -> Result<Vec<RegretRecord>> {
    if records.len() != episodes {
        return Err(Error::Contract(format!(
            "expected {episodes} episode records, got {}",
            records.len()
        )));
    }
    let exact = env.is_deterministic();
    let mut cumulative = 0.0;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if rec.k != i + 1 {
            return Err(Error::Contract(format!(
                "record {i} is episode {}, expected {}",
                rec.k,
                i + 1
            )));
        }
        let v_star = table.v_star(1, &rec.initial_state)?;
        let increment = v_star - rec.realized_return;
        cumulative += increment;
        out.push(RegretRecord {
            k: rec.k,
            v_star,
            v_pi: rec.realized_return,
            increment,
            cumulative,
            exact,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_misspecified, BumpLine, TabularChain};

    struct Constant(Vec<f64>);

    impl Policy for Constant {
        fn act(&self, _h: usize, _s: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct ZeroReward(BumpLine);

    impl Environment for ZeroReward {
        fn space(&self) -> &Arc<MetricSpace> {
            self.0.space()
        }
        fn horizon(&self) -> usize {
            self.0.horizon()
        }
        fn descriptor(&self) -> env::EnvDescriptor {
            self.0.descriptor()
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn reward(&self, _h: usize, _s: &[f64], _a: &[f64]) -> f64 {
            0.0
        }
        fn next_state(&self, h: usize, s: &[f64], a: &[f64], n: &mut SeedStream) -> Vec<f64> {
            self.0.next_state(h, s, a, n)
        }
        fn transitions(&self, h: usize, s: &[f64], a: &[f64]) -> Vec<(f64, Vec<f64>)> {
            self.0.transitions(h, s, a)
        }
        fn is_deterministic(&self) -> bool {
            true
        }
        fn initial_state(&self, n: &mut SeedStream) -> Vec<f64> {
            self.0.initial_state(n)
        }
    }

    #[test]
    fn one_step_bump_is_one_everywhere() {
        let env = BumpLine::new(1).unwrap();
        let t = ValueTable::new(&env, 64).unwrap();
        assert!(t.v_row(1).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(t.v_star(2, &[0.3]).unwrap(), 0.0);
    }

    #[test]
    fn chain_needs_four_moves() {
        for h in 4..=7 {
            let env = TabularChain::new(5, 2, h).unwrap();
            let t = ValueTable::new(&env, 0).unwrap();
            assert_eq!(t.v_star(1, &[0.0]).unwrap(), (h - 4) as f64);
        }
        let env = TabularChain::new(5, 2, 3).unwrap();
        assert_eq!(ValueTable::new(&env, 0).unwrap().v_star(1, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let env = ZeroReward(BumpLine::new(3).unwrap());
        let t = ValueTable::new(&env, 32).unwrap();
        for h in 1..=4 {
            assert!(t.v_row(h).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn coarse_grids_are_rejected() {
        let env = BumpLine::new(2).unwrap();
        assert!(matches!(ValueTable::new(&env, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn values_are_bounded_by_remaining_steps() {
        let env = make_misspecified(Box::new(BumpLine::new(3).unwrap()), 0.1, 50.0).unwrap();
        let t = ValueTable::new(&env, 128).unwrap();
        for h in 1..=3 {
            let cap = (3 - h + 1) as f64;
            assert!(t.v_row(h).unwrap().iter().all(|&v| (0.0..=cap + 1e-12).contains(&v)));
        }
        assert!(t.bellman_residual(&env) <= 1e-9);
    }

    #[test]
    fn q_star_respects_certified_lipschitz_constant() {
        let bump = BumpLine::new(3).unwrap();
        let t = ValueTable::new(&bump, 256).unwrap();
        let est = t.lipschitz_estimate();
        assert!(est <= bump.lipschitz() + 1e-9, "estimate {est}");
        assert!(est > 0.5 * bump.lipschitz());

        let chain = TabularChain::new(5, 2, 5).unwrap();
        let t = ValueTable::new(&chain, 0).unwrap();
        assert!(t.lipschitz_estimate() <= chain.lipschitz());
    }

    #[test]
    fn grid_refinement_is_stable() {
        let env = BumpLine::new(3).unwrap();
        let coarse = ValueTable::new(&env, 256).unwrap().v_star(1, &[0.5]).unwrap();
        let fine = ValueTable::new(&env, 512).unwrap().v_star(1, &[0.5]).unwrap();
        assert!((coarse - fine).abs() < 1e-3);
        assert_eq!(coarse, 3.0);
    }

    #[test]
    fn misspecified_q_is_near_a_lipschitz_function() {
        let eps = 0.1;
        let env = make_misspecified(Box::new(BumpLine::new(3).unwrap()), eps, 50.0).unwrap();
        let t = ValueTable::new(&env, 256).unwrap();
        for h in 1..=3 {
            let dev = t.lipschitz_fit_deviation(h, env.lipschitz(), 4).unwrap();
            assert!(dev <= 2.0 * eps, "step {h}: deviation {dev}");
        }
    }

    #[test]
    fn constant_action_rollout_is_exact() {
        // s: 0.5 → 0.4 → 0.3, rewards 0, 0.2, 0.4.
        let env = BumpLine::new(3).unwrap();
        let v = evaluate_policy(&env, &Constant(vec![0.0]), &[0.5], 0).unwrap();
        assert!(v.exact);
        assert!((v.mean - 0.6).abs() < 1e-12);
    }

    #[test]
    fn greedy_table_policy_is_near_optimal() {
        let env = BumpLine::new(3).unwrap();
        let t = ValueTable::new(&env, 256).unwrap();
        let v = evaluate_policy(&env, &t.greedy_policy(), &[0.5], 0).unwrap();
        let star = t.v_star(1, &[0.5]).unwrap();
        assert!(v.mean <= star + 1e-9);
        assert!(star - v.mean < 0.05);

        let chain = TabularChain::new(5, 2, 5).unwrap();
        let t = ValueTable::new(&chain, 0).unwrap();
        let v = evaluate_policy(&chain, &t.greedy_policy(), &[0.0], 0).unwrap();
        assert_eq!(v.mean, 1.0);
    }

    #[test]
    fn stochastic_rollouts_report_standard_error() {
        let env = BumpLine::new(3).unwrap().with_noise(0.05).unwrap();
        let v = evaluate_policy(&env, &Constant(vec![0.0]), &[0.5], 7).unwrap();
        assert!(!v.exact);
        assert_eq!(v.rollouts, MONTE_CARLO_ROLLOUTS);
        assert!(v.std_err > 0.0 && v.std_err < 0.05);
        assert!((v.mean - 0.6).abs() < 0.05);
    }

    #[test]
    fn regret_curve_accounting() {
        let env = BumpLine::new(3).unwrap();
        let t = ValueTable::new(&env, 64).unwrap();
        let rec = |k, ret| EpisodeRecord {
            k,
            initial_state: vec![0.5],
            steps: Vec::new(),
            realized_return: ret,
            initial_value_estimate: 3.0,
        };
        let rows = regret_curve(&env, &[rec(1, 3.0), rec(2, 2.5), rec(3, 1.0)], &t, 3).unwrap();
        let cum: Vec<f64> = rows.iter().map(|r| r.cumulative).collect();
        assert_eq!(cum, vec![0.0, 0.5, 2.5]);
        assert!(rows.iter().all(|r| r.exact));
        assert!(matches!(
            regret_curve(&env, &[rec(1, 3.0)], &t, 2),
            Err(Error::Contract(_))
        ));
        assert!(regret_curve(&env, &[rec(2, 3.0)], &t, 1).is_err());
    }

    #[test]
    fn uniform_policy_regret_grows_linearly() {
        // A policy that never learns has a constant gap, hence linear regret.
        let env = BumpLine::new(3).unwrap();
        let t = ValueTable::new(&env, 64).unwrap();
        let gap = 3.0 - evaluate_policy(&env, &Constant(vec![0.0]), &[0.5], 0).unwrap().mean;
        let records: Vec<EpisodeRecord> = (1..=100)
            .map(|k| EpisodeRecord {
                k,
                initial_state: vec![0.5],
                steps: Vec::new(),
                realized_return: 3.0 - gap,
                initial_value_estimate: 3.0,
            })
            .collect();
        let rows = regret_curve(&env, &records, &t, 100).unwrap();
        assert!((rows[99].cumulative - 100.0 * gap).abs() < 1e-9);
        assert!((rows[49].cumulative - 50.0 * gap).abs() < 1e-9);
    }
}
