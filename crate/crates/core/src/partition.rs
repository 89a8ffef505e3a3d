//! Adaptive ball partition of one step's state-action space.
//!
//! Every ball is a closed metric ball `{x : dist(x_B, x) <= rad(B)}` with a
//! dyadic radius `2^-depth`. The *domain* of a ball is the ball minus every
//! ball of strictly smaller radius; domains cover the space, and balls of a
//! given depth form a packing at their radius.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_space::{Interval, MetricSpace, Point};

/// Random witness draws tried when exact cell enumeration is too large.
pub const WITNESS_SAMPLE_DRAWS: usize = 64;

/// Upper bound on the number of grid cells enumerated in a witness search.
const MAX_WITNESS_CELLS: usize = 4096;

/// Radius of a ball at `depth`: `2^-depth`, exact in binary floating point.
pub fn radius_of(depth: u32) -> f64 {
    0.5f64.powi(depth as i32)
}

/// Visits a ball of `depth` needs before it may spawn a child: `1/rad² = 4^depth`.
pub fn activation_threshold(depth: u32) -> u64 {
    1u64 << (2 * depth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub id: usize,
    pub center: Point,
    pub depth: u32,
    pub parent_id: Option<usize>,
    pub q_hat: f64,
    pub visits: u64,
}

impl Ball {
    pub fn radius(&self) -> f64 {
        radius_of(self.depth)
    }
}

/// A ball relevant to some state, with an action placing `(s, a)` in its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevantBall {
    pub ball_id: usize,
    pub witness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub cover_ok: bool,
    pub packing_ok: bool,
    /// One root of depth 0, and every child one level below its parent.
    pub structure_ok: bool,
    pub samples_checked: usize,
    pub uncovered: Vec<Point>,
    pub packing_violations: Vec<(usize, usize)>,
}

impl InvariantReport {
    pub fn ok(&self) -> bool {
        self.cover_ok && self.packing_ok && self.structure_ok
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    step: usize,
    space: Arc<MetricSpace>,
    balls: Vec<Ball>,
    witness_seed: u64,
}

impl Partition {
    /// A partition with a single root ball of radius 1 centered at the
    /// space's midpoint, `q_hat = H` and no visits.
    pub fn new(space: Arc<MetricSpace>, step: usize, horizon: usize) -> Result<Self> {
        if step == 0 || step > horizon {
            return Err(Error::Contract(format!("step {step} outside 1..={horizon}")));
        }
        let root = Ball {
            id: 0,
            center: space.midpoint(),
            depth: 0,
            parent_id: None,
            q_hat: horizon as f64,
            visits: 0,
        };
        Ok(Self {
            step,
            space,
            balls: vec![root],
            witness_seed: 0,
        })
    }

    /// Builds a partition from arbitrary balls without checking any
    /// invariant. Ball ids are reassigned to positions.
    pub fn from_balls(space: Arc<MetricSpace>, step: usize, balls: Vec<Ball>) -> Self {
        let balls = balls
            .into_iter()
            .enumerate()
            .map(|(i, mut b)| {
                b.id = i;
                b
            })
            .collect();
        Self {
            step,
            space,
            balls,
            witness_seed: 0,
        }
    }

    /// Seed for the randomized fallback of the witness search.
    pub fn with_witness_seed(mut self, seed: u64) -> Self {
        self.witness_seed = seed;
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn space(&self) -> &MetricSpace {
        &self.space
    }

    pub fn balls(&self) -> &[Ball] {
        &self.balls
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn ball(&self, id: usize) -> Result<&Ball> {
        self.balls.get(id).ok_or(Error::UnknownBall(id))
    }

    pub(crate) fn ball_mut(&mut self, id: usize) -> Result<&mut Ball> {
        self.balls.get_mut(id).ok_or(Error::UnknownBall(id))
    }

    pub fn max_depth(&self) -> u32 {
        self.balls.iter().map(|b| b.depth).max().unwrap_or(0)
    }

    /// Number of balls at each depth, indexed by depth.
    pub fn depth_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.max_depth() as usize + 1];
        for b in &self.balls {
            counts[b.depth as usize] += 1;
        }
        counts
    }

    fn ball_contains(&self, b: &Ball, x: &Point) -> bool {
        self.space.distance(&b.center, x) <= b.radius()
    }

    fn in_domain(&self, b: &Ball, x: &Point) -> bool {
        self.ball_contains(b, x)
            && self
                .balls
                .iter()
                .filter(|o| o.depth > b.depth)
                .all(|o| !self.ball_contains(o, x))
    }

    /// Whether `x` lies in the ball and outside every strictly smaller ball.
    pub fn domain_contains(&self, ball_id: usize, x: &Point) -> Result<bool> {
        let b = self.ball(ball_id)?;
        Ok(self.in_domain(b, x))
    }

    /// `L·rad(B) + min over B' with rad(B') >= rad(B) of q_hat(B') + L·dist(B, B')`.
    pub fn index(&self, ball_id: usize, lipschitz: f64) -> Result<f64> {
        if lipschitz.is_nan() || lipschitz <= 0.0 {
            return Err(Error::Contract(format!(
                "Lipschitz constant {lipschitz} must be positive"
            )));
        }
        let b = self.ball(ball_id)?;
        Ok(self.index_of(b, lipschitz))
    }

    pub(crate) fn index_of(&self, b: &Ball, lipschitz: f64) -> f64 {
        let best = self
            .balls
            .iter()
            .filter(|o| o.depth <= b.depth)
            .map(|o| o.q_hat + lipschitz * self.space.distance(&b.center, &o.center))
            .fold(f64::INFINITY, f64::min);
        lipschitz * b.radius() + best
    }

    /// All balls whose domain meets the slice `{s} × A`, each with a witness
    /// action. Witnesses are tried in a fixed order: the ball's own center
    /// action, then the midpoints of the cells cut out by the smaller balls'
    /// action intervals, then seeded random draws. Every returned witness
    /// is checked against [`Partition::domain_contains`].
    pub fn relevant_balls(&self, s: &[f64]) -> Result<Vec<RelevantBall>> {
        self.space.check_state(s)?;
        let candidates: Vec<&Ball> = self
            .balls
            .iter()
            .filter(|b| self.space.state_distance(s, &b.center.state) <= b.radius())
            .collect();
        let mut out = Vec::new();
        for b in &candidates {
            let excluders: Vec<&Ball> = candidates.iter().copied().filter(|o| o.depth > b.depth).collect();
            if let Some(witness) = self.find_witness(s, b, &excluders) {
                let x = Point::new(s.to_vec(), witness);
                if !self.in_domain(b, &x) {
                    return Err(Error::Invariant(format!(
                        "witness {:?} for ball {} failed the domain check",
                        x.action, b.id
                    )));
                }
                out.push(RelevantBall {
                    ball_id: b.id,
                    witness: x.action,
                });
            }
        }
        if out.is_empty() {
            return Err(Error::Invariant(format!(
                "no relevant ball for state {s:?} at step {}",
                self.step
            )));
        }
        Ok(out)
    }

    fn find_witness(&self, s: &[f64], b: &Ball, excluders: &[&Ball]) -> Option<Vec<f64>> {
        let sp = &*self.space;
        let survives = |a: &[f64]| {
            sp.action_distance(a, &b.center.action) <= b.radius()
                && excluders
                    .iter()
                    .all(|o| sp.action_distance(a, &o.center.action) > o.radius())
        };
        if survives(&b.center.action) {
            return Some(b.center.action.clone());
        }

        if sp.is_tabular() {
            let n = sp.action_bounds()[0].hi as usize;
            return (0..=n).map(|i| vec![i as f64]).find(|a| survives(a));
        }

        let scale = sp.diameter_scale();
        let slice: Vec<Interval> = sp
            .action_bounds()
            .iter()
            .zip(&b.center.action)
            .map(|(iv, &c)| {
                let half = b.radius() * scale;
                Interval::new((c - half).max(iv.lo), (c + half).min(iv.hi))
            })
            .collect();

        let axes: Vec<Vec<f64>> = slice
            .iter()
            .enumerate()
            .map(|(i, iv)| {
                if iv.width() <= 0.0 {
                    return vec![iv.lo];
                }
                let mut cuts = vec![iv.lo, iv.hi];
                for o in excluders {
                    let half = o.radius() * scale;
                    for e in [o.center.action[i] - half, o.center.action[i] + half] {
                        if e > iv.lo && e < iv.hi {
                            cuts.push(e);
                        }
                    }
                }
                cuts.sort_by(f64::total_cmp);
                cuts.dedup();
                cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            })
            .collect();

        let cells = axes.iter().try_fold(1usize, |acc, ax| acc.checked_mul(ax.len()));
        if matches!(cells, Some(c) if c <= MAX_WITNESS_CELLS) {
            let mut idx = vec![0usize; axes.len()];
            loop {
                let a: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
                if survives(&a) {
                    return Some(a);
                }
                let mut d = axes.len();
                loop {
                    if d == 0 {
                        break;
                    }
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < axes[d].len() {
                        break;
                    }
                    idx[d] = 0;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(witness_stream_seed(self.witness_seed, b.id, s));
        (0..WITNESS_SAMPLE_DRAWS)
            .map(|_| {
                slice
                    .iter()
                    .map(|iv| {
                        if iv.width() > 0.0 {
                            rng.gen_range(iv.lo..=iv.hi)
                        } else {
                            iv.lo
                        }
                    })
                    .collect::<Vec<f64>>()
            })
            .find(|a| survives(a))
    }

    /// Spawns a child of half the parent's radius at `center`. The parent
    /// must have at least `4^depth` visits and `center` must lie in the
    /// parent's domain. The parent's statistics are left untouched.
    pub fn activate_child(&mut self, parent_id: usize, center: Point, horizon: usize) -> Result<usize> {
        self.space.check_point(&center)?;
        let parent = self.ball(parent_id)?;
        if parent.visits < activation_threshold(parent.depth) {
            return Err(Error::Contract(format!(
                "ball {parent_id} has {} visits, needs {} to activate a child",
                parent.visits,
                activation_threshold(parent.depth)
            )));
        }
        if !self.in_domain(parent, &center) {
            return Err(Error::Contract(format!(
                "child center {center:?} is not in the domain of ball {parent_id}"
            )));
        }
        let id = self.balls.len();
        let depth = parent.depth + 1;
        self.balls.push(Ball {
            id,
            center,
            depth,
            parent_id: Some(parent_id),
            q_hat: horizon as f64,
            visits: 0,
        });
        Ok(id)
    }

    /// Checks domain coverage on `sample_count` seeded random points (plus
    /// the full table for tabular spaces) and the per-depth packing property.
    /// Failures are reported, never raised.
    pub fn verify_invariants(&self, sample_count: usize, seed: u64) -> InvariantReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples: Vec<Point> = (0..sample_count.max(1))
            .map(|_| self.space.sample_point(&mut rng))
            .collect();
        if self.space.is_tabular() {
            samples.extend(self.space.grid_points(0).unwrap_or_default());
        }
        let uncovered: Vec<Point> = samples
            .iter()
            .filter(|x| !self.is_covered(x))
            .take(16)
            .cloned()
            .collect();
        let packing_violations = self.packing_violations();
        InvariantReport {
            cover_ok: uncovered.is_empty(),
            packing_ok: packing_violations.is_empty(),
            structure_ok: self.structure_ok(),
            samples_checked: samples.len(),
            uncovered,
            packing_violations,
        }
    }

    /// The deepest ball containing `x`, ties to the lowest id.
    pub(crate) fn deepest_containing(&self, x: &Point) -> Option<usize> {
        let mut best: Option<&Ball> = None;
        for b in &self.balls {
            if self.ball_contains(b, x) && best.is_none_or(|c| b.depth > c.depth) {
                best = Some(b);
            }
        }
        best.map(|b| b.id)
    }

    fn is_covered(&self, x: &Point) -> bool {
        match self.deepest_containing(x) {
            Some(id) if self.in_domain(&self.balls[id], x) => true,
            _ => self.balls.iter().any(|b| self.in_domain(b, x)),
        }
    }

    pub(crate) fn packing_violations_for(&self, b: &Ball) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (id, depth, center) = (b.id, b.depth, b.center.clone());
        self.balls
            .iter()
            .filter(move |o| o.depth == depth && o.id < id)
            .filter(move |o| self.space.distance(&o.center, &center) <= radius_of(depth))
            .map(move |o| (o.id, id))
    }

    fn packing_violations(&self) -> Vec<(usize, usize)> {
        self.balls.iter().flat_map(|b| self.packing_violations_for(b)).collect()
    }

    fn structure_ok(&self) -> bool {
        let roots = self.balls.iter().filter(|b| b.depth == 0).count();
        roots == 1
            && self.balls.iter().all(|b| match b.parent_id {
                None => b.depth == 0,
                Some(p) => self.balls.get(p).is_some_and(|pb| pb.depth + 1 == b.depth && p < b.id),
            })
    }

    /// JSON dump of every ball, for debugging.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.balls)?)
    }
}

fn witness_stream_seed(seed: u64, ball_id: usize, s: &[f64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15 ^ (ball_id as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    for x in s {
        h = (h ^ x.to_bits()).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Incremental version of [`Partition::verify_invariants`] for checking a
/// growing partition after every episode.
///
/// A fixed sample set is drawn once. Each sample remembers its owner, the
/// deepest ball containing it; only samples whose owner changes when new
/// balls appear are re-checked against `domain_contains`, and packing is
/// checked for each new ball against its own depth.
#[derive(Debug, Clone)]
pub struct InvariantMonitor {
    samples: Vec<Point>,
    owners: Vec<usize>,
    seen: usize,
}

impl InvariantMonitor {
    pub fn new(partition: &Partition, sample_count: usize, seed: u64) -> Self {
        let sp = partition.space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples: Vec<Point> = (0..sample_count.max(1)).map(|_| sp.sample_point(&mut rng)).collect();
        if sp.is_tabular() {
            samples.extend(sp.grid_points(0).unwrap_or_default());
        }
        let owners = vec![0; samples.len()];
        Self {
            samples,
            owners,
            seen: 0,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Folds in every ball created since the last call and re-checks what changed.
    pub fn refresh(&mut self, partition: &Partition) -> InvariantReport {
        let balls = partition.balls();
        let mut changed = vec![self.seen == 0; self.samples.len()];
        let mut packing_violations = Vec::new();
        for b in &balls[self.seen.min(balls.len())..] {
            packing_violations.extend(partition.packing_violations_for(b));
            for (i, x) in self.samples.iter().enumerate() {
                let owner_depth = if self.seen == 0 && b.id == 0 {
                    None
                } else {
                    Some(balls[self.owners[i]].depth)
                };
                if partition.ball_contains(b, x) && owner_depth.is_none_or(|d| b.depth > d) {
                    self.owners[i] = b.id;
                    changed[i] = true;
                }
            }
        }
        self.seen = balls.len();
        let uncovered: Vec<Point> = self
            .samples
            .iter()
            .zip(&self.owners)
            .zip(&changed)
            .filter(|&(_, &c)| c)
            .map(|((x, &owner), _)| (x, owner))
            .filter(|&(x, owner)| !partition.in_domain(&balls[owner], x) && !partition.is_covered(x))
            .map(|(x, _)| x.clone())
            .take(16)
            .collect();
        InvariantReport {
            cover_ok: uncovered.is_empty(),
            packing_ok: packing_violations.is_empty(),
            structure_ok: partition.structure_ok(),
            samples_checked: changed.iter().filter(|&&c| c).count(),
            uncovered,
            packing_violations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Arc<MetricSpace> {
        Arc::new(MetricSpace::unit_box(1, 1).unwrap())
    }

    fn pt(s: f64, a: f64) -> Point {
        Point::new(vec![s], vec![a])
    }

    fn ball(center: Point, depth: u32, q_hat: f64) -> Ball {
        Ball {
            id: 0,
            center,
            depth,
            parent_id: None,
            q_hat,
            visits: 0,
        }
    }

    /// Root plus a depth-1 child at `c`.
    fn root_and_child(c: Point, q_root: f64, q_child: f64) -> Partition {
        let mut child = ball(c, 1, q_child);
        child.parent_id = Some(0);
        Partition::from_balls(unit(), 1, vec![ball(pt(0.5, 0.5), 0, q_root), child])
    }

    #[test]
    fn new_partition_has_a_single_root() {
        let p = Partition::new(unit(), 1, 2).unwrap();
        assert_eq!(p.len(), 1);
        let root = p.ball(0).unwrap();
        assert_eq!((root.depth, root.radius(), root.q_hat, root.visits), (0, 1.0, 2.0, 0));
        let again = Partition::new(unit(), 1, 2).unwrap();
        assert_eq!(root.center, again.ball(0).unwrap().center);
        assert_eq!(Partition::new(unit(), 1, 1).unwrap().ball(0).unwrap().q_hat, 1.0);
        assert!(Partition::new(unit(), 0, 1).is_err());
        assert!(Partition::new(unit(), 3, 2).is_err());
    }

    #[test]
    fn root_domain_is_everything_when_alone() {
        let p = Partition::new(unit(), 1, 1).unwrap();
        for x in [pt(0.0, 0.0), pt(1.0, 1.0), pt(0.3, 0.9)] {
            assert!(p.domain_contains(0, &x).unwrap());
        }
        assert!(matches!(
            p.domain_contains(3, &pt(0.0, 0.0)),
            Err(Error::UnknownBall(3))
        ));
    }

    #[test]
    fn smaller_balls_are_carved_out_of_domains() {
        let p = root_and_child(pt(0.2, 0.2), 1.0, 1.0);
        let x = pt(0.5, 0.2); // dist 0.3 from the child center
        assert!(!p.domain_contains(0, &x).unwrap());
        assert!(p.domain_contains(1, &x).unwrap());
        // Ball boundary is closed.
        let edge = pt(0.7, 0.2);
        assert!(p.domain_contains(1, &edge).unwrap());
        assert!(!p.domain_contains(0, &edge).unwrap());
        assert!(p.domain_contains(0, &pt(0.71, 0.2)).unwrap());
    }

    #[test]
    fn index_of_lone_root() {
        let p = Partition::new(unit(), 1, 2).unwrap();
        assert_eq!(p.index(0, 1.0).unwrap(), 3.0);
        assert!(matches!(p.index(0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn index_takes_the_lipschitz_minimum() {
        // Centers 0.6 apart; candidates are 2 + 0 (itself) and 2 + 0.6 (root).
        let p = Partition::from_balls(unit(), 1, vec![ball(pt(0.2, 0.2), 0, 2.0), ball(pt(0.8, 0.2), 1, 2.0)]);
        assert!((p.space().distance(&p.balls()[0].center, &p.balls()[1].center) - 0.6).abs() < 1e-12);
        assert_eq!(p.index(1, 1.0).unwrap(), 2.5);

        let p = root_and_child(pt(0.5, 1.0), 2.0, 2.0);
        let dist = p.space().distance(&p.balls()[0].center, &p.balls()[1].center);
        assert_eq!(dist, 0.5);
        assert_eq!(p.index(1, 1.0).unwrap(), 0.5 + 2.0);

        // A cheap larger neighbour pulls the index down.
        let p = root_and_child(pt(0.5, 0.9), 0.5, 3.0);
        let expected = 0.5 + (0.5 + 0.4f64).min(3.0);
        assert!((p.index(1, 1.0).unwrap() - expected).abs() < 1e-12);
        // Smaller balls are never candidates for a larger ball's index.
        assert_eq!(p.index(0, 1.0).unwrap(), 1.0 + 0.5);
    }

    #[test]
    fn index_never_exceeds_own_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut balls = vec![ball(pt(0.5, 0.5), 0, 2.0)];
        for i in 1..40 {
            let depth = 1 + (i % 4) as u32;
            balls.push(ball(unit().sample_point(&mut rng), depth, rng.gen_range(0.0..5.0)));
        }
        let p = Partition::from_balls(unit(), 1, balls);
        for b in p.balls() {
            let idx = p.index(b.id, 1.7).unwrap();
            assert!(idx <= 1.7 * b.radius() + b.q_hat + 1e-12);
        }
    }

    #[test]
    fn relevant_balls_of_lone_root() {
        let p = Partition::new(unit(), 1, 1).unwrap();
        let rel = p.relevant_balls(&[0.1]).unwrap();
        assert_eq!(
            rel,
            vec![RelevantBall {
                ball_id: 0,
                witness: vec![0.5]
            }]
        );
    }

    #[test]
    fn child_is_relevant_at_its_own_state() {
        let mut p = Partition::new(unit(), 1, 1).unwrap();
        p.ball_mut(0).unwrap().visits = 1;
        let c = p.activate_child(0, pt(0.3, 0.8), 1).unwrap();
        let rel = p.relevant_balls(&[0.3]).unwrap();
        let child = rel.iter().find(|r| r.ball_id == c).unwrap();
        assert_eq!(child.witness, vec![0.8]);
        // Root still owns actions below 0.3 at this state.
        let root = rel.iter().find(|r| r.ball_id == 0).unwrap();
        assert!(root.witness[0] < 0.3);
    }

    #[test]
    fn fully_covered_ball_is_not_relevant() {
        let mut p = Partition::new(unit(), 1, 1).unwrap();
        p.ball_mut(0).unwrap().visits = 1;
        p.activate_child(0, pt(0.5, 0.25), 1).unwrap();
        p.activate_child(0, pt(0.5, 0.8), 1).unwrap();
        let rel = p.relevant_balls(&[0.5]).unwrap();
        assert!(rel.iter().all(|r| r.ball_id != 0));
        assert_eq!(rel.len(), 2);
        assert!(matches!(p.relevant_balls(&[1.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn relevant_balls_in_tabular_space() {
        let sp = Arc::new(MetricSpace::tabular(5, 2).unwrap());
        let mut p = Partition::new(sp, 1, 5).unwrap();
        assert_eq!(p.ball(0).unwrap().center, pt(2.0, 0.0));
        p.ball_mut(0).unwrap().visits = 1;
        let c = p.activate_child(0, pt(3.0, 1.0), 5).unwrap();
        // Enumerate by hand: at state 3, action 1 belongs to the child, action 0 to the root.
        let rel = p.relevant_balls(&[3.0]).unwrap();
        assert_eq!(
            rel,
            vec![
                RelevantBall {
                    ball_id: 0,
                    witness: vec![0.0]
                },
                RelevantBall {
                    ball_id: c,
                    witness: vec![1.0]
                },
            ]
        );
        p.activate_child(0, pt(3.0, 0.0), 5).unwrap();
        let rel = p.relevant_balls(&[3.0]).unwrap();
        assert!(rel.iter().all(|r| r.ball_id != 0));
        assert_eq!(p.relevant_balls(&[1.0]).unwrap()[0].ball_id, 0);
    }

    #[test]
    fn activation_rules() {
        let mut p = Partition::new(unit(), 1, 3).unwrap();
        assert!(matches!(p.activate_child(0, pt(0.1, 0.1), 3), Err(Error::Contract(_))));
        p.ball_mut(0).unwrap().visits = 1;
        let c = p.activate_child(0, pt(0.1, 0.1), 3).unwrap();
        let child = p.ball(c).unwrap().clone();
        assert_eq!(
            (child.depth, child.radius(), child.q_hat, child.visits),
            (1, 0.5, 3.0, 0)
        );
        assert_eq!(child.center, pt(0.1, 0.1));
        assert_eq!(p.ball(0).unwrap().visits, 1);

        // Depth-1 parents need four visits.
        p.ball_mut(c).unwrap().visits = 3;
        assert!(p.activate_child(c, pt(0.2, 0.2), 3).is_err());
        p.ball_mut(c).unwrap().visits = 4;
        assert_eq!(p.activate_child(c, pt(0.2, 0.2), 3).unwrap(), 2);

        // Centers outside the parent's domain are refused.
        assert!(p.activate_child(0, pt(0.15, 0.15), 3).is_err());
        assert_eq!(activation_threshold(0), 1);
        assert_eq!(activation_threshold(1), 4);
        assert_eq!(activation_threshold(3), 64);
    }

    #[test]
    fn verify_fresh_and_illegal_partitions() {
        let p = Partition::new(unit(), 1, 1).unwrap();
        assert!(p.verify_invariants(1000, 1).ok());

        let mut a = ball(pt(0.3, 0.5), 1, 1.0);
        a.parent_id = Some(0);
        let mut b = ball(pt(0.7, 0.5), 1, 1.0);
        b.parent_id = Some(0);
        let bad = Partition::from_balls(unit(), 1, vec![ball(pt(0.5, 0.5), 0, 1.0), a, b]);
        let rep = bad.verify_invariants(1000, 1);
        assert!(rep.cover_ok);
        assert!(!rep.packing_ok);
        assert_eq!(rep.packing_violations, vec![(1, 2)]);
    }

    #[test]
    fn monitor_agrees_with_full_verification() {
        let mut p = Partition::new(unit(), 1, 1).unwrap();
        let mut mon = InvariantMonitor::new(&p, 2000, 9);
        assert!(mon.refresh(&p).ok());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let s = unit().sample_state(&mut rng);
            let rel = p.relevant_balls(&s).unwrap();
            let pick = &rel[rng.gen_range(0..rel.len())];
            let b = p.ball(pick.ball_id).unwrap().clone();
            p.ball_mut(b.id).unwrap().visits = activation_threshold(b.depth);
            p.activate_child(b.id, Point::new(s, pick.witness.clone()), 1).unwrap();
            assert!(mon.refresh(&p).ok());
        }
        assert!(p.verify_invariants(5000, 2).ok());
        for (d, &n) in p.depth_counts().iter().enumerate() {
            assert!(n as u64 <= p.space().analytic_packing_number(radius_of(d as u32)));
        }
    }

    #[test]
    fn json_dump_lists_every_ball() {
        let p = root_and_child(pt(0.2, 0.2), 1.0, 1.0);
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert_eq!(v[1]["parent_id"], 0);
    }
}
