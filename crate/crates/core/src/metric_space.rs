//! Compact state-action spaces `X = S × A` with a normalized metric.
//!
//! Two metrics are supported: the max of per-coordinate distances on a box
//! (`ProductMax`), and the discrete metric on a finite table of
//! `(state, action)` pairs (`Tabular`). Both are normalized so that every
//! pair of points is at distance at most 1.
//!
//! The grid-based packing and covering routines here are brute-force
//! oracles: they are meant for tests and for small census checks, not for
//! use inside the learner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-axis resolution of the grid oracles.
pub const DEFAULT_GRID_RESOLUTION: usize = 256;

/// Largest total dimension (state + action) the grid oracles accept.
pub const MAX_GRID_DIMENSION: usize = 3;

const BOUNDS_SLACK: f64 = 1e-12;

/// A closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    fn contains_with_slack(&self, x: f64) -> bool {
        x >= self.lo - BOUNDS_SLACK && x <= self.hi + BOUNDS_SLACK
    }
}

/// A state-action pair `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl Point {
    pub fn new(state: Vec<f64>, action: Vec<f64>) -> Self {
        Self { state, action }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `dist = max_i |x_i − y_i| / diameter_scale` over all state and action coordinates.
    ProductMax,
    /// Unit distance between distinct pairs of a finite table.
    Tabular { num_states: usize, num_actions: usize },
}

/// Result of a grid packing search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingReport {
    pub radius: f64,
    pub count: usize,
    pub witness_points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpace {
    state_bounds: Vec<Interval>,
    action_bounds: Vec<Interval>,
    kind: MetricKind,
    diameter_scale: f64,
}

impl MetricSpace {
    /// Box space under the max-coordinate metric, normalized by the widest side.
    pub fn product_max(state_bounds: Vec<Interval>, action_bounds: Vec<Interval>) -> Result<Self> {
        if state_bounds.is_empty() || action_bounds.is_empty() {
            return Err(Error::Domain(
                "state and action spaces need at least one dimension".into(),
            ));
        }
        for iv in state_bounds.iter().chain(&action_bounds) {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(Error::Domain(format!("invalid interval [{}, {}]", iv.lo, iv.hi)));
            }
        }
        let widest = state_bounds
            .iter()
            .chain(&action_bounds)
            .map(Interval::width)
            .fold(0.0, f64::max);
        Ok(Self {
            state_bounds,
            action_bounds,
            kind: MetricKind::ProductMax,
            diameter_scale: if widest > 0.0 { widest } else { 1.0 },
        })
    }

    /// `[0,1]^ds × [0,1]^da` under the max-coordinate metric.
    pub fn unit_box(state_dim: usize, action_dim: usize) -> Result<Self> {
        Self::product_max(vec![Interval::unit(); state_dim], vec![Interval::unit(); action_dim])
    }

    /// Finite table of `num_states × num_actions` pairs. States and actions
    /// are encoded as integer-valued scalars.
    pub fn tabular(num_states: usize, num_actions: usize) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Domain(
                "tabular space needs at least one state and one action".into(),
            ));
        }
        Ok(Self {
            state_bounds: vec![Interval::new(0.0, (num_states - 1) as f64)],
            action_bounds: vec![Interval::new(0.0, (num_actions - 1) as f64)],
            kind: MetricKind::Tabular {
                num_states,
                num_actions,
            },
            diameter_scale: 1.0,
        })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self.kind, MetricKind::Tabular { .. })
    }

    pub fn state_bounds(&self) -> &[Interval] {
        &self.state_bounds
    }

    pub fn action_bounds(&self) -> &[Interval] {
        &self.action_bounds
    }

    pub fn diameter_scale(&self) -> f64 {
        self.diameter_scale
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    pub fn dim(&self) -> usize {
        self.state_dim() + self.action_dim()
    }

    /// Number of `(s, a)` pairs, for tabular spaces.
    pub fn table_size(&self) -> Option<usize> {
        match self.kind {
            MetricKind::Tabular {
                num_states,
                num_actions,
            } => Some(num_states * num_actions),
            MetricKind::ProductMax => None,
        }
    }

    fn check_coords(&self, what: &str, coords: &[f64], bounds: &[Interval]) -> Result<()> {
        if coords.len() != bounds.len() {
            return Err(Error::Domain(format!(
                "{what} has {} coordinates, expected {}",
                coords.len(),
                bounds.len()
            )));
        }
        for (i, (&x, iv)) in coords.iter().zip(bounds).enumerate() {
            if !x.is_finite() || !iv.contains_with_slack(x) {
                return Err(Error::Domain(format!(
                    "{what} coordinate {i} = {x} outside [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
            if self.is_tabular() && x.fract() != 0.0 {
                return Err(Error::Domain(format!(
                    "{what} coordinate {i} = {x} is not a table index"
                )));
            }
        }
        Ok(())
    }

    pub fn check_state(&self, s: &[f64]) -> Result<()> {
        self.check_coords("state", s, &self.state_bounds)
    }

    pub fn check_action(&self, a: &[f64]) -> Result<()> {
        self.check_coords("action", a, &self.action_bounds)
    }

    pub fn check_point(&self, x: &Point) -> Result<()> {
        self.check_state(&x.state)?;
        self.check_action(&x.action)
    }

    /// Normalized distance, validating both points first.
    pub fn dist(&self, x: &Point, y: &Point) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(self.distance(x, y))
    }

    /// Normalized distance without bounds checks. Callers guarantee the
    /// points belong to this space.
    pub fn distance(&self, x: &Point, y: &Point) -> f64 {
        self.state_distance(&x.state, &y.state)
            .max(self.action_distance(&x.action, &y.action))
    }

    /// Distance between the state components alone. For `ProductMax`,
    /// `distance(x, y) = max(state_distance, action_distance)`.
    pub fn state_distance(&self, s: &[f64], t: &[f64]) -> f64 {
        self.coord_distance(s, t)
    }

    pub fn action_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.coord_distance(a, b)
    }

    fn coord_distance(&self, u: &[f64], v: &[f64]) -> f64 {
        match self.kind {
            MetricKind::ProductMax => {
                let m = u.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                m / self.diameter_scale
            }
            MetricKind::Tabular { .. } => {
                if u == v {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Center of the space: the box midpoint, or the middle table entry.
    pub fn midpoint(&self) -> Point {
        let mid = |bounds: &[Interval]| -> Vec<f64> {
            bounds
                .iter()
                .map(|iv| {
                    if self.is_tabular() {
                        (iv.hi / 2.0).floor()
                    } else {
                        iv.midpoint()
                    }
                })
                .collect()
        };
        Point::new(mid(&self.state_bounds), mid(&self.action_bounds))
    }

    fn sample_coords<R: Rng + ?Sized>(&self, bounds: &[Interval], rng: &mut R) -> Vec<f64> {
        bounds
            .iter()
            .map(|iv| {
                if self.is_tabular() {
                    rng.gen_range(0..=(iv.hi as usize)) as f64
                } else if iv.lo == iv.hi {
                    iv.lo
                } else {
                    rng.gen_range(iv.lo..=iv.hi)
                }
            })
            .collect()
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sample_coords(&self.state_bounds, rng)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sample_coords(&self.action_bounds, rng)
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point::new(self.sample_state(rng), self.sample_action(rng))
    }

    /// Per-axis coordinates of a regular grid over `bounds`.
    pub(crate) fn axis_grid(&self, iv: &Interval, resolution: usize) -> Vec<f64> {
        if self.is_tabular() {
            return (0..=(iv.hi as usize)).map(|i| i as f64).collect();
        }
        if iv.width() == 0.0 || resolution < 2 {
            return vec![iv.lo];
        }
        let step = iv.width() / (resolution - 1) as f64;
        (0..resolution)
            .map(|i| {
                if i + 1 == resolution {
                    iv.hi
                } else {
                    iv.lo + step * i as f64
                }
            })
            .collect()
    }

    /// Enumerate every point of the oracle grid, in lexicographic order.
    pub fn grid_points(&self, resolution: usize) -> Result<Vec<Point>> {
        if !self.is_tabular() && self.dim() > MAX_GRID_DIMENSION {
            return Err(Error::Precision(format!(
                "grid oracles support dimension <= {MAX_GRID_DIMENSION}, space has {}",
                self.dim()
            )));
        }
        let axes: Vec<Vec<f64>> = self
            .state_bounds
            .iter()
            .chain(&self.action_bounds)
            .map(|iv| self.axis_grid(iv, resolution))
            .collect();
        let ds = self.state_dim();
        let mut out = Vec::with_capacity(axes.iter().map(Vec::len).product());
        let mut idx = vec![0usize; axes.len()];
        loop {
            let coords: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
            out.push(Point::new(coords[..ds].to_vec(), coords[ds..].to_vec()));
            let mut d = axes.len();
            loop {
                if d == 0 {
                    return Ok(out);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    fn grid_spacing(&self, resolution: usize) -> f64 {
        if self.is_tabular() {
            return 0.0;
        }
        let widest = self
            .state_bounds
            .iter()
            .chain(&self.action_bounds)
            .map(Interval::width)
            .fold(0.0, f64::max);
        if widest == 0.0 {
            0.0
        } else {
            widest / (resolution.max(2) - 1) as f64 / self.diameter_scale
        }
    }

    /// Greedy maximal `r`-packing over the oracle grid, with strict
    /// separation `dist > r`. The grid spacing must be at most `r/4`.
    pub fn packing_number(&self, r: f64, resolution: usize) -> Result<PackingReport> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Contract(format!("packing radius {r} outside (0, 1]")));
        }
        let spacing = self.grid_spacing(resolution);
        if spacing > r / 4.0 {
            return Err(Error::Precision(format!(
                "grid spacing {spacing} exceeds r/4 = {} at resolution {resolution}",
                r / 4.0
            )));
        }
        let mut witness_points: Vec<Point> = Vec::new();
        for p in self.grid_points(resolution)? {
            if witness_points.iter().all(|w| self.distance(w, &p) > r) {
                witness_points.push(p);
            }
        }
        Ok(PackingReport {
            radius: r,
            count: witness_points.len(),
            witness_points,
        })
    }

    /// Exact packing number `M(r)`: for boxes under `ProductMax`, the
    /// per-axis count is the largest `n` with `(n − 1)·r < width`, and the
    /// total is the product over axes. For tabular spaces it is the table
    /// size when `r < 1` and 1 otherwise.
    pub fn analytic_packing_number(&self, r: f64) -> u64 {
        match self.kind {
            MetricKind::Tabular {
                num_states,
                num_actions,
            } => {
                if r < 1.0 {
                    (num_states * num_actions) as u64
                } else {
                    1
                }
            }
            MetricKind::ProductMax => self
                .state_bounds
                .iter()
                .chain(&self.action_bounds)
                .map(|iv| {
                    let w = iv.width() / self.diameter_scale;
                    ((w / r - 1e-12).ceil() as u64).max(1)
                })
                .product(),
        }
    }

    /// An `eps`-net: every point of the space is within `eps` of some net
    /// point. Boxes use a product of per-axis cell midpoints with spacing at
    /// most `2·eps`, which is small but not guaranteed minimal; tabular
    /// spaces need every pair unless `eps >= 1`.
    pub fn covering_net(&self, eps: f64) -> Result<Vec<Point>> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::Contract(format!("covering radius {eps} outside (0, 1]")));
        }
        if let MetricKind::Tabular { .. } = self.kind {
            if eps >= 1.0 {
                return Ok(vec![self.midpoint()]);
            }
            return self.grid_points(0);
        }
        let axes: Vec<Vec<f64>> = self
            .state_bounds
            .iter()
            .chain(&self.action_bounds)
            .map(|iv| {
                let w = iv.width();
                if w == 0.0 {
                    return vec![iv.lo];
                }
                let n = ((w / self.diameter_scale / (2.0 * eps) - 1e-12).ceil() as usize).max(1);
                let cell = w / n as f64;
                (0..n).map(|i| iv.lo + cell * (i as f64 + 0.5)).collect()
            })
            .collect();
        let ds = self.state_dim();
        let mut out = Vec::new();
        let mut idx = vec![0usize; axes.len()];
        loop {
            let coords: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
            out.push(Point::new(coords[..ds].to_vec(), coords[ds..].to_vec()));
            let mut d = axes.len();
            loop {
                if d == 0 {
                    return Ok(out);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}
