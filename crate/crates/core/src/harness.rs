//! Experiment orchestration: JSON configs, seeded runs fanned out over a
//! thread pool, regret and ball-census collection, and CSV output.
//!
//! A run is a pure function of `(config, seed)`. Seeds run in parallel but
//! results are merged in the order the seeds are listed, so the CSV bytes do
//! not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::agent::{EpisodeRecord, HyperParams, Learner, StepRecord, ZoomAgent};
use crate::baselines::{default_net_eps, NetAgent};
use crate::env::{self, make_misspecified, BumpLine, Environment, Start, TabularChain};
use crate::error::{Error, Result};
use crate::metric_space::DEFAULT_GRID_RESOLUTION;
use crate::oracle::{regret_curve, RegretRecord, ValueTable, MIN_GRID_RESOLUTION};
use crate::partition::{radius_of, InvariantMonitor};

pub const DEFAULT_P: f64 = 0.1;
pub const DEFAULT_MISSPEC_FREQUENCY: f64 = 50.0;
pub const DEFAULT_VERIFY_SAMPLES: usize = 10_000;
pub const THREADS_ENV: &str = "ZOOMRL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Zoomrl,
    Nbql,
    TabularQucb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub agent: AgentKind,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub episodes: usize,
    /// Defaults to the environment's certified constant.
    #[serde(rename = "L")]
    pub lipschitz: Option<f64>,
    pub p: f64,
    pub eps_misspec: Option<f64>,
    pub misspec_frequency: f64,
    pub seeds: Vec<u64>,
    pub grid_resolution: usize,
    pub output_dir: Option<PathBuf>,
    /// NbQL net radius; defaults to `K^(−1/(d+2))`.
    pub net_eps: Option<f64>,
    /// `d` for the default net radius; defaults to the space dimension.
    pub covering_dim: Option<f64>,
    pub trace: bool,
}

const CONFIG_FIELDS: &[&str] = &[
    "env",
    "agent",
    "H",
    "K",
    "L",
    "p",
    "eps_misspec",
    "misspec_frequency",
    "seeds",
    "grid_resolution",
    "output_dir",
    "net_eps",
    "covering_dim",
    "trace",
];

fn take<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<T>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| Error::config(path, e.to_string())),
    }
}

fn require<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, path: &str) -> Result<T> {
    take(obj, key, path)?.ok_or_else(|| Error::config(path, "missing required field"))
}

fn reject_unknown(obj: &Map<String, Value>, known: &[&str], prefix: &str) -> Result<()> {
    match obj.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(Error::config(format!("{prefix}{k}"), "unknown field")),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Parses and validates a config; errors name the offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        let Value::Object(obj) = root else {
            return Err(Error::config("<root>", "expected a JSON object"));
        };
        reject_unknown(&obj, CONFIG_FIELDS, "")?;

        let env_obj: Map<String, Value> = require(&obj, "env", "env")?;
        reject_unknown(&env_obj, &["name", "params"], "env.")?;
        let env = EnvSpec {
            name: require(&env_obj, "name", "env.name")?,
            params: take(&env_obj, "params", "env.params")?.unwrap_or_default(),
        };
        let cfg = Self {
            env,
            agent: require(&obj, "agent", "agent")?,
            horizon: require(&obj, "H", "H")?,
            episodes: require(&obj, "K", "K")?,
            lipschitz: take(&obj, "L", "L")?,
            p: take(&obj, "p", "p")?.unwrap_or(DEFAULT_P),
            eps_misspec: take(&obj, "eps_misspec", "eps_misspec")?,
            misspec_frequency: take(&obj, "misspec_frequency", "misspec_frequency")?
                .unwrap_or(DEFAULT_MISSPEC_FREQUENCY),
            seeds: require(&obj, "seeds", "seeds")?,
            grid_resolution: take(&obj, "grid_resolution", "grid_resolution")?.unwrap_or(DEFAULT_GRID_RESOLUTION),
            output_dir: take(&obj, "output_dir", "output_dir")?,
            net_eps: take(&obj, "net_eps", "net_eps")?,
            covering_dim: take(&obj, "covering_dim", "covering_dim")?,
            trace: take(&obj, "trace", "trace")?.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("H", "must be at least 1"));
        }
        if self.episodes == 0 {
            return Err(Error::config("K", "must be at least 1"));
        }
        if let Some(l) = self.lipschitz {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::config("L", format!("{l} is not a positive number")));
            }
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::config("p", format!("{} outside (0, 1)", self.p)));
        }
        if let Some(e) = self.eps_misspec {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::config("eps_misspec", format!("{e} is negative")));
            }
        }
        if !self.misspec_frequency.is_finite() {
            return Err(Error::config("misspec_frequency", "must be finite"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config(format!("seeds[{i}]"), format!("duplicate seed {s}")));
            }
        }
        if self.grid_resolution < MIN_GRID_RESOLUTION {
            return Err(Error::config(
                "grid_resolution",
                format!("{} below {MIN_GRID_RESOLUTION}", self.grid_resolution),
            ));
        }
        if let Some(e) = self.net_eps {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::config("net_eps", format!("{e} outside (0, 1]")));
            }
        }
        if let Some(d) = self.covering_dim {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::config("covering_dim", format!("{d} is negative")));
            }
        }
        // Builds the environment once to check its parameters.
        let env = build_env(self)?;
        if self.agent == AgentKind::TabularQucb && !env.space().is_tabular() {
            return Err(Error::config("agent", "tabular_qucb needs a tabular environment"));
        }
        Ok(())
    }

    /// The Lipschitz constant in effect.
    pub fn effective_lipschitz(&self, env: &dyn Environment) -> f64 {
        self.lipschitz.unwrap_or_else(|| env.lipschitz())
    }

    pub fn hyper(&self, env: &dyn Environment) -> Result<HyperParams> {
        HyperParams::new(self.horizon, self.episodes, self.effective_lipschitz(env), self.p)
    }
}

fn bump_from_params(horizon: usize, params: &Map<String, Value>, extra: &[&str]) -> Result<BumpLine> {
    let mut known = vec!["start", "noise"];
    known.extend_from_slice(extra);
    reject_unknown(params, &known, "env.params.")?;
    let mut bump = BumpLine::new(horizon).map_err(|e| Error::config("H", e.to_string()))?;
    match params.get("start") {
        None | Some(Value::Null) => {}
        Some(Value::String(s)) if s == "uniform" => bump = bump.with_start(Start::Uniform)?,
        Some(v) => {
            let s: f64 = serde_json::from_value(v.clone())
                .map_err(|_| Error::config("env.params.start", "expected a number or \"uniform\""))?;
            bump = bump
                .with_start(Start::Fixed(s))
                .map_err(|e| Error::config("env.params.start", e.to_string()))?;
        }
    }
    if let Some(noise) = take::<f64>(params, "noise", "env.params.noise")? {
        bump = bump
            .with_noise(noise)
            .map_err(|e| Error::config("env.params.noise", e.to_string()))?;
    }
    Ok(bump)
}

/// Instantiates the configured environment, wrapped with the reward
/// perturbation when `eps_misspec` is set.
pub fn build_env(config: &ExperimentConfig) -> Result<Box<dyn Environment>> {
    let h = config.horizon;
    let params = &config.env.params;
    let base: Box<dyn Environment> = match config.env.name.as_str() {
        "bump_line" => Box::new(bump_from_params(h, params, &[])?),
        "misspec_bump" => {
            if config.eps_misspec.is_none() {
                return Err(Error::config("eps_misspec", "required by misspec_bump"));
            }
            Box::new(bump_from_params(h, params, &[])?)
        }
        "tabular_chain" => {
            reject_unknown(params, &["num_states", "num_actions"], "env.params.")?;
            let ns = take(params, "num_states", "env.params.num_states")?.unwrap_or(5);
            let na = take(params, "num_actions", "env.params.num_actions")?.unwrap_or(2);
            Box::new(TabularChain::new(ns, na, h).map_err(|e| Error::config("env.params", e.to_string()))?)
        }
        other => {
            return Err(Error::config(
                "env.name",
                format!("unknown environment `{other}` (expected bump_line, misspec_bump or tabular_chain)"),
            ))
        }
    };
    match config.eps_misspec {
        Some(eps) => Ok(Box::new(make_misspecified(base, eps, config.misspec_frequency)?)),
        None => Ok(base),
    }
}

/// A learner of any supported kind.
#[derive(Debug, Clone)]
pub enum AnyAgent {
    Zoom(ZoomAgent),
    Net(NetAgent),
}

impl AnyAgent {
    pub fn learner(&self) -> &dyn Learner {
        match self {
            AnyAgent::Zoom(a) => a,
            AnyAgent::Net(a) => a,
        }
    }

    pub fn learner_mut(&mut self) -> &mut dyn Learner {
        match self {
            AnyAgent::Zoom(a) => a,
            AnyAgent::Net(a) => a,
        }
    }

    pub fn as_zoom(&self) -> Option<&ZoomAgent> {
        match self {
            AnyAgent::Zoom(a) => Some(a),
            AnyAgent::Net(_) => None,
        }
    }

    pub fn as_net(&self) -> Option<&NetAgent> {
        match self {
            AnyAgent::Zoom(_) => None,
            AnyAgent::Net(a) => Some(a),
        }
    }
}

pub fn build_agent(config: &ExperimentConfig, env: &dyn Environment, seed: u64) -> Result<AnyAgent> {
    let hyper = config.hyper(env)?;
    let space = env.space().clone();
    Ok(match config.agent {
        AgentKind::Zoomrl => AnyAgent::Zoom(ZoomAgent::new(space, hyper, seed)?),
        AgentKind::Nbql => {
            let eps = match config.net_eps {
                Some(e) => e,
                None => default_net_eps(config.episodes, config.covering_dim.unwrap_or(space.dim() as f64))?,
            };
            AnyAgent::Net(NetAgent::new(space, eps, hyper)?)
        }
        AgentKind::TabularQucb => AnyAgent::Net(NetAgent::tabular_qucb(space, hyper)?),
    })
}

/// Active balls of one depth in one step's partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusRow {
    pub seed: u64,
    pub h: usize,
    pub depth: u32,
    pub count: usize,
    /// Analytic packing number `M(2^-depth)`.
    pub packing_bound: u64,
}

impl CensusRow {
    pub fn within_bound(&self) -> bool {
        self.count as u64 <= self.packing_bound
    }
}

/// Per-depth ball counts of every step's partition.
pub fn census(agent: &ZoomAgent, seed: u64) -> Vec<CensusRow> {
    let mut rows = Vec::new();
    for (i, part) in agent.partitions().iter().enumerate() {
        for (depth, &count) in part.depth_counts().iter().enumerate() {
            let depth = depth as u32;
            rows.push(CensusRow {
                seed,
                h: i + 1,
                depth,
                count,
                packing_bound: part.space().analytic_packing_number(radius_of(depth)),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub seed: u64,
    pub k: usize,
    pub v_star: f64,
    pub v_pi: f64,
    pub increment: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub k: usize,
    pub h: usize,
    pub ball_id: usize,
    pub depth: u32,
    pub reward: f64,
    pub v_next: f64,
    pub t_after: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Check partition invariants after every episode with this many samples.
    pub verify_samples: Option<usize>,
    /// Keep every step record.
    pub keep_trace: bool,
}

/// Outcome of the per-episode invariant checks of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub episodes: usize,
    pub checks: usize,
    pub failures: usize,
    /// Descriptions of the first few failures.
    pub examples: Vec<String>,
}

impl VerifySummary {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub regret: Vec<RegretRecord>,
    pub trace: Vec<StepRecord>,
    pub census: Vec<CensusRow>,
    pub agent: AnyAgent,
    pub verify: Option<VerifySummary>,
}

impl SeedRun {
    pub fn cumulative_regret(&self) -> f64 {
        self.regret.last().map_or(0.0, |r| r.cumulative)
    }
}

/// Plays `K` episodes for one seed. Step records are dropped after each
/// episode unless a trace is requested.
pub fn run_seed(
    config: &ExperimentConfig,
    env: &dyn Environment,
    table: &ValueTable,
    seed: u64,
    opts: RunOptions,
) -> Result<SeedRun> {
    let mut agent = build_agent(config, env, seed)?;
    let mut monitors: Vec<InvariantMonitor> = match (&agent, opts.verify_samples) {
        (AnyAgent::Zoom(z), Some(n)) => z
            .partitions()
            .iter()
            .enumerate()
            .map(|(i, p)| InvariantMonitor::new(p, n, seed.wrapping_mul(31).wrapping_add(i as u64)))
            .collect(),
        _ => Vec::new(),
    };
    let mut verify = opts.verify_samples.map(|_| VerifySummary::default());
    let mut episodes = Vec::with_capacity(config.episodes);
    let mut trace = Vec::new();
    for k in 1..=config.episodes {
        let mut rec = agent.learner_mut().run_episode(env, k, seed)?;
        if let (Some(summary), Some(z)) = (verify.as_mut(), agent.as_zoom()) {
            summary.episodes += 1;
            for (mon, part) in monitors.iter_mut().zip(z.partitions()) {
                let report = mon.refresh(part);
                summary.checks += 1;
                if !report.ok() {
                    summary.failures += 1;
                    if summary.examples.len() < 8 {
                        summary.examples.push(format!(
                            "seed {seed}, episode {k}, step {}: cover {} packing {} structure {} ({} uncovered, violations {:?})",
                            part.step(),
                            report.cover_ok,
                            report.packing_ok,
                            report.structure_ok,
                            report.uncovered.len(),
                            report.packing_violations
                        ));
                    }
                }
            }
        } else if let Some(summary) = verify.as_mut() {
            summary.episodes += 1;
        }
        if opts.keep_trace {
            trace.append(&mut rec.steps);
        } else {
            rec.steps = Vec::new();
        }
        episodes.push(rec);
    }
    let regret = regret_curve(env, &episodes, table, config.episodes)?;
    let census = agent.as_zoom().map(|z| census(z, seed)).unwrap_or_default();
    Ok(SeedRun {
        seed,
        episodes,
        regret,
        trace,
        census,
        agent,
        verify,
    })
}

/// Worker count: the flag, else `ZOOMRL_THREADS`, else 0 (all cores).
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(THREADS_ENV, format!("`{v}` is not a thread count"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub env: env::EnvDescriptor,
    pub lipschitz: f64,
    pub iota: f64,
    pub regret_exact: bool,
    pub runs: Vec<SeedRun>,
    pub threads: usize,
    pub wall_time_secs: f64,
}

impl ExperimentResult {
    pub fn census_violations(&self) -> Vec<CensusRow> {
        self.runs
            .iter()
            .flat_map(|r| r.census.iter().filter(|c| !c.within_bound()).copied())
            .collect()
    }

    pub fn verify_ok(&self) -> bool {
        self.runs
            .iter()
            .all(|r| r.verify.as_ref().is_none_or(VerifySummary::ok))
    }

    pub fn mean_cumulative_regret(&self) -> f64 {
        self.runs.iter().map(SeedRun::cumulative_regret).sum::<f64>() / self.runs.len() as f64
    }
}

/// Runs every seed of `config` on a pool of `threads` workers (0 = all cores).
pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions, threads: usize) -> Result<ExperimentResult> {
    config.validate()?;
    let start = Instant::now();
    let env = build_env(config)?;
    let hyper = config.hyper(env.as_ref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;
    let runs = pool.install(|| -> Result<Vec<SeedRun>> {
        let table = ValueTable::new(env.as_ref(), config.grid_resolution)?;
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(config, env.as_ref(), &table, seed, opts))
            .collect()
    })?;
    log::info!(
        "{} seeds x {} episodes in {:.2?}",
        config.seeds.len(),
        config.episodes,
        start.elapsed()
    );
    Ok(ExperimentResult {
        config: config.clone(),
        env: env.descriptor(),
        lipschitz: hyper.lipschitz,
        iota: hyper.iota,
        regret_exact: env.is_deterministic(),
        runs,
        threads: pool.current_num_threads(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Paths of the files written for one experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub regret_csv: PathBuf,
    pub census_csv: PathBuf,
    pub trace_csv: Option<PathBuf>,
    pub meta_json: PathBuf,
}

pub fn write_regret_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for run in &result.runs {
        for r in &run.regret {
            w.serialize(RegretRow {
                seed: run.seed,
                k: r.k,
                v_star: r.v_star,
                v_pi: r.v_pi,
                increment: r.increment,
                cumulative: r.cumulative,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_census_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["seed", "h", "depth", "count", "packing_bound"])?;
    for row in result.runs.iter().flat_map(|r| &r.census) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for run in &result.runs {
        for st in &run.trace {
            w.serialize(TraceRow {
                seed: run.seed,
                k: st.k,
                h: st.h,
                ball_id: st.ball_id,
                depth: st.depth,
                reward: st.reward,
                v_next: st.v_next,
                t_after: st.t_after,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn meta(result: &ExperimentResult) -> Value {
    let runs: Vec<Value> = result
        .runs
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "cumulative_regret": r.cumulative_regret(),
                "memory_cells": r.agent.learner().memory_cells(),
                "duplicate_activations": r.agent.as_zoom().map(ZoomAgent::duplicate_activations),
                "net_eps": r.agent.as_net().map(NetAgent::eps),
                "verify": r.verify,
            })
        })
        .collect();
    json!({
        "config": result.config,
        "env": result.env,
        "lipschitz": result.lipschitz,
        "iota": result.iota,
        "regret_exact": result.regret_exact,
        "runs": runs,
        "threads": result.threads,
        "wall_time_secs": result.wall_time_secs,
        "versions": { "zoomrl": env!("CARGO_PKG_VERSION") },
    })
}

/// Writes `regret.csv`, `census.csv`, `meta.json` and, when the run kept
/// one, `trace.csv` into `dir`.
pub fn write_artifacts(result: &ExperimentResult, dir: &Path) -> Result<Artifacts> {
    fs::create_dir_all(dir)?;
    let art = Artifacts {
        regret_csv: dir.join("regret.csv"),
        census_csv: dir.join("census.csv"),
        trace_csv: result
            .runs
            .iter()
            .any(|r| !r.trace.is_empty())
            .then(|| dir.join("trace.csv")),
        meta_json: dir.join("meta.json"),
    };
    write_regret_csv(result, &art.regret_csv)?;
    write_census_csv(result, &art.census_csv)?;
    if let Some(p) = &art.trace_csv {
        write_trace_csv(result, p)?;
    }
    fs::write(&art.meta_json, serde_json::to_string_pretty(&meta(result))?)?;
    Ok(art)
}

/// `V*_1(s_1)` of the first episode under the first seed.
pub fn oracle_value(config: &ExperimentConfig) -> Result<f64> {
    config.validate()?;
    let env = build_env(config)?;
    let table = ValueTable::new(env.as_ref(), config.grid_resolution)?;
    let s1 = env::reset_episode(env.as_ref(), 1, config.seeds[0])?;
    table.v_star(1, &s1)
}
