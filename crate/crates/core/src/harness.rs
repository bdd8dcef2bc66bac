//! Experiment orchestration: multi-seed runs, metrics files and comparison.
//!
//! A run directory holds
//!
//! - `config.json`: the resolved [`ExperimentSpec`];
//! - `metrics.csv`: one [`MetricsRow`] per evaluation point per seed, columns
//!   in [`METRICS_COLUMNS`] order, floats with 9 significant digits;
//! - `summary.json`: a [`Summary`] computed from the rows of `metrics.csv`;
//! - `checkpoint_seed<N>.json`: the final greedy policy of each seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::env::{Environment, Gridworld, GridworldConfig};
use crate::error::{Error, Result};
use crate::marl::{train_run, EvalPoint, PolicySnapshot, RunConfig};

pub const METRICS_COLUMNS: [&str; 8] = [
    "seed",
    "env_steps",
    "test_win_rate",
    "mean_test_return",
    "mean_rp",
    "buffer_size",
    "embedder_loss",
    "wall_clock_s",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    Gridworld(GridworldConfig),
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Gridworld(GridworldConfig::default())
    }
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Gridworld(_) => "gridworld",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub label: String,
    pub env: EnvSpec,
    pub seeds: Vec<u64>,
    pub run: RunConfig,
    pub out_dir: PathBuf,
    /// Horizons at which the overall win-rate is reported; empty means
    /// quarter, half and full training length.
    pub horizons: Vec<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            label: "emu".into(),
            env: EnvSpec::default(),
            seeds: vec![0],
            run: RunConfig::default(),
            out_dir: PathBuf::from("runs/emu"),
            horizons: Vec::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        self.run.validate()?;
        let t_max = self.run.t_max;
        if t_max > 0 && self.run.eval_interval > t_max {
            return Err(Error::InvalidConfig("eval interval exceeds training length".into()));
        }
        if self.horizons.iter().any(|&h| h == 0 || h > t_max) {
            return Err(Error::InvalidConfig("horizons must lie in (0, t_max]".into()));
        }
        match &self.env {
            EnvSpec::Gridworld(c) => c.validate(),
        }
    }

    /// Horizons actually reported.
    pub fn report_horizons(&self) -> Vec<usize> {
        if !self.horizons.is_empty() {
            return self.horizons.clone();
        }
        let t = self.run.t_max;
        let mut h = vec![t / 4, t / 2, t];
        h.retain(|&v| v > 0);
        h.dedup();
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub env_steps: usize,
    pub test_win_rate: f64,
    pub mean_test_return: f64,
    pub mean_rp: f64,
    pub buffer_size: usize,
    pub embedder_loss: Option<f64>,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn from_point(seed: u64, p: &EvalPoint) -> Self {
        Self {
            seed,
            env_steps: p.env_steps,
            test_win_rate: p.test_win_rate,
            mean_test_return: p.mean_test_return,
            mean_rp: p.mean_rp,
            buffer_size: p.buffer_size,
            embedder_loss: p.embedder_loss,
            wall_clock_s: p.wall_clock_s,
        }
    }

    fn record(&self) -> [String; 8] {
        [
            self.seed.to_string(),
            self.env_steps.to_string(),
            fmt_float(self.test_win_rate),
            fmt_float(self.mean_test_return),
            fmt_float(self.mean_rp),
            self.buffer_size.to_string(),
            self.embedder_loss.map(fmt_float).unwrap_or_default(),
            fmt_float(self.wall_clock_s),
        ]
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::InvalidConfig(format!(
            "{} has columns {header:?}, expected {METRICS_COLUMNS:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Time-normalized, seed-averaged integral of win-rate curves sampled on
/// `grid`, by the trapezoid rule over `[0, horizon]`.
///
/// The curve is taken as linear between grid points and constant before the
/// first one; `horizon` may fall between grid points.
pub fn overall_winrate(grid: &[f64], curves: &[Vec<f64>], horizon: f64) -> Result<f64> {
    if grid.is_empty() || curves.is_empty() {
        return Err(Error::Empty("win-rate curves"));
    }
    if curves.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::GridMismatch("every curve must be sampled on the shared grid".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] < 0.0 {
        return Err(Error::GridMismatch("grid must be non-negative and strictly increasing".into()));
    }
    let last = *grid.last().expect("nonempty grid");
    if !(horizon > 0.0) || horizon > last {
        return Err(Error::InvalidConfig(format!("horizon {horizon} outside (0, {last}]")));
    }
    let mut total = 0.0;
    for curve in curves {
        let mut area = curve[0] * grid[0].min(horizon);
        for i in 1..grid.len() {
            let (a, b) = (grid[i - 1], grid[i]);
            if a >= horizon {
                break;
            }
            let end = b.min(horizon);
            let f_end = curve[i - 1] + (curve[i] - curve[i - 1]) * (end - a) / (b - a);
            area += 0.5 * (curve[i - 1] + f_end) * (end - a);
        }
        total += area;
    }
    Ok(total / horizon / curves.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub eval_grid: Vec<usize>,
    pub final_env_steps: Option<usize>,
    pub final_win_rate_mean: Option<f64>,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub final_win_rate_std: Option<f64>,
    /// Overall win-rate keyed by horizon in environment steps.
    pub overall_winrate: BTreeMap<usize, f64>,
}

/// Per-seed curves on a shared evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub win_rates: Vec<Vec<f64>>,
}

impl Curves {
    pub fn from_rows(rows: &[MetricsRow]) -> Result<Self> {
        let mut by_seed: BTreeMap<u64, Vec<&MetricsRow>> = BTreeMap::new();
        for r in rows {
            by_seed.entry(r.seed).or_default().push(r);
        }
        let mut grid: Option<Vec<usize>> = None;
        let mut seeds = Vec::new();
        let mut win_rates = Vec::new();
        for (seed, rs) in by_seed {
            let g: Vec<usize> = rs.iter().map(|r| r.env_steps).collect();
            if g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::GridMismatch(format!("seed {seed} rows are not increasing in env_steps")));
            }
            match &grid {
                Some(existing) if *existing != g => {
                    return Err(Error::GridMismatch(format!("seed {seed} uses a different eval grid")));
                }
                Some(_) => {}
                None => grid = Some(g),
            }
            seeds.push(seed);
            win_rates.push(rs.iter().map(|r| r.test_win_rate).collect());
        }
        Ok(Self {
            grid: grid.unwrap_or_default(),
            seeds,
            win_rates,
        })
    }

    fn grid_f64(&self) -> Vec<f64> {
        self.grid.iter().map(|&g| g as f64).collect()
    }

    pub fn overall_winrate(&self, horizon: usize) -> Result<f64> {
        overall_winrate(&self.grid_f64(), &self.win_rates, horizon as f64)
    }

    /// Mean and sample standard deviation of the last point across seeds.
    pub fn final_win_rate(&self) -> Option<(f64, f64)> {
        if self.grid.is_empty() {
            return None;
        }
        let finals: Vec<f64> = self.win_rates.iter().map(|c| *c.last().expect("nonempty curve")).collect();
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let std = if finals.len() > 1 {
            (finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some((mean, std))
    }
}

/// Summary as a pure function of metrics rows.
pub fn summarize(label: &str, rows: &[MetricsRow], horizons: &[usize], failures: Vec<SeedFailure>) -> Result<Summary> {
    let curves = Curves::from_rows(rows)?;
    let mut overall = BTreeMap::new();
    if !curves.grid.is_empty() {
        let last = *curves.grid.last().expect("nonempty grid");
        for &h in horizons.iter().filter(|&&h| h > 0 && h <= last) {
            overall.insert(h, curves.overall_winrate(h)?);
        }
    }
    let finals = curves.final_win_rate();
    Ok(Summary {
        label: label.to_string(),
        seeds: curves.seeds.clone(),
        failures,
        final_env_steps: curves.grid.last().copied(),
        final_win_rate_mean: finals.map(|f| f.0),
        final_win_rate_std: finals.map(|f| f.1),
        eval_grid: curves.grid,
        overall_winrate: overall,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint_seed{seed}.json"))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicySnapshot> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn load_spec(dir: &Path) -> Result<ExperimentSpec> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?)
}

pub fn build_env(spec: &EnvSpec) -> Result<Gridworld> {
    match spec {
        EnvSpec::Gridworld(c) => Gridworld::new(c.clone()),
    }
}

fn run_seed<E: Environment>(env: &E, spec: &ExperimentSpec, seed: u64, dir: &Path) -> Result<Vec<MetricsRow>> {
    let outcome = train_run(env, &spec.run, seed, |_| {})?;
    let rows: Vec<MetricsRow> = outcome.points.iter().map(|p| MetricsRow::from_point(seed, p)).collect();
    write_metrics(&dir.join(format!("metrics_seed{seed}.csv")), &rows)?;
    write_json(&checkpoint_path(&spec.out_dir, seed), &outcome.snapshot())?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub attempted: usize,
}

impl ExperimentReport {
    pub fn all_failed(&self) -> bool {
        self.summary.failures.len() == self.attempted
    }
}

/// Runs every seed, writes the run directory and returns the merged rows.
///
/// Seeds run on up to `workers` threads (default: available cores), each
/// writing a private CSV under `seeds/` that is merged afterwards. A failing
/// seed is recorded in the summary while the others continue.
pub fn run_experiment(spec: &ExperimentSpec, workers: Option<usize>) -> Result<ExperimentReport> {
    spec.validate()?;
    let env = build_env(&spec.env)?;
    fs::create_dir_all(&spec.out_dir)?;
    let seed_dir = spec.out_dir.join("seeds");
    fs::create_dir_all(&seed_dir)?;
    write_json(&spec.out_dir.join("config.json"), spec)?;

    let workers = workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, spec.seeds.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(u64, Result<Vec<MetricsRow>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = spec.seeds.get(i) else { break };
                let res = run_seed(&env, spec, seed, &seed_dir);
                results.lock().expect("result lock").push((seed, res));
            });
        }
    });

    let mut results = results.into_inner().expect("result lock");
    results.sort_by_key(|(seed, _)| *seed);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    write_metrics(&spec.out_dir.join("metrics.csv"), &rows)?;
    let summary = summarize(&spec.label, &rows, &spec.report_horizons(), failures)?;
    write_json(&spec.out_dir.join("summary.json"), &summary)?;
    Ok(ExperimentReport {
        rows,
        summary,
        attempted: spec.seeds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub dir: PathBuf,
    pub overall_winrate: f64,
    pub final_win_rate: f64,
}

/// Ranks runs by overall win-rate at `horizon` (default: the last shared
/// grid point), best first; ties keep input order.
pub fn compare(dirs: &[PathBuf], horizon: Option<usize>) -> Result<Vec<CompareRow>> {
    if dirs.len() < 2 {
        return Err(Error::InvalidConfig("compare needs at least two runs".into()));
    }
    let mut loaded = Vec::new();
    for dir in dirs {
        let curves = Curves::from_rows(&read_metrics(&dir.join("metrics.csv"))?)?;
        if curves.grid.is_empty() {
            return Err(Error::Empty("metrics rows"));
        }
        let label = load_spec(dir).map(|s| s.label).unwrap_or_else(|_| dir.display().to_string());
        loaded.push((dir.clone(), label, curves));
    }
    let grid = loaded[0].2.grid.clone();
    if let Some((dir, _, _)) = loaded.iter().find(|(_, _, c)| c.grid != grid) {
        return Err(Error::GridMismatch(format!(
            "{} and {} use different eval grids",
            loaded[0].0.display(),
            dir.display()
        )));
    }
    let horizon = horizon.unwrap_or(*grid.last().expect("nonempty grid"));
    let mut rows = loaded
        .into_iter()
        .map(|(dir, label, curves)| {
            Ok(CompareRow {
                label,
                dir,
                overall_winrate: curves.overall_winrate(horizon)?,
                final_win_rate: curves.final_win_rate().expect("nonempty grid").0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.overall_winrate.total_cmp(&a.overall_winrate));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, step: usize, win: f64) -> MetricsRow {
        MetricsRow {
            seed,
            env_steps: step,
            test_win_rate: win,
            mean_test_return: 10.0 * win,
            mean_rp: 0.0,
            buffer_size: 0,
            embedder_loss: None,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn overall_winrate_units() {
        let grid = [0.0, 1.0, 2.0, 4.0];
        assert!((overall_winrate(&grid, &[vec![1.0; 4]], 4.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(overall_winrate(&grid, &[vec![0.0; 4]], 4.0).unwrap(), 0.0);
        let ramp = vec![0.0, 0.25, 0.5, 1.0];
        assert!((overall_winrate(&grid, &[ramp], 4.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(overall_winrate(&grid, &[], 4.0).is_err());
        assert!(overall_winrate(&[], &[vec![]], 4.0).is_err());
        assert!(overall_winrate(&grid, &[vec![1.0; 4]], 5.0).is_err());
    }

    #[test]
    fn partial_horizon_interpolates() {
        // ramp 0 -> 1 over [0, 4]; at horizon 3 the mean is 3/8
        let grid = [0.0, 4.0];
        let v = overall_winrate(&grid, &[vec![0.0, 1.0]], 3.0).unwrap();
        assert!((v - 0.375).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rows = vec![row(0, 0, 0.0), row(0, 10, 1.0 / 3.0)];
        rows[1].embedder_loss = Some(0.125);
        write_metrics(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("seed,env_steps,test_win_rate"));
        assert!(text.contains("3.33333333e-1"));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back[1].embedder_loss, Some(0.125));
        assert!((back[1].test_win_rate - 1.0 / 3.0).abs() < 1e-8);
        assert_eq!(back[0].embedder_loss, None);
    }

    #[test]
    fn curves_reject_mismatched_seeds() {
        let rows = vec![row(0, 0, 0.0), row(0, 10, 1.0), row(1, 0, 0.0), row(1, 20, 1.0)];
        assert!(matches!(Curves::from_rows(&rows), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![row(0, 0, 0.0), row(0, 10, 1.0), row(1, 0, 0.0), row(1, 10, 0.5)];
        let s = summarize("x", &rows, &[10], Vec::new()).unwrap();
        assert_eq!(s.final_win_rate_mean, Some(0.75));
        assert!((s.final_win_rate_std.unwrap() - (0.125f64).sqrt()).abs() < 1e-12);
        assert!((s.overall_winrate[&10] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::default();
        assert!(spec.validate().is_ok());
        spec.seeds.clear();
        assert!(spec.validate().is_err());
        spec.seeds = vec![1, 1];
        assert!(spec.validate().is_err());
        spec.seeds = vec![1];
        spec.run.eval_interval = spec.run.t_max + 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ExperimentSpec::default();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&text).unwrap(), spec);
        let partial: ExperimentSpec = serde_json::from_str(r#"{"label": "p", "seeds": [3]}"#).unwrap();
        assert_eq!(partial.seeds, vec![3]);
        assert_eq!(partial.run, RunConfig::default());
    }
}
