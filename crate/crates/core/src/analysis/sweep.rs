//! λ and τ ablation sweeps and the short-versus-long description
//! comparison.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cache::EmbeddingCache;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::AlignmentConfig;
use crate::models::ModelConfig;
use crate::trainer::{run_trial, TrainConfig};

pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.75, 1.0];
pub const TAU_GRID: [f64; 6] = [0.1, 0.3, 0.5, 0.75, 1.0, 1.5];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Tau,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Tau => "tau",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Lambda => LAMBDA_GRID.to_vec(),
            Self::Tau => TAU_GRID.to_vec(),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "tau" => Ok(Self::Tau),
            other => Err(Error::Usage(format!("unknown sweep parameter `{other}` (expected lambda or tau)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// The value held fixed for the other parameter.
    pub fixed: f64,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// The default grid for `param`, with the other parameter at its
    /// default.
    pub fn standard(param: SweepParam, base: TrainConfig) -> Self {
        let defaults = AlignmentConfig::default();
        let fixed = match param {
            SweepParam::Lambda => defaults.tau,
            SweepParam::Tau => defaults.lambda,
        };
        Self { param, values: param.default_values(), fixed, base, seeds: DEFAULT_SEEDS.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        for (i, v) in self.values.iter().enumerate() {
            if self.values[..i].iter().any(|u| u.to_bits() == v.to_bits()) {
                return Err(Error::Config(format!("duplicate sweep value {v}")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("duplicate seed {s}")));
            }
        }
        for &v in &self.values {
            self.alignment(v).validate()?;
        }
        self.base.validate()
    }

    fn alignment(&self, value: f64) -> AlignmentConfig {
        let normalize_projection = self.base.alignment.map_or(true, |a| a.normalize_projection);
        let (lambda, tau) = match self.param {
            SweepParam::Lambda => (value, self.fixed),
            SweepParam::Tau => (self.fixed, value),
        };
        AlignmentConfig { lambda, tau, normalize_projection }
    }

    fn trial_config(&self, value: f64, seed: u64) -> TrainConfig {
        TrainConfig { seed, alignment: Some(self.alignment(value)), ..self.base.clone() }
    }

    /// Index of the row that serves as the baseline, if the grid has one.
    fn baseline_row(&self) -> Option<usize> {
        match self.param {
            SweepParam::Lambda => self.values.iter().position(|&v| v == 0.0),
            SweepParam::Tau => None,
        }
    }
}

/// Final top-1 for one (value, seed), or the diagnostic of a failed run.
pub type TrialOutcome = std::result::Result<f64, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// One per seed, in grid seed order.
    pub trials: Vec<TrialOutcome>,
}

impl SweepRow {
    /// Mean over seeds; `None` when any trial failed.
    pub fn mean(&self) -> Option<f64> {
        let ok: Option<Vec<f64>> = self.trials.iter().map(|t| t.as_ref().ok().copied()).collect();
        ok.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn failure(&self) -> Option<&str> {
        self.trials.iter().find_map(|t| t.as_ref().err().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Per-seed baseline accuracy the deltas refer to.
    pub baseline: Vec<TrialOutcome>,
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_owned(), |v| format!("{v:.4}"))
}

impl SweepTable {
    pub fn baseline_mean(&self) -> Option<f64> {
        SweepRow { value: 0.0, trials: self.baseline.clone() }.mean()
    }

    pub fn delta(&self, row: &SweepRow) -> Option<f64> {
        Some(row.mean()? - self.baseline_mean()?)
    }

    /// Row with the highest mean accuracy; ties go to the earlier row.
    pub fn best(&self) -> Option<&SweepRow> {
        let mut best: Option<(&SweepRow, f64)> = None;
        for row in &self.rows {
            if let Some(m) = row.mean() {
                if best.is_none_or(|(_, b)| m > b) {
                    best = Some((row, m));
                }
            }
        }
        best.map(|(r, _)| r)
    }

    pub fn to_csv(&self) -> String {
        let p = self.param.as_str();
        let mut out = String::from("param,value,seed,val_top1\n");
        for row in &self.rows {
            for (seed, t) in self.seeds.iter().zip(&row.trials) {
                let cell = match t {
                    Ok(v) => format!("{v:.4}"),
                    Err(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
                };
                writeln!(out, "{p},{},{seed},{cell}", row.value).unwrap();
            }
        }
        out.push('\n');
        out.push_str("param,value,mean_top1,delta_vs_baseline\n");
        for row in &self.rows {
            writeln!(out, "{p},{},{},{}", row.value, fmt4(row.mean()), fmt4(self.delta(row))).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn outcome(
    model: &ModelConfig,
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    cache: &EmbeddingCache,
) -> TrialOutcome {
    run_trial(model, config, train, val, cache)
        .map(|r| r.final_val_top1)
        .map_err(|e| e.to_string())
}

/// Trains one model per (value, seed). Trials run in parallel; a failed
/// trial marks its row without stopping the sweep.
pub fn run_sweep(
    grid: &SweepGrid,
    model: &ModelConfig,
    train: &Dataset,
    val: &Dataset,
    cache: &EmbeddingCache,
) -> Result<SweepTable> {
    grid.validate()?;
    // Pre-flight checks are shared by every trial, so surface them once.
    crate::trainer::Trainer::new(grid.base.clone(), train, val, cache)?;

    let baseline_row = grid.baseline_row();
    let mut jobs: Vec<(Option<usize>, u64)> = Vec::new();
    for (i, _) in grid.values.iter().enumerate() {
        jobs.extend(grid.seeds.iter().map(|&s| (Some(i), s)));
    }
    if baseline_row.is_none() {
        jobs.extend(grid.seeds.iter().map(|&s| (None, s)));
    }
    let results: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(row, seed)| {
            let config = match row {
                Some(i) => grid.trial_config(grid.values[i], seed),
                None => TrainConfig { seed, ..grid.base.baseline() },
            };
            outcome(model, &config, train, val, cache)
        })
        .collect();

    let per_row = grid.seeds.len();
    let rows: Vec<SweepRow> = grid
        .values
        .iter()
        .enumerate()
        .map(|(i, &value)| SweepRow { value, trials: results[i * per_row..(i + 1) * per_row].to_vec() })
        .collect();
    let baseline = match baseline_row {
        Some(i) => rows[i].trials.clone(),
        None => results[grid.values.len() * per_row..].to_vec(),
    };
    Ok(SweepTable { param: grid.param, seeds: grid.seeds.clone(), rows, baseline })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub model: String,
    pub seeds: Vec<u64>,
    pub baseline: Vec<f64>,
    pub short: Vec<f64>,
    pub long: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl ComparisonTable {
    pub fn means(&self) -> [f64; 3] {
        [mean(&self.baseline), mean(&self.short), mean(&self.long)]
    }

    pub fn to_csv(&self) -> String {
        let [b, s, l] = self.means();
        let mut out = String::from("model,baseline,short_description,long_description\n");
        writeln!(out, "{},{b:.4},{s:.4},{l:.4}", self.model).unwrap();
        out
    }
}

/// Paired runs per seed that differ only in which cache supplies the text
/// embeddings, plus a cross-entropy-only baseline.
pub fn short_vs_long_report(
    model: &ModelConfig,
    config: &TrainConfig,
    seeds: &[u64],
    train: &Dataset,
    val: &Dataset,
    cache_short: &EmbeddingCache,
    cache_long: &EmbeddingCache,
) -> Result<ComparisonTable> {
    if cache_short.k() != cache_long.k() {
        return Err(Error::Config(format!(
            "short cache has k={} but long cache has k={}",
            cache_short.k(),
            cache_long.k()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let aligned = TrainConfig { alignment: Some(config.alignment.unwrap_or_default()), ..config.clone() };
    let jobs: Vec<(usize, u64)> = (0..3).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(column, seed)| {
            let (cfg, cache) = match column {
                0 => (TrainConfig { seed, ..aligned.baseline() }, cache_short),
                1 => (TrainConfig { seed, ..aligned.clone() }, cache_short),
                _ => (TrainConfig { seed, ..aligned.clone() }, cache_long),
            };
            run_trial(model, &cfg, train, val, cache).map(|r| r.final_val_top1)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let n = seeds.len();
    Ok(ComparisonTable {
        model: model.arch.to_string(),
        seeds: seeds.to_vec(),
        baseline: results[..n].to_vec(),
        short: results[n..2 * n].to_vec(),
        long: results[2 * n..].to_vec(),
    })
}
