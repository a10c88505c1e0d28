//! Ablation sweeps: config overrides per arm, repeated over seeds.
//!
//! A sweep spec is a `key = value` file. Lines before the first `[arm]`
//! header override the defaults for every arm; `seeds = 0,1,2` lists the
//! seeds (default 0 to 4). Each `[name]` section starts an arm whose lines
//! override the shared settings.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{run_experiment, RunResult};
use crate::config::{split_line, RunConfig};
use crate::error::CliError;

/// Column order of `sweep.csv`.
pub const CSV_COLUMNS: [&str; 16] = [
    "arm",
    "runs",
    "failed",
    "r1_d2s_mean",
    "r1_d2s_std",
    "ap_d2s_mean",
    "ap_d2s_std",
    "r1_s2d_mean",
    "r1_s2d_std",
    "ap_s2d_mean",
    "ap_s2d_std",
    "offdiag_mean",
    "offdiag_std",
    "hard_mean",
    "hard_std",
    "error",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl SweepSpec {
    /// Parses a spec on top of `base`.
    pub fn parse(text: &str, base: &RunConfig) -> Result<Self, CliError> {
        let mut shared = base.clone();
        let mut seeds: Vec<u64> = (0..5).collect();
        let mut sections: Vec<(String, Vec<(usize, String, String)>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() || sections.iter().any(|(n, _)| n == name) {
                    return Err(CliError::config(format!("line {ln}: empty or repeated arm name `{name}`")));
                }
                sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let Some((k, v)) = split_line(line).map_err(|e| CliError::config(format!("line {ln}: {e}")))? else {
                continue;
            };
            match sections.last_mut() {
                Some((_, lines)) => lines.push((ln, k.to_string(), v.to_string())),
                None if k == "seeds" => {
                    seeds = v
                        .split(',')
                        .map(|s| s.trim().parse::<u64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| CliError::config(format!("line {ln}: key `seeds`: {e}")))?;
                }
                None => shared.set(k, v).map_err(|e| CliError::config(format!("line {ln}: {e}")))?,
            }
        }
        if sections.is_empty() {
            return Err(CliError::config("sweep spec defines no `[arm]` sections"));
        }
        if seeds.is_empty() {
            return Err(CliError::config("sweep spec lists no seeds"));
        }
        let mut arms = Vec::new();
        for (name, lines) in sections {
            let mut config = shared.clone();
            for (ln, k, v) in lines {
                config
                    .set(&k, &v)
                    .map_err(|e| CliError::config(format!("line {ln}: arm `{name}`: {e}")))?;
            }
            config.validate().map_err(|e| e.context(format!("arm `{name}`")))?;
            arms.push(Arm { name, config });
        }
        Ok(Self { seeds, arms })
    }
}

/// Outcome of one (arm, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub arm: String,
    pub seed: u64,
    pub r1_d2s: Option<f64>,
    pub ap_d2s: Option<f64>,
    pub r1_s2d: Option<f64>,
    pub ap_s2d: Option<f64>,
    pub offdiag: Option<f64>,
    pub hard: Option<f64>,
    pub error: Option<String>,
}

impl RunRow {
    fn from_result(arm: &str, seed: u64, r: Result<RunResult, CliError>) -> Self {
        match r {
            Ok(r) => {
                let e = &r.evaluation;
                Self {
                    arm: arm.to_string(),
                    seed,
                    r1_d2s: Some(e.drone_to_satellite.r1()),
                    ap_d2s: Some(e.drone_to_satellite.ap),
                    r1_s2d: Some(e.satellite_to_drone.r1()),
                    ap_s2d: Some(e.satellite_to_drone.ap),
                    offdiag: Some(e.offdiag.mean_abs_offdiag),
                    hard: Some(e.offdiag.count_above as f64),
                    error: None,
                }
            }
            Err(e) => Self {
                arm: arm.to_string(),
                seed,
                r1_d2s: None,
                ap_d2s: None,
                r1_s2d: None,
                ap_s2d: None,
                offdiag: None,
                hard: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub failed: usize,
    pub r1_d2s: Stat,
    pub ap_d2s: Stat,
    pub r1_s2d: Stat,
    pub ap_s2d: Stat,
    pub offdiag: Stat,
    pub hard: Stat,
    /// First failure message, if any run failed.
    pub error: Option<String>,
}

impl ArmSummary {
    fn from_rows(arm: &str, rows: &[&RunRow]) -> Self {
        let stat = |f: fn(&RunRow) -> Option<f64>| Stat::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        Self {
            arm: arm.to_string(),
            runs: rows.len(),
            failed: rows.iter().filter(|r| r.error.is_some()).count(),
            r1_d2s: stat(|r| r.r1_d2s),
            ap_d2s: stat(|r| r.ap_d2s),
            r1_s2d: stat(|r| r.r1_s2d),
            ap_s2d: stat(|r| r.ap_s2d),
            offdiag: stat(|r| r.offdiag),
            hard: stat(|r| r.hard),
            error: rows.iter().find_map(|r| r.error.clone()),
        }
    }

    /// Mean R@1 over both retrieval directions.
    pub fn mean_r1(&self) -> f64 {
        (self.r1_d2s.mean + self.r1_s2d.mean) / 2.0
    }

    fn csv_record(&self) -> Vec<String> {
        let mut rec = vec![self.arm.clone(), self.runs.to_string(), self.failed.to_string()];
        for s in [self.r1_d2s, self.ap_d2s, self.r1_s2d, self.ap_s2d, self.offdiag, self.hard] {
            rec.push(s.mean.to_string());
            rec.push(s.std.to_string());
        }
        rec.push(self.error.clone().unwrap_or_default());
        rec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub runs: Vec<RunRow>,
}

impl SweepResult {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// Runs every (arm, seed) pair on the rayon pool. Each run owns its config,
/// data and random streams, so results do not depend on scheduling.
pub fn run_sweep(spec: &SweepSpec) -> SweepResult {
    let jobs: Vec<(&Arm, u64)> = spec
        .arms
        .iter()
        .flat_map(|a| spec.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs: Vec<RunRow> = jobs
        .par_iter()
        .map(|(arm, seed)| {
            let cfg = RunConfig { seed: *seed, ..arm.config.clone() };
            RunRow::from_result(&arm.name, *seed, run_experiment(&cfg))
        })
        .collect();
    let arms = spec
        .arms
        .iter()
        .map(|a| {
            let rows: Vec<&RunRow> = runs.iter().filter(|r| r.arm == a.name).collect();
            ArmSummary::from_rows(&a.name, &rows)
        })
        .collect();
    SweepResult { seeds: spec.seeds.clone(), arms, runs }
}

pub fn write_csv<W: Write>(w: W, result: &SweepResult) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::io(e.to_string());
    out.write_record(CSV_COLUMNS).map_err(io)?;
    for a in &result.arms {
        out.write_record(a.csv_record()).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `sweep.csv` and `sweep.json` into `dir`.
pub fn write_outputs(dir: &Path, result: &SweepResult) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let csv_path = dir.join("sweep.csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| CliError::io(format!("{}: {e}", csv_path.display())))?;
    write_csv(f, result)?;
    let json_path = dir.join("sweep.json");
    let text = serde_json::to_string_pretty(result).map_err(|e| CliError::io(e.to_string()))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| CliError::io(format!("{}: {e}", json_path.display())))?;
    Ok(())
}
