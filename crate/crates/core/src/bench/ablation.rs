use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{
    imagine_split, prepare, rejected_after_trials, retention, train_and_evaluate, BenchConfig, Frozen, Prepared,
};
use crate::alignment::RejectionConfig;
use crate::encoder::{evaluate_model, IthModel};
use crate::error::{Error, Result};

/// Rows of the variant grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRejection,
    NoFusionGate,
    NoDki,
    NoDkiFusionGate,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoRejection,
        Variant::NoFusionGate,
        Variant::NoDki,
        Variant::NoDkiFusionGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRejection => "no_rejection",
            Variant::NoFusionGate => "no_fg",
            Variant::NoDki => "no_dki",
            Variant::NoDkiFusionGate => "no_dki_fg",
        }
    }

    pub fn apply(self, base: &BenchConfig) -> BenchConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoRejection => cfg.rejection = false,
            Variant::NoFusionGate => cfg.fusion_gate = false,
            Variant::NoDki => cfg.dki = false,
            Variant::NoDkiFusionGate => {
                cfg.dki = false;
                cfg.fusion_gate = false;
            }
        }
        cfg
    }
}

/// One (variant, seed) training run.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub variant: Variant,
    pub seed: u64,
    /// `(split, accuracy)` or the error that stopped the run.
    pub outcome: std::result::Result<Vec<(String, f64)>, String>,
}

/// Seed statistics for one (variant, split) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub split: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub n_failed: usize,
}

/// One point of a rejection sweep, evaluated with a trained full model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub tau: f64,
    pub max_trials: usize,
    pub split: String,
    pub accuracy: f64,
    /// Accepted spans over detected spans.
    pub retention: f64,
    /// Spans still rejected after `max_trials` draws.
    pub rejected_after_n: f64,
}

/// Which points to sweep. `taus` run at the base `max_trials`, `trials` at the
/// base `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub taus: Vec<f64>,
    pub trials: Vec<usize>,
    pub splits: Vec<String>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            taus: vec![-1.0, 0.0, 0.2, 0.4, 0.6, 0.8, 0.95],
            trials: vec![1, 2, 3],
            splits: vec!["dev".into(), "test".into(), "unseen".into()],
        }
    }
}

impl SweepGrid {
    fn points(&self, base: &BenchConfig) -> Vec<RejectionConfig> {
        let mut pts: Vec<RejectionConfig> = self
            .taus
            .iter()
            .map(|&tau| RejectionConfig {
                tau,
                max_trials: base.max_trials,
            })
            .collect();
        for &n in &self.trials {
            let p = RejectionConfig {
                tau: base.tau(),
                max_trials: n,
            };
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
        pts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    pub variants: Vec<Variant>,
    /// Sweep with each seed's full model; skipped when `None` or when the
    /// full variant is not in `variants`.
    pub sweep: Option<SweepGrid>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            sweep: Some(SweepGrid::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<CellRun>,
    pub cells: Vec<AblationCell>,
    /// Per-seed sweep rows followed by the seed means.
    pub sweep: Vec<SweepRow>,
    /// Sweep tau with the best mean dev accuracy at the base trial cap.
    pub tuned_tau: Option<f64>,
}

impl AblationReport {
    pub fn cell(&self, variant: Variant, split: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant && c.split == split)
    }

    /// Seed-mean sweep row.
    pub fn sweep_mean(&self, tau: f64, max_trials: usize, split: &str) -> Option<&SweepRow> {
        self.sweep
            .iter()
            .find(|r| r.seed.is_none() && r.tau == tau && r.max_trials == max_trials && r.split == split)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variant,split,mean_accuracy,std_accuracy,n_seeds,n_failed")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{},{}",
                c.variant.name(),
                c.split,
                c.mean,
                c.std,
                c.n_seeds,
                c.n_failed
            )?;
        }
        Ok(())
    }

    pub fn write_sweep_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "seed,tau,max_trials,split,accuracy,retention,rejected_after_n")?;
        for r in &self.sweep {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            writeln!(
                w,
                "{seed},{},{},{},{:.6},{:.6},{:.6}",
                r.tau, r.max_trials, r.split, r.accuracy, r.retention, r.rejected_after_n
            )?;
        }
        Ok(())
    }
}

/// Worker count: `ITH_THREADS` if set and positive, else the machine's
/// parallelism.
pub fn worker_count() -> usize {
    std::env::var("ITH_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Re-imagines evaluation splits under each sweep point and scores them with
/// an already trained model.
pub fn rejection_sweep(
    prep: &Prepared,
    cfg: &BenchConfig,
    model: &IthModel,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>> {
    let frozen = Frozen::new(cfg, &prep.lexicon)?;
    let mut rows = Vec::new();
    for point in grid.points(cfg) {
        let imaginer = frozen.imaginer(&prep.detector, point)?;
        for (name, split) in prep.splits.named() {
            if split.is_empty() || !grid.splits.iter().any(|s| s == name) {
                continue;
            }
            let examples = imagine_split(cfg, &prep.vocab, Some(&imaginer), split, name)?;
            let accuracy = evaluate_model(model, &examples)?.accuracy;
            let retention = retention(&examples).unwrap_or(1.0);
            let rejected_after_n = rejected_after_trials(&examples).unwrap_or(0.0);
            rows.push(SweepRow {
                seed: Some(cfg.seed),
                tau: point.tau,
                max_trials: point.max_trials,
                split: name.to_string(),
                accuracy,
                retention,
                rejected_after_n,
            });
        }
    }
    Ok(rows)
}

struct SeedResult {
    runs: Vec<CellRun>,
    sweep: std::result::Result<Vec<SweepRow>, String>,
}

fn run_seed(base: &BenchConfig, seed: u64, opts: &AblationOptions) -> SeedResult {
    let base = BenchConfig { seed, ..base.clone() };
    let prep = match prepare(&base) {
        Ok(p) => p,
        Err(e) => {
            let msg = format!("prepare: {e}");
            return SeedResult {
                runs: opts
                    .variants
                    .iter()
                    .map(|&variant| CellRun {
                        variant,
                        seed,
                        outcome: Err(msg.clone()),
                    })
                    .collect(),
                sweep: Err(msg),
            };
        }
    };
    let mut full_model = None;
    let runs: Vec<CellRun> = opts
        .variants
        .iter()
        .map(|&variant| {
            let outcome = train_and_evaluate(&prep, &variant.apply(&base)).map(|out| {
                if variant == Variant::Full {
                    full_model = Some(out.model);
                }
                out.accuracy
            });
            CellRun {
                variant,
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    let sweep = match (&opts.sweep, full_model) {
        (Some(grid), Some(model)) => rejection_sweep(&prep, &base, &model, grid).map_err(|e| e.to_string()),
        _ => Ok(Vec::new()),
    };
    SeedResult { runs, sweep }
}

/// Trains and evaluates every variant for every seed, then sweeps rejection
/// settings with each seed's full model. Failed runs are kept in the report.
pub fn run_ablation(base: &BenchConfig, seeds: &[u64]) -> Result<AblationReport> {
    run_ablation_with(base, seeds, &AblationOptions::default())
}

pub fn run_ablation_with(base: &BenchConfig, seeds: &[u64], opts: &AblationOptions) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    if opts.variants.is_empty() {
        return Err(Error::Config("no ablation variants".into()));
    }
    base.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<SeedResult> = pool.install(|| seeds.par_iter().map(|&s| run_seed(base, s, opts)).collect());

    let runs: Vec<CellRun> = results.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    let mut splits: Vec<String> = Vec::new();
    for r in &runs {
        if let Ok(acc) = &r.outcome {
            for (s, _) in acc {
                if !splits.contains(s) {
                    splits.push(s.clone());
                }
            }
        }
    }
    let mut cells = Vec::new();
    for &variant in &opts.variants {
        let of_variant: Vec<&CellRun> = runs.iter().filter(|r| r.variant == variant).collect();
        let n_failed = of_variant.iter().filter(|r| r.outcome.is_err()).count();
        for split in &splits {
            let xs: Vec<f64> = of_variant
                .iter()
                .filter_map(|r| r.outcome.as_ref().ok())
                .filter_map(|acc| acc.iter().find(|(s, _)| s == split).map(|(_, a)| *a))
                .collect();
            let (mean, std) = if xs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&xs)
            };
            cells.push(AblationCell {
                variant,
                split: split.clone(),
                mean,
                std,
                n_seeds: xs.len(),
                n_failed,
            });
        }
    }

    let mut sweep: Vec<SweepRow> = Vec::new();
    for r in &results {
        if let Ok(rows) = &r.sweep {
            sweep.extend(rows.iter().cloned());
        }
    }
    let mut means: Vec<SweepRow> = Vec::new();
    for row in &sweep {
        if means
            .iter()
            .any(|m| m.tau == row.tau && m.max_trials == row.max_trials && m.split == row.split)
        {
            continue;
        }
        let same: Vec<&SweepRow> = sweep
            .iter()
            .filter(|r| r.tau == row.tau && r.max_trials == row.max_trials && r.split == row.split)
            .collect();
        let n = same.len() as f64;
        let accuracy = same.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let retention = same.iter().map(|r| r.retention).sum::<f64>() / n;
        let rejected_after_n = same.iter().map(|r| r.rejected_after_n).sum::<f64>() / n;
        means.push(SweepRow {
            seed: None,
            accuracy,
            retention,
            rejected_after_n,
            ..row.clone()
        });
    }
    let tuned_tau = means
        .iter()
        .filter(|m| m.split == "dev" && m.max_trials == base.max_trials)
        .filter(|m| opts.sweep.as_ref().is_some_and(|g| g.taus.contains(&m.tau)))
        .fold(None::<&SweepRow>, |best, m| match best {
            Some(b) if b.accuracy >= m.accuracy => Some(b),
            _ => Some(m),
        })
        .map(|m| m.tau);
    sweep.extend(means);
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        cells,
        sweep,
        tuned_tau,
    })
}
