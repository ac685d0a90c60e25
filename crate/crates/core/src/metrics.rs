//! Comma-separated tables aggregated over seeds, one file per figure analog.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{mean_and_std_err, EvalResult, Method, SeedComparison};
use crate::mili::IterationReport;
use crate::policy::CurvePoint;

pub const METHOD_COMPARISON: &str = "method_comparison.csv";
pub const TRIAL_SWEEP: &str = "trial_sweep.csv";
pub const PAIRING_QUALITY: &str = "pairing_quality.csv";
pub const TRAINING_CURVES: &str = "training_curves.csv";

/// Everything one seed contributes to the tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub results: BTreeMap<Method, EvalResult>,
    /// `(budget, overall success)`, budget 0 being meta-imitation.
    pub sweep: Vec<(usize, f64)>,
    pub pairing: Option<IterationReport>,
    /// `(run name, curve)`.
    pub curves: Vec<(String, Vec<CurvePoint>)>,
}

impl From<&SeedComparison> for SeedMetrics {
    fn from(c: &SeedComparison) -> Self {
        let mut curves = vec![
            ("bc".to_string(), c.bc_curve.clone()),
            ("pretrain".to_string(), c.pretrain_curve.clone()),
        ];
        if !c.mili.retrain_curve.is_empty() {
            curves.push(("retrain".to_string(), c.mili.retrain_curve.clone()));
        }
        SeedMetrics {
            seed: c.seed,
            results: c.results.clone(),
            sweep: c.sweep.clone(),
            pairing: Some(c.mili.clone()),
            curves,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub family: String,
    pub mean_success: f64,
    pub std_err: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub mean_success: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub seed: u64,
    pub alpha: f64,
    pub trials: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub store_size: usize,
    pub pairs: usize,
    pub precision: Option<f64>,
    pub random_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub run: String,
    pub step: usize,
    pub total: f64,
    pub imitation: f64,
    pub contrastive: f64,
}

/// Mean and standard error per method, per family plus an `overall` row.
pub fn method_comparison(seeds: &[SeedMetrics]) -> Vec<MethodRow> {
    let mut rows = Vec::new();
    for method in Method::ALL {
        let evals: Vec<&EvalResult> = seeds.iter().filter_map(|s| s.results.get(&method)).collect();
        if evals.is_empty() {
            continue;
        }
        let mut families: Vec<String> = evals.iter().flat_map(|e| e.per_family.keys().cloned()).collect();
        families.sort();
        families.dedup();
        families.push("overall".to_string());
        for fam in families {
            let xs: Vec<f64> = evals
                .iter()
                .filter_map(|e| if fam == "overall" { Some(e.overall) } else { e.per_family.get(&fam).copied() })
                .collect();
            let (mean_success, std_err) = mean_and_std_err(&xs);
            rows.push(MethodRow {
                method: method.name().to_string(),
                family: fam,
                mean_success,
                std_err,
                seeds: xs.len(),
            });
        }
    }
    rows
}

pub fn trial_sweep(seeds: &[SeedMetrics]) -> Vec<SweepRow> {
    let mut by_budget: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for &(b, v) in &s.sweep {
            by_budget.entry(b).or_default().push(v);
        }
    }
    by_budget
        .into_iter()
        .map(|(budget, xs)| {
            let (mean_success, std_err) = mean_and_std_err(&xs);
            SweepRow {
                budget,
                mean_success,
                std_err,
            }
        })
        .collect()
}

pub fn pairing_quality(seeds: &[SeedMetrics], alpha: f64) -> Vec<PairingRow> {
    seeds
        .iter()
        .filter_map(|s| {
            s.pairing.as_ref().map(|r| PairingRow {
                seed: s.seed,
                alpha,
                trials: r.trials,
                passed: r.passed,
                pass_rate: r.pass_rate,
                store_size: r.store_size,
                pairs: r.pairs,
                precision: r.pairing_precision,
                random_precision: r.random_precision,
            })
        })
        .collect()
}

pub fn training_curves(seeds: &[SeedMetrics]) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for s in seeds {
        for (run, curve) in &s.curves {
            for p in curve {
                rows.push(CurveRow {
                    seed: s.seed,
                    run: run.clone(),
                    step: p.step,
                    total: p.total,
                    imitation: p.imitation,
                    contrastive: p.contrastive,
                });
            }
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the four tables into `dir` and returns their paths.
pub fn emit_metrics(dir: &Path, seeds: &[SeedMetrics], alpha: f64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = [METHOD_COMPARISON, TRIAL_SWEEP, PAIRING_QUALITY, TRAINING_CURVES]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&paths[0], &["method", "family", "mean_success", "std_err", "seeds"], &method_comparison(seeds))?;
    write_csv(&paths[1], &["budget", "mean_success", "std_err"], &trial_sweep(seeds))?;
    write_csv(
        &paths[2],
        &[
            "seed",
            "alpha",
            "trials",
            "passed",
            "pass_rate",
            "store_size",
            "pairs",
            "precision",
            "random_precision",
        ],
        &pairing_quality(seeds, alpha),
    )?;
    write_csv(&paths[3], &["seed", "run", "step", "total", "imitation", "contrastive"], &training_curves(seeds))?;
    Ok(paths)
}
