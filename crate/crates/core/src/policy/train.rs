use serde::{Deserialize, Serialize};

use super::losses::{minibatch_loss, sample_bc, sample_minibatch, Minibatch};
use super::ModelParams;
use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::expert::TaskDataset;
use crate::seeding::{rng_for, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Unconditioned behavior cloning on all demos pooled.
    Bc,
    /// One-shot imitation only.
    Oil,
    /// One-shot imitation plus contrastive.
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub oil_draws: usize,
    pub contrastive_pairs: usize,
    pub margin: f64,
    pub contrastive_weight: f64,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2_000,
            oil_draws: 8,
            contrastive_pairs: 8,
            margin: 1.0,
            contrastive_weight: 1.0,
            log_every: 50,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if self.oil_draws == 0 {
            return Err(Error::config(field("oil_draws"), "must be positive"));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::config(field("margin"), "must be positive"));
        }
        if !(self.contrastive_weight.is_finite() && self.contrastive_weight >= 0.0) {
            return Err(Error::config(field("contrastive_weight"), "must be non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::config(field("log_every"), "must be positive"));
        }
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr > 0.0) {
            return Err(Error::config(field("adam.lr"), "must be positive"));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::config(field("adam.beta"), "betas must lie in [0, 1)"));
        }
        if !(a.epsilon.is_finite() && a.epsilon > 0.0) {
            return Err(Error::config(field("adam.epsilon"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub imitation: f64,
    pub contrastive: f64,
}

fn draw(datasets: &[TaskDataset], objective: Objective, cfg: &TrainConfig, rng: &mut Rng) -> Result<Minibatch> {
    match objective {
        Objective::Bc => sample_bc(datasets, cfg.oil_draws, rng),
        Objective::Oil => sample_minibatch(datasets, cfg.oil_draws, 0, rng),
        Objective::Total => sample_minibatch(datasets, cfg.oil_draws, cfg.contrastive_pairs, rng),
    }
}

/// Adam on minibatch estimates of `objective`, in place. Returns the loss curve
/// sampled every `log_every` steps plus the final step.
pub fn train(
    params: &mut ModelParams,
    datasets: &[TaskDataset],
    objective: Objective,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    train_observed(params, datasets, objective, cfg, seed, |_, _| {})
}

/// As [`train`], calling `observe(step, minibatch)` before every update.
pub(crate) fn train_observed(
    params: &mut ModelParams,
    datasets: &[TaskDataset],
    objective: Objective,
    cfg: &TrainConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &Minibatch),
) -> Result<Vec<CurvePoint>> {
    cfg.validate("train")?;
    let mut rng = rng_for(seed, &[]);
    let mut adam = AdamState::new(cfg.adam, &params.tensors);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let mb = draw(datasets, objective, cfg, &mut rng)?;
        observe(step, &mb);
        let parts = minibatch_loss(params, datasets, &mb, cfg.margin, cfg.contrastive_weight).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: parts.total,
            });
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint {
                step,
                total: parts.total,
                imitation: parts.imitation,
                contrastive: parts.contrastive,
            });
        }
        adam.step(&mut params.tensors, &parts.grads).map_err(|_| Error::Divergence {
            step,
            loss: parts.total,
        })?;
    }
    Ok(curve)
}
