use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ColdStartModel, MetaMode, MetaModel};
use crate::data::UserLog;
use crate::episodes::{epoch_batches, MetaTestSuite, SupportSizeDist};
use crate::error::{Error, Result};
use crate::eval::evaluate_suite;
use crate::models::{Architecture, SharedPredictor, TrainConfig};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub encoder_arch: Architecture,
    /// Start Φ from the pretrained Ψ tensors of the same name and shape.
    pub init_encoder_from_shared: bool,
    pub beta_per_size: bool,
    /// `batch_size` counts tasks.
    pub train: TrainConfig,
    /// Validation suite uses every `val_size_step`-th support size.
    pub val_size_step: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            encoder_arch: Architecture::DeepFm,
            init_encoder_from_shared: true,
            beta_per_size: false,
            train: TrainConfig {
                batch_size: 32,
                ..TrainConfig::default()
            },
            val_size_step: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainReport {
    /// Batch objective of the initial parameters on the first batch.
    pub initial_batch_loss: f64,
    /// Query-weighted mean objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub val_scores: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub skipped_tasks: usize,
    pub skipped_batches: usize,
}

/// Mean over support sizes of the pooled validation AUC.
pub fn validation_score(
    model: &MetaModel,
    psi: Option<&SharedPredictor>,
    logs: &[UserLog],
    suite: &MetaTestSuite,
) -> Result<Option<f64>> {
    let cold = match (model.mode(), psi) {
        (MetaMode::Mus, _) => ColdStartModel::Mus(model),
        (_, Some(psi)) => ColdStartModel::Resus { psi, meta: model },
        (_, None) => return Err(Error::Config(format!("mode {} needs a shared predictor", model.mode()))),
    };
    let rows = evaluate_suite(&cold, logs, suite)?;
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

/// Episodic training of Φ, θ/λ and β with Ψ held fixed; keeps the
/// parameters of the best validation epoch.
pub fn meta_train<R: Rng + ?Sized>(
    model: &mut MetaModel,
    psi: Option<&SharedPredictor>,
    train_logs: &[UserLog],
    val: Option<(&[UserLog], &MetaTestSuite)>,
    dist: &SupportSizeDist,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<MetaTrainReport> {
    if model.mode().uses_shared() {
        match psi {
            None => return Err(Error::Config(format!("mode {} needs a shared predictor", model.mode()))),
            Some(p) if !p.is_frozen() => {
                return Err(Error::Config("shared predictor must be pretrained and frozen".into()))
            }
            _ => {}
        }
    }
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut report = MetaTrainReport::default();
    let mut best = (f64::NEG_INFINITY, model.params.clone(), 0usize);
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(train_logs, dist, cfg.batch_size, epoch, rng)?;
        let (mut weighted, mut queries) = (0.0, 0usize);
        for batch in &batches {
            let out = model.batch_loss(&model.params, psi, train_logs, &batch.tasks)?;
            report.skipped_tasks += out.skipped;
            if out.n_queries == 0 {
                log::warn!("epoch {epoch} batch {}: every task skipped", batch.batch_index);
                report.skipped_batches += 1;
                continue;
            }
            if epoch == 1 && batch.batch_index == 0 {
                report.initial_batch_loss = out.loss;
            }
            if !out.loss.is_finite() || !out.grads.is_finite() {
                model.params = best.1.clone();
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("meta objective {} at batch {}", out.loss, batch.batch_index),
                });
            }
            weighted += out.loss * out.n_queries as f64;
            queries += out.n_queries;
            opt.step(&mut model.params, &out.grads);
        }
        let epoch_loss = if queries > 0 { weighted / queries as f64 } else { f64::NAN };
        report.epoch_losses.push(epoch_loss);
        let score = match val {
            Some((logs, suite)) => validation_score(model, psi, logs, suite)?,
            None => None,
        };
        report.val_scores.push(score);
        log::info!(
            "meta epoch {epoch}: loss {epoch_loss:.5} val auc {}",
            score.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        match score {
            Some(a) if a > best.0 => {
                best = (a, model.params.clone(), epoch);
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            None => best = (best.0, model.params.clone(), epoch),
        }
    }
    model.params = best.1;
    report.best_epoch = best.2;
    Ok(report)
}
