use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SharedPredictor;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::math::Tape;
use crate::optim::Adam;

/// Optimizer and early-stopping settings shared by both training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a new best
    /// validation AUC.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 1024,
            max_epochs: 10,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean BCE of the initial model over the training instances.
    pub initial_loss: f64,
    /// Mean training BCE per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    pub val_aucs: Vec<Option<f64>>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn mean_bce(psi: &SharedPredictor, data: &[&Instance], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for batch in data.chunks(chunk.max(1)) {
        let logits = psi.logits(batch)?;
        total += batch
            .iter()
            .zip(&logits)
            .map(|(x, &z)| crate::math::bce(x.y(), crate::math::sigmoid(z)))
            .sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

pub(crate) fn validation_auc(psi: &SharedPredictor, val: &[&Instance]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(val.len());
    for batch in val.chunks(4096) {
        scores.extend(psi.logits(batch)?);
    }
    let labels: Vec<u8> = val.iter().map(|x| x.label).collect();
    Ok(auc(&labels, &scores).ok())
}

/// Fits Ψ by minibatch Adam on mean BCE, keeps the parameters of the best
/// validation-AUC epoch, and freezes the predictor.
pub fn pretrain_shared<R: Rng + ?Sized>(
    psi: &mut SharedPredictor,
    train: &[&Instance],
    val: &[&Instance],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if psi.is_frozen() {
        return Err(Error::Config("shared predictor is frozen".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training instances for the shared predictor".into()));
    }
    let mut report = PretrainReport {
        initial_loss: mean_bce(psi, train, 4096)?,
        ..Default::default()
    };
    let mut opt = Adam::new(&psi.params, cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::NEG_INFINITY, psi.params.clone(), 0usize);
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Instance> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|x| x.y()).collect();
            let grads = {
                let mut tape = Tape::new(&psi.params);
                let z = psi.net.logit(&mut tape, &batch)?;
                let p = tape.sigmoid(z);
                let loss = tape.bce_sum(p, labels, 1.0 / batch.len() as f64)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    psi.params = best.1.clone();
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("shared predictor loss {value}"),
                    });
                }
                epoch_loss += value * batch.len() as f64;
                tape.backward(loss)?
            };
            if !grads.is_finite() {
                psi.params = best.1.clone();
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite shared predictor gradient".into(),
                });
            }
            opt.step(&mut psi.params, &grads);
        }
        report.epoch_losses.push(epoch_loss / train.len() as f64);
        let val_auc = validation_auc(psi, val)?;
        report.val_aucs.push(val_auc);
        log::info!(
            "pretrain epoch {epoch}: loss {:.5} val auc {}",
            epoch_loss / train.len() as f64,
            val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        match val_auc {
            Some(a) if a > best.0 => {
                best = (a, psi.params.clone(), epoch);
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            None => best = (best.0, psi.params.clone(), epoch),
        }
    }
    psi.params = best.1;
    report.best_epoch = best.2;
    psi.freeze();
    Ok(report)
}
