//! Residual meta-learners (NN, RR), the MUS baseline, and fused inference.

mod ops;
mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, UserLog};
use crate::episodes::IndexedTask;
use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, DenseMatrix, Grads, MathError, ParamId, ParamStore, Tape, Var};
use crate::models::{check_same_layout, Checkpoint, CheckpointKind, Network, PredictorSpec, Role, SharedPredictor};

pub use ops::{
    attention, fuse, mus_predict, nn_predict, nn_similarity, residual_targets, rr_fit, rr_predict, ResidualTask,
};
pub use train::{meta_train, validation_score, MetaConfig, MetaTrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaMode {
    Nn,
    Rr,
    Mus,
}

impl MetaMode {
    pub fn uses_shared(self) -> bool {
        self != MetaMode::Mus
    }
}

impl fmt::Display for MetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaMode::Nn => "nn",
            MetaMode::Rr => "rr",
            MetaMode::Mus => "mus",
        })
    }
}

impl FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nn" => Ok(MetaMode::Nn),
            "rr" => Ok(MetaMode::Rr),
            "mus" => Ok(MetaMode::Mus),
            other => Err(Error::Config(format!("unknown meta-learner mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MetaIds {
    theta_w: ParamId,
    theta_b: ParamId,
    lambda_raw: ParamId,
    beta: ParamId,
}

/// Instrumentation for the inference paths.
#[derive(Debug, Default)]
pub struct InferenceCounters {
    support_encodings: AtomicU64,
}

impl InferenceCounters {
    pub fn support_encodings(&self) -> u64 {
        self.support_encodings.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.support_encodings.store(0, Ordering::Relaxed);
    }
}

/// Forward result of one task on a tape.
pub(crate) struct TaskForward {
    pub loss: Var,
    pub n_queries: usize,
}

/// `Σ BCE / Σ|Q|` over a batch of tasks, with its gradient.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Grads,
    pub n_queries: usize,
    pub skipped: usize,
}

/// Feature encoder Φ plus θ, λ and β in one parameter store.
#[derive(Clone, Debug)]
pub struct MetaModel {
    mode: MetaMode,
    encoder: Network,
    pub params: ParamStore,
    ids: MetaIds,
    tau: usize,
    counters: Arc<InferenceCounters>,
}

impl MetaModel {
    pub fn new<R: Rng + ?Sized>(
        mode: MetaMode,
        encoder_spec: PredictorSpec,
        tau: usize,
        beta_per_size: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        let encoder = Network::build(encoder_spec, Role::Encoder, &mut params, rng)?;
        let k = encoder.spec().encoding_dim();
        let ids = MetaIds {
            theta_w: params.add("meta.theta_w", DenseMatrix::zeros(1, k)),
            theta_b: params.add("meta.theta_b", DenseMatrix::zeros(1, 1)),
            // softplus(ln(e − 1)) = 1
            lambda_raw: params.add("meta.lambda_raw", DenseMatrix::scalar((std::f64::consts::E - 1.0).ln())),
            beta: params.add("meta.beta", DenseMatrix::filled(1, if beta_per_size { tau } else { 1 }, 1.0)),
        };
        Ok(Self {
            mode,
            encoder,
            params,
            ids,
            tau,
            counters: Arc::default(),
        })
    }

    pub fn mode(&self) -> MetaMode {
        self.mode
    }

    pub fn encoder_spec(&self) -> &PredictorSpec {
        self.encoder.spec()
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn beta_per_size(&self) -> bool {
        self.params.get(self.ids.beta).cols() > 1
    }

    pub fn theta(&self) -> (&[f64], f64) {
        (self.params.get(self.ids.theta_w).data(), self.params.get(self.ids.theta_b).item())
    }

    pub fn lambda(&self) -> f64 {
        softplus(self.params.get(self.ids.lambda_raw).item())
    }

    /// β applied to a task with `support_size` instances.
    pub fn beta(&self, support_size: usize) -> f64 {
        self.params.get(self.ids.beta).data()[self.beta_slot(support_size)]
    }

    /// Overwrites every β entry.
    pub fn set_beta(&mut self, value: f64) {
        self.params.get_mut(self.ids.beta).data_mut().iter_mut().for_each(|b| *b = value);
    }

    pub fn set_theta(&mut self, w: &[f64], b: f64) -> Result<()> {
        let tw = self.params.get_mut(self.ids.theta_w);
        if tw.cols() != w.len() {
            return Err(Error::SpecMismatch(format!("theta has {} entries, encoder K is {}", w.len(), tw.cols())));
        }
        tw.data_mut().copy_from_slice(w);
        self.params.get_mut(self.ids.theta_b).data_mut()[0] = b;
        Ok(())
    }

    pub fn set_lambda_raw(&mut self, raw: f64) {
        self.params.get_mut(self.ids.lambda_raw).data_mut()[0] = raw;
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn theta_ids(&self) -> [ParamId; 2] {
        [self.ids.theta_w, self.ids.theta_b]
    }

    pub fn lambda_id(&self) -> ParamId {
        self.ids.lambda_raw
    }

    pub fn beta_id(&self) -> ParamId {
        self.ids.beta
    }

    /// Ids this mode can actually train.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        match self.mode {
            MetaMode::Nn => ids.extend([self.ids.theta_w, self.ids.theta_b, self.ids.beta]),
            MetaMode::Rr => ids.extend([self.ids.lambda_raw, self.ids.beta]),
            MetaMode::Mus => ids.extend([self.ids.theta_w, self.ids.theta_b]),
        }
        ids
    }

    /// Copies Ψ parameters into Φ wherever name and shape agree; returns
    /// the number of tensors copied.
    pub fn init_encoder_from(&mut self, psi: &SharedPredictor) -> usize {
        let mut copied = 0;
        for id in self.encoder.param_ids() {
            let name = self.params.name(id).to_string();
            if let Some(src) = psi.params.id(&name).map(|i| psi.params.get(i)) {
                if src.shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn counters(&self) -> &InferenceCounters {
        &self.counters
    }

    /// Encodings `Φ(x)` as rows.
    pub fn encode(&self, batch: &[&Instance]) -> Result<DenseMatrix> {
        self.encoder.encodings(&self.params, batch)
    }

    fn beta_slot(&self, support_size: usize) -> usize {
        if self.params.get(self.ids.beta).cols() == 1 {
            0
        } else {
            support_size.clamp(1, self.tau) - 1
        }
    }

    fn require_shared<'a>(&self, psi: Option<&'a SharedPredictor>) -> Result<Option<&'a SharedPredictor>> {
        match (self.mode.uses_shared(), psi) {
            (true, None) => Err(Error::Config(format!("mode {} needs a shared predictor", self.mode))),
            (true, Some(p)) => Ok(Some(p)),
            (false, _) => Ok(None),
        }
    }

    /// Records one task's summed query BCE on `tape`.
    pub(crate) fn task_forward(
        &self,
        tape: &mut Tape<'_>,
        psi: Option<&SharedPredictor>,
        support: &[&Instance],
        query: &[&Instance],
    ) -> Result<TaskForward> {
        if support.is_empty() {
            return Err(Error::MissingSupport("training task has no support instances".into()));
        }
        let labels: Vec<f64> = query.iter().map(|x| x.y()).collect();
        let phi_s = self.encoder.encode(tape, support)?;
        let phi_q = self.encoder.encode(tape, query)?;
        let p = match self.mode {
            MetaMode::Mus => {
                let y: Vec<f64> = support.iter().map(|x| x.y()).collect();
                let y = tape.constant(DenseMatrix::column(&y));
                let alpha = self.attention_on_tape(tape, phi_q, phi_s)?;
                tape.matmul(alpha, y)?
            }
            MetaMode::Nn | MetaMode::Rr => {
                let psi = psi.ok_or_else(|| Error::Config(format!("mode {} needs a shared predictor", self.mode)))?;
                let dy = ops::residuals_from_logits(support, &psi.logits(support)?);
                let dy = tape.constant(DenseMatrix::column(&dy));
                let delta = if self.mode == MetaMode::Nn {
                    let alpha = self.attention_on_tape(tape, phi_q, phi_s)?;
                    tape.matmul(alpha, dy)?
                } else {
                    let gram = tape.matmul_nt(phi_s, phi_s)?;
                    let raw = tape.param(self.ids.lambda_raw);
                    let lambda = tape.softplus(raw);
                    let m = tape.add_scaled_identity(gram, lambda)?;
                    let a = tape.solve_spd(m, dy)?;
                    let w = tape.matmul_tn(phi_s, a)?;
                    tape.matmul(phi_q, w)?
                };
                let beta = self.beta_on_tape(tape, support.len())?;
                let scaled = tape.scale_by(delta, beta)?;
                let base = tape.constant(DenseMatrix::column(&psi.logits(query)?));
                let z = tape.add(base, scaled)?;
                tape.sigmoid(z)
            }
        };
        let loss = tape.bce_sum(p, labels, 1.0)?;
        Ok(TaskForward {
            loss,
            n_queries: query.len(),
        })
    }

    fn attention_on_tape(&self, tape: &mut Tape<'_>, phi_q: Var, phi_s: Var) -> Result<Var> {
        let w = tape.param(self.ids.theta_w);
        let b = tape.param(self.ids.theta_b);
        let g = tape.pairwise_abs_sim(phi_q, phi_s, w, b)?;
        Ok(tape.softmax_rows(g))
    }

    fn beta_on_tape(&self, tape: &mut Tape<'_>, support_size: usize) -> Result<Var> {
        let beta = tape.param(self.ids.beta);
        let n = tape.value(beta).cols();
        if n == 1 {
            return Ok(beta);
        }
        let mut pick = DenseMatrix::zeros(n, 1);
        pick.set(self.beta_slot(support_size), 0, 1.0);
        let pick = tape.constant(pick);
        Ok(tape.matmul(beta, pick)?)
    }

    /// Batch objective `Σ_u Σ_Q BCE / Σ_u |Q_u|` and its gradient, evaluated
    /// at `params` (a store with this model's layout). Tasks whose ridge
    /// system stays singular are skipped.
    pub fn batch_loss(
        &self,
        params: &ParamStore,
        psi: Option<&SharedPredictor>,
        logs: &[UserLog],
        tasks: &[IndexedTask],
    ) -> Result<BatchLoss> {
        use rayon::prelude::*;
        let psi = self.require_shared(psi)?;
        let outcomes: Vec<Result<Option<(f64, usize, Grads)>>> = tasks
            .par_iter()
            .map(|t| {
                let log = logs
                    .get(t.log)
                    .ok_or_else(|| Error::InvalidData(format!("task refers to missing log {}", t.log)))?;
                let support = t.task.support_instances(log);
                let query = t.task.query_instances(log);
                let mut tape = Tape::new(params);
                match self.task_forward(&mut tape, psi, &support, &query) {
                    Ok(fwd) => {
                        let value = tape.value(fwd.loss).item();
                        let grads = tape.backward(fwd.loss)?;
                        Ok(Some((value, fwd.n_queries, grads)))
                    }
                    Err(Error::Math(MathError::Singular { dim, condition, .. })) => {
                        log::warn!(
                            "skipping task of user {}: ridge system of size {dim} singular (condition {condition:e})",
                            t.task.user_id
                        );
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut out = BatchLoss {
            loss: 0.0,
            grads: Grads::new(params.len()),
            n_queries: 0,
            skipped: 0,
        };
        let mut total = 0.0;
        for o in outcomes {
            match o? {
                Some((value, n, g)) => {
                    total += value;
                    out.n_queries += n;
                    out.grads.merge(&g);
                }
                None => out.skipped += 1,
            }
        }
        if out.n_queries > 0 {
            let scale = 1.0 / out.n_queries as f64;
            out.loss = total * scale;
            out.grads.scale(scale);
        }
        Ok(out)
    }

    /// Query probabilities for one user, encoding the support set once.
    pub fn predict(
        &self,
        psi: Option<&SharedPredictor>,
        support: &[&Instance],
        queries: &[&Instance],
    ) -> Result<Vec<f64>> {
        let psi = self.require_shared(psi)?;
        if support.is_empty() {
            return Err(Error::MissingSupport("zero-shot prediction is not supported".into()));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let enc_s = self.encode(support)?;
        self.counters.support_encodings.fetch_add(1, Ordering::Relaxed);
        let enc_q = self.encode(queries)?;
        let psi_s = match psi {
            Some(p) => p.logits(support)?,
            None => Vec::new(),
        };
        let psi_q = match psi {
            Some(p) => p.logits(queries)?,
            None => Vec::new(),
        };
        self.predict_encoded(support, &enc_s, &psi_s, &enc_q, &psi_q)
    }

    /// Reference path that treats every query independently, re-encoding
    /// the support set each time.
    pub fn predict_per_query(
        &self,
        psi: Option<&SharedPredictor>,
        support: &[&Instance],
        queries: &[&Instance],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            out.extend(self.predict(psi, support, std::slice::from_ref(q))?);
        }
        Ok(out)
    }

    fn predict_encoded(
        &self,
        support: &[&Instance],
        enc_s: &DenseMatrix,
        psi_s: &[f64],
        enc_q: &DenseMatrix,
        psi_q: &[f64],
    ) -> Result<Vec<f64>> {
        let (w, b) = self.theta();
        if self.mode == MetaMode::Mus {
            let labels: Vec<u8> = support.iter().map(|x| x.label).collect();
            return mus_predict(w, b, enc_s, &labels, enc_q);
        }
        let dy = ops::residuals_from_logits(support, psi_s);
        let delta = match self.mode {
            MetaMode::Nn => ops::weighted_targets(w, b, enc_s, &dy, enc_q)?,
            _ => match rr_fit(self.lambda(), enc_s, &dy) {
                Ok(wstar) => rr_predict(&wstar, enc_q)?,
                Err(Error::Math(e @ MathError::Singular { .. })) => {
                    log::warn!("ridge fit failed at inference ({e}); using the shared prediction");
                    vec![0.0; enc_q.rows()]
                }
                Err(e) => return Err(e),
            },
        };
        let beta = self.beta(support.len());
        Ok(psi_q.iter().zip(&delta).map(|(&z, &d)| fuse(z, beta, d)).collect())
    }

    pub fn to_checkpoint(&self, psi: Option<&SharedPredictor>) -> Checkpoint {
        let header = serde_json::json!({
            "mode": self.mode,
            "encoder": self.encoder.spec(),
            "tau": self.tau,
            "beta_per_size": self.beta_per_size(),
            "shared": psi.map(|p| p.spec()),
        });
        let mut stores = vec![self.params.clone()];
        if let Some(p) = psi {
            stores.push(p.params.clone());
        }
        Checkpoint {
            kind: CheckpointKind::Meta,
            header,
            stores,
        }
    }

    /// Rebuilds the model (and the bundled Ψ, if any) from a checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<(Self, Option<SharedPredictor>)> {
        #[derive(Deserialize)]
        struct Header {
            mode: MetaMode,
            encoder: PredictorSpec,
            tau: usize,
            beta_per_size: bool,
            shared: Option<PredictorSpec>,
        }
        if ckpt.kind != CheckpointKind::Meta {
            return Err(Error::SpecMismatch("expected a meta-model checkpoint".into()));
        }
        let h: Header = serde_json::from_value(ckpt.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut stores = ckpt.stores.into_iter();
        let meta_store = stores
            .next()
            .ok_or_else(|| Error::Format("meta checkpoint has no parameter store".into()))?;
        let mut model = Self::new(
            h.mode,
            h.encoder,
            h.tau,
            h.beta_per_size,
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        check_same_layout(&model.params, &meta_store)?;
        model.params = meta_store;
        let psi = match (h.shared, stores.next()) {
            (Some(spec), Some(store)) => Some(SharedPredictor::from_params(spec, store, true)?),
            (None, None) => None,
            _ => return Err(Error::Format("shared predictor header and payload disagree".into())),
        };
        Ok((model, psi))
    }
}

/// Any of the evaluated cold-start predictors.
#[derive(Clone, Copy, Debug)]
pub enum ColdStartModel<'a> {
    SharedOnly(&'a SharedPredictor),
    Resus { psi: &'a SharedPredictor, meta: &'a MetaModel },
    Mus(&'a MetaModel),
}

impl ColdStartModel<'_> {
    pub fn method_name(&self) -> String {
        match self {
            ColdStartModel::SharedOnly(p) => format!("{}", p.spec().arch),
            ColdStartModel::Resus { meta, .. } => format!("resus_{}", meta.mode()),
            ColdStartModel::Mus(_) => "mus".into(),
        }
    }

    pub fn predict(&self, support: &[&Instance], queries: &[&Instance], batched: bool) -> Result<Vec<f64>> {
        match *self {
            ColdStartModel::SharedOnly(psi) => {
                if support.is_empty() {
                    return Err(Error::MissingSupport("zero-shot prediction is not supported".into()));
                }
                Ok(psi.logits(queries)?.into_iter().map(sigmoid).collect())
            }
            ColdStartModel::Resus { psi, meta } if batched => meta.predict(Some(psi), support, queries),
            ColdStartModel::Resus { psi, meta } => meta.predict_per_query(Some(psi), support, queries),
            ColdStartModel::Mus(meta) if batched => meta.predict(None, support, queries),
            ColdStartModel::Mus(meta) => meta.predict_per_query(None, support, queries),
        }
    }
}

#[cfg(test)]
mod tests;
