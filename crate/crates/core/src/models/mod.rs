//! Shared predictor and feature encoder architectures over embedded
//! categorical fields.

mod checkpoint;
mod pretrain;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSpace, Instance};
use crate::error::{Error, Result};
use crate::math::{DenseMatrix, ParamId, ParamStore, Tape, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind};
pub use pretrain::{pretrain_shared, PretrainReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lr,
    Fm,
    DeepFm,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Lr => "lr",
            Architecture::Fm => "fm",
            Architecture::DeepFm => "deepfm",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(Architecture::Lr),
            "fm" => Ok(Architecture::Fm),
            "deepfm" => Ok(Architecture::DeepFm),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Architecture plus the dimensions that fix its parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub arch: Architecture,
    pub embed_dim: usize,
    /// Hidden widths of the DeepFM tower; ignored for LR and FM.
    pub mlp_widths: Vec<usize>,
    /// Per-field vocabulary sizes including the OOV slot.
    pub vocab_sizes: Vec<usize>,
}

impl PredictorSpec {
    pub fn new(arch: Architecture, embed_dim: usize, mlp_widths: Vec<usize>, space: &FeatureSpace) -> Result<Self> {
        let spec = Self {
            arch,
            embed_dim,
            mlp_widths,
            vocab_sizes: space.vocab_sizes(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.vocab_sizes.is_empty() {
            return Err(Error::Config("feature space has no fields".into()));
        }
        if self.arch == Architecture::DeepFm
            && (self.mlp_widths.is_empty() || self.mlp_widths.contains(&0))
        {
            return Err(Error::Config("DeepFM needs non-empty positive MLP widths".into()));
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn total_features(&self) -> usize {
        self.vocab_sizes.iter().sum()
    }

    /// Encoder output width `K`.
    pub fn encoding_dim(&self) -> usize {
        match self.arch {
            Architecture::Lr => self.num_fields() * self.embed_dim,
            Architecture::Fm => self.embed_dim,
            Architecture::DeepFm => self.embed_dim + self.mlp_widths.last().copied().unwrap_or(0),
        }
    }
}

/// What a [`Network`] is built for: a logit (Ψ) or an encoding (Φ). The
/// encoder role omits the final prediction layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Predictor,
    Encoder,
}

#[derive(Clone, Debug)]
struct Layout {
    bias: Option<ParamId>,
    linear: Option<ParamId>,
    embedding: Option<ParamId>,
    mlp: Vec<(ParamId, ParamId)>,
    head: Option<(ParamId, ParamId)>,
}

/// Parameter layout of one architecture inside some [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    spec: PredictorSpec,
    role: Role,
    offsets: Vec<usize>,
    layout: Layout,
}

impl Network {
    /// Registers this network's parameters in `store`, randomly initialized.
    pub fn build<R: Rng + ?Sized>(spec: PredictorSpec, role: Role, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let total = spec.total_features();
        let d = spec.embed_dim;
        let f = spec.num_fields();
        let needs_linear = role == Role::Predictor;
        let needs_embedding = !(spec.arch == Architecture::Lr && role == Role::Predictor);
        let needs_mlp = spec.arch == Architecture::DeepFm;

        let bias = needs_linear.then(|| store.add("bias", DenseMatrix::zeros(1, 1)));
        let linear = needs_linear.then(|| store.add("linear", DenseMatrix::zeros(total, 1)));
        let embedding = needs_embedding.then(|| {
            let bound = 1.0 / (d as f64).sqrt();
            store.add("embedding", uniform(total, d, bound, rng))
        });
        let mut mlp = Vec::new();
        let mut head = None;
        if needs_mlp {
            let mut fan_in = f * d;
            for (i, &w) in spec.mlp_widths.iter().enumerate() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let wid = store.add(format!("mlp.{i}.weight"), uniform(fan_in, w, bound, rng));
                let bid = store.add(format!("mlp.{i}.bias"), DenseMatrix::zeros(1, w));
                mlp.push((wid, bid));
                fan_in = w;
            }
            if role == Role::Predictor {
                let bound = 1.0 / (fan_in as f64).sqrt();
                head = Some((
                    store.add("head.weight", uniform(fan_in, 1, bound, rng)),
                    store.add("head.bias", DenseMatrix::zeros(1, 1)),
                ));
            }
        }
        let mut offsets = Vec::with_capacity(f);
        let mut acc = 0;
        for &v in &spec.vocab_sizes {
            offsets.push(acc);
            acc += v;
        }
        Ok(Self {
            spec,
            role,
            offsets,
            layout: Layout {
                bias,
                linear,
                embedding,
                mlp,
                head,
            },
        })
    }

    pub fn spec(&self) -> &PredictorSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Ids of every parameter owned by this network.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let mut ids: Vec<ParamId> = [l.bias, l.linear, l.embedding].into_iter().flatten().collect();
        for &(w, b) in &l.mlp {
            ids.extend([w, b]);
        }
        if let Some((w, b)) = l.head {
            ids.extend([w, b]);
        }
        ids
    }

    fn global_rows(&self, batch: &[&Instance]) -> Result<Vec<usize>> {
        let f = self.spec.num_fields();
        let mut rows = Vec::with_capacity(batch.len() * f);
        for x in batch {
            if x.fields.len() != f {
                return Err(Error::InvalidData(format!(
                    "instance has {} fields, model expects {f}",
                    x.fields.len()
                )));
            }
            for (k, &idx) in x.fields.iter().enumerate() {
                if idx as usize >= self.spec.vocab_sizes[k] {
                    return Err(Error::InvalidData(format!(
                        "field {k} index {idx} outside vocabulary of {}",
                        self.spec.vocab_sizes[k]
                    )));
                }
                rows.push(self.offsets[k] + idx as usize);
            }
        }
        Ok(rows)
    }

    fn embed(&self, tape: &mut Tape<'_>, rows: &[usize]) -> Result<Var> {
        let table = self
            .layout
            .embedding
            .ok_or_else(|| Error::Config("network has no embedding table".into()))?;
        Ok(tape.gather(table, rows.to_vec(), self.spec.num_fields())?)
    }

    fn tower(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        for &(w, b) in &self.layout.mlp {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let z = tape.matmul(x, wv)?;
            let z = tape.add_row_bias(z, bv)?;
            x = tape.relu(z);
        }
        Ok(x)
    }

    /// Pre-sigmoid output `Ψ(x)` for each instance, as an `n×1` column.
    pub fn logit(&self, tape: &mut Tape<'_>, batch: &[&Instance]) -> Result<Var> {
        if self.role != Role::Predictor {
            return Err(Error::Config("encoder networks have no prediction layer".into()));
        }
        let rows = self.global_rows(batch)?;
        let l = &self.layout;
        let lin = tape.gather(l.linear.expect("predictor has linear"), rows.clone(), self.spec.num_fields())?;
        let mut out = tape.row_sum(lin);
        let bias = tape.param(l.bias.expect("predictor has bias"));
        out = tape.add_row_bias(out, bias)?;
        if self.spec.arch == Architecture::Lr {
            return Ok(out);
        }
        let emb = self.embed(tape, &rows)?;
        let fm = tape.fm_pool(emb, self.spec.num_fields())?;
        let fm = tape.row_sum(fm);
        out = tape.add(out, fm)?;
        if self.spec.arch == Architecture::DeepFm {
            let hidden = self.tower(tape, emb)?;
            let (hw, hb) = l.head.expect("deepfm predictor has head");
            let hw = tape.param(hw);
            let hb = tape.param(hb);
            let deep = tape.matmul(hidden, hw)?;
            let deep = tape.add_row_bias(deep, hb)?;
            out = tape.add(out, deep)?;
        }
        Ok(out)
    }

    /// Feature encoding `Φ(x)` as an `n×K` matrix.
    pub fn encode(&self, tape: &mut Tape<'_>, batch: &[&Instance]) -> Result<Var> {
        let rows = self.global_rows(batch)?;
        let emb = self.embed(tape, &rows)?;
        let f = self.spec.num_fields();
        match self.spec.arch {
            Architecture::Lr => Ok(emb),
            Architecture::Fm => Ok(tape.fm_pool(emb, f)?),
            Architecture::DeepFm => {
                let fm = tape.fm_pool(emb, f)?;
                let hidden = self.tower(tape, emb)?;
                Ok(tape.concat_cols(fm, hidden)?)
            }
        }
    }

    /// Logits without recording gradients.
    pub fn logits(&self, params: &ParamStore, batch: &[&Instance]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(params);
        let out = self.logit(&mut tape, batch)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Encodings without recording gradients.
    pub fn encodings(&self, params: &ParamStore, batch: &[&Instance]) -> Result<DenseMatrix> {
        if batch.is_empty() {
            return Ok(DenseMatrix::zeros(0, self.spec.encoding_dim()));
        }
        let mut tape = Tape::new(params);
        let out = self.encode(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized")
}

/// `(Σ eᵢ)² − Σ eᵢ²` elementwise over `F` embeddings of equal width.
pub fn fm_pool(embeddings: &[Vec<f64>]) -> Vec<f64> {
    let d = embeddings.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for e in embeddings {
        assert_eq!(e.len(), d, "embedding widths differ");
        for k in 0..d {
            sum[k] += e[k];
            sq[k] += e[k] * e[k];
        }
    }
    sum.iter().zip(&sq).map(|(s, q)| s * s - q).collect()
}

/// The frozen-able shared predictor Ψ with its own parameter storage.
#[derive(Clone, Debug)]
pub struct SharedPredictor {
    pub net: Network,
    pub params: ParamStore,
    frozen: bool,
}

impl SharedPredictor {
    pub fn new<R: Rng + ?Sized>(spec: PredictorSpec, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(spec, Role::Predictor, &mut params, rng)?;
        Ok(Self {
            net,
            params,
            frozen: false,
        })
    }

    /// Reassembles a predictor from stored parameters; shapes must match.
    pub fn from_params(spec: PredictorSpec, params: ParamStore, frozen: bool) -> Result<Self> {
        let mut fresh = ParamStore::new();
        let net = Network::build(spec, Role::Predictor, &mut fresh, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        check_same_layout(&fresh, &params)?;
        Ok(Self { net, params, frozen })
    }

    pub fn spec(&self) -> &PredictorSpec {
        self.net.spec()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn predict_logit(&self, x: &Instance) -> Result<f64> {
        Ok(self.net.logits(&self.params, &[x])?[0])
    }

    pub fn logits(&self, batch: &[&Instance]) -> Result<Vec<f64>> {
        self.net.logits(&self.params, batch)
    }

    /// Sets every parameter to zero.
    pub fn zero_params(&mut self) {
        for id in 0..self.params.len() {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

pub(crate) fn check_same_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::SpecMismatch(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for ((_, en, ev), (_, gn, gv)) in expected.iter().zip(got.iter()) {
        if en != gn || ev.shape() != gv.shape() {
            return Err(Error::SpecMismatch(format!(
                "parameter `{gn}` {:?} does not match `{en}` {:?}",
                gv.shape(),
                ev.shape()
            )));
        }
    }
    Ok(())
}
