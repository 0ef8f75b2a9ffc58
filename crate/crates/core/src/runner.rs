//! Experiment configuration and the ingest → pretrain → meta-train →
//! evaluate pipeline over a self-describing output directory.
//!
//! ```text
//! <out>/config.toml              full config, defaults filled in
//! <out>/dataset.bin              bundle (+ dataset.bin.manifest.json)
//! <out>/test_suite.json          audit index of the evaluation tasks
//! <out>/seed-<s>/shared.ckpt     frozen Ψ
//! <out>/seed-<s>/meta-<mode>.ckpt
//! <out>/seed-<s>/report-<method>.{json,csv}
//! <out>/seed-<s>/timing-<method>.json
//! <out>/summary-<method>.{json,csv}   across-seed means
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ColdnessConfig, Instance, Stage, UserLog};
use crate::episodes::{build_meta_test, MetaTestSuite, SizeMode, SupportSizeDist};
use crate::error::{Error, Result};
use crate::eval::{combine_seeds, evaluate_suite, MetricRow, StageReport};
use crate::ingest::{
    build_dataset, parse_movielens, parse_tabular, read_bundle, write_bundle, Dataset, DatasetManifest, SourceFormat,
    TabularSchema,
};
use crate::meta::{meta_train, ColdStartModel, MetaConfig, MetaMode, MetaModel, MetaTrainReport};
use crate::models::{
    pretrain_shared, read_checkpoint, write_checkpoint, Architecture, Checkpoint, CheckpointKind, PredictorSpec,
    PretrainReport, SharedPredictor, TrainConfig,
};

/// What gets trained and evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nn,
    Rr,
    Mus,
    #[serde(alias = "shared-only")]
    Shared,
}

impl Method {
    pub fn meta_mode(self) -> Option<MetaMode> {
        match self {
            Method::Nn => Some(MetaMode::Nn),
            Method::Rr => Some(MetaMode::Rr),
            Method::Mus => Some(MetaMode::Mus),
            Method::Shared => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.meta_mode() {
            Some(m) => m.fmt(f),
            None => f.write_str("shared"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" | "shared-only" => Ok(Method::Shared),
            other => other.parse::<MetaMode>().map(|m| match m {
                MetaMode::Nn => Method::Nn,
                MetaMode::Rr => Method::Rr,
                MetaMode::Mus => Method::Mus,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: SourceFormat,
    /// Directory of `.dat` files (MovieLens) or one delimited file.
    pub path: PathBuf,
    /// Existing bundle to load instead of parsing `path`.
    pub bundle: Option<PathBuf>,
    /// Rating cutoff for a positive label; ignored for pre-labelled tabular
    /// sources.
    pub binarization_threshold: Option<f64>,
    pub min_item_interactions: usize,
    pub split_ratio: [f64; 3],
    pub seed: u64,
    pub tabular: TabularSchema,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: SourceFormat::Movielens,
            path: PathBuf::from("data/ml-1m"),
            bundle: None,
            binarization_threshold: Some(3.0),
            min_item_interactions: 100,
            split_ratio: [7.0, 2.0, 1.0],
            seed: 2020,
            tabular: TabularSchema::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub embed_dim: usize,
    pub mlp_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::DeepFm,
            embed_dim: 10,
            mlp_widths: vec![64, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub tau: usize,
    pub size_mode: SizeMode,
    /// Spacing of evaluated support sizes: 1 gives `{1..τ}`, 10 gives
    /// `{10, 20, …, τ}`.
    pub eval_step: usize,
    pub suite_seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            tau: 30,
            size_mode: SizeMode::Uniform,
            eval_step: 1,
            suite_seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Method,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub out: PathBuf,
    /// Replaces every learned β at evaluation time.
    pub beta_override: Option<f64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub episodes: EpisodeConfig,
    pub pretrain: TrainConfig,
    pub meta: MetaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Method::Rr,
            seeds: vec![1],
            threads: 0,
            out: PathBuf::from("runs/default"),
            beta_override: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            episodes: EpisodeConfig::default(),
            pretrain: TrainConfig::default(),
            meta: MetaConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.episodes.tau == 0 || self.episodes.eval_step == 0 {
            return Err(Error::Config("tau and eval_step must be positive".into()));
        }
        if self.model.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || self.meta.train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.coldness()?;
        Ok(())
    }

    pub fn coldness(&self) -> Result<ColdnessConfig> {
        match self.episodes.eval_step {
            1 => ColdnessConfig::contiguous(self.episodes.tau),
            step => ColdnessConfig::stepped(self.episodes.tau, step),
        }
    }

    fn validation_coldness(&self) -> Result<ColdnessConfig> {
        let step = self.meta.val_size_step.max(1) * self.episodes.eval_step;
        ColdnessConfig::stepped(self.episodes.tau, step).or_else(|_| self.coldness())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    fn shared_spec(&self, ds: &Dataset) -> Result<PredictorSpec> {
        PredictorSpec::new(self.model.arch, self.model.embed_dim, self.model.mlp_widths.clone(), &ds.space)
    }

    fn encoder_spec(&self, ds: &Dataset) -> Result<PredictorSpec> {
        PredictorSpec::new(self.meta.encoder_arch, self.model.embed_dim, self.model.mlp_widths.clone(), &ds.space)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `config.toml` into the output directory.
pub fn echo_config(cfg: &ExperimentConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    let p = cfg.out.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

/// Parses and preprocesses the raw source, writing the bundle under `out`.
pub fn cmd_ingest(cfg: &ExperimentConfig) -> Result<Dataset> {
    echo_config(cfg)?;
    let raw = match cfg.data.format {
        SourceFormat::Movielens => parse_movielens(&cfg.data.path, cfg.data.binarization_threshold.unwrap_or(3.0))?,
        SourceFormat::Tabular => parse_tabular(&cfg.data.path, &cfg.data.tabular)?,
    };
    let manifest = DatasetManifest {
        format: cfg.data.format,
        field_names: raw.field_names.clone(),
        binarization_threshold: match cfg.data.format {
            SourceFormat::Movielens => Some(cfg.data.binarization_threshold.unwrap_or(3.0)),
            SourceFormat::Tabular => None,
        },
        min_item_interactions: cfg.data.min_item_interactions,
        split_ratio: cfg.data.split_ratio,
        seed: cfg.data.seed,
        counts: None,
    };
    let ds = build_dataset(raw, manifest)?;
    write_bundle(&cfg.out.join("dataset.bin"), &ds)?;
    if let Some(c) = &ds.manifest.counts {
        log::info!(
            "ingested {} users ({} raw), {} items, {} instances, {} features",
            c.users,
            c.users_raw,
            c.items,
            c.instances,
            c.features
        );
    }
    Ok(ds)
}

/// The configured bundle, the bundle in `out`, or a fresh ingest.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(b) = &cfg.data.bundle {
        return read_bundle(b);
    }
    let local = cfg.out.join("dataset.bin");
    if local.exists() {
        read_bundle(&local)
    } else {
        cmd_ingest(cfg)
    }
}

fn test_suite(cfg: &ExperimentConfig, ds: &Dataset) -> Result<MetaTestSuite> {
    build_meta_test(&ds.test, &cfg.coldness()?, cfg.episodes.suite_seed)
}

fn all_instances(logs: &[UserLog]) -> Vec<&Instance> {
    logs.iter().flat_map(|l| l.instances()).collect()
}

#[derive(Serialize, Deserialize)]
struct Timed<T> {
    seconds: f64,
    report: T,
}

/// Pretrains and freezes Ψ; writes `shared.ckpt` and `pretrain.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<(SharedPredictor, PretrainReport)> {
    let dir = cfg.seed_dir(seed);
    create_dir(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = SharedPredictor::new(cfg.shared_spec(ds)?, &mut rng)?;
    let start = Instant::now();
    let train = all_instances(&ds.train);
    let val = all_instances(&ds.validation);
    let result = pretrain_shared(&mut psi, &train, &val, &cfg.pretrain, &mut rng);
    let seconds = start.elapsed().as_secs_f64();
    let report = match result {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => {
            // last good parameters were restored
            psi.freeze();
            write_checkpoint(&dir.join("shared.ckpt"), &shared_checkpoint(cfg, &psi))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    write_checkpoint(&dir.join("shared.ckpt"), &shared_checkpoint(cfg, &psi))?;
    write_json(&dir.join("pretrain.json"), &Timed { seconds, report: &report })?;
    Ok((psi, report))
}

fn shared_checkpoint(cfg: &ExperimentConfig, psi: &SharedPredictor) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Shared,
        header: serde_json::json!({ "spec": psi.spec(), "config": cfg.echo() }),
        stores: vec![psi.params.clone()],
    }
}

/// Loads `shared.ckpt`, refusing a spec that differs from the config.
pub fn load_shared(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<SharedPredictor> {
    let path = cfg.seed_dir(seed).join("shared.ckpt");
    let ckpt = read_checkpoint(&path)?;
    if ckpt.kind != CheckpointKind::Shared {
        return Err(Error::SpecMismatch(format!("{} is not a shared-predictor checkpoint", path.display())));
    }
    let spec: PredictorSpec =
        serde_json::from_value(ckpt.header["spec"].clone()).map_err(|e| Error::Format(e.to_string()))?;
    let want = cfg.shared_spec(ds)?;
    if spec != want {
        return Err(Error::SpecMismatch(format!(
            "{} holds {} (d={}, widths {:?}); config asks for {} (d={}, widths {:?})",
            path.display(),
            spec.arch,
            spec.embed_dim,
            spec.mlp_widths,
            want.arch,
            want.embed_dim,
            want.mlp_widths
        )));
    }
    let store = ckpt
        .stores
        .into_iter()
        .next()
        .ok_or_else(|| Error::Format("shared checkpoint has no parameters".into()))?;
    SharedPredictor::from_params(spec, store, true)
}

fn meta_path(cfg: &ExperimentConfig, seed: u64, mode: MetaMode) -> PathBuf {
    cfg.seed_dir(seed).join(format!("meta-{mode}.ckpt"))
}

/// Meta-trains Φ and the base-learner hyperparameters against the frozen
/// Ψ of this seed; writes `meta-<mode>.ckpt` and `meta-<mode>.json`.
pub fn cmd_meta_train(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<(MetaModel, MetaTrainReport)> {
    let mode = cfg
        .mode
        .meta_mode()
        .ok_or_else(|| Error::Config("mode `shared` has no meta-training phase".into()))?;
    let psi = load_shared(cfg, ds, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_3E7A);
    let mut model = MetaModel::new(
        mode,
        cfg.encoder_spec(ds)?,
        cfg.episodes.tau,
        cfg.meta.beta_per_size,
        &mut rng,
    )?;
    if mode.uses_shared() && cfg.meta.init_encoder_from_shared {
        let n = model.init_encoder_from(&psi);
        log::info!("encoder initialized from {n} shared-predictor tensors");
    }
    let dist = match cfg.episodes.size_mode {
        SizeMode::Uniform => SupportSizeDist::uniform(cfg.episodes.tau)?,
        SizeMode::Empirical => SupportSizeDist::empirical(ds.train.iter().map(UserLog::len), cfg.episodes.tau)?,
    };
    let val_suite = build_meta_test(&ds.validation, &cfg.validation_coldness()?, cfg.episodes.suite_seed)?;
    let psi_opt = mode.uses_shared().then_some(&psi);
    let start = Instant::now();
    let result = meta_train(
        &mut model,
        psi_opt,
        &ds.train,
        Some((&ds.validation, &val_suite)),
        &dist,
        &cfg.meta.train,
        &mut rng,
    );
    let seconds = start.elapsed().as_secs_f64();
    let mut ckpt = model.to_checkpoint(psi_opt);
    ckpt.header["config"] = cfg.echo();
    write_checkpoint(&meta_path(cfg, seed, mode), &ckpt)?;
    let report = result?;
    write_json(
        &cfg.seed_dir(seed).join(format!("meta-{mode}.json")),
        &Timed { seconds, report: &report },
    )?;
    Ok((model, report))
}

/// Trained models of one seed, ready for evaluation.
pub struct Trained {
    pub psi: SharedPredictor,
    pub meta: Option<MetaModel>,
}

impl Trained {
    pub fn load(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Self> {
        let psi = load_shared(cfg, ds, seed)?;
        let meta = match cfg.mode.meta_mode() {
            None => None,
            Some(mode) => {
                let (mut m, _) = MetaModel::from_checkpoint(read_checkpoint(&meta_path(cfg, seed, mode))?)?;
                if m.mode() != mode || m.encoder_spec() != &cfg.encoder_spec(ds)? {
                    return Err(Error::SpecMismatch(format!(
                        "meta checkpoint holds mode {} / {} encoder; config asks for {mode} / {}",
                        m.mode(),
                        m.encoder_spec().arch,
                        cfg.meta.encoder_arch
                    )));
                }
                if let Some(b) = cfg.beta_override {
                    m.set_beta(b);
                }
                Some(m)
            }
        };
        Ok(Self { psi, meta })
    }

    pub fn model(&self) -> ColdStartModel<'_> {
        match &self.meta {
            None => ColdStartModel::SharedOnly(&self.psi),
            Some(m) if m.mode() == MetaMode::Mus => ColdStartModel::Mus(m),
            Some(m) => ColdStartModel::Resus { psi: &self.psi, meta: m },
        }
    }
}

fn report_name(cfg: &ExperimentConfig) -> String {
    match cfg.beta_override {
        Some(b) if cfg.mode != Method::Shared => format!("{}-beta{b}", cfg.mode),
        _ => cfg.mode.to_string(),
    }
}

/// Evaluates the configured method of one seed on the test suite and
/// writes `report-<method>.{json,csv}`. RelaImpr is against Ψ alone when
/// its report for this seed exists.
pub fn cmd_evaluate(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<StageReport> {
    let trained = Trained::load(cfg, ds, seed)?;
    let suite = test_suite(cfg, ds)?;
    suite.write_index(&cfg.out.join("test_suite.json"))?;
    let rows = evaluate_suite(&trained.model(), &ds.test, &suite)?;
    let dir = cfg.seed_dir(seed);
    let base_path = dir.join("report-shared.json");
    let base = if cfg.mode != Method::Shared && base_path.exists() {
        Some(StageReport::read_json(&base_path)?)
    } else {
        None
    };
    let report = StageReport::from_rows(rows, &suite.coldness, base.as_ref())?;
    let name = report_name(cfg);
    report.write_json(&dir.join(format!("report-{name}.json")), &cfg.echo())?;
    let csv = dir.join(format!("report-{name}.csv"));
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub method: String,
    pub train_seconds: Option<f64>,
    pub test_seconds_batched: f64,
    pub test_seconds_per_query: f64,
    pub support_encodings_batched: u64,
    pub support_encodings_per_query: u64,
    pub tasks: usize,
    pub queries: usize,
}

/// Wall-clock test time of the batched and per-query inference paths on
/// the full test suite, plus recorded training time.
pub fn cmd_timing(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<TimingReport> {
    let trained = Trained::load(cfg, ds, seed)?;
    let model = trained.model();
    let suite = test_suite(cfg, ds)?;
    let tasks: Vec<_> = suite.tasks.values().flatten().collect();
    let run = |batched: bool| -> Result<(f64, u64, usize)> {
        if let Some(m) = &trained.meta {
            m.counters().reset();
        }
        let start = Instant::now();
        let mut queries = 0;
        for t in &tasks {
            let log = &ds.test[t.log];
            let support = t.task.support_instances(log);
            let query = t.task.query_instances(log);
            queries += model.predict(&support, &query, batched)?.len();
        }
        let secs = start.elapsed().as_secs_f64();
        let enc = trained.meta.as_ref().map_or(0, |m| m.counters().support_encodings());
        Ok((secs, enc, queries))
    };
    let (tb, eb, queries) = run(true)?;
    let (tq, eq, _) = run(false)?;
    let dir = cfg.seed_dir(seed);
    let read_secs = |name: &str| -> Option<f64> {
        let bytes = std::fs::read(dir.join(name)).ok()?;
        serde_json::from_slice::<serde_json::Value>(&bytes).ok()?["seconds"].as_f64()
    };
    let train_seconds = match cfg.mode.meta_mode() {
        None => read_secs("pretrain.json"),
        Some(mode) => read_secs(&format!("meta-{mode}.json")),
    };
    let report = TimingReport {
        method: model.method_name(),
        train_seconds,
        test_seconds_batched: tb,
        test_seconds_per_query: tq,
        support_encodings_batched: eb,
        support_encodings_per_query: eq,
        tasks: tasks.len(),
        queries,
    };
    write_json(&dir.join(format!("timing-{}.json", cfg.mode)), &report)?;
    Ok(report)
}

/// Across-seed result of [`cmd_run`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub shared: StageReport,
    pub method: Option<StageReport>,
}

impl RunSummary {
    pub fn stage_auc(&self, stage: Stage) -> Option<f64> {
        self.method.as_ref().unwrap_or(&self.shared).stage(stage)?.auc
    }
}

/// Full pipeline for every seed, then across-seed stage reports for Ψ
/// alone and for the configured method.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    echo_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let coldness = cfg.coldness()?;
    let mut shared_rows: Vec<Vec<MetricRow>> = Vec::new();
    let mut method_rows: Vec<Vec<MetricRow>> = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("seed {seed}: pretraining {}", cfg.model.arch);
        cmd_pretrain(cfg, &ds, seed)?;
        let shared_cfg = ExperimentConfig {
            mode: Method::Shared,
            ..cfg.clone()
        };
        shared_rows.push(cmd_evaluate(&shared_cfg, &ds, seed)?.rows);
        if cfg.mode != Method::Shared {
            log::info!("seed {seed}: meta-training {}", cfg.mode);
            cmd_meta_train(cfg, &ds, seed)?;
            method_rows.push(cmd_evaluate(cfg, &ds, seed)?.rows);
        }
    }
    let shared = StageReport::from_rows(combine_seeds(&shared_rows)?, &coldness, None)?;
    shared.write_json(&cfg.out.join("summary-shared.json"), &cfg.echo())?;
    let method = if method_rows.is_empty() {
        None
    } else {
        let rep = StageReport::from_rows(combine_seeds(&method_rows)?, &coldness, Some(&shared))?;
        rep.write_json(&cfg.out.join(format!("summary-{}.json", report_name(cfg))), &cfg.echo())?;
        let csv = cfg.out.join(format!("summary-{}.csv", report_name(cfg)));
        std::fs::write(&csv, rep.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Some(rep)
    };
    Ok(RunSummary { shared, method })
}
