//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 5 and 6 need the public datasets: set `RESUS_MOVIELENS_DIR` to
//! the extracted `ml-1m` directory and `RESUS_FRAPPE_PATH` to a labelled
//! Frappe CSV (`user,item,<context columns>,label`).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resus_core::data::{make_task, Instance, Stage, UserLog};
use resus_core::episodes::IndexedTask;
use resus_core::eval::{auc, combine_seeds, rela_impr, MetricRow, StageReport};
use resus_core::ingest::{build_dataset, Dataset, DatasetManifest, SourceFormat};
use resus_core::math::{grad_check, kernel_check, sigmoid, DenseMatrix};
use resus_core::meta::{mus_predict, nn_predict, residual_targets, rr_fit, ColdStartModel, MetaMode, MetaModel, ResidualTask};
use resus_core::models::{Architecture, PredictorSpec, SharedPredictor};
use resus_core::runner::{self, ExperimentConfig, Method};
use resus_core::synth::{generate, SynthConfig};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn synthetic(users: usize, seed: u64) -> Dataset {
    let data = generate(&SynthConfig {
        users,
        movies: 40,
        min_len: 8,
        max_len: 30,
        seed,
        ..Default::default()
    })
    .unwrap();
    let manifest = DatasetManifest {
        format: SourceFormat::Movielens,
        field_names: vec![],
        binarization_threshold: Some(3.0),
        min_item_interactions: 1,
        split_ratio: [7.0, 2.0, 1.0],
        seed,
        counts: None,
    };
    build_dataset(data.to_raw(3.0), manifest).unwrap()
}

fn frozen_psi(ds: &Dataset, rng: &mut ChaCha8Rng) -> SharedPredictor {
    let spec = PredictorSpec::new(Architecture::DeepFm, 4, vec![6, 3], &ds.space).unwrap();
    let mut psi = SharedPredictor::new(spec, rng).unwrap();
    for id in 0..psi.params.len() {
        for v in psi.params.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    psi.freeze();
    psi
}

/// Meta model with every parameter drawn at random, so no ReLU sits at its
/// kink and β, λ are away from their initial values.
fn random_meta(ds: &Dataset, mode: MetaMode, d: usize, widths: Vec<usize>, rng: &mut ChaCha8Rng) -> MetaModel {
    let spec = PredictorSpec::new(Architecture::DeepFm, d, widths, &ds.space).unwrap();
    let mut m = MetaModel::new(mode, spec, 30, false, rng).unwrap();
    for id in 0..m.params.len() {
        for v in m.params.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    m
}

fn woodbury_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = rng.gen_range(1..=150);
        let k = rng.gen_range(8..=128);
        let lambda = 10f64.powf(rng.gen_range(-3.0..1.0));
        let phi = random_matrix(s, k, &mut rng);
        let dy: Vec<f64> = (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dual = DVector::from_vec(rr_fit(lambda, &phi, &dy).unwrap());
        // direct form: (ΦᵀΦ + λI)⁻¹ Φᵀ Δy
        let x = DMatrix::from_row_slice(s, k, phi.data());
        let direct = (x.transpose() * &x + DMatrix::identity(k, k) * lambda)
            .try_inverse()
            .unwrap()
            * x.transpose()
            * DVector::from_vec(dy);
        worst = worst.max((&dual - &direct).norm() / direct.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 30.0,
        format!("1000 tasks, max rel err {worst:.2e} (< 1e-6), {secs:.1}s (< 30s)"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let kernel_worst = kernel_check::KERNELS
        .iter()
        .flat_map(|k| (0..50).map(move |seed| kernel_check::check_kernel(k, seed).unwrap()))
        .fold(0.0f64, f64::max);

    let ds = synthetic(60, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let psi = frozen_psi(&ds, &mut rng);
    let mut task_worst = 0.0f64;
    let mut tasks = 0;
    for i in 0..60 {
        let mode = if i % 2 == 0 { MetaMode::Rr } else { MetaMode::Nn };
        let d = rng.gen_range(2..=8);
        let last = rng.gen_range(1..=8);
        let m = random_meta(&ds, mode, d, vec![rng.gen_range(2..=8), last], &mut rng);
        assert!(m.encoder_spec().encoding_dim() <= 16);
        let log = rng.gen_range(0..ds.train.len());
        let s = rng.gen_range(1..=5).min(ds.train[log].len() - 1);
        let task = make_task(&ds.train[log], s, true, &mut rng).unwrap();
        let batch = [IndexedTask { log, task }];
        let out = m.batch_loss(&m.params, Some(&psi), &ds.train, &batch).unwrap();
        let mut ids = vec![m.beta_id()];
        match mode {
            MetaMode::Rr => {
                ids.push(m.lambda_id());
                ids.extend(m.encoder_param_ids());
            }
            _ => ids.extend(m.theta_ids()),
        }
        let report = grad_check(
            &m.params,
            &out.grads,
            |p| m.batch_loss(p, Some(&psi), &ds.train, &batch).unwrap().loss,
            1e-6,
            Some(&ids),
        )
        .unwrap();
        task_worst = task_worst.max(report.max_rel_err);
        tasks += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        kernel_worst < 1e-4 && task_worst < 1e-4 && secs < 120.0,
        format!(
            "{} kernels x 50 shapes max rel err {kernel_worst:.2e}; {tasks} RR/NN micro-tasks max rel err {task_worst:.2e} (< 1e-4); {secs:.1}s (< 120s)",
            kernel_check::KERNELS.len()
        ),
    )
}

fn exact_reductions() -> Outcome {
    let ds = synthetic(400, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = frozen_psi(&ds, &mut rng);
    let logs: Vec<&UserLog> = ds.train.iter().chain(&ds.validation).chain(&ds.test).collect();

    let mut queries = 0usize;
    let mut mismatches = 0usize;
    let mut models: Vec<MetaModel> = [MetaMode::Rr, MetaMode::Nn]
        .into_iter()
        .map(|mode| random_meta(&ds, mode, 4, vec![6, 3], &mut rng))
        .collect();
    for m in &mut models {
        m.set_beta(0.0);
    }
    for round in 0.. {
        if queries >= 10_000 {
            break;
        }
        let m = &models[round % 2];
        let log = logs[rng.gen_range(0..logs.len())];
        let xs: Vec<&Instance> = log.instances().iter().collect();
        let (support, query) = xs.split_at(rng.gen_range(1..xs.len()));
        let got = m.predict(Some(&psi), support, query).unwrap();
        for (g, z) in got.iter().zip(psi.logits(query).unwrap()) {
            mismatches += usize::from(g.to_bits() != sigmoid(z).to_bits());
            queries += 1;
        }
    }

    let mut zero = psi.clone();
    zero.zero_params();
    let mut worst = 0.0f64;
    let mut tasks = 0;
    while tasks < 1000 {
        let nn = random_meta(&ds, MetaMode::Nn, 4, vec![6, 3], &mut rng);
        let (w, b) = nn.theta();
        for _ in 0..50 {
            let log = logs[rng.gen_range(0..logs.len())];
            let xs: Vec<&Instance> = log.instances().iter().collect();
            let (support, query) = xs.split_at(rng.gen_range(1..xs.len()));
            let s_enc = nn.encode(support).unwrap();
            let q_enc = nn.encode(query).unwrap();
            let labels: Vec<u8> = support.iter().map(|x| x.label).collect();
            let task = ResidualTask {
                support_enc: s_enc.clone(),
                residuals: residual_targets(&zero, support).unwrap(),
                query_enc: q_enc.clone(),
                query_labels: query.iter().map(|x| x.label).collect(),
            };
            let delta = nn_predict(w, b, &task).unwrap();
            let mus = mus_predict(w, b, &s_enc, &labels, &q_enc).unwrap();
            for (d, p) in delta.iter().zip(&mus) {
                worst = worst.max((d - (p - 0.5)).abs());
            }
            tasks += 1;
        }
    }
    outcome(
        mismatches == 0 && queries >= 10_000 && worst < 1e-7,
        format!(
            "beta=0: {mismatches} of {queries} queries differ bitwise from sigmoid(psi); zero-logit psi: max |dy_hat - (mus - 0.5)| = {worst:.2e} over {tasks} tasks (< 1e-7)"
        ),
    )
}

fn pairwise_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
    }
    hits / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 500 {
        let n = rng.gen_range(2..=200);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let grid = rng.gen_range(1..=50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..grid)) / 7.0).collect();
        worst = worst.max((auc(&labels, &scores).unwrap() - pairwise_auc(&labels, &scores)).abs());
        cases += 1;
    }
    let r = rela_impr(0.80, 0.75).unwrap();
    let shown = format!("{r:.1}");
    outcome(
        worst <= 1e-12 && (r - 20.0).abs() < 1e-12 && shown == "20.0",
        format!("500 cases, max |rank-sum - pairwise| = {worst:.1e} (<= 1e-12); RelaImpr(0.80, 0.75) = {shown}%"),
    )
}

fn batching() -> Outcome {
    let ds = synthetic(300, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let psi = frozen_psi(&ds, &mut rng);
    let mut worst = 0.0f64;
    let mut bad_counts = Vec::new();
    let mut users = 0;
    for mode in [MetaMode::Nn, MetaMode::Rr, MetaMode::Mus] {
        let meta = random_meta(&ds, mode, 4, vec![6, 3], &mut rng);
        let model = match mode {
            MetaMode::Mus => ColdStartModel::Mus(&meta),
            _ => ColdStartModel::Resus { psi: &psi, meta: &meta },
        };
        for log in &ds.test {
            let xs: Vec<&Instance> = log.instances().iter().collect();
            let (support, query) = xs.split_at(rng.gen_range(1..xs.len()));
            meta.counters().reset();
            let batched = model.predict(support, query, true).unwrap();
            if meta.counters().support_encodings() != 1 {
                bad_counts.push(format!("{mode}: {}", meta.counters().support_encodings()));
            }
            let single = model.predict(support, query, false).unwrap();
            for (a, b) in batched.iter().zip(&single) {
                worst = worst.max((a - b).abs());
            }
            users += 1;
        }
    }
    outcome(
        worst <= 1e-7 && bad_counts.is_empty(),
        format!(
            "{users} user tasks (NN/RR/MUS), max |batched - per-query| = {worst:.1e} (<= 1e-7), {} users with != 1 support encoding pass",
            bad_counts.len()
        ),
    )
}

fn stage_auc(report: &StageReport, stage: Stage) -> Option<f64> {
    report.stage(stage).and_then(|s| s.auc)
}

fn meta_rows(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<Vec<MetricRow>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            runner::cmd_meta_train(cfg, ds, seed).unwrap();
            runner::cmd_evaluate(cfg, ds, seed).unwrap().rows
        })
        .collect()
}

fn dataset_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from).filter(|p| p.exists())
}

fn movielens() -> Outcome {
    let Some(dir) = dataset_path("RESUS_MOVIELENS_DIR") else {
        return outcome(
            false,
            "MovieLens-1M not available (set RESUS_MOVIELENS_DIR to the ml-1m directory); criterion not evaluated".into(),
        );
    };
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        mode: Method::Rr,
        seeds: vec![1, 2, 3],
        out: out.path().to_path_buf(),
        data: runner::DataConfig {
            path: dir,
            ..Default::default()
        },
        ..Default::default()
    };
    let summary = runner::cmd_run(&cfg).unwrap();
    let ds = runner::load_dataset(&cfg).unwrap();
    let users_raw = ds.manifest.counts.as_ref().map_or(0, |c| c.users_raw);
    let rr = summary.method.unwrap();
    let nn_cfg = ExperimentConfig {
        mode: Method::Nn,
        ..cfg.clone()
    };
    let coldness = cfg.coldness().unwrap();
    let nn = StageReport::from_rows(combine_seeds(&meta_rows(&nn_cfg, &ds)).unwrap(), &coldness, Some(&summary.shared))
        .unwrap();

    let shared_i = stage_auc(&summary.shared, Stage::I).unwrap_or(0.0);
    let rr_gain = rr.stage(Stage::I).and_then(|s| s.rela_impr).unwrap_or(f64::NEG_INFINITY);
    let nn_gain = nn.stage(Stage::I).and_then(|s| s.rela_impr).unwrap_or(f64::NEG_INFINITY);
    let (rr_i, rr_iii) = (stage_auc(&rr, Stage::I).unwrap_or(1.0), stage_auc(&rr, Stage::III).unwrap_or(0.0));
    let mins = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        shared_i >= 0.74 && rr_gain >= 2.0 && nn_gain >= 2.0 && rr_iii >= rr_i,
        format!(
            "{users_raw} users pre-filter; DeepFM stage I AUC {shared_i:.4} (>= 0.74); RelaImpr I: RR {rr_gain:+.1}%, NN {nn_gain:+.1}% (>= +2.0%); RR stage III {rr_iii:.4} >= stage I {rr_i:.4}; {mins:.1} min"
        ),
    )
}

fn frappe() -> Outcome {
    let Some(path) = dataset_path("RESUS_FRAPPE_PATH") else {
        return outcome(
            false,
            "Frappe not available (set RESUS_FRAPPE_PATH to a labelled CSV); criterion not evaluated".into(),
        );
    };
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        mode: Method::Nn,
        seeds: vec![1],
        out: out.path().to_path_buf(),
        data: runner::DataConfig {
            format: SourceFormat::Tabular,
            path,
            binarization_threshold: None,
            ..Default::default()
        },
        ..Default::default()
    };
    let summary = runner::cmd_run(&cfg).unwrap();
    let ds = runner::load_dataset(&cfg).unwrap();
    let mus_cfg = ExperimentConfig {
        mode: Method::Mus,
        ..cfg.clone()
    };
    let coldness = cfg.coldness().unwrap();
    let mus = StageReport::from_rows(combine_seeds(&meta_rows(&mus_cfg, &ds)).unwrap(), &coldness, None).unwrap();
    let nn_iii = stage_auc(summary.method.as_ref().unwrap(), Stage::III).unwrap_or(0.0);
    let mus_iii = stage_auc(&mus, Stage::III).unwrap_or(1.0);
    let gap = rela_impr(nn_iii, mus_iii).unwrap_or(f64::NEG_INFINITY);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        gap >= 10.0 && mins <= 15.0,
        format!("stage III AUC NN {nn_iii:.4} vs MUS {mus_iii:.4}: RelaImpr {gap:+.1} points (>= 10); {mins:.1} min (<= 15)"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("1 woodbury equivalence", woodbury_equivalence),
        ("2 gradient suite", gradient_suite),
        ("3 exact reductions", exact_reductions),
        ("4 auc oracle", auc_oracle),
        ("5 movielens reproduction", movielens),
        ("6 frappe sanity", frappe),
        ("7 inference batching", batching),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {verdict} [{:.1?}] {}", Duration::from_secs_f64(t.elapsed().as_secs_f64()), result.detail);
        failed += usize::from(!result.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
