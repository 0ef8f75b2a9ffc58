//! Finite-difference checks of every tape kernel on random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, DenseMatrix, Grads, MathError, ParamId, ParamStore, Tape, Var};

pub const KERNELS: [&str; 18] = [
    "matmul",
    "matmul_nt",
    "matmul_tn",
    "add",
    "add_row_bias",
    "relu",
    "sigmoid",
    "softplus",
    "scale_by",
    "add_scaled_identity",
    "solve_spd",
    "concat_cols",
    "row_sum",
    "gather",
    "fm_pool",
    "pairwise_abs_sim",
    "softmax_rows",
    "bce_sum",
];

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            // keep clear of the relu / abs kinks
            if v.abs() < 1e-3 {
                v + 2e-3f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

/// `rᵀ · X · c` with fixed random `r`, `c`, so every output entry matters.
fn reduce(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var, MathError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let (n, m) = tape.value(x).shape();
    let c = tape.constant(random(m, 1, &mut rng));
    let r = tape.constant(random(n, 1, &mut rng));
    let xc = tape.matmul(x, c)?;
    tape.matmul_tn(r, xc)
}

struct Case {
    params: ParamStore,
    ids: Vec<ParamId>,
    dims: (usize, usize, usize),
    rows: Vec<usize>,
    labels: Vec<f64>,
}

fn forward(name: &str, case: &Case, params: &ParamStore, seed: u64) -> Result<(f64, Grads), MathError> {
    let mut tape = Tape::new(params);
    let v: Vec<Var> = case.ids.iter().map(|&id| tape.param(id)).collect();
    let (n, k, m) = case.dims;
    let out = match name {
        "matmul" => tape.matmul(v[0], v[1])?,
        "matmul_nt" => tape.matmul_nt(v[0], v[1])?,
        "matmul_tn" => tape.matmul_tn(v[0], v[1])?,
        "add" => tape.add(v[0], v[1])?,
        "add_row_bias" => tape.add_row_bias(v[0], v[1])?,
        "relu" => tape.relu(v[0]),
        "sigmoid" => tape.sigmoid(v[0]),
        "softplus" => tape.softplus(v[0]),
        "scale_by" => tape.scale_by(v[0], v[1])?,
        "add_scaled_identity" => tape.add_scaled_identity(v[0], v[1])?,
        "solve_spd" => {
            let g = tape.matmul_nt(v[0], v[0])?;
            let s = tape.softplus(v[1]);
            let m = tape.add_scaled_identity(g, s)?;
            tape.solve_spd(m, v[2])?
        }
        "concat_cols" => tape.concat_cols(v[0], v[1])?,
        "row_sum" => tape.row_sum(v[0]),
        "gather" => tape.gather(case.ids[0], case.rows.clone(), k)?,
        "fm_pool" => tape.fm_pool(v[0], k)?,
        "pairwise_abs_sim" => tape.pairwise_abs_sim(v[0], v[1], v[2], v[3])?,
        "softmax_rows" => tape.softmax_rows(v[0]),
        "bce_sum" => {
            let p = tape.sigmoid(v[0]);
            tape.bce_sum(p, case.labels.clone(), 1.0 / (n * m) as f64)?
        }
        other => return Err(unknown(other)),
    };
    let loss = if tape.value(out).shape() == (1, 1) { out } else { reduce(&mut tape, out, seed)? };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

fn unknown(name: &str) -> MathError {
    MathError::Shape {
        op: "kernel_check",
        left: (0, 0),
        right: (name.len(), 0),
    }
}

fn build(name: &str, seed: u64) -> Result<Case, MathError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, m) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
    let shapes: Vec<(usize, usize)> = match name {
        "matmul" => vec![(n, k), (k, m)],
        "matmul_nt" => vec![(n, k), (m, k)],
        "matmul_tn" => vec![(k, n), (k, m)],
        "add" | "concat_cols" => vec![(n, m), (n, if name == "add" { m } else { k })],
        "add_row_bias" => vec![(n, m), (1, m)],
        "relu" | "sigmoid" | "softplus" | "row_sum" | "softmax_rows" => vec![(n, m)],
        "scale_by" => vec![(n, m), (1, 1)],
        "add_scaled_identity" => vec![(n, n), (1, 1)],
        "solve_spd" => vec![(n, k), (1, 1), (n, m)],
        "gather" => vec![(n + 2, m)],
        "fm_pool" => vec![(n, k * m)],
        "pairwise_abs_sim" => vec![(n, k), (m, k), (1, k), (1, 1)],
        "bce_sum" => vec![(n, 1)],
        other => return Err(unknown(other)),
    };
    let mut params = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| params.add(format!("{name}.{i}"), random(r, c, &mut rng)))
        .collect();
    let rows = (0..m * k).map(|_| rng.gen_range(0..n + 2)).collect();
    let labels = (0..n).map(|_| f64::from(rng.gen_range(0u8..=1))).collect();
    Ok(Case {
        params,
        ids,
        dims: (n, k, if name == "bce_sum" { 1 } else { m }),
        rows,
        labels,
    })
}

/// Max relative error of the named kernel's adjoint on one random shape
/// drawn from `seed`, against central differences with `h = 1e-6`.
pub fn check_kernel(name: &str, seed: u64) -> Result<f64, MathError> {
    let case = build(name, seed)?;
    let (_, grads) = forward(name, &case, &case.params, seed)?;
    let report = grad_check(
        &case.params,
        &grads,
        |p| forward(name, &case, p, seed).map_or(f64::NAN, |r| r.0),
        1e-6,
        None,
    )?;
    Ok(report.max_rel_err)
}
