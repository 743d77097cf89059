//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srn_gradreg::bptt::{run_batch, Grads};
use srn_gradreg::linalg::{Mat, Vector};
use srn_gradreg::model::{ForwardTrace, OutputActivation, SrnParams, Target};
use srn_gradreg::tasks::{Sample, TaskSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_net(rng: &mut ChaCha8Rng, n_in: usize, n_hid: usize, n_out: usize, act: OutputActivation, sigma: f64) -> SrnParams {
    let mut p = SrnParams::init_gaussian(n_in, n_hid, n_out, act, sigma, rng.random()).unwrap();
    p.b = (0..n_hid).map(|_| rng.random_range(-0.3..0.3)).collect();
    p
}

pub fn random_seq(rng: &mut ChaCha8Rng, t: usize, n_in: usize) -> Vec<Vector> {
    (0..t)
        .map(|_| (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Scalar-loop forward pass and loss, written without the library's
/// vector helpers.
pub fn naive_loss(p: &SrnParams, seq: &[Vector], target: &Target) -> f64 {
    let (n_in, n_hid, n_out) = (p.n_in(), p.n_hid(), p.n_out());
    let mut z = vec![0.0; n_hid];
    for u in seq {
        let mut next = vec![0.0; n_hid];
        for (j, nj) in next.iter_mut().enumerate() {
            let mut a = p.b[j];
            for i in 0..n_in {
                a += u[i] * p.w_in[(i, j)];
            }
            for (i, zi) in z.iter().enumerate() {
                a += zi * p.w_rec[(i, j)];
            }
            *nj = a.tanh();
        }
        z = next;
    }
    let pre: Vec<f64> = (0..n_out)
        .map(|k| (0..n_hid).map(|j| z[j] * p.w_out[(j, k)]).sum())
        .collect();
    match target {
        Target::Regression(t) => 0.5 * pre.iter().zip(t.iter()).map(|(y, t)| (y - t).powi(2)).sum::<f64>(),
        Target::Class(c) => {
            let m = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + pre.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - pre[*c]
        }
    }
}

/// Central-difference gradient of [`naive_loss`] for every parameter.
pub fn fd_grads(p: &SrnParams, seq: &[Vector], target: &Target, eps: f64) -> Grads {
    let mut g = Grads::zeros_like(p);
    let diff = |q: &mut SrnParams, sel: &dyn Fn(&mut SrnParams) -> &mut f64| {
        let orig = *sel(q);
        *sel(q) = orig + eps;
        let lp = naive_loss(q, seq, target);
        *sel(q) = orig - eps;
        let lm = naive_loss(q, seq, target);
        *sel(q) = orig;
        (lp - lm) / (2.0 * eps)
    };
    let mut q = p.clone();
    for i in 0..p.w_in.as_slice().len() {
        g.w_in.as_mut_slice()[i] = diff(&mut q, &|q| &mut q.w_in.as_mut_slice()[i]);
    }
    for i in 0..p.w_rec.as_slice().len() {
        g.w_rec.as_mut_slice()[i] = diff(&mut q, &|q| &mut q.w_rec.as_mut_slice()[i]);
    }
    for i in 0..p.w_out.as_slice().len() {
        g.w_out.as_mut_slice()[i] = diff(&mut q, &|q| &mut q.w_out.as_mut_slice()[i]);
    }
    for i in 0..p.b.len() {
        g.b.as_mut_slice()[i] = diff(&mut q, &|q| &mut q.b.as_mut_slice()[i]);
    }
    g
}

pub fn flatten(g: &Grads) -> Vec<f64> {
    [g.w_in.as_slice(), g.w_rec.as_slice(), g.w_out.as_slice(), g.b.as_slice()].concat()
}

/// Largest entrywise relative error; entries where both values are below
/// `floor` in magnitude are compared against `floor`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn mat_times_col(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Column-form factor `diag(d) · w` as nested rows.
fn factor(w: &Mat, d: &Vector) -> Vec<Vec<f64>> {
    (0..w.rows()).map(|i| (0..w.cols()).map(|j| d[i] * w[(i, j)]).collect()).collect()
}

/// Deep delta with the activation derivatives of `trace` frozen, for an
/// arbitrary recurrent matrix `w`.
pub fn frozen_deep_delta(w: &Mat, trace: &ForwardTrace, top: &Vector, h: usize) -> Vec<f64> {
    let t = trace.steps();
    let mut x = top.as_slice().to_vec();
    for n in 1..=h {
        x = mat_times_col(&factor(w, trace.fprime(t - n)), &x);
    }
    x
}

pub fn frozen_s(w: &Mat, trace: &ForwardTrace, top: &Vector, h: usize) -> f64 {
    0.5 * frozen_deep_delta(w, trace, top, h).iter().map(|v| v * v).sum::<f64>()
}

/// `dg` as the explicit sum over the `h` positions at which one `W` factor
/// is replaced by `dW`. Quadratic in `h`.
pub fn naive_dg(w: &Mat, dw: &Mat, trace: &ForwardTrace, top: &Vector, h: usize) -> Vec<f64> {
    let t = trace.steps();
    let mut total = vec![0.0; w.rows()];
    for replaced in 1..=h {
        let mut x = top.as_slice().to_vec();
        for n in 1..=h {
            let m = if n == replaced { dw } else { w };
            x = mat_times_col(&factor(m, trace.fprime(t - n)), &x);
        }
        for (acc, v) in total.iter_mut().zip(&x) {
            *acc += v;
        }
    }
    total
}

/// `½‖mean δ(T-h)‖²` over a batch with a full forward and backward pass.
pub fn batch_deep_s<S: std::borrow::Borrow<Sample>>(p: &SrnParams, spec: &TaskSpec, batch: &[S], h: usize) -> f64 {
    let pass = run_batch(p, spec, batch, h).unwrap();
    let mut mean = vec![0.0; p.n_hid()];
    for sp in &pass.passes {
        for (m, v) in mean.iter_mut().zip(sp.bptt.deepest().iter()) {
            *m += v / pass.len() as f64;
        }
    }
    0.5 * mean.iter().map(|v| v * v).sum::<f64>()
}
