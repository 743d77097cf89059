//! Truncated backpropagation through time.
//!
//! Deltas are row vectors `δ(t) = ∂E/∂a(t)`. With `T` the final step:
//!
//! ```text
//! δ(T)   = (output_delta · w_outᵀ) ⊙ f'(a(T))
//! δ(t-1) = (δ(t) · w_recᵀ) ⊙ f'(a(t-1))
//! ```
//!
//! `deltas[n]` holds `δ(T-n)` for `n = 0..=h`. Steps older than `T-h`
//! contribute nothing to the weight gradients.

use std::borrow::Borrow;

use crate::error::{Result, SrnError};
use crate::linalg::{norm2, row_vec_mat_into, scale_cols_by, Mat, Vector};
use crate::model::{forward, output_loss, ForwardTrace, LossResult, SrnParams};
use crate::tasks::{Sample, TaskSpec};

/// Gradient (or update) with the same block layout as [`SrnParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w_in: Mat,
    pub w_rec: Mat,
    pub w_out: Mat,
    pub b: Vector,
}

impl Grads {
    pub fn zeros_like(p: &SrnParams) -> Self {
        Self {
            w_in: Mat::zeros(p.n_in(), p.n_hid()),
            w_rec: Mat::zeros(p.n_hid(), p.n_hid()),
            w_out: Mat::zeros(p.n_hid(), p.n_out()),
            b: Vector::zeros(p.n_hid()),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Grads) {
        self.w_in.axpy(alpha, &other.w_in);
        self.w_rec.axpy(alpha, &other.w_rec);
        self.w_out.axpy(alpha, &other.w_out);
        self.b.axpy(alpha, &other.b);
    }

    pub fn scale(&self, s: f64) -> Grads {
        Grads {
            w_in: self.w_in.scale(s),
            w_rec: self.w_rec.scale(s),
            w_out: self.w_out.scale(s),
            b: self.b.scale(s),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_in.is_finite() && self.w_rec.is_finite() && self.w_out.is_finite() && self.b.is_finite()
    }

    /// Frobenius norms of `(w_in, w_rec, w_out, b)`.
    pub fn block_norms(&self) -> [f64; 4] {
        [self.w_in.norm(), self.w_rec.norm(), self.w_out.norm(), norm2(&self.b)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BpttConfig {
    /// Truncation depth.
    pub h: usize,
}

impl BpttConfig {
    pub fn new(h: usize, steps: usize) -> Result<Self> {
        if h == 0 || h > steps {
            return Err(SrnError::config(
                "h",
                format!("truncation depth must satisfy 1 <= h <= T = {steps}, got {h}"),
            ));
        }
        Ok(Self { h })
    }
}

#[derive(Clone, Debug)]
pub struct BpttResult {
    /// `deltas[n] = δ(T-n)`, `n = 0..=h`.
    pub deltas: Vec<Vector>,
    pub grads: Grads,
    /// `delta_norms[n] = ‖deltas[n]‖₂`
    pub delta_norms: Vec<f64>,
}

impl BpttResult {
    pub fn h(&self) -> usize {
        self.deltas.len() - 1
    }

    pub fn top(&self) -> &Vector {
        &self.deltas[0]
    }

    pub fn deepest(&self) -> &Vector {
        &self.deltas[self.h()]
    }
}

/// The factor that carries a delta one step back:
/// `δ(t-1) = δ(t) · jacobian(params, f'(a(t-1)))`, i.e. `w_recᵀ · diag(fprime)`.
pub fn jacobian(params: &SrnParams, fprime: &Vector) -> Mat {
    scale_cols_by(&params.w_rec.transpose(), fprime)
}

pub fn backward(params: &SrnParams, trace: &ForwardTrace, output_delta: &Vector, h: usize) -> Result<BpttResult> {
    let steps = trace.steps();
    if h > steps {
        return Err(SrnError::config(
            "h",
            format!("truncation depth {h} exceeds sequence length {steps}"),
        ));
    }
    if output_delta.len() != params.n_out() {
        return Err(SrnError::dim("output delta", params.n_out(), output_delta.len()));
    }

    let n_hid = params.n_hid();
    let mut grads = Grads::zeros_like(params);
    grads.w_out.add_outer(trace.z(steps), output_delta);

    let mut top = Vector::zeros(n_hid);
    row_vec_mat_into(output_delta, &params.w_out.transpose(), &mut top);
    let top = top.hadamard(trace.fprime(steps));

    let mut deltas = Vec::with_capacity(h + 1);
    deltas.push(top);
    let w_rec_t = params.w_rec.transpose();
    let mut scratch = Vector::zeros(n_hid);
    for n in 1..=h {
        let step = steps - n;
        row_vec_mat_into(&deltas[n - 1], &w_rec_t, &mut scratch);
        let next = scratch.hadamard(trace.fprime(step));
        if !next.is_finite() {
            return Err(SrnError::non_finite("delta", format!("depth {n}")));
        }
        deltas.push(next);
    }

    for (n, delta) in deltas.iter().enumerate() {
        let step = steps - n;
        if step == 0 {
            // The initial state is not produced by any weight.
            break;
        }
        grads.w_rec.add_outer(trace.z(step - 1), delta);
        grads.w_in.add_outer(trace.u(step), delta);
        grads.b.axpy(1.0, delta);
    }

    let delta_norms = deltas.iter().map(norm2).collect();
    Ok(BpttResult {
        deltas,
        grads,
        delta_norms,
    })
}

/// `(depth, ‖δ(T-depth)‖₂)` for every stored depth.
pub fn delta_norm_profile(result: &BpttResult) -> Vec<(usize, f64)> {
    result.delta_norms.iter().copied().enumerate().collect()
}

/// Frobenius norms of the per-step weight-gradient contributions at each
/// depth: `(‖outer(u, δ)‖, ‖outer(z_prev, δ)‖)`. Zero at step 0.
pub fn step_gradient_norms(trace: &ForwardTrace, result: &BpttResult) -> Vec<(f64, f64)> {
    let steps = trace.steps();
    result
        .delta_norms
        .iter()
        .enumerate()
        .map(|(n, &dn)| {
            let step = steps - n;
            if step == 0 {
                (0.0, 0.0)
            } else {
                (norm2(trace.u(step)) * dn, norm2(trace.z(step - 1)) * dn)
            }
        })
        .collect()
}

/// Forward pass, loss and truncated backward pass for one labelled sequence.
#[derive(Clone, Debug)]
pub struct SequencePass {
    pub trace: ForwardTrace,
    pub loss: LossResult,
    pub bptt: BpttResult,
}

pub fn run_sequence(params: &SrnParams, spec: &TaskSpec, sample: &Sample, h: usize) -> Result<SequencePass> {
    let trace = forward(params, &sample.inputs(), None)?;
    let loss = output_loss(&trace, &sample.target, spec.loss_kind(), spec.tolerance)?;
    let bptt = backward(params, &trace, &loss.output_delta, h)?;
    Ok(SequencePass { trace, loss, bptt })
}

/// Per-sequence passes over a minibatch plus batch-mean gradient and loss.
#[derive(Clone, Debug)]
pub struct BatchPass {
    pub passes: Vec<SequencePass>,
    pub grads: Grads,
    pub loss: f64,
}

impl BatchPass {
    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    pub fn h(&self) -> usize {
        self.passes[0].bptt.h()
    }

    /// Mean over the batch of `‖δ(T-n)‖` for every depth `n`.
    pub fn mean_delta_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.h() + 1];
        for p in &self.passes {
            for (a, v) in acc.iter_mut().zip(&p.bptt.delta_norms) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        acc.into_iter().map(|v| v / n).collect()
    }
}

pub fn run_batch<S: Borrow<Sample>>(params: &SrnParams, spec: &TaskSpec, batch: &[S], h: usize) -> Result<BatchPass> {
    if batch.is_empty() {
        return Err(SrnError::config("batch", "minibatch is empty"));
    }
    let mut grads = Grads::zeros_like(params);
    let mut loss = 0.0;
    let mut passes = Vec::with_capacity(batch.len());
    for s in batch {
        let pass = run_sequence(params, spec, s.borrow(), h)?;
        grads.axpy(1.0, &pass.bptt.grads);
        loss += pass.loss.loss;
        passes.push(pass);
    }
    let inv = 1.0 / batch.len() as f64;
    Ok(BatchPass {
        grads: grads.scale(inv),
        loss: loss * inv,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, outer, row_vec_mat};
    use crate::model::{loss_from_output_pre, OutputActivation, Target};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, n_in: usize, n_hid: usize, n_out: usize, act: OutputActivation) -> SrnParams {
        let mut p = SrnParams::init_gaussian(n_in, n_hid, n_out, act, 0.6, rng.random()).unwrap();
        p.b = (0..n_hid).map(|_| rng.random_range(-0.3..0.3)).collect();
        p
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, n_in: usize) -> Vec<Vector> {
        (0..t)
            .map(|_| (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_output_error_gives_zero_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_net(&mut rng, 2, 3, 2, OutputActivation::Linear);
        let tr = forward(&p, &random_seq(&mut rng, 5, 2), None).unwrap();
        let r = backward(&p, &tr, &Vector::zeros(2), 5).unwrap();
        assert!(r.deltas.iter().all(|d| d.iter().all(|&x| x == 0.0)));
        assert_eq!(r.grads, Grads::zeros_like(&p));
        assert!(delta_norm_profile(&r).iter().all(|&(_, n)| n == 0.0));
    }

    #[test]
    fn severed_recurrence_has_no_temporal_credit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_net(&mut rng, 2, 3, 2, OutputActivation::Linear);
        p.w_rec = Mat::zeros(3, 3);
        let tr = forward(&p, &random_seq(&mut rng, 5, 2), None).unwrap();
        let r = backward(&p, &tr, &Vector::from(vec![0.5, -1.0]), 4).unwrap();
        assert!(r.delta_norms[0] > 0.0);
        assert!(r.delta_norms[1..].iter().all(|&n| n == 0.0));
    }

    #[test]
    fn h_beyond_sequence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_net(&mut rng, 2, 3, 2, OutputActivation::Linear);
        let tr = forward(&p, &random_seq(&mut rng, 4, 2), None).unwrap();
        assert!(backward(&p, &tr, &Vector::zeros(2), 5).is_err());
        assert!(BpttConfig::new(0, 4).is_err());
        assert!(BpttConfig::new(5, 4).is_err());
        assert_eq!(BpttConfig::new(4, 4).unwrap().h, 4);
    }

    #[test]
    fn jacobian_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_net(&mut rng, 2, 4, 1, OutputActivation::Linear);
        assert_eq!(jacobian(&p, &Vector::from(vec![1.0; 4])), p.w_rec.transpose());
        assert_eq!(jacobian(&p, &Vector::zeros(4)), Mat::zeros(4, 4));
    }

    #[test]
    fn recursion_equals_jacobian_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_net(&mut rng, 3, 5, 2, OutputActivation::Softmax);
            let t = rng.random_range(2..9);
            let tr = forward(&p, &random_seq(&mut rng, t, 3), None).unwrap();
            let od = Vector::from(vec![0.3, -0.3]);
            let r = backward(&p, &tr, &od, t).unwrap();
            let mut d = r.deltas[0].clone();
            for n in 1..=t {
                d = row_vec_mat(&d, &jacobian(&p, tr.fprime(t - n)));
                let scale = norm2(&d).max(1e-300);
                assert!(norm2(&d.sub(&r.deltas[n])) <= 1e-13 * scale, "depth {n}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_output_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_net(&mut rng, 2, 4, 3, OutputActivation::Linear);
        let tr = forward(&p, &random_seq(&mut rng, 6, 2), None).unwrap();
        let od = Vector::from(vec![0.2, -0.5, 1.1]);
        let c = -3.7;
        let r1 = backward(&p, &tr, &od, 6).unwrap();
        let r2 = backward(&p, &tr, &od.scale(c), 6).unwrap();
        let close = |a: &[f64], b: &[f64]| {
            let s = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
            a.iter().zip(b).all(|(x, y)| (c * x - y).abs() <= 1e-12 * s * c.abs())
        };
        for (a, b) in r1.deltas.iter().zip(&r2.deltas) {
            assert!(close(a.as_slice(), b.as_slice()));
        }
        assert!(close(r1.grads.w_rec.as_slice(), r2.grads.w_rec.as_slice()));
        assert!(close(r1.grads.w_in.as_slice(), r2.grads.w_in.as_slice()));
        assert!(close(r1.grads.w_out.as_slice(), r2.grads.w_out.as_slice()));
        assert!(close(r1.grads.b.as_slice(), r2.grads.b.as_slice()));
    }

    #[test]
    fn delta_norms_match_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_net(&mut rng, 2, 4, 1, OutputActivation::Linear);
        let tr = forward(&p, &random_seq(&mut rng, 7, 2), None).unwrap();
        let r = backward(&p, &tr, &Vector::from(vec![0.9]), 5).unwrap();
        assert_eq!(r.delta_norms.len(), 6);
        for (d, &n) in r.deltas.iter().zip(&r.delta_norms) {
            assert_eq!(n, dot(d, d).sqrt());
        }
    }

    #[test]
    fn orthogonal_recurrence_preserves_norm() {
        // A rotation scaled into the near-linear tanh regime.
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = SrnParams::zeros(1, n, 1, OutputActivation::Linear);
        let mut q = Mat::identity(n);
        for _ in 0..20 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i == j {
                continue;
            }
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let g = Mat::from_fn(n, n, |r, c| match (r, c) {
                _ if (r, c) == (i, i) || (r, c) == (j, j) => th.cos(),
                _ if (r, c) == (i, j) => -th.sin(),
                _ if (r, c) == (j, i) => th.sin(),
                _ if r == c => 1.0,
                _ => 0.0,
            });
            q = crate::linalg::matmul(&q, &g);
        }
        p.w_rec = q;
        p.w_in = Mat::from_fn(1, n, |_, _| 1e-3);
        p.w_out = Mat::from_fn(n, 1, |_, _| 1.0);
        let tr = forward(&p, &vec![Vector::from(vec![1.0]); 30], None).unwrap();
        let r = backward(&p, &tr, &Vector::from(vec![1.0]), 30).unwrap();
        let prof = delta_norm_profile(&r);
        let first = prof[0].1;
        assert!(prof.iter().all(|&(_, v)| (v / first - 1.0).abs() < 0.1));
    }

    /// Central finite differences of the loss against every weight.
    fn fd_check(p: &SrnParams, seq: &[Vector], target: &Target, h_tol: f64) {
        let kind = p.output.loss_kind();
        let loss = |q: &SrnParams| {
            let tr = forward(q, seq, None).unwrap();
            loss_from_output_pre(q.output, &tr.output_pre, target, kind, 0.04).unwrap().loss
        };
        let tr = forward(p, seq, None).unwrap();
        let lr = loss_from_output_pre(p.output, &tr.output_pre, target, kind, 0.04).unwrap();
        let r = backward(p, &tr, &lr.output_delta, seq.len()).unwrap();
        let eps = 1e-6;
        let check = |name: &str, analytic: &[f64], get: &dyn Fn(&mut SrnParams) -> &mut [f64]| {
            for (i, &an) in analytic.iter().enumerate() {
                let mut q = p.clone();
                get(&mut q)[i] += eps;
                let lp = loss(&q);
                get(&mut q)[i] -= 2.0 * eps;
                let lm = loss(&q);
                let fd = (lp - lm) / (2.0 * eps);
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(err < h_tol, "{name}[{i}]: analytic {an} fd {fd} rel {err}");
            }
        };
        check("w_in", r.grads.w_in.as_slice(), &|q| q.w_in.as_mut_slice());
        check("w_rec", r.grads.w_rec.as_slice(), &|q| q.w_rec.as_mut_slice());
        check("w_out", r.grads.w_out.as_slice(), &|q| q.w_out.as_mut_slice());
        check("b", r.grads.b.as_slice(), &|q| q.b.as_mut_slice());
    }

    #[test]
    fn tiny_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_net(&mut rng, 2, 3, 2, OutputActivation::Linear);
        let seq = random_seq(&mut rng, 5, 2);
        fd_check(&p, &seq, &Target::Regression(Vector::from(vec![0.3, -0.4])), 1e-6);
        let p = random_net(&mut rng, 2, 3, 2, OutputActivation::Softmax);
        fd_check(&p, &seq, &Target::Class(1), 1e-6);
    }

    #[test]
    fn truncation_drops_old_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_net(&mut rng, 2, 3, 1, OutputActivation::Linear);
        let seq = random_seq(&mut rng, 6, 2);
        let tr = forward(&p, &seq, None).unwrap();
        let od = Vector::from(vec![1.0]);
        let r = backward(&p, &tr, &od, 2).unwrap();
        let mut manual = Mat::zeros(2, 3);
        for step in (4..=6).rev() {
            manual.add_outer(tr.u(step), &r.deltas[6 - step]);
        }
        assert_eq!(r.grads.w_in, manual);
        // Full depth and h = T - 1 give the same gradient.
        let full = backward(&p, &tr, &od, 6).unwrap();
        let almost = backward(&p, &tr, &od, 5).unwrap();
        assert_eq!(full.grads, almost.grads);
        assert_eq!(outer(tr.z(6), &od), r.grads.w_out);
    }
}
