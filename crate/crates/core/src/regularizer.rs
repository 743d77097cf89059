//! Minibatch gating on the depth decay of backpropagated deltas.
//!
//! For a candidate correction `dW` of the recurrent weights, the deepest
//! delta of a sequence is
//!
//! ```text
//! g  = D(T-h) W D(T-h+1) W … D(T-1) W δ(T)            (column form, D(t) = diag f'(a(t)))
//! dg = Σᵢ  same product with the i-th W replaced by dW
//! S  = ½‖g‖²,   dS = (g, dg)
//! ```
//!
//! `dS` is the first-order change of `S` along `dW` with the activation
//! derivatives and the top delta held fixed. Its sign predicts whether the
//! update grows or shrinks the backpropagated gradient norm. The Q-factor
//! `log₁₀(‖δ(T)‖ / ‖δ(T-h)‖)` says how far the norm already is from being
//! preserved. [`gate`] combines the two to accept or skip a minibatch.
//!
//! Over a minibatch, `g` and `dg` are the means of the per-sequence vectors
//! and Q uses the norms of the batch-mean top and deep deltas.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bptt::{run_batch, BatchPass};
use crate::error::{Result, SrnError};
use crate::linalg::{dot, mat_vec, norm2, Mat, Vector};
use crate::model::{ForwardTrace, SrnParams};
use crate::tasks::{Sample, TaskSpec};

/// How the `|dS|` rejection threshold `r0` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum DsThreshold {
    /// `r0 = factor · S` for the current batch.
    Relative(f64),
    Absolute(f64),
}

impl DsThreshold {
    pub fn resolve(self, s: f64) -> f64 {
        match self {
            DsThreshold::Relative(f) => f * s,
            DsThreshold::Absolute(r) => r,
        }
    }

    fn value(self) -> f64 {
        match self {
            DsThreshold::Relative(v) | DsThreshold::Absolute(v) => v,
        }
    }
}

/// Which way the out-of-range branches of the gate point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    /// Outside the safe range, accept when
    /// `(q < q_min and dS > 0) or (q > q_max and dS < 0)`.
    Literal,
    /// Outside the safe range, accept only updates that move the deep norm
    /// back toward the range: `(q > q_max and dS > 0) or (q < q_min and dS < 0)`.
    /// `q > q_max` means the deep delta is small (vanishing).
    Restoring,
}

impl FromStr for GateRule {
    type Err = SrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(GateRule::Literal),
            "restoring" => Ok(GateRule::Restoring),
            _ => Err(SrnError::config("gate_rule", format!("expected literal or restoring, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub q_min: f64,
    pub q_max: f64,
    pub r0: DsThreshold,
    pub rule: GateRule,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            q_min: -1.0,
            q_max: 1.0,
            r0: DsThreshold::Relative(0.5),
            rule: GateRule::Literal,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_min.is_nan() || self.q_max.is_nan() || self.q_min >= self.q_max {
            return Err(SrnError::config(
                "qmin",
                format!("q_min ({}) must be below q_max ({})", self.q_min, self.q_max),
            ));
        }
        if self.r0.value().is_nan() || self.r0.value() <= 0.0 {
            return Err(SrnError::config("r0", "must be positive"));
        }
        Ok(())
    }

    /// Gate decision for a batch with the given `dS`, `q` and `S`.
    pub fn decide(&self, ds: f64, q: f64, s: f64) -> Decision {
        gate(ds, q, self.q_min, self.q_max, self.r0.resolve(s), self.rule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    RejectLargeDs,
    RejectQDirection,
}

impl Decision {
    pub fn is_accept(self) -> bool {
        self == Decision::Accept
    }

    pub fn name(self) -> &'static str {
        match self {
            Decision::Accept => "accept",
            Decision::RejectLargeDs => "reject_large_ds",
            Decision::RejectQDirection => "reject_q_direction",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deep delta `g = δ(T-h)` built as a product of `D·W` factors applied to
/// `delta_top = δ(T)`.
pub fn compute_g(params: &SrnParams, trace: &ForwardTrace, delta_top: &Vector, h: usize) -> Result<Vector> {
    check_chain(params, trace, delta_top, None, h)?;
    let steps = trace.steps();
    let mut x = delta_top.clone();
    for n in 1..=h {
        x = mat_vec(&params.w_rec, &x).hadamard(trace.fprime(steps - n));
    }
    Ok(x)
}

/// Directional differential of [`compute_g`] along `dw_rec`.
pub fn compute_dg(params: &SrnParams, trace: &ForwardTrace, delta_top: &Vector, dw_rec: &Mat, h: usize) -> Result<Vector> {
    Ok(compute_g_dg(params, trace, delta_top, dw_rec, h)?.1)
}

/// `(g, dg)` in one pass.
///
/// Runs the product for `g` alongside its tangent: after each factor,
/// `dx ← D (W dx + dW x)`, which expands to the sum over every position of
/// the substituted factor.
pub fn compute_g_dg(
    params: &SrnParams,
    trace: &ForwardTrace,
    delta_top: &Vector,
    dw_rec: &Mat,
    h: usize,
) -> Result<(Vector, Vector)> {
    check_chain(params, trace, delta_top, Some(dw_rec), h)?;
    let steps = trace.steps();
    let mut x = delta_top.clone();
    let mut dx = Vector::zeros(x.len());
    for n in 1..=h {
        let d = trace.fprime(steps - n);
        let mut next_dx = mat_vec(&params.w_rec, &dx);
        next_dx.axpy(1.0, &mat_vec(dw_rec, &x));
        dx = next_dx.hadamard(d);
        x = mat_vec(&params.w_rec, &x).hadamard(d);
    }
    Ok((x, dx))
}

fn check_chain(params: &SrnParams, trace: &ForwardTrace, delta_top: &Vector, dw: Option<&Mat>, h: usize) -> Result<()> {
    let n_hid = params.n_hid();
    if delta_top.len() != n_hid {
        return Err(SrnError::dim("top delta", n_hid, delta_top.len()));
    }
    if let Some(dw) = dw {
        if dw.shape() != params.w_rec.shape() {
            return Err(SrnError::dim(
                "dw_rec",
                format!("{n_hid}x{n_hid}"),
                format!("{}x{}", dw.rows(), dw.cols()),
            ));
        }
    }
    if h > trace.steps() {
        return Err(SrnError::config(
            "h",
            format!("depth {h} exceeds sequence length {}", trace.steps()),
        ));
    }
    Ok(())
}

/// `log₁₀(norm_top / norm_deep)`. A zero deep norm maps to `+∞` and a zero
/// top norm (with a positive deep norm) to `−∞`, so the result is never NaN.
pub fn q_factor(norm_top: f64, norm_deep: f64) -> f64 {
    if norm_deep.is_nan() || norm_deep <= 0.0 {
        f64::INFINITY
    } else if norm_top.is_nan() || norm_top <= 0.0 {
        f64::NEG_INFINITY
    } else {
        (norm_top / norm_deep).log10()
    }
}

/// Minibatch gate. Exactly one decision for every input.
///
/// 1. `|dS| > r0` (or `dS` not finite): [`Decision::RejectLargeDs`].
/// 2. `q` in `[q_min, q_max]`: accept.
/// 3. Otherwise accept if the direction test of `rule` passes, else
///    [`Decision::RejectQDirection`].
pub fn gate(ds: f64, q: f64, q_min: f64, q_max: f64, r0: f64, rule: GateRule) -> Decision {
    if ds.is_nan() || r0.is_nan() || ds.abs() > r0 {
        return Decision::RejectLargeDs;
    }
    if q >= q_min && q <= q_max {
        return Decision::Accept;
    }
    let ok = match rule {
        GateRule::Literal => (q < q_min && ds > 0.0) || (q > q_max && ds < 0.0),
        GateRule::Restoring => (q > q_max && ds > 0.0) || (q < q_min && ds < 0.0),
    };
    if ok {
        Decision::Accept
    } else {
        Decision::RejectQDirection
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegReport {
    pub g: Vector,
    pub dg: Vector,
    pub ds: f64,
    /// `½‖g‖²`
    pub s: f64,
    pub q: f64,
    /// Norm of the batch-mean top delta `δ(T)`.
    pub top_norm: f64,
    /// Norm of the batch-mean deep delta `δ(T-h)` (equals `‖g‖`).
    pub deep_norm: f64,
    /// The `|dS|` threshold used for this batch.
    pub r0: f64,
    pub decision: Decision,
}

/// Builds the report for an already computed batch pass.
pub fn report_from_pass(params: &SrnParams, pass: &BatchPass, cfg: &RegConfig, dw_rec: &Mat) -> Result<RegReport> {
    let h = pass.h();
    let n_hid = params.n_hid();
    let inv = 1.0 / pass.len() as f64;
    let mut g = Vector::zeros(n_hid);
    let mut dg = Vector::zeros(n_hid);
    let mut top = Vector::zeros(n_hid);
    for p in &pass.passes {
        let (gi, dgi) = compute_g_dg(params, &p.trace, p.bptt.top(), dw_rec, h)?;
        g.axpy(inv, &gi);
        dg.axpy(inv, &dgi);
        top.axpy(inv, p.bptt.top());
    }
    let top_norm = norm2(&top);
    let deep_norm = norm2(&g);
    let s = 0.5 * dot(&g, &g);
    let ds = dot(&g, &dg);
    let q = q_factor(top_norm, deep_norm);
    let r0 = cfg.r0.resolve(s);
    let decision = gate(ds, q, cfg.q_min, cfg.q_max, r0, cfg.rule);
    Ok(RegReport {
        g,
        dg,
        ds,
        s,
        q,
        top_norm,
        deep_norm,
        r0,
        decision,
    })
}

/// Runs the batch through the network and reports `dS`, `Q` and the gate
/// decision for `candidate_dw_rec`. Parameters are not modified.
pub fn evaluate_minibatch<S: Borrow<Sample>>(
    params: &SrnParams,
    spec: &TaskSpec,
    batch: &[S],
    h: usize,
    cfg: &RegConfig,
    candidate_dw_rec: &Mat,
) -> Result<RegReport> {
    let pass = run_batch(params, spec, batch, h)?;
    report_from_pass(params, &pass, cfg, candidate_dw_rec)
}
