//! Simple recurrent network with a tanh hidden layer.
//!
//! ```text
//! a(k)   = u(k)·w_in + z(k-1)·w_rec + b
//! z(k)   = tanh(a(k))
//! y      = g(z(T)·w_out)          g ∈ {linear, softmax}
//! ```
//!
//! The readout is sequence-to-one: the output is produced from the final state
//! only. The initial state defaults to zero for every sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrnError};
use crate::linalg::{row_vec_mat_into, Mat, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl OutputActivation {
    pub fn loss_kind(self) -> LossKind {
        match self {
            OutputActivation::Linear => LossKind::Mse,
            OutputActivation::Softmax => LossKind::CrossEntropy,
        }
    }
}

/// Where a parameter set came from, recorded in model files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitInfo {
    pub seed: u64,
    pub sigma: f64,
}

/// Trainable weights of the network. The hidden activation is always tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct SrnParams {
    /// `n_in x n_hid`
    pub w_in: Mat,
    /// `n_hid x n_hid`
    pub w_rec: Mat,
    /// `n_hid x n_out`
    pub w_out: Mat,
    pub b: Vector,
    pub output: OutputActivation,
    pub init: Option<InitInfo>,
}

impl SrnParams {
    /// All-zero network.
    pub fn zeros(n_in: usize, n_hid: usize, n_out: usize, output: OutputActivation) -> Self {
        Self {
            w_in: Mat::zeros(n_in, n_hid),
            w_rec: Mat::zeros(n_hid, n_hid),
            w_out: Mat::zeros(n_hid, n_out),
            b: Vector::zeros(n_hid),
            output,
            init: None,
        }
    }

    /// Weights drawn i.i.d. from `N(0, sigma²)` with a ChaCha8 stream seeded
    /// by `seed`, in the order `w_in`, `w_rec`, `w_out` (row-major). Biases
    /// start at zero.
    pub fn init_gaussian(
        n_in: usize,
        n_hid: usize,
        n_out: usize,
        output: OutputActivation,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        for (name, v) in [("n_in", n_in), ("n_hid", n_hid), ("n_out", n_out)] {
            if v == 0 {
                return Err(SrnError::config(name, "must be at least 1"));
            }
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(SrnError::config("sigma", format!("must be positive, got {sigma}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            Mat::from_fn(r, c, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                sigma * x
            })
        };
        let w_in = draw(n_in, n_hid);
        let w_rec = draw(n_hid, n_hid);
        let w_out = draw(n_hid, n_out);
        Ok(Self {
            w_in,
            w_rec,
            w_out,
            b: Vector::zeros(n_hid),
            output,
            init: Some(InitInfo { seed, sigma }),
        })
    }

    pub fn n_in(&self) -> usize {
        self.w_in.rows()
    }

    pub fn n_hid(&self) -> usize {
        self.w_rec.rows()
    }

    pub fn n_out(&self) -> usize {
        self.w_out.cols()
    }

    /// Checks that all blocks agree on the layer sizes.
    pub fn validate(&self) -> Result<()> {
        let n_hid = self.n_hid();
        if n_hid == 0 {
            return Err(SrnError::config("n_hid", "must be at least 1"));
        }
        if self.w_rec.cols() != n_hid {
            return Err(SrnError::dim("w_rec", format!("{n_hid}x{n_hid}"), shape(&self.w_rec)));
        }
        if self.w_in.cols() != n_hid {
            return Err(SrnError::dim("w_in columns", n_hid, self.w_in.cols()));
        }
        if self.w_out.rows() != n_hid {
            return Err(SrnError::dim("w_out rows", n_hid, self.w_out.rows()));
        }
        if self.b.len() != n_hid {
            return Err(SrnError::dim("b", n_hid, self.b.len()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_in.is_finite() && self.w_rec.is_finite() && self.w_out.is_finite() && self.b.is_finite()
    }
}

fn shape(m: &Mat) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

/// Everything recorded during a forward pass over one sequence.
///
/// Time steps are 1-based: `a(t)` exists for `t = 1..=T`, while `z` and
/// `fprime` also have a `t = 0` entry for the initial state. `fprime(0)` is
/// `1 - z(0)²`, treating the initial state as the tanh of some earlier
/// activation, which lets the delta recursion run all the way to depth `T`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Vector>,
    a: Vec<Vector>,
    z: Vec<Vector>,
    fprime: Vec<Vector>,
    /// Presynaptic output `z(T)·w_out`.
    pub output_pre: Vector,
    pub y: Vector,
    pub output: OutputActivation,
}

impl ForwardTrace {
    /// Sequence length `T`.
    pub fn steps(&self) -> usize {
        self.a.len()
    }

    /// Input at step `t` in `1..=T`.
    pub fn u(&self, t: usize) -> &Vector {
        &self.inputs[t - 1]
    }

    /// Presynaptic activation at step `t` in `1..=T`.
    pub fn a(&self, t: usize) -> &Vector {
        &self.a[t - 1]
    }

    /// State at step `t` in `0..=T`.
    pub fn z(&self, t: usize) -> &Vector {
        &self.z[t]
    }

    /// `f'(a(t)) = 1 - z(t)²` for `t` in `0..=T`.
    pub fn fprime(&self, t: usize) -> &Vector {
        &self.fprime[t]
    }

    /// All presynaptic activations, step by step.
    pub fn activations(&self) -> &[Vector] {
        &self.a
    }
}

/// Runs the network over `seq`. `z0` defaults to the zero state.
pub fn forward(params: &SrnParams, seq: &[Vector], z0: Option<&Vector>) -> Result<ForwardTrace> {
    let n_hid = params.n_hid();
    let z0 = match z0 {
        Some(z) if z.len() != n_hid => return Err(SrnError::dim("initial state", n_hid, z.len())),
        Some(z) => z.clone(),
        None => Vector::zeros(n_hid),
    };
    let t_len = seq.len();
    let mut a = Vec::with_capacity(t_len);
    let mut z = Vec::with_capacity(t_len + 1);
    let mut fprime = Vec::with_capacity(t_len + 1);
    fprime.push(z0.map(|s| 1.0 - s * s));
    z.push(z0);

    let mut rec = Vector::zeros(n_hid);
    for (step, u) in seq.iter().enumerate() {
        if u.len() != params.n_in() {
            return Err(SrnError::dim(
                &format!("input at step {}", step + 1),
                params.n_in(),
                u.len(),
            ));
        }
        let mut act = Vector::zeros(n_hid);
        row_vec_mat_into(u, &params.w_in, &mut act);
        row_vec_mat_into(&z[step], &params.w_rec, &mut rec);
        for ((x, r), bias) in act.as_mut_slice().iter_mut().zip(rec.iter()).zip(params.b.iter()) {
            *x += r + bias;
        }
        if !act.is_finite() {
            return Err(SrnError::non_finite("presynaptic activation", format!("step {}", step + 1)));
        }
        let state = act.map(f64::tanh);
        fprime.push(state.map(|s| 1.0 - s * s));
        z.push(state);
        a.push(act);
    }

    let mut output_pre = Vector::zeros(params.n_out());
    row_vec_mat_into(&z[t_len], &params.w_out, &mut output_pre);
    if !output_pre.is_finite() {
        return Err(SrnError::non_finite("output", format!("step {t_len}")));
    }
    let y = apply_output(params.output, &output_pre);
    Ok(ForwardTrace {
        inputs: seq.to_vec(),
        a,
        z,
        fprime,
        output_pre,
        y,
        output: params.output,
    })
}

pub fn apply_output(act: OutputActivation, pre: &Vector) -> Vector {
    match act {
        OutputActivation::Linear => pre.clone(),
        OutputActivation::Softmax => softmax(pre),
    }
}

pub fn softmax(x: &Vector) -> Vector {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.map(|v| (v - max).exp());
    let sum: f64 = e.iter().sum();
    e.scale(1.0 / sum)
}

fn log_sum_exp(x: &Vector) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Regression(Vector),
    Class(usize),
}

#[derive(Clone, Debug)]
pub struct LossResult {
    pub loss: f64,
    /// Derivative of the loss with respect to the presynaptic output.
    pub output_delta: Vector,
    pub correct: bool,
}

/// Loss of the trace's output against `target`.
///
/// `Mse`: `E = ½‖y − t‖²`, correct iff every `|y_i − t_i| < tolerance`.
/// `CrossEntropy`: `E = −ln y[c]`, correct iff `argmax y = c`.
pub fn output_loss(trace: &ForwardTrace, target: &Target, kind: LossKind, tolerance: f64) -> Result<LossResult> {
    loss_from_output_pre(trace.output, &trace.output_pre, target, kind, tolerance)
}

/// Same as [`output_loss`] but starting from a presynaptic output vector.
pub fn loss_from_output_pre(
    act: OutputActivation,
    pre: &Vector,
    target: &Target,
    kind: LossKind,
    tolerance: f64,
) -> Result<LossResult> {
    if act.loss_kind() != kind {
        return Err(SrnError::config(
            "loss",
            format!("{kind:?} loss cannot be paired with a {act:?} output"),
        ));
    }
    match (kind, target) {
        (LossKind::Mse, Target::Regression(t)) => {
            if t.len() != pre.len() {
                return Err(SrnError::dim("regression target", pre.len(), t.len()));
            }
            let diff = pre.sub(t);
            let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            let correct = diff.iter().all(|d| d.abs() < tolerance);
            Ok(LossResult {
                loss,
                output_delta: diff,
                correct,
            })
        }
        (LossKind::CrossEntropy, &Target::Class(c)) => {
            if c >= pre.len() {
                return Err(SrnError::dim("class index bound", pre.len(), c));
            }
            let y = softmax(pre);
            let loss = log_sum_exp(pre) - pre[c];
            let mut delta = y.clone();
            delta[c] -= 1.0;
            Ok(LossResult {
                loss,
                output_delta: delta,
                correct: y.argmax() == c,
            })
        }
        (kind, _) => Err(SrnError::config(
            "target",
            format!("target type does not match {kind:?} loss"),
        )),
    }
}

const MODEL_FORMAT: &str = "srn-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    n_in: usize,
    n_hid: usize,
    n_out: usize,
    hidden_activation: String,
    output_activation: OutputActivation,
    seed: Option<u64>,
    sigma: Option<f64>,
    w_in: Vec<f64>,
    w_rec: Vec<f64>,
    w_out: Vec<f64>,
    b: Vec<f64>,
}

/// Encodes the parameters as a JSON model document (see FORMATS.md).
pub fn serialize(params: &SrnParams) -> Vec<u8> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        n_in: params.n_in(),
        n_hid: params.n_hid(),
        n_out: params.n_out(),
        hidden_activation: "tanh".into(),
        output_activation: params.output,
        seed: params.init.map(|i| i.seed),
        sigma: params.init.map(|i| i.sigma),
        w_in: params.w_in.as_slice().to_vec(),
        w_rec: params.w_rec.as_slice().to_vec(),
        w_out: params.w_out.as_slice().to_vec(),
        b: params.b.as_slice().to_vec(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("model serialization cannot fail");
    out.push(b'\n');
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<SrnParams> {
    let f: ModelFile = serde_json::from_slice(bytes)
        .map_err(|e| SrnError::Parse(format!("model file: {e}")))?;
    if f.format != MODEL_FORMAT {
        return Err(SrnError::Parse(format!("model file: unknown format `{}`", f.format)));
    }
    if f.version != MODEL_VERSION {
        return Err(SrnError::Parse(format!("model file: unsupported version {}", f.version)));
    }
    if f.hidden_activation != "tanh" {
        return Err(SrnError::Parse(format!(
            "model file: hidden activation must be tanh, got `{}`",
            f.hidden_activation
        )));
    }
    let block = |name: &str, data: Vec<f64>, r: usize, c: usize| -> Result<Mat> {
        if data.len() != r * c {
            return Err(SrnError::Parse(format!(
                "model file: `{name}` has {} values, expected {r}x{c}",
                data.len()
            )));
        }
        Ok(Mat::from_vec(r, c, data))
    };
    let w_in = block("w_in", f.w_in, f.n_in, f.n_hid)?;
    let w_rec = block("w_rec", f.w_rec, f.n_hid, f.n_hid)?;
    let w_out = block("w_out", f.w_out, f.n_hid, f.n_out)?;
    if f.b.len() != f.n_hid {
        return Err(SrnError::Parse(format!(
            "model file: `b` has {} values, expected {}",
            f.b.len(),
            f.n_hid
        )));
    }
    let init = match (f.seed, f.sigma) {
        (Some(seed), Some(sigma)) => Some(InitInfo { seed, sigma }),
        _ => None,
    };
    let params = SrnParams {
        w_in,
        w_rec,
        w_out,
        b: Vector::from(f.b),
        output: f.output_activation,
        init,
    };
    params.validate()?;
    Ok(params)
}
