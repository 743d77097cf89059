//! Seeded generators for the synthetic long-term-dependency benchmarks.
//!
//! | task | inputs | target | output |
//! |------|--------|--------|--------|
//! | adding | value channel in `[0,1)`, marker channel | `(v₁+v₂)/2` | linear, MSE |
//! | multiplication | same | `v₁·v₂` | linear, MSE |
//! | temporal order | one-hot over `{a,b,c,d,X,Y}` | order of the 2 specials (4 classes) | softmax |
//! | temporal order 3-bit | same | order of the 3 specials (8 classes) | softmax |
//!
//! Marker and special-symbol positions are 1-based time steps. Adding and
//! multiplication place the first marker in `[1, ⌊T/10⌋]` and the second in
//! `(⌊T/10⌋, ⌊T/2⌋]`. Temporal order places one special symbol in each of
//! the windows `[0.1T, 0.2T]`, `[0.5T, 0.6T]` (3-bit: `[0.1T, 0.2T]`,
//! `[0.3T, 0.4T]`, `[0.6T, 0.7T]`), lower bounds rounded up and upper bounds
//! rounded down. Classes enumerate the special tuple lexicographically with
//! `X < Y`, so `(X, X)` is class 0 and `(Y, Y, Y)` is class 7.
//!
//! Every sequence is drawn from its own ChaCha8 stream seeded by
//! [`derive_seed`]`(split_seed, index)`, so any sequence can be regenerated
//! on its own.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrnError};
use crate::linalg::Vector;
use crate::model::{LossKind, OutputActivation, Target};

pub const DISTRACTORS: u8 = 4;
pub const SYMBOL_X: u8 = 4;
pub const SYMBOL_Y: u8 = 5;
pub const ALPHABET: usize = 6;

/// Success threshold on `|y − t|` for the regression tasks.
pub const DEFAULT_TOLERANCE: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Adding,
    Multiplication,
    TemporalOrder,
    TemporalOrder3,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Adding,
        TaskKind::Multiplication,
        TaskKind::TemporalOrder,
        TaskKind::TemporalOrder3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Adding => "adding",
            TaskKind::Multiplication => "multiplication",
            TaskKind::TemporalOrder => "temporal_order",
            TaskKind::TemporalOrder3 => "temporal_order3",
        }
    }

    pub fn special_count(self) -> usize {
        match self {
            TaskKind::TemporalOrder3 => 3,
            _ => 2,
        }
    }

    pub fn is_symbolic(self) -> bool {
        matches!(self, TaskKind::TemporalOrder | TaskKind::TemporalOrder3)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "adding" => Ok(TaskKind::Adding),
            "multiplication" | "mult" => Ok(TaskKind::Multiplication),
            "temporal_order" | "temporal" => Ok(TaskKind::TemporalOrder),
            "temporal_order3" | "temporal_order_3bit" | "temporal3" => Ok(TaskKind::TemporalOrder3),
            _ => Err(SrnError::config(
                "task",
                format!("unknown task `{s}` (expected adding, multiplication, temporal_order, temporal_order3)"),
            )),
        }
    }
}

/// A benchmark instance: task, sequence length and success tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub tolerance: f64,
}

/// Inclusive range of 1-based time steps.
pub type Window = (usize, usize);

impl TaskSpec {
    /// Validates the window constraints for `kind` at length `t_len`.
    pub fn new(kind: TaskKind, t_len: usize) -> Result<Self> {
        let spec = Self {
            kind,
            t_len,
            tolerance: DEFAULT_TOLERANCE,
        };
        spec.windows()?;
        Ok(spec)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Result<Self> {
        if tolerance.is_nan() || tolerance <= 0.0 {
            return Err(SrnError::config("tolerance", "must be positive"));
        }
        self.tolerance = tolerance;
        Ok(self)
    }

    pub fn n_in(&self) -> usize {
        if self.kind.is_symbolic() {
            ALPHABET
        } else {
            2
        }
    }

    pub fn n_out(&self) -> usize {
        match self.kind {
            TaskKind::Adding | TaskKind::Multiplication => 1,
            TaskKind::TemporalOrder => 4,
            TaskKind::TemporalOrder3 => 8,
        }
    }

    pub fn output_activation(&self) -> OutputActivation {
        if self.kind.is_symbolic() {
            OutputActivation::Softmax
        } else {
            OutputActivation::Linear
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.output_activation().loss_kind()
    }

    /// Marker windows (adding, multiplication) or special-symbol windows
    /// (temporal order), in time order.
    pub fn windows(&self) -> Result<Vec<Window>> {
        let t = self.t_len;
        if self.kind.is_symbolic() {
            let tenths: &[(usize, usize)] = if self.kind.special_count() == 2 {
                &[(1, 2), (5, 6)]
            } else {
                &[(1, 2), (3, 4), (6, 7)]
            };
            let mut out = Vec::with_capacity(tenths.len());
            for &(lo, hi) in tenths {
                let w = ((t * lo).div_ceil(10).max(1), t * hi / 10);
                if w.1 < w.0 + 1 {
                    return Err(SrnError::config(
                        "T",
                        format!(
                            "{}: special-symbol window [{}T/10, {}T/10] must span at least 2 steps, \
                             T = {t} gives [{}, {}]",
                            self.kind, lo, hi, w.0, w.1
                        ),
                    ));
                }
                if let Some(prev) = out.last().map(|p: &Window| p.1) {
                    if w.0 <= prev {
                        return Err(SrnError::config(
                            "T",
                            format!("{}: special-symbol windows overlap at T = {t}", self.kind),
                        ));
                    }
                }
                out.push(w);
            }
            Ok(out)
        } else {
            if t < 10 {
                return Err(SrnError::config(
                    "T",
                    format!(
                        "{}: marker windows [1, T/10] and (T/10, T/2] need T >= 10, got {t}",
                        self.kind
                    ),
                ));
            }
            Ok(vec![(1, t / 10), (t / 10 + 1, t / 2)])
        }
    }
}

/// Raw content of one sequence, stored compactly.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceData {
    /// Value channel plus the two marked 1-based steps.
    Marked { values: Vec<f64>, markers: [usize; 2] },
    /// Symbol per step: `0..4` distractors, 4 = X, 5 = Y.
    Symbols(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: SequenceData,
    pub target: Target,
}

impl Sample {
    pub fn len(&self) -> usize {
        match &self.data {
            SequenceData::Marked { values, .. } => values.len(),
            SequenceData::Symbols(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Network input vectors, one per step.
    pub fn inputs(&self) -> Vec<Vector> {
        match &self.data {
            SequenceData::Marked { values, markers } => values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let mark = if markers.contains(&(i + 1)) { 1.0 } else { 0.0 };
                    Vector::from(vec![v, mark])
                })
                .collect(),
            SequenceData::Symbols(syms) => syms
                .iter()
                .map(|&s| Vector::basis(ALPHABET, s as usize))
                .collect(),
        }
    }
}

/// A set of generated sequences of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub spec: TaskSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent sub-seed number `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

fn regression_target(kind: TaskKind, v1: f64, v2: f64) -> f64 {
    match kind {
        TaskKind::Adding => 0.5 * (v1 + v2),
        TaskKind::Multiplication => v1 * v2,
        _ => unreachable!("not a regression task"),
    }
}

/// Class index of an ordered tuple of special symbols.
pub fn class_of(specials: &[u8]) -> usize {
    specials
        .iter()
        .fold(0, |acc, &s| (acc << 1) | usize::from(s == SYMBOL_Y))
}

fn target_of(spec: &TaskSpec, data: &SequenceData) -> Result<Target> {
    match data {
        SequenceData::Marked { values, markers } => {
            let get = |m: usize| {
                values
                    .get(m.wrapping_sub(1))
                    .copied()
                    .ok_or_else(|| SrnError::Parse(format!("marker {m} outside sequence")))
            };
            let t = regression_target(spec.kind, get(markers[0])?, get(markers[1])?);
            Ok(Target::Regression(Vector::from(vec![t])))
        }
        SequenceData::Symbols(syms) => {
            let specials: Vec<u8> = syms.iter().copied().filter(|&s| s >= DISTRACTORS).collect();
            if specials.len() != spec.kind.special_count() {
                return Err(SrnError::Parse(format!(
                    "expected {} special symbols, found {}",
                    spec.kind.special_count(),
                    specials.len()
                )));
            }
            Ok(Target::Class(class_of(&specials)))
        }
    }
}

/// Generates a single sequence from its own seed.
pub fn gen_sample(spec: &TaskSpec, seed: u64) -> Result<Sample> {
    let windows = spec.windows()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = spec.t_len;
    let data = if spec.kind.is_symbolic() {
        let mut syms: Vec<u8> = (0..t).map(|_| rng.random_range(0..DISTRACTORS)).collect();
        for &(lo, hi) in &windows {
            let pos = rng.random_range(lo..=hi);
            syms[pos - 1] = if rng.random::<bool>() { SYMBOL_Y } else { SYMBOL_X };
        }
        SequenceData::Symbols(syms)
    } else {
        let values: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let m1 = rng.random_range(windows[0].0..=windows[0].1);
        let m2 = rng.random_range(windows[1].0..=windows[1].1);
        SequenceData::Marked {
            values,
            markers: [m1, m2],
        }
    };
    let target = target_of(spec, &data)?;
    Ok(Sample { data, target })
}

/// `n` sequences of `spec`, sequence `i` drawn from `derive_seed(seed, i)`.
pub fn generate(spec: &TaskSpec, n: usize, seed: u64) -> Result<SequenceBatch> {
    let samples = (0..n as u64)
        .map(|i| gen_sample(spec, derive_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceBatch {
        spec: *spec,
        seed,
        samples,
    })
}

pub fn gen_adding(t_len: usize, n: usize, seed: u64) -> Result<SequenceBatch> {
    generate(&TaskSpec::new(TaskKind::Adding, t_len)?, n, seed)
}

pub fn gen_multiplication(t_len: usize, n: usize, seed: u64) -> Result<SequenceBatch> {
    generate(&TaskSpec::new(TaskKind::Multiplication, t_len)?, n, seed)
}

pub fn gen_temporal_order(t_len: usize, n: usize, seed: u64, special_count: usize) -> Result<SequenceBatch> {
    let kind = match special_count {
        2 => TaskKind::TemporalOrder,
        3 => TaskKind::TemporalOrder3,
        _ => return Err(SrnError::config("special_count", "must be 2 or 3")),
    };
    generate(&TaskSpec::new(kind, t_len)?, n, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 20_000,
            valid: 1_000,
            test: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SequenceBatch,
    pub valid: SequenceBatch,
    pub test: SequenceBatch,
}

/// Train, validation and test sets from sub-seeds 0, 1 and 2 of `seed`.
pub fn make_splits(spec: &TaskSpec, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    Ok(Splits {
        train: generate(spec, sizes.train, derive_seed(seed, 0))?,
        valid: generate(spec, sizes.valid, derive_seed(seed, 1))?,
        test: generate(spec, sizes.test, derive_seed(seed, 2))?,
    })
}

const DATASET_FORMAT: &str = "srn-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    task: TaskKind,
    #[serde(rename = "T")]
    t_len: usize,
    n: usize,
    seed: u64,
    tolerance: f64,
}

/// Writes a dataset file: one JSON header line, then a little-endian binary
/// body (see FORMATS.md).
pub fn write_dataset(batch: &SequenceBatch, mut w: impl Write) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        task: batch.spec.kind,
        t_len: batch.spec.t_len,
        n: batch.samples.len(),
        seed: batch.seed,
        tolerance: batch.spec.tolerance,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &batch.samples {
        match &s.data {
            SequenceData::Marked { values, markers } => {
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
                for &m in markers {
                    w.write_all(&(m as u32).to_le_bytes())?;
                }
            }
            SequenceData::Symbols(syms) => w.write_all(syms)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(mut r: impl BufRead) -> Result<SequenceBatch> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DatasetHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| SrnError::Parse(format!("dataset header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(SrnError::Parse(format!(
            "dataset header: unsupported format `{}` version {}",
            header.format, header.version
        )));
    }
    let spec = TaskSpec::new(header.task, header.t_len)?.with_tolerance(header.tolerance)?;
    let t = header.t_len;
    let mut samples = Vec::with_capacity(header.n);
    let truncated = |e: std::io::Error| SrnError::Parse(format!("dataset body truncated: {e}"));
    for _ in 0..header.n {
        let data = if spec.kind.is_symbolic() {
            let mut syms = vec![0u8; t];
            r.read_exact(&mut syms).map_err(truncated)?;
            if let Some(&bad) = syms.iter().find(|&&s| s as usize >= ALPHABET) {
                return Err(SrnError::Parse(format!("symbol {bad} outside alphabet")));
            }
            SequenceData::Symbols(syms)
        } else {
            let mut buf = vec![0u8; 8 * t + 8];
            r.read_exact(&mut buf).map_err(truncated)?;
            let values = buf[..8 * t]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = |i: usize| u32::from_le_bytes(buf[8 * t + 4 * i..8 * t + 4 * i + 4].try_into().unwrap()) as usize;
            SequenceData::Marked {
                values,
                markers: [m(0), m(1)],
            }
        };
        let target = target_of(&spec, &data)?;
        samples.push(Sample { data, target });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(SrnError::Parse(format!("{} trailing bytes after dataset body", rest.len())));
    }
    Ok(SequenceBatch {
        spec,
        seed: header.seed,
        samples,
    })
}
