//! Gradient-flow measurements: norm-versus-depth profiles of a network and
//! per-iteration traces of delta norms and activation statistics.

use std::borrow::Borrow;
use std::io::{Read, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::bptt::{run_sequence, step_gradient_norms, BatchPass};
use crate::error::{Result, SrnError};
use crate::model::SrnParams;
use crate::regularizer::Decision;
use crate::tasks::{Sample, TaskSpec};

/// Mean norms at one backpropagation depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    /// Mean `‖δ(T-depth)‖`.
    pub delta_norm: f64,
    /// Mean `‖∂E/∂w_in‖` contribution of step `T-depth`.
    pub gwin_norm: f64,
    /// Mean `‖∂E/∂w_rec‖` contribution of step `T-depth`.
    pub gwrec_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthProfile {
    pub rows: Vec<DepthRow>,
}

impl DepthProfile {
    /// `delta_norm` at the deepest depth divided by the one at depth 0.
    pub fn end_to_start_ratio(&self) -> f64 {
        let first = self.rows.first().map_or(0.0, |r| r.delta_norm);
        let last = self.rows.last().map_or(0.0, |r| r.delta_norm);
        last / first
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_rows(w, &self.rows)
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        Ok(Self { rows: read_rows(r)? })
    }
}

/// Averages per-depth norms of deltas and of the per-step weight-gradient
/// contributions over `probes`, each with its own target error injected at
/// the output.
pub fn depth_scan<S: Borrow<Sample>>(params: &SrnParams, spec: &TaskSpec, probes: &[S], h: usize) -> Result<DepthProfile> {
    if probes.is_empty() {
        return Err(SrnError::config("probes", "need at least one probe sequence"));
    }
    let mut rows: Vec<DepthRow> = (0..=h)
        .map(|depth| DepthRow {
            depth,
            delta_norm: 0.0,
            gwin_norm: 0.0,
            gwrec_norm: 0.0,
        })
        .collect();
    for s in probes {
        let pass = run_sequence(params, spec, s.borrow(), h)?;
        let step_norms = step_gradient_norms(&pass.trace, &pass.bptt);
        for ((row, &dn), &(gin, grec)) in rows.iter_mut().zip(&pass.bptt.delta_norms).zip(&step_norms) {
            row.delta_norm += dn;
            row.gwin_norm += gin;
            row.gwrec_norm += grec;
        }
    }
    let inv = 1.0 / probes.len() as f64;
    for row in &mut rows {
        row.delta_norm *= inv;
        row.gwin_norm *= inv;
        row.gwrec_norm *= inv;
    }
    Ok(DepthProfile { rows })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the log delta-norm curve and each log
/// weight-gradient curve; returns the smaller of the two.
///
/// Only depths where all three norms are positive take part. Returns `None`
/// when fewer than two such depths remain or a curve has zero variance.
pub fn correlation_check(profile: &DepthProfile) -> Option<f64> {
    let rows: Vec<&DepthRow> = profile
        .rows
        .iter()
        .filter(|r| r.delta_norm > 0.0 && r.gwin_norm > 0.0 && r.gwrec_norm > 0.0)
        .collect();
    if rows.len() < 2 {
        return None;
    }
    let ld: Vec<f64> = rows.iter().map(|r| r.delta_norm.ln()).collect();
    let lin: Vec<f64> = rows.iter().map(|r| r.gwin_norm.ln()).collect();
    let lrec: Vec<f64> = rows.iter().map(|r| r.gwrec_norm.ln()).collect();
    Some(pearson(&ld, &lin)?.min(pearson(&ld, &lrec)?))
}

/// Training-time snapshot of gradient flow and activation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub iter: u64,
    /// Batch-mean `‖δ(T)‖`.
    pub delta_norm_d0: f64,
    /// Batch-mean `‖δ(T - h/2)‖`.
    pub delta_norm_dhalf: f64,
    /// Batch-mean `‖δ(T - h)‖`.
    pub delta_norm_dh: f64,
    /// Mean of `a(k)` over all hidden units, steps and sequences.
    pub act_mean: f64,
    pub act_median: f64,
    /// Median of `|a(k)|`.
    pub act_abs_median: f64,
    pub decision: Decision,
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mid = n / 2;
    let (lo, &mut m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

pub fn dynamics_row(iter: u64, pass: &BatchPass, decision: Decision) -> DynamicsRow {
    let norms = pass.mean_delta_norms();
    let h = norms.len() - 1;
    let mut acts: Vec<f64> = pass
        .passes
        .iter()
        .flat_map(|p| p.trace.activations().iter().flat_map(|a| a.iter().copied()))
        .collect();
    let act_mean = if acts.is_empty() {
        0.0
    } else {
        acts.iter().sum::<f64>() / acts.len() as f64
    };
    let act_median = median(&mut acts);
    for a in &mut acts {
        *a = a.abs();
    }
    let act_abs_median = median(&mut acts);
    DynamicsRow {
        iter,
        delta_norm_d0: norms[0],
        delta_norm_dhalf: norms[h / 2],
        delta_norm_dh: norms[h],
        act_mean,
        act_median,
        act_abs_median,
        decision,
    }
}

/// In-memory dynamics trace with CSV I/O.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DynamicsTrace {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsTrace {
    pub fn push(&mut self, row: DynamicsRow) {
        self.rows.push(row);
    }

    /// Fraction of rows whose deepest delta norm is below `threshold`.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.delta_norm_dh < threshold).count() as f64 / self.rows.len() as f64
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_rows(w, &self.rows)
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        Ok(Self { rows: read_rows(r)? })
    }
}

/// Writes serde rows as CSV with a header line.
pub fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(r: impl Read) -> Result<Vec<T>> {
    let mut rd = csv::Reader::from_reader(r);
    let rows = rd.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}
