//! Model introspection: the under-activated-neuron census and first-order
//! parameter sensitivity, each paired with an exact re-evaluation oracle.

use std::collections::BTreeMap;

use crate::data::TokenBatch;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::{ActivationProbe, FwdCtx, MetroModel};
use crate::ops;
use crate::tape::{backward, Gradients, Tape};
use crate::vocab::{TokenId, BOS};

pub const DEFAULT_ACTIVATION_THRESHOLD: f64 = 0.995;

/// Per-layer, per-neuron activation frequencies over a dataset, with the
/// under-activation census at a threshold. A neuron counts a token as
/// active iff its post-ReLU value is strictly positive; PAD positions are
/// excluded.
#[derive(Debug, Clone)]
pub struct ActivationReport {
    pub threshold: f64,
    pub layers: Vec<LayerActivation>,
    pub under_activated: usize,
    pub total_neurons: usize,
}

#[derive(Debug, Clone)]
pub struct LayerActivation {
    pub tag: String,
    pub tokens: u64,
    pub frequencies: Vec<f64>,
}

impl ActivationReport {
    pub fn under_activated_pct(&self) -> f64 {
        if self.total_neurons == 0 {
            0.0
        } else {
            100.0 * self.under_activated as f64 / self.total_neurons as f64
        }
    }

    /// `layer,neuron,frequency` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,neuron,frequency\n");
        for layer in &self.layers {
            for (j, f) in layer.frequencies.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", layer.tag, j, f));
            }
        }
        out
    }
}

fn census_cutoff(threshold: f64) -> f64 {
    1.0 - threshold
}

fn batch_from_rows(rows: &[Vec<TokenId>]) -> TokenBatch {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
    TokenBatch::from_rows(rows, width)
}

fn shifted_input(target: &TokenBatch) -> TokenBatch {
    let rows: Vec<Vec<TokenId>> = (0..target.rows)
        .map(|r| {
            let len = target.row_len(r).max(1);
            let mut row = vec![BOS];
            row.extend_from_slice(&target.row(r)[..len - 1]);
            row
        })
        .collect();
    TokenBatch::from_rows(&rows, target.cols)
}

/// Run the main model (encoder + teacher-forced decoder) over the sample
/// and collect post-ReLU activation counts. Never mutates parameters.
pub fn census_activations<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
    threshold: f64,
) -> Result<ActivationReport> {
    census_with_probe(model, sample, threshold, false).map(|(r, _)| r)
}

fn census_with_probe<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
    threshold: f64,
    capture_full: bool,
) -> Result<(ActivationReport, ActivationProbe)> {
    if sample.is_empty() {
        return Err(Error::Contract("activation census needs a non-empty sample".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Analysis(format!(
            "activation threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let mut probe = ActivationProbe::new(Vec::new());
    probe.capture_full = capture_full;
    for (input, target) in sample {
        let enc_batch = batch_from_rows(std::slice::from_ref(input));
        let tgt_batch = batch_from_rows(std::slice::from_ref(target));
        let dec_input = shifted_input(&tgt_batch);
        let tape = Tape::inference();

        probe.token_mask = enc_batch.non_pad();
        let h_enc = {
            let mut ctx = FwdCtx {
                tape: &tape,
                dropout: 0.0,
                rng: None,
                probe: Some(&mut probe),
            };
            model.encoder_forward(&mut ctx, &enc_batch)?
        };
        probe.token_mask = dec_input.non_pad();
        {
            let mut ctx = FwdCtx {
                tape: &tape,
                dropout: 0.0,
                rng: None,
                probe: Some(&mut probe),
            };
            model.decoder_forward(&mut ctx, &h_enc, &enc_batch, &dec_input)?;
        }
    }

    let cutoff = census_cutoff(threshold);
    let mut layers = Vec::new();
    let mut under = 0usize;
    let mut total = 0usize;
    for (tag, counts) in &probe.counts {
        let frequencies: Vec<f64> = counts
            .active
            .iter()
            .map(|&a| {
                if counts.tokens == 0 {
                    0.0
                } else {
                    a as f64 / counts.tokens as f64
                }
            })
            .collect();
        under += frequencies.iter().filter(|&&f| f < cutoff).count();
        total += frequencies.len();
        layers.push(LayerActivation {
            tag: tag.clone(),
            tokens: counts.tokens,
            frequencies,
        });
    }
    Ok((
        ActivationReport {
            threshold,
            layers,
            under_activated: under,
            total_neurons: total,
        },
        probe,
    ))
}

/// Teacher-forced cross-entropy of the main model over a fixed sample,
/// averaged over non-PAD target positions. The standard loss both analyses
/// differentiate or re-evaluate.
pub fn seq2seq_loss<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<f64> {
    let (loss, _) = seq2seq_forward(model, sample, false)?;
    Ok(loss)
}

pub fn seq2seq_loss_and_grads<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<(f64, Gradients<E>)> {
    let (loss, grads) = seq2seq_forward(model, sample, true)?;
    Ok((loss, grads.expect("recording tape yields gradients")))
}

fn seq2seq_forward<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
    record: bool,
) -> Result<(f64, Option<Gradients<E>>)> {
    if sample.is_empty() {
        return Err(Error::Contract("loss sample is empty".into()));
    }
    let enc_rows: Vec<Vec<TokenId>> = sample.iter().map(|(i, _)| i.clone()).collect();
    let tgt_rows: Vec<Vec<TokenId>> = sample.iter().map(|(_, t)| t.clone()).collect();
    let enc_batch = batch_from_rows(&enc_rows);
    let target = batch_from_rows(&tgt_rows);
    let dec_input = shifted_input(&target);
    let tape = if record { Tape::new() } else { Tape::inference() };
    let mut ctx = FwdCtx::inference(&tape);
    let h_enc = model.encoder_forward(&mut ctx, &enc_batch)?;
    let h_dec = model.decoder_forward(&mut ctx, &h_enc, &enc_batch, &dec_input)?;
    let logits = model.clm_head(&mut ctx, &h_dec)?;
    let loss = ops::softmax_cross_entropy(&tape, &logits, &target.ids, &target.non_pad())?;
    let value = loss.item()?.to_f64();
    if record {
        let grads = backward(&tape, &loss)?;
        Ok((value, Some(grads)))
    } else {
        Ok((value, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityFormula {
    /// |theta_j * g_j| — first-order Taylor estimate of zeroing entry j.
    TaylorZeroOut,
    /// |theta_{-j}^T g| = |theta^T g - theta_j * g_j| — the alternative
    /// full-vector form.
    PaperPrinted,
}

pub fn sensitivity_value(formula: SensitivityFormula, theta_j: f64, g_j: f64, theta_dot_g: f64) -> f64 {
    match formula {
        SensitivityFormula::TaylorZeroOut => (theta_j * g_j).abs(),
        SensitivityFormula::PaperPrinted => (theta_dot_g - theta_j * g_j).abs(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub var: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

fn summarize(values: &mut [f64]) -> SummaryStats {
    if values.is_empty() {
        return SummaryStats::default();
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    let q = |p: f64| values[((count as f64 - 1.0) * p).round() as usize];
    SummaryStats {
        count,
        mean,
        var,
        p50: q(0.5),
        p90: q(0.9),
        p99: q(0.99),
    }
}

/// Fixed log-spaced histogram edges, one bin per decade from 1e-12 to 1e2,
/// plus underflow and overflow bins so counts always sum to the parameter
/// count and reports stay comparable across checkpoints.
pub fn histogram_edges() -> Vec<f64> {
    (-12..=2).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// counts[0] = below edges[0]; counts[i] = [edges[i-1], edges[i]);
    /// counts[last] = at or above the final edge.
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: impl Iterator<Item = f64>) -> Self {
        let edges = histogram_edges();
        let mut counts = vec![0u64; edges.len() + 1];
        for v in values {
            let mut bin = 0;
            while bin < edges.len() && v >= edges[bin] {
                bin += 1;
            }
            counts[bin] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct TensorSensitivity {
    pub tensor: String,
    pub stats: SummaryStats,
}

#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub formula: SensitivityFormula,
    pub per_tensor: Vec<TensorSensitivity>,
    pub values: BTreeMap<String, Vec<f64>>,
    pub histogram: Histogram,
    pub global: SummaryStats,
}

impl SensitivityReport {
    /// `tensor,mean,var,p50,p90,p99` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor,mean,var,p50,p90,p99\n");
        for t in &self.per_tensor {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.tensor, t.stats.mean, t.stats.var, t.stats.p50, t.stats.p90, t.stats.p99
            ));
        }
        out
    }
}

/// Per-scalar sensitivity of the seq2seq loss on a fixed sample. Gradients
/// are taken once; parameters with no gradient path contribute zeros.
pub fn parameter_sensitivity<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
    formula: SensitivityFormula,
) -> Result<SensitivityReport> {
    let (_, grads) = seq2seq_loss_and_grads(model, sample)?;
    // theta^T g over every parameter scalar (for the full-vector form)
    let mut theta_dot_g = 0.0f64;
    if formula == SensitivityFormula::PaperPrinted {
        for p in model.params().iter() {
            if let Some(g) = grads.of(p) {
                let val = p.value();
                for (x, gx) in val.iter().zip(g) {
                    theta_dot_g += x.to_f64() * gx.to_f64();
                }
            }
        }
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_tensor = Vec::new();
    let mut all = Vec::new();
    for p in model.params().iter() {
        let val = p.value();
        let g = grads.of(p);
        let sens: Vec<f64> = (0..val.len())
            .map(|j| {
                let gj = g.map(|g| g[j].to_f64()).unwrap_or(0.0);
                sensitivity_value(formula, val[j].to_f64(), gj, theta_dot_g)
            })
            .collect();
        all.extend_from_slice(&sens);
        let mut copy = sens.clone();
        per_tensor.push(TensorSensitivity {
            tensor: p.name().to_string(),
            stats: summarize(&mut copy),
        });
        values.insert(p.name().to_string(), sens);
    }
    let histogram = Histogram::build(all.iter().copied());
    let global = summarize(&mut all);
    Ok(SensitivityReport {
        formula,
        per_tensor,
        values,
        histogram,
        global,
    })
}

/// Exact loss change from zeroing single parameters, one reforward per
/// entry. The model is restored afterward and the restoration is verified.
pub fn zero_out_oracle<E: Elem, F>(
    model: &MetroModel<E>,
    entries: &[(String, usize)],
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&MetroModel<E>) -> Result<f64>,
{
    if entries.len() > 1000 {
        return Err(Error::Contract(format!(
            "zero-out oracle limited to 1000 entries (each costs a forward pass), got {}",
            entries.len()
        )));
    }
    let base = loss_fn(model)?;
    let mut deltas = Vec::with_capacity(entries.len());
    for (name, idx) in entries {
        let param = model
            .params()
            .get(name)
            .ok_or_else(|| Error::Analysis(format!("no parameter named {name}")))?;
        if *idx >= param.numel() {
            return Err(Error::Analysis(format!(
                "index {idx} out of range for {name} ({} scalars)",
                param.numel()
            )));
        }
        let original = param.value()[*idx];
        param.update(|d| d[*idx] = E::zero());
        let zeroed = loss_fn(model)?;
        param.update(|d| d[*idx] = original);
        deltas.push((zeroed - base).abs());
    }
    let check = loss_fn(model)?;
    if check.to_bits() != base.to_bits() {
        return Err(Error::Analysis(format!(
            "model not restored after zero-out: loss {base} became {check}"
        )));
    }
    Ok(deltas)
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let ra = rank(a);
    let rb = rank(b);
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// One checkpoint's introspection summary for side-by-side comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSnapshot {
    pub label: String,
    pub under_activated_pct: f64,
    pub sensitivity_var: f64,
}

/// Side-by-side under-activation and sensitivity-variance table.
pub fn compare_runs(a: &[AnalysisSnapshot], b: &[AnalysisSnapshot]) -> Result<String> {
    if a.len() != b.len() {
        return Err(Error::Analysis(format!(
            "comparison series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut out =
        String::from("label,under_pct_a,under_pct_b,under_delta,sens_var_a,sens_var_b,sens_var_delta\n");
    for (x, y) in a.iter().zip(b) {
        if x.label != y.label {
            return Err(Error::Analysis(format!(
                "comparison labels differ: {} vs {}",
                x.label, y.label
            )));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            x.label,
            x.under_activated_pct,
            y.under_activated_pct,
            y.under_activated_pct - x.under_activated_pct,
            x.sensitivity_var,
            y.sensitivity_var,
            y.sensitivity_var - x.sensitivity_var,
        ));
    }
    Ok(out)
}

/// Test-support: census plus full activation capture for the brute-force
/// recount oracle.
pub fn census_with_capture<E: Elem>(
    model: &MetroModel<E>,
    sample: &[(Vec<TokenId>, Vec<TokenId>)],
    threshold: f64,
) -> Result<(ActivationReport, ActivationProbe)> {
    census_with_probe(model, sample, threshold, true)
}

#[cfg(test)]
mod tests;
