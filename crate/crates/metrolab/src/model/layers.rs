//! Transformer building blocks: linear/attention/feed-forward sublayers,
//! layer normalization wiring, and the bucketed relative position bias.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::{NormStyle, LN_EPS};
use crate::elem::Elem;
use crate::error::Result;
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Param, ParamSet, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Mutable context threaded through a forward pass: the tape, train-time
/// dropout, and an optional activation probe for the neuron census.
pub struct FwdCtx<'a, E: Elem> {
    pub tape: &'a Tape<E>,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub probe: Option<&'a mut ActivationProbe>,
}

impl<'a, E: Elem> FwdCtx<'a, E> {
    pub fn inference(tape: &'a Tape<E>) -> Self {
        Self {
            tape,
            dropout: 0.0,
            rng: None,
            probe: None,
        }
    }

    pub fn train(tape: &'a Tape<E>, dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape,
            dropout,
            rng: Some(rng),
            probe: None,
        }
    }

    pub(crate) fn apply_dropout(&mut self, x: Tensor<E>) -> Tensor<E> {
        match (&mut self.rng, self.dropout > 0.0) {
            (Some(rng), true) => ops::dropout(self.tape, &x, self.dropout, rng),
            _ => x,
        }
    }
}

/// Records post-ReLU feed-forward activations per layer. `token_mask` flags
/// which rows of the activation matrix are real tokens (PAD excluded).
#[derive(Debug, Default)]
pub struct ActivationProbe {
    pub token_mask: Vec<bool>,
    pub counts: BTreeMap<String, NeuronCounts>,
    pub capture_full: bool,
    pub full: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct NeuronCounts {
    pub active: Vec<u64>,
    pub tokens: u64,
}

impl ActivationProbe {
    pub fn new(token_mask: Vec<bool>) -> Self {
        Self {
            token_mask,
            ..Default::default()
        }
    }

    fn record<E: Elem>(&mut self, tag: &str, data: &[E], width: usize) {
        let rows = data.len() / width;
        debug_assert_eq!(rows, self.token_mask.len());
        let entry = self.counts.entry(tag.to_string()).or_insert_with(|| NeuronCounts {
            active: vec![0; width],
            tokens: 0,
        });
        for r in 0..rows {
            if !self.token_mask[r] {
                continue;
            }
            entry.tokens += 1;
            for (j, slot) in entry.active.iter_mut().enumerate() {
                if data[r * width + j] > E::zero() {
                    *slot += 1;
                }
            }
        }
        if self.capture_full {
            let rows_kept: Vec<f64> = (0..rows)
                .filter(|&r| self.token_mask[r])
                .flat_map(|r| data[r * width..(r + 1) * width].iter().map(|v| v.to_f64()))
                .collect();
            self.full.entry(tag.to_string()).or_default().push(rows_kept);
        }
    }
}

pub struct Linear<E: Elem> {
    pub w: Arc<Param<E>>,
    pub b: Arc<Param<E>>,
}

impl<E: Elem> Linear<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: set.register(format!("{name}.w"), Tensor::randn(vec![d_in, d_out], INIT_STD, rng)),
            b: set.register(format!("{name}.b"), Tensor::zeros(vec![d_out])),
        }
    }

    pub fn fwd(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = ops::matmul(tape, x, &self.w.leaf())?;
        ops::add_tiled(tape, &y, &self.b.leaf())
    }
}

pub struct LayerNorm<E: Elem> {
    pub gain: Arc<Param<E>>,
    pub bias: Arc<Param<E>>,
}

impl<E: Elem> LayerNorm<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, d: usize) -> Self {
        Self {
            gain: set.register(format!("{name}.gain"), Tensor::full(vec![d], E::one())),
            bias: set.register(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    pub fn fwd(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::layer_norm(tape, x, &self.gain.leaf(), &self.bias.leaf(), LN_EPS)
    }
}

/// Map a signed relative distance (key position minus query position) to a
/// bucket id. Bidirectional splits the buckets evenly by sign; each side is
/// exact for small distances, logarithmic out to `max_distance`, and clamped
/// beyond. Monotone non-decreasing in |distance| on each side.
pub fn relative_bucket(distance: i64, buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let (mut bucket, span, n) = if bidirectional {
        let half = buckets / 2;
        let base = if distance > 0 { half } else { 0 };
        (base, half, distance.unsigned_abs() as usize)
    } else {
        (0, buckets, (-distance).max(0) as usize)
    };
    let max_exact = span / 2;
    if n < max_exact {
        bucket += n;
    } else {
        let ratio = ((n as f64) / (max_exact as f64)).ln()
            / ((max_distance as f64) / (max_exact as f64)).ln();
        let log_bucket = max_exact + (ratio * (span - max_exact) as f64) as usize;
        bucket += log_bucket.min(span - 1);
    }
    bucket
}

/// Learned per-head relative position bias, shared across layers by default.
pub struct RelBias<E: Elem> {
    pub table: Arc<Param<E>>,
    pub heads: usize,
    pub buckets: usize,
    pub max_distance: usize,
    pub bidirectional: bool,
}

impl<E: Elem> RelBias<E> {
    pub fn new(
        set: &mut ParamSet<E>,
        name: &str,
        heads: usize,
        buckets: usize,
        max_distance: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            table: set.register(name.to_string(), Tensor::randn(vec![buckets, heads], INIT_STD, rng)),
            heads,
            buckets,
            max_distance,
            bidirectional,
        }
    }

    pub fn bucket(&self, distance: i64) -> usize {
        relative_bucket(distance, self.buckets, self.max_distance, self.bidirectional)
    }

    /// Bias tensor of shape [heads, n_q, n_k], tile-broadcastable onto
    /// attention scores.
    pub fn bias(&self, tape: &Tape<E>, n_q: usize, n_k: usize) -> Result<Tensor<E>> {
        let mut ids = Vec::with_capacity(n_q * n_k);
        for q in 0..n_q {
            for k in 0..n_k {
                ids.push(self.bucket(k as i64 - q as i64) as u32);
            }
        }
        let rows = ops::embedding_lookup(tape, &self.table.leaf(), &ids)?; // [nq*nk, heads]
        let byhead = ops::transpose_last2(tape, &rows)?; // [heads, nq*nk]
        ops::reshape(tape, &byhead, vec![self.heads, n_q, n_k])
    }
}

pub struct Attention<E: Elem> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
}

impl<E: Elem> Attention<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Linear::new(set, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(set, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(set, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(set, &format!("{name}.wo"), d, d, rng),
        }
    }

    /// Multi-head attention over flat inputs. `x_q` is [b*n_q, d], `x_kv` is
    /// [b*n_k, d]; every tensor in `biases` is tiled onto the score matrix
    /// [b*heads, n_q, n_k].
    #[allow(clippy::too_many_arguments)]
    pub fn fwd(
        &self,
        ctx: &mut FwdCtx<E>,
        heads: usize,
        x_q: &Tensor<E>,
        x_kv: &Tensor<E>,
        b: usize,
        n_q: usize,
        n_k: usize,
        biases: &[&Tensor<E>],
    ) -> Result<Tensor<E>> {
        let tape = ctx.tape;
        let d = *x_q.shape().last().unwrap();
        let q = self.wq.fwd(tape, x_q)?;
        let k = self.wk.fwd(tape, x_kv)?;
        let v = self.wv.fwd(tape, x_kv)?;
        let q = ops::split_heads(tape, &ops::reshape(tape, &q, vec![b, n_q, d])?, heads)?;
        let k = ops::split_heads(tape, &ops::reshape(tape, &k, vec![b, n_k, d])?, heads)?;
        let v = ops::split_heads(tape, &ops::reshape(tape, &v, vec![b, n_k, d])?, heads)?;
        let att = ops::scaled_dot_attention(tape, &q, &k, &v, biases)?;
        let merged = ops::merge_heads(tape, &att, heads)?;
        let flat = ops::reshape(tape, &merged, vec![b * n_q, d])?;
        let out = self.wo.fwd(tape, &flat)?;
        Ok(ctx.apply_dropout(out))
    }
}

pub struct FeedForward<E: Elem> {
    pub w1: Linear<E>,
    pub w2: Linear<E>,
    pub tag: String,
}

impl<E: Elem> FeedForward<E> {
    pub fn new(set: &mut ParamSet<E>, name: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Linear::new(set, &format!("{name}.ffn.w1"), d, d_ff, rng),
            w2: Linear::new(set, &format!("{name}.ffn.w2"), d_ff, d, rng),
            tag: name.to_string(),
        }
    }

    pub fn fwd(&self, ctx: &mut FwdCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let hidden = self.w1.fwd(ctx.tape, x)?;
        let active = ops::relu(ctx.tape, &hidden);
        if let Some(probe) = ctx.probe.as_deref_mut() {
            let width = *active.shape().last().unwrap();
            probe.record(&self.tag, active.data(), width);
        }
        let out = self.w2.fwd(ctx.tape, &active)?;
        Ok(ctx.apply_dropout(out))
    }
}

/// Residual + layer norm composition for one sublayer output.
pub fn residual<E: Elem>(
    tape: &Tape<E>,
    norm_style: NormStyle,
    ln: &LayerNorm<E>,
    x: &Tensor<E>,
    fx: &Tensor<E>,
) -> Result<Tensor<E>> {
    let summed = ops::add(tape, x, fx)?;
    match norm_style {
        NormStyle::PostLn => ln.fwd(tape, &summed),
        NormStyle::PreLn => Ok(summed),
    }
}

/// The sublayer input under each norm style: post-LN feeds x directly,
/// pre-LN normalizes first.
pub fn sublayer_input<E: Elem>(
    tape: &Tape<E>,
    norm_style: NormStyle,
    ln: &LayerNorm<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    match norm_style {
        NormStyle::PostLn => Ok(x.clone()),
        NormStyle::PreLn => ln.fwd(tape, x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_zero_distance_is_zero() {
        assert_eq!(relative_bucket(0, 32, 128, true), 0);
        assert_eq!(relative_bucket(0, 32, 128, false), 0);
    }

    #[test]
    fn buckets_clamp_beyond_max_distance() {
        let b = 32;
        let extreme_neg = relative_bucket(-128, b, 128, true);
        let extreme_pos = relative_bucket(128, b, 128, true);
        assert_eq!(extreme_neg, b / 2 - 1);
        assert_eq!(extreme_pos, b - 1);
        assert_eq!(relative_bucket(-4000, b, 128, true), extreme_neg);
        assert_eq!(relative_bucket(4000, b, 128, true), extreme_pos);
    }

    #[test]
    fn buckets_split_by_sign() {
        for d in 1..200i64 {
            let neg = relative_bucket(-d, 32, 128, true);
            let pos = relative_bucket(d, 32, 128, true);
            assert!(neg < 16, "negative side in low half");
            assert!((16..32).contains(&pos), "positive side in high half");
        }
    }

    #[test]
    fn bucket_monotonicity_against_declared_formula() {
        // independent reimplementation of the piecewise-log rule
        fn oracle(distance: i64, buckets: usize, max_distance: usize) -> usize {
            let half = buckets / 2;
            let offset = if distance > 0 { half } else { 0 };
            let n = distance.unsigned_abs() as usize;
            let exact = half / 2;
            let within = if n < exact {
                n
            } else {
                let frac = ((n as f64) / exact as f64).log2() / ((max_distance as f64) / exact as f64).log2();
                (exact + (frac * (half - exact) as f64) as usize).min(half - 1)
            };
            offset + within
        }
        let mut prev = 0;
        for d in 1..=256i64 {
            let got = relative_bucket(d, 32, 128, true);
            assert_eq!(got, oracle(d, 32, 128), "distance {d}");
            assert!(got >= prev, "monotone at {d}");
            prev = got;
        }
        let mut prev = 0;
        for d in 1..=256i64 {
            let got = relative_bucket(-d, 32, 128, true);
            assert_eq!(got, oracle(-d, 32, 128), "distance -{d}");
            assert!(got >= prev, "monotone at -{d}");
            prev = got;
        }
    }

    #[test]
    fn unidirectional_ignores_future_positions() {
        // future keys (distance > 0) collapse to bucket 0 in causal mode
        assert_eq!(relative_bucket(5, 32, 128, false), 0);
        assert!(relative_bucket(-5, 32, 128, false) > 0);
    }
}
