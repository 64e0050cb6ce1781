//! Central finite-difference gradient verification.
//!
//! Used by the oracle tests: perturb each parameter scalar by ±h, re-run the
//! forward loss, and compare the slope against the recorded gradient. Runs at
//! f64 only; the comparison is meaningless at training precision.

use std::sync::Arc;

use crate::error::Result;
use crate::tape::Gradients;
use crate::tensor::Param;

pub struct GradCheckReport {
    pub total: usize,
    pub strict_passes: usize,
    pub exempt_small: usize,
    pub failures: Vec<GradMismatch>,
}

#[derive(Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

impl GradCheckReport {
    /// Every scalar either passed the tolerance or was exempt for having a
    /// gradient below `small`, and at least `min_strict_fraction` passed
    /// strictly.
    pub fn acceptable(&self, min_strict_fraction: f64) -> bool {
        self.failures.is_empty()
            && self.total > 0
            && (self.strict_passes as f64) / (self.total as f64) >= min_strict_fraction
    }
}

/// Check autodiff gradients of every scalar in `params` against central
/// differences of `loss_fn`. `loss_fn` must recompute the loss from the
/// parameters' current values.
///
/// A comparison passes when the relative error beats `rel_tol` or the
/// absolute difference is below `abs_tol`; the latter covers the roundoff
/// floor of the difference quotient itself (about eps * |loss| / h), which
/// dominates for gradients much smaller than the loss scale.
pub fn check_params<F>(
    params: &[Arc<Param<f64>>],
    grads: &Gradients<f64>,
    mut loss_fn: F,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    small: f64,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<f64>,
{
    let zero_grad;
    let mut report = GradCheckReport {
        total: 0,
        strict_passes: 0,
        exempt_small: 0,
        failures: Vec::new(),
    };
    zero_grad = Vec::new();
    for param in params {
        let g = match grads.of(param) {
            Some(g) => g,
            None => &zero_grad,
        };
        let n = param.numel();
        for idx in 0..n {
            let original = param.value()[idx];
            param.update(|d| d[idx] = original + h);
            let plus = loss_fn()?;
            param.update(|d| d[idx] = original - h);
            let minus = loss_fn()?;
            param.update(|d| d[idx] = original);

            let fd = (plus - minus) / (2.0 * h);
            let ad = g.get(idx).copied().unwrap_or(0.0);
            let denom = ad.abs().max(fd.abs());
            report.total += 1;
            if denom < small {
                report.exempt_small += 1;
                continue;
            }
            let rel = (ad - fd).abs() / denom;
            if rel < rel_tol || (ad - fd).abs() < abs_tol {
                report.strict_passes += 1;
            } else if ad.abs() < small && fd.abs() < small {
                report.exempt_small += 1;
            } else {
                report.failures.push(GradMismatch {
                    param: param.name().to_string(),
                    index: idx,
                    autodiff: ad,
                    finite_diff: fd,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tape::{backward, Tape};
    use crate::tensor::{ParamSet, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check_binary<FB>(shape_a: Vec<usize>, shape_b: Vec<usize>, seed: u64, min_strict: f64, build: FB)
    where
        FB: Fn(&Tape<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let a = set.register("a", Tensor::randn(shape_a, 1.0, &mut rng));
        let b = set.register("b", Tensor::randn(shape_b, 1.0, &mut rng));
        let forward = |tape: &Tape<f64>| {
            let out = build(tape, &a.leaf(), &b.leaf());
            ops::sum_all(tape, &out)
        };
        let tape = Tape::new();
        let loss = forward(&tape);
        let grads = backward(&tape, &loss).unwrap();
        let params: Vec<_> = set.iter().cloned().collect();
        let report = check_params(
            &params,
            &grads,
            || forward(&Tape::inference()).item(),
            1e-5,
            1e-4,
            1e-10,
            1e-8,
        )
        .unwrap();
        assert!(
            report.acceptable(min_strict),
            "failures: {:?}",
            &report.failures[..report.failures.len().min(5)]
        );
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        fd_check_binary(vec![3, 4], vec![4, 2], 11, 0.95, |tape, a, b| {
            ops::matmul(tape, a, b).unwrap()
        });
    }

    #[test]
    fn bmm_gradient_matches_finite_differences() {
        fd_check_binary(vec![2, 3, 4], vec![2, 4, 2], 13, 0.95, |tape, a, b| {
            ops::bmm(tape, a, b).unwrap()
        });
    }

    #[test]
    fn mul_add_chain_gradient() {
        // relu kills roughly half the paths, so only require the live half
        fd_check_binary(vec![3, 4], vec![3, 4], 17, 0.4, |tape, a, b| {
            let prod = ops::mul(tape, a, b).unwrap();
            let summed = ops::add(tape, &prod, a).unwrap();
            ops::relu(tape, &summed)
        });
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut set = ParamSet::new();
        let x = set.register("x", Tensor::randn(vec![2, 3, 8], 1.0, &mut rng));
        let gain = set.register("gain", Tensor::randn(vec![8], 0.5, &mut rng));
        let bias = set.register("bias", Tensor::randn(vec![8], 0.5, &mut rng));
        let forward = |tape: &Tape<f64>| {
            let y = ops::layer_norm(tape, &x.leaf(), &gain.leaf(), &bias.leaf(), 1e-5).unwrap();
            // square so the all-ones upstream gradient does not hide errors
            let sq = ops::mul(tape, &y, &y).unwrap();
            ops::sum_all(tape, &sq)
        };
        let tape = Tape::new();
        let loss = forward(&tape);
        let grads = backward(&tape, &loss).unwrap();
        let params: Vec<_> = set.iter().cloned().collect();
        let report = check_params(
            &params,
            &grads,
            || forward(&Tape::inference()).item(),
            1e-5,
            1e-4,
            1e-10,
            1e-8,
        )
        .unwrap();
        assert!(report.acceptable(0.95), "failures: {:?}", report.failures.first());
    }

    #[test]
    fn attention_stack_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut set = ParamSet::new();
        let q = set.register("q", Tensor::randn(vec![2, 3, 4], 0.7, &mut rng));
        let k = set.register("k", Tensor::randn(vec![2, 3, 4], 0.7, &mut rng));
        let v = set.register("v", Tensor::randn(vec![2, 3, 4], 0.7, &mut rng));
        let bias = set.register("bias", Tensor::randn(vec![3, 3], 0.3, &mut rng));
        let forward = |tape: &Tape<f64>| {
            let out = ops::scaled_dot_attention(tape, &q.leaf(), &k.leaf(), &v.leaf(), &[&bias.leaf()])
                .unwrap();
            let sq = ops::mul(tape, &out, &out).unwrap();
            ops::sum_all(tape, &sq)
        };
        let tape = Tape::new();
        let loss = forward(&tape);
        let grads = backward(&tape, &loss).unwrap();
        let params: Vec<_> = set.iter().cloned().collect();
        let report = check_params(
            &params,
            &grads,
            || forward(&Tape::inference()).item(),
            1e-5,
            1e-4,
            1e-10,
            1e-8,
        )
        .unwrap();
        assert!(report.acceptable(0.95), "failures: {:?}", report.failures.first());
    }

    #[test]
    fn embedding_and_cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut set = ParamSet::new();
        let table = set.register("table", Tensor::randn(vec![7, 5], 1.0, &mut rng));
        let ids = vec![1u32, 4, 1, 6];
        let targets = vec![2u32, 0, 3, 6];
        let mask = vec![true, true, false, true];
        let forward = |tape: &Tape<f64>| -> Tensor<f64> {
            let emb = ops::embedding_lookup(tape, &table.leaf(), &ids).unwrap();
            let tt = ops::transpose_last2(tape, &table.leaf()).unwrap();
            let logits = ops::matmul(tape, &emb, &tt).unwrap();
            ops::softmax_cross_entropy(tape, &logits, &targets, &mask).unwrap()
        };
        let tape = Tape::new();
        let loss = forward(&tape);
        let grads = backward(&tape, &loss).unwrap();
        let params: Vec<_> = set.iter().cloned().collect();
        let report = check_params(
            &params,
            &grads,
            || forward(&Tape::inference()).item(),
            1e-5,
            1e-4,
            1e-10,
            1e-8,
        )
        .unwrap();
        assert!(report.acceptable(0.95), "failures: {:?}", report.failures.first());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut set = ParamSet::new();
        let z = set.register("z", Tensor::randn(vec![6], 1.5, &mut rng));
        let labels = vec![true, false, true, true, false, false];
        let mask = vec![true; 6];
        let forward = |tape: &Tape<f64>| ops::bce_with_logits(tape, &z.leaf(), &labels, &mask).unwrap();
        let tape = Tape::new();
        let loss = forward(&tape);
        let grads = backward(&tape, &loss).unwrap();
        let params: Vec<_> = set.iter().cloned().collect();
        let report = check_params(
            &params,
            &grads,
            || forward(&Tape::inference()).item(),
            1e-5,
            1e-4,
            1e-10,
            1e-8,
        )
        .unwrap();
        assert!(report.acceptable(0.95), "failures: {:?}", report.failures.first());
    }
}
