//! Pretraining objectives: noisy-batch construction, decoder-target
//! variants, the joint three-part loss, and the target-ambiguity diagnostic.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::config::TargetVariant;
use crate::data::TokenBatch;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskPlan};
use crate::model::{sample_noise, FwdCtx, MetroModel};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab, BOS};

/// Anything that can score masked positions like the auxiliary MLM. Lets
/// tests drive the pipeline with hand-built predictions.
pub trait MlmScorer<E: Elem> {
    fn mlm_logits(&self, ctx: &mut FwdCtx<E>, masked: &TokenBatch) -> Result<Tensor<E>>;
}

impl<E: Elem> MlmScorer<E> for MetroModel<E> {
    fn mlm_logits(&self, ctx: &mut FwdCtx<E>, masked: &TokenBatch) -> Result<Tensor<E>> {
        self.aux_forward(ctx, masked)
    }
}

/// Aligned original/corrupted pair with per-position replacement labels.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub x_orig: TokenBatch,
    pub x_masked: TokenBatch,
    /// Mask-plan flags, flattened row-major; true = position was masked.
    pub flags: Vec<bool>,
    pub x_noise: TokenBatch,
    /// RTD labels: true where the auxiliary replaced the token
    /// (equivalently, the label is "original" iff x_orig == x_noise).
    pub replaced: Vec<bool>,
}

impl NoisyBatch {
    pub fn label_is_original(&self, i: usize) -> bool {
        !self.replaced[i]
    }
}

/// Mask, score with the auxiliary model, and sample the noisy sequence.
/// Returns the batch plus the auxiliary logits the samples came from (the
/// MLM loss reads those; the samples themselves carry no gradient). One rng
/// drives auxiliary dropout and the categorical draws, in that order.
#[allow(clippy::too_many_arguments)]
pub fn build_noisy_batch<E: Elem, A: MlmScorer<E>>(
    tape: &Tape<E>,
    dropout: f64,
    aux: &A,
    x_orig: &TokenBatch,
    plans: &[MaskPlan],
    vocab: &Vocab,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(NoisyBatch, Tensor<E>)> {
    if plans.len() != x_orig.rows {
        return Err(Error::Contract(format!(
            "{} mask plans for a batch of {} rows",
            plans.len(),
            x_orig.rows
        )));
    }
    let mut masked_rows = Vec::with_capacity(x_orig.rows);
    let mut flags = Vec::with_capacity(x_orig.len());
    for (r, plan) in plans.iter().enumerate() {
        masked_rows.push(apply_mask(x_orig.row(r), plan)?);
        flags.extend_from_slice(&plan.flags);
    }
    let x_masked = TokenBatch::from_rows(&masked_rows, x_orig.cols);
    let logits = {
        let mut ctx = FwdCtx {
            tape,
            dropout,
            rng: Some(&mut *rng),
            probe: None,
        };
        aux.mlm_logits(&mut ctx, &x_masked)?
    };
    let noise_ids = sample_noise(&logits, x_orig, &flags, vocab.reserved_len(), temperature, rng)?;
    let x_noise = TokenBatch {
        rows: x_orig.rows,
        cols: x_orig.cols,
        ids: noise_ids,
    };
    let replaced: Vec<bool> = x_orig
        .ids
        .iter()
        .zip(&x_noise.ids)
        .map(|(&a, &b)| a != b)
        .collect();
    Ok((
        NoisyBatch {
            x_orig: x_orig.clone(),
            x_masked,
            flags,
            x_noise,
            replaced,
        },
        logits,
    ))
}

/// Decoder input/target/loss-mask triple for one decoding-target variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub decoder_input: TokenBatch,
    pub decoder_target: TokenBatch,
    pub loss_mask: Vec<bool>,
    pub variant: TargetVariant,
}

/// Build decoder targets. The masked-only variant is ill-formed for
/// training (one corrupted input can demand several different targets) and
/// is only constructible in diagnostic mode.
pub fn build_decoder_target(
    x_orig: &TokenBatch,
    flags: &[bool],
    variant: TargetVariant,
    diagnostic: bool,
) -> Result<TargetSpec> {
    if flags.len() != x_orig.len() {
        return Err(Error::Contract(format!(
            "{} mask flags for a batch of {} positions",
            flags.len(),
            x_orig.len()
        )));
    }
    if variant == TargetVariant::MaskedOnly && !diagnostic {
        return Err(Error::Config(
            "target_variant masked_only is ill-formed for training (ambiguous targets); \
             it is available in diagnostic mode only"
                .into(),
        ));
    }
    let rows = x_orig.rows;
    let mut target_rows: Vec<Vec<TokenId>> = Vec::with_capacity(rows);
    match variant {
        TargetVariant::MaskedOnly => {
            for r in 0..rows {
                let row = x_orig.row(r);
                let picked: Vec<TokenId> = row
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &t)| flags[r * x_orig.cols + i].then_some(t))
                    .collect();
                target_rows.push(picked);
            }
        }
        TargetVariant::AllTokens | TargetVariant::AllTokensMaskedLoss => {
            for r in 0..rows {
                let len = x_orig.row_len(r);
                target_rows.push(x_orig.row(r)[..len].to_vec());
            }
        }
    }
    // full-sequence variants keep the encoder width so decoder positions
    // align one-to-one with encoder positions (decoder-RTD relies on this)
    let width = match variant {
        TargetVariant::MaskedOnly => target_rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1),
        _ => x_orig.cols,
    };
    let decoder_target = TokenBatch::from_rows(&target_rows, width);
    let input_rows: Vec<Vec<TokenId>> = target_rows
        .iter()
        .map(|row| {
            let mut input = Vec::with_capacity(row.len());
            input.push(BOS);
            if row.len() > 1 {
                input.extend_from_slice(&row[..row.len() - 1]);
            }
            input
        })
        .collect();
    let decoder_input = TokenBatch::from_rows(&input_rows, width);

    let loss_mask: Vec<bool> = match variant {
        TargetVariant::MaskedOnly | TargetVariant::AllTokens => decoder_target.non_pad(),
        TargetVariant::AllTokensMaskedLoss => {
            let mut mask = vec![false; decoder_target.len()];
            for r in 0..rows {
                for i in 0..x_orig.cols.min(width) {
                    mask[r * width + i] = flags[r * x_orig.cols + i];
                }
            }
            mask
        }
    };
    Ok(TargetSpec {
        decoder_input,
        decoder_target,
        loss_mask,
        variant,
    })
}

/// Per-position RTD classification quality at a 0.5 decision threshold.
/// The positive class is "replaced".
#[derive(Debug, Clone, Copy, Default)]
pub struct RtdStats {
    pub accuracy_masked: f64,
    pub accuracy_unmasked: f64,
    pub recall_masked: f64,
    pub precision: f64,
}

pub fn rtd_stats<E: Elem>(logits: &Tensor<E>, batch: &NoisyBatch) -> RtdStats {
    let non_pad = batch.x_orig.non_pad();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    let mut masked_correct = 0u64;
    let mut masked_total = 0u64;
    let mut unmasked_correct = 0u64;
    let mut unmasked_total = 0u64;
    for (i, &z) in logits.data().iter().enumerate() {
        if !non_pad[i] {
            continue;
        }
        let pred_replaced = z.to_f64() > 0.0;
        let actual = batch.replaced[i];
        match (pred_replaced, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if batch.flags[i] {
            masked_total += 1;
            if pred_replaced == actual {
                masked_correct += 1;
            }
        } else {
            unmasked_total += 1;
            if pred_replaced == actual {
                unmasked_correct += 1;
            }
        }
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    RtdStats {
        accuracy_masked: div(masked_correct, masked_total),
        accuracy_unmasked: div(unmasked_correct, unmasked_total),
        recall_masked: div(tp, tp + fn_),
        precision: div(tp, tp + fp),
    }
}

/// The three losses and their weighted combination. Scalar copies are for
/// logging; `combined` stays on the tape for backward.
pub struct LossBreakdown<E: Elem> {
    pub l_mlm: f64,
    pub l_rtd: f64,
    pub l_clm: f64,
    pub combined_value: f64,
    pub combined: Tensor<E>,
    pub rtd: RtdStats,
}

/// Assemble the joint loss. A weight of exactly zero removes that branch
/// from the gradient graph entirely, so its parameters receive no gradient
/// at all (the scalar is still reported).
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<E: Elem>(
    ctx: &mut FwdCtx<E>,
    batch: &NoisyBatch,
    target: &TargetSpec,
    aux_logits: &Tensor<E>,
    rtd_logits: &Tensor<E>,
    clm_logits: &Tensor<E>,
    lambda_rtd: f64,
    lambda_clm: f64,
) -> Result<LossBreakdown<E>> {
    if lambda_rtd < 0.0 || lambda_clm < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got lambda_rtd={lambda_rtd} lambda_clm={lambda_clm}"
        )));
    }
    let tape = ctx.tape;
    let mlm_mask: Vec<bool> = batch.flags.clone();
    let l_mlm = ops::softmax_cross_entropy(tape, aux_logits, &batch.x_orig.ids, &mlm_mask)?;
    let rtd_mask = batch.x_orig.non_pad();
    let l_rtd = ops::bce_with_logits(tape, rtd_logits, &batch.replaced, &rtd_mask)?;
    let l_clm = ops::softmax_cross_entropy(
        tape,
        clm_logits,
        &target.decoder_target.ids,
        &target.loss_mask,
    )?;

    let mut combined = l_mlm.clone();
    if lambda_rtd > 0.0 {
        let weighted = ops::scale(tape, &l_rtd, lambda_rtd);
        combined = ops::add(tape, &combined, &weighted)?;
    }
    if lambda_clm > 0.0 {
        let weighted = ops::scale(tape, &l_clm, lambda_clm);
        combined = ops::add(tape, &combined, &weighted)?;
    }
    Ok(LossBreakdown {
        l_mlm: l_mlm.item()?.to_f64(),
        l_rtd: l_rtd.item()?.to_f64(),
        l_clm: l_clm.item()?.to_f64(),
        combined_value: combined.item()?.to_f64(),
        combined,
        rtd: rtd_stats(rtd_logits, batch),
    })
}

/// Ambiguity statistics for one decoding-target variant: over pairs of
/// draws that produced the same corrupted input, how often do the decoder
/// target strings differ? Loss-mask-only divergence is reported separately.
#[derive(Debug, Clone)]
pub struct AmbiguityReport {
    pub variant: TargetVariant,
    pub draws: usize,
    pub collision_pairs: u64,
    pub ambiguous_pairs: u64,
    pub mask_divergence_pairs: u64,
    pub rate: f64,
    pub mask_divergence_rate: f64,
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Draw (mask plan, auxiliary sample) pairs for every sequence and measure
/// target ambiguity per variant. Diagnostic procedure: the masked-only
/// variant is constructed here regardless of training rules.
#[allow(clippy::too_many_arguments)]
pub fn detect_target_ambiguity<E: Elem, A: MlmScorer<E>>(
    aux: &A,
    seqs: &[Vec<TokenId>],
    vocab: &Vocab,
    ratio: f64,
    trials: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AmbiguityReport>> {
    let variants = [
        TargetVariant::MaskedOnly,
        TargetVariant::AllTokens,
        TargetVariant::AllTokensMaskedLoss,
    ];
    // draws grouped by corrupted input; each draw keeps its per-variant
    // (target, loss mask)
    type DrawRecord = Vec<(Vec<TokenId>, Vec<bool>)>;
    let mut groups: HashMap<Vec<TokenId>, Vec<DrawRecord>> = HashMap::new();
    let mut draws = 0usize;
    for seq in seqs {
        let batch = TokenBatch::from_rows(std::slice::from_ref(seq), seq.len());
        for _ in 0..trials {
            let plan = if ratio == 0.0 {
                MaskPlan::empty(seq.len(), crate::masking::MaskPattern::Iid)
            } else {
                crate::masking::sample_iid_mask(seq, vocab, ratio, rng)?
            };
            let tape = Tape::inference();
            let (noisy, _) = build_noisy_batch(&tape, 0.0, aux, &batch, &[plan], vocab, temperature, rng)?;
            let mut record: DrawRecord = Vec::with_capacity(variants.len());
            for variant in variants {
                let spec = build_decoder_target(&batch, &noisy.flags, variant, true)?;
                record.push((spec.decoder_target.ids.clone(), spec.loss_mask.clone()));
            }
            groups.entry(noisy.x_noise.ids.clone()).or_default().push(record);
            draws += 1;
        }
    }

    let mut reports = Vec::new();
    for (vi, variant) in variants.into_iter().enumerate() {
        let mut collision_pairs = 0u64;
        let mut ambiguous_pairs = 0u64;
        let mut mask_divergence_pairs = 0u64;
        for draws_in_group in groups.values() {
            let g = draws_in_group.len() as u64;
            if g < 2 {
                continue;
            }
            collision_pairs += pairs(g);
            // count by target string, then by (target, mask) within
            let mut by_target: HashMap<&[TokenId], HashMap<&[bool], u64>> = HashMap::new();
            for record in draws_in_group {
                let (target, mask) = &record[vi];
                *by_target
                    .entry(target.as_slice())
                    .or_default()
                    .entry(mask.as_slice())
                    .or_insert(0) += 1;
            }
            let mut same_target_pairs = 0u64;
            for masks in by_target.values() {
                let total: u64 = masks.values().sum();
                same_target_pairs += pairs(total);
                let same_mask: u64 = masks.values().map(|&c| pairs(c)).sum();
                mask_divergence_pairs += pairs(total) - same_mask;
            }
            ambiguous_pairs += pairs(g) - same_target_pairs;
        }
        let rate = if collision_pairs == 0 {
            0.0
        } else {
            ambiguous_pairs as f64 / collision_pairs as f64
        };
        let mask_divergence_rate = if collision_pairs == 0 {
            0.0
        } else {
            mask_divergence_pairs as f64 / collision_pairs as f64
        };
        reports.push(AmbiguityReport {
            variant,
            draws,
            collision_pairs,
            ambiguous_pairs,
            mask_divergence_pairs,
            rate,
            mask_divergence_rate,
        });
    }
    Ok(reports)
}

/// Build an all-PAD-aware "fake" one-hot logits tensor: at each position the
/// chosen id gets a large margin. Test and diagnostic helper.
pub fn one_hot_logits<E: Elem>(ids: &[TokenId], vocab_size: usize, margin: f64) -> Tensor<E> {
    let mut data = vec![E::zero(); ids.len() * vocab_size];
    for (i, &id) in ids.iter().enumerate() {
        data[i * vocab_size + id as usize] = E::from_f64(margin);
    }
    Tensor::from_vec(vec![ids.len(), vocab_size], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::masking::{sample_iid_mask, MaskPattern};
    use crate::model::MetroModel;
    use crate::tape::{backward, Tape};
    use crate::vocab::VocabMode;
    use rand::SeedableRng;

    /// Scorer that always predicts a fixed token per position.
    struct FixedAux {
        predictions: Vec<TokenId>,
        vocab_size: usize,
    }

    impl MlmScorer<f64> for FixedAux {
        fn mlm_logits(&self, _ctx: &mut FwdCtx<f64>, _masked: &TokenBatch) -> Result<Tensor<f64>> {
            Ok(one_hot_logits(&self.predictions, self.vocab_size, 50.0))
        }
    }

    fn table2_vocab() -> (Vocab, Vec<TokenId>) {
        let sentence = "Thank you for inviting me to your party last week";
        let corpus = vec![format!("{sentence} giving apple")];
        let vocab = Vocab::build(&corpus, VocabMode::Word, None, 4).unwrap();
        let seq = vocab.encode(sentence);
        (vocab, seq)
    }

    #[test]
    fn worked_example_noise_and_labels() {
        let (vocab, seq) = table2_vocab();
        let n = seq.len();
        let batch = TokenBatch::from_rows(&[seq.clone()], n);
        // mask "for", "inviting", "last"
        let mut flags = vec![false; n];
        for (i, word) in ["for", "inviting", "last"].iter().enumerate() {
            let _ = i;
            let id = vocab.token_id(word).unwrap();
            let pos = seq.iter().position(|&t| t == id).unwrap();
            flags[pos] = true;
        }
        let plan = MaskPlan {
            flags: flags.clone(),
            ratio: 0.3,
            pattern: MaskPattern::Iid,
        };
        // auxiliary predicts "for", "giving", "apple" at the masked slots
        let mut predictions = seq.clone();
        predictions[2] = vocab.token_id("for").unwrap();
        predictions[3] = vocab.token_id("giving").unwrap();
        predictions[8] = vocab.token_id("apple").unwrap();
        let aux = FixedAux {
            predictions,
            vocab_size: vocab.len(),
        };

        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (noisy, _) = build_noisy_batch(&tape, 0.0, &aux, &batch, &[plan], &vocab, 1.0, &mut rng).unwrap();

        assert_eq!(
            vocab.decode(&noisy.x_masked.ids),
            "Thank you [M] [M] me to your party [M] week"
        );
        assert_eq!(
            vocab.decode(&noisy.x_noise.ids),
            "Thank you for giving me to your party apple week"
        );
        // "for" was replaced by itself: label original; the other two differ
        assert!(noisy.label_is_original(2));
        assert!(noisy.replaced[3]);
        assert!(noisy.replaced[8]);
        for i in [0, 1, 4, 5, 6, 7, 9] {
            assert!(noisy.label_is_original(i), "unmasked position {i} is original");
        }
    }

    #[test]
    fn worked_example_target_variants() {
        let (vocab, seq) = table2_vocab();
        let n = seq.len();
        let batch = TokenBatch::from_rows(&[seq.clone()], n);
        let mut flags = vec![false; n];
        flags[2] = true;
        flags[3] = true;
        flags[8] = true;

        let masked_only = build_decoder_target(&batch, &flags, TargetVariant::MaskedOnly, true).unwrap();
        assert_eq!(vocab.decode(&masked_only.decoder_target.ids), "for inviting last");
        assert_eq!(masked_only.decoder_target.ids.len(), 3);
        assert_eq!(masked_only.loss_mask, vec![true; 3]);
        assert_eq!(masked_only.decoder_input.ids[0], BOS);

        let all_tokens = build_decoder_target(&batch, &flags, TargetVariant::AllTokens, false).unwrap();
        assert_eq!(
            vocab.decode(&all_tokens.decoder_target.ids),
            "Thank you for inviting me to your party last week"
        );
        assert_eq!(all_tokens.loss_mask, vec![true; n]);

        let masked_loss =
            build_decoder_target(&batch, &flags, TargetVariant::AllTokensMaskedLoss, false).unwrap();
        assert_eq!(masked_loss.decoder_target.ids, all_tokens.decoder_target.ids);
        let expected_mask: Vec<bool> = (0..n).map(|i| i == 2 || i == 3 || i == 8).collect();
        assert_eq!(masked_loss.loss_mask, expected_mask);

        // decoder input is the BOS-shifted target in every variant
        for spec in [&masked_only, &all_tokens, &masked_loss] {
            let t = &spec.decoder_target;
            let i = &spec.decoder_input;
            for r in 0..t.rows {
                let len = t.row_len(r);
                assert_eq!(i.row(r)[0], BOS);
                assert_eq!(&i.row(r)[1..len], &t.row(r)[..len - 1]);
            }
        }
    }

    #[test]
    fn masked_only_rejected_outside_diagnostic_mode() {
        let (_vocab, seq) = table2_vocab();
        let batch = TokenBatch::from_rows(&[seq.clone()], seq.len());
        let flags = vec![false; seq.len()];
        let err = build_decoder_target(&batch, &flags, TargetVariant::MaskedOnly, false).unwrap_err();
        assert!(err.to_string().contains("ill-formed"), "{err}");
    }

    #[test]
    fn no_masks_means_all_false_loss_mask_and_zero_loss() {
        let (vocab, seq) = table2_vocab();
        let n = seq.len();
        let batch = TokenBatch::from_rows(&[seq.clone()], n);
        let flags = vec![false; n];
        let spec = build_decoder_target(&batch, &flags, TargetVariant::AllTokensMaskedLoss, false).unwrap();
        assert!(spec.loss_mask.iter().all(|&m| !m));
        let tape = Tape::new();
        let logits = one_hot_logits::<f64>(&spec.decoder_target.ids, vocab.len(), 3.0);
        let loss =
            ops::softmax_cross_entropy(&tape, &logits, &spec.decoder_target.ids, &spec.loss_mask).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    fn micro_model(seed: u64) -> (MetroModel<f64>, Vocab, ModelConfig) {
        let docs: Vec<String> = (0..8)
            .map(|i| {
                (0..24)
                    .map(|j| format!("w{}", (i * 7 + j * 3) % 16))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let vocab = Vocab::build(&docs, VocabMode::Word, None, 4).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 32,
            enc_layers: 2,
            dec_layers: 2,
            aux_layers: 1,
            vocab_size: vocab.len(),
            max_abs_positions: 24,
            rel_buckets: 8,
            rel_max_distance: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MetroModel::new(&cfg, &mut rng).unwrap();
        (model, vocab, cfg)
    }

    fn random_seq(vocab: &Vocab, n: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        use rand::Rng;
        (0..n)
            .map(|_| rng.gen_range(vocab.reserved_len() as TokenId..vocab.len() as TokenId))
            .collect()
    }

    #[test]
    fn rtd_labels_match_elementwise_comparison_oracle() {
        let (model, vocab, _cfg) = micro_model(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let rows: Vec<Vec<TokenId>> = (0..3).map(|_| random_seq(&vocab, 12, &mut rng)).collect();
            let batch = TokenBatch::from_rows(&rows, 12);
            let plans: Vec<MaskPlan> = rows
                .iter()
                .map(|r| sample_iid_mask(r, &vocab, 0.2, &mut rng).unwrap())
                .collect();
            let tape = Tape::inference();
            let (noisy, _) =
                build_noisy_batch(&tape, 0.0, &model, &batch, &plans, &vocab, 1.0, &mut rng).unwrap();
            for i in 0..noisy.x_orig.len() {
                let expect = noisy.x_orig.ids[i] != noisy.x_noise.ids[i];
                assert_eq!(noisy.replaced[i], expect, "label oracle at {i}");
                if !noisy.flags[i] {
                    assert!(!noisy.replaced[i], "unmasked stays original at {i}");
                }
            }
        }
    }

    #[test]
    fn lambda_degeneracy_and_recomposition() {
        let (model, vocab, _cfg) = micro_model(33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let rows: Vec<Vec<TokenId>> = (0..2).map(|_| random_seq(&vocab, 10, &mut rng)).collect();
        let batch = TokenBatch::from_rows(&rows, 10);
        let plans: Vec<MaskPlan> = rows
            .iter()
            .map(|r| sample_iid_mask(r, &vocab, 0.2, &mut rng).unwrap())
            .collect();

        let losses = |lr: f64, lc: f64| {
            let tape = Tape::new();
            let mut ctx = FwdCtx::inference(&tape);
            let (noisy, aux_logits) =
                build_noisy_batch(&tape, 0.0, &model, &batch, &plans, &vocab, 1.0, &mut ChaCha8Rng::seed_from_u64(35))
                    .unwrap();
            let spec =
                build_decoder_target(&noisy.x_orig, &noisy.flags, TargetVariant::AllTokensMaskedLoss, false)
                    .unwrap();
            let h_enc = model.encoder_forward(&mut ctx, &noisy.x_noise).unwrap();
            let rtd_logits = model.rtd_head(&mut ctx, &h_enc).unwrap();
            let h_dec = model
                .decoder_forward(&mut ctx, &h_enc, &noisy.x_noise, &spec.decoder_input)
                .unwrap();
            let clm_logits = model.clm_head(&mut ctx, &h_dec).unwrap();
            compute_losses(&mut ctx, &noisy, &spec, &aux_logits, &rtd_logits, &clm_logits, lr, lc).unwrap()
        };

        let zeroed = losses(0.0, 0.0);
        assert_eq!(zeroed.combined_value, zeroed.l_mlm, "weights 0/0 leave exactly l_mlm");

        let weighted = losses(50.0, 1.0);
        let recomposed = weighted.l_mlm + 50.0 * weighted.l_rtd + 1.0 * weighted.l_clm;
        let rel = (weighted.combined_value - recomposed).abs() / recomposed.abs();
        assert!(rel < 1e-6, "recomposition rel err {rel}");
    }

    #[test]
    fn perfect_oracle_logits_vanish_all_losses() {
        let (_, vocab, _cfg) = micro_model(36);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let seq = random_seq(&vocab, 10, &mut rng);
        let batch = TokenBatch::from_rows(&[seq.clone()], 10);
        let plan = sample_iid_mask(&seq, &vocab, 0.2, &mut rng).unwrap();
        let flags = plan.flags.clone();

        // build a noisy batch by hand with one replacement
        let mut noise_ids = seq.clone();
        let masked_pos = plan.masked_positions();
        noise_ids[masked_pos[0]] = if noise_ids[masked_pos[0]] + 1 < vocab.len() as TokenId {
            noise_ids[masked_pos[0]] + 1
        } else {
            vocab.reserved_len() as TokenId
        };
        let replaced: Vec<bool> = seq.iter().zip(&noise_ids).map(|(&a, &b)| a != b).collect();
        let noisy = NoisyBatch {
            x_orig: batch.clone(),
            x_masked: batch.clone(),
            flags: flags.clone(),
            x_noise: TokenBatch {
                rows: 1,
                cols: 10,
                ids: noise_ids,
            },
            replaced: replaced.clone(),
        };
        let spec = build_decoder_target(&batch, &flags, TargetVariant::AllTokensMaskedLoss, false).unwrap();

        let aux_logits = one_hot_logits::<f64>(&seq, vocab.len(), 40.0);
        let rtd_data: Vec<f64> = replaced.iter().map(|&r| if r { 40.0 } else { -40.0 }).collect();
        let rtd_logits = Tensor::from_vec(vec![10], rtd_data).unwrap();
        let clm_logits = one_hot_logits::<f64>(&spec.decoder_target.ids, vocab.len(), 40.0);

        let tape = Tape::new();
        let mut ctx = FwdCtx::inference(&tape);
        let out = compute_losses(&mut ctx, &noisy, &spec, &aux_logits, &rtd_logits, &clm_logits, 50.0, 1.0)
            .unwrap();
        assert!(out.l_mlm < 1e-3 && out.l_rtd < 1e-3 && out.l_clm < 1e-3, "{:?}", (out.l_mlm, out.l_rtd, out.l_clm));
        assert!(out.rtd.recall_masked == 1.0 && out.rtd.precision == 1.0);
    }

    #[test]
    fn mlm_gradients_stay_in_auxiliary_and_shared_embedding() {
        let (model, vocab, _cfg) = micro_model(38);
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let seq = random_seq(&vocab, 12, &mut rng);
        let batch = TokenBatch::from_rows(&[seq.clone()], 12);
        let plan = sample_iid_mask(&seq, &vocab, 0.25, &mut rng).unwrap();

        let tape = Tape::new();
        let (noisy, aux_logits) =
            build_noisy_batch(&tape, 0.0, &model, &batch, &[plan], &vocab, 1.0, &mut rng).unwrap();
        let l_mlm =
            ops::softmax_cross_entropy(&tape, &aux_logits, &noisy.x_orig.ids, &noisy.flags).unwrap();
        let grads = backward(&tape, &l_mlm).unwrap();
        for p in model.params().iter() {
            let touched = grads.of(p).map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false);
            let allowed = p.name().starts_with("aux.")
                || p.name() == "embed.tok"
                || p.name() == "head.mlm.bias";
            if touched {
                assert!(allowed, "{} must not receive MLM gradient", p.name());
            }
        }
    }

    #[test]
    fn clm_gradients_reach_encoder_and_decoder() {
        let (model, vocab, _cfg) = micro_model(40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let seq = random_seq(&vocab, 12, &mut rng);
        let batch = TokenBatch::from_rows(&[seq.clone()], 12);
        let plan = sample_iid_mask(&seq, &vocab, 0.25, &mut rng).unwrap();

        let tape = Tape::new();
        let mut ctx = FwdCtx::inference(&tape);
        let (noisy, _) = build_noisy_batch(&tape, 0.0, &model, &batch, &[plan], &vocab, 1.0, &mut rng).unwrap();
        let spec =
            build_decoder_target(&noisy.x_orig, &noisy.flags, TargetVariant::AllTokensMaskedLoss, false)
                .unwrap();
        let h_enc = model.encoder_forward(&mut ctx, &noisy.x_noise).unwrap();
        let h_dec = model
            .decoder_forward(&mut ctx, &h_enc, &noisy.x_noise, &spec.decoder_input)
            .unwrap();
        let clm_logits = model.clm_head(&mut ctx, &h_dec).unwrap();
        let l_clm = ops::softmax_cross_entropy(
            &tape,
            &clm_logits,
            &spec.decoder_target.ids,
            &spec.loss_mask,
        )
        .unwrap();
        let grads = backward(&tape, &l_clm).unwrap();
        let touched = |prefix: &str| {
            model.params().iter().any(|p| {
                p.name().starts_with(prefix)
                    && grads.of(p).map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false)
            })
        };
        assert!(touched("enc."), "CLM loss reaches the encoder");
        assert!(touched("dec."), "CLM loss reaches the decoder");
        assert!(
            !touched("head.rtd."),
            "CLM loss must not touch the RTD head"
        );
    }

    #[test]
    fn ambiguity_detected_for_masked_only_and_absent_for_full_targets() {
        // the collision corpus: two plans with different positions can
        // produce the same corrupted input but different masked-only targets
        let docs = vec!["1 2 3 4 5".to_string(), "6 6 6 6".to_string()];
        let vocab = Vocab::build(&docs, VocabMode::Word, None, 2).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            aux_layers: 1,
            vocab_size: vocab.len(),
            max_abs_positions: 8,
            rel_buckets: 8,
            rel_max_distance: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = MetroModel::<f64>::new(&cfg, &mut rng).unwrap();
        let seqs = vec![vocab.encode("1 2 3 4 5")];
        let reports =
            detect_target_ambiguity(&model, &seqs, &vocab, 0.4, 4000, 1.0, &mut rng).unwrap();
        let by_variant = |v: TargetVariant| reports.iter().find(|r| r.variant == v).unwrap();
        let masked_only = by_variant(TargetVariant::MaskedOnly);
        assert!(masked_only.collision_pairs > 0, "collisions must occur");
        assert!(masked_only.rate > 0.0, "masked-only is ambiguous: {masked_only:?}");
        assert_eq!(by_variant(TargetVariant::AllTokens).rate, 0.0);
        let masked_loss = by_variant(TargetVariant::AllTokensMaskedLoss);
        assert_eq!(masked_loss.rate, 0.0, "target strings never differ");
        assert!(
            masked_loss.mask_divergence_pairs > 0,
            "loss masks do diverge; reported separately"
        );
    }

    #[test]
    fn zero_masking_means_zero_ambiguity() {
        let docs = vec!["1 2 3 4 5".to_string()];
        let vocab = Vocab::build(&docs, VocabMode::Word, None, 2).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            aux_layers: 1,
            vocab_size: vocab.len(),
            max_abs_positions: 8,
            rel_buckets: 8,
            rel_max_distance: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = MetroModel::<f64>::new(&cfg, &mut rng).unwrap();
        let seqs = vec![vocab.encode("1 2 3 4 5")];
        let reports = detect_target_ambiguity(&model, &seqs, &vocab, 0.0, 50, 1.0, &mut rng).unwrap();
        for r in reports {
            assert_eq!(r.rate, 0.0);
            assert!(r.collision_pairs > 0, "all draws collide trivially");
        }
    }

    #[test]
    fn single_sgd_step_decreases_combined_loss_across_seeds() {
        // smoke property: full-batch gradient step with a small lr
        let mut passing = 0;
        for seed in 0..20u64 {
            let (model, vocab, _cfg) = micro_model(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let rows: Vec<Vec<TokenId>> = (0..4).map(|_| random_seq(&vocab, 12, &mut rng)).collect();
            let batch = TokenBatch::from_rows(&rows, 12);
            let plans: Vec<MaskPlan> = rows
                .iter()
                .map(|r| sample_iid_mask(r, &vocab, 0.2, &mut rng).unwrap())
                .collect();
            // freeze the corruption so both evaluations see the same batch
            let frozen = {
                let tape = Tape::inference();
                let (noisy, _) =
                    build_noisy_batch(&tape, 0.0, &model, &batch, &plans, &vocab, 1.0, &mut rng).unwrap();
                noisy
            };
            let spec =
                build_decoder_target(&frozen.x_orig, &frozen.flags, TargetVariant::AllTokensMaskedLoss, false)
                    .unwrap();
            let eval = |record: bool| {
                let tape = if record { Tape::new() } else { Tape::inference() };
                let mut ctx = FwdCtx::inference(&tape);
                let aux_logits = model.mlm_logits(&mut ctx, &frozen.x_masked).unwrap();
                let h_enc = model.encoder_forward(&mut ctx, &frozen.x_noise).unwrap();
                let rtd_logits = model.rtd_head(&mut ctx, &h_enc).unwrap();
                let h_dec = model
                    .decoder_forward(&mut ctx, &h_enc, &frozen.x_noise, &spec.decoder_input)
                    .unwrap();
                let clm_logits = model.clm_head(&mut ctx, &h_dec).unwrap();
                let out = compute_losses(
                    &mut ctx, &frozen, &spec, &aux_logits, &rtd_logits, &clm_logits, 50.0, 1.0,
                )
                .unwrap();
                if record {
                    let grads = backward(&tape, &out.combined).unwrap();
                    for p in model.params().iter() {
                        if let Some(g) = grads.of(p) {
                            let g = g.to_vec();
                            p.update(|d| {
                                for (x, gx) in d.iter_mut().zip(&g) {
                                    *x -= 1e-2 * gx;
                                }
                            });
                        }
                    }
                }
                out.combined_value
            };
            let before = eval(true);
            let after = eval(false);
            if after < before {
                passing += 1;
            }
        }
        assert!(passing >= 18, "only {passing}/20 seeds improved");
    }
}
