//! Rank-classification inference: teacher-forced choice scoring, argmax
//! prediction, per-task/per-template accuracy, and greedy decoding for
//! exact-match checks.

use std::collections::BTreeMap;

use crate::data::TokenBatch;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::{FwdCtx, MetroModel};
use crate::tape::Tape;
use crate::tasks::PromptInstance;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab, BOS, EOS};

/// Row-wise log-softmax probabilities picked at target ids.
fn log_probs_at<E: Elem>(logits: &Tensor<E>, targets: &[TokenId]) -> Vec<f64> {
    let vocab = *logits.shape().last().unwrap();
    let data = logits.data();
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &data[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let denom: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
            (row[t as usize].to_f64() - max) - denom.ln()
        })
        .collect()
}

/// Sum of teacher-forced token log-probabilities of `choice_ids` given the
/// encoder input. No length normalization: longer continuations pay for
/// every extra token.
pub fn score_choice_ids<E: Elem>(
    model: &MetroModel<E>,
    input_ids: &[TokenId],
    choice_ids: &[TokenId],
) -> Result<f64> {
    if choice_ids.is_empty() {
        return Err(Error::Contract("cannot score an empty choice".into()));
    }
    if input_ids.is_empty() {
        return Err(Error::Contract("cannot score against an empty input".into()));
    }
    let tape = Tape::inference();
    let mut ctx = FwdCtx::inference(&tape);
    let enc_batch = TokenBatch::from_rows(std::slice::from_ref(&input_ids.to_vec()), input_ids.len());
    let mut dec_ids = Vec::with_capacity(choice_ids.len());
    dec_ids.push(BOS);
    dec_ids.extend_from_slice(&choice_ids[..choice_ids.len() - 1]);
    let dec_batch = TokenBatch::from_rows(&[dec_ids], choice_ids.len());
    let h_enc = model.encoder_forward(&mut ctx, &enc_batch)?;
    let h_dec = model.decoder_forward(&mut ctx, &h_enc, &enc_batch, &dec_batch)?;
    let logits = model.clm_head(&mut ctx, &h_dec)?;
    Ok(log_probs_at(&logits, choice_ids).iter().sum())
}

pub fn score_choice<E: Elem>(
    model: &MetroModel<E>,
    vocab: &Vocab,
    input_text: &str,
    choice_text: &str,
) -> Result<f64> {
    let choice_ids = vocab.encode(choice_text);
    if choice_ids.is_empty() {
        return Err(Error::Contract(format!("choice {choice_text:?} has no tokens")));
    }
    score_choice_ids(model, &vocab.encode(input_text), &choice_ids)
}

/// Highest-scoring choice index; ties break to the lowest index.
pub fn rank_classify<E: Elem>(
    model: &MetroModel<E>,
    vocab: &Vocab,
    instance: &PromptInstance,
) -> Result<usize> {
    instance.validate()?;
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, choice) in instance.choices.iter().enumerate() {
        let s = score_choice(model, vocab, &instance.input, choice)?;
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct TemplateScore {
    pub template_id: String,
    pub correct: usize,
    pub total: usize,
}

impl TemplateScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskReport {
    pub task: String,
    pub templates: Vec<TemplateScore>,
    /// Mean of template accuracies (no template selection).
    pub score: f64,
}

/// Accuracy per (task, template) and per task averaged over its templates.
pub fn evaluate_mixture<E: Elem>(
    model: &MetroModel<E>,
    vocab: &Vocab,
    tasks: &[(String, Vec<PromptInstance>)],
) -> Result<Vec<TaskReport>> {
    let mut reports = Vec::new();
    for (task, instances) in tasks {
        let mut by_template: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for inst in instances {
            let pred = rank_classify(model, vocab, inst)?;
            let slot = by_template.entry(inst.template_id.clone()).or_insert((0, 0));
            slot.1 += 1;
            if pred == inst.answer {
                slot.0 += 1;
            }
        }
        let templates: Vec<TemplateScore> = by_template
            .into_iter()
            .map(|(template_id, (correct, total))| TemplateScore {
                template_id,
                correct,
                total,
            })
            .collect();
        let score = if templates.is_empty() {
            0.0
        } else {
            templates.iter().map(|t| t.accuracy()).sum::<f64>() / templates.len() as f64
        };
        reports.push(TaskReport {
            task: task.clone(),
            templates,
            score,
        });
    }
    Ok(reports)
}

/// Greedy argmax decoding, stopping at EOS or `max_len` tokens.
pub fn greedy_decode<E: Elem>(
    model: &MetroModel<E>,
    input_ids: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let tape = Tape::inference();
    let mut ctx = FwdCtx::inference(&tape);
    let enc_batch = TokenBatch::from_rows(std::slice::from_ref(&input_ids.to_vec()), input_ids.len());
    let h_enc = model.encoder_forward(&mut ctx, &enc_batch)?;
    let mut out: Vec<TokenId> = Vec::new();
    for _ in 0..max_len {
        let mut dec_ids = Vec::with_capacity(out.len() + 1);
        dec_ids.push(BOS);
        dec_ids.extend_from_slice(&out);
        let width = dec_ids.len();
        let dec_batch = TokenBatch::from_rows(&[dec_ids], width);
        let tape = Tape::inference();
        let mut step_ctx = FwdCtx::inference(&tape);
        // decoder re-runs over the whole prefix each step; no cache needed
        // at this scale
        let h_dec = model.decoder_forward(&mut step_ctx, &h_enc, &enc_batch, &dec_batch)?;
        let logits = model.clm_head(&mut step_ctx, &h_dec)?;
        let v = *logits.shape().last().unwrap();
        let row = &logits.data()[(width - 1) * v..width * v];
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (i, &z) in row.iter().enumerate() {
            let z = z.to_f64();
            if z > best_val {
                best_val = z;
                best = i;
            }
        }
        if best as TokenId == EOS {
            break;
        }
        out.push(best as TokenId);
    }
    Ok(out)
}

/// Exact-match rate of greedy decodes against reference targets.
pub fn exact_match<E: Elem>(
    model: &MetroModel<E>,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    max_len: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no held-out pairs to evaluate".into()));
    }
    let mut hits = 0usize;
    for (input, target) in pairs {
        if greedy_decode(model, input, max_len)? == *target {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tasks;
    use crate::vocab::VocabMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (MetroModel<f64>, Vocab) {
        let doc = (0..24).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let vocab = Vocab::build(&[doc], VocabMode::Word, None, 2).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            aux_layers: 1,
            vocab_size: vocab.len(),
            max_abs_positions: 32,
            rel_buckets: 8,
            rel_max_distance: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (MetroModel::new(&cfg, &mut rng).unwrap(), vocab)
    }

    /// Zero every parameter and plant a fixed CLM bias: the decoder output
    /// collapses to zeros, so choice scores reduce to a hand-computable
    /// constant categorical.
    fn bias_only_model(seed: u64, favored: &str, boost: f64) -> (MetroModel<f64>, Vocab) {
        let (model, vocab) = setup(seed);
        for p in model.params().iter() {
            p.update(|d| d.iter_mut().for_each(|x| *x = 0.0));
        }
        let id = vocab.token_id(favored).unwrap() as usize;
        model.params().get("head.clm.bias").unwrap().update(|d| d[id] = boost);
        (model, vocab)
    }

    #[test]
    fn duplicate_choice_texts_score_identically_and_tie_to_lowest() {
        let (model, vocab) = setup(1);
        let a = score_choice(&model, &vocab, "w0 w1", "w2 w3").unwrap();
        let b = score_choice(&model, &vocab, "w0 w1", "w2 w3").unwrap();
        assert_eq!(a, b);
        let inst = PromptInstance {
            template_id: "t".into(),
            input: "w0 w1".into(),
            choices: vec!["w2 w3".into(), "w2  w3".into()], // same tokens, different text
            answer: 0,
        };
        assert_eq!(rank_classify(&model, &vocab, &inst).unwrap(), 0);
    }

    #[test]
    fn score_decomposes_by_the_chain_rule() {
        let (model, vocab) = setup(2);
        let input = vocab.encode("w0 w1 w2");
        let a = vocab.token_id("w5").unwrap();
        let b = vocab.token_id("w9").unwrap();
        let s_a = score_choice_ids(&model, &input, &[a]).unwrap();
        let s_ab = score_choice_ids(&model, &input, &[a, b]).unwrap();

        // independent second term: manual forward over [BOS, a]
        let tape = Tape::inference();
        let mut ctx = FwdCtx::inference(&tape);
        let enc = TokenBatch::from_rows(&[input.clone()], input.len());
        let dec = TokenBatch::from_rows(&[vec![BOS, a]], 2);
        let h_enc = model.encoder_forward(&mut ctx, &enc).unwrap();
        let h_dec = model.decoder_forward(&mut ctx, &h_enc, &enc, &dec).unwrap();
        let logits = model.clm_head(&mut ctx, &h_dec).unwrap();
        let lp = log_probs_at(&logits, &[a, b]);
        assert!((s_ab - (s_a + lp[1])).abs() < 1e-9);
    }

    #[test]
    fn hand_set_bias_gives_known_categorical_scores() {
        let (model, vocab) = bias_only_model(3, "w4", 2.0);
        // every position scores log softmax(bias); compute by hand
        let v = vocab.len();
        let id4 = vocab.token_id("w4").unwrap() as usize;
        let denom = (v - 1) as f64 * 1.0f64.exp().powi(0) + 2.0f64.exp();
        let lp_w4 = 2.0 - denom.ln();
        let lp_other = 0.0 - denom.ln();

        let got = score_choice(&model, &vocab, "w0", "w4").unwrap();
        assert!((got - lp_w4).abs() < 1e-6, "{got} vs {lp_w4}");
        let got2 = score_choice(&model, &vocab, "w0", "w7 w4").unwrap();
        assert!((got2 - (lp_other + lp_w4)).abs() < 1e-6);
        let _ = id4;
    }

    #[test]
    fn longer_choices_pay_for_every_token() {
        let (model, vocab) = setup(4);
        let base = score_choice(&model, &vocab, "w0 w1", "w2").unwrap();
        let longer = score_choice(&model, &vocab, "w0 w1", "w2 w3 w4").unwrap();
        assert!(longer < base, "sum of log probs penalizes length: {longer} vs {base}");
    }

    #[test]
    fn empty_choice_is_a_contract_error() {
        let (model, vocab) = setup(5);
        assert!(score_choice(&model, &vocab, "w0", "").is_err());
    }

    #[test]
    fn prediction_matches_enumeration_oracle() {
        let (model, vocab) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n_choices = rng.gen_range(2..5);
            let mut choices = Vec::new();
            while choices.len() < n_choices {
                let c = format!("w{} w{}", rng.gen_range(0..24), rng.gen_range(0..24));
                if !choices.contains(&c) {
                    choices.push(c);
                }
            }
            let inst = PromptInstance {
                template_id: "t".into(),
                input: format!("w{} w{}", rng.gen_range(0..24), rng.gen_range(0..24)),
                choices: choices.clone(),
                answer: 0,
            };
            let pred = rank_classify(&model, &vocab, &inst).unwrap();
            // independent argmax over re-scored choices
            let scores: Vec<f64> = choices
                .iter()
                .map(|c| score_choice(&model, &vocab, &inst.input, c).unwrap())
                .collect();
            let mut oracle = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[oracle] {
                    oracle = i;
                }
            }
            assert_eq!(pred, oracle);
        }
    }

    #[test]
    fn adding_a_strictly_worse_choice_never_changes_the_prediction() {
        let (model, vocab) = bias_only_model(8, "w4", 3.0);
        let inst = PromptInstance {
            template_id: "t".into(),
            input: "w0".into(),
            choices: vec!["w4".into(), "w5".into()],
            answer: 0,
        };
        assert_eq!(rank_classify(&model, &vocab, &inst).unwrap(), 0);
        let worse = PromptInstance {
            template_id: "t".into(),
            input: "w0".into(),
            // longer choice of non-favored tokens scores strictly lower
            choices: vec!["w4".into(), "w5".into(), "w6 w7 w8".into()],
            answer: 0,
        };
        assert_eq!(rank_classify(&model, &vocab, &worse).unwrap(), 0);
    }

    #[test]
    fn oracle_model_scores_perfectly_and_template_mean_is_exact() {
        let (model, vocab) = bias_only_model(9, "w4", 6.0);
        // template A: correct answer is always the favored word
        let t_a: Vec<PromptInstance> = (0..10)
            .map(|i| {
                let (choices, answer) = if i % 2 == 0 {
                    (vec!["w4".to_string(), format!("w{}", 6 + (i % 5))], 0)
                } else {
                    (vec![format!("w{}", 6 + (i % 5)), "w4".to_string()], 1)
                };
                PromptInstance::new("ta", format!("q {i}"), choices, answer).unwrap()
            })
            .collect();
        // template B: correct answer is never the favored word
        let t_b: Vec<PromptInstance> = (0..10)
            .map(|i| {
                PromptInstance::new(
                    "tb",
                    format!("q {i}"),
                    vec![format!("w{}", 6 + (i % 5)), "w4".to_string()],
                    0,
                )
                .unwrap()
            })
            .collect();
        let mixture = vec![
            ("pure".to_string(), t_a.clone()),
            ("split".to_string(), t_a.iter().cloned().chain(t_b).collect()),
        ];
        let reports = evaluate_mixture(&model, &vocab, &mixture).unwrap();
        assert_eq!(reports[0].score, 1.0, "oracle model is perfect on its template");
        // two templates at 1.0 and 0.0 average to 0.5
        assert_eq!(reports[1].templates.len(), 2);
        assert_eq!(reports[1].score, 0.5);
    }

    #[test]
    fn chance_level_on_balanced_two_choice_task() {
        let (model, vocab) = setup(10);
        let items = tasks::gen_nli_task(&vocab, 1000, 11);
        let mixture = vec![("nli".to_string(), items)];
        let reports = evaluate_mixture(&model, &vocab, &mixture).unwrap();
        let total_correct: usize = reports[0].templates.iter().map(|t| t.correct).sum();
        let acc = total_correct as f64 / 1000.0;
        assert!((acc - 0.5).abs() < 0.05, "random model accuracy {acc}");
    }

    #[test]
    fn greedy_decode_stops_at_eos_and_emits_argmax() {
        let (model, vocab) = bias_only_model(12, "w4", 5.0);
        let input = vocab.encode("w0 w1");
        let out = greedy_decode(&model, &input, 4).unwrap();
        let w4 = vocab.token_id("w4").unwrap();
        assert_eq!(out, vec![w4; 4], "argmax token repeats up to max_len");

        // favoring EOS halts immediately
        model.params().get("head.clm.bias").unwrap().update(|d| {
            d[w4 as usize] = 0.0;
            d[EOS as usize] = 5.0;
        });
        let out = greedy_decode(&model, &input, 4).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn whole_suite_evaluation_is_deterministic() {
        let (model, vocab) = setup(13);
        let mixture = tasks::builtin_suite(&vocab, 20, 14);
        let a = evaluate_mixture(&model, &vocab, &mixture).unwrap();
        let b = evaluate_mixture(&model, &vocab, &mixture).unwrap();
        let render = |r: &[TaskReport]| {
            r.iter()
                .map(|t| format!("{} {} {:?}", t.task, t.score, t.templates.iter().map(|x| (x.correct, x.total)).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
                .join("; ")
        };
        assert_eq!(render(&a), render(&b));
    }
}
