use super::*;
use crate::config::ModelConfig;
use crate::model::MetroModel;
use crate::vocab::{Vocab, VocabMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (MetroModel<f64>, Vocab) {
    let doc = (0..20).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    let vocab = Vocab::build(&[doc], VocabMode::Word, None, 2).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 24,
        enc_layers: 2,
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

fn sample_pairs(vocab: &Vocab, n_pairs: usize, len: usize, seed: u64) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let row: Vec<TokenId> = (0..len)
                .map(|_| rng.gen_range(vocab.reserved_len() as TokenId..vocab.len() as TokenId))
                .collect();
            (row.clone(), row)
        })
        .collect()
}

#[test]
fn constructed_dead_neuron_is_reported_under_activated() {
    let (model, vocab) = setup(1);
    // force neuron 5 of the first encoder FFN to never fire
    let d_ff = 24;
    model.params().get("enc.l0.ffn.w1.w").unwrap().update(|w| {
        // column 5 of [d, d_ff]
        for r in 0..8 {
            w[r * d_ff + 5] = 0.0;
        }
    });
    model.params().get("enc.l0.ffn.w1.b").unwrap().update(|b| b[5] = -1.0);

    let sample = sample_pairs(&vocab, 4, 10, 2);
    let report = census_activations(&model, &sample, DEFAULT_ACTIVATION_THRESHOLD).unwrap();
    let layer = report.layers.iter().find(|l| l.tag == "enc.l0").unwrap();
    assert_eq!(layer.frequencies[5], 0.0, "dead neuron never fires");
    assert!(report.under_activated >= 1);
}

#[test]
fn census_matches_brute_force_recount_exactly() {
    let (model, vocab) = setup(3);
    let sample = sample_pairs(&vocab, 10, 10, 4); // 100 tokens
    let (report, probe) = census_with_capture(&model, &sample, DEFAULT_ACTIVATION_THRESHOLD).unwrap();

    // naive double-loop recount over the captured raw activations
    for layer in &report.layers {
        let captured = probe.full.get(&layer.tag).unwrap();
        let width = layer.frequencies.len();
        let mut active = vec![0u64; width];
        let mut tokens = 0u64;
        for block in captured {
            let rows = block.len() / width;
            for r in 0..rows {
                tokens += 1;
                for j in 0..width {
                    if block[r * width + j] > 0.0 {
                        active[j] += 1;
                    }
                }
            }
        }
        assert_eq!(tokens, layer.tokens, "{}", layer.tag);
        for j in 0..width {
            let freq = active[j] as f64 / tokens as f64;
            assert_eq!(freq, layer.frequencies[j], "{} neuron {j}", layer.tag);
        }
    }
}

#[test]
fn threshold_zero_counts_nothing_when_every_neuron_fires() {
    let (model, vocab) = setup(5);
    // positive bias, zero weights: every neuron fires on every token
    for name in model.params().iter().map(|p| p.name().to_string()).collect::<Vec<_>>() {
        if name.ends_with(".ffn.w1.w") {
            model.params().get(&name).unwrap().update(|w| w.iter_mut().for_each(|x| *x = 0.0));
        }
        if name.ends_with(".ffn.w1.b") {
            model.params().get(&name).unwrap().update(|b| b.iter_mut().for_each(|x| *x = 1.0));
        }
    }
    let sample = sample_pairs(&vocab, 3, 8, 6);
    let report = census_activations(&model, &sample, 0.0).unwrap();
    for layer in &report.layers {
        for &f in &layer.frequencies {
            assert_eq!(f, 1.0);
        }
    }
    assert_eq!(report.under_activated, 0);
}

#[test]
fn census_does_not_mutate_parameters() {
    let (model, vocab) = setup(7);
    let before: Vec<Vec<u64>> = model
        .params()
        .iter()
        .map(|p| p.value().iter().map(|x| x.to_bits()).collect())
        .collect();
    let sample = sample_pairs(&vocab, 4, 10, 8);
    census_activations(&model, &sample, DEFAULT_ACTIVATION_THRESHOLD).unwrap();
    parameter_sensitivity(&model, &sample, SensitivityFormula::TaylorZeroOut).unwrap();
    let after: Vec<Vec<u64>> = model
        .params()
        .iter()
        .map(|p| p.value().iter().map(|x| x.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn zero_parameter_has_zero_sensitivity() {
    let (model, vocab) = setup(9);
    model.params().get("enc.l0.attn.wq.w").unwrap().update(|w| w[3] = 0.0);
    let sample = sample_pairs(&vocab, 4, 10, 10);
    let report = parameter_sensitivity(&model, &sample, SensitivityFormula::TaylorZeroOut).unwrap();
    assert_eq!(report.values["enc.l0.attn.wq.w"][3], 0.0);
}

#[test]
fn sensitivity_formula_is_bilinear_in_theta_for_fixed_gradient() {
    let g = -0.37;
    let base = sensitivity_value(SensitivityFormula::TaylorZeroOut, 0.8, g, 0.0);
    for scale in [0.5, 0.25, 2.0] {
        let scaled = sensitivity_value(SensitivityFormula::TaylorZeroOut, 0.8 * scale, g, 0.0);
        assert!((scaled - base * scale).abs() < 1e-15);
    }
}

#[test]
fn histogram_counts_sum_to_parameter_count() {
    let (model, vocab) = setup(11);
    let sample = sample_pairs(&vocab, 4, 10, 12);
    let report = parameter_sensitivity(&model, &sample, SensitivityFormula::TaylorZeroOut).unwrap();
    assert_eq!(report.histogram.total() as usize, model.params().total_scalars());
    assert!(report.global.count == model.params().total_scalars());
    for vals in report.values.values() {
        assert!(vals.iter().all(|&v| v >= 0.0), "sensitivities are magnitudes");
    }
}

#[test]
fn both_formulas_are_available_and_differ() {
    let (model, vocab) = setup(13);
    let sample = sample_pairs(&vocab, 4, 10, 14);
    let taylor = parameter_sensitivity(&model, &sample, SensitivityFormula::TaylorZeroOut).unwrap();
    let printed = parameter_sensitivity(&model, &sample, SensitivityFormula::PaperPrinted).unwrap();
    assert_ne!(
        taylor.values["enc.l0.attn.wq.w"], printed.values["enc.l0.attn.wq.w"],
        "the two published forms are distinct quantities"
    );
}

#[test]
fn zeroing_an_already_zero_parameter_changes_nothing() {
    let (model, vocab) = setup(15);
    model.params().get("enc.l0.attn.wq.w").unwrap().update(|w| w[0] = 0.0);
    let sample = sample_pairs(&vocab, 3, 8, 16);
    let deltas = zero_out_oracle(&model, &[("enc.l0.attn.wq.w".into(), 0)], |m| {
        seq2seq_loss(m, &sample)
    })
    .unwrap();
    assert_eq!(deltas[0], 0.0);
}

#[test]
fn zeroing_the_rtd_output_weight_matches_direct_computation() {
    let (model, vocab) = setup(17);
    let sample = sample_pairs(&vocab, 2, 8, 18);
    let batch = crate::data::TokenBatch::from_rows(
        &sample.iter().map(|(i, _)| i.clone()).collect::<Vec<_>>(),
        8,
    );
    let labels = vec![false; batch.len()];
    let mask = vec![true; batch.len()];

    let rtd_loss = |m: &MetroModel<f64>| -> crate::error::Result<f64> {
        let tape = Tape::inference();
        let mut ctx = FwdCtx::inference(&tape);
        let h = m.encoder_forward(&mut ctx, &batch)?;
        let logits = m.rtd_head(&mut ctx, &h)?;
        Ok(ops::bce_with_logits(&tape, &logits, &labels, &mask)?.item()?)
    };

    let base = rtd_loss(&model).unwrap();
    // zero the whole final projection: logits collapse to the output bias
    let w = model.params().get("head.rtd.out.w").unwrap();
    let saved = w.value().to_vec();
    w.update(|d| d.iter_mut().for_each(|x| *x = 0.0));
    let collapsed = rtd_loss(&model).unwrap();
    w.set_value(saved);

    let b = model.params().get("head.rtd.out.b").unwrap().value()[0];
    // direct binary cross entropy at constant logit b with all-false labels
    let expect = b.max(0.0) - 0.0 + (-b.abs()).exp().ln_1p();
    assert!((collapsed - expect).abs() < 1e-12, "{collapsed} vs {expect}");
    assert!((rtd_loss(&model).unwrap() - base).abs() == 0.0, "restored");
}

#[test]
fn first_order_sensitivity_ranks_like_exact_zero_out() {
    let (model, vocab) = setup(19);
    let sample = sample_pairs(&vocab, 6, 10, 20);
    // a few steps of training so gradients are not at a random saddle
    for _ in 0..20 {
        let (_, grads) = seq2seq_loss_and_grads(&model, &sample).unwrap();
        for p in model.params().iter() {
            if let Some(g) = grads.of(p) {
                let g = g.to_vec();
                p.update(|d| {
                    for (x, gx) in d.iter_mut().zip(&g) {
                        *x -= 5e-2 * gx;
                    }
                });
            }
        }
    }
    let report = parameter_sensitivity(&model, &sample, SensitivityFormula::TaylorZeroOut).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut entries = Vec::new();
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| !p.name().starts_with("aux.") && !p.name().starts_with("head.rtd."))
        .map(|p| p.name().to_string())
        .collect();
    while entries.len() < 200 {
        let name = names[rng.gen_range(0..names.len())].clone();
        let numel = model.params().get(&name).unwrap().numel();
        entries.push((name, rng.gen_range(0..numel)));
    }
    let exact = zero_out_oracle(&model, &entries, |m| seq2seq_loss(m, &sample)).unwrap();
    let approx: Vec<f64> = entries
        .iter()
        .map(|(name, idx)| report.values[name][*idx])
        .collect();
    let rho = spearman(&approx, &exact);
    assert!(rho >= 0.9, "Spearman {rho}");
}

#[test]
fn taylor_error_shrinks_quadratically_in_theta() {
    let (model, vocab) = setup(23);
    let sample = sample_pairs(&vocab, 4, 8, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let names: Vec<String> = model.params().iter().map(|p| p.name().to_string()).collect();
    let picks: Vec<(String, usize)> = (0..10)
        .map(|_| {
            let name = names[rng.gen_range(0..names.len())].clone();
            let numel = model.params().get(&name).unwrap().numel();
            (name, rng.gen_range(0..numel))
        })
        .collect();

    let err_at = |name: &str, idx: usize, theta: f64| -> f64 {
        let p = model.params().get(name).unwrap();
        let original = p.value()[idx];
        p.update(|d| d[idx] = theta);
        let (_, grads) = seq2seq_loss_and_grads(&model, &sample).unwrap();
        let g = grads.of(p).map(|g| g[idx]).unwrap_or(0.0);
        let approx = (theta * g).abs();
        let exact = zero_out_oracle(&model, &[(name.to_string(), idx)], |m| seq2seq_loss(m, &sample))
            .unwrap()[0];
        p.update(|d| d[idx] = original);
        (approx - exact).abs()
    };

    // plant a sizable value so the curvature term dominates; the remainder
    // C * theta^2 should then fall ~4x per halving (slack 2x)
    let theta = 0.4;
    let mut passing = 0;
    for (name, idx) in &picks {
        let e1 = err_at(name, *idx, theta);
        let c = (e1 / (theta * theta)).max(1e-9);
        let e_half = err_at(name, *idx, theta / 2.0);
        let e_quarter = err_at(name, *idx, theta / 4.0);
        let ok_half = e_half <= 2.0 * c * (theta / 2.0).powi(2) + 1e-9;
        let ok_quarter = e_quarter <= 2.0 * c * (theta / 4.0).powi(2) + 1e-9;
        if ok_half && ok_quarter {
            passing += 1;
        }
    }
    assert!(passing >= 8, "quadratic remainder scaling held for {passing}/10 parameters");
}

#[test]
fn compare_runs_table_deltas() {
    let series_a = vec![
        AnalysisSnapshot {
            label: "step500".into(),
            under_activated_pct: 4.0,
            sensitivity_var: 0.02,
        },
        AnalysisSnapshot {
            label: "step1000".into(),
            under_activated_pct: 6.0,
            sensitivity_var: 0.03,
        },
    ];
    // identical series: all deltas zero
    let same = compare_runs(&series_a, &series_a).unwrap();
    for line in same.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "0");
        assert_eq!(cols[6], "0");
    }
    // hand-built values land in the right cells
    let series_b = vec![
        AnalysisSnapshot {
            label: "step500".into(),
            under_activated_pct: 2.0,
            sensitivity_var: 0.01,
        },
        AnalysisSnapshot {
            label: "step1000".into(),
            under_activated_pct: 3.0,
            sensitivity_var: 0.015,
        },
    ];
    let table = compare_runs(&series_a, &series_b).unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row, vec!["step500", "4", "2", "-2", "0.02", "0.01", "-0.01"]);

    // mismatched labels are a comparison error
    let mut wrong = series_b.clone();
    wrong[1].label = "other".into();
    assert!(compare_runs(&series_a, &wrong).is_err());
}
