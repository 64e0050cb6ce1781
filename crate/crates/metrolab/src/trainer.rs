//! Training loops: joint denoising pretraining, the span-corruption
//! baseline, and seq2seq finetuning — with warmup/decay scheduling, norm
//! clipping, periodic checkpoints, a metrics CSV, and a divergence detector.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Objective, RtdLocation, RunConfig, T5Target};
use crate::data::{pack_corpus, BatchIter, TokenBatch};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::masking::{
    apply_span_corruption, sample_iid_mask, sample_span_mask, MaskPattern, MaskPlan,
};
use crate::model::checkpoint::{self, TrainState};
use crate::model::{FwdCtx, MetroModel};
use crate::objectives::{build_decoder_target, build_noisy_batch, compute_losses};
use crate::ops;
use crate::optim::{lr_at, Adam, AdamConfig};
use crate::tape::{backward, Tape};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab, BOS, EOS};

pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_MIN_SAMPLES: usize = 1;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

const INIT_STREAM: u64 = 0x6d6c_696e_6974; // distinct rng streams per role
const TRAIN_STREAM: u64 = 0x6d6c_7472_6169;
const DATA_STREAM: u64 = 0x6d6c_6461_7461;

/// The rng stream used for parameter initialization under a given seed.
/// Exposed so tooling can reconstruct a run's exact starting point.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ INIT_STREAM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub l_mlm: f64,
    pub l_rtd: f64,
    pub l_clm: f64,
    pub combined: f64,
    pub grad_norm: f64,
    pub rtd_recall_masked: f64,
    pub rtd_precision: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,l_mlm,l_rtd,l_clm,combined,grad_norm,rtd_recall_masked,rtd_precision,lr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_mlm,
            self.l_rtd,
            self.l_clm,
            self.combined,
            self.grad_norm,
            self.rtd_recall_masked,
            self.rtd_precision,
            self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct DivergenceEvent {
    pub step: u64,
    pub loss: f64,
    pub reason: String,
}

pub struct TrainOutput<E: Elem> {
    pub model: MetroModel<E>,
    pub metrics: Vec<MetricsRow>,
    pub diverged: Option<DivergenceEvent>,
    pub steps_run: u64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Mean combined loss over the metrics rows in (end_step - window, end_step].
pub fn smoothed_loss(rows: &[MetricsRow], window: u64, end_step: u64) -> f64 {
    let lo = end_step.saturating_sub(window);
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.step > lo && r.step <= end_step)
        .map(|r| r.combined)
        .collect();
    if picked.is_empty() {
        f64::INFINITY
    } else {
        picked.iter().sum::<f64>() / picked.len() as f64
    }
}

fn median(window: &VecDeque<f64>) -> f64 {
    let mut v: Vec<f64> = window.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

struct DivergenceDetector {
    window: VecDeque<f64>,
}

impl DivergenceDetector {
    fn new(history: Vec<f64>) -> Self {
        Self {
            window: history.into(),
        }
    }

    /// Check the current loss against the trailing median, then record it.
    fn observe(&mut self, step: u64, loss: f64) -> Option<DivergenceEvent> {
        if !loss.is_finite() {
            return Some(DivergenceEvent {
                step,
                loss,
                reason: "combined loss is not finite".into(),
            });
        }
        if self.window.len() >= DIVERGENCE_MIN_SAMPLES {
            let med = median(&self.window);
            if loss > DIVERGENCE_FACTOR * med {
                return Some(DivergenceEvent {
                    step,
                    loss,
                    reason: format!(
                        "combined loss {loss} exceeds {DIVERGENCE_FACTOR}x trailing median {med}"
                    ),
                });
            }
        }
        if self.window.len() == DIVERGENCE_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(loss);
        None
    }
}

fn mask_plans(
    batch: &TokenBatch,
    vocab: &Vocab,
    kind: MaskPattern,
    ratio: f64,
    mean_span: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskPlan>> {
    let mut plans = Vec::with_capacity(batch.rows);
    for r in 0..batch.rows {
        let row = batch.row(r);
        let maskable = row.iter().filter(|&&t| !vocab.is_reserved(t)).count();
        if maskable < 2 {
            plans.push(MaskPlan::empty(row.len(), kind));
            continue;
        }
        let plan = match kind {
            MaskPattern::Iid => sample_iid_mask(row, vocab, ratio, rng)?,
            MaskPattern::Span => sample_span_mask(row, vocab, ratio, mean_span, rng)?,
        };
        plans.push(plan);
    }
    Ok(plans)
}

fn metro_step<E: Elem>(
    model: &MetroModel<E>,
    run: &RunConfig,
    vocab: &Vocab,
    batch: &TokenBatch,
    rng: &mut ChaCha8Rng,
    tape: &Tape<E>,
) -> Result<(Tensor<E>, MetricsRow)> {
    let dropout = run.train.dropout;
    let plans = mask_plans(
        batch,
        vocab,
        model.cfg.masking_kind,
        run.train.mask_ratio,
        model.cfg.mean_span,
        rng,
    )?;
    let (noisy, aux_logits) =
        build_noisy_batch(tape, dropout, model, batch, &plans, vocab, 1.0, rng)?;
    let spec = build_decoder_target(&noisy.x_orig, &noisy.flags, model.cfg.target_variant, false)?;
    let mut ctx = FwdCtx {
        tape,
        dropout,
        rng: Some(rng),
        probe: None,
    };
    let h_enc = model.encoder_forward(&mut ctx, &noisy.x_noise)?;
    let h_dec = model.decoder_forward(&mut ctx, &h_enc, &noisy.x_noise, &spec.decoder_input)?;
    let rtd_logits = match model.cfg.rtd_location {
        RtdLocation::Encoder => model.rtd_head(&mut ctx, &h_enc)?,
        RtdLocation::Decoder => {
            if spec.decoder_target.cols != batch.cols {
                return Err(Error::Contract(
                    "decoder RTD requires decoder positions aligned with encoder positions".into(),
                ));
            }
            model.rtd_head(&mut ctx, &h_dec)?
        }
    };
    let clm_logits = model.clm_head(&mut ctx, &h_dec)?;
    let lb = compute_losses(
        &mut ctx,
        &noisy,
        &spec,
        &aux_logits,
        &rtd_logits,
        &clm_logits,
        run.train.lambda_rtd,
        run.train.lambda_clm,
    )?;
    let row = MetricsRow {
        step: 0,
        l_mlm: lb.l_mlm,
        l_rtd: lb.l_rtd,
        l_clm: lb.l_clm,
        combined: lb.combined_value,
        grad_norm: 0.0,
        rtd_recall_masked: lb.rtd.recall_masked,
        rtd_precision: lb.rtd.precision,
        lr: 0.0,
    };
    Ok((lb.combined, row))
}

fn t5_step<E: Elem>(
    model: &MetroModel<E>,
    run: &RunConfig,
    vocab: &Vocab,
    batch: &TokenBatch,
    rng: &mut ChaCha8Rng,
    tape: &Tape<E>,
) -> Result<(Tensor<E>, MetricsRow)> {
    let dropout = run.train.dropout;
    let plans = mask_plans(
        batch,
        vocab,
        MaskPattern::Span,
        run.train.mask_ratio,
        model.cfg.mean_span,
        rng,
    )?;
    let mut enc_rows = Vec::with_capacity(batch.rows);
    let mut tgt_rows = Vec::with_capacity(batch.rows);
    for r in 0..batch.rows {
        let row = batch.row(r);
        let (input, spans_target) = apply_span_corruption(row, &plans[r], vocab)?;
        let target = match run.train.t5_target {
            T5Target::Spans => spans_target,
            T5Target::AllTokens => {
                let len = batch.row_len(r);
                let mut t = row[..len].to_vec();
                t.push(EOS);
                t
            }
        };
        enc_rows.push(input);
        tgt_rows.push(target);
    }
    let enc_width = enc_rows.iter().map(|r| r.len()).max().unwrap_or(1);
    let tgt_width = tgt_rows.iter().map(|r| r.len()).max().unwrap_or(1);
    let enc_batch = TokenBatch::from_rows(&enc_rows, enc_width);
    let target = TokenBatch::from_rows(&tgt_rows, tgt_width);
    let input_rows: Vec<Vec<TokenId>> = tgt_rows
        .iter()
        .map(|t| {
            let mut row = Vec::with_capacity(t.len());
            row.push(BOS);
            row.extend_from_slice(&t[..t.len() - 1]);
            row
        })
        .collect();
    let dec_input = TokenBatch::from_rows(&input_rows, tgt_width);

    let mut ctx = FwdCtx {
        tape,
        dropout,
        rng: Some(rng),
        probe: None,
    };
    let h_enc = model.encoder_forward(&mut ctx, &enc_batch)?;
    let h_dec = model.decoder_forward(&mut ctx, &h_enc, &enc_batch, &dec_input)?;
    let clm_logits = model.clm_head(&mut ctx, &h_dec)?;
    let loss = ops::softmax_cross_entropy(tape, &clm_logits, &target.ids, &target.non_pad())?;
    let value = loss.item()?.to_f64();
    let row = MetricsRow {
        step: 0,
        l_mlm: 0.0,
        l_rtd: 0.0,
        l_clm: value,
        combined: value,
        grad_norm: 0.0,
        rtd_recall_masked: 0.0,
        rtd_precision: 0.0,
        lr: 0.0,
    };
    Ok((loss, row))
}

struct MetricsWriter {
    file: Option<std::io::BufWriter<fs::File>>,
}

impl MetricsWriter {
    fn open(out_dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(Self { file: None });
        };
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let exists = path.exists();
        let mut opts = fs::OpenOptions::new();
        if append {
            opts.create(true).append(true);
        } else {
            opts.create(true).write(true).truncate(true);
        }
        let mut file = std::io::BufWriter::new(opts.open(&path)?);
        if !append || !exists {
            writeln!(file, "{}", MetricsRow::HEADER)?;
        }
        Ok(Self { file: Some(file) })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.to_csv())?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn save_step_checkpoint<E: Elem>(
    out_dir: &Path,
    model: &MetroModel<E>,
    opt: &Adam<E>,
    state: &TrainState,
    final_one: bool,
) -> Result<PathBuf> {
    let path = if final_one {
        out_dir.join("checkpoint_final.ckpt")
    } else {
        let dir = out_dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        dir.join(format!("step_{:07}.ckpt", state.step))
    };
    checkpoint::save(&path, model, &opt.export_moments(), Some(state))?;
    Ok(path)
}

fn resolved_model_config(run: &RunConfig, vocab: &Vocab) -> Result<crate::config::ModelConfig> {
    let mut cfg = run.model.clone();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = vocab.len();
    } else if cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "[model] vocab_size: {} does not match the corpus vocabulary ({} ids)",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    Ok(cfg)
}

/// Pretrain from scratch under `run.train.objective` (metro or t5_span).
pub fn pretrain<E: Elem>(
    run: &RunConfig,
    docs: &[String],
    vocab: &Vocab,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<E>> {
    run.validate()?;
    if run.train.objective == Objective::Finetune {
        return Err(Error::Config(
            "[train] objective: finetune requires a pretrained checkpoint; use the finetune entry point".into(),
        ));
    }
    let cfg = resolved_model_config(run, vocab)?;
    let mut init = init_rng(run.train.seed);
    let model = MetroModel::new(&cfg, &mut init)?;
    let opt = Adam::new(
        model.params().iter().cloned().collect(),
        AdamConfig {
            beta1: run.train.adam_beta1,
            beta2: run.train.adam_beta2,
            eps: run.train.adam_eps,
            weight_decay: run.train.weight_decay,
            clip_norm: run.train.clip_norm,
        },
    );
    let train_rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ TRAIN_STREAM);
    run_pretrain_loop(run, docs, vocab, model, opt, train_rng, 0, Vec::new(), (0, 0), out_dir, false)
}

/// Continue a checkpointed pretraining run to `run.train.total_steps`.
pub fn resume_pretrain<E: Elem>(
    run: &RunConfig,
    docs: &[String],
    vocab: &Vocab,
    ckpt_path: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<E>> {
    run.validate()?;
    let loaded = checkpoint::load::<E>(ckpt_path)?;
    let state = loaded
        .state
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state to resume from".into()))?;
    let cfg = resolved_model_config(run, vocab)?;
    if loaded.config != cfg {
        return Err(Error::Checkpoint(
            "checkpoint model configuration differs from the run configuration".into(),
        ));
    }
    let model = loaded.instantiate()?;
    let mut opt = Adam::new(
        model.params().iter().cloned().collect(),
        AdamConfig {
            beta1: run.train.adam_beta1,
            beta2: run.train.adam_beta2,
            eps: run.train.adam_eps,
            weight_decay: run.train.weight_decay,
            clip_norm: run.train.clip_norm,
        },
    );
    let moments = loaded.optimizer_moments();
    if moments.is_empty() {
        return Err(Error::Checkpoint("checkpoint has no optimizer state".into()));
    }
    opt.import_moments(&moments, state.opt_step)?;
    let train_rng = state.restore_rng();
    run_pretrain_loop(
        run,
        docs,
        vocab,
        model,
        opt,
        train_rng,
        state.step,
        state.loss_window.clone(),
        (state.data_epoch, state.data_cursor as usize),
        out_dir,
        true,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_pretrain_loop<E: Elem>(
    run: &RunConfig,
    docs: &[String],
    vocab: &Vocab,
    model: MetroModel<E>,
    mut opt: Adam<E>,
    mut train_rng: ChaCha8Rng,
    start_step: u64,
    loss_history: Vec<f64>,
    data_pos: (u64, usize),
    out_dir: Option<&Path>,
    append_metrics: bool,
) -> Result<TrainOutput<E>> {
    let packed = pack_corpus(docs, vocab, run.data.seq_len)?;
    let mut iter = BatchIter::new(
        &packed,
        run.data.seq_len,
        run.train.batch_size,
        run.train.seed ^ DATA_STREAM,
    );
    iter.seek(data_pos.0, data_pos.1);
    let mut detector = DivergenceDetector::new(loss_history);
    let mut writer = MetricsWriter::open(out_dir, append_metrics)?;
    let mut metrics = Vec::new();
    let mut diverged = None;
    let mut steps_run = start_step;
    let mut final_checkpoint = None;

    for step in (start_step + 1)..=run.train.total_steps {
        let batch = iter.next_batch_wrapping();
        let tape = Tape::new();
        let (loss, mut row) = match run.train.objective {
            Objective::Metro => metro_step(&model, run, vocab, &batch, &mut train_rng, &tape)?,
            Objective::T5Span => t5_step(&model, run, vocab, &batch, &mut train_rng, &tape)?,
            Objective::Finetune => unreachable!("rejected above"),
        };
        row.step = step;
        row.lr = lr_at(step, run.train.peak_lr, run.train.warmup_steps);

        if let Some(event) = detector.observe(step, row.combined) {
            writer.write(&row)?;
            metrics.push(row);
            writer.finish()?;
            if let Some(dir) = out_dir {
                fs::write(
                    dir.join("divergence.txt"),
                    format!("step={}\nloss={}\nreason={}\n", event.step, event.loss, event.reason),
                )?;
            }
            diverged = Some(event);
            steps_run = step;
            break;
        }

        let grads = backward(&tape, &loss)?;
        let report = match opt.step(row.lr, &grads) {
            Ok(r) => r,
            Err(Error::Divergence { step: _, loss }) => {
                let event = DivergenceEvent {
                    step,
                    loss,
                    reason: "non-finite gradient after clipping".into(),
                };
                if let Some(dir) = out_dir {
                    fs::write(
                        dir.join("divergence.txt"),
                        format!("step={}\nloss={}\nreason={}\n", event.step, event.loss, event.reason),
                    )?;
                }
                diverged = Some(event);
                steps_run = step;
                break;
            }
            Err(e) => return Err(e),
        };
        row.grad_norm = report.grad_norm;
        steps_run = step;

        if step % run.train.log_interval == 0 || step == run.train.total_steps {
            writer.write(&row)?;
            metrics.push(row);
        }

        let want_periodic =
            run.train.checkpoint_interval > 0 && step % run.train.checkpoint_interval == 0;
        let is_last = step == run.train.total_steps;
        if (want_periodic || is_last) && out_dir.is_some() {
            let (rng_seed, rng_word_pos) = TrainState::capture_rng(&train_rng);
            let (data_epoch, data_cursor) = iter.position();
            let state = TrainState {
                step,
                opt_step: opt.step_count(),
                rng_seed,
                rng_word_pos,
                data_epoch,
                data_cursor: data_cursor as u64,
                loss_window: detector.window.iter().copied().collect(),
            };
            let dir = out_dir.unwrap();
            if want_periodic && !is_last {
                save_step_checkpoint(dir, &model, &opt, &state, false)?;
            }
            if is_last {
                final_checkpoint = Some(save_step_checkpoint(dir, &model, &opt, &state, true)?);
            }
        }
    }
    writer.finish()?;
    Ok(TrainOutput {
        model,
        metrics,
        diverged,
        steps_run,
        final_checkpoint,
    })
}

/// Standard seq2seq finetuning of the main model; the auxiliary stack and
/// the pretraining heads are excluded from the optimized set. The peak
/// learning rate is scaled by `lr_multiplier_finetune`.
pub fn finetune<E: Elem>(
    run: &RunConfig,
    model: MetroModel<E>,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    out_dir: Option<&Path>,
) -> Result<TrainOutput<E>> {
    run.validate()?;
    if pairs.is_empty() {
        return Err(Error::Ingestion("finetuning mixture is empty".into()));
    }
    for (i, (input, target)) in pairs.iter().enumerate() {
        if input.is_empty() || target.is_empty() {
            return Err(Error::Ingestion(format!("task pair {i} has an empty side")));
        }
        let max = model.cfg.max_abs_positions;
        if input.len() > max || target.len() + 1 > max {
            return Err(Error::Ingestion(format!(
                "task pair {i} exceeds {max} positions"
            )));
        }
    }
    let opt = Adam::new(
        model.main_params(),
        AdamConfig {
            beta1: run.train.adam_beta1,
            beta2: run.train.adam_beta2,
            eps: run.train.adam_eps,
            weight_decay: run.train.weight_decay,
            clip_norm: run.train.clip_norm,
        },
    );
    let peak = run.train.peak_lr * run.train.lr_multiplier_finetune;
    let mut train_rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ TRAIN_STREAM);
    let mut opt = opt;
    let mut detector = DivergenceDetector::new(Vec::new());
    let mut writer = MetricsWriter::open(out_dir, false)?;
    let mut metrics = Vec::new();
    let mut diverged = None;
    let mut steps_run = 0;
    let mut final_checkpoint = None;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len(); // trigger shuffle on first step
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ DATA_STREAM);

    for step in 1..=run.train.total_steps {
        if cursor >= order.len() {
            order.shuffle(&mut epoch_rng);
            cursor = 0;
        }
        let end = (cursor + run.train.batch_size).min(order.len());
        let chosen = &order[cursor..end];
        cursor = end;

        let enc_rows: Vec<Vec<TokenId>> = chosen.iter().map(|&i| pairs[i].0.clone()).collect();
        let tgt_rows: Vec<Vec<TokenId>> = chosen
            .iter()
            .map(|&i| {
                let mut t = pairs[i].1.clone();
                t.push(EOS);
                t
            })
            .collect();
        let enc_width = enc_rows.iter().map(|r| r.len()).max().unwrap();
        let tgt_width = tgt_rows.iter().map(|r| r.len()).max().unwrap();
        let enc_batch = TokenBatch::from_rows(&enc_rows, enc_width);
        let target = TokenBatch::from_rows(&tgt_rows, tgt_width);
        let input_rows: Vec<Vec<TokenId>> = tgt_rows
            .iter()
            .map(|t| {
                let mut row = vec![BOS];
                row.extend_from_slice(&t[..t.len() - 1]);
                row
            })
            .collect();
        let dec_input = TokenBatch::from_rows(&input_rows, tgt_width);

        let tape = Tape::new();
        let mut ctx = FwdCtx {
            tape: &tape,
            dropout: run.train.dropout,
            rng: Some(&mut train_rng),
            probe: None,
        };
        let h_enc = model.encoder_forward(&mut ctx, &enc_batch)?;
        let h_dec = model.decoder_forward(&mut ctx, &h_enc, &enc_batch, &dec_input)?;
        let logits = model.clm_head(&mut ctx, &h_dec)?;
        drop(ctx);
        let loss = ops::softmax_cross_entropy(&tape, &logits, &target.ids, &target.non_pad())?;
        let value = loss.item()?.to_f64();
        let lr = lr_at(step, peak, run.train.warmup_steps);
        let mut row = MetricsRow {
            step,
            l_mlm: 0.0,
            l_rtd: 0.0,
            l_clm: value,
            combined: value,
            grad_norm: 0.0,
            rtd_recall_masked: 0.0,
            rtd_precision: 0.0,
            lr,
        };

        if let Some(event) = detector.observe(step, value) {
            writer.write(&row)?;
            metrics.push(row);
            diverged = Some(event);
            steps_run = step;
            break;
        }
        let grads = backward(&tape, &loss)?;
        let report = opt.step(lr, &grads)?;
        row.grad_norm = report.grad_norm;
        steps_run = step;
        if step % run.train.log_interval == 0 || step == run.train.total_steps {
            writer.write(&row)?;
            metrics.push(row);
        }
        if step == run.train.total_steps {
            if let Some(dir) = out_dir {
                let (rng_seed, rng_word_pos) = TrainState::capture_rng(&train_rng);
                let state = TrainState {
                    step,
                    opt_step: opt.step_count(),
                    rng_seed,
                    rng_word_pos,
                    data_epoch: 0,
                    data_cursor: cursor as u64,
                    loss_window: detector.window.iter().copied().collect(),
                };
                final_checkpoint = Some(save_step_checkpoint(dir, &model, &opt, &state, true)?);
            }
        }
    }
    writer.finish()?;
    Ok(TrainOutput {
        model,
        metrics,
        diverged,
        steps_run,
        final_checkpoint,
    })
}
