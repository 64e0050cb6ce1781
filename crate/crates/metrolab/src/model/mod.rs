//! The auxiliary MLM encoder and the main encoder-decoder, with all
//! projection heads.
//!
//! Both models share one token embedding table (configurable), add learned
//! absolute position embeddings at the input, and add a bucketed relative
//! position bias to attention logits. Residual composition is post-LN by
//! default with a pre-LN ablation switch.

pub mod checkpoint;
pub mod layers;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ClmHeadStyle, ModelConfig, NormStyle, RtdLocation};
use crate::data::TokenBatch;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Param, ParamSet, Tensor};
use crate::vocab::{TokenId, PAD};

pub use layers::{relative_bucket, ActivationProbe, FwdCtx};
use layers::{residual, sublayer_input, Attention, FeedForward, LayerNorm, Linear, RelBias, INIT_STD};

struct EncLayer<E: Elem> {
    attn: Attention<E>,
    attn_ln: LayerNorm<E>,
    ffn: FeedForward<E>,
    ffn_ln: LayerNorm<E>,
    rel: Option<RelBias<E>>,
}

struct DecLayer<E: Elem> {
    self_attn: Attention<E>,
    self_ln: LayerNorm<E>,
    cross: Attention<E>,
    cross_ln: LayerNorm<E>,
    ffn: FeedForward<E>,
    ffn_ln: LayerNorm<E>,
    rel: Option<RelBias<E>>,
}

struct EncoderStack<E: Elem> {
    pos: Arc<Param<E>>,
    emb_ln: LayerNorm<E>,
    layers: Vec<EncLayer<E>>,
    shared_rel: Option<RelBias<E>>,
    final_ln: Option<LayerNorm<E>>,
}

struct DecoderStack<E: Elem> {
    pos: Arc<Param<E>>,
    emb_ln: LayerNorm<E>,
    layers: Vec<DecLayer<E>>,
    shared_rel: Option<RelBias<E>>,
    final_ln: Option<LayerNorm<E>>,
}

/// RoBERTa-style two-layer head producing one logit per position.
struct RtdHead<E: Elem> {
    dense: Linear<E>,
    ln: LayerNorm<E>,
    out: Linear<E>,
}

/// Optional projection in front of the tied CLM output.
struct ClmProjection<E: Elem> {
    dense: Linear<E>,
    ln: LayerNorm<E>,
}

pub struct MetroModel<E: Elem> {
    pub cfg: ModelConfig,
    params: ParamSet<E>,
    embed: Arc<Param<E>>,
    aux_embed: Option<Arc<Param<E>>>,
    aux: EncoderStack<E>,
    enc: EncoderStack<E>,
    dec: DecoderStack<E>,
    mlm_bias: Arc<Param<E>>,
    clm_bias: Arc<Param<E>>,
    clm_proj: Option<ClmProjection<E>>,
    rtd: RtdHead<E>,
}

fn build_encoder_stack<E: Elem>(
    set: &mut ParamSet<E>,
    prefix: &str,
    layers: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> EncoderStack<E> {
    let d = cfg.d_model;
    let pos = set.register(
        format!("{prefix}.pos"),
        Tensor::randn(vec![cfg.max_abs_positions, d], INIT_STD, rng),
    );
    let emb_ln = LayerNorm::new(set, &format!("{prefix}.emb_ln"), d);
    let shared_rel = cfg.rel_bias_shared_layers.then(|| {
        RelBias::new(
            set,
            &format!("{prefix}.relbias"),
            cfg.n_heads,
            cfg.rel_buckets,
            cfg.rel_max_distance,
            true,
            rng,
        )
    });
    let layers = (0..layers)
        .map(|i| {
            let name = format!("{prefix}.l{i}");
            EncLayer {
                attn: Attention::new(set, &format!("{name}.attn"), d, rng),
                attn_ln: LayerNorm::new(set, &format!("{name}.attn_ln"), d),
                ffn: FeedForward::new(set, &name, d, cfg.d_ff, rng),
                ffn_ln: LayerNorm::new(set, &format!("{name}.ffn_ln"), d),
                rel: (!cfg.rel_bias_shared_layers).then(|| {
                    RelBias::new(
                        set,
                        &format!("{name}.relbias"),
                        cfg.n_heads,
                        cfg.rel_buckets,
                        cfg.rel_max_distance,
                        true,
                        rng,
                    )
                }),
            }
        })
        .collect();
    let final_ln = matches!(cfg.norm_style, NormStyle::PreLn)
        .then(|| LayerNorm::new(set, &format!("{prefix}.final_ln"), d));
    EncoderStack {
        pos,
        emb_ln,
        layers,
        shared_rel,
        final_ln,
    }
}

fn build_decoder_stack<E: Elem>(
    set: &mut ParamSet<E>,
    prefix: &str,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> DecoderStack<E> {
    let d = cfg.d_model;
    let pos = set.register(
        format!("{prefix}.pos"),
        Tensor::randn(vec![cfg.max_abs_positions, d], INIT_STD, rng),
    );
    let emb_ln = LayerNorm::new(set, &format!("{prefix}.emb_ln"), d);
    let shared_rel = cfg.rel_bias_shared_layers.then(|| {
        RelBias::new(
            set,
            &format!("{prefix}.relbias"),
            cfg.n_heads,
            cfg.rel_buckets,
            cfg.rel_max_distance,
            false,
            rng,
        )
    });
    let layers = (0..cfg.dec_layers)
        .map(|i| {
            let name = format!("{prefix}.l{i}");
            DecLayer {
                self_attn: Attention::new(set, &format!("{name}.self"), d, rng),
                self_ln: LayerNorm::new(set, &format!("{name}.self_ln"), d),
                cross: Attention::new(set, &format!("{name}.cross"), d, rng),
                cross_ln: LayerNorm::new(set, &format!("{name}.cross_ln"), d),
                ffn: FeedForward::new(set, &name, d, cfg.d_ff, rng),
                ffn_ln: LayerNorm::new(set, &format!("{name}.ffn_ln"), d),
                rel: (!cfg.rel_bias_shared_layers).then(|| {
                    RelBias::new(
                        set,
                        &format!("{name}.relbias"),
                        cfg.n_heads,
                        cfg.rel_buckets,
                        cfg.rel_max_distance,
                        false,
                        rng,
                    )
                }),
            }
        })
        .collect();
    let final_ln = matches!(cfg.norm_style, NormStyle::PreLn)
        .then(|| LayerNorm::new(set, &format!("{prefix}.final_ln"), d));
    DecoderStack {
        pos,
        emb_ln,
        layers,
        shared_rel,
        final_ln,
    }
}

impl<E: Elem> MetroModel<E> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.clm_head_style == ClmHeadStyle::CopyMechanism {
            return Err(Error::Config(
                "[model] clm_head_style: copy_mechanism is a recognized variant but is not implemented".into(),
            ));
        }
        if cfg.vocab_size < 6 {
            return Err(Error::Config(format!(
                "[model] vocab_size: needs the reserved ids plus at least one token, got {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let mut set = ParamSet::new();
        let embed = set.register(
            "embed.tok",
            Tensor::randn(vec![cfg.vocab_size, d], INIT_STD, rng),
        );
        let aux_embed = (!cfg.tie_embeddings).then(|| {
            set.register(
                "aux.embed.tok",
                Tensor::randn(vec![cfg.vocab_size, d], INIT_STD, rng),
            )
        });
        let aux = build_encoder_stack(&mut set, "aux", cfg.aux_layers_resolved(), cfg, rng);
        let enc = build_encoder_stack(&mut set, "enc", cfg.enc_layers, cfg, rng);
        let dec = build_decoder_stack(&mut set, "dec", cfg, rng);
        let mlm_bias = set.register("head.mlm.bias", Tensor::zeros(vec![cfg.vocab_size]));
        let clm_bias = set.register("head.clm.bias", Tensor::zeros(vec![cfg.vocab_size]));
        let clm_proj = matches!(cfg.clm_head_style, ClmHeadStyle::Projection).then(|| ClmProjection {
            dense: Linear::new(&mut set, "head.clm.proj", d, d, rng),
            ln: LayerNorm::new(&mut set, "head.clm.proj.ln", d),
        });
        let rtd = RtdHead {
            dense: Linear::new(&mut set, "head.rtd.dense", d, d, rng),
            ln: LayerNorm::new(&mut set, "head.rtd.ln", d),
            out: Linear::new(&mut set, "head.rtd.out", d, 1, rng),
        };
        Ok(Self {
            cfg: cfg.clone(),
            params: set,
            embed,
            aux_embed,
            aux,
            enc,
            dec,
            mlm_bias,
            clm_bias,
            clm_proj,
            rtd,
        })
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    /// Parameters that survive finetuning: the main model only. The
    /// auxiliary stack and the pretraining heads are discarded.
    pub fn main_params(&self) -> Vec<Arc<Param<E>>> {
        self.params
            .iter()
            .filter(|p| {
                !(p.name().starts_with("aux.")
                    || p.name().starts_with("head.rtd.")
                    || p.name().starts_with("head.mlm."))
            })
            .cloned()
            .collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.cfg.max_abs_positions {
            return Err(Error::LengthExceeded {
                len: n,
                max: self.cfg.max_abs_positions,
            });
        }
        Ok(())
    }

    fn embed_table(&self, for_aux: bool) -> &Arc<Param<E>> {
        if for_aux {
            self.aux_embed.as_ref().unwrap_or(&self.embed)
        } else {
            &self.embed
        }
    }

    /// Token + position embedding, embedding LN, dropout. Returns [b*n, d].
    fn embed_input(
        &self,
        ctx: &mut FwdCtx<E>,
        stack_pos: &Arc<Param<E>>,
        emb_ln: &LayerNorm<E>,
        batch: &TokenBatch,
        for_aux: bool,
    ) -> Result<Tensor<E>> {
        self.check_len(batch.cols)?;
        let tape = ctx.tape;
        let tok = ops::embedding_lookup(tape, &self.embed_table(for_aux).leaf(), &batch.ids)?;
        let pos_ids: Vec<u32> = (0..batch.rows)
            .flat_map(|_| 0..batch.cols as u32)
            .collect();
        let pos = ops::embedding_lookup(tape, &stack_pos.leaf(), &pos_ids)?;
        let summed = ops::add(tape, &tok, &pos)?;
        let normed = emb_ln.fwd(tape, &summed)?;
        Ok(ctx.apply_dropout(normed))
    }

    /// Additive attention mask blocking PAD keys: [b*heads, n_q, n_k].
    fn pad_mask(&self, batch_keys: &TokenBatch, n_q: usize, causal: bool) -> Tensor<E> {
        let b = batch_keys.rows;
        let h = self.cfg.n_heads;
        let n_k = batch_keys.cols;
        let mut blocked = vec![false; b * h * n_q * n_k];
        for bi in 0..b {
            let row = batch_keys.row(bi);
            for hi in 0..h {
                for q in 0..n_q {
                    let base = (((bi * h) + hi) * n_q + q) * n_k;
                    for (kpos, &tok) in row.iter().enumerate() {
                        blocked[base + kpos] = tok == PAD || (causal && kpos > q);
                    }
                }
            }
        }
        ops::mask_constant(vec![b * h, n_q, n_k], &blocked)
    }

    fn run_encoder_stack(
        &self,
        ctx: &mut FwdCtx<E>,
        stack: &EncoderStack<E>,
        batch: &TokenBatch,
        for_aux: bool,
    ) -> Result<Tensor<E>> {
        let (b, n) = (batch.rows, batch.cols);
        let mut x = self.embed_input(ctx, &stack.pos, &stack.emb_ln, batch, for_aux)?;
        let pad = self.pad_mask(batch, n, false);
        let style = self.cfg.norm_style;
        for layer in &stack.layers {
            let rel = layer.rel.as_ref().or(stack.shared_rel.as_ref()).unwrap();
            let rel_bias = rel.bias(ctx.tape, n, n)?;
            let a_in = sublayer_input(ctx.tape, style, &layer.attn_ln, &x)?;
            let att = layer
                .attn
                .fwd(ctx, self.cfg.n_heads, &a_in, &a_in, b, n, n, &[&rel_bias, &pad])?;
            x = residual(ctx.tape, style, &layer.attn_ln, &x, &att)?;
            let f_in = sublayer_input(ctx.tape, style, &layer.ffn_ln, &x)?;
            let ff = layer.ffn.fwd(ctx, &f_in)?;
            x = residual(ctx.tape, style, &layer.ffn_ln, &x, &ff)?;
        }
        if let Some(ln) = &stack.final_ln {
            x = ln.fwd(ctx.tape, &x)?;
        }
        Ok(x)
    }

    /// MLM logits over the vocabulary at every position: [b*n, V].
    pub fn aux_forward(&self, ctx: &mut FwdCtx<E>, masked: &TokenBatch) -> Result<Tensor<E>> {
        let h = self.run_encoder_stack(ctx, &self.aux, masked, true)?;
        let et = ops::transpose_last2(ctx.tape, &self.embed_table(true).leaf())?;
        let logits = ops::matmul(ctx.tape, &h, &et)?;
        ops::add_tiled(ctx.tape, &logits, &self.mlm_bias.leaf())
    }

    /// Main-encoder hidden states: [b*n, d].
    pub fn encoder_forward(&self, ctx: &mut FwdCtx<E>, x_noise: &TokenBatch) -> Result<Tensor<E>> {
        self.run_encoder_stack(ctx, &self.enc, x_noise, false)
    }

    /// Decoder hidden states given encoder output: [b*m, d]. The decoder
    /// input must be BOS-shifted; causality is enforced by the self-attn
    /// mask.
    pub fn decoder_forward(
        &self,
        ctx: &mut FwdCtx<E>,
        h_enc: &Tensor<E>,
        enc_batch: &TokenBatch,
        dec_input: &TokenBatch,
    ) -> Result<Tensor<E>> {
        let (b, m) = (dec_input.rows, dec_input.cols);
        let n = enc_batch.cols;
        if h_enc.shape() != [b * n, self.cfg.d_model] {
            return Err(Error::ShapeMismatch {
                op: "decoder_forward",
                lhs: h_enc.shape().to_vec(),
                rhs: vec![b * n, self.cfg.d_model],
            });
        }
        let mut x = self.embed_input(ctx, &self.dec.pos, &self.dec.emb_ln, dec_input, false)?;
        let self_mask = self.pad_mask(dec_input, m, true);
        let cross_mask = self.pad_mask(enc_batch, m, false);
        let style = self.cfg.norm_style;
        for layer in &self.dec.layers {
            let rel = layer.rel.as_ref().or(self.dec.shared_rel.as_ref()).unwrap();
            let rel_bias = rel.bias(ctx.tape, m, m)?;
            let s_in = sublayer_input(ctx.tape, style, &layer.self_ln, &x)?;
            let att = layer
                .self_attn
                .fwd(ctx, self.cfg.n_heads, &s_in, &s_in, b, m, m, &[&rel_bias, &self_mask])?;
            x = residual(ctx.tape, style, &layer.self_ln, &x, &att)?;

            let c_in = sublayer_input(ctx.tape, style, &layer.cross_ln, &x)?;
            let cross = layer
                .cross
                .fwd(ctx, self.cfg.n_heads, &c_in, h_enc, b, m, n, &[&cross_mask])?;
            x = residual(ctx.tape, style, &layer.cross_ln, &x, &cross)?;

            let f_in = sublayer_input(ctx.tape, style, &layer.ffn_ln, &x)?;
            let ff = layer.ffn.fwd(ctx, &f_in)?;
            x = residual(ctx.tape, style, &layer.ffn_ln, &x, &ff)?;
        }
        if let Some(ln) = &self.dec.final_ln {
            x = ln.fwd(ctx.tape, &x)?;
        }
        Ok(x)
    }

    /// One replaced-vs-original logit per position: [rows].
    pub fn rtd_head(&self, ctx: &mut FwdCtx<E>, h: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = ctx.tape;
        let dense = self.rtd.dense.fwd(tape, h)?;
        let act = ops::relu(tape, &dense);
        let normed = self.rtd.ln.fwd(tape, &act)?;
        let logits = self.rtd.out.fwd(tape, &normed)?;
        let rows = h.shape()[0];
        ops::reshape(tape, &logits, vec![rows])
    }

    /// Hidden states the RTD head reads under the configured placement.
    pub fn rtd_input_location(&self) -> RtdLocation {
        self.cfg.rtd_location
    }

    /// CLM logits over the vocabulary: [rows, V]. Linear mode ties directly
    /// to the shared embedding; projection mode inserts a dense+ReLU+LN
    /// block first.
    pub fn clm_head(&self, ctx: &mut FwdCtx<E>, h_dec: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = ctx.tape;
        let h = match &self.clm_proj {
            Some(proj) => {
                let dense = proj.dense.fwd(tape, h_dec)?;
                let act = ops::relu(tape, &dense);
                proj.ln.fwd(tape, &act)?
            }
            None => h_dec.clone(),
        };
        let et = ops::transpose_last2(tape, &self.embed.leaf())?;
        let logits = ops::matmul(tape, &h, &et)?;
        ops::add_tiled(tape, &logits, &self.clm_bias.leaf())
    }
}

/// Draw the noisy sequence: masked positions are sampled from the MLM
/// softmax (never a reserved id), unmasked positions are copied. Pure id
/// output; no gradient flows through the samples.
pub fn sample_noise<E: Elem>(
    mlm_logits: &Tensor<E>,
    orig: &TokenBatch,
    flags: &[bool],
    reserved_len: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    let (rows, vocab) = match mlm_logits.shape() {
        [r, v] => (*r, *v),
        other => {
            return Err(Error::Contract(format!(
                "mlm logits must be rank 2, got {other:?}"
            )))
        }
    };
    if rows != orig.len() || flags.len() != rows {
        return Err(Error::Contract(format!(
            "noise sampling alignment: {rows} logit rows vs {} tokens, {} flags",
            orig.len(),
            flags.len()
        )));
    }
    if reserved_len >= vocab {
        return Err(Error::Contract(
            "vocabulary has no sampleable non-reserved ids".into(),
        ));
    }
    let temp = if temperature > 0.0 { temperature } else { 1.0 };
    let data = mlm_logits.data();
    let mut out = orig.ids.clone();
    for (i, slot) in out.iter_mut().enumerate() {
        if !flags[i] {
            continue;
        }
        let row = &data[i * vocab..(i + 1) * vocab];
        let mut max = f64::NEG_INFINITY;
        for &z in &row[reserved_len..] {
            max = max.max(z.to_f64() / temp);
        }
        let mut weights = Vec::with_capacity(vocab - reserved_len);
        let mut total = 0.0f64;
        for &z in &row[reserved_len..] {
            let w = ((z.to_f64() / temp) - max).exp();
            total += w;
            weights.push(w);
        }
        let draw = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut picked = vocab - 1;
        for (j, &w) in weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                picked = reserved_len + j;
                break;
            }
        }
        *slot = picked as TokenId;
    }
    Ok(out)
}
