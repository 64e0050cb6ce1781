//! Model, training, and run configuration.
//!
//! Run configs are flat INI-style text: `[section]` headers, `key = value`
//! pairs, `#` comments. Unknown keys are rejected, every key has a documented
//! default, and the seed must be stated explicitly — no entropy defaults.
//! Any key can be overridden by an environment variable
//! `METROLAB_<SECTION>_<KEY>` (e.g. `METROLAB_TRAIN_PEAK_LR`).

use std::fmt;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::masking::MaskPattern;
use crate::vocab::VocabMode;

pub const LN_EPS: f64 = 1e-6;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? } expects $expects:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("expected ", $expects, ", got {:?}"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $(Self::$variant => $text),+
                })
            }
        }
    };
}

keyword_enum!(Precision { F32 => "f32", F64 => "f64" } expects "f32|f64");
keyword_enum!(RtdLocation { Encoder => "encoder", Decoder => "decoder" } expects "encoder|decoder");
keyword_enum!(TargetVariant {
    MaskedOnly => "masked_only",
    AllTokens => "all_tokens",
    AllTokensMaskedLoss => "all_tokens_masked_loss",
} expects "masked_only|all_tokens|all_tokens_masked_loss");
keyword_enum!(NormStyle { PostLn => "post_ln", PreLn => "pre_ln" } expects "post_ln|pre_ln");
keyword_enum!(ClmHeadStyle {
    Linear => "linear",
    Projection => "projection",
    CopyMechanism => "copy_mechanism",
} expects "linear|projection|copy_mechanism");
keyword_enum!(Objective { Metro => "metro", T5Span => "t5_span", Finetune => "finetune" } expects "metro|t5_span|finetune");
keyword_enum!(T5Target { Spans => "spans", AllTokens => "all_tokens" } expects "spans|all_tokens");

/// Architecture hyperparameters, including the ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// 0 means auto: one third of the encoder depth, at least 1.
    pub aux_layers: usize,
    /// 0 means derive from the corpus vocabulary.
    pub vocab_size: usize,
    pub max_abs_positions: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub dropout: f64,
    pub rtd_location: RtdLocation,
    pub target_variant: TargetVariant,
    pub masking_kind: MaskPattern,
    pub mean_span: f64,
    pub norm_style: NormStyle,
    pub clm_head_style: ClmHeadStyle,
    /// Share one relative-bias table per stack instead of one per layer.
    pub rel_bias_shared_layers: bool,
    /// Share the token embedding between auxiliary and main model.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            enc_layers: 2,
            dec_layers: 2,
            aux_layers: 0,
            vocab_size: 0,
            max_abs_positions: 128,
            rel_buckets: 32,
            rel_max_distance: 128,
            dropout: 0.1,
            rtd_location: RtdLocation::Encoder,
            target_variant: TargetVariant::AllTokensMaskedLoss,
            masking_kind: MaskPattern::Iid,
            mean_span: 3.0,
            norm_style: NormStyle::PostLn,
            clm_head_style: ClmHeadStyle::Linear,
            rel_bias_shared_layers: true,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// Field list as key/value text, in declaration order. Shared by the INI
    /// serializer and the checkpoint header.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("aux_layers", self.aux_layers.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_abs_positions", self.max_abs_positions.to_string()),
            ("rel_buckets", self.rel_buckets.to_string()),
            ("rel_max_distance", self.rel_max_distance.to_string()),
            ("dropout", self.dropout.to_string()),
            ("rtd_location", self.rtd_location.to_string()),
            ("target_variant", self.target_variant.to_string()),
            ("masking_kind", self.masking_kind.to_string()),
            ("mean_span", self.mean_span.to_string()),
            ("norm_style", self.norm_style.to_string()),
            ("clm_head_style", self.clm_head_style.to_string()),
            ("rel_bias_shared_layers", self.rel_bias_shared_layers.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
        ]
    }

    /// Set one field from its text form; key names match `to_kv`.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        let section = "model";
        match key {
            "d_model" => self.d_model = parse_num(section, key, value, "a positive integer")?,
            "n_heads" => self.n_heads = parse_num(section, key, value, "a positive integer")?,
            "d_ff" => self.d_ff = parse_num(section, key, value, "a positive integer")?,
            "enc_layers" => self.enc_layers = parse_num(section, key, value, "a positive integer")?,
            "dec_layers" => self.dec_layers = parse_num(section, key, value, "a positive integer")?,
            "aux_layers" => self.aux_layers = parse_num(section, key, value, "an integer (0 = auto)")?,
            "vocab_size" => self.vocab_size = parse_num(section, key, value, "an integer (0 = derive)")?,
            "max_abs_positions" => {
                self.max_abs_positions = parse_num(section, key, value, "a positive integer")?
            }
            "rel_buckets" => self.rel_buckets = parse_num(section, key, value, "a positive integer")?,
            "rel_max_distance" => {
                self.rel_max_distance = parse_num(section, key, value, "a positive integer")?
            }
            "dropout" => self.dropout = parse_num(section, key, value, "a real in [0, 1)")?,
            "rtd_location" => self.rtd_location = RtdLocation::parse(value)?,
            "target_variant" => self.target_variant = TargetVariant::parse(value)?,
            "masking_kind" => self.masking_kind = MaskPattern::parse(value)?,
            "mean_span" => self.mean_span = parse_num(section, key, value, "a real >= 2")?,
            "norm_style" => self.norm_style = NormStyle::parse(value)?,
            "clm_head_style" => self.clm_head_style = ClmHeadStyle::parse(value)?,
            "rel_bias_shared_layers" => {
                self.rel_bias_shared_layers = parse_num(section, key, value, "true|false")?
            }
            "tie_embeddings" => self.tie_embeddings = parse_num(section, key, value, "true|false")?,
            _ => {
                return Err(Error::Config(format!(
                    "[model] {key}: unknown configuration key"
                )))
            }
        }
        Ok(())
    }

    /// Auxiliary depth: explicit value, or one third of the encoder.
    pub fn aux_layers_resolved(&self) -> usize {
        if self.aux_layers > 0 {
            self.aux_layers
        } else {
            (self.enc_layers / 3).max(1)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "[model] d_model: must be a positive multiple of n_heads, got d_model={} n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config(
                "[model] enc_layers/dec_layers: must be positive integers".into(),
            ));
        }
        if self.aux_layers_resolved() > self.enc_layers {
            return Err(Error::Config(format!(
                "[model] aux_layers: {} exceeds enc_layers {}",
                self.aux_layers_resolved(),
                self.enc_layers
            )));
        }
        if self.rel_buckets < 4 || self.rel_buckets % 2 != 0 {
            return Err(Error::Config(format!(
                "[model] rel_buckets: expected an even integer >= 4, got {}",
                self.rel_buckets
            )));
        }
        if self.rel_max_distance <= self.rel_buckets / 4 {
            return Err(Error::Config(format!(
                "[model] rel_max_distance: {} too small for {} buckets",
                self.rel_max_distance, self.rel_buckets
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "[model] dropout: expected a real in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.mean_span < 2.0 {
            return Err(Error::Config(format!(
                "[model] mean_span: expected a real >= 2, got {}",
                self.mean_span
            )));
        }
        Ok(())
    }
}

/// Optimization hyperparameters and the objective selector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// None disables clipping (written as `none`).
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda_rtd: f64,
    pub lambda_clm: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub objective: Objective,
    pub t5_target: T5Target,
    pub lr_multiplier_finetune: f64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 4e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            clip_norm: Some(2.0),
            weight_decay: 0.01,
            dropout: 0.1,
            lambda_rtd: 50.0,
            lambda_clm: 1.0,
            mask_ratio: 0.15,
            seed: 0,
            objective: Objective::Metro,
            t5_target: T5Target::Spans,
            lr_multiplier_finetune: 0.1,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::Config(format!(
                "[train] peak_lr: expected a positive real, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "[train] warmup_steps: expected 0 < warmup ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("[train] batch_size: expected a positive integer".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "[train] {name}: expected a real in [0, 1), got {v}"
                )));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config(format!(
                "[train] adam_eps: expected a positive real, got {}",
                self.adam_eps
            )));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!(
                    "[train] clip_norm: expected a positive real or none, got {c}"
                )));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "[train] weight_decay: expected a non-negative real, got {}",
                self.weight_decay
            )));
        }
        if self.lambda_rtd < 0.0 || self.lambda_clm < 0.0 {
            return Err(Error::Config(format!(
                "[train] lambda_rtd/lambda_clm: expected non-negative reals, got {}/{}",
                self.lambda_rtd, self.lambda_clm
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 0.5) {
            return Err(Error::Config(format!(
                "[train] mask_ratio: expected a real in (0, 0.5), got {}",
                self.mask_ratio
            )));
        }
        if self.lr_multiplier_finetune <= 0.0 {
            return Err(Error::Config(format!(
                "[train] lr_multiplier_finetune: expected a positive real, got {}",
                self.lr_multiplier_finetune
            )));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("[train] log_interval: expected a positive integer".into()));
        }
        Ok(())
    }
}

/// Data sources and tokenization knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub vocab_mode: VocabMode,
    /// 0 means uncapped (ignored unless vocab_mode requires it).
    pub vocab_cap: usize,
    pub sentinels: usize,
    pub seq_len: usize,
    /// Semicolon-separated task files, or `builtin` for the generated suite.
    pub tasks: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            vocab_mode: VocabMode::Word,
            vocab_cap: 0,
            sentinels: 16,
            seq_len: 64,
            tasks: "builtin".into(),
        }
    }
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str, expects: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("[{section}] {key}: expected {expects}, got {value:?}"))
    })
}

impl RunConfig {
    fn set_key(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(msg) if !msg.starts_with('[') => {
                Error::Config(format!("[{section}] {key}: {msg}"))
            }
            other => other,
        };
        match (section, key) {
            ("run", "name") => self.name = value.to_string(),
            ("run", "output_dir") => self.output_dir = PathBuf::from(value),
            ("run", "precision") => self.precision = Precision::parse(value).map_err(wrap)?,

            ("model", _) => return self.model.set_field(key, value).map_err(wrap),

            ("train", "peak_lr") => self.train.peak_lr = parse_num(section, key, value, "a positive real")?,
            ("train", "warmup_steps") => self.train.warmup_steps = parse_num(section, key, value, "a positive integer")?,
            ("train", "total_steps") => self.train.total_steps = parse_num(section, key, value, "a positive integer")?,
            ("train", "batch_size") => self.train.batch_size = parse_num(section, key, value, "a positive integer")?,
            ("train", "adam_beta1") => self.train.adam_beta1 = parse_num(section, key, value, "a real in [0, 1)")?,
            ("train", "adam_beta2") => self.train.adam_beta2 = parse_num(section, key, value, "a real in [0, 1)")?,
            ("train", "adam_eps") => self.train.adam_eps = parse_num(section, key, value, "a positive real")?,
            ("train", "clip_norm") => {
                self.train.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_num(section, key, value, "a positive real or none")?)
                }
            }
            ("train", "weight_decay") => self.train.weight_decay = parse_num(section, key, value, "a non-negative real")?,
            ("train", "dropout") => self.train.dropout = parse_num(section, key, value, "a real in [0, 1)")?,
            ("train", "lambda_rtd") => self.train.lambda_rtd = parse_num(section, key, value, "a non-negative real")?,
            ("train", "lambda_clm") => self.train.lambda_clm = parse_num(section, key, value, "a non-negative real")?,
            ("train", "mask_ratio") => self.train.mask_ratio = parse_num(section, key, value, "a real in (0, 0.5)")?,
            ("train", "seed") => self.train.seed = parse_num(section, key, value, "an unsigned integer")?,
            ("train", "objective") => self.train.objective = Objective::parse(value).map_err(wrap)?,
            ("train", "t5_target") => self.train.t5_target = T5Target::parse(value).map_err(wrap)?,
            ("train", "lr_multiplier_finetune") => {
                self.train.lr_multiplier_finetune = parse_num(section, key, value, "a positive real")?
            }
            ("train", "log_interval") => self.train.log_interval = parse_num(section, key, value, "a positive integer")?,
            ("train", "checkpoint_interval") => {
                self.train.checkpoint_interval = parse_num(section, key, value, "an integer (0 = final only)")?
            }

            ("data", "corpus") => self.data.corpus = Some(PathBuf::from(value)),
            ("data", "vocab_mode") => self.data.vocab_mode = VocabMode::parse(value).map_err(wrap)?,
            ("data", "vocab_cap") => self.data.vocab_cap = parse_num(section, key, value, "an integer (0 = uncapped)")?,
            ("data", "sentinels") => self.data.sentinels = parse_num(section, key, value, "a non-negative integer")?,
            ("data", "seq_len") => self.data.seq_len = parse_num(section, key, value, "an integer >= 8")?,
            ("data", "tasks") => self.data.tasks = value.to_string(),

            _ => {
                return Err(Error::Config(format!(
                    "[{section}] {key}: unknown configuration key"
                )))
            }
        }
        Ok(())
    }

    /// Parse from INI text. The seed must be present.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seed_seen = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: malformed section header {raw:?}", lineno + 1))
                })?;
                section = name.trim().to_string();
                if !matches!(section.as_str(), "run" | "model" | "train" | "data") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key {key:?} appears before any [section]",
                    lineno + 1
                )));
            }
            cfg.set_key(&section, key, value)?;
            if section == "train" && key == "seed" {
                seed_seen = true;
            }
        }
        if !seed_seen {
            return Err(Error::Config(
                "[train] seed: required, no entropy default (expected an unsigned integer)".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_ini(&text)?;
        cfg.apply_env_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `METROLAB_<SECTION>_<KEY>` overrides.
    pub fn apply_env_overrides(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("METROLAB_") else {
                continue;
            };
            let Some((section, key)) = rest.split_once('_') else {
                return Err(Error::Config(format!(
                    "environment override {name}: expected METROLAB_<SECTION>_<KEY>"
                )));
            };
            self.set_key(&section.to_lowercase(), &key.to_lowercase(), &value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "[run] name: expected a non-empty name without path separators, got {:?}",
                self.name
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.data.seq_len < 8 {
            return Err(Error::Config(format!(
                "[data] seq_len: expected an integer >= 8, got {}",
                self.data.seq_len
            )));
        }
        if self.data.vocab_mode == VocabMode::UnigramCountCap && self.data.vocab_cap == 0 {
            return Err(Error::Config(
                "[data] vocab_cap: required (positive integer) when vocab_mode = unigram-count-cap".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialization; `from_ini(to_ini(c)) == c`.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("name = {}\n", self.name));
        s.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        s.push_str(&format!("precision = {}\n", self.precision));

        s.push_str("\n[model]\n");
        let m = &self.model;
        s.push_str(&format!("d_model = {}\n", m.d_model));
        s.push_str(&format!("n_heads = {}\n", m.n_heads));
        s.push_str(&format!("d_ff = {}\n", m.d_ff));
        s.push_str(&format!("enc_layers = {}\n", m.enc_layers));
        s.push_str(&format!("dec_layers = {}\n", m.dec_layers));
        s.push_str(&format!("aux_layers = {}\n", m.aux_layers));
        s.push_str(&format!("vocab_size = {}\n", m.vocab_size));
        s.push_str(&format!("max_abs_positions = {}\n", m.max_abs_positions));
        s.push_str(&format!("rel_buckets = {}\n", m.rel_buckets));
        s.push_str(&format!("rel_max_distance = {}\n", m.rel_max_distance));
        s.push_str(&format!("dropout = {}\n", m.dropout));
        s.push_str(&format!("rtd_location = {}\n", m.rtd_location));
        s.push_str(&format!("target_variant = {}\n", m.target_variant));
        s.push_str(&format!("masking_kind = {}\n", m.masking_kind));
        s.push_str(&format!("mean_span = {}\n", m.mean_span));
        s.push_str(&format!("norm_style = {}\n", m.norm_style));
        s.push_str(&format!("clm_head_style = {}\n", m.clm_head_style));
        s.push_str(&format!("rel_bias_shared_layers = {}\n", m.rel_bias_shared_layers));
        s.push_str(&format!("tie_embeddings = {}\n", m.tie_embeddings));

        s.push_str("\n[train]\n");
        let t = &self.train;
        s.push_str(&format!("peak_lr = {}\n", t.peak_lr));
        s.push_str(&format!("warmup_steps = {}\n", t.warmup_steps));
        s.push_str(&format!("total_steps = {}\n", t.total_steps));
        s.push_str(&format!("batch_size = {}\n", t.batch_size));
        s.push_str(&format!("adam_beta1 = {}\n", t.adam_beta1));
        s.push_str(&format!("adam_beta2 = {}\n", t.adam_beta2));
        s.push_str(&format!("adam_eps = {}\n", t.adam_eps));
        match t.clip_norm {
            Some(c) => s.push_str(&format!("clip_norm = {c}\n")),
            None => s.push_str("clip_norm = none\n"),
        }
        s.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        s.push_str(&format!("dropout = {}\n", t.dropout));
        s.push_str(&format!("lambda_rtd = {}\n", t.lambda_rtd));
        s.push_str(&format!("lambda_clm = {}\n", t.lambda_clm));
        s.push_str(&format!("mask_ratio = {}\n", t.mask_ratio));
        s.push_str(&format!("seed = {}\n", t.seed));
        s.push_str(&format!("objective = {}\n", t.objective));
        s.push_str(&format!("t5_target = {}\n", t.t5_target));
        s.push_str(&format!("lr_multiplier_finetune = {}\n", t.lr_multiplier_finetune));
        s.push_str(&format!("log_interval = {}\n", t.log_interval));
        s.push_str(&format!("checkpoint_interval = {}\n", t.checkpoint_interval));

        s.push_str("\n[data]\n");
        let d = &self.data;
        if let Some(c) = &d.corpus {
            s.push_str(&format!("corpus = {}\n", c.display()));
        }
        s.push_str(&format!("vocab_mode = {}\n", d.vocab_mode));
        s.push_str(&format!("vocab_cap = {}\n", d.vocab_cap));
        s.push_str(&format!("sentinels = {}\n", d.sentinels));
        s.push_str(&format!("seq_len = {}\n", d.seq_len));
        s.push_str(&format!("tasks = {}\n", d.tasks));
        s
    }
}

/// Named configuration variants of the ablation study: the baseline, each
/// single-switch change, and the two plain-denoising baselines.
pub fn ablation_presets() -> Vec<(&'static str, fn(&mut RunConfig))> {
    vec![
        ("metro", |_c: &mut RunConfig| {}),
        ("clm_all_position", |c: &mut RunConfig| {
            c.model.target_variant = TargetVariant::AllTokens;
        }),
        ("rtd_on_decoder", |c: &mut RunConfig| {
            c.model.rtd_location = RtdLocation::Decoder;
        }),
        ("rtd_on_decoder_projection_clm", |c: &mut RunConfig| {
            c.model.rtd_location = RtdLocation::Decoder;
            c.model.clm_head_style = ClmHeadStyle::Projection;
        }),
        ("continuous_span_mask", |c: &mut RunConfig| {
            c.model.masking_kind = MaskPattern::Span;
        }),
        ("t5_baseline", |c: &mut RunConfig| {
            c.train.objective = Objective::T5Span;
            c.model.masking_kind = MaskPattern::Span;
        }),
        ("t5_all_token_lm", |c: &mut RunConfig| {
            c.train.objective = Objective::T5Span;
            c.model.masking_kind = MaskPattern::Span;
            c.train.t5_target = T5Target::AllTokens;
        }),
    ]
}
