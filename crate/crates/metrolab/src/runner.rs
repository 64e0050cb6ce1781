//! Run orchestration behind the command-line interface: run directories,
//! manifests with input content hashes, precision dispatch, and one entry
//! point per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::analysis::{
    census_activations, parameter_sensitivity, AnalysisSnapshot, SensitivityFormula,
    DEFAULT_ACTIVATION_THRESHOLD,
};
use crate::config::{ablation_presets, Objective, Precision, RunConfig, TargetVariant};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::eval::evaluate_mixture;
use crate::masking::{self, conditional_mask_ratio, MaskPattern};
use crate::model::checkpoint::{self, peek_precision};
use crate::model::MetroModel;
use crate::objectives::detect_target_ambiguity;
use crate::tasks::{builtin_suite, finetune_pairs, read_task_file, write_task_file, PromptInstance};
use crate::trainer::{self, TrainOutput};
use crate::vocab::{read_corpus, TokenId, Vocab};

/// Map errors onto the documented process exit codes.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Ingestion(_) => 4,
        _ => 1,
    }
}

pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug)]
pub struct CommandOutcome {
    pub run_dir: PathBuf,
    pub diverged: bool,
    pub summary: String,
}

fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(&cfg.name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Ingestion(format!("cannot hash input {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Write `manifest_<command>.txt`: effective config snapshot hash, crate
/// version, and a content hash per input file.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<()> {
    let snapshot = cfg.to_ini();
    fs::write(dir.join("config.ini"), &snapshot)?;
    let mut text = String::new();
    text.push_str(&format!("command = {command}\n"));
    text.push_str(&format!("run = {}\n", cfg.name));
    text.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("seed = {}\n", cfg.train.seed));
    text.push_str(&format!("config.sha256 = {}\n", sha256_hex(snapshot.as_bytes())));
    for (label, path) in inputs {
        text.push_str(&format!(
            "input.{label} = {} sha256={}\n",
            path.display(),
            file_hash(path)?
        ));
    }
    fs::write(dir.join(format!("manifest_{command}.txt")), text)?;
    Ok(())
}

fn corpus_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("[data] corpus: required for this command (path to a text file)".into()))
}

fn load_corpus_and_vocab(cfg: &RunConfig) -> Result<(Vec<String>, Vocab)> {
    let path = corpus_path(cfg)?;
    let docs = read_corpus(path)?;
    let cap = if cfg.data.vocab_cap == 0 { None } else { Some(cfg.data.vocab_cap) };
    let vocab = Vocab::build(&docs, cfg.data.vocab_mode, cap, cfg.data.sentinels)?;
    Ok((docs, vocab))
}

/// Vocabulary for checkpoint-consuming commands: prefer the vocab file
/// saved beside the checkpoint's run, fall back to rebuilding from corpus.
fn vocab_for_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<Vocab> {
    if let Some(parent) = ckpt.parent() {
        for candidate in [parent.join("vocab.txt"), parent.join("../vocab.txt")] {
            if candidate.exists() {
                return Vocab::load(&candidate, cfg.data.vocab_mode, cfg.data.sentinels);
            }
        }
    }
    let (_, vocab) = load_corpus_and_vocab(cfg)?;
    Ok(vocab)
}

/// Resolve `[data] tasks`: builtin generators (written into the run dir for
/// inspection) or semicolon-separated task files.
fn load_tasks(cfg: &RunConfig, vocab: &Vocab, dir: &Path) -> Result<Vec<(String, Vec<PromptInstance>)>> {
    if cfg.data.tasks == "builtin" {
        let suite = builtin_suite(vocab, 200, cfg.train.seed);
        let task_dir = dir.join("tasks");
        fs::create_dir_all(&task_dir)?;
        for (name, instances) in &suite {
            write_task_file(&task_dir.join(format!("{name}.tsv")), instances)?;
        }
        return Ok(suite);
    }
    let mut out = Vec::new();
    for part in cfg.data.tasks.split(';') {
        let path = PathBuf::from(part.trim());
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| part.trim().to_string());
        out.push((name, read_task_file(&path)?));
    }
    Ok(out)
}

fn summarize_training<E: Elem>(out: &TrainOutput<E>) -> String {
    match (&out.diverged, out.metrics.last()) {
        (Some(d), _) => format!("diverged at step {} (loss {}): {}", d.step, d.loss, d.reason),
        (None, Some(last)) => format!(
            "completed {} steps, final combined loss {}",
            out.steps_run, last.combined
        ),
        (None, None) => format!("completed {} steps", out.steps_run),
    }
}

// ---------------------------------------------------------------------------
// pretrain / finetune
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<CommandOutcome> {
    match cfg.precision {
        Precision::F32 => pretrain_impl::<f32>(cfg, resume),
        Precision::F64 => pretrain_impl::<f64>(cfg, resume),
    }
}

fn pretrain_impl<E: Elem>(cfg: &RunConfig, resume: Option<&Path>) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    let (docs, vocab) = load_corpus_and_vocab(cfg)?;
    vocab.save(&dir.join("vocab.txt"))?;
    let mut inputs: Vec<(&str, &Path)> = vec![("corpus", corpus_path(cfg)?)];
    if let Some(r) = resume {
        inputs.push(("resume_checkpoint", r));
    }
    write_manifest(&dir, "pretrain", cfg, &inputs)?;
    let out: TrainOutput<E> = match resume {
        Some(ckpt) => trainer::resume_pretrain(cfg, &docs, &vocab, ckpt, Some(&dir))?,
        None => trainer::pretrain(cfg, &docs, &vocab, Some(&dir))?,
    };
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: out.diverged.is_some(),
        summary: summarize_training(&out),
    })
}

pub fn cmd_finetune(cfg: &RunConfig, from: &Path) -> Result<CommandOutcome> {
    match peek_precision(from)? {
        Precision::F32 => finetune_impl::<f32>(cfg, from),
        Precision::F64 => finetune_impl::<f64>(cfg, from),
    }
}

fn finetune_impl<E: Elem>(cfg: &RunConfig, from: &Path) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    let vocab = vocab_for_checkpoint(cfg, from)?;
    vocab.save(&dir.join("vocab.txt"))?;
    write_manifest(&dir, "finetune", cfg, &[("checkpoint", from)])?;
    let model: MetroModel<E> = checkpoint::load::<E>(from)?.instantiate()?;
    let tasks = load_tasks(cfg, &vocab, &dir)?;
    let pairs = finetune_pairs(&vocab, &tasks);
    let out = trainer::finetune(cfg, model, &pairs, Some(&dir))?;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: out.diverged.is_some(),
        summary: summarize_training(&out),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(cfg: &RunConfig, from: &Path) -> Result<CommandOutcome> {
    match peek_precision(from)? {
        Precision::F32 => eval_impl::<f32>(cfg, from),
        Precision::F64 => eval_impl::<f64>(cfg, from),
    }
}

fn eval_impl<E: Elem>(cfg: &RunConfig, from: &Path) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    let vocab = vocab_for_checkpoint(cfg, from)?;
    write_manifest(&dir, "eval", cfg, &[("checkpoint", from)])?;
    let model: MetroModel<E> = checkpoint::load::<E>(from)?.instantiate()?;
    let tasks = load_tasks(cfg, &vocab, &dir)?;
    let reports = evaluate_mixture(&model, &vocab, &tasks)?;
    let mut csv = String::from("task,template,correct,total,accuracy\n");
    for r in &reports {
        for t in &r.templates {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.task,
                t.template_id,
                t.correct,
                t.total,
                t.accuracy()
            ));
        }
        csv.push_str(&format!("{},(mean),,,{}\n", r.task, r.score));
    }
    fs::write(dir.join("eval_report.csv"), &csv)?;
    let mean_over_tasks =
        reports.iter().map(|r| r.score).sum::<f64>() / reports.len().max(1) as f64;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary: format!("evaluated {} tasks, mean score {mean_over_tasks}", reports.len()),
    })
}

// ---------------------------------------------------------------------------
// analyses
// ---------------------------------------------------------------------------

/// Deterministic analysis sample: finetune-style pairs from the task suite.
fn analysis_sample(
    cfg: &RunConfig,
    vocab: &Vocab,
    dir: &Path,
    cap: usize,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let tasks = load_tasks(cfg, vocab, dir)?;
    let mut pairs = finetune_pairs(vocab, &tasks);
    pairs.truncate(cap);
    if pairs.is_empty() {
        return Err(Error::Ingestion("analysis sample is empty".into()));
    }
    Ok(pairs)
}

pub fn cmd_analyze_activations(cfg: &RunConfig, from: &Path, threshold: f64) -> Result<CommandOutcome> {
    match peek_precision(from)? {
        Precision::F32 => analyze_activations_impl::<f32>(cfg, from, threshold),
        Precision::F64 => analyze_activations_impl::<f64>(cfg, from, threshold),
    }
}

fn analyze_activations_impl<E: Elem>(
    cfg: &RunConfig,
    from: &Path,
    threshold: f64,
) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    let vocab = vocab_for_checkpoint(cfg, from)?;
    write_manifest(&dir, "analyze-activations", cfg, &[("checkpoint", from)])?;
    let model: MetroModel<E> = checkpoint::load::<E>(from)?.instantiate()?;
    let sample = analysis_sample(cfg, &vocab, &dir, 64)?;
    let report = census_activations(&model, &sample, threshold)?;
    fs::write(dir.join("activations.csv"), report.to_csv())?;
    let summary = format!(
        "under_activated={} total={} pct={}",
        report.under_activated,
        report.total_neurons,
        report.under_activated_pct()
    );
    fs::write(dir.join("activation_summary.txt"), format!("{summary}\n"))?;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary,
    })
}

pub fn cmd_analyze_sensitivity(
    cfg: &RunConfig,
    from: &Path,
    formula: SensitivityFormula,
) -> Result<CommandOutcome> {
    match peek_precision(from)? {
        Precision::F32 => analyze_sensitivity_impl::<f32>(cfg, from, formula),
        Precision::F64 => analyze_sensitivity_impl::<f64>(cfg, from, formula),
    }
}

fn analyze_sensitivity_impl<E: Elem>(
    cfg: &RunConfig,
    from: &Path,
    formula: SensitivityFormula,
) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    let vocab = vocab_for_checkpoint(cfg, from)?;
    write_manifest(&dir, "analyze-sensitivity", cfg, &[("checkpoint", from)])?;
    let model: MetroModel<E> = checkpoint::load::<E>(from)?.instantiate()?;
    let sample = analysis_sample(cfg, &vocab, &dir, 64)?;
    let report = parameter_sensitivity(&model, &sample, formula)?;
    fs::write(dir.join("sensitivity.csv"), report.to_csv())?;
    let mut hist = String::from("upper_edge,count\n");
    for (i, count) in report.histogram.counts.iter().enumerate() {
        let label = if i < report.histogram.edges.len() {
            format!("{}", report.histogram.edges[i])
        } else {
            "inf".to_string()
        };
        hist.push_str(&format!("{label},{count}\n"));
    }
    fs::write(dir.join("sensitivity_histogram.csv"), hist)?;
    let summary = format!(
        "sensitivity mean={} var={} p99={}",
        report.global.mean, report.global.var, report.global.p99
    );
    fs::write(dir.join("sensitivity_summary.txt"), format!("{summary}\n"))?;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary,
    })
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

pub fn cmd_diagnose_ambiguity(
    cfg: &RunConfig,
    from: Option<&Path>,
    ratio: f64,
    trials: usize,
    variant: Option<TargetVariant>,
) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    let (docs, vocab) = load_corpus_and_vocab(cfg)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("corpus", corpus_path(cfg)?)];
    if let Some(f) = from {
        inputs.push(("checkpoint", f));
    }
    write_manifest(&dir, "diagnose-ambiguity", cfg, &inputs)?;

    // the auxiliary scorer: a checkpointed model if given, otherwise a
    // seeded random initialization (the mechanism is data-level)
    let model: MetroModel<f64> = match from {
        Some(ckpt) => checkpoint::load::<f64>(ckpt)?.instantiate()?,
        None => {
            let mut cfg_model = cfg.model.clone();
            if cfg_model.vocab_size == 0 {
                cfg_model.vocab_size = vocab.len();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            MetroModel::new(&cfg_model, &mut rng)?
        }
    };
    let seqs: Vec<Vec<TokenId>> = docs
        .iter()
        .map(|d| vocab.encode(d))
        .filter(|s| s.len() >= 2)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let reports = detect_target_ambiguity(&model, &seqs, &vocab, ratio, trials, 1.0, &mut rng)?;
    let mut csv = String::from(
        "variant,draws,collision_pairs,ambiguous_pairs,rate,mask_divergence_pairs,mask_divergence_rate\n",
    );
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.draws, r.collision_pairs, r.ambiguous_pairs, r.rate,
            r.mask_divergence_pairs, r.mask_divergence_rate
        ));
    }
    fs::write(dir.join("ambiguity.csv"), &csv)?;
    let summary = match variant {
        Some(v) => {
            let r = reports
                .iter()
                .find(|r| r.variant == v)
                .expect("all variants reported");
            format!("variant {} ambiguity rate {}", r.variant, r.rate)
        }
        None => reports
            .iter()
            .map(|r| format!("{}={}", r.variant, r.rate))
            .collect::<Vec<_>>()
            .join(" "),
    };
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary,
    })
}

pub fn cmd_diagnose_leakage(cfg: &RunConfig, n: usize, draws: usize) -> Result<CommandOutcome> {
    let dir = run_dir(cfg)?;
    write_manifest(&dir, "diagnose-leakage", cfg, &[])?;
    // the statistic depends only on the mask sampler; a one-word vocabulary
    // provides the maskable sequence
    let vocab = Vocab::build(&["x".to_string()], crate::vocab::VocabMode::Word, None, 0)?;
    let seq = vec![vocab.reserved_len() as TokenId; n];
    let ratio = cfg.train.mask_ratio;
    let mean_span = cfg.model.mean_span;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let iid: Vec<masking::MaskPlan> = (0..draws)
        .map(|_| masking::sample_iid_mask(&seq, &vocab, ratio, &mut rng))
        .collect::<Result<_>>()?;
    let span: Vec<masking::MaskPlan> = (0..draws)
        .map(|_| masking::sample_span_mask(&seq, &vocab, ratio, mean_span, &mut rng))
        .collect::<Result<_>>()?;
    let iid_ratio = conditional_mask_ratio(&iid);
    let span_ratio = conditional_mask_ratio(&span);
    let csv = format!(
        "pattern,n,draws,mask_ratio,conditional_ratio\niid,{n},{draws},{ratio},{iid_ratio}\nspan,{n},{draws},{ratio},{span_ratio}\n"
    );
    fs::write(dir.join("leakage.csv"), &csv)?;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary: format!("conditional ratio iid={iid_ratio} span={span_ratio}"),
    })
}

// ---------------------------------------------------------------------------
// ablation grid / export
// ---------------------------------------------------------------------------

pub fn cmd_ablation_grid(cfg: &RunConfig, preset: &str, steps: Option<u64>) -> Result<CommandOutcome> {
    if preset != "table4" {
        return Err(Error::Config(format!(
            "ablation preset: expected table4, got {preset:?}"
        )));
    }
    let dir = run_dir(cfg)?;
    write_manifest(&dir, "ablation-grid", cfg, &[("corpus", corpus_path(cfg)?)])?;
    let mut summary_csv = String::from("name,steps,diverged,final_combined\n");
    let mut lines = Vec::new();
    for (name, apply) in ablation_presets() {
        let mut sub = cfg.clone();
        apply(&mut sub);
        if let Some(s) = steps {
            sub.train.total_steps = s;
            sub.train.warmup_steps = sub.train.warmup_steps.min((s / 4).max(1));
        }
        if sub.train.objective == Objective::Metro && sub.model.masking_kind == MaskPattern::Span {
            // the continuous-span row keeps everything else baseline
        }
        sub.output_dir = dir.clone();
        sub.name = name.to_string();
        let outcome = cmd_pretrain(&sub, None)?;
        let final_loss = read_final_combined(&outcome.run_dir).unwrap_or(f64::NAN);
        summary_csv.push_str(&format!(
            "{},{},{},{}\n",
            name,
            sub.train.total_steps,
            outcome.diverged,
            final_loss
        ));
        lines.push(format!("{name}: {}", outcome.summary));
    }
    fs::write(dir.join("grid_summary.csv"), &summary_csv)?;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary: lines.join("; "),
    })
}

fn read_final_combined(run_dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(run_dir.join("metrics.csv")).ok()?;
    let last = text.lines().filter(|l| !l.is_empty()).next_back()?;
    let cols: Vec<&str> = last.split(',').collect();
    cols.get(4)?.parse().ok()
}

/// Aggregate every run directory under the output dir into one report —
/// reads existing artifacts, recomputes nothing.
pub fn cmd_export_report(cfg: &RunConfig) -> Result<CommandOutcome> {
    let root = cfg.output_dir.clone();
    if !root.exists() {
        return Err(Error::Ingestion(format!(
            "output dir {} does not exist",
            root.display()
        )));
    }
    let mut rows = Vec::new();
    collect_report_rows(&root, &mut rows)?;
    rows.sort();
    let mut csv = String::from("run,final_combined,diverged,under_activated_pct,eval_mean\n");
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    let dir = run_dir(cfg)?;
    fs::write(dir.join("report.csv"), &csv)?;
    Ok(CommandOutcome {
        run_dir: dir,
        diverged: false,
        summary: format!("aggregated {} runs", rows.len()),
    })
}

fn collect_report_rows(root: &Path, rows: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let has_artifacts = path.join("metrics.csv").exists()
            || path.join("eval_report.csv").exists()
            || path.join("activation_summary.txt").exists();
        if has_artifacts {
            let name = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .to_string();
            let final_loss = read_final_combined(&path)
                .map(|v| v.to_string())
                .unwrap_or_default();
            let diverged = path.join("divergence.txt").exists();
            let under_pct = fs::read_to_string(path.join("activation_summary.txt"))
                .ok()
                .and_then(|s| {
                    s.split("pct=")
                        .nth(1)
                        .map(|t| t.trim().to_string())
                })
                .unwrap_or_default();
            let eval_mean = fs::read_to_string(path.join("eval_report.csv"))
                .ok()
                .map(|s| {
                    let scores: Vec<f64> = s
                        .lines()
                        .filter(|l| l.contains("(mean)"))
                        .filter_map(|l| l.split(',').next_back()?.parse().ok())
                        .collect();
                    if scores.is_empty() {
                        String::new()
                    } else {
                        (scores.iter().sum::<f64>() / scores.len() as f64).to_string()
                    }
                })
                .unwrap_or_default();
            rows.push(format!("{name},{final_loss},{diverged},{under_pct},{eval_mean}"));
        }
        collect_report_rows(&path, rows)?;
    }
    Ok(())
}

/// Run introspection over a series of checkpoints and produce the
/// side-by-side table against another run's series.
pub fn snapshot_series<E: Elem>(
    cfg: &RunConfig,
    vocab: &Vocab,
    checkpoints: &[(String, PathBuf)],
) -> Result<Vec<AnalysisSnapshot>> {
    let dir = run_dir(cfg)?;
    let mut out = Vec::new();
    for (label, path) in checkpoints {
        let model: MetroModel<E> = checkpoint::load::<E>(path)?.instantiate()?;
        let sample = analysis_sample(cfg, vocab, &dir, 32)?;
        let act = census_activations(&model, &sample, DEFAULT_ACTIVATION_THRESHOLD)?;
        let sens = parameter_sensitivity(&model, &sample, SensitivityFormula::TaylorZeroOut)?;
        out.push(AnalysisSnapshot {
            label: label.clone(),
            under_activated_pct: act.under_activated_pct(),
            sensitivity_var: sens.global.var,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::corpus_file as toy_corpus_file;

    fn base_cfg(dir: &Path, name: &str, corpus: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.name = name.into();
        cfg.output_dir = dir.to_path_buf();
        cfg.train.seed = 5;
        cfg.train.total_steps = 12;
        cfg.train.warmup_steps = 3;
        cfg.train.batch_size = 4;
        cfg.train.log_interval = 2;
        cfg.train.checkpoint_interval = 6;
        cfg.data.seq_len = 16;
        cfg.data.corpus = Some(corpus.to_path_buf());
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.d_ff = 32;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.aux_layers = 1;
        cfg.model.max_abs_positions = 32;
        cfg.model.rel_buckets = 8;
        cfg.model.rel_max_distance = 16;
        cfg
    }

    #[test]
    fn pretrain_writes_run_artifacts_and_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = toy_corpus_file(tmp.path(), 30, 40, 12, 3);
        let cfg = base_cfg(tmp.path(), "demo", &corpus);
        let outcome = cmd_pretrain(&cfg, None).unwrap();
        assert!(!outcome.diverged);
        let dir = outcome.run_dir;
        for file in [
            "manifest_pretrain.txt",
            "config.ini",
            "vocab.txt",
            "metrics.csv",
            "checkpoint_final.ckpt",
        ] {
            assert!(dir.join(file).exists(), "{file} missing");
        }
        let manifest = fs::read_to_string(dir.join("manifest_pretrain.txt")).unwrap();
        assert!(manifest.contains("sha256="));
        assert!(manifest.contains("command = pretrain"));
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(crate::trainer::MetricsRow::HEADER));
    }

    #[test]
    fn pretrain_same_seed_is_byte_identical_at_f64() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = toy_corpus_file(tmp.path(), 30, 40, 12, 3);
        let mut cfg = base_cfg(tmp.path(), "det_a", &corpus);
        cfg.precision = Precision::F64;
        cmd_pretrain(&cfg, None).unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.name = "det_b".into();
        cmd_pretrain(&cfg_b, None).unwrap();
        let a = fs::read(tmp.path().join("det_a/metrics.csv")).unwrap();
        let b = fs::read(tmp.path().join("det_b/metrics.csv")).unwrap();
        assert_eq!(a, b, "same seed, byte-identical metrics");
    }

    #[test]
    fn finetune_eval_and_analyses_run_from_a_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = toy_corpus_file(tmp.path(), 30, 40, 12, 3);
        let cfg = base_cfg(tmp.path(), "pipeline", &corpus);
        let pre = cmd_pretrain(&cfg, None).unwrap();
        let ckpt = pre.run_dir.join("checkpoint_final.ckpt");

        let mut ft = cfg.clone();
        ft.name = "pipeline_ft".into();
        ft.train.total_steps = 6;
        ft.train.warmup_steps = 2;
        let out = cmd_finetune(&ft, &ckpt).unwrap();
        let ft_ckpt = out.run_dir.join("checkpoint_final.ckpt");
        assert!(ft_ckpt.exists());

        let mut ev = cfg.clone();
        ev.name = "pipeline_eval".into();
        let out = cmd_eval(&ev, &ft_ckpt).unwrap();
        let report = fs::read_to_string(out.run_dir.join("eval_report.csv")).unwrap();
        assert!(report.contains("(mean)"));
        assert!(report.lines().count() > 4);

        let mut act = cfg.clone();
        act.name = "pipeline_act".into();
        let out = cmd_analyze_activations(&act, &ft_ckpt, DEFAULT_ACTIVATION_THRESHOLD).unwrap();
        assert!(out.run_dir.join("activations.csv").exists());

        let mut sens = cfg.clone();
        sens.name = "pipeline_sens".into();
        let out =
            cmd_analyze_sensitivity(&sens, &ft_ckpt, SensitivityFormula::TaylorZeroOut).unwrap();
        assert!(out.run_dir.join("sensitivity.csv").exists());
        assert!(out.run_dir.join("sensitivity_histogram.csv").exists());

        let mut export = cfg.clone();
        export.name = "pipeline_report".into();
        let out = cmd_export_report(&export).unwrap();
        let report = fs::read_to_string(out.run_dir.join("report.csv")).unwrap();
        assert!(report.lines().count() >= 4, "{report}");
    }

    #[test]
    fn diagnose_leakage_shows_span_dependence() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = toy_corpus_file(tmp.path(), 10, 30, 8, 3);
        let mut cfg = base_cfg(tmp.path(), "leak", &corpus);
        cfg.train.mask_ratio = 0.15;
        let out = cmd_diagnose_leakage(&cfg, 100, 3000).unwrap();
        let csv = fs::read_to_string(out.run_dir.join("leakage.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        let iid: f64 = lines[1].split(',').next_back().unwrap().parse().unwrap();
        let span: f64 = lines[2].split(',').next_back().unwrap().parse().unwrap();
        assert!((iid - 1.0).abs() < 0.15, "iid ratio {iid}");
        assert!(span > 3.0, "span ratio {span}");
    }

    #[test]
    fn ablation_grid_produces_seven_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = toy_corpus_file(tmp.path(), 20, 40, 10, 3);
        let mut cfg = base_cfg(tmp.path(), "grid", &corpus);
        cfg.train.log_interval = 4;
        cfg.train.checkpoint_interval = 0;
        let out = cmd_ablation_grid(&cfg, "table4", Some(8)).unwrap();
        let summary = fs::read_to_string(out.run_dir.join("grid_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 8, "header + 7 rows: {summary}");
        for (name, _) in ablation_presets() {
            assert!(out.run_dir.join(name).join("metrics.csv").exists(), "{name}");
        }
    }

    #[test]
    fn exit_codes_match_error_classes() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 2);
        assert_eq!(exit_code_for(&Error::Divergence { step: 1, loss: 1.0 }), 3);
        assert_eq!(exit_code_for(&Error::Ingestion("x".into())), 4);
        assert_eq!(exit_code_for(&Error::Contract("x".into())), 1);
    }
}
