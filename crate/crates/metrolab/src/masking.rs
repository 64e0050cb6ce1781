//! Mask plans: i.i.d. random masking and contiguous span masking, plus
//! mask application and sentinel-style span corruption.
//!
//! Masking is exact-count: exactly round(ratio * usable) positions, at least
//! one, and never a reserved or PAD id. Span masking picks contiguous runs
//! with capped geometric-ish lengths; the conditional statistics of those
//! runs are what the leakage diagnostics measure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, EOS, MASK};

pub const SPAN_LENGTH_CAP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPattern {
    Iid,
    Span,
}

impl MaskPattern {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "span" => Ok(Self::Span),
            other => Err(Error::Config(format!(
                "masking pattern: expected iid|span, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Iid => "iid",
            Self::Span => "span",
        })
    }
}

/// Boolean mask aligned to a token sequence; true = masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub flags: Vec<bool>,
    pub ratio: f64,
    pub pattern: MaskPattern,
}

impl MaskPlan {
    pub fn empty(len: usize, pattern: MaskPattern) -> Self {
        Self {
            flags: vec![false; len],
            ratio: 0.0,
            pattern,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    /// Maximal runs of masked positions as (start, len).
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.flags.len() {
            if self.flags[i] {
                let start = i;
                while i < self.flags.len() && self.flags[i] {
                    i += 1;
                }
                runs.push((start, i - start));
            } else {
                i += 1;
            }
        }
        runs
    }
}

/// Positions eligible for masking: non-reserved (hence non-PAD) tokens.
fn maskable_positions(seq: &[TokenId], vocab: &Vocab) -> Vec<usize> {
    seq.iter()
        .enumerate()
        .filter_map(|(i, &t)| (!vocab.is_reserved(t)).then_some(i))
        .collect()
}

fn mask_budget(usable: usize, ratio: f64) -> usize {
    (((usable as f64) * ratio).round() as usize).max(1)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 0.5) {
        return Err(Error::Contract(format!(
            "masking ratio must be in (0, 0.5), got {ratio}"
        )));
    }
    Ok(())
}

/// Exact-count i.i.d. masking: round(ratio * usable) positions drawn
/// uniformly without replacement, minimum one.
pub fn sample_iid_mask(seq: &[TokenId], vocab: &Vocab, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let mut usable = maskable_positions(seq, vocab);
    if usable.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "sequence has {} maskable tokens; need at least 2",
            usable.len()
        )));
    }
    let budget = mask_budget(usable.len(), ratio);
    // partial Fisher-Yates over the usable positions
    let mut flags = vec![false; seq.len()];
    for pick in 0..budget {
        let j = rng.gen_range(pick..usable.len());
        usable.swap(pick, j);
        flags[usable[pick]] = true;
    }
    Ok(MaskPlan {
        flags,
        ratio,
        pattern: MaskPattern::Iid,
    })
}

/// Geometric-ish span length: support starts at 2 so runs are real spans,
/// mean ~= mean_span, capped.
fn sample_span_len(mean_span: f64, rng: &mut ChaCha8Rng) -> usize {
    let p = 1.0 / (mean_span - 1.0).max(1.0);
    let u: f64 = rng.gen::<f64>().max(1e-12);
    let extra = (u.ln() / (1.0 - p).ln()).floor() as usize;
    (2 + extra).min(SPAN_LENGTH_CAP)
}

/// Contiguous span masking over the maskable region until the same exact
/// budget as i.i.d. masking is met. The final span absorbs a dangling
/// budget of 1 so runs stay spans whenever the budget allows.
pub fn sample_span_mask(
    seq: &[TokenId],
    vocab: &Vocab,
    ratio: f64,
    mean_span: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if mean_span < 2.0 {
        return Err(Error::Contract(format!(
            "mean span length must be at least 2, got {mean_span}"
        )));
    }
    let usable = maskable_positions(seq, vocab);
    if usable.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "sequence has {} maskable tokens; need at least 2",
            usable.len()
        )));
    }
    let budget = mask_budget(usable.len(), ratio);
    let mut flags = vec![false; seq.len()];
    // work in the index space of usable positions (a contiguous prefix in
    // practice, but correct for any layout)
    let m = usable.len();
    let mut masked_usable = vec![false; m];
    let mut remaining = budget;
    let mut stuck = 0;
    while remaining > 0 {
        let mut len = sample_span_len(mean_span, rng).min(remaining);
        if remaining >= 2 && remaining - len == 1 {
            len = remaining; // absorb the dangling single position
        }
        len = len.min(remaining).min(m);
        let placed = place_span(&mut masked_usable, len, rng);
        if placed == 0 {
            stuck += 1;
            if stuck > 4 {
                // fall back to filling any free positions
                for i in 0..m {
                    if remaining == 0 {
                        break;
                    }
                    if !masked_usable[i] {
                        masked_usable[i] = true;
                        remaining -= 1;
                    }
                }
                break;
            }
        } else {
            remaining -= placed;
            stuck = 0;
        }
    }
    for (i, &flag) in masked_usable.iter().enumerate() {
        if flag {
            flags[usable[i]] = true;
        }
    }
    Ok(MaskPlan {
        flags,
        ratio,
        pattern: MaskPattern::Span,
    })
}

/// Try to place one span of exactly `len`, keeping a one-position gap from
/// existing spans; falls back to a scan, then to a shorter span.
fn place_span(masked: &mut [bool], len: usize, rng: &mut ChaCha8Rng) -> usize {
    let m = masked.len();
    if len == 0 || len > m {
        return 0;
    }
    let fits = |masked: &[bool], start: usize, len: usize| {
        let gap_ok = (start == 0 || !masked[start - 1]) && (start + len == m || !masked[start + len]);
        gap_ok && masked[start..start + len].iter().all(|&f| !f)
    };
    for _ in 0..200 {
        let start = rng.gen_range(0..=m - len);
        if fits(masked, start, len) {
            masked[start..start + len].iter_mut().for_each(|f| *f = true);
            return len;
        }
    }
    for start in 0..=m - len {
        if fits(masked, start, len) {
            masked[start..start + len].iter_mut().for_each(|f| *f = true);
            return len;
        }
    }
    if len > 1 {
        return place_span(masked, len - 1, rng);
    }
    0
}

/// Replace masked positions by the shared MASK id.
pub fn apply_mask(seq: &[TokenId], plan: &MaskPlan) -> Result<Vec<TokenId>> {
    if plan.flags.len() != seq.len() {
        return Err(Error::Contract(format!(
            "mask plan of length {} applied to sequence of length {}",
            plan.flags.len(),
            seq.len()
        )));
    }
    Ok(seq
        .iter()
        .zip(&plan.flags)
        .map(|(&t, &f)| if f { MASK } else { t })
        .collect())
}

/// Sentinel-style span corruption: each maximal masked run becomes the next
/// sentinel id in the input; the target interleaves sentinels with the
/// original run tokens and ends with EOS.
pub fn apply_span_corruption(
    seq: &[TokenId],
    plan: &MaskPlan,
    vocab: &Vocab,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    if plan.flags.len() != seq.len() {
        return Err(Error::Contract(format!(
            "mask plan of length {} applied to sequence of length {}",
            plan.flags.len(),
            seq.len()
        )));
    }
    if plan.pattern != MaskPattern::Span {
        return Err(Error::Contract(
            "span corruption requires a span-pattern mask plan".into(),
        ));
    }
    let runs = plan.runs();
    let mut input = Vec::with_capacity(seq.len());
    let mut target = Vec::new();
    let mut run_idx = 0usize;
    let mut i = 0usize;
    while i < seq.len() {
        if plan.flags[i] {
            let (start, len) = runs[run_idx];
            debug_assert_eq!(start, i);
            let sentinel = vocab.sentinel(run_idx)?;
            input.push(sentinel);
            target.push(sentinel);
            target.extend_from_slice(&seq[start..start + len]);
            run_idx += 1;
            i += len;
        } else {
            input.push(seq[i]);
            i += 1;
        }
    }
    target.push(EOS);
    Ok((input, target))
}

/// Splice span-corruption targets back into the corrupted input; inverse of
/// `apply_span_corruption` (the reconstruction oracle).
pub fn reconstruct_from_span_corruption(
    input: &[TokenId],
    target: &[TokenId],
    vocab: &Vocab,
) -> Vec<TokenId> {
    let mut spans: Vec<Vec<TokenId>> = Vec::new();
    for &t in target {
        if t == EOS {
            break;
        }
        if vocab.is_sentinel(t) {
            spans.push(Vec::new());
        } else if let Some(last) = spans.last_mut() {
            last.push(t);
        }
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    for &t in input {
        if vocab.is_sentinel(t) {
            if let Some(span) = spans.get(k) {
                out.extend_from_slice(span);
            }
            k += 1;
        } else {
            out.push(t);
        }
    }
    out
}

/// Pooled conditional statistics over many mask draws: returns
/// (P(mask_i | mask_{i-1}) / P(mask_i)). The span pattern shows strong
/// positional dependence; i.i.d. masking shows none.
pub fn conditional_mask_ratio(draws: &[MaskPlan]) -> f64 {
    let mut pairs_prev = 0u64;
    let mut pairs_both = 0u64;
    let mut masked = 0u64;
    let mut positions = 0u64;
    for plan in draws {
        let n = plan.flags.len();
        for i in 1..n {
            if plan.flags[i - 1] {
                pairs_prev += 1;
                if plan.flags[i] {
                    pairs_both += 1;
                }
            }
        }
        masked += plan.flags.iter().filter(|&&f| f).count() as u64;
        positions += n as u64;
    }
    if pairs_prev == 0 || masked == 0 {
        return 0.0;
    }
    let p_cond = pairs_both as f64 / pairs_prev as f64;
    let p_marginal = masked as f64 / positions as f64;
    p_cond / p_marginal
}
