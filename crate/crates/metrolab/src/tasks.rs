//! Synthetic prompted tasks: generators, the tab-separated task file
//! format, and conversion to seq2seq finetuning pairs.
//!
//! Task content is drawn from the run's own vocabulary so every instance
//! stays encodable regardless of the corpus. Each generator emits several
//! prompt templates and exactly balanced answers.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// One multiple-choice item: input text, candidate target texts, and the
/// index of the correct candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    pub template_id: String,
    pub input: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

impl PromptInstance {
    pub fn new(template_id: impl Into<String>, input: impl Into<String>, choices: Vec<String>, answer: usize) -> Result<Self> {
        let inst = Self {
            template_id: template_id.into(),
            input: input.into(),
            choices,
            answer,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::Contract(format!(
                "instance needs at least 2 choices, got {}",
                self.choices.len()
            )));
        }
        if self.answer >= self.choices.len() {
            return Err(Error::Contract(format!(
                "answer index {} out of range for {} choices",
                self.answer,
                self.choices.len()
            )));
        }
        for (i, a) in self.choices.iter().enumerate() {
            for b in &self.choices[i + 1..] {
                if a == b {
                    return Err(Error::Contract(format!("duplicate choice {a:?}")));
                }
            }
        }
        Ok(())
    }
}

fn check_field(field: &str) -> Result<()> {
    if field.contains('\t') || field.contains('\n') {
        return Err(Error::Ingestion(format!(
            "task fields must not contain literal tabs or newlines: {field:?}"
        )));
    }
    Ok(())
}

/// Tab-separated, one instance per line:
/// `template_id <TAB> input <TAB> choice... <TAB> answer_index`.
pub fn write_task_file(path: &Path, instances: &[PromptInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        inst.validate()?;
        check_field(&inst.template_id)?;
        check_field(&inst.input)?;
        for c in &inst.choices {
            check_field(c)?;
        }
        out.push_str(&inst.template_id);
        out.push('\t');
        out.push_str(&inst.input);
        for c in &inst.choices {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\t');
        out.push_str(&inst.answer.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_task_file(path: &Path) -> Result<Vec<PromptInstance>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read task file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(Error::Ingestion(format!(
                "{}:{}: expected template, input, >=2 choices, answer; got {} fields",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let answer: usize = fields[fields.len() - 1].parse().map_err(|_| {
            Error::Ingestion(format!(
                "{}:{}: answer index is not an integer",
                path.display(),
                lineno + 1
            ))
        })?;
        let inst = PromptInstance::new(
            fields[0],
            fields[1],
            fields[2..fields.len() - 1].iter().map(|s| s.to_string()).collect(),
            answer,
        )
        .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("task file {} is empty", path.display())));
    }
    Ok(out)
}

/// Word pool for generators: decoded non-reserved vocabulary tokens.
fn content_words(vocab: &Vocab, cap: usize) -> Vec<String> {
    let start = vocab.reserved_len() as TokenId;
    (start..vocab.len() as TokenId)
        .take(cap)
        .map(|id| vocab.decode_one(id))
        .collect()
}

fn swap_one_word(words: &[String], pool: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = words.to_vec();
    let pos = rng.gen_range(0..out.len());
    let mut replacement = pool[rng.gen_range(0..pool.len())].clone();
    while replacement == out[pos] {
        replacement = pool[rng.gen_range(0..pool.len())].clone();
    }
    out[pos] = replacement;
    out
}

/// Repeat-the-input task; the wrong choice corrupts one word.
pub fn gen_copy_task(vocab: &Vocab, items: usize, seed: u64) -> Vec<PromptInstance> {
    let pool = content_words(vocab, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = ["copy0", "copy1"];
    (0..items)
        .map(|i| {
            let len = rng.gen_range(3..=5);
            let words: Vec<String> = (0..len).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect();
            let phrase = words.join(" ");
            let corrupted = swap_one_word(&words, &pool, &mut rng).join(" ");
            let template = templates[i % templates.len()];
            let input = match template {
                "copy0" => format!("copy : {phrase}"),
                _ => format!("repeat : {phrase}"),
            };
            let (choices, answer) = if i % 2 == 0 {
                (vec![phrase, corrupted], 0)
            } else {
                (vec![corrupted, phrase], 1)
            };
            PromptInstance::new(template, input, choices, answer).expect("generated instance valid")
        })
        .collect()
}

/// Entailment toy: the premise pairs word k with its fixed successor; the
/// hypothesis either repeats the pair (yes) or breaks it (no).
pub fn gen_nli_task(vocab: &Vocab, items: usize, seed: u64) -> Vec<PromptInstance> {
    let pool = content_words(vocab, 32);
    let yes = pool[0].clone();
    let no = pool[1].clone();
    let facts = &pool[2..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = ["nli0", "nli1", "nli2"];
    (0..items)
        .map(|i| {
            let a = rng.gen_range(0..facts.len());
            let b = (a * 5 + 3) % facts.len();
            let entail = i % 2 == 0;
            let hyp_b = if entail {
                b
            } else {
                let mut other = rng.gen_range(0..facts.len());
                while other == b {
                    other = rng.gen_range(0..facts.len());
                }
                other
            };
            let template = templates[i % templates.len()];
            let input = match template {
                "nli0" => format!("premise : {} {} hypothesis : {} {}", facts[a], facts[b], facts[a], facts[hyp_b]),
                "nli1" => format!("given {} {} is {} {} true", facts[a], facts[b], facts[a], facts[hyp_b]),
                _ => format!("{} {} entails {} {} ?", facts[a], facts[b], facts[a], facts[hyp_b]),
            };
            let answer = usize::from(!entail);
            PromptInstance::new(template, input, vec![yes.clone(), no.clone()], answer)
                .expect("generated instance valid")
        })
        .collect()
}

/// Word-sense toy: a cue word selects which "sense" word is correct.
pub fn gen_wordsense_task(vocab: &Vocab, items: usize, seed: u64) -> Vec<PromptInstance> {
    let pool = content_words(vocab, 32);
    let sense_a = pool[0].clone();
    let sense_b = pool[1].clone();
    let cue_a = pool[2].clone();
    let cue_b = pool[3].clone();
    let rest = &pool[4..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = ["ws0", "ws1"];
    (0..items)
        .map(|i| {
            let carrier = &rest[rng.gen_range(0..rest.len())];
            let first_sense = i % 2 == 0;
            let cue = if first_sense { &cue_a } else { &cue_b };
            let template = templates[i % templates.len()];
            let input = match template {
                "ws0" => format!("{carrier} {cue} sense ?"),
                _ => format!("meaning of {carrier} near {cue}"),
            };
            let answer = usize::from(!first_sense);
            PromptInstance::new(template, input, vec![sense_a.clone(), sense_b.clone()], answer)
                .expect("generated instance valid")
        })
        .collect()
}

/// Sequence completion: predict the fixed successor of the last word.
pub fn gen_completion_task(vocab: &Vocab, items: usize, seed: u64) -> Vec<PromptInstance> {
    let pool = content_words(vocab, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = ["cmp0", "cmp1"];
    (0..items)
        .map(|i| {
            let start = rng.gen_range(0..pool.len());
            let succ = |k: usize| (k * 3 + 1) % pool.len();
            let s2 = succ(start);
            let s3 = succ(s2);
            let correct = pool[succ(s3)].clone();
            let mut wrong_i = rng.gen_range(0..pool.len());
            while pool[wrong_i] == correct {
                wrong_i = rng.gen_range(0..pool.len());
            }
            let wrong = pool[wrong_i].clone();
            let template = templates[i % templates.len()];
            let input = match template {
                "cmp0" => format!("next : {} {} {}", pool[start], pool[s2], pool[s3]),
                _ => format!("{} {} {} then", pool[start], pool[s2], pool[s3]),
            };
            let (choices, answer) = if i % 2 == 0 {
                (vec![correct, wrong], 0)
            } else {
                (vec![wrong, correct], 1)
            };
            PromptInstance::new(template, input, choices, answer).expect("generated instance valid")
        })
        .collect()
}

/// The full builtin mixture, one (name, instances) entry per task.
pub fn builtin_suite(vocab: &Vocab, items_per_task: usize, seed: u64) -> Vec<(String, Vec<PromptInstance>)> {
    vec![
        ("copy".into(), gen_copy_task(vocab, items_per_task, seed)),
        ("nli".into(), gen_nli_task(vocab, items_per_task, seed.wrapping_add(1))),
        ("wordsense".into(), gen_wordsense_task(vocab, items_per_task, seed.wrapping_add(2))),
        ("completion".into(), gen_completion_task(vocab, items_per_task, seed.wrapping_add(3))),
    ]
}

/// Seq2seq pairs for finetuning: (input tokens, correct-choice tokens).
pub fn finetune_pairs(vocab: &Vocab, tasks: &[(String, Vec<PromptInstance>)]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let mut out = Vec::new();
    for (_, instances) in tasks {
        for inst in instances {
            let input = vocab.encode(&inst.input);
            let target = vocab.encode(&inst.choices[inst.answer]);
            if !input.is_empty() && !target.is_empty() {
                out.push((input, target));
            }
        }
    }
    out
}

/// Deterministic train/held-out split by index parity-of-hash.
pub fn split_pairs(
    pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    held_out_every: usize,
) -> (Vec<(Vec<TokenId>, Vec<TokenId>)>, Vec<(Vec<TokenId>, Vec<TokenId>)>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, p) in pairs.into_iter().enumerate() {
        if held_out_every > 0 && i % held_out_every == 0 {
            held.push(p);
        } else {
            train.push(p);
        }
    }
    (train, held)
}
