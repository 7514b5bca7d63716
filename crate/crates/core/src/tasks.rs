//! Synthetic verifiable task families.
//!
//! * modular addition: prompt `Mma+b`, answer `(a+b) mod m`. The operands
//!   come last so they sit inside a short context window at answer time;
//! * digit reversal: prompt `Rd1..dn`, answer `dn..d1` (last digit nonzero so
//!   the answer has no leading zero);
//! * two-part: a modular addition and a reversal joined by `;`, with two
//!   ordered gold answers.
//!
//! Responses are token strings. Under the raw-token protocol the emission
//! (up to EOS) is split on `;` and each segment is graded as one answer;
//! under the boxed-text protocol each segment is wrapped in `\boxed{}` and
//! the resulting text goes through boxed-answer extraction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{Problem, Provenance};
use crate::policy::{Token, Vocabulary, BOS, EOS};
use crate::seed;
use crate::verifier::{RewardReport, Verifier};

pub const SEPARATOR: &str = ";";
pub const PLUS: &str = "+";
pub const MOD: &str = "M";
pub const REVERSE: &str = "R";

pub const MAX_OPERAND_DIGITS: u32 = 3;
pub const MAX_MODULUS: u64 = 1000;
pub const MAX_REVERSE_LENGTH: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("tier ladder is not strictly harder at tier {index}: pass rate {rate} vs previous {previous}")]
    LadderInvalid { index: usize, rate: f64, previous: f64 },
}

/// The fixed task vocabulary: BOS, EOS, digits, `+`, `M`, `R`, `;`.
pub fn task_vocabulary() -> Vocabulary {
    let mut symbols = vec![BOS.to_string(), EOS.to_string()];
    symbols.extend((0..10).map(|d| d.to_string()));
    symbols.extend([PLUS, MOD, REVERSE, SEPARATOR].map(String::from));
    Vocabulary::new(symbols).expect("task vocabulary is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    ModularAdd { operand_digits: u32, modulus: u64 },
    DigitReverse { length: usize },
    TwoPart { operand_digits: u32, modulus: u64, length: usize },
}

impl Family {
    /// Short tier label, e.g. `mod-add-d2-m100`.
    pub fn tier_name(&self) -> String {
        match *self {
            Family::ModularAdd { operand_digits, modulus } => format!("mod-add-d{operand_digits}-m{modulus}"),
            Family::DigitReverse { length } => format!("reverse-n{length}"),
            Family::TwoPart { operand_digits, modulus, length } => {
                format!("two-part-d{operand_digits}-m{modulus}-n{length}")
            }
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let check_add = |digits: u32, modulus: u64| {
            if !(1..=MAX_OPERAND_DIGITS).contains(&digits) {
                return Err(TaskError::InvalidSpec(format!(
                    "operand_digits must be in 1..={MAX_OPERAND_DIGITS}, got {digits}"
                )));
            }
            if !(2..=MAX_MODULUS).contains(&modulus) {
                return Err(TaskError::InvalidSpec(format!("modulus must be in 2..={MAX_MODULUS}, got {modulus}")));
            }
            Ok(())
        };
        let check_len = |length: usize| {
            if !(1..=MAX_REVERSE_LENGTH).contains(&length) {
                return Err(TaskError::InvalidSpec(format!(
                    "length must be in 1..={MAX_REVERSE_LENGTH}, got {length}"
                )));
            }
            Ok(())
        };
        match *self {
            Family::ModularAdd { operand_digits, modulus } => check_add(operand_digits, modulus),
            Family::DigitReverse { length } => check_len(length),
            Family::TwoPart { operand_digits, modulus, length } => {
                check_add(operand_digits, modulus)?;
                check_len(length)
            }
        }
    }

    /// Exact distribution of total answer length in tokens (segments plus
    /// separators), enumerated over the operand grid.
    pub fn answer_length_distribution(&self) -> BTreeMap<usize, f64> {
        let add_lengths = |digits: u32, modulus: u64| {
            let (lo, hi) = operand_range(digits);
            let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
            for a in lo..=hi {
                for b in lo..=hi {
                    *counts.entry(((a + b) % modulus).to_string().len()).or_default() += 1;
                }
            }
            let total = ((hi - lo + 1) * (hi - lo + 1)) as f64;
            counts.into_iter().map(|(l, c)| (l, c as f64 / total)).collect::<BTreeMap<_, _>>()
        };
        match *self {
            Family::ModularAdd { operand_digits, modulus } => add_lengths(operand_digits, modulus),
            Family::DigitReverse { length } => BTreeMap::from([(length, 1.0)]),
            Family::TwoPart { operand_digits, modulus, length } => add_lengths(operand_digits, modulus)
                .into_iter()
                .map(|(l, p)| (l + 1 + length, p))
                .collect(),
        }
    }

    /// Probability that the zero-parameter (uniform) policy over `v` tokens
    /// emits exactly the gold token string within `window` tokens: the
    /// answer followed by EOS, or the bare answer when it fills the window.
    ///
    /// Graded pass rates can be slightly higher, because the verifier also
    /// accepts equivalent spellings such as `+7` or `3+4` for `7`.
    pub fn uniform_pass_rate(&self, v: usize, window: usize) -> f64 {
        let v = v as f64;
        self.answer_length_distribution()
            .into_iter()
            .map(|(len, p)| match len.cmp(&window) {
                std::cmp::Ordering::Less => p * v.powi(-(len as i32 + 1)),
                std::cmp::Ordering::Equal => p * v.powi(-(len as i32)),
                std::cmp::Ordering::Greater => 0.0,
            })
            .sum()
    }

    /// Longest possible answer in tokens.
    pub fn max_answer_len(&self) -> usize {
        *self.answer_length_distribution().keys().last().expect("nonempty distribution")
    }
}

fn operand_range(digits: u32) -> (u64, u64) {
    if digits == 1 {
        (0, 9)
    } else {
        (10u64.pow(digits - 1), 10u64.pow(digits) - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub family: Family,
    pub count: usize,
    pub seed: u64,
}

fn digits_of(n: u64) -> Vec<String> {
    n.to_string().chars().map(|c| c.to_string()).collect()
}

fn modular_add(rng: &mut ChaCha8Rng, digits: u32, modulus: u64) -> (Vec<String>, String) {
    let (lo, hi) = operand_range(digits);
    let (a, b) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    let mut prompt = vec![MOD.to_string()];
    prompt.extend(digits_of(modulus));
    prompt.extend(digits_of(a));
    prompt.push(PLUS.into());
    prompt.extend(digits_of(b));
    (prompt, ((a + b) % modulus).to_string())
}

fn digit_reverse(rng: &mut ChaCha8Rng, length: usize) -> (Vec<String>, String) {
    let mut digits: Vec<u32> = (0..length).map(|_| rng.random_range(0..10)).collect();
    digits[length - 1] = rng.random_range(1..10);
    let mut prompt = vec![REVERSE.to_string()];
    prompt.extend(digits.iter().map(|d| d.to_string()));
    (prompt, digits.iter().rev().map(|d| d.to_string()).collect())
}

/// Deterministic dataset for `spec`; ids are `{tier}-{seed}-{index}`.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Vec<Problem>, TaskError> {
    spec.family.validate()?;
    if spec.count == 0 {
        return Err(TaskError::InvalidSpec("count must be at least 1".into()));
    }
    let tier = spec.family.tier_name();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[spec.seed, seed::hash_str(&tier)]));
    Ok((0..spec.count)
        .map(|i| {
            let (prompt, answers) = match spec.family {
                Family::ModularAdd { operand_digits, modulus } => {
                    let (p, a) = modular_add(&mut rng, operand_digits, modulus);
                    (p, vec![a])
                }
                Family::DigitReverse { length } => {
                    let (p, a) = digit_reverse(&mut rng, length);
                    (p, vec![a])
                }
                Family::TwoPart { operand_digits, modulus, length } => {
                    let (mut p, a1) = modular_add(&mut rng, operand_digits, modulus);
                    let (p2, a2) = digit_reverse(&mut rng, length);
                    p.push(SEPARATOR.into());
                    p.extend(p2);
                    (p, vec![a1, a2])
                }
            };
            Problem {
                id: format!("{tier}-{}-{i}", spec.seed),
                prompt,
                answers,
                tags: vec![tier.clone()],
                difficulty: None,
                provenance: Provenance::SyntheticTier,
            }
        })
        .collect())
}

/// Specs in declared order, rejected unless uniform-policy pass rates at
/// `window` strictly decrease.
pub fn tier_ladder(tiers: &[TaskSpec], window: usize) -> Result<Vec<TaskSpec>, TaskError> {
    let v = task_vocabulary().len();
    let mut previous = f64::INFINITY;
    for (index, spec) in tiers.iter().enumerate() {
        spec.family.validate()?;
        let rate = spec.family.uniform_pass_rate(v, window);
        if rate >= previous {
            return Err(TaskError::LadderInvalid { index, rate, previous });
        }
        previous = rate;
    }
    Ok(tiers.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    RawTokens,
    BoxedText,
}

/// Emission before EOS, split into `;`-separated segments of symbols.
pub fn emission_segments(vocab: &Vocabulary, actions: &[Token]) -> Vec<String> {
    let end = actions.iter().position(|&a| a == vocab.eos()).unwrap_or(actions.len());
    let text: String = actions[..end].iter().map(|&a| vocab.symbol(a)).collect();
    text.split(SEPARATOR).map(str::to_string).collect()
}

/// `\boxed{}`-wrapped rendering of an emission.
pub fn render_boxed(vocab: &Vocabulary, actions: &[Token]) -> String {
    emission_segments(vocab, actions)
        .iter()
        .map(|s| format!("\\boxed{{{s}}}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn grade_emission(
    verifier: &Verifier,
    vocab: &Vocabulary,
    actions: &[Token],
    golds: &[String],
    protocol: Protocol,
) -> RewardReport {
    match protocol {
        Protocol::RawTokens => verifier.grade_answers(&emission_segments(vocab, actions), golds),
        Protocol::BoxedText => verifier.grade_trajectory(&render_boxed(vocab, actions), golds),
    }
}
