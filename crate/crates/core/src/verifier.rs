//! Boxed-answer extraction and binary / aggregated rewards.
//!
//! A completion lists its final answers in order, each inside its own
//! `\boxed{...}`. Box `k` is graded against gold answer `k`; each sub-answer
//! scores 0 or 1 and the trajectory reward is their mean over the number of
//! required answers. Missing boxes score 0 and surplus boxes are ignored.

use serde::{Deserialize, Serialize};

use crate::expr::{expr_equivalent, parse_expression, ProbeConfig, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerifierError {
    #[error("\\boxed{{ opened at byte {offset} is never closed")]
    UnbalancedBraces { offset: usize },
}

/// Result of scanning a completion for boxed answers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BoxedAnswers {
    pub answers: Vec<String>,
    /// Set when a box never closes; that box and anything after it is dropped.
    pub error: Option<VerifierError>,
}

/// Contents of every outermost `\boxed{...}` in document order, trimmed.
pub fn extract_boxed(completion: &str) -> BoxedAnswers {
    const OPEN: &str = "\\boxed";
    let bytes = completion.as_bytes();
    let mut out = BoxedAnswers::default();
    let mut cursor = 0;
    while let Some(found) = completion[cursor..].find(OPEN) {
        let start = cursor + found;
        let mut i = start + OPEN.len();
        // `\boxedfoo` is a different command
        if bytes.get(i).is_some_and(u8::is_ascii_alphabetic) {
            cursor = i;
            continue;
        }
        while bytes.get(i).is_some_and(u8::is_ascii_whitespace) {
            i += 1;
        }
        if bytes.get(i) != Some(&b'{') {
            cursor = i;
            continue;
        }
        let content_start = i + 1;
        let mut depth = 1usize;
        let mut j = content_start;
        while j < bytes.len() && depth > 0 {
            match bytes[j] {
                b'\\' => j += 1,
                b'{' => depth += 1,
                b'}' => depth -= 1,
                _ => {}
            }
            j += 1;
        }
        if depth > 0 {
            out.error = Some(VerifierError::UnbalancedBraces { offset: start });
            break;
        }
        out.answers.push(completion[content_start..j - 1].trim().to_string());
        cursor = j;
    }
    out
}

/// Fallback grader consulted only when rule-based matching fails.
pub trait SemanticJudge: Send + Sync {
    fn judge(&self, pred: &str, gold: &str) -> bool;
}

/// Judge that never accepts.
#[derive(Debug, Clone, Copy, Default)]
pub struct RejectingJudge;

impl SemanticJudge for RejectingJudge {
    fn judge(&self, _pred: &str, _gold: &str) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub per_box: Vec<u8>,
    pub aggregate: f64,
    pub n_required: usize,
    pub n_extracted: usize,
    pub judge_used: bool,
}

/// Keeps the right-hand side of a top-level `=` (or `\approx`), so that
/// `P_w = P_0 - \rho g h` is compared as `P_0 - \rho g h`.
pub fn answer_value(text: &str) -> &str {
    let text = text.trim().trim_matches('$').trim();
    let bytes = text.as_bytes();
    let mut depth = 0i32;
    let mut cut = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'(' | b'[' => depth += 1,
            b'}' | b')' | b']' => depth -= 1,
            b'=' if depth == 0 => cut = i + 1,
            b'\\' if depth == 0 => {
                for rel in ["\\approx", "\\simeq", "\\equiv"] {
                    if text[i..].starts_with(rel)
                        && !text[i + rel.len()..].starts_with(|c: char| c.is_ascii_alphabetic())
                    {
                        cut = i + rel.len();
                    }
                }
            }
            _ => {}
        }
        i += 1;
    }
    text[cut..].trim()
}

/// Rule-based grading settings plus an optional judge.
#[derive(Clone, Copy, Default)]
pub struct Verifier<'a> {
    pub probe: ProbeConfig,
    pub judge: Option<&'a dyn SemanticJudge>,
}

impl<'a> Verifier<'a> {
    pub fn rule_based(probe: ProbeConfig) -> Self {
        Self { probe, judge: None }
    }

    fn rule_match(&self, pred: &str, gold: &str) -> bool {
        let Ok(gold_expr) = parse_expression(answer_value(gold)) else {
            return false;
        };
        let Ok(pred_expr) = parse_expression(answer_value(pred)) else {
            return false;
        };
        expr_equivalent(&pred_expr, &gold_expr, &self.probe).verdict == Verdict::Equivalent
    }

    /// Returns the grade and whether the judge was consulted.
    fn grade_one(&self, pred: &str, gold: &str) -> (u8, bool) {
        if self.rule_match(pred, gold) {
            return (1, false);
        }
        match self.judge {
            Some(j) => (u8::from(j.judge(pred, gold)), true),
            None => (0, false),
        }
    }

    pub fn verify_answer(&self, pred: &str, gold: &str) -> u8 {
        self.grade_one(pred, gold).0
    }

    /// Grades already-extracted answers against golds by position.
    pub fn grade_answers<S: AsRef<str>>(&self, answers: &[S], golds: &[String]) -> RewardReport {
        assert!(!golds.is_empty(), "a problem needs at least one gold answer");
        let mut judge_used = false;
        let per_box: Vec<u8> = golds
            .iter()
            .enumerate()
            .map(|(k, gold)| match answers.get(k) {
                Some(pred) => {
                    let (r, used) = self.grade_one(pred.as_ref(), gold);
                    judge_used |= used;
                    r
                }
                None => 0,
            })
            .collect();
        let hits: usize = per_box.iter().map(|&r| r as usize).sum();
        RewardReport {
            aggregate: hits as f64 / golds.len() as f64,
            n_required: golds.len(),
            n_extracted: answers.len(),
            per_box,
            judge_used,
        }
    }

    pub fn grade_trajectory(&self, completion: &str, golds: &[String]) -> RewardReport {
        let boxed = extract_boxed(completion);
        self.grade_answers(&boxed.answers, golds)
    }
}

/// Binary reward for one sub-answer with default probing.
pub fn verify_answer(pred: &str, gold: &str, judge: Option<&dyn SemanticJudge>) -> u8 {
    Verifier { probe: ProbeConfig::default(), judge }.verify_answer(pred, gold)
}

/// Aggregated reward for a completion with default probing.
pub fn grade_trajectory(completion: &str, golds: &[String], judge: Option<&dyn SemanticJudge>) -> RewardReport {
    Verifier { probe: ProbeConfig::default(), judge }.grade_trajectory(completion, golds)
}
