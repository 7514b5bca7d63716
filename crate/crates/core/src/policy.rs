//! Linear k-gram categorical policy.
//!
//! The context feature map is the concatenation of one-hot encodings of the
//! last `k` tokens (most recent first, BOS-padded), so `F = k·V`. Logits are
//! `W·φ + b` with `W` stored row-major by output token then feature, followed
//! by the `V` biases. Log-probabilities are computed with log-sum-exp and the
//! gradient of a sequence log-probability is accumulated analytically.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Token = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Temperatures below this decode greedily.
pub const GREEDY_BELOW: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("checkpoint format {found:?} is not {expected:?}")]
    Format { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ordered list of distinct symbols; a token is its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: Token,
    eos: Token,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, PolicyError> {
        if tokens.len() < 4 {
            return Err(PolicyError::InvalidVocabulary(format!("needs at least 4 symbols, got {}", tokens.len())));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(PolicyError::InvalidVocabulary(format!("duplicate symbol {t:?}")));
            }
        }
        let find = |s: &str| {
            tokens
                .iter()
                .position(|t| t == s)
                .map(|i| i as Token)
                .ok_or_else(|| PolicyError::InvalidVocabulary(format!("missing {s}")))
        };
        let (bos, eos) = (find(BOS)?, find(EOS)?);
        Ok(Self { tokens, bos, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> Token {
        self.bos
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn symbol(&self, t: Token) -> &str {
        &self.tokens[t as usize]
    }

    pub fn symbols(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, symbol: &str) -> Result<Token, PolicyError> {
        self.tokens
            .iter()
            .position(|t| t == symbol)
            .map(|i| i as Token)
            .ok_or_else(|| PolicyError::UnknownSymbol(symbol.to_string()))
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<Token>, PolicyError> {
        symbols.iter().map(|s| self.token(s.as_ref())).collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> Vec<String> {
        tokens.iter().map(|&t| self.symbol(t).to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = PolicyError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Vocabulary::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Policy parameters `θ` for a vocabulary of size `V` and context length `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub v: usize,
    pub k: usize,
    /// Token used to pad contexts shorter than `k`.
    pub bos: Token,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters, i.e. the uniform policy.
    pub fn zeros(v: usize, k: usize, bos: Token) -> Self {
        assert!(v >= 1 && k >= 1 && (bos as usize) < v);
        Self { v, k, bos, theta: vec![0.0; Self::param_len(v, k)] }
    }

    pub fn from_theta(v: usize, k: usize, bos: Token, theta: Vec<f64>) -> Result<Self, PolicyError> {
        let expected = Self::param_len(v, k);
        if theta.len() != expected {
            return Err(PolicyError::ParamLength { expected, got: theta.len() });
        }
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self { v, k, bos, theta })
    }

    pub fn param_len(v: usize, k: usize) -> usize {
        v * k * v + v
    }

    pub fn features(&self) -> usize {
        self.k * self.v
    }

    /// Index of weight `W[c, f]`.
    pub fn weight_index(&self, c: usize, f: usize) -> usize {
        c * self.features() + f
    }

    pub fn bias_index(&self, c: usize) -> usize {
        self.v * self.features() + c
    }

    /// Active feature indices for the window ending at `history`: position
    /// `j` (0 = most recent) contributes feature `j·V + token`.
    pub fn active_features(&self, history: &[Token]) -> Vec<usize> {
        (0..self.k)
            .map(|j| {
                let tok = if j < history.len() { history[history.len() - 1 - j] } else { self.bos };
                j * self.v + tok as usize
            })
            .collect()
    }

    /// Logits for the next token after `history`.
    pub fn logits(&self, history: &[Token]) -> Vec<f64> {
        let mut out = vec![0.0; self.v];
        self.logits_into(history, &mut out);
        out
    }

    pub fn logits_into(&self, history: &[Token], out: &mut [f64]) {
        let active = self.active_features(history);
        let f = self.features();
        for (c, slot) in out.iter_mut().enumerate() {
            let row = &self.theta[c * f..(c + 1) * f];
            *slot = self.theta[self.bias_index(c)] + active.iter().map(|&i| row[i]).sum::<f64>();
        }
    }

    /// Log-probability of each action given the prompt and preceding actions.
    pub fn step_logprobs(&self, prompt: &[Token], actions: &[Token]) -> Vec<f64> {
        let mut history = prompt.to_vec();
        let mut logits = vec![0.0; self.v];
        actions
            .iter()
            .map(|&a| {
                self.logits_into(&history, &mut logits);
                let lp = logits[a as usize] - log_sum_exp(&logits);
                history.push(a);
                lp
            })
            .collect()
    }

    pub fn sequence_logprob(&self, prompt: &[Token], actions: &[Token]) -> f64 {
        self.step_logprobs(prompt, actions).iter().sum()
    }

    pub fn grad_sequence_logprob(&self, prompt: &[Token], actions: &[Token]) -> Vec<f64> {
        let mut g = vec![0.0; self.theta.len()];
        self.accumulate_grad(prompt, actions, 1.0, &mut g);
        g
    }

    /// Adds `scale · ∇ log π(actions | prompt)` into `out`.
    pub fn accumulate_grad(&self, prompt: &[Token], actions: &[Token], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.theta.len());
        let mut history = prompt.to_vec();
        let mut logits = vec![0.0; self.v];
        let f = self.features();
        for &a in actions {
            self.logits_into(&history, &mut logits);
            let active = self.active_features(&history);
            let lse = log_sum_exp(&logits);
            for c in 0..self.v {
                let indicator = if c == a as usize { 1.0 } else { 0.0 };
                let d = scale * (indicator - (logits[c] - lse).exp());
                out[self.bias_index(c)] += d;
                for &i in &active {
                    out[c * f + i] += d;
                }
            }
            history.push(a);
        }
    }

    /// Ancestral sampling from `softmax(logits / temperature)` until EOS or
    /// `window` tokens.
    pub fn sample(&self, prompt: &[Token], window: usize, seed: u64, temperature: f64, vocab: &Vocabulary) -> Vec<Token> {
        assert!(window >= 1 && temperature > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history = prompt.to_vec();
        let mut logits = vec![0.0; self.v];
        let mut actions = Vec::new();
        while actions.len() < window {
            self.logits_into(&history, &mut logits);
            let a = sample_from_logits(&logits, temperature, &mut rng);
            actions.push(a);
            history.push(a);
            if a == vocab.eos() {
                break;
            }
        }
        actions
    }

    /// SHA-256 over the little-endian bytes of `θ`, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.theta {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.theta)
    }
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|x| x - lse).collect()
}

/// Draws one token; greedy (lowest index among ties) below [`GREEDY_BELOW`].
pub fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Token {
    if temperature < GREEDY_BELOW {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        return best as Token;
    }
    let lp = log_softmax(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i as Token;
        }
    }
    // rounding left `acc` just below 1: take the last token with nonzero mass
    lp.iter().rposition(|l| l.exp() > 0.0).unwrap_or(0) as Token
}

/// One sampled response with the rollout engine's and the exact trainer's
/// per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub prompt: Vec<Token>,
    /// Sampled tokens, ending at EOS or at the generation-window cap.
    pub actions: Vec<Token>,
    pub rollout_logprobs: Vec<f64>,
    pub trainer_logprobs: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    /// `T + 1`, the number of sampled tokens.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// The `G` responses sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    /// Filled by [`crate::estimators::group_advantage`].
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "rlvr-policy/v1";

/// Serialized `(vocabulary, k, θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub vocabulary: Vocabulary,
    pub k: usize,
    pub theta: Vec<f64>,
}

impl PolicyCheckpoint {
    pub fn new(vocab: &Vocabulary, params: &PolicyParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            vocabulary: vocab.clone(),
            k: params.k,
            theta: params.theta.clone(),
        }
    }

    pub fn validate(&self) -> Result<PolicyParams, PolicyError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Format { expected: CHECKPOINT_FORMAT.to_string(), found: self.format.clone() });
        }
        PolicyParams::from_theta(self.vocabulary.len(), self.k, self.vocabulary.bos(), self.theta.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let ckpt: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
