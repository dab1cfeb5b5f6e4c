//! Self-supervised corruption: MASS contiguous-span masking and DAE
//! shuffle / word-dropout / word-blank noise. All functions are pure in
//! `(input, spec, seed)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSeq, Vocab, BOS, MASK, N_SPECIALS};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Fraction of the sentence covered by the MASS fragment.
    pub mass_ratio: f64,
    pub mass_mask_p: f64,
    pub mass_rand_p: f64,
    pub mass_keep_p: f64,
    /// Maximum local displacement of the DAE shuffle.
    pub shuffle_k: f64,
    pub word_dropout: f64,
    pub word_blank: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mass_ratio: 0.5,
            mass_mask_p: 0.8,
            mass_rand_p: 0.1,
            mass_keep_p: 0.1,
            shuffle_k: 3.0,
            word_dropout: 0.1,
            word_blank: 0.1,
        }
    }
}

impl NoiseSpec {
    /// No corruption at all.
    pub fn zero() -> Self {
        NoiseSpec { shuffle_k: 0.0, word_dropout: 0.0, word_blank: 0.0, ..NoiseSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mass_mask_p", self.mass_mask_p),
            ("mass_rand_p", self.mass_rand_p),
            ("mass_keep_p", self.mass_keep_p),
            ("word_dropout", self.word_dropout),
            ("word_blank", self.word_blank),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Noise(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let total = self.mass_mask_p + self.mass_rand_p + self.mass_keep_p;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Noise(format!("MASS fragment probabilities sum to {total}, not 1")));
        }
        if !(self.mass_ratio > 0.0 && self.mass_ratio <= 1.0) {
            return Err(Error::Noise(format!("mass_ratio must be in (0, 1], got {}", self.mass_ratio)));
        }
        if !(self.shuffle_k >= 0.0 && self.shuffle_k.is_finite()) {
            return Err(Error::Noise(format!("shuffle_k must be non-negative, got {}", self.shuffle_k)));
        }
        if self.word_dropout >= 1.0 || self.word_blank >= 1.0 {
            return Err(Error::Noise("dropout and blank probabilities must be below 1".into()));
        }
        Ok(())
    }
}

/// How a fragment position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FragmentAction {
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MassExample {
    pub corrupted_input: TokenSeq,
    pub target_fragment: TokenSeq,
    pub fragment_start: usize,
    /// Absolute positions of the fragment, `start..start + k`.
    pub decoder_positions: Vec<usize>,
    /// Teacher-forced decoder input: the token preceding each fragment
    /// position in the original sentence (`<s>` before position 0).
    pub decoder_input: TokenSeq,
    pub actions: Vec<FragmentAction>,
}

pub fn fragment_len(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).clamp(1, len)
}

/// MASS: corrupt one contiguous fragment of `k = max(1, round(ratio·len))`
/// tokens; inside it each token is masked / replaced by a random regular
/// token / kept with probabilities (mask_p, rand_p, keep_p).
pub fn mass_mask(tokens: &[TokenId], spec: &NoiseSpec, vocab: &Vocab, seed: u64) -> Result<MassExample> {
    if tokens.is_empty() {
        return Err(Error::Noise("cannot MASS-mask an empty sentence".into()));
    }
    if !(spec.mass_ratio > 0.0 && spec.mass_ratio <= 1.0) {
        return Err(Error::Noise(format!("mass_ratio must be in (0, 1], got {}", spec.mass_ratio)));
    }
    let n = tokens.len();
    let k = fragment_len(n, spec.mass_ratio);
    let mut rng = seed::rng(seed::mix(&[seed, 0x3a55]));
    let start = rng.random_range(0..=n - k);
    let n_regular = vocab.len().saturating_sub(N_SPECIALS);
    let mut corrupted = tokens.to_vec();
    let mut actions = Vec::with_capacity(k);
    for tok in corrupted.iter_mut().skip(start).take(k) {
        let u: f64 = rng.random();
        let action = if u < spec.mass_mask_p {
            FragmentAction::Masked
        } else if u < spec.mass_mask_p + spec.mass_rand_p && n_regular > 0 {
            FragmentAction::Random
        } else {
            FragmentAction::Kept
        };
        match action {
            FragmentAction::Masked => *tok = MASK,
            FragmentAction::Random => *tok = (N_SPECIALS + rng.random_range(0..n_regular)) as TokenId,
            FragmentAction::Kept => {}
        }
        actions.push(action);
    }
    let decoder_input = (start..start + k).map(|p| if p == 0 { BOS } else { tokens[p - 1] }).collect();
    Ok(MassExample {
        corrupted_input: corrupted,
        target_fragment: tokens[start..start + k].to_vec(),
        fragment_start: start,
        decoder_positions: (start..start + k).collect(),
        decoder_input,
        actions,
    })
}

/// Local shuffle by noisy sort: key `i + u`, `u ~ U[0, k)`, stable sort.
/// No token moves more than `k` positions.
pub fn dae_shuffle(tokens: &[TokenId], k: f64, seed: u64) -> TokenSeq {
    if k <= 0.0 || tokens.len() < 2 {
        return tokens.to_vec();
    }
    let mut rng = seed::rng(seed::mix(&[seed, 0x5f1e]));
    let mut keyed: Vec<(f64, TokenId)> =
        tokens.iter().enumerate().map(|(i, &t)| (i as f64 + rng.random::<f64>() * k, t)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, t)| t).collect()
}

/// Word deletion then word blanking. At least one token always survives.
pub fn dae_dropout_blank(tokens: &[TokenId], p_drop: f64, p_blank: f64, mask_id: TokenId, seed: u64) -> TokenSeq {
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut rng = seed::rng(seed::mix(&[seed, 0xd409]));
    let mut kept: Vec<TokenId> = tokens.iter().copied().filter(|_| rng.random::<f64>() >= p_drop).collect();
    if kept.is_empty() {
        kept.push(tokens[rng.random_range(0..tokens.len())]);
    }
    for t in kept.iter_mut() {
        if rng.random::<f64>() < p_blank {
            *t = mask_id;
        }
    }
    kept
}

/// DAE example: `(dropout_blank(shuffle(tokens)), tokens)`.
pub fn dae_noise(tokens: &[TokenId], spec: &NoiseSpec, seed: u64) -> Result<(TokenSeq, TokenSeq)> {
    if tokens.is_empty() {
        return Err(Error::Noise("cannot noise an empty sentence".into()));
    }
    let shuffled = dae_shuffle(tokens, spec.shuffle_k, seed::mix(&[seed, 1]));
    let corrupted = dae_dropout_blank(&shuffled, spec.word_dropout, spec.word_blank, MASK, seed::mix(&[seed, 2]));
    Ok((corrupted, tokens.to_vec()))
}
