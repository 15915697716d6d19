//! Numerical encodings: fixed vectors that give numeric tokens a notion of
//! magnitude in embedding space. Non-numeric tokens encode to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeMode {
    Float,
    Int,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeCombine {
    Sum,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    pub mode: NeMode,
    pub combine: NeCombine,
    /// Dimensions carrying encoding values.
    pub ne_dim: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { mode: NeMode::Float, combine: NeCombine::Sum, ne_dim: 16 }
    }
}

impl EncodingConfig {
    /// Width of the model input for embedding width `d_e`.
    pub fn input_width(&self, d_e: usize) -> usize {
        match (self.mode, self.combine) {
            (NeMode::None, _) | (_, NeCombine::Sum) => d_e,
            (_, NeCombine::Concat) => d_e + self.ne_dim,
        }
    }

    pub fn validate(&self, d_e: usize) -> Result<()> {
        if self.mode != NeMode::None && self.combine == NeCombine::Sum && self.ne_dim > d_e {
            return Err(Error::Config(format!(
                "summed numerical encodings need ne_dim ({}) <= d_e ({d_e})",
                self.ne_dim
            )));
        }
        Ok(())
    }
}

/// `(-1)^j * v * 10^p / (j + 1)`
pub fn ne_float(digit: u8, place: i32, j: usize) -> f64 {
    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
    sign * digit as f64 * 10f64.powi(place) / (j as f64 + 1.0)
}

/// Sinusoidal encoding of the integer value `v * 10^p`: sine on even
/// dimensions, cosine on odd ones, frequency set by the dimension pair.
pub fn ne_int(digit: u8, place: i32, j: usize, d_e: usize) -> f64 {
    let value = digit as f64 * 10f64.powi(place);
    let pair = (j / 2) * 2;
    let angle = value / 10000f64.powf(pair as f64 / d_e as f64);
    if j % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Encoding of one token; `d_e` only matters for [`NeMode::Int`].
pub fn ne_vector(token: &Token, cfg: &EncodingConfig, d_e: usize) -> Vec<f64> {
    let mut out = vec![0.0; cfg.ne_dim];
    if let Token::Numeric(n) = token {
        for (j, x) in out.iter_mut().enumerate() {
            *x = match cfg.mode {
                NeMode::Float => ne_float(n.digit, n.place, j),
                NeMode::Int => ne_int(n.digit, n.place, j, d_e),
                NeMode::None => 0.0,
            };
        }
    }
    out
}

/// Row-major `vocab.len() x ne_dim` table of encodings.
pub fn ne_table(vocab: &Vocabulary, cfg: &EncodingConfig, d_e: usize) -> Vec<f64> {
    vocab.tokens().iter().flat_map(|t| ne_vector(t, cfg, d_e)).collect()
}

/// Sum of the token encodings of a numeral.
pub fn numeral_encoding(tokens: &[Token], cfg: &EncodingConfig, d_e: usize) -> Vec<f64> {
    let mut acc = vec![0.0; cfg.ne_dim];
    for t in tokens {
        for (a, x) in acc.iter_mut().zip(ne_vector(t, cfg, d_e)) {
            *a += x;
        }
    }
    acc
}

/// Input embedding of one token from its word embedding, positional
/// encoding and numerical encoding.
pub fn combine(word: &[f64], pos: &[f64], ne: &[f64], cfg: &EncodingConfig) -> Result<Vec<f64>> {
    if word.len() != pos.len() {
        return Err(Error::ShapeMismatch(format!(
            "word embedding width {} vs positional width {}",
            word.len(),
            pos.len()
        )));
    }
    if ne.len() != cfg.ne_dim {
        return Err(Error::ShapeMismatch(format!("encoding width {} vs ne_dim {}", ne.len(), cfg.ne_dim)));
    }
    let mut out: Vec<f64> = word.iter().zip(pos).map(|(w, p)| w + p).collect();
    match (cfg.mode, cfg.combine) {
        (NeMode::None, _) => {}
        (_, NeCombine::Sum) => {
            if ne.len() > out.len() {
                return Err(Error::ShapeMismatch("encoding wider than embedding".into()));
            }
            for (o, x) in out.iter_mut().zip(ne) {
                *o += x;
            }
        }
        (_, NeCombine::Concat) => out.extend_from_slice(ne),
    }
    Ok(out)
}
