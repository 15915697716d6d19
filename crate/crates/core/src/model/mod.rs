//! A small two-stream transformer.
//!
//! The content stream encodes visible tokens; the query stream carries one
//! row per prediction target, initialized from a learned vector plus the
//! target's positional encoding, and reads keys/values from the content
//! stream. Both streams share every weight. Logits are read from the query
//! stream through the (tied) token embedding table.

mod checkpoint;
mod ops;
mod optim;
mod transformer;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{self, EncodingConfig, NeCombine, NeMode};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use ops::log_softmax;
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use transformer::{nll_loss, nll_loss_grad, ForwardCache, ModelInput};

/// Floating point type the model can run in.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// Strided GEMM, see `matrixmultiply::sgemm`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Embedding width.
    pub d_e: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Filled from the vocabulary when zero.
    pub vocab_size: usize,
    pub encoding: EncodingConfig,
    pub positional: Positional,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_e: 64,
            d_ff: 256,
            n_heads: 4,
            dropout: 0.0,
            max_len: 256,
            vocab_size: 0,
            encoding: EncodingConfig::default(),
            positional: Positional::Sinusoidal,
        }
    }
}

impl ModelConfig {
    /// Hidden width of both streams.
    pub fn width(&self) -> usize {
        self.encoding.input_width(self.d_e)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_e == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.width() % self.n_heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width(), self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive".into());
        }
        self.encoding.validate(self.d_e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// Trainable tensors. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    /// `vocab_size x d_e`, also the output projection.
    pub tok_emb: Vec<T>,
    pub query_init: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_fn(cfg, |_, _| T::zero())
    }

    /// Fan-in scaled uniform matrices, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(cfg, |name, shape| {
            let kind = name.rsplit('.').next().unwrap_or(name);
            if kind.ends_with("gain") {
                T::one()
            } else if kind.starts_with('b') || kind.ends_with("bias") {
                T::zero()
            } else {
                let fan_in = if kind.starts_with('w') { shape[0] } else { *shape.last().unwrap() };
                let a = 1.0 / (fan_in as f64).sqrt();
                ops::cast(rng.random_range(-a..a))
            }
        })
    }

    fn from_fn(cfg: &ModelConfig, mut f: impl FnMut(&str, &[usize]) -> T) -> Self {
        let shapes = Self::shapes(cfg);
        let mut it = shapes.iter().map(|(name, shape)| {
            let n = shape.iter().product();
            (0..n).map(|_| f(name, shape)).collect::<Vec<T>>()
        });
        let mut next = || it.next().expect("shape list matches layout");
        let tok_emb = next();
        let query_init = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let lnf_gain = next();
        let lnf_bias = next();
        Self { tok_emb, query_init, layers, lnf_gain, lnf_bias }
    }

    /// Tensor names and shapes, in [`Self::tensors`] order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.width();
        let mut out = vec![
            ("tok_emb".to_string(), vec![cfg.vocab_size, cfg.d_e]),
            ("query_init".to_string(), vec![d]),
        ];
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1_gain"), vec![d]),
                (p("ln1_bias"), vec![d]),
                (p("wq"), vec![d, d]),
                (p("bq"), vec![d]),
                (p("wk"), vec![d, d]),
                (p("bk"), vec![d]),
                (p("wv"), vec![d, d]),
                (p("bv"), vec![d]),
                (p("wo"), vec![d, d]),
                (p("bo"), vec![d]),
                (p("ln2_gain"), vec![d]),
                (p("ln2_bias"), vec![d]),
                (p("w1"), vec![d, cfg.d_ff]),
                (p("b1"), vec![cfg.d_ff]),
                (p("w2"), vec![cfg.d_ff, d]),
                (p("b2"), vec![d]),
            ]);
        }
        out.push(("lnf_gain".to_string(), vec![d]));
        out.push(("lnf_bias".to_string(), vec![d]));
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.tok_emb, &self.query_init];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain[..],
                &l.ln1_bias,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
            ]);
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.tok_emb, &mut self.query_init];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain[..],
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from(x).unwrap()).collect::<Vec<U>>();
        ModelParameters {
            tok_emb: conv(&self.tok_emb),
            query_init: conv(&self.query_init),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: conv(&l.ln1_gain),
                    ln1_bias: conv(&l.ln1_bias),
                    wq: conv(&l.wq),
                    bq: conv(&l.bq),
                    wk: conv(&l.wk),
                    bk: conv(&l.bk),
                    wv: conv(&l.wv),
                    bv: conv(&l.bv),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ln2_gain: conv(&l.ln2_gain),
                    ln2_bias: conv(&l.ln2_bias),
                    w1: conv(&l.w1),
                    b1: conv(&l.b1),
                    w2: conv(&l.w2),
                    b2: conv(&l.b2),
                })
                .collect(),
            lnf_gain: conv(&self.lnf_gain),
            lnf_bias: conv(&self.lnf_bias),
        }
    }
}

/// Parameters plus the fixed tables derived from config and vocabulary.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParameters<T>,
    /// `vocab_size x ne_dim` numerical encodings.
    ne: Vec<T>,
    /// `max_len x d_e` positional encodings.
    pe: Vec<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(mut config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        let params = ModelParameters::init(&config, seed);
        Self::from_params(config, params, vocab)
    }

    pub fn from_params(config: ModelConfig, params: ModelParameters<T>, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let expected = ModelParameters::<T>::shapes(&config);
        for ((name, shape), t) in expected.iter().zip(params.tensors()) {
            if shape.iter().product::<usize>() != t.len() {
                return Err(Error::ShapeMismatch(format!("{name}: expected {shape:?}, got {} values", t.len())));
            }
        }
        let ne = if config.encoding.mode == NeMode::None {
            vec![T::zero(); vocab.len() * config.encoding.ne_dim]
        } else {
            encoding::ne_table(vocab, &config.encoding, config.d_e).into_iter().map(ops::cast).collect()
        };
        let pe = positional_table(&config).into_iter().map(ops::cast).collect();
        Ok(Self { config, params, ne, pe })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ne: self.ne.iter().map(|&x| U::from(x).unwrap()).collect(),
            pe: self.pe.iter().map(|&x| U::from(x).unwrap()).collect(),
        }
    }

    /// `len x width` input rows: word embedding + position + numerical encoding.
    pub fn embed(&self, ids: &[usize]) -> Result<Vec<T>> {
        let cfg = &self.config;
        if ids.len() > cfg.max_len {
            return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_len });
        }
        let (d_e, d, ne_dim) = (cfg.d_e, cfg.width(), cfg.encoding.ne_dim);
        let mut out = vec![T::zero(); ids.len() * d];
        for (pos, (&id, row)) in ids.iter().zip(out.chunks_exact_mut(d)).enumerate() {
            if id >= cfg.vocab_size {
                return Err(Error::IdOutOfRange { id, vocab_size: cfg.vocab_size });
            }
            row[..d_e].copy_from_slice(&self.params.tok_emb[id * d_e..(id + 1) * d_e]);
            if cfg.positional == Positional::Sinusoidal {
                ops::add_into(&mut row[..d_e], &self.pe[pos * d_e..(pos + 1) * d_e]);
            }
            let ne = &self.ne[id * ne_dim..(id + 1) * ne_dim];
            match (cfg.encoding.mode, cfg.encoding.combine) {
                (NeMode::None, _) => {}
                (_, NeCombine::Sum) => ops::add_into(&mut row[..ne_dim], ne),
                (_, NeCombine::Concat) => row[d_e..].copy_from_slice(ne),
            }
        }
        Ok(out)
    }

    /// Output projection `vocab_size x width`: the embedding table, extended
    /// by the fixed encodings when they are concatenated.
    fn output_table(&self) -> std::borrow::Cow<'_, [T]> {
        let cfg = &self.config;
        let d = cfg.width();
        if d == cfg.d_e {
            return std::borrow::Cow::Borrowed(&self.params.tok_emb);
        }
        let ne_dim = cfg.encoding.ne_dim;
        let mut out = Vec::with_capacity(cfg.vocab_size * d);
        for id in 0..cfg.vocab_size {
            out.extend_from_slice(&self.params.tok_emb[id * cfg.d_e..(id + 1) * cfg.d_e]);
            out.extend_from_slice(&self.ne[id * ne_dim..(id + 1) * ne_dim]);
        }
        std::borrow::Cow::Owned(out)
    }

    fn positional(&self, pos: usize) -> Option<&[T]> {
        let d_e = self.config.d_e;
        (self.config.positional == Positional::Sinusoidal).then(|| &self.pe[pos * d_e..(pos + 1) * d_e])
    }
}

/// Standard sinusoidal table, `max_len x d_e`.
pub fn positional_table(cfg: &ModelConfig) -> Vec<f64> {
    let d = cfg.d_e;
    let mut out = vec![0.0; cfg.max_len * d];
    for pos in 0..cfg.max_len {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{PropertySchema, Schema, Token};

    fn vocab() -> Vocabulary {
        Vocabulary::new(Schema::new(vec![PropertySchema::new("p", 1, 2)]), ["A", "B", "C"]).unwrap()
    }

    fn config(mode: NeMode, positional: Positional) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_e: 8,
            d_ff: 16,
            n_heads: 2,
            max_len: 16,
            encoding: EncodingConfig { mode, combine: NeCombine::Sum, ne_dim: 4 },
            positional,
            ..Default::default()
        }
    }

    #[test]
    fn embed_plain_lookup() {
        let v = vocab();
        let m = Model::<f64>::new(config(NeMode::None, Positional::None), &v, 1).unwrap();
        let ids = [6usize, 7, 30, 31];
        let rows = m.embed(&ids).unwrap();
        assert_eq!(rows.len(), ids.len() * 8);
        for (r, &id) in ids.iter().enumerate() {
            assert_eq!(&rows[r * 8..(r + 1) * 8], &m.params.tok_emb[id * 8..(id + 1) * 8]);
        }
    }

    #[test]
    fn numeric_rows_differ_by_encoding() {
        let v = vocab();
        let plain = Model::<f64>::new(config(NeMode::None, Positional::Sinusoidal), &v, 3).unwrap();
        let float = Model::<f64>::new(config(NeMode::Float, Positional::Sinusoidal), &v, 3).unwrap();
        let five = v.numeric_id(5, -1).unwrap();
        let text = v.text_id("A").unwrap();
        let ids = [text, five];
        let a = plain.embed(&ids).unwrap();
        let b = float.embed(&ids).unwrap();
        assert_eq!(&a[..8], &b[..8]);
        let ne = encoding::ne_vector(v.token(five).unwrap(), &float.config.encoding, 8);
        for j in 0..8 {
            let expect = if j < 4 { ne[j] } else { 0.0 };
            assert_eq!(b[8 + j] - a[8 + j], expect);
        }
        assert!(matches!(v.token(five).unwrap(), Token::Numeric(_)));
    }

    #[test]
    fn embed_rejects_bad_ids() {
        let v = vocab();
        let m = Model::<f32>::new(config(NeMode::Float, Positional::Sinusoidal), &v, 1).unwrap();
        assert!(matches!(m.embed(&[v.len()]), Err(Error::IdOutOfRange { .. })));
        assert!(matches!(m.embed(&[0; 17]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let v = vocab();
        let cfg = ModelConfig { vocab_size: v.len(), ..config(NeMode::Float, Positional::Sinusoidal) };
        let a = ModelParameters::<f32>::init(&cfg, 9);
        let b = ModelParameters::<f32>::init(&cfg, 9);
        let c = ModelParameters::<f32>::init(&cfg, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert!(a.layers[0].bq.iter().all(|&x| x == 0.0));
        assert!(a.layers[0].ln1_gain.iter().all(|&x| x == 1.0));
        let shapes = ModelParameters::<f32>::shapes(&cfg);
        assert_eq!(shapes.len(), a.tensors().len());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig { vocab_size: 10, ..Default::default() };
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }
}
