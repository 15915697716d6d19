//! Two-stream forward and backward passes over a batch.
//!
//! All content rows of a batch are stacked first, followed by all query rows,
//! so every dense layer runs as one matrix product. Attention is evaluated per
//! example through [`AttnBlock`]s. In the last layer only the query rows are
//! updated because the content stream's output is never read.

use rand::{Rng, RngCore};

use super::ops::{self, AttnBlock, LayerNormOut};
use super::{Model, ModelParameters, Scalar};
use crate::error::{Error, Result};
use crate::masking::AttentionMasks;

/// One sequence with its attention masks and the positions to predict.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub masks: AttentionMasks,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    nc: usize,
    n: usize,
    content_offsets: Vec<usize>,
    blocks_full: Vec<AttnBlock>,
    probs_full: usize,
    blocks_last: Vec<AttnBlock>,
    probs_last: usize,
}

fn layout(inputs: &[ModelInput], heads: usize) -> Result<Layout> {
    let mut content_offsets = Vec::with_capacity(inputs.len());
    let mut nc = 0;
    for inp in inputs {
        if inp.masks.len() != inp.ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "masks for {} positions on a sequence of {}",
                inp.masks.len(),
                inp.ids.len()
            )));
        }
        if let Some(&t) = inp.targets.iter().find(|&&t| t >= inp.ids.len()) {
            return Err(Error::ShapeMismatch(format!("target {t} outside sequence of {}", inp.ids.len())));
        }
        content_offsets.push(nc);
        nc += inp.ids.len();
    }
    let nq: usize = inputs.iter().map(|i| i.targets.len()).sum();

    let mut content_blocks = Vec::new();
    let mut query_blocks = Vec::new();
    let mut qoff = 0;
    for (inp, &coff) in inputs.iter().zip(&content_offsets) {
        let len = inp.ids.len();
        let mut mask = Vec::with_capacity(len * len);
        for i in 0..len {
            mask.extend_from_slice(inp.masks.content_row(i));
        }
        content_blocks.push(AttnBlock { q_start: coff, n_q: len, kv_start: coff, n_kv: len, mask, prob_start: 0 });
        if !inp.targets.is_empty() {
            let mut mask = Vec::with_capacity(inp.targets.len() * len);
            for &t in &inp.targets {
                mask.extend_from_slice(inp.masks.query_row(t));
            }
            query_blocks.push(AttnBlock {
                q_start: qoff,
                n_q: inp.targets.len(),
                kv_start: coff,
                n_kv: len,
                mask,
                prob_start: 0,
            });
        }
        qoff += inp.targets.len();
    }

    let assign = |blocks: &mut [AttnBlock]| {
        let mut at = 0;
        for b in blocks.iter_mut() {
            b.prob_start = at;
            at += b.prob_len(heads);
        }
        at
    };
    let mut blocks_last = query_blocks.clone();
    let probs_last = assign(&mut blocks_last);
    let mut blocks_full = content_blocks;
    blocks_full.extend(query_blocks.into_iter().map(|mut b| {
        b.q_start += nc;
        b
    }));
    let probs_full = assign(&mut blocks_full);
    Ok(Layout { nc, n: nc + nq, content_offsets, blocks_full, probs_full, blocks_last, probs_last })
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x: Vec<T>,
    ln1: LayerNormOut<T>,
    start: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    drop1: Option<Vec<T>>,
    mid: Vec<T>,
    ln2: LayerNormOut<T>,
    pre: Vec<T>,
    act: Vec<T>,
    drop2: Option<Vec<T>>,
}

/// Activations kept for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    layout: Layout,
    ids: Vec<Vec<usize>>,
    layers: Vec<LayerCache<T>>,
    g: Vec<T>,
    lnf: LayerNormOut<T>,
    /// `num_targets x vocab_size`, targets in input order.
    pub logits: Vec<T>,
}

fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = ops::cast::<T>(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
}

fn scale_by<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (a, &s) in x.iter_mut().zip(m) {
            *a *= s;
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Logits at every target of every input, stacked in input order.
    pub fn forward(&self, inputs: &[ModelInput]) -> Result<Vec<T>> {
        Ok(self.forward_train(inputs, None)?.logits)
    }

    /// Forward pass keeping activations. Dropout is applied only when an RNG
    /// is supplied and the configured rate is positive.
    pub fn forward_train(&self, inputs: &[ModelInput], rng: Option<&mut dyn RngCore>) -> Result<ForwardCache<T>> {
        let cfg = &self.config;
        let (d, d_e, d_ff, heads) = (cfg.width(), cfg.d_e, cfg.d_ff, cfg.n_heads);
        let lay = layout(inputs, heads)?;
        let (nc, n) = (lay.nc, lay.n);
        let mut rng = rng.filter(|_| cfg.dropout > 0.0);

        let mut x = vec![T::zero(); n * d];
        let mut qrow = nc;
        for (inp, &coff) in inputs.iter().zip(&lay.content_offsets) {
            let rows = self.embed(&inp.ids)?;
            x[coff * d..(coff + inp.ids.len()) * d].copy_from_slice(&rows);
            for &t in &inp.targets {
                let row = &mut x[qrow * d..(qrow + 1) * d];
                row.copy_from_slice(&self.params.query_init);
                if let Some(pe) = self.positional(t) {
                    ops::add_into(&mut row[..d_e], pe);
                }
                qrow += 1;
            }
        }

        let n_layers = self.params.layers.len();
        let mut caches = Vec::with_capacity(n_layers);
        for (l, p) in self.params.layers.iter().enumerate() {
            let last = l + 1 == n_layers;
            let start = if last { nc } else { 0 };
            let rows = n - start;
            let (blocks, n_probs) =
                if last { (&lay.blocks_last, lay.probs_last) } else { (&lay.blocks_full, lay.probs_full) };

            let ln1 = ops::layer_norm(&x, d, &p.ln1_gain, &p.ln1_bias);
            let q = ops::linear(&ln1.out[start * d..], rows, d, &p.wq, &p.bq, d);
            let k = ops::linear(&ln1.out[..nc * d], nc, d, &p.wk, &p.bk, d);
            let v = ops::linear(&ln1.out[..nc * d], nc, d, &p.wv, &p.bv, d);
            let mut probs = vec![T::zero(); n_probs];
            let mut att = vec![T::zero(); rows * d];
            ops::attention(&q, &k, &v, d, heads, blocks, &mut probs, &mut att);
            let mut o = ops::linear(&att, rows, d, &p.wo, &p.bo, d);
            let drop1 = rng.as_deref_mut().map(|r| dropout_mask(o.len(), cfg.dropout, r));
            scale_by(&mut o, &drop1);
            let mut mid = x[start * d..].to_vec();
            ops::add_into(&mut mid, &o);

            let ln2 = ops::layer_norm(&mid, d, &p.ln2_gain, &p.ln2_bias);
            let pre = ops::linear(&ln2.out, rows, d, &p.w1, &p.b1, d_ff);
            let act = ops::gelu(&pre);
            let mut f = ops::linear(&act, rows, d_ff, &p.w2, &p.b2, d);
            let drop2 = rng.as_deref_mut().map(|r| dropout_mask(f.len(), cfg.dropout, r));
            scale_by(&mut f, &drop2);

            let mut next = x.clone();
            let out = &mut next[start * d..];
            out.copy_from_slice(&mid);
            ops::add_into(out, &f);
            caches.push(LayerCache { x, ln1, start, q, k, v, probs, att, drop1, mid, ln2, pre, act, drop2 });
            x = next;
        }

        let g = x[nc * d..].to_vec();
        let lnf = ops::layer_norm(&g, d, &self.params.lnf_gain, &self.params.lnf_bias);
        let nq = n - nc;
        let table = self.output_table();
        let vocab = cfg.vocab_size;
        let mut logits = vec![T::zero(); nq * vocab];
        ops::matmul(nq, d, vocab, &lnf.out, false, &table, true, &mut logits, false);
        Ok(ForwardCache {
            layout: lay,
            ids: inputs.iter().map(|i| i.ids.clone()).collect(),
            layers: caches,
            g,
            lnf,
            logits,
        })
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> ModelParameters<T> {
        self.backward_inputs(cache, dlogits).0
    }

    /// Parameter gradients plus, per example, the gradient w.r.t. each
    /// content-stream input row (`len x width`).
    pub fn backward_inputs(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> (ModelParameters<T>, Vec<Vec<T>>) {
        let cfg = &self.config;
        let (d, d_e, d_ff, heads, vocab) = (cfg.width(), cfg.d_e, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
        let lay = &cache.layout;
        let (nc, n) = (lay.nc, lay.n);
        let nq = n - nc;
        assert_eq!(dlogits.len(), nq * vocab, "dlogits shape");
        let mut grads = ModelParameters::<T>::zeros(cfg);

        let table = self.output_table();
        let mut dgf = vec![T::zero(); nq * d];
        ops::matmul(nq, vocab, d, dlogits, false, &table, false, &mut dgf, false);
        let mut dtable = vec![T::zero(); vocab * d];
        ops::matmul(vocab, nq, d, dlogits, true, &cache.lnf.out, false, &mut dtable, false);
        for (dst, src) in grads.tok_emb.chunks_exact_mut(d_e).zip(dtable.chunks_exact(d)) {
            ops::add_into(dst, &src[..d_e]);
        }

        let mut dx = vec![T::zero(); n * d];
        ops::layer_norm_backward(
            &dgf,
            &cache.g,
            &cache.lnf,
            &self.params.lnf_gain,
            d,
            &mut dx[nc * d..],
            &mut grads.lnf_gain,
            &mut grads.lnf_bias,
        );

        for (l, c) in cache.layers.iter().enumerate().rev() {
            let p = &self.params.layers[l];
            let gp = &mut grads.layers[l];
            let start = c.start;
            let rows = n - start;
            let blocks = if start > 0 { &lay.blocks_last } else { &lay.blocks_full };
            let dout = &dx[start * d..];

            let mut df = dout.to_vec();
            scale_by(&mut df, &c.drop2);
            let mut dact = vec![T::zero(); rows * d_ff];
            ops::linear_backward(&df, &c.act, rows, d_ff, &p.w2, d, &mut gp.w2, &mut gp.b2, Some(&mut dact));
            ops::gelu_backward_inplace(&mut dact, &c.pre);
            let mut dln2 = vec![T::zero(); rows * d];
            ops::linear_backward(&dact, &c.ln2.out, rows, d, &p.w1, d_ff, &mut gp.w1, &mut gp.b1, Some(&mut dln2));
            let mut dmid = dout.to_vec();
            ops::layer_norm_backward(
                &dln2,
                &c.mid,
                &c.ln2,
                &p.ln2_gain,
                d,
                &mut dmid,
                &mut gp.ln2_gain,
                &mut gp.ln2_bias,
            );

            let mut dobs = dmid.clone();
            scale_by(&mut dobs, &c.drop1);
            let mut datt = vec![T::zero(); rows * d];
            ops::linear_backward(&dobs, &c.att, rows, d, &p.wo, d, &mut gp.wo, &mut gp.bo, Some(&mut datt));
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); nc * d];
            let mut dv = vec![T::zero(); nc * d];
            ops::attention_backward(&datt, &c.q, &c.k, &c.v, &c.probs, d, heads, blocks, &mut dq, &mut dk, &mut dv);

            let mut dln1 = vec![T::zero(); n * d];
            let (dln1_c, _) = dln1.split_at_mut(nc * d);
            ops::linear_backward(&dk, &c.ln1.out[..nc * d], nc, d, &p.wk, d, &mut gp.wk, &mut gp.bk, Some(dln1_c));
            ops::linear_backward(&dv, &c.ln1.out[..nc * d], nc, d, &p.wv, d, &mut gp.wv, &mut gp.bv, Some(dln1_c));
            ops::linear_backward(
                &dq,
                &c.ln1.out[start * d..],
                rows,
                d,
                &p.wq,
                d,
                &mut gp.wq,
                &mut gp.bq,
                Some(&mut dln1[start * d..]),
            );

            let mut dprev = dx;
            dprev[start * d..].copy_from_slice(&dmid);
            ops::layer_norm_backward(
                &dln1,
                &c.x,
                &c.ln1,
                &p.ln1_gain,
                d,
                &mut dprev,
                &mut gp.ln1_gain,
                &mut gp.ln1_bias,
            );
            dx = dprev;
        }

        for (ids, &coff) in cache.ids.iter().zip(&lay.content_offsets) {
            for (r, &id) in ids.iter().enumerate() {
                let row = &dx[(coff + r) * d..(coff + r) * d + d_e];
                ops::add_into(&mut grads.tok_emb[id * d_e..(id + 1) * d_e], row);
            }
        }
        for row in dx[nc * d..].chunks_exact(d) {
            ops::add_into(&mut grads.query_init, row);
        }
        let inputs = cache
            .ids
            .iter()
            .zip(&lay.content_offsets)
            .map(|(ids, &coff)| dx[coff * d..(coff + ids.len()) * d].to_vec())
            .collect();
        (grads, inputs)
    }
}

/// Mean negative log-likelihood of `gold` under row-wise softmax of `logits`.
pub fn nll_loss<T: Scalar>(logits: &[T], vocab: usize, gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let lp = ops::log_softmax(logits, vocab);
    -gold.iter().enumerate().map(|(r, &g)| lp[r * vocab + g]).sum::<f64>() / gold.len() as f64
}

/// [`nll_loss`] and its gradient w.r.t. the logits.
pub fn nll_loss_grad<T: Scalar>(logits: &[T], vocab: usize, gold: &[usize]) -> (f64, Vec<T>) {
    let mut grad = vec![T::zero(); logits.len()];
    if gold.is_empty() {
        return (0.0, grad);
    }
    let lp = ops::log_softmax(logits, vocab);
    let inv = 1.0 / gold.len() as f64;
    let mut loss = 0.0;
    for (r, &g) in gold.iter().enumerate() {
        let row = &lp[r * vocab..(r + 1) * vocab];
        loss -= row[g];
        for (j, &l) in row.iter().enumerate() {
            let target = if j == g { 1.0 } else { 0.0 };
            grad[r * vocab + j] = ops::cast((l.exp() - target) * inv);
        }
    }
    (loss / gold.len() as f64, grad)
}
