//! Factorization orders, span mask plans and the two attention masks of
//! permutation language modeling.
//!
//! Positions are 0-based. An order `z` lists every position once; the
//! first `cutoff` entries are visible context and the rest are prediction
//! targets, predicted in the order they appear in `z`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedSequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorizationOrder {
    pub order: Vec<usize>,
    pub cutoff: usize,
}

impl FactorizationOrder {
    pub fn new(order: Vec<usize>, cutoff: usize) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &p in &order {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::MalformedSequence(format!("order {order:?} is not a permutation")));
            }
        }
        if cutoff > n {
            return Err(Error::MalformedSequence(format!("cutoff {cutoff} beyond length {n}")));
        }
        Ok(Self { order, cutoff })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Predicted positions, in prediction order.
    pub fn targets(&self) -> &[usize] {
        &self.order[self.cutoff..]
    }

    /// `ranks()[p]` is the index of position `p` in the order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (i, &p) in self.order.iter().enumerate() {
            r[p] = i;
        }
        r
    }
}

/// Masked-text indicator with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub max_span: usize,
    pub mask_fraction: f64,
}

impl MaskPlan {
    /// Plan masking exactly the given text positions.
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let max_span = longest_run(&mask).max(1);
        let frac = if mask.is_empty() { 0.0 } else { mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64 };
        Self { mask, max_span, mask_fraction: frac }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

pub fn longest_run(mask: &[bool]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &m in mask {
        run = if m { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

/// Boolean `len x len` masks; `content(i, j)` means row `i` may attend `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMasks {
    len: usize,
    content: Vec<bool>,
    query: Vec<bool>,
}

impl AttentionMasks {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn content(&self, i: usize, j: usize) -> bool {
        self.content[i * self.len + j]
    }

    pub fn query(&self, i: usize, j: usize) -> bool {
        self.query[i * self.len + j]
    }

    pub fn content_row(&self, i: usize) -> &[bool] {
        &self.content[i * self.len..(i + 1) * self.len]
    }

    pub fn query_row(&self, i: usize) -> &[bool] {
        &self.query[i * self.len..(i + 1) * self.len]
    }
}

/// Number of targets for a plain permutation objective: `round(f * len)`,
/// at least one and leaving at least one context token.
pub fn plm_target_count(len: usize, mask_fraction: f64) -> usize {
    let n = (mask_fraction * len as f64).round() as usize;
    n.max(1).min(len.saturating_sub(1).max(1))
}

/// Uniform permutation with the last `plm_target_count` entries as targets.
pub fn sample_plm_order<R: Rng + ?Sized>(len: usize, mask_fraction: f64, rng: &mut R) -> Result<FactorizationOrder> {
    if len < 2 {
        return Err(Error::MalformedSequence(format!("need at least 2 tokens, got {len}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let cutoff = len - plm_target_count(len, mask_fraction);
    Ok(FactorizationOrder { order, cutoff })
}

/// Text first (random arrangement), then property tags and separators,
/// then every numeral token as a target in sequence order.
pub fn sample_property_order<R: Rng + ?Sized>(seq: &TokenizedSequence, rng: &mut R) -> Result<FactorizationOrder> {
    if seq.blocks.is_empty() {
        return Err(Error::NoPropertyBlock);
    }
    let mut order: Vec<usize> = seq.text_range().collect();
    order.shuffle(rng);
    let numerals = seq.numeral_positions();
    let mut is_target = vec![false; seq.len()];
    for &p in &numerals {
        is_target[p] = true;
    }
    order.extend((0..seq.prop_len).filter(|&p| !is_target[p]));
    let cutoff = order.len();
    order.extend(numerals);
    Ok(FactorizationOrder { order, cutoff })
}

/// Property tokens in sequence order, unmasked text (random arrangement),
/// then the masked text positions as targets in sequence order.
pub fn sample_cgen_order<R: Rng + ?Sized>(
    seq: &TokenizedSequence,
    plan: &MaskPlan,
    rng: &mut R,
) -> Result<FactorizationOrder> {
    if plan.mask.len() != seq.text_len() {
        return Err(Error::ShapeMismatch(format!(
            "mask plan covers {} text tokens, sequence has {}",
            plan.mask.len(),
            seq.text_len()
        )));
    }
    if plan.masked_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let k = seq.prop_len;
    let mut order: Vec<usize> = (0..k).collect();
    let mut visible: Vec<usize> = plan
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| !m)
        .map(|(i, _)| k + i)
        .collect();
    visible.shuffle(rng);
    order.extend(visible);
    let cutoff = order.len();
    order.extend(plan.masked_positions().map(|i| k + i));
    Ok(FactorizationOrder { order, cutoff })
}

/// Deterministic decoding order: like [`sample_cgen_order`] /
/// [`sample_property_order`] but with context kept in sequence order.
/// `targets` must be ascending.
pub fn decoding_order(len: usize, context_first: &[usize], targets: &[usize]) -> FactorizationOrder {
    let mut is_placed = vec![false; len];
    let mut order = Vec::with_capacity(len);
    for &p in context_first.iter().chain(targets) {
        is_placed[p] = true;
    }
    order.extend_from_slice(context_first);
    order.extend((0..len).filter(|&p| !is_placed[p]));
    let cutoff = order.len();
    order.extend_from_slice(targets);
    FactorizationOrder { order, cutoff }
}

/// Masks `max(1, round(fraction * len))` text positions in spans whose
/// lengths are uniform in `1..=max_span`. Spans are kept apart when
/// possible and merged runs never exceed `max_span` unless the budget
/// cannot be met otherwise.
pub fn sample_mask_plan<R: Rng + ?Sized>(len: usize, mask_fraction: f64, max_span: usize, rng: &mut R) -> MaskPlan {
    let max_span = max_span.max(1);
    let mut mask = vec![false; len];
    if len == 0 {
        return MaskPlan { mask, max_span, mask_fraction };
    }
    let budget = ((mask_fraction * len as f64).round() as usize).clamp(1, len);
    let mut remaining = budget;
    let run_left = |mask: &[bool], s: usize| (0..s).rev().take_while(|&i| mask[i]).count();
    let run_right = |mask: &[bool], e: usize| (e..mask.len()).take_while(|&i| mask[i]).count();
    while remaining > 0 {
        let mut span = rng.random_range(1..=max_span).min(remaining);
        let placed = loop {
            let fits = |s: usize| (s..s + span).all(|i| !mask[i]);
            let starts: Vec<usize> = (0..=len - span).filter(|&s| fits(s)).collect();
            let apart: Vec<usize> = starts
                .iter()
                .copied()
                .filter(|&s| run_left(&mask, s) == 0 && run_right(&mask, s + span) == 0)
                .collect();
            let capped: Vec<usize> = starts
                .iter()
                .copied()
                .filter(|&s| run_left(&mask, s) + span + run_right(&mask, s + span) <= max_span)
                .collect();
            if let Some(&s) = pick(&apart, rng).or_else(|| pick(&capped, rng)) {
                break Some(s);
            }
            if span > 1 {
                span -= 1;
                continue;
            }
            break pick(&starts, rng).copied();
        };
        let Some(s) = placed else { break };
        for m in &mut mask[s..s + span] {
            *m = true;
        }
        remaining -= span;
    }
    MaskPlan { mask, max_span, mask_fraction }
}

fn pick<'a, R: Rng + ?Sized>(xs: &'a [usize], rng: &mut R) -> Option<&'a usize> {
    if xs.is_empty() {
        None
    } else {
        Some(&xs[rng.random_range(0..xs.len())])
    }
}

/// Content stream: `j` visible to `i` iff `rank(j) <= rank(i)`.
/// Query stream: iff `rank(j) < rank(i)`.
pub fn build_attention_masks(order: &FactorizationOrder) -> AttentionMasks {
    let len = order.len();
    let ranks = order.ranks();
    let mut content = vec![false; len * len];
    let mut query = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            content[i * len + j] = ranks[j] <= ranks[i];
            query[i * len + j] = ranks[j] < ranks[i];
        }
    }
    AttentionMasks { len, content, query }
}
