//! Filling masked positions: constrained greedy decoding of property
//! numerals, beam search over masked text, and primed generation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{build_attention_masks, decoding_order, MaskPlan};
use crate::model::{log_softmax, Model, ModelInput, Scalar};
use crate::tokenizer::{numeral_ids, Decimal, Slot, TokenizedSequence, Vocabulary};

/// Inputs per forward call during decoding.
const CHUNK: usize = 256;

/// Candidate log-probabilities renormalized over `candidates`.
fn constrained(logprobs: &[f64], candidates: &[usize]) -> Vec<(usize, f64)> {
    let max = candidates.iter().map(|&c| logprobs[c]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + candidates.iter().map(|&c| (logprobs[c] - max).exp()).sum::<f64>().ln();
    candidates.iter().map(|&c| (c, logprobs[c] - lse)).collect()
}

/// Runs the model on `inputs` (each with exactly one target) in chunks and
/// returns one log-softmax row per input.
fn next_token_logprobs<T: Scalar>(model: &Model<T>, inputs: Vec<ModelInput>) -> Result<Vec<Vec<f64>>> {
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let logits = model.forward(chunk)?;
        let lp = log_softmax(&logits, v);
        out.extend(lp.chunks_exact(v).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn single_target(ids: Vec<usize>, targets: &[usize], slot: usize) -> ModelInput {
    let order = decoding_order(ids.len(), &[], targets);
    ModelInput { masks: build_attention_masks(&order), ids, targets: vec![targets[slot]] }
}

/// One property value recovered by constrained decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyPrediction {
    /// Index of the block in the sequence.
    pub block: usize,
    pub value: Decimal,
    /// Constrained distribution per filled slot.
    pub slot_distributions: Vec<Vec<(usize, f64)>>,
}

impl PropertyPrediction {
    /// Entropy (nats) of each slot's constrained distribution.
    pub fn slot_entropies(&self) -> Vec<f64> {
        self.slot_distributions
            .iter()
            .map(|d| -d.iter().map(|&(_, lp)| if lp.is_finite() { lp.exp() * lp } else { 0.0 }).sum::<f64>())
            .collect()
    }
}

/// Masked numeral slots of `seq` with their template kinds.
fn masked_numeral_slots(seq: &TokenizedSequence, vocab: &Vocabulary) -> Vec<(usize, usize, Slot)> {
    let mask = vocab.mask_id();
    let mut out = Vec::new();
    for (b, block) in seq.blocks.iter().enumerate() {
        let schema = &vocab.schema().properties[block.property];
        let negative = schema.signed && block.numeral.len() == schema.width(true);
        let template = schema.template(negative);
        for (pos, slot) in block.numeral.clone().zip(template) {
            if seq.ids[pos] == mask {
                out.push((b, pos, slot));
            }
        }
    }
    out
}

/// Fills every masked numeral slot greedily, left to right, choosing among
/// the tokens the slot's template allows (ties to the lowest id). Returns
/// the filled sequences and one prediction per block that had masked slots.
pub fn predict_properties<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seqs: &[TokenizedSequence],
) -> Result<Vec<(TokenizedSequence, Vec<PropertyPrediction>)>> {
    let slots: Vec<_> = seqs.iter().map(|s| masked_numeral_slots(s, vocab)).collect();
    if let Some(_) = slots.iter().find(|s| s.is_empty()) {
        return Err(Error::NoMaskedNumerals);
    }
    let mut filled: Vec<TokenizedSequence> = seqs.to_vec();
    let mut dists: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::new(); seqs.len()];
    let positions: Vec<Vec<usize>> = slots.iter().map(|s| s.iter().map(|&(_, p, _)| p).collect()).collect();
    let max_slots = slots.iter().map(Vec::len).max().unwrap_or(0);
    for step in 0..max_slots {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| slots[i].len() > step).collect();
        let mut pending = Vec::new();
        for &i in &active {
            let candidates = vocab.slot_candidates(slots[i][step].2);
            if candidates.len() == 1 {
                filled[i].ids[positions[i][step]] = candidates[0];
                dists[i].push(vec![(candidates[0], 0.0)]);
            } else {
                pending.push((i, candidates));
            }
        }
        let inputs = pending.iter().map(|(i, _)| single_target(filled[*i].ids.clone(), &positions[*i], step)).collect();
        let rows = next_token_logprobs(model, inputs)?;
        for ((i, candidates), row) in pending.into_iter().zip(rows) {
            let dist = constrained(&row, &candidates);
            let best = dist
                .iter()
                .fold(None::<(usize, f64)>, |acc, &(c, lp)| match acc {
                    Some((bc, blp)) if blp > lp || (blp == lp && bc < c) => Some((bc, blp)),
                    _ => Some((c, lp)),
                })
                .expect("slot has candidates");
            filled[i].ids[positions[i][step]] = best.0;
            dists[i].push(dist);
        }
    }

    let mut out = Vec::with_capacity(seqs.len());
    for ((seq, slot_list), dist) in filled.into_iter().zip(&slots).zip(dists) {
        let values = crate::tokenizer::block_values(&seq, vocab)?;
        let mut preds: Vec<PropertyPrediction> = Vec::new();
        for (&(b, _, _), d) in slot_list.iter().zip(dist) {
            match preds.last_mut() {
                Some(p) if p.block == b => p.slot_distributions.push(d),
                _ => preds.push(PropertyPrediction { block: b, value: values[b], slot_distributions: vec![d] }),
            }
        }
        out.push((seq, preds));
    }
    Ok(out)
}

/// Single-sequence convenience for [`predict_properties`]: value of the
/// first block with masked slots.
pub fn predict_property<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seq: &TokenizedSequence,
) -> Result<PropertyPrediction> {
    let mut out = predict_properties(model, vocab, std::slice::from_ref(seq))?;
    Ok(out.pop().expect("one result").1.remove(0))
}

/// `seq` with every numeral slot of every block replaced by `[MASK]`.
pub fn mask_numerals(seq: &TokenizedSequence, vocab: &Vocabulary) -> TokenizedSequence {
    seq.with_replaced(seq.numeral_positions(), vocab.mask_id())
}

/// `seq` with the numeral of `property`'s block masked.
pub fn mask_property(seq: &TokenizedSequence, vocab: &Vocabulary, property: usize) -> Result<TokenizedSequence> {
    let block = seq.blocks.iter().find(|b| b.property == property).ok_or(Error::NoPropertyBlock)?;
    Ok(seq.with_replaced(block.numeral.clone(), vocab.mask_id()))
}

/// A hypothesis: chosen ids so far and summed log-probability.
pub type Hypothesis = (Vec<usize>, f64);

fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Beam over a fixed number of slots.
#[derive(Debug, Clone)]
pub struct BeamState {
    width: usize,
    hyps: Vec<Hypothesis>,
}

impl BeamState {
    pub fn new(width: usize) -> Self {
        Self { width: width.max(1), hyps: vec![(Vec::new(), 0.0)] }
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hyps
    }

    /// Extends hypothesis `h` by each `(id, logprob)` of `expansions[h]` and
    /// keeps the best `width` (ties to lexicographically lowest ids).
    pub fn advance(&mut self, expansions: &[Vec<(usize, f64)>]) {
        let mut next = Vec::new();
        for ((prefix, score), exp) in self.hyps.iter().zip(expansions) {
            for &(id, lp) in exp {
                let mut p = prefix.clone();
                p.push(id);
                next.push((p, score + lp));
            }
        }
        next.sort_by(hyp_order);
        next.truncate(self.width);
        self.hyps = next;
    }

    pub fn finish(self) -> Vec<Hypothesis> {
        self.hyps
    }
}

/// Beam search over `n_slots` slots; `expand` maps each current prefix to
/// the candidates for the next slot.
pub fn beam_search<F>(n_slots: usize, width: usize, mut expand: F) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[Hypothesis]) -> Result<Vec<Vec<(usize, f64)>>>,
{
    let mut beam = BeamState::new(width);
    for _ in 0..n_slots {
        let exp = expand(beam.hypotheses())?;
        beam.advance(&exp);
    }
    Ok(beam.finish())
}

/// Filled sequences, best first, with their summed log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub sequences: Vec<(TokenizedSequence, f64)>,
}

impl DecodeResult {
    pub fn best(&self) -> &TokenizedSequence {
        &self.sequences[0].0
    }
}

fn masked_text_positions(seq: &TokenizedSequence, mask: usize) -> Vec<usize> {
    seq.text_range().filter(|&p| seq.ids[p] == mask).collect()
}

/// Beam search over the masked text slots of each sequence, left to right,
/// restricted to text tokens. Sequences are decoded in lockstep so each
/// slot costs one batched forward pass.
pub fn beam_fill_batch<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seqs: &[TokenizedSequence],
    width: usize,
) -> Result<Vec<DecodeResult>> {
    let mask = vocab.mask_id();
    let candidates = vocab.text_ids();
    if candidates.is_empty() {
        return Err(Error::InvalidSchema("vocabulary has no text symbols".into()));
    }
    let positions: Vec<Vec<usize>> = seqs.iter().map(|s| masked_text_positions(s, mask)).collect();
    let mut beams: Vec<BeamState> = seqs.iter().map(|_| BeamState::new(width)).collect();
    let max_slots = positions.iter().map(Vec::len).max().unwrap_or(0);
    for step in 0..max_slots {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| positions[i].len() > step).collect();
        let mut inputs = Vec::new();
        for &i in &active {
            for (prefix, _) in beams[i].hypotheses() {
                let mut ids = seqs[i].ids.clone();
                for (&p, &id) in positions[i].iter().zip(prefix) {
                    ids[p] = id;
                }
                inputs.push(single_target(ids, &positions[i], step));
            }
        }
        let mut rows = next_token_logprobs(model, inputs)?.into_iter();
        for &i in &active {
            let exp: Vec<Vec<(usize, f64)>> = (0..beams[i].hypotheses().len())
                .map(|_| constrained(&rows.next().expect("row per hypothesis"), candidates))
                .collect();
            beams[i].advance(&exp);
        }
    }
    Ok(seqs
        .iter()
        .zip(positions)
        .zip(beams)
        .map(|((seq, pos), beam)| {
            let sequences = beam
                .finish()
                .into_iter()
                .map(|(fill, score)| (seq.with_filled(&pos, &fill), score))
                .collect();
            DecodeResult { sequences }
        })
        .collect())
}

pub fn beam_fill<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seq: &TokenizedSequence,
    width: usize,
) -> Result<DecodeResult> {
    Ok(beam_fill_batch(model, vocab, std::slice::from_ref(seq), width)?.remove(0))
}

/// A desired property value to write into a sequence's property block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primer {
    pub property: String,
    pub value: f64,
}

impl Primer {
    pub fn new(property: impl Into<String>, value: f64) -> Self {
        Self { property: property.into(), value }
    }

    /// Parses `name=value`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, value) = s.split_once('=').ok_or_else(|| Error::Config(format!("primer {s:?} is not name=value")))?;
        let value: f64 = value.trim().parse().map_err(|_| Error::MalformedNumber(value.to_string()))?;
        Ok(Self::new(name.trim(), value))
    }
}

/// Overwrites the numerals of the primed properties.
pub fn apply_primers(seq: &TokenizedSequence, primers: &[Primer], vocab: &Vocabulary) -> Result<TokenizedSequence> {
    let mut blocks: Vec<(usize, Decimal)> = seq
        .blocks
        .iter()
        .zip(crate::tokenizer::block_values(seq, vocab)?)
        .map(|(b, v)| (b.property, v))
        .collect();
    for primer in primers {
        let idx = vocab
            .schema()
            .index_of(&primer.property)
            .ok_or_else(|| Error::UnknownProperty(primer.property.clone()))?;
        let value = vocab.schema().properties[idx].quantize(primer.value)?;
        numeral_ids(idx, value, vocab)?;
        match blocks.iter_mut().find(|(p, _)| *p == idx) {
            Some(slot) => slot.1 = value,
            None => blocks.push((idx, value)),
        }
    }
    blocks.sort_by_key(|(p, _)| *p);
    crate::tokenizer::encode_ids(&blocks, seq.text_ids(), vocab)
}

/// `seq` with text positions masked per `plan`.
pub fn mask_text(seq: &TokenizedSequence, plan: &MaskPlan, vocab: &Vocabulary) -> Result<TokenizedSequence> {
    if plan.mask.len() != seq.text_len() {
        return Err(Error::ShapeMismatch(format!(
            "mask plan covers {} text tokens, sequence has {}",
            plan.mask.len(),
            seq.text_len()
        )));
    }
    Ok(seq.with_replaced(plan.masked_positions().map(|i| seq.prop_len + i), vocab.mask_id()))
}

/// Primes, masks per `plan`, and beam-fills.
pub fn generate_conditional<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seed: &TokenizedSequence,
    primers: &[Primer],
    plan: &MaskPlan,
    width: usize,
) -> Result<DecodeResult> {
    Ok(generate_conditional_batch(model, vocab, &[(seed.clone(), primers.to_vec(), plan.clone())], width)?.remove(0))
}

/// Batched [`generate_conditional`].
pub fn generate_conditional_batch<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    jobs: &[(TokenizedSequence, Vec<Primer>, MaskPlan)],
    width: usize,
) -> Result<Vec<DecodeResult>> {
    let mut prepared = Vec::with_capacity(jobs.len());
    for (seed, primers, plan) in jobs {
        if plan.masked_count() == 0 {
            return Err(Error::EmptyMask);
        }
        prepared.push(mask_text(&apply_primers(seed, primers, vocab)?, plan, vocab)?);
    }
    beam_fill_batch(model, vocab, &prepared, width)
}
