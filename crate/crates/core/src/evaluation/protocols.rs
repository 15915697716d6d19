//! Evaluation protocols: property regression, primer sweeps, segment
//! reconstruction and decoration, and similarity-constrained optimization.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{mae, pcc, r2, rmse, spearman, Correlation};
use super::similarity::token_tanimoto;
use crate::data::SynthKind;
use crate::decoding::{apply_primers, beam_fill_batch, generate_conditional_batch, mask_property, predict_properties, Primer};
use crate::error::{Error, Result};
use crate::masking::{sample_mask_plan, MaskPlan};
use crate::model::{Model, Scalar};
use crate::tokenizer::{block_values, TokenizedSequence, Vocabulary};

/// Maps generated sequences to property values.
pub type Oracle<'a> = dyn FnMut(&[TokenizedSequence]) -> Result<Vec<f64>> + 'a;

/// Headline numbers of an evaluation run. Absent fields were not measured.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_var_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novelty_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_improvement: Option<f64>,
    /// Names of metrics whose inputs had zero variance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    fn note(&mut self, name: &str, c: Correlation) -> Option<f64> {
        if c.degenerate {
            self.degenerate.push(name.to_string());
        }
        Some(c.value)
    }
}

/// RMSE, MAE, PCC, R² and Spearman of `preds` against `golds`.
pub fn regression_metrics(preds: &[f64], golds: &[f64]) -> MetricsReport {
    let mut r = MetricsReport { n: preds.len(), rmse: Some(rmse(preds, golds)), mae: Some(mae(preds, golds)), ..Default::default() };
    r.pcc = r.note("pcc", pcc(preds, golds));
    r.r2 = r.note("r2", r2(preds, golds));
    r.spearman_rho = r.note("spearman_rho", spearman(preds, golds));
    r
}

/// Predicted and true values of `property` for each sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionOutcome {
    pub preds: Vec<f64>,
    pub golds: Vec<f64>,
    pub report: MetricsReport,
}

/// Masks the numeral of `property`, decodes it, and scores against the value
/// the sequence carried.
pub fn regression_eval<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seqs: &[TokenizedSequence],
    property: usize,
) -> Result<RegressionOutcome> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut golds = Vec::with_capacity(seqs.len());
    let mut masked = Vec::with_capacity(seqs.len());
    for s in seqs {
        let b = s.blocks.iter().position(|b| b.property == property).ok_or(Error::NoPropertyBlock)?;
        golds.push(block_values(s, vocab)?[b].to_f64());
        masked.push(mask_property(s, vocab, property)?);
    }
    let preds: Vec<f64> = predict_properties(model, vocab, &masked)?
        .into_iter()
        .map(|(_, p)| p[0].value.to_f64())
        .collect();
    let report = regression_metrics(&preds, &golds);
    Ok(RegressionOutcome { preds, golds, report })
}

/// Text symbols of a sequence.
pub fn text_symbols(seq: &TokenizedSequence, vocab: &Vocabulary) -> Result<Vec<String>> {
    seq.text_ids().iter().map(|&id| vocab.token(id).map(ToString::to_string)).collect()
}

/// Oracle for synthetic data. `segments` fixes the segment layout for
/// [`SynthKind::SegmentedYield`]; otherwise it is read from delimiters.
pub fn synthetic_oracle<'a>(
    kind: SynthKind,
    alphabet: Vec<String>,
    segments: Option<Vec<(usize, usize)>>,
    vocab: &'a Vocabulary,
) -> impl FnMut(&[TokenizedSequence]) -> Result<Vec<f64>> + 'a {
    move |seqs| {
        seqs.iter()
            .map(|s| Ok(kind.oracle(&text_symbols(s, vocab)?, segments.as_deref(), &alphabet)))
            .collect()
    }
}

/// Oracle that asks the model itself: masks `property` and decodes it.
pub fn self_oracle<'a, T: Scalar>(
    model: &'a Model<T>,
    vocab: &'a Vocabulary,
    property: usize,
) -> impl FnMut(&[TokenizedSequence]) -> Result<Vec<f64>> + 'a {
    move |seqs| {
        let masked = seqs.iter().map(|s| mask_property(s, vocab, property)).collect::<Result<Vec<_>>>()?;
        Ok(predict_properties(model, vocab, &masked)?.into_iter().map(|(_, p)| p[0].value.to_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub property: String,
    pub n_primers: usize,
    pub min: f64,
    pub max: f64,
    pub mask_fraction: f64,
    pub max_span: usize,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            property: "y".into(),
            n_primers: 10,
            min: 0.0,
            max: 1.0,
            mask_fraction: 0.4,
            max_span: 7,
            beam_width: 1,
            seed: 0,
        }
    }
}

/// `n_primers` evenly spaced values in `[min, max]`, quantized to the schema.
pub fn primer_values(cfg: &SweepConfig, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let idx = vocab.schema().index_of(&cfg.property).ok_or_else(|| Error::UnknownProperty(cfg.property.clone()))?;
    let schema = &vocab.schema().properties[idx];
    let n = cfg.n_primers;
    (0..n)
        .map(|i| {
            let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            Ok(schema.quantize(cfg.min + t * (cfg.max - cfg.min))?.to_f64())
        })
        .collect()
}

/// Sweep outcome for one seed sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: usize,
    /// Spearman of primer vs realized property over unique generations.
    pub rho: Correlation,
    pub unique: usize,
    /// All unique generations share one property value.
    pub zero_var: bool,
}

/// One generated sequence of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: usize,
    pub primer: f64,
    pub realized: f64,
    /// First occurrence of this text among the seed's generations.
    pub unique: bool,
    /// Text absent from the training set.
    pub novel: bool,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub per_seed: Vec<SeedSweep>,
    pub rows: Vec<SweepRow>,
    /// Mean per-seed rho; degenerate seeds count as 0.
    pub mean_rho: f64,
    pub zero_var_fraction: f64,
    pub novelty_fraction: f64,
}

impl SweepReport {
    pub fn metrics(&self) -> MetricsReport {
        MetricsReport {
            n: self.per_seed.len(),
            spearman_rho: Some(self.mean_rho),
            zero_var_fraction: Some(self.zero_var_fraction),
            novelty_fraction: Some(self.novelty_fraction),
            ..Default::default()
        }
    }

    /// CSV with one row per generation.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// For each seed, one mask plan (shared by all primers) and the best
/// generation per primer, in primer order.
pub fn primer_sweep_decode<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seeds: &[TokenizedSequence],
    cfg: &SweepConfig,
) -> Result<Vec<Vec<TokenizedSequence>>> {
    let primers = primer_values(cfg, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jobs = Vec::with_capacity(seeds.len() * primers.len());
    for seq in seeds {
        let plan = nonempty_plan(seq.text_len(), cfg.mask_fraction, cfg.max_span, &mut rng)?;
        for &p in &primers {
            jobs.push((seq.clone(), vec![Primer::new(cfg.property.clone(), p)], plan.clone()));
        }
    }
    let results = generate_conditional_batch(model, vocab, &jobs, cfg.beam_width)?;
    let mut out = Vec::with_capacity(seeds.len());
    let mut it = results.into_iter();
    for _ in seeds {
        out.push(it.by_ref().take(primers.len()).map(|r| r.best().clone()).collect());
    }
    Ok(out)
}

/// One mask plan per text length, drawn from a single seeded stream.
pub fn seeded_plans(text_lens: &[usize], mask_fraction: f64, max_span: usize, seed: u64) -> Result<Vec<MaskPlan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    text_lens.iter().map(|&n| nonempty_plan(n, mask_fraction, max_span, &mut rng)).collect()
}

fn nonempty_plan(len: usize, fraction: f64, max_span: usize, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    let plan = sample_mask_plan(len, fraction, max_span, rng);
    if plan.masked_count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(plan)
}

/// Scores a sweep. `generated[s][j]` was primed with `primers[j]` and has
/// property `realized[s][j]`; duplicates within a seed keep their first
/// occurrence.
pub fn primer_sweep_score(
    generated: &[Vec<TokenizedSequence>],
    primers: &[f64],
    realized: &[Vec<f64>],
    train_texts: &HashSet<Vec<usize>>,
    vocab: &Vocabulary,
) -> Result<SweepReport> {
    let mut per_seed = Vec::with_capacity(generated.len());
    let mut rows = Vec::new();
    let (mut n_unique, mut n_novel) = (0usize, 0usize);
    for (s, (gens, vals)) in generated.iter().zip(realized).enumerate() {
        let mut seen = HashSet::new();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for ((g, &v), &p) in gens.iter().zip(vals).zip(primers) {
            let unique = seen.insert(g.text_ids().to_vec());
            let novel = !train_texts.contains(g.text_ids());
            if unique {
                xs.push(p);
                ys.push(v);
                n_unique += 1;
                n_novel += novel as usize;
            }
            rows.push(SweepRow { seed: s, primer: p, realized: v, unique, novel, text: text_symbols(g, vocab)?.join(" ") });
        }
        let zero_var = ys.iter().all(|&y| y == ys[0]);
        per_seed.push(SeedSweep { seed: s, rho: spearman(&xs, &ys), unique: xs.len(), zero_var });
    }
    let n = per_seed.len().max(1) as f64;
    Ok(SweepReport {
        mean_rho: per_seed.iter().map(|p| p.rho.value).sum::<f64>() / n,
        zero_var_fraction: per_seed.iter().filter(|p| p.zero_var).count() as f64 / n,
        novelty_fraction: if n_unique == 0 { 1.0 } else { n_novel as f64 / n_unique as f64 },
        per_seed,
        rows,
    })
}

/// Decodes a sweep and scores it with `oracle`. Also returns the
/// generations.
pub fn primer_sweep<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seeds: &[TokenizedSequence],
    cfg: &SweepConfig,
    oracle: &mut Oracle<'_>,
    train_texts: &HashSet<Vec<usize>>,
) -> Result<(SweepReport, Vec<Vec<TokenizedSequence>>)> {
    let generated = primer_sweep_decode(model, vocab, seeds, cfg)?;
    let realized = realize(&generated, oracle)?;
    let report = primer_sweep_score(&generated, &primer_values(cfg, vocab)?, &realized, train_texts, vocab)?;
    Ok((report, generated))
}

/// Oracle values with the nesting of `generated`.
pub fn realize(generated: &[Vec<TokenizedSequence>], oracle: &mut Oracle<'_>) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<TokenizedSequence> = generated.iter().flatten().cloned().collect();
    let mut values = oracle(&flat)?.into_iter();
    Ok(generated.iter().map(|g| values.by_ref().take(g.len()).collect()).collect())
}

/// A sequence with a designated text segment `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedSeq {
    pub seq: TokenizedSequence,
    pub segment: (usize, usize),
}

fn segment_plan(seq: &TokenizedSequence, segment: (usize, usize)) -> Result<MaskPlan> {
    let (a, b) = segment;
    if a >= b || b > seq.text_len() {
        return Err(Error::ShapeMismatch(format!("segment {a}..{b} outside text of length {}", seq.text_len())));
    }
    let mask = (0..seq.text_len()).map(|i| i >= a && i < b).collect();
    Ok(MaskPlan::from_mask(mask))
}

/// Masks each designated segment, beam-fills with width `top_k`, and
/// reports exact top-k recovery and the mean token Tanimoto of the best
/// fill against the original. With `with_property` false the property
/// numerals are masked too.
pub fn reconstruction_eval<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    items: &[SegmentedSeq],
    top_k: usize,
    with_property: bool,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut prepared = Vec::with_capacity(items.len());
    for it in items {
        let plan = segment_plan(&it.seq, it.segment)?;
        let mut s = crate::decoding::mask_text(&it.seq, &plan, vocab)?;
        if !with_property {
            s = crate::decoding::mask_numerals(&s, vocab);
        }
        prepared.push(s);
    }
    let results = beam_fill_batch(model, vocab, &prepared, top_k)?;
    let (mut hits, mut sim) = (0usize, 0.0);
    for (it, res) in items.iter().zip(&results) {
        let (a, b) = it.segment;
        let truth = &it.seq.text_ids()[a..b];
        hits += res.sequences.iter().take(top_k).any(|(s, _)| &s.text_ids()[a..b] == truth) as usize;
        sim += token_tanimoto(&text_symbols(res.best(), vocab)?, &text_symbols(&it.seq, vocab)?);
    }
    let n = items.len() as f64;
    Ok(MetricsReport {
        n: items.len(),
        topk_accuracy: Some(hits as f64 / n),
        mean_similarity: Some(sim / n),
        ..Default::default()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecorationConfig {
    pub property: String,
    /// Added to the seed's own property value to form the primer.
    pub boost: f64,
    pub top_k: usize,
    /// Upper clamp for the primed value.
    pub max_value: f64,
}

impl Default for DecorationConfig {
    fn default() -> Self {
        Self { property: "y".into(), boost: 0.2, top_k: 5, max_value: 1.0 }
    }
}

/// Decoration outcome for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoration {
    pub seed_value: f64,
    /// Oracle values of the top-k fills that differ from the seed and whose
    /// segment does not occur in training data.
    pub candidates: Vec<f64>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecorationReport {
    pub per_seed: Vec<Decoration>,
    /// Fraction of seeds with a candidate strictly above the seed's value.
    pub success_rate: f64,
    /// Mean best-candidate improvement over seeds with candidates.
    pub mean_improvement: f64,
}

impl DecorationReport {
    pub fn metrics(&self) -> MetricsReport {
        MetricsReport {
            n: self.per_seed.len(),
            success_rate: Some(self.success_rate),
            mean_improvement: Some(self.mean_improvement),
            ..Default::default()
        }
    }
}

/// Masks the designated segment, primes the seed's oracle value plus
/// `boost`, and keeps the top-k fills.
pub fn decoration_eval<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seeds: &[SegmentedSeq],
    cfg: &DecorationConfig,
    train_segments: &HashSet<Vec<usize>>,
    oracle: &mut Oracle<'_>,
) -> Result<DecorationReport> {
    if seeds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seq_list: Vec<TokenizedSequence> = seeds.iter().map(|s| s.seq.clone()).collect();
    let base = oracle(&seq_list)?;
    let mut jobs = Vec::with_capacity(seeds.len());
    for (s, &v) in seeds.iter().zip(&base) {
        let primer = Primer::new(cfg.property.clone(), (v + cfg.boost).min(cfg.max_value));
        jobs.push((s.seq.clone(), vec![primer], segment_plan(&s.seq, s.segment)?));
    }
    let results = generate_conditional_batch(model, vocab, &jobs, cfg.top_k)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for ((s, res), &v) in seeds.iter().zip(results).zip(&base) {
        let (a, b) = s.segment;
        let fills: Vec<TokenizedSequence> = res
            .sequences
            .into_iter()
            .take(cfg.top_k)
            .map(|(t, _)| t)
            .filter(|t| t.text_ids() != s.seq.text_ids() && !train_segments.contains(&t.text_ids()[a..b]))
            .collect();
        let candidates = if fills.is_empty() { Vec::new() } else { oracle(&fills)? };
        let success = candidates.iter().any(|&c| c > v);
        per_seed.push(Decoration { seed_value: v, candidates, success });
    }
    let with: Vec<&Decoration> = per_seed.iter().filter(|d| !d.candidates.is_empty()).collect();
    let mean_improvement = if with.is_empty() {
        0.0
    } else {
        with.iter().map(|d| d.candidates.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.seed_value).sum::<f64>()
            / with.len() as f64
    };
    Ok(DecorationReport {
        success_rate: per_seed.iter().filter(|d| d.success).count() as f64 / per_seed.len() as f64,
        mean_improvement,
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstrainedOptConfig {
    pub primer: Primer,
    pub pool_size: usize,
    /// Minimum similarity to the seed.
    pub delta: f64,
    /// Mask fractions and span caps cycled through while building the pool.
    pub fractions: Vec<f64>,
    pub spans: Vec<usize>,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for ConstrainedOptConfig {
    fn default() -> Self {
        Self {
            primer: Primer::new("y", 1.0),
            pool_size: 80,
            delta: 0.4,
            fractions: vec![0.2, 0.3, 0.4, 0.5],
            spans: vec![3, 5, 7],
            beam_width: 1,
            seed: 0,
        }
    }
}

/// The pool's mask plans: grid point `i % grid` for draw `i`, sampled from
/// one seeded stream.
pub fn pool_plans(cfg: &ConstrainedOptConfig, text_len: usize) -> Result<Vec<MaskPlan>> {
    if cfg.fractions.is_empty() || cfg.spans.is_empty() {
        return Err(Error::Config("constrained optimization needs at least one fraction and span".into()));
    }
    let grid: Vec<(f64, usize)> = cfg.fractions.iter().flat_map(|&f| cfg.spans.iter().map(move |&s| (f, s))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.pool_size)
        .map(|i| {
            let (f, s) = grid[i % grid.len()];
            nonempty_plan(text_len, f, s, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub best: TokenizedSequence,
    pub best_value: f64,
    pub seed_value: f64,
    pub best_similarity: f64,
    /// Distinct candidates (seed included) meeting the similarity bound.
    pub feasible: usize,
}

impl OptimizationResult {
    pub fn improvement(&self) -> f64 {
        self.best_value - self.seed_value
    }
}

/// Generates a pool of primed variants of `seed`, keeps those at least
/// `delta` similar to it (the seed itself always qualifies), and returns the
/// one with the highest oracle value (ties to the earliest).
pub fn constrained_optimization<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    seed: &TokenizedSequence,
    cfg: &ConstrainedOptConfig,
    oracle: &mut Oracle<'_>,
    similarity: &mut dyn FnMut(&TokenizedSequence, &TokenizedSequence) -> Result<f64>,
) -> Result<OptimizationResult> {
    let plans = pool_plans(cfg, seed.text_len())?;
    let jobs: Vec<_> = plans.into_iter().map(|p| (seed.clone(), vec![cfg.primer.clone()], p)).collect();
    let results = generate_conditional_batch(model, vocab, &jobs, cfg.beam_width)?;
    let seed_primed = apply_primers(seed, std::slice::from_ref(&cfg.primer), vocab)?;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(seed.text_ids().to_vec());
    let mut pool = vec![(seed_primed, 1.0)];
    for r in &results {
        let cand = r.best();
        if seen.insert(cand.text_ids().to_vec()) {
            let sim = similarity(seed, cand)?;
            if sim >= cfg.delta {
                pool.push((cand.clone(), sim));
            }
        }
    }
    let seqs: Vec<TokenizedSequence> = pool.iter().map(|(s, _)| s.clone()).collect();
    let values = oracle(&seqs)?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(OptimizationResult {
        best: pool[best].0.clone(),
        best_value: values[best],
        seed_value: values[0],
        best_similarity: pool[best].1,
        feasible: pool.len(),
    })
}

/// Token Tanimoto of the text parts of two sequences.
pub fn tanimoto_similarity<'a>(
    vocab: &'a Vocabulary,
) -> impl FnMut(&TokenizedSequence, &TokenizedSequence) -> Result<f64> + 'a {
    move |a, b| Ok(token_tanimoto(&text_symbols(a, vocab)?, &text_symbols(b, vocab)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::generate_conditional;
    use crate::model::ModelConfig;
    use crate::tokenizer::{encode_sequence, PropertySchema, Schema};

    fn setup() -> (Model<f64>, Vocabulary, Vec<TokenizedSequence>) {
        let vocab = Vocabulary::new(Schema::new(vec![PropertySchema::new("y", 1, 2)]), ["A", "B", "C"]).unwrap();
        let cfg = ModelConfig { n_layers: 1, d_e: 16, d_ff: 16, n_heads: 2, ..Default::default() };
        let model = Model::new(cfg, &vocab, 3).unwrap();
        let seqs = ["AABCA", "BBCAC", "CCABA"]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let toks: Vec<String> = t.chars().map(|c| c.to_string()).collect();
                encode_sequence(&[("y".to_string(), 0.1 * i as f64)].into_iter().collect(), &toks, &vocab).unwrap()
            })
            .collect();
        (model, vocab, seqs)
    }

    fn frac_a(vocab: &Vocabulary) -> impl FnMut(&[TokenizedSequence]) -> Result<Vec<f64>> + '_ {
        synthetic_oracle(SynthKind::FractionOfA, vec!["A".into(), "B".into(), "C".into()], None, vocab)
    }

    #[test]
    fn sweep_dedup_and_zero_var() {
        let (_, vocab, seqs) = setup();
        let gens = vec![vec![seqs[0].clone(), seqs[0].clone(), seqs[1].clone()], vec![seqs[2].clone(); 3]];
        let realized = vec![vec![0.4, 0.9, 0.2], vec![0.4, 0.4, 0.4]];
        let train: HashSet<Vec<usize>> = [seqs[1].text_ids().to_vec()].into_iter().collect();
        let r = primer_sweep_score(&gens, &[0.0, 0.5, 1.0], &realized, &train, &vocab).unwrap();
        assert_eq!(r.per_seed[0].unique, 2);
        // kept pairs (0.0, 0.4) and (1.0, 0.2)
        assert!((r.per_seed[0].rho.value + 1.0).abs() < 1e-12);
        assert!(r.per_seed[1].zero_var && r.per_seed[1].rho.degenerate);
        assert_eq!(r.zero_var_fraction, 0.5);
        assert!((r.mean_rho + 0.5).abs() < 1e-12);
        assert!((r.novelty_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(primer_sweep_score(&gens, &[0.0, 0.5, 1.0], &realized, &HashSet::new(), &vocab).unwrap().novelty_fraction, 1.0);
    }

    #[test]
    fn sweep_runs_end_to_end() {
        let (model, vocab, seqs) = setup();
        let cfg = SweepConfig { n_primers: 4, ..Default::default() };
        assert_eq!(primer_values(&cfg, &vocab).unwrap(), vec![0.0, 0.33, 0.67, 1.0]);
        let mut oracle = frac_a(&vocab);
        let (r, gens) = primer_sweep(&model, &vocab, &seqs, &cfg, &mut oracle, &HashSet::new()).unwrap();
        assert_eq!(gens.len(), 3);
        assert!(gens.iter().all(|g| g.len() == 4));
        assert_eq!(r.rows.len(), 12);
        assert!(r.to_csv().unwrap().starts_with("seed,primer,realized,unique,novel,text\n"));
    }

    #[test]
    fn regression_of_perfect_oracle() {
        let r = regression_metrics(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
        assert_eq!(r.rmse, Some(0.0));
        assert!(r.degenerate.is_empty());
        let (model, vocab, seqs) = setup();
        let out = regression_eval(&model, &vocab, &seqs, 0).unwrap();
        assert_eq!(out.golds, vec![0.0, 0.1, 0.2]);
        assert!(out.preds.iter().all(|p| (0.0..10.0).contains(p)));
    }

    #[test]
    fn reconstruction_and_decoration_shapes() {
        let (model, vocab, seqs) = setup();
        let items: Vec<SegmentedSeq> = seqs.iter().map(|s| SegmentedSeq { seq: s.clone(), segment: (1, 3) }).collect();
        let r = reconstruction_eval(&model, &vocab, &items, 9, true).unwrap();
        // width 9 covers all 3^2 fills of a two-token segment
        assert_eq!(r.topk_accuracy, Some(1.0));
        let mut oracle = frac_a(&vocab);
        let cfg = DecorationConfig { top_k: 9, ..Default::default() };
        let d = decoration_eval(&model, &vocab, &items, &cfg, &HashSet::new(), &mut oracle).unwrap();
        let a = vocab.text_id("A").unwrap();
        let known: HashSet<Vec<usize>> = [vec![a, a]].into_iter().collect();
        let pruned = decoration_eval(&model, &vocab, &items, &cfg, &known, &mut oracle).unwrap();
        assert!(pruned.per_seed.iter().all(|p| p.candidates.len() <= 7));
        // every seed has a two-token fill with more A's unless already AA
        for (dec, it) in d.per_seed.iter().zip(&items) {
            assert_eq!(dec.candidates.len(), 8);
            let seg = &it.seq.text_ids()[1..3];
            assert_eq!(dec.success, seg != [vocab.text_id("A").unwrap(); 2]);
        }
        assert!(segment_plan(&seqs[0], (3, 9)).is_err());
    }

    #[test]
    fn pool_of_one_is_one_generation() {
        let (model, vocab, seqs) = setup();
        let cfg = ConstrainedOptConfig { pool_size: 1, delta: 0.0, primer: Primer::new("y", 0.9), ..Default::default() };
        let plan = pool_plans(&cfg, seqs[0].text_len()).unwrap().remove(0);
        let single = generate_conditional(&model, &vocab, &seqs[0], &[cfg.primer.clone()], &plan, 1).unwrap();
        let mut oracle = frac_a(&vocab);
        let mut sim = tanimoto_similarity(&vocab);
        let r = constrained_optimization(&model, &vocab, &seqs[0], &cfg, &mut oracle, &mut sim).unwrap();
        let expected = frac_a(&vocab)(std::slice::from_ref(single.best())).unwrap()[0];
        let seed_value = frac_a(&vocab)(std::slice::from_ref(&seqs[0])).unwrap()[0];
        assert_eq!(r.best_value, expected.max(seed_value));
        assert!(r.feasible <= 2);
        // an impossible similarity bound leaves only the seed
        let strict = ConstrainedOptConfig { delta: 1.1, ..cfg };
        let r = constrained_optimization(&model, &vocab, &seqs[0], &strict, &mut oracle, &mut sim).unwrap();
        assert_eq!((r.feasible, r.improvement()), (1, 0.0));
    }
}
