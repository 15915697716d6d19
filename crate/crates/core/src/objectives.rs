//! Training objectives over factorization orders, the alternation schedule
//! and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    build_attention_masks, sample_cgen_order, sample_mask_plan, sample_plm_order, sample_property_order,
    FactorizationOrder, MaskPlan,
};
use crate::model::{nll_loss_grad, Adam, AdamConfig, ForwardCache, Model, ModelInput, ModelParameters, Scalar};
use crate::tokenizer::{TokenizedSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Plm,
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Plm,
    Property,
    Cgen,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Plm => "plm",
            Phase::Property => "property",
            Phase::Cgen => "cgen",
        }
    }
}

/// `floor(step / period)` even: property, odd: conditional generation.
pub fn alternation(step: u64, period: u64) -> Phase {
    if (step / period.max(1)) % 2 == 0 {
        Phase::Property
    } else {
        Phase::Cgen
    }
}

/// How the self-consistency term reaches the generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScGradient {
    /// Generated tokens are constants; only the property pass is trained.
    Constant,
    /// The property loss also flows back into the generation logits through
    /// a straight-through softmax over text tokens.
    #[default]
    StraightThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: ObjectiveMode,
    /// Weight of the self-consistency term on generation steps.
    pub alpha: f64,
    pub sc_gradient: ScGradient,
    pub alternation_period: u64,
    /// Plain permutation steps before alternation starts.
    pub plm_warmup: u64,
    pub mask_fraction: f64,
    pub max_span: usize,
    pub batch_size: usize,
    pub steps: u64,
    /// Validation cadence in steps; 0 disables.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Alternating,
            alpha: 1.0,
            sc_gradient: ScGradient::default(),
            alternation_period: 50,
            plm_warmup: 0,
            mask_fraction: 0.4,
            max_span: 7,
            batch_size: 16,
            steps: 1000,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.alternation_period == 0 {
            return bad("alternation_period must be >= 1");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return bad("mask_fraction must be in (0, 1]");
        }
        if self.max_span == 0 || self.batch_size == 0 {
            return bad("max_span and batch_size must be >= 1");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn phase(&self, step: u64) -> Phase {
        match self.mode {
            ObjectiveMode::Plm => Phase::Plm,
            ObjectiveMode::Alternating if step < self.plm_warmup => Phase::Plm,
            ObjectiveMode::Alternating => alternation(step - self.plm_warmup, self.alternation_period),
        }
    }
}

/// Loss of one objective evaluation, with gradients when requested.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub loss: f64,
    pub grads: Option<ModelParameters<T>>,
    /// Logits at the targets, stacked per example in target order.
    pub logits: Vec<T>,
    pub targets: Vec<Vec<usize>>,
}

/// Model inputs for given orders; targets in ascending position order.
pub fn inputs_for(batch: &[TokenizedSequence], orders: &[FactorizationOrder]) -> Vec<ModelInput> {
    batch
        .iter()
        .zip(orders)
        .map(|(seq, order)| {
            let mut targets = order.targets().to_vec();
            targets.sort_unstable();
            ModelInput { ids: seq.ids.clone(), masks: build_attention_masks(order), targets }
        })
        .collect()
}

struct OrderPass<T> {
    cache: ForwardCache<T>,
    loss: f64,
    dlogits: Vec<T>,
    targets: Vec<Vec<usize>>,
}

fn order_pass<T: Scalar>(
    model: &Model<T>,
    batch: &[TokenizedSequence],
    orders: &[FactorizationOrder],
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<OrderPass<T>> {
    let inputs = inputs_for(batch, orders);
    let gold: Vec<usize> = inputs.iter().flat_map(|i| i.targets.iter().map(|&t| i.ids[t])).collect();
    let cache = model.forward_train(&inputs, rng)?;
    let (loss, dlogits) = nll_loss_grad(&cache.logits, model.config.vocab_size, &gold);
    if !loss.is_finite() {
        return Err(Error::NumericFailure(format!("loss is {loss}")));
    }
    Ok(OrderPass { cache, loss, dlogits, targets: inputs.into_iter().map(|i| i.targets).collect() })
}

/// Mean negative log-likelihood of the true tokens at the targets of
/// `orders`.
pub fn order_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[TokenizedSequence],
    orders: &[FactorizationOrder],
    with_grad: bool,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<StepResult<T>> {
    let pass = order_pass(model, batch, orders, rng)?;
    let grads = with_grad.then(|| model.backward(&pass.cache, &pass.dlogits));
    Ok(StepResult { loss: pass.loss, grads, logits: pass.cache.logits, targets: pass.targets })
}

/// Objective settings shared by the step functions.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub mask_fraction: f64,
    pub max_span: usize,
    pub alpha: f64,
    pub sc_gradient: ScGradient,
    pub with_grad: bool,
}

impl From<&TrainerConfig> for StepConfig {
    fn from(c: &TrainerConfig) -> Self {
        Self {
            mask_fraction: c.mask_fraction,
            max_span: c.max_span,
            alpha: c.alpha,
            sc_gradient: c.sc_gradient,
            with_grad: true,
        }
    }
}

pub fn plm_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    batch: &[TokenizedSequence],
    cfg: StepConfig,
    rng: &mut R,
) -> Result<StepResult<T>> {
    let orders = batch
        .iter()
        .map(|s| sample_plm_order(s.len(), cfg.mask_fraction, rng))
        .collect::<Result<Vec<_>>>()?;
    order_loss(model, batch, &orders, cfg.with_grad, Some(rng))
}

pub fn property_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    batch: &[TokenizedSequence],
    cfg: StepConfig,
    rng: &mut R,
) -> Result<StepResult<T>> {
    let orders = batch.iter().map(|s| sample_property_order(s, rng)).collect::<Result<Vec<_>>>()?;
    order_loss(model, batch, &orders, cfg.with_grad, Some(rng))
}

fn cgen_orders<R: Rng>(batch: &[TokenizedSequence], cfg: StepConfig, rng: &mut R) -> Result<Vec<(MaskPlan, FactorizationOrder)>> {
    batch
        .iter()
        .map(|s| {
            let plan = sample_mask_plan(s.text_len(), cfg.mask_fraction, cfg.max_span, rng);
            let order = sample_cgen_order(s, &plan, rng)?;
            Ok((plan, order))
        })
        .collect()
}

pub fn cgen_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    batch: &[TokenizedSequence],
    cfg: StepConfig,
    rng: &mut R,
) -> Result<StepResult<T>> {
    let orders: Vec<_> = cgen_orders(batch, cfg, rng)?.into_iter().map(|(_, o)| o).collect();
    order_loss(model, batch, &orders, cfg.with_grad, Some(rng))
}

/// `x_hat`: `seq` with every masked text position replaced by `fill`
/// (given in ascending position order).
pub fn recombine(seq: &TokenizedSequence, plan: &MaskPlan, fill: &[usize]) -> Result<TokenizedSequence> {
    if plan.mask.len() != seq.text_len() || plan.masked_count() != fill.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fill tokens for {} masked of {} text positions",
            fill.len(),
            plan.masked_count(),
            seq.text_len()
        )));
    }
    let mut out = seq.clone();
    for (i, &id) in plan.masked_positions().zip(fill) {
        out.ids[seq.prop_len + i] = id;
    }
    Ok(out)
}

/// Highest-scoring id among `candidates` per logit row; ties go to the
/// lowest id.
pub fn argmax_among<T: Scalar>(logits: &[T], vocab: usize, candidates: &[usize]) -> Vec<usize> {
    logits
        .chunks_exact(vocab)
        .map(|row| {
            let mut best = candidates[0];
            for &c in candidates {
                if row[c] > row[best] || (row[c] == row[best] && c < best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Conditional generation loss plus `alpha` times the property loss on the
/// sequence completed with the model's own argmax text predictions (each
/// predicted from the true tokens before it in the order).
pub fn sc_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    vocab: &Vocabulary,
    batch: &[TokenizedSequence],
    cfg: StepConfig,
    rng: &mut R,
) -> Result<StepResult<T>> {
    let planned = cgen_orders(batch, cfg, rng)?;
    let orders: Vec<_> = planned.iter().map(|(_, o)| o.clone()).collect();
    if cfg.alpha == 0.0 {
        return order_loss(model, batch, &orders, cfg.with_grad, Some(rng));
    }
    let mut gen = order_pass(model, batch, &orders, Some(rng))?;
    let v = model.config.vocab_size;
    let text = vocab.text_ids();
    let fills = argmax_among(&gen.cache.logits, v, text);
    let mut recombined = Vec::with_capacity(batch.len());
    let mut at = 0;
    for (seq, ((plan, _), targets)) in batch.iter().zip(planned.iter().zip(&gen.targets)) {
        recombined.push(recombine(seq, plan, &fills[at..at + targets.len()])?);
        at += targets.len();
    }
    let prop_orders = recombined.iter().map(|s| sample_property_order(s, rng)).collect::<Result<Vec<_>>>()?;
    let prop = order_pass(model, &recombined, &prop_orders, Some(rng))?;
    let loss = gen.loss + cfg.alpha * prop.loss;
    let alpha = T::from(cfg.alpha).unwrap();
    let grads = if !cfg.with_grad {
        None
    } else {
        let (pg, dinputs) = model.backward_inputs(&prop.cache, &prop.dlogits);
        if cfg.sc_gradient == ScGradient::StraightThrough {
            straight_through(model, text, &gen.targets, &dinputs, alpha, &gen.cache.logits, &mut gen.dlogits);
        }
        let mut g = model.backward(&gen.cache, &gen.dlogits);
        g.add_scaled(&pg, alpha);
        Some(g)
    };
    Ok(StepResult { loss, grads, logits: gen.cache.logits, targets: gen.targets })
}

/// Adds to `dlogits` the gradient the property loss sends to each generated
/// token, treating the token's embedding as the softmax-weighted mix of
/// text embeddings.
fn straight_through<T: Scalar>(
    model: &Model<T>,
    text: &[usize],
    targets: &[Vec<usize>],
    dinputs: &[Vec<T>],
    alpha: T,
    logits: &[T],
    dlogits: &mut [T],
) {
    let (v, d, d_e) = (model.config.vocab_size, model.config.width(), model.config.d_e);
    let emb = &model.params.tok_emb;
    let mut row = 0;
    for (tg, din) in targets.iter().zip(dinputs) {
        for &pos in tg {
            let g = &din[pos * d..pos * d + d_e];
            let lrow = &logits[row * v..(row + 1) * v];
            let max = text.iter().map(|&c| lrow[c]).fold(T::neg_infinity(), T::max);
            let p: Vec<T> = text.iter().map(|&c| (lrow[c] - max).exp()).collect();
            let z: T = p.iter().copied().sum();
            let s: Vec<T> = text.iter().map(|&c| g.iter().zip(&emb[c * d_e..(c + 1) * d_e]).map(|(&a, &b)| a * b).sum()).collect();
            let mean: T = p.iter().zip(&s).map(|(&pi, &si)| pi / z * si).sum();
            for ((&c, &pi), &si) in text.iter().zip(&p).zip(&s) {
                dlogits[row * v + c] += alpha * pi / z * (si - mean);
            }
            row += 1;
        }
    }
}

/// Runs the objective scheduled for `step`.
pub fn objective_step<T: Scalar, R: Rng>(
    model: &Model<T>,
    vocab: &Vocabulary,
    batch: &[TokenizedSequence],
    phase: Phase,
    cfg: StepConfig,
    rng: &mut R,
) -> Result<StepResult<T>> {
    match phase {
        Phase::Plm => plm_step(model, batch, cfg, rng),
        Phase::Property => property_step(model, batch, cfg, rng),
        Phase::Cgen => sc_step(model, vocab, batch, cfg, rng),
    }
}

/// Model, optimizer and step counter: everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, optimizer: AdamConfig) -> Self {
        let optimizer = Adam::new(optimizer, &model.config);
        Self { model, optimizer, step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub objective: Phase,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Random stream for one step, independent of how many steps ran before.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One optimizer update on a batch drawn with replacement.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    vocab: &Vocabulary,
    data: &[TokenizedSequence],
    cfg: &TrainerConfig,
) -> Result<StepRecord> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let step = state.step;
    let mut rng = step_rng(cfg.seed, step);
    let batch: Vec<TokenizedSequence> =
        (0..cfg.batch_size).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
    let phase = cfg.phase(step);
    let out = objective_step(&state.model, vocab, &batch, phase, StepConfig::from(cfg), &mut rng)?;
    let mut grads = out.grads.expect("gradients requested");
    let grad_norm = state.optimizer.update(&mut state.model.params, &mut grads);
    if !grad_norm.is_finite() || !state.model.params.all_finite() {
        return Err(Error::NumericFailure(format!("non-finite update at step {step}")));
    }
    state.step += 1;
    Ok(StepRecord { step, objective: phase, loss: out.loss, grad_norm })
}

/// Trains until `cfg.steps` total steps. `observer` sees every record and
/// may stop the run early by returning `false`.
pub fn train<T, F>(
    state: &mut TrainState<T>,
    vocab: &Vocabulary,
    data: &[TokenizedSequence],
    cfg: &TrainerConfig,
    mut observer: F,
) -> Result<Vec<StepRecord>>
where
    T: Scalar,
    F: FnMut(&StepRecord, &TrainState<T>) -> Result<bool>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let rec = train_step(state, vocab, data, cfg)?;
        let go_on = observer(&rec, state)?;
        log.push(rec);
        if !go_on {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;
    use crate::model::ModelConfig;
    use crate::tokenizer::{encode_sequence, PropertySchema, Schema};
    use std::collections::BTreeMap;

    fn setup() -> (Vocabulary, Model<f64>, Vec<TokenizedSequence>) {
        let vocab = Vocabulary::new(Schema::new(vec![PropertySchema::new("y", 1, 2)]), ["A", "B", "C"]).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            d_e: 8,
            d_ff: 16,
            n_heads: 2,
            max_len: 32,
            encoding: EncodingConfig { ne_dim: 4, ..Default::default() },
            ..Default::default()
        };
        let model = Model::new(cfg, &vocab, 3).unwrap();
        let seqs = [("ABCAB", 0.4), ("CCAB", 0.25), ("AAAAAC", 0.83)]
            .iter()
            .map(|(t, y)| {
                let text: Vec<String> = t.chars().map(|c| c.to_string()).collect();
                encode_sequence(&BTreeMap::from([("y".to_string(), *y)]), &text, &vocab).unwrap()
            })
            .collect();
        (vocab, model, seqs)
    }

    fn step_cfg(alpha: f64) -> StepConfig {
        StepConfig { mask_fraction: 0.4, max_span: 2, alpha, sc_gradient: ScGradient::Constant, with_grad: true }
    }

    #[test]
    fn alternation_schedule() {
        for s in 0..50 {
            assert_eq!(alternation(s, 50), Phase::Property);
            assert_eq!(alternation(s + 50, 50), Phase::Cgen);
        }
        assert_eq!(alternation(100, 50), Phase::Property);
        assert_eq!(alternation(1, 1), Phase::Cgen);
        assert_eq!(alternation(2, 1), Phase::Property);
        let cfg = TrainerConfig { plm_warmup: 10, ..Default::default() };
        assert_eq!(cfg.phase(9), Phase::Plm);
        assert_eq!(cfg.phase(10), Phase::Property);
        assert_eq!(cfg.phase(60), Phase::Cgen);
    }

    #[test]
    fn sc_without_alpha_is_cgen() {
        let (vocab, model, seqs) = setup();
        let a = cgen_step(&model, &seqs, step_cfg(0.0), &mut step_rng(5, 0)).unwrap();
        let b = sc_step(&model, &vocab, &seqs, step_cfg(0.0), &mut step_rng(5, 0)).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
        let c = sc_step(&model, &vocab, &seqs, step_cfg(1.0), &mut step_rng(5, 0)).unwrap();
        assert!(c.loss >= a.loss);
    }

    #[test]
    fn straight_through_shifts_mass_toward_helpful_tokens() {
        let (vocab, model, _) = setup();
        let (v, d, d_e) = (model.config.vocab_size, model.config.width(), model.config.d_e);
        let text = vocab.text_ids();
        // a loss gradient pointing along the embedding of the first text token
        let dir = model.params.tok_emb[text[0] * d_e..(text[0] + 1) * d_e].to_vec();
        let mut din = vec![0.0; 3 * d];
        din[2 * d..2 * d + d_e].copy_from_slice(&dir);
        let logits = vec![0.1; v];
        let mut dl = vec![0.0; v];
        straight_through(&model, text, &[vec![2]], &[din], 1.0, &logits, &mut dl);
        let total: f64 = text.iter().map(|&c| dl[c]).sum();
        assert!(total.abs() < 1e-12);
        assert!((0..v).filter(|c| !text.contains(c)).all(|c| dl[c] == 0.0));
        // descent lowers the logit of the token whose embedding raises the loss
        let s = |c: usize| -> f64 { dir.iter().zip(&model.params.tok_emb[c * d_e..(c + 1) * d_e]).map(|(a, b)| a * b).sum() };
        let worst = *text.iter().max_by(|&&a, &&b| s(a).total_cmp(&s(b))).unwrap();
        assert!(dl[worst] > 0.0);
    }

    #[test]
    fn sc_gradient_modes_share_loss() {
        let (vocab, model, seqs) = setup();
        let constant = sc_step(&model, &vocab, &seqs, step_cfg(1.0), &mut step_rng(2, 0)).unwrap();
        let st_cfg = StepConfig { sc_gradient: ScGradient::StraightThrough, ..step_cfg(1.0) };
        let st = sc_step(&model, &vocab, &seqs, st_cfg, &mut step_rng(2, 0)).unwrap();
        assert_eq!(constant.loss.to_bits(), st.loss.to_bits());
        assert_ne!(constant.grads, st.grads);
    }

    #[test]
    fn target_sets() {
        let (_, model, seqs) = setup();
        let mut rng = step_rng(1, 1);
        for _ in 0..50 {
            let p = property_step(&model, &seqs, StepConfig { with_grad: false, ..step_cfg(0.0) }, &mut rng).unwrap();
            let g = cgen_step(&model, &seqs, StepConfig { with_grad: false, ..step_cfg(0.0) }, &mut rng).unwrap();
            for ((seq, pt), gt) in seqs.iter().zip(&p.targets).zip(&g.targets) {
                assert_eq!(pt, &seq.numeral_positions());
                assert!(gt.iter().all(|&t| t >= seq.prop_len));
                assert!(pt.iter().all(|t| !gt.contains(t)));
            }
        }
    }

    #[test]
    fn property_step_needs_blocks() {
        let (vocab, model, seqs) = setup();
        let bare = vec![seqs[0].text_only()];
        let _ = vocab;
        assert!(matches!(
            property_step(&model, &bare, step_cfg(0.0), &mut step_rng(0, 0)),
            Err(Error::NoPropertyBlock)
        ));
    }

    #[test]
    fn step_matches_manual_pipeline() {
        let (_, model, seqs) = setup();
        let got = plm_step(&model, &seqs, step_cfg(0.0), &mut step_rng(2, 3)).unwrap();
        let mut rng = step_rng(2, 3);
        let orders: Vec<_> = seqs.iter().map(|s| sample_plm_order(s.len(), 0.4, &mut rng).unwrap()).collect();
        let inputs = inputs_for(&seqs, &orders);
        let gold: Vec<usize> = inputs.iter().flat_map(|i| i.targets.iter().map(|&t| i.ids[t])).collect();
        let logits = model.forward(&inputs).unwrap();
        let manual = crate::model::nll_loss(&logits, model.config.vocab_size, &gold);
        assert_eq!(got.loss, manual);
    }

    #[test]
    fn recombination() {
        let vocab = Vocabulary::new(Schema::default(), ["A", "B", "C", "D"]).unwrap();
        let ids = |s: &str| s.chars().map(|c| vocab.text_id(&c.to_string()).unwrap()).collect::<Vec<_>>();
        let seq = crate::tokenizer::encode_ids(&[], &ids("ABC"), &vocab).unwrap();
        let plan = MaskPlan::from_mask(vec![false, true, false]);
        let out = recombine(&seq, &plan, &ids("D")).unwrap();
        assert_eq!(out.ids, ids("ADC"));
        let none = MaskPlan::from_mask(vec![false; 3]);
        assert_eq!(recombine(&seq, &none, &[]).unwrap(), seq);
    }

    #[test]
    fn overfits_tiny_set() {
        let (vocab, model, seqs) = setup();
        let cfg = TrainerConfig {
            steps: 400,
            batch_size: 3,
            alternation_period: 5,
            optimizer: AdamConfig { lr: 1e-2, ..Default::default() },
            ..Default::default()
        };
        let mut state = TrainState::new(model, cfg.optimizer);
        let data = &seqs[..2];
        let log = train(&mut state, &vocab, data, &cfg, |_, _| Ok(true)).unwrap();
        assert_eq!(log.len(), 400);
        let model = &state.model;
        let p = property_step(model, data, StepConfig { with_grad: false, ..step_cfg(0.0) }, &mut step_rng(0, 0));
        assert!(p.unwrap().loss < 0.05);
    }

    #[test]
    fn resume_reproduces_run() {
        let (vocab, model, seqs) = setup();
        let cfg = TrainerConfig { steps: 20, batch_size: 2, alternation_period: 3, ..Default::default() };
        let mut full = TrainState::new(model.clone(), cfg.optimizer);
        let log_full = train(&mut full, &vocab, &seqs, &cfg, |_, _| Ok(true)).unwrap();

        let mut part = TrainState::new(model, cfg.optimizer);
        train(&mut part, &vocab, &seqs, &TrainerConfig { steps: 8, ..cfg.clone() }, |_, _| Ok(true)).unwrap();
        let resumed = part.clone();
        let mut rest = resumed;
        let log_rest = train(&mut rest, &vocab, &seqs, &cfg, |_, _| Ok(true)).unwrap();
        assert_eq!(&log_full[8..], &log_rest[..]);
        assert_eq!(full.model.params, rest.model.params);
        assert!(matches!(train(&mut full.clone(), &vocab, &[], &cfg, |_, _| Ok(true)), Err(Error::EmptyDataset)));
    }
}
