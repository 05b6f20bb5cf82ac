//! Two-stage optimization: the generalized audio-to-expression network with
//! per-sequence mappings, then per-target renderer training, plus the linear
//! adaptation of a trained network to a new target.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::a2e::{combine, slot_frame, window_values, ExpressionNet, PerFrameTrace, FILTER_TAPS};
use crate::audio_features::AudioFeatureWindow;
use crate::checkpoint::{Checkpoint, Descriptor, Stage};
use crate::error::{Error, Result};
use crate::face_model::{
    fit_person_mapping, ExpressionCoefficients, FaceBasis, MappingFit, PersonMapping,
    ShapeCoefficients, CODE_DIM, EXPR_DIM,
};
use crate::losses::{
    expression_loss_with_grad, ExpressionLossEval, FrameTriplet, GradientPyramid, NoPerceptual,
    PerceptualLoss, VertexWeights, DEFAULT_TEMPORAL_WEIGHT,
};
use crate::nn::{join_name, Adam, AdamSettings, AdamState, FeatureMap, Params};
use crate::real::Real;
use crate::renderer::{erode_background, CameraPose, DeferredRenderer, RendererConfig, UVMap};
use crate::seed::stream_rng;

const SHUFFLE_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// The learning rate falls linearly to zero over this many final epochs.
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temporal_weight: f64,
    pub adam: AdamSettings,
    /// Trailing fraction of every sequence held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 50,
            decay_epochs: 30,
            batch_size: 16,
            seed: 0,
            temporal_weight: DEFAULT_TEMPORAL_WEIGHT,
            adam: AdamSettings::default(),
            validation_fraction: 0.1,
        }
    }
}

impl TrainingConfig {
    pub fn renderer_default() -> Self {
        Self {
            batch_size: 1,
            validation_fraction: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.decay_epochs > self.epochs {
            return Err(Error::invalid(format!(
                "decay_epochs ({}) exceeds epochs ({})",
                self.decay_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.temporal_weight.is_finite() && self.temporal_weight >= 0.0) {
            return Err(Error::invalid("temporal_weight must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::invalid("invalid Adam settings"));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`: constant, then a linear ramp
    /// over the last `decay_epochs` that would reach zero one epoch after the
    /// end, so every epoch trains with a positive rate.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let flat = self.epochs - self.decay_epochs;
        if epoch <= flat || self.decay_epochs == 0 {
            self.learning_rate
        } else {
            let left = (self.epochs + 1).saturating_sub(epoch) as f64;
            self.learning_rate * left / (self.decay_epochs + 1) as f64
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(seed, SHUFFLE_STREAM, epoch as u64, 0)
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Stage 1

/// One tracked sequence: audio windows paired with visually tracked expressions.
#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub person: u64,
    pub windows: Vec<AudioFeatureWindow>,
    pub expressions: Vec<ExpressionCoefficients>,
    pub shape: ShapeCoefficients,
}

/// Stage-1 corpus; every sequence shares one face basis.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub basis: FaceBasis,
    pub sequences: Vec<TrainingSequence>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::invalid("training needs at least one sequence"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.windows.len() != s.expressions.len() {
                return Err(Error::invalid(format!(
                    "sequence {i}: {} windows but {} expression frames",
                    s.windows.len(),
                    s.expressions.len()
                )));
            }
            if s.windows.len() < 3 {
                return Err(Error::invalid(format!(
                    "sequence {i} has fewer than 3 frames"
                )));
            }
            if s.shape.0.len() != self.basis.shape_dim() {
                return Err(Error::invalid(format!(
                    "sequence {i}: shape coefficient count mismatch"
                )));
            }
        }
        Ok(())
    }
}

/// A person-specific mapping as a trainable `EXPR_DIM x CODE_DIM` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingTensor<T>(pub Vec<T>);

impl<T: Real> MappingTensor<T> {
    pub fn zeros() -> Self {
        Self(vec![T::zero(); EXPR_DIM * CODE_DIM])
    }

    pub fn to_mapping(&self) -> Result<PersonMapping> {
        PersonMapping::new(self.0.iter().map(|&v| to_f64(v)).collect())
    }
}

impl<T: Real> Params<T> for MappingTensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        f(prefix, &[EXPR_DIM, CODE_DIM], &self.0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(prefix, &[EXPR_DIM, CODE_DIM], &mut self.0);
    }
}

/// Shared network plus one mapping per training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct A2eModel<T> {
    pub net: ExpressionNet<T>,
    pub mappings: Vec<MappingTensor<T>>,
}

impl<T: Real> A2eModel<T> {
    /// Xavier network, zero mappings.
    pub fn init(sequences: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            net: ExpressionNet::xavier(&mut rng),
            mappings: (0..sequences).map(|_| MappingTensor::zeros()).collect(),
        }
    }

    pub fn zeros(sequences: usize) -> Self {
        Self {
            net: ExpressionNet::zeros(),
            mappings: (0..sequences).map(|_| MappingTensor::zeros()).collect(),
        }
    }
}

impl<T: Real> Params<T> for A2eModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        self.net.visit(&join_name(prefix, "net"), f);
        for (i, m) in self.mappings.iter().enumerate() {
            m.visit(&join_name(prefix, &format!("mapping{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.net.visit_mut(&join_name(prefix, "net"), f);
        for (i, m) in self.mappings.iter_mut().enumerate() {
            m.visit_mut(&join_name(prefix, &format!("mapping{i}")), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Frames `[start, end)` of one sequence; filter slots clamp to this range so
/// the two splits never read each other's windows.
#[derive(Debug, Clone, Copy)]
struct Part {
    seq: usize,
    start: usize,
    end: usize,
}

/// Triplet centred at absolute frame `t` of a part.
#[derive(Debug, Clone, Copy)]
struct TripletRef {
    part: Part,
    t: usize,
}

/// Dataset converted to the network scalar, with reference offsets precomputed.
pub struct PreparedDataset<T> {
    /// `3V x EXPR_DIM`, row-major.
    expression_basis: Vec<T>,
    weights: Vec<T>,
    windows: Vec<Vec<Vec<T>>>,
    /// Reference offsets `E delta*` per sequence and frame.
    targets: Vec<Vec<Vec<T>>>,
    train: Vec<TripletRef>,
    validation: Vec<TripletRef>,
}

fn triplets(part: Part) -> impl Iterator<Item = TripletRef> {
    (part.start + 1..part.end.saturating_sub(1)).map(move |t| TripletRef { part, t })
}

impl<T: Real> PreparedDataset<T> {
    pub fn new(data: &SequenceDataset, validation_fraction: f64) -> Result<Self> {
        data.validate()?;
        let basis = &data.basis;
        let weights = VertexWeights::from_mouth_mask(basis.mouth_mask())?.cast::<T>();
        let expression_basis: Vec<T> = basis
            .expression_basis()
            .iter()
            .map(|&v| T::lit(v))
            .collect();
        let mut out = Self {
            expression_basis,
            weights,
            windows: Vec::new(),
            targets: Vec::new(),
            train: Vec::new(),
            validation: Vec::new(),
        };
        for (seq, s) in data.sequences.iter().enumerate() {
            let n = s.windows.len();
            let mut held = (n as f64 * validation_fraction).round() as usize;
            if n - held < 3 {
                held = 0;
            }
            let split = n - held;
            triplets(Part {
                seq,
                start: 0,
                end: split,
            })
            .for_each(|r| out.train.push(r));
            if held >= 3 {
                triplets(Part {
                    seq,
                    start: split,
                    end: n,
                })
                .for_each(|r| out.validation.push(r));
            }
            out.windows
                .push(s.windows.iter().map(window_values::<T>).collect());
            out.targets.push(
                s.expressions
                    .iter()
                    .map(|d| {
                        Ok(basis
                            .expression_offsets(&d.0)?
                            .into_iter()
                            .map(T::lit)
                            .collect())
                    })
                    .collect::<Result<_>>()?,
            );
        }
        Ok(out)
    }

    pub fn sequence_count(&self) -> usize {
        self.windows.len()
    }

    pub fn triplet_count(&self, split: Split) -> usize {
        self.refs(split).len()
    }

    fn refs(&self, split: Split) -> &[TripletRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    /// `E x` for a coefficient vector `x`.
    fn offsets(&self, x: &[T]) -> Vec<T> {
        self.expression_basis
            .chunks_exact(EXPR_DIM)
            .map(|row| row.iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `E^T g`.
    fn offsets_transpose(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); EXPR_DIM];
        for (row, &gi) in self.expression_basis.chunks_exact(EXPR_DIM).zip(g) {
            for (o, &e) in out.iter_mut().zip(row) {
                *o += e * gi;
            }
        }
        out
    }

    /// Expression loss of one triplet; adds its gradient into `grads` when given.
    fn triplet(
        &self,
        model: &A2eModel<T>,
        r: TripletRef,
        lambda: T,
        grads: Option<&mut A2eModel<T>>,
    ) -> Result<ExpressionLossEval<T>> {
        let Part { seq, start, end } = r.part;
        let len = end - start;
        let windows = &self.windows[seq];
        let mapping = &model.mappings[seq].0;
        let frames = [r.t - 1, r.t, r.t + 1];
        let slot_ids = |f: usize| -> [usize; FILTER_TAPS] {
            std::array::from_fn(|s| start + slot_frame(f - start, s, len))
        };

        let mut traces: BTreeMap<usize, PerFrameTrace<T>> = BTreeMap::new();
        for &f in &frames {
            for id in slot_ids(f) {
                if let std::collections::btree_map::Entry::Vacant(e) = traces.entry(id) {
                    e.insert(model.net.per_frame.forward_trace(&windows[id])?);
                }
            }
        }

        let mut filter_traces = Vec::with_capacity(3);
        let mut slots = Vec::with_capacity(3);
        let mut codes = Vec::with_capacity(3);
        let mut predicted: [Vec<T>; 3] = Default::default();
        for (k, &f) in frames.iter().enumerate() {
            let ids = slot_ids(f);
            let window: Vec<Vec<T>> = ids.iter().map(|id| traces[id].code.clone()).collect();
            let ft = model.net.filter.forward_trace(&window)?;
            let z = combine(&window, &ft.weights);
            let delta: Vec<T> = mapping
                .chunks_exact(CODE_DIM)
                .map(|row| row.iter().zip(&z).map(|(&a, &b)| a * b).sum())
                .collect();
            predicted[k] = self.offsets(&delta);
            filter_traces.push(ft);
            slots.push((ids, window));
            codes.push(z);
        }
        let triplet = FrameTriplet {
            predicted,
            reference: std::array::from_fn(|k| self.targets[seq][frames[k]].clone()),
        };
        let eval = expression_loss_with_grad(&triplet, &self.weights, lambda)?;

        if let Some(g) = grads {
            let mut code_grads: BTreeMap<usize, Vec<T>> = BTreeMap::new();
            for k in 0..3 {
                let g_delta = self.offsets_transpose(&eval.grad[k]);
                let z = &codes[k];
                let mut g_z = vec![T::zero(); CODE_DIM];
                let g_map = &mut g.mappings[seq].0;
                for (i, &gd) in g_delta.iter().enumerate() {
                    let row = i * CODE_DIM;
                    for j in 0..CODE_DIM {
                        g_map[row + j] += gd * z[j];
                        g_z[j] += mapping[row + j] * gd;
                    }
                }
                let (ids, window) = &slots[k];
                let ft = &filter_traces[k];
                let g_w: Vec<T> = window
                    .iter()
                    .map(|c| c.iter().zip(&g_z).map(|(&a, &b)| a * b).sum())
                    .collect();
                let g_from_filter = model.net.filter.backward(ft, &g_w, &mut g.net.filter)?;
                for (j, id) in ids.iter().enumerate() {
                    let acc = code_grads
                        .entry(*id)
                        .or_insert_with(|| vec![T::zero(); CODE_DIM]);
                    let w = ft.weights[j];
                    for c in 0..CODE_DIM {
                        acc[c] += g_from_filter[j][c] + w * g_z[c];
                    }
                }
            }
            for (id, gc) in &code_grads {
                model
                    .net
                    .per_frame
                    .backward(&traces[id], gc, &mut g.net.per_frame)?;
            }
        }
        Ok(eval)
    }

    /// Mean expression loss over every triplet of a split; `None` if the split is empty.
    pub fn mean_loss(
        &self,
        model: &A2eModel<T>,
        split: Split,
        lambda: f64,
    ) -> Result<Option<LossSummary>> {
        let refs = self.refs(split);
        if refs.is_empty() {
            return Ok(None);
        }
        let mut sum = LossSummary::default();
        for &r in refs {
            sum.add(&self.triplet(model, r, T::lit(lambda), None)?);
        }
        Ok(Some(sum.mean(refs.len())))
    }

    /// Mean loss and gradient over a batch of training triplets.
    fn batch(
        &self,
        model: &A2eModel<T>,
        batch: &[usize],
        lambda: T,
        grads: &mut A2eModel<T>,
    ) -> Result<LossSummary> {
        grads.fill_zero();
        let mut sum = LossSummary::default();
        for &i in batch {
            sum.add(&self.triplet(model, self.train[i], lambda, Some(grads))?);
        }
        grads.scale(T::one() / T::lit(batch.len() as f64));
        Ok(sum.mean(batch.len()))
    }

    /// Mean training-batch loss as a plain function of the model, for gradient checks.
    pub fn batch_loss_and_grad(
        &self,
        model: &A2eModel<T>,
        batch: &[usize],
        lambda: f64,
    ) -> Result<(T, A2eModel<T>)> {
        let mut grads = model.zeros_like();
        let s = self.batch(model, batch, T::lit(lambda), &mut grads)?;
        Ok((T::lit(s.loss), grads))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss: f64,
    pub position: f64,
    pub temporal: f64,
}

impl LossSummary {
    fn add<T: Real>(&mut self, e: &ExpressionLossEval<T>) {
        self.loss += to_f64(e.loss);
        self.position += to_f64(e.position);
        self.temporal += to_f64(e.temporal);
    }

    fn mean(self, n: usize) -> Self {
        let n = n as f64;
        Self {
            loss: self.loss / n,
            position: self.position / n,
            temporal: self.temporal / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2eEpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Mean over the epoch's batches, measured before each update.
    pub train: LossSummary,
    pub validation: Option<LossSummary>,
}

/// True when the last recorded training loss is below the first.
pub fn loss_decreased<R>(history: &[R], loss: impl Fn(&R) -> f64) -> bool {
    match (history.first(), history.last()) {
        (Some(a), Some(b)) if history.len() > 1 => loss(b) < loss(a),
        _ => false,
    }
}

pub struct A2eTrainer {
    cfg: TrainingConfig,
    data: PreparedDataset<f32>,
    pub model: A2eModel<f32>,
    adam: Adam<f32>,
    epoch: usize,
    pub history: Vec<A2eEpochRecord>,
    /// Epoch and parameters of the lowest validation loss so far.
    pub best: Option<(usize, f64, A2eModel<f32>)>,
}

impl A2eTrainer {
    pub fn new(data: &SequenceDataset, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let prepared = PreparedDataset::new(data, cfg.validation_fraction)?;
        let model = A2eModel::init(prepared.sequence_count(), cfg.seed);
        let adam = Adam::new(cfg.adam, &model);
        Ok(Self {
            cfg: cfg.clone(),
            data: prepared,
            model,
            adam,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Restores parameters, optimizer state and the epoch counter.
    pub fn resume(data: &SequenceDataset, cfg: &TrainingConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(data, cfg)?;
        check_stage(ckpt, Stage::A2e)?;
        let expected = a2e_architecture(t.data.sequence_count());
        if ckpt.descriptor.architecture != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {} does not match {expected}",
                ckpt.descriptor.architecture
            )));
        }
        ckpt.load_params(&mut t.model, "")?;
        t.adam.state = ckpt.load_adam(&t.model)?;
        t.epoch = ckpt.descriptor.epoch;
        t.best = ckpt
            .descriptor
            .best_validation_loss
            .map(|l| (t.epoch, l, t.model.clone()));
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn prepared(&self) -> &PreparedDataset<f32> {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn run_epoch(&mut self) -> Result<A2eEpochRecord> {
        let epoch = self.epoch + 1;
        let lr = self.cfg.learning_rate_at(epoch);
        let lambda = self.cfg.temporal_weight as f32;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
        let mut grads = self.model.zeros_like();
        let mut total = LossSummary::default();
        let mut batches = 0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let s = self.data.batch(&self.model, batch, lambda, &mut grads)?;
            if !s.loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("non-finite loss or gradient (loss = {})", s.loss),
                });
            }
            self.adam.step(&mut self.model, &grads, lr);
            total.loss += s.loss;
            total.position += s.position;
            total.temporal += s.temporal;
            batches += 1;
        }
        let validation =
            self.data
                .mean_loss(&self.model, Split::Validation, self.cfg.temporal_weight)?;
        if let Some(v) = validation {
            if self.best.as_ref().is_none_or(|b| v.loss < b.1) {
                self.best = Some((epoch, v.loss, self.model.clone()));
            }
        }
        self.epoch = epoch;
        let record = A2eEpochRecord {
            epoch,
            steps: self.adam.state.step,
            learning_rate: lr,
            train: total.mean(batches.max(1)),
            validation,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn train(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        a2e_checkpoint(
            &self.model,
            Some(&self.adam.state),
            self.epoch,
            self.best.as_ref().map(|b| b.1),
        )
    }

    /// Checkpoint of the best-validation parameters, if validation ran.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best
            .as_ref()
            .map(|(epoch, loss, model)| a2e_checkpoint(model, None, *epoch, Some(*loss)))
    }
}

fn a2e_architecture(sequences: usize) -> serde_json::Value {
    serde_json::json!({ "code_dim": CODE_DIM, "expr_dim": EXPR_DIM, "sequences": sequences })
}

fn check_stage(ckpt: &Checkpoint, stage: Stage) -> Result<()> {
    if ckpt.descriptor.stage != stage {
        return Err(Error::Checkpoint(format!(
            "expected a {stage:?} checkpoint, found {:?}",
            ckpt.descriptor.stage
        )));
    }
    Ok(())
}

pub fn a2e_checkpoint(
    model: &A2eModel<f32>,
    adam: Option<&AdamState<f32>>,
    epoch: usize,
    best_validation_loss: Option<f64>,
) -> Checkpoint {
    let mut ck = Checkpoint::new(Descriptor {
        stage: Stage::A2e,
        architecture: a2e_architecture(model.mappings.len()),
        epoch,
        adam_step: adam.map_or(0, |a| a.step),
        best_validation_loss,
    });
    ck.push_params(model, "");
    if let Some(a) = adam {
        ck.push_adam(model, a);
    }
    ck
}

/// Parameters of a stage-1 checkpoint.
pub fn load_a2e_model(ckpt: &Checkpoint) -> Result<A2eModel<f32>> {
    check_stage(ckpt, Stage::A2e)?;
    let sequences = ckpt
        .descriptor
        .architecture
        .get("sequences")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("architecture lacks a sequence count".into()))?
        as usize;
    let mut model = A2eModel::zeros(sequences);
    ckpt.load_params(&mut model, "")?;
    Ok(model)
}

/// Outcome of stage-1 training.
pub struct A2eTraining {
    pub model: A2eModel<f32>,
    pub history: Vec<A2eEpochRecord>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Option<Checkpoint>,
}

pub fn train_a2e(data: &SequenceDataset, cfg: &TrainingConfig) -> Result<A2eTraining> {
    let mut t = A2eTrainer::new(data, cfg)?;
    t.train()?;
    Ok(A2eTraining {
        final_checkpoint: t.checkpoint(),
        best_checkpoint: t.best_checkpoint(),
        model: t.model,
        history: t.history,
    })
}

/// Fits a mapping from the network's filtered codes to a new person's tracked
/// expressions. Rank deficiency is reported through the returned fit and logged.
pub fn adapt_new_target<T: Real>(
    net: &ExpressionNet<T>,
    windows: &[AudioFeatureWindow],
    expressions: &[ExpressionCoefficients],
    ridge: f64,
) -> Result<MappingFit> {
    if windows.len() != expressions.len() {
        return Err(Error::invalid(format!(
            "{} windows but {} expression frames",
            windows.len(),
            expressions.len()
        )));
    }
    let inputs: Vec<Vec<T>> = windows.iter().map(window_values::<T>).collect();
    let codes: Vec<f64> = net
        .predict_sequence(&inputs)?
        .into_iter()
        .flatten()
        .map(to_f64)
        .collect();
    let deltas: Vec<f64> = expressions
        .iter()
        .flat_map(|e| e.0.iter().copied())
        .collect();
    let fit = fit_person_mapping(&codes, &deltas, ridge)?;
    if fit.rank_deficient {
        log::warn!(
            "code matrix has rank {} < {CODE_DIM} over {} frames; returning the minimum-norm mapping",
            fit.rank,
            windows.len()
        );
    }
    Ok(fit)
}

pub fn mapping_checkpoint(fit: &MappingFit, frames: usize, ridge: f64) -> Checkpoint {
    let mut ck = Checkpoint::new(Descriptor {
        stage: Stage::Mapping,
        architecture: serde_json::json!({
            "code_dim": CODE_DIM,
            "expr_dim": EXPR_DIM,
            "frames": frames,
            "ridge": ridge,
            "rank": fit.rank,
            "rank_deficient": fit.rank_deficient,
        }),
        epoch: 0,
        adam_step: 0,
        best_validation_loss: None,
    });
    ck.tensors.push(crate::checkpoint::Tensor {
        name: "mapping".into(),
        shape: vec![EXPR_DIM, CODE_DIM],
        data: fit.mapping.matrix.iter().map(|&v| v as f32).collect(),
    });
    ck
}

pub fn load_mapping(ckpt: &Checkpoint) -> Result<PersonMapping> {
    check_stage(ckpt, Stage::Mapping)?;
    let t = ckpt
        .tensor("mapping")
        .ok_or_else(|| Error::Checkpoint("missing tensor mapping".into()))?;
    if t.shape != [EXPR_DIM, CODE_DIM] {
        return Err(Error::Checkpoint(format!(
            "mapping has shape {:?}",
            t.shape
        )));
    }
    PersonMapping::new(t.data.iter().map(|&v| v as f64).collect())
}

// ---------------------------------------------------------------------------
// Stage 2

#[derive(Debug, Clone)]
pub struct TargetFrame {
    pub reference: FeatureMap<f32>,
    pub uvmap: UVMap,
    pub pose: CameraPose,
    /// Face-interior mask supervising the intermediate image.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TargetDataset {
    pub frames: Vec<TargetFrame>,
}

impl TargetDataset {
    /// `(height, width)` shared by every frame.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::invalid("target dataset has no frames"))?;
        let (h, w) = (first.reference.height, first.reference.width);
        for (i, f) in self.frames.iter().enumerate() {
            let r = &f.reference;
            if r.channels != 3 || (r.height, r.width) != (h, w) {
                return Err(Error::invalid(format!(
                    "frame {i}: reference is {}x{}x{}, expected 3x{h}x{w}",
                    r.channels, r.height, r.width
                )));
            }
            if (f.uvmap.height, f.uvmap.width) != (h, w) || f.mask.len() != h * w {
                return Err(Error::invalid(format!(
                    "frame {i}: UV map or mask resolution mismatch"
                )));
            }
        }
        Ok((h, w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PerceptualChoice {
    None,
    GradientPyramid { levels: usize },
}

impl Default for PerceptualChoice {
    fn default() -> Self {
        PerceptualChoice::GradientPyramid {
            levels: GradientPyramid::default().levels,
        }
    }
}

impl PerceptualChoice {
    pub fn build<T: Real>(self) -> Box<dyn PerceptualLoss<T>> {
        match self {
            PerceptualChoice::None => Box::new(NoPerceptual),
            PerceptualChoice::GradientPyramid { levels } => Box::new(GradientPyramid { levels }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RendererTrainingOptions {
    pub renderer: RendererConfig,
    pub erosion_radius: usize,
    pub perceptual: PerceptualChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RendererEpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub loss: f64,
    pub final_l1: f64,
    pub interior_l1: f64,
    pub perceptual: f64,
}

pub struct RendererTrainer {
    cfg: TrainingConfig,
    opts: RendererTrainingOptions,
    data: TargetDataset,
    backgrounds: Vec<FeatureMap<f32>>,
    perceptual: Box<dyn PerceptualLoss<f32>>,
    pub renderer: DeferredRenderer<f32>,
    adam: Adam<f32>,
    epoch: usize,
    pub history: Vec<RendererEpochRecord>,
}

/// Background inputs with the face region and a safety margin removed.
pub fn eroded_backgrounds(data: &TargetDataset, radius: usize) -> Result<Vec<FeatureMap<f32>>> {
    data.frames
        .iter()
        .map(|f| erode_background(&f.reference, &f.uvmap.covered, radius))
        .collect()
}

impl RendererTrainer {
    pub fn new(
        data: TargetDataset,
        cfg: &TrainingConfig,
        opts: RendererTrainingOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let renderer = DeferredRenderer::new(&opts.renderer, &mut rng)?;
        let adam = Adam::new(cfg.adam, &renderer);
        Ok(Self {
            cfg: cfg.clone(),
            opts,
            backgrounds: eroded_backgrounds(&data, opts.erosion_radius)?,
            data,
            perceptual: opts.perceptual.build(),
            renderer,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn resume(
        data: TargetDataset,
        cfg: &TrainingConfig,
        opts: RendererTrainingOptions,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(data, cfg, opts)?;
        t.renderer = load_renderer(ckpt)?;
        if t.renderer.config() != renderer_descriptor_config(&opts.renderer) {
            return Err(Error::Checkpoint(
                "checkpoint renderer architecture differs from the configuration".into(),
            ));
        }
        t.adam.state = ckpt.load_adam(&t.renderer)?;
        t.epoch = ckpt.descriptor.epoch;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn backgrounds(&self) -> &[FeatureMap<f32>] {
        &self.backgrounds
    }

    pub fn run_epoch(&mut self) -> Result<RendererEpochRecord> {
        let epoch = self.epoch + 1;
        let lr = self.cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..self.data.frames.len()).collect();
        order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
        let mut grads = self.renderer.zeros_like();
        let mut rec = RendererEpochRecord {
            epoch,
            steps: 0,
            learning_rate: lr,
            loss: 0.0,
            final_l1: 0.0,
            interior_l1: 0.0,
            perceptual: 0.0,
        };
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            grads.fill_zero();
            let mut loss = 0.0;
            for &i in batch {
                let f = &self.data.frames[i];
                let terms = self.renderer.accumulate_grad(
                    &f.uvmap,
                    &self.backgrounds[i],
                    &f.reference,
                    &f.mask,
                    self.perceptual.as_ref(),
                    &mut grads,
                )?;
                loss += terms.total as f64;
                rec.final_l1 += terms.final_l1 as f64;
                rec.interior_l1 += terms.interior_l1 as f64;
                rec.perceptual += terms.perceptual as f64;
            }
            if batch.len() > 1 {
                grads.scale(1.0 / batch.len() as f32);
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("non-finite rendering loss or gradient (loss = {loss})"),
                });
            }
            self.adam.step(&mut self.renderer, &grads, lr);
            rec.loss += loss;
        }
        let n = self.data.frames.len() as f64;
        rec.loss /= n;
        rec.final_l1 /= n;
        rec.interior_l1 /= n;
        rec.perceptual /= n;
        rec.steps = self.adam.state.step;
        self.epoch = epoch;
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn train(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Mean absolute per-channel error of the final image over all frames.
    pub fn mean_l1(&self) -> Result<f64> {
        mean_render_l1(&self.renderer, &self.data, &self.backgrounds)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        renderer_checkpoint(
            &self.renderer,
            &self.opts,
            Some(&self.adam.state),
            self.epoch,
        )
    }
}

pub fn mean_render_l1(
    renderer: &DeferredRenderer<f32>,
    data: &TargetDataset,
    backgrounds: &[FeatureMap<f32>],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (f, bg) in data.frames.iter().zip(backgrounds) {
        let out = renderer.render(&f.uvmap, bg)?;
        sum += out
            .final_image
            .data
            .iter()
            .zip(&f.reference.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>();
        count += f.reference.data.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// The renderer configuration as recorded in checkpoints; the init scale is
/// not part of the architecture.
fn renderer_descriptor_config(c: &RendererConfig) -> RendererConfig {
    RendererConfig {
        texture_init_scale: 0.0,
        ..*c
    }
}

pub fn renderer_checkpoint(
    renderer: &DeferredRenderer<f32>,
    opts: &RendererTrainingOptions,
    adam: Option<&AdamState<f32>>,
    epoch: usize,
) -> Checkpoint {
    let arch = serde_json::json!({
        "renderer": renderer.config(),
        "erosion_radius": opts.erosion_radius,
    });
    let mut ck = Checkpoint::new(Descriptor {
        stage: Stage::Renderer,
        architecture: arch,
        epoch,
        adam_step: adam.map_or(0, |a| a.step),
        best_validation_loss: None,
    });
    ck.push_params(renderer, "");
    if let Some(a) = adam {
        ck.push_adam(renderer, a);
    }
    ck
}

/// Renderer parameters and erosion radius from a stage-2 checkpoint.
pub fn load_renderer_with_radius(ckpt: &Checkpoint) -> Result<(DeferredRenderer<f32>, usize)> {
    check_stage(ckpt, Stage::Renderer)?;
    let arch = &ckpt.descriptor.architecture;
    let config: RendererConfig = arch
        .get("renderer")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("architecture lacks a renderer description".into()))
        .and_then(|v| {
            serde_json::from_value(v)
                .map_err(|e| Error::Checkpoint(format!("bad renderer description: {e}")))
        })?;
    let radius = arch
        .get("erosion_radius")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("architecture lacks an erosion radius".into()))?
        as usize;
    let mut renderer = DeferredRenderer::zeros(&config)?;
    ckpt.load_params(&mut renderer, "")?;
    Ok((renderer, radius))
}

pub fn load_renderer(ckpt: &Checkpoint) -> Result<DeferredRenderer<f32>> {
    Ok(load_renderer_with_radius(ckpt)?.0)
}

/// Outcome of stage-2 training.
pub struct RendererTraining {
    pub renderer: DeferredRenderer<f32>,
    pub history: Vec<RendererEpochRecord>,
    pub final_l1: f64,
    pub checkpoint: Checkpoint,
}

pub fn train_renderer(
    data: TargetDataset,
    cfg: &TrainingConfig,
    opts: RendererTrainingOptions,
) -> Result<RendererTraining> {
    let mut t = RendererTrainer::new(data, cfg, opts)?;
    t.train()?;
    Ok(RendererTraining {
        final_l1: t.mean_l1()?,
        checkpoint: t.checkpoint(),
        renderer: t.renderer,
        history: t.history,
    })
}
