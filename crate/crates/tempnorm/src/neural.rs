//! A from-scratch feed-forward regressor over per-sample feature vectors:
//! six hidden layers with randomized leaky rectified activations, an
//! in-network per-unit normalization layer after the third hidden layer,
//! two linear outputs predicting normalized mania/depression, a weighted
//! MSE loss, subject-wise reorder augmentation, and five-fold
//! subject-independent training with early stopping.
//!
//! Gradients treat the normalization layer's running statistics as
//! constants at each step: the backward pass scales by the recorded
//! `1/sigma` only and does not flow through the recurrence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::TempNormError;
use crate::eval::{score_predictions, EvalConfig};
use crate::norm::{combine_max, prenormalize, HalfLife, TempNorm};

/// Lower bound of the randomized negative slope.
pub const RRELU_LO: f64 = 1.0 / 8.0;
/// Upper bound of the randomized negative slope.
pub const RRELU_HI: f64 = 1.0 / 3.0;
/// Fixed evaluation slope: midpoint of the training bounds.
pub const RRELU_EVAL_SLOPE: f64 = (RRELU_LO + RRELU_HI) / 2.0;

/// Cap on the inverse-density sample weight.
pub const WEIGHT_CAP: f64 = 25.0;

/// Index of the hidden layer whose output feeds the normalization layer.
pub const TEMPNORM_AFTER_LAYER: usize = 2;

pub const HIDDEN_LAYERS: usize = 6;
pub const OUTPUT_WIDTH: usize = 2;

/// Network shape and the shared half-life of the in-network normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_width: usize,
    pub hidden_widths: [usize; HIDDEN_LAYERS],
    /// Half-life shared with the label normalization.
    pub half_life: HalfLife,
}

impl MlpConfig {
    pub fn new(input_width: usize, half_life: HalfLife) -> Self {
        MlpConfig {
            input_width,
            hidden_widths: [256; HIDDEN_LAYERS],
            half_life,
        }
    }

    pub fn with_hidden_width(mut self, width: usize) -> Self {
        self.hidden_widths = [width; HIDDEN_LAYERS];
        self
    }

    /// Width of the normalization layer (equals hidden layer 3's width).
    pub fn tempnorm_width(&self) -> usize {
        self.hidden_widths[TEMPNORM_AFTER_LAYER]
    }
}

/// One dense layer; weights stored row-major as `[output][input]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub input_width: usize,
    pub output_width: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn init(input_width: usize, output_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / input_width as f64).sqrt();
        let weights = (0..input_width * output_width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        DenseLayer {
            input_width,
            output_width,
            weights,
            biases: vec![0.0; output_width],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.biases.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.input_width..(o + 1) * self.input_width];
            *out_v += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// The full network: six hidden layers plus the linear output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub layers: Vec<DenseLayer>,
}

impl MlpModel {
    pub fn init(config: MlpConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut input = config.input_width;
        for &width in &config.hidden_widths {
            layers.push(DenseLayer::init(input, width, rng));
            input = width;
        }
        layers.push(DenseLayer::init(input, OUTPUT_WIDTH, rng));
        MlpModel { config, layers }
    }

    /// All-zero parameters; mainly for shape tests.
    pub fn zeros(config: MlpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MlpModel::init(config, &mut rng);
        for layer in &mut model.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        model
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }
}

/// How the in-network normalization layer behaves during a sequence run.
pub enum TempNormMode<'a> {
    /// Layer passes its input through (pretraining and ablation).
    Identity,
    /// Fresh per-unit streams from the population prior, advanced per sample.
    Live,
    /// Replay recorded per-sample (mean, sigma) pairs without state updates.
    /// Used by the finite-difference gradient oracle.
    Frozen(&'a [Vec<(f64, f64)>]),
}

/// Activation behavior: randomized negative slopes or the fixed midpoint.
pub enum Activation<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

fn rrelu(z: f64, activation: &mut Activation) -> (f64, f64) {
    if z >= 0.0 {
        (z, 1.0)
    } else {
        let slope = match activation {
            Activation::Eval => RRELU_EVAL_SLOPE,
            Activation::Train(rng) => rng.gen_range(RRELU_LO..RRELU_HI),
        };
        (slope * z, slope)
    }
}

/// Standalone activation, matching the in-network behavior.
pub fn rrelu_value(z: f64, activation: &mut Activation) -> f64 {
    rrelu(z, activation).0
}

/// Per-sample cache of everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SampleCache {
    /// Input to each of the 7 layers.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Activation slopes per hidden layer.
    pub slopes: Vec<Vec<f64>>,
    /// `1/sigma` per normalization unit (all ones under identity).
    pub tn_scale: Vec<f64>,
}

/// Result of running a model over one subject's ordered sample sequence.
pub struct SequenceRun {
    pub predictions: Vec<[f64; 2]>,
    pub caches: Vec<SampleCache>,
    /// Per-sample, per-unit (mean, sigma) recorded before each update.
    /// Empty under identity mode.
    pub recorded_stats: Vec<Vec<(f64, f64)>>,
}

/// Forward pass over a full ordered sequence. The normalization layer's
/// state bank advances one step per sample, so outputs depend on sample
/// order within the sequence.
pub fn run_sequence(
    model: &MlpModel,
    inputs: &[Vec<f64>],
    tempnorm: TempNormMode,
    mut activation: Activation,
) -> Result<SequenceRun, TempNormError> {
    let tn_width = model.config.tempnorm_width();
    let mut bank: Vec<TempNorm> = match tempnorm {
        TempNormMode::Live => (0..tn_width)
            .map(|_| TempNorm::new(model.config.half_life))
            .collect(),
        _ => Vec::new(),
    };
    let mut run = SequenceRun {
        predictions: Vec::with_capacity(inputs.len()),
        caches: Vec::with_capacity(inputs.len()),
        recorded_stats: Vec::new(),
    };
    for (sample_idx, x) in inputs.iter().enumerate() {
        if x.len() != model.config.input_width {
            return Err(TempNormError::ShapeMismatch(format!(
                "input width {} != configured {}",
                x.len(),
                model.config.input_width
            )));
        }
        let mut layer_inputs = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut slopes = Vec::with_capacity(HIDDEN_LAYERS);
        let mut tn_scale = vec![1.0; tn_width];
        let mut a = x.clone();
        for l in 0..HIDDEN_LAYERS {
            layer_inputs.push(a.clone());
            let z = model.layers[l].forward(&a);
            let mut h = Vec::with_capacity(z.len());
            let mut layer_slopes = Vec::with_capacity(z.len());
            for &zv in &z {
                let (hv, s) = rrelu(zv, &mut activation);
                h.push(hv);
                layer_slopes.push(s);
            }
            slopes.push(layer_slopes);
            if l == TEMPNORM_AFTER_LAYER {
                match &tempnorm {
                    TempNormMode::Identity => {}
                    TempNormMode::Live => {
                        let mut stats = Vec::with_capacity(tn_width);
                        for (u, hv) in h.iter_mut().enumerate() {
                            let state = &mut bank[u];
                            let sigma = state.var().sqrt();
                            stats.push((state.mean(), sigma));
                            let y = state.step(*hv)?;
                            tn_scale[u] = if sigma > 0.0 { 1.0 / sigma } else { 0.0 };
                            *hv = y;
                        }
                        run.recorded_stats.push(stats);
                    }
                    TempNormMode::Frozen(recorded) => {
                        let stats = recorded.get(sample_idx).ok_or_else(|| {
                            TempNormError::ShapeMismatch(
                                "frozen stats shorter than sequence".into(),
                            )
                        })?;
                        for (u, hv) in h.iter_mut().enumerate() {
                            let (mean, sigma) = stats[u];
                            if sigma > 0.0 {
                                *hv = (*hv - mean) / sigma;
                                tn_scale[u] = 1.0 / sigma;
                            } else {
                                *hv = 0.0;
                                tn_scale[u] = 0.0;
                            }
                        }
                    }
                }
            }
            a = h;
        }
        layer_inputs.push(a.clone());
        let out = model.layers[HIDDEN_LAYERS].forward(&a);
        run.predictions.push([out[0], out[1]]);
        run.caches.push(SampleCache {
            layer_inputs,
            slopes,
            tn_scale,
        });
    }
    Ok(run)
}

/// Inverse-density loss weight: `min(1/phi(target), 25)` for the standard
/// normal density `phi`.
pub fn sample_weight(target: f64) -> f64 {
    let phi = (-0.5 * target * target).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (1.0 / phi).min(WEIGHT_CAP)
}

/// Weighted MSE per output dimension, summed over the two dimensions.
/// Weights come from [`sample_weight`] of each dimension's target.
pub fn wmse(predictions: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<f64, TempNormError> {
    if predictions.is_empty() {
        return Err(TempNormError::InsufficientData("empty wmse input".into()));
    }
    if predictions.len() != targets.len() {
        return Err(TempNormError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for d in 0..2 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, t) in predictions.iter().zip(targets) {
            let w = sample_weight(t[d]);
            num += w * (p[d] - t[d]).powi(2);
            den += w;
        }
        total += num / den;
    }
    Ok(total)
}

/// Scalar weighted MSE over max-reduced prediction/target pairs.
pub fn max_reduced_wmse(
    predictions: &[[f64; 2]],
    targets: &[[f64; 2]],
) -> Result<f64, TempNormError> {
    if predictions.is_empty() {
        return Err(TempNormError::InsufficientData(
            "no samples for validation score".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        let pm = combine_max(p[0], p[1]);
        let tm = combine_max(t[0], t[1]);
        let w = sample_weight(tm);
        num += w * (pm - tm).powi(2);
        den += w;
    }
    Ok(num / den)
}

/// Parameter gradients mirroring the model's layers.
pub struct Grads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Grads {
    fn zeros(model: &MlpModel) -> Self {
        Grads {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
        }
    }
}

fn backward_sample(model: &MlpModel, cache: &SampleCache, dl_dout: [f64; 2], grads: &mut Grads) {
    let mut delta: Vec<f64> = dl_dout.to_vec();
    for l in (0..=HIDDEN_LAYERS).rev() {
        let layer = &model.layers[l];
        let input = &cache.layer_inputs[l];
        let (dw, db) = &mut grads.layers[l];
        for (o, &d) in delta.iter().enumerate() {
            db[o] += d;
            let row = &mut dw[o * layer.input_width..(o + 1) * layer.input_width];
            for (w, &x) in row.iter_mut().zip(input) {
                *w += d * x;
            }
        }
        if l == 0 {
            break;
        }
        let mut dprev = vec![0.0; layer.input_width];
        for (o, &d) in delta.iter().enumerate() {
            let row = &layer.weights[o * layer.input_width..(o + 1) * layer.input_width];
            for (dp, &w) in dprev.iter_mut().zip(row) {
                *dp += d * w;
            }
        }
        // The input of layer l is the activation of layer l-1, passed
        // through the normalization layer when l-1 is the third hidden
        // layer. Statistics are constants, so that step scales by 1/sigma.
        if l == TEMPNORM_AFTER_LAYER + 1 {
            for (dp, &s) in dprev.iter_mut().zip(&cache.tn_scale) {
                *dp *= s;
            }
        }
        for (dp, &s) in dprev.iter_mut().zip(&cache.slopes[l - 1]) {
            *dp *= s;
        }
        delta = dprev;
    }
}

/// Loss and parameter gradients over one ordered subject sequence, with the
/// loss restricted to the samples selected by `mask` (all samples when the
/// mask is `None`). The forward pass always covers the full sequence so the
/// normalization states stay correct.
pub fn batch_loss_and_grads(
    model: &MlpModel,
    inputs: &[Vec<f64>],
    targets: &[[f64; 2]],
    mask: Option<&[bool]>,
    tempnorm: TempNormMode,
    activation: Activation,
) -> Result<(f64, Grads, SequenceRun), TempNormError> {
    if inputs.len() != targets.len() {
        return Err(TempNormError::ShapeMismatch(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let run = run_sequence(model, inputs, tempnorm, activation)?;
    let selected: Vec<usize> = (0..inputs.len())
        .filter(|&i| mask.map_or(true, |m| m[i]))
        .collect();
    if selected.is_empty() {
        return Err(TempNormError::InsufficientData(
            "no samples selected for the loss".into(),
        ));
    }
    let sel_preds: Vec<[f64; 2]> = selected.iter().map(|&i| run.predictions[i]).collect();
    let sel_targets: Vec<[f64; 2]> = selected.iter().map(|&i| targets[i]).collect();
    let loss = wmse(&sel_preds, &sel_targets)?;

    let weight_sums: [f64; 2] = [0, 1].map(|d| {
        sel_targets.iter().map(|t| sample_weight(t[d])).sum::<f64>()
    });
    let mut grads = Grads::zeros(model);
    for &i in &selected {
        let mut dl_dout = [0.0; 2];
        for d in 0..2 {
            let w = sample_weight(targets[i][d]);
            dl_dout[d] = 2.0 * w * (run.predictions[i][d] - targets[i][d]) / weight_sums[d];
        }
        backward_sample(model, &run.caches[i], dl_dout, &mut grads);
    }
    Ok((loss, grads, run))
}

struct Adam {
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(model: &MlpModel, lr: f64) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect::<Vec<_>>()
        };
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update with the step-size scaled by `lr_scale`, which the
    /// training loop anneals linearly to zero over its step budget.
    fn step(&mut self, model: &mut MlpModel, grads: &Grads, lr_scale: f64) {
        self.t += 1;
        let lr = self.lr * lr_scale;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[l];
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            for i in 0..layer.weights.len() {
                mw[i] = self.beta1 * mw[i] + (1.0 - self.beta1) * gw[i];
                vw[i] = self.beta2 * vw[i] + (1.0 - self.beta2) * gw[i] * gw[i];
                layer.weights[i] -= lr * (mw[i] / b1c) / ((vw[i] / b2c).sqrt() + self.eps);
            }
            for i in 0..layer.biases.len() {
                mb[i] = self.beta1 * mb[i] + (1.0 - self.beta1) * gb[i];
                vb[i] = self.beta2 * vb[i] + (1.0 - self.beta2) * gb[i] * gb[i];
                layer.biases[i] -= lr * (mb[i] / b1c) / ((vb[i] / b2c).sqrt() + self.eps);
            }
        }
    }
}

/// One subject's features and raw rating labels, in chronological order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectData {
    pub subject_id: String,
    pub features: Vec<Vec<f64>>,
    pub raw_mania: Vec<f64>,
    pub raw_depression: Vec<f64>,
}

/// Normalized label pairs for the given sample order: prenormalize, then
/// fold each dimension through its own stream in that order.
pub fn targets_for_order(
    subject: &SubjectData,
    order: &[usize],
    half_life: HalfLife,
    cfg: &EvalConfig,
) -> Result<Vec<[f64; 2]>, TempNormError> {
    let mut mania_state = TempNorm::new(half_life);
    let mut depression_state = TempNorm::new(half_life);
    let mut out = Vec::with_capacity(order.len());
    for &i in order {
        let m = mania_state.step(prenormalize(subject.raw_mania[i], cfg.offset, cfg.scale)?)?;
        let h = depression_state
            .step(prenormalize(subject.raw_depression[i], cfg.offset, cfg.scale)?)?;
        out.push([m, h]);
    }
    Ok(out)
}

/// Training protocol configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub folds: usize,
    pub total_epochs: usize,
    /// Epochs trained with the normalization layer replaced by identity.
    pub pretrain_epochs: usize,
    /// Initial Adam step size; annealed linearly to zero over the run so
    /// per-subject batch noise averages out instead of stalling the fit.
    pub learning_rate: f64,
    /// Fraction of each non-test subject's samples held out for validation.
    pub dev_fraction: f64,
    /// When false the normalization layer stays identity for all epochs
    /// (the ablation baseline). Labels remain normalized either way.
    pub use_tempnorm_layer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            folds: 5,
            total_epochs: 50,
            pretrain_epochs: 10,
            learning_rate: 1e-4,
            dev_fraction: 0.2,
            use_tempnorm_layer: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject_id: String,
    pub uar: Option<f64>,
}

pub struct TrainOutcome {
    pub fold_models: Vec<MlpModel>,
    pub logs: Vec<EpochLog>,
    pub subject_results: Vec<SubjectResult>,
    /// Unweighted mean over subjects with a defined UAR.
    pub mean_uar: Option<f64>,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn validation_score_for(
    model: &MlpModel,
    subjects: &[&SubjectData],
    dev_masks: &[Vec<bool>],
    half_life: HalfLife,
    active: bool,
    cfg: &EvalConfig,
) -> Result<f64, TempNormError> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (subject, mask) in subjects.iter().zip(dev_masks) {
        let order: Vec<usize> = (0..subject.features.len()).collect();
        let tgts = targets_for_order(subject, &order, half_life, cfg)?;
        let mode = if active {
            TempNormMode::Live
        } else {
            TempNormMode::Identity
        };
        let run = run_sequence(model, &subject.features, mode, Activation::Eval)?;
        for i in 0..subject.features.len() {
            if mask[i] {
                preds.push(run.predictions[i]);
                targets.push(tgts[i]);
            }
        }
    }
    max_reduced_wmse(&preds, &targets)
}

/// Five-fold subject-independent training with pretraining, reorder
/// augmentation, dev-based epoch selection, and test scoring in
/// chronological order.
pub fn train(
    subjects: &[SubjectData],
    mlp_cfg: &MlpConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<TrainOutcome, TempNormError> {
    if subjects.len() < train_cfg.folds {
        return Err(TempNormError::InvalidInput(format!(
            "need at least {} subjects for {} folds, got {}",
            train_cfg.folds,
            train_cfg.folds,
            subjects.len()
        )));
    }
    if train_cfg.pretrain_epochs >= train_cfg.total_epochs {
        return Err(TempNormError::InvalidParameter(
            "pretrain epochs must be fewer than total epochs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hl = mlp_cfg.half_life;

    // Round-robin fold assignment over a shuffled subject order.
    let mut fold_of = vec![0usize; subjects.len()];
    for (slot, &s) in shuffled_indices(subjects.len(), &mut rng).iter().enumerate() {
        fold_of[s] = slot % train_cfg.folds;
    }

    let mut fold_models = Vec::with_capacity(train_cfg.folds);
    let mut logs = Vec::new();
    let mut subject_results: Vec<SubjectResult> = Vec::new();

    for fold in 0..train_cfg.folds {
        let trainval: Vec<&SubjectData> = subjects
            .iter()
            .enumerate()
            .filter(|(i, _)| fold_of[*i] != fold)
            .map(|(_, s)| s)
            .collect();
        let test: Vec<&SubjectData> = subjects
            .iter()
            .enumerate()
            .filter(|(i, _)| fold_of[*i] == fold)
            .map(|(_, s)| s)
            .collect();

        // Within each non-test subject, a random fifth of samples is dev.
        let dev_masks: Vec<Vec<bool>> = trainval
            .iter()
            .map(|s| {
                let n = s.features.len();
                let n_dev = ((n as f64 * train_cfg.dev_fraction).round() as usize)
                    .clamp(1, n.saturating_sub(1).max(1));
                let mut mask = vec![false; n];
                for &i in shuffled_indices(n, &mut rng).iter().take(n_dev) {
                    mask[i] = true;
                }
                mask
            })
            .collect();

        let mut model = MlpModel::init(mlp_cfg.clone(), &mut rng);
        let mut adam = Adam::new(&model, train_cfg.learning_rate);
        let mut best: Option<(f64, MlpModel)> = None;
        let total_steps = (train_cfg.total_epochs * trainval.len()).max(1);
        let mut steps_taken = 0usize;

        for epoch in 1..=train_cfg.total_epochs {
            let active = train_cfg.use_tempnorm_layer && epoch > train_cfg.pretrain_epochs;
            let reorder = epoch > train_cfg.pretrain_epochs;
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (si, subject) in trainval.iter().enumerate() {
                let n = subject.features.len();
                let order = if reorder {
                    shuffled_indices(n, &mut rng)
                } else {
                    (0..n).collect()
                };
                let inputs: Vec<Vec<f64>> =
                    order.iter().map(|&i| subject.features[i].clone()).collect();
                let targets = targets_for_order(subject, &order, hl, eval_cfg)?;
                let train_mask: Vec<bool> =
                    order.iter().map(|&i| !dev_masks[si][i]).collect();
                let mode = if active {
                    TempNormMode::Live
                } else {
                    TempNormMode::Identity
                };
                let (loss, grads, _) = batch_loss_and_grads(
                    &model,
                    &inputs,
                    &targets,
                    Some(&train_mask),
                    mode,
                    Activation::Train(&mut rng),
                )?;
                let lr_scale = 1.0 - steps_taken as f64 / total_steps as f64;
                adam.step(&mut model, &grads, lr_scale);
                steps_taken += 1;
                epoch_loss += loss;
                batches += 1;
            }
            let train_loss = epoch_loss / batches.max(1) as f64;

            // Epoch selection runs only after pretraining.
            let val_score = if epoch > train_cfg.pretrain_epochs {
                let score = validation_score_for(
                    &model,
                    &trainval,
                    &dev_masks,
                    hl,
                    train_cfg.use_tempnorm_layer,
                    eval_cfg,
                )?;
                if best.as_ref().map_or(true, |(b, _)| score < *b) {
                    best = Some((score, model.clone()));
                }
                Some(score)
            } else {
                None
            };
            logs.push(EpochLog {
                fold,
                epoch,
                train_loss,
                val_score,
            });
        }

        let (_, best_model) = best.expect("at least one post-pretrain epoch");
        for subject in &test {
            let order: Vec<usize> = (0..subject.features.len()).collect();
            let targets = targets_for_order(subject, &order, hl, eval_cfg)?;
            let mode = if train_cfg.use_tempnorm_layer {
                TempNormMode::Live
            } else {
                TempNormMode::Identity
            };
            let run = run_sequence(&best_model, &subject.features, mode, Activation::Eval)?;
            let pred_max: Vec<f64> = run
                .predictions
                .iter()
                .map(|p| combine_max(p[0], p[1]))
                .collect();
            let truth_max: Vec<f64> = targets.iter().map(|t| combine_max(t[0], t[1])).collect();
            let uar = score_predictions(&pred_max, &truth_max, eval_cfg)?;
            subject_results.push(SubjectResult {
                subject_id: subject.subject_id.clone(),
                uar,
            });
        }
        fold_models.push(best_model);
    }

    subject_results.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let defined: Vec<f64> = subject_results.iter().filter_map(|r| r.uar).collect();
    let mean_uar = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(TrainOutcome {
        fold_models,
        logs,
        subject_results,
        mean_uar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_config() -> MlpConfig {
        MlpConfig::new(4, HalfLife::Finite(4.0)).with_hidden_width(4)
    }

    #[test]
    fn rrelu_behavior() {
        assert_eq!(rrelu_value(2.0, &mut Activation::Eval), 2.0);
        assert_relative_eq!(
            rrelu_value(-1.0, &mut Activation::Eval),
            -(RRELU_LO + RRELU_HI) / 2.0,
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let y = rrelu_value(-1.0, &mut Activation::Train(&mut rng));
            assert!((-RRELU_HI..=-RRELU_LO).contains(&y));
        }
    }

    #[test]
    fn sample_weight_properties() {
        assert_relative_eq!(
            sample_weight(0.0),
            (2.0 * std::f64::consts::PI).sqrt(),
            epsilon = 1e-9
        );
        assert_eq!(sample_weight(3.0), 25.0);
        assert_eq!(sample_weight(-3.0), 25.0);
        // Cap engages near |t| = 2.1448.
        assert!(sample_weight(2.14) < 25.0);
        assert_eq!(sample_weight(2.15), 25.0);
        // Even and nondecreasing in |t|.
        for i in 0..50 {
            let t = i as f64 * 0.1;
            assert_eq!(sample_weight(t), sample_weight(-t));
            assert!(sample_weight(t + 0.1) >= sample_weight(t));
        }
    }

    #[test]
    fn wmse_examples() {
        let p = [[1.0, 1.0]];
        let t = [[0.0, 0.0]];
        assert_relative_eq!(wmse(&p, &t).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(wmse(&p, &p).unwrap(), 0.0);
        assert!(wmse(&[], &[]).is_err());

        // Two samples, targets 0 and 2.5 in one dimension: weights 2.5066
        // and 25 on that dimension's residuals.
        let p = [[1.0, 0.0], [2.5, 0.0]];
        let t = [[0.0, 0.0], [0.0, 0.0]];
        let w0 = sample_weight(0.0);
        let expected = (w0 * 1.0 + w0 * 2.5 * 2.5) / (2.0 * w0);
        assert_relative_eq!(wmse(&p, &t).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let model = MlpModel::zeros(tiny_config());
        let inputs = vec![vec![1.0, -2.0, 3.0, 0.5]; 3];
        let run = run_sequence(&model, &inputs, TempNormMode::Live, Activation::Eval).unwrap();
        for p in run.predictions {
            assert_eq!(p, [0.0, 0.0]);
        }
    }

    #[test]
    fn first_sample_identity_of_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MlpModel::init(tiny_config(), &mut rng);
        let inputs = vec![vec![0.3, -0.4, 1.2, 0.9]];
        let live = run_sequence(&model, &inputs, TempNormMode::Live, Activation::Eval).unwrap();
        let ident =
            run_sequence(&model, &inputs, TempNormMode::Identity, Activation::Eval).unwrap();
        // Fresh states have prior (0,1), so the first sample is unchanged.
        assert_eq!(live.predictions[0], ident.predictions[0]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = MlpModel::init(tiny_config(), &mut rng);
        let inputs: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect())
            .collect();
        let a = run_sequence(&model, &inputs, TempNormMode::Live, Activation::Eval).unwrap();
        let b = run_sequence(&model, &inputs, TempNormMode::Live, Activation::Eval).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = MlpModel::zeros(tiny_config());
        let bad = vec![vec![1.0, 2.0]];
        assert!(run_sequence(&model, &bad, TempNormMode::Live, Activation::Eval).is_err());
    }

    #[test]
    fn train_rejects_too_few_subjects() {
        let subjects: Vec<SubjectData> = (0..3)
            .map(|i| SubjectData {
                subject_id: format!("s{i}"),
                features: vec![vec![0.0; 4]; 10],
                raw_mania: vec![6.0; 10],
                raw_depression: vec![6.0; 10],
            })
            .collect();
        let out = train(
            &subjects,
            &tiny_config(),
            &TrainConfig::default(),
            &EvalConfig::default(),
            0,
        );
        assert!(out.is_err());
    }
}
