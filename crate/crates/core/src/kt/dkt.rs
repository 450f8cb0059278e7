//! Deep knowledge tracing: a single-layer tanh recurrent network over
//! one-hot `(concept, correctness)` inputs with a sigmoid head that predicts
//! next-response correctness for every concept.
//!
//! Input layout: index `concept` for an incorrect answer and
//! `concept_count + concept` for a correct one.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{check_known, KtError, MasteryModel};
use crate::model::{ConceptId, InteractionRecord, Taxonomy, Trajectory};
use crate::retrieval::{decode_f64s, encode_f64s};

pub const DKT_MODEL_ID: &str = "dkt-tanh-rnn-v1";

/// One observed response: concept index and correctness.
pub type Step = (usize, bool);

#[derive(Debug, Clone, PartialEq)]
pub struct DktParams {
    pub concept_count: usize,
    pub hidden_size: usize,
    pub seed: u64,
    pub taxonomy_hash: String,
    /// hidden x 2C
    pub w_xh: Array2<f64>,
    /// hidden x hidden
    pub w_hh: Array2<f64>,
    pub b_h: Array1<f64>,
    /// C x hidden
    pub w_hy: Array2<f64>,
    pub b_y: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy computed from the logit.
fn bce_with_logit(z: f64, target: bool) -> f64 {
    let r = if target { 1.0 } else { 0.0 };
    z.max(0.0) - z * r + (-z.abs()).exp().ln_1p()
}

impl DktParams {
    pub fn init(concept_count: usize, hidden_size: usize, seed: u64, taxonomy_hash: impl Into<String>) -> Self {
        assert!(concept_count > 0 && hidden_size > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let w_xh = uniform(hidden_size, 2 * concept_count);
        let w_hh = uniform(hidden_size, hidden_size);
        let w_hy = uniform(concept_count, hidden_size);
        Self {
            concept_count,
            hidden_size,
            seed,
            taxonomy_hash: taxonomy_hash.into(),
            w_xh,
            w_hh,
            b_h: Array1::zeros(hidden_size),
            w_hy,
            b_y: Array1::zeros(concept_count),
        }
    }

    pub fn input_index(&self, step: Step) -> usize {
        step.0 + if step.1 { self.concept_count } else { 0 }
    }

    fn validate_shapes(&self) -> Result<(), KtError> {
        let (c, h) = (self.concept_count, self.hidden_size);
        let ok = self.w_xh.dim() == (h, 2 * c)
            && self.w_hh.dim() == (h, h)
            && self.b_h.len() == h
            && self.w_hy.dim() == (c, h)
            && self.b_y.len() == c;
        if !ok {
            return Err(KtError::Malformed("inconsistent parameter shapes".into()));
        }
        if !self.all_finite() {
            return Err(KtError::Malformed("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w_xh.as_slice().expect("standard layout"),
            self.w_hh.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
            self.w_hy.as_slice().expect("standard layout"),
            self.b_y.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_xh.as_slice_mut().expect("standard layout"),
            self.w_hh.as_slice_mut().expect("standard layout"),
            self.b_h.as_slice_mut().expect("standard layout"),
            self.w_hy.as_slice_mut().expect("standard layout"),
            self.b_y.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn hidden_step(&self, prev: ArrayView1<f64>, step: Step) -> Array1<f64> {
        let mut a = self.w_hh.dot(&prev) + &self.b_h;
        a += &self.w_xh.column(self.input_index(step));
        a.mapv_inplace(f64::tanh);
        a
    }

    fn logits(&self, h: ArrayView1<f64>) -> Array1<f64> {
        self.w_hy.dot(&h) + &self.b_y
    }

    /// Row `t` holds the per-concept correctness probabilities after
    /// observing the first `t` steps; row 0 is the initial-state prediction.
    pub fn forward(&self, steps: &[Step]) -> Array2<f64> {
        let mut out = Array2::zeros((steps.len() + 1, self.concept_count));
        let mut h = Array1::zeros(self.hidden_size);
        out.row_mut(0).assign(&self.logits(h.view()).mapv(sigmoid));
        for (t, &step) in steps.iter().enumerate() {
            h = self.hidden_step(h.view(), step);
            out.row_mut(t + 1).assign(&self.logits(h.view()).mapv(sigmoid));
        }
        out
    }

    /// Forward pass over a padded sequence; `None` entries are masked out
    /// and produce no output row or state change.
    pub fn forward_masked(&self, steps: &[Option<Step>]) -> Array2<f64> {
        let real: Vec<Step> = steps.iter().flatten().copied().collect();
        self.forward(&real)
    }

    /// Prediction after the whole sequence.
    pub fn final_prediction(&self, steps: &[Step]) -> Array1<f64> {
        let mut h = Array1::zeros(self.hidden_size);
        for &step in steps {
            h = self.hidden_step(h.view(), step);
        }
        self.logits(h.view()).mapv(sigmoid)
    }

    /// Summed next-step BCE and the number of predictions it covers.
    fn sequence_loss(&self, steps: &[Step]) -> (f64, usize) {
        let mut h = Array1::zeros(self.hidden_size);
        let mut loss = 0.0;
        for &next in steps {
            let z = self.w_hy.row(next.0).dot(&h) + self.b_y[next.0];
            loss += bce_with_logit(z, next.1);
            h = self.hidden_step(h.view(), next);
        }
        (loss, steps.len())
    }

    /// Mean next-step BCE over a batch of sequences.
    pub fn loss(&self, batch: &[Vec<Step>]) -> f64 {
        let (sum, n) = batch.iter().fold((0.0, 0usize), |(s, n), seq| {
            let (l, k) = self.sequence_loss(seq);
            (s + l, n + k)
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Mean loss and its gradient by backpropagation through time.
    pub fn loss_and_gradients(&self, batch: &[Vec<Step>]) -> (f64, DktGradients) {
        let mut g = DktGradients::zeros(self);
        let total: usize = batch.iter().map(Vec::len).sum();
        if total == 0 {
            return (0.0, g);
        }
        let scale = 1.0 / total as f64;
        let mut loss = 0.0;
        for seq in batch {
            loss += self.accumulate_sequence(seq, scale, &mut g);
        }
        (loss * scale, g)
    }

    fn accumulate_sequence(&self, steps: &[Step], scale: f64, g: &mut DktGradients) -> f64 {
        let t_len = steps.len();
        // hs[t] is the state after t steps; hs[0] = 0.
        let mut hs: Vec<Array1<f64>> = Vec::with_capacity(t_len + 1);
        hs.push(Array1::zeros(self.hidden_size));
        for &step in steps {
            let next = self.hidden_step(hs.last().expect("non-empty").view(), step);
            hs.push(next);
        }
        let mut loss = 0.0;
        // dz for the prediction made from state t about step t+1.
        let mut dh_from_out: Vec<Array1<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (c, r) = steps[t];
            let z = self.w_hy.row(c).dot(&hs[t]) + self.b_y[c];
            loss += bce_with_logit(z, r);
            let dz = (sigmoid(z) - if r { 1.0 } else { 0.0 }) * scale;
            g.w_hy.row_mut(c).scaled_add(dz, &hs[t]);
            g.b_y[c] += dz;
            dh_from_out.push(self.w_hy.row(c).to_owned() * dz);
        }
        let mut dh_next: Array1<f64> = Array1::zeros(self.hidden_size);
        for t in (1..=t_len).rev() {
            let mut dh = dh_next;
            if t < t_len {
                dh += &dh_from_out[t];
            }
            let h = &hs[t];
            let da: Array1<f64> = &dh * &h.mapv(|v| 1.0 - v * v);
            let col = self.input_index(steps[t - 1]);
            g.w_xh.column_mut(col).scaled_add(1.0, &da);
            let prev = &hs[t - 1];
            g.w_hh += &outer(&da, prev);
            g.b_h += &da;
            dh_next = self.w_hh.t().dot(&da);
        }
        loss
    }

    pub fn to_json(&self, model_id: &str) -> String {
        let file = ParamsFile {
            model_id: model_id.to_string(),
            concept_count: self.concept_count,
            hidden_size: self.hidden_size,
            seed: self.seed,
            taxonomy_hash: self.taxonomy_hash.clone(),
            tensors: ["w_xh", "w_hh", "b_h", "w_hy", "b_y"]
                .iter()
                .zip(self.tensors())
                .zip(self.shapes())
                .map(|((name, data), shape)| TensorFile {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    data: encode_f64s(data),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("params serialize")
    }

    fn shapes(&self) -> [Vec<usize>; 5] {
        let (c, h) = (self.concept_count, self.hidden_size);
        [vec![h, 2 * c], vec![h, h], vec![h], vec![c, h], vec![c]]
    }

    /// Parses a params file and checks it against the active taxonomy hash.
    pub fn from_json(json: &str, taxonomy_hash: &str) -> Result<(Self, String), KtError> {
        let file: ParamsFile = serde_json::from_str(json).map_err(|e| KtError::Malformed(e.to_string()))?;
        if file.taxonomy_hash != taxonomy_hash {
            return Err(KtError::TaxonomyMismatch { expected: file.taxonomy_hash, found: taxonomy_hash.to_string() });
        }
        let mut params = DktParams::init(file.concept_count.max(1), file.hidden_size.max(1), file.seed, file.taxonomy_hash);
        if file.concept_count == 0 || file.hidden_size == 0 {
            return Err(KtError::Malformed("zero-sized network".into()));
        }
        let shapes = params.shapes();
        if file.tensors.len() != 5 {
            return Err(KtError::Malformed("expected five tensors".into()));
        }
        for ((slot, tensor), shape) in params.tensors_mut().into_iter().zip(&file.tensors).zip(shapes.iter()) {
            if &tensor.shape != shape {
                return Err(KtError::Malformed(format!("tensor {} has shape {:?}", tensor.name, tensor.shape)));
            }
            let data = decode_f64s(&tensor.data).map_err(KtError::Malformed)?;
            if data.len() != slot.len() {
                return Err(KtError::Malformed(format!("tensor {} has {} values", tensor.name, data.len())));
            }
            slot.copy_from_slice(&data);
        }
        params.validate_shapes()?;
        Ok((params, file.model_id))
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    model_id: String,
    concept_count: usize,
    hidden_size: usize,
    seed: u64,
    taxonomy_hash: String,
    tensors: Vec<TensorFile>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DktGradients {
    pub w_xh: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_h: Array1<f64>,
    pub w_hy: Array2<f64>,
    pub b_y: Array1<f64>,
}

impl DktGradients {
    fn zeros(p: &DktParams) -> Self {
        Self {
            w_xh: Array2::zeros(p.w_xh.dim()),
            w_hh: Array2::zeros(p.w_hh.dim()),
            b_h: Array1::zeros(p.b_h.len()),
            w_hy: Array2::zeros(p.w_hy.dim()),
            b_y: Array1::zeros(p.b_y.len()),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        [
            self.w_xh.as_slice().expect("standard layout"),
            self.w_hh.as_slice().expect("standard layout"),
            self.b_h.as_slice().expect("standard layout"),
            self.w_hy.as_slice().expect("standard layout"),
            self.b_y.as_slice().expect("standard layout"),
        ]
        .concat()
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_xh.as_slice_mut().expect("standard layout"),
            self.w_hh.as_slice_mut().expect("standard layout"),
            self.b_h.as_slice_mut().expect("standard layout"),
            self.w_hy.as_slice_mut().expect("standard layout"),
            self.b_y.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn clip(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for s in self.slices_mut() {
                s.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

/// Max symmetric relative error between backprop and central differences.
pub fn gradient_check(params: &DktParams, batch: &[Vec<Step>], epsilon: f64) -> f64 {
    gradient_check_scaled(params, batch, epsilon, 1.0)
}

/// As [`gradient_check`], with the analytic gradient multiplied by
/// `analytic_scale` (used to confirm that the check detects wrong gradients).
pub fn gradient_check_scaled(params: &DktParams, batch: &[Vec<Step>], epsilon: f64, analytic_scale: f64) -> f64 {
    assert!((1e-7..=1e-3).contains(&epsilon), "epsilon outside [1e-7, 1e-3]");
    let (_, grads) = params.loss_and_gradients(batch);
    let analytic: Vec<f64> = grads.flat().iter().map(|g| g * analytic_scale).collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut flat_index = 0;
    for tensor in 0..5 {
        let len = probe.tensors()[tensor].len();
        for i in 0..len {
            let original = probe.tensors()[tensor][i];
            probe.tensors_mut()[tensor][i] = original + epsilon;
            let plus = probe.loss(batch);
            probe.tensors_mut()[tensor][i] = original - epsilon;
            let minus = probe.loss(batch);
            probe.tensors_mut()[tensor][i] = original;
            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic[flat_index];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-12);
            worst = worst.max(rel);
            flat_index += 1;
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub validation_fraction: f64,
    pub hidden_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            validation_fraction: 0.1,
            hidden_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (gradient norm {grad_norm})")]
    NonFiniteLoss { epoch: usize, batch: usize, grad_norm: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kt(#[from] KtError),
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: DktParams,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Epoch (1-based) whose params were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Expands records into DKT steps; a multi-concept record yields one step
/// per concept, in concept order.
pub fn sequence_from_records(records: &[InteractionRecord], taxonomy: &Taxonomy) -> Result<Vec<Step>, KtError> {
    let mut steps = Vec::with_capacity(records.len());
    for r in records {
        for c in &r.concepts {
            steps.push((check_known(taxonomy, c)?, r.correct));
        }
    }
    Ok(steps)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &DktParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, lr }
    }

    fn step(&mut self, p: &mut DktParams, g: &mut DktGradients) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, (param, grad)) in p.tensors_mut().into_iter().zip(g.slices_mut()).enumerate() {
            for i in 0..param.len() {
                let gi = grad[i];
                self.m[k][i] = Self::BETA1 * self.m[k][i] + (1.0 - Self::BETA1) * gi;
                self.v[k][i] = Self::BETA2 * self.v[k][i] + (1.0 - Self::BETA2) * gi * gi;
                let m_hat = self.m[k][i] / c1;
                let v_hat = self.v[k][i] / c2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a DKT network with Adam and gradient clipping, returning the
/// params with the best validation loss.
pub fn train(dataset: &[Trajectory], taxonomy: &Taxonomy, config: &TrainingConfig) -> Result<TrainReport, TrainError> {
    if config.batch_size == 0 || config.hidden_size == 0 || !(config.learning_rate > 0.0) || !(config.clip_norm > 0.0) {
        return Err(TrainError::InvalidConfig("batch size, hidden size, learning rate and clip norm must be positive".into()));
    }
    if !(config.validation_fraction > 0.0 && config.validation_fraction < 1.0) {
        return Err(TrainError::InvalidConfig("validation fraction must lie in (0, 1)".into()));
    }
    let mut sequences = dataset
        .iter()
        .map(|t| sequence_from_records(&t.records, taxonomy))
        .collect::<Result<Vec<_>, _>>()?;
    sequences.retain(|s| !s.is_empty());
    if sequences.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let init = DktParams::init(taxonomy.len(), config.hidden_size, config.seed, taxonomy.hash());
    if config.epochs == 0 {
        return Ok(TrainReport { params: init, train_loss: vec![], validation_loss: vec![], best_epoch: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    sequences.shuffle(&mut rng);
    let n_val = if sequences.len() < 2 {
        0
    } else {
        ((sequences.len() as f64 * config.validation_fraction).round() as usize).clamp(1, sequences.len() - 1)
    };
    let (val, train_set) = sequences.split_at(n_val);
    let mut train_set = train_set.to_vec();
    // With a single sequence the training data doubles as validation data.
    let val: Vec<Vec<Step>> = if val.is_empty() { train_set.clone() } else { val.to_vec() };

    let mut params = init;
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut best = (params.loss(&val), params.clone(), 0usize);
    let mut train_curve = Vec::with_capacity(config.epochs);
    let mut val_curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        train_set.shuffle(&mut rng);
        for (b, batch) in train_set.chunks(config.batch_size).enumerate() {
            let (loss, mut grads) = params.loss_and_gradients(batch);
            let grad_norm = grads.norm();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, grad_norm });
            }
            grads.clip(config.clip_norm);
            adam.step(&mut params, &mut grads);
        }
        let train_loss = params.loss(&train_set);
        let val_loss = params.loss(&val);
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX, grad_norm: f64::NAN });
        }
        log::debug!("dkt epoch {epoch}: train {train_loss:.5} validation {val_loss:.5}");
        train_curve.push(train_loss);
        val_curve.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
        }
    }
    Ok(TrainReport { params: best.1, train_loss: train_curve, validation_loss: val_curve, best_epoch: best.2 })
}

/// DKT bound to a taxonomy; mastery is the predicted correctness after the
/// student's history, or the initial-state prediction for no history.
#[derive(Debug, Clone)]
pub struct DktModel {
    params: DktParams,
    taxonomy: Taxonomy,
}

impl DktModel {
    pub fn new(params: DktParams, taxonomy: Taxonomy) -> Result<Self, KtError> {
        if params.taxonomy_hash != taxonomy.hash() {
            return Err(KtError::TaxonomyMismatch { expected: params.taxonomy_hash.clone(), found: taxonomy.hash() });
        }
        if params.concept_count != taxonomy.len() {
            return Err(KtError::Malformed("concept count does not match taxonomy".into()));
        }
        params.validate_shapes()?;
        Ok(Self { params, taxonomy })
    }

    pub fn params(&self) -> &DktParams {
        &self.params
    }
}

impl MasteryModel for DktModel {
    fn model_id(&self) -> &str {
        DKT_MODEL_ID
    }

    fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn masteries(&self, records: &[InteractionRecord], concepts: &[ConceptId]) -> Result<Vec<f64>, KtError> {
        let idx = concepts.iter().map(|c| check_known(&self.taxonomy, c)).collect::<Result<Vec<_>, _>>()?;
        let steps = sequence_from_records(records, &self.taxonomy)?;
        let pred = self.params.final_prediction(&steps);
        Ok(idx.into_iter().map(|i| pred[i]).collect())
    }
}
