//! Negative log-likelihood training with Adam, plus the MC-dropout and
//! deep-ensemble baseline constructors.
//!
//! A training run is a pure function of (model seed, train config, data):
//! shuffling, minibatch noise, and evaluation streams are all derived from
//! the config seed, so identical invocations produce identical histories
//! and best-model weights.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelConfig, PaddedExample, TransformerClassifier};
use crate::sampling::RngStream;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::uncertainty::{accuracy, mcc, Predictor};

/// Metric used for model selection on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    Accuracy,
    Mcc,
}

impl SelectionMetric {
    pub fn compute(&self, predictions: &[usize], truth: &[usize]) -> Result<f64> {
        match self {
            SelectionMetric::Accuracy => accuracy(predictions, truth),
            SelectionMetric::Mcc => mcc(predictions, truth),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::Mcc => "mcc",
        }
    }
}

/// Adam hyperparameters; β1=0.9, β2=0.999, eps=1e-8 unless overridden.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
pub struct Adam<T> {
    cfg: AdamConfig,
    t: u64,
    slots: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::param("lr", "must be > 0"));
        }
        Ok(Adam {
            cfg,
            t: 0,
            slots: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Start a new optimizer step; `t` strictly increases by 1 per step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter in place. Call after `begin_step`; a NaN or
    /// infinite gradient aborts, naming the parameter.
    pub fn apply(&mut self, name: &str, param: &mut crate::tensor::Tensor<T>, grad: &[T]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(Error::contract(
                "adam_step",
                format!("gradient length {} vs parameter {name} length {}", grad.len(), param.numel()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient for parameter {name} at step {}",
                self.t
            )));
        }
        let idx = match self.slots.iter().position(|(n, _, _)| n == name) {
            Some(i) => i,
            None => {
                self.slots
                    .push((name.to_string(), vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
                self.slots.len() - 1
            }
        };
        let (_, m, v) = &mut self.slots[idx];
        let b1 = T::from_f64_c(self.cfg.beta1);
        let b2 = T::from_f64_c(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64_c(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64_c(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64_c(self.cfg.lr);
        let eps = T::from_f64_c(self.cfg.eps);
        for ((w, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Training-loop knobs. Dropout rate lives in [`ModelConfig`]; the model
/// owns its forward behavior.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validate (and consider for selection) every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub metric: SelectionMetric,
    /// Optional global-norm gradient clipping, off by default.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, max_epochs: usize, seed: u64) -> Self {
        TrainConfig {
            adam: AdamConfig::with_lr(lr),
            batch_size,
            max_epochs,
            eval_every: 1,
            seed,
            metric: SelectionMetric::Accuracy,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.adam.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("max_epochs and eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// One validation record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

/// Per-evaluation history plus the selected (metric-maximizing) epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub selected_epoch: usize,
}

impl TrainHistory {
    /// CSV with header `epoch,train_loss,valid_metric`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_metric\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.valid_metric));
        }
        out
    }
}

/// Argmax predictions of a model over a dataset, in chunks.
pub fn predict_labels<T: Scalar>(
    model: &TransformerClassifier<T>,
    dataset: &LabeledDataset,
    opts: ForwardOptions,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(dataset.len());
    for (chunk_idx, chunk) in dataset.examples.chunks(64).enumerate() {
        let refs: Vec<&[usize]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        let mut chunk_rng = rng.child(chunk_idx as u64);
        let probs = model.predict_probs(&refs, opts, &mut chunk_rng)?;
        preds.extend(probs.iter().map(|p| argmax(p)));
    }
    Ok(preds)
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Train with seeded shuffling, minibatch NLL + Adam, periodic validation,
/// and best-checkpoint selection. Returns the metric-maximizing model and
/// the full history.
pub fn train<T: Scalar>(
    mut model: TransformerClassifier<T>,
    train_set: &LabeledDataset,
    valid_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(TransformerClassifier<T>, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Data("empty train or valid split".into()));
    }
    train_set.check_compatible(&model.config)?;
    valid_set.check_compatible(&model.config)?;

    let mut adam = Adam::new(cfg.adam.clone())?;
    let shuffle_root = RngStream::named(cfg.seed, "train-shuffle");
    let forward_root = RngStream::named(cfg.seed, "train-forward");
    let eval_root = RngStream::named(cfg.seed, "train-eval");

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, TransformerClassifier<T>)> = None;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_shuffle = shuffle_root.child(epoch as u64);
        epoch_shuffle.shuffle(&mut indices);
        let epoch_forward = forward_root.child(epoch as u64);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch_ids) in indices.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bindings = model.register_params(&mut tape);
            let batch: Vec<PaddedExample> = {
                let seqs: Vec<&[usize]> = batch_ids
                    .iter()
                    .map(|&i| train_set.examples[i].ids.as_slice())
                    .collect();
                crate::model::pad_batch(&seqs, 0)
            };
            let labels: Vec<usize> = batch_ids
                .iter()
                .map(|&i| train_set.examples[i].label)
                .collect();
            let mut batch_rng = epoch_forward.child(batch_idx as u64);
            let logits = model.forward(
                &mut tape,
                &bindings,
                &batch,
                ForwardOptions::train(),
                &mut batch_rng,
            )?;
            let loss = match tape.nll_loss(logits, &labels) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        at_epoch: epoch,
                        history: Box::new(history),
                    });
                }
                Err(e) => return Err(e),
            };
            let loss_value = tape.value(loss).data()[0].to_f64_c();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    at_epoch: epoch,
                    history: Box::new(history),
                });
            }
            loss_sum += loss_value * batch_ids.len() as f64;
            seen += batch_ids.len();
            tape.backward(loss)?;

            let mut grads: Vec<(String, Vec<T>)> = Vec::with_capacity(bindings.named.len());
            for (name, id) in &bindings.named {
                let g = tape
                    .grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); tape.value(*id).numel()]);
                grads.push((name.clone(), g));
            }
            if let Some(clip) = cfg.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            adam.begin_step();
            let mut step_err = None;
            model.visit_params_mut(|name, t| {
                if step_err.is_some() {
                    return;
                }
                let g = grads
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, g)| g.as_slice())
                    .expect("gradient for every parameter");
                if let Err(e) = adam.apply(name, t, g) {
                    step_err = Some(e);
                }
            });
            if let Some(e) = step_err {
                return Err(e);
            }
        }

        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let mut eval_rng = eval_root.child(epoch as u64);
            let preds = predict_labels(
                &model,
                valid_set,
                ForwardOptions::eval(true),
                &mut eval_rng,
            )?;
            let metric = cfg.metric.compute(&preds, &valid_set.labels())?;
            history.records.push(EvalRecord {
                epoch,
                train_loss: loss_sum / seen as f64,
                valid_metric: metric,
            });
            let better = best.as_ref().map_or(true, |(m, _, _)| metric > *m);
            if better {
                best = Some((metric, epoch, model.clone()));
            }
        }
    }

    let (_, selected_epoch, best_model) = best.expect("at least one evaluation");
    history.selected_epoch = selected_epoch;
    Ok((best_model, history))
}

fn clip_global_norm<T: Scalar>(grads: &mut [(String, Vec<T>)], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|g| g.to_f64_c().powi(2))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = T::from_f64_c(max_norm / total);
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
}

/// Train `n` deterministic-attention models with seeds
/// `base_seed + 0 .. base_seed + n - 1`; every other hyperparameter is
/// shared. The members' prediction spread is the ensemble uncertainty.
pub fn train_ensemble<T: Scalar>(
    config: &ModelConfig,
    train_set: &LabeledDataset,
    valid_set: &LabeledDataset,
    train_cfg: &TrainConfig,
    n: usize,
    base_seed: u64,
) -> Result<Vec<TransformerClassifier<T>>> {
    if n < 2 {
        return Err(Error::param("ensemble_n", "must be >= 2"));
    }
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed + i as u64;
        let mut member_config = config.clone();
        member_config.attention = crate::attention::StochasticConfig::Deterministic;
        member_config.seed = seed;
        let mut init_rng = RngStream::named(seed, "model-init");
        let model = TransformerClassifier::init(&member_config, &mut init_rng)?;
        let mut member_train = train_cfg.clone();
        member_train.seed = seed;
        let (best, _) = train(model, train_set, valid_set, &member_train)?;
        members.push(best);
    }
    Ok(members)
}

/// Inference-mode wrapper that keeps dropout active with rate `eta`.
/// Repeated forward passes differ stochastically; `eta = 0` reduces to
/// plain evaluation.
pub fn mc_dropout_model<T: Scalar>(
    model: &TransformerClassifier<T>,
    eta: f64,
) -> Result<Predictor<'_, T>> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::param("eta", format!("{eta} outside [0, 1)")));
    }
    if eta > 0.0 && model.config.dropout_rate == 0.0 {
        return Err(Error::contract(
            "mc_dropout_model",
            "model was trained without dropout",
        ));
    }
    Ok(Predictor::McDropout { model, rate: eta })
}
