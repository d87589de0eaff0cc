//! Binary censorship classifier over embedding vectors: a dense
//! 256 -> 64 -> 32 -> 1 network emitting a censorship probability.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::{Checkpoint, RngState};
use crate::nn::dense::{relu, relu_backward, Dense};
use crate::nn::loss::{bce_with_logit, sigmoid};
use crate::nn::schedule::LrSchedule;
use crate::nn::sgd::sgd_step;
use crate::nn::tensor::{Param, ParamVisitor};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum CdError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training set holds a single class; both labels are required")]
    SingleClass,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("embedding dimension mismatch: model expects {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite input embedding")]
    NonFiniteInput,
    #[error("checkpoint does not hold a model of kind '{0}'")]
    WrongKind(String),
}

pub const HIDDEN1: usize = 64;
pub const HIDDEN2: usize = 32;

pub struct CdModel {
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
}

struct CdCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
}

impl CdModel {
    pub fn new(input_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        CdModel {
            l1: Dense::new(input_dim, HIDDEN1, rng),
            l2: Dense::new(HIDDEN1, HIDDEN2, rng),
            l3: Dense::new(HIDDEN2, 1, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_size()
    }

    pub fn n_params(&self) -> usize {
        self.l1.n_params() + self.l2.n_params() + self.l3.n_params()
    }

    fn forward_cached(&self, e: &[f64]) -> Result<(f64, CdCache), CdError> {
        if e.len() != self.input_dim() {
            return Err(CdError::DimMismatch { expected: self.input_dim(), actual: e.len() });
        }
        if !e.iter().all(|v| v.is_finite()) {
            return Err(CdError::NonFiniteInput);
        }
        let pre1 = self.l1.forward(e)?;
        let act1 = relu(&pre1);
        let pre2 = self.l2.forward(&act1)?;
        let act2 = relu(&pre2);
        let logit = self.l3.forward(&act2)?[0];
        Ok((logit, CdCache { input: e.to_vec(), pre1, act1, pre2, act2 }))
    }

    pub fn logit(&self, e: &[f64]) -> Result<f64, CdError> {
        Ok(self.forward_cached(e)?.0)
    }

    /// Censorship probability in (0, 1).
    pub fn classify(&self, e: &[f64]) -> Result<f64, CdError> {
        Ok(sigmoid(self.logit(e)?))
    }

    /// Accumulates gradients of a BCE loss for one example; returns the loss.
    fn train_example(&mut self, e: &[f64], target: f64) -> Result<f64, CdError> {
        let (logit, cache) = self.forward_cached(e)?;
        let (loss, dlogit) = bce_with_logit(logit, target);
        let dact2 = self.l3.backward(&cache.act2, &[dlogit]);
        let dpre2 = relu_backward(&cache.pre2, &dact2);
        let dact1 = self.l2.backward(&cache.act1, &dpre2);
        let dpre1 = relu_backward(&cache.pre1, &dact1);
        let _ = self.l1.backward(&cache.input, &dpre1);
        Ok(loss)
    }

    pub fn to_checkpoint(&mut self, rng: Option<&ChaCha20Rng>, epoch: u64) -> Checkpoint {
        let meta = serde_json::json!({ "input_dim": self.input_dim() });
        let mut params = Vec::new();
        self.for_each_param(&mut |name, p| params.push((name.to_string(), p.value.clone())));
        Checkpoint {
            model_kind: "cd_classifier".into(),
            meta_json: meta.to_string(),
            params,
            optimizer: Vec::new(),
            rng: rng.map(RngState::capture),
            epoch,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CdError> {
        if ck.model_kind != "cd_classifier" {
            return Err(CdError::WrongKind(ck.model_kind.clone()));
        }
        let meta: serde_json::Value =
            serde_json::from_str(&ck.meta_json).map_err(|_| CdError::WrongKind("meta".into()))?;
        let input_dim = meta["input_dim"].as_u64().unwrap_or(0) as usize;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = CdModel::new(input_dim, &mut rng);
        let mut missing = false;
        model.for_each_param(&mut |name, p| match ck.params.iter().find(|(n, _)| n == name) {
            Some((_, t)) if t.shape() == p.value.shape() => p.value = t.clone(),
            _ => missing = true,
        });
        if missing {
            return Err(CdError::WrongKind("parameter table mismatch".into()));
        }
        Ok(model)
    }
}

use rand::SeedableRng;

impl ParamVisitor for CdModel {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let groups: [(&str, &mut Dense); 3] =
            [("l1", &mut self.l1), ("l2", &mut self.l2), ("l3", &mut self.l3)];
        for (prefix, layer) in groups {
            layer.for_each_param(&mut |name, p| f(&format!("{prefix}.{name}"), p));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdTrainConfig {
    pub seed: u64,
    pub max_epochs: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for CdTrainConfig {
    fn default() -> Self {
        CdTrainConfig {
            seed: 0,
            max_epochs: 200,
            batch_size: 16,
            lr: LrSchedule::new(1e-6, 1e-7, 10),
            patience: 5,
            min_delta: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub history: Vec<ClassifierEpoch>,
    pub stopped_early: bool,
    pub best_epoch: u64,
    pub epochs_run: u64,
}

pub fn validation_stats(
    model: &CdModel,
    data: &[(Vec<f64>, bool)],
    threshold: f64,
) -> Result<(f64, f64), CdError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (e, y) in data {
        let logit = model.logit(e)?;
        loss += bce_with_logit(logit, *y as u8 as f64).0;
        if (sigmoid(logit) >= threshold) == *y {
            correct += 1;
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Binary cross-entropy training with mini-batches and early stopping on the
/// validation loss.
pub fn train_classifier(
    model: &mut CdModel,
    train: &[(Vec<f64>, bool)],
    val: &[(Vec<f64>, bool)],
    cfg: &CdTrainConfig,
) -> Result<ClassifierOutcome, CdError> {
    if train.is_empty() || val.is_empty() {
        return Err(CdError::EmptyDataset);
    }
    if train.iter().all(|(_, y)| *y) || train.iter().all(|(_, y)| !*y) {
        return Err(CdError::SingleClass);
    }

    let mut data_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2);

    let (val_loss, val_acc) = validation_stats(model, val, 0.5)?;
    let mut history = vec![ClassifierEpoch {
        epoch: 0,
        lr: cfg.lr.lr(0),
        train_loss: None,
        val_loss,
        val_accuracy: val_acc,
    }];

    let mut best = val_loss;
    let mut best_epoch = 0u64;
    let mut bad_epochs = 0u32;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr.lr(epoch - 1);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut data_rng);

        let mut epoch_loss = 0.0;
        for batch in idx.chunks(cfg.batch_size.max(1)) {
            for &i in batch {
                let (e, y) = &train[i];
                epoch_loss += model.train_example(e, *y as u8 as f64)?;
            }
            sgd_step(model, lr, batch.len() as f64)?;
            model.zero_grads();
        }

        let (val_loss, val_acc) = validation_stats(model, val, 0.5)?;
        history.push(ClassifierEpoch {
            epoch,
            lr,
            train_loss: Some(epoch_loss / train.len() as f64),
            val_loss,
            val_accuracy: val_acc,
        });
        epochs_run = epoch;

        if val_loss < best - cfg.min_delta {
            best = val_loss;
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(ClassifierOutcome { history, stopped_early, best_epoch, epochs_run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn model(dim: usize, seed: u64) -> CdModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        CdModel::new(dim, &mut rng)
    }

    #[test]
    fn zero_model_outputs_half() {
        let mut m = model(8, 0);
        m.for_each_param(&mut |_, p| p.value.fill(0.0));
        assert_abs_diff_eq!(m.classify(&[0.3; 8]).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn classify_is_pure_and_bounded() {
        let m = model(8, 1);
        let e = vec![0.5; 8];
        let a = m.classify(&e).unwrap();
        let b = m.classify(&e).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn dimension_mismatch_and_non_finite_are_errors() {
        let m = model(8, 2);
        assert!(matches!(m.classify(&[0.0; 7]), Err(CdError::DimMismatch { .. })));
        assert!(matches!(m.classify(&[f64::NAN; 8]), Err(CdError::NonFiniteInput)));
    }

    #[test]
    fn full_size_parameter_count() {
        let mut m = model(256, 3);
        assert_eq!(m.n_params(), 18_561);
        assert_eq!(m.param_count(), 18_561);
    }

    struct CdProbe {
        model: CdModel,
        e: Vec<f64>,
        target: f64,
    }

    impl ParamVisitor for CdProbe {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            self.model.for_each_param(f);
        }
    }

    #[test]
    fn classifier_gradient_passes_at_tight_tolerance() {
        // Rectifier kinks break finite differences, so seeds whose
        // preactivations sit within 1e-3 of zero are skipped.
        let mut checked = 0;
        for seed in 0..40 {
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
            let dim = rng.gen_range(4..10);
            let m = model(dim, 500 + seed);
            let e: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, cache) = m.forward_cached(&e).unwrap();
            let margin = cache
                .pre1
                .iter()
                .chain(&cache.pre2)
                .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
            if margin < 1e-3 {
                continue;
            }
            let target = if seed % 2 == 0 { 1.0 } else { 0.0 };
            let mut probe = CdProbe { model: m, e, target };
            let report = crate::nn::gradcheck::finite_difference_check(
                &mut probe,
                |p| p.model.train_example(&p.e.clone(), p.target).unwrap(),
                1e-5,
                1e-6,
            );
            assert!(report.pass, "seed {seed}: max rel err {}", report.max_rel_err);
            checked += 1;
            if checked >= 20 {
                break;
            }
        }
        assert!(checked >= 20, "only {checked} smooth seeds found");
    }

    fn blobs(n: usize, dim: usize, margin: f64, seed: u64) -> Vec<(Vec<f64>, bool)> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = i % 2 == 0;
                let center = if y { margin / 2.0 } else { -margin / 2.0 };
                let e: Vec<f64> =
                    (0..dim).map(|_| center + rng.gen_range(-0.5..0.5)).collect();
                (e, y)
            })
            .collect()
    }

    /// Logistic-regression oracle: one-dimensional projection onto the class
    /// axis, trained by plain gradient descent. Confirms the blobs are
    /// linearly separable before the classifier is held to that standard.
    fn logistic_oracle_accuracy(train: &[(Vec<f64>, bool)], test: &[(Vec<f64>, bool)]) -> f64 {
        let dim = train[0].0.len();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        for _ in 0..500 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (e, y) in train {
                let z: f64 = w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + b;
                let d = sigmoid(z) - (*y as u8 as f64);
                for (g, x) in gw.iter_mut().zip(e) {
                    *g += d * x;
                }
                gb += d;
            }
            let n = train.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= 0.5 * gi / n;
            }
            b -= 0.5 * gb / n;
        }
        let correct = test
            .iter()
            .filter(|(e, y)| {
                let z: f64 = w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + b;
                (z >= 0.0) == *y
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = blobs(2000, 16, 4.0, 11);
        let (train, val) = data.split_at(1600);
        assert!(logistic_oracle_accuracy(train, val) >= 0.99, "oracle cannot separate");

        let mut m = model(16, 13);
        let cfg = CdTrainConfig {
            seed: 5,
            max_epochs: 200,
            batch_size: 16,
            lr: LrSchedule::new(0.05, 0.005, 10),
            patience: 20,
            min_delta: 1e-6,
        };
        let out = train_classifier(&mut m, train, val, &cfg).unwrap();
        let final_acc = out.history.last().unwrap().val_accuracy;
        assert!(final_acc >= 0.99, "validation accuracy {final_acc}");

        // Inverting the labels flips the achievable accuracy symmetrically.
        let flipped: Vec<(Vec<f64>, bool)> =
            train.iter().map(|(e, y)| (e.clone(), !y)).collect();
        let flipped_val: Vec<(Vec<f64>, bool)> =
            val.iter().map(|(e, y)| (e.clone(), !y)).collect();
        assert!(logistic_oracle_accuracy(&flipped, &flipped_val) >= 0.99);
        let mut m2 = model(16, 13);
        let out2 = train_classifier(&mut m2, &flipped, &flipped_val, &cfg).unwrap();
        assert!(out2.history.last().unwrap().val_accuracy >= 0.99);
    }

    #[test]
    fn initial_loss_near_ln2_on_balanced_data() {
        let data = blobs(400, 8, 1.0, 3);
        let m = model(8, 17);
        let (loss, _) = validation_stats(&m, &data, 0.5).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 0.05, "initial loss {loss}");
    }

    #[test]
    fn single_class_training_errors() {
        let data: Vec<(Vec<f64>, bool)> = (0..10).map(|_| (vec![0.0; 4], true)).collect();
        let mut m = model(4, 19);
        assert!(matches!(
            train_classifier(&mut m, &data, &data, &CdTrainConfig::default()),
            Err(CdError::SingleClass)
        ));
    }

    #[test]
    fn patience_zero_stops_at_first_non_improving_epoch() {
        // A learning rate of essentially zero cannot improve the loss, so
        // epoch 1 fails to improve and training stops immediately.
        let data = blobs(40, 4, 2.0, 5);
        let mut m = model(4, 23);
        let cfg = CdTrainConfig {
            seed: 1,
            max_epochs: 50,
            batch_size: 8,
            lr: LrSchedule::new(1e-15, 1e-16, 10),
            patience: 0,
            min_delta: 1e-5,
        };
        let out = train_classifier(&mut m, &data, &data, &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.epochs_run, 1);
    }

    #[test]
    fn threshold_monotonicity() {
        let m = model(6, 29);
        let data: Vec<Vec<f64>> = {
            let mut rng = ChaCha20Rng::seed_from_u64(31);
            (0..200).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
        };
        let probs: Vec<f64> = data.iter().map(|e| m.classify(e).unwrap()).collect();
        let mut last = usize::MAX;
        for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let positives = probs.iter().filter(|p| **p >= t).count();
            assert!(positives <= last);
            last = positives;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cd.ckpt");
        let mut m = model(16, 37);
        let e = vec![0.25; 16];
        let before = m.classify(&e).unwrap();
        m.to_checkpoint(None, 3).save(&path).unwrap();
        let back = CdModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.classify(&e).unwrap(), before);
    }
}
