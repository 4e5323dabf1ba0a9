//! K-fold training of the dual-view network.
//!
//! Folds split subjects, never slices. Each epoch visits every
//! (subject, phase, short-axis slice) of the training folds once in a
//! seeded random order; a sample pairs that SA slice with the replicated LA
//! slice of the same phase. After every epoch the loss on the held-out fold
//! is measured without augmentation and `best.ckpt` / `last.ckpt` are
//! written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentPolicy, LabeledSlice};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::dataio::{Phase, View};
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_with_grad, LabelBatch, LossConfig};
use crate::network::{Mode, NetworkConfig, ParameterSet, Real, Tensor};
use crate::preprocess::{PreprocessConfig, PreprocessedStudy};

/// Adaptive-moment optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &ParameterSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step<T: Real>(&mut self, params: &mut ParameterSet<T>) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64().unwrap();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.value[i] = T::lit(p.value[i].to_f64().unwrap() - update);
            }
        }
    }
}

/// Everything a training run needs; serialized as the `--config` JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub folds: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Slice pairs per optimization step.
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    /// Geometry used when preparing the training images and at inference.
    pub preprocess: PreprocessConfig,
    /// Directory of preprocessed studies.
    pub data_dir: PathBuf,
    /// Receives `fold_{k}/` with checkpoints and the training log.
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            epochs: 150,
            optimizer: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            augment: AugmentPolicy::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            preprocess: PreprocessConfig::default(),
            data_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::validation("learning rate must be > 0"));
        }
        if self.folds < 2 {
            return Err(Error::validation("folds must be >= 2"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        self.augment.validate()?;
        self.network.validate()?;
        self.preprocess.validate()?;
        let m = self.network.size_multiple();
        if self.preprocess.target_size % m != 0 {
            return Err(Error::validation(format!(
                "image size {} is not divisible by {m} as the network depth requires",
                self.preprocess.target_size
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.output_dir.join(format!("fold_{fold}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub history: Vec<EpochStats>,
    pub selected_epoch: usize,
    /// The selected (`best.ckpt`) checkpoint.
    pub checkpoint: PathBuf,
}

/// Shuffles subject ids with `seed` and deals them into `k` folds whose
/// sizes differ by at most one (larger folds first).
pub fn split_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 1 {
        return Err(Error::validation("fold count must be >= 1"));
    }
    if subject_ids.len() < k {
        return Err(Error::validation(format!(
            "{} subjects cannot fill {k} folds",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut it = ids.into_iter();
    for f in 0..k {
        let n = base + usize::from(f < extra);
        out.push(it.by_ref().take(n).collect());
    }
    Ok(out)
}

/// Index of the smallest loss; the earliest wins ties.
pub fn select_checkpoint(history: &[f64]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::validation("empty validation history"));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best] || (history[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    Ok(best)
}

/// One training sample: a short-axis slice of one phase of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub subject: usize,
    pub phase: Phase,
    pub slice: usize,
}

/// Every sample of the given subjects, in dataset order.
pub fn enumerate_samples(data: &[PreprocessedStudy], subjects: &[usize]) -> Vec<SampleRef> {
    let mut out = Vec::new();
    for &subject in subjects {
        for phase in Phase::ALL {
            for slice in 0..data[subject].slices(phase) {
                out.push(SampleRef { subject, phase, slice });
            }
        }
    }
    out
}

/// The labeled SA slice and LA slice of one sample.
pub fn sample_slices(data: &[PreprocessedStudy], s: SampleRef) -> Result<(LabeledSlice, LabeledSlice)> {
    let study = &data[s.subject];
    let phase = study.phase(s.phase);
    let get = |view: View| -> Result<LabeledSlice> {
        let v = phase.view(view);
        let labels = v.labels.as_ref().ok_or_else(|| {
            Error::validation(format!("subject {} has no {} labels", study.subject_id, view.as_str()))
        })?;
        LabeledSlice::new(
            v.image.rows(),
            v.image.cols(),
            v.image.slice(s.slice).to_vec(),
            labels.slice(s.slice).to_vec(),
        )
    };
    Ok((get(View::Sa)?, get(View::La)?))
}

/// Network inputs and targets for a list of slice pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sa: Tensor<f32>,
    pub la: Tensor<f32>,
    pub sa_labels: LabelBatch,
    pub la_labels: LabelBatch,
}

impl Batch {
    pub fn from_pairs(pairs: &[(LabeledSlice, LabeledSlice)]) -> Result<Self> {
        let first = &pairs.first().ok_or_else(|| Error::validation("empty batch"))?.0;
        let (h, w) = (first.rows, first.cols);
        let b = pairs.len();
        let mut sa = Vec::with_capacity(b * h * w);
        let mut la = Vec::with_capacity(b * h * w);
        let mut sl = Vec::with_capacity(b * h * w);
        let mut ll = Vec::with_capacity(b * h * w);
        for (s, l) in pairs {
            if (s.rows, s.cols, l.rows, l.cols) != (h, w, h, w) {
                return Err(Error::validation("batch slices differ in shape"));
            }
            sa.extend_from_slice(&s.image);
            la.extend_from_slice(&l.image);
            sl.extend_from_slice(&s.labels);
            ll.extend_from_slice(&l.labels);
        }
        Ok(Self {
            sa: Tensor::from_nchw([b, 1, h, w], &sa),
            la: Tensor::from_nchw([b, 1, h, w], &la),
            sa_labels: LabelBatch::new(b, h, w, sl)?,
            la_labels: LabelBatch::new(b, h, w, ll)?,
        })
    }
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(params: &mut ParameterSet<f32>, adam: &mut Adam, batch: &Batch, loss: &LossConfig) -> Result<f64> {
    let (outputs, cache) = params.forward_train(&batch.sa, &batch.la)?;
    let (breakdown, grads) = total_loss_with_grad(&outputs, &batch.sa_labels, &batch.la_labels, loss)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("training loss became {}", breakdown.total)));
    }
    params.zero_grad();
    params.backward(&cache, &grads)?;
    adam.step(params);
    params.update_running_stats(&cache);
    if !params.all_finite() {
        return Err(Error::Numerical("non-finite parameter after update".into()));
    }
    Ok(breakdown.total)
}

/// Mean eval-mode loss over individual samples.
pub fn evaluate_loss(
    params: &ParameterSet<f32>,
    data: &[PreprocessedStudy],
    samples: &[SampleRef],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("no validation samples"));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let pairs = chunk.iter().map(|&s| sample_slices(data, s)).collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_pairs(&pairs)?;
        let out = params.forward(&batch.sa, &batch.la, Mode::Eval)?;
        for b in 0..chunk.len() {
            let single = crate::network::NetworkOutputs {
                sa: crate::network::BranchOutputs {
                    heads: out.sa.heads.iter().map(|t| t.sample(b)).collect(),
                },
                la: crate::network::BranchOutputs {
                    heads: out.la.heads.iter().map(|t| t.sample(b)).collect(),
                },
            };
            let (h, w) = (batch.sa.height(), batch.sa.width());
            let sl = LabelBatch::new(1, h, w, batch.sa_labels.sample(b).to_vec())?;
            let ll = LabelBatch::new(1, h, w, batch.la_labels.sample(b).to_vec())?;
            sum += total_loss(&single, &sl, &ll, loss)?.total;
        }
    }
    let mean = sum / samples.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical(format!("validation loss became {mean}")));
    }
    Ok(mean)
}

/// Subject indices of the training and validation part of `fold`.
pub fn fold_subjects(data: &[PreprocessedStudy], folds: usize, seed: u64, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= folds {
        return Err(Error::validation(format!("fold {fold} out of range 0..{folds}")));
    }
    let ids: Vec<String> = data.iter().map(|s| s.subject_id.clone()).collect();
    let split = split_folds(&ids, folds, seed)?;
    let index_of = |id: &String| ids.iter().position(|x| x == id).expect("id from data");
    let val: Vec<usize> = split[fold].iter().map(index_of).collect();
    let mut train: Vec<usize> = (0..data.len()).filter(|i| !val.contains(i)).collect();
    train.sort_unstable();
    Ok((train, val))
}

/// Trains one fold; see [`train_fold_observed`].
pub fn train_fold(config: &TrainConfig, fold: usize, data: &[PreprocessedStudy]) -> Result<FoldResult> {
    train_fold_observed(config, fold, data, |_| {})
}

/// Trains one fold, calling `observe` with the samples of every training
/// batch before it is used.
pub fn train_fold_observed(
    config: &TrainConfig,
    fold: usize,
    data: &[PreprocessedStudy],
    mut observe: impl FnMut(&[SampleRef]),
) -> Result<FoldResult> {
    config.validate()?;
    let ids: Vec<&str> = data.iter().map(|s| s.subject_id.as_str()).collect();
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(Error::validation(format!("duplicate subject {id} in training data")));
        }
    }
    let size = config.preprocess.target_size;
    if let Some(s) = data.iter().find(|s| s.ed.sa.image.rows() != size || s.ed.sa.image.cols() != size) {
        return Err(Error::validation(format!(
            "subject {} is {}x{} but the configuration expects {size}x{size}",
            s.subject_id,
            s.ed.sa.image.rows(),
            s.ed.sa.image.cols()
        )));
    }
    let (train_subjects, val_subjects) = fold_subjects(data, config.folds, config.seed, fold)?;
    let train_samples = enumerate_samples(data, &train_subjects);
    let val_samples = enumerate_samples(data, &val_subjects);
    if train_samples.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    let fold_seed = config.seed.wrapping_add(1_000_003 * fold as u64 + 1);
    let mut params = ParameterSet::<f32>::new_initialized(&config.network, fold_seed)?;
    let mut adam = Adam::new(config.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);

    let dir = config.fold_dir(fold);
    fs::create_dir_all(&dir)?;
    let mut log = fs::File::create(dir.join("log.csv"))?;
    writeln!(log, "epoch,train_loss,val_loss,seconds")?;

    let mut history: Vec<EpochStats> = Vec::with_capacity(config.epochs);
    let mut best: Option<usize> = None;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order = train_samples.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            observe(chunk);
            let mut pairs = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let (sa, la) = sample_slices(data, s)?;
                pairs.push(augment_pair(&sa, &la, &config.augment, &mut rng)?);
            }
            let batch = Batch::from_pairs(&pairs)?;
            let loss = train_step(&mut params, &mut adam, &batch, &config.loss)?;
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = sum / seen as f64;
        let val_loss = if val_samples.is_empty() {
            train_loss
        } else {
            evaluate_loss(&params, data, &val_samples, config.batch_size, &config.loss)?
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{},{},{},{:.3}", epoch, train_loss, val_loss, stats.seconds)?;
        log::info!("fold {fold} epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.push(stats);

        let meta = CheckpointMeta {
            network: config.network.clone(),
            preprocess: config.preprocess,
            seed: config.seed,
            fold,
            epoch,
            train_loss,
            val_loss,
            num_parameters: params.num_parameters(),
        };
        save_checkpoint(dir.join("last.ckpt"), &params, &meta)?;
        let vals: Vec<f64> = history.iter().map(|h| h.val_loss).collect();
        let selected = select_checkpoint(&vals)?;
        if best != Some(selected) {
            save_checkpoint(dir.join("best.ckpt"), &params, &meta)?;
            best = Some(selected);
        }
    }
    let vals: Vec<f64> = history.iter().map(|h| h.val_loss).collect();
    Ok(FoldResult {
        fold,
        selected_epoch: select_checkpoint(&vals)?,
        history,
        checkpoint: dir.join("best.ckpt"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn fold_sizes() {
        let f = split_folds(&ids(160), 5, 1).unwrap();
        assert!(f.iter().all(|x| x.len() == 32));
        let f = split_folds(&ids(7), 5, 1).unwrap();
        assert_eq!(f.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1, 1, 1]);
        assert!(matches!(split_folds(&ids(3), 5, 1), Err(Error::Validation(_))));
        assert_eq!(split_folds(&ids(20), 5, 9).unwrap(), split_folds(&ids(20), 5, 9).unwrap());
        assert_ne!(split_folds(&ids(20), 5, 9).unwrap(), split_folds(&ids(20), 5, 10).unwrap());
    }

    #[test]
    fn selection_rule() {
        assert_eq!(select_checkpoint(&[0.5, 0.3, 0.4]).unwrap(), 1);
        assert_eq!(select_checkpoint(&[0.3, 0.3]).unwrap(), 0);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first update is lr·sign(g)
        let cfg = NetworkConfig::with_filters(&[2, 2]);
        let mut p = ParameterSet::<f64>::new_initialized(&cfg, 0).unwrap();
        let before: Vec<Vec<f64>> = p.params().iter().map(|q| q.value.clone()).collect();
        for q in p.params_mut() {
            for (i, g) in q.grad.iter_mut().enumerate() {
                *g = if i % 2 == 0 { 3.0 } else { -0.5 };
            }
        }
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p);
        for (q, b) in p.params().iter().zip(&before) {
            for (i, (v, v0)) in q.value.iter().zip(b).enumerate() {
                let expect = if i % 2 == 0 { -1e-4 } else { 1e-4 };
                assert!((v - v0 - expect).abs() < 1e-9);
            }
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "network": {"filters": [4, 8, 16, 32], "levels": 4}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.optimizer.learning_rate, 1e-4);
        assert_eq!(cfg.batch_size, 8);
        cfg.validate().unwrap();
        let bad = TrainConfig { folds: 1, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_subjects(n in 5usize..60, k in 2usize..6, seed in any::<u64>()) {
            let all = ids(n);
            let f = split_folds(&all, k, seed).unwrap();
            prop_assert_eq!(f.len(), k);
            let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut flat: Vec<String> = f.concat();
            flat.sort();
            prop_assert_eq!(flat, all);
        }

        #[test]
        fn selection_matches_scan(h in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = h.iter().position(|&v| v == min).unwrap();
            prop_assert_eq!(select_checkpoint(&h).unwrap(), expect);
        }
    }
}
