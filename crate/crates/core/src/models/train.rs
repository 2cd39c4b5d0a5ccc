//! Training loops: Adam, the SSIM reconstruction loss, early stopping
//! with best-checkpoint retention, and (stratified) k-fold CV.
//!
//! Determinism contract: a fixed `TrainConfig::seed` fixes weight init,
//! fold assignment, epoch shuffles, and augmentation draws, so reruns
//! produce identical loss traces. Fold f draws its streams from
//! `seed + f`-style derived seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{augment, minmax_normalized, AugmentConfig, Group, Volume};
use crate::seed::derive;
use crate::tensor::{NodeId, Tape, Tensor};

use super::nets::{Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec, Encoder, Head};
use super::{
    classification_metrics, reconstruction_metrics, ClassifFold, ClassifReport, LogitModel,
    ReconFold, ReconReport, Result, TrainError,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs (`lr` for the
    /// first `every` epochs, `lr*factor` for the next, ...).
    StepDecay { factor: f32, every: usize },
}

impl LrSchedule {
    pub fn rate(&self, base: f32, epoch: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => {
                base * factor.powi((epoch / every) as i32)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Keep the pretrained encoder fixed; train the head only.
    Freeze,
    /// Fine-tune the pretrained encoder together with the head.
    Unfreeze,
    /// Re-initialize and train everything jointly.
    Full,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Freeze => "freeze",
            Strategy::Unfreeze => "unfreeze",
            Strategy::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_schedule: LrSchedule,
    pub strategy: Strategy,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// 1 trains and validates on the full set; >= 2 runs k-fold CV.
    pub folds: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            max_epochs: 200,
            early_stop_patience: 10,
            lr_schedule: LrSchedule::Constant,
            strategy: Strategy::Full,
            seed: 0,
            augment: None,
            folds: 5,
            batch_size: 2,
        }
    }
}

impl TrainConfig {
    fn validate(&self, n_samples: usize) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig("learning rate must be >= 0".into()));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, patience and batch size must be >= 1".into(),
            ));
        }
        if self.folds == 0 || (self.folds > 1 && self.folds > n_samples) {
            return Err(TrainError::InvalidConfig(format!(
                "{} folds for {n_samples} samples",
                self.folds
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction; state laid out parallel to the parameter
/// list passed to `step`.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>], lr: f32) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// SSIM constants for data in `[0, 1]`: `(0.01 L)^2` and `(0.03 L)^2`.
pub const SSIM_C1: f32 = 1e-4;
pub const SSIM_C2: f32 = 9e-4;

/// Builds global (non-windowed) SSIM between a tape node and a constant
/// target on the tape, using population statistics.
pub fn ssim_node(
    tape: &mut Tape,
    x: NodeId,
    target: &Tensor,
    c1: f32,
    c2: f32,
) -> crate::tensor::Result<NodeId> {
    let n = target.numel();
    let muy: f64 = target.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let yc: Vec<f32> = target.data().iter().map(|&v| (v as f64 - muy) as f32).collect();
    let sigy2: f64 = yc.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;

    let mux = tape.mean(x);
    let xc = tape.sub(x, mux)?;
    let xc2 = tape.mul(xc, xc)?;
    let sigx2 = tape.mean(xc2);
    let yc_leaf = tape.leaf(Tensor::new(target.shape().to_vec(), yc)?);
    let xy = tape.mul(xc, yc_leaf)?;
    let sigxy = tape.mean(xy);

    let t1 = tape.scale(mux, 2.0 * muy as f32); // 2 mu_x mu_y
    let c1_leaf = tape.scalar(c1);
    let num1 = tape.add(t1, c1_leaf)?;
    let t2 = tape.scale(sigxy, 2.0);
    let c2_leaf = tape.scalar(c2);
    let num2 = tape.add(t2, c2_leaf)?;
    let num = tape.mul(num1, num2)?;

    let mux2 = tape.mul(mux, mux)?;
    let muy2c1 = tape.scalar((muy * muy) as f32 + c1);
    let den1 = tape.add(mux2, muy2c1)?;
    let sigy2c2 = tape.scalar(sigy2 as f32 + c2);
    let den2 = tape.add(sigx2, sigy2c2)?;
    let den = tape.mul(den1, den2)?;
    tape.div(num, den)
}

/// Reconstruction loss `1 - SSIM(x, target)`.
pub fn ssim_loss_node(
    tape: &mut Tape,
    x: NodeId,
    target: &Tensor,
) -> crate::tensor::Result<NodeId> {
    let s = ssim_node(tape, x, target, SSIM_C1, SSIM_C2)?;
    let one = tape.scalar(1.0);
    tape.sub(one, s)
}

/// One forward pass; returns the requested class logit.
pub fn logit_value<M: LogitModel>(
    model: &M,
    x: &Tensor,
    class: usize,
) -> crate::tensor::Result<f32> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let logits = model.build_logits(&mut tape, xid)?;
    let v = tape.value(logits);
    if class >= v.numel() {
        return Err(crate::tensor::TensorError::InvalidArg(format!(
            "class {class} out of range for {} logits",
            v.numel()
        )));
    }
    Ok(v.data()[class])
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Validation index sets per fold (round-robin over a seeded shuffle).
fn kfold(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    if folds <= 1 {
        return vec![(0..n).collect()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(n, &mut rng);
    let mut out = vec![Vec::new(); folds];
    for (pos, idx) in order.into_iter().enumerate() {
        out[pos % folds].push(idx);
    }
    out
}

/// Stratified variant: round-robin within each class.
fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    if folds <= 1 {
        return vec![(0..labels.len()).collect()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    for class in 0..=1usize {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let order = shuffled(members.len(), &mut rng);
        for (pos, &oi) in order.iter().enumerate() {
            out[pos % folds].push(members[oi]);
        }
    }
    for fold in &mut out {
        fold.sort_unstable();
    }
    out
}

fn snapshot(params: &[&Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| (*p).clone()).collect()
}

fn restore(params: &mut [&mut Tensor], snap: &[Tensor]) {
    for (p, s) in params.iter_mut().zip(snap) {
        **p = s.clone();
    }
}

/// Per-epoch loss rows for plotting; `fold` then `epoch` are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTraceRow {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
}

pub fn trace_to_csv(rows: &[EpochTraceRow]) -> String {
    let mut out = String::from("fold,epoch,train_loss,val_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.fold, r.epoch, r.train_loss, r.val_loss
        ));
    }
    out
}

fn prepared_inputs(volumes: &[Volume]) -> Vec<Volume> {
    volumes
        .iter()
        .map(|v| Volume {
            header: v.header.clone(),
            voxels: minmax_normalized(&v.voxels),
        })
        .collect()
}

fn maybe_augmented(v: &Volume, cfg: &TrainConfig, fold: usize, epoch: usize, idx: usize) -> Volume {
    match &cfg.augment {
        Some(aug) => augment(
            v,
            aug,
            derive(
                cfg.seed,
                "augment",
                ((fold as u64) << 40) ^ ((epoch as u64) << 20) ^ idx as u64,
            ),
        ),
        None => v.clone(),
    }
}

/// Unsupervised reconstruction training under `1 - SSIM`, k-fold CV with
/// early stopping and best-validation weight retention. Inputs are
/// min-max normalized to `[0, 1]` before training (the SSIM constants
/// assume unit dynamic range). Returns the best-validation fold's model,
/// the per-fold report, and the loss trace.
pub fn train_unsupervised(
    volumes: &[Volume],
    spec: &AutoencoderSpec,
    cfg: &TrainConfig,
) -> Result<(Autoencoder, ReconReport, Vec<EpochTraceRow>)> {
    if volumes.is_empty() {
        return Err(TrainError::InvalidConfig("empty cohort".into()));
    }
    cfg.validate(volumes.len())?;
    spec.validate()?;
    let data = prepared_inputs(volumes);
    let folds = kfold(data.len(), cfg.folds, derive(cfg.seed, "unsup-folds", 0));

    let mut report = ReconReport::default();
    let mut trace = Vec::new();
    let mut best_model: Option<(f32, Autoencoder)> = None;

    for (fold, val_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = if cfg.folds <= 1 {
            (0..data.len()).collect()
        } else {
            (0..data.len()).filter(|i| !val_idx.contains(i)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, "ae-init", fold as u64));
        let mut model = Autoencoder::init(spec, &mut rng)?;
        let mut adam = Adam::new();
        let mut best_val = f32::INFINITY;
        let mut best_snap = snapshot(&model.params());
        let mut best_train = f32::NAN;
        let mut since_best = 0usize;

        for epoch in 0..cfg.max_epochs {
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch);
            let mut order_rng = ChaCha8Rng::seed_from_u64(derive(
                cfg.seed,
                "unsup-shuffle",
                ((fold as u64) << 32) ^ epoch as u64,
            ));
            let order = shuffled(train_idx.len(), &mut order_rng);
            let mut epoch_loss = 0.0f64;
            let mut seen = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let mut grads: Vec<Vec<f32>> = Vec::new();
                let mut batch_loss = 0.0f64;
                for &oi in chunk {
                    let idx = train_idx[oi];
                    let vol = maybe_augmented(&data[idx], cfg, fold, epoch, idx);
                    let input = vol.to_tensor();
                    let mut tape = Tape::new();
                    let x = tape.leaf(input.clone());
                    let (recon, ids) = model.forward(&mut tape, x)?;
                    let loss = ssim_loss_node(&mut tape, recon, &input)?;
                    let loss_v = tape.value(loss).data()[0];
                    if !loss_v.is_finite() {
                        return Err(TrainError::Diverged {
                            epoch,
                            loss: loss_v,
                        });
                    }
                    batch_loss += loss_v as f64;
                    tape.backward(loss, Tensor::scalar(1.0))?;
                    accumulate_grads(&tape, &ids, &mut grads, 1.0 / chunk.len() as f32);
                }
                if lr > 0.0 {
                    adam.step(&mut model.params_mut(), &grads, lr);
                }
                epoch_loss += batch_loss;
                seen += chunk.len();
            }
            let train_loss = (epoch_loss / seen.max(1) as f64) as f32;
            let mut val_loss = 0.0f64;
            for &vi in val_idx {
                let input = data[vi].to_tensor();
                let mut tape = Tape::new();
                let x = tape.leaf(input.clone());
                let (recon, _) = model.forward(&mut tape, x)?;
                let loss = ssim_loss_node(&mut tape, recon, &input)?;
                val_loss += tape.value(loss).data()[0] as f64;
            }
            let val_loss = (val_loss / val_idx.len().max(1) as f64) as f32;
            if !val_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    loss: val_loss,
                });
            }
            trace.push(EpochTraceRow {
                fold,
                epoch,
                train_loss,
                val_loss,
            });
            if val_loss < best_val {
                best_val = val_loss;
                best_snap = snapshot(&model.params());
                best_train = train_loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
        restore(&mut model.params_mut(), &best_snap);

        // Fold metrics on the retained-best weights over the validation set.
        let (mut rmse, mut mae, mut msm) = (0.0f64, 0.0f64, 0.0f64);
        for &vi in val_idx {
            let input = data[vi].to_tensor();
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let (recon, _) = model.forward(&mut tape, x)?;
            let (r, a, m) = reconstruction_metrics(input.data(), tape.value(recon).data())?;
            rmse += r as f64;
            mae += a as f64;
            msm += m as f64;
        }
        let n = val_idx.len().max(1) as f64;
        report.folds.push(ReconFold {
            fold,
            train_loss: best_train,
            val_loss: best_val,
            rmse: (rmse / n) as f32,
            mae: (mae / n) as f32,
            msm: (msm / n) as f32,
        });
        if best_model.as_ref().map_or(true, |(v, _)| best_val < *v) {
            best_model = Some((best_val, model));
        }
    }
    let (_, model) = best_model.expect("at least one fold");
    Ok((model, report, trace))
}

fn accumulate_grads(tape: &Tape, ids: &[NodeId], grads: &mut Vec<Vec<f32>>, scale: f32) {
    if grads.is_empty() {
        *grads = ids
            .iter()
            .map(|&id| vec![0.0; tape.value(id).numel()])
            .collect();
    }
    for (slot, &id) in grads.iter_mut().zip(ids) {
        if let Some(g) = tape.grad(id) {
            for (a, b) in slot.iter_mut().zip(g.data()) {
                *a += b * scale;
            }
        }
    }
}

/// Survival classifier training: sparse categorical cross-entropy,
/// stratified k-fold CV, freeze/unfreeze/full strategies. Inputs are
/// min-max normalized to `[0, 1]` first. Returns the best-accuracy
/// fold's model, the per-fold report, and the loss trace.
pub fn train_classifier(
    samples: &[(Volume, Group)],
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
    pretrained: Option<&Encoder>,
) -> Result<(Classifier, ClassifReport, Vec<EpochTraceRow>)> {
    if samples.is_empty() {
        return Err(TrainError::InvalidConfig("empty cohort".into()));
    }
    cfg.validate(samples.len())?;
    spec.validate()?;
    let labels: Vec<usize> = samples.iter().map(|(_, g)| g.class_index()).collect();
    if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(TrainError::SingleClass);
    }
    if cfg.strategy != Strategy::Full && pretrained.is_none() {
        return Err(TrainError::MissingPretrained(cfg.strategy.as_str()));
    }
    let volumes: Vec<Volume> = samples.iter().map(|(v, _)| v.clone()).collect();
    let data = prepared_inputs(&volumes);
    let folds = stratified_kfold(&labels, cfg.folds, derive(cfg.seed, "clf-folds", 0));

    let mut report = ClassifReport::default();
    let mut trace = Vec::new();
    let mut best_model: Option<(f32, f32, Classifier)> = None; // (acc, -val_loss) max

    for (fold, val_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = if cfg.folds <= 1 {
            (0..data.len()).collect()
        } else {
            (0..data.len()).filter(|i| !val_idx.contains(i)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, "clf-init", fold as u64));
        let encoder = match cfg.strategy {
            Strategy::Full => Encoder::init(spec.ae.channels, &mut rng),
            Strategy::Freeze | Strategy::Unfreeze => pretrained.unwrap().clone(),
        };
        let head = Head::init(spec, &mut rng);
        let mut model = Classifier::with_encoder(spec, encoder, head)?;
        let mut adam = Adam::new();
        let mut best_val = f32::INFINITY;
        let mut best_snap = snapshot(&all_params(&model));
        let mut best_train = f32::NAN;
        let mut since_best = 0usize;

        for epoch in 0..cfg.max_epochs {
            let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch);
            let mut order_rng = ChaCha8Rng::seed_from_u64(derive(
                cfg.seed,
                "clf-shuffle",
                ((fold as u64) << 32) ^ epoch as u64,
            ));
            let order = shuffled(train_idx.len(), &mut order_rng);
            let mut epoch_loss = 0.0f64;
            let mut seen = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let mut grads: Vec<Vec<f32>> = Vec::new();
                for &oi in chunk {
                    let idx = train_idx[oi];
                    let vol = maybe_augmented(&data[idx], cfg, fold, epoch, idx);
                    let mut tape = Tape::new();
                    let x = tape.leaf(vol.to_tensor());
                    let (logits, enc_ids, head_ids) = model.forward(&mut tape, x)?;
                    let loss = tape.cross_entropy_logits(logits, labels[idx])?;
                    let loss_v = tape.value(loss).data()[0];
                    if !loss_v.is_finite() {
                        return Err(TrainError::Diverged {
                            epoch,
                            loss: loss_v,
                        });
                    }
                    epoch_loss += loss_v as f64;
                    tape.backward(loss, Tensor::scalar(1.0))?;
                    let ids: Vec<NodeId> = match cfg.strategy {
                        Strategy::Freeze => head_ids,
                        _ => enc_ids.into_iter().chain(head_ids).collect(),
                    };
                    accumulate_grads(&tape, &ids, &mut grads, 1.0 / chunk.len() as f32);
                }
                if lr > 0.0 {
                    let mut params = trainable_params(&mut model, cfg.strategy);
                    adam.step(&mut params, &grads, lr);
                }
                seen += chunk.len();
            }
            let train_loss = (epoch_loss / seen.max(1) as f64) as f32;
            let mut val_loss = 0.0f64;
            for &vi in val_idx {
                let mut tape = Tape::new();
                let x = tape.leaf(data[vi].to_tensor());
                let (logits, _, _) = model.forward(&mut tape, x)?;
                let loss = tape.cross_entropy_logits(logits, labels[vi])?;
                val_loss += tape.value(loss).data()[0] as f64;
            }
            let val_loss = (val_loss / val_idx.len().max(1) as f64) as f32;
            if !val_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    loss: val_loss,
                });
            }
            trace.push(EpochTraceRow {
                fold,
                epoch,
                train_loss,
                val_loss,
            });
            if val_loss < best_val {
                best_val = val_loss;
                best_snap = snapshot(&all_params(&model));
                best_train = train_loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
        restore(&mut all_params_mut(&mut model), &best_snap);

        let mut preds = Vec::with_capacity(val_idx.len());
        let mut val_labels = Vec::with_capacity(val_idx.len());
        for &vi in val_idx {
            let mut tape = Tape::new();
            let x = tape.leaf(data[vi].to_tensor());
            let (logits, _, _) = model.forward(&mut tape, x)?;
            let l = tape.value(logits).data();
            preds.push(if l[1] > l[0] { 1 } else { 0 });
            val_labels.push(labels[vi]);
        }
        let metrics = classification_metrics(&val_labels, &preds)?;
        report.folds.push(ClassifFold {
            fold,
            train_loss: best_train,
            val_loss: best_val,
            metrics,
        });
        let better = match &best_model {
            None => true,
            Some((acc, vl, _)) => {
                metrics.accuracy > *acc || (metrics.accuracy == *acc && best_val < *vl)
            }
        };
        if better {
            best_model = Some((metrics.accuracy, best_val, model));
        }
    }
    let (_, _, model) = best_model.expect("at least one fold");
    Ok((model, report, trace))
}

fn all_params(model: &Classifier) -> Vec<&Tensor> {
    let mut p = model.encoder.params();
    p.extend(model.head.params());
    p
}

fn all_params_mut(model: &mut Classifier) -> Vec<&mut Tensor> {
    let mut p: Vec<&mut Tensor> = model.encoder.params_mut();
    p.extend(model.head.params_mut());
    p
}

fn trainable_params(model: &mut Classifier, strategy: Strategy) -> Vec<&mut Tensor> {
    match strategy {
        Strategy::Freeze => model.head.params_mut(),
        _ => all_params_mut(model),
    }
}
