//! Image classification: conv backbone with a dense head, two-phase
//! (warm-up then fine-tune) training, evaluation and paired comparison.

mod metrics;
mod stats;

pub use metrics::{
    evaluate, evaluate_excluding, fold_macro_f1, roc_auc, ClassMetrics, EvaluationReport, FoldMacroF1, RocCurve,
};
pub use stats::{wilcoxon_signed_rank, WilcoxonResult};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment, AugmentationConfig, PairedSample};
use crate::autodiff::{
    cross_entropy_loss, optimizer_step, Activation, Architecture, GraphBuilder, LayerSpec, Mode, Network,
    OptimizerKind, OptimizerState, PlateauSchedule,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::derive_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Flatten,
    GlobalAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub input_size: usize,
    /// Output channels of each conv-ReLU-maxpool block.
    pub channels: Vec<usize>,
    /// Inserts batch normalisation between each backbone conv and its ReLU.
    pub backbone_batch_norm: bool,
    pub pooling: Pooling,
    pub head: Vec<usize>,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_size: 64,
            channels: vec![8, 16, 32],
            backbone_batch_norm: false,
            pooling: Pooling::Flatten,
            head: vec![1024, 1024, 512],
            dropout_rate: 0.5,
            bn_momentum: 0.99,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("backbone needs at least one block with non-zero channels"));
        }
        let reduction = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % reduction != 0 {
            return Err(Error::config(format!(
                "input_size {} is not divisible by 2^{} (one pooling per block)",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.head.contains(&0) {
            return Err(Error::config("head layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config(format!("bn_momentum {} outside [0, 1)", self.bn_momentum)));
        }
        Ok(())
    }
}

fn bn(channels: usize, momentum: f64) -> LayerSpec {
    LayerSpec::BatchNorm {
        channels,
        epsilon: 1e-5,
        momentum,
    }
}

/// Builds the classifier graph. `classes` become the `"classes"` metadata
/// entry; their count is the softmax width.
pub fn build_classifier(config: &ClassifierConfig, classes: &[String]) -> Result<Architecture> {
    config.validate()?;
    if classes.len() < 2 {
        return Err(Error::config(format!("a classifier needs at least 2 classes, got {}", classes.len())));
    }
    let s = config.input_size;
    let mut b = GraphBuilder::new(&[1, s, s]);
    let mut x = b.input();
    let mut in_ch = 1;
    b.set_freezable(true);
    for (i, &ch) in config.channels.iter().enumerate() {
        x = b.then(
            format!("block{i}.conv"),
            LayerSpec::Conv2d {
                in_ch,
                out_ch: ch,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: !config.backbone_batch_norm,
            },
            x,
        )?;
        if config.backbone_batch_norm {
            x = b.then(format!("block{i}.bn"), bn(ch, config.bn_momentum), x)?;
        }
        x = b.then(format!("block{i}.relu"), LayerSpec::relu(), x)?;
        x = b.then(format!("block{i}.pool"), LayerSpec::MaxPool2d { window: 2 }, x)?;
        in_ch = ch;
    }
    b.set_freezable(false);
    x = match config.pooling {
        Pooling::Flatten => b.then("flatten", LayerSpec::Flatten, x)?,
        Pooling::GlobalAverage => b.then("gap", LayerSpec::GlobalAvgPool, x)?,
    };
    let mut width = b.shape(x)[0];
    for (i, &units) in config.head.iter().enumerate() {
        x = b.then(format!("fc{i}"), LayerSpec::Dense { inputs: width, outputs: units }, x)?;
        x = b.then(format!("fc{i}.relu"), LayerSpec::relu(), x)?;
        x = b.then(format!("fc{i}.dropout"), LayerSpec::Dropout { rate: config.dropout_rate }, x)?;
        x = b.then(format!("fc{i}.bn"), bn(units, config.bn_momentum), x)?;
        width = units;
    }
    x = b.then("logits", LayerSpec::Dense { inputs: width, outputs: classes.len() }, x)?;
    b.then("softmax", LayerSpec::Activation { kind: Activation::Softmax }, x)?;
    b.meta("kind", "classifier".into());
    b.meta("classes", serde_json::to_value(classes)?);
    b.meta("config", serde_json::to_value(config)?);
    Ok(b.finish())
}

/// Class names stored in a classifier's metadata.
pub fn class_names<T: crate::tensor::Real>(model: &Network<T>) -> Result<Vec<String>> {
    let v = model
        .architecture()
        .meta
        .get("classes")
        .ok_or_else(|| Error::Integration("model carries no class list".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Finetune,
}

impl Phase {
    fn purpose(self) -> &'static str {
        match self {
            Phase::Warmup => "classifier-warmup",
            Phase::Finetune => "classifier-finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub plateau: PlateauSchedule,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            warmup_epochs: 50,
            warmup_lr: 0.001,
            finetune_epochs: 100,
            finetune_lr: 0.0001,
            batch_size: 40,
            optimizer: OptimizerKind::adam(),
            plateau: PlateauSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("warmup_lr", self.warmup_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} = {lr} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    fn phase(&self, phase: Phase) -> (usize, f64) {
        match phase {
            Phase::Warmup => (self.warmup_epochs, self.warmup_lr),
            Phase::Finetune => (self.finetune_epochs, self.finetune_lr),
        }
    }
}

/// An image with its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

fn one_hot(labels: &[usize], k: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_data(net: &Network<f32>, data: &[LabeledImage], k: usize, what: &str) -> Result<()> {
    let want = net.input_shape();
    for (i, s) in data.iter().enumerate() {
        if s.label >= k {
            return Err(Error::arg(format!("{what} sample {i} has label {} but the model has {k} classes", s.label)));
        }
        if [1, s.image.height(), s.image.width()] != want {
            return Err(Error::arg(format!(
                "{what} sample {i} is {}x{}, model expects {want:?}",
                s.image.width(),
                s.image.height()
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn evaluate_loss(net: &Network<f32>, data: &[LabeledImage], batch_size: usize) -> Result<(f64, f64)> {
    let k = *net.output_shape().last().unwrap_or(&0);
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let x = Image::batch(chunk.iter().map(|s| &s.image))?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let y = net.predict(&x)?;
        let (l, _) = cross_entropy_loss(&y, &one_hot(&labels, k))?;
        loss += l as f64 * chunk.len() as f64;
        correct += labels.iter().enumerate().filter(|&(i, &t)| argmax(y.item(i)) == t).count();
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Runs one training phase. Randomness comes from the schedule seed and
/// the phase name, so a phase is reproducible on its own.
pub fn train_phase(
    mut net: Network<f32>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    schedule: &TrainSchedule,
    phase: Phase,
    aug: &AugmentationConfig,
) -> Result<(Network<f32>, Vec<PhaseRecord>)> {
    schedule.validate()?;
    aug.validate()?;
    let k = *net.output_shape().last().unwrap_or(&0);
    check_data(&net, train, k, "training")?;
    check_data(&net, val, k, "validation")?;
    if train.is_empty() {
        return Err(Error::arg("classifier training set is empty"));
    }
    let (epochs, lr) = schedule.phase(phase);
    let mut rng = derive_rng(schedule.seed, phase.purpose());
    net.set_frozen(phase == Phase::Warmup);
    let mut opt = OptimizerState::new(schedule.optimizer, lr)?;
    let mut plateau = schedule.plateau.clone();
    plateau.reset();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Network<f32>)> = None;

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(schedule.batch_size) {
            let mut images = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = PairedSample::new(train[i].image.clone(), None)?;
                images.push(augment(&s, aug, &mut rng)?.image);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let x = Image::batch(&images)?;
            let (y, mut tape) = net.forward(&x, Mode::Train, &mut rng)?;
            let (loss, grad) = cross_entropy_loss(&y, &one_hot(&labels, k))?;
            let grads = tape.backward(&net, &grad)?;
            optimizer_step(&mut net, &grads, &mut opt)?;
            sum += loss as f64 * idx.len() as f64;
            correct += labels.iter().enumerate().filter(|&(i, &t)| argmax(y.item(i)) == t).count();
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_loss(&net, val, schedule.batch_size)?;
            (Some(l), Some(a))
        };
        let train_loss = sum / train.len() as f64;
        history.push(PhaseRecord {
            phase,
            epoch,
            learning_rate: opt.learning_rate,
            train_loss,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        let monitored = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            best = Some((monitored, net.clone()));
        }
        opt.learning_rate = plateau.update(opt.learning_rate, monitored);
    }
    let mut out = best.map(|(_, n)| n).unwrap_or(net);
    out.set_frozen(false);
    Ok((out, history))
}

/// Warm-up with the backbone convolutions frozen, then fine-tuning of every
/// layer at the lower learning rate. Each phase keeps its best-monitored
/// weights.
pub fn train_two_phase(
    net: Network<f32>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    schedule: &TrainSchedule,
    aug: &AugmentationConfig,
) -> Result<(Network<f32>, Vec<PhaseRecord>)> {
    let k = *net.output_shape().last().unwrap_or(&0);
    let mut counts = vec![0usize; k];
    for s in train {
        if let Some(c) = counts.get_mut(s.label) {
            *c += 1;
        }
    }
    if counts.contains(&0) {
        let names = class_names(&net).unwrap_or_else(|_| (0..k).map(|i| i.to_string()).collect());
        let missing: Vec<&str> = counts
            .iter()
            .zip(&names)
            .filter(|(c, _)| **c == 0)
            .map(|(_, n)| n.as_str())
            .collect();
        return Err(Error::arg(format!("training data has no samples of class {}", missing.join(", "))));
    }
    let (net, mut history) = train_phase(net, train, val, schedule, Phase::Warmup, aug)?;
    let (net, fine) = train_phase(net, train, val, schedule, Phase::Finetune, aug)?;
    history.extend(fine);
    Ok((net, history))
}

/// Class probabilities for one preprocessed image.
pub fn predict_proba(model: &Network<f32>, image: &Image) -> Result<Vec<f32>> {
    let want = model.input_shape();
    if [1, image.height(), image.width()] != want {
        return Err(Error::arg(format!(
            "image is {}x{}, model expects {want:?}",
            image.width(),
            image.height()
        )));
    }
    Ok(model.predict(&image.to_tensor())?.into_data())
}

/// Probabilities for many images, evaluated in batches.
pub fn predict_proba_batch(model: &Network<f32>, images: &[Image], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        for img in chunk {
            if [1, img.height(), img.width()] != model.input_shape() {
                return Err(Error::arg(format!(
                    "image is {}x{}, model expects {:?}",
                    img.width(),
                    img.height(),
                    model.input_shape()
                )));
            }
        }
        let y = model.predict(&Image::batch(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| y.item(i).to_vec()));
    }
    Ok(out)
}

pub fn predict_label(model: &Network<f32>, image: &Image) -> Result<usize> {
    Ok(argmax(&predict_proba(model, image)?))
}

/// Index of the largest entry (first on ties).
pub fn arg_max(probabilities: &[f32]) -> usize {
    argmax(probabilities)
}

/// Draws a random architecture-compatible network; handy for callers that
/// only have a seed.
pub fn init_classifier(config: &ClassifierConfig, classes: &[String], seed: u64) -> Result<Network<f32>> {
    let mut rng = derive_rng(seed, "classifier-init");
    Network::new(build_classifier(config, classes)?, &mut rng)
}
