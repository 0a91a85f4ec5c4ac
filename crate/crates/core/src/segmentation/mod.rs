//! Lung-field segmentation: U-Net construction, training, mask prediction,
//! post-processing, ROI cropping and overlap metrics.

mod metrics;
mod morphology;
mod roi;

pub use metrics::{mask_metrics, summarize, MaskMetrics, MetricSummary};
pub use morphology::{dilate, disk_offsets, erode, open, postprocess_mask, scaled_radius};
pub use roi::{crop_to_roi, scaled_roi_size, uncrop};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment, AugmentationConfig, PairedSample};
use crate::autodiff::{
    optimizer_step, soft_jaccard_loss, Activation, Architecture, GraphBuilder, LayerSpec, Mode, Network,
    OptimizerKind, OptimizerState, PlateauSchedule, Slot,
};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    TransposedConv,
    /// Nearest-neighbour ×2 followed by a 3×3 convolution.
    NearestConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub input_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub batchnorm: bool,
    pub bn_momentum: f64,
    pub upsampling: Upsampling,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("U-Net depth must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("U-Net base_channels must be positive"));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config(format!("bn_momentum {} not in [0, 1)", self.bn_momentum)));
        }
        Ok(())
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 64,
            depth: 3,
            base_channels: 8,
            dropout_rate: 0.1,
            batchnorm: true,
            bn_momentum: 0.99,
            upsampling: Upsampling::TransposedConv,
        }
    }
}

/// Encoder of `depth` blocks (conv-BN-ReLU-dropout-conv-BN-ReLU, then 2×2
/// max-pool), a bottleneck block, a mirrored decoder with skip
/// concatenations, and a 1×1 convolution with sigmoid output.
pub fn build_unet(config: &UNetConfig) -> Result<Architecture> {
    config.validate()?;

    let s = config.input_size;
    let mut b = GraphBuilder::new(&[1, s, s]);
    let block = |b: &mut GraphBuilder, name: &str, from: Slot, cin: usize, cout: usize| -> Result<Slot> {
        let mut x = from;
        for (i, ci) in [cin, cout].into_iter().enumerate() {
            let conv = LayerSpec::Conv2d {
                in_ch: ci,
                out_ch: cout,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: !config.batchnorm,
            };
            x = b.then(format!("{name}.conv{i}"), conv, x)?;
            if config.batchnorm {
                let bn = LayerSpec::BatchNorm {
                    channels: cout,
                    epsilon: 1e-5,
                    momentum: config.bn_momentum,
                };
                x = b.then(format!("{name}.bn{i}"), bn, x)?;
            }
            x = b.then(format!("{name}.relu{i}"), LayerSpec::relu(), x)?;
            if i == 0 && config.dropout_rate > 0.0 {
                x = b.then(
                    format!("{name}.drop"),
                    LayerSpec::Dropout {
                        rate: config.dropout_rate,
                    },
                    x,
                )?;
            }
        }
        Ok(x)
    };

    let c = config.base_channels;
    let mut skips = Vec::new();
    let mut x = b.input();
    let mut cin = 1;
    for level in 0..config.depth {
        let cout = c << level;
        x = block(&mut b, &format!("down{level}"), x, cin, cout)?;
        skips.push((x, cout));
        x = b.then(format!("down{level}.pool"), LayerSpec::MaxPool2d { window: 2 }, x)?;
        cin = cout;
    }
    let mut ch = c << config.depth;
    x = block(&mut b, "bottom", x, cin, ch)?;
    for level in (0..config.depth).rev() {
        let (skip, skip_ch) = skips[level];
        x = match config.upsampling {
            Upsampling::TransposedConv => b.then(
                format!("up{level}.deconv"),
                LayerSpec::ConvTranspose2d {
                    in_ch: ch,
                    out_ch: skip_ch,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                    bias: true,
                },
                x,
            )?,
            Upsampling::NearestConv => {
                let u = b.then(format!("up{level}.resize"), LayerSpec::Upsample { factor: 2 }, x)?;
                b.then(format!("up{level}.conv"), LayerSpec::conv(ch, skip_ch, 3), u)?
            }
        };
        let cat = b.add(format!("up{level}.cat"), LayerSpec::Concat, &[x, skip])?;
        x = block(&mut b, &format!("up{level}"), cat, 2 * skip_ch, skip_ch)?;
        ch = skip_ch;
    }
    let logits = b.then(
        "head",
        LayerSpec::Conv2d {
            in_ch: ch,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: true,
        },
        x,
    )?;
    b.then(
        "sigmoid",
        LayerSpec::Activation {
            kind: Activation::Sigmoid,
        },
        logits,
    )?;
    b.meta("kind", "unet".into());
    b.meta("config", serde_json::to_value(config)?);
    Ok(b.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub plateau: PlateauSchedule,
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.001,
            optimizer: OptimizerKind::adam(),
            plateau: PlateauSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub(crate) fn mask_batch<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<Tensor<f32>> {
    let imgs: Vec<Image> = masks.into_iter().map(BinaryMask::to_image).collect();
    Image::batch(&imgs)
}

/// Mean soft-Jaccard loss of `net` over `samples` in eval mode.
pub fn evaluate_loss(net: &Network<f32>, samples: &[PairedSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = Image::batch(chunk.iter().map(|s| &s.image))?;
        let t = mask_batch(chunk.iter().map(|s| s.mask.as_ref().expect("validated")))?;
        let y = net.predict(&x)?;
        let (loss, _) = soft_jaccard_loss(&y, &t)?;
        total += loss as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn check_samples(net: &Network<f32>, samples: &[PairedSample], what: &str) -> Result<()> {
    let want = net.input_shape();
    for (i, s) in samples.iter().enumerate() {
        if s.mask.is_none() {
            return Err(Error::arg(format!("{what} sample {i} has no mask")));
        }
        if [1, s.image.height(), s.image.width()] != want {
            return Err(Error::arg(format!(
                "{what} sample {i} is {}x{}, network expects {want:?}",
                s.image.width(),
                s.image.height()
            )));
        }
    }
    Ok(())
}

/// Trains `net` with the soft Jaccard loss and returns the weights with the
/// best monitored loss (validation when `val` is non-empty, training
/// otherwise) together with the per-epoch history.
pub fn train_segmenter<R: Rng + ?Sized>(
    mut net: Network<f32>,
    train: &[PairedSample],
    val: &[PairedSample],
    config: &SegTrainConfig,
    aug: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Network<f32>, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(Error::arg("segmentation training set is empty"));
    }
    config.validate()?;
    check_samples(&net, train, "training")?;
    check_samples(&net, val, "validation")?;
    aug.validate()?;

    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate)?;
    let mut plateau = config.plateau.clone();
    plateau.reset();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Network<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(idx.len());
            for &i in idx {
                batch.push(augment(&train[i], aug, rng)?);
            }
            let x = Image::batch(batch.iter().map(|s| &s.image))?;
            let t = mask_batch(batch.iter().map(|s| s.mask.as_ref().expect("validated")))?;
            let (y, mut tape) = net.forward(&x, Mode::Train, rng)?;
            let (loss, grad) = soft_jaccard_loss(&y, &t)?;
            let grads = tape.backward(&net, &grad)?;
            optimizer_step(&mut net, &grads, &mut opt)?;
            sum += loss as f64 * idx.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(&net, val, config.batch_size)?)
        };
        history.push(EpochRecord {
            epoch,
            learning_rate: opt.learning_rate,
            train_loss,
            val_loss,
        });
        let monitored = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            best = Some((monitored, net.clone()));
        }
        opt.learning_rate = plateau.update(opt.learning_rate, monitored);
    }
    Ok((best.map(|(_, n)| n).unwrap_or(net), history))
}

/// Sigmoid probability map for one image, resized to the network input.
pub fn predict_probability(model: &Network<f32>, image: &Image) -> Result<Image> {
    let shape = model.input_shape();
    let (h, w) = (shape[1], shape[2]);
    let x = image.resize(w, h).to_tensor();
    let y = model.predict(&x)?;
    if y.shape() != [1, 1, h, w] {
        return Err(Error::Integration(format!(
            "segmenter produced {:?} for a {w}x{h} input",
            y.shape()
        )));
    }
    Image::from_vec(w, h, y.into_data())
}

/// Thresholded mask at the network's resolution.
pub fn predict_mask(model: &Network<f32>, image: &Image, threshold: f32) -> Result<BinaryMask> {
    Ok(BinaryMask::threshold(&predict_probability(model, image)?, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> UNetConfig {
        UNetConfig {
            input_size: 16,
            depth: 1,
            base_channels: 4,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn output_matches_input_resolution() {
        let cfg = UNetConfig {
            input_size: 64,
            depth: 2,
            base_channels: 8,
            ..Default::default()
        };
        let arch = build_unet(&cfg).unwrap();
        let net = Network::<f32>::new(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.output_shape(), &[1, 64, 64]);
        let y = net.predict(&Tensor::zeros(&[2, 1, 64, 64])).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn invalid_configs() {
        let bad_depth = UNetConfig { depth: 0, ..small() };
        assert!(matches!(build_unet(&bad_depth), Err(Error::Config(_))));
        let bad_size = UNetConfig { input_size: 18, depth: 2, ..small() };
        assert!(matches!(build_unet(&bad_size), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let cfg = UNetConfig { input_size: 64, ..small() };
        let net = Network::<f32>::zeroed(build_unet(&cfg).unwrap()).unwrap();
        // 3×3 conv without bias: k²·cin·cout; batch norm: 2·c trainable
        let conv = |cin: usize, cout: usize| 9 * cin * cout;
        let bn = |c: usize| 2 * c;
        let down = conv(1, 4) + bn(4) + conv(4, 4) + bn(4);
        let bottom = conv(4, 8) + bn(8) + conv(8, 8) + bn(8);
        let deconv = 2 * 2 * 8 * 4 + 4;
        let up = conv(8, 4) + bn(4) + conv(4, 4) + bn(4);
        let head = 4 + 1;
        assert_eq!(net.parameter_count(), down + bottom + deconv + up + head);
        assert_eq!(net.parameter_count(), 1677);
    }

    #[test]
    fn saturated_head_gives_full_mask() {
        let arch = build_unet(&small()).unwrap();
        let mut net = Network::<f32>::new(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in net.params_mut() {
            if p.name == "head.bias" {
                p.value.data_mut().fill(1e6);
            }
        }
        let img = Image::from_fn(16, 16, |x, _| x as f32 / 16.0);
        assert_eq!(predict_mask(&net, &img, 0.5).unwrap(), BinaryMask::full(16, 16));
        assert_eq!(predict_mask(&net, &img, 0.0).unwrap(), BinaryMask::full(16, 16));
    }

    #[test]
    fn zero_epochs_return_initial_model() {
        let arch = build_unet(&small()).unwrap();
        let net = Network::<f32>::new(arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mask = BinaryMask::from_fn(16, 16, |x, y| x > 3 && x < 12 && y > 4 && y < 10);
        let s = PairedSample::new(mask.to_image(), Some(mask)).unwrap();
        let cfg = SegTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, hist) = train_segmenter(
            net.clone(),
            &[s],
            &[],
            &cfg,
            &AugmentationConfig::disabled(),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert!(hist.is_empty());
        for (a, b) in out.params().iter().zip(net.params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(train_segmenter(
            net,
            &[],
            &[],
            &cfg,
            &AugmentationConfig::disabled(),
            &mut ChaCha8Rng::seed_from_u64(3)
        )
        .is_err());
    }

    fn overfit(unet: &UNetConfig, optimizer: OptimizerKind, lr: f64, epochs: usize) -> Vec<EpochRecord> {
        let arch = build_unet(unet).unwrap();
        let net = Network::<f32>::new(arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let n = unet.input_size;
        let c = (n as f32 - 1.0) / 2.0;
        let mask = BinaryMask::from_fn(n, n, |x, y| {
            let (dx, dy) = ((x as f32 - c) / n as f32, (y as f32 - c) / n as f32);
            dx * dx / 0.12 + dy * dy / 0.05 <= 1.0
        });
        let image = Image::from_fn(n, n, |x, y| if mask.get(x, y) { 0.8 } else { 0.1 });
        let s = PairedSample::new(image, Some(mask)).unwrap();
        let cfg = SegTrainConfig {
            epochs,
            batch_size: 1,
            learning_rate: lr,
            optimizer,
            ..Default::default()
        };
        let (_, hist) = train_segmenter(
            net,
            &[s],
            &[],
            &cfg,
            &AugmentationConfig::disabled(),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        hist
    }

    #[test]
    fn single_sample_is_memorized() {
        let hist = overfit(&UNetConfig::default(), OptimizerKind::adam(), 0.01, 50);
        let last = hist.last().unwrap().train_loss;
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn sgd_loss_decreases_over_first_epochs() {
        let hist = overfit(&small(), OptimizerKind::Sgd, 0.5, 5);
        for w in hist.windows(2) {
            assert!(w[1].train_loss < w[0].train_loss, "{hist:?}");
        }
    }
}
