//! Paired image/mask augmentation.
//!
//! Geometric transforms move the image with bilinear interpolation and the
//! mask with nearest-neighbour lookup, filling uncovered pixels with 0.
//! Pixel-valued limits (elastic `alpha`, `sigma`, `alpha_affine`) are given
//! at `reference_size` and rescaled to the working image size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub hflip_p: f64,
    pub shift_scale_rotate_p: f64,
    pub elastic_p: f64,
    pub brightness_p: f64,
    pub contrast_p: f64,
    pub gamma_p: f64,
    pub shift_limit: f64,
    pub scale_limit: f64,
    /// Degrees.
    pub rotate_limit: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub elastic_alpha_affine: f64,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    /// Exponent range in percent, e.g. `(80, 120)` for `0.8..=1.2`.
    pub gamma_limit: (f64, f64),
    pub reference_size: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl AugmentationConfig {
    pub fn segmentation() -> Self {
        AugmentationConfig {
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit: 45.0,
            elastic_sigma: 50.0,
            elastic_alpha_affine: 50.0,
            ..Self::classification()
        }
    }

    pub fn classification() -> Self {
        AugmentationConfig {
            hflip_p: 0.5,
            shift_scale_rotate_p: 0.5,
            elastic_p: 0.5,
            brightness_p: 0.5,
            contrast_p: 0.5,
            gamma_p: 0.5,
            shift_limit: 0.05,
            scale_limit: 0.05,
            rotate_limit: 15.0,
            elastic_alpha: 1.0,
            elastic_sigma: 20.0,
            elastic_alpha_affine: 20.0,
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            gamma_limit: (80.0, 120.0),
            reference_size: 400,
        }
    }

    /// Every probability set to 0.
    pub fn disabled() -> Self {
        Self::classification().with_probability(0.0)
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.hflip_p = p;
        self.shift_scale_rotate_p = p;
        self.elastic_p = p;
        self.brightness_p = p;
        self.contrast_p = p;
        self.gamma_p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("shift_scale_rotate_p", self.shift_scale_rotate_p),
            ("elastic_p", self.elastic_p),
            ("brightness_p", self.brightness_p),
            ("contrast_p", self.contrast_p),
            ("gamma_p", self.gamma_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        for (name, v) in [
            ("shift_limit", self.shift_limit),
            ("scale_limit", self.scale_limit),
            ("rotate_limit", self.rotate_limit),
            ("elastic_alpha", self.elastic_alpha),
            ("elastic_alpha_affine", self.elastic_alpha_affine),
            ("brightness_limit", self.brightness_limit),
            ("contrast_limit", self.contrast_limit),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(self.elastic_sigma > 0.0) {
            return Err(Error::config("elastic_sigma must be positive"));
        }
        let (lo, hi) = self.gamma_limit;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!("gamma_limit ({lo}, {hi}) must be a positive range")));
        }
        if self.reference_size == 0 {
            return Err(Error::config("reference_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub image: Image,
    pub mask: Option<BinaryMask>,
}

impl PairedSample {
    pub fn new(image: Image, mask: Option<BinaryMask>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dims() != image.dims() {
                return Err(Error::arg(format!(
                    "mask {:?} does not match image {:?}",
                    m.dims(),
                    image.dims()
                )));
            }
        }
        Ok(PairedSample { image, mask })
    }
}

/// Which transforms fired during one [`augment_traced`] call, in pipeline order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Applied {
    pub hflip: bool,
    pub shift_scale_rotate: bool,
    pub elastic: bool,
    pub brightness: bool,
    pub contrast: bool,
    pub gamma: bool,
}

impl Applied {
    pub fn as_array(&self) -> [bool; 6] {
        [
            self.hflip,
            self.shift_scale_rotate,
            self.elastic,
            self.brightness,
            self.contrast,
            self.gamma,
        ]
    }
}

pub fn horizontal_flip(sample: &PairedSample) -> PairedSample {
    PairedSample {
        image: sample.image.hflip(),
        mask: sample.mask.as_ref().map(BinaryMask::hflip),
    }
}

/// 2×3 affine map `[a b c; d e f]` from output coordinates to source
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine([f64; 6]);

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    /// Affine map sending each `from[i]` to `to[i]`.
    fn from_points(from: [(f64, f64); 3], to: [(f64, f64); 3]) -> Option<Affine> {
        let [(x0, y0), (x1, y1), (x2, y2)] = from;
        let det = x0 * (y1 - y2) - y0 * (x1 - x2) + (x1 * y2 - x2 * y1);
        if det.abs() < 1e-12 {
            return None;
        }
        // inverse of [[x0 y0 1],[x1 y1 1],[x2 y2 1]]
        let inv = [
            [(y1 - y2) / det, (y2 - y0) / det, (y0 - y1) / det],
            [(x2 - x1) / det, (x0 - x2) / det, (x1 - x0) / det],
            [
                (x1 * y2 - x2 * y1) / det,
                (x2 * y0 - x0 * y2) / det,
                (x0 * y1 - x1 * y0) / det,
            ],
        ];
        let solve = |t: [f64; 3]| -> [f64; 3] {
            [
                inv[0][0] * t[0] + inv[0][1] * t[1] + inv[0][2] * t[2],
                inv[1][0] * t[0] + inv[1][1] * t[1] + inv[1][2] * t[2],
                inv[2][0] * t[0] + inv[2][1] * t[1] + inv[2][2] * t[2],
            ]
        };
        let a = solve([to[0].0, to[1].0, to[2].0]);
        let b = solve([to[0].1, to[1].1, to[2].1]);
        Some(Affine([a[0], a[1], a[2], b[0], b[1], b[2]]))
    }
}

/// Resamples image and mask through a map from output to source coordinates.
fn warp(sample: &PairedSample, map: impl Fn(usize, usize) -> (f64, f64)) -> PairedSample {
    let (w, h) = sample.image.dims();
    let src = &sample.image;
    let image = Image::from_fn(w, h, |x, y| {
        let (u, v) = map(x, y);
        src.sample_bilinear(u, v, 0.0)
    });
    let mask = sample.mask.as_ref().map(|m| {
        BinaryMask::from_fn(w, h, |x, y| {
            let (u, v) = map(x, y);
            let (xi, yi) = ((u + 0.5).floor(), (v + 0.5).floor());
            xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 && m.get(xi as usize, yi as usize)
        })
    });
    PairedSample { image, mask }
}

/// Shifts by `shift` of the frame size along both axes, scales by `scale`
/// and rotates by `angle` degrees (counter-clockwise on screen) about the
/// pixel centre of the frame.
pub fn shift_scale_rotate(sample: &PairedSample, shift: (f64, f64), scale: f64, angle: f64) -> PairedSample {
    if shift == (0.0, 0.0) && scale == 1.0 && angle == 0.0 {
        return sample.clone();
    }
    let (w, h) = sample.image.dims();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (shift.0 * w as f64, shift.1 * h as f64);
    let (s, c) = angle.to_radians().sin_cos();
    // forward: p' = s·R(p − c) + c + t with R = [[c, s], [−s, c]]
    warp(sample, |x, y| {
        let dx = (x as f64 - cx - tx) / scale;
        let dy = (y as f64 - cy - ty) / scale;
        (c * dx - s * dy + cx, s * dx + c * dy + cy)
    })
}

/// Draws shift, scale and angle uniformly within the configured limits.
pub fn random_shift_scale_rotate<R: Rng + ?Sized>(
    sample: &PairedSample,
    config: &AugmentationConfig,
    rng: &mut R,
) -> PairedSample {
    let sym = |rng: &mut R, limit: f64| if limit > 0.0 { rng.random_range(-limit..=limit) } else { 0.0 };
    let dx = sym(rng, config.shift_limit);
    let dy = sym(rng, config.shift_limit);
    let scale = 1.0 + sym(rng, config.scale_limit);
    let angle = sym(rng, config.rotate_limit);
    shift_scale_rotate(sample, (dx, dy), scale, angle)
}

/// Separable Gaussian smoothing with reflected borders and a kernel
/// truncated at four standard deviations.
pub fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        if n == 1 {
            return 0;
        }
        let period = 2 * n;
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * data[y * w + reflect(x as i64 + k as i64 - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as i64 + k as i64 - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Random affine jitter of three reference points by up to `alpha_affine`
/// pixels, followed by a displacement field of Gaussian-smoothed uniform
/// noise scaled by `alpha`. Arguments are in working-resolution pixels.
pub fn elastic_transform<R: Rng + ?Sized>(
    sample: &PairedSample,
    alpha: f64,
    sigma: f64,
    alpha_affine: f64,
    rng: &mut R,
) -> Result<PairedSample> {
    if !(sigma > 0.0) {
        return Err(Error::arg(format!("elastic sigma {sigma} must be positive")));
    }
    let (w, h) = sample.image.dims();
    let mut out = sample.clone();

    if alpha_affine > 0.0 {
        let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
        let sq = (w.min(h) / 3) as f64;
        let pts = [(cx + sq, cy + sq), (cx + sq, cy - sq), (cx - sq, cy - sq)];
        let mut jittered = pts;
        for p in &mut jittered {
            p.0 += rng.random_range(-alpha_affine..=alpha_affine);
            p.1 += rng.random_range(-alpha_affine..=alpha_affine);
        }
        // sampling needs the map from warped positions back to the originals
        if let Some(inv) = Affine::from_points(jittered, pts) {
            out = warp(&out, |x, y| inv.apply(x as f64, y as f64));
        }
    }

    if alpha > 0.0 {
        let field = |rng: &mut R| -> Vec<f64> {
            let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            gaussian_blur(&noise, w, h, sigma).into_iter().map(|v| v * alpha).collect()
        };
        let dx = field(rng);
        let dy = field(rng);
        out = warp(&out, |x, y| {
            let i = y * w + x;
            (x as f64 + dx[i], y as f64 + dy[i])
        });
    }
    Ok(out)
}

/// Additive brightness, contrast about the image mean, then gamma; each step
/// clamps to `[0,1]`.
pub fn photometric(image: &Image, brightness_delta: f64, contrast_delta: f64, gamma: f64) -> Image {
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    let mut out = image.clone();
    if brightness_delta != 0.0 {
        out = out.map(|v| clamp(v + brightness_delta as f32));
    }
    if contrast_delta != 0.0 {
        let mean = out.mean();
        let k = 1.0 + contrast_delta as f32;
        out = out.map(|v| clamp(mean + (v - mean) * k));
    }
    if gamma != 1.0 {
        out = out.map(|v| clamp(v.powf(gamma as f32)));
    }
    out
}

pub fn augment<R: Rng + ?Sized>(sample: &PairedSample, config: &AugmentationConfig, rng: &mut R) -> Result<PairedSample> {
    Ok(augment_traced(sample, config, rng)?.0)
}

/// Runs the fixed pipeline (flip, shift-scale-rotate, elastic, brightness,
/// contrast, gamma), each step firing independently with its probability.
pub fn augment_traced<R: Rng + ?Sized>(
    sample: &PairedSample,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(PairedSample, Applied)> {
    config.validate()?;
    let mut fired = Applied::default();
    let mut s = sample.clone();
    let size = s.image.width().min(s.image.height()) as f64;
    let px = size / config.reference_size as f64;

    if rng.random_bool(config.hflip_p) {
        fired.hflip = true;
        s = horizontal_flip(&s);
    }
    if rng.random_bool(config.shift_scale_rotate_p) {
        fired.shift_scale_rotate = true;
        s = random_shift_scale_rotate(&s, config, rng);
    }
    if rng.random_bool(config.elastic_p) {
        fired.elastic = true;
        s = elastic_transform(
            &s,
            config.elastic_alpha * px,
            config.elastic_sigma * px,
            config.elastic_alpha_affine * px,
            rng,
        )?;
    }
    let sym = |rng: &mut R, limit: f64| if limit > 0.0 { rng.random_range(-limit..=limit) } else { 0.0 };
    let (mut b, mut c, mut g) = (0.0, 0.0, 1.0);
    if rng.random_bool(config.brightness_p) {
        fired.brightness = true;
        b = sym(rng, config.brightness_limit);
    }
    if rng.random_bool(config.contrast_p) {
        fired.contrast = true;
        c = sym(rng, config.contrast_limit);
    }
    if rng.random_bool(config.gamma_p) {
        fired.gamma = true;
        let (lo, hi) = config.gamma_limit;
        g = if hi > lo { rng.random_range(lo..=hi) } else { lo } / 100.0;
    }
    s.image = photometric(&s.image, b, c, g);
    Ok((s, fired))
}
