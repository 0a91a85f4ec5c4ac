use rand::Rng;
use serde::{Deserialize, Serialize};

use super::quickshift::{quickshift, SuperpixelMap};
use crate::autodiff::Network;
use crate::error::{Error, Result};
use crate::image::Image;

/// Surrogate coefficients at or below this count as zero when keeping only
/// positive evidence; it absorbs round-off in the normal equations.
pub const POSITIVE_WEIGHT_FLOOR: f64 = 1e-10;

/// Anything that maps images to class-probability vectors.
pub trait Blackbox {
    /// One probability vector per image, in order.
    fn probabilities(&mut self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

impl<F> Blackbox for F
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    fn probabilities(&mut self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|i| self(i)).collect()
    }
}

/// Batched blackbox over a trained classifier.
pub struct ModelBlackbox<'a> {
    pub model: &'a Network<f32>,
}

impl Blackbox for ModelBlackbox<'_> {
    fn probabilities(&mut self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let y = self.model.predict(&Image::batch(images)?)?;
        Ok((0..images.len())
            .map(|i| y.item(i).iter().map(|&v| v as f64).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub kernel_size: f64,
    /// Defaults to twice the kernel size.
    pub max_dist: Option<f64>,
    pub ratio: f64,
    pub n_samples: usize,
    pub n_features: usize,
    pub positive_only: bool,
    pub kernel_width: f64,
    pub ridge: f64,
    /// Perturbed images sent to the blackbox per call.
    pub batch_size: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            kernel_size: 4.0,
            max_dist: None,
            ratio: 1.0,
            n_samples: 1000,
            n_features: 5,
            positive_only: true,
            kernel_width: 0.25,
            ridge: 1.0,
            batch_size: 50,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::config(format!("n_samples {} is below 10", self.n_samples)));
        }
        if self.n_features == 0 {
            return Err(Error::config("n_features must be at least 1"));
        }
        if !(self.kernel_width > 0.0) {
            return Err(Error::config(format!("kernel_width {} must be positive", self.kernel_width)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config(format!("ridge {} must be non-negative", self.ridge)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn effective_max_dist(&self) -> f64 {
        self.max_dist.unwrap_or(2.0 * self.kernel_size)
    }

    pub fn superpixels(&self, image: &Image) -> Result<SuperpixelMap> {
        quickshift(image, self.kernel_size, self.effective_max_dist(), self.ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelWeight {
    pub id: usize,
    pub weight: f64,
}

/// Selected superpixels in descending weight order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub superpixels: Vec<SuperpixelWeight>,
    /// Every surrogate coefficient, indexed by superpixel id.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Perturbed copy of `image`: superpixels switched off take `fill`.
pub fn render_perturbation(image: &Image, map: &SuperpixelMap, on: &[bool], fill: f32) -> Image {
    let data = image
        .data()
        .iter()
        .zip(&map.labels)
        .map(|(&v, &l)| if on[l] { v } else { fill })
        .collect();
    Image::from_vec(image.width(), image.height(), data).expect("same dimensions")
}

fn check_probabilities(p: &[f64], target: usize) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.len() <= target
        || p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + 1e-6)
        || (sum - 1.0).abs() > 1e-4
    {
        return Err(Error::Integration(format!(
            "blackbox returned {p:?}, not a probability vector covering class {target}"
        )));
    }
    Ok(())
}

/// Cosine distance between a binary vector with `on` ones (out of `k`) and
/// the all-ones vector; an all-zero vector is at distance 1.
pub fn cosine_distance_to_ones(on: usize, k: usize) -> f64 {
    if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / k as f64).sqrt()
    }
}

/// Weighted ridge regression with an unpenalised intercept. Returns
/// `(coefficients, intercept)`.
pub fn weighted_ridge(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    let k = x.first().map_or(0, Vec::len);
    let wsum: f64 = w.iter().sum();
    if n == 0 || !(wsum > 0.0) {
        return Err(Error::arg("ridge regression needs samples with positive weight"));
    }
    let mut xm = vec![0.0; k];
    let mut ym = 0.0;
    for i in 0..n {
        for j in 0..k {
            xm[j] += w[i] * x[i][j];
        }
        ym += w[i] * y[i];
    }
    xm.iter_mut().for_each(|v| *v /= wsum);
    ym /= wsum;

    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    let mut xc = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            xc[j] = x[i][j] - xm[j];
        }
        let yc = y[i] - ym;
        for r in 0..k {
            let s = w[i] * xc[r];
            b[r] += s * yc;
            for c in 0..=r {
                a[r * k + c] += s * xc[c];
            }
        }
    }
    for r in 0..k {
        a[r * k + r] += lambda;
        for c in 0..r {
            a[c * k + r] = a[r * k + c];
        }
    }
    let beta = cholesky_solve(&mut a, &b, k)?;
    let intercept = ym - beta.iter().zip(&xm).map(|(b, m)| b * m).sum::<f64>();
    Ok((beta, intercept))
}

/// Solves `A x = b` for symmetric positive-definite `A` (overwritten).
fn cholesky_solve(a: &mut [f64], b: &[f64], k: usize) -> Result<Vec<f64>> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 0.0) {
            return Err(Error::Integration("surrogate normal equations are singular; use ridge > 0".into()));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= a[i * k + p] * z[p];
        }
        z[i] = s / a[i * k + i];
    }
    for i in (0..k).rev() {
        let mut s = z[i];
        for p in i + 1..k {
            s -= a[p * k + i] * z[p];
        }
        z[i] = s / a[i * k + i];
    }
    Ok(z)
}

/// LIME explanation of `target_class` for `image` over precomputed
/// superpixels. The first perturbation keeps every superpixel; the rest are
/// uniform random on/off patterns.
pub fn lime_explain_with_map<B: Blackbox + ?Sized, R: Rng + ?Sized>(
    image: &Image,
    map: &SuperpixelMap,
    blackbox: &mut B,
    target_class: usize,
    config: &LimeConfig,
    rng: &mut R,
) -> Result<Explanation> {
    config.validate()?;
    if map.labels.len() != image.data().len() {
        return Err(Error::arg("superpixel map does not match the image"));
    }
    let k = map.count;
    let fill = image.mean();
    let mut z: Vec<Vec<bool>> = Vec::with_capacity(config.n_samples);
    z.push(vec![true; k]);
    while z.len() < config.n_samples {
        z.push((0..k).map(|_| rng.random_bool(0.5)).collect());
    }
    let mut target = Vec::with_capacity(config.n_samples);
    for chunk in z.chunks(config.batch_size) {
        let batch: Vec<Image> = chunk.iter().map(|on| render_perturbation(image, map, on, fill)).collect();
        let probs = blackbox.probabilities(&batch)?;
        if probs.len() != batch.len() {
            return Err(Error::Integration(format!(
                "blackbox answered {} of {} images",
                probs.len(),
                batch.len()
            )));
        }
        for p in probs {
            check_probabilities(&p, target_class)?;
            target.push(p[target_class]);
        }
    }
    let weights: Vec<f64> = z
        .iter()
        .map(|on| {
            let d = cosine_distance_to_ones(on.iter().filter(|&&b| b).count(), k);
            (-d * d / (config.kernel_width * config.kernel_width)).exp()
        })
        .collect();
    let x: Vec<Vec<f64>> = z
        .iter()
        .map(|on| on.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let (coefficients, intercept) = weighted_ridge(&x, &target, &weights, config.ridge)?;

    let mut ranked: Vec<SuperpixelWeight> = coefficients
        .iter()
        .enumerate()
        .map(|(id, &weight)| SuperpixelWeight { id, weight })
        .filter(|s| !config.positive_only || s.weight > POSITIVE_WEIGHT_FLOOR)
        .collect();
    ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.id.cmp(&b.id)));
    ranked.truncate(config.n_features);
    Ok(Explanation {
        superpixels: ranked,
        coefficients,
        intercept,
    })
}

/// Segments `image` with quickshift and explains `target_class`.
pub fn lime_explain<B: Blackbox + ?Sized, R: Rng + ?Sized>(
    image: &Image,
    blackbox: &mut B,
    target_class: usize,
    config: &LimeConfig,
    rng: &mut R,
) -> Result<(Explanation, SuperpixelMap)> {
    config.validate()?;
    let map = config.superpixels(image)?;
    let e = lime_explain_with_map(image, &map, blackbox, target_class, config, rng)?;
    Ok((e, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;

    /// Image whose superpixels are vertical bands of distinct brightness.
    fn banded(k: usize) -> (Image, SuperpixelMap) {
        let w = 4 * k;
        let img = Image::from_fn(w, 8, |x, _| 0.1 + 0.8 * (x / 4) as f32 / k as f32);
        let map = SuperpixelMap {
            width: w,
            height: 8,
            labels: (0..8).flat_map(|_| (0..w).map(|x| x / 4)).collect(),
            count: k,
        };
        (img, map)
    }

    /// Recovers which bands are still present in a perturbed image.
    fn indicators(orig: &Image, pert: &Image, k: usize) -> Vec<f64> {
        (0..k)
            .map(|b| if pert.get(4 * b, 0) == orig.get(4 * b, 0) { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn constant_blackbox_gives_no_explanation() {
        let (img, map) = banded(6);
        let mut bb = |_: &Image| -> Result<Vec<f64>> { Ok(vec![0.3, 0.7]) };
        let mut rng = derive_rng(0, "lime");
        let e = lime_explain_with_map(&img, &map, &mut bb, 1, &LimeConfig::default(), &mut rng).unwrap();
        assert!(e.coefficients.iter().all(|w| w.abs() < 1e-6));
        assert!(e.superpixels.is_empty());
    }

    #[test]
    fn linear_blackbox_ranking_recovered() {
        let (img, map) = banded(6);
        let coef = [0.05, 0.0, 0.12, -0.04, 0.08, 0.02];
        let orig = img.clone();
        let mut bb = |p: &Image| -> Result<Vec<f64>> {
            let z = indicators(&orig, p, 6);
            let v = 0.3 + coef.iter().zip(&z).map(|(c, z)| c * z).sum::<f64>();
            Ok(vec![1.0 - v, v])
        };
        let cfg = LimeConfig {
            ridge: 1e-9,
            n_features: 6,
            ..Default::default()
        };
        let mut rng = derive_rng(1, "lime");
        let e = lime_explain_with_map(&img, &map, &mut bb, 1, &cfg, &mut rng).unwrap();
        for (c, b) in coef.iter().zip(&e.coefficients) {
            assert!((c - b).abs() < 1e-6, "{c} vs {b}");
        }
        let ids: Vec<usize> = e.superpixels.iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![2, 4, 0, 5]);
    }

    #[test]
    fn zero_coefficient_superpixel_never_selected() {
        let (img, map) = banded(8);
        let coef = [0.1, 0.0, 0.05, 0.07, 0.0, 0.03, 0.09, 0.02];
        let orig = img.clone();
        let mut bb = |p: &Image| -> Result<Vec<f64>> {
            let z = indicators(&orig, p, 8);
            let v = 0.2 + coef.iter().zip(&z).map(|(c, z)| c * z).sum::<f64>();
            Ok(vec![1.0 - v, v])
        };
        for seed in 0..5 {
            let mut rng = derive_rng(seed, "lime");
            let e = lime_explain_with_map(&img, &map, &mut bb, 1, &LimeConfig::default(), &mut rng).unwrap();
            assert!(e.superpixels.iter().all(|s| s.id != 1 && s.id != 4), "{:?}", e.superpixels);
        }
    }

    #[test]
    fn one_blackbox_evaluation_per_sample_and_deterministic() {
        let (img, map) = banded(5);
        let mut calls = 0usize;
        let mut run = |seed| {
            let mut bb = |p: &Image| -> Result<Vec<f64>> {
                calls += 1;
                let v = p.mean() as f64;
                Ok(vec![1.0 - v, v])
            };
            let mut rng = derive_rng(seed, "lime");
            lime_explain_with_map(&img, &map, &mut bb, 1, &LimeConfig::default(), &mut rng).unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a, b);
        assert_eq!(calls, 2000);
    }

    #[test]
    fn invalid_blackbox_output_is_integration_error() {
        let (img, map) = banded(4);
        let mut bb = |_: &Image| -> Result<Vec<f64>> { Ok(vec![0.9, 0.9]) };
        let mut rng = derive_rng(0, "lime");
        let e = lime_explain_with_map(&img, &map, &mut bb, 1, &LimeConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(e, Error::Integration(_)));
    }

    #[test]
    fn ridge_matches_closed_form_on_tiny_problem() {
        // one feature, weights 1: slope = cov/var + ridge in the denominator
        let x = vec![vec![0.0], vec![1.0], vec![1.0], vec![0.0]];
        let y = vec![1.0, 3.0, 3.0, 1.0];
        let (b, c) = weighted_ridge(&x, &y, &[1.0; 4], 1.0).unwrap();
        // centred sxx = 1, sxy = 2 → beta = 2 / (1 + 1)
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((c - (2.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_values() {
        assert_eq!(cosine_distance_to_ones(4, 4), 0.0);
        assert_eq!(cosine_distance_to_ones(0, 4), 1.0);
        assert!((cosine_distance_to_ones(1, 4) - 0.5).abs() < 1e-15);
    }
}
