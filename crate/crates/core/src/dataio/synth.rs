//! Synthetic chest-radiograph-like corpus.
//!
//! Each image is a dark noisy frame with two bright elliptical "lungs".
//! Disease classes add blurred opacities inside the lungs. Optional
//! corner glyphs, correlated with the class or the source, imitate
//! burned-in annotations, and an optional per-source background texture
//! imitates acquisition differences. Both live strictly outside the lungs.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::formats::{save_image, save_mask};
use super::manifest::{save_manifest, Label, Manifest, Projection, SampleRecord, Source};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::seed::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphMode {
    None,
    ByClass,
    BySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    /// 2 (normal, lung_opacity) or 3 (adds covid19).
    pub classes: usize,
    pub glyphs: GlyphMode,
    /// Probability that an image carries its glyph.
    pub glyph_rate: f64,
    /// Give each source its own background texture.
    pub source_texture: bool,
    /// Probability that a patient comes from its class's preferred source;
    /// 0.5 makes source independent of class.
    pub source_class_correlation: f64,
    /// Peak brightness added by an opacity.
    pub opacity_strength: f64,
    /// Permute labels after rendering (null-signal control).
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            size: 64,
            classes: 2,
            glyphs: GlyphMode::None,
            glyph_rate: 1.0,
            source_texture: false,
            source_class_correlation: 0.5,
            opacity_strength: 0.3,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Convenience constructor matching the documented generator contract.
    pub fn new(n: usize, size: usize, annotation_bias: bool, seed: u64) -> Self {
        SynthConfig {
            n,
            size,
            glyphs: if annotation_bias { GlyphMode::ByClass } else { GlyphMode::None },
            seed,
            ..Default::default()
        }
    }

    pub fn labels(&self) -> &'static [Label] {
        if self.classes == 3 {
            &[Label::Normal, Label::LungOpacity, Label::Covid19]
        } else {
            &[Label::Normal, Label::LungOpacity]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::config(format!("corpus size {} is below 10", self.n)));
        }
        if self.size < 32 {
            return Err(Error::config(format!("image size {} is below 32", self.size)));
        }
        if !(2..=3).contains(&self.classes) {
            return Err(Error::config(format!("classes must be 2 or 3, got {}", self.classes)));
        }
        for (name, p) in [
            ("glyph_rate", self.glyph_rate),
            ("source_class_correlation", self.source_class_correlation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Radians.
    pub angle: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(x, y)` lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub images: Vec<Image>,
    /// The same images rendered without glyphs.
    pub clean_images: Vec<Image>,
    pub masks: Vec<BinaryMask>,
    pub labels: Vec<Label>,
    pub lungs: Vec<[Ellipse; 2]>,
    pub glyphs: Vec<Vec<Corner>>,
    pub manifest: Manifest,
}

/// Pixel rectangle `(x0, y0, x1, y1)` (exclusive ends) of a glyph strip.
pub fn glyph_rect(size: usize, corner: Corner) -> (usize, usize, usize, usize) {
    let s = size as f64;
    let y0 = (0.03 * s).round() as usize;
    let y1 = y0 + (0.08 * s).round().max(3.0) as usize;
    let w = (0.28 * s).round() as usize;
    let margin = y0.max(1);
    match corner {
        Corner::TopLeft => (margin, y0, margin + w, y1),
        Corner::TopRight => (size - margin - w, y0, size - margin, y1),
    }
}

/// Union of both glyph strips.
pub fn glyph_strip_mask(size: usize) -> BinaryMask {
    let rects = [glyph_rect(size, Corner::TopLeft), glyph_rect(size, Corner::TopRight)];
    BinaryMask::from_fn(size, size, |x, y| {
        rects
            .iter()
            .any(|&(x0, y0, x1, y1)| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    })
}

fn stamp_glyph(img: &mut Image, corner: Corner) {
    let (x0, y0, x1, y1) = glyph_rect(img.width(), corner);
    for y in y0..y1 {
        for x in x0..x1 {
            // blocky "characters": 2-pixel strokes with 1-pixel gaps
            let col = (x - x0) % 4;
            let row = y - y0;
            if col < 2 || row == 0 || row + 1 == y1 - y0 {
                img.set(x, y, 0.95);
            }
        }
    }
}

fn class_corners(class: usize) -> Vec<Corner> {
    match class {
        0 => vec![Corner::TopLeft],
        1 => vec![Corner::TopRight],
        _ => vec![Corner::TopLeft, Corner::TopRight],
    }
}

fn source_corners(source: Source) -> Vec<Corner> {
    if source == Source::Cohen {
        vec![Corner::TopLeft]
    } else {
        vec![Corner::TopRight]
    }
}

fn sample_inside<R: Rng>(e: &Ellipse, shrink: f64, rng: &mut R) -> (f64, f64) {
    let r = shrink * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    let (u, v) = (r * t.cos() * e.rx, r * t.sin() * e.ry);
    let (s, c) = e.angle.sin_cos();
    (e.cx + c * u - s * v, e.cy + s * u + c * v)
}

pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = derive_rng(config.seed, "synthetic-corpus");
    let s = config.size as f64;
    let labels = config.labels();
    let n = config.n;
    let mut out = SyntheticCorpus {
        images: Vec::with_capacity(n),
        clean_images: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        lungs: Vec::with_capacity(n),
        glyphs: Vec::with_capacity(n),
        manifest: Manifest::default(),
    };
    let mut records = Vec::with_capacity(n);
    let mut patient = 0usize;
    let mut remaining = 0usize;
    let mut class = 0usize;
    let mut source = Source::Rsna;

    for i in 0..n {
        if remaining == 0 {
            patient += 1;
            remaining = rng.random_range(1..=3);
            class = (patient - 1) % labels.len();
            let preferred = if class == 0 { Source::Rsna } else { Source::Cohen };
            let other = if preferred == Source::Rsna { Source::Cohen } else { Source::Rsna };
            source = if rng.random_bool(config.source_class_correlation) {
                preferred
            } else {
                other
            };
        }
        remaining -= 1;

        let jitter = |rng: &mut _, a: f64| -> f64 { Rng::random_range(rng, -a..=a) };
        let dy = jitter(&mut rng, 0.03 * s);
        let lungs = [0.31, 0.69].map(|fx| Ellipse {
            cx: fx * s + jitter(&mut rng, 0.03 * s) - 0.5,
            cy: 0.55 * s + dy + jitter(&mut rng, 0.015 * s) - 0.5,
            rx: 0.13 * s * (1.0 + jitter(&mut rng, 0.08)),
            ry: 0.27 * s * (1.0 + jitter(&mut rng, 0.08)),
            angle: jitter(&mut rng, 0.12),
        });
        let mask = BinaryMask::from_fn(config.size, config.size, |x, y| {
            lungs[0].contains(x, y) || lungs[1].contains(x, y)
        });

        let textured = config.source_texture && source == Source::Rsna;
        let period = 4.0;
        let mut img = Image::from_fn(config.size, config.size, |x, y| {
            let mut v = 0.08 + 0.04 * (y as f64 / s);
            if config.source_texture {
                v += if textured {
                    0.06 * ((std::f64::consts::TAU * y as f64 / period).sin())
                } else {
                    0.03 * (x as f64 / s)
                };
            }
            v as f32
        });
        for v in img.data_mut() {
            *v += rng.random_range(-0.03..0.03);
        }
        let lung_base = 0.5 + jitter(&mut rng, 0.05);
        for y in 0..config.size {
            for x in 0..config.size {
                if mask.get(x, y) {
                    let shade = lung_base + 0.08 * (y as f64 / s - 0.5) + rng.random_range(-0.04..0.04);
                    img.set(x, y, shade as f32);
                }
            }
        }

        let blobs: Vec<(f64, f64, f64, f64)> = match labels[class] {
            Label::LungOpacity => (0..rng.random_range(1..=3))
                .map(|_| {
                    let lung = &lungs[rng.random_range(0..2)];
                    let (bx, by) = sample_inside(lung, 0.6, &mut rng);
                    (bx, by, 0.06 * s, config.opacity_strength)
                })
                .collect(),
            Label::Covid19 => lungs
                .iter()
                .map(|lung| {
                    let (bx, _) = sample_inside(lung, 0.4, &mut rng);
                    (bx, lung.cy + 0.4 * lung.ry, 0.1 * s, 0.7 * config.opacity_strength)
                })
                .collect(),
            _ => Vec::new(),
        };
        for y in 0..config.size {
            for x in 0..config.size {
                if !mask.get(x, y) {
                    continue;
                }
                let add: f64 = blobs
                    .iter()
                    .map(|&(bx, by, sd, amp)| {
                        let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                        amp * (-d2 / (2.0 * sd * sd)).exp()
                    })
                    .sum();
                let v = img.get(x, y) + add as f32;
                img.set(x, y, v);
            }
        }
        let img = img.map(|v| v.clamp(0.0, 1.0));
        let clean = img.clone();

        let mut stamped = img;
        let corners = match config.glyphs {
            GlyphMode::None => Vec::new(),
            _ if !rng.random_bool(config.glyph_rate) => Vec::new(),
            GlyphMode::ByClass => class_corners(class),
            GlyphMode::BySource => source_corners(source),
        };
        for &c in &corners {
            stamp_glyph(&mut stamped, c);
        }

        let projection = Projection::ALL[rng.random_range(0..Projection::ALL.len())];
        let id = format!("syn-{i:05}");
        records.push(SampleRecord {
            image_path: format!("images/{id}.pgm").into(),
            id,
            patient_id: format!("syn-p{patient:04}"),
            source,
            class_label: labels[class],
            projection,
            split: None,
            original_label: None,
        });
        out.images.push(stamped);
        out.clean_images.push(clean);
        out.masks.push(mask);
        out.labels.push(labels[class]);
        out.lungs.push(lungs);
        out.glyphs.push(corners);
    }

    if config.shuffle_labels {
        use rand::seq::SliceRandom;
        let mut shuffle_rng = derive_rng(config.seed, "synthetic-label-shuffle");
        out.labels.shuffle(&mut shuffle_rng);
        for (r, &l) in records.iter_mut().zip(&out.labels) {
            r.class_label = l;
        }
    }
    out.manifest = Manifest::new(records)?;
    Ok(out)
}

impl SyntheticCorpus {
    /// Writes `images/`, `masks/` and `manifest.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (i, r) in self.manifest.records.iter().enumerate() {
            let img_path = dir.join(&r.image_path);
            save_image(&self.images[i], &img_path)?;
            let mask_path = dir.join("masks").join(format!("{}.pgm", r.id));
            save_mask(&self.masks[i], &mask_path)?;
            written.push(img_path);
            written.push(mask_path);
        }
        let mpath = dir.join("manifest.csv");
        save_manifest(&self.manifest, &mpath)?;
        written.push(mpath);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::formats::Pgm;

    #[test]
    fn masks_are_the_generating_ellipses() {
        let c = generate_synthetic_corpus(&SynthConfig::new(12, 48, true, 3)).unwrap();
        for (m, l) in c.masks.iter().zip(&c.lungs) {
            let expect = BinaryMask::from_fn(48, 48, |x, y| l[0].contains(x, y) || l[1].contains(x, y));
            assert_eq!(m, &expect);
            assert!(m.count() > 48 * 48 / 10);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::new(15, 32, true, 42);
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let bytes = |c: &SyntheticCorpus| -> Vec<u8> {
            c.images.iter().flat_map(|i| Pgm::from_image(i).encode()).collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
        let other = generate_synthetic_corpus(&SynthConfig::new(15, 32, true, 43)).unwrap();
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn glyphs_stay_outside_lungs_and_follow_class() {
        let c = generate_synthetic_corpus(&SynthConfig::new(60, 64, true, 1)).unwrap();
        let strips = glyph_strip_mask(64);
        for i in 0..60 {
            for (a, b) in c.masks[i].data().iter().zip(strips.data()) {
                assert!(!(*a == 1 && *b == 1), "glyph strip overlaps lungs");
            }
            let expect = if c.labels[i] == Label::Normal {
                vec![Corner::TopLeft]
            } else {
                vec![Corner::TopRight]
            };
            assert_eq!(c.glyphs[i], expect);
            // the clean rendering differs only inside the strips
            for (k, (x, y)) in c.images[i].data().iter().zip(c.clean_images[i].data()).enumerate() {
                if strips.data()[k] == 0 {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn patients_own_one_to_three_images() {
        let c = generate_synthetic_corpus(&SynthConfig::new(100, 32, false, 5)).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for r in &c.manifest.records {
            *counts.entry(r.patient_id.clone()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&k| (1..=3).contains(&k)));
        let normal = c.labels.iter().filter(|&&l| l == Label::Normal).count();
        assert!((35..=65).contains(&normal), "{normal}");
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(generate_synthetic_corpus(&SynthConfig::new(5, 64, false, 0)).is_err());
        assert!(generate_synthetic_corpus(&SynthConfig::new(20, 16, false, 0)).is_err());
    }

    #[test]
    fn writes_loadable_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_corpus(&SynthConfig::new(10, 32, false, 2)).unwrap();
        let files = c.write(dir.path()).unwrap();
        assert_eq!(files.len(), 21);
        let m = crate::dataio::load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m, c.manifest);
    }
}
