//! Glue between the phases: turning a radiograph into classifier input for
//! either pipeline variant, and mapping explanations back to the full frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Network;
use crate::error::Result;
use crate::image::{BinaryMask, BoundingBox, Image};
use crate::segmentation::{crop_to_roi, postprocess_mask, predict_mask, scaled_radius, scaled_roi_size, uncrop};
use crate::xai::{
    cam_to_mask, explanation_to_mask, gradcam, lime_explain, LimeConfig, Method, ModelBlackbox, SuperpixelWeight,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Classifier sees the whole radiograph.
    Full,
    /// Classifier sees the masked lung ROI.
    Segmented,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Segmented => "segmented",
        }
    }
}

/// Classifier input plus the box it was cut from (`None` for full images).
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub image: Image,
    pub bbox: Option<BoundingBox>,
    pub frame: (usize, usize),
}

impl Prepared {
    pub fn full(image: Image) -> Self {
        let frame = image.dims();
        Prepared {
            image,
            bbox: None,
            frame,
        }
    }

    /// Maps a real-valued map over the classifier input into the frame.
    pub fn project(&self, map: &Image) -> Image {
        let (w, h) = self.frame;
        match self.bbox {
            None if map.dims() == self.frame => map.clone(),
            None => map.resize(w, h),
            Some(bb) => uncrop(map, bb, w, h),
        }
    }

    /// Maps a mask over the classifier input into the frame.
    pub fn project_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = self.frame;
        match self.bbox {
            None => mask.resize(w, h),
            Some((x0, y0, x1, y1)) => {
                let inner = mask.resize(x1 - x0 + 1, y1 - y0 + 1);
                BinaryMask::from_fn(w, h, |x, y| {
                    (x0..=x1).contains(&x) && (y0..=y1).contains(&y) && inner.get(x - x0, y - y0)
                })
            }
        }
    }
}

/// Segmentation front end: U-Net mask, morphological clean-up, ROI crop.
#[derive(Clone, Copy, Debug)]
pub struct Segmenter<'a> {
    pub model: &'a Network<f32>,
    pub threshold: f32,
    pub open_radius: usize,
    pub dilate_radius: usize,
    pub roi_size: usize,
}

impl<'a> Segmenter<'a> {
    /// Radii and ROI size scaled to the model's input size.
    pub fn new(model: &'a Network<f32>) -> Self {
        let size = model.input_shape().last().copied().unwrap_or(1);
        Segmenter {
            model,
            threshold: 0.5,
            open_radius: scaled_radius(size),
            dilate_radius: scaled_radius(size),
            roi_size: scaled_roi_size(size),
        }
    }

    pub fn lung_mask(&self, image: &Image) -> Result<BinaryMask> {
        let raw = predict_mask(self.model, image, self.threshold)?;
        Ok(postprocess_mask(&raw, self.open_radius, self.dilate_radius))
    }

    /// Fails with `EmptyRoi` when no lung survives post-processing.
    pub fn prepare(&self, image: &Image) -> Result<Prepared> {
        let mask = self.lung_mask(image)?;
        let (crop, bb) = crop_to_roi(image, &mask, self.roi_size)?;
        Ok(Prepared {
            image: crop,
            bbox: Some(bb),
            frame: image.dims(),
        })
    }
}

/// Prepares an image for `variant`; the segmenter is required only for the
/// segmented variant.
pub fn prepare(variant: Variant, segmenter: Option<&Segmenter>, image: &Image) -> Result<Prepared> {
    match (variant, segmenter) {
        (Variant::Full, _) => Ok(Prepared::full(image.clone())),
        (Variant::Segmented, Some(s)) => s.prepare(image),
        (Variant::Segmented, None) => Err(crate::Error::config("segmented pipeline needs a segmentation model")),
    }
}

/// Settings for turning one prediction into a binary importance region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub lime: LimeConfig,
    /// Fraction of the CAM maximum kept as foreground.
    pub cam_threshold: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            lime: LimeConfig::default(),
            cam_threshold: 0.5,
        }
    }
}

/// One explanation mapped back to the full frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExplanation {
    /// Binary important region.
    pub region: BinaryMask,
    /// Continuous importance: the CAM, or each selected superpixel's weight.
    pub map: Image,
    /// Selected superpixels (LIME only).
    pub superpixels: Vec<SuperpixelWeight>,
}

pub fn explain_image<R: Rng + ?Sized>(
    method: Method,
    classifier: &Network<f32>,
    prepared: &Prepared,
    target_class: usize,
    config: &ExplainConfig,
    rng: &mut R,
) -> Result<ImageExplanation> {
    let (region, map, superpixels) = match method {
        Method::Lime => {
            let mut bb = ModelBlackbox { model: classifier };
            let (e, sp) = lime_explain(&prepared.image, &mut bb, target_class, &config.lime, rng)?;
            let region = explanation_to_mask(&e, &sp)?;
            let mut weight = vec![0.0f32; sp.count];
            for s in &e.superpixels {
                weight[s.id] = s.weight as f32;
            }
            let map = Image::from_vec(sp.width, sp.height, sp.labels.iter().map(|&l| weight[l]).collect())?;
            (region, map, e.superpixels)
        }
        Method::GradCam => {
            let cam = gradcam(classifier, &prepared.image, target_class)?;
            (cam_to_mask(&cam, config.cam_threshold)?, cam.map, Vec::new())
        }
    };
    Ok(ImageExplanation {
        region: prepared.project_mask(&region),
        map: prepared.project(&map),
        superpixels,
    })
}

/// Important region for `target_class`, in full-frame coordinates.
pub fn explanation_region<R: Rng + ?Sized>(
    method: Method,
    classifier: &Network<f32>,
    prepared: &Prepared,
    target_class: usize,
    config: &ExplainConfig,
    rng: &mut R,
) -> Result<BinaryMask> {
    Ok(explain_image(method, classifier, prepared, target_class, config, rng)?.region)
}
