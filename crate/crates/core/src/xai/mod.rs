//! Per-image explanations (LIME over quickshift superpixels, Grad-CAM) and
//! their aggregation into per-model, per-class heatmaps.

mod gradcam;
mod lime;
mod quickshift;

pub use gradcam::{cam_slot, conv_activation_gradient, gradcam, raw_cam, score_slot, Cam};
pub use lime::{
    cosine_distance_to_ones, lime_explain, lime_explain_with_map, render_perturbation, weighted_ridge, Blackbox,
    Explanation, LimeConfig, ModelBlackbox, SuperpixelWeight, POSITIVE_WEIGHT_FLOOR,
};
pub use quickshift::{quickshift, quickshift_unmerged, SuperpixelMap, INTENSITY_SCALE, MIN_SEGMENT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lime,
    GradCam,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::GradCam => "grad_cam",
        }
    }
}

/// Union of the explanation's superpixels.
pub fn explanation_to_mask(explanation: &Explanation, map: &SuperpixelMap) -> Result<BinaryMask> {
    let mut selected = vec![false; map.count];
    for s in &explanation.superpixels {
        *selected
            .get_mut(s.id)
            .ok_or_else(|| Error::arg(format!("superpixel {} not in a map of {}", s.id, map.count)))? = true;
    }
    Ok(BinaryMask::from_fn(map.width, map.height, |x, y| selected[map.label(x, y)]))
}

/// Pixels at or above `threshold` times the map maximum; an all-zero map
/// gives an empty mask.
pub fn cam_to_mask(cam: &Cam, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::arg(format!("threshold {threshold} outside [0, 1]")));
    }
    let max = cam.map.max() as f64;
    let (w, h) = cam.map.dims();
    if max <= 0.0 {
        return Ok(BinaryMask::new(w, h));
    }
    let cut = threshold * max;
    Ok(BinaryMask::from_fn(w, h, |x, y| cam.map.get(x, y) as f64 >= cut))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub model_id: String,
    pub class: String,
    pub method: Method,
    pub n_images: usize,
}

/// Pixel-wise mean of per-image importance maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateHeatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub meta: HeatmapMeta,
}

impl AggregateHeatmap {
    pub fn to_image(&self) -> Image {
        Image::from_vec(self.width, self.height, self.values.iter().map(|&v| v as f32).collect())
            .expect("dimensions match")
    }

    /// Share of the total heat inside `region`; 0 for an all-zero map.
    pub fn mass_fraction(&self, region: &BinaryMask) -> Result<f64> {
        if region.width() != self.width || region.height() != self.height {
            return Err(Error::arg("region does not match heatmap dimensions"));
        }
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return Ok(0.0);
        }
        let inside: f64 = self
            .values
            .iter()
            .zip(region.data())
            .filter(|(_, &m)| m == 1)
            .map(|(v, _)| v)
            .sum();
        Ok(inside / total)
    }
}

/// Averages equally sized maps; `meta.n_images` is set from the input.
pub fn aggregate(maps: &[Image], mut meta: HeatmapMeta) -> Result<AggregateHeatmap> {
    let first = maps.first().ok_or_else(|| Error::arg("cannot aggregate an empty list of maps"))?;
    let (w, h) = first.dims();
    let mut sum = vec![0.0f64; w * h];
    for (i, m) in maps.iter().enumerate() {
        if m.dims() != (w, h) {
            return Err(Error::arg(format!(
                "map {i} is {}x{}, expected {w}x{h}",
                m.width(),
                m.height()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += v as f64;
        }
    }
    let n = maps.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    meta.n_images = maps.len();
    Ok(AggregateHeatmap {
        width: w,
        height: h,
        values: sum,
        meta,
    })
}

pub fn aggregate_masks(masks: &[BinaryMask], meta: HeatmapMeta) -> Result<AggregateHeatmap> {
    let images: Vec<Image> = masks.iter().map(BinaryMask::to_image).collect();
    aggregate(&images, meta)
}

/// Serialized form of one explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub image_id: String,
    pub class: String,
    pub method: Method,
    pub superpixels: Vec<SuperpixelWeight>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> HeatmapMeta {
        HeatmapMeta {
            model_id: "m".into(),
            class: "c".into(),
            method: Method::Lime,
            n_images: 0,
        }
    }

    fn two_segment_map() -> SuperpixelMap {
        SuperpixelMap {
            width: 4,
            height: 2,
            labels: vec![0, 0, 1, 1, 0, 0, 1, 1],
            count: 2,
        }
    }

    fn expl(ids: &[usize]) -> Explanation {
        Explanation {
            superpixels: ids.iter().map(|&id| SuperpixelWeight { id, weight: 1.0 }).collect(),
            coefficients: vec![],
            intercept: 0.0,
        }
    }

    #[test]
    fn explanation_masks() {
        let m = two_segment_map();
        assert!(explanation_to_mask(&expl(&[]), &m).unwrap().is_empty());
        assert_eq!(explanation_to_mask(&expl(&[0, 1]), &m).unwrap().count(), 8);
        assert_eq!(explanation_to_mask(&expl(&[1]), &m).unwrap().count(), 4);
        assert!(matches!(explanation_to_mask(&expl(&[2]), &m), Err(Error::Argument(_))));
    }

    #[test]
    fn cam_masks() {
        let zero = Cam { map: Image::new(3, 3) };
        assert!(cam_to_mask(&zero, 0.5).unwrap().is_empty());
        let two = Cam {
            map: Image::from_fn(4, 1, |x, _| if x < 2 { 0.3 } else { 0.9 }),
        };
        let m = cam_to_mask(&two, 0.5).unwrap();
        assert_eq!(m.data(), &[0, 0, 1, 1]);
        assert_eq!(cam_to_mask(&two, 0.0).unwrap().count(), 4);
        assert!(cam_to_mask(&two, 1.5).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = Image::from_fn(3, 2, |x, y| (x + y) as f32 / 4.0);
        let agg = aggregate(std::slice::from_ref(&one), meta()).unwrap();
        assert_eq!(agg.to_image(), one);
        assert_eq!(agg.meta.n_images, 1);
        let ones = vec![BinaryMask::full(3, 3); 4];
        assert!(aggregate_masks(&ones, meta()).unwrap().values.iter().all(|&v| v == 1.0));
        let left = BinaryMask::from_fn(4, 2, |x, _| x < 2);
        let right = BinaryMask::from_fn(4, 2, |x, _| x >= 2);
        assert!(aggregate_masks(&[left, right], meta()).unwrap().values.iter().all(|&v| v == 0.5));
        assert!(aggregate(&[], meta()).is_err());
        assert!(aggregate(&[Image::new(2, 2), Image::new(3, 2)], meta()).is_err());
    }

    #[test]
    fn explanation_record_json_keys() {
        let r = ExplanationRecord {
            image_id: "a".into(),
            class: "covid19".into(),
            method: Method::Lime,
            superpixels: vec![SuperpixelWeight { id: 3, weight: 0.25 }],
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["superpixels"][0]["id"], 3);
        assert_eq!(v["method"], "lime");
    }

    proptest! {
        #[test]
        fn aggregate_is_the_mean(maps in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 6), 1..10)) {
            let imgs: Vec<Image> = maps.iter().map(|m| Image::from_vec(3, 2, m.clone()).unwrap()).collect();
            let agg = aggregate(&imgs, meta()).unwrap();
            for p in 0..6 {
                let mean = maps.iter().map(|m| m[p] as f64).sum::<f64>() / maps.len() as f64;
                prop_assert!((agg.values[p] - mean).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&agg.values[p]));
            }
        }
    }
}
