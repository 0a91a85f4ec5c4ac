use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

/// Overlap between a predicted and a reference mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub jaccard_index: f64,
    pub jaccard_distance: f64,
    pub dice: f64,
}

/// Jaccard index `|A∩B| / |A∪B|` and Dice `2|A∩B| / (|A| + |B|)`. Two
/// empty masks agree perfectly.
pub fn mask_metrics(predicted: &BinaryMask, truth: &BinaryMask) -> Result<MaskMetrics> {
    if predicted.dims() != truth.dims() {
        return Err(Error::arg(format!(
            "mask sizes differ: {:?} vs {:?}",
            predicted.dims(),
            truth.dims()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.data().iter().zip(truth.data()) {
        a += p as usize;
        b += t as usize;
        inter += (p & t) as usize;
    }
    let union = a + b - inter;
    let (j, dice) = if union == 0 {
        (1.0, 1.0)
    } else {
        (inter as f64 / union as f64, 2.0 * inter as f64 / (a + b) as f64)
    };
    Ok(MaskMetrics {
        jaccard_index: j,
        jaccard_distance: 1.0 - j,
        dice,
    })
}

/// Mean and (population) standard deviation of each metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub jaccard_distance_mean: f64,
    pub jaccard_distance_std: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
}

pub fn summarize(metrics: &[MaskMetrics]) -> Option<MetricSummary> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    let stats = |f: &dyn Fn(&MaskMetrics) -> f64| {
        let mean = metrics.iter().map(f).sum::<f64>() / n;
        let var = metrics.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (jm, js) = stats(&|m| m.jaccard_distance);
    let (dm, ds) = stats(&|m| m.dice);
    Some(MetricSummary {
        n: metrics.len(),
        jaccard_distance_mean: jm,
        jaccard_distance_std: js,
        dice_mean: dm,
        dice_std: ds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(v: &[u8]) -> BinaryMask {
        BinaryMask::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        let a = m(&[1, 1, 0, 0, 1, 0]);
        let r = mask_metrics(&a, &a).unwrap();
        assert_eq!((r.jaccard_index, r.jaccard_distance, r.dice), (1.0, 0.0, 1.0));

        let r = mask_metrics(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap();
        assert_eq!((r.jaccard_index, r.jaccard_distance, r.dice), (0.0, 1.0, 0.0));

        let r = mask_metrics(&m(&[1, 1, 1, 1, 0, 0]), &m(&[0, 0, 1, 1, 1, 1])).unwrap();
        assert!((r.jaccard_index - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.jaccard_distance - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.dice, 0.5);

        let e = m(&[0, 0]);
        assert_eq!(mask_metrics(&e, &e).unwrap().dice, 1.0);
        assert!(mask_metrics(&m(&[0]), &m(&[0, 0])).is_err());
    }

    proptest! {
        #[test]
        fn dice_dominates_and_is_symmetric(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..64)) {
            let a = m(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let b = m(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let ab = mask_metrics(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_metrics(&b, &a).unwrap());
            prop_assert!(ab.dice >= ab.jaccard_index);
            let extreme = ab.jaccard_index == 0.0 || ab.jaccard_index == 1.0;
            prop_assert_eq!(ab.dice == ab.jaccard_index, extreme);
        }
    }
}
