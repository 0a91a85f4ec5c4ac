use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::manifest::{Label, Manifest, Source};
use crate::error::{Error, Result};
use crate::seed::derive_rng;

/// Record indices of one generalization fold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fold {
    pub negatives: Vec<usize>,
    pub positives: Vec<usize>,
}

impl Fold {
    pub fn counts(&self) -> (usize, usize) {
        (self.negatives.len(), self.positives.len())
    }
}

/// Two folds for cross-source COVID-19 generalization.
///
/// Fold 1 holds every record of the source with the most covid19 images,
/// plus half (by patient, seeded) of the shared negative pool: the largest
/// source without covid19 images. Fold 2 holds everything else: the other
/// covid19 sources with their negatives, the other half of the pool and
/// the remaining negative-only sources.
pub fn make_generalization_folds(manifest: &Manifest, seed: u64) -> Result<[Fold; 2]> {
    let mut per_source: BTreeMap<Source, (usize, usize)> = BTreeMap::new();
    for r in &manifest.records {
        let e = per_source.entry(r.source).or_default();
        if r.class_label == Label::Covid19 {
            e.0 += 1;
        }
        e.1 += 1;
    }
    let covid_sources: Vec<Source> = per_source.iter().filter(|(_, c)| c.0 > 0).map(|(s, _)| *s).collect();
    if covid_sources.len() < 2 {
        return Err(Error::config(format!(
            "covid19 records come from {} source(s); at least 2 are needed",
            covid_sources.len()
        )));
    }
    // BTreeMap order makes ties resolve to the first source in vocabulary order
    let anchor = *covid_sources
        .iter()
        .rev()
        .max_by_key(|s| per_source[s].0)
        .expect("non-empty");
    let pool = per_source
        .iter()
        .filter(|(_, c)| c.0 == 0)
        .rev()
        .max_by_key(|(_, c)| c.1)
        .map(|(s, _)| *s);

    let mut pool_half = Vec::new();
    if let Some(pool) = pool {
        let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if r.source == pool {
                patients.entry(&r.patient_id).or_default().push(i);
            }
        }
        let mut order: Vec<Vec<usize>> = patients.into_values().collect();
        order.shuffle(&mut derive_rng(seed, "generalization-folds"));
        let total: usize = order.iter().map(Vec::len).sum();
        let mut taken = 0;
        for group in order {
            if 2 * taken >= total {
                break;
            }
            taken += group.len();
            pool_half.extend(group);
        }
    }
    let mut in_first = vec![false; manifest.len()];
    for &i in &pool_half {
        in_first[i] = true;
    }
    let mut folds = [Fold::default(), Fold::default()];
    for (i, r) in manifest.records.iter().enumerate() {
        let f = usize::from(!(r.source == anchor || in_first[i]));
        if r.class_label == Label::Covid19 {
            folds[f].positives.push(i);
        } else {
            folds[f].negatives.push(i);
        }
    }
    Ok(folds)
}
