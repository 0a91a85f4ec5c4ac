use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::manifest::{Label, Manifest, Source, Split};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    /// Fraction of the non-test records held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub group_by_patient: bool,
    pub stratify_source: bool,
    pub balance_class: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            val_fraction: 0.2,
            seed: 0,
            group_by_patient: true,
            stratify_source: true,
            balance_class: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    /// One entry per manifest record.
    pub assignment: Vec<Split>,
    pub warnings: Vec<String>,
}

impl SplitOutcome {
    pub fn apply(&self, manifest: &Manifest) -> Manifest {
        let mut m = manifest.clone();
        for (r, &s) in m.records.iter_mut().zip(&self.assignment) {
            r.split = Some(s);
        }
        m
    }
}

type Key = (Option<Label>, Option<Source>);

struct Group {
    patient: String,
    members: Vec<usize>,
    rank: u64,
}

/// Greedy grouped, stratified assignment.
///
/// Records are grouped by patient; groups are visited largest first (ties
/// by a seeded hash of the patient id) and each goes to the split whose
/// relative deficit on the group's (class, source) strata is largest. Test
/// is carved out first, then validation from the remainder. A group larger
/// than a split's whole target stays in train with a warning.
pub fn constrained_split(manifest: &Manifest, spec: &SplitSpec) -> Result<SplitOutcome> {
    for (name, f) in [("test_fraction", spec.test_fraction), ("val_fraction", spec.val_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config(format!("{name} = {f} must lie in (0, 1)")));
        }
    }
    let key = |i: usize| -> Key {
        let r = &manifest.records[i];
        (
            spec.balance_class.then_some(r.class_label),
            spec.stratify_source.then_some(r.source),
        )
    };

    let mut by_patient: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let gid = if spec.group_by_patient {
            r.patient_id.clone()
        } else {
            format!("\u{0}{}", r.id)
        };
        by_patient.entry(gid).or_default().push(i);
    }
    let mut groups: Vec<Group> = by_patient
        .into_iter()
        .map(|(patient, mut members)| {
            members.sort_by(|&a, &b| manifest.records[a].id.cmp(&manifest.records[b].id));
            Group {
                rank: derive_seed(spec.seed, &patient),
                patient,
                members,
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(a.rank.cmp(&b.rank))
            .then(a.patient.cmp(&b.patient))
    });

    let mut assignment = vec![Split::Train; manifest.len()];
    let mut warnings = Vec::new();
    let all: Vec<&Group> = groups.iter().collect();
    let rest = carve(&all, spec.test_fraction, Split::Test, &key, &mut assignment, &mut warnings);
    carve(&rest, spec.val_fraction, Split::Val, &key, &mut assignment, &mut warnings);
    Ok(SplitOutcome { assignment, warnings })
}

/// Moves a `fraction` of `groups` into `target`; returns the groups left
/// in train.
fn carve<'g>(
    groups: &[&'g Group],
    fraction: f64,
    target: Split,
    key: &dyn Fn(usize) -> Key,
    assignment: &mut [Split],
    warnings: &mut Vec<String>,
) -> Vec<&'g Group> {
    let mut totals: HashMap<Key, f64> = HashMap::new();
    let mut n = 0usize;
    for g in groups {
        for &i in &g.members {
            *totals.entry(key(i)).or_default() += 1.0;
            n += 1;
        }
    }
    let cap = fraction * n as f64;
    let mut taken: HashMap<Key, f64> = HashMap::new();
    let mut kept: HashMap<Key, f64> = HashMap::new();
    let mut keep = Vec::new();
    for &g in groups {
        if g.members.len() as f64 > cap {
            warnings.push(format!(
                "patient {} has {} records, more than the whole {} target of {:.1}; kept in train",
                g.patient,
                g.members.len(),
                target,
                cap
            ));
            for &i in &g.members {
                *kept.entry(key(i)).or_default() += 1.0;
            }
            keep.push(g);
            continue;
        }
        // relative unmet share of each stratum the group touches
        let deficit = |counts: &HashMap<Key, f64>, share: f64| -> f64 {
            g.members
                .iter()
                .map(|&i| {
                    let k = key(i);
                    let want = share * totals[&k];
                    (want - counts.get(&k).copied().unwrap_or(0.0)) / want.max(1e-9)
                })
                .sum::<f64>()
        };
        let to_target = deficit(&taken, fraction);
        let to_keep = deficit(&kept, 1.0 - fraction);
        let bucket = if to_target > to_keep {
            for &i in &g.members {
                assignment[i] = target;
            }
            &mut taken
        } else {
            keep.push(g);
            &mut kept
        };
        for &i in &g.members {
            *bucket.entry(key(i)).or_default() += 1.0;
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::manifest::{Projection, SampleRecord};
    use proptest::prelude::*;

    fn record(id: usize, patient: &str, label: Label, source: Source) -> SampleRecord {
        SampleRecord {
            id: format!("r{id:04}"),
            image_path: format!("{id}.pgm").into(),
            patient_id: patient.into(),
            source,
            class_label: label,
            projection: Projection::Pa,
            split: None,
            original_label: None,
        }
    }

    fn balanced(n: usize) -> Manifest {
        let labels = [Label::Normal, Label::LungOpacity];
        let sources = [Source::Cohen, Source::Rsna];
        Manifest::new(
            (0..n)
                .map(|i| record(i, &format!("p{i}"), labels[i % 2], sources[(i / 2) % 2]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn patient_records_stay_together() {
        let mut recs: Vec<SampleRecord> = balanced(40).records;
        for (k, r) in recs.iter_mut().enumerate().take(3) {
            r.patient_id = "shared".into();
            r.id = format!("s{k}");
        }
        let m = Manifest::new(recs).unwrap();
        let out = constrained_split(&m, &SplitSpec::default()).unwrap();
        assert!(out.assignment[0] == out.assignment[1] && out.assignment[1] == out.assignment[2]);
    }

    #[test]
    fn balanced_manifest_hits_test_fraction_per_class() {
        let m = balanced(100);
        let out = constrained_split(&m, &SplitSpec::default()).unwrap();
        for label in [Label::Normal, Label::LungOpacity] {
            let idx: Vec<usize> = (0..m.len()).filter(|&i| m.records[i].class_label == label).collect();
            let test = idx.iter().filter(|&&i| out.assignment[i] == Split::Test).count();
            let frac = test as f64 / idx.len() as f64;
            assert!((frac - 0.2).abs() <= 0.05, "{label}: {frac}");
        }
        assert!(out.warnings.is_empty());
        let val = out.assignment.iter().filter(|&&s| s == Split::Val).count();
        assert!((14..=18).contains(&val), "val {val}");
    }

    #[test]
    fn single_patient_goes_to_train_with_warning() {
        let m = Manifest::new(
            (0..10)
                .map(|i| record(i, "only", Label::Normal, Source::Rsna))
                .collect(),
        )
        .unwrap();
        let out = constrained_split(&m, &SplitSpec::default()).unwrap();
        assert!(out.assignment.iter().all(|&s| s == Split::Train));
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn bad_fraction_rejected() {
        let spec = SplitSpec {
            test_fraction: 1.0,
            ..Default::default()
        };
        assert!(constrained_split(&balanced(10), &spec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn grouped_deterministic_and_order_invariant(
            patients in proptest::collection::vec((1usize..4, 0usize..3, 0usize..2), 5..40),
            seed in any::<u64>(),
            rotate in 0usize..40,
        ) {
            let labels = [Label::Normal, Label::LungOpacity, Label::Covid19];
            let sources = [Source::Cohen, Source::Rsna];
            let mut recs = Vec::new();
            for (p, &(count, l, s)) in patients.iter().enumerate() {
                for _ in 0..count {
                    let id = recs.len();
                    recs.push(record(id, &format!("p{p}"), labels[l], sources[s]));
                }
            }
            let m = Manifest::new(recs.clone()).unwrap();
            let spec = SplitSpec { seed, ..Default::default() };
            let a = constrained_split(&m, &spec).unwrap();
            prop_assert_eq!(&a, &constrained_split(&m, &spec).unwrap());

            let mut by_patient: HashMap<&str, Split> = HashMap::new();
            for (r, &s) in m.records.iter().zip(&a.assignment) {
                let prev = by_patient.insert(&r.patient_id, s);
                prop_assert!(prev.is_none() || prev == Some(s));
            }

            let k = rotate % recs.len();
            recs.rotate_left(k);
            let shuffled = Manifest::new(recs).unwrap();
            let b = constrained_split(&shuffled, &spec).unwrap();
            for (r, s) in shuffled.records.iter().zip(&b.assignment) {
                let i = m.records.iter().position(|q| q.id == r.id).unwrap();
                prop_assert_eq!(a.assignment[i], *s);
            }
        }
    }
}
