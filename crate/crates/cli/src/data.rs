//! Corpus access and the helpers shared by the training and evaluation
//! commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sgxp_core::autodiff::{load_checkpoint, Network};
use sgxp_core::classification::{init_classifier, predict_proba_batch, train_two_phase, LabeledImage, PhaseRecord};
use sgxp_core::dataio::{
    load_image, load_manifest, load_mask, relabel_by_source, resolve, ExperimentConfig, ExperimentMode, Label, Manifest, Split,
};
use sgxp_core::pipeline::{prepare, Prepared, Segmenter, Variant};
use sgxp_core::seed::derive_seed;
use sgxp_core::{BinaryMask, Error as CoreError, Image};

use crate::error::{invalid, CliResult};

/// A manifest together with the directory its relative paths start from.
pub struct Corpus {
    pub base: PathBuf,
    pub manifest: Manifest,
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

/// Sibling directory of the image's parent: `x/images/a.pgm` gives
/// `x/{dir}/a.pgm`. This is the layout `synth` and `seg-predict` write.
pub fn sibling(image: &Path, dir: &str) -> PathBuf {
    let root = image.parent().and_then(Path::parent).unwrap_or(Path::new(""));
    root.join(dir).join(image.file_name().unwrap_or_default())
}

impl Corpus {
    pub fn load(path: &Path) -> CliResult<Corpus> {
        require_file(path, "manifest")?;
        let manifest = load_manifest(path)?;
        if manifest.is_empty() {
            return Err(invalid(format!("manifest {} has no records", path.display())));
        }
        Ok(Corpus {
            base: path.parent().unwrap_or(Path::new("")).to_path_buf(),
            manifest,
        })
    }

    pub fn id(&self, i: usize) -> &str {
        &self.manifest.records[i].id
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        resolve(&self.base, &self.manifest.records[i].image_path)
    }

    pub fn image(&self, i: usize, size: usize) -> CliResult<Image> {
        Ok(load_image(&self.image_path(i), Some(size))?)
    }

    /// Ground-truth mask: `corrections/{id}.pgm` when given and present,
    /// else the `masks/` sibling of the image.
    pub fn mask_path(&self, i: usize, corrections: Option<&Path>) -> PathBuf {
        if let Some(dir) = corrections {
            let p = dir.join(format!("{}.pgm", self.id(i)));
            if p.is_file() {
                return p;
            }
        }
        sibling(&self.image_path(i), "masks")
    }

    pub fn mask(&self, i: usize, size: usize, corrections: Option<&Path>) -> CliResult<BinaryMask> {
        let p = self.mask_path(i, corrections);
        require_file(&p, &format!("mask for {}", self.id(i)))?;
        let m = load_mask(&p)?;
        Ok(if m.dims() == (size, size) { m } else { m.resize(size, size) })
    }

    /// Glyph-free rendering written by `synth`, when present.
    pub fn clean_path(&self, i: usize) -> PathBuf {
        sibling(&self.image_path(i), "clean")
    }

    pub fn require_split(&self) -> CliResult<()> {
        if self.manifest.has_split() {
            Ok(())
        } else {
            Err(invalid("manifest has no split column; run `sgxp split` first"))
        }
    }
}

/// Class list and per-record class index for an experiment mode.
pub struct Task {
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
}

fn present(manifest: &Manifest, order: &[Label]) -> Vec<Label> {
    order.iter().copied().filter(|l| manifest.records.iter().any(|r| r.class_label == *l)).collect()
}

pub fn task_for(mode: ExperimentMode, manifest: &Manifest) -> CliResult<Task> {
    let (classes, labels): (Vec<String>, Vec<usize>) = match mode {
        ExperimentMode::Multiclass | ExperimentMode::SourceBias => {
            let (m, order) = if mode == ExperimentMode::SourceBias {
                (relabel_by_source(manifest), vec![Label::Cohen, Label::Rsna, Label::Other])
            } else {
                (manifest.clone(), vec![Label::Normal, Label::LungOpacity, Label::Covid19])
            };
            let classes = present(&m, &order);
            let mut labels = Vec::with_capacity(m.len());
            for r in &m.records {
                let k = classes.iter().position(|c| *c == r.class_label).ok_or_else(|| {
                    invalid(format!("record {} has label {} outside mode {}", r.id, r.class_label.as_str(), mode.as_str()))
                })?;
                labels.push(k);
            }
            (classes.iter().map(|l| l.as_str().to_string()).collect(), labels)
        }
        ExperimentMode::CovidGeneralization2Fold => (
            vec!["negative".into(), "covid19".into()],
            manifest.records.iter().map(|r| usize::from(r.class_label == Label::Covid19)).collect(),
        ),
    };
    if classes.len() < 2 {
        return Err(invalid(format!("mode {} needs at least two classes in the manifest", mode.as_str())));
    }
    Ok(Task { classes, labels })
}

pub fn load_network(path: &Path, what: &str) -> CliResult<Network<f32>> {
    require_file(path, what)?;
    Ok(load_checkpoint(path)?)
}

/// U-Net checkpoint, checked against the working size.
pub fn load_segmentation_model(path: Option<&Path>, input_size: usize) -> CliResult<Network<f32>> {
    let path = path.ok_or_else(|| invalid("the segmented pipeline needs --seg-model"))?;
    let net = load_network(path, "segmentation model")?;
    if net.input_shape() != [1, input_size, input_size] {
        return Err(invalid(format!(
            "segmentation model expects {:?}, working size is {input_size}",
            net.input_shape()
        )));
    }
    Ok(net)
}

/// Classifier inputs for the selected records. Images whose lung mask
/// comes out empty are skipped and returned by id for review.
pub struct PreparedSet {
    pub indices: Vec<usize>,
    pub prepared: Vec<Prepared>,
    pub empty_roi: Vec<String>,
}

pub fn prepare_records(
    corpus: &Corpus,
    indices: &[usize],
    size: usize,
    variant: Variant,
    segmenter: Option<&Segmenter>,
    clean: bool,
) -> CliResult<PreparedSet> {
    let mut out = PreparedSet {
        indices: Vec::new(),
        prepared: Vec::new(),
        empty_roi: Vec::new(),
    };
    for &i in indices {
        let image = if clean {
            load_image(&corpus.clean_path(i), Some(size))?
        } else {
            corpus.image(i, size)?
        };
        match prepare(variant, segmenter, &image) {
            Ok(p) => {
                out.indices.push(i);
                out.prepared.push(p);
            }
            Err(CoreError::EmptyRoi) => out.empty_roi.push(corpus.id(i).to_string()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

impl PreparedSet {
    pub fn labeled(&self, labels: &[usize]) -> Vec<LabeledImage> {
        self.indices
            .iter()
            .zip(&self.prepared)
            .map(|(&i, p)| LabeledImage {
                image: p.image.clone(),
                label: labels[i],
            })
            .collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.prepared.iter().map(|p| p.image.clone()).collect()
    }
}

/// Builds and trains a classifier. The initial weights depend only on the
/// experiment seed, so variants trained with the same config start equal.
pub fn train_classifier(
    config: &ExperimentConfig,
    input_size: usize,
    classes: &[String],
    train: &[LabeledImage],
    val: &[LabeledImage],
) -> CliResult<(Network<f32>, Vec<PhaseRecord>)> {
    if train.is_empty() {
        return Err(invalid("classifier training set is empty"));
    }
    let mut cc = config.model.classifier.clone();
    cc.input_size = input_size;
    cc.validate()?;
    let net = init_classifier(&cc, classes, derive_seed(config.seed, "classifier-init"))?;
    Ok(train_two_phase(net, train, val, &config.schedule.classifier, &config.augmentation.classifier)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub image_id: String,
    pub truth: String,
    pub predicted: String,
    pub probabilities: Vec<f32>,
}

pub const PREDICT_BATCH: usize = 32;

/// Probabilities and arg-max class for each prepared image.
pub fn predict(net: &Network<f32>, set: &PreparedSet) -> CliResult<(Vec<Vec<f32>>, Vec<usize>)> {
    let probs = predict_proba_batch(net, &set.images(), PREDICT_BATCH)?;
    let pred = probs.iter().map(|p| sgxp_core::classification::arg_max(p)).collect();
    Ok((probs, pred))
}


/// `target` relative to the directory `base`; both must exist.
pub fn relative_to(target: &Path, base: &Path) -> CliResult<PathBuf> {
    let canon = |p: &Path| std::fs::canonicalize(p).map_err(|e| invalid(format!("{}: {e}", p.display())));
    let (t, b) = (canon(target)?, canon(base)?);
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    Ok(out)
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

/// Counts keyed by name, in a stable order.
pub fn tally<'a>(keys: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for k in keys {
        *m.entry(k.to_string()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_follows_the_corpus_layout() {
        assert_eq!(sibling(Path::new("c/images/a.pgm"), "masks"), PathBuf::from("c/masks/a.pgm"));
        assert_eq!(sibling(Path::new("/x/y/images/b.pgm"), "clean"), PathBuf::from("/x/y/clean/b.pgm"));
    }

    #[test]
    fn relative_paths_walk_up_and_down() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(d.path().join("a/images")).unwrap();
        std::fs::create_dir_all(d.path().join("b/c")).unwrap();
        std::fs::write(d.path().join("a/images/x.pgm"), b"").unwrap();
        let r = relative_to(&d.path().join("a/images/x.pgm"), &d.path().join("b/c")).unwrap();
        assert_eq!(r, PathBuf::from("../../a/images/x.pgm"));
        assert!(relative_to(&d.path().join("missing"), d.path()).is_err());
    }
}
