use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::{json, Value};
use sgxp_core::autodiff::{save_checkpoint, Network};
use sgxp_core::classification::{class_names, evaluate, fold_macro_f1, roc_auc, EvaluationReport};
use sgxp_core::dataio::{make_generalization_folds, ExperimentConfig, ExperimentMode, Split};
use sgxp_core::pipeline::{Segmenter, Variant};
use sgxp_core::seed::derive_seed;

use crate::data::{
    load_network, load_segmentation_model, parse_split, predict, prepare_records, task_for, train_classifier, Corpus,
    Prediction, PreparedSet,
};
use crate::error::{invalid, CliResult};
use crate::output::OutDir;
use crate::settings::ConfigArgs;

pub const CLASSIFIER_CHECKPOINT: &str = "checkpoints/classifier.ckpt";

pub fn fold_checkpoint(k: usize) -> String {
    format!("checkpoints/classifier_fold{k}.ckpt")
}

/// Splits `members` into (train, val) with `fraction` of each class in
/// val. Order within a class comes from a seeded hash of the index.
pub fn stratified_holdout(members: &[usize], labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in members {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut ix) in by_class {
        ix.sort_by_key(|&i| (derive_seed(seed, &i.to_string()), i));
        let k = (ix.len() as f64 * fraction).round() as usize;
        let k = k.min(ix.len().saturating_sub(1));
        val.extend_from_slice(&ix[..k]);
        train.extend_from_slice(&ix[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Variant and segmenter for a config.
pub struct Front {
    pub variant: Variant,
    pub unet: Option<Network<f32>>,
}

impl Front {
    pub fn new(cfg: &ExperimentConfig, seg_model: Option<&std::path::Path>, variant: Variant) -> CliResult<Front> {
        let unet = match variant {
            Variant::Segmented => Some(load_segmentation_model(seg_model, cfg.model.input_size)?),
            Variant::Full => None,
        };
        Ok(Front { variant, unet })
    }

    pub fn segmenter(&self) -> Option<Segmenter<'_>> {
        self.unet.as_ref().map(Segmenter::new)
    }

    /// Side of the classifier input.
    pub fn input_size(&self, cfg: &ExperimentConfig) -> usize {
        match self.segmenter() {
            Some(s) => s.roi_size,
            None => cfg.model.input_size,
        }
    }

    pub fn prepare(&self, corpus: &Corpus, indices: &[usize], cfg: &ExperimentConfig, clean: bool) -> CliResult<PreparedSet> {
        let seg = self.segmenter();
        prepare_records(corpus, indices, cfg.model.input_size, self.variant, seg.as_ref(), clean)
    }
}

pub fn variant_of(cfg: &ExperimentConfig) -> Variant {
    if cfg.segmented {
        Variant::Segmented
    } else {
        Variant::Full
    }
}

/// Confusion-based metrics, one-vs-rest ROC AUC per class (null when a
/// class has no positives or no negatives) and per-image predictions.
pub struct Scored {
    pub report: EvaluationReport,
    pub auc: BTreeMap<String, Option<f64>>,
    pub predictions: Vec<Prediction>,
}

pub fn score(
    net: &Network<f32>,
    corpus: &Corpus,
    set: &PreparedSet,
    labels: &[usize],
    classes: &[String],
) -> CliResult<Scored> {
    let (probs, pred) = predict(net, set)?;
    let truth: Vec<usize> = set.indices.iter().map(|&i| labels[i]).collect();
    let report = evaluate(&pred, &truth, classes)?;
    let mut auc = BTreeMap::new();
    for (k, c) in classes.iter().enumerate() {
        let s: Vec<f64> = probs.iter().map(|p| p[k] as f64).collect();
        let l: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        auc.insert(c.clone(), roc_auc(&s, &l).ok().map(|r| r.auc));
    }
    let predictions = set
        .indices
        .iter()
        .zip(&probs)
        .zip(&pred)
        .map(|((&i, p), &k)| Prediction {
            image_id: corpus.id(i).to_string(),
            truth: classes[labels[i]].clone(),
            predicted: classes[k].clone(),
            probabilities: p.clone(),
        })
        .collect();
    Ok(Scored {
        report,
        auc,
        predictions,
    })
}

/// Trains the classifier for the configured mode. In the two-fold mode
/// one model is trained per fold and tested on the other fold.
#[derive(clap::Args, Debug)]
pub struct ClfTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// U-Net checkpoint; required with `--segmented`.
    #[arg(long)]
    pub seg_model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run_train(args: &ClfTrainArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = Corpus::load(&args.manifest)?;
    let task = task_for(cfg.mode, &corpus.manifest)?;
    let front = Front::new(&cfg, args.seg_model.as_deref(), variant_of(&cfg))?;
    let input = front.input_size(&cfg);
    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    out.dir("checkpoints")?;

    let report = match cfg.mode {
        ExperimentMode::Multiclass | ExperimentMode::SourceBias => {
            corpus.require_split()?;
            let tr = front.prepare(&corpus, &corpus.manifest.indices_in(Split::Train), &cfg, false)?;
            let va = front.prepare(&corpus, &corpus.manifest.indices_in(Split::Val), &cfg, false)?;
            let (net, history) = train_classifier(&cfg, input, &task.classes, &tr.labeled(&task.labels), &va.labeled(&task.labels))?;
            save_checkpoint(&net, &out.join(CLASSIFIER_CHECKPOINT))?;
            let val = if va.indices.is_empty() {
                Value::Null
            } else {
                json!(score(&net, &corpus, &va, &task.labels, &task.classes)?.report)
            };
            json!({
                "n_train": tr.indices.len(),
                "n_val": va.indices.len(),
                "empty_roi": ([tr.empty_roi, va.empty_roi].concat()),
                "history": history,
                "val": val,
            })
        }
        ExperimentMode::CovidGeneralization2Fold => {
            let folds = make_generalization_folds(&corpus.manifest, cfg.seed)?;
            let members: Vec<Vec<usize>> = folds
                .iter()
                .map(|f| {
                    let mut m = [f.negatives.clone(), f.positives.clone()].concat();
                    m.sort_unstable();
                    m
                })
                .collect();
            let mut per_fold = Vec::new();
            let mut reports = Vec::new();
            for k in 0..2 {
                let seed = derive_seed(cfg.seed, &format!("fold{}-val", k + 1));
                let (tr_ix, va_ix) = stratified_holdout(&members[k], &task.labels, 0.2, seed);
                let tr = front.prepare(&corpus, &tr_ix, &cfg, false)?;
                let va = front.prepare(&corpus, &va_ix, &cfg, false)?;
                let te = front.prepare(&corpus, &members[1 - k], &cfg, false)?;
                let (net, history) =
                    train_classifier(&cfg, input, &task.classes, &tr.labeled(&task.labels), &va.labeled(&task.labels))?;
                save_checkpoint(&net, &out.join(&fold_checkpoint(k + 1)))?;
                let scored = score(&net, &corpus, &te, &task.labels, &task.classes)?;
                per_fold.push(json!({
                    "train_fold": k + 1,
                    "test_fold": 2 - k,
                    "n_train": tr.indices.len(),
                    "n_val": va.indices.len(),
                    "n_test": te.indices.len(),
                    "empty_roi": ([tr.empty_roi, va.empty_roi, te.empty_roi].concat()),
                    "history": history,
                    "test": scored.report,
                    "roc_auc": scored.auc["covid19"],
                }));
                reports.push(scored.report);
            }
            json!({ "folds": per_fold, "fold_macro_f1": fold_macro_f1(&reports)? })
        }
    };
    out.write_json(
        "report.json",
        &json!({
            "command": "clf-train",
            "mode": cfg.mode,
            "variant": front.variant,
            "classes": task.classes,
            "input_size": input,
            "result": report,
        }),
    )?;
    out.finish()
}

/// Evaluates a trained classifier on one split (or one generalization
/// fold) of a manifest.
#[derive(clap::Args, Debug)]
pub struct ClfEvalArgs {
    /// Classifier checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seg_model: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "test", conflicts_with = "fold")]
    pub split: Split,
    /// Evaluate on generalization fold 1 or 2 instead of a split.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub fold: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Maps the task's per-record labels onto the model's class order.
pub fn align_labels(model_classes: &[String], task_classes: &[String], labels: &[usize]) -> CliResult<Vec<usize>> {
    let map: Vec<Option<usize>> = task_classes
        .iter()
        .map(|c| model_classes.iter().position(|m| m == c))
        .collect();
    labels
        .iter()
        .map(|&l| {
            map[l].ok_or_else(|| {
                invalid(format!(
                    "manifest class {:?} is not one of the model's classes {model_classes:?}",
                    task_classes[l]
                ))
            })
        })
        .collect()
}

pub fn run_eval(args: &ClfEvalArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let net = load_network(&args.model, "classifier")?;
    let classes = class_names(&net)?;
    let corpus = Corpus::load(&args.manifest)?;
    let task = task_for(cfg.mode, &corpus.manifest)?;
    let labels = align_labels(&classes, &task.classes, &task.labels)?;
    let (indices, selection) = match args.fold {
        Some(k) => {
            let f = &make_generalization_folds(&corpus.manifest, cfg.seed)?[k as usize - 1];
            let mut m = [f.negatives.clone(), f.positives.clone()].concat();
            m.sort_unstable();
            (m, format!("fold{k}"))
        }
        None => {
            corpus.require_split()?;
            (corpus.manifest.indices_in(args.split), args.split.as_str().to_string())
        }
    };
    if indices.is_empty() {
        return Err(invalid(format!("no records in the {selection} selection; nothing to evaluate")));
    }
    let front = Front::new(&cfg, args.seg_model.as_deref(), variant_of(&cfg))?;
    let input = front.input_size(&cfg);
    if net.input_shape() != [1, input, input] {
        return Err(invalid(format!(
            "classifier expects {:?} but the {} pipeline produces {input}x{input}",
            net.input_shape(),
            front.variant.as_str()
        )));
    }
    let set = front.prepare(&corpus, &indices, &cfg, false)?;
    if set.indices.is_empty() {
        return Err(invalid("every selected image has an empty lung mask"));
    }
    let scored = score(&net, &corpus, &set, &labels, &classes)?;
    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    out.write_json(
        "report.json",
        &json!({
            "command": "clf-eval",
            "mode": cfg.mode,
            "variant": front.variant,
            "selection": selection,
            "classes": classes,
            "n": set.indices.len(),
            "empty_roi": set.empty_roi,
            "evaluation": scored.report,
            "roc_auc": scored.auc,
            "predictions": scored.predictions,
        }),
    )?;
    out.finish()
}
