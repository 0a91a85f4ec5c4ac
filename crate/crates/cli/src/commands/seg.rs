use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;
use sgxp_core::augmentation::PairedSample;
use sgxp_core::autodiff::{save_checkpoint, Network};
use sgxp_core::dataio::{save_image, save_mask, Split};
use sgxp_core::pipeline::Segmenter;
use sgxp_core::seed::derive_rng;
use sgxp_core::segmentation::{build_unet, mask_metrics, predict_mask, summarize, train_segmenter, MaskMetrics};
use sgxp_review::ReviewStore;

use crate::data::{load_network, parse_split, Corpus};
use crate::error::{invalid, CliResult};
use crate::output::OutDir;
use crate::settings::ConfigArgs;

pub const UNET_CHECKPOINT: &str = "checkpoints/unet.ckpt";

/// Trains the lung U-Net on the train split (validation split for model
/// selection) and reports held-out mask metrics on the test split.
#[derive(clap::Args, Debug)]
pub struct SegTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reviewer corrections (`{id}.pgm`) that replace the corpus masks.
    #[arg(long)]
    pub corrections: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn samples(corpus: &Corpus, split: Split, size: usize, corrections: Option<&std::path::Path>) -> CliResult<Vec<PairedSample>> {
    corpus
        .manifest
        .indices_in(split)
        .into_iter()
        .map(|i| Ok(PairedSample::new(corpus.image(i, size)?, Some(corpus.mask(i, size, corrections)?))?))
        .collect()
}

#[derive(Serialize)]
struct HeldOut {
    raw: Option<sgxp_core::segmentation::MetricSummary>,
    postprocessed: Option<sgxp_core::segmentation::MetricSummary>,
}

pub fn run_train(args: &SegTrainArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = Corpus::load(&args.manifest)?;
    corpus.require_split()?;
    let size = cfg.model.input_size;
    let corrections = args.corrections.as_deref();
    if let Some(dir) = corrections {
        if !dir.is_dir() {
            return Err(invalid(format!("corrections directory {} does not exist", dir.display())));
        }
    }
    let train = samples(&corpus, Split::Train, size, corrections)?;
    let val = samples(&corpus, Split::Val, size, corrections)?;
    let test = samples(&corpus, Split::Test, size, corrections)?;
    if train.is_empty() {
        return Err(invalid("train split is empty"));
    }
    let corrected = corpus
        .manifest
        .records
        .iter()
        .filter(|r| corrections.is_some_and(|d| d.join(format!("{}.pgm", r.id)).is_file()))
        .count();

    let arch = build_unet(&cfg.model.unet)?;
    let net = Network::new(arch, &mut derive_rng(cfg.seed, "unet-init"))?;
    let mut rng = derive_rng(cfg.seed, "segmentation-train");
    let (net, history) = train_segmenter(
        net,
        &train,
        &val,
        &cfg.schedule.segmentation,
        &cfg.augmentation.segmentation,
        &mut rng,
    )?;

    let seg = Segmenter::new(&net);
    let mut raw = Vec::new();
    let mut post = Vec::new();
    for s in &test {
        let truth = s.mask.as_ref().expect("samples carry masks");
        raw.push(mask_metrics(&predict_mask(&net, &s.image, seg.threshold)?, truth)?);
        post.push(mask_metrics(&seg.lung_mask(&s.image)?, truth)?);
    }

    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    out.dir("checkpoints")?;
    save_checkpoint(&net, &out.join(UNET_CHECKPOINT))?;
    out.write_json(
        "report.json",
        &json!({
            "command": "seg-train",
            "n_train": train.len(),
            "n_val": val.len(),
            "n_test": test.len(),
            "corrected_masks": corrected,
            "history": history,
            "test": HeldOut { raw: summarize(&raw), postprocessed: summarize(&post) },
        }),
    )?;
    out.finish()
}

/// Predicts and cleans lung masks, and initializes a review store in the
/// output directory with every prediction pending.
#[derive(clap::Args, Debug)]
pub struct SegPredictArgs {
    /// U-Net checkpoint from `seg-train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only predict this split.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Serialize)]
struct PredictedItem {
    image_id: String,
    area: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MaskMetrics>,
}

pub fn run_predict(args: &SegPredictArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let net = load_network(&args.model, "segmentation model")?;
    let shape = net.input_shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
        return Err(invalid(format!("{} is not a single-channel square segmenter", args.model.display())));
    }
    let size = shape[1];
    let corpus = Corpus::load(&args.manifest)?;
    let indices: Vec<usize> = match args.split {
        Some(s) => corpus.manifest.indices_in(s),
        None => (0..corpus.manifest.len()).collect(),
    };
    if indices.is_empty() {
        return Err(invalid("no records selected for prediction"));
    }

    let out = OutDir::create(&args.out)?;
    let truth_dir = crate::data::sibling(&corpus.image_path(indices[0]), "masks");
    let truth_dir = truth_dir.parent().expect("mask path has a parent");
    if truth_dir.is_dir() && std::fs::canonicalize(truth_dir).ok() == std::fs::canonicalize(out.join("masks")).ok() {
        return Err(invalid("--out would overwrite the corpus masks; choose another directory"));
    }
    out.write_json("config.json", &cfg)?;
    out.dir("images")?;
    out.dir("masks")?;

    let seg = Segmenter::new(&net);
    let mut items = Vec::new();
    let mut metrics = Vec::new();
    let mut empty = Vec::new();
    let mut ids = Vec::new();
    for &i in &indices {
        let id = corpus.id(i).to_string();
        let image = corpus.image(i, size)?;
        let mask = seg.lung_mask(&image)?;
        save_image(&image, &out.join(&ReviewStore::image_rel(&id)))?;
        save_mask(&mask, &out.join(&ReviewStore::mask_rel(&id)))?;
        let truth = corpus.mask_path(i, None);
        let m = if truth.is_file() {
            Some(mask_metrics(&mask, &corpus.mask(i, size, None)?)?)
        } else {
            None
        };
        metrics.extend(m.clone());
        if mask.is_empty() {
            empty.push(id.clone());
        }
        items.push(PredictedItem {
            image_id: id.clone(),
            area: mask.count(),
            metrics: m,
        });
        ids.push(id);
    }
    ReviewStore::initialize(out.root(), &ids)?;
    let summary = if metrics.len() == items.len() { summarize(&metrics) } else { None };
    out.write_json(
        "report.json",
        &json!({
            "command": "seg-predict",
            "input_size": size,
            "n": items.len(),
            "empty_masks": empty,
            "metrics": summary,
            "items": items,
        }),
    )?;
    out.finish()
}
