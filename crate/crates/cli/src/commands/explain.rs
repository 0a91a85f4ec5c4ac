use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sgxp_core::classification::class_names;
use sgxp_core::dataio::{save_heatmap, save_mask, Split};
use sgxp_core::pipeline::{explain_image, ExplainConfig};
use sgxp_core::seed::{derive_rng, SeededRng};
use sgxp_core::xai::{Method, SuperpixelWeight};

use super::clf::{align_labels, variant_of, Front};
use crate::data::{load_network, parse_split, predict, task_for, Corpus};
use crate::error::{invalid, CliResult};
use crate::output::OutDir;
use crate::settings::ConfigArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MethodArg {
    Lime,
    GradCam,
    Both,
}

impl MethodArg {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Lime => vec![Method::Lime],
            MethodArg::GradCam => vec![Method::GradCam],
            MethodArg::Both => vec![Method::Lime, Method::GradCam],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    /// Explain the class the model predicts.
    Predicted,
    /// Explain the ground-truth class.
    Truth,
}

/// Explanation settings shared by `explain` and `compare`.
#[derive(clap::Args, Debug, Clone)]
pub struct ExplainOptions {
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    /// Perturbed samples per LIME explanation.
    #[arg(long)]
    pub lime_samples: Option<usize>,
    /// Superpixels kept per LIME explanation.
    #[arg(long)]
    pub lime_features: Option<usize>,
    /// Fraction of the CAM maximum kept in the Grad-CAM region.
    #[arg(long)]
    pub cam_threshold: Option<f64>,
}

impl ExplainOptions {
    pub fn config(&self) -> CliResult<ExplainConfig> {
        let mut c = ExplainConfig::default();
        if let Some(n) = self.lime_samples {
            c.lime.n_samples = n;
        }
        if let Some(n) = self.lime_features {
            c.lime.n_features = n;
        }
        if let Some(t) = self.cam_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("--cam-threshold {t} outside [0, 1]")));
            }
            c.cam_threshold = t;
        }
        c.lime.validate()?;
        Ok(c)
    }
}

/// Per-image random stream, independent of processing order.
pub fn explain_rng(seed: u64, method: Method, image_id: &str) -> SeededRng {
    derive_rng(seed, &format!("explain/{}/{image_id}", method.as_str()))
}

/// Writes per-image LIME superpixels and Grad-CAM maps for one split.
#[derive(clap::Args, Debug)]
pub struct ExplainArgs {
    /// Classifier checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seg_model: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value = "predicted")]
    pub target: TargetArg,
    /// Explain at most this many images (manifest order).
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub explain: ExplainOptions,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// One row of the explain report; `heatmap` reads these back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainedItem {
    pub image_id: String,
    pub method: Method,
    pub truth: String,
    pub predicted: String,
    pub target: String,
    /// Binary region, relative to the explain output directory.
    pub region: String,
    /// Continuous map (PFM), relative to the explain output directory.
    pub map: String,
    pub region_area: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub superpixels: Vec<SuperpixelWeight>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainReport {
    pub command: String,
    pub model_id: String,
    pub variant: sgxp_core::pipeline::Variant,
    pub classes: Vec<String>,
    pub target: String,
    pub empty_roi: Vec<String>,
    pub items: Vec<ExplainedItem>,
}

pub fn run(args: &ExplainArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let xcfg = args.explain.config()?;
    let net = load_network(&args.model, "classifier")?;
    let classes = class_names(&net)?;
    let corpus = Corpus::load(&args.manifest)?;
    corpus.require_split()?;
    let task = task_for(cfg.mode, &corpus.manifest)?;
    let labels = align_labels(&classes, &task.classes, &task.labels)?;
    let mut indices = corpus.manifest.indices_in(args.split);
    if let Some(n) = args.limit {
        indices.truncate(n);
    }
    if indices.is_empty() {
        return Err(invalid(format!("no records in the {} split", args.split.as_str())));
    }
    let front = Front::new(&cfg, args.seg_model.as_deref(), variant_of(&cfg))?;
    let input = front.input_size(&cfg);
    if net.input_shape() != [1, input, input] {
        return Err(invalid(format!("classifier expects {:?}, pipeline gives {input}x{input}", net.input_shape())));
    }
    let set = front.prepare(&corpus, &indices, &cfg, false)?;
    let (_, pred) = predict(&net, &set)?;

    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    let mut items = Vec::new();
    for ((&i, p), &k) in set.indices.iter().zip(&set.prepared).zip(&pred) {
        let id = corpus.id(i);
        let target = match args.target {
            TargetArg::Predicted => k,
            TargetArg::Truth => labels[i],
        };
        for method in args.explain.method.methods() {
            let mut rng = explain_rng(cfg.seed, method, id);
            let e = explain_image(method, &net, p, target, &xcfg, &mut rng)?;
            let region = format!("masks/{id}_{}.pgm", method.as_str());
            let map = format!("heatmaps/{id}_{}.pfm", method.as_str());
            out.dir("masks")?;
            out.dir("heatmaps")?;
            save_mask(&e.region, &out.join(&region))?;
            save_heatmap(&e.map, &out.join(&map))?;
            items.push(ExplainedItem {
                image_id: id.to_string(),
                method,
                truth: classes[labels[i]].clone(),
                predicted: classes[k].clone(),
                target: classes[target].clone(),
                region,
                map,
                region_area: e.region.count(),
                superpixels: e.superpixels,
            });
        }
    }
    let report = ExplainReport {
        command: "explain".into(),
        model_id: args
            .model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        variant: front.variant,
        classes,
        target: json!(args.target).as_str().unwrap_or_default().to_string(),
        empty_roi: set.empty_roi,
        items,
    };
    out.write_json("report.json", &report)?;
    out.finish()
}
