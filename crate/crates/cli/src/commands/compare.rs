use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};
use sgxp_core::autodiff::save_checkpoint;
use sgxp_core::classification::{class_names, wilcoxon_signed_rank};
use sgxp_core::dataio::{ExperimentMode, Split};
use sgxp_core::pipeline::{explain_image, Variant};
use sgxp_core::xai::Method;

use super::clf::{score, Front};
use super::explain::{explain_rng, ExplainOptions};
use super::heatmap::aggregate_regions;
use crate::data::{predict, task_for, train_classifier, Corpus};
use crate::error::{invalid, CliResult};
use crate::output::OutDir;
use crate::settings::ConfigArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantArg {
    Full,
    Segmented,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::Segmented => Variant::Segmented,
        }
    }
}

/// Trains and evaluates two pipeline variants with the same seed and
/// reports paired per-class F1, a Wilcoxon test over the pairs, and both
/// sets of aggregate heatmaps.
#[derive(clap::Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// U-Net checkpoint; required when a variant is segmented.
    #[arg(long)]
    pub seg_model: Option<PathBuf>,
    /// The two variants to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["full", "segmented"])]
    pub variants: Vec<VariantArg>,
    #[command(flatten)]
    pub explain: ExplainOptions,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Serialize)]
struct F1Entry {
    variant_index: usize,
    variant: Variant,
    class: String,
    f1: f64,
}

pub fn run(args: &CompareArgs) -> CliResult<()> {
    let base = args.cfg.resolve()?;
    if !matches!(base.mode, ExperimentMode::Multiclass | ExperimentMode::SourceBias) {
        return Err(invalid(format!(
            "compare runs on a train/val/test split; mode {} is not supported",
            base.mode.as_str()
        )));
    }
    if args.variants.len() != 2 {
        return Err(invalid("--variants takes exactly two variants"));
    }
    let xcfg = args.explain.config()?;
    let corpus = Corpus::load(&args.manifest)?;
    corpus.require_split()?;
    let task = task_for(base.mode, &corpus.manifest)?;
    let (tr_ix, va_ix, te_ix) = (
        corpus.manifest.indices_in(Split::Train),
        corpus.manifest.indices_in(Split::Val),
        corpus.manifest.indices_in(Split::Test),
    );
    if te_ix.is_empty() {
        return Err(invalid("test split is empty"));
    }
    let has_clean = te_ix.iter().all(|&i| corpus.clean_path(i).is_file());

    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &base)?;
    out.dir("checkpoints")?;

    let mut variants = Vec::new();
    let mut f1 = Vec::new();
    let mut per_variant_f1 = Vec::new();
    let mut model_classes = Vec::new();
    for (vi, &va) in args.variants.iter().enumerate() {
        let variant = Variant::from(va);
        let mut cfg = base.clone();
        cfg.segmented = variant == Variant::Segmented;
        let cfg = cfg.resolved();
        let front = Front::new(&cfg, args.seg_model.as_deref(), variant)?;
        let input = front.input_size(&cfg);
        let tr = front.prepare(&corpus, &tr_ix, &cfg, false)?;
        let vl = front.prepare(&corpus, &va_ix, &cfg, false)?;
        let te = front.prepare(&corpus, &te_ix, &cfg, false)?;
        let (net, history) =
            train_classifier(&cfg, input, &task.classes, &tr.labeled(&task.labels), &vl.labeled(&task.labels))?;
        let tag = format!("{vi}_{}", variant.as_str());
        save_checkpoint(&net, &out.join(&format!("checkpoints/classifier_{tag}.ckpt")))?;
        model_classes.push(class_names(&net)?);

        let scored = score(&net, &corpus, &te, &task.labels, &task.classes)?;
        for m in &scored.report.per_class {
            f1.push(F1Entry {
                variant_index: vi,
                variant,
                class: m.class.clone(),
                f1: m.f1,
            });
        }
        per_variant_f1.push(scored.report.per_class.iter().map(|m| m.f1).collect::<Vec<f64>>());

        let clean_accuracy = if has_clean {
            let ct = front.prepare(&corpus, &te_ix, &cfg, true)?;
            let (_, pred) = predict(&net, &ct)?;
            let hits = ct.indices.iter().zip(&pred).filter(|(&i, &k)| task.labels[i] == k).count();
            json!(hits as f64 / ct.indices.len().max(1) as f64)
        } else {
            Value::Null
        };

        let mut regions = Vec::new();
        for method in args.explain.method.methods() {
            for ((&i, p), pr) in te.indices.iter().zip(&te.prepared).zip(&scored.predictions) {
                let k = task.classes.iter().position(|c| *c == pr.predicted).expect("predicted class is known");
                let mut rng = explain_rng(cfg.seed, method, corpus.id(i));
                let e = explain_image(method, &net, p, k, &xcfg, &mut rng)?;
                regions.push((method, pr.predicted.clone(), e.region));
            }
        }
        let heatmaps = aggregate_regions(&out, &format!("{tag}_"), &tag, &regions)?;

        variants.push(json!({
            "index": vi,
            "variant": variant,
            "input_size": input,
            "n_train": tr.indices.len(),
            "n_val": vl.indices.len(),
            "n_test": te.indices.len(),
            "empty_roi": ([tr.empty_roi, vl.empty_roi, te.empty_roi].concat()),
            "history": history,
            "evaluation": scored.report,
            "roc_auc": scored.auc,
            "accuracy": scored.report.accuracy,
            "clean_accuracy": clean_accuracy,
            "heatmaps": heatmaps,
        }));
    }
    if model_classes[0] != model_classes[1] {
        return Err(invalid(format!(
            "variants disagree on classes: {:?} vs {:?}",
            model_classes[0], model_classes[1]
        )));
    }
    let wilcoxon = wilcoxon_signed_rank(&per_variant_f1[0], &per_variant_f1[1])?;
    let methods: Vec<Method> = args.explain.method.methods();
    out.write_json(
        "report.json",
        &json!({
            "command": "compare",
            "mode": base.mode,
            "classes": task.classes,
            "variants": variants,
            "f1": f1,
            "wilcoxon": wilcoxon,
            "methods": methods,
        }),
    )?;
    out.finish()
}
