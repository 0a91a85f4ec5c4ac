use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::{json, Value};
use sgxp_core::dataio::{
    constrained_split, make_generalization_folds, save_manifest, ExperimentMode, Manifest, Split, SplitSpec,
};

use crate::data::{relative_to, tally, Corpus};
use crate::error::CliResult;
use crate::output::OutDir;
use crate::settings::ConfigArgs;

/// Assigns train/val/test, grouped by patient and stratified by class and
/// source. Writes `manifest.csv` with paths relative to `--out`.
#[derive(clap::Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Fraction of the non-test records used for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub no_group_by_patient: bool,
    #[arg(long)]
    pub no_stratify_source: bool,
    #[arg(long)]
    pub no_balance_class: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Per-split class and source counts.
pub fn split_counts(m: &Manifest) -> Value {
    let mut out = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        let idx = m.indices_in(s);
        out.insert(
            s.as_str(),
            json!({
                "n": idx.len(),
                "classes": tally(idx.iter().map(|&i| m.records[i].class_label.as_str())),
                "sources": tally(idx.iter().map(|&i| m.records[i].source.as_str())),
            }),
        );
    }
    json!(out)
}

/// Fold sizes and members for the cross-source mode.
pub fn folds_report(m: &Manifest, seed: u64) -> CliResult<Value> {
    let folds = make_generalization_folds(m, seed)?;
    Ok(json!(folds
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let ids = |ix: &[usize]| ix.iter().map(|&i| m.records[i].id.clone()).collect::<Vec<_>>();
            json!({
                "fold": k + 1,
                "negatives": f.negatives.len(),
                "positives": f.positives.len(),
                "sources": tally(f.negatives.iter().chain(&f.positives).map(|&i| m.records[i].source.as_str())),
                "negative_ids": ids(&f.negatives),
                "positive_ids": ids(&f.positives),
            })
        })
        .collect::<Vec<_>>()))
}

pub fn run(args: &SplitArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = Corpus::load(&args.manifest)?;
    let spec = SplitSpec {
        test_fraction: args.test_fraction,
        val_fraction: args.val_fraction,
        seed: cfg.seed,
        group_by_patient: !args.no_group_by_patient,
        stratify_source: !args.no_stratify_source,
        balance_class: !args.no_balance_class,
    };
    let outcome = constrained_split(&corpus.manifest, &spec)?;
    let out = OutDir::create(&args.out)?;
    let mut m = outcome.apply(&corpus.manifest);
    for i in 0..m.len() {
        m.records[i].image_path = relative_to(&corpus.image_path(i), out.root())?;
    }
    out.write_json("config.json", &cfg)?;
    save_manifest(&m, &out.join("manifest.csv"))?;
    let folds = match cfg.mode {
        ExperimentMode::CovidGeneralization2Fold => folds_report(&m, cfg.seed)?,
        _ => Value::Null,
    };
    out.write_json(
        "report.json",
        &json!({
            "command": "split",
            "spec": spec,
            "splits": split_counts(&m),
            "warnings": outcome.warnings,
            "folds": folds,
        }),
    )?;
    out.finish()
}
