use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::{json, Value};
use sgxp_core::dataio::{parse_manifest, relabel_by_source, Manifest};
use sgxp_review::ReviewStore;

use super::split::{folds_report, split_counts};
use crate::data::{require_file, tally};
use crate::error::{invalid, runtime, CliResult};
use crate::output::OutDir;
use crate::settings::ConfigArgs;

/// Dataset statistics from manifest metadata (images need not exist), and
/// export of reviewer-edited masks for the next `seg-train` round.
#[derive(clap::Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Copy every edited mask of `--store` to `corrections/{id}.pgm`.
    #[arg(long, requires = "store")]
    pub export_corrections: bool,
    /// Review store (a `seg-predict` output directory).
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn manifest_stats(m: &Manifest, seed: u64) -> Value {
    let mut by_source: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &m.records {
        *by_source
            .entry(r.source.as_str())
            .or_default()
            .entry(r.class_label.as_str().to_string())
            .or_insert(0) += 1;
    }
    let relabeled = relabel_by_source(m);
    let folds = match folds_report(m, seed) {
        Ok(v) => v
            .as_array()
            .map(|a| {
                json!(a
                    .iter()
                    .map(|f| json!({"fold": f["fold"], "negatives": f["negatives"], "positives": f["positives"], "sources": f["sources"]}))
                    .collect::<Vec<_>>())
            })
            .unwrap_or(Value::Null),
        Err(e) => json!({ "unavailable": e.to_string() }),
    };
    json!({
        "n": m.len(),
        "patients": tally(m.records.iter().map(|r| r.patient_id.as_str())).len(),
        "classes": tally(m.records.iter().map(|r| r.class_label.as_str())),
        "sources": tally(m.records.iter().map(|r| r.source.as_str())),
        "projections": tally(m.records.iter().map(|r| r.projection.as_str())),
        "class_by_source": by_source,
        "source_labels": tally(relabeled.records.iter().map(|r| r.class_label.as_str())),
        "splits": if m.has_split() { split_counts(m) } else { Value::Null },
        "generalization_folds": folds,
    })
}

pub fn run(args: &StatsArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    if args.manifest.is_none() && !args.export_corrections {
        return Err(invalid("nothing to do: give --manifest and/or --export-corrections --store DIR"));
    }
    let manifest = match &args.manifest {
        Some(p) => {
            require_file(p, "manifest")?;
            let f = std::fs::File::open(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            Some(parse_manifest(f, p)?)
        }
        None => None,
    };
    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    let mut report = json!({ "command": "stats" });
    if let Some(m) = &manifest {
        report["dataset"] = manifest_stats(m, cfg.seed);
    }
    if args.export_corrections {
        let dir = args.store.as_ref().expect("clap enforces --store");
        let store = ReviewStore::open(dir);
        let edited = store.edited()?;
        out.dir("corrections")?;
        let mut exported = Vec::new();
        for it in &edited {
            let src = dir.join(&it.mask);
            let bytes = std::fs::read(&src).map_err(|e| runtime(format!("{}: {e}", src.display())))?;
            let rel = format!("corrections/{}.pgm", it.image_id);
            out.write_bytes(&rel, &bytes)?;
            exported.push(json!({ "image_id": it.image_id, "revision": it.revision, "file": rel }));
        }
        let all = store.list(None)?;
        report["review"] = json!({
            "items": all.len(),
            "status": tally(all.iter().map(|i| i.status.as_str())),
            "exported": exported,
        });
    }
    out.write_json("report.json", &report)?;
    out.finish()
}
