use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;
use sgxp_core::dataio::{glyph_strip_mask, load_mask, save_heatmap};
use sgxp_core::xai::{aggregate_masks, HeatmapMeta, Method};
use sgxp_core::BinaryMask;

use super::explain::ExplainReport;
use crate::data::require_file;
use crate::error::{invalid, CliResult};
use crate::output::OutDir;
use crate::settings::ConfigArgs;

pub const ALL_CLASSES: &str = "all";

/// One aggregate heatmap as listed in a report.
#[derive(Clone, Debug, Serialize)]
pub struct HeatmapEntry {
    pub method: Method,
    pub class: String,
    pub n_images: usize,
    pub file: String,
    /// Share of heat inside the corner glyph strips of the synthetic layout.
    pub glyph_strip_mass: f64,
}

/// Averages regions per (method, class) and over all classes, writing
/// `heatmaps/{prefix}{method}_{class}.pfm`.
pub fn aggregate_regions(
    out: &OutDir,
    prefix: &str,
    model_id: &str,
    regions: &[(Method, String, BinaryMask)],
) -> CliResult<Vec<HeatmapEntry>> {
    let mut groups: BTreeMap<(Method, String), Vec<BinaryMask>> = BTreeMap::new();
    for (m, c, r) in regions {
        groups.entry((*m, c.clone())).or_default().push(r.clone());
        groups.entry((*m, ALL_CLASSES.to_string())).or_default().push(r.clone());
    }
    out.dir("heatmaps")?;
    let mut entries = Vec::new();
    for ((method, class), masks) in groups {
        let heat = aggregate_masks(
            &masks,
            HeatmapMeta {
                model_id: model_id.to_string(),
                class: class.clone(),
                method,
                n_images: masks.len(),
            },
        )?;
        let file = format!("heatmaps/{prefix}{}_{class}.pfm", method.as_str());
        save_heatmap(&heat.to_image(), &out.join(&file))?;
        let strips = if heat.width == heat.height {
            heat.mass_fraction(&glyph_strip_mask(heat.width))?
        } else {
            f64::NAN
        };
        entries.push(HeatmapEntry {
            method,
            class,
            n_images: heat.meta.n_images,
            file,
            glyph_strip_mass: strips,
        });
    }
    Ok(entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Predicted,
    Truth,
    Target,
}

/// Aggregates the per-image regions of an `explain` run into per-class
/// heatmaps.
#[derive(clap::Args, Debug)]
pub struct HeatmapArgs {
    /// Output directory of `sgxp explain`.
    #[arg(long)]
    pub explanations: PathBuf,
    #[arg(long, value_enum, default_value = "predicted")]
    pub group_by: GroupBy,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(args: &HeatmapArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let rp = args.explanations.join("report.json");
    require_file(&rp, "explain report")?;
    let text = std::fs::read_to_string(&rp).map_err(|e| invalid(format!("{}: {e}", rp.display())))?;
    let report: ExplainReport =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{} is not an explain report: {e}", rp.display())))?;
    if report.items.is_empty() {
        return Err(invalid("explain report lists no images"));
    }
    let mut regions = Vec::new();
    for it in &report.items {
        let p = args.explanations.join(&it.region);
        require_file(&p, "explanation region")?;
        let class = match args.group_by {
            GroupBy::Predicted => &it.predicted,
            GroupBy::Truth => &it.truth,
            GroupBy::Target => &it.target,
        };
        regions.push((it.method, class.clone(), load_mask(&p)?));
    }
    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    let entries = aggregate_regions(&out, "", &report.model_id, &regions)?;
    out.write_json(
        "report.json",
        &json!({
            "command": "heatmap",
            "model_id": report.model_id,
            "variant": report.variant,
            "group_by": args.group_by,
            "heatmaps": entries,
        }),
    )?;
    out.finish()
}
