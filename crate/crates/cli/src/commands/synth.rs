use std::path::PathBuf;

use serde_json::json;
use sgxp_core::dataio::{generate_synthetic_corpus, save_image, GlyphMode, SynthConfig};

use crate::data::tally;
use crate::error::CliResult;
use crate::output::OutDir;
use crate::settings::ConfigArgs;

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum GlyphArg {
    None,
    ByClass,
    BySource,
}

/// Writes a synthetic radiograph corpus with lung masks and a manifest.
#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Image side in pixels; defaults to model.input_size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Class-correlated corner glyphs; same as `--glyphs by-class`.
    #[arg(long, conflicts_with = "glyphs")]
    pub bias: bool,
    #[arg(long, value_enum)]
    pub glyphs: Option<GlyphArg>,
    /// 2 (normal, lung_opacity) or 3 (adds covid19).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub glyph_rate: Option<f64>,
    /// Give each source its own background texture.
    #[arg(long)]
    pub source_texture: bool,
    /// Probability that a patient comes from its class's preferred source.
    #[arg(long)]
    pub source_class_correlation: Option<f64>,
    #[arg(long)]
    pub opacity_strength: Option<f64>,
    /// Permute labels after rendering.
    #[arg(long)]
    pub shuffle_labels: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let cfg = args.cfg.resolve()?;
    let d = SynthConfig::default();
    let glyphs = match (args.bias, args.glyphs) {
        (true, _) => GlyphMode::ByClass,
        (false, Some(GlyphArg::ByClass)) => GlyphMode::ByClass,
        (false, Some(GlyphArg::BySource)) => GlyphMode::BySource,
        (false, Some(GlyphArg::None) | None) => GlyphMode::None,
    };
    let synth = SynthConfig {
        n: args.n,
        size: args.size.unwrap_or(cfg.model.input_size),
        classes: args.classes,
        glyphs,
        glyph_rate: args.glyph_rate.unwrap_or(d.glyph_rate),
        source_texture: args.source_texture,
        source_class_correlation: args.source_class_correlation.unwrap_or(d.source_class_correlation),
        opacity_strength: args.opacity_strength.unwrap_or(d.opacity_strength),
        shuffle_labels: args.shuffle_labels,
        seed: cfg.seed,
    };
    synth.validate()?;
    let corpus = generate_synthetic_corpus(&synth)?;
    let out = OutDir::create(&args.out)?;
    out.write_json("config.json", &cfg)?;
    corpus.write(out.root())?;
    if glyphs != GlyphMode::None {
        let dir = out.dir("clean")?;
        for (r, img) in corpus.manifest.records.iter().zip(&corpus.clean_images) {
            save_image(img, &dir.join(format!("{}.pgm", r.id)))?;
        }
    }
    let records = &corpus.manifest.records;
    out.write_json(
        "report.json",
        &json!({
            "command": "synth",
            "synth": synth,
            "n": records.len(),
            "classes": tally(records.iter().map(|r| r.class_label.as_str())),
            "sources": tally(records.iter().map(|r| r.source.as_str())),
            "patients": tally(records.iter().map(|r| r.patient_id.as_str())).len(),
            "clean_images": glyphs != GlyphMode::None,
        }),
    )?;
    out.finish()
}
