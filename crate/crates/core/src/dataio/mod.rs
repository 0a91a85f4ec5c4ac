//! Manifests, splits, persistence formats and the synthetic corpus.

mod config;
mod folds;
mod formats;
mod manifest;
mod split;
mod synth;

pub use config::{set_path, AugmentationSpec, ExperimentConfig, ExperimentMode, ModelSpec, ScheduleSpec};
pub use folds::{make_generalization_folds, Fold};
pub use formats::{
    decode_pfm, encode_pfm, load_heatmap, load_image, load_mask, save_heatmap, save_image, save_mask, Pgm,
};
pub use manifest::{
    load_manifest, parse_manifest, relabel_by_source, resolve, save_manifest, Label, Manifest, Projection,
    SampleRecord, Source, Split,
};
pub use split::{constrained_split, SplitOutcome, SplitSpec};
pub use synth::{
    generate_synthetic_corpus, glyph_rect, glyph_strip_mask, Corner, Ellipse, GlyphMode, SynthConfig,
    SyntheticCorpus,
};
