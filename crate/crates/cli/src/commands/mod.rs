pub mod clf;
pub mod compare;
pub mod explain;
pub mod heatmap;
pub mod seg;
pub mod serve;
pub mod split;
pub mod stats;
pub mod synth;
