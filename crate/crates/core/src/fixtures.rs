//! Graphs shipped with the crate.

use crate::graph::LatentGraph;

pub const FIG4_JSON: &str = include_str!("../fixtures/fig4.json");
pub const FIG2_JSON: &str = include_str!("../fixtures/fig2.json");
pub const THREE_LEVEL_JSON: &str = include_str!("../fixtures/three_level.json");

/// Six latents over six pixels; the small worked example for mask effects.
pub fn fig4() -> LatentGraph {
    LatentGraph::from_json_str(FIG4_JSON).expect("bundled fixture parses")
}

/// Ten latents over eleven pixels with latent-to-latent skip edges.
pub fn fig2() -> LatentGraph {
    LatentGraph::from_json_str(FIG2_JSON).expect("bundled fixture parses")
}

/// Balanced three-level hierarchy: 2 top latents, 8 mid, 16 low, 32 pixels.
pub fn three_level() -> LatentGraph {
    LatentGraph::from_json_str(THREE_LEVEL_JSON).expect("bundled fixture parses")
}

/// All bundled graphs with their names.
pub fn all() -> Vec<(&'static str, LatentGraph)> {
    vec![("fig4", fig4()), ("fig2", fig2()), ("three_level", three_level())]
}
