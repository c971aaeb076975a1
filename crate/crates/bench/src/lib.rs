//! Shared fixtures for the benchmark targets: deterministic embedding maps,
//! scenes, and networks sized so a benchmark iteration stays under a few
//! hundred milliseconds.

use panolab_core::datagen::{
    generate_scene, synthetic_embedding_map, EmbeddingFixture, Scene, SceneSpec, ThingRecipe,
    ThingShape,
};
use panolab_core::network::Network;
use panolab_core::{ClassDef, ClassKind, ClassTable};

/// Embedding blobs for clustering benchmarks; class 0 covers every pixel.
pub fn embedding_fixture(height: usize, width: usize, dim: usize, instances: usize) -> EmbeddingFixture {
    synthetic_embedding_map(height, width, dim, instances, 0, 0.5, 710).unwrap()
}

/// The class table matching [`embedding_fixture`].
pub fn single_thing_table() -> ClassTable {
    ClassTable::new(vec![ClassDef { name: "obj".into(), kind: ClassKind::Thing }]).unwrap()
}

/// A small street-like scene: sky and ground bands with discs and boxes.
pub fn street_scene(seed: u64) -> (ClassTable, Scene) {
    let classes = ClassTable::new(vec![
        ClassDef { name: "sky".into(), kind: ClassKind::Stuff },
        ClassDef { name: "ground".into(), kind: ClassKind::Stuff },
        ClassDef { name: "disc".into(), kind: ClassKind::Thing },
        ClassDef { name: "box".into(), kind: ClassKind::Thing },
    ])
    .unwrap();
    let spec = SceneSpec {
        height: 64,
        width: 64,
        sky_class: "sky".into(),
        sky_color: [0.35, 0.55, 0.90],
        ground_class: "ground".into(),
        ground_color: [0.30, 0.45, 0.25],
        horizon: (24, 44),
        things: vec![
            ThingRecipe {
                class: "disc".into(),
                shape: ThingShape::Disc,
                count: (1, 3),
                size: (8, 14),
                color: [0.85, 0.15, 0.15],
                color_jitter: 0.05,
            },
            ThingRecipe {
                class: "box".into(),
                shape: ThingShape::Rectangle,
                count: (1, 2),
                size: (6, 10),
                color: [0.95, 0.80, 0.20],
                color_jitter: 0.05,
            },
        ],
        placement: None,
    };
    let scene = generate_scene(&spec, &classes, seed).unwrap();
    (classes, scene)
}

/// The production-shaped instance net: 3 input channels, 12 embedding dims.
pub fn instance_net() -> Network {
    Network::glorot(&[3, 16, 16, 12], 7).unwrap()
}
