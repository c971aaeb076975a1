//! End-to-end inference: semantic forward pass, instance embedding,
//! class-wise clustering, and fusion into a panoptic segmentation.

use anyhow::{anyhow, Result};
use panolab_core::clustering::{classwise_cluster, BandwidthTable, MeanShiftConfig};
use panolab_core::fusion::{fuse, FuseOptions, PanopticSegmentation};
use panolab_core::network::{network_input, Network};
use panolab_core::{ClassTable, EmbeddingMap, Image, InstanceMap, SemanticMap};

/// Argmax class labels from the semantic branch. Ties pick the lowest index.
pub fn semantic_prediction(
    image: &Image,
    net: &Network,
    classes: &ClassTable,
) -> Result<SemanticMap> {
    if net.output_channels() != classes.len() {
        return Err(anyhow!(
            "semantic model emits {} channels for {} classes",
            net.output_channels(),
            classes.len()
        ));
    }
    let input = network_input(image, net.input_channels())?;
    let cache = net.forward(&input)?;
    let logits = cache.output();
    let (h, w) = (logits.height, logits.width);
    let mut map = SemanticMap::filled(h, w, 0)?;
    for r in 0..h {
        for c in 0..w {
            let mut best = 0u16;
            let mut best_v = logits.at(0, r, c);
            for ch in 1..logits.channels {
                let v = logits.at(ch, r, c);
                if v > best_v {
                    best_v = v;
                    best = ch as u16;
                }
            }
            map.set_label(r, c, best);
        }
    }
    Ok(map)
}

/// Per-pixel embedding vectors from the instance branch.
pub fn instance_embedding(image: &Image, net: &Network) -> Result<EmbeddingMap> {
    let input = network_input(image, net.input_channels())?;
    let cache = net.forward(&input)?;
    let raw = EmbeddingMap::from_feature_map(cache.output());
    // reconstruct through the validating constructor to reject non-finite
    // activations before they reach the clustering stage
    Ok(EmbeddingMap::new(raw.height, raw.width, raw.dim, raw.values)?)
}

pub struct PipelineOutput {
    pub semantic: SemanticMap,
    pub embedding: EmbeddingMap,
    pub instances: InstanceMap,
    pub panoptic: PanopticSegmentation,
}

/// Runs both branches and fuses the results. `semantic_override` substitutes
/// a ground-truth semantic map for the ablation that isolates instance
/// quality from semantic errors.
pub fn run_pipeline(
    image: &Image,
    semantic_net: &Network,
    instance_net: &Network,
    classes: &ClassTable,
    bandwidths: &BandwidthTable,
    mean_shift: &MeanShiftConfig,
    semantic_override: Option<&SemanticMap>,
) -> Result<PipelineOutput> {
    let semantic = match semantic_override {
        Some(gt) => gt.clone(),
        None => semantic_prediction(image, semantic_net, classes)?,
    };
    let embedding = instance_embedding(image, instance_net)?;
    let instances = classwise_cluster(&embedding, &semantic, classes, bandwidths, mean_shift)?;
    let panoptic = fuse(&semantic, &instances, classes, &FuseOptions::default())?;
    Ok(PipelineOutput { semantic, embedding, instances, panoptic })
}
