//! Merges a semantic map and an instance map into one panoptic segmentation.
//!
//! Each stuff class present in the image becomes exactly one segment
//! (possibly disconnected); each instance id becomes one thing segment.
//! Segment ids are dense `1..=S`: stuff segments first in class order, then
//! instance segments in canonical (first-occurrence) id order, so the result
//! does not depend on how the input instance map happens to be numbered.
//! IGNORE pixels map to segment id 0 (void).

use crate::types::{ClassKind, ClassTable, InstanceMap, SemanticMap, IGNORE_LABEL};
use crate::{Error, Result};

/// One row of the segment table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub id: u32,
    pub class_index: u16,
    pub area: usize,
}

/// Per-pixel segment ids plus the segment table. Ids are dense `1..=S` in
/// table order; id 0 is void and has no table row.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticSegmentation {
    pub height: usize,
    pub width: usize,
    pub segment_map: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

impl PanopticSegmentation {
    /// Validates the dense-id and area invariants.
    pub fn new(
        height: usize,
        width: usize,
        segment_map: Vec<u32>,
        segments: Vec<SegmentInfo>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || segment_map.len() != height * width {
            return Err(Error::Dimension(format!(
                "segment map of {} values does not cover {height}x{width}",
                segment_map.len()
            )));
        }
        for (k, seg) in segments.iter().enumerate() {
            if seg.id != (k + 1) as u32 {
                return Err(Error::Consistency(format!(
                    "segment ids must be dense from 1, found {} at row {k}",
                    seg.id
                )));
            }
        }
        let mut areas = vec![0usize; segments.len()];
        for &id in &segment_map {
            if id > segments.len() as u32 {
                return Err(Error::Consistency(format!(
                    "segment map references id {id} outside the table"
                )));
            }
            if id > 0 {
                areas[(id - 1) as usize] += 1;
            }
        }
        for (seg, &area) in segments.iter().zip(&areas) {
            if seg.area != area {
                return Err(Error::Consistency(format!(
                    "segment {} area is {} in the table but {} pixels",
                    seg.id, seg.area, area
                )));
            }
        }
        Ok(Self { height, width, segment_map, segments })
    }

    pub fn class_of(&self, id: u32) -> Option<u16> {
        if id == 0 {
            return None;
        }
        self.segments.get((id - 1) as usize).map(|s| s.class_index)
    }

    /// Projects segments back to class labels; void pixels become IGNORE.
    pub fn project_semantic(&self) -> SemanticMap {
        let labels = self
            .segment_map
            .iter()
            .map(|&id| self.class_of(id).unwrap_or(IGNORE_LABEL))
            .collect();
        SemanticMap { height: self.height, width: self.width, labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuseOptions {
    /// Segments smaller than this many pixels are dropped (their pixels
    /// become void). 0 disables the filter.
    pub min_segment_area: usize,
}

impl Default for FuseOptions {
    fn default() -> FuseOptions {
        FuseOptions { min_segment_area: 0 }
    }
}

/// Fuses semantic labels and instance ids into a panoptic segmentation.
///
/// Consistency requirements, checked per pixel: IGNORE and stuff pixels must
/// carry instance id 0; thing pixels must carry a nonzero id; an id must not
/// span two classes.
pub fn fuse(
    semantic: &SemanticMap,
    instances: &InstanceMap,
    classes: &ClassTable,
    options: &FuseOptions,
) -> Result<PanopticSegmentation> {
    if semantic.height != instances.height || semantic.width != instances.width {
        return Err(Error::Dimension(format!(
            "semantic map is {}x{}, instance map is {}x{}",
            semantic.height, semantic.width, instances.height, instances.width
        )));
    }
    semantic.validate_against(classes)?;
    let canon = instances.canonicalize();

    let k = classes.len();
    let mut stuff_area = vec![0usize; k];
    // per canonical id: (class index, area); id -> index id-1
    let mut thing_class: Vec<Option<u16>> = Vec::new();
    let mut thing_area: Vec<usize> = Vec::new();
    for (px, (&label, &id)) in semantic.labels.iter().zip(&canon.ids).enumerate() {
        if label == IGNORE_LABEL {
            if id != 0 {
                return Err(Error::Consistency(format!(
                    "pixel {px} is IGNORE but carries instance id {id}"
                )));
            }
            continue;
        }
        match classes.kind(label).expect("validated label") {
            ClassKind::Stuff => {
                if id != 0 {
                    return Err(Error::Consistency(format!(
                        "pixel {px} has stuff class {label} but instance id {id}"
                    )));
                }
                stuff_area[label as usize] += 1;
            }
            ClassKind::Thing => {
                if id == 0 {
                    return Err(Error::Consistency(format!(
                        "pixel {px} has thing class {label} but no instance id"
                    )));
                }
                let idx = (id - 1) as usize;
                if idx >= thing_class.len() {
                    thing_class.resize(idx + 1, None);
                    thing_area.resize(idx + 1, 0);
                }
                match thing_class[idx] {
                    None => thing_class[idx] = Some(label),
                    Some(prev) if prev != label => {
                        return Err(Error::Consistency(format!(
                            "instance id {id} spans classes {prev} and {label}"
                        )));
                    }
                    Some(_) => {}
                }
                thing_area[idx] += 1;
            }
        }
    }

    // canonical ids are dense, so every slot is filled
    debug_assert!(thing_class.iter().all(|c| c.is_some()));

    // provisional segments: stuff by class order, then instances by id
    struct Provisional {
        class_index: u16,
        area: usize,
        source: Source,
    }
    enum Source {
        Stuff(u16),
        Instance(u16),
    }
    let mut provisional: Vec<Provisional> = Vec::new();
    for class_index in 0..k as u16 {
        if classes.kind(class_index) == Some(ClassKind::Stuff) && stuff_area[class_index as usize] > 0 {
            provisional.push(Provisional {
                class_index,
                area: stuff_area[class_index as usize],
                source: Source::Stuff(class_index),
            });
        }
    }
    for (idx, class) in thing_class.iter().enumerate() {
        provisional.push(Provisional {
            class_index: class.expect("dense canonical ids"),
            area: thing_area[idx],
            source: Source::Instance((idx + 1) as u16),
        });
    }

    // id lookup tables for the final map; 0 = dropped or absent
    let mut stuff_segment = vec![0u32; k];
    let mut instance_segment = vec![0u32; thing_class.len() + 1];
    let mut segments = Vec::new();
    let mut next = 1u32;
    for p in &provisional {
        if options.min_segment_area > 0 && p.area < options.min_segment_area {
            continue;
        }
        segments.push(SegmentInfo { id: next, class_index: p.class_index, area: p.area });
        match p.source {
            Source::Stuff(c) => stuff_segment[c as usize] = next,
            Source::Instance(i) => instance_segment[i as usize] = next,
        }
        next += 1;
    }

    let segment_map: Vec<u32> = semantic
        .labels
        .iter()
        .zip(&canon.ids)
        .map(|(&label, &id)| {
            if label == IGNORE_LABEL {
                0
            } else if id == 0 {
                stuff_segment[label as usize]
            } else {
                instance_segment[id as usize]
            }
        })
        .collect();

    PanopticSegmentation::new(semantic.height, semantic.width, segment_map, segments)
}
