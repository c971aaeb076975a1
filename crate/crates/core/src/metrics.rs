//! Panoptic quality (PQ, SQ, RQ) and mean IoU.
//!
//! Segments match when they share a class and their IoU strictly exceeds
//! 0.5. Above that threshold the match is provably unique: a candidate pair
//! must claim more than half of each segment's effective pixels, and gt
//! segments are disjoint, so no segment can take part in two candidates.
//! Collecting every candidate therefore IS the maximum matching; no search
//! is needed.
//!
//! Void pixels in the ground truth are excluded from IoU denominators:
//! a prediction's effective area only counts its pixels that lie on
//! non-void ground truth. Unmatched predictions still count as false
//! positives, even when they sit mostly on void.

use std::collections::HashMap;

use crate::fusion::PanopticSegmentation;
use crate::types::{ClassKind, ClassTable, SemanticMap, IGNORE_LABEL};
use crate::{Error, Result};

/// One matched segment pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub pred_id: u32,
    pub gt_id: u32,
    pub class_index: u16,
    pub iou: f64,
}

/// Matching result for one scene. Unmatched lists carry `(id, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatches {
    pub pairs: Vec<MatchPair>,
    pub unmatched_pred: Vec<(u32, u16)>,
    pub unmatched_gt: Vec<(u32, u16)>,
}

/// Matches predicted segments to ground-truth segments.
pub fn match_segments(
    pred: &PanopticSegmentation,
    gt: &PanopticSegmentation,
) -> Result<SceneMatches> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }

    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    let mut pred_on_void = vec![0usize; pred.segments.len() + 1];
    for (&p, &g) in pred.segment_map.iter().zip(&gt.segment_map) {
        if p > 0 && g == 0 {
            pred_on_void[p as usize] += 1;
        }
        if p > 0 && g > 0 {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
    }

    let mut candidates: Vec<(u32, u32, u16, f64)> = Vec::new();
    for (&(p, g), &cnt) in &inter {
        let pc = pred.class_of(p).expect("id from map");
        let gc = gt.class_of(g).expect("id from map");
        if pc != gc {
            continue;
        }
        let p_eff = pred.segments[(p - 1) as usize].area - pred_on_void[p as usize];
        let g_area = gt.segments[(g - 1) as usize].area;
        let iou = cnt as f64 / (p_eff + g_area - cnt) as f64;
        if iou > 0.5 {
            candidates.push((p, g, pc, iou));
        }
    }
    candidates.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut pred_matched = vec![false; pred.segments.len() + 1];
    let mut gt_matched = vec![false; gt.segments.len() + 1];
    let mut pairs = Vec::with_capacity(candidates.len());
    for (p, g, class_index, iou) in candidates {
        if pred_matched[p as usize] || gt_matched[g as usize] {
            // unreachable for IoU > 0.5; guards the uniqueness argument
            return Err(Error::Consistency(format!(
                "segments {p} and {g} violate matching uniqueness"
            )));
        }
        pred_matched[p as usize] = true;
        gt_matched[g as usize] = true;
        pairs.push(MatchPair { pred_id: p, gt_id: g, class_index, iou });
    }

    let unmatched_pred = pred
        .segments
        .iter()
        .filter(|s| !pred_matched[s.id as usize])
        .map(|s| (s.id, s.class_index))
        .collect();
    let unmatched_gt = gt
        .segments
        .iter()
        .filter(|s| !gt_matched[s.id as usize])
        .map(|s| (s.id, s.class_index))
        .collect();
    Ok(SceneMatches { pairs, unmatched_pred, unmatched_gt })
}

/// Per-class panoptic quality, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPq {
    pub class_index: u16,
    pub name: String,
    pub kind: ClassKind,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub iou_sum: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// True when the class was present but had no true positives, so SQ is
    /// reported as 0 rather than left undefined.
    pub no_true_positives: bool,
}

/// Unweighted mean over the classes counted in `class_count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqAggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqReport {
    /// Classes present in at least one of prediction and ground truth.
    pub per_class: Vec<ClassPq>,
    pub all: PqAggregate,
    pub things: PqAggregate,
    pub stuff: PqAggregate,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    tp: usize,
    fp: usize,
    fn_count: usize,
    iou_sum: f64,
}

/// Accumulates matches over any number of scenes, then reports PQ.
#[derive(Debug, Clone)]
pub struct PqAccumulator {
    classes: ClassTable,
    tallies: Vec<Tally>,
}

impl PqAccumulator {
    pub fn new(classes: &ClassTable) -> Self {
        Self { classes: classes.clone(), tallies: vec![Tally::default(); classes.len()] }
    }

    pub fn add(&mut self, pred: &PanopticSegmentation, gt: &PanopticSegmentation) -> Result<()> {
        let matches = match_segments(pred, gt)?;
        let k = self.classes.len() as u16;
        let check = |c: u16| {
            if c >= k {
                Err(Error::Consistency(format!("segment class {c} outside the {k}-class table")))
            } else {
                Ok(c as usize)
            }
        };
        for pair in &matches.pairs {
            let c = check(pair.class_index)?;
            self.tallies[c].tp += 1;
            self.tallies[c].iou_sum += pair.iou;
        }
        for &(_, c) in &matches.unmatched_pred {
            self.tallies[check(c)?].fp += 1;
        }
        for &(_, c) in &matches.unmatched_gt {
            self.tallies[check(c)?].fn_count += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> PqReport {
        let mut per_class = Vec::new();
        for (index, def) in self.classes.iter() {
            let t = self.tallies[index as usize];
            if t.tp + t.fp + t.fn_count == 0 {
                continue; // absent from both prediction and ground truth
            }
            let denom = t.tp as f64 + 0.5 * t.fp as f64 + 0.5 * t.fn_count as f64;
            let rq = 100.0 * t.tp as f64 / denom;
            let (sq, pq) = if t.tp > 0 {
                let sq = 100.0 * t.iou_sum / t.tp as f64;
                (sq, sq * rq / 100.0)
            } else {
                (0.0, 0.0)
            };
            per_class.push(ClassPq {
                class_index: index,
                name: def.name.clone(),
                kind: def.kind,
                tp: t.tp,
                fp: t.fp,
                fn_count: t.fn_count,
                iou_sum: t.iou_sum,
                pq,
                sq,
                rq,
                no_true_positives: t.tp == 0,
            });
        }
        let all = aggregate(per_class.iter());
        let things = aggregate(per_class.iter().filter(|r| r.kind == ClassKind::Thing));
        let stuff = aggregate(per_class.iter().filter(|r| r.kind == ClassKind::Stuff));
        PqReport { per_class, all, things, stuff }
    }
}

fn aggregate<'a>(rows: impl Iterator<Item = &'a ClassPq>) -> PqAggregate {
    let (mut pq, mut sq, mut rq, mut n) = (0.0, 0.0, 0.0, 0usize);
    for r in rows {
        pq += r.pq;
        sq += r.sq;
        rq += r.rq;
        n += 1;
    }
    if n == 0 {
        return PqAggregate { pq: 0.0, sq: 0.0, rq: 0.0, class_count: 0 };
    }
    let d = n as f64;
    PqAggregate { pq: pq / d, sq: sq / d, rq: rq / d, class_count: n }
}

/// Single-scene convenience wrapper around [`PqAccumulator`].
pub fn panoptic_quality(
    pred: &PanopticSegmentation,
    gt: &PanopticSegmentation,
    classes: &ClassTable,
) -> Result<PqReport> {
    let mut acc = PqAccumulator::new(classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// Per-class IoU in percent; `None` when the class appears in neither map.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth; 0 when none are.
    pub mean: f64,
    pub class_count: usize,
}

/// Accumulates confusion counts for mean IoU over any number of scenes.
///
/// Pixels whose ground-truth label is IGNORE are excluded entirely.
#[derive(Debug, Clone)]
pub struct MiouAccumulator {
    inter: Vec<usize>,
    pred_px: Vec<usize>,
    gt_px: Vec<usize>,
}

impl MiouAccumulator {
    pub fn new(class_count: usize) -> Self {
        Self {
            inter: vec![0; class_count],
            pred_px: vec![0; class_count],
            gt_px: vec![0; class_count],
        }
    }

    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Dimension(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.inter.len() as u16;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g >= k || (p != IGNORE_LABEL && p >= k) {
                return Err(Error::Consistency(format!(
                    "label outside the {k}-class table in IoU input"
                )));
            }
            self.gt_px[g as usize] += 1;
            if p != IGNORE_LABEL {
                self.pred_px[p as usize] += 1;
            }
            if p == g {
                self.inter[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let mut per_class = Vec::with_capacity(self.inter.len());
        let (mut sum, mut n) = (0.0, 0usize);
        for c in 0..self.inter.len() {
            let union = self.pred_px[c] + self.gt_px[c] - self.inter[c];
            let iou = if union > 0 {
                Some(100.0 * self.inter[c] as f64 / union as f64)
            } else {
                None
            };
            per_class.push(iou);
            if self.gt_px[c] > 0 {
                sum += iou.expect("gt presence implies nonzero union");
                n += 1;
            }
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        MiouReport { per_class, mean, class_count: n }
    }
}

/// Single-scene convenience wrapper around [`MiouAccumulator`].
pub fn mean_iou(pred: &SemanticMap, gt: &SemanticMap, class_count: usize) -> Result<MiouReport> {
    let mut acc = MiouAccumulator::new(class_count);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, FuseOptions};
    use crate::types::{ClassDef, InstanceMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> ClassTable {
        ClassTable::new(vec![
            ClassDef { name: "road".into(), kind: ClassKind::Stuff },
            ClassDef { name: "sky".into(), kind: ClassKind::Stuff },
            ClassDef { name: "car".into(), kind: ClassKind::Thing },
        ])
        .unwrap()
    }

    fn panoptic(sem: &SemanticMap, inst: &InstanceMap) -> PanopticSegmentation {
        fuse(sem, inst, &table(), &FuseOptions::default()).unwrap()
    }

    fn row_scene(labels: Vec<u16>, ids: Vec<u16>) -> PanopticSegmentation {
        let w = labels.len();
        let sem = SemanticMap::new(1, w, labels).unwrap();
        let inst = InstanceMap::new(1, w, ids).unwrap();
        panoptic(&sem, &inst)
    }

    #[test]
    fn identical_maps_score_hundred_everywhere() {
        let p = row_scene(vec![0, 0, 2, 2, 2, 1], vec![0, 0, 1, 1, 1, 0]);
        let report = panoptic_quality(&p, &p, &table()).unwrap();
        for row in &report.per_class {
            assert!((row.pq - 100.0).abs() < 1e-12, "{row:?}");
            assert!((row.sq - 100.0).abs() < 1e-12);
            assert!((row.rq - 100.0).abs() < 1e-12);
        }
        assert!((report.all.pq - 100.0).abs() < 1e-12);
        assert!((report.things.pq - 100.0).abs() < 1e-12);
        assert!((report.stuff.pq - 100.0).abs() < 1e-12);
    }

    #[test]
    fn iou_exactly_half_is_rejected() {
        // gt car covers 5 pixels, pred car covers 4 with overlap 3:
        // union = 4 + 5 - 3 = 6, IoU = 3/6 = 0.5, strictly-greater fails
        let gt = row_scene(vec![2, 2, 2, 2, 2, 0], vec![1, 1, 1, 1, 1, 0]);
        let pred = row_scene(vec![0, 0, 2, 2, 2, 2], vec![0, 0, 1, 1, 1, 1]);
        let m = match_segments(&pred, &gt).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_pred.len(), 2); // car and road both miss
        assert_eq!(m.unmatched_gt.len(), 2);
        let report = panoptic_quality(&pred, &gt, &table()).unwrap();
        let car = report.per_class.iter().find(|r| r.class_index == 2).unwrap();
        assert_eq!((car.tp, car.fp, car.fn_count), (0, 1, 1));
        assert!(car.no_true_positives);
        assert_eq!(car.pq, 0.0);
        assert_eq!(car.sq, 0.0);
        assert_eq!(car.rq, 0.0);
        // one pixel more of overlap crosses the threshold: 4/(4+5-4) = 0.8
        let pred = row_scene(vec![0, 2, 2, 2, 2, 0], vec![0, 1, 1, 1, 1, 0]);
        let m = match_segments(&pred, &gt).unwrap();
        // road stays at exactly 0.5 (inter 1, union 2), so only the car pairs
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].class_index, 2);
        assert!((m.pairs[0].iou - 0.8).abs() < 1e-12);
    }

    #[test]
    fn four_fifths_overlap_scores_eighty() {
        // gt car: 5 pixels; pred car: 4 of them; elsewhere void in both
        let gt = row_scene(
            vec![2, 2, 2, 2, 2, IGNORE_LABEL],
            vec![1, 1, 1, 1, 1, 0],
        );
        let pred = row_scene(
            vec![2, 2, 2, 2, IGNORE_LABEL, IGNORE_LABEL],
            vec![1, 1, 1, 1, 0, 0],
        );
        let report = panoptic_quality(&pred, &gt, &table()).unwrap();
        assert_eq!(report.per_class.len(), 1);
        let car = &report.per_class[0];
        assert!((car.sq - 80.0).abs() < 1e-9);
        assert!((car.rq - 100.0).abs() < 1e-9);
        assert!((car.pq - 80.0).abs() < 1e-9);
        assert_eq!(car.pq.to_bits(), (car.sq * car.rq / 100.0).to_bits());
    }

    #[test]
    fn gt_void_pixels_leave_the_union() {
        // pred car has 6 pixels, 2 of them on gt void; gt car is the other 4
        let gt = row_scene(
            vec![2, 2, 2, 2, IGNORE_LABEL, IGNORE_LABEL],
            vec![1, 1, 1, 1, 0, 0],
        );
        let pred = row_scene(vec![2, 2, 2, 2, 2, 2], vec![1, 1, 1, 1, 1, 1]);
        let m = match_segments(&pred, &gt).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert!((m.pairs[0].iou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_on_void_is_still_a_false_positive() {
        let gt = row_scene(
            vec![0, 0, 0, 0, IGNORE_LABEL, IGNORE_LABEL],
            vec![0, 0, 0, 0, 0, 0],
        );
        let pred = row_scene(vec![0, 0, 0, 0, 2, 2], vec![0, 0, 0, 0, 1, 1]);
        let report = panoptic_quality(&pred, &gt, &table()).unwrap();
        let car = report.per_class.iter().find(|r| r.class_index == 2).unwrap();
        assert_eq!((car.tp, car.fp, car.fn_count), (0, 1, 0));
        assert_eq!(car.pq, 0.0);
        let road = report.per_class.iter().find(|r| r.class_index == 0).unwrap();
        assert!((road.pq - 100.0).abs() < 1e-12);
        assert!((report.stuff.pq - 100.0).abs() < 1e-12);
        assert_eq!(report.things.pq, 0.0);
    }

    /// Independent matcher: exhaustive max-cardinality search over all
    /// same-class pairs with IoU > 0.5, then max IoU sum among ties.
    fn brute_force_pairs(
        pred: &PanopticSegmentation,
        gt: &PanopticSegmentation,
    ) -> Vec<(u32, u32)> {
        let mut cand: Vec<(u32, u32, f64)> = Vec::new();
        for ps in &pred.segments {
            for gs in &gt.segments {
                if ps.class_index != gs.class_index {
                    continue;
                }
                let mut inter = 0usize;
                let mut p_eff = 0usize;
                for (&p, &g) in pred.segment_map.iter().zip(&gt.segment_map) {
                    if p == ps.id && g != 0 {
                        p_eff += 1;
                        if g == gs.id {
                            inter += 1;
                        }
                    }
                }
                if inter == 0 {
                    continue;
                }
                let iou = inter as f64 / (p_eff + gs.area - inter) as f64;
                if iou > 0.5 {
                    cand.push((ps.id, gs.id, iou));
                }
            }
        }
        fn search(
            cand: &[(u32, u32, f64)],
            i: usize,
            used_p: &mut Vec<u32>,
            used_g: &mut Vec<u32>,
            picked: &mut Vec<(u32, u32)>,
            score: f64,
            best: &mut (usize, f64, Vec<(u32, u32)>),
        ) {
            if i == cand.len() {
                if picked.len() > best.0 || (picked.len() == best.0 && score > best.1) {
                    *best = (picked.len(), score, picked.clone());
                }
                return;
            }
            let (p, g, iou) = cand[i];
            if !used_p.contains(&p) && !used_g.contains(&g) {
                used_p.push(p);
                used_g.push(g);
                picked.push((p, g));
                search(cand, i + 1, used_p, used_g, picked, score + iou, best);
                picked.pop();
                used_g.pop();
                used_p.pop();
            }
            search(cand, i + 1, used_p, used_g, picked, score, best);
        }
        let mut best = (0usize, f64::NEG_INFINITY, Vec::new());
        search(&cand, 0, &mut Vec::new(), &mut Vec::new(), &mut Vec::new(), 0.0, &mut best);
        let mut pairs = best.2;
        pairs.sort_unstable();
        pairs
    }

    fn random_scene_pair(rng: &mut ChaCha8Rng) -> (PanopticSegmentation, PanopticSegmentation) {
        let (h, w) = (16usize, 16usize);
        let mut sem = SemanticMap::filled(h, w, 0).unwrap();
        let mut inst = InstanceMap::zeros(h, w).unwrap();
        let mut rects: Vec<(usize, usize, usize, usize, u16)> = Vec::new();
        // a sky band plus a few cars
        let band = rng.gen_range(0..h / 2);
        for r in 0..band {
            for c in 0..w {
                sem.set_label(r, c, 1);
            }
        }
        for id in 1..=rng.gen_range(1..4u16) {
            let rh = rng.gen_range(2..6);
            let rw = rng.gen_range(2..6);
            let r0 = rng.gen_range(0..h - rh);
            let c0 = rng.gen_range(0..w - rw);
            rects.push((r0, c0, rh, rw, id));
        }
        let paint = |sem: &mut SemanticMap,
                     inst: &mut InstanceMap,
                     rects: &[(usize, usize, usize, usize, u16)],
                     jitter: &[(isize, isize)]| {
            for ((r0, c0, rh, rw, id), (dr, dc)) in rects.iter().zip(jitter) {
                for r in 0..*rh {
                    for c in 0..*rw {
                        let rr = *r0 as isize + r as isize + dr;
                        let cc = *c0 as isize + c as isize + dc;
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            sem.set_label(rr as usize, cc as usize, 2);
                            inst.set_id(rr as usize, cc as usize, *id);
                        }
                    }
                }
            }
        };
        let zero = vec![(0isize, 0isize); rects.len()];
        paint(&mut sem, &mut inst, &rects, &zero);
        // occasional ignore block in the ground truth
        let mut gt_sem = sem.clone();
        if rng.gen_bool(0.3) {
            let r0 = rng.gen_range(0..h - 2);
            let c0 = rng.gen_range(0..w - 2);
            for r in r0..r0 + 2 {
                for c in c0..c0 + 2 {
                    gt_sem.set_label(r, c, IGNORE_LABEL);
                }
            }
        }
        let mut gt_inst = inst.clone();
        for px in 0..h * w {
            if gt_sem.labels[px] == IGNORE_LABEL {
                gt_inst.ids[px] = 0;
            }
        }
        let gt = panoptic(&gt_sem, &gt_inst);

        // prediction: same rectangles, jittered, over the same backdrop
        let mut psem = SemanticMap::filled(h, w, 0).unwrap();
        for r in 0..band {
            for c in 0..w {
                psem.set_label(r, c, 1);
            }
        }
        let mut pinst = InstanceMap::zeros(h, w).unwrap();
        let jitter: Vec<(isize, isize)> = rects
            .iter()
            .map(|_| (rng.gen_range(-2..=2), rng.gen_range(-2..=2)))
            .collect();
        paint(&mut psem, &mut pinst, &rects, &jitter);
        let pred = panoptic(&psem, &pinst);
        (pred, gt)
    }

    #[test]
    fn threshold_matching_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut matched_any = 0;
        for _ in 0..80 {
            let (pred, gt) = random_scene_pair(&mut rng);
            let m = match_segments(&pred, &gt).unwrap();
            let mine: Vec<(u32, u32)> = m.pairs.iter().map(|p| (p.pred_id, p.gt_id)).collect();
            let oracle = brute_force_pairs(&pred, &gt);
            assert_eq!(mine, oracle);
            matched_any += mine.len();
        }
        assert!(matched_any > 40, "pairs should actually occur: {matched_any}");
    }

    #[test]
    fn swapping_pred_and_gt_swaps_fp_with_fn() {
        // void-free maps, where the IoU definition is symmetric
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let (pred, gt) = random_scene_pair(&mut rng);
            if gt.segment_map.iter().any(|&id| id == 0) {
                continue;
            }
            let fwd = panoptic_quality(&pred, &gt, &table()).unwrap();
            let rev = panoptic_quality(&gt, &pred, &table()).unwrap();
            for (a, b) in fwd.per_class.iter().zip(&rev.per_class) {
                assert_eq!(a.class_index, b.class_index);
                assert_eq!(a.tp, b.tp);
                assert_eq!(a.fp, b.fn_count);
                assert_eq!(a.fn_count, b.fp);
                assert!((a.sq - b.sq).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decomposition_is_exact_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..40 {
            let (pred, gt) = random_scene_pair(&mut rng);
            let report = panoptic_quality(&pred, &gt, &table()).unwrap();
            for row in &report.per_class {
                assert_eq!(row.pq.to_bits(), (row.sq * row.rq / 100.0).to_bits());
                assert!(row.pq >= 0.0 && row.pq <= 100.0 + 1e-9);
                assert!(row.rq >= 0.0 && row.rq <= 100.0 + 1e-9);
            }
        }
    }

    #[test]
    fn accumulator_sums_across_scenes() {
        let a = row_scene(vec![0, 2, 2], vec![0, 1, 1]);
        let b = row_scene(vec![2, 2, 0], vec![3, 3, 0]);
        let mut acc = PqAccumulator::new(&table());
        acc.add(&a, &a).unwrap();
        acc.add(&a, &b).unwrap();
        let report = acc.report();
        let car = report.per_class.iter().find(|r| r.class_index == 2).unwrap();
        // scene 1: exact match; scene 2: pred {1,2} vs gt {0,1}, IoU 1/3
        assert_eq!((car.tp, car.fp, car.fn_count), (1, 1, 1));
        assert!((car.rq - 50.0).abs() < 1e-12);
        assert!((car.sq - 100.0).abs() < 1e-12);
        assert!((car.pq - 50.0).abs() < 1e-12);
    }

    #[test]
    fn miou_frozen_half_overlap_case() {
        // gt = [A, A, B, B], pred = [B, A, A, B]: each class IoU 1/3
        let gt = SemanticMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = SemanticMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let report = mean_iou(&pred, &gt, 2).unwrap();
        assert!((report.mean - 100.0 / 3.0).abs() < 1e-9);
        assert!((report.mean - 33.33).abs() < 0.01);
        for iou in &report.per_class {
            assert!((iou.unwrap() - 100.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn miou_identity_and_ignore_handling() {
        let gt = SemanticMap::new(1, 5, vec![0, 1, 2, IGNORE_LABEL, 2]).unwrap();
        let mut pred = gt.clone();
        pred.set_label(0, 3, 0); // disagreement only on an IGNORE pixel
        let report = mean_iou(&pred, &gt, 3).unwrap();
        assert!((report.mean - 100.0).abs() < 1e-12);
        assert_eq!(report.class_count, 3);
    }

    #[test]
    fn miou_skips_classes_absent_from_gt() {
        // class 1 appears only in the prediction: reported, not averaged
        let gt = SemanticMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let pred = SemanticMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let report = mean_iou(&pred, &gt, 2).unwrap();
        assert_eq!(report.class_count, 1);
        assert!((report.mean - 50.0).abs() < 1e-12); // class 0: 2/4
        assert_eq!(report.per_class[1], Some(0.0));
        // nothing labeled at all -> mean defined as zero
        let empty = SemanticMap::filled(1, 4, IGNORE_LABEL).unwrap();
        let report = mean_iou(&empty, &empty, 2).unwrap();
        assert_eq!(report.class_count, 0);
        assert_eq!(report.mean, 0.0);
    }
}
