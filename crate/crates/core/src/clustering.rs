//! Flat-kernel mean-shift clustering over pixel embeddings.
//!
//! A window at position `p` is the closed ball `{x : ||x - p|| <= h}` for
//! bandwidth `h`. Each seed repeatedly moves to the mean of its window until
//! the shift drops below `convergence_factor * h`; converged positions within
//! `merge_factor * h` of a stronger mode are suppressed, and every point is
//! assigned to its nearest surviving mode.
//!
//! Seeds come from a coarse grid ([`bin_seeds`]): points are quantized to
//! `round(coordinate / bin_size)` per axis and each occupied bin contributes
//! its grid corner. This is the fast path; exhaustive seeding (every point a
//! seed) is available for comparison and gives the same assignments.
//!
//! All window queries run against a bin index built once per call. For each
//! bin the point sum, centroid and radius are precomputed; a query adds
//! whole bins that provably lie inside the window, skips bins that provably
//! lie outside, and scans the points of bins that straddle the boundary.
//! Contributions fold in a fixed order, so results never depend on the
//! thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::types::{ClassTable, EmbeddingMap, InstanceMap, SemanticMap, IGNORE_LABEL};
use crate::{Error, Result};

/// How mean-shift chooses its starting positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedingMode {
    /// One seed per occupied coarse-grid bin (bin size = bandwidth).
    Bin,
    /// Every point is a seed.
    Exhaustive,
}

#[derive(Debug, Clone)]
pub struct MeanShiftConfig {
    pub max_iterations: usize,
    /// A trajectory stops once its shift falls below `convergence_factor * h`.
    pub convergence_factor: f64,
    /// Converged positions within `merge_factor * h` of a stronger mode merge.
    pub merge_factor: f64,
    /// Bins holding fewer points than this produce no seed.
    pub min_bin_freq: usize,
    pub seeding: SeedingMode,
}

impl Default for MeanShiftConfig {
    fn default() -> MeanShiftConfig {
        MeanShiftConfig {
            max_iterations: 300,
            convergence_factor: 1e-3,
            merge_factor: 0.5,
            min_bin_freq: 1,
            seeding: SeedingMode::Bin,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if !(self.convergence_factor.is_finite() && self.convergence_factor > 0.0) {
            return Err(Error::Config("convergence_factor must be positive".into()));
        }
        if !(self.merge_factor.is_finite() && self.merge_factor >= 0.0) {
            return Err(Error::Config("merge_factor must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Result of one mean-shift run: mode positions, the per-point index of the
/// nearest mode, and the longest trajectory length encountered.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub modes: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn check_points(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::Dimension("point dimension must be positive".into()));
    }
    if points.is_empty() || points.len() % dim != 0 {
        return Err(Error::Dimension(format!(
            "point buffer of {} values does not hold {dim}-dimensional points",
            points.len()
        )));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("clustering input".into()));
    }
    Ok(points.len() / dim)
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `dist_sq` that gives up once the partial sum reaches `limit`. Partial sums
/// only grow, so `None` proves the full distance is at least `limit` and a
/// returned value is bitwise what `dist_sq` computes.
#[inline]
fn dist_sq_within(a: &[f64], b: &[f64], limit: f64) -> Option<f64> {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
        if acc >= limit {
            return None;
        }
    }
    Some(acc)
}

/// Seeds for mean-shift: one per coarse-grid bin holding at least `min_freq`
/// points, at the bin's grid corner, in ascending key order.
pub fn bin_seeds(points: &[f64], dim: usize, bin_size: f64, min_freq: usize) -> Result<Vec<Vec<f64>>> {
    let n = check_points(points, dim)?;
    check_bandwidth(bin_size)?;
    let mut bins: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    for i in 0..n {
        let key: Vec<i64> = points[i * dim..(i + 1) * dim]
            .iter()
            .map(|&v| (v / bin_size).round() as i64)
            .collect();
        *bins.entry(key).or_insert(0) += 1;
    }
    Ok(bins
        .into_iter()
        .filter(|(_, count)| *count >= min_freq)
        .map(|(key, _)| key.iter().map(|&k| k as f64 * bin_size).collect())
        .collect())
}

/// Coarse-grid index over a point set. Bins are sorted by quantized key;
/// per-bin sums, centroids and radii let window queries add or skip whole
/// bins without touching their points.
struct BinIndex<'a> {
    points: &'a [f64],
    dim: usize,
    n: usize,
    /// point indices grouped by bin, each group ascending
    order: Vec<u32>,
    /// per bin: offset into `order`
    starts: Vec<usize>,
    /// per bin: quantized key, flattened
    keys: Vec<i32>,
    /// per bin: point count
    counts: Vec<usize>,
    /// per bin: coordinate sum over members (in `order` order), flattened
    sums: Vec<f64>,
    /// per bin: mean of members, flattened
    centroids: Vec<f64>,
    /// per bin: max distance from centroid to a member
    radii: Vec<f64>,
}

impl<'a> BinIndex<'a> {
    fn build(points: &'a [f64], dim: usize, n: usize, bin_size: f64) -> BinIndex<'a> {
        // i32 with saturation: an absurdly coarse key only costs accuracy of
        // the skip/add shortcuts, never correctness (straddlers are scanned).
        let quantize = |v: f64| (v / bin_size).round() as i32;
        // Group by key with a hash map, then sort only the bins. Scanning
        // points in index order makes every member list ascending, and the
        // incremental sums fold in that same order, so the result matches a
        // full (key, index) sort bit for bit at a fraction of the cost.
        struct Acc {
            members: Vec<u32>,
            sum: Vec<f64>,
        }
        let mut slots: FxHashMap<Vec<i32>, u32> = FxHashMap::default();
        let mut accs: Vec<(Vec<i32>, Acc)> = Vec::new();
        let mut keybuf: Vec<i32> = Vec::with_capacity(dim);
        for i in 0..n {
            let p = &points[i * dim..(i + 1) * dim];
            keybuf.clear();
            keybuf.extend(p.iter().map(|&v| quantize(v)));
            let slot = match slots.get(keybuf.as_slice()) {
                Some(&s) => s as usize,
                None => {
                    let s = accs.len();
                    slots.insert(keybuf.clone(), s as u32);
                    accs.push((keybuf.clone(), Acc { members: Vec::new(), sum: vec![0.0; dim] }));
                    s
                }
            };
            let acc = &mut accs[slot].1;
            acc.members.push(i as u32);
            for (s, v) in acc.sum.iter_mut().zip(p) {
                *s += v;
            }
        }
        drop(slots);
        accs.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let bins = accs.len();
        let mut order: Vec<u32> = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(bins);
        let mut keys = Vec::with_capacity(bins * dim);
        let mut counts = Vec::with_capacity(bins);
        let mut sums = Vec::with_capacity(bins * dim);
        let mut centroids = vec![0.0; bins * dim];
        let mut radii = vec![0.0; bins];
        for (b, (key, acc)) in accs.iter().enumerate() {
            starts.push(order.len());
            keys.extend_from_slice(key);
            counts.push(acc.members.len());
            sums.extend_from_slice(&acc.sum);
            let inv = 1.0 / acc.members.len() as f64;
            for k in 0..dim {
                centroids[b * dim + k] = acc.sum[k] * inv;
            }
            let centroid = &centroids[b * dim..(b + 1) * dim];
            let mut max_sq = 0.0f64;
            for &m in &acc.members {
                let p = &points[m as usize * dim..(m as usize + 1) * dim];
                max_sq = max_sq.max(dist_sq(centroid, p));
            }
            radii[b] = max_sq.sqrt();
            order.extend_from_slice(&acc.members);
        }
        BinIndex { points, dim, n, order, starts, keys, counts, sums, centroids, radii }
    }

    fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Sum and count of all points within `h` of `pos`. Bins fold in index
    /// order; members of scanned bins fold in ascending point order.
    fn window(&self, pos: &[f64], h: f64, sum: &mut [f64]) -> usize {
        sum.fill(0.0);
        let mut count = 0usize;
        let h_sq = h * h;
        for b in 0..self.bins() {
            let centroid = &self.centroids[b * self.dim..(b + 1) * self.dim];
            let d_sq = dist_sq(pos, centroid);
            let r = self.radii[b];
            let t_full = h * (1.0 - 1e-9) - r;
            if t_full >= 0.0 && d_sq <= t_full * t_full {
                let bin_sum = &self.sums[b * self.dim..(b + 1) * self.dim];
                for (s, v) in sum.iter_mut().zip(bin_sum) {
                    *s += v;
                }
                count += self.counts[b];
                continue;
            }
            let t_skip = h * (1.0 + 1e-9) + r;
            if d_sq > t_skip * t_skip {
                continue;
            }
            let members = &self.order[self.starts[b]..self.starts[b] + self.counts[b]];
            for &m in members {
                let p = &self.points[m as usize * self.dim..(m as usize + 1) * self.dim];
                if dist_sq(pos, p) <= h_sq {
                    for (s, v) in sum.iter_mut().zip(p) {
                        *s += v;
                    }
                    count += 1;
                }
            }
        }
        count
    }

    /// Index of the point nearest to `pos`, lowest index on ties.
    fn nearest_point(&self, pos: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_sq = f64::INFINITY;
        for i in 0..self.n {
            let d = dist_sq(pos, &self.points[i * self.dim..(i + 1) * self.dim]);
            if d < best_sq {
                best_sq = d;
                best = i;
            }
        }
        best
    }

    /// Grid-corner seeds of bins with at least `min_freq` members, in bin
    /// (ascending key) order.
    fn corner_seeds(&self, bin_size: f64, min_freq: usize) -> Vec<Vec<f64>> {
        (0..self.bins())
            .filter(|&b| self.counts[b] >= min_freq)
            .map(|b| {
                self.keys[b * self.dim..(b + 1) * self.dim]
                    .iter()
                    .map(|&k| k as f64 * bin_size)
                    .collect()
            })
            .collect()
    }
}

struct Trajectory {
    pos: Vec<f64>,
    count: usize,
    iterations: usize,
}

fn shift_to_mode(
    index: &BinIndex<'_>,
    seed: &[f64],
    bandwidth: f64,
    cfg: &MeanShiftConfig,
) -> Trajectory {
    let dim = index.dim;
    let tol = cfg.convergence_factor * bandwidth;
    let mut pos = seed.to_vec();
    let mut sum = vec![0.0; dim];
    let mut iterations = 0usize;
    for _ in 0..cfg.max_iterations {
        let count = index.window(&pos, bandwidth, &mut sum);
        if count == 0 {
            // a grid-corner seed can start outside every window; snap to the
            // data and continue from there
            let p = index.nearest_point(&pos);
            pos.copy_from_slice(&index.points[p * dim..(p + 1) * dim]);
            iterations += 1;
            continue;
        }
        let inv = 1.0 / count as f64;
        let mut shift_sq = 0.0;
        for k in 0..dim {
            let m = sum[k] * inv;
            let d = m - pos[k];
            shift_sq += d * d;
            pos[k] = m;
        }
        iterations += 1;
        if shift_sq.sqrt() < tol {
            break;
        }
    }
    let count = index.window(&pos, bandwidth, &mut sum);
    Trajectory { pos, count, iterations }
}

/// Candidate modes sorted strongest-first, then greedily suppressed within
/// `merge_factor * h` of an accepted mode.
fn merge_modes(mut trajectories: Vec<Trajectory>, bandwidth: f64, merge_factor: f64) -> Vec<Vec<f64>> {
    trajectories.sort_by(|a, b| {
        b.count.cmp(&a.count).then_with(|| {
            for (x, y) in a.pos.iter().zip(&b.pos) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        })
    });
    let limit = merge_factor * bandwidth;
    let limit_sq = limit * limit;
    let mut modes: Vec<Vec<f64>> = Vec::new();
    for t in &trajectories {
        if modes.iter().all(|m| dist_sq(m, &t.pos) >= limit_sq) {
            modes.push(t.pos.clone());
        }
    }
    modes
}

/// Runs flat-kernel mean-shift over `points` (flattened, `dim` values per
/// point). See the module docs for the algorithm.
pub fn mean_shift(
    points: &[f64],
    dim: usize,
    bandwidth: f64,
    cfg: &MeanShiftConfig,
) -> Result<ClusterResult> {
    let n = check_points(points, dim)?;
    check_bandwidth(bandwidth)?;
    cfg.validate()?;
    let index = BinIndex::build(points, dim, n, bandwidth);
    let seeds: Vec<Vec<f64>> = match cfg.seeding {
        SeedingMode::Bin => {
            let s = index.corner_seeds(bandwidth, cfg.min_bin_freq);
            if s.is_empty() {
                // min_bin_freq can disqualify every bin; fall back to the
                // exhaustive seeds rather than finding no modes at all
                (0..n).map(|i| points[i * dim..(i + 1) * dim].to_vec()).collect()
            } else {
                s
            }
        }
        SeedingMode::Exhaustive => (0..n).map(|i| points[i * dim..(i + 1) * dim].to_vec()).collect(),
    };
    let trajectories: Vec<Trajectory> = seeds
        .par_iter()
        .map(|s| shift_to_mode(&index, s, bandwidth, cfg))
        .collect();
    let iterations = trajectories.iter().map(|t| t.iterations).max().unwrap_or(0);
    let modes = merge_modes(trajectories, bandwidth, cfg.merge_factor);
    let assignment: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &points[i * dim..(i + 1) * dim];
            let mut best = 0usize;
            let mut best_sq = f64::INFINITY;
            for (m, mode) in modes.iter().enumerate() {
                // a pruned mode cannot beat best_sq (strict < required), so
                // the winner and its distance match the unpruned scan
                if let Some(d) = dist_sq_within(p, mode, best_sq) {
                    best_sq = d;
                    best = m;
                }
            }
            best
        })
        .collect();
    Ok(ClusterResult { modes, assignment, iterations })
}

/// Per-class clustering bandwidths, keyed by class name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandwidthTable {
    entries: BTreeMap<String, f64>,
}

impl BandwidthTable {
    pub fn new() -> BandwidthTable {
        BandwidthTable::default()
    }

    pub fn set(&mut self, name: &str, bandwidth: f64) -> Result<()> {
        check_bandwidth(bandwidth)?;
        self.entries.insert(name.to_string(), bandwidth);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Clusters the embeddings of each thing class separately and combines the
/// per-class results into one instance map with dense ids `1..`.
///
/// Pixels of stuff classes and IGNORE pixels get id 0. Classes are processed
/// in table order; within a class, cluster ids follow mode order, and modes
/// that win no pixels are skipped so ids stay dense.
pub fn classwise_cluster(
    emb: &EmbeddingMap,
    semantic: &SemanticMap,
    classes: &ClassTable,
    bandwidths: &BandwidthTable,
    cfg: &MeanShiftConfig,
) -> Result<InstanceMap> {
    if emb.height != semantic.height || emb.width != semantic.width {
        return Err(Error::Dimension(format!(
            "embedding map is {}x{}, semantic map is {}x{}",
            emb.height, emb.width, semantic.height, semantic.width
        )));
    }
    semantic.validate_against(classes)?;
    let mut ids = vec![0u16; emb.height * emb.width];
    let mut next_id: usize = 1;
    for class_idx in classes.thing_indices() {
        let name = classes.name(class_idx).expect("index from table");
        let pixels: Vec<usize> = semantic
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_idx)
            .map(|(px, _)| px)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        let bandwidth = bandwidths.get(name).ok_or_else(|| {
            Error::Config(format!("no bandwidth configured for thing class '{name}'"))
        })?;
        let dim = emb.dim;
        let mut points = Vec::with_capacity(pixels.len() * dim);
        for &px in &pixels {
            points.extend_from_slice(&emb.values[px * dim..(px + 1) * dim]);
        }
        let result = mean_shift(&points, dim, bandwidth, cfg)?;
        // drop modes that won no pixels so the id range stays dense
        let mut id_of_mode = vec![0usize; result.modes.len()];
        for &m in &result.assignment {
            if id_of_mode[m] == 0 {
                id_of_mode[m] = usize::MAX; // seen
            }
        }
        for slot in id_of_mode.iter_mut() {
            if *slot == usize::MAX {
                *slot = next_id;
                next_id += 1;
            }
        }
        if next_id > IGNORE_LABEL as usize {
            return Err(Error::Consistency(format!(
                "{} instances exceed the 16-bit id space",
                next_id - 1
            )));
        }
        for (k, &px) in pixels.iter().enumerate() {
            ids[px] = id_of_mode[result.assignment[k]] as u16;
        }
    }
    InstanceMap::new(emb.height, emb.width, ids)
}

/// One scene used by [`bandwidth_search`]: embeddings plus ground truth.
#[derive(Debug, Clone, Copy)]
pub struct LabeledEmbedding<'a> {
    pub embedding: &'a EmbeddingMap,
    pub semantic: &'a SemanticMap,
    pub instances: &'a InstanceMap,
}

/// F1 of clustering `points` (pixels of one class) against the ground-truth
/// grouping, matching predicted to true groups at IoU > 0.5.
fn grouping_f1(assignment: &[usize], gt_groups: &[Vec<usize>], pred_count: usize) -> f64 {
    let mut pred_groups: Vec<Vec<usize>> = vec![Vec::new(); pred_count];
    for (i, &m) in assignment.iter().enumerate() {
        pred_groups[m].push(i);
    }
    pred_groups.retain(|g| !g.is_empty());
    let mut tp = 0usize;
    for gt in gt_groups {
        for pred in &pred_groups {
            // both sorted ascending: linear intersection
            let mut inter = 0usize;
            let (mut a, mut b) = (0usize, 0usize);
            while a < gt.len() && b < pred.len() {
                match gt[a].cmp(&pred[b]) {
                    std::cmp::Ordering::Less => a += 1,
                    std::cmp::Ordering::Greater => b += 1,
                    std::cmp::Ordering::Equal => {
                        inter += 1;
                        a += 1;
                        b += 1;
                    }
                }
            }
            let union = gt.len() + pred.len() - inter;
            if inter * 2 > union {
                tp += 1;
                break; // IoU > 0.5 matches are unique per group
            }
        }
    }
    let fp = pred_groups.len() - tp;
    let fn_ = gt_groups.len() - tp;
    if 2 * tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Picks, for every thing class, the candidate bandwidth with the best mean
/// grouping F1 over `scenes`. Candidates must be ascending; ties go to the
/// smaller bandwidth. Classes absent from every scene get the smallest
/// candidate.
pub fn bandwidth_search(
    scenes: &[LabeledEmbedding<'_>],
    classes: &ClassTable,
    candidates: &[f64],
    cfg: &MeanShiftConfig,
) -> Result<BandwidthTable> {
    if scenes.is_empty() {
        return Err(Error::Search("bandwidth search needs at least one scene".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Search("bandwidth search needs a candidate grid".into()));
    }
    for c in candidates {
        check_bandwidth(*c)?;
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Search("bandwidth candidates must be strictly ascending".into()));
    }
    let thing_indices = classes.thing_indices();
    if thing_indices.is_empty() {
        return Err(Error::Search("bandwidth search needs at least one thing class".into()));
    }
    let mut table = BandwidthTable::new();
    for class_idx in thing_indices {
        let name = classes.name(class_idx).expect("index from table");
        // per scene: class pixel list, its points, and gt groups over it
        let mut prepared = Vec::new();
        for scene in scenes {
            if scene.embedding.height != scene.semantic.height
                || scene.embedding.width != scene.semantic.width
                || scene.instances.height != scene.semantic.height
                || scene.instances.width != scene.semantic.width
            {
                return Err(Error::Dimension("bandwidth-search scene rasters disagree".into()));
            }
            let pixels: Vec<usize> = scene
                .semantic
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class_idx)
                .map(|(px, _)| px)
                .collect();
            if pixels.is_empty() {
                continue;
            }
            let dim = scene.embedding.dim;
            let mut points = Vec::with_capacity(pixels.len() * dim);
            let mut gt: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
            for (k, &px) in pixels.iter().enumerate() {
                points.extend_from_slice(&scene.embedding.values[px * dim..(px + 1) * dim]);
                let id = scene.instances.ids[px];
                if id != 0 {
                    gt.entry(id).or_default().push(k);
                }
            }
            let gt_groups: Vec<Vec<usize>> = gt.into_values().collect();
            prepared.push((points, dim, gt_groups));
        }
        if prepared.is_empty() {
            table.set(name, candidates[0])?;
            continue;
        }
        let mut best = (candidates[0], f64::NEG_INFINITY);
        for &h in candidates {
            let mut score = 0.0;
            for (points, dim, gt_groups) in &prepared {
                let result = mean_shift(points, *dim, h, cfg)?;
                score += grouping_f1(&result.assignment, gt_groups, result.modes.len());
            }
            score /= prepared.len() as f64;
            if score > best.1 {
                best = (h, score);
            }
        }
        table.set(name, best.0)?;
    }
    Ok(table)
}
