//! Training losses and their gradients.
//!
//! Two losses are implemented, both in double precision:
//!
//! * [`semantic_loss`]: mean softmax cross-entropy over non-IGNORE pixels,
//!   returning the loss and its gradient with respect to the logits.
//! * [`discriminative_loss`]: pulls pixel embeddings toward their ground-truth
//!   instance mean, pushes different instance means apart, and keeps means
//!   close to the origin. All three terms are squared hinges:
//!
//!   ```text
//!   L_var  = (1/C) sum_c (1/N_c) sum_i max(0, ||mu_c - x_i|| - delta_v)^2
//!   L_dist = (1/(C(C-1))) sum_{a != b} max(0, 2 delta_d - ||mu_a - mu_b||)^2
//!   L_reg  = (1/C) sum_c (1/N_c) max(0, ||mu_c|| - delta_r)^2
//!   L      = alpha L_var + beta L_dist + gamma L_reg
//!   ```
//!
//!   The distance term runs over ordered pairs, hence the C(C-1) divisor.
//!   Pixels with instance id 0 neither contribute nor receive gradient.
//!
//! [`discriminative_loss_grad`] is the exact analytic gradient of the above;
//! [`finite_diff_check`] is the central-difference oracle used to verify it
//! and any other scalar loss.

use std::collections::BTreeMap;

use crate::types::{EmbeddingMap, FeatureMap, GradientMap, InstanceMap, LossHyperParams,
    SemanticMap, IGNORE_LABEL};
use crate::{Error, Result};

/// Per-term values of the discriminative loss. `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub variance: f64,
    pub distance: f64,
    pub regularization: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown =
        LossBreakdown { variance: 0.0, distance: 0.0, regularization: 0.0, total: 0.0 };
}

/// Sizes and means of the ground-truth clusters found in an instance map.
/// Clusters are ordered by ascending instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub sizes: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

impl ClusterStats {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Mean softmax cross-entropy over non-IGNORE pixels.
///
/// Returns the scalar loss and its gradient with respect to `logits`
/// (zero on IGNORE pixels). Errors if every pixel is IGNORE.
pub fn semantic_loss(logits: &FeatureMap, labels: &SemanticMap) -> Result<(f64, FeatureMap)> {
    if logits.height != labels.height || logits.width != labels.width {
        return Err(Error::Dimension(format!(
            "logits are {}x{}, labels are {}x{}",
            logits.height, logits.width, labels.height, labels.width
        )));
    }
    let k = logits.channels;
    if k == 0 {
        return Err(Error::Dimension("logits need at least one class channel".into()));
    }
    let n = logits.height * logits.width;
    let n_valid = labels.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if n_valid == 0 {
        return Err(Error::EmptyLoss);
    }
    for &l in &labels.labels {
        if l != IGNORE_LABEL && l as usize >= k {
            return Err(Error::Consistency(format!(
                "semantic label {l} out of range for {k} logit channels"
            )));
        }
    }

    let mut grad = FeatureMap::zeros(k, logits.height, logits.width);
    let mut loss = 0.0;
    let inv = 1.0 / n_valid as f64;
    let mut probs = vec![0.0; k];
    for px in 0..n {
        let label = labels.labels[px];
        if label == IGNORE_LABEL {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for ch in 0..k {
            max = max.max(logits.data[ch * n + px]);
        }
        let mut denom = 0.0;
        for ch in 0..k {
            let e = (logits.data[ch * n + px] - max).exp();
            probs[ch] = e;
            denom += e;
        }
        let label = label as usize;
        loss -= ((logits.data[label * n + px] - max) - denom.ln()) * inv;
        for ch in 0..k {
            let p = probs[ch] / denom;
            let target = if ch == label { 1.0 } else { 0.0 };
            grad.data[ch * n + px] = (p - target) * inv;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("semantic loss".into()));
    }
    Ok((loss, grad))
}

/// Weighted sum of per-scale losses, finest scale first.
pub fn multi_scale_loss(losses: &[f64], lambda: &[f64]) -> Result<f64> {
    if losses.len() != lambda.len() {
        return Err(Error::Dimension(format!(
            "{} per-scale losses but {} weights",
            losses.len(),
            lambda.len()
        )));
    }
    Ok(losses.iter().zip(lambda).map(|(l, w)| w * l).sum())
}

fn clusters_of(gt: &InstanceMap) -> BTreeMap<u16, Vec<usize>> {
    let mut clusters: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (px, &id) in gt.ids.iter().enumerate() {
        if id != 0 {
            clusters.entry(id).or_default().push(px);
        }
    }
    clusters
}

fn check_emb_gt(emb: &EmbeddingMap, gt: &InstanceMap) -> Result<()> {
    if emb.height != gt.height || emb.width != gt.width {
        return Err(Error::Dimension(format!(
            "embedding map is {}x{}, instance map is {}x{}",
            emb.height, emb.width, gt.height, gt.width
        )));
    }
    Ok(())
}

fn cluster_means(emb: &EmbeddingMap, clusters: &BTreeMap<u16, Vec<usize>>) -> ClusterStats {
    let d = emb.dim;
    let mut sizes = Vec::with_capacity(clusters.len());
    let mut means = Vec::with_capacity(clusters.len());
    for pixels in clusters.values() {
        let mut mean = vec![0.0; d];
        for &px in pixels {
            let x = &emb.values[px * d..(px + 1) * d];
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        let inv = 1.0 / pixels.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        sizes.push(pixels.len());
        means.push(mean);
    }
    ClusterStats { sizes, means }
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluates the discriminative loss of `emb` against the ground-truth
/// partition in `gt`. Zero clusters yield a zero breakdown.
pub fn discriminative_loss(
    emb: &EmbeddingMap,
    gt: &InstanceMap,
    p: &LossHyperParams,
) -> Result<(LossBreakdown, ClusterStats)> {
    check_emb_gt(emb, gt)?;
    p.validate()?;
    let clusters = clusters_of(gt);
    let stats = cluster_means(emb, &clusters);
    let c = stats.count();
    if c == 0 {
        return Ok((LossBreakdown::ZERO, stats));
    }
    let d = emb.dim;

    let mut l_var = 0.0;
    for (ci, pixels) in clusters.values().enumerate() {
        let mean = &stats.means[ci];
        let mut acc = 0.0;
        for &px in pixels {
            let x = &emb.values[px * d..(px + 1) * d];
            let h = (dist(mean, x) - p.delta_v).max(0.0);
            acc += h * h;
        }
        l_var += acc / pixels.len() as f64;
    }
    l_var /= c as f64;

    let mut l_dist = 0.0;
    if c > 1 {
        let mut acc = 0.0;
        for a in 0..c {
            for b in (a + 1)..c {
                let h = (2.0 * p.delta_d - dist(&stats.means[a], &stats.means[b])).max(0.0);
                acc += 2.0 * h * h;
            }
        }
        l_dist = acc / (c * (c - 1)) as f64;
    }

    let mut l_reg = 0.0;
    for (ci, size) in stats.sizes.iter().enumerate() {
        let h = (norm(&stats.means[ci]) - p.delta_r).max(0.0);
        l_reg += h * h / *size as f64;
    }
    l_reg /= c as f64;

    let total = p.alpha * l_var + p.beta * l_dist + p.gamma * l_reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("discriminative loss".into()));
    }
    Ok((LossBreakdown { variance: l_var, distance: l_dist, regularization: l_reg, total }, stats))
}

/// Analytic gradient of [`discriminative_loss`] with respect to every pixel
/// embedding. Pixels with instance id 0 receive a zero gradient.
///
/// At the non-differentiable points (a distance exactly on a hinge margin,
/// or two cluster means coinciding) the zero subgradient is used.
pub fn discriminative_loss_grad(
    emb: &EmbeddingMap,
    gt: &InstanceMap,
    p: &LossHyperParams,
) -> Result<GradientMap> {
    check_emb_gt(emb, gt)?;
    p.validate()?;
    let clusters = clusters_of(gt);
    let stats = cluster_means(emb, &clusters);
    let c = stats.count();
    let d = emb.dim;
    let mut grad = GradientMap::zeros(emb.height, emb.width, d);
    if c == 0 {
        return Ok(grad);
    }
    let cf = c as f64;

    // Variance term. For j in cluster c:
    //   dL_var/dx_j = alpha/(C N_c) * (S_c/N_c - s_j),
    //   s_i = 2 max(0, d_i - delta_v) (mu_c - x_i)/d_i,  S_c = sum_i s_i.
    for (ci, pixels) in clusters.values().enumerate() {
        let mean = &stats.means[ci];
        let n_c = pixels.len() as f64;
        let mut s_sum = vec![0.0; d];
        let mut s_each: Vec<Option<Vec<f64>>> = Vec::with_capacity(pixels.len());
        for &px in pixels {
            let x = &emb.values[px * d..(px + 1) * d];
            let dist_i = dist(mean, x);
            let h = dist_i - p.delta_v;
            if h > 0.0 {
                let scale = 2.0 * h / dist_i;
                let s: Vec<f64> = mean.iter().zip(x).map(|(m, v)| scale * (m - v)).collect();
                for (acc, v) in s_sum.iter_mut().zip(&s) {
                    *acc += v;
                }
                s_each.push(Some(s));
            } else {
                s_each.push(None);
            }
        }
        let coeff = p.alpha / (cf * n_c);
        for (k, &px) in pixels.iter().enumerate() {
            let g = grad.vector_mut(px);
            match &s_each[k] {
                Some(s) => {
                    for ((g, total), own) in g.iter_mut().zip(&s_sum).zip(s) {
                        *g += coeff * (total / n_c - own);
                    }
                }
                None => {
                    for (g, total) in g.iter_mut().zip(&s_sum) {
                        *g += coeff * (total / n_c);
                    }
                }
            }
        }
    }

    // Distance and regularization terms act through the cluster means; a
    // mean distributes its gradient uniformly over the cluster's pixels.
    let mut mean_grad = vec![vec![0.0; d]; c];
    if c > 1 {
        let pair_coeff = 4.0 * p.beta / (cf * (cf - 1.0));
        for a in 0..c {
            for b in (a + 1)..c {
                let dist_ab = dist(&stats.means[a], &stats.means[b]);
                let h = 2.0 * p.delta_d - dist_ab;
                if h > 0.0 && dist_ab > 0.0 {
                    let scale = pair_coeff * h / dist_ab;
                    for k in 0..d {
                        let dir = stats.means[a][k] - stats.means[b][k];
                        mean_grad[a][k] -= scale * dir;
                        mean_grad[b][k] += scale * dir;
                    }
                }
            }
        }
    }
    for ci in 0..c {
        let n_c = stats.sizes[ci] as f64;
        let mean = &stats.means[ci];
        let norm_c = norm(mean);
        let h = norm_c - p.delta_r;
        if h > 0.0 {
            let scale = 2.0 * p.gamma * h / (cf * n_c * norm_c);
            for k in 0..d {
                mean_grad[ci][k] += scale * mean[k];
            }
        }
    }
    for (ci, pixels) in clusters.values().enumerate() {
        let inv = 1.0 / stats.sizes[ci] as f64;
        for &px in pixels {
            let g = grad.vector_mut(px);
            for (g, m) in g.iter_mut().zip(&mean_grad[ci]) {
                *g += inv * m;
            }
        }
    }
    Ok(grad)
}

/// Central-difference gradient check.
///
/// Evaluates `loss` at `x[i] +- step` for every coordinate and compares the
/// numeric slope against `analytic[i]`. Returns the worst relative error
/// `|a - n| / max(1, |a|, |n|)`. A non-finite loss value is an error.
pub fn finite_diff_check<F>(
    mut loss: F,
    input: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if input.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "input has {} coordinates, analytic gradient has {}",
            input.len(),
            analytic.len()
        )));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut x = input.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let lp = loss(&x)?;
        x[i] = orig - step;
        let lm = loss(&x)?;
        x[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::InstanceMap;

    fn emb_1d(h: usize, w: usize, dim: usize, values: &[f64]) -> EmbeddingMap {
        EmbeddingMap::new(h, w, dim, values.to_vec()).unwrap()
    }

    fn default_params() -> LossHyperParams {
        LossHyperParams::default()
    }

    /// Literal transcription of the loss definition, used as an oracle.
    fn brute_force_loss(emb: &EmbeddingMap, gt: &InstanceMap, p: &LossHyperParams) -> LossBreakdown {
        let d = emb.dim;
        let mut ids = gt.distinct_ids();
        ids.sort_unstable();
        let c = ids.len();
        if c == 0 {
            return LossBreakdown::ZERO;
        }
        let members: Vec<Vec<usize>> = ids
            .iter()
            .map(|&id| (0..gt.ids.len()).filter(|&px| gt.ids[px] == id).collect())
            .collect();
        let means: Vec<Vec<f64>> = members
            .iter()
            .map(|pxs| {
                let mut m = vec![0.0; d];
                for &px in pxs {
                    for k in 0..d {
                        m[k] += emb.values[px * d + k];
                    }
                }
                m.iter().map(|v| v / pxs.len() as f64).collect()
            })
            .collect();
        let mut l_var = 0.0;
        for (ci, pxs) in members.iter().enumerate() {
            let mut acc = 0.0;
            for &px in pxs {
                let x = &emb.values[px * d..(px + 1) * d];
                acc += (dist(&means[ci], x) - p.delta_v).max(0.0).powi(2);
            }
            l_var += acc / pxs.len() as f64;
        }
        l_var /= c as f64;
        let mut l_dist = 0.0;
        if c > 1 {
            for a in 0..c {
                for b in 0..c {
                    if a != b {
                        l_dist +=
                            (2.0 * p.delta_d - dist(&means[a], &means[b])).max(0.0).powi(2);
                    }
                }
            }
            l_dist /= (c * (c - 1)) as f64;
        }
        let mut l_reg = 0.0;
        for (ci, pxs) in members.iter().enumerate() {
            l_reg += (norm(&means[ci]) - p.delta_r).max(0.0).powi(2) / pxs.len() as f64;
        }
        l_reg /= c as f64;
        LossBreakdown {
            variance: l_var,
            distance: l_dist,
            regularization: l_reg,
            total: p.alpha * l_var + p.beta * l_dist + p.gamma * l_reg,
        }
    }

    fn random_case(seed: u64, h: usize, w: usize, dim: usize, ids_upto: u16)
        -> (EmbeddingMap, InstanceMap)
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..h * w * dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let ids: Vec<u16> = (0..h * w).map(|_| rng.gen_range(0..=ids_upto)).collect();
        (
            EmbeddingMap::new(h, w, dim, values).unwrap(),
            InstanceMap::new(h, w, ids).unwrap(),
        )
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = FeatureMap::zeros(4, 3, 3);
        let labels = SemanticMap::filled(3, 3, 2).unwrap();
        let (loss, grad) = semantic_loss(&logits, &labels).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9);
        // gradient: (1/K - one_hot) / N at every pixel
        let n = 9.0;
        for px in 0..9 {
            for ch in 0..4 {
                let expect = if ch == 2 { (0.25 - 1.0) / n } else { 0.25 / n };
                assert!((grad.data[ch * 9 + px] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_correct_logit_gives_near_zero_loss() {
        let mut logits = FeatureMap::zeros(3, 1, 1);
        logits.set(1, 0, 0, 50.0);
        let labels = SemanticMap::filled(1, 1, 1).unwrap();
        let (loss, _) = semantic_loss(&logits, &labels).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn semantic_loss_ignores_ignore_pixels() {
        let mut logits = FeatureMap::zeros(2, 1, 2);
        logits.set(0, 0, 1, 3.0);
        let labels = SemanticMap::new(1, 2, vec![IGNORE_LABEL, 0]).unwrap();
        let (loss, grad) = semantic_loss(&logits, &labels).unwrap();
        let expect = -(3.0f64.exp() / (3.0f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert_eq!(grad.at(0, 0, 0), 0.0);
        assert_eq!(grad.at(1, 0, 0), 0.0);
    }

    #[test]
    fn semantic_loss_all_ignore_is_an_error() {
        let logits = FeatureMap::zeros(2, 2, 2);
        let labels = SemanticMap::filled(2, 2, IGNORE_LABEL).unwrap();
        assert!(matches!(semantic_loss(&logits, &labels), Err(Error::EmptyLoss)));
    }

    #[test]
    fn semantic_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (h, w, k) = (3, 3, 4);
        let mut logits = FeatureMap::zeros(k, h, w);
        for v in logits.data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut ids = vec![0u16; h * w];
        for (i, id) in ids.iter_mut().enumerate() {
            *id = if i == 4 { IGNORE_LABEL } else { rng.gen_range(0..k as u16) };
        }
        let labels = SemanticMap::new(h, w, ids).unwrap();
        let (_, grad) = semantic_loss(&logits, &labels).unwrap();
        let template = logits.clone();
        let worst = finite_diff_check(
            |x| {
                let mut l = template.clone();
                l.data.copy_from_slice(x);
                semantic_loss(&l, &labels).map(|(v, _)| v)
            },
            &logits.data,
            &grad.data,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn multi_scale_weighted_sum() {
        let v = multi_scale_loss(&[1.0, 0.5, 0.25], &[1.0, 0.4, 0.16]).unwrap();
        assert!((v - 1.24).abs() < 1e-12);
    }

    #[test]
    fn multi_scale_identity_and_zero() {
        assert_eq!(multi_scale_loss(&[3.5], &[1.0]).unwrap(), 3.5);
        assert_eq!(multi_scale_loss(&[0.0, 0.0], &[1.0, 0.4]).unwrap(), 0.0);
    }

    #[test]
    fn multi_scale_length_mismatch_is_an_error() {
        assert!(multi_scale_loss(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn separated_tight_clusters_have_zero_loss() {
        // A = {(0,0), (0.5,0)}, B = {(3,0), (3.5,0)}: within delta_v of their
        // means, means 3 > 2 delta_d apart, norms < delta_r.
        let emb = emb_1d(2, 2, 2, &[0.0, 0.0, 0.5, 0.0, 3.0, 0.0, 3.5, 0.0]);
        let gt = InstanceMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let (b, stats) = discriminative_loss(&emb, &gt, &default_params()).unwrap();
        assert_eq!(b, LossBreakdown::ZERO);
        assert_eq!(stats.means, vec![vec![0.25, 0.0], vec![3.25, 0.0]]);
    }

    #[test]
    fn worked_example_matches_hand_computation() {
        // A = {(0,0), (1,0)}, B = {(0.6,0)}:
        // L_var = 0.03125, L_dist = 3.61, L_reg = 0, total = 3.64125.
        let emb = emb_1d(1, 3, 2, &[0.0, 0.0, 1.0, 0.0, 0.6, 0.0]);
        let gt = InstanceMap::new(1, 3, vec![1, 1, 2]).unwrap();
        let (b, _) = discriminative_loss(&emb, &gt, &default_params()).unwrap();
        assert!((b.variance - 0.03125).abs() < 1e-9);
        assert!((b.distance - 3.61).abs() < 1e-9);
        assert!(b.regularization.abs() < 1e-9);
        assert!((b.total - 3.64125).abs() < 1e-9);
    }

    #[test]
    fn no_instances_yield_zero_breakdown() {
        let emb = EmbeddingMap::zeros(2, 2, 3).unwrap();
        let gt = InstanceMap::zeros(2, 2).unwrap();
        let (b, stats) = discriminative_loss(&emb, &gt, &default_params()).unwrap();
        assert_eq!(b, LossBreakdown::ZERO);
        assert_eq!(stats.count(), 0);
    }

    #[test]
    fn single_cluster_has_no_distance_term() {
        let emb = emb_1d(1, 2, 1, &[0.0, 2.0]);
        let gt = InstanceMap::new(1, 2, vec![1, 1]).unwrap();
        let (b, _) = discriminative_loss(&emb, &gt, &default_params()).unwrap();
        assert_eq!(b.distance, 0.0);
        assert!(b.variance > 0.0);
    }

    #[test]
    fn matches_brute_force_on_random_cases() {
        for seed in 0..40 {
            let (emb, gt) = random_case(seed, 4, 4, 3, 4);
            let p = default_params();
            let (b, _) = discriminative_loss(&emb, &gt, &p).unwrap();
            let o = brute_force_loss(&emb, &gt, &p);
            assert!((b.variance - o.variance).abs() < 1e-12);
            assert!((b.distance - o.distance).abs() < 1e-12);
            assert!((b.regularization - o.regularization).abs() < 1e-12);
            assert!((b.total - o.total).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_terms_are_nonnegative() {
        for seed in 100..140 {
            let (emb, gt) = random_case(seed, 5, 5, 4, 5);
            let (b, _) = discriminative_loss(&emb, &gt, &default_params()).unwrap();
            assert!(b.variance >= 0.0 && b.distance >= 0.0 && b.regularization >= 0.0);
            assert!(b.total >= 0.0);
        }
    }

    #[test]
    fn relabeling_leaves_terms_unchanged() {
        for seed in 200..220 {
            let (emb, gt) = random_case(seed, 4, 4, 3, 4);
            let p = default_params();
            let (b1, _) = discriminative_loss(&emb, &gt, &p).unwrap();
            // swap ids via an order-reversing relabel
            let max = gt.ids.iter().copied().max().unwrap_or(0);
            let relabeled = InstanceMap::new(
                gt.height,
                gt.width,
                gt.ids.iter().map(|&i| if i == 0 { 0 } else { max + 1 - i }).collect(),
            )
            .unwrap();
            let (b2, _) = discriminative_loss(&emb, &relabeled, &p).unwrap();
            assert!((b1.total - b2.total).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_leaves_var_and_dist_unchanged() {
        for seed in 300..315 {
            let (emb, gt) = random_case(seed, 4, 4, 3, 3);
            let p = default_params();
            let (b1, _) = discriminative_loss(&emb, &gt, &p).unwrap();
            let shifted = EmbeddingMap::new(
                emb.height,
                emb.width,
                emb.dim,
                emb.values.iter().enumerate().map(|(i, v)| v + [0.75, -0.5, 0.25][i % 3]).collect(),
            )
            .unwrap();
            let (b2, _) = discriminative_loss(&shifted, &gt, &p).unwrap();
            assert!((b1.variance - b2.variance).abs() < 1e-9);
            assert!((b1.distance - b2.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_zero_when_all_hinges_inactive() {
        let emb = emb_1d(2, 2, 2, &[0.0, 0.0, 0.5, 0.0, 3.0, 0.0, 3.5, 0.0]);
        let gt = InstanceMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let g = discriminative_loss_grad(&emb, &gt, &default_params()).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_zero_for_identical_singleton_cluster() {
        let emb = emb_1d(1, 3, 2, &[0.2, 0.2, 0.2, 0.2, 0.2, 0.2]);
        let gt = InstanceMap::new(1, 3, vec![1, 1, 1]).unwrap();
        let g = discriminative_loss_grad(&emb, &gt, &default_params()).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_zero_on_unlabeled_pixels() {
        let (emb, _) = random_case(42, 3, 3, 3, 0);
        let gt = InstanceMap::new(3, 3, vec![1, 1, 0, 2, 2, 0, 1, 2, 0]).unwrap();
        let g = discriminative_loss_grad(&emb, &gt, &default_params()).unwrap();
        for px in [2usize, 5, 8] {
            assert!(g.values[px * 3..(px + 1) * 3].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_worked_example() {
        let emb = emb_1d(1, 3, 2, &[0.0, 0.0, 1.0, 0.0, 0.6, 0.0]);
        let gt = InstanceMap::new(1, 3, vec![1, 1, 2]).unwrap();
        let p = default_params();
        let g = discriminative_loss_grad(&emb, &gt, &p).unwrap();
        let worst = finite_diff_check(
            |x| {
                let e = EmbeddingMap::new(1, 3, 2, x.to_vec()).unwrap();
                discriminative_loss(&e, &gt, &p).map(|(b, _)| b.total)
            },
            &emb.values,
            &g.values,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences_with_all_terms_active() {
        // Small delta_r activates the regularizer as well.
        let p = LossHyperParams::new(0.25, 1.0, 0.2, 1.0, 1.0, 0.5, vec![1.0]).unwrap();
        for seed in 500..520 {
            let (emb, gt) = random_case(seed, 4, 4, 3, 3);
            let g = discriminative_loss_grad(&emb, &gt, &p).unwrap();
            let worst = finite_diff_check(
                |x| {
                    let e = EmbeddingMap::new(4, 4, 3, x.to_vec()).unwrap();
                    discriminative_loss(&e, &gt, &p).map(|(b, _)| b.total)
                },
                &emb.values,
                &g.values,
                1e-5,
            )
            .unwrap();
            assert!(worst < 1e-6, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn finite_diff_check_is_tight_on_a_quadratic() {
        let x = vec![0.3, -1.2, 2.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let worst = finite_diff_check(
            |v| Ok(v.iter().map(|x| x * x).sum()),
            &x,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-9, "worst relative error {worst}");
    }

    #[test]
    fn finite_diff_check_rejects_non_finite_losses() {
        let r = finite_diff_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
