//! A small convolutional network with hand-written backpropagation.
//!
//! Layers are 3x3 convolutions with stride 1 and zero padding (output size
//! equals input size), optionally followed by a ReLU. Two branch shapes are
//! used by the pipeline, both three layers deep with ReLU on all but the
//! last:
//!
//! * semantic: RGB (3 channels) -> 16 -> 16 -> class-count logits
//! * instance: RGB or RGB+xy (3 or 5 channels) -> 16 -> 16 -> embedding dim
//!
//! The instance branch is trained in two stages. Stage one sees RGB only.
//! [`Network::extend_input_channels`] then appends zero-weighted input
//! channels for the normalized x/y coordinate planes, which leaves every
//! forward pass bit-identical until the first optimizer step, and stage two
//! resumes training with position information available.
//!
//! Optimization is Adadelta with a polynomially decaying learning rate.
//! Updates are the unscaled form `sqrt((E[u^2]+eps)/(E[g^2]+eps)) * g`,
//! multiplied by the scheduled rate when applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::loss::{discriminative_loss, discriminative_loss_grad, multi_scale_loss,
    semantic_loss, LossBreakdown};
use crate::types::{make_coordinate_grid, FeatureMap, Image, InstanceMap, LossHyperParams,
    SemanticMap};
use crate::{Error, Result};

/// One 3x3 convolution layer. Weights are laid out as
/// `[out_channel][in_channel][ky][kx]`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        relu: bool,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<ConvLayer> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("layer channel counts must be positive".into()));
        }
        if weights.len() != out_channels * in_channels * 9 {
            return Err(Error::Dimension(format!(
                "layer weights: expected {} values, got {}",
                out_channels * in_channels * 9,
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Dimension(format!(
                "layer bias: expected {} values, got {}",
                out_channels,
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(ConvLayer { in_channels, out_channels, weights, bias, relu })
    }

    fn glorot(in_channels: usize, out_channels: usize, relu: bool, rng: &mut ChaCha8Rng)
        -> ConvLayer
    {
        let fan_in = (in_channels * 9) as f64;
        let fan_out = (out_channels * 9) as f64;
        let s = (6.0 / (fan_in + fan_out)).sqrt();
        let weights = (0..out_channels * in_channels * 9).map(|_| rng.gen_range(-s..s)).collect();
        ConvLayer { in_channels, out_channels, weights, bias: vec![0.0; out_channels], relu }
    }
}

/// `dst[y][x] += coeff * src[y+sy][x+sx]` over the in-bounds overlap.
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, sy: isize, sx: isize, coeff: f64) {
    if coeff == 0.0 {
        return;
    }
    let y0 = (-sy).max(0) as usize;
    let y1 = (h as isize).min(h as isize - sy).max(0) as usize;
    let x0 = (-sx).max(0) as usize;
    let x1 = (w as isize).min(w as isize - sx).max(0) as usize;
    for y in y0..y1 {
        let s_row = ((y as isize + sy) as usize) * w;
        let d_row = y * w;
        for x in x0..x1 {
            dst[d_row + x] += coeff * src[s_row + (x as isize + sx) as usize];
        }
    }
}

/// `sum over y,x of a[y][x] * b[y+sy][x+sx]` over the in-bounds overlap.
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, sy: isize, sx: isize) -> f64 {
    let y0 = (-sy).max(0) as usize;
    let y1 = (h as isize).min(h as isize - sy).max(0) as usize;
    let x0 = (-sx).max(0) as usize;
    let x1 = (w as isize).min(w as isize - sx).max(0) as usize;
    let mut acc = 0.0;
    for y in y0..y1 {
        let b_row = ((y as isize + sy) as usize) * w;
        let a_row = y * w;
        for x in x0..x1 {
            acc += a[a_row + x] * b[b_row + (x as isize + sx) as usize];
        }
    }
    acc
}

/// Per-layer activations of one forward pass. `revision` ties the cache to
/// the parameter state it was computed with.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<FeatureMap>,
    revision: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &FeatureMap {
        self.activations.last().expect("cache always holds the input")
    }
}

/// Parameter gradients, one weight and one bias vector per layer.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> ParamGrads {
        ParamGrads {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().flatten() {
            *v *= s;
        }
        for v in self.bias.iter_mut().flatten() {
            *v *= s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<ConvLayer>,
    revision: u64,
}

impl Network {
    /// Builds a network from explicit layers, checking that channel counts
    /// chain correctly.
    pub fn from_layers(layers: Vec<ConvLayer>) -> Result<Network> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Dimension(format!(
                    "layer produces {} channels but the next expects {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        Ok(Network { layers, revision: 0 })
    }

    /// Builds a fresh network along `channel_plan` (input channels first,
    /// output channels last) with Glorot-uniform weights, zero biases, and
    /// ReLU on every layer except the last.
    pub fn glorot(channel_plan: &[usize], seed: u64) -> Result<Network> {
        if channel_plan.len() < 2 {
            return Err(Error::Config("channel plan needs at least two entries".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = channel_plan.len() - 2;
        let layers = channel_plan
            .windows(2)
            .enumerate()
            .map(|(i, pair)| ConvLayer::glorot(pair[0], pair[1], i != last, &mut rng))
            .collect();
        Network::from_layers(layers)
    }

    /// Copy of this network with the last `tail` layers reinitialized, the
    /// final layer now producing `new_out_channels`. Used to warm-start one
    /// branch from another that predicts a different quantity.
    pub fn with_reinitialized_tail(
        &self,
        tail: usize,
        new_out_channels: usize,
        seed: u64,
    ) -> Result<Network> {
        if tail == 0 || tail > self.layers.len() {
            return Err(Error::Config(format!(
                "cannot reinitialize {} of {} layers",
                tail,
                self.layers.len()
            )));
        }
        let keep = self.layers.len() - tail;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<ConvLayer> = self.layers[..keep].to_vec();
        for (i, old) in self.layers[keep..].iter().enumerate() {
            let out = if keep + i == self.layers.len() - 1 { new_out_channels } else { old.out_channels };
            layers.push(ConvLayer::glorot(old.in_channels, out, old.relu, &mut rng));
        }
        Network::from_layers(layers)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().expect("nonempty").out_channels
    }

    /// Appends `extra` zero-weighted input channels after the existing ones.
    /// Forward passes stay bit-identical on any values fed to the new
    /// channels until an optimizer step changes the zeros.
    pub fn extend_input_channels(&mut self, extra: usize) -> Result<()> {
        if extra == 0 {
            return Err(Error::Config("input-channel extension must add at least one".into()));
        }
        let first = &mut self.layers[0];
        let old_in = first.in_channels;
        let new_in = old_in + extra;
        let mut weights = vec![0.0; first.out_channels * new_in * 9];
        for o in 0..first.out_channels {
            let src = &first.weights[o * old_in * 9..(o + 1) * old_in * 9];
            weights[o * new_in * 9..o * new_in * 9 + old_in * 9].copy_from_slice(src);
        }
        first.weights = weights;
        first.in_channels = new_in;
        self.revision += 1;
        Ok(())
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<ForwardCache> {
        if input.channels != self.input_channels() {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {}",
                self.input_channels(),
                input.channels
            )));
        }
        let (h, w) = (input.height, input.width);
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let prev = activations.last().expect("nonempty");
            let mut out = FeatureMap::zeros(layer.out_channels, h, w);
            for o in 0..layer.out_channels {
                let b = layer.bias[o];
                for v in out.plane_mut(o) {
                    *v = b;
                }
            }
            for o in 0..layer.out_channels {
                for i in 0..layer.in_channels {
                    let base = (o * layer.in_channels + i) * 9;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let coeff = layer.weights[(base as isize + ky * 3 + kx) as usize];
                            // split borrows: output plane o, input plane i
                            let (planes, src) = (&mut out.data, &prev.data);
                            shifted_axpy(
                                &mut planes[o * h * w..(o + 1) * h * w],
                                &src[i * h * w..(i + 1) * h * w],
                                h,
                                w,
                                ky - 1,
                                kx - 1,
                                coeff,
                            );
                        }
                    }
                }
            }
            if layer.relu {
                for v in out.data.iter_mut() {
                    *v = if *v > 0.0 { *v } else { 0.0 };
                }
            }
            activations.push(out);
        }
        Ok(ForwardCache { activations, revision: self.revision })
    }

    /// Backpropagates `grad_output` through the cached pass, returning the
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &FeatureMap)
        -> Result<(ParamGrads, FeatureMap)>
    {
        if cache.revision != self.revision {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since it was computed".into(),
            ));
        }
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::Contract("forward cache does not match this network".into()));
        }
        let out = cache.output();
        if grad_output.channels != out.channels
            || grad_output.height != out.height
            || grad_output.width != out.width
        {
            return Err(Error::Dimension(format!(
                "output gradient is {}x{}x{}, output is {}x{}x{}",
                grad_output.channels, grad_output.height, grad_output.width,
                out.channels, out.height, out.width
            )));
        }
        let (h, w) = (out.height, out.width);
        let mut grads = ParamGrads::zeros_like(self);
        let mut g = grad_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[l];
            if layer.relu {
                let output = &cache.activations[l + 1];
                for (gv, ov) in g.data.iter_mut().zip(&output.data) {
                    if !(*ov > 0.0) {
                        *gv = 0.0;
                    }
                }
            }
            for o in 0..layer.out_channels {
                grads.bias[l][o] = g.plane(o).iter().sum();
            }
            let mut gin = FeatureMap::zeros(layer.in_channels, h, w);
            for o in 0..layer.out_channels {
                for i in 0..layer.in_channels {
                    let base = (o * layer.in_channels + i) * 9;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let widx = (base as isize + ky * 3 + kx) as usize;
                            grads.weights[l][widx] =
                                shifted_dot(g.plane(o), input.plane(i), h, w, ky - 1, kx - 1);
                            shifted_axpy(
                                &mut gin.data[i * h * w..(i + 1) * h * w],
                                &g.data[o * h * w..(o + 1) * h * w],
                                h,
                                w,
                                1 - ky,
                                1 - kx,
                                layer.weights[widx],
                            );
                        }
                    }
                }
            }
            g = gin;
        }
        Ok((grads, g))
    }
}

/// Builds the network input for an image: RGB planes, plus normalized x and
/// y coordinate planes when `channels` is 5.
pub fn network_input(image: &Image, channels: usize) -> Result<FeatureMap> {
    let mut input = FeatureMap::from_image(image);
    match channels {
        3 => Ok(input),
        5 => {
            let grid = make_coordinate_grid(image.height, image.width)?;
            input.append_planes(&[&grid.xchan, &grid.ychan])?;
            Ok(input)
        }
        other => Err(Error::Config(format!(
            "network input must have 3 (RGB) or 5 (RGB+xy) channels, not {other}"
        ))),
    }
}

/// Adadelta with a polynomial learning-rate schedule:
/// `lr(i) = base_lr * (1 - i/max_iterations)^decay_power`.
#[derive(Debug, Clone)]
pub struct AdadeltaConfig {
    pub base_lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub decay_power: f64,
    pub max_iterations: usize,
}

impl Default for AdadeltaConfig {
    fn default() -> AdadeltaConfig {
        AdadeltaConfig {
            base_lr: 0.003,
            rho: 0.95,
            epsilon: 1e-6,
            decay_power: 0.9,
            max_iterations: 300,
        }
    }
}

impl AdadeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config("rho must be in [0, 1)".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.decay_power.is_finite() && self.decay_power >= 0.0) {
            return Err(Error::Config("decay_power must be nonnegative".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let frac = 1.0 - iteration as f64 / self.max_iterations as f64;
        self.base_lr * frac.powf(self.decay_power)
    }
}

/// Running Adadelta accumulators, two per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdadeltaState {
    grad_sq: Vec<Vec<f64>>,
    update_sq: Vec<Vec<f64>>,
    iteration: usize,
}

impl AdadeltaState {
    pub fn new(net: &Network) -> AdadeltaState {
        let shapes: Vec<usize> = net
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        AdadeltaState {
            grad_sq: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            update_sq: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }
}

fn adadelta_tensor(
    params: &mut [f64],
    grads: &[f64],
    grad_sq: &mut [f64],
    update_sq: &mut [f64],
    cfg: &AdadeltaConfig,
    lr: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        grad_sq[i] = cfg.rho * grad_sq[i] + (1.0 - cfg.rho) * g * g;
        let u = ((update_sq[i] + cfg.epsilon) / (grad_sq[i] + cfg.epsilon)).sqrt() * g;
        update_sq[i] = cfg.rho * update_sq[i] + (1.0 - cfg.rho) * u * u;
        params[i] -= lr * u;
    }
}

/// Applies one Adadelta update to every parameter, returning the learning
/// rate that was used. Fails once the schedule is used up.
pub fn adadelta_step(
    net: &mut Network,
    grads: &ParamGrads,
    cfg: &AdadeltaConfig,
    state: &mut AdadeltaState,
) -> Result<f64> {
    cfg.validate()?;
    if state.grad_sq.len() != net.layers.len() * 2 {
        return Err(Error::Contract("optimizer state does not match this network".into()));
    }
    if state.iteration >= cfg.max_iterations {
        return Err(Error::ScheduleExhausted {
            iteration: state.iteration,
            max_iterations: cfg.max_iterations,
        });
    }
    let lr = cfg.learning_rate(state.iteration);
    for (l, layer) in net.layers.iter_mut().enumerate() {
        if grads.weights[l].len() != layer.weights.len()
            || grads.bias[l].len() != layer.bias.len()
        {
            return Err(Error::Contract("gradient shapes do not match this network".into()));
        }
        adadelta_tensor(
            &mut layer.weights,
            &grads.weights[l],
            &mut state.grad_sq[2 * l],
            &mut state.update_sq[2 * l],
            cfg,
            lr,
        );
        adadelta_tensor(
            &mut layer.bias,
            &grads.bias[l],
            &mut state.grad_sq[2 * l + 1],
            &mut state.update_sq[2 * l + 1],
            cfg,
            lr,
        );
    }
    state.iteration += 1;
    net.revision += 1;
    Ok(lr)
}

/// Which prediction a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Semantic,
    Instance,
}

/// One training scene with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub image: &'a Image,
    pub semantic: &'a SemanticMap,
    pub instances: &'a InstanceMap,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdadeltaConfig,
    pub hyper: LossHyperParams,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            iterations: 300,
            batch_size: 4,
            optimizer: AdadeltaConfig::default(),
            hyper: LossHyperParams::default(),
        }
    }
}

/// The loss recorded at one training iteration, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainLoss {
    Semantic(f64),
    Instance(LossBreakdown),
}

impl TrainLoss {
    pub fn total(&self) -> f64 {
        match self {
            TrainLoss::Semantic(v) => *v,
            TrainLoss::Instance(b) => b.total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: TrainLoss,
}

fn downsample_feature(f: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 1 {
        return Ok(f.clone());
    }
    if factor == 0 || f.height % factor != 0 || f.width % factor != 0 {
        return Err(Error::Dimension(format!(
            "cannot downsample {}x{} by {}",
            f.height, f.width, factor
        )));
    }
    let (nh, nw) = (f.height / factor, f.width / factor);
    let mut out = FeatureMap::zeros(f.channels, nh, nw);
    for ch in 0..f.channels {
        for r in 0..nh {
            for c in 0..nw {
                out.set(ch, r, c, f.at(ch, r * factor, c * factor));
            }
        }
    }
    Ok(out)
}

/// `dst[ch][r*factor][c*factor] += scale * small[ch][r][c]`; the adjoint of
/// top-left downsampling.
fn scatter_add_scaled(dst: &mut FeatureMap, small: &FeatureMap, factor: usize, scale: f64) {
    for ch in 0..small.channels {
        for r in 0..small.height {
            for c in 0..small.width {
                let v = dst.at(ch, r * factor, c * factor) + scale * small.at(ch, r, c);
                dst.set(ch, r * factor, c * factor, v);
            }
        }
    }
}

/// Forward pass plus the multi-scale loss for one sample; gradients are
/// computed when `with_grad` is set.
fn sample_pass(
    net: &Network,
    branch: Branch,
    sample: &TrainSample<'_>,
    hyper: &LossHyperParams,
    with_grad: bool,
) -> Result<(f64, LossBreakdown, Option<ParamGrads>)> {
    let input = network_input(sample.image, net.input_channels())?;
    let cache = net.forward(&input)?;
    let out = cache.output();
    let mut grad_full = FeatureMap::zeros(out.channels, out.height, out.width);
    let mut scale_totals = Vec::with_capacity(hyper.lambda.len());
    let mut breakdown = LossBreakdown::ZERO;
    for (t, &lam) in hyper.lambda.iter().enumerate() {
        let factor = 1usize << t;
        let small = downsample_feature(out, factor)?;
        match branch {
            Branch::Semantic => {
                let labels = sample.semantic.downsample(factor)?;
                let (l, g) = semantic_loss(&small, &labels)?;
                scale_totals.push(l);
                if with_grad {
                    scatter_add_scaled(&mut grad_full, &g, factor, lam);
                }
            }
            Branch::Instance => {
                let gt = sample.instances.downsample(factor)?;
                // hinges silently absorb NaN, so divergence is caught here
                if !small.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("instance embeddings".into()));
                }
                let emb = crate::types::EmbeddingMap::from_feature_map(&small);
                let (b, _) = discriminative_loss(&emb, &gt, hyper)?;
                scale_totals.push(b.total);
                breakdown.variance += lam * b.variance;
                breakdown.distance += lam * b.distance;
                breakdown.regularization += lam * b.regularization;
                if with_grad {
                    let g = discriminative_loss_grad(&emb, &gt, hyper)?;
                    scatter_add_scaled(&mut grad_full, &g.to_feature_map(), factor, lam);
                }
            }
        }
    }
    let total = multi_scale_loss(&scale_totals, &hyper.lambda)?;
    breakdown.total = total;
    let grads = if with_grad {
        let (g, _) = net.backward(&cache, &grad_full)?;
        Some(g)
    } else {
        None
    };
    Ok((total, breakdown, grads))
}

/// Mean loss and gradients over a batch. Per-sample passes run in parallel;
/// the fold happens in batch order, so results do not depend on the thread
/// count.
fn batch_pass(
    net: &Network,
    branch: Branch,
    batch: &[&TrainSample<'_>],
    hyper: &LossHyperParams,
    with_grad: bool,
) -> Result<(f64, LossBreakdown, Option<ParamGrads>)> {
    let results: Vec<(f64, LossBreakdown, Option<ParamGrads>)> = batch
        .par_iter()
        .map(|s| sample_pass(net, branch, s, hyper, with_grad))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut breakdown = LossBreakdown::ZERO;
    let mut grads = with_grad.then(|| ParamGrads::zeros_like(net));
    for (t, b, g) in &results {
        total += t;
        breakdown.variance += b.variance;
        breakdown.distance += b.distance;
        breakdown.regularization += b.regularization;
        breakdown.total += b.total;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_assign(g);
        }
    }
    total *= inv;
    breakdown.variance *= inv;
    breakdown.distance *= inv;
    breakdown.regularization *= inv;
    breakdown.total *= inv;
    if let Some(acc) = grads.as_mut() {
        acc.scale(inv);
    }
    Ok((total, breakdown, grads))
}

/// Mean loss of `net` over `samples`, without touching any parameters.
/// Follows the exact arithmetic of a training iteration's logged loss.
pub fn evaluate_batch(
    branch: Branch,
    samples: &[TrainSample<'_>],
    net: &Network,
    hyper: &LossHyperParams,
) -> Result<TrainLoss> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty batch".into()));
    }
    let refs: Vec<&TrainSample<'_>> = samples.iter().collect();
    let (total, breakdown, _) = batch_pass(net, branch, &refs, hyper, false)?;
    Ok(match branch {
        Branch::Semantic => TrainLoss::Semantic(total),
        Branch::Instance => TrainLoss::Instance(breakdown),
    })
}

/// Trains a copy of `base` on `dataset` and returns it with the per-iteration
/// log. Batches cycle through the dataset in order; the loss in the log is
/// measured before that iteration's update.
pub fn train(
    branch: Branch,
    dataset: &[TrainSample<'_>],
    base: &Network,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<TrainLog>)> {
    if dataset.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if cfg.iterations > cfg.optimizer.max_iterations {
        return Err(Error::Config(format!(
            "{} iterations will not fit a schedule of {}",
            cfg.iterations, cfg.optimizer.max_iterations
        )));
    }
    cfg.optimizer.validate()?;
    cfg.hyper.validate()?;
    let mut net = base.clone();
    let mut state = AdadeltaState::new(&net);
    let mut logs = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let start = (iteration * cfg.batch_size) % dataset.len();
        let batch: Vec<&TrainSample<'_>> =
            (0..cfg.batch_size).map(|k| &dataset[(start + k) % dataset.len()]).collect();
        let (total, breakdown, grads) = batch_pass(&net, branch, &batch, &cfg.hyper, true)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { iteration },
                e => e,
            })?;
        if !total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let grads = grads.expect("requested gradients");
        let lr = adadelta_step(&mut net, &grads, &cfg.optimizer, &mut state)?;
        logs.push(TrainLog {
            iteration,
            lr,
            loss: match branch {
                Branch::Semantic => TrainLoss::Semantic(total),
                Branch::Instance => TrainLoss::Instance(breakdown),
            },
        });
    }
    Ok((net, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::finite_diff_check;
    use crate::types::IGNORE_LABEL;

    fn rng_net(plan: &[usize], seed: u64) -> Network {
        Network::glorot(plan, seed).unwrap()
    }

    fn random_input(ch: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FeatureMap::zeros(ch, h, w);
        for v in f.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        f
    }

    /// Direct six-loop convolution, the oracle for the shifted-slice kernels.
    fn naive_forward(net: &Network, input: &FeatureMap) -> FeatureMap {
        let (h, w) = (input.height, input.width);
        let mut current = input.clone();
        for layer in net.layers() {
            let mut out = FeatureMap::zeros(layer.out_channels, h, w);
            for o in 0..layer.out_channels {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = layer.bias[o];
                        for i in 0..layer.in_channels {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (sy, sx) = (y + ky, x + kx);
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                        let wgt = layer.weights
                                            [(o * layer.in_channels + i) * 9
                                                + ((ky + 1) * 3 + kx + 1) as usize];
                                        acc += wgt * current.at(i, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        if layer.relu && acc <= 0.0 {
                            acc = 0.0;
                        }
                        out.set(o, y as usize, x as usize, acc);
                    }
                }
            }
            current = out;
        }
        current
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut weights = vec![0.0; 9];
        weights[4] = 1.0; // center tap
        let layer = ConvLayer::new(1, 1, false, weights, vec![0.0]).unwrap();
        let net = Network::from_layers(vec![layer]).unwrap();
        let input = random_input(1, 5, 7, 3);
        let out = net.forward(&input).unwrap();
        assert_eq!(out.output().data, input.data);
    }

    #[test]
    fn forward_matches_naive_convolution() {
        for seed in 0..8 {
            let net = rng_net(&[2, 4, 3], seed);
            let input = random_input(2, 6, 5, seed + 100);
            let fast = net.forward(&input).unwrap();
            let slow = naive_forward(&net, &input);
            for (a, b) in fast.output().data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_padding_shows_at_the_border() {
        // A kernel that reads only the left neighbor: border column sees 0.
        let mut weights = vec![0.0; 9];
        weights[3] = 1.0; // (ky=1, kx=0) reads in[y][x-1]
        let layer = ConvLayer::new(1, 1, false, weights, vec![0.0]).unwrap();
        let net = Network::from_layers(vec![layer]).unwrap();
        let mut input = FeatureMap::zeros(1, 2, 3);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
        let out = net.forward(&input).unwrap();
        assert_eq!(out.output().data, vec![0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..6 {
            let net = rng_net(&[2, 3, 2], seed);
            let input = random_input(2, 4, 4, seed + 50);
            // L = 0.5 * sum(out^2) so dL/dout = out
            let cache = net.forward(&input).unwrap();
            let grad_out = cache.output().clone();
            let (grads, _) = net.backward(&cache, &grad_out).unwrap();
            let layers = net.layers().to_vec();
            for (l, layer) in layers.iter().enumerate() {
                let eval = |weights: &[f64]| -> crate::Result<f64> {
                    let mut ls = layers.clone();
                    ls[l].weights = weights.to_vec();
                    let n = Network::from_layers(ls)?;
                    let out = n.forward(&input)?;
                    Ok(out.output().data.iter().map(|v| 0.5 * v * v).sum())
                };
                let worst =
                    finite_diff_check(eval, &layer.weights, &grads.weights[l], 1e-6).unwrap();
                assert!(worst < 1e-6, "seed {seed} layer {l} weights: {worst}");
                let eval_b = |bias: &[f64]| -> crate::Result<f64> {
                    let mut ls = layers.clone();
                    ls[l].bias = bias.to_vec();
                    let n = Network::from_layers(ls)?;
                    let out = n.forward(&input)?;
                    Ok(out.output().data.iter().map(|v| 0.5 * v * v).sum())
                };
                let worst = finite_diff_check(eval_b, &layer.bias, &grads.bias[l], 1e-6).unwrap();
                assert!(worst < 1e-6, "seed {seed} layer {l} bias: {worst}");
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for seed in 0..6 {
            let net = rng_net(&[2, 3, 2], seed + 10);
            let input = random_input(2, 4, 4, seed + 60);
            let cache = net.forward(&input).unwrap();
            let grad_out = cache.output().clone();
            let (_, gin) = net.backward(&cache, &grad_out).unwrap();
            let template = input.clone();
            let worst = finite_diff_check(
                |x| {
                    let mut f = template.clone();
                    f.data.copy_from_slice(x);
                    let out = net.forward(&f)?;
                    Ok(out.output().data.iter().map(|v| 0.5 * v * v).sum())
                },
                &input.data,
                &gin.data,
                1e-6,
            )
            .unwrap();
            assert!(worst < 1e-6, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let net = rng_net(&[1, 2], 1);
        let input = random_input(1, 3, 3, 2);
        let cache = net.forward(&input).unwrap();
        let mut updated = net.clone();
        let mut state = AdadeltaState::new(&updated);
        let mut grads = ParamGrads::zeros_like(&updated);
        grads.weights[0][0] = 1.0;
        adadelta_step(&mut updated, &grads, &AdadeltaConfig::default(), &mut state).unwrap();
        let grad_out = cache.output().clone();
        assert!(matches!(
            updated.backward(&cache, &grad_out),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adadelta_first_step_matches_hand_computation() {
        // One gradient of 1.0 on a fresh accumulator:
        //   E[g^2] = 0.05, u = sqrt(1e-6 / 0.050001), step = -lr * u
        let mut weights = vec![0.0; 9];
        weights[4] = 0.5;
        let layer = ConvLayer::new(1, 1, false, weights, vec![0.0]).unwrap();
        let mut net = Network::from_layers(vec![layer]).unwrap();
        let mut grads = ParamGrads::zeros_like(&net);
        grads.weights[0][4] = 1.0;
        let cfg = AdadeltaConfig { max_iterations: 100, ..AdadeltaConfig::default() };
        let mut state = AdadeltaState::new(&net);
        let lr = adadelta_step(&mut net, &grads, &cfg, &mut state).unwrap();
        assert_eq!(lr, 0.003);
        let g_sq = 0.05 * 1.0;
        let u = ((0.0 + 1e-6) / (g_sq + 1e-6_f64)).sqrt();
        let expected = 0.5 - 0.003 * u;
        assert_eq!(net.layers()[0].weights[4], expected);
        let delta = 0.5 - expected;
        assert!((delta - 1.3416e-5).abs() < 1e-9, "delta {delta}");
        // untouched parameters stay put
        assert_eq!(net.layers()[0].weights[0], 0.0);
    }

    #[test]
    fn schedule_decays_and_then_runs_out() {
        let cfg = AdadeltaConfig { max_iterations: 4, ..AdadeltaConfig::default() };
        assert_eq!(cfg.learning_rate(0), 0.003);
        assert!(cfg.learning_rate(3) < cfg.learning_rate(2));
        let mut net = rng_net(&[1, 1], 9);
        let mut state = AdadeltaState::new(&net);
        let grads = ParamGrads::zeros_like(&net);
        for _ in 0..4 {
            adadelta_step(&mut net, &grads, &cfg, &mut state).unwrap();
        }
        assert!(matches!(
            adadelta_step(&mut net, &grads, &cfg, &mut state),
            Err(Error::ScheduleExhausted { iteration: 4, max_iterations: 4 })
        ));
    }

    #[test]
    fn extending_input_channels_is_bit_exact() {
        let net = rng_net(&[3, 5, 4], 21);
        let rgb = {
            let mut f = random_input(3, 6, 8, 22);
            for v in f.data.iter_mut() {
                *v = v.abs(); // image-like nonnegative input
            }
            f
        };
        let before = net.forward(&rgb).unwrap();
        let mut extended = net.clone();
        extended.extend_input_channels(2).unwrap();
        assert_eq!(extended.input_channels(), 5);
        let mut with_extra = rgb.clone();
        let grid = make_coordinate_grid(6, 8).unwrap();
        with_extra.append_planes(&[&grid.xchan, &grid.ychan]).unwrap();
        let after = extended.forward(&with_extra).unwrap();
        let a = before.output();
        let b = after.output();
        assert_eq!(a.data.len(), b.data.len());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn reinitialized_tail_keeps_leading_layers() {
        let net = rng_net(&[3, 6, 6, 4], 31);
        let transferred = net.with_reinitialized_tail(1, 9, 77).unwrap();
        assert_eq!(transferred.output_channels(), 9);
        assert_eq!(transferred.layers()[0], net.layers()[0]);
        assert_eq!(transferred.layers()[1], net.layers()[1]);
        assert_ne!(transferred.layers()[2].out_channels, net.layers()[2].out_channels);
    }

    fn tiny_scene() -> (Image, SemanticMap, InstanceMap) {
        // top half blue-ish sky (class 0), bottom half green ground (class 1),
        // with a red square instance on the ground (class 2)
        let (h, w) = (16, 16);
        let mut img = Image::filled(h, w, [0.3, 0.5, 0.9]).unwrap();
        let mut sem = SemanticMap::filled(h, w, 0).unwrap();
        let mut inst = InstanceMap::zeros(h, w).unwrap();
        for r in 8..16 {
            for c in 0..16 {
                img.set_rgb(r, c, [0.3, 0.45, 0.25]);
                sem.set_label(r, c, 1);
            }
        }
        for r in 9..14 {
            for c in 3..8 {
                img.set_rgb(r, c, [0.85, 0.15, 0.15]);
                sem.set_label(r, c, 2);
                inst.set_id(r, c, 1);
            }
        }
        (img, sem, inst)
    }

    #[test]
    fn semantic_training_overfits_one_scene() {
        let (img, sem, inst) = tiny_scene();
        let dataset = [TrainSample { image: &img, semantic: &sem, instances: &inst }];
        let base = Network::glorot(&[3, 8, 8, 3], 5).unwrap();
        let cfg = TrainConfig {
            iterations: 300,
            batch_size: 1,
            optimizer: AdadeltaConfig {
                base_lr: 1.0,
                max_iterations: 300,
                ..AdadeltaConfig::default()
            },
            hyper: LossHyperParams { lambda: vec![1.0, 0.4], ..LossHyperParams::default() },
        };
        let (_, logs) = train(Branch::Semantic, &dataset, &base, &cfg).unwrap();
        let first = logs.first().unwrap().loss.total();
        let last = logs.last().unwrap().loss.total();
        assert!(last < 0.3, "loss only reached {last} from {first}");
        assert!(last < first);
    }

    #[test]
    fn instance_training_reduces_the_loss() {
        // two differently colored squares, separable from RGB alone
        let (h, w) = (16, 16);
        let mut img = Image::filled(h, w, [0.2, 0.2, 0.2]).unwrap();
        let sem = SemanticMap::filled(h, w, 0).unwrap();
        let mut inst = InstanceMap::zeros(h, w).unwrap();
        for r in 2..7 {
            for c in 2..7 {
                img.set_rgb(r, c, [0.9, 0.1, 0.1]);
                inst.set_id(r, c, 1);
            }
        }
        for r in 9..14 {
            for c in 9..14 {
                img.set_rgb(r, c, [0.1, 0.1, 0.9]);
                inst.set_id(r, c, 2);
            }
        }
        let dataset = [TrainSample { image: &img, semantic: &sem, instances: &inst }];
        let base = Network::glorot(&[3, 8, 8, 4], 6).unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 1,
            optimizer: AdadeltaConfig {
                base_lr: 1.0,
                max_iterations: 200,
                ..AdadeltaConfig::default()
            },
            hyper: LossHyperParams { lambda: vec![1.0], ..LossHyperParams::default() },
        };
        let (_, logs) = train(Branch::Instance, &dataset, &base, &cfg).unwrap();
        let first = logs.first().unwrap().loss.total();
        let last = logs.last().unwrap().loss.total();
        assert!(last < 0.5 * first, "loss went from {first} to {last}");
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let (img, sem, inst) = tiny_scene();
        let dataset = [TrainSample { image: &img, semantic: &sem, instances: &inst }];
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 3,
            optimizer: AdadeltaConfig { max_iterations: 5, ..AdadeltaConfig::default() },
            hyper: LossHyperParams { lambda: vec![1.0, 0.4], ..LossHyperParams::default() },
        };
        let base = Network::glorot(&[3, 6, 3], 11).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train(Branch::Semantic, &dataset, &base, &cfg).unwrap())
        };
        let (net1, logs1) = run(1);
        let (net4, logs4) = run(4);
        assert_eq!(logs1, logs4);
        for (a, b) in net1.layers().iter().zip(net4.layers()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn evaluate_batch_matches_first_training_log() {
        let (img, sem, inst) = tiny_scene();
        let dataset = [TrainSample { image: &img, semantic: &sem, instances: &inst }];
        let base = Network::glorot(&[3, 6, 3], 12).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            batch_size: 1,
            optimizer: AdadeltaConfig { max_iterations: 1, ..AdadeltaConfig::default() },
            hyper: LossHyperParams { lambda: vec![1.0, 0.4], ..LossHyperParams::default() },
        };
        let eval = evaluate_batch(Branch::Semantic, &dataset, &base, &cfg.hyper).unwrap();
        let (_, logs) = train(Branch::Semantic, &dataset, &base, &cfg).unwrap();
        assert_eq!(eval.total().to_bits(), logs[0].loss.total().to_bits());
    }

    #[test]
    fn training_rejects_oversized_iteration_counts() {
        let (img, sem, inst) = tiny_scene();
        let dataset = [TrainSample { image: &img, semantic: &sem, instances: &inst }];
        let base = Network::glorot(&[3, 4, 3], 13).unwrap();
        let cfg = TrainConfig {
            iterations: 10,
            batch_size: 1,
            optimizer: AdadeltaConfig { max_iterations: 5, ..AdadeltaConfig::default() },
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(Branch::Semantic, &dataset, &base, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn semantic_loss_respects_ignore_at_every_scale() {
        let (img, mut sem, inst) = tiny_scene();
        sem.set_label(0, 0, IGNORE_LABEL);
        let dataset = [TrainSample { image: &img, semantic: &sem, instances: &inst }];
        let base = Network::glorot(&[3, 4, 3], 14).unwrap();
        let out = evaluate_batch(
            Branch::Semantic,
            &dataset,
            &base,
            &LossHyperParams { lambda: vec![1.0, 0.4, 0.16], ..LossHyperParams::default() },
        );
        assert!(out.is_ok());
    }

    #[test]
    fn network_input_channel_plans() {
        let img = Image::filled(3, 4, [0.1, 0.2, 0.3]).unwrap();
        assert_eq!(network_input(&img, 3).unwrap().channels, 3);
        let five = network_input(&img, 5).unwrap();
        assert_eq!(five.channels, 5);
        // x plane varies along columns, y plane along rows
        assert_eq!(five.at(3, 0, 0), 0.0);
        assert_eq!(five.at(3, 0, 3), 1.0);
        assert_eq!(five.at(4, 0, 0), 0.0);
        assert_eq!(five.at(4, 2, 0), 1.0);
        assert!(network_input(&img, 4).is_err());
    }
}
