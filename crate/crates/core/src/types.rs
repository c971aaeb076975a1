//! Fundamental raster types: RGB images, semantic and instance label maps,
//! per-pixel embedding maps, plane-major feature maps and coordinate grids.
//!
//! Conventions used throughout the crate:
//! * all rasters are row-major, `(row, col)` with `row 0` at the top;
//! * semantic labels are `u16`, [`IGNORE_LABEL`] marks pixels excluded from
//!   losses and metrics;
//! * instance id `0` means "no instance"; canonical maps use ids `1..=M`
//!   in first-occurrence order.

use std::collections::HashMap;

use crate::{Error, Result};

/// Label value that marks ignored pixels in 16-bit label maps.
pub const IGNORE_LABEL: u16 = 65535;

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "raster dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// RGB image with channel values in `[0, 1]`, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `3 * height * width` values, `pixels[3 * (r * width + c) + ch]`.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if pixels.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "image buffer holds {} values, expected {}",
                pixels.len(),
                3 * height * width
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Dimension(
                "image channel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { height, width, pixels })
    }

    /// Constant-color image.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(3 * height * width);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(height, width, pixels)
    }

    #[inline]
    pub fn rgb(&self, r: usize, c: usize) -> [f64; 3] {
        let i = 3 * (r * self.width + c);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = 3 * (r * self.width + c);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel semantic class labels (`u16`, [`IGNORE_LABEL`] allowed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        check_dims(height, width)?;
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "label buffer holds {} values, expected {}",
                labels.len(),
                height * width
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    #[inline]
    pub fn label(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    #[inline]
    pub fn set_label(&mut self, r: usize, c: usize, label: u16) {
        self.labels[r * self.width + c] = label;
    }

    /// Every non-IGNORE label must be a valid index into `classes`.
    pub fn validate_against(&self, classes: &ClassTable) -> Result<()> {
        let k = classes.len() as u16;
        for &l in &self.labels {
            if l != IGNORE_LABEL && l >= k {
                return Err(Error::Consistency(format!(
                    "semantic label {l} out of range for {k} classes"
                )));
            }
        }
        Ok(())
    }

    /// Top-left nearest-neighbor downsampling. `factor` must divide both dims.
    pub fn downsample(&self, factor: usize) -> Result<SemanticMap> {
        let labels = downsample_plane(self.height, self.width, &self.labels, factor)?;
        SemanticMap::new(self.height / factor, self.width / factor, labels)
    }
}

/// Per-pixel instance ids; `0` means "no instance".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        check_dims(height, width)?;
        if ids.len() != height * width {
            return Err(Error::Dimension(format!(
                "id buffer holds {} values, expected {}",
                ids.len(),
                height * width
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    #[inline]
    pub fn id(&self, r: usize, c: usize) -> u16 {
        self.ids[r * self.width + c]
    }

    #[inline]
    pub fn set_id(&mut self, r: usize, c: usize, id: u16) {
        self.ids[r * self.width + c] = id;
    }

    /// Relabels nonzero ids to `1..=M` by first occurrence in row-major
    /// order; zero pixels stay zero. Idempotent.
    pub fn canonicalize(&self) -> InstanceMap {
        let mut remap: HashMap<u16, u16> = HashMap::new();
        let mut next: u16 = 1;
        let ids = self
            .ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    0
                } else {
                    *remap.entry(id).or_insert_with(|| {
                        let v = next;
                        next += 1;
                        v
                    })
                }
            })
            .collect();
        InstanceMap { height: self.height, width: self.width, ids }
    }

    /// Distinct nonzero ids, ascending.
    pub fn distinct_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.ids.iter().copied().filter(|&i| i != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Top-left nearest-neighbor downsampling. `factor` must divide both dims.
    pub fn downsample(&self, factor: usize) -> Result<InstanceMap> {
        let ids = downsample_plane(self.height, self.width, &self.ids, factor)?;
        InstanceMap::new(self.height / factor, self.width / factor, ids)
    }
}

fn downsample_plane(height: usize, width: usize, data: &[u16], factor: usize) -> Result<Vec<u16>> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::Dimension(format!(
            "downsample factor {factor} does not divide {height}x{width}"
        )));
    }
    let (nh, nw) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        for c in 0..nw {
            out.push(data[(r * factor) * width + c * factor]);
        }
    }
    Ok(out)
}

/// Per-pixel embedding vectors, row-major, channel-last:
/// `values[(r * width + c) * dim + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be positive".into()));
        }
        if values.len() != height * width * dim {
            return Err(Error::Dimension(format!(
                "embedding buffer holds {} values, expected {}",
                values.len(),
                height * width * dim
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding map".into()));
        }
        Ok(Self { height, width, dim, values })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Result<Self> {
        Self::new(height, width, dim, vec![0.0; height * width * dim])
    }

    #[inline]
    pub fn vector(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.width + c) * self.dim;
        &self.values[i..i + self.dim]
    }

    #[inline]
    pub fn vector_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.width + c) * self.dim;
        &mut self.values[i..i + self.dim]
    }

    /// Reinterprets a plane-major feature map as channel-last embeddings.
    pub fn from_feature_map(fm: &FeatureMap) -> Self {
        let (h, w, d) = (fm.height, fm.width, fm.channels);
        let mut values = vec![0.0; h * w * d];
        for ch in 0..d {
            let plane = fm.plane(ch);
            for (px, &v) in plane.iter().enumerate() {
                values[px * d + ch] = v;
            }
        }
        Self { height: h, width: w, dim: d, values }
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        feature_from_channel_last(self.height, self.width, self.dim, &self.values)
    }
}

/// Per-pixel loss gradient with the same layout as [`EmbeddingMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl GradientMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self { height, width, dim, values: vec![0.0; height * width * dim] }
    }

    #[inline]
    pub fn vector_mut(&mut self, pixel: usize) -> &mut [f64] {
        let i = pixel * self.dim;
        &mut self.values[i..i + self.dim]
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        feature_from_channel_last(self.height, self.width, self.dim, &self.values)
    }
}

fn feature_from_channel_last(h: usize, w: usize, d: usize, values: &[f64]) -> FeatureMap {
    let mut fm = FeatureMap::zeros(d, h, w);
    for ch in 0..d {
        let plane = fm.plane_mut(ch);
        for (px, slot) in plane.iter_mut().enumerate() {
            *slot = values[px * d + ch];
        }
    }
    fm
}

/// Multi-channel raster in plane-major order: `data[ch * h * w + r * w + c]`.
/// Used for network activations and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn at(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[ch * self.height * self.width + r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f64) {
        self.data[ch * self.height * self.width + r * self.width + c] = v;
    }

    /// RGB planes of an image.
    pub fn from_image(image: &Image) -> Self {
        let mut fm = Self::zeros(3, image.height, image.width);
        for ch in 0..3 {
            let plane = fm.plane_mut(ch);
            for (px, slot) in plane.iter_mut().enumerate() {
                *slot = image.pixels[3 * px + ch];
            }
        }
        fm
    }

    /// Appends extra channels (e.g. coordinate planes) after the existing ones.
    pub fn append_planes(&mut self, planes: &[&[f64]]) -> Result<()> {
        let n = self.height * self.width;
        for p in planes {
            if p.len() != n {
                return Err(Error::Dimension(format!(
                    "appended plane holds {} values, expected {n}",
                    p.len()
                )));
            }
            self.data.extend_from_slice(p);
            self.channels += 1;
        }
        Ok(())
    }
}

/// Normalized pixel coordinates: `xchan` runs 0 at the left edge to 1 at the
/// right edge, `ychan` 0 at the top to 1 at the bottom. A single row or
/// column maps to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
    pub xchan: Vec<f64>,
    pub ychan: Vec<f64>,
}

/// Builds the coordinate grid for the given raster dimensions.
///
/// Axis values are filled symmetrically (`axis[n-1-i] = 1 - axis[i]`) so the
/// horizontal channel mirrored about the vertical midline is exactly
/// `1 - xchan`, bit for bit.
pub fn make_coordinate_grid(height: usize, width: usize) -> Result<CoordinateGrid> {
    check_dims(height, width)?;
    let xs = axis_values(width);
    let ys = axis_values(height);
    let mut xchan = Vec::with_capacity(height * width);
    let mut ychan = Vec::with_capacity(height * width);
    for r in 0..height {
        xchan.extend_from_slice(&xs);
        ychan.extend(std::iter::repeat(ys[r]).take(width));
    }
    Ok(CoordinateGrid { height, width, xchan, ychan })
}

fn axis_values(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let denom = (n - 1) as f64;
    let mut v = vec![0.0; n];
    for i in 0..=(n - 1) / 2 {
        let t = i as f64 / denom;
        v[i] = t;
        v[n - 1 - i] = 1.0 - t;
    }
    v
}

/// Whether a class is counted as individually-segmented ("thing") or
/// amorphous ("stuff").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Thing,
    Stuff,
}

impl std::fmt::Display for ClassKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassKind::Thing => write!(f, "thing"),
            ClassKind::Stuff => write!(f, "stuff"),
        }
    }
}

impl std::str::FromStr for ClassKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thing" => Ok(ClassKind::Thing),
            "stuff" => Ok(ClassKind::Stuff),
            other => Err(Error::Config(format!("unknown class kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub name: String,
    pub kind: ClassKind,
}

/// Ordered class registry; a class id is its index in the table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    classes: Vec<ClassDef>,
}

impl ClassTable {
    pub fn new(classes: Vec<ClassDef>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("class table must not be empty".into()));
        }
        if classes.len() >= IGNORE_LABEL as usize {
            return Err(Error::Config("too many classes for 16-bit labels".into()));
        }
        let mut names: Vec<&str> = classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty()) {
            return Err(Error::Config("class names must be unique and non-empty".into()));
        }
        if names.iter().any(|n| n.contains(char::is_whitespace)) {
            return Err(Error::Config("class names must not contain whitespace".into()));
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, idx: u16) -> Option<&ClassDef> {
        self.classes.get(idx as usize)
    }

    pub fn kind(&self, idx: u16) -> Option<ClassKind> {
        self.get(idx).map(|c| c.kind)
    }

    pub fn is_thing(&self, idx: u16) -> bool {
        self.kind(idx) == Some(ClassKind::Thing)
    }

    pub fn name(&self, idx: u16) -> Option<&str> {
        self.get(idx).map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<u16> {
        self.classes.iter().position(|c| c.name == name).map(|i| i as u16)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &ClassDef)> {
        self.classes.iter().enumerate().map(|(i, c)| (i as u16, c))
    }

    pub fn thing_indices(&self) -> Vec<u16> {
        self.iter().filter(|(_, c)| c.kind == ClassKind::Thing).map(|(i, _)| i).collect()
    }

    /// Panoptic scenarios need at least one thing and one stuff class.
    pub fn validate_panoptic(&self) -> Result<()> {
        let things = self.classes.iter().filter(|c| c.kind == ClassKind::Thing).count();
        if things == 0 || things == self.classes.len() {
            return Err(Error::Config(
                "panoptic class table needs at least one thing and one stuff class".into(),
            ));
        }
        Ok(())
    }
}

/// Margins and weights of the instance embedding loss plus the per-scale
/// aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHyperParams {
    /// Within-cluster hinge margin.
    pub delta_v: f64,
    /// Half the between-cluster hinge margin.
    pub delta_d: f64,
    /// Cluster-center norm hinge margin.
    pub delta_r: f64,
    /// Weight of the variance term.
    pub alpha: f64,
    /// Weight of the distance term.
    pub beta: f64,
    /// Weight of the regularization term.
    pub gamma: f64,
    /// Per-scale weights for multi-scale aggregation, finest first.
    pub lambda: Vec<f64>,
}

impl LossHyperParams {
    pub fn new(
        delta_v: f64,
        delta_d: f64,
        delta_r: f64,
        alpha: f64,
        beta: f64,
        gamma: f64,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        let p = Self { delta_v, delta_d, delta_r, alpha, beta, gamma, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let margins = [self.delta_v, self.delta_d, self.delta_r];
        if margins.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(Error::Config("loss margins must be positive".into()));
        }
        if self.delta_d <= self.delta_v {
            return Err(Error::Config("delta_d must exceed delta_v".into()));
        }
        let weights = [self.alpha, self.beta, self.gamma];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda.is_empty() || self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("lambda weights must be non-negative and non-empty".into()));
        }
        Ok(())
    }
}

impl Default for LossHyperParams {
    fn default() -> Self {
        Self {
            delta_v: 0.25,
            delta_d: 1.0,
            delta_r: 6.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            lambda: vec![1.0, 0.4, 0.16],
        }
    }
}
