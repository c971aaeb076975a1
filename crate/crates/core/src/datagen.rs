//! Deterministic synthetic scenes with ground-truth semantic and instance
//! maps, plus a synthetic embedding generator for clustering benchmarks.
//!
//! A scene is a horizon split into two stuff classes with a number of
//! colored things (discs or rectangles) painted on top. Painting follows
//! the painter's algorithm: later shapes occlude earlier ones, and an
//! instance whose pixels are all painted over is dropped from the map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{
    ClassKind, ClassTable, EmbeddingMap, Image, InstanceMap, SemanticMap, IGNORE_LABEL,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThingShape {
    Disc,
    Rectangle,
}

/// How to draw the instances of one thing class.
#[derive(Debug, Clone, PartialEq)]
pub struct ThingRecipe {
    pub class: String,
    pub shape: ThingShape,
    /// Inclusive range for the number of instances.
    pub count: (usize, usize),
    /// Inclusive range for the shape extent in pixels. Rectangles draw
    /// height and width independently; discs use one draw as diameter.
    pub size: (usize, usize),
    pub color: [f64; 3],
    /// Per-instance uniform brightness shift, drawn from `[-j, j]` and
    /// applied to all three channels. 0 keeps instances appearance-identical.
    pub color_jitter: f64,
}

/// Half-open pixel ranges restricting where things may be placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacementRegion {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub sky_class: String,
    pub sky_color: [f64; 3],
    pub ground_class: String,
    pub ground_color: [f64; 3],
    /// Inclusive range for the horizon row; sky covers rows above it.
    pub horizon: (usize, usize),
    pub things: Vec<ThingRecipe>,
    /// Placement restriction for every thing; whole canvas when absent.
    pub placement: Option<PlacementRegion>,
}

/// An image with its ground-truth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
}

impl Scene {
    /// Mutual-consistency invariant: a pixel carries a nonzero instance id
    /// exactly when its semantic class is a thing class.
    pub fn validate(&self, classes: &ClassTable) -> Result<()> {
        let (h, w) = (self.image.height, self.image.width);
        if self.semantic.height != h
            || self.semantic.width != w
            || self.instances.height != h
            || self.instances.width != w
        {
            return Err(Error::Dimension("scene maps disagree on size".into()));
        }
        self.semantic.validate_against(classes)?;
        for (px, (&label, &id)) in self.semantic.labels.iter().zip(&self.instances.ids).enumerate()
        {
            let is_thing = label != IGNORE_LABEL && classes.is_thing(label);
            if is_thing != (id != 0) {
                return Err(Error::Consistency(format!(
                    "pixel {px}: class {label} and instance id {id} disagree"
                )));
            }
        }
        Ok(())
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn check_color(color: [f64; 3], what: &str) -> Result<()> {
    if color.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} color must lie in [0, 1]")))
    }
}

fn resolve_stuff(classes: &ClassTable, name: &str) -> Result<u16> {
    match classes.index_of(name) {
        Some(i) if classes.kind(i) == Some(ClassKind::Stuff) => Ok(i),
        Some(_) => Err(Error::Config(format!("class {name} must be a stuff class"))),
        None => Err(Error::Config(format!("class {name} is not in the table"))),
    }
}

fn resolve_thing(classes: &ClassTable, name: &str) -> Result<u16> {
    match classes.index_of(name) {
        Some(i) if classes.kind(i) == Some(ClassKind::Thing) => Ok(i),
        Some(_) => Err(Error::Config(format!("class {name} must be a thing class"))),
        None => Err(Error::Config(format!("class {name} is not in the table"))),
    }
}

fn validate_spec(spec: &SceneSpec, classes: &ClassTable) -> Result<(u16, u16, Vec<u16>)> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("scene dimensions must be positive".into()));
    }
    if spec.horizon.0 > spec.horizon.1 || spec.horizon.1 > spec.height {
        return Err(Error::Config(format!(
            "horizon range {:?} does not fit a height of {}",
            spec.horizon, spec.height
        )));
    }
    check_color(spec.sky_color, "sky")?;
    check_color(spec.ground_color, "ground")?;
    let sky = resolve_stuff(classes, &spec.sky_class)?;
    let ground = resolve_stuff(classes, &spec.ground_class)?;
    let mut thing_labels = Vec::with_capacity(spec.things.len());
    for recipe in &spec.things {
        thing_labels.push(resolve_thing(classes, &recipe.class)?);
        if recipe.count.0 > recipe.count.1 {
            return Err(Error::Config(format!("count range {:?} is reversed", recipe.count)));
        }
        if recipe.size.0 == 0 || recipe.size.0 > recipe.size.1 {
            return Err(Error::Config(format!("size range {:?} is invalid", recipe.size)));
        }
        check_color(recipe.color, &recipe.class)?;
        if !recipe.color_jitter.is_finite() || recipe.color_jitter < 0.0 {
            return Err(Error::Config("color jitter must be a nonnegative number".into()));
        }
    }
    if let Some(region) = &spec.placement {
        if region.rows.0 >= region.rows.1
            || region.cols.0 >= region.cols.1
            || region.rows.1 > spec.height
            || region.cols.1 > spec.width
        {
            return Err(Error::Config(format!(
                "placement region rows {:?} cols {:?} does not fit {}x{}",
                region.rows, region.cols, spec.height, spec.width
            )));
        }
    }
    Ok((sky, ground, thing_labels))
}

struct Painter {
    image: Image,
    semantic: SemanticMap,
    ids: InstanceMap,
}

impl Painter {
    fn paint_shape(
        &mut self,
        shape: ThingShape,
        r0: usize,
        c0: usize,
        sh: usize,
        sw: usize,
        color: [f64; 3],
        label: u16,
        id: u16,
    ) {
        // disc test uses the bounding-box center so the painted mask is
        // symmetric about its own row and column axes
        let cy = r0 as f64 + (sh as f64 - 1.0) / 2.0;
        let cx = c0 as f64 + (sw as f64 - 1.0) / 2.0;
        let rad_sq = (sh.min(sw) as f64).powi(2) / 4.0;
        for r in r0..r0 + sh {
            for c in c0..c0 + sw {
                if let ThingShape::Disc = shape {
                    let d = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    if d > rad_sq {
                        continue;
                    }
                }
                self.image.set_rgb(r, c, color);
                self.semantic.set_label(r, c, label);
                self.ids.set_id(r, c, id);
            }
        }
    }
}

/// Generates a scene deterministically from `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, classes: &ClassTable, seed: u64) -> Result<Scene> {
    let (sky, ground, thing_labels) = validate_spec(spec, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);

    let horizon = rng.gen_range(spec.horizon.0..=spec.horizon.1);
    let mut image = Image::filled(h, w, spec.ground_color)?;
    let mut semantic = SemanticMap::filled(h, w, ground)?;
    for r in 0..horizon {
        for c in 0..w {
            image.set_rgb(r, c, spec.sky_color);
            semantic.set_label(r, c, sky);
        }
    }
    let mut painter = Painter { image, semantic, ids: InstanceMap::zeros(h, w)? };

    let region = spec.placement.unwrap_or(PlacementRegion { rows: (0, h), cols: (0, w) });
    let mut next_id: u16 = 1;
    for (recipe, &label) in spec.things.iter().zip(&thing_labels) {
        let n = rng.gen_range(recipe.count.0..=recipe.count.1);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let size = rng.gen_range(recipe.size.0..=recipe.size.1);
                let (sh, sw) = match recipe.shape {
                    ThingShape::Disc => (size, size),
                    ThingShape::Rectangle => (size, rng.gen_range(recipe.size.0..=recipe.size.1)),
                };
                if region.rows.0 + sh > region.rows.1 || region.cols.0 + sw > region.cols.1 {
                    continue; // cannot fit at this size, redraw
                }
                let r0 = rng.gen_range(region.rows.0..=region.rows.1 - sh);
                let c0 = rng.gen_range(region.cols.0..=region.cols.1 - sw);
                let shift = if recipe.color_jitter > 0.0 {
                    rng.gen_range(-recipe.color_jitter..=recipe.color_jitter)
                } else {
                    0.0
                };
                let color = recipe.color.map(|v| (v + shift).clamp(0.0, 1.0));
                if next_id == IGNORE_LABEL {
                    return Err(Error::Generation("instance id space exhausted".into()));
                }
                painter.paint_shape(recipe.shape, r0, c0, sh, sw, color, label, next_id);
                next_id += 1;
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "no valid placement for a {} after {PLACEMENT_ATTEMPTS} attempts",
                    recipe.class
                )));
            }
        }
    }

    // fully occluded instances vanish here; survivors get dense ids
    let instances = painter.ids.canonicalize();
    Ok(Scene { image: painter.image, semantic: painter.semantic, instances })
}

/// Replaces the right half of a scene with the horizontal reflection of its
/// left half. Instances on the mirrored half receive fresh ids: the twins
/// are appearance-identical but distinct ground-truth instances.
pub fn mirror_scene(scene: &Scene) -> Result<Scene> {
    let (h, w) = (scene.image.height, scene.image.width);
    if w % 2 != 0 {
        return Err(Error::Dimension(format!("mirroring needs an even width, got {w}")));
    }
    let offset = u32::from(scene.instances.ids.iter().copied().max().unwrap_or(0));
    if offset * 2 >= u32::from(IGNORE_LABEL) {
        return Err(Error::Consistency("instance id space exhausted by mirroring".into()));
    }
    let mut image = scene.image.clone();
    let mut semantic = scene.semantic.clone();
    let mut ids = scene.instances.clone();
    for r in 0..h {
        for c in w / 2..w {
            let src = w - 1 - c;
            image.set_rgb(r, c, image.rgb(r, src));
            semantic.set_label(r, c, semantic.label(r, src));
            let id = ids.id(r, src);
            ids.set_id(r, c, if id == 0 { 0 } else { id + offset as u16 });
        }
    }
    Ok(Scene { image, semantic, instances: ids.canonicalize() })
}

/// A synthetic clustering workload: per-pixel embeddings drawn as tight
/// blobs around well-separated centers, with ground-truth maps.
#[derive(Debug, Clone)]
pub struct EmbeddingFixture {
    pub embedding: EmbeddingMap,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
}

/// Builds an embedding map of `instance_count` blobs for benchmarks.
///
/// Centers sit on a jittered lattice with pairwise distance at least
/// `4 * bandwidth`; each pixel lands within `bandwidth / 4` of its center,
/// so clusters are unambiguous at the given bandwidth. Pixels are assigned
/// to instances in contiguous row bands. The semantic map is constant
/// `class_index`.
pub fn synthetic_embedding_map(
    height: usize,
    width: usize,
    dim: usize,
    instance_count: usize,
    class_index: u16,
    bandwidth: f64,
    seed: u64,
) -> Result<EmbeddingFixture> {
    if height == 0 || width == 0 || dim == 0 {
        return Err(Error::Config("embedding fixture dimensions must be positive".into()));
    }
    if instance_count == 0 || instance_count > height || instance_count >= usize::from(IGNORE_LABEL)
    {
        return Err(Error::Config(format!(
            "instance count {instance_count} must lie in 1..={height} (one row band each)"
        )));
    }
    if !bandwidth.is_finite() || bandwidth <= 0.0 {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // lattice side count: smallest m with m^dim >= instance_count
    // (capping the exponent only ever makes m larger, which stays valid)
    let mut m = 1usize;
    while (m as u128).pow(dim.min(32) as u32) < instance_count as u128 {
        m += 1;
    }
    let step = 5.0 * bandwidth;
    let wobble = 0.4 * bandwidth;
    let mut centers = Vec::with_capacity(instance_count);
    for k in 0..instance_count {
        let mut center = Vec::with_capacity(dim);
        let mut rest = k;
        for _ in 0..dim {
            let digit = rest % m;
            rest /= m;
            center.push(digit as f64 * step + rng.gen_range(-wobble..=wobble));
        }
        centers.push(center);
    }

    let amp = bandwidth / (4.0 * (dim as f64).sqrt());
    let mut values = Vec::with_capacity(height * width * dim);
    let mut ids = Vec::with_capacity(height * width);
    for r in 0..height {
        // bands partition rows: band k covers [k*h/n, (k+1)*h/n)
        let band = (r * instance_count) / height;
        let center = &centers[band];
        for _ in 0..width {
            for &cv in center.iter() {
                values.push(cv + rng.gen_range(-amp..=amp));
            }
            ids.push((band + 1) as u16);
        }
    }
    Ok(EmbeddingFixture {
        embedding: EmbeddingMap::new(height, width, dim, values)?,
        semantic: SemanticMap::filled(height, width, class_index)?,
        instances: InstanceMap::new(height, width, ids)?,
    })
}
