//! TOML scene configuration: the class table plus a scene recipe.
//!
//! ```toml
//! height = 64
//! width = 64
//! horizon = [20, 44]
//!
//! [[classes]]          # table order is label order
//! name = "sky"
//! kind = "stuff"
//!
//! [sky]
//! class = "sky"
//! color = [0.35, 0.55, 0.90]
//!
//! [ground]
//! class = "ground"
//! color = [0.30, 0.45, 0.25]
//!
//! [[things]]
//! class = "disc"
//! shape = "disc"       # or "rectangle"
//! count = [1, 3]
//! size = [8, 14]
//! color = [0.85, 0.15, 0.15]
//! jitter = 0.0         # optional
//!
//! [placement]          # optional half-open pixel ranges
//! rows = [4, 60]
//! cols = [4, 28]
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use panolab_core::datagen::{PlacementRegion, SceneSpec, ThingRecipe, ThingShape};
use panolab_core::{ClassDef, ClassTable};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSpec {
    height: usize,
    width: usize,
    horizon: [usize; 2],
    classes: Vec<FileClass>,
    sky: FileStuff,
    ground: FileStuff,
    #[serde(default)]
    things: Vec<FileThing>,
    placement: Option<FileRegion>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileClass {
    name: String,
    kind: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileStuff {
    class: String,
    color: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileThing {
    class: String,
    shape: String,
    count: [usize; 2],
    size: [usize; 2],
    color: [f64; 3],
    #[serde(default)]
    jitter: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRegion {
    rows: [usize; 2],
    cols: [usize; 2],
}

/// Loads a scene spec and its class table from a TOML file.
pub fn load_scene_spec(path: &Path) -> Result<(ClassTable, SceneSpec)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: FileSpec =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;

    let mut defs = Vec::with_capacity(file.classes.len());
    for c in &file.classes {
        let kind = c
            .kind
            .parse()
            .with_context(|| format!("{}: class {}", path.display(), c.name))?;
        defs.push(ClassDef { name: c.name.clone(), kind });
    }
    let classes = ClassTable::new(defs)?;

    let mut things = Vec::with_capacity(file.things.len());
    for t in &file.things {
        let shape = match t.shape.as_str() {
            "disc" => ThingShape::Disc,
            "rectangle" => ThingShape::Rectangle,
            other => bail!("{}: unknown shape {other:?}", path.display()),
        };
        things.push(ThingRecipe {
            class: t.class.clone(),
            shape,
            count: (t.count[0], t.count[1]),
            size: (t.size[0], t.size[1]),
            color: t.color,
            color_jitter: t.jitter,
        });
    }
    let spec = SceneSpec {
        height: file.height,
        width: file.width,
        sky_class: file.sky.class.clone(),
        sky_color: file.sky.color,
        ground_class: file.ground.class.clone(),
        ground_color: file.ground.color,
        horizon: (file.horizon[0], file.horizon[1]),
        things,
        placement: file
            .placement
            .map(|r| PlacementRegion { rows: (r.rows[0], r.rows[1]), cols: (r.cols[0], r.cols[1]) }),
    };
    Ok((classes, spec))
}
