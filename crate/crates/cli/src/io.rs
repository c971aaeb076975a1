//! On-disk formats: netpbm images and label maps, raw embedding dumps,
//! model files, and the line-oriented text tables.
//!
//! Every writer/reader pair round-trips bit-exactly: write, read, write
//! again produces identical bytes. Floating-point text fields use Rust's
//! shortest round-trip formatting, so parsed values are exact.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use panolab_core::clustering::BandwidthTable;
use panolab_core::fusion::{PanopticSegmentation, SegmentInfo};
use panolab_core::network::{ConvLayer, Network};
use panolab_core::{ClassDef, ClassKind, ClassTable, EmbeddingMap, Image, InstanceMap,
    SemanticMap};

/// Parses a netpbm header: magic, three decimal fields (width, height,
/// maxval) separated by whitespace with optional `#` comments, then one
/// Writes a file, creating missing parent directories first.
fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// whitespace byte before the payload.
fn parse_netpbm(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        bail!("not a {} file", String::from_utf8_lossy(magic));
    }
    let mut fields = [0usize; 3];
    let mut field = 0;
    let mut pos = 2;
    while field < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            bail!("malformed netpbm header");
        }
        fields[field] = std::str::from_utf8(&bytes[start..pos])?.parse()?;
        field += 1;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        bail!("malformed netpbm header");
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

/// Writes an image as binary 8-bit PPM (P6).
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.reserve(image.pixels.len());
    for &v in &image.pixels {
        bytes.push((v * 255.0).round() as u8);
    }
    write_file(path, bytes)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h, maxval, payload) = parse_netpbm(&bytes, b"P6")?;
    if maxval != 255 {
        bail!("{}: only 8-bit PPM is supported, maxval {maxval}", path.display());
    }
    let data = &bytes[payload..];
    if data.len() != 3 * w * h {
        bail!("{}: expected {} payload bytes, found {}", path.display(), 3 * w * h, data.len());
    }
    let pixels = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image::new(h, w, pixels)?)
}

/// Writes a label plane as binary 16-bit PGM (P5), most significant byte
/// first. The value 65535 is the IGNORE sentinel.
pub fn write_pgm16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    if values.len() != height * width {
        bail!("label plane of {} values does not cover {height}x{width}", values.len());
    }
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    bytes.reserve(values.len() * 2);
    for &v in values {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_file(path, bytes)
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h, maxval, payload) = parse_netpbm(&bytes, b"P5")?;
    if maxval != 65535 {
        bail!("{}: only 16-bit PGM is supported, maxval {maxval}", path.display());
    }
    let data = &bytes[payload..];
    if data.len() != 2 * w * h {
        bail!("{}: expected {} payload bytes, found {}", path.display(), 2 * w * h, data.len());
    }
    let values = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((h, w, values))
}

pub fn write_semantic(path: &Path, map: &SemanticMap) -> Result<()> {
    write_pgm16(path, map.height, map.width, &map.labels)
}

pub fn read_semantic(path: &Path) -> Result<SemanticMap> {
    let (h, w, labels) = read_pgm16(path)?;
    Ok(SemanticMap::new(h, w, labels)?)
}

pub fn write_instances(path: &Path, map: &InstanceMap) -> Result<()> {
    write_pgm16(path, map.height, map.width, &map.ids)
}

pub fn read_instances(path: &Path) -> Result<InstanceMap> {
    let (h, w, ids) = read_pgm16(path)?;
    Ok(InstanceMap::new(h, w, ids)?)
}

/// Writes the per-pixel segment ids of a panoptic segmentation; the segment
/// table goes to a separate text file via [`write_segments`].
pub fn write_segment_map(path: &Path, seg: &PanopticSegmentation) -> Result<()> {
    let mut values = Vec::with_capacity(seg.segment_map.len());
    for &id in &seg.segment_map {
        if id >= 65535 {
            bail!("segment id {id} does not fit the 16-bit map format");
        }
        values.push(id as u16);
    }
    write_pgm16(path, seg.height, seg.width, &values)
}

/// Text table, one `id class_index area` record per line.
pub fn write_segments(path: &Path, segments: &[SegmentInfo]) -> Result<()> {
    let mut text = String::new();
    for s in segments {
        text.push_str(&format!("{} {} {}\n", s.id, s.class_index, s.area));
    }
    write_file(path, text)
}

pub fn read_segments(path: &Path) -> Result<Vec<SegmentInfo>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut segments = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let (Some(id), Some(class), Some(area), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            bail!("{}:{}: expected `id class_index area`", path.display(), ln + 1);
        };
        segments.push(SegmentInfo {
            id: id.parse().with_context(|| format!("{}:{}", path.display(), ln + 1))?,
            class_index: class.parse().with_context(|| format!("{}:{}", path.display(), ln + 1))?,
            area: area.parse().with_context(|| format!("{}:{}", path.display(), ln + 1))?,
        });
    }
    Ok(segments)
}

/// Reads a segment map and its table back into a panoptic segmentation.
pub fn read_panoptic(map_path: &Path, table_path: &Path) -> Result<PanopticSegmentation> {
    let (h, w, values) = read_pgm16(map_path)?;
    let segments = read_segments(table_path)?;
    let map = values.into_iter().map(u32::from).collect();
    Ok(PanopticSegmentation::new(h, w, map, segments)?)
}

/// Raw embedding dump: little-endian f32, row-major, channel-last, with a
/// text sidecar at `<path>.hdr` declaring the geometry.
pub fn write_embedding(path: &Path, map: &EmbeddingMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.values.len() * 4);
    for &v in &map.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, bytes)?;
    let header = format!(
        "height {}\nwidth {}\nchannels {}\nlayout channel-last\ndtype f32-le\n",
        map.height, map.width, map.dim
    );
    let hdr = sidecar(path);
    write_file(&hdr, header)
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".hdr");
    path.with_file_name(name)
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingMap> {
    let hdr = sidecar(path);
    let text = fs::read_to_string(&hdr).with_context(|| format!("reading {}", hdr.display()))?;
    let mut height = None;
    let mut width = None;
    let mut channels = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("height"), Some(v)) => height = Some(v.parse::<usize>()?),
            (Some("width"), Some(v)) => width = Some(v.parse::<usize>()?),
            (Some("channels"), Some(v)) => channels = Some(v.parse::<usize>()?),
            (Some("layout"), Some("channel-last")) | (Some("dtype"), Some("f32-le")) => {}
            (Some(k), _) => bail!("{}: unsupported header field {k}", hdr.display()),
            (None, _) => {}
        }
    }
    let (Some(h), Some(w), Some(d)) = (height, width, channels) else {
        bail!("{}: header must declare height, width and channels", hdr.display());
    };
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != h * w * d * 4 {
        bail!("{}: expected {} bytes for {h}x{w}x{d}, found {}", path.display(), h * w * d * 4,
            bytes.len());
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(EmbeddingMap::new(h, w, d, values)?)
}

const MODEL_MAGIC: &[u8; 4] = b"PNET";
const MODEL_VERSION: u16 = 1;

/// Binary model format: magic `PNET`, u16 version, u32 layer count, then per
/// layer a header (u32 in, out, kernel height, kernel width; u8 relu flag)
/// followed by f32 little-endian weights and bias.
pub fn write_model(path: &Path, net: &Network) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        bytes.extend_from_slice(&(layer.in_channels as u32).to_le_bytes());
        bytes.extend_from_slice(&(layer.out_channels as u32).to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.push(u8::from(layer.relu));
        for &v in layer.weights.iter().chain(&layer.bias) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, bytes)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        bail!("{}: truncated model file", path.display());
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn take_f32s(bytes: &[u8], pos: &mut usize, n: usize, path: &Path) -> Result<Vec<f64>> {
    Ok(take(bytes, pos, n * 4, path)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn read_model(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let pos = &mut 0usize;
    if take(&bytes, pos, 4, path)? != MODEL_MAGIC {
        bail!("{}: not a model file", path.display());
    }
    let version = u16::from_le_bytes(take(&bytes, pos, 2, path)?.try_into().unwrap());
    if version != MODEL_VERSION {
        bail!("{}: unsupported model version {version}", path.display());
    }
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(&bytes, pos, 4, path)?.try_into().unwrap()))
    };
    let n_layers = take_u32(pos)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let cin = take_u32(pos)? as usize;
        let cout = take_u32(pos)? as usize;
        let kh = take_u32(pos)?;
        let kw = take_u32(pos)?;
        if kh != 3 || kw != 3 {
            bail!("{}: only 3x3 kernels are supported, found {kh}x{kw}", path.display());
        }
        let relu = match take(&bytes, pos, 1, path)?[0] {
            0 => false,
            1 => true,
            v => bail!("{}: bad relu flag {v}", path.display()),
        };
        let weights = take_f32s(&bytes, pos, cin * cout * 9, path)?;
        let bias = take_f32s(&bytes, pos, cout, path)?;
        layers.push(ConvLayer::new(cin, cout, relu, weights, bias)?);
    }
    if *pos != bytes.len() {
        bail!("{}: {} trailing bytes after the last layer", path.display(), bytes.len() - *pos);
    }
    Ok(Network::from_layers(layers)?)
}

/// Class table, one `name kind` record per line; line order is label order.
pub fn write_classes(path: &Path, classes: &ClassTable) -> Result<()> {
    let mut text = String::new();
    for (_, def) in classes.iter() {
        text.push_str(&format!("{} {}\n", def.name, def.kind));
    }
    write_file(path, text)
}

pub fn read_classes(path: &Path) -> Result<ClassTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut defs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
            bail!("{}:{}: expected `name kind`", path.display(), ln + 1);
        };
        let kind = kind
            .parse::<ClassKind>()
            .with_context(|| format!("{}:{}", path.display(), ln + 1))?;
        defs.push(ClassDef { name: name.to_string(), kind });
    }
    Ok(ClassTable::new(defs)?)
}

/// Bandwidth table, one `class_name value` record per line.
pub fn write_bandwidths(path: &Path, table: &BandwidthTable) -> Result<()> {
    let mut text = String::new();
    for (name, value) in table.iter() {
        text.push_str(&format!("{name} {value}\n"));
    }
    write_file(path, text)
}

pub fn read_bandwidths(path: &Path) -> Result<BandwidthTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table = BandwidthTable::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            bail!("{}:{}: expected `class_name value`", path.display(), ln + 1);
        };
        let value: f64 =
            value.parse().with_context(|| format!("{}:{}", path.display(), ln + 1))?;
        table.set(name, value)?;
    }
    Ok(table)
}

/// Writes `key value` lines; the machine-readable half of every report.
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(&format!("{k} {v}\n"));
    }
    write_file(path, text)
}
