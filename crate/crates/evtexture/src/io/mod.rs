//! On-disk formats: the EVT1 binary event format and its CSV alternative,
//! the voxel dense-array container with JSON sidecar, the single-file model
//! checkpoint, and 8-bit PNG frame I/O.
//!
//! Every format has a pure `parse_*`/`encode_*` pair over byte buffers
//! (exercised directly by the fuzz targets) plus path-based wrappers.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{EvError, Result};
use crate::events::{Event, EventStream, VoxelGrid};
use crate::imageops::{FrameSequence, Image};
use crate::network::NetworkConfig;
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Scalar;

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const EVT1_HEADER: usize = 16;
const EVT1_RECORD: usize = 13; // u16 x, u16 y, f64 t, i8 p

fn fmt_err(format: &'static str, reason: impl Into<String>) -> EvError {
    EvError::Format { format, reason: reason.into() }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| EvError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| EvError::io(path, e))
}

// ---------------------------------------------------------------- EVT1

/// Serialize an event stream to the EVT1 binary layout: a 16-byte header
/// (magic, u16 W, u16 H, u32 count, 4 reserved bytes) followed by packed
/// little-endian records (u16 x, u16 y, f64 t, i8 p).
pub fn encode_evt1(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVT1_HEADER + stream.len() * EVT1_RECORD);
    out.extend_from_slice(EVT1_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

/// Parse EVT1 bytes. The header does not carry the stream's time span, so
/// the span is reconstructed from the first/last event timestamps (an empty
/// stream spans `[0, 0]`).
pub fn parse_evt1(bytes: &[u8]) -> Result<EventStream> {
    const F: &str = "EVT1";
    if bytes.len() < EVT1_HEADER {
        return Err(fmt_err(F, "truncated header"));
    }
    if &bytes[0..4] != EVT1_MAGIC {
        return Err(fmt_err(F, "bad magic"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if width == 0 || height == 0 {
        return Err(fmt_err(F, "zero sensor dimensions"));
    }
    let expected = EVT1_HEADER + count * EVT1_RECORD;
    if bytes.len() != expected {
        return Err(fmt_err(
            F,
            format!("expected {expected} bytes for {count} records, got {}", bytes.len()),
        ));
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let at = EVT1_HEADER + i * EVT1_RECORD;
        let r = &bytes[at..at + EVT1_RECORD];
        let t = f64::from_le_bytes(r[4..12].try_into().unwrap());
        if !t.is_finite() {
            return Err(fmt_err(F, "non-finite timestamp"));
        }
        events.push(Event {
            x: u16::from_le_bytes([r[0], r[1]]),
            y: u16::from_le_bytes([r[2], r[3]]),
            t,
            p: r[12] as i8,
        });
    }
    let (t0, t1) = match (events.first(), events.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (0.0, 0.0),
    };
    EventStream::new(events, width, height, t0, t1)
        .map_err(|e| fmt_err(F, e.to_string()))
}

pub fn write_evt1(path: &Path, stream: &EventStream) -> Result<()> {
    write_file(path, &encode_evt1(stream))
}

pub fn read_evt1(path: &Path) -> Result<EventStream> {
    parse_evt1(&read_file(path)?)
}

// ---------------------------------------------------------------- CSV

/// Serialize events as `x,y,t,p` lines under a header row.
pub fn encode_events_csv(stream: &EventStream) -> String {
    let mut out = String::from("x,y,t,p\n");
    for e in &stream.events {
        out.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.t, e.p));
    }
    out
}

/// Parse the CSV alternative. The text carries no sensor dimensions, so
/// they are supplied by the caller; the time span comes from the events.
pub fn parse_events_csv(text: &str, width: u16, height: u16) -> Result<EventStream> {
    const F: &str = "events CSV";
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt_err(F, "empty input"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["x", "y", "t", "p"] {
        return Err(fmt_err(F, format!("unexpected header row: {header:?}")));
    }
    let mut events = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(fmt_err(F, format!("line {}: expected 4 fields", ln + 2)));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| fmt_err(F, format!("line {}: bad {what} {s:?}", ln + 2)))
        };
        let x: u16 = fields[0]
            .parse()
            .map_err(|_| fmt_err(F, format!("line {}: bad x {:?}", ln + 2, fields[0])))?;
        let y: u16 = fields[1]
            .parse()
            .map_err(|_| fmt_err(F, format!("line {}: bad y {:?}", ln + 2, fields[1])))?;
        let t = parse(fields[2], "timestamp")?;
        if !t.is_finite() {
            return Err(fmt_err(F, format!("line {}: non-finite timestamp", ln + 2)));
        }
        let p: i8 = fields[3]
            .parse()
            .map_err(|_| fmt_err(F, format!("line {}: bad polarity {:?}", ln + 2, fields[3])))?;
        events.push(Event { x, y, t, p });
    }
    let (t0, t1) = match (events.first(), events.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (0.0, 0.0),
    };
    EventStream::new(events, width, height, t0, t1).map_err(|e| fmt_err(F, e.to_string()))
}

pub fn write_events_csv(path: &Path, stream: &EventStream) -> Result<()> {
    write_file(path, encode_events_csv(stream).as_bytes())
}

pub fn read_events_csv(path: &Path, width: u16, height: u16) -> Result<EventStream> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| fmt_err("events CSV", "not valid UTF-8"))?;
    parse_events_csv(text, width, height)
}

// ---------------------------------------------------------------- voxel container

/// JSON sidecar accompanying a serialized voxel grid.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct VoxelSidecar {
    #[serde(rename = "B")]
    pub b: usize,
    pub normalized: bool,
    pub eta: Option<f64>,
}

/// Encode a `(B,H,W)` float32 grid as NPY v1.0 (a portable dense-array
/// container readable by any numerics stack).
pub fn encode_voxel_array(bins: &Array3<f64>) -> Vec<u8> {
    let (b, h, w) = bins.dim();
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({b}, {h}, {w}), }}");
    // pad the header (dict + newline) so the data section is 64-byte aligned
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let mut out = Vec::with_capacity(unpadded + pad + bins.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&((dict.len() + pad + 1) as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    for v in bins.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parse the NPY container back into a `(B,H,W)` array.
pub fn parse_voxel_array(bytes: &[u8]) -> Result<Array3<f64>> {
    const F: &str = "voxel container";
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err(fmt_err(F, "bad magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(fmt_err(F, format!("unsupported version {}.{}", bytes[6], bytes[7])));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(fmt_err(F, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| fmt_err(F, "header not UTF-8"))?;
    if !header.contains("'descr': '<f4'") {
        return Err(fmt_err(F, "expected little-endian float32 data"));
    }
    if !header.contains("'fortran_order': False") {
        return Err(fmt_err(F, "expected C-order data"));
    }
    let shape_start =
        header.find('(').ok_or_else(|| fmt_err(F, "missing shape tuple"))? + 1;
    let shape_end = header[shape_start..]
        .find(')')
        .ok_or_else(|| fmt_err(F, "unterminated shape tuple"))?
        + shape_start;
    let dims: Vec<usize> = header[shape_start..shape_end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| fmt_err(F, format!("bad dimension {s:?}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(fmt_err(F, format!("expected 3 dimensions, got {}", dims.len())));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt_err(F, "shape overflow"))?;
    let data = &bytes[10 + hlen..];
    if data.len() != n * 4 {
        return Err(fmt_err(F, format!("expected {} data bytes, got {}", n * 4, data.len())));
    }
    let mut values = Vec::with_capacity(n);
    for chunk in data.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| fmt_err(F, e.to_string()))
}

/// Write the grid as `<path>` (NPY) with a `<path>.json` sidecar.
pub fn write_voxel(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_file(path, &encode_voxel_array(&grid.bins))?;
    let sidecar = VoxelSidecar { b: grid.num_bins(), normalized: grid.normalized, eta: grid.eta };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_file(&sidecar_path(path), json.as_bytes())
}

pub fn read_voxel(path: &Path) -> Result<VoxelGrid> {
    let bins = parse_voxel_array(&read_file(path)?)?;
    let sc_path = sidecar_path(path);
    let sidecar: VoxelSidecar = serde_json::from_slice(&read_file(&sc_path)?)
        .map_err(|e| fmt_err("voxel sidecar", e.to_string()))?;
    if sidecar.b != bins.dim().0 {
        return Err(fmt_err(
            "voxel sidecar",
            format!("sidecar B={} disagrees with array B={}", sidecar.b, bins.dim().0),
        ));
    }
    Ok(VoxelGrid { bins, normalized: sidecar.normalized, eta: sidecar.eta })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

// ---------------------------------------------------------------- checkpoint

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: NetworkConfig,
    params: Vec<ParamRecord>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    group: String,
}

/// Parameters and config recovered from a checkpoint, independent of the
/// scalar type they will be loaded into.
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Single-file archive: magic, u32 version, u32 manifest length, JSON
/// manifest (config + parameter table), then raw float32 blobs in manifest
/// order.
pub fn encode_checkpoint<S: Scalar>(config: &NetworkConfig, store: &ParamStore<S>) -> Vec<u8> {
    let params: Vec<ParamRecord> = store
        .ids()
        .map(|id| ParamRecord {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
            group: match store.group(id) {
                ParamGroup::Main => "main".to_string(),
                ParamGroup::Flow => "flow".to_string(),
            },
        })
        .collect();
    let manifest = CheckpointManifest { version: CHECKPOINT_VERSION, config: config.clone(), params };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.value(id).iter() {
            out.extend_from_slice(&(Scalar::to_f64(*v) as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    const F: &str = "checkpoint";
    if bytes.len() < 12 {
        return Err(fmt_err(F, "truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err(F, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(F, format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(fmt_err(F, "truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| fmt_err(F, e.to_string()))?;
    let mut at = 12 + mlen;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for rec in &manifest.params {
        let n = rec
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fmt_err(F, "shape overflow"))?;
        let end = n
            .checked_mul(4)
            .and_then(|b| at.checked_add(b))
            .ok_or_else(|| fmt_err(F, "blob offset overflow"))?;
        if bytes.len() < end {
            return Err(fmt_err(F, format!("truncated blob for {}", rec.name)));
        }
        let mut values = Vec::with_capacity(n);
        for chunk in bytes[at..end].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((rec.name.clone(), rec.shape.clone(), values));
        at = end;
    }
    if at != bytes.len() {
        return Err(fmt_err(F, "trailing bytes after parameter blobs"));
    }
    Ok(Checkpoint { config: manifest.config, tensors })
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    config: &NetworkConfig,
    store: &ParamStore<S>,
) -> Result<()> {
    write_file(path, &encode_checkpoint(config, store))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&read_file(path)?)
}

/// Overwrite a parameter store's values from a parsed checkpoint; every
/// store parameter must be present with a matching shape.
pub fn load_into_store<S: Scalar>(ckpt: &Checkpoint, store: &mut ParamStore<S>) -> Result<()> {
    for (name, shape, values) in &ckpt.tensors {
        let id = store.by_name(name).ok_or_else(|| {
            fmt_err("checkpoint", format!("parameter {name} not present in model"))
        })?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(fmt_err(
                "checkpoint",
                format!("shape mismatch for {name}: {:?} vs {shape:?}", store.value(id).shape()),
            ));
        }
        let arr = ArrayD::from_shape_vec(
            IxDyn(shape),
            values.iter().map(|&v| S::from_f64(v as f64)).collect(),
        )
        .map_err(|e| fmt_err("checkpoint", e.to_string()))?;
        *store.value_mut(id) = arr;
    }
    let missing: Vec<_> = store
        .ids()
        .map(|id| store.name(id).to_string())
        .filter(|n| !ckpt.tensors.iter().any(|(cn, _, _)| cn == n))
        .collect();
    if !missing.is_empty() {
        return Err(fmt_err(
            "checkpoint",
            format!("missing parameters: {}", missing.join(", ")),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- PNG frames

/// Save a `(3,H,W)` image clipped to `[0,1]` and quantized to 8-bit RGB.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(EvError::invalid("PNG export expects RGB frames"));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ci: usize| (img[[ci, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)
        .map_err(|e| EvError::io(path, std::io::Error::other(e)))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| EvError::io(path, std::io::Error::other(e)))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ci in 0..3 {
                out[[ci, y, x]] = px.0[ci] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Load all `.png` files in a directory, sorted lexicographically (the
/// convention is ascending time), as one sequence.
pub fn load_frame_dir(dir: &Path, fps: f64) -> Result<FrameSequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| EvError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvError::invalid(format!("no PNG frames in {}", dir.display())));
    }
    let frames = paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, fps)
}

/// Save a sequence as `%06d.png` under `dir`, creating it if needed.
pub fn save_frame_dir(dir: &Path, frames: &FrameSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EvError::io(dir, e))?;
    for (i, f) in frames.frames.iter().enumerate() {
        save_png(&dir.join(format!("{i:06}.png")), f)?;
    }
    Ok(())
}

/// Append a CSV line, creating the file with `header` when absent.
pub fn append_csv_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| EvError::io(path, e))?;
    if !exists {
        writeln!(f, "{header}").map_err(|e| EvError::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| EvError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::nn::ParamStore;
    use ndarray::Array3;
    use rand::RngExt;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_stream() -> EventStream {
        let events = vec![
            Event { x: 1, y: 2, t: 0.125, p: 1 },
            Event { x: 3, y: 0, t: 0.25, p: -1 },
            Event { x: 0, y: 1, t: 0.75, p: 1 },
        ];
        EventStream::new(events, 4, 3, 0.125, 0.75).unwrap()
    }

    #[test]
    fn evt1_round_trip() {
        let s = sample_stream();
        let bytes = encode_evt1(&s);
        assert_eq!(&bytes[0..4], b"EVT1");
        assert_eq!(bytes.len(), 16 + 3 * 13);
        let back = parse_evt1(&bytes).unwrap();
        assert_eq!(back.events, s.events);
        assert_eq!((back.width, back.height), (4, 3));
    }

    #[test]
    fn evt1_rejects_malformed() {
        assert!(parse_evt1(b"EVT").is_err());
        assert!(parse_evt1(b"NOPE000000000000").is_err());
        let mut bytes = encode_evt1(&sample_stream());
        bytes.truncate(bytes.len() - 1);
        assert!(parse_evt1(&bytes).is_err());
        // corrupt a polarity byte
        let mut bytes = encode_evt1(&sample_stream());
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(parse_evt1(&bytes).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let s = sample_stream();
        let text = encode_events_csv(&s);
        assert!(text.starts_with("x,y,t,p\n"));
        let back = parse_events_csv(&text, 4, 3).unwrap();
        assert_eq!(back.events, s.events);
        assert!(parse_events_csv("", 4, 3).is_err());
        assert!(parse_events_csv("a,b,c\n", 4, 3).is_err());
        assert!(parse_events_csv("x,y,t,p\n1,2\n", 4, 3).is_err());
        assert!(parse_events_csv("x,y,t,p\n1,2,nan,1\n", 4, 3).is_err());
        assert!(parse_events_csv("x,y,t,p\n9,0,0.5,1\n", 4, 3).is_err());
    }

    #[test]
    fn voxel_container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bins = Array3::from_shape_fn((5, 6, 7), |_| {
            // keep values exactly representable in f32
            (rng.random_range(-100i32..100) as f64) / 8.0
        });
        let grid = VoxelGrid { bins: bins.clone(), normalized: true, eta: Some(2.5) };
        let dir = std::env::temp_dir().join(format!("evtx_vox_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.npy");
        write_voxel(&path, &grid).unwrap();
        let back = read_voxel(&path).unwrap();
        assert_eq!(back.bins, bins);
        assert!(back.normalized);
        assert_eq!(back.eta, Some(2.5));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn voxel_container_rejects_malformed() {
        assert!(parse_voxel_array(b"junk").is_err());
        let good = encode_voxel_array(&Array3::zeros((2, 3, 4)));
        assert!(parse_voxel_array(&good[..good.len() - 3]).is_err());
        let mut bad = good.clone();
        bad[6] = 9; // unsupported format version
        assert!(parse_voxel_array(&bad).is_err());
        assert!(parse_voxel_array(&good).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = NetworkConfig { channels: 8, flow_levels: 1, gru_layers: 1, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let model = crate::network::EvTextureModel::build(&mut store, &cfg, 3).unwrap();
        let _ = model;
        let bytes = encode_checkpoint(&cfg, &store);
        let ckpt = parse_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.config.channels, 8);
        assert_eq!(ckpt.tensors.len(), store.len());

        // load into a differently-initialized store of the same shape
        let mut store2 = ParamStore::<f32>::new();
        let _ = crate::network::EvTextureModel::build(&mut store2, &ckpt.config, 99).unwrap();
        load_into_store(&ckpt, &mut store2).unwrap();
        for id in store.ids() {
            let id2 = store2.by_name(store.name(id)).unwrap();
            assert_eq!(store.value(id), store2.value(id2), "{}", store.name(id));
        }
    }

    #[test]
    fn checkpoint_rejects_malformed() {
        assert!(parse_checkpoint(b"EVCK").is_err());
        assert!(parse_checkpoint(b"XXXX00000000").is_err());
        let cfg = NetworkConfig { channels: 8, flow_levels: 1, gru_layers: 1, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let _ = crate::network::EvTextureModel::build(&mut store, &cfg, 3).unwrap();
        let bytes = encode_checkpoint(&cfg, &store);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(parse_checkpoint(&extra).is_err());
    }

    #[test]
    fn png_round_trip_quantized() {
        let img = Array3::from_shape_fn((3, 5, 4), |(c, y, x)| {
            ((c * 37 + y * 11 + x * 3) % 256) as f64 / 255.0
        });
        let dir = std::env::temp_dir().join(format!("evtx_png_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        // values land exactly on the 8-bit grid, so the round trip is exact
        assert_eq!(back, img);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
