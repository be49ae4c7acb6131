//! On-disk artifacts: RFR1 rasters, RFW1 dynamics weights, sequence
//! manifests, CSV tables and PGM previews. All writes are atomic
//! (temp file in the target directory, then rename).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rfusion_core::dynamics::DynamicsParams;
use rfusion_core::raster::{GridImage, Modality};

use crate::error::{runtime, validation, CliResult};

pub const RASTER_MAGIC: &[u8; 4] = b"RFR1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"RFW1";

/// Writes `bytes` to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| runtime(format!("cannot create temp file in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn modality_code(m: Modality) -> u8 {
    match m {
        Modality::Fine => 0,
        Modality::Coarse => 1,
        Modality::Latent => 2,
    }
}

fn modality_from_code(c: u8) -> CliResult<Modality> {
    match c {
        0 => Ok(Modality::Fine),
        1 => Ok(Modality::Coarse),
        2 => Ok(Modality::Latent),
        _ => Err(validation(format!("unknown modality code {c}"))),
    }
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(validation(format!("truncated file {}", self.path.display())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> CliResult<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> CliResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> CliResult<()> {
        if self.pos != self.buf.len() {
            return Err(validation(format!("trailing bytes in {}", self.path.display())));
        }
        Ok(())
    }
}

/// Serializes an image: magic, u32 width/height/bands, i32 date, u8 modality,
/// 3 pad bytes, then the planar band-major payload as little-endian f32.
pub fn write_raster(img: &GridImage, path: &Path) -> CliResult<()> {
    let mut bytes = Vec::with_capacity(20 + 4 * img.data.len());
    bytes.extend_from_slice(RASTER_MAGIC);
    for v in [img.width as u32, img.height as u32, img.bands as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&img.date.to_le_bytes());
    bytes.push(modality_code(img.modality));
    bytes.extend_from_slice(&[0u8; 3]);
    for &v in &img.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn read_raster(path: &Path) -> CliResult<GridImage> {
    let buf = fs::read(path).map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(4)? != RASTER_MAGIC {
        return Err(validation(format!("bad magic in {}", path.display())));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let bands = r.u32()? as usize;
    let date = r.i32()?;
    let modality = modality_from_code(r.take(1)?[0])?;
    r.take(3)?;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(bands))
        .ok_or_else(|| validation(format!("dimension overflow in {}", path.display())))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()? as f64);
    }
    r.done()?;
    GridImage::new(width, height, bands, data, date, modality).map_err(Into::into)
}

/// Serializes dynamics parameters: magic, u32 tensor count, per-tensor
/// records (u32 name length, name bytes, u32 rank, u32 dims, little-endian
/// f32 payload), then W₁ and W₂ as f32.
pub fn write_weights(params: &DynamicsParams, path: &Path) -> CliResult<()> {
    let tensors = params.tensors();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, values) in &tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes.extend_from_slice(&(params.w1 as f32).to_le_bytes());
    bytes.extend_from_slice(&(params.w2 as f32).to_le_bytes());
    atomic_write(path, &bytes)
}

pub fn read_weights(path: &Path) -> CliResult<DynamicsParams> {
    let buf = fs::read(path).map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(validation(format!("bad magic in {}", path.display())));
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| validation(format!("non-UTF8 tensor name in {}", path.display())))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f32()? as f64);
        }
        tensors.push((name, dims, values));
    }
    let w1 = r.f32()? as f64;
    let w2 = r.f32()? as f64;
    r.done()?;
    DynamicsParams::from_tensors(&tensors, w1, w2).map_err(Into::into)
}

fn modality_tag(m: Modality) -> &'static str {
    match m {
        Modality::Fine => "FINE",
        Modality::Coarse => "COARSE",
        Modality::Latent => "LATENT",
    }
}

fn modality_from_tag(s: &str) -> CliResult<Modality> {
    match s {
        "FINE" => Ok(Modality::Fine),
        "COARSE" => Ok(Modality::Coarse),
        "LATENT" => Ok(Modality::Latent),
        _ => Err(validation(format!("unknown modality tag {s:?}"))),
    }
}

/// One raster of a sequence; `path` is relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub modality: String,
    /// Days since the manifest epoch.
    pub date: i32,
}

impl ManifestEntry {
    pub fn modality(&self) -> CliResult<Modality> {
        modality_from_tag(&self.modality)
    }
}

/// Date-ordered list of rasters with a calendar anchor for the day counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    /// `YYYY-MM-DD` calendar date of day 0.
    pub epoch: String,
    pub entries: Vec<ManifestEntry>,
}

pub const DEFAULT_EPOCH: &str = "2000-01-01";

impl SequenceManifest {
    pub fn new(entries: Vec<(String, Modality, i32)>) -> Self {
        SequenceManifest {
            epoch: DEFAULT_EPOCH.to_string(),
            entries: entries
                .into_iter()
                .map(|(path, m, date)| ManifestEntry {
                    path,
                    modality: modality_tag(m).to_string(),
                    date,
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: SequenceManifest = serde_json::from_str(&text)
            .map_err(|e| validation(format!("malformed manifest {}: {e}", path.display())))?;
        chrono::NaiveDate::parse_from_str(&m.epoch, "%Y-%m-%d")
            .map_err(|_| validation(format!("manifest epoch {:?} is not YYYY-MM-DD", m.epoch)))?;
        for e in &m.entries {
            e.modality()?;
        }
        if m.entries.windows(2).any(|w| w[1].date <= w[0].date) {
            return Err(validation("manifest dates must be strictly increasing"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| runtime(format!("manifest serialization: {e}")))?;
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }
}

/// Scale record accompanying each PGM preview.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub source: String,
    pub band: usize,
    pub min: f64,
    pub max: f64,
    pub maxval: u16,
}

/// Exports one band as a 16-bit binary PGM (min-max scaled, big-endian
/// samples per the PGM spec) plus a JSON sidecar recording the scale.
pub fn export_pgm(img: &GridImage, band: usize, source: &str, path: &Path) -> CliResult<()> {
    if band >= img.bands {
        return Err(validation(format!("band {band} out of range (image has {})", img.bands)));
    }
    let n = img.n_pixels();
    let plane = &img.data[band * n..(band + 1) * n];
    let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(runtime("non-finite values in PGM export"));
    }
    let maxval: u16 = 65535;
    let span = max - min;
    let mut bytes = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    for &v in plane {
        let scaled = if span > 0.0 { (v - min) / span } else { 0.0 };
        let q = (scaled * maxval as f64).round().clamp(0.0, maxval as f64) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    atomic_write(path, &bytes)?;
    let sidecar = PgmSidecar { source: source.to_string(), band, min, max, maxval };
    let mut text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| runtime(format!("sidecar serialization: {e}")))?;
    text.push('\n');
    atomic_write(&path.with_extension("pgm.json"), text.as_bytes())
}
