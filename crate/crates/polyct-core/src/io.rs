//! File formats: raw f32 arrays with JSON sidecars, neural-field checkpoints,
//! loss curves, run manifests, and windowed PNG export.
//!
//! Arrays are stored as little-endian f32, row-major with the slowest
//! dimension first, next to a sidecar named by appending `.json` to the data
//! file name. The sidecar records dtype, shape, units, and a free-form kind
//! tag so files remain self-describing without a custom container.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{HashEncoderConfig, NeuralFieldParams};
use crate::geometry::{make_geometry, FanBeamGeometry};
use crate::grid::{Grid2, MetalMask};
use crate::spectrum::Spectrum;
use crate::train::LossRecord;

/// Sidecar describing a raw array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub units: String,
    pub kind: String,
}

fn sidecar_path(data_path: &Path) -> PathBuf {
    let mut name = data_path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    data_path.with_file_name(name)
}

/// Write a row-major f64 slice as little-endian f32 plus its sidecar.
pub fn write_array(
    path: &Path,
    data: &[f64],
    shape: &[usize],
    units: &str,
    kind: &str,
) -> Result<()> {
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "array of {} values does not fill shape {:?}",
            data.len(),
            shape
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = ArraySidecar {
        dtype: "f32le".into(),
        shape: shape.to_vec(),
        units: units.into(),
        kind: kind.into(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Read an array file and its sidecar; f32 values widen losslessly to f64.
pub fn read_array(path: &Path) -> Result<(Vec<f64>, ArraySidecar)> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let sidecar: ArraySidecar = serde_json::from_str(&text)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype {:?}",
            path.display(),
            sidecar.dtype
        )));
    }
    let bytes = fs::read(path)?;
    let expected: usize = sidecar.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes but shape {:?} needs {}",
            path.display(),
            bytes.len(),
            sidecar.shape,
            expected * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((data, sidecar))
}

/// Write a single image with shape `[height, width]`.
pub fn write_grid(path: &Path, grid: &Grid2, units: &str, kind: &str) -> Result<()> {
    write_array(path, grid.data(), &[grid.height(), grid.width()], units, kind)
}

/// Read a rank-2 array back as a grid.
pub fn read_grid(path: &Path) -> Result<(Grid2, ArraySidecar)> {
    let (data, sidecar) = read_array(path)?;
    if sidecar.shape.len() != 2 {
        return Err(Error::Format(format!(
            "{}: expected a 2-d image, found shape {:?}",
            path.display(),
            sidecar.shape
        )));
    }
    let grid = Grid2::from_vec(sidecar.shape[0], sidecar.shape[1], data)?;
    Ok((grid, sidecar))
}

/// Write a metal mask as a 0/1 image.
pub fn write_mask(path: &Path, mask: &MetalMask) -> Result<()> {
    write_grid(path, &mask.to_grid(), "bool", "mask")
}

/// Read a mask written by [`write_mask`]; every value must be exactly 0 or 1.
pub fn read_mask(path: &Path) -> Result<MetalMask> {
    let (grid, _) = read_grid(path)?;
    let mut data = Vec::with_capacity(grid.data().len());
    for &v in grid.data() {
        if v == 0.0 {
            data.push(false);
        } else if v == 1.0 {
            data.push(true);
        } else {
            return Err(Error::Format(format!(
                "{}: mask value {} is neither 0 nor 1",
                path.display(),
                v
            )));
        }
    }
    MetalMask::from_vec(grid.height(), grid.width(), data)
}

/// Write geometry as pretty JSON.
pub fn write_geometry(path: &Path, geometry: &FanBeamGeometry) -> Result<()> {
    let mut text = serde_json::to_string_pretty(geometry)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Read and validate geometry JSON.
pub fn read_geometry(path: &Path) -> Result<FanBeamGeometry> {
    let text = fs::read_to_string(path)?;
    let geometry: FanBeamGeometry = serde_json::from_str(&text)?;
    make_geometry(geometry)
}

/// Write a spectrum as two-column CSV (energy keV, weight).
pub fn write_spectrum(path: &Path, spectrum: &Spectrum) -> Result<()> {
    fs::write(path, spectrum.to_csv())?;
    Ok(())
}

/// Read a spectrum CSV; weights renormalize on load.
pub fn read_spectrum(path: &Path) -> Result<Spectrum> {
    let text = fs::read_to_string(path)?;
    Spectrum::parse_csv(&text)
}

/// Checkpoint header stored next to the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: HashEncoderConfig,
    pub n_outputs: usize,
    pub hidden: usize,
    pub num_values: usize,
}

fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Save field parameters: `<base>.json` header plus `<base>.bin` holding all
/// values as little-endian f32 in the order hash table, first-layer weights,
/// first-layer biases, output weights, output biases.
pub fn save_checkpoint(base: &Path, params: &NeuralFieldParams) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(base);
    let buffers = [params.hash(), params.w1(), params.b1(), params.w2(), params.b2()];
    let num_values = buffers.iter().map(|b| b.len()).sum();
    let header = CheckpointHeader {
        kind: "neural-field-checkpoint".into(),
        config: params.config().clone(),
        n_outputs: params.n_outputs(),
        hidden: params.hidden(),
        num_values,
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(json_path, text)?;
    let mut bytes = Vec::with_capacity(num_values * 4);
    for buffer in buffers {
        for &v in buffer {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(bin_path, bytes)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`]; the stored f32 values
/// widen losslessly and shapes are validated against the header.
pub fn load_checkpoint(base: &Path) -> Result<NeuralFieldParams> {
    let (json_path, bin_path) = checkpoint_paths(base);
    let text = fs::read_to_string(&json_path)?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.kind != "neural-field-checkpoint" {
        return Err(Error::Format(format!(
            "{}: unexpected kind {:?}",
            json_path.display(),
            header.kind
        )));
    }
    let bytes = fs::read(&bin_path)?;
    if bytes.len() != header.num_values * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes but header promises {}",
            bin_path.display(),
            bytes.len(),
            header.num_values * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let config = header.config;
    config.validate()?;
    let table_rows = config.levels * config.table_size;
    let input = config.input_dim();
    let sizes = [
        table_rows * config.features_per_level,
        header.hidden * input,
        header.hidden,
        header.n_outputs * header.hidden,
    ];
    let hash: Vec<f64> = values.by_ref().take(sizes[0]).collect();
    let w1: Vec<f64> = values.by_ref().take(sizes[1]).collect();
    let b1: Vec<f64> = values.by_ref().take(sizes[2]).collect();
    let w2: Vec<f64> = values.by_ref().take(sizes[3]).collect();
    let b2: Vec<f64> = values.collect();
    NeuralFieldParams::from_parts(config, header.n_outputs, header.hidden, hash, w1, b1, w2, b2)
}

/// Write the per-epoch loss history as CSV.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut text = String::from("epoch,lr,dc,eds,total\n");
    for r in records {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.dc, r.eds, r.total));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Parse a loss CSV written by [`write_loss_csv`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch,lr,dc,eds,total") => {}
        other => {
            return Err(Error::Format(format!(
                "{}: bad loss header {:?}",
                path.display(),
                other
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "{}: line {} has {} fields",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: bad number {:?} on line {}", path.display(), s, i + 2))
            })
        };
        records.push(LossRecord {
            epoch: fields[0].parse::<usize>().map_err(|_| {
                Error::Format(format!("{}: bad epoch {:?}", path.display(), fields[0]))
            })?,
            lr: parse(fields[1])?,
            dc: parse(fields[2])?,
            eds: parse(fields[3])?,
            total: parse(fields[4])?,
        });
    }
    Ok(records)
}

/// Everything needed to rerun a command and get bit-identical outputs:
/// the command name, its full parameter set, and content hashes of inputs.
/// Deliberately holds no timestamps so reruns produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            parameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Record one parameter; values serialize through serde_json.
    pub fn set(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.parameters.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Record an input file by name and content hash.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        self.inputs.insert(name, sha256_file(path)?);
        Ok(())
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// SHA-256 of a file's contents as lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buffer = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buffer)?;
        if n == 0 {
            break;
        }
        hasher.update(&buffer[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Export a grid as 8-bit grayscale PNG with a linear window: `lo` maps to
/// black, `hi` to white, values outside clamp. Row 0 is the top of the image.
pub fn export_png(path: &Path, grid: &Grid2, lo: f64, hi: f64) -> Result<()> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "window [{lo}, {hi}] must be finite with hi > lo"
        )));
    }
    let scale = 255.0 / (hi - lo);
    let pixels: Vec<u8> = grid
        .data()
        .iter()
        .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let image = image::GrayImage::from_raw(grid.width() as u32, grid.height() as u32, pixels)
        .expect("pixel buffer matches grid dimensions");
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: png encode failed: {e}", path.display())))?;
    Ok(())
}
