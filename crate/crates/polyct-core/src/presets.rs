//! Built-in experiment presets bundling geometry, phantom, spectrum, and
//! training settings.
//!
//! `desk64` is sized so a full simulate-train-evaluate cycle finishes in
//! minutes on one desktop core. `paper` matches the published experimental
//! scale and costs correspondingly more.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detectors_to_cover, make_geometry, AngleRange, DetectorArrangement, FanBeamGeometry};
use crate::grid::{Grid2, MetalMask};
use crate::phantom::{
    compose_polychromatic, extract_metal_mask, make_disk_phantom, Disk, MaterialTable, PolyImage,
    SimulateOptions,
};
use crate::spectrum::Spectrum;
use crate::train::TrainConfig;

/// A complete, reproducible experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub geometry: FanBeamGeometry,
    /// Soft-tissue disks, rasterized in order with later disks on top.
    pub body_disks: Vec<Disk>,
    /// Metal insert; its `lac` field only marks mask pixels, attenuation
    /// comes from the metal material table.
    pub metal_disk: Disk,
    pub train: TrainConfig,
    pub simulate: SimulateOptions,
}

impl Preset {
    /// 64x64 desk-scale preset: 90 views, 51 energy levels, 1500 epochs.
    pub fn desk64() -> Preset {
        let mut geometry = FanBeamGeometry {
            source_to_center: 150.0,
            center_to_detector: 150.0,
            num_angles: 90,
            angle_range: AngleRange { start: 0.0, end: 360.0 },
            num_detectors: 0,
            detector_arrangement: DetectorArrangement::Equiangular { angular_spacing: 0.25 },
            image_height: 64,
            image_width: 64,
            voxel_size: (1.0, 1.0),
            sample_spacing: 0.5,
        };
        geometry.num_detectors = detectors_to_cover(&geometry);
        Preset {
            name: "desk64".into(),
            geometry,
            body_disks: vec![
                Disk { center: [0.0, 0.0], radius: 22.0, lac: 0.02 },
                Disk { center: [8.0, 5.0], radius: 7.0, lac: 0.024 },
                Disk { center: [-9.0, -6.0], radius: 5.5, lac: 0.016 },
            ],
            metal_disk: Disk { center: [5.0, -4.0], radius: 2.5, lac: 1.0 },
            train: TrainConfig::desk64(),
            simulate: SimulateOptions::default(),
        }
    }

    /// 256x256 published-scale preset: 360 views, 101 energy levels,
    /// 4000 epochs.
    pub fn paper() -> Preset {
        let mut geometry = FanBeamGeometry {
            source_to_center: 600.0,
            center_to_detector: 600.0,
            num_angles: 360,
            angle_range: AngleRange { start: 0.0, end: 360.0 },
            num_detectors: 0,
            detector_arrangement: DetectorArrangement::Equiangular { angular_spacing: 0.1 },
            image_height: 256,
            image_width: 256,
            voxel_size: (1.0, 1.0),
            sample_spacing: 0.5,
        };
        geometry.num_detectors = detectors_to_cover(&geometry);
        Preset {
            name: "paper".into(),
            geometry,
            body_disks: vec![
                Disk { center: [0.0, 0.0], radius: 88.0, lac: 0.02 },
                Disk { center: [32.0, 20.0], radius: 28.0, lac: 0.024 },
                Disk { center: [-36.0, -24.0], radius: 22.0, lac: 0.016 },
            ],
            metal_disk: Disk { center: [20.0, -16.0], radius: 10.0, lac: 1.0 },
            train: TrainConfig::paper(),
            simulate: SimulateOptions::default(),
        }
    }

    pub fn by_name(name: &str) -> Result<Preset> {
        match name {
            "desk64" => Ok(Preset::desk64()),
            "paper" => Ok(Preset::paper()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other:?}, expected desk64 or paper"
            ))),
        }
    }

    /// Validate every embedded configuration.
    pub fn validate(&self) -> Result<()> {
        make_geometry(self.geometry.clone())?;
        self.train.validate()?;
        Ok(())
    }

    /// Tungsten-like source sampled at the preset's energy levels.
    pub fn source_spectrum(&self) -> Result<Spectrum> {
        Spectrum::synthetic_source(self.train.n_energies, self.train.energy_range)
    }

    /// Energy-independent soft-tissue image, no metal.
    pub fn body_image(&self) -> Grid2 {
        make_disk_phantom(&self.geometry, &self.body_disks)
    }

    /// Pixels covered by the metal insert.
    pub fn metal_mask(&self) -> MetalMask {
        let marker = Disk { lac: 1.0, ..self.metal_disk };
        let image = make_disk_phantom(&self.geometry, &[marker]);
        extract_metal_mask(&image, 0.5)
    }

    /// Per-energy phantom: body everywhere, metal attenuation at the mask.
    pub fn phantom(&self, energies: &[f64]) -> Result<PolyImage> {
        compose_polychromatic(
            &self.body_image(),
            &self.metal_mask(),
            &MaterialTable::test_metal(),
            energies,
        )
    }
}
