//! Classical reference methods: filtered backprojection and linear sinogram
//! inpainting over the metal trace.
//!
//! The FBP path follows the standard equiangular fan-beam weighting: detector
//! samples are scaled by the source distance times the cosine of their fan
//! angle, convolved with the angular ramp kernel (FFT with enough zero
//! padding for a linear convolution), and backprojected with inverse-square
//! distance weighting and linear interpolation between detector samples.
//! Values come out in the same units the sinogram was integrated in, so a
//! reconstruction of a clean simulated disk lands on the disk's attenuation
//! coefficient, not just its shape.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{DetectorArrangement, FanBeamGeometry};
use crate::grid::{Grid2, MetalMask};
use crate::phantom::{project_grid_mono, Sinogram};

/// Apodization applied on top of the ramp filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterWindow {
    /// Plain ramp response.
    #[default]
    RamLak,
    /// Hann-tapered ramp, trading resolution for noise suppression.
    Hann,
}

/// Binary sinogram-domain mark of every ray that crosses metal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetalTrace {
    num_angles: usize,
    num_detectors: usize,
    data: Vec<bool>,
}

impl MetalTrace {
    pub fn from_vec(num_angles: usize, num_detectors: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != num_angles * num_detectors {
            return Err(Error::ShapeMismatch(format!(
                "{} trace values for {} angles x {} detectors",
                data.len(),
                num_angles,
                num_detectors
            )));
        }
        Ok(MetalTrace { num_angles, num_detectors, data })
    }

    pub fn num_angles(&self) -> usize {
        self.num_angles
    }

    pub fn num_detectors(&self) -> usize {
        self.num_detectors
    }

    pub fn at(&self, angle: usize, detector: usize) -> bool {
        self.data[angle * self.num_detectors + detector]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Count of flagged bins.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Mark every ray whose line integral through the metal mask is positive.
pub fn metal_trace(mask: &MetalMask, geometry: &FanBeamGeometry) -> Result<MetalTrace> {
    if mask.height() != geometry.image_height || mask.width() != geometry.image_width {
        return Err(Error::ShapeMismatch(format!(
            "metal mask {}x{} against a {}x{} image",
            mask.height(),
            mask.width(),
            geometry.image_height,
            geometry.image_width
        )));
    }
    let grid = mask.to_grid();
    let mut data = vec![false; geometry.num_rays()];
    data.par_chunks_mut(geometry.num_detectors)
        .enumerate()
        .try_for_each(|(angle, row)| -> Result<()> {
            for (detector, flag) in row.iter_mut().enumerate() {
                *flag = project_grid_mono(&grid, geometry, angle, detector)? > 0.0;
            }
            Ok(())
        })?;
    MetalTrace::from_vec(geometry.num_angles, geometry.num_detectors, data)
}

/// Replace flagged bins by per-angle linear interpolation between their
/// nearest unflagged neighbors.
///
/// A run touching the detector edge is filled with its single available
/// neighbor. A completely flagged projection row falls back to, per
/// detector, the mean of that detector's unflagged values across all other
/// angles (zero and a warning if even those are missing). Unflagged bins
/// are passed through untouched, which also makes the operation idempotent.
pub fn li_inpaint(sino: &Sinogram, trace: &MetalTrace) -> Result<Sinogram> {
    let geometry = &sino.geometry;
    if trace.num_angles() != geometry.num_angles || trace.num_detectors() != geometry.num_detectors
    {
        return Err(Error::ShapeMismatch(format!(
            "trace {}x{} against a {}x{} sinogram",
            trace.num_angles(),
            trace.num_detectors(),
            geometry.num_angles,
            geometry.num_detectors
        )));
    }
    let nd = geometry.num_detectors;
    let mut out = sino.clone();

    // Per-detector means over unflagged bins, for rows with nothing left to
    // interpolate from. Computed from the original values only, so a second
    // pass reproduces the same fill.
    let mut column_mean = vec![0.0f64; nd];
    let mut column_count = vec![0usize; nd];
    for angle in 0..geometry.num_angles {
        for detector in 0..nd {
            if !trace.at(angle, detector) {
                column_mean[detector] += sino.at(angle, detector);
                column_count[detector] += 1;
            }
        }
    }
    for (mean, count) in column_mean.iter_mut().zip(&column_count) {
        if *count > 0 {
            *mean /= *count as f64;
        }
    }

    for angle in 0..geometry.num_angles {
        let flagged: Vec<bool> = (0..nd).map(|d| trace.at(angle, d)).collect();
        if flagged.iter().all(|f| *f) {
            log::warn!("projection row {angle} is entirely inside the metal trace");
            for detector in 0..nd {
                if column_count[detector] == 0 {
                    log::warn!("detector column {detector} has no unflagged data; filling with 0");
                }
                out.set(angle, detector, column_mean[detector]);
            }
            continue;
        }
        let mut d = 0;
        while d < nd {
            if !flagged[d] {
                d += 1;
                continue;
            }
            let run_start = d;
            while d < nd && flagged[d] {
                d += 1;
            }
            let run_end = d; // exclusive
            let left = run_start.checked_sub(1).map(|i| sino.at(angle, i));
            let right = (run_end < nd).then(|| sino.at(angle, run_end));
            match (left, right) {
                (Some(a), Some(b)) => {
                    // Linear ramp between the bracketing unflagged bins.
                    let span = (run_end - run_start + 1) as f64;
                    for (step, detector) in (run_start..run_end).enumerate() {
                        let t = (step + 1) as f64 / span;
                        out.set(angle, detector, a + t * (b - a));
                    }
                }
                (Some(edge), None) | (None, Some(edge)) => {
                    for detector in run_start..run_end {
                        out.set(angle, detector, edge);
                    }
                }
                (None, None) => unreachable!("fully flagged rows are handled above"),
            }
        }
    }
    Ok(out)
}

/// Angular ramp kernel for equiangular fan-beam filtering, evaluated at
/// integer detector offsets: the parallel-beam Ram-Lak taps with the
/// standard (angle / sin angle)^2 correction folded in.
fn fan_ramp_kernel(taps: usize, delta_gamma: f64) -> Vec<f64> {
    let mut kernel = vec![0.0; taps];
    kernel[0] = 1.0 / (8.0 * delta_gamma * delta_gamma);
    for (n, k) in kernel.iter_mut().enumerate().skip(1).step_by(2) {
        let s = (n as f64 * delta_gamma).sin();
        *k = -1.0 / (2.0 * std::f64::consts::PI.powi(2) * s * s);
    }
    kernel
}

/// Equiangular fan-beam filtered backprojection.
pub fn fbp(sino: &Sinogram, window: FilterWindow) -> Result<Grid2> {
    let geometry = &sino.geometry;
    geometry.validate()?;
    let delta_gamma = match geometry.detector_arrangement {
        DetectorArrangement::Equiangular { angular_spacing } => angular_spacing.to_radians(),
        DetectorArrangement::Equispaced { .. } => {
            return Err(Error::InvalidArgument(
                "filtered backprojection supports only equiangular detectors".into(),
            ))
        }
    };
    let nd = geometry.num_detectors;
    let na = geometry.num_angles;
    let d = geometry.source_to_center;
    let center = (nd - 1) as f64 / 2.0;
    let span_rad = (geometry.angle_range.end - geometry.angle_range.start).to_radians();
    let delta_beta = span_rad / na as f64;

    // Kernel spectrum on a grid long enough that the circular convolution
    // equals the linear one over the detector span.
    let m = (3 * nd).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);
    let taps = fan_ramp_kernel(nd, delta_gamma);
    let mut kernel: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m];
    kernel[0].re = taps[0];
    for n in 1..nd {
        kernel[n].re = taps[n];
        kernel[m - n].re = taps[n];
    }
    fft.process(&mut kernel);
    if window == FilterWindow::Hann {
        for (i, k) in kernel.iter_mut().enumerate() {
            let cycles = i.min(m - i) as f64 / m as f64;
            *k *= 0.5 * (1.0 + (2.0 * std::f64::consts::PI * cycles).cos());
        }
    }

    // Weight and filter every projection row.
    let filtered: Vec<Vec<f64>> = (0..na)
        .into_par_iter()
        .map(|angle| {
            let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m];
            for (k, slot) in buf.iter_mut().take(nd).enumerate() {
                let gamma = (k as f64 - center) * delta_gamma;
                slot.re = sino.at(angle, k) * d * gamma.cos();
            }
            fft.process(&mut buf);
            for (b, k) in buf.iter_mut().zip(&kernel) {
                *b *= k;
            }
            ifft.process(&mut buf);
            // The inverse transform is unnormalized; fold in 1/m together
            // with the angular step of the convolution integral.
            let scale = delta_gamma / m as f64;
            buf.iter().take(nd).map(|c| c.re * scale).collect()
        })
        .collect();

    let sources: Vec<[f64; 2]> = (0..na).map(|a| geometry.source_position(a)).collect();
    let mut image = Grid2::zeros(geometry.image_height, geometry.image_width);
    let width = geometry.image_width;
    image
        .data_mut()
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out_row)| {
            for (col, out) in out_row.iter_mut().enumerate() {
                let pos = geometry.pixel_center(row, col);
                let mut acc = 0.0;
                for angle in 0..na {
                    let t = geometry.detector_coordinate(angle, pos);
                    if !(t >= 0.0 && t <= (nd - 1) as f64) {
                        continue;
                    }
                    let lo = (t.floor() as usize).min(nd - 2);
                    let frac = t - lo as f64;
                    let q = filtered[angle][lo] * (1.0 - frac) + filtered[angle][lo + 1] * frac;
                    let dx = pos[0] - sources[angle][0];
                    let dy = pos[1] - sources[angle][1];
                    acc += q / (dx * dx + dy * dy);
                }
                *out = delta_beta * acc;
            }
        });
    Ok(image)
}
