//! Equiangular / equispaced fan-beam acquisition geometry and deterministic
//! ray sampling.
//!
//! Conventions, used consistently by the simulator, the baselines and the
//! reconstruction:
//! - the image is centered on the rotation axis; lengths are mm, angles are
//!   degrees in the public structs and radians internally;
//! - the source at view angle `beta` sits at `source_to_center * (cos, sin)`
//!   and the central ray points through the origin;
//! - detector indices grow counterclockwise as seen from the source;
//! - image row 0 is the top of the picture (decreasing y), column 0 the left
//!   (increasing x);
//! - normalized coordinates map the image bounding box onto [0,1] x [0,1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open view angle interval in degrees: views sit at
/// `start + a * (end - start) / num_angles`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub start: f64,
    pub end: f64,
}

/// Detector element layout. Equiangular elements sit on an arc centered on
/// the source, equispaced elements on a flat line perpendicular to the
/// central ray; spacings are degrees and mm respectively.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorArrangement {
    Equiangular { angular_spacing: f64 },
    Equispaced { detector_spacing: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    /// Source to rotation axis distance (mm).
    pub source_to_center: f64,
    /// Rotation axis to detector distance along the central ray (mm).
    pub center_to_detector: f64,
    pub num_angles: usize,
    pub angle_range: AngleRange,
    pub num_detectors: usize,
    pub detector_arrangement: DetectorArrangement,
    pub image_height: usize,
    pub image_width: usize,
    /// (column width, row height) in mm.
    pub voxel_size: (f64, f64),
    /// Distance between adjacent sample points along a ray (mm).
    pub sample_spacing: f64,
}

/// A ray leaving the source; `direction` is unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 2],
    pub direction: [f64; 2],
}

/// One integration point on a ray. `position` is mm, `normalized` maps the
/// image bounding box to [0,1]^2, `weight` is the path length the point
/// stands in for (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub position: [f64; 2],
    pub normalized: [f64; 2],
    pub weight: f64,
}

/// Validate a geometry: all counts and lengths positive, and the detector
/// long enough that every image corner projects onto it at every view angle.
pub fn make_geometry(geometry: FanBeamGeometry) -> Result<FanBeamGeometry> {
    geometry.validate()?;
    Ok(geometry)
}

impl FanBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidGeometry(msg));
        if !(self.source_to_center > 0.0) || !self.source_to_center.is_finite() {
            return fail(format!("source_to_center must be positive, got {}", self.source_to_center));
        }
        if !(self.center_to_detector > 0.0) || !self.center_to_detector.is_finite() {
            return fail(format!(
                "center_to_detector must be positive, got {}",
                self.center_to_detector
            ));
        }
        if self.num_angles == 0 {
            return fail("num_angles must be at least 1".into());
        }
        if self.num_detectors == 0 {
            return fail("num_detectors must be at least 1".into());
        }
        if !(self.angle_range.end > self.angle_range.start)
            || !self.angle_range.start.is_finite()
            || !self.angle_range.end.is_finite()
        {
            return fail(format!(
                "angle_range must satisfy start < end, got [{}, {})",
                self.angle_range.start, self.angle_range.end
            ));
        }
        match self.detector_arrangement {
            DetectorArrangement::Equiangular { angular_spacing } => {
                if !(angular_spacing > 0.0) || !angular_spacing.is_finite() {
                    return fail(format!("angular_spacing must be positive, got {angular_spacing}"));
                }
            }
            DetectorArrangement::Equispaced { detector_spacing } => {
                if !(detector_spacing > 0.0) || !detector_spacing.is_finite() {
                    return fail(format!(
                        "detector_spacing must be positive, got {detector_spacing}"
                    ));
                }
            }
        }
        if self.image_height == 0 || self.image_width == 0 {
            return fail("image dimensions must be at least 1x1".into());
        }
        if !(self.voxel_size.0 > 0.0) || !(self.voxel_size.1 > 0.0) {
            return fail(format!("voxel_size must be positive, got {:?}", self.voxel_size));
        }
        if !(self.sample_spacing > 0.0) || !self.sample_spacing.is_finite() {
            return fail(format!("sample_spacing must be positive, got {}", self.sample_spacing));
        }

        // The source must stay outside the image box, otherwise fan angles of
        // grid corners are ill-defined.
        let (hw, hh) = self.half_extent();
        if self.source_to_center <= (hw * hw + hh * hh).sqrt() {
            return fail(format!(
                "source_to_center {} is inside the image bounding box (half-diagonal {:.3})",
                self.source_to_center,
                (hw * hw + hh * hh).sqrt()
            ));
        }

        // Detector coverage: every grid corner must land between the first
        // and last element center at every view angle.
        let corners =
            [[-hw, -hh], [-hw, hh], [hw, -hh], [hw, hh]];
        for a in 0..self.num_angles {
            for corner in corners {
                let u = self.detector_coordinate(a, corner);
                if !(u >= 0.0 && u <= (self.num_detectors - 1) as f64) {
                    return fail(format!(
                        "detector does not cover the field of view: corner ({}, {}) at angle \
                         index {} projects to element coordinate {:.2} outside [0, {}]",
                        corner[0],
                        corner[1],
                        a,
                        u,
                        self.num_detectors - 1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Half extent (hw, hh) of the image bounding box in mm.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.image_width as f64 * self.voxel_size.0 / 2.0,
            self.image_height as f64 * self.voxel_size.1 / 2.0,
        )
    }

    pub fn angle_rad(&self, angle_index: usize) -> f64 {
        let step = (self.angle_range.end - self.angle_range.start) / self.num_angles as f64;
        (self.angle_range.start + angle_index as f64 * step).to_radians()
    }

    pub fn source_position(&self, angle_index: usize) -> [f64; 2] {
        let beta = self.angle_rad(angle_index);
        [self.source_to_center * beta.cos(), self.source_to_center * beta.sin()]
    }

    pub(crate) fn central_direction(&self, angle_index: usize) -> [f64; 2] {
        let beta = self.angle_rad(angle_index);
        [-beta.cos(), -beta.sin()]
    }

    /// Source to detector distance along the central ray.
    pub fn source_to_detector(&self) -> f64 {
        self.source_to_center + self.center_to_detector
    }

    /// Continuous detector element coordinate that `point` projects to at
    /// view `angle_index`. Element centers sit at integers 0..num_detectors-1.
    pub fn detector_coordinate(&self, angle_index: usize, point: [f64; 2]) -> f64 {
        let s = self.source_position(angle_index);
        let c = self.central_direction(angle_index);
        let v = [point[0] - s[0], point[1] - s[1]];
        let along = v[0] * c[0] + v[1] * c[1];
        let lateral = -v[0] * c[1] + v[1] * c[0];
        let center = (self.num_detectors - 1) as f64 / 2.0;
        match self.detector_arrangement {
            DetectorArrangement::Equiangular { angular_spacing } => {
                let gamma = lateral.atan2(along);
                gamma / angular_spacing.to_radians() + center
            }
            DetectorArrangement::Equispaced { detector_spacing } => {
                let s_coord = lateral * self.source_to_detector() / along;
                s_coord / detector_spacing + center
            }
        }
    }

    pub fn num_rays(&self) -> usize {
        self.num_angles * self.num_detectors
    }

    /// Flat ray index used for batching and per-ray RNG seeding.
    pub fn ray_index(&self, angle_index: usize, detector_index: usize) -> usize {
        angle_index * self.num_detectors + detector_index
    }

    /// Physical center of pixel (row, col); row 0 is the top row.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let (hw, hh) = self.half_extent();
        [
            -hw + (col as f64 + 0.5) * self.voxel_size.0,
            hh - (row as f64 + 0.5) * self.voxel_size.1,
        ]
    }

    /// Fractional pixel coordinates (row, col) of a physical position.
    pub fn pixel_coordinates(&self, position: [f64; 2]) -> (f64, f64) {
        let (hw, hh) = self.half_extent();
        let col = (position[0] + hw) / self.voxel_size.0 - 0.5;
        let row = (hh - position[1]) / self.voxel_size.1 - 0.5;
        (row, col)
    }

    /// Map a physical position into the [0,1]^2 box coordinates the neural
    /// field is defined on.
    pub fn normalized_coordinates(&self, position: [f64; 2]) -> [f64; 2] {
        let (hw, hh) = self.half_extent();
        [(position[0] + hw) / (2.0 * hw), (position[1] + hh) / (2.0 * hh)]
    }
}

/// The ray for one (view angle, detector element) pair.
pub fn ray_for(geometry: &FanBeamGeometry, angle_index: usize, detector_index: usize) -> Result<Ray> {
    if angle_index >= geometry.num_angles {
        return Err(Error::OutOfRange(format!(
            "angle index {} out of range 0..{}",
            angle_index, geometry.num_angles
        )));
    }
    if detector_index >= geometry.num_detectors {
        return Err(Error::OutOfRange(format!(
            "detector index {} out of range 0..{}",
            detector_index, geometry.num_detectors
        )));
    }
    let origin = geometry.source_position(angle_index);
    let c = geometry.central_direction(angle_index);
    let center = (geometry.num_detectors - 1) as f64 / 2.0;
    let offset = detector_index as f64 - center;
    let direction = match geometry.detector_arrangement {
        DetectorArrangement::Equiangular { angular_spacing } => {
            let gamma = offset * angular_spacing.to_radians();
            let (sin_g, cos_g) = gamma.sin_cos();
            // Rotate the central direction by the fan angle (counterclockwise
            // for positive gamma).
            [c[0] * cos_g - c[1] * sin_g, c[0] * sin_g + c[1] * cos_g]
        }
        DetectorArrangement::Equispaced { detector_spacing } => {
            let d = geometry.source_to_detector();
            let lateral = offset * detector_spacing;
            let perp = [-c[1], c[0]];
            let v = [d * c[0] + lateral * perp[0], d * c[1] + lateral * perp[1]];
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / norm, v[1] / norm]
        }
    };
    Ok(Ray { origin, direction })
}

/// Deterministic equidistant sampling of a ray inside the image bounding box.
///
/// Points sit at the midpoint rule offsets `t_in + (k + 0.5) * dx` measured
/// from the box entry point, each carrying weight `dx`, so the weights sum to
/// the chord length within one `dx`. Rays that miss the box yield an empty
/// vector. No jitter anywhere: calling this twice gives identical output.
pub fn sample_ray(geometry: &FanBeamGeometry, ray: &Ray) -> Vec<SamplePoint> {
    let (hw, hh) = geometry.half_extent();
    let dx = geometry.sample_spacing;

    // Slab intersection of the ray parameter interval with the box.
    let mut t_in = 0.0f64;
    let mut t_out = f64::INFINITY;
    for axis in 0..2 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        let lo = if axis == 0 { -hw } else { -hh };
        let hi = -lo;
        if d.abs() < 1e-300 {
            if o < lo || o > hi {
                return Vec::new();
            }
        } else {
            let (t0, t1) = ((lo - o) / d, (hi - o) / d);
            let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            t_in = t_in.max(t0);
            t_out = t_out.min(t1);
        }
    }
    if t_out <= t_in {
        return Vec::new();
    }

    let chord = t_out - t_in;
    let n = (chord / dx).floor() as usize;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = t_in + (k as f64 + 0.5) * dx;
        let position = [ray.origin[0] + t * ray.direction[0], ray.origin[1] + t * ray.direction[1]];
        let normalized = geometry.normalized_coordinates(position);
        let normalized = [normalized[0].clamp(0.0, 1.0), normalized[1].clamp(0.0, 1.0)];
        samples.push(SamplePoint { position, normalized, weight: dx });
    }
    samples
}

/// Smallest odd detector count (plus one element of margin per side) whose
/// span covers the whole image bounding box at every view angle, for the
/// given arrangement spacing.
pub fn detectors_to_cover(geometry_without_count: &FanBeamGeometry) -> usize {
    let g = geometry_without_count;
    let (hw, hh) = g.half_extent();
    let half_diagonal = (hw * hw + hh * hh).sqrt();
    // The worst case over all view angles is the ray tangent to the circle
    // through the box corners.
    let needed = match g.detector_arrangement {
        DetectorArrangement::Equiangular { angular_spacing } => {
            let gamma_max = (half_diagonal / g.source_to_center).asin();
            gamma_max / angular_spacing.to_radians()
        }
        DetectorArrangement::Equispaced { detector_spacing } => {
            // Tangent ray hits the flat detector at D * tan(gamma_max).
            let gamma_max = (half_diagonal / g.source_to_center).asin();
            g.source_to_detector() * gamma_max.tan() / detector_spacing
        }
    };
    2 * (needed.ceil() as usize + 1) + 1
}
