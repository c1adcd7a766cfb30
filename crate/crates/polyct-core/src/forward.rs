//! Discrete polychromatic forward model and its analytic gradient.
//!
//! For one ray with per-sample, per-energy attenuation coefficients `mu_i(x)`
//! the model first forms the discrete line integrals `p_i = dx * sum_x
//! mu_i(x)` and then collapses them over the source spectrum as
//! `p = -ln sum_i eta_i * exp(-p_i)`, evaluated in log-sum-exp form (shift by min_i p_i) so rays with hundreds
//! of attenuation lengths stay finite. The gradient of p with respect to any
//! mu_i(x) is dx times the softmin weight of channel i, which is what makes
//! the model cheap to backpropagate through: one weight per channel, shared
//! by all samples on the ray.

use crate::error::{Error, Result};

/// Per-ray stack of predicted attenuation coefficients, laid out
/// `[num_samples x num_channels]` row-major, plus the sample spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPrediction {
    num_samples: usize,
    num_channels: usize,
    lacs: Vec<f64>,
    delta_x: f64,
}

impl RayPrediction {
    pub fn new(num_samples: usize, num_channels: usize, lacs: Vec<f64>, delta_x: f64) -> Result<Self> {
        if num_channels == 0 {
            return Err(Error::InvalidArgument("a ray needs at least one energy channel".into()));
        }
        if lacs.len() != num_samples * num_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples x {} channels needs {} values, got {}",
                num_samples,
                num_channels,
                num_samples * num_channels,
                lacs.len()
            )));
        }
        if !(delta_x > 0.0) || !delta_x.is_finite() {
            return Err(Error::InvalidArgument(format!("delta_x must be positive, got {delta_x}")));
        }
        Ok(RayPrediction { num_samples, num_channels, lacs, delta_x })
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn lacs(&self) -> &[f64] {
        &self.lacs
    }

    pub fn lacs_mut(&mut self) -> &mut [f64] {
        &mut self.lacs
    }

    pub fn delta_x(&self) -> f64 {
        self.delta_x
    }

    /// Discrete line integrals, one per channel.
    pub fn line_integrals(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.num_channels];
        for sample in self.lacs.chunks_exact(self.num_channels) {
            for (acc, &v) in p.iter_mut().zip(sample) {
                *acc += v;
            }
        }
        for acc in &mut p {
            *acc *= self.delta_x;
        }
        p
    }
}

fn check_weights(pred: &RayPrediction, weights: &[f64]) -> Result<()> {
    if weights.len() != pred.num_channels {
        return Err(Error::ShapeMismatch(format!(
            "{} spectrum weights for {} channels",
            weights.len(),
            pred.num_channels
        )));
    }
    Ok(())
}

/// Monochromatic projection of one channel: `dx * sum of that channel`.
pub fn project_mono(pred: &RayPrediction, channel: usize) -> Result<f64> {
    if channel >= pred.num_channels {
        return Err(Error::OutOfRange(format!(
            "channel {} out of range 0..{}",
            channel, pred.num_channels
        )));
    }
    let mut acc = 0.0;
    for sample in pred.lacs.chunks_exact(pred.num_channels) {
        acc += sample[channel];
    }
    let p = acc * pred.delta_x;
    if !p.is_finite() {
        return Err(Error::Numerical(format!("non-finite monochromatic projection {p}")));
    }
    Ok(p)
}

/// Polychromatic projection `-ln sum_i eta_i exp(-p_i)` in stabilized form.
pub fn project_poly(pred: &RayPrediction, weights: &[f64]) -> Result<f64> {
    let (p, _) = poly_with_softmin(pred, weights)?;
    Ok(p)
}

/// Polychromatic projection together with the per-channel softmin weights
/// `w_i = eta_i exp(-p_i) / sum_j eta_j exp(-p_j)` that make up its
/// gradient: `dp/dmu_i(x) = dx * w_i` for every sample x.
pub fn poly_with_softmin(pred: &RayPrediction, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_weights(pred, weights)?;
    let integrals = pred.line_integrals();
    let shift = integrals.iter().copied().fold(f64::INFINITY, f64::min);
    if !shift.is_finite() {
        return Err(Error::Numerical("non-finite line integral in polychromatic projection".into()));
    }
    let mut total = 0.0;
    let mut softmin: Vec<f64> = integrals
        .iter()
        .zip(weights)
        .map(|(&p_i, &eta)| {
            let term = eta * (-(p_i - shift)).exp();
            total += term;
            term
        })
        .collect();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical(format!(
            "degenerate transmission sum {total} in polychromatic projection"
        )));
    }
    for w in &mut softmin {
        *w /= total;
    }
    Ok((shift - total.ln(), softmin))
}

/// Gradient of [`project_poly`] with respect to every entry of `pred.lacs`,
/// in the same `[num_samples x num_channels]` layout. All rows are equal to
/// `dx * softmin`.
pub fn project_poly_grad(pred: &RayPrediction, weights: &[f64]) -> Result<Vec<f64>> {
    let (_, softmin) = poly_with_softmin(pred, weights)?;
    let mut grad = Vec::with_capacity(pred.lacs.len());
    for _ in 0..pred.num_samples {
        grad.extend(softmin.iter().map(|w| w * pred.delta_x));
    }
    Ok(grad)
}
