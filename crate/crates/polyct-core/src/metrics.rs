//! Image-quality metrics with optional region masking.
//!
//! PSNR supports restricting the comparison to a pixel subset, which is how
//! reconstructions are scored away from metal. SSIM follows the standard
//! formulation: 11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, averaged
//! over window positions fully inside the image.

use crate::error::{Error, Result};
use crate::grid::{Grid2, MetalMask};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(reference: &Grid2, test: &Grid2, data_range: f64) -> Result<()> {
    if reference.height() != test.height() || reference.width() != test.width() {
        return Err(Error::ShapeMismatch(format!(
            "reference {}x{} vs test {}x{}",
            reference.height(),
            reference.width(),
            test.height(),
            test.width()
        )));
    }
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "data range must be positive and finite, got {data_range}"
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, `10 log10(data_range^2 / MSE)`.
///
/// When `region` is given, only pixels the mask marks true enter the mean
/// squared error; it must select at least one pixel. Identical inputs return
/// positive infinity.
pub fn psnr(
    reference: &Grid2,
    test: &Grid2,
    data_range: f64,
    region: Option<&MetalMask>,
) -> Result<f64> {
    check_pair(reference, test, data_range)?;
    if let Some(mask) = region {
        if mask.height() != reference.height() || mask.width() != reference.width() {
            return Err(Error::ShapeMismatch(format!(
                "region mask {}x{} vs image {}x{}",
                mask.height(),
                mask.width(),
                reference.height(),
                reference.width()
            )));
        }
        if mask.count() == 0 {
            return Err(Error::InvalidArgument("region selects no pixels".into()));
        }
    }
    let mut squares = Vec::with_capacity(reference.data().len());
    for (i, (&r, &t)) in reference.data().iter().zip(test.data()).enumerate() {
        let included = region.map_or(true, |mask| mask.data()[i]);
        if included {
            squares.push((r - t) * (r - t));
        }
    }
    // Accumulate in sorted order so the result does not depend on pixel
    // ordering; flipping or permuting both images together leaves the value
    // bit-identical.
    squares.sort_by(f64::total_cmp);
    let count = squares.len();
    let mse = squares.iter().sum::<f64>() / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut kernel = [0.0; WINDOW];
    let center = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in kernel.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    kernel
}

/// Separable valid-mode filter: horizontal then vertical pass, output shrinks
/// by WINDOW-1 in each dimension.
fn filter_valid(data: &[f64], height: usize, width: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let wout = width - WINDOW + 1;
    let hout = height - WINDOW + 1;
    let mut horizontal = vec![0.0; height * wout];
    for row in 0..height {
        for col in 0..wout {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * data[row * width + col + k];
            }
            horizontal[row * wout + col] = acc;
        }
    }
    let mut out = vec![0.0; hout * wout];
    for row in 0..hout {
        for col in 0..wout {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * horizontal[(row + k) * wout + col];
            }
            out[row * wout + col] = acc;
        }
    }
    out
}

/// Mean structural similarity over all fully-interior window positions.
///
/// Requires both dimensions to be at least the window size. The result lies
/// in [-1, 1] and equals 1 exactly when the images match.
pub fn ssim(reference: &Grid2, test: &Grid2, data_range: f64) -> Result<f64> {
    check_pair(reference, test, data_range)?;
    let (h, w) = (reference.height(), reference.width());
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {WINDOW}x{WINDOW} ssim window"
        )));
    }
    let kernel = gaussian_kernel();
    let x = reference.data();
    let y = test.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let mu_x = filter_valid(x, h, w, &kernel);
    let mu_y = filter_valid(y, h, w, &kernel);
    let e_xx = filter_valid(&xx, h, w, &kernel);
    let e_yy = filter_valid(&yy, h, w, &kernel);
    let e_xy = filter_valid(&xy, h, w, &kernel);

    let c1 = (K1 * data_range) * (K1 * data_range);
    let c2 = (K2 * data_range) * (K2 * data_range);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let var_x = e_xx[i] - mu_x[i] * mu_x[i];
        let var_y = e_yy[i] - mu_y[i] * mu_y[i];
        let cov = e_xy[i] - mu_x[i] * mu_y[i];
        let numerator = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * cov + c2);
        let denominator = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
        total += numerator / denominator;
    }
    Ok(total / mu_x.len() as f64)
}
