//! Losses, optimizer and the ray-batch training loop.
//!
//! Each optimizer step draws a batch of rays without replacement, evaluates
//! the neural field at every sample point along them, collapses the channel
//! stacks through the polychromatic projector and scores the predictions
//! with two terms: an l1 data-consistency loss against the measured
//! sinogram, and an energy-dependent smoothness penalty on adjacent channel
//! differences at non-metal sample points. Gradients flow back through the
//! projector softmin and the field into a dense Adam update.
//!
//! Ray batches are processed in parallel but every ray's contribution is
//! self-contained and the final reduction walks rays in batch order, so a
//! run is bit-reproducible regardless of worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    field_backward_cached, field_forward, field_forward_cached, init_params, FieldCache,
    GradAccum, HashEncoderConfig, MlpGrad, NeuralFieldParams,
};
use crate::forward::{poly_with_softmin, RayPrediction};
use crate::geometry::{ray_for, sample_ray, FanBeamGeometry};
use crate::grid::{Grid2, MetalMask};
use crate::phantom::Sinogram;
use crate::spectrum::Spectrum;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Hyper-parameters of one reconstruction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rays drawn per optimizer step.
    pub batch_rays: usize,
    /// Weight of the smoothness term in the total loss.
    pub lambda: f64,
    /// Optimizer steps; one step consumes one ray batch.
    pub epochs: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplicative learning-rate decay factor.
    pub lr_decay: f64,
    /// Epochs between decay applications.
    pub lr_decay_epochs: usize,
    /// Seed for parameter initialization and batch sampling.
    pub seed: u64,
    /// Energy channels the field emits.
    pub n_energies: usize,
    /// Energy span in keV that the channels discretize.
    pub energy_range: (f64, f64),
    /// Shape of the hash-grid encoder.
    pub encoder: HashEncoderConfig,
}

impl TrainConfig {
    /// Budget sized for 64 pixel reconstructions.
    pub fn desk64() -> Self {
        TrainConfig {
            batch_rays: 80,
            lambda: 0.2,
            epochs: 1500,
            lr0: 1e-3,
            lr_decay: 0.5,
            lr_decay_epochs: 1000,
            seed: 0,
            n_energies: 51,
            energy_range: (20.0, 120.0),
            encoder: HashEncoderConfig::desk64(),
        }
    }

    /// Full-size budget for 256 pixel reconstructions.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 4000,
            n_energies: 101,
            encoder: HashEncoderConfig::paper(),
            ..TrainConfig::desk64()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_rays == 0 {
            return Err(Error::InvalidArgument("batch needs at least one ray".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("need at least one epoch".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be finite and nonnegative",
                self.lambda
            )));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate decay {} must lie in (0, 1]",
                self.lr_decay
            )));
        }
        if self.lr_decay_epochs == 0 {
            return Err(Error::InvalidArgument("decay interval must be positive".into()));
        }
        if self.n_energies == 0 {
            return Err(Error::InvalidArgument("need at least one energy channel".into()));
        }
        let (lo, hi) = self.energy_range;
        if !(lo > 0.0 && hi > lo) || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "energy range [{lo}, {hi}] keV must be positive and increasing"
            )));
        }
        Ok(())
    }
}

/// Learning rate at an epoch under the stepwise decay schedule.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi((epoch / config.lr_decay_epochs) as i32)
}

/// Mean absolute error between measured and predicted sinogram values, with
/// its subgradient with respect to the predictions. The subgradient at an
/// exact tie is zero.
pub fn dc_loss(measured: &[f64], predicted: &[f64]) -> Result<(f64, Vec<f64>)> {
    if measured.len() != predicted.len() || measured.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} measured values against {} predictions",
            measured.len(),
            predicted.len()
        )));
    }
    let n = measured.len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = measured
        .iter()
        .zip(predicted)
        .map(|(&p, &p_hat)| {
            let r = p_hat - p;
            loss += r.abs();
            sign(r) / n
        })
        .collect();
    Ok((loss / n, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Energy-dependent smoothness loss over a batch of rays.
///
/// Each ray contributes the mean over its samples of the summed absolute
/// differences between adjacent channels, counting only samples off the
/// metal (`metal = true` masks a sample out); the batch result is the mean
/// of the per-ray values. `per_ray_lacs[r]` holds that ray's channel values
/// in sample-major order. Returns the loss and its subgradient in the same
/// shapes.
pub fn eds_loss(
    per_ray_lacs: &[Vec<f64>],
    per_ray_metal: &[Vec<bool>],
    num_channels: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if per_ray_lacs.len() != per_ray_metal.len() || per_ray_lacs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} lac rays against {} mask rays",
            per_ray_lacs.len(),
            per_ray_metal.len()
        )));
    }
    if num_channels == 0 {
        return Err(Error::InvalidArgument("need at least one channel".into()));
    }
    let num_rays = per_ray_lacs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(per_ray_lacs.len());
    for (lacs, metal) in per_ray_lacs.iter().zip(per_ray_metal) {
        if lacs.len() != metal.len() * num_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} lacs for {} samples of {} channels",
                lacs.len(),
                metal.len(),
                num_channels
            )));
        }
        let mut grad = vec![0.0; lacs.len()];
        // A single channel has no adjacent pairs; rays that miss the image
        // have no samples. Both contribute zero.
        if num_channels >= 2 && !metal.is_empty() {
            let scale = 1.0 / (num_rays * metal.len() as f64);
            let mut ray_sum = 0.0;
            for (s, (&masked, sample)) in
                metal.iter().zip(lacs.chunks_exact(num_channels)).enumerate()
            {
                if masked {
                    continue;
                }
                let g = &mut grad[s * num_channels..(s + 1) * num_channels];
                for i in 1..num_channels {
                    let d = sample[i - 1] - sample[i];
                    ray_sum += d.abs();
                    g[i - 1] += sign(d) * scale;
                    g[i] -= sign(d) * scale;
                }
            }
            loss += ray_sum / metal.len() as f64;
        }
        grads.push(grad);
    }
    Ok((loss / num_rays, grads))
}

/// First and second moment buffers of the Adam optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradAccum,
    pub v: GradAccum,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NeuralFieldParams) -> Self {
        AdamState { m: GradAccum::zeros_like(params), v: GradAccum::zeros_like(params), step: 0 }
    }
}

/// One bias-corrected Adam update, applied densely to every parameter.
pub fn adam_step(
    params: &mut NeuralFieldParams,
    grads: &GradAccum,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient entering the optimizer".into()));
    }
    state.step += 1;
    let inv_bc1 = 1.0 / (1.0 - BETA1.powi(state.step.min(i32::MAX as u64) as i32));
    let inv_bc2 = 1.0 / (1.0 - BETA2.powi(state.step.min(i32::MAX as u64) as i32));
    let AdamState { m, v, .. } = state;
    let p_bufs = params.buffers_mut();
    let g_bufs = grads.buffers();
    let m_bufs = m.buffers_mut();
    let v_bufs = v.buffers_mut();
    for (((p_buf, g_buf), m_buf), v_buf) in
        p_bufs.into_iter().zip(g_bufs).zip(m_bufs).zip(v_bufs)
    {
        if p_buf.len() != g_buf.len() || p_buf.len() != m_buf.len() || p_buf.len() != v_buf.len() {
            return Err(Error::ShapeMismatch(
                "gradient or moment buffer does not match the parameters".into(),
            ));
        }
        for (((p, &g), m), v) in
            p_buf.iter_mut().zip(g_buf.iter()).zip(m_buf.iter_mut()).zip(v_buf.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Loss components and parameter gradients of one ray batch.
#[derive(Debug)]
pub struct BatchLoss {
    /// Data-consistency term (mean absolute sinogram error).
    pub dc: f64,
    /// Smoothness term, before weighting by lambda.
    pub eds: f64,
    /// dc + lambda * eds.
    pub total: f64,
    pub grads: GradAccum,
}

/// Everything one ray adds to the batch: its prediction, loss shares and
/// gradient contribution. Rays are evaluated independently and folded in
/// batch order.
struct RayShare {
    measured: f64,
    predicted: f64,
    eds: f64,
    mlp: MlpGrad,
    hash: Vec<(u32, f64)>,
}

/// Loss and gradients for one explicit batch of flat ray indices.
///
/// This is one training step minus the optimizer; it is public so whole-loss
/// gradients can be checked against finite differences from the outside.
pub fn batch_loss(
    params: &NeuralFieldParams,
    sino: &Sinogram,
    spectrum: &Spectrum,
    mask: &MetalMask,
    lambda: f64,
    ray_indices: &[usize],
) -> Result<BatchLoss> {
    let geometry = &sino.geometry;
    if spectrum.len() != params.n_outputs() {
        return Err(Error::ShapeMismatch(format!(
            "spectrum has {} levels, field emits {} channels",
            spectrum.len(),
            params.n_outputs()
        )));
    }
    if mask.height() != geometry.image_height || mask.width() != geometry.image_width {
        return Err(Error::ShapeMismatch(format!(
            "metal mask {}x{} against a {}x{} image",
            mask.height(),
            mask.width(),
            geometry.image_height,
            geometry.image_width
        )));
    }
    if ray_indices.is_empty() {
        return Err(Error::InvalidArgument("empty ray batch".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be finite and nonnegative")));
    }
    let num_rays = geometry.num_rays();
    if let Some(&bad) = ray_indices.iter().find(|&&r| r >= num_rays) {
        return Err(Error::OutOfRange(format!("ray index {bad} out of range 0..{num_rays}")));
    }

    let n = params.n_outputs();
    let batch = ray_indices.len() as f64;
    let shares: Vec<RayShare> = ray_indices
        .par_iter()
        .map(|&flat| ray_share(params, sino, spectrum, mask, lambda, batch, flat, n))
        .collect::<Result<_>>()?;

    // Fold in batch order so the sums are independent of how the parallel
    // work was scheduled.
    let mut grads = GradAccum::zeros_like(params);
    let mut measured = Vec::with_capacity(shares.len());
    let mut predicted = Vec::with_capacity(shares.len());
    let mut eds = 0.0;
    for share in &shares {
        measured.push(share.measured);
        predicted.push(share.predicted);
        eds += share.eds;
        grads.mlp.add(&share.mlp);
        for &(idx, d) in &share.hash {
            grads.hash[idx as usize] += d;
        }
    }
    eds /= batch;
    let (dc, _) = dc_loss(&measured, &predicted)?;
    Ok(BatchLoss { dc, eds, total: dc + lambda * eds, grads })
}

#[allow(clippy::too_many_arguments)]
fn ray_share(
    params: &NeuralFieldParams,
    sino: &Sinogram,
    spectrum: &Spectrum,
    mask: &MetalMask,
    lambda: f64,
    batch: f64,
    flat: usize,
    n: usize,
) -> Result<RayShare> {
    let geometry = &sino.geometry;
    let angle = flat / geometry.num_detectors;
    let detector = flat % geometry.num_detectors;
    let ray = ray_for(geometry, angle, detector)?;
    let samples = sample_ray(geometry, &ray);

    let mut lacs = Vec::with_capacity(samples.len() * n);
    let mut caches: Vec<FieldCache> = Vec::with_capacity(samples.len());
    let mut metal = Vec::with_capacity(samples.len());
    for s in &samples {
        let (values, cache) = field_forward_cached(params, s.normalized)?;
        lacs.extend_from_slice(&values);
        caches.push(cache);
        let (row, col) = geometry.pixel_coordinates(s.position);
        metal.push(mask.nearest(row, col));
    }

    let pred = RayPrediction::new(samples.len(), n, lacs.clone(), geometry.sample_spacing)?;
    let (predicted, softmin) = poly_with_softmin(&pred, spectrum.weights())?;
    let measured = sino.at(angle, detector);
    let dc_coeff = sign(predicted - measured) / batch;

    let (eds, eds_grads) = eds_loss(
        std::slice::from_ref(&lacs),
        std::slice::from_ref(&metal),
        n,
    )?;
    let eds_grad = &eds_grads[0];

    let mut mlp = MlpGrad::zeros_like(params);
    let mut hash = Vec::new();
    let dx = geometry.sample_spacing;
    let mut upstream = vec![0.0; n];
    for (s, cache) in caches.iter().enumerate() {
        for (i, u) in upstream.iter_mut().enumerate() {
            *u = dc_coeff * dx * softmin[i] + lambda / batch * eds_grad[s * n + i];
        }
        field_backward_cached(params, cache, &upstream, &mut mlp, |idx, d| {
            hash.push((idx as u32, d))
        })?;
    }
    Ok(RayShare { measured, predicted, eds, mlp, hash })
}

/// Loss components of one epoch, as recorded in the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub lr: f64,
    pub dc: f64,
    pub eds: f64,
    pub total: f64,
}

/// A finished training run: the fitted field and the per-epoch losses.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: NeuralFieldParams,
    pub history: Vec<LossRecord>,
}

/// Fit the neural field to a measured sinogram.
pub fn train(
    sino: &Sinogram,
    spectrum: &Spectrum,
    mask: &MetalMask,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    sino.geometry.validate()?;
    if spectrum.len() != config.n_energies {
        return Err(Error::ShapeMismatch(format!(
            "spectrum has {} levels, configured for {}",
            spectrum.len(),
            config.n_energies
        )));
    }
    let num_rays = sino.geometry.num_rays();
    if config.batch_rays > num_rays {
        return Err(Error::InvalidArgument(format!(
            "batch of {} rays exceeds the {} available",
            config.batch_rays, num_rays
        )));
    }

    let mut params = init_params(&config.encoder, config.n_energies, config.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let batch = rand::seq::index::sample(&mut rng, num_rays, config.batch_rays).into_vec();
        let loss = batch_loss(&params, sino, spectrum, mask, config.lambda, &batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at epoch {epoch} (dc {}, eds {})",
                loss.dc, loss.eds
            )));
        }
        adam_step(&mut params, &loss.grads, &mut state, lr)?;
        history.push(LossRecord { epoch, lr, dc: loss.dc, eds: loss.eds, total: loss.total });
        if epoch % 100 == 0 || epoch + 1 == config.epochs {
            log::info!(
                "epoch {epoch}: total {:.6} (dc {:.6}, eds {:.6}, lr {lr:.2e})",
                loss.total,
                loss.dc,
                loss.eds
            );
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Render the trained field as an image: the channel nearest the effective
/// energy, evaluated at every pixel center, clamped to nonnegative values.
pub fn extract_image(
    params: &NeuralFieldParams,
    geometry: &FanBeamGeometry,
    spectrum: &Spectrum,
) -> Result<Grid2> {
    if spectrum.len() != params.n_outputs() {
        return Err(Error::ShapeMismatch(format!(
            "spectrum has {} levels, field emits {} channels",
            spectrum.len(),
            params.n_outputs()
        )));
    }
    let channel = spectrum.effective_channel();
    let (h, w) = (geometry.image_height, geometry.image_width);
    let mut image = Grid2::zeros(h, w);
    image
        .data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, out_row)| {
            for (col, out) in out_row.iter_mut().enumerate() {
                let x = geometry.normalized_coordinates(geometry.pixel_center(row, col));
                let values = field_forward(params, x)
                    .expect("pixel centers lie inside the unit square");
                *out = values[channel].max(0.0);
            }
        });
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::field_backward;
    use crate::geometry::{make_geometry, AngleRange, DetectorArrangement};
    use crate::phantom::{
        compose_polychromatic, extract_metal_mask, make_disk_phantom, simulate_sinogram, Disk,
        MaterialTable, SimulateOptions,
    };
    use crate::spectrum::normalize;
    use rand::Rng;

    fn tiny_encoder() -> HashEncoderConfig {
        HashEncoderConfig {
            levels: 2,
            table_size: 16,
            features_per_level: 2,
            base_resolution: 2,
            growth_factor: 2.0,
        }
    }

    fn tiny_geometry(image: usize) -> FanBeamGeometry {
        let mut g = FanBeamGeometry {
            source_to_center: 3.0 * image as f64,
            center_to_detector: 3.0 * image as f64,
            num_angles: 8,
            angle_range: AngleRange { start: 0.0, end: 360.0 },
            num_detectors: 0,
            detector_arrangement: DetectorArrangement::Equiangular { angular_spacing: 1.0 },
            image_height: image,
            image_width: image,
            voxel_size: (1.0, 1.0),
            sample_spacing: 1.0,
        };
        g.num_detectors = crate::geometry::detectors_to_cover(&g);
        make_geometry(g).unwrap()
    }

    fn uniform_levels(n: usize) -> Spectrum {
        let energies: Vec<f64> = (0..n).map(|i| 20.0 + i as f64).collect();
        normalize(energies, vec![1.0; n]).unwrap()
    }

    /// Order-one random parameters; the training initialization is too close
    /// to zero for meaningful finite-difference denominators.
    fn strong_params(encoder: HashEncoderConfig, n: usize, seed: u64) -> NeuralFieldParams {
        let mut p = init_params(&encoder, n, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for buf in p.buffers_mut() {
            for v in buf.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn dc_loss_matches_hand_values() {
        // Residuals 0.5 and -1.5 average to 1.0 in absolute value.
        let (loss, grad) = dc_loss(&[1.0, 3.0], &[1.5, 1.5]).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        assert_eq!(grad, vec![0.5, -0.5]);
    }

    #[test]
    fn dc_loss_is_zero_at_equality_with_zero_subgradient() {
        let (loss, grad) = dc_loss(&[0.3, -0.7], &[0.3, -0.7]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn dc_loss_gradient_matches_finite_differences() {
        let measured = [0.8, -0.2, 1.7, 0.0];
        let predicted = [0.1, 0.4, -0.9, 2.0];
        let (_, grad) = dc_loss(&measured, &predicted).unwrap();
        let h = 1e-6;
        for i in 0..predicted.len() {
            let mut plus = predicted;
            plus[i] += h;
            let mut minus = predicted;
            minus[i] -= h;
            let fd = (dc_loss(&measured, &plus).unwrap().0
                - dc_loss(&measured, &minus).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-9, "bin {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn dc_loss_rejects_mismatched_lengths() {
        assert!(dc_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert!(dc_loss(&[], &[]).is_err());
    }

    #[test]
    fn eds_loss_single_sample_example() {
        let (loss, grads) = eds_loss(&[vec![0.1, 0.4]], &[vec![false]], 2).unwrap();
        assert!((loss - 0.3).abs() < 1e-15);
        assert_eq!(grads[0], vec![-1.0, 1.0]);
    }

    #[test]
    fn eds_loss_vanishes_for_identical_channels_and_masked_samples() {
        let flat = vec![0.7; 3 * 4];
        let (loss, _) = eds_loss(&[flat], &[vec![false; 3]], 4).unwrap();
        assert_eq!(loss, 0.0);

        let varied = vec![0.1, 0.9, 0.2, 0.8];
        let (masked, grads) = eds_loss(&[varied], &[vec![true, true]], 2).unwrap();
        assert_eq!(masked, 0.0);
        assert!(grads[0].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn eds_loss_is_zero_for_a_single_channel() {
        let (loss, grads) = eds_loss(&[vec![0.5, 0.9, 0.1]], &[vec![false; 3]], 1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads[0].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn eds_loss_ignores_a_constant_shift_per_sample() {
        let base = vec![vec![0.1, 0.5, 0.3, 0.2, 0.6, 0.1]];
        let mask = vec![vec![false, false]];
        let (a, _) = eds_loss(&base, &mask, 3).unwrap();
        let shifted = vec![base[0]
            .chunks_exact(3)
            .enumerate()
            .flat_map(|(s, chunk)| chunk.iter().map(move |v| v + (s as f64 + 1.0) * 7.0))
            .collect::<Vec<f64>>()];
        let (b, _) = eds_loss(&shifted, &mask, 3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn eds_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let rays: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let masks = vec![vec![false, true], vec![false, false], vec![true, false]];
        let (_, grads) = eds_loss(&rays, &masks, n).unwrap();
        let h = 1e-6;
        for r in 0..rays.len() {
            for i in 0..rays[r].len() {
                let mut plus = rays.clone();
                plus[r][i] += h;
                let mut minus = rays.clone();
                minus[r][i] -= h;
                let fd = (eds_loss(&plus, &masks, n).unwrap().0
                    - eds_loss(&minus, &masks, n).unwrap().0)
                    / (2.0 * h);
                assert!(
                    (fd - grads[r][i]).abs() < 1e-9,
                    "ray {r} value {i}: fd {fd} vs {}",
                    grads[r][i]
                );
            }
        }
    }

    #[test]
    fn eds_loss_averages_per_ray_before_the_batch() {
        // One two-sample ray and one single-sample ray: the first ray's
        // samples share its 1/|r| normalization before the batch mean.
        let rays = vec![vec![0.0, 1.0, 0.0, 3.0], vec![0.0, 5.0]];
        let masks = vec![vec![false, false], vec![false]];
        let (loss, _) = eds_loss(&rays, &masks, 2).unwrap();
        let expect = ((1.0 + 3.0) / 2.0 + 5.0) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_matches_the_hand_computed_update() {
        let mut p = init_params(&tiny_encoder(), 2, 1).unwrap();
        for buf in p.buffers_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = GradAccum::zeros_like(&p);
        for buf in g.buffers_mut() {
            buf.iter_mut().for_each(|v| *v = 2.0);
        }
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        // m_hat = 2, v_hat = 4: the update is lr * 2 / (2 + 1e-8).
        let expect: f64 = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((expect + 9.99999995e-4).abs() < 1e-12);
        for buf in p.buffers_mut() {
            for v in buf.iter() {
                assert!((v - expect).abs() < 1e-18);
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let p0 = strong_params(tiny_encoder(), 3, 2);
        let mut p = p0.clone();
        let g = GradAccum::zeros_like(&p);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = init_params(&tiny_encoder(), 1, 0).unwrap();
        let mut g = GradAccum::zeros_like(&p);
        g.hash[3] = f64::NAN;
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut state, 1e-3).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn learning_rate_halves_every_thousand_epochs() {
        let config = TrainConfig::desk64();
        assert_eq!(lr_at(0, &config), 1e-3);
        assert_eq!(lr_at(999, &config), 1e-3);
        assert_eq!(lr_at(1000, &config), 5e-4);
        assert_eq!(lr_at(2000, &config), 2.5e-4);
    }

    #[test]
    fn batch_gradient_matches_finite_differences_end_to_end() {
        // A 4x4 phantom with one metal pixel, three energy channels and two
        // rays: small enough to difference every parameter of the network.
        let g = tiny_geometry(4);
        let body = make_disk_phantom(&g, &[Disk { center: [0.0, 0.0], radius: 1.6, lac: 0.02 }]);
        let metal_img = make_disk_phantom(&g, &[Disk { center: [0.5, 0.5], radius: 0.6, lac: 1.0 }]);
        let mask = extract_metal_mask(&metal_img, 0.5);
        let spec = normalize(vec![40.0, 70.0, 100.0], vec![1.0, 1.0, 1.0]).unwrap();
        let table = MaterialTable::test_metal();
        let phantom = compose_polychromatic(&body, &mask, &table, spec.energies()).unwrap();
        let sino = simulate_sinogram(&phantom, &g, &spec, &SimulateOptions::default()).unwrap();

        let params = strong_params(tiny_encoder(), 3, 40);
        let central = g.num_detectors / 2;
        let rays = [g.ray_index(1, central), g.ray_index(5, central + 2)];
        let lambda = 0.2;
        let loss = batch_loss(&params, &sino, &spec, &mask, lambda, &rays).unwrap();

        let h = 1e-5;
        let analytic = loss.grads.buffers().map(|b| b.clone());
        for (which, grads) in analytic.iter().enumerate() {
            for idx in 0..grads.len() {
                let mut plus = params.clone();
                plus.buffers_mut()[which][idx] += h;
                let mut minus = params.clone();
                minus.buffers_mut()[which][idx] -= h;
                let fd = (batch_loss(&plus, &sino, &spec, &mask, lambda, &rays).unwrap().total
                    - batch_loss(&minus, &sino, &spec, &mask, lambda, &rays).unwrap().total)
                    / (2.0 * h);
                let an = grads[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "buffer {which} index {idx}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let g = tiny_geometry(8);
        let body = make_disk_phantom(&g, &[Disk { center: [0.0, 0.0], radius: 3.0, lac: 0.02 }]);
        let phantom =
            crate::phantom::PolyImage { energies: vec![70.0], channels: vec![body] };
        let spec = normalize(vec![70.0], vec![1.0]).unwrap();
        let sino = simulate_sinogram(&phantom, &g, &spec, &SimulateOptions::default()).unwrap();
        let mask = MetalMask::empty(8, 8);
        let config = TrainConfig {
            batch_rays: 16,
            lambda: 0.0,
            epochs: 3,
            n_energies: 1,
            encoder: tiny_encoder(),
            seed: 5,
            ..TrainConfig::desk64()
        };
        let a = train(&sino, &spec, &mask, &config).unwrap();
        let b = train(&sino, &spec, &mask, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);

        let c = train(&sino, &spec, &mask, &TrainConfig { seed: 6, ..config }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn training_records_one_loss_row_per_epoch() {
        let g = tiny_geometry(8);
        let body = make_disk_phantom(&g, &[Disk { center: [0.0, 0.0], radius: 3.0, lac: 0.02 }]);
        let spec = uniform_levels(2);
        let phantom = crate::phantom::PolyImage {
            energies: spec.energies().to_vec(),
            channels: vec![body.clone(), body],
        };
        let sino = simulate_sinogram(&phantom, &g, &spec, &SimulateOptions::default()).unwrap();
        let mask = MetalMask::empty(8, 8);
        let config = TrainConfig {
            batch_rays: 8,
            epochs: 4,
            n_energies: 2,
            encoder: tiny_encoder(),
            ..TrainConfig::desk64()
        };
        let out = train(&sino, &spec, &mask, &config).unwrap();
        assert_eq!(out.history.len(), 4);
        for (e, row) in out.history.iter().enumerate() {
            assert_eq!(row.epoch, e);
            assert_eq!(row.lr, 1e-3);
            assert!((row.total - (row.dc + config.lambda * row.eds)).abs() < 1e-15);
        }
    }

    #[test]
    fn extract_image_picks_channel_zero_for_a_single_energy() {
        let g = tiny_geometry(4);
        let mut p = init_params(&tiny_encoder(), 1, 0).unwrap();
        let [_, _, _, w2, b2] = p.buffers_mut();
        w2.iter_mut().for_each(|v| *v = 0.0);
        b2[0] = 0.125;
        let spec = normalize(vec![70.0], vec![1.0]).unwrap();
        let img = extract_image(&p, &g, &spec).unwrap();
        assert_eq!(img.height(), 4);
        assert_eq!(img.width(), 4);
        assert!(img.data().iter().all(|v| (*v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn extract_image_selects_the_channel_nearest_the_effective_energy() {
        // Energies 20..120 in unit steps have effective energy 70, which is
        // exactly channel 50.
        let g = tiny_geometry(4);
        let mut p = init_params(&tiny_encoder(), 101, 0).unwrap();
        let [_, _, _, w2, b2] = p.buffers_mut();
        w2.iter_mut().for_each(|v| *v = 0.0);
        b2.iter_mut().for_each(|v| *v = -1.0);
        b2[50] = 0.25;
        b2[49] = 9.0;
        let spec = uniform_levels(101);
        let img = extract_image(&p, &g, &spec).unwrap();
        assert!(img.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn extract_image_clamps_negative_values_to_zero() {
        let g = tiny_geometry(4);
        let mut p = init_params(&tiny_encoder(), 1, 0).unwrap();
        let [_, _, _, w2, b2] = p.buffers_mut();
        w2.iter_mut().for_each(|v| *v = 0.0);
        b2[0] = -3.5;
        let spec = normalize(vec![70.0], vec![1.0]).unwrap();
        let img = extract_image(&p, &g, &spec).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_loss_validates_its_inputs() {
        let g = tiny_geometry(4);
        let body = make_disk_phantom(&g, &[Disk { center: [0.0, 0.0], radius: 1.5, lac: 0.02 }]);
        let phantom = crate::phantom::PolyImage { energies: vec![70.0], channels: vec![body] };
        let spec = normalize(vec![70.0], vec![1.0]).unwrap();
        let sino = simulate_sinogram(&phantom, &g, &spec, &SimulateOptions::default()).unwrap();
        let params = init_params(&tiny_encoder(), 1, 0).unwrap();
        let mask = MetalMask::empty(4, 4);
        assert!(batch_loss(&params, &sino, &spec, &mask, 0.2, &[]).is_err());
        assert!(batch_loss(&params, &sino, &spec, &mask, -0.1, &[0]).is_err());
        assert!(batch_loss(&params, &sino, &spec, &mask, 0.2, &[g.num_rays()]).is_err());
        let bad_mask = MetalMask::empty(5, 4);
        assert!(batch_loss(&params, &sino, &spec, &bad_mask, 0.2, &[0]).is_err());
    }

    #[test]
    fn batch_gradients_agree_with_the_dense_field_backward() {
        // The sparse per-ray accumulation used by batch_loss must match the
        // plain dense accumulation path sample by sample. One ray, lambda 0,
        // so the upstream is just the projector gradient times the dc sign.
        let g = tiny_geometry(4);
        let body = make_disk_phantom(&g, &[Disk { center: [0.0, 0.0], radius: 1.6, lac: 0.02 }]);
        let phantom = crate::phantom::PolyImage { energies: vec![70.0], channels: vec![body] };
        let spec = normalize(vec![70.0], vec![1.0]).unwrap();
        let sino = simulate_sinogram(&phantom, &g, &spec, &SimulateOptions::default()).unwrap();
        let params = strong_params(tiny_encoder(), 1, 8);
        let mask = MetalMask::empty(4, 4);
        let flat = g.ray_index(2, g.num_detectors / 2);
        let loss = batch_loss(&params, &sino, &spec, &mask, 0.0, &[flat]).unwrap();

        let ray = ray_for(&g, 2, g.num_detectors / 2).unwrap();
        let samples = sample_ray(&g, &ray);
        let mut lacs = Vec::new();
        for s in &samples {
            lacs.extend(field_forward(&params, s.normalized).unwrap());
        }
        let pred = RayPrediction::new(samples.len(), 1, lacs, g.sample_spacing).unwrap();
        let (p_hat, softmin) = poly_with_softmin(&pred, spec.weights()).unwrap();
        let coeff = sign(p_hat - sino.at(2, g.num_detectors / 2));
        let mut expect = GradAccum::zeros_like(&params);
        for s in &samples {
            let upstream = [coeff * g.sample_spacing * softmin[0]];
            field_backward(&params, s.normalized, &upstream, &mut expect).unwrap();
        }
        for (a, b) in loss.grads.buffers().iter().zip(expect.buffers()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-15, "{x} vs {y}");
            }
        }
    }
}
