//! Multiresolution hash-grid neural field.
//!
//! The field maps a normalized position in the unit square to one linear
//! attenuation value per energy channel. Positions are encoded by a stack of
//! grids of geometrically increasing resolution: each level stores rows of
//! trainable features in a fixed-size table, the four cell corners around the
//! query are fetched (directly while the level's grid fits in the table,
//! through a spatial hash once it outgrows it) and blended bilinearly. The
//! concatenated per-level features feed a two-layer MLP with one ReLU in the
//! middle and a linear output head, so channel values may dip below zero
//! during optimization; clamping happens only at image extraction.
//!
//! Gradients are exact reverse-mode. A forward pass can record a small cache
//! (corner rows, bilinear weights, activations) so the matching backward pass
//! re-derives nothing; per query only the four touched rows per level receive
//! hash-table gradient, which keeps per-ray gradient contributions compact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the hidden MLP layer.
pub const HIDDEN_WIDTH: usize = 128;

/// Knuth multiplicative constant for the second coordinate of the spatial
/// hash; the first coordinate enters unmultiplied.
const HASH_PRIME_J: u32 = 2_654_435_761;

/// Shape of the multiresolution encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashEncoderConfig {
    /// Number of resolution levels.
    pub levels: usize,
    /// Feature table rows per level. Must be a power of two.
    pub table_size: usize,
    /// Feature values per table row.
    pub features_per_level: usize,
    /// Grid resolution of the coarsest level.
    pub base_resolution: usize,
    /// Per-level resolution multiplier, strictly above one.
    pub growth_factor: f64,
}

impl HashEncoderConfig {
    /// Small encoder sized for 64 pixel reconstructions.
    pub fn desk64() -> Self {
        HashEncoderConfig {
            levels: 8,
            table_size: 1 << 15,
            features_per_level: 4,
            base_resolution: 2,
            growth_factor: 2.0,
        }
    }

    /// Full-size encoder for 256 pixel reconstructions.
    pub fn paper() -> Self {
        HashEncoderConfig {
            levels: 16,
            table_size: 1 << 19,
            features_per_level: 8,
            base_resolution: 2,
            growth_factor: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one level".into()));
        }
        if self.table_size == 0 || !self.table_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.features_per_level == 0 {
            return Err(Error::InvalidArgument("need at least one feature per level".into()));
        }
        if self.base_resolution == 0 {
            return Err(Error::InvalidArgument("base resolution must be positive".into()));
        }
        if !(self.growth_factor > 1.0) || !self.growth_factor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "growth factor {} must be finite and above one",
                self.growth_factor
            )));
        }
        Ok(())
    }

    /// Grid resolution (cells per axis) of one level.
    pub fn resolution(&self, level: usize) -> usize {
        let n = (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor();
        (n as usize).max(1)
    }

    /// Length of the encoded feature vector.
    pub fn input_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Table row for corner (i, j) of a level with `resolution` cells per axis.
/// Coarse levels whose full corner grid fits in the table are stored densely
/// in row-major order; finer levels fall back to the spatial hash.
fn table_row(config: &HashEncoderConfig, resolution: usize, i: usize, j: usize) -> usize {
    let corners = resolution + 1;
    if corners * corners <= config.table_size {
        i * corners + j
    } else {
        let h = (i as u32) ^ (j as u32).wrapping_mul(HASH_PRIME_J);
        (h as usize) & (config.table_size - 1)
    }
}

/// All trainable state: per-level feature tables plus the MLP.
///
/// Flat storage order, used verbatim by checkpoints: hash tables first
/// (level-major, row-major within a level, features innermost), then `w1`
/// (`hidden x input_dim`, row-major), `b1`, `w2` (`n_outputs x hidden`,
/// row-major), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralFieldParams {
    config: HashEncoderConfig,
    n_outputs: usize,
    hidden: usize,
    hash: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl NeuralFieldParams {
    /// Rebuild parameters from raw buffers, checking every shape.
    pub fn from_parts(
        config: HashEncoderConfig,
        n_outputs: usize,
        hidden: usize,
        hash: Vec<f64>,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if n_outputs == 0 {
            return Err(Error::InvalidArgument("field needs at least one output".into()));
        }
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        let nin = config.input_dim();
        let checks = [
            ("hash", hash.len(), config.levels * config.table_size * config.features_per_level),
            ("w1", w1.len(), hidden * nin),
            ("b1", b1.len(), hidden),
            ("w2", w2.len(), n_outputs * hidden),
            ("b2", b2.len(), n_outputs),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ShapeMismatch(format!("{name} has {got} values, expected {want}")));
            }
        }
        Ok(NeuralFieldParams { config, n_outputs, hidden, hash, w1, b1, w2, b2 })
    }

    pub fn config(&self) -> &HashEncoderConfig {
        &self.config
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.hash.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn hash(&self) -> &[f64] {
        &self.hash
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    /// The five parameter buffers in storage order, mutably. The optimizer
    /// walks these in lockstep with a gradient buffer of the same shape.
    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.hash, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        [&self.hash, &self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|buf| buf.iter().all(|v| v.is_finite()))
    }
}

/// Fresh parameters: hash features uniform in +/-1e-4 so the field starts
/// near zero, MLP weights Glorot-uniform in +/-sqrt(6/(fan_in+fan_out)),
/// biases zero. Deterministic per seed.
pub fn init_params(config: &HashEncoderConfig, n_outputs: usize, seed: u64) -> Result<NeuralFieldParams> {
    config.validate()?;
    if n_outputs == 0 {
        return Err(Error::InvalidArgument("field needs at least one output".into()));
    }
    let hidden = HIDDEN_WIDTH;
    let nin = config.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hash: Vec<f64> = (0..config.levels * config.table_size * config.features_per_level)
        .map(|_| rng.random_range(-1e-4..1e-4))
        .collect();
    let bound1 = (6.0 / (nin + hidden) as f64).sqrt();
    let w1: Vec<f64> = (0..hidden * nin).map(|_| rng.random_range(-bound1..bound1)).collect();
    let bound2 = (6.0 / (hidden + n_outputs) as f64).sqrt();
    let w2: Vec<f64> = (0..n_outputs * hidden).map(|_| rng.random_range(-bound2..bound2)).collect();
    NeuralFieldParams::from_parts(
        config.clone(),
        n_outputs,
        hidden,
        hash,
        w1,
        vec![0.0; hidden],
        w2,
        vec![0.0; n_outputs],
    )
}

fn check_position(x: [f64; 2]) -> Result<()> {
    for (axis, v) in x.iter().enumerate() {
        if !(*v >= 0.0 && *v <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "position component {axis} = {v} outside the unit square"
            )));
        }
    }
    Ok(())
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct FieldCache {
    /// Flat hash-buffer row bases of the four corners per level
    /// (levels * 4 entries, each already offset by level and scaled by the
    /// feature count).
    corner_rows: Vec<usize>,
    /// Matching bilinear weights.
    corner_weights: Vec<f64>,
    /// Encoded feature vector.
    features: Vec<f64>,
    /// Hidden layer before the ReLU.
    preact: Vec<f64>,
    /// Hidden layer after the ReLU.
    hidden_act: Vec<f64>,
}

impl FieldCache {
    /// Hidden pre-activations, exposed so gradient tests can steer clear of
    /// the ReLU kink where finite differences straddle two slopes.
    pub fn preact(&self) -> &[f64] {
        &self.preact
    }
}

/// Corner rows and bilinear weights for one level around `x`.
fn level_corners(
    config: &HashEncoderConfig,
    level: usize,
    x: [f64; 2],
) -> ([usize; 4], [f64; 4]) {
    let n = config.resolution(level);
    let u = x[0] * n as f64;
    let v = x[1] * n as f64;
    let i0 = (u.floor() as usize).min(n - 1);
    let j0 = (v.floor() as usize).min(n - 1);
    let du = u - i0 as f64;
    let dv = v - j0 as f64;
    let rows = [
        table_row(config, n, i0, j0),
        table_row(config, n, i0 + 1, j0),
        table_row(config, n, i0, j0 + 1),
        table_row(config, n, i0 + 1, j0 + 1),
    ];
    let weights = [
        (1.0 - du) * (1.0 - dv),
        du * (1.0 - dv),
        (1.0 - du) * dv,
        du * dv,
    ];
    (rows, weights)
}

/// Encoded feature vector at a normalized position.
pub fn encode(params: &NeuralFieldParams, x: [f64; 2]) -> Result<Vec<f64>> {
    check_position(x)?;
    let config = &params.config;
    let f = config.features_per_level;
    let mut features = vec![0.0; config.input_dim()];
    for level in 0..config.levels {
        let (rows, weights) = level_corners(config, level, x);
        let level_base = level * config.table_size * f;
        let out = &mut features[level * f..(level + 1) * f];
        for (row, weight) in rows.iter().zip(weights) {
            let base = level_base + row * f;
            for (o, value) in out.iter_mut().zip(&params.hash[base..base + f]) {
                *o += weight * value;
            }
        }
    }
    Ok(features)
}

/// Field evaluation that records the cache for a later backward pass.
pub fn field_forward_cached(
    params: &NeuralFieldParams,
    x: [f64; 2],
) -> Result<(Vec<f64>, FieldCache)> {
    check_position(x)?;
    let config = &params.config;
    let f = config.features_per_level;
    let nin = config.input_dim();
    let mut corner_rows = Vec::with_capacity(config.levels * 4);
    let mut corner_weights = Vec::with_capacity(config.levels * 4);
    let mut features = vec![0.0; nin];
    for level in 0..config.levels {
        let (rows, weights) = level_corners(config, level, x);
        let level_base = level * config.table_size * f;
        let out = &mut features[level * f..(level + 1) * f];
        for (row, weight) in rows.iter().zip(weights) {
            let base = level_base + row * f;
            corner_rows.push(base);
            corner_weights.push(weight);
            for (o, value) in out.iter_mut().zip(&params.hash[base..base + f]) {
                *o += weight * value;
            }
        }
    }

    let mut preact = vec![0.0; params.hidden];
    for (j, p) in preact.iter_mut().enumerate() {
        let row = &params.w1[j * nin..(j + 1) * nin];
        let mut acc = params.b1[j];
        for (w, feat) in row.iter().zip(&features) {
            acc += w * feat;
        }
        *p = acc;
    }
    let hidden_act: Vec<f64> = preact.iter().map(|p| p.max(0.0)).collect();

    let mut output = vec![0.0; params.n_outputs];
    for (i, o) in output.iter_mut().enumerate() {
        let row = &params.w2[i * params.hidden..(i + 1) * params.hidden];
        let mut acc = params.b2[i];
        for (w, h) in row.iter().zip(&hidden_act) {
            acc += w * h;
        }
        *o = acc;
    }

    Ok((output, FieldCache { corner_rows, corner_weights, features, preact, hidden_act }))
}

/// Per-energy field values at a normalized position.
pub fn field_forward(params: &NeuralFieldParams, x: [f64; 2]) -> Result<Vec<f64>> {
    field_forward_cached(params, x).map(|(out, _)| out)
}

/// Gradient buffer for the MLP half of the parameters.
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrad {
    pub fn zeros_like(params: &NeuralFieldParams) -> Self {
        MlpGrad {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn add(&mut self, other: &MlpGrad) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

/// Dense gradient buffer shaped like [`NeuralFieldParams`].
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub hash: Vec<f64>,
    pub mlp: MlpGrad,
}

impl GradAccum {
    pub fn zeros_like(params: &NeuralFieldParams) -> Self {
        GradAccum { hash: vec![0.0; params.hash.len()], mlp: MlpGrad::zeros_like(params) }
    }

    /// The five gradient buffers in the same order as
    /// [`NeuralFieldParams::buffers_mut`].
    pub fn buffers(&self) -> [&Vec<f64>; 5] {
        [&self.hash, &self.mlp.w1, &self.mlp.b1, &self.mlp.w2, &self.mlp.b2]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.hash, &mut self.mlp.w1, &mut self.mlp.b1, &mut self.mlp.w2, &mut self.mlp.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|buf| buf.iter().all(|v| v.is_finite()))
    }
}

/// Reverse-mode pass from a recorded forward cache.
///
/// `upstream` is d(loss)/d(output). MLP gradients accumulate into `mlp`;
/// hash-table gradients are reported one value at a time through `hash_sink`
/// as (flat index, increment) so callers can keep them dense or sparse.
pub fn field_backward_cached(
    params: &NeuralFieldParams,
    cache: &FieldCache,
    upstream: &[f64],
    mlp: &mut MlpGrad,
    mut hash_sink: impl FnMut(usize, f64),
) -> Result<()> {
    if upstream.len() != params.n_outputs {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} values, field emits {}",
            upstream.len(),
            params.n_outputs
        )));
    }
    let nin = params.config.input_dim();
    let nh = params.hidden;
    let f = params.config.features_per_level;

    // Output layer: d_b2 = upstream, d_w2 = upstream (x) hidden, and the
    // hidden-layer cotangent in one sweep.
    let mut d_hidden = vec![0.0; nh];
    for (i, &up) in upstream.iter().enumerate() {
        mlp.b2[i] += up;
        let w_row = &params.w2[i * nh..(i + 1) * nh];
        let g_row = &mut mlp.w2[i * nh..(i + 1) * nh];
        for j in 0..nh {
            g_row[j] += up * cache.hidden_act[j];
            d_hidden[j] += up * w_row[j];
        }
    }

    // ReLU gate, then the first layer. The subgradient at exactly zero is
    // taken as zero.
    let mut d_features = vec![0.0; nin];
    for j in 0..nh {
        if cache.preact[j] <= 0.0 {
            continue;
        }
        let d_pre = d_hidden[j];
        mlp.b1[j] += d_pre;
        let w_row = &params.w1[j * nin..(j + 1) * nin];
        let g_row = &mut mlp.w1[j * nin..(j + 1) * nin];
        for k in 0..nin {
            g_row[k] += d_pre * cache.features[k];
            d_features[k] += d_pre * w_row[k];
        }
    }

    // Encoder: each corner row receives its bilinear share of the feature
    // cotangent for its level.
    for (c, (&base, &weight)) in cache.corner_rows.iter().zip(&cache.corner_weights).enumerate() {
        let level = c / 4;
        let d_level = &d_features[level * f..(level + 1) * f];
        for (k, d) in d_level.iter().enumerate() {
            hash_sink(base + k, weight * d);
        }
    }
    Ok(())
}

/// Reverse-mode pass at a position, accumulating into a dense buffer.
pub fn field_backward(
    params: &NeuralFieldParams,
    x: [f64; 2],
    upstream: &[f64],
    accum: &mut GradAccum,
) -> Result<()> {
    let (_, cache) = field_forward_cached(params, x)?;
    let GradAccum { hash, mlp } = accum;
    field_backward_cached(params, &cache, upstream, mlp, |idx, d| hash[idx] += d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> HashEncoderConfig {
        HashEncoderConfig {
            levels: 2,
            table_size: 16,
            features_per_level: 2,
            base_resolution: 2,
            growth_factor: 2.0,
        }
    }

    /// Parameters with order-one magnitudes so gradients are well away from
    /// round-off, unlike the deliberately tiny training initialization.
    fn strong_params(config: HashEncoderConfig, n_outputs: usize, seed: u64) -> NeuralFieldParams {
        let mut p = init_params(&config, n_outputs, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for buf in p.buffers_mut() {
            for v in buf.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    /// Loss proxy for finite differences: inner product of the field output
    /// with a fixed upstream vector.
    fn scalar_loss(params: &NeuralFieldParams, x: [f64; 2], upstream: &[f64]) -> f64 {
        field_forward(params, x)
            .unwrap()
            .iter()
            .zip(upstream)
            .map(|(v, u)| v * u)
            .sum()
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let good = tiny_config();
        assert!(good.validate().is_ok());
        for bad in [
            HashEncoderConfig { levels: 0, ..good },
            HashEncoderConfig { table_size: 48, ..good },
            HashEncoderConfig { table_size: 0, ..good },
            HashEncoderConfig { features_per_level: 0, ..good },
            HashEncoderConfig { base_resolution: 0, ..good },
            HashEncoderConfig { growth_factor: 1.0, ..good },
            HashEncoderConfig { growth_factor: f64::NAN, ..good },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn resolutions_grow_geometrically() {
        let config = HashEncoderConfig::desk64();
        assert_eq!(config.resolution(0), 2);
        assert_eq!(config.resolution(1), 4);
        assert_eq!(config.resolution(7), 256);
        let paper = HashEncoderConfig::paper();
        assert_eq!(paper.resolution(15), 65536);
    }

    #[test]
    fn same_seed_gives_identical_params_and_seeds_differ() {
        let config = tiny_config();
        let a = init_params(&config, 3, 11).unwrap();
        let b = init_params(&config, 3, 11).unwrap();
        assert_eq!(a, b);
        let c = init_params(&config, 3, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn initial_hash_features_are_tiny_and_biases_zero() {
        let p = init_params(&HashEncoderConfig::desk64(), 5, 3).unwrap();
        assert!(p.hash().iter().all(|v| v.abs() <= 1e-4));
        assert!(p.b1().iter().chain(p.b2()).all(|v| *v == 0.0));
        let bound = (6.0 / (p.config().input_dim() + p.hidden()) as f64).sqrt();
        assert!(p.w1().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn encode_at_a_grid_corner_returns_the_stored_row() {
        // One dense level of resolution 4: corner (2, 1) lives at row 11 and
        // position (0.5, 0.25) lands exactly on it.
        let config = HashEncoderConfig {
            levels: 1,
            table_size: 32,
            features_per_level: 2,
            base_resolution: 4,
            growth_factor: 2.0,
        };
        let hash: Vec<f64> = (0..32 * 2).map(|i| i as f64).collect();
        let nin = config.input_dim();
        let p = NeuralFieldParams::from_parts(
            config,
            1,
            4,
            hash,
            vec![0.0; 4 * nin],
            vec![0.0; 4],
            vec![0.0; 4],
            vec![0.0; 1],
        )
        .unwrap();
        let feats = encode(&p, [0.5, 0.25]).unwrap();
        assert_eq!(feats, vec![22.0, 23.0]);
    }

    #[test]
    fn encode_at_a_cell_midpoint_averages_the_corners() {
        let config = HashEncoderConfig {
            levels: 1,
            table_size: 32,
            features_per_level: 2,
            base_resolution: 4,
            growth_factor: 2.0,
        };
        let hash: Vec<f64> = (0..32 * 2).map(|i| i as f64).collect();
        let nin = config.input_dim();
        let p = NeuralFieldParams::from_parts(
            config,
            1,
            4,
            hash,
            vec![0.0; 4 * nin],
            vec![0.0; 4],
            vec![0.0; 4],
            vec![0.0; 1],
        )
        .unwrap();
        // Midpoint of the cell with corners (2,1), (3,1), (2,2), (3,2),
        // stored at rows 11, 16, 12, 17. Feature 0 is twice the row number.
        let feats = encode(&p, [0.625, 0.375]).unwrap();
        let expect0 = (22.0 + 32.0 + 24.0 + 34.0) / 4.0;
        assert!((feats[0] - expect0).abs() < 1e-12);
        assert!((feats[1] - (expect0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn encode_is_locally_lipschitz() {
        let p = strong_params(HashEncoderConfig::desk64(), 1, 5);
        let max_feat = p.hash().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n_max = p.config().resolution(p.config().levels - 1);
        // Within one cell the bilinear blend changes at most at rate
        // 2 * resolution * max-feature per axis.
        let k = 4.0 * n_max as f64 * max_feat;
        let delta = 1e-6;
        let a = encode(&p, [0.3130001, 0.7170001]).unwrap();
        let b = encode(&p, [0.3130001 + delta, 0.7170001 + delta]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= k * delta * 2.0 + 1e-15);
        }
    }

    #[test]
    fn encode_rejects_positions_outside_the_unit_square() {
        let p = init_params(&tiny_config(), 1, 0).unwrap();
        assert!(encode(&p, [-0.1, 0.5]).is_err());
        assert!(encode(&p, [0.5, 1.0001]).is_err());
        assert!(encode(&p, [f64::NAN, 0.5]).is_err());
        assert!(encode(&p, [0.0, 1.0]).is_ok());
    }

    #[test]
    fn every_corner_of_every_level_maps_into_the_table() {
        for config in [HashEncoderConfig::desk64(), tiny_config()] {
            for level in 0..config.levels {
                let n = config.resolution(level);
                let step = (n / 97).max(1);
                for i in (0..=n).step_by(step) {
                    for j in (0..=n).step_by(step) {
                        let row = table_row(&config, n, i, j);
                        assert!(row < config.table_size);
                    }
                }
            }
        }
        // The hashed branch with coordinates large enough to wrap.
        let config = tiny_config();
        let row = table_row(&config, 1 << 20, (1 << 20) - 3, 1 << 19);
        assert!(row < config.table_size);
    }

    #[test]
    fn zero_output_layer_means_zero_field() {
        let mut p = strong_params(tiny_config(), 4, 9);
        let [_, _, _, w2, b2] = p.buffers_mut();
        w2.iter_mut().for_each(|v| *v = 0.0);
        b2.iter_mut().for_each(|v| *v = 0.0);
        for x in [[0.1, 0.9], [0.5, 0.5], [0.999, 0.001]] {
            assert!(field_forward(&p, x).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn output_length_follows_the_channel_count() {
        for n in [1usize, 51, 101] {
            let p = init_params(&tiny_config(), n, 2).unwrap();
            assert_eq!(field_forward(&p, [0.4, 0.6]).unwrap().len(), n);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = strong_params(HashEncoderConfig::desk64(), 7, 21);
        let a = field_forward(&p, [0.123, 0.456]).unwrap();
        let b = field_forward(&p, [0.123, 0.456]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = strong_params(tiny_config(), 3, 4);
        let mut g = GradAccum::zeros_like(&p);
        field_backward(&p, [0.3, 0.8], &[0.0, 0.0, 0.0], &mut g).unwrap();
        assert!(g.buffers().iter().all(|buf| buf.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn hash_gradient_touches_only_visited_rows() {
        let p = strong_params(tiny_config(), 3, 4);
        let x = [0.31, 0.64];
        let mut g = GradAccum::zeros_like(&p);
        field_backward(&p, x, &[1.0, -2.0, 0.5], &mut g).unwrap();

        let (_, cache) = field_forward_cached(&p, x).unwrap();
        let f = p.config().features_per_level;
        let mut visited = vec![false; g.hash.len()];
        for &base in &cache.corner_rows {
            for k in 0..f {
                visited[base + k] = true;
            }
        }
        let mut nonzero_visited = 0;
        for (idx, v) in g.hash.iter().enumerate() {
            if visited[idx] {
                nonzero_visited += (*v != 0.0) as usize;
            } else {
                assert_eq!(*v, 0.0, "untouched row {idx} picked up gradient");
            }
        }
        assert!(nonzero_visited > 0);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let p = init_params(&tiny_config(), 3, 0).unwrap();
        let mut g = GradAccum::zeros_like(&p);
        assert!(field_backward(&p, [0.5, 0.5], &[1.0, 2.0], &mut g).is_err());
    }

    #[test]
    fn every_parameter_gradient_matches_central_differences() {
        let p = strong_params(tiny_config(), 3, 17);
        // A position whose hidden units all sit safely away from the ReLU
        // kink, so two-sided differences see a single slope.
        let x = [0.37, 0.81];
        let (_, cache) = field_forward_cached(&p, x).unwrap();
        assert!(cache.preact().iter().all(|pre| pre.abs() > 1e-3));
        let upstream = [0.7, -1.3, 0.4];

        let mut g = GradAccum::zeros_like(&p);
        field_backward(&p, x, &upstream, &mut g).unwrap();

        let h = 1e-4;
        let buffers = g.buffers().map(|b| b.clone());
        for (which, analytic) in buffers.iter().enumerate() {
            for idx in 0..analytic.len() {
                let mut plus = p.clone();
                plus.buffers_mut()[which][idx] += h;
                let mut minus = p.clone();
                minus.buffers_mut()[which][idx] -= h;
                let fd = (scalar_loss(&plus, x, &upstream) - scalar_loss(&minus, x, &upstream))
                    / (2.0 * h);
                let an = analytic[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-7);
                assert!(rel < 1e-4, "buffer {which} index {idx}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn directional_gradient_check_over_a_hundred_draws() {
        let config = tiny_config();
        let p = strong_params(config, 3, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n_params = p.num_params();
        let mut accepted = 0;
        while accepted < 100 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let (_, cache) = field_forward_cached(&p, x).unwrap();
            // Redraw when a hidden unit sits on the ReLU kink: central
            // differences straddle two slopes there and measure neither.
            if cache.preact().iter().any(|pre| pre.abs() < 5e-3) {
                continue;
            }
            accepted += 1;
            let upstream: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direction: Vec<f64> = (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect();

            let mut g = GradAccum::zeros_like(&p);
            field_backward_cached(&p, &cache, &upstream, &mut g.mlp, |idx, d| g.hash[idx] += d)
                .unwrap();
            let mut analytic = 0.0;
            let mut offset = 0;
            for buf in g.buffers() {
                for (grad, dir) in buf.iter().zip(&direction[offset..offset + buf.len()]) {
                    analytic += grad * dir;
                }
                offset += buf.len();
            }

            let h = 1e-5;
            let shift = |sign: f64| {
                let mut q = p.clone();
                let mut offset = 0;
                for buf in q.buffers_mut() {
                    let len = buf.len();
                    for (v, dir) in buf.iter_mut().zip(&direction[offset..offset + len]) {
                        *v += sign * h * dir;
                    }
                    offset += len;
                }
                scalar_loss(&q, x, &upstream)
            };
            let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "draw {accepted}: analytic {analytic} vs fd {fd}");
        }
    }

    #[test]
    fn cached_and_direct_backward_agree() {
        let p = strong_params(tiny_config(), 2, 31);
        let x = [0.42, 0.17];
        let upstream = [1.5, -0.25];
        let mut direct = GradAccum::zeros_like(&p);
        field_backward(&p, x, &upstream, &mut direct).unwrap();
        let (_, cache) = field_forward_cached(&p, x).unwrap();
        let mut cached = GradAccum::zeros_like(&p);
        field_backward_cached(&p, &cache, &upstream, &mut cached.mlp, |idx, d| {
            cached.hash[idx] += d
        })
        .unwrap();
        assert_eq!(direct.hash, cached.hash);
        assert_eq!(direct.mlp.w1, cached.mlp.w1);
        assert_eq!(direct.mlp.w2, cached.mlp.w2);
    }
}
