//! Normalized X-ray source spectra.
//!
//! A spectrum is a set of strictly increasing energy levels (keV) with
//! nonnegative weights summing to one. The effective energy is the plain mean
//! of the levels, not weighted by the spectrum.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    energies: Vec<f64>,
    weights: Vec<f64>,
}

/// Validate raw (energy, count) pairs and normalize the counts to sum 1.
pub fn normalize(energies: Vec<f64>, counts: Vec<f64>) -> Result<Spectrum> {
    if energies.is_empty() {
        return Err(Error::InvalidSpectrum("spectrum has no energy levels".into()));
    }
    if energies.len() != counts.len() {
        return Err(Error::InvalidSpectrum(format!(
            "{} energies but {} counts",
            energies.len(),
            counts.len()
        )));
    }
    for pair in energies.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(Error::InvalidSpectrum(format!(
                "energies must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let mut total = 0.0;
    for (&e, &c) in energies.iter().zip(&counts) {
        if !e.is_finite() || !c.is_finite() {
            return Err(Error::InvalidSpectrum("non-finite entry".into()));
        }
        if c < 0.0 {
            return Err(Error::InvalidSpectrum(format!("negative count {c} at {e} keV")));
        }
        total += c;
    }
    if total <= 0.0 {
        return Err(Error::InvalidSpectrum("all counts are zero".into()));
    }
    let weights = counts.iter().map(|c| c / total).collect();
    Ok(Spectrum { energies, weights })
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Unweighted mean of the energy levels (keV).
    pub fn effective_energy(&self) -> f64 {
        self.energies.iter().sum::<f64>() / self.energies.len() as f64
    }

    /// Index of the energy level closest to the effective energy, ties going
    /// to the lower energy.
    pub fn effective_channel(&self) -> usize {
        let target = self.effective_energy();
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &e) in self.energies.iter().enumerate() {
            let dist = (e - target).abs();
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    /// Resample onto `n` uniformly spaced levels spanning `range`
    /// (inclusive; a single level sits at the range midpoint), interpolating
    /// counts piecewise-linearly and renormalizing. Levels outside the source
    /// spectrum read as zero count.
    pub fn resample(&self, n: usize, range: (f64, f64)) -> Result<Spectrum> {
        let (lo, hi) = range;
        if n == 0 {
            return Err(Error::InvalidSpectrum("cannot resample to zero levels".into()));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidSpectrum(format!(
                "energy range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let energies: Vec<f64> = if n == 1 {
            vec![(lo + hi) / 2.0]
        } else {
            (0..n).map(|i| lo + i as f64 * (hi - lo) / (n - 1) as f64).collect()
        };
        let counts: Vec<f64> = energies.iter().map(|&e| self.interpolate_count(e)).collect();
        normalize(energies, counts).map_err(|_| {
            Error::InvalidSpectrum(format!(
                "resampling to [{lo}, {hi}] keV leaves no overlap with the source spectrum"
            ))
        })
    }

    fn interpolate_count(&self, energy: f64) -> f64 {
        let e = &self.energies;
        if energy < e[0] || energy > e[e.len() - 1] {
            return 0.0;
        }
        if e.len() == 1 {
            return self.weights[0];
        }
        // partition_point gives the first index with energy above the query.
        let hi = e.partition_point(|&x| x < energy).clamp(1, e.len() - 1);
        let lo = hi - 1;
        let t = (energy - e[lo]) / (e[hi] - e[lo]);
        self.weights[lo] * (1.0 - t) + self.weights[hi] * t
    }

    /// Equal-weight spectrum at `n` uniformly spaced levels spanning `range`.
    pub fn uniform(n: usize, range: (f64, f64)) -> Result<Spectrum> {
        let flat = normalize(vec![range.0, range.1], vec![1.0, 1.0])?;
        flat.resample(n, range)
    }

    /// Synthetic tungsten-like source: counts ramp linearly from a small
    /// value at the low end up to a peak at 40% of the range, then back down
    /// to near zero at the high end. The shape gives the low energies enough
    /// weight to produce visible beam hardening; the exact numbers are
    /// fixtures, not measured physics.
    pub fn synthetic_source(n: usize, range: (f64, f64)) -> Result<Spectrum> {
        let (lo, hi) = range;
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidSpectrum(format!(
                "energy range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let peak = lo + 0.4 * (hi - lo);
        let shape = normalize(vec![lo, peak, hi], vec![0.3, 1.0, 0.05])?;
        shape.resample(n, range)
    }

    /// Parse the two-column `energy_keV,relative_count` CSV format.
    pub fn parse_csv(text: &str) -> Result<Spectrum> {
        let (energies, counts) = parse_two_column_csv(text, "energy_kev", "relative_count")?;
        normalize(energies, counts)
    }

    /// Serialize to the two-column CSV format, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("energy_kev,relative_count\n");
        for (e, w) in self.energies.iter().zip(&self.weights) {
            out.push_str(&format!("{e},{w}\n"));
        }
        out
    }
}

/// Shared reader for the two-column CSV files (spectra and material tables).
/// The header line is required; its column names are checked case-insensitively.
pub(crate) fn parse_two_column_csv(
    text: &str,
    first_col: &str,
    second_col: &str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV file".into()))?;
    let cols: Vec<String> =
        header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    if cols.len() != 2 || cols[0] != first_col || cols[1] != second_col {
        return Err(Error::Format(format!(
            "expected header '{first_col},{second_col}', got '{header}'"
        )));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Format(format!("line {}: expected 2 fields", idx + 1)));
        }
        let a: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad number '{}'", idx + 1, fields[0])))?;
        let b: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad number '{}'", idx + 1, fields[1])))?;
        first.push(a);
        second.push(b);
    }
    Ok((first, second))
}
