use rand_distr::{Distribution, Normal};

use super::{Memorygram, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Affine map of the values onto [0, 1]. Constant traces map to zeros.
pub fn normalize(trace: &Memorygram) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(normalize_values(trace.values()))
}

pub(crate) fn normalize_values(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 0.0 {
        values.map(|v| (v - lo) / span).collect()
    } else {
        values.map(|_| 0.0).collect()
    }
}

/// Linear interpolation onto `n_points` equally spaced instants spanning
/// `[0, t_last]`, clamped to the nearest sample outside the observed range.
pub fn resample(trace: &Memorygram, n_points: usize) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!("n_points {n_points} < 2")));
    }
    let values: Vec<f64> = trace.values().collect();
    Ok(interpolate(trace.samples(), &values, n_points))
}

/// `resample` applied to the normalized values.
pub fn normalized_resample(trace: &Memorygram, n_points: usize) -> Result<Vec<f64>> {
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!("n_points {n_points} < 2")));
    }
    let values = normalize(trace)?;
    Ok(interpolate(trace.samples(), &values, n_points))
}

pub(crate) fn interpolate(samples: &[Sample], values: &[f64], n_points: usize) -> Vec<f64> {
    debug_assert_eq!(samples.len(), values.len());
    let t_last = samples[samples.len() - 1].t_us as f64;
    let mut out = Vec::with_capacity(n_points);
    let mut j = 0;
    for i in 0..n_points {
        let g = (i as f64 * t_last) / (n_points - 1) as f64;
        while j + 1 < samples.len() && (samples[j + 1].t_us as f64) <= g {
            j += 1;
        }
        let t0 = samples[j].t_us as f64;
        let v = if g <= t0 || j + 1 == samples.len() {
            values[j]
        } else {
            let t1 = samples[j + 1].t_us as f64;
            let w = (g - t0) / (t1 - t0);
            values[j] + (values[j + 1] - values[j]) * w
        };
        out.push(v);
    }
    out
}

/// Points per trace when the caller does not choose: one per nominal period.
pub fn default_n_points(duration_ms: u64, resolution_ms: f64) -> usize {
    ((duration_ms as f64 / resolution_ms).round() as usize).max(2)
}

/// Perturbs every timestamp by independent N(0, sigma_ms) noise.
///
/// Perturbed timestamps are rounded to whole microseconds, clamped into the
/// capture window, stably re-sorted and then nudged apart by the minimum
/// amount needed to stay strictly increasing. Values travel with their
/// timestamps unchanged.
pub fn inject_jitter(trace: &Memorygram, sigma_ms: f64, seed: u64) -> Result<Memorygram> {
    if !(sigma_ms >= 0.0) || !sigma_ms.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma_ms {sigma_ms} must be >= 0")));
    }
    if sigma_ms == 0.0 || trace.is_empty() {
        return Ok(trace.clone());
    }
    let normal = Normal::new(0.0, sigma_ms * 1000.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng::rng_for(seed, "jitter", 0);
    let max_t = (trace.duration_ms() * 1000 - 1) as f64;

    let mut moved: Vec<(u64, f64)> = trace
        .samples()
        .iter()
        .map(|s| {
            let t = (s.t_us as f64 + normal.sample(&mut rng)).round().clamp(0.0, max_t);
            (t as u64, s.value)
        })
        .collect();
    moved.sort_by_key(|&(t, _)| t);

    let n = moved.len();
    for i in 1..n {
        if moved[i].0 <= moved[i - 1].0 {
            moved[i].0 = moved[i - 1].0 + 1;
        }
    }
    // Forward pass may push the tail past the window; pull it back.
    let mut ceiling = max_t as u64;
    for i in (0..n).rev() {
        if moved[i].0 > ceiling {
            moved[i].0 = ceiling;
        }
        ceiling = moved[i].0.saturating_sub(1);
    }

    trace.with_samples(moved.into_iter().map(|(t, v)| Sample::new(t, v)).collect())
}
