//! Array growth model and buffer-offset recovery from push timings.
//!
//! V8 grows a full backing store to `size + size/2 + 16` elements. When every
//! index is shifted by a secret offset, the spikes in per-push latency land
//! at `capacity - offset`, and two consecutive spikes give the offset back:
//! `offset = 2 * new_size - 3 * size - 32`, exact up to the parity of the
//! internal capacity lost in the shift.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

/// Threshold multiplier on the median absolute deviation.
pub const DEFAULT_MAD_K: f64 = 8.0;
const LOCAL_MAX_RADIUS: usize = 3;
const MIN_DETECT_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushSource {
    Measured,
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushTrace {
    /// Duration of push `i` in microseconds; push `i` runs on an array of length `i`.
    pub durations: Vec<f64>,
    pub source: PushSource,
    pub true_offset: Option<u64>,
}

/// Capacity after growing a full backing store of `size` elements.
pub fn v8_new_size(size: u64) -> u64 {
    size + (size >> 1) + 16
}

/// Parameters of the forward push-timing model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushModel {
    pub offset: u64,
    pub n_pushes: usize,
    pub base_us: f64,
    /// Extra cost per element copied on a resize.
    pub spike_us_per_elem: f64,
    pub noise_sigma_us: f64,
    /// Internal capacity before the first push. `None` means
    /// `v8_new_size(0) + offset`.
    pub initial_capacity: Option<u64>,
    /// Elements added to every internal capacity on top of the offset (for
    /// instance a padding added by a defense).
    pub size_pad: u64,
}

impl PushModel {
    pub fn new(offset: u64, n_pushes: usize) -> Self {
        PushModel {
            offset,
            n_pushes,
            base_us: 1.0,
            spike_us_per_elem: 0.01,
            noise_sigma_us: 0.0,
            initial_capacity: None,
            size_pad: 0,
        }
    }

    fn start_capacity(&self) -> u64 {
        self.initial_capacity
            .unwrap_or_else(|| v8_new_size(0) + self.offset)
    }

    /// Smallest spike amplitude the model produces.
    pub fn min_spike_us(&self) -> f64 {
        self.spike_us_per_elem * (self.start_capacity() + self.size_pad) as f64
    }

    /// Push indices at which the backing store is full.
    pub fn resize_indices(&self) -> Vec<usize> {
        self.boundaries().into_iter().map(|(i, _)| i).collect()
    }

    // (push index, internal capacity being grown)
    fn boundaries(&self) -> Vec<(usize, u64)> {
        let mut out = Vec::new();
        let mut cap = self.start_capacity();
        loop {
            let Some(visible) = cap.checked_sub(self.offset) else {
                cap = v8_new_size(cap);
                continue;
            };
            if visible as usize >= self.n_pushes {
                break;
            }
            out.push((visible as usize, cap));
            cap = v8_new_size(cap);
        }
        out
    }

    pub fn simulate(&self, seed: u64) -> Result<PushTrace> {
        let noise = if self.noise_sigma_us > 0.0 {
            Some(Normal::new(0.0, self.noise_sigma_us).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        let mut rng = rng::rng_for(seed, "v8-push", 0);
        let mut durations: Vec<f64> = (0..self.n_pushes)
            .map(|_| {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                (self.base_us + n).max(0.0)
            })
            .collect();
        for (idx, cap) in self.boundaries() {
            durations[idx] += self.spike_us_per_elem * (cap + self.size_pad) as f64;
        }
        Ok(PushTrace {
            durations,
            source: PushSource::Simulated,
            true_offset: Some(self.offset),
        })
    }
}

pub fn simulate_push_timings(
    offset: u64,
    n_pushes: usize,
    base_us: f64,
    spike_us_per_elem: f64,
    noise_sigma_us: f64,
    seed: u64,
) -> Result<PushTrace> {
    PushModel {
        base_us,
        spike_us_per_elem,
        noise_sigma_us,
        ..PushModel::new(offset, n_pushes)
    }
    .simulate(seed)
}

// Linear-time median; reorders `xs`.
fn median_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    let mid = n / 2;
    let (lower, upper, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().max_by(f64::total_cmp).unwrap_or(upper);
        (below + upper) / 2.0
    }
}

/// Resize events: durations above `median + k * MAD` that are the largest
/// value within +-3 pushes.
pub fn detect_resizes(trace: &PushTrace) -> Result<Vec<usize>> {
    detect_resizes_with(trace, DEFAULT_MAD_K)
}

pub fn detect_resizes_with(trace: &PushTrace, k: f64) -> Result<Vec<usize>> {
    let d = &trace.durations;
    if d.len() < MIN_DETECT_LEN {
        return Err(Error::InvalidArgument(format!(
            "push trace has {} entries, need at least {MIN_DETECT_LEN}",
            d.len()
        )));
    }
    let mut scratch = d.clone();
    let med = median_in_place(&mut scratch);
    for (s, v) in scratch.iter_mut().zip(d) {
        *s = (v - med).abs();
    }
    let threshold = med + k * median_in_place(&mut scratch);

    let mut spikes = Vec::new();
    for (i, &v) in d.iter().enumerate() {
        if v <= threshold {
            continue;
        }
        let lo = i.saturating_sub(LOCAL_MAX_RADIUS);
        let hi = (i + LOCAL_MAX_RADIUS + 1).min(d.len());
        // Earlier equal values win so a plateau yields one index.
        let is_max = (lo..hi).all(|j| j == i || (j < i && d[j] < v) || (j > i && d[j] <= v));
        if is_max {
            spikes.push(i);
        }
    }
    if spikes.len() < 2 {
        return Err(Error::InsufficientSpikes(spikes.len()));
    }
    Ok(spikes)
}

/// Offset implied by a resize from visible `size` to visible `new_size`.
pub fn recover_offset(size: u64, new_size: u64) -> Result<i64> {
    if new_size <= size {
        return Err(Error::InvalidArgument(format!(
            "new_size {new_size} must exceed size {size}"
        )));
    }
    Ok(2 * new_size as i64 - 3 * size as i64 - 32)
}

/// Applies [`recover_offset`] to every consecutive spike pair and keeps the
/// maximum. A single pair under-reports by one when the internal capacity
/// before the resize is odd.
pub fn recover_offset_from_trace(trace: &PushTrace) -> Result<i64> {
    let spikes = detect_resizes(trace)?;
    recover_offset_from_spikes(&spikes)
}

pub fn recover_offset_from_spikes(spikes: &[usize]) -> Result<i64> {
    if spikes.len() < 3 {
        return Err(Error::InsufficientSpikes(spikes.len()));
    }
    spikes
        .windows(2)
        .map(|w| recover_offset(w[0] as u64, w[1] as u64))
        .try_fold(i64::MIN, |best, r| r.map(|v| best.max(v)))
}

/// Offset recovered from a spike train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub offset: i64,
    /// False when every observed resize could have grown an odd capacity, in
    /// which case the true offset may be `offset + 1`.
    pub exact: bool,
}

/// Max-over-pairs estimate plus whether the spike train pins the parity.
///
/// Visible gaps are `capacity / 2 + 16`; an odd gap followed by another
/// spike means two consecutive capacities of different parity, so one of
/// the pairs is exact.
pub fn estimate_offset(spikes: &[usize]) -> Result<OffsetEstimate> {
    let offset = recover_offset_from_spikes(spikes)?;
    let gaps: Vec<usize> = spikes.windows(2).map(|w| w[1] - w[0]).collect();
    let exact = gaps[..gaps.len() - 1].iter().any(|g| g % 2 == 1);
    Ok(OffsetEstimate { offset, exact })
}

/// Reads `push_index<TAB>duration_us` lines. Blank lines and `#` comments
/// are skipped; indices must be 0, 1, 2, ...
pub fn load_push_trace(path: impl AsRef<Path>) -> Result<PushTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut durations = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (Some(idx), Some(dur), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::format(path, n, "expected push_index<TAB>duration_us"));
        };
        let idx: usize = idx.parse().map_err(|e| Error::format(path, n, format!("push_index: {e}")))?;
        let dur: f64 = dur.parse().map_err(|e| Error::format(path, n, format!("duration_us: {e}")))?;
        if idx != durations.len() {
            return Err(Error::format(path, n, format!("expected index {}, found {idx}", durations.len())));
        }
        if !dur.is_finite() || dur < 0.0 {
            return Err(Error::format(path, n, "duration must be finite and >= 0"));
        }
        durations.push(dur);
    }
    if durations.is_empty() {
        return Err(Error::format(path, 1, "no push timings"));
    }
    Ok(PushTrace {
        durations,
        source: PushSource::Measured,
        true_offset: None,
    })
}

pub fn save_push_trace(trace: &PushTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("# push_index\tduration_us\n");
    for (i, d) in trace.durations.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{d}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Monte Carlo recovery: one simulated trace per entry of `offsets`, with
/// noise sigma `noise_frac` times the smallest spike. Trial `i` uses seed
/// `derive_seed(seed, "v8-trial", i)`.
pub fn recovery_trials(
    exec: Execution,
    offsets: &[u64],
    n_pushes: usize,
    noise_frac: f64,
    seed: u64,
) -> Vec<Result<i64>> {
    par::map_indexed(exec, offsets.len(), |i| {
        let mut m = PushModel::new(offsets[i], n_pushes);
        m.noise_sigma_us = noise_frac * m.min_spike_us();
        recover_offset_from_trace(&m.simulate(rng::derive_seed(seed, "v8-trial", i as u64))?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent forward iteration of the growth rule: visible resize
    /// indices for a shifted array, starting from internal capacity `start`.
    fn oracle_spikes(offset: u64, start: u64, n: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut c = start;
        while c < offset || ((c - offset) as usize) < n {
            if c >= offset {
                out.push((c - offset) as usize);
            }
            c = c + c / 2 + 16;
        }
        out
    }

    #[test]
    fn trials_match_across_execution_modes() {
        let offsets = [0u64, 5, 999, 4095];
        let a = recovery_trials(Execution::Sequential, &offsets, 1 << 14, 0.05, 3);
        let b = recovery_trials(Execution::Parallel, &offsets, 1 << 14, 0.05, 3);
        let a: Vec<i64> = a.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(a, b.into_iter().map(|r| r.unwrap()).collect::<Vec<_>>());
        assert_eq!(a, vec![0, 5, 999, 4095]);
    }

    #[test]
    fn growth_examples() {
        assert_eq!(v8_new_size(0), 16);
        assert_eq!(v8_new_size(16), 40);
        assert_eq!(v8_new_size(40), 76);
    }

    #[test]
    fn zero_offset_spikes_at_capacities() {
        let t = simulate_push_timings(0, 200, 1.0, 0.01, 0.0, 1).unwrap();
        assert_eq!(detect_resizes(&t).unwrap(), vec![16, 40, 76, 130]);
        assert_eq!(recover_offset_from_trace(&t).unwrap(), 0);
    }

    #[test]
    fn shifted_spikes_follow_growth() {
        let m = PushModel::new(100, 2000);
        let spikes = detect_resizes(&m.simulate(0).unwrap()).unwrap();
        assert_eq!(spikes, oracle_spikes(100, 116, 2000));
        // Visible gaps are the internal growth increments c/2 + 16.
        let caps: Vec<u64> = spikes.iter().map(|&s| s as u64 + 100).collect();
        for w in caps.windows(2) {
            assert_eq!(w[1] - w[0], w[0] / 2 + 16);
        }
    }

    #[test]
    fn empty_trace_when_no_pushes() {
        assert!(simulate_push_timings(5, 0, 1.0, 0.01, 0.0, 0).unwrap().durations.is_empty());
    }

    #[test]
    fn flat_trace_has_no_spikes() {
        let t = PushTrace { durations: vec![1.0; 64], source: PushSource::Measured, true_offset: None };
        assert_eq!(detect_resizes(&t).unwrap_err().kind(), "insufficient-spikes");
    }

    #[test]
    fn short_trace_rejected() {
        let t = PushTrace { durations: vec![1.0; 10], source: PushSource::Measured, true_offset: None };
        assert!(detect_resizes(&t).is_err());
    }

    #[test]
    fn recover_offset_examples() {
        assert_eq!(recover_offset(16, 40).unwrap(), 0);
        assert!(recover_offset(40, 40).is_err());
        // The pair observed for offset 64 comes from forward simulation.
        let spikes = oracle_spikes(64, 16 + 64, 200);
        assert_eq!(&spikes[..2], &[16, 72]);
        assert_eq!(recover_offset(16, 72).unwrap(), 64);
    }

    #[test]
    fn all_odd_capacities_are_ambiguous() {
        // Offsets 977 and 976 give identical spike trains until the
        // capacity chain of 977 reaches an even value.
        let a = oracle_spikes(977, 16 + 977, 30_000);
        let b = oracle_spikes(976, 16 + 976, 30_000);
        assert_eq!(a, b);
        let est = estimate_offset(&a).unwrap();
        assert_eq!(est, OffsetEstimate { offset: 976, exact: false });
        let longer = oracle_spikes(977, 16 + 977, 1 << 20);
        assert_ne!(longer, oracle_spikes(976, 16 + 976, 1 << 20));
        assert_eq!(estimate_offset(&longer).unwrap(), OffsetEstimate { offset: 977, exact: true });
    }

    #[test]
    fn exact_recovery_over_offset_range() {
        // With 2^20 pushes every offset in [0, 4096) reaches an even
        // capacity, so max-over-pairs is exact.
        for offset in 0..4096u64 {
            let spikes = oracle_spikes(offset, 16 + offset, 1 << 20);
            assert!(spikes.len() >= 3, "offset {offset}");
            assert_eq!(recover_offset_from_spikes(&spikes).unwrap(), offset as i64, "offset {offset}");
            // The parity certificate never claims exactness wrongly.
            let est = estimate_offset(&spikes).unwrap();
            if est.exact {
                assert_eq!(est.offset, offset as i64);
            }
        }
    }

    #[test]
    fn recovery_insensitive_to_initial_capacity() {
        // A different starting capacity only changes which spikes are seen;
        // later pairs still recover the offset.
        for start in [64u64, 301, 1000, 2047] {
            let m = PushModel { initial_capacity: Some(start + 37), ..PushModel::new(37, 20_000) };
            let got = recover_offset_from_trace(&m.simulate(3).unwrap()).unwrap();
            assert_eq!(got, 37, "start {start}");
        }
    }

    #[test]
    fn detection_stable_under_noise() {
        let mut ok = 0;
        for seed in 0..100 {
            let base = PushModel::new(seed * 13 % 700, 4000);
            let m = PushModel { noise_sigma_us: base.min_spike_us() / 10.0, ..base };
            let spikes = detect_resizes(&m.simulate(seed).unwrap()).unwrap();
            if spikes == m.resize_indices() {
                ok += 1;
            }
        }
        assert!(ok >= 99, "{ok}/100 stable");
    }

    #[test]
    fn push_trace_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        let t = simulate_push_timings(9, 100, 1.0, 0.01, 0.0, 0).unwrap();
        save_push_trace(&t, &p).unwrap();
        let back = load_push_trace(&p).unwrap();
        assert_eq!(back.durations, t.durations);
        std::fs::write(&p, "0\t1.0\n2\t1.0\n").unwrap();
        assert!(matches!(load_push_trace(&p).unwrap_err(), Error::Format { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn single_pair_identity(c in 0u64..1_000_000, o in 0u64..1_000_000) {
            prop_assume!(c >= o);
            let got = recover_offset(c - o, v8_new_size(c) - o).unwrap();
            prop_assert_eq!(got, o as i64 - (c % 2) as i64);
        }

        #[test]
        fn capacities_strictly_increase(c in 0u64..1u64 << 40) {
            prop_assert!(v8_new_size(c) > c);
        }
    }

    #[test]
    fn median_handles_even_and_odd_lengths() {
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_in_place(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn growth_factor_tends_to_three_halves() {
        let mut c = 16u64;
        for _ in 0..60 {
            c = v8_new_size(c);
        }
        let ratio = v8_new_size(c) as f64 / c as f64;
        assert!((ratio - 1.5).abs() < 1e-6, "{ratio}");
    }
}
