//! Deterministic channel simulator.
//!
//! Maps an [`ActivityProfile`] to a memorygram for each technique with a
//! linear contention model:
//!
//! ```text
//! sweep_time(t) = base_sweep_us + contention_us_per_line * occupied_lines(t) + N(0, noise_sigma_us)
//! ```
//!
//! plus transport effects: DNS race binarization and a stop-and-wait link
//! that batches probe packets behind outstanding acknowledgements.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, Pcg64};
use crate::trace::{
    default_n_points, inject_jitter, quantize, ArchProfile, Dataset, Memorygram, Sample, Technique, World,
    OTHER_LABEL,
};
use crate::victim::{library_profile, profile_library, ActivityProfile, VISIT_MS};

/// Minimum spacing of packets released together on the stop-and-wait link.
pub const TOR_PACKET_SPACING_MS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Direct,
    TorLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub arch: ArchProfile,
    pub base_sweep_us: f64,
    pub contention_us_per_line: f64,
    pub noise_sigma_us: f64,
    /// Sample period per technique, in [`Technique::ALL`] order.
    pub period_ms: [f64; 5],
    pub dns_rtt_ms: f64,
    pub dns_rtt_sigma_ms: f64,
    pub transport: Transport,
    pub tor_rtt_ms: f64,
    pub tor_jitter_ms: f64,
    /// Sweeps per probe packet.
    pub decimation_n: u32,
    /// Each visit is shifted in time by U(-visit_shift_ms, visit_shift_ms).
    pub visit_shift_ms: f64,
    /// Each visit scales intensities by 1 + U(-intensity_spread, intensity_spread).
    pub intensity_spread: f64,
    /// Timestamp jitter applied to the finished trace.
    pub jitter_sigma_ms: f64,
    pub duration_ms: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams::for_arch(ArchProfile::intel())
    }
}

impl SimParams {
    pub fn for_arch(arch: ArchProfile) -> Self {
        SimParams {
            period_ms: arch.technique_resolution_ms,
            arch,
            base_sweep_us: 1500.0,
            contention_us_per_line: 0.01,
            noise_sigma_us: 50.0,
            dns_rtt_ms: 2.0,
            dns_rtt_sigma_ms: 0.3,
            transport: Transport::Direct,
            tor_rtt_ms: 120.0,
            tor_jitter_ms: 5.0,
            decimation_n: 1,
            visit_shift_ms: 30.0,
            intensity_spread: 0.05,
            jitter_sigma_ms: 0.0,
            duration_ms: VISIT_MS,
        }
    }

    /// Stop-and-wait transport with one probe packet every 72 sweeps.
    pub fn tor_like(arch: ArchProfile) -> Self {
        SimParams {
            transport: Transport::TorLike,
            decimation_n: 72,
            ..SimParams::for_arch(arch)
        }
    }

    /// Every stochastic term set to zero.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma_us = 0.0;
        self.dns_rtt_sigma_ms = 0.0;
        self.tor_jitter_ms = 0.0;
        self.visit_shift_ms = 0.0;
        self.intensity_spread = 0.0;
        self.jitter_sigma_ms = 0.0;
        self
    }

    pub fn period_of(&self, technique: Technique) -> f64 {
        let idx = Technique::ALL.iter().position(|t| *t == technique).unwrap_or(0);
        self.period_ms[idx]
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let reals = [
            ("base_sweep_us", self.base_sweep_us),
            ("contention_us_per_line", self.contention_us_per_line),
            ("noise_sigma_us", self.noise_sigma_us),
            ("dns_rtt_ms", self.dns_rtt_ms),
            ("dns_rtt_sigma_ms", self.dns_rtt_sigma_ms),
            ("tor_rtt_ms", self.tor_rtt_ms),
            ("tor_jitter_ms", self.tor_jitter_ms),
            ("visit_shift_ms", self.visit_shift_ms),
            ("intensity_spread", self.intensity_spread),
            ("jitter_sigma_ms", self.jitter_sigma_ms),
        ];
        for (name, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.period_ms.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidArgument("periods must be positive".into()));
        }
        if self.decimation_n < 1 {
            return Err(Error::InvalidArgument("decimation_n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-visit view of a profile: shifted, scaled, noisy sweep times.
struct Visit<'a> {
    profile: &'a ActivityProfile,
    params: &'a SimParams,
    shift_ms: f64,
    scale: f64,
    lines: f64,
    noise: Option<Normal<f64>>,
}

impl<'a> Visit<'a> {
    fn new(profile: &'a ActivityProfile, params: &'a SimParams, rng: &mut Pcg64) -> Result<Self> {
        let shift_ms = if params.visit_shift_ms > 0.0 {
            rng.random_range(-params.visit_shift_ms..=params.visit_shift_ms)
        } else {
            0.0
        };
        let scale = if params.intensity_spread > 0.0 {
            1.0 + rng.random_range(-params.intensity_spread..=params.intensity_spread)
        } else {
            1.0
        };
        let noise = normal(params.noise_sigma_us)?;
        Ok(Visit { profile, params, shift_ms, scale, lines: params.arch.lines() as f64, noise })
    }

    fn occupied_lines(&self, t_ms: f64) -> f64 {
        (self.profile.intensity_at(t_ms - self.shift_ms) * self.scale).clamp(0.0, 1.0) * self.lines
    }

    fn mean_occupied_lines(&self, from_ms: f64, to_ms: f64) -> f64 {
        let m = self.profile.mean_intensity(from_ms - self.shift_ms, to_ms - self.shift_ms);
        (m * self.scale).clamp(0.0, 1.0) * self.lines
    }

    fn sweep_us(&self, lines: f64, rng: &mut Pcg64) -> f64 {
        let n = self.noise.as_ref().map_or(0.0, |d| d.sample(rng));
        (self.params.base_sweep_us + self.params.contention_us_per_line * lines + n).max(1.0)
    }

    /// Sum of `n` back-to-back sweeps starting at `t_ms`.
    fn sweeps_us(&self, t_ms: f64, n: u32, rng: &mut Pcg64) -> f64 {
        let mut total = 0.0;
        for _ in 0..n {
            total += self.sweep_us(self.occupied_lines(t_ms + total / 1000.0), rng);
        }
        total
    }
}

fn normal(sigma: f64) -> Result<Option<Normal<f64>>> {
    if sigma > 0.0 {
        Ok(Some(Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?))
    } else {
        Ok(None)
    }
}

/// Simulates one visit of `profile` as observed through `technique`.
pub fn simulate_trace(
    profile: &ActivityProfile,
    technique: Technique,
    params: &SimParams,
    seed: u64,
) -> Result<Memorygram> {
    params.validate()?;
    let mut rng = rng::rng_for(seed, "sim", 0);
    let visit = Visit::new(profile, params, &mut rng)?;
    let window_us = params.duration_ms as f64 * 1000.0;
    let remote = matches!(technique, Technique::StringSock | Technique::CssPp);

    let samples = if remote && params.transport == Transport::TorLike {
        tor_samples(&visit, params, window_us, &mut rng, seed)?
    } else {
        let period_us = params.period_of(technique) * 1000.0;
        let dns = normal(params.dns_rtt_sigma_ms * 1000.0)?;
        let mut samples = Vec::new();
        for i in 0.. {
            let t_us = (i as f64 * period_us).round();
            if t_us >= window_us {
                break;
            }
            let t_ms = t_us / 1000.0;
            let value = match technique {
                Technique::Occupancy => visit.sweep_us(visit.occupied_lines(t_ms), &mut rng),
                Technique::SweepCount => {
                    let lines = visit.mean_occupied_lines(t_ms, t_ms + period_us / 1000.0);
                    (period_us / visit.sweep_us(lines, &mut rng)).floor()
                }
                Technique::DnsRacing => {
                    let sweep = visit.sweep_us(visit.occupied_lines(t_ms), &mut rng);
                    let rtt = params.dns_rtt_ms * 1000.0 + dns.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                    if sweep > rtt.max(0.0) {
                        1.0
                    } else {
                        0.0
                    }
                }
                Technique::StringSock | Technique::CssPp => visit.sweeps_us(t_ms, params.decimation_n, &mut rng),
            };
            samples.push(Sample::new(t_us as u64, quantize(value)));
        }
        samples
    };

    let trace = Memorygram::new(
        samples,
        technique.sample_kind(),
        params.duration_ms,
        technique,
        params.arch.name.clone(),
        Some(profile.id.clone()),
    )?;
    if params.jitter_sigma_ms > 0.0 {
        inject_jitter(&trace, params.jitter_sigma_ms, rng::derive_seed(seed, "sim-jitter", 0))
    } else {
        Ok(trace)
    }
}

fn tor_samples(
    visit: &Visit<'_>,
    params: &SimParams,
    window_us: f64,
    rng: &mut Pcg64,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut gaps_ms = Vec::new();
    let mut sent_us = 0.0;
    while sent_us < window_us {
        let gap = visit.sweeps_us(sent_us / 1000.0, params.decimation_n, rng);
        sent_us += gap;
        gaps_ms.push(gap / 1000.0);
    }
    let observed = simulate_tor_latency(&gaps_ms, params, rng::derive_seed(seed, "tor", 0))?;
    let mut samples = Vec::with_capacity(observed.len());
    let mut t_us = 0u64;
    for g in observed {
        let g_us = (g * 1000.0).round().max(1.0) as u64;
        t_us += g_us;
        if t_us as f64 >= window_us {
            break;
        }
        samples.push(Sample::new(t_us, quantize(g * 1000.0)));
    }
    Ok(samples)
}

/// Passes probe gaps (ms) through a stop-and-wait link.
///
/// Probe `i` is generated at the running sum of the gaps. A probe generated
/// while the previous flight is unacknowledged waits for the acknowledgement
/// (one `tor_rtt_ms` after that flight left) and leaves with every other
/// probe generated meanwhile. The result has three parts: gaps of
/// `tor_rtt_ms` for the first probe of a buffered flight, near-zero gaps for
/// the rest of that flight, and jittered pass-through gaps for probes sent on
/// an idle link.
pub fn simulate_tor_latency(gaps_ms: &[f64], params: &SimParams, seed: u64) -> Result<Vec<f64>> {
    if params.transport != Transport::TorLike {
        return Err(Error::InvalidArgument("simulate_tor_latency needs the tor_like transport".into()));
    }
    params.validate()?;
    let rtt = params.tor_rtt_ms;
    let jitter = normal(params.tor_jitter_ms)?;
    let mut rng = rng::rng_for(seed, "tor-latency", 0);

    let mut out = Vec::with_capacity(gaps_ms.len());
    let mut generated = 0.0;
    let mut ack_at = f64::NEG_INFINITY;
    // Departure time and jitter of the flight collecting buffered probes.
    let mut pending: Option<(f64, f64)> = None;
    let mut last_arrival = 0.0;
    for &gap in gaps_ms {
        generated += gap.max(0.0);
        if let Some((dep, _)) = pending {
            if generated >= dep {
                ack_at = dep + rtt;
                pending = None;
            }
        }
        let arrival = match pending {
            Some((dep, j)) => dep + j,
            None => {
                let j = jitter.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                if generated >= ack_at {
                    ack_at = generated + rtt;
                    generated + j
                } else {
                    pending = Some((ack_at, j));
                    ack_at + j
                }
            }
        };
        let arrival = arrival.max(last_arrival + TOR_PACKET_SPACING_MS);
        out.push(arrival - last_arrival);
        last_arrival = arrival;
    }
    Ok(out)
}

fn dataset_meta(ds: &mut Dataset, technique: Technique, params: &SimParams, seed: u64) -> Result<()> {
    ds.set_meta("generator", "simulate")?;
    ds.set_meta("seed", seed.to_string())?;
    ds.set_meta("technique", technique.as_str())?;
    ds.set_meta("arch", params.arch.name.clone())?;
    ds.set_meta("rng", rng::RNG_NAME)?;
    ds.set_meta(
        "n_points",
        default_n_points(params.duration_ms, params.period_of(technique)).to_string(),
    )?;
    ds.set_meta(
        "sim_params",
        serde_json::to_string(params).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    )?;
    Ok(())
}

/// Closed-world benchmark: `k` library profiles x `traces_per_class` visits.
///
/// Trace `i` belongs to class `i / traces_per_class`, is simulated with seed
/// `derive_seed(seed, "trace", i)` and lands in fold `i % 10`.
pub fn build_benchmark(
    k: usize,
    traces_per_class: usize,
    technique: Technique,
    params: &SimParams,
    seed: u64,
) -> Result<Dataset> {
    build_benchmark_with(Execution::default(), k, traces_per_class, technique, params, seed)
}

pub fn build_benchmark_with(
    exec: Execution,
    k: usize,
    traces_per_class: usize,
    technique: Technique,
    params: &SimParams,
    seed: u64,
) -> Result<Dataset> {
    params.validate()?;
    let profiles = profile_library(k, seed)?;
    let traces = par::map_indexed(exec, k * traces_per_class, |i| {
        simulate_trace(&profiles[i / traces_per_class], technique, params, rng::derive_seed(seed, "trace", i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::with_round_robin_folds(traces, World::Closed, k)?;
    dataset_meta(&mut ds, technique, params, seed)?;
    Ok(ds)
}

/// Open-world benchmark: the closed-world traces followed by `n_other`
/// visits to distinct unmonitored profiles, labelled [`OTHER_LABEL`].
pub fn build_open_world(
    k: usize,
    traces_per_class: usize,
    n_other: usize,
    technique: Technique,
    params: &SimParams,
    seed: u64,
) -> Result<Dataset> {
    let closed = build_benchmark(k, traces_per_class, technique, params, seed)?;
    let base = closed.len();
    let others = par::map_indexed(Execution::default(), n_other, |m| {
        let profile = library_profile(k + m, seed);
        simulate_trace(&profile, technique, params, rng::derive_seed(seed, "trace", (base + m) as u64))
            .and_then(|t| t.with_label(Some(OTHER_LABEL.to_string())))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut traces = closed.traces().to_vec();
    traces.extend(others);
    let mut ds = Dataset::with_round_robin_folds(traces, World::Open, k)?;
    dataset_meta(&mut ds, technique, params, seed)?;
    ds.set_meta("n_other", n_other.to_string())?;
    Ok(ds)
}
