//! Scripted cache pressure.
//!
//! An [`ActivityProfile`] is a list of non-overlapping segments with an
//! intensity in [0, 1]. The runner walks the profile in 10 ms ticks and, in
//! every tick, touches `intensity * llc_lines` distinct lines of its own
//! LLC-sized buffer.

use std::fmt::Write as _;
use std::hint::black_box;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::trace::ArchProfile;

pub const TICK_MS: u64 = 10;
/// Capture window of a simulated page visit.
pub const VISIT_MS: u64 = 30_000;
/// Allowed overhead of the victim buffer over `llc_bytes`.
pub const FOOTPRINT_SLACK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub id: String,
    pub total_ms: u64,
    segments: Vec<Segment>,
}

impl ActivityProfile {
    pub fn new(id: impl Into<String>, total_ms: u64, segments: Vec<Segment>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidProfile(format!("bad id {id:?}")));
        }
        let mut prev_end = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start_ms >= s.end_ms {
                return Err(Error::InvalidProfile(format!("segment {i} is empty or reversed")));
            }
            if s.start_ms < prev_end {
                return Err(Error::InvalidProfile(format!("segment {i} overlaps or is out of order")));
            }
            if s.end_ms > total_ms {
                return Err(Error::InvalidProfile(format!("segment {i} ends after {total_ms} ms")));
            }
            if !(0.0..=1.0).contains(&s.intensity) {
                return Err(Error::InvalidProfile(format!("segment {i} intensity {} outside [0,1]", s.intensity)));
            }
            prev_end = s.end_ms;
        }
        Ok(ActivityProfile { id, total_ms, segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Flat profile at `intensity` over the whole window.
    pub fn constant(id: impl Into<String>, total_ms: u64, intensity: f64) -> Result<Self> {
        let segs = if total_ms > 0 && intensity > 0.0 {
            vec![Segment { start_ms: 0, end_ms: total_ms, intensity }]
        } else {
            Vec::new()
        };
        ActivityProfile::new(id, total_ms, segs)
    }

    /// Intensity at `t_ms`; zero outside segments.
    pub fn intensity_at(&self, t_ms: f64) -> f64 {
        let idx = self.segments.partition_point(|s| (s.end_ms as f64) <= t_ms);
        match self.segments.get(idx) {
            Some(s) if (s.start_ms as f64) <= t_ms => s.intensity,
            _ => 0.0,
        }
    }

    /// Mean intensity over `[from_ms, to_ms)`.
    pub fn mean_intensity(&self, from_ms: f64, to_ms: f64) -> f64 {
        if to_ms <= from_ms {
            return self.intensity_at(from_ms);
        }
        let start = self.segments.partition_point(|s| (s.end_ms as f64) <= from_ms);
        let mut area = 0.0;
        for s in &self.segments[start..] {
            let (a, b) = (s.start_ms as f64, s.end_ms as f64);
            if a >= to_ms {
                break;
            }
            area += s.intensity * (b.min(to_ms) - a.max(from_ms)).max(0.0);
        }
        area / (to_ms - from_ms)
    }

    /// TSV: `# id` and `# total_ms` headers, then `start_ms end_ms intensity`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# id\t{}\n# total_ms\t{}\nstart_ms\tend_ms\tintensity\n", self.id, self.total_ms);
        for s in &self.segments {
            let _ = writeln!(out, "{}\t{}\t{}", s.start_ms, s.end_ms, s.intensity);
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut id = None;
        let mut total = None;
        let mut segments = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.is_empty() || line == "start_ms\tend_ms\tintensity" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                match rest.split_once('\t') {
                    Some(("id", v)) => id = Some(v.to_string()),
                    Some(("total_ms", v)) => {
                        total = Some(v.parse::<u64>().map_err(|e| Error::format(path, n, e.to_string()))?)
                    }
                    _ => {}
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(path, n, "expected start_ms<TAB>end_ms<TAB>intensity"));
            }
            let p = |s: &str| s.parse::<u64>().map_err(|e| Error::format(path, n, e.to_string()));
            segments.push(Segment {
                start_ms: p(cols[0])?,
                end_ms: p(cols[1])?,
                intensity: cols[2].parse().map_err(|e| Error::format(path, n, format!("intensity: {e}")))?,
            });
        }
        let id = id.ok_or_else(|| Error::format(path, 1, "missing # id header"))?;
        let total = total.ok_or_else(|| Error::format(path, 1, "missing # total_ms header"))?;
        ActivityProfile::new(id, total, segments).map_err(|e| Error::format(path, 1, e.to_string()))
    }
}

pub fn profile_id(index: usize) -> String {
    format!("site-{index:02}")
}

/// `k` synthetic site profiles for a 30 s visit.
///
/// Profiles come in pairs: members of a pair share their coarse burst layout
/// and differ in the rhythm of their pulsed bursts (10 ms vs 20 ms on/off at
/// equal duty), so the pairs are separable only at fine time scales.
pub fn profile_library(k: usize, seed: u64) -> Result<Vec<ActivityProfile>> {
    if !(2..=100).contains(&k) {
        return Err(Error::InvalidArgument(format!("library size {k} outside [2, 100]")));
    }
    let lib: Vec<ActivityProfile> = (0..k).map(|i| library_profile(i, seed)).collect();
    for i in 0..k {
        for j in 0..i {
            if lib[i].segments == lib[j].segments {
                return Err(Error::InvalidProfile(format!("profiles {j} and {i} coincide")));
            }
        }
    }
    Ok(lib)
}

struct Burst {
    start: u64,
    len: u64,
    intensity: f64,
    pulsed: bool,
}

/// Profile `index` of the library for `seed`; independent of library size.
pub fn library_profile(index: usize, seed: u64) -> ActivityProfile {
    let family = (index / 2) as u64;
    let mut rng = rng::rng_for(seed, "profile-family", family);
    let n_bursts = rng.random_range(2..=6);
    let mut bursts: Vec<Burst> = Vec::new();
    let mut attempts = 0;
    while bursts.len() < n_bursts && attempts < 1000 {
        attempts += 1;
        let len = rng.random_range(30..=300) * TICK_MS;
        let start = rng.random_range(0..=(VISIT_MS - len) / TICK_MS) * TICK_MS;
        let clear = bursts
            .iter()
            .all(|b| start + len + 4 * TICK_MS <= b.start || b.start + b.len + 4 * TICK_MS <= start);
        if clear {
            bursts.push(Burst {
                start,
                len,
                intensity: (rng.random_range(30..=100) as f64) / 100.0,
                pulsed: rng.random_bool(0.6),
            });
        }
    }
    if !bursts.iter().any(|b| b.pulsed) {
        bursts[0].pulsed = true;
    }
    bursts.sort_by_key(|b| b.start);

    let half_period = if index % 2 == 0 { TICK_MS } else { 2 * TICK_MS };
    let mut segments = Vec::new();
    for b in &bursts {
        if !b.pulsed {
            segments.push(Segment { start_ms: b.start, end_ms: b.start + b.len, intensity: b.intensity });
            continue;
        }
        let mut t = b.start;
        while t < b.start + b.len {
            let end = (t + half_period).min(b.start + b.len);
            segments.push(Segment { start_ms: t, end_ms: end, intensity: b.intensity });
            t += 2 * half_period;
        }
    }
    ActivityProfile::new(profile_id(index), VISIT_MS, segments).expect("library profiles are valid by construction")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VictimStats {
    pub ticks: u64,
    pub active_ticks: u64,
    pub lines_touched: u64,
}

/// Owned LLC-sized buffer plus a fixed line visiting order.
pub struct Victim {
    buf: Vec<u8>,
    order: Vec<u32>,
    cursor: usize,
    line_bytes: usize,
}

impl Victim {
    pub fn new(arch: &ArchProfile, seed: u64) -> Result<Self> {
        arch.validate()?;
        let len = arch.llc_bytes as usize;
        let mut buf = Vec::new();
        buf.try_reserve_exact(len).map_err(|_| Error::OutOfMemory(len))?;
        // Writing every byte commits the pages up front.
        buf.resize(len, 1u8);
        let lines = arch.lines() as u32;
        let mut order: Vec<u32> = (0..lines).collect();
        order.shuffle(&mut rng::rng_for(seed, "victim", 0));
        Ok(Victim { buf, order, cursor: 0, line_bytes: arch.line_bytes as usize })
    }

    pub fn footprint_bytes(&self) -> usize {
        self.buf.capacity()
    }

    pub fn lines(&self) -> usize {
        self.order.len()
    }

    /// Read-modify-writes `count` distinct lines, continuing where the last
    /// call stopped.
    pub fn touch(&mut self, count: usize) -> usize {
        let count = count.min(self.order.len());
        for _ in 0..count {
            let off = self.order[self.cursor] as usize * self.line_bytes;
            let b = &mut self.buf[off];
            *b = black_box(b.wrapping_add(1));
            self.cursor += 1;
            if self.cursor == self.order.len() {
                self.cursor = 0;
            }
        }
        count
    }

    /// Plays `profile` in real time until it ends or `stop` is set.
    pub fn run(&mut self, profile: &ActivityProfile, stop: &AtomicBool) -> VictimStats {
        let start = Instant::now();
        let mut stats = VictimStats::default();
        let ticks = profile.total_ms.div_ceil(TICK_MS);
        for tick in 0..ticks {
            if stop.load(Ordering::Relaxed) {
                break;
            }
            let t_ms = tick * TICK_MS;
            let intensity = profile.intensity_at(t_ms as f64);
            stats.ticks += 1;
            if intensity > 0.0 {
                stats.active_ticks += 1;
                let n = (intensity * self.order.len() as f64).round() as usize;
                stats.lines_touched += self.touch(n) as u64;
            }
            let next = start + Duration::from_millis(t_ms + TICK_MS);
            if let Some(wait) = next.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        stats
    }
}

/// Runs `profile` to completion against a fresh buffer.
pub fn run_victim(profile: &ActivityProfile, arch: &ArchProfile, seed: u64) -> Result<VictimStats> {
    let mut v = Victim::new(arch, seed)?;
    Ok(v.run(profile, &AtomicBool::new(false)))
}
