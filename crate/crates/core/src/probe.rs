//! Native cache-occupancy prober.
//!
//! An [`EvictionBuffer`] holds one chain element per cache line of an
//! LLC-sized region. Each element stores the index of the next one, so a sweep
//! is a dependent pointer chase that the CPU cannot reorder or prefetch.
//! Pages are visited in random order and lines within a page in a random
//! order with no two consecutive lines adjacent.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{quantize, ArchProfile, Memorygram, Sample, Technique};

pub const PAGE_BYTES: usize = 4096;
pub const MIN_LLC_BYTES: u64 = 1 << 20;
const WORD: usize = std::mem::size_of::<u64>();

pub struct EvictionBuffer {
    storage: Vec<u64>,
    /// Word index of the page-aligned start inside `storage`.
    base: usize,
    head: usize,
    n_lines: usize,
    line_words: usize,
}

impl EvictionBuffer {
    pub fn build(arch: &ArchProfile, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.llc_bytes < MIN_LLC_BYTES {
            return Err(Error::InvalidArgument(format!(
                "llc_bytes {} below the {} byte minimum",
                arch.llc_bytes, MIN_LLC_BYTES
            )));
        }
        let line_bytes = arch.line_bytes as usize;
        if line_bytes % WORD != 0 || PAGE_BYTES % line_bytes != 0 {
            return Err(Error::InvalidArgument(format!("unsupported line size {line_bytes}")));
        }
        let bytes = arch.llc_bytes as usize;
        let words = (bytes + PAGE_BYTES) / WORD;
        let mut storage: Vec<u64> = Vec::new();
        storage.try_reserve_exact(words).map_err(|_| Error::OutOfMemory(bytes + PAGE_BYTES))?;
        storage.resize(words, 0);
        let addr = storage.as_ptr() as usize;
        let base = (PAGE_BYTES - addr % PAGE_BYTES) % PAGE_BYTES / WORD;

        let n_lines = bytes / line_bytes;
        let order = chain_order(n_lines, PAGE_BYTES / line_bytes, seed);
        let line_words = line_bytes / WORD;
        for (i, &line) in order.iter().enumerate() {
            let next = order[(i + 1) % n_lines];
            storage[base + line * line_words] = (base + next * line_words) as u64;
        }
        Ok(EvictionBuffer { storage, base, head: base + order[0] * line_words, n_lines, line_words })
    }

    pub fn lines(&self) -> usize {
        self.n_lines
    }

    pub fn footprint_bytes(&self) -> usize {
        self.storage.capacity() * WORD
    }

    /// Line indices in chain order, starting at the head.
    pub fn visit_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_lines);
        let mut idx = self.head;
        for _ in 0..self.n_lines {
            out.push((idx - self.base) / self.line_words);
            idx = self.storage[idx] as usize;
        }
        out
    }

    /// True when walking `lines()` steps from the head returns to the head.
    pub fn is_single_cycle(&self) -> bool {
        let mut seen = vec![false; self.n_lines];
        let mut idx = self.head;
        for _ in 0..self.n_lines {
            let line = (idx - self.base) / self.line_words;
            if seen[line] {
                return false;
            }
            seen[line] = true;
            idx = self.storage[idx] as usize;
        }
        idx == self.head
    }

    /// Walks the whole chain once; returns the element reached (the head).
    #[inline(never)]
    fn walk(&self) -> usize {
        let s = self.storage.as_slice();
        let mut idx = self.head;
        for _ in 0..self.n_lines {
            idx = s[idx] as usize;
        }
        idx
    }

    /// Wall time of one full traversal, in microseconds.
    pub fn sweep(&self) -> f64 {
        fence();
        let start = Instant::now();
        fence();
        let end_idx = self.walk();
        // The end timestamp depends on the last load through this fence.
        black_box(end_idx);
        fence();
        let elapsed = start.elapsed();
        fence();
        quantize(elapsed.as_nanos() as f64 / 1000.0).max(0.001)
    }
}

#[inline(always)]
fn fence() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: lfence has no memory-safety preconditions.
    unsafe {
        std::arch::x86_64::_mm_lfence()
    };
    std::sync::atomic::compiler_fence(std::sync::atomic::Ordering::SeqCst);
}

fn adjacent(a: usize, b: usize) -> bool {
    a.abs_diff(b) == 1
}

/// Permuted page order, each page's lines permuted so that no step of the
/// resulting cycle moves to a neighbouring line.
fn chain_order(n_lines: usize, lines_per_page: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::rng_for(seed, "eviction-chain", 0);
    let n_pages = n_lines.div_ceil(lines_per_page);
    let mut pages: Vec<usize> = (0..n_pages).collect();
    pages.shuffle(&mut rng);
    let mut order = Vec::with_capacity(n_lines);
    for (k, &p) in pages.iter().enumerate() {
        let lo = p * lines_per_page;
        let mut lines: Vec<usize> = (lo..(lo + lines_per_page).min(n_lines)).collect();
        let prev = order.last().copied();
        // The last page also closes the cycle back to the head.
        let first = if k + 1 == n_pages { order.first().copied() } else { None };
        for _ in 0..10_000 {
            lines.shuffle(&mut rng);
            let inner = lines.windows(2).all(|w| !adjacent(w[0], w[1]));
            let joins = prev.is_none_or(|q| !adjacent(q, lines[0]))
                && first.is_none_or(|f| !adjacent(lines[lines.len() - 1], f));
            if inner && joins {
                break;
            }
        }
        order.extend(lines);
    }
    order
}

/// Whether hardware measurements are meaningful on this machine:
/// at least two CPUs (victim and prober need their own cores) and an
/// LLC between 4 and 64 MiB. Larger (server) caches make a single sweep
/// take hundreds of milliseconds. `CACHEGRAM_HW_TESTS=1` forces, `=0`
/// disables.
pub fn hardware_ready() -> std::result::Result<ArchProfile, String> {
    match std::env::var("CACHEGRAM_HW_TESTS").as_deref() {
        Ok("0") => return Err("disabled by CACHEGRAM_HW_TESTS=0".into()),
        Ok("1") => return ArchProfile::host().map_err(|e| e.to_string()),
        _ => {}
    }
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if cpus < 2 {
        return Err(format!("{cpus} CPU available, need 2"));
    }
    let host = ArchProfile::host().map_err(|e| e.to_string())?;
    if host.llc_bytes < 4 << 20 {
        return Err(format!("LLC {} bytes, need 4 MiB", host.llc_bytes));
    }
    if host.llc_bytes > 64 << 20 {
        return Err(format!("LLC {} MiB, sweeps too slow above 64 MiB", host.llc_bytes >> 20));
    }
    Ok(host)
}

/// Single-threaded prober bound to one buffer.
pub struct Prober {
    buffer: EvictionBuffer,
    arch: ArchProfile,
}

impl Prober {
    pub fn new(arch: &ArchProfile, seed: u64) -> Result<Self> {
        Ok(Prober { buffer: EvictionBuffer::build(arch, seed)?, arch: arch.clone() })
    }

    pub fn buffer(&self) -> &EvictionBuffer {
        &self.buffer
    }

    pub fn sweep(&self) -> f64 {
        self.buffer.sweep()
    }

    /// One sweep per period. A sweep that overruns its period is followed
    /// immediately by the next one; timestamps are the actual start times.
    pub fn capture_occupancy(&self, duration_ms: u64, period_ms: f64) -> Result<Memorygram> {
        if duration_ms > 0 && !(period_ms > 0.0 && period_ms <= duration_ms as f64) {
            return Err(Error::InvalidArgument(format!("period {period_ms} ms outside (0, {duration_ms}]")));
        }
        let limit = Duration::from_millis(duration_ms);
        let period = Duration::from_secs_f64(period_ms.max(0.0) / 1000.0);
        let mut samples: Vec<Sample> = Vec::new();
        let start = Instant::now();
        let mut next = Duration::ZERO;
        loop {
            let mut now = start.elapsed();
            if now < next {
                wait_until(start, next);
                now = start.elapsed();
            }
            if now >= limit {
                break;
            }
            let mut t_us = now.as_micros() as u64;
            if let Some(prev) = samples.last() {
                t_us = t_us.max(prev.t_us + 1);
            }
            if t_us >= duration_ms * 1000 {
                break;
            }
            let d = self.sweep();
            samples.push(Sample::new(t_us, d));
            next = now + period;
        }
        Memorygram::new(
            samples,
            Technique::Occupancy.sample_kind(),
            duration_ms,
            Technique::Occupancy,
            self.arch.name.clone(),
            None,
        )
    }

    /// Counts sweeps that start and finish inside each `window_ms` window.
    pub fn capture_sweep_count(&self, duration_ms: u64, window_ms: u64) -> Result<Memorygram> {
        if window_ms < 1 {
            return Err(Error::InvalidArgument("window_ms must be >= 1".into()));
        }
        let n_windows = (duration_ms / window_ms) as usize;
        let mut counts = vec![0u64; n_windows];
        let window_us = window_ms as u128 * 1000;
        let limit = n_windows as u128 * window_us;
        let start = Instant::now();
        loop {
            let s = start.elapsed().as_micros();
            if s >= limit {
                break;
            }
            black_box(self.buffer.walk());
            let e = start.elapsed().as_micros();
            let w = s / window_us;
            if e / window_us == w && e < limit {
                counts[w as usize] += 1;
            }
        }
        let samples = counts
            .iter()
            .enumerate()
            .map(|(w, &c)| Sample::new(w as u64 * window_ms * 1000, c as f64))
            .collect();
        Memorygram::new(
            samples,
            Technique::SweepCount.sample_kind(),
            duration_ms,
            Technique::SweepCount,
            self.arch.name.clone(),
            None,
        )
    }
}

fn wait_until(start: Instant, at: Duration) {
    loop {
        let now = start.elapsed();
        if now >= at {
            return;
        }
        let left = at - now;
        if left > Duration::from_micros(200) {
            std::thread::sleep(left - Duration::from_micros(100));
        } else {
            std::hint::spin_loop();
        }
    }
}

pub fn capture_occupancy(arch: &ArchProfile, duration_ms: u64, period_ms: f64, seed: u64) -> Result<Memorygram> {
    Prober::new(arch, seed)?.capture_occupancy(duration_ms, period_ms)
}

pub fn capture_sweep_count(arch: &ArchProfile, duration_ms: u64, window_ms: u64, seed: u64) -> Result<Memorygram> {
    Prober::new(arch, seed)?.capture_sweep_count(duration_ms, window_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(mib: u64) -> ArchProfile {
        ArchProfile::new("t", mib << 20, 64, 1, [1.0; 5]).unwrap()
    }

    #[test]
    fn chain_covers_every_line_once() {
        let b = EvictionBuffer::build(&ArchProfile::intel(), 1).unwrap();
        assert_eq!(b.lines(), 98_304);
        assert!(b.is_single_cycle());
        let mut order = b.visit_order();
        order.sort_unstable();
        assert!(order.iter().enumerate().all(|(i, &l)| i == l));
    }

    #[test]
    fn no_sequential_successors() {
        let b = EvictionBuffer::build(&arch(1), 3).unwrap();
        let order = b.visit_order();
        for i in 0..order.len() {
            let next = order[(i + 1) % order.len()];
            assert!(!adjacent(order[i], next), "step {i}: {} -> {next}", order[i]);
        }
    }

    #[test]
    fn pages_visited_contiguously() {
        let b = EvictionBuffer::build(&arch(1), 4).unwrap();
        let pages: Vec<usize> = b.visit_order().iter().map(|l| l / 64).collect();
        let changes = pages.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, pages.len() / 64 - 1);
    }

    #[test]
    fn seeds_change_order() {
        let a = EvictionBuffer::build(&arch(1), 1).unwrap().visit_order();
        let b = EvictionBuffer::build(&arch(1), 2).unwrap().visit_order();
        let c = EvictionBuffer::build(&arch(1), 1).unwrap().visit_order();
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn footprint_and_alignment() {
        let a = arch(1);
        let b = EvictionBuffer::build(&a, 0).unwrap();
        assert!(b.footprint_bytes() <= a.llc_bytes as usize + PAGE_BYTES);
        assert_eq!((b.storage.as_ptr() as usize + b.base * WORD) % PAGE_BYTES, 0);
    }

    #[test]
    fn rejects_small_llc() {
        let a = ArchProfile::new("t", 512 << 10, 64, 1, [1.0; 5]).unwrap();
        assert!(EvictionBuffer::build(&a, 0).is_err());
    }

    #[test]
    fn sweeps_take_time() {
        let b = EvictionBuffer::build(&arch(1), 0).unwrap();
        let d: Vec<f64> = (0..5).map(|_| b.sweep()).collect();
        assert!(d.iter().all(|&x| x > 0.0));
        assert!(d.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn occupancy_capture_shape() {
        let p = Prober::new(&arch(1), 0).unwrap();
        let t = p.capture_occupancy(200, 3.0).unwrap();
        assert!(t.len() > 20 && t.len() <= 67, "{}", t.len());
        assert!(t.samples().windows(2).all(|w| w[0].t_us < w[1].t_us));
        assert!(p.capture_occupancy(0, 3.0).unwrap().is_empty());
        assert!(p.capture_occupancy(10, 0.0).is_err());
    }

    #[test]
    fn sweep_count_capture_shape() {
        let p = Prober::new(&arch(1), 0).unwrap();
        let t = p.capture_sweep_count(300, 100).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.values().all(|v| v >= 1.0 && v.fract() == 0.0));
        assert!(p.capture_sweep_count(100, 0).is_err());
    }
}
