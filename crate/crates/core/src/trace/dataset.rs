//! Dataset container and its directory format.
//!
//! A dataset directory holds `manifest.tsv` and one `t_us<TAB>value` file per
//! trace. Manifest layout:
//!
//! ```text
//! #cachegram-dataset	1
//! #world	closed
//! #class_count	10
//! #folds	10
//! #<key>	<value>          (free-form metadata, sorted by key)
//! file	label	technique	arch	duration_ms	sample_kind	fold
//! trace_000000.tsv	site-00	occupancy	intel	30000	duration	0
//! ```
//!
//! Missing labels are written as `-`. Values use the shortest decimal
//! representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Memorygram, Sample, SampleKind, Technique};
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: u8 = 10;
/// Label of unmonitored traces in an open-world dataset.
pub const OTHER_LABEL: &str = "other";

const MAGIC: &str = "#cachegram-dataset";
const COLUMNS: &str = "file\tlabel\ttechnique\tarch\tduration_ms\tsample_kind\tfold";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    Closed,
    Open,
}

impl World {
    pub fn as_str(self) -> &'static str {
        match self {
            World::Closed => "closed",
            World::Open => "open",
        }
    }
}

impl FromStr for World {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            _ => Err(Error::InvalidArgument(format!("unknown world {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    traces: Vec<Memorygram>,
    world: World,
    class_count: usize,
    n_folds: u8,
    fold_of: Vec<u8>,
    meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(
        traces: Vec<Memorygram>,
        world: World,
        class_count: usize,
        n_folds: u8,
        fold_of: Vec<u8>,
    ) -> Result<Self> {
        if n_folds == 0 {
            return Err(Error::InvalidArgument("n_folds must be positive".into()));
        }
        if fold_of.len() != traces.len() {
            return Err(Error::FoldsMissing(format!(
                "{} fold assignments for {} traces",
                fold_of.len(),
                traces.len()
            )));
        }
        if let Some((i, f)) = fold_of.iter().enumerate().find(|(_, f)| **f >= n_folds) {
            return Err(Error::InvalidArgument(format!("trace {i}: fold {f} >= {n_folds}")));
        }
        for (i, t) in traces.iter().enumerate() {
            match (world, t.label()) {
                (_, None) => {
                    return Err(Error::InvalidArgument(format!("trace {i} has no label")));
                }
                (World::Closed, Some(OTHER_LABEL)) => {
                    return Err(Error::InvalidArgument(format!(
                        "trace {i}: label {OTHER_LABEL:?} only allowed in open world"
                    )));
                }
                _ => {}
            }
        }
        Ok(Dataset {
            traces,
            world,
            class_count,
            n_folds,
            fold_of,
            meta: BTreeMap::new(),
        })
    }

    /// Assigns folds round-robin by trace index.
    pub fn with_round_robin_folds(traces: Vec<Memorygram>, world: World, class_count: usize) -> Result<Self> {
        let folds = (0..traces.len()).map(|i| (i % DEFAULT_FOLDS as usize) as u8).collect();
        Dataset::new(traces, world, class_count, DEFAULT_FOLDS, folds)
    }

    pub fn empty(world: World) -> Self {
        Dataset {
            traces: Vec::new(),
            world,
            class_count: 0,
            n_folds: DEFAULT_FOLDS,
            fold_of: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn traces(&self) -> &[Memorygram] {
        &self.traces
    }

    pub fn world(&self) -> World {
        self.world
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn n_folds(&self) -> u8 {
        self.n_folds
    }

    pub fn fold_of(&self) -> &[u8] {
        &self.fold_of
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let (key, value) = (key.into(), value.into());
        let bad = |s: &str| s.is_empty() || s.contains(['\t', '\n', '\r']);
        if bad(&key) || value.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!("bad metadata entry {key:?}")));
        }
        if matches!(key.as_str(), "world" | "class_count" | "folds") {
            return Err(Error::InvalidArgument(format!("metadata key {key:?} is reserved")));
        }
        self.meta.insert(key, value);
        Ok(())
    }

    /// Applies `f` to every trace, keeping labels and folds.
    pub fn map_traces<F>(&self, f: F) -> Result<Dataset>
    where
        F: Fn(usize, &Memorygram) -> Result<Memorygram>,
    {
        let traces = self
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(traces, self.world, self.class_count, self.n_folds, self.fold_of.clone())?;
        ds.meta = self.meta.clone();
        Ok(ds)
    }

    /// Reorders traces (with their folds) by `order`, a permutation of indices.
    pub fn permuted(&self, order: &[usize]) -> Result<Dataset> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("order is not a permutation".into()));
        }
        let traces = order.iter().map(|&i| self.traces[i].clone()).collect();
        let folds = order.iter().map(|&i| self.fold_of[i]).collect();
        let mut ds = Dataset::new(traces, self.world, self.class_count, self.n_folds, folds)?;
        ds.meta = self.meta.clone();
        Ok(ds)
    }
}

fn trace_file_name(i: usize) -> String {
    format!("trace_{i:06}.tsv")
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{MAGIC}\t1");
    let _ = writeln!(manifest, "#world\t{}", ds.world.as_str());
    let _ = writeln!(manifest, "#class_count\t{}", ds.class_count);
    let _ = writeln!(manifest, "#folds\t{}", ds.n_folds);
    for (k, v) in &ds.meta {
        let _ = writeln!(manifest, "#{k}\t{v}");
    }
    let _ = writeln!(manifest, "{COLUMNS}");
    for (i, t) in ds.traces.iter().enumerate() {
        let file = trace_file_name(i);
        let _ = writeln!(
            manifest,
            "{file}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.label().unwrap_or("-"),
            t.technique(),
            t.arch(),
            t.duration_ms(),
            t.sample_kind(),
            ds.fold_of[i]
        );
        let mut body = String::with_capacity(t.len() * 16);
        for s in t.samples() {
            let _ = writeln!(body, "{}\t{}", s.t_us, s.value);
        }
        fs::write(dir.join(&file), body)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let ferr = |line: usize, msg: String| Error::format(&manifest_path, line, msg);

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == format!("{MAGIC}\t1") => {}
        Some((n, l)) => return Err(ferr(n, format!("unexpected header {l:?}"))),
        None => return Err(ferr(1, "empty manifest".into())),
    }

    let mut world = None;
    let mut class_count = None;
    let mut n_folds = None;
    let mut meta = BTreeMap::new();
    let mut saw_columns = false;
    let mut traces = Vec::new();
    let mut folds = Vec::new();

    for (n, line) in lines {
        if !saw_columns {
            if line == COLUMNS {
                saw_columns = true;
                continue;
            }
            let Some(rest) = line.strip_prefix('#') else {
                return Err(ferr(n, format!("expected header or column line, got {line:?}")));
            };
            let (k, v) = rest
                .split_once('\t')
                .ok_or_else(|| ferr(n, "header line without tab".into()))?;
            match k {
                "world" => world = Some(v.parse::<World>().map_err(|e| ferr(n, e.to_string()))?),
                "class_count" => class_count = Some(v.parse::<usize>().map_err(|e| ferr(n, e.to_string()))?),
                "folds" => n_folds = Some(v.parse::<u8>().map_err(|e| ferr(n, e.to_string()))?),
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(ferr(n, format!("expected 7 columns, found {}", cols.len())));
        }
        let file = cols[0];
        if file.is_empty() || file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(ferr(n, format!("bad trace file name {file:?}")));
        }
        let label = (cols[1] != "-").then(|| cols[1].to_string());
        let technique: Technique = cols[2].parse().map_err(|e: Error| ferr(n, e.to_string()))?;
        let arch = cols[3];
        let duration_ms: u64 = cols[4].parse().map_err(|e| ferr(n, format!("duration_ms: {e}")))?;
        let kind: SampleKind = cols[5].parse().map_err(|e: Error| ferr(n, e.to_string()))?;
        let fold: u8 = cols[6].parse().map_err(|e| ferr(n, format!("fold: {e}")))?;
        let samples = load_samples(&dir.join(file))?;
        let trace = Memorygram::new(samples, kind, duration_ms, technique, arch, label)
            .map_err(|e| ferr(n, e.to_string()))?;
        traces.push(trace);
        folds.push(fold);
    }
    if !saw_columns {
        return Err(ferr(text.lines().count().max(1), "missing column header".into()));
    }
    let world = world.ok_or_else(|| ferr(1, "missing #world".into()))?;
    let class_count = class_count.ok_or_else(|| ferr(1, "missing #class_count".into()))?;
    let n_folds = n_folds.unwrap_or(DEFAULT_FOLDS);
    let mut ds = Dataset::new(traces, world, class_count, n_folds, folds)
        .map_err(|e| ferr(1, e.to_string()))?;
    ds.meta = meta;
    Ok(ds)
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let n = i + 1;
            let (t, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, n, "expected t_us<TAB>value"))?;
            let t_us = t.parse::<u64>().map_err(|e| Error::format(path, n, format!("t_us: {e}")))?;
            let value = v.parse::<f64>().map_err(|e| Error::format(path, n, format!("value: {e}")))?;
            if !value.is_finite() {
                return Err(Error::format(path, n, "non-finite value"));
            }
            Ok(Sample::new(t_us, value))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mg(label: &str, values: &[f64]) -> Memorygram {
        let samples = values.iter().enumerate().map(|(i, &v)| Sample::new(i as u64 * 100, v)).collect();
        Memorygram::new(samples, SampleKind::Duration, 10, Technique::Occupancy, "intel", Some(label.into())).unwrap()
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::empty(World::Closed);
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.lines().all(|l| l.starts_with('#') || l == COLUMNS));
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn single_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::with_round_robin_folds(vec![mg("a", &[1.5, 2.25, 0.000001])], World::Closed, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let body = fs::read_to_string(dir.path().join("trace_000000.tsv")).unwrap();
        assert_eq!(body, "0\t1.5\n100\t2.25\n200\t0.000001\n");
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn fold_map_and_meta_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![mg("a", &[1.0]), mg("b", &[2.0]), mg(OTHER_LABEL, &[3.0])];
        let mut ds = Dataset::new(traces, World::Open, 2, 10, vec![7, 3, 9]).unwrap();
        ds.set_meta("seed", "7").unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.fold_of(), &[7, 3, 9]);
        assert_eq!(back.meta().get("seed").map(String::as_str), Some("7"));
        assert_eq!(back, ds);
    }

    #[test]
    fn closed_world_rejects_other() {
        assert!(Dataset::with_round_robin_folds(vec![mg(OTHER_LABEL, &[1.0])], World::Closed, 1).is_err());
    }

    #[test]
    fn malformed_sample_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::with_round_robin_folds(vec![mg("a", &[1.0, 2.0])], World::Closed, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("trace_000000.tsv"), "0\t1\n100 2\n").unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::Format { line, path, .. } => {
                assert_eq!(line, 2);
                assert!(path.ends_with("trace_000000.tsv"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_manifest_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::with_round_robin_folds(vec![mg("a", &[1.0])], World::Closed, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\tduration\t", "\tbogus\t");
        fs::write(&p, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.kind(), "format-error");
        assert!(matches!(err, Error::Format { line: 6, .. }), "{err}");
    }

    #[test]
    fn permutation_keeps_folds_with_traces() {
        let traces = vec![mg("a", &[1.0]), mg("b", &[2.0])];
        let ds = Dataset::new(traces, World::Closed, 2, 10, vec![4, 5]).unwrap();
        let p = ds.permuted(&[1, 0]).unwrap();
        assert_eq!(p.fold_of(), &[5, 4]);
        assert_eq!(p.traces()[0].label(), Some("b"));
        assert!(ds.permuted(&[0, 0]).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let trace = (
            prop::collection::vec((1u64..5000, any::<u32>()), 0..40),
            0usize..3,
            prop::sample::select(vec![Technique::Occupancy, Technique::CssPp, Technique::StringSock]),
        )
            .prop_map(|(steps, label, tech)| {
                let mut t = 0;
                let samples: Vec<Sample> = steps
                    .iter()
                    .map(|&(dt, raw)| {
                        t += dt;
                        Sample::new(t, raw as f64 / 1e3)
                    })
                    .collect();
                let dur = t / 1000 + 1;
                Memorygram::new(samples, tech.sample_kind(), dur, tech, "amd", Some(format!("site-{label}"))).unwrap()
            });
        (prop::collection::vec(trace, 0..8), any::<u64>()).prop_map(|(traces, seed)| {
            let folds = (0..traces.len()).map(|i| ((seed >> (i % 60)) % 10) as u8).collect();
            Dataset::new(traces, World::Closed, 3, 10, folds).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_round_trip(ds in arb_dataset(), raw in prop::collection::vec(any::<f64>(), 0..5)) {
            let dir = tempfile::tempdir().unwrap();
            // Arbitrary non-negative finite values survive bit-exactly too.
            let mut ds = ds;
            if let Some(t) = ds.traces().first().cloned() {
                let samples: Vec<Sample> = t.samples().iter().zip(raw.iter().chain(std::iter::repeat(&1.0)))
                    .map(|(s, v)| Sample::new(s.t_us, if v.is_finite() { v.abs() } else { 0.5 }))
                    .collect();
                let mut traces = ds.traces().to_vec();
                traces[0] = t.with_samples(samples).unwrap();
                ds = Dataset::new(traces, ds.world(), ds.class_count(), ds.n_folds(), ds.fold_of().to_vec()).unwrap();
            }
            save_dataset(&ds, dir.path()).unwrap();
            let back = load_dataset(dir.path()).unwrap();
            for (a, b) in ds.traces().iter().zip(back.traces()) {
                for (x, y) in a.samples().iter().zip(b.samples()) {
                    prop_assert_eq!(x.value.to_bits(), y.value.to_bits());
                }
            }
            prop_assert_eq!(back, ds);
        }
    }
}
