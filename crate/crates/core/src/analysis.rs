//! Baseline evaluation: featurization, k-NN ranking, k-fold cross-validation
//! and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;
use crate::trace::{inject_jitter, normalized_resample, Dataset, World, OTHER_LABEL};

/// Feature rows of a dataset, one per non-empty trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    n_points: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
    folds: Vec<u8>,
    n_folds: u8,
    label_names: Vec<String>,
    skipped: Vec<usize>,
}

impl Features {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_points..(i + 1) * self.n_points]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn folds(&self) -> &[u8] {
        &self.folds
    }

    /// Label names sorted; a label id is an index into this list.
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// Dataset indices of traces left out because they were empty.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }
}

/// Normalizes then resamples every trace to `n_points` values in [0, 1].
pub fn featurize(ds: &Dataset, n_points: usize) -> Result<Features> {
    featurize_with(Execution::default(), ds, n_points)
}

pub fn featurize_with(exec: Execution, ds: &Dataset, n_points: usize) -> Result<Features> {
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!("n_points {n_points} < 2")));
    }
    let label_names: Vec<String> = ds
        .traces()
        .iter()
        .filter_map(|t| t.label().map(str::to_string))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows = par::map_slice(exec, ds.traces(), |t| {
        if t.is_empty() {
            Ok(None)
        } else {
            normalized_resample(t, n_points).map(Some)
        }
    });
    let mut f = Features {
        n_points,
        data: Vec::with_capacity(ds.len() * n_points),
        labels: Vec::with_capacity(ds.len()),
        folds: Vec::with_capacity(ds.len()),
        n_folds: ds.n_folds(),
        label_names,
        skipped: Vec::new(),
    };
    for (i, row) in rows.into_iter().enumerate() {
        match row? {
            Some(r) => {
                let label = ds.traces()[i].label().unwrap_or_default();
                f.labels.push(f.label_names.binary_search_by(|n| n.as_str().cmp(label)).unwrap_or(0));
                f.folds.push(ds.fold_of()[i]);
                f.data.extend(r);
            }
            None => {
                log::warn!("trace {i} is empty; skipped");
                f.skipped.push(i);
            }
        }
    }
    Ok(f)
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            let d = x[j] - y[j];
            acc[j] += d * d;
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Ranks all `n_labels` labels for one query.
///
/// Labels of the `k` nearest rows come first, ordered by summed inverse
/// distance. The remaining labels follow by distance of their nearest row.
/// Ties go to the smaller label id.
fn knn_rank(train: &[(&[f64], usize)], query: &[f64], k: usize, n_labels: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, (row, _))| (sq_distance(row, query).sqrt(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut score = vec![0.0f64; n_labels];
    let mut nearest = vec![f64::INFINITY; n_labels];
    for (rank, &(d, i)) in dist.iter().enumerate() {
        let label = train[i].1;
        if rank < k {
            score[label] += 1.0 / (d + 1e-9);
        }
        if d < nearest[label] {
            nearest[label] = d;
        }
    }
    let mut ranked: Vec<usize> = (0..n_labels).collect();
    ranked.sort_by(|&a, &b| {
        let voted = (score[b] > 0.0).cmp(&(score[a] > 0.0));
        voted
            .then(score[b].total_cmp(&score[a]))
            .then(nearest[a].total_cmp(&nearest[b]))
            .then(a.cmp(&b))
    });
    ranked
}

/// Full label rankings for every test row under a `k`-nearest-neighbour vote.
pub fn knn_predict(train: &[(&[f64], usize)], test: &[&[f64]], k: usize, n_labels: usize) -> Result<Vec<Vec<usize>>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} training rows", train.len())));
    }
    if let Some((_, l)) = train.iter().find(|(_, l)| *l >= n_labels) {
        return Err(Error::InvalidArgument(format!("label id {l} >= {n_labels}")));
    }
    Ok(test.iter().map(|q| knn_rank(train, q, k, n_labels)).collect())
}

/// Anything that ranks labels for test rows given labelled training rows.
pub trait Classifier: Sync {
    fn name(&self) -> String;

    fn rank(&self, train: &[(&[f64], usize)], test: &[&[f64]], n_labels: usize) -> Result<Vec<Vec<usize>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Knn {
    pub k: usize,
}

impl Default for Knn {
    fn default() -> Self {
        Knn { k: 3 }
    }
}

impl Classifier for Knn {
    fn name(&self) -> String {
        format!("knn-k{}", self.k)
    }

    fn rank(&self, train: &[(&[f64], usize)], test: &[&[f64]], n_labels: usize) -> Result<Vec<Vec<usize>>> {
        knn_predict(train, test, self.k, n_labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier: String,
    pub world: World,
    pub n_points: usize,
    pub labels: Vec<String>,
    pub fold_n_test: Vec<usize>,
    pub fold_top1: Vec<f64>,
    pub fold_top5: Vec<f64>,
    pub top1: f64,
    pub top1_std: f64,
    pub top5: f64,
    pub top5_std: f64,
    /// Open world only: monitored vs other.
    pub f1_binary: Option<f64>,
    /// Open world only: per monitored class F1, macro-averaged.
    pub f1_macro: Option<f64>,
    /// `confusion[true][predicted]`, label ids as in `labels`.
    pub confusion: Vec<Vec<u64>>,
    pub skipped: Vec<usize>,
    pub params: BTreeMap<String, String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

struct FoldResult {
    n_test: usize,
    hits1: usize,
    hits5: usize,
    pairs: Vec<(usize, usize)>,
}

/// k-fold cross-validation over the folds carried by the dataset.
pub fn evaluate(ds: &Dataset, n_points: usize, classifier: &dyn Classifier) -> Result<EvalReport> {
    evaluate_with(Execution::default(), ds, n_points, classifier)
}

pub fn evaluate_with(exec: Execution, ds: &Dataset, n_points: usize, classifier: &dyn Classifier) -> Result<EvalReport> {
    let feats = featurize_with(exec, ds, n_points)?;
    evaluate_features(exec, &feats, ds, classifier)
}

fn evaluate_features(exec: Execution, feats: &Features, ds: &Dataset, classifier: &dyn Classifier) -> Result<EvalReport> {
    let n_folds = feats.n_folds as usize;
    if n_folds < 2 {
        return Err(Error::FoldsMissing(format!("{n_folds} fold(s); need at least 2")));
    }
    let mut per_fold = vec![0usize; n_folds];
    for &f in feats.folds() {
        per_fold[f as usize] += 1;
    }
    if let Some(f) = per_fold.iter().position(|&c| c == 0) {
        return Err(Error::FoldsMissing(format!("fold {f} has no traces")));
    }
    let n_labels = feats.label_names.len();

    let results = par::map_indexed(exec, n_folds, |fold| -> Result<FoldResult> {
        let (mut train, mut test, mut truth) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..feats.len() {
            if feats.folds[i] as usize == fold {
                test.push(feats.row(i));
                truth.push(feats.labels[i]);
            } else {
                train.push((feats.row(i), feats.labels[i]));
            }
        }
        let ranks = classifier.rank(&train, &test, n_labels)?;
        let mut r = FoldResult { n_test: test.len(), hits1: 0, hits5: 0, pairs: Vec::with_capacity(test.len()) };
        for (ranking, &t) in ranks.iter().zip(&truth) {
            let pos = ranking.iter().position(|&l| l == t);
            r.hits1 += usize::from(pos == Some(0));
            r.hits5 += usize::from(pos.is_some_and(|p| p < 5));
            r.pairs.push((t, ranking.first().copied().unwrap_or(0)));
        }
        Ok(r)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![vec![0u64; n_labels]; n_labels];
    for r in &results {
        for &(t, p) in &r.pairs {
            confusion[t][p] += 1;
        }
    }
    let fold_top1: Vec<f64> = results.iter().map(|r| r.hits1 as f64 / r.n_test as f64).collect();
    let fold_top5: Vec<f64> = results.iter().map(|r| r.hits5 as f64 / r.n_test as f64).collect();
    let (top1, top1_std) = mean_std(&fold_top1);
    let (top5, top5_std) = mean_std(&fold_top5);

    let (mut f1_binary, mut f1_macro) = (None, None);
    if ds.world() == World::Open {
        let other = feats.label_names.iter().position(|l| l == OTHER_LABEL);
        let monitored = |l: usize| Some(l) != other;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (t, row) in confusion.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                match (monitored(t), monitored(p)) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fn_ += c,
                    (false, false) => {}
                }
            }
        }
        f1_binary = Some(f1(tp, fp, fn_));
        let classes: Vec<usize> = (0..n_labels).filter(|&l| monitored(l)).collect();
        if !classes.is_empty() {
            let sum: f64 = classes
                .iter()
                .map(|&c| {
                    let tp = confusion[c][c];
                    let fn_ = confusion[c].iter().sum::<u64>() - tp;
                    let fp = confusion.iter().map(|row| row[c]).sum::<u64>() - tp;
                    f1(tp, fp, fn_)
                })
                .sum();
            f1_macro = Some(sum / classes.len() as f64);
        }
    }

    let mut params = BTreeMap::new();
    params.insert("classifier".to_string(), classifier.name());
    params.insert("n_points".to_string(), feats.n_points.to_string());
    params.insert("folds".to_string(), n_folds.to_string());
    params.insert("world".to_string(), ds.world().as_str().to_string());
    params.insert("f1_average".to_string(), "macro".to_string());
    params.insert("std".to_string(), "sample".to_string());
    for (k, v) in ds.meta() {
        params.insert(format!("data.{k}"), v.clone());
    }

    Ok(EvalReport {
        classifier: classifier.name(),
        world: ds.world(),
        n_points: feats.n_points,
        labels: feats.label_names.clone(),
        fold_n_test: results.iter().map(|r| r.n_test).collect(),
        fold_top1,
        fold_top5,
        top1,
        top1_std,
        top5,
        top5_std,
        f1_binary,
        f1_macro,
        confusion,
        skipped: feats.skipped.clone(),
        params,
    })
}

/// Evaluates the dataset once per jitter level. Trace `i` is jittered with
/// seed `derive_seed(seed, "jitter-sweep", i)`; sigma 0 leaves it untouched.
pub fn jitter_sweep(
    ds: &Dataset,
    sigmas_ms: &[f64],
    n_points: usize,
    classifier: &dyn Classifier,
    seed: u64,
) -> Result<Vec<(f64, EvalReport)>> {
    sigmas_ms
        .iter()
        .map(|&sigma| {
            let jittered = if sigma > 0.0 {
                let seeds: Vec<u64> = (0..ds.len()).map(|i| rng::derive_seed(seed, "jitter-sweep", i as u64)).collect();
                let traces = par::map_indexed(Execution::default(), ds.len(), |i| {
                    inject_jitter(&ds.traces()[i], sigma, seeds[i])
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let mut j = Dataset::new(traces, ds.world(), ds.class_count(), ds.n_folds(), ds.fold_of().to_vec())?;
                for (k, v) in ds.meta() {
                    j.set_meta(k.clone(), v.clone())?;
                }
                j.set_meta("jitter_sigma_ms", sigma.to_string())?;
                j
            } else {
                ds.clone()
            };
            evaluate(&jittered, n_points, classifier).map(|r| (sigma, r))
        })
        .collect()
}

pub const REPORT_FILE: &str = "report.tsv";
pub const FOLDS_FILE: &str = "folds.tsv";
pub const CONFUSION_FILE: &str = "confusion.tsv";
pub const JITTER_FILE: &str = "jitter.tsv";
pub const JITTER_PLOT_FILE: &str = "jitter.svg";
pub const ACCURACY_FILE: &str = "accuracy.tsv";

fn check_complete(report: &EvalReport) -> Result<()> {
    if report.fold_top1.is_empty() || report.labels.is_empty() {
        return Err(Error::EmptyReport);
    }
    Ok(())
}

/// Text of `report.tsv`: `#key<TAB>value` header lines, then
/// `metric mean stddev` rows.
pub fn report_tsv(report: &EvalReport) -> Result<String> {
    check_complete(report)?;
    let mut s = String::from("#cachegram-report\t1\n");
    for (k, v) in &report.params {
        let _ = writeln!(s, "#{k}\t{v}");
    }
    let _ = writeln!(s, "#skipped\t{}", report.skipped.len());
    s.push_str("metric\tmean\tstddev\n");
    let _ = writeln!(s, "top1\t{}\t{}", report.top1, report.top1_std);
    let _ = writeln!(s, "top5\t{}\t{}", report.top5, report.top5_std);
    if let Some(f) = report.f1_binary {
        let _ = writeln!(s, "f1_binary\t{f}\t-");
    }
    if let Some(f) = report.f1_macro {
        let _ = writeln!(s, "f1_macro\t{f}\t-");
    }
    Ok(s)
}

/// Header parameters and metric rows read back from a `report.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub params: BTreeMap<String, String>,
    /// `metric -> (mean, stddev)`; stddev is `None` when written as `-`.
    pub metrics: BTreeMap<String, (f64, Option<f64>)>,
}

impl ReportSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.0)
    }
}

pub fn parse_report_tsv(text: &str, path: &Path) -> Result<ReportSummary> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "#cachegram-report\t1")) => {}
        _ => return Err(Error::format(path, 1, "missing #cachegram-report header")),
    }
    let mut params = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    let mut in_body = false;
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        if !in_body {
            if let Some(kv) = line.strip_prefix('#') {
                let (k, v) = kv
                    .split_once('\t')
                    .ok_or_else(|| Error::format(path, n, "header line without a tab"))?;
                params.insert(k.to_string(), v.to_string());
                continue;
            }
            if line != "metric\tmean\tstddev" {
                return Err(Error::format(path, n, "expected metric\\tmean\\tstddev"));
            }
            in_body = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::format(path, n, format!("expected 3 fields, found {}", f.len())));
        }
        let mean: f64 = f[1].parse().map_err(|_| Error::format(path, n, "bad mean"))?;
        let std = match f[2] {
            "-" => None,
            s => Some(s.parse::<f64>().map_err(|_| Error::format(path, n, "bad stddev"))?),
        };
        metrics.insert(f[0].to_string(), (mean, std));
    }
    for m in ["top1", "top5"] {
        if !metrics.contains_key(m) {
            return Err(Error::format(path, text.lines().count(), format!("missing {m} row")));
        }
    }
    Ok(ReportSummary { params, metrics })
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ReportSummary> {
    let path = path.as_ref();
    parse_report_tsv(&fs::read_to_string(path)?, path)
}

/// Writes `report.tsv`, `folds.tsv` and `confusion.tsv` into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    let summary = report_tsv(report)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_FILE), summary)?;

    let mut folds = String::from("fold\tn_test\ttop1\ttop5\n");
    for (i, ((n, t1), t5)) in report.fold_n_test.iter().zip(&report.fold_top1).zip(&report.fold_top5).enumerate() {
        let _ = writeln!(folds, "{i}\t{n}\t{t1}\t{t5}");
    }
    fs::write(out.join(FOLDS_FILE), folds)?;

    let mut conf = String::from("true\\pred");
    for l in &report.labels {
        conf.push('\t');
        conf.push_str(l);
    }
    conf.push('\n');
    for (l, row) in report.labels.iter().zip(&report.confusion) {
        conf.push_str(l);
        for c in row {
            let _ = write!(conf, "\t{c}");
        }
        conf.push('\n');
    }
    fs::write(out.join(CONFUSION_FILE), conf)?;
    Ok(())
}

/// Writes `jitter.tsv` (one row per sigma) and the `jitter.svg` curve.
pub fn emit_jitter_curve(points: &[(f64, EvalReport)], out_dir: impl AsRef<Path>) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptyReport);
    }
    for (_, r) in points {
        check_complete(r)?;
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut tsv = String::from("sigma_ms\ttop1\ttop1_std\ttop5\ttop5_std\n");
    for (s, r) in points {
        let _ = writeln!(tsv, "{s}\t{}\t{}\t{}\t{}", r.top1, r.top1_std, r.top5, r.top5_std);
    }
    fs::write(out.join(JITTER_FILE), tsv)?;
    let xs: Vec<f64> = points.iter().map(|(s, _)| *s).collect();
    let series = [
        ("top-1", points.iter().map(|(_, r)| r.top1).collect::<Vec<_>>()),
        ("top-5", points.iter().map(|(_, r)| r.top5).collect()),
    ];
    fs::write(out.join(JITTER_PLOT_FILE), line_plot_svg("accuracy vs jitter", "sigma (ms)", &xs, &series))?;
    Ok(())
}

/// One cell of the technique x architecture accuracy table.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyCell {
    pub technique: String,
    pub arch: String,
    pub top1: f64,
    pub top5: f64,
}

/// Rows are techniques, columns architectures, cells `top1/top5` in percent.
pub fn accuracy_table(cells: &[AccuracyCell]) -> Result<String> {
    if cells.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut techniques: Vec<&str> = Vec::new();
    let mut archs: Vec<&str> = Vec::new();
    for c in cells {
        if !techniques.contains(&c.technique.as_str()) {
            techniques.push(&c.technique);
        }
        if !archs.contains(&c.arch.as_str()) {
            archs.push(&c.arch);
        }
    }
    let mut s = String::from("technique");
    for a in &archs {
        let _ = write!(s, "\t{a}");
    }
    s.push('\n');
    for t in &techniques {
        s.push_str(t);
        for a in &archs {
            match cells.iter().find(|c| c.technique == *t && c.arch == *a) {
                Some(c) => {
                    let _ = write!(s, "\t{:.1}/{:.1}", c.top1 * 100.0, c.top5 * 100.0);
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn emit_accuracy_table(cells: &[AccuracyCell], out_dir: impl AsRef<Path>) -> Result<()> {
    let table = accuracy_table(cells)?;
    fs::create_dir_all(out_dir.as_ref())?;
    fs::write(out_dir.as_ref().join(ACCURACY_FILE), table)?;
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<path d=\"M{PAD} {PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        H - PAD,
        W - PAD / 2.0
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

/// Line plot with y fixed to [0, 1].
pub fn line_plot_svg(title: &str, x_label: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let mut s = svg_open(title);
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (k, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| {
                format!(
                    "{:.2},{:.2}",
                    scale(x, lo, hi, PAD, W - PAD / 2.0),
                    scale(y, 0.0, 1.0, H - PAD, PAD)
                )
            })
            .collect();
        let color = colors[k % colors.len()];
        let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - PAD * 2.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    for (x, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{label}</text>",
            scale(x, lo, hi, PAD, W - PAD / 2.0),
            H - PAD + 14.0
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 8.0, escape(x_label));
    s.push_str("</svg>\n");
    s
}

/// Histogram of `values` over `bins` equal-width bins.
pub fn histogram_svg(title: &str, x_label: &str, values: &[f64], bins: usize) -> String {
    let mut s = svg_open(title);
    let bins = bins.max(1);
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let mut counts = vec![0usize; bins];
    if hi.is_finite() {
        for &v in values {
            let b = if hi > lo { (((v - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (W - 1.5 * PAD) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = c as f64 / max * (H - 2.0 * PAD);
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f77b4\"/>",
            PAD + i as f64 * bw,
            H - PAD - h,
            bw,
            h
        );
    }
    if hi.is_finite() {
        let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\">{lo:.3}</text>", H - PAD + 14.0);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>",
            W - PAD / 2.0,
            H - PAD + 14.0
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 8.0, escape(x_label));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Memorygram, Sample, SampleKind, Technique};
    use rand::Rng;

    fn trace(values: &[f64], label: &str) -> Memorygram {
        let samples = values.iter().enumerate().map(|(i, &v)| Sample::new(i as u64 * 1000, v)).collect();
        Memorygram::new(samples, SampleKind::Duration, 1000, Technique::Occupancy, "intel", Some(label.into())).unwrap()
    }

    #[test]
    fn featurize_shape_and_range() {
        let mut rng = rng::rng_for(1, "t", 0);
        let traces: Vec<_> = (0..100)
            .map(|i| {
                let v: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..10.0)).collect();
                trace(&v, &format!("c{}", i % 4))
            })
            .collect();
        let ds = Dataset::with_round_robin_folds(traces, World::Closed, 4).unwrap();
        let f = featurize(&ds, 64).unwrap();
        assert_eq!(f.len(), 100);
        assert!((0..100).all(|i| f.row(i).len() == 64 && f.row(i).iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(f, featurize_with(Execution::Sequential, &ds, 64).unwrap());
    }

    #[test]
    fn featurize_skips_empty() {
        let empty = Memorygram::new(vec![], SampleKind::Duration, 1, Technique::Occupancy, "intel", Some("a".into())).unwrap();
        let ds = Dataset::with_round_robin_folds(vec![trace(&[1.0, 2.0], "a"), empty], World::Closed, 1).unwrap();
        let f = featurize(&ds, 8).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.skipped(), &[1]);
    }

    #[test]
    fn exact_match_ranked_first() {
        let rows = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let train: Vec<(&[f64], usize)> = rows.iter().enumerate().map(|(i, r)| (r.as_slice(), i)).collect();
        let ranks = knn_predict(&train, &[rows[2].as_slice()], 3, 3).unwrap();
        assert_eq!(ranks[0][0], 2);
        assert_eq!(ranks[0].len(), 3);
    }

    #[test]
    fn k1_is_nearest_neighbour() {
        let rows = [vec![0.0], vec![1.0], vec![5.0]];
        let train: Vec<(&[f64], usize)> = vec![(&rows[0], 0), (&rows[1], 1), (&rows[2], 1)];
        let q = [0.4];
        assert_eq!(knn_predict(&train, &[&q], 1, 2).unwrap()[0][0], 0);
        // Two votes for label 1 outweigh one closer vote for 0 under k=3.
        let q = [0.49];
        assert_eq!(knn_predict(&train, &[&q], 3, 2).unwrap()[0][0], 1);
    }

    #[test]
    fn ties_go_to_smaller_label() {
        let rows = [vec![-1.0], vec![1.0]];
        let train: Vec<(&[f64], usize)> = vec![(&rows[1], 1), (&rows[0], 0)];
        let q = [0.0];
        assert_eq!(knn_predict(&train, &[&q], 2, 3).unwrap()[0], vec![0, 1, 2]);
    }

    #[test]
    fn knn_preconditions() {
        let r = [0.0];
        assert!(knn_predict(&[], &[&r], 1, 1).is_err());
        assert!(knn_predict(&[(&r, 0)], &[&r], 2, 1).is_err());
    }

    #[test]
    fn symmetric_two_class_is_separable() {
        let traces: Vec<_> = (0..40)
            .map(|i| {
                let up = i % 2 == 0;
                let v: Vec<f64> = (0..20).map(|t| if (t < 10) == up { 1.0 } else { 0.0 }).collect();
                trace(&v, if up { "up" } else { "down" })
            })
            .collect();
        let ds = Dataset::with_round_robin_folds(traces, World::Closed, 2).unwrap();
        let r = evaluate(&ds, 20, &Knn::default()).unwrap();
        assert_eq!(r.top1, 1.0);
        let rows: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![20, 20]);
    }

    #[test]
    fn random_labels_near_chance() {
        let mut rng = rng::rng_for(3, "t", 0);
        let n = 1000;
        let traces: Vec<_> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
                trace(&v, &format!("c{}", rng.random_range(0..10)))
            })
            .collect();
        let ds = Dataset::with_round_robin_folds(traces, World::Closed, 10).unwrap();
        let r = evaluate(&ds, 16, &Knn::default()).unwrap();
        let sd1 = (0.1f64 * 0.9 / n as f64).sqrt();
        let sd5 = (0.5f64 * 0.5 / n as f64).sqrt();
        assert!((r.top1 - 0.1).abs() < 3.0 * sd1 + 0.005, "{}", r.top1);
        assert!((r.top5 - 0.5).abs() < 3.0 * sd5 + 0.01, "{}", r.top5);
        assert!(r.top5 >= r.top1);
    }

    struct Constant(&'static str);

    impl Classifier for Constant {
        fn name(&self) -> String {
            "constant".into()
        }

        fn rank(&self, train: &[(&[f64], usize)], test: &[&[f64]], n_labels: usize) -> Result<Vec<Vec<usize>>> {
            let _ = train;
            // Label ids follow sorted names; the test dataset names "other" last.
            let first = if self.0 == OTHER_LABEL { n_labels - 1 } else { 0 };
            let mut order = vec![first];
            order.extend((0..n_labels).filter(|&l| l != first));
            Ok(vec![order; test.len()])
        }
    }

    #[test]
    fn always_other_hits_base_rate() {
        let mut traces = Vec::new();
        for i in 0..700 {
            traces.push(trace(&[i as f64, 1.0], &format!("m{}", i % 7)));
        }
        for i in 0..300 {
            traces.push(trace(&[i as f64, 2.0], OTHER_LABEL));
        }
        let ds = Dataset::with_round_robin_folds(traces, World::Open, 7).unwrap();
        let r = evaluate(&ds, 2, &Constant(OTHER_LABEL)).unwrap();
        assert!((r.top1 - 0.3).abs() < 1e-12);
        assert_eq!(r.f1_binary, Some(0.0));
        assert_eq!(r.f1_macro, Some(0.0));
    }

    #[test]
    fn open_world_perfect_f1() {
        let mut traces = Vec::new();
        for i in 0..200 {
            let c = i % 4;
            let v: Vec<f64> = (0..8).map(|t| if t == c * 2 { 1.0 } else { 0.0 }).collect();
            let label = if c == 3 { OTHER_LABEL.to_string() } else { format!("m{c}") };
            traces.push(trace(&v, &label));
        }
        let ds = Dataset::with_round_robin_folds(traces, World::Open, 3).unwrap();
        let r = evaluate(&ds, 8, &Knn::default()).unwrap();
        assert_eq!(r.f1_binary, Some(1.0));
        assert_eq!(r.f1_macro, Some(1.0));
    }

    #[test]
    fn missing_fold_detected() {
        let traces: Vec<_> = (0..5).map(|i| trace(&[i as f64, 0.0], "a")).collect();
        let ds = Dataset::with_round_robin_folds(traces, World::Closed, 1).unwrap();
        assert_eq!(evaluate(&ds, 2, &Knn { k: 1 }).unwrap_err().kind(), "folds-missing");
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = rng::rng_for(9, "t", 0);
        let traces: Vec<_> = (0..60)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|t| if t == i % 3 { 5.0 } else { rng.random_range(0.0..2.0) }).collect();
                trace(&v, &format!("c{}", i % 3))
            })
            .collect();
        let ds = Dataset::with_round_robin_folds(traces, World::Closed, 3).unwrap();
        let order: Vec<usize> = (0..60).rev().collect();
        let a = evaluate(&ds, 8, &Knn::default()).unwrap();
        let b = evaluate(&ds.permuted(&order).unwrap(), 8, &Knn::default()).unwrap();
        assert_eq!(a.fold_top1, b.fold_top1);
        assert_eq!(a.confusion, b.confusion);
    }

    fn sample_report() -> EvalReport {
        let traces: Vec<_> = (0..20).map(|i| trace(&[i as f64 % 2.0, 1.0], &format!("c{}", i % 2))).collect();
        let ds = Dataset::with_round_robin_folds(traces, World::Closed, 2).unwrap();
        evaluate(&ds, 2, &Knn::default()).unwrap()
    }

    #[test]
    fn report_files_deterministic() {
        let r = sample_report();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&r, a.path()).unwrap();
        emit_report(&r, b.path()).unwrap();
        for f in [REPORT_FILE, FOLDS_FILE, CONFUSION_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let text = fs::read_to_string(a.path().join(REPORT_FILE)).unwrap();
        assert!(text.contains("#f1_average\tmacro\n"));
        assert!(text.contains("\ntop1\t1\t0\n"));
    }

    #[test]
    fn report_tsv_reads_back() {
        let r = sample_report();
        let p = Path::new("report.tsv");
        let s = parse_report_tsv(&report_tsv(&r).unwrap(), p).unwrap();
        assert_eq!(s.metric("top1"), Some(r.top1));
        assert_eq!(s.metrics["top5"], (r.top5, Some(r.top5_std)));
        assert_eq!(s.params["classifier"], "knn-k3");
        let extended = "#cachegram-report\t1\n#classifier\tcnn-lstm\nmetric\tmean\tstddev\ntop1\t0.5\t0.1\ntop5\t0.9\t0.05\nf1_macro\t0.4\t-\n";
        assert_eq!(parse_report_tsv(extended, p).unwrap().metrics["f1_macro"], (0.4, None));
        assert!(parse_report_tsv("top1\t1\t0\n", p).is_err());
        assert!(parse_report_tsv("#cachegram-report\t1\nmetric\tmean\tstddev\ntop1\t1\t0\n", p).is_err());
    }

    #[test]
    fn empty_report_rejected() {
        let mut r = sample_report();
        r.fold_top1.clear();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(emit_report(&r, dir.path()).unwrap_err().kind(), "empty-report");
        assert!(emit_jitter_curve(&[], dir.path()).is_err());
    }

    #[test]
    fn jitter_curve_files() {
        let r = sample_report();
        let points: Vec<(f64, EvalReport)> = [0.0, 1.0, 5.0, 10.0, 25.0].iter().map(|&s| (s, r.clone())).collect();
        let dir = tempfile::tempdir().unwrap();
        emit_jitter_curve(&points, dir.path()).unwrap();
        let tsv = fs::read_to_string(dir.path().join(JITTER_FILE)).unwrap();
        assert_eq!(tsv.lines().count(), 6);
        let svg = fs::read_to_string(dir.path().join(JITTER_PLOT_FILE)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn accuracy_table_layout() {
        let cells = vec![
            AccuracyCell { technique: "occupancy".into(), arch: "intel".into(), top1: 0.875, top5: 0.97 },
            AccuracyCell { technique: "occupancy".into(), arch: "amd".into(), top1: 0.5, top5: 0.8 },
            AccuracyCell { technique: "css_pp".into(), arch: "intel".into(), top1: 0.1, top5: 0.2 },
        ];
        let t = accuracy_table(&cells).unwrap();
        assert_eq!(t, "technique\tintel\tamd\noccupancy\t87.5/97.0\t50.0/80.0\ncss_pp\t10.0/20.0\t-\n");
        assert!(accuracy_table(&[]).is_err());
    }

    #[test]
    fn histogram_counts_all_values() {
        let svg = histogram_svg("h", "x", &[0.0, 1.0, 1.0, 2.0], 2);
        assert_eq!(svg.matches("<rect x=").count(), 2);
        assert!(histogram_svg("h", "x", &[], 4).ends_with("</svg>\n"));
    }
}
