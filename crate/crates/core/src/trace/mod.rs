//! Memorygrams: timestamped probe measurements over a capture window.

mod arch;
mod dataset;
mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use arch::ArchProfile;
pub use dataset::{load_dataset, save_dataset, Dataset, World, DEFAULT_FOLDS, OTHER_LABEL};
pub use ops::{default_n_points, inject_jitter, normalize, normalized_resample, resample};

/// Measurement techniques that produce memorygrams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Occupancy,
    SweepCount,
    DnsRacing,
    StringSock,
    CssPp,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::Occupancy,
        Technique::SweepCount,
        Technique::DnsRacing,
        Technique::StringSock,
        Technique::CssPp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Technique::Occupancy => "occupancy",
            Technique::SweepCount => "sweep_count",
            Technique::DnsRacing => "dns_racing",
            Technique::StringSock => "string_sock",
            Technique::CssPp => "css_pp",
        }
    }

    /// Kind of value a trace of this technique carries.
    pub fn sample_kind(self) -> SampleKind {
        match self {
            Technique::Occupancy => SampleKind::Duration,
            Technique::SweepCount | Technique::DnsRacing => SampleKind::SweepCount,
            Technique::StringSock => SampleKind::WsGap,
            Technique::CssPp => SampleKind::DnsGap,
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "occupancy" => Ok(Technique::Occupancy),
            "sweep" | "sweep_count" => Ok(Technique::SweepCount),
            "dns" | "dns_racing" => Ok(Technique::DnsRacing),
            "sns" | "string_sock" | "string_and_sock" => Ok(Technique::StringSock),
            "css_pp" | "csspp" => Ok(Technique::CssPp),
            _ => Err(Error::UnsupportedTechnique(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    /// Probe duration in microseconds.
    Duration,
    /// Integer count per window.
    SweepCount,
    /// Gap between consecutive DNS queries, microseconds.
    DnsGap,
    /// Gap between consecutive WebSocket frames, microseconds.
    WsGap,
}

impl SampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Duration => "duration",
            SampleKind::SweepCount => "sweep_count",
            SampleKind::DnsGap => "dns_gap",
            SampleKind::WsGap => "ws_gap",
        }
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "duration" => Ok(SampleKind::Duration),
            "sweep_count" => Ok(SampleKind::SweepCount),
            "dns_gap" => Ok(SampleKind::DnsGap),
            "ws_gap" => Ok(SampleKind::WsGap),
            _ => Err(Error::InvalidTrace(format!("unknown sample kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Microseconds since capture start.
    pub t_us: u64,
    pub value: f64,
}

impl Sample {
    pub fn new(t_us: u64, value: f64) -> Self {
        Sample { t_us, value }
    }
}

/// Rounds a measured value to the 1e-6 grid used by the dataset files.
pub fn quantize(value: f64) -> f64 {
    (value * 1e6).round() / 1e6 + 0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memorygram {
    samples: Vec<Sample>,
    sample_kind: SampleKind,
    duration_ms: u64,
    technique: Technique,
    arch: String,
    label: Option<String>,
}

impl Memorygram {
    /// Builds a trace, checking ordering, bounds and value invariants.
    pub fn new(
        samples: Vec<Sample>,
        sample_kind: SampleKind,
        duration_ms: u64,
        technique: Technique,
        arch: impl Into<String>,
        label: Option<String>,
    ) -> Result<Self> {
        let limit = duration_ms.saturating_mul(1000);
        let mut prev: Option<u64> = None;
        for (i, s) in samples.iter().enumerate() {
            if prev.is_some_and(|p| s.t_us <= p) {
                return Err(Error::InvalidTrace(format!(
                    "sample {i}: timestamp {} not strictly increasing",
                    s.t_us
                )));
            }
            if s.t_us >= limit {
                return Err(Error::InvalidTrace(format!(
                    "sample {i}: timestamp {} outside {duration_ms} ms window",
                    s.t_us
                )));
            }
            if !s.value.is_finite() || s.value < 0.0 {
                return Err(Error::InvalidTrace(format!("sample {i}: bad value {}", s.value)));
            }
            if sample_kind == SampleKind::SweepCount && s.value.fract() != 0.0 {
                return Err(Error::InvalidTrace(format!(
                    "sample {i}: sweep count {} is not an integer",
                    s.value
                )));
            }
            prev = Some(s.t_us);
        }
        let arch = arch.into();
        check_field("arch", &arch)?;
        if let Some(l) = &label {
            check_field("label", l)?;
        }
        let samples = samples
            .into_iter()
            .map(|s| Sample::new(s.t_us, s.value + 0.0))
            .collect();
        Ok(Memorygram {
            samples,
            sample_kind,
            duration_ms,
            technique,
            arch,
            label,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.samples.iter().map(|s| s.value)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_kind(&self) -> SampleKind {
        self.sample_kind
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_ms
    }

    pub fn technique(&self) -> Technique {
        self.technique
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn with_label(mut self, label: Option<String>) -> Result<Self> {
        if let Some(l) = &label {
            check_field("label", l)?;
        }
        self.label = label;
        Ok(self)
    }

    /// Same metadata, new samples; invariants are rechecked.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        Memorygram::new(
            samples,
            self.sample_kind,
            self.duration_ms,
            self.technique,
            self.arch.clone(),
            self.label.clone(),
        )
    }
}

// Labels and arch names live in tab-separated files.
fn check_field(name: &str, v: &str) -> Result<()> {
    if v.is_empty() || v == "-" || v.chars().any(|c| c == '\t' || c == '\n' || c == '\r') {
        return Err(Error::InvalidTrace(format!("{name} {v:?} is not a valid field")));
    }
    Ok(())
}
