use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Technique;
use crate::error::{Error, Result};

const MIB: u64 = 1 << 20;

/// Per-architecture constants used for buffer sizing and default resolutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub name: String,
    pub llc_bytes: u64,
    pub line_bytes: u64,
    /// Length of the String-and-Sock search string, in characters.
    pub sns_string_chars: u64,
    /// Temporal resolution of the occupancy channel.
    pub nominal_resolution_ms: f64,
    /// Measured resolution per technique, in [`Technique::ALL`] order.
    pub technique_resolution_ms: [f64; 5],
}

impl ArchProfile {
    pub fn new(
        name: impl Into<String>,
        llc_bytes: u64,
        line_bytes: u64,
        sns_string_chars: u64,
        technique_resolution_ms: [f64; 5],
    ) -> Result<Self> {
        let p = ArchProfile {
            name: name.into(),
            llc_bytes,
            line_bytes,
            sns_string_chars,
            nominal_resolution_ms: technique_resolution_ms[0],
            technique_resolution_ms,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.line_bytes == 0 || self.llc_bytes == 0 || self.llc_bytes % self.line_bytes != 0 {
            return Err(Error::InvalidArgument(format!(
                "llc_bytes {} must be a positive multiple of line_bytes {}",
                self.llc_bytes, self.line_bytes
            )));
        }
        if self.sns_string_chars == 0 {
            return Err(Error::InvalidArgument("sns_string_chars must be positive".into()));
        }
        if self.technique_resolution_ms.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidArgument("resolutions must be positive".into()));
        }
        Ok(())
    }

    /// Intel Core i5-3470, 6 MiB LLC.
    pub fn intel() -> Self {
        Self::builtin("intel", 6 * MIB, 2 * MIB, [2.9, 100.0, 20.3, 1.5, 0.3])
    }

    /// AMD Ryzen 9 3900X. The LLC is 4 x 16 MiB; one core sees a 16 MiB slice.
    pub fn amd() -> Self {
        Self::builtin("amd", 16 * MIB, 3 * MIB, [6.0, 100.0, 1.8, 2.9, 6.7])
    }

    /// Apple M1, 12 MiB LLC on the performance cluster.
    pub fn apple() -> Self {
        Self::builtin("apple", 12 * MIB, 2 * MIB, [6.3, 100.0, 7.2, 2.6, 0.3])
    }

    /// Samsung Exynos 2100, 8 MiB LLC.
    pub fn samsung() -> Self {
        Self::builtin("samsung", 8 * MIB, 3 * MIB / 2, [4.0, 100.0, 2.9, 2.5, 33.8])
    }

    fn builtin(name: &str, llc: u64, sns: u64, res: [f64; 5]) -> Self {
        ArchProfile {
            name: name.to_string(),
            llc_bytes: llc,
            line_bytes: 64,
            sns_string_chars: sns,
            nominal_resolution_ms: res[0],
            technique_resolution_ms: res,
        }
    }

    pub fn builtins() -> Vec<ArchProfile> {
        vec![Self::intel(), Self::amd(), Self::apple(), Self::samsung()]
    }

    /// Looks up a built-in profile by name, or `host` for the running machine.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "intel" | "i5-3470" => Ok(Self::intel()),
            "amd" | "3900x" => Ok(Self::amd()),
            "apple" | "m1" => Ok(Self::apple()),
            "samsung" | "exynos" | "exynos-2100" => Ok(Self::samsung()),
            "host" => Self::host(),
            other => Err(Error::InvalidArgument(format!("unknown arch profile {other:?}"))),
        }
    }

    pub fn resolution_ms(&self, technique: Technique) -> f64 {
        let idx = Technique::ALL.iter().position(|t| *t == technique).unwrap_or(0);
        self.technique_resolution_ms[idx]
    }

    pub fn lines(&self) -> u64 {
        self.llc_bytes / self.line_bytes
    }

    /// Profile for the running machine from sysfs cache descriptors.
    ///
    /// String length follows the three-bytes-per-character rule.
    pub fn host() -> Result<Self> {
        let (llc, line) = host_llc(Path::new("/sys/devices/system/cpu/cpu0/cache"))
            .ok_or_else(|| Error::InvalidArgument("cannot read host cache geometry".into()))?;
        let llc = llc - llc % line;
        ArchProfile::new("host", llc, line, llc / 3, Self::intel().technique_resolution_ms)
    }
}

/// Largest cache level described under `dir`: (size, line size).
pub(crate) fn host_llc(dir: &Path) -> Option<(u64, u64)> {
    let mut best: Option<(u32, u64, u64)> = None;
    for entry in fs::read_dir(dir).ok()? {
        let path = entry.ok()?.path();
        let name = path.file_name()?.to_string_lossy().into_owned();
        if !name.starts_with("index") {
            continue;
        }
        let read = |f: &str| fs::read_to_string(path.join(f)).ok().map(|s| s.trim().to_string());
        let Some(level) = read("level").and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        if read("type").as_deref() == Some("Instruction") {
            continue;
        }
        let Some(size) = read("size").and_then(|s| parse_size(&s)) else {
            continue;
        };
        let line = read("coherency_line_size")
            .and_then(|s| s.parse().ok())
            .unwrap_or(64);
        if best.is_none_or(|(l, _, _)| level > l) {
            best = Some((level, size, line));
        }
    }
    best.map(|(_, s, l)| (s, l))
}

fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, mul) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1024),
        'M' | 'm' => (&s[..s.len() - 1], MIB),
        'G' | 'g' => (&s[..s.len() - 1], 1024 * MIB),
        _ => (s, 1),
    };
    num.parse::<u64>().ok().map(|n| n * mul)
}
