//! Minimal authoritative DNS responder used as a remote timer.
//!
//! Every datagram is timestamped on receipt, before parsing. Names under a
//! racing zone get NXDOMAIN, names under a logging zone get one A record with
//! TTL 0, everything else is REFUSED. Probe names follow
//! `<nonce>-<seq>.<trace_id>.<zone>`, which lets [`export_memorygram`] order
//! arrivals by sequence number per trace.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{Ipv4Addr, SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{quantize, Memorygram, Sample, Technique};

pub const RCODE_NOERROR: u8 = 0;
pub const RCODE_NXDOMAIN: u8 = 3;
pub const RCODE_REFUSED: u8 = 5;
pub const TYPE_A: u16 = 1;
pub const TYPE_AAAA: u16 = 28;
pub const CLASS_IN: u16 = 1;
pub const MAX_NAME: usize = 253;
pub const MAX_LABEL: usize = 63;
/// First label of the end-of-page marker query.
pub const SENTINEL_LABEL: &str = "end";
pub const LOG_HEADER: &str = "recv_us\tqname\tsrc\trcode";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub id: u16,
    pub recursion_desired: bool,
    pub qname: String,
    pub qtype: u16,
    pub qclass: u16,
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// Parses the header and first question of a query datagram.
pub fn parse_query(datagram: &[u8]) -> Result<Query> {
    if datagram.len() < 12 {
        return Err(Error::MalformedQuery("datagram shorter than header"));
    }
    let flags = be16(datagram, 2);
    if flags & 0x8000 != 0 {
        return Err(Error::MalformedQuery("QR bit set"));
    }
    if (flags >> 11) & 0xf != 0 {
        return Err(Error::MalformedQuery("opcode is not QUERY"));
    }
    if be16(datagram, 4) == 0 {
        return Err(Error::MalformedQuery("no question"));
    }
    let mut pos = 12;
    let mut name = String::new();
    loop {
        let Some(&len) = datagram.get(pos) else {
            return Err(Error::MalformedQuery("truncated name"));
        };
        pos += 1;
        if len == 0 {
            break;
        }
        if len & 0xc0 == 0xc0 {
            return Err(Error::MalformedQuery("compressed name in question"));
        }
        let len = len as usize;
        if len > MAX_LABEL {
            return Err(Error::MalformedQuery("label longer than 63 bytes"));
        }
        let Some(label) = datagram.get(pos..pos + len) else {
            return Err(Error::MalformedQuery("truncated label"));
        };
        if label.iter().any(|&c| !(0x21..=0x7e).contains(&c) || c == b'.') {
            return Err(Error::MalformedQuery("label has unsupported bytes"));
        }
        if !name.is_empty() {
            name.push('.');
        }
        name.extend(label.iter().map(|&c| c.to_ascii_lowercase() as char));
        if name.len() > MAX_NAME {
            return Err(Error::MalformedQuery("name longer than 253 bytes"));
        }
        pos += len;
    }
    if datagram.len() < pos + 4 {
        return Err(Error::MalformedQuery("truncated question"));
    }
    Ok(Query {
        id: be16(datagram, 0),
        recursion_desired: flags & 0x0100 != 0,
        qname: name,
        qtype: be16(datagram, pos),
        qclass: be16(datagram, pos + 2),
    })
}

fn push_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    if !name.is_empty() {
        for label in name.split('.') {
            if label.is_empty() || label.len() > MAX_LABEL {
                return Err(Error::InvalidArgument(format!("bad label in {name:?}")));
            }
            out.push(label.len() as u8);
            out.extend_from_slice(label.as_bytes());
        }
    }
    out.push(0);
    Ok(())
}

/// Wire-format query, used by clients and tests.
pub fn build_query(id: u16, qname: &str, qtype: u16) -> Result<Vec<u8>> {
    if qname.len() > MAX_NAME {
        return Err(Error::InvalidArgument(format!("name longer than {MAX_NAME} bytes")));
    }
    let mut out = Vec::with_capacity(18 + qname.len());
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&0x0100u16.to_be_bytes());
    out.extend_from_slice(&[0, 1, 0, 0, 0, 0, 0, 0]);
    push_name(&mut out, qname)?;
    out.extend_from_slice(&qtype.to_be_bytes());
    out.extend_from_slice(&CLASS_IN.to_be_bytes());
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneMode {
    /// Resolvable; answers carry the configured address.
    Log,
    /// Always NXDOMAIN.
    Nx,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub mode: ZoneMode,
}

impl FromStr for Zone {
    type Err = Error;

    /// `attack.example=log` or `race.example=nx`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, mode) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("zone {s:?} is not name=log|nx")))?;
        let mode = match mode {
            "log" => ZoneMode::Log,
            "nx" | "race" => ZoneMode::Nx,
            _ => return Err(Error::InvalidArgument(format!("zone mode {mode:?} is not log or nx"))),
        };
        let name = name.trim_end_matches('.').to_ascii_lowercase();
        if name.is_empty() {
            return Err(Error::InvalidArgument("empty zone name".into()));
        }
        Ok(Zone { name, mode })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsConfig {
    pub zones: Vec<Zone>,
    pub answer: Ipv4Addr,
}

impl DnsConfig {
    pub fn new(zones: Vec<Zone>) -> Self {
        DnsConfig { zones, answer: Ipv4Addr::LOCALHOST }
    }

    /// Most specific zone containing `qname`.
    pub fn zone_of(&self, qname: &str) -> Option<&Zone> {
        self.zones
            .iter()
            .filter(|z| qname == z.name || qname.strip_suffix(&z.name).is_some_and(|p| p.ends_with('.')))
            .max_by_key(|z| z.name.len())
    }

    pub fn rcode_for(&self, qname: &str) -> u8 {
        match self.zone_of(qname).map(|z| z.mode) {
            Some(ZoneMode::Nx) => RCODE_NXDOMAIN,
            Some(ZoneMode::Log) => RCODE_NOERROR,
            None => RCODE_REFUSED,
        }
    }
}

/// Response datagram for a parsed query.
pub fn respond(query: &Query, config: &DnsConfig) -> Vec<u8> {
    let rcode = config.rcode_for(&query.qname);
    let answer = rcode == RCODE_NOERROR && query.qtype == TYPE_A;
    let mut out = Vec::with_capacity(64 + query.qname.len());
    out.extend_from_slice(&query.id.to_be_bytes());
    // QR, AA, RD echoed, RA clear.
    let flags: u16 = 0x8000 | 0x0400 | if query.recursion_desired { 0x0100 } else { 0 } | rcode as u16;
    out.extend_from_slice(&flags.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&u16::from(answer).to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    push_name(&mut out, &query.qname).expect("parsed names re-encode");
    out.extend_from_slice(&query.qtype.to_be_bytes());
    out.extend_from_slice(&query.qclass.to_be_bytes());
    if answer {
        out.extend_from_slice(&[0xc0, 0x0c]);
        out.extend_from_slice(&TYPE_A.to_be_bytes());
        out.extend_from_slice(&CLASS_IN.to_be_bytes());
        out.extend_from_slice(&0u32.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&config.answer.octets());
    }
    out
}

/// Header fields of a response: (id, rcode, answer count).
pub fn parse_response(datagram: &[u8]) -> Result<(u16, u8, u16)> {
    if datagram.len() < 12 || datagram[2] & 0x80 == 0 {
        return Err(Error::MalformedQuery("not a response"));
    }
    Ok((be16(datagram, 0), datagram[3] & 0x0f, be16(datagram, 6)))
}

/// Probe name `<nonce>-<seq>.<trace_id>.<zone>`.
pub fn probe_name(nonce: &str, seq: u64, trace_id: &str, zone: &str) -> String {
    format!("{nonce}-{seq}.{trace_id}.{zone}")
}

pub fn sentinel_name(trace_id: &str, zone: &str) -> String {
    format!("{SENTINEL_LABEL}.{trace_id}.{zone}")
}

/// `(trace_id, seq)` of a probe name; `seq` is `None` for unsequenced names.
pub fn parse_probe_name(qname: &str) -> Option<(&str, Option<u64>)> {
    let mut labels = qname.splitn(3, '.');
    let first = labels.next()?;
    let trace = labels.next()?;
    labels.next()?;
    let seq = first.rsplit_once('-').and_then(|(nonce, s)| {
        if nonce.is_empty() || s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            None
        } else {
            s.parse().ok()
        }
    });
    Some((trace, seq))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DnsLogRecord {
    pub recv_us: u64,
    /// `None` when the datagram was malformed and dropped.
    pub qname: Option<String>,
    pub src: SocketAddr,
    /// `None` when no response was sent.
    pub rcode: Option<u8>,
}

impl DnsLogRecord {
    pub fn trace_id(&self) -> Option<&str> {
        self.qname.as_deref().and_then(parse_probe_name).map(|(t, _)| t)
    }

    pub fn seq(&self) -> Option<u64> {
        self.qname.as_deref().and_then(parse_probe_name).and_then(|(_, s)| s)
    }

    pub fn is_sentinel(&self) -> bool {
        self.qname.as_deref().is_some_and(|q| q.split('.').next() == Some(SENTINEL_LABEL))
    }

    pub fn to_tsv(&self) -> String {
        let rcode = self.rcode.map_or("-".to_string(), |r| r.to_string());
        format!("{}\t{}\t{}\t{}", self.recv_us, self.qname.as_deref().unwrap_or("-"), self.src, rcode)
    }
}

pub fn parse_log(text: &str, path: &Path) -> Result<Vec<DnsLogRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') || line == LOG_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::format(path, i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let recv_us = f[0].parse().map_err(|_| Error::format(path, i + 1, "bad recv_us"))?;
        let src = f[2].parse().map_err(|_| Error::format(path, i + 1, "bad src address"))?;
        let rcode = match f[3] {
            "-" => None,
            r => Some(r.parse().map_err(|_| Error::format(path, i + 1, "bad rcode"))?),
        };
        let qname = (f[1] != "-").then(|| f[1].to_string());
        out.push(DnsLogRecord { recv_us, qname, src, rcode });
    }
    Ok(out)
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<DnsLogRecord>> {
    let path = path.as_ref();
    parse_log(&std::fs::read_to_string(path)?, path)
}

/// Result of turning one trace's log records into a memorygram.
#[derive(Clone, Debug, PartialEq)]
pub struct DnsExport {
    pub trace: Memorygram,
    /// Sequence numbers absent between the first and last seen.
    pub missing: Vec<u64>,
    /// Gaps dropped because they were negative, zero, or spanned a missing seq.
    pub dropped: usize,
    /// True when no record carried a sequence number and arrival order was used.
    pub arrival_order: bool,
}

/// Inter-arrival memorygram of `trace_id`.
///
/// Records are ordered by sequence number. Sample `i` sits at
/// `recv_us_i - recv_us_first` and carries the gap to the previous record.
/// Gaps after a missing sequence number are absent; negative gaps (arrival
/// order disagreeing with seq order) are dropped. Without any sequence
/// numbers the arrival order is used.
pub fn export_memorygram(log: &[DnsLogRecord], trace_id: &str, arch: &str) -> Result<DnsExport> {
    let mine: Vec<&DnsLogRecord> = log
        .iter()
        .filter(|r| r.qname.is_some() && !r.is_sentinel() && r.trace_id() == Some(trace_id))
        .collect();
    if mine.len() < 2 {
        return Err(Error::InsufficientRecords(mine.len()));
    }
    let sequenced: Vec<(u64, u64)> = mine.iter().filter_map(|r| r.seq().map(|s| (s, r.recv_us))).collect();
    let arrival_order = sequenced.is_empty();
    let mut points: Vec<(u64, u64)> = if arrival_order {
        mine.iter().enumerate().map(|(i, r)| (i as u64, r.recv_us)).collect()
    } else {
        sequenced
    };
    points.sort_by_key(|&(s, t)| (s, t));
    // Retransmitted names keep their first arrival.
    points.dedup_by_key(|p| p.0);
    if points.len() < 2 {
        return Err(Error::InsufficientRecords(points.len()));
    }
    let first = points.iter().map(|p| p.1).min().unwrap_or(0);
    let seen: BTreeSet<u64> = points.iter().map(|p| p.0).collect();
    let missing: Vec<u64> = (points[0].0..=points[points.len() - 1].0).filter(|s| !seen.contains(s)).collect();

    let mut samples: Vec<Sample> = Vec::new();
    let mut dropped = 0;
    for w in points.windows(2) {
        let ((s0, t0), (s1, t1)) = (w[0], w[1]);
        let t = t1 - first;
        let ok = s1 == s0 + 1 && t1 > t0 && samples.last().is_none_or(|p| t > p.t_us);
        if ok {
            samples.push(Sample::new(t, quantize((t1 - t0) as f64)));
        } else {
            dropped += 1;
        }
    }
    let end_us = samples.last().map_or(0, |s| s.t_us) + 1;
    let trace = Memorygram::new(
        samples,
        Technique::CssPp.sample_kind(),
        end_us.div_ceil(1000),
        Technique::CssPp,
        arch,
        None,
    )?;
    Ok(DnsExport { trace, missing, dropped, arrival_order })
}

/// Handle to a running server thread.
pub struct DnsServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    records: Arc<Mutex<Vec<DnsLogRecord>>>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl DnsServer {
    /// Binds `addr` and starts the receive loop. With `log_path`, each record
    /// is appended and flushed as it arrives.
    pub fn spawn(addr: impl ToSocketAddrs, config: DnsConfig, log_path: Option<&Path>) -> Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let addr = socket.local_addr()?;
        let mut log = match log_path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{LOG_HEADER}")?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        let stop = Arc::new(AtomicBool::new(false));
        let records = Arc::new(Mutex::new(Vec::new()));
        let (stop2, records2) = (stop.clone(), records.clone());
        let thread = std::thread::Builder::new().name("dns-server".into()).spawn(move || {
            let epoch = Instant::now();
            let mut buf = [0u8; 1500];
            while !stop2.load(Ordering::Relaxed) {
                let (n, src) = match socket.recv_from(&mut buf) {
                    Ok(x) => x,
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                        continue
                    }
                    Err(e) => return Err(e.into()),
                };
                let recv_us = epoch.elapsed().as_micros() as u64;
                let record = match parse_query(&buf[..n]) {
                    Ok(q) => {
                        let resp = respond(&q, &config);
                        let rcode = resp[3] & 0x0f;
                        if let Err(e) = socket.send_to(&resp, src) {
                            log::warn!("send to {src}: {e}");
                        }
                        DnsLogRecord { recv_us, qname: Some(q.qname), src, rcode: Some(rcode) }
                    }
                    Err(e) => {
                        log::debug!("dropped datagram from {src}: {e}");
                        DnsLogRecord { recv_us, qname: None, src, rcode: None }
                    }
                };
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", record.to_tsv())?;
                    w.flush()?;
                }
                records2.lock().expect("log lock").push(record);
            }
            Ok(())
        })?;
        Ok(DnsServer { addr, stop, records, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Snapshot of the records logged so far.
    pub fn records(&self) -> Vec<DnsLogRecord> {
        self.records.lock().expect("log lock").clone()
    }

    /// Blocks until the receive loop ends (it only ends on an I/O error or stop).
    pub fn wait(mut self) -> Result<()> {
        self.join()
    }

    pub fn shutdown(mut self) -> Result<Vec<DnsLogRecord>> {
        self.stop.store(true, Ordering::Relaxed);
        self.join()?;
        Ok(std::mem::take(&mut *self.records.lock().expect("log lock")))
    }

    fn join(&mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| Error::InvalidArgument("dns server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for DnsServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.join();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimerSummary {
    pub sent: usize,
    pub answered: usize,
    /// Queries that timed out; their round trip is only known to exceed the timeout.
    pub censored: usize,
    pub median_ms: Option<f64>,
    pub stddev_ms: Option<f64>,
    pub rtt_ms: Vec<f64>,
}

/// Issues `n` unique lookups under `zone` at `rate_hz` and records the round
/// trips. Unanswered queries count as censored.
pub fn measure_dns_timer(
    server: SocketAddr,
    zone: &str,
    n: usize,
    rate_hz: f64,
    timeout: Duration,
) -> Result<TimerSummary> {
    let mut summary = TimerSummary { sent: n, ..TimerSummary::default() };
    if n == 0 {
        return Ok(summary);
    }
    if !(rate_hz > 0.0) {
        return Err(Error::InvalidArgument("rate must be positive".into()));
    }
    let bind: SocketAddr = if server.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
    let socket = UdpSocket::bind(bind)?;
    socket.connect(server)?;
    let spacing = Duration::from_secs_f64(1.0 / rate_hz);
    let nonce = format!("{:08x}", std::process::id() ^ (Instant::now().elapsed().subsec_nanos()));
    let start = Instant::now();
    let mut buf = [0u8; 1500];
    for i in 0..n {
        let at = spacing * i as u32;
        if let Some(wait) = at.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        let id = (i & 0xffff) as u16;
        let q = build_query(id, &probe_name(&nonce, i as u64, "timer", zone), TYPE_A)?;
        let sent = Instant::now();
        socket.send(&q)?;
        let deadline = sent + timeout;
        let mut got = None;
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            socket.set_read_timeout(Some(left.max(Duration::from_micros(1))))?;
            match socket.recv(&mut buf) {
                Ok(len) => {
                    if parse_response(&buf[..len]).is_ok_and(|(rid, _, _)| rid == id) {
                        got = Some(sent.elapsed());
                        break;
                    }
                }
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => break,
                Err(e) => return Err(e.into()),
            }
        }
        match got {
            Some(d) => summary.rtt_ms.push(d.as_secs_f64() * 1000.0),
            None => summary.censored += 1,
        }
    }
    summary.answered = summary.rtt_ms.len();
    if !summary.rtt_ms.is_empty() {
        let mut sorted = summary.rtt_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        summary.median_ms = Some(if m % 2 == 1 { sorted[m / 2] } else { (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0 });
        let mean = sorted.iter().sum::<f64>() / m as f64;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
        summary.stddev_ms = Some(var.sqrt());
    }
    Ok(summary)
}
