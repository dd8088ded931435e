//! Minimal WebSockets endpoint that timestamps short client frames.
//!
//! Each data frame is stamped when its first header byte arrives. Probe
//! durations are the deltas between consecutive frames of one connection.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::trace::{quantize, Memorygram, Sample, Technique};

pub const WS_GUID: &str = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
pub const LOG_HEADER: &str = "recv_us\tconn_id\tpayload_hex";
/// Bytes of each payload kept in the log.
pub const LOGGED_PAYLOAD: usize = 16;
/// Probe frames longer than this are accepted but flagged.
pub const PROBE_PAYLOAD_MAX: usize = 125;
const MAX_FRAME: u64 = 1 << 20;
const MAX_REQUEST: usize = 16 * 1024;

pub const CLOSE_PROTOCOL_ERROR: u16 = 1002;
pub const CLOSE_TOO_BIG: u16 = 1009;

pub const OP_CONTINUATION: u8 = 0x0;
pub const OP_TEXT: u8 = 0x1;
pub const OP_BINARY: u8 = 0x2;
pub const OP_CLOSE: u8 = 0x8;
pub const OP_PING: u8 = 0x9;
pub const OP_PONG: u8 = 0xa;

/// `base64(sha1(key + GUID))`.
pub fn accept_key(key: &str) -> String {
    let mut h = Sha1::new();
    h.update(key.trim().as_bytes());
    h.update(WS_GUID.as_bytes());
    BASE64.encode(h.finalize())
}

fn bad_request(reason: &str) -> Vec<u8> {
    format!("HTTP/1.1 400 Bad Request\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reason}", reason.len())
        .into_bytes()
}

/// Response to an opening handshake; `Ok` carries a 101 response, `Err` a 400.
pub fn handshake(request: &[u8]) -> std::result::Result<Vec<u8>, Vec<u8>> {
    let text = std::str::from_utf8(request).map_err(|_| bad_request("request is not UTF-8"))?;
    let mut lines = text.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split(' ');
    if parts.next() != Some("GET") {
        return Err(bad_request("method must be GET"));
    }
    if parts.next().is_none_or(str::is_empty) || parts.next() != Some("HTTP/1.1") {
        return Err(bad_request("expected HTTP/1.1 request line"));
    }
    let (mut upgrade, mut connection, mut key, mut version) = (false, false, None, None);
    for line in lines {
        if line.is_empty() {
            break;
        }
        let Some((name, value)) = line.split_once(':') else {
            return Err(bad_request("malformed header"));
        };
        let value = value.trim();
        match name.trim().to_ascii_lowercase().as_str() {
            "upgrade" => upgrade = value.split(',').any(|v| v.trim().eq_ignore_ascii_case("websocket")),
            "connection" => connection = value.split(',').any(|v| v.trim().eq_ignore_ascii_case("upgrade")),
            "sec-websocket-key" => key = Some(value.to_string()),
            "sec-websocket-version" => version = Some(value.to_string()),
            _ => {}
        }
    }
    if !upgrade {
        return Err(bad_request("missing Upgrade: websocket"));
    }
    if !connection {
        return Err(bad_request("missing Connection: upgrade"));
    }
    let key = key.filter(|k| !k.is_empty()).ok_or_else(|| bad_request("missing Sec-WebSocket-Key"))?;
    if version.is_some_and(|v| v != "13") {
        return Err(bad_request("unsupported Sec-WebSocket-Version"));
    }
    Ok(format!(
        "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Accept: {}\r\n\r\n",
        accept_key(&key)
    )
    .into_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
    pub oversize: bool,
    /// Microseconds since the server epoch at the first header byte.
    pub recv_us: u64,
}

/// Why a connection must be closed while reading a frame.
#[derive(Debug)]
pub enum FrameError {
    Protocol(&'static str),
    TooBig,
    Io(std::io::Error),
}

impl From<std::io::Error> for FrameError {
    fn from(e: std::io::Error) -> Self {
        FrameError::Io(e)
    }
}

/// Like `read_exact`, but a read timeout mid-frame retries instead of
/// losing the bytes already consumed.
fn fill(stream: &mut impl Read, buf: &mut [u8]) -> std::io::Result<()> {
    let mut at = 0;
    while at < buf.len() {
        match stream.read(&mut buf[at..]) {
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => at += n,
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut | std::io::ErrorKind::Interrupted
                ) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Reads one client frame. Stamps `recv_us` when the first byte arrives.
pub fn read_frame(stream: &mut impl Read, epoch: Instant) -> std::result::Result<Frame, FrameError> {
    let mut b0 = [0u8; 1];
    stream.read_exact(&mut b0)?;
    let recv_us = epoch.elapsed().as_micros() as u64;
    let mut b1 = [0u8; 1];
    fill(stream, &mut b1)?;
    let (fin, rsv, opcode) = (b0[0] & 0x80 != 0, b0[0] & 0x70, b0[0] & 0x0f);
    let masked = b1[0] & 0x80 != 0;
    let mut len = u64::from(b1[0] & 0x7f);
    if rsv != 0 {
        return Err(FrameError::Protocol("reserved bits set"));
    }
    if !masked {
        return Err(FrameError::Protocol("client frame not masked"));
    }
    if !fin || opcode == OP_CONTINUATION {
        return Err(FrameError::Protocol("fragmented frames unsupported"));
    }
    if !matches!(opcode, OP_TEXT | OP_BINARY | OP_CLOSE | OP_PING | OP_PONG) {
        return Err(FrameError::Protocol("unknown opcode"));
    }
    if len == 126 {
        let mut ext = [0u8; 2];
        fill(stream, &mut ext)?;
        len = u64::from(u16::from_be_bytes(ext));
    } else if len == 127 {
        let mut ext = [0u8; 8];
        fill(stream, &mut ext)?;
        len = u64::from_be_bytes(ext);
    }
    if opcode >= OP_CLOSE && len > 125 {
        return Err(FrameError::Protocol("control frame too long"));
    }
    if len > MAX_FRAME {
        return Err(FrameError::TooBig);
    }
    let mut mask = [0u8; 4];
    fill(stream, &mut mask)?;
    let mut payload = vec![0u8; len as usize];
    fill(stream, &mut payload)?;
    for (i, b) in payload.iter_mut().enumerate() {
        *b ^= mask[i % 4];
    }
    let oversize = matches!(opcode, OP_TEXT | OP_BINARY) && payload.len() > PROBE_PAYLOAD_MAX;
    Ok(Frame { opcode, payload, oversize, recv_us })
}

fn encode(opcode: u8, payload: &[u8], mask: Option<[u8; 4]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 14);
    out.push(0x80 | opcode);
    let m = if mask.is_some() { 0x80 } else { 0 };
    match payload.len() {
        n if n < 126 => out.push(m | n as u8),
        n if n <= u16::MAX as usize => {
            out.push(m | 126);
            out.extend_from_slice(&(n as u16).to_be_bytes());
        }
        n => {
            out.push(m | 127);
            out.extend_from_slice(&(n as u64).to_be_bytes());
        }
    }
    match mask {
        Some(k) => {
            out.extend_from_slice(&k);
            out.extend(payload.iter().enumerate().map(|(i, b)| b ^ k[i % 4]));
        }
        None => out.extend_from_slice(payload),
    }
    out
}

/// Masked single-frame client message.
pub fn encode_client_frame(opcode: u8, payload: &[u8], mask: [u8; 4]) -> Vec<u8> {
    encode(opcode, payload, Some(mask))
}

/// Unmasked single-frame server message.
pub fn encode_server_frame(opcode: u8, payload: &[u8]) -> Vec<u8> {
    encode(opcode, payload, None)
}

fn close_frame(code: u16) -> Vec<u8> {
    encode_server_frame(OP_CLOSE, &code.to_be_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WsLogRecord {
    pub recv_us: u64,
    pub conn_id: u64,
    /// First [`LOGGED_PAYLOAD`] bytes of the payload.
    pub payload: Vec<u8>,
    pub oversize: bool,
}

impl WsLogRecord {
    pub fn to_tsv(&self) -> String {
        let mut hex = String::with_capacity(self.payload.len() * 2);
        for b in &self.payload {
            let _ = write!(hex, "{b:02x}");
        }
        if hex.is_empty() {
            hex.push('-');
        }
        format!("{}\t{}\t{hex}", self.recv_us, self.conn_id)
    }
}

pub fn parse_log(text: &str, path: &Path) -> Result<Vec<WsLogRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') || line == LOG_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::format(path, i + 1, format!("expected 3 fields, got {}", f.len())));
        }
        let recv_us = f[0].parse().map_err(|_| Error::format(path, i + 1, "bad recv_us"))?;
        let conn_id = f[1].parse().map_err(|_| Error::format(path, i + 1, "bad conn_id"))?;
        let payload = if f[2] == "-" {
            Vec::new()
        } else {
            if f[2].len() % 2 != 0 {
                return Err(Error::format(path, i + 1, "odd-length payload hex"));
            }
            (0..f[2].len())
                .step_by(2)
                .map(|j| u8::from_str_radix(&f[2][j..j + 2], 16))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, i + 1, "bad payload hex"))?
        };
        out.push(WsLogRecord { recv_us, conn_id, payload, oversize: false });
    }
    Ok(out)
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<WsLogRecord>> {
    let path = path.as_ref();
    parse_log(&std::fs::read_to_string(path)?, path)
}

/// `(t_us, delta_us)` for each frame after the first on `conn_id`, with
/// `t_us` relative to the first frame.
pub fn deltas(log: &[WsLogRecord], conn_id: u64) -> Result<Vec<(u64, u64)>> {
    let times: Vec<u64> = log.iter().filter(|r| r.conn_id == conn_id).map(|r| r.recv_us).collect();
    if times.len() < 2 {
        return Err(Error::InsufficientRecords(times.len()));
    }
    let mut out = Vec::with_capacity(times.len() - 1);
    for w in times.windows(2) {
        let d = w[1].checked_sub(w[0]).ok_or_else(|| Error::InvalidTrace("log times decrease".into()))?;
        out.push((w[1] - times[0], d));
    }
    Ok(out)
}

/// Inter-frame deltas of one connection as a memorygram. Zero deltas share a
/// timestamp with the previous sample and are left out.
pub fn export_memorygram(log: &[WsLogRecord], conn_id: u64, arch: &str) -> Result<Memorygram> {
    let d = deltas(log, conn_id)?;
    let mut samples: Vec<Sample> = Vec::with_capacity(d.len());
    for (t, delta) in d {
        if delta > 0 {
            samples.push(Sample::new(t, quantize(delta as f64)));
        }
    }
    let end_us = samples.last().map_or(0, |s| s.t_us) + 1;
    Memorygram::new(samples, Technique::StringSock.sample_kind(), end_us.div_ceil(1000), Technique::StringSock, arch, None)
}

/// Connection with the most frames.
pub fn busiest_conn(log: &[WsLogRecord]) -> Option<u64> {
    let mut counts = std::collections::BTreeMap::new();
    for r in log {
        *counts.entry(r.conn_id).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by_key(|&(id, n)| (n, std::cmp::Reverse(id))).map(|(id, _)| id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSummary {
    pub frames: usize,
    pub nominal_ms: f64,
    pub mean_delta_ms: f64,
    /// Standard deviation of (delta - nominal).
    pub stddev_ms: f64,
}

/// Jitter of one connection's frames against a nominal spacing.
pub fn jitter_stddev_ms(log: &[WsLogRecord], conn_id: u64, nominal_ms: f64) -> Result<JitterSummary> {
    let d = deltas(log, conn_id)?;
    let dev: Vec<f64> = d.iter().map(|&(_, x)| x as f64 / 1000.0 - nominal_ms).collect();
    let n = dev.len() as f64;
    let mean = dev.iter().sum::<f64>() / n;
    let var = dev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(JitterSummary { frames: d.len() + 1, nominal_ms, mean_delta_ms: mean + nominal_ms, stddev_ms: var.sqrt() })
}

struct Shared {
    epoch: Instant,
    records: Mutex<Vec<WsLogRecord>>,
    sink: Option<Mutex<BufWriter<File>>>,
    stop: AtomicBool,
    next_conn: AtomicU64,
}

impl Shared {
    fn log(&self, r: WsLogRecord) -> Result<()> {
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().expect("sink lock");
            writeln!(w, "{}", r.to_tsv())?;
            w.flush()?;
        }
        self.records.lock().expect("log lock").push(r);
        Ok(())
    }
}

/// Handle to a running listener; one thread per connection.
pub struct WsServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl WsServer {
    pub fn spawn(addr: impl ToSocketAddrs, log_path: Option<&Path>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let sink = match log_path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{LOG_HEADER}")?;
                w.flush()?;
                Some(Mutex::new(w))
            }
            None => None,
        };
        let shared = Arc::new(Shared {
            epoch: Instant::now(),
            records: Mutex::new(Vec::new()),
            sink,
            stop: AtomicBool::new(false),
            next_conn: AtomicU64::new(0),
        });
        let s = shared.clone();
        let thread = std::thread::Builder::new().name("ws-accept".into()).spawn(move || {
            let mut handlers = Vec::new();
            while !s.stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let s2 = s.clone();
                        let id = s.next_conn.fetch_add(1, Ordering::Relaxed);
                        handlers.push(std::thread::spawn(move || {
                            if let Err(e) = handle_conn(stream, id, &s2) {
                                log::debug!("connection {id} from {peer}: {e}");
                            }
                        }));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) => log::warn!("accept: {e}"),
                }
            }
            for h in handlers {
                let _ = h.join();
            }
        })?;
        Ok(WsServer { addr, shared, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn records(&self) -> Vec<WsLogRecord> {
        self.shared.records.lock().expect("log lock").clone()
    }

    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) -> Vec<WsLogRecord> {
        self.stop();
        std::mem::take(&mut *self.shared.records.lock().expect("log lock"))
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WsServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn read_request(stream: &mut TcpStream) -> Result<Vec<u8>> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut req = Vec::new();
    loop {
        let n = reader.read_until(b'\n', &mut req)?;
        if n == 0 || req.ends_with(b"\r\n\r\n") {
            break;
        }
        if req.len() > MAX_REQUEST {
            return Err(Error::InvalidArgument("handshake too large".into()));
        }
    }
    if !reader.buffer().is_empty() {
        // A client that pipelines frames behind the handshake is not supported.
        return Err(Error::InvalidArgument("data after handshake".into()));
    }
    Ok(req)
}

fn handle_conn(mut stream: TcpStream, conn_id: u64, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let req = loop {
        match read_request(&mut stream) {
            Ok(r) => break r,
            Err(Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                if shared.stop.load(Ordering::Relaxed) {
                    return Ok(());
                }
            }
            Err(e) => return Err(e),
        }
    };
    match handshake(&req) {
        Ok(resp) => stream.write_all(&resp)?,
        Err(resp) => {
            stream.write_all(&resp)?;
            let _ = stream.shutdown(Shutdown::Both);
            return Ok(());
        }
    }
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            let _ = stream.write_all(&close_frame(1001));
            return Ok(());
        }
        let frame = match read_frame(&mut stream, shared.epoch) {
            Ok(f) => f,
            Err(FrameError::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                continue
            }
            Err(FrameError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e.into()),
            Err(FrameError::Protocol(why)) => {
                log::debug!("connection {conn_id}: {why}");
                let _ = stream.write_all(&close_frame(CLOSE_PROTOCOL_ERROR));
                return Ok(());
            }
            Err(FrameError::TooBig) => {
                let _ = stream.write_all(&close_frame(CLOSE_TOO_BIG));
                return Ok(());
            }
        };
        match frame.opcode {
            OP_TEXT | OP_BINARY => {
                if frame.oversize {
                    log::warn!("connection {conn_id}: oversize probe frame ({} bytes)", frame.payload.len());
                }
                let keep = frame.payload.len().min(LOGGED_PAYLOAD);
                shared.log(WsLogRecord {
                    recv_us: frame.recv_us,
                    conn_id,
                    payload: frame.payload[..keep].to_vec(),
                    oversize: frame.oversize,
                })?;
            }
            OP_PING => stream.write_all(&encode_server_frame(OP_PONG, &frame.payload))?,
            OP_CLOSE => {
                let _ = stream.write_all(&encode_server_frame(OP_CLOSE, &frame.payload));
                return Ok(());
            }
            _ => {}
        }
    }
}

/// Blocking client used for jitter measurement and tests.
pub struct WsClient {
    stream: TcpStream,
    counter: u32,
}

impl WsClient {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let key = BASE64.encode(addr.port().to_be_bytes().repeat(8));
        write!(
            stream,
            "GET /probe HTTP/1.1\r\nHost: {addr}\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )?;
        let mut resp = Vec::new();
        let mut byte = [0u8; 1];
        while !resp.ends_with(b"\r\n\r\n") {
            if stream.read(&mut byte)? == 0 {
                return Err(Error::InvalidArgument("connection closed during handshake".into()));
            }
            resp.push(byte[0]);
        }
        let text = String::from_utf8_lossy(&resp);
        if !text.starts_with("HTTP/1.1 101") || !text.contains(&accept_key(&key)) {
            return Err(Error::InvalidArgument(format!("handshake rejected: {}", text.lines().next().unwrap_or(""))));
        }
        Ok(WsClient { stream, counter: 0 })
    }

    pub fn send(&mut self, opcode: u8, payload: &[u8]) -> Result<()> {
        self.counter = self.counter.wrapping_add(0x9e37_79b9);
        self.stream.write_all(&encode_client_frame(opcode, payload, self.counter.to_be_bytes()))?;
        Ok(())
    }

    pub fn stream(&mut self) -> &mut TcpStream {
        &mut self.stream
    }

    pub fn close(mut self) -> Result<()> {
        self.send(OP_CLOSE, &1000u16.to_be_bytes())?;
        let mut sink = [0u8; 64];
        self.stream.set_read_timeout(Some(Duration::from_secs(1)))?;
        let _ = self.stream.read(&mut sink);
        Ok(())
    }
}

/// Sends `rate_hz` short text frames per second for `duration`, each at its
/// scheduled instant. Returns the number of frames sent.
pub fn send_paced(addr: SocketAddr, rate_hz: f64, duration: Duration) -> Result<usize> {
    if !(rate_hz > 0.0) {
        return Err(Error::InvalidArgument("rate must be positive".into()));
    }
    let mut client = WsClient::connect(addr)?;
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let n = (duration.as_secs_f64() * rate_hz).floor() as usize;
    let start = Instant::now();
    for i in 0..n {
        let at = period * i as u32;
        if let Some(wait) = at.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        client.send(OP_TEXT, format!("{:04}", i % 10_000).as_bytes())?;
    }
    client.close()?;
    Ok(n)
}

/// Loopback jitter run: server and paced client on 127.0.0.1.
pub fn measure_ws_jitter(rate_hz: f64, duration: Duration) -> Result<JitterSummary> {
    let server = WsServer::spawn("127.0.0.1:0", None)?;
    send_paced(server.local_addr(), rate_hz, duration)?;
    // Give the handler a moment to log the last frame.
    std::thread::sleep(Duration::from_millis(50));
    let log = server.shutdown();
    let conn = busiest_conn(&log).ok_or(Error::InsufficientRecords(0))?;
    jitter_stddev_ms(&log, conn, 1000.0 / rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    const REQ: &str = "GET /chat HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n";

    #[test]
    fn rfc_accept_vector() {
        assert_eq!(accept_key("dGhlIHNhbXBsZSBub25jZQ=="), "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=");
        let resp = String::from_utf8(handshake(REQ.as_bytes()).unwrap()).unwrap();
        assert!(resp.starts_with("HTTP/1.1 101"));
        assert!(resp.contains("Sec-WebSocket-Accept: s3pPLMBiTxaQ9kYGzzhZRbK+xOo=\r\n"));
    }

    #[test]
    fn handshake_rejections() {
        let no_upgrade = REQ.replace("Upgrade: websocket\r\n", "");
        let post = REQ.replace("GET", "POST");
        let no_key = REQ.replace("Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\n", "");
        let v8 = REQ.replace("Version: 13", "Version: 8");
        for r in [no_upgrade, post, no_key, v8] {
            let resp = handshake(r.as_bytes()).unwrap_err();
            assert!(resp.starts_with(b"HTTP/1.1 400"), "{r}");
        }
    }

    #[test]
    fn header_names_case_insensitive() {
        let r = REQ.replace("Upgrade: websocket", "upgrade: WebSocket").replace("Connection: Upgrade", "connection: keep-alive, Upgrade");
        assert!(handshake(r.as_bytes()).is_ok());
    }

    fn read(bytes: Vec<u8>) -> std::result::Result<Frame, FrameError> {
        read_frame(&mut Cursor::new(bytes), Instant::now())
    }

    #[test]
    fn masked_text_frame() {
        let f = read(encode_client_frame(OP_TEXT, b"p", [1, 2, 3, 4])).unwrap();
        assert_eq!((f.opcode, f.payload.as_slice(), f.oversize), (OP_TEXT, &b"p"[..], false));
    }

    #[test]
    fn unmasked_frame_is_protocol_error() {
        assert!(matches!(read(encode_server_frame(OP_TEXT, b"p")), Err(FrameError::Protocol(_))));
    }

    #[test]
    fn fragments_and_reserved_bits_rejected() {
        let mut f = encode_client_frame(OP_TEXT, b"p", [0; 4]);
        f[0] &= 0x7f;
        assert!(matches!(read(f), Err(FrameError::Protocol(_))));
        let mut f = encode_client_frame(OP_TEXT, b"p", [0; 4]);
        f[0] |= 0x40;
        assert!(matches!(read(f), Err(FrameError::Protocol(_))));
    }

    #[test]
    fn oversize_flagged() {
        let f = read(encode_client_frame(OP_BINARY, &[7u8; 300], [9, 8, 7, 6])).unwrap();
        assert!(f.oversize);
        assert_eq!(f.payload.len(), 300);
    }

    proptest! {
        #[test]
        fn masked_frames_round_trip(payload in proptest::collection::vec(any::<u8>(), 0..70_000), mask in any::<[u8; 4]>(), text in any::<bool>()) {
            let op = if text { OP_TEXT } else { OP_BINARY };
            let f = read(encode_client_frame(op, &payload, mask)).unwrap();
            prop_assert_eq!(f.opcode, op);
            prop_assert_eq!(f.oversize, payload.len() > PROBE_PAYLOAD_MAX);
            prop_assert_eq!(f.payload, payload);
        }

        #[test]
        fn accept_key_matches_definition(key in "[A-Za-z0-9+/]{22}==") {
            let mut h = Sha1::new();
            h.update(format!("{key}{WS_GUID}").as_bytes());
            prop_assert_eq!(accept_key(&key), BASE64.encode(h.finalize()));
        }

        #[test]
        fn deltas_sum_to_span(mut times in proptest::collection::vec(0u64..10_000_000, 2..200)) {
            times.sort_unstable();
            let log: Vec<WsLogRecord> = times.iter().map(|&t| WsLogRecord { recv_us: t, conn_id: 3, payload: vec![], oversize: false }).collect();
            let d = deltas(&log, 3).unwrap();
            prop_assert_eq!(d.iter().map(|x| x.1).sum::<u64>(), times[times.len() - 1] - times[0]);
        }
    }

    fn rec(t: u64) -> WsLogRecord {
        WsLogRecord { recv_us: t, conn_id: 0, payload: b"p".to_vec(), oversize: false }
    }

    #[test]
    fn export_deltas() {
        let g = export_memorygram(&[rec(0), rec(1500), rec(3100)], 0, "intel").unwrap();
        assert_eq!(g.values().collect::<Vec<_>>(), vec![1500.0, 1600.0]);
        assert_eq!(export_memorygram(&[rec(0)], 0, "intel").unwrap_err().kind(), "insufficient-records");
    }

    #[test]
    fn log_round_trip_and_replay() {
        let log = vec![rec(0), rec(10_100), rec(20_000), WsLogRecord { recv_us: 20_000, conn_id: 1, payload: vec![], oversize: false }];
        let text = format!("{LOG_HEADER}\n{}\n", log.iter().map(WsLogRecord::to_tsv).collect::<Vec<_>>().join("\n"));
        let back = parse_log(&text, Path::new("ws.tsv")).unwrap();
        assert_eq!(back, log);
        let a = jitter_stddev_ms(&log, 0, 10.0).unwrap();
        let b = jitter_stddev_ms(&back, 0, 10.0).unwrap();
        assert_eq!(a, b);
        assert!((a.stddev_ms - 0.1).abs() < 1e-12);
        assert_eq!(busiest_conn(&log), Some(0));
    }

    #[test]
    fn server_logs_frames_and_answers_ping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ws.tsv");
        let server = WsServer::spawn("127.0.0.1:0", Some(&path)).unwrap();
        let mut c = WsClient::connect(server.local_addr()).unwrap();
        c.send(OP_TEXT, b"a").unwrap();
        c.send(OP_PING, b"hi").unwrap();
        let mut pong = [0u8; 4];
        c.stream().read_exact(&mut pong).unwrap();
        assert_eq!(pong, [0x80 | OP_PONG, 2, b'h', b'i']);
        c.send(OP_TEXT, b"b").unwrap();
        c.close().unwrap();
        std::thread::sleep(Duration::from_millis(50));
        let mid = load_log(&path).unwrap();
        let recs = server.shutdown();
        assert_eq!(recs.len(), 2);
        assert_eq!(mid.iter().map(|r| r.payload.clone()).collect::<Vec<_>>(), vec![b"a".to_vec(), b"b".to_vec()]);
    }

    #[test]
    fn server_closes_on_unmasked_frame() {
        let server = WsServer::spawn("127.0.0.1:0", None).unwrap();
        let mut c = WsClient::connect(server.local_addr()).unwrap();
        c.stream().write_all(&encode_server_frame(OP_TEXT, b"x")).unwrap();
        let mut close = [0u8; 4];
        c.stream().read_exact(&mut close).unwrap();
        assert_eq!(close, [0x80 | OP_CLOSE, 2, 0x03, 0xea]);
        assert!(server.shutdown().is_empty());
    }

    #[test]
    fn bad_handshake_gets_400() {
        let server = WsServer::spawn("127.0.0.1:0", None).unwrap();
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.write_all(REQ.replace("GET", "POST").as_bytes()).unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        assert!(resp.starts_with("HTTP/1.1 400"));
    }

    #[test]
    fn short_loopback_jitter() {
        let s = measure_ws_jitter(100.0, Duration::from_millis(500)).unwrap();
        assert_eq!(s.frames, 50);
        assert!((s.mean_delta_ms - 10.0).abs() < 1.0, "{s:?}");
        assert!(measure_ws_jitter(100.0, Duration::ZERO).is_err());
    }
}
