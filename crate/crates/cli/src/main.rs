use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};
use std::time::Duration;

use cachegram::analysis::{self, AccuracyCell, Knn};
use cachegram::dns::{self, DnsConfig, DnsServer, Zone};
use cachegram::par::Execution;
use cachegram::payload::{self, PayloadSpec};
use cachegram::sim::{self, SimParams};
use cachegram::trace::{load_dataset, save_dataset};
use cachegram::victim::{self, ActivityProfile};
use cachegram::{probe, v8, ws, ArchProfile, Dataset, Error, Memorygram, Result, Technique, World};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const MANIFEST_FILE: &str = "run-manifest.json";
const JITTER_LEVELS: [f64; 5] = [0.0, 1.0, 5.0, 10.0, 25.0];

#[derive(Parser, Serialize)]
#[command(name = "cachegram", version, about = "Cache occupancy channel toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Capture a native occupancy or sweep-count trace
    Capture(CaptureArgs),
    /// Run the synthetic cache-pressure victim
    Victim(VictimArgs),
    /// Generate a simulated benchmark dataset
    Simulate(SimulateArgs),
    /// Authoritative DNS server that logs query arrivals
    ServeDns(ServeDnsArgs),
    /// WebSocket server that logs frame arrivals
    ServeWs(ServeWsArgs),
    /// Generate a browser payload page
    GenPayload(GenPayloadArgs),
    /// Recover a buffer offset from a push-timing trace
    RecoverOffset(RecoverOffsetArgs),
    /// k-NN cross-validation over a dataset
    ClassifyBaseline(ClassifyArgs),
    /// Loopback WebSocket jitter measurement, or jitter of a recorded log
    MeasureJitter(MeasureJitterArgs),
    /// Technique x architecture accuracy table from classify-baseline runs
    Report(ReportArgs),
    /// Convert a DNS or WebSocket server log into a one-trace dataset
    Export(ExportArgs),
}

#[derive(Args, Serialize)]
struct CaptureArgs {
    /// occupancy or sweep
    #[arg(long, default_value = "occupancy")]
    technique: String,
    #[arg(long, default_value = "host")]
    arch: String,
    #[arg(long, default_value_t = 30_000)]
    duration_ms: u64,
    /// Sampling period (occupancy) or counting window (sweep)
    #[arg(long)]
    period_ms: Option<f64>,
    /// Run this library profile in a victim process during the capture
    #[arg(long)]
    victim_profile: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VictimArgs {
    /// Library profile id such as site-03
    #[arg(long, required_unless_present = "profile_file")]
    profile: Option<String>,
    /// Profile TSV with start_ms, end_ms, intensity rows
    #[arg(long)]
    profile_file: Option<PathBuf>,
    #[arg(long, default_value = "host")]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value = "occupancy")]
    technique: String,
    #[arg(long, default_value = "intel")]
    arch: String,
    /// Jitter in ms: a value, a comma list, or a range `a..b` over 0,1,5,10,25
    #[arg(long, default_value = "0")]
    sigma_ms: String,
    /// Open world with this many unmonitored traces
    #[arg(long)]
    n_other: Option<usize>,
    /// Stop-and-wait transport
    #[arg(long)]
    tor: bool,
    #[arg(long)]
    decimation_n: Option<u32>,
    #[arg(long)]
    noise_sigma_us: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ServeDnsArgs {
    /// name=log or name=nx (also name=race)
    #[arg(long = "zone", required = true)]
    zones: Vec<String>,
    #[arg(long, env = "CACHEGRAM_DNS_PORT", default_value_t = 5353)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    bind: IpAddr,
    /// Address returned for names under log zones
    #[arg(long, default_value = "127.0.0.1")]
    answer: std::net::Ipv4Addr,
    #[arg(long)]
    log: PathBuf,
    /// Stop after this many seconds instead of running forever
    #[arg(long)]
    duration_s: Option<f64>,
}

#[derive(Args, Serialize)]
struct ServeWsArgs {
    #[arg(long, env = "CACHEGRAM_WS_PORT", default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    bind: IpAddr,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    duration_s: Option<f64>,
}

#[derive(Args, Serialize)]
struct GenPayloadArgs {
    /// css-pp, sns or dns-racing
    #[arg(long)]
    technique: String,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    trace_id: String,
    #[arg(long, default_value = "intel")]
    arch: String,
    #[arg(long)]
    ws_url: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    n_elements: usize,
    #[arg(long, default_value_t = 2_000_000)]
    class_len: usize,
    #[arg(long, default_value_t = 6)]
    needle_len: usize,
    #[arg(long, default_value_t = 1)]
    decimation_n: u32,
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 30_000)]
    duration_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Page file; its manifest is written next to it as <file>.manifest.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RecoverOffsetArgs {
    /// TSV of push_index, duration_us
    #[arg(long)]
    trace: PathBuf,
    /// Spike threshold in MADs above the median
    #[arg(long, default_value_t = v8::DEFAULT_MAD_K)]
    mad_k: f64,
}

#[derive(Args, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 512)]
    n_points: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Also run a jitter sweep over these levels (comma list or a..b)
    #[arg(long)]
    jitter: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct MeasureJitterArgs {
    #[arg(long, default_value_t = 100.0)]
    rate_hz: f64,
    #[arg(long, default_value_t = 30.0)]
    duration_s: f64,
    /// Analyse a recorded serve-ws log instead of running a loopback test
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    conn: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// classify-baseline output directories
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ExportArgs {
    #[arg(long, conflicts_with = "ws_log", required_unless_present = "ws_log")]
    dns_log: Option<PathBuf>,
    #[arg(long)]
    ws_log: Option<PathBuf>,
    /// Trace id of the probe names (DNS)
    #[arg(long)]
    trace_id: Option<String>,
    /// Connection id (WebSocket); defaults to the busiest connection
    #[arg(long)]
    conn: Option<u64>,
    #[arg(long, default_value = "intel")]
    arch: String,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Host {
    os: &'static str,
    arch: &'static str,
    cpus: usize,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    rng: &'static str,
    host: Host,
    parallel: bool,
    command: &'a Cmd,
}

fn write_manifest(path: &Path, cmd: &Cmd, exec: Execution) -> Result<()> {
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        rng: cachegram::rng::RNG_NAME,
        host: Host {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
        parallel: exec.is_parallel(),
        command: cmd,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn exec_of(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn parse_sigmas(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("cannot parse sigma list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        let v: Vec<f64> = JITTER_LEVELS.iter().copied().filter(|x| (a..=b).contains(x)).collect();
        return if v.is_empty() { Err(bad()) } else { Ok(v) };
    }
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(bad());
    }
    Ok(v)
}

fn sigma_dir(sigma: f64) -> String {
    format!("sigma-{sigma}")
}

fn single_trace_dataset(trace: Memorygram, meta: &[(&str, String)]) -> Result<Dataset> {
    let mut ds = Dataset::new(vec![trace], World::Closed, 1, 1, vec![0])?;
    for (k, v) in meta {
        ds.set_meta(*k, v.clone())?;
    }
    Ok(ds)
}

fn spawn_victim(profile: &str, arch: &str, seed: u64) -> Result<Child> {
    let exe = std::env::current_exe()?;
    Ok(Command::new(exe)
        .args(["victim", "--profile", profile, "--arch", arch, "--seed", &seed.to_string()])
        .spawn()?)
}

fn capture(a: &CaptureArgs) -> Result<()> {
    let arch = ArchProfile::by_name(&a.arch)?;
    let technique: Technique = a.technique.parse()?;
    let mut child = match &a.victim_profile {
        Some(p) => {
            let c = spawn_victim(p, &a.arch, a.seed)?;
            std::thread::sleep(Duration::from_millis(200));
            Some(c)
        }
        None => None,
    };
    let prober = probe::Prober::new(&arch, a.seed);
    let trace = prober.and_then(|p| match technique {
        Technique::Occupancy => p.capture_occupancy(a.duration_ms, a.period_ms.unwrap_or(arch.resolution_ms(technique))),
        Technique::SweepCount => {
            let w = a.period_ms.unwrap_or(arch.resolution_ms(technique)).round().max(1.0) as u64;
            p.capture_sweep_count(a.duration_ms, w)
        }
        t => Err(Error::UnsupportedTechnique(format!("{t} is not a native capture"))),
    });
    if let Some(c) = child.as_mut() {
        let _ = c.kill();
        let _ = c.wait();
    }
    let label = a.label.clone().or_else(|| a.victim_profile.clone()).unwrap_or_else(|| "capture".into());
    let trace = trace?.with_label(Some(label))?;
    let ds = single_trace_dataset(
        trace,
        &[("generator", "capture".into()), ("technique", technique.as_str().into()), ("arch", arch.name.clone())],
    )?;
    save_dataset(&ds, &a.out)
}

fn run_victim_cmd(a: &VictimArgs) -> Result<()> {
    let arch = ArchProfile::by_name(&a.arch)?;
    let profile = match (&a.profile_file, &a.profile) {
        (Some(path), _) => ActivityProfile::from_tsv(&fs::read_to_string(path)?, path)?,
        (None, Some(id)) => {
            let index = id
                .strip_prefix("site-")
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("profile id {id:?} is not site-<n>")))?;
            victim::library_profile(index, a.seed)
        }
        (None, None) => return Err(Error::InvalidArgument("need --profile or --profile-file".into())),
    };
    let stats = victim::run_victim(&profile, &arch, a.seed)?;
    println!(
        "{{\"profile\":\"{}\",\"ticks\":{},\"active_ticks\":{},\"lines_touched\":{}}}",
        profile.id, stats.ticks, stats.active_ticks, stats.lines_touched
    );
    Ok(())
}

fn simulate(a: &SimulateArgs, cmd: &Cmd) -> Result<()> {
    let exec = exec_of(a.sequential);
    let arch = ArchProfile::by_name(&a.arch)?;
    let technique: Technique = a.technique.parse()?;
    let mut params = if a.tor { SimParams::tor_like(arch) } else { SimParams::for_arch(arch) };
    if let Some(n) = a.decimation_n {
        params.decimation_n = n;
    }
    if let Some(s) = a.noise_sigma_us {
        params.noise_sigma_us = s;
    }
    let sigmas = parse_sigmas(&a.sigma_ms)?;
    let build = |sigma: f64, dir: &Path| -> Result<()> {
        let p = SimParams { jitter_sigma_ms: sigma, ..params.clone() };
        let ds = match a.n_other {
            Some(m) => sim::build_open_world(a.k, a.n, m, technique, &p, a.seed)?,
            None => sim::build_benchmark_with(exec, a.k, a.n, technique, &p, a.seed)?,
        };
        save_dataset(&ds, dir)
    };
    if let [sigma] = sigmas[..] {
        build(sigma, &a.out)?;
    } else {
        for &s in &sigmas {
            build(s, &a.out.join(sigma_dir(s)))?;
        }
    }
    write_manifest(&a.out.join(MANIFEST_FILE), cmd, exec)
}

fn wait_or_forever(d: Option<f64>) {
    match d {
        Some(s) => std::thread::sleep(Duration::from_secs_f64(s.max(0.0))),
        None => loop {
            std::thread::park();
        },
    }
}

fn serve_dns(a: &ServeDnsArgs) -> Result<()> {
    let zones = a.zones.iter().map(|z| z.parse::<Zone>()).collect::<Result<Vec<_>>>()?;
    let config = DnsConfig { answer: a.answer, ..DnsConfig::new(zones) };
    let server = DnsServer::spawn(SocketAddr::new(a.bind, a.port), config, Some(&a.log))?;
    log::info!("dns listening on {}", server.local_addr());
    eprintln!("listening on {}", server.local_addr());
    wait_or_forever(a.duration_s);
    server.shutdown().map(|_| ())
}

fn serve_ws(a: &ServeWsArgs) -> Result<()> {
    let server = ws::WsServer::spawn(SocketAddr::new(a.bind, a.port), Some(&a.log))?;
    eprintln!("listening on {}", server.local_addr());
    wait_or_forever(a.duration_s);
    server.shutdown();
    Ok(())
}

fn gen_payload(a: &GenPayloadArgs, cmd: &Cmd) -> Result<()> {
    let spec = PayloadSpec {
        ws_url: a.ws_url.clone(),
        n_elements: a.n_elements,
        class_len: a.class_len,
        needle_len: a.needle_len,
        decimation_n: a.decimation_n,
        rounds: a.rounds,
        duration_ms: a.duration_ms,
        seed: a.seed,
        ..PayloadSpec::new(a.technique.parse()?, ArchProfile::by_name(&a.arch)?, &a.domain, &a.trace_id)
    };
    let page = payload::generate(&spec)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, page)?;
    let mut manifest = a.out.clone().into_os_string();
    manifest.push(".manifest.json");
    write_manifest(Path::new(&manifest), cmd, Execution::Sequential)
}

fn recover_offset(a: &RecoverOffsetArgs) -> Result<()> {
    let trace = v8::load_push_trace(&a.trace)?;
    let spikes = v8::detect_resizes_with(&trace, a.mad_k)?;
    let est = v8::estimate_offset(&spikes)?;
    println!("{}", est.offset);
    if !est.exact {
        eprintln!("note: spike parity does not pin the offset; it may be {}", est.offset + 1);
    }
    Ok(())
}

fn classify(a: &ClassifyArgs, cmd: &Cmd) -> Result<()> {
    let exec = exec_of(a.sequential);
    if a.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let ds = load_dataset(&a.data)?;
    let knn = Knn { k: a.k };
    let report = analysis::evaluate_with(exec, &ds, a.n_points, &knn)?;
    analysis::emit_report(&report, &a.out)?;
    if let Some(levels) = &a.jitter {
        let points = analysis::jitter_sweep(&ds, &parse_sigmas(levels)?, a.n_points, &knn, a.seed)?;
        analysis::emit_jitter_curve(&points, &a.out)?;
    }
    println!("top1 {:.4} top5 {:.4}", report.top1, report.top5);
    write_manifest(&a.out.join(MANIFEST_FILE), cmd, exec)
}

fn measure_jitter(a: &MeasureJitterArgs, cmd: &Cmd) -> Result<()> {
    if !(a.rate_hz > 0.0) {
        return Err(Error::InvalidArgument("rate must be positive".into()));
    }
    let summary = match &a.log {
        Some(path) => {
            let log = ws::load_log(path)?;
            let conn = a
                .conn
                .or_else(|| ws::busiest_conn(&log))
                .ok_or(Error::InsufficientRecords(0))?;
            ws::jitter_stddev_ms(&log, conn, 1000.0 / a.rate_hz)?
        }
        None => ws::measure_ws_jitter(a.rate_hz, Duration::from_secs_f64(a.duration_s))?,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("jitter.json"), format!("{json}\n"))?;
    println!("{json}");
    write_manifest(&a.out.join(MANIFEST_FILE), cmd, Execution::Sequential)
}

fn report(a: &ReportArgs, cmd: &Cmd) -> Result<()> {
    let mut cells = Vec::new();
    for run in &a.runs {
        let s = analysis::load_report(run.join(analysis::REPORT_FILE))?;
        let get = |k: &str| s.params.get(k).cloned().unwrap_or_else(|| "-".into());
        cells.push(AccuracyCell {
            technique: get("data.technique"),
            arch: get("data.arch"),
            top1: s.metric("top1").unwrap_or(0.0),
            top5: s.metric("top5").unwrap_or(0.0),
        });
    }
    analysis::emit_accuracy_table(&cells, &a.out)?;
    print!("{}", analysis::accuracy_table(&cells)?);
    write_manifest(&a.out.join(MANIFEST_FILE), cmd, Execution::Sequential)
}

fn export(a: &ExportArgs, cmd: &Cmd) -> Result<()> {
    let arch = ArchProfile::by_name(&a.arch)?;
    let (trace, technique) = match (&a.dns_log, &a.ws_log) {
        (Some(path), _) => {
            let id = a
                .trace_id
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("--trace-id is required with --dns-log".into()))?;
            let e = dns::export_memorygram(&dns::load_log(path)?, id, &arch.name)?;
            if !e.missing.is_empty() || e.dropped > 0 {
                log::warn!("{} missing sequence numbers, {} gaps dropped", e.missing.len(), e.dropped);
            }
            (e.trace, Technique::CssPp)
        }
        (None, Some(path)) => {
            let log = ws::load_log(path)?;
            let conn = a.conn.or_else(|| ws::busiest_conn(&log)).ok_or(Error::InsufficientRecords(0))?;
            (ws::export_memorygram(&log, conn, &arch.name)?, Technique::StringSock)
        }
        (None, None) => return Err(Error::InvalidArgument("need --dns-log or --ws-log".into())),
    };
    let label = a.label.clone().or_else(|| a.trace_id.clone()).unwrap_or_else(|| "export".into());
    let ds = single_trace_dataset(
        trace.with_label(Some(label))?,
        &[("generator", "export".into()), ("technique", technique.as_str().into()), ("arch", arch.name.clone())],
    )?;
    save_dataset(&ds, &a.out)?;
    write_manifest(&a.out.join(MANIFEST_FILE), cmd, Execution::Sequential)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    match cmd {
        Cmd::Capture(a) => {
            capture(a)?;
            write_manifest(&a.out.join(MANIFEST_FILE), cmd, Execution::Sequential)
        }
        Cmd::Victim(a) => run_victim_cmd(a),
        Cmd::Simulate(a) => simulate(a, cmd),
        Cmd::ServeDns(a) => serve_dns(a),
        Cmd::ServeWs(a) => serve_ws(a),
        Cmd::GenPayload(a) => gen_payload(a, cmd),
        Cmd::RecoverOffset(a) => recover_offset(a),
        Cmd::ClassifyBaseline(a) => classify(a, cmd),
        Cmd::MeasureJitter(a) => measure_jitter(a, cmd),
        Cmd::Report(a) => report(a, cmd),
        Cmd::Export(a) => export(a, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sigma_lists() {
        assert_eq!(parse_sigmas("0..25").unwrap(), JITTER_LEVELS.to_vec());
        assert_eq!(parse_sigmas("1..5").unwrap(), vec![1.0, 5.0]);
        assert_eq!(parse_sigmas("0, 2.5").unwrap(), vec![0.0, 2.5]);
        assert!(parse_sigmas("-1").is_err());
        assert!(parse_sigmas("x").is_err());
        assert!(parse_sigmas("30..40").is_err());
    }
}
