//! The `raft` command line.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use raft_core::digest::HashAlgorithm;
use raft_core::model::DeviceDescriptor;
use raft_core::timing::{estimate_total_time, estimate_with_retransmissions, TimingInputs};

use crate::agent::{self, AcquireMode, Agent, AgentError, DeviceStatus, FailureKind, InventoryError, JobStatus};
use crate::bench::{bench_hash, parse_size};
use crate::config::{AgentConfig, ServerFileConfig};
use crate::control_api;
use crate::hashing::digest_stream;
use crate::imaging::{open_source, source_length, split_to_files, ImagingError};
use crate::server::{run_server, ServerConfig, ServerError, ServerHooks};
use crate::store::StoreError;
use crate::transport::TransportError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DOMAIN: i32 = 3;
pub const EXIT_AUTH: i32 = 4;
pub const EXIT_PROTOCOL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "raft", version, about = "Remote forensic acquisition over an untrusted network")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the evidence server.
    Server(ServerArgs),
    /// Run the client agent: headless acquisition or the local control API.
    Client(ClientArgs),
    /// Split a local source into chunk files with a hash-window log.
    Image(ImageArgs),
    /// Print the digest of a file.
    Hash(HashArgs),
    /// Benchmark hash throughput over zero-filled files.
    Bench(BenchArgs),
    /// Estimate total acquisition time T = H/B + C/V.
    Estimate(EstimateArgs),
    /// List known backdoor BIOS passwords for a manufacturer.
    BiosLookup(BiosArgs),
}

#[derive(Debug, Args)]
struct ServerArgs {
    /// Evidence store root.
    #[arg(long, env = "RAFT_STORE")]
    store: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    /// Interface to bind.
    #[arg(long)]
    bind: Option<String>,
    /// Server config file (`key: value`).
    #[arg(long, env = "RAFT_CONFIG")]
    config: Option<PathBuf>,
    /// Session passphrase clients must prove knowledge of.
    #[arg(long, env = "RAFT_PASSPHRASE", hide_env_values = true)]
    passphrase: Option<String>,
    /// Seconds of client silence before a session is suspended.
    #[arg(long)]
    idle_timeout: Option<u64>,
}

#[derive(Debug, Args)]
struct ClientArgs {
    /// Client config file (`key: value`).
    #[arg(long, env = "RAFT_CONFIG")]
    config: Option<PathBuf>,
    /// Acquire without the control API.
    #[arg(long)]
    headless: bool,
    /// Acquire every enumerated device.
    #[arg(long)]
    all: bool,
    /// Allow a transport without confidentiality, integrity and server authentication.
    #[arg(long)]
    insecure: bool,
    /// Unlock passphrase for headless mode.
    #[arg(long, env = "RAFT_PASSPHRASE", hide_env_values = true)]
    passphrase: Option<String>,
    /// Control API address (loopback only unless --allow-remote-control).
    #[arg(long)]
    control_bind: Option<String>,
    #[arg(long)]
    allow_remote_control: bool,
    /// Seed for the configured fault plan.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ImageArgs {
    source: PathBuf,
    #[arg(long)]
    chunk_size: String,
    /// Comma separated algorithms.
    #[arg(long, default_value = "sha512")]
    hash: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HashArgs {
    file: PathBuf,
    /// Comma separated algorithms.
    #[arg(long, default_value = "sha512")]
    alg: String,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma separated sizes, e.g. `64MiB,128MiB,256MiB`.
    #[arg(long, default_value = "64MiB,128MiB,256MiB")]
    sizes: String,
    #[arg(long, default_value = "sha256,sha512")]
    algs: String,
    /// Repetitions per measurement; the fastest is kept.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Directory for the zero-filled fixtures.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Image size in bits.
    #[arg(long = "H")]
    h: f64,
    /// Upload bandwidth in bits per second.
    #[arg(long = "B")]
    b: f64,
    /// Chunk size in bits.
    #[arg(long = "C")]
    c: f64,
    /// Server verify speed in bits per second.
    #[arg(long = "V")]
    v: f64,
    /// Expected chunk corruption probability (extension to the formula).
    #[arg(long, requires = "retries")]
    corrupt_probability: Option<f64>,
    /// Expected retransmissions per corrupted chunk.
    #[arg(long)]
    retries: Option<f64>,
}

#[derive(Debug, Args)]
struct BiosArgs {
    manufacturer: String,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl Display) -> Failure {
    Failure { code, message: message.to_string() }
}

fn usage(message: impl Display) -> Failure {
    fail(EXIT_USAGE, message)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Server(a) => server(a),
        Command::Client(a) => client(a),
        Command::Image(a) => image(a),
        Command::Hash(a) => hash(a),
        Command::Bench(a) => bench(a),
        Command::Estimate(a) => estimate(a),
        Command::BiosLookup(a) => bios(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("raft: {}", f.message);
            f.code
        }
    }
}

fn algorithms(list: &str) -> Result<Vec<HashAlgorithm>, Failure> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let alg: HashAlgorithm = name.parse().map_err(|_| {
            let supported: Vec<_> = HashAlgorithm::ALL.iter().map(|a| a.name()).collect();
            usage(format!("unknown algorithm `{name}`; supported: {}", supported.join(", ")))
        })?;
        if !out.contains(&alg) {
            out.push(alg);
        }
    }
    if out.is_empty() {
        return Err(usage("no algorithm given"));
    }
    Ok(out)
}

/// Receives one message per SIGINT or SIGTERM.
fn interrupt_channel() -> mpsc::Receiver<()> {
    let (tx, rx) = mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        log::warn!("cannot install signal handler: {e}");
    }
    rx
}

fn server(a: ServerArgs) -> Result<(), Failure> {
    let file = match &a.config {
        Some(p) => ServerFileConfig::load(p).map_err(usage)?,
        None => ServerFileConfig::default(),
    };
    let store = a.store.or(file.store).ok_or_else(|| usage("no evidence store given (--store or RAFT_STORE)"))?;
    let passphrase = a
        .passphrase
        .or(file.passphrase)
        .ok_or_else(|| usage("no session passphrase given (--passphrase, RAFT_PASSPHRASE or config)"))?;
    let host = a.bind.unwrap_or(file.bind_host);
    let port = a.port.unwrap_or(file.port);
    let mut config = ServerConfig::new(store, format!("{host}:{port}"), Some(passphrase.into_bytes()));
    config.idle_timeout = a.idle_timeout.map(Duration::from_secs).unwrap_or(file.idle_timeout);
    config.hooks = ServerHooks::default();

    let interrupts = interrupt_channel();
    let outcomes = run_server(config, move |addr, handle| {
        log::info!("ready: listening on {addr}");
        std::thread::spawn(move || {
            if interrupts.recv().is_ok() {
                log::info!("shutdown requested; finishing in-flight verification");
                handle.shutdown();
            }
        });
    })
    .map_err(|e| match e {
        ServerError::Store(StoreError::Unwritable { .. }) => usage(e),
        ServerError::Transport(TransportError::BindFailed { .. }) => usage(e),
        other => fail(EXIT_DOMAIN, other),
    })?;
    let verified = outcomes.iter().filter(|o| o.verdict == Some(raft_core::model::FinalVerdict::Verified)).count();
    log::info!("server stopped after {} sessions ({verified} verified)", outcomes.len());
    Ok(())
}

fn agent_failure(e: AgentError) -> Failure {
    let code = match &e {
        AgentError::BadPassphrase { .. } | AgentError::Locked | AgentError::NotProvisioned | AgentError::NotUnlocked => EXIT_AUTH,
        AgentError::NoDevices | AgentError::Inventory(_) => EXIT_DOMAIN,
        AgentError::JobRunning(_) | AgentError::UnknownJob(_) | AgentError::JobFinished(_) => EXIT_DOMAIN,
    };
    fail(code, e)
}

/// Exit code for a finished headless job: the most severe device failure.
pub fn job_exit_code(status: &JobStatus) -> i32 {
    let rank = |k: FailureKind| match k {
        FailureKind::InsecureChannel => (4, EXIT_USAGE),
        FailureKind::Auth => (3, EXIT_AUTH),
        FailureKind::Protocol | FailureKind::Transport => (2, EXIT_PROTOCOL),
        FailureKind::Source | FailureKind::Aborted => (1, EXIT_DOMAIN),
    };
    status
        .devices
        .iter()
        .filter(|d| d.status != DeviceStatus::Verified)
        .map(|d| d.failure.map(rank).unwrap_or((1, EXIT_DOMAIN)))
        .max()
        .map(|(_, code)| code)
        .unwrap_or(EXIT_OK)
}

fn client(a: ClientArgs) -> Result<(), Failure> {
    let path = a.config.ok_or_else(|| usage("no client config given (--config or RAFT_CONFIG)"))?;
    let mut config = AgentConfig::load(&path).map_err(usage)?;
    if a.insecure {
        config.insecure_transport_ok = true;
    }
    if let (Some(seed), Some(plan)) = (a.seed, config.fault.as_mut()) {
        plan.seed = seed;
    }
    if let Some(bind) = a.control_bind {
        config.control_bind = bind;
    }
    let connector = agent::tcp_connector(&config);
    let bind = config.control_bind.clone();
    let agent = Agent::new(config, connector).map_err(|e| match e {
        AgentError::Inventory(InventoryError::ScanRootMissing(_)) => fail(EXIT_DOMAIN, e),
        AgentError::Inventory(InventoryError::DuplicateDevice(_)) => usage(e),
        other => agent_failure(other),
    })?;

    if a.headless {
        if !a.all {
            return Err(usage("headless mode acquires every device; pass --all"));
        }
        let passphrase = a.passphrase.ok_or_else(|| usage("headless mode needs --passphrase or RAFT_PASSPHRASE"))?;
        let status = agent.run_headless(passphrase.as_bytes(), AcquireMode::All).map_err(agent_failure)?;
        print_job(&status);
        return match job_exit_code(&status) {
            EXIT_OK => Ok(()),
            code => Err(fail(code, format!("{} of {} devices not verified", status.devices.iter().filter(|d| d.status != DeviceStatus::Verified).count(), status.devices.len()))),
        };
    }

    let api = control_api::start(agent, &bind, a.allow_remote_control).map_err(usage)?;
    log::info!("ready: control API on http://{}", api.addr());
    let interrupts = interrupt_channel();
    let _ = interrupts.recv();
    log::info!("shutting down control API");
    api.stop();
    Ok(())
}

fn print_job(status: &JobStatus) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "device\tstatus\tsession\tchunks\tnaks\tdigest_or_error");
    for d in &status.devices {
        let status = serde_json::to_value(d.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let tail = d.whole_image_digest.clone().or_else(|| d.error.clone()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            d.device_id,
            status,
            d.session_id.as_deref().unwrap_or("-"),
            d.chunks,
            d.naks,
            tail
        );
    }
}

fn imaging_failure(e: ImagingError) -> Failure {
    fail(EXIT_DOMAIN, e)
}

fn image(a: ImageArgs) -> Result<(), Failure> {
    let chunk_size = parse_size(&a.chunk_size).filter(|n| *n > 0).ok_or_else(|| usage(format!("invalid chunk size `{}`", a.chunk_size)))?;
    let algs = algorithms(&a.hash)?;
    let total = source_length(&a.source).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => imaging_failure(ImagingError::NotFound(a.source.clone())),
        _ => fail(EXIT_DOMAIN, format!("cannot open {}: {e}", a.source.display())),
    })?;
    let name = a.source.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "source".into());
    let descriptor = DeviceDescriptor::new(name.clone(), name, total);
    let mut source = open_source(&descriptor, &a.source).map_err(imaging_failure)?;
    let out = split_to_files(&mut source, chunk_size, &a.out, &algs).map_err(imaging_failure)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{} chunk files written to {}", out.files.len(), a.out.display());
    let _ = write!(stdout, "{}", out.hash_log.to_text());
    Ok(())
}

fn hash(a: HashArgs) -> Result<(), Failure> {
    let algs = algorithms(&a.alg)?;
    let mut out = std::io::stdout().lock();
    for alg in algs {
        let file = std::fs::File::open(&a.file).map_err(|e| fail(EXIT_DOMAIN, format!("cannot open {}: {e}", a.file.display())))?;
        let digest = digest_stream(file, alg).map_err(|e| fail(EXIT_DOMAIN, e))?;
        let _ = writeln!(out, "{}  {}  {}", digest.to_hex(), alg.name(), a.file.display());
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let mut sizes = Vec::new();
    for s in a.sizes.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        sizes.push(parse_size(s).filter(|n| *n > 0).ok_or_else(|| usage(format!("invalid size `{s}`")))?);
    }
    let algs = algorithms(&a.algs)?;
    let dir = a.dir.unwrap_or_else(std::env::temp_dir);
    let report = bench_hash(&sizes, &algs, a.reps, &dir).map_err(|e| match e {
        crate::bench::BenchError::Empty => usage(e),
        other => fail(EXIT_DOMAIN, other),
    })?;
    print!("{}", report.to_tsv());
    if let Some(path) = a.json {
        std::fs::write(&path, report.to_json()).map_err(|e| fail(EXIT_DOMAIN, format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<(), Failure> {
    let inputs = TimingInputs::new(a.h, a.b, a.c, a.v).map_err(usage)?;
    let t = match (a.corrupt_probability, a.retries) {
        (Some(p), Some(r)) => {
            if !(0.0..=1.0).contains(&p) || r < 0.0 {
                return Err(usage("corrupt probability must be within [0, 1] and retries non-negative"));
            }
            estimate_with_retransmissions(&inputs, p, r)
        }
        _ => estimate_total_time(&inputs),
    };
    println!("{t:?}");
    log::info!("estimated total time {:.2} min", t / 60.0);
    Ok(())
}

fn bios(a: BiosArgs) -> Result<(), Failure> {
    let r = agent::lookup_bios_backdoor(&a.manufacturer);
    let mut out = std::io::stdout().lock();
    for p in r.passwords {
        let _ = writeln!(out, "{p}");
    }
    match r.advisory {
        Some(advisory) if r.passwords.is_empty() => Err(fail(EXIT_DOMAIN, advisory)),
        _ => Ok(()),
    }
}
