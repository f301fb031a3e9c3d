mod bench;
mod config;

use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splitfed_core::attack::{run_differential, AttackConfig};
use splitfed_core::crypto::rsa;
use splitfed_core::data::{Dataset, Sample, TaskConfig};
use splitfed_core::eval::evaluate_dataset;
use splitfed_core::model::checkpoint;
use splitfed_core::orchestrator::{self, derive_seed, metrics, RunConfig, RunOptions, TrainingStrategy, TransportKind};
use splitfed_core::transport::Connection;
use splitfed_core::{Error, Result};

#[derive(Parser)]
#[command(name = "splitfed", version, about = "Split federated training of a small transformer language model")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured strategy; writes metrics.csv, summary.json and model.ckpt.
    Train(TrainArgs),
    /// Wall time per fixed sample budget across strategies and client counts.
    Bench(BenchArgs),
    /// Inversion attack against both split variants.
    Attack(AttackArgs),
    /// Generate an RSA key pair for inspection.
    Keygen(KeygenArgs),
    /// Score a checkpoint on a task file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.hidden=32`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    /// Server and clients in this process.
    All,
    Server,
    Client,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Tcp,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Server listen address.
    #[arg(long, env = "SPLITFED_BIND")]
    bind: Option<String>,
    /// Server address to join as a client; implies `--role client`.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, value_enum)]
    role: Option<Role>,
    #[arg(long, default_value_t = 0)]
    client_id: u32,
    #[arg(short, long, default_value = "splitfed-out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Client counts to measure.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    clients: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "serial,client_batch,server_hierarchical")]
    strategies: Vec<TrainingStrategy>,
    /// Training samples per run, summed over clients.
    #[arg(long, default_value_t = 1000)]
    samples: u64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Also write the rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Report JSON path.
    #[arg(short, long, default_value = "attack-report.json")]
    out: PathBuf,
    /// Keep the captured smashed data here.
    #[arg(long)]
    capture_dir: Option<PathBuf>,
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, default_value_t = 2048)]
    bits: u64,
    #[arg(short, long)]
    out: PathBuf,
    /// Deterministic keys from this seed; OS entropy otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON task file: `{"task": {...}, "seed": N}` or `{"samples": [...]}`.
    #[arg(long)]
    task: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<TrainingStrategy, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let r = match cli.command {
        Command::Train(a) => train(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Attack(a) => attack(a),
        Command::Keygen(a) => keygen(a),
        Command::Eval(a) => eval(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_protocol() => 3,
        _ => 1,
    }
}

fn run_config(a: &ConfigArgs) -> Result<RunConfig> {
    let v = config::load(a.config.as_deref(), &a.sets)?;
    RunConfig::from_json(&v.to_string())
}

/// Stop flag raised by ctrl-c.
fn stop_on_interrupt() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupt: finishing the current round and flushing metrics");
        s.store(true, Ordering::SeqCst);
    }) {
        log::warn!("no ctrl-c handler: {e}");
    }
    stop
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), v)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.cfg)?;
    if let Some(t) = a.transport {
        cfg.transport.kind = match t {
            TransportArg::Loopback => TransportKind::Loopback,
            TransportArg::Tcp => TransportKind::Tcp,
        };
    }
    if let Some(b) = &a.bind {
        cfg.transport.bind = b.clone();
    }
    let role = a.role.unwrap_or(if a.connect.is_some() { Role::Client } else { Role::All });
    if role != Role::All && cfg.transport.kind == TransportKind::Loopback && a.transport.is_some() {
        return Err(Error::Config("separate server and client processes need --transport tcp".into()));
    }
    if role != Role::All {
        cfg.transport.kind = TransportKind::Tcp;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let opts = RunOptions {
        stop: Some(stop_on_interrupt()),
        ..RunOptions::default()
    };
    match role {
        Role::All => {
            let report = orchestrator::run_with(&cfg, &opts)?;
            metrics::write_csv(&a.out.join("metrics.csv"), &report.records)?;
            let summary = report.summary(&cfg);
            summary.write_json(&a.out.join("summary.json"))?;
            checkpoint::save(&report.model()?, &a.out.join("model.ckpt"))?;
            let loss = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "{:?}, {} clients: loss {} -> {}, {:.1}s{}; wrote {}",
                cfg.strategy,
                cfg.clients,
                loss(summary.initial_loss),
                loss(summary.final_loss),
                report.wall_ms / 1e3,
                if report.interrupted { " (interrupted)" } else { "" },
                a.out.display()
            );
        }
        Role::Server => {
            let listener = TcpListener::bind(&cfg.transport.bind)?;
            println!("listening on {}", listener.local_addr()?);
            let _ = std::io::stdout().flush();
            let (_, stats) = orchestrator::serve(&cfg, &listener)?;
            write_json(
                &a.out.join("server.json"),
                &serde_json::json!({ "config": cfg, "server": stats }),
            )?;
            println!("server done: {} updates, {} syncs", stats.updates, stats.syncs);
        }
        Role::Client => {
            let addr = a
                .connect
                .clone()
                .ok_or_else(|| Error::Config("--role client needs --connect".into()))?;
            let conn = Connection::connect(addr.as_str(), Duration::from_millis(cfg.transport.connect_timeout_ms))?;
            let (_, records, summary) = orchestrator::run_client(&cfg, a.client_id, conn, &opts)?;
            metrics::write_csv(&a.out.join(format!("metrics-client{}.csv", a.client_id)), &records)?;
            write_json(
                &a.out.join(format!("summary-client{}.json", a.client_id)),
                &serde_json::json!({ "config": cfg, "client": summary }),
            )?;
            println!("client {} done: {} steps", a.client_id, summary.steps);
        }
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = run_config(&a.cfg)?;
    if a.clients.is_empty() || a.clients.contains(&0) {
        return Err(Error::Config("client counts must be positive".into()));
    }
    let rows = bench::run(&cfg, &a.strategies, &a.clients, a.samples, a.repeats)?;
    print!("{}", bench::table(&rows));
    if let Some(p) = &a.csv {
        bench::write_csv(p, &rows)?;
    }
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let cfg: AttackConfig = config::parse(config::load(a.cfg.config.as_deref(), &a.cfg.sets)?)?;
    cfg.validate()?;
    if let Some(d) = &a.capture_dir {
        std::fs::create_dir_all(d)?;
    }
    let r = run_differential(&cfg, a.capture_dir.as_deref())?;
    r.write_json(&a.out)?;
    println!("{:<6} {:>14} {:>14} {:>14} {:>14}", "seed", "emb acc", "block acc", "emb rouge-1", "block rouge-1");
    for s in &r.per_seed {
        println!(
            "{:<6} {:>14.4} {:>14.4} {:>14.4} {:>14.4}",
            s.seed, s.embedding_accuracy, s.front_block_accuracy, s.embedding_rouge_1, s.front_block_rouge_1
        );
    }
    for v in [&r.embedding_only, &r.front_block] {
        let failed = v.seeds.iter().filter(|s| s.failed.is_some()).count();
        let m = &v.metrics.mean;
        println!(
            "{:?} ({:?}): accuracy {:.4}, rouge-1 {:.4}, rouge-2 {:.4}, rouge-l {:.4}, bleu-4 {:.4}{}",
            v.variant,
            v.arch,
            m.accuracy,
            m.rouge_1,
            m.rouge_2,
            m.rouge_l,
            m.bleu_4,
            if failed > 0 { format!(", {failed} seed(s) diverged") } else { String::new() }
        );
    }
    println!(
        "accuracy ratio {:.2}, front-block rouge-1 below embedding in every seed: {}",
        r.accuracy_ratio, r.rouge_1_ordered
    );
    Ok(())
}

#[derive(Serialize)]
struct KeyFile {
    bits: u64,
    n: String,
    e: String,
    d: String,
}

fn keygen(a: KeygenArgs) -> Result<()> {
    let (pk, sk) = match a.seed {
        Some(s) => rsa::keygen(a.bits, &mut ChaCha8Rng::seed_from_u64(s))?,
        None => rsa::keygen(a.bits, &mut ChaCha8Rng::from_entropy())?,
    };
    let key = KeyFile {
        bits: pk.n.bits(),
        n: pk.n.to_str_radix(16),
        e: pk.e.to_str_radix(16),
        d: sk.d().to_str_radix(16),
    };
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
    let f = opts.open(&a.out)?;
    serde_json::to_writer_pretty(f, &key)?;
    println!("{}-bit key pair written to {}", key.bits, a.out.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSpec {
    input: Vec<usize>,
    target: Vec<usize>,
    #[serde(default)]
    label: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    /// Generated task; scored on the held-out split a run with master
    /// seed `seed` would use.
    task: Option<TaskConfig>,
    #[serde(default)]
    seed: u64,
    samples: Option<Vec<SampleSpec>>,
}

fn load_task(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let tf: TaskFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match (tf.task, tf.samples) {
        (Some(t), None) => Ok(t.build(derive_seed(tf.seed, "data", 0)).1),
        (None, Some(s)) => Ok(Dataset {
            samples: s
                .into_iter()
                .map(|s| Sample {
                    input: s.input,
                    target: s.target,
                    label: s.label,
                })
                .collect(),
        }),
        _ => Err(Error::Config("task file needs exactly one of \"task\" and \"samples\"".into())),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let data = load_task(&a.task)?;
    if data.is_empty() {
        return Err(Error::Config("task has no samples".into()));
    }
    let cfg = &model.config;
    for s in &data.samples {
        if s.input.len() != s.target.len() || s.input.is_empty() || s.input.len() > cfg.max_seq_len {
            return Err(Error::Config("sample lengths must match and fit max_seq_len".into()));
        }
        if s.input.iter().any(|&t| t >= cfg.vocab) {
            return Err(Error::Config("sample token outside the model vocabulary".into()));
        }
    }
    let r = evaluate_dataset(&model, &data)?;
    let text = serde_json::to_string_pretty(&r)?;
    match &a.out {
        Some(p) => std::fs::write(p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}
