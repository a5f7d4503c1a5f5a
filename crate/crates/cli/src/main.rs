use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use decaymem::gateway::{HttpEmbedder, HttpTransport, RemoteSettings};
use decaymem::harness::{self, RunEnv, Scenario, Schedule, TraceSpec};
use decaymem::store::{replay, TEST_EMBEDDING_DIM};
use decaymem::{AblationMode, Embedder, EngineConfig, HashEmbedder, LevelSet, ManualClock, Store, Transport};

#[derive(Parser)]
#[command(name = "decaymem", version, about = "Decay-driven conversational memory engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (builtin name or TOML path) and print its summary.
    Run(RunArgs),
    /// Write retention traces for a synthetic population as CSV.
    TraceDecay(TraceArgs),
    /// Run a scenario under each level combination.
    Ablate(AblateArgs),
    /// Rebuild a store from its journal and compare it with the original.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Backend {
    /// Use the HTTP chat and embedding provider configured by DECAYMEM_* variables.
    #[arg(long)]
    remote: bool,
    /// Embedding dimension; must match the provider when --remote is set.
    #[arg(long, default_value_t = TEST_EMBEDDING_DIM)]
    embedding_dim: usize,
}

impl Backend {
    fn embedder(&self) -> Arc<dyn Embedder> {
        if self.remote {
            Arc::new(HttpEmbedder::new(RemoteSettings::from_env(), self.embedding_dim))
        } else {
            Arc::new(HashEmbedder::new(self.embedding_dim))
        }
    }

    fn transport(&self) -> Option<Arc<dyn Transport>> {
        self.remote
            .then(|| Arc::new(HttpTransport::new(RemoteSettings::from_env())) as Arc<dyn Transport>)
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with engine settings; overrides the scenario's own.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer ablation mode (M1..M5).
    #[arg(long)]
    mode: Option<String>,
    /// Enabled levels, e.g. "L1,L2,L3".
    #[arg(long, conflicts_with = "mode")]
    levels: Option<String>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    episode_length: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u32>,
    /// Keep the initial topic set fixed.
    #[arg(long)]
    static_topics: bool,
    #[arg(long)]
    no_linking: bool,
}

impl ConfigArgs {
    fn resolve(&self, base: EngineConfig) -> Result<EngineConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                EngineConfig::from_toml(&text)?
            }
            None => base,
        };
        if let Some(m) = &self.mode {
            c = c.with_mode(AblationMode::parse(m)?);
        }
        if let Some(l) = &self.levels {
            c.enabled_levels = LevelSet::parse(l)?;
        }
        if let Some(v) = self.buffer_capacity {
            c.buffer_capacity = v;
        }
        if let Some(v) = self.temperature {
            c.decay_temperature = v;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.episode_length {
            c.episode_length = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_read_iterations = v;
        }
        if self.static_topics {
            c.dynamic_topics = false;
        }
        if self.no_linking {
            c.memory_linking = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    scenario: String,
    /// Persist memories in this directory instead of in memory.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Write the full per-turn report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    backend: Backend,
    #[command(flatten)]
    engine: ConfigArgs,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 5.0, 10.0, 20.0, 50.0])]
    temperatures: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    turns: u64,
    /// Reinforce every entity at these turns.
    #[arg(long, value_delimiter = ',', conflicts_with = "every")]
    reinforce_at: Vec<u64>,
    /// Reinforce every entity every K turns.
    #[arg(long)]
    every: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "restaurant")]
    scenario: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["M1".to_string(), "M2".into(), "M3".into(), "M4".into(), "M5".into()])]
    modes: Vec<String>,
    /// Print rows as JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    backend: Backend,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = TEST_EMBEDDING_DIM)]
    embedding_dim: usize,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn run(args: RunArgs) -> Result<()> {
    let scenario = Scenario::load(&args.scenario)?;
    let config = args.engine.resolve(scenario.engine_config())?;
    let embedder = args.backend.embedder();
    let store = match &args.store {
        Some(dir) => Store::open(dir, embedder.dimension())?,
        None => Store::in_memory(embedder.dimension()),
    };
    let env = RunEnv {
        store,
        embedder,
        transport: args.backend.transport(),
        clock: Box::new(ManualClock::default()),
    };
    let (report, _) = harness::run_scenario(&scenario, &config, env)?;
    if let Some(path) = &args.report {
        let mut out = output(&Some(path.clone()))?;
        serde_json::to_writer_pretty(&mut out, &report)?;
        out.flush()?;
    }
    let summary = serde_json::json!({
        "scenario": report.scenario,
        "summary": report.summary,
        "probes": report.probes,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn trace(args: TraceArgs) -> Result<()> {
    let schedule = match (args.every, args.reinforce_at.is_empty()) {
        (Some(k), _) => Schedule::Every(k),
        (None, false) => Schedule::At(args.reinforce_at),
        (None, true) => Schedule::Never,
    };
    let spec = TraceSpec {
        temperatures: args.temperatures,
        turns: args.turns,
        schedule,
        epsilon: args.epsilon,
        ..TraceSpec::default()
    };
    let rows = harness::trace_decay(&spec, &harness::default_population())?;
    let mut out = output(&args.out)?;
    harness::write_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let scenario = Scenario::load(&args.scenario)?;
    let modes = args.modes.iter().map(|m| AblationMode::parse(m)).collect::<Result<Vec<_>, _>>()?;
    let rows = harness::ablate(&scenario, &scenario.engine_config(), &modes, args.backend.embedder(), || {
        args.backend.transport()
    })?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("mode  levels     L2   L3   links  symmetric  tokens/query  solved  structure");
    for r in &rows {
        println!(
            "{:<5} {:<10} {:<4} {:<4} {:<6} {:<10} {:<13.1} {}/{:<4}  {}",
            r.mode.to_string(),
            r.levels.to_string(),
            r.l2_records,
            r.l3_records,
            r.links.link_count,
            r.links.symmetric,
            r.tokens_per_query,
            r.solved,
            r.probes,
            if r.structural_ok { "ok" } else { "BROKEN" }
        );
    }
    if rows.iter().any(|r| !r.structural_ok) {
        bail!("structural check failed");
    }
    Ok(())
}

fn replay_cmd(args: ReplayArgs) -> Result<()> {
    let report = replay(&args.source, &args.target, args.embedding_dim)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.identical {
        bail!("replayed store differs from the source");
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::TraceDecay(a) => trace(a),
        Command::Ablate(a) => ablate(a),
        Command::Replay(a) => replay_cmd(a),
    }
}
