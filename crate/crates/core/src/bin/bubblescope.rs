use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bubblescope::error::{Error, Result};
use bubblescope::events::AccelerationVariant;
use bubblescope::ingest::{load_categories, open_reader, parse_transfers, parse_wallet_txs};
use bubblescope::pipeline::{
    regress_tables, run_pipeline, run_stage, with_threads, PipelineConfig, Stage, Workspace,
};
use bubblescope::synth::{generate_market, SynthConfig};
use bubblescope::washtrade::benford_test;

#[derive(Parser)]
#[command(name = "bubblescope", version, about = "NFT run-up, crash and wash-trade analytics")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifacts directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the synthetic-market seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Upstream {
    /// Directory holding upstream artifacts (defaults to --out).
    #[arg(long = "in")]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalizes raw transfers, funding edges, categories and wallet transactions.
    Ingest {
        #[arg(long)]
        trades: Option<PathBuf>,
        #[arg(long)]
        funding: Option<PathBuf>,
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        txlog: Option<PathBuf>,
        /// Directory with the default file names.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Builds the hourly collection panel and its winsorized summary.
    Panel {
        #[command(flatten)]
        up: Upstream,
        #[arg(long)]
        winsorize: Option<f64>,
    },
    /// Detects run-ups and labels crashes.
    Detect {
        #[command(flatten)]
        up: Upstream,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        crash_threshold: Option<f64>,
        #[arg(long)]
        min_volume: Option<f64>,
        #[arg(long, value_parser = ["body", "caption"])]
        acceleration: Option<String>,
    },
    /// Flags wash trades.
    Wash {
        #[command(flatten)]
        up: Upstream,
        #[arg(long)]
        exclusions: Option<PathBuf>,
        #[command(subcommand)]
        sub: Option<WashSub>,
    },
    /// Agent profits, sophistication, timing and ownership.
    Agents {
        #[command(flatten)]
        up: Upstream,
        #[arg(long)]
        txlog: Option<PathBuf>,
        #[arg(long)]
        categories: Option<PathBuf>,
    },
    /// Writes one regression table and prints it.
    Regress {
        #[command(flatten)]
        up: Upstream,
        #[arg(long, value_parser = ["2", "3", "5", "6"])]
        table: String,
    },
    /// Out-of-sample crash-prediction strategy.
    Backtest {
        #[command(flatten)]
        up: Upstream,
        #[arg(long)]
        split: Option<String>,
    },
    /// Generates a synthetic market with ground truth.
    Simulate,
    /// Runs the configured stages end to end and writes a manifest.
    Run {
        /// Comma-separated stage list (default: all).
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
}

#[derive(Subcommand)]
enum WashSub {
    /// First-digit test on trade prices, printed as JSON.
    Benford {
        /// Directory holding transfers.jsonl or trades.jsonl.
        #[arg(long)]
        trades: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.get_or_insert_with(SynthConfig::default).seed = seed;
    }
    Ok(cfg)
}

fn synth_config(cli: &Cli) -> Result<SynthConfig> {
    let mut sc = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            match PipelineConfig::from_toml(&text) {
                Ok(pc) if pc.synth.is_some() => pc.synth.unwrap(),
                _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            }
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = cli.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn workspace(out: &Path, up: &Upstream) -> Result<Workspace> {
    match &up.input {
        Some(src) => Workspace::with_source(out, src),
        None => Workspace::new(out),
    }
}

fn find_trades(dir: &Path) -> Option<PathBuf> {
    ["transfers.jsonl", "trades.jsonl"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Simulate = cli.command {
        let sc = synth_config(&cli)?;
        let m = generate_market(&sc)?;
        m.write_to(&cli.out)?;
        log::info!(
            "wrote {} transfers and {} planted events to {}",
            m.transfers.len(),
            m.truth.events.len(),
            cli.out.display()
        );
        return Ok(());
    }
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Ingest {
            trades,
            funding,
            categories,
            txlog,
            dir,
        } => {
            let input = &mut cfg.input;
            input.dir = dir.or(input.dir.take());
            input.trades = trades.or(input.trades.take());
            input.funding = funding.or(input.funding.take());
            input.categories = categories.or(input.categories.take());
            input.wallet_txs = txlog.or(input.wallet_txs.take());
            let mut ws = Workspace::new(&out)?;
            run_stage(&mut ws, Stage::Ingest, &cfg)?;
        }
        Command::Panel { up, winsorize } => {
            if let Some(w) = winsorize {
                cfg.panel.winsorize = w;
            }
            run_stage(&mut workspace(&out, &up)?, Stage::Panel, &cfg)?;
        }
        Command::Detect {
            up,
            threshold,
            crash_threshold,
            min_volume,
            acceleration,
        } => {
            let d = &mut cfg.detect;
            d.runup_threshold = threshold.unwrap_or(d.runup_threshold);
            d.crash_threshold = crash_threshold.unwrap_or(d.crash_threshold);
            d.min_volume_eth = min_volume.unwrap_or(d.min_volume_eth);
            match acceleration.as_deref() {
                Some("caption") => d.acceleration = AccelerationVariant::Caption,
                Some(_) => d.acceleration = AccelerationVariant::Body,
                None => {}
            }
            run_stage(&mut workspace(&out, &up)?, Stage::Detect, &cfg)?;
        }
        Command::Wash { up, exclusions, sub } => match sub {
            Some(WashSub::Benford { trades }) => {
                let dir = trades.or(up.input).unwrap_or(out);
                let path = if dir.is_file() {
                    dir
                } else {
                    find_trades(&dir).ok_or_else(|| Error::MissingStage {
                        stage: "ingest",
                        artifact: dir.join("transfers.jsonl").display().to_string(),
                    })?
                };
                let (log, _) = parse_transfers(open_reader(&path)?)?;
                let prices: Vec<f64> = log.trades().map(|t| t.price_eth).collect();
                let res = benford_test(&prices)?;
                println!("{}", serde_json::to_string_pretty(&res)?);
            }
            None => {
                if exclusions.is_some() {
                    cfg.wash.exclusions = exclusions;
                }
                run_stage(&mut workspace(&out, &up)?, Stage::Wash, &cfg)?;
            }
        },
        Command::Agents { up, txlog, categories } => {
            let mut ws = workspace(&out, &up)?;
            if let Some(p) = txlog {
                ws.set_wallet_txs(parse_wallet_txs(open_reader(&p)?)?.0);
            }
            if let Some(p) = categories {
                ws.set_categories(load_categories(open_reader(&p)?)?.0);
            }
            run_stage(&mut ws, Stage::Agents, &cfg)?;
        }
        Command::Regress { up, table } => {
            let mut ws = workspace(&out, &up)?;
            let t: u8 = table.parse().map_err(|_| Error::Config(format!("bad table `{table}`")))?;
            regress_tables(&mut ws, &cfg, &[t], true)?;
            let text = std::fs::read_to_string(ws.path("tables.txt")).map_err(|e| Error::io(ws.path("tables.txt"), e))?;
            print!("{text}");
        }
        Command::Backtest { up, split } => {
            if let Some(s) = split {
                cfg.backtest.split = s;
            }
            let mut ws = workspace(&out, &up)?;
            run_stage(&mut ws, Stage::Backtest, &cfg)?;
            let p = ws.path("backtest_summary.json");
            print!("{}", std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))?);
        }
        Command::Simulate => unreachable!(),
        Command::Run { stages } => {
            if let Some(s) = stages {
                cfg.stages = s;
            }
            let m = run_pipeline(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BUBBLESCOPE_LOG", "warn")).init();
    let cli = Cli::parse();
    let threads = cli.threads;
    match with_threads(threads, move || run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingStage { .. } => ExitCode::from(3),
                Error::Config(_) | Error::Infeasible(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
