//! Stage orchestration over an artifacts directory, plus the TOML run
//! configuration and the run manifest.
//!
//! Every stage reads its upstream artifacts from memory when they were
//! produced in the same run and from the artifacts directory otherwise.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    analyze_agents, compare_sophisticated, enrich_wallets, fill_unique_owner_change, profit_persistence,
    read_records_csv, unique_owner_series, write_csv_rows, write_ownership_csv, write_records_csv, AgentEventRecord,
    AgentParams,
};
use crate::backtest::{parse_split, run_strategy, split_fit_predict, wedge, write_pnl_csv, Model};
use crate::econometrics::{
    clustering_regressors, liquidity_regression, market_factor_analysis, render_table, table2, table6,
    timing_regression, write_results_csv, Estimator, EventVar, Frequency, RegressionResult, SeMode,
};
use crate::error::{Diagnostic, Error, Result};
use crate::events::{
    attach_windows, crash_sweep, detect_runups, fill_active_wallets, read_events_csv, write_events_csv,
    DetectParams, RunUpEvent,
};
use crate::ingest::{
    load_categories, load_exclusions, load_funding_graph, open_reader, parse_transfers, parse_wallet_txs, write_categories,
    write_funding, write_transfers, write_wallet_txs, CategoryMap, FundingIndex, TransferLog, WalletTx,
};
use crate::panel::{build_panel, read_panel_csv, summary_stats, winsorize, write_panel_csv, Panel, RETURN_CONVENTION};
use crate::synth::{generate_market, SynthConfig};
use crate::washtrade::{
    benford_test, flag_wash_trades, powerlaw_exponent, read_flags_csv, wash_volume_before, write_flags_csv, WashFilter,
    WashFlag, WashIndex,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Panel,
    Detect,
    Wash,
    Agents,
    Regress,
    Backtest,
}

impl Stage {
    /// Dependency order.
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Panel,
        Stage::Detect,
        Stage::Wash,
        Stage::Agents,
        Stage::Regress,
        Stage::Backtest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Panel => "panel",
            Stage::Detect => "detect",
            Stage::Wash => "wash",
            Stage::Agents => "agents",
            Stage::Regress => "regress",
            Stage::Backtest => "backtest",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Artifact file names inside the output directory.
pub mod artifact {
    pub const TRANSFERS: &str = "transfers.jsonl";
    pub const FUNDING: &str = "funding.jsonl";
    pub const CATEGORIES: &str = "categories.csv";
    pub const WALLET_TXS: &str = "wallet_txs.jsonl";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const PANEL: &str = "panel.csv";
    pub const PANEL_WINSORIZED: &str = "panel_winsorized.csv";
    pub const SUMMARY_STATS: &str = "summary_stats.csv";
    pub const EVENTS: &str = "events.csv";
    pub const CRASH_SWEEP: &str = "crash_sweep.csv";
    pub const WASH_FLAGS: &str = "wash_flags.csv";
    pub const WASH_SUMMARY: &str = "wash_summary.json";
    pub const EVENTS_FULL: &str = "events_full.csv";
    pub const AGENT_RECORDS: &str = "agent_records.csv";
    pub const OWNERSHIP: &str = "ownership.csv";
    pub const WALLET_STATS: &str = "wallet_stats.csv";
    pub const SOPHISTICATION: &str = "sophistication_comparison.csv";
    pub const AGENT_SUMMARY: &str = "agent_summary.json";
    pub const TABLES_TXT: &str = "tables.txt";
    pub const FACTOR: &str = "market_factor.json";
    pub const CLUSTERING: &str = "clustering.csv";
    pub const PNL: &str = "backtest_pnl.csv";
    pub const PREDICTIONS: &str = "backtest_predictions.csv";
    pub const BACKTEST_SUMMARY: &str = "backtest_summary.json";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Directory holding `trades.jsonl`, `funding.jsonl`, `categories.csv`
    /// and optionally `wallet_txs.jsonl`; explicit paths take precedence.
    pub dir: Option<PathBuf>,
    pub trades: Option<PathBuf>,
    pub funding: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub wallet_txs: Option<PathBuf>,
}

impl InputConfig {
    fn resolve(&self, explicit: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
        explicit.clone().or_else(|| self.dir.as_ref().map(|d| d.join(name)))
    }

    pub fn trades_path(&self) -> Option<PathBuf> {
        self.resolve(&self.trades, "trades.jsonl")
    }

    pub fn funding_path(&self) -> Option<PathBuf> {
        self.resolve(&self.funding, "funding.jsonl")
    }

    pub fn categories_path(&self) -> Option<PathBuf> {
        self.resolve(&self.categories, "categories.csv")
    }

    pub fn wallet_txs_path(&self) -> Option<PathBuf> {
        self.resolve(&self.wallet_txs, "wallet_txs.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelConfig {
    pub winsorize: f64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig { winsorize: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WashConfig {
    /// Tail share used by the Hill estimator.
    pub tail_fraction: f64,
    /// Excluded funder addresses; defaults to the CEX and mixer entries of
    /// the category map.
    pub exclusions: Option<PathBuf>,
}

impl Default for WashConfig {
    fn default() -> Self {
        WashConfig {
            tail_fraction: 0.05,
            exclusions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressConfig {
    pub se_mode: SeMode,
    pub factor_frequency: Frequency,
    pub clustering_days: u32,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig {
            se_mode: SeMode::HcRobust,
            factor_frequency: Frequency::Daily,
            clustering_days: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub split: String,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            split: "2021-12-31T23".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub input: InputConfig,
    /// When present and no input is configured, a synthetic market is
    /// generated into `<out>/synth` and used as input.
    pub synth: Option<SynthConfig>,
    pub panel: PanelConfig,
    pub detect: DetectParams,
    pub crash_sweep: Vec<f64>,
    pub wash: WashConfig,
    pub agents: AgentParams,
    pub regress: RegressConfig,
    pub backtest: BacktestConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: Stage::ALL.to_vec(),
            input: InputConfig::default(),
            synth: None,
            panel: PanelConfig::default(),
            detect: DetectParams::default(),
            crash_sweep: vec![-0.2, -0.3, -0.4, -0.5, -0.6, -0.7, -0.8],
            wash: WashConfig::default(),
            agents: AgentParams::default(),
            regress: RegressConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub millis: u128,
    pub diagnostics: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub return_convention: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub diagnostics: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ (Error::MissingStage { .. } | Error::Stage { .. }) => e,
        e => Error::Stage {
            stage,
            message: e.to_string(),
        },
    }
}

/// Lazily loaded stage artifacts.
pub struct Workspace {
    out: PathBuf,
    src: PathBuf,
    log: Option<TransferLog>,
    funding: Option<FundingIndex>,
    categories: Option<CategoryMap>,
    wallet_txs: Option<Vec<WalletTx>>,
    panel: Option<Panel>,
    events: Option<Vec<RunUpEvent>>,
    flags: Option<Vec<WashFlag>>,
    events_full: Option<Vec<RunUpEvent>>,
    records: Option<Vec<AgentEventRecord>>,
    written: Vec<String>,
    diagnostics: usize,
}

impl Workspace {
    pub fn new(out: &Path) -> Result<Self> {
        Self::with_source(out, out)
    }

    /// Writes into `out`; upstream artifacts missing there are read from `src`.
    pub fn with_source(out: &Path, src: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Workspace {
            out: out.to_path_buf(),
            src: src.to_path_buf(),
            log: None,
            funding: None,
            categories: None,
            wallet_txs: None,
            panel: None,
            events: None,
            flags: None,
            events_full: None,
            records: None,
            written: Vec::new(),
            diagnostics: 0,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn locate(&self, name: &str) -> Option<PathBuf> {
        [self.out.join(name), self.src.join(name)].into_iter().find(|p| p.is_file())
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        self.locate(name).ok_or_else(|| Error::MissingStage {
            stage,
            artifact: self.path(name).display().to_string(),
        })
    }

    pub fn set_categories(&mut self, map: CategoryMap) {
        self.categories = Some(map);
    }

    pub fn set_wallet_txs(&mut self, txs: Vec<WalletTx>) {
        self.wallet_txs = Some(txs);
    }

    pub fn diagnostics(&self) -> usize {
        self.diagnostics
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn note(&mut self, diags: &[Diagnostic]) {
        self.diagnostics += diags.len();
    }

    pub fn log(&mut self) -> Result<&TransferLog> {
        if self.log.is_none() {
            let p = self.require(artifact::TRANSFERS, "ingest")?;
            let (log, report) = parse_transfers(open_reader(&p)?)?;
            self.note(&report.diagnostics);
            self.log = Some(log);
        }
        Ok(self.log.as_ref().unwrap())
    }

    pub fn funding(&mut self) -> Result<&FundingIndex> {
        if self.funding.is_none() {
            let p = self.require(artifact::FUNDING, "ingest")?;
            let (idx, report) = load_funding_graph(open_reader(&p)?)?;
            self.note(&report.diagnostics);
            self.funding = Some(idx);
        }
        Ok(self.funding.as_ref().unwrap())
    }

    pub fn categories(&mut self) -> Result<&CategoryMap> {
        if self.categories.is_none() {
            let p = self.require(artifact::CATEGORIES, "ingest")?;
            let (map, report) = load_categories(open_reader(&p)?)?;
            self.note(&report.diagnostics);
            self.categories = Some(map);
        }
        Ok(self.categories.as_ref().unwrap())
    }

    /// Wallet transactions are optional; absent means no enrichment.
    pub fn wallet_txs(&mut self) -> Result<&[WalletTx]> {
        if self.wallet_txs.is_none() {
            let txs = if let Some(p) = self.locate(artifact::WALLET_TXS) {
                let (txs, report) = parse_wallet_txs(open_reader(&p)?)?;
                self.note(&report.diagnostics);
                txs
            } else {
                Vec::new()
            };
            self.wallet_txs = Some(txs);
        }
        Ok(self.wallet_txs.as_deref().unwrap())
    }

    pub fn panel(&mut self) -> Result<&Panel> {
        if self.panel.is_none() {
            let p = self.require(artifact::PANEL, "panel")?;
            self.panel = Some(read_panel_csv(open_reader(&p)?)?);
        }
        Ok(self.panel.as_ref().unwrap())
    }

    fn load_events(&mut self, name: &str, stage: &'static str, params: &DetectParams) -> Result<Vec<RunUpEvent>> {
        let p = self.require(name, stage)?;
        let events = read_events_csv(open_reader(&p)?)?;
        let n = events.len();
        let events = attach_windows(events, self.panel()?, params);
        if events.len() != n {
            let d = Diagnostic::new(
                "pipeline.events",
                None,
                format!("{} events in {name} lack a panel window", n - events.len()),
            );
            self.note(&[d]);
        }
        Ok(events)
    }

    pub fn events(&mut self, params: &DetectParams) -> Result<&[RunUpEvent]> {
        if self.events.is_none() {
            let ev = self.load_events(artifact::EVENTS, "detect", params)?;
            self.events = Some(ev);
        }
        Ok(self.events.as_deref().unwrap())
    }

    pub fn flags(&mut self) -> Result<&[WashFlag]> {
        if self.flags.is_none() {
            let p = self.require(artifact::WASH_FLAGS, "wash")?;
            let f = open_reader(&p)?;
            let (flags, diags) = read_flags_csv(f, self.log()?)?;
            self.note(&diags);
            self.flags = Some(flags);
        }
        Ok(self.flags.as_deref().unwrap())
    }

    /// Events with agent-level predictors; requires `detect` then `agents`.
    pub fn events_full(&mut self, params: &DetectParams) -> Result<&[RunUpEvent]> {
        if self.events_full.is_none() {
            self.require(artifact::EVENTS, "detect")?;
            let ev = self.load_events(artifact::EVENTS_FULL, "agents", params)?;
            self.events_full = Some(ev);
        }
        Ok(self.events_full.as_deref().unwrap())
    }

    pub fn records(&mut self) -> Result<&[AgentEventRecord]> {
        if self.records.is_none() {
            let p = self.require(artifact::AGENT_RECORDS, "agents")?;
            self.records = Some(read_records_csv(open_reader(&p)?)?);
        }
        Ok(self.records.as_deref().unwrap())
    }
}

fn ingest_stage(ws: &mut Workspace, input: &InputConfig) -> Result<()> {
    let trades = input
        .trades_path()
        .ok_or_else(|| Error::Config("no trades file configured".into()))?;
    let (log, tr) = parse_transfers(open_reader(&trades)?)?;
    let mut reports = BTreeMap::new();
    ws.note(&tr.diagnostics);
    let mut w = ws.create(artifact::TRANSFERS)?;
    write_transfers(&log, &mut w)?;
    w.flush()?;
    reports.insert("transfers", tr);

    let funding = match input.funding_path().filter(|p| p.is_file() || input.funding.is_some()) {
        Some(p) => {
            let (idx, r) = load_funding_graph(open_reader(&p)?)?;
            ws.note(&r.diagnostics);
            reports.insert("funding", r);
            idx
        }
        None => FundingIndex::default(),
    };
    let mut w = ws.create(artifact::FUNDING)?;
    write_funding(&funding, &mut w)?;
    w.flush()?;

    let cats = match input.categories_path().filter(|p| p.is_file() || input.categories.is_some()) {
        Some(p) => {
            let (map, r) = load_categories(open_reader(&p)?)?;
            ws.note(&r.diagnostics);
            reports.insert("categories", r);
            map
        }
        None => CategoryMap::default(),
    };
    let mut w = ws.create(artifact::CATEGORIES)?;
    write_categories(&cats, &mut w)?;
    w.flush()?;

    let txs = match input.wallet_txs_path().filter(|p| p.is_file() || input.wallet_txs.is_some()) {
        Some(p) => {
            let (txs, r) = parse_wallet_txs(open_reader(&p)?)?;
            ws.note(&r.diagnostics);
            reports.insert("wallet_txs", r);
            let mut w = ws.create(artifact::WALLET_TXS)?;
            write_wallet_txs(&txs, &mut w)?;
            w.flush()?;
            txs
        }
        None => Vec::new(),
    };
    ws.write_json(artifact::INGEST_REPORT, &reports)?;
    ws.log = Some(log);
    ws.funding = Some(funding);
    ws.categories = Some(cats);
    ws.wallet_txs = Some(txs);
    Ok(())
}

fn panel_stage(ws: &mut Workspace, cfg: &PanelConfig) -> Result<()> {
    let (panel, diags) = build_panel(ws.log()?);
    ws.note(&diags);
    let mut w = ws.create(artifact::PANEL)?;
    write_panel_csv(&panel, &mut w)?;
    w.flush()?;
    let (wins, diags) = winsorize(&panel, cfg.winsorize)?;
    ws.note(&diags);
    let mut w = ws.create(artifact::PANEL_WINSORIZED)?;
    write_panel_csv(&wins, &mut w)?;
    w.flush()?;
    if !wins.is_empty() {
        let stats = summary_stats(&wins)?;
        let mut w = ws.create(artifact::SUMMARY_STATS)?;
        stats.write_csv(&mut w)?;
        w.flush()?;
    }
    ws.panel = Some(panel);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    threshold: f64,
    n_events: usize,
    n_crash: usize,
    crash_share: f64,
}

fn detect_stage(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
    let mut events = detect_runups(ws.panel()?, &cfg.detect);
    fill_active_wallets(&mut events, ws.log()?, cfg.detect.window);
    let mut w = ws.create(artifact::EVENTS)?;
    write_events_csv(&events, &mut w)?;
    w.flush()?;
    let sweep = crash_sweep(&events, &cfg.crash_sweep);
    let rows: Vec<SweepRow> = cfg
        .crash_sweep
        .iter()
        .map(|th| {
            let n_crash = sweep[&format!("{th}")].len();
            SweepRow {
                threshold: *th,
                n_events: events.len(),
                n_crash,
                crash_share: if events.is_empty() { 0.0 } else { n_crash as f64 / events.len() as f64 },
            }
        })
        .collect();
    let w = ws.create(artifact::CRASH_SWEEP)?;
    write_csv_rows(rows, w)?;
    log::info!("detected {} run-up events", events.len());
    ws.events = Some(events);
    Ok(())
}

#[derive(Serialize)]
struct WashSummary {
    n_trades: usize,
    n_flagged: usize,
    flagged_volume_eth: f64,
    by_filter: BTreeMap<String, usize>,
    missing_funding: usize,
    benford: Option<crate::washtrade::BenfordResult>,
    benford_clean: Option<crate::washtrade::BenfordResult>,
    powerlaw: Option<crate::washtrade::PowerLawFit>,
    powerlaw_clean: Option<crate::washtrade::PowerLawFit>,
}

fn wash_stage(ws: &mut Workspace, cfg: &WashConfig) -> Result<()> {
    ws.log()?;
    ws.funding()?;
    let exclusions = match &cfg.exclusions {
        Some(p) => load_exclusions(open_reader(p)?)?,
        None => ws.categories()?.exclusions(),
    };
    let report = flag_wash_trades(ws.log.as_ref().unwrap(), ws.funding.as_ref().unwrap(), &exclusions);
    ws.note(&report.diagnostics);
    let mut w = ws.create(artifact::WASH_FLAGS)?;
    write_flags_csv(&report.flags, &mut w)?;
    w.flush()?;
    let log = ws.log.as_ref().unwrap();
    let keys = report.keys();
    let prices: Vec<f64> = log.trades().map(|t| t.price_eth).collect();
    let clean: Vec<f64> = log
        .trades()
        .filter(|t| !keys.contains(&(t.tx_id.clone(), t.token.clone())))
        .map(|t| t.price_eth)
        .collect();
    let mut diags = Vec::new();
    fn soft<T>(diags: &mut Vec<Diagnostic>, what: &str, r: Result<T>) -> Option<T> {
        r.map_err(|e| diags.push(Diagnostic::new("wash.diagnostics", None, format!("{what}: {e}"))))
            .ok()
    }
    let summary = WashSummary {
        n_trades: prices.len(),
        n_flagged: report.flags.len(),
        flagged_volume_eth: report.flags.iter().map(|f| f.volume_eth).sum(),
        by_filter: WashFilter::ALL
            .iter()
            .map(|f| (f.as_str().to_string(), report.count(*f)))
            .collect(),
        missing_funding: report.missing_funding,
        benford: soft(&mut diags, "benford", benford_test(&prices)),
        benford_clean: soft(&mut diags, "benford (clean)", benford_test(&clean)),
        powerlaw: soft(&mut diags, "powerlaw", powerlaw_exponent(&prices, cfg.tail_fraction)),
        powerlaw_clean: soft(&mut diags, "powerlaw (clean)", powerlaw_exponent(&clean, cfg.tail_fraction)),
    };
    ws.note(&diags);
    ws.write_json(artifact::WASH_SUMMARY, &summary)?;
    ws.flags = Some(report.flags);
    Ok(())
}

#[derive(Serialize)]
struct AgentSummary {
    n_records: usize,
    n_sophisticated_wallets: usize,
    ownership_data_gaps: usize,
    persistence: Option<crate::agents::Persistence>,
}

fn agents_stage(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
    let mut events = ws.events(&cfg.detect)?.to_vec();
    let index = WashIndex::new(ws.flags()?);
    for e in events.iter_mut() {
        e.predictors.wash_log_volume = Some(wash_volume_before(&index, &e.collection, e.t0));
    }
    let log = ws.log()?;
    let (series, odiags) = unique_owner_series(log);
    fill_unique_owner_change(&mut events, &series);
    let analysis = analyze_agents(&mut events, log, &cfg.agents);
    let as_of = log.records().iter().map(|t| t.timestamp).max().unwrap_or(0);
    ws.note(&odiags);
    ws.note(&analysis.diagnostics);

    let mut w = ws.create(artifact::EVENTS_FULL)?;
    write_events_csv(&events, &mut w)?;
    w.flush()?;
    let mut w = ws.create(artifact::AGENT_RECORDS)?;
    write_records_csv(&analysis.records, &mut w)?;
    w.flush()?;
    let mut w = ws.create(artifact::OWNERSHIP)?;
    write_ownership_csv(&series, &mut w)?;
    w.flush()?;

    ws.wallet_txs()?;
    ws.categories()?;
    let txs = ws.wallet_txs.as_deref().unwrap();
    if !txs.is_empty() {
        let stats = enrich_wallets(txs, ws.categories.as_ref().unwrap(), ws.log.as_ref(), as_of);
        let w = ws.create(artifact::WALLET_STATS)?;
        write_csv_rows(stats.values(), w)?;
        match compare_sophisticated(&stats, &analysis.sophisticated_wallets) {
            Ok(rows) => {
                let w = ws.create(artifact::SOPHISTICATION)?;
                write_csv_rows(rows, w)?;
            }
            Err(e) => {
                let d = Diagnostic::new("agents.enrich", None, e.to_string());
                ws.note(&[d]);
            }
        }
    }
    let persistence = match profit_persistence(&analysis.records) {
        Ok(p) => Some(p),
        Err(e) => {
            let d = Diagnostic::new("agents.persistence", None, e.to_string());
            ws.note(&[d]);
            None
        }
    };
    let summary = AgentSummary {
        n_records: analysis.records.len(),
        n_sophisticated_wallets: analysis.sophisticated_wallets.len(),
        ownership_data_gaps: series.data_gaps,
        persistence,
    };
    ws.write_json(artifact::AGENT_SUMMARY, &summary)?;
    ws.events_full = Some(events);
    ws.records = Some(analysis.records);
    Ok(())
}

/// Regression tables by name: 2 (market predictors, OLS and logit),
/// 3 (ex-post liquidity), 5 (timing ranks) and 6 (agent-level).
pub const TABLES: [u8; 4] = [2, 3, 5, 6];

fn table_results(ws: &mut Workspace, cfg: &PipelineConfig, table: u8) -> Result<Vec<(String, Vec<RegressionResult>)>> {
    let se = cfg.regress.se_mode;
    // crash tables are also emitted under the other standard-error convention
    let alt = match se {
        SeMode::Plain => SeMode::HcRobust,
        _ => SeMode::Plain,
    };
    let modes = [(se, String::new()), (alt, format!("_{}", alt.as_str()))];
    let mut out = Vec::new();
    match table {
        2 => {
            let ev = ws.events_full(&cfg.detect)?;
            for (mode, sfx) in &modes {
                out.push((format!("table2_ols{sfx}"), table2(ev, EventVar::Crash, Estimator::Ols, *mode)?));
                out.push((format!("table2_logit{sfx}"), table2(ev, EventVar::Crash, Estimator::Logit, *mode)?));
            }
        }
        3 => out.push(("table3_liquidity".into(), liquidity_regression(ws.events_full(&cfg.detect)?, se)?)),
        5 => out.push(("table5_timing".into(), timing_regression(ws.records()?)?)),
        6 => {
            let ev = ws.events_full(&cfg.detect)?;
            for (mode, sfx) in &modes {
                out.push((format!("table6_crash{sfx}"), table6(ev, EventVar::Crash, *mode)?));
                out.push((format!("table6_ex_post_ret{sfx}"), table6(ev, EventVar::ExPostRet, *mode)?));
            }
        }
        t => return Err(Error::Config(format!("unknown table {t}; expected one of 2, 3, 5, 6"))),
    }
    Ok(out)
}

/// Writes the requested regression tables; failures of individual tables
/// are recorded as diagnostics unless `strict`.
pub fn regress_tables(ws: &mut Workspace, cfg: &PipelineConfig, tables: &[u8], strict: bool) -> Result<()> {
    let mut text = String::new();
    for &t in tables {
        match table_results(ws, cfg, t) {
            Ok(parts) => {
                for (name, results) in parts {
                    let w = ws.create(&format!("{name}.csv"))?;
                    write_results_csv(&name, &results, w)?;
                    text.push_str(&render_table(&name, &results));
                    text.push('\n');
                }
            }
            Err(e @ Error::MissingStage { .. }) => return Err(e),
            Err(e) if strict => return Err(e),
            Err(e) => {
                let d = Diagnostic::new("regress", None, format!("table {t}: {e}"));
                ws.note(&[d]);
            }
        }
    }
    let mut w = ws.create(artifact::TABLES_TXT)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn regress_stage(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
    regress_tables(ws, cfg, &TABLES, false)?;
    match market_factor_analysis(ws.panel()?, cfg.regress.factor_frequency) {
        Ok(fa) => ws.write_json(artifact::FACTOR, &fa)?,
        Err(e) => {
            let d = Diagnostic::new("regress.factor", None, e.to_string());
            ws.note(&[d]);
        }
    }
    let rows = clustering_regressors(ws.events_full(&cfg.detect)?, cfg.regress.clustering_days)?;
    let w = ws.create(artifact::CLUSTERING)?;
    write_csv_rows(rows, w)?;
    Ok(())
}

#[derive(Serialize)]
struct BacktestSummary {
    split_hour: i64,
    models: Vec<ModelSummary>,
}

#[derive(Serialize)]
struct ModelSummary {
    model: Model,
    n_train: usize,
    r2: f64,
    median_prediction: f64,
    predicted_crash_pnl: f64,
    predicted_noncrash_pnl: f64,
    wedge: f64,
}

fn backtest_stage(ws: &mut Workspace, cfg: &PipelineConfig) -> Result<()> {
    let split = parse_split(&cfg.backtest.split)?;
    let events = ws.events_full(&cfg.detect)?.to_vec();
    let fit = split_fit_predict(&events, split)?;
    let (runs, diags) = run_strategy(&fit, &events);
    ws.note(&fit.diagnostics);
    ws.note(&diags);
    let w = ws.create(artifact::PNL)?;
    write_pnl_csv(&runs, w)?;
    let w = ws.create(artifact::PREDICTIONS)?;
    write_csv_rows(&fit.predictions, w)?;
    let total = |m, p| {
        runs.iter()
            .find(|r| r.model == m && r.portfolio == p)
            .map_or(0.0, |r| r.total())
    };
    use crate::backtest::Portfolio::*;
    let summary = BacktestSummary {
        split_hour: split,
        models: fit
            .fits
            .iter()
            .map(|(m, r, med)| ModelSummary {
                model: *m,
                n_train: r.n,
                r2: r.r2,
                median_prediction: *med,
                predicted_crash_pnl: total(*m, PredictedCrash),
                predicted_noncrash_pnl: total(*m, PredictedNoncrash),
                wedge: wedge(&runs, *m),
            })
            .collect(),
    };
    ws.write_json(artifact::BACKTEST_SUMMARY, &summary)?;
    Ok(())
}

/// Runs one stage against the workspace.
pub fn run_stage(ws: &mut Workspace, stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    let name = stage.as_str();
    let r = match stage {
        Stage::Ingest => ingest_stage(ws, &cfg.input),
        Stage::Panel => panel_stage(ws, &cfg.panel),
        Stage::Detect => detect_stage(ws, cfg),
        Stage::Wash => wash_stage(ws, &cfg.wash),
        Stage::Agents => agents_stage(ws, cfg),
        Stage::Regress => regress_stage(ws, cfg),
        Stage::Backtest => backtest_stage(ws, cfg),
    };
    r.map_err(stage_err(name))
}

/// Runs the configured stages in dependency order inside `out` and writes
/// `manifest.json`. Identical configs and inputs give identical artifacts.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunManifest> {
    let config_sha256 = cfg.sha256()?;
    let mut cfg = cfg.clone();
    let mut ws = Workspace::new(out)?;
    let mut records = Vec::new();
    if cfg.input.trades_path().is_none() && cfg.stages.contains(&Stage::Ingest) {
        if let Some(sc) = &cfg.synth {
            let t = Instant::now();
            let dir = out.join("synth");
            generate_market(sc)?.write_to(&dir)?;
            cfg.input.dir = Some(dir);
            records.push(StageRecord {
                stage: "simulate".into(),
                millis: t.elapsed().as_millis(),
                diagnostics: 0,
            });
        }
    }
    let mut stages = cfg.stages.clone();
    stages.sort();
    stages.dedup();
    for stage in stages {
        let before = ws.diagnostics;
        let t = Instant::now();
        log::info!("stage {stage}");
        run_stage(&mut ws, stage, &cfg)?;
        records.push(StageRecord {
            stage: stage.as_str().into(),
            millis: t.elapsed().as_millis(),
            diagnostics: ws.diagnostics - before,
        });
    }
    let mut inputs = BTreeMap::new();
    if cfg.stages.contains(&Stage::Ingest) {
        for p in [
            cfg.input.trades_path(),
            cfg.input.funding_path(),
            cfg.input.categories_path(),
            cfg.input.wallet_txs_path(),
        ]
        .into_iter()
        .flatten()
        .filter(|p| p.is_file())
        {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            inputs.insert(name, sha256_file(&p)?);
        }
    }
    let mut outputs = BTreeMap::new();
    for name in &ws.written {
        outputs.insert(name.clone(), sha256_file(&ws.path(name))?);
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        return_convention: RETURN_CONVENTION.to_string(),
        config_sha256,
        inputs,
        outputs,
        stages: records,
        diagnostics: ws.diagnostics,
    };
    ws.write_json(artifact::MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Runs `f` on a dedicated rayon pool of `threads` workers (0 = default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}
