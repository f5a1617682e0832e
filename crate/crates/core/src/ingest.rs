//! Parsing and indexing of raw chain data: transfer/trade records, wallet
//! funding edges, contract-category maps and per-wallet transaction logs.
//!
//! Everything is file based. A remote indexer can be plugged in by
//! implementing [`RecordSource`] so that it yields the same JSONL stream the
//! file readers consume.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};

pub const ZERO_ADDRESS: &str = "0x0000000000000000000000000000000000000000";

fn default_market() -> String {
    "opensea".to_string()
}

/// One on-chain token movement. A transfer with a positive price that is not a
/// mint is a trade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub tx_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    pub collection: String,
    pub token: String,
    #[serde(rename = "from")]
    pub from_wallet: String,
    #[serde(rename = "to")]
    pub to_wallet: String,
    pub price_eth: f64,
    #[serde(default)]
    pub price_usd: f64,
    #[serde(rename = "market", default = "default_market")]
    pub marketplace: String,
}

impl Transfer {
    pub fn is_mint(&self) -> bool {
        self.from_wallet == ZERO_ADDRESS
    }

    pub fn is_trade(&self) -> bool {
        self.price_eth > 0.0 && !self.is_mint()
    }

    pub fn is_self_trade(&self) -> bool {
        self.from_wallet == self.to_wallet
    }

    /// UTC hour index (seconds since epoch / 3600).
    pub fn hour(&self) -> i64 {
        self.timestamp.div_euclid(3600)
    }

    fn validate(&mut self) -> std::result::Result<(), String> {
        if self.tx_id.is_empty() {
            return Err("empty tx_id".into());
        }
        if self.collection.is_empty() || self.token.is_empty() {
            return Err("empty collection or token".into());
        }
        if self.from_wallet.is_empty() || self.to_wallet.is_empty() {
            return Err("empty from/to address".into());
        }
        if self.timestamp <= 0 {
            return Err(format!("non-positive timestamp {}", self.timestamp));
        }
        if !self.price_eth.is_finite() || self.price_eth < 0.0 {
            return Err(format!("invalid price_eth {}", self.price_eth));
        }
        if !self.price_usd.is_finite() || self.price_usd < 0.0 {
            return Err(format!("invalid price_usd {}", self.price_usd));
        }
        self.collection.make_ascii_lowercase();
        self.from_wallet.make_ascii_lowercase();
        self.to_wallet.make_ascii_lowercase();
        Ok(())
    }

    fn sort_key(&self) -> (i64, &str, &str) {
        (self.timestamp, &self.tx_id, &self.token)
    }
}

/// Counts reported by every line-oriented loader.
///
/// `accepted + rejected == lines`; blank lines are not counted.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ParseReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub duplicates: usize,
    pub diagnostics: Vec<Diagnostic>,
}

/// Validated, time-ordered, de-duplicated transfer records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferLog {
    records: Vec<Transfer>,
}

impl TransferLog {
    /// Sorts by (timestamp, tx_id, token) and collapses duplicate
    /// (tx_id, token) pairs. Returns the log and the number of dropped duplicates.
    pub fn from_records(mut records: Vec<Transfer>) -> (Self, usize) {
        records.par_sort_by(|a, b| {
            a.sort_key()
                .cmp(&b.sort_key())
                .then_with(|| full_order(a, b))
        });
        let mut seen: HashSet<(String, String)> = HashSet::with_capacity(records.len());
        let before = records.len();
        records.retain(|r| seen.insert((r.tx_id.clone(), r.token.clone())));
        let dups = before - records.len();
        (TransferLog { records }, dups)
    }

    pub fn records(&self) -> &[Transfer] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn trades(&self) -> impl Iterator<Item = &Transfer> {
        self.records.iter().filter(|t| t.is_trade())
    }

    /// Records grouped per collection, each group in log order.
    pub fn by_collection(&self) -> BTreeMap<&str, Vec<&Transfer>> {
        let mut out: BTreeMap<&str, Vec<&Transfer>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.collection.as_str()).or_default().push(r);
        }
        out
    }

    /// A new log without the given (tx_id, token) keys.
    pub fn without(&self, drop: &HashSet<(String, String)>) -> TransferLog {
        TransferLog {
            records: self
                .records
                .iter()
                .filter(|r| !drop.contains(&(r.tx_id.clone(), r.token.clone())))
                .cloned()
                .collect(),
        }
    }
}

// Tie-break on the remaining fields so that the retained duplicate does not
// depend on input order.
fn full_order(a: &Transfer, b: &Transfer) -> std::cmp::Ordering {
    a.collection
        .cmp(&b.collection)
        .then_with(|| a.from_wallet.cmp(&b.from_wallet))
        .then_with(|| a.to_wallet.cmp(&b.to_wallet))
        .then_with(|| a.price_eth.total_cmp(&b.price_eth))
        .then_with(|| a.price_usd.total_cmp(&b.price_usd))
        .then_with(|| a.marketplace.cmp(&b.marketplace))
}

/// Where raw JSONL records come from.
pub trait RecordSource {
    fn open(&self) -> Result<Box<dyn BufRead + Send>>;
    fn describe(&self) -> String;
}

pub struct FileSource(pub PathBuf);

impl RecordSource for FileSource {
    fn open(&self) -> Result<Box<dyn BufRead + Send>> {
        let f = File::open(&self.0).map_err(|e| Error::io(&self.0, e))?;
        Ok(Box::new(BufReader::new(f)))
    }

    fn describe(&self) -> String {
        self.0.display().to_string()
    }
}

fn read_lines<R: BufRead>(reader: R) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_jsonl<T, R, F>(
    reader: R,
    source: &'static str,
    validate: F,
) -> Result<(Vec<(usize, T)>, ParseReport)>
where
    T: DeserializeOwned + Send,
    R: BufRead,
    F: Fn(&mut T) -> std::result::Result<(), String> + Sync,
{
    let lines = read_lines(reader)?;
    let parsed: Vec<(usize, std::result::Result<T, String>)> = lines
        .par_iter()
        .map(|(no, line)| {
            let r = serde_json::from_str::<T>(line)
                .map_err(|e| e.to_string())
                .and_then(|mut rec| validate(&mut rec).map(|_| rec));
            (*no, r)
        })
        .collect();
    let mut report = ParseReport {
        lines: parsed.len(),
        ..Default::default()
    };
    let mut ok = Vec::with_capacity(parsed.len());
    for (no, r) in parsed {
        match r {
            Ok(rec) => {
                report.accepted += 1;
                ok.push((no, rec));
            }
            Err(msg) => {
                report.rejected += 1;
                report.diagnostics.push(Diagnostic::new(source, Some(no), msg));
            }
        }
    }
    Ok((ok, report))
}

/// Parses a JSONL transfer stream. Malformed lines are skipped and reported.
pub fn parse_transfers<R: BufRead>(reader: R) -> Result<(TransferLog, ParseReport)> {
    let (recs, mut report) = parse_jsonl(reader, "ingest.transfers", Transfer::validate)?;
    let (log, dups) = TransferLog::from_records(recs.into_iter().map(|(_, r)| r).collect());
    if dups > 0 {
        report.diagnostics.push(Diagnostic::new(
            "ingest.transfers",
            None,
            format!("collapsed {dups} duplicate (tx_id, token) records"),
        ));
    }
    report.duplicates = dups;
    Ok((log, report))
}

pub fn write_transfers<W: Write>(log: &TransferLog, mut w: W) -> Result<()> {
    for r in log.records() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundingEdge {
    pub wallet: String,
    pub first_funder: String,
    pub funded_at: i64,
}

/// wallet → first funder lookup.
#[derive(Debug, Clone, Default)]
pub struct FundingIndex {
    edges: HashMap<String, FundingEdge>,
}

impl FundingIndex {
    pub fn from_edges(edges: impl IntoIterator<Item = FundingEdge>) -> (Self, Vec<Diagnostic>) {
        let mut map: HashMap<String, FundingEdge> = HashMap::new();
        let mut diags = Vec::new();
        for e in edges {
            match map.get_mut(&e.wallet) {
                None => {
                    map.insert(e.wallet.clone(), e);
                }
                Some(cur) => {
                    diags.push(Diagnostic::new(
                        "ingest.funding",
                        None,
                        format!("wallet {} has more than one funding edge", e.wallet),
                    ));
                    if (e.funded_at, &e.first_funder) < (cur.funded_at, &cur.first_funder) {
                        *cur = e;
                    }
                }
            }
        }
        (FundingIndex { edges: map }, diags)
    }

    pub fn first_funder(&self, wallet: &str) -> Option<&str> {
        self.edges.get(wallet).map(|e| e.first_funder.as_str())
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edges sorted by wallet.
    pub fn edges(&self) -> Vec<&FundingEdge> {
        let mut v: Vec<&FundingEdge> = self.edges.values().collect();
        v.sort_by(|a, b| a.wallet.cmp(&b.wallet));
        v
    }
}

pub fn load_funding_graph<R: BufRead>(reader: R) -> Result<(FundingIndex, ParseReport)> {
    let (recs, mut report) = parse_jsonl(reader, "ingest.funding", |e: &mut FundingEdge| {
        if e.wallet.is_empty() || e.first_funder.is_empty() {
            return Err("empty wallet or funder".into());
        }
        e.wallet.make_ascii_lowercase();
        e.first_funder.make_ascii_lowercase();
        Ok(())
    })?;
    let (idx, diags) = FundingIndex::from_edges(recs.into_iter().map(|(_, e)| e));
    report.duplicates = diags.len();
    report.diagnostics.extend(diags);
    Ok((idx, report))
}

pub fn write_funding<W: Write>(idx: &FundingIndex, mut w: W) -> Result<()> {
    for e in idx.edges() {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DexSwap,
    DexLiquidity,
    Lending,
    Cex,
    Mixer,
    Other,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::DexSwap => "dex_swap",
            Category::DexLiquidity => "dex_liquidity",
            Category::Lending => "lending",
            Category::Cex => "cex",
            Category::Mixer => "mixer",
            Category::Other => "other",
        }
    }

    /// Funding sources that never count as a common funder.
    pub fn is_excluded_funder(self) -> bool {
        matches!(self, Category::Cex | Category::Mixer)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "dex_swap" => Category::DexSwap,
            "dex_liquidity" => Category::DexLiquidity,
            "lending" => Category::Lending,
            "cex" => Category::Cex,
            "mixer" => Category::Mixer,
            "other" => Category::Other,
            other => return Err(format!("unknown category `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct CategoryMap {
    map: HashMap<String, Category>,
}

impl CategoryMap {
    pub fn get(&self, address: &str) -> Option<Category> {
        self.map.get(address).copied()
    }

    pub fn insert(&mut self, address: &str, cat: Category) -> bool {
        let key = address.to_ascii_lowercase();
        if self.map.contains_key(&key) {
            return false;
        }
        self.map.insert(key, cat);
        true
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// cex ∪ mixer addresses.
    pub fn exclusions(&self) -> HashSet<String> {
        self.map
            .iter()
            .filter(|(_, c)| c.is_excluded_funder())
            .map(|(a, _)| a.clone())
            .collect()
    }

    pub fn entries(&self) -> Vec<(&str, Category)> {
        let mut v: Vec<(&str, Category)> = self.map.iter().map(|(a, c)| (a.as_str(), *c)).collect();
        v.sort();
        v
    }
}

/// Loads an `address,category` CSV. A leading header row is skipped.
pub fn load_categories<R: BufRead>(reader: R) -> Result<(CategoryMap, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut map = CategoryMap::default();
    let mut report = ParseReport::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if line == 1 && rec.get(0) == Some("address") && rec.get(1) == Some("category") {
            continue;
        }
        report.lines += 1;
        let (Some(addr), Some(cat)) = (rec.get(0), rec.get(1)) else {
            report.rejected += 1;
            report
                .diagnostics
                .push(Diagnostic::new("ingest.categories", Some(line), "expected two fields"));
            continue;
        };
        match cat.parse::<Category>() {
            Err(msg) => {
                report.rejected += 1;
                report
                    .diagnostics
                    .push(Diagnostic::new("ingest.categories", Some(line), msg));
            }
            Ok(c) => {
                report.accepted += 1;
                let key = addr.to_ascii_lowercase();
                match map.get(&key) {
                    Some(prev) if prev != c => {
                        report.duplicates += 1;
                        report.diagnostics.push(Diagnostic::new(
                            "ingest.categories",
                            Some(line),
                            format!("{key}: conflicting category {c}, keeping {prev}"),
                        ));
                    }
                    Some(_) => report.duplicates += 1,
                    None => {
                        map.insert(&key, c);
                    }
                }
            }
        }
    }
    Ok((map, report))
}

pub fn write_categories<W: Write>(map: &CategoryMap, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["address", "category"])?;
    for (a, c) in map.entries() {
        wtr.write_record([a, c.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads an exclusion list: either an `address,category` CSV (cex and mixer
/// rows are kept) or one bare address per line.
pub fn load_exclusions<R: BufRead>(reader: R) -> Result<HashSet<String>> {
    let mut out = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "address,category" {
            continue;
        }
        match line.split_once(',') {
            Some((addr, cat)) => {
                if cat.parse::<Category>().map(|c| c.is_excluded_funder()).unwrap_or(false) {
                    out.insert(addr.trim().to_ascii_lowercase());
                }
            }
            None => {
                out.insert(line.to_ascii_lowercase());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Transfer,
    ContractCall,
}

/// One row of a wallet's full chain history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalletTx {
    pub wallet: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
    pub counterparty: String,
    pub value_eth: f64,
    pub kind: TxKind,
}

pub fn parse_wallet_txs<R: BufRead>(reader: R) -> Result<(Vec<WalletTx>, ParseReport)> {
    let (recs, report) = parse_jsonl(reader, "ingest.wallet_txs", |t: &mut WalletTx| {
        if t.wallet.is_empty() {
            return Err("empty wallet".into());
        }
        if !t.value_eth.is_finite() {
            return Err("non-finite value".into());
        }
        t.wallet.make_ascii_lowercase();
        t.counterparty.make_ascii_lowercase();
        Ok(())
    })?;
    let mut v: Vec<WalletTx> = recs.into_iter().map(|(_, t)| t).collect();
    v.sort_by(|a, b| {
        (a.wallet.as_str(), a.timestamp, a.counterparty.as_str())
            .cmp(&(b.wallet.as_str(), b.timestamp, b.counterparty.as_str()))
            .then(a.value_eth.total_cmp(&b.value_eth))
    });
    Ok((v, report))
}

pub fn write_wallet_txs<W: Write>(txs: &[WalletTx], mut w: W) -> Result<()> {
    for t in txs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}
