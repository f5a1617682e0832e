//! Wallet-level event profits, sophistication flags, timing scores,
//! ownership concentration, and wallet enrichment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::econometrics::{OlsFit, SeMode, LOW_POWER_N};
use crate::error::{Diagnostic, Error, Result};
use crate::events::RunUpEvent;
use crate::ingest::{Category, CategoryMap, Transfer, TransferLog, TxKind, WalletTx, ZERO_ADDRESS};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub min_events: usize,
    pub lookback: usize,
    pub min_avg_profit: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            min_events: 5,
            lookback: 5,
            min_avg_profit: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEventRecord {
    pub wallet: String,
    pub event: String,
    pub collection: String,
    pub t0: i64,
    pub crash: bool,
    /// Absent when the wallet invested nothing in the window.
    pub profit_pct: Option<f64>,
    pub n_buys: u32,
    pub n_sells: u32,
    pub sophisticated: bool,
    /// Flagged at any event in the sample.
    pub sophisticated_ever: bool,
    pub ts: Option<i64>,
    pub ts_buy: Option<i64>,
    pub ts_sell: Option<i64>,
    pub ts_rank: Option<f64>,
    pub ts_buy_rank: Option<f64>,
    pub ts_sell_rank: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Ledger {
    cost: f64,
    proceeds: f64,
    /// Prices of in-window purchases still held, per token.
    held: HashMap<String, Vec<f64>>,
    n_buys: u32,
    n_sells: u32,
}

/// Trades of `collection` with hour in `[t0 − w, t0 + w]`.
fn window_trades<'a>(trades: &[&'a Transfer], t0: i64, w: i64) -> Vec<&'a Transfer> {
    trades
        .iter()
        .filter(|t| t.is_trade() && (t.hour() - t0).abs() <= w)
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalletProfit {
    pub profit_pct: Option<f64>,
    pub n_buys: u32,
    pub n_sells: u32,
}

/// Per-wallet profit on invested capital over the event window. Purchases
/// are at cost; tokens sold without an in-window purchase use the carried
/// price at the window start as basis; unsold purchases are marked at the
/// carried price at the window end.
pub fn event_agent_profits(event: &RunUpEvent, trades: &[&Transfer]) -> BTreeMap<String, WalletProfit> {
    let w = event.half_window();
    let p_start = event.price(-w).unwrap_or(0.0);
    let p_end = event.price(w).unwrap_or(0.0);
    let mut books: BTreeMap<String, Ledger> = BTreeMap::new();
    for t in window_trades(trades, event.t0, w) {
        let b = books.entry(t.to_wallet.clone()).or_default();
        b.cost += t.price_eth;
        b.n_buys += 1;
        b.held.entry(t.token.clone()).or_default().push(t.price_eth);

        let s = books.entry(t.from_wallet.clone()).or_default();
        s.proceeds += t.price_eth;
        s.n_sells += 1;
        let matched = s.held.get_mut(&t.token).and_then(|v| v.pop()).is_some();
        if !matched {
            s.cost += p_start;
        }
    }
    books
        .into_iter()
        .filter(|(w, _)| w != ZERO_ADDRESS)
        .map(|(wallet, b)| {
            let unsold: usize = b.held.values().map(|v| v.len()).sum();
            let proceeds = b.proceeds + unsold as f64 * p_end;
            let profit_pct = (b.cost > 0.0).then(|| (proceeds - b.cost) / b.cost);
            (
                wallet,
                WalletProfit {
                    profit_pct,
                    n_buys: b.n_buys,
                    n_sells: b.n_sells,
                },
            )
        })
        .collect()
}

/// Causal sophistication flags. Events are grouped by anchor hour; a wallet is
/// sophisticated at an event when it took part in at least `min_events`
/// strictly earlier events and its mean profit over the latest `lookback` of
/// them exceeds `min_avg_profit`.
pub fn sophistication_flags(
    events: &[(String, i64)],
    participation: &HashMap<String, BTreeMap<String, Option<f64>>>,
    params: &AgentParams,
) -> HashMap<(String, String), bool> {
    let mut order: Vec<&(String, i64)> = events.iter().collect();
    order.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    let mut history: HashMap<String, Vec<f64>> = HashMap::new();
    let mut flags = HashMap::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].1 == order[i].1 {
            j += 1;
        }
        for (id, _) in order[i..j].iter().copied() {
            if let Some(ws) = participation.get(id) {
                for wallet in ws.keys() {
                    let flag = history.get(wallet).is_some_and(|h| {
                        h.len() >= params.min_events && {
                            let tail = &h[h.len() - params.lookback.min(h.len())..];
                            stats::mean(tail).is_some_and(|m| m > params.min_avg_profit)
                        }
                    });
                    flags.insert((id.clone(), wallet.clone()), flag);
                }
            }
        }
        for (id, _) in order[i..j].iter().copied() {
            if let Some(ws) = participation.get(id) {
                for (wallet, profit) in ws {
                    if let Some(p) = profit {
                        history.entry(wallet.clone()).or_default().push(*p);
                    }
                }
            }
        }
        i = j;
    }
    flags
}

/// Eq. 1 buy score at distance `d` from the peak.
pub fn ts_buy(d: i64) -> i64 {
    if d <= 0 {
        -d - 12
    } else {
        d - 12
    }
}

pub fn ts_sell(d: i64) -> i64 {
    -ts_buy(d)
}

/// Timing score of a wallet from its buy and sell distances to the peak.
pub fn timing_score(buys: &[i64], sells: &[i64]) -> (i64, i64, i64) {
    let b: i64 = buys.iter().map(|&d| ts_buy(d)).sum();
    let s: i64 = sells.iter().map(|&d| ts_sell(d)).sum();
    (b + s, b, s)
}

/// Peak hour t* ∈ [0, w] of the carried price, earliest on ties.
pub fn peak_hour(event: &RunUpEvent) -> Option<i64> {
    let w = event.half_window();
    let mut best: Option<(i64, f64)> = None;
    for t in 0..=w {
        let p = event.price(t)?;
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((t, p));
        }
    }
    best.map(|b| b.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub wallet: String,
    pub ts: i64,
    pub ts_buy: i64,
    pub ts_sell: i64,
    pub ts_rank: f64,
    pub ts_buy_rank: f64,
    pub ts_sell_rank: f64,
}

/// Timing scores of every wallet trading within ±24 hours of the peak of a
/// crash event, with within-event percentile ranks.
pub fn timing_scores(event: &RunUpEvent, trades: &[&Transfer]) -> Result<Vec<TimingRecord>> {
    if !event.crash {
        return Err(Error::NotCrash(event.id.clone()));
    }
    let peak = event.t0 + peak_hour(event).ok_or_else(|| Error::Invalid(format!("event {} has no window", event.id)))?;
    let mut per: BTreeMap<&str, (Vec<i64>, Vec<i64>)> = BTreeMap::new();
    for t in trades.iter().filter(|t| t.is_trade()) {
        let d = t.hour() - peak;
        if !(-24..=24).contains(&d) {
            continue;
        }
        per.entry(&t.to_wallet).or_default().0.push(d);
        per.entry(&t.from_wallet).or_default().1.push(d);
    }
    let mut recs: Vec<TimingRecord> = per
        .into_iter()
        .map(|(w, (b, s))| {
            let (ts, tb, tsl) = timing_score(&b, &s);
            TimingRecord {
                wallet: w.to_string(),
                ts,
                ts_buy: tb,
                ts_sell: tsl,
                ts_rank: 0.0,
                ts_buy_rank: 0.0,
                ts_sell_rank: 0.0,
            }
        })
        .collect();
    let rank = |f: fn(&TimingRecord) -> i64, recs: &[TimingRecord]| {
        stats::percentile_ranks(&recs.iter().map(|r| f(r) as f64).collect::<Vec<_>>())
    };
    if !recs.is_empty() {
        let r0 = rank(|r| r.ts, &recs);
        let r1 = rank(|r| r.ts_buy, &recs);
        let r2 = rank(|r| r.ts_sell, &recs);
        for (i, r) in recs.iter_mut().enumerate() {
            r.ts_rank = r0[i];
            r.ts_buy_rank = r1[i];
            r.ts_sell_rank = r2[i];
        }
    }
    Ok(recs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OwnershipPoint {
    pub collection: String,
    pub hour: i64,
    pub unique_owners: u64,
    pub supply: u64,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OwnershipSeries {
    pub points: Vec<OwnershipPoint>,
    pub data_gaps: usize,
    index: BTreeMap<String, (i64, usize, usize)>,
}

impl OwnershipSeries {
    /// Unique-owner fraction at the end of `hour`.
    pub fn fraction(&self, collection: &str, hour: i64) -> Option<f64> {
        let &(first, start, len) = self.index.get(collection)?;
        if hour < first {
            return None;
        }
        let off = ((hour - first) as usize).min(len - 1);
        self.points[start + off].fraction
    }

    /// fraction(t0) − fraction(t0 − 24).
    pub fn change(&self, collection: &str, t0: i64) -> Option<f64> {
        Some(self.fraction(collection, t0)? - self.fraction(collection, t0 - 24)?)
    }
}

fn replay_collection(recs: &[&Transfer]) -> (Vec<OwnershipPoint>, usize) {
    let first = recs.iter().map(|r| r.hour()).min().unwrap_or(0);
    let last = recs.iter().map(|r| r.hour()).max().unwrap_or(0);
    let mut owner: HashMap<&str, &str> = HashMap::new();
    let mut balance: HashMap<&str, u64> = HashMap::new();
    let mut gaps = 0;
    let mut points = Vec::new();
    let mut it = recs.iter().peekable();
    for h in first..=last {
        while let Some(r) = it.next_if(|r| r.hour() == h) {
            let to_zero = r.to_wallet == ZERO_ADDRESS;
            match owner.get(r.token.as_str()).copied() {
                Some(cur) => {
                    if cur != r.from_wallet && !r.is_mint() {
                        gaps += 1;
                    }
                    let b = balance.get_mut(cur).expect("holder has balance");
                    *b -= 1;
                    if *b == 0 {
                        balance.remove(cur);
                    }
                    owner.remove(r.token.as_str());
                }
                None if !r.is_mint() => gaps += 1,
                None => {}
            }
            if !to_zero {
                owner.insert(&r.token, &r.to_wallet);
                *balance.entry(&r.to_wallet).or_default() += 1;
            }
        }
        let supply = owner.len() as u64;
        points.push(OwnershipPoint {
            collection: recs[0].collection.clone(),
            hour: h,
            unique_owners: balance.len() as u64,
            supply,
            fraction: (supply > 0).then(|| balance.len() as f64 / supply as f64),
        });
    }
    (points, gaps)
}

/// Replays transfers to track holders per collection hour. Tokens seen first
/// in a non-mint transfer are created in the receiving wallet, and counted as
/// data gaps. Transfers to the zero address burn the token.
pub fn unique_owner_series(log: &TransferLog) -> (OwnershipSeries, Vec<Diagnostic>) {
    let groups: Vec<(&str, Vec<&Transfer>)> = log.by_collection().into_iter().collect();
    let parts: Vec<(Vec<OwnershipPoint>, usize)> = groups.par_iter().map(|(_, r)| replay_collection(r)).collect();
    let mut series = OwnershipSeries::default();
    let mut diags = Vec::new();
    for ((c, _), (pts, gaps)) in groups.iter().zip(parts) {
        if gaps > 0 {
            diags.push(Diagnostic::new(
                "agents.ownership",
                None,
                format!("collection {c}: {gaps} transfers from a non-holder"),
            ));
        }
        series.data_gaps += gaps;
        let start = series.points.len();
        series.index.insert(c.to_string(), (pts[0].hour, start, pts.len()));
        series.points.extend(pts);
    }
    (series, diags)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WalletStats {
    pub wallet: String,
    pub n_tx: u64,
    pub total_value_eth: f64,
    pub wallet_age_days: f64,
    pub n_dex_swaps: u64,
    pub n_dex_liquidity: u64,
    pub n_lending_ops: u64,
    pub n_trades: u64,
    pub nft_volume: f64,
    pub mean_holding_hours: Option<f64>,
    pub hourly_profit_pct: Option<f64>,
}

/// Per-wallet chain activity and NFT trading statistics. Ages run from the
/// first transaction to `as_of` (UTC seconds).
pub fn enrich_wallets(
    txs: &[WalletTx],
    categories: &CategoryMap,
    log: Option<&TransferLog>,
    as_of: i64,
) -> BTreeMap<String, WalletStats> {
    let mut out: BTreeMap<String, WalletStats> = BTreeMap::new();
    let mut first: HashMap<&str, i64> = HashMap::new();
    for tx in txs {
        let s = out.entry(tx.wallet.clone()).or_insert_with(|| WalletStats {
            wallet: tx.wallet.clone(),
            ..Default::default()
        });
        s.n_tx += 1;
        s.total_value_eth += tx.value_eth;
        let f = first.entry(&tx.wallet).or_insert(tx.timestamp);
        *f = (*f).min(tx.timestamp);
        if tx.kind == TxKind::ContractCall {
            match categories.get(&tx.counterparty) {
                Some(Category::DexSwap) => s.n_dex_swaps += 1,
                Some(Category::DexLiquidity) => s.n_dex_liquidity += 1,
                Some(Category::Lending) => s.n_lending_ops += 1,
                _ => {}
            }
        }
    }
    for (w, s) in out.iter_mut() {
        s.wallet_age_days = ((as_of - first[w.as_str()]) as f64 / 86_400.0).max(0.0);
    }
    if let Some(log) = log {
        let mut open: HashMap<(&str, &str, &str), (i64, f64)> = HashMap::new();
        let mut trips: HashMap<&str, Vec<(f64, f64)>> = HashMap::new();
        for t in log.trades() {
            for w in [&t.to_wallet, &t.from_wallet] {
                if !out.contains_key(w.as_str()) {
                    continue;
                }
                let s = out.get_mut(w.as_str()).unwrap();
                s.n_trades += 1;
                s.nft_volume += t.price_eth;
            }
            let key_s = (t.from_wallet.as_str(), t.collection.as_str(), t.token.as_str());
            if let Some((ts, price)) = open.remove(&key_s) {
                let hours = ((t.timestamp - ts) as f64 / 3600.0).max(1.0);
                trips.entry(t.from_wallet.as_str()).or_default().push((hours, t.price_eth / price - 1.0));
            }
            open.insert((t.to_wallet.as_str(), t.collection.as_str(), t.token.as_str()), (t.timestamp, t.price_eth));
        }
        for (w, v) in trips {
            if let Some(s) = out.get_mut(w) {
                let hold: Vec<f64> = v.iter().map(|x| x.0).collect();
                let rate: Vec<f64> = v.iter().map(|x| x.1 / x.0).collect();
                s.mean_holding_hours = stats::mean(&hold);
                s.hourly_profit_pct = stats::mean(&rate).map(|m| m * 100.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupComparison {
    pub metric: String,
    pub mean_sophisticated: f64,
    pub mean_other: f64,
    pub difference: f64,
    pub t_stat: Option<f64>,
    pub n_sophisticated: usize,
    pub n_other: usize,
}

/// Compares wallet metrics between wallets ever flagged sophisticated and the rest.
pub fn compare_sophisticated(
    stats_by_wallet: &BTreeMap<String, WalletStats>,
    sophisticated: &HashSet<String>,
) -> Result<Vec<GroupComparison>> {
    type Get = fn(&WalletStats) -> Option<f64>;
    let metrics: [(&str, Get); 10] = [
        ("n_tx", |s| Some(s.n_tx as f64)),
        ("total_value_eth", |s| Some(s.total_value_eth)),
        ("wallet_age_days", |s| Some(s.wallet_age_days)),
        ("n_dex_swaps", |s| Some(s.n_dex_swaps as f64)),
        ("n_dex_liquidity", |s| Some(s.n_dex_liquidity as f64)),
        ("n_lending_ops", |s| Some(s.n_lending_ops as f64)),
        ("n_trades", |s| Some(s.n_trades as f64)),
        ("nft_volume", |s| Some(s.nft_volume)),
        ("mean_holding_hours", |s| s.mean_holding_hours),
        ("hourly_profit_pct", |s| s.hourly_profit_pct),
    ];
    let (soph, other): (Vec<&WalletStats>, Vec<&WalletStats>) =
        stats_by_wallet.values().partition(|s| sophisticated.contains(&s.wallet));
    if soph.is_empty() {
        return Err(Error::Empty("sophisticated wallet group"));
    }
    if other.is_empty() {
        return Err(Error::Empty("non-sophisticated wallet group"));
    }
    let mut out = Vec::new();
    for (name, get) in metrics {
        let a: Vec<f64> = soph.iter().filter_map(|s| get(s)).collect();
        let b: Vec<f64> = other.iter().filter_map(|s| get(s)).collect();
        let (Some(ma), Some(mb)) = (stats::mean(&a), stats::mean(&b)) else { continue };
        out.push(GroupComparison {
            metric: name.to_string(),
            mean_sophisticated: ma,
            mean_other: mb,
            difference: ma - mb,
            t_stat: stats::welch_t(&a, &b),
            n_sophisticated: a.len(),
            n_other: b.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Persistence {
    pub coefficient: f64,
    pub t_stat: f64,
    pub pairs: usize,
    pub low_power: bool,
}

/// Pooled AR(1) of a wallet's event profit on its previous event profit.
pub fn profit_persistence(records: &[AgentEventRecord]) -> Result<Persistence> {
    let mut by_wallet: BTreeMap<&str, Vec<(i64, &str, f64)>> = BTreeMap::new();
    for r in records {
        if let Some(p) = r.profit_pct {
            by_wallet.entry(&r.wallet).or_default().push((r.t0, &r.event, p));
        }
    }
    let mut data = Vec::new();
    let mut y = Vec::new();
    for v in by_wallet.values_mut() {
        v.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in v.windows(2) {
            data.extend([1.0, w[0].2]);
            y.push(w[1].2);
        }
    }
    let n = y.len();
    let x = nalgebra::DMatrix::from_row_slice(n, 2, &data);
    let fit = OlsFit::new(&x, &["const".into(), "lag_profit".into()], &y)?;
    let r = fit.result("profit_pct", SeMode::Plain, None)?;
    Ok(Persistence {
        coefficient: r.beta[1],
        t_stat: r.t[1],
        pairs: n,
        low_power: n < LOW_POWER_N,
    })
}

#[derive(Debug, Clone, Default)]
pub struct AgentAnalysis {
    pub records: Vec<AgentEventRecord>,
    /// Wallets flagged sophisticated at any event.
    pub sophisticated_wallets: HashSet<String>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Profits, sophistication flags and timing scores for every event, and the
/// event-level sophisticated fraction written back into each event.
pub fn analyze_agents(events: &mut [RunUpEvent], log: &TransferLog, params: &AgentParams) -> AgentAnalysis {
    let by = log.by_collection();
    let empty: Vec<&Transfer> = Vec::new();
    let per_event: Vec<(BTreeMap<String, WalletProfit>, Result<Vec<TimingRecord>>)> = events
        .par_iter()
        .map(|e| {
            let trades = by.get(e.collection.as_str()).unwrap_or(&empty);
            let profits = event_agent_profits(e, trades);
            let timing = if e.crash {
                timing_scores(e, trades)
            } else {
                Err(Error::NotCrash(e.id.clone()))
            };
            (profits, timing)
        })
        .collect();
    let participation: HashMap<String, BTreeMap<String, Option<f64>>> = events
        .iter()
        .zip(&per_event)
        .map(|(e, (p, _))| (e.id.clone(), p.iter().map(|(w, v)| (w.clone(), v.profit_pct)).collect()))
        .collect();
    let keys: Vec<(String, i64)> = events.iter().map(|e| (e.id.clone(), e.t0)).collect();
    let flags = sophistication_flags(&keys, &participation, params);
    let ever: HashSet<String> = flags.iter().filter(|(_, f)| **f).map(|((_, w), _)| w.clone()).collect();

    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (e, (profits, timing)) in events.iter_mut().zip(per_event) {
        let timing: HashMap<String, TimingRecord> = match timing {
            Ok(v) => v.into_iter().map(|r| (r.wallet.clone(), r)).collect(),
            Err(Error::NotCrash(_)) => HashMap::new(),
            Err(err) => {
                diagnostics.push(Diagnostic::new("agents.timing", None, err.to_string()));
                HashMap::new()
            }
        };
        let trades = by.get(e.collection.as_str()).unwrap_or(&empty);
        let active: HashSet<&str> = trades
            .iter()
            .filter(|t| t.is_trade() && (-24..=0).contains(&(t.hour() - e.t0)))
            .flat_map(|t| [t.from_wallet.as_str(), t.to_wallet.as_str()])
            .filter(|w| *w != ZERO_ADDRESS)
            .collect();
        let flagged_active = active
            .iter()
            .filter(|w| flags.get(&(e.id.clone(), w.to_string())).copied().unwrap_or(false))
            .count();
        e.predictors.sophisticated_frac =
            (!active.is_empty()).then(|| flagged_active as f64 / active.len() as f64);
        let wallets: Vec<&String> = profits.keys().chain(timing.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        for w in wallets {
            let p = profits.get(w);
            let t = timing.get(w);
            records.push(AgentEventRecord {
                wallet: w.clone(),
                event: e.id.clone(),
                collection: e.collection.clone(),
                t0: e.t0,
                crash: e.crash,
                profit_pct: p.and_then(|p| p.profit_pct),
                n_buys: p.map_or(0, |p| p.n_buys),
                n_sells: p.map_or(0, |p| p.n_sells),
                sophisticated: flags.get(&(e.id.clone(), w.clone())).copied().unwrap_or(false),
                sophisticated_ever: ever.contains(w),
                ts: t.map(|t| t.ts),
                ts_buy: t.map(|t| t.ts_buy),
                ts_sell: t.map(|t| t.ts_sell),
                ts_rank: t.map(|t| t.ts_rank),
                ts_buy_rank: t.map(|t| t.ts_buy_rank),
                ts_sell_rank: t.map(|t| t.ts_sell_rank),
            });
        }
    }
    AgentAnalysis {
        records,
        sophisticated_wallets: ever,
        diagnostics,
    }
}

/// Fills `unique_owner_change` on every event.
pub fn fill_unique_owner_change(events: &mut [RunUpEvent], series: &OwnershipSeries) {
    for e in events {
        e.predictors.unique_owner_change = series.change(&e.collection, e.t0);
    }
}

pub fn write_records_csv<W: Write>(records: &[AgentEventRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<AgentEventRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn write_ownership_csv<W: Write>(series: &OwnershipSeries, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in &series.points {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv_rows<W: Write, T: Serialize>(rows: impl IntoIterator<Item = T>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
