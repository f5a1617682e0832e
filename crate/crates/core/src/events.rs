//! Run-up detection, crash labels, and event-level predictors.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::TransferLog;
use crate::panel::{Panel, PanelRow};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelerationVariant {
    /// R[−24,0] − R[−24,−12]
    #[default]
    Body,
    /// R[−12,0] − R[−24,0]
    Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub runup_threshold: f64,
    pub lookback: i64,
    pub min_volume_eth: f64,
    pub window: i64,
    pub crash_threshold: f64,
    pub acceleration: AccelerationVariant,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            runup_threshold: 1.0,
            lookback: 24,
            min_volume_eth: 10.0,
            window: 24,
            crash_threshold: -0.40,
            acceleration: AccelerationVariant::Body,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictors {
    pub volatility: f64,
    pub turnover: Option<f64>,
    pub age_hours: i64,
    pub acceleration: f64,
    pub sophisticated_frac: Option<f64>,
    pub unique_owner_change: Option<f64>,
    pub wash_log_volume: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Liquidity {
    pub turnover_post: Option<f64>,
    pub amihud: Option<f64>,
    pub volatility_post: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunUpEvent {
    pub id: String,
    pub collection: String,
    pub t0: i64,
    pub volume_eth: f64,
    pub active_wallets: Option<u64>,
    pub runup_ret: f64,
    pub ex_post_ret: f64,
    pub crash: bool,
    pub price_t0: f64,
    pub entry_price: f64,
    pub exit_price: f64,
    pub predictors: Predictors,
    pub liquidity: Liquidity,
    /// Panel rows for event hours −w..=w; empty when loaded from CSV.
    pub window: Vec<PanelRow>,
}

pub fn event_id(collection: &str, t0: i64) -> String {
    format!("{collection}@{t0}")
}

/// Crash rule: ex-post cumulative return strictly below the threshold.
pub fn classify_crash(ex_post_ret: f64, threshold: f64) -> bool {
    ex_post_ret < threshold
}

/// Product of gross returns minus one.
pub fn compound(rets: &[f64]) -> f64 {
    rets.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

impl RunUpEvent {
    pub fn half_window(&self) -> i64 {
        (self.window.len() as i64 - 1) / 2
    }

    /// Panel row at event time `t`.
    pub fn at(&self, t: i64) -> Option<&PanelRow> {
        let w = self.half_window();
        if t < -w || t > w {
            return None;
        }
        self.window.get((t + w) as usize)
    }

    pub fn price(&self, t: i64) -> Option<f64> {
        self.at(t).and_then(|r| r.price)
    }

    /// Cumulative return since t = −w.
    pub fn cumret(&self, t: i64) -> Option<f64> {
        let w = self.half_window();
        Some(self.price(t)? / self.price(-w)? - 1.0)
    }

    pub fn relabel(&mut self, threshold: f64) {
        self.crash = classify_crash(self.ex_post_ret, threshold);
    }

    fn rets(&self, from: i64, to: i64) -> Vec<f64> {
        (from..=to).filter_map(|t| self.at(t).and_then(|r| r.ret)).collect()
    }

    fn turnover_mean(&self, from: i64, to: i64) -> Option<f64> {
        let v: Option<Vec<f64>> = (from..=to).map(|t| self.at(t).and_then(|r| r.turnover)).collect();
        stats::mean(&v?)
    }

    fn volume(&self, from: i64, to: i64) -> f64 {
        (from..=to).filter_map(|t| self.at(t)).map(|r| r.volume).sum()
    }

    /// Recomputes predictors, liquidity and labels from the attached window.
    fn compute(&mut self, params: &DetectParams) {
        let w = self.half_window();
        let p = |t| self.price(t).expect("window prices are defined");
        let (pm, p0, pmid, p1, pw) = (p(-w), p(0), p(-w / 2), p(1), p(w));
        self.runup_ret = p0 / pm - 1.0;
        self.price_t0 = p0;
        self.entry_price = p1;
        self.exit_price = pw;
        let post = self.rets(1, w);
        self.ex_post_ret = compound(&post);
        self.crash = classify_crash(self.ex_post_ret, params.crash_threshold);
        self.volume_eth = self.volume(-w, w);
        let acceleration = match params.acceleration {
            AccelerationVariant::Body => (p0 / pm - 1.0) - (pmid / pm - 1.0),
            AccelerationVariant::Caption => (p0 / pmid - 1.0) - (p0 / pm - 1.0),
        };
        self.predictors.volatility = stats::sample_sd(&self.rets(-w + 1, 0)).unwrap_or(0.0);
        self.predictors.turnover = self.turnover_mean(-w, 0);
        self.predictors.age_hours = self.at(0).map(|r| r.age_hours).unwrap_or(0);
        self.predictors.acceleration = acceleration;
        let post_volume = self.volume(1, w);
        self.liquidity = Liquidity {
            turnover_post: self.turnover_mean(1, w),
            amihud: (post_volume > 0.0).then(|| self.ex_post_ret.abs() / post_volume),
            volatility_post: stats::sample_sd(&post).unwrap_or(0.0),
        };
    }
}

fn window_ok(rows: &[PanelRow], i: usize, params: &DetectParams) -> bool {
    let (lb, w) = (params.lookback as usize, params.window as usize);
    if i < lb.max(w) || i + w >= rows.len() {
        return false;
    }
    let (Some(p0), Some(pb)) = (rows[i].price, rows[i - lb].price) else {
        return false;
    };
    if p0 / pb - 1.0 < params.runup_threshold {
        return false;
    }
    let vol: f64 = rows[i - w..=i + w].iter().map(|r| r.volume).sum();
    vol >= params.min_volume_eth
}

/// Builds an event from a collection's rows anchored at row index `i`.
pub fn event_at(rows: &[PanelRow], i: usize, params: &DetectParams) -> RunUpEvent {
    let w = params.window as usize;
    let mut ev = RunUpEvent {
        id: event_id(&rows[i].collection, rows[i].hour),
        collection: rows[i].collection.clone(),
        t0: rows[i].hour,
        volume_eth: 0.0,
        active_wallets: None,
        runup_ret: 0.0,
        ex_post_ret: 0.0,
        crash: false,
        price_t0: 0.0,
        entry_price: 0.0,
        exit_price: 0.0,
        predictors: Predictors::default(),
        liquidity: Liquidity::default(),
        window: rows[i - w..=i + w].to_vec(),
    };
    ev.compute(params);
    ev
}

/// Greedy earliest-first scan of one collection's contiguous hourly rows.
pub fn detect_in_rows(rows: &[PanelRow], params: &DetectParams) -> Vec<RunUpEvent> {
    let mut out = Vec::new();
    let gap = (2 * params.window + 1) as usize;
    let mut i = 0usize;
    while i < rows.len() {
        if window_ok(rows, i, params) {
            out.push(event_at(rows, i, params));
            i += gap;
        } else {
            i += 1;
        }
    }
    out
}

/// Detects run-up events in every collection, ordered by (collection, t0).
pub fn detect_runups(panel: &Panel, params: &DetectParams) -> Vec<RunUpEvent> {
    let ids: Vec<&str> = panel.collections().collect();
    let per: Vec<Vec<RunUpEvent>> = ids
        .par_iter()
        .map(|c| detect_in_rows(panel.collection(c), params))
        .collect();
    per.into_iter().flatten().collect()
}

/// Re-attaches panel windows to events loaded from CSV and recomputes the
/// panel-derived fields. Events whose window is not fully covered are dropped.
pub fn attach_windows(events: Vec<RunUpEvent>, panel: &Panel, params: &DetectParams) -> Vec<RunUpEvent> {
    events
        .into_iter()
        .filter_map(|mut ev| {
            let rows = panel.collection(&ev.collection);
            let first = rows.first()?.hour;
            let i = usize::try_from(ev.t0 - first).ok()?;
            let w = params.window as usize;
            if i < w || i + w >= rows.len() || rows[i - w].price.is_none() {
                return None;
            }
            ev.window = rows[i - w..=i + w].to_vec();
            let keep = ev.predictors.clone();
            ev.compute(params);
            ev.predictors.sophisticated_frac = keep.sophisticated_frac;
            ev.predictors.unique_owner_change = keep.unique_owner_change;
            ev.predictors.wash_log_volume = keep.wash_log_volume;
            Some(ev)
        })
        .collect()
}

/// Counts distinct buyers and sellers trading the collection inside each window.
pub fn fill_active_wallets(events: &mut [RunUpEvent], log: &TransferLog, window: i64) {
    let by = log.by_collection();
    events.par_iter_mut().for_each(|ev| {
        let mut set = HashSet::new();
        if let Some(recs) = by.get(ev.collection.as_str()) {
            for r in recs.iter().filter(|r| r.is_trade()) {
                let d = r.hour() - ev.t0;
                if (-window..=window).contains(&d) {
                    set.insert(r.from_wallet.as_str());
                    set.insert(r.to_wallet.as_str());
                }
            }
        }
        ev.active_wallets = Some(set.len() as u64);
    });
}

/// Returns the crash ids at each threshold.
pub fn crash_sweep(events: &[RunUpEvent], thresholds: &[f64]) -> BTreeMap<String, Vec<String>> {
    thresholds
        .iter()
        .map(|&th| {
            let ids = events
                .iter()
                .filter(|e| classify_crash(e.ex_post_ret, th))
                .map(|e| e.id.clone())
                .collect();
            (format!("{th}"), ids)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventCsvRow {
    id: String,
    collection: String,
    t0: i64,
    volume_eth: f64,
    active_wallets: Option<u64>,
    runup_ret: f64,
    ex_post_ret: f64,
    crash: u8,
    price_t0: f64,
    entry_price: f64,
    exit_price: f64,
    volatility: f64,
    turnover: Option<f64>,
    age_hours: i64,
    acceleration: f64,
    sophisticated_frac: Option<f64>,
    unique_owner_change: Option<f64>,
    wash_log_volume: Option<f64>,
    turnover_post: Option<f64>,
    amihud: Option<f64>,
    volatility_post: f64,
}

pub fn write_events_csv<W: Write>(events: &[RunUpEvent], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for e in events {
        wtr.serialize(EventCsvRow {
            id: e.id.clone(),
            collection: e.collection.clone(),
            t0: e.t0,
            volume_eth: e.volume_eth,
            active_wallets: e.active_wallets,
            runup_ret: e.runup_ret,
            ex_post_ret: e.ex_post_ret,
            crash: e.crash as u8,
            price_t0: e.price_t0,
            entry_price: e.entry_price,
            exit_price: e.exit_price,
            volatility: e.predictors.volatility,
            turnover: e.predictors.turnover,
            age_hours: e.predictors.age_hours,
            acceleration: e.predictors.acceleration,
            sophisticated_frac: e.predictors.sophisticated_frac,
            unique_owner_change: e.predictors.unique_owner_change,
            wash_log_volume: e.predictors.wash_log_volume,
            turnover_post: e.liquidity.turnover_post,
            amihud: e.liquidity.amihud,
            volatility_post: e.liquidity.volatility_post,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(r: R) -> Result<Vec<RunUpEvent>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let c: EventCsvRow = row?;
        out.push(RunUpEvent {
            id: c.id,
            collection: c.collection,
            t0: c.t0,
            volume_eth: c.volume_eth,
            active_wallets: c.active_wallets,
            runup_ret: c.runup_ret,
            ex_post_ret: c.ex_post_ret,
            crash: c.crash != 0,
            price_t0: c.price_t0,
            entry_price: c.entry_price,
            exit_price: c.exit_price,
            predictors: Predictors {
                volatility: c.volatility,
                turnover: c.turnover,
                age_hours: c.age_hours,
                acceleration: c.acceleration,
                sophisticated_frac: c.sophisticated_frac,
                unique_owner_change: c.unique_owner_change,
                wash_log_volume: c.wash_log_volume,
            },
            liquidity: Liquidity {
                turnover_post: c.turnover_post,
                amihud: c.amihud,
                volatility_post: c.volatility_post,
            },
            window: Vec::new(),
        });
    }
    Ok(out)
}
