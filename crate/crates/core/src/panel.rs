//! Hourly collection panel: prices, returns, volume, mint supply and turnover.
//!
//! Hours without trades carry the last traded price forward with a zero
//! return. Hours are UTC-aligned (`timestamp / 3600`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};
use crate::ingest::{Transfer, TransferLog};
use crate::stats;

/// Return convention recorded in panel metadata.
pub const RETURN_CONVENTION: &str =
    "carried-forward average trade price; ret = 0 in no-trade hours; undefined until the second priced hour";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub collection: String,
    pub hour: i64,
    /// Mean trade price (ETH), carried forward through no-trade hours.
    pub price: Option<f64>,
    pub floor: Option<f64>,
    pub ret: Option<f64>,
    pub volume: f64,
    pub sales: u64,
    pub minted: u64,
    pub supply: u64,
    /// Sales over supply, in percent.
    pub turnover: Option<f64>,
    pub mcap: Option<f64>,
    pub age_hours: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelVar {
    Price,
    Floor,
    Ret,
    Volume,
    Sales,
    Minted,
    Supply,
    Turnover,
    Mcap,
    Age,
}

impl PanelVar {
    pub const ALL: [PanelVar; 10] = [
        PanelVar::Price,
        PanelVar::Floor,
        PanelVar::Ret,
        PanelVar::Volume,
        PanelVar::Sales,
        PanelVar::Minted,
        PanelVar::Supply,
        PanelVar::Turnover,
        PanelVar::Mcap,
        PanelVar::Age,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PanelVar::Price => "price",
            PanelVar::Floor => "floor",
            PanelVar::Ret => "ret",
            PanelVar::Volume => "volume",
            PanelVar::Sales => "sales",
            PanelVar::Minted => "minted",
            PanelVar::Supply => "supply",
            PanelVar::Turnover => "turnover",
            PanelVar::Mcap => "mcap",
            PanelVar::Age => "age_hours",
        }
    }
}

impl PanelRow {
    pub fn get(&self, var: PanelVar) -> Option<f64> {
        match var {
            PanelVar::Price => self.price,
            PanelVar::Floor => self.floor,
            PanelVar::Ret => self.ret,
            PanelVar::Volume => Some(self.volume),
            PanelVar::Sales => Some(self.sales as f64),
            PanelVar::Minted => Some(self.minted as f64),
            PanelVar::Supply => Some(self.supply as f64),
            PanelVar::Turnover => self.turnover,
            PanelVar::Mcap => self.mcap,
            PanelVar::Age => Some(self.age_hours as f64),
        }
    }

    // Integer-valued variables only ever receive observed order statistics.
    fn set(&mut self, var: PanelVar, v: f64) {
        match var {
            PanelVar::Price => self.price = Some(v),
            PanelVar::Floor => self.floor = Some(v),
            PanelVar::Ret => self.ret = Some(v),
            PanelVar::Volume => self.volume = v,
            PanelVar::Sales => self.sales = v as u64,
            PanelVar::Minted => self.minted = v as u64,
            PanelVar::Supply => self.supply = v as u64,
            PanelVar::Turnover => self.turnover = Some(v),
            PanelVar::Mcap => self.mcap = Some(v),
            PanelVar::Age => self.age_hours = v as i64,
        }
    }

    pub fn traded(&self) -> bool {
        self.sales > 0
    }
}

/// Rows ordered by (collection, hour), one contiguous hour range per collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Panel {
    rows: Vec<PanelRow>,
    index: BTreeMap<String, Range<usize>>,
}

impl Panel {
    pub fn from_rows(mut rows: Vec<PanelRow>) -> Self {
        rows.sort_by(|a, b| (a.collection.as_str(), a.hour).cmp(&(b.collection.as_str(), b.hour)));
        let mut index = BTreeMap::new();
        let mut start = 0;
        for i in 1..=rows.len() {
            if i == rows.len() || rows[i].collection != rows[start].collection {
                index.insert(rows[start].collection.clone(), start..i);
                start = i;
            }
        }
        Panel { rows, index }
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn collections(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(|s| s.as_str())
    }

    pub fn collection(&self, id: &str) -> &[PanelRow] {
        self.index
            .get(id)
            .map(|r| &self.rows[r.clone()])
            .unwrap_or(&[])
    }

    pub fn row(&self, collection: &str, hour: i64) -> Option<&PanelRow> {
        let rows = self.collection(collection);
        let first = rows.first()?.hour;
        if hour < first {
            return None;
        }
        rows.get((hour - first) as usize)
    }

    /// Carried price at an hour.
    pub fn price_at(&self, collection: &str, hour: i64) -> Option<f64> {
        self.row(collection, hour).and_then(|r| r.price)
    }

    /// Sets observed floor prices and the derived market capitalisation.
    pub fn apply_floor_quotes(&mut self, quotes: &[(String, i64, f64)]) {
        for (c, h, floor) in quotes {
            let Some(range) = self.index.get(c) else { continue };
            let first = self.rows[range.start].hour;
            let off = h - first;
            if off < 0 || off as usize >= range.len() {
                continue;
            }
            let row = &mut self.rows[range.start + off as usize];
            row.floor = Some(*floor);
            row.mcap = Some(row.supply as f64 * floor);
        }
    }
}

fn collection_rows(collection: &str, records: &[&Transfer], diags: &mut Vec<Diagnostic>) -> Vec<PanelRow> {
    let first = records.iter().map(|r| r.hour()).min().unwrap_or(0);
    let last = records.iter().map(|r| r.hour()).max().unwrap_or(0);
    let n = (last - first + 1) as usize;
    let mut volume = vec![0.0f64; n];
    let mut sales = vec![0u64; n];
    let mut minted = vec![0u64; n];
    for r in records {
        let i = (r.hour() - first) as usize;
        if r.is_mint() {
            minted[i] += 1;
        } else if r.is_trade() {
            volume[i] += r.price_eth;
            sales[i] += 1;
        }
    }
    let mut rows = Vec::with_capacity(n);
    let mut supply = 0u64;
    let mut carried: Option<f64> = None;
    let mut warned = false;
    for i in 0..n {
        supply += minted[i];
        let prev = carried;
        if sales[i] > 0 {
            carried = Some(volume[i] / sales[i] as f64);
        }
        let ret = match (prev, carried) {
            (Some(p0), Some(p1)) => Some(if sales[i] > 0 { p1 / p0 - 1.0 } else { 0.0 }),
            _ => None,
        };
        let turnover = if supply > 0 {
            Some(sales[i] as f64 / supply as f64 * 100.0)
        } else {
            if sales[i] > 0 && !warned {
                warned = true;
                diags.push(Diagnostic::new(
                    "panel",
                    None,
                    format!("collection {collection} trades before any mint; turnover undefined"),
                ));
            }
            None
        };
        rows.push(PanelRow {
            collection: collection.to_string(),
            hour: first + i as i64,
            price: carried,
            floor: None,
            ret,
            volume: volume[i],
            sales: sales[i],
            minted: minted[i],
            supply,
            turnover,
            mcap: None,
            age_hours: i as i64,
        });
    }
    rows
}

/// Aggregates a transfer log into the hourly panel.
pub fn build_panel(log: &TransferLog) -> (Panel, Vec<Diagnostic>) {
    let groups: Vec<(&str, Vec<&Transfer>)> = log.by_collection().into_iter().collect();
    let parts: Vec<(Vec<PanelRow>, Vec<Diagnostic>)> = groups
        .par_iter()
        .map(|(c, recs)| {
            let mut d = Vec::new();
            let rows = collection_rows(c, recs, &mut d);
            (rows, d)
        })
        .collect();
    let mut rows = Vec::new();
    let mut diags = Vec::new();
    for (r, d) in parts {
        rows.extend(r);
        diags.extend(d);
    }
    (Panel::from_rows(rows), diags)
}

/// Clips every panel variable at its `level` and `1 − level` quantiles taken
/// over the whole panel. Bounds are the order statistics nearest to the
/// interpolated quantile positions, so a second pass changes nothing.
pub fn winsorize(panel: &Panel, level: f64) -> Result<(Panel, Vec<Diagnostic>)> {
    if !(0.0..0.5).contains(&level) {
        return Err(Error::Invalid(format!("winsorize level {level} not in [0, 0.5)")));
    }
    let mut out = panel.clone();
    let mut diags = Vec::new();
    if level == 0.0 {
        return Ok((out, diags));
    }
    let min_n = (1.0 / level).ceil() as usize;
    for var in PanelVar::ALL {
        let vals: Vec<f64> = panel.rows.iter().filter_map(|r| r.get(var)).collect();
        if vals.is_empty() {
            continue;
        }
        if vals.len() < min_n {
            diags.push(Diagnostic::new(
                "panel.winsorize",
                None,
                format!("{}: {} observations < {min_n}; left unclipped", var.name(), vals.len()),
            ));
            continue;
        }
        let s = stats::sorted(&vals);
        let lo = stats::nearest_order_stat(&s, level).unwrap();
        let hi = stats::nearest_order_stat(&s, 1.0 - level).unwrap();
        for row in &mut out.rows {
            if let Some(v) = row.get(var) {
                let c = v.clamp(lo, hi);
                if c != v {
                    row.set(var, c);
                }
            }
        }
    }
    Ok((out, diags))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub variable: String,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsTable {
    pub rows: Vec<VarStats>,
}

impl StatsTable {
    pub fn get(&self, variable: &str) -> Option<&VarStats> {
        self.rows.iter().find(|r| r.variable == variable)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn summary_stats(panel: &Panel) -> Result<StatsTable> {
    if panel.is_empty() {
        return Err(Error::Empty("panel"));
    }
    let mut rows = Vec::new();
    for var in PanelVar::ALL {
        let vals: Vec<f64> = panel.rows.iter().filter_map(|r| r.get(var)).collect();
        if vals.is_empty() {
            continue;
        }
        let s = stats::sorted(&vals);
        rows.push(VarStats {
            variable: var.name().to_string(),
            mean: stats::mean(&vals).unwrap(),
            sd: stats::sample_sd(&vals).unwrap(),
            min: s[0],
            p25: stats::quantile_sorted(&s, 0.25).unwrap(),
            median: stats::quantile_sorted(&s, 0.5).unwrap(),
            p75: stats::quantile_sorted(&s, 0.75).unwrap(),
            max: s[s.len() - 1],
            n: vals.len(),
        });
    }
    Ok(StatsTable { rows })
}

pub fn write_panel_csv<W: Write>(panel: &Panel, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in panel.rows() {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_panel_csv<R: Read>(r: R) -> Result<Panel> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows: std::result::Result<Vec<PanelRow>, _> = rdr.deserialize().collect();
    Ok(Panel::from_rows(rows?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Transfer, ZERO_ADDRESS};

    fn tr(tx: &str, hour: i64, from: &str, to: &str, price: f64) -> Transfer {
        Transfer {
            tx_id: tx.into(),
            timestamp: hour * 3600 + 10,
            collection: "c".into(),
            token: tx.into(),
            from_wallet: from.into(),
            to_wallet: to.into(),
            price_eth: price,
            price_usd: 0.0,
            marketplace: "opensea".into(),
        }
    }

    fn mint(tx: &str, hour: i64) -> Transfer {
        tr(tx, hour, ZERO_ADDRESS, "0xm", 0.0)
    }

    #[test]
    fn mean_price_volume_sales_in_one_hour() {
        let (log, _) = TransferLog::from_records(vec![mint("m", 100), tr("a", 100, "x", "y", 1.0), tr("b", 100, "y", "z", 3.0)]);
        let (p, _) = build_panel(&log);
        let r = &p.rows()[0];
        assert_eq!(r.price, Some(2.0));
        assert_eq!(r.volume, 4.0);
        assert_eq!(r.sales, 2);
    }

    #[test]
    fn no_trade_hour_carries_price() {
        let (log, _) = TransferLog::from_records(vec![
            mint("m", 100),
            tr("a", 100, "x", "y", 2.0),
            tr("b", 102, "y", "z", 4.0),
        ]);
        let (p, _) = build_panel(&log);
        let rows = p.collection("c");
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].price, Some(2.0));
        assert_eq!(rows[1].ret, Some(0.0));
        assert_eq!(rows[1].sales, 0);
        assert_eq!(rows[2].ret, Some(1.0));
        assert_eq!(rows[0].ret, None);
        assert_eq!(rows.iter().map(|r| r.age_hours).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn turnover_five_sales_over_ten_minted() {
        let mut recs: Vec<Transfer> = (0..10).map(|i| mint(&format!("m{i}"), 100)).collect();
        recs.extend((0..5).map(|i| tr(&format!("s{i}"), 101, "x", "y", 1.0)));
        let (log, _) = TransferLog::from_records(recs);
        let (p, _) = build_panel(&log);
        let r = p.row("c", 101).unwrap();
        assert_eq!(r.supply, 10);
        assert!((r.turnover.unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn trades_without_mints_warn_and_leave_turnover_absent() {
        let (log, _) = TransferLog::from_records(vec![tr("a", 5, "x", "y", 1.0)]);
        let (p, d) = build_panel(&log);
        assert_eq!(p.rows()[0].turnover, None);
        assert_eq!(d.len(), 1);
    }

    fn column_panel(vals: &[f64]) -> Panel {
        Panel::from_rows(
            vals.iter()
                .enumerate()
                .map(|(i, v)| PanelRow {
                    collection: "c".into(),
                    hour: i as i64,
                    price: Some(*v),
                    floor: None,
                    ret: None,
                    volume: 0.0,
                    sales: 0,
                    minted: 0,
                    supply: 0,
                    turnover: None,
                    mcap: None,
                    age_hours: 0,
                })
                .collect(),
        )
    }

    #[test]
    fn winsorize_one_to_hundred() {
        let vals: Vec<f64> = (1..=100).map(f64::from).collect();
        let (w, _) = winsorize(&column_panel(&vals), 0.01).unwrap();
        let prices: Vec<f64> = w.rows().iter().map(|r| r.price.unwrap()).collect();
        let lo = prices.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = prices.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // interpolated quantiles are 1.99 / 99.01; bounds snap to the nearest observation
        assert_eq!(lo, 2.0);
        assert_eq!(hi, 99.0);
        assert!((lo - 1.99).abs() <= 0.011 && (hi - 99.01).abs() <= 0.011);
    }

    #[test]
    fn winsorize_constant_and_zero_level_are_identity() {
        let p = column_panel(&[3.0; 200]);
        assert_eq!(winsorize(&p, 0.01).unwrap().0, p);
        let q = column_panel(&(1..=300).map(f64::from).collect::<Vec<_>>());
        assert_eq!(winsorize(&q, 0.0).unwrap().0, q);
        assert!(winsorize(&q, 0.5).is_err());
    }

    #[test]
    fn winsorize_small_sample_is_noop_with_warning() {
        let p = column_panel(&[1.0, 2.0, 100.0]);
        let (w, d) = winsorize(&p, 0.01).unwrap();
        assert_eq!(w, p);
        assert!(!d.is_empty());
    }

    #[test]
    fn summary_of_single_row() {
        let p = column_panel(&[0.7]);
        let s = summary_stats(&p).unwrap();
        let price = s.get("price").unwrap();
        assert_eq!((price.mean, price.min, price.max, price.sd), (0.7, 0.7, 0.7, 0.0));
        assert!(summary_stats(&Panel::default()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (log, _) = TransferLog::from_records(vec![mint("m", 100), tr("a", 100, "x", "y", 0.1), tr("b", 103, "y", "z", 0.3)]);
        let (p, _) = build_panel(&log);
        let mut buf = Vec::new();
        write_panel_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("collection,hour,price,floor,ret,volume,sales,minted,supply,turnover,mcap,age_hours"));
        assert_eq!(read_panel_csv(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn floor_quotes_set_mcap() {
        let (log, _) = TransferLog::from_records(vec![mint("m", 100), mint("n", 100), tr("a", 100, "x", "y", 1.0)]);
        let (mut p, _) = build_panel(&log);
        p.apply_floor_quotes(&[("c".into(), 100, 0.5)]);
        assert_eq!(p.rows()[0].mcap, Some(1.0));
    }
}
