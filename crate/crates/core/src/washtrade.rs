//! Wash-trade filters, per-event wash volume, and distribution diagnostics
//! (Benford first-digit test and Hill tail exponent).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Diagnostic, Error, Result};
use crate::ingest::{FundingIndex, Transfer, TransferLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WashFilter {
    SelfTrade,
    InvertedPair,
    RepeatBuyer,
    CommonFunder,
}

impl WashFilter {
    pub const ALL: [WashFilter; 4] = [
        WashFilter::SelfTrade,
        WashFilter::InvertedPair,
        WashFilter::RepeatBuyer,
        WashFilter::CommonFunder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WashFilter::SelfTrade => "self_trade",
            WashFilter::InvertedPair => "inverted_pair",
            WashFilter::RepeatBuyer => "repeat_buyer",
            WashFilter::CommonFunder => "common_funder",
        }
    }
}

impl fmt::Display for WashFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WashFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WashFilter::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown wash filter `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WashFlag {
    pub tx_id: String,
    pub token: String,
    pub collection: String,
    pub timestamp: i64,
    /// Sorted, non-empty.
    pub filters: Vec<WashFilter>,
    pub volume_eth: f64,
}

impl WashFlag {
    pub fn key(&self) -> (String, String) {
        (self.tx_id.clone(), self.token.clone())
    }
}

#[derive(Debug, Clone, Default)]
pub struct WashReport {
    pub flags: Vec<WashFlag>,
    /// Trades where a funder lookup failed for buyer or seller.
    pub missing_funding: usize,
    pub diagnostics: Vec<Diagnostic>,
}

impl WashReport {
    pub fn keys(&self) -> HashSet<(String, String)> {
        self.flags.iter().map(|f| f.key()).collect()
    }

    pub fn count(&self, filter: WashFilter) -> usize {
        self.flags.iter().filter(|f| f.filters.contains(&filter)).count()
    }
}

/// Applies the four wash filters to every trade in the log. Funders in
/// `exclusions` never trigger the common-funder filter.
pub fn flag_wash_trades(log: &TransferLog, funding: &FundingIndex, exclusions: &HashSet<String>) -> WashReport {
    let trades: Vec<&Transfer> = log.trades().collect();
    let mut reasons: Vec<Vec<WashFilter>> = vec![Vec::new(); trades.len()];

    let mut by_token: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, t) in trades.iter().enumerate() {
        by_token.entry((&t.collection, &t.token)).or_default().push(i);
        if t.is_self_trade() {
            reasons[i].push(WashFilter::SelfTrade);
        }
    }

    for idx in by_token.values() {
        let pairs: HashSet<(&str, &str)> = idx
            .iter()
            .map(|&i| (trades[i].from_wallet.as_str(), trades[i].to_wallet.as_str()))
            .collect();
        let mut buys: HashMap<&str, usize> = HashMap::new();
        for &i in idx {
            let t = trades[i];
            if t.from_wallet != t.to_wallet && pairs.contains(&(t.to_wallet.as_str(), t.from_wallet.as_str())) {
                reasons[i].push(WashFilter::InvertedPair);
            }
            *buys.entry(t.to_wallet.as_str()).or_default() += 1;
        }
        for &i in idx {
            let t = trades[i];
            let hit = |w: &str| buys.get(w).is_some_and(|&n| n >= 3);
            if hit(&t.from_wallet) || hit(&t.to_wallet) {
                reasons[i].push(WashFilter::RepeatBuyer);
            }
        }
    }

    let mut missing = 0;
    let ok = |f: &str| !exclusions.contains(f);
    for (i, t) in trades.iter().enumerate() {
        let fb = funding.first_funder(&t.to_wallet);
        let fs = funding.first_funder(&t.from_wallet);
        if fb.is_none() || fs.is_none() {
            missing += 1;
        }
        let common = matches!((fb, fs), (Some(a), Some(b)) if a == b && ok(a));
        let buyer_by_seller = fb.is_some_and(|f| f == t.from_wallet && ok(f));
        let seller_by_buyer = fs.is_some_and(|f| f == t.to_wallet && ok(f));
        if common || buyer_by_seller || seller_by_buyer {
            reasons[i].push(WashFilter::CommonFunder);
        }
    }

    let mut flags: Vec<WashFlag> = trades
        .iter()
        .zip(reasons)
        .filter(|(_, r)| !r.is_empty())
        .map(|(t, mut r)| {
            r.sort();
            r.dedup();
            WashFlag {
                tx_id: t.tx_id.clone(),
                token: t.token.clone(),
                collection: t.collection.clone(),
                timestamp: t.timestamp,
                filters: r,
                volume_eth: t.price_eth,
            }
        })
        .collect();
    flags.sort_by(|a, b| (&a.tx_id, &a.token).cmp(&(&b.tx_id, &b.token)));

    let mut diagnostics = Vec::new();
    if missing > 0 {
        diagnostics.push(Diagnostic::new(
            "wash",
            None,
            format!("{missing} trades lack funding data for buyer or seller"),
        ));
    }
    WashReport {
        flags,
        missing_funding: missing,
        diagnostics,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FlagCsvRow {
    tx_id: String,
    token: String,
    filter: String,
    volume_eth: f64,
}

pub fn write_flags_csv<W: Write>(flags: &[WashFlag], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for f in flags {
        let filter: Vec<&str> = f.filters.iter().map(|x| x.as_str()).collect();
        wtr.serialize(FlagCsvRow {
            tx_id: f.tx_id.clone(),
            token: f.token.clone(),
            filter: filter.join("|"),
            volume_eth: f.volume_eth,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a flags CSV, recovering collection and timestamp from the log.
/// Flags whose trade is absent from the log are dropped with a diagnostic.
pub fn read_flags_csv<R: Read>(r: R, log: &TransferLog) -> Result<(Vec<WashFlag>, Vec<Diagnostic>)> {
    let index: HashMap<(&str, &str), &Transfer> = log
        .records()
        .iter()
        .map(|t| ((t.tx_id.as_str(), t.token.as_str()), t))
        .collect();
    let mut rdr = csv::Reader::from_reader(r);
    let mut flags = Vec::new();
    let mut diags = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let row: FlagCsvRow = row?;
        let filters = row
            .filter
            .split('|')
            .map(WashFilter::from_str)
            .collect::<Result<Vec<_>>>()?;
        match index.get(&(row.tx_id.as_str(), row.token.as_str())).copied() {
            Some(t) => flags.push(WashFlag {
                tx_id: row.tx_id,
                token: row.token,
                collection: t.collection.clone(),
                timestamp: t.timestamp,
                filters,
                volume_eth: row.volume_eth,
            }),
            None => diags.push(Diagnostic::new(
                "wash.flags",
                Some(i + 2),
                format!("flagged trade {} / {} not in log", row.tx_id, row.token),
            )),
        }
    }
    Ok((flags, diags))
}

/// Cumulative flagged volume per collection, for prefix queries by time.
#[derive(Debug, Clone, Default)]
pub struct WashIndex {
    by_collection: BTreeMap<String, (Vec<i64>, Vec<f64>)>,
}

impl WashIndex {
    pub fn new(flags: &[WashFlag]) -> Self {
        let mut tmp: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
        for f in flags {
            tmp.entry(f.collection.clone()).or_default().push((f.timestamp, f.volume_eth));
        }
        let by_collection = tmp
            .into_iter()
            .map(|(c, mut v)| {
                v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                let ts = v.iter().map(|x| x.0).collect();
                let mut acc = 0.0;
                let cum = v
                    .iter()
                    .map(|x| {
                        acc += x.1;
                        acc
                    })
                    .collect();
                (c, (ts, cum))
            })
            .collect();
        WashIndex { by_collection }
    }

    /// Flagged volume in the collection with timestamp strictly before `ts`.
    pub fn volume_before(&self, collection: &str, ts: i64) -> f64 {
        let Some((times, cum)) = self.by_collection.get(collection) else {
            return 0.0;
        };
        let n = times.partition_point(|&t| t < ts);
        if n == 0 {
            0.0
        } else {
            cum[n - 1]
        }
    }
}

/// ln(1 + flagged volume before the start of anchor hour `t0`).
pub fn wash_volume_before(index: &WashIndex, collection: &str, t0: i64) -> f64 {
    index.volume_before(collection, t0 * 3600).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenfordResult {
    pub observed: [f64; 9],
    pub expected: [f64; 9],
    pub chi2: f64,
    pub p_value: f64,
    pub n: usize,
    pub skipped: usize,
}

/// First-digit probabilities log10(1 + 1/d), d = 1..9.
pub fn benford_expected() -> [f64; 9] {
    std::array::from_fn(|i| (1.0 + 1.0 / (i + 1) as f64).log10())
}

/// First significant digit of a positive finite number.
pub fn leading_digit(x: f64) -> Option<u8> {
    if !(x > 0.0) || !x.is_finite() {
        return None;
    }
    let s = format!("{x:e}");
    s.bytes().next().map(|b| b - b'0')
}

pub fn benford_test(prices: &[f64]) -> Result<BenfordResult> {
    let mut counts = [0usize; 9];
    let mut skipped = 0;
    for &p in prices {
        match leading_digit(p) {
            Some(d) => counts[d as usize - 1] += 1,
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        Diagnostic::new("benford", None, format!("{skipped} non-positive values skipped"));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Empty("benford sample"));
    }
    let expected = benford_expected();
    let observed: [f64; 9] = std::array::from_fn(|i| counts[i] as f64 / n as f64);
    let chi2 = n as f64
        * observed
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e) * (o - e) / e)
            .sum::<f64>();
    let dist = ChiSquared::new(8.0).expect("valid degrees of freedom");
    Ok(BenfordResult {
        observed,
        expected,
        chi2,
        p_value: dist.sf(chi2),
        n,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub x_min: f64,
    pub k: usize,
}

/// Hill maximum-likelihood exponent of the density tail,
/// `1 + k / Σ ln(x_i / x_min)`, over the largest `tail_fraction` of values.
pub fn powerlaw_exponent(prices: &[f64], tail_fraction: f64) -> Result<PowerLawFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::Invalid(format!("tail fraction {tail_fraction} not in (0, 1]")));
    }
    let mut xs: Vec<f64> = prices.iter().copied().filter(|p| *p > 0.0 && p.is_finite()).collect();
    xs.sort_by(|a, b| b.total_cmp(a));
    let k = (tail_fraction * xs.len() as f64).floor() as usize;
    if k < 100 {
        return Err(Error::Invalid(format!("tail has {k} observations; need at least 100")));
    }
    let x_min = xs[k - 1];
    let s: f64 = xs[..k].iter().map(|x| (x / x_min).ln()).sum();
    if s <= 0.0 {
        return Err(Error::Invalid("degenerate tail: all values equal".into()));
    }
    Ok(PowerLawFit {
        alpha: 1.0 + k as f64 / s,
        x_min,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::FundingEdge;

    fn trade(tx: &str, from: &str, to: &str) -> Transfer {
        Transfer {
            tx_id: tx.into(),
            timestamp: 1000 + tx.len() as i64,
            collection: "c".into(),
            token: "k".into(),
            from_wallet: from.into(),
            to_wallet: to.into(),
            price_eth: 1.0,
            price_usd: 0.0,
            marketplace: "opensea".into(),
        }
    }

    fn run(trades: Vec<Transfer>, edges: Vec<FundingEdge>, excl: &[&str]) -> WashReport {
        let (log, _) = TransferLog::from_records(trades);
        let (idx, _) = FundingIndex::from_edges(edges);
        let ex = excl.iter().map(|s| s.to_string()).collect();
        flag_wash_trades(&log, &idx, &ex)
    }

    fn edge(w: &str, f: &str) -> FundingEdge {
        FundingEdge {
            wallet: w.into(),
            first_funder: f.into(),
            funded_at: 1,
        }
    }

    #[test]
    fn self_trade_is_flagged() {
        let r = run(vec![trade("t1", "a", "a")], vec![], &[]);
        assert_eq!(r.flags[0].filters, vec![WashFilter::SelfTrade]);
    }

    #[test]
    fn inverted_pair_flags_both() {
        let r = run(vec![trade("t1", "a", "b"), trade("t2", "b", "a")], vec![], &[]);
        assert_eq!(r.flags.len(), 2);
        assert!(r.flags.iter().all(|f| f.filters == vec![WashFilter::InvertedPair]));
        assert_eq!(r.missing_funding, 2);
    }

    #[test]
    fn third_buy_flags_all_of_the_wallets_trades() {
        let r = run(
            vec![
                trade("t1", "x", "w"),
                trade("t2", "w", "y"),
                trade("t3", "z", "w"),
                trade("t4", "w", "q"),
                trade("t5", "r", "w"),
            ],
            vec![],
            &[],
        );
        assert_eq!(r.count(WashFilter::RepeatBuyer), 5);
    }

    #[test]
    fn common_funder_respects_exclusions() {
        let edges = vec![edge("a", "x"), edge("b", "x")];
        let r = run(vec![trade("t1", "a", "b")], edges.clone(), &[]);
        assert_eq!(r.flags[0].filters, vec![WashFilter::CommonFunder]);
        let r = run(vec![trade("t1", "a", "b")], edges, &["x"]);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn funder_is_counterparty() {
        let r = run(vec![trade("t1", "a", "b")], vec![edge("b", "a"), edge("a", "z")], &[]);
        assert_eq!(r.count(WashFilter::CommonFunder), 1);
    }

    #[test]
    fn flags_csv_round_trip() {
        let (log, _) = TransferLog::from_records(vec![trade("t1", "a", "a"), trade("t2", "b", "c")]);
        let r = flag_wash_trades(&log, &FundingIndex::default(), &HashSet::new());
        let mut buf = Vec::new();
        write_flags_csv(&r.flags, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("tx_id,token,filter,volume_eth\n"));
        let (back, d) = read_flags_csv(buf.as_slice(), &log).unwrap();
        assert!(d.is_empty());
        assert_eq!(back, r.flags);
    }

    fn flag_at(ts: i64, vol: f64) -> WashFlag {
        WashFlag {
            tx_id: format!("{ts}"),
            token: "k".into(),
            collection: "c".into(),
            timestamp: ts,
            filters: vec![WashFilter::SelfTrade],
            volume_eth: vol,
        }
    }

    #[test]
    fn wash_volume_before_anchor() {
        let idx = WashIndex::new(&[]);
        assert_eq!(wash_volume_before(&idx, "c", 10), 0.0);
        let e = std::f64::consts::E;
        let idx = WashIndex::new(&[flag_at(3600, e - 1.0)]);
        assert!((wash_volume_before(&idx, "c", 2) - 1.0).abs() < 1e-12);
        let idx = WashIndex::new(&[flag_at(3600, 5.0), flag_at(3 * 3600, 5.0)]);
        assert!((wash_volume_before(&idx, "c", 3) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn leading_digits() {
        assert_eq!(leading_digit(0.042), Some(4));
        assert_eq!(leading_digit(1.0), Some(1));
        assert_eq!(leading_digit(987.0), Some(9));
        assert_eq!(leading_digit(0.0), None);
        assert_eq!(leading_digit(-3.0), None);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn benford_expected_digit_one() {
        assert!((benford_expected()[0] - 0.30103).abs() < 1e-5);
        assert!((benford_expected().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(benford_test(&[]).is_err());
    }

    #[test]
    fn powerlaw_rejects_small_or_degenerate_tails() {
        assert!(powerlaw_exponent(&[1.0; 50], 1.0).is_err());
        assert!(powerlaw_exponent(&[2.0; 1000], 0.5).is_err());
    }
}
