//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use bubblescope::agents::{timing_scores, ts_buy};
use bubblescope::econometrics::{crash_regression, ols, EventVar, Estimator, OlsFit, SeMode, Spec};
use bubblescope::events::{crash_sweep, detect_runups, event_at, read_events_csv, DetectParams, RunUpEvent};
use bubblescope::ingest::{FundingEdge, FundingIndex, Transfer, TransferLog};
use bubblescope::panel::{build_panel, Panel, PanelRow};
use bubblescope::pipeline::{run_pipeline, with_threads, PipelineConfig};
use bubblescope::synth::{generate_market, SynthConfig, SynthMarket};
use bubblescope::washtrade::{benford_expected, benford_test, flag_wash_trades};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

// ---------------------------------------------------------------- detector

/// Exhaustive scan: every hour is tested on absolute-hour lookups, then
/// qualifiers are taken earliest first with no two anchors within 2w hours.
fn oracle_scan(panel: &Panel, collection: &str, p: &DetectParams) -> Vec<i64> {
    let rows = panel.collection(collection);
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        return Vec::new();
    };
    let (first, last) = (first.hour, last.hour);
    let qualifies = |h: i64| {
        if h - p.lookback.max(p.window) < first || h + p.window > last {
            return false;
        }
        let (Some(p0), Some(pb)) = (panel.price_at(collection, h), panel.price_at(collection, h - p.lookback)) else {
            return false;
        };
        let vol: f64 = (h - p.window..=h + p.window)
            .map(|x| panel.row(collection, x).map_or(0.0, |r| r.volume))
            .sum();
        p0 / pb - 1.0 >= p.runup_threshold && vol >= p.min_volume_eth
    };
    let mut out: Vec<i64> = Vec::new();
    for h in (first..=last).filter(|&h| qualifies(h)) {
        if out.last().is_none_or(|&l| h - l > 2 * p.window) {
            out.push(h);
        }
    }
    out
}

fn detector_oracle() -> Outcome {
    let params = DetectParams::default();
    let mut detect_time = Duration::ZERO;
    let (mut planted, mut found, mut hit) = (0usize, 0usize, 0usize);
    for seed in 0..50u64 {
        let cfg = SynthConfig {
            seed,
            n_collections: 5,
            horizon_hours: 2000,
            ..SynthConfig::default()
        };
        let m = generate_market(&cfg).map_err(|e| e.to_string())?;
        let t = Instant::now();
        let (panel, _) = build_panel(&m.log());
        let events = detect_runups(&panel, &params);
        detect_time += t.elapsed();

        let got: BTreeSet<(String, i64)> = events.iter().map(|e| (e.collection.clone(), e.t0)).collect();
        let oracle: BTreeSet<(String, i64)> = panel
            .collections()
            .flat_map(|c| oracle_scan(&panel, c, &params).into_iter().map(move |h| (c.to_string(), h)))
            .collect();
        ensure!(got == oracle, "seed {seed}: detector {:?} vs oracle {:?}", got.symmetric_difference(&oracle).take(5).collect::<Vec<_>>(), oracle.len());
        let truth: BTreeSet<(String, i64)> = m.truth.events.iter().map(|e| (e.collection.clone(), e.t0)).collect();
        planted += truth.len();
        found += got.len();
        hit += got.intersection(&truth).count();
    }
    let recall = hit as f64 / planted as f64;
    let precision = hit as f64 / found as f64;
    ensure!(recall == 1.0 && precision == 1.0, "recall {recall}, precision {precision}");
    ensure!(detect_time < Duration::from_secs(10), "detection took {detect_time:?}");
    Ok(format!(
        "50 markets, {planted} planted events, recall 1.0, precision 1.0, oracle set-equal, detection {:.2}s",
        detect_time.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- crash sweep

fn crash_sweep_nesting(events: &[RunUpEvent]) -> Outcome {
    let ths = [-0.2, -0.4, -0.6, -0.8];
    let sweep = crash_sweep(events, &ths);
    let sets: Vec<BTreeSet<&String>> = ths.iter().map(|t| sweep[&format!("{t}")].iter().collect()).collect();
    for w in sets.windows(2) {
        ensure!(w[1].is_subset(&w[0]), "crash sets are not nested");
    }
    for (t, s) in ths.iter().zip(&sets) {
        let direct: BTreeSet<&String> = events.iter().filter(|e| e.ex_post_ret < *t).map(|e| &e.id).collect();
        ensure!(&direct == s, "threshold {t}: set differs from ex-post rule");
    }
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    ensure!(sizes[0] > sizes[3], "sweep is degenerate: {sizes:?}");
    Ok(format!("{} events, crash counts {:?} at {:?}", events.len(), sizes, ths))
}

// ---------------------------------------------------------------- timing score

fn crash_event(peak: i64, base: i64) -> RunUpEvent {
    let mut prices = vec![1.0; 24];
    prices.push(2.1);
    for t in 1..=24 {
        prices.push(if t == peak { 3.0 } else if t < peak { 2.2 } else { 0.5 });
    }
    let mut prev: Option<f64> = None;
    let rows: Vec<PanelRow> = prices
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ret = prev.map(|q| p / q - 1.0);
            prev = Some(p);
            PanelRow {
                collection: "c".into(),
                hour: base + i as i64,
                price: Some(p),
                floor: None,
                ret,
                volume: 1.0,
                sales: 1,
                minted: 0,
                supply: 10,
                turnover: Some(0.1),
                mcap: None,
                age_hours: i as i64,
            }
        })
        .collect();
    let mut ev = event_at(&rows, 24, &DetectParams::default());
    ev.crash = true;
    ev
}

fn timing_table() -> Outcome {
    for d in -24..=24i64 {
        let eq1 = if d <= 0 { -d - 12 } else { d - 12 };
        ensure!(ts_buy(d) == eq1, "TS_buy({d}) = {}", ts_buy(d));
    }
    ensure!(ts_buy(-24) == 12, "TS_buy(-24) != 12");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = 450_000i64;
    let wallets: Vec<String> = (1..=8).map(|i| format!("0x{i:040x}")).collect();
    let mut scored = 0usize;
    for seq in 0..1000 {
        let peak = rng.random_range(1..=24i64);
        let ev = crash_event(peak, base);
        let n = rng.random_range(1..40);
        let trades: Vec<Transfer> = (0..n)
            .map(|i| Transfer {
                tx_id: format!("0x{seq:x}{i:04x}"),
                timestamp: (ev.t0 + rng.random_range(-30..=54i64)) * 3600 + rng.random_range(0..3600),
                collection: "c".into(),
                token: format!("{}", rng.random_range(0..5)),
                from_wallet: wallets[rng.random_range(0..wallets.len())].clone(),
                to_wallet: wallets[rng.random_range(0..wallets.len())].clone(),
                price_eth: 1.0,
                price_usd: 0.0,
                marketplace: "m".into(),
            })
            .collect();
        let refs: Vec<&Transfer> = trades.iter().collect();
        let got = timing_scores(&ev, &refs).map_err(|e| e.to_string())?;

        let t_star = ev.t0 + peak;
        let mut b: BTreeMap<&str, [i64; 49]> = BTreeMap::new();
        let mut s: BTreeMap<&str, [i64; 49]> = BTreeMap::new();
        for t in &trades {
            let d = t.timestamp.div_euclid(3600) - t_star;
            if (-24..=24).contains(&d) {
                b.entry(&t.to_wallet).or_insert([0; 49])[(d + 24) as usize] += 1;
                s.entry(&t.from_wallet).or_insert([0; 49])[(d + 24) as usize] += 1;
                b.entry(&t.from_wallet).or_insert([0; 49]);
                s.entry(&t.to_wallet).or_insert([0; 49]);
            }
        }
        let mut want: BTreeMap<&str, (i64, i64, i64)> = BTreeMap::new();
        for (w, bw) in &b {
            let sw = s[w];
            let (mut tb, mut tsl) = (0i64, 0i64);
            for d in -24..=24i64 {
                let buy = if d <= 0 { -d - 12 } else { d - 12 };
                tb += bw[(d + 24) as usize] * buy;
                tsl += sw[(d + 24) as usize] * -buy;
            }
            want.insert(w, (tb + tsl, tb, tsl));
        }
        let have: BTreeMap<&str, (i64, i64, i64)> =
            got.iter().map(|r| (r.wallet.as_str(), (r.ts, r.ts_buy, r.ts_sell))).collect();
        ensure!(have == want, "sequence {seq}: {have:?} vs brute force {want:?}");
        scored += have.len();
    }
    Ok(format!("49 distances exact; 1000 sequences ({scored} wallet scores) match brute force"))
}

// ---------------------------------------------------------------- wash filters

#[derive(Default)]
struct Scenario {
    trades: Vec<Transfer>,
    funding: Vec<FundingEdge>,
    exclusions: HashSet<String>,
}

fn addr(kind: u8, id: usize) -> String {
    format!("0x{kind:02x}{id:038x}")
}

/// Brute-force condition vector of each trade: self, inverted, repeat, funder.
fn wash_oracle(trades: &[Transfer], funding: &HashMap<String, String>, excl: &HashSet<String>) -> Vec<[bool; 4]> {
    trades
        .iter()
        .map(|t| {
            let same_token = |u: &&Transfer| u.collection == t.collection && u.token == t.token;
            let selft = t.from_wallet == t.to_wallet;
            let inverted = !selft
                && trades
                    .iter()
                    .filter(same_token)
                    .any(|u| u.from_wallet == t.to_wallet && u.to_wallet == t.from_wallet);
            let buys = |w: &str| trades.iter().filter(same_token).filter(|u| u.to_wallet == w).count();
            let repeat = buys(&t.to_wallet) >= 3 || buys(&t.from_wallet) >= 3;
            let fb = funding.get(&t.to_wallet);
            let fs = funding.get(&t.from_wallet);
            let usable = |f: &String| !excl.contains(f);
            let funder = matches!((fb, fs), (Some(a), Some(b)) if a == b && usable(a))
                || fb.is_some_and(|f| *f == t.from_wallet && usable(f))
                || fs.is_some_and(|f| *f == t.to_wallet && usable(f));
            [selft, inverted, repeat, funder]
        })
        .collect()
}

fn wash_truth_table() -> Outcome {
    let mut sc = Scenario::default();
    let mut next = 0usize;
    let mut fresh = |kind: u8| {
        next += 1;
        addr(kind, next)
    };
    // (scenario index, mask, excluded, index of target trade)
    let mut targets = Vec::new();
    let mut ts = 1_640_000_000i64;
    for mask in 0u8..16 {
        for excluded in [false, true] {
            for seller_funds_buyer in [false, true] {
                let token = format!("{}", targets.len());
                let (selft, inverted, repeat, common) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0);
                let a = fresh(0x01);
                let b = if selft { a.clone() } else { fresh(0x01) };
                let mut trade = |from: &str, to: &str, trades: &mut Vec<Transfer>| {
                    ts += 3600;
                    trades.push(Transfer {
                        tx_id: format!("0x{:064x}", trades.len() + 1),
                        timestamp: ts,
                        collection: "0xc0".into(),
                        token: token.clone(),
                        from_wallet: from.into(),
                        to_wallet: to.into(),
                        price_eth: 0.5,
                        price_usd: 0.0,
                        marketplace: "m".into(),
                    });
                };
                let mut helpers = Vec::new();
                if repeat {
                    let (c1, c2, c3) = (fresh(0x01), fresh(0x01), fresh(0x01));
                    trade(&c1, &b, &mut sc.trades);
                    trade(&b, &c2, &mut sc.trades);
                    trade(&c3, &b, &mut sc.trades);
                    helpers.extend([c1, c2, c3]);
                }
                let target = sc.trades.len();
                trade(&a, &b, &mut sc.trades);
                if inverted && !selft {
                    trade(&b, &a, &mut sc.trades);
                }
                if inverted && selft {
                    // a self trade has no distinct counterparty; the pair
                    // lives on the same token between two other wallets
                    let (x, y) = (fresh(0x01), fresh(0x01));
                    trade(&x, &y, &mut sc.trades);
                    trade(&y, &x, &mut sc.trades);
                    helpers.extend([x, y]);
                }
                let (fa, fb) = if common && seller_funds_buyer && !selft {
                    (fresh(0x0a), a.clone())
                } else if common {
                    let f = fresh(0x0b);
                    (f.clone(), f)
                } else {
                    (fresh(0x0a), fresh(0x0a))
                };
                if excluded && common {
                    sc.exclusions.insert(fb.clone());
                }
                // a self trade always shares its own funder, so an unfunded
                // wallet stands in for the no-common-funder rows
                if common || !selft {
                    sc.funding.push(FundingEdge { wallet: a.clone(), first_funder: fa, funded_at: 0 });
                }
                if !selft {
                    sc.funding.push(FundingEdge { wallet: b.clone(), first_funder: fb, funded_at: 0 });
                }
                for h in helpers {
                    let f = fresh(0x0a);
                    sc.funding.push(FundingEdge { wallet: h, first_funder: f, funded_at: 0 });
                }
                targets.push((mask, excluded, target));
            }
        }
    }
    let (log, dups) = TransferLog::from_records(sc.trades.clone());
    ensure!(dups == 0, "scenario has duplicate trades");
    let trades: Vec<Transfer> = log.trades().cloned().collect();
    let funders: HashMap<String, String> = sc.funding.iter().map(|e| (e.wallet.clone(), e.first_funder.clone())).collect();
    let (index, _) = FundingIndex::from_edges(sc.funding.clone());

    let mut checked = 0;
    for excl in [HashSet::new(), sc.exclusions.clone()] {
        let report = flag_wash_trades(&log, &index, &excl);
        let flagged: HashMap<(String, String), Vec<bool>> = report
            .flags
            .iter()
            .map(|f| {
                let v = bubblescope::washtrade::WashFilter::ALL.iter().map(|w| f.filters.contains(w)).collect();
                (f.key(), v)
            })
            .collect();
        let oracle = wash_oracle(&trades, &funders, &excl);
        for (t, o) in trades.iter().zip(&oracle) {
            let key = (t.tx_id.clone(), t.token.clone());
            let any = o.iter().any(|&c| c);
            ensure!(flagged.contains_key(&key) == any, "trade {} flagged={} oracle={o:?}", t.tx_id, !any);
            if let Some(v) = flagged.get(&key) {
                ensure!(v.as_slice() == o.as_slice(), "trade {} filters {v:?} vs oracle {o:?}", t.tx_id);
            }
            checked += 1;
        }
        // the scenario realizes every combination on its target trade
        let by_id: HashMap<&str, &[bool; 4]> = trades.iter().zip(&oracle).map(|(t, o)| (t.tx_id.as_str(), o)).collect();
        let with_excl = !excl.is_empty();
        for &(mask, excluded, target) in &targets {
            let o = by_id[sc.trades[target].tx_id.as_str()];
            let mut want = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0];
            if want[0] {
                want[1] = false;
            }
            if excluded && with_excl {
                want[3] = false;
            }
            ensure!(*o == want, "mask {mask:04b}: target conditions {o:?}, wanted {want:?}");
        }
    }

    let mut planted = 0;
    let mut markets = 0;
    for seed in [42u64, 7, 11] {
        let m = generate_market(&SynthConfig { seed, n_collections: 8, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
        let (recall, precision, n) = wash_recovery(&m);
        ensure!(recall == 1.0 && precision == 1.0, "seed {seed}: recall {recall}, precision {precision}");
        planted += n;
        markets += 1;
    }
    Ok(format!(
        "{} scenarios x 2 exclusion sets, {checked} trades match oracle; {planted} planted loop trades in {markets} markets, recall 1.0, precision 1.0",
        targets.len()
    ))
}

fn wash_recovery(m: &SynthMarket) -> (f64, f64, usize) {
    let (index, _) = FundingIndex::from_edges(m.funding.clone());
    let report = flag_wash_trades(&m.log(), &index, &m.categories.exclusions());
    let got = report.keys();
    let truth: HashSet<(String, String)> = m.truth.wash_trades.iter().map(|w| (w.tx_id.clone(), w.token.clone())).collect();
    let hit = got.intersection(&truth).count() as f64;
    (hit / truth.len() as f64, hit / got.len() as f64, truth.len())
}

// ---------------------------------------------------------------- benford

fn benford() -> Outcome {
    let total: f64 = benford_expected().iter().sum();
    ensure!((total - 1.0).abs() <= 1e-12, "expected frequencies sum to {total}");
    let n = 10_000;
    // mantissas spread evenly in log space follow the first-digit law
    let law: Vec<f64> = (0..n).map(|i| 10f64.powf((i as f64 + 0.5) / n as f64) * 0.37).collect();
    let fit = benford_test(&law).map_err(|e| e.to_string())?;
    ensure!(fit.p_value > 0.5, "Benford sample p = {}", fit.p_value);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flat: Vec<f64> = (0..n).map(|_| rng.random_range(1..=9) as f64 + rng.random::<f64>()).collect();
    let uni = benford_test(&flat).map_err(|e| e.to_string())?;
    ensure!(uni.p_value < 0.01, "uniform-digit sample p = {}", uni.p_value);
    Ok(format!(
        "sum |1 - Σ| = {:.1e}; Benford p = {:.4}; uniform-digit p = {:.2e}",
        (total - 1.0).abs(),
        fit.p_value,
        uni.p_value
    ))
}

// ---------------------------------------------------------------- OLS

/// Solves the normal equations X'X b = X'y by Gauss-Jordan elimination with
/// partial pivoting; also returns (X'X)^-1.
fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = x[0].len();
    let mut a = vec![vec![0.0; 2 * k + 1]; k];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += row[i] * row[j];
            }
            a[i][2 * k] += row[i] * yi;
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[k + i] = 1.0;
    }
    for c in 0..k {
        let piv = (c..k).max_by(|&p, &q| a[p][c].abs().total_cmp(&a[q][c].abs())).unwrap();
        a.swap(c, piv);
        let d = a[c][c];
        for v in a[c].iter_mut() {
            *v /= d;
        }
        for r in 0..k {
            if r != c {
                let f = a[r][c];
                let src = a[c].clone();
                for (v, s) in a[r].iter_mut().zip(&src) {
                    *v -= f * s;
                }
            }
        }
    }
    let beta = a.iter().map(|r| r[2 * k]).collect();
    let inv = a.iter().map(|r| r[k..2 * k].to_vec()).collect();
    (beta, inv)
}

fn ols_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut worst_se = 0.0f64;
    for design in 0..100 {
        let n = rng.random_range(40..300);
        let k = rng.random_range(2..7);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r = vec![1.0];
                r.extend((1..k).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
                r
            })
            .collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let z: f64 = StandardNormal.sample(&mut rng);
                r.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>() + z * rng.random_range(0.1..2.0)
            })
            .collect();
        let x = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
        let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
        let fit = OlsFit::new(&x, &names, &y).map_err(|e| e.to_string())?;
        let (oracle, inv) = normal_equations(&rows, &y);
        for (got, want) in fit.beta.iter().zip(&oracle) {
            let rel = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(rel);
            ensure!(rel <= 1e-8, "design {design}: beta {got} vs {want}");
        }
        let e = &fit.residuals;
        let scale = x.norm() * DMatrix::from_column_slice(n, 1, &y).norm();
        let xte = x.transpose() * e;
        ensure!(xte.amax() <= 1e-10 * scale, "design {design}: X'e = {}", xte.amax());

        // plain and HC1 against hand-built covariances
        let s2 = e.norm_squared() / (n - k) as f64;
        let plain = fit.result("y", SeMode::Plain, None).map_err(|e| e.to_string())?;
        let hc = fit.result("y", SeMode::HcRobust, None).map_err(|e| e.to_string())?;
        let mut meat = vec![vec![0.0; k]; k];
        for (r, ei) in rows.iter().zip(e.iter()) {
            for i in 0..k {
                for j in 0..k {
                    meat[i][j] += r[i] * r[j] * ei * ei;
                }
            }
        }
        for i in 0..k {
            let mut v = 0.0;
            for a in 0..k {
                for c in 0..k {
                    v += inv[i][a] * meat[a][c] * inv[c][i];
                }
            }
            let hc_want = (v * n as f64 / (n - k) as f64).sqrt();
            let plain_want = (s2 * inv[i][i]).sqrt();
            for (got, want) in [(hc.se[i], hc_want), (plain.se[i], plain_want)] {
                let rel = (got - want).abs() / want;
                worst_se = worst_se.max(rel);
                ensure!(rel <= 1e-8, "design {design}: se {got} vs {want}");
            }
        }

        // singleton clusters: G = n, so G/(G−1)·(n−1)/(n−k) equals n/(n−k)
        let ids: Vec<usize> = (0..n).collect();
        let cl = ols(&x, &names, &y, SeMode::Cluster, Some(&ids)).map_err(|e| e.to_string())?;
        let factor = (n as f64 / (n - 1) as f64) * ((n - 1) as f64 / (n - k) as f64) / (n as f64 / (n - k) as f64);
        for (c, h) in cl.se.iter().zip(&hc.se) {
            let rel = (c / h - factor.sqrt()).abs();
            ensure!(rel <= 1e-10, "design {design}: singleton cluster se {c} vs hc {h}");
        }
    }
    Ok(format!(
        "100 designs; max rel beta error {worst:.1e}, max rel se error {worst_se:.1e}; X'e ≈ 0; singleton cluster = HC1"
    ))
}

// ---------------------------------------------------------------- pipeline criteria

struct Run {
    dir: tempfile::TempDir,
    secs: f64,
}

fn standard_config() -> PipelineConfig {
    PipelineConfig {
        synth: Some(SynthConfig::default()),
        ..PipelineConfig::default()
    }
}

fn run_standard(threads: usize) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = standard_config();
    let t = Instant::now();
    let out = dir.path().to_path_buf();
    with_threads(threads, move || run_pipeline(&cfg, &out))
        .and_then(|r| r)
        .map_err(|e| e.to_string())?;
    Ok(Run {
        dir,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn full_events(dir: &Path) -> Result<Vec<RunUpEvent>, String> {
    let f = fs::File::open(dir.join("events_full.csv")).map_err(|e| e.to_string())?;
    read_events_csv(f).map_err(|e| e.to_string())
}

fn sign_recovery(events: &[RunUpEvent]) -> Outcome {
    let mut ev = events.to_vec();
    ev.sort_by(|a, b| (a.t0, &a.id).cmp(&(b.t0, &b.id)));
    ensure!(ev.len() >= 500, "only {} events", ev.len());
    ev.truncate(500);
    let full = crash_regression(&ev, Spec::MarketPlusAgent, EventVar::Crash, Estimator::Ols, SeMode::HcRobust)
        .map_err(|e| e.to_string())?;
    let market = crash_regression(&ev, Spec::MarketOnly, EventVar::Crash, Estimator::Ols, SeMode::HcRobust)
        .map_err(|e| e.to_string())?;
    let planted = [
        ("volatility", 1.0),
        ("acceleration", 1.0),
        ("turnover", -1.0),
        ("sophisticated", -1.0),
        ("unique_owners", -1.0),
        ("wash_trading", 1.0),
    ];
    let mut parts = Vec::new();
    for (name, sign) in planted {
        let (_, t) = full.coef(name).ok_or(format!("no coefficient {name}"))?;
        ensure!(t * sign > 2.0, "{name}: t = {t:.2}, planted sign {sign}");
        parts.push(format!("{name} {t:+.2}"));
    }
    ensure!(full.r2 > market.r2, "R² {} does not exceed market-only {}", full.r2, market.r2);
    Ok(format!(
        "n = 500; t: {}; R² {:.3} -> {:.3}",
        parts.join(", "),
        market.r2,
        full.r2
    ))
}

fn backtest_wedge(run: &Run) -> Outcome {
    let text = fs::read_to_string(run.dir.path().join("backtest_summary.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let wedge = |m: &str| {
        v["models"]
            .as_array()
            .and_then(|a| a.iter().find(|x| x["model"] == m))
            .and_then(|x| x["wedge"].as_f64())
            .ok_or(format!("no wedge for {m}"))
    };
    let (mo, ma) = (wedge("market_only")?, wedge("market_plus_agent")?);
    ensure!(mo > 0.0 && ma > 0.0, "wedges {mo} and {ma} must be positive");
    ensure!(ma > mo, "agent wedge {ma} not larger than market wedge {mo}");
    ensure!(run.secs < 60.0, "pipeline took {:.1}s", run.secs);
    Ok(format!(
        "wedge market_only {mo:.2}, market_plus_agent {ma:.2}; pipeline {:.1}s",
        run.secs
    ))
}

/// Every artifact byte for byte, plus the manifest without stage timings.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let mut bytes = fs::read(&p).map_err(|e| e.to_string())?;
            if rel == "manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
                for s in v["stages"].as_array_mut().into_iter().flatten() {
                    s["millis"] = serde_json::Value::Null;
                }
                bytes = serde_json::to_vec(&v).map_err(|e| e.to_string())?;
            }
            out.insert(rel, bytes);
        }
    }
    Ok(out)
}

fn determinism(runs: &[&Run]) -> Outcome {
    let snaps: Vec<BTreeMap<String, Vec<u8>>> = runs.iter().map(|r| snapshot(r.dir.path())).collect::<Result<_, _>>()?;
    for s in &snaps[1..] {
        ensure!(s.keys().eq(snaps[0].keys()), "artifact sets differ");
        for (k, v) in s {
            ensure!(*v == snaps[0][k], "artifact {k} differs");
        }
    }
    Ok(format!("{} artifacts identical across {} runs (threads 8, 8, 1)", snaps[0].len(), runs.len()))
}

// ---------------------------------------------------------------- harness

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut check = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match &r {
            Ok(msg) => println!("PASS  {name}: {msg}"),
            Err(msg) => println!("FAIL  {name}: {msg}"),
        }
        results.push((name, r));
    };

    check("detector oracle", &mut detector_oracle);
    check("timing-score table", &mut timing_table);
    check("wash-filter truth table", &mut wash_truth_table);
    check("benford", &mut benford);
    check("ols correctness", &mut ols_oracle);

    let runs = [run_standard(8), run_standard(8), run_standard(1)];
    let first = runs[0].as_ref().map_err(|e| e.clone());
    let events = first.as_ref().map_err(|e| e.clone()).and_then(|r| full_events(r.dir.path()));
    check("crash-label sweep", &mut || crash_sweep_nesting(events.as_ref().map_err(|e| e.clone())?));
    check("sign recovery", &mut || sign_recovery(events.as_ref().map_err(|e| e.clone())?));
    check("backtest wedge", &mut || backtest_wedge(first.as_ref().map_err(|e| e.clone())?));
    check("determinism", &mut || {
        let ok: Vec<&Run> = runs.iter().map(|r| r.as_ref().map_err(|e| e.clone())).collect::<Result<_, _>>()?;
        determinism(&ok)
    });

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
