use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use proptest::prelude::*;

use bubblescope::agents::{timing_score, ts_buy, ts_sell};
use bubblescope::backtest::{split_fit_predict, Model, Portfolio};
use bubblescope::econometrics::{OlsFit, SeMode};
use bubblescope::events::{detect_in_rows, DetectParams, RunUpEvent};
use bubblescope::ingest::{parse_transfers, write_transfers, FundingEdge, FundingIndex, Transfer, TransferLog, ZERO_ADDRESS};
use bubblescope::panel::{build_panel, winsorize, PanelRow};
use bubblescope::stats;
use bubblescope::washtrade::{flag_wash_trades, WashFilter};

fn wallet(i: u8) -> String {
    if i == 0 {
        ZERO_ADDRESS.to_string()
    } else {
        format!("0x{i:040x}")
    }
}

prop_compose! {
    fn transfer()(c in 0u8..3, tok in 0u8..6, from in 0u8..8, to in 1u8..8, hour in 0i64..200,
                   sec in 0i64..3600, priced in any::<bool>(), price in 0.01f64..10.0) -> Transfer {
        Transfer {
            tx_id: String::new(),
            timestamp: 1_640_000_000 + hour * 3600 + sec,
            collection: format!("0xc{c}"),
            token: tok.to_string(),
            from_wallet: wallet(from),
            to_wallet: wallet(to),
            price_eth: if priced || from != 0 { (price * 1e4).round() / 1e4 } else { 0.0 },
            price_usd: 0.0,
            marketplace: "opensea".into(),
        }
    }
}

fn transfers(max: usize) -> impl Strategy<Value = Vec<Transfer>> {
    prop::collection::vec(transfer(), 1..max).prop_map(|mut v| {
        for (i, t) in v.iter_mut().enumerate() {
            t.tx_id = format!("0x{i:08x}");
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ingest_ignores_input_order(v in transfers(60), seed in any::<u64>()) {
        let mut shuffled = v.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(TransferLog::from_records(v).0, TransferLog::from_records(shuffled).0);
    }

    #[test]
    fn ingest_round_trips(v in transfers(60)) {
        let log = TransferLog::from_records(v).0;
        let mut buf = Vec::new();
        write_transfers(&log, &mut buf).unwrap();
        let (back, report) = parse_transfers(buf.as_slice()).unwrap();
        prop_assert_eq!(report.rejected, 0);
        prop_assert_eq!(back, log);
    }

    #[test]
    fn duplicates_collapse(v in transfers(40)) {
        let mut doubled = v.clone();
        doubled.extend(v.iter().cloned());
        let (log, dups) = TransferLog::from_records(doubled);
        prop_assert_eq!(dups, v.len());
        prop_assert_eq!(log.len(), v.len());
    }

    #[test]
    fn panel_identities(v in transfers(80)) {
        let log = TransferLog::from_records(v).0;
        let (panel, _) = build_panel(&log);
        for c in panel.collections() {
            let rows = panel.collection(c);
            let trades: Vec<&Transfer> = log.trades().filter(|t| t.collection == c).collect();
            let vol: f64 = rows.iter().map(|r| r.volume).sum();
            let want: f64 = trades.iter().map(|t| t.price_eth).sum();
            prop_assert!((vol - want).abs() <= 1e-9 * want.max(1.0));
            prop_assert_eq!(rows.iter().map(|r| r.sales).sum::<u64>(), trades.len() as u64);
            let mints = log.records().iter().filter(|t| t.collection == c && t.is_mint()).count() as u64;
            prop_assert_eq!(rows.last().unwrap().supply, mints);
            for w in rows.windows(2) {
                prop_assert_eq!(w[1].hour, w[0].hour + 1);
                prop_assert!(w[1].supply >= w[0].supply);
                if let (Some(p0), Some(p1), Some(r)) = (w[0].price, w[1].price, w[1].ret) {
                    prop_assert!((p0 * (1.0 + r) - p1).abs() <= 1e-9 * p1);
                    if w[1].sales == 0 {
                        prop_assert_eq!(r, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn winsorize_is_idempotent(v in transfers(120), level in 0.0f64..0.2) {
        let (panel, _) = build_panel(&TransferLog::from_records(v).0);
        let (once, _) = winsorize(&panel, level).unwrap();
        let (twice, _) = winsorize(&once, level).unwrap();
        prop_assert_eq!(once.rows(), twice.rows());
    }

    #[test]
    fn detected_events_qualify_and_do_not_overlap(
        steps in prop::collection::vec(-0.3f64..0.6, 60..400),
        vols in prop::collection::vec(0.0f64..2.0, 400),
    ) {
        let mut p = 1.0;
        let rows: Vec<PanelRow> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let prev = p;
                p *= 1.0 + s;
                PanelRow {
                    collection: "c".into(),
                    hour: i as i64,
                    price: Some(p),
                    floor: None,
                    ret: (i > 0).then(|| p / prev - 1.0),
                    volume: vols[i],
                    sales: 1,
                    minted: 0,
                    supply: 100,
                    turnover: Some(1.0),
                    mcap: None,
                    age_hours: i as i64,
                }
            })
            .collect();
        let params = DetectParams::default();
        let events = detect_in_rows(&rows, &params);
        for e in &events {
            prop_assert!(e.runup_ret >= params.runup_threshold);
            prop_assert!(e.volume_eth >= params.min_volume_eth);
            prop_assert_eq!(e.crash, e.ex_post_ret < params.crash_threshold);
        }
        for w in events.windows(2) {
            prop_assert!(w[1].t0 - w[0].t0 > 2 * params.window);
        }
    }

    #[test]
    fn timing_score_is_sum_of_legs(buys in prop::collection::vec(-24i64..=24, 0..20),
                                   sells in prop::collection::vec(-24i64..=24, 0..20)) {
        let (ts, b, s) = timing_score(&buys, &sells);
        prop_assert_eq!(ts, b + s);
        // a round trip inside the same hour never scores positive
        let both: Vec<i64> = buys.clone();
        prop_assert_eq!(timing_score(&both, &both).0, 0);
    }

    #[test]
    fn ts_legs_are_antisymmetric(d in -24i64..=24) {
        prop_assert_eq!(ts_sell(d), -ts_buy(d));
        prop_assert!(ts_buy(d) >= ts_buy(0));
    }

    #[test]
    fn exclusions_only_shrink_common_funder(v in transfers(60), shared in prop::collection::vec(0u8..3, 8),
                                            excl in prop::collection::hash_set(0u8..3, 0..3)) {
        let log = TransferLog::from_records(v).0;
        let funder = |i: u8| format!("0x{:02x}{:038x}", 0x0b, i);
        let (idx, _) = FundingIndex::from_edges((1u8..8).map(|w| FundingEdge {
            wallet: wallet(w),
            first_funder: funder(shared[w as usize]),
            funded_at: 0,
        }));
        let none = flag_wash_trades(&log, &idx, &HashSet::new());
        let set: HashSet<String> = excl.iter().map(|&i| funder(i)).collect();
        let some = flag_wash_trades(&log, &idx, &set);
        let cf = |r: &bubblescope::washtrade::WashReport| -> HashSet<(String, String)> {
            r.flags.iter().filter(|f| f.filters.contains(&WashFilter::CommonFunder)).map(|f| f.key()).collect()
        };
        prop_assert!(cf(&some).is_subset(&cf(&none)));
        let other = |r: &bubblescope::washtrade::WashReport| -> BTreeMap<(String, String), Vec<WashFilter>> {
            r.flags.iter().map(|f| (f.key(), f.filters.iter().copied().filter(|x| *x != WashFilter::CommonFunder).collect::<Vec<_>>()))
                .filter(|(_, v)| !v.is_empty()).collect()
        };
        prop_assert_eq!(other(&some), other(&none));
    }

    #[test]
    fn inverted_pair_ignores_trade_order(v in transfers(60)) {
        let log = TransferLog::from_records(v.clone()).0;
        // reverse the time order while keeping ids
        let max = v.iter().map(|t| t.timestamp).max().unwrap();
        let min = v.iter().map(|t| t.timestamp).min().unwrap();
        let flipped: Vec<Transfer> = v.into_iter().map(|mut t| { t.timestamp = max + min - t.timestamp; t }).collect();
        let log2 = TransferLog::from_records(flipped).0;
        let idx = FundingIndex::default();
        let a = flag_wash_trades(&log, &idx, &HashSet::new());
        let b = flag_wash_trades(&log2, &idx, &HashSet::new());
        let keys = |r: &bubblescope::washtrade::WashReport| -> BTreeMap<(String, String), Vec<WashFilter>> {
            r.flags.iter().map(|f| (f.key(), f.filters.clone())).collect()
        };
        prop_assert_eq!(keys(&a), keys(&b));
    }

    #[test]
    fn ols_residuals_are_orthogonal_and_fit_is_affine(
        data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 12..80),
        scale in 0.5f64..4.0, shift in -3.0f64..3.0,
    ) {
        let n = data.len();
        let x = DMatrix::from_fn(n, 3, |i, j| match j { 0 => 1.0, 1 => data[i].0, _ => data[i].1 });
        let y: Vec<f64> = data.iter().map(|d| d.2 + 0.3 * d.0).collect();
        let names: Vec<String> = ["const", "a", "b"].iter().map(|s| s.to_string()).collect();
        let Ok(fit) = OlsFit::new(&x, &names, &y) else { return Ok(()); };
        let xte = x.transpose() * &fit.residuals;
        let scale_ref = x.norm() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(xte.amax() <= 1e-10 * scale_ref.max(1.0));

        let y2: Vec<f64> = y.iter().map(|v| scale * v + shift).collect();
        let fit2 = OlsFit::new(&x, &names, &y2).unwrap();
        prop_assert!((fit2.beta[0] - (scale * fit.beta[0] + shift)).abs() <= 1e-8);
        for j in 1..3 {
            prop_assert!((fit2.beta[j] - scale * fit.beta[j]).abs() <= 1e-8 * (1.0 + fit.beta[j].abs()));
        }
        prop_assert!((fit2.r2 - fit.r2).abs() <= 1e-9);
        let t1 = fit.result("y", SeMode::HcRobust, None).unwrap().t;
        let t2 = fit2.result("y", SeMode::HcRobust, None).unwrap().t;
        for j in 1..3 {
            prop_assert!((t1[j] - t2[j]).abs() <= 1e-6 * (1.0 + t1[j].abs()));
        }
    }

    #[test]
    fn average_ranks_sum_to_triangle(xs in prop::collection::vec(0i32..10, 1..50)) {
        let v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        prop_assert!((stats::average_ranks(&v).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn backtest_partitions_test_events_and_never_looks_ahead(
        feats in prop::collection::vec((0.0f64..1.0, 0.0f64..5.0, 0.0f64..2.0, 0.0f64..1.0, -0.5f64..0.5, 0.0f64..3.0, any::<bool>()), 40..90),
        split_at in 15usize..30,
        flips in prop::collection::vec(any::<bool>(), 90),
    ) {
        let events: Vec<RunUpEvent> = feats.iter().enumerate().map(|(i, f)| synthetic_event(i, f)).collect();
        let split = events[split_at].t0;
        let Ok(fit) = split_fit_predict(&events, split) else { return Ok(()); };
        let test: Vec<&RunUpEvent> = events.iter().filter(|e| e.t0 > split).collect();
        for model in Model::ALL {
            let preds: Vec<_> = fit.predictions.iter().filter(|p| p.model == model).collect();
            prop_assert_eq!(preds.len(), test.len());
            let ids: HashSet<&str> = preds.iter().map(|p| p.event.as_str()).collect();
            prop_assert_eq!(ids.len(), test.len());
            let m = fit.median(model).unwrap();
            for p in preds {
                prop_assert_eq!(p.portfolio == Portfolio::PredictedNoncrash, p.fitted < m);
            }
        }
        // relabel and reprice every test event: training results must not move
        let mut altered = events.clone();
        for (e, &f) in altered.iter_mut().zip(&flips) {
            if e.t0 > split {
                e.crash = f;
                e.ex_post_ret = if f { -0.9 } else { 0.9 };
                e.exit_price *= 3.0;
            }
        }
        let fit2 = split_fit_predict(&altered, split).unwrap();
        for model in Model::ALL {
            prop_assert_eq!(fit.median(model), fit2.median(model));
        }
        prop_assert_eq!(&fit.predictions, &fit2.predictions);
    }
}

fn synthetic_event(i: usize, f: &(f64, f64, f64, f64, f64, f64, bool)) -> RunUpEvent {
    let mut e = RunUpEvent {
        id: format!("c@{i}"),
        collection: "c".into(),
        t0: 1000 + 50 * i as i64,
        volume_eth: 20.0,
        active_wallets: None,
        runup_ret: 1.2,
        ex_post_ret: if f.6 { -0.6 } else { 0.1 },
        crash: f.6,
        price_t0: 2.0,
        entry_price: 2.0,
        exit_price: if f.6 { 0.8 } else { 2.2 },
        predictors: Default::default(),
        liquidity: Default::default(),
        window: Vec::new(),
    };
    e.predictors.volatility = f.0;
    e.predictors.turnover = Some(f.1);
    e.predictors.age_hours = 100 + 7 * i as i64;
    e.predictors.acceleration = f.2;
    e.predictors.sophisticated_frac = Some(f.3);
    e.predictors.unique_owner_change = Some(f.4);
    e.predictors.wash_log_volume = Some(f.5);
    e
}
