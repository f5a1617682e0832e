//! Out-of-sample crash-prediction strategy: fit on events up to a split
//! time, then buy test events predicted below the training median.

use std::collections::HashMap;
use std::io::Write;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::econometrics::{event_design, EventVar, OlsFit, RegressionResult, SeMode, Spec};
use crate::error::{Diagnostic, Error, Result};
use crate::events::RunUpEvent;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    MarketOnly,
    MarketPlusAgent,
}

impl Model {
    pub const ALL: [Model; 2] = [Model::MarketOnly, Model::MarketPlusAgent];

    pub fn spec(self) -> Spec {
        match self {
            Model::MarketOnly => Spec::MarketOnly,
            Model::MarketPlusAgent => Spec::MarketPlusAgent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Model::MarketOnly => "market_only",
            Model::MarketPlusAgent => "market_plus_agent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Portfolio {
    PredictedCrash,
    PredictedNoncrash,
}

impl Portfolio {
    pub fn as_str(self) -> &'static str {
        match self {
            Portfolio::PredictedCrash => "predicted_crash",
            Portfolio::PredictedNoncrash => "predicted_noncrash",
        }
    }

    /// Below the median buys; ties count as predicted crashes.
    pub fn assign(fitted: f64, median: f64) -> Self {
        if fitted < median {
            Portfolio::PredictedNoncrash
        } else {
            Portfolio::PredictedCrash
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub event: String,
    pub model: Model,
    pub fitted: f64,
    pub portfolio: Portfolio,
}

#[derive(Debug, Clone)]
pub struct SplitFit {
    pub split_hour: i64,
    pub fits: Vec<(Model, RegressionResult, f64)>,
    pub predictions: Vec<Prediction>,
    pub diagnostics: Vec<Diagnostic>,
}

impl SplitFit {
    pub fn median(&self, model: Model) -> Option<f64> {
        self.fits.iter().find(|f| f.0 == model).map(|f| f.2)
    }
}

/// Parses `YYYY-MM-DDTHH`, `YYYY-MM-DDTHH:MM:SS`, RFC 3339, or a bare date
/// (midnight) into an absolute UTC hour index.
pub fn parse_split(s: &str) -> Result<i64> {
    let ts = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.with_timezone(&Utc).timestamp()
    } else if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        dt.and_utc().timestamp()
    } else if let Ok(dt) = NaiveDateTime::parse_from_str(&format!("{s}:00"), "%Y-%m-%dT%H:%M") {
        dt.and_utc().timestamp()
    } else if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp()
    } else {
        return Err(Error::Config(format!("cannot parse split time `{s}`")));
    };
    Ok(ts.div_euclid(3600))
}

/// Fits the crash linear-probability model for both specifications on events
/// with `t0 <= split_hour` and scores the later events.
pub fn split_fit_predict(events: &[RunUpEvent], split_hour: i64) -> Result<SplitFit> {
    let (train, test): (Vec<RunUpEvent>, Vec<RunUpEvent>) = events.iter().cloned().partition(|e| e.t0 <= split_hour);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid(format!(
            "split leaves {} training and {} test events",
            train.len(),
            test.len()
        )));
    }
    let mut fits = Vec::new();
    let mut predictions = Vec::new();
    let mut diagnostics = Vec::new();
    for model in Model::ALL {
        let vars = model.spec().vars();
        let d = event_design(&train, EventVar::Crash, &vars);
        let fit = OlsFit::new(&d.x, &d.names, &d.y)?;
        let mut res = fit.result(EventVar::Crash.name(), SeMode::Plain, None)?;
        res.label = model.as_str().to_string();
        let beta = DVector::from_column_slice(&res.beta);
        let train_fitted: Vec<f64> = (&d.x * &beta).iter().copied().collect();
        let median = stats::median(&train_fitted).ok_or(Error::Empty("training predictions"))?;
        for e in &test {
            let xs: Option<Vec<f64>> = vars.iter().map(|v| v.get(e)).collect();
            let Some(xs) = xs.filter(|v| v.iter().all(|x| x.is_finite())) else {
                diagnostics.push(Diagnostic::new(
                    "backtest.predict",
                    None,
                    format!("event {} lacks predictors for {}", e.id, model.as_str()),
                ));
                continue;
            };
            let fitted = res.beta[0] + xs.iter().zip(&res.beta[1..]).map(|(x, b)| x * b).sum::<f64>();
            predictions.push(Prediction {
                event: e.id.clone(),
                model,
                fitted,
                portfolio: Portfolio::assign(fitted, median),
            });
        }
        fits.push((model, res, median));
    }
    Ok(SplitFit {
        split_hour,
        fits,
        predictions,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyTrade {
    pub model: Model,
    pub portfolio: Portfolio,
    pub event: String,
    pub t0: i64,
    pub entry_price: f64,
    pub exit_price: f64,
    pub pnl_eth: f64,
    pub cum_pnl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub model: Model,
    pub portfolio: Portfolio,
    pub trades: Vec<StrategyTrade>,
}

impl StrategyRun {
    pub fn total(&self) -> f64 {
        self.trades.last().map_or(0.0, |t| t.cum_pnl)
    }
}

/// One ETH per event, bought at t = 1 and sold at t = 24, accumulated in
/// calendar order of t0. Returns the four model × portfolio runs.
pub fn run_strategy(fit: &SplitFit, events: &[RunUpEvent]) -> (Vec<StrategyRun>, Vec<Diagnostic>) {
    let by_id: HashMap<&str, &RunUpEvent> = events.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut diags = Vec::new();
    let mut runs = Vec::new();
    for model in Model::ALL {
        for portfolio in [Portfolio::PredictedCrash, Portfolio::PredictedNoncrash] {
            let mut picked: Vec<&RunUpEvent> = fit
                .predictions
                .iter()
                .filter(|p| p.model == model && p.portfolio == portfolio)
                .filter_map(|p| by_id.get(p.event.as_str()).copied())
                .collect();
            picked.sort_by(|a, b| (a.t0, &a.id).cmp(&(b.t0, &b.id)));
            let mut cum = 0.0;
            let mut trades = Vec::new();
            for e in picked {
                if !(e.entry_price > 0.0 && e.exit_price.is_finite()) {
                    diags.push(Diagnostic::new(
                        "backtest.strategy",
                        None,
                        format!("event {} has no carried price at t=1", e.id),
                    ));
                    continue;
                }
                let pnl = e.exit_price / e.entry_price - 1.0;
                cum += pnl;
                trades.push(StrategyTrade {
                    model,
                    portfolio,
                    event: e.id.clone(),
                    t0: e.t0,
                    entry_price: e.entry_price,
                    exit_price: e.exit_price,
                    pnl_eth: pnl,
                    cum_pnl: cum,
                });
            }
            runs.push(StrategyRun {
                model,
                portfolio,
                trades,
            });
        }
    }
    (runs, diags)
}

/// Noncrash minus crash portfolio PnL for a model.
pub fn wedge(runs: &[StrategyRun], model: Model) -> f64 {
    let total = |p| runs.iter().find(|r| r.model == model && r.portfolio == p).map_or(0.0, |r| r.total());
    total(Portfolio::PredictedNoncrash) - total(Portfolio::PredictedCrash)
}

pub fn write_pnl_csv<W: Write>(runs: &[StrategyRun], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in runs {
        for t in &r.trades {
            wtr.serialize(t)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(id: &str, t0: i64, entry: f64, exit: f64) -> RunUpEvent {
        RunUpEvent {
            id: id.into(),
            collection: "c".into(),
            t0,
            volume_eth: 0.0,
            active_wallets: None,
            runup_ret: 1.0,
            ex_post_ret: 0.0,
            crash: false,
            price_t0: 1.0,
            entry_price: entry,
            exit_price: exit,
            predictors: Default::default(),
            liquidity: Default::default(),
            window: Vec::new(),
        }
    }

    fn fit_with(preds: Vec<(&str, f64)>) -> SplitFit {
        SplitFit {
            split_hour: 0,
            fits: Vec::new(),
            predictions: preds
                .into_iter()
                .map(|(e, f)| Prediction {
                    event: e.into(),
                    model: Model::MarketOnly,
                    fitted: f,
                    portfolio: Portfolio::assign(f, 0.5),
                })
                .collect(),
            diagnostics: Vec::new(),
        }
    }

    #[test]
    fn ties_go_to_predicted_crash() {
        assert_eq!(Portfolio::assign(0.5, 0.5), Portfolio::PredictedCrash);
        assert_eq!(Portfolio::assign(0.49, 0.5), Portfolio::PredictedNoncrash);
    }

    #[test]
    fn offsetting_trades_net_to_zero() {
        let events = vec![event("a", 1, 1.0, 1.5), event("b", 2, 2.0, 1.0)];
        let (runs, diags) = run_strategy(&fit_with(vec![("a", 0.1), ("b", 0.2)]), &events);
        assert!(diags.is_empty());
        let r = runs
            .iter()
            .find(|r| r.model == Model::MarketOnly && r.portfolio == Portfolio::PredictedNoncrash)
            .unwrap();
        assert_eq!(r.trades.len(), 2);
        assert!(r.total().abs() < 1e-12);
    }

    #[test]
    fn flat_returns_give_flat_pnl() {
        let events = vec![event("a", 1, 1.0, 1.0), event("b", 2, 3.0, 3.0)];
        let (runs, _) = run_strategy(&fit_with(vec![("a", 0.9), ("b", 0.1)]), &events);
        assert!(runs.iter().flat_map(|r| &r.trades).all(|t| t.cum_pnl == 0.0));
    }

    #[test]
    fn cumulative_pnl_follows_calendar_order() {
        let events = vec![event("late", 9, 1.0, 2.0), event("early", 3, 1.0, 0.5)];
        let (runs, _) = run_strategy(&fit_with(vec![("late", 0.1), ("early", 0.1)]), &events);
        let r = &runs[1];
        assert_eq!(r.trades[0].event, "early");
        assert_eq!(r.trades[0].cum_pnl, -0.5);
        assert_eq!(r.trades[1].cum_pnl, 0.5);
    }

    #[test]
    fn split_formats() {
        let h = parse_split("2021-12-31T23").unwrap();
        assert_eq!(h * 3600, 1_640_991_600);
        assert_eq!(parse_split("2021-12-31T23:00:00Z").unwrap(), h);
        assert_eq!(parse_split("2021-12-31T23:00:00").unwrap(), h);
        assert_eq!(parse_split("2022-01-01").unwrap(), h + 1);
        assert!(parse_split("soon").is_err());
    }
}
