//! Least squares and logit estimation with plain, HC1 and one-way clustered
//! covariance, plus the event-level regression tables and market-factor
//! diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::agents::AgentEventRecord;
use crate::error::{Error, Result};
use crate::events::RunUpEvent;
use crate::panel::Panel;
use crate::stats;

/// Samples smaller than this are flagged as low-power.
pub const LOW_POWER_N: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    Plain,
    HcRobust,
    Cluster,
}

impl SeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SeMode::Plain => "plain",
            SeMode::HcRobust => "hc_robust",
            SeMode::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ols,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionResult {
    pub label: String,
    pub estimator: Estimator,
    pub dependent: String,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    /// R² for OLS, McFadden pseudo-R² for logit.
    pub r2: f64,
    pub n: usize,
    pub se_mode: SeMode,
    pub low_power: bool,
}

impl RegressionResult {
    pub fn coef(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.beta[i], self.t[i]))
    }
}

fn t_stats(beta: &[f64], se: &[f64]) -> Vec<f64> {
    beta.iter()
        .zip(se)
        .map(|(b, s)| if *s > 0.0 { b / s } else { f64::NAN })
        .collect()
}

/// Returns the columns that are (numerically) linear combinations of the
/// columns before them.
pub fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let p = q.dot(&v);
                v -= q * p;
            }
        }
        let nv = v.norm();
        if norm0 == 0.0 || nv <= 1e-10 * norm0 {
            bad.push(names.get(j).cloned().unwrap_or_else(|| format!("x{j}")));
        } else {
            basis.push(v / nv);
        }
    }
    bad
}

fn check_design(x: &DMatrix<f64>, names: &[String], y_len: usize) -> Result<()> {
    if x.nrows() != y_len {
        return Err(Error::Invalid(format!("design has {} rows but y has {}", x.nrows(), y_len)));
    }
    if names.len() != x.ncols() {
        return Err(Error::Invalid("regressor names do not match design columns".into()));
    }
    if x.nrows() <= x.ncols() {
        return Err(Error::Invalid(format!(
            "need more observations ({}) than regressors ({})",
            x.nrows(),
            x.ncols()
        )));
    }
    let bad = collinear_columns(x, names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    Ok(())
}

fn check_clusters(mode: SeMode, clusters: Option<&[usize]>, n: usize) -> Result<()> {
    match (mode, clusters) {
        (SeMode::Cluster, None) => Err(Error::Invalid("cluster standard errors need cluster ids".into())),
        (SeMode::Cluster, Some(c)) if c.len() != n => Err(Error::Invalid("cluster ids do not match rows".into())),
        _ => Ok(()),
    }
}

/// Sandwich covariance `bread · meat · bread` where meat sums outer products
/// of per-row (or per-cluster) scores `x_i · u_i`.
fn sandwich(x: &DMatrix<f64>, u: &[f64], bread: &DMatrix<f64>, mode: SeMode, clusters: Option<&[usize]>) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    let factor = match mode {
        SeMode::Cluster => {
            let ids = clusters.expect("checked");
            let mut sums: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
            for i in 0..n {
                let s = sums.entry(ids[i]).or_insert_with(|| DVector::zeros(k));
                *s += x.row(i).transpose() * u[i];
            }
            for s in sums.values() {
                meat += s * s.transpose();
            }
            let g = sums.len() as f64;
            if g > 1.0 {
                g / (g - 1.0) * (n as f64 - 1.0) / (n - k) as f64
            } else {
                1.0
            }
        }
        _ => {
            for i in 0..n {
                let s = x.row(i).transpose() * u[i];
                meat += &s * s.transpose();
            }
            n as f64 / (n - k) as f64
        }
    };
    bread * meat * bread * factor
}

/// A fitted least-squares model from which any covariance can be derived.
#[derive(Debug, Clone)]
pub struct OlsFit {
    x: DMatrix<f64>,
    names: Vec<String>,
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    xtx_inv: DMatrix<f64>,
    pub r2: f64,
}

impl OlsFit {
    pub fn new(x: &DMatrix<f64>, names: &[String], y: &[f64]) -> Result<Self> {
        check_design(x, names, y.len())?;
        let yv = DVector::from_column_slice(y);
        let qr = x.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let qty = q.transpose() * &yv;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
        let rinv = r
            .solve_upper_triangular(&DMatrix::identity(x.ncols(), x.ncols()))
            .ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
        let xtx_inv = &rinv * rinv.transpose();
        let residuals = &yv - x * &beta;
        let ybar = yv.mean();
        let sst: f64 = yv.iter().map(|v| (v - ybar) * (v - ybar)).sum();
        let ssr = residuals.norm_squared();
        let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
        Ok(OlsFit {
            x: x.clone(),
            names: names.to_vec(),
            beta,
            residuals,
            xtx_inv,
            r2,
        })
    }

    pub fn covariance(&self, mode: SeMode, clusters: Option<&[usize]>) -> Result<DMatrix<f64>> {
        let (n, k) = self.x.shape();
        check_clusters(mode, clusters, n)?;
        Ok(match mode {
            SeMode::Plain => &self.xtx_inv * (self.residuals.norm_squared() / (n - k) as f64),
            _ => sandwich(&self.x, self.residuals.as_slice(), &self.xtx_inv, mode, clusters),
        })
    }

    pub fn result(&self, dependent: &str, mode: SeMode, clusters: Option<&[usize]>) -> Result<RegressionResult> {
        let cov = self.covariance(mode, clusters)?;
        let beta: Vec<f64> = self.beta.iter().copied().collect();
        let se: Vec<f64> = (0..beta.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        Ok(RegressionResult {
            label: String::new(),
            estimator: Estimator::Ols,
            dependent: dependent.to_string(),
            names: self.names.clone(),
            t: t_stats(&beta, &se),
            beta,
            se,
            r2: self.r2,
            n: self.x.nrows(),
            se_mode: mode,
            low_power: self.x.nrows() < LOW_POWER_N,
        })
    }
}

/// Ordinary least squares. `x` should carry its own intercept column.
pub fn ols(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    se_mode: SeMode,
    clusters: Option<&[usize]>,
) -> Result<RegressionResult> {
    OlsFit::new(x, names, y)?.result("y", se_mode, clusters)
}

#[derive(Debug, Clone, Copy)]
pub struct LogitOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions { max_iter: 100, tol: 1e-9 }
    }
}

fn log_likelihood(y: &[f64], p: &[f64]) -> f64 {
    y.iter()
        .zip(p)
        .map(|(y, p)| if *y > 0.5 { p.ln() } else { (1.0 - p).ln() })
        .sum()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by Newton-Raphson (IRLS) with step halving.
pub fn logit(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    opts: LogitOptions,
    se_mode: SeMode,
    clusters: Option<&[usize]>,
) -> Result<RegressionResult> {
    check_design(x, names, y.len())?;
    check_clusters(se_mode, clusters, y.len())?;
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Invalid("logit response must be 0/1".into()));
    }
    let (n, k) = x.shape();
    let ybar = y.iter().sum::<f64>() / n as f64;
    if ybar == 0.0 || ybar == 1.0 {
        return Err(Error::Separation("response has a single class".into()));
    }
    let yv = DVector::from_column_slice(y);
    let probs = |b: &DVector<f64>| -> Vec<f64> { (x * b).iter().map(|z| logistic(*z)).collect() };
    let mut beta = DVector::<f64>::zeros(k);
    let mut p = probs(&beta);
    let mut ll = log_likelihood(y, &p);
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let resid = &yv - DVector::from_column_slice(&p);
        let grad = x.transpose() * &resid;
        if grad.amax() < opts.tol {
            converged = true;
            break;
        }
        let mut h = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let xi = x.row(i).transpose();
            h += &xi * xi.transpose() * (p[i] * (1.0 - p[i]));
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&grad)) else {
            return Err(Error::Separation("information matrix became singular".into()));
        };
        let mut scale = 1.0;
        loop {
            let cand = &beta + &step * scale;
            let pc = probs(&cand);
            let llc = log_likelihood(y, &pc);
            if llc.is_finite() && llc >= ll - 1e-12 {
                beta = cand;
                p = pc;
                ll = llc;
                break;
            }
            scale *= 0.5;
            if scale < 1e-8 {
                break;
            }
        }
        if beta.amax() > 50.0 {
            return Err(Error::Separation(format!(
                "coefficients diverge (max |beta| = {:.1}); the classes are (quasi-)separated",
                beta.amax()
            )));
        }
    }
    if !converged {
        let resid = &yv - DVector::from_column_slice(&p);
        if (x.transpose() * resid).amax() >= opts.tol.max(1e-6) {
            return Err(Error::Separation("IRLS did not reach the gradient tolerance".into()));
        }
    }
    if y.iter().zip(&p).all(|(y, p)| (y - p).abs() < 1e-6) {
        return Err(Error::Separation("fitted probabilities reproduce the response exactly".into()));
    }
    let mut info = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        info += &xi * xi.transpose() * (p[i] * (1.0 - p[i]));
    }
    let bread = info
        .try_inverse()
        .ok_or_else(|| Error::Separation("information matrix is singular".into()))?;
    let cov = match se_mode {
        SeMode::Plain => bread,
        _ => {
            let u: Vec<f64> = y.iter().zip(&p).map(|(y, p)| y - p).collect();
            sandwich(x, &u, &bread, se_mode, clusters)
        }
    };
    let ll0 = n as f64 * (ybar * ybar.ln() + (1.0 - ybar) * (1.0 - ybar).ln());
    let beta: Vec<f64> = beta.iter().copied().collect();
    let se: Vec<f64> = (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    Ok(RegressionResult {
        label: String::new(),
        estimator: Estimator::Logit,
        dependent: "y".into(),
        names: names.to_vec(),
        t: t_stats(&beta, &se),
        beta,
        se,
        r2: 1.0 - ll / ll0,
        n,
        se_mode,
        low_power: n < LOW_POWER_N,
    })
}

/// Event-level variables usable as dependent variables or regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventVar {
    Crash,
    /// Ex-post return above +40%, the symmetric counterpart of a crash.
    Boom,
    ExPostRet,
    Volatility,
    Turnover,
    Age,
    Acceleration,
    Sophisticated,
    UniqueOwners,
    WashTrading,
    TurnoverPost,
    Amihud,
    VolatilityPost,
}

pub const MARKET_VARS: [EventVar; 4] = [
    EventVar::Volatility,
    EventVar::Turnover,
    EventVar::Age,
    EventVar::Acceleration,
];

pub const AGENT_VARS: [EventVar; 3] = [EventVar::Sophisticated, EventVar::UniqueOwners, EventVar::WashTrading];

impl EventVar {
    pub fn name(self) -> &'static str {
        match self {
            EventVar::Crash => "crash",
            EventVar::Boom => "boom",
            EventVar::ExPostRet => "ex_post_ret",
            EventVar::Volatility => "volatility",
            EventVar::Turnover => "turnover",
            EventVar::Age => "age",
            EventVar::Acceleration => "acceleration",
            EventVar::Sophisticated => "sophisticated",
            EventVar::UniqueOwners => "unique_owners",
            EventVar::WashTrading => "wash_trading",
            EventVar::TurnoverPost => "turnover_post",
            EventVar::Amihud => "amihud",
            EventVar::VolatilityPost => "volatility_post",
        }
    }

    pub fn get(self, e: &RunUpEvent) -> Option<f64> {
        let p = &e.predictors;
        match self {
            EventVar::Crash => Some(e.crash as u8 as f64),
            EventVar::Boom => Some((e.ex_post_ret > 0.40) as u8 as f64),
            EventVar::ExPostRet => Some(e.ex_post_ret),
            EventVar::Volatility => Some(p.volatility),
            EventVar::Turnover => p.turnover,
            EventVar::Age => Some(p.age_hours as f64),
            EventVar::Acceleration => Some(p.acceleration),
            EventVar::Sophisticated => p.sophisticated_frac,
            EventVar::UniqueOwners => p.unique_owner_change,
            EventVar::WashTrading => p.wash_log_volume,
            EventVar::TurnoverPost => e.liquidity.turnover_post,
            EventVar::Amihud => e.liquidity.amihud,
            EventVar::VolatilityPost => Some(e.liquidity.volatility_post),
        }
    }
}

/// Rows of an event regression after listwise deletion.
pub struct EventDesign {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub y: Vec<f64>,
    /// Indices into the input event slice.
    pub rows: Vec<usize>,
}

pub fn event_design(events: &[RunUpEvent], y: EventVar, xs: &[EventVar]) -> EventDesign {
    let mut rows = Vec::new();
    let mut data = Vec::new();
    let mut yv = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let Some(yi) = y.get(e) else { continue };
        let vals: Option<Vec<f64>> = xs.iter().map(|v| v.get(e)).collect();
        let Some(vals) = vals else { continue };
        if !yi.is_finite() || vals.iter().any(|v| !v.is_finite()) {
            continue;
        }
        rows.push(i);
        yv.push(yi);
        data.push(1.0);
        data.extend(vals);
    }
    let k = xs.len() + 1;
    let x = DMatrix::from_row_slice(rows.len(), k, &data);
    let mut names = vec!["const".to_string()];
    names.extend(xs.iter().map(|v| v.name().to_string()));
    EventDesign { x, names, y: yv, rows }
}

/// Dense cluster ids from arbitrary labels, in order of first appearance.
pub fn cluster_ids<S: AsRef<str>>(labels: &[S]) -> Vec<usize> {
    let mut map: HashMap<&str, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let n = map.len();
            *map.entry(l.as_ref()).or_insert(n)
        })
        .collect()
}

pub fn event_regression(
    events: &[RunUpEvent],
    y: EventVar,
    xs: &[EventVar],
    estimator: Estimator,
    se_mode: SeMode,
    label: &str,
) -> Result<RegressionResult> {
    let d = event_design(events, y, xs);
    let clusters = (se_mode == SeMode::Cluster).then(|| {
        let labels: Vec<&str> = d.rows.iter().map(|&i| events[i].collection.as_str()).collect();
        cluster_ids(&labels)
    });
    let mut r = match estimator {
        Estimator::Ols => OlsFit::new(&d.x, &d.names, &d.y)?.result(y.name(), se_mode, clusters.as_deref())?,
        Estimator::Logit => logit(&d.x, &d.names, &d.y, LogitOptions::default(), se_mode, clusters.as_deref())?,
    };
    r.dependent = y.name().to_string();
    r.label = label.to_string();
    if r.low_power {
        log::warn!("regression {label}: only {} observations", r.n);
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spec {
    AgentOnly,
    MarketOnly,
    MarketPlusAgent,
}

impl Spec {
    pub fn vars(self) -> Vec<EventVar> {
        match self {
            Spec::AgentOnly => AGENT_VARS.to_vec(),
            Spec::MarketOnly => MARKET_VARS.to_vec(),
            Spec::MarketPlusAgent => MARKET_VARS.iter().chain(&AGENT_VARS).copied().collect(),
        }
    }
}

pub fn crash_regression(
    events: &[RunUpEvent],
    spec: Spec,
    target: EventVar,
    estimator: Estimator,
    se_mode: SeMode,
) -> Result<RegressionResult> {
    let label = format!("{spec:?}").to_lowercase();
    event_regression(events, target, &spec.vars(), estimator, se_mode, &label)
}

/// Aggregate-predictor table: each market predictor alone, then jointly.
pub fn table2(events: &[RunUpEvent], target: EventVar, estimator: Estimator, se_mode: SeMode) -> Result<Vec<RegressionResult>> {
    let mut out = Vec::new();
    for (i, v) in MARKET_VARS.iter().enumerate() {
        out.push(event_regression(events, target, &[*v], estimator, se_mode, &format!("({})", i + 1))?);
    }
    out.push(event_regression(events, target, &MARKET_VARS, estimator, se_mode, "(5)")?);
    Ok(out)
}

/// Agent-level table: agent-only, market-only, and combined specifications.
pub fn table6(events: &[RunUpEvent], target: EventVar, se_mode: SeMode) -> Result<Vec<RegressionResult>> {
    [Spec::AgentOnly, Spec::MarketOnly, Spec::MarketPlusAgent]
        .iter()
        .enumerate()
        .map(|(i, s)| event_regression(events, target, &s.vars(), Estimator::Ols, se_mode, &format!("({})", i + 1)))
        .collect()
}

/// Ex-post liquidity on crash, unique-owner and wash regressors, one at a time.
pub fn liquidity_regression(events: &[RunUpEvent], se_mode: SeMode) -> Result<Vec<RegressionResult>> {
    let mut out = Vec::new();
    let mut col = 1;
    for dep in [EventVar::TurnoverPost, EventVar::Amihud, EventVar::VolatilityPost] {
        for reg in [EventVar::Crash, EventVar::UniqueOwners, EventVar::WashTrading] {
            out.push(event_regression(events, dep, &[reg], Estimator::Ols, se_mode, &format!("({col})"))?);
            col += 1;
        }
    }
    Ok(out)
}

/// Timing-rank regressions on sophistication dummies, clustered by event.
pub fn timing_regression(records: &[AgentEventRecord]) -> Result<Vec<RegressionResult>> {
    type Get = fn(&AgentEventRecord) -> Option<f64>;
    let deps: [(&str, Get); 3] = [
        ("ts_rank", |r| r.ts_rank),
        ("ts_buy_rank", |r| r.ts_buy_rank),
        ("ts_sell_rank", |r| r.ts_sell_rank),
    ];
    let dummies: [(&str, fn(&AgentEventRecord) -> bool); 2] = [
        ("sophisticated", |r| r.sophisticated),
        ("sophisticated_ever", |r| r.sophisticated_ever),
    ];
    let mut out = Vec::new();
    let mut col = 1;
    for (dname, dget) in dummies {
        for (yname, yget) in deps {
            let rows: Vec<&AgentEventRecord> = records.iter().filter(|r| yget(r).is_some()).collect();
            let mut data = Vec::with_capacity(rows.len() * 2);
            let y: Vec<f64> = rows.iter().map(|r| yget(r).unwrap()).collect();
            for r in &rows {
                data.push(1.0);
                data.push(dget(r) as u8 as f64);
            }
            let x = DMatrix::from_row_slice(rows.len(), 2, &data);
            let labels: Vec<&str> = rows.iter().map(|r| r.event.as_str()).collect();
            let ids = cluster_ids(&labels);
            let names = vec!["const".to_string(), dname.to_string()];
            let mut r = OlsFit::new(&x, &names, &y)?.result(yname, SeMode::Cluster, Some(&ids))?;
            r.label = format!("({col})");
            col += 1;
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Hourly,
    Daily,
    Weekly,
}

impl Frequency {
    pub fn hours(self) -> i64 {
        match self {
            Frequency::Hourly => 1,
            Frequency::Daily => 24,
            Frequency::Weekly => 168,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectionBeta {
    pub collection: String,
    pub beta: f64,
    pub r2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorAnalysis {
    pub frequency: Frequency,
    pub betas: Vec<CollectionBeta>,
    pub dropped: Vec<String>,
    pub mean_abs_beta: f64,
    pub median_abs_beta: f64,
    pub mean_r2: f64,
    pub median_r2: f64,
    /// Explained-variance shares of the leading (up to five) components.
    pub pca_explained: Vec<f64>,
}

/// Bucketed average-price returns: Σ volume / Σ sales per bucket, carried
/// through empty buckets.
fn bucket_returns(sums: &[(f64, u64)]) -> Vec<Option<f64>> {
    let mut carried: Option<f64> = None;
    sums.iter()
        .map(|&(v, s)| {
            let prev = carried;
            if s > 0 {
                carried = Some(v / s as f64);
            }
            match (prev, carried) {
                (Some(a), Some(b)) => Some(b / a - 1.0),
                _ => None,
            }
        })
        .collect()
}

/// Covariance over rows where both columns are present.
fn pairwise_cov(a: &[Option<f64>], b: &[Option<f64>]) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let m = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / m, my / m);
    pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (m - 1.0)
}

/// Sorted explained-variance shares from a symmetric covariance matrix.
pub fn pca_shares(cov: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let mut lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    lambda.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return vec![0.0; lambda.len()];
    }
    lambda.iter().map(|l| l / total).collect()
}

pub fn market_factor_analysis(panel: &Panel, frequency: Frequency) -> Result<FactorAnalysis> {
    let bucket = frequency.hours();
    let ids: Vec<&str> = panel.collections().collect();
    if ids.len() < 2 {
        return Err(Error::Invalid("market factor analysis needs at least two collections".into()));
    }
    let lo = panel.rows().iter().map(|r| r.hour.div_euclid(bucket)).min().unwrap();
    let hi = panel.rows().iter().map(|r| r.hour.div_euclid(bucket)).max().unwrap();
    let nb = (hi - lo + 1) as usize;
    let mut total = vec![(0.0f64, 0u64); nb];
    let mut series = Vec::new();
    for c in &ids {
        let mut sums = vec![(0.0f64, 0u64); nb];
        for r in panel.collection(c) {
            let b = (r.hour.div_euclid(bucket) - lo) as usize;
            sums[b].0 += r.volume;
            sums[b].1 += r.sales;
            total[b].0 += r.volume;
            total[b].1 += r.sales;
        }
        series.push(bucket_returns(&sums));
    }
    let factor = bucket_returns(&total);

    let mut betas = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for (c, s) in ids.iter().zip(&series) {
        let pairs: Vec<(f64, f64)> = s
            .iter()
            .zip(&factor)
            .filter_map(|(r, f)| Some(((*r)?, (*f)?)))
            .collect();
        if pairs.len() < 10 {
            dropped.push(c.to_string());
            continue;
        }
        let mut data = Vec::with_capacity(pairs.len() * 2);
        for (_, f) in &pairs {
            data.push(1.0);
            data.push(*f);
        }
        let x = DMatrix::from_row_slice(pairs.len(), 2, &data);
        let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        match OlsFit::new(&x, &["const".into(), "factor".into()], &y) {
            Ok(fit) => {
                betas.push(CollectionBeta {
                    collection: c.to_string(),
                    beta: fit.beta[1],
                    r2: fit.r2,
                    n: pairs.len(),
                });
                kept.push(s);
            }
            Err(_) => dropped.push(c.to_string()),
        }
    }
    if betas.is_empty() {
        return Err(Error::Invalid("no collection has 10 overlapping periods with the factor".into()));
    }
    let abs_b: Vec<f64> = betas.iter().map(|b| b.beta.abs()).collect();
    let r2s: Vec<f64> = betas.iter().map(|b| b.r2).collect();
    let m = kept.len();
    let mut cov = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = pairwise_cov(kept[i], kept[j]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let mut shares = pca_shares(&cov);
    shares.truncate(5);
    Ok(FactorAnalysis {
        frequency,
        mean_abs_beta: stats::mean(&abs_b).unwrap(),
        median_abs_beta: stats::median(&abs_b).unwrap(),
        mean_r2: stats::mean(&r2s).unwrap(),
        median_r2: stats::median(&r2s).unwrap(),
        betas,
        dropped,
        pca_explained: shares,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringRegressors {
    pub event: String,
    pub prior_runup_count: usize,
    pub prior_crash_likelihood: Option<f64>,
}

/// For each event, the number of events (any collection) anchored in the
/// preceding `horizon_days` days, and the crash share among them.
pub fn clustering_regressors(events: &[RunUpEvent], horizon_days: u32) -> Result<Vec<ClusteringRegressors>> {
    if !(1..=10).contains(&horizon_days) {
        return Err(Error::Invalid(format!("horizon {horizon_days} days not in 1..=10")));
    }
    let span = 24 * horizon_days as i64;
    let mut order: Vec<(i64, bool)> = events.iter().map(|e| (e.t0, e.crash)).collect();
    order.sort_by_key(|e| e.0);
    let times: Vec<i64> = order.iter().map(|e| e.0).collect();
    let mut crash_cum = vec![0usize; order.len() + 1];
    for (i, e) in order.iter().enumerate() {
        crash_cum[i + 1] = crash_cum[i] + e.1 as usize;
    }
    Ok(events
        .iter()
        .map(|e| {
            let a = times.partition_point(|&t| t < e.t0 - span);
            let b = times.partition_point(|&t| t < e.t0);
            let count = b - a;
            ClusteringRegressors {
                event: e.id.clone(),
                prior_runup_count: count,
                prior_crash_likelihood: (count > 0).then(|| (crash_cum[b] - crash_cum[a]) as f64 / count as f64),
            }
        })
        .collect())
}

#[derive(Serialize)]
struct ResultCsvRow<'a> {
    table: &'a str,
    column: &'a str,
    estimator: Estimator,
    dependent: &'a str,
    regressor: &'a str,
    beta: f64,
    se: f64,
    t: f64,
    r2: f64,
    n: usize,
    se_mode: &'a str,
    low_power: bool,
}

/// Long-format CSV: one row per coefficient.
pub fn write_results_csv<W: Write>(table: &str, results: &[RegressionResult], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in results {
        for i in 0..r.names.len() {
            wtr.serialize(ResultCsvRow {
                table,
                column: &r.label,
                estimator: r.estimator,
                dependent: &r.dependent,
                regressor: &r.names[i],
                beta: r.beta[i],
                se: r.se[i],
                t: r.t[i],
                r2: r.r2,
                n: r.n,
                se_mode: r.se_mode.as_str(),
                low_power: r.low_power,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Aligned text table: coefficients with t-statistics in parentheses below.
pub fn render_table(title: &str, results: &[RegressionResult]) -> String {
    let mut rows: Vec<String> = Vec::new();
    for r in results {
        for n in &r.names {
            if !rows.contains(n) {
                rows.push(n.clone());
            }
        }
    }
    let width = 14;
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = write!(s, "{:<16}", "");
    for r in results {
        let _ = write!(s, "{:>width$}", r.label);
    }
    s.push('\n');
    let _ = write!(s, "{:<16}", "dependent");
    for r in results {
        let _ = write!(s, "{:>width$}", r.dependent);
    }
    s.push('\n');
    for name in &rows {
        let _ = write!(s, "{name:<16}");
        for r in results {
            match r.names.iter().position(|n| n == name) {
                Some(i) => {
                    let _ = write!(s, "{:>width$.4}", r.beta[i]);
                }
                None => {
                    let _ = write!(s, "{:>width$}", "");
                }
            }
        }
        s.push('\n');
        let _ = write!(s, "{:<16}", "");
        for r in results {
            match r.names.iter().position(|n| n == name) {
                Some(i) => {
                    let _ = write!(s, "{:>width$}", format!("({:.2})", r.t[i]));
                }
                None => {
                    let _ = write!(s, "{:>width$}", "");
                }
            }
        }
        s.push('\n');
    }
    for (label, f) in [("R2", 0usize), ("N", 1), ("SE", 2)] {
        let _ = write!(s, "{label:<16}");
        for r in results {
            let cell = match f {
                0 => format!("{:.4}", r.r2),
                1 => r.n.to_string(),
                _ => r.se_mode.as_str().to_string(),
            };
            let _ = write!(s, "{cell:>width$}");
        }
        s.push('\n');
    }
    s
}
