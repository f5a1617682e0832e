//! Seeded synthetic NFT markets with planted run-ups, crashes, wash loops and
//! sophisticated wallets, together with the ground truth used by tests.
//!
//! Each collection draws from its own ChaCha8 stream (`set_stream`), so output
//! does not depend on how collections are scheduled across threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    write_categories, write_transfers, write_wallet_txs, Category, CategoryMap, FundingEdge, Transfer, TransferLog,
    TxKind, WalletTx, ZERO_ADDRESS,
};
use crate::washtrade::WashFilter;

const SLOT: i64 = 100;
const LEAD: i64 = 24;
const MODE_TRADES: usize = 12;
const QUIET_CAP: f64 = 0.015;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedEffects {
    pub volatility: f64,
    pub turnover: f64,
    pub acceleration: f64,
    pub sophisticated_frac: f64,
    pub unique_owner_change: f64,
    pub wash_volume: f64,
}

impl Default for PlantedEffects {
    fn default() -> Self {
        PlantedEffects {
            volatility: 1.0,
            turnover: -1.0,
            acceleration: 1.0,
            sophisticated_frac: -1.2,
            unique_owner_change: -1.0,
            wash_volume: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_collections: usize,
    pub n_wallets: usize,
    pub horizon_hours: i64,
    /// UTC seconds of hour 0; must be hour-aligned.
    pub start_ts: i64,
    /// Probability that a 100-hour slot carries a run-up.
    pub runup_rate: f64,
    /// Crash probability at average feature values.
    pub crash_prob_base: f64,
    /// Log-odds contribution of one standard deviation of each feature.
    pub planted_effects: PlantedEffects,
    /// Maximum wash loops per slot and collection.
    pub wash_loop_count: usize,
    /// Share of wallets in the sophisticated pool.
    pub sophisticated_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_collections: 32,
            n_wallets: 200_000,
            horizon_hours: 2_000,
            start_ts: 1_637_395_200,
            runup_rate: 0.95,
            crash_prob_base: 0.5,
            planted_effects: PlantedEffects::default(),
            wash_loop_count: 4,
            sophisticated_share: 0.0008,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is not a probability")))
            }
        };
        prob("runup_rate", self.runup_rate)?;
        prob("sophisticated_share", self.sophisticated_share)?;
        if !(self.crash_prob_base > 0.0 && self.crash_prob_base < 1.0) {
            return Err(Error::Config("crash_prob_base must lie strictly inside (0, 1)".into()));
        }
        if self.n_collections == 0 || self.n_wallets < 100 {
            return Err(Error::Config("need at least one collection and 100 wallets".into()));
        }
        if self.start_ts <= 0 || self.start_ts % 3600 != 0 {
            return Err(Error::Config("start_ts must be a positive, hour-aligned timestamp".into()));
        }
        if self.horizon_hours < SLOT + LEAD + 48 {
            return Err(Error::Config(format!("horizon_hours must be at least {}", SLOT + LEAD + 48)));
        }
        // wash loops occupy distinct quiet hours before the calm stretch of a slot
        let quiet = (60 - 48 - 1) as usize;
        if self.wash_loop_count > quiet {
            return Err(Error::Infeasible(format!(
                "wash_loop_count {} exceeds the {quiet} quiet hours available per slot",
                self.wash_loop_count
            )));
        }
        Ok(())
    }

    fn pool_size(&self) -> usize {
        ((self.sophisticated_share * self.n_wallets as f64).round() as usize).max(10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub collection: String,
    /// Absolute UTC hour index of the anchor.
    pub t0: i64,
    pub crash: bool,
    pub crash_prob: f64,
    /// Standardized planted features in the order volatility, turnover,
    /// acceleration, sophisticated_frac, unique_owner_change, wash_volume.
    pub z: [f64; 6],
    pub calm_price: f64,
    pub zigzag: f64,
    pub trades_per_hour: f64,
    pub sophisticated_wallets: usize,
    pub diversify_trades: usize,
    pub concentrate_trades: usize,
    pub wash_log_volume: f64,
    pub ex_post_ret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWash {
    pub tx_id: String,
    pub token: String,
    pub collection: String,
    pub filter: WashFilter,
    pub volume_eth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub events: Vec<PlantedEvent>,
    pub wash_trades: Vec<PlantedWash>,
    pub sophisticated_wallets: Vec<String>,
}

pub struct SynthMarket {
    pub transfers: Vec<Transfer>,
    pub funding: Vec<FundingEdge>,
    pub categories: CategoryMap,
    pub wallet_txs: Vec<WalletTx>,
    pub truth: GroundTruth,
}

impl SynthMarket {
    pub fn log(&self) -> TransferLog {
        TransferLog::from_records(self.transfers.clone()).0
    }

    /// Writes the ingest-format files plus `ground_truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        write_transfers(&self.log(), create("trades.jsonl")?)?;
        let mut w = create("funding.jsonl")?;
        for e in &self.funding {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        write_categories(&self.categories, create("categories.csv")?)?;
        write_wallet_txs(&self.wallet_txs, create("wallet_txs.jsonl")?)?;
        let mut w = create("ground_truth.json")?;
        serde_json::to_writer_pretty(&mut w, &self.truth)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Wallet kinds, encoded in the top byte of an address.
mod kind {
    pub const ORDINARY: u64 = 0x01;
    pub const WHALE: u64 = 0x02;
    pub const SOPH: u64 = 0x03;
    pub const WASH: u64 = 0x04;
    pub const FUNDER: u64 = 0x0a;
    pub const CEX: u64 = 0x0b;
    pub const MIXER: u64 = 0x0c;
    pub const DEX_SWAP: u64 = 0x0d;
    pub const DEX_LIQ: u64 = 0x0e;
    pub const LENDING: u64 = 0x0f;
    pub const OTHER: u64 = 0x10;
}

const KIND_SHIFT: u32 = 48;

fn wallet(k: u64, id: u64) -> u64 {
    (k << KIND_SHIFT) | id
}

fn address(w: u64) -> String {
    format!("0x{:02x}{:038x}", w >> KIND_SHIFT, w & ((1u64 << KIND_SHIFT) - 1))
}

fn collection_address(c: usize) -> String {
    format!("0xc0{:038x}", c + 1)
}

fn cex(i: u64) -> u64 {
    wallet(kind::CEX, i % 5)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform draw rescaled to mean 0, variance 1.
fn standardize_uniform(u: f64) -> f64 {
    12f64.sqrt() * (u - 0.5)
}

#[derive(Debug, Clone)]
enum LoopKind {
    SelfTrade,
    Inverted,
    RepeatBuyer,
    CommonFunder,
}

#[derive(Debug, Clone)]
struct WashLoop {
    hour: i64,
    kind: LoopKind,
    token: u32,
    wallets: Vec<u64>,
}

#[derive(Debug, Clone)]
struct EventPlan {
    t0: i64,
    u: [f64; 5],
    f_final: f64,
    f_pre: f64,
    mode_hours: Vec<i64>,
    diversify: usize,
}

struct Pending {
    token: u32,
    from: u64,
    to: u64,
    price: f64,
    wash: Option<WashFilter>,
}

#[derive(Default)]
struct Holdings {
    owner: Vec<u64>,
    held: HashMap<u64, Vec<u32>>,
    singles: Vec<u64>,
    single_pos: HashMap<u64, usize>,
    pairs: HashSet<(u64, u64, u32)>,
    buys: HashMap<(u64, u32), u8>,
}

impl Holdings {
    fn count(&self, w: u64) -> usize {
        self.held.get(&w).map_or(0, |v| v.len())
    }

    fn is_ordinary(w: u64) -> bool {
        w >> KIND_SHIFT == kind::ORDINARY
    }

    fn update_single(&mut self, w: u64) {
        let single = Self::is_ordinary(w) && self.count(w) == 1;
        match (single, self.single_pos.get(&w).copied()) {
            (true, None) => {
                self.single_pos.insert(w, self.singles.len());
                self.singles.push(w);
            }
            (false, Some(i)) => {
                self.singles.swap_remove(i);
                self.single_pos.remove(&w);
                if i < self.singles.len() {
                    self.single_pos.insert(self.singles[i], i);
                }
            }
            _ => {}
        }
    }

    fn give(&mut self, token: u32, to: u64) {
        if self.owner.len() <= token as usize {
            self.owner.resize(token as usize + 1, 0);
        }
        self.owner[token as usize] = to;
        self.held.entry(to).or_default().push(token);
        self.update_single(to);
    }

    fn take(&mut self, token: u32) -> u64 {
        let from = self.owner[token as usize];
        let v = self.held.get_mut(&from).expect("owner holds token");
        let i = v.iter().position(|t| *t == token).expect("token listed");
        v.swap_remove(i);
        if v.is_empty() {
            self.held.remove(&from);
        }
        self.update_single(from);
        from
    }

    /// A trade from `from` to `to` would trip no wash filter.
    fn clean(&self, token: u32, from: u64, to: u64) -> bool {
        from != to
            && !self.pairs.contains(&(to, from, token))
            && self.buys.get(&(to, token)).copied().unwrap_or(0) < 2
    }

    fn record_trade(&mut self, token: u32, from: u64, to: u64) {
        self.pairs.insert((from, to, token));
        *self.buys.entry((to, token)).or_default() += 1;
    }
}

struct CollectionGen<'a> {
    cfg: &'a SynthConfig,
    c: usize,
    rng: ChaCha8Rng,
    hold: Holdings,
    n_tokens: u32,
    whales: Vec<u64>,
    pool: usize,
}

struct CollectionOut {
    transfers: Vec<Transfer>,
    events: Vec<PlantedEvent>,
    wash: Vec<PlantedWash>,
    funding: Vec<FundingEdge>,
    soph_used: HashSet<u64>,
}

impl<'a> CollectionGen<'a> {
    fn noise(&mut self) -> f64 {
        let e: f64 = self.rng.sample(StandardNormal);
        (0.01 * e).exp()
    }

    fn trade_price(&mut self, target: f64) -> f64 {
        let p = target * self.noise();
        ((p * 1e6).round() / 1e6).max(1e-6)
    }

    fn fresh_buyer(&mut self, token: u32, from: u64) -> Option<u64> {
        for _ in 0..50 {
            let w = wallet(kind::ORDINARY, self.rng.random_range(0..self.cfg.n_wallets as u64));
            if self.hold.count(w) == 0 && self.hold.clean(token, from, w) {
                return Some(w);
            }
        }
        None
    }

    /// A single-token ordinary holder whose token can go to `to` cleanly.
    fn single_seller(&mut self, to: Option<u64>) -> Option<(u64, u32)> {
        for _ in 0..50 {
            if self.hold.singles.is_empty() {
                return None;
            }
            let s = self.hold.singles[self.rng.random_range(0..self.hold.singles.len())];
            let token = self.hold.held[&s][0];
            let ok = match to {
                Some(b) => self.hold.clean(token, s, b),
                None => true,
            };
            if ok {
                return Some((s, token));
            }
        }
        None
    }

    fn neutral(&mut self, price: f64, out: &mut Vec<Pending>) -> bool {
        let Some((s, token)) = self.single_seller(None) else { return false };
        let Some(b) = self.fresh_buyer(token, s) else { return false };
        self.push(token, s, b, price, out);
        true
    }

    fn diversify(&mut self, price: f64, out: &mut Vec<Pending>) -> bool {
        let start = self.rng.random_range(0..self.whales.len());
        for i in 0..self.whales.len() {
            let w = self.whales[(start + i) % self.whales.len()];
            if self.hold.count(w) < 2 {
                continue;
            }
            let tokens = self.hold.held[&w].clone();
            let token = tokens[self.rng.random_range(0..tokens.len())];
            if let Some(b) = self.fresh_buyer(token, w) {
                self.push(token, w, b, price, out);
                return true;
            }
        }
        false
    }

    fn concentrate(&mut self, price: f64, out: &mut Vec<Pending>) -> bool {
        let start = self.rng.random_range(0..self.whales.len());
        for i in 0..self.whales.len() {
            let w = self.whales[(start + i) % self.whales.len()];
            if self.hold.count(w) == 0 {
                continue;
            }
            if let Some((s, token)) = self.single_seller(Some(w)) {
                self.push(token, s, w, price, out);
                return true;
            }
        }
        false
    }

    fn push(&mut self, token: u32, from: u64, to: u64, target: f64, out: &mut Vec<Pending>) {
        let price = self.trade_price(target);
        self.hold.record_trade(token, from, to);
        self.hold.take(token);
        self.hold.give(token, to);
        out.push(Pending {
            token,
            from,
            to,
            price,
            wash: None,
        });
    }

    fn new_token(&mut self) -> u32 {
        let t = self.n_tokens;
        self.n_tokens += 1;
        t
    }
}

fn plan_slots(g: &mut CollectionGen, len: i64) -> (Vec<EventPlan>, Vec<WashLoop>) {
    let cfg = g.cfg;
    let wash_u: f64 = g.rng.random();
    let loops_per_slot = (cfg.wash_loop_count as f64 * wash_u).round() as usize;
    let mut events = Vec::new();
    let mut loops = Vec::new();
    let mut wash_id = 0u64;
    let mut s = LEAD;
    while s + SLOT <= len {
        let planted = g.rng.random::<f64>() < cfg.runup_rate;
        let t0 = s + 60 + g.rng.random_range(0..=10);
        let quiet_end = if planted { t0 - 49 } else { s + SLOT - 1 };
        let hours = sample(&mut g.rng, (quiet_end - s + 1) as usize, loops_per_slot);
        let mut hs: Vec<i64> = hours.into_iter().map(|h| s + h as i64).collect();
        hs.sort();
        for h in hs {
            let kind = match g.rng.random_range(0..4) {
                0 => LoopKind::SelfTrade,
                1 => LoopKind::Inverted,
                2 => LoopKind::RepeatBuyer,
                _ => LoopKind::CommonFunder,
            };
            let n_w = match kind {
                LoopKind::SelfTrade => 1,
                LoopKind::Inverted | LoopKind::CommonFunder => 2,
                LoopKind::RepeatBuyer => 4,
            };
            let base = ((g.c as u64) << 24) | (wash_id << 3);
            wash_id += 1;
            let wallets = (0..n_w).map(|i| wallet(kind::WASH, base | i)).collect();
            let token = g.new_token();
            loops.push(WashLoop {
                hour: h,
                kind,
                token,
                wallets,
            });
        }
        if planted {
            let u: [f64; 5] = std::array::from_fn(|_| g.rng.random());
            let mut mode: Vec<i64> = sample(&mut g.rng, 24, MODE_TRADES)
                .into_iter()
                .map(|i| i as i64 - 23)
                .collect();
            mode.sort();
            let diversify = (u[4] * MODE_TRADES as f64).round() as usize;
            events.push(EventPlan {
                t0,
                u,
                f_final: g.rng.random_range(2.4..2.6),
                f_pre: 1.4,
                mode_hours: mode,
                diversify,
            });
        }
        s += SLOT;
    }
    (events, loops)
}

fn generate_collection(cfg: &SynthConfig, c: usize) -> CollectionOut {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(c as u64 + 1);
    let offset = rng.random_range(0..=48i64);
    let len = cfg.horizon_hours - offset;
    let mut g = CollectionGen {
        cfg,
        c,
        rng,
        hold: Holdings::default(),
        n_tokens: 0,
        whales: (0..3).map(|i| wallet(kind::WHALE, ((c as u64) << 8) | i)).collect(),
        pool: cfg.pool_size(),
    };
    let base_price: f64 = g.rng.random_range(0.5..2.0);
    let n_singles: usize = g.rng.random_range(250..400);
    let coll = collection_address(c);
    let abs0 = cfg.start_ts / 3600 + offset;

    let mut hours: Vec<Vec<Pending>> = (0..len).map(|_| Vec::new()).collect();
    let mut mints: Vec<(u32, u64)> = Vec::new();
    for w in g.whales.clone() {
        for _ in 0..60 {
            let t = g.new_token();
            mints.push((t, w));
        }
    }
    let singles = sample(&mut g.rng, cfg.n_wallets, n_singles.min(cfg.n_wallets / 2));
    for id in singles {
        let t = g.new_token();
        mints.push((t, wallet(kind::ORDINARY, id as u64)));
    }
    let (plans, loops) = plan_slots(&mut g, len);
    let mut funding = Vec::new();
    let funded_at = cfg.start_ts - 86_400;
    for (i, l) in loops.iter().enumerate() {
        let holder = match l.kind {
            LoopKind::RepeatBuyer => l.wallets[1],
            _ => l.wallets[0],
        };
        mints.push((l.token, holder));
        let shared = wallet(kind::FUNDER, (1 << 40) | ((c as u64) << 20) | i as u64);
        for (j, w) in l.wallets.iter().enumerate() {
            let funder = match l.kind {
                LoopKind::CommonFunder => shared,
                _ => wallet(kind::FUNDER, (2 << 40) | ((c as u64) << 20) | ((i as u64) << 3) | j as u64),
            };
            funding.push(FundingEdge {
                wallet: address(*w),
                first_funder: address(funder),
                funded_at,
            });
        }
    }
    for w in &g.whales {
        funding.push(FundingEdge {
            wallet: address(*w),
            first_funder: address(wallet(kind::FUNDER, (3 << 40) | (w & 0xffff_ffff))),
            funded_at,
        });
    }
    for &(t, w) in &mints {
        g.hold.give(t, w);
    }

    let mut loops_at: BTreeMap<i64, Vec<&WashLoop>> = BTreeMap::new();
    for l in &loops {
        loops_at.entry(l.hour).or_default().push(l);
    }
    let mut plan_at: BTreeMap<i64, usize> = BTreeMap::new();
    for (i, p) in plans.iter().enumerate() {
        plan_at.insert(p.t0, i);
    }

    let mut price = base_price;
    let mut events = Vec::new();
    let mut soph_used = HashSet::new();
    let mut wash_cum = 0.0f64;
    let fx = &cfg.planted_effects;

    // event state while inside a planted window
    struct Active {
        plan: usize,
        calm: f64,
        f_mid: f64,
        zigzag: f64,
        lambda: f64,
        /// Ordinary trades per ex-ante hour, indexed by t + 24.
        ordinary: Vec<usize>,
        soph: Vec<(u64, i64, i64)>,
        soph_tokens: HashMap<u64, u32>,
        crash: bool,
        r: f64,
        p0: f64,
        p1: f64,
        n_div: usize,
        n_conc: usize,
        record: usize,
    }
    let mut active: Option<Active> = None;

    for h in 1..len {
        // start a planted window at its calm stretch
        if active.is_none() {
            if let Some(&i) = plan_at.get(&(h + 48)) {
                let p = &plans[i];
                let u = p.u;
                active = Some(Active {
                    plan: i,
                    calm: price,
                    f_mid: p.f_pre - (p.f_pre - 1.0) * u[2],
                    zigzag: 0.02 + 0.28 * u[0],
                    lambda: 2.0 + 4.0 * u[1],
                    soph: Vec::new(),
                    soph_tokens: HashMap::new(),
                    ordinary: Vec::new(),
                    crash: false,
                    r: 0.0,
                    p0: 0.0,
                    p1: 0.0,
                    n_div: 0,
                    n_conc: 0,
                    record: usize::MAX,
                });
            }
        }
        let mut out = Vec::new();
        match active.as_mut() {
            None => {
                let drift = 0.05 * (base_price.ln() - price.ln()) + 0.01 * g.rng.sample::<f64, _>(StandardNormal);
                price *= drift.min(QUIET_CAP).exp();
                if let Some(ls) = loops_at.get(&h) {
                    for l in ls.clone() {
                        let before = out.len();
                        emit_loop(&mut g, l, price, &mut out);
                        wash_cum += out[before..].iter().map(|p| p.price).sum::<f64>();
                    }
                }
                if g.rng.random::<f64>() < 0.7 {
                    g.neutral(price, &mut out);
                }
            }
            Some(a) => {
                let p = &plans[a.plan];
                let t = h - p.t0;
                let target = if t <= -24 {
                    a.calm
                } else if t < 0 {
                    let base = if t <= -12 {
                        a.f_mid.powf((t + 24) as f64 / 12.0)
                    } else {
                        a.f_mid * (p.f_pre / a.f_mid).powf((t + 12) as f64 / 11.0)
                    };
                    let zig = if t % 2 != 0 { 1.0 + a.zigzag } else { 1.0 };
                    a.calm * base * zig
                } else if t == 0 {
                    a.calm * p.f_final
                } else if t == 1 {
                    a.p1
                } else {
                    let frac = (t - 1) as f64 / 23.0;
                    a.p1 * (a.p0 * (1.0 + a.r) / a.p1).powf(frac)
                };
                if t == -24 {
                    // choose sophisticated participants and their trade hours
                    let planned = (25.0 * a.lambda).round();
                    let k = ((0.3 * p.u[3] * planned).round() as usize).min(g.pool);
                    let picks = sample(&mut g.rng, g.pool, k);
                    for i in picks {
                        let w = wallet(kind::SOPH, i as u64);
                        let buy = g.rng.random_range(-22..=-19);
                        let sell = g.rng.random_range(0..=1);
                        a.soph.push((w, buy, sell));
                    }
                    // sophisticated trades displace ordinary ones so total
                    // ex-ante sales follow the planned rate
                    let soph_sales = a.soph.len() + a.soph.iter().filter(|s| s.2 == 0).count();
                    let total = (planned as usize).saturating_sub(soph_sales).max(25);
                    a.ordinary = vec![total / 25; 25];
                    for i in sample(&mut g.rng, 25, total % 25) {
                        a.ordinary[i] += 1;
                    }
                }
                if t == 0 {
                    let wash_log = wash_cum.ln_1p();
                    let z = [
                        standardize_uniform(p.u[0]),
                        standardize_uniform(p.u[1]),
                        standardize_uniform(p.u[2]),
                        standardize_uniform(p.u[3]),
                        standardize_uniform(p.u[4]),
                        (wash_log - 2.5) / 1.5,
                    ];
                    let base = (cfg.crash_prob_base / (1.0 - cfg.crash_prob_base)).ln();
                    let index = base
                        + fx.volatility * z[0]
                        + fx.turnover * z[1]
                        + fx.acceleration * z[2]
                        + fx.sophisticated_frac * z[3]
                        + fx.unique_owner_change * z[4]
                        + fx.wash_volume * z[5];
                    let prob = logistic(index);
                    a.crash = g.rng.random::<f64>() < prob;
                    a.p0 = target;
                    if a.crash {
                        a.r = g.rng.random_range(-0.85..-0.5);
                        a.p1 = target * (1.0 + g.rng.random_range(0.0..0.25));
                    } else {
                        a.r = g.rng.random_range(-0.3..0.8);
                        a.p1 = target * (1.0 + g.rng.random_range(0.0..0.1));
                    }
                    a.record = events.len();
                    events.push(PlantedEvent {
                        collection: coll.clone(),
                        t0: abs0 + p.t0,
                        crash: a.crash,
                        crash_prob: prob,
                        z,
                        calm_price: a.calm,
                        zigzag: a.zigzag,
                        trades_per_hour: a.lambda,
                        sophisticated_wallets: a.soph.len(),
                        diversify_trades: 0,
                        concentrate_trades: 0,
                        wash_log_volume: wash_log,
                        ex_post_ret: a.r,
                    });
                }
                if t < -24 {
                    g.neutral(target, &mut out);
                } else if t <= 0 {
                    let n = a.ordinary[(t + 24) as usize];
                    for i in 0..n {
                        let mode_slot = p.mode_hours.iter().position(|m| *m == t);
                        if i == 0 && mode_slot.is_some() {
                            let div = mode_slot.unwrap() < p.diversify;
                            let done = if div {
                                g.diversify(target, &mut out)
                            } else {
                                g.concentrate(target, &mut out)
                            };
                            if done {
                                if div {
                                    a.n_div += 1;
                                } else {
                                    a.n_conc += 1;
                                }
                                continue;
                            }
                        }
                        g.neutral(target, &mut out);
                    }
                    let buyers: Vec<u64> = a.soph.iter().filter(|s| s.1 == t).map(|s| s.0).collect();
                    for w in buyers {
                        if g.hold.count(w) == 0 {
                            if let Some((s, token)) = g.single_seller(Some(w)) {
                                g.push(token, s, w, target, &mut out);
                                a.soph_tokens.insert(w, token);
                                soph_used.insert(w);
                            }
                        }
                    }
                } else {
                    let n = if a.crash { 1 } else { 2 + g.rng.random_range(0..=1) };
                    for _ in 0..n {
                        g.neutral(target, &mut out);
                    }
                }
                if (0..=1).contains(&t) {
                    let sellers: Vec<(u64, u32)> = a
                        .soph
                        .iter()
                        .filter(|s| s.2 == t)
                        .filter_map(|s| a.soph_tokens.get(&s.0).map(|tk| (s.0, *tk)))
                        .collect();
                    for (w, token) in sellers {
                        if let Some(b) = g.fresh_buyer(token, w) {
                            g.push(token, w, b, target, &mut out);
                        }
                    }
                }
                if t == 24 {
                    let e = &mut events[a.record];
                    e.diversify_trades = a.n_div;
                    e.concentrate_trades = a.n_conc;
                    price = target;
                    active = None;
                }
            }
        }
        hours[h as usize] = out;
    }

    // timestamps and ids
    let mut transfers = Vec::new();
    let mut seq = 0u64;
    let tx = |seq: &mut u64| {
        let id = format!("0x{:04x}{:08x}", c, *seq);
        *seq += 1;
        id
    };
    let h0 = abs0 * 3600;
    let nm = mints.len() as i64;
    for (i, (t, w)) in mints.iter().enumerate() {
        transfers.push(Transfer {
            tx_id: tx(&mut seq),
            timestamp: h0 + (i as i64 + 1) * 3599 / (nm + 1),
            collection: coll.clone(),
            token: t.to_string(),
            from_wallet: ZERO_ADDRESS.to_string(),
            to_wallet: address(*w),
            price_eth: 0.0,
            price_usd: 0.0,
            marketplace: "opensea".into(),
        });
    }
    let mut wash = Vec::new();
    for (h, list) in hours.iter().enumerate() {
        let n = list.len() as i64;
        let start = (abs0 + h as i64) * 3600;
        for (i, p) in list.iter().enumerate() {
            let id = tx(&mut seq);
            if let Some(f) = p.wash {
                if p.price > 0.0 {
                    wash.push(PlantedWash {
                        tx_id: id.clone(),
                        token: p.token.to_string(),
                        collection: coll.clone(),
                        filter: f,
                        volume_eth: p.price,
                    });
                }
            }
            transfers.push(Transfer {
                tx_id: id,
                timestamp: start + (i as i64 + 1) * 3599 / (n + 1),
                collection: coll.clone(),
                token: p.token.to_string(),
                from_wallet: address(p.from),
                to_wallet: address(p.to),
                price_eth: p.price,
                price_usd: (p.price * 4000.0 * 100.0).round() / 100.0,
                marketplace: "opensea".into(),
            });
        }
    }
    CollectionOut {
        transfers,
        events,
        wash,
        funding,
        soph_used,
    }
}

/// Emits the transfers of one wash loop at `target` price.
fn emit_loop(g: &mut CollectionGen, l: &WashLoop, target: f64, out: &mut Vec<Pending>) {
    let w = &l.wallets;
    let trade = |g: &mut CollectionGen, from: u64, to: u64, filter: WashFilter, out: &mut Vec<Pending>| {
        let price = g.trade_price(target);
        g.hold.take(l.token);
        g.hold.give(l.token, to);
        out.push(Pending {
            token: l.token,
            from,
            to,
            price,
            wash: Some(filter),
        });
    };
    let free = |g: &mut CollectionGen, from: u64, to: u64, out: &mut Vec<Pending>| {
        g.hold.take(l.token);
        g.hold.give(l.token, to);
        out.push(Pending {
            token: l.token,
            from,
            to,
            price: 0.0,
            wash: Some(WashFilter::RepeatBuyer),
        });
    };
    match l.kind {
        LoopKind::SelfTrade => trade(g, w[0], w[0], WashFilter::SelfTrade, out),
        LoopKind::Inverted => {
            trade(g, w[0], w[1], WashFilter::InvertedPair, out);
            trade(g, w[1], w[0], WashFilter::InvertedPair, out);
        }
        LoopKind::RepeatBuyer => {
            // w[0] is the repeat buyer, w[1..] pass the token back
            let buyer = w[0];
            trade(g, w[1], buyer, WashFilter::RepeatBuyer, out);
            free(g, buyer, w[2], out);
            trade(g, w[2], buyer, WashFilter::RepeatBuyer, out);
            free(g, buyer, w[3], out);
            trade(g, w[3], buyer, WashFilter::RepeatBuyer, out);
        }
        LoopKind::CommonFunder => trade(g, w[0], w[1], WashFilter::CommonFunder, out),
    }
}

fn categories() -> CategoryMap {
    let mut list = Vec::new();
    for i in 0..3 {
        list.push((wallet(kind::DEX_SWAP, i), Category::DexSwap));
    }
    for i in 0..2 {
        list.push((wallet(kind::DEX_LIQ, i), Category::DexLiquidity));
        list.push((wallet(kind::LENDING, i), Category::Lending));
    }
    for i in 0..5 {
        list.push((cex(i), Category::Cex));
    }
    list.push((wallet(kind::MIXER, 0), Category::Mixer));
    list.push((wallet(kind::OTHER, 0), Category::Other));
    let mut map = CategoryMap::default();
    for (w, c) in &list {
        map.insert(&address(*w), *c);
    }
    map
}

fn wallet_txs(cfg: &SynthConfig, wallets: &[(u64, bool)], end_ts: i64) -> Vec<WalletTx> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let swaps: Vec<u64> = (0..3).map(|i| wallet(kind::DEX_SWAP, i)).collect();
    let liq: Vec<u64> = (0..2).map(|i| wallet(kind::DEX_LIQ, i)).collect();
    let lend: Vec<u64> = (0..2).map(|i| wallet(kind::LENDING, i)).collect();
    let mut out = Vec::new();
    for &(w, soph) in wallets {
        let (age_days, n_swap, n_liq, n_lend, n_plain) = if soph {
            (
                rng.random_range(200..700),
                rng.random_range(10..25),
                rng.random_range(2..6),
                rng.random_range(1..5),
                rng.random_range(10..30),
            )
        } else {
            (
                rng.random_range(20..400),
                rng.random_range(0..6),
                rng.random_range(0..2),
                rng.random_range(0..2),
                rng.random_range(2..15),
            )
        };
        let first = cfg.start_ts - age_days as i64 * 86_400;
        let span = end_ts - first;
        out.push(WalletTx {
            wallet: address(w),
            timestamp: first,
            counterparty: address(cex(w)),
            value_eth: 1.0,
            kind: TxKind::Transfer,
        });
        let mut push = |rng: &mut ChaCha8Rng, cp: u64, kind: TxKind| {
            out.push(WalletTx {
                wallet: address(w),
                timestamp: first + rng.random_range(0..span),
                counterparty: address(cp),
                value_eth: (rng.random_range(0.01..3.0f64) * 1e4).round() / 1e4,
                kind,
            });
        };
        for _ in 0..n_swap {
            let cp = swaps[rng.random_range(0..swaps.len())];
            push(&mut rng, cp, TxKind::ContractCall);
        }
        for _ in 0..n_liq {
            let cp = liq[rng.random_range(0..liq.len())];
            push(&mut rng, cp, TxKind::ContractCall);
        }
        for _ in 0..n_lend {
            let cp = lend[rng.random_range(0..lend.len())];
            push(&mut rng, cp, TxKind::ContractCall);
        }
        for _ in 0..n_plain {
            let cp = wallet(kind::ORDINARY, rng.random_range(0..cfg.n_wallets as u64));
            push(&mut rng, cp, TxKind::Transfer);
        }
    }
    out.sort_by(|a, b| (&a.wallet, a.timestamp, &a.counterparty).cmp(&(&b.wallet, b.timestamp, &b.counterparty)));
    out
}

/// Generates a complete synthetic market. Identical configs give identical output.
pub fn generate_market(cfg: &SynthConfig) -> Result<SynthMarket> {
    cfg.validate()?;
    let parts: Vec<CollectionOut> = (0..cfg.n_collections)
        .into_par_iter()
        .map(|c| generate_collection(cfg, c))
        .collect();
    let mut transfers = Vec::new();
    let mut events = Vec::new();
    let mut wash = Vec::new();
    let mut funding = Vec::new();
    let mut soph: HashSet<u64> = HashSet::new();
    for p in parts {
        transfers.extend(p.transfers);
        events.extend(p.events);
        wash.extend(p.wash);
        funding.extend(p.funding);
        soph.extend(p.soph_used);
    }
    let mut seen: HashSet<&str> = HashSet::new();
    let mut ordinary: Vec<u64> = Vec::new();
    for t in &transfers {
        for a in [&t.from_wallet, &t.to_wallet] {
            if seen.insert(a.as_str()) && a.starts_with("0x01") {
                ordinary.push(u64::from_str_radix(&a[4..], 16).unwrap_or(0));
            }
        }
    }
    ordinary.sort_unstable();
    let funded_at = cfg.start_ts - 86_400;
    for id in &ordinary {
        let w = wallet(kind::ORDINARY, *id);
        let funder = match id % 3 {
            0 => Some(cex(*id)),
            1 => Some(wallet(kind::FUNDER, (4 << 40) | id)),
            _ => None,
        };
        if let Some(f) = funder {
            funding.push(FundingEdge {
                wallet: address(w),
                first_funder: address(f),
                funded_at,
            });
        }
    }
    let mut soph: Vec<u64> = soph.into_iter().collect();
    soph.sort_unstable();
    for w in &soph {
        funding.push(FundingEdge {
            wallet: address(*w),
            first_funder: address(cex(*w)),
            funded_at,
        });
    }
    funding.sort_by(|a, b| a.wallet.cmp(&b.wallet));

    let end_ts = cfg.start_ts + cfg.horizon_hours * 3600;
    let mut tx_wallets: Vec<(u64, bool)> = soph.iter().map(|w| (*w, true)).collect();
    tx_wallets.extend(ordinary.iter().take(1_500).map(|id| (wallet(kind::ORDINARY, *id), false)));
    let wallet_txs = wallet_txs(cfg, &tx_wallets, end_ts);

    events.sort_by(|a, b| (a.t0, &a.collection).cmp(&(b.t0, &b.collection)));
    wash.sort_by(|a, b| (&a.tx_id, &a.token).cmp(&(&b.tx_id, &b.token)));
    let categories = categories();
    let mut transfers = transfers;
    transfers.sort_by(|a, b| (a.timestamp, &a.tx_id).cmp(&(b.timestamp, &b.tx_id)));
    Ok(SynthMarket {
        transfers,
        funding,
        categories,
        wallet_txs,
        truth: GroundTruth {
            config: cfg.clone(),
            events,
            wash_trades: wash,
            sophisticated_wallets: soph.iter().map(|w| address(*w)).collect(),
        },
    })
}
