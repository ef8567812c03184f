//! Scenario generation and fixtures.
//!
//! A scenario is an ordered request stream plus the per-request bids of every
//! non-auto-bidding competitor. Competitors bid statically from their tables;
//! only the auto-bidder reacts to the market. Identical seeds produce byte
//! identical scenarios.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::market::{AdRequest, AdvertiserId, AdvertiserProfile, Slot, ValueClass};
use crate::rng::{substream, uniform};

/// The auto-bidder always has id 0; generated competitors get ids 1..=pool.
pub const AUTO_BIDDER: AdvertiserId = AdvertiserId(0);

/// One episode's market: requests, competitor bid tables, and the auto-bidder.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub requests: Vec<AdRequest>,
    /// Per-request competitor bids, aligned with `requests`.
    pub competitor_bids: Vec<BTreeMap<AdvertiserId, f64>>,
    pub auto_bidder: AdvertiserProfile,
    pub reserve: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.requests.len() != self.competitor_bids.len() {
            return Err(Error::Domain("requests and bid tables must align".into()));
        }
        for (request, bids) in self.requests.iter().zip(&self.competitor_bids) {
            if !request.matched.contains(&self.auto_bidder.id) {
                return Err(Error::Domain(format!(
                    "request {} does not match the auto-bidder",
                    request.id
                )));
            }
            if !self.auto_bidder.values.contains_key(&request.value_class) {
                return Err(Error::Domain(format!(
                    "request {} uses value class {} unknown to the auto-bidder",
                    request.id, request.value_class
                )));
            }
            for (who, bid) in bids {
                if !(*bid > 0.0) {
                    return Err(Error::Domain(format!(
                        "competitor bid for {who} in request {} must be positive",
                        request.id
                    )));
                }
                if !request.matched.contains(who) {
                    return Err(Error::Domain(format!(
                        "bid table names {who} not matched to request {}",
                        request.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Restrict the scenario to requests of one value class, re-numbering
    /// nothing: request ids are preserved.
    pub fn filter_by_class(&self, class: ValueClass) -> Scenario {
        let mut requests = Vec::new();
        let mut bids = Vec::new();
        for (request, table) in self.requests.iter().zip(&self.competitor_bids) {
            if request.value_class == class {
                requests.push(request.clone());
                bids.push(table.clone());
            }
        }
        Scenario {
            seed: self.seed,
            requests,
            competitor_bids: bids,
            auto_bidder: self.auto_bidder.clone(),
            reserve: self.reserve,
        }
    }
}

/// Distribution settings for generated scenarios.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub requests: usize,
    /// Inclusive slot-count range per request.
    pub slots: (u32, u32),
    /// Per-step position-factor decay range, inside (0, 1).
    pub slot_decay: (f64, f64),
    /// Number of distinct competitors that recur across the stream.
    pub competitor_pool: u32,
    /// Inclusive competitor-count range per request.
    pub competitors: (u32, u32),
    /// Base per-click bid range for competitors.
    pub bid_range: (f64, f64),
    /// Relative jitter applied to a competitor's base bid per request.
    pub bid_jitter: f64,
    pub quality_range: (f64, f64),
    pub cvr_range: (f64, f64),
    /// Value per conversion for class h = index.
    pub values: Vec<f64>,
    /// Mixture weights over value classes, same length as `values`.
    pub value_weights: Vec<f64>,
    pub reserve: f64,
}

impl ScenarioConfig {
    /// The bundled reference market: a mid-depth position-auction stream where
    /// the feasible conversion share rises steadily over CPA caps 1..5 for an
    /// advertiser with value 10.
    pub fn reference() -> ScenarioConfig {
        ScenarioConfig {
            requests: 10_000,
            slots: (1, 2),
            slot_decay: (0.4, 0.8),
            competitor_pool: 8,
            competitors: (2, 5),
            bid_range: (0.3, 2.2),
            bid_jitter: 0.1,
            quality_range: (0.6, 1.0),
            cvr_range: (0.4, 0.9),
            values: vec![10.0],
            value_weights: vec![1.0],
            reserve: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("slot_decay", self.slot_decay),
            ("bid", self.bid_range),
            ("quality", self.quality_range),
            ("cvr", self.cvr_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::Domain(format!("{name} range is inverted: ({lo}, {hi})")));
            }
            if lo < 0.0 {
                return Err(Error::Domain(format!("{name} range has negative support: {lo}")));
            }
        }
        if !(self.slot_decay.0 > 0.0 && self.slot_decay.1 < 1.0) {
            return Err(Error::Domain("slot decay must lie inside (0, 1)".into()));
        }
        if !(self.bid_range.0 > 0.0) {
            return Err(Error::Domain("competitor bids must be strictly positive".into()));
        }
        if !(self.bid_jitter >= 0.0 && self.bid_jitter < 1.0) {
            return Err(Error::Domain("bid jitter must lie in [0, 1)".into()));
        }
        if !(self.quality_range.0 > 0.0 && self.quality_range.1 <= 1.0) {
            return Err(Error::Domain("quality must lie in (0, 1]".into()));
        }
        if !(self.cvr_range.0 > 0.0 && self.cvr_range.1 <= 1.0) {
            return Err(Error::Domain("cvr must lie in (0, 1]".into()));
        }
        if self.slots.0 > self.slots.1 || self.slots.0 == 0 {
            return Err(Error::Domain("slot count range must be 1 <= min <= max".into()));
        }
        if self.competitors.0 > self.competitors.1 {
            return Err(Error::Domain("competitor count range is inverted".into()));
        }
        if self.competitors.1 > self.competitor_pool {
            return Err(Error::Domain("competitor count exceeds the pool".into()));
        }
        if self.values.is_empty() || self.values.len() != self.value_weights.len() {
            return Err(Error::Domain("values and value_weights must align and be non-empty".into()));
        }
        if self.value_weights.iter().any(|w| *w < 0.0) || self.value_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Domain("value weights must be non-negative with positive sum".into()));
        }
        if self.reserve < 0.0 {
            return Err(Error::Domain("reserve must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generate a deterministic scenario from `config` and `seed`.
///
/// Every request matches the auto-bidder. Competitor bids come from a per
/// competitor base level with per-request jitter, so the last-observed-bid
/// estimator has something to learn.
pub fn generate_scenario(
    config: &ScenarioConfig,
    auto_bidder: AdvertiserProfile,
    seed: u64,
) -> Result<Scenario> {
    config.validate()?;
    for (i, _) in config.values.iter().enumerate() {
        if !auto_bidder.values.contains_key(&ValueClass(i as u32)) {
            return Err(Error::Domain(format!(
                "auto-bidder profile lacks a value for class {i}"
            )));
        }
    }
    let mut rng = substream(seed, "scenario");

    let pool: Vec<AdvertiserId> = (1..=config.competitor_pool).map(AdvertiserId).collect();
    let base_bids: Vec<f64> = pool.iter().map(|_| uniform(&mut rng, config.bid_range)).collect();

    let weight_sum: f64 = config.value_weights.iter().sum();
    let mut cumulative = Vec::with_capacity(config.value_weights.len());
    let mut acc = 0.0;
    for w in &config.value_weights {
        acc += w / weight_sum;
        cumulative.push(acc);
    }

    let mut requests = Vec::with_capacity(config.requests);
    let mut competitor_bids = Vec::with_capacity(config.requests);
    for id in 0..config.requests {
        let slot_count = if config.slots.0 == config.slots.1 {
            config.slots.0
        } else {
            rng.gen_range(config.slots.0..=config.slots.1)
        };
        let mut slots = Vec::with_capacity(slot_count as usize);
        let mut factor = 1.0;
        for s in 0..slot_count {
            slots.push(Slot { id: s, position_factor: factor });
            factor *= uniform(&mut rng, config.slot_decay);
        }

        let comp_count = if config.competitors.0 == config.competitors.1 {
            config.competitors.0
        } else {
            rng.gen_range(config.competitors.0..=config.competitors.1)
        } as usize;
        // Partial Fisher-Yates over the pool for a distinct, order-stable draw.
        let mut candidates = pool.clone();
        let mut chosen = Vec::with_capacity(comp_count);
        for k in 0..comp_count {
            let pick = rng.gen_range(k..candidates.len());
            candidates.swap(k, pick);
            chosen.push(candidates[k]);
        }
        chosen.sort();

        let roll: f64 = rng.gen();
        let class_idx = cumulative.iter().position(|c| roll < *c).unwrap_or(config.values.len() - 1);
        let value_class = ValueClass(class_idx as u32);

        let mut quality = BTreeMap::new();
        let mut cvr = BTreeMap::new();
        quality.insert(AUTO_BIDDER, uniform(&mut rng, config.quality_range));
        cvr.insert(AUTO_BIDDER, uniform(&mut rng, config.cvr_range));
        let mut bids = BTreeMap::new();
        for who in &chosen {
            quality.insert(*who, uniform(&mut rng, config.quality_range));
            cvr.insert(*who, uniform(&mut rng, config.cvr_range));
            let jitter = if config.bid_jitter > 0.0 {
                uniform(&mut rng, (1.0 - config.bid_jitter, 1.0 + config.bid_jitter))
            } else {
                1.0
            };
            let bid = (base_bids[who.0 as usize - 1] * jitter).max(f64::MIN_POSITIVE);
            bids.insert(*who, bid);
        }

        requests.push(AdRequest::new(id as u32, value_class, slots, quality, cvr)?);
        competitor_bids.push(bids);
    }

    let scenario = Scenario {
        seed,
        requests,
        competitor_bids,
        auto_bidder,
        reserve: config.reserve,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Parse an explicit request-list fixture.
///
/// Format, one key per line:
///
/// ```text
/// reserve = 0.0
/// request.0.slots = 1.0          # position factors, comma separated
/// request.0.value_class = 0
/// request.0.quality.0 = 1.0      # advertiser id 0 is the auto-bidder
/// request.0.cvr.0 = 1.0
/// request.0.quality.1 = 1.0
/// request.0.cvr.1 = 1.0
/// request.0.bid.1 = 5.0          # competitor per-click bids
/// ```
pub fn parse_scenario_fixture(text: &str, auto_bidder: AdvertiserProfile) -> Result<Scenario> {
    let kv = KvMap::parse(text)?;
    let reserve = kv.f64_or("reserve", 0.0)?;

    let mut indices = BTreeSet::new();
    for key in kv.keys_with_prefix("request.") {
        let rest = &key["request.".len()..];
        let Some((idx, _)) = rest.split_once('.') else {
            return Err(Error::Config(format!("malformed fixture key `{key}`")));
        };
        let idx: u32 = idx
            .parse()
            .map_err(|_| Error::Config(format!("bad request index in `{key}`")))?;
        indices.insert(idx);
    }
    if indices.is_empty() {
        return Err(Error::Config("fixture defines no requests".into()));
    }

    let mut requests = Vec::new();
    let mut competitor_bids = Vec::new();
    for (position, idx) in indices.iter().enumerate() {
        if *idx as usize != position {
            return Err(Error::Config(format!(
                "fixture request indices must be 0..n without gaps, missing {position}"
            )));
        }
        let prefix = format!("request.{idx}.");
        let factors = kv
            .f64_list(&format!("{prefix}slots"))?
            .ok_or_else(|| Error::Config(format!("missing `{prefix}slots`")))?;
        let slots: Vec<Slot> = factors
            .iter()
            .enumerate()
            .map(|(s, f)| Slot { id: s as u32, position_factor: *f })
            .collect();
        let value_class = ValueClass(kv.u64_or(&format!("{prefix}value_class"), 0)? as u32);

        let mut quality = BTreeMap::new();
        let mut cvr = BTreeMap::new();
        let mut bids = BTreeMap::new();
        for key in kv.keys_with_prefix(&prefix) {
            let rest = &key[prefix.len()..];
            if let Some(id) = rest.strip_prefix("quality.") {
                let id: u32 = id
                    .parse()
                    .map_err(|_| Error::Config(format!("bad advertiser id in `{key}`")))?;
                quality.insert(AdvertiserId(id), kv.require_f64(key)?);
            } else if let Some(id) = rest.strip_prefix("cvr.") {
                let id: u32 = id
                    .parse()
                    .map_err(|_| Error::Config(format!("bad advertiser id in `{key}`")))?;
                cvr.insert(AdvertiserId(id), kv.require_f64(key)?);
            } else if let Some(id) = rest.strip_prefix("bid.") {
                let id: u32 = id
                    .parse()
                    .map_err(|_| Error::Config(format!("bad advertiser id in `{key}`")))?;
                bids.insert(AdvertiserId(id), kv.require_f64(key)?);
            }
        }
        requests.push(AdRequest::new(*idx, value_class, slots, quality, cvr)?);
        competitor_bids.push(bids);
    }

    let scenario = Scenario { seed: 0, requests, competitor_bids, auto_bidder, reserve };
    scenario.validate()?;
    Ok(scenario)
}
