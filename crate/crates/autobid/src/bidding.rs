//! Per-request optimal bid formulas for the proxy advertiser and competitor
//! bid estimation.
//!
//! The bid family covers the four (goal, constraint) combinations. `m` and `n`
//! are environment parameters of the bid family, not choices of the
//! advertiser; the audit layer treats them as given.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::market::{AdRequest, AdvertiserId, Constraint, Goal};

/// Predetermined dual parameters of the bid family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyParams {
    /// CPA-cap parameter, > 0.
    pub m: f64,
    /// ROI-floor parameter, > 0.
    pub n: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams { m: 1.0, n: 1.0 }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) || !(self.n > 0.0) {
            return Err(Error::Domain(format!(
                "strategy params must be positive: m={}, n={}",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

/// Per-click bid for one request given the advertiser's goal and constraint.
///
/// With a CPA cap `t`: revenue goal bids `(m*t + v) * cvr / m`, profit goal
/// bids `(m*t + v) * cvr / (m+1)`. With an ROI floor `gamma`: revenue goal
/// bids `(n+gamma+1) * v * cvr / (n*(gamma+1))`, profit goal divides by
/// `(n+1)*(gamma+1)` instead.
pub fn optimal_bid(
    goal: Goal,
    constraint: Constraint,
    value: f64,
    cvr: f64,
    params: StrategyParams,
) -> Result<f64> {
    params.validate()?;
    if !(value > 0.0) {
        return Err(Error::Domain(format!("value must be positive, got {value}")));
    }
    if !(cvr > 0.0 && cvr <= 1.0) {
        return Err(Error::Domain(format!("cvr must lie in (0, 1], got {cvr}")));
    }
    let bid = match constraint {
        Constraint::TargetCpa(t) => {
            if !(t > 0.0) {
                return Err(Error::Domain(format!("CPA cap must be positive, got {t}")));
            }
            let numerator = (params.m * t + value) * cvr;
            match goal {
                Goal::Revenue => numerator / params.m,
                Goal::Profit => numerator / (params.m + 1.0),
            }
        }
        Constraint::TargetRoi(gamma) => {
            if !(gamma > 0.0) {
                return Err(Error::Domain(format!("ROI floor must be positive, got {gamma}")));
            }
            let numerator = (params.n + gamma + 1.0) * value * cvr;
            match goal {
                Goal::Revenue => numerator / (params.n * (gamma + 1.0)),
                Goal::Profit => numerator / ((params.n + 1.0) * (gamma + 1.0)),
            }
        }
    };
    Ok(bid)
}

/// Observed competitor bids so far in one episode.
#[derive(Debug, Clone, Default)]
pub struct BidHistory {
    last_observed: BTreeMap<AdvertiserId, f64>,
    sum: f64,
    count: u64,
}

impl BidHistory {
    pub fn new() -> Self {
        BidHistory::default()
    }

    /// Record the revealed bids of one finished auction.
    pub fn observe(&mut self, bids: &BTreeMap<AdvertiserId, f64>) {
        for (who, bid) in bids {
            self.last_observed.insert(*who, *bid);
            self.sum += bid;
            self.count += 1;
        }
    }

    pub fn last_bid(&self, who: AdvertiserId) -> Option<f64> {
        self.last_observed.get(&who).copied()
    }

    /// Mean over every observation in the episode so far.
    pub fn scenario_mean(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else {
            Some(self.sum / self.count as f64)
        }
    }
}

/// Pluggable competitor-bid estimator used ahead of each auction.
pub trait BidEstimator {
    /// Estimated per-click bid for every matched competitor (the auto-bidder
    /// itself excluded). Must be deterministic.
    fn estimate(
        &self,
        history: &BidHistory,
        request: &AdRequest,
        auto_bidder: AdvertiserId,
        reserve: f64,
    ) -> BTreeMap<AdvertiserId, f64>;
}

/// Default estimator: a competitor's most recent observed bid, falling back to
/// the scenario-wide mean, falling back to the reserve price.
#[derive(Debug, Clone, Copy, Default)]
pub struct LastObservedEstimator;

impl BidEstimator for LastObservedEstimator {
    fn estimate(
        &self,
        history: &BidHistory,
        request: &AdRequest,
        auto_bidder: AdvertiserId,
        reserve: f64,
    ) -> BTreeMap<AdvertiserId, f64> {
        let mut estimates = BTreeMap::new();
        for who in &request.matched {
            if *who == auto_bidder {
                continue;
            }
            let estimate = history
                .last_bid(*who)
                .or_else(|| history.scenario_mean())
                .unwrap_or(reserve);
            estimates.insert(*who, estimate);
        }
        estimates
    }
}
