//! Auction environment: requests, slots, advertisers, the position-auction
//! engine, and per-request / episode-level delivery accounting.
//!
//! Conversions are carried in expectation (fractional) throughout; there is no
//! sampled click or conversion event. Spend is charged in expectation as well:
//! a winner pays `price_per_click * ctr`, so the per-request CPA reduces to
//! `price / cvr`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// Relative slack used when comparing delivered quantities against bounds.
pub const REL_EPS: f64 = 1e-9;

/// Identifier for an advertiser. Ordering is the auction tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AdvertiserId(pub u32);

impl fmt::Display for AdvertiserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Identifier for a value class `h` (one value-per-conversion level).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueClass(pub u32);

impl fmt::Display for ValueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What the advertiser optimizes: cumulative conversion value, or value net of cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Revenue,
    Profit,
}

impl Goal {
    /// Indicator flag used in the utility: 0 for revenue, 1 for profit.
    pub fn indicator(self) -> f64 {
        match self {
            Goal::Revenue => 0.0,
            Goal::Profit => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Goal::Revenue => "revenue",
            Goal::Profit => "profit",
        }
    }

    pub fn parse(s: &str) -> Result<Goal> {
        match s {
            "revenue" => Ok(Goal::Revenue),
            "profit" => Ok(Goal::Profit),
            other => Err(Error::Config(format!("unknown goal `{other}`"))),
        }
    }
}

/// An episode-level delivery constraint: a CPA cap or an ROI floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    /// Upper bound on average spend per conversion over the episode.
    TargetCpa(f64),
    /// Lower bound on (revenue - cost) / cost over the episode.
    TargetRoi(f64),
}

impl Constraint {
    pub fn value(&self) -> f64 {
        match self {
            Constraint::TargetCpa(t) => *t,
            Constraint::TargetRoi(g) => *g,
        }
    }
}

/// Transform an ROI floor into the equivalent CPA cap for a constant
/// value-per-conversion `v`: the cap is `v / (1 + gamma)`.
pub fn roi_to_tcpa(v: f64, gamma: f64) -> Result<f64> {
    if !(v > 0.0) || !(gamma > 0.0) {
        return Err(Error::Domain(format!(
            "roi_to_tcpa requires v > 0 and gamma > 0, got v={v}, gamma={gamma}"
        )));
    }
    Ok(v / (1.0 + gamma))
}

/// One ranked ad position within a request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub id: u32,
    /// Click-probability multiplier for this position, in (0, 1].
    pub position_factor: f64,
}

/// An advertiser's private type: values per conversion, constraint, and goal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvertiserProfile {
    pub id: AdvertiserId,
    pub values: BTreeMap<ValueClass, f64>,
    pub constraint: Constraint,
    pub goal: Goal,
    pub auto_bidding: bool,
}

impl AdvertiserProfile {
    pub fn new(
        id: AdvertiserId,
        values: BTreeMap<ValueClass, f64>,
        constraint: Constraint,
        goal: Goal,
        auto_bidding: bool,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("advertiser needs at least one value class".into()));
        }
        for (h, v) in &values {
            if !(*v > 0.0) {
                return Err(Error::Domain(format!("value for class {h} must be positive, got {v}")));
            }
        }
        match constraint {
            Constraint::TargetCpa(t) => {
                if values.len() != 1 {
                    return Err(Error::Domain(
                        "a CPA cap requires a single value-per-conversion".into(),
                    ));
                }
                let v = *values.values().next().unwrap();
                if !(t > 0.0 && t < v) {
                    return Err(Error::Domain(format!(
                        "CPA cap must lie in (0, v): t={t}, v={v}"
                    )));
                }
            }
            Constraint::TargetRoi(g) => {
                if !(g > 0.0) {
                    return Err(Error::Domain(format!("ROI floor must be positive, got {g}")));
                }
            }
        }
        Ok(AdvertiserProfile { id, values, constraint, goal, auto_bidding })
    }

    /// Convenience constructor for a constant-value auto-bidder.
    pub fn constant_value(
        id: AdvertiserId,
        value: f64,
        constraint: Constraint,
        goal: Goal,
    ) -> Result<Self> {
        let mut values = BTreeMap::new();
        values.insert(ValueClass(0), value);
        AdvertiserProfile::new(id, values, constraint, goal, true)
    }

    pub fn value_for(&self, class: ValueClass) -> Result<f64> {
        self.values
            .get(&class)
            .copied()
            .ok_or_else(|| Error::Domain(format!("advertiser has no value for class {class}")))
    }

    /// The single value-per-conversion; errors when the profile is multi-class.
    pub fn single_value(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(*self.values.values().next().unwrap())
        } else {
            Err(Error::Domain("profile has multiple value classes".into()))
        }
    }
}

/// One auction opportunity.
#[derive(Debug, Clone, PartialEq)]
pub struct AdRequest {
    pub id: u32,
    pub value_class: ValueClass,
    pub slots: Vec<Slot>,
    pub matched: BTreeSet<AdvertiserId>,
    /// Base click probability per matched advertiser (the slot-independent part).
    pub quality: BTreeMap<AdvertiserId, f64>,
    /// Conversion probability per matched advertiser.
    pub cvr: BTreeMap<AdvertiserId, f64>,
}

impl AdRequest {
    pub fn new(
        id: u32,
        value_class: ValueClass,
        slots: Vec<Slot>,
        quality: BTreeMap<AdvertiserId, f64>,
        cvr: BTreeMap<AdvertiserId, f64>,
    ) -> Result<Self> {
        let mut prev = f64::INFINITY;
        for slot in &slots {
            if !(slot.position_factor > 0.0 && slot.position_factor <= 1.0) {
                return Err(Error::MalformedRequest(format!(
                    "position factor must be in (0, 1], got {}",
                    slot.position_factor
                )));
            }
            if slot.position_factor >= prev {
                return Err(Error::MalformedRequest(
                    "position factors must be strictly decreasing".into(),
                ));
            }
            prev = slot.position_factor;
        }
        for (who, q) in &quality {
            if !(*q > 0.0 && *q <= 1.0) {
                return Err(Error::MalformedRequest(format!(
                    "quality for {who} must be in (0, 1], got {q}"
                )));
            }
        }
        for (who, c) in &cvr {
            if !(*c > 0.0 && *c <= 1.0) {
                return Err(Error::MalformedRequest(format!(
                    "cvr for {who} must be in (0, 1], got {c}"
                )));
            }
        }
        let matched: BTreeSet<AdvertiserId> = quality.keys().copied().collect();
        let converting: BTreeSet<AdvertiserId> = cvr.keys().copied().collect();
        if matched != converting {
            return Err(Error::MalformedRequest(
                "quality and cvr must cover the same advertisers".into(),
            ));
        }
        Ok(AdRequest { id, value_class, slots, matched, quality, cvr })
    }

    /// Click-through rate of `who` in slot index `slot_idx` (separable form).
    pub fn ctr(&self, who: AdvertiserId, slot_idx: usize) -> Result<f64> {
        let q = self
            .quality
            .get(&who)
            .ok_or_else(|| Error::MalformedRequest(format!("{who} is not matched to request {}", self.id)))?;
        let slot = self
            .slots
            .get(slot_idx)
            .ok_or_else(|| Error::MalformedRequest(format!("no slot {slot_idx} in request {}", self.id)))?;
        Ok(q * slot.position_factor)
    }
}

/// Allocation and per-click prices of one auction.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    /// slot id -> winner.
    pub allocation: BTreeMap<u32, AdvertiserId>,
    /// slot id -> per-click price charged to its winner.
    pub price_per_click: BTreeMap<u32, f64>,
    /// Ranking score (bid * quality) per bidder.
    pub rank_scores: BTreeMap<AdvertiserId, f64>,
}

impl AuctionOutcome {
    /// Index (into the request's slot list) of the slot `who` won, if any.
    pub fn winner_slot(&self, who: AdvertiserId) -> Option<u32> {
        self.allocation
            .iter()
            .find(|(_, w)| **w == who)
            .map(|(slot, _)| *slot)
    }
}

/// Run a generalized second-price position auction.
///
/// Bidders are ranked by `bid * quality` descending, ties broken by ascending
/// advertiser id. Slot `k` (in position order) goes to the rank-`k` bidder
/// when her score clears `reserve * quality`; her per-click price is
/// `max(next rank's score, reserve * quality) / quality`, never above her own
/// bid.
pub fn run_gsp_auction(
    request: &AdRequest,
    bids: &BTreeMap<AdvertiserId, f64>,
    reserve: f64,
) -> Result<AuctionOutcome> {
    if request.slots.is_empty() {
        return Err(Error::MalformedRequest(format!("request {} has no slots", request.id)));
    }
    if bids.is_empty() {
        return Err(Error::MalformedRequest(format!("request {} received no bids", request.id)));
    }
    if reserve < 0.0 {
        return Err(Error::Domain(format!("reserve must be non-negative, got {reserve}")));
    }

    let mut ranked: Vec<(AdvertiserId, f64, f64)> = Vec::with_capacity(bids.len());
    for (&who, &bid) in bids {
        if !(bid >= 0.0) {
            return Err(Error::Domain(format!("bid for {who} must be non-negative, got {bid}")));
        }
        let q = *request
            .quality
            .get(&who)
            .ok_or_else(|| Error::MalformedRequest(format!("{who} is not matched to request {}", request.id)))?;
        ranked.push((who, bid, q));
    }
    ranked.sort_by(|a, b| {
        let sa = a.1 * a.2;
        let sb = b.1 * b.2;
        sb.partial_cmp(&sa).unwrap().then(a.0.cmp(&b.0))
    });

    let mut allocation = BTreeMap::new();
    let mut price_per_click = BTreeMap::new();
    let mut rank_scores = BTreeMap::new();
    for &(who, bid, q) in &ranked {
        rank_scores.insert(who, bid * q);
    }

    for (k, slot) in request.slots.iter().enumerate() {
        let Some(&(who, bid, q)) = ranked.get(k) else { break };
        let score = bid * q;
        if score < reserve * q {
            // Rank-k bidder misses the reserve; the slot stays unfilled.
            continue;
        }
        let next_score = ranked.get(k + 1).map(|&(_, b, qq)| b * qq).unwrap_or(0.0);
        let price = next_score.max(reserve * q) / q;
        allocation.insert(slot.id, who);
        price_per_click.insert(slot.id, price);
    }

    Ok(AuctionOutcome { allocation, price_per_click, rank_scores })
}

/// Expected delivery of one advertiser in one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryRecord {
    pub request_id: u32,
    /// Expected conversions won in this request.
    pub conversions: f64,
    /// Expected spend (per-click price weighted by click probability).
    pub spend: f64,
}

impl DeliveryRecord {
    pub fn zero(request_id: u32) -> Self {
        DeliveryRecord { request_id, conversions: 0.0, spend: 0.0 }
    }

    /// Cost per acquisition; undefined when no conversions were won.
    pub fn cpa(&self) -> Option<f64> {
        if self.conversions > 0.0 {
            Some(self.spend / self.conversions)
        } else {
            None
        }
    }
}

/// Derive the delivery record of `who` from an auction outcome.
pub fn compute_request_delivery(
    outcome: &AuctionOutcome,
    request: &AdRequest,
    who: AdvertiserId,
) -> Result<DeliveryRecord> {
    if !request.matched.contains(&who) {
        return Err(Error::Domain(format!("{who} is not matched to request {}", request.id)));
    }
    let Some(slot_id) = outcome.winner_slot(who) else {
        return Ok(DeliveryRecord::zero(request.id));
    };
    let slot_idx = request
        .slots
        .iter()
        .position(|s| s.id == slot_id)
        .ok_or_else(|| Error::MalformedRequest(format!("outcome slot {slot_id} not in request {}", request.id)))?;
    let ctr = request.ctr(who, slot_idx)?;
    let cvr = request.cvr[&who];
    let price = outcome.price_per_click[&slot_id];
    Ok(DeliveryRecord {
        request_id: request.id,
        conversions: ctr * cvr,
        spend: price * ctr,
    })
}

/// Episode totals and the constraint verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub conversions: f64,
    pub spend: f64,
    pub revenue: f64,
    pub utility: f64,
    pub constraint_satisfied: bool,
}

impl EpisodeSummary {
    pub fn zero() -> Self {
        EpisodeSummary {
            conversions: 0.0,
            spend: 0.0,
            revenue: 0.0,
            utility: 0.0,
            constraint_satisfied: true,
        }
    }

    /// Conversion-weighted episode CPA; undefined without conversions.
    pub fn delivered_cpa(&self) -> Option<f64> {
        if self.conversions > 0.0 {
            Some(self.spend / self.conversions)
        } else {
            None
        }
    }

    /// Episode ROI (revenue - spend) / spend; undefined without spend.
    pub fn delivered_roi(&self) -> Option<f64> {
        if self.spend > 0.0 {
            Some((self.revenue - self.spend) / self.spend)
        } else {
            None
        }
    }
}

/// Whether delivered totals satisfy a constraint, with a hair of relative slack.
pub fn constraint_satisfied(constraint: Constraint, conversions: f64, spend: f64, revenue: f64) -> bool {
    let bound = match constraint {
        Constraint::TargetCpa(t) => t * conversions,
        Constraint::TargetRoi(g) => revenue / (1.0 + g),
    };
    spend <= bound + REL_EPS * bound.abs().max(1.0)
}

/// Aggregate an episode's delivery records into a summary.
///
/// `classes[i]` is the value class of `records[i]`'s request. The utility is
/// `sum((v - I*cpa_j) * cv_j)`; when the episode constraint is violated it is
/// overridden to `-spend` (the constraint is a bottom line, not a soft goal).
pub fn aggregate_episode(
    records: &[DeliveryRecord],
    profile: &AdvertiserProfile,
    classes: &[ValueClass],
) -> Result<EpisodeSummary> {
    if records.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    if records.len() != classes.len() {
        return Err(Error::Domain(format!(
            "records ({}) and value classes ({}) must align",
            records.len(),
            classes.len()
        )));
    }
    let mut conversions = 0.0;
    let mut spend = 0.0;
    let mut revenue = 0.0;
    for (record, class) in records.iter().zip(classes) {
        conversions += record.conversions;
        spend += record.spend;
        revenue += profile.value_for(*class)? * record.conversions;
    }
    if conversions <= 0.0 {
        return Ok(EpisodeSummary {
            conversions: 0.0,
            spend,
            revenue: 0.0,
            utility: 0.0,
            constraint_satisfied: true,
        });
    }
    let satisfied = constraint_satisfied(profile.constraint, conversions, spend, revenue);
    let utility = if satisfied {
        revenue - profile.goal.indicator() * spend
    } else {
        -spend
    };
    Ok(EpisodeSummary { conversions, spend, revenue, utility, constraint_satisfied: satisfied })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_slot_request(qualities: &[(u32, f64)], cvrs: &[(u32, f64)]) -> AdRequest {
        let quality: BTreeMap<_, _> = qualities.iter().map(|&(i, q)| (AdvertiserId(i), q)).collect();
        let cvr: BTreeMap<_, _> = cvrs.iter().map(|&(i, c)| (AdvertiserId(i), c)).collect();
        AdRequest::new(0, ValueClass(0), vec![Slot { id: 0, position_factor: 1.0 }], quality, cvr)
            .unwrap()
    }

    fn bids(entries: &[(u32, f64)]) -> BTreeMap<AdvertiserId, f64> {
        entries.iter().map(|&(i, b)| (AdvertiserId(i), b)).collect()
    }

    #[test]
    fn second_price_two_bidders() {
        let request = one_slot_request(&[(0, 1.0), (1, 1.0)], &[(0, 1.0), (1, 1.0)]);
        let outcome = run_gsp_auction(&request, &bids(&[(0, 2.0), (1, 1.0)]), 0.0).unwrap();
        assert_eq!(outcome.allocation[&0], AdvertiserId(0));
        assert_eq!(outcome.price_per_click[&0], 1.0);
    }

    #[test]
    fn second_price_four_bidders() {
        let request = one_slot_request(
            &[(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)],
            &[(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)],
        );
        let outcome =
            run_gsp_auction(&request, &bids(&[(0, 4.0), (1, 5.0), (2, 2.0), (3, 1.0)]), 0.0).unwrap();
        assert_eq!(outcome.allocation[&0], AdvertiserId(1));
        assert_eq!(outcome.price_per_click[&0], 4.0);
    }

    #[test]
    fn gsp_next_bid_ladder() {
        let quality: BTreeMap<_, _> = (0..3).map(|i| (AdvertiserId(i), 1.0)).collect();
        let cvr = quality.clone();
        let request = AdRequest::new(
            0,
            ValueClass(0),
            vec![
                Slot { id: 0, position_factor: 1.0 },
                Slot { id: 1, position_factor: 0.5 },
            ],
            quality,
            cvr,
        )
        .unwrap();
        let outcome = run_gsp_auction(&request, &bids(&[(0, 3.0), (1, 2.0), (2, 1.0)]), 0.0).unwrap();
        assert_eq!(outcome.allocation[&0], AdvertiserId(0));
        assert_eq!(outcome.price_per_click[&0], 2.0);
        assert_eq!(outcome.allocation[&1], AdvertiserId(1));
        assert_eq!(outcome.price_per_click[&1], 1.0);
    }

    #[test]
    fn single_bidder_clears_at_reserve() {
        let request = one_slot_request(&[(0, 1.0)], &[(0, 1.0)]);
        let outcome = run_gsp_auction(&request, &bids(&[(0, 2.0)]), 0.5).unwrap();
        assert_eq!(outcome.price_per_click[&0], 0.5);
        // Below reserve: slot stays unfilled.
        let outcome = run_gsp_auction(&request, &bids(&[(0, 0.4)]), 0.5).unwrap();
        assert!(outcome.allocation.is_empty());
    }

    #[test]
    fn quality_weighted_ranking_and_pricing() {
        let request = one_slot_request(&[(0, 0.5), (1, 1.0)], &[(0, 1.0), (1, 1.0)]);
        // Scores: a0 = 2.0*0.5 = 1.0, a1 = 1.5*1.0 = 1.5 -> a1 wins, pays 1.0/1.0.
        let outcome = run_gsp_auction(&request, &bids(&[(0, 2.0), (1, 1.5)]), 0.0).unwrap();
        assert_eq!(outcome.allocation[&0], AdvertiserId(1));
        assert!((outcome.price_per_click[&0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tie_breaks_by_ascending_id() {
        let request = one_slot_request(&[(0, 1.0), (1, 1.0)], &[(0, 1.0), (1, 1.0)]);
        let outcome = run_gsp_auction(&request, &bids(&[(0, 2.0), (1, 2.0)]), 0.0).unwrap();
        assert_eq!(outcome.allocation[&0], AdvertiserId(0));
        assert_eq!(outcome.price_per_click[&0], 2.0);
    }

    #[test]
    fn empty_slot_list_is_malformed() {
        let quality: BTreeMap<_, _> = [(AdvertiserId(0), 1.0)].into();
        let cvr = quality.clone();
        let request = AdRequest::new(0, ValueClass(0), vec![], quality, cvr).unwrap();
        let err = run_gsp_auction(&request, &bids(&[(0, 1.0)]), 0.0).unwrap_err();
        assert!(matches!(err, Error::MalformedRequest(_)));
    }

    #[test]
    fn delivery_direct_substitution() {
        // ctr 0.2 (quality 0.4 * pf 0.5), cvr 0.1, price 1.5.
        let quality: BTreeMap<_, _> = [(AdvertiserId(0), 0.4)].into();
        let cvr: BTreeMap<_, _> = [(AdvertiserId(0), 0.1)].into();
        let request = AdRequest::new(
            7,
            ValueClass(0),
            vec![
                Slot { id: 0, position_factor: 1.0 },
                Slot { id: 1, position_factor: 0.5 },
            ],
            quality,
            cvr,
        )
        .unwrap();
        let outcome = AuctionOutcome {
            allocation: [(1, AdvertiserId(0))].into(),
            price_per_click: [(1, 1.5)].into(),
            rank_scores: BTreeMap::new(),
        };
        let record = compute_request_delivery(&outcome, &request, AdvertiserId(0)).unwrap();
        assert!((record.conversions - 0.02).abs() < 1e-12);
        assert!((record.spend - 0.30).abs() < 1e-12);
        assert!((record.cpa().unwrap() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn delivery_loss_and_bigger_win() {
        let request = one_slot_request(&[(0, 1.0), (1, 1.0)], &[(0, 0.2), (1, 0.2)]);
        let outcome = run_gsp_auction(&request, &bids(&[(0, 1.0), (1, 3.0)]), 0.0).unwrap();
        let record = compute_request_delivery(&outcome, &request, AdvertiserId(0)).unwrap();
        assert_eq!(record.conversions, 0.0);
        assert_eq!(record.spend, 0.0);
        assert_eq!(record.cpa(), None);

        // Winner: ctr 0.5 * cvr 0.2 = 0.1 conversions at price 2.0 -> spend 1.0, cpa 10.
        let quality: BTreeMap<_, _> = [(AdvertiserId(0), 0.5)].into();
        let cvr: BTreeMap<_, _> = [(AdvertiserId(0), 0.2)].into();
        let request =
            AdRequest::new(1, ValueClass(0), vec![Slot { id: 0, position_factor: 1.0 }], quality, cvr)
                .unwrap();
        let outcome = AuctionOutcome {
            allocation: [(0, AdvertiserId(0))].into(),
            price_per_click: [(0, 2.0)].into(),
            rank_scores: BTreeMap::new(),
        };
        let record = compute_request_delivery(&outcome, &request, AdvertiserId(0)).unwrap();
        assert!((record.conversions - 0.1).abs() < 1e-12);
        assert!((record.spend - 1.0).abs() < 1e-12);
        assert!((record.cpa().unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn delivery_unmatched_advertiser_errors() {
        let request = one_slot_request(&[(0, 1.0)], &[(0, 1.0)]);
        let outcome = run_gsp_auction(&request, &bids(&[(0, 1.0)]), 0.0).unwrap();
        let err = compute_request_delivery(&outcome, &request, AdvertiserId(9)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    fn profile_tcpa(v: f64, t: f64, goal: Goal) -> AdvertiserProfile {
        AdvertiserProfile::constant_value(AdvertiserId(0), v, Constraint::TargetCpa(t), goal).unwrap()
    }

    #[test]
    fn aggregate_two_record_episode() {
        let records = [
            DeliveryRecord { request_id: 0, conversions: 1.0, spend: 5.0 },
            DeliveryRecord { request_id: 1, conversions: 1.0, spend: 1.0 },
        ];
        let profile = profile_tcpa(10.0, 4.0, Goal::Profit);
        let summary = aggregate_episode(&records, &profile, &[ValueClass(0); 2]).unwrap();
        assert!((summary.delivered_cpa().unwrap() - 3.0).abs() < 1e-12);
        assert!((summary.utility - 14.0).abs() < 1e-12);
        assert!(summary.constraint_satisfied);
    }

    #[test]
    fn aggregate_single_record_episode() {
        let records = [DeliveryRecord { request_id: 0, conversions: 1.0, spend: 1.0 }];
        let profile = profile_tcpa(10.0, 4.0, Goal::Profit);
        let summary = aggregate_episode(&records, &profile, &[ValueClass(0)]).unwrap();
        assert!((summary.delivered_cpa().unwrap() - 1.0).abs() < 1e-12);
        assert!((summary.utility - 9.0).abs() < 1e-12);
        assert!(summary.constraint_satisfied);
    }

    #[test]
    fn aggregate_violation_overrides_utility() {
        let records = [
            DeliveryRecord { request_id: 0, conversions: 1.0, spend: 6.0 },
            DeliveryRecord { request_id: 1, conversions: 1.0, spend: 4.0 },
        ];
        let profile = profile_tcpa(10.0, 4.0, Goal::Profit);
        let summary = aggregate_episode(&records, &profile, &[ValueClass(0); 2]).unwrap();
        assert!(!summary.constraint_satisfied);
        assert!((summary.utility - -10.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_zero_conversions() {
        let records = [DeliveryRecord::zero(0), DeliveryRecord::zero(1)];
        let profile = profile_tcpa(10.0, 4.0, Goal::Profit);
        let summary = aggregate_episode(&records, &profile, &[ValueClass(0); 2]).unwrap();
        assert_eq!(summary.conversions, 0.0);
        assert_eq!(summary.delivered_cpa(), None);
        assert_eq!(summary.utility, 0.0);
    }

    #[test]
    fn aggregate_empty_errors() {
        let profile = profile_tcpa(10.0, 4.0, Goal::Profit);
        assert!(matches!(aggregate_episode(&[], &profile, &[]), Err(Error::EmptyEpisode)));
    }

    #[test]
    fn roi_to_tcpa_examples() {
        assert!((roi_to_tcpa(10.0, 1.0).unwrap() - 5.0).abs() < 1e-12);
        assert!((roi_to_tcpa(10.0, 0.25).unwrap() - 8.0).abs() < 1e-12);
        let near = roi_to_tcpa(10.0, 1e-12).unwrap();
        assert!(near < 10.0 && near > 10.0 - 1e-9);
        assert!(roi_to_tcpa(0.0, 1.0).is_err());
        assert!(roi_to_tcpa(10.0, 0.0).is_err());
    }

    #[test]
    fn tcpa_profile_requires_singleton_values_in_range() {
        let mut values = BTreeMap::new();
        values.insert(ValueClass(0), 10.0);
        values.insert(ValueClass(1), 20.0);
        assert!(AdvertiserProfile::new(
            AdvertiserId(0),
            values,
            Constraint::TargetCpa(4.0),
            Goal::Profit,
            true
        )
        .is_err());
        assert!(AdvertiserProfile::constant_value(
            AdvertiserId(0),
            10.0,
            Constraint::TargetCpa(10.0),
            Goal::Profit
        )
        .is_err());
    }

    #[test]
    fn roi_cpa_equivalence_on_summary_fields() {
        // ROI route and CPA route of the constraint must agree on the summary's
        // own fields for an ROI-constrained advertiser.
        let profile = AdvertiserProfile::constant_value(
            AdvertiserId(0),
            10.0,
            Constraint::TargetRoi(1.0),
            Goal::Profit,
        )
        .unwrap();
        let records = [
            DeliveryRecord { request_id: 0, conversions: 0.4, spend: 1.3 },
            DeliveryRecord { request_id: 1, conversions: 0.7, spend: 2.2 },
        ];
        let summary = aggregate_episode(&records, &profile, &[ValueClass(0); 2]).unwrap();
        let roi_ok = summary.delivered_roi().unwrap() >= 1.0 - 1e-9;
        let bound = summary.revenue / summary.conversions / 2.0;
        let cpa_ok = summary.delivered_cpa().unwrap() <= bound * (1.0 + 1e-9);
        assert_eq!(roi_ok, cpa_ok);
        assert_eq!(roi_ok, summary.constraint_satisfied);
    }
}
