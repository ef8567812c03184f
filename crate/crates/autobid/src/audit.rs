//! Empirical truthfulness certification.
//!
//! The audit layer sweeps reports over a grid and compares the utility of
//! truth-telling against the best misreport. Utilities come from one of three
//! oracles: closed-form mechanism evaluation, full simulated episodes, or the
//! bundled two-request CPA-ranked second-price market (example 1) that rewards
//! overbidding and serves as a negative control.
//!
//! The bottom-line rule applies everywhere: when the delivered point violates
//! the advertiser's true constraint, her utility is the negated spend.



use crate::bidding::{optimal_bid, StrategyParams};
use crate::control::{run_episode, ControlConfig};
use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::market::{
    aggregate_episode, compute_request_delivery, constraint_satisfied, run_gsp_auction,
    AdvertiserProfile, Constraint, DeliveryRecord, EpisodeSummary, Goal, ValueClass,
};
use crate::mechanism::{AggregatedMechanism, ReportKind};
use crate::scenario::{parse_scenario_fixture, Scenario, AUTO_BIDDER};

/// Utility (and context) of one report under one oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepEval {
    pub utility: f64,
    /// Delivered CPA or ROI, whichever the report expresses.
    pub delivered: Option<f64>,
    pub satisfied: bool,
    /// Per-request tolerance-band violations observed (simulated mode only).
    pub violations: u32,
}

/// A report-to-utility map the audit can sweep.
pub trait ReportOracle {
    fn evaluate(&self, report: f64) -> Result<SweepEval>;
}

fn summarize_promise(
    mech: &AggregatedMechanism,
    profile: &AdvertiserProfile,
    report: f64,
) -> Result<SweepEval> {
    let conversions = mech.cv_of_report(report)?;
    let spend = mech.spend_of_report(report)?;
    let revenue = mech.revenue_of_report(report)?;
    let satisfied = constraint_satisfied(profile.constraint, conversions, spend, revenue);
    let utility = if conversions <= 0.0 {
        0.0
    } else if satisfied {
        revenue - profile.goal.indicator() * spend
    } else {
        -spend
    };
    let delivered = match mech.report_kind() {
        ReportKind::CpaCap => (conversions > 0.0).then(|| spend / conversions),
        ReportKind::RoiFloor => (spend > 0.0).then(|| (revenue - spend) / spend),
    };
    Ok(SweepEval { utility, delivered, satisfied, violations: 0 })
}

/// Evaluates reports directly on the mechanism's promised curves.
pub struct ClosedFormOracle<'a> {
    mech: &'a AggregatedMechanism,
    profile: &'a AdvertiserProfile,
}

impl<'a> ClosedFormOracle<'a> {
    pub fn new(mech: &'a AggregatedMechanism, profile: &'a AdvertiserProfile) -> Result<Self> {
        if mech.goal() != profile.goal {
            return Err(Error::Domain("mechanism and profile goals differ".into()));
        }
        Ok(ClosedFormOracle { mech, profile })
    }
}

impl ReportOracle for ClosedFormOracle<'_> {
    fn evaluate(&self, report: f64) -> Result<SweepEval> {
        summarize_promise(self.mech, self.profile, report)
    }
}

/// Closed-form utility of one report (bottom-line rule applied).
pub fn utility_of_report(
    mech: &AggregatedMechanism,
    profile: &AdvertiserProfile,
    report: f64,
) -> Result<f64> {
    Ok(ClosedFormOracle::new(mech, profile)?.evaluate(report)?.utility)
}

/// Evaluates reports by running full controlled episodes on a scenario.
pub struct SimulatedOracle<'a> {
    mech: &'a AggregatedMechanism,
    profile: &'a AdvertiserProfile,
    scenario: &'a Scenario,
    config: &'a ControlConfig,
}

impl<'a> SimulatedOracle<'a> {
    pub fn new(
        mech: &'a AggregatedMechanism,
        profile: &'a AdvertiserProfile,
        scenario: &'a Scenario,
        config: &'a ControlConfig,
    ) -> Result<Self> {
        if mech.goal() != profile.goal {
            return Err(Error::Domain("mechanism and profile goals differ".into()));
        }
        Ok(SimulatedOracle { mech, profile, scenario, config })
    }
}

impl ReportOracle for SimulatedOracle<'_> {
    fn evaluate(&self, report: f64) -> Result<SweepEval> {
        let outcome = run_episode(self.scenario, self.profile, self.mech, report, self.config)?;
        let delivered = match self.mech.report_kind() {
            ReportKind::CpaCap => outcome.summary.delivered_cpa(),
            ReportKind::RoiFloor => outcome.summary.delivered_roi(),
        };
        Ok(SweepEval {
            utility: outcome.summary.utility,
            delivered,
            satisfied: outcome.summary.constraint_satisfied,
            violations: outcome.violations.len() as u32,
        })
    }
}

/// Sum of independent single-class ROI mechanisms audited as one episode.
pub struct RoiCompositeOracle<'a> {
    parts: &'a [AggregatedMechanism],
    profile: &'a AdvertiserProfile,
}

impl<'a> RoiCompositeOracle<'a> {
    pub fn new(parts: &'a [AggregatedMechanism], profile: &'a AdvertiserProfile) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Domain("composite oracle needs at least one part".into()));
        }
        for part in parts {
            if part.report_kind() != ReportKind::RoiFloor {
                return Err(Error::Domain("composite parts must be ROI mechanisms".into()));
            }
            if part.goal() != profile.goal {
                return Err(Error::Domain("mechanism and profile goals differ".into()));
            }
        }
        Ok(RoiCompositeOracle { parts, profile })
    }
}

impl ReportOracle for RoiCompositeOracle<'_> {
    fn evaluate(&self, report: f64) -> Result<SweepEval> {
        let mut conversions = 0.0;
        let mut spend = 0.0;
        let mut revenue = 0.0;
        for part in self.parts {
            conversions += part.cv_of_report(report)?;
            spend += part.spend_of_report(report)?;
            revenue += part.revenue_of_report(report)?;
        }
        let satisfied = constraint_satisfied(self.profile.constraint, conversions, spend, revenue);
        let utility = if conversions <= 0.0 {
            0.0
        } else if satisfied {
            revenue - self.profile.goal.indicator() * spend
        } else {
            -spend
        };
        let delivered = (spend > 0.0).then(|| (revenue - spend) / spend);
        Ok(SweepEval { utility, delivered, satisfied, violations: 0 })
    }
}

/// How far the truth may fall short of the best report before IC fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    Absolute(f64),
    /// Fraction of |U(truth)|; absorbs controller noise in simulated audits.
    RelativeToTruth(f64),
}

impl Tolerance {
    pub fn resolve(self, truth_utility: f64) -> f64 {
        match self {
            Tolerance::Absolute(tol) => tol,
            Tolerance::RelativeToTruth(frac) => frac * truth_utility.abs(),
        }
    }
}

/// One swept report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub report: f64,
    pub seed: Option<u64>,
    pub eval: SweepEval,
}

/// Result of a misreport sweep.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub truth: f64,
    pub rows: Vec<SweepRow>,
    pub argmax_report: f64,
    pub truth_utility: f64,
    pub best_utility: f64,
    /// `U(argmax) - U(truth)`, non-negative by construction.
    pub gap: f64,
    pub tolerance: f64,
    pub ic: bool,
    pub ir: bool,
    /// Rank of the truth when reports are ordered by utility (1 = best).
    pub truth_rank: usize,
    pub notes: Vec<String>,
}

/// Evenly spaced report grid with the truth inserted exactly.
pub fn report_grid(lo: f64, hi: f64, points: usize, truth: f64) -> Result<Vec<f64>> {
    if !(truth >= lo && truth <= hi) {
        return Err(Error::Domain(format!(
            "truth {truth} outside the sweep range [{lo}, {hi}]"
        )));
    }
    let mut grid = crate::curve::linspace(lo, hi, points)?;
    if !grid.contains(&truth) {
        grid.push(truth);
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    Ok(grid)
}

/// Sweep a report grid and compare truth-telling against the best misreport.
///
/// The grid must hold at least 20 points and contain the truth exactly. The
/// verdict is `ic` when the truth's utility is within tolerance of the grid
/// maximum and `ir` when the truth's utility is non-negative.
pub fn ic_audit(
    oracle: &dyn ReportOracle,
    truth: f64,
    grid: &[f64],
    tolerance: Tolerance,
    seed: Option<u64>,
) -> Result<AuditReport> {
    if grid.len() < 20 {
        return Err(Error::Domain(format!(
            "audit grid needs at least 20 points, got {}",
            grid.len()
        )));
    }
    if !grid.contains(&truth) {
        return Err(Error::Domain(format!("audit grid must contain the truth {truth}")));
    }
    for window in grid.windows(2) {
        if !(window[0] < window[1]) {
            return Err(Error::Domain("audit grid must be strictly increasing".into()));
        }
    }

    let mut rows = Vec::with_capacity(grid.len());
    for &report in grid {
        let eval = oracle.evaluate(report)?;
        rows.push(SweepRow { report, seed, eval });
    }

    let truth_utility = rows
        .iter()
        .find(|row| row.report == truth)
        .map(|row| row.eval.utility)
        .expect("truth is in the grid");
    let best = rows
        .iter()
        .max_by(|a, b| a.eval.utility.partial_cmp(&b.eval.utility).unwrap())
        .expect("grid is non-empty");
    let argmax_report = best.report;
    let best_utility = best.eval.utility;
    let gap = best_utility - truth_utility;
    let truth_rank = 1 + rows.iter().filter(|row| row.eval.utility > truth_utility).count();
    let tolerance = tolerance.resolve(truth_utility);

    let mut notes = Vec::new();
    let total_violations: u32 = rows.iter().map(|row| row.eval.violations).sum();
    if total_violations > 0 {
        notes.push(format!("{total_violations} tolerance-band violations across the sweep"));
    }
    if !rows.iter().find(|row| row.report == truth).unwrap().eval.satisfied {
        notes.push("truthful report violates the constraint".into());
    }

    Ok(AuditReport {
        truth,
        rows,
        argmax_report,
        truth_utility,
        best_utility,
        gap,
        tolerance,
        ic: gap <= tolerance,
        ir: truth_utility >= 0.0,
        truth_rank,
        notes,
    })
}

/// The bundled example market 1: two one-slot requests with unit ctr and cvr,
/// ranked and priced by reported CPA. Competitor reports are 5, 2, 1 in the
/// first request and 1 in the second.
pub fn example1_scenario(profile: AdvertiserProfile) -> Result<Scenario> {
    parse_scenario_fixture(
        "request.0.slots = 1.0\n\
         request.0.quality.0 = 1.0\n\
         request.0.cvr.0 = 1.0\n\
         request.0.quality.1 = 1.0\n\
         request.0.cvr.1 = 1.0\n\
         request.0.quality.2 = 1.0\n\
         request.0.cvr.2 = 1.0\n\
         request.0.quality.3 = 1.0\n\
         request.0.cvr.3 = 1.0\n\
         request.0.bid.1 = 5.0\n\
         request.0.bid.2 = 2.0\n\
         request.0.bid.3 = 1.0\n\
         request.1.slots = 1.0\n\
         request.1.quality.0 = 1.0\n\
         request.1.cvr.0 = 1.0\n\
         request.1.quality.3 = 1.0\n\
         request.1.cvr.3 = 1.0\n\
         request.1.bid.3 = 1.0\n",
        profile,
    )
}

fn example1_profile(value: f64, truth: f64) -> Result<AdvertiserProfile> {
    AdvertiserProfile::constant_value(AUTO_BIDDER, value, Constraint::TargetCpa(truth), Goal::Profit)
}

fn spa_episode(scenario: &Scenario, profile: &AdvertiserProfile, report: f64) -> Result<EpisodeSummary> {
    let mut records = Vec::new();
    let mut classes = Vec::new();
    for (request, competitor_bids) in scenario.requests.iter().zip(&scenario.competitor_bids) {
        let mut bids = competitor_bids.clone();
        bids.insert(AUTO_BIDDER, report);
        let outcome = run_gsp_auction(request, &bids, scenario.reserve)?;
        records.push(compute_request_delivery(&outcome, request, AUTO_BIDDER)?);
        classes.push(request.value_class);
    }
    aggregate_episode(&records, profile, &classes)
}

/// Audits the example market 1, where the submitted report is bid directly.
pub struct CpaSpaOracle {
    scenario: Scenario,
    profile: AdvertiserProfile,
}

impl CpaSpaOracle {
    pub fn new(value: f64, truth: f64) -> Result<CpaSpaOracle> {
        let profile = example1_profile(value, truth)?;
        let scenario = example1_scenario(profile.clone())?;
        Ok(CpaSpaOracle { scenario, profile })
    }
}

impl ReportOracle for CpaSpaOracle {
    fn evaluate(&self, report: f64) -> Result<SweepEval> {
        let summary = spa_episode(&self.scenario, &self.profile, report)?;
        Ok(SweepEval {
            utility: summary.utility,
            delivered: summary.delivered_cpa(),
            satisfied: summary.constraint_satisfied,
            violations: 0,
        })
    }
}

/// One row of the example-1 comparison table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Row {
    pub report: f64,
    pub wins: u32,
    pub conversions: f64,
    pub spend: f64,
    pub delivered_cpa: f64,
    pub profit: f64,
}

/// Truthful-versus-overbid comparison on the example market 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Table {
    pub value: f64,
    pub truth: f64,
    pub truthful: Example1Row,
    pub overbid: Example1Row,
    /// Overbid profit minus truthful profit; `value - 5` whenever both rows
    /// stay under the true cap.
    pub gain: f64,
}

/// Reproduce the example market 1 comparison for value `v` (truth fixed at 4):
/// reporting truthfully wins only the second request; overbidding past the
/// strongest competitor wins both and raises profit by `v - 5` while the
/// delivered CPA stays under the cap.
pub fn example1_comparison(value: f64) -> Result<Example1Table> {
    let truth = 4.0;
    let profile = example1_profile(value, truth)?;
    let scenario = example1_scenario(profile.clone())?;
    let overbid_report = 6.0;

    let mut rows = Vec::new();
    for report in [truth, overbid_report] {
        let summary = spa_episode(&scenario, &profile, report)?;
        rows.push(Example1Row {
            report,
            wins: summary.conversions.round() as u32,
            conversions: summary.conversions,
            spend: summary.spend,
            delivered_cpa: summary.delivered_cpa().unwrap_or(0.0),
            profit: summary.utility,
        });
    }
    let truthful = rows[0];
    let overbid = rows[1];
    Ok(Example1Table {
        value,
        truth,
        truthful,
        overbid,
        gain: overbid.profit - truthful.profit,
    })
}

/// A profitable misreport found for a bounded conversion promise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisreportCase {
    pub value: f64,
    pub truth: f64,
    pub best_report: f64,
    pub truth_utility: f64,
    pub best_utility: f64,
}

/// Demonstrates that a bounded, value-independent conversion curve paired with
/// `cpa(t) = t` cannot be truthful for profit maximizers: for each `(v, t)`
/// pair the profit `(v - t') * cv(t')` is maximized over the curve's knots and
/// every pair whose truthful utility is beaten is returned.
pub fn bounded_cv_counterexamples(cv: &Curve, pairs: &[(f64, f64)]) -> Result<Vec<MisreportCase>> {
    for (x, y) in cv.knots() {
        if !(*y > 0.0) {
            return Err(Error::Domain(format!("conversion curve must be positive, got {y} at {x}")));
        }
    }
    let mut cases = Vec::new();
    for &(value, truth) in pairs {
        if !(truth > 0.0 && truth < value) {
            return Err(Error::Domain(format!("need 0 < t < v, got t={truth}, v={value}")));
        }
        let truth_utility = (value - truth) * cv.eval(truth)?;
        let mut best_report = truth;
        let mut best_utility = truth_utility;
        for &(report, conversions) in cv.knots() {
            if report >= value {
                continue;
            }
            let utility = (value - report) * conversions;
            if utility > best_utility {
                best_utility = utility;
                best_report = report;
            }
        }
        if best_utility > truth_utility + 1e-12 {
            cases.push(MisreportCase { value, truth, best_report, truth_utility, best_utility });
        }
    }
    Ok(cases)
}

/// Outcome of pairing an ROI-floor episode with its CPA-cap transform.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub gamma: f64,
    pub tcpa: f64,
    pub tcpa_summary: EpisodeSummary,
    pub troi_summary: EpisodeSummary,
    pub flags_equal: bool,
    /// Relative gap between the CPA cap and the ROI run's effective CPA bound.
    pub bound_rel_diff: f64,
    pub equivalent: bool,
}

fn table1_episode(
    scenario: &Scenario,
    profile: &AdvertiserProfile,
    params: StrategyParams,
) -> Result<EpisodeSummary> {
    let mut records: Vec<DeliveryRecord> = Vec::new();
    let mut classes: Vec<ValueClass> = Vec::new();
    for (request, competitor_bids) in scenario.requests.iter().zip(&scenario.competitor_bids) {
        let value = profile.value_for(request.value_class)?;
        let cvr = request.cvr[&profile.id];
        let bid = optimal_bid(profile.goal, profile.constraint, value, cvr, params)?;
        let mut bids = competitor_bids.clone();
        bids.insert(profile.id, bid);
        let outcome = run_gsp_auction(request, &bids, scenario.reserve)?;
        records.push(compute_request_delivery(&outcome, request, profile.id)?);
        classes.push(request.value_class);
    }
    if records.is_empty() {
        return Ok(EpisodeSummary::zero());
    }
    aggregate_episode(&records, profile, &classes)
}

/// Run one scenario under an ROI floor and under its CPA-cap transform
/// `t = v / (1 + gamma)` with the matched bid parameters (`m = n` makes the
/// two bid formulas identical for constant value), and compare the constraint
/// verdicts and effective bounds.
pub fn cpa_roi_equivalence_check(
    scenario: &Scenario,
    gamma: f64,
    params: StrategyParams,
) -> Result<EquivalenceReport> {
    let value = scenario.auto_bidder.single_value()?;
    let tcpa = crate::market::roi_to_tcpa(value, gamma)?;
    let goal = scenario.auto_bidder.goal;

    let troi_profile =
        AdvertiserProfile::constant_value(scenario.auto_bidder.id, value, Constraint::TargetRoi(gamma), goal)?;
    let tcpa_profile =
        AdvertiserProfile::constant_value(scenario.auto_bidder.id, value, Constraint::TargetCpa(tcpa), goal)?;
    let matched = StrategyParams { m: params.n, n: params.n };

    let troi_summary = table1_episode(scenario, &troi_profile, matched)?;
    let tcpa_summary = table1_episode(scenario, &tcpa_profile, matched)?;

    let flags_equal = troi_summary.constraint_satisfied == tcpa_summary.constraint_satisfied;
    // The ROI run's effective per-conversion bound.
    let troi_bound = if troi_summary.conversions > 0.0 {
        troi_summary.revenue / troi_summary.conversions / (1.0 + gamma)
    } else {
        tcpa
    };
    let bound_rel_diff = (troi_bound - tcpa).abs() / tcpa;
    Ok(EquivalenceReport {
        gamma,
        tcpa,
        tcpa_summary,
        troi_summary,
        flags_equal,
        bound_rel_diff,
        equivalent: flags_equal && bound_rel_diff <= 0.01,
    })
}
