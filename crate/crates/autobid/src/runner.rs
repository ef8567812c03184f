//! Experiment runner: binds a configuration file to scenarios, mechanisms,
//! episodes, and audits, and persists the artifacts.
//!
//! All artifact writers format floats shortest-round-trip and iterate sorted
//! containers, so a fixed config and seed produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audit::{
    ic_audit, AuditReport, ClosedFormOracle, CpaSpaOracle, SimulatedOracle,
    Tolerance,
};

use crate::config::ExperimentConfig;
use crate::control::run_episode;
use crate::curve::{linspace, Curve};
use crate::error::{Error, Result};
use crate::market::{Constraint, ValueClass};
use crate::mechanism::{
    calibrate_feasible_cv, make_g_function, make_submarket_cv, AggregatedMechanism,
    LinearDecomposition, Pricing,
};
use crate::scenario::{generate_scenario, parse_scenario_fixture, Scenario};

/// CLI subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Calibrate,
    Audit,
    ReproExample1,
}

impl Subcommand {
    pub fn parse(name: &str) -> Result<Subcommand> {
        match name {
            "simulate" => Ok(Subcommand::Simulate),
            "calibrate" => Ok(Subcommand::Calibrate),
            "audit" => Ok(Subcommand::Audit),
            "repro-example1" => Ok(Subcommand::ReproExample1),
            other => Err(Error::Config(format!("unknown subcommand `{other}`"))),
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub expect_ic: Option<bool>,
    pub param_m: Option<f64>,
    pub param_n: Option<f64>,
    pub seed: Option<u64>,
}

/// Exit status: 0 ok, 2 validation error, 3 failed --expect-ic audit.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_AUDIT_NOT_IC: i32 = 3;

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "-".to_string(),
    }
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn build_scenario(config: &ExperimentConfig, seed: u64) -> Result<Scenario> {
    match &config.scenario_fixture {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read fixture {path}: {e}")))?;
            parse_scenario_fixture(&text, config.advertiser.clone())
        }
        None => generate_scenario(&config.scenario, config.advertiser.clone(), seed),
    }
}

fn default_grid_bounds(config: &ExperimentConfig) -> Result<(f64, f64)> {
    match config.advertiser.constraint {
        Constraint::TargetCpa(t) => {
            let v = config.advertiser.single_value()?;
            Ok((0.2 * t.min(v), (1.5 * t).min(0.95 * v)))
        }
        Constraint::TargetRoi(g) => Ok((0.25 * g, 3.0 * g)),
    }
}

/// Build the mechanism a config asks for, importing or calibrating as needed.
pub fn build_mechanism(
    config: &ExperimentConfig,
    scenario: &Scenario,
) -> Result<AggregatedMechanism> {
    if let Some(source) = &config.mechanism.source {
        let text = std::fs::read_to_string(source)
            .map_err(|e| Error::Config(format!("cannot read mechanism {source}: {e}")))?;
        return AggregatedMechanism::from_text(&text);
    }
    let goal = config.advertiser.goal;
    let (default_lo, default_hi) = default_grid_bounds(config)?;
    let lo = config.mechanism.grid_min.unwrap_or(default_lo);
    let hi = config.mechanism.grid_max.unwrap_or(default_hi);
    let points = config.mechanism.grid_points;

    match config.mechanism.kind.as_str() {
        "tcpa-identity" => {
            let value = config.advertiser.single_value()?;
            let grid = linspace(lo, hi, points)?;
            let frontier = calibrate_feasible_cv(scenario, &config.advertiser, &grid)?;
            let g = make_g_function(&frontier, value, goal, config.mechanism.margin)?;
            AggregatedMechanism::tcpa_identity(value, goal, g)
        }
        "roi-submarket" => {
            let value = config.advertiser.single_value()?;
            let gamma_grid = linspace(lo, hi, points)?;
            let frontier = roi_frontier(scenario, config, ValueClass(0), value, &gamma_grid)?;
            let cv = make_submarket_cv(&frontier, goal, config.mechanism.margin)?;
            AggregatedMechanism::roi_submarket(ValueClass(0), value, goal, cv)
        }
        "roi-decomposed" => {
            let gamma_grid = linspace(lo, hi, points)?;
            let mut weights = std::collections::BTreeMap::new();
            let weight_list = config.mechanism.weights.clone().ok_or_else(|| {
                Error::Config("mechanism.weights is required for roi-decomposed".into())
            })?;
            if weight_list.len() != config.advertiser.values.len() {
                return Err(Error::Config(
                    "mechanism.weights must match the number of value classes".into(),
                ));
            }
            for (i, w) in weight_list.iter().enumerate() {
                weights.insert(ValueClass(i as u32), *w);
            }
            // Cumulative frontier: sum of per-class ceilings at each floor.
            let mut total = vec![0.0; gamma_grid.len()];
            for (class, value) in config.advertiser.values.clone() {
                let frontier = roi_frontier(scenario, config, class, value, &gamma_grid)?;
                for (i, (_, cv)) in frontier.knots().iter().enumerate() {
                    total[i] += cv;
                }
            }
            let frontier = Curve::from_grid(&gamma_grid, &total)?;
            let cv = make_submarket_cv(&frontier, goal, config.mechanism.margin)?;
            AggregatedMechanism::roi_decomposed(
                config.advertiser.values.clone(),
                LinearDecomposition::new(weights)?,
                cv,
                goal,
                Pricing::parse(&config.mechanism.pricing)?,
            )
        }
        other => Err(Error::Config(format!(
            "cannot calibrate mechanism kind `{other}` (import it via mechanism.source instead)"
        ))),
    }
}

/// Per-class conversion ceiling over ROI floors, via the CPA transform
/// `t = v_h / (1 + gamma)` on the class sub-market.
fn roi_frontier(
    scenario: &Scenario,
    config: &ExperimentConfig,
    class: ValueClass,
    value: f64,
    gamma_grid: &[f64],
) -> Result<Curve> {
    let sub = scenario.filter_by_class(class);
    // Ascending gamma maps to descending CPA caps.
    let mut caps: Vec<f64> = gamma_grid.iter().map(|g| value / (1.0 + g)).collect();
    caps.reverse();
    let profile = crate::market::AdvertiserProfile::constant_value(
        config.advertiser.id,
        value,
        Constraint::TargetCpa(caps[caps.len() - 1] * 0.999),
        config.advertiser.goal,
    )?;
    let frontier_by_cap = calibrate_feasible_cv(&sub, &profile, &caps)?;
    let mut cvs: Vec<f64> = Vec::with_capacity(gamma_grid.len());
    for gamma in gamma_grid {
        cvs.push(frontier_by_cap.eval(value / (1.0 + gamma))?);
    }
    Curve::from_grid(gamma_grid, &cvs)
}

fn episode_log_csv(logs: &[crate::control::RequestLog]) -> String {
    let mut out = String::from("request_id,slot,bid,price,cv_j,spend,cumulative_cpa\n");
    for row in logs {
        let slot = match row.slot {
            Some(s) => s.to_string(),
            None => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.request_id,
            slot,
            row.bid,
            row.price,
            row.conversions,
            row.spend,
            fmt_opt(row.cumulative_cpa),
        );
    }
    out
}

fn summary_text(outcome: &crate::control::EpisodeOutcome, report: f64) -> String {
    let s = &outcome.summary;
    let mut out = String::new();
    let _ = writeln!(out, "episode.report = {report}");
    let _ = writeln!(out, "episode.requests = {}", outcome.logs.len());
    let _ = writeln!(out, "episode.conversions = {}", s.conversions);
    let _ = writeln!(out, "episode.spend = {}", s.spend);
    let _ = writeln!(out, "episode.revenue = {}", s.revenue);
    let _ = writeln!(out, "episode.cpa = {}", fmt_opt(s.delivered_cpa()));
    let _ = writeln!(out, "episode.roi = {}", fmt_opt(s.delivered_roi()));
    let _ = writeln!(out, "episode.utility = {}", s.utility);
    let _ = writeln!(out, "episode.constraint_satisfied = {}", s.constraint_satisfied);
    let _ = writeln!(out, "episode.violations = {}", outcome.violations.len());
    let _ = writeln!(out, "promise.cpa = {}", outcome.promised_cpa);
    let _ = writeln!(out, "promise.cv = {}", outcome.promised_cv);
    out
}

fn audit_rows_csv(reports: &[AuditReport]) -> String {
    let mut out = String::from("report,seed,utility,delivered,constraint_satisfied,violations\n");
    // Deterministic order: by report, then seed.
    let mut rows: Vec<&crate::audit::SweepRow> =
        reports.iter().flat_map(|r| r.rows.iter()).collect();
    rows.sort_by(|a, b| {
        a.report
            .partial_cmp(&b.report)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    for row in rows {
        let seed = match row.seed {
            Some(s) => s.to_string(),
            None => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.report,
            seed,
            row.eval.utility,
            fmt_opt(row.eval.delivered),
            row.eval.satisfied,
            row.eval.violations,
        );
    }
    out
}

fn audit_summary_text(reports: &[AuditReport]) -> String {
    let ic = reports.iter().all(|r| r.ic);
    let ir = reports.iter().all(|r| r.ir);
    let worst = reports
        .iter()
        .max_by(|a, b| a.gap.partial_cmp(&b.gap).unwrap())
        .expect("at least one audit");
    let mut out = String::new();
    let _ = writeln!(out, "audit.truth = {}", worst.truth);
    let _ = writeln!(out, "audit.sweeps = {}", reports.len());
    let _ = writeln!(out, "audit.ic = {ic}");
    let _ = writeln!(out, "audit.ir = {ir}");
    let _ = writeln!(out, "audit.worst_gap = {}", worst.gap);
    let _ = writeln!(out, "audit.worst_gap_argmax = {}", worst.argmax_report);
    let _ = writeln!(out, "audit.worst_gap_truth_utility = {}", worst.truth_utility);
    let _ = writeln!(out, "audit.tolerance = {}", worst.tolerance);
    for (i, report) in reports.iter().enumerate() {
        let _ = writeln!(
            out,
            "audit.sweep.{i} = argmax {}, gap {}, truth_rank {}, ic {}, ir {}",
            report.argmax_report, report.gap, report.truth_rank, report.ic, report.ir
        );
        for note in &report.notes {
            let _ = writeln!(out, "audit.sweep.{i}.note = {note}");
        }
    }
    out
}

fn example1_csv(table: &crate::audit::Example1Table) -> String {
    let mut out = String::from("row,report,wins,conversions,spend,delivered_cpa,profit\n");
    for (name, row) in [("truthful", table.truthful), ("overbid", table.overbid)] {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            row.report, row.wins, row.conversions, row.spend, row.delivered_cpa, row.profit
        );
    }
    let _ = writeln!(out, "gain,,,,,,{}", table.gain);
    out
}

/// Execute a subcommand against a config file. Returns the process exit code
/// and writes artifacts under the config's output directory.
pub fn execute(sub: Subcommand, config_path: &Path, overrides: Overrides) -> Result<i32> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(m) = overrides.param_m {
        config.param_m = m;
    }
    if let Some(n) = overrides.param_n {
        config.param_n = n;
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    let expect_ic = overrides.expect_ic.unwrap_or(config.audit.expect_ic);
    let out_dir = PathBuf::from(&config.output_dir);

    match sub {
        Subcommand::Simulate => {
            let scenario = build_scenario(&config, config.seed)?;
            let mechanism = build_mechanism(&config, &scenario)?;
            let report = config
                .simulate_report
                .unwrap_or_else(|| config.advertiser.constraint.value());
            let outcome =
                run_episode(&scenario, &config.advertiser, &mechanism, report, &config.control)?;
            write_artifact(&out_dir, "episode.csv", &episode_log_csv(&outcome.logs))?;
            write_artifact(&out_dir, "summary.txt", &summary_text(&outcome, report))?;
            println!(
                "simulate: {} requests, cpa {}, cv {}, utility {}, satisfied {}",
                outcome.logs.len(),
                fmt_opt(outcome.summary.delivered_cpa()),
                outcome.summary.conversions,
                outcome.summary.utility,
                outcome.summary.constraint_satisfied
            );
            Ok(EXIT_OK)
        }
        Subcommand::Calibrate => {
            let scenario = build_scenario(&config, config.seed)?;
            let mechanism = build_mechanism(&config, &scenario)?;
            // Persist the measured ceiling alongside the mechanism.
            let (lo, hi) = mechanism.domain();
            let mut frontier_csv = String::from("report,promised_cv\n");
            for &report in linspace(lo, hi, config.mechanism.grid_points)?.iter() {
                let _ = writeln!(frontier_csv, "{},{}", report, mechanism.cv_of_report(report)?);
            }
            write_artifact(&out_dir, "frontier.csv", &frontier_csv)?;
            write_artifact(&out_dir, "mechanism.txt", &mechanism.to_text())?;
            println!(
                "calibrate: {} over [{}, {}] written to {}",
                mechanism.kind_name(),
                lo,
                hi,
                out_dir.display()
            );
            Ok(EXIT_OK)
        }
        Subcommand::Audit => {
            let truth = config.advertiser.constraint.value();
            let reports = run_audit(&config, truth)?;
            write_artifact(&out_dir, "audit.csv", &audit_rows_csv(&reports))?;
            write_artifact(&out_dir, "audit_summary.txt", &audit_summary_text(&reports))?;
            let ic = reports.iter().all(|r| r.ic);
            let ir = reports.iter().all(|r| r.ir);
            println!(
                "audit: ic {ic}, ir {ir}, worst gap {}",
                reports
                    .iter()
                    .map(|r| r.gap)
                    .fold(f64::NEG_INFINITY, f64::max)
            );
            if expect_ic && !ic {
                return Ok(EXIT_AUDIT_NOT_IC);
            }
            Ok(EXIT_OK)
        }
        Subcommand::ReproExample1 => {
            let value = config.advertiser.single_value().unwrap_or(10.0);
            let table = crate::audit::example1_comparison(value)?;
            write_artifact(&out_dir, "example1.csv", &example1_csv(&table))?;
            println!(
                "example 1 (v = {value}): truthful profit {} at cpa {}, overbid profit {} at cpa {}, gain {}",
                table.truthful.profit,
                table.truthful.delivered_cpa,
                table.overbid.profit,
                table.overbid.delivered_cpa,
                table.gain
            );
            Ok(EXIT_OK)
        }
    }
}

fn audit_grid(config: &ExperimentConfig, truth: f64) -> Result<Vec<f64>> {
    let (default_lo, default_hi) = default_grid_bounds(config)?;
    let lo = config.audit.grid_min.unwrap_or(default_lo);
    let hi = config.audit.grid_max.unwrap_or(default_hi);
    crate::audit::report_grid(lo, hi, config.audit.grid_points, truth)
}

fn run_audit(config: &ExperimentConfig, truth: f64) -> Result<Vec<AuditReport>> {
    let grid = audit_grid(config, truth)?;
    match (config.mechanism.kind.as_str(), config.audit.mode.as_str()) {
        ("cpa-spa", _) => {
            let value = config.advertiser.single_value()?;
            let oracle = CpaSpaOracle::new(value, truth)?;
            let tolerance = Tolerance::Absolute(config.audit.tolerance.unwrap_or(1e-9));
            Ok(vec![ic_audit(&oracle, truth, &grid, tolerance, None)?])
        }
        (_, "closed_form") => {
            let scenario = build_scenario(config, config.seed)?;
            let mechanism = build_mechanism(config, &scenario)?;
            let oracle = ClosedFormOracle::new(&mechanism, &config.advertiser)?;
            let tolerance = Tolerance::Absolute(config.audit.tolerance.unwrap_or(1e-9));
            Ok(vec![ic_audit(&oracle, truth, &grid, tolerance, None)?])
        }
        (_, "simulated") => {
            // One mechanism calibrated on the base scenario, audited against
            // several competitor draws.
            let base = build_scenario(config, config.seed)?;
            let mechanism = build_mechanism(config, &base)?;
            let tolerance = Tolerance::RelativeToTruth(config.audit.tolerance.unwrap_or(0.03));
            let mut reports = Vec::new();
            for k in 0..config.audit.seeds.max(1) {
                let draw_seed = crate::rng::substream(config.seed, &format!("audit.seed.{k}"))
                    .next_u64();
                let scenario = build_scenario(config, draw_seed)?;
                let oracle =
                    SimulatedOracle::new(&mechanism, &config.advertiser, &scenario, &config.control)?;
                reports.push(ic_audit(&oracle, truth, &grid, tolerance, Some(k))?);
            }
            Ok(reports)
        }
        (_, other) => Err(Error::Config(format!("unknown audit mode `{other}`"))),
    }
}

use rand::RngCore;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommand_names() {
        assert_eq!(Subcommand::parse("simulate").unwrap(), Subcommand::Simulate);
        assert_eq!(Subcommand::parse("repro-example1").unwrap(), Subcommand::ReproExample1);
        assert!(Subcommand::parse("serve").is_err());
    }
}
