//! Flat key-value configuration files.
//!
//! The on-disk format is one `key = value` pair per line with dotted section
//! prefixes (`scenario.requests = 10000`). `#` starts a comment. The format is
//! deliberately flat so experiment folders diff cleanly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::market::{AdvertiserId, AdvertiserProfile, Constraint, Goal, ValueClass};
use crate::scenario::ScenarioConfig;

/// Parsed key-value file with typed accessors. Keys read are tracked so the
/// caller can reject typos.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<KvMap> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn load(path: &Path) -> Result<KvMap> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        KvMap::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a number")))
            })
            .transpose()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64(key)?.unwrap_or(default))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.f64(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not an integer")))
            })
            .transpose()
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.u64(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(Error::Config(format!("key `{key}`: `{other}` is not a bool"))),
        }
    }

    /// Comma-separated list of numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|s| {
                s.split(',')
                    .map(|part| {
                        part.trim().parse::<f64>().map_err(|_| {
                            Error::Config(format!("key `{key}`: `{part}` is not a number"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Keys that start with `prefix`.
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<&str> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .map(|k| k.as_str())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fully parsed experiment configuration shared by the CLI subcommands.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub scenario: ScenarioConfig,
    pub scenario_fixture: Option<String>,
    pub advertiser: AdvertiserProfile,
    pub param_m: f64,
    pub param_n: f64,
    pub mechanism: MechanismConfig,
    pub control: crate::control::ControlConfig,
    pub audit: AuditConfig,
    pub simulate_report: Option<f64>,
}

/// Mechanism construction settings.
#[derive(Debug, Clone)]
pub struct MechanismConfig {
    pub kind: String,
    pub source: Option<String>,
    pub margin: f64,
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub grid_points: usize,
    pub pricing: String,
    pub weights: Option<Vec<f64>>,
}

/// Audit sweep settings.
#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub mode: String,
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub grid_points: usize,
    pub seeds: u64,
    pub tolerance: Option<f64>,
    pub expect_ic: bool,
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvMap) -> Result<ExperimentConfig> {
        let seed = kv.u64_or("seed", 0)?;
        let output_dir = kv.get("output.dir").unwrap_or("out").to_string();

        let values = kv.f64_list("scenario.values")?.unwrap_or_else(|| vec![10.0]);
        let value_weights = kv
            .f64_list("scenario.value_weights")?
            .unwrap_or_else(|| vec![1.0; values.len()]);
        let scenario = ScenarioConfig {
            requests: kv.u64_or("scenario.requests", 1000)? as usize,
            slots: (
                kv.u64_or("scenario.slots.min", 1)? as u32,
                kv.u64_or("scenario.slots.max", 1)? as u32,
            ),
            slot_decay: (
                kv.f64_or("scenario.slot_decay.min", 0.4)?,
                kv.f64_or("scenario.slot_decay.max", 0.8)?,
            ),
            competitor_pool: kv.u64_or("scenario.competitors.pool", 8)? as u32,
            competitors: (
                kv.u64_or("scenario.competitors.min", 2)? as u32,
                kv.u64_or("scenario.competitors.max", 5)? as u32,
            ),
            bid_range: (
                kv.f64_or("scenario.bid.min", 0.3)?,
                kv.f64_or("scenario.bid.max", 2.2)?,
            ),
            bid_jitter: kv.f64_or("scenario.bid.jitter", 0.1)?,
            quality_range: (
                kv.f64_or("scenario.quality.min", 0.6)?,
                kv.f64_or("scenario.quality.max", 1.0)?,
            ),
            cvr_range: (
                kv.f64_or("scenario.cvr.min", 0.4)?,
                kv.f64_or("scenario.cvr.max", 0.9)?,
            ),
            values,
            value_weights,
            reserve: kv.f64_or("scenario.reserve", 0.0)?,
        };
        scenario.validate()?;

        let goal = Goal::parse(kv.get("advertiser.goal").unwrap_or("profit"))?;
        let constraint_spec = kv.require("advertiser.constraint")?;
        let constraint = parse_constraint(constraint_spec)?;
        let mut value_map = BTreeMap::new();
        for (i, v) in scenario.values.iter().enumerate() {
            value_map.insert(ValueClass(i as u32), *v);
        }
        let advertiser = AdvertiserProfile::new(AdvertiserId(0), value_map, constraint, goal, true)?;

        let mechanism = MechanismConfig {
            kind: kv.get("mechanism.kind").unwrap_or("tcpa-identity").to_string(),
            source: kv.get("mechanism.source").map(str::to_string),
            margin: kv.f64_or("mechanism.margin", 0.9)?,
            grid_min: kv.f64("mechanism.grid.min")?,
            grid_max: kv.f64("mechanism.grid.max")?,
            grid_points: kv.u64_or("mechanism.grid.points", 100)? as usize,
            pricing: kv.get("mechanism.pricing").unwrap_or("proportional").to_string(),
            weights: kv.f64_list("mechanism.weights")?,
        };

        let control = crate::control::ControlConfig {
            kp: kv.f64_or("control.kp", 0.2)?,
            ki: kv.f64_or("control.ki", 0.01)?,
            kd: kv.f64_or("control.kd", 0.0)?,
            alpha_ratio: kv.f64_or("control.alpha_ratio", 0.25)?,
            beta_ratio: kv.f64_or("control.beta_ratio", 0.5)?,
            mult_min: kv.f64_or("control.mult_min", 0.2)?,
            mult_max: kv.f64_or("control.mult_max", 5.0)?,
            participation_min: kv.f64_or("control.participation_min", 0.05)?,
            cpa_headroom: kv.f64_or("control.cpa_headroom", 0.01)?,
        };
        control.validate()?;

        let audit = AuditConfig {
            mode: kv.get("audit.mode").unwrap_or("closed_form").to_string(),
            grid_min: kv.f64("audit.grid.min")?,
            grid_max: kv.f64("audit.grid.max")?,
            grid_points: kv.u64_or("audit.grid.points", 50)? as usize,
            seeds: kv.u64_or("audit.seeds", 5)?,
            tolerance: kv.f64("audit.tolerance")?,
            expect_ic: kv.bool_or("audit.expect_ic", false)?,
        };

        Ok(ExperimentConfig {
            seed,
            output_dir,
            scenario,
            scenario_fixture: kv.get("scenario.fixture").map(str::to_string),
            advertiser,
            param_m: kv.f64_or("bidding.m", 1.0)?,
            param_n: kv.f64_or("bidding.n", 1.0)?,
            mechanism,
            control,
            audit,
            simulate_report: kv.f64("simulate.report")?,
        })
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::from_kv(&KvMap::load(path)?)
    }
}

/// Parse `tcpa:4.0` or `troi:1.0`.
pub fn parse_constraint(spec: &str) -> Result<Constraint> {
    let Some((kind, value)) = spec.split_once(':') else {
        return Err(Error::Config(format!(
            "constraint must look like `tcpa:4.0` or `troi:1.0`, got `{spec}`"
        )));
    };
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("constraint value `{value}` is not a number")))?;
    match kind.trim() {
        "tcpa" => Ok(Constraint::TargetCpa(value)),
        "troi" => Ok(Constraint::TargetRoi(value)),
        other => Err(Error::Config(format!("unknown constraint kind `{other}`"))),
    }
}
