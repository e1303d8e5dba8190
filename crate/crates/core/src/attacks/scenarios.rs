//! Scenario batch files.
//!
//! One scenario per line: `kind pushed_item target [key=value ...]`, where
//! target is `user:<id>`, `segment:<item>` or `general`. Blank lines and
//! `#` comments are ignored.

use super::{AttackConfig, AttackKind, Scenario, Schedule, Target};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: AttackKind,
    pub scenario: Scenario,
    pub overrides: Vec<(String, String)>,
}

impl ScenarioSpec {
    /// `base` with this line's kind and overrides applied.
    pub fn config(&self, base: &AttackConfig) -> Result<AttackConfig> {
        let mut c = base.clone();
        c.kind = self.kind;
        for (key, value) in &self.overrides {
            let bad = || Error::Parse {
                line: 0,
                message: format!("bad value {value:?} for {key}"),
            };
            let int = || value.parse::<usize>().map_err(|_| bad());
            let real = || value.parse::<f64>().map_err(|_| bad());
            match key.as_str() {
                "max_steps" => c.max_steps = int()?,
                "epsilon" => c.epsilon = real()?,
                "d_prime" => c.d_prime = int()?,
                "delta" => c.delta = real()?,
                "rank_delta" => c.rank_delta = real()?,
                "percentile_p" => c.percentile_p = real()?,
                "n_population" => c.n_population = int()?,
                "blend_epsilon" => c.blend_epsilon = real()?,
                "blend_sweep" => c.blend_sweep = value.parse().map_err(|_| bad())?,
                "resample_retries" => c.resample_retries = int()?,
                "surface_budget" => c.surface_budget = int()?,
                "schedule" => {
                    c.schedule = match value.as_str() {
                        "percentile" => Schedule::Percentile,
                        "round_robin" => Schedule::RoundRobin,
                        _ => return Err(bad()),
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line: 0,
                        message: format!("unknown override {key}"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_target(field: &str) -> Option<Target> {
    if field == "general" {
        return Some(Target::GeneralPopulation);
    }
    let (tag, id) = field.split_once(':')?;
    let id = id.parse().ok()?;
    match tag {
        "user" => Some(Target::SpecificUser(id)),
        "segment" => Some(Target::Segment(id)),
        _ => None,
    }
}

pub fn parse_scenarios(text: &str) -> Result<Vec<ScenarioSpec>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: n + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(err("expected `kind pushed_item target`".into()));
        }
        let kind = AttackKind::from_name(fields[0]).ok_or_else(|| err(format!("unknown kind {}", fields[0])))?;
        let pushed_item = fields[1]
            .parse()
            .map_err(|_| err(format!("bad item id {}", fields[1])))?;
        let target = parse_target(fields[2]).ok_or_else(|| err(format!("bad target {}", fields[2])))?;
        let overrides = fields[3..]
            .iter()
            .map(|f| {
                f.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| err(format!("expected key=value, got {f}")))
            })
            .collect::<Result<_>>()?;
        let spec = ScenarioSpec {
            kind,
            scenario: Scenario { pushed_item, target },
            overrides,
        };
        spec.config(&AttackConfig::default()).map_err(|e| err(e.to_string()))?;
        out.push(spec);
    }
    Ok(out)
}
