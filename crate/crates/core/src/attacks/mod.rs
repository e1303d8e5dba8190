//! Attack orchestration.
//!
//! Every attack moves the pushed item's image in signed steps of size
//! `epsilon`. The white-box attack reads the model; all others go through
//! an [`Oracle`](crate::oracle::Oracle) and estimate the feature gradient
//! from perturbation batches. Effectiveness is measured by a [`Probe`], the
//! evaluation side that the attacker never reads.

mod baselines;
mod black_box;
mod population;
mod scenarios;
mod white_box;

pub use baselines::{blend_image, run_baseline_blend, run_baseline_replace, BLEND_GRID};
pub use black_box::{
    correct_surrogate_gradient, estimate_gradient, run_bb_partial, run_bb_step, run_black_box, BbStepInfo,
};
pub use population::{population_order, run_general, run_segmented};
pub use scenarios::{parse_scenarios, ScenarioSpec};
pub use white_box::{run_white_box, white_box_direction};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradest::RankMapping;
use crate::imaging::{ssim, Image, SsimParams};
use crate::oracle::{Feedback, InjectedUser, Oracle, QueryLedger};

/// Hard cap on attack steps.
pub const MAX_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    WhiteBox,
    BbScore,
    BbRank,
    BbPartial,
    Segmented,
    General,
    BaselineReplace,
    BaselineBlend,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::WhiteBox => "wb",
            AttackKind::BbScore => "bb_score",
            AttackKind::BbRank => "bb_rank",
            AttackKind::BbPartial => "bb_partial",
            AttackKind::Segmented => "segmented",
            AttackKind::General => "general",
            AttackKind::BaselineReplace => "baseline_replace",
            AttackKind::BaselineBlend => "baseline_blend",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            AttackKind::WhiteBox,
            AttackKind::BbScore,
            AttackKind::BbRank,
            AttackKind::BbPartial,
            AttackKind::Segmented,
            AttackKind::General,
            AttackKind::BaselineReplace,
            AttackKind::BaselineBlend,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// How the general-population attack picks its active user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Percentile,
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub max_steps: usize,
    pub epsilon: f64,
    pub d_prime: usize,
    /// Perturbation radius under score feedback.
    pub delta: f64,
    /// Perturbation radius under rank feedback.
    pub rank_delta: f64,
    pub percentile_p: f64,
    pub n_population: usize,
    pub schedule: Schedule,
    pub blend_epsilon: f64,
    /// Try every value of [`BLEND_GRID`] and keep the best.
    pub blend_sweep: bool,
    pub rank_mapping: RankMapping,
    pub resample_retries: usize,
    /// Steps the partial-ranking procedure may spend surfacing the pushed
    /// item for the surrogate user before giving up; capped by `max_steps`.
    pub surface_budget: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::BbScore,
            max_steps: MAX_STEPS,
            epsilon: 1.0,
            d_prime: 64,
            delta: 1.0,
            rank_delta: 8.0,
            percentile_p: 0.25,
            n_population: 200,
            schedule: Schedule::Percentile,
            blend_epsilon: 0.05,
            blend_sweep: false,
            rank_mapping: RankMapping::Uniform,
            resample_retries: 3,
            surface_budget: 10,
        }
    }
}

impl AttackConfig {
    pub fn with_kind(kind: AttackKind) -> Self {
        AttackConfig {
            kind,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(1..=MAX_STEPS).contains(&self.max_steps) {
            return bad(format!("max_steps must lie in [1, {MAX_STEPS}], got {}", self.max_steps));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.d_prime == 0 {
            return bad("d_prime must be >= 1".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be non-negative, got {}", self.delta));
        }
        if !(self.rank_delta >= 0.0 && self.rank_delta.is_finite()) {
            return bad(format!("rank_delta must be non-negative, got {}", self.rank_delta));
        }
        if !(0.0..=1.0).contains(&self.percentile_p) {
            return bad(format!("percentile_p must lie in [0, 1], got {}", self.percentile_p));
        }
        if self.n_population == 0 {
            return bad("n_population must be >= 1".into());
        }
        if !(0.01 - 1e-12..=0.1 + 1e-12).contains(&self.blend_epsilon) {
            return bad(format!("blend_epsilon must lie in [0.01, 0.1], got {}", self.blend_epsilon));
        }
        if self.surface_budget == 0 {
            return bad("surface_budget must be >= 1".into());
        }
        Ok(())
    }

    /// Perturbation radius used against an oracle with this feedback.
    pub fn delta_for(&self, feedback: Feedback) -> f64 {
        match feedback {
            Feedback::Scores => self.delta,
            Feedback::Ranks => self.rank_delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "id")]
pub enum Target {
    SpecificUser(usize),
    Segment(usize),
    GeneralPopulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub pushed_item: usize,
    pub target: Target,
}

/// Evaluation of the pushed item for the users a scenario is judged on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub ranks: Vec<usize>,
    pub scores: Vec<f64>,
}

impl EvalPoint {
    pub fn mean_rank(&self) -> f64 {
        self.ranks.iter().sum::<usize>() as f64 / self.ranks.len().max(1) as f64
    }

    pub fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }

    pub fn hits(&self, k: usize) -> usize {
        self.ranks.iter().filter(|&&r| r < k).count()
    }
}

/// Evaluation side: true ranks of the pushed item given the image the
/// service currently shows for it.
pub trait Probe {
    fn observe(&mut self, item: usize, served: &Image) -> Result<EvalPoint>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Response the attacker observed for its base image at this step.
    pub response: Option<f64>,
    pub eval: EvalPoint,
    pub ssim: f64,
    pub uploads: usize,
    pub feedback_queries: usize,
    pub pre_step_queries: usize,
    /// False when the step applied no update (estimation aborted).
    pub applied: bool,
}

impl StepRecord {
    pub fn queries(&self) -> usize {
        self.feedback_queries + self.pre_step_queries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// The pushed item never became visible for the surrogate user.
    NotSurfaced,
    /// Rank feedback hid the pushed item and no fallback was possible.
    NotVisible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub kind: AttackKind,
    pub scenario: Scenario,
    /// Pre-attack state (step 0).
    pub initial: StepRecord,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub final_image: Image,
    pub ledger: QueryLedger,
    /// Blend factor finally used by the blend baseline.
    pub blend_epsilon: Option<f64>,
    pub surrogate: Option<SurrogateState>,
}

/// Helper users of the partial-ranking procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateState {
    /// Target history plus `i_prime`.
    pub u_prime: InjectedUser,
    pub u_of_i: InjectedUser,
    pub u_of_iprime: InjectedUser,
    pub i_prime: usize,
    /// History length of the target.
    pub n: usize,
}

impl AttackTrace {
    pub fn last(&self) -> &StepRecord {
        self.steps.last().unwrap_or(&self.initial)
    }

    /// Record at `step`, carrying the last one forward past the end.
    pub fn at(&self, step: usize) -> &StepRecord {
        if step == 0 {
            return &self.initial;
        }
        self.steps.get(step - 1).unwrap_or_else(|| self.last())
    }
}

/// Builds records for one attack run against an oracle.
pub(crate) struct Recorder<'a> {
    genuine: Image,
    probe: &'a mut dyn Probe,
    ssim: SsimParams,
    trace: AttackTrace,
}

impl<'a> Recorder<'a> {
    pub fn start(kind: AttackKind, scenario: Scenario, genuine: &Image, probe: &'a mut dyn Probe) -> Result<Self> {
        let eval = probe.observe(scenario.pushed_item, genuine)?;
        let initial = StepRecord {
            step: 0,
            response: None,
            eval,
            ssim: 1.0,
            uploads: 0,
            feedback_queries: 0,
            pre_step_queries: 0,
            applied: true,
        };
        Ok(Recorder {
            genuine: genuine.clone(),
            probe,
            ssim: SsimParams::default(),
            trace: AttackTrace {
                kind,
                scenario,
                initial,
                steps: Vec::new(),
                outcome: Outcome::Completed,
                final_image: genuine.clone(),
                ledger: QueryLedger::default(),
                blend_epsilon: None,
                surrogate: None,
            },
        })
    }

    /// Records the state after a step from what the service now shows.
    pub fn record(&mut self, served: &Image, ledger: QueryLedger, response: Option<f64>, applied: bool) -> Result<()> {
        let eval = self.probe.observe(self.trace.scenario.pushed_item, served)?;
        let record = StepRecord {
            step: self.trace.steps.len() + 1,
            response,
            eval,
            ssim: ssim(&self.genuine, served, &self.ssim)?,
            uploads: ledger.uploads,
            feedback_queries: ledger.feedback_queries(),
            pre_step_queries: ledger.pre_step_queries,
            applied,
        };
        self.trace.steps.push(record);
        self.trace.final_image = served.clone();
        self.trace.ledger = ledger;
        Ok(())
    }

    /// Evaluates `served` without recording a step.
    pub fn peek(&mut self, served: &Image) -> Result<EvalPoint> {
        self.probe.observe(self.trace.scenario.pushed_item, served)
    }

    pub fn record_oracle(&mut self, oracle: &Oracle, response: Option<f64>, applied: bool) -> Result<()> {
        let served = oracle.current_image(self.trace.scenario.pushed_item)?.clone();
        self.record(&served, oracle.ledger(), response, applied)
    }

    pub fn set_outcome(&mut self, outcome: Outcome) {
        self.trace.outcome = outcome;
    }

    pub fn set_blend_epsilon(&mut self, eps: f64) {
        self.trace.blend_epsilon = Some(eps);
    }

    pub fn set_surrogate(&mut self, state: SurrogateState) {
        self.trace.surrogate = Some(state);
    }

    pub fn finish(mut self, ledger: QueryLedger) -> AttackTrace {
        self.trace.ledger = ledger;
        self.trace
    }
}
