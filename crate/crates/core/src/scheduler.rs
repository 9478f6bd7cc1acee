//! Generation plans for chunked autoregressive sampling and an error
//! propagation model to compare them.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Initial,
    Causal,
    Skip,
    Concatenate,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Initial => "initial",
            StepKind::Causal => "causal",
            StepKind::Skip => "skip",
            StepKind::Concatenate => "concatenate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub targets: Vec<usize>,
    pub contexts: Vec<usize>,
    pub kind: StepKind,
}

impl PlanStep {
    fn new(targets: Vec<usize>, contexts: Vec<usize>, kind: StepKind) -> Self {
        Self { targets, contexts, kind }
    }

    /// Chunks touched by this step, in temporal order.
    pub fn window(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.targets.iter().chain(&self.contexts).copied().collect();
        w.sort_unstable();
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Causal,
    SkipConcat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub chunk_count: usize,
    pub steps: Vec<PlanStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub max_chunks_per_invocation: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { max_chunks_per_invocation: 3 }
    }
}

/// `c0 | ∅`, then `ci | {c(i−1)}`.
pub fn plan_causal(n: usize) -> Result<GenerationPlan> {
    if n == 0 {
        return Err(Error::Invalid("a plan needs at least one chunk".into()));
    }
    let mut steps = vec![PlanStep::new(vec![0], vec![], StepKind::Initial)];
    steps.extend((1..n).map(|i| PlanStep::new(vec![i], vec![i - 1], StepKind::Causal)));
    Ok(GenerationPlan { chunk_count: n, steps })
}

/// Skip chunks at multiples of `period`, generated without generated context;
/// the run between two consecutive skip chunks is generated in one step
/// conditioned on both. A trailing run conditions on the last skip chunk.
pub fn plan_skip_concat(n: usize, period: usize) -> Result<GenerationPlan> {
    if n == 0 {
        return Err(Error::Invalid("a plan needs at least one chunk".into()));
    }
    if period < 2 {
        return Err(Error::Config(format!("skip period must be >= 2, got {period}")));
    }
    let mut steps = vec![PlanStep::new(vec![0], vec![], StepKind::Skip)];
    let mut prev = 0;
    loop {
        let next = prev + period;
        if next < n {
            steps.push(PlanStep::new(vec![next], vec![], StepKind::Skip));
            steps.push(PlanStep::new((prev + 1..next).collect(), vec![prev, next], StepKind::Concatenate));
            prev = next;
        } else {
            if prev + 1 < n {
                steps.push(PlanStep::new((prev + 1..n).collect(), vec![prev], StepKind::Concatenate));
            }
            break;
        }
    }
    Ok(GenerationPlan { chunk_count: n, steps })
}

impl GenerationPlan {
    pub fn build(mode: PlanMode, n: usize, period: usize) -> Result<Self> {
        match mode {
            PlanMode::Causal => plan_causal(n),
            PlanMode::SkipConcat => plan_skip_concat(n, period),
        }
    }

    /// Checks coverage, ordering of dependencies and the window limit.
    pub fn validate(&self, window: &WindowConfig) -> Result<()> {
        let mut done = HashSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            if step.targets.is_empty() {
                return Err(Error::Invalid(format!("step {i} has no targets")));
            }
            for c in &step.contexts {
                if !done.contains(c) {
                    return Err(Error::Invalid(format!("step {i} uses chunk {c} before it is generated")));
                }
            }
            for &t in &step.targets {
                if t >= self.chunk_count || !done.insert(t) {
                    return Err(Error::Invalid(format!("step {i} target {t} is out of range or repeated")));
                }
            }
            if step.targets.len() + step.contexts.len() > window.max_chunks_per_invocation {
                return Err(Error::Invalid(format!(
                    "step {i} touches {} chunks, window allows {}",
                    step.targets.len() + step.contexts.len(),
                    window.max_chunks_per_invocation
                )));
            }
        }
        if done.len() != self.chunk_count {
            return Err(Error::Invalid(format!("plan covers {} of {} chunks", done.len(), self.chunk_count)));
        }
        Ok(())
    }

    /// Step index after which chunk `c` is no longer needed as context.
    pub fn last_use(&self) -> Vec<usize> {
        let mut last = vec![0; self.chunk_count];
        for (i, step) in self.steps.iter().enumerate() {
            for &c in step.targets.iter().chain(&step.contexts) {
                last[c] = i;
            }
        }
        last
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.steps).expect("plan serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub fresh: f64,
    pub transfer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkError {
    pub chunk: usize,
    pub kind: StepKind,
    pub error: f64,
}

/// `e = fresh + transfer · mean(errors of the step's contexts)`, in step order.
/// Results are indexed by chunk id.
pub fn simulate_error(plan: &GenerationPlan, model: &ErrorModel) -> Result<Vec<ChunkError>> {
    if !(model.fresh.is_finite() && model.transfer.is_finite() && model.fresh >= 0.0 && model.transfer >= 0.0) {
        return Err(Error::Invalid(format!("error model {model:?} must be finite and non-negative")));
    }
    plan.validate(&WindowConfig { max_chunks_per_invocation: usize::MAX })?;
    let mut errors: Vec<Option<ChunkError>> = vec![None; plan.chunk_count];
    for step in &plan.steps {
        let inherited = if step.contexts.is_empty() {
            0.0
        } else {
            let sum: f64 = step.contexts.iter().map(|&c| errors[c].as_ref().expect("validated").error).sum();
            sum / step.contexts.len() as f64
        };
        for &t in &step.targets {
            errors[t] = Some(ChunkError { chunk: t, kind: step.kind, error: model.fresh + model.transfer * inherited });
        }
    }
    Ok(errors.into_iter().map(|e| e.expect("validated plans cover every chunk")).collect())
}

pub fn error_csv(errors: &[ChunkError]) -> String {
    let mut out = String::from("chunk_id,kind,error\n");
    for e in errors {
        let _ = writeln!(out, "{},{},{}", e.chunk, e.kind.as_str(), e.error);
    }
    out
}

pub fn max_error(errors: &[ChunkError]) -> f64 {
    errors.iter().map(|e| e.error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(plan: &GenerationPlan) -> Vec<(Vec<usize>, Vec<usize>)> {
        plan.steps.iter().map(|s| (s.targets.clone(), s.contexts.clone())).collect()
    }

    #[test]
    fn causal_examples() {
        assert_eq!(plan_causal(1).unwrap().steps, vec![PlanStep::new(vec![0], vec![], StepKind::Initial)]);
        let p = plan_causal(4).unwrap();
        assert_eq!(pairs(&p), vec![(vec![0], vec![]), (vec![1], vec![0]), (vec![2], vec![1]), (vec![3], vec![2])]);
        assert!(p.steps[1..].iter().all(|s| s.window().len() == 2));
    }

    #[test]
    fn skip_concat_examples() {
        let p = plan_skip_concat(5, 2).unwrap();
        assert_eq!(
            pairs(&p),
            vec![
                (vec![0], vec![]),
                (vec![2], vec![]),
                (vec![1], vec![0, 2]),
                (vec![4], vec![]),
                (vec![3], vec![2, 4]),
            ]
        );
        assert_eq!(p.steps[2].kind, StepKind::Concatenate);
        assert_eq!(pairs(&plan_skip_concat(1, 2).unwrap()), vec![(vec![0], vec![])]);
        assert_eq!(pairs(&plan_skip_concat(2, 2).unwrap()), vec![(vec![0], vec![]), (vec![1], vec![0])]);
        let p = plan_skip_concat(7, 3).unwrap();
        assert_eq!(
            pairs(&p),
            vec![(vec![0], vec![]), (vec![3], vec![]), (vec![1, 2], vec![0, 3]), (vec![6], vec![]), (vec![4, 5], vec![3, 6])]
        );
        p.validate(&WindowConfig { max_chunks_per_invocation: 4 }).unwrap();
        assert!(p.validate(&WindowConfig::default()).is_err());
    }

    #[test]
    fn error_examples() {
        let m = ErrorModel { fresh: 1.0, transfer: 1.0 };
        let causal: Vec<f64> = simulate_error(&plan_causal(5).unwrap(), &m).unwrap().iter().map(|e| e.error).collect();
        assert_eq!(causal, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let skip: Vec<f64> = simulate_error(&plan_skip_concat(5, 2).unwrap(), &m).unwrap().iter().map(|e| e.error).collect();
        assert_eq!(skip, vec![1.0, 2.0, 1.0, 2.0, 1.0]);
        let none = ErrorModel { fresh: 0.7, transfer: 0.0 };
        for plan in [plan_causal(6).unwrap(), plan_skip_concat(6, 2).unwrap()] {
            assert!(simulate_error(&plan, &none).unwrap().iter().all(|e| e.error == 0.7));
        }
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let bad = GenerationPlan { chunk_count: 2, steps: vec![PlanStep::new(vec![1], vec![0], StepKind::Causal)] };
        assert!(bad.validate(&WindowConfig::default()).is_err());
        let short = GenerationPlan { chunk_count: 2, steps: vec![PlanStep::new(vec![0], vec![], StepKind::Initial)] };
        assert!(short.validate(&WindowConfig::default()).is_err());
    }

    #[test]
    fn csv_and_json_dumps() {
        let p = plan_skip_concat(2, 2).unwrap();
        let csv = error_csv(&simulate_error(&p, &ErrorModel { fresh: 1.0, transfer: 0.5 }).unwrap());
        assert_eq!(csv, "chunk_id,kind,error\n0,skip,1\n1,concatenate,1.5\n");
        let json: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(json[1]["kind"], "concatenate");
        assert_eq!(p.last_use(), vec![1, 1]);
    }
}
