//! Completion measures.
//!
//! A task that is pending at step `i` must either be satisfied by the
//! transition at `i` (its fairness condition holds) or have a strictly
//! smaller measure at `i + 1`. Measures are tuples of naturals compared
//! lexicographically, so a prefix that passes this check at every step can
//! only postpone a task for as many steps as its measure allows.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sm::{Clause, ExecutionPrefix, RefinementFn, SpecMachine, Violation};

pub type Measure = Vec<u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("cannot compare measures of arity {0} and {1}")]
pub struct ArityMismatch(pub usize, pub usize);

/// Strict lexicographic order on tuples of equal length.
pub fn lex_less(a: &[u64], b: &[u64]) -> Result<bool, ArityMismatch> {
    if a.len() != b.len() {
        return Err(ArityMismatch(a.len(), b.len()));
    }
    Ok(a < b)
}

/// Measure of a task at a step of a prefix.
///
/// Measures may look ahead in the prefix: a message's measure is the number
/// of steps until the simulator delivers it, which the simulator state
/// determines but which is simplest to read off the finished run.
pub trait Variant<S, T, F> {
    fn measure(&self, task: &F, prefix: &ExecutionPrefix<S, T>, i: usize) -> Measure;
}

impl<S, T, F, G> Variant<S, T, F> for G
where
    G: Fn(&F, &ExecutionPrefix<S, T>, usize) -> Measure,
{
    fn measure(&self, task: &F, prefix: &ExecutionPrefix<S, T>, i: usize) -> Measure {
        self(task, prefix, i)
    }
}

/// A variant that reads only the current state and transition.
pub struct StateVariant<S, T, F>(pub Arc<dyn Fn(&F, &S, &T) -> Measure + Send + Sync>);

impl<S, T, F> Variant<S, T, F> for StateVariant<S, T, F> {
    fn measure(&self, task: &F, prefix: &ExecutionPrefix<S, T>, i: usize) -> Measure {
        let (s, t) = &prefix.steps[i];
        (self.0)(task, s, t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureFailure<F> {
    pub task: F,
    pub step_index: usize,
    pub measure_before: Measure,
    pub measure_after: Measure,
    pub fair_fired: bool,
}

impl<F: Debug> MeasureFailure<F> {
    pub fn to_violation(&self) -> Violation {
        Violation::new(
            self.step_index,
            Clause::Measure,
            format!(
                "task {:?}: measure {:?} -> {:?} does not decrease and fairness did not fire",
                self.task, self.measure_before, self.measure_after
            ),
        )
    }
}

/// Counts of what a passing check looked at.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureStats {
    /// (step, task) pairs where the measure had to decrease.
    pub decreases: usize,
    /// (step, task) pairs discharged by fairness.
    pub fired: usize,
}

fn failure<F>(task: F, i: usize, before: Measure, after: Measure) -> MeasureFailure<F> {
    MeasureFailure { task, step_index: i, measure_before: before, measure_after: after, fair_fired: false }
}

/// Checks the completion obligation for every task pending at every step.
pub fn measure_check<S, T, F: Clone>(
    prefix: &ExecutionPrefix<S, T>,
    spec: &SpecMachine<S, T, F>,
    var: &impl Variant<S, T, F>,
) -> Result<MeasureStats, MeasureFailure<F>> {
    let mut stats = MeasureStats::default();
    for i in 0..prefix.len().saturating_sub(1) {
        let (s, t) = &prefix.steps[i];
        for task in (spec.tasks)(s) {
            if (spec.fair)(&task, s, t) {
                stats.fired += 1;
                continue;
            }
            let before = var.measure(&task, prefix, i);
            let after = var.measure(&task, prefix, i + 1);
            match lex_less(&after, &before) {
                Ok(true) => stats.decreases += 1,
                _ => return Err(failure(task, i, before, after)),
            }
        }
    }
    Ok(stats)
}

/// Checks the concrete obligation, then the abstract one along the image
/// of the prefix under `r`.
///
/// A concrete step may map to several abstract transitions; an abstract task
/// counts as satisfied if its fairness holds for any of them, evaluated at
/// the intermediate abstract state. `spec_a.tasks` must list only tasks that
/// are enabled (a disabled task carries no obligation). Abstract measures
/// are computed over the concrete prefix, since the image alone does not
/// carry the scheduling information they depend on.
pub fn refinement_measure_check<CS, CT, CF: Clone, AS, AT, AF: Clone>(
    prefix: &ExecutionPrefix<CS, CT>,
    r: &RefinementFn<CS, CT, AS, AT>,
    spec_c: &SpecMachine<CS, CT, CF>,
    var_c: &impl Variant<CS, CT, CF>,
    spec_a: &SpecMachine<AS, AT, AF>,
    var_a: &impl Variant<CS, CT, AF>,
) -> Result<MeasureStats, RefinementMeasureFailure<CF, AF>> {
    let mut stats = measure_check(prefix, spec_c, var_c).map_err(RefinementMeasureFailure::Concrete)?;
    for i in 0..prefix.len().saturating_sub(1) {
        let (cs, ct) = &prefix.steps[i];
        let (a, ts) = r.apply(cs, ct);
        for task in (spec_a.tasks)(&a) {
            let mut fired = false;
            let mut cur: Option<AS> = None;
            for t in &ts {
                let st = cur.as_ref().unwrap_or(&a);
                if (spec_a.fair)(&task, st, t) {
                    fired = true;
                    break;
                }
                match (spec_a.next)(st, t) {
                    Some(n) => cur = Some(n),
                    None => break,
                }
            }
            if fired {
                stats.fired += 1;
                continue;
            }
            let before = var_a.measure(&task, prefix, i);
            let after = var_a.measure(&task, prefix, i + 1);
            match lex_less(&after, &before) {
                Ok(true) => stats.decreases += 1,
                _ => return Err(RefinementMeasureFailure::Abstract(failure(task, i, before, after))),
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefinementMeasureFailure<CF, AF> {
    Concrete(MeasureFailure<CF>),
    Abstract(MeasureFailure<AF>),
}

impl<CF: Debug, AF: Debug> RefinementMeasureFailure<CF, AF> {
    pub fn to_violation(&self) -> Violation {
        match self {
            RefinementMeasureFailure::Concrete(f) => f.to_violation(),
            RefinementMeasureFailure::Abstract(f) => f.to_violation(),
        }
    }
}

/// Index of the first step `j >= i` satisfying `pred`, if any.
pub fn first_from<S, T>(prefix: &ExecutionPrefix<S, T>, i: usize, pred: impl Fn(&S, &T) -> bool) -> Option<usize> {
    prefix.steps.iter().enumerate().skip(i).find(|(_, (s, t))| pred(s, t)).map(|(j, _)| j)
}

/// Steps from `i` until the first step satisfying `pred`; one more than the
/// remaining length when no such step exists in the prefix.
pub fn steps_until<S, T>(prefix: &ExecutionPrefix<S, T>, i: usize, pred: impl Fn(&S, &T) -> bool) -> u64 {
    match first_from(prefix, i, pred) {
        Some(j) => (j - i) as u64,
        None => (prefix.len() - i) as u64 + 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_examples() {
        assert_eq!(lex_less(&[1, 5], &[2, 0]), Ok(true));
        assert_eq!(lex_less(&[2, 0], &[2, 0]), Ok(false));
        assert_eq!(lex_less(&[2, 0], &[1, 9]), Ok(false));
        assert_eq!(lex_less(&[1], &[1, 2]), Err(ArityMismatch(1, 2)));
    }

    /// Countdown: state is the remaining count; task 0 fires on reaching 0.
    fn countdown() -> SpecMachine<u64, (), u8> {
        SpecMachine::new(|_| true, |s: &u64, _: &()| Some(s.saturating_sub(1)))
            .with_fairness(|s| if *s > 0 { vec![0] } else { vec![] }, |_, s, _| *s == 1)
    }

    fn prefix(from: u64) -> ExecutionPrefix<u64, ()> {
        ExecutionPrefix::new((0..=from).rev().map(|s| (s, ())).collect())
    }

    #[test]
    fn countdown_measure_decreases() {
        let var = StateVariant::<u64, (), u8>(Arc::new(|_, s, _| vec![*s]));
        let stats = measure_check(&prefix(5), &countdown(), &var).unwrap();
        assert_eq!((stats.decreases, stats.fired), (4, 1));
    }

    #[test]
    fn single_step_is_vacuous() {
        let var = StateVariant::<u64, (), u8>(Arc::new(|_, _, _| vec![0]));
        assert!(measure_check(&prefix(0), &countdown(), &var).is_ok());
        let one = ExecutionPrefix::new(vec![(3u64, ())]);
        assert!(measure_check(&one, &countdown(), &var).is_ok());
    }

    #[test]
    fn constant_measure_fails_with_report() {
        let var = StateVariant::<u64, (), u8>(Arc::new(|_, _, _| vec![7]));
        let f = measure_check(&prefix(3), &countdown(), &var).unwrap_err();
        assert_eq!(f.step_index, 0);
        assert_eq!((&f.measure_before, &f.measure_after), (&vec![7], &vec![7]));
        let json = serde_json::to_value(&f).unwrap();
        for key in ["task", "step_index", "measure_before", "measure_after", "fair_fired"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn hindsight_measure() {
        let var = |_: &u8, p: &ExecutionPrefix<u64, ()>, i: usize| vec![steps_until(p, i, |s, _| *s == 1)];
        assert!(measure_check(&prefix(6), &countdown(), &var).is_ok());
    }

    #[test]
    fn identity_refinement_reduces_to_measure_check() {
        let var = |_: &u8, p: &ExecutionPrefix<u64, ()>, i: usize| vec![p.steps[i].0];
        let r = RefinementFn::<u64, (), u64, ()>::identity();
        let ok = refinement_measure_check(&prefix(4), &r, &countdown(), &var, &countdown(), &var);
        assert!(ok.is_ok());
        let flat = |_: &u8, _: &ExecutionPrefix<u64, ()>, _: usize| vec![1];
        let bad = refinement_measure_check(&prefix(4), &r, &countdown(), &var, &countdown(), &flat);
        assert!(matches!(bad, Err(RefinementMeasureFailure::Abstract(_))));
    }
}
