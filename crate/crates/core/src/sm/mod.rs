//! Specifications as state machines, finite executions, and refinement.
//!
//! A [`SpecMachine`] is four functions over a state type `S`, a transition
//! type `T` and a task type `F`: `init`, `next`, `invar` and `fair`, plus an
//! enumeration of the tasks that may be pending in a state. Executions are
//! infinite in principle; everything here works on finite prefixes. The
//! fairness clause of conformance is not decidable on a prefix and is checked
//! as a bounded obligation by [`crate::liveness`].

mod trace_io;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trace_io::{read_ndjson, write_ndjson, TraceLine};

type InitFn<S> = Arc<dyn Fn(&S) -> bool + Send + Sync>;
type NextFn<S, T> = Arc<dyn Fn(&S, &T) -> Option<S> + Send + Sync>;
type InvarFn<S, T> = Arc<dyn Fn(&S, &T) -> bool + Send + Sync>;
type FairFn<S, T, F> = Arc<dyn Fn(&F, &S, &T) -> bool + Send + Sync>;
type TasksFn<S, F> = Arc<dyn Fn(&S) -> Vec<F> + Send + Sync>;

/// A specification: `Init`, `Next`, `Inv`, `Fair` and the task set.
///
/// `next` returns `None` when the transition is not enabled in the state; a
/// prefix that takes such a transition does not conform.
pub struct SpecMachine<S, T, F> {
    pub init: InitFn<S>,
    pub next: NextFn<S, T>,
    pub invar: InvarFn<S, T>,
    pub fair: FairFn<S, T, F>,
    /// Tasks whose fairness obligation may be live in a state.
    pub tasks: TasksFn<S, F>,
}

impl<S, T, F> Clone for SpecMachine<S, T, F> {
    fn clone(&self) -> Self {
        SpecMachine {
            init: self.init.clone(),
            next: self.next.clone(),
            invar: self.invar.clone(),
            fair: self.fair.clone(),
            tasks: self.tasks.clone(),
        }
    }
}

impl<S: 'static, T: 'static, F: 'static> SpecMachine<S, T, F> {
    /// A machine with a trivially true invariant and no tasks.
    pub fn new(
        init: impl Fn(&S) -> bool + Send + Sync + 'static,
        next: impl Fn(&S, &T) -> Option<S> + Send + Sync + 'static,
    ) -> Self {
        SpecMachine {
            init: Arc::new(init),
            next: Arc::new(next),
            invar: Arc::new(|_, _| true),
            fair: Arc::new(|_, _, _| true),
            tasks: Arc::new(|_| Vec::new()),
        }
    }

    pub fn with_invariant(mut self, invar: impl Fn(&S, &T) -> bool + Send + Sync + 'static) -> Self {
        self.invar = Arc::new(invar);
        self
    }

    pub fn with_fairness(
        mut self,
        tasks: impl Fn(&S) -> Vec<F> + Send + Sync + 'static,
        fair: impl Fn(&F, &S, &T) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.tasks = Arc::new(tasks);
        self.fair = Arc::new(fair);
        self
    }

    /// Same safety clauses, different task set.
    pub fn retask<G: 'static>(
        &self,
        tasks: impl Fn(&S) -> Vec<G> + Send + Sync + 'static,
        fair: impl Fn(&G, &S, &T) -> bool + Send + Sync + 'static,
    ) -> SpecMachine<S, T, G> {
        SpecMachine {
            init: self.init.clone(),
            next: self.next.clone(),
            invar: self.invar.clone(),
            fair: Arc::new(fair),
            tasks: Arc::new(tasks),
        }
    }
}

/// A finite prefix `((s_0, t_0), (s_1, t_1), ...)` of an execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPrefix<S, T> {
    pub steps: Vec<(S, T)>,
}

impl<S, T> Default for ExecutionPrefix<S, T> {
    fn default() -> Self {
        ExecutionPrefix { steps: Vec::new() }
    }
}

impl<S, T> ExecutionPrefix<S, T> {
    pub fn new(steps: Vec<(S, T)>) -> Self {
        ExecutionPrefix { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, state: S, transition: T) {
        self.steps.push((state, transition));
    }
}

impl<S: Clone, T: Clone> ExecutionPrefix<S, T> {
    /// The first `len` steps.
    pub fn truncated(&self, len: usize) -> Self {
        ExecutionPrefix { steps: self.steps[..len.min(self.steps.len())].to_vec() }
    }

    /// Projection onto transitions.
    pub fn trace(&self) -> Trace<T> {
        Trace { transitions: self.steps.iter().map(|(_, t)| t.clone()).collect() }
    }
}

/// The transitions of an execution with the states dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace<T> {
    pub transitions: Vec<T>,
}

/// Which conformance clause failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clause {
    Init,
    Next,
    Invariant,
    Refinement,
    Measure,
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Clause::Init => "init",
            Clause::Next => "next",
            Clause::Invariant => "invariant",
            Clause::Refinement => "refinement",
            Clause::Measure => "measure",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub clause: Clause,
    pub reason: String,
}

impl Violation {
    pub fn new(index: usize, clause: Clause, reason: impl Into<String>) -> Self {
        Violation { index, clause, reason: reason.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation at step {}: {}", self.clause, self.index, self.reason)
    }
}

/// Outcome of a check. Violations are values, not errors.
pub type Verdict = Result<(), Violation>;

/// Checks clauses (1)-(3) of conformance on a finite prefix.
///
/// Every transition must be enabled (`next` returns `Some`); the successor is
/// compared only where the prefix has one.
pub fn conforms<S: PartialEq, T, F>(spec: &SpecMachine<S, T, F>, prefix: &ExecutionPrefix<S, T>) -> Verdict {
    let Some((s0, _)) = prefix.steps.first() else {
        return Err(Violation::new(0, Clause::Init, "empty prefix"));
    };
    if !(spec.init)(s0) {
        return Err(Violation::new(0, Clause::Init, "initial state rejected"));
    }
    for (i, (s, t)) in prefix.steps.iter().enumerate() {
        match (spec.next)(s, t) {
            None => return Err(Violation::new(i, Clause::Next, "transition not enabled")),
            Some(succ) => {
                if let Some((expected, _)) = prefix.steps.get(i + 1) {
                    if &succ != expected {
                        return Err(Violation::new(i, Clause::Next, "successor state mismatch"));
                    }
                }
            }
        }
        if !(spec.invar)(s, t) {
            return Err(Violation::new(i, Clause::Invariant, "invariant false"));
        }
    }
    Ok(())
}

/// A specification with only weak fairness and no invariant.
pub struct WeakSpec<S, T, F> {
    pub init: InitFn<S>,
    pub next: NextFn<S, T>,
    pub weak_fair: FairFn<S, T, F>,
    pub tasks: TasksFn<S, F>,
}

impl<S: 'static, T: 'static, F: 'static> WeakSpec<S, T, F> {
    pub fn new(
        init: impl Fn(&S) -> bool + Send + Sync + 'static,
        next: impl Fn(&S, &T) -> Option<S> + Send + Sync + 'static,
        tasks: impl Fn(&S) -> Vec<F> + Send + Sync + 'static,
        weak_fair: impl Fn(&F, &S, &T) -> bool + Send + Sync + 'static,
    ) -> Self {
        WeakSpec { init: Arc::new(init), next: Arc::new(next), weak_fair: Arc::new(weak_fair), tasks: Arc::new(tasks) }
    }
}

/// How `terminalize` decides the universal clause `forall t. !WeakFair(f, s, t)`.
pub enum Enabledness<S, T, F> {
    /// Every transition that could satisfy `WeakFair` from a state.
    Enumerate(Arc<dyn Fn(&S) -> Vec<T> + Send + Sync>),
    /// `true` when task `f` is disabled in `s`. Must agree with `WeakFair`.
    Disabled(Arc<dyn Fn(&F, &S) -> bool + Send + Sync>),
}

/// Turns a weak-fairness specification into an ordinary one:
/// `Inv = true` and `Fair(f, s, t) = WeakFair(f, s, t) || forall t'. !WeakFair(f, s, t')`.
pub fn terminalize<S: 'static, T: 'static, F: 'static>(
    ws: WeakSpec<S, T, F>,
    enabledness: Enabledness<S, T, F>,
) -> SpecMachine<S, T, F> {
    let weak = ws.weak_fair.clone();
    let fair: FairFn<S, T, F> = match enabledness {
        Enabledness::Enumerate(candidates) => {
            Arc::new(move |f, s, t| weak(f, s, t) || !candidates(s).iter().any(|cand| weak(f, s, cand)))
        }
        Enabledness::Disabled(disabled) => Arc::new(move |f, s, t| weak(f, s, t) || disabled(f, s)),
    };
    SpecMachine { init: ws.init, next: ws.next, invar: Arc::new(|_, _| true), fair, tasks: ws.tasks }
}

/// Maps a concrete step to an abstract state and the abstract transitions it
/// performs. An empty transition list is a stutter.
pub struct RefinementFn<CS, CT, AS, AT> {
    pub map: Arc<dyn Fn(&CS, &CT) -> (AS, Vec<AT>) + Send + Sync>,
    /// Modular (trace) refinement: stutters are allowed and collapsed.
    pub trace_only: bool,
}

impl<CS, CT, AS, AT> Clone for RefinementFn<CS, CT, AS, AT> {
    fn clone(&self) -> Self {
        RefinementFn { map: self.map.clone(), trace_only: self.trace_only }
    }
}

impl<CS, CT, AS, AT> RefinementFn<CS, CT, AS, AT> {
    pub fn new(map: impl Fn(&CS, &CT) -> (AS, Vec<AT>) + Send + Sync + 'static, trace_only: bool) -> Self {
        RefinementFn { map: Arc::new(map), trace_only }
    }

    pub fn apply(&self, s: &CS, t: &CT) -> (AS, Vec<AT>) {
        (self.map)(s, t)
    }
}

impl<S: Clone + 'static, T: Clone + 'static> RefinementFn<S, T, S, T> {
    pub fn identity() -> Self {
        RefinementFn::new(|s: &S, t: &T| (s.clone(), vec![t.clone()]), false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("image collapses to zero abstract steps")]
    StutterForever,
}

/// Checks that the elementwise image of `concrete` under `r` conforms to
/// `abstract_spec` (clauses 1-3).
///
/// Each concrete step contributes zero or more abstract transitions, applied
/// in order to the mapped state; the result must equal the next mapped state.
/// Outside trace-only mode every step must map to exactly one transition.
pub fn refine_check<CS, CT, AS: PartialEq, AT, F>(
    r: &RefinementFn<CS, CT, AS, AT>,
    concrete: &ExecutionPrefix<CS, CT>,
    abstract_spec: &SpecMachine<AS, AT, F>,
) -> Result<Verdict, RefineError> {
    let image: Vec<(AS, Vec<AT>)> = concrete.steps.iter().map(|(s, t)| r.apply(s, t)).collect();
    if r.trace_only && image.iter().all(|(_, ts)| ts.is_empty()) {
        return Err(RefineError::StutterForever);
    }
    let Some((a0, _)) = image.first() else {
        return Err(RefineError::StutterForever);
    };
    if !(abstract_spec.init)(a0) {
        return Ok(Err(Violation::new(0, Clause::Init, "abstract initial state rejected")));
    }
    for (i, (a, ts)) in image.iter().enumerate() {
        if !r.trace_only && ts.len() != 1 {
            return Ok(Err(Violation::new(
                i,
                Clause::Refinement,
                format!("step maps to {} abstract transitions", ts.len()),
            )));
        }
        let mut cur: Option<AS> = None;
        for t in ts {
            let state = cur.as_ref().unwrap_or(a);
            if !(abstract_spec.invar)(state, t) {
                return Ok(Err(Violation::new(i, Clause::Invariant, "abstract invariant false")));
            }
            match (abstract_spec.next)(state, t) {
                Some(succ) => cur = Some(succ),
                None => return Ok(Err(Violation::new(i, Clause::Next, "abstract transition not enabled"))),
            }
        }
        if let Some((expected, _)) = image.get(i + 1) {
            let reached = cur.as_ref().unwrap_or(a);
            if reached != expected {
                let reason = if ts.is_empty() {
                    "abstract state changed on a stutter step"
                } else {
                    "abstract successor mismatch"
                };
                return Ok(Err(Violation::new(i, Clause::Refinement, reason)));
            }
        }
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests;
