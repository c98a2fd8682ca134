//! Composition of specifications and of executable sub-protocols.
//!
//! [`par_compose`] is the specification-level product. [`sync_dispatch`]
//! executes one step of a tagged family of sub-protocols stored in a
//! [`DefaultMap`], running calls injected by a [`Composition::split`] within
//! the same step.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sm::{Clause, RefinementFn, SpecMachine, Verdict, Violation};
use crate::Millis;

/// The zero (not yet reached) sub-state for a tag.
pub trait Zeroed<K> {
    fn zero(tag: &K) -> Self;
}

/// A total map from tags to sub-states that stores only non-zero entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefaultMap<K: Ord, V> {
    explicit: BTreeMap<K, V>,
}

impl<K: Ord, V> Default for DefaultMap<K, V> {
    fn default() -> Self {
        DefaultMap { explicit: BTreeMap::new() }
    }
}

impl<K: Ord + Clone, V: Clone + PartialEq + Zeroed<K>> DefaultMap<K, V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, tag: &K) -> V {
        self.explicit.get(tag).cloned().unwrap_or_else(|| V::zero(tag))
    }

    /// The stored entry, if the sub-state is not zero.
    pub fn get_explicit(&self, tag: &K) -> Option<&V> {
        self.explicit.get(tag)
    }

    pub fn set(&mut self, tag: K, value: V) {
        if value == V::zero(&tag) {
            self.explicit.remove(&tag);
        } else {
            self.explicit.insert(tag, value);
        }
    }

    pub fn explicit(&self) -> impl Iterator<Item = (&K, &V)> {
        self.explicit.iter()
    }

    pub fn explicit_len(&self) -> usize {
        self.explicit.len()
    }

    pub fn is_canonical(&self) -> bool {
        self.explicit.iter().all(|(k, v)| *v != V::zero(k))
    }
}

/// Input to a composed step.
#[derive(Clone, Debug, PartialEq)]
pub enum Input<K, M, A> {
    Timeout(Millis),
    Message(K, M),
    /// A call addressed to one tag, or to the composition itself (`None`),
    /// in which case only calls produced by `split` run.
    Call(Option<K>, A),
}

/// Input seen by one sub-protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SubInput<'a, M, A> {
    Timeout(Millis),
    Message(&'a M),
    Call(&'a A),
}

/// What `split` is asked about: the step's input, or a call injected earlier
/// in the same step.
#[derive(Debug)]
pub enum Trigger<'a, K, M, A> {
    Input(&'a Input<K, M, A>),
    Injected(&'a K, &'a A),
}

/// A family of sub-protocols indexed by tag, sharing message and call types.
pub trait Composition {
    type Tag: Ord + Clone + Debug;
    type Sub: Clone + PartialEq + Zeroed<Self::Tag>;
    type Msg;
    type Arg: Clone;
    type Out;

    fn run(
        &self,
        tag: &Self::Tag,
        sub: &Self::Sub,
        input: SubInput<'_, Self::Msg, Self::Arg>,
    ) -> (Self::Sub, Vec<Self::Out>);

    /// Calls to inject, computed from the pre-step state.
    fn split(
        &self,
        pre: &DefaultMap<Self::Tag, Self::Sub>,
        trigger: Trigger<'_, Self::Tag, Self::Msg, Self::Arg>,
    ) -> Vec<(Self::Tag, Self::Arg)>;

    fn in_domain(&self, _tag: &Self::Tag) -> bool {
        true
    }
}

pub const DEFAULT_CALL_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComposeError {
    #[error("tag {0} outside the composition's domain")]
    UnknownTag(String),
    #[error("injected calls nested deeper than {0}")]
    DepthExceeded(usize),
}

pub type Dispatched<C> = (
    DefaultMap<<C as Composition>::Tag, <C as Composition>::Sub>,
    Vec<(<C as Composition>::Tag, <C as Composition>::Out)>,
);

/// One synchronous step.
///
/// Timeouts run only on explicit entries, in tag order. Calls produced by
/// `split` run after the input, ascending by tag; calls they in turn produce
/// form the next round, up to `max_depth` rounds.
pub fn sync_dispatch<C: Composition>(
    comp: &C,
    state: &DefaultMap<C::Tag, C::Sub>,
    input: &Input<C::Tag, C::Msg, C::Arg>,
    max_depth: usize,
) -> Result<Dispatched<C>, ComposeError> {
    let mut next = state.clone();
    let mut out = Vec::new();
    let mut exec = |next: &mut DefaultMap<C::Tag, C::Sub>, tag: &C::Tag, sub_in: SubInput<'_, C::Msg, C::Arg>| {
        let (sub, sent) = comp.run(tag, &next.get(tag), sub_in);
        next.set(tag.clone(), sub);
        out.extend(sent.into_iter().map(|m| (tag.clone(), m)));
    };
    match input {
        Input::Timeout(now) => {
            let tags: Vec<C::Tag> = state.explicit().map(|(k, _)| k.clone()).collect();
            for tag in &tags {
                exec(&mut next, tag, SubInput::Timeout(*now));
            }
        }
        Input::Message(tag, m) => {
            if !comp.in_domain(tag) {
                return Err(ComposeError::UnknownTag(format!("{tag:?}")));
            }
            exec(&mut next, tag, SubInput::Message(m));
        }
        Input::Call(Some(tag), a) => {
            if !comp.in_domain(tag) {
                return Err(ComposeError::UnknownTag(format!("{tag:?}")));
            }
            exec(&mut next, tag, SubInput::Call(a));
        }
        Input::Call(None, _) => {}
    }
    let mut round = comp.split(state, Trigger::Input(input));
    let mut depth = 0;
    while !round.is_empty() {
        depth += 1;
        if depth > max_depth {
            return Err(ComposeError::DepthExceeded(max_depth));
        }
        round.sort_by(|a, b| a.0.cmp(&b.0));
        let mut following = Vec::new();
        for (tag, arg) in &round {
            if !comp.in_domain(tag) {
                return Err(ComposeError::UnknownTag(format!("{tag:?}")));
            }
            exec(&mut next, tag, SubInput::Call(arg));
            following.extend(comp.split(state, Trigger::Injected(tag, arg)));
        }
        round = following;
    }
    Ok((next, out))
}

/// Checks that a sub-protocol in its zero state ignores every sampled timeout.
pub fn zero_noop_check<S: PartialEq, O>(
    run: impl Fn(&S, Millis) -> (S, Vec<O>),
    zero: &S,
    samples: &[Millis],
) -> Verdict {
    for (i, now) in samples.iter().enumerate() {
        let (after, sent) = run(zero, *now);
        if after != *zero {
            return Err(Violation::new(i, Clause::Invariant, format!("zero state changed on timeout at {now}")));
        }
        if !sent.is_empty() {
            return Err(Violation::new(i, Clause::Invariant, format!("zero state transmitted on timeout at {now}")));
        }
    }
    Ok(())
}

/// Task of a composed specification, tagged with its origin.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side<A, B> {
    Left(A),
    Right(B),
}

pub type ProtocolInvariant<T1, T2> = Arc<dyn Fn(&T1, &T2) -> bool + Send + Sync>;

/// Product of two specifications; `p` constrains only pairs of transitions.
pub fn par_compose<S1, T1, F1, S2, T2, F2>(
    a: SpecMachine<S1, T1, F1>,
    b: SpecMachine<S2, T2, F2>,
    p: Option<ProtocolInvariant<T1, T2>>,
) -> SpecMachine<(S1, S2), (T1, T2), Side<F1, F2>>
where
    S1: 'static,
    T1: 'static,
    F1: 'static,
    S2: 'static,
    T2: 'static,
    F2: 'static,
{
    let (ai, bi) = (a.init.clone(), b.init.clone());
    let (an, bn) = (a.next.clone(), b.next.clone());
    let (av, bv) = (a.invar.clone(), b.invar.clone());
    let (af, bf) = (a.fair.clone(), b.fair.clone());
    let (at, bt) = (a.tasks.clone(), b.tasks.clone());
    SpecMachine {
        init: Arc::new(move |s: &(S1, S2)| ai(&s.0) && bi(&s.1)),
        next: Arc::new(move |s: &(S1, S2), t: &(T1, T2)| Some((an(&s.0, &t.0)?, bn(&s.1, &t.1)?))),
        invar: Arc::new(move |s: &(S1, S2), t: &(T1, T2)| {
            av(&s.0, &t.0) && bv(&s.1, &t.1) && p.as_ref().is_none_or(|p| p(&t.0, &t.1))
        }),
        fair: Arc::new(move |f: &Side<F1, F2>, s: &(S1, S2), t: &(T1, T2)| match f {
            Side::Left(f) => af(f, &s.0, &t.0),
            Side::Right(f) => bf(f, &s.1, &t.1),
        }),
        tasks: Arc::new(move |s: &(S1, S2)| {
            let mut all: Vec<Side<F1, F2>> = at(&s.0).into_iter().map(Side::Left).collect();
            all.extend(bt(&s.1).into_iter().map(Side::Right));
            all
        }),
    }
}

/// Pairwise refinement of a composed system. A step whose component images
/// produce different numbers of abstract transitions maps to none.
pub fn compose_refinement<CS1, CT1, AS1, AT1, CS2, CT2, AS2, AT2>(
    rc1: RefinementFn<CS1, CT1, AS1, AT1>,
    rc2: RefinementFn<CS2, CT2, AS2, AT2>,
) -> RefinementFn<(CS1, CS2), (CT1, CT2), (AS1, AS2), (AT1, AT2)>
where
    CS1: 'static,
    CT1: 'static,
    AS1: 'static,
    AT1: 'static,
    CS2: 'static,
    CT2: 'static,
    AS2: 'static,
    AT2: 'static,
{
    let trace_only = rc1.trace_only || rc2.trace_only;
    RefinementFn::new(
        move |s: &(CS1, CS2), t: &(CT1, CT2)| {
            let (a1, t1) = rc1.apply(&s.0, &t.0);
            let (a2, t2) = rc2.apply(&s.1, &t.1);
            let ts = if t1.len() == t2.len() { t1.into_iter().zip(t2).collect() } else { Vec::new() };
            ((a1, a2), ts)
        },
        trace_only,
    )
}
