//! Intruder deduction: what the attacker knows and what it can build.
//!
//! `Knowledge` holds everything observed on the network plus its saturation,
//! the decomposition closure (splitting pairs and lists, opening seals whose
//! opening key is derivable). `derivable` then decides synthesis over the
//! saturated set, mirroring the public-term rules: ints, tags, and
//! attacker-origin nonces are free; aenc and verify keys are free; a key share
//! with a single exponent is free; composite terms need all their parts.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::runtime::{EventKind, Trace};
use crate::term::{KeyType, NonceOrigin, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Derivable,
    Underivable,
}

impl Verdict {
    pub fn from_bool(derivable: bool) -> Verdict {
        if derivable {
            Verdict::Derivable
        } else {
            Verdict::Underivable
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Derivable => write!(f, "derivable"),
            Verdict::Underivable => write!(f, "underivable"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Knowledge {
    base: BTreeSet<Term>,
    saturated: BTreeSet<Term>,
    attacker_nonces: BTreeSet<u64>,
    /// Terms added since the last saturation pass.
    pending: Vec<Term>,
    /// Set when new attacker nonces may have unlocked sealed terms.
    rescan: bool,
}

impl Knowledge {
    pub fn new() -> Knowledge {
        Knowledge::default()
    }

    pub fn with_terms<I: IntoIterator<Item = Term>>(terms: I) -> Knowledge {
        let mut k = Knowledge::new();
        for t in terms {
            k.add(t);
        }
        k
    }

    /// Record an observed term. Idempotent on equal terms.
    pub fn add(&mut self, t: Term) {
        if self.base.insert(t.clone()) {
            self.pending.push(t);
        }
    }

    /// Mark a nonce id as attacker-generated; such nonces are always derivable.
    pub fn register_attacker_nonce(&mut self, id: u64) {
        if self.attacker_nonces.insert(id) {
            self.rescan = true;
        }
    }

    pub fn base(&self) -> &BTreeSet<Term> {
        &self.base
    }

    pub fn attacker_nonces(&self) -> &BTreeSet<u64> {
        &self.attacker_nonces
    }

    fn dirty(&self) -> bool {
        !self.pending.is_empty() || self.rescan
    }

    /// Bring the decomposition closure up to date. Incremental: only terms
    /// added since the last pass are absorbed, then sealed terms are
    /// re-scanned until no more opening keys become derivable. The closure
    /// only ever gains subterms of the base, so the loops terminate.
    pub fn saturate(&mut self) {
        if !self.dirty() {
            return;
        }
        let mut work = std::mem::take(&mut self.pending);
        self.rescan = false;
        loop {
            // Structural decomposition of everything reachable.
            while let Some(t) = work.pop() {
                if !self.saturated.insert(t.clone()) {
                    continue;
                }
                match &t {
                    Term::Pair(l, r) => {
                        work.push((**l).clone());
                        work.push((**r).clone());
                    }
                    Term::List(items) => work.extend(items.iter().cloned()),
                    // Keys, Exps, and (for now) sealed terms do not decompose.
                    _ => {}
                }
            }
            // Open every sealed term whose opening key is now derivable;
            // payloads may unlock further seals, so run to fixpoint.
            let mut unlocked: Vec<Term> = Vec::new();
            for t in &self.saturated {
                if let Term::Seal(k, p) = t {
                    if self.saturated.contains(p) {
                        continue;
                    }
                    if let Term::Key(u, seed) = &**k {
                        if let Some(ubar) = u.opening() {
                            let opener = Term::key(ubar, (**seed).clone());
                            if derive_in(
                                &self.saturated,
                                &self.attacker_nonces,
                                &opener,
                                &mut HashMap::new(),
                            ) {
                                unlocked.push((**p).clone());
                            }
                        }
                    }
                }
            }
            if unlocked.is_empty() {
                break;
            }
            work = unlocked;
        }
    }

    pub fn saturated(&mut self) -> &BTreeSet<Term> {
        self.saturate();
        &self.saturated
    }

    /// Can the attacker synthesize `t` from what it has seen?
    pub fn derivable(&mut self, t: &Term) -> bool {
        self.saturate();
        derive_in(&self.saturated, &self.attacker_nonces, t, &mut HashMap::new())
    }

    /// Membership in the saturated set only (no synthesis); cheap check for
    /// terms that are known to have been observed.
    pub fn contains_saturated(&mut self, t: &Term) -> bool {
        self.saturate();
        self.saturated.contains(t)
    }
}

/// Synthesis over a saturated set. Memoized per query; the DH clause recurses
/// on exponent sub-multisets, which repeats subproblems.
fn derive_in(
    saturated: &BTreeSet<Term>,
    attacker_nonces: &BTreeSet<u64>,
    t: &Term,
    memo: &mut HashMap<Term, bool>,
) -> bool {
    if saturated.contains(t) {
        return true;
    }
    if let Some(&hit) = memo.get(t) {
        return hit;
    }
    // Guard against cycles through the Exp sub-multiset recursion.
    memo.insert(t.clone(), false);
    let result = match t {
        Term::Int(_) | Term::Tag(_) => true,
        Term::Nonce(id) => attacker_nonces.contains(id),
        Term::Pair(l, r) => {
            derive_in(saturated, attacker_nonces, l, memo)
                && derive_in(saturated, attacker_nonces, r, memo)
        }
        Term::List(items) => items
            .iter()
            .all(|e| derive_in(saturated, attacker_nonces, e, memo)),
        Term::Key(u, seed) => match u {
            // Encryption and verification keys are public by rule.
            KeyType::Aenc | KeyType::Verify => true,
            KeyType::Adec | KeyType::Sign | KeyType::Senc => {
                derive_in(saturated, attacker_nonces, seed, memo)
            }
        },
        Term::Seal(k, p) => {
            derive_in(saturated, attacker_nonces, k, memo)
                && derive_in(saturated, attacker_nonces, p, memo)
        }
        Term::Exp(_, exps) if exps.len() == 1 => true, // key shares are free
        Term::Exp(base, exps) => (0..exps.len()).any(|i| {
            let mut rest = exps.clone();
            let e = rest.remove(i);
            derive_in(saturated, attacker_nonces, &e, memo)
                && derive_in(
                    saturated,
                    attacker_nonces,
                    &Term::Exp(base.clone(), rest),
                    memo,
                )
        }),
    };
    memo.insert(t.clone(), result);
    result
}

/// Rebuild attacker knowledge from a finished trace: everything sent or
/// leaked, plus every delivered term (attacker injections appear as receives),
/// with nonce origins taken from the trace's creation events.
pub fn knowledge_from_trace(trace: &Trace) -> Knowledge {
    let mut k = Knowledge::new();
    for ev in trace.events() {
        match &ev.kind {
            EventKind::Send { term } | EventKind::Leak { term } => k.add(term.clone()),
            EventKind::Recv { term, .. } => k.add(term.clone()),
            EventKind::NonceCreated { id, origin, .. } => {
                if *origin == NonceOrigin::Attacker {
                    k.register_attacker_nonce(*id);
                }
            }
            _ => {}
        }
    }
    k
}

/// The message-derivability oracle: can the attacker, having watched the whole
/// run, synthesize `target`?
pub fn derivability_oracle(trace: &Trace, target: &Term) -> Verdict {
    let mut k = knowledge_from_trace(trace);
    Verdict::from_bool(k.derivable(target))
}
