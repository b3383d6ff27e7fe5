//! Test support: a random term/knowledge generator and an independent
//! brute-force derivability enumerator used as the oracle for the deduction
//! engine. The enumerator shares no code with `deduct`: it is a bounded
//! fixpoint over a finite term universe, alternating full decomposition
//! passes with single composition rounds.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symproto_core::term::{dh_exp, subterms, KeyType, Term};

const KEY_TYPES: [KeyType; 5] = [
    KeyType::Aenc,
    KeyType::Adec,
    KeyType::Sign,
    KeyType::Verify,
    KeyType::Senc,
];

/// Decide derivability by exhaustive closure over the subterm universe of
/// `base` and `target` (extended with opening keys and exponent
/// sub-multisets), with at most `rounds` composition rounds.
pub fn bf_derivable(
    base: &[Term],
    attacker_nonces: &BTreeSet<u64>,
    target: &Term,
    rounds: usize,
) -> bool {
    let mut universe: BTreeSet<Term> = BTreeSet::new();
    for t in base {
        subterms(t, &mut universe);
    }
    subterms(target, &mut universe);

    let mut extra: Vec<Term> = Vec::new();
    for t in &universe {
        match t {
            // The DH rule peels exponents one at a time, so every nonempty
            // exponent sub-multiset is a potential intermediate.
            Term::Exp(b, es) if es.len() >= 2 => {
                for mask in 1u32..(1 << es.len()) {
                    let mut acc: Option<Term> = None;
                    for (i, e) in es.iter().enumerate() {
                        if mask & (1 << i) != 0 {
                            acc = Some(match acc {
                                None => dh_exp(b, e),
                                Some(prev) => dh_exp(&prev, e),
                            });
                        }
                    }
                    extra.push(acc.expect("mask is nonzero"));
                }
            }
            // Opening keys may be synthesizable even when never observed.
            Term::Key(u, seed) => {
                if let Some(ubar) = u.opening() {
                    extra.push(Term::key(ubar, (**seed).clone()));
                }
            }
            _ => {}
        }
    }
    universe.extend(extra);

    let mut known: BTreeSet<Term> = base.iter().cloned().collect();
    for _ in 0..rounds {
        decompose_fixpoint(&mut known);
        compose_round(&mut known, &universe, attacker_nonces);
    }
    decompose_fixpoint(&mut known);
    known.contains(target)
}

fn decompose_fixpoint(known: &mut BTreeSet<Term>) {
    loop {
        let mut fresh: Vec<Term> = Vec::new();
        for t in known.iter() {
            match t {
                Term::Pair(l, r) => {
                    fresh.push((**l).clone());
                    fresh.push((**r).clone());
                }
                Term::List(items) => fresh.extend(items.iter().cloned()),
                Term::Seal(k, p) => {
                    if let Term::Key(u, seed) = &**k {
                        if let Some(ubar) = u.opening() {
                            if known.contains(&Term::key(ubar, (**seed).clone())) {
                                fresh.push((**p).clone());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        let mut changed = false;
        for t in fresh {
            changed |= known.insert(t);
        }
        if !changed {
            return;
        }
    }
}

fn compose_round(known: &mut BTreeSet<Term>, universe: &BTreeSet<Term>, attacker: &BTreeSet<u64>) {
    let mut fresh: Vec<Term> = Vec::new();
    for t in universe {
        if known.contains(t) {
            continue;
        }
        let make = match t {
            Term::Int(_) | Term::Tag(_) => true,
            Term::Nonce(id) => attacker.contains(id),
            Term::Pair(l, r) => known.contains(l) && known.contains(r),
            Term::List(items) => items.iter().all(|e| known.contains(e)),
            Term::Key(u, seed) => {
                matches!(u, KeyType::Aenc | KeyType::Verify) || known.contains(seed)
            }
            Term::Seal(k, p) => known.contains(k) && known.contains(p),
            Term::Exp(_, es) if es.len() == 1 => true,
            Term::Exp(b, es) => (0..es.len()).any(|i| {
                let mut rest = es.clone();
                let e = rest.remove(i);
                known.contains(&e) && known.contains(&Term::Exp(b.clone(), rest))
            }),
        };
        if make {
            fresh.push(t.clone());
        }
    }
    known.extend(fresh);
}

// ---------------------------------------------------------------------------
// Random generation.
// ---------------------------------------------------------------------------

pub struct TermGen {
    pub rng: ChaCha8Rng,
}

impl TermGen {
    pub fn new(seed: u64) -> TermGen {
        TermGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn atom(&mut self) -> Term {
        match self.rng.random_range(0..4u8) {
            0 => Term::Nonce(self.rng.random_range(0..4u64)),
            1 => Term::tag(["t.a", "t.b", "dh.g"][self.rng.random_range(0..3usize)]),
            2 => Term::Int(self.rng.random_range(0..3i64)),
            _ => Term::Nonce(self.rng.random_range(0..4u64)),
        }
    }

    fn key_type(&mut self) -> KeyType {
        KEY_TYPES[self.rng.random_range(0..KEY_TYPES.len())]
    }

    /// A random term with structural depth at most `depth`.
    pub fn term(&mut self, depth: usize) -> Term {
        if depth == 0 || self.rng.random_bool(0.35) {
            return self.atom();
        }
        match self.rng.random_range(0..5u8) {
            0 => Term::pair(self.term(depth - 1), self.term(depth - 1)),
            1 => {
                let n = self.rng.random_range(0..3usize);
                Term::list((0..n).map(|_| self.term(depth - 1)))
            }
            2 => Term::key(self.key_type(), self.term(depth - 1)),
            3 => {
                let key = Term::key(self.key_type(), self.term(depth - 1));
                Term::Seal(Box::new(key), Box::new(self.term(depth - 1)))
            }
            _ => dh_exp(&self.term(depth - 1), &self.term(depth - 1)),
        }
    }

    /// A knowledge base of at most 6 terms over at most 4 nonces, with the
    /// highest nonce id marked attacker-origin.
    pub fn knowledge_base(&mut self) -> (Vec<Term>, BTreeSet<u64>) {
        let n = self.rng.random_range(1..=6usize);
        let base: Vec<Term> = (0..n).map(|_| self.term(3)).collect();
        let attacker: BTreeSet<u64> = [3u64].into_iter().collect();
        (base, attacker)
    }

    /// Targets for an agreement check: every subterm of the base plus a few
    /// two-step compositions over those subterms.
    pub fn targets(&mut self, base: &[Term], compositions: usize) -> Vec<Term> {
        let mut subs: BTreeSet<Term> = BTreeSet::new();
        for t in base {
            subterms(t, &mut subs);
        }
        let subs: Vec<Term> = subs.into_iter().collect();
        let mut targets = subs.clone();
        for _ in 0..compositions {
            let pick = |g: &mut TermGen| subs[g.rng.random_range(0..subs.len())].clone();
            let a = pick(self);
            let b = pick(self);
            let t = match self.rng.random_range(0..5u8) {
                0 => Term::pair(a, b),
                1 => Term::list([a, b]),
                2 => Term::key(self.key_type(), a),
                3 => {
                    let key = Term::key(self.key_type(), a);
                    Term::Seal(Box::new(key), Box::new(b))
                }
                _ => dh_exp(&a, &b),
            };
            targets.push(t);
        }
        targets
    }
}
