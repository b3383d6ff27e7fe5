//! Attacker strategies. The strategy decides which term a blocked receiver is
//! handed: `Passive` replays pool messages, `Mutating` additionally injects
//! synthesized terms built from derivable material, `Scripted` runs an
//! explicit attack script step by step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::term::{subterms, KeyType, Term};

#[derive(Debug, Clone, Copy)]
pub struct MutatingConfig {
    /// Maximum nesting depth of synthesized injections.
    pub depth: usize,
    /// Probability of attempting an injection instead of a pool replay.
    pub injection_prob: f64,
}

impl Default for MutatingConfig {
    fn default() -> Self {
        MutatingConfig {
            depth: 3,
            injection_prob: 0.3,
        }
    }
}

/// One step of an attack script: inspect the pool and, when ready, produce the
/// term to deliver. Returning `None` leaves the script waiting on this step.
pub struct ScriptStep {
    pub label: String,
    pub build: Box<dyn FnMut(&[Term]) -> Option<Term> + Send>,
}

impl ScriptStep {
    pub fn new(
        label: impl Into<String>,
        build: impl FnMut(&[Term]) -> Option<Term> + Send + 'static,
    ) -> ScriptStep {
        ScriptStep {
            label: label.into(),
            build: Box::new(build),
        }
    }
}

pub struct Script {
    pub(crate) steps: Vec<ScriptStep>,
    pub(crate) cursor: usize,
    /// When set, the attacker behaves passively whenever the current script
    /// step cannot fire, keeping ordinary traffic flowing around the script.
    pub(crate) passive_fallback: bool,
}

impl Script {
    pub fn new(steps: Vec<ScriptStep>) -> Script {
        Script {
            steps,
            cursor: 0,
            passive_fallback: false,
        }
    }

    pub fn with_passive_fallback(mut self) -> Script {
        self.passive_fallback = true;
        self
    }

    pub fn finished(&self) -> bool {
        self.cursor >= self.steps.len()
    }
}

pub enum AttackerStrategy {
    /// Deliver pool messages only, chosen uniformly among those a blocked
    /// receiver accepts. Messages can be duplicated or never delivered.
    Passive,
    /// Passive, plus derivable-term injections.
    Mutating(MutatingConfig),
    /// Explicit step list (e.g. the Lowe man-in-the-middle relay).
    Scripted(Script),
}

/// Build a random term every part of which is derivable from `saturated`
/// (attacker-origin nonces come from `fresh_nonce`). Composites whose parts
/// are all derivable are themselves derivable, so the result never violates
/// the injection invariant.
pub(crate) fn synthesize(
    rng: &mut ChaCha8Rng,
    saturated: &[Term],
    tag_pool: &[String],
    fresh_nonce: &mut dyn FnMut() -> Term,
    depth: usize,
) -> Term {
    if depth == 0 || rng.random_bool(0.3) {
        return synth_leaf(rng, saturated, tag_pool, fresh_nonce);
    }
    match rng.random_range(0..5u8) {
        0 => Term::pair(
            synthesize(rng, saturated, tag_pool, fresh_nonce, depth - 1),
            synthesize(rng, saturated, tag_pool, fresh_nonce, depth - 1),
        ),
        1 => {
            let n = rng.random_range(0..4usize);
            Term::list(
                (0..n).map(|_| synthesize(rng, saturated, tag_pool, fresh_nonce, depth - 1)),
            )
        }
        2 => {
            let key = synth_key(rng, saturated, tag_pool, fresh_nonce, depth - 1);
            let payload = synthesize(rng, saturated, tag_pool, fresh_nonce, depth - 1);
            Term::Seal(Box::new(key), Box::new(payload))
        }
        3 => {
            let base = synthesize(rng, saturated, tag_pool, fresh_nonce, depth - 1);
            let exp = synthesize(rng, saturated, tag_pool, fresh_nonce, depth - 1);
            crate::term::dh_exp(&base, &exp)
        }
        _ => synth_key(rng, saturated, tag_pool, fresh_nonce, depth.saturating_sub(1)),
    }
}

fn synth_key(
    rng: &mut ChaCha8Rng,
    saturated: &[Term],
    tag_pool: &[String],
    fresh_nonce: &mut dyn FnMut() -> Term,
    depth: usize,
) -> Term {
    // Prefer reusing an observed key; otherwise mint one. Key types whose
    // derivability depends on the seed get a derivable seed by construction.
    let observed: Vec<&Term> = saturated.iter().filter(|t| t.is_key()).collect();
    if !observed.is_empty() && rng.random_bool(0.5) {
        return observed[rng.random_range(0..observed.len())].clone();
    }
    let ktype = match rng.random_range(0..5u8) {
        0 => KeyType::Aenc,
        1 => KeyType::Adec,
        2 => KeyType::Sign,
        3 => KeyType::Verify,
        _ => KeyType::Senc,
    };
    let seed = synthesize(rng, saturated, tag_pool, fresh_nonce, depth);
    Term::key(ktype, seed)
}

fn synth_leaf(
    rng: &mut ChaCha8Rng,
    saturated: &[Term],
    tag_pool: &[String],
    fresh_nonce: &mut dyn FnMut() -> Term,
) -> Term {
    for _ in 0..4 {
        match rng.random_range(0..4u8) {
            0 if !saturated.is_empty() => {
                return saturated[rng.random_range(0..saturated.len())].clone();
            }
            1 if !tag_pool.is_empty() => {
                return Term::tag(&tag_pool[rng.random_range(0..tag_pool.len())]);
            }
            2 => return Term::Int(rng.random_range(0..8i64)),
            3 => return fresh_nonce(),
            _ => {}
        }
    }
    Term::Int(0)
}

/// Tags occurring anywhere in the given terms; synthesized injections reuse
/// them so protocol-shaped garbage actually reaches the receivers.
pub(crate) fn observed_tags(terms: &[Term]) -> Vec<String> {
    let mut all = std::collections::BTreeSet::new();
    for t in terms {
        let mut subs = std::collections::BTreeSet::new();
        subterms(t, &mut subs);
        for s in subs {
            if let Term::Tag(name) = s {
                all.insert(name);
            }
        }
    }
    all.into_iter().collect()
}
