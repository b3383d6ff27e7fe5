//! Executable authentication protocols: Needham-Schroeder (original, flawed),
//! Needham-Schroeder-Lowe, and the signed Diffie-Hellman ISO protocol, plus
//! the scripted Lowe man-in-the-middle relay.
//!
//! Role functions are ordinary in-process code over [`ProcCtx`]; every send
//! and recv is a scheduler yield point. Any open or pattern failure returns
//! `None` rather than crashing. The recv filters only pre-screen deliveries
//! (right opening key, right message tag) and are strictly coarser than the
//! role's own checks, so wrong identities, stale nonces, and malformed bodies
//! still reach the role code and fail there.

use crate::runtime::{ProcCtx, Script, ScriptStep, Sim};
use crate::term::{
    bind, exact, match_pattern, open, pkey, seal, tag_lit, dh_exp, KeyType, Term,
};

/// Unwrap an `Option` inside a role returning `Sim<Option<_>>`; a miss aborts
/// the role with `Ok(None)`, mirroring the option-monad reading of `let`.
macro_rules! try_opt {
    ($e:expr) => {
        match $e {
            Some(v) => v,
            None => return Ok(None),
        }
    };
}

/// Same, for fallible term operations (bad key types and the like).
macro_rules! try_term {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(_) => return Ok(None),
        }
    };
}

/// The distinguished public DH base.
pub fn dh_generator() -> Term {
    Term::tag("dh.g")
}

/// A completed handshake, from one endpoint's point of view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub init_pk: Term,
    pub resp_pk: Term,
    pub init_share: Term,
    pub resp_share: Term,
    /// The shared DH secret; `None` for the nonce-based protocols.
    pub secret: Option<Term>,
    pub key: Term,
}

/// NS/NSL session key shape: `Key(senc, [pkI, pkR, a, b])`.
pub fn nsl_session_key(pk_i: &Term, pk_r: &Term, a: &Term, b: &Term) -> Term {
    Term::key(
        KeyType::Senc,
        Term::list([pk_i.clone(), pk_r.clone(), a.clone(), b.clone()]),
    )
}

/// ISO session key shape: `Key(senc, [pkI, pkR, g^a, g^b, g^ab])`.
pub fn iso_session_key(pk_i: &Term, pk_r: &Term, ga: &Term, gb: &Term, secret: &Term) -> Term {
    Term::key(
        KeyType::Senc,
        Term::list([
            pk_i.clone(),
            pk_r.clone(),
            ga.clone(),
            gb.clone(),
            secret.clone(),
        ]),
    )
}

/// Accepts sealed terms our `opener` opens whose payload is a list headed by
/// `tag`.
fn sealed_msg(opener: &Term, tag: &str) -> impl Fn(&Term) -> bool + Send + 'static {
    let opener = opener.clone();
    let tag = Term::tag(tag);
    move |t| match open(&opener, t) {
        Some(Term::List(items)) => items.first() == Some(&tag),
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Needham-Schroeder(-Lowe).
//
//   I -> R : aenc pkR [m1; a; pkI]
//   R -> I : aenc pkI [m2; a; b; pkR]     (original NS omits pkR)
//   I -> R : aenc pkR [m3; b]
// ---------------------------------------------------------------------------

fn ns_like_initiator(
    ctx: &mut ProcCtx,
    sk_i: &Term,
    pk_r: &Term,
    check_responder_identity: bool,
) -> Sim<Option<Term>> {
    let pk_i = try_term!(pkey(sk_i));
    let a = ctx.mk_nonce();
    let m1 = try_term!(seal(
        pk_r,
        &Term::list([Term::tag("m1"), a.clone(), pk_i.clone()]),
    ));
    ctx.send(m1)?;

    let m2 = ctx.recv_where(sealed_msg(sk_i, "m2"))?;
    let payload = try_opt!(open(sk_i, &m2));
    let b = if check_responder_identity {
        let pattern = [
            tag_lit("m2"),
            exact(a.clone()),
            bind("b"),
            exact(pk_r.clone()),
        ];
        let mut binds = try_opt!(match_pattern(&pattern, &payload));
        binds.remove("b").unwrap()
    } else {
        let pattern = [tag_lit("m2"), exact(a.clone()), bind("b")];
        let mut binds = try_opt!(match_pattern(&pattern, &payload));
        binds.remove("b").unwrap()
    };

    let m3 = try_term!(seal(pk_r, &Term::list([Term::tag("m3"), b.clone()])));
    ctx.send(m3)?;
    Ok(Some(nsl_session_key(&pk_i, pk_r, &a, &b)))
}

fn ns_like_responder(
    ctx: &mut ProcCtx,
    sk_r: &Term,
    send_responder_identity: bool,
) -> Sim<Option<(Term, Term)>> {
    let pk_r = try_term!(pkey(sk_r));
    let m1 = ctx.recv_where(sealed_msg(sk_r, "m1"))?;
    let payload = try_opt!(open(sk_r, &m1));
    let mut binds = try_opt!(match_pattern(&[tag_lit("m1"), bind("a"), bind("pkI")], &payload));
    let a = binds.remove("a").unwrap();
    let pk_i = binds.remove("pkI").unwrap();
    if !pk_i.is_aenc_key() {
        return Ok(None);
    }

    let b = ctx.mk_nonce();
    let mut m2_body = vec![Term::tag("m2"), a.clone(), b.clone()];
    if send_responder_identity {
        m2_body.push(pk_r.clone());
    }
    // The reply is sealed under the initiator's key so that only the claimed
    // peer can read the fresh nonce.
    let m2 = try_term!(seal(&pk_i, &Term::list(m2_body)));
    ctx.send(m2)?;

    let m3 = ctx.recv_where(sealed_msg(sk_r, "m3"))?;
    let payload = try_opt!(open(sk_r, &m3));
    try_opt!(match_pattern(&[tag_lit("m3"), exact(b.clone())], &payload));
    let key = nsl_session_key(&pk_i, &pk_r, &a, &b);
    Ok(Some((pk_i, key)))
}

/// NSL initiator: returns the session key, or `None` on any failure.
pub fn nsl_initiator(ctx: &mut ProcCtx, sk_i: &Term, pk_r: &Term) -> Sim<Option<Term>> {
    ns_like_initiator(ctx, sk_i, pk_r, true)
}

/// NSL responder: returns the claimed peer identity and the session key.
pub fn nsl_responder(ctx: &mut ProcCtx, sk_r: &Term) -> Sim<Option<(Term, Term)>> {
    ns_like_responder(ctx, sk_r, true)
}

/// Original Needham-Schroeder initiator: does not check who the second
/// message names, because the second message names nobody.
pub fn ns_original_initiator(ctx: &mut ProcCtx, sk_i: &Term, pk_r: &Term) -> Sim<Option<Term>> {
    ns_like_initiator(ctx, sk_i, pk_r, false)
}

/// Original Needham-Schroeder responder: omits its identity from `m2`.
pub fn ns_original_responder(ctx: &mut ProcCtx, sk_r: &Term) -> Sim<Option<(Term, Term)>> {
    ns_like_responder(ctx, sk_r, false)
}

// ---------------------------------------------------------------------------
// ISO signed Diffie-Hellman.
//
//   I -> R : [m1; g^a; pkI]
//   R -> I : sign skR [m2; g^a; g^b; pkI]
//   I -> R : sign skI [m3; g^a; g^b; pkR]
// ---------------------------------------------------------------------------

/// An incoming connection request: the initiator's key share and identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsoRequest {
    pub init_share: Term,
    pub client_pk: Term,
}

pub fn iso_initiator_session(
    ctx: &mut ProcCtx,
    sk_i: &Term,
    pk_r: &Term,
) -> Sim<Option<Session>> {
    let pk_i = try_term!(pkey(sk_i));
    let a = ctx.mk_nonce();
    let ga = dh_exp(&dh_generator(), &a);
    ctx.send(Term::list([Term::tag("m1"), ga.clone(), pk_i.clone()]))?;

    // The filter pins our fresh key share so replies to other handshakes
    // never reach this one; identity and arity are still checked below.
    let m2 = ctx.recv_where({
        let opener = pk_r.clone();
        let tag = Term::tag("m2");
        let ga = ga.clone();
        move |t| match open(&opener, t) {
            Some(Term::List(items)) => {
                items.first() == Some(&tag) && items.get(1) == Some(&ga)
            }
            _ => false,
        }
    })?;
    let payload = try_opt!(open(pk_r, &m2));
    let pattern = [
        tag_lit("m2"),
        exact(ga.clone()),
        bind("gb"),
        exact(pk_i.clone()),
    ];
    let mut binds = try_opt!(match_pattern(&pattern, &payload));
    let gb = binds.remove("gb").unwrap();

    let m3 = try_term!(seal(
        sk_i,
        &Term::list([Term::tag("m3"), ga.clone(), gb.clone(), pk_r.clone()]),
    ));
    ctx.send(m3)?;

    let secret = dh_exp(&gb, &a);
    let key = iso_session_key(&pk_i, pk_r, &ga, &gb, &secret);
    Ok(Some(Session {
        init_pk: pk_i,
        resp_pk: pk_r.clone(),
        init_share: ga,
        resp_share: gb,
        secret: Some(secret),
        key,
    }))
}

/// ISO initiator: returns the session key.
pub fn iso_initiator(ctx: &mut ProcCtx, sk_i: &Term, pk_r: &Term) -> Sim<Option<Term>> {
    Ok(iso_initiator_session(ctx, sk_i, pk_r)?.map(|s| s.key))
}

/// Wait for a connection request (the first ISO message) and destructure it.
/// The caller decides whether to accept it with [`iso_confirm`].
pub fn iso_listen(ctx: &mut ProcCtx) -> Sim<IsoRequest> {
    let m1 = ctx.recv_where(|t| match t {
        Term::List(items) => items.len() == 3 && items[0] == Term::tag("m1"),
        _ => false,
    })?;
    let (init_share, client_pk) = match &m1 {
        Term::List(items) => (items[1].clone(), items[2].clone()),
        _ => unreachable!("filter admits lists only"),
    };
    Ok(IsoRequest {
        init_share,
        client_pk,
    })
}

pub fn iso_confirm_session(
    ctx: &mut ProcCtx,
    sk_r: &Term,
    req: &IsoRequest,
) -> Sim<Option<Session>> {
    if !req.client_pk.is_verify_key() {
        return Ok(None);
    }
    let pk_r = try_term!(pkey(sk_r));
    let pk_i = req.client_pk.clone();
    let ga = req.init_share.clone();

    let b = ctx.mk_nonce();
    let gb = dh_exp(&dh_generator(), &b);
    let m2 = try_term!(seal(
        sk_r,
        &Term::list([Term::tag("m2"), ga.clone(), gb.clone(), pk_i.clone()]),
    ));
    ctx.send(m2)?;

    // Pin both shares; the peer-identity binding is checked in the pattern.
    let m3 = ctx.recv_where({
        let opener = pk_i.clone();
        let tag = Term::tag("m3");
        let (ga, gb) = (ga.clone(), gb.clone());
        move |t| match open(&opener, t) {
            Some(Term::List(items)) => {
                items.first() == Some(&tag)
                    && items.get(1) == Some(&ga)
                    && items.get(2) == Some(&gb)
            }
            _ => false,
        }
    })?;
    let payload = try_opt!(open(&pk_i, &m3));
    let pattern = [
        tag_lit("m3"),
        exact(ga.clone()),
        exact(gb.clone()),
        exact(pk_r.clone()),
    ];
    try_opt!(match_pattern(&pattern, &payload));

    let secret = dh_exp(&ga, &b);
    let key = iso_session_key(&pk_i, &pk_r, &ga, &gb, &secret);
    Ok(Some(Session {
        init_pk: pk_i,
        resp_pk: pk_r,
        init_share: ga,
        resp_share: gb,
        secret: Some(secret),
        key,
    }))
}

/// Accept a connection request: run the rest of the ISO handshake and return
/// the claimed peer identity and session key.
pub fn iso_confirm(
    ctx: &mut ProcCtx,
    sk_r: &Term,
    req: &IsoRequest,
) -> Sim<Option<(Term, Term)>> {
    Ok(iso_confirm_session(ctx, sk_r, req)?.map(|s| (s.init_pk.clone(), s.key)))
}

/// Monolithic ISO responder: listen composed with confirm.
pub fn iso_responder(ctx: &mut ProcCtx, sk_r: &Term) -> Sim<Option<(Term, Term)>> {
    let req = iso_listen(ctx)?;
    iso_confirm(ctx, sk_r, &req)
}

// ---------------------------------------------------------------------------
// Lowe's attack, as an attacker script.
// ---------------------------------------------------------------------------

fn sealed_under(t: &Term, pk: &Term) -> Option<Term> {
    match t {
        Term::Seal(k, payload) if **k == *pk => Some((**payload).clone()),
        _ => None,
    }
}

fn payload_head_is(payload: &Term, tag: &str) -> bool {
    match payload {
        Term::List(items) => items.first() == Some(&Term::tag(tag)),
        _ => false,
    }
}

/// The Fig.-7 man-in-the-middle relay: `M` opens what `I` sealed for it and
/// re-seals the payloads for `R`, forwarding `R`'s reply untouched. If `M`'s
/// public key *is* `pk_r` the script degenerates to honest forwarding and
/// never opens anything.
pub fn lowe_script(sk_m: &Term, pk_i: &Term, pk_r: &Term) -> Script {
    let pk_m = pkey(sk_m).expect("attacker key pair");
    let forward_only = pk_m == *pk_r;

    let relay = |label: &str, tag: &'static str, sk_m: Term, pk_r: Term, forward_only: bool| {
        let pk_m_inner = pkey(&sk_m).expect("attacker key pair");
        ScriptStep::new(label, move |pool: &[Term]| {
            for t in pool {
                if forward_only {
                    if let Some(payload) = sealed_under(t, &pk_m_inner) {
                        if payload_head_is(&payload, tag) {
                            return Some(t.clone());
                        }
                    }
                } else if let Some(payload) = open(&sk_m, t) {
                    if payload_head_is(&payload, tag) {
                        return seal(&pk_r, &payload).ok();
                    }
                }
            }
            None
        })
    };

    let forward_m2 = {
        let pk_i = pk_i.clone();
        ScriptStep::new("forward-m2", move |pool: &[Term]| {
            pool.iter()
                .find(|t| {
                    sealed_under(t, &pk_i)
                        .map(|p| payload_head_is(&p, "m2"))
                        .unwrap_or(false)
                })
                .cloned()
        })
    };

    Script::new(vec![
        relay("relay-m1", "m1", sk_m.clone(), pk_r.clone(), forward_only),
        forward_m2,
        relay("relay-m3", "m3", sk_m.clone(), pk_r.clone(), forward_only),
    ])
}
