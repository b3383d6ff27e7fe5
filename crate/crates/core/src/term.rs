//! Symbolic terms: the message algebra shared by honest agents and the attacker.
//!
//! Terms are immutable values. Structural equality coincides with the intended
//! semantic equality because the constructors normalize as they build: DH
//! exponentiation flattens its base and keeps exponents sorted by canonical
//! encoding, so permuting exponents yields the identical value.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Key types. `aenc`/`adec` are the asymmetric-encryption pair, `sign`/`verify`
/// the signature pair, and `senc` is its own opening key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyType {
    Aenc,
    Adec,
    Sign,
    Verify,
    Senc,
}

impl KeyType {
    /// The key type that opens seals made with `self`, if any.
    /// aenc -> adec, sign -> verify, senc -> senc; opening keys themselves
    /// (adec, verify) seal nothing.
    pub fn opening(self) -> Option<KeyType> {
        match self {
            KeyType::Aenc => Some(KeyType::Adec),
            KeyType::Sign => Some(KeyType::Verify),
            KeyType::Senc => Some(KeyType::Senc),
            KeyType::Adec | KeyType::Verify => None,
        }
    }

    pub fn can_seal(self) -> bool {
        self.opening().is_some()
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            KeyType::Aenc => 0,
            KeyType::Adec => 1,
            KeyType::Sign => 2,
            KeyType::Verify => 3,
            KeyType::Senc => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<KeyType> {
        Some(match code {
            0 => KeyType::Aenc,
            1 => KeyType::Adec,
            2 => KeyType::Sign,
            3 => KeyType::Verify,
            4 => KeyType::Senc,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            KeyType::Aenc => "aenc",
            KeyType::Adec => "adec",
            KeyType::Sign => "sign",
            KeyType::Verify => "verify",
            KeyType::Senc => "senc",
        }
    }

    pub fn from_name(name: &str) -> Option<KeyType> {
        Some(match name {
            "aenc" => KeyType::Aenc,
            "adec" => KeyType::Adec,
            "sign" => KeyType::Sign,
            "verify" => KeyType::Verify,
            "senc" => KeyType::Senc,
            _ => return None,
        })
    }
}

/// A symbolic message value.
///
/// Invariants maintained by the constructors (and checked by `canonical_decode`):
/// - `Exp` bases are never themselves `Exp` terms and carry at least one
///   exponent, stored sorted by canonical encoding (a multiset).
/// - `Seal` keys are always `Key` terms.
///
/// Build `Exp` via [`dh_exp`] and `Seal` via [`seal`] to preserve them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Int(i64),
    Tag(String),
    Nonce(u64),
    Pair(Box<Term>, Box<Term>),
    List(Vec<Term>),
    Key(KeyType, Box<Term>),
    Seal(Box<Term>, Box<Term>),
    Exp(Box<Term>, Vec<Term>),
}

impl Term {
    pub fn int(v: i64) -> Term {
        Term::Int(v)
    }

    pub fn tag(name: &str) -> Term {
        debug_assert!(!name.is_empty(), "tags are nonempty");
        Term::Tag(name.to_string())
    }

    pub fn pair(left: Term, right: Term) -> Term {
        Term::Pair(Box::new(left), Box::new(right))
    }

    pub fn list<I: IntoIterator<Item = Term>>(items: I) -> Term {
        Term::List(items.into_iter().collect())
    }

    pub fn key(ktype: KeyType, seed: Term) -> Term {
        Term::Key(ktype, Box::new(seed))
    }

    pub fn is_key(&self) -> bool {
        matches!(self, Term::Key(_, _))
    }

    pub fn is_aenc_key(&self) -> bool {
        matches!(self, Term::Key(KeyType::Aenc, _))
    }

    pub fn is_verify_key(&self) -> bool {
        matches!(self, Term::Key(KeyType::Verify, _))
    }

    pub fn key_type(&self) -> Option<KeyType> {
        match self {
            Term::Key(u, _) => Some(*u),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TermError {
    #[error("not a secret key: pkey expects an adec or sign key")]
    NotSecretKey,
    #[error("cannot seal with opening key {0}")]
    SealWithOpeningKey(&'static str),
    #[error("seal key must be a key term")]
    SealKeyNotKey,
}

/// `mk_key` from the paper surface: tag seeding material with a key type.
pub fn mk_key(ktype: KeyType, seed: Term) -> Term {
    Term::key(ktype, seed)
}

/// Public key of a secret key: adec -> aenc, sign -> verify.
/// senc keys have no distinct public half and are rejected.
pub fn pkey(sk: &Term) -> Result<Term, TermError> {
    match sk {
        Term::Key(KeyType::Adec, seed) => Ok(Term::key(KeyType::Aenc, (**seed).clone())),
        Term::Key(KeyType::Sign, seed) => Ok(Term::key(KeyType::Verify, (**seed).clone())),
        _ => Err(TermError::NotSecretKey),
    }
}

/// Seal `payload` under `k`. Umbrella operation for aenc/sign/senc; rejects
/// opening-key types early so protocol bugs surface at the call site rather
/// than as an opponent that can never open the message.
pub fn seal(k: &Term, payload: &Term) -> Result<Term, TermError> {
    match k {
        Term::Key(u, _) if u.can_seal() => Ok(Term::Seal(
            Box::new(k.clone()),
            Box::new(payload.clone()),
        )),
        Term::Key(u, _) => Err(TermError::SealWithOpeningKey(u.name())),
        _ => Err(TermError::SealKeyNotKey),
    }
}

/// Open a sealed term. Total: returns `Some(payload)` exactly when `k` is the
/// opening key for the sealing key (same type bar, same seed), `None` otherwise.
pub fn open(k: &Term, sealed: &Term) -> Option<Term> {
    let (open_type, open_seed) = match k {
        Term::Key(u, seed) => (*u, seed),
        _ => return None,
    };
    match sealed {
        Term::Seal(key, payload) => match &**key {
            Term::Key(u, seed) if u.opening() == Some(open_type) && seed == open_seed => {
                Some((**payload).clone())
            }
            _ => None,
        },
        _ => None,
    }
}

/// Diffie-Hellman exponentiation. Flattens nested exponentiation and keeps the
/// exponent multiset sorted by canonical encoding, so exponent order never
/// distinguishes two terms.
pub fn dh_exp(base: &Term, exponent: &Term) -> Term {
    let (b, mut exps) = match base {
        Term::Exp(b, es) => ((**b).clone(), es.clone()),
        other => (other.clone(), Vec::new()),
    };
    exps.push(exponent.clone());
    exps.sort_by(|x, y| canonical_encode(x).cmp(&canonical_encode(y)));
    Term::Exp(Box::new(b), exps)
}

/// Reflexive subterm test; descends into every constructor, including `Exp`
/// bases and exponents.
pub fn is_subterm(t: &Term, container: &Term) -> bool {
    if t == container {
        return true;
    }
    match container {
        Term::Int(_) | Term::Tag(_) | Term::Nonce(_) => false,
        Term::Pair(l, r) => is_subterm(t, l) || is_subterm(t, r),
        Term::List(items) => items.iter().any(|e| is_subterm(t, e)),
        Term::Key(_, seed) => is_subterm(t, seed),
        Term::Seal(k, p) => is_subterm(t, k) || is_subterm(t, p),
        Term::Exp(b, es) => is_subterm(t, b) || es.iter().any(|e| is_subterm(t, e)),
    }
}

/// Collect every subterm of `t` (including `t` itself) into `out`.
pub fn subterms(t: &Term, out: &mut std::collections::BTreeSet<Term>) {
    out.insert(t.clone());
    match t {
        Term::Int(_) | Term::Tag(_) | Term::Nonce(_) => {}
        Term::Pair(l, r) => {
            subterms(l, out);
            subterms(r, out);
        }
        Term::List(items) => {
            for e in items {
                subterms(e, out);
            }
        }
        Term::Key(_, seed) => subterms(seed, out),
        Term::Seal(k, p) => {
            subterms(k, out);
            subterms(p, out);
        }
        Term::Exp(b, es) => {
            subterms(b, out);
            for e in es {
                subterms(e, out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pattern matching over list-shaped protocol messages.
// ---------------------------------------------------------------------------

/// One position of a list pattern: `Exact` and `TagLit` must equal the element
/// at that position, `Bind` captures it under a name.
#[derive(Debug, Clone)]
pub enum PatternItem {
    Exact(Term),
    Bind(&'static str),
    TagLit(&'static str),
}

pub fn exact(t: Term) -> PatternItem {
    PatternItem::Exact(t)
}

pub fn bind(name: &'static str) -> PatternItem {
    PatternItem::Bind(name)
}

pub fn tag_lit(name: &'static str) -> PatternItem {
    PatternItem::TagLit(name)
}

/// Match a list pattern against `t`. `Some(bindings)` iff `t` is a `List` of
/// the same arity whose fixed positions all agree; mismatch is `None`, never
/// an error.
pub fn match_pattern(pattern: &[PatternItem], t: &Term) -> Option<BTreeMap<&'static str, Term>> {
    let items = match t {
        Term::List(items) => items,
        _ => return None,
    };
    if items.len() != pattern.len() {
        return None;
    }
    let mut bindings = BTreeMap::new();
    for (pat, elem) in pattern.iter().zip(items) {
        match pat {
            PatternItem::Exact(expected) if expected == elem => {}
            PatternItem::TagLit(name) if *elem == Term::tag(name) => {}
            PatternItem::Bind(name) => {
                bindings.insert(*name, elem.clone());
            }
            _ => return None,
        }
    }
    Some(bindings)
}

// ---------------------------------------------------------------------------
// Nonces.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NonceOrigin {
    Honest,
    Attacker,
}

impl NonceOrigin {
    pub fn name(self) -> &'static str {
        match self {
            NonceOrigin::Honest => "honest",
            NonceOrigin::Attacker => "attacker",
        }
    }
}

/// Issues run-unique nonce ids from a monotone counter and remembers who made
/// each one. The deduction engine treats attacker-origin nonces as known.
#[derive(Debug, Default, Clone)]
pub struct NonceRegistry {
    next: u64,
    origins: BTreeMap<u64, NonceOrigin>,
}

impl NonceRegistry {
    pub fn new() -> NonceRegistry {
        NonceRegistry::default()
    }

    pub fn mk_nonce(&mut self, origin: NonceOrigin) -> Term {
        let id = self.next;
        self.next += 1;
        self.origins.insert(id, origin);
        Term::Nonce(id)
    }

    pub fn origin(&self, id: u64) -> Option<NonceOrigin> {
        self.origins.get(&id).copied()
    }

    pub fn last_issued(&self) -> Option<u64> {
        self.next.checked_sub(1)
    }

    /// Fresh secret key for asymmetric encryption: `Key(adec, fresh nonce)`.
    pub fn mk_aenc_key(&mut self) -> Term {
        let seed = self.mk_nonce(NonceOrigin::Honest);
        Term::key(KeyType::Adec, seed)
    }

    /// Fresh secret signing key: `Key(sign, fresh nonce)`.
    pub fn mk_sign_key(&mut self) -> Term {
        let seed = self.mk_nonce(NonceOrigin::Honest);
        Term::key(KeyType::Sign, seed)
    }
}

// ---------------------------------------------------------------------------
// Canonical encoding.
//
// Constructor bytes: 0x01 Int, 0x02 Tag, 0x03 Nonce, 0x04 Pair, 0x05 Key,
// 0x06 Seal, 0x07 Exp, 0x08 List. Int is 8-byte big-endian two's complement;
// Tag is a 4-byte big-endian length followed by UTF-8 bytes; Nonce is an
// 8-byte big-endian id; Key is a key-type byte followed by the seed; Exp is
// base, 4-byte count, then exponent encodings in ascending lexicographic byte
// order; List is a 4-byte count followed by the elements.
// ---------------------------------------------------------------------------

const CON_INT: u8 = 0x01;
const CON_TAG: u8 = 0x02;
const CON_NONCE: u8 = 0x03;
const CON_PAIR: u8 = 0x04;
const CON_KEY: u8 = 0x05;
const CON_SEAL: u8 = 0x06;
const CON_EXP: u8 = 0x07;
const CON_LIST: u8 = 0x08;

pub fn canonical_encode(t: &Term) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn encode_into(t: &Term, out: &mut Vec<u8>) {
    match t {
        Term::Int(v) => {
            out.push(CON_INT);
            out.extend_from_slice(&v.to_be_bytes());
        }
        Term::Tag(name) => {
            out.push(CON_TAG);
            out.extend_from_slice(&(name.len() as u32).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        Term::Nonce(id) => {
            out.push(CON_NONCE);
            out.extend_from_slice(&id.to_be_bytes());
        }
        Term::Pair(l, r) => {
            out.push(CON_PAIR);
            encode_into(l, out);
            encode_into(r, out);
        }
        Term::Key(u, seed) => {
            out.push(CON_KEY);
            out.push(u.code());
            encode_into(seed, out);
        }
        Term::Seal(k, p) => {
            out.push(CON_SEAL);
            encode_into(k, out);
            encode_into(p, out);
        }
        Term::Exp(base, exps) => {
            out.push(CON_EXP);
            encode_into(base, out);
            out.extend_from_slice(&(exps.len() as u32).to_be_bytes());
            // Exponents are stored pre-sorted by their own encodings.
            for e in exps {
                encode_into(e, out);
            }
        }
        Term::List(items) => {
            out.push(CON_LIST);
            out.extend_from_slice(&(items.len() as u32).to_be_bytes());
            for e in items {
                encode_into(e, out);
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

impl DecodeError {
    fn new(offset: usize, reason: impl Into<String>) -> DecodeError {
        DecodeError {
            offset,
            reason: reason.into(),
        }
    }
}

/// Inverse of [`canonical_encode`]. Rejects trailing bytes and anything that
/// violates the term invariants (non-key seal keys, unsorted or empty
/// exponent multisets, empty tags).
pub fn canonical_decode(bytes: &[u8]) -> Result<Term, DecodeError> {
    let mut pos = 0usize;
    let t = decode_at(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(DecodeError::new(pos, "trailing bytes after term"));
    }
    Ok(t)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], DecodeError> {
    if bytes.len() - *pos < n {
        return Err(DecodeError::new(*pos, format!("need {n} more bytes")));
    }
    let slice = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(slice)
}

fn decode_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, DecodeError> {
    let raw = take(bytes, pos, 4)?;
    Ok(u32::from_be_bytes(raw.try_into().unwrap()))
}

fn decode_at(bytes: &[u8], pos: &mut usize) -> Result<Term, DecodeError> {
    let start = *pos;
    let con = *take(bytes, pos, 1)?.first().unwrap();
    match con {
        CON_INT => {
            let raw = take(bytes, pos, 8)?;
            Ok(Term::Int(i64::from_be_bytes(raw.try_into().unwrap())))
        }
        CON_TAG => {
            let len = decode_u32(bytes, pos)? as usize;
            let at = *pos;
            let raw = take(bytes, pos, len)?;
            let name = String::from_utf8(raw.to_vec())
                .map_err(|_| DecodeError::new(at, "tag is not valid UTF-8"))?;
            if name.is_empty() {
                return Err(DecodeError::new(at, "empty tag"));
            }
            Ok(Term::Tag(name))
        }
        CON_NONCE => {
            let raw = take(bytes, pos, 8)?;
            Ok(Term::Nonce(u64::from_be_bytes(raw.try_into().unwrap())))
        }
        CON_PAIR => {
            let l = decode_at(bytes, pos)?;
            let r = decode_at(bytes, pos)?;
            Ok(Term::pair(l, r))
        }
        CON_KEY => {
            let at = *pos;
            let code = *take(bytes, pos, 1)?.first().unwrap();
            let u = KeyType::from_code(code)
                .ok_or_else(|| DecodeError::new(at, format!("bad key type byte {code:#04x}")))?;
            let seed = decode_at(bytes, pos)?;
            Ok(Term::key(u, seed))
        }
        CON_SEAL => {
            let at = *pos;
            let k = decode_at(bytes, pos)?;
            if !k.is_key() {
                return Err(DecodeError::new(at, "seal key is not a key term"));
            }
            let p = decode_at(bytes, pos)?;
            Ok(Term::Seal(Box::new(k), Box::new(p)))
        }
        CON_EXP => {
            let at = *pos;
            let base = decode_at(bytes, pos)?;
            if matches!(base, Term::Exp(_, _)) {
                return Err(DecodeError::new(at, "exp base is itself an exp"));
            }
            let count = decode_u32(bytes, pos)? as usize;
            if count == 0 {
                return Err(DecodeError::new(*pos, "exp with empty exponent multiset"));
            }
            let mut exps = Vec::with_capacity(count);
            let mut prev: Option<Vec<u8>> = None;
            for _ in 0..count {
                let at = *pos;
                let e = decode_at(bytes, pos)?;
                let enc = canonical_encode(&e);
                if let Some(p) = &prev {
                    if *p > enc {
                        return Err(DecodeError::new(at, "exp exponents out of canonical order"));
                    }
                }
                prev = Some(enc);
                exps.push(e);
            }
            Ok(Term::Exp(Box::new(base), exps))
        }
        CON_LIST => {
            let count = decode_u32(bytes, pos)? as usize;
            let mut items = Vec::with_capacity(count);
            for _ in 0..count {
                items.push(decode_at(bytes, pos)?);
            }
            Ok(Term::List(items))
        }
        other => Err(DecodeError::new(
            start,
            format!("unknown constructor byte {other:#04x}"),
        )),
    }
}

// ---------------------------------------------------------------------------
// Text syntax: `nonce#5`, `7`, `"m1"`, `[t1 t2 t3]`, `(pair t1 t2)`,
// `(key aenc t)`, `(seal k t)`, `(exp g [a b])`.
// ---------------------------------------------------------------------------

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Int(v) => write!(f, "{v}"),
            Term::Tag(name) => write!(f, "\"{name}\""),
            Term::Nonce(id) => write!(f, "nonce#{id}"),
            Term::Pair(l, r) => write!(f, "(pair {l} {r})"),
            Term::List(items) => {
                write!(f, "[")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, "]")
            }
            Term::Key(u, seed) => write!(f, "(key {} {seed})", u.name()),
            Term::Seal(k, p) => write!(f, "(seal {k} {p})"),
            Term::Exp(base, exps) => {
                write!(f, "(exp {base} [")?;
                for (i, e) in exps.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, "])")
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("parse error at {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

impl ParseError {
    fn new(offset: usize, reason: impl Into<String>) -> ParseError {
        ParseError {
            offset,
            reason: reason.into(),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, expected: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(c) if c == expected => {
                self.pos += c.len_utf8();
                Ok(())
            }
            _ => Err(ParseError::new(self.pos, format!("expected '{expected}'"))),
        }
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || matches!(c, '(' | ')' | '[' | ']' | '"') {
                break;
            }
            self.pos += c.len_utf8();
        }
        self.src[start..self.pos].to_string()
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(ParseError::new(self.pos, "unexpected end of input")),
            Some('"') => {
                self.eat('"')?;
                let start = self.pos;
                while let Some(c) = self.peek() {
                    if c == '"' {
                        break;
                    }
                    self.pos += c.len_utf8();
                }
                let name = self.src[start..self.pos].to_string();
                self.eat('"')?;
                if name.is_empty() {
                    return Err(ParseError::new(start, "empty tag"));
                }
                Ok(Term::Tag(name))
            }
            Some('[') => {
                self.eat('[')?;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    if self.peek() == Some(']') {
                        self.eat(']')?;
                        return Ok(Term::List(items));
                    }
                    items.push(self.term()?);
                }
            }
            Some('(') => {
                self.eat('(')?;
                self.skip_ws();
                let at = self.pos;
                let head = self.word();
                let t = match head.as_str() {
                    "pair" => {
                        let l = self.term()?;
                        let r = self.term()?;
                        Term::pair(l, r)
                    }
                    "key" => {
                        self.skip_ws();
                        let at = self.pos;
                        let name = self.word();
                        let u = KeyType::from_name(&name).ok_or_else(|| {
                            ParseError::new(at, format!("unknown key type '{name}'"))
                        })?;
                        let seed = self.term()?;
                        Term::key(u, seed)
                    }
                    "seal" => {
                        let at = self.pos;
                        let k = self.term()?;
                        if !k.is_key() {
                            return Err(ParseError::new(at, "seal key is not a key term"));
                        }
                        let p = self.term()?;
                        Term::Seal(Box::new(k), Box::new(p))
                    }
                    "exp" => {
                        let base = self.term()?;
                        self.skip_ws();
                        let at = self.pos;
                        let exps = match self.term()? {
                            Term::List(items) if !items.is_empty() => items,
                            Term::List(_) => {
                                return Err(ParseError::new(at, "exp needs >= 1 exponent"))
                            }
                            _ => return Err(ParseError::new(at, "exp exponents must be a list")),
                        };
                        let mut t = base;
                        for e in &exps {
                            t = dh_exp(&t, e);
                        }
                        t
                    }
                    other => {
                        return Err(ParseError::new(at, format!("unknown form '{other}'")));
                    }
                };
                self.skip_ws();
                self.eat(')')?;
                Ok(t)
            }
            Some(_) => {
                let at = self.pos;
                let w = self.word();
                if let Some(id) = w.strip_prefix("nonce#") {
                    let id: u64 = id
                        .parse()
                        .map_err(|_| ParseError::new(at, format!("bad nonce id '{id}'")))?;
                    return Ok(Term::Nonce(id));
                }
                if let Ok(v) = w.parse::<i64>() {
                    return Ok(Term::Int(v));
                }
                Err(ParseError::new(at, format!("cannot parse '{w}'")))
            }
        }
    }
}

/// Parse one term in the text syntax; the whole input must be consumed.
pub fn parse_term(src: &str) -> Result<Term, ParseError> {
    let mut p = Parser { src, pos: 0 };
    let t = p.term()?;
    p.skip_ws();
    if p.pos != src.len() {
        return Err(ParseError::new(p.pos, "trailing input after term"));
    }
    Ok(t)
}
