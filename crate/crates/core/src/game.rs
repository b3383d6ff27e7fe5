//! Symbolic security games and the secrecy-oracle harness.
//!
//! Each game pits honest agents against the network attacker. A run passes
//! when no game assertion failed and every oracle verdict matches its
//! expectation; universally-quantified secrecy claims are delegated to the
//! derivability oracle over the full trace, while scripted attacks reproduce
//! the concrete exploits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::deduct::{derivability_oracle, Verdict};
use crate::proto::{
    iso_initiator, iso_responder, lowe_script, ns_original_initiator, ns_original_responder,
    nsl_initiator, nsl_responder, nsl_session_key,
};
use crate::runtime::{
    run, AttackerStrategy, EventKind, MutatingConfig, ProcCtx, ProcFn, RunOutcome, RunStatus,
    Sim, SimCell, Simulator, Trace, DEFAULT_STEP_BUDGET,
};
use crate::stack::{kv_close, kv_connect, kv_create, kv_load, kv_server_start};
use crate::term::{pkey, KeyType, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerKind {
    Passive,
    Mutating,
}

impl AttackerKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackerKind::Passive => "passive",
            AttackerKind::Mutating => "mutating",
        }
    }

    pub fn strategy(self) -> AttackerStrategy {
        match self {
            AttackerKind::Passive => AttackerStrategy::Passive,
            AttackerKind::Mutating => AttackerStrategy::Mutating(MutatingConfig::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameConfig {
    pub seed: u64,
    pub runs: u32,
    /// Bounds the recursive session forking of the NSL/ISO games.
    pub max_sessions: u32,
    pub attacker: AttackerKind,
    pub step_budget: u64,
    pub trace_path: Option<PathBuf>,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            seed: 0,
            runs: 1,
            max_sessions: 4,
            attacker: AttackerKind::Passive,
            step_budget: DEFAULT_STEP_BUDGET,
            trace_path: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub label: String,
    pub target: Term,
    pub expected: Verdict,
    pub verdict: Verdict,
}

impl OracleCheck {
    pub fn ok(&self) -> bool {
        self.verdict == self.expected
    }
}

#[derive(Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub status: RunStatus,
    pub asserts_ok: usize,
    pub assert_failures: Vec<(String, String)>,
    pub oracle: Vec<OracleCheck>,
    pub trace: Trace,
    pub pass: bool,
}

impl RunRecord {
    /// One machine-readable record per run.
    pub fn summary_line(&self) -> String {
        let mut line = String::new();
        let _ = write!(
            line,
            "seed={} status={} asserts_ok={} asserts_failed={} oracle_checks={} oracle_mismatches={} pass={}",
            self.seed,
            self.status,
            self.asserts_ok,
            self.assert_failures.len(),
            self.oracle.len(),
            self.oracle.iter().filter(|c| !c.ok()).count(),
            self.pass,
        );
        line
    }
}

#[derive(Debug)]
pub struct GameResult {
    pub runs: Vec<RunRecord>,
    pub pass: bool,
}

impl GameResult {
    fn from_runs(runs: Vec<RunRecord>) -> GameResult {
        let pass = runs.iter().all(|r| r.pass);
        GameResult { runs, pass }
    }
}

/// Score a finished run: evaluate the oracle expectations against the trace,
/// record the verdicts in the trace, and aggregate pass/fail. A run passes
/// iff nothing asserted false and every verdict matches.
fn finish_run(
    seed: u64,
    mut outcome: RunOutcome,
    checks: Vec<(String, Term, Verdict)>,
) -> RunRecord {
    let mut oracle = Vec::new();
    for (label, target, expected) in checks {
        let verdict = derivability_oracle(&outcome.trace, &target);
        outcome.trace.push(EventKind::OracleVerdict {
            label: label.clone(),
            target: target.clone(),
            verdict,
        });
        oracle.push(OracleCheck {
            label,
            target,
            expected,
            verdict,
        });
    }
    let assert_failures = outcome.trace.assert_failures();
    let asserts_ok = outcome.trace.assert_ok_count();
    let pass = outcome.status != RunStatus::AssertFailed
        && assert_failures.is_empty()
        && oracle.iter().all(|c| c.ok());
    RunRecord {
        seed,
        status: outcome.status,
        asserts_ok,
        assert_failures,
        oracle,
        trace: outcome.trace,
        pass,
    }
}

/// Write each run's trace next to `path`; a single run gets exactly `path`,
/// a sweep gets `path.seed<N>`.
pub fn write_run_traces(result: &GameResult, path: &Path) -> std::io::Result<()> {
    if result.runs.len() == 1 {
        return std::fs::write(path, result.runs[0].trace.render());
    }
    for run in &result.runs {
        let mut name = path.as_os_str().to_os_string();
        name.push(format!(".seed{}", run.seed));
        std::fs::write(PathBuf::from(name), run.trace.render())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared game pieces.
// ---------------------------------------------------------------------------

/// Record of one completed session inside a game run.
#[derive(Debug, Clone)]
struct SessionRecord {
    key: Term,
    honest_peer: bool,
    pre_compromise: bool,
    role: &'static str,
}

type SessionLog = SimCell<Vec<SessionRecord>>;

/// `check_key_secrecy` of the NSL game: receive the attacker's guess and
/// assert it differs from the session key. The oracle, not this assert,
/// carries the secrecy weight; the assert is kept for fidelity.
fn check_key_secrecy(ctx: &mut ProcCtx, label: &str, key: &Term) -> Sim<()> {
    let guess = ctx.recv()?;
    ctx.sim_assert(label, guess != *key)
}

// ---------------------------------------------------------------------------
// NSL game: honest initiator and responder run bounded concurrent sessions
// against attacker-chosen peers; completed session keys must be fresh, and
// keys of honest-honest sessions must be unguessable and underivable.
// ---------------------------------------------------------------------------

pub fn run_nsl_game(cfg: &GameConfig) -> GameResult {
    let runs = (0..cfg.runs)
        .map(|i| nsl_game_run(cfg.seed + i as u64, cfg))
        .collect();
    GameResult::from_runs(runs)
}

fn nsl_game_run(seed: u64, cfg: &GameConfig) -> RunRecord {
    let log: SessionLog = SimCell::new(Vec::new());
    let sessions = cfg.max_sessions.max(1);

    let root_log = log.clone();
    let root: ProcFn = Box::new(move |ctx| {
        let sk_i = ctx.mk_aenc_key();
        let sk_r = ctx.mk_aenc_key();
        let pk_i = pkey(&sk_i).unwrap();
        let pk_r = pkey(&sk_r).unwrap();
        ctx.send(pk_i.clone())?;
        ctx.send(pk_r.clone())?;
        let keys_i = SimCell::new(BTreeSet::new());
        let keys_r = SimCell::new(BTreeSet::new());
        {
            let log = root_log.clone();
            let (sk_i, pk_r) = (sk_i.clone(), pk_r.clone());
            ctx.fork(move |ctx| nsl_do_init(ctx, sessions, keys_i, sk_i, pk_r, log))?;
        }
        let log = root_log.clone();
        ctx.fork(move |ctx| nsl_do_resp(ctx, sessions, keys_r, sk_r, pk_i, log))?;
        Ok(())
    });

    let outcome = run(
        vec![root],
        seed,
        cfg.attacker.strategy(),
        cfg.step_budget,
    );
    finish_run(seed, outcome, honest_key_checks(&log, "nsl"))
}

/// Oracle expectations shared by the handshake games: every key a session
/// established with the honest counterparty must stay underivable.
fn honest_key_checks(log: &SessionLog, game: &str) -> Vec<(String, Term, Verdict)> {
    log.with(|records| {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.honest_peer && r.pre_compromise)
            .map(|(i, r)| {
                (
                    format!("{game}.{}.session_key.{i}", r.role),
                    r.key.clone(),
                    Verdict::Underivable,
                )
            })
            .collect()
    })
}

fn nsl_do_init(
    ctx: &mut ProcCtx,
    remaining: u32,
    keys: SimCell<BTreeSet<Term>>,
    sk_i: Term,
    pk_r: Term,
    log: SessionLog,
) -> Sim<()> {
    if remaining > 1 {
        let (keys, sk_i, pk_r, log) = (keys.clone(), sk_i.clone(), pk_r.clone(), log.clone());
        ctx.fork(move |ctx| nsl_do_init(ctx, remaining - 1, keys, sk_i, pk_r, log))?;
    }
    // The attacker chooses the responder.
    let pk_choice = ctx.recv()?;
    let Some(key) = nsl_initiator(ctx, &sk_i, &pk_choice)? else {
        return Ok(());
    };
    let fresh = keys.with(|s| !s.contains(&key));
    ctx.sim_assert("nsl.init.key_fresh", fresh)?;
    keys.with(|s| s.insert(key.clone()));
    let honest_peer = pk_choice == pk_r;
    log.with(|v| {
        v.push(SessionRecord {
            key: key.clone(),
            honest_peer,
            pre_compromise: true,
            role: "init",
        })
    });
    if honest_peer {
        check_key_secrecy(ctx, "nsl.init.guess_ne_key", &key)?;
    }
    Ok(())
}

fn nsl_do_resp(
    ctx: &mut ProcCtx,
    remaining: u32,
    keys: SimCell<BTreeSet<Term>>,
    sk_r: Term,
    pk_i: Term,
    log: SessionLog,
) -> Sim<()> {
    if remaining > 1 {
        let (keys, sk_r, pk_i, log) = (keys.clone(), sk_r.clone(), pk_i.clone(), log.clone());
        ctx.fork(move |ctx| nsl_do_resp(ctx, remaining - 1, keys, sk_r, pk_i, log))?;
    }
    let Some((peer_pk, key)) = nsl_responder(ctx, &sk_r)? else {
        return Ok(());
    };
    let fresh = keys.with(|s| !s.contains(&key));
    ctx.sim_assert("nsl.resp.key_fresh", fresh)?;
    keys.with(|s| s.insert(key.clone()));
    let honest_peer = peer_pk == pk_i;
    log.with(|v| {
        v.push(SessionRecord {
            key: key.clone(),
            honest_peer,
            pre_compromise: true,
            role: "resp",
        })
    });
    if honest_peer {
        check_key_secrecy(ctx, "nsl.resp.guess_ne_key", &key)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ISO game: like the NSL game, but the long-term signing keys are eventually
// leaked, and only keys exchanged before the compromise are checked -- they
// must stay underivable even from the post-compromise trace.
// ---------------------------------------------------------------------------

pub fn run_iso_game(cfg: &GameConfig) -> GameResult {
    let runs = (0..cfg.runs)
        .map(|i| iso_game_run(cfg.seed + i as u64, cfg))
        .collect();
    GameResult::from_runs(runs)
}

fn iso_game_run(seed: u64, cfg: &GameConfig) -> RunRecord {
    let log: SessionLog = SimCell::new(Vec::new());
    let sessions = cfg.max_sessions.max(1);

    let root_log = log.clone();
    let root: ProcFn = Box::new(move |ctx| {
        let sk_i = ctx.mk_sign_key();
        let sk_r = ctx.mk_sign_key();
        let pk_i = pkey(&sk_i).unwrap();
        let pk_r = pkey(&sk_r).unwrap();
        ctx.send(pk_i.clone())?;
        ctx.send(pk_r.clone())?;
        let compromised = SimCell::new(false);
        let keys_i = SimCell::new(BTreeSet::new());
        let keys_r = SimCell::new(BTreeSet::new());
        {
            let (log, c) = (root_log.clone(), compromised.clone());
            let (sk_i, pk_r) = (sk_i.clone(), pk_r.clone());
            ctx.fork(move |ctx| iso_do_init(ctx, sessions, keys_i, c, sk_i, pk_r, log))?;
        }
        {
            let (log, c) = (root_log.clone(), compromised.clone());
            let (sk_r, pk_i) = (sk_r.clone(), pk_i.clone());
            ctx.fork(move |ctx| iso_do_resp(ctx, sessions, keys_r, c, sk_r, pk_i, log))?;
        }
        ctx.fork(move |ctx| compromise_keys(ctx, compromised, sk_i, sk_r))?;
        Ok(())
    });

    let outcome = run(
        vec![root],
        seed,
        cfg.attacker.strategy(),
        cfg.step_budget,
    );
    finish_run(seed, outcome, honest_key_checks(&log, "iso"))
}

/// Set the compromise flag, then hand both long-term secrets to the attacker.
fn compromise_keys(ctx: &mut ProcCtx, flag: SimCell<bool>, sk_i: Term, sk_r: Term) -> Sim<()> {
    flag.set(true);
    ctx.send(sk_i)?;
    ctx.send(sk_r)?;
    Ok(())
}

fn wait_for_compromise(ctx: &mut ProcCtx, flag: &SimCell<bool>) -> Sim<()> {
    while !flag.get() {
        ctx.yield_now()?;
    }
    Ok(())
}

/// Keys exchanged before the compromise are checked after it: the attacker,
/// now holding both signing keys, still must not guess them.
fn iso_check_key_secrecy(
    ctx: &mut ProcCtx,
    label: &str,
    flag: &SimCell<bool>,
    key: &Term,
) -> Sim<()> {
    if !flag.get() {
        wait_for_compromise(ctx, flag)?;
        let guess = ctx.recv()?;
        ctx.sim_assert(label, guess != *key)?;
    }
    Ok(())
}

fn iso_do_init(
    ctx: &mut ProcCtx,
    remaining: u32,
    keys: SimCell<BTreeSet<Term>>,
    flag: SimCell<bool>,
    sk_i: Term,
    pk_r: Term,
    log: SessionLog,
) -> Sim<()> {
    if remaining > 1 {
        let (keys, flag, sk_i, pk_r, log) = (
            keys.clone(),
            flag.clone(),
            sk_i.clone(),
            pk_r.clone(),
            log.clone(),
        );
        ctx.fork(move |ctx| iso_do_init(ctx, remaining - 1, keys, flag, sk_i, pk_r, log))?;
    }
    let pk_choice = ctx.recv()?;
    let Some(key) = iso_initiator(ctx, &sk_i, &pk_choice)? else {
        return Ok(());
    };
    let fresh = keys.with(|s| !s.contains(&key));
    ctx.sim_assert("iso.init.key_fresh", fresh)?;
    keys.with(|s| s.insert(key.clone()));
    let honest_peer = pk_choice == pk_r;
    let pre_compromise = !flag.get();
    log.with(|v| {
        v.push(SessionRecord {
            key: key.clone(),
            honest_peer,
            pre_compromise,
            role: "init",
        })
    });
    if honest_peer {
        iso_check_key_secrecy(ctx, "iso.init.guess_ne_key", &flag, &key)?;
    }
    Ok(())
}

fn iso_do_resp(
    ctx: &mut ProcCtx,
    remaining: u32,
    keys: SimCell<BTreeSet<Term>>,
    flag: SimCell<bool>,
    sk_r: Term,
    pk_i: Term,
    log: SessionLog,
) -> Sim<()> {
    if remaining > 1 {
        let (keys, flag, sk_r, pk_i, log) = (
            keys.clone(),
            flag.clone(),
            sk_r.clone(),
            pk_i.clone(),
            log.clone(),
        );
        ctx.fork(move |ctx| iso_do_resp(ctx, remaining - 1, keys, flag, sk_r, pk_i, log))?;
    }
    let Some((peer_pk, key)) = iso_responder(ctx, &sk_r)? else {
        return Ok(());
    };
    let fresh = keys.with(|s| !s.contains(&key));
    ctx.sim_assert("iso.resp.key_fresh", fresh)?;
    keys.with(|s| s.insert(key.clone()));
    let honest_peer = peer_pk == pk_i;
    let pre_compromise = !flag.get();
    log.with(|v| {
        v.push(SessionRecord {
            key: key.clone(),
            honest_peer,
            pre_compromise,
            role: "resp",
        })
    });
    if honest_peer {
        iso_check_key_secrecy(ctx, "iso.resp.guess_ne_key", &flag, &key)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// KV integrity game: the client stores an attacker-chosen key/value pair,
// leaks the first connection's session key, reconnects, leaks both long-term
// keys, and must still read back the value it stored.
// ---------------------------------------------------------------------------

pub fn run_kv_game(cfg: &GameConfig) -> GameResult {
    let runs = (0..cfg.runs)
        .map(|i| kv_game_run(cfg.seed + i as u64, cfg))
        .collect();
    GameResult::from_runs(runs)
}

fn kv_game_run(seed: u64, cfg: &GameConfig) -> RunRecord {
    // (label, key, expectation) pairs recorded by the client as it learns them.
    let checks: SimCell<Vec<(String, Term, Verdict)>> = SimCell::new(Vec::new());

    let client_checks = checks.clone();
    let root: ProcFn = Box::new(move |ctx| {
        let sk_c = ctx.mk_sign_key();
        let sk_s = ctx.mk_sign_key();
        let pk_c = pkey(&sk_c).unwrap();
        let pk_s = pkey(&sk_s).unwrap();
        ctx.send(pk_c)?;
        ctx.send(pk_s.clone())?;
        {
            let sk_s = sk_s.clone();
            ctx.fork(move |ctx| kv_server_start(ctx, sk_s))?;
        }
        let checks = client_checks.clone();
        ctx.fork(move |ctx| kv_client(ctx, sk_c, sk_s, pk_s, checks))?;
        Ok(())
    });

    let outcome = run(
        vec![root],
        seed,
        cfg.attacker.strategy(),
        cfg.step_budget,
    );
    finish_run(seed, outcome, checks.get())
}

/// Connect, retrying a bounded number of times: a handshake dies when the
/// attacker splices a stale message into it, and the client simply tries
/// again.
fn kv_connect_retry(
    ctx: &mut ProcCtx,
    sk_c: &Term,
    pk_s: &Term,
    attempts: u32,
) -> Sim<Option<crate::stack::Connection>> {
    for _ in 0..attempts {
        if let Some(conn) = kv_connect(ctx, sk_c, pk_s)? {
            return Ok(Some(conn));
        }
    }
    Ok(None)
}

fn kv_client(
    ctx: &mut ProcCtx,
    sk_c: Term,
    sk_s: Term,
    pk_s: Term,
    checks: SimCell<Vec<(String, Term, Verdict)>>,
) -> Sim<()> {
    let outcome = kv_client_inner(ctx, sk_c, sk_s, pk_s, checks);
    // The client's last assertion is the game; the server would accept
    // connections forever.
    ctx.finish_run();
    outcome
}

fn kv_client_inner(
    ctx: &mut ProcCtx,
    sk_c: Term,
    sk_s: Term,
    pk_s: Term,
    checks: SimCell<Vec<(String, Term, Verdict)>>,
) -> Sim<()> {
    let Some(mut c1) = kv_connect_retry(ctx, &sk_c, &pk_s, 8)? else {
        return Ok(());
    };
    // The attacker picks what gets stored.
    let key = ctx.recv()?;
    let value = ctx.recv()?;
    let created = kv_create(ctx, &mut c1, &key, &value)?;
    ctx.sim_assert("kv.create_ok", created.is_ok())?;
    let k1 = kv_close(ctx, &mut c1)?;
    ctx.send(k1.clone())?; // leak the closed connection's session key
    checks.with(|v| v.push(("kv.c1_session_key".into(), k1, Verdict::Derivable)));

    let Some(mut c2) = kv_connect_retry(ctx, &sk_c, &pk_s, 8)? else {
        return Ok(());
    };
    checks.with(|v| {
        v.push((
            "kv.c2_session_key".into(),
            c2.session_key().clone(),
            Verdict::Underivable,
        ))
    });
    // leak_keys: both long-term secrets go to the attacker.
    ctx.send(sk_c.clone())?;
    ctx.send(sk_s.clone())?;
    let loaded = kv_load(ctx, &mut c2, &key)?;
    ctx.sim_assert("kv.load_ok", loaded.is_ok())?;
    let loaded = loaded.unwrap_or(Term::Int(-1));
    ctx.sim_assert_detail(
        "kv.val_roundtrip",
        loaded == value,
        &format!("stored={value} loaded={loaded}"),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Honest single-session runs: the substrate for key-agreement checks and the
// leak fixtures that exercise the secrecy biconditionals.
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct HonestSessionRun {
    pub sk_i: Term,
    pub sk_r: Term,
    pub init_key: Option<Term>,
    pub resp_key: Option<Term>,
    pub status: RunStatus,
    pub trace: Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handshake {
    NsOriginal,
    Nsl,
    Iso,
}

/// Run one honest initiator/responder pair under a passive attacker.
/// Long-term keys are created before the program starts so the caller can
/// build leak fixtures from them.
pub fn run_honest_session(proto: Handshake, seed: u64, step_budget: u64) -> HonestSessionRun {
    let sim = Simulator::new();
    let (sk_i, sk_r) = match proto {
        Handshake::Iso => (
            Term::key(KeyType::Sign, sim.honest_nonce()),
            Term::key(KeyType::Sign, sim.honest_nonce()),
        ),
        _ => (
            Term::key(KeyType::Adec, sim.honest_nonce()),
            Term::key(KeyType::Adec, sim.honest_nonce()),
        ),
    };
    let pk_i = pkey(&sk_i).unwrap();
    let pk_r = pkey(&sk_r).unwrap();

    let init_key: SimCell<Option<Term>> = SimCell::new(None);
    let resp_key: SimCell<Option<Term>> = SimCell::new(None);

    let init_proc: ProcFn = {
        let (sk_i, pk_r, out) = (sk_i.clone(), pk_r.clone(), init_key.clone());
        let (pk_i_send, pk_r_send) = (pk_i.clone(), pk_r.clone());
        Box::new(move |ctx| {
            ctx.send(pk_i_send)?;
            ctx.send(pk_r_send)?;
            let key = match proto {
                Handshake::NsOriginal => ns_original_initiator(ctx, &sk_i, &pk_r)?,
                Handshake::Nsl => nsl_initiator(ctx, &sk_i, &pk_r)?,
                Handshake::Iso => iso_initiator(ctx, &sk_i, &pk_r)?,
            };
            out.set(key);
            Ok(())
        })
    };
    let resp_proc: ProcFn = {
        let (sk_r, out) = (sk_r.clone(), resp_key.clone());
        Box::new(move |ctx| {
            let result = match proto {
                Handshake::NsOriginal => ns_original_responder(ctx, &sk_r)?,
                Handshake::Nsl => nsl_responder(ctx, &sk_r)?,
                Handshake::Iso => iso_responder(ctx, &sk_r)?,
            };
            out.set(result.map(|(_, key)| key));
            Ok(())
        })
    };

    let outcome = sim.run(
        vec![init_proc, resp_proc],
        seed,
        AttackerStrategy::Passive,
        step_budget,
    );
    HonestSessionRun {
        sk_i,
        sk_r,
        init_key: init_key.get(),
        resp_key: resp_key.get(),
        status: outcome.status,
        trace: outcome.trace,
    }
}

/// Append leak events to a finished trace; the oracle then judges the trace
/// as if those terms had been handed to the attacker during the run.
pub fn trace_with_leaks(trace: &Trace, leaks: &[Term]) -> Trace {
    let mut t = trace.clone();
    for leaked in leaks {
        t.push(EventKind::Leak {
            term: leaked.clone(),
        });
    }
    t
}

// ---------------------------------------------------------------------------
// The Lowe attack harness.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsVariant {
    /// Original Needham-Schroeder: vulnerable.
    Original,
    /// Needham-Schroeder-Lowe: the identity check closes the attack.
    Lowe,
}

impl NsVariant {
    pub fn name(self) -> &'static str {
        match self {
            NsVariant::Original => "ns",
            NsVariant::Lowe => "nsl",
        }
    }
}

#[derive(Debug)]
pub struct AttackOutcome {
    /// Did the responder complete a session (believing it talked to `I`)?
    pub completed: bool,
    pub responder_key: Option<Term>,
    /// The key the responder holds or would hold; the oracle target.
    pub target: Option<Term>,
    pub verdict: Option<Verdict>,
    pub status: RunStatus,
    pub trace: Trace,
}

/// Replay Lowe's man-in-the-middle against the chosen protocol variant.
/// `I` willingly initiates a session with the attacker `M`; the script relays
/// doctored messages to an honest responder `R`.
pub fn run_lowe_attack(variant: NsVariant, seed: u64, step_budget: u64) -> AttackOutcome {
    let sim = Simulator::new();
    let sk_m = Term::key(KeyType::Adec, sim.attacker_nonce());
    let pk_m = pkey(&sk_m).unwrap();
    let sk_i = Term::key(KeyType::Adec, sim.honest_nonce());
    let sk_r = Term::key(KeyType::Adec, sim.honest_nonce());
    let pk_i = pkey(&sk_i).unwrap();
    let pk_r = pkey(&sk_r).unwrap();

    let resp_result: SimCell<Option<(Term, Term)>> = SimCell::new(None);

    let init_proc: ProcFn = {
        let (sk_i, pk_m) = (sk_i.clone(), pk_m.clone());
        let (pk_i_send, pk_r_send) = (pk_i.clone(), pk_r.clone());
        Box::new(move |ctx| {
            ctx.send(pk_i_send)?;
            ctx.send(pk_r_send)?;
            match variant {
                NsVariant::Original => ns_original_initiator(ctx, &sk_i, &pk_m)?,
                NsVariant::Lowe => nsl_initiator(ctx, &sk_i, &pk_m)?,
            };
            Ok(())
        })
    };
    let resp_proc: ProcFn = {
        let (sk_r, out) = (sk_r.clone(), resp_result.clone());
        Box::new(move |ctx| {
            let result = match variant {
                NsVariant::Original => ns_original_responder(ctx, &sk_r)?,
                NsVariant::Lowe => nsl_responder(ctx, &sk_r)?,
            };
            out.set(result);
            Ok(())
        })
    };

    let script = lowe_script(&sk_m, &pk_i, &pk_r);
    let outcome = sim.run(
        vec![init_proc, resp_proc],
        seed,
        AttackerStrategy::Scripted(script),
        step_budget,
    );

    let responder_key = resp_result.get().map(|(_, key)| key);
    let completed = responder_key.is_some();
    // If the responder never finished, reconstruct the key it was building
    // from its second message in the trace; the harness may read the ground
    // truth even though the attacker may not.
    let target = responder_key.clone().or_else(|| {
        outcome.trace.sent_terms().find_map(|t| match t {
            Term::Seal(k, payload) if **k == pk_i => match &**payload {
                Term::List(items)
                    if items.len() >= 3 && items[0] == Term::tag("m2") =>
                {
                    Some(nsl_session_key(&pk_i, &pk_r, &items[1], &items[2]))
                }
                _ => None,
            },
            _ => None,
        })
    });

    let mut trace = outcome.trace;
    let verdict = target.as_ref().map(|key| {
        let verdict = derivability_oracle(&trace, key);
        trace.push(EventKind::OracleVerdict {
            label: "lowe.responder_key".into(),
            target: key.clone(),
            verdict,
        });
        verdict
    });

    AttackOutcome {
        completed,
        responder_key,
        target,
        verdict,
        status: outcome.status,
        trace,
    }
}
