//! Cooperative, seed-deterministic simulator.
//!
//! Each process runs on its own OS thread but the scheduler lets exactly one
//! run at a time, handing control back and forth over rendezvous channels.
//! Yield points are send, recv, fork, acquire, and explicit yield; everything
//! between two yield points executes atomically. All scheduling choices come
//! from a single seeded PRNG, so a run's trace is a pure function of
//! (program, seed, strategy, budget).
//!
//! The attacker is always schedulable. A blocked receiver resumes only when
//! the attacker hands it a message its filter accepts, and every delivered
//! term is checked derivable from the attacker's current knowledge -- a
//! violation is a simulator bug, not a game loss.

mod attacker;
mod trace;

pub use attacker::{AttackerStrategy, MutatingConfig, Script, ScriptStep};
pub use trace::{EventKind, Pid, Trace, TraceEvent};

use std::fmt;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deduct::Knowledge;
use crate::term::{KeyType, NonceOrigin, NonceRegistry, Term};

/// The run is over (assert failure or shutdown); unwind to the process exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Halted;

pub type Sim<T> = Result<T, Halted>;

pub type ProcFn = Box<dyn FnOnce(&mut ProcCtx) -> Sim<()> + Send + 'static>;
pub type MsgFilter = Box<dyn Fn(&Term) -> bool + Send + 'static>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    AssertFailed,
    BudgetExhausted,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::AssertFailed => "assert_failed",
            RunStatus::BudgetExhausted => "budget_exhausted",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub trace: Trace,
}

pub const DEFAULT_STEP_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LockId(usize);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("released a lock that the process does not hold")]
pub struct LockError;

/// Mutable state shared between the scheduler and the process threads.
/// Execution is serialized by the scheduler, so the mutex never contends; it
/// exists to make sharing across the process threads sound.
struct SharedCore {
    trace: Trace,
    nonces: NonceRegistry,
    knowledge: Knowledge,
    halted: bool,
    finished: bool,
    locks: Vec<Option<Pid>>,
}

/// A mutable cell shared between processes of one simulation. Reads and
/// writes are not yield points; they happen atomically within a slice.
pub struct SimCell<T>(Arc<Mutex<T>>);

impl<T> Clone for SimCell<T> {
    fn clone(&self) -> Self {
        SimCell(Arc::clone(&self.0))
    }
}

impl<T> SimCell<T> {
    pub fn new(value: T) -> SimCell<T> {
        SimCell(Arc::new(Mutex::new(value)))
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        f(&mut self.0.lock().unwrap())
    }
}

impl<T: Clone> SimCell<T> {
    pub fn get(&self) -> T {
        self.0.lock().unwrap().clone()
    }

    pub fn set(&self, value: T) {
        *self.0.lock().unwrap() = value;
    }
}

enum Action {
    Send(Term),
    Recv(Option<MsgFilter>),
    Fork(ProcFn),
    Yield,
    Acquire(LockId),
    Exited,
}

enum Resume {
    Go,
    Deliver(Term),
    Halt,
}

/// Handle through which a process talks to the world: networking, forking,
/// nonces, assertions, cells and locks.
pub struct ProcCtx {
    pid: Pid,
    shared: Arc<Mutex<SharedCore>>,
    action_tx: Sender<Action>,
    resume_rx: Receiver<Resume>,
}

impl ProcCtx {
    pub fn pid(&self) -> Pid {
        self.pid
    }

    fn yield_action(&mut self, action: Action) -> Sim<Resume> {
        self.action_tx.send(action).map_err(|_| Halted)?;
        match self.resume_rx.recv() {
            Ok(Resume::Halt) | Err(_) => Err(Halted),
            Ok(resume) => Ok(resume),
        }
    }

    /// Send a term to the network. It lands in the attacker-controlled pool
    /// and becomes part of the attacker's knowledge.
    pub fn send(&mut self, t: Term) -> Sim<()> {
        self.yield_action(Action::Send(t))?;
        Ok(())
    }

    /// Receive any message the attacker cares to deliver.
    pub fn recv(&mut self) -> Sim<Term> {
        self.recv_action(None)
    }

    /// Receive a message passing `filter`. The filter only pre-screens
    /// deliveries; it should be coarser than the caller's own checks.
    pub fn recv_where(
        &mut self,
        filter: impl Fn(&Term) -> bool + Send + 'static,
    ) -> Sim<Term> {
        self.recv_action(Some(Box::new(filter)))
    }

    fn recv_action(&mut self, filter: Option<MsgFilter>) -> Sim<Term> {
        match self.yield_action(Action::Recv(filter))? {
            Resume::Deliver(t) => Ok(t),
            _ => Err(Halted),
        }
    }

    pub fn fork(
        &mut self,
        f: impl FnOnce(&mut ProcCtx) -> Sim<()> + Send + 'static,
    ) -> Sim<()> {
        self.yield_action(Action::Fork(Box::new(f)))?;
        Ok(())
    }

    pub fn yield_now(&mut self) -> Sim<()> {
        self.yield_action(Action::Yield)?;
        Ok(())
    }

    pub fn new_lock(&self) -> LockId {
        let mut core = self.shared.lock().unwrap();
        core.locks.push(None);
        LockId(core.locks.len() - 1)
    }

    /// Block until the lock is free, then take it.
    pub fn acquire(&mut self, lock: LockId) -> Sim<()> {
        self.yield_action(Action::Acquire(lock))?;
        Ok(())
    }

    /// Release a held lock. Not a yield point. Releasing a lock the process
    /// does not hold is an error.
    pub fn release(&self, lock: LockId) -> Result<(), LockError> {
        let mut core = self.shared.lock().unwrap();
        match core.locks.get_mut(lock.0) {
            Some(holder) if *holder == Some(self.pid) => {
                *holder = None;
                Ok(())
            }
            _ => Err(LockError),
        }
    }

    /// Fresh honest nonce, recorded in the trace.
    pub fn mk_nonce(&self) -> Term {
        let mut core = self.shared.lock().unwrap();
        let t = core.nonces.mk_nonce(NonceOrigin::Honest);
        let id = match &t {
            Term::Nonce(id) => *id,
            _ => unreachable!(),
        };
        core.trace.push(EventKind::NonceCreated {
            pid: Some(self.pid),
            id,
            origin: NonceOrigin::Honest,
        });
        t
    }

    /// Fresh secret key for asymmetric encryption.
    pub fn mk_aenc_key(&self) -> Term {
        Term::key(KeyType::Adec, self.mk_nonce())
    }

    /// Fresh secret signing key.
    pub fn mk_sign_key(&self) -> Term {
        Term::key(KeyType::Sign, self.mk_nonce())
    }

    /// Check a game assertion. A failure is traced and halts the whole run
    /// with `RunStatus::AssertFailed`.
    pub fn sim_assert(&self, label: &str, cond: bool) -> Sim<()> {
        self.sim_assert_detail(label, cond, "")
    }

    pub fn sim_assert_detail(&self, label: &str, cond: bool, detail: &str) -> Sim<()> {
        let mut core = self.shared.lock().unwrap();
        if cond {
            core.trace.push(EventKind::AssertOk {
                pid: self.pid,
                label: label.to_string(),
            });
            Ok(())
        } else {
            core.trace.push(EventKind::AssertFail {
                pid: self.pid,
                label: label.to_string(),
                detail: detail.to_string(),
            });
            core.halted = true;
            Err(Halted)
        }
    }

    /// Hand a term straight to the attacker without sending it: it enters the
    /// knowledge and the trace but not the message pool. Games mostly leak by
    /// sending; this is for oracle fixtures.
    pub fn leak(&self, t: Term) {
        let mut core = self.shared.lock().unwrap();
        core.trace.push(EventKind::Leak { term: t.clone() });
        core.knowledge.add(t);
    }

    /// Declare the run concluded. The scheduler stops with `RunStatus::Ok`
    /// and halts every other process; game drivers call this once their final
    /// assertion has been checked so runs with long-lived servers terminate.
    pub fn finish_run(&self) {
        self.shared.lock().unwrap().finished = true;
    }
}

struct CellRef {
    value: Term,
}

/// Mutable term cell, the `new_cell`/`read`/`write` primitive surface.
pub struct TermCell(SimCell<CellRef>);

impl Clone for TermCell {
    fn clone(&self) -> Self {
        TermCell(self.0.clone())
    }
}

impl TermCell {
    pub fn new(value: Term) -> TermCell {
        TermCell(SimCell::new(CellRef { value }))
    }

    pub fn read(&self) -> Term {
        self.0.with(|c| c.value.clone())
    }

    pub fn write(&self, value: Term) {
        self.0.with(|c| c.value = value);
    }
}

// ---------------------------------------------------------------------------
// Scheduler.
// ---------------------------------------------------------------------------

enum ProcState {
    Runnable,
    BlockedRecv {
        filter: MsgFilter,
        /// How much of the pool this receive episode has screened.
        screened: usize,
        /// Pool indices the filter accepted.
        matches: Vec<usize>,
    },
    WaitLock(LockId),
    Exited,
}

struct Slot {
    pid: Pid,
    state: ProcState,
    resume_tx: Sender<Resume>,
    action_rx: Receiver<Action>,
    handle: Option<JoinHandle<()>>,
}

pub struct Simulator {
    shared: Arc<Mutex<SharedCore>>,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator::new()
    }
}

impl Simulator {
    pub fn new() -> Simulator {
        Simulator {
            shared: Arc::new(Mutex::new(SharedCore {
                trace: Trace::new(),
                nonces: NonceRegistry::new(),
                knowledge: Knowledge::new(),
                halted: false,
                finished: false,
                locks: Vec::new(),
            })),
        }
    }

    /// Pre-run honest nonce, for harnesses that build long-term keys before
    /// the program starts (the creation is still traced).
    pub fn honest_nonce(&self) -> Term {
        self.setup_nonce(NonceOrigin::Honest)
    }

    /// Pre-run attacker nonce: traced, and immediately part of the attacker's
    /// knowledge. Attack scripts build their own key material from these.
    pub fn attacker_nonce(&self) -> Term {
        self.setup_nonce(NonceOrigin::Attacker)
    }

    fn setup_nonce(&self, origin: NonceOrigin) -> Term {
        let mut core = self.shared.lock().unwrap();
        let t = core.nonces.mk_nonce(origin);
        let id = match &t {
            Term::Nonce(id) => *id,
            _ => unreachable!(),
        };
        core.trace.push(EventKind::NonceCreated {
            pid: None,
            id,
            origin,
        });
        if origin == NonceOrigin::Attacker {
            core.knowledge.register_attacker_nonce(id);
        }
        t
    }

    pub fn run(
        self,
        program: Vec<ProcFn>,
        seed: u64,
        strategy: AttackerStrategy,
        step_budget: u64,
    ) -> RunOutcome {
        let mut engine = Engine {
            shared: self.shared,
            slots: Vec::new(),
            pool: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            strategy,
            next_pid: 0,
        };
        for f in program {
            engine.spawn(f);
        }
        engine.run_loop(step_budget)
    }
}

/// Run a program to completion under the given attacker.
pub fn run(
    program: Vec<ProcFn>,
    seed: u64,
    strategy: AttackerStrategy,
    step_budget: u64,
) -> RunOutcome {
    Simulator::new().run(program, seed, strategy, step_budget)
}

struct Engine {
    shared: Arc<Mutex<SharedCore>>,
    slots: Vec<Slot>,
    pool: Vec<Term>,
    rng: ChaCha8Rng,
    strategy: AttackerStrategy,
    next_pid: Pid,
}

impl Engine {
    fn spawn(&mut self, f: ProcFn) -> Pid {
        let pid = self.next_pid;
        self.next_pid += 1;
        let (action_tx, action_rx) = channel();
        let (resume_tx, resume_rx) = channel();
        let shared = Arc::clone(&self.shared);
        let handle = std::thread::Builder::new()
            .name(format!("sim-proc-{pid}"))
            .spawn(move || {
                let mut ctx = ProcCtx {
                    pid,
                    shared,
                    action_tx,
                    resume_rx,
                };
                // Wait to be scheduled for the first time.
                let ready = match ctx.resume_rx.recv() {
                    Ok(Resume::Go) => true,
                    _ => false,
                };
                if ready {
                    let _ = f(&mut ctx);
                }
                let _ = ctx.action_tx.send(Action::Exited);
            })
            .expect("spawn process thread");
        self.slots.push(Slot {
            pid,
            state: ProcState::Runnable,
            resume_tx,
            action_rx,
            handle: Some(handle),
        });
        pid
    }

    fn run_loop(&mut self, step_budget: u64) -> RunOutcome {
        let stall_limit = match self.strategy {
            AttackerStrategy::Mutating(_) => 64,
            _ => 2,
        };
        let mut steps: u64 = 0;
        let mut stalled: u32 = 0;
        let status = loop {
            {
                let core = self.shared.lock().unwrap();
                if core.halted {
                    break RunStatus::AssertFailed;
                }
                if core.finished {
                    break RunStatus::Ok;
                }
            }
            let alive = self
                .slots
                .iter()
                .any(|s| !matches!(s.state, ProcState::Exited));
            if !alive {
                break RunStatus::Ok;
            }
            if steps >= step_budget {
                break RunStatus::BudgetExhausted;
            }

            let runnable = self.runnable_indices();
            // The attacker is always schedulable, as one extra candidate.
            let choice = self.rng.random_range(0..runnable.len() + 1);
            if choice == runnable.len() {
                let (delivered, possible) = self.attacker_step();
                steps += 1;
                if runnable.is_empty() && !delivered && !possible {
                    // Nothing runnable and the attacker cannot make progress:
                    // with a frozen pool this is a dead run (deadlock or an
                    // unsatisfiable recv). Mutating attackers get more slack
                    // because future injections might still fire.
                    stalled += 1;
                    if stalled >= stall_limit {
                        break RunStatus::BudgetExhausted;
                    }
                } else {
                    stalled = 0;
                }
            } else {
                let idx = runnable[choice];
                self.step_process(idx);
                steps += 1;
                stalled = 0;
            }
        };
        self.shutdown();
        let trace = {
            let mut core = self.shared.lock().unwrap();
            std::mem::take(&mut core.trace)
        };
        RunOutcome { status, trace }
    }

    fn runnable_indices(&self) -> Vec<usize> {
        let core = self.shared.lock().unwrap();
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| match &s.state {
                ProcState::Runnable => true,
                ProcState::WaitLock(l) => core.locks[l.0].is_none(),
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn step_process(&mut self, idx: usize) {
        if let ProcState::WaitLock(lock) = self.slots[idx].state {
            let mut core = self.shared.lock().unwrap();
            debug_assert!(core.locks[lock.0].is_none());
            core.locks[lock.0] = Some(self.slots[idx].pid);
        }
        self.slots[idx].state = ProcState::Runnable;
        let _ = self.slots[idx].resume_tx.send(Resume::Go);
        self.await_action(idx);
    }

    /// Hand `term` to the blocked receiver at `idx` and run its next slice.
    /// `check` enforces the injection invariant on terms that did not come
    /// verbatim from the pool (pool entries are in the knowledge base by
    /// construction).
    fn deliver(&mut self, idx: usize, term: Term, check: bool) {
        {
            let mut core = self.shared.lock().unwrap();
            if check {
                assert!(
                    core.knowledge.derivable(&term),
                    "simulator bug: attacker delivered underivable term {term}"
                );
            }
            let pid = self.slots[idx].pid;
            core.trace.push(EventKind::Recv {
                pid,
                term: term.clone(),
            });
        }
        self.slots[idx].state = ProcState::Runnable;
        let _ = self.slots[idx].resume_tx.send(Resume::Deliver(term));
        self.await_action(idx);
    }

    /// Screen any pool entries the blocked receivers have not seen yet.
    fn refresh_matches(&mut self) {
        let pool = &self.pool;
        for slot in &mut self.slots {
            if let ProcState::BlockedRecv {
                filter,
                screened,
                matches,
            } = &mut slot.state
            {
                for (i, msg) in pool.iter().enumerate().skip(*screened) {
                    if filter(msg) {
                        matches.push(i);
                    }
                }
                *screened = pool.len();
            }
        }
    }

    /// Wait for the running process to reach its next yield point and record
    /// what it asked for.
    fn await_action(&mut self, idx: usize) {
        match self.slots[idx].action_rx.recv() {
            Ok(Action::Send(t)) => {
                let mut core = self.shared.lock().unwrap();
                core.trace.push(EventKind::Send { term: t.clone() });
                core.knowledge.add(t.clone());
                drop(core);
                self.pool.push(t);
                self.slots[idx].state = ProcState::Runnable;
            }
            Ok(Action::Recv(filter)) => {
                self.slots[idx].state = ProcState::BlockedRecv {
                    filter: filter.unwrap_or_else(|| Box::new(|_| true)),
                    screened: 0,
                    matches: Vec::new(),
                };
            }
            Ok(Action::Fork(f)) => {
                let parent = self.slots[idx].pid;
                let child = self.spawn(f);
                self.shared
                    .lock()
                    .unwrap()
                    .trace
                    .push(EventKind::Fork { parent, child });
                self.slots[idx].state = ProcState::Runnable;
            }
            Ok(Action::Yield) => {
                self.slots[idx].state = ProcState::Runnable;
            }
            Ok(Action::Acquire(lock)) => {
                self.slots[idx].state = ProcState::WaitLock(lock);
            }
            Ok(Action::Exited) => {
                self.reap(idx);
            }
            Err(_) => {
                // The process thread died without reporting: propagate its panic.
                let handle = self.slots[idx].handle.take().expect("joined twice");
                match handle.join() {
                    Err(payload) => std::panic::resume_unwind(payload),
                    Ok(()) => panic!("process channel closed without exit"),
                }
            }
        }
    }

    fn reap(&mut self, idx: usize) {
        self.slots[idx].state = ProcState::Exited;
        if let Some(handle) = self.slots[idx].handle.take() {
            if let Err(payload) = handle.join() {
                std::panic::resume_unwind(payload);
            }
        }
    }

    /// One attacker step. Returns (delivered a message, a delivery is possible
    /// at all). The second component drives livelock detection.
    fn attacker_step(&mut self) -> (bool, bool) {
        self.refresh_matches();
        let blocked: Vec<usize> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.state, ProcState::BlockedRecv { .. }))
            .map(|(i, _)| i)
            .collect();
        if blocked.is_empty() {
            return (false, false);
        }
        let any_pool = blocked.iter().any(|&idx| {
            matches!(&self.slots[idx].state, ProcState::BlockedRecv { matches, .. } if !matches.is_empty())
        });

        enum Decision {
            FromPool(usize, Term),
            Injected(usize, Term),
            ScriptStep(usize, Term),
            Nothing,
        }
        let decision = match &mut self.strategy {
            AttackerStrategy::Passive => {
                passive_decision(&mut self.rng, &self.pool, &self.slots, &blocked)
                    .map(|(idx, t)| Decision::FromPool(idx, t))
                    .unwrap_or(Decision::Nothing)
            }
            AttackerStrategy::Mutating(cfg) => {
                let cfg = *cfg;
                let idx = blocked[self.rng.random_range(0..blocked.len())];
                let mut injected = None;
                if self.rng.random_bool(cfg.injection_prob) {
                    // Synthesize from a bounded sample of the saturated
                    // knowledge; composing derivable parts keeps the result
                    // derivable.
                    let (sample, tags) = {
                        let mut core = self.shared.lock().unwrap();
                        let sat = core.knowledge.saturated();
                        let n = sat.len();
                        let stride = (n / 48).max(1);
                        let offset = if n > 0 { self.rng.random_range(0..n) } else { 0 };
                        let sample: Vec<Term> = sat
                            .iter()
                            .cycle()
                            .skip(offset)
                            .step_by(stride)
                            .take(n.min(48))
                            .cloned()
                            .collect();
                        let tags = attacker::observed_tags(&sample);
                        (sample, tags)
                    };
                    let shared = Arc::clone(&self.shared);
                    let mut fresh = move || {
                        let mut core = shared.lock().unwrap();
                        let t = core.nonces.mk_nonce(NonceOrigin::Attacker);
                        if let Term::Nonce(id) = t {
                            core.knowledge.register_attacker_nonce(id);
                            core.trace.push(EventKind::NonceCreated {
                                pid: None,
                                id,
                                origin: NonceOrigin::Attacker,
                            });
                        }
                        t
                    };
                    let filter = match &self.slots[idx].state {
                        ProcState::BlockedRecv { filter, .. } => filter,
                        _ => unreachable!(),
                    };
                    for _ in 0..4 {
                        let t = attacker::synthesize(
                            &mut self.rng,
                            &sample,
                            &tags,
                            &mut fresh,
                            cfg.depth,
                        );
                        if filter(&t) {
                            injected = Some(t);
                            break;
                        }
                    }
                }
                if let Some(t) = injected {
                    Decision::Injected(idx, t)
                } else {
                    // Fall back to replaying pool traffic at this receiver,
                    // or anywhere a pool message is acceptable.
                    let own = match &self.slots[idx].state {
                        ProcState::BlockedRecv { matches, .. } if !matches.is_empty() => {
                            let m = matches[self.rng.random_range(0..matches.len())];
                            Some(Decision::FromPool(idx, self.pool[m].clone()))
                        }
                        _ => None,
                    };
                    own.or_else(|| {
                        passive_decision(&mut self.rng, &self.pool, &self.slots, &blocked)
                            .map(|(idx, t)| Decision::FromPool(idx, t))
                    })
                    .unwrap_or(Decision::Nothing)
                }
            }
            AttackerStrategy::Scripted(script) => {
                let mut fired = None;
                if !script.finished() {
                    let step = &mut script.steps[script.cursor];
                    if let Some(t) = (step.build)(&self.pool) {
                        // Deliver to a blocked process that accepts it.
                        let takers: Vec<usize> = blocked
                            .iter()
                            .copied()
                            .filter(|&idx| match &self.slots[idx].state {
                                ProcState::BlockedRecv { filter, .. } => filter(&t),
                                _ => false,
                            })
                            .collect();
                        if !takers.is_empty() {
                            let idx = takers[self.rng.random_range(0..takers.len())];
                            fired = Some(Decision::ScriptStep(idx, t));
                        }
                    }
                }
                match fired {
                    Some(d) => d,
                    None if script.passive_fallback => {
                        passive_decision(&mut self.rng, &self.pool, &self.slots, &blocked)
                            .map(|(idx, t)| Decision::FromPool(idx, t))
                            .unwrap_or(Decision::Nothing)
                    }
                    None => Decision::Nothing,
                }
            }
        };

        match decision {
            Decision::FromPool(idx, t) => {
                self.deliver(idx, t, false);
                (true, true)
            }
            Decision::Injected(idx, t) => {
                self.deliver(idx, t, true);
                (true, true)
            }
            Decision::ScriptStep(idx, t) => {
                if let AttackerStrategy::Scripted(script) = &mut self.strategy {
                    script.cursor += 1;
                }
                self.deliver(idx, t, true);
                (true, true)
            }
            Decision::Nothing => {
                let possible = match &self.strategy {
                    AttackerStrategy::Passive => any_pool,
                    AttackerStrategy::Mutating(_) => any_pool,
                    AttackerStrategy::Scripted(s) => s.passive_fallback && any_pool,
                };
                (false, possible)
            }
        }
    }

    fn shutdown(&mut self) {
        for idx in 0..self.slots.len() {
            if matches!(self.slots[idx].state, ProcState::Exited) {
                continue;
            }
            let _ = self.slots[idx].resume_tx.send(Resume::Halt);
            // The process unwinds and reports its exit.
            loop {
                match self.slots[idx].action_rx.recv() {
                    Ok(Action::Exited) | Err(_) => break,
                    Ok(_) => {} // discard actions raced before the halt
                }
            }
            self.reap(idx);
        }
    }
}

/// Uniform passive delivery: pick a receiver with at least one acceptable
/// pool message, then a message, both uniformly.
fn passive_decision(
    rng: &mut ChaCha8Rng,
    pool: &[Term],
    slots: &[Slot],
    blocked: &[usize],
) -> Option<(usize, Term)> {
    let takers: Vec<usize> = blocked
        .iter()
        .copied()
        .filter(|&idx| {
            matches!(&slots[idx].state, ProcState::BlockedRecv { matches, .. } if !matches.is_empty())
        })
        .collect();
    if takers.is_empty() {
        return None;
    }
    let idx = takers[rng.random_range(0..takers.len())];
    let msgs = match &slots[idx].state {
        ProcState::BlockedRecv { matches, .. } => matches,
        _ => unreachable!(),
    };
    let m = msgs[rng.random_range(0..msgs.len())];
    Some((idx, pool[m].clone()))
}
