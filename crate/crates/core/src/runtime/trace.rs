//! Append-only run traces. One record per line when rendered, with fixed
//! `step kind pid term` columns followed by kind-specific fields, so traces
//! diff cleanly and byte-compare for the determinism contract.

use std::fmt::Write as _;

use crate::deduct::Verdict;
use crate::term::{NonceOrigin, Term};

pub type Pid = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Send {
        term: Term,
    },
    Recv {
        pid: Pid,
        term: Term,
    },
    Fork {
        parent: Pid,
        child: Pid,
    },
    NonceCreated {
        pid: Option<Pid>,
        id: u64,
        origin: NonceOrigin,
    },
    AssertOk {
        pid: Pid,
        label: String,
    },
    AssertFail {
        pid: Pid,
        label: String,
        detail: String,
    },
    Leak {
        term: Term,
    },
    OracleVerdict {
        label: String,
        target: Term,
        verdict: Verdict,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Trace {
        Trace::default()
    }

    pub fn push(&mut self, kind: EventKind) {
        let step = self.events.len() as u64;
        self.events.push(TraceEvent { step, kind });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Terms recorded by `Send` events, in send order.
    pub fn sent_terms(&self) -> impl Iterator<Item = &Term> {
        self.events.iter().filter_map(|ev| match &ev.kind {
            EventKind::Send { term } => Some(term),
            _ => None,
        })
    }

    pub fn assert_failures(&self) -> Vec<(String, String)> {
        self.events
            .iter()
            .filter_map(|ev| match &ev.kind {
                EventKind::AssertFail { label, detail, .. } => {
                    Some((label.clone(), detail.clone()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn assert_ok_count(&self) -> usize {
        self.events
            .iter()
            .filter(|ev| matches!(ev.kind, EventKind::AssertOk { .. }))
            .count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            ev.render_line(&mut out);
            out.push('\n');
        }
        out
    }
}

impl TraceEvent {
    fn render_line(&self, out: &mut String) {
        let step = self.step;
        match &self.kind {
            EventKind::Send { term } => {
                let _ = write!(out, "{step} send - {term}");
            }
            EventKind::Recv { pid, term } => {
                let _ = write!(out, "{step} recv {pid} {term}");
            }
            EventKind::Fork { parent, child } => {
                let _ = write!(out, "{step} fork {parent} - child={child}");
            }
            EventKind::NonceCreated { pid, id, origin } => {
                let _ = match pid {
                    Some(pid) => write!(out, "{step} nonce {pid} nonce#{id} origin={}", origin.name()),
                    None => write!(out, "{step} nonce - nonce#{id} origin={}", origin.name()),
                };
            }
            EventKind::AssertOk { pid, label } => {
                let _ = write!(out, "{step} assert_ok {pid} - label={label}");
            }
            EventKind::AssertFail { pid, label, detail } => {
                let _ = write!(out, "{step} assert_fail {pid} - label={label} detail={detail}");
            }
            EventKind::Leak { term } => {
                let _ = write!(out, "{step} leak - {term}");
            }
            EventKind::OracleVerdict {
                label,
                target,
                verdict,
            } => {
                let _ = write!(out, "{step} oracle - {target} label={label} verdict={verdict}");
            }
        }
    }
}
