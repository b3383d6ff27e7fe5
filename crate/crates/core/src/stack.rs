//! The layered systems code: reliable authenticated connections over the ISO
//! handshake, a remote-procedure-call layer, and the key-value store server
//! with its client wrappers.
//!
//! Wire format inside the symmetric seals: `List[Tag, Int seq, List payload]`.
//! Sequence numbers run independently per direction; tags are directional
//! (requests flow initiator to responder, `rpc.resp`/`rpc.error` flow back),
//! which is what keeps replays of a party's own traffic from confusing it.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::proto::{iso_confirm_session, iso_initiator_session, IsoRequest, Session};
use crate::runtime::{LockId, ProcCtx, Sim, SimCell};
use crate::term::{open, seal, KeyType, Term};

pub const TAG_RESP: &str = "rpc.resp";
pub const TAG_ERROR: &str = "rpc.error";
pub const TAG_CLOSE: &str = "rpc.close";
pub const TAG_DB_LOAD: &str = "db.load";
pub const TAG_DB_CREATE: &str = "db.create";
pub const TAG_DB_STORE: &str = "db.store";
pub const TAG_DB_CLOSE: &str = "db.close";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Init,
    Resp,
}

/// An established reliable channel: the session plus per-direction counters.
/// Every ciphertext carries the value of `sent` at production time.
#[derive(Debug, Clone)]
pub struct Connection {
    pub session: Session,
    pub sent: u64,
    pub received: u64,
    pub role: Role,
}

impl Connection {
    fn new(session: Session, role: Role) -> Connection {
        Connection {
            session,
            sent: 0,
            received: 0,
            role,
        }
    }

    pub fn session_key(&self) -> &Term {
        &self.session.key
    }
}

/// Client half of connection establishment: run the ISO handshake as
/// initiator and wrap the session key.
pub fn conn_connect(ctx: &mut ProcCtx, sk_c: &Term, pk_s: &Term) -> Sim<Option<Connection>> {
    Ok(iso_initiator_session(ctx, sk_c, pk_s)?.map(|s| Connection::new(s, Role::Init)))
}

/// Server half, step one: wait for a connection request.
pub fn conn_listen(ctx: &mut ProcCtx) -> Sim<IsoRequest> {
    crate::proto::iso_listen(ctx)
}

/// Server half, step two: accept the request and finish the handshake.
pub fn conn_confirm(
    ctx: &mut ProcCtx,
    sk_s: &Term,
    req: &IsoRequest,
) -> Sim<Option<Connection>> {
    Ok(iso_confirm_session(ctx, sk_s, req)?.map(|s| Connection::new(s, Role::Resp)))
}

/// Send `payload` on the channel under `tag`, stamped with the next sequence
/// number.
pub fn conn_send(ctx: &mut ProcCtx, conn: &mut Connection, tag: &str, payload: &[Term]) -> Sim<()> {
    let body = Term::list([
        Term::tag(tag),
        Term::Int(conn.sent as i64),
        Term::list(payload.to_vec()),
    ]);
    let ciphertext = seal(conn.session_key(), &body).expect("session key seals");
    conn.sent += 1;
    ctx.send(ciphertext)
}

fn senc_seal(t: &Term) -> bool {
    matches!(t, Term::Seal(k, _) if matches!(&**k, Term::Key(KeyType::Senc, _)))
}

/// Poll the network until a message under one of `tags` with the expected
/// sequence number decrypts. Anything else -- wrong key, wrong tag, replayed
/// or future sequence number, malformed body -- is skipped and polling
/// continues.
fn conn_recv_where(
    ctx: &mut ProcCtx,
    conn: &mut Connection,
    accept: impl Fn(&str) -> bool,
) -> Sim<(String, Vec<Term>)> {
    loop {
        let m = ctx.recv_where(senc_seal)?;
        let items = match open(conn.session_key(), &m) {
            Some(Term::List(items)) if items.len() == 3 => items,
            _ => continue,
        };
        let tag = match &items[0] {
            Term::Tag(name) if accept(name) => name.clone(),
            _ => continue,
        };
        let seq = match items[1] {
            Term::Int(n) if n >= 0 => n as u64,
            _ => continue,
        };
        if seq != conn.received {
            continue;
        }
        let payload = match &items[2] {
            Term::List(items) => items.clone(),
            _ => continue,
        };
        conn.received += 1;
        return Ok((tag, payload));
    }
}

/// Receive the next in-order message under exactly `tag`.
pub fn conn_recv(ctx: &mut ProcCtx, conn: &mut Connection, tag: &str) -> Sim<Vec<Term>> {
    let want = tag.to_string();
    let (_, payload) = conn_recv_where(ctx, conn, move |t| t == want)?;
    Ok(payload)
}

// ---------------------------------------------------------------------------
// RPC.
// ---------------------------------------------------------------------------

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("rpc error reply")]
pub struct RpcError;

pub type RpcReply = Result<Vec<Term>, RpcError>;
pub type RpcHandler = Box<dyn FnMut(&[Term]) -> RpcReply + Send>;
pub type RpcHandlers = BTreeMap<String, RpcHandler>;

/// One call: send the request under the operation tag, wait for the matching
/// response. An `rpc.error` reply surfaces as `Err`.
pub fn rpc_call(
    ctx: &mut ProcCtx,
    conn: &mut Connection,
    op: &str,
    args: &[Term],
) -> Sim<Result<Vec<Term>, RpcError>> {
    conn_send(ctx, conn, op, args)?;
    let (tag, payload) = conn_recv_where(ctx, conn, |t| t == TAG_RESP || t == TAG_ERROR)?;
    if tag == TAG_RESP {
        Ok(Ok(payload))
    } else {
        Ok(Err(RpcError))
    }
}

/// Serve requests until the peer closes. Each request gets exactly one reply:
/// the handler's result under `rpc.resp`, or `rpc.error` for a handler error
/// or an unknown operation. A `rpc.close` request is acknowledged and ends
/// the loop.
pub fn rpc_serve(ctx: &mut ProcCtx, conn: &mut Connection, handlers: &mut RpcHandlers) -> Sim<()> {
    loop {
        let (op, args) = conn_recv_where(ctx, conn, |t| t != TAG_RESP && t != TAG_ERROR)?;
        if op == TAG_CLOSE {
            conn_send(ctx, conn, TAG_RESP, &[])?;
            return Ok(());
        }
        match handlers.get_mut(&op) {
            Some(handler) => match handler(&args) {
                Ok(items) => conn_send(ctx, conn, TAG_RESP, &items)?,
                Err(RpcError) => conn_send(ctx, conn, TAG_ERROR, &[])?,
            },
            None => conn_send(ctx, conn, TAG_ERROR, &[])?,
        }
    }
}

/// Close the connection: tell the server, wait for the acknowledgment, and
/// hand the session key back to the caller (games leak it afterwards).
pub fn rpc_close(ctx: &mut ProcCtx, conn: &mut Connection) -> Sim<Term> {
    conn_send(ctx, conn, TAG_CLOSE, &[])?;
    conn_recv(ctx, conn, TAG_RESP)?;
    Ok(conn.session_key().clone())
}

// ---------------------------------------------------------------------------
// Key-value store.
// ---------------------------------------------------------------------------

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum KvError {
    #[error("server rejected the operation")]
    Rejected,
    #[error("malformed server reply")]
    BadReply,
}

/// Per-client server state: the database (an association list) and the lock
/// serializing connections from this identity.
struct KvAccount {
    db: SimCell<Vec<(Term, Term)>>,
    lock: LockId,
}

/// The store server: accept connections forever, one forked handler per
/// connection. Failed handshakes are dropped; the accept loop never dies.
/// The handshake runs inside the handler so a stray connection request can
/// never wedge the accept loop.
pub fn kv_server_start(ctx: &mut ProcCtx, sk_s: Term) -> Sim<()> {
    let mut accounts: BTreeMap<Term, KvAccount> = BTreeMap::new();
    loop {
        let req = conn_listen(ctx)?;
        if !req.client_pk.is_verify_key() {
            continue;
        }
        let account = accounts.entry(req.client_pk.clone()).or_insert_with(|| KvAccount {
            db: SimCell::new(Vec::new()),
            lock: ctx.new_lock(),
        });
        let db = account.db.clone();
        let lock = account.lock;
        let sk_s = sk_s.clone();
        ctx.fork(move |ctx| kv_session(ctx, sk_s, req, db, lock))?;
    }
}

fn kv_session(
    ctx: &mut ProcCtx,
    sk_s: Term,
    req: IsoRequest,
    db: SimCell<Vec<(Term, Term)>>,
    lock: LockId,
) -> Sim<()> {
    let Some(mut conn) = conn_confirm(ctx, &sk_s, &req)? else {
        return Ok(());
    };
    ctx.acquire(lock)?;
    let mut handlers = kv_handlers(db);
    let served = rpc_serve(ctx, &mut conn, &mut handlers);
    let _ = ctx.release(lock);
    served
}

fn kv_handlers(db: SimCell<Vec<(Term, Term)>>) -> RpcHandlers {
    fn lookup(db: &[(Term, Term)], key: &Term) -> Option<Term> {
        db.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
    }

    let mut handlers: RpcHandlers = BTreeMap::new();
    let create_db = db.clone();
    handlers.insert(
        TAG_DB_CREATE.to_string(),
        Box::new(move |args: &[Term]| match args {
            [key, value] => create_db.with(|m| {
                if lookup(m, key).is_some() {
                    Err(RpcError)
                } else {
                    m.push((key.clone(), value.clone()));
                    Ok(vec![])
                }
            }),
            _ => Err(RpcError),
        }),
    );
    let store_db = db.clone();
    handlers.insert(
        TAG_DB_STORE.to_string(),
        Box::new(move |args: &[Term]| match args {
            [key, value] => store_db.with(|m| {
                match m.iter_mut().find(|(k, _)| k == key) {
                    Some(entry) => {
                        entry.1 = value.clone();
                        Ok(vec![])
                    }
                    None => Err(RpcError),
                }
            }),
            _ => Err(RpcError),
        }),
    );
    let load_db = db;
    handlers.insert(
        TAG_DB_LOAD.to_string(),
        Box::new(move |args: &[Term]| match args {
            [key] => load_db
                .with(|m| lookup(m, key))
                .map(|v| vec![v])
                .ok_or(RpcError),
            _ => Err(RpcError),
        }),
    );
    handlers.insert(
        TAG_DB_CLOSE.to_string(),
        Box::new(|args: &[Term]| match args {
            [] => Ok(vec![]),
            _ => Err(RpcError),
        }),
    );
    handlers
}

/// Client wrappers: thin calls into the RPC mechanism.
pub fn kv_connect(ctx: &mut ProcCtx, sk_c: &Term, pk_s: &Term) -> Sim<Option<Connection>> {
    conn_connect(ctx, sk_c, pk_s)
}

pub fn kv_create(
    ctx: &mut ProcCtx,
    conn: &mut Connection,
    key: &Term,
    value: &Term,
) -> Sim<Result<(), KvError>> {
    let reply = rpc_call(ctx, conn, TAG_DB_CREATE, &[key.clone(), value.clone()])?;
    Ok(match reply {
        Ok(items) if items.is_empty() => Ok(()),
        Ok(_) => Err(KvError::BadReply),
        Err(RpcError) => Err(KvError::Rejected),
    })
}

pub fn kv_store(
    ctx: &mut ProcCtx,
    conn: &mut Connection,
    key: &Term,
    value: &Term,
) -> Sim<Result<(), KvError>> {
    let reply = rpc_call(ctx, conn, TAG_DB_STORE, &[key.clone(), value.clone()])?;
    Ok(match reply {
        Ok(items) if items.is_empty() => Ok(()),
        Ok(_) => Err(KvError::BadReply),
        Err(RpcError) => Err(KvError::Rejected),
    })
}

pub fn kv_load(
    ctx: &mut ProcCtx,
    conn: &mut Connection,
    key: &Term,
) -> Sim<Result<Term, KvError>> {
    let reply = rpc_call(ctx, conn, TAG_DB_LOAD, &[key.clone()])?;
    Ok(match reply {
        Ok(items) if items.len() == 1 => Ok(items.into_iter().next().unwrap()),
        Ok(_) => Err(KvError::BadReply),
        Err(RpcError) => Err(KvError::Rejected),
    })
}

/// Close the store connection and return the session key.
pub fn kv_close(ctx: &mut ProcCtx, conn: &mut Connection) -> Sim<Term> {
    let _ = rpc_call(ctx, conn, TAG_DB_CLOSE, &[])?;
    rpc_close(ctx, conn)
}
