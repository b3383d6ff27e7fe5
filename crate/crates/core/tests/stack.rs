//! The secure stack: connection counters and ordering, replay resistance,
//! RPC dispatch, and the key-value store.

use symproto_core::deduct::{derivability_oracle, Verdict};
use symproto_core::proto::IsoRequest;
use symproto_core::runtime::{
    AttackerStrategy, EventKind, ProcFn, RunStatus, Script, ScriptStep, Sim, SimCell, Simulator,
    DEFAULT_STEP_BUDGET,
};
use symproto_core::stack::{
    conn_confirm, conn_connect, conn_listen, conn_recv, conn_send, kv_close, kv_create, kv_load,
    kv_server_start, kv_store, rpc_call, rpc_close, rpc_serve, Connection, KvError, RpcHandlers,
    RpcReply,
};
use symproto_core::term::{open, pkey, KeyType, Term};

fn sign_keypair(sim: &Simulator) -> (Term, Term) {
    let sk = Term::key(KeyType::Sign, sim.honest_nonce());
    let pk = pkey(&sk).unwrap();
    (sk, pk)
}

/// Handshakes fail fast when the attacker splices in a stale message, so
/// multi-connection flows retry a bounded number of times.
fn connect_retry(
    ctx: &mut symproto_core::runtime::ProcCtx,
    sk: &Term,
    pk: &Term,
    attempts: u32,
) -> Sim<Option<Connection>> {
    for _ in 0..attempts {
        if let Some(conn) = conn_connect(ctx, sk, pk)? {
            return Ok(Some(conn));
        }
    }
    Ok(None)
}

/// Spawn a connected client/server pair and run the two bodies over the
/// established connections.
fn with_connection(
    sim: Simulator,
    seed: u64,
    strategy: AttackerStrategy,
    budget: u64,
    sk_c: Term,
    sk_s: Term,
    client: impl FnOnce(&mut symproto_core::runtime::ProcCtx, &mut Connection) -> Sim<()>
        + Send
        + 'static,
    server: impl FnOnce(&mut symproto_core::runtime::ProcCtx, &mut Connection) -> Sim<()>
        + Send
        + 'static,
) -> symproto_core::runtime::RunOutcome {
    let pk_s = pkey(&sk_s).unwrap();
    let client_proc: ProcFn = Box::new(move |ctx| {
        let Some(mut conn) = conn_connect(ctx, &sk_c, &pk_s)? else {
            return Ok(());
        };
        client(ctx, &mut conn)
    });
    let server_proc: ProcFn = Box::new(move |ctx| {
        let req = conn_listen(ctx)?;
        let Some(mut conn) = conn_confirm(ctx, &sk_s, &req)? else {
            return Ok(());
        };
        server(ctx, &mut conn)
    });
    sim.run(vec![client_proc, server_proc], seed, strategy, budget)
}

#[test]
fn connect_and_confirm_agree_on_the_session_key() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let ck: SimCell<Option<Term>> = SimCell::new(None);
    let sk: SimCell<Option<Term>> = SimCell::new(None);
    let (co, so) = (ck.clone(), sk.clone());
    let outcome = with_connection(
        sim,
        3,
        AttackerStrategy::Passive,
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |_ctx, conn| {
            co.set(Some(conn.session_key().clone()));
            Ok(())
        },
        move |_ctx, conn| {
            so.set(Some(conn.session_key().clone()));
            Ok(())
        },
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    assert_eq!(ck.get(), sk.get());
    assert!(ck.get().is_some());
}

#[test]
fn sequential_connections_get_distinct_keys() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let pk_s = pkey(&sk_s).unwrap();
    let keys: SimCell<Vec<Term>> = SimCell::new(Vec::new());

    let out = keys.clone();
    let client: ProcFn = Box::new(move |ctx| {
        for _ in 0..2 {
            let Some(conn) = connect_retry(ctx, &sk_c, &pk_s, 8)? else {
                break;
            };
            out.with(|v| v.push(conn.session_key().clone()));
        }
        ctx.finish_run();
        Ok(())
    });
    // Accept loop forks each handshake so a stale request can never wedge it.
    let server: ProcFn = Box::new(move |ctx| loop {
        let req = conn_listen(ctx)?;
        let sk_s = sk_s.clone();
        ctx.fork(move |ctx| {
            conn_confirm(ctx, &sk_s, &req)?;
            Ok(())
        })?;
    });
    let outcome = sim.run(vec![client, server], 8, AttackerStrategy::Passive, 40_000);
    assert_ne!(outcome.status, RunStatus::AssertFailed);
    let keys = keys.get();
    assert_eq!(keys.len(), 2);
    assert_ne!(keys[0], keys[1]);
}

#[test]
fn handshake_failure_propagates_none() {
    // Confirm on a request naming a non-verify identity fails before any send.
    let sim = Simulator::new();
    let (sk_s, _) = sign_keypair(&sim);
    let got: SimCell<Option<bool>> = SimCell::new(None);
    let out = got.clone();
    let server: ProcFn = Box::new(move |ctx| {
        let req = IsoRequest {
            init_share: Term::Int(1),
            client_pk: Term::Int(2),
        };
        let conn = conn_confirm(ctx, &sk_s, &req)?;
        out.set(Some(conn.is_none()));
        Ok(())
    });
    sim.run(vec![server], 0, AttackerStrategy::Passive, 1_000);
    assert_eq!(got.get(), Some(true));
}

#[test]
fn send_counters_stamp_ciphertexts_in_order() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let key_out: SimCell<Option<Term>> = SimCell::new(None);
    let ko = key_out.clone();
    let outcome = with_connection(
        sim,
        1,
        AttackerStrategy::Passive,
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |ctx, conn| {
            ko.set(Some(conn.session_key().clone()));
            conn_send(ctx, conn, "data", &[Term::Int(10)])?;
            conn_send(ctx, conn, "data", &[Term::Int(11)])?;
            assert_eq!(conn.sent, 2);
            Ok(())
        },
        |_ctx, _conn| Ok(()),
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    let key = key_out.get().unwrap();
    // Inspect the wire: the two data ciphertexts carry sequence numbers 0, 1.
    let seqs: Vec<i64> = outcome
        .trace
        .sent_terms()
        .filter_map(|t| match open(&key, t) {
            Some(Term::List(items)) if items[0] == Term::tag("data") => match items[1] {
                Term::Int(n) => Some(n),
                _ => None,
            },
            _ => None,
        })
        .collect();
    assert_eq!(seqs, vec![0, 1]);
}

#[test]
fn payloads_are_confidential_until_the_key_leaks() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let secret: SimCell<Option<Term>> = SimCell::new(None);
    let key_out: SimCell<Option<Term>> = SimCell::new(None);
    let (so, ko) = (secret.clone(), key_out.clone());
    let outcome = with_connection(
        sim,
        2,
        AttackerStrategy::Passive,
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |ctx, conn| {
            let n = ctx.mk_nonce();
            so.set(Some(n.clone()));
            ko.set(Some(conn.session_key().clone()));
            conn_send(ctx, conn, "data", &[n])?;
            Ok(())
        },
        |_ctx, _conn| Ok(()),
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    let n = secret.get().unwrap();
    assert_eq!(derivability_oracle(&outcome.trace, &n), Verdict::Underivable);
    // After the session key leaks, the payload falls out retroactively.
    let mut trace = outcome.trace;
    trace.push(EventKind::Leak {
        term: key_out.get().unwrap(),
    });
    assert_eq!(derivability_oracle(&trace, &n), Verdict::Derivable);
}

#[test]
fn recv_returns_payloads_in_send_order_and_multiplexes_tags() {
    for seed in 0..20 {
        let sim = Simulator::new();
        let (sk_c, _) = sign_keypair(&sim);
        let (sk_s, _) = sign_keypair(&sim);
        let got: SimCell<Vec<(String, Term)>> = SimCell::new(Vec::new());
        let out = got.clone();
        let outcome = with_connection(
            sim,
            seed,
            AttackerStrategy::Passive,
            DEFAULT_STEP_BUDGET,
            sk_c,
            sk_s,
            move |ctx, conn| {
                for i in 0..3 {
                    conn_send(ctx, conn, "alpha", &[Term::Int(i)])?;
                    conn_send(ctx, conn, "beta", &[Term::Int(10 + i)])?;
                }
                Ok(())
            },
            move |ctx, conn| {
                // Interleaved sends arrive in order regardless of tag order
                // of the receives.
                for i in 0..3 {
                    let a = conn_recv(ctx, conn, "alpha")?;
                    out.with(|v| v.push(("alpha".into(), a[0].clone())));
                    let b = conn_recv(ctx, conn, "beta")?;
                    out.with(|v| v.push(("beta".into(), b[0].clone())));
                    let _ = i;
                }
                Ok(())
            },
        );
        assert_eq!(outcome.status, RunStatus::Ok, "seed {seed}");
        let got = got.get();
        let alphas: Vec<&Term> = got.iter().filter(|(t, _)| t == "alpha").map(|(_, v)| v).collect();
        let betas: Vec<&Term> = got.iter().filter(|(t, _)| t == "beta").map(|(_, v)| v).collect();
        assert_eq!(alphas, vec![&Term::Int(0), &Term::Int(1), &Term::Int(2)]);
        assert_eq!(betas, vec![&Term::Int(10), &Term::Int(11), &Term::Int(12)]);
    }
}

#[test]
fn scripted_replay_of_a_ciphertext_is_skipped() {
    // The attacker re-delivers the first data ciphertext after it was already
    // accepted; the stale sequence number is skipped and the second message
    // still arrives exactly once.
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let got: SimCell<Vec<Term>> = SimCell::new(Vec::new());
    let out = got.clone();

    let replay = Script::new(vec![ScriptStep::new("replay-first-data", {
        let mut fired = false;
        move |pool: &[Term]| {
            if fired {
                return None;
            }
            // Wait until both data ciphertexts exist, then replay the first.
            let seals: Vec<&Term> = pool
                .iter()
                .filter(|t| matches!(t, Term::Seal(k, _) if matches!(&**k, Term::Key(KeyType::Senc, _))))
                .collect();
            if seals.len() >= 2 {
                fired = true;
                Some(seals[0].clone())
            } else {
                None
            }
        }
    })])
    .with_passive_fallback();

    let outcome = with_connection(
        sim,
        5,
        AttackerStrategy::Scripted(replay),
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |ctx, conn| {
            conn_send(ctx, conn, "data", &[Term::Int(0)])?;
            conn_send(ctx, conn, "data", &[Term::Int(1)])?;
            Ok(())
        },
        move |ctx, conn| {
            for _ in 0..2 {
                let p = conn_recv(ctx, conn, "data")?;
                out.with(|v| v.push(p[0].clone()));
            }
            Ok(())
        },
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    assert_eq!(got.get(), vec![Term::Int(0), Term::Int(1)]);
}

// ---------------------------------------------------------------------------
// RPC.
// ---------------------------------------------------------------------------

fn echo_handlers() -> RpcHandlers {
    let mut handlers: RpcHandlers = RpcHandlers::new();
    handlers.insert(
        "echo".to_string(),
        Box::new(|args: &[Term]| -> RpcReply { Ok(args.to_vec()) }),
    );
    handlers
}

#[test]
fn rpc_echo_roundtrip_and_counters() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let observed: SimCell<Option<(Vec<Term>, u64, u64)>> = SimCell::new(None);
    let out = observed.clone();
    let outcome = with_connection(
        sim,
        4,
        AttackerStrategy::Passive,
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |ctx, conn| {
            let args = vec![Term::Int(1), Term::tag("x")];
            let reply = rpc_call(ctx, conn, "echo", &args)?.expect("echo succeeds");
            out.set(Some((reply, conn.sent, conn.received)));
            let _ = rpc_close(ctx, conn)?;
            Ok(())
        },
        move |ctx, conn| rpc_serve(ctx, conn, &mut echo_handlers()),
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    let (reply, sent, received) = observed.get().unwrap();
    assert_eq!(reply, vec![Term::Int(1), Term::tag("x")]);
    // One request out, one response in.
    assert_eq!((sent, received), (1, 1));
}

#[test]
fn unknown_op_gets_error_reply_and_connection_survives() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let results: SimCell<Vec<bool>> = SimCell::new(Vec::new());
    let out = results.clone();
    let outcome = with_connection(
        sim,
        6,
        AttackerStrategy::Passive,
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |ctx, conn| {
            let first = rpc_call(ctx, conn, "no.such.op", &[])?;
            out.with(|v| v.push(first.is_err()));
            let second = rpc_call(ctx, conn, "echo", &[Term::Int(7)])?;
            out.with(|v| v.push(second == Ok(vec![Term::Int(7)])));
            let _ = rpc_close(ctx, conn)?;
            Ok(())
        },
        move |ctx, conn| rpc_serve(ctx, conn, &mut echo_handlers()),
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    assert_eq!(results.get(), vec![true, true]);
}

#[test]
fn close_handshake_terminates_serve_and_returns_key() {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let returned: SimCell<Option<Term>> = SimCell::new(None);
    let served: SimCell<bool> = SimCell::new(false);
    let (ro, so) = (returned.clone(), served.clone());
    let outcome = with_connection(
        sim,
        7,
        AttackerStrategy::Passive,
        DEFAULT_STEP_BUDGET,
        sk_c,
        sk_s,
        move |ctx, conn| {
            let key = rpc_close(ctx, conn)?;
            ro.set(Some(key));
            Ok(())
        },
        move |ctx, conn| {
            rpc_serve(ctx, conn, &mut RpcHandlers::new())?;
            so.set(true); // the loop exited cleanly
            Ok(())
        },
    );
    assert_eq!(outcome.status, RunStatus::Ok);
    assert!(served.get());
    assert!(returned.get().is_some());
}

#[test]
fn interleaved_calls_on_two_connections_do_not_cross() {
    // Two clients, one echo server forked per connection; replies never leak
    // across connections because the session keys differ.
    let sim = Simulator::new();
    let (sk_a, _) = sign_keypair(&sim);
    let (sk_b, _) = sign_keypair(&sim);
    let (sk_s, _) = sign_keypair(&sim);
    let pk_s = pkey(&sk_s).unwrap();
    let replies: SimCell<Vec<(u32, Vec<Term>)>> = SimCell::new(Vec::new());
    let clients_done: SimCell<u32> = SimCell::new(0);

    let client_a: ProcFn = {
        let (sk, pk_s, out) = (sk_a.clone(), pk_s.clone(), replies.clone());
        let done = clients_done.clone();
        Box::new(move |ctx| {
            let Some(mut conn) = connect_retry(ctx, &sk, &pk_s, 8)? else {
                return Ok(());
            };
            for i in 0..2 {
                if let Ok(items) = rpc_call(ctx, &mut conn, "echo", &[Term::Int(100 + i)])? {
                    let me = ctx.pid();
                    out.with(|v| v.push((me, items)));
                }
            }
            let _ = rpc_close(ctx, &mut conn)?;
            if done.with(|n| { *n += 1; *n }) == 2 {
                ctx.finish_run();
            }
            Ok(())
        })
    };
    let client_b: ProcFn = {
        let (sk, pk_s, out) = (sk_b.clone(), pk_s.clone(), replies.clone());
        let done = clients_done.clone();
        Box::new(move |ctx| {
            let Some(mut conn) = connect_retry(ctx, &sk, &pk_s, 8)? else {
                return Ok(());
            };
            for i in 0..2 {
                if let Ok(items) = rpc_call(ctx, &mut conn, "echo", &[Term::Int(200 + i)])? {
                    let me = ctx.pid();
                    out.with(|v| v.push((me, items)));
                }
            }
            let _ = rpc_close(ctx, &mut conn)?;
            if done.with(|n| { *n += 1; *n }) == 2 {
                ctx.finish_run();
            }
            Ok(())
        })
    };
    let server: ProcFn = Box::new(move |ctx| {
        // Serve every request that arrives; stale replays spawn handlers
        // whose handshakes fail harmlessly.
        loop {
            let req = conn_listen(ctx)?;
            let sk_s = sk_s.clone();
            ctx.fork(move |ctx| {
                let Some(mut conn) = conn_confirm(ctx, &sk_s, &req)? else {
                    return Ok(());
                };
                rpc_serve(ctx, &mut conn, &mut echo_handlers())
            })?;
        }
    });

    let outcome = sim.run(
        vec![client_a, client_b, server],
        12,
        AttackerStrategy::Passive,
        40_000,
    );
    assert_ne!(outcome.status, RunStatus::AssertFailed);
    let replies = replies.get();
    assert_eq!(replies.len(), 4);
    for (pid, items) in replies {
        let v = match items.as_slice() {
            [Term::Int(v)] => *v,
            other => panic!("unexpected reply {other:?}"),
        };
        // Client A is pid 0 and asked for 10x, client B pid 1 asked for 20x.
        match pid {
            0 => assert!((100..102).contains(&v)),
            1 => assert!((200..202).contains(&v)),
            other => panic!("unexpected pid {other}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Key-value store.
// ---------------------------------------------------------------------------

fn kv_fixture(
    seed: u64,
    client: impl FnOnce(&mut symproto_core::runtime::ProcCtx, Term, Term) -> Sim<()> + Send + 'static,
) -> symproto_core::runtime::RunOutcome {
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, pk_s) = sign_keypair(&sim);
    let server: ProcFn = {
        let sk_s = sk_s.clone();
        Box::new(move |ctx| kv_server_start(ctx, sk_s))
    };
    let client_proc: ProcFn = Box::new(move |ctx| {
        let outcome = client(ctx, sk_c, pk_s);
        ctx.finish_run(); // the server accepts forever; the client is the game
        outcome
    });
    sim.run(vec![server, client_proc], seed, AttackerStrategy::Passive, 40_000)
}

#[test]
fn kv_roundtrip_and_update() {
    let checks: SimCell<Vec<&'static str>> = SimCell::new(Vec::new());
    let out = checks.clone();
    let outcome = kv_fixture(9, move |ctx, sk_c, pk_s| {
        let Some(mut conn) = connect_retry(ctx, &sk_c, &pk_s, 8)? else {
            return Ok(());
        };
        let k = Term::tag("k");
        // Load before create: the server rejects.
        if kv_load(ctx, &mut conn, &k)?.is_err() {
            out.with(|v| v.push("load_missing_rejected"));
        }
        if kv_create(ctx, &mut conn, &k, &Term::Int(1))?.is_ok() {
            out.with(|v| v.push("created"));
        }
        if kv_load(ctx, &mut conn, &k)? == Ok(Term::Int(1)) {
            out.with(|v| v.push("loaded_v1"));
        }
        // Create on an existing key: error reply, connection still usable.
        if kv_create(ctx, &mut conn, &k, &Term::Int(2))? == Err(KvError::Rejected) {
            out.with(|v| v.push("create_existing_rejected"));
        }
        if kv_store(ctx, &mut conn, &k, &Term::Int(2))?.is_ok() {
            out.with(|v| v.push("stored_v2"));
        }
        if kv_load(ctx, &mut conn, &k)? == Ok(Term::Int(2)) {
            out.with(|v| v.push("loaded_v2"));
        }
        // Store on a missing key: rejected.
        if kv_store(ctx, &mut conn, &Term::tag("absent"), &Term::Int(0))? == Err(KvError::Rejected)
        {
            out.with(|v| v.push("store_missing_rejected"));
        }
        let _ = kv_close(ctx, &mut conn)?;
        Ok(())
    });
    assert_ne!(outcome.status, RunStatus::AssertFailed);
    assert_eq!(
        checks.get(),
        vec![
            "load_missing_rejected",
            "created",
            "loaded_v1",
            "create_existing_rejected",
            "stored_v2",
            "loaded_v2",
            "store_missing_rejected",
        ]
    );
}

#[test]
fn kv_reconnect_sees_earlier_data() {
    let checks: SimCell<Vec<bool>> = SimCell::new(Vec::new());
    let out = checks.clone();
    let outcome = kv_fixture(10, move |ctx, sk_c, pk_s| {
        let Some(mut c1) = connect_retry(ctx, &sk_c, &pk_s, 8)? else {
            return Ok(());
        };
        let k = Term::tag("persist");
        let created = kv_create(ctx, &mut c1, &k, &Term::Int(42))?.is_ok();
        out.with(|v| v.push(created));
        let _ = kv_close(ctx, &mut c1)?;
        let Some(mut c2) = connect_retry(ctx, &sk_c, &pk_s, 8)? else {
            return Ok(());
        };
        let loaded = kv_load(ctx, &mut c2, &k)? == Ok(Term::Int(42));
        out.with(|v| v.push(loaded));
        let _ = kv_close(ctx, &mut c2)?;
        Ok(())
    });
    assert_ne!(outcome.status, RunStatus::AssertFailed);
    assert_eq!(checks.get(), vec![true, true]);
}

#[test]
fn kv_two_identities_are_isolated() {
    let sim = Simulator::new();
    let (sk_a, _) = sign_keypair(&sim);
    let (sk_b, _) = sign_keypair(&sim);
    let (sk_s, pk_s) = sign_keypair(&sim);
    let checks: SimCell<Vec<bool>> = SimCell::new(Vec::new());
    let clients_done: SimCell<u32> = SimCell::new(0);

    let server: ProcFn = {
        let sk_s = sk_s.clone();
        Box::new(move |ctx| kv_server_start(ctx, sk_s))
    };
    let client_a: ProcFn = {
        let (sk, pk_s, out) = (sk_a.clone(), pk_s.clone(), checks.clone());
        let done = clients_done.clone();
        Box::new(move |ctx| {
            let Some(mut conn) = connect_retry(ctx, &sk, &pk_s, 8)? else {
                return Ok(());
            };
            let k = Term::tag("shared.name");
            let created = kv_create(ctx, &mut conn, &k, &Term::Int(1))?.is_ok();
            out.with(|v| v.push(created));
            let loaded = kv_load(ctx, &mut conn, &k)? == Ok(Term::Int(1));
            out.with(|v| v.push(loaded));
            let _ = kv_close(ctx, &mut conn)?;
            if done.with(|n| { *n += 1; *n }) == 2 {
                ctx.finish_run();
            }
            Ok(())
        })
    };
    let client_b: ProcFn = {
        let (sk, pk_s, out) = (sk_b.clone(), pk_s.clone(), checks.clone());
        let done = clients_done.clone();
        Box::new(move |ctx| {
            let Some(mut conn) = connect_retry(ctx, &sk, &pk_s, 8)? else {
                return Ok(());
            };
            let k = Term::tag("shared.name");
            // Same key name, different account: create succeeds with its own
            // value and never sees A's.
            let created = kv_create(ctx, &mut conn, &k, &Term::Int(2))?.is_ok();
            out.with(|v| v.push(created));
            let loaded = kv_load(ctx, &mut conn, &k)? == Ok(Term::Int(2));
            out.with(|v| v.push(loaded));
            let _ = kv_close(ctx, &mut conn)?;
            if done.with(|n| { *n += 1; *n }) == 2 {
                ctx.finish_run();
            }
            Ok(())
        })
    };
    let outcome = sim.run(
        vec![server, client_a, client_b],
        21,
        AttackerStrategy::Passive,
        40_000,
    );
    assert_ne!(outcome.status, RunStatus::AssertFailed);
    assert_eq!(checks.get().len(), 4);
    assert!(checks.get().iter().all(|b| *b));
}

#[test]
fn kv_second_connection_from_same_identity_waits_for_the_lock() {
    // Client holds c1 open while a second session from the same identity
    // completes its handshake; the second handler blocks on the account lock
    // until c1 closes, so its operations see c1's writes.
    let sim = Simulator::new();
    let (sk_c, _) = sign_keypair(&sim);
    let (sk_s, pk_s) = sign_keypair(&sim);
    let ordered: SimCell<Vec<bool>> = SimCell::new(Vec::new());

    let server: ProcFn = {
        let sk_s = sk_s.clone();
        Box::new(move |ctx| kv_server_start(ctx, sk_s))
    };
    let client: ProcFn = {
        let out = ordered.clone();
        Box::new(move |ctx| {
            let Some(mut c1) = connect_retry(ctx, &sk_c, &pk_s, 8)? else {
                return Ok(());
            };
            // Second connection handshake completes while c1 is open.
            let Some(mut c2) = connect_retry(ctx, &sk_c, &pk_s, 8)? else {
                return Ok(());
            };
            let k = Term::tag("gate");
            let created = kv_create(ctx, &mut c1, &k, &Term::Int(7))?.is_ok();
            out.with(|v| v.push(created));
            let _ = kv_close(ctx, &mut c1)?;
            // Only now can c2's handler acquire the lock and serve.
            let loaded = kv_load(ctx, &mut c2, &k)? == Ok(Term::Int(7));
            out.with(|v| v.push(loaded));
            let _ = kv_close(ctx, &mut c2)?;
            ctx.finish_run();
            Ok(())
        })
    };
    let outcome = sim.run(vec![server, client], 30, AttackerStrategy::Passive, 40_000);
    assert_ne!(outcome.status, RunStatus::AssertFailed);
    assert_eq!(ordered.get(), vec![true, true]);
}
