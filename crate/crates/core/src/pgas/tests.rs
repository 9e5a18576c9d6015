use super::*;

fn det_cfg(n: usize, seed: u64) -> WorldCfg {
    WorldCfg::deterministic(n, seed)
}

#[test]
fn alloc_zero_initialized_everywhere() {
    let out = run_world(
        det_cfg(4, 1),
        (0..4)
            .map(|_| {
                Box::new(|pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(16, ElemKind::Real3)?;
                    let v = pc.read(b, pc.pe(), 0, 16)?;
                    assert!(v.iter().all(|x| *x == [0.0; 3]));
                    Ok(())
                }) as PeProgram
            })
            .collect(),
    )
    .unwrap();
    assert_eq!(out.record.n_pes, 4);
}

#[test]
fn alloc_mismatch_is_collective_error() {
    let err = run_world(
        det_cfg(2, 1),
        vec![
            Box::new(|pc: &mut PeCtx| {
                pc.alloc_symmetric(16, ElemKind::Real3)?;
                Ok(())
            }) as PeProgram,
            Box::new(|pc: &mut PeCtx| {
                pc.alloc_symmetric(8, ElemKind::Real3)?;
                Ok(())
            }) as PeProgram,
        ],
    )
    .unwrap_err();
    assert!(matches!(err, PgasError::CollectiveMismatch(_)), "{err}");
}

#[test]
fn put_visible_after_quiet() {
    let out = run_world(
        det_cfg(4, 3),
        (0..4)
            .map(|pe| {
                Box::new(move |pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(4, ElemKind::Real3)?;
                    if pe == 0 {
                        pc.put(b, 3, 1, &[[7.0, 8.0, 9.0]])?;
                        pc.quiet()?;
                    }
                    pc.barrier_all()?;
                    if pe == 3 {
                        let v = pc.read(b, 3, 1, 1)?;
                        assert_eq!(v[0], [7.0, 8.0, 9.0]);
                    }
                    Ok(())
                }) as PeProgram
            })
            .collect(),
    )
    .unwrap();
    assert_eq!(out.buffer(BufId(0), 3)[1], [7.0, 8.0, 9.0]);
}

#[test]
fn peer_ref_follows_islands() {
    run_world(
        WorldCfg::deterministic(4, 5).with_islands(Islands::Size(2)),
        (0..4)
            .map(|pe| {
                Box::new(move |pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(1, ElemKind::Real)?;
                    if pe == 0 {
                        assert!(pc.peer_ref(b, 1).is_some());
                        assert!(pc.peer_ref(b, 2).is_none());
                        assert!(pc.peer_ref(b, 0).is_some());
                        assert!(pc.write(b, 2, 0, &[[1.0; 3]]).is_err());
                    }
                    Ok(())
                }) as PeProgram
            })
            .collect(),
    )
    .unwrap();
}

#[test]
fn single_pe_world_self_reference() {
    run_world(
        det_cfg(1, 9),
        vec![Box::new(|pc: &mut PeCtx| {
            let b = pc.alloc_symmetric(2, ElemKind::Int)?;
            assert!(pc.peer_ref(b, 0).is_some());
            Ok(())
        }) as PeProgram],
    )
    .unwrap();
}

/// Payload of a put-with-signal is fully visible once the signal is
/// acquired, in every memory-model mode and across many interleavings.
#[test]
fn put_with_signal_publishes_payload() {
    for seed in 0..50 {
        run_world(
            det_cfg(2, seed).weak(1.0),
            vec![
                Box::new(|pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(128, ElemKind::Real3)?;
                    let s = pc.alloc_signals(1)?;
                    let payload: Vec<Val> = (0..100).map(|i| [i as f64, 0.5, -1.0]).collect();
                    pc.put_with_signal(b, 1, 0, &payload, s, 0, 1)?;
                    Ok(())
                }) as PeProgram,
                Box::new(|pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(128, ElemKind::Real3)?;
                    let s = pc.alloc_signals(1)?;
                    pc.signal_wait(s, 0, 1)?;
                    let got = pc.read(b, 1, 0, 100)?;
                    for (i, v) in got.iter().enumerate() {
                        assert_eq!(*v, [i as f64, 0.5, -1.0], "stale element {i} seed {}", 0);
                    }
                    Ok(())
                }) as PeProgram,
            ],
        )
        .unwrap();
    }
}

#[test]
fn zero_length_put_with_signal_still_signals() {
    run_world(
        det_cfg(2, 11).weak(1.0),
        vec![
            Box::new(|pc: &mut PeCtx| {
                let b = pc.alloc_symmetric(4, ElemKind::Real3)?;
                let s = pc.alloc_signals(1)?;
                pc.put_with_signal(b, 1, 0, &[], s, 0, 7)?;
                Ok(())
            }) as PeProgram,
            Box::new(|pc: &mut PeCtx| {
                let _ = pc.alloc_symmetric(4, ElemKind::Real3)?;
                let s = pc.alloc_signals(1)?;
                pc.signal_wait(s, 0, 7)?;
                Ok(())
            }) as PeProgram,
        ],
    )
    .unwrap();
}

/// Message-passing litmus: release store publishes all prior plain writes.
#[test]
fn release_store_publishes_prior_writes() {
    for seed in 0..100 {
        run_world(
            det_cfg(2, seed).weak(1.0),
            vec![
                Box::new(|pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(8, ElemKind::Real)?;
                    let s = pc.alloc_signals(1)?;
                    pc.write(b, 1, 0, &[[1.0; 3]])?;
                    pc.write(b, 1, 1, &[[2.0; 3]])?;
                    pc.write(b, 1, 2, &[[3.0; 3]])?;
                    pc.signal_store(s, 1, 0, 1, StoreOrdering::Release)?;
                    Ok(())
                }) as PeProgram,
                Box::new(move |pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(8, ElemKind::Real)?;
                    let s = pc.alloc_signals(1)?;
                    pc.signal_wait(s, 0, 1)?;
                    let v = pc.read(b, 1, 0, 3)?;
                    assert_eq!(v, vec![[1.0; 3], [2.0; 3], [3.0; 3]], "seed {seed}");
                    Ok(())
                }) as PeProgram,
            ],
        )
        .unwrap();
    }
}

/// Replacing the release with a relaxed store must leak a stale read in at
/// least one seeded trial: the litmus harness for the adversary.
#[test]
fn relaxed_store_with_prior_writes_caught_by_adversary() {
    let mut stale_seen = 0usize;
    for seed in 0..1000 {
        let stale = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
        let flag = stale.clone();
        run_world(
            det_cfg(2, seed).weak(1.0),
            vec![
                Box::new(|pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(4, ElemKind::Real)?;
                    let s = pc.alloc_signals(1)?;
                    pc.write(b, 1, 0, &[[5.0; 3]])?;
                    pc.signal_store(s, 1, 0, 1, StoreOrdering::Relaxed)?;
                    pc.barrier_all()?;
                    Ok(())
                }) as PeProgram,
                Box::new(move |pc: &mut PeCtx| {
                    let b = pc.alloc_symmetric(4, ElemKind::Real)?;
                    let s = pc.alloc_signals(1)?;
                    pc.signal_wait(s, 0, 1)?;
                    let v = pc.read(b, 1, 0, 1)?;
                    if v[0] != [5.0; 3] {
                        flag.store(true, std::sync::atomic::Ordering::Relaxed);
                    }
                    pc.barrier_all()?;
                    Ok(())
                }) as PeProgram,
            ],
        )
        .unwrap();
        if stale.load(std::sync::atomic::Ordering::Relaxed) {
            stale_seen += 1;
        }
    }
    assert!(
        stale_seen > 0,
        "adversary must catch the missing release at least once in 1000 trials"
    );
}

/// Relaxed store with no prior writes is legitimate: the waiter sees the
/// counter and nothing else was promised.
#[test]
fn relaxed_store_without_writes_is_clean() {
    run_world(
        det_cfg(2, 21).weak(1.0),
        vec![
            Box::new(|pc: &mut PeCtx| {
                let s = pc.alloc_signals(1)?;
                pc.signal_store(s, 1, 0, 3, StoreOrdering::Relaxed)?;
                Ok(())
            }) as PeProgram,
            Box::new(|pc: &mut PeCtx| {
                let s = pc.alloc_signals(1)?;
                pc.signal_wait(s, 0, 3)?;
                assert!(pc.signal_read(s, 0)? >= 3);
                Ok(())
            }) as PeProgram,
        ],
    )
    .unwrap();
}

/// Signal counters observed by any PE never decrease.
#[test]
fn signal_monotonicity() {
    for seed in [1, 7, 40] {
        run_world(
            det_cfg(3, seed).weak(0.8),
            (0..3)
                .map(|pe| {
                    Box::new(move |pc: &mut PeCtx| {
                        let s = pc.alloc_signals(1)?;
                        if pe > 0 {
                            for v in 1..=5u64 {
                                pc.signal_store(s, 0, 0, v, StoreOrdering::Relaxed)?;
                            }
                        } else {
                            let mut last = 0;
                            for _ in 0..20 {
                                let v = pc.signal_read(s, 0)?;
                                assert!(v >= last, "signal went backwards");
                                last = v;
                            }
                        }
                        Ok(())
                    }) as PeProgram
                })
                .collect(),
        )
        .unwrap();
    }
}

/// Concurrent increments by k contexts return exactly {0..k-1}.
#[test]
fn counter_increments_are_a_permutation() {
    for seed in 0..20 {
        let results = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let k = 6;
        run_world(
            det_cfg(k, seed),
            (0..k)
                .map(|_| {
                    let results = results.clone();
                    Box::new(move |pc: &mut PeCtx| {
                        let c = pc.alloc_counters(1)?;
                        let prev = pc.counter_inc_release(c, 0, 0)?;
                        results.lock().unwrap().push(prev);
                        Ok(())
                    }) as PeProgram
                })
                .collect(),
        )
        .unwrap();
        let mut got = std::sync::Arc::try_unwrap(results).unwrap().into_inner().unwrap();
        got.sort_unstable();
        assert_eq!(got, (0..k as u64).collect::<Vec<_>>());
    }
}

/// Same-PE observers of the counter see the incrementer's prior writes.
#[test]
fn counter_release_publishes_to_same_pe_observers() {
    run_world(
        det_cfg(1, 3).weak(1.0),
        vec![Box::new(|pc: &mut PeCtx| {
            let b = pc.alloc_symmetric(1, ElemKind::Real)?;
            let c = pc.alloc_counters(1)?;
            let t = pc.spawn(move |tc| {
                tc.write(b, 0, 0, &[[9.0; 3]])?;
                tc.counter_inc_release(c, 0, 0)?;
                Ok(())
            })?;
            pc.counter_wait(c, 0, 1)?;
            let v = pc.read(b, 0, 0, 1)?;
            assert_eq!(v[0], [9.0; 3]);
            pc.join(t)?;
            Ok(())
        }) as PeProgram],
    )
    .unwrap();
}

/// Circular signal waits with no storer must trip the deadlock detector
/// with a dump of the blocked waiters.
#[test]
fn deadlock_detected_on_circular_wait() {
    let err = run_world(
        det_cfg(2, 13),
        vec![
            Box::new(|pc: &mut PeCtx| {
                let s = pc.alloc_signals(2)?;
                pc.signal_wait(s, 0, 1)?;
                pc.signal_store(s, 1, 1, 1, StoreOrdering::Release)?;
                Ok(())
            }) as PeProgram,
            Box::new(|pc: &mut PeCtx| {
                let s = pc.alloc_signals(2)?;
                pc.signal_wait(s, 1, 1)?;
                pc.signal_store(s, 0, 0, 1, StoreOrdering::Release)?;
                Ok(())
            }) as PeProgram,
        ],
    )
    .unwrap_err();
    match err {
        PgasError::SimDeadlock { waiters } => assert_eq!(waiters.len(), 2),
        other => panic!("expected deadlock, got {other}"),
    }
}

#[test]
fn no_false_deadlock_when_signal_arrives() {
    run_world(
        det_cfg(2, 17),
        vec![
            Box::new(|pc: &mut PeCtx| {
                let s = pc.alloc_signals(1)?;
                pc.compute(5)?;
                pc.signal_store(s, 1, 0, 1, StoreOrdering::Release)?;
                Ok(())
            }) as PeProgram,
            Box::new(|pc: &mut PeCtx| {
                let s = pc.alloc_signals(1)?;
                pc.signal_wait(s, 0, 1)?;
                Ok(())
            }) as PeProgram,
        ],
    )
    .unwrap();
}

/// Identical seeds replay identical executions.
#[test]
fn deterministic_replay() {
    let run = |seed| {
        let out = run_world(
            det_cfg(3, seed).weak(0.7),
            (0..3)
                .map(|pe| {
                    Box::new(move |pc: &mut PeCtx| {
                        let b = pc.alloc_symmetric(8, ElemKind::Real3)?;
                        let s = pc.alloc_signals(3)?;
                        let to = (pe + 1) % 3;
                        pc.write(b, to, pe, &[[pe as f64; 3]])?;
                        pc.signal_store(s, to, pe, 1, StoreOrdering::Release)?;
                        pc.signal_wait(s, (pe + 2) % 3, 1)?;
                        pc.barrier_all()?;
                        Ok(())
                    }) as PeProgram
                })
                .collect(),
        )
        .unwrap();
        let log: Vec<String> = out
            .record
            .events
            .iter()
            .map(|e| format!("{} {} {:?}", e.pe, e.ctx, e.kind))
            .collect();
        log.join("\n")
    };
    assert_eq!(run(99), run(99));
    assert_ne!(run(99), run(100), "different seeds should interleave differently");
}

/// Sequential mode is a refinement of the weak adversary: with the
/// adversary delivering everything eagerly, final state matches.
#[test]
fn sequential_refines_weak() {
    let program = |mode: MemoryMode| {
        let out = run_world(
            WorldCfg {
                n_pes: 2,
                islands: Islands::Single,
                memory: mode,
                exec: ExecMode::Deterministic { seed: 4 },
                record_events: false,
            },
            (0..2)
                .map(|pe| {
                    Box::new(move |pc: &mut PeCtx| {
                        let b = pc.alloc_symmetric(4, ElemKind::Real3)?;
                        pc.write(b, (pe + 1) % 2, pe, &[[pe as f64 + 1.0; 3]])?;
                        pc.barrier_all()?;
                        Ok(())
                    }) as PeProgram
                })
                .collect(),
        )
        .unwrap();
        (out.buffer(BufId(0), 0).to_vec(), out.buffer(BufId(0), 1).to_vec())
    };
    assert_eq!(
        program(MemoryMode::Sequential),
        program(MemoryMode::WeakAdversary { aggressiveness: 0.0 })
    );
}

/// Concurrent contexts honor the same semantics contract.
#[test]
fn concurrent_mode_put_with_signal() {
    let cfg = WorldCfg {
        n_pes: 2,
        islands: Islands::Single,
        memory: MemoryMode::WeakAdversary { aggressiveness: 1.0 },
        exec: ExecMode::Concurrent,
        record_events: true,
    };
    run_world(
        cfg,
        vec![
            Box::new(|pc: &mut PeCtx| {
                let b = pc.alloc_symmetric(64, ElemKind::Real3)?;
                let s = pc.alloc_signals(1)?;
                let payload: Vec<Val> = (0..64).map(|i| [i as f64; 3]).collect();
                pc.put_with_signal(b, 1, 0, &payload, s, 0, 1)?;
                Ok(())
            }) as PeProgram,
            Box::new(|pc: &mut PeCtx| {
                let b = pc.alloc_symmetric(64, ElemKind::Real3)?;
                let s = pc.alloc_signals(1)?;
                pc.signal_wait(s, 0, 1)?;
                let v = pc.read(b, 1, 0, 64)?;
                for (i, x) in v.iter().enumerate() {
                    assert_eq!(*x, [i as f64; 3]);
                }
                Ok(())
            }) as PeProgram,
        ],
    )
    .unwrap();
}

#[test]
fn concurrent_mode_detects_deadlock() {
    let cfg = WorldCfg {
        n_pes: 2,
        islands: Islands::Single,
        memory: MemoryMode::Sequential,
        exec: ExecMode::Concurrent,
        record_events: false,
    };
    let err = run_world(
        cfg,
        (0..2)
            .map(|pe| {
                Box::new(move |pc: &mut PeCtx| {
                    let s = pc.alloc_signals(1)?;
                    pc.signal_wait(s, 0, (pe + 1) as u64)?;
                    Ok(())
                }) as PeProgram
            })
            .collect(),
    )
    .unwrap_err();
    assert!(matches!(err, PgasError::SimDeadlock { .. }));
}

#[test]
fn out_of_bounds_put_rejected() {
    let err = run_world(
        det_cfg(1, 0),
        vec![Box::new(|pc: &mut PeCtx| {
            let b = pc.alloc_symmetric(4, ElemKind::Real3)?;
            pc.put(b, 0, 3, &[[0.0; 3], [0.0; 3]])?;
            Ok(())
        }) as PeProgram],
    )
    .unwrap_err();
    assert!(matches!(err, PgasError::OutOfBounds(_)));
}

#[test]
fn spawned_blocks_interleave_and_join() {
    for seed in 0..10 {
        let out = run_world(
            det_cfg(2, seed),
            (0..2)
                .map(|_| {
                    Box::new(move |pc: &mut PeCtx| {
                        let b = pc.alloc_symmetric(16, ElemKind::Real3)?;
                        let me = pc.pe();
                        let mut tasks = Vec::new();
                        for t in 0..4usize {
                            tasks.push(pc.spawn(move |tc| {
                                tc.write(b, me, t * 4, &[[t as f64; 3]; 4])?;
                                Ok(())
                            })?);
                        }
                        for t in tasks {
                            pc.join(t)?;
                        }
                        let v = pc.read(b, me, 0, 16)?;
                        for (i, x) in v.iter().enumerate() {
                            assert_eq!(*x, [(i / 4) as f64; 3]);
                        }
                        Ok(())
                    }) as PeProgram
                })
                .collect(),
        )
        .unwrap();
        assert!(out.record.count(|e| matches!(e.kind, EventKind::Spawn { .. })) == 8);
    }
}

/// Event log export is line-delimited JSON, one event per line.
#[test]
fn record_exports_jsonl() {
    let out = run_world(
        det_cfg(1, 2),
        vec![Box::new(|pc: &mut PeCtx| {
            pc.note("marker", 1, 2)?;
            pc.compute(10)?;
            Ok(())
        }) as PeProgram],
    )
    .unwrap();
    let mut buf = Vec::new();
    out.record.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), out.record.events.len());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("seq").is_some() && v.get("pe").is_some());
    }
}
