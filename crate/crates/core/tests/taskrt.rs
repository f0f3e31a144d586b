use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tadf::depsys::{AccessRegion, TaskId};
use tadf::simdev::DeviceOp;
use tadf::taskrt::{
    ClockMode, Provenance, RunLog, RunReport, Runtime, RuntimeConfig, SubstrateMode, TaskSpec, Transition,
};
use tadf::time::VTime;
use tadf::Error;

fn u(n: u64) -> VTime {
    VTime::units(n)
}

fn starts(log: &RunLog) -> BTreeMap<TaskId, VTime> {
    let mut m = BTreeMap::new();
    for r in &log.records {
        if r.transition == Transition::Start {
            m.entry(r.task).or_insert(r.time);
        }
    }
    m
}

fn times_of(log: &RunLog, task: TaskId, tr: Transition) -> Vec<VTime> {
    log.records
        .iter()
        .filter(|r| r.task == task && r.transition == tr)
        .map(|r| r.time)
        .collect()
}

fn max_concurrent(log: &RunLog) -> usize {
    let mut running = 0usize;
    let mut peak = 0;
    for r in &log.records {
        match r.transition {
            Transition::Start => running += 1,
            t if t.leaves_worker() => running -= 1,
            _ => {}
        }
        peak = peak.max(running);
    }
    peak
}

/// Greedy list scheduling of FIFO-ordered independent jobs.
fn list_schedule(workers: usize, costs: &[u64]) -> u64 {
    let mut free = vec![0u64; workers];
    for &c in costs {
        let w = (0..workers).min_by_key(|&i| (free[i], i)).unwrap();
        free[w] += c;
    }
    free.into_iter().max().unwrap()
}

fn run_independent(workers: usize, costs: Vec<u64>) -> RunReport {
    Runtime::new(RuntimeConfig::new(workers))
        .unwrap()
        .run("root", move |ctx| async move {
            for c in costs {
                ctx.spawn(TaskSpec::new("t"), move |c2| async move { c2.compute(u(c)).await })?;
            }
            ctx.taskwait().await
        })
        .unwrap()
}

#[test]
fn zero_workers_rejected() {
    assert!(matches!(Runtime::new(RuntimeConfig::new(0)), Err(Error::InvalidArgument(_))));
}

#[test]
fn equal_tasks_match_list_scheduling() {
    let r = run_independent(4, vec![1; 8]);
    assert_eq!(r.makespan, u(list_schedule(4, &[1; 8])));
    assert_eq!(r.makespan, u(2));
}

#[test]
fn random_costs_match_list_scheduling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let w = rng.random_range(1..6);
        let costs: Vec<u64> = (0..rng.random_range(1..30)).map(|_| rng.random_range(1..9)).collect();
        let expect = list_schedule(w, &costs);
        let r = run_independent(w, costs);
        assert_eq!(r.makespan, u(expect));
        assert!(r.audit().is_clean());
    }
}

#[test]
fn single_worker_runs_a_topological_order() {
    let order = Arc::new(Mutex::new(Vec::new()));
    let o = order.clone();
    let report = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", move |ctx| async move {
            // chain through cell 0, a second chain through cell 8
            for i in 0..6u64 {
                let cell = if i % 2 == 0 { 0 } else { 8 };
                let o = o.clone();
                ctx.spawn(
                    TaskSpec::new(format!("t{i}")).access(AccessRegion::read_write(cell, 8)?),
                    move |c| async move {
                        o.lock().push(i);
                        c.compute(u(1)).await
                    },
                )?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    let order = order.lock().clone();
    let pos = |x: u64| order.iter().position(|&y| y == x).unwrap();
    for i in 2..6 {
        assert!(pos(i - 2) < pos(i));
    }
    assert_eq!(max_concurrent(&report.log), 1);
}

#[test]
fn never_more_running_than_workers() {
    let r = run_independent(112, vec![3; 256]);
    assert_eq!(max_concurrent(&r.log), 112);
    assert_eq!(r.makespan, u(list_schedule(112, &[3; 256])));
    assert!(r.audit().is_clean());
}

#[test]
fn interleaved_instances_both_complete() {
    let rt = Runtime::new(RuntimeConfig::new(3)).unwrap();
    let a = rt.add_instance("a");
    let b = rt.add_instance("b");
    let report = rt
        .run("root", move |ctx| async move {
            for i in 0..20u64 {
                let inst = if i % 2 == 0 { a } else { b };
                ctx.spawn(TaskSpec::new("x").instance(inst), move |c| async move {
                    c.compute(u(1 + i % 3)).await
                })?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    assert_eq!(report.instances[1].submitted, 10);
    assert_eq!(report.instances[1].completed, 10);
    assert_eq!(report.instances[2].completed, 10);
}

#[test]
fn unknown_instance_rejected() {
    let err = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", |ctx| async move {
            ctx.spawn(TaskSpec::new("x").instance(tadf::taskrt::InstanceId(5)), |_| async { Ok(()) })?;
            Ok(())
        })
        .unwrap_err();
    assert!(matches!(err, Error::Unknown { kind: "runtime instance", .. }));
}

#[test]
fn suspend_then_resume_from_other_task() {
    let report = Runtime::new(RuntimeConfig::new(2))
        .unwrap()
        .run("root", |ctx| async move {
            let tok = ctx.prepare_suspend()?;
            ctx.spawn(TaskSpec::new("waker"), move |c| async move {
                c.compute(u(5)).await?;
                c.resume(tok)
            })?;
            ctx.suspend(tok).await?;
            ctx.compute(u(1)).await?;
            ctx.taskwait().await
        })
        .unwrap();
    let root = TaskId(0);
    assert_eq!(times_of(&report.log, root, Transition::Suspend), vec![u(0)]);
    assert_eq!(times_of(&report.log, root, Transition::Resume), vec![u(5)]);
    assert_eq!(times_of(&report.log, root, Transition::Start).len(), 2);
    assert_eq!(report.makespan, u(6));
}

#[test]
fn resume_before_suspend_is_latched() {
    let report = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", |ctx| async move {
            let tok = ctx.prepare_suspend()?;
            ctx.resume(tok)?;
            ctx.suspend(tok).await?;
            ctx.compute(u(1)).await
        })
        .unwrap();
    assert_eq!(report.makespan, u(1));
    assert!(report.audit().is_clean());
}

#[test]
fn double_resume_is_contract_error() {
    let err = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", |ctx| async move {
            let tok = ctx.prepare_suspend()?;
            ctx.resume(tok)?;
            ctx.resume(tok)
        })
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn suspend_outside_running_task_is_contract_error() {
    let err = Runtime::new(RuntimeConfig::new(2))
        .unwrap()
        .run("root", |ctx| async move {
            let parent = ctx.clone();
            ctx.spawn(TaskSpec::new("child"), move |c| async move {
                c.compute(u(1)).await?;
                // the parent sits in taskwait, it is not running
                parent.prepare_suspend().map(|_| ())
            })?;
            ctx.taskwait().await
        })
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn yield_with_empty_queue_continues_immediately() {
    let report = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", |ctx| async move {
            ctx.compute(u(2)).await?;
            ctx.yield_now().await?;
            ctx.compute(u(2)).await
        })
        .unwrap();
    let root = TaskId(0);
    assert_eq!(times_of(&report.log, root, Transition::Start), vec![u(0), u(2)]);
    assert_eq!(report.makespan, u(4));
}

#[test]
fn yield_ping_pong_alternates() {
    let trace = Arc::new(Mutex::new(Vec::new()));
    let t2 = trace.clone();
    Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", move |ctx| async move {
            for name in ["a", "b"] {
                let t = t2.clone();
                ctx.spawn(TaskSpec::new(name), move |c| async move {
                    for _ in 0..5 {
                        t.lock().push(name);
                        c.compute(u(1)).await?;
                        c.yield_now().await?;
                    }
                    Ok(())
                })?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    let trace = trace.lock().clone();
    assert_eq!(trace.len(), 10);
    for w in trace.windows(2) {
        assert_ne!(w[0], w[1]);
    }
}

#[test]
fn blocking_wait_holds_the_only_worker() {
    let report = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", |ctx| async move {
            ctx.spawn(TaskSpec::new("A"), |c| async move {
                let s = c.create_stream();
                let buf = c.arena().alloc(1)?;
                let ev = c.enqueue(s, DeviceOp::copy_h2d(buf).with_cost(u(10)))?;
                c.wait_blocking(ev).await
            })?;
            ctx.spawn(TaskSpec::new("B"), |c| async move { c.compute(u(4)).await })?;
            ctx.taskwait().await
        })
        .unwrap();
    let s = starts(&report.log);
    // root 0, poller 1, A 2, B 3
    assert_eq!(s[&TaskId(3)], u(10));
    assert_eq!(report.makespan, u(14));
    assert!(report.audit().is_clean());
}

#[test]
fn stream_synchronize_returns_after_all_ops() {
    let report = Runtime::new(RuntimeConfig::new(1))
        .unwrap()
        .run("root", |ctx| async move {
            let s = ctx.create_stream();
            let buf = ctx.arena().alloc(1)?;
            for c in [2, 3, 4] {
                ctx.enqueue(s, DeviceOp::copy_h2d(buf).with_cost(u(c)))?;
            }
            ctx.stream_synchronize(s).await
        })
        .unwrap();
    assert_eq!(times_of(&report.log, TaskId(0), Transition::Unblock), vec![u(9)]);
}

#[test]
fn virtual_runs_are_reproducible() {
    let go = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let costs: Vec<u64> = (0..40).map(|_| rng.random_range(1..5)).collect();
        run_independent(3, costs).log.to_text()
    };
    assert_eq!(go(), go());
}

fn pools_run(mode: SubstrateMode, workers: usize, pools: usize, split_tasks: bool) -> RunReport {
    let rt = Runtime::new(RuntimeConfig::new(workers).mode(mode)).unwrap();
    let instances: Vec<_> = (0..pools).map(|i| rt.add_instance(&format!("rt{i}"))).collect();
    rt.run("root", move |ctx| async move {
        for inst in instances {
            ctx.spawn(TaskSpec::new("pool").instance(inst), move |c| async move {
                if split_tasks {
                    for _ in 0..workers {
                        c.spawn(TaskSpec::new("item").instance(inst), |cc| async move { cc.compute(u(1)).await })?;
                    }
                    c.taskwait().await
                } else {
                    c.legacy_run(vec![u(1); workers]).await
                }
            })?;
        }
        ctx.taskwait().await
    })
    .unwrap()
}

#[test]
fn one_idle_pool_behaves_like_unified() {
    let legacy = pools_run(SubstrateMode::Uncoordinated, 4, 1, false);
    let unified = pools_run(SubstrateMode::Unified, 4, 1, true);
    assert_eq!(legacy.makespan, u(1));
    assert_eq!(unified.makespan, u(1));
}

#[test]
fn oversubscribed_pools_pay_the_penalty() {
    let (w, k) = (4usize, 4usize);
    let legacy = pools_run(SubstrateMode::Uncoordinated, w, k, false);
    let model = RuntimeConfig::new(w).contention;
    let items = (w * k) as f64;
    let bound = (k - 1) as f64 * model.switch_penalty.as_units() * items;
    assert!(legacy.makespan.as_units() >= bound, "{} < {bound}", legacy.makespan);
    let closed = model.uniform_pools_makespan(k, w, 1, u(1));
    assert!((legacy.makespan.as_units() - closed).abs() < 1e-5);
    let unified = pools_run(SubstrateMode::Unified, w, k, true);
    assert_eq!(unified.makespan, u(4));
    assert!(legacy.stats.legacy_delay > VTime::ZERO);
}

#[test]
fn real_mode_runs_dependent_tasks() {
    let cfg = RuntimeConfig::new(3).clock(ClockMode::Real);
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let report = Runtime::new(cfg)
        .unwrap()
        .run("root", move |ctx| async move {
            for i in 0..30u64 {
                let h = h.clone();
                ctx.spawn(
                    TaskSpec::new("t").access(AccessRegion::read_write(8 * (i % 3), 8)?),
                    move |c| async move {
                        c.compute(u(20)).await?;
                        h.fetch_add(1, Ordering::SeqCst);
                        Ok(())
                    },
                )?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 30);
    assert!(report.audit().is_clean());
}

#[test]
fn real_mode_suspend_resume_stress() {
    // 1000 pairs; half the resumes race ahead of the suspend
    let cfg = RuntimeConfig::new(4).clock(ClockMode::Real);
    let resumed = Arc::new(AtomicUsize::new(0));
    let r2 = resumed.clone();
    let report = Runtime::new(cfg)
        .unwrap()
        .run("root", move |ctx| async move {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for i in 0..1000u64 {
                let early = rng.random_bool(0.5);
                let spin = rng.random_range(0..4);
                let r = r2.clone();
                ctx.spawn(TaskSpec::new("s"), move |c| async move {
                    let tok = c.prepare_suspend()?;
                    let waker = c.clone();
                    let handle = std::thread::spawn(move || {
                        if !early {
                            std::thread::sleep(std::time::Duration::from_micros(spin * 50));
                        }
                        waker.resume(tok)
                    });
                    if early {
                        handle.join().unwrap()?;
                        c.suspend(tok).await?;
                    } else {
                        c.suspend(tok).await?;
                        handle.join().unwrap()?;
                    }
                    r.fetch_add(1, Ordering::SeqCst);
                    let _ = i;
                    Ok(())
                })?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    assert_eq!(resumed.load(Ordering::SeqCst), 1000);
    let resumes = report
        .log
        .records
        .iter()
        .filter(|r| r.transition == Transition::Resume && r.provenance == Provenance::External)
        .count();
    assert_eq!(resumes, 1000);
    assert!(report.audit().is_clean(), "{:?}", report.audit().violations);
}
