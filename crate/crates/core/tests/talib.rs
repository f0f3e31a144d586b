use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tadf::depsys::{AccessRegion, TaskId};
use tadf::simdev::{DeviceOp, DeviceTransition, EventId, StreamId};
use tadf::taskrt::{Provenance, RunLog, RunReport, Runtime, RuntimeConfig, TaskCtx, TaskSpec, Transition};
use tadf::time::VTime;
use tadf::Error;

fn u(n: u64) -> VTime {
    VTime::units(n)
}

fn first(log: &RunLog, task: TaskId, tr: Transition) -> Option<VTime> {
    log.records
        .iter()
        .find(|r| r.task == task && r.transition == tr)
        .map(|r| r.time)
}

fn count(log: &RunLog, task: TaskId, tr: Transition) -> usize {
    log.records.iter().filter(|r| r.task == task && r.transition == tr).count()
}

fn completions(report: &RunReport) -> BTreeMap<EventId, VTime> {
    report
        .completion_log
        .iter()
        .filter(|r| r.transition == DeviceTransition::Complete)
        .map(|r| (r.event, r.time))
        .collect()
}

fn copy_on(ctx: &TaskCtx, stream: StreamId, cost: u64) -> tadf::Result<EventId> {
    let buf = ctx.arena().alloc(1)?;
    ctx.enqueue(stream, DeviceOp::copy_h2d(buf).with_cost(u(cost)))
}

fn grid_ceil(t: VTime, p: VTime) -> VTime {
    VTime(t.0.div_ceil(p.0) * p.0)
}

#[test]
fn three_binds_release_at_first_tick_after_last_completion() {
    let period = u(4);
    let ids = Arc::new(Mutex::new((TaskId(0), TaskId(0))));
    let ids2 = ids.clone();
    let report = Runtime::new(RuntimeConfig::new(2).poll_period(period))
        .unwrap()
        .run("root", move |ctx| async move {
            let t = ctx.spawn(TaskSpec::new("T").access(AccessRegion::write(0, 8)?), |c| async move {
                for cost in [2, 5, 9] {
                    let s = c.create_stream();
                    let ev = copy_on(&c, s, cost)?;
                    c.ta_synchronize_event_async(ev)?;
                }
                Ok(())
            })?;
            let s = ctx.spawn(TaskSpec::new("S").access(AccessRegion::read(0, 8)?), |c| async move {
                c.compute(u(1)).await
            })?;
            *ids2.lock() = (t, s);
            ctx.taskwait().await
        })
        .unwrap();
    let (t, s) = *ids.lock();
    let last = completions(&report).values().copied().max().unwrap();
    assert_eq!(last, u(9));
    assert_eq!(first(&report.log, s, Transition::Start), Some(grid_ceil(last, period)));
    assert_eq!(count(&report.log, t, Transition::Finish), 1);
    assert_eq!(first(&report.log, t, Transition::BodyEnd), Some(u(0)));
    let (inc, dec) = report.graph.get(t).unwrap().counter_totals();
    assert_eq!((inc, dec), (3, 3));
}

#[test]
fn body_returns_immediately_and_worker_moves_on() {
    let report = Runtime::new(RuntimeConfig::new(1).poll_period(u(1)))
        .unwrap()
        .run("root", |ctx| async move {
            ctx.spawn(TaskSpec::new("G").access(AccessRegion::write(0, 8)?), |c| async move {
                let s = c.create_stream();
                let ev = copy_on(&c, s, 9)?;
                c.ta_synchronize_event_async(ev)
            })?;
            ctx.spawn(TaskSpec::new("C").access(AccessRegion::read(0, 8)?), |c| async move {
                c.compute(u(1)).await
            })?;
            ctx.spawn(TaskSpec::new("other"), |c| async move { c.compute(u(3)).await })?;
            ctx.taskwait().await
        })
        .unwrap();
    // root 0, poller 1, G 2, C 3, other 4
    assert_eq!(first(&report.log, TaskId(2), Transition::BodyEnd), Some(u(0)));
    assert_eq!(first(&report.log, TaskId(4), Transition::Start), Some(u(0)));
    assert_eq!(first(&report.log, TaskId(3), Transition::Start), Some(u(9)));
    assert!(report.audit().is_clean());
}

#[test]
fn already_complete_event_still_goes_through_a_poll() {
    let period = u(10);
    let report = Runtime::new(RuntimeConfig::new(1).poll_period(period))
        .unwrap()
        .run("root", |ctx| async move {
            let s = ctx.create_stream();
            let ev = copy_on(&ctx, s, 1)?;
            ctx.wait_blocking(ev).await?;
            ctx.compute(u(2)).await?;
            ctx.spawn(TaskSpec::new("bind"), move |c| async move { c.ta_synchronize_event_async(ev) })?;
            ctx.taskwait().await
        })
        .unwrap();
    // child body ends at 3, released by the tick at 10
    let child = TaskId(2);
    assert_eq!(first(&report.log, child, Transition::BodyEnd), Some(u(3)));
    let fin = report.log.records.iter().find(|r| r.task == child && r.transition == Transition::Finish).unwrap();
    assert_eq!(fin.time, u(10));
    assert_eq!(fin.provenance, Provenance::Poll);
    assert_eq!(report.stats.events_polled, 1);
}

#[test]
fn ta_wait_lets_other_work_run() {
    for period in [1u64, 5, 4] {
        let p = u(period);
        let report = Runtime::new(RuntimeConfig::new(1).poll_period(p))
            .unwrap()
            .run("root", |ctx| async move {
                ctx.spawn(TaskSpec::new("A"), |c| async move {
                    let s = c.create_stream();
                    let ev = copy_on(&c, s, 10)?;
                    c.ta_wait_blocking(ev).await
                })?;
                ctx.spawn(TaskSpec::new("B"), |c| async move { c.compute(u(4)).await })?;
                ctx.taskwait().await
            })
            .unwrap();
        let (a, b) = (TaskId(2), TaskId(3));
        assert_eq!(first(&report.log, b, Transition::Start), Some(u(0)));
        assert_eq!(first(&report.log, a, Transition::Resume), Some(grid_ceil(u(10), p)));
        assert!(report.audit().is_clean());
    }
}

#[test]
fn many_waiters_resume_once_after_completion() {
    let report = Runtime::new(RuntimeConfig::new(4).poll_period(u(3)))
        .unwrap()
        .run("root", |ctx| async move {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..100 {
                let cost = rng.random_range(1..60);
                ctx.spawn(TaskSpec::new("w"), move |c| async move {
                    let s = c.ta_get_queue().await?;
                    let ev = copy_on(&c, s, cost)?;
                    c.ta_return_queue(s)?;
                    c.ta_wait_blocking(ev).await?;
                    assert!(c.query(ev)? == tadf::simdev::EventState::Complete);
                    Ok(())
                })?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    let resumes: Vec<_> = report
        .log
        .records
        .iter()
        .filter(|r| r.transition == Transition::Resume && r.provenance == Provenance::Poll)
        .collect();
    assert_eq!(resumes.len(), 100);
    let mut seen = std::collections::BTreeSet::new();
    for r in &resumes {
        assert!(seen.insert(r.task));
    }
    assert!(report.audit().is_clean());
}

#[test]
fn taskwait_covers_deferred_children() {
    let report = Runtime::new(RuntimeConfig::new(2).poll_period(u(1)))
        .unwrap()
        .run("root", |ctx| async move {
            ctx.spawn(TaskSpec::new("child"), |c| async move {
                let s = c.create_stream();
                for cost in [3, 4] {
                    let ev = copy_on(&c, s, cost)?;
                    c.ta_synchronize_event_async(ev)?;
                }
                Ok(())
            })?;
            ctx.taskwait().await?;
            ctx.compute(u(1)).await
        })
        .unwrap();
    let root = TaskId(0);
    // ops complete at 3 and 7 on one stream
    assert_eq!(
        report.log.records.iter().filter(|r| r.task == root && r.transition == Transition::Resume).map(|r| r.time).collect::<Vec<_>>(),
        vec![u(7)]
    );
    assert_eq!(report.makespan, u(8));
}

#[test]
fn get_queue_at_cap_waits_for_a_return_fifo() {
    let order = Arc::new(Mutex::new(Vec::new()));
    let o = order.clone();
    let report = Runtime::new(RuntimeConfig::new(4).queue_pool_cap(1))
        .unwrap()
        .run("root", move |ctx| async move {
            for i in 0..3u64 {
                let o = o.clone();
                ctx.spawn(TaskSpec::new("q"), move |c| async move {
                    let s = c.ta_get_queue().await?;
                    o.lock().push((i, c.now(), s));
                    c.compute(u(2)).await?;
                    c.ta_return_queue(s)
                })?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    let order = order.lock().clone();
    assert_eq!(
        order,
        vec![(0, u(0), StreamId(0)), (1, u(2), StreamId(0)), (2, u(4), StreamId(0))]
    );
    assert_eq!(report.stats.queue_checkouts, report.stats.queue_returns);
}

#[test]
fn leaked_queue_is_reported() {
    let mut cfg = RuntimeConfig::new(1);
    cfg.strict_queue_leaks = true;
    let err = Runtime::new(cfg)
        .unwrap()
        .run("root", |ctx| async move {
            ctx.spawn(TaskSpec::new("leak"), |c| async move {
                c.ta_get_queue().await?;
                Ok(())
            })?;
            ctx.taskwait().await
        })
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn bind_outside_running_task_is_contract_error() {
    let err = Runtime::new(RuntimeConfig::new(2))
        .unwrap()
        .run("root", |ctx| async move {
            let s = ctx.create_stream();
            let ev = copy_on(&ctx, s, 1)?;
            let parent = ctx.clone();
            ctx.spawn(TaskSpec::new("child"), move |c| async move {
                c.compute(u(1)).await?;
                parent.ta_synchronize_event_async(ev)
            })?;
            ctx.taskwait().await
        })
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

/// Runs N tasks with k async copies each over a chain of shared cells and
/// returns the report plus, per task, its events.
fn interleaving(seed: u64, period: u64) -> (RunReport, BTreeMap<TaskId, Vec<EventId>>) {
    let evs = Arc::new(Mutex::new(BTreeMap::new()));
    let e2 = evs.clone();
    let report = Runtime::new(RuntimeConfig::new(3).poll_period(u(period)))
        .unwrap()
        .run("root", move |ctx| async move {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let streams: Vec<_> = (0..4).map(|_| ctx.create_stream()).collect();
            for _ in 0..40 {
                let cell = rng.random_range(0..5u64);
                let k = rng.random_range(1..4);
                let costs: Vec<(usize, u64)> = (0..k).map(|_| (rng.random_range(0..4), rng.random_range(1..20))).collect();
                let streams = streams.clone();
                let e3 = e2.clone();
                let mode = if rng.random_bool(0.5) { AccessRegion::write(cell * 8, 8)? } else { AccessRegion::read(cell * 8, 8)? };
                ctx.spawn(TaskSpec::new("t").access(mode), move |c| async move {
                    let mut mine = Vec::new();
                    for (s, cost) in costs {
                        let ev = copy_on(&c, streams[s], cost)?;
                        c.ta_synchronize_event_async(ev)?;
                        mine.push(ev);
                    }
                    e3.lock().insert(c.id(), mine);
                    c.compute(u(1)).await
                })?;
            }
            ctx.taskwait().await
        })
        .unwrap();
    let evs = evs.lock().clone();
    (report, evs)
}

#[test]
fn successors_start_after_every_bound_event() {
    for seed in 0..5 {
        let (report, evs) = interleaving(seed, 2);
        let done = completions(&report);
        let finishes = report
            .graph
            .tasks()
            .filter(|t| evs.contains_key(&t.id))
            .map(|t| (t.id, count(&report.log, t.id, Transition::Finish)))
            .collect::<Vec<_>>();
        assert_eq!(finishes.len(), 40);
        assert!(finishes.iter().all(|&(_, n)| n == 1));
        for t in report.graph.tasks() {
            let Some(start) = first(&report.log, t.id, Transition::Start) else { continue };
            for p in &t.preds {
                if let Some(pe) = evs.get(p) {
                    let last = pe.iter().map(|e| done[e]).max().unwrap();
                    assert!(start >= last, "task {} started at {start} before {last}", t.id);
                }
            }
            let (inc, dec) = t.counter_totals();
            assert_eq!(inc, dec);
        }
        assert!(report.audit().is_clean());
    }
}

#[test]
fn poll_period_only_shifts_latency() {
    let (fast, _) = interleaving(9, 1);
    let (slow, _) = interleaving(9, 50);
    let edges = |r: &RunReport| r.graph.tasks().map(|t| (t.id, t.preds.clone())).collect::<Vec<_>>();
    assert_eq!(edges(&fast), edges(&slow));
    assert!(slow.makespan >= fast.makespan);
}
