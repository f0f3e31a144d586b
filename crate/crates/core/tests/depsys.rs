use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tadf::depsys::{expand_multidep, AccessMode, AccessRegion, DepGraph, IterRange, TaskId};

type Program = Vec<Vec<AccessRegion>>;

fn mode_strategy() -> impl Strategy<Value = AccessMode> {
    prop_oneof![Just(AccessMode::Read), Just(AccessMode::Write), Just(AccessMode::ReadWrite)]
}

/// Up to `max_tasks` tasks, each with 0..=3 regions inside `[0, span)`.
fn program(max_tasks: usize, span: u64) -> impl Strategy<Value = Program> {
    let region = (0..span, 1..=4u64, mode_strategy())
        .prop_map(move |(b, l, m)| AccessRegion::new(b, l.min(span - b), m).unwrap());
    prop::collection::vec(prop::collection::vec(region, 0..=3), 1..=max_tasks)
}

fn register_all(p: &Program) -> (DepGraph, Vec<BTreeSet<TaskId>>) {
    let mut g = DepGraph::new();
    let preds = p
        .iter()
        .enumerate()
        .map(|(i, acc)| g.register_task(TaskId(i as u64), acc).unwrap())
        .collect();
    (g, preds)
}

fn conflict(a: &AccessRegion, b: &AccessRegion) -> bool {
    a.overlaps(b) && (a.mode().writes() || b.mode().writes())
}

/// Replays the program byte by byte: a task waits on the last writer of
/// every byte it touches, and a writer also waits on every reader since.
fn replay_oracle(p: &Program, span: u64) -> Vec<BTreeSet<TaskId>> {
    let mut last_writer: Vec<Option<u64>> = vec![None; span as usize];
    let mut readers: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); span as usize];
    let mut out = Vec::new();
    for (i, acc) in p.iter().enumerate() {
        let mut preds = BTreeSet::new();
        for a in acc {
            for byte in a.base()..a.end() {
                preds.extend(last_writer[byte as usize]);
                if a.mode().writes() {
                    preds.extend(readers[byte as usize].iter().copied());
                }
            }
        }
        for a in acc.iter().filter(|a| !a.mode().writes()) {
            for byte in a.base()..a.end() {
                readers[byte as usize].insert(i as u64);
            }
        }
        for a in acc.iter().filter(|a| a.mode().writes()) {
            for byte in a.base()..a.end() {
                last_writer[byte as usize] = Some(i as u64);
                readers[byte as usize].clear();
            }
        }
        preds.remove(&(i as u64));
        out.push(preds.into_iter().map(TaskId).collect());
    }
    out
}

/// Memory simulator: every task records what it reads and writes its own
/// id into what it writes.
fn simulate(p: &Program, order: &[usize], span: u64) -> (Vec<Option<usize>>, Vec<Vec<Option<usize>>>) {
    let mut mem = vec![None; span as usize];
    let mut seen = vec![Vec::new(); p.len()];
    for &t in order {
        for a in &p[t] {
            if a.mode().reads() {
                seen[t].extend_from_slice(&mem[a.base() as usize..a.end() as usize]);
            }
        }
        for a in p[t].iter().filter(|a| a.mode().writes()) {
            for byte in a.base()..a.end() {
                mem[byte as usize] = Some(t);
            }
        }
    }
    (mem, seen)
}

fn linear_extensions(preds: &[BTreeSet<TaskId>], done: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if done.len() == preds.len() {
        out.push(done.clone());
        return;
    }
    for t in 0..preds.len() {
        if !done.contains(&t) && preds[t].iter().all(|p| done.contains(&(p.0 as usize))) {
            done.push(t);
            linear_extensions(preds, done, out);
            done.pop();
        }
    }
}

#[test]
fn code4_pattern_edges() {
    let mut g = DepGraph::new();
    let x = AccessRegion::write(0, 8).unwrap();
    let xr = AccessRegion::read(0, 8).unwrap();
    let y = AccessRegion::write(8, 8).unwrap();
    let yr = AccessRegion::read(8, 8).unwrap();
    assert!(g.register_task(TaskId(0), &[x]).unwrap().is_empty());
    assert_eq!(g.register_task(TaskId(1), &[xr, y]).unwrap(), BTreeSet::from([TaskId(0)]));
    assert_eq!(g.register_task(TaskId(2), &[xr]).unwrap(), BTreeSet::from([TaskId(0)]));
    assert_eq!(g.register_task(TaskId(3), &[yr]).unwrap(), BTreeSet::from([TaskId(1)]));
}

#[test]
fn multidep_examples() {
    let (bn, tn, vp, t_gran) = (4u64, 16u64, 8u64, 4u64);
    let regions = expand_multidep(
        &[(IterRange::new(0, bn, 1), tn * vp), (IterRange::new(0, tn, t_gran), vp)],
        0,
        1,
        AccessMode::Read,
    )
    .unwrap();
    assert_eq!(regions.len() as u64, bn * (tn / t_gran));

    let regions = expand_multidep(&[(IterRange::new(0, 2, 1), 10), (IterRange::new(0, 3, 1), 1)], 0, 1, AccessMode::Read).unwrap();
    let bases: BTreeSet<u64> = regions.iter().map(|r| r.base()).collect();
    let mut want = BTreeSet::new();
    for i in 0..2 {
        for j in 0..3 {
            want.insert(10 * i + j);
        }
    }
    assert_eq!(bases, want);
}

#[test]
fn fifty_tasks_over_eight_cells_match_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let modes = [AccessMode::Read, AccessMode::Write, AccessMode::ReadWrite];
    for _ in 0..20 {
        let p: Program = (0..50)
            .map(|_| {
                let cell = *[0u64, 1, 2, 3, 4, 5, 6, 7].choose(&mut rng).unwrap();
                vec![AccessRegion::new(cell * 8, 8, *modes.choose(&mut rng).unwrap()).unwrap()]
            })
            .collect();
        let (_, got) = register_all(&p);
        assert_eq!(got, replay_oracle(&p, 64));
    }
}

proptest! {
    #[test]
    fn predecessors_match_replay(p in program(24, 32)) {
        let (_, got) = register_all(&p);
        prop_assert_eq!(got, replay_oracle(&p, 32));
    }

    #[test]
    fn every_edge_has_a_conflict(p in program(24, 32)) {
        let (_, preds) = register_all(&p);
        for (t, ps) in preds.iter().enumerate() {
            for q in ps {
                let q = q.0 as usize;
                prop_assert!(q < t);
                let found = p[t].iter().any(|a| p[q].iter().any(|b| conflict(a, b)));
                prop_assert!(found, "edge {} -> {} without conflict", q, t);
            }
        }
    }

    #[test]
    fn every_dag_order_matches_creation_order_small(p in program(7, 12)) {
        let (_, preds) = register_all(&p);
        let want = simulate(&p, &(0..p.len()).collect::<Vec<_>>(), 12);
        let mut orders = Vec::new();
        linear_extensions(&preds, &mut Vec::new(), &mut orders);
        for order in orders {
            prop_assert_eq!(&simulate(&p, &order, 12), &want, "order {:?}", order);
        }
    }

    #[test]
    fn random_dag_orders_match_creation_order(p in program(40, 24), seed in any::<u64>()) {
        let (_, preds) = register_all(&p);
        let want = simulate(&p, &(0..p.len()).collect::<Vec<_>>(), 24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..8 {
            let mut done: Vec<usize> = Vec::new();
            while done.len() < p.len() {
                let ready: Vec<usize> = (0..p.len())
                    .filter(|t| !done.contains(t) && preds[*t].iter().all(|q| done.contains(&(q.0 as usize))))
                    .collect();
                done.push(*ready.choose(&mut rng).unwrap());
            }
            prop_assert_eq!(&simulate(&p, &done, 24), &want);
        }
    }
}

#[test]
fn programs_of_eight_tasks_exhaustively() {
    // All orders of a fixed 8-task mix of readers and writers on two cells.
    let r = |b| AccessRegion::read(b, 1).unwrap();
    let w = |b| AccessRegion::write(b, 1).unwrap();
    let rw = |b| AccessRegion::read_write(b, 1).unwrap();
    let p: Program = vec![vec![w(0)], vec![r(0)], vec![r(0), w(1)], vec![r(1)], vec![rw(0)], vec![r(1), r(0)], vec![w(1)], vec![r(0), r(1)]];
    let (_, preds) = register_all(&p);
    let want = simulate(&p, &(0..8).collect::<Vec<_>>(), 2);
    let mut orders = Vec::new();
    linear_extensions(&preds, &mut Vec::new(), &mut orders);
    assert!(orders.len() > 1);
    for order in orders {
        assert_eq!(simulate(&p, &order, 2), want);
    }
}
