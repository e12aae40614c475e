use super::*;
use crate::evaluation::Action;
use crate::index::{IndexConfig, PrefixBuckets};
use crate::numeric::rng::stream_rng;
use crate::seqmodel::model::tests::tiny_model;
use rand::Rng;

fn ev(user: UserId, item: ItemId, timestamp: u64) -> Event {
    Event {
        timestamp,
        user,
        item,
        action: Action::Click,
        session: 0,
    }
}

struct Fx {
    model: GenRecModel,
    items: ItemEmbeddings,
    sids: SidTable,
    index: PrefixIndex,
}

impl Fx {
    fn new(seed: u64) -> Self {
        let (model, items, sids) = tiny_model(1, 2, 4, 30, seed, false);
        let buckets = PrefixBuckets::new(&sids.entries(), 1).unwrap();
        let index = PrefixIndex::build(&buckets, &model.fuse_catalog(&items).unwrap(), &IndexConfig::default()).unwrap();
        Self { model, items, sids, index }
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            model: &self.model,
            items: &self.items,
            sids: &self.sids,
            index: &self.index,
        }
    }
}

fn config(window: usize) -> ServingConfig {
    ServingConfig {
        history_window: window,
        gen: GenConfig {
            beams: 3,
            per_beam: 4,
            top_n: 6,
            ..GenConfig::default()
        },
        ..ServingConfig::default()
    }
}

fn assert_same(a: &GenerationResult, b: &GenerationResult) {
    assert_eq!(a.item_ids(), b.item_ids());
    for (x, y) in a.items.iter().zip(&b.items) {
        assert!((x.prob - y.prob).abs() <= 1e-5 * x.prob.abs().max(1e-12).max(1.0));
        assert!((x.prob - y.prob).abs() <= 1e-12, "{} vs {}", x.prob, y.prob);
    }
}

#[test]
fn ingest_buckets() {
    let one = ingest([ev(1, 2, 30)]);
    assert_eq!(one.buckets.len(), 1);
    let two = ingest([ev(1, 2, 120), ev(1, 3, 179)]);
    assert_eq!(two.buckets.len(), 1);
    assert_eq!(two.buckets[&(1, 2)].iter().map(|e| e.item).collect::<Vec<_>>(), vec![2, 3]);
    let back = ingest([ev(1, 2, 500), ev(1, 3, 499), ev(2, 3, 10), ev(1, 4, 500)]);
    assert_eq!(back.rejected, 1);
    assert_eq!(back.buckets[&(1, 8)].len(), 2);
}

#[test]
fn ingest_matches_group_by_oracle() {
    let mut rng = stream_rng(3, "replay");
    let mut clock = vec![0u64; 50];
    let events: Vec<Event> = (0..10_000)
        .map(|_| {
            let u = rng.gen_range(0..50u32);
            clock[u as usize] += rng.gen_range(0..90);
            ev(u, rng.gen_range(0..100), clock[u as usize])
        })
        .collect();
    let got = ingest(events.iter().copied());
    assert_eq!(got.rejected, 0);
    let mut oracle: Vec<((UserId, u64), Vec<ItemId>)> = Vec::new();
    let mut keyed: Vec<(UserId, u64, usize, ItemId)> = events.iter().enumerate().map(|(i, e)| (e.user, e.timestamp / 60, i, e.item)).collect();
    keyed.sort_unstable();
    for (u, m, _, item) in keyed {
        match oracle.last_mut() {
            Some((k, v)) if *k == (u, m) => v.push(item),
            _ => oracle.push(((u, m), vec![item])),
        }
    }
    let mine: Vec<((UserId, u64), Vec<ItemId>)> = got.buckets.iter().map(|(k, v)| (*k, v.iter().map(|e| e.item).collect())).collect();
    assert_eq!(mine, oracle);
}

#[test]
fn incremental_matches_cold_recompute() {
    let fx = Fx::new(2);
    let engine = fx.engine();
    for stream in 0..8u64 {
        let window = [5usize, 20][stream as usize % 2];
        let cfg = config(window);
        let mut rng = stream_rng(stream, "stream");
        let initial: Vec<ItemId> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..30)).collect();
        let mut session = UserSession::new(&engine, 7, [1, 1, 0], &initial, &cfg).unwrap();
        let mut history = initial.clone();
        let mut t = 0;
        for _ in 0..6 {
            let n = rng.gen_range(1..4);
            let evs: Vec<Event> = (0..n)
                .map(|_| {
                    t += rng.gen_range(1..40);
                    ev(7, rng.gen_range(0..30), t)
                })
                .collect();
            history.extend(evs.iter().map(|e| e.item));
            let inc = session.incremental_infer(&engine, &evs, &cfg).unwrap();
            let cold = cold_infer(&engine, [1, 1, 0], &history, &cfg).unwrap();
            assert_same(&inc, &cold);
            assert!(session.is_consistent());
            assert!(session.history.len() <= window);
        }
        if window == 5 {
            assert!(session.rebuilds > 0);
        }
    }
}

#[test]
fn no_new_events_repeats_previous() {
    let fx = Fx::new(4);
    let engine = fx.engine();
    let cfg = config(8);
    let mut s = UserSession::new(&engine, 1, [0, 0, 0], &[1, 2], &cfg).unwrap();
    let a = s.incremental_infer(&engine, &[ev(1, 5, 10)], &cfg).unwrap();
    let b = s.incremental_infer(&engine, &[], &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inconsistent_session_is_rebuilt() {
    let fx = Fx::new(5);
    let engine = fx.engine();
    let cfg = config(8);
    let mut s = UserSession::new(&engine, 1, [0, 1, 0], &[3, 4], &cfg).unwrap();
    s.rows.pop();
    let r = s.incremental_infer(&engine, &[ev(1, 9, 100)], &cfg).unwrap();
    assert_eq!(s.rebuilds, 1);
    assert_same(&r, &cold_infer(&engine, [0, 1, 0], &[3, 4, 9], &cfg).unwrap());
}

fn replay(n_users: u32, seed: u64) -> (HashMap<UserId, UserStart>, Vec<Event>) {
    let mut rng = stream_rng(seed, "sim");
    let starts = (0..n_users)
        .map(|u| {
            (
                u,
                UserStart {
                    profile: [rng.gen_range(0..3), rng.gen_range(0..2), rng.gen_range(0..2)],
                    history: (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..30)).collect(),
                },
            )
        })
        .collect();
    let mut t = 0;
    let events = (0..300)
        .map(|_| {
            t += rng.gen_range(0..20);
            ev(rng.gen_range(0..n_users), rng.gen_range(0..30), t)
        })
        .collect();
    (starts, events)
}

#[test]
fn simulation_is_deterministic_across_shards() {
    let fx = Fx::new(6);
    let engine = fx.engine();
    let (starts, events) = replay(12, 1);
    let mut exports = Vec::new();
    for shards in [1, 3, 1] {
        let u2i = U2iIndex::new(6);
        let cfg = SimConfig {
            shards,
            serving: config(8),
            ..SimConfig::default()
        };
        let rep = simulate(&engine, &starts, &events, &cfg, &u2i).unwrap();
        assert_eq!(rep.inferences, rep.buckets);
        exports.push(u2i.export());
    }
    assert!(!exports[0].is_empty());
    assert_eq!(exports[0], exports[1]);
    assert_eq!(exports[0], exports[2]);
    // Final snapshot equals cold inference on the full history.
    let u2i = U2iIndex::new(6);
    simulate(&engine, &starts, &events, &SimConfig { serving: config(8), ..SimConfig::default() }, &u2i).unwrap();
    for u in 0..12u32 {
        let mut hist = starts[&u].history.clone();
        hist.extend(events.iter().filter(|e| e.user == u).map(|e| e.item));
        let served = serve(&u2i, u);
        if hist.len() == starts[&u].history.len() {
            assert!(served.is_empty());
            continue;
        }
        let cold = cold_infer(&engine, starts[&u].profile, &hist, &config(8)).unwrap();
        assert_eq!(served.iter().map(|x| x.0).collect::<Vec<_>>(), cold.item_ids());
    }
    assert!(serve(&u2i, 999).is_empty());
}

#[test]
fn minutes_limit_the_replay() {
    let fx = Fx::new(6);
    let engine = fx.engine();
    let (starts, events) = replay(5, 2);
    let u2i = U2iIndex::new(6);
    let cfg = SimConfig {
        minutes: Some(3),
        serving: config(8),
        ..SimConfig::default()
    };
    let rep = simulate(&engine, &starts, &events, &cfg, &u2i).unwrap();
    let first = events.iter().map(|e| e.timestamp / 60).min().unwrap();
    let expected: std::collections::BTreeSet<(UserId, u64)> = events.iter().filter(|e| e.timestamp / 60 < first + 3).map(|e| (e.user, e.timestamp / 60)).collect();
    assert_eq!(rep.inferences, expected.len());
}

#[test]
fn readers_see_complete_snapshots_during_inference() {
    let fx = Fx::new(8);
    let engine = fx.engine();
    let (starts, events) = replay(6, 3);
    let u2i = U2iIndex::new(6);
    let done = AtomicBool::new(false);
    std::thread::scope(|s| {
        let reader = s.spawn(|| {
            let mut last_ts: HashMap<UserId, u64> = HashMap::new();
            let mut seen = 0;
            while !done.load(Ordering::Acquire) {
                for u in 0..6u32 {
                    if let Some(e) = u2i.get(u) {
                        // Complete entries are sorted and never older than what was seen.
                        assert!(e.items.windows(2).all(|w| w[0].1 >= w[1].1));
                        assert!(!e.items.is_empty());
                        let prev = last_ts.insert(u, e.timestamp).unwrap_or(0);
                        assert!(e.timestamp >= prev);
                        seen += 1;
                    }
                }
                std::thread::yield_now();
            }
            seen
        });
        let cfg = SimConfig {
            shards: 2,
            serving: config(8),
            ..SimConfig::default()
        };
        let r = simulate(&engine, &starts, &events, &cfg, &u2i);
        done.store(true, Ordering::Release);
        r.unwrap();
        assert!(reader.join().unwrap() > 0);
    });
}

#[test]
fn window_longer_than_model_context_is_rejected() {
    let fx = Fx::new(6);
    let err = UserSession::new(&fx.engine(), 0, [0, 0, 0], &[], &config(50)).unwrap_err();
    assert!(matches!(err, Error::SequenceTooLong { .. }), "{err:?}");
}
