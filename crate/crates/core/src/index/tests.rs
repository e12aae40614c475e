use super::*;
use crate::numeric::nn::random_matrix;
use crate::numeric::rng::stream_rng;
use proptest::prelude::*;
use rand::Rng;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

fn random_sids(n: usize, levels: usize, k: u16, seed: u64) -> Vec<(ItemId, SemanticId)> {
    let mut rng = stream_rng(seed, "test/sids");
    (0..n as ItemId)
        .map(|i| (i, SemanticId((0..levels).map(|_| rng.gen_range(0..k)).collect())))
        .collect()
}

/// Independent full scan: explicit cosine per item, sorted by (-cos, id).
fn brute_force(ids: &[ItemId], fused: &Array2<f64>, h: &[f64], m: usize) -> Vec<(ItemId, f64)> {
    let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(ItemId, f64)> = ids
        .iter()
        .map(|&id| {
            let v = fused.row(id as usize);
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(h).map(|(a, b)| a * b).sum();
            (id, dot / (vn * hn))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(m);
    all
}

#[test]
fn single_item_and_degenerate_prefix() {
    let sids = vec![(0, SemanticId(vec![3, 1]))];
    let fused = Array2::from_elem((1, 4), 1.0);
    let idx = PrefixIndex::build(&PrefixBuckets::new(&sids, 1).unwrap(), &fused, &IndexConfig::default()).unwrap();
    assert_eq!(idx.buckets().len(), 1);
    for mode in [AnnMode::Exact, AnnMode::Approx] {
        let r = idx.ann_query(&[3], &[1.0, 0.0, 0.0, 0.0], 5, mode).unwrap();
        assert_eq!(r.hits().len(), 1);
        assert_eq!(r.hits()[0].0, 0);
    }
    assert!(PrefixBuckets::new(&sids, 0).is_err());
    assert_eq!(idx.ann_query(&[4], &[1.0, 0.0, 0.0, 0.0], 5, AnnMode::Exact).unwrap(), AnnResult::EmptyBucket);
    assert!(idx.ann_query(&[3], &[1.0, 0.0, 0.0, 0.0], 0, AnnMode::Exact).is_err());
}

#[test]
fn missing_embedding_names_item() {
    let sids = random_sids(5, 2, 2, 1);
    let fused = Array2::from_elem((4, 3), 1.0);
    let err = PrefixIndex::build(&PrefixBuckets::new(&sids, 1).unwrap(), &fused, &IndexConfig::default()).unwrap_err();
    assert!(matches!(err, Error::MissingEmbedding(4)));
}

#[test]
fn pigeonhole_partition() {
    let sids = random_sids(10_000, 4, 256, 2);
    let fused = random_matrix(10_000, 8, 1.0, &mut stream_rng(3, "test/fused"));
    let b = PrefixBuckets::new(&sids, 1).unwrap();
    let idx = PrefixIndex::build(&b, &fused, &IndexConfig::default()).unwrap();
    assert!(idx.buckets().len() <= 256);
    assert_eq!(idx.n_items(), 10_000);
    let mut seen = vec![false; 10_000];
    for bucket in idx.buckets() {
        assert!(bucket.ids.windows(2).all(|w| w[0] < w[1]));
        for (r, &id) in bucket.ids.iter().enumerate() {
            assert!(!seen[id as usize]);
            seen[id as usize] = true;
            let n = bucket.normalized.row(r).dot(&bucket.normalized.row(r)).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn exact_matches_brute_force() {
    let mut rng = stream_rng(4, "test/queries");
    let sids = random_sids(3000, 2, 3, 5);
    let fused = random_matrix(3000, 16, 1.0, &mut rng);
    let b = PrefixBuckets::new(&sids, 1).unwrap();
    let idx = PrefixIndex::build(&b, &fused, &IndexConfig::default()).unwrap();
    for _ in 0..30 {
        let prefix = [rng.gen_range(0..3u16)];
        let h: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = brute_force(b.bucket(&prefix), &fused, &h, 50);
        let got = idx.ann_query(&prefix, &h, 50, AnnMode::Exact).unwrap();
        assert_eq!(got.hits().len(), 50);
        for (g, w) in got.hits().iter().zip(&want) {
            assert_eq!(g.0, w.0);
            assert!((g.1 - w.1).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_break_by_item_id() {
    let sids: Vec<_> = (0..6).map(|i| (i, SemanticId(vec![0]))).collect();
    let mut fused = Array2::from_elem((6, 2), 0.0);
    for i in 0..6 {
        fused[[i, 0]] = if i % 2 == 0 { 1.0 } else { 2.0 };
        fused[[i, 1]] = if i < 3 { 1.0 } else { 2.0 };
    }
    // Items 0 and 4 / 1 and 3 share directions (within rounding).
    let idx = PrefixIndex::build(&PrefixBuckets::new(&sids, 1).unwrap(), &fused, &IndexConfig::default()).unwrap();
    let all = idx.ann_query(&[0], &[1.0, 1.0], 6, AnnMode::Exact).unwrap();
    let ids: Vec<ItemId> = all.hits().iter().map(|h| h.0).collect();
    assert_eq!(ids.len(), 6);
    assert!(all.hits().windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
}

#[test]
fn approx_recall_on_clustered_bucket() {
    let mut rng = stream_rng(6, "test/ann");
    let centers = random_matrix(40, 32, 1.0, &mut rng);
    let noise = random_matrix(4000, 32, 0.4, &mut rng);
    let fused = Array2::from_shape_fn((4000, 32), |(i, j)| centers[[i % 40, j]] + noise[[i, j]]);
    let sids: Vec<_> = (0..4000).map(|i| (i, SemanticId(vec![0]))).collect();
    let idx = PrefixIndex::build(&PrefixBuckets::new(&sids, 1).unwrap(), &fused, &IndexConfig::default()).unwrap();
    let mut hit = 0;
    let mut total = 0;
    for q in 0..50 {
        let c = q % 40;
        let h: Vec<f64> = (0..32).map(|j| centers[[c, j]] + rng.gen_range(-0.3..0.3)).collect();
        let exact = idx.ann_query(&[0], &h, 50, AnnMode::Exact).unwrap();
        let approx = idx.ann_query(&[0], &h, 50, AnnMode::Approx).unwrap();
        let truth: std::collections::BTreeSet<_> = exact.hits().iter().map(|x| x.0).collect();
        hit += approx.hits().iter().filter(|x| truth.contains(&x.0)).count();
        total += truth.len();
        assert!(approx.hits().windows(2).all(|w| w[0].1 >= w[1].1));
    }
    let recall = hit as f64 / total as f64;
    assert!(recall >= 0.95, "recall {recall}");
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sids = random_sids(600, 2, 2, 7);
    let fused = random_matrix(600, 8, 1.0, &mut stream_rng(8, "test/f"));
    let idx = PrefixIndex::build(&PrefixBuckets::new(&sids, 2).unwrap(), &fused, &IndexConfig::default()).unwrap();
    idx.save(dir.path()).unwrap();
    let back = PrefixIndex::load(dir.path()).unwrap();
    assert_eq!(back, idx);
}

#[test]
fn u2i_last_writer_wins() {
    let u = U2iIndex::new(3);
    assert!(u.get(1).is_none());
    assert!(u.put(1, vec![(5, 0.5), (6, 0.2), (7, 0.1), (8, 0.05)], 10).unwrap());
    assert_eq!(u.get(1).unwrap().items.len(), 3);
    assert!(u.put(1, vec![(9, 0.9)], 20).unwrap());
    assert!(!u.put(1, vec![(4, 0.9)], 15).unwrap());
    let e = u.get(1).unwrap();
    assert_eq!((e.timestamp, e.items.clone()), (20, vec![(9, 0.9)]));
    assert!(u.put(2, vec![(1, 0.1), (2, 0.3)], 1).is_err());
    u.put(0, vec![(3, 0.25)], 1).unwrap();
    assert_eq!(u.export(), "0\t3\t1\t2.5e-1\n1\t9\t1\t9e-1\n");
}

#[test]
fn u2i_readers_see_complete_snapshots() {
    let index = Arc::new(U2iIndex::new(64));
    let done = Arc::new(AtomicBool::new(false));
    // Version v stores 32 items all with id v and probabilities 1/(v+1).
    let entry = |v: u32| -> Vec<(ItemId, f64)> { (0..32).map(|_| (v, 1.0 / (v as f64 + 1.0))).collect() };
    index.put(7, entry(0), 0).unwrap();
    let readers: Vec<_> = (0..8)
        .map(|_| {
            let index = Arc::clone(&index);
            let done = Arc::clone(&done);
            std::thread::spawn(move || {
                let mut reads = 0u64;
                let mut last = 0u64;
                while !done.load(Ordering::Acquire) || reads < 1000 {
                    let e = index.get(7).unwrap();
                    let v = e.items[0].0;
                    assert_eq!(e.items.len(), 32);
                    assert!(e.items.iter().all(|&(id, p)| id == v && p == 1.0 / (v as f64 + 1.0)));
                    assert_eq!(e.timestamp, v as u64);
                    assert!(e.timestamp >= last);
                    last = e.timestamp;
                    reads += 1;
                }
                reads
            })
        })
        .collect();
    for v in 1..500u32 {
        index.put(7, entry(v), v as u64).unwrap();
    }
    done.store(true, Ordering::Release);
    let total: u64 = readers.into_iter().map(|r| r.join().unwrap()).sum();
    assert!(total >= 8000);
    assert_eq!(index.get(7).unwrap().timestamp, 499);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn exact_query_matches_oracle(n in 1usize..300, m in 1usize..80, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "test/prop");
        let fused = random_matrix(n, 6, 1.0, &mut rng);
        let sids: Vec<_> = (0..n as ItemId).map(|i| (i, SemanticId(vec![(i % 2) as u16]))).collect();
        let b = PrefixBuckets::new(&sids, 1).unwrap();
        let idx = PrefixIndex::build(&b, &fused, &IndexConfig { min_cells_bucket: 16, ..IndexConfig::default() }).unwrap();
        let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for p in [0u16, 1] {
            let want = brute_force(b.bucket(&[p]), &fused, &h, m);
            match idx.ann_query(&[p], &h, m, AnnMode::Exact).unwrap() {
                AnnResult::Hits(got) => {
                    prop_assert_eq!(got.len(), want.len());
                    for (g, w) in got.iter().zip(&want) {
                        prop_assert_eq!(g.0, w.0);
                        prop_assert!((g.1 - w.1).abs() < 1e-12);
                    }
                }
                AnnResult::EmptyBucket => prop_assert!(want.is_empty()),
            }
        }
    }
}
