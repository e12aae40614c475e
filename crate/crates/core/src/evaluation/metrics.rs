//! SID-level hit rate and per-configuration metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{SidTable, Task};
use crate::ItemId;

/// Cut-offs reported for every configuration.
pub const HR_KS: [usize; 4] = [1, 5, 10, 20];

/// 1 if any of the first `k` predicted SIDs equals `target`.
pub fn hr_at_k_sids(predictions: &[&[u16]], target: &[u16], k: usize) -> Result<u8> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    Ok(u8::from(predictions.iter().take(k).any(|p| *p == target)))
}

/// 1 if any of the top-`k` predicted items shares the target's full SID.
pub fn hr_at_k(predictions: &[ItemId], target: ItemId, k: usize, sids: &SidTable) -> Result<u8> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let t = sids.get(target)?;
    for &p in predictions.iter().take(k) {
        if sids.get(p)? == t {
            return Ok(1);
        }
    }
    Ok(0)
}

/// Hit counts per task at each cut-off of [`HR_KS`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HitCounter {
    hits: BTreeMap<Task, ([u64; 4], u64)>,
}

impl HitCounter {
    /// Records one case given the 1-based rank of the first SID match.
    pub fn record(&mut self, task: Task, first_hit: Option<usize>) {
        let e = self.hits.entry(task).or_default();
        for (h, &k) in e.0.iter_mut().zip(&HR_KS) {
            *h += u64::from(first_hit.is_some_and(|r| r <= k));
        }
        e.1 += 1;
    }

    pub fn cases(&self) -> u64 {
        self.hits.values().map(|e| e.1).sum()
    }

    /// Per-task hit rates and their unweighted mean over tasks.
    pub fn rates(&self) -> (BTreeMap<Task, TaskRates>, [f64; 4]) {
        let per: BTreeMap<Task, TaskRates> = self
            .hits
            .iter()
            .map(|(&t, (h, n))| {
                let n = *n;
                let hr = h.map(|x| if n == 0 { 0.0 } else { x as f64 / n as f64 });
                (t, TaskRates { hr, cases: n })
            })
            .collect();
        let mut mean = [0.0; 4];
        if !per.is_empty() {
            for r in per.values() {
                for (m, v) in mean.iter_mut().zip(r.hr) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= per.len() as f64);
        }
        (per, mean)
    }
}

/// 1-based rank of the first prediction whose SID equals the target's.
pub fn first_hit(predictions: &[ItemId], target: ItemId, sids: &SidTable) -> Result<Option<usize>> {
    let t = sids.get(target)?;
    for (r, &p) in predictions.iter().enumerate() {
        if sids.get(p)? == t {
            return Ok(Some(r + 1));
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRates {
    pub hr: [f64; 4],
    pub cases: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_id: String,
    /// Hash of the effective configuration of this run.
    pub config_hash: String,
    pub per_task: BTreeMap<Task, TaskRates>,
    /// Unweighted mean over tasks.
    pub mean: [f64; 4],
    /// Top-1 beam equals the target's prefix (SID-prefix models only).
    pub prefix_accuracy: Option<f64>,
    /// `(stage, artifact hash)` in pipeline order.
    pub stage_hashes: Vec<(String, String)>,
    pub wall_seconds: f64,
    /// Stage and message of the first failure.
    pub failure: Option<String>,
}

impl MetricsReport {
    pub fn new(config_id: &str, config_hash: &str, counter: &HitCounter) -> Self {
        let (per_task, mean) = counter.rates();
        Self {
            config_id: config_id.to_string(),
            config_hash: config_hash.to_string(),
            per_task,
            mean,
            prefix_accuracy: None,
            stage_hashes: Vec::new(),
            wall_seconds: 0.0,
            failure: None,
        }
    }

    pub fn failed(config_id: &str, config_hash: &str, message: String) -> Self {
        Self {
            failure: Some(message),
            ..Self::new(config_id, config_hash, &HitCounter::default())
        }
    }

    /// Mean HR at cut-off `k` (one of [`HR_KS`]).
    pub fn hr(&self, k: usize) -> f64 {
        match HR_KS.iter().position(|&x| x == k) {
            Some(i) if self.failure.is_none() => self.mean[i],
            _ => f64::NAN,
        }
    }

    pub fn stage_hash(&self, stage: &str) -> Option<&str> {
        self.stage_hashes.iter().find(|(s, _)| s == stage).map(|(_, h)| h.as_str())
    }

    /// HR@K non-decreasing in K and within [0, 1] for every row.
    pub fn is_well_formed(&self) -> bool {
        let ok = |r: &[f64; 4]| r.windows(2).all(|w| w[0] <= w[1]) && r.iter().all(|v| (0.0..=1.0).contains(v));
        self.per_task.values().all(|t| ok(&t.hr)) && ok(&self.mean)
    }
}

pub const CSV_HEADER: &str = "config_id,task,hr1,hr5,hr10,hr20,wall_seconds";

/// One row per task plus a `mean` row per report; failed runs get a single
/// `FAILED` row.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in reports {
        let w = r.wall_seconds;
        if r.failure.is_some() {
            writeln!(s, "{},FAILED,nan,nan,nan,nan,{w:.3}", r.config_id).unwrap();
            continue;
        }
        for (t, v) in &r.per_task {
            let [a, b, c, d] = v.hr;
            writeln!(s, "{},{t},{a:.6},{b:.6},{c:.6},{d:.6},{w:.3}", r.config_id).unwrap();
        }
        let [a, b, c, d] = r.mean;
        writeln!(s, "{},mean,{a:.6},{b:.6},{c:.6},{d:.6},{w:.3}", r.config_id).unwrap();
    }
    s
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(metrics_csv(reports).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::SemanticId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(sids: &[&[u16]]) -> SidTable {
        let e: Vec<(ItemId, SemanticId)> = sids.iter().enumerate().map(|(i, s)| (i as ItemId, SemanticId(s.to_vec()))).collect();
        SidTable::new(sids.len(), &e).unwrap()
    }

    #[test]
    fn target_first_hits_every_k() {
        let t = table(&[&[0, 1], &[0, 2], &[1, 1]]);
        for k in HR_KS {
            assert_eq!(hr_at_k(&[2, 0, 1], 2, k, &t).unwrap(), 1);
        }
    }

    #[test]
    fn same_sid_item_counts_as_hit() {
        let t = table(&[&[3, 3], &[3, 3], &[1, 0]]);
        assert_eq!(hr_at_k(&[1], 0, 1, &t).unwrap(), 1);
        assert_eq!(hr_at_k(&[2], 0, 1, &t).unwrap(), 0);
    }

    #[test]
    fn shared_prefix_alone_is_a_miss() {
        let t = table(&[&[3, 1], &[3, 2]]);
        assert_eq!(hr_at_k(&[1], 0, 5, &t).unwrap(), 0);
    }

    #[test]
    fn unmapped_prediction_and_zero_k_are_errors() {
        let t = table(&[&[0], &[1]]);
        assert!(hr_at_k(&[7], 0, 1, &t).is_err());
        assert!(hr_at_k(&[1], 9, 1, &t).is_err());
        assert!(hr_at_k(&[1], 0, 0, &t).is_err());
    }

    #[test]
    fn scripted_fixture_matches_hand_count() {
        // 100 cases over 10 items where items 2i and 2i+1 share a SID.
        let sids: Vec<Vec<u16>> = (0..10u16).map(|i| vec![i / 2]).collect();
        let refs: Vec<&[u16]> = sids.iter().map(|s| s.as_slice()).collect();
        let t = table(&refs);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hand = [0u32; 4];
        let mut counter = HitCounter::default();
        for _ in 0..100 {
            let target: ItemId = rng.gen_range(0..10);
            let preds: Vec<ItemId> = (0..20).map(|_| rng.gen_range(0..10)).collect();
            // Hand count: explicit scan comparing SID groups.
            let first = preds.iter().position(|&p| p / 2 == target / 2).map(|r| r + 1);
            for (h, &k) in hand.iter_mut().zip(&HR_KS) {
                let got = hr_at_k(&preds, target, k, &t).unwrap();
                assert_eq!(got == 1, first.is_some_and(|r| r <= k));
                *h += u32::from(got);
            }
            assert_eq!(first_hit(&preds, target, &t).unwrap(), first);
            counter.record(Task::JustForYou, first);
        }
        let (per, mean) = counter.rates();
        for i in 0..4 {
            assert_eq!(per[&Task::JustForYou].hr[i], hand[i] as f64 / 100.0);
            assert_eq!(mean[i], hand[i] as f64 / 100.0);
        }
    }

    #[test]
    fn sid_list_variant_agrees_with_item_variant() {
        let t = table(&[&[0, 1], &[0, 2], &[1, 1]]);
        let preds = [1u32, 2];
        let ps: Vec<&[u16]> = preds.iter().map(|&p| t.get(p).unwrap().0.as_slice()).collect();
        for k in [1, 2] {
            assert_eq!(hr_at_k_sids(&ps, &t.get(2).unwrap().0, k).unwrap(), hr_at_k(&preds, 2, k, &t).unwrap());
        }
    }

    #[test]
    fn mean_is_unweighted_over_tasks() {
        let mut c = HitCounter::default();
        c.record(Task::Query, Some(1));
        for _ in 0..3 {
            c.record(Task::Season, None);
        }
        let (_, mean) = c.rates();
        assert_eq!(mean, [0.5; 4]);
        assert_eq!(c.cases(), 4);
    }

    #[test]
    fn csv_has_task_and_mean_rows() {
        let mut c = HitCounter::default();
        c.record(Task::Query, Some(6));
        let mut r = MetricsReport::new("full", "h", &c);
        r.wall_seconds = 1.5;
        let f = MetricsReport::failed("broken", "h", "sft: boom".into());
        let csv = metrics_csv(&[r.clone(), f]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "full,query,0.000000,0.000000,1.000000,1.000000,1.500");
        assert_eq!(lines[2], "full,mean,0.000000,0.000000,1.000000,1.000000,1.500");
        assert_eq!(lines[3], "broken,FAILED,nan,nan,nan,nan,0.000");
        assert!(r.is_well_formed());
        assert_eq!(r.hr(10), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn hr_monotone_in_k_and_same_sid_swap_invariant(
            preds in proptest::collection::vec(0u32..12, 1..25),
            target in 0u32..12,
            swap in 0usize..25,
        ) {
            let sids: Vec<Vec<u16>> = (0..12u16).map(|i| vec![i % 4, i / 6]).collect();
            let refs: Vec<&[u16]> = sids.iter().map(|s| s.as_slice()).collect();
            let t = table(&refs);
            let mut prev = 0;
            for k in 1..=25 {
                let h = hr_at_k(&preds, target, k, &t).unwrap();
                proptest::prop_assert!(h >= prev);
                prev = h;
            }
            // Replace one prediction with another item carrying the same SID.
            let mut swapped = preds.clone();
            let i = swap % swapped.len();
            let p = swapped[i];
            let twin = (0..12u32).find(|&j| j != p && sids[j as usize] == sids[p as usize]);
            if let Some(twin) = twin {
                swapped[i] = twin;
            }
            for k in HR_KS {
                proptest::prop_assert_eq!(hr_at_k(&preds, target, k, &t).unwrap(), hr_at_k(&swapped, target, k, &t).unwrap());
            }
        }
    }
}
