use std::sync::OnceLock;

use super::*;

fn all_configs() -> &'static Vec<MetricsReport> {
    static CELL: OnceLock<Vec<MetricsReport>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig {
            ablations: Ablation::ALL.to_vec(),
            baselines: Baseline::ALL.to_vec(),
            ..ExperimentConfig::small()
        };
        run_experiment(&cfg).unwrap()
    })
}

fn report<'a>(reports: &'a [MetricsReport], id: &str) -> &'a MetricsReport {
    reports.iter().find(|r| r.config_id == id).unwrap_or_else(|| panic!("no report {id}"))
}

#[test]
fn empty_selection_gives_one_full_row() {
    let r = run_experiment(&ExperimentConfig::small()).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].config_id, "full_sid1_id");
    assert!(r[0].failure.is_none());
    assert!(r[0].is_well_formed());
    assert_eq!(r[0].per_task.len(), 7);
    assert!(r[0].prefix_accuracy.is_some());
}

#[test]
fn every_configuration_reports_monotone_rates() {
    let reports = all_configs();
    assert_eq!(reports.len(), 1 + Ablation::ALL.len() + Baseline::ALL.len());
    for r in reports {
        assert!(r.failure.is_none(), "{}: {:?}", r.config_id, r.failure);
        assert!(r.is_well_formed(), "{}", r.config_id);
        assert_eq!(r.per_task.values().map(|t| t.cases).sum::<u64>(), 7 * 20);
    }
    let hashes: std::collections::BTreeSet<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), reports.len());
}

fn same_until(a: &MetricsReport, b: &MetricsReport, stage: &str) {
    for (s, h) in &a.stage_hashes {
        if s == stage {
            assert_ne!(b.stage_hash(s), Some(h.as_str()), "{} vs {}: {s} should differ", a.config_id, b.config_id);
            return;
        }
        assert_eq!(b.stage_hash(s), Some(h.as_str()), "{} vs {}: {s} should match", a.config_id, b.config_id);
    }
    panic!("stage {stage} missing");
}

#[test]
fn each_ablation_changes_one_stage() {
    let reports = all_configs();
    let full = report(reports, "full_sid1_id");
    let stages: Vec<&str> = full.stage_hashes.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(stages, ["world", "grounding", "quantizer", "index", "sft", "generate"]);
    same_until(full, report(reports, "no_apf"), "generate");
    same_until(full, report(reports, "no_pretrained_emb"), "sft");
    same_until(full, report(reports, "fewer_negatives"), "sft");
    same_until(full, report(reports, "global_negatives"), "sft");
    same_until(full, report(reports, "no_grounding"), "grounding");
}

#[test]
fn baselines_skip_the_stages_they_do_not_use() {
    let reports = all_configs();
    let pop = report(reports, "popularity");
    assert!(pop.stage_hash("sft").is_none());
    assert!(pop.stage_hash("index").is_none());
    assert!(report(reports, "ar_id").stage_hash("sft").is_some());
    assert_eq!(report(reports, "gr_id").stage_hash("index"), Some("-"));
    assert!(report(reports, "gr_sid").prefix_accuracy.is_none());
    let full = report(reports, "full_sid1_id");
    for id in ["popularity", "ar_id", "gr_sid", "gr_id"] {
        assert_eq!(report(reports, id).stage_hash("quantizer"), full.stage_hash("quantizer"));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = ExperimentConfig {
        ablations: vec![Ablation::NoApf],
        baselines: vec![Baseline::Popularity],
        ..ExperimentConfig::small()
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.stage_hashes, y.stage_hashes);
        assert_eq!(x.mean, y.mean);
        assert_eq!(x.config_hash, y.config_hash);
    }
}

#[test]
fn stage_failure_is_reported_not_raised() {
    let cfg = ExperimentConfig {
        baselines: vec![Baseline::Popularity],
        transformer: TransformerConfig {
            max_len: 12,
            ..ExperimentConfig::small().transformer
        },
        ..ExperimentConfig::small()
    };
    let r = run_experiment(&cfg).unwrap();
    let full = report(&r, "full_sid1_id");
    assert!(full.failure.as_deref().unwrap().starts_with("sft:"), "{:?}", full.failure);
    assert!(full.hr(10).is_nan());
    assert_eq!(full.stage_hash("index").map(str::len), Some(16));
    assert!(report(&r, "popularity").failure.is_none());
    let csv = crate::evaluation::metrics_csv(&r);
    assert!(csv.contains("full_sid1_id,FAILED"));
}

#[test]
fn key_value_overrides() {
    let kv = KeyValues::parse(
        "preset=small\nseed=7\nablations=no_apf, global_negatives\nbaselines=none\nprefix_lens=1,2\nann=approx\nsft_steps=5\n",
        "t",
    )
    .unwrap();
    let c = ExperimentConfig::from_kv(&kv).unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.ablations, vec![Ablation::NoApf, Ablation::GlobalNegatives]);
    assert!(c.baselines.is_empty());
    assert_eq!(c.prefix_lens, vec![1, 2]);
    assert_eq!(c.gen.ann, AnnMode::Approx);
    assert_eq!(c.sft.max_steps, 5);
    assert_eq!(c.world, WorldConfig::small());
    assert!(ExperimentConfig::from_kv(&KeyValues::parse("typo=1\n", "t").unwrap()).is_err());
    assert!(ExperimentConfig::from_kv(&KeyValues::parse("ablations=bogus\n", "t").unwrap()).is_err());
    assert!(ExperimentConfig::from_kv(&KeyValues::parse("preset=small\nprefix_lens=9\n", "t").unwrap()).is_err());
}
