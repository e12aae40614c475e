//! End-to-end runs: world, grounding, quantization, prefix index, SFT,
//! generation and evaluation for the full model, its ablations and the
//! baselines.
//!
//! Stages are cached by the settings that feed them, so configurations that
//! differ only downstream share upstream artifacts. Every stage artifact is
//! hashed; the hashes are reported per configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::evaluation::baselines::{popularity_predictions, train_ar_id, ArIdModel};
use crate::evaluation::metrics::{first_hit, HitCounter, MetricsReport};
use crate::evaluation::{generate_world, World, WorldConfig};
use crate::generator::{beam_search, generate, generate_flat, BeamMode, GenConfig, PromptState};
use crate::grounding::{build_relevance_pairs, feature_matrix, random_embeddings, teacher_matrix, train_grounding, GroundingConfig, View};
use crate::index::{AnnMode, IndexConfig, PrefixBuckets, PrefixIndex};
use crate::numeric::nn::Parameters;
use crate::numeric::rng::derive_seed;
use crate::numeric::tensor_io::Tensor;
use crate::quantizer::{assign_catalog, train_rqvae, RqVaeConfig, RqVaeModel, SemanticId};
use crate::seqmodel::dataset::{build_sft_dataset, uniform_mix, DatasetConfig, InstructionSample, Split};
use crate::seqmodel::model::{GenRecModel, ItemDims, ModelConfig};
use crate::seqmodel::train::{sft_train, NegativeMode, SftConfig};
use crate::seqmodel::transformer::TransformerConfig;
use crate::tokenizer::{ItemEmbeddings, SidTable, VocabLayout, Vocabulary};
use crate::ItemId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Random item embeddings instead of grounded ones.
    NoGrounding,
    /// All candidates from the top-1 prefix, no fusion across beams.
    NoApf,
    /// Item inputs learned from scratch during SFT.
    NoPretrainedEmb,
    /// Fewer ID negatives per sample.
    FewerNegatives,
    /// ID negatives drawn from the whole catalog instead of the prefix bucket.
    GlobalNegatives,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoGrounding,
        Ablation::NoApf,
        Ablation::NoPretrainedEmb,
        Ablation::FewerNegatives,
        Ablation::GlobalNegatives,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoGrounding => "no_grounding",
            Ablation::NoApf => "no_apf",
            Ablation::NoPretrainedEmb => "no_pretrained_emb",
            Ablation::FewerNegatives => "fewer_negatives",
            Ablation::GlobalNegatives => "global_negatives",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::parse("ablation", format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Baseline {
    /// Global training popularity.
    Popularity,
    /// Transformer over item ids with a softmax over the catalog.
    AutoregressiveId,
    /// Full-length SIDs decoded by beam search, no ID step.
    GrSid,
    /// ID retrieval only, no SID prefix.
    GrId,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Popularity, Baseline::AutoregressiveId, Baseline::GrSid, Baseline::GrId];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Popularity => "popularity",
            Baseline::AutoregressiveId => "ar_id",
            Baseline::GrSid => "gr_sid",
            Baseline::GrId => "gr_id",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::parse("baseline", format!("unknown baseline {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Relevance pairs drawn per grounding view.
    pub pairs_per_view: usize,
    pub grounding: GroundingConfig,
    pub rqvae: RqVaeConfig,
    pub index: IndexConfig,
    pub transformer: TransformerConfig,
    /// Prefix lengths of the full model, one configuration each. Ablations
    /// apply to the first.
    pub prefix_lens: Vec<usize>,
    pub history_len: usize,
    pub discover_window: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub sft: SftConfig,
    /// Per-sample negatives under [`Ablation::FewerNegatives`].
    pub fewer_negatives: usize,
    pub gen: GenConfig,
    pub ablations: Vec<Ablation>,
    pub baselines: Vec<Baseline>,
}

impl Default for ExperimentConfig {
    /// The standard synthetic benchmark (10K items, 2K users, 200K events,
    /// seed 42) with the full model at prefix lengths 1 and 2.
    fn default() -> Self {
        Self {
            seed: 42,
            world: WorldConfig::default(),
            pairs_per_view: 20_000,
            grounding: GroundingConfig {
                steps: 400,
                ..GroundingConfig::default()
            },
            rqvae: RqVaeConfig {
                epochs: 5,
                ..RqVaeConfig::default()
            },
            index: IndexConfig::default(),
            transformer: TransformerConfig::default(),
            prefix_lens: vec![1, 2],
            history_len: 20,
            discover_window: 10,
            train_per_task: 6_000,
            test_per_task: 200,
            sft: SftConfig {
                max_steps: 1_500,
                ..SftConfig::default()
            },
            fewer_negatives: 8,
            gen: GenConfig::default(),
            ablations: Vec::new(),
            baselines: Vec::new(),
        }
    }
}

fn parse_list<T>(raw: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(f)
        .collect()
}

impl ExperimentConfig {
    /// A few-minute configuration on the small world.
    pub fn small() -> Self {
        Self {
            world: WorldConfig::small(),
            pairs_per_view: 2_000,
            grounding: GroundingConfig {
                steps: 60,
                batch_size: 128,
                ..GroundingConfig::default()
            },
            rqvae: RqVaeConfig {
                codebook_size: 16,
                levels: 3,
                epochs: 3,
                ..RqVaeConfig::default()
            },
            transformer: TransformerConfig {
                hidden: 32,
                heads: 2,
                layers: 1,
                ffn: 64,
                max_len: 96,
            },
            prefix_lens: vec![1],
            history_len: 8,
            train_per_task: 100,
            test_per_task: 20,
            sft: SftConfig {
                max_steps: 40,
                batch_size: 16,
                sample_negatives: 16,
                shared_negatives: 32,
                ..SftConfig::default()
            },
            fewer_negatives: 2,
            gen: GenConfig {
                beams: 8,
                per_beam: 10,
                ..GenConfig::default()
            },
            ..Self::default()
        }
    }

    pub const KEYS: [&'static str; 35] = [
        "seed",
        "n_items",
        "n_users",
        "n_events",
        "popularity_exponent",
        "pairs_per_view",
        "grounding_steps",
        "grounding_batch",
        "codebook_size",
        "levels",
        "rqvae_epochs",
        "hidden",
        "heads",
        "layers",
        "ffn",
        "max_len",
        "prefix_lens",
        "history_len",
        "train_per_task",
        "test_per_task",
        "sft_steps",
        "sft_epochs",
        "batch_size",
        "learning_rate",
        "sample_negatives",
        "shared_negatives",
        "fewer_negatives",
        "beams",
        "per_beam",
        "top_n",
        "tau",
        "ann",
        "ablations",
        "baselines",
        "preset",
    ];

    /// Overrides from a `key=value` file. `preset=small` starts from
    /// [`ExperimentConfig::small`]; unknown keys are errors.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !Self::KEYS.contains(k)) {
            return Err(Error::parse("experiment config", format!("unknown key {k:?}")));
        }
        let mut c = match kv.get("preset") {
            None | Some("standard") => Self::default(),
            Some("small") => Self::small(),
            Some(other) => return Err(Error::parse("experiment config", format!("unknown preset {other:?}"))),
        };
        kv.apply("seed", &mut c.seed)?;
        kv.apply("n_items", &mut c.world.n_items)?;
        kv.apply("n_users", &mut c.world.n_users)?;
        kv.apply("n_events", &mut c.world.n_events)?;
        kv.apply("popularity_exponent", &mut c.world.popularity_exponent)?;
        kv.apply("pairs_per_view", &mut c.pairs_per_view)?;
        kv.apply("grounding_steps", &mut c.grounding.steps)?;
        kv.apply("grounding_batch", &mut c.grounding.batch_size)?;
        kv.apply("codebook_size", &mut c.rqvae.codebook_size)?;
        kv.apply("levels", &mut c.rqvae.levels)?;
        kv.apply("rqvae_epochs", &mut c.rqvae.epochs)?;
        kv.apply("hidden", &mut c.transformer.hidden)?;
        kv.apply("heads", &mut c.transformer.heads)?;
        kv.apply("layers", &mut c.transformer.layers)?;
        kv.apply("ffn", &mut c.transformer.ffn)?;
        kv.apply("max_len", &mut c.transformer.max_len)?;
        if let Some(v) = kv.get("prefix_lens") {
            c.prefix_lens = parse_list(v, |s| s.parse().map_err(|e| Error::parse("prefix_lens", format!("{e}"))))?;
        }
        kv.apply("history_len", &mut c.history_len)?;
        kv.apply("train_per_task", &mut c.train_per_task)?;
        kv.apply("test_per_task", &mut c.test_per_task)?;
        kv.apply("sft_steps", &mut c.sft.max_steps)?;
        kv.apply("sft_epochs", &mut c.sft.epochs)?;
        kv.apply("batch_size", &mut c.sft.batch_size)?;
        kv.apply("learning_rate", &mut c.sft.optimizer.learning_rate)?;
        kv.apply("sample_negatives", &mut c.sft.sample_negatives)?;
        kv.apply("shared_negatives", &mut c.sft.shared_negatives)?;
        kv.apply("fewer_negatives", &mut c.fewer_negatives)?;
        kv.apply("beams", &mut c.gen.beams)?;
        kv.apply("per_beam", &mut c.gen.per_beam)?;
        kv.apply("top_n", &mut c.gen.top_n)?;
        kv.apply("tau", &mut c.gen.tau)?;
        if let Some(v) = kv.get("ann") {
            c.gen.ann = AnnMode::parse(v)?;
        }
        if let Some(v) = kv.get("ablations") {
            c.ablations = parse_list(v, Ablation::parse)?;
        }
        if let Some(v) = kv.get("baselines") {
            c.baselines = parse_list(v, Baseline::parse)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.transformer.validate()?;
        if self.prefix_lens.is_empty() {
            return Err(Error::invalid("at least one prefix length is required"));
        }
        if let Some(&l) = self.prefix_lens.iter().find(|&&l| l > self.rqvae.levels) {
            return Err(Error::invalid(format!("prefix length {l} exceeds {} levels", self.rqvae.levels)));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::invalid("train_per_task and test_per_task must be positive"));
        }
        if self.gen.top_n == 0 || self.gen.beams == 0 {
            return Err(Error::invalid("top_n and beams must be positive"));
        }
        Ok(())
    }
}

/// How one configuration trains its sequence model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
struct TrainSpec {
    grounded: bool,
    prefix_len: usize,
    learned_items: bool,
    negative_mode: NegativeMode,
    sample_negatives: usize,
    ntp_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decoding {
    /// Beam search, per-bucket retrieval and fusion.
    Fused(GenConfig),
    /// Flat scan over the catalog (prefix length 0).
    Flat(GenConfig),
    /// Full SIDs from beam search.
    Sids { beams: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
enum RunKind {
    Generative { train: TrainSpec, decode: Decoding },
    Popularity { top_n: usize },
    ArId { top_n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct RunPlan {
    id: String,
    grounded: bool,
    kind: RunKind,
}

fn full_spec(cfg: &ExperimentConfig, prefix_len: usize) -> TrainSpec {
    TrainSpec {
        grounded: true,
        prefix_len,
        learned_items: false,
        negative_mode: if prefix_len > 0 { cfg.sft.negative_mode } else { NegativeMode::Global },
        sample_negatives: cfg.sft.sample_negatives,
        ntp_only: false,
    }
}

fn plan(cfg: &ExperimentConfig) -> Vec<RunPlan> {
    let mut runs = Vec::new();
    for &l in &cfg.prefix_lens {
        let decode = if l == 0 { Decoding::Flat(cfg.gen.clone()) } else { Decoding::Fused(cfg.gen.clone()) };
        runs.push(RunPlan {
            id: format!("full_sid{l}_id"),
            grounded: true,
            kind: RunKind::Generative {
                train: full_spec(cfg, l),
                decode,
            },
        });
    }
    let l = cfg.prefix_lens[0];
    let base = full_spec(cfg, l);
    let base_decode = || if l == 0 { Decoding::Flat(cfg.gen.clone()) } else { Decoding::Fused(cfg.gen.clone()) };
    for &a in &cfg.ablations {
        let mut train = base.clone();
        let mut decode = base_decode();
        match a {
            Ablation::NoGrounding => train.grounded = false,
            Ablation::NoApf => {
                decode = Decoding::Fused(GenConfig {
                    beams: 1,
                    per_beam: cfg.gen.top_n,
                    apf: false,
                    ..cfg.gen.clone()
                })
            }
            Ablation::NoPretrainedEmb => train.learned_items = true,
            Ablation::FewerNegatives => train.sample_negatives = cfg.fewer_negatives,
            Ablation::GlobalNegatives => train.negative_mode = NegativeMode::Global,
        }
        runs.push(RunPlan {
            id: a.as_str().to_string(),
            grounded: train.grounded,
            kind: RunKind::Generative { train, decode },
        });
    }
    for &b in &cfg.baselines {
        let kind = match b {
            Baseline::Popularity => RunKind::Popularity { top_n: cfg.gen.top_n },
            Baseline::AutoregressiveId => RunKind::ArId { top_n: cfg.gen.top_n },
            Baseline::GrSid => RunKind::Generative {
                train: TrainSpec {
                    ntp_only: true,
                    negative_mode: NegativeMode::Global,
                    ..full_spec(cfg, cfg.rqvae.levels)
                },
                decode: Decoding::Sids { beams: cfg.gen.top_n },
            },
            Baseline::GrId => RunKind::Generative {
                train: full_spec(cfg, 0),
                decode: Decoding::Flat(cfg.gen.clone()),
            },
        };
        runs.push(RunPlan {
            id: b.as_str().to_string(),
            grounded: true,
            kind,
        });
    }
    runs
}

/// Train and test instruction sets of `world` (same budget for every model).
pub fn build_datasets(cfg: &ExperimentConfig, world: &World) -> Result<(Vec<InstructionSample>, Vec<InstructionSample>)> {
    let ds = |split, label| DatasetConfig {
        history_len: cfg.history_len,
        discover_window: cfg.discover_window,
        split,
        seed: derive_seed(cfg.seed, label),
    };
    let train = build_sft_dataset(world, &uniform_mix(cfg.train_per_task), &ds(Split::Train, "dataset/train"))?;
    let test = build_sft_dataset(world, &uniform_mix(cfg.test_per_task), &ds(Split::Test, "dataset/test"))?;
    Ok((train, test))
}

/// Grounded text embeddings, or random ones when `grounded` is false.
pub fn ground_items(cfg: &ExperimentConfig, world: &World, grounded: bool) -> Result<Array2<f64>> {
    let seed = derive_seed(cfg.seed, "grounding");
    if !grounded {
        return Ok(random_embeddings(world.n_items(), seed));
    }
    let mix: BTreeMap<View, usize> = View::ALL.iter().map(|&v| (v, cfg.pairs_per_view)).collect();
    let pairs = build_relevance_pairs(world, &mix, derive_seed(cfg.seed, "grounding/pairs"))?;
    let gc = GroundingConfig {
        seed,
        ..cfg.grounding.clone()
    };
    Ok(train_grounding(&feature_matrix(world), &pairs, &teacher_matrix(world), &gc)?.embeddings)
}

/// RQ-VAE fitted on `embeddings` and the SID of every item (row = item id).
pub fn quantize_items(cfg: &ExperimentConfig, embeddings: &Array2<f64>) -> Result<(RqVaeModel, Vec<(ItemId, SemanticId)>)> {
    let rc = RqVaeConfig {
        seed: derive_seed(cfg.seed, "quantizer"),
        ..cfg.rqvae.clone()
    };
    let (model, _) = train_rqvae(embeddings, &rc)?;
    let ids: Vec<ItemId> = (0..embeddings.nrows() as ItemId).collect();
    let sids = assign_catalog(&model, embeddings, &ids)?.sids;
    Ok((model, sids))
}

pub fn vocabulary(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    Vocabulary::new(VocabLayout::from_world(&cfg.world, cfg.rqvae.levels, cfg.rqvae.codebook_size))
}

pub fn model_config(cfg: &ExperimentConfig, prefix_len: usize, learned_items: bool) -> ModelConfig {
    ModelConfig {
        transformer: cfg.transformer.clone(),
        prefix_len,
        learned_items,
        seed: derive_seed(cfg.seed, "sft"),
    }
}

pub fn sft_config(cfg: &ExperimentConfig) -> SftConfig {
    SftConfig {
        seed: derive_seed(cfg.seed, "sft"),
        ..cfg.sft.clone()
    }
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

fn hash_matrix(m: &Array2<f64>) -> String {
    sha(&Tensor::from_array2(m).encode())
}

fn hash_params<P: Parameters>(p: &P) -> String {
    let bytes: Vec<u8> = p.flatten().iter().flat_map(|x| x.to_le_bytes()).collect();
    sha(&bytes)
}

fn hash_samples(samples: &[InstructionSample]) -> String {
    let mut s = String::new();
    for x in samples {
        writeln!(s, "{x:?}").unwrap();
    }
    sha(s.as_bytes())
}

/// A stage artifact with its hash and compute time; failures carry the
/// stage-qualified message.
type Stage<T> = std::result::Result<Arc<Staged<T>>, String>;

struct Staged<T> {
    value: T,
    hash: String,
    seconds: f64,
}

fn staged<T>(name: &str, f: impl FnOnce() -> Result<(T, String)>) -> Stage<T> {
    let t = Instant::now();
    match f() {
        Ok((value, hash)) => Ok(Arc::new(Staged {
            value,
            hash,
            seconds: t.elapsed().as_secs_f64(),
        })),
        Err(e) => Err(format!("{name}: {e}")),
    }
}

struct Quantized {
    items: ItemEmbeddings,
    sids: Vec<(ItemId, SemanticId)>,
    table: SidTable,
}

struct Data {
    world: World,
    train: Vec<InstructionSample>,
    test: Vec<InstructionSample>,
}

enum Trained {
    Gen(Box<GenRecModel>),
    ArId(Box<ArIdModel>),
}

/// Runs every configuration selected by `config`. Stage failures yield
/// reports with `failure` set instead of an error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    config.validate()?;
    let cfg = config;
    let runs = plan(cfg);
    let seed = cfg.seed;

    let data: Stage<Data> = staged("world", || {
        let world = generate_world(&cfg.world, seed)?;
        let (train, test) = build_datasets(cfg, &world)?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&world)?);
        h.update(hash_samples(&train));
        h.update(hash_samples(&test));
        let hash = hex::encode(h.finalize())[..16].to_string();
        Ok((Data { world, train, test }, hash))
    });

    let vocab = vocabulary(cfg)?;

    // Grounding and quantization per embedding source.
    let mut embeddings: BTreeMap<bool, Stage<Array2<f64>>> = BTreeMap::new();
    let mut quantized: BTreeMap<bool, Stage<Quantized>> = BTreeMap::new();
    let mut sources: Vec<bool> = runs.iter().map(|r| r.grounded).collect();
    sources.push(true);
    sources.sort_unstable();
    sources.dedup();
    for &grounded in &sources {
        let emb: Stage<Array2<f64>> = match &data {
            Err(e) => Err(e.clone()),
            Ok(d) => staged("grounding", || {
                let m = ground_items(cfg, &d.value.world, grounded)?;
                let h = hash_matrix(&m);
                Ok((m, h))
            }),
        };
        let q: Stage<Quantized> = match (&data, &emb) {
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            (Ok(d), Ok(e)) => staged("quantizer", || {
                let (_, sids) = quantize_items(cfg, &e.value)?;
                let table = SidTable::new(e.value.nrows(), &sids)?;
                let items = ItemEmbeddings::from_world(&d.value.world, &e.value)?;
                let mut text = String::new();
                for (id, sid) in &sids {
                    writeln!(text, "{id}\t{sid}").unwrap();
                }
                let h = sha(text.as_bytes());
                Ok((Quantized { items, sids, table }, h))
            }),
        };
        embeddings.insert(grounded, emb);
        quantized.insert(grounded, q);
    }

    // Prefix buckets per (source, prefix length).
    let mut buckets: BTreeMap<(bool, usize), Stage<Option<PrefixBuckets>>> = BTreeMap::new();
    for r in &runs {
        if let RunKind::Generative { train, .. } = &r.kind {
            let key = (train.grounded, train.prefix_len);
            if buckets.contains_key(&key) {
                continue;
            }
            let b = match &quantized[&train.grounded] {
                Err(e) => Err(e.clone()),
                Ok(q) => staged("index", || {
                    if key.1 == 0 {
                        return Ok((None, "-".to_string()));
                    }
                    let b = PrefixBuckets::new(&q.value.sids, key.1)?;
                    let mut text = String::new();
                    for (p, items) in b.iter() {
                        writeln!(text, "{p:?}\t{items:?}").unwrap();
                    }
                    let h = sha(text.as_bytes());
                    Ok((Some(b), h))
                }),
            };
            buckets.insert(key, b);
        }
    }

    // Sequence models, trained in parallel.
    let mut train_keys: Vec<Option<TrainSpec>> = Vec::new();
    for r in &runs {
        let key = match &r.kind {
            RunKind::Generative { train, .. } => Some(train.clone()),
            RunKind::ArId { .. } => None,
            RunKind::Popularity { .. } => continue,
        };
        if !train_keys.contains(&key) {
            train_keys.push(key);
        }
    }
    let trained: Vec<(Option<TrainSpec>, Stage<Trained>)> = train_keys
        .into_par_iter()
        .map(|key| {
            let stage = train_stage(cfg, &data, &vocab, &quantized, &buckets, key.as_ref());
            (key, stage)
        })
        .collect();
    let trained: BTreeMap<Option<TrainSpec>, Stage<Trained>> = trained.into_iter().collect();

    let reports: Vec<MetricsReport> = runs
        .par_iter()
        .map(|r| {
            let config_hash = sha(&serde_json::to_vec(&(cfg.seed, &cfg.world, r, run_upstream(cfg, r))).expect("plain data"));
            evaluate_run(cfg, r, &config_hash, &data, &embeddings, &quantized, &buckets, &trained)
                .unwrap_or_else(|(msg, hashes, seconds)| {
                    let mut f = MetricsReport::failed(&r.id, &config_hash, msg);
                    f.stage_hashes = hashes;
                    f.wall_seconds = seconds;
                    f
                })
        })
        .collect();
    Ok(reports)
}

/// Upstream settings that feed a run, for its configuration hash.
fn run_upstream(cfg: &ExperimentConfig, r: &RunPlan) -> serde_json::Value {
    serde_json::json!({
        "pairs_per_view": cfg.pairs_per_view,
        "grounding": cfg.grounding,
        "rqvae": cfg.rqvae,
        "index": cfg.index,
        "transformer": cfg.transformer,
        "history_len": cfg.history_len,
        "discover_window": cfg.discover_window,
        "train_per_task": cfg.train_per_task,
        "test_per_task": cfg.test_per_task,
        "sft": cfg.sft,
        "grounded": r.grounded,
    })
}

fn train_stage(
    cfg: &ExperimentConfig,
    data: &Stage<Data>,
    vocab: &Vocabulary,
    quantized: &BTreeMap<bool, Stage<Quantized>>,
    buckets: &BTreeMap<(bool, usize), Stage<Option<PrefixBuckets>>>,
    key: Option<&TrainSpec>,
) -> Stage<Trained> {
    let d = data.as_ref().map_err(Clone::clone)?;
    let sft_seed = derive_seed(cfg.seed, "sft");
    let Some(spec) = key else {
        return staged("sft", || {
            let model = ArIdModel::new(cfg.transformer.clone(), vocab.clone(), cfg.world.n_items, sft_seed)?;
            let (model, _) = train_ar_id(model, &d.value.train, &sft_config(cfg))?;
            let h = hash_params(&model);
            Ok((Trained::ArId(Box::new(model)), h))
        });
    };
    let q = quantized[&spec.grounded].as_ref().map_err(Clone::clone)?;
    let b = buckets[&(spec.grounded, spec.prefix_len)].as_ref().map_err(Clone::clone)?;
    staged("sft", || {
        let model = GenRecModel::new(model_config(cfg, spec.prefix_len, spec.learned_items), vocab.clone(), ItemDims::of(&q.value.items))?;
        let mut sc = SftConfig {
            negative_mode: spec.negative_mode,
            sample_negatives: spec.sample_negatives,
            ..sft_config(cfg)
        };
        if spec.ntp_only {
            sc.loss.id_weight = 0.0;
        }
        let (model, log) = sft_train(model, &q.value.items, &q.value.table, b.value.as_ref(), &d.value.train, &sc)?;
        if let Some(step) = log.diverged {
            log::warn!("sft diverged at step {step}");
        }
        let h = hash_params(&model);
        Ok((Trained::Gen(Box::new(model)), h))
    })
}

/// Hit counts of one generative model over a test set.
pub struct GenerativeEval {
    pub counter: HitCounter,
    /// Top-1 beam equal to the target's own prefix (fused decoding only).
    pub prefix_correct: Option<usize>,
    /// One line of predictions per test case.
    pub listing: String,
}

/// Decodes every test case with `decoding` and scores it against
/// `eval_sids`. `own_sids` are the SIDs the model was trained on.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_generative(
    model: &GenRecModel,
    items: &ItemEmbeddings,
    own_sids: &SidTable,
    buckets: Option<&PrefixBuckets>,
    index_config: &IndexConfig,
    test: &[InstructionSample],
    eval_sids: &SidTable,
    decoding: &Decoding,
) -> Result<GenerativeEval> {
    let fused = model.fuse_catalog(items)?;
    let index = match (buckets, decoding) {
        (Some(bk), Decoding::Fused(_)) => Some(PrefixIndex::build(bk, &fused, index_config)?),
        (None, Decoding::Fused(_)) => return Err(Error::invalid("fused decoding needs prefix buckets")),
        _ => None,
    };
    let mut normalized = fused;
    for mut row in normalized.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    let mut counter = HitCounter::default();
    let mut listing = String::new();
    let mut correct = 0;
    for s in test {
        let state = PromptState::from_rows(model, items, &model.prompt_rows(own_sids, s)?)?;
        match decoding {
            Decoding::Sids { beams } => {
                let target = eval_sids.get(s.target)?;
                let out = beam_search(model, items, &state, *beams, BeamMode::Standard)?;
                let hit = out.candidates.iter().position(|c| c.prefix == target.0).map(|i| i + 1);
                for c in &out.candidates {
                    write!(listing, "{:?};", c.prefix).unwrap();
                }
                writeln!(listing).unwrap();
                counter.record(s.task, hit);
            }
            Decoding::Fused(gc) | Decoding::Flat(gc) => {
                let res = match &index {
                    Some(ix) => generate(model, items, ix, &state, gc)?,
                    None => generate_flat(model, items, &normalized, &state, gc)?,
                };
                for it in &res.items {
                    write!(listing, "{}:{:e};", it.item, it.prob).unwrap();
                }
                writeln!(listing).unwrap();
                counter.record(s.task, first_hit(&res.item_ids(), s.target, eval_sids)?);
                let l = model.prefix_len();
                let own = own_sids.get(s.target)?;
                if l > 0 && res.beams.first().is_some_and(|bm| bm.prefix == own.prefix(l)) {
                    correct += 1;
                }
            }
        }
    }
    Ok(GenerativeEval {
        counter,
        prefix_correct: matches!(decoding, Decoding::Fused(_)).then_some(correct),
        listing,
    })
}

type RunError = (String, Vec<(String, String)>, f64);

#[allow(clippy::too_many_arguments)]
fn evaluate_run(
    cfg: &ExperimentConfig,
    r: &RunPlan,
    config_hash: &str,
    data: &Stage<Data>,
    embeddings: &BTreeMap<bool, Stage<Array2<f64>>>,
    quantized: &BTreeMap<bool, Stage<Quantized>>,
    buckets: &BTreeMap<(bool, usize), Stage<Option<PrefixBuckets>>>,
    trained: &BTreeMap<Option<TrainSpec>, Stage<Trained>>,
) -> std::result::Result<MetricsReport, RunError> {
    let mut hashes: Vec<(String, String)> = Vec::new();
    let mut seconds = 0.0;
    macro_rules! take {
        ($name:expr, $stage:expr) => {
            match $stage {
                Ok(s) => {
                    hashes.push(($name.to_string(), s.hash.clone()));
                    seconds += s.seconds;
                    s
                }
                Err(e) => return Err((e.clone(), hashes, seconds)),
            }
        };
    }
    let d = take!("world", data);
    take!("grounding", &embeddings[&r.grounded]);
    let q = take!("quantizer", &quantized[&r.grounded]);
    // Predictions are always scored against the grounded SIDs.
    let eval_sids = &quantized[&true].as_ref().map_err(|e| (e.clone(), hashes.clone(), seconds))?.value.table;

    let t = Instant::now();
    let mut counter = HitCounter::default();
    let mut prefix_hits = None;
    let mut listing = String::new();
    let fail = |e: Error, hashes: &Vec<(String, String)>, s: f64| (format!("generate: {e}"), hashes.clone(), s);
    match &r.kind {
        RunKind::Popularity { top_n } => {
            let preds = popularity_predictions(&d.value.world, *top_n);
            writeln!(listing, "{preds:?}").unwrap();
            for s in &d.value.test {
                let hit = first_hit(&preds, s.target, eval_sids).map_err(|e| fail(e, &hashes, seconds))?;
                counter.record(s.task, hit);
            }
        }
        RunKind::ArId { top_n } => {
            let m = take!("sft", &trained[&None]);
            let Trained::ArId(model) = &m.value else { unreachable!("item-id stage holds an item-id model") };
            for s in &d.value.test {
                let preds = model.predict(s, *top_n).map_err(|e| fail(e, &hashes, seconds))?;
                writeln!(listing, "{preds:?}").unwrap();
                let hit = first_hit(&preds, s.target, eval_sids).map_err(|e| fail(e, &hashes, seconds))?;
                counter.record(s.task, hit);
            }
        }
        RunKind::Generative { train, decode } => {
            let b = take!("index", &buckets[&(train.grounded, train.prefix_len)]);
            let m = take!("sft", &trained[&Some(train.clone())]);
            let Trained::Gen(model) = &m.value else { unreachable!("generative stage holds a generative model") };
            let ev = evaluate_generative(model, &q.value.items, &q.value.table, b.value.as_ref(), &cfg.index, &d.value.test, eval_sids, decode)
                .map_err(|e| fail(e, &hashes, seconds))?;
            counter = ev.counter;
            listing = ev.listing;
            prefix_hits = ev.prefix_correct;
        }
    }
    seconds += t.elapsed().as_secs_f64();
    hashes.push(("generate".to_string(), sha(listing.as_bytes())));
    let mut report = MetricsReport::new(&r.id, config_hash, &counter);
    report.prefix_accuracy = prefix_hits.map(|c| c as f64 / d.value.test.len() as f64);
    report.stage_hashes = hashes;
    report.wall_seconds = seconds;
    Ok(report)
}

#[cfg(test)]
mod tests;
