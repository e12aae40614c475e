//! Multi-view semantic grounding.
//!
//! Relevance pairs from four views (semantic, visual, knowledge,
//! collaborative) train a small item encoder with an in-batch InfoNCE loss,
//! while a distillation term pulls the in-batch similarity distribution of
//! the encoder towards that of behavioural ID embeddings.
//!
//! Batches are laid out as `2B` rows: rows `0..B` are anchors and rows
//! `B..2B` their positives, so row `i` and row `(i + B) mod 2B` are partners.

mod losses;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use losses::{contrastive_loss, kd_loss, pair_probability, similarity_distribution, LossWithGrad};

use crate::error::{Error, Result};
use crate::evaluation::World;
use crate::numeric::nn::{random_matrix, Mlp, Parameters};
use crate::numeric::rng::stream_rng;
use crate::numeric::tensor_io::write_matrix;
use crate::numeric::{AdamWConfig, OptimState};
use crate::ItemId;

pub const TEXT_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Semantic,
    Visual,
    Knowledge,
    Collaborative,
}

impl View {
    pub const ALL: [View; 4] = [View::Semantic, View::Visual, View::Knowledge, View::Collaborative];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Semantic => "semantic",
            View::Visual => "visual",
            View::Knowledge => "knowledge",
            View::Collaborative => "collaborative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::parse("view", format!("unknown view {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelevancePair {
    pub anchor: ItemId,
    pub positive: ItemId,
    pub view: View,
}

/// A batch of `B` pairs with their `2B` student embeddings and optional
/// teacher embeddings in the same row order.
#[derive(Clone, Debug)]
pub struct GroundingBatch {
    pub pairs: Vec<RelevancePair>,
    pub text_embeddings: Array2<f64>,
    pub teacher_id_embeddings: Option<Array2<f64>>,
}

impl GroundingBatch {
    pub fn new(pairs: Vec<RelevancePair>, text_embeddings: Array2<f64>, teacher: Option<Array2<f64>>) -> Result<Self> {
        let rows = 2 * pairs.len();
        if text_embeddings.nrows() != rows {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows} embedding rows"),
                actual: text_embeddings.nrows().to_string(),
            });
        }
        if let Some(t) = &teacher {
            if t.nrows() != rows {
                return Err(Error::ShapeMismatch {
                    expected: format!("{rows} teacher rows"),
                    actual: t.nrows().to_string(),
                });
            }
        }
        Ok(Self {
            pairs,
            text_embeddings,
            teacher_id_embeddings: teacher,
        })
    }

    /// Row order used by both embedding matrices: anchors, then positives.
    pub fn row_items(pairs: &[RelevancePair]) -> Vec<ItemId> {
        pairs.iter().map(|p| p.anchor).chain(pairs.iter().map(|p| p.positive)).collect()
    }
}

/// Whether `pair` satisfies the ground-truth predicate of its view.
pub fn view_predicate(world: &World, pair: &RelevancePair, cooccur: &std::collections::BTreeSet<(ItemId, ItemId)>) -> bool {
    let (Ok(a), Ok(p)) = (world.item(pair.anchor), world.item(pair.positive)) else {
        return false;
    };
    if pair.anchor == pair.positive {
        return false;
    }
    match pair.view {
        View::Semantic => a.sub == p.sub,
        View::Visual => a.style == p.style,
        View::Knowledge => knowledge_key(a) == knowledge_key(p),
        View::Collaborative => cooccur.contains(&(pair.anchor, pair.positive)),
    }
}

/// Themed grouping: holiday when the item has one, otherwise season.
fn knowledge_key(item: &crate::evaluation::ItemRecord) -> (bool, u8) {
    match item.holiday {
        Some(h) => (true, h),
        None => (false, item.season),
    }
}

/// Samples relevance pairs for each view. Each view draws from its own
/// random stream, so the mix can change without disturbing other views.
pub fn build_relevance_pairs(world: &World, view_mix: &BTreeMap<View, usize>, seed: u64) -> Result<Vec<RelevancePair>> {
    if world.items.is_empty() {
        return Err(Error::Empty("catalog".into()));
    }
    let mut out = Vec::new();
    for (&view, &count) in view_mix {
        if count == 0 {
            continue;
        }
        let mut rng = stream_rng(seed, &format!("grounding/pairs/{}", view.as_str()));
        if view == View::Collaborative {
            let co = world.session_cooccurrences();
            if co.is_empty() {
                return Err(Error::Empty("session co-occurrences for collaborative pairs".into()));
            }
            for _ in 0..count {
                let (a, p) = co[rng.gen_range(0..co.len())];
                out.push(RelevancePair { anchor: a, positive: p, view });
            }
            continue;
        }
        let mut groups: BTreeMap<(u32, u32), Vec<ItemId>> = BTreeMap::new();
        for it in &world.items {
            let key = match view {
                View::Semantic => (it.sub, 0),
                View::Visual => (it.style, 0),
                _ => {
                    let (h, k) = knowledge_key(it);
                    (u32::from(h), u32::from(k))
                }
            };
            groups.entry(key).or_default().push(it.id);
        }
        let eligible: Vec<&Vec<ItemId>> = groups.values().filter(|g| g.len() >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::Empty(format!("no {} group with two or more items", view.as_str())));
        }
        // Anchors are drawn uniformly over items that have a partner.
        let anchors: Vec<(usize, usize)> = eligible
            .iter()
            .enumerate()
            .flat_map(|(g, items)| (0..items.len()).map(move |k| (g, k)))
            .collect();
        for _ in 0..count {
            let (g, k) = anchors[rng.gen_range(0..anchors.len())];
            let group = eligible[g];
            let mut other = rng.gen_range(0..group.len() - 1);
            if other >= k {
                other += 1;
            }
            out.push(RelevancePair {
                anchor: group[k],
                positive: group[other],
                view,
            });
        }
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[RelevancePair]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.anchor, p.positive, p.view.as_str())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<RelevancePair>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), n + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::parse(ctx(), "expected anchor, positive, view"));
        }
        let id = |s: &str| s.parse::<ItemId>().map_err(|e| Error::parse(ctx(), e.to_string()));
        out.push(RelevancePair {
            anchor: id(f[0])?,
            positive: id(f[1])?,
            view: View::parse(f[2])?,
        });
    }
    Ok(out)
}

/// Feed-forward item encoder from raw features to 64-dim text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEncoder {
    pub mlp: Mlp,
}

impl ItemEncoder {
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "grounding/encoder-init");
        Self {
            mlp: Mlp::new(feature_dim, hidden, TEXT_DIM, &mut rng),
        }
    }

    pub fn encode(&self, features: &Array2<f64>) -> Array2<f64> {
        self.mlp.forward(&features.view())
    }
}

impl Parameters for ItemEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.mlp.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub cl_weight: f64,
    pub kd_weight: f64,
    pub hidden_dim: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            batch_size: 256,
            steps: 200,
            cl_weight: 1.0,
            kd_weight: 1.0,
            hidden_dim: 128,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                warmup_steps: 20,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingLogEntry {
    pub step: usize,
    pub contrastive: f64,
    pub distillation: f64,
}

pub struct GroundingOutput {
    pub encoder: ItemEncoder,
    /// One 64-dim row per catalog item, in item-id order.
    pub embeddings: Array2<f64>,
    pub log: Vec<GroundingLogEntry>,
}

pub fn feature_matrix(world: &World) -> Array2<f64> {
    let d = world.items.first().map_or(0, |i| i.features.len());
    let mut m = Array2::zeros((world.items.len(), d));
    for (mut row, it) in m.rows_mut().into_iter().zip(&world.items) {
        row.assign(&ndarray::ArrayView1::from(&it.features));
    }
    m
}

pub fn teacher_matrix(world: &World) -> Array2<f64> {
    let d = world.items.first().map_or(0, |i| i.teacher.len());
    let mut m = Array2::zeros((world.items.len(), d));
    for (mut row, it) in m.rows_mut().into_iter().zip(&world.items) {
        row.assign(&ndarray::ArrayView1::from(&it.teacher));
    }
    m
}

/// Trains the encoder on `pairs` and embeds the whole catalog.
///
/// `teacher` holds one behavioural embedding per item (row = item id).
pub fn train_grounding(
    features: &Array2<f64>,
    pairs: &[RelevancePair],
    teacher: &Array2<f64>,
    config: &GroundingConfig,
) -> Result<GroundingOutput> {
    if pairs.is_empty() {
        return Err(Error::Empty("relevance pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let n_items = features.nrows();
    if teacher.nrows() != n_items {
        return Err(Error::ShapeMismatch {
            expected: format!("{n_items} teacher rows"),
            actual: teacher.nrows().to_string(),
        });
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.anchor as usize >= n_items || p.positive as usize >= n_items)
    {
        return Err(Error::UnknownItem(p.anchor.max(p.positive)));
    }
    let mut encoder = ItemEncoder::new(features.ncols(), config.hidden_dim, config.seed);
    let mut opt = OptimState::new(config.optimizer.clone());
    let mut rng = stream_rng(config.seed, "grounding/batches");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let b = config.batch_size.min(pairs.len());
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut batch_pairs = Vec::with_capacity(b);
        while batch_pairs.len() < b {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_pairs.push(pairs[order[cursor]]);
            cursor += 1;
        }
        let rows = GroundingBatch::row_items(&batch_pairs);
        let x = features.select(Axis(0), &rows.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let t = teacher.select(Axis(0), &rows.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let (emb, cache) = encoder.mlp.forward_train(&x.view());
        let batch = GroundingBatch::new(batch_pairs, emb, Some(t))?;

        let mut d_emb = Array2::zeros(batch.text_embeddings.raw_dim());
        let mut entry = GroundingLogEntry {
            step,
            contrastive: 0.0,
            distillation: 0.0,
        };
        if config.cl_weight != 0.0 {
            let cl = contrastive_loss(&batch, config.tau)?;
            entry.contrastive = cl.loss;
            d_emb.scaled_add(config.cl_weight, &cl.grad);
        }
        if config.kd_weight != 0.0 {
            let kd = kd_loss(&batch, config.tau)?;
            entry.distillation = kd.loss;
            d_emb.scaled_add(config.kd_weight, &kd.grad);
        }
        if !entry.contrastive.is_finite() || !entry.distillation.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("grounding loss cl={} kd={}", entry.contrastive, entry.distillation),
            });
        }
        let mut grad = encoder.zeros_like();
        encoder.mlp.backward(&x.view(), &cache, &d_emb.view(), &mut grad.mlp);
        opt.step(&mut encoder, &grad)?;
        log.push(entry);
    }

    let embeddings = encoder.encode(features);
    Ok(GroundingOutput {
        encoder,
        embeddings,
        log,
    })
}

/// Untrained stand-in embeddings for the no-grounding ablation.
pub fn random_embeddings(n_items: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, "grounding/random-embeddings");
    random_matrix(n_items, TEXT_DIM, 1.0, &mut rng)
}

/// Writes the embedding tensor and its id-order manifest (`<path>.ids`).
pub fn write_embeddings(path: &Path, embeddings: &Array2<f64>, ids: &[ItemId]) -> Result<()> {
    write_matrix(path, embeddings)?;
    let mut w = BufWriter::new(fs::File::create(ids_path(path))?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<(Array2<f64>, Vec<ItemId>)> {
    let m = crate::numeric::tensor_io::read_matrix(path)?;
    let text = fs::read_to_string(ids_path(path))?;
    let ids = text
        .lines()
        .map(|l| l.trim().parse::<ItemId>().map_err(|e| Error::parse("embedding id manifest", e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != m.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ids", m.nrows()),
            actual: ids.len().to_string(),
        });
    }
    Ok((m, ids))
}

fn ids_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    s.into()
}

pub fn write_training_log(path: &Path, log: &[GroundingLogEntry]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step\tcontrastive\tdistillation")?;
    for e in log {
        writeln!(w, "{}\t{:.9}\t{:.9}", e.step, e.contrastive, e.distillation)?;
    }
    w.flush()?;
    Ok(())
}
