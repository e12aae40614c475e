//! Three-step item generation: SID prefix beams, one query vector per beam,
//! then per-bucket retrieval with adaptive probabilistic fusion.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{AnnMode, PrefixIndex};
use crate::numeric::{population_std, softmax};
use crate::seqmodel::model::{GenRecModel, InputRow};
use crate::seqmodel::transformer::KvCache;
use crate::tokenizer::ItemEmbeddings;
use crate::ItemId;

/// Transformer state after the full prompt (context + instruction).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub cache: KvCache,
    /// Final hidden state at the last prompt position.
    pub last: Array1<f64>,
}

impl PromptState {
    /// Runs `rows` from an empty cache.
    pub fn from_rows(model: &GenRecModel, items: &ItemEmbeddings, rows: &[InputRow]) -> Result<Self> {
        Self::extend(model, items, &model.new_cache(), rows)
    }

    /// Continues a cached context with `suffix` (usually the instruction).
    pub fn extend(model: &GenRecModel, items: &ItemEmbeddings, context: &KvCache, suffix: &[InputRow]) -> Result<Self> {
        if context.is_empty() && suffix.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        let mut cache = context.clone();
        let y = model.extend(items, suffix, &mut cache)?;
        let last = if y.nrows() > 0 {
            y.row(y.nrows() - 1).to_owned()
        } else {
            return Err(Error::invalid("prompt suffix must be non-empty"));
        };
        Ok(Self { cache, last })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub prefix: Vec<u16>,
    /// Cumulative log-probability of the prefix.
    pub phi: f64,
    pub h: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeamMode {
    /// Best-first search; returns the true top-K prefixes.
    Exact,
    /// Width-K beam, pruned level by level.
    Standard,
}

impl BeamMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::invalid(format!("unknown beam mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub candidates: Vec<BeamCandidate>,
    /// Fewer than K prefixes were reachable.
    pub truncated: bool,
}

/// φ descending, then lexicographic prefix.
fn rank_order(a: &(f64, Vec<u16>), b: &(f64, Vec<u16>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

struct Node {
    phi: f64,
    prefix: Vec<u16>,
    complete: bool,
}

impl PartialEq for Node {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Node {
    // Max-heap: higher φ first; at equal φ unfinished nodes first (their
    // children may tie), then the smaller prefix.
    fn cmp(&self, o: &Self) -> Ordering {
        self.phi
            .total_cmp(&o.phi)
            .then_with(|| o.complete.cmp(&self.complete))
            .then_with(|| o.prefix.cmp(&self.prefix))
    }
}

/// Log-probabilities of the next level after each prefix (all of equal length).
fn next_level(model: &GenRecModel, items: &ItemEmbeddings, state: &PromptState, prefixes: &[Vec<u16>]) -> Result<Vec<Vec<f64>>> {
    let level = prefixes.first().map_or(0, Vec::len) + 1;
    if prefixes.len() == 1 && prefixes[0].is_empty() {
        return Ok(vec![model.level_log_probs(&state.last.view(), 1)?]);
    }
    let branches = prefixes
        .iter()
        .map(|p| model.embed_rows(items, &model.prefix_rows(p)?))
        .collect::<Result<Vec<Array2<f64>>>>()?;
    let ys = model.transformer.forward_branches(&state.cache, &branches)?;
    ys.iter()
        .map(|y| model.level_log_probs(&y.row(y.nrows() - 1), level))
        .collect()
}

/// Top-`k` SID prefixes of length ℓ (the model's prefix length) under the
/// level-masked head, sorted by φ descending, ties by prefix.
pub fn beam_search(model: &GenRecModel, items: &ItemEmbeddings, state: &PromptState, k: usize, mode: BeamMode) -> Result<BeamOutput> {
    let l = model.prefix_len();
    if k == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if l == 0 {
        return Err(Error::invalid("beam search needs a SID prefix length of at least 1"));
    }
    let out = match mode {
        BeamMode::Exact => best_first(model, items, state, k, l)?,
        BeamMode::Standard => level_beam(model, items, state, k, l)?,
    };
    let truncated = out.len() < k;
    Ok(BeamOutput {
        candidates: out
            .into_iter()
            .map(|(phi, prefix)| BeamCandidate { prefix, phi, h: None })
            .collect(),
        truncated,
    })
}

fn best_first(model: &GenRecModel, items: &ItemEmbeddings, state: &PromptState, k: usize, l: usize) -> Result<Vec<(f64, Vec<u16>)>> {
    // Children never score above their parent (log-probabilities are ≤ 0),
    // so complete prefixes leave the heap in exact rank order.
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        phi: 0.0,
        prefix: Vec::new(),
        complete: false,
    });
    let mut out = Vec::with_capacity(k);
    while let Some(node) = heap.pop() {
        if node.complete {
            out.push((node.phi, node.prefix));
            if out.len() == k {
                break;
            }
            continue;
        }
        let lp = next_level(model, items, state, std::slice::from_ref(&node.prefix))?.remove(0);
        for (c, v) in lp.into_iter().enumerate() {
            let mut prefix = node.prefix.clone();
            prefix.push(c as u16);
            heap.push(Node {
                phi: node.phi + v,
                complete: prefix.len() == l,
                prefix,
            });
        }
    }
    Ok(out)
}

fn level_beam(model: &GenRecModel, items: &ItemEmbeddings, state: &PromptState, k: usize, l: usize) -> Result<Vec<(f64, Vec<u16>)>> {
    let mut beams: Vec<(f64, Vec<u16>)> = vec![(0.0, Vec::new())];
    for _ in 0..l {
        let prefixes: Vec<Vec<u16>> = beams.iter().map(|b| b.1.clone()).collect();
        let lps = next_level(model, items, state, &prefixes)?;
        let mut next = Vec::with_capacity(beams.len() * model.codebook_size());
        for ((phi, prefix), lp) in beams.iter().zip(lps) {
            for (c, v) in lp.into_iter().enumerate() {
                let mut p = prefix.clone();
                p.push(c as u16);
                next.push((phi + v, p));
            }
        }
        next.sort_by(rank_order);
        next.truncate(k);
        beams = next;
    }
    Ok(beams)
}

/// `h_k`: query vector at `QUERY` after each prefix, one batched pass over
/// the shared prompt cache.
pub fn prefix_hidden_states(model: &GenRecModel, items: &ItemEmbeddings, state: &PromptState, prefixes: &[Vec<u16>]) -> Result<Vec<Vec<f64>>> {
    let branches = prefixes
        .iter()
        .map(|p| {
            let mut rows = model.prefix_rows(p)?;
            rows.push(GenRecModel::query_row());
            model.embed_rows(items, &rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let ys = model.transformer.forward_branches(&state.cache, &branches)?;
    Ok(ys.iter().map(|y| model.query_vector(&y.row(y.nrows() - 1))).collect())
}

pub const SIGMA_FLOOR: f64 = 1e-6;

/// `softmax(cos · σ / τ)` over a bucket, σ the population standard deviation
/// of the beam scores (floored at `floor` when given).
pub fn apf_id_distribution(cosines: &[f64], beam_scores: &[f64], tau: f64, floor: Option<f64>) -> Result<Vec<f64>> {
    if cosines.is_empty() || beam_scores.is_empty() {
        return Err(Error::Empty("APF input".into()));
    }
    let sigma = apf_sigma(beam_scores, floor);
    scaled_softmax(cosines, sigma, tau)
}

pub fn apf_sigma(beam_scores: &[f64], floor: Option<f64>) -> f64 {
    let s = population_std(beam_scores);
    floor.map_or(s, |f| s.max(f))
}

fn scaled_softmax(cosines: &[f64], scale: f64, tau: f64) -> Result<Vec<f64>> {
    let x: Vec<f64> = cosines.iter().map(|c| c * scale).collect();
    softmax(&x, tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Beams K.
    pub beams: usize,
    /// Items kept per beam M.
    pub per_beam: usize,
    /// Returned items N.
    pub top_n: usize,
    pub tau: f64,
    /// Scale in-bucket cosines by σ of the beam scores; off gives plain
    /// `softmax(cos/τ)`.
    pub apf: bool,
    pub sigma_floor: Option<f64>,
    /// Divide `e^φ` by its sum over the surviving beams.
    pub renormalize_beams: bool,
    pub ann: AnnMode,
    pub beam_mode: BeamMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beams: 20,
            per_beam: 10,
            top_n: 20,
            tau: 0.05,
            apf: true,
            sigma_floor: Some(SIGMA_FLOOR),
            renormalize_beams: false,
            ann: AnnMode::Exact,
            beam_mode: BeamMode::Exact,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: ItemId,
    pub prob: f64,
    /// Index into [`GenerationResult::beams`].
    pub beam: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenStatus {
    Ok,
    AllBucketsEmpty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub items: Vec<ScoredItem>,
    pub beams: Vec<BeamCandidate>,
    pub sigma: f64,
    /// Candidates scored per beam (after top-M truncation).
    pub per_beam_counts: Vec<usize>,
    pub beams_truncated: bool,
    pub status: GenStatus,
}

impl GenerationResult {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|s| s.item).collect()
    }
}

/// Probability-descending, item id ascending on ties.
fn sort_scored(items: &mut [ScoredItem]) {
    items.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.item.cmp(&b.item)));
}

/// Steps 2 and 3 for given beams: query vectors, bucket retrieval, APF and
/// the global merge.
pub fn fuse_beams(
    model: &GenRecModel,
    items: &ItemEmbeddings,
    index: &PrefixIndex,
    state: &PromptState,
    beams: BeamOutput,
    config: &GenConfig,
) -> Result<GenerationResult> {
    if config.per_beam == 0 || config.top_n == 0 {
        return Err(Error::invalid("M and N must be at least 1"));
    }
    let mut cands = beams.candidates;
    let prefixes: Vec<Vec<u16>> = cands.iter().map(|c| c.prefix.clone()).collect();
    let hs = prefix_hidden_states(model, items, state, &prefixes)?;
    let phis: Vec<f64> = cands.iter().map(|c| c.phi).collect();
    let sigma = if config.apf { apf_sigma(&phis, config.sigma_floor) } else { 1.0 };
    let mass: f64 = if config.renormalize_beams { phis.iter().map(|p| p.exp()).sum() } else { 1.0 };
    let mut scored = Vec::new();
    let mut counts = Vec::with_capacity(cands.len());
    for (k, (c, h)) in cands.iter_mut().zip(hs).enumerate() {
        let Some(cos) = index.bucket_cosines(&c.prefix, &h)? else {
            counts.push(0);
            c.h = Some(h);
            continue;
        };
        let probs = scaled_softmax(&cos.iter().map(|x| x.1).collect::<Vec<_>>(), sigma, config.tau)?;
        let weight = c.phi.exp() / mass;
        let kept: Vec<(usize, ItemId)> = match config.ann {
            AnnMode::Exact => {
                let mut order: Vec<usize> = (0..cos.len()).collect();
                order.sort_by(|&a, &b| cos[b].1.total_cmp(&cos[a].1).then(cos[a].0.cmp(&cos[b].0)));
                order.truncate(config.per_beam);
                order.into_iter().map(|i| (i, cos[i].0)).collect()
            }
            AnnMode::Approx => {
                let hits = index.ann_query(&c.prefix, &h, config.per_beam, AnnMode::Approx)?;
                hits.hits()
                    .iter()
                    .map(|&(id, _)| (cos.binary_search_by_key(&id, |x| x.0).expect("hit from this bucket"), id))
                    .collect()
            }
        };
        counts.push(kept.len());
        scored.extend(kept.into_iter().map(|(i, item)| ScoredItem {
            item,
            prob: weight * probs[i],
            beam: k,
        }));
        c.h = Some(h);
    }
    let status = if scored.is_empty() { GenStatus::AllBucketsEmpty } else { GenStatus::Ok };
    sort_scored(&mut scored);
    scored.truncate(config.top_n);
    Ok(GenerationResult {
        items: scored,
        beams: cands,
        sigma,
        per_beam_counts: counts,
        beams_truncated: beams.truncated,
        status,
    })
}

/// Full pipeline from a prompt state.
pub fn generate(model: &GenRecModel, items: &ItemEmbeddings, index: &PrefixIndex, state: &PromptState, config: &GenConfig) -> Result<GenerationResult> {
    let beams = beam_search(model, items, state, config.beams, config.beam_mode)?;
    fuse_beams(model, items, index, state, beams, config)
}

/// ID-only retrieval (ℓ = 0): one query vector from `QUERY` right after the
/// prompt, scored against the whole catalog. `normalized` holds unit-norm
/// fused embeddings by item id.
pub fn generate_flat(model: &GenRecModel, items: &ItemEmbeddings, normalized: &Array2<f64>, state: &PromptState, config: &GenConfig) -> Result<GenerationResult> {
    let h = prefix_hidden_states(model, items, state, &[Vec::new()])?.remove(0);
    let n = crate::numeric::norm(&h);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos: Vec<f64> = normalized.dot(&Array1::from(h.clone())).iter().map(|c| c / n).collect();
    let probs = softmax(&cos, config.tau)?;
    let mut scored: Vec<ScoredItem> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| ScoredItem {
            item: i as ItemId,
            prob: p,
            beam: 0,
        })
        .collect();
    sort_scored(&mut scored);
    scored.truncate(config.top_n);
    Ok(GenerationResult {
        items: scored,
        beams: vec![BeamCandidate {
            prefix: Vec::new(),
            phi: 0.0,
            h: Some(h),
        }],
        sigma: 0.0,
        per_beam_counts: vec![normalized.nrows()],
        beams_truncated: false,
        status: GenStatus::Ok,
    })
}

/// `rank<TAB>item<TAB>prob<TAB>prefix<TAB>phi` lines plus a `#` footer.
pub fn format_result(result: &GenerationResult, config: &GenConfig) -> String {
    let mut out = String::new();
    for (r, s) in result.items.iter().enumerate() {
        let b = &result.beams[s.beam];
        let prefix: Vec<String> = b.prefix.iter().map(u16::to_string).collect();
        let _ = writeln!(out, "{}\t{}\t{:e}\t{}\t{:e}", r + 1, s.item, s.prob, prefix.join(","), b.phi);
    }
    let _ = writeln!(
        out,
        "# sigma={:e} K={} M={} N={} tau={} status={:?} beams_truncated={}",
        result.sigma, config.beams, config.per_beam, config.top_n, config.tau, result.status, result.beams_truncated
    );
    out
}
