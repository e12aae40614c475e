//! Hybrid item tokenization: SID prefix tokens plus one item row built from
//! the item's pretrained embeddings, and the sequence-model vocabulary.

mod fusion;

pub use fusion::{fuse_item_embedding, FusionCache, FusionMlp, ItemEmbeddings, FUSED_DIM};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::WorldConfig;
use crate::numeric::nn::Linear;
use crate::quantizer::SemanticId;
use crate::ItemId;

/// The seven instruction tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    JustForYou,
    Query,
    Category,
    Longtail,
    Discover,
    Season,
    Holiday,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::JustForYou,
        Task::Query,
        Task::Category,
        Task::Longtail,
        Task::Discover,
        Task::Season,
        Task::Holiday,
    ];

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::JustForYou => "just_for_you",
            Task::Query => "query",
            Task::Category => "category",
            Task::Longtail => "longtail",
            Task::Discover => "discover",
            Task::Season => "season",
            Task::Holiday => "holiday",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::parse("task", format!("unknown task {s:?}")))
    }

    /// Constraint kind carried by the instruction, if any.
    pub fn constraint_kind(self) -> Option<ConstraintKind> {
        match self {
            Task::Query => Some(ConstraintKind::QueryCluster),
            Task::Category => Some(ConstraintKind::Category),
            Task::Season => Some(ConstraintKind::Season),
            Task::Holiday => Some(ConstraintKind::Holiday),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// Search-intent cluster (the subcategory).
    QueryCluster,
    /// Leaf category (the style).
    Category,
    Season,
    Holiday,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 4] = [
        ConstraintKind::QueryCluster,
        ConstraintKind::Category,
        ConstraintKind::Season,
        ConstraintKind::Holiday,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::QueryCluster => "query",
            ConstraintKind::Category => "category",
            ConstraintKind::Season => "season",
            ConstraintKind::Holiday => "holiday",
        }
    }
}

/// Role of a sequence position; each role has its own learned type embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Special,
    Profile,
    HistorySid,
    HistoryItem,
    Task,
    Constraint,
    TargetSid,
    Query,
}

impl Role {
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }
}

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const QUERY: TokenId = 3;
const N_SPECIAL: u32 = 4;

/// Sizes of the symbolic token groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_age_bands: u32,
    pub n_genders: u32,
    pub n_regions: u32,
    pub n_query_clusters: u32,
    pub n_categories: u32,
    pub n_seasons: u32,
    pub n_holidays: u32,
    pub levels: u32,
    pub codebook_size: u32,
}

impl VocabLayout {
    pub fn from_world(c: &WorldConfig, levels: usize, codebook_size: usize) -> Self {
        Self {
            n_age_bands: c.n_age_bands as u32,
            n_genders: c.n_genders as u32,
            n_regions: c.n_regions as u32,
            n_query_clusters: c.n_subs() as u32,
            n_categories: c.n_styles() as u32,
            n_seasons: crate::evaluation::world::N_SEASONS as u32,
            n_holidays: c.n_holidays as u32,
            levels: levels as u32,
            codebook_size: codebook_size as u32,
        }
    }
}

/// Token id layout: specials, tasks, profile, constraints, then SID tokens
/// `sid_offset + (level - 1) * K + code`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub layout: VocabLayout,
    task_offset: u32,
    age_offset: u32,
    gender_offset: u32,
    region_offset: u32,
    constraint_offsets: [u32; 4],
    sid_offset: u32,
    size: u32,
}

impl Vocabulary {
    pub fn new(layout: VocabLayout) -> Result<Self> {
        if layout.levels == 0 || layout.codebook_size == 0 {
            return Err(Error::invalid("vocabulary needs at least one SID level and code"));
        }
        let mut next = N_SPECIAL;
        let mut take = |n: u32| {
            let o = next;
            next += n;
            o
        };
        let task_offset = take(Task::ALL.len() as u32);
        let age_offset = take(layout.n_age_bands);
        let gender_offset = take(layout.n_genders);
        let region_offset = take(layout.n_regions);
        let constraint_offsets = [
            take(layout.n_query_clusters),
            take(layout.n_categories),
            take(layout.n_seasons),
            take(layout.n_holidays),
        ];
        let sid_offset = take(layout.levels * layout.codebook_size);
        Ok(Self {
            layout,
            task_offset,
            age_offset,
            gender_offset,
            region_offset,
            constraint_offsets,
            sid_offset,
            size: next,
        })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn levels(&self) -> usize {
        self.layout.levels as usize
    }

    pub fn codebook_size(&self) -> usize {
        self.layout.codebook_size as usize
    }

    pub fn sid_offset(&self) -> TokenId {
        self.sid_offset
    }

    pub fn task(&self, t: Task) -> TokenId {
        self.task_offset + t.index() as u32
    }

    fn bounded(offset: u32, n: u32, v: u32, what: &str) -> Result<TokenId> {
        if v >= n {
            return Err(Error::invalid(format!("{what} {v} out of range (< {n})")));
        }
        Ok(offset + v)
    }

    pub fn age(&self, a: u8) -> Result<TokenId> {
        Self::bounded(self.age_offset, self.layout.n_age_bands, a as u32, "age band")
    }

    pub fn gender(&self, g: u8) -> Result<TokenId> {
        Self::bounded(self.gender_offset, self.layout.n_genders, g as u32, "gender")
    }

    pub fn region(&self, r: u8) -> Result<TokenId> {
        Self::bounded(self.region_offset, self.layout.n_regions, r as u32, "region")
    }

    fn constraint_count(&self, kind: ConstraintKind) -> u32 {
        match kind {
            ConstraintKind::QueryCluster => self.layout.n_query_clusters,
            ConstraintKind::Category => self.layout.n_categories,
            ConstraintKind::Season => self.layout.n_seasons,
            ConstraintKind::Holiday => self.layout.n_holidays,
        }
    }

    pub fn constraint(&self, kind: ConstraintKind, value: u32) -> Result<TokenId> {
        let i = ConstraintKind::ALL.iter().position(|&k| k == kind).unwrap();
        Self::bounded(self.constraint_offsets[i], self.constraint_count(kind), value, kind.as_str())
    }

    /// Inverse of [`Vocabulary::constraint`].
    pub fn decode_constraint(&self, tok: TokenId) -> Option<(ConstraintKind, u32)> {
        ConstraintKind::ALL.iter().enumerate().find_map(|(i, &k)| {
            let o = self.constraint_offsets[i];
            (tok >= o && tok < o + self.constraint_count(k)).then(|| (k, tok - o))
        })
    }

    /// SID token for a 1-based level.
    pub fn sid(&self, level: usize, code: u16) -> Result<TokenId> {
        if level == 0 || level > self.levels() {
            return Err(Error::invalid(format!("SID level {level} outside 1..={}", self.levels())));
        }
        if code as u32 >= self.layout.codebook_size {
            return Err(Error::CodeOutOfRange {
                level,
                code: code as usize,
                size: self.codebook_size(),
            });
        }
        Ok(self.sid_offset + (level as u32 - 1) * self.layout.codebook_size + code as u32)
    }

    /// `(level, code)` of a SID token.
    pub fn decode_sid(&self, tok: TokenId) -> Option<(usize, u16)> {
        let rel = tok.checked_sub(self.sid_offset)?;
        if rel >= self.layout.levels * self.layout.codebook_size {
            return None;
        }
        Some(((rel / self.layout.codebook_size) as usize + 1, (rel % self.layout.codebook_size) as u16))
    }

    /// Role tag and readable name for the manifest.
    pub fn describe(&self, tok: TokenId) -> Option<(&'static str, String)> {
        if tok >= self.size {
            return None;
        }
        let r = |o: u32| tok - o;
        Some(match tok {
            PAD => ("special", "PAD".into()),
            BOS => ("special", "BOS".into()),
            EOS => ("special", "EOS".into()),
            QUERY => ("special", "QUERY".into()),
            t if t < self.age_offset => ("task", Task::ALL[r(self.task_offset) as usize].as_str().into()),
            t if t < self.gender_offset => ("profile", format!("age_{}", r(self.age_offset))),
            t if t < self.region_offset => ("profile", format!("gender_{}", r(self.gender_offset))),
            t if t < self.constraint_offsets[0] => ("profile", format!("region_{}", r(self.region_offset))),
            t if t < self.sid_offset => {
                let (k, v) = self.decode_constraint(t)?;
                ("constraint", format!("{}_{v}", k.as_str()))
            }
            t => {
                let (level, code) = self.decode_sid(t)?;
                ("sid", format!("L{level}_{code}"))
            }
        })
    }

    /// `id<TAB>role<TAB>name` per token.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for t in 0..self.size {
            let (role, name) = self.describe(t).expect("in range");
            out.push_str(&format!("{t}\t{role}\t{name}\n"));
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.manifest().as_bytes())?;
        Ok(())
    }

    /// Rebuilds the vocabulary from a manifest and checks it line by line.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut counts = std::collections::BTreeMap::<String, u32>::new();
        let mut max_level = 0u32;
        let mut max_code = 0u32;
        for line in text.lines() {
            let mut parts = line.split('\t');
            let (_, role, name) = (parts.next(), parts.next(), parts.next().unwrap_or(""));
            let fmt_err = || Error::Format {
                path: path.to_path_buf(),
                message: format!("bad manifest line {line:?}"),
            };
            match role {
                Some("profile") | Some("constraint") => {
                    let (group, _) = name.rsplit_once('_').ok_or_else(fmt_err)?;
                    *counts.entry(group.to_string()).or_default() += 1;
                }
                Some("sid") => {
                    let (l, c) = name.trim_start_matches('L').split_once('_').ok_or_else(fmt_err)?;
                    max_level = max_level.max(l.parse().map_err(|_| fmt_err())?);
                    max_code = max_code.max(c.parse().map_err(|_| fmt_err())?);
                }
                Some("special") | Some("task") => {}
                _ => return Err(fmt_err()),
            }
        }
        let n = |k: &str| counts.get(k).copied().unwrap_or(0);
        let vocab = Vocabulary::new(VocabLayout {
            n_age_bands: n("age"),
            n_genders: n("gender"),
            n_regions: n("region"),
            n_query_clusters: n("query"),
            n_categories: n("category"),
            n_seasons: n("season"),
            n_holidays: n("holiday"),
            levels: max_level,
            codebook_size: max_code + 1,
        })?;
        if vocab.manifest() != text {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "manifest does not match the canonical layout".into(),
            });
        }
        Ok(vocab)
    }

    /// Hash of the manifest, recorded in checkpoints.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.manifest().as_bytes()))
    }
}

/// `{c_1, ..., c_l, id}`: SID prefix tokens plus the item identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HybridTokenSeq {
    pub sid_prefix: Vec<TokenId>,
    pub item: ItemId,
}

/// Semantic IDs indexed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct SidTable {
    sids: Vec<Option<SemanticId>>,
}

impl SidTable {
    pub fn new(n_items: usize, entries: &[(ItemId, SemanticId)]) -> Result<Self> {
        let mut sids = vec![None; n_items];
        for (id, sid) in entries {
            let slot = sids.get_mut(*id as usize).ok_or(Error::UnknownItem(*id))?;
            *slot = Some(sid.clone());
        }
        Ok(Self { sids })
    }

    pub fn len(&self) -> usize {
        self.sids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sids.is_empty()
    }

    pub fn get(&self, item: ItemId) -> Result<&SemanticId> {
        match self.sids.get(item as usize) {
            Some(Some(s)) => Ok(s),
            Some(None) => Err(Error::MissingSid(item)),
            None => Err(Error::UnknownItem(item)),
        }
    }

    pub fn entries(&self) -> Vec<(ItemId, SemanticId)> {
        self.sids
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.clone().map(|s| (i as ItemId, s)))
            .collect()
    }
}

pub fn tokenize_item(vocab: &Vocabulary, sids: &SidTable, item: ItemId, prefix_len: usize) -> Result<HybridTokenSeq> {
    let sid = sids.get(item)?;
    if prefix_len == 0 || prefix_len > sid.levels() || prefix_len > vocab.levels() {
        return Err(Error::invalid(format!("prefix length {prefix_len} outside 1..={}", sid.levels())));
    }
    let sid_prefix = sid
        .prefix(prefix_len)
        .iter()
        .enumerate()
        .map(|(l, &c)| vocab.sid(l + 1, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridTokenSeq { sid_prefix, item })
}

/// Recovers `(codes, item)` from a token sequence.
pub fn detokenize(vocab: &Vocabulary, seq: &HybridTokenSeq) -> Result<(Vec<u16>, ItemId)> {
    let mut codes = Vec::with_capacity(seq.sid_prefix.len());
    for (pos, &t) in seq.sid_prefix.iter().enumerate() {
        match vocab.decode_sid(t) {
            Some((level, code)) if level == pos + 1 => codes.push(code),
            _ => return Err(Error::invalid(format!("token {t} is not a level-{} SID token", pos + 1))),
        }
    }
    Ok((codes, seq.item))
}

/// `[E(c_1), ..., E(c_l), UpProj(fused(item))]`, one row per entry.
pub fn embed_item_sequence(
    fusion: &FusionMlp,
    up_proj: &Linear,
    items: &ItemEmbeddings,
    seq: &HybridTokenSeq,
    token_table: &Array2<f64>,
) -> Result<Array2<f64>> {
    let hidden = token_table.ncols();
    if up_proj.output_dim() != hidden {
        return Err(Error::ShapeMismatch {
            expected: format!("up-projection to {hidden}"),
            actual: up_proj.output_dim().to_string(),
        });
    }
    let fused = fusion.fuse_items(items, &[seq.item])?;
    let up = up_proj.forward(&fused.view());
    let mut out = Array2::zeros((seq.sid_prefix.len() + 1, hidden));
    for (r, &t) in seq.sid_prefix.iter().enumerate() {
        if t as usize >= token_table.nrows() {
            return Err(Error::invalid(format!("token {t} outside the token table")));
        }
        out.row_mut(r).assign(&token_table.row(t as usize));
    }
    out.row_mut(seq.sid_prefix.len()).assign(&up.row(0));
    Ok(out)
}
