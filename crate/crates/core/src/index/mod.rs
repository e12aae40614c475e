//! SID-prefix item buckets with exact and cluster-routed cosine retrieval,
//! and the user-to-items snapshot store used at serve time.

mod u2i;

pub use u2i::{U2iEntry, U2iIndex};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numeric::tensor_io::{read_matrix, write_matrix};
use crate::quantizer::kmeans::kmeans_with_mean;
use crate::quantizer::SemanticId;
use crate::ItemId;

/// Item ids grouped by SID prefix; buckets and members sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixBuckets {
    pub prefix_len: usize,
    buckets: BTreeMap<Vec<u16>, Vec<ItemId>>,
    item_prefix: BTreeMap<ItemId, Vec<u16>>,
}

impl PrefixBuckets {
    pub fn new(sids: &[(ItemId, SemanticId)], prefix_len: usize) -> Result<Self> {
        if prefix_len == 0 {
            return Err(Error::invalid("prefix length must be at least 1"));
        }
        let mut buckets: BTreeMap<Vec<u16>, Vec<ItemId>> = BTreeMap::new();
        let mut item_prefix = BTreeMap::new();
        for (id, sid) in sids {
            if sid.levels() < prefix_len {
                return Err(Error::invalid(format!("item {id}: SID shorter than prefix length {prefix_len}")));
            }
            let p = sid.prefix(prefix_len).to_vec();
            if item_prefix.insert(*id, p.clone()).is_some() {
                return Err(Error::invalid(format!("item {id} listed twice")));
            }
            buckets.entry(p).or_default().push(*id);
        }
        for ids in buckets.values_mut() {
            ids.sort_unstable();
        }
        Ok(Self {
            prefix_len,
            buckets,
            item_prefix,
        })
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn bucket(&self, prefix: &[u16]) -> &[ItemId] {
        self.buckets.get(prefix).map_or(&[], Vec::as_slice)
    }

    pub fn prefix_of(&self, item: ItemId) -> Result<&[u16]> {
        self.item_prefix.get(&item).map(Vec::as_slice).ok_or(Error::MissingSid(item))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u16>, &Vec<ItemId>)> {
        self.buckets.iter()
    }

    pub fn n_items(&self) -> usize {
        self.item_prefix.len()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.item_prefix.keys().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnMode {
    Exact,
    Approx,
}

impl AnnMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(AnnMode::Exact),
            "approx" => Ok(AnnMode::Approx),
            other => Err(Error::parse("ann mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Buckets at least this large get k-means cells for approximate search.
    pub min_cells_bucket: usize,
    /// Cells per bucket is `ceil(sqrt(size) * cells_scale)`.
    pub cells_scale: f64,
    /// Fraction of cells probed per query (at least `min_probe`).
    pub probe_fraction: f64,
    pub min_probe: usize,
    pub kmeans_iterations: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            min_cells_bucket: 256,
            cells_scale: 1.0,
            probe_fraction: 0.1,
            min_probe: 4,
            kmeans_iterations: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Cells {
    /// Unit-normalised centroids.
    centroids: Array2<f64>,
    /// Row indices into the bucket, ascending per cell.
    members: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub prefix: Vec<u16>,
    pub ids: Vec<ItemId>,
    pub embeddings: Array2<f64>,
    pub normalized: Array2<f64>,
    cells: Option<Cells>,
}

/// Outcome of a bucket lookup; an unknown prefix is not an error.
#[derive(Clone, Debug, PartialEq)]
pub enum AnnResult {
    Hits(Vec<(ItemId, f64)>),
    EmptyBucket,
}

impl AnnResult {
    pub fn hits(&self) -> &[(ItemId, f64)] {
        match self {
            AnnResult::Hits(h) => h,
            AnnResult::EmptyBucket => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixIndex {
    pub prefix_len: usize,
    pub config: IndexConfig,
    buckets: Vec<Bucket>,
    lookup: BTreeMap<Vec<u16>, usize>,
}

fn normalize_rows(m: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid(format!("row {i} cannot be normalised (norm {n})")));
        }
        row /= n;
    }
    Ok(out)
}

/// Descending score, ascending id.
fn rank(hits: &mut [(ItemId, f64)]) {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

fn top_m(mut hits: Vec<(ItemId, f64)>, m: usize) -> Vec<(ItemId, f64)> {
    if hits.len() > m {
        hits.select_nth_unstable_by(m - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(m);
    }
    rank(&mut hits);
    hits
}

impl PrefixIndex {
    /// Buckets the catalog by SID prefix. `fused` rows are indexed by item id.
    pub fn build(buckets: &PrefixBuckets, fused: &Array2<f64>, config: &IndexConfig) -> Result<Self> {
        let mut out = Vec::with_capacity(buckets.len());
        let mut lookup = BTreeMap::new();
        for (b, (prefix, ids)) in buckets.iter().enumerate() {
            let mut emb = Array2::zeros((ids.len(), fused.ncols()));
            for (r, &id) in ids.iter().enumerate() {
                if id as usize >= fused.nrows() {
                    return Err(Error::MissingEmbedding(id));
                }
                emb.row_mut(r).assign(&fused.row(id as usize));
            }
            let normalized = normalize_rows(&emb)?;
            let cells = if ids.len() >= config.min_cells_bucket.max(2) {
                Some(build_cells(&normalized, config, b as u64))
            } else {
                None
            };
            lookup.insert(prefix.clone(), out.len());
            out.push(Bucket {
                prefix: prefix.clone(),
                ids: ids.clone(),
                embeddings: emb,
                normalized,
                cells,
            });
        }
        Ok(Self {
            prefix_len: buckets.prefix_len,
            config: config.clone(),
            buckets: out,
            lookup,
        })
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn bucket(&self, prefix: &[u16]) -> Option<&Bucket> {
        self.lookup.get(prefix).map(|&i| &self.buckets[i])
    }

    pub fn n_items(&self) -> usize {
        self.buckets.iter().map(|b| b.ids.len()).sum()
    }

    /// Cosine of `h` against every member of the bucket, in bucket order.
    pub fn bucket_cosines(&self, prefix: &[u16], h: &[f64]) -> Result<Option<Vec<(ItemId, f64)>>> {
        let Some(b) = self.bucket(prefix) else {
            return Ok(None);
        };
        let q = unit_query(h, b.normalized.ncols())?;
        let scores = b.normalized.dot(&q);
        Ok(Some(b.ids.iter().copied().zip(scores.iter().copied()).collect()))
    }

    /// Top-`m` members of the bucket by cosine with `h`.
    pub fn ann_query(&self, prefix: &[u16], h: &[f64], m: usize, mode: AnnMode) -> Result<AnnResult> {
        if m == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        let Some(b) = self.bucket(prefix) else {
            return Ok(AnnResult::EmptyBucket);
        };
        let q = unit_query(h, b.normalized.ncols())?;
        let hits = match (&b.cells, mode) {
            (Some(cells), AnnMode::Approx) => {
                let n_cells = cells.centroids.nrows();
                let probe = ((n_cells as f64 * self.config.probe_fraction).ceil() as usize)
                    .max(self.config.min_probe)
                    .min(n_cells);
                let mut cs: Vec<(usize, f64)> = cells.centroids.dot(&q).iter().copied().enumerate().collect();
                cs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut hits = Vec::new();
                for &(c, _) in cs.iter().take(probe) {
                    for &r in &cells.members[c] {
                        hits.push((b.ids[r], b.normalized.row(r).dot(&q)));
                    }
                }
                hits
            }
            _ => b.ids.iter().copied().zip(b.normalized.dot(&q).iter().copied()).collect(),
        };
        Ok(AnnResult::Hits(top_m(hits, m)))
    }

    /// Directory layout: `manifest.txt`, `bucket_<n>.sgt`, `bucket_<n>.ids`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let c = &self.config;
        let mut manifest = format!(
            "prefix_len={}\nbuckets={}\nmin_cells_bucket={}\ncells_scale={}\nprobe_fraction={}\nmin_probe={}\nkmeans_iterations={}\nseed={}\n",
            self.prefix_len,
            self.buckets.len(),
            c.min_cells_bucket,
            c.cells_scale,
            c.probe_fraction,
            c.min_probe,
            c.kmeans_iterations,
            c.seed
        );
        for (i, b) in self.buckets.iter().enumerate() {
            let prefix: Vec<String> = b.prefix.iter().map(u16::to_string).collect();
            manifest.push_str(&format!("bucket.{i}={}\n", prefix.join(",")));
            write_matrix(&dir.join(format!("bucket_{i}.sgt")), &b.embeddings)?;
            let ids: String = b.ids.iter().map(|id| format!("{id}\n")).collect();
            fs::write(dir.join(format!("bucket_{i}.ids")), ids)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Loads a saved index; cells are rebuilt deterministically from the config.
    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("manifest.txt"))?;
        let prefix_len: usize = kv.get_parsed("prefix_len")?;
        let n: usize = kv.get_parsed("buckets")?;
        let config = IndexConfig {
            min_cells_bucket: kv.get_parsed("min_cells_bucket")?,
            cells_scale: kv.get_parsed("cells_scale")?,
            probe_fraction: kv.get_parsed("probe_fraction")?,
            min_probe: kv.get_parsed("min_probe")?,
            kmeans_iterations: kv.get_parsed("kmeans_iterations")?,
            seed: kv.get_parsed("seed")?,
        };
        let mut sids = Vec::new();
        let mut rows: Vec<(ItemId, Array1<f64>)> = Vec::new();
        for i in 0..n {
            let prefix: SemanticId = kv.get_parsed::<String>(&format!("bucket.{i}"))?.parse()?;
            let emb = read_matrix(&dir.join(format!("bucket_{i}.sgt")))?;
            let ids = fs::read_to_string(dir.join(format!("bucket_{i}.ids")))?
                .lines()
                .map(|l| l.parse::<ItemId>().map_err(|e| Error::parse("bucket ids", e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if ids.len() != emb.nrows() {
                return Err(Error::Format {
                    path: dir.to_path_buf(),
                    message: format!("bucket {i}: {} ids for {} rows", ids.len(), emb.nrows()),
                });
            }
            for (r, &id) in ids.iter().enumerate() {
                sids.push((id, prefix.clone()));
                rows.push((id, emb.row(r).to_owned()));
            }
        }
        let n_rows = rows.iter().map(|(id, _)| *id as usize + 1).max().unwrap_or(0);
        let d = rows.first().map_or(0, |(_, r)| r.len());
        let mut fused = Array2::from_elem((n_rows, d), 0.0);
        for (id, r) in rows {
            fused.row_mut(id as usize).assign(&r);
        }
        let buckets = PrefixBuckets::new(&sids, prefix_len)?;
        Self::build(&buckets, &fused, &config)
    }
}

fn unit_query(h: &[f64], dim: usize) -> Result<Array1<f64>> {
    if h.len() != dim {
        return Err(Error::ShapeMismatch {
            expected: format!("query dim {dim}"),
            actual: h.len().to_string(),
        });
    }
    let q = Array1::from(crate::numeric::normalized(h)?);
    Ok(q)
}

fn build_cells(normalized: &Array2<f64>, config: &IndexConfig, bucket: u64) -> Cells {
    let n = normalized.nrows();
    let k = ((n as f64).sqrt() * config.cells_scale).ceil().clamp(1.0, n as f64) as usize;
    let mut rng = crate::numeric::rng::indexed_rng(config.seed, "index/cells", bucket);
    let centroids = kmeans_with_mean(&normalized.view(), k, config.kmeans_iterations, &mut rng);
    let mut members = vec![Vec::new(); k];
    // Route by the same inner product used at query time.
    let unit = normalize_rows(&centroids).unwrap_or_else(|_| centroids.clone());
    for (r, row) in normalized.axis_iter(Axis(0)).enumerate() {
        let scores = unit.dot(&row);
        let best = crate::numeric::argmax(scores.as_slice().unwrap());
        members[best].push(r);
    }
    Cells {
        centroids: unit,
        members,
    }
}

#[cfg(test)]
mod tests;
