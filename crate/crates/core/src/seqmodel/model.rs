//! The full sequence model: token and role tables, item fusion, transformer
//! backbone, SID head and query head.
//!
//! Prompt layout: `BOS, age, gender, region`, then for every history item its
//! ℓ SID tokens followed by the item row, then the task token and optional
//! constraint token. Training appends the target's ℓ SID tokens and `QUERY`.
//! The hidden state at the last prompt position predicts level 1, the state
//! at target token `t` predicts level `t + 1`, and the state at `QUERY` gives
//! the retrieval vector.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::dataset::InstructionSample;
use super::losses::{id_infonce_loss, ntp_loss};
use super::transformer::{KvCache, Transformer, TransformerConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numeric::log_softmax;
use crate::numeric::nn::{random_matrix, slice2, slice2_mut, Linear, Parameters};
use crate::numeric::rng::stream_rng;
use crate::numeric::tensor_io::Tensor;
use crate::tokenizer::{FusionMlp, ItemEmbeddings, FUSED_DIM};
use crate::tokenizer::{tokenize_item, Role, SidTable, Task, TokenId, Vocabulary, BOS, QUERY};
use crate::ItemId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    /// SID prefix length ℓ; 0 retrieves by ID only.
    pub prefix_len: usize,
    /// Learned per-item inputs instead of pretrained embeddings.
    pub learned_items: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            prefix_len: 1,
            learned_items: false,
            seed: 0,
        }
    }
}

/// Widths of the pretrained item embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDims {
    pub n_items: usize,
    pub id: usize,
    pub text: usize,
    pub img: usize,
}

impl ItemDims {
    pub fn of(e: &ItemEmbeddings) -> Self {
        Self {
            n_items: e.n_items(),
            id: e.id.ncols(),
            text: e.text.ncols(),
            img: e.img.ncols(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputRow {
    Token(TokenId, Role),
    Item(ItemId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRecModel {
    pub config: ModelConfig,
    pub dims: ItemDims,
    pub vocab: Vocabulary,
    pub token_table: Array2<f64>,
    pub type_table: Array2<f64>,
    pub fusion: FusionMlp,
    pub up_proj: Linear,
    pub transformer: Transformer,
    /// Hidden state to SID logits, `hidden -> ℓ·K`; level `t` owns columns `[(t-1)K, tK)`.
    pub head: Linear,
    pub query_head: Linear,
}

impl Parameters for GenRecModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice2(&self.token_table));
        f(slice2(&self.type_table));
        self.fusion.visit(f);
        self.up_proj.visit(f);
        self.transformer.visit(f);
        self.head.visit(f);
        self.query_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.token_table));
        f(slice2_mut(&mut self.type_table));
        self.fusion.visit_mut(f);
        self.up_proj.visit_mut(f);
        self.transformer.visit_mut(f);
        self.head.visit_mut(f);
        self.query_head.visit_mut(f);
    }
}

/// A training sequence with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub rows: Vec<InputRow>,
    /// Position whose output predicts level 1.
    pub first_target: usize,
    pub codes: Vec<u16>,
    pub target: ItemId,
}

impl EncodedSample {
    pub fn query_position(&self) -> usize {
        self.rows.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ntp_weight: f64,
    pub id_weight: f64,
    pub tau: f64,
    /// Stop gradients into the negatives' fused embeddings.
    pub freeze_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ntp_weight: 1.0,
            id_weight: 1.0,
            tau: 0.05,
            freeze_negatives: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub ntp: f64,
    pub id: f64,
}

impl GenRecModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, dims: ItemDims) -> Result<Self> {
        config.transformer.validate()?;
        if config.prefix_len > vocab.levels() {
            return Err(Error::invalid(format!("prefix length {} exceeds {} SID levels", config.prefix_len, vocab.levels())));
        }
        let h = config.transformer.hidden;
        let mut rng = stream_rng(config.seed, "model/init");
        let mut fusion = FusionMlp::new(dims.id, dims.text, dims.img, &mut rng);
        if config.learned_items {
            fusion = fusion.with_learned_items(dims.n_items, &mut rng);
        }
        let heads = config.prefix_len * vocab.codebook_size();
        Ok(Self {
            token_table: random_matrix(vocab.size(), h, 0.1, &mut rng),
            type_table: random_matrix(Role::COUNT, h, 0.1, &mut rng),
            fusion,
            up_proj: Linear::new(FUSED_DIM, h, &mut rng),
            transformer: Transformer::new(config.transformer.clone(), &mut rng)?,
            head: Linear::new(h, heads, &mut rng),
            query_head: Linear::new(h, FUSED_DIM, &mut rng),
            dims,
            vocab,
            config,
        })
    }

    pub fn prefix_len(&self) -> usize {
        self.config.prefix_len
    }

    pub fn codebook_size(&self) -> usize {
        self.vocab.codebook_size()
    }

    pub fn hidden(&self) -> usize {
        self.config.transformer.hidden
    }

    /// Rows contributed by one history item: ℓ SID tokens, then the item.
    pub fn history_rows(&self, sids: &SidTable, item: ItemId) -> Result<Vec<InputRow>> {
        let mut rows = Vec::with_capacity(self.prefix_len() + 1);
        if self.prefix_len() > 0 {
            let seq = tokenize_item(&self.vocab, sids, item, self.prefix_len())?;
            rows.extend(seq.sid_prefix.iter().map(|&t| InputRow::Token(t, Role::HistorySid)));
        } else if item as usize >= self.dims.n_items {
            return Err(Error::UnknownItem(item));
        }
        rows.push(InputRow::Item(item));
        Ok(rows)
    }

    pub fn profile_rows(&self, profile: [u8; 3]) -> Result<Vec<InputRow>> {
        Ok(vec![
            InputRow::Token(BOS, Role::Special),
            InputRow::Token(self.vocab.age(profile[0])?, Role::Profile),
            InputRow::Token(self.vocab.gender(profile[1])?, Role::Profile),
            InputRow::Token(self.vocab.region(profile[2])?, Role::Profile),
        ])
    }

    /// BOS, profile and history: the part of the prompt shared across tasks.
    pub fn context_rows(&self, sids: &SidTable, profile: [u8; 3], history: &[ItemId]) -> Result<Vec<InputRow>> {
        let mut rows = self.profile_rows(profile)?;
        for &it in history {
            rows.extend(self.history_rows(sids, it)?);
        }
        Ok(rows)
    }

    pub fn instruction_rows(&self, task: Task, constraint: Option<u32>) -> Result<Vec<InputRow>> {
        let mut rows = vec![InputRow::Token(self.vocab.task(task), Role::Task)];
        match (task.constraint_kind(), constraint) {
            (Some(kind), Some(v)) => rows.push(InputRow::Token(self.vocab.constraint(kind, v)?, Role::Constraint)),
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid(format!("task {task} needs a constraint"))),
            (None, Some(_)) => return Err(Error::invalid(format!("task {task} takes no constraint"))),
        }
        Ok(rows)
    }

    /// Target SID tokens `c_1..c_t` as generated so far.
    pub fn prefix_rows(&self, codes: &[u16]) -> Result<Vec<InputRow>> {
        codes
            .iter()
            .enumerate()
            .map(|(t, &c)| Ok(InputRow::Token(self.vocab.sid(t + 1, c)?, Role::TargetSid)))
            .collect()
    }

    pub fn query_row() -> InputRow {
        InputRow::Token(QUERY, Role::Query)
    }

    pub fn prompt_rows(&self, sids: &SidTable, sample: &InstructionSample) -> Result<Vec<InputRow>> {
        let mut rows = self.context_rows(sids, sample.profile, &sample.history)?;
        rows.extend(self.instruction_rows(sample.task, sample.constraint)?);
        Ok(rows)
    }

    pub fn encode_sample(&self, sids: &SidTable, sample: &InstructionSample) -> Result<EncodedSample> {
        let mut rows = self.prompt_rows(sids, sample)?;
        let first_target = rows.len() - 1;
        let codes = if self.prefix_len() > 0 {
            sids.get(sample.target)?.prefix(self.prefix_len()).to_vec()
        } else if (sample.target as usize) < self.dims.n_items {
            Vec::new()
        } else {
            return Err(Error::UnknownItem(sample.target));
        };
        rows.extend(self.prefix_rows(&codes)?);
        rows.push(Self::query_row());
        let max = self.config.transformer.max_len;
        if rows.len() > max {
            return Err(Error::SequenceTooLong { len: rows.len(), max });
        }
        Ok(EncodedSample {
            rows,
            first_target,
            codes,
            target: sample.target,
        })
    }

    fn check_token(&self, t: TokenId) -> Result<()> {
        if t as usize >= self.token_table.nrows() {
            return Err(Error::invalid(format!("token {t} outside the vocabulary")));
        }
        Ok(())
    }

    fn fill_rows(&self, rows: &[InputRow], up: &Array2<f64>, slot: &HashMap<ItemId, usize>) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((rows.len(), self.hidden()));
        for (r, row) in rows.iter().enumerate() {
            let mut dst = x.row_mut(r);
            match *row {
                InputRow::Token(t, role) => {
                    self.check_token(t)?;
                    dst.assign(&self.token_table.row(t as usize));
                    dst += &self.type_table.row(role.index());
                }
                InputRow::Item(it) => {
                    dst.assign(&up.row(slot[&it]));
                    dst += &self.type_table.row(Role::HistoryItem.index());
                }
            }
        }
        Ok(x)
    }

    fn item_slots(rows: &[InputRow]) -> (Vec<ItemId>, HashMap<ItemId, usize>) {
        let mut order = Vec::new();
        let mut slot = HashMap::new();
        for row in rows {
            if let InputRow::Item(it) = *row {
                slot.entry(it).or_insert_with(|| {
                    order.push(it);
                    order.len() - 1
                });
            }
        }
        (order, slot)
    }

    /// Input embeddings, one row per entry.
    pub fn embed_rows(&self, items: &ItemEmbeddings, rows: &[InputRow]) -> Result<Array2<f64>> {
        let (order, slot) = Self::item_slots(rows);
        let up = if order.is_empty() {
            Array2::zeros((0, self.hidden()))
        } else {
            self.up_proj.forward(&self.fusion.fuse_items(items, &order)?.view())
        };
        self.fill_rows(rows, &up, &slot)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config.transformer)
    }

    /// Appends `rows` to `cache` and returns their final hidden states.
    pub fn extend(&self, items: &ItemEmbeddings, rows: &[InputRow], cache: &mut KvCache) -> Result<Array2<f64>> {
        let x = self.embed_rows(items, rows)?;
        self.transformer.forward(&x, cache)
    }

    /// Log-probabilities over the K codes of a 1-based level.
    pub fn level_log_probs(&self, hidden: &ArrayView1<f64>, level: usize) -> Result<Vec<f64>> {
        if level == 0 || level > self.prefix_len() {
            return Err(Error::invalid(format!("level {level} outside 1..={}", self.prefix_len())));
        }
        let k = self.codebook_size();
        let cols = s![(level - 1) * k..level * k];
        let logits = hidden.dot(&self.head.w.slice(s![.., (level - 1) * k..level * k])) + self.head.b.slice(cols);
        Ok(log_softmax(logits.as_slice().expect("fresh array")))
    }

    /// Retrieval vector from the hidden state at `QUERY`.
    pub fn query_vector(&self, hidden: &ArrayView1<f64>) -> Vec<f64> {
        self.query_head.forward_vec(&hidden.to_vec())
    }

    /// Fused embeddings of every item, row = item id.
    pub fn fuse_catalog(&self, items: &ItemEmbeddings) -> Result<Array2<f64>> {
        self.fusion.fuse_catalog(items)
    }

    /// Weighted SFT loss of a batch. `negatives[i]` are the ID negatives of
    /// sample `i`. With `grad` given, gradients are accumulated into it.
    pub fn batch_loss(
        &self,
        items: &ItemEmbeddings,
        batch: &[EncodedSample],
        negatives: &[Vec<ItemId>],
        config: &LossConfig,
        grad: Option<&mut GenRecModel>,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        if negatives.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} negative lists", batch.len()),
                actual: negatives.len().to_string(),
            });
        }
        let l = self.prefix_len();
        let k = self.codebook_size();
        let b = batch.len() as f64;
        let use_id = config.id_weight != 0.0;

        let all_rows: Vec<InputRow> = batch.iter().flat_map(|e| e.rows.iter().copied()).collect();
        let (mut order, mut slot) = Self::item_slots(&all_rows);
        if use_id {
            for (e, negs) in batch.iter().zip(negatives) {
                for &it in std::iter::once(&e.target).chain(negs) {
                    slot.entry(it).or_insert_with(|| {
                        order.push(it);
                        order.len() - 1
                    });
                }
            }
        }
        let (fused, fcache) = self.fusion.forward_train(items, &order)?;
        let up = self.up_proj.forward(&fused.view());
        let x = self.fill_rows(&all_rows, &up, &slot)?;
        let segments: Vec<usize> = batch.iter().map(|e| e.rows.len()).collect();
        let (y, tcache) = self.transformer.forward_train(&x, &segments)?;
        let mut starts = Vec::with_capacity(batch.len());
        let mut off = 0;
        for len in &segments {
            starts.push(off);
            off += len;
        }

        let mut dy = Array2::zeros(y.raw_dim());
        let mut out = BatchLoss::default();
        let mut grad = grad;

        // Next-token prediction over the ℓ target positions of every sample.
        if l > 0 && config.ntp_weight != 0.0 {
            let mut pos = Vec::with_capacity(batch.len() * l);
            for (e, &st) in batch.iter().zip(&starts) {
                for t in 0..l {
                    pos.push(st + e.first_target + t);
                }
            }
            let r = y.select(Axis(0), &pos);
            let logits = self.head.forward(&r.view());
            let mut dlogits = Array2::zeros(logits.raw_dim());
            for (i, e) in batch.iter().enumerate() {
                let rows = s![i * l..(i + 1) * l, ..];
                let (loss, g) = ntp_loss(&logits.slice(rows), &e.codes, k)?;
                out.ntp += loss / b;
                dlogits.slice_mut(rows).assign(&(g * (config.ntp_weight / b)));
            }
            if let Some(g) = grad.as_deref_mut() {
                let dr = self.head.backward(&r.view(), &dlogits.view(), &mut g.head);
                for (j, &p) in pos.iter().enumerate() {
                    let mut row = dy.row_mut(p);
                    row += &dr.row(j);
                }
            }
        }

        let mut dfused = Array2::zeros(fused.raw_dim());
        if use_id {
            let qpos: Vec<usize> = batch.iter().zip(&starts).map(|(e, &st)| st + e.query_position()).collect();
            let q = y.select(Axis(0), &qpos);
            let hq = self.query_head.forward(&q.view());
            let mut dhq = Array2::zeros(hq.raw_dim());
            for (i, (e, negs)) in batch.iter().zip(negatives).enumerate() {
                let nidx: Vec<usize> = negs.iter().map(|n| slot[n]).collect();
                let nm = fused.select(Axis(0), &nidx);
                let o = id_infonce_loss(&hq.row(i), &fused.row(slot[&e.target]), &nm.view(), config.tau)?;
                out.id += o.loss / b;
                let w = config.id_weight / b;
                dhq.row_mut(i).assign(&(&o.dh * w));
                dfused.row_mut(slot[&e.target]).scaled_add(w, &o.dtarget);
                if !config.freeze_negatives {
                    for (j, &ni) in nidx.iter().enumerate() {
                        dfused.row_mut(ni).scaled_add(w, &o.dnegatives.row(j));
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let dq = self.query_head.backward(&q.view(), &dhq.view(), &mut g.query_head);
                for (j, &p) in qpos.iter().enumerate() {
                    let mut row = dy.row_mut(p);
                    row += &dq.row(j);
                }
            }
        }
        out.total = config.ntp_weight * out.ntp + config.id_weight * out.id;

        let Some(g) = grad else {
            return Ok(out);
        };
        let dx = self.transformer.backward(&tcache, &dy, &mut g.transformer);
        let mut dup = Array2::zeros(up.raw_dim());
        for (r, row) in all_rows.iter().enumerate() {
            match *row {
                InputRow::Token(t, role) => {
                    let mut tr = g.token_table.row_mut(t as usize);
                    tr += &dx.row(r);
                    let mut rr = g.type_table.row_mut(role.index());
                    rr += &dx.row(r);
                }
                InputRow::Item(it) => {
                    let mut ur = dup.row_mut(slot[&it]);
                    ur += &dx.row(r);
                    let mut rr = g.type_table.row_mut(Role::HistoryItem.index());
                    rr += &dx.row(r);
                }
            }
        }
        dfused += &self.up_proj.backward(&fused.view(), &dup.view(), &mut g.up_proj);
        self.fusion.backward(items, &fcache, &dfused, &mut g.fusion);
        Ok(out)
    }

    /// NTP loss of one sample through the full model (no gradients).
    pub fn sample_ntp_loss(&self, items: &ItemEmbeddings, sids: &SidTable, sample: &InstructionSample) -> Result<f64> {
        let e = self.encode_sample(sids, sample)?;
        let cfg = LossConfig {
            id_weight: 0.0,
            ..LossConfig::default()
        };
        Ok(self.batch_loss(items, &[e], &[vec![]], &cfg, None)?.ntp)
    }

    fn manifest(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let t = &self.config.transformer;
        kv.set("hidden", t.hidden);
        kv.set("heads", t.heads);
        kv.set("layers", t.layers);
        kv.set("ffn", t.ffn);
        kv.set("max_len", t.max_len);
        kv.set("prefix_len", self.config.prefix_len);
        kv.set("levels", self.vocab.levels());
        kv.set("codebook_size", self.codebook_size());
        kv.set("learned_items", self.config.learned_items);
        kv.set("seed", self.config.seed);
        kv.set("n_items", self.dims.n_items);
        kv.set("id_dim", self.dims.id);
        kv.set("text_dim", self.dims.text);
        kv.set("img_dim", self.dims.img);
        kv.set("vocab_hash", self.vocab.hash());
        kv.set("num_params", self.num_params());
        kv
    }

    /// Writes `params.sgt`, `vocab.tsv` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        Tensor::from_vec(&self.flatten()).write(&dir.join("params.sgt"))?;
        self.vocab.write_manifest(&dir.join("vocab.tsv"))?;
        fs::write(dir.join("manifest.txt"), self.manifest().to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("manifest.txt"))?;
        let vocab = Vocabulary::read_manifest(&dir.join("vocab.tsv"))?;
        let hash: String = kv.get_parsed("vocab_hash")?;
        let format_err = |message: String| Error::Format {
            path: dir.to_path_buf(),
            message,
        };
        if hash != vocab.hash() {
            return Err(format_err("vocabulary hash does not match the manifest".into()));
        }
        let config = ModelConfig {
            transformer: TransformerConfig {
                hidden: kv.get_parsed("hidden")?,
                heads: kv.get_parsed("heads")?,
                layers: kv.get_parsed("layers")?,
                ffn: kv.get_parsed("ffn")?,
                max_len: kv.get_parsed("max_len")?,
            },
            prefix_len: kv.get_parsed("prefix_len")?,
            learned_items: kv.get_parsed("learned_items")?,
            seed: kv.get_parsed("seed")?,
        };
        let dims = ItemDims {
            n_items: kv.get_parsed("n_items")?,
            id: kv.get_parsed("id_dim")?,
            text: kv.get_parsed("text_dim")?,
            img: kv.get_parsed("img_dim")?,
        };
        let mut model = Self::new(config, vocab, dims)?;
        let flat = Tensor::read(&dir.join("params.sgt"))?.data;
        if flat.len() != model.num_params() {
            return Err(format_err(format!("{} parameters, expected {}", flat.len(), model.num_params())));
        }
        model.assign(&flat);
        Ok(model)
    }
}

/// Hidden states of the whole row sequence, computed without a cache.
pub fn full_forward(model: &GenRecModel, items: &ItemEmbeddings, rows: &[InputRow]) -> Result<Array2<f64>> {
    let mut cache = model.new_cache();
    model.extend(items, rows, &mut cache)
}
