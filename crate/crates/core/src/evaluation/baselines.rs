//! Non-generative reference models: global popularity and an item-ID
//! autoregressive transformer.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::evaluation::World;
use crate::numeric::log_softmax;
use crate::numeric::nn::{random_matrix, slice2, slice2_mut, Linear, Parameters};
use crate::numeric::rng::stream_rng;
use crate::numeric::OptimState;
use crate::seqmodel::dataset::InstructionSample;
use crate::seqmodel::train::{SftConfig, SftLog, StepLog};
use crate::seqmodel::transformer::{KvCache, Transformer, TransformerConfig};
use crate::tokenizer::{SidTable, TokenId, Vocabulary, BOS};
use crate::ItemId;

/// The `n` most popular training items, most popular first.
pub fn popularity_predictions(world: &World, n: usize) -> Vec<ItemId> {
    let mut r = world.popularity_ranking();
    r.truncate(n);
    r
}

/// Probability that a uniformly drawn catalog item shares its full SID with
/// one of the first `k` predictions, i.e. the exact HR@k of a fixed ranking
/// against uniform targets.
pub fn uniform_target_hit_rate(predictions: &[ItemId], k: usize, sids: &SidTable) -> Result<f64> {
    let hit: BTreeSet<&[u16]> = predictions
        .iter()
        .take(k)
        .map(|&p| sids.get(p).map(|s| s.0.as_slice()))
        .collect::<Result<_>>()?;
    let n = sids.len();
    let mut covered = 0usize;
    for i in 0..n as ItemId {
        covered += usize::from(hit.contains(sids.get(i)?.0.as_slice()));
    }
    Ok(covered as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ArRow {
    Token(TokenId),
    Item(ItemId),
}

/// Next-item transformer over an item-ID vocabulary: profile, history items
/// and the instruction in, a softmax over the whole catalog out.
#[derive(Clone, Debug, PartialEq)]
pub struct ArIdModel {
    pub vocab: Vocabulary,
    pub token_table: Array2<f64>,
    pub item_table: Array2<f64>,
    pub transformer: Transformer,
    pub head: Linear,
}

impl Parameters for ArIdModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice2(&self.token_table));
        f(slice2(&self.item_table));
        self.transformer.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.token_table));
        f(slice2_mut(&mut self.item_table));
        self.transformer.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl ArIdModel {
    pub fn new(config: TransformerConfig, vocab: Vocabulary, n_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut rng = stream_rng(seed, "ar-id/init");
        Ok(Self {
            token_table: random_matrix(vocab.size(), h, 0.1, &mut rng),
            item_table: random_matrix(n_items, h, 0.1, &mut rng),
            transformer: Transformer::new(config, &mut rng)?,
            head: Linear::new(h, n_items, &mut rng),
            vocab,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_table.nrows()
    }

    fn rows(&self, s: &InstructionSample) -> Result<Vec<ArRow>> {
        let v = &self.vocab;
        let mut rows = vec![
            ArRow::Token(BOS),
            ArRow::Token(v.age(s.profile[0])?),
            ArRow::Token(v.gender(s.profile[1])?),
            ArRow::Token(v.region(s.profile[2])?),
        ];
        for &it in &s.history {
            if it as usize >= self.n_items() {
                return Err(Error::UnknownItem(it));
            }
            rows.push(ArRow::Item(it));
        }
        rows.push(ArRow::Token(v.task(s.task)));
        match (s.task.constraint_kind(), s.constraint) {
            (Some(kind), Some(c)) => rows.push(ArRow::Token(v.constraint(kind, c)?)),
            (None, None) => {}
            _ => return Err(Error::invalid(format!("constraint does not match task {}", s.task))),
        }
        let max = self.transformer.config.max_len;
        if rows.len() > max {
            return Err(Error::SequenceTooLong { len: rows.len(), max });
        }
        Ok(rows)
    }

    fn embed(&self, rows: &[ArRow]) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), self.token_table.ncols()));
        for (r, row) in rows.iter().enumerate() {
            match *row {
                ArRow::Token(t) => x.row_mut(r).assign(&self.token_table.row(t as usize)),
                ArRow::Item(it) => x.row_mut(r).assign(&self.item_table.row(it as usize)),
            }
        }
        x
    }

    /// Mean next-item cross-entropy of a batch; accumulates into `grad`.
    pub fn batch_loss(&self, batch: &[InstructionSample], grad: Option<&mut ArIdModel>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let mut all = Vec::new();
        let mut last = Vec::with_capacity(batch.len());
        let mut segments = Vec::with_capacity(batch.len());
        for s in batch {
            if s.target as usize >= self.n_items() {
                return Err(Error::UnknownItem(s.target));
            }
            let rows = self.rows(s)?;
            segments.push(rows.len());
            all.extend(rows);
            last.push(all.len() - 1);
        }
        let x = self.embed(&all);
        let (y, cache) = self.transformer.forward_train(&x, &segments)?;
        let r = y.select(Axis(0), &last);
        let logits = self.head.forward(&r.view());
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (i, s) in batch.iter().enumerate() {
            let lp = log_softmax(logits.row(i).as_slice().expect("fresh array"));
            let t = s.target as usize;
            loss -= lp[t] / b;
            let mut d = dlogits.row_mut(i);
            for (dj, l) in d.iter_mut().zip(&lp) {
                *dj = l.exp() / b;
            }
            d[t] -= 1.0 / b;
        }
        let Some(g) = grad else {
            return Ok(loss);
        };
        let dr = self.head.backward(&r.view(), &dlogits.view(), &mut g.head);
        let mut dy = Array2::zeros(y.raw_dim());
        for (j, &p) in last.iter().enumerate() {
            dy.row_mut(p).assign(&dr.row(j));
        }
        let dx = self.transformer.backward(&cache, &dy, &mut g.transformer);
        for (r, row) in all.iter().enumerate() {
            let mut dst = match *row {
                ArRow::Token(t) => g.token_table.row_mut(t as usize),
                ArRow::Item(it) => g.item_table.row_mut(it as usize),
            };
            dst += &dx.row(r);
        }
        Ok(loss)
    }

    /// Top-`n` items by logit (ties by id).
    pub fn predict(&self, sample: &InstructionSample, n: usize) -> Result<Vec<ItemId>> {
        let rows = self.rows(sample)?;
        let mut cache = KvCache::new(&self.transformer.config);
        let y = self.transformer.forward(&self.embed(&rows), &mut cache)?;
        let h = y.row(y.nrows() - 1).to_vec();
        let logits = self.head.forward_vec(&h);
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Ok(order.into_iter().take(n).map(|i| i as ItemId).collect())
    }
}

/// Trains with the optimizer, batch size, step budget, clipping and seed of
/// `config`; negatives and loss weights do not apply.
pub fn train_ar_id(mut model: ArIdModel, dataset: &[InstructionSample], config: &SftConfig) -> Result<(ArIdModel, SftLog)> {
    if dataset.is_empty() {
        return Err(Error::Empty("SFT dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let mut total = steps_per_epoch * config.epochs;
    if config.max_steps > 0 {
        total = total.min(config.max_steps);
    }
    let mut optim = OptimState::new(config.optimizer.clone());
    let mut rng = stream_rng(config.seed, "ar-id/order");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = SftLog::default();
    let mut last_good = model.flatten();
    for step in 1..=total {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<InstructionSample> = order[cursor..end].iter().map(|&i| dataset[i].clone()).collect();
        cursor = end;
        let mut grad = model.zeros_like();
        let loss = model.batch_loss(&batch, Some(&mut grad))?;
        if !loss.is_finite() || !grad.all_finite() {
            log.diverged = Some(step);
            model.assign(&last_good);
            log::warn!("item-id baseline diverged at step {step}; restored last good state");
            break;
        }
        if config.grad_clip > 0.0 {
            let mut sq = 0.0;
            grad.visit(&mut |s| sq += s.iter().map(|x| x * x).sum::<f64>());
            let norm = sq.sqrt();
            if norm > config.grad_clip {
                let scale = config.grad_clip / norm;
                grad.visit_mut(&mut |s| s.iter_mut().for_each(|x| *x *= scale));
            }
        }
        optim.step(&mut model, &grad)?;
        last_good = model.flatten();
        log.steps.push(StepLog {
            step,
            total: loss,
            ntp: 0.0,
            id: loss,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{generate_world, WorldConfig};
    use crate::evaluation::metrics::{hr_at_k, HR_KS};
    use crate::numeric::grad_check;
    use crate::quantizer::SemanticId;
    use crate::tokenizer::{Task, VocabLayout};
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabLayout {
            n_age_bands: 3,
            n_genders: 2,
            n_regions: 2,
            n_query_clusters: 3,
            n_categories: 4,
            n_seasons: 4,
            n_holidays: 2,
            levels: 2,
            codebook_size: 4,
        })
        .unwrap()
    }

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn: 8,
            max_len: 32,
        }
    }

    fn sample<R: Rng>(n: usize, rng: &mut R) -> InstructionSample {
        let history: Vec<ItemId> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..n as ItemId)).collect();
        let (task, constraint) = if rng.gen_bool(0.5) { (Task::Category, Some(rng.gen_range(0..4))) } else { (Task::Discover, None) };
        InstructionSample {
            user: 0,
            profile: [rng.gen_range(0..3), rng.gen_range(0..2), rng.gen_range(0..2)],
            target: *history.last().unwrap(),
            history,
            task,
            constraint,
            timestamp: 0,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(1, "t");
        let model = ArIdModel::new(tiny_config(), vocab(), 6, 2).unwrap();
        let batch: Vec<InstructionSample> = (0..3).map(|_| sample(6, &mut rng)).collect();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.assign(p);
            let mut g = m.zeros_like();
            let l = m.batch_loss(&batch, Some(&mut g)).unwrap();
            (l, g.flatten())
        };
        let err = grad_check(f, &model.flatten(), 1e-5).unwrap();
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn learns_to_repeat_last_item() {
        let mut rng = stream_rng(3, "t");
        let data: Vec<InstructionSample> = (0..400).map(|_| sample(10, &mut rng)).collect();
        let model = ArIdModel::new(TransformerConfig { hidden: 16, ffn: 32, ..tiny_config() }, vocab(), 10, 4).unwrap();
        let before = model.batch_loss(&data, None).unwrap();
        let cfg = SftConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: crate::numeric::AdamWConfig {
                learning_rate: 1e-2,
                warmup_steps: 10,
                ..Default::default()
            },
            ..SftConfig::default()
        };
        let (model, log) = train_ar_id(model, &data, &cfg).unwrap();
        let after = model.batch_loss(&data, None).unwrap();
        assert!(log.diverged.is_none());
        assert!(after < 0.5 * before, "{before} -> {after}");
        let entries: Vec<(ItemId, SemanticId)> = (0..10).map(|i| (i, SemanticId(vec![i as u16]))).collect();
        let sids = SidTable::new(10, &entries).unwrap();
        let hits: u32 = data[..100]
            .iter()
            .map(|s| u32::from(hr_at_k(&model.predict(s, 1).unwrap(), s.target, 1, &sids).unwrap()))
            .sum();
        assert!(hits >= 80, "{hits}/100");
    }

    #[test]
    fn predictions_are_sorted_and_bounded() {
        let mut rng = stream_rng(5, "t");
        let model = ArIdModel::new(tiny_config(), vocab(), 6, 2).unwrap();
        let p = model.predict(&sample(6, &mut rng), 20).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.iter().collect::<BTreeSet<_>>().len(), 6);
        let mut bad = sample(6, &mut rng);
        bad.history.push(99);
        assert!(model.predict(&bad, 3).is_err());
    }

    #[test]
    fn popularity_on_uniform_world_matches_chance() {
        let cfg = WorldConfig {
            n_items: 400,
            n_users: 400,
            n_events: 40_000,
            popularity_exponent: 0.0,
            personalization: 0.0,
            ..WorldConfig::small()
        };
        let world = generate_world(&cfg, 9).unwrap();
        // Four items per SID so chance accounts for bucket collisions.
        let entries: Vec<(ItemId, SemanticId)> = (0..400u32).map(|i| (i, SemanticId(vec![(i % 100) as u16]))).collect();
        let sids = SidTable::new(400, &entries).unwrap();
        let preds = popularity_predictions(&world, 20);
        let logs = world.user_logs();
        let mut hits = [0u32; 4];
        let mut n = 0u32;
        for log in &logs {
            for e in &log[world.split_point(log.len())..] {
                n += 1;
                for (h, &k) in hits.iter_mut().zip(&HR_KS) {
                    *h += u32::from(hr_at_k(&preds, e.item, k, &sids).unwrap());
                }
            }
        }
        for (h, &k) in hits.iter().zip(&HR_KS) {
            let p = uniform_target_hit_rate(&preds, k, &sids).unwrap();
            let rate = *h as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((rate - p).abs() <= 3.0 * sigma, "k={k} rate {rate} chance {p} sigma {sigma}");
        }
        // K items cover K distinct SIDs of four items each unless they collide.
        let p20 = uniform_target_hit_rate(&preds, 20, &sids).unwrap();
        let distinct: BTreeSet<u32> = preds.iter().map(|p| p % 100).collect();
        assert_eq!(p20, distinct.len() as f64 * 4.0 / 400.0);
    }
}
