//! Multi-task supervised fine-tuning loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::InstructionSample;
use super::model::{BatchLoss, EncodedSample, GenRecModel, LossConfig};
use super::negatives::{sample_global_negatives, sample_hard_negatives};
use crate::error::{Error, Result};
use crate::index::PrefixBuckets;
use crate::numeric::nn::Parameters;
use crate::numeric::rng::{indexed_rng, StreamRng};
use crate::numeric::{AdamWConfig, OptimState};
use crate::tokenizer::{ItemEmbeddings, SidTable};
use crate::ItemId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NegativeMode {
    /// Per-sample negatives from the target's prefix bucket.
    Hard,
    /// Per-sample negatives drawn uniformly from the catalog.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub sample_negatives: usize,
    /// Catalog-wide negatives shared by every sample of a batch.
    pub shared_negatives: usize,
    pub negative_mode: NegativeMode,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: 0,
            batch_size: 32,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                warmup_steps: 50,
                ..AdamWConfig::default()
            },
            loss: LossConfig::default(),
            sample_negatives: 64,
            shared_negatives: 192,
            negative_mode: NegativeMode::Hard,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub ntp: f64,
    pub id: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SftLog {
    pub steps: Vec<StepLog>,
    /// Samples whose bucket could not supply all hard negatives.
    pub fallback_samples: usize,
    /// Step at which a non-finite loss stopped training; parameters were
    /// restored to the last finite state.
    pub diverged: Option<usize>,
}

/// Stateful trainer, one optimizer step per [`Trainer::step`].
pub struct Trainer<'a> {
    pub model: GenRecModel,
    items: &'a ItemEmbeddings,
    buckets: Option<&'a PrefixBuckets>,
    encoded: Vec<EncodedSample>,
    config: SftConfig,
    optim: OptimState,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: StreamRng,
    pub log: SftLog,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: GenRecModel,
        items: &'a ItemEmbeddings,
        sids: &SidTable,
        buckets: Option<&'a PrefixBuckets>,
        dataset: &[InstructionSample],
        config: SftConfig,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("SFT dataset".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if model.prefix_len() > 0 && config.negative_mode == NegativeMode::Hard && buckets.is_none() {
            return Err(Error::invalid("hard negatives need prefix buckets"));
        }
        let encoded = dataset.iter().map(|s| model.encode_sample(sids, s)).collect::<Result<Vec<_>>>()?;
        let optim = OptimState::new(config.optimizer.clone());
        let rng = indexed_rng(config.seed, "sft/negatives", 0);
        let mut t = Self {
            model,
            items,
            buckets,
            encoded,
            optim,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            rng,
            log: SftLog::default(),
            config,
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.encoded.len()).collect();
        self.order.shuffle(&mut indexed_rng(self.config.seed, "sft/order", self.epoch as u64));
        self.cursor = 0;
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.encoded.len().div_ceil(self.config.batch_size)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn negatives_for(&mut self, batch: &[usize]) -> Result<Vec<Vec<ItemId>>> {
        let n_items = self.model.dims.n_items;
        let shared = sample_global_negatives(n_items, &[], self.config.shared_negatives.min(n_items), &mut self.rng)?;
        let k = self.config.sample_negatives.min(n_items.saturating_sub(1));
        let mut out = Vec::with_capacity(batch.len());
        for &i in batch {
            let target = self.encoded[i].target;
            let own = match (self.config.negative_mode, self.buckets) {
                (NegativeMode::Hard, Some(b)) if self.model.prefix_len() > 0 => {
                    let s = sample_hard_negatives(b, target, k, &mut self.rng)?;
                    self.log.fallback_samples += usize::from(s.fallback);
                    s.items
                }
                _ => sample_global_negatives(n_items, &[target], k, &mut self.rng)?,
            };
            let mut negs = own;
            for &s in &shared {
                if s != target && !negs.contains(&s) {
                    negs.push(s);
                }
            }
            out.push(negs);
        }
        Ok(out)
    }

    /// One optimizer step on the next batch. Returns the batch loss measured
    /// before the update.
    pub fn step(&mut self) -> Result<BatchLoss> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let ids: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let negatives = self.negatives_for(&ids)?;
        let batch: Vec<EncodedSample> = ids.iter().map(|&i| self.encoded[i].clone()).collect();
        let mut grad = self.model.zeros_like();
        let loss = self.model.batch_loss(self.items, &batch, &negatives, &self.config.loss, Some(&mut grad))?;
        let step = self.optim.step + 1;
        if !loss.total.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss {}", loss.total),
            });
        }
        if self.config.grad_clip > 0.0 {
            let mut sq = 0.0;
            grad.visit(&mut |s| sq += s.iter().map(|x| x * x).sum::<f64>());
            let norm = sq.sqrt();
            if norm > self.config.grad_clip {
                let scale = self.config.grad_clip / norm;
                grad.visit_mut(&mut |s| s.iter_mut().for_each(|x| *x *= scale));
            }
        }
        self.optim.step(&mut self.model, &grad)?;
        self.log.steps.push(StepLog {
            step,
            total: loss.total,
            ntp: loss.ntp,
            id: loss.id,
        });
        Ok(loss)
    }

    /// Runs the configured schedule. A non-finite loss stops training with
    /// the parameters of the last finite step.
    pub fn run(mut self) -> Result<(GenRecModel, SftLog)> {
        let total = self.steps_per_epoch() * self.config.epochs;
        let total = if self.config.max_steps > 0 { total.min(self.config.max_steps) } else { total };
        let mut last_good = self.model.flatten();
        for _ in 0..total {
            match self.step() {
                Ok(_) if self.model.all_finite() => last_good = self.model.flatten(),
                Ok(_) => {
                    self.log.diverged = Some(self.optim.step);
                    self.model.assign(&last_good);
                    log::warn!("non-finite parameters at step {}; restored last good state", self.optim.step);
                    break;
                }
                Err(Error::Diverged { step, what }) => {
                    self.log.diverged = Some(step);
                    self.model.assign(&last_good);
                    log::warn!("training diverged at step {step} ({what}); restored last good state");
                    break;
                }
                Err(e) => return Err(e),
            }
            let s = self.optim.step;
            if s.is_multiple_of(100) {
                let recent = &self.log.steps[self.log.steps.len().saturating_sub(100)..];
                let mean = recent.iter().map(|l| l.total).sum::<f64>() / recent.len() as f64;
                log::info!("sft step {s}/{total} mean loss {mean:.4}");
            }
        }
        Ok((self.model, self.log))
    }
}

/// Trains `model` on `dataset` with `w_ntp·L_NTP + w_id·L_ID`.
pub fn sft_train(
    model: GenRecModel,
    items: &ItemEmbeddings,
    sids: &SidTable,
    buckets: Option<&PrefixBuckets>,
    dataset: &[InstructionSample],
    config: &SftConfig,
) -> Result<(GenRecModel, SftLog)> {
    Trainer::new(model, items, sids, buckets, dataset, config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{generate_world, World, WorldConfig};
    use crate::numeric::nn::random_matrix;
    use crate::numeric::rng::stream_rng;
    use crate::quantizer::SemanticId;
    use crate::seqmodel::dataset::{build_sft_dataset, uniform_mix, DatasetConfig};
    use crate::seqmodel::model::{ItemDims, ModelConfig};
    use crate::seqmodel::transformer::TransformerConfig;
    use crate::tokenizer::{VocabLayout, Vocabulary};

    struct Fixture {
        world: World,
        items: ItemEmbeddings,
        sids: SidTable,
        buckets: PrefixBuckets,
    }

    fn fixture() -> Fixture {
        let world = generate_world(&WorldConfig::small(), 5).unwrap();
        let mut rng = stream_rng(5, "text");
        let text = random_matrix(world.n_items(), 8, 1.0, &mut rng);
        let items = ItemEmbeddings::from_world(&world, &text).unwrap();
        // Codes from the generator's hierarchy stand in for a fitted quantizer.
        let entries: Vec<(ItemId, SemanticId)> = world
            .items
            .iter()
            .map(|it| (it.id, SemanticId(vec![it.sub as u16, (it.style % 8) as u16])))
            .collect();
        let sids = SidTable::new(world.n_items(), &entries).unwrap();
        let buckets = PrefixBuckets::new(&entries, 1).unwrap();
        Fixture { world, items, sids, buckets }
    }

    fn model(f: &Fixture, prefix_len: usize) -> GenRecModel {
        let layout = VocabLayout::from_world(&f.world.config, 2, 16);
        let config = ModelConfig {
            transformer: TransformerConfig {
                hidden: 32,
                heads: 2,
                layers: 1,
                ffn: 64,
                max_len: 64,
            },
            prefix_len,
            learned_items: false,
            seed: 1,
        };
        GenRecModel::new(config, Vocabulary::new(layout).unwrap(), ItemDims::of(&f.items)).unwrap()
    }

    fn data(f: &Fixture, per_task: usize) -> Vec<InstructionSample> {
        let cfg = DatasetConfig {
            history_len: 8,
            ..DatasetConfig::default()
        };
        build_sft_dataset(&f.world, &uniform_mix(per_task), &cfg).unwrap()
    }

    #[test]
    fn zero_steps_leave_parameters() {
        let f = fixture();
        let m = model(&f, 1);
        let cfg = SftConfig {
            epochs: 0,
            ..SftConfig::default()
        };
        let (out, log) = sft_train(m.clone(), &f.items, &f.sids, Some(&f.buckets), &data(&f, 5), &cfg).unwrap();
        assert_eq!(out, m);
        assert!(log.steps.is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let f = fixture();
        assert!(sft_train(model(&f, 1), &f.items, &f.sids, Some(&f.buckets), &[], &SftConfig::default()).is_err());
    }

    #[test]
    fn loss_trends_down_over_first_fifty_steps() {
        let f = fixture();
        let ds = data(&f, 143);
        assert!(ds.len() >= 1000);
        let cfg = SftConfig {
            batch_size: 16,
            sample_negatives: 16,
            shared_negatives: 16,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 2,
            ..SftConfig::default()
        };
        let mut trainer = Trainer::new(model(&f, 1), &f.items, &f.sids, Some(&f.buckets), &ds, cfg).unwrap();
        // Fixed probe: the first 128 samples with fixed negatives.
        let probe: Vec<EncodedSample> = ds[..128].iter().map(|s| trainer.model.encode_sample(&f.sids, s).unwrap()).collect();
        let mut rng = stream_rng(9, "probe");
        let negs: Vec<Vec<ItemId>> = probe
            .iter()
            .map(|e| sample_hard_negatives(&f.buckets, e.target, 16, &mut rng).unwrap().items)
            .collect();
        let probe_loss = |m: &GenRecModel| m.batch_loss(&f.items, &probe, &negs, &LossConfig::default(), None).unwrap().total;
        let mut curve = vec![probe_loss(&trainer.model)];
        for _ in 0..50 {
            trainer.step().unwrap();
            curve.push(probe_loss(&trainer.model));
        }
        let down = curve.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.8 * 50.0, "{down}/50 decreasing: {curve:?}");
        assert!(curve[50] < curve[0]);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let f = fixture();
        let ds = data(&f, 10);
        let cfg = SftConfig {
            batch_size: 8,
            sample_negatives: 8,
            shared_negatives: 8,
            max_steps: 6,
            ..SftConfig::default()
        };
        let (a, la) = sft_train(model(&f, 2), &f.items, &f.sids, None, &ds, &SftConfig { negative_mode: NegativeMode::Global, ..cfg.clone() }).unwrap();
        let (b, lb) = sft_train(model(&f, 2), &f.items, &f.sids, None, &ds, &SftConfig { negative_mode: NegativeMode::Global, ..cfg.clone() }).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.steps.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        b.save(&dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("params.sgt")).unwrap(), std::fs::read(dir.path().join("b/params.sgt")).unwrap());
        assert_eq!(GenRecModel::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn divergence_restores_last_good_state() {
        let f = fixture();
        let ds = data(&f, 4);
        let cfg = SftConfig {
            batch_size: 4,
            max_steps: 3,
            sample_negatives: 4,
            shared_negatives: 4,
            ..SftConfig::default()
        };
        let mut m = model(&f, 1);
        m.head.b[0] = f64::NAN;
        let before = m.clone();
        let (out, log) = sft_train(m, &f.items, &f.sids, Some(&f.buckets), &ds, &cfg).unwrap();
        assert_eq!(log.diverged, Some(1));
        assert_eq!(out.flatten().iter().filter(|x| x.is_nan()).count(), 1);
        assert_eq!(out.token_table, before.token_table);
    }
}
