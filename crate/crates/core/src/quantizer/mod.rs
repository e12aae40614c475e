//! Residual vector quantization of item embeddings into semantic IDs.
//!
//! An affine encoder maps a 64-dim embedding into the latent space, where
//! `L` codebooks of `K` codewords quantize it greedily level by level; an
//! affine decoder maps the summed codewords back. Training uses the
//! straight-through estimator for the encoder/decoder, EMA updates for the
//! codebooks, and reseeds codewords that go unused for a whole epoch.

pub mod kmeans;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::nn::{Linear, Parameters};
use crate::numeric::rng::stream_rng;
use crate::numeric::tensor_io::{read_matrix, write_matrix, Tensor};
use crate::numeric::{AdamWConfig, OptimState};
use crate::ItemId;

use kmeans::{kmeans_with_mean, nearest};

/// Hierarchical code sequence, one code per level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<u16>);

impl SemanticId {
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn prefix(&self, len: usize) -> &[u16] {
        &self.0[..len.min(self.0.len())]
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u16::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for SemanticId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|c| c.trim().parse::<u16>().map_err(|e| Error::parse("semantic id", e.to_string())))
            .collect::<Result<Vec<_>>>()
            .map(SemanticId)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqVaeModel {
    pub encoder: Linear,
    pub decoder: Linear,
    /// One `K x latent` matrix per level.
    pub codebooks: Vec<Array2<f64>>,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct AutoEncoder {
    encoder: Linear,
    decoder: Linear,
}

impl Parameters for AutoEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

impl RqVaeModel {
    /// Identity encoder/decoder around the given codebooks (residual k-means).
    pub fn with_identity(codebooks: Vec<Array2<f64>>, beta: f64) -> Self {
        let d = codebooks.first().map_or(0, |c| c.ncols());
        Self {
            encoder: Linear::identity(d),
            decoder: Linear::identity(d),
            codebooks,
            beta,
        }
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.nrows())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Greedy residual assignment; returns codes and the quantized latent.
    fn quantize(&self, z: ArrayView1<f64>) -> (Vec<u16>, Array1<f64>) {
        let mut residual = z.to_owned();
        let mut q = Array1::zeros(z.len());
        let mut codes = Vec::with_capacity(self.levels());
        for book in &self.codebooks {
            let (c, _) = nearest(residual.view(), &book.view());
            residual -= &book.row(c);
            q += &book.row(c);
            codes.push(c as u16);
        }
        (codes, q)
    }

    pub fn encode_latent(&self, v: &[f64]) -> Result<Array1<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("dim {}", self.input_dim()),
                actual: format!("dim {}", v.len()),
            });
        }
        Ok(Array1::from(self.encoder.forward_vec(v)))
    }
}

/// Encodes one embedding into its semantic ID.
pub fn rq_encode(model: &RqVaeModel, v_text: &[f64]) -> Result<SemanticId> {
    let z = model.encode_latent(v_text)?;
    Ok(SemanticId(model.quantize(z.view()).0))
}

/// Decoder applied to the sum of the selected codewords.
pub fn rq_decode(model: &RqVaeModel, sid: &SemanticId) -> Result<Vec<f64>> {
    if sid.levels() != model.levels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} levels", model.levels()),
            actual: sid.levels().to_string(),
        });
    }
    let mut q = Array1::<f64>::zeros(model.latent_dim());
    for (level, (&c, book)) in sid.0.iter().zip(&model.codebooks).enumerate() {
        if c as usize >= book.nrows() {
            return Err(Error::CodeOutOfRange {
                level: level + 1,
                code: c as usize,
                size: book.nrows(),
            });
        }
        q += &book.row(c as usize);
    }
    Ok(model.decoder.forward_vec(q.as_slice().unwrap()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqVaeConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kmeans_iterations: usize,
    pub ema_decay: f64,
    /// Keep encoder and decoder fixed at the identity (residual k-means).
    pub identity_autoencoder: bool,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            codebook_size: 256,
            beta: 0.25,
            epochs: 10,
            batch_size: 256,
            kmeans_iterations: 10,
            ema_decay: 0.99,
            identity_autoencoder: false,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

impl RqVaeConfig {
    /// Smaller codebooks for fast runs.
    pub fn desk() -> Self {
        Self {
            codebook_size: 64,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqVaeReport {
    /// Mean squared residual (per vector) after each level, right after the
    /// k-means initialization; entry 0 is the latent itself.
    pub init_residual_mse: Vec<f64>,
    pub init_reconstruction_mse: f64,
    pub final_reconstruction_mse: f64,
    /// Fraction of codewords used per level on the training set.
    pub utilization: Vec<f64>,
    pub reseeded: Vec<usize>,
}

/// Mean over items of `|decode(encode(x)) - x|^2 / dim`.
pub fn reconstruction_mse(model: &RqVaeModel, data: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for x in data.rows() {
        let sid = rq_encode(model, x.as_slice().unwrap()).expect("dims checked by caller");
        let y = rq_decode(model, &sid).expect("codes are in range");
        total += x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / (data.nrows() * data.ncols()).max(1) as f64
}

/// Trains an RQ-VAE on frozen embeddings (`N x dim`, `N >= K`).
pub fn train_rqvae(embeddings: &Array2<f64>, config: &RqVaeConfig) -> Result<(RqVaeModel, RqVaeReport)> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    let k = config.codebook_size;
    if config.levels == 0 || k == 0 {
        return Err(Error::invalid("levels and codebook_size must be positive"));
    }
    if k > u16::MAX as usize + 1 {
        return Err(Error::invalid("codebook_size too large for 16-bit codes"));
    }
    if n < k {
        return Err(Error::invalid(format!("need at least {k} embeddings to initialise codebooks, got {n}")));
    }
    if embeddings.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rq-vae input".into()));
    }

    let mut rng = stream_rng(config.seed, "quantizer/train");
    let mut ae = AutoEncoder {
        encoder: Linear::identity(d),
        decoder: Linear::identity(d),
    };

    // Level-wise k-means initialization on the residuals of the latents.
    let latent = ae.encoder.forward(&embeddings.view());
    let mut residual = latent.clone();
    let mut codebooks = Vec::with_capacity(config.levels);
    let mut init_residual_mse = vec![mean_sq_norm(&residual)];
    for _ in 0..config.levels {
        let book = kmeans_with_mean(&residual.view(), k, config.kmeans_iterations, &mut rng);
        for mut r in residual.rows_mut() {
            let (c, _) = nearest(r.view(), &book.view());
            r -= &book.row(c);
        }
        init_residual_mse.push(mean_sq_norm(&residual));
        codebooks.push(book);
    }
    let mut model = RqVaeModel {
        encoder: ae.encoder.clone(),
        decoder: ae.decoder.clone(),
        codebooks,
        beta: config.beta,
    };
    let init_reconstruction_mse = reconstruction_mse(&model, embeddings);

    let mut ema_count: Vec<Array1<f64>> = (0..config.levels).map(|_| Array1::ones(k)).collect();
    let mut ema_sum: Vec<Array2<f64>> = model.codebooks.clone();
    let mut opt = OptimState::new(config.optimizer.clone());
    let mut reseeded = vec![0usize; config.levels];
    let mut order: Vec<usize> = (0..n).collect();
    let bs = config.batch_size.max(1);
    let gamma = config.ema_decay;

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![vec![false; k]; config.levels];
        for chunk in order.chunks(bs) {
            let x = embeddings.select(Axis(0), chunk);
            let z = model.encoder.forward(&x.view());
            let m = chunk.len();
            let mut q = Array2::zeros(z.raw_dim());
            let mut level_residuals: Vec<Array2<f64>> = Vec::with_capacity(config.levels);
            let mut level_codes: Vec<Vec<usize>> = Vec::with_capacity(config.levels);
            let mut r = z.clone();
            for book in &model.codebooks {
                let mut codes = Vec::with_capacity(m);
                level_residuals.push(r.clone());
                for (mut ri, mut qi) in r.rows_mut().into_iter().zip(q.rows_mut()) {
                    let (c, _) = nearest(ri.view(), &book.view());
                    ri -= &book.row(c);
                    qi += &book.row(c);
                    codes.push(c);
                }
                level_codes.push(codes);
            }

            if !config.identity_autoencoder {
                // Straight-through: the decoder sees z + sg(q - z) = q.
                let xhat = model.decoder.forward(&q.view());
                let scale = 2.0 / (m * d) as f64;
                let dxhat = (&xhat - &x) * scale;
                let mut grad = ae.zeros_like();
                let dzq = model.decoder.backward(&q.view(), &dxhat.view(), &mut grad.decoder);
                let dz = dzq + (&z - &q) * (config.beta * scale);
                model.encoder.backward(&x.view(), &dz.view(), &mut grad.encoder);
                ae.encoder = model.encoder.clone();
                ae.decoder = model.decoder.clone();
                opt.step(&mut ae, &grad)?;
                model.encoder = ae.encoder.clone();
                model.decoder = ae.decoder.clone();
                if !ae.all_finite() {
                    return Err(Error::Diverged {
                        step: opt.step,
                        what: "rq-vae autoencoder weights".into(),
                    });
                }
            }

            for level in 0..config.levels {
                let mut counts = Array1::<f64>::zeros(k);
                let mut sums = Array2::<f64>::zeros((k, d));
                for (i, &c) in level_codes[level].iter().enumerate() {
                    counts[c] += 1.0;
                    let mut row = sums.row_mut(c);
                    row += &level_residuals[level].row(i);
                    used[level][c] = true;
                }
                ema_count[level].zip_mut_with(&counts, |e, &c| *e = gamma * *e + (1.0 - gamma) * c);
                ema_sum[level].zip_mut_with(&sums, |e, &s| *e = gamma * *e + (1.0 - gamma) * s);
                let total = ema_count[level].sum();
                for (c, &n) in ema_count[level].iter().enumerate() {
                    // Laplace smoothing keeps rarely used codewords finite.
                    let smoothed = (n + 1e-5) / (total + k as f64 * 1e-5) * total;
                    let row = &ema_sum[level].row(c) / smoothed;
                    model.codebooks[level].row_mut(c).assign(&row);
                }
            }
        }

        // Reseed codewords unused for the whole epoch with the worst-fit
        // residuals at that level, so each reseeded codeword gets used.
        let mut r_all = model.encoder.forward(&embeddings.view());
        for level in 0..config.levels {
            let dead: Vec<usize> = (0..k).filter(|&c| !used[level][c]).collect();
            if !dead.is_empty() {
                let book = model.codebooks[level].view();
                let mut errs: Vec<(f64, usize)> = r_all
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| (nearest(r, &book).1, i))
                    .filter(|&(e, _)| e > 0.0)
                    .collect();
                errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for (&c, &(_, i)) in dead.iter().zip(&errs) {
                    let v = r_all.row(i).to_owned();
                    model.codebooks[level].row_mut(c).assign(&v);
                    ema_sum[level].row_mut(c).assign(&v);
                    ema_count[level][c] = 1.0;
                    reseeded[level] += 1;
                }
            }
            let book = model.codebooks[level].view();
            for mut r in r_all.rows_mut() {
                let (c, _) = nearest(r.view(), &book);
                r -= &book.row(c);
            }
        }
    }

    let mut usage = vec![vec![false; k]; config.levels];
    for x in embeddings.rows() {
        let sid = rq_encode(&model, x.as_slice().unwrap())?;
        for (level, &c) in sid.0.iter().enumerate() {
            usage[level][c as usize] = true;
        }
    }
    let utilization = usage
        .iter()
        .map(|u| u.iter().filter(|&&b| b).count() as f64 / k as f64)
        .collect();
    let report = RqVaeReport {
        init_residual_mse,
        init_reconstruction_mse,
        final_reconstruction_mse: reconstruction_mse(&model, embeddings),
        utilization,
        reseeded,
    };
    Ok((model, report))
}

fn mean_sq_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>() / m.nrows().max(1) as f64
}

/// Semantic IDs for the whole catalog plus prefix-bucket sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogAssignment {
    /// `(item id, sid)` in input order.
    pub sids: Vec<(ItemId, SemanticId)>,
    /// Prefix length -> bucket sizes, buckets in prefix order.
    pub bucket_sizes: BTreeMap<usize, Vec<usize>>,
}

pub fn assign_catalog(model: &RqVaeModel, embeddings: &Array2<f64>, ids: &[ItemId]) -> Result<CatalogAssignment> {
    if ids.len() != embeddings.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ids", embeddings.nrows()),
            actual: ids.len().to_string(),
        });
    }
    let sids = ids
        .iter()
        .zip(embeddings.rows())
        .map(|(&id, row)| Ok((id, rq_encode(model, row.as_slice().unwrap())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut bucket_sizes = BTreeMap::new();
    for len in 1..=model.levels().min(2) {
        let mut counts: BTreeMap<&[u16], usize> = BTreeMap::new();
        for (_, sid) in &sids {
            *counts.entry(sid.prefix(len)).or_default() += 1;
        }
        bucket_sizes.insert(len, counts.into_values().collect());
    }
    Ok(CatalogAssignment { sids, bucket_sizes })
}

/// `item_id<TAB>c1,c2,...` per line.
pub fn write_sids(path: &Path, sids: &[(ItemId, SemanticId)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, sid) in sids {
        writeln!(w, "{id}\t{sid}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sids(path: &Path) -> Result<Vec<(ItemId, SemanticId)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, codes) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(format!("{}:{}", path.display(), n + 1), "missing tab"))?;
        let id = id
            .parse::<ItemId>()
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        out.push((id, codes.parse()?));
    }
    Ok(out)
}

/// Saves `header.txt`, `codebook_<level>.sgt` and the encoder/decoder tensors.
pub fn save_model(dir: &Path, model: &RqVaeModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = format!(
        "levels={}\ncodebook_size={}\nbeta={}\nlatent_dim={}\ninput_dim={}\n",
        model.levels(),
        model.codebook_size(),
        model.beta,
        model.latent_dim(),
        model.input_dim()
    );
    fs::write(dir.join("header.txt"), header)?;
    for (level, book) in model.codebooks.iter().enumerate() {
        write_matrix(&dir.join(format!("codebook_{}.sgt", level + 1)), book)?;
    }
    write_matrix(&dir.join("encoder_w.sgt"), &model.encoder.w)?;
    Tensor::from_vec(model.encoder.b.as_slice().unwrap()).write(&dir.join("encoder_b.sgt"))?;
    write_matrix(&dir.join("decoder_w.sgt"), &model.decoder.w)?;
    Tensor::from_vec(model.decoder.b.as_slice().unwrap()).write(&dir.join("decoder_b.sgt"))?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<RqVaeModel> {
    let header = crate::config::KeyValues::parse(&fs::read_to_string(dir.join("header.txt"))?, "rq-vae header")?;
    let levels: usize = header.get_parsed("levels")?;
    let beta: f64 = header.get_parsed("beta")?;
    let codebooks = (1..=levels)
        .map(|l| read_matrix(&dir.join(format!("codebook_{l}.sgt"))))
        .collect::<Result<Vec<_>>>()?;
    let vec = |name: &str| -> Result<Array1<f64>> { Ok(Array1::from(Tensor::read(&dir.join(name))?.data)) };
    Ok(RqVaeModel {
        encoder: Linear {
            w: read_matrix(&dir.join("encoder_w.sgt"))?,
            b: vec("encoder_b.sgt")?,
        },
        decoder: Linear {
            w: read_matrix(&dir.join("decoder_w.sgt"))?,
            b: vec("decoder_b.sgt")?,
        },
        codebooks,
        beta,
    })
}
