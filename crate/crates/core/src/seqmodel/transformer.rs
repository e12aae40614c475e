//! Pre-LayerNorm decoder-only transformer with learned positions, a KV cache
//! for incremental decoding, and a hand-written backward pass.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::nn::{random_matrix, slice2, slice2_mut, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Parameters};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 4,
            layers: 2,
            ffn: 256,
            max_len: 256,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads)));
        }
        if self.ffn == 0 || self.max_len == 0 {
            return Err(Error::invalid("ffn and max_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// Fused query/key/value projection, `hidden -> 3 * hidden`.
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Parameters for Block {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.ln1.visit(f);
        self.qkv.visit(f);
        self.proj.visit(f);
        self.ln2.visit(f);
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.ln1.visit_mut(f);
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
        self.ln2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub positions: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Parameters for Transformer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice2(&self.positions));
        for b in &self.blocks {
            b.visit(f);
        }
        self.ln_f.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.positions));
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.ln_f.visit_mut(f);
    }
}

/// Keys and values of every layer for the positions processed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
}

impl KvCache {
    pub fn new(config: &TransformerConfig) -> Self {
        Self {
            keys: (0..config.layers).map(|_| Array2::zeros((0, config.hidden))).collect(),
            values: (0..config.layers).map(|_| Array2::zeros((0, config.hidden))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn append_rows(dst: &mut Array2<f64>, rows: ArrayView2<f64>) {
    for r in rows.rows() {
        dst.push_row(r).expect("row width matches cache");
    }
}

/// Causal multi-head attention of `q` over `k`/`v`. Query row `t` sees key
/// rows `0..=offset + t`. Returns the output and the per-head probabilities.
fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    offset: usize,
    keep_probs: bool,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::new();
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let visible = offset + i + 1;
            let mut max = f64::NEG_INFINITY;
            for x in row.iter_mut().take(visible) {
                *x *= scale;
                max = max.max(*x);
            }
            let mut sum = 0.0;
            for x in row.iter_mut().take(visible) {
                *x = (*x - max).exp();
                sum += *x;
            }
            for (j, x) in row.iter_mut().enumerate() {
                if j < visible {
                    *x /= sum;
                } else {
                    *x = 0.0;
                }
            }
        }
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        if keep_probs {
            probs.push(scores);
        }
    }
    (out, probs)
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    /// Per segment, per head.
    probs: Vec<Vec<Array2<f64>>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    mlp: MlpCache,
}

/// Activations saved by [`Transformer::forward_train`].
pub struct TrainCache {
    segments: Vec<usize>,
    layers: Vec<LayerCache>,
    ln_f: LayerNormCache,
}

impl Transformer {
    pub fn new<R: Rng>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let blocks = (0..config.layers)
            .map(|_| {
                let mut proj = Linear::new(h, h, rng);
                proj.w /= (2.0 * config.layers as f64).sqrt();
                let mut mlp = Mlp::new(h, config.ffn, h, rng);
                mlp.fc2.w /= (2.0 * config.layers as f64).sqrt();
                Block {
                    ln1: LayerNorm::new(h),
                    qkv: Linear::new(h, 3 * h, rng),
                    proj,
                    ln2: LayerNorm::new(h),
                    mlp,
                }
            })
            .collect();
        Ok(Self {
            positions: random_matrix(config.max_len, h, 0.1, rng),
            blocks,
            ln_f: LayerNorm::new(h),
            config,
        })
    }

    fn check_input(&self, x: &Array2<f64>, start: usize) -> Result<()> {
        if x.ncols() != self.config.hidden {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", self.config.hidden),
                actual: x.ncols().to_string(),
            });
        }
        if start + x.nrows() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: start + x.nrows(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Runs `x` (input embeddings, one row per new position) after the
    /// positions already in `cache`, extends the cache and returns the final
    /// hidden states of the new positions.
    pub fn forward(&self, x: &Array2<f64>, cache: &mut KvCache) -> Result<Array2<f64>> {
        let start = cache.len();
        self.check_input(x, start)?;
        let h = self.config.hidden;
        let mut x = x + &self.positions.slice(s![start..start + x.nrows(), ..]);
        for (l, block) in self.blocks.iter().enumerate() {
            let a = block.ln1.forward(&x.view());
            let qkv = block.qkv.forward(&a.view());
            append_rows(&mut cache.keys[l], qkv.slice(s![.., h..2 * h]));
            append_rows(&mut cache.values[l], qkv.slice(s![.., 2 * h..]));
            let (o, _) = attend(
                qkv.slice(s![.., ..h]),
                cache.keys[l].view(),
                cache.values[l].view(),
                self.config.heads,
                start,
                false,
            );
            x += &block.proj.forward(&o.view());
            let b = block.ln2.forward(&x.view());
            x += &block.mlp.forward(&b.view());
        }
        Ok(self.ln_f.forward(&x.view()))
    }

    /// Runs several independent continuations of the cached prefix without
    /// modifying the cache. Each branch sees the cached positions plus its
    /// own earlier rows.
    pub fn forward_branches(&self, cache: &KvCache, branches: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        let start = cache.len();
        let h = self.config.hidden;
        let mut offsets = Vec::with_capacity(branches.len() + 1);
        offsets.push(0);
        for b in branches {
            self.check_input(b, start)?;
            offsets.push(offsets.last().unwrap() + b.nrows());
        }
        let total = *offsets.last().unwrap();
        let mut x = Array2::zeros((total, h));
        for (i, b) in branches.iter().enumerate() {
            let mut dst = x.slice_mut(s![offsets[i]..offsets[i + 1], ..]);
            dst.assign(b);
            dst += &self.positions.slice(s![start..start + b.nrows(), ..]);
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let a = block.ln1.forward(&x.view());
            let qkv = block.qkv.forward(&a.view());
            let mut o = Array2::zeros((total, h));
            for i in 0..branches.len() {
                let rows = s![offsets[i]..offsets[i + 1], ..];
                let own = qkv.slice(rows);
                let mut k = cache.keys[l].clone();
                let mut v = cache.values[l].clone();
                append_rows(&mut k, own.slice(s![.., h..2 * h]));
                append_rows(&mut v, own.slice(s![.., 2 * h..]));
                let (out, _) = attend(own.slice(s![.., ..h]), k.view(), v.view(), self.config.heads, start, false);
                o.slice_mut(rows).assign(&out);
            }
            x += &block.proj.forward(&o.view());
            let b = block.ln2.forward(&x.view());
            x += &block.mlp.forward(&b.view());
        }
        let y = self.ln_f.forward(&x.view());
        Ok((0..branches.len())
            .map(|i| y.slice(s![offsets[i]..offsets[i + 1], ..]).to_owned())
            .collect())
    }

    /// Full-sequence forward over a batch of independent sequences stacked
    /// row-wise; `segments` lists their lengths. Keeps activations for
    /// [`Transformer::backward`].
    pub fn forward_train(&self, x: &Array2<f64>, segments: &[usize]) -> Result<(Array2<f64>, TrainCache)> {
        let h = self.config.hidden;
        if segments.iter().sum::<usize>() != x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", segments.iter().sum::<usize>()),
                actual: x.nrows().to_string(),
            });
        }
        let mut x = x.clone();
        let mut off = 0;
        if x.ncols() != h {
            return Err(Error::ShapeMismatch {
                expected: format!("{h} columns"),
                actual: x.ncols().to_string(),
            });
        }
        for &len in segments {
            if len > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max: self.config.max_len,
                });
            }
            let mut seg = x.slice_mut(s![off..off + len, ..]);
            seg += &self.positions.slice(s![..len, ..]);
            off += len;
        }
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, ln1) = block.ln1.forward_train(&x.view());
            let qkv = block.qkv.forward(&a.view());
            let mut o = Array2::zeros((x.nrows(), h));
            let mut probs = Vec::with_capacity(segments.len());
            let mut off = 0;
            for &len in segments {
                let rows = s![off..off + len, ..];
                let seg = qkv.slice(rows);
                let (out, p) = attend(
                    seg.slice(s![.., ..h]),
                    seg.slice(s![.., h..2 * h]),
                    seg.slice(s![.., 2 * h..]),
                    self.config.heads,
                    0,
                    true,
                );
                o.slice_mut(rows).assign(&out);
                probs.push(p);
                off += len;
            }
            x += &block.proj.forward(&o.view());
            let (b, ln2) = block.ln2.forward_train(&x.view());
            let (f, mlp) = block.mlp.forward_train(&b.view());
            x += &f;
            layers.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                o,
                ln2,
                b,
                mlp,
            });
        }
        let (y, ln_f) = self.ln_f.forward_train(&x.view());
        Ok((
            y,
            TrainCache {
                segments: segments.to_vec(),
                layers,
                ln_f,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` for the
    /// input embeddings.
    pub fn backward(&self, cache: &TrainCache, dy: &Array2<f64>, grad: &mut Transformer) -> Array2<f64> {
        let h = self.config.hidden;
        let heads = self.config.heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = self.ln_f.backward(&cache.ln_f, &dy.view(), &mut grad.ln_f);
        for (l, block) in self.blocks.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let g = &mut grad.blocks[l];
            // x_out = x_mid + mlp(ln2(x_mid))
            let db = block.mlp.backward(&lc.b.view(), &lc.mlp, &dx.view(), &mut g.mlp);
            dx += &block.ln2.backward(&lc.ln2, &db.view(), &mut g.ln2);
            // x_mid = x_in + proj(attn(ln1(x_in)))
            let d_o = block.proj.backward(&lc.o.view(), &dx.view(), &mut g.proj);
            let mut d_qkv = Array2::zeros(lc.qkv.raw_dim());
            let mut off = 0;
            for (seg_i, &len) in cache.segments.iter().enumerate() {
                let rows = off..off + len;
                let qkv = lc.qkv.slice(s![rows.clone(), ..]);
                for hd in 0..heads {
                    let c = hd * dh..(hd + 1) * dh;
                    let p = &lc.probs[seg_i][hd];
                    let q = qkv.slice(s![.., c.clone()]);
                    let k = qkv.slice(s![.., h + c.start..h + c.end]);
                    let v = qkv.slice(s![.., 2 * h + c.start..2 * h + c.end]);
                    let d_out = d_o.slice(s![rows.clone(), c.clone()]);
                    let dv = p.t().dot(&d_out);
                    let dp = d_out.dot(&v.t());
                    let mut ds = &dp * p;
                    let row_sums = ds.sum_axis(Axis(1));
                    for (i, mut r) in ds.rows_mut().into_iter().enumerate() {
                        for (j, x) in r.iter_mut().enumerate() {
                            *x -= p[[i, j]] * row_sums[i];
                        }
                    }
                    ds *= scale;
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    d_qkv.slice_mut(s![rows.clone(), c.clone()]).assign(&dq);
                    d_qkv.slice_mut(s![rows.clone(), h + c.start..h + c.end]).assign(&dk);
                    d_qkv.slice_mut(s![rows.clone(), 2 * h + c.start..2 * h + c.end]).assign(&dv);
                }
                off += len;
            }
            let da = block.qkv.backward(&lc.a.view(), &d_qkv.view(), &mut g.qkv);
            dx += &block.ln1.backward(&lc.ln1, &da.view(), &mut g.ln1);
        }
        let mut off = 0;
        for &len in &cache.segments {
            let mut gp = grad.positions.slice_mut(s![..len, ..]);
            gp += &dx.slice(s![off..off + len, ..]);
            off += len;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::numeric::rng::stream_rng;

    fn tiny(seed: u64) -> Transformer {
        let cfg = TransformerConfig {
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn: 12,
            max_len: 40,
        };
        Transformer::new(cfg, &mut stream_rng(seed, "test/tiny")).unwrap()
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn cache_path_matches_full_recompute() {
        let t = tiny(1);
        let mut rng = stream_rng(2, "test/x");
        for _ in 0..10 {
            let x = random_matrix(32, 8, 1.0, &mut rng);
            let full = t.forward(&x, &mut KvCache::new(&t.config)).unwrap();
            let mut cache = KvCache::new(&t.config);
            let mut parts = Vec::new();
            let cuts = [0, 5, 6, 17, 32];
            for w in cuts.windows(2) {
                parts.push(t.forward(&x.slice(s![w[0]..w[1], ..]).to_owned(), &mut cache).unwrap());
            }
            assert_eq!(cache.len(), 32);
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let inc = ndarray::concatenate(Axis(0), &views).unwrap();
            assert!(close(&full, &inc) <= 1e-10);
            let (train, _) = t.forward_train(&x, &[32]).unwrap();
            assert!(close(&full, &train) <= 1e-10);
        }
    }

    #[test]
    fn causal_outputs_ignore_future_rows() {
        let t = tiny(3);
        let mut rng = stream_rng(4, "test/causal");
        let x = random_matrix(12, 8, 1.0, &mut rng);
        let mut y = x.clone();
        y.slice_mut(s![7.., ..]).assign(&random_matrix(5, 8, 1.0, &mut rng));
        let a = t.forward(&x, &mut KvCache::new(&t.config)).unwrap();
        let b = t.forward(&y, &mut KvCache::new(&t.config)).unwrap();
        assert_eq!(a.slice(s![..7, ..]), b.slice(s![..7, ..]));
        assert_ne!(a.row(8), b.row(8));
    }

    #[test]
    fn branches_match_one_at_a_time() {
        let t = tiny(5);
        let mut rng = stream_rng(6, "test/branch");
        let prompt = random_matrix(9, 8, 1.0, &mut rng);
        let mut cache = KvCache::new(&t.config);
        t.forward(&prompt, &mut cache).unwrap();
        let branches: Vec<Array2<f64>> = (0..4).map(|i| random_matrix(1 + i % 3, 8, 1.0, &mut rng)).collect();
        let batched = t.forward_branches(&cache, &branches).unwrap();
        for (b, got) in branches.iter().zip(&batched) {
            let mut c = cache.clone();
            let want = t.forward(b, &mut c).unwrap();
            assert!(close(&want, got) <= 1e-10);
            let mut seq = prompt.clone();
            append_rows(&mut seq, b.view());
            let full = t.forward(&seq, &mut KvCache::new(&t.config)).unwrap();
            assert!(close(&full.slice(s![9.., ..]).to_owned(), got) <= 1e-10);
        }
        assert_eq!(cache.len(), 9);
    }

    #[test]
    fn segments_are_independent() {
        let t = tiny(7);
        let mut rng = stream_rng(8, "test/seg");
        let a = random_matrix(5, 8, 1.0, &mut rng);
        let b = random_matrix(7, 8, 1.0, &mut rng);
        let both = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let (y, _) = t.forward_train(&both, &[5, 7]).unwrap();
        let ya = t.forward(&a, &mut KvCache::new(&t.config)).unwrap();
        let yb = t.forward(&b, &mut KvCache::new(&t.config)).unwrap();
        assert!(close(&y.slice(s![..5, ..]).to_owned(), &ya) <= 1e-10);
        assert!(close(&y.slice(s![5.., ..]).to_owned(), &yb) <= 1e-10);
    }

    #[test]
    fn too_long_is_error() {
        let t = tiny(9);
        let x = Array2::zeros((41, 8));
        assert!(matches!(t.forward(&x, &mut KvCache::new(&t.config)), Err(Error::SequenceTooLong { len: 41, max: 40 })));
        assert!(t.forward_train(&x, &[41]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let t = tiny(11);
        let mut rng = stream_rng(12, "test/grad");
        let x = random_matrix(9, 8, 1.0, &mut rng);
        let target = random_matrix(9, 8, 1.0, &mut rng);
        let segments = [4, 5];
        let base = t.clone();
        let loss = |flat: &[f64]| {
            let mut m = base.clone();
            m.assign(flat);
            let (y, cache) = m.forward_train(&x, &segments).unwrap();
            let d = &y - &target;
            let l = 0.5 * d.iter().map(|v| v * v).sum::<f64>();
            let mut g = m.zeros_like();
            m.backward(&cache, &d, &mut g);
            (l, g.flatten())
        };
        let err = grad_check(loss, &t.flatten(), 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");

        // Input gradient.
        let (y, cache) = t.forward_train(&x, &segments).unwrap();
        let d = &y - &target;
        let mut g = t.zeros_like();
        let dx = t.backward(&cache, &d, &mut g);
        let f = |xf: &[f64]| {
            let xm = Array2::from_shape_vec((9, 8), xf.to_vec()).unwrap();
            let (y, _) = t.forward_train(&xm, &segments).unwrap();
            0.5 * (&y - &target).iter().map(|v| v * v).sum::<f64>()
        };
        let flat = x.iter().copied().collect::<Vec<_>>();
        for i in (0..flat.len()).step_by(7) {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            assert!((fd - dx.iter().nth(i).unwrap()).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
