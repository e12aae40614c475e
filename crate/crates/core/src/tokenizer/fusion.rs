use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::evaluation::World;
use crate::numeric::nn::{random_matrix, slice1, slice1_mut, slice2, slice2_mut, Mlp, MlpCache, Parameters};
use crate::ItemId;

pub const FUSED_DIM: usize = 128;

/// Frozen pretrained embeddings per item (row = item id).
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddings {
    pub id: Array2<f64>,
    pub text: Array2<f64>,
    /// Zero rows where `has_img` is false.
    pub img: Array2<f64>,
    pub has_img: Vec<bool>,
}

impl ItemEmbeddings {
    pub fn new(id: Array2<f64>, text: Array2<f64>, img: Array2<f64>, has_img: Vec<bool>) -> Result<Self> {
        let n = id.nrows();
        if text.nrows() != n || img.nrows() != n || has_img.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} rows in every embedding table"),
                actual: format!("text {}, img {}, flags {}", text.nrows(), img.nrows(), has_img.len()),
            });
        }
        Ok(Self { id, text, img, has_img })
    }

    /// Teacher (ID), the given text embeddings and visual embeddings of a world.
    pub fn from_world(world: &World, text: &Array2<f64>) -> Result<Self> {
        let n = world.items.len();
        let id_dim = world.config.id_dim;
        let img_dim = world.config.img_dim;
        let mut id = Array2::zeros((n, id_dim));
        let mut img = Array2::zeros((n, img_dim));
        let mut has_img = vec![false; n];
        for (i, it) in world.items.iter().enumerate() {
            id.row_mut(i).assign(&ndarray::ArrayView1::from(&it.teacher));
            if let Some(v) = &it.visual {
                img.row_mut(i).assign(&ndarray::ArrayView1::from(v));
                has_img[i] = true;
            }
        }
        Self::new(id, text.clone(), img, has_img)
    }

    pub fn n_items(&self) -> usize {
        self.id.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.id.ncols() + self.text.ncols() + self.img.ncols()
    }

    fn check(&self, item: ItemId) -> Result<usize> {
        let i = item as usize;
        if i >= self.n_items() {
            return Err(Error::UnknownItem(item));
        }
        Ok(i)
    }
}

/// `fused = MLP(concat(v_id, v_text, v_img))`. Missing visual embeddings are
/// replaced by a learned bias. With `item_table` set, the concatenation is
/// replaced by a learned per-item input row.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMlp {
    pub mlp: Mlp,
    pub missing_img: Array1<f64>,
    pub item_table: Option<Array2<f64>>,
}

pub struct FusionCache {
    items: Vec<ItemId>,
    input: Array2<f64>,
    mlp: MlpCache,
}

impl FusionMlp {
    pub fn new<R: Rng>(id_dim: usize, text_dim: usize, img_dim: usize, rng: &mut R) -> Self {
        let input = id_dim + text_dim + img_dim;
        Self {
            mlp: Mlp::new(input, FUSED_DIM, FUSED_DIM, rng),
            missing_img: Array1::zeros(img_dim),
            item_table: None,
        }
    }

    /// Learned item inputs in place of the pretrained embeddings.
    pub fn with_learned_items<R: Rng>(mut self, n_items: usize, rng: &mut R) -> Self {
        let d = self.input_dim();
        self.item_table = Some(random_matrix(n_items, d, 1.0, rng));
        self
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.fc1.input_dim()
    }

    fn inputs(&self, emb: &ItemEmbeddings, items: &[ItemId]) -> Result<Array2<f64>> {
        let d = self.input_dim();
        if let Some(table) = &self.item_table {
            let mut x = Array2::zeros((items.len(), d));
            for (r, &it) in items.iter().enumerate() {
                if it as usize >= table.nrows() {
                    return Err(Error::UnknownItem(it));
                }
                x.row_mut(r).assign(&table.row(it as usize));
            }
            return Ok(x);
        }
        if emb.input_dim() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("fusion input {d}"),
                actual: emb.input_dim().to_string(),
            });
        }
        let (a, b) = (emb.id.ncols(), emb.text.ncols());
        let mut x = Array2::zeros((items.len(), d));
        for (r, &it) in items.iter().enumerate() {
            let i = emb.check(it)?;
            let mut row = x.row_mut(r);
            row.slice_mut(s![..a]).assign(&emb.id.row(i));
            row.slice_mut(s![a..a + b]).assign(&emb.text.row(i));
            if emb.has_img[i] {
                row.slice_mut(s![a + b..]).assign(&emb.img.row(i));
            } else {
                row.slice_mut(s![a + b..]).assign(&self.missing_img);
            }
        }
        Ok(x)
    }

    /// Fused embeddings of `items`, one row each.
    pub fn fuse_items(&self, emb: &ItemEmbeddings, items: &[ItemId]) -> Result<Array2<f64>> {
        Ok(self.mlp.forward(&self.inputs(emb, items)?.view()))
    }

    pub fn forward_train(&self, emb: &ItemEmbeddings, items: &[ItemId]) -> Result<(Array2<f64>, FusionCache)> {
        let input = self.inputs(emb, items)?;
        let (y, mlp) = self.mlp.forward_train(&input.view());
        Ok((
            y,
            FusionCache {
                items: items.to_vec(),
                input,
                mlp,
            },
        ))
    }

    pub fn backward(&self, emb: &ItemEmbeddings, cache: &FusionCache, dy: &Array2<f64>, grad: &mut FusionMlp) {
        let dx = self.mlp.backward(&cache.input.view(), &cache.mlp, &dy.view(), &mut grad.mlp);
        if let Some(gt) = grad.item_table.as_mut() {
            for (r, &it) in cache.items.iter().enumerate() {
                let mut row = gt.row_mut(it as usize);
                row += &dx.row(r);
            }
            return;
        }
        let off = emb.id.ncols() + emb.text.ncols();
        for (r, &it) in cache.items.iter().enumerate() {
            if !emb.has_img[it as usize] {
                grad.missing_img += &dx.row(r).slice(s![off..]);
            }
        }
    }

    /// Fused embeddings of the whole catalog in item-id order.
    pub fn fuse_catalog(&self, emb: &ItemEmbeddings) -> Result<Array2<f64>> {
        let ids: Vec<ItemId> = (0..emb.n_items() as ItemId).collect();
        let mut out = Array2::zeros((ids.len(), FUSED_DIM));
        for (chunk, mut dst) in ids.chunks(1024).zip(out.axis_chunks_iter_mut(Axis(0), 1024)) {
            dst.assign(&self.fuse_items(emb, chunk)?);
        }
        Ok(out)
    }
}

impl Parameters for FusionMlp {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.mlp.visit(f);
        f(slice1(&self.missing_img));
        if let Some(t) = &self.item_table {
            f(slice2(t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.mlp.visit_mut(f);
        f(slice1_mut(&mut self.missing_img));
        if let Some(t) = &mut self.item_table {
            f(slice2_mut(t));
        }
    }
}

/// Fused embedding of one item from its three pretrained embeddings.
pub fn fuse_item_embedding(mlp: &FusionMlp, v_id: &[f64], v_text: &[f64], v_img: Option<&[f64]>) -> Result<Vec<f64>> {
    let img_dim = mlp.missing_img.len();
    let want = mlp.input_dim();
    let got = v_id.len() + v_text.len() + img_dim;
    if got != want || v_img.is_some_and(|v| v.len() != img_dim) {
        return Err(Error::ShapeMismatch {
            expected: format!("inputs totalling {want}"),
            actual: format!("{} + {} + {}", v_id.len(), v_text.len(), v_img.map_or(img_dim, <[f64]>::len)),
        });
    }
    let mut x = Vec::with_capacity(want);
    x.extend_from_slice(v_id);
    x.extend_from_slice(v_text);
    match v_img {
        Some(v) => x.extend_from_slice(v),
        None => x.extend(mlp.missing_img.iter()),
    }
    let x = Array2::from_shape_vec((1, want), x).expect("length checked");
    Ok(mlp.mlp.forward(&x.view()).row(0).to_vec())
}
