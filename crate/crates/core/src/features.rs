//! From raw layer gradients to fused feature vectors: flatten, random
//! projection, per-segment normalization and concatenation, PCA.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Scalar, Tensor};
use crate::backbone::{self, EncoderParams, GradientSource};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objectives::{Objective, ObjectiveKind};
use crate::store::TensorStore;
use crate::{par, rng};

/// `[dW | db]` row by row: each output row's weights followed by its bias.
pub fn flatten_gradient<T: Scalar>(dw: &Tensor<T>, db: &Tensor<T>) -> Result<Vec<T>> {
    if dw.rank() != 2 || db.rank() != 1 || dw.shape()[0] != db.len() {
        return Err(Error::shape("flatten_gradient", format!("dW {:?} with db {:?}", dw.shape(), db.shape())));
    }
    let (o, i) = (dw.shape()[0], dw.shape()[1]);
    let mut out = Vec::with_capacity(o * (i + 1));
    for r in 0..o {
        out.extend_from_slice(dw.row(r));
        out.push(db.data()[r]);
    }
    Ok(out)
}

/// Inverse of [`flatten_gradient`] for a layer with `out_dim × in_dim` weights.
pub fn unflatten_gradient<T: Scalar>(g: &[T], out_dim: usize, in_dim: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if g.len() != out_dim * (in_dim + 1) {
        return Err(Error::shape("unflatten_gradient", format!("{} values for {}x{}", g.len(), out_dim, in_dim)));
    }
    let mut w = Vec::with_capacity(out_dim * in_dim);
    let mut b = Vec::with_capacity(out_dim);
    for row in g.chunks_exact(in_dim + 1) {
        w.extend_from_slice(&row[..in_dim]);
        b.push(row[in_dim]);
    }
    Ok((Tensor::new(vec![out_dim, in_dim], w)?, Tensor::vector(b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Entries ±1 with equal probability.
    Binary,
    /// Standard normal entries.
    Gaussian,
    /// Entries in {−1, 0, +1}; nonzero with probability `1/√m`.
    Sparse,
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Binary => "binary",
            Self::Gaussian => "gaussian",
            Self::Sparse => "sparse",
        })
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "binary" => Ok(Self::Binary),
            "gaussian" => Ok(Self::Gaussian),
            "sparse" => Ok(Self::Sparse),
            other => Err(Error::Config(format!("unknown projection kind '{other}'"))),
        }
    }
}

/// A seeded `out_dim × in_dim` random matrix. Rows are regenerated from the
/// seed on demand unless [`materialize`](Self::materialize) was called.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    pub kind: ProjectionKind,
    pub out_dim: usize,
    pub in_dim: usize,
    pub seed: u64,
    dense: Option<Vec<f32>>,
}

impl ProjectionMatrix {
    pub fn new(kind: ProjectionKind, out_dim: usize, in_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("projection dimensions must be positive"));
        }
        Ok(Self {
            kind,
            out_dim,
            in_dim,
            seed,
            dense: None,
        })
    }

    /// Seed for the projection of one objective within a run.
    pub fn seed_for(base: u64, kind: ObjectiveKind) -> u64 {
        rng::derive_seed(base, &format!("projection.{kind}"), 0)
    }

    /// Row `r` regenerated from the seed.
    pub fn row(&self, r: usize) -> Vec<f32> {
        if let Some(d) = &self.dense {
            return d[r * self.in_dim..(r + 1) * self.in_dim].to_vec();
        }
        let mut g = rng::derived_rng(self.seed, "projection_row", r as u64);
        match self.kind {
            ProjectionKind::Binary => (0..self.in_dim).map(|_| if g.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
            ProjectionKind::Gaussian => (0..self.in_dim).map(|_| g.sample::<f32, _>(StandardNormal)).collect(),
            ProjectionKind::Sparse => {
                let s = self.density();
                (0..self.in_dim)
                    .map(|_| {
                        let u: f64 = g.random();
                        if u < s / 2.0 {
                            -1.0
                        } else if u < s {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }

    fn density(&self) -> f64 {
        1.0 / (self.in_dim as f64).sqrt()
    }

    /// Keep every row in memory (`out_dim · in_dim` floats).
    pub fn materialize(mut self) -> Self {
        if self.dense.is_none() {
            let rows = par::map_range(self.out_dim, |r| self.row(r));
            self.dense = Some(rows.concat());
        }
        self
    }

    pub fn is_materialized(&self) -> bool {
        self.dense.is_some()
    }

    /// `R·g`, no scaling.
    pub fn project(&self, g: &[f32]) -> Result<Vec<f32>> {
        if g.len() != self.in_dim {
            return Err(Error::shape("project", format!("input length {} != {}", g.len(), self.in_dim)));
        }
        let dot = |row: &[f32]| row.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
        Ok(match &self.dense {
            Some(d) => d.chunks_exact(self.in_dim).map(dot).collect(),
            None => par::map_range(self.out_dim, |r| dot(&self.row(r))),
        })
    }

    /// Multiplier that makes `‖R·x‖` an unbiased-in-square estimate of `‖x‖`.
    /// Never applied by [`project`](Self::project); useful for distance checks.
    pub fn isometry_scale(&self) -> f64 {
        let second_moment = match self.kind {
            ProjectionKind::Binary | ProjectionKind::Gaussian => 1.0,
            ProjectionKind::Sparse => self.density(),
        };
        1.0 / (self.out_dim as f64 * second_moment).sqrt()
    }
}

/// L2-normalize every segment and concatenate them in order.
pub fn fuse(segments: &[&[f32]]) -> Result<Vec<f32>> {
    if segments.is_empty() {
        return Err(Error::invalid("nothing to fuse"));
    }
    let mut out = Vec::with_capacity(segments.iter().map(|s| s.len()).sum());
    for (i, s) in segments.iter().enumerate() {
        let n = s.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::data(format!("segment {i} has degenerate norm {n}")));
        }
        out.extend(s.iter().map(|&v| (v as f64 / n) as f32));
    }
    Ok(out)
}

/// Centered principal component projection (no whitening).
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `out_dim × D`, orthonormal rows.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PcaModel {
    /// Fit on the rows of `data` (each of length `D`).
    pub fn fit(data: &[Vec<f32>], out_dim: usize) -> Result<Self> {
        let n = data.len();
        let dim = data.first().map_or(0, |r| r.len());
        if n == 0 || dim == 0 || data.iter().any(|r| r.len() != dim) {
            return Err(Error::data("PCA needs a non-empty matrix with equal-length rows"));
        }
        if out_dim == 0 || out_dim > dim.min(n) {
            return Err(Error::invalid(format!("PCA out_dim {out_dim} exceeds min(D={dim}, n={n})")));
        }
        let mut mean = vec![0.0f64; dim];
        for r in data {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, dim, |i, j| data[i][j] as f64 - mean[j]);
        let svd = nalgebra::linalg::SVD::try_new(centered, false, true, 1e-14, 10_000)
            .ok_or(Error::NonFinite { op: "pca_svd" })?;
        let vt = svd.v_t.as_ref().expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let denom = (n.max(2) - 1) as f64;
        let mut components = Vec::with_capacity(out_dim * dim);
        let mut explained_variance = Vec::with_capacity(out_dim);
        for &k in order.iter().take(out_dim) {
            let row: Vec<f64> = (0..dim).map(|j| vt[(k, j)]).collect();
            // Deterministic sign: largest-magnitude entry positive.
            let pivot = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            components.extend(row.iter().map(|v| v * sign));
            explained_variance.push(svd.singular_values[k].powi(2) / denom);
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
            in_dim: dim,
            out_dim,
        })
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.apply_f64(x)?.into_iter().map(|v| v as f32).collect())
    }

    pub fn apply_f64(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::shape("apply_pca", format!("input length {} != {}", x.len(), self.in_dim)));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, m)| v as f64 - m).collect();
        Ok(self
            .components
            .chunks_exact(self.in_dim)
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Map reduced coordinates back to the input space.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.chunks_exact(self.in_dim).zip(y) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        out
    }

    pub fn save_into(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        store.put_f64(&format!("{prefix}.mean"), vec![self.in_dim], self.mean.clone())?;
        store.put_f64(&format!("{prefix}.components"), vec![self.out_dim, self.in_dim], self.components.clone())?;
        store.put_f64(&format!("{prefix}.variance"), vec![self.out_dim], self.explained_variance.clone())
    }

    pub fn load_from(store: &TensorStore, prefix: &str) -> Result<Self> {
        let (_, mean) = store.f64s(&format!("{prefix}.mean"))?;
        let (ext, comps) = store.f64s(&format!("{prefix}.components"))?;
        let (_, var) = store.f64s(&format!("{prefix}.variance"))?;
        if ext.len() != 2 || ext[1] != mean.len() || var.len() != ext[0] {
            return Err(Error::data("inconsistent PCA sections"));
        }
        Ok(Self {
            mean: mean.to_vec(),
            components: comps.to_vec(),
            explained_variance: var.to_vec(),
            in_dim: ext[1],
            out_dim: ext[0],
        })
    }
}

/// Features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: u32,
    pub label: Option<i32>,
    pub embedding: Vec<f32>,
    /// Projected gradients in objective order.
    pub gradients: Vec<Vec<f32>>,
    /// Fused (and possibly PCA-reduced) vector.
    pub fused: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

/// How a bank's vectors were produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub source: GradientSource,
    pub objectives: Vec<ObjectiveKind>,
    pub projection: ProjectionKind,
    pub pca_dim: Option<usize>,
}

pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub split: Split,
    pub provenance: Provenance,
    pub records: Vec<FeatureRecord>,
}

impl FeatureBank {
    pub fn new(split: Split, provenance: Provenance, records: Vec<FeatureRecord>) -> Result<Self> {
        let bank = Self {
            split,
            provenance,
            records,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let first = self.records.first();
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(Error::data(format!("duplicate sample id {}", r.id)));
            }
            let f = first.expect("non-empty");
            if r.embedding.len() != f.embedding.len()
                || r.fused.len() != f.fused.len()
                || r.gradients.len() != self.provenance.objectives.len()
                || r.gradients.iter().any(|g| g.len() != f.embedding.len())
            {
                return Err(Error::data(format!("record {} has inconsistent dimensions", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn fused(&self) -> Vec<Vec<f32>> {
        self.records.iter().map(|r| r.fused.clone()).collect()
    }

    pub fn embeddings(&self) -> Vec<Vec<f32>> {
        self.records.iter().map(|r| r.embedding.clone()).collect()
    }

    /// Projected gradients of one objective.
    pub fn gradient_features(&self, kind: ObjectiveKind) -> Result<Vec<Vec<f32>>> {
        let i = self
            .provenance
            .objectives
            .iter()
            .position(|&k| k == kind)
            .ok_or_else(|| Error::data(format!("bank has no {kind} gradients")))?;
        Ok(self.records.iter().map(|r| r.gradients[i].clone()).collect())
    }

    /// Labels; every record must have one.
    pub fn labels(&self) -> Result<Vec<i32>> {
        self.records
            .iter()
            .map(|r| r.label.ok_or_else(|| Error::data(format!("record {} is unlabeled", r.id))))
            .collect()
    }

    pub fn to_store(&self, config_echo: &str) -> Result<TensorStore> {
        let n = self.len();
        let d = self.records.first().map_or(0, |r| r.embedding.len());
        let fd = self.records.first().map_or(0, |r| r.fused.len());
        let p = &self.provenance;
        let objectives: Vec<String> = p.objectives.iter().map(|k| k.to_string()).collect();
        let meta = format!(
            "format = {}\nsplit = {}\nconfig_hash = {}\nseed = {}\nsource = {}\nobjectives = {}\nprojection = {}\npca_dim = {}\n",
            BANK_FORMAT_VERSION,
            self.split,
            p.config_hash,
            p.seed,
            p.source,
            objectives.join(","),
            p.projection,
            p.pca_dim.map_or("none".to_string(), |v| v.to_string())
        );
        let mut s = TensorStore::new();
        s.put_text("bank.meta", &meta)?;
        s.put_text("config", config_echo)?;
        s.put_i32("bank.ids", vec![n], self.records.iter().map(|r| r.id as i32).collect())?;
        s.put_i32("bank.labels", vec![n], self.records.iter().map(|r| r.label.unwrap_or(-1)).collect())?;
        s.put_f32("bank.embedding", vec![n, d], self.records.iter().flat_map(|r| r.embedding.clone()).collect())?;
        for (i, k) in p.objectives.iter().enumerate() {
            s.put_f32(
                &format!("bank.grad.{k}"),
                vec![n, d],
                self.records.iter().flat_map(|r| r.gradients[i].clone()).collect(),
            )?;
        }
        s.put_f32("bank.fused", vec![n, fd], self.records.iter().flat_map(|r| r.fused.clone()).collect())?;
        Ok(s)
    }

    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let meta = parse_meta(&store.text("bank.meta")?);
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::data(format!("bank metadata lacks '{k}'")))
        };
        if get("format")? != BANK_FORMAT_VERSION.to_string() {
            return Err(Error::data("unsupported feature bank format"));
        }
        let objectives = get("objectives")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(ObjectiveKind::from_str)
            .collect::<Result<Vec<_>>>()?;
        let provenance = Provenance {
            config_hash: get("config_hash")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| Error::data("bad seed"))?,
            source: get("source")?.parse()?,
            objectives,
            projection: get("projection")?.parse()?,
            pca_dim: match get("pca_dim")? {
                "none" => None,
                v => Some(v.parse().map_err(|_| Error::data("bad pca_dim"))?),
            },
        };
        let (_, ids) = store.i32s("bank.ids")?;
        let (_, labels) = store.i32s("bank.labels")?;
        let (ed, emb) = store.f32s("bank.embedding")?;
        let (fdim, fused) = store.f32s("bank.fused")?;
        let n = ids.len();
        let rows = |ext: &[usize], data: &[f32], i: usize| {
            let w = ext.get(1).copied().unwrap_or(0);
            data[i * w..(i + 1) * w].to_vec()
        };
        let grads = provenance
            .objectives
            .iter()
            .map(|k| store.f32s(&format!("bank.grad.{k}")))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != n || ed[0] != n || fdim[0] != n || grads.iter().any(|(e, _)| e[0] != n) {
            return Err(Error::data("feature bank sections disagree on sample count"));
        }
        let records = (0..n)
            .map(|i| FeatureRecord {
                id: ids[i] as u32,
                label: (labels[i] >= 0).then_some(labels[i]),
                embedding: rows(&ed, emb, i),
                gradients: grads.iter().map(|(e, g)| rows(e, g, i)).collect(),
                fused: rows(&fdim, fused, i),
            })
            .collect();
        Self::new(get("split")?.parse()?, provenance, records)
    }

    pub fn save(&self, path: &Path, config_echo: &str) -> Result<()> {
        self.to_store(config_echo)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&TensorStore::read(path)?)
    }
}

fn parse_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Turns images into [`FeatureRecord`]s for a fixed encoder, gradient source
/// and objective set.
pub struct Extractor<'a> {
    params: &'a EncoderParams<f32>,
    source: GradientSource,
    objectives: Vec<(Objective<f32>, ProjectionMatrix)>,
    seed: u64,
}

impl<'a> Extractor<'a> {
    /// One projection per objective, each seeded from `seed` and the
    /// objective kind, mapping gradients to the embedding dimension.
    pub fn new(
        params: &'a EncoderParams<f32>,
        source: GradientSource,
        objectives: Vec<Objective<f32>>,
        projection: ProjectionKind,
        seed: u64,
    ) -> Result<Self> {
        source.validate(&params.config)?;
        let m = source.flat_len(&params.config);
        let d = params.config.dim;
        let objectives = objectives
            .into_iter()
            .map(|o| {
                let r = ProjectionMatrix::new(projection, d, m, ProjectionMatrix::seed_for(seed, o.kind()))?;
                let r = if d * m <= 1 << 26 { r.materialize() } else { r };
                Ok((o, r))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            source,
            objectives,
            seed,
        })
    }

    pub fn kinds(&self) -> Vec<ObjectiveKind> {
        self.objectives.iter().map(|(o, _)| o.kind()).collect()
    }

    /// Embedding, projected gradients and fused vector of one sample.
    pub fn record(&self, id: u32, label: Option<i32>, image: &Image) -> Result<FeatureRecord> {
        let size = self.params.config.image_size;
        let view = image.resize(size, size);
        let embedding = backbone::encode(self.params, &view)?.embedding.into_data();
        let mut gradients = Vec::with_capacity(self.objectives.len());
        for (obj, proj) in &self.objectives {
            let view_seed = rng::derive_seed(self.seed, &format!("views.{}", obj.kind()), id as u64);
            let g = obj.gradient(self.params, self.source, image, view_seed)?;
            gradients.push(proj.project(&flatten_gradient(&g.dw, &g.db)?)?);
        }
        let mut segments: Vec<&[f32]> = gradients.iter().map(|g| g.as_slice()).collect();
        segments.push(&embedding);
        let fused = fuse(&segments)?;
        Ok(FeatureRecord {
            id,
            label,
            embedding,
            gradients,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_layout_and_round_trip() {
        let dw = Tensor::matrix(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let db = Tensor::vector(vec![5.0, 6.0]);
        let g = flatten_gradient(&dw, &db).unwrap();
        assert_eq!(g, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (w2, b2) = unflatten_gradient(&g, 2, 2).unwrap();
        assert_eq!((w2, b2), (dw, db));
        let zero = flatten_gradient(&Tensor::<f64>::zeros(vec![3, 4]), &Tensor::zeros(vec![3])).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0) && zero.len() == 15);
        assert!(flatten_gradient(&Tensor::<f64>::zeros(vec![3, 4]), &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn projection_entries_and_determinism() {
        let r = ProjectionMatrix::new(ProjectionKind::Binary, 16, 4000, 7).unwrap();
        let rows: Vec<f32> = (0..16).flat_map(|i| r.row(i)).collect();
        assert!(rows.iter().all(|&v| v == 1.0 || v == -1.0));
        let mean = rows.iter().map(|&v| v as f64).sum::<f64>() / rows.len() as f64;
        assert!(mean.abs() < 0.03);
        assert_eq!(r.clone().materialize().row(3), r.row(3));
        let g: Vec<f32> = (0..4000).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(r.project(&g).unwrap(), r.clone().materialize().project(&g).unwrap());
        assert!(r.project(&vec![0.0; 4000]).unwrap().iter().all(|&v| v == 0.0));
        assert!(r.project(&g[..10]).is_err());

        let s = ProjectionMatrix::new(ProjectionKind::Sparse, 8, 10_000, 1).unwrap();
        let nz = (0..8).flat_map(|i| s.row(i)).filter(|&v| v != 0.0).count() as f64 / 80_000.0;
        assert!((nz - 0.01).abs() < 0.003, "{nz}");
    }

    #[test]
    fn fuse_normalizes_segments() {
        let a = [3.0f32, 4.0];
        let b = [0.0f32, 0.0, 2.0];
        let f = fuse(&[&a, &b]).unwrap();
        assert_eq!(f, vec![0.6, 0.8, 0.0, 0.0, 1.0]);
        let norm: f32 = f.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 2f32.sqrt()).abs() < 1e-6);
        let a10: Vec<f32> = a.iter().map(|v| v * 10.0).collect();
        assert_eq!(fuse(&[&a10, &b]).unwrap(), f);
        assert_eq!(fuse(&[&a]).unwrap(), vec![0.6, 0.8]);
        assert!(fuse(&[&a, &[0.0, 0.0]]).is_err());
    }

    #[test]
    fn pca_recovers_low_rank_data() {
        let mut g = rng::rng_from(2);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..10).map(|_| g.random_range(-1.0..1.0)).collect()).collect();
        let offset: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let data: Vec<Vec<f32>> = (0..50)
            .map(|_| {
                let w: Vec<f64> = (0..3).map(|_| g.random_range(-2.0..2.0)).collect();
                (0..10).map(|j| (offset[j] + (0..3).map(|k| w[k] * basis[k][j]).sum::<f64>()) as f32).collect()
            })
            .collect();
        let pca = PcaModel::fit(&data, 3).unwrap();
        for row in &data {
            let back = pca.reconstruct(&pca.apply_f64(row).unwrap());
            let err: f64 = back.iter().zip(row).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>().sqrt();
            assert!(err < 1e-5, "{err}");
        }
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        let mean32: Vec<f32> = pca.mean.iter().map(|&m| m as f32).collect();
        assert!(pca.apply_f64(&mean32).unwrap().iter().all(|v| v.abs() < 1e-5));
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..10).map(|j| pca.components[a * 10 + j] * pca.components[b * 10 + j]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        assert!(PcaModel::fit(&data, 11).is_err());
    }

    #[test]
    fn pca_store_round_trip() {
        let data: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32, 1.0]).collect();
        let pca = PcaModel::fit(&data, 2).unwrap();
        let mut s = TensorStore::new();
        pca.save_into(&mut s, "pca").unwrap();
        assert_eq!(PcaModel::load_from(&s, "pca").unwrap(), pca);
    }

    #[test]
    fn bank_round_trip_and_validation() {
        let prov = Provenance {
            config_hash: "abc".into(),
            seed: 3,
            source: "blocks.1.attn_proj".parse().unwrap(),
            objectives: vec![ObjectiveKind::Kl],
            projection: ProjectionKind::Binary,
            pca_dim: None,
        };
        let rec = |id, label| FeatureRecord {
            id,
            label,
            embedding: vec![1.0, 2.0],
            gradients: vec![vec![0.5, -0.5]],
            fused: vec![0.1, 0.2, 0.3, 0.4],
        };
        let bank = FeatureBank::new(Split::Train, prov.clone(), vec![rec(0, Some(1)), rec(5, None)]).unwrap();
        let store = bank.to_store("x = 1\n").unwrap();
        assert_eq!(FeatureBank::from_store(&store).unwrap(), bank);
        assert!(bank.labels().is_err());
        assert!(FeatureBank::new(Split::Test, prov, vec![rec(0, None), rec(0, None)]).is_err());
    }
}
