//! Retrieval-based dense labelling: a memory bank of patch features with
//! patch labels, exact and inverted-file nearest-neighbour search, softmax
//! label propagation and mIoU.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::augment::{self, JitterConfig};
use crate::autodiff::Tensor;
use crate::backbone::{self, EncoderParams, Head};
use crate::error::{Error, Result};
use crate::evalkit::{self, KMeansConfig};
use crate::features::fuse;
use crate::image::{Image, Mask};
use crate::objectives::{simclr_patch_gradients, PatchConfig, PatchSupport};
use crate::{par, rng};

pub const IGNORE_LABEL: u8 = 255;

/// Majority label inside each cell of a `grid × grid` partition. Ignored
/// pixels do not vote; ties go to the smaller label; all-ignored cells stay ignored.
pub fn grid_labels(mask: &Mask, grid: usize, ignore: u8) -> Result<Vec<u8>> {
    if grid == 0 || !mask.height.is_multiple_of(grid) || !mask.width.is_multiple_of(grid) {
        return Err(Error::shape("grid_labels", format!("{}x{} mask on a {grid} grid", mask.height, mask.width)));
    }
    let (ch, cw) = (mask.height / grid, mask.width / grid);
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut counts = [0u32; 256];
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    counts[mask.get(y, x) as usize] += 1;
                }
            }
            counts[ignore as usize] = 0;
            let best = (0..256).fold(None::<usize>, |b, l| match b {
                _ if counts[l] == 0 => b,
                Some(bl) if counts[bl] >= counts[l] => b,
                _ => Some(l),
            });
            out.push(best.map_or(ignore, |l| l as u8));
        }
    }
    Ok(out)
}

/// Dense contrastive gradients that extend patch features.
pub struct PatchGradientSpec<'a> {
    pub head: &'a Head<f32>,
    pub support: &'a PatchSupport<f32>,
    pub config: &'a PatchConfig,
}

/// One feature row per patch: the normalized patch token, or with gradients
/// `[normalize(∂L/∂token), normalize(token)]`.
pub fn patch_features(
    params: &EncoderParams<f32>,
    image: &Image,
    gradients: Option<&PatchGradientSpec<'_>>,
    owner: Option<u32>,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let enc = backbone::encode(params, image)?;
    let tokens = enc.patch_tokens();
    let grads = match gradients {
        Some(spec) => Some(simclr_patch_gradients(&enc.tokens, spec.head, spec.support, spec.config, owner, seed)?.grads),
        None => None,
    };
    (0..tokens.shape()[0])
        .map(|i| match &grads {
            Some(g) => fuse(&[g.row(i), tokens.row(i)]),
            None => fuse(&[tokens.row(i)]),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub k: usize,
    pub tau: f64,
    /// Augmented passes over the training images.
    pub epochs: usize,
    /// Apply scale-jitter crops and colour jitter while building the bank.
    pub augment: bool,
    pub scale: (f64, f64),
    pub jitter: JitterConfig,
    /// Cap on bank rows after augmentation (uniform subsample).
    pub bank_size: Option<usize>,
    pub ignore_label: u8,
}

impl SegConfig {
    pub fn full() -> Self {
        Self {
            k: 30,
            tau: 0.02,
            epochs: 1,
            augment: true,
            scale: (0.5, 2.0),
            jitter: JitterConfig::default(),
            bank_size: None,
            ignore_label: IGNORE_LABEL,
        }
    }

    pub fn few_shot() -> Self {
        Self {
            k: 90,
            tau: 0.1,
            epochs: 8,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.tau > 0.0) || self.epochs == 0 {
            return Err(Error::Config("segmentation needs k ≥ 1, τ > 0 and at least one epoch".into()));
        }
        Ok(())
    }
}

/// Training patches with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMemoryBank {
    pub dim: usize,
    /// `M × dim`, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    /// `(image, patch, epoch)` of each row.
    pub sources: Vec<(u32, u32, u32)>,
}

impl PatchMemoryBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Encode every (augmented) training image. Rows whose grid label is
    /// ignored are dropped, then the bank is subsampled to `bank_size`.
    pub fn build(
        params: &EncoderParams<f32>,
        data: &[(Image, Mask)],
        gradients: Option<&PatchGradientSpec<'_>>,
        config: &SegConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let size = params.config.image_size;
        let grid = params.config.grid();
        let jobs = data.len() * config.epochs;
        let per_job = par::try_map_range(jobs, |job| {
            let (i, epoch) = (job / config.epochs, job % config.epochs);
            let (img, mask) = &data[i];
            if img.height != mask.height || img.width != mask.width {
                return Err(Error::data(format!("image {i}: mask size differs from image")));
            }
            let job_seed = rng::derive_seed(seed, "seg_bank", job as u64);
            let (img, mask) = if config.augment {
                augment::seg_augment(img, mask, config.scale, config.jitter, config.ignore_label, job_seed)?
            } else {
                (img.clone(), mask.clone())
            };
            let img = img.resize(size, size);
            let mask = mask.resize_nearest(size, size);
            let feats = patch_features(params, &img, gradients, Some(i as u32), job_seed)?;
            let labels = grid_labels(&mask, grid, config.ignore_label)?;
            Ok((i, epoch, feats, labels))
        })?;
        let mut bank = Self {
            dim: 0,
            features: Vec::new(),
            labels: Vec::new(),
            sources: Vec::new(),
        };
        for (i, epoch, feats, labels) in per_job {
            for (p, (f, l)) in feats.into_iter().zip(labels).enumerate() {
                if l == config.ignore_label {
                    continue;
                }
                bank.dim = f.len();
                bank.features.extend(f);
                bank.labels.push(l);
                bank.sources.push((i as u32, p as u32, epoch as u32));
            }
        }
        if let Some(cap) = config.bank_size.filter(|&c| c < bank.len()) {
            let mut r = rng::derived_rng(seed, "seg_subsample", 0);
            let mut keep = index::sample(&mut r, bank.len(), cap).into_vec();
            keep.sort_unstable();
            bank = Self {
                dim: bank.dim,
                features: keep.iter().flat_map(|&i| bank.row(i).to_vec()).collect(),
                labels: keep.iter().map(|&i| bank.labels[i]).collect(),
                sources: keep.iter().map(|&i| bank.sources[i]).collect(),
            };
        }
        Ok(bank)
    }
}

/// Similarity search over unit-normalized rows.
pub trait NeighbourSearch: Sync {
    /// Up to `k` `(cosine similarity, row)` pairs, most similar first, ties
    /// by smaller row.
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<(f32, usize)>>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&a| a * a).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter().map(|&a| a / n).collect()
    } else {
        v.to_vec()
    }
}

fn top_k(mut scored: Vec<(f32, usize)>, k: usize) -> Vec<(f32, usize)> {
    let cmp = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
}

/// Brute-force cosine search.
#[derive(Clone, Debug)]
pub struct ExactIndex {
    dim: usize,
    rows: Vec<f32>,
}

impl ExactIndex {
    pub fn new(features: &[f32], dim: usize) -> Result<Self> {
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::shape("exact index", "feature buffer is not a whole number of rows"));
        }
        Ok(Self {
            dim,
            rows: features.chunks_exact(dim).flat_map(unit).collect(),
        })
    }

    pub fn from_bank(bank: &PatchMemoryBank) -> Result<Self> {
        Self::new(&bank.features, bank.dim)
    }
}

impl NeighbourSearch for ExactIndex {
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<(f32, usize)>> {
        if self.rows.is_empty() {
            return Err(Error::data("empty memory bank"));
        }
        if query.len() != self.dim {
            return Err(Error::shape("search", "query dimension differs from index"));
        }
        let q = unit(query);
        let scored = self.rows.chunks_exact(self.dim).enumerate().map(|(i, r)| (dot(&q, r), i)).collect();
        Ok(top_k(scored, k))
    }

    fn len(&self) -> usize {
        self.rows.len() / self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfParams {
    pub num_leaves: usize,
    pub leaves_to_search: usize,
    /// Candidates kept after exact scoring.
    pub rerank: usize,
    /// Rows used to train the leaf centroids.
    pub training_sample: usize,
    pub training_iters: usize,
}

impl Default for IvfParams {
    fn default() -> Self {
        Self {
            num_leaves: 512,
            leaves_to_search: 32,
            rerank: 120,
            training_sample: 32_768,
            training_iters: 25,
        }
    }
}

/// Inverted-file index: rows are bucketed by nearest k-means centroid; a
/// query scans the closest buckets and scores their rows exactly.
#[derive(Clone, Debug)]
pub struct IvfIndex {
    exact: ExactIndex,
    params: IvfParams,
    centroids: Vec<f32>,
    postings: Vec<Vec<usize>>,
}

impl IvfIndex {
    pub fn build(features: &[f32], dim: usize, params: IvfParams, seed: u64) -> Result<Self> {
        let exact = ExactIndex::new(features, dim)?;
        let n = exact.len();
        if params.num_leaves == 0 || n < params.num_leaves {
            return Err(Error::invalid(format!("{} rows cannot fill {} leaves", n, params.num_leaves)));
        }
        if params.leaves_to_search == 0 || params.leaves_to_search > params.num_leaves {
            return Err(Error::invalid("leaves_to_search must lie in 1..=num_leaves"));
        }
        let rows: Vec<Vec<f32>> = exact.rows.chunks_exact(dim).map(|r| r.to_vec()).collect();
        let sample_n = params.training_sample.clamp(params.num_leaves, n);
        let mut r = rng::derived_rng(seed, "ivf_sample", 0);
        let mut pick = index::sample(&mut r, n, sample_n).into_vec();
        pick.sort_unstable();
        let sample: Vec<Vec<f32>> = pick.iter().map(|&i| rows[i].clone()).collect();
        let km = evalkit::kmeans(
            &sample,
            &KMeansConfig {
                clusters: params.num_leaves,
                max_iter: params.training_iters,
                tol: 1e-6,
                seed: rng::derive_seed(seed, "ivf_kmeans", 0),
            },
        )?;
        let assign = evalkit::assign_nearest(&rows, &km.centroids);
        let mut postings = vec![Vec::new(); params.num_leaves];
        for (i, (leaf, _)) in assign.into_iter().enumerate() {
            postings[leaf].push(i);
        }
        Ok(Self {
            exact,
            centroids: km.centroids.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect(),
            params,
            postings,
        })
    }

    pub fn from_bank(bank: &PatchMemoryBank, params: IvfParams, seed: u64) -> Result<Self> {
        Self::build(&bank.features, bank.dim, params, seed)
    }

    pub fn params(&self) -> &IvfParams {
        &self.params
    }

    pub fn set_leaves_to_search(&mut self, n: usize) {
        self.params.leaves_to_search = n.clamp(1, self.params.num_leaves);
    }

    pub fn postings(&self) -> &[Vec<usize>] {
        &self.postings
    }
}

impl NeighbourSearch for IvfIndex {
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<(f32, usize)>> {
        if k > self.params.rerank {
            return Err(Error::invalid(format!("k = {k} exceeds rerank = {}", self.params.rerank)));
        }
        let dim = self.exact.dim;
        if query.len() != dim {
            return Err(Error::shape("search", "query dimension differs from index"));
        }
        let q = unit(query);
        let leaf_scores: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, c)| {
                let d2: f32 = c.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2, i)
            })
            .collect();
        let leaves = top_k(leaf_scores, self.params.leaves_to_search);
        let mut scored = Vec::new();
        for (_, leaf) in leaves {
            for &i in &self.postings[leaf] {
                scored.push((dot(&q, &self.exact.rows[i * dim..(i + 1) * dim]), i));
            }
        }
        let mut best = top_k(scored, self.params.rerank);
        best.truncate(k);
        Ok(best)
    }

    fn len(&self) -> usize {
        self.exact.len()
    }
}

/// Softmax-weighted label distribution over the `k` most similar rows.
pub fn query_label(
    index: &dyn NeighbourSearch,
    labels: &[u8],
    query: &[f32],
    k: usize,
    tau: f64,
    num_classes: usize,
) -> Result<Vec<f64>> {
    if index.is_empty() {
        return Err(Error::data("empty memory bank"));
    }
    if k == 0 || !(tau > 0.0) {
        return Err(Error::invalid("query needs k ≥ 1 and τ > 0"));
    }
    let nn = index.search(query, k)?;
    let mx = nn.iter().map(|n| n.0 as f64).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = nn.iter().map(|n| ((n.0 as f64 - mx) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut dist = vec![0.0; num_classes];
    for ((_, i), wi) in nn.iter().zip(w) {
        let l = labels[*i] as usize;
        if l >= num_classes {
            return Err(Error::data(format!("bank label {l} outside {num_classes} classes")));
        }
        dist[l] += wi / total;
    }
    Ok(dist)
}

fn argmax(p: &[f64]) -> u8 {
    (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b }) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// IoU of every class present in ground truth or prediction.
    pub per_class: BTreeMap<u8, f64>,
    pub mean: f64,
}

/// Intersection over union per class, over pixels not ignored in the ground truth.
pub fn miou(preds: &[Mask], gts: &[Mask], num_classes: usize, ignore: u8) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("miou", "prediction and ground-truth counts differ"));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fneg = vec![0u64; num_classes];
    for (p, g) in preds.iter().zip(gts) {
        if p.height != g.height || p.width != g.width {
            return Err(Error::shape("miou", "mask sizes differ"));
        }
        for (&pv, &gv) in p.data.iter().zip(&g.data) {
            if gv == ignore {
                continue;
            }
            let (pi, gi) = (pv as usize, gv as usize);
            if pi >= num_classes || gi >= num_classes {
                return Err(Error::data(format!("label outside {num_classes} classes")));
            }
            if pi == gi {
                tp[gi] += 1;
            } else {
                fp[pi] += 1;
                fneg[gi] += 1;
            }
        }
    }
    let per_class: BTreeMap<u8, f64> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| (c as u8, tp[c] as f64 / (tp[c] + fp[c] + fneg[c]) as f64))
        .collect();
    if per_class.is_empty() {
        return Err(Error::data("no labelled pixels"));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MiouReport { per_class, mean })
}

/// Predict a mask for each query image and score it against its ground truth.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &EncoderParams<f32>,
    index: &dyn NeighbourSearch,
    bank_labels: &[u8],
    queries: &[(Image, Mask)],
    gradients: Option<&PatchGradientSpec<'_>>,
    config: &SegConfig,
    num_classes: usize,
    seed: u64,
) -> Result<(Vec<Mask>, MiouReport)> {
    config.validate()?;
    let size = params.config.image_size;
    let grid = params.config.grid();
    let preds = par::try_map_range(queries.len(), |qi| {
        let (img, gt) = &queries[qi];
        let feats = patch_features(
            params,
            &img.resize(size, size),
            gradients,
            None,
            rng::derive_seed(seed, "seg_query", qi as u64),
        )?;
        let cells = feats
            .iter()
            .map(|f| Ok(argmax(&query_label(index, bank_labels, f, config.k, config.tau, num_classes)?)))
            .collect::<Result<Vec<u8>>>()?;
        let grid_mask = Mask::new(grid, grid, cells)?;
        Ok(grid_mask.resize_nearest(gt.height, gt.width))
    })?;
    let gts: Vec<Mask> = queries.iter().map(|q| q.1.clone()).collect();
    let report = miou(&preds, &gts, num_classes, config.ignore_label)?;
    Ok((preds, report))
}

/// Patch tokens (CLS dropped) of every training image, keyed by image index,
/// for building a [`PatchSupport`].
pub fn support_tokens(params: &EncoderParams<f32>, images: &[Image]) -> Result<Vec<(u32, Tensor<f32>)>> {
    let size = params.config.image_size;
    par::try_map_range(images.len(), |i| {
        Ok((i as u32, backbone::encode(params, &images[i].resize(size, size))?.patch_tokens()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn grid_majority_and_ignore() {
        let mask = Mask::new(4, 4, vec![1, 1, 2, 2, 1, 3, 255, 255, 0, 0, 255, 255, 0, 5, 255, 255]).unwrap();
        assert_eq!(grid_labels(&mask, 2, 255).unwrap(), vec![1, 2, 0, 255]);
        assert!(grid_labels(&mask, 3, 255).is_err());
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::rng_from(seed);
        (0..n).flat_map(|_| unit(&(0..d).map(|_| r.sample(StandardNormal)).collect::<Vec<f32>>())).collect()
    }

    #[test]
    fn query_label_examples() {
        let feats = vec![1.0, 0.0, 0.0, 1.0];
        let idx = ExactIndex::new(&feats, 2).unwrap();
        let p = query_label(&idx, &[0, 1], &[1.0, 1.0], 2, 0.1, 2).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-8 && (p[1] - 0.5).abs() < 1e-8);
        let p = query_label(&idx, &[0, 1], &[1.0, 0.2], 1, 0.1, 2).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        let p = query_label(&idx, &[0, 1], &[1.0, 0.9], 2, 1e-6, 2).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        let empty = ExactIndex::new(&[], 2).unwrap();
        assert!(query_label(&empty, &[], &[1.0, 0.0], 1, 0.1, 2).is_err());
    }

    #[test]
    fn distribution_sums_to_one() {
        let feats = unit_rows(300, 8, 1);
        let labels: Vec<u8> = (0..300).map(|i| (i % 5) as u8).collect();
        let idx = ExactIndex::new(&feats, 8).unwrap();
        for q in unit_rows(20, 8, 2).chunks(8) {
            let p = query_label(&idx, &labels, q, 30, 0.02, 5).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ivf_full_scan_equals_exact() {
        let feats = unit_rows(2000, 16, 3);
        let params = IvfParams {
            num_leaves: 32,
            leaves_to_search: 32,
            rerank: 120,
            ..IvfParams::default()
        };
        let ivf = IvfIndex::build(&feats, 16, params, 1).unwrap();
        let exact = ExactIndex::new(&feats, 16).unwrap();
        assert_eq!(ivf.postings().iter().map(|p| p.len()).sum::<usize>(), 2000);
        for q in unit_rows(25, 16, 4).chunks(16) {
            assert_eq!(ivf.search(q, 30).unwrap(), exact.search(q, 30).unwrap());
        }
        assert_eq!(ivf.search(&feats[16 * 7..16 * 8], 1).unwrap()[0].1, 7);
        assert!(ivf.search(&feats[..16], 121).is_err());
        assert!(IvfIndex::build(&feats[..16 * 10], 16, IvfParams::default(), 1).is_err());
    }

    #[test]
    fn miou_examples() {
        let a = Mask::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(miou(&[a.clone()], &[a.clone()], 3, 255).unwrap().mean, 1.0);
        let b = Mask::new(2, 2, vec![2, 2, 2, 2]).unwrap();
        assert_eq!(miou(&[a.clone()], &[b], 3, 255).unwrap().mean, 0.0);
        // Squares of 4 pixels overlapping in 2: IoU 2 / 6 for the foreground class.
        let gt = Mask::new(2, 4, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        let pred = Mask::new(2, 4, vec![0, 1, 1, 0, 0, 1, 1, 0]).unwrap();
        let r = miou(&[pred], &[gt], 2, 255).unwrap();
        assert!((r.per_class[&1] - 1.0 / 3.0).abs() < 1e-12);
        let ignored = Mask::new(2, 2, vec![255, 1, 1, 1]).unwrap();
        let pred = Mask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        assert_eq!(miou(&[pred], &[ignored], 2, 255).unwrap().mean, 1.0);
        assert!(miou(&[a.clone()], &[Mask::new(1, 1, vec![0]).unwrap()], 2, 255).is_err());
    }
}
