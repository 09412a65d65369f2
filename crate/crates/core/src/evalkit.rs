//! Evaluation protocols over feature matrices.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::{par, rng};

fn check_rows(x: &[Vec<f32>], what: &str) -> Result<usize> {
    let d = x.first().map_or(0, |r| r.len());
    if x.is_empty() || d == 0 {
        return Err(Error::data(format!("{what} is empty")));
    }
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("evalkit", format!("{what} rows differ in length")));
    }
    Ok(d)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Brute-force Euclidean kNN classifier.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    features: Vec<Vec<f32>>,
    labels: Vec<i32>,
    k: usize,
}

impl KnnIndex {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<i32>, k: usize) -> Result<Self> {
        check_rows(&features, "kNN index")?;
        if features.len() != labels.len() {
            return Err(Error::shape("knn", "features and labels differ in count"));
        }
        if k == 0 || k > features.len() {
            return Err(Error::invalid(format!("k = {k} must lie in 1..={}", features.len())));
        }
        Ok(Self { features, labels, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The `k` nearest rows as `(squared distance, index)`, closest first;
    /// equal distances are ordered by index.
    pub fn neighbours(&self, query: &[f32]) -> Result<Vec<(f64, usize)>> {
        if query.len() != self.features[0].len() {
            return Err(Error::shape("knn", "query dimension differs from index"));
        }
        let mut d: Vec<(f64, usize)> = self.features.iter().enumerate().map(|(i, f)| (sq_dist(query, f), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        d.sort_by(cmp);
        Ok(d)
    }

    /// Majority label among the `k` nearest; ties go to the larger summed
    /// inverse distance, then to the smaller label.
    pub fn classify(&self, query: &[f32]) -> Result<i32> {
        let nn = self.neighbours(query)?;
        let mut votes: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
        for (d2, i) in nn {
            let e = votes.entry(self.labels[i]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += 1.0 / d2.sqrt();
        }
        let best = votes
            .into_iter()
            .max_by(|a, b| {
                a.1 .0
                    .cmp(&b.1 .0)
                    .then(a.1 .1.partial_cmp(&b.1 .1).unwrap_or(Ordering::Equal))
                    .then(b.0.cmp(&a.0))
            })
            .expect("k ≥ 1");
        Ok(best.0)
    }

    pub fn classify_batch(&self, queries: &[Vec<f32>]) -> Result<Vec<i32>> {
        par::try_map_range(queries.len(), |i| self.classify(&queries[i]))
    }
}

/// `shots` indices per class, sampled without replacement; returned sorted.
pub fn few_shot_subset(labels: &[i32], shots: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = Vec::with_capacity(by_class.len() * shots);
    for (class, members) in &by_class {
        if members.len() < shots {
            return Err(Error::data(format!(
                "class {class} has {} samples, fewer than {shots} shots",
                members.len()
            )));
        }
        let mut r = rng::derived_rng(seed, "few_shot", *class as i64 as u64);
        out.extend(index::sample(&mut r, members.len(), shots).into_iter().map(|j| members[j]));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccuracyMode {
    Top1,
    MeanPerClass,
}

impl std::fmt::Display for AccuracyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Top1 => "top1",
            Self::MeanPerClass => "mean_per_class",
        })
    }
}

impl std::str::FromStr for AccuracyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "top1" => Ok(Self::Top1),
            "mean_per_class" => Ok(Self::MeanPerClass),
            other => Err(Error::Config(format!("unknown accuracy mode '{other}'"))),
        }
    }
}

/// Recall of every class present in `labels`.
pub fn per_class_accuracy(preds: &[i32], labels: &[i32]) -> Result<BTreeMap<i32, f64>> {
    if preds.len() != labels.len() {
        return Err(Error::shape("accuracy", "predictions and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::data("accuracy of an empty set"));
    }
    let mut tally: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        let e = tally.entry(l).or_insert((0, 0));
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    Ok(tally.into_iter().map(|(c, (hit, n))| (c, hit as f64 / n as f64)).collect())
}

pub fn accuracy(preds: &[i32], labels: &[i32], mode: AccuracyMode) -> Result<f64> {
    match mode {
        AccuracyMode::Top1 => {
            per_class_accuracy(preds, labels)?;
            Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
        }
        AccuracyMode::MeanPerClass => {
            let pc = per_class_accuracy(preds, labels)?;
            Ok(pc.values().sum::<f64>() / pc.len() as f64)
        }
    }
}

/// `a(c) − b(c)` for every class; both maps must cover the same classes.
pub fn per_class_delta(a: &BTreeMap<i32, f64>, b: &BTreeMap<i32, f64>) -> Result<Vec<(i32, f64)>> {
    if a.keys().ne(b.keys()) {
        return Err(Error::data("per-class reports cover different classes"));
    }
    Ok(a.iter().map(|(c, va)| (*c, va - b[c])).collect())
}

pub fn per_class_delta_csv(deltas: &[(i32, f64)]) -> String {
    let mut s = String::from("class,delta\n");
    for (c, d) in deltas {
        let _ = writeln!(s, "{c},{d:.6}");
    }
    s
}

/// Rows as an `n × p` matrix.
pub fn to_matrix(rows: &[Vec<f32>]) -> Result<DMatrix<f64>> {
    let p = check_rows(rows, "matrix")?;
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j] as f64))
}

fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    c
}

/// Linear centered kernel alignment between two representations of the
/// same `n` samples.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape("linear_cka", "inputs differ in sample count"));
    }
    if x.nrows() < 2 {
        return Err(Error::data("CKA needs at least two samples"));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let xx = (xc.transpose() * &xc).norm();
    let yy = (yc.transpose() * &yc).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::data("CKA input has zero variance"));
    }
    let xy = (yc.transpose() * &xc).norm();
    Ok(xy * xy / (xx * yy))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            max_iter: 300,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `clusters × D`
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

/// Nearest centroid of every row and its squared distance.
pub fn assign_nearest(x: &[Vec<f32>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let d = centroids[0].len();
    let c = Tensor::new(vec![centroids.len(), d], centroids.concat()).expect("centroid rows");
    let cn: Vec<f64> = centroids.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    const CHUNK: usize = 512;
    let chunks = par::map_range(x.len().div_ceil(CHUNK), |b| {
        let rows = &x[b * CHUNK..((b + 1) * CHUNK).min(x.len())];
        let xm = Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect())
            .expect("rows");
        let dots = xm.matmul_nt(&c).expect("dims");
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let xn: f64 = r.iter().map(|&v| v as f64 * v as f64).sum();
                let row = &dots.data()[i * centroids.len()..(i + 1) * centroids.len()];
                let mut best = (0, f64::INFINITY);
                for (j, &dot) in row.iter().enumerate() {
                    let dist = (xn - 2.0 * dot + cn[j]).max(0.0);
                    if dist < best.1 {
                        best = (j, dist);
                    }
                }
                best
            })
            .collect::<Vec<_>>()
    });
    chunks.concat()
}

fn sq_dist64(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, y)| (x as f64 - y).powi(2)).sum()
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(x: &[Vec<f32>], config: &KMeansConfig) -> Result<KMeansResult> {
    let d = check_rows(x, "k-means input")?;
    let k = config.clusters;
    if k == 0 || k > x.len() {
        return Err(Error::invalid(format!("{} clusters for {} points", k, x.len())));
    }
    let mut r = rng::derived_rng(config.seed, "kmeans", 0);
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();

    let mut centroids = vec![to64(&x[r.random_range(0..x.len())])];
    let mut closest: Vec<f64> = x.iter().map(|p| sq_dist64(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total <= 0.0 {
            r.random_range(0..x.len())
        } else {
            let mut target = r.random::<f64>() * total;
            let mut pick = x.len() - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        let c = to64(&x[next]);
        for (cl, p) in closest.iter_mut().zip(x) {
            *cl = cl.min(sq_dist64(p, &c));
        }
        centroids.push(c);
    }

    let mut inertia = Vec::new();
    let mut assignments = vec![0; x.len()];
    let mut reseeded = 0;
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        let nearest = assign_nearest(x, &centroids);
        for (a, &(j, _)) in assignments.iter_mut().zip(&nearest) {
            *a = j;
        }
        inertia.push(x.iter().zip(&assignments).map(|(p, &j)| sq_dist64(p, &centroids[j])).sum());

        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in x.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, &v) in sums[j].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut shift = 0.0f64;
        let mut taken = BTreeSet::new();
        for j in 0..k {
            let new = if counts[j] == 0 {
                // Empty cluster: restart it at the point farthest from its centroid.
                reseeded += 1;
                let far = (0..x.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        sq_dist64(&x[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist64(&x[b], &centroids[assignments[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("k ≤ n");
                taken.insert(far);
                to64(&x[far])
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            let moved: f64 = new.iter().zip(&centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            shift = shift.max(moved);
            centroids[j] = new;
        }
        if shift < config.tol {
            break;
        }
    }
    let nearest = assign_nearest(x, &centroids);
    for (a, &(j, _)) in assignments.iter_mut().zip(&nearest) {
        *a = j;
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
        reseeded,
    })
}

/// Minimum-cost assignment of rows to columns. Rectangular inputs are padded
/// with zero-cost dummies; `result[row]` is `None` when a row was matched to
/// a dummy column.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 || cost.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("cost matrix must be non-empty and rectangular"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    let n = rows.max(cols);
    let a = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    // Potentials over 1-based rows/columns; column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    Ok(out)
}

/// Fraction of samples whose cluster is matched to their class under the
/// best one-to-one cluster/class matching.
pub fn cluster_overlap(assignments: &[usize], labels: &[i32]) -> Result<f64> {
    if assignments.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape("cluster_overlap", "assignments and labels must be equal and non-empty"));
    }
    let clusters: Vec<usize> = assignments.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let classes: Vec<i32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut counts = vec![vec![0.0f64; classes.len()]; clusters.len()];
    for (a, l) in assignments.iter().zip(labels) {
        let i = clusters.binary_search(a).expect("present");
        let j = classes.binary_search(l).expect("present");
        counts[i][j] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    let m = hungarian(&cost)?;
    let matched: f64 = m.iter().enumerate().filter_map(|(i, j)| j.map(|j| counts[i][j])).sum();
    Ok(matched / labels.len() as f64)
}

/// Multinomial logistic regression `softmax(W·x + b)` with an L2 penalty on `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub classes: Vec<i32>,
    /// `C × (D + 1)`: weights with the bias in the last column.
    pub params: Vec<f64>,
    pub dim: usize,
    pub epochs: usize,
}

fn design(x: &[Vec<f32>]) -> Tensor<f64> {
    let d = x[0].len();
    let mut data = Vec::with_capacity(x.len() * (d + 1));
    for r in x {
        data.extend(r.iter().map(|&v| v as f64));
        data.push(1.0);
    }
    Tensor::new(vec![x.len(), d + 1], data).expect("design rows")
}

/// Mean cross-entropy plus `λ/2·‖W‖²` (bias unpenalized) and its gradient
/// with respect to `params` (`C × (D+1)`). `targets` are class positions.
pub fn probe_objective(params: &[f64], xd: &Tensor<f64>, targets: &[usize], classes: usize, lambda: f64) -> (f64, Vec<f64>) {
    let (n, d1) = (xd.shape()[0], xd.shape()[1]);
    let w = Tensor::new(vec![classes, d1], params.to_vec()).expect("param shape");
    let logits = xd.matmul_nt(&w).expect("dims");
    let mut resid = vec![0.0f64; n * classes];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[targets[i]];
        for c in 0..classes {
            resid[i * classes + c] = (row[c] - lse).exp() - if c == targets[i] { 1.0 } else { 0.0 };
        }
    }
    let resid = Tensor::new(vec![n, classes], resid).expect("resid");
    // grad = residᵀ·X / n
    let rt = Tensor::new(vec![classes, n], (0..classes * n).map(|k| resid.data()[(k % n) * classes + k / n]).collect())
        .expect("transpose");
    let mut grad = rt.matmul(xd).expect("dims").into_data();
    grad.iter_mut().for_each(|g| *g /= n as f64);
    loss /= n as f64;
    for c in 0..classes {
        for j in 0..d1 - 1 {
            let k = c * d1 + j;
            loss += 0.5 * lambda * params[k] * params[k];
            grad[k] += lambda * params[k];
        }
    }
    (loss, grad)
}

impl LogisticModel {
    /// Full-batch gradient descent with a backtracking (Armijo) step size.
    pub fn fit(x: &[Vec<f32>], y: &[i32], lambda: f64, max_epochs: usize) -> Result<Self> {
        let dim = check_rows(x, "probe training set")?;
        if x.len() != y.len() {
            return Err(Error::shape("probe", "features and labels differ in count"));
        }
        let classes: Vec<i32> = y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return Err(Error::data("probe needs at least two classes"));
        }
        let targets: Vec<usize> = y.iter().map(|l| classes.binary_search(l).expect("present")).collect();
        let xd = design(x);
        let c = classes.len();
        let mut params = vec![0.0f64; c * (dim + 1)];
        let (mut f, mut g) = probe_objective(&params, &xd, &targets, c, lambda);
        let mut step = 1.0f64;
        let mut epochs = 0;
        while epochs < max_epochs {
            let gn2: f64 = g.iter().map(|v| v * v).sum();
            if gn2.sqrt() < 1e-10 {
                break;
            }
            epochs += 1;
            step *= 2.0;
            loop {
                let trial: Vec<f64> = params.iter().zip(&g).map(|(p, gi)| p - step * gi).collect();
                let (ft, gt) = probe_objective(&trial, &xd, &targets, c, lambda);
                if ft <= f - 0.5 * step * gn2 || step < 1e-12 {
                    params = trial;
                    f = ft;
                    g = gt;
                    break;
                }
                step *= 0.5;
            }
            if !f.is_finite() {
                return Err(Error::NonFinite { op: "logistic_probe" });
            }
        }
        Ok(Self {
            classes,
            params,
            dim,
            epochs,
        })
    }

    pub fn probabilities(&self, x: &[f32]) -> Vec<f64> {
        let d1 = self.dim + 1;
        let logits: Vec<f64> = self
            .params
            .chunks_exact(d1)
            .map(|w| w[..self.dim].iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() + w[self.dim])
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[Vec<f32>]) -> Vec<i32> {
        x.iter()
            .map(|r| {
                let p = self.probabilities(r);
                let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                self.classes[best]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lambdas: Vec<f64>,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl ProbeConfig {
    /// `count` evenly spaced values from `lo` to `hi` inclusive.
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![lo];
        }
        (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambdas: Self::linspace(5e-6, 5e-4, 5),
            max_epochs: 300,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Per-class stratified split into (train, validation) index lists.
pub fn stratified_split(labels: &[i32], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, members) in by_class {
        let mut r = rng::derived_rng(seed, "stratified_split", class as i64 as u64);
        let order = index::sample(&mut r, members.len(), members.len()).into_vec();
        let nv = if members.len() >= 2 {
            ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1)
        } else {
            0
        };
        for (rank, &j) in order.iter().enumerate() {
            if rank < nv {
                val.push(members[j]);
            } else {
                train.push(members[j]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Validation accuracy for each λ, in grid order.
    pub validation: Vec<(f64, f64)>,
    pub best_lambda: f64,
    pub test_accuracy: f64,
}

/// Select λ on a stratified validation split, refit on all training data
/// and report top-1 accuracy on the test set.
pub fn logistic_probe(
    train_x: &[Vec<f32>],
    train_y: &[i32],
    test_x: &[Vec<f32>],
    test_y: &[i32],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if config.lambdas.is_empty() {
        return Err(Error::Config("probe needs at least one λ".into()));
    }
    let (tr, va) = stratified_split(train_y, config.val_fraction, config.seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<f32>>, Vec<i32>) {
        (idx.iter().map(|&i| train_x[i].clone()).collect(), idx.iter().map(|&i| train_y[i]).collect())
    };
    let (tx, ty) = pick(&tr);
    let (vx, vy) = pick(&va);
    let validation = par::try_map_range(config.lambdas.len(), |i| {
        let lambda = config.lambdas[i];
        let m = LogisticModel::fit(&tx, &ty, lambda, config.max_epochs)?;
        Ok((lambda, accuracy(&m.predict(&vx), &vy, AccuracyMode::Top1)?))
    })?;
    let best_lambda = validation
        .iter()
        .fold(None::<(f64, f64)>, |best, &(l, a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((l, a)),
        })
        .expect("non-empty grid")
        .0;
    let model = LogisticModel::fit(train_x, train_y, best_lambda, config.max_epochs)?;
    let test_accuracy = accuracy(&model.predict(test_x), test_y, AccuracyMode::Top1)?;
    Ok(ProbeReport {
        validation,
        best_lambda,
        test_accuracy,
    })
}

/// Average precision of one ranking given the relevant set.
pub fn average_precision(ranking: &[usize], relevant: &BTreeSet<usize>) -> f64 {
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if relevant.is_empty() {
        0.0
    } else {
        sum / relevant.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Mean average precision with gallery items ranked by cosine similarity
/// (ties by index). Queries without relevant items are skipped and counted.
pub fn retrieval_map(queries: &[Vec<f32>], gallery: &[Vec<f32>], relevant: &[Vec<usize>]) -> Result<RetrievalReport> {
    let d = check_rows(gallery, "gallery")?;
    if queries.len() != relevant.len() {
        return Err(Error::shape("retrieval_map", "one relevance set per query required"));
    }
    if queries.iter().any(|q| q.len() != d) {
        return Err(Error::shape("retrieval_map", "query dimension differs from gallery"));
    }
    let unit = |v: &[f32]| {
        let n = v.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt().max(1e-300);
        v.iter().map(|&a| a as f64 / n).collect::<Vec<f64>>()
    };
    let g: Vec<Vec<f64>> = gallery.iter().map(|r| unit(r)).collect();
    let aps = par::map_range(queries.len(), |qi| {
        if relevant[qi].is_empty() {
            return None;
        }
        let q = unit(&queries[qi]);
        let sims: Vec<f64> = g.iter().map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        Some(average_precision(&order, &relevant[qi].iter().copied().collect()))
    });
    let done: Vec<f64> = aps.iter().flatten().copied().collect();
    let skipped = aps.len() - done.len();
    if done.is_empty() {
        return Err(Error::data("no query has a relevant gallery item"));
    }
    Ok(RetrievalReport {
        map: done.iter().sum::<f64>() / done.len() as f64,
        evaluated: done.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use rand_distr::StandardNormal;

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut r = rng::rng_from(seed);
        (0..n).map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn knn_exact_match_returns_own_label() {
        let x = gaussian_rows(30, 4, 1);
        let y: Vec<i32> = (0..30).map(|i| i % 3).collect();
        let idx = KnnIndex::new(x.clone(), y.clone(), 1).unwrap();
        for (row, &l) in x.iter().zip(&y) {
            assert_eq!(idx.classify(row).unwrap(), l);
        }
        assert!(KnnIndex::new(x.clone(), y.clone(), 31).is_err());
        assert!(KnnIndex::new(vec![], vec![], 1).is_err());
    }

    #[test]
    fn knn_tie_breaks() {
        // Two votes each; class 1 neighbours are closer.
        let x = vec![vec![3.0f32], vec![-3.0], vec![1.0], vec![-1.0]];
        let idx = KnnIndex::new(x, vec![0, 0, 1, 1], 4).unwrap();
        assert_eq!(idx.classify(&[0.0]).unwrap(), 1);
        // Fully symmetric: smaller class wins.
        let idx = KnnIndex::new(vec![vec![1.0f32], vec![-1.0]], vec![7, 2], 2).unwrap();
        assert_eq!(idx.classify(&[0.0]).unwrap(), 2);
    }

    #[test]
    fn knn_duplicated_coordinates_same_predictions() {
        let x = gaussian_rows(200, 5, 2);
        let y: Vec<i32> = (0..200).map(|i| i % 4).collect();
        let q = gaussian_rows(40, 5, 3);
        let dup = |v: &Vec<Vec<f32>>| v.iter().map(|r| [r.clone(), r.clone()].concat()).collect::<Vec<_>>();
        let a = KnnIndex::new(x.clone(), y.clone(), 20).unwrap().classify_batch(&q).unwrap();
        let b = KnnIndex::new(dup(&x), y, 20).unwrap().classify_batch(&dup(&q)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn few_shot_counts() {
        let labels: Vec<i32> = (0..200).map(|i| i % 10).collect();
        let s = few_shot_subset(&labels, 5, 4).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s, few_shot_subset(&labels, 5, 4).unwrap());
        for c in 0..10 {
            assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        assert!(few_shot_subset(&labels, 21, 4).is_err());
    }

    #[test]
    fn accuracy_modes() {
        let labels = [0, 0, 0, 1];
        let preds = [0, 0, 0, 0];
        assert_eq!(accuracy(&preds, &labels, AccuracyMode::Top1).unwrap(), 0.75);
        assert_eq!(accuracy(&preds, &labels, AccuracyMode::MeanPerClass).unwrap(), 0.5);
        assert_eq!(accuracy(&labels, &labels, AccuracyMode::Top1).unwrap(), 1.0);
        assert!(accuracy(&[], &[], AccuracyMode::Top1).is_err());
    }

    #[test]
    fn per_class_delta_toy() {
        let labels = [0, 0, 1, 1, 2, 2];
        let a = per_class_accuracy(&[0, 0, 1, 0, 2, 1], &labels).unwrap();
        let b = per_class_accuracy(&[0, 1, 1, 1, 0, 1], &labels).unwrap();
        let d = per_class_delta(&a, &b).unwrap();
        assert_eq!(d, vec![(0, 0.5), (1, -0.5), (2, 0.5)]);
        let mean: f64 = d.iter().map(|x| x.1).sum::<f64>() / 3.0;
        let ma = accuracy(&[0, 0, 1, 0, 2, 1], &labels, AccuracyMode::MeanPerClass).unwrap();
        let mb = accuracy(&[0, 1, 1, 1, 0, 1], &labels, AccuracyMode::MeanPerClass).unwrap();
        assert!((mean - (ma - mb)).abs() < 1e-12);
        assert!(per_class_delta(&a, &a).unwrap().iter().all(|x| x.1 == 0.0));
        assert!(per_class_delta_csv(&d).starts_with("class,delta\n0,0.500000\n"));
        let mut c = a.clone();
        c.insert(9, 1.0);
        assert!(per_class_delta(&a, &c).is_err());
    }

    #[test]
    fn cka_properties() {
        let x = to_matrix(&gaussian_rows(100, 8, 5)).unwrap();
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        let scaled = &x * -3.5;
        assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-10);
        let q = nalgebra::linalg::QR::new(to_matrix(&gaussian_rows(8, 8, 6)).unwrap()).q();
        assert!((linear_cka(&x, &(&x * q)).unwrap() - 1.0).abs() < 1e-10);
        let y = to_matrix(&gaussian_rows(100, 5, 7)).unwrap();
        assert!((linear_cka(&x, &y).unwrap() - linear_cka(&y, &x).unwrap()).abs() < 1e-10);
        let big_x = to_matrix(&gaussian_rows(1000, 64, 8)).unwrap();
        let big_y = to_matrix(&gaussian_rows(1000, 64, 9)).unwrap();
        assert!(linear_cka(&big_x, &big_y).unwrap() < 0.2);
        assert!(linear_cka(&DMatrix::zeros(5, 2), &x.rows(0, 5).into_owned()).is_err());
    }

    fn blobs(per: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<i32>) {
        let mut r = rng::rng_from(seed);
        let centers = [[0.0f32, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(vec![m[0] + r.sample::<f32, _>(StandardNormal), m[1] + r.sample::<f32, _>(StandardNormal)]);
                y.push(c as i32);
            }
        }
        (x, y)
    }

    #[test]
    fn kmeans_separated_blobs_overlap_one() {
        let (x, y) = blobs(50, 1);
        let res = kmeans(&x, &KMeansConfig::new(4, 3)).unwrap();
        assert!(res.inertia.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert_eq!(cluster_overlap(&res.assignments, &y).unwrap(), 1.0);
        assert_eq!(res, kmeans(&x, &KMeansConfig::new(4, 3)).unwrap());
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let x = vec![vec![1.0f32, 1.0]; 10];
        let res = kmeans(&x, &KMeansConfig::new(3, 0)).unwrap();
        assert_eq!(res.assignments.len(), 10);
        assert!(kmeans(&x, &KMeansConfig::new(11, 0)).is_err());
    }

    fn brute_min(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.len()])
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut r = rng::rng_from(11);
        for _ in 0..20 {
            let cost: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| r.random_range(0..50) as f64).collect()).collect();
            let m = hungarian(&cost).unwrap();
            let total: f64 = m.iter().enumerate().map(|(i, j)| cost[i][j.unwrap()]).sum();
            assert_eq!(total, brute_min(&cost));
        }
        let ident: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian(&ident).unwrap(), (0..4).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn hungarian_rectangular() {
        let cost = vec![vec![5.0, 1.0, 9.0]];
        assert_eq!(hungarian(&cost).unwrap(), vec![Some(1)]);
        let tall = vec![vec![4.0], vec![2.0], vec![3.0]];
        assert_eq!(hungarian(&tall).unwrap(), vec![None, Some(0), None]);
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let x = gaussian_rows(12, 3, 4);
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let xd = design(&x);
        let mut r = rng::rng_from(1);
        let p: Vec<f64> = (0..12).map(|_| r.random_range(-0.5..0.5)).collect();
        let (_, g) = probe_objective(&p, &xd, &y, 3, 0.3);
        let fd = finite_diff_gradient(|q: &[f64]| Ok(probe_objective(q, &xd, &y, 3, 0.3).0), &p, 1e-6).unwrap();
        let err = crate::autodiff::max_relative_error(&g, &fd, 1e-8);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn probe_separable_and_heavily_regularized() {
        let x: Vec<Vec<f32>> = (0..40).map(|i| vec![if i < 20 { -1.0 - i as f32 * 0.05 } else { 1.0 + i as f32 * 0.05 }, (i % 7) as f32 * 0.1]).collect();
        let y: Vec<i32> = (0..40).map(|i| (i >= 20) as i32).collect();
        let m = LogisticModel::fit(&x, &y, 1e-6, 300).unwrap();
        assert_eq!(accuracy(&m.predict(&x), &y, AccuracyMode::Top1).unwrap(), 1.0);
        let heavy = LogisticModel::fit(&x, &y, 1e6, 300).unwrap();
        for r in &x {
            let p = heavy.probabilities(r);
            assert!((p[0] - 0.5).abs() < 1e-3, "{p:?}");
        }
        assert!(LogisticModel::fit(&x, &vec![1; 40], 1e-3, 10).is_err());
    }

    #[test]
    fn probe_grid_and_split() {
        let g = ProbeConfig::default().lambdas;
        assert_eq!(g.len(), 5);
        assert!((g[0] - 5e-6).abs() < 1e-18 && (g[4] - 5e-4).abs() < 1e-18);
        assert!((g[1] - (5e-6 + 0.25 * (5e-4 - 5e-6))).abs() < 1e-15);
        let labels: Vec<i32> = (0..50).map(|i| i % 2).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 3);
        assert_eq!((tr.len(), va.len()), (40, 10));
        assert_eq!(va.iter().filter(|&&i| labels[i] == 0).count(), 5);

        let (x, y) = blobs(20, 9);
        let rep = logistic_probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(rep.validation.len(), 5);
        assert!(rep.test_accuracy > 0.95);
    }

    #[test]
    fn retrieval_examples() {
        let gallery = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let r = retrieval_map(&[vec![1.0, 0.1]], &gallery, &[vec![0]]).unwrap();
        assert_eq!(r.map, 1.0);
        let r = retrieval_map(&[vec![1.0, 0.1]], &gallery, &[vec![1]]).unwrap();
        assert_eq!(r.map, 0.5);
        let r = retrieval_map(&[vec![1.0, 0.1], vec![0.0, 1.0]], &gallery, &[vec![], vec![1]]).unwrap();
        assert_eq!((r.evaluated, r.skipped), (1, 1));
        assert!(retrieval_map(&[vec![1.0, 0.0]], &[], &[vec![0]]).is_err());
    }

    #[test]
    fn average_precision_brute_force() {
        let mut r = rng::rng_from(5);
        for _ in 0..50 {
            let n = 12;
            let ranking = index::sample(&mut r, n, n).into_vec();
            let rel: BTreeSet<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
            if rel.is_empty() {
                continue;
            }
            // Independent form: mean over relevant items of precision at their position.
            let mut total = 0.0;
            for &item in &rel {
                let pos = ranking.iter().position(|&x| x == item).unwrap();
                let above = ranking[..=pos].iter().filter(|x| rel.contains(x)).count();
                total += above as f64 / (pos + 1) as f64;
            }
            assert!((average_precision(&ranking, &rel) - total / rel.len() as f64).abs() < 1e-12);
        }
    }
}
