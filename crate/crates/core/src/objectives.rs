//! Self-supervised losses whose layer gradients become features.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::augment::{self, DinoCropConfig};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::backbone::{self, attach_head, EncoderGraph, EncoderParams, GradientSource, Head, LayerGradient};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectiveKind {
    Kl,
    Dino,
    SimClr,
    SimClrPatch,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::Dino => "dino",
            Self::SimClr => "simclr",
            Self::SimClrPatch => "simclr_patch",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(Self::Kl),
            "dino" => Ok(Self::Dino),
            "simclr" => Ok(Self::SimClr),
            "simclr_patch" => Ok(Self::SimClrPatch),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

/// Which side of the KL divergence holds the uniform distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(U ‖ softmax(z/τ))`
    UniformFirst,
    /// `KL(softmax(z/τ) ‖ U)`
    SoftmaxFirst,
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UniformFirst => "uniform_first",
            Self::SoftmaxFirst => "softmax_first",
        })
    }
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform_first" => Ok(Self::UniformFirst),
            "softmax_first" => Ok(Self::SoftmaxFirst),
            other => Err(Error::Config(format!("unknown KL direction '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlConfig {
    pub tau: f64,
    pub proj_dim: usize,
    pub direction: KlDirection,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            tau: 15.0,
            proj_dim: 768,
            direction: KlDirection::UniformFirst,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinoConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub proj_dim: usize,
    pub crops: DinoCropConfig,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            tau_student: 0.1,
            tau_teacher: 0.07,
            proj_dim: 2048,
            crops: DinoCropConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimClrConfig {
    pub tau: f64,
    pub proj_dim: usize,
    /// Side the image is resized to before cutting views.
    pub view_base: usize,
    pub view_patch: usize,
    /// Views per side; `view_grid²` positives per sample.
    pub view_grid: usize,
    /// Images in the negative bank; each contributes `view_grid²` rows.
    pub bank_images: usize,
}

impl SimClrConfig {
    pub fn positives(&self) -> usize {
        self.view_grid * self.view_grid
    }

    pub fn negatives(&self) -> usize {
        self.bank_images * self.positives()
    }
}

impl Default for SimClrConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            proj_dim: 96,
            view_base: 224,
            view_patch: 112,
            view_grid: 7,
            bank_images: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    pub tau: f64,
    pub proj_dim: usize,
    pub retrieved: usize,
    pub kept: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            proj_dim: 96,
            retrieved: 2,
            kept: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveConfig {
    Kl(KlConfig),
    Dino(DinoConfig),
    SimClr(SimClrConfig),
    SimClrPatch(PatchConfig),
}

impl ObjectiveConfig {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Self::Kl(_) => ObjectiveKind::Kl,
            Self::Dino(_) => ObjectiveKind::Dino,
            Self::SimClr(_) => ObjectiveKind::SimClr,
            Self::SimClrPatch(_) => ObjectiveKind::SimClrPatch,
        }
    }

    pub fn proj_dim(&self) -> usize {
        match self {
            Self::Kl(c) => c.proj_dim,
            Self::Dino(c) => c.proj_dim,
            Self::SimClr(c) => c.proj_dim,
            Self::SimClrPatch(c) => c.proj_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.proj_dim() == 0 {
            return Err(Error::Config(format!("{} projection dim must be positive", self.kind())));
        }
        match self {
            Self::Kl(c) => positive("kl tau", c.tau),
            Self::Dino(c) => {
                positive("dino student tau", c.tau_student)?;
                positive("dino teacher tau", c.tau_teacher)?;
                if c.crops.global.count < 2 {
                    return Err(Error::Config("dino needs at least two global crops".into()));
                }
                Ok(())
            }
            Self::SimClr(c) => {
                positive("simclr tau", c.tau)?;
                if c.positives() < 2 || c.view_patch > c.view_base {
                    return Err(Error::Config("simclr needs at least two views no larger than the base".into()));
                }
                Ok(())
            }
            Self::SimClrPatch(c) => {
                positive("patch tau", c.tau)?;
                if c.kept == 0 || c.kept > c.retrieved {
                    return Err(Error::Config("patch negatives kept must lie in 1..=retrieved".into()));
                }
                Ok(())
            }
        }
    }
}

/// KL divergence between the uniform distribution and `softmax(z/τ)` over
/// the last axis, averaged over rows.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, tau: f64, direction: KlDirection) -> Result<Var> {
    let n = *tape.value(z).shape().last().ok_or_else(|| Error::shape("kl_loss", "scalar logits"))?;
    let rows = tape.value(z).len() / n;
    let log_n = (n as f64).ln();
    let ls = tape.log_softmax(z, T::c(tau))?;
    match direction {
        KlDirection::UniformFirst => {
            let m = tape.mean(ls)?;
            let neg = tape.scale(m, T::c(-1.0))?;
            tape.offset(neg, T::c(-log_n))
        }
        KlDirection::SoftmaxFirst => {
            let p = tape.softmax(z, T::c(tau))?;
            let plp = tape.mul(p, ls)?;
            let s = tape.sum(plp)?;
            let s = tape.scale(s, T::c(1.0 / rows as f64))?;
            tape.offset(s, T::c(log_n))
        }
    }
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>, tau: f64) -> Tensor<T> {
    let (rows, d) = x.as_matrix_dims();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64() / tau));
        let mut s = 0.0;
        for v in row.iter_mut() {
            let e = (v.f64() / tau - mx).exp();
            s += e;
            *v = T::c(e);
        }
        for v in row.iter_mut() {
            *v = T::c(v.f64() / s);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Cross-entropy between teacher and student distributions, averaged over
/// every (teacher view, student view) pair of distinct views.
///
/// `teacher[i]` and `student[i]` must come from the same view for
/// `i < teacher.len()`. Teacher logits are treated as constants.
pub fn dino_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: &[Var],
    teacher: &[Var],
    tau_student: f64,
    tau_teacher: f64,
) -> Result<Var> {
    if teacher.len() < 2 {
        return Err(Error::invalid("dino loss needs at least two teacher views"));
    }
    if student.len() < teacher.len() {
        return Err(Error::invalid("every teacher view must also be a student view"));
    }
    let teacher_logits: Vec<Var> = teacher.iter().map(|&t| tape.detach(t)).collect();
    let tl = tape.stack_rows(&teacher_logits)?;
    let pt = softmax_rows(tape.value(tl), tau_teacher);
    let p = pt.shape()[1];
    let (nt, ns) = (teacher.len(), student.len());

    // Row s of the target sums the teacher distributions of every other view.
    let mut target = vec![T::zero(); ns * p];
    for s in 0..ns {
        for t in (0..nt).filter(|&t| t != s) {
            for (o, &v) in target[s * p..(s + 1) * p].iter_mut().zip(pt.row(t)) {
                *o += v;
            }
        }
    }
    let pairs = nt * ns - nt;
    let zs = tape.stack_rows(student)?;
    if tape.value(zs).shape()[1] != p {
        return Err(Error::shape("dino_loss", "student and teacher dims differ"));
    }
    let ls = tape.log_softmax(zs, T::c(tau_student))?;
    let target = tape.constant(Tensor::new(vec![ns, p], target)?);
    let prod = tape.mul(target, ls)?;
    let total = tape.sum(prod)?;
    tape.scale(total, T::c(-1.0 / pairs as f64))
}

fn check_unit_rows<T: Scalar>(x: &Tensor<T>, tol: f64, what: &str) -> Result<()> {
    let (rows, d) = x.as_matrix_dims();
    for r in 0..rows {
        let n = x.data()[r * d..(r + 1) * d].iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > tol {
            return Err(Error::invalid(format!("{what} row {r} has norm {n}, expected unit norm")));
        }
    }
    Ok(())
}

/// Per-pair InfoNCE terms `[P, P]` (zero diagonal).
fn simclr_pair_terms<T: Scalar>(tape: &mut Tape<T>, z: Var, negatives: &Tensor<T>, tau: f64) -> Result<Var> {
    let zv = tape.value(z);
    if zv.rank() != 2 || zv.shape()[0] < 2 {
        return Err(Error::shape("simclr_loss", format!("need at least two positives, got {:?}", zv.shape())));
    }
    check_unit_rows(zv, 1e-4, "positive latent")?;
    let (p, d) = (zv.shape()[0], zv.shape()[1]);
    let (n, nd) = negatives.as_matrix_dims();
    if n > 0 && nd != d {
        return Err(Error::shape("simclr_loss", "negative dim differs from latents"));
    }
    let pos = tape.matmul_nt(z, z)?;
    let sims = if n > 0 {
        let bank = tape.constant(negatives.clone());
        let neg = tape.matmul_nt(z, bank)?;
        tape.concat(&[pos, neg], 1)?
    } else {
        pos
    };
    let width = p + n;
    let exclude = (0..p * width).map(|i| i / width == i % width).collect();
    let ls = tape.log_softmax_masked(sims, T::c(tau), exclude)?;
    let ls = if n > 0 { tape.slice(ls, 1, 0, p)? } else { ls };
    let off_diag: Vec<T> = (0..p * p).map(|i| if i / p == i % p { T::zero() } else { T::c(-1.0) }).collect();
    let mask = tape.constant(Tensor::new(vec![p, p], off_diag)?);
    tape.mul(ls, mask)
}

/// InfoNCE over all ordered pairs of distinct positives, with a fixed set of
/// negatives in every denominator. Rows of `z` and `negatives` must be unit norm.
pub fn simclr_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, negatives: &Tensor<T>, tau: f64) -> Result<Var> {
    let terms = simclr_pair_terms(tape, z, negatives, tau)?;
    let p = tape.value(terms).shape()[0];
    let total = tape.sum(terms)?;
    tape.scale(total, T::c(1.0 / (p * (p - 1)) as f64))
}

/// The individual `−log` probabilities that [`simclr_loss`] averages.
pub fn simclr_pair_losses<T: Scalar>(z: &Tensor<T>, negatives: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let terms = simclr_pair_terms(&mut tape, zv, negatives, tau)?;
    Ok(tape.value(terms).clone())
}

/// Fixed contrastive negatives shared by every sample of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeBank<T> {
    /// `[count, proj_dim]`, unit-norm rows.
    pub latents: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> NegativeBank<T> {
    pub fn new(latents: Tensor<T>, seed: u64) -> Result<Self> {
        if latents.rank() != 2 {
            return Err(Error::shape("negative bank", "latents must be a matrix"));
        }
        check_unit_rows(&latents, if T::NAME == "f32" { 1e-5 } else { 1e-6 }, "negative bank")?;
        Ok(Self { latents, seed })
    }

    /// Encode `config.bank_images` images drawn without replacement from
    /// `pool`, cut each into views and keep the normalized head outputs.
    pub fn build(
        params: &EncoderParams<T>,
        head: &Head<T>,
        pool: &[Image],
        config: &SimClrConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.bank_images > pool.len() {
            return Err(Error::data(format!(
                "negative bank wants {} images, only {} available",
                config.bank_images,
                pool.len()
            )));
        }
        let mut r = rng::derived_rng(seed, "negative_bank", 0);
        let mut chosen = index::sample(&mut r, pool.len(), config.bank_images).into_vec();
        chosen.sort_unstable();
        let size = params.config.image_size;
        let blocks = par::try_map_range(chosen.len(), |i| {
            let views = simclr_views(&pool[chosen[i]], config, size)?;
            let mut rows = Vec::with_capacity(views.len() * head.proj_dim());
            for v in &views {
                let z = head.apply(&backbone::encode(params, v)?.embedding)?;
                rows.extend(normalized(z.data()));
            }
            Ok(rows)
        })?;
        let data: Vec<T> = blocks.concat();
        let rows = data.len() / head.proj_dim();
        Self::new(Tensor::new(vec![rows, head.proj_dim()], data)?, seed)
    }

    pub fn len(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> NegativeBank<U> {
        NegativeBank {
            latents: self.latents.cast(),
            seed: self.seed,
        }
    }
}

fn normalized<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|&x| T::c(x.f64() / n)).collect()
}

/// Overlapping views for the contrastive objective, each resized to the
/// encoder input size.
pub fn simclr_views(image: &Image, config: &SimClrConfig, size: usize) -> Result<Vec<Image>> {
    let set = augment::patchify_overlap(image, config.view_base, config.view_patch, config.view_grid)?;
    Ok(set.resized(size).views)
}

enum Heads<T> {
    Kl(Head<T>),
    Dino { student: Head<T>, teacher: Head<T> },
    SimClr { head: Head<T>, bank: NegativeBank<T> },
}

/// An objective with its frozen heads (and negatives), ready to score views
/// of one image on a tape.
pub struct Objective<T> {
    pub config: ObjectiveConfig,
    heads: Heads<T>,
}

/// Seed of the head(s) of `kind` for a run seeded with `seed`.
pub fn head_seed(seed: u64, kind: ObjectiveKind, index: u64) -> u64 {
    rng::derive_seed(seed, &format!("head.{kind}"), index)
}

/// The projection head used for contrastive latents (also needed to build
/// the negative bank before the objective exists).
pub fn simclr_head<T: Scalar>(config: &SimClrConfig, d: usize, seed: u64) -> Result<Head<T>> {
    attach_head(d, config.proj_dim, head_seed(seed, ObjectiveKind::SimClr, 0), false)
}

impl<T: Scalar> Objective<T> {
    pub fn kl(config: KlConfig, d: usize, seed: u64) -> Result<Self> {
        let head = attach_head(d, config.proj_dim, head_seed(seed, ObjectiveKind::Kl, 0), true)?;
        Self::checked(ObjectiveConfig::Kl(config), Heads::Kl(head))
    }

    pub fn dino(config: DinoConfig, d: usize, seed: u64) -> Result<Self> {
        let student = attach_head(d, config.proj_dim, head_seed(seed, ObjectiveKind::Dino, 0), true)?;
        let teacher = attach_head(d, config.proj_dim, head_seed(seed, ObjectiveKind::Dino, 1), true)?;
        Self::checked(ObjectiveConfig::Dino(config), Heads::Dino { student, teacher })
    }

    pub fn simclr(config: SimClrConfig, head: Head<T>, bank: NegativeBank<T>) -> Result<Self> {
        if bank.dim() != head.proj_dim() {
            return Err(Error::Config("negative bank dim differs from the head".into()));
        }
        Self::checked(ObjectiveConfig::SimClr(config), Heads::SimClr { head, bank })
    }

    fn checked(config: ObjectiveConfig, heads: Heads<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, heads })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.config.kind()
    }

    pub fn cast<U: Scalar>(&self) -> Objective<U> {
        let heads = match &self.heads {
            Heads::Kl(h) => Heads::Kl(h.cast()),
            Heads::Dino { student, teacher } => Heads::Dino {
                student: student.cast(),
                teacher: teacher.cast(),
            },
            Heads::SimClr { head, bank } => Heads::SimClr {
                head: head.cast(),
                bank: bank.cast(),
            },
        };
        Objective {
            config: self.config.clone(),
            heads,
        }
    }

    /// Build this objective's scalar loss for `image` on `tape`.
    /// `view_seed` drives any random view generation.
    pub fn loss(&self, tape: &mut Tape<T>, graph: &EncoderGraph<'_, T>, image: &Image, view_seed: u64) -> Result<Var> {
        let size = graph.config().image_size;
        match (&self.heads, &self.config) {
            (Heads::Kl(head), ObjectiveConfig::Kl(c)) => {
                let view = image.resize(size, size);
                let e = graph.encode(tape, &view)?.embedding;
                let h = head.bind(tape);
                let z = h.apply(tape, e)?;
                kl_loss(tape, z, c.tau, c.direction)
            }
            (Heads::Dino { student, teacher }, ObjectiveConfig::Dino(c)) => {
                let views = augment::dino_crops(image, &c.crops, view_seed);
                let hs = student.bind(tape);
                let ht = teacher.bind(tape);
                let mut zs = Vec::with_capacity(views.global.len() + views.local.len());
                let mut zt = Vec::with_capacity(views.global.len());
                for (i, v) in views.all().enumerate() {
                    let e = graph.encode(tape, &v.resize(size, size))?.embedding;
                    if i < views.global.len() {
                        let frozen = tape.detach(e);
                        zt.push(ht.apply(tape, frozen)?);
                    }
                    zs.push(hs.apply(tape, e)?);
                }
                dino_loss(tape, &zs, &zt, c.tau_student, c.tau_teacher)
            }
            (Heads::SimClr { head, bank }, ObjectiveConfig::SimClr(c)) => {
                let views = simclr_views(image, c, size)?;
                let h = head.bind(tape);
                let mut rows = Vec::with_capacity(views.len());
                for v in &views {
                    let e = graph.encode(tape, v)?.embedding;
                    let z = h.apply(tape, e)?;
                    rows.push(tape.l2_normalize(z)?);
                }
                let z = tape.stack_rows(&rows)?;
                simclr_loss(tape, z, &bank.latents, c.tau)
            }
            _ => unreachable!("heads always match the config kind"),
        }
    }

    /// Source-layer gradient of this objective's loss on `image`.
    pub fn gradient(
        &self,
        params: &EncoderParams<T>,
        source: GradientSource,
        image: &Image,
        view_seed: u64,
    ) -> Result<LayerGradient<T>> {
        backbone::loss_gradient(params, source, |tape, graph| self.loss(tape, graph, image, view_seed))
    }
}

/// Normalized patch latents of a support set, searched by cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSupport<T> {
    /// `[M, proj_dim]`, unit-norm rows.
    pub latents: Tensor<T>,
    /// Source image of each row.
    pub owners: Vec<u32>,
}

impl<T: Scalar> PatchSupport<T> {
    /// Project each image's patch tokens (CLS excluded) through `head`.
    pub fn build(head: &Head<T>, patch_tokens: &[(u32, Tensor<T>)]) -> Result<Self> {
        let p = head.proj_dim();
        let mut data = Vec::new();
        let mut owners = Vec::new();
        for (owner, tokens) in patch_tokens {
            let z = head.apply(tokens)?;
            for r in 0..z.shape()[0] {
                data.extend(normalized(z.row(r)));
                owners.push(*owner);
            }
        }
        Ok(Self {
            latents: Tensor::new(vec![owners.len(), p], data)?,
            owners,
        })
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    /// Indices of the `k` most similar rows for each query row, skipping rows
    /// owned by `exclude`. Ties go to the smaller index.
    pub fn nearest(&self, queries: &Tensor<T>, k: usize, exclude: Option<u32>) -> Result<Vec<Vec<usize>>> {
        let eligible = self.owners.iter().filter(|&&o| Some(o) != exclude).count();
        if eligible < k || k == 0 {
            return Err(Error::data(format!("support index has {eligible} usable rows, need {k}")));
        }
        let sims = queries.matmul_nt(&self.latents)?;
        let m = self.len();
        Ok((0..sims.shape()[0])
            .map(|q| {
                let row = &sims.data()[q * m..(q + 1) * m];
                let mut idx: Vec<usize> = (0..m).filter(|&i| Some(self.owners[i]) != exclude).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
                idx.truncate(k);
                idx
            })
            .collect())
    }
}

/// Per-patch gradients of the dense contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGradients<T> {
    /// `[num_patches, d]`, CLS row dropped.
    pub grads: Tensor<T>,
    pub loss: T,
}

/// Dense contrastive loss on one image's tokens `[(T+1), d]` (CLS first):
/// every token's latent is a positive for every other, and each token adds
/// `config.kept` of its `config.retrieved` nearest support latents to the
/// shared negatives. Returns `∂L/∂token` for the patch tokens.
pub fn simclr_patch_gradients<T: Scalar>(
    tokens: &Tensor<T>,
    head: &Head<T>,
    support: &PatchSupport<T>,
    config: &PatchConfig,
    owner: Option<u32>,
    seed: u64,
) -> Result<PatchGradients<T>> {
    ObjectiveConfig::SimClrPatch(config.clone()).validate()?;
    if support.is_empty() {
        return Err(Error::data("empty support index"));
    }
    if tokens.rank() != 2 || tokens.shape()[0] < 2 {
        return Err(Error::shape("simclr_patch", "tokens must be [T+1, d] with T ≥ 1"));
    }
    let mut tape = Tape::new();
    let tok = tape.param(tokens.clone());
    let h = head.bind(&mut tape);
    let z = h.apply(&mut tape, tok)?;
    let z = tape.l2_normalize(z)?;
    let neighbours = support.nearest(tape.value(z), config.retrieved, owner)?;
    let mut r = rng::derived_rng(seed, "patch_negatives", 0);
    let p = head.proj_dim();
    let mut neg = Vec::with_capacity(neighbours.len() * config.kept * p);
    for cand in &neighbours {
        let mut keep = index::sample(&mut r, cand.len(), config.kept).into_vec();
        keep.sort_unstable();
        for k in keep {
            neg.extend_from_slice(support.latents.row(cand[k]));
        }
    }
    let negatives = Tensor::new(vec![neg.len() / p, p], neg)?;
    let loss = simclr_loss(&mut tape, z, &negatives, config.tau)?;
    let loss_value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = grads.take(tok).expect("tokens are a parameter");
    let (rows, d) = (g.shape()[0], g.shape()[1]);
    Ok(PatchGradients {
        grads: Tensor::new(vec![rows - 1, d], g.data()[d..].to_vec())?,
        loss: loss_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_encoder, EncoderConfig, Pooling};
    use rand::Rng;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec())
    }

    fn kl_value(z: &[f64], tau: f64, dir: KlDirection) -> f64 {
        let mut tape = Tape::new();
        let zv = tape.constant(v(z));
        let l = kl_loss(&mut tape, zv, tau, dir).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn kl_constant_logits_vanish() {
        for dir in [KlDirection::UniformFirst, KlDirection::SoftmaxFirst] {
            assert!(kl_value(&[3.0; 7], 15.0, dir).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_two_logit_enumeration() {
        let (s1, s2) = (1f64.exp() / (1f64.exp() + 1.0), 1.0 / (1f64.exp() + 1.0));
        let uniform_first = 0.5 * (0.5 / s1).ln() + 0.5 * (0.5 / s2).ln();
        let softmax_first = s1 * (s1 / 0.5).ln() + s2 * (s2 / 0.5).ln();
        assert!((kl_value(&[1.0, 0.0], 1.0, KlDirection::UniformFirst) - uniform_first).abs() < 1e-14);
        assert!((kl_value(&[1.0, 0.0], 1.0, KlDirection::SoftmaxFirst) - softmax_first).abs() < 1e-14);
    }

    #[test]
    fn kl_shift_invariant_and_non_negative() {
        let mut r = rng::rng_from(3);
        for _ in 0..20 {
            let z: Vec<f64> = (0..12).map(|_| r.random_range(-30.0..30.0)).collect();
            let shifted: Vec<f64> = z.iter().map(|x| x + 4.5).collect();
            let a = kl_value(&z, 15.0, KlDirection::UniformFirst);
            assert!(a >= 0.0);
            assert!((a - kl_value(&shifted, 15.0, KlDirection::UniformFirst)).abs() < 1e-12);
        }
    }

    fn dino_value(zs: &[Vec<f64>], zt: &[Vec<f64>], ts: f64, tt: f64) -> f64 {
        let mut tape = Tape::new();
        let s: Vec<Var> = zs.iter().map(|z| tape.constant(v(z))).collect();
        let t: Vec<Var> = zt.iter().map(|z| tape.constant(v(z))).collect();
        let l = dino_loss(&mut tape, &s, &t, ts, tt).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn dino_identical_logits_give_entropy() {
        let z = vec![0.3, -0.2, 1.1, 0.0];
        let zs = vec![z.clone(); 4];
        let zt = vec![z.clone(); 2];
        let p = softmax_rows(&v(&z), 0.5);
        let entropy: f64 = -p.data().iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((dino_value(&zs, &zt, 0.5, 0.5) - entropy).abs() < 1e-12);
    }

    #[test]
    fn dino_sharp_teacher_limit() {
        let teacher = vec![vec![0.0, 2.0, 1.0], vec![0.0, 2.0, 1.0]];
        let z = vec![0.4, -0.3, 0.9];
        let students = vec![z.clone(); 3];
        let ls = {
            let p = softmax_rows(&v(&z), 0.1);
            -p.data()[1].ln()
        };
        assert!((dino_value(&students, &teacher, 0.1, 1e-3) - ls).abs() < 1e-9);
    }

    #[test]
    fn dino_pair_mean_matches_enumeration() {
        let mut r = rng::rng_from(8);
        let zs: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let zt: Vec<Vec<f64>> = zs[..2].iter().map(|z| z.iter().map(|x| x * 1.7 + 0.2).collect()).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for (t, zt_row) in zt.iter().enumerate() {
            let pt = softmax_rows(&v(zt_row), 0.07);
            for (s, zs_row) in zs.iter().enumerate() {
                if s == t {
                    continue;
                }
                let ps = softmax_rows(&v(zs_row), 0.1);
                total -= pt.data().iter().zip(ps.data()).map(|(a, b)| a * b.ln()).sum::<f64>();
                pairs += 1;
            }
        }
        assert_eq!(pairs, 8);
        assert!((dino_value(&zs, &zt, 0.1, 0.07) - total / pairs as f64).abs() < 1e-10);
    }

    #[test]
    fn dino_teacher_path_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let wt = tape.param(Tensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.9, -0.4, 0.3]).unwrap());
        let ws = tape.param(Tensor::matrix(3, 2, vec![0.2, 0.1, -0.3, 0.4, 0.6, -0.1]).unwrap());
        let xs: Vec<Var> = (0..4).map(|i| tape.constant(v(&[i as f64 * 0.3 - 0.5, 0.7]))).collect();
        let student: Vec<Var> = xs.iter().map(|&x| tape.linear(x, ws, None).unwrap()).collect();
        let teacher: Vec<Var> = xs[..2].iter().map(|&x| tape.linear(x, wt, None).unwrap()).collect();
        let l = dino_loss(&mut tape, &student, &teacher, 0.1, 0.07).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(wt).unwrap().max_abs(), 0.0);
        assert!(g.get(ws).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn dino_needs_two_teachers() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(v(&[1.0, 0.0]));
        assert!(dino_loss(&mut tape, &[a, a], &[a], 0.1, 0.07).is_err());
    }

    fn simclr_value(z: &Tensor<f64>, neg: &Tensor<f64>, tau: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let l = simclr_loss(&mut tape, zv, neg, tau)?;
        Ok(tape.value(l).data()[0])
    }

    #[test]
    fn simclr_uniform_similarity_value() {
        let mut e = vec![0.0; 8];
        e[3] = 1.0;
        let z = Tensor::matrix(49, 8, e.repeat(49)).unwrap();
        let neg = Tensor::matrix(49 * 256, 8, e.repeat(49 * 256)).unwrap();
        let loss = simclr_value(&z, &neg, 0.07).unwrap();
        assert!((loss - (49.0f64 * 257.0 - 1.0).ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn simclr_two_positives_by_hand() {
        let a = [1.0, 0.0];
        let b = [0.6, 0.8];
        let n = [0.0, 1.0];
        let z = Tensor::matrix(2, 2, [a, b].concat()).unwrap();
        let neg = Tensor::matrix(1, 2, n.to_vec()).unwrap();
        let tau = 0.5;
        let dot = |x: &[f64], y: &[f64]| x[0] * y[0] + x[1] * y[1];
        let term = |i: &[f64], j: &[f64]| -> f64 {
            let num = (dot(i, j) / tau).exp();
            num.ln() * -1.0 + (num + (dot(i, &n) / tau).exp()).ln()
        };
        let expected = 0.5 * (term(&a, &b) + term(&b, &a));
        assert!((simclr_value(&z, &neg, tau).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn simclr_more_aligned_positive_lowers_loss() {
        let neg = Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let at = |theta: f64| Tensor::matrix(2, 2, vec![1.0, 0.0, theta.cos(), theta.sin()]).unwrap();
        let mut prev = f64::INFINITY;
        for step in (0..6).rev() {
            let l = simclr_value(&at(step as f64 * 0.2), &neg, 0.07).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn simclr_rejects_unnormalized_and_terms_non_negative() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(simclr_value(&z, &Tensor::zeros(vec![0, 2]), 0.07).is_err());
        let mut r = rng::rng_from(1);
        let rows: Vec<f64> = (0..5).flat_map(|_| normalized(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 0.3])).collect();
        let z = Tensor::matrix(5, 3, rows).unwrap();
        let neg = Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let terms = simclr_pair_losses(&z, &neg, 0.07).unwrap();
        assert!(terms.data().iter().all(|&t| t >= 0.0));
    }

    fn desk() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 8,
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            pooling: Pooling::Cls,
        }
    }

    fn image(seed: u64) -> Image {
        let mut r = rng::rng_from(seed);
        Image::new(3, 16, 16, (0..768).map(|_| r.random()).collect()).unwrap()
    }

    #[test]
    fn negative_bank_rows_are_unit_and_counted() {
        let params = init_encoder::<f64>(&desk(), 1).unwrap();
        let cfg = SimClrConfig {
            view_base: 16,
            view_patch: 8,
            view_grid: 3,
            bank_images: 3,
            proj_dim: 5,
            ..SimClrConfig::default()
        };
        let head = simclr_head(&cfg, 8, 2).unwrap();
        let pool: Vec<Image> = (0..5).map(image).collect();
        let bank = NegativeBank::build(&params, &head, &pool, &cfg, 4).unwrap();
        assert_eq!((bank.len(), bank.dim()), (27, 5));
        assert_eq!(bank, NegativeBank::build(&params, &head, &pool, &cfg, 4).unwrap());
        assert!(NegativeBank::build(&params, &head, &pool[..2], &cfg, 4).is_err());
    }

    #[test]
    fn objective_losses_are_deterministic() {
        let params = init_encoder::<f64>(&desk(), 1).unwrap();
        let src = GradientSource::last_attn_proj(&params.config);
        let mut dc = DinoConfig {
            proj_dim: 16,
            ..DinoConfig::default()
        };
        dc.crops.global.size = 16;
        dc.crops.local.size = 16;
        let obj = Objective::<f64>::dino(dc, 8, 3).unwrap();
        let a = obj.gradient(&params, src, &image(1), 5).unwrap();
        let b = obj.gradient(&params, src, &image(1), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.dw.max_abs() > 0.0);
        let before = params.checksum();
        let kl = Objective::<f64>::kl(KlConfig { proj_dim: 12, ..KlConfig::default() }, 8, 3).unwrap();
        kl.gradient(&params, src, &image(2), 0).unwrap();
        assert_eq!(before, params.checksum());
    }

    #[test]
    fn patch_gradients_drop_cls_and_need_support() {
        let params = init_encoder::<f64>(&desk(), 1).unwrap();
        let cfg = PatchConfig {
            proj_dim: 6,
            ..PatchConfig::default()
        };
        let head = attach_head::<f64>(8, 6, 9, false).unwrap();
        let enc: Vec<_> = (0..3).map(|i| backbone::encode(&params, &image(i)).unwrap()).collect();
        let support =
            PatchSupport::build(&head, &enc.iter().enumerate().map(|(i, e)| (i as u32, e.patch_tokens())).collect::<Vec<_>>())
                .unwrap();
        assert_eq!(support.len(), 12);
        let out = simclr_patch_gradients(&enc[0].tokens, &head, &support, &cfg, Some(0), 1).unwrap();
        assert_eq!(out.grads.shape(), &[4, 8]);
        assert!(out.grads.max_abs() > 0.0);

        let tiny = PatchSupport::build(&head, &[(0, enc[0].patch_tokens())]).unwrap();
        assert!(simclr_patch_gradients(&enc[0].tokens, &head, &tiny, &cfg, Some(0), 1).is_err());
    }

    #[test]
    fn support_nearest_excludes_owner() {
        let latents = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let s = PatchSupport {
            latents,
            owners: vec![0, 1, 1],
        };
        let q = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(s.nearest(&q, 2, None).unwrap(), vec![vec![0, 2]]);
        assert_eq!(s.nearest(&q, 2, Some(0)).unwrap(), vec![vec![2, 1]]);
        assert!(s.nearest(&q, 3, Some(0)).is_err());
    }
}
