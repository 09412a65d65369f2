//! Run configuration.
//!
//! Files are TOML restricted to flat sections of scalar keys (plus a few
//! short arrays). Every key is optional; anything missing takes the default
//! below, and unknown keys are rejected so typos surface as config errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::augment::{CropSpec, DinoCropConfig, JitterConfig};
use crate::backbone::{EncoderConfig, GradientSource, LayerKind, Pooling};
use crate::error::{Error, Result};
use crate::evalkit::{AccuracyMode, KMeansConfig, ProbeConfig};
use crate::features::ProjectionKind;
use crate::objectives::{DinoConfig, KlConfig, KlDirection, ObjectiveKind, PatchConfig, SimClrConfig};
use crate::segmem::{IvfParams, SegConfig};

macro_rules! serde_via_str {
    ($($t:ty),*) => {$(
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

serde_via_str!(
    ObjectiveKind,
    KlDirection,
    ProjectionKind,
    Pooling,
    LayerKind,
    AccuracyMode,
    Backbone,
    SegMode,
    IndexKind
);

/// Architecture tag; selects the automatic PCA width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Desk,
    VitS,
    VitB,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::VitS => "vit_s",
            Self::VitB => "vit_b",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "vit_s" => Ok(Self::VitS),
            "vit_b" => Ok(Self::VitB),
            other => Err(Error::Config(format!("unknown backbone tag '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegMode {
    Full,
    FewShot,
}

impl fmt::Display for SegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::FewShot => "few_shot",
        })
    }
}

impl FromStr for SegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "few_shot" => Ok(Self::FewShot),
            other => Err(Error::Config(format!("unknown segmentation mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexKind {
    Exact,
    Ivf,
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Ivf => "ivf",
        })
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "ivf" => Ok(Self::Ivf),
            other => Err(Error::Config(format!("unknown index kind '{other}'"))),
        }
    }
}

/// PCA output width: chosen from the backbone tag, disabled, or fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaDim {
    Auto,
    Off,
    Fixed(usize),
}

impl Serialize for PcaDim {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Off => s.serialize_str("none"),
            Self::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PcaDim {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(Self::Fixed(n as usize)),
            Raw::Str(s) if s == "auto" => Ok(Self::Auto),
            Raw::Str(s) if s == "none" => Ok(Self::Off),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("pca dim must be auto, none or an integer, got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub backbone: Backbone,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: Backbone::Desk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
    /// Zero every attention output projection so the pooled embedding no
    /// longer depends on the input.
    pub collapse_attention: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            image_size: e.image_size,
            patch_size: e.patch_size,
            depth: e.depth,
            dim: e.dim,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            pooling: e.pooling,
            collapse_attention: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientSection {
    pub objectives: Vec<ObjectiveKind>,
    /// Block of the source layer; negative values count from the end.
    pub block: i64,
    pub layer: LayerKind,
    pub projection: ProjectionKind,
}

impl Default for GradientSection {
    fn default() -> Self {
        Self {
            objectives: vec![ObjectiveKind::Kl, ObjectiveKind::Dino, ObjectiveKind::SimClr],
            block: -1,
            layer: LayerKind::AttnProj,
            projection: ProjectionKind::Binary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSection {
    pub proj_dim: usize,
    pub tau: f64,
    pub direction: KlDirection,
}

impl Default for KlSection {
    fn default() -> Self {
        let c = KlConfig::default();
        Self {
            proj_dim: c.proj_dim,
            tau: c.tau,
            direction: c.direction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DinoSection {
    pub proj_dim: usize,
    pub global_crops: usize,
    pub global_crop_size: usize,
    pub global_crop_scale: [f64; 2],
    pub local_crops: usize,
    pub local_crop_size: usize,
    pub local_crop_scale: [f64; 2],
    pub teacher_tau: f64,
    pub student_tau: f64,
}

impl Default for DinoSection {
    fn default() -> Self {
        let c = DinoConfig::default();
        Self {
            proj_dim: c.proj_dim,
            global_crops: c.crops.global.count,
            global_crop_size: c.crops.global.size,
            global_crop_scale: [c.crops.global.scale.0, c.crops.global.scale.1],
            local_crops: c.crops.local.count,
            local_crop_size: c.crops.local.size,
            local_crop_scale: [c.crops.local.scale.0, c.crops.local.scale.1],
            teacher_tau: c.tau_teacher,
            student_tau: c.tau_student,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimClrSection {
    pub positive_views: usize,
    pub negative_views: usize,
    /// Images whose views form the fixed negative batch.
    pub negative_images: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub view_base: usize,
    pub view_patch: usize,
}

impl Default for SimClrSection {
    fn default() -> Self {
        let c = SimClrConfig::default();
        Self {
            positive_views: c.positives(),
            negative_views: c.positives(),
            negative_images: c.bank_images,
            proj_dim: c.proj_dim,
            tau: c.tau,
            view_base: c.view_base,
            view_patch: c.view_patch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSection {
    pub dim: PcaDim,
    pub vit_s: usize,
    pub vit_b: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        Self {
            dim: PcaDim::Auto,
            vit_s: 384,
            vit_b: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSection {
    pub k: usize,
    pub shots: usize,
    pub accuracy: AccuracyMode,
}

impl Default for KnnSection {
    fn default() -> Self {
        Self {
            k: 20,
            shots: 5,
            accuracy: AccuracyMode::Top1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Cluster count; 0 means one per class.
    pub clusters: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let c = KMeansConfig::new(1, 0);
        Self {
            clusters: 0,
            max_iter: c.max_iter,
            tol: c.tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_count: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            lambda_min: 5e-6,
            lambda_max: 5e-4,
            lambda_count: 5,
            max_epochs: 300,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub mode: SegMode,
    pub image_size: usize,
    /// Fuse per-patch contrastive gradients with the patch embeddings.
    pub fungi: bool,
    pub index: IndexKind,
    pub ignore_label: u8,
    pub augment: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_delta: f64,
    pub jitter_p: f64,
    pub num_leaves: usize,
    pub dims_per_block: usize,
    /// Recorded for completeness; the IVF index scores candidates exactly.
    pub anisotropic_threshold: f64,
    pub training_sample: usize,
    pub training_iters: usize,
    pub patch_proj_dim: usize,
    pub patch_tau: f64,
    pub retrieved_negatives: usize,
    pub loss_negatives: usize,
}

impl Default for SegmentSection {
    fn default() -> Self {
        let s = SegConfig::full();
        let ivf = IvfParams::default();
        let p = PatchConfig::default();
        Self {
            mode: SegMode::Full,
            image_size: 512,
            fungi: true,
            index: IndexKind::Ivf,
            ignore_label: s.ignore_label,
            augment: s.augment,
            scale_min: s.scale.0,
            scale_max: s.scale.1,
            jitter_delta: s.jitter.delta,
            jitter_p: s.jitter.p,
            num_leaves: ivf.num_leaves,
            dims_per_block: 4,
            anisotropic_threshold: 0.2,
            training_sample: ivf.training_sample,
            training_iters: ivf.training_iters,
            patch_proj_dim: p.proj_dim,
            patch_tau: p.tau,
            retrieved_negatives: p.retrieved,
            loss_negatives: p.kept,
        }
    }
}

/// Settings that differ between the full-data and few-shot protocols.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentModeSection {
    pub k: usize,
    pub tau: f64,
    pub epochs: usize,
    /// Bank row cap after augmentation; 0 keeps every row.
    pub bank_size: usize,
    pub leaves_to_search: usize,
    pub rerank: usize,
    /// Seeded subset of training images; 0 uses all of them.
    pub train_images: usize,
}

impl SegmentModeSection {
    fn full() -> Self {
        let s = SegConfig::full();
        let ivf = IvfParams::default();
        Self {
            k: s.k,
            tau: s.tau,
            epochs: s.epochs,
            bank_size: 0,
            leaves_to_search: ivf.leaves_to_search,
            rerank: ivf.rerank,
            train_images: 0,
        }
    }

    fn few_shot() -> Self {
        let s = SegConfig::few_shot();
        Self {
            k: s.k,
            tau: s.tau,
            epochs: s.epochs,
            bank_size: 2048 * 10_000,
            leaves_to_search: 256,
            rerank: 1800,
            train_images: 0,
        }
    }
}

/// Keys present in a mode section; missing ones keep that mode's default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeOverrides {
    k: Option<usize>,
    tau: Option<f64>,
    epochs: Option<usize>,
    bank_size: Option<usize>,
    leaves_to_search: Option<usize>,
    rerank: Option<usize>,
    train_images: Option<usize>,
}

impl ModeOverrides {
    fn apply(self, mut m: SegmentModeSection) -> SegmentModeSection {
        m.k = self.k.unwrap_or(m.k);
        m.tau = self.tau.unwrap_or(m.tau);
        m.epochs = self.epochs.unwrap_or(m.epochs);
        m.bank_size = self.bank_size.unwrap_or(m.bank_size);
        m.leaves_to_search = self.leaves_to_search.unwrap_or(m.leaves_to_search);
        m.rerank = self.rerank.unwrap_or(m.rerank);
        m.train_images = self.train_images.unwrap_or(m.train_images);
        m
    }
}

fn full_mode<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SegmentModeSection, D::Error> {
    Ok(ModeOverrides::deserialize(d)?.apply(SegmentModeSection::full()))
}

fn few_shot_mode<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SegmentModeSection, D::Error> {
    Ok(ModeOverrides::deserialize(d)?.apply(SegmentModeSection::few_shot()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub encoder: EncoderSection,
    pub gradients: GradientSection,
    pub kl: KlSection,
    pub dino: DinoSection,
    pub simclr: SimClrSection,
    pub pca: PcaSection,
    pub knn: KnnSection,
    pub cluster: ClusterSection,
    pub probe: ProbeSection,
    pub segment: SegmentSection,
    #[serde(deserialize_with = "full_mode")]
    pub segment_full: SegmentModeSection,
    #[serde(deserialize_with = "few_shot_mode")]
    pub segment_few_shot: SegmentModeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            encoder: EncoderSection::default(),
            gradients: GradientSection::default(),
            kl: KlSection::default(),
            dino: DinoSection::default(),
            simclr: SimClrSection::default(),
            pca: PcaSection::default(),
            knn: KnnSection::default(),
            cluster: ClusterSection::default(),
            probe: ProbeSection::default(),
            segment: SegmentSection::default(),
            segment_full: SegmentModeSection::full(),
            segment_few_shot: SegmentModeSection::few_shot(),
        }
    }
}

/// The sections that determine extracted features.
#[derive(Serialize)]
struct ExtractionView<'a> {
    run: &'a RunSection,
    encoder: &'a EncoderSection,
    gradients: &'a GradientSection,
    kl: &'a KlSection,
    dino: &'a DinoSection,
    simclr: &'a SimClrSection,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; also the config echo embedded in outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections are plain scalars")
    }

    /// Hash of the full canonical text.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_toml())
    }

    /// Hash of only the sections that shape extracted features, so banks
    /// stay comparable when evaluation settings change.
    pub fn extraction_hash(&self) -> String {
        let view = ExtractionView {
            run: &self.run,
            encoder: &self.encoder,
            gradients: &self.gradients,
            kl: &self.kl,
            dino: &self.dino,
            simclr: &self.simclr,
        };
        sha256_hex(&toml::to_string(&view).expect("config sections are plain scalars"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder_config()?;
        self.segment_encoder_config()?;
        self.source()?;
        if self.gradients.objectives.is_empty() {
            return bad("at least one objective is required".into());
        }
        if self.gradients.objectives.contains(&ObjectiveKind::SimClrPatch) {
            return bad("simclr_patch is a segmentation objective, not an image objective".into());
        }
        let mut seen = self.gradients.objectives.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.gradients.objectives.len() {
            return bad("objectives are listed more than once".into());
        }
        for c in [
            crate::objectives::ObjectiveConfig::Kl(self.kl_config()),
            crate::objectives::ObjectiveConfig::Dino(self.dino_config()),
            crate::objectives::ObjectiveConfig::SimClr(self.simclr_config()?),
            crate::objectives::ObjectiveConfig::SimClrPatch(self.patch_config()),
        ] {
            c.validate()?;
        }
        for (name, [lo, hi]) in [("global", self.dino.global_crop_scale), ("local", self.dino.local_crop_scale)] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad(format!("dino {name} crop scale must satisfy 0 < min ≤ max ≤ 1"));
            }
        }
        if let PcaDim::Fixed(0) = self.pca.dim {
            return bad("pca dim must be positive".into());
        }
        if self.knn.k == 0 || self.knn.shots == 0 {
            return bad("knn k and shots must be positive".into());
        }
        let p = &self.probe;
        if p.lambda_count == 0 || p.lambda_min < 0.0 || p.lambda_max < p.lambda_min || p.max_epochs == 0 {
            return bad("probe grid must be non-empty, non-negative and ordered".into());
        }
        if !(0.0 < p.val_fraction && p.val_fraction < 1.0) {
            return bad("probe val_fraction must lie in (0, 1)".into());
        }
        let s = &self.segment;
        if !(0.0 < s.scale_min && s.scale_min <= s.scale_max) {
            return bad("segment scale range must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&s.jitter_p) || s.jitter_delta < 0.0 {
            return bad("segment jitter needs p in [0, 1] and delta ≥ 0".into());
        }
        for mode in [SegMode::Full, SegMode::FewShot] {
            self.seg_config(mode).validate()?;
            let ivf = self.ivf_params(mode);
            if ivf.leaves_to_search == 0 || ivf.leaves_to_search > ivf.num_leaves || ivf.rerank < self.mode(mode).k {
                return bad(format!("{mode} index must search 1..=num_leaves leaves and rerank at least k"));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let e = &self.encoder;
        let c = EncoderConfig {
            image_size: e.image_size,
            patch_size: e.patch_size,
            depth: e.depth,
            dim: e.dim,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            pooling: e.pooling,
        };
        c.validate()?;
        Ok(c)
    }

    /// The encoder at the segmentation input resolution.
    pub fn segment_encoder_config(&self) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            image_size: self.segment.image_size,
            ..self.encoder_config()?
        };
        c.validate()?;
        Ok(c)
    }

    pub fn source(&self) -> Result<GradientSource> {
        let depth = self.encoder.depth as i64;
        let b = self.gradients.block;
        let idx = if b < 0 { depth + b } else { b };
        if !(0..depth).contains(&idx) {
            return Err(Error::Config(format!("gradient block {b} out of range for depth {depth}")));
        }
        Ok(GradientSource {
            block_index: idx as usize,
            layer_kind: self.gradients.layer,
        })
    }

    pub fn kl_config(&self) -> KlConfig {
        KlConfig {
            tau: self.kl.tau,
            proj_dim: self.kl.proj_dim,
            direction: self.kl.direction,
        }
    }

    pub fn dino_config(&self) -> DinoConfig {
        let d = &self.dino;
        DinoConfig {
            tau_student: d.student_tau,
            tau_teacher: d.teacher_tau,
            proj_dim: d.proj_dim,
            crops: DinoCropConfig {
                global: CropSpec {
                    count: d.global_crops,
                    scale: (d.global_crop_scale[0], d.global_crop_scale[1]),
                    size: d.global_crop_size,
                },
                local: CropSpec {
                    count: d.local_crops,
                    scale: (d.local_crop_scale[0], d.local_crop_scale[1]),
                    size: d.local_crop_size,
                },
            },
        }
    }

    pub fn simclr_config(&self) -> Result<SimClrConfig> {
        let s = &self.simclr;
        let grid = (s.positive_views as f64).sqrt().round() as usize;
        if grid * grid != s.positive_views {
            return Err(Error::Config(format!(
                "simclr positive_views must be a square grid, got {}",
                s.positive_views
            )));
        }
        if s.negative_views != s.positive_views {
            return Err(Error::Config(
                "simclr negatives are cut like the positives; negative_views must equal positive_views".into(),
            ));
        }
        Ok(SimClrConfig {
            tau: s.tau,
            proj_dim: s.proj_dim,
            view_base: s.view_base,
            view_patch: s.view_patch,
            view_grid: grid,
            bank_images: s.negative_images,
        })
    }

    pub fn patch_config(&self) -> PatchConfig {
        let s = &self.segment;
        PatchConfig {
            tau: s.patch_tau,
            proj_dim: s.patch_proj_dim,
            retrieved: s.retrieved_negatives,
            kept: s.loss_negatives,
        }
    }

    /// Resolved PCA width, `None` when PCA is disabled.
    pub fn pca_dim(&self) -> Option<usize> {
        match self.pca.dim {
            PcaDim::Off => None,
            PcaDim::Fixed(n) => Some(n),
            PcaDim::Auto => match self.run.backbone {
                Backbone::Desk => None,
                Backbone::VitS => Some(self.pca.vit_s),
                Backbone::VitB => Some(self.pca.vit_b),
            },
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            lambdas: ProbeConfig::linspace(p.lambda_min, p.lambda_max, p.lambda_count),
            max_epochs: p.max_epochs,
            val_fraction: p.val_fraction,
            seed: crate::rng::derive_seed(self.run.seed, "probe", 0),
        }
    }

    pub fn kmeans_config(&self, classes: usize) -> KMeansConfig {
        let c = &self.cluster;
        KMeansConfig {
            clusters: if c.clusters == 0 { classes } else { c.clusters },
            max_iter: c.max_iter,
            tol: c.tol,
            seed: crate::rng::derive_seed(self.run.seed, "kmeans", 0),
        }
    }

    pub fn mode(&self, mode: SegMode) -> &SegmentModeSection {
        match mode {
            SegMode::Full => &self.segment_full,
            SegMode::FewShot => &self.segment_few_shot,
        }
    }

    pub fn seg_config(&self, mode: SegMode) -> SegConfig {
        let s = &self.segment;
        let m = self.mode(mode);
        SegConfig {
            k: m.k,
            tau: m.tau,
            epochs: m.epochs,
            augment: s.augment,
            scale: (s.scale_min, s.scale_max),
            jitter: JitterConfig {
                delta: s.jitter_delta,
                p: s.jitter_p,
            },
            bank_size: (m.bank_size > 0).then_some(m.bank_size),
            ignore_label: s.ignore_label,
        }
    }

    pub fn ivf_params(&self, mode: SegMode) -> IvfParams {
        let s = &self.segment;
        let m = self.mode(mode);
        IvfParams {
            num_leaves: s.num_leaves,
            leaves_to_search: m.leaves_to_search,
            rerank: m.rerank,
            training_sample: s.training_sample,
            training_iters: s.training_iters,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let c = RunConfig::default();
        let text = c.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_files_override_only_their_keys() {
        let c = RunConfig::parse("[run]\nseed = 9\n\n[kl]\ntau = 2.5\n\n[pca]\ndim = 32\n").unwrap();
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.kl.tau, 2.5);
        assert_eq!(c.kl.proj_dim, 768);
        assert_eq!(c.pca_dim(), Some(32));
        assert_eq!(c.segment_few_shot, RunConfig::default().segment_few_shot);
        assert_ne!(c.hash(), RunConfig::default().hash());

        let c = RunConfig::parse("[segment_full]\nk = 1\n\n[segment_few_shot]\nepochs = 2\n").unwrap();
        assert_eq!((c.segment_full.k, c.segment_full.tau), (1, 0.02));
        assert_eq!((c.segment_few_shot.epochs, c.segment_few_shot.k), (2, 90));
        assert!(RunConfig::parse("[segment_full]\nkk = 1\n").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "[kl]\ntemperature = 3.0\n",
            "[gradients]\nobjectives = [\"kl\", \"barlow\"]\n",
            "[gradients]\nblock = 5\n",
            "[simclr]\npositive_views = 48\n",
            "[kl]\ntau = 0.0\n",
            "[pca]\ndim = \"half\"\n",
            "[segment_full]\nrerank = 10\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn extraction_hash_ignores_evaluation_settings() {
        let a = RunConfig::default();
        let b = RunConfig::parse("[knn]\nk = 5\n").unwrap();
        let c = RunConfig::parse("[run]\nseed = 1\n").unwrap();
        assert_eq!(a.extraction_hash(), b.extraction_hash());
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.extraction_hash(), c.extraction_hash());
    }

    #[test]
    fn derived_settings() {
        let c = RunConfig::default();
        assert_eq!(c.source().unwrap(), GradientSource::last_attn_proj(&c.encoder_config().unwrap()));
        assert_eq!(c.simclr_config().unwrap(), SimClrConfig::default());
        assert_eq!(c.dino_config(), DinoConfig::default());
        assert_eq!(c.kl_config(), KlConfig::default());
        assert_eq!(c.seg_config(SegMode::Full), SegConfig::full());
        assert_eq!(c.pca_dim(), None);
        let s = RunConfig::parse("[run]\nbackbone = \"vit_s\"\n").unwrap();
        assert_eq!(s.pca_dim(), Some(384));
        let b = RunConfig::parse("[run]\nbackbone = \"vit_b\"\n").unwrap();
        assert_eq!(b.pca_dim(), Some(512));
        assert_eq!(c.segment_encoder_config().unwrap().num_patches(), 1024);
    }
}
