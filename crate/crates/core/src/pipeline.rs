//! End-to-end commands over files: synthesize data, extract feature banks,
//! reduce them with PCA and run every evaluation protocol.
//!
//! Directory layout: datasets are `train.fngi` / `test.fngi`; feature banks
//! are `train.bank.fngi` / `test.bank.fngi` (plus `pca.fngi` after
//! [`fuse_pca`]); reports are `<command>.csv` / `<command>.txt`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::backbone::{attach_head, init_encoder, EncoderParams};
use crate::config::{IndexKind, RunConfig, SegMode};
use crate::error::{Error, Result};
use crate::evalkit::{self, KnnIndex};
use crate::features::{fuse, Extractor, FeatureBank, PcaModel, Provenance, Split};
use crate::image::{Image, Mask};
use crate::objectives::{head_seed, simclr_head, NegativeBank, Objective, ObjectiveKind, PatchSupport};
use crate::report::{delta, metric, EvalReport, Table};
use crate::segmem::{self, ExactIndex, IvfIndex, NeighbourSearch, PatchGradientSpec, PatchMemoryBank};
use crate::store::TensorStore;
use crate::synth::{self, Dataset, SynthSpec};
use crate::{par, rng};

pub const TRAIN_DATA: &str = "train.fngi";
pub const TEST_DATA: &str = "test.fngi";
pub const TRAIN_BANK: &str = "train.bank.fngi";
pub const TEST_BANK: &str = "test.bank.fngi";
pub const PCA_MODEL: &str = "pca.fngi";

fn data_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(match split {
        Split::Train => TRAIN_DATA,
        Split::Test => TEST_DATA,
    })
}

fn bank_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(match split {
        Split::Train => TRAIN_BANK,
        Split::Test => TEST_BANK,
    })
}

fn load_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let path = data_path(dir, split);
    if !path.exists() {
        return Err(Error::data(format!("missing dataset {}", path.display())));
    }
    Dataset::load(&path)
}

/// Write seeded train and test splits into `out`.
pub fn synth(spec: &SynthSpec, test_n: usize, out: &Path) -> Result<(Dataset, Dataset)> {
    let train = synth::generate(spec, Split::Train)?;
    let test = synth::generate(&SynthSpec { n: test_n, ..spec.clone() }, Split::Test)?;
    train.save(&data_path(out, Split::Train))?;
    test.save(&data_path(out, Split::Test))?;
    info!("wrote {} train and {} test {} samples to {}", train.len(), test.len(), spec.kind, out.display());
    Ok((train, test))
}

/// The run's encoder at `config`'s classification resolution.
pub fn encoder(config: &RunConfig) -> Result<EncoderParams<f32>> {
    let mut params = init_encoder(&config.encoder_config()?, config.run.seed)?;
    if config.encoder.collapse_attention {
        params.collapse_attention_output();
    }
    Ok(params)
}

/// Objectives in configuration order; the contrastive negative bank is
/// drawn from `pool`.
pub fn objectives(config: &RunConfig, params: &EncoderParams<f32>, pool: &[Image]) -> Result<Vec<Objective<f32>>> {
    let d = params.config.dim;
    let seed = config.run.seed;
    config
        .gradients
        .objectives
        .iter()
        .map(|kind| match kind {
            ObjectiveKind::Kl => Objective::kl(config.kl_config(), d, seed),
            ObjectiveKind::Dino => Objective::dino(config.dino_config(), d, seed),
            ObjectiveKind::SimClr => {
                let c = config.simclr_config()?;
                let head = simclr_head(&c, d, seed)?;
                let t = Instant::now();
                let bank = NegativeBank::build(params, &head, pool, &c, seed)?;
                info!("negative bank: {} latents in {:.2}s", bank.len(), t.elapsed().as_secs_f64());
                Objective::simclr(c, head, bank)
            }
            ObjectiveKind::SimClrPatch => Err(Error::Config("simclr_patch is only used by segment".into())),
        })
        .collect()
}

fn provenance(config: &RunConfig, kinds: Vec<ObjectiveKind>) -> Result<Provenance> {
    Ok(Provenance {
        config_hash: config.extraction_hash(),
        seed: config.run.seed,
        source: config.source()?,
        objectives: kinds,
        projection: config.gradients.projection,
        pca_dim: None,
    })
}

/// Feature bank of one dataset split.
pub fn extract_bank(config: &RunConfig, extractor: &Extractor<'_>, data: &Dataset, split: Split) -> Result<FeatureBank> {
    let t = Instant::now();
    let records = par::try_map_range(data.len(), |i| {
        extractor.record(i as u32, Some(data.labels[i]), &data.images[i])
    })?;
    let secs = t.elapsed().as_secs_f64();
    info!(
        "{split}: {} samples in {secs:.2}s ({:.2} samples/s, {} threads)",
        records.len(),
        records.len() as f64 / secs.max(1e-9),
        par::current_threads()
    );
    FeatureBank::new(split, provenance(config, extractor.kinds())?, records)
}

/// Extract train and test banks from `data_dir` into `out`.
pub fn extract(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<(FeatureBank, FeatureBank)> {
    let train = load_dataset(data_dir, Split::Train)?;
    let test = load_dataset(data_dir, Split::Test)?;
    let params = encoder(config)?;
    let objs = objectives(config, &params, &train.images)?;
    let extractor = Extractor::new(&params, config.source()?, objs, config.gradients.projection, config.run.seed)?;
    let echo = config.to_toml();
    let tr = extract_bank(config, &extractor, &train, Split::Train)?;
    tr.save(&bank_path(out, Split::Train), &echo)?;
    let te = extract_bank(config, &extractor, &test, Split::Test)?;
    te.save(&bank_path(out, Split::Test), &echo)?;
    Ok((tr, te))
}

/// Load both banks and check they came from this configuration.
pub fn load_banks(config: &RunConfig, dir: &Path) -> Result<(FeatureBank, FeatureBank)> {
    let load = |split| {
        let path = bank_path(dir, split);
        if !path.exists() {
            return Err(Error::data(format!("missing feature bank {}", path.display())));
        }
        FeatureBank::load(&path)
    };
    let (train, test) = (load(Split::Train)?, load(Split::Test)?);
    let want = config.extraction_hash();
    for b in [&train, &test] {
        if b.provenance.config_hash != want {
            return Err(Error::Config(format!(
                "{} bank was extracted with config {} but the current config hashes to {want}",
                b.split, b.provenance.config_hash
            )));
        }
    }
    if train.provenance.pca_dim != test.provenance.pca_dim {
        return Err(Error::data("train and test banks differ in PCA reduction"));
    }
    Ok((train, test))
}

/// Fit PCA on the train bank's fused vectors and rewrite both banks.
pub fn fuse_pca(config: &RunConfig, banks: &Path, out_dim: Option<usize>, out: &Path) -> Result<PcaModel> {
    let (mut train, mut test) = load_banks(config, banks)?;
    if train.provenance.pca_dim.is_some() {
        return Err(Error::data("banks are already PCA-reduced"));
    }
    let dim = out_dim
        .or(config.pca_dim())
        .ok_or_else(|| Error::Config("PCA is disabled for this backbone; set [pca] dim or pass a width".into()))?;
    let fused = train.fused();
    let model = PcaModel::fit(&fused, dim)?;
    let total = total_variance(&fused);
    for bank in [&mut train, &mut test] {
        for r in &mut bank.records {
            r.fused = model.apply(&r.fused)?;
        }
        bank.provenance.pca_dim = Some(dim);
    }
    let echo = config.to_toml();
    train.save(&bank_path(out, Split::Train), &echo)?;
    test.save(&bank_path(out, Split::Test), &echo)?;
    let mut s = TensorStore::new();
    model.save_into(&mut s, "pca")?;
    s.put_text("config", &echo)?;
    s.write(&out.join(PCA_MODEL))?;
    let kept = model.explained_variance.iter().sum::<f64>();
    info!("PCA {} -> {dim}, retained variance {:.4}", model.in_dim, kept / total.max(f64::MIN_POSITIVE));
    Ok(model)
}

/// Sum of per-column sample variances.
fn total_variance(rows: &[Vec<f32>]) -> f64 {
    let n = rows.len();
    let dim = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0f64; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64 / n as f64);
    }
    let ss: f64 = rows.iter().flat_map(|r| r.iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2))).sum();
    ss / (n.max(2) - 1) as f64
}

/// Named feature matrices of a bank: the embedding alone, each cumulative
/// fusion in objective order, and the stored fused vector when PCA applied.
pub fn feature_sets(bank: &FeatureBank) -> Result<Vec<(String, Vec<Vec<f32>>)>> {
    let kinds = &bank.provenance.objectives;
    let mut sets = Vec::with_capacity(kinds.len() + 2);
    for upto in 0..=kinds.len() {
        let name = std::iter::once("embedding".to_string())
            .chain(kinds[..upto].iter().map(|k| k.to_string()))
            .collect::<Vec<_>>()
            .join(" + ");
        let rows = bank
            .records
            .iter()
            .map(|r| {
                let mut seg: Vec<&[f32]> = r.gradients[..upto].iter().map(|g| g.as_slice()).collect();
                seg.push(&r.embedding);
                fuse(&seg)
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push((name, rows));
    }
    if let Some(d) = bank.provenance.pca_dim {
        let name = format!("{} (pca {d})", sets.last().expect("embedding row").0);
        sets.push((name, bank.fused()));
    }
    Ok(sets)
}

fn report(command: &str, config: &RunConfig, train: &FeatureBank, table: Table) -> EvalReport {
    EvalReport::new(command, &config.to_toml(), table)
        .with("config_hash", config.hash())
        .with("extraction_hash", &train.provenance.config_hash)
        .with("seed", config.run.seed)
}

/// kNN accuracy on the full train bank and on a seeded few-shot subset, plus
/// per-class deltas of the last feature set against the embedding.
pub fn eval(config: &RunConfig, train: &FeatureBank, test: &FeatureBank) -> Result<(EvalReport, EvalReport)> {
    let (ytr, yte) = (train.labels()?, test.labels()?);
    let k = config.knn.k;
    let mode = config.knn.accuracy;
    let shot_seed = rng::derive_seed(config.run.seed, "few_shot", 0);
    let subset = evalkit::few_shot_subset(&ytr, config.knn.shots, shot_seed)?;
    let (tr_sets, te_sets) = (feature_sets(train)?, feature_sets(test)?);
    let mut table = Table::new(["features", "dim", "full", "few_shot", "delta_full", "delta_few_shot"]);
    let mut base = None;
    let mut per_class = Vec::new();
    for ((name, xtr), (_, xte)) in tr_sets.iter().zip(&te_sets) {
        let t = Instant::now();
        let full_preds = KnnIndex::new(xtr.clone(), ytr.clone(), k.min(xtr.len()))?.classify_batch(xte)?;
        let full = evalkit::accuracy(&full_preds, &yte, mode)?;
        let fx: Vec<Vec<f32>> = subset.iter().map(|&i| xtr[i].clone()).collect();
        let fy: Vec<i32> = subset.iter().map(|&i| ytr[i]).collect();
        let few = evalkit::accuracy(&KnnIndex::new(fx, fy, k.min(subset.len()))?.classify_batch(xte)?, &yte, mode)?;
        info!("{name}: knn {full:.4} / {few:.4} in {:.2}s", t.elapsed().as_secs_f64());
        let (bf, bs) = *base.get_or_insert((full, few));
        table.push([
            name.clone(),
            xtr[0].len().to_string(),
            metric(full),
            metric(few),
            delta(full - bf),
            delta(few - bs),
        ])?;
        per_class.push(evalkit::per_class_accuracy(&full_preds, &yte)?);
    }
    let main = report("eval", config, train, table)
        .with("k", k)
        .with("shots", config.knn.shots)
        .with("accuracy", mode)
        .with("few_shot_seed", shot_seed);
    let last = per_class.last().expect("at least the embedding row");
    let deltas = evalkit::per_class_delta(last, &per_class[0])?;
    let mut dt = Table::new(["class", "delta"]);
    for (c, d) in deltas {
        dt.push([c.to_string(), delta(d)])?;
    }
    let name = &tr_sets.last().expect("embedding row").0;
    let pc = report("per_class_delta", config, train, dt).with("compared", format!("{name} vs embedding"));
    Ok((main, pc))
}

/// k-means on the test bank, matched to classes with the Hungarian method.
pub fn cluster(config: &RunConfig, train: &FeatureBank, test: &FeatureBank) -> Result<EvalReport> {
    let y = test.labels()?;
    let classes = y.iter().collect::<BTreeSet<_>>().len();
    let kc = config.kmeans_config(classes);
    let mut table = Table::new(["features", "clusters", "overlap", "iterations", "delta"]);
    let mut base = None;
    for (name, x) in feature_sets(test)? {
        let res = evalkit::kmeans(&x, &kc)?;
        let overlap = evalkit::cluster_overlap(&res.assignments, &y)?;
        let b = *base.get_or_insert(overlap);
        table.push([name, kc.clusters.to_string(), metric(overlap), res.iterations.to_string(), delta(overlap - b)])?;
    }
    Ok(report("cluster", config, train, table).with("kmeans_seed", kc.seed))
}

/// Logistic-regression probe with λ chosen on a stratified validation split.
pub fn probe(config: &RunConfig, train: &FeatureBank, test: &FeatureBank) -> Result<EvalReport> {
    let (ytr, yte) = (train.labels()?, test.labels()?);
    let pc = config.probe_config();
    let mut table = Table::new(["features", "best_lambda", "accuracy", "delta"]);
    let mut base = None;
    for ((name, xtr), (_, xte)) in feature_sets(train)?.into_iter().zip(feature_sets(test)?) {
        let r = evalkit::logistic_probe(&xtr, &ytr, &xte, &yte, &pc)?;
        let b = *base.get_or_insert(r.test_accuracy);
        table.push([name, format!("{:e}", r.best_lambda), metric(r.test_accuracy), delta(r.test_accuracy - b)])?;
    }
    Ok(report("probe", config, train, table)
        .with("lambdas", pc.lambdas.iter().map(|l| format!("{l:e}")).collect::<Vec<_>>().join(" "))
        .with("max_epochs", pc.max_epochs)
        .with("split_seed", pc.seed))
}

/// Test samples query the train bank; same-label items are relevant.
pub fn retrieve(config: &RunConfig, train: &FeatureBank, test: &FeatureBank) -> Result<EvalReport> {
    let (ytr, yte) = (train.labels()?, test.labels()?);
    let relevant: Vec<Vec<usize>> =
        yte.iter().map(|&q| (0..ytr.len()).filter(|&i| ytr[i] == q).collect()).collect();
    let mut table = Table::new(["features", "map", "evaluated", "skipped", "delta"]);
    let mut base = None;
    for ((name, xtr), (_, xte)) in feature_sets(train)?.into_iter().zip(feature_sets(test)?) {
        let r = evalkit::retrieval_map(&xte, &xtr, &relevant)?;
        let b = *base.get_or_insert(r.map);
        table.push([name, metric(r.map), r.evaluated.to_string(), r.skipped.to_string(), delta(r.map - b)])?;
    }
    Ok(report("retrieve", config, train, table))
}

/// Pairwise linear CKA between the embedding and each gradient feature on
/// the test bank.
pub fn cka(config: &RunConfig, train: &FeatureBank, test: &FeatureBank) -> Result<EvalReport> {
    let mut named = vec![("embedding".to_string(), test.embeddings())];
    for k in &test.provenance.objectives {
        named.push((k.to_string(), test.gradient_features(*k)?));
    }
    let mats = named
        .iter()
        .map(|(_, x)| evalkit::to_matrix(x))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(std::iter::once("features".to_string()).chain(named.iter().map(|n| n.0.clone())));
    for (i, (name, _)) in named.iter().enumerate() {
        let mut row = vec![name.clone()];
        for m in &mats {
            row.push(metric(evalkit::linear_cka(&mats[i], m)?));
        }
        table.push(row)?;
    }
    Ok(report("cka", config, train, table))
}

/// Options of the segmentation command that are not part of the config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentOptions {
    pub mode: SegMode,
    /// Query with the training images themselves.
    pub self_bank: bool,
}

fn with_masks(d: &Dataset) -> Result<Vec<(Image, Mask)>> {
    let masks = d.masks.as_ref().ok_or_else(|| Error::data("segmentation needs a dataset with masks"))?;
    Ok(d.images.iter().cloned().zip(masks.iter().cloned()).collect())
}

fn num_classes(sets: &[&[(Image, Mask)]], ignore: u8) -> usize {
    sets.iter()
        .flat_map(|s| s.iter())
        .flat_map(|(_, m)| m.data.iter().copied())
        .filter(|&v| v != ignore)
        .max()
        .map_or(1, |m| m as usize + 1)
}

/// Retrieval-based segmentation of the test split (or the train split with
/// `self_bank`), with and without per-patch contrastive gradients.
pub fn segment(config: &RunConfig, data_dir: &Path, options: SegmentOptions) -> Result<EvalReport> {
    let seed = config.run.seed;
    let mode_cfg = config.mode(options.mode);
    let seg = config.seg_config(options.mode);
    let mut train = with_masks(&load_dataset(data_dir, Split::Train)?)?;
    if mode_cfg.train_images > 0 && mode_cfg.train_images < train.len() {
        let mut r = rng::derived_rng(seed, "segment_subset", 0);
        let mut keep = rand::seq::index::sample(&mut r, train.len(), mode_cfg.train_images).into_vec();
        keep.sort_unstable();
        train = keep.into_iter().map(|i| train[i].clone()).collect();
    }
    let queries = if options.self_bank {
        train.clone()
    } else {
        with_masks(&load_dataset(data_dir, Split::Test)?)?
    };
    let classes = num_classes(&[&train, &queries], seg.ignore_label);
    let mut params = init_encoder(&config.segment_encoder_config()?, seed)?;
    if config.encoder.collapse_attention {
        params.collapse_attention_output();
    }
    let size = params.config.image_size;
    let patch_cfg = config.patch_config();
    let head = attach_head::<f32>(params.config.dim, patch_cfg.proj_dim, head_seed(seed, ObjectiveKind::SimClrPatch, 0), false)?;
    let variants: Vec<bool> = if config.segment.fungi { vec![false, true] } else { vec![false] };
    let mut table = Table::new(
        ["features", "bank_rows", "dim", "miou", "delta"]
            .into_iter()
            .map(String::from)
            .chain((0..classes).map(|c| format!("iou_{c}"))),
    );
    let mut base = None;
    for fungi in variants {
        let t = Instant::now();
        let support = if fungi {
            let imgs: Vec<Image> = train.iter().map(|(i, _)| i.resize(size, size)).collect();
            Some(PatchSupport::build(&head, &segmem::support_tokens(&params, &imgs)?)?)
        } else {
            None
        };
        let spec = support.as_ref().map(|s| PatchGradientSpec {
            head: &head,
            support: s,
            config: &patch_cfg,
        });
        let bank = PatchMemoryBank::build(&params, &train, spec.as_ref(), &seg, seed)?;
        let index: Box<dyn NeighbourSearch> = match config.segment.index {
            IndexKind::Exact => Box::new(ExactIndex::from_bank(&bank)?),
            IndexKind::Ivf => Box::new(IvfIndex::from_bank(&bank, config.ivf_params(options.mode), seed)?),
        };
        let (_, rep) = segmem::evaluate(&params, index.as_ref(), &bank.labels, &queries, spec.as_ref(), &seg, classes, seed)?;
        let name = if fungi { "embedding + simclr_patch" } else { "embedding" };
        info!("segment {name}: mIoU {:.4} over {} bank rows in {:.2}s", rep.mean, bank.len(), t.elapsed().as_secs_f64());
        let b = *base.get_or_insert(rep.mean);
        let mut row = vec![name.to_string(), bank.len().to_string(), bank.dim.to_string(), metric(rep.mean), delta(rep.mean - b)];
        row.extend((0..classes).map(|c| rep.per_class.get(&(c as u8)).map_or("".to_string(), |v| metric(*v))));
        table.push(row)?;
    }
    Ok(EvalReport::new("segment", &config.to_toml(), table)
        .with("config_hash", config.hash())
        .with("seed", seed)
        .with("mode", options.mode)
        .with("k", seg.k)
        .with("tau", seg.tau)
        .with("epochs", seg.epochs)
        .with("index", config.segment.index)
        .with("bank_order", "augment then subsample")
        .with("queries", if options.self_bank { "train (self bank)" } else { "test" }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthKind;

    fn tiny_config() -> RunConfig {
        RunConfig::parse(
            "[encoder]\nimage_size = 16\npatch_size = 8\ndim = 16\nheads = 2\n\n\
             [gradients]\nobjectives = [\"kl\", \"simclr\"]\n\n\
             [simclr]\npositive_views = 4\nnegative_views = 4\nnegative_images = 4\nview_base = 32\nview_patch = 16\n\n\
             [kl]\nproj_dim = 32\n\n[knn]\nk = 3\nshots = 2\n",
        )
        .unwrap()
    }

    #[test]
    fn extract_then_evaluate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let mut spec = SynthSpec::new(SynthKind::Blobs, 12, 3, 1);
        spec.size = 16;
        synth(&spec, 6, dir.path()).unwrap();
        let (tr, te) = extract(&cfg, dir.path(), dir.path()).unwrap();
        assert_eq!(tr.len(), 12);
        assert_eq!(te.records[0].fused.len(), 3 * 16);
        let (ltr, lte) = load_banks(&cfg, dir.path()).unwrap();
        assert_eq!((ltr, lte), (tr.clone(), te.clone()));
        let (main, pc) = eval(&cfg, &tr, &te).unwrap();
        assert_eq!(main.table.rows.len(), 3);
        assert_eq!(main.table.cell(0, "delta_full"), Some("+0.0000"));
        assert_eq!(pc.table.rows.len(), 3);
        let other = RunConfig::parse("[run]\nseed = 5\n").unwrap();
        assert!(matches!(load_banks(&other, dir.path()), Err(Error::Config(_))));
        let pca_dir = dir.path().join("pca");
        fuse_pca(&cfg, dir.path(), Some(8), &pca_dir).unwrap();
        let (ptr, _) = load_banks(&cfg, &pca_dir).unwrap();
        assert_eq!(ptr.records[0].fused.len(), 8);
        assert_eq!(feature_sets(&ptr).unwrap().len(), 4);
        assert!(fuse_pca(&cfg, &pca_dir, Some(8), &pca_dir).is_err());
    }
}
