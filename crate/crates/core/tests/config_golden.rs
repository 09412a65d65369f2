use fungi_core::config::{Backbone, RunConfig, SegMode};
use fungi_core::objectives::KlDirection;

const GOLDEN: &str = include_str!("golden/default_config.toml");

#[test]
fn default_config_matches_golden_file() {
    assert_eq!(RunConfig::default().to_toml(), GOLDEN);
    assert_eq!(RunConfig::parse(GOLDEN).unwrap(), RunConfig::default());
}

#[test]
fn contrastive_defaults() {
    let c = RunConfig::default();
    assert_eq!(c.simclr.positive_views, 49);
    assert_eq!(c.simclr.negative_views, 49);
    assert_eq!(c.simclr.negative_images, 256);
    assert_eq!(c.simclr.tau, 0.07);
    assert_eq!(c.simclr.proj_dim, 96);
    assert_eq!((c.simclr.view_base, c.simclr.view_patch), (224, 112));
    let s = c.simclr_config().unwrap();
    assert_eq!(s.negatives(), 49 * 256);
}

#[test]
fn kl_and_dino_defaults() {
    let c = RunConfig::default();
    assert_eq!((c.kl.tau, c.kl.proj_dim), (15.0, 768));
    assert_eq!(c.kl.direction, KlDirection::UniformFirst);
    let d = &c.dino;
    assert_eq!((d.global_crops, d.local_crops), (2, 10));
    assert_eq!((d.global_crop_size, d.local_crop_size), (224, 224));
    assert_eq!(d.global_crop_scale, [0.25, 1.0]);
    assert_eq!(d.local_crop_scale, [0.05, 0.25]);
    assert_eq!((d.teacher_tau, d.student_tau), (0.07, 0.1));
    assert_eq!(d.proj_dim, 2048);
}

#[test]
fn evaluation_defaults() {
    let mut c = RunConfig::default();
    assert_eq!((c.knn.k, c.knn.shots), (20, 5));
    c.run.backbone = Backbone::VitS;
    assert_eq!(c.pca_dim(), Some(384));
    c.run.backbone = Backbone::VitB;
    assert_eq!(c.pca_dim(), Some(512));
}

#[test]
fn segmentation_defaults() {
    let c = RunConfig::default();
    let full = c.seg_config(SegMode::Full);
    assert_eq!((full.k, full.tau), (30, 0.02));
    let few = c.seg_config(SegMode::FewShot);
    assert_eq!((few.k, few.tau), (90, 0.1));
    assert_eq!(c.segment_few_shot.epochs, 8);
    assert_eq!(c.segment_few_shot.bank_size, 2048 * 10_000);
    let ivf = c.ivf_params(SegMode::Full);
    assert_eq!((ivf.num_leaves, ivf.leaves_to_search, ivf.rerank), (512, 32, 120));
    let ivf = c.ivf_params(SegMode::FewShot);
    assert_eq!((ivf.leaves_to_search, ivf.rerank), (256, 1800));
    assert_eq!(c.segment.image_size, 512);
    assert_eq!((c.segment.scale_min, c.segment.scale_max), (0.5, 2.0));
    assert_eq!(c.segment.jitter_delta, 0.1);
}
