//! Seeded view generation. Every function here is a pure function of its
//! input and seed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    OverlapPatches,
    GlobalCrop,
    LocalCrop,
    ColorJitter,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub kind: ViewKind,
    pub views: Vec<Image>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Resize every view to `size × size`.
    pub fn resized(self, size: usize) -> ViewSet {
        ViewSet {
            kind: self.kind,
            views: self.views.into_iter().map(|v| v.resize(size, size)).collect(),
        }
    }
}

/// Top-left offsets `round(i·(base−patch)/(grid−1))` for `i in 0..grid`.
pub fn overlap_offsets(base: usize, patch: usize, grid: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > base {
        return Err(Error::invalid(format!("patch {patch} larger than image {base}")));
    }
    if grid == 0 {
        return Err(Error::invalid("grid must be positive"));
    }
    if grid == 1 {
        return Ok(vec![0]);
    }
    let span = (base - patch) as f64 / (grid - 1) as f64;
    Ok((0..grid).map(|i| (i as f64 * span).round() as usize).collect())
}

/// Resize to `base × base`, then cut a `grid × grid` lattice of overlapping
/// `patch × patch` views (row-major).
pub fn patchify_overlap(image: &Image, base: usize, patch: usize, grid: usize) -> Result<ViewSet> {
    let offsets = overlap_offsets(base, patch, grid)?;
    let resized = image.resize(base, base);
    let mut views = Vec::with_capacity(grid * grid);
    for &top in &offsets {
        for &left in &offsets {
            views.push(resized.crop(top, left, patch, patch)?);
        }
    }
    Ok(ViewSet {
        kind: ViewKind::OverlapPatches,
        views,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropSpec {
    pub count: usize,
    pub scale: (f64, f64),
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinoCropConfig {
    pub global: CropSpec,
    pub local: CropSpec,
}

impl Default for DinoCropConfig {
    fn default() -> Self {
        Self {
            global: CropSpec {
                count: 2,
                scale: (0.25, 1.0),
                size: 224,
            },
            local: CropSpec {
                count: 10,
                scale: (0.05, 0.25),
                size: 224,
            },
        }
    }
}

/// A square crop window in (fractional) source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub side: f64,
    /// `side² / (height · width)`
    pub area_fraction: f64,
}

/// Draw a square window covering a uniformly drawn fraction of the image area.
pub fn sample_crop_box(height: usize, width: usize, scale: (f64, f64), rng: &mut impl Rng) -> CropBox {
    let (h, w) = (height as f64, width as f64);
    let frac = rng.random_range(scale.0..=scale.1);
    let side = (frac * h * w).sqrt().min(h).min(w);
    let top = rng.random_range(0.0..=(h - side));
    let left = rng.random_range(0.0..=(w - side));
    CropBox {
        top,
        left,
        side,
        area_fraction: side * side / (h * w),
    }
}

fn crop_views(image: &Image, spec: &CropSpec, kind: ViewKind, rng: &mut impl Rng) -> ViewSet {
    let views = (0..spec.count)
        .map(|_| {
            let b = sample_crop_box(image.height, image.width, spec.scale, rng);
            image.resize_region(b.top, b.left, b.side, b.side, spec.size, spec.size)
        })
        .collect();
    ViewSet { kind, views }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinoViews {
    pub global: ViewSet,
    pub local: ViewSet,
}

impl DinoViews {
    /// Globals first, then locals.
    pub fn all(&self) -> impl Iterator<Item = &Image> {
        self.global.views.iter().chain(&self.local.views)
    }
}

/// Random resized square crops only; no photometric augmentation.
pub fn dino_crops(image: &Image, config: &DinoCropConfig, seed: u64) -> DinoViews {
    let mut rng = rng::derived_rng(seed, "dino_crops", 0);
    DinoViews {
        global: crop_views(image, &config.global, ViewKind::GlobalCrop, &mut rng),
        local: crop_views(image, &config.local, ViewKind::LocalCrop, &mut rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    /// Maximum relative change for brightness, contrast and saturation, and
    /// maximum hue rotation as a fraction of the hue circle.
    pub delta: f64,
    /// Independent probability of applying each transform.
    pub p: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { delta: 0.1, p: 0.5 }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let c = mx - mn;
    let h = if c == 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / c).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / c + 2.0) / 6.0
    } else {
        ((r - g) / c + 4.0) / 6.0
    };
    let s = if mx == 0.0 { 0.0 } else { c / mx };
    (h, s, mx)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn gray(img: &Image, y: usize, x: usize) -> f32 {
    0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
}

/// Brightness, contrast, saturation and hue jitter, each applied
/// independently with probability `p`, in that order. Output is clamped to `[0, 1]`.
pub fn color_jitter(image: &Image, config: JitterConfig, seed: u64) -> Result<Image> {
    if image.channels != 3 {
        return Err(Error::invalid("color jitter needs an RGB image"));
    }
    let mut rng = rng::derived_rng(seed, "color_jitter", 0);
    let mut out = image.clone();
    if config.delta <= 0.0 || config.p <= 0.0 {
        return Ok(out);
    }
    let d = config.delta;
    let factor = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(1.0 - d..=1.0 + d) as f32;
    let (h, w) = (image.height, image.width);

    if rng.random_bool(config.p.min(1.0)) {
        let f = factor(&mut rng);
        out.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if rng.random_bool(config.p.min(1.0)) {
        let f = factor(&mut rng);
        let mean = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| gray(&out, y, x)).sum::<f32>()
            / (h * w) as f32;
        out.data.iter_mut().for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if rng.random_bool(config.p.min(1.0)) {
        let f = factor(&mut rng);
        for y in 0..h {
            for x in 0..w {
                let g = gray(&out, y, x);
                for c in 0..3 {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, ((v - g) * f + g).clamp(0.0, 1.0));
                }
            }
        }
    }
    if rng.random_bool(config.p.min(1.0)) {
        let shift = rng.random_range(-d..=d) as f32;
        for y in 0..h {
            for x in 0..w {
                let (hh, s, v) = rgb_to_hsv(out.get(0, y, x), out.get(1, y, x), out.get(2, y, x));
                let (r, g, b) = hsv_to_rgb(hh + shift, s, v);
                out.set(0, y, x, r.clamp(0.0, 1.0));
                out.set(1, y, x, g.clamp(0.0, 1.0));
                out.set(2, y, x, b.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Drop each token independently with probability `p`. If every token is
/// dropped, one uniformly chosen token survives.
pub fn word_delete<S: Clone>(tokens: &[S], p: f64, seed: u64) -> Result<Vec<S>> {
    if tokens.is_empty() {
        return Err(Error::invalid("word deletion needs at least one token"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("deletion probability must lie in [0, 1]"));
    }
    let mut rng = rng::derived_rng(seed, "word_delete", 0);
    let kept: Vec<S> = tokens.iter().filter(|_| !rng.random_bool(p)).cloned().collect();
    if kept.is_empty() {
        let i = rng.random_range(0..tokens.len());
        return Ok(vec![tokens[i].clone()]);
    }
    Ok(kept)
}

/// Noise-augmented filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClip {
    /// `frames × bins`, row-major, after the time shift.
    pub data: Vec<f32>,
    /// Additive noise before the shift (same layout).
    pub noise: Vec<f32>,
    /// Frames shifted forward (positive) or backward (negative).
    pub shift: i32,
}

/// `ĉ = c + x₁·x₂/10` with `x₁ ~ U(0,1)^{frames×bins}`, `x₂ ~ U(0,1)`, then a
/// time shift by `δ ~ U{−10, …, 10}` frames with zero padding.
pub fn audio_noise(clip: &[f32], frames: usize, bins: usize, seed: u64) -> Result<NoisyClip> {
    if clip.len() != frames * bins {
        return Err(Error::shape("audio_noise", format!("{} values for {}x{}", clip.len(), frames, bins)));
    }
    let mut rng = rng::derived_rng(seed, "audio_noise", 0);
    let x2: f32 = rng.random();
    let noise: Vec<f32> = (0..clip.len()).map(|_| rng.random::<f32>() * x2 / 10.0).collect();
    let noisy: Vec<f32> = clip.iter().zip(&noise).map(|(c, n)| c + n).collect();
    let shift: i32 = rng.random_range(-10..=10);
    let mut data = vec![0.0; clip.len()];
    for t in 0..frames as i64 {
        let src = t - shift as i64;
        if (0..frames as i64).contains(&src) {
            let (d, s) = (t as usize * bins, src as usize * bins);
            data[d..d + bins].copy_from_slice(&noisy[s..s + bins]);
        }
    }
    Ok(NoisyClip { data, noise, shift })
}

/// Scale-jitter crop for segmentation memory banks: rescale by a factor in
/// `scale`, then crop (or pad) back to the original size. Image padding is
/// zero, mask padding is `ignore_label`. Colour jitter follows.
pub fn seg_augment(
    image: &Image,
    mask: &Mask,
    scale: (f64, f64),
    jitter: JitterConfig,
    ignore_label: u8,
    seed: u64,
) -> Result<(Image, Mask)> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::data("mask and image sizes differ"));
    }
    let mut rng = rng::derived_rng(seed, "seg_augment", 0);
    let s = rng.random_range(scale.0..=scale.1);
    let (h, w) = (image.height as f64, image.width as f64);
    let (wh, ww) = (h / s, w / s);
    let top = if wh <= h { rng.random_range(0.0..=h - wh) } else { -rng.random_range(0.0..=wh - h) };
    let left = if ww <= w { rng.random_range(0.0..=w - ww) } else { -rng.random_range(0.0..=ww - w) };

    let mut out = Image::zeros(image.channels, image.height, image.width);
    let mut out_mask = Mask::new(mask.height, mask.width, vec![ignore_label; mask.height * mask.width])?;
    for y in 0..image.height {
        let sy = top + (y as f64 + 0.5) / s;
        if sy < 0.0 || sy >= h {
            continue;
        }
        for x in 0..image.width {
            let sx = left + (x as f64 + 0.5) / s;
            if sx < 0.0 || sx >= w {
                continue;
            }
            let (iy, ix) = (sy as usize, sx as usize);
            for c in 0..image.channels {
                out.set(c, y, x, image.get(c, iy, ix));
            }
            out_mask.data[y * mask.width + x] = mask.get(iy, ix);
        }
    }
    let jittered = color_jitter(&out, jitter, rng.random())?;
    Ok((jittered, out_mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(size: usize, seed: u64) -> Image {
        let mut r = rng::rng_from(seed);
        Image::new(3, size, size, (0..3 * size * size).map(|_| r.random()).collect()).unwrap()
    }

    #[test]
    fn overlap_offsets_match_rounded_lattice() {
        assert_eq!(overlap_offsets(224, 112, 7).unwrap(), vec![0, 19, 37, 56, 75, 93, 112]);
        assert_eq!(overlap_offsets(224, 112, 1).unwrap(), vec![0]);
        assert!(overlap_offsets(100, 112, 7).is_err());
    }

    #[test]
    fn forty_nine_overlapping_views_tile_the_image() {
        let img = noise_image(224, 1);
        let set = patchify_overlap(&img, 224, 112, 7).unwrap();
        assert_eq!(set.len(), 49);
        assert!(set.views.iter().all(|v| v.height == 112 && v.width == 112));
        // footprint coverage
        let offs = overlap_offsets(224, 112, 7).unwrap();
        let mut covered = vec![false; 224 * 224];
        for &t in &offs {
            for &l in &offs {
                for y in t..t + 112 {
                    for x in l..l + 112 {
                        covered[y * 224 + x] = true;
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
        // view (1, 2) is the crop at (19, 37)
        assert_eq!(set.views[7 + 2], img.crop(19, 37, 112, 112).unwrap());
    }

    #[test]
    fn single_cell_grid_is_top_left_crop() {
        let img = noise_image(32, 2);
        let set = patchify_overlap(&img, 32, 16, 1).unwrap();
        assert_eq!(set.views, vec![img.crop(0, 0, 16, 16).unwrap()]);
    }

    #[test]
    fn dino_counts_and_determinism() {
        let img = noise_image(48, 3);
        let cfg = DinoCropConfig {
            global: CropSpec {
                size: 32,
                ..DinoCropConfig::default().global
            },
            local: CropSpec {
                size: 32,
                ..DinoCropConfig::default().local
            },
        };
        let a = dino_crops(&img, &cfg, 9);
        assert_eq!((a.global.len(), a.local.len()), (2, 10));
        assert!(a.all().all(|v| v.height == 32 && v.width == 32));
        assert_eq!(a, dino_crops(&img, &cfg, 9));
        assert_ne!(a, dino_crops(&img, &cfg, 10));
    }

    #[test]
    fn crop_scale_bounds_hold_over_many_draws() {
        let cfg = DinoCropConfig::default();
        let mut r = rng::rng_from(4);
        for spec in [&cfg.global, &cfg.local] {
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for _ in 0..1000 {
                let b = sample_crop_box(224, 224, spec.scale, &mut r);
                lo = lo.min(b.area_fraction);
                hi = hi.max(b.area_fraction);
                assert!(b.top >= 0.0 && b.top + b.side <= 224.0 + 1e-9);
            }
            assert!(lo >= spec.scale.0 - 1e-12 && hi <= spec.scale.1 + 1e-12, "{lo} {hi}");
        }
    }

    #[test]
    fn jitter_identities_and_range() {
        let img = noise_image(16, 5);
        let off = JitterConfig { delta: 0.0, p: 0.5 };
        assert_eq!(color_jitter(&img, off, 1).unwrap(), img);
        let never = JitterConfig { delta: 0.1, p: 0.0 };
        assert_eq!(color_jitter(&img, never, 1).unwrap(), img);
        let always = JitterConfig { delta: 0.4, p: 1.0 };
        for seed in 0..50 {
            let out = color_jitter(&noise_image(8, seed), always, seed).unwrap();
            assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn word_deletion_rules() {
        let toks: Vec<u32> = (0..20).collect();
        assert_eq!(word_delete(&toks, 0.0, 1).unwrap(), toks);
        assert_eq!(word_delete(&toks, 1.0, 1).unwrap().len(), 1);
        assert!(word_delete::<u32>(&[], 0.1, 1).is_err());

        let many: Vec<u32> = (0..100_000).collect();
        let kept = word_delete(&many, 0.1, 7).unwrap().len() as f64 / 1e5;
        assert!((kept - 0.9).abs() < 0.01, "{kept}");
    }

    #[test]
    fn audio_noise_bounds_and_mean() {
        let (frames, bins) = (200, 128);
        let clip = vec![0.0f32; frames * bins];
        let mut zero_shift_seen = false;
        let mut mean_total = 0.0;
        let seeds = 400;
        for seed in 0..seeds {
            let out = audio_noise(&clip, frames, bins, seed).unwrap();
            assert!(out.noise.iter().all(|&n| (0.0..=0.1).contains(&n)));
            assert!((-10..=10).contains(&out.shift));
            mean_total += out.noise.iter().map(|&v| v as f64).sum::<f64>() / out.noise.len() as f64;
            if out.shift == 0 {
                zero_shift_seen = true;
                assert_eq!(out.data, out.noise);
            }
        }
        assert!(zero_shift_seen);
        let mean = mean_total / seeds as f64;
        assert!((mean - 0.025).abs() < 0.002, "{mean}");
    }

    #[test]
    fn audio_shift_pads_with_zeros() {
        let (frames, bins) = (30, 2);
        let clip = vec![1.0f32; frames * bins];
        let out = (0..200)
            .map(|s| audio_noise(&clip, frames, bins, s).unwrap())
            .find(|o| o.shift > 0)
            .unwrap();
        let k = out.shift as usize;
        assert!(out.data[..k * bins].iter().all(|&v| v == 0.0));
        assert!(out.data[k * bins..].iter().all(|&v| v >= 1.0));
    }

    #[test]
    fn seg_augment_keeps_mask_labels_and_size() {
        let img = noise_image(32, 1);
        let mask = Mask::new(32, 32, (0..1024).map(|i| (i % 3) as u8).collect()).unwrap();
        for seed in 0..10 {
            let (i2, m2) = seg_augment(&img, &mask, (0.5, 2.0), JitterConfig::default(), 255, seed).unwrap();
            assert_eq!((i2.height, i2.width, m2.height, m2.width), (32, 32, 32, 32));
            assert!(m2.data.iter().all(|&v| v < 3 || v == 255));
        }
    }
}
