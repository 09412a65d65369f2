//! Seeded synthetic datasets and the tensor-store dataset layout.
//!
//! Generative processes, with `s` the image side, `(y, x)` pixel centres in
//! `[0, 1)` and `n(σ)` independent Gaussian pixel noise:
//!
//! * `stripes`: class `c` of `C` fixes the orientation `θ = πc/C`. Each image
//!   draws a frequency `f ~ U(3, 5)` cycles, a phase `φ ~ U(0, 2π)` and a
//!   per-channel gain `g ~ U(0.5, 1)`; pixels are
//!   `0.5 + 0.5·g·sin(2πf(x cos θ + y sin θ) + φ) + n(σ)`.
//! * `blobs`: class `c` fixes a hue `c/C`. Each image paints three Gaussian
//!   bumps of that hue (centres uniform, width `U(0.08, 0.16)`) over a grey
//!   level `U(0.3, 0.5)`, plus `n(σ)`.
//! * `segmentation`: the image is split into an `8 × 8` cell grid filled with
//!   class 0, then one to three cell-aligned rectangles receive classes drawn
//!   from `1..C`. Each pixel takes the stripe texture of its class at a fixed
//!   frequency of 6 cycles; pixels within one pixel of a class boundary are
//!   labelled 255 (ignored).
//!
//! All values are clamped to `[0, 1]`. Train and test splits draw from
//! independent streams of the same seed.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::Split;
use crate::image::{Image, Mask};
use crate::rng;
use crate::store::TensorStore;

pub const GENERATOR_VERSION: u32 = 1;
const SEG_CELLS: usize = 8;
const BOUNDARY_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Stripes,
    Blobs,
    Segmentation,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stripes => "stripes",
            Self::Blobs => "blobs",
            Self::Segmentation => "segmentation",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Self::Stripes),
            "blobs" => Ok(Self::Blobs),
            "segmentation" | "seg" => Ok(Self::Segmentation),
            other => Err(Error::invalid(format!("unknown synthetic dataset kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Samples in the split being generated.
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            classes,
            size: 64,
            noise: 0.05,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.n < self.classes {
            return Err(Error::invalid(format!(
                "need at least two classes and n ≥ classes, got n={} classes={}",
                self.n, self.classes
            )));
        }
        if self.classes > 255 {
            return Err(Error::invalid("at most 255 classes fit in a mask"));
        }
        if self.size < 8 || (self.kind == SynthKind::Segmentation && !self.size.is_multiple_of(SEG_CELLS)) {
            return Err(Error::invalid(format!("image size {} too small or not a multiple of 8", self.size)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        Ok(())
    }
}

/// Images with labels and, for segmentation data, masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<i32>,
    pub masks: Option<Vec<Mask>>,
    /// Free-form `key = value` lines describing the origin.
    pub meta: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let first = self.images.first().ok_or_else(|| Error::data("empty dataset"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        if self.images.iter().any(|i| (i.channels, i.height, i.width) != (c, h, w)) {
            return Err(Error::data("dataset images differ in shape"));
        }
        let n = self.len();
        let mut s = TensorStore::new();
        s.put_text("dataset.meta", &self.meta)?;
        s.put_f32("images", vec![n, c, h, w], self.images.iter().flat_map(|i| i.data.iter().copied()).collect())?;
        s.put_i32("labels", vec![n], self.labels.clone())?;
        if let Some(masks) = &self.masks {
            s.put_u8("masks", vec![n, h, w], masks.iter().flat_map(|m| m.data.iter().copied()).collect())?;
        }
        Ok(s)
    }

    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let (ext, data) = store.f32s("images")?;
        let [n, c, h, w] = ext[..] else {
            return Err(Error::data("images section must be [n, channels, height, width]"));
        };
        let per = c * h * w;
        let images = (0..n)
            .map(|i| Image::new(c, h, w, data[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let (_, labels) = store.i32s("labels")?;
        if labels.len() != n {
            return Err(Error::data("label count differs from image count"));
        }
        if labels.iter().any(|&l| l < 0) {
            return Err(Error::data("labels must be non-negative"));
        }
        let masks = if store.contains("masks") {
            let (mext, mdata) = store.u8s("masks")?;
            if mext[..] != [n, h, w] {
                return Err(Error::data("masks must be [n, height, width] matching the images"));
            }
            Some(
                (0..n)
                    .map(|i| Mask::new(h, w, mdata[i * h * w..(i + 1) * h * w].to_vec()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let meta = if store.contains("dataset.meta") {
            store.text("dataset.meta")?
        } else {
            String::new()
        };
        Ok(Self {
            images,
            labels: labels.to_vec(),
            masks,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&TensorStore::read(path)?)
    }
}

/// Generate one split. Labels cycle through the classes so every class has
/// `⌊n/C⌋` or `⌈n/C⌉` samples.
pub fn generate(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let tag = format!("synth.{split}");
    let mut images = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    let mut masks = Vec::new();
    for i in 0..spec.n {
        let mut r = rng::derived_rng(spec.seed, &tag, i as u64);
        let label = (i % spec.classes) as i32;
        match spec.kind {
            SynthKind::Stripes => images.push(stripes(spec, label as usize, &mut r)),
            SynthKind::Blobs => images.push(blobs(spec, label as usize, &mut r)),
            SynthKind::Segmentation => {
                let (img, mask, dominant) = segmentation(spec, &mut r);
                images.push(img);
                masks.push(mask);
                labels.push(dominant);
                continue;
            }
        }
        labels.push(label);
    }
    let meta = format!(
        "generator = {GENERATOR_VERSION}\nkind = {}\nsplit = {split}\nn = {}\nclasses = {}\nsize = {}\nnoise = {}\nseed = {}\n",
        spec.kind, spec.n, spec.classes, spec.size, spec.noise, spec.seed
    );
    Ok(Dataset {
        images,
        labels,
        masks: (spec.kind == SynthKind::Segmentation).then_some(masks),
        meta,
    })
}

fn noise_dist(spec: &SynthSpec) -> Option<Normal<f64>> {
    (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("noise validated"))
}

fn finish(img: &mut Image, spec: &SynthSpec, r: &mut impl Rng) {
    let noise = noise_dist(spec);
    for v in &mut img.data {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(r));
        *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
    }
}

fn stripe_value(theta: f64, freq: f64, phase: f64, y: f64, x: f64) -> f64 {
    (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) + phase).sin()
}

fn stripes(spec: &SynthSpec, class: usize, r: &mut impl Rng) -> Image {
    let s = spec.size;
    let theta = PI * class as f64 / spec.classes as f64;
    let freq = r.random_range(3.0..5.0);
    let phase = r.random_range(0.0..2.0 * PI);
    let gains: [f64; 3] = [r.random_range(0.5..1.0), r.random_range(0.5..1.0), r.random_range(0.5..1.0)];
    let mut img = Image::zeros(3, s, s);
    for y in 0..s {
        for x in 0..s {
            let v = stripe_value(theta, freq, phase, (y as f64 + 0.5) / s as f64, (x as f64 + 0.5) / s as f64);
            for (c, g) in gains.iter().enumerate() {
                img.set(c, y, x, (0.5 + 0.5 * g * v) as f32);
            }
        }
    }
    finish(&mut img, spec, r);
    img
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn blobs(spec: &SynthSpec, class: usize, r: &mut impl Rng) -> Image {
    let s = spec.size;
    let colour = hue_rgb(class as f64 / spec.classes as f64);
    let grey = r.random_range(0.3..0.5);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.08..0.16)))
        .collect();
    let mut img = Image::zeros(3, s, s);
    for y in 0..s {
        let py = (y as f64 + 0.5) / s as f64;
        for x in 0..s {
            let px = (x as f64 + 0.5) / s as f64;
            let a = bumps
                .iter()
                .map(|&(cy, cx, w)| (-((py - cy).powi(2) + (px - cx).powi(2)) / (2.0 * w * w)).exp())
                .sum::<f64>()
                .min(1.0);
            for (c, col) in colour.iter().enumerate() {
                img.set(c, y, x, ((1.0 - a) * grey + a * col) as f32);
            }
        }
    }
    finish(&mut img, spec, r);
    img
}

/// Image, mask and the most frequent non-background class (0 if none).
fn segmentation(spec: &SynthSpec, r: &mut impl Rng) -> (Image, Mask, i32) {
    let s = spec.size;
    let cell = s / SEG_CELLS;
    let mut cells = [0u8; SEG_CELLS * SEG_CELLS];
    let rects = r.random_range(1..=3);
    for _ in 0..rects {
        let class = r.random_range(1..spec.classes) as u8;
        let (h, w) = (r.random_range(2..=5), r.random_range(2..=5));
        let (top, left) = (r.random_range(0..=SEG_CELLS - h), r.random_range(0..=SEG_CELLS - w));
        for y in top..top + h {
            for x in left..left + w {
                cells[y * SEG_CELLS + x] = class;
            }
        }
    }
    let phase = r.random_range(0.0..2.0 * PI);
    let class_at = |y: usize, x: usize| cells[(y / cell) * SEG_CELLS + x / cell];
    let mut img = Image::zeros(3, s, s);
    let mut mask = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let c = class_at(y, x);
            let theta = PI * c as f64 / spec.classes as f64;
            let v = stripe_value(theta, 6.0, phase, (y as f64 + 0.5) / s as f64, (x as f64 + 0.5) / s as f64);
            let tint = hue_rgb(c as f64 / spec.classes as f64);
            for (ch, t) in tint.iter().enumerate() {
                img.set(ch, y, x, (0.5 + 0.25 * v + 0.2 * (t - 0.5)) as f32);
            }
            let boundary = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < s && (nx as usize) < s && class_at(ny as usize, nx as usize) != c
            });
            mask[y * s + x] = if boundary { BOUNDARY_LABEL } else { c };
        }
    }
    finish(&mut img, spec, r);
    let mut counts = vec![0usize; spec.classes];
    cells.iter().filter(|&&c| c > 0).for_each(|&c| counts[c as usize] += 1);
    let dominant = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .filter(|(_, &n)| n > 0)
        .map_or(0, |(c, _)| c as i32);
    (img, Mask { height: s, width: s, data: mask }, dominant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SynthSpec::new(SynthKind::Stripes, 20, 4, 3);
        let a = generate(&spec, Split::Train).unwrap();
        assert_eq!(a, generate(&spec, Split::Train).unwrap());
        assert_ne!(a.images, generate(&spec, Split::Test).unwrap().images);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 5);
        }
        assert!(a.images.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(generate(&SynthSpec::new(SynthKind::Blobs, 3, 4, 0), Split::Train).is_err());
    }

    #[test]
    fn store_round_trip_keeps_masks() {
        let mut spec = SynthSpec::new(SynthKind::Segmentation, 4, 3, 1);
        spec.size = 32;
        let d = generate(&spec, Split::Train).unwrap();
        let masks = d.masks.as_ref().unwrap();
        assert!(masks.iter().all(|m| m.data.iter().all(|&v| v < 3 || v == 255)));
        assert!(masks.iter().any(|m| m.data.contains(&255)));
        let back = Dataset::from_store(&TensorStore::from_bytes(&d.to_store().unwrap().to_bytes(), Path::new("mem")).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn segmentation_labels_are_cell_aligned() {
        let mut spec = SynthSpec::new(SynthKind::Segmentation, 4, 4, 5);
        spec.size = 64;
        let d = generate(&spec, Split::Test).unwrap();
        for m in d.masks.as_ref().unwrap() {
            for cy in 0..SEG_CELLS {
                for cx in 0..SEG_CELLS {
                    let mut seen: Vec<u8> = (0..8)
                        .flat_map(|y| (0..8).map(move |x| (y, x)))
                        .map(|(y, x)| m.get(cy * 8 + y, cx * 8 + x))
                        .filter(|&v| v != 255)
                        .collect();
                    seen.sort_unstable();
                    seen.dedup();
                    assert!(seen.len() <= 1);
                }
            }
        }
    }
}
