//! Compact ViT encoder, frozen random projection heads, and harvesting of a
//! single hidden linear layer's gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Cls,
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            pooling: Pooling::Cls,
        }
    }
}

pub const CHANNELS: usize = 3;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return bad("depth, dim and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_input_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Closed-form count of all encoder parameters.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = self.hidden_dim();
        let patch = d * self.patch_input_dim() + d;
        let pos = (self.num_patches() + 1) * d;
        let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (h * d + h) + (d * h + d);
        patch + d + pos + self.depth * block + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: gaussian(vec![out_dim, in_dim], std, rng),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> Norm<T> {
    fn init(d: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![d], T::one()),
            beta: Tensor::zeros(vec![d]),
        }
    }

    fn cast<U: Scalar>(&self) -> Norm<U> {
        Norm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: Norm<T>,
    pub qkv: Linear<T>,
    pub attn_proj: Linear<T>,
    pub ln2: Norm<T>,
    pub mlp_fc1: Linear<T>,
    pub mlp_fc2: Linear<T>,
}

impl<T: Scalar> Block<T> {
    pub fn layer(&self, kind: LayerKind) -> &Linear<T> {
        match kind {
            LayerKind::AttnProj => &self.attn_proj,
            LayerKind::MlpFc1 => &self.mlp_fc1,
            LayerKind::MlpFc2 => &self.mlp_fc2,
            LayerKind::Qkv => &self.qkv,
        }
    }

    fn layer_mut(&mut self, kind: LayerKind) -> &mut Linear<T> {
        match kind {
            LayerKind::AttnProj => &mut self.attn_proj,
            LayerKind::MlpFc1 => &mut self.mlp_fc1,
            LayerKind::MlpFc2 => &mut self.mlp_fc2,
            LayerKind::Qkv => &mut self.qkv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub patch_embed: Linear<T>,
    /// `[d]`
    pub cls_token: Tensor<T>,
    /// `[num_patches + 1, d]`
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
}

fn gaussian<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Deterministic encoder weights: every linear layer Gaussian with std
/// `1/√fan_in` and zero bias, unit layer norms, small Gaussian CLS token and
/// position embeddings.
pub fn init_encoder<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    config.validate()?;
    let mut rng = rng::derived_rng(seed, "encoder", 0);
    let d = config.dim;
    let patch_embed = Linear::init(d, config.patch_input_dim(), &mut rng);
    let cls_token = gaussian(vec![d], 0.02, &mut rng);
    let pos_embed = gaussian(vec![config.num_patches() + 1, d], 0.02, &mut rng);
    let blocks = (0..config.depth)
        .map(|_| Block {
            ln1: Norm::init(d),
            qkv: Linear::init(3 * d, d, &mut rng),
            attn_proj: Linear::init(d, d, &mut rng),
            ln2: Norm::init(d),
            mlp_fc1: Linear::init(config.hidden_dim(), d, &mut rng),
            mlp_fc2: Linear::init(d, config.hidden_dim(), &mut rng),
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        final_norm: Norm::init(d),
    })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            patch_embed: self.patch_embed.cast(),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: b.ln1.cast(),
                    qkv: b.qkv.cast(),
                    attn_proj: b.attn_proj.cast(),
                    ln2: b.ln2.cast(),
                    mlp_fc1: b.mlp_fc1.cast(),
                    mlp_fc2: b.mlp_fc2.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_embed.weight),
            ("patch_embed.bias".to_string(), &self.patch_embed.bias),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1.beta));
            for kind in LayerKind::ALL {
                let l = b.layer(kind);
                out.push((format!("{p}.{kind}.weight"), &l.weight));
                out.push((format!("{p}.{kind}.bias"), &l.bias));
            }
            out.push((format!("{p}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2.beta));
        }
        out.push(("final_norm.gamma".to_string(), &self.final_norm.gamma));
        out.push(("final_norm.beta".to_string(), &self.final_norm.beta));
        out
    }

    /// Rebuild from tensors produced by [`EncoderParams::named_tensors`].
    pub fn from_named(config: &EncoderConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        // start from a correctly shaped template and overwrite every entry
        let mut params = init_encoder::<T>(config, 0)?;
        let names: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let t = lookup(&name).ok_or_else(|| Error::data(format!("missing encoder tensor '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::data(format!(
                    "encoder tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            *params.tensor_mut(&name).expect("name from template") = t;
        }
        Ok(params)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "patch_embed.weight" => return Some(&mut self.patch_embed.weight),
            "patch_embed.bias" => return Some(&mut self.patch_embed.bias),
            "cls_token" => return Some(&mut self.cls_token),
            "pos_embed" => return Some(&mut self.pos_embed),
            "final_norm.gamma" => return Some(&mut self.final_norm.gamma),
            "final_norm.beta" => return Some(&mut self.final_norm.beta),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (idx, field) = rest.split_once('.')?;
        let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "ln1.gamma" => Some(&mut b.ln1.gamma),
            "ln1.beta" => Some(&mut b.ln1.beta),
            "ln2.gamma" => Some(&mut b.ln2.gamma),
            "ln2.beta" => Some(&mut b.ln2.beta),
            _ => {
                let (layer, part) = field.rsplit_once('.')?;
                let l = b.layer_mut(layer.parse().ok()?);
                match part {
                    "weight" => Some(&mut l.weight),
                    "bias" => Some(&mut l.bias),
                    _ => None,
                }
            }
        }
    }

    /// Order-sensitive checksum over every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h = (h ^ v.f64().to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    pub fn layer(&self, source: GradientSource) -> Result<&Linear<T>> {
        source.validate(&self.config)?;
        Ok(self.blocks[source.block_index].layer(source.layer_kind))
    }

    /// Zero the attention output projection weights of every block.
    ///
    /// The CLS token then never reads from the patch tokens, so a CLS-pooled
    /// embedding becomes input independent while the projection's own
    /// gradient still depends on the attention read-out of the image.
    pub fn collapse_attention_output(&mut self) {
        for b in &mut self.blocks {
            b.attn_proj.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    AttnProj,
    MlpFc1,
    MlpFc2,
    Qkv,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [LayerKind::Qkv, LayerKind::AttnProj, LayerKind::MlpFc1, LayerKind::MlpFc2];
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::AttnProj => "attn_proj",
            LayerKind::MlpFc1 => "mlp_fc1",
            LayerKind::MlpFc2 => "mlp_fc2",
            LayerKind::Qkv => "qkv",
        })
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_proj" => Ok(LayerKind::AttnProj),
            "mlp_fc1" => Ok(LayerKind::MlpFc1),
            "mlp_fc2" => Ok(LayerKind::MlpFc2),
            "qkv" => Ok(LayerKind::Qkv),
            _ => Err(Error::Config(format!("unknown layer kind '{s}'"))),
        }
    }
}

/// Which linear layer's weight and bias gradient is harvested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GradientSource {
    pub block_index: usize,
    pub layer_kind: LayerKind,
}

impl GradientSource {
    /// Attention output projection of the last block.
    pub fn last_attn_proj(config: &EncoderConfig) -> Self {
        Self {
            block_index: config.depth - 1,
            layer_kind: LayerKind::AttnProj,
        }
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.block_index >= config.depth {
            return Err(Error::Config(format!(
                "gradient source block {} out of range for depth {}",
                self.block_index, config.depth
            )));
        }
        Ok(())
    }

    /// `(out, in)` of the source layer.
    pub fn layer_shape(&self, config: &EncoderConfig) -> (usize, usize) {
        let d = config.dim;
        let h = config.hidden_dim();
        match self.layer_kind {
            LayerKind::AttnProj => (d, d),
            LayerKind::MlpFc1 => (h, d),
            LayerKind::MlpFc2 => (d, h),
            LayerKind::Qkv => (3 * d, d),
        }
    }

    /// Length of the flattened `[dW | db]` vector.
    pub fn flat_len(&self, config: &EncoderConfig) -> usize {
        let (o, i) = self.layer_shape(config);
        o * (i + 1)
    }
}

impl fmt::Display for GradientSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block_index, self.layer_kind)
    }
}

impl FromStr for GradientSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::Config(format!("gradient source must look like 'blocks.N.kind', got '{s}'"));
        let rest = s.strip_prefix("blocks.").ok_or_else(err)?;
        let (idx, kind) = rest.split_once('.').ok_or_else(err)?;
        Ok(Self {
            block_index: idx.parse().map_err(|_| err())?,
            layer_kind: kind.parse()?,
        })
    }
}

/// Frozen random linear projection from embeddings to a loss space.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    /// `[proj_dim, d]`
    pub weight: Tensor<T>,
    /// `[proj_dim]`
    pub bias: Tensor<T>,
    pub normalize_input: bool,
    pub seed: u64,
}

/// Gaussian weights with std `1/√d`, zero bias.
pub fn attach_head<T: Scalar>(d: usize, proj_dim: usize, seed: u64, normalize_input: bool) -> Result<Head<T>> {
    if proj_dim == 0 || d == 0 {
        return Err(Error::invalid("head dimensions must be positive"));
    }
    let mut rng = rng::derived_rng(seed, "head", 0);
    Ok(Head {
        weight: gaussian(vec![proj_dim, d], 1.0 / (d as f64).sqrt(), &mut rng),
        bias: Tensor::zeros(vec![proj_dim]),
        normalize_input,
        seed,
    })
}

impl<T: Scalar> Head<T> {
    pub fn proj_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            normalize_input: self.normalize_input,
            seed: self.seed,
        }
    }

    /// Put the head's weights on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundHead {
        BoundHead {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
            normalize_input: self.normalize_input,
        }
    }

    /// Tape-free application to a batch `[n, d]` or a single `[d]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = b.apply(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    weight: Var,
    bias: Var,
    normalize_input: bool,
}

impl BoundHead {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let x = if self.normalize_input { tape.l2_normalize(x)? } else { x };
        tape.linear(x, self.weight, Some(self.bias))
    }
}

/// Output of a tape-free forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    /// Pooled representation `[d]`.
    pub embedding: Tensor<T>,
    /// Final-norm tokens `[num_patches + 1, d]`, CLS first.
    pub tokens: Tensor<T>,
}

impl<T: Scalar> Encoded<T> {
    /// Patch tokens `[num_patches, d]` (CLS dropped).
    pub fn patch_tokens(&self) -> Tensor<T> {
        let (rows, d) = (self.tokens.shape()[0], self.tokens.shape()[1]);
        Tensor::new(vec![rows - 1, d], self.tokens.data()[d..].to_vec()).expect("token rows")
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub embedding: Var,
    pub tokens: Var,
}

struct LinearVars {
    w: Var,
    b: Var,
}

struct NormVars {
    g: Var,
    b: Var,
}

struct BlockVars {
    ln1: NormVars,
    qkv: LinearVars,
    attn_proj: LinearVars,
    ln2: NormVars,
    fc1: LinearVars,
    fc2: LinearVars,
}

/// An encoder bound to a tape; the designated source layer (if any) is a
/// parameter, everything else a constant.
pub struct EncoderGraph<'p, T> {
    params: &'p EncoderParams<T>,
    patch: LinearVars,
    cls: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    final_norm: NormVars,
    source_vars: Option<(Var, Var)>,
}

fn patchify<T: Scalar>(config: &EncoderConfig, image: &Image) -> Result<Tensor<T>> {
    if image.channels != CHANNELS || image.height != config.image_size || image.width != config.image_size {
        return Err(Error::shape(
            "encode",
            format!(
                "expected {}x{}x{} image, got {}x{}x{}",
                CHANNELS, config.image_size, config.image_size, image.channels, image.height, image.width
            ),
        ));
    }
    let p = config.patch_size;
    let g = config.grid();
    let mut data = Vec::with_capacity(g * g * config.patch_input_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..CHANNELS {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(T::c(image.get(c, gy * p + dy, gx * p + dx) as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, config.patch_input_dim()], data)
}

impl<'p, T: Scalar> EncoderGraph<'p, T> {
    pub fn bind(tape: &mut Tape<T>, params: &'p EncoderParams<T>, source: Option<GradientSource>) -> Result<Self> {
        if let Some(s) = source {
            s.validate(&params.config)?;
        }
        let lin = |tape: &mut Tape<T>, l: &Linear<T>, is_source: bool| {
            if is_source {
                LinearVars {
                    w: tape.param(l.weight.clone()),
                    b: tape.param(l.bias.clone()),
                }
            } else {
                LinearVars {
                    w: tape.constant(l.weight.clone()),
                    b: tape.constant(l.bias.clone()),
                }
            }
        };
        let norm = |tape: &mut Tape<T>, n: &Norm<T>| NormVars {
            g: tape.constant(n.gamma.clone()),
            b: tape.constant(n.beta.clone()),
        };
        let patch = lin(tape, &params.patch_embed, false);
        let cls = tape.constant(params.cls_token.clone().reshape(vec![1, params.config.dim])?);
        let pos = tape.constant(params.pos_embed.clone());
        let mut blocks = Vec::with_capacity(params.blocks.len());
        let mut source_vars = None;
        for (i, b) in params.blocks.iter().enumerate() {
            let is = |k: LayerKind| source.is_some_and(|s| s.block_index == i && s.layer_kind == k);
            let bv = BlockVars {
                ln1: norm(tape, &b.ln1),
                qkv: lin(tape, &b.qkv, is(LayerKind::Qkv)),
                attn_proj: lin(tape, &b.attn_proj, is(LayerKind::AttnProj)),
                ln2: norm(tape, &b.ln2),
                fc1: lin(tape, &b.mlp_fc1, is(LayerKind::MlpFc1)),
                fc2: lin(tape, &b.mlp_fc2, is(LayerKind::MlpFc2)),
            };
            if let Some(s) = source.filter(|s| s.block_index == i) {
                let l = match s.layer_kind {
                    LayerKind::AttnProj => &bv.attn_proj,
                    LayerKind::MlpFc1 => &bv.fc1,
                    LayerKind::MlpFc2 => &bv.fc2,
                    LayerKind::Qkv => &bv.qkv,
                };
                source_vars = Some((l.w, l.b));
            }
            blocks.push(bv);
        }
        let final_norm = norm(tape, &params.final_norm);
        Ok(Self {
            params,
            patch,
            cls,
            pos,
            blocks,
            final_norm,
            source_vars,
        })
    }

    /// Weight and bias handles of the source layer.
    pub fn source_vars(&self) -> Option<(Var, Var)> {
        self.source_vars
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    pub fn encode(&self, tape: &mut Tape<T>, image: &Image) -> Result<EncodedVars> {
        let cfg = &self.params.config;
        let patches = tape.constant(patchify::<T>(cfg, image)?);
        let emb = tape.linear(patches, self.patch.w, Some(self.patch.b))?;
        let seq = tape.concat(&[self.cls, emb], 0)?;
        let mut x = tape.add(seq, self.pos)?;
        for b in &self.blocks {
            let h = tape.layer_norm(x, b.ln1.g, b.ln1.b)?;
            let qkv = tape.linear(h, b.qkv.w, Some(b.qkv.b))?;
            let att = tape.attention(qkv, cfg.heads)?;
            let proj = tape.linear(att, b.attn_proj.w, Some(b.attn_proj.b))?;
            x = tape.add(x, proj)?;
            let h = tape.layer_norm(x, b.ln2.g, b.ln2.b)?;
            let h = tape.linear(h, b.fc1.w, Some(b.fc1.b))?;
            let h = tape.gelu(h)?;
            let h = tape.linear(h, b.fc2.w, Some(b.fc2.b))?;
            x = tape.add(x, h)?;
        }
        let tokens = tape.layer_norm(x, self.final_norm.g, self.final_norm.b)?;
        let embedding = match cfg.pooling {
            Pooling::Cls => {
                let row = tape.slice(tokens, 0, 0, 1)?;
                tape.mean_rows(row)?
            }
            Pooling::Mean => {
                let patch_rows = tape.slice(tokens, 0, 1, cfg.num_patches())?;
                tape.mean_rows(patch_rows)?
            }
        };
        Ok(EncodedVars { embedding, tokens })
    }
}

/// Tape-free forward pass.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, image: &Image) -> Result<Encoded<T>> {
    let mut tape = Tape::new();
    let graph = EncoderGraph::bind(&mut tape, params, None)?;
    let out = graph.encode(&mut tape, image)?;
    Ok(Encoded {
        embedding: tape.value(out.embedding).clone(),
        tokens: tape.value(out.tokens).clone(),
    })
}

/// Weight and bias gradient of the source layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient<T> {
    /// `[out, in]`
    pub dw: Tensor<T>,
    /// `[out]`
    pub db: Tensor<T>,
    pub loss: T,
}

/// Run `objective` against an encoder whose source layer is differentiable
/// and return that layer's gradient. `params` is never modified.
pub fn loss_gradient<T, F>(params: &EncoderParams<T>, source: GradientSource, objective: F) -> Result<LayerGradient<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &EncoderGraph<'_, T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let graph = EncoderGraph::bind(&mut tape, params, Some(source))?;
    let (w, b) = graph.source_vars().expect("source validated");
    let loss = objective(&mut tape, &graph)?;
    let loss_value = tape
        .value(loss)
        .item()
        .ok_or_else(|| Error::shape("loss_gradient", "objective must return a scalar"))?;
    let mut grads = tape.backward(loss)?;
    Ok(LayerGradient {
        dw: grads.take(w).expect("source weight is a parameter"),
        db: grads.take(b).expect("source bias is a parameter"),
        loss: loss_value,
    })
}
