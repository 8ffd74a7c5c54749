//! A small pre-norm Vision Transformer that emits the class token, the patch
//! tokens and the class token of every block.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::ops::{layer_norm, linear, softmax_last};
use crate::params::{ParamInit, ParamSet, ParamSource};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 192,
            depth: 4,
            heads: 3,
            mlp_ratio: 4.0,
            layer_norm_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigValidation(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return fail("encoder: patch_size, embed_dim, depth and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "encoder: embed_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "encoder: image_size ({}) must be divisible by patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || !(self.mlp_ratio > 0.0) {
            return fail("encoder: in_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }
}

/// Token count for an `height x width` image cut into `patch x patch` squares.
pub fn num_patches(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Dimension(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((height / patch) * (width / patch))
}

/// One image in height-width-channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Pixels of shape `(B, H, W, C)`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
}

impl ImageBatch {
    pub fn from_images(images: &[Image], dtype: DType) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(Error::Dimension(format!(
                    "mixed image shapes in batch: {h}x{w}x{c} vs {}x{}x{}",
                    img.height, img.width, img.channels
                )));
            }
            if img.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite pixel value".into()));
            }
            data.extend_from_slice(&img.data);
        }
        let pixels = Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { pixels })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.pixels.dims4()?)
    }
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `(B, D)`
    pub cls: Tensor,
    /// `(B, N, D)`
    pub patches: Tensor,
    /// `depth` tensors of shape `(B, D)`, final norm applied, in block order.
    pub per_block_cls: Vec<Tensor>,
}

pub struct Block {
    norm1: (Tensor, Tensor),
    qkv: (Tensor, Tensor),
    proj: (Tensor, Tensor),
    norm2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
    heads: usize,
    eps: f64,
}

impl Block {
    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = linear(x, &self.qkv.0, Some(&self.qkv.1))?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = softmax_last(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        linear(&out, &self.proj.0, Some(&self.proj.1))
    }

    fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        let h = linear(x, &self.fc1.0, Some(&self.fc1.1))?.gelu_erf()?;
        linear(&h, &self.fc2.0, Some(&self.fc2.1))
    }

    /// Pre-norm residual block over tokens `(B, T, D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = layer_norm(x, &self.norm1.0, &self.norm1.1, self.eps)?;
        let x = (x + self.attention(&h)?)?;
        let h = layer_norm(&x, &self.norm2.0, &self.norm2.1, self.eps)?;
        Ok((&x + self.mlp(&h)?)?)
    }
}

pub struct Encoder {
    config: EncoderConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: (Tensor, Tensor),
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn init(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<ParamSet> {
        config.validate()?;
        let p = Self::PREFIX;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let mut init = ParamInit::new(seed, "init/encoder", dtype);
        init.trunc_normal(&format!("{p}.patch_embed.weight"), &[config.patch_dim(), d], 0.02)?;
        init.constant(&format!("{p}.patch_embed.bias"), &[d], 0.0)?;
        init.trunc_normal(&format!("{p}.cls_token"), &[d], 0.02)?;
        init.trunc_normal(&format!("{p}.pos_embed"), &[config.num_patches() + 1, d], 0.02)?;
        for i in 0..config.depth {
            let b = format!("{p}.blocks.{i}");
            for (name, shape) in [
                ("qkv", [d, 3 * d]),
                ("proj", [d, d]),
                ("fc1", [d, hidden]),
                ("fc2", [hidden, d]),
            ] {
                init.trunc_normal(&format!("{b}.{name}.weight"), &shape, 0.02)?;
                init.constant(&format!("{b}.{name}.bias"), &[shape[1]], 0.0)?;
            }
            for n in ["norm1", "norm2"] {
                init.constant(&format!("{b}.{n}.weight"), &[d], 1.0)?;
                init.constant(&format!("{b}.{n}.bias"), &[d], 0.0)?;
            }
        }
        init.constant(&format!("{p}.norm.weight"), &[d], 1.0)?;
        init.constant(&format!("{p}.norm.bias"), &[d], 0.0)?;
        Ok(init.finish())
    }

    pub fn load(config: &EncoderConfig, src: &impl ParamSource) -> Result<Self> {
        config.validate()?;
        let p = Self::PREFIX;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let pair = |name: &str, shape: &[usize]| -> Result<(Tensor, Tensor)> {
            Ok((
                src.get(&format!("{name}.weight"), shape)?,
                src.get(&format!("{name}.bias"), &[*shape.last().unwrap()])?,
            ))
        };
        let blocks = (0..config.depth)
            .map(|i| {
                let b = format!("{p}.blocks.{i}");
                Ok(Block {
                    norm1: pair(&format!("{b}.norm1"), &[d])?,
                    qkv: pair(&format!("{b}.qkv"), &[d, 3 * d])?,
                    proj: pair(&format!("{b}.proj"), &[d, d])?,
                    norm2: pair(&format!("{b}.norm2"), &[d])?,
                    fc1: pair(&format!("{b}.fc1"), &[d, hidden])?,
                    fc2: pair(&format!("{b}.fc2"), &[hidden, d])?,
                    heads: config.heads,
                    eps: config.layer_norm_eps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (patch_w, patch_b) = pair(&format!("{p}.patch_embed"), &[config.patch_dim(), d])?;
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b,
            cls_token: src.get(&format!("{p}.cls_token"), &[d])?,
            pos_embed: src.get(&format!("{p}.pos_embed"), &[config.num_patches() + 1, d])?,
            blocks,
            norm: pair(&format!("{p}.norm"), &[d])?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.patch_w.dtype()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Flattened raw patches `(B, N, P*P*C)` in row-major patch order; each
    /// patch is flattened in (row, column, channel) order.
    pub fn extract_patches(&self, images: &ImageBatch) -> Result<Tensor> {
        let (b, h, w, c) = images.dims()?;
        let p = self.config.patch_size;
        let n = num_patches(h, w, p)?;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "expected {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if n != self.config.num_patches() {
            return Err(Error::Dimension(format!(
                "image {h}x{w} yields {n} patches but the encoder expects {}",
                self.config.num_patches()
            )));
        }
        Ok(images
            .pixels
            .reshape((b, h / p, p, w / p, p, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, n, p * p * c))?)
    }

    /// Linear projection of every patch plus its positional embedding, `(B, N, D)`.
    pub fn patchify(&self, images: &ImageBatch) -> Result<Tensor> {
        let raw = self.extract_patches(images)?.to_dtype(self.patch_w.dtype())?;
        let n = raw.dim(1)?;
        let emb = linear(&raw, &self.patch_w, Some(&self.patch_b))?;
        Ok(emb.broadcast_add(&self.pos_embed.narrow(0, 1, n)?)?)
    }

    /// Token sequence `[cls, patches...]` fed to the first block, `(B, N+1, D)`.
    pub fn embed(&self, images: &ImageBatch) -> Result<Tensor> {
        let patches = self.patchify(images)?;
        let b = patches.dim(0)?;
        let d = self.config.embed_dim;
        let cls = (self.cls_token.reshape((1, 1, d))? + self.pos_embed.narrow(0, 0, 1)?.reshape((1, 1, d))?)?
            .broadcast_as((b, 1, d))?;
        Ok(Tensor::cat(&[&cls, &patches], 1)?)
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<TokenSequence> {
        let mut x = self.embed(images)?;
        let (b, t, d) = x.dims3()?;
        let (g, beta) = (&self.norm.0, &self.norm.1);
        let eps = self.config.layer_norm_eps;
        let mut per_block_cls = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if i + 1 < self.blocks.len() {
                let cls = x.narrow(1, 0, 1)?.reshape((b, d))?;
                per_block_cls.push(layer_norm(&cls, g, beta, eps)?);
            }
        }
        let out = layer_norm(&x, g, beta, eps)?;
        let cls = out.narrow(1, 0, 1)?.reshape((b, d))?;
        per_block_cls.push(cls.clone());
        let patches = out.narrow(1, 1, t - 1)?;
        Ok(TokenSequence {
            cls,
            patches,
            per_block_cls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            ..Default::default()
        }
    }

    fn ramp_batch(b: usize, h: usize, w: usize) -> ImageBatch {
        let imgs: Vec<Image> = (0..b)
            .map(|k| {
                let data = (0..h * w * 3).map(|i| ((i + 7 * k) % 17) as f32 / 17.0).collect();
                Image::new(h, w, 3, data).unwrap()
            })
            .collect();
        ImageBatch::from_images(&imgs, DType::F32).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(num_patches(32, 32, 16).unwrap(), 4);
        assert_eq!(num_patches(224, 224, 16).unwrap(), 196);
        assert!(matches!(num_patches(30, 32, 16), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchify_rejects_indivisible_images() {
        let cfg = tiny();
        let enc = Encoder::load(&cfg, &Encoder::init(&cfg, 0, DType::F32).unwrap()).unwrap();
        let batch = ramp_batch(1, 30, 32);
        assert!(matches!(enc.patchify(&batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn encode_shapes() {
        let cfg = tiny();
        let enc = Encoder::load(&cfg, &Encoder::init(&cfg, 0, DType::F32).unwrap()).unwrap();
        let out = enc.encode(&ramp_batch(2, 32, 32)).unwrap();
        assert_eq!(out.cls.dims(), &[2, 64]);
        assert_eq!(out.patches.dims(), &[2, 4, 64]);
        assert_eq!(out.per_block_cls.len(), 4);
        let last = out.per_block_cls[3].to_vec2::<f32>().unwrap();
        assert_eq!(last, out.cls.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn patch_extraction_layout() {
        // 4x4 single channel, patch 2: patch 1 is the top-right 2x2 square.
        let cfg = EncoderConfig {
            image_size: 4,
            in_channels: 1,
            patch_size: 2,
            embed_dim: 4,
            depth: 1,
            heads: 1,
            ..Default::default()
        };
        let enc = Encoder::load(&cfg, &Encoder::init(&cfg, 0, DType::F32).unwrap()).unwrap();
        let img = Image::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
        let raw = enc
            .extract_patches(&ImageBatch::from_images(&[img], DType::F32).unwrap())
            .unwrap()
            .to_vec3::<f32>()
            .unwrap();
        assert_eq!(raw[0][0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(raw[0][1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(raw[0][3], vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zeroed_output_paths_make_block_identity() {
        let cfg = tiny();
        let mut params = Encoder::init(&cfg, 1, DType::F32).unwrap();
        let last = format!("encoder.blocks.{}", cfg.depth - 1);
        for name in ["proj", "fc2"] {
            for suffix in ["weight", "bias"] {
                let key = format!("{last}.{name}.{suffix}");
                let t = params.get(&key, params.tensor(&key).unwrap().dims()).unwrap();
                params.insert(key, t.zeros_like().unwrap());
            }
        }
        let enc = Encoder::load(&cfg, &params).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 64), &Device::Cpu).unwrap();
        let y = enc.blocks()[cfg.depth - 1].forward(&x).unwrap();
        assert_eq!(x.to_vec3::<f32>().unwrap(), y.to_vec3::<f32>().unwrap());
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny();
        let enc = Encoder::load(&cfg, &Encoder::init(&cfg, 9, DType::F32).unwrap()).unwrap();
        let batch = ramp_batch(2, 32, 32);
        let a = enc.encode(&batch).unwrap();
        let b = enc.encode(&batch).unwrap();
        assert_eq!(a.patches.to_vec3::<f32>().unwrap(), b.patches.to_vec3::<f32>().unwrap());
        assert_eq!(a.cls.to_vec2::<f32>().unwrap(), b.cls.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn inconsistent_params_are_rejected() {
        let cfg = tiny();
        let params = Encoder::init(&cfg, 0, DType::F32).unwrap();
        let wider = EncoderConfig {
            embed_dim: 128,
            ..cfg
        };
        assert!(matches!(Encoder::load(&wider, &params), Err(Error::Shape { .. })));
    }
}
