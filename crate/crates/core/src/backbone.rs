//! Minimal pre-norm ViT encoder. The image embedding is the final state of
//! the class token.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 2.0,
            channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("heads", self.heads),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// `N = HW / P^2`
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        libm::round(self.width as f64 * self.mlp_ratio).max(1.0) as usize
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Splits an `H x W x C` row-major image into `N` rows of `C * P^2` values:
/// row `k` is patch `k` in raster order, flattened row-major.
pub fn patchify<T: Scalar>(image: &[T], cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); cfg.num_patches() * cfg.patch_dim()];
    patchify_into(image, cfg, &mut out)?;
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

fn patchify_into<T: Scalar>(image: &[T], cfg: &BackboneConfig, out: &mut [T]) -> Result<()> {
    if image.len() != cfg.image_len() {
        return Err(Error::shape(
            "patchify",
            &[cfg.image_size, cfg.image_size, cfg.channels],
            &[image.len()],
        ));
    }
    let (s, p, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let per_side = s / p;
    let row_len = p * ch;
    let mut k = 0;
    for pr in 0..per_side {
        for pc in 0..per_side {
            for i in 0..p {
                let src = ((pr * p + i) * s + pc * p) * ch;
                out[k..k + row_len].copy_from_slice(&image[src..src + row_len]);
                k += row_len;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    /// `W_p`, `(C P^2) x d`
    pub patch_proj: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    /// `(N + 1) x d`
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

fn trunc<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| c(rng.truncated_normal(INIT_STD)))
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n], |_| T::one())
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let h = cfg.mlp_hidden();
        let patch_proj = trunc(rng, &[cfg.patch_dim(), d]);
        let pos_embed = trunc(rng, &[cfg.tokens(), d]);
        let layers = (0..cfg.depth)
            .map(|_| LayerParams {
                ln1_gamma: ones(d),
                ln1_beta: Tensor::zeros(&[d]),
                qkv_w: trunc(rng, &[d, 3 * d]),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: trunc(rng, &[d, d]),
                proj_b: Tensor::zeros(&[d]),
                ln2_gamma: ones(d),
                ln2_beta: Tensor::zeros(&[d]),
                fc1_w: trunc(rng, &[d, h]),
                fc1_b: Tensor::zeros(&[h]),
                fc2_w: trunc(rng, &[h, d]),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(BackboneParams {
            patch_proj,
            patch_bias: Tensor::zeros(&[d]),
            cls_token: Tensor::zeros(&[d]),
            pos_embed,
            layers,
            final_gamma: ones(d),
            final_beta: Tensor::zeros(&[d]),
        })
    }

    /// Parameters in a fixed order, with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("backbone.patch_proj".into(), &self.patch_proj),
            ("backbone.patch_bias".into(), &self.patch_bias),
            ("backbone.cls_token".into(), &self.cls_token),
            ("backbone.pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.fields() {
                out.push((format!("backbone.layers.{i}.{name}"), t));
            }
        }
        out.push(("backbone.final_gamma".into(), &self.final_gamma));
        out.push(("backbone.final_beta".into(), &self.final_beta));
        out
    }

    /// Same order as [`BackboneParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        let d = cfg.width;
        let expect = |t: &Tensor<T>, shape: &[usize], what: &'static str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(what, shape, t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::non_finite(what));
            }
            Ok(())
        };
        expect(&self.patch_proj, &[cfg.patch_dim(), d], "patch_proj")?;
        expect(&self.pos_embed, &[cfg.tokens(), d], "pos_embed")?;
        expect(&self.cls_token, &[d], "cls_token")?;
        if self.layers.len() != cfg.depth {
            return Err(Error::shape("layers", &[cfg.depth], &[self.layers.len()]));
        }
        for l in &self.layers {
            expect(&l.qkv_w, &[d, 3 * d], "qkv_w")?;
            expect(&l.fc1_w, &[d, cfg.mlp_hidden()], "fc1_w")?;
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>) -> BackboneVars {
        BackboneVars {
            patch_proj: g.param(&self.patch_proj),
            patch_bias: g.param(&self.patch_bias),
            cls_token: g.param(&self.cls_token),
            pos_embed: g.param(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gamma: g.param(&l.ln1_gamma),
                    ln1_beta: g.param(&l.ln1_beta),
                    qkv_w: g.param(&l.qkv_w),
                    qkv_b: g.param(&l.qkv_b),
                    proj_w: g.param(&l.proj_w),
                    proj_b: g.param(&l.proj_b),
                    ln2_gamma: g.param(&l.ln2_gamma),
                    ln2_beta: g.param(&l.ln2_beta),
                    fc1_w: g.param(&l.fc1_w),
                    fc1_b: g.param(&l.fc1_b),
                    fc2_w: g.param(&l.fc2_w),
                    fc2_b: g.param(&l.fc2_b),
                })
                .collect(),
            final_gamma: g.param(&self.final_gamma),
            final_beta: g.param(&self.final_beta),
        }
    }

    pub fn cast<U: Scalar>(&self) -> BackboneParams<U> {
        BackboneParams {
            patch_proj: self.patch_proj.cast(),
            patch_bias: self.patch_bias.cast(),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    qkv_w: l.qkv_w.cast(),
                    qkv_b: l.qkv_b.cast(),
                    proj_w: l.proj_w.cast(),
                    proj_b: l.proj_b.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    fc1_w: l.fc1_w.cast(),
                    fc1_b: l.fc1_b.cast(),
                    fc2_w: l.fc2_w.cast(),
                    fc2_b: l.fc2_b.cast(),
                })
                .collect(),
            final_gamma: self.final_gamma.cast(),
            final_beta: self.final_beta.cast(),
        }
    }
}

impl<T> LayerParams<T> {
    fn fields(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Graph handles for [`BackboneParams`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneVars {
    pub patch_proj: Var,
    pub patch_bias: Var,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_gamma: Var,
    pub final_beta: Var,
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_proj, self.patch_bias, self.cls_token, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.ln1_gamma,
                l.ln1_beta,
                l.qkv_w,
                l.qkv_b,
                l.proj_w,
                l.proj_b,
                l.ln2_gamma,
                l.ln2_beta,
                l.fc1_w,
                l.fc1_b,
                l.fc2_w,
                l.fc2_b,
            ]);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out
    }
}

/// Patch matrix for a batch of images, `(B N) x (C P^2)`.
pub fn patchify_batch<T: Scalar>(images: &[&[T]], cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let rows = cfg.num_patches();
    let width = cfg.patch_dim();
    let mut out = vec![T::zero(); images.len() * rows * width];
    for (img, chunk) in images.iter().zip(out.chunks_exact_mut(rows * width)) {
        patchify_into(img, cfg, chunk)?;
    }
    Tensor::new(&[images.len() * rows, width], out)
}

/// Encodes a batch of images; returns the `B x d` node of class-token
/// embeddings `z`.
///
/// The final layer norm is part of the block stack: a depth-0 encoder is
/// the identity and returns `cls_token + pos_embed[0]`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BackboneVars,
    cfg: &BackboneConfig,
    images: &[&[T]],
) -> Result<Var> {
    let batch = images.len();
    if batch == 0 {
        return Err(Error::Contract("encode needs at least one image".into()));
    }
    if vars.layers.len() != cfg.depth {
        return Err(Error::shape("encode layers", &[cfg.depth], &[vars.layers.len()]));
    }
    let patches = patchify_batch(images, cfg)?;
    let patches = g.constant(patches);
    let embedded = g.linear(patches, vars.patch_proj, Some(vars.patch_bias))?;
    let mut x = g.assemble_tokens(embedded, vars.cls_token, vars.pos_embed, batch)?;
    let tokens = cfg.tokens();
    for (i, l) in vars.layers.iter().enumerate() {
        let h = g.layer_norm(x, l.ln1_gamma, l.ln1_beta, LAYER_NORM_EPS)?;
        let qkv = g.linear(h, l.qkv_w, Some(l.qkv_b))?;
        let att = g.attention(qkv, batch, tokens, cfg.heads)?;
        let att = g.linear(att, l.proj_w, Some(l.proj_b))?;
        x = g.add(x, att)?;
        let h = g.layer_norm(x, l.ln2_gamma, l.ln2_beta, LAYER_NORM_EPS)?;
        let h = g.linear(h, l.fc1_w, Some(l.fc1_b))?;
        let h = g.gelu(h);
        let h = g.linear(h, l.fc2_w, Some(l.fc2_b))?;
        x = g.add(x, h)?;
        if g.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer { layer: i });
        }
    }
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let z = g.select_rows(x, &cls_rows)?;
    if cfg.depth == 0 {
        return Ok(z);
    }
    g.layer_norm(z, vars.final_gamma, vars.final_beta, LAYER_NORM_EPS)
}

/// Forward-only convenience: embeddings for a batch as an `B x d` tensor.
pub fn encode_values<T: Scalar>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    images: &[&[T]],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let z = encode(&mut g, &vars, cfg, images)?;
    Ok(g.tensor(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(depth: usize) -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 2,
            depth,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
            channels: 3,
        }
    }

    #[test]
    fn patchify_small_image() {
        let cfg = BackboneConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            ..tiny(0)
        };
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_default_geometry() {
        let cfg = BackboneConfig::default();
        let img = vec![0.5f32; 32 * 32 * 3];
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[64, 48]);
        for r in 1..64 {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = tiny(1);
        assert!(patchify(&[0.0f64; 10], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { image_size: 10, patch_size: 4, ..tiny(1) }.validate().is_err());
        assert!(BackboneConfig { width: 9, ..tiny(1) }.validate().is_err());
        assert!(tiny(1).validate().is_ok());
    }

    #[test]
    fn empty_encoder_returns_class_token() {
        let cfg = tiny(0);
        let mut rng = Rng::new(1);
        let mut p = BackboneParams::<f64>::init(&cfg, &mut rng).unwrap();
        p.cls_token = Tensor::from_fn(&[8], |i| i as f64);
        let img = vec![0.3; cfg.image_len()];
        let z = encode_values(&p, &cfg, &[&img]).unwrap();
        for j in 0..8 {
            assert_eq!(z.data()[j], j as f64 + p.pos_embed.data()[j]);
        }
    }

    #[test]
    fn named_order_matches_vars() {
        let cfg = tiny(2);
        let mut p = BackboneParams::<f64>::init(&cfg, &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let names = p.named().len();
        let all = vars.all();
        assert_eq!(names, all.len());
        for (t, v) in p.tensors_mut().into_iter().zip(all) {
            assert_eq!(t.data(), g.value(v));
        }
    }
}
