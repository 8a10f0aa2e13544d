//! Vision Transformer slice encoder: patch embedding, pre-LayerNorm encoder
//! layers, age–sex composite classification pretraining, and frozen
//! feature-map extraction.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{
    layer_norm, layer_norm_backward, linear, linear_backward, log_softmax, rng_for, softmax_rows,
    trunc_normal, Activation, Adam, LnCache,
};
use crate::params::{ParamSet, Tensor};
use crate::volume::{even_indices, extract_slices, zscore, CohortManifest, Split, Volume};

/// The feed-forward sub-layer activation.
const FFN_ACT: Activation = Activation::Gelu;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub bin_width: u32,
    pub slices_per_volume: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            bin_width: 10,
            slices_per_volume: 32,
            lr: 1e-4,
            epochs: 5,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl ViTConfig {
    /// Small profile used for tests and desk-scale runs.
    pub fn toy() -> Self {
        ViTConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 {
            return bad("vit patch_size, embed_dim and heads must be positive");
        }
        if self.embed_dim % self.heads != 0 {
            return bad("vit.embed_dim must be divisible by vit.heads");
        }
        if self.bin_width == 0 {
            return bad("vit.bin_width must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.slices_per_volume == 0 {
            return bad("vit epochs, batch_size and slices_per_volume must be positive");
        }
        if !(self.mlp_ratio > 0.0) || !(self.lr > 0.0) {
            return bad("vit mlp_ratio and lr must be positive");
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Age bin crossed with sex, e.g. `50-59|M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeSexClass {
    pub bin: u32,
    pub sex: u8,
    pub bin_width: u32,
}

impl AgeSexClass {
    /// Canonical id: two subjects share it iff they share bin and sex.
    pub fn class_id(&self) -> u32 {
        2 * self.bin + self.sex as u32
    }

    pub fn label(&self) -> String {
        let lo = self.bin * self.bin_width;
        let hi = lo + self.bin_width - 1;
        let sex = if self.sex == 0 { 'M' } else { 'F' };
        format!("{lo}-{hi}|{sex}")
    }
}

pub fn age_sex_class(age: f64, sex: u8, bin_width: u32) -> Result<AgeSexClass> {
    if !(age >= 0.0) || !age.is_finite() {
        return Err(invalid(format!("age must be non-negative, got {age}")));
    }
    if bin_width == 0 {
        return Err(invalid("bin width must be at least 1"));
    }
    if sex > 1 {
        return Err(invalid(format!("sex must be 0 or 1, got {sex}")));
    }
    Ok(AgeSexClass {
        bin: (age / bin_width as f64).floor() as u32,
        sex,
        bin_width,
    })
}

/// Dense class indexing: observed bins × {M, F}, ordered by (bin, sex).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub classes: Vec<AgeSexClass>,
}

impl ClassSet {
    pub fn from_observed(ages: impl IntoIterator<Item = f64>, bin_width: u32) -> Result<Self> {
        let mut bins = BTreeSet::new();
        for age in ages {
            bins.insert(age_sex_class(age, 0, bin_width)?.bin);
        }
        let classes = bins
            .into_iter()
            .flat_map(|bin| (0..2).map(move |sex| AgeSexClass { bin, sex, bin_width }))
            .collect();
        Ok(ClassSet { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &AgeSexClass) -> Option<usize> {
        self.classes.binary_search(class).ok()
    }
}

/// Splits an H×W slice into row-major, non-overlapping P×P patches.
pub fn patchify(slice: ArrayView2<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w) = slice.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err(format!(
            "patch size {patch} does not divide slice {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch));
    for py in 0..gh {
        for px in 0..gw {
            let mut row = out.row_mut(py * gw + px);
            for y in 0..patch {
                for x in 0..patch {
                    row[y * patch + x] = slice[[py * patch + y, px * patch + x]];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: ArrayView2<f64>, patch: usize, h: usize, w: usize) -> Result<Array2<f64>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err(format!("patch size {patch} does not divide {h}x{w}")));
    }
    let gw = w / patch;
    if patches.dim() != ((h / patch) * gw, patch * patch) {
        return Err(shape_err(format!("patch matrix {:?} does not fit {h}x{w}", patches.dim())));
    }
    let mut out = Array2::zeros((h, w));
    for (p, row) in patches.rows().into_iter().enumerate() {
        let (py, px) = (p / gw, p % gw);
        for y in 0..patch {
            for x in 0..patch {
                out[[py * patch + y, px * patch + x]] = row[y * patch + x];
            }
        }
    }
    Ok(out)
}

/// Architecture recovered from a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTArch {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub image_hw: (usize, usize),
}

impl ViTArch {
    pub fn num_patches(&self) -> usize {
        (self.image_hw.0 / self.patch_size) * (self.image_hw.1 / self.patch_size)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch_size, self.image_hw.1 / self.patch_size)
    }
}

/// Encoder parameters, plus the classification head while pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub params: ParamSet,
    pub arch: ViTArch,
}

fn layer_name(l: usize, rest: &str) -> String {
    format!("layers.{l}.{rest}")
}

impl ViTParams {
    pub fn init(config: &ViTConfig, image_hw: (usize, usize), num_classes: usize) -> Result<Self> {
        config.validate()?;
        let (h, w) = image_hw;
        let p = config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "slice {h}x{w} is not divisible by patch size {p}"
            )));
        }
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let tokens = 1 + (h / p) * (w / p);
        let mut rng = rng_for(config.seed, 0x5649_5400);
        let mut ps = ParamSet::new();
        ps.insert("meta.patch_size", Tensor::scalar(p as f64));
        ps.insert("meta.heads", Tensor::scalar(config.heads as f64));
        ps.insert("meta.image_h", Tensor::scalar(h as f64));
        ps.insert("meta.image_w", Tensor::scalar(w as f64));
        ps.insert("patch_embed.weight", trunc_normal(&[d, p * p], INIT_STD, &mut rng));
        ps.insert("patch_embed.bias", Tensor::zeros(&[d]));
        ps.insert("cls_token", trunc_normal(&[d], INIT_STD, &mut rng));
        ps.insert("pos_embed", trunc_normal(&[tokens, d], INIT_STD, &mut rng));
        for l in 0..config.depth {
            ps.insert(layer_name(l, "ln1.weight"), Tensor::filled(&[d], 1.0));
            ps.insert(layer_name(l, "ln1.bias"), Tensor::zeros(&[d]));
            ps.insert(layer_name(l, "attn.qkv.weight"), trunc_normal(&[3 * d, d], INIT_STD, &mut rng));
            ps.insert(layer_name(l, "attn.qkv.bias"), Tensor::zeros(&[3 * d]));
            ps.insert(layer_name(l, "attn.proj.weight"), trunc_normal(&[d, d], INIT_STD, &mut rng));
            ps.insert(layer_name(l, "attn.proj.bias"), Tensor::zeros(&[d]));
            ps.insert(layer_name(l, "ln2.weight"), Tensor::filled(&[d], 1.0));
            ps.insert(layer_name(l, "ln2.bias"), Tensor::zeros(&[d]));
            ps.insert(layer_name(l, "mlp.fc1.weight"), trunc_normal(&[hidden, d], INIT_STD, &mut rng));
            ps.insert(layer_name(l, "mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            ps.insert(layer_name(l, "mlp.fc2.weight"), trunc_normal(&[d, hidden], INIT_STD, &mut rng));
            ps.insert(layer_name(l, "mlp.fc2.bias"), Tensor::zeros(&[d]));
        }
        ps.insert("norm.weight", Tensor::filled(&[d], 1.0));
        ps.insert("norm.bias", Tensor::zeros(&[d]));
        if num_classes > 0 {
            ps.insert("head.weight", trunc_normal(&[num_classes, d], INIT_STD, &mut rng));
            ps.insert("head.bias", Tensor::zeros(&[num_classes]));
        }
        Self::from_params(ps)
    }

    /// Validates tensor shapes and recovers the architecture.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let patch_size = params.scalar("meta.patch_size")? as usize;
        let heads = params.scalar("meta.heads")? as usize;
        let image_hw = (
            params.scalar("meta.image_h")? as usize,
            params.scalar("meta.image_w")? as usize,
        );
        let pe = params.get("patch_embed.weight")?;
        if pe.shape.len() != 2 || pe.shape[1] != patch_size * patch_size {
            return Err(Error::Format(format!("bad patch_embed shape {:?}", pe.shape)));
        }
        let embed_dim = pe.shape[0];
        let mut depth = 0;
        while params.contains(&layer_name(depth, "ln1.weight")) {
            depth += 1;
        }
        let mlp_hidden = if depth > 0 {
            params.get(&layer_name(0, "mlp.fc1.weight"))?.shape[0]
        } else {
            0
        };
        if heads == 0 || embed_dim % heads != 0 {
            return Err(Error::Format(format!("{heads} heads do not divide width {embed_dim}")));
        }
        let arch = ViTArch {
            patch_size,
            embed_dim,
            depth,
            heads,
            mlp_hidden,
            image_hw,
        };
        if image_hw.0 % patch_size != 0 || image_hw.1 % patch_size != 0 {
            return Err(Error::Format("image size not divisible by patch size".into()));
        }
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let t = params.get(name)?;
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor {name} has non-finite values")));
            }
            Ok(())
        };
        let d = embed_dim;
        expect("patch_embed.bias", &[d])?;
        expect("cls_token", &[d])?;
        expect("pos_embed", &[1 + arch.num_patches(), d])?;
        for l in 0..depth {
            expect(&layer_name(l, "ln1.weight"), &[d])?;
            expect(&layer_name(l, "ln1.bias"), &[d])?;
            expect(&layer_name(l, "attn.qkv.weight"), &[3 * d, d])?;
            expect(&layer_name(l, "attn.qkv.bias"), &[3 * d])?;
            expect(&layer_name(l, "attn.proj.weight"), &[d, d])?;
            expect(&layer_name(l, "attn.proj.bias"), &[d])?;
            expect(&layer_name(l, "ln2.weight"), &[d])?;
            expect(&layer_name(l, "ln2.bias"), &[d])?;
            expect(&layer_name(l, "mlp.fc1.weight"), &[mlp_hidden, d])?;
            expect(&layer_name(l, "mlp.fc1.bias"), &[mlp_hidden])?;
            expect(&layer_name(l, "mlp.fc2.weight"), &[d, mlp_hidden])?;
            expect(&layer_name(l, "mlp.fc2.bias"), &[d])?;
        }
        expect("norm.weight", &[d])?;
        expect("norm.bias", &[d])?;
        if params.contains("head.weight") {
            let c = params.get("head.weight")?.shape[0];
            expect("head.weight", &[c, d])?;
            expect("head.bias", &[c])?;
        }
        Ok(ViTParams { params, arch })
    }

    pub fn num_classes(&self) -> usize {
        self.params
            .get("head.weight")
            .map(|t| t.shape[0])
            .unwrap_or(0)
    }

    /// An encoder without a classification head is frozen.
    pub fn is_frozen(&self) -> bool {
        !self.params.contains("head.weight")
    }

    /// Drops the classification head.
    pub fn freeze(&mut self) {
        self.params.remove("head.weight");
        self.params.remove("head.bias");
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(ParamSet::load(path)?)
    }

    fn t(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("validated at construction")
    }

    fn v1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.t(name).view1()
    }

    fn v2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.t(name).view2()
    }

    /// Trainable tensors (everything except `meta.*`), zeroed.
    pub fn zero_grads(&self) -> ParamSet {
        let mut g = ParamSet::new();
        for (name, t) in self.params.iter() {
            if !name.starts_with("meta.") {
                g.insert(name, Tensor::zeros(&t.shape));
            }
        }
        g
    }
}

/// Per-layer activations retained for the backward pass.
struct LayerCache {
    x_in: Array2<f64>,
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Everything computed by a full forward pass over one slice.
pub struct EncoderTrace {
    patches: Array2<f64>,
    layers: Vec<LayerCache>,
    ln_final: LnCache,
    /// Token matrix after the final LayerNorm; row 0 is CLS.
    pub output: Array2<f64>,
}

impl EncoderTrace {
    pub fn cls(&self) -> Array1<f64> {
        self.output.row(0).to_owned()
    }

    /// Patch-token embeddings after the final LayerNorm (N_p×d).
    pub fn patch_tokens(&self) -> ArrayView2<'_, f64> {
        self.output.slice(s![1.., ..])
    }

    /// Final-layer attention of every head, each (1+N_p)×(1+N_p).
    pub fn final_attention(&self) -> Option<&[Array2<f64>]> {
        self.layers.last().map(|l| l.attn.as_slice())
    }
}

/// Patch embedding plus CLS prepend plus positional encoding.
pub fn embed_tokens(slice: ArrayView2<f64>, params: &ViTParams) -> Result<Array2<f64>> {
    Ok(embed_with_patches(slice, params)?.0)
}

fn embed_with_patches(slice: ArrayView2<f64>, params: &ViTParams) -> Result<(Array2<f64>, Array2<f64>)> {
    if slice.dim() != params.arch.image_hw {
        return Err(shape_err(format!(
            "slice {:?} does not match encoder input {:?}",
            slice.dim(),
            params.arch.image_hw
        )));
    }
    let patches = patchify(slice, params.arch.patch_size)?;
    let emb = linear(patches.view(), params.v2("patch_embed.weight"), params.v1("patch_embed.bias"));
    let cls = params.v1("cls_token").insert_axis(Axis(0));
    let tokens = concatenate![Axis(0), cls, emb] + &params.v2("pos_embed");
    Ok((tokens, patches))
}

fn layer_forward(x: &Array2<f64>, p: &ViTParams, l: usize, heads: usize) -> (Array2<f64>, LayerCache) {
    let d = x.ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (h1, ln1) = layer_norm(x.view(), p.v1(&layer_name(l, "ln1.weight")), p.v1(&layer_name(l, "ln1.bias")));
    let qkv = linear(h1.view(), p.v2(&layer_name(l, "attn.qkv.weight")), p.v1(&layer_name(l, "attn.qkv.bias")));
    let mut concat = Array2::zeros(x.dim());
    let mut attn = Vec::with_capacity(heads);
    for hh in 0..heads {
        let q = qkv.slice(s![.., hh * hd..(hh + 1) * hd]);
        let k = qkv.slice(s![.., d + hh * hd..d + (hh + 1) * hd]);
        let v = qkv.slice(s![.., 2 * d + hh * hd..2 * d + (hh + 1) * hd]);
        let scores = q.dot(&k.t()) * scale;
        let a = softmax_rows(scores.view());
        concat.slice_mut(s![.., hh * hd..(hh + 1) * hd]).assign(&a.dot(&v));
        attn.push(a);
    }
    let attn_out = linear(concat.view(), p.v2(&layer_name(l, "attn.proj.weight")), p.v1(&layer_name(l, "attn.proj.bias")));
    let x_mid = x + &attn_out;
    let (h2, ln2) = layer_norm(x_mid.view(), p.v1(&layer_name(l, "ln2.weight")), p.v1(&layer_name(l, "ln2.bias")));
    let pre_act = linear(h2.view(), p.v2(&layer_name(l, "mlp.fc1.weight")), p.v1(&layer_name(l, "mlp.fc1.bias")));
    let act = pre_act.mapv(|v| FFN_ACT.forward(v));
    let mlp_out = linear(act.view(), p.v2(&layer_name(l, "mlp.fc2.weight")), p.v1(&layer_name(l, "mlp.fc2.bias")));
    let out = &x_mid + &mlp_out;
    let cache = LayerCache {
        x_in: x.clone(),
        ln1,
        h1,
        qkv,
        attn,
        concat,
        ln2,
        h2,
        pre_act,
        act,
    };
    (out, cache)
}

/// Applies the `L` encoder layers to a token matrix.
pub fn encoder_forward(tokens: ArrayView2<f64>, params: &ViTParams) -> Result<Array2<f64>> {
    if tokens.ncols() != params.arch.embed_dim {
        return Err(shape_err(format!(
            "token width {} does not match embed dim {}",
            tokens.ncols(),
            params.arch.embed_dim
        )));
    }
    let mut z = tokens.to_owned();
    for l in 0..params.arch.depth {
        z = layer_forward(&z, params, l, params.arch.heads).0;
    }
    Ok(z)
}

/// Full forward pass over one z-scored slice, keeping the activations.
pub fn trace_slice(slice: ArrayView2<f64>, params: &ViTParams) -> Result<EncoderTrace> {
    let (mut z, patches) = embed_with_patches(slice, params)?;
    let mut layers = Vec::with_capacity(params.arch.depth);
    for l in 0..params.arch.depth {
        let (next, cache) = layer_forward(&z, params, l, params.arch.heads);
        layers.push(cache);
        z = next;
    }
    let (output, ln_final) = layer_norm(z.view(), params.v1("norm.weight"), params.v1("norm.bias"));
    Ok(EncoderTrace {
        patches,
        layers,
        ln_final,
        output,
    })
}

/// The slice embedding: CLS token after the final LayerNorm.
pub fn encode_slice(slice: ArrayView2<f64>, params: &ViTParams) -> Result<Array1<f64>> {
    Ok(trace_slice(slice, params)?.cls())
}

/// Head-averaged final-layer CLS→patch attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub alpha: Array1<f64>,
}

/// Final-layer CLS rows of every head over all tokens (heads × (1+N_p)).
pub fn cls_attention_rows(trace: &EncoderTrace) -> Result<Array2<f64>> {
    let attn = trace
        .final_attention()
        .ok_or_else(|| shape_err("encoder has no layers, so no attention"))?;
    let tokens = attn[0].ncols();
    let mut rows = Array2::zeros((attn.len(), tokens));
    for (h, a) in attn.iter().enumerate() {
        rows.row_mut(h).assign(&a.row(0));
    }
    Ok(rows)
}

pub fn cls_attention_from_trace(trace: &EncoderTrace) -> Result<AttentionWeights> {
    let rows = cls_attention_rows(trace)?;
    let alpha = rows
        .slice(s![.., 1..])
        .mean_axis(Axis(0))
        .expect("at least one head");
    Ok(AttentionWeights { alpha })
}

pub fn cls_attention(slice: ArrayView2<f64>, params: &ViTParams) -> Result<AttentionWeights> {
    cls_attention_from_trace(&trace_slice(slice, params)?)
}

/// Classification logits for one slice (requires the head).
pub fn classify(slice: ArrayView2<f64>, params: &ViTParams) -> Result<Array1<f64>> {
    if params.is_frozen() {
        return Err(invalid("encoder has no classification head"));
    }
    let cls = encode_slice(slice, params)?;
    Ok(params.v2("head.weight").dot(&cls) + &params.v1("head.bias"))
}

/// Mean categorical cross-entropy of `logits` (B×C) against one-hot `targets`.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    if logits.dim() != targets.dim() || logits.nrows() == 0 {
        return Err(shape_err(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(l, y)| -(log_softmax(l) * &y).sum())
        .sum();
    Ok(total / logits.nrows() as f64)
}

fn backward_layer(
    dout: Array2<f64>,
    cache: &LayerCache,
    p: &ViTParams,
    l: usize,
    heads: usize,
    grads: &mut ParamSet,
) -> Array2<f64> {
    let d = dout.ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut add = |name: String, v: ArrayView2<f64>| {
        let g = grads.get_mut(&name).expect("grad tensor");
        g.view2_mut().zip_mut_with(&v, |a, b| *a += b);
    };
    // FFN branch.
    let (dact, dw2, db2) = linear_backward(dout.view(), cache.act.view(), p.v2(&layer_name(l, "mlp.fc2.weight")));
    add(layer_name(l, "mlp.fc2.weight"), dw2.view());
    add(layer_name(l, "mlp.fc2.bias"), db2.view().insert_axis(Axis(0)));
    let mut dpre = dact;
    dpre.zip_mut_with(&cache.pre_act, |g, &u| *g = FFN_ACT.backward(u, *g, false));
    let (dh2, dw1, db1) = linear_backward(dpre.view(), cache.h2.view(), p.v2(&layer_name(l, "mlp.fc1.weight")));
    add(layer_name(l, "mlp.fc1.weight"), dw1.view());
    add(layer_name(l, "mlp.fc1.bias"), db1.view().insert_axis(Axis(0)));
    let (dx_ln2, dg2, dbeta2) = layer_norm_backward(dh2.view(), p.v1(&layer_name(l, "ln2.weight")), &cache.ln2);
    add(layer_name(l, "ln2.weight"), dg2.view().insert_axis(Axis(0)));
    add(layer_name(l, "ln2.bias"), dbeta2.view().insert_axis(Axis(0)));
    let dmid = dout + &dx_ln2;

    // Attention branch.
    let (dconcat, dwp, dbp) = linear_backward(dmid.view(), cache.concat.view(), p.v2(&layer_name(l, "attn.proj.weight")));
    add(layer_name(l, "attn.proj.weight"), dwp.view());
    add(layer_name(l, "attn.proj.bias"), dbp.view().insert_axis(Axis(0)));
    let mut dqkv = Array2::zeros(cache.qkv.dim());
    for (hh, a) in cache.attn.iter().enumerate() {
        let qs = s![.., hh * hd..(hh + 1) * hd];
        let ks = s![.., d + hh * hd..d + (hh + 1) * hd];
        let vs = s![.., 2 * d + hh * hd..2 * d + (hh + 1) * hd];
        let q = cache.qkv.slice(qs);
        let k = cache.qkv.slice(ks);
        let v = cache.qkv.slice(vs);
        let dout_h = dconcat.slice(s![.., hh * hd..(hh + 1) * hd]);
        let da = dout_h.dot(&v.t());
        let dv = a.t().dot(&dout_h);
        let mut dscore = a * &da;
        let row_sums = dscore.sum_axis(Axis(1));
        for (mut row, (arow, rs)) in dscore.rows_mut().into_iter().zip(a.rows().into_iter().zip(row_sums.iter())) {
            row.zip_mut_with(&arow, |g, &av| *g -= av * rs);
        }
        dscore *= scale;
        dqkv.slice_mut(qs).assign(&dscore.dot(&k));
        dqkv.slice_mut(ks).assign(&dscore.t().dot(&q));
        dqkv.slice_mut(vs).assign(&dv);
    }
    let (dh1, dwqkv, dbqkv) = linear_backward(dqkv.view(), cache.h1.view(), p.v2(&layer_name(l, "attn.qkv.weight")));
    add(layer_name(l, "attn.qkv.weight"), dwqkv.view());
    add(layer_name(l, "attn.qkv.bias"), dbqkv.view().insert_axis(Axis(0)));
    let (dx_ln1, dg1, dbeta1) = layer_norm_backward(dh1.view(), p.v1(&layer_name(l, "ln1.weight")), &cache.ln1);
    add(layer_name(l, "ln1.weight"), dg1.view().insert_axis(Axis(0)));
    add(layer_name(l, "ln1.bias"), dbeta1.view().insert_axis(Axis(0)));
    debug_assert_eq!(cache.x_in.dim(), dmid.dim());
    dmid + &dx_ln1
}

/// Backpropagates `d_output` (gradient w.r.t. the post-LayerNorm token
/// matrix) into `grads`.
fn backward_encoder(d_output: Array2<f64>, trace: &EncoderTrace, params: &ViTParams, grads: &mut ParamSet) {
    let (dz, dg, db) = layer_norm_backward(d_output.view(), params.v1("norm.weight"), &trace.ln_final);
    grads.get_mut("norm.weight").unwrap().view1_mut().scaled_add(1.0, &dg);
    grads.get_mut("norm.bias").unwrap().view1_mut().scaled_add(1.0, &db);
    let mut dz = dz;
    for l in (0..params.arch.depth).rev() {
        dz = backward_layer(dz, &trace.layers[l], params, l, params.arch.heads, grads);
    }
    grads.get_mut("pos_embed").unwrap().view2_mut().scaled_add(1.0, &dz);
    grads.get_mut("cls_token").unwrap().view1_mut().scaled_add(1.0, &dz.row(0));
    let demb = dz.slice(s![1.., ..]);
    let (_, dw, dbias) = linear_backward(demb, trace.patches.view(), params.v2("patch_embed.weight"));
    grads.get_mut("patch_embed.weight").unwrap().view2_mut().scaled_add(1.0, &dw);
    grads.get_mut("patch_embed.bias").unwrap().view1_mut().scaled_add(1.0, &dbias);
}

/// Cross-entropy of one slice against class `target`, with the gradient of
/// `weight · loss` accumulated into `grads`. Returns `(loss, logits)`.
pub fn slice_loss_and_grad(
    slice: ArrayView2<f64>,
    target: usize,
    weight: f64,
    params: &ViTParams,
    grads: &mut ParamSet,
) -> Result<(f64, Array1<f64>)> {
    let c = params.num_classes();
    if target >= c {
        return Err(invalid(format!("class {target} out of range for {c} classes")));
    }
    let trace = trace_slice(slice, params)?;
    let cls = trace.output.row(0);
    let logits = params.v2("head.weight").dot(&cls) + &params.v1("head.bias");
    let logp = log_softmax(logits.view());
    let loss = -logp[target];
    let mut dlogits = logp.mapv(f64::exp);
    dlogits[target] -= 1.0;
    dlogits *= weight;
    grads
        .get_mut("head.weight")?
        .view2_mut()
        .scaled_add(1.0, &dlogits.view().insert_axis(Axis(1)).dot(&cls.insert_axis(Axis(0))));
    grads.get_mut("head.bias")?.view1_mut().scaled_add(1.0, &dlogits);
    let dcls = params.v2("head.weight").t().dot(&dlogits);
    let mut dout = Array2::zeros(trace.output.dim());
    dout.row_mut(0).assign(&dcls);
    backward_encoder(dout, &trace, params, grads);
    Ok((loss, logits))
}

/// Mean cross-entropy over a batch and its gradient w.r.t. every trainable tensor.
pub fn batch_loss_and_grad(
    slices: &[ArrayView2<f64>],
    targets: &[usize],
    params: &ViTParams,
) -> Result<(f64, ParamSet, usize)> {
    if slices.is_empty() || slices.len() != targets.len() {
        return Err(invalid("batch must be non-empty with one target per slice"));
    }
    let weight = 1.0 / slices.len() as f64;
    let per: Vec<Result<(f64, ParamSet, bool)>> = slices
        .par_iter()
        .zip(targets.par_iter())
        .map(|(s, &t)| {
            let mut g = params.zero_grads();
            let (loss, logits) = slice_loss_and_grad(*s, t, weight, params, &mut g)?;
            let pred = argmax(logits.view());
            Ok((loss, g, pred == t))
        })
        .collect();
    let mut grads = params.zero_grads();
    let mut total = 0.0;
    let mut correct = 0;
    for r in per {
        let (loss, g, ok) = r?;
        total += loss;
        correct += usize::from(ok);
        grads.add_assign(&g);
    }
    Ok((total * weight, grads, correct))
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ViTParams,
    pub log: Vec<EpochLog>,
    pub classes: ClassSet,
}

/// Writes the training log as JSON lines.
pub fn write_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for entry in log {
        serde_json::to_writer(&mut f, entry)?;
        writeln!(f).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Sampled training slices and their dense class targets.
struct PretrainData {
    slices: Vec<Array2<f64>>,
    targets: Vec<usize>,
    image_hw: (usize, usize),
}

fn pretrain_data(volumes: &[Volume], config: &ViTConfig, classes: &ClassSet) -> Result<PretrainData> {
    let image_hw = (volumes[0].dims[1], volumes[0].dims[2]);
    let mut slices = Vec::new();
    let mut targets = Vec::new();
    for v in volumes {
        if (v.dims[1], v.dims[2]) != image_hw {
            return Err(shape_err(format!(
                "{} has slices {}x{}, expected {image_hw:?}",
                v.subject_id, v.dims[1], v.dims[2]
            )));
        }
        let class = age_sex_class(v.age as f64, v.sex, config.bin_width)?;
        let target = classes
            .index_of(&class)
            .ok_or_else(|| invalid(format!("class {} not in class set", class.label())))?;
        for i in even_indices(v.slices(), config.slices_per_volume)? {
            slices.push(zscore(v.slice(i), image_hw.0, image_hw.1));
            targets.push(target);
        }
    }
    Ok(PretrainData {
        slices,
        targets,
        image_hw,
    })
}

/// Stage-1 pretraining on in-memory volumes. The returned encoder is frozen.
pub fn train_vit_on(volumes: &[Volume], config: &ViTConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if volumes.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let classes = ClassSet::from_observed(volumes.iter().map(|v| v.age as f64), config.bin_width)?;
    if classes.len() < 2 {
        return Err(invalid("need at least two age-sex classes"));
    }
    let data = pretrain_data(volumes, config, &classes)?;
    let mut params = ViTParams::init(config, data.image_hw, classes.len())?;
    let mut opt = Adam::new(config.lr, &params.params);
    let mut rng = rng_for(config.seed, 0x5649_5401);
    let mut order: Vec<usize> = (0..data.slices.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            let views: Vec<_> = batch.iter().map(|&i| data.slices[i].view()).collect();
            let targets: Vec<_> = batch.iter().map(|&i| data.targets[i]).collect();
            let (loss, grads, ok) = batch_loss_and_grad(&views, &targets, &params)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            opt.step(&mut params.params, &grads);
        }
        let n = data.slices.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        };
        log::info!("vit epoch {epoch}: loss {:.4} acc {:.3}", entry.loss, entry.accuracy);
        log.push(entry);
    }
    params.freeze();
    params.params.round_to_f32();
    Ok(PretrainOutcome {
        params,
        log,
        classes,
    })
}

/// Stage-1 pretraining over the manifest's training split.
pub fn train_vit(manifest: &CohortManifest, config: &ViTConfig) -> Result<PretrainOutcome> {
    let volumes = manifest
        .split(Split::Train)
        .map(|r| manifest.load_volume(r))
        .collect::<Result<Vec<_>>>()?;
    if volumes.is_empty() {
        return Err(invalid("manifest has no training subjects"));
    }
    train_vit_on(&volumes, config)
}

/// Per-slice ViT embeddings stacked in sagittal order (S×d).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub z: Array2<f64>,
    pub subject_id: String,
    pub sex: u8,
    pub age: f64,
}

impl EmbeddingMatrix {
    /// Stores Z as a 1×S×d `.brv` volume carrying the subject metadata.
    pub fn to_volume(&self, cohort_label: u8) -> Result<Volume> {
        let (s, d) = self.z.dim();
        Volume::new(
            self.subject_id.clone(),
            [1, s, d],
            self.z.iter().map(|&v| v as f32).collect(),
            self.age as f32,
            self.sex,
            cohort_label,
        )
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.dims[0] != 1 {
            return Err(Error::Format(format!(
                "feature file for {} must have one plane, has {}",
                v.subject_id, v.dims[0]
            )));
        }
        let z = Array2::from_shape_vec((v.dims[1], v.dims[2]), v.voxels.iter().map(|&x| x as f64).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(EmbeddingMatrix {
            z,
            subject_id: v.subject_id.clone(),
            sex: v.sex,
            age: v.age as f64,
        })
    }
}

/// Encodes every sagittal slice of `volume` with the frozen encoder.
pub fn build_feature_map(volume: &Volume, params: &ViTParams) -> Result<EmbeddingMatrix> {
    let stack = extract_slices(volume);
    let rows = stack
        .slices
        .par_iter()
        .map(|s| encode_slice(s.view(), params))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    let z = concatenate(Axis(0), &views).map_err(|e| shape_err(e.to_string()))?;
    Ok(EmbeddingMatrix {
        z,
        subject_id: volume.subject_id.clone(),
        sex: volume.sex,
        age: volume.age as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn class_labels() {
        assert_eq!(age_sex_class(54.0, 0, 10).unwrap().label(), "50-59|M");
        assert_eq!(age_sex_class(39.999, 1, 10).unwrap().label(), "30-39|F");
        assert_eq!(age_sex_class(54.0, 0, 20).unwrap().label(), "40-59|M");
        assert!(age_sex_class(-1.0, 0, 10).is_err());
    }

    #[test]
    fn class_set_is_product_of_bins_and_sexes() {
        let set = ClassSet::from_observed([21.0, 25.0, 47.0, 83.0], 10).unwrap();
        assert_eq!(set.len(), 6);
        let labels: Vec<_> = set.classes.iter().map(AgeSexClass::label).collect();
        assert_eq!(labels[0], "20-29|M");
        assert_eq!(labels[5], "80-89|F");
    }

    #[test]
    fn patch_counts() {
        let img = Array2::<f64>::zeros((224, 224));
        let p = patchify(img.view(), 16).unwrap();
        assert_eq!(p.dim(), (196, 256));
        let single = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as f64);
        let p = patchify(single.view(), 16).unwrap();
        assert_eq!(p.row(0).to_vec(), single.iter().cloned().collect::<Vec<_>>());
        assert!(patchify(Array2::<f64>::zeros((10, 16)).view(), 16).is_err());
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let img = Array2::from_shape_fn((8, 12), |(y, x)| (y as f64 * 1.3 - x as f64).sin());
        let p = patchify(img.view(), 4).unwrap();
        assert_eq!(unpatchify(p.view(), 4, 8, 12).unwrap(), img);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Array2::<f64>::zeros((1, 4));
        let y = array![[0.0, 1.0, 0.0, 0.0]];
        assert!((cross_entropy(uniform.view(), y.view()).unwrap() - 4f64.ln()).abs() < 1e-12);
        // Near-one-hot softmax.
        let sharp = array![[-800.0, 800.0, -800.0, -800.0]];
        assert!(cross_entropy(sharp.view(), y.view()).unwrap().abs() < 1e-12);
        let a = array![[0.2, -1.0, 3.0]];
        let b = array![[1.5, 0.0, -0.5]];
        let ya = array![[0.0, 0.0, 1.0]];
        let yb = array![[1.0, 0.0, 0.0]];
        let both = concatenate![Axis(0), a, b];
        let yboth = concatenate![Axis(0), ya, yb];
        let mean = 0.5 * (cross_entropy(a.view(), ya.view()).unwrap() + cross_entropy(b.view(), yb.view()).unwrap());
        assert!((cross_entropy(both.view(), yboth.view()).unwrap() - mean).abs() < 1e-12);
    }

    fn toy_params(depth: usize, heads: usize) -> ViTParams {
        let cfg = ViTConfig {
            patch_size: 4,
            embed_dim: 8,
            depth,
            heads,
            mlp_ratio: 2.0,
            seed: 3,
            ..ViTConfig::default()
        };
        ViTParams::init(&cfg, (8, 8), 3).unwrap()
    }

    #[test]
    fn zero_depth_encoder_is_identity() {
        let p = toy_params(0, 2);
        let tokens = Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        assert_eq!(encoder_forward(tokens.view(), &p).unwrap(), tokens);
    }

    #[test]
    fn encoder_preserves_shape_and_rejects_bad_width() {
        let p = toy_params(2, 2);
        let tokens = Array2::from_shape_fn((5, 8), |(i, j)| ((i + 2 * j) as f64).cos());
        assert_eq!(encoder_forward(tokens.view(), &p).unwrap().dim(), (5, 8));
        assert!(encoder_forward(Array2::<f64>::zeros((5, 7)).view(), &p).is_err());
    }

    #[test]
    fn single_head_average_is_that_head() {
        let p = toy_params(1, 1);
        let slice = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 3 + x) as f64).sin());
        let trace = trace_slice(slice.view(), &p).unwrap();
        let rows = cls_attention_rows(&trace).unwrap();
        let alpha = cls_attention_from_trace(&trace).unwrap().alpha;
        assert_eq!(alpha.to_vec(), rows.row(0).slice(s![1..]).to_vec());
    }

    #[test]
    fn freeze_drops_head() {
        let mut p = toy_params(1, 2);
        assert!(!p.is_frozen());
        p.freeze();
        assert!(p.is_frozen());
        assert_eq!(p.num_classes(), 0);
        let mut buf = Vec::new();
        p.params.write_to(&mut buf).unwrap();
        let back = ViTParams::from_params(ParamSet::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(back.arch, p.arch);
    }
}
