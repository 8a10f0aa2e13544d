//! Stage-2 residual CNN over the S×d embedding pseudo-image with late sex
//! fusion, MSE / Gaussian NLL training, early stopping and prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{layer_norm, layer_norm_backward, rng_for, uniform_fan_in, Activation, Adam, LnCache};
use crate::params::{ParamSet, Tensor};
use crate::vit::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: (kh, kw),
        }
    }
}

/// Parses `8:10x60,4:5x15,1:2x6`.
pub fn parse_conv_blocks(text: &str) -> Result<Vec<ConvSpec>> {
    let bad = || Error::Config(format!("bad conv block list `{text}`, expected e.g. 8:10x60,4:5x15"));
    text.split(',')
        .map(|part| {
            let (c, k) = part.trim().split_once(':').ok_or_else(bad)?;
            let (kh, kw) = k.split_once('x').ok_or_else(bad)?;
            Ok(ConvSpec::new(
                c.trim().parse().map_err(|_| bad())?,
                kh.trim().parse().map_err(|_| bad())?,
                kw.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn format_conv_blocks(blocks: &[ConvSpec]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}:{}x{}", b.out_channels, b.kernel.0, b.kernel.1))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Nll,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "nll" => Ok(LossKind::Nll),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Nll => "nll",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorConfig {
    pub conv_blocks: Vec<ConvSpec>,
    pub activation: Activation,
    pub fc_dims: (usize, usize),
    pub dropout: f64,
    pub sex_fusion: bool,
    pub residual: bool,
    pub loss: LossKind,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            conv_blocks: vec![ConvSpec::new(8, 10, 60), ConvSpec::new(4, 5, 15), ConvSpec::new(1, 2, 6)],
            activation: Activation::Silu,
            fc_dims: (512, 128),
            dropout: 0.3,
            sex_fusion: true,
            residual: true,
            loss: LossKind::Mse,
            lr: 5e-4,
            max_epochs: 200,
            patience: 20,
            batch_size: 16,
            seed: 42,
        }
    }
}

impl RegressorConfig {
    /// Scaled-down blocks and FC widths for small embedding maps.
    pub fn toy() -> Self {
        RegressorConfig {
            conv_blocks: vec![ConvSpec::new(8, 3, 8), ConvSpec::new(4, 3, 5), ConvSpec::new(1, 2, 3)],
            fc_dims: (64, 16),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.conv_blocks.is_empty() {
            return bad("regressor needs at least one conv block");
        }
        if self
            .conv_blocks
            .iter()
            .any(|b| b.out_channels == 0 || b.kernel.0 == 0 || b.kernel.1 == 0)
        {
            return bad("conv block channels and kernel dims must be positive");
        }
        if self.fc_dims.0 == 0 || self.fc_dims.1 == 0 {
            return bad("regressor fc dims must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("regressor.dropout must lie in [0,1)");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("regressor lr, batch_size and max_epochs must be positive");
        }
        Ok(())
    }
}

/// Shape bookkeeping for one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub in_hw: (usize, usize),
    /// After the valid convolution.
    pub conv_hw: (usize, usize),
    /// After the 2×2 stride-1 max pool.
    pub out_hw: (usize, usize),
    pub skip_conv: bool,
}

impl BlockArch {
    fn new(in_channels: usize, spec: ConvSpec, in_hw: (usize, usize), residual: bool) -> Result<Self> {
        let (h, w) = in_hw;
        let (kh, kw) = spec.kernel;
        // The pool needs at least a 2×2 conv output.
        if kh > h || kw > w || h - kh + 1 < 2 || w - kw + 1 < 2 {
            return Err(shape_err(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} (valid conv then 2x2 pool)"
            )));
        }
        let conv_hw = (h - kh + 1, w - kw + 1);
        Ok(BlockArch {
            in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            in_hw,
            conv_hw,
            out_hw: (conv_hw.0 - 1, conv_hw.1 - 1),
            skip_conv: residual && in_channels != spec.out_channels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorArch {
    pub input_hw: (usize, usize),
    pub blocks: Vec<BlockArch>,
    pub flat: usize,
    pub fc_dims: (usize, usize),
    pub activation: Activation,
    pub sex_fusion: bool,
    pub residual: bool,
    pub nll: bool,
}

impl RegressorArch {
    pub fn fused_width(&self) -> usize {
        self.fc_dims.1 + usize::from(self.sex_fusion)
    }

    /// Shapes along the pipeline: block outputs (C, h, w), then flat, fc1, fc2, fused width.
    pub fn shape_chain(&self) -> (Vec<(usize, usize, usize)>, [usize; 4]) {
        let blocks = self
            .blocks
            .iter()
            .map(|b| (b.out_channels, b.out_hw.0, b.out_hw.1))
            .collect();
        (blocks, [self.flat, self.fc_dims.0, self.fc_dims.1, self.fused_width()])
    }
}

fn block_name(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub params: ParamSet,
    pub arch: RegressorArch,
}

impl RegressorParams {
    /// Initializes a regressor for S×d inputs. FC1's input width comes from a
    /// dummy forward pass through the conv blocks.
    pub fn init(config: &RegressorConfig, input_hw: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, 0x434e_4e00);
        let mut ps = ParamSet::new();
        ps.insert("meta.input_h", Tensor::scalar(input_hw.0 as f64));
        ps.insert("meta.input_w", Tensor::scalar(input_hw.1 as f64));
        ps.insert("meta.activation", Tensor::scalar(config.activation.code()));
        ps.insert("meta.sex_fusion", Tensor::scalar(f64::from(u8::from(config.sex_fusion))));
        ps.insert("meta.residual", Tensor::scalar(f64::from(u8::from(config.residual))));
        ps.insert("meta.nll", Tensor::scalar(f64::from(u8::from(config.loss == LossKind::Nll))));

        let mut cin = 1;
        let mut hw = input_hw;
        for (i, spec) in config.conv_blocks.iter().enumerate() {
            let b = BlockArch::new(cin, *spec, hw, config.residual)?;
            let (kh, kw) = spec.kernel;
            let fan_in = cin * kh * kw;
            ps.insert(block_name(i, "conv.weight"), uniform_fan_in(&[spec.out_channels, cin, kh, kw], fan_in, &mut rng));
            ps.insert(block_name(i, "conv.bias"), uniform_fan_in(&[spec.out_channels], fan_in, &mut rng));
            if b.skip_conv {
                ps.insert(block_name(i, "skip.weight"), uniform_fan_in(&[spec.out_channels, cin], cin, &mut rng));
                ps.insert(block_name(i, "skip.bias"), uniform_fan_in(&[spec.out_channels], cin, &mut rng));
            }
            cin = spec.out_channels;
            hw = b.out_hw;
        }

        let conv_arch = conv_arch(&ps, input_hw, config.residual)?;
        let dummy = Array3::zeros((1, input_hw.0, input_hw.1));
        let flat = conv_stack_forward(dummy.view(), &ps, &conv_arch, config.activation).0.len();

        let (f1, f2) = config.fc_dims;
        let fused = f2 + usize::from(config.sex_fusion);
        ps.insert("fc1.weight", uniform_fan_in(&[f1, flat], flat, &mut rng));
        ps.insert("fc1.bias", uniform_fan_in(&[f1], flat, &mut rng));
        ps.insert("ln1.weight", Tensor::filled(&[f1], 1.0));
        ps.insert("ln1.bias", Tensor::zeros(&[f1]));
        ps.insert("fc2.weight", uniform_fan_in(&[f2, f1], f1, &mut rng));
        ps.insert("fc2.bias", uniform_fan_in(&[f2], f1, &mut rng));
        ps.insert("ln2.weight", Tensor::filled(&[f2], 1.0));
        ps.insert("ln2.bias", Tensor::zeros(&[f2]));
        ps.insert("out.weight", uniform_fan_in(&[1, fused], fused, &mut rng));
        ps.insert("out.bias", uniform_fan_in(&[1], fused, &mut rng));
        if config.loss == LossKind::Nll {
            ps.insert("logvar.weight", uniform_fan_in(&[1, fused], fused, &mut rng));
            ps.insert("logvar.bias", uniform_fan_in(&[1], fused, &mut rng));
        }
        Self::from_params(ps)
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let input_hw = (
            params.scalar("meta.input_h")? as usize,
            params.scalar("meta.input_w")? as usize,
        );
        let activation = Activation::from_code(params.scalar("meta.activation")?)
            .ok_or_else(|| Error::Format("unknown activation code".into()))?;
        let sex_fusion = params.scalar("meta.sex_fusion")? != 0.0;
        let residual = params.scalar("meta.residual")? != 0.0;
        let nll = params.scalar("meta.nll")? != 0.0;
        let blocks = conv_arch(&params, input_hw, residual)?;
        let last = blocks.last().ok_or_else(|| Error::Format("no conv blocks".into()))?;
        let flat = last.out_channels * last.out_hw.0 * last.out_hw.1;
        let fc1 = params.get("fc1.weight")?;
        let fc2 = params.get("fc2.weight")?;
        if fc1.shape.len() != 2 || fc1.shape[1] != flat {
            return Err(Error::Format(format!("fc1 shape {:?} does not take {flat} inputs", fc1.shape)));
        }
        let fc_dims = (fc1.shape[0], fc2.shape[0]);
        let arch = RegressorArch {
            input_hw,
            blocks,
            flat,
            fc_dims,
            activation,
            sex_fusion,
            residual,
            nll,
        };
        let fused = arch.fused_width();
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let t = params.get(name)?;
            if t.shape != shape {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor {name} has non-finite values")));
            }
            Ok(())
        };
        expect("fc1.bias", &[fc_dims.0])?;
        expect("ln1.weight", &[fc_dims.0])?;
        expect("ln1.bias", &[fc_dims.0])?;
        expect("fc2.weight", &[fc_dims.1, fc_dims.0])?;
        expect("fc2.bias", &[fc_dims.1])?;
        expect("ln2.weight", &[fc_dims.1])?;
        expect("ln2.bias", &[fc_dims.1])?;
        expect("out.weight", &[1, fused])?;
        expect("out.bias", &[1])?;
        if nll {
            expect("logvar.weight", &[1, fused])?;
            expect("logvar.bias", &[1])?;
        }
        Ok(RegressorParams { params, arch })
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

    /// Weight of the sex input in the final linear layer.
    pub fn sex_weight(&self) -> Option<f64> {
        if !self.arch.sex_fusion {
            return None;
        }
        self.params.get("out.weight").ok().map(|t| t.data[self.arch.fc_dims.1])
    }

    pub fn zero_grads(&self) -> ParamSet {
        let mut g = ParamSet::new();
        for (name, t) in self.params.iter() {
            if !name.starts_with("meta.") {
                g.insert(name, Tensor::zeros(&t.shape));
            }
        }
        g
    }

    fn t(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("validated at construction")
    }
}

fn conv_arch(params: &ParamSet, input_hw: (usize, usize), residual: bool) -> Result<Vec<BlockArch>> {
    let mut blocks = Vec::new();
    let mut cin = 1;
    let mut hw = input_hw;
    let mut i = 0;
    while params.contains(&block_name(i, "conv.weight")) {
        let w = params.get(&block_name(i, "conv.weight"))?;
        if w.shape.len() != 4 || w.shape[1] != cin {
            return Err(Error::Format(format!("block {i} conv shape {:?} with {cin} input channels", w.shape)));
        }
        let spec = ConvSpec::new(w.shape[0], w.shape[2], w.shape[3]);
        let b = BlockArch::new(cin, spec, hw, residual)?;
        if params.get(&block_name(i, "conv.bias"))?.shape != [spec.out_channels] {
            return Err(Error::Format(format!("block {i} conv bias shape")));
        }
        if b.skip_conv {
            if params.get(&block_name(i, "skip.weight"))?.shape != [spec.out_channels, cin]
                || params.get(&block_name(i, "skip.bias"))?.shape != [spec.out_channels]
            {
                return Err(Error::Format(format!("block {i} skip conv shape")));
            }
        }
        blocks.push(b);
        cin = spec.out_channels;
        hw = b.out_hw;
        i += 1;
    }
    Ok(blocks)
}

/// Valid 2D convolution (cross-correlation) with bias.
pub fn conv2d_valid(x: ArrayView3<f64>, weight: &Tensor, bias: &[f64]) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let (cout, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Array3::zeros((cout, oh, ow));
    for co in 0..cout {
        let mut plane = out.index_axis_mut(Axis(0), co);
        plane.fill(bias[co]);
        for ci in 0..cin {
            let xin = x.index_axis(Axis(0), ci);
            for i in 0..kh {
                for j in 0..kw {
                    let wv = weight.data[((co * cin + ci) * kh + i) * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let src = xin.slice(s![y + i, j..j + ow]);
                        let mut dst = plane.row_mut(y);
                        dst.scaled_add(wv, &src);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dW, db)` for [`conv2d_valid`].
fn conv2d_valid_backward(dout: ArrayView3<f64>, x: ArrayView3<f64>, weight: &Tensor) -> (Array3<f64>, Vec<f64>, Vec<f64>) {
    let (cin, _, _) = x.dim();
    let (cout, oh, ow) = dout.dim();
    let (kh, kw) = (weight.shape[2], weight.shape[3]);
    let mut dx = Array3::zeros(x.dim());
    let mut dw = vec![0.0; weight.data.len()];
    let db = (0..cout).map(|co| dout.index_axis(Axis(0), co).sum()).collect();
    for co in 0..cout {
        let g = dout.index_axis(Axis(0), co);
        for ci in 0..cin {
            let xin = x.index_axis(Axis(0), ci);
            for i in 0..kh {
                for j in 0..kw {
                    let idx = ((co * cin + ci) * kh + i) * kw + j;
                    let wv = weight.data[idx];
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let grow = g.row(y);
                        acc += grow.dot(&xin.slice(s![y + i, j..j + ow]));
                        if wv != 0.0 {
                            let mut dst = dx.slice_mut(s![ci, y + i, j..j + ow]);
                            dst.scaled_add(wv, &grow);
                        }
                    }
                    dw[idx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 max pool with stride 1; also returns the flat argmax of each window.
pub fn max_pool_2x2_s1(x: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h - 1, w - 1);
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (y, xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    if x[[ch, y + dy, xx + dx]] > x[[ch, best.0, best.1]] {
                        best = (y + dy, xx + dx);
                    }
                }
                out[[ch, y, xx]] = x[[ch, best.0, best.1]];
                arg.push((ch * h + best.0) * w + best.1);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour resize of each channel: source index `floor(dst·in/out)`.
pub fn nearest_resize(x: ArrayView3<f64>, out_hw: (usize, usize)) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = out_hw;
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| x[[ch, y * h / oh, xx * w / ow]])
}

fn nearest_resize_backward(dout: ArrayView3<f64>, in_hw: (usize, usize)) -> Array3<f64> {
    let (c, oh, ow) = dout.dim();
    let (h, w) = in_hw;
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[[ch, y * h / oh, xx * w / ow]] += dout[[ch, y, xx]];
            }
        }
    }
    dx
}

/// 1×1 convolution: `out[co] = b[co] + Σ W[co,ci]·x[ci]`.
fn pointwise_conv(x: ArrayView3<f64>, weight: &Tensor, bias: &[f64]) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let cout = weight.shape[0];
    let flat = x.to_shape((cin, h * w)).expect("contiguous");
    let y = weight.view2().dot(&flat);
    let mut out = y.as_standard_layout().into_owned().into_shape_with_order((cout, h, w)).expect("sized");
    for (co, mut plane) in out.outer_iter_mut().enumerate() {
        plane += bias[co];
    }
    out
}

struct BlockCache {
    input: Array3<f64>,
    pre_act: Array3<f64>,
    pool_arg: Vec<usize>,
}

fn block_forward(
    x: ArrayView3<f64>,
    i: usize,
    arch: &BlockArch,
    ps: &ParamSet,
    act: Activation,
    residual: bool,
) -> (Array3<f64>, BlockCache) {
    let w = ps.get(&block_name(i, "conv.weight")).expect("conv weight");
    let b = ps.get(&block_name(i, "conv.bias")).expect("conv bias");
    let pre_act = conv2d_valid(x, w, &b.data);
    let activated = pre_act.mapv(|v| act.forward(v));
    let (mut out, pool_arg) = max_pool_2x2_s1(activated.view());
    if residual {
        let skip = if arch.skip_conv {
            let sw = ps.get(&block_name(i, "skip.weight")).expect("skip weight");
            let sb = ps.get(&block_name(i, "skip.bias")).expect("skip bias");
            pointwise_conv(x, sw, &sb.data)
        } else {
            x.to_owned()
        };
        out += &nearest_resize(skip.view(), arch.out_hw);
    }
    (
        out,
        BlockCache {
            input: x.to_owned(),
            pre_act,
            pool_arg,
        },
    )
}

fn conv_stack_forward(
    x: ArrayView3<f64>,
    ps: &ParamSet,
    blocks: &[BlockArch],
    act: Activation,
) -> (Array1<f64>, Vec<BlockCache>) {
    let mut h = x.to_owned();
    let mut caches = Vec::with_capacity(blocks.len());
    let residual = ps.scalar("meta.residual").map(|v| v != 0.0).unwrap_or(true);
    for (i, arch) in blocks.iter().enumerate() {
        let (next, cache) = block_forward(h.view(), i, arch, ps, act, residual);
        caches.push(cache);
        h = next;
    }
    let len = h.len();
    (h.into_shape_with_order(len).expect("contiguous"), caches)
}

/// Output of a single-subject forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressorOutput {
    pub mean: f64,
    /// Log-variance from the NLL head.
    pub logvar: Option<f64>,
}

impl RegressorOutput {
    pub fn sigma2(&self) -> Option<f64> {
        self.logvar.map(f64::exp)
    }
}

/// Forward mode; training mode draws dropout masks from the given RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    flat: Array1<f64>,
    ln1: LnCache,
    pre1: Array1<f64>,
    mask1: Option<Array1<f64>>,
    d1: Array1<f64>,
    ln2: LnCache,
    pre2: Array1<f64>,
    mask2: Option<Array1<f64>>,
    fused: Array1<f64>,
}

fn dropout_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let keep = 1.0 - p;
    Array1::from_shape_fn(n, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

fn check_input(z: ArrayView2<f64>, sex: u8, params: &RegressorParams) -> Result<()> {
    if z.dim() != params.arch.input_hw {
        return Err(shape_err(format!(
            "embedding matrix {:?} does not match regressor input {:?}",
            z.dim(),
            params.arch.input_hw
        )));
    }
    if sex > 1 {
        return Err(invalid(format!("sex must be 0 or 1, got {sex}")));
    }
    Ok(())
}

/// Full forward pass, keeping activations for backpropagation.
pub fn forward_cached(
    z: ArrayView2<f64>,
    sex: u8,
    params: &RegressorParams,
    dropout: f64,
    mode: Mode<'_>,
) -> Result<(RegressorOutput, ForwardCache)> {
    check_input(z, sex, params)?;
    let arch = &params.arch;
    let act = arch.activation;
    let x = z.insert_axis(Axis(0));
    let (flat, blocks) = conv_stack_forward(x, &params.params, &arch.blocks, act);

    let dense = |name: &str, input: ArrayView1<f64>| -> Array1<f64> {
        params.t(&format!("{name}.weight")).view2().dot(&input) + &params.t(&format!("{name}.bias")).view1()
    };
    let ln = |name: &str, input: Array1<f64>| -> (Array1<f64>, LnCache) {
        let (y, c) = layer_norm(
            input.view().insert_axis(Axis(0)),
            params.t(&format!("{name}.weight")).view1(),
            params.t(&format!("{name}.bias")).view1(),
        );
        (y.row(0).to_owned(), c)
    };

    let (pre1, ln1) = ln("ln1", dense("fc1", flat.view()));
    let (mask1, mask2, mut rng) = match mode {
        Mode::Eval => (None, None, None),
        Mode::Train(rng) => (Some(()), Some(()), Some(rng)),
    };
    let mut a1 = pre1.mapv(|v| act.forward(v));
    let mask1 = match (mask1, rng.as_deref_mut()) {
        (Some(()), Some(r)) if dropout > 0.0 => Some(dropout_mask(a1.len(), dropout, r)),
        _ => None,
    };
    if let Some(m) = &mask1 {
        a1 *= m;
    }
    let d1 = a1;
    let (pre2, ln2) = ln("ln2", dense("fc2", d1.view()));
    let mut a2 = pre2.mapv(|v| act.forward(v));
    let mask2 = match (mask2, rng.as_deref_mut()) {
        (Some(()), Some(r)) if dropout > 0.0 => Some(dropout_mask(a2.len(), dropout, r)),
        _ => None,
    };
    if let Some(m) = &mask2 {
        a2 *= m;
    }
    let fused = if arch.sex_fusion {
        let mut f = Array1::zeros(a2.len() + 1);
        f.slice_mut(s![..a2.len()]).assign(&a2);
        f[a2.len()] = sex as f64;
        f
    } else {
        a2
    };
    let mean = dense("out", fused.view())[0];
    let logvar = if arch.nll {
        Some(dense("logvar", fused.view())[0])
    } else {
        None
    };
    Ok((
        RegressorOutput { mean, logvar },
        ForwardCache {
            blocks,
            flat,
            ln1,
            pre1,
            mask1,
            d1,
            ln2,
            pre2,
            mask2,
            fused,
        },
    ))
}

/// Eval-mode forward pass.
pub fn regressor_forward(z: ArrayView2<f64>, sex: u8, params: &RegressorParams) -> Result<RegressorOutput> {
    Ok(forward_cached(z, sex, params, 0.0, Mode::Eval)?.0)
}

/// How gradients pass through activation units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backprop {
    Standard,
    /// Only positive gradients through units with positive pre-activation.
    Guided,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    pub input: Array2<f64>,
    /// Activation sites where a non-zero standard signal would have been
    /// blocked by the guided rule.
    pub gated_sites: usize,
}

fn act_backward(pre: f64, grad: f64, act: Activation, mode: Backprop, gated: &mut usize) -> f64 {
    if grad != 0.0 && !(pre > 0.0 && grad > 0.0) {
        *gated += 1;
    }
    act.backward(pre, grad, mode == Backprop::Guided)
}

/// Backpropagates `d_mean` (and `d_logvar` for NLL) from the outputs.
pub fn backward(
    cache: &ForwardCache,
    d_mean: f64,
    d_logvar: f64,
    params: &RegressorParams,
    mode: Backprop,
) -> Gradients {
    let arch = &params.arch;
    let act = arch.activation;
    let mut grads = params.zero_grads();
    let mut gated = 0;
    let f2 = arch.fc_dims.1;

    let out_w = params.t("out.weight").view2();
    let mut dfused = out_w.row(0).to_owned() * d_mean;
    {
        let g = grads.get_mut("out.weight").unwrap();
        g.view1_mut().scaled_add(d_mean, &cache.fused);
        grads.get_mut("out.bias").unwrap().data[0] += d_mean;
    }
    if arch.nll {
        let lw = params.t("logvar.weight").view2();
        dfused.scaled_add(d_logvar, &lw.row(0));
        grads.get_mut("logvar.weight").unwrap().view1_mut().scaled_add(d_logvar, &cache.fused);
        grads.get_mut("logvar.bias").unwrap().data[0] += d_logvar;
    }

    // FC2 block.
    let mut da2 = dfused.slice(s![..f2]).to_owned();
    if let Some(m) = &cache.mask2 {
        da2 *= m;
    }
    let dpre2 = Array1::from_shape_fn(f2, |k| act_backward(cache.pre2[k], da2[k], act, mode, &mut gated));
    let (dz2, dg2, db2) = layer_norm_backward(dpre2.view().insert_axis(Axis(0)), params.t("ln2.weight").view1(), &cache.ln2);
    grads.get_mut("ln2.weight").unwrap().view1_mut().scaled_add(1.0, &dg2);
    grads.get_mut("ln2.bias").unwrap().view1_mut().scaled_add(1.0, &db2);
    let dz2 = dz2.row(0).to_owned();
    grads
        .get_mut("fc2.weight")
        .unwrap()
        .view2_mut()
        .scaled_add(1.0, &dz2.view().insert_axis(Axis(1)).dot(&cache.d1.view().insert_axis(Axis(0))));
    grads.get_mut("fc2.bias").unwrap().view1_mut().scaled_add(1.0, &dz2);
    let mut da1 = params.t("fc2.weight").view2().t().dot(&dz2);

    // FC1 block.
    if let Some(m) = &cache.mask1 {
        da1 *= m;
    }
    let f1 = arch.fc_dims.0;
    let dpre1 = Array1::from_shape_fn(f1, |k| act_backward(cache.pre1[k], da1[k], act, mode, &mut gated));
    let (dz1, dg1, db1) = layer_norm_backward(dpre1.view().insert_axis(Axis(0)), params.t("ln1.weight").view1(), &cache.ln1);
    grads.get_mut("ln1.weight").unwrap().view1_mut().scaled_add(1.0, &dg1);
    grads.get_mut("ln1.bias").unwrap().view1_mut().scaled_add(1.0, &db1);
    let dz1 = dz1.row(0).to_owned();
    grads
        .get_mut("fc1.weight")
        .unwrap()
        .view2_mut()
        .scaled_add(1.0, &dz1.view().insert_axis(Axis(1)).dot(&cache.flat.view().insert_axis(Axis(0))));
    grads.get_mut("fc1.bias").unwrap().view1_mut().scaled_add(1.0, &dz1);
    let dflat = params.t("fc1.weight").view2().t().dot(&dz1);

    // Conv blocks, last to first.
    let last = arch.blocks.last().expect("at least one block");
    let mut dh = dflat
        .into_shape_with_order((last.out_channels, last.out_hw.0, last.out_hw.1))
        .expect("flat size matches");
    for (i, (b, c)) in arch.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let mut dx = Array3::zeros(c.input.dim());
        if arch.residual {
            let dskip = nearest_resize_backward(dh.view(), b.in_hw);
            if b.skip_conv {
                let sw = params.t(&block_name(i, "skip.weight"));
                let (cin, h, w) = c.input.dim();
                let x2 = c.input.to_shape((cin, h * w)).expect("contiguous");
                let d2 = dskip.to_shape((b.out_channels, h * w)).expect("contiguous");
                grads.get_mut(&block_name(i, "skip.weight")).unwrap().view2_mut().scaled_add(1.0, &d2.dot(&x2.t()));
                let db = d2.sum_axis(Axis(1));
                grads.get_mut(&block_name(i, "skip.bias")).unwrap().view1_mut().scaled_add(1.0, &db);
                let dxs = sw.view2().t().dot(&d2);
                dx += &dxs.to_shape((cin, h, w)).expect("sized");
            } else {
                dx += &dskip;
            }
        }
        // Unpool into the activation map.
        let (cc, ch, cw) = c.pre_act.dim();
        let mut dact = Array3::<f64>::zeros((cc, ch, cw));
        {
            let flat = dact.as_slice_mut().expect("contiguous");
            for (g, &a) in dh.iter().zip(&c.pool_arg) {
                flat[a] += g;
            }
        }
        let mut dpre = dact;
        dpre.zip_mut_with(&c.pre_act, |g, &u| *g = act_backward(u, *g, act, mode, &mut gated));
        let w = params.t(&block_name(i, "conv.weight"));
        let (dxc, dw, db) = conv2d_valid_backward(dpre.view(), c.input.view(), w);
        dx += &dxc;
        for (a, v) in grads.get_mut(&block_name(i, "conv.weight")).unwrap().data.iter_mut().zip(dw) {
            *a += v;
        }
        for (a, v) in grads.get_mut(&block_name(i, "conv.bias")).unwrap().data.iter_mut().zip(db) {
            *a += v;
        }
        dh = dx;
    }
    let input = dh.index_axis_move(Axis(0), 0);
    Gradients {
        params: grads,
        input,
        gated_sites: gated,
    }
}

/// `(1/N) Σ (aᵢ − ŷᵢ)²`.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(invalid("mse needs equal, non-zero lengths"));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / preds.len() as f64)
}

/// Gaussian negative log-likelihood `(1/N) Σ [(a−μ)²/(2σ²) + ½ log(2πσ²)]`.
pub fn nll_loss(mu: &[f64], sigma2: &[f64], targets: &[f64]) -> Result<f64> {
    if mu.is_empty() || mu.len() != targets.len() || sigma2.len() != mu.len() {
        return Err(invalid("nll needs equal, non-zero lengths"));
    }
    if sigma2.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid("nll variance must be positive"));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let total: f64 = mu
        .iter()
        .zip(sigma2)
        .zip(targets)
        .map(|((m, v), a)| (a - m).powi(2) / (2.0 * v) + 0.5 * (two_pi * v).ln())
        .sum();
    Ok(total / mu.len() as f64)
}

/// Per-sample loss and `(dL/dmean, dL/dlogvar)`, unscaled by batch size.
pub fn sample_loss(out: &RegressorOutput, target: f64, loss: LossKind) -> (f64, f64, f64) {
    match (loss, out.logvar) {
        (LossKind::Nll, Some(lv)) => {
            let var = lv.exp();
            let r = target - out.mean;
            let l = r * r / (2.0 * var) + 0.5 * (2.0 * std::f64::consts::PI * var).ln();
            (l, -r / var, -r * r / (2.0 * var) + 0.5)
        }
        _ => {
            let r = out.mean - target;
            (r * r, 2.0 * r, 0.0)
        }
    }
}

/// Batch loss and parameter gradients. `seeds[i]` drives sample i's dropout
/// masks; `None` means eval mode.
pub fn batch_loss_and_grad(
    samples: &[(ArrayView2<f64>, u8, f64)],
    params: &RegressorParams,
    config: &RegressorConfig,
    seeds: Option<&[(u64, u64)]>,
) -> Result<(f64, ParamSet)> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n = samples.len() as f64;
    let loss_kind = if params.arch.nll { LossKind::Nll } else { LossKind::Mse };
    let per: Vec<Result<(f64, ParamSet)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, (z, sex, target))| {
            let mut rng = seeds.map(|s| rng_for(s[i].0, s[i].1));
            let mode = match rng.as_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Eval,
            };
            let (out, cache) = forward_cached(*z, *sex, params, config.dropout, mode)?;
            let (l, dm, dv) = sample_loss(&out, *target, loss_kind);
            let g = backward(&cache, dm / n, dv / n, params, Backprop::Standard);
            Ok((l, g.params))
        })
        .collect();
    let mut grads = params.zero_grads();
    let mut total = 0.0;
    for r in per {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    Ok((total / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_epoch: usize,
    pub optimizer_steps: u64,
}

/// A labelled training example: embedding matrix, sex, chronological age.
pub type Sample<'a> = (ArrayView2<'a, f64>, u8, f64);

pub fn samples_of(features: &[EmbeddingMatrix]) -> Vec<Sample<'_>> {
    features.iter().map(|f| (f.z.view(), f.sex, f.age)).collect()
}

/// Mean absolute error of eval-mode predictions.
pub fn evaluate_mae(samples: &[Sample<'_>], params: &RegressorParams) -> Result<f64> {
    let errs = samples
        .par_iter()
        .map(|(z, sex, a)| Ok((regressor_forward(*z, *sex, params)?.mean - a).abs()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Rewrites the output heads so a model trained on `(age − mean)/scale`
/// predicts age in years.
fn unstandardize(params: &mut RegressorParams, mean: f64, scale: f64) -> Result<()> {
    params.params.get_mut("out.weight")?.data.iter_mut().for_each(|w| *w *= scale);
    let b = &mut params.params.get_mut("out.bias")?.data[0];
    *b = *b * scale + mean;
    if params.arch.nll {
        params.params.get_mut("logvar.bias")?.data[0] += 2.0 * scale.ln();
    }
    Ok(())
}

/// Trains with Adam, early-stopping on validation MAE, and returns the
/// best-epoch parameters.
pub fn train_regressor<'a>(
    train: &'a [EmbeddingMatrix],
    val: &'a [EmbeddingMatrix],
    config: &RegressorConfig,
) -> Result<(RegressorParams, TrainReport)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("train and validation splits must be non-empty"));
    }
    let input_hw = train[0].z.dim();
    if let Some(bad) = train.iter().chain(val).find(|f| f.z.dim() != input_hw) {
        return Err(shape_err(format!("{} has embedding shape {:?}, expected {input_hw:?}", bad.subject_id, bad.z.dim())));
    }
    let mut params = RegressorParams::init(config, input_hw)?;
    // Ages are standardized for training and the scale is folded back into
    // the output layer at the end, so the saved model predicts years directly.
    // Zero output and log-variance biases here are the training mean and
    // variance once folded.
    let ages: Vec<f64> = train.iter().map(|f| f.age).collect();
    let mean_age = ages.iter().sum::<f64>() / ages.len() as f64;
    let var = ages.iter().map(|a| (a - mean_age).powi(2)).sum::<f64>() / ages.len() as f64;
    let scale = if var > 1e-12 { var.sqrt() } else { 1.0 };
    params.params.get_mut("out.bias")?.data[0] = 0.0;
    if config.loss == LossKind::Nll {
        params.params.get_mut("logvar.bias")?.data[0] = 0.0;
    }
    let standardize = |s: Vec<Sample<'a>>| -> Vec<Sample<'a>> {
        s.into_iter().map(|(z, sex, a)| (z, sex, (a - mean_age) / scale)).collect()
    };

    let train_s = standardize(samples_of(train));
    let val_s = standardize(samples_of(val));
    let mut opt = Adam::new(config.lr, &params.params);
    let mut rng = rng_for(config.seed, 0x434e_4e01);
    let mut order: Vec<usize> = (0..train_s.len()).collect();
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut stopped = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<_> = batch.iter().map(|&i| train_s[i]).collect();
            let seeds: Vec<(u64, u64)> = (0..batch.len())
                .map(|k| (config.seed, ((epoch as u64) << 40) | ((bi as u64) << 20) | k as u64))
                .collect();
            let (loss, grads) = batch_loss_and_grad(&samples, &params, config, Some(&seeds))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut params.params, &grads);
        }
        let train_loss = match config.loss {
            LossKind::Mse => loss_sum / train_s.len() as f64 * scale * scale,
            LossKind::Nll => loss_sum / train_s.len() as f64 + scale.ln(),
        };
        let val_mae = evaluate_mae(&val_s, &params)? * scale;
        if !val_mae.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_mae });
        }
        log::info!("regressor epoch {epoch}: train loss {train_loss:.4} val MAE {val_mae:.4}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
        });
        stopped = epoch;
        if val_mae < best.0 {
            best = (val_mae, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    let (best_val_mae, best_epoch, mut best_params) = best;
    unstandardize(&mut best_params, mean_age, scale)?;
    best_params.params.round_to_f32();
    Ok((
        best_params,
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_mae,
            stopped_epoch: stopped,
            optimizer_steps: opt.steps(),
        },
    ))
}

/// One subject's brain-age estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub age: f64,
    pub sex: u8,
    pub predicted_age: f64,
    pub bag: f64,
    pub sigma2: Option<f64>,
}

impl Prediction {
    pub fn new(subject_id: impl Into<String>, age: f64, sex: u8, out: RegressorOutput) -> Self {
        Prediction {
            subject_id: subject_id.into(),
            age,
            sex,
            predicted_age: out.mean,
            bag: out.mean - age,
            sigma2: out.sigma2(),
        }
    }
}

pub fn predict_features(features: &EmbeddingMatrix, params: &RegressorParams) -> Result<Prediction> {
    let out = regressor_forward(features.z.view(), features.sex, params)?;
    Ok(Prediction::new(features.subject_id.clone(), features.age, features.sex, out))
}

pub fn predict_volume(
    volume: &crate::volume::Volume,
    vit: &crate::vit::ViTParams,
    params: &RegressorParams,
) -> Result<Prediction> {
    let features = crate::vit::build_feature_map(volume, vit)?;
    predict_features(&features, params)
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let with_sigma = preds.iter().any(|p| p.sigma2.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id", "age", "sex", "predicted_age", "bag"];
    if with_sigma {
        header.push("sigma2");
    }
    w.write_record(&header)?;
    for p in preds {
        let mut rec = vec![
            p.subject_id.clone(),
            p.age.to_string(),
            p.sex.to_string(),
            p.predicted_age.to_string(),
            p.bag.to_string(),
        ];
        if with_sigma {
            rec.push(p.sigma2.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}` in predictions"))) };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(Error::Format("prediction row has fewer than 5 columns".into()));
        }
        let sigma2 = match rec.get(5) {
            Some(s) if !s.is_empty() => Some(num(s)?),
            _ => None,
        };
        out.push(Prediction {
            subject_id: rec[0].to_string(),
            age: num(&rec[1])?,
            sex: num(&rec[2])? as u8,
            predicted_age: num(&rec[3])?,
            bag: num(&rec[4])?,
            sigma2,
        });
    }
    Ok(out)
}
