use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, BatchNormCache};
use super::tensor::{Real, Tensor};
use crate::dataio::View;
use crate::error::{Error, Result};

/// Architecture hyperparameters of the dual encoder-decoder network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Resolution levels per U-Net, including the bottleneck.
    pub levels: usize,
    /// Feature maps per level (finest first), identical for both branches.
    pub filters: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
    /// Number of finest decoder levels carrying a 1×1 output head.
    pub deep_supervision: usize,
    /// Feed both decoders the concatenation of both bottlenecks.
    pub fusion: bool,
    /// Use one set of weights for both views.
    pub shared_branches: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            filters: vec![32, 64, 128, 256, 512],
            in_channels: 1,
            classes: 3,
            deep_supervision: 3,
            fusion: true,
            shared_branches: false,
            bn_momentum: 0.9,
            bn_eps: 1e-3,
        }
    }
}

impl NetworkConfig {
    /// Default topology with the given per-level widths (deep supervision
    /// limited to the available decoder levels).
    pub fn with_filters(filters: &[usize]) -> Self {
        let d = Self::default();
        Self {
            levels: filters.len(),
            filters: filters.to_vec(),
            deep_supervision: d.deep_supervision.min(filters.len().saturating_sub(1)).max(1),
            ..d
        }
    }

    /// The two-independent-U-Nets baseline at the same widths.
    pub fn non_holistic(&self) -> Self {
        Self {
            fusion: false,
            shared_branches: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::validation(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.filters.len() != self.levels {
            return Err(Error::validation(format!(
                "expected {} filter widths, got {}",
                self.levels,
                self.filters.len()
            )));
        }
        if self.filters.iter().any(|&f| f == 0) || self.in_channels == 0 {
            return Err(Error::validation("channel counts must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::validation("at least two classes are required"));
        }
        if self.deep_supervision == 0 || self.deep_supervision > self.levels - 1 {
            return Err(Error::validation(format!(
                "deep supervision levels must lie in 1..={}, got {}",
                self.levels - 1,
                self.deep_supervision
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::validation("invalid normalization settings"));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Input channels of the first decoder stage (the up-sampling layer
    /// directly above the bottleneck).
    pub fn bottleneck_decoder_channels(&self) -> usize {
        let top = self.filters[self.levels - 1];
        if self.fusion {
            2 * top
        } else {
            top
        }
    }

    fn branch_count(&self) -> usize {
        if self.shared_branches {
            1
        } else {
            2
        }
    }
}

/// Exact learnable-parameter count (weights, biases and normalization
/// scale/shift) of the network described by `config`.
pub fn count_parameters(config: &NetworkConfig) -> Result<usize> {
    config.validate()?;
    let f = &config.filters;
    let l = config.levels;
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout;
    let mut per_branch = 0;
    for lvl in 0..l {
        let cin = if lvl == 0 { config.in_channels } else { f[lvl - 1] };
        per_branch += block(cin, f[lvl]);
    }
    for lvl in 0..l - 1 {
        let cin = if lvl == l - 2 {
            config.bottleneck_decoder_channels()
        } else {
            f[lvl + 1]
        };
        per_branch += conv(cin, f[lvl], 2);
        per_branch += block(2 * f[lvl], f[lvl]);
    }
    for lvl in 0..config.deep_supervision {
        per_branch += conv(f[lvl], config.classes, 1);
    }
    Ok(per_branch * config.branch_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pathway {
    Encoder,
    Decoder,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv1,
    Norm1,
    Conv2,
    Norm2,
    UpConv,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

/// Address of one learnable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamKey {
    pub branch: View,
    pub pathway: Pathway,
    pub level: usize,
    pub layer: Layer,
    pub kind: ParamKind,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:?}.{}.{:?}.{:?}",
            self.branch.as_str(),
            self.pathway,
            self.level,
            self.layer,
            self.kind
        )
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub key: ParamKey,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    fn zeros(key: ParamKey, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            key,
            shape,
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub transposed: bool,
}

impl<T: Real> Conv<T> {
    fn new(key: (View, Pathway, usize, Layer), cin: usize, cout: usize, kernel: usize, transposed: bool) -> Self {
        let (branch, pathway, level, layer) = key;
        let mk = |kind| ParamKey {
            branch,
            pathway,
            level,
            layer,
            kind,
        };
        let wshape = if transposed {
            vec![cin, cout, kernel, kernel]
        } else {
            vec![cout, cin, kernel, kernel]
        };
        Self {
            weight: Param::zeros(mk(ParamKind::Weight), wshape),
            bias: Param::zeros(mk(ParamKind::Bias), vec![cout]),
            cin,
            cout,
            kernel,
            transposed,
        }
    }

    /// Inputs feeding each output element.
    pub fn fan_in(&self) -> usize {
        if self.transposed {
            // stride equals kernel: every output pixel sees exactly one tap per input channel
            self.cin
        } else {
            self.cin * self.kernel * self.kernel
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        if self.transposed {
            ops::conv_transpose2x2(x, &self.weight.value, &self.bias.value, self.cout)
        } else {
            ops::conv2d(x, &self.weight.value, &self.bias.value, self.cout, self.kernel)
        }
    }

    fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        if self.transposed {
            Some(ops::conv_transpose2x2_backward(
                x,
                &self.weight.value,
                self.cout,
                dy,
                &mut self.weight.grad,
                &mut self.bias.grad,
            ))
        } else {
            ops::conv2d_backward(
                x,
                &self.weight.value,
                self.cout,
                self.kernel,
                dy,
                &mut self.weight.grad,
                &mut self.bias.grad,
                need_dx,
            )
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> Norm<T> {
    fn new(key: (View, Pathway, usize, Layer), channels: usize) -> Self {
        let (branch, pathway, level, layer) = key;
        let mk = |kind| ParamKey {
            branch,
            pathway,
            level,
            layer,
            kind,
        };
        let mut scale = Param::zeros(mk(ParamKind::Scale), vec![channels]);
        scale.value.fill(T::one());
        Self {
            scale,
            shift: Param::zeros(mk(ParamKind::Shift), vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    fn reset(&mut self) {
        self.scale.value.fill(T::one());
        self.shift.value.fill(T::zero());
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
    }
}

/// Two (conv 3×3 → norm → ReLU) stages.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub conv1: Conv<T>,
    pub norm1: Norm<T>,
    pub conv2: Conv<T>,
    pub norm2: Norm<T>,
}

impl<T: Real> Block<T> {
    fn new(branch: View, pathway: Pathway, level: usize, cin: usize, cout: usize) -> Self {
        Self {
            conv1: Conv::new((branch, pathway, level, Layer::Conv1), cin, cout, 3, false),
            norm1: Norm::new((branch, pathway, level, Layer::Norm1), cout),
            conv2: Conv::new((branch, pathway, level, Layer::Conv2), cout, cout, 3, false),
            norm2: Norm::new((branch, pathway, level, Layer::Norm2), cout),
        }
    }

    fn forward_eval(&self, x: &Tensor<T>, eps: T) -> Tensor<T> {
        let n1 = &self.norm1;
        let mut a = ops::batch_norm_eval(
            &self.conv1.forward(x),
            &n1.scale.value,
            &n1.shift.value,
            &n1.running_mean,
            &n1.running_var,
            eps,
        );
        ops::relu_inplace(&mut a);
        let n2 = &self.norm2;
        let mut b = ops::batch_norm_eval(
            &self.conv2.forward(&a),
            &n2.scale.value,
            &n2.shift.value,
            &n2.running_mean,
            &n2.running_var,
            eps,
        );
        ops::relu_inplace(&mut b);
        b
    }

    fn forward_train(&self, x: Tensor<T>, eps: T) -> BlockCache<T> {
        let (mut act1, norm1) = ops::batch_norm_train(&self.conv1.forward(&x), &self.norm1.scale.value, &self.norm1.shift.value, eps);
        ops::relu_inplace(&mut act1);
        let (mut act2, norm2) = ops::batch_norm_train(&self.conv2.forward(&act1), &self.norm2.scale.value, &self.norm2.shift.value, eps);
        ops::relu_inplace(&mut act2);
        BlockCache {
            input: x,
            norm1,
            act1,
            norm2,
            output: act2,
        }
    }

    fn backward(&mut self, cache: &BlockCache<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        ops::relu_backward_inplace(&cache.output, &mut dy);
        let d = ops::batch_norm_backward(&cache.norm2, &self.norm2.scale.value, &dy, &mut self.norm2.scale.grad, &mut self.norm2.shift.grad);
        let mut d = self.conv2.backward(&cache.act1, &d, true).expect("dx requested");
        ops::relu_backward_inplace(&cache.act1, &mut d);
        let d = ops::batch_norm_backward(&cache.norm1, &self.norm1.scale.value, &d, &mut self.norm1.scale.grad, &mut self.norm1.shift.grad);
        self.conv1.backward(&cache.input, &d, need_dx)
    }

    fn norms_mut(&mut self) -> [&mut Norm<T>; 2] {
        [&mut self.norm1, &mut self.norm2]
    }
}

/// One U-Net (encoder, decoder and output heads) of a single view.
#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub encoder: Vec<Block<T>>,
    /// `up[l]` produces level-`l` features from level `l+1`.
    pub up: Vec<Conv<T>>,
    pub decoder: Vec<Block<T>>,
    /// `heads[l]` reads decoder level `l` (finest first).
    pub heads: Vec<Conv<T>>,
}

impl<T: Real> Branch<T> {
    fn new(view: View, cfg: &NetworkConfig) -> Self {
        let f = &cfg.filters;
        let l = cfg.levels;
        let encoder = (0..l)
            .map(|lvl| {
                let cin = if lvl == 0 { cfg.in_channels } else { f[lvl - 1] };
                Block::new(view, Pathway::Encoder, lvl, cin, f[lvl])
            })
            .collect();
        let up = (0..l - 1)
            .map(|lvl| {
                let cin = if lvl == l - 2 {
                    cfg.bottleneck_decoder_channels()
                } else {
                    f[lvl + 1]
                };
                Conv::new((view, Pathway::Decoder, lvl, Layer::UpConv), cin, f[lvl], 2, true)
            })
            .collect();
        let decoder = (0..l - 1)
            .map(|lvl| Block::new(view, Pathway::Decoder, lvl, 2 * f[lvl], f[lvl]))
            .collect();
        let heads = (0..cfg.deep_supervision)
            .map(|lvl| Conv::new((view, Pathway::Head, lvl, Layer::Head), f[lvl], cfg.classes, 1, false))
            .collect();
        Self {
            encoder,
            up,
            decoder,
            heads,
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        fn push_block<'a, T>(out: &mut Vec<&'a Param<T>>, b: &'a Block<T>) {
            out.extend([&b.conv1.weight, &b.conv1.bias, &b.norm1.scale, &b.norm1.shift]);
            out.extend([&b.conv2.weight, &b.conv2.bias, &b.norm2.scale, &b.norm2.shift]);
        }
        let mut out = Vec::new();
        for b in &self.encoder {
            push_block(&mut out, b);
        }
        for (u, b) in self.up.iter().zip(&self.decoder).rev() {
            out.extend([&u.weight, &u.bias]);
            push_block(&mut out, b);
        }
        for h in &self.heads {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        fn push_block<'a, T>(out: &mut Vec<&'a mut Param<T>>, b: &'a mut Block<T>) {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.norm1.scale);
            out.push(&mut b.norm1.shift);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            out.push(&mut b.norm2.scale);
            out.push(&mut b.norm2.shift);
        }
        for b in &mut self.encoder {
            push_block(&mut out, b);
        }
        for (u, b) in self.up.iter_mut().zip(self.decoder.iter_mut()).rev() {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
            push_block(&mut out, b);
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Normalization layers in the same order as [`Branch::params`].
    fn norms_mut(&mut self) -> Vec<&mut Norm<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.norms_mut());
        }
        for b in self.decoder.iter_mut().rev() {
            out.extend(b.norms_mut());
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
        }
        for (u, b) in self.up.iter_mut().zip(self.decoder.iter_mut()).rev() {
            out.push(u);
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
        }
        out.extend(self.heads.iter_mut());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; the forward pass is a pure function of the inputs.
    Eval,
}

/// Logits of one branch: one map per deep-supervision head, all at input
/// resolution, ordered coarse to fine. The finest is the main output.
#[derive(Debug, Clone)]
pub struct BranchOutputs<T> {
    pub heads: Vec<Tensor<T>>,
}

impl<T> BranchOutputs<T> {
    pub fn main(&self) -> &Tensor<T> {
        self.heads.last().expect("at least one head")
    }

    pub fn aux(&self) -> &[Tensor<T>] {
        &self.heads[..self.heads.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct NetworkOutputs<T> {
    pub sa: BranchOutputs<T>,
    pub la: BranchOutputs<T>,
}

impl<T> NetworkOutputs<T> {
    pub fn view(&self, view: View) -> &BranchOutputs<T> {
        match view {
            View::Sa => &self.sa,
            View::La => &self.la,
        }
    }
}

/// Loss gradients with respect to every head's logits, laid out like
/// [`NetworkOutputs`].
pub type OutputGrads<T> = NetworkOutputs<T>;

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    norm1: BatchNormCache<T>,
    act1: Tensor<T>,
    norm2: BatchNormCache<T>,
    output: Tensor<T>,
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    encoder: Vec<BlockCache<T>>,
    pool_args: Vec<Vec<u8>>,
    up_inputs: Vec<Tensor<T>>,
    decoder: Vec<BlockCache<T>>,
}

/// Activations saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    views: [BranchCache<T>; 2],
    height: usize,
    width: usize,
}

/// All learnable weights and normalization statistics of the network.
#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    config: NetworkConfig,
    branches: Vec<Branch<T>>,
}

fn view_index(v: View) -> usize {
    match v {
        View::Sa => 0,
        View::La => 1,
    }
}

impl<T: Real> ParameterSet<T> {
    /// Allocates every layer with zero weights (unit normalization scale).
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let branches = if config.shared_branches {
            vec![Branch::new(View::Sa, config)]
        } else {
            vec![Branch::new(View::Sa, config), Branch::new(View::La, config)]
        };
        Ok(Self {
            config: config.clone(),
            branches,
        })
    }

    /// Builds and He-normal initializes in one step.
    pub fn new_initialized(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut p = Self::build(config)?;
        p.init_he_normal(seed);
        Ok(p)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Convolution weights ~ N(0, 2/fan_in); biases and shifts 0; scales 1.
    pub fn init_he_normal(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for branch in &mut self.branches {
            for conv in branch.convs_mut() {
                let std = (2.0 / conv.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for w in &mut conv.weight.value {
                    *w = T::lit(normal.sample(&mut rng));
                }
                conv.bias.value.fill(T::zero());
            }
            for norm in branch.norms_mut() {
                norm.reset();
            }
        }
    }

    fn branch(&self, v: View) -> &Branch<T> {
        if self.config.shared_branches {
            &self.branches[0]
        } else {
            &self.branches[view_index(v)]
        }
    }

    fn branch_mut(&mut self, v: View) -> &mut Branch<T> {
        if self.config.shared_branches {
            &mut self.branches[0]
        } else {
            &mut self.branches[view_index(v)]
        }
    }

    /// Learnable tensors in canonical order (branch, encoder, decoder, heads).
    pub fn params(&self) -> Vec<&Param<T>> {
        self.branches.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.branches.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    /// Normalization layers in canonical order.
    pub fn norms_mut(&mut self) -> Vec<&mut Norm<T>> {
        self.branches.iter_mut().flat_map(|b| b.norms_mut()).collect()
    }

    pub fn norms(&self) -> Vec<&Norm<T>> {
        let mut out = Vec::new();
        for b in &self.branches {
            for blk in &b.encoder {
                out.push(&blk.norm1);
                out.push(&blk.norm2);
            }
            for blk in b.decoder.iter().rev() {
                out.push(&blk.norm1);
                out.push(&blk.norm2);
            }
        }
        out
    }

    /// Learnable parameters of the given pathway of one branch.
    pub fn params_of(&self, branch: View, pathway: Pathway) -> Vec<&Param<T>> {
        self.branch(branch)
            .params()
            .into_iter()
            .filter(|p| p.key.pathway == pathway)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.iter().all(|v| v.is_finite()))
            && self
                .norms()
                .iter()
                .all(|n| n.running_mean.iter().chain(&n.running_var).all(|v| v.is_finite()))
    }

    /// Converts every stored value to another scalar type.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::<U>::build(&self.config).expect("validated config");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.value.iter_mut().zip(&src.value) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
        }
        let srcs = self.norms();
        for (dst, src) in out.norms_mut().into_iter().zip(srcs) {
            for (d, s) in dst.running_mean.iter_mut().zip(&src.running_mean) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
            for (d, s) in dst.running_var.iter_mut().zip(&src.running_var) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
        }
        out
    }

    fn check_inputs(&self, sa: &Tensor<T>, la: &Tensor<T>) -> Result<()> {
        let cfg = &self.config;
        let [b, c, h, w] = sa.shape();
        if la.shape() != sa.shape() {
            return Err(Error::validation(format!(
                "SA batch {:?} and LA batch {:?} differ in shape",
                sa.shape(),
                la.shape()
            )));
        }
        if b == 0 || c != cfg.in_channels {
            return Err(Error::validation(format!(
                "expected B×{}×H×W input with B ≥ 1, got {:?}",
                cfg.in_channels,
                sa.shape()
            )));
        }
        let m = cfg.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::validation(format!(
                "spatial size {h}×{w} must be a positive multiple of {m}"
            )));
        }
        if !sa.all_finite() || !la.all_finite() {
            return Err(Error::Numerical("non-finite network input".into()));
        }
        Ok(())
    }

    /// Runs both branches. In [`Mode::Eval`] normalization uses running
    /// statistics; in [`Mode::Train`] batch statistics (running statistics
    /// are left untouched, see [`ParameterSet::update_running_stats`]).
    pub fn forward(&self, sa: &Tensor<T>, la: &Tensor<T>, mode: Mode) -> Result<NetworkOutputs<T>> {
        match mode {
            Mode::Train => self.forward_train(sa, la).map(|(o, _)| o),
            Mode::Eval => {
                self.check_inputs(sa, la)?;
                Ok(self.forward_eval(sa, la))
            }
        }
    }

    fn forward_eval(&self, sa: &Tensor<T>, la: &Tensor<T>) -> NetworkOutputs<T> {
        let eps = T::lit(self.config.bn_eps);
        let l = self.config.levels;
        let (h, w) = (sa.height(), sa.width());
        let encode = |view: View, x: &Tensor<T>| {
            let br = self.branch(view);
            let mut feats: Vec<Tensor<T>> = Vec::with_capacity(l);
            for lvl in 0..l {
                let f = if lvl == 0 {
                    br.encoder[0].forward_eval(x, eps)
                } else {
                    let (pooled, _) = ops::max_pool2(&feats[lvl - 1]);
                    br.encoder[lvl].forward_eval(&pooled, eps)
                };
                feats.push(f);
            }
            feats
        };
        let enc = [encode(View::Sa, sa), encode(View::La, la)];
        let fused = self
            .config
            .fusion
            .then(|| Tensor::concat_channels(&[&enc[0][l - 1], &enc[1][l - 1]]));
        let decode = |view: View| {
            let vi = view_index(view);
            let br = self.branch(view);
            let mut d = fused.clone().unwrap_or_else(|| enc[vi][l - 1].clone());
            let mut heads = Vec::new();
            for lvl in (0..l - 1).rev() {
                let u = br.up[lvl].forward(&d);
                let x = Tensor::concat_channels(&[&u, &enc[vi][lvl]]);
                d = br.decoder[lvl].forward_eval(&x, eps);
                if lvl < self.config.deep_supervision {
                    let logits = br.heads[lvl].forward(&d);
                    heads.push(ops::resize_bilinear(&logits, h, w));
                }
            }
            BranchOutputs { heads }
        };
        NetworkOutputs {
            sa: decode(View::Sa),
            la: decode(View::La),
        }
    }

    /// Training-mode forward pass that keeps the activations needed by
    /// [`ParameterSet::backward`].
    pub fn forward_train(&self, sa: &Tensor<T>, la: &Tensor<T>) -> Result<(NetworkOutputs<T>, ForwardCache<T>)> {
        self.check_inputs(sa, la)?;
        let eps = T::lit(self.config.bn_eps);
        let l = self.config.levels;
        let (h, w) = (sa.height(), sa.width());
        let encode = |view: View, x: &Tensor<T>| {
            let br = self.branch(view);
            let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(l);
            let mut pool_args = Vec::with_capacity(l - 1);
            for lvl in 0..l {
                let input = if lvl == 0 {
                    x.clone()
                } else {
                    let (pooled, arg) = ops::max_pool2(&blocks[lvl - 1].output);
                    pool_args.push(arg);
                    pooled
                };
                blocks.push(br.encoder[lvl].forward_train(input, eps));
            }
            (blocks, pool_args)
        };
        let (sa_enc, sa_pool) = encode(View::Sa, sa);
        let (la_enc, la_pool) = encode(View::La, la);
        let fused = self
            .config
            .fusion
            .then(|| Tensor::concat_channels(&[&sa_enc[l - 1].output, &la_enc[l - 1].output]));
        let decode = |view: View, enc: &[BlockCache<T>]| {
            let br = self.branch(view);
            let mut d = fused.clone().unwrap_or_else(|| enc[l - 1].output.clone());
            let mut heads = Vec::new();
            let mut up_inputs = vec![None; l - 1];
            let mut decoder = vec![None; l - 1];
            for lvl in (0..l - 1).rev() {
                let u = br.up[lvl].forward(&d);
                up_inputs[lvl] = Some(d);
                let x = Tensor::concat_channels(&[&u, &enc[lvl].output]);
                let cache = br.decoder[lvl].forward_train(x, eps);
                if lvl < self.config.deep_supervision {
                    let logits = br.heads[lvl].forward(&cache.output);
                    heads.push(ops::resize_bilinear(&logits, h, w));
                }
                d = cache.output.clone();
                decoder[lvl] = Some(cache);
            }
            (
                BranchOutputs { heads },
                up_inputs.into_iter().map(Option::unwrap).collect::<Vec<_>>(),
                decoder.into_iter().map(Option::unwrap).collect::<Vec<_>>(),
            )
        };
        let (sa_out, sa_up, sa_dec) = decode(View::Sa, &sa_enc);
        let (la_out, la_up, la_dec) = decode(View::La, &la_enc);
        let cache = ForwardCache {
            views: [
                BranchCache {
                    encoder: sa_enc,
                    pool_args: sa_pool,
                    up_inputs: sa_up,
                    decoder: sa_dec,
                },
                BranchCache {
                    encoder: la_enc,
                    pool_args: la_pool,
                    up_inputs: la_up,
                    decoder: la_dec,
                },
            ],
            height: h,
            width: w,
        };
        Ok((
            NetworkOutputs {
                sa: sa_out,
                la: la_out,
            },
            cache,
        ))
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics: `running ← m·running + (1−m)·batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let m = T::lit(self.config.bn_momentum);
        let one_m = T::one() - m;
        for view in [View::Sa, View::La] {
            let bc = &cache.views[view_index(view)];
            let stats: Vec<&BatchNormCache<T>> = bc
                .encoder
                .iter()
                .chain(bc.decoder.iter().rev())
                .flat_map(|b| [&b.norm1, &b.norm2])
                .collect();
            let norms = self.branch_mut(view).norms_mut();
            for (norm, st) in norms.into_iter().zip(stats) {
                for (r, &b) in norm.running_mean.iter_mut().zip(&st.batch_mean) {
                    *r = m * *r + one_m * b;
                }
                for (r, &b) in norm.running_var.iter_mut().zip(&st.batch_var) {
                    *r = m * *r + one_m * b;
                }
            }
        }
    }

    /// Back-propagates logit gradients through the cached pass, accumulating
    /// into every parameter's `grad`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grads: &OutputGrads<T>) -> Result<()> {
        let l = self.config.levels;
        let ds = self.config.deep_supervision;
        let top = self.config.filters[l - 1];
        let fusion = self.config.fusion;
        // gradient arriving at each view's encoder outputs
        let mut d_enc: [Vec<Option<Tensor<T>>>; 2] = [vec![None; l], vec![None; l]];

        for view in [View::Sa, View::La] {
            let vi = view_index(view);
            let bc = &cache.views[vi];
            let g = grads.view(view);
            if g.heads.len() != ds {
                return Err(Error::validation("gradient head count does not match the network"));
            }
            let br = self.branch_mut(view);
            let mut d_dec: Vec<Option<Tensor<T>>> = vec![None; l - 1];
            for lvl in 0..ds {
                // heads are stored coarse→fine; level lvl sits at index ds-1-lvl
                let dg = &g.heads[ds - 1 - lvl];
                if dg.shape()[2..] != [cache.height, cache.width] {
                    return Err(Error::validation("gradient map has the wrong spatial size"));
                }
                let dec_out = &bc.decoder[lvl].output;
                let dlogits = ops::resize_bilinear_backward(dg, dec_out.height(), dec_out.width());
                let dx = br.heads[lvl].backward(dec_out, &dlogits, true).unwrap();
                accumulate(&mut d_dec[lvl], dx);
            }
            let mut d_bottleneck = None;
            for lvl in 0..l - 1 {
                let Some(dy) = d_dec[lvl].take() else { continue };
                let dx = br.decoder[lvl].backward(&bc.decoder[lvl], dy, true).unwrap();
                let f = br.up[lvl].cout;
                let (d_up, d_skip) = dx.split_channels(f);
                accumulate(&mut d_enc[vi][lvl], d_skip);
                let d_in = br.up[lvl].backward(&bc.up_inputs[lvl], &d_up, true).unwrap();
                if lvl == l - 2 {
                    d_bottleneck = Some(d_in);
                } else {
                    accumulate(&mut d_dec[lvl + 1], d_in);
                }
            }
            if let Some(db) = d_bottleneck {
                if fusion {
                    let (d_sa, d_la) = db.split_channels(top);
                    accumulate(&mut d_enc[0][l - 1], d_sa);
                    accumulate(&mut d_enc[1][l - 1], d_la);
                } else {
                    accumulate(&mut d_enc[vi][l - 1], db);
                }
            }
        }

        for view in [View::Sa, View::La] {
            let vi = view_index(view);
            let bc = &cache.views[vi];
            let mut d = std::mem::take(&mut d_enc[vi]);
            let br = self.branch_mut(view);
            for lvl in (0..l).rev() {
                let Some(dy) = d[lvl].take() else { continue };
                let dx = br.encoder[lvl].backward(&bc.encoder[lvl], dy, lvl > 0);
                if lvl > 0 {
                    let inp = &bc.encoder[lvl - 1].output;
                    let dprev = ops::max_pool2_backward(&dx.unwrap(), &bc.pool_args[lvl - 1], inp.height(), inp.width());
                    accumulate(&mut d[lvl - 1], dprev);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
