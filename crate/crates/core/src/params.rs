//! Explicit layer parameters: linear layers, MLPs, 3x3 convolution kernels
//! and the processing-module variants built from them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kernels::{dot, relu_in_place};

fn check_finite(what: &str, v: &[f32]) -> Result<()> {
    ensure!(v.iter().all(|x| x.is_finite()), "{what}: parameters must be finite");
    Ok(())
}

/// Fully connected layer `y = W x + b` with `W` stored `[out][in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        ensure!(in_dim > 0 && out_dim > 0, "linear layer dims must be positive, got {in_dim}->{out_dim}");
        ensure!(
            weight.len() == in_dim * out_dim,
            "linear weight has {} values, expected {out_dim}x{in_dim}",
            weight.len()
        );
        ensure!(bias.len() == out_dim, "linear bias has {} values, expected {out_dim}", bias.len());
        check_finite("linear weight", &weight)?;
        check_finite("linear bias", &bias)?;
        Ok(Self { in_dim, out_dim, weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Square identity map (zero bias).
    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f32] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn forward_into(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *y = (f64::from(self.bias[o]) + dot(row, x)) as f32;
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }
}

/// One- or two-layer perceptron with ReLU between consecutive layers and a
/// linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        ensure!(
            (1..=2).contains(&layers.len()),
            "an MLP has one or two layers, got {}",
            layers.len()
        );
        for pair in layers.windows(2) {
            ensure!(
                pair[0].out_dim == pair[1].in_dim,
                "MLP layers do not chain: {} -> {}",
                pair[0].out_dim,
                pair[1].in_dim
            );
        }
        Ok(Self { layers })
    }

    pub fn single(layer: Linear) -> Self {
        Self { layers: vec![layer] }
    }

    pub fn two_layer(first: Linear, second: Linear) -> Result<Self> {
        Self::new(vec![first, second])
    }

    /// Two-layer MLP with every weight and bias zero.
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { layers: vec![Linear::zeros(in_dim, hidden), Linear::zeros(hidden, out_dim)] }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            relu_in_place(&mut h);
            h = layer.forward(&h);
        }
        h
    }
}

/// 3x3 convolution kernel `[F_out, F_in, 3, 3]` with bias and dilation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    f_in: usize,
    f_out: usize,
    dilation: usize,
    // Packed `[out][tap][in]` to match the gathered patch layout.
    packed: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvKernel {
    /// Builds a kernel from weights in `[F_out, F_in, 3, 3]` row-major order.
    pub fn new(f_in: usize, f_out: usize, dilation: usize, weight: &[f32], bias: Vec<f32>) -> Result<Self> {
        ensure!(f_in > 0 && f_out > 0, "conv kernel dims must be positive");
        ensure!(dilation >= 1, "conv dilation must be >= 1, got {dilation}");
        ensure!(
            weight.len() == f_out * f_in * 9,
            "conv weight has {} values, expected {f_out}x{f_in}x3x3",
            weight.len()
        );
        ensure!(bias.len() == f_out, "conv bias has {} values, expected {f_out}", bias.len());
        check_finite("conv weight", weight)?;
        check_finite("conv bias", &bias)?;
        let mut packed = vec![0.0; weight.len()];
        for o in 0..f_out {
            for c in 0..f_in {
                for t in 0..9 {
                    packed[(o * 9 + t) * f_in + c] = weight[(o * f_in + c) * 9 + t];
                }
            }
        }
        Ok(Self { f_in, f_out, dilation, packed, bias })
    }

    pub fn zeros(f_in: usize, f_out: usize, dilation: usize) -> Self {
        Self { f_in, f_out, dilation, packed: vec![0.0; f_in * f_out * 9], bias: vec![0.0; f_out] }
    }

    /// Center tap is the identity, all other taps zero.
    pub fn identity(channels: usize, dilation: usize) -> Self {
        let mut k = Self::zeros(channels, channels, dilation);
        for c in 0..channels {
            k.set_weight(c, c, 1, 1, 1.0);
        }
        k
    }

    pub fn f_in(&self) -> usize {
        self.f_in
    }

    pub fn f_out(&self) -> usize {
        self.f_out
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn weight_at(&self, o: usize, c: usize, ky: usize, kx: usize) -> f32 {
        self.packed[(o * 9 + ky * 3 + kx) * self.f_in + c]
    }

    pub fn set_weight(&mut self, o: usize, c: usize, ky: usize, kx: usize, v: f32) {
        self.packed[(o * 9 + ky * 3 + kx) * self.f_in + c] = v;
    }

    /// Weights in `[F_out, F_in, 3, 3]` row-major order.
    pub fn weight(&self) -> Vec<f32> {
        let mut w = vec![0.0; self.packed.len()];
        for o in 0..self.f_out {
            for c in 0..self.f_in {
                for t in 0..9 {
                    w[(o * self.f_in + c) * 9 + t] = self.packed[(o * 9 + t) * self.f_in + c];
                }
            }
        }
        w
    }

    /// Contracts a gathered `[tap][channel]` patch into `out` (bias included).
    pub(crate) fn contract(&self, patch: &[f32], out: &mut [f32]) {
        let k = 9 * self.f_in;
        for (o, y) in out.iter_mut().enumerate() {
            *y = (f64::from(self.bias[o]) + dot(&self.packed[o * k..(o + 1) * k], patch)) as f32;
        }
    }
}

/// Three parallel 3x3 convolutions at dilations 1, 3 and 5, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SfmParams {
    convs: [ConvKernel; 3],
}

pub const SFM_DILATIONS: [usize; 3] = [1, 3, 5];

impl SfmParams {
    pub fn new(convs: [ConvKernel; 3]) -> Result<Self> {
        for (k, d) in convs.iter().zip(SFM_DILATIONS) {
            ensure!(k.dilation == d, "SFM kernels need dilations (1, 3, 5), found {}", k.dilation);
            ensure!(
                k.f_in == convs[0].f_in && k.f_out == convs[0].f_out,
                "SFM kernels must share F_in/F_out"
            );
        }
        Ok(Self { convs })
    }

    pub fn zeros(f_in: usize, f_out: usize) -> Self {
        Self { convs: SFM_DILATIONS.map(|d| ConvKernel::zeros(f_in, f_out, d)) }
    }

    pub fn convs(&self) -> &[ConvKernel; 3] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvKernel; 3] {
        &mut self.convs
    }

    pub fn f_in(&self) -> usize {
        self.convs[0].f_in
    }

    pub fn f_out(&self) -> usize {
        self.convs[0].f_out
    }
}

/// Number of values the offset predictor emits: a (row, col) pair per tap.
pub const DEFORM_OFFSETS: usize = 18;

/// Deformable 3x3 convolution: a dilation-1 base kernel plus a linear
/// predictor of 9 sampling offsets from the cell's own feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformConvParams {
    base: ConvKernel,
    offset: Linear,
}

impl DeformConvParams {
    pub fn new(base: ConvKernel, offset: Linear) -> Result<Self> {
        ensure!(base.dilation == 1, "deformable base kernel must have dilation 1");
        ensure!(
            offset.in_dim == base.f_in && offset.out_dim == DEFORM_OFFSETS,
            "offset predictor must map F_in={} -> {DEFORM_OFFSETS}, got {}->{}",
            base.f_in,
            offset.in_dim,
            offset.out_dim
        );
        Ok(Self { base, offset })
    }

    pub fn base(&self) -> &ConvKernel {
        &self.base
    }

    pub fn offset_predictor(&self) -> &Linear {
        &self.offset
    }

    pub fn f_in(&self) -> usize {
        self.base.f_in
    }

    pub fn f_out(&self) -> usize {
        self.base.f_out
    }
}

/// Which processing module runs after feature halving in a refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessingKind {
    Mlp,
    Conv,
    Deform,
    Sfm,
}

impl ProcessingKind {
    pub fn name(self) -> &'static str {
        match self {
            ProcessingKind::Mlp => "mlp",
            ProcessingKind::Conv => "conv",
            ProcessingKind::Deform => "deform",
            ProcessingKind::Sfm => "sfm",
        }
    }
}

impl std::str::FromStr for ProcessingKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "conv" => Ok(Self::Conv),
            "deform" => Ok(Self::Deform),
            "sfm" => Ok(Self::Sfm),
            other => Err(crate::Error::invalid(format!(
                "unknown processing module '{other}' (expected mlp|conv|deform|sfm)"
            ))),
        }
    }
}

/// Processing-module parameters. Conv and DeformConv outputs pass through a
/// ReLU, as does the SFM sum; the MLP variant ends linear.
#[derive(Debug, Clone, PartialEq)]
pub enum ProcessingModule {
    Mlp(Mlp),
    Conv(ConvKernel),
    Deform(DeformConvParams),
    Sfm(SfmParams),
}

impl ProcessingModule {
    pub fn kind(&self) -> ProcessingKind {
        match self {
            ProcessingModule::Mlp(_) => ProcessingKind::Mlp,
            ProcessingModule::Conv(_) => ProcessingKind::Conv,
            ProcessingModule::Deform(_) => ProcessingKind::Deform,
            ProcessingModule::Sfm(_) => ProcessingKind::Sfm,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            ProcessingModule::Mlp(m) => (m.in_dim(), m.out_dim()),
            ProcessingModule::Conv(k) => (k.f_in, k.f_out),
            ProcessingModule::Deform(p) => (p.f_in(), p.f_out()),
            ProcessingModule::Sfm(p) => (p.f_in(), p.f_out()),
        }
    }
}
