//! SLCA-UNet building blocks.
//!
//! Every block has a recorded form (`apply`, taking a [`Tape`]) used for
//! training, and a tensor-in, tensor-out free function of the same name as
//! the operation it implements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};
use crate::tensorcore::{
    conv_out_extent, Activation, ConvParams, ConvSpec, DenseParams, Param, ParamInit, Parameterized,
    ResampleMode, Tape, Var,
};

/// How the first convolution `c1` of a residual dense block is used.
///
/// The block computes `c1`, `c2`, `c3` from the same input and emits
/// `c2 + c3`. With `Off`, `c1` is omitted and has no parameters; `Add`
/// includes it as a third summand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualC1 {
    #[default]
    Off,
    Add,
}

/// Residual dense block: `c = f(conv(x; θ2)) + f(conv(x; θ3))` with a shared
/// stride, optionally plus `f(conv(x; θ1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDenseBlock<T> {
    pub c1: Option<ConvParams<T>>,
    pub c2: ConvParams<T>,
    pub c3: ConvParams<T>,
    pub activation: Activation,
}

fn same_geometry<T: Scalar>(a: &ConvParams<T>, b: &ConvParams<T>) -> bool {
    a.weight.value.shape() == b.weight.value.shape() && a.spec == b.spec
}

impl<T: Scalar> ResidualDenseBlock<T> {
    pub fn new(
        init: &mut ParamInit,
        c_in: usize,
        c_out: usize,
        stride: usize,
        spatial_rank: usize,
        c1: ResidualC1,
    ) -> Self {
        let spec = ConvSpec::strided(stride);
        let c1 = (c1 == ResidualC1::Add).then(|| init.conv(c_in, c_out, 3, spatial_rank, spec));
        let c2 = init.conv(c_in, c_out, 3, spatial_rank, spec);
        let c3 = init.conv(c_in, c_out, 3, spatial_rank, spec);
        ResidualDenseBlock {
            c1,
            c2,
            c3,
            activation: Activation::Relu,
        }
    }

    /// Assembles a block from explicit convolutions, rejecting branches whose
    /// outputs could not be added.
    pub fn from_parts(
        c1: Option<ConvParams<T>>,
        c2: ConvParams<T>,
        c3: ConvParams<T>,
        activation: Activation,
    ) -> Result<Self> {
        if !same_geometry(&c2, &c3) {
            return Err(Error::shape(
                "residual_dense_block",
                c2.weight.value.shape(),
                c3.weight.value.shape(),
            ));
        }
        if let Some(c1) = &c1 {
            if !same_geometry(c1, &c2) {
                return Err(Error::shape(
                    "residual_dense_block",
                    c1.weight.value.shape(),
                    c2.weight.value.shape(),
                ));
            }
        }
        Ok(ResidualDenseBlock {
            c1,
            c2,
            c3,
            activation,
        })
    }

    pub fn stride(&self) -> usize {
        self.c2.spec.stride
    }

    pub fn out_channels(&self) -> usize {
        self.c2.out_channels()
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let a = tape.conv(x, &self.c2, self.activation)?;
        let b = tape.conv(x, &self.c3, self.activation)?;
        let mut out = tape.add(a, b)?;
        if let Some(c1) = &self.c1 {
            let c = tape.conv(x, c1, self.activation)?;
            out = tape.add(out, c)?;
        }
        Ok(out)
    }
}

impl<T> Parameterized<T> for ResidualDenseBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.c1.visit_params_mut(f);
        self.c2.visit_params_mut(f);
        self.c3.visit_params_mut(f);
    }
}

/// Skip-connection module: `k` stacked 3x3(x3) conv-relu stages whose
/// outputs are concatenated and projected back to the input width by a
/// pointwise convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedConvolution<T> {
    pub stages: Vec<ConvParams<T>>,
    pub projection: ConvParams<T>,
}

impl<T: Scalar> StackedConvolution<T> {
    pub fn new(init: &mut ParamInit, width: usize, depth: usize, spatial_rank: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("stacked convolution depth must be >= 1".into()));
        }
        let stages = (0..depth)
            .map(|_| init.conv(width, width, 3, spatial_rank, ConvSpec::default()))
            .collect();
        let projection = init.conv(depth * width, width, 1, spatial_rank, ConvSpec::default());
        Ok(StackedConvolution { stages, projection })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            h = tape.conv(h, stage, Activation::Relu)?;
            outs.push(h);
        }
        let cat = tape.concat_channels(&outs)?;
        tape.conv(cat, &self.projection, Activation::None)
    }
}

impl<T> Parameterized<T> for StackedConvolution<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stages.visit_params(f);
        self.projection.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stages.visit_params_mut(f);
        self.projection.visit_params_mut(f);
    }
}

/// Two atrous convolutions of one level, at dilations `r1` and `r2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtrousPair<T> {
    pub k1: ConvParams<T>,
    pub k2: ConvParams<T>,
}

impl<T: Scalar> AtrousPair<T> {
    pub fn new(
        init: &mut ParamInit,
        c_in: usize,
        c_out: usize,
        dilations: (usize, usize),
        spatial_rank: usize,
    ) -> Self {
        AtrousPair {
            k1: init.conv(c_in, c_out, 3, spatial_rank, ConvSpec::dilated(dilations.0)),
            k2: init.conv(c_in, c_out, 3, spatial_rank, ConvSpec::dilated(dilations.1)),
        }
    }

    fn validate(&self) -> Result<()> {
        let (a, b) = (&self.k1, &self.k2);
        if a.out_channels() != b.out_channels()
            || a.in_channels() != b.in_channels()
            || a.spec.stride != b.spec.stride
            || a.spec.padding != b.spec.padding
        {
            return Err(Error::shape(
                "layered_attention",
                a.weight.value.shape(),
                b.weight.value.shape(),
            ));
        }
        Ok(())
    }

    /// `conv(m; K1, r1) + conv(m; K2, r2)`.
    pub fn apply(&self, tape: &mut Tape<T>, m: Var) -> Result<Var> {
        let a = tape.conv(m, &self.k1, Activation::None)?;
        let b = tape.conv(m, &self.k2, Activation::None)?;
        tape.add(a, b)
    }
}

impl<T> Parameterized<T> for AtrousPair<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.k1.visit_params(f);
        self.k2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.k1.visit_params_mut(f);
        self.k2.visit_params_mut(f);
    }
}

/// Dense head producing the three group weights:
/// `G = softmax(W2^T relu(W1^T I + B1) + B2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights<T> {
    pub hidden: DenseParams<T>,
    pub out: DenseParams<T>,
}

impl<T: Scalar> GroupWeights<T> {
    pub fn new(init: &mut ParamInit, pooled: usize, hidden: usize) -> Self {
        GroupWeights {
            hidden: init.dense(pooled, hidden),
            out: init.dense(hidden, 3),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.out.out_features() != 3 || self.hidden.out_features() != self.out.in_features() {
            return Err(Error::shape(
                "group_weights",
                self.hidden.weight.value.shape(),
                self.out.weight.value.shape(),
            ));
        }
        Ok(())
    }
}

impl<T> Parameterized<T> for GroupWeights<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.hidden.visit_params(f);
        self.out.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.hidden.visit_params_mut(f);
        self.out.visit_params_mut(f);
    }
}

/// Squeeze-and-excitation: pooled channel descriptor through a
/// `K -> K/ρ -> K` bottleneck, sigmoid gates multiplied onto the input.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock<T> {
    pub squeeze: DenseParams<T>,
    pub excite: DenseParams<T>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(init: &mut ParamInit, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Config(format!(
                "SE reduction ratio {ratio} must divide channel count {channels}"
            )));
        }
        Ok(SeBlock {
            squeeze: init.dense(channels, channels / ratio),
            excite: init.dense(channels / ratio, channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_features()
    }

    /// Channel gates `e` in (0, 1) for input `m`.
    pub fn excitation(&self, tape: &mut Tape<T>, m: Var) -> Result<Var> {
        let c = tape.global_avg_pool(m)?;
        let h = tape.dense(c, &self.squeeze, Activation::Relu)?;
        tape.dense(h, &self.excite, Activation::Sigmoid)
    }

    pub fn apply(&self, tape: &mut Tape<T>, m: Var) -> Result<Var> {
        let e = self.excitation(tape, m)?;
        tape.channel_scale(m, e)
    }
}

impl<T> Parameterized<T> for SeBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.squeeze.visit_params(f);
        self.excite.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.squeeze.visit_params_mut(f);
        self.excite.visit_params_mut(f);
    }
}

/// Layered attention with channel attention over three feature levels.
///
/// `M1`, `M2`, `M3` (high-level, low-level and detailed features) each pass
/// through an [`AtrousPair`] that also maps them to a common width. The
/// three results are resampled to the finest grid among them, weighted by
/// [`GroupWeights`], gated by one [`SeBlock`] each and summed.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredAttention<T> {
    pub pairs: [AtrousPair<T>; 3],
    pub group: GroupWeights<T>,
    pub se: [SeBlock<T>; 3],
    pub resample: ResampleMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayeredAttentionConfig {
    pub in_channels: [usize; 3],
    pub width: usize,
    pub dilations: (usize, usize),
    pub se_ratio: usize,
    /// Hidden width of the group-weight dense layer.
    pub group_hidden: usize,
    pub spatial_rank: usize,
    pub resample: ResampleMode,
}

impl<T: Scalar> LayeredAttention<T> {
    pub fn new(init: &mut ParamInit, cfg: &LayeredAttentionConfig) -> Result<Self> {
        let pairs = cfg
            .in_channels
            .map(|c| AtrousPair::new(init, c, cfg.width, cfg.dilations, cfg.spatial_rank));
        let group = GroupWeights::new(init, 3 * cfg.width, cfg.group_hidden);
        let se = [
            SeBlock::new(init, cfg.width, cfg.se_ratio)?,
            SeBlock::new(init, cfg.width, cfg.se_ratio)?,
            SeBlock::new(init, cfg.width, cfg.se_ratio)?,
        ];
        let la = LayeredAttention {
            pairs,
            group,
            se,
            resample: cfg.resample,
        };
        la.validate()?;
        Ok(la)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            p.validate()?;
        }
        self.group.validate()?;
        let width = self.pairs[0].k1.out_channels();
        if self.pairs.iter().any(|p| p.k1.out_channels() != width)
            || self.se.iter().any(|s| s.channels() != width)
            || self.group.hidden.in_features() != 3 * width
        {
            return Err(Error::Config(
                "layered attention levels must share one channel width".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.pairs[0].k1.out_channels()
    }

    /// The three attended maps `A_i`, each on its own level's grid.
    pub fn attend(&self, tape: &mut Tape<T>, m: [Var; 3]) -> Result<[Var; 3]> {
        Ok([
            self.pairs[0].apply(tape, m[0])?,
            self.pairs[1].apply(tape, m[1])?,
            self.pairs[2].apply(tape, m[2])?,
        ])
    }

    /// Full module: attend, weight, gate and fuse.
    pub fn apply(&self, tape: &mut Tape<T>, m: [Var; 3]) -> Result<Var> {
        let a = self.attend(tape, m)?;
        let a = resample_to_finest(tape, a, self.resample)?;
        let g = group_weights_on(tape, a, &self.group, self.resample)?;
        attention_fuse_on(tape, a, g, &self.se, self.resample)
    }
}

impl<T> Parameterized<T> for LayeredAttention<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.pairs.visit_params(f);
        self.group.visit_params(f);
        self.se.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.pairs.visit_params_mut(f);
        self.group.visit_params_mut(f);
        self.se.visit_params_mut(f);
    }
}

/// Spatial shape with the most voxels among `shapes`; the first wins ties.
pub fn finest_shape<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut best: Option<&[usize]> = None;
    for s in shapes {
        if best.is_none_or(|b| numel(s) > numel(b)) {
            best = Some(s);
        }
    }
    best.map(<[usize]>::to_vec).unwrap_or_default()
}

fn resample_to_finest<T: Scalar>(tape: &mut Tape<T>, a: [Var; 3], mode: ResampleMode) -> Result<[Var; 3]> {
    let target = finest_shape(a.iter().map(|&v| tape.value(v).spatial_shape()));
    Ok([
        tape.resample(a[0], &target, mode)?,
        tape.resample(a[1], &target, mode)?,
        tape.resample(a[2], &target, mode)?,
    ])
}

/// Recorded form of [`group_weights`].
pub fn group_weights_on<T: Scalar>(
    tape: &mut Tape<T>,
    a: [Var; 3],
    p: &GroupWeights<T>,
    mode: ResampleMode,
) -> Result<Var> {
    let a = resample_to_finest(tape, a, mode)?;
    let cat = tape.concat_channels(&a)?;
    let pooled = tape.global_avg_pool(cat)?;
    let h = tape.dense(pooled, &p.hidden, Activation::Relu)?;
    let o = tape.dense(h, &p.out, Activation::None)?;
    tape.softmax(o)
}

/// Recorded form of [`attention_fuse`].
pub fn attention_fuse_on<T: Scalar>(
    tape: &mut Tape<T>,
    a: [Var; 3],
    g: Var,
    se: &[SeBlock<T>; 3],
    mode: ResampleMode,
) -> Result<Var> {
    let a = resample_to_finest(tape, a, mode)?;
    let mut acc: Option<Var> = None;
    for i in 0..3 {
        let gated = se[i].apply(tape, a[i])?;
        let gi = tape.pick(g, i)?;
        let term = tape.mul_scalar(gated, gi)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three terms"))
}

fn run<T: Scalar, const N: usize>(
    inputs: [&Tensor<T>; N],
    f: impl FnOnce(&mut Tape<T>, [Var; N]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = inputs.map(|t| tape.input(t.clone()));
    let out = f(&mut tape, vars)?;
    Ok(tape.into_value(out))
}

pub fn residual_dense_block<T: Scalar>(x: &Tensor<T>, p: &ResidualDenseBlock<T>) -> Result<Tensor<T>> {
    run([x], |tape, [x]| p.apply(tape, x))
}

pub fn stacked_convolution<T: Scalar>(x: &Tensor<T>, p: &StackedConvolution<T>) -> Result<Tensor<T>> {
    run([x], |tape, [x]| p.apply(tape, x))
}

/// `A_i = conv(M_i; K1_i, r1) + conv(M_i; K2_i, r2)` for the three levels.
pub fn layered_attention<T: Scalar>(
    m1: &Tensor<T>,
    m2: &Tensor<T>,
    m3: &Tensor<T>,
    p: &LayeredAttention<T>,
) -> Result<[Tensor<T>; 3]> {
    let mut tape = Tape::new();
    let m = [m1, m2, m3].map(|t| tape.input(t.clone()));
    let a = p.attend(&mut tape, m)?;
    Ok(a.map(|v| tape.value(v).clone()))
}

/// Group weights `G` (a point of the open 3-simplex) for attended maps.
pub fn group_weights<T: Scalar>(
    a: [&Tensor<T>; 3],
    p: &GroupWeights<T>,
    mode: ResampleMode,
) -> Result<Tensor<T>> {
    run(a, |tape, a| group_weights_on(tape, a, p, mode))
}

pub fn se_block<T: Scalar>(m: &Tensor<T>, p: &SeBlock<T>) -> Result<Tensor<T>> {
    run([m], |tape, [m]| p.apply(tape, m))
}

/// `sum_i G_i * SE_i(resample(A_i))` on the finest grid.
pub fn attention_fuse<T: Scalar>(
    a: [&Tensor<T>; 3],
    g: &Tensor<T>,
    se: &[SeBlock<T>; 3],
    mode: ResampleMode,
) -> Result<Tensor<T>> {
    if g.shape() != [3] {
        return Err(Error::shape("attention_fuse", g.shape(), &[3]));
    }
    let mut tape = Tape::new();
    let a = a.map(|t| tape.input(t.clone()));
    let g = tape.input(g.clone());
    let out = attention_fuse_on(&mut tape, a, g, se, mode)?;
    Ok(tape.into_value(out))
}

/// Spatial shape produced by a residual dense block with stride `s`.
pub fn strided_shape(spatial: &[usize], stride: usize) -> Vec<usize> {
    spatial
        .iter()
        .map(|&d| conv_out_extent(d, 3, &ConvSpec::strided(stride)).expect("SAME never fails"))
        .collect()
}
