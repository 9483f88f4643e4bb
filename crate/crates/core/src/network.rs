//! The full encoder/decoder segmentation network.
//!
//! Topology for `L` levels with widths `w_l = base_width * 2^(l-1)`:
//!
//! * encoder level `l` is one residual dense block producing `E_l`
//!   (stride 1 at level 1, stride 2 afterwards);
//! * every level below the bottleneck has a stacked-convolution skip module;
//! * layered attention reads `M1 = E_L`, `M2 = E_(L-1)`, `M3 = E_(L-2)`
//!   (`E_1` when `L = 2`) and its fused output is resampled to the bottleneck
//!   grid, concatenated with `E_L` and merged by a pointwise conv-relu;
//! * decoder level `l` upsamples, concatenates the skip output and applies
//!   two conv-relu layers to width `w_l`;
//! * a pointwise convolution to `num_classes` followed by a channel softmax.
//!
//! Parameters are enumerated encoder, skips, attention, merge, decoder
//! (deepest first), head. That order is the serialization contract.

use serde::{Deserialize, Serialize};

use crate::blocks::{LayeredAttention, LayeredAttentionConfig, ResidualC1, ResidualDenseBlock, StackedConvolution};
use crate::data::{LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensorcore::{Activation, ConvParams, ConvSpec, Param, ParamInit, Parameterized, ResampleMode, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub levels: usize,
    pub base_width: usize,
    pub stacked_depth: usize,
    pub dilations: [usize; 2],
    pub se_ratio: usize,
    pub residual_c1: ResidualC1,
    /// Interpolation used to bring attention maps onto a common grid.
    pub attention_resample: ResampleMode,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            spatial_rank: 3,
            in_channels: 4,
            num_classes: 4,
            levels: 4,
            base_width: 8,
            stacked_depth: 2,
            dilations: [1, 2],
            se_ratio: 4,
            residual_c1: ResidualC1::Off,
            attention_resample: ResampleMode::Nearest,
            seed: 0,
        }
    }
}

/// Upper bound on the widest feature map, in channels.
const MAX_WIDTH: usize = 4096;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(2..=3).contains(&self.spatial_rank) {
            return fail(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if !(2..=256).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.levels < 2 {
            return fail(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.base_width == 0 {
            return fail("base_width must be >= 1".into());
        }
        if self.levels > 12 || self.width(self.levels) > MAX_WIDTH {
            return fail(format!(
                "base_width {} over {} levels exceeds {MAX_WIDTH} channels",
                self.base_width, self.levels
            ));
        }
        if self.stacked_depth == 0 {
            return fail("stacked_depth must be >= 1".into());
        }
        if self.dilations.contains(&0) {
            return fail("dilations must be >= 1".into());
        }
        if self.se_ratio == 0 || self.attention_width() % self.se_ratio != 0 {
            return fail(format!(
                "se_ratio {} must divide the attention width {}",
                self.se_ratio,
                self.attention_width()
            ));
        }
        Ok(())
    }

    /// Channel width of encoder/decoder level `level` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    /// Common channel width of the attention maps.
    pub fn attention_width(&self) -> usize {
        self.base_width
    }

    /// Encoder levels feeding `M1`, `M2`, `M3` (1-based).
    pub fn attention_levels(&self) -> [usize; 3] {
        let l = self.levels;
        [l, l - 1, l.saturating_sub(2).max(1)]
    }

    /// Every spatial extent must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

fn conv_count(c_in: usize, k: usize, m: usize, rank: usize) -> usize {
    k * c_in * m.pow(rank as u32) + k
}

fn dense_count(n: usize, k: usize) -> usize {
    n * k + k
}

/// Number of scalar parameters a network built from `cfg` has.
pub fn param_count(cfg: &NetworkConfig) -> usize {
    let r = cfg.spatial_rank;
    let w = |l| cfg.width(l);
    let per_block = if cfg.residual_c1 == ResidualC1::Add { 3 } else { 2 };
    let mut n = 0;
    for l in 1..=cfg.levels {
        let c_in = if l == 1 { cfg.in_channels } else { w(l - 1) };
        n += per_block * conv_count(c_in, w(l), 3, r);
    }
    for l in 1..cfg.levels {
        n += cfg.stacked_depth * conv_count(w(l), w(l), 3, r) + conv_count(cfg.stacked_depth * w(l), w(l), 1, r);
    }
    let c = cfg.attention_width();
    for level in cfg.attention_levels() {
        n += 2 * conv_count(w(level), c, 3, r);
    }
    n += dense_count(3 * c, c) + dense_count(c, 3);
    n += 3 * (dense_count(c, c / cfg.se_ratio) + dense_count(c / cfg.se_ratio, c));
    n += conv_count(w(cfg.levels) + c, w(cfg.levels), 1, r);
    for l in 1..cfg.levels {
        n += conv_count(w(l + 1) + w(l), w(l), 3, r) + conv_count(w(l), w(l), 3, r);
    }
    n + conv_count(w(1), cfg.num_classes, 1, r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel<T> {
    pub fuse: ConvParams<T>,
    pub refine: ConvParams<T>,
}

impl<T> Parameterized<T> for DecoderLevel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fuse.visit_params(f);
        self.refine.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fuse.visit_params_mut(f);
        self.refine.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    /// One block per level, shallowest first.
    pub encoder: Vec<ResidualDenseBlock<T>>,
    /// Skip modules for levels `1..L`, shallowest first.
    pub skips: Vec<StackedConvolution<T>>,
    pub attention: LayeredAttention<T>,
    pub merge: ConvParams<T>,
    /// Deepest first: index 0 produces level `L - 1`.
    pub decoder: Vec<DecoderLevel<T>>,
    pub head: ConvParams<T>,
}

impl<T: Scalar> Network<T> {
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ParamInit::new(cfg.seed);
        let r = cfg.spatial_rank;
        let w = |l| cfg.width(l);

        let encoder = (1..=cfg.levels)
            .map(|l| {
                let (c_in, stride) = if l == 1 { (cfg.in_channels, 1) } else { (w(l - 1), 2) };
                ResidualDenseBlock::new(&mut init, c_in, w(l), stride, r, cfg.residual_c1)
            })
            .collect();
        let skips = (1..cfg.levels)
            .map(|l| StackedConvolution::new(&mut init, w(l), cfg.stacked_depth, r))
            .collect::<Result<_>>()?;
        let c = cfg.attention_width();
        let attention = LayeredAttention::new(
            &mut init,
            &LayeredAttentionConfig {
                in_channels: cfg.attention_levels().map(w),
                width: c,
                dilations: (cfg.dilations[0], cfg.dilations[1]),
                se_ratio: cfg.se_ratio,
                group_hidden: c,
                spatial_rank: r,
                resample: cfg.attention_resample,
            },
        )?;
        let merge = init.conv(w(cfg.levels) + c, w(cfg.levels), 1, r, ConvSpec::default());
        let decoder = (1..cfg.levels)
            .rev()
            .map(|l| DecoderLevel {
                fuse: init.conv(w(l + 1) + w(l), w(l), 3, r, ConvSpec::default()),
                refine: init.conv(w(l), w(l), 3, r, ConvSpec::default()),
            })
            .collect();
        let head = init.conv(w(1), cfg.num_classes, 1, r, ConvSpec::default());
        Ok(Network {
            config: cfg.clone(),
            encoder,
            skips,
            attention,
            merge,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if shape.len() != cfg.spatial_rank + 1 || shape[0] != cfg.in_channels {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!(
                    "expected {} channels and {} spatial axes",
                    cfg.in_channels, cfg.spatial_rank
                ),
            });
        }
        let q = cfg.required_multiple();
        if shape[1..].iter().any(|&d| d == 0 || d % q != 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("every spatial extent must be a positive multiple of {q}"),
            });
        }
        Ok(())
    }

    /// Records the forward pass; returns per-voxel class probabilities.
    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input_shape(tape.shape(x))?;
        let levels = self.config.levels;

        let mut enc = Vec::with_capacity(levels);
        let mut h = x;
        for block in &self.encoder {
            h = block.apply(tape, h)?;
            enc.push(h);
        }
        let skips = self
            .skips
            .iter()
            .zip(&enc)
            .map(|(s, &e)| s.apply(tape, e))
            .collect::<Result<Vec<_>>>()?;

        let taps = self.config.attention_levels().map(|l| enc[l - 1]);
        let fused = self.attention.apply(tape, taps)?;
        let bottom = enc[levels - 1];
        let grid = tape.shape(bottom)[1..].to_vec();
        let fused = tape.resample(fused, &grid, self.config.attention_resample)?;
        let cat = tape.concat_channels(&[bottom, fused])?;
        let mut d = tape.conv(cat, &self.merge, Activation::Relu)?;

        for (dec, l) in self.decoder.iter().zip((1..levels).rev()) {
            let skip = skips[l - 1];
            let grid = tape.shape(skip)[1..].to_vec();
            let up = tape.resample(d, &grid, ResampleMode::Nearest)?;
            let cat = tape.concat_channels(&[up, skip])?;
            let f = tape.conv(cat, &dec.fuse, Activation::Relu)?;
            d = tape.conv(f, &dec.refine, Activation::Relu)?;
        }
        let logits = tape.conv(d, &self.head, Activation::None)?;
        tape.channel_softmax(logits)
    }

    /// Per-voxel class probabilities `[num_classes, S...]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward_on(&mut tape, xv)?;
        Ok(tape.into_value(out))
    }

    /// Argmax label map of the forward probabilities, flattened over the
    /// spatial grid. Ties go to the lower class index.
    pub fn segment_tensor(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.forward(x)?))
    }

    /// Label map of a volume, with the volume's spatial shape and spacing.
    /// The image is used as given; callers normalize beforehand.
    pub fn segment(&self, volume: &MultiModalVolume) -> Result<LabelVolume> {
        let labels = self.segment_tensor(&volume.to_tensor())?;
        LabelVolume::new(volume.spatial_shape().to_vec(), labels, volume.spacing().to_vec())
    }
}

/// Channel argmax at every voxel; ties resolve to the lower index.
pub fn argmax_channels<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let n = probs.spatial_len();
    let c = probs.channels();
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = probs.data()[i];
            for k in 1..c {
                let v = probs.data()[k * n + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect()
}

impl<T> Parameterized<T> for Network<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit_params(f);
        self.skips.visit_params(f);
        self.attention.visit_params(f);
        self.merge.visit_params(f);
        self.decoder.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_params_mut(f);
        self.skips.visit_params_mut(f);
        self.attention.visit_params_mut(f);
        self.merge.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}
