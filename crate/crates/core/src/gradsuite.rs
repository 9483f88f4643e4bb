//! Finite-difference verification of every block and a minimal network.
//!
//! Each component is built at a small size from the given configuration,
//! its biases are moved off zero, and its output is reduced to a scalar by
//! a fixed random probe so that every output element contributes to the
//! checked gradient.

use crate::blocks::{
    attention_fuse_on, group_weights_on, GroupWeights, LayeredAttention, LayeredAttentionConfig, ResidualDenseBlock,
    SeBlock, StackedConvolution,
};
use crate::tensorcore::{grad_check_with, GradCheckOptions, GradCheckReport, Param, ParamInit, Parameterized, Tape, Var};
use crate::{Network64, NetworkConfig, Result, Tensor64};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Central-difference step.
pub const EPS: f64 = 1e-5;

/// Registered components, in report order.
pub const COMPONENTS: [&str; 7] = [
    "residual_dense_block",
    "stacked_convolution",
    "layered_attention",
    "group_weights",
    "se_block",
    "attention_fusion",
    "network",
];

struct Fusion {
    group: GroupWeights<f64>,
    se: [SeBlock<f64>; 3],
}

impl Parameterized<f64> for Fusion {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.group.visit_params(f);
        self.se.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.group.visit_params_mut(f);
        self.se.visit_params_mut(f);
    }
}

struct Fixture {
    init: ParamInit,
    rank: usize,
}

impl Fixture {
    fn tensor(&mut self, channels: usize, extent: usize) -> Tensor64 {
        let mut shape = vec![channels];
        shape.extend(std::iter::repeat_n(extent, self.rank));
        self.init.glorot::<f64>(&shape, 1, 1).value
    }

    /// Moves every bias off zero so no relu input sits exactly on its kink.
    fn jitter_biases<M: Parameterized<f64>>(&mut self, m: &mut M) {
        let mut shapes = Vec::new();
        m.visit_params(&mut |p| shapes.push(p.value.shape().to_vec()));
        let noise: Vec<Tensor64> = shapes.iter().map(|s| self.init.glorot::<f64>(s, 200, 200).value).collect();
        let mut i = 0;
        m.visit_params_mut(&mut |p| {
            if p.value.rank() == 1 {
                p.value = noise[i].clone();
            }
            i += 1;
        });
    }
}

fn probe(tape: &mut Tape<f64>, out: Var, fx_probe: &Tensor64) -> Result<Var> {
    let p = tape.input(fx_probe.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

/// Runs the check for one component of [`COMPONENTS`] in 64-bit.
pub fn check(name: &str, cfg: &NetworkConfig, opts: GradCheckOptions<f64>) -> Result<GradCheckReport> {
    let rank = cfg.spatial_rank;
    let mut fx = Fixture {
        init: ParamInit::new(cfg.seed ^ 0x9e37_79b9),
        rank,
    };
    let mut blocks = ParamInit::new(cfg.seed);
    let attention_cfg = LayeredAttentionConfig {
        in_channels: [4, 2, 2],
        width: 2,
        dilations: (cfg.dilations[0], cfg.dilations[1]),
        se_ratio: 2,
        group_hidden: 2,
        spatial_rank: rank,
        resample: cfg.attention_resample,
    };
    match name {
        "residual_dense_block" => {
            let mut m = ResidualDenseBlock::<f64>::new(&mut blocks, 2, 2, 2, rank, cfg.residual_c1);
            fx.jitter_biases(&mut m);
            let x = fx.tensor(2, 4);
            let pr = fx.tensor(2, 2);
            grad_check_with(&mut m, opts, |m, tape| {
                let xv = tape.input(x.clone());
                let y = m.apply(tape, xv)?;
                probe(tape, y, &pr)
            })
        }
        "stacked_convolution" => {
            let mut m = StackedConvolution::<f64>::new(&mut blocks, 2, cfg.stacked_depth, rank)?;
            fx.jitter_biases(&mut m);
            let x = fx.tensor(2, 3);
            let pr = fx.tensor(2, 3);
            grad_check_with(&mut m, opts, |m, tape| {
                let xv = tape.input(x.clone());
                let y = m.apply(tape, xv)?;
                probe(tape, y, &pr)
            })
        }
        "layered_attention" => {
            let mut m = LayeredAttention::<f64>::new(&mut blocks, &attention_cfg)?;
            fx.jitter_biases(&mut m);
            let xs = [fx.tensor(4, 2), fx.tensor(2, 4), fx.tensor(2, 4)];
            let pr = fx.tensor(2, 4);
            grad_check_with(&mut m, opts, |m, tape| {
                let xv = [0, 1, 2].map(|i| tape.input(xs[i].clone()));
                let y = m.apply(tape, xv)?;
                probe(tape, y, &pr)
            })
        }
        "group_weights" => {
            let mut m = GroupWeights::<f64>::new(&mut blocks, 6, 2);
            fx.jitter_biases(&mut m);
            let xs = [fx.tensor(2, 2), fx.tensor(2, 4), fx.tensor(2, 4)];
            let pr = fx.init.glorot::<f64>(&[3], 1, 1).value;
            grad_check_with(&mut m, opts, |m, tape| {
                let xv = [0, 1, 2].map(|i| tape.input(xs[i].clone()));
                let y = group_weights_on(tape, xv, m, cfg.attention_resample)?;
                probe(tape, y, &pr)
            })
        }
        "se_block" => {
            let mut m = SeBlock::<f64>::new(&mut blocks, 4, 2)?;
            fx.jitter_biases(&mut m);
            let x = fx.tensor(4, 3);
            let pr = fx.tensor(4, 3);
            grad_check_with(&mut m, opts, |m, tape| {
                let xv = tape.input(x.clone());
                let y = m.apply(tape, xv)?;
                probe(tape, y, &pr)
            })
        }
        "attention_fusion" => {
            let group = GroupWeights::<f64>::new(&mut blocks, 6, 2);
            let se = [(); 3].map(|_| SeBlock::<f64>::new(&mut blocks, 2, 2));
            let [a, b, c] = se;
            let mut m = Fusion {
                group,
                se: [a?, b?, c?],
            };
            fx.jitter_biases(&mut m);
            let xs = [fx.tensor(2, 2), fx.tensor(2, 4), fx.tensor(2, 4)];
            let pr = fx.tensor(2, 4);
            grad_check_with(&mut m, opts, |m, tape| {
                let xv = [0, 1, 2].map(|i| tape.input(xs[i].clone()));
                let g = group_weights_on(tape, xv, &m.group, cfg.attention_resample)?;
                let y = attention_fuse_on(tape, xv, g, &m.se, cfg.attention_resample)?;
                probe(tape, y, &pr)
            })
        }
        "network" => {
            let minimal = NetworkConfig {
                levels: 2,
                base_width: 2,
                se_ratio: 2,
                ..cfg.clone()
            };
            let mut net = Network64::build(&minimal)?;
            fx.jitter_biases(&mut net);
            let x = fx.tensor(minimal.in_channels, 8);
            let pr = fx.tensor(minimal.num_classes, 8);
            grad_check_with(&mut net, opts, |net, tape| {
                let xv = tape.input(x.clone());
                let y = net.forward_on(tape, xv)?;
                probe(tape, y, &pr)
            })
        }
        other => Err(crate::Error::InvalidArgument(format!("unknown component {other}"))),
    }
}
