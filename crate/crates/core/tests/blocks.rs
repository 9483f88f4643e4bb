mod common;

use common::*;
use proptest::prelude::*;
use slca_core::blocks::{
    attention_fuse, group_weights, layered_attention, residual_dense_block, se_block, stacked_convolution,
    GroupWeights, LayeredAttention, LayeredAttentionConfig, ResidualC1, ResidualDenseBlock, SeBlock,
    StackedConvolution,
};
use slca_core::tensorcore::{
    grad_check, Activation, ConvParams, ConvSpec, DenseParams, ParamInit, Parameterized, ResampleMode, Tape, Var,
};
use slca_core::{Result, Tensor64};

fn oracle_conv(x: &Tensor64, p: &ConvParams<f64>) -> (Vec<usize>, Vec<f64>) {
    conv_oracle(
        x.data(),
        x.shape(),
        p.weight.value.data(),
        p.weight.value.shape(),
        p.bias.value.data(),
        p.spec.stride,
        p.spec.dilation,
        true,
    )
}

fn random_conv(init: &mut ParamInit, g: &mut rand_chacha::ChaCha8Rng, c_in: usize, k: usize, m: usize, spec: ConvSpec) -> ConvParams<f64> {
    let w = random_tensor(g, &[k, c_in, m, m, m]);
    let b = random_tensor(g, &[k]);
    init.conv_from(w, b, spec)
}

fn random_dense(init: &mut ParamInit, g: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> DenseParams<f64> {
    let w = random_tensor(g, &[n, k]);
    let b = random_tensor(g, &[k]);
    init.dense_from(w, b)
}

fn zero_dense(init: &mut ParamInit, n: usize, k: usize, bias: f64) -> DenseParams<f64> {
    init.dense_from(Tensor64::zeros(&[n, k]), Tensor64::full(&[k], bias))
}

/// Loss `sum(out * probe)` with a fixed random probe so that no output
/// element's gradient is trivially symmetric.
fn probe_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let probe = random_tensor(&mut rng(seed), &shape);
    let p = tape.input(probe);
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

// ---------------------------------------------------------------- residual

#[test]
fn residual_zero_params_give_zero_output_of_strided_shape() {
    let mut init = ParamInit::new(0);
    let zero = |init: &mut ParamInit| {
        init.conv_from(Tensor64::zeros(&[3, 2, 3, 3, 3]), Tensor64::zeros(&[3]), ConvSpec::strided(2))
    };
    let (a, b) = (zero(&mut init), zero(&mut init));
    let block = ResidualDenseBlock::from_parts(None, a, b, Activation::None).unwrap();
    let x = random_tensor(&mut rng(1), &[2, 5, 6, 7]);
    let y = residual_dense_block(&x, &block).unwrap();
    assert_eq!(y.shape(), &[3, 3, 3, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_stride_two_halves_extent() {
    let mut init = ParamInit::new(4);
    let block = ResidualDenseBlock::<f64>::new(&mut init, 3, 5, 2, 3, ResidualC1::Off);
    let x = random_tensor(&mut rng(2), &[3, 8, 8, 8]);
    assert_eq!(residual_dense_block(&x, &block).unwrap().shape(), &[5, 4, 4, 4]);
    let block = ResidualDenseBlock::<f64>::new(&mut init, 3, 5, 1, 3, ResidualC1::Off);
    assert_eq!(residual_dense_block(&x, &block).unwrap().shape(), &[5, 8, 8, 8]);
}

#[test]
fn residual_matches_composition_oracle() {
    let mut g = rng(3);
    let mut init = ParamInit::new(0);
    let x = random_tensor(&mut g, &[2, 4, 4, 4]);
    for stride in [1, 2] {
        let c1 = random_conv(&mut init, &mut g, 2, 3, 3, ConvSpec::strided(stride));
        let c2 = random_conv(&mut init, &mut g, 2, 3, 3, ConvSpec::strided(stride));
        let c3 = random_conv(&mut init, &mut g, 2, 3, 3, ConvSpec::strided(stride));
        let (shape, y2) = oracle_conv(&x, &c2);
        let (_, y3) = oracle_conv(&x, &c3);
        let (_, y1) = oracle_conv(&x, &c1);

        let linear = ResidualDenseBlock::from_parts(None, c2.clone(), c3.clone(), Activation::None).unwrap();
        let out = residual_dense_block(&x, &linear).unwrap();
        assert_eq!(out.shape(), &shape[..]);
        assert_close(out.data(), &add_oracle(&y2, &y3), 1e-10);

        let rectified = ResidualDenseBlock::from_parts(None, c2.clone(), c3.clone(), Activation::Relu).unwrap();
        let out = residual_dense_block(&x, &rectified).unwrap();
        assert_close(out.data(), &add_oracle(&relu(&y2), &relu(&y3)), 1e-10);

        let with_c1 = ResidualDenseBlock::from_parts(Some(c1), c2, c3, Activation::Relu).unwrap();
        let out = residual_dense_block(&x, &with_c1).unwrap();
        let expect = add_oracle(&add_oracle(&relu(&y2), &relu(&y3)), &relu(&y1));
        assert_close(out.data(), &expect, 1e-10);
    }
}

#[test]
fn residual_c1_flag_controls_parameters() {
    let off = ResidualDenseBlock::<f64>::new(&mut ParamInit::new(0), 2, 4, 1, 3, ResidualC1::Off);
    let add = ResidualDenseBlock::<f64>::new(&mut ParamInit::new(0), 2, 4, 1, 3, ResidualC1::Add);
    let per_conv = 4 * 2 * 27 + 4;
    assert_eq!(off.num_parameters(), 2 * per_conv);
    assert_eq!(add.num_parameters(), 3 * per_conv);
}

#[test]
fn residual_rejects_wrong_input_channels() {
    let block = ResidualDenseBlock::<f64>::new(&mut ParamInit::new(0), 2, 4, 1, 3, ResidualC1::Off);
    let x = Tensor64::zeros(&[3, 4, 4, 4]);
    assert!(residual_dense_block(&x, &block).is_err());
}

// ---------------------------------------------------------------- stacked

#[test]
fn stacked_single_stage_with_identity_projection_is_one_conv() {
    let mut g = rng(5);
    let mut init = ParamInit::new(0);
    let stage = random_conv(&mut init, &mut g, 3, 3, 3, ConvSpec::default());
    let eye = Tensor64::from_fn(&[3, 3, 1, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let projection = init.conv_from(eye, Tensor64::zeros(&[3]), ConvSpec::default());
    let module = StackedConvolution {
        stages: vec![stage.clone()],
        projection,
    };
    let x = random_tensor(&mut g, &[3, 4, 5, 4]);
    let out = stacked_convolution(&x, &module).unwrap();
    let (shape, y) = oracle_conv(&x, &stage);
    assert_eq!(out.shape(), &shape[..]);
    assert_close(out.data(), &relu(&y), 1e-12);
}

#[test]
fn stacked_preserves_shape_for_all_depths() {
    let x = random_tensor(&mut rng(6), &[4, 6, 5, 3]);
    for k in 1..=3 {
        let module = StackedConvolution::<f64>::new(&mut ParamInit::new(k as u64), 4, k, 3).unwrap();
        assert_eq!(module.depth(), k);
        assert_eq!(stacked_convolution(&x, &module).unwrap().shape(), x.shape());
    }
    assert!(StackedConvolution::<f64>::new(&mut ParamInit::new(0), 4, 0, 3).is_err());
}

#[test]
fn stacked_depth_two_matches_composition_oracle() {
    let mut g = rng(7);
    let mut init = ParamInit::new(0);
    let s1 = random_conv(&mut init, &mut g, 2, 2, 3, ConvSpec::default());
    let s2 = random_conv(&mut init, &mut g, 2, 2, 3, ConvSpec::default());
    let projection = random_conv(&mut init, &mut g, 4, 2, 1, ConvSpec::default());
    let module = StackedConvolution {
        stages: vec![s1.clone(), s2.clone()],
        projection: projection.clone(),
    };
    let x = random_tensor(&mut g, &[2, 4, 4, 4]);

    let (shape, h1) = oracle_conv(&x, &s1);
    let h1 = Tensor64::new(shape.clone(), relu(&h1)).unwrap();
    let (_, h2) = oracle_conv(&h1, &s2);
    let h2 = relu(&h2);
    let mut cat = h1.data().to_vec();
    cat.extend_from_slice(&h2);
    let cat = Tensor64::new(vec![4, 4, 4, 4], cat).unwrap();
    let (out_shape, expect) = oracle_conv(&cat, &projection);

    let out = stacked_convolution(&x, &module).unwrap();
    assert_eq!(out.shape(), &out_shape[..]);
    assert_close(out.data(), &expect, 1e-10);
}

// ---------------------------------------------------------------- layered attention

fn attention_fixture(seed: u64, widths: [usize; 3], c: usize) -> LayeredAttention<f64> {
    let cfg = LayeredAttentionConfig {
        in_channels: widths,
        width: c,
        dilations: (1, 2),
        se_ratio: 2,
        group_hidden: c,
        spatial_rank: 3,
        resample: ResampleMode::Nearest,
    };
    LayeredAttention::new(&mut ParamInit::new(seed), &cfg).unwrap()
}

#[test]
fn atrous_zero_second_kernel_reduces_to_first() {
    let mut g = rng(8);
    let mut la = attention_fixture(1, [3, 2, 2], 2);
    for v in la.pairs[0].k2.weight.value.data_mut() {
        *v = 0.0;
    }
    let m1 = random_tensor(&mut g, &[3, 4, 4, 4]);
    let m2 = random_tensor(&mut g, &[2, 4, 4, 4]);
    let m3 = random_tensor(&mut g, &[2, 8, 8, 8]);
    let [a1, _, _] = layered_attention(&m1, &m2, &m3, &la).unwrap();
    let (_, y) = oracle_conv(&m1, &la.pairs[0].k1);
    assert_close(a1.data(), &y, 1e-10);
}

#[test]
fn atrous_equal_kernels_and_dilations_double() {
    let mut la = attention_fixture(2, [2, 2, 2], 2);
    let pair = &mut la.pairs[1];
    pair.k2.spec = pair.k1.spec;
    pair.k2.weight.value = pair.k1.weight.value.clone();
    pair.k1.bias.value = Tensor64::vector(vec![0.25, -0.5]);
    pair.k2.bias.value = pair.k1.bias.value.clone();
    let mut g = rng(9);
    let m = random_tensor(&mut g, &[2, 4, 4, 4]);
    let [_, a2, _] = layered_attention(&m, &m, &m, &la).unwrap();
    let (_, y) = oracle_conv(&m, &la.pairs[1].k1);
    let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    assert_close(a2.data(), &doubled, 1e-10);
}

#[test]
fn layered_attention_matches_composition_oracle() {
    let mut g = rng(10);
    let la = attention_fixture(3, [4, 3, 2], 2);
    let m = [
        random_tensor(&mut g, &[4, 2, 2, 2]),
        random_tensor(&mut g, &[3, 4, 4, 4]),
        random_tensor(&mut g, &[2, 8, 8, 8]),
    ];
    let a = layered_attention(&m[0], &m[1], &m[2], &la).unwrap();
    for i in 0..3 {
        let (shape, y1) = oracle_conv(&m[i], &la.pairs[i].k1);
        let (_, y2) = oracle_conv(&m[i], &la.pairs[i].k2);
        assert_eq!(a[i].shape(), &shape[..]);
        assert_eq!(&a[i].shape()[1..], m[i].spatial_shape());
        assert_close(a[i].data(), &add_oracle(&y1, &y2), 1e-10);
    }
}

// ---------------------------------------------------------------- group weights

#[test]
fn zero_group_weights_are_uniform() {
    let mut init = ParamInit::new(0);
    let p = GroupWeights {
        hidden: zero_dense(&mut init, 6, 2, 0.0),
        out: zero_dense(&mut init, 2, 3, 0.0),
    };
    let mut g = rng(11);
    let a = [
        random_tensor(&mut g, &[2, 2, 2, 2]),
        random_tensor(&mut g, &[2, 4, 4, 4]),
        random_tensor(&mut g, &[2, 4, 4, 4]),
    ];
    let w = group_weights([&a[0], &a[1], &a[2]], &p, ResampleMode::Nearest).unwrap();
    assert_close(w.data(), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn group_weights_sum_to_one_over_random_draws() {
    let mut g = rng(12);
    for draw in 0..100 {
        let p = GroupWeights::<f64>::new(&mut ParamInit::new(draw), 9, 3);
        let a = [
            random_tensor(&mut g, &[3, 2, 2, 2]),
            random_tensor(&mut g, &[3, 4, 4, 4]),
            random_tensor(&mut g, &[3, 4, 4, 4]),
        ];
        let w = group_weights([&a[0], &a[1], &a[2]], &p, ResampleMode::Nearest).unwrap();
        let s: f64 = w.data().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "draw {draw}: sum {s}");
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn group_weights_match_dense_softmax_chain() {
    let mut init = ParamInit::new(0);
    // Three single-channel constant maps, so the pooled vector is exact.
    let a = [
        Tensor64::full(&[1, 2, 2, 2], 0.5),
        Tensor64::full(&[1, 4, 4, 4], -1.0),
        Tensor64::full(&[1, 4, 4, 4], 2.0),
    ];
    let w1 = vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.25];
    let b1 = vec![0.05, -0.1];
    let w2 = vec![1.0, -1.0, 0.5, 0.2, 0.3, -0.7];
    let b2 = vec![0.0, 0.1, -0.2];
    let p = GroupWeights {
        hidden: init.dense_from(Tensor64::new(vec![3, 2], w1.clone()).unwrap(), Tensor64::vector(b1.clone())),
        out: init.dense_from(Tensor64::new(vec![2, 3], w2.clone()).unwrap(), Tensor64::vector(b2.clone())),
    };
    let pooled = [0.5, -1.0, 2.0];
    let h = dense_oracle(&pooled, &w1, &b1, true);
    let o = dense_oracle(&h, &w2, &b2, false);
    let expect = softmax_oracle(&o);
    let w = group_weights([&a[0], &a[1], &a[2]], &p, ResampleMode::Nearest).unwrap();
    assert_close(w.data(), &expect, 1e-14);
}

// ---------------------------------------------------------------- SE

#[test]
fn se_saturated_gates_pass_or_block() {
    let m = random_tensor(&mut rng(13), &[4, 3, 3, 3]);
    let mut init = ParamInit::new(0);
    let open = SeBlock {
        squeeze: zero_dense(&mut init, 4, 2, 0.0),
        excite: zero_dense(&mut init, 2, 4, 50.0),
    };
    assert_eq!(se_block(&m, &open).unwrap(), m);
    let closed = SeBlock {
        squeeze: zero_dense(&mut init, 4, 2, 0.0),
        excite: zero_dense(&mut init, 2, 4, -800.0),
    };
    assert!(se_block(&m, &closed).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn se_matches_pooling_dense_oracle() {
    let mut g = rng(14);
    let mut init = ParamInit::new(0);
    let p = SeBlock {
        squeeze: random_dense(&mut init, &mut g, 4, 2),
        excite: random_dense(&mut init, &mut g, 2, 4),
    };
    let m = random_tensor(&mut g, &[4, 3, 4, 2]);
    let e = se_gates_oracle(
        m.data(),
        4,
        p.squeeze.weight.value.data(),
        p.squeeze.bias.value.data(),
        p.excite.weight.value.data(),
        p.excite.bias.value.data(),
    );
    let out = se_block(&m, &p).unwrap();
    assert_eq!(out.shape(), m.shape());
    let n = m.spatial_len();
    let expect: Vec<f64> = (0..m.len()).map(|i| e[i / n] * m.data()[i]).collect();
    assert_close(out.data(), &expect, 1e-12);
}

#[test]
fn se_output_is_exactly_channelwise_proportional() {
    let mut g = rng(15);
    for seed in 0..10 {
        let p = SeBlock::<f64>::new(&mut ParamInit::new(seed), 8, 4).unwrap();
        let m = random_tensor(&mut g, &[8, 3, 3, 3]);
        let mut tape = Tape::new();
        let mv = tape.input(m.clone());
        let e = p.excitation(&mut tape, mv).unwrap();
        let out = p.apply(&mut tape, mv).unwrap();
        let e = tape.value(e).data().to_vec();
        assert!(e.iter().all(|&v| v > 0.0 && v < 1.0));
        let n = m.spatial_len();
        for (i, &v) in tape.value(out).data().iter().enumerate() {
            assert_eq!(v, e[i / n] * m.data()[i]);
        }
    }
}

// ---------------------------------------------------------------- fusion

fn se_oracle(x: &[f64], channels: usize, p: &SeBlock<f64>) -> Vec<f64> {
    let e = se_gates_oracle(
        x,
        channels,
        p.squeeze.weight.value.data(),
        p.squeeze.bias.value.data(),
        p.excite.weight.value.data(),
        p.excite.bias.value.data(),
    );
    let n = x.len() / channels;
    (0..x.len()).map(|i| e[i / n] * x[i]).collect()
}

#[test]
fn fuse_selector_weights_pick_first_group() {
    let la = attention_fixture(16, [2, 2, 2], 2);
    let mut g = rng(16);
    let a1 = random_tensor(&mut g, &[2, 2, 2, 2]);
    let a2 = random_tensor(&mut g, &[2, 4, 4, 4]);
    let a3 = random_tensor(&mut g, &[2, 4, 4, 4]);
    let sel = Tensor64::vector(vec![1.0, 0.0, 0.0]);
    let out = attention_fuse([&a1, &a2, &a3], &sel, &la.se, ResampleMode::Nearest).unwrap();
    let up = nearest_oracle(a1.data(), a1.shape(), &[4, 4, 4]);
    assert_eq!(out.shape(), &[2, 4, 4, 4]);
    assert_close(out.data(), &se_oracle(&up, 2, &la.se[0]), 1e-12);
}

#[test]
fn fuse_of_equal_terms_is_that_term() {
    let mut la = attention_fixture(17, [4, 4, 4], 4);
    la.se[1] = la.se[0].clone();
    la.se[2] = la.se[0].clone();
    let a = random_tensor(&mut rng(17), &[4, 3, 3, 3]);
    let single = se_block(&a, &la.se[0]).unwrap();
    for gw in [[0.2, 0.3, 0.5], [0.9, 0.05, 0.05], [1.0 / 3.0; 3]] {
        let out = attention_fuse([&a, &a, &a], &Tensor64::vector(gw.to_vec()), &la.se, ResampleMode::Nearest).unwrap();
        assert_close(out.data(), single.data(), 1e-12);
    }
}

#[test]
fn fuse_matches_step_by_step_oracle() {
    let la = attention_fixture(18, [2, 2, 2], 2);
    let mut g = rng(18);
    let a = [
        random_tensor(&mut g, &[2, 2, 2, 2]),
        random_tensor(&mut g, &[2, 4, 4, 4]),
        random_tensor(&mut g, &[2, 8, 8, 8]),
    ];
    let gw = [0.2, 0.45, 0.35];
    let out = attention_fuse([&a[0], &a[1], &a[2]], &Tensor64::vector(gw.to_vec()), &la.se, ResampleMode::Nearest)
        .unwrap();
    let mut expect = vec![0.0; 2 * 512];
    for i in 0..3 {
        let up = nearest_oracle(a[i].data(), a[i].shape(), &[8, 8, 8]);
        let s = se_oracle(&up, 2, &la.se[i]);
        for (e, v) in expect.iter_mut().zip(s) {
            *e += gw[i] * v;
        }
    }
    assert_eq!(out.shape(), &[2, 8, 8, 8]);
    assert_close(out.data(), &expect, 1e-12);
}

#[test]
fn fuse_is_invariant_under_joint_permutation() {
    let mut g = rng(19);
    let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for trial in 0..6 {
        let la = attention_fixture(100 + trial, [2, 2, 2], 2);
        let a = [
            random_tensor(&mut g, &[2, 2, 2, 2]),
            random_tensor(&mut g, &[2, 4, 2, 4]),
            random_tensor(&mut g, &[2, 4, 4, 4]),
        ];
        let gw = softmax_oracle(&random_tensor(&mut g, &[3]).into_data());
        let base = attention_fuse([&a[0], &a[1], &a[2]], &Tensor64::vector(gw.clone()), &la.se, ResampleMode::Nearest)
            .unwrap();
        for p in perms {
            let se = [la.se[p[0]].clone(), la.se[p[1]].clone(), la.se[p[2]].clone()];
            let gp = Tensor64::vector(p.iter().map(|&i| gw[i]).collect());
            let out = attention_fuse([&a[p[0]], &a[p[1]], &a[p[2]]], &gp, &se, ResampleMode::Nearest).unwrap();
            assert_close(out.data(), base.data(), 1e-12);
        }
    }
}

#[test]
fn full_module_output_lives_on_finest_grid() {
    let la = attention_fixture(20, [8, 4, 2], 4);
    let mut g = rng(20);
    let m = [
        random_tensor(&mut g, &[8, 2, 2, 2]),
        random_tensor(&mut g, &[4, 4, 4, 4]),
        random_tensor(&mut g, &[2, 8, 8, 8]),
    ];
    let mut tape = Tape::new();
    let vars = [0, 1, 2].map(|i| tape.input(m[i].clone()));
    let out = la.apply(&mut tape, vars).unwrap();
    assert_eq!(tape.shape(out), &[4, 8, 8, 8]);

    // Same result as chaining the standalone operations.
    let a = layered_attention(&m[0], &m[1], &m[2], &la).unwrap();
    let gw = group_weights([&a[0], &a[1], &a[2]], &la.group, ResampleMode::Nearest).unwrap();
    let fused = attention_fuse([&a[0], &a[1], &a[2]], &gw, &la.se, ResampleMode::Nearest).unwrap();
    assert_close(tape.value(out).data(), fused.data(), 1e-12);
}

#[test]
fn attention_config_validation() {
    let cfg = LayeredAttentionConfig {
        in_channels: [2, 2, 2],
        width: 6,
        dilations: (1, 2),
        se_ratio: 4,
        group_hidden: 6,
        spatial_rank: 3,
        resample: ResampleMode::Nearest,
    };
    assert!(LayeredAttention::<f64>::new(&mut ParamInit::new(0), &cfg).is_err());
    let mut la = attention_fixture(0, [2, 2, 2], 2);
    la.group.out = la.group.hidden.clone();
    assert!(la.validate().is_err());
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-4;

#[test]
fn residual_block_grad_check() {
    for (seed, c1) in [(0, ResidualC1::Off), (1, ResidualC1::Add)] {
        let mut block = ResidualDenseBlock::<f64>::new(&mut ParamInit::new(seed), 2, 2, 2, 3, c1);
        let x = random_tensor(&mut rng(30 + seed), &[2, 4, 4, 4]);
        let r = grad_check(&mut block, 1e-6, |b, tape| {
            let xv = tape.input(x.clone());
            let y = b.apply(tape, xv)?;
            probe_loss(tape, y, 31)
        })
        .unwrap();
        assert!(r.max_rel_error < GRAD_TOL, "{r:?}");
    }
}

#[test]
fn stacked_convolution_grad_check() {
    let mut module = StackedConvolution::<f64>::new(&mut ParamInit::new(2), 2, 2, 3).unwrap();
    let x = random_tensor(&mut rng(32), &[2, 3, 3, 3]);
    let r = grad_check(&mut module, 1e-6, |m, tape| {
        let xv = tape.input(x.clone());
        let y = m.apply(tape, xv)?;
        probe_loss(tape, y, 33)
    })
    .unwrap();
    assert!(r.max_rel_error < GRAD_TOL, "{r:?}");
}

#[test]
fn se_block_grad_check() {
    let mut p = SeBlock::<f64>::new(&mut ParamInit::new(3), 4, 2).unwrap();
    let x = random_tensor(&mut rng(34), &[4, 3, 3, 3]);
    let r = grad_check(&mut p, 1e-6, |p, tape| {
        let xv = tape.input(x.clone());
        let y = p.apply(tape, xv)?;
        probe_loss(tape, y, 35)
    })
    .unwrap();
    assert!(r.max_rel_error < GRAD_TOL, "{r:?}");
}

#[test]
fn group_weights_grad_check() {
    let mut p = GroupWeights::<f64>::new(&mut ParamInit::new(4), 6, 2);
    let mut g = rng(36);
    let a = [
        random_tensor(&mut g, &[2, 2, 2, 2]),
        random_tensor(&mut g, &[2, 4, 4, 4]),
        random_tensor(&mut g, &[2, 4, 4, 4]),
    ];
    let r = grad_check(&mut p, 1e-6, |p, tape| {
        let av = [0, 1, 2].map(|i| tape.input(a[i].clone()));
        let w = slca_core::blocks::group_weights_on(tape, av, p, ResampleMode::Nearest)?;
        probe_loss(tape, w, 37)
    })
    .unwrap();
    assert!(r.max_rel_error < GRAD_TOL, "{r:?}");
}

#[test]
fn layered_attention_grad_check() {
    for (seed, mode) in [(5, ResampleMode::Nearest), (6, ResampleMode::Trilinear)] {
        let mut la = attention_fixture(seed, [4, 2, 2], 2);
        la.resample = mode;
        let mut g = rng(38 + seed);
        let m = [
            random_tensor(&mut g, &[4, 2, 2, 2]),
            random_tensor(&mut g, &[2, 4, 4, 4]),
            random_tensor(&mut g, &[2, 4, 4, 4]),
        ];
        let r = grad_check(&mut la, 1e-6, |la, tape| {
            let mv = [0, 1, 2].map(|i| tape.input(m[i].clone()));
            let y = la.apply(tape, mv)?;
            probe_loss(tape, y, 39)
        })
        .unwrap();
        assert!(r.max_rel_error < GRAD_TOL, "{mode:?}: {r:?}");
    }
}

// ---------------------------------------------------------------- properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residual_shape_rule(
        d in 1usize..7, h in 1usize..7, w in 1usize..7,
        stride in 1usize..3, seed in 0u64..1000,
    ) {
        let block = ResidualDenseBlock::<f64>::new(&mut ParamInit::new(seed), 1, 2, stride, 3, ResidualC1::Off);
        let x = random_tensor(&mut rng(seed), &[1, d, h, w]);
        let y = residual_dense_block(&x, &block).unwrap();
        prop_assert_eq!(y.shape(), &[2, d.div_ceil(stride), h.div_ceil(stride), w.div_ceil(stride)][..]);
    }

    #[test]
    fn group_weights_stay_in_open_simplex(seed in 0u64..10_000, scale in 0.1f64..4.0) {
        let mut p = GroupWeights::<f64>::new(&mut ParamInit::new(seed), 6, 3);
        p.visit_params_mut(&mut |q| for v in q.value.data_mut() { *v *= scale });
        let mut g = rng(seed);
        let a = [
            random_tensor(&mut g, &[2, 2, 2]),
            random_tensor(&mut g, &[2, 4, 2]),
            random_tensor(&mut g, &[2, 4, 4]),
        ];
        let w = group_weights([&a[0], &a[1], &a[2]], &p, ResampleMode::Trilinear).unwrap();
        let s: f64 = w.data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
