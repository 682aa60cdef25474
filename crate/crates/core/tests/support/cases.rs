//! Finite-difference cases for every differentiable op and the composed network.

use std::cell::RefCell;

use osa_detect::net::{Net, NetConfig};
use osa_detect::tensor::{BatchNorm1d, MhsaWeights, Mode, RunningStats, Tape, Tensor, Var};
use osa_detect::ModalityMask;

use super::{grad_check, random_tensor, rng};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
    }
}

fn mhsa_weights(v: &[Var]) -> MhsaWeights {
    MhsaWeights {
        wq: v[1],
        bq: v[2],
        wk: v[3],
        bk: v[4],
        wv: v[5],
        bv: v[6],
        wo: v[7],
        bo: v[8],
    }
}

pub fn op_cases() -> Vec<OpCase> {
    let d: &[usize] = &[8, 8];
    let b: &[usize] = &[8];
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("add_broadcast", &[&[2, 3, 4], &[3, 4]], |t, v| t.add_broadcast(v[0], v[1]).unwrap()),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        case("relu", &[&[4, 5]], |t, v| t.relu(v[0])),
        case("sigmoid", &[&[4, 5]], |t, v| t.sigmoid(v[0])),
        case("dropout", &[&[4, 5]], |t, v| t.dropout(v[0], 0.3, Mode::Train).unwrap()),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1], false).unwrap()),
        case("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true).unwrap()),
        case("softmax", &[&[3, 6]], |t, v| t.softmax(v[0])),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]).unwrap()),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        case("concat", &[&[2, 3, 4], &[2, 2, 4]], |t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        case("narrow", &[&[2, 5, 3]], |t, v| t.narrow(v[0], 1, 1, 3).unwrap()),
        case("pad_end", &[&[2, 3, 2]], |t, v| t.pad_end(v[0], 2, 3).unwrap()),
        case("repeat_interleave", &[&[2, 3, 2]], |t, v| t.repeat_interleave(v[0], 1, 4).unwrap()),
        case("sum", &[&[3, 3]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 3]], |t, v| t.mean(v[0])),
        case("bce_with_logits", &[&[2, 5, 4]], |t, v| {
            let targets = Tensor::from_fn(&[2, 5, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
            t.bce_with_logits(v[0], &targets, &[1.0, 2.0, 0.5, 3.0]).unwrap()
        }),
        case("mean_abs_diff", &[&[2, 6, 3]], |t, v| t.mean_abs_diff(v[0]).unwrap()),
        case("conv1d", &[&[2, 3, 9], &[4, 3, 3], &[4]], |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, 1).unwrap()),
        case("conv1d_strided", &[&[2, 2, 10], &[3, 2, 3], &[3]], |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
        }),
        case("conv1d_transpose", &[&[2, 3, 4], &[3, 2, 2], &[2]], |t, v| {
            t.conv1d_transpose(v[0], v[1], Some(v[2]), 2).unwrap()
        }),
        case("conv1d_transpose_overlap", &[&[1, 2, 5], &[2, 3, 3], &[3]], |t, v| {
            t.conv1d_transpose(v[0], v[1], Some(v[2]), 2).unwrap()
        }),
        case("maxpool1d", &[&[2, 3, 8]], |t, v| t.maxpool1d(v[0], 2).unwrap()),
        case("batchnorm_train", &[&[3, 2, 5], &[2], &[2]], |t, v| {
            let mut bn = BatchNorm1d::new(2);
            t.batchnorm1d(v[0], v[1], v[2], &mut bn, Mode::Train).unwrap()
        }),
        case("batchnorm_eval", &[&[3, 2, 5], &[2], &[2]], |t, v| {
            let mut bn = BatchNorm1d::new(2);
            bn.running = Some(RunningStats {
                mean: vec![0.3, -0.2],
                var: vec![1.5, 0.7],
            });
            t.batchnorm1d(v[0], v[1], v[2], &mut bn, Mode::Eval).unwrap()
        }),
        case("mhsa", &[&[1, 4, 8], d, b, d, b, d, b, d, b], |t, v| {
            let w = mhsa_weights(v);
            t.mhsa(v[0], 2, &w).unwrap()
        }),
    ]
}

/// Relative error of one case at one seed; panics on a zero gradient.
pub fn op_error(c: &OpCase, seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| random_tensor(&mut r, s)).collect();
    let res = grad_check(&inputs, seed + 100, EPS, c.build);
    assert!(res.analytic_norm > 0.0, "{} seed {seed}: zero gradient", c.name);
    res.rel_error
}

pub fn tiny_net() -> NetConfig {
    NetConfig {
        unet_levels: 3,
        base_channels: 2,
        max_channels: 4,
        kernel_size: 3,
        transformer_layers: 1,
        heads: 2,
        model_dim: 4,
        ffn_mult: 2,
        dropout: 0.25,
        out_stride: 2,
        input_len: 32,
        trans_head_init: 1.0,
    }
}

/// Relative error of the composed forward pass for one seed, with respect
/// to every parameter and the input.
pub fn composed_net_error(seed: u64, mode: Mode, mask: ModalityMask) -> f64 {
    let cfg = tiny_net();
    let net = Net::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed + 50);
    // jitter every parameter: zero-initialized biases put dead channels exactly on the ReLU hinge
    let mut inputs: Vec<Tensor<f64>> = net
        .params
        .ids()
        .map(|id| {
            let p: Tensor<f64> = net.params.get(id).cast();
            let noise = random_tensor(&mut r, p.shape());
            let data = p.data().iter().zip(noise.data()).map(|(a, b)| a + 0.1 * b).collect();
            Tensor::new(p.shape().to_vec(), data).unwrap()
        })
        .collect();
    inputs.push(random_tensor(&mut r, &[2, 3, cfg.input_len]));
    let n = inputs.len();
    let net = RefCell::new(net);
    let res = grad_check(&inputs, seed + 500, 1e-5, |tape, vars| {
        let mut net = net.borrow_mut();
        net.forward(tape, &vars[..n - 1], vars[n - 1], mask, mode).unwrap().logits
    });
    assert!(res.analytic_norm > 0.0);
    res.rel_error
}
