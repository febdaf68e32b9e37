//! Finite-difference gradient checking shared by the gradcheck and acceptance targets.
#![allow(dead_code)]

use lumaflow_core::nn::{NetInputs, ParamVars};
use lumaflow_core::{Graph, NetConfig, Result, Scalar, Tensor, Var, VelocityNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Graph pieces checked one at a time, plus the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    DivScalar,
    MatMul,
    Conv3x3,
    ConvStride2,
    Conv1x1,
    Sum,
    Mean,
    Mse,
    Silu,
    GroupNorm,
    Concat,
    RepeatInterleave,
    ChannelBias,
    SampleBias,
    TemporalConv,
    Reshape,
    Net,
}

pub const OPS: [Probe; 22] = [
    Probe::Add,
    Probe::Sub,
    Probe::Mul,
    Probe::Div,
    Probe::AddScalar,
    Probe::MulScalar,
    Probe::DivScalar,
    Probe::MatMul,
    Probe::Conv3x3,
    Probe::ConvStride2,
    Probe::Conv1x1,
    Probe::Sum,
    Probe::Mean,
    Probe::Mse,
    Probe::Silu,
    Probe::GroupNorm,
    Probe::Concat,
    Probe::RepeatInterleave,
    Probe::ChannelBias,
    Probe::SampleBias,
    Probe::TemporalConv,
    Probe::Reshape,
];

const NET_FRAMES: usize = 2;
const NET_SIZE: usize = 8;
const NET_INPUTS: usize = 3;

pub fn net_config() -> NetConfig {
    NetConfig {
        hidden: 8,
        depth: 1,
        groups: 2,
        time_dim: 8,
        temporal_kernel: 3,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Network with every parameter (including the zero-initialised output
/// layer) randomised so that no gradient path is trivially zero.
#[allow(dead_code)]
pub fn random_net(seed: u64) -> VelocityNet<f64> {
    let mut net = VelocityNet::<f32>::new(net_config(), seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let t = net.params_mut().get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    net
}

impl Probe {
    pub fn name(self) -> String {
        format!("{self:?}")
    }

    /// Inputs for one seed. Every input is differentiated.
    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491).wrapping_add(self as u64));
        let r = &mut rng;
        let img = [2, 4, 5, 5];
        match self {
            Probe::Add | Probe::Sub | Probe::Mul | Probe::Mse => {
                vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)]
            }
            // denominators kept away from zero
            Probe::Div => vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], 0.5, 1.5)],
            Probe::AddScalar | Probe::MulScalar | Probe::DivScalar | Probe::Sum | Probe::Mean | Probe::Silu => {
                vec![random(r, &[2, 3, 4], -2.0, 2.0)]
            }
            Probe::MatMul => vec![random(r, &[3, 5], -1.0, 1.0), random(r, &[5, 4], -1.0, 1.0)],
            Probe::Conv3x3 => vec![random(r, &img, -1.0, 1.0), random(r, &[3, 4, 3, 3], -0.5, 0.5)],
            Probe::ConvStride2 => vec![random(r, &img, -1.0, 1.0), random(r, &[3, 4, 3, 3], -0.5, 0.5)],
            Probe::Conv1x1 => vec![random(r, &img, -1.0, 1.0), random(r, &[3, 4, 1, 1], -0.5, 0.5)],
            Probe::GroupNorm => vec![random(r, &img, -1.0, 1.0)],
            Probe::Concat => vec![random(r, &[2, 1, 3, 3], -1.0, 1.0), random(r, &[2, 3, 3, 3], -1.0, 1.0)],
            Probe::RepeatInterleave => vec![random(r, &[2, 3, 2, 2], -1.0, 1.0)],
            Probe::ChannelBias => vec![random(r, &img, -1.0, 1.0), random(r, &[4], -1.0, 1.0)],
            Probe::SampleBias => vec![random(r, &img, -1.0, 1.0), random(r, &[2, 4], -1.0, 1.0)],
            Probe::TemporalConv => vec![random(r, &[6, 3, 2, 2], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0)],
            Probe::Reshape => vec![random(r, &[2, 6], -1.0, 1.0)],
            Probe::Net => {
                let shape = [NET_FRAMES, 3, NET_SIZE, NET_SIZE];
                let mut v = vec![
                    random(r, &shape, -1.0, 1.0),
                    random(r, &shape, 0.0, 1.0),
                    random(r, &[1, 3, NET_SIZE, NET_SIZE], 0.0, 1.0),
                ];
                v.extend(random_net(seed).params().iter().map(|(_, t)| t.clone()));
                v
            }
        }
    }

    pub fn build<T: Scalar>(self, g: &mut Graph<T>, x: &[Var], seed: u64) -> Result<Var> {
        let k = T::lit(1.7);
        match self {
            Probe::Add => g.add(x[0], x[1]),
            Probe::Sub => g.sub(x[0], x[1]),
            Probe::Mul => g.mul(x[0], x[1]),
            Probe::Div => g.div(x[0], x[1]),
            Probe::AddScalar => g.add_scalar(x[0], k),
            Probe::MulScalar => g.mul_scalar(x[0], k),
            Probe::DivScalar => g.div_scalar(x[0], k),
            Probe::MatMul => g.matmul(x[0], x[1]),
            Probe::Conv3x3 => g.conv2d(x[0], x[1], 1, 1),
            Probe::ConvStride2 => g.conv2d(x[0], x[1], 2, 0),
            Probe::Conv1x1 => g.conv2d(x[0], x[1], 1, 0),
            Probe::Sum => g.sum(x[0]),
            Probe::Mean => g.mean(x[0]),
            Probe::Mse => g.mse(x[0], x[1]),
            Probe::Silu => g.silu(x[0]),
            Probe::GroupNorm => g.group_norm(x[0], 2),
            Probe::Concat => g.concat_channels(&[x[0], x[1], x[0]]),
            Probe::RepeatInterleave => g.repeat_interleave(x[0], 3),
            Probe::ChannelBias | Probe::SampleBias => g.channel_bias(x[0], x[1]),
            Probe::TemporalConv => g.temporal_conv(x[0], x[1], 3),
            Probe::Reshape => g.reshape(x[0], &[3, 4]),
            Probe::Net => {
                let net = random_net(seed).cast::<T>();
                let mut vars = ParamVars::default();
                for ((name, _), &v) in net.params().iter().zip(&x[NET_INPUTS..]) {
                    vars.set(name.clone(), v);
                }
                let inputs = NetInputs {
                    x_t: x[0],
                    structural: x[1],
                    reference: x[2],
                    t: vec![T::lit(0.37)],
                    frames: NET_FRAMES,
                };
                net.forward_graph(g, &vars, &inputs)
            }
        }
    }
}

/// Largest per-input relative error `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`
/// of the scalar `sum(probe(x) ⊙ r)` for a random fixed `r`.
///
/// The analytic gradient is taken in precision `T`; the central-difference
/// reference is always evaluated in f64 at the same (T-rounded) point.
pub fn gradcheck<T: Scalar>(probe: Probe, seed: u64) -> f64 {
    let inputs: Vec<Tensor<f64>> = probe.inputs(seed).iter().map(|t| t.cast::<T>().cast::<f64>()).collect();
    let out_shape = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = probe.build(&mut g, &vars, seed).unwrap();
        g.shape(y).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = random(&mut rng, &out_shape, -1.0, 1.0).cast::<T>().cast::<f64>();

    let loss = |x: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
        let y = probe.build(&mut g, &vars, seed).unwrap();
        g.data(y).iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast::<T>())).collect();
    let y = probe.build(&mut g, &vars, seed).unwrap();
    let w = g.constant(weights.cast::<T>());
    let yw = g.mul(y, w).unwrap();
    let l = g.sum(yw).unwrap();
    g.backward(l).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut x = inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(v)
            .expect("input gradient")
            .iter()
            .map(|a| a.to_f64_lossy())
            .collect();
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for j in 0..x[i].numel() {
            let orig = x[i].data()[j];
            x[i].data_mut()[j] = orig + h;
            let up = loss(&x);
            x[i].data_mut()[j] = orig - h;
            let down = loss(&x);
            x[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
        worst = worst.max(rel);
    }
    worst
}
