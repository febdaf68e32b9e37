use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ConditionSet, VelocityModel};
use crate::rng::stream;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::video::{VelocityField, VideoClip, CHANNELS};

use super::Checkpoint;

/// Architecture of a [`VelocityNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    /// Number of residual blocks.
    pub depth: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub temporal_kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 32,
            depth: 4,
            groups: 8,
            time_dim: 32,
            temporal_kernel: 3,
        }
    }
}

impl NetConfig {
    pub const INPUT_CHANNELS: usize = 3 * CHANNELS;

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.groups == 0 || !self.hidden.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "hidden width {} must be a positive multiple of groups {}",
                self.hidden, self.groups
            )));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "time_dim must be positive and even, got {}",
                self.time_dim
            )));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }

    fn to_tensor(self) -> Tensor<f32> {
        Tensor::from_vec(
            [
                self.hidden,
                self.depth,
                self.groups,
                self.time_dim,
                self.temporal_kernel,
            ]
            .iter()
            .map(|&v| v as f32)
            .collect(),
        )
    }

    fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let d = t.data();
        if d.len() != 5 || d.iter().any(|v| !(*v >= 0.0 && v.fract() == 0.0)) {
            return Err(Error::format("checkpoint", "malformed net.config"));
        }
        let cfg = NetConfig {
            hidden: d[0] as usize,
            depth: d[1] as usize,
            groups: d[2] as usize,
            time_dim: d[3] as usize,
            temporal_kernel: d[4] as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sinusoidal features of a unit timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
}

impl TimeEmbedding {
    const SCALE: f64 = 1000.0;
    const MAX_PERIOD: f64 = 10_000.0;

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let half = self.dim / 2;
        let mut out = Vec::with_capacity(self.dim);
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(Self::MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
            .collect();
        out.extend(freqs.iter().map(|f| (t * Self::SCALE * f).sin()));
        out.extend(freqs.iter().map(|f| (t * Self::SCALE * f).cos()));
        out
    }
}

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Record every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Batched network inputs already recorded in a graph.
///
/// `x_t` and `structural` are `[B*T, 3, H, W]`, `reference` is `[B, 3, H, W]`
/// and `t` holds one timestep per clip.
#[derive(Clone, Debug)]
pub struct NetInputs<T> {
    pub x_t: Var,
    pub structural: Var,
    pub reference: Var,
    pub t: Vec<T>,
    pub frames: usize,
}

/// Conditional velocity network: per-frame convolutional encoder over the
/// channel concatenation `[x_t, structural frame, reference image]`, residual
/// blocks, one depthwise temporal mixing layer and a zero-initialised output
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet<T: Scalar = f32> {
    config: NetConfig,
    params: ParamStore<T>,
}

fn kaiming_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Scalar> VelocityNet<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x4e45_5400]);
        let h = config.hidden;
        let mut p = ParamStore::new();
        let cin = NetConfig::INPUT_CHANNELS;
        p.insert("in.w", kaiming_uniform(&mut rng, &[h, cin, 3, 3], cin * 9));
        p.insert("in.b", Tensor::zeros(&[h]));
        p.insert(
            "time.w1",
            kaiming_uniform(&mut rng, &[config.time_dim, h], config.time_dim),
        );
        p.insert("time.b1", Tensor::zeros(&[h]));
        p.insert("time.w2", kaiming_uniform(&mut rng, &[h, h], h));
        p.insert("time.b2", Tensor::zeros(&[h]));
        for i in 0..config.depth {
            for conv in ["conv1", "conv2"] {
                p.insert(
                    format!("block{i}.{conv}.w"),
                    kaiming_uniform(&mut rng, &[h, h, 3, 3], h * 9),
                );
                p.insert(format!("block{i}.{conv}.b"), Tensor::zeros(&[h]));
            }
        }
        p.insert(
            "temporal.w",
            kaiming_uniform(&mut rng, &[h, config.temporal_kernel], config.temporal_kernel),
        );
        p.insert("out.w", Tensor::zeros(&[CHANNELS, h, 3, 3]));
        p.insert("out.b", Tensor::zeros(&[CHANNELS]));
        Ok(VelocityNet { config, params: p })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Names of the convolution weights (candidates for low-rank adapters).
    pub fn conv_weight_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, t)| n.ends_with(".w") && t.shape().len() == 4)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> VelocityNet<U> {
        VelocityNet {
            config: self.config,
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        self.params.bind(g, trainable)
    }

    /// Record the forward pass; returns a `[B*T, 3, H, W]` velocity.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &ParamVars, inputs: &NetInputs<T>) -> Result<Var> {
        let cfg = &self.config;
        let frames = inputs.frames;
        let xs = g.shape(inputs.x_t).to_vec();
        if xs.len() != 4 || xs[1] != CHANNELS || frames == 0 || !xs[0].is_multiple_of(frames) {
            return Err(Error::InvalidShape {
                op: "velocity_net",
                detail: format!("x_t must be [B*{frames}, 3, H, W], got {xs:?}"),
            });
        }
        let clips = xs[0] / frames;
        if g.shape(inputs.structural) != xs.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "velocity_net",
                lhs: xs,
                rhs: g.shape(inputs.structural).to_vec(),
            });
        }
        let expected_ref = [clips, CHANNELS, xs[2], xs[3]];
        if g.shape(inputs.reference) != expected_ref {
            return Err(Error::ShapeMismatch {
                op: "velocity_net",
                lhs: expected_ref.to_vec(),
                rhs: g.shape(inputs.reference).to_vec(),
            });
        }
        if inputs.t.len() != clips {
            return Err(Error::invalid(format!(
                "expected {clips} timesteps, got {}",
                inputs.t.len()
            )));
        }
        if let Some(t) = inputs.t.iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
            return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
        }

        let reference = g.repeat_interleave(inputs.reference, frames)?;
        let x = g.concat_channels(&[inputs.x_t, inputs.structural, reference])?;
        let h = g.conv2d(x, p.get("in.w")?, 1, 1)?;
        let mut h = g.channel_bias(h, p.get("in.b")?)?;

        let emb = TimeEmbedding { dim: cfg.time_dim };
        let temb: Vec<T> = inputs
            .t
            .iter()
            .flat_map(|t| emb.embed(t.to_f64_lossy()))
            .map(T::lit)
            .collect();
        let temb = g.constant(Tensor::new(vec![clips, cfg.time_dim], temb)?);
        let e = g.matmul(temb, p.get("time.w1")?)?;
        let e = g.channel_bias(e, p.get("time.b1")?)?;
        let e = g.silu(e)?;
        let e = g.matmul(e, p.get("time.w2")?)?;
        let e = g.channel_bias(e, p.get("time.b2")?)?;
        let e = g.repeat_interleave(e, frames)?;
        h = g.channel_bias(h, e)?;

        for i in 0..cfg.depth {
            let mut r = h;
            for conv in ["conv1", "conv2"] {
                r = g.group_norm(r, cfg.groups)?;
                r = g.silu(r)?;
                r = g.conv2d(r, p.get(&format!("block{i}.{conv}.w"))?, 1, 1)?;
                r = g.channel_bias(r, p.get(&format!("block{i}.{conv}.b"))?)?;
            }
            h = g.add(h, r)?;
        }
        let mixed = g.temporal_conv(h, p.get("temporal.w")?, frames)?;
        h = g.add(h, mixed)?;

        let h = g.silu(h)?;
        let out = g.conv2d(h, p.get("out.w")?, 1, 1)?;
        g.channel_bias(out, p.get("out.b")?)
    }

    /// Batched inference for clips sharing `frames`.
    pub fn predict_batch(&self, items: &[(&VideoClip, f32, &ConditionSet)]) -> Result<Vec<VelocityField>> {
        predict_with(items, |g, inputs| {
            let p = self.bind(g, false);
            self.forward_graph(g, &p, inputs)
        })
    }
}

/// Shared batching logic for inference through any graph-level forward.
pub(crate) fn predict_with<T: Scalar>(
    items: &[(&VideoClip, f32, &ConditionSet)],
    forward: impl FnOnce(&mut Graph<T>, &NetInputs<T>) -> Result<Var>,
) -> Result<Vec<VelocityField>> {
    let Some(&(first, _, _)) = items.first() else {
        return Ok(Vec::new());
    };
    let frames = first.frames();
    let mut xt = Vec::new();
    let mut st = Vec::new();
    let mut rf = Vec::new();
    let mut ts = Vec::new();
    for (x, t, cond) in items {
        x.ensure_same_shape("velocity_net", first)?;
        cond.validate_against(x)?;
        xt.extend(x.data().iter().map(|&v| T::lit(v as f64)));
        st.extend(cond.structural.data().iter().map(|&v| T::lit(v as f64)));
        rf.extend(cond.reference.data().iter().map(|&v| T::lit(v as f64)));
        ts.push(T::lit(*t as f64));
    }
    let [_, c, h, w] = first.shape();
    let n = items.len();
    let mut g = Graph::<T>::new();
    let inputs = NetInputs {
        x_t: g.constant(Tensor::new(vec![n * frames, c, h, w], xt)?),
        structural: g.constant(Tensor::new(vec![n * frames, c, h, w], st)?),
        reference: g.constant(Tensor::new(vec![n, c, h, w], rf)?),
        t: ts,
        frames,
    };
    let out = forward(&mut g, &inputs)?;
    let per = frames * c * h * w;
    g.data(out)
        .chunks(per)
        .map(|chunk| {
            let data = chunk.iter().map(|v| v.to_f64_lossy() as f32).collect();
            Ok(VelocityField::from_clip(VideoClip::new(frames, h, w, data)?))
        })
        .collect()
}

impl VelocityModel for VelocityNet<f32> {
    fn velocity(&self, x_t: &VideoClip, t: f32, cond: &ConditionSet) -> Result<VelocityField> {
        Ok(self.predict_batch(&[(x_t, t, cond)])?.remove(0))
    }

    fn velocity_batch(&self, items: &[(&VideoClip, f32, &ConditionSet)]) -> Result<Vec<VelocityField>> {
        self.predict_batch(items)
    }
}

impl VelocityNet<f32> {
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push("net.config", self.config.to_tensor());
        for (name, t) in self.params.iter() {
            ckpt.push(format!("param.{name}"), t.clone());
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.save_into(&mut c);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = NetConfig::from_tensor(ckpt.require("net.config")?)?;
        let mut net = VelocityNet::new(config, 0)?;
        let names: Vec<(String, Vec<usize>)> = net
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let t = ckpt.require(&format!("param.{name}"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::format("checkpoint", format!("parameter `{name}` is not finite")));
            }
            net.params.insert(name, t.clone());
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Image;

    fn small() -> NetConfig {
        NetConfig {
            hidden: 8,
            depth: 1,
            groups: 2,
            time_dim: 8,
            temporal_kernel: 3,
        }
    }

    fn clip(frames: usize, h: usize, w: usize, phase: f32) -> VideoClip {
        let data = (0..frames * 3 * h * w)
            .map(|i| ((i as f32 * 0.37 + phase).sin() + 1.0) * 0.5)
            .collect();
        VideoClip::new(frames, h, w, data).unwrap()
    }

    fn cond(frames: usize, h: usize, w: usize) -> ConditionSet {
        ConditionSet::new(clip(frames, h, w, 1.0), Image::filled(h, w, 0.4)).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let net = VelocityNet::<f32>::new(small(), 1).unwrap();
        let v = net.velocity(&clip(2, 6, 6, 0.0), 0.3, &cond(2, 6, 6)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shape_follows_input() {
        let net = VelocityNet::<f32>::new(NetConfig::default(), 1).unwrap();
        let v = net.velocity(&clip(8, 32, 32, 0.0), 0.5, &cond(8, 32, 32)).unwrap();
        assert_eq!(v.shape(), [8, 3, 32, 32]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = VelocityNet::<f32>::new(small(), 1).unwrap();
        assert!(net.velocity(&clip(2, 6, 6, 0.0), 1.5, &cond(2, 6, 6)).is_err());
        assert!(net.velocity(&clip(2, 6, 6, 0.0), 0.5, &cond(3, 6, 6)).is_err());
    }

    #[test]
    fn time_embedding_distinguishes_endpoints() {
        let e = TimeEmbedding { dim: 32 };
        let (a, b) = (e.embed(0.0), e.embed(1.0));
        assert!(a.iter().chain(&b).all(|v| v.is_finite()));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
        let (c, d) = (e.embed(0.5), e.embed(0.5 + 1e-9));
        assert!(c.iter().zip(&d).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn batched_prediction_matches_single() {
        let mut net = VelocityNet::<f32>::new(small(), 3).unwrap();
        // give the output layer weights so the check is not trivially zero
        let w = net.params_mut().get_mut("out.w").unwrap();
        w.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f32 * 0.1).sin() * 0.1);
        let (x1, x2) = (clip(2, 6, 6, 0.0), clip(2, 6, 6, 2.0));
        let c = cond(2, 6, 6);
        let batch = net.predict_batch(&[(&x1, 0.2, &c), (&x2, 0.9, &c)]).unwrap();
        assert_eq!(batch[0], net.velocity(&x1, 0.2, &c).unwrap());
        assert_eq!(batch[1], net.velocity(&x2, 0.9, &c).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = VelocityNet::<f32>::new(small(), 5).unwrap();
        let ck = net.to_checkpoint();
        let back = VelocityNet::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, net);
        let mut broken = Checkpoint::new();
        broken.push("net.config", small().to_tensor());
        assert!(VelocityNet::from_checkpoint(&broken).is_err());
    }
}
