use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{ConditionSet, VelocityModel};
use crate::rng::stream;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::video::{VelocityField, VideoClip};

use super::net::predict_with;
use super::{Checkpoint, NetInputs, ParamStore, ParamVars, VelocityNet};

/// Low-rank update `s·B·A` for one weight, viewed as a `[out, in]` matrix
/// (convolution kernels flatten their trailing dims into `in`).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scale: T,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Random `A`, zero `B`.
    pub fn new(out: usize, inp: usize, rank: usize, scale: T, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > out.min(inp) {
            return Err(Error::invalid(format!(
                "lora rank {rank} must be in 1..={}",
                out.min(inp)
            )));
        }
        let bound = (1.0 / inp as f64).sqrt();
        let a = (0..rank * inp).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Ok(LoraAdapter {
            a: Tensor::new(vec![rank, inp], a)?,
            b: Tensor::zeros(&[out, rank]),
            scale,
        })
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, scale: T) -> Result<Self> {
        let (as_, bs) = (a.shape(), b.shape());
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[1] {
            return Err(Error::ShapeMismatch {
                op: "lora",
                lhs: as_.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let rank = as_[0];
        if rank == 0 || rank > as_[1].min(bs[0]) {
            return Err(Error::invalid(format!(
                "lora rank {rank} out of range for {:?}",
                [bs[0], as_[1]]
            )));
        }
        Ok(LoraAdapter { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `[out, in]` of the matrix this adapter targets.
    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.b.shape()[0], self.a.shape()[1])
    }

    fn check_target(&self, weight: &Tensor<T>) -> Result<()> {
        let shape = weight.shape();
        let (out, inp) = self.matrix_dims();
        if shape.is_empty() || shape[0] != out || shape[1..].iter().product::<usize>() != inp {
            return Err(Error::ShapeMismatch {
                op: "apply_lora",
                lhs: shape.to_vec(),
                rhs: vec![out, inp],
            });
        }
        if !weight.all_finite() {
            return Err(Error::NonFinite { op: "apply_lora" });
        }
        Ok(())
    }

    /// `W + s·B·A` computed outside any graph.
    pub fn effective_weight(&self, weight: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_target(weight)?;
        let (out, inp) = self.matrix_dims();
        let r = self.rank();
        let (a, b) = (self.a.data(), self.b.data());
        let mut data = weight.data().to_vec();
        for o in 0..out {
            for i in 0..inp {
                let mut acc = T::zero();
                for k in 0..r {
                    acc = acc + b[o * r + k] * a[k * inp + i];
                }
                data[o * inp + i] = data[o * inp + i] + self.scale * acc;
            }
        }
        Tensor::new(weight.shape().to_vec(), data)
    }
}

/// Adapters keyed by the base parameter name they modify.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoraSet<T: Scalar = f32> {
    adapters: BTreeMap<String, LoraAdapter<T>>,
}

impl<T: Scalar> LoraSet<T> {
    pub fn new() -> Self {
        LoraSet {
            adapters: BTreeMap::new(),
        }
    }

    /// One rank-`rank` adapter per convolution weight of `net`.
    pub fn for_convs(net: &VelocityNet<T>, rank: usize, scale: T, seed: u64) -> Result<Self> {
        let mut set = LoraSet::new();
        for (idx, name) in net.conv_weight_names().into_iter().enumerate() {
            let w = net.params().get(&name).expect("listed weight exists");
            let out = w.shape()[0];
            let inp = w.numel() / out;
            let mut rng = stream(seed, &[0x4c4f_5241, idx as u64]);
            set.insert(
                name,
                LoraAdapter::new(out, inp, rank.min(out.min(inp)), scale, &mut rng)?,
            );
        }
        Ok(set)
    }

    pub fn insert(&mut self, target: impl Into<String>, adapter: LoraAdapter<T>) {
        self.adapters.insert(target.into(), adapter);
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter<T>> {
        self.adapters.get(target)
    }

    pub fn get_mut(&mut self, target: &str) -> Option<&mut LoraAdapter<T>> {
        self.adapters.get_mut(target)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LoraAdapter<T>)> {
        self.adapters.iter()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Trainable tensors as `lora.<target>.a` / `lora.<target>.b`.
    pub fn to_params(&self) -> ParamStore<T> {
        let mut p = ParamStore::new();
        for (name, ad) in &self.adapters {
            p.insert(format!("lora.{name}.a"), ad.a.clone());
            p.insert(format!("lora.{name}.b"), ad.b.clone());
        }
        p
    }

    /// Write back tensors produced by [`LoraSet::to_params`].
    pub fn load_params(&mut self, p: &ParamStore<T>) -> Result<()> {
        for (name, ad) in self.adapters.iter_mut() {
            for (suffix, slot) in [("a", &mut ad.a), ("b", &mut ad.b)] {
                let key = format!("lora.{name}.{suffix}");
                let t = p.get(&key).ok_or_else(|| Error::invalid(format!("missing `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "lora",
                        lhs: slot.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

impl<T: Scalar> LoraSet<T> {
    /// Copy of `base` with every adapter folded into its target weight.
    pub fn merge_into(&self, base: &VelocityNet<T>) -> Result<VelocityNet<T>> {
        let mut net = base.clone();
        for (name, ad) in self.iter() {
            let w = net
                .params()
                .get(name)
                .ok_or_else(|| Error::invalid(format!("adapter targets unknown weight `{name}`")))?;
            let merged = ad.effective_weight(w)?;
            net.params_mut().insert(name.clone(), merged);
        }
        Ok(net)
    }
}

impl LoraSet<f32> {
    /// Factors plus a `lora.<target>.scale` entry per adapter.
    pub fn save_into(&self, ck: &mut Checkpoint) {
        for (name, ad) in self.iter() {
            ck.push(format!("lora.{name}.a"), ad.a.clone());
            ck.push(format!("lora.{name}.b"), ad.b.clone());
            ck.push(format!("lora.{name}.scale"), Tensor::from_vec(vec![ad.scale]));
        }
    }

    /// Adapters written by [`LoraSet::save_into`], or `None` if there are none.
    pub fn load_from(ck: &Checkpoint) -> Result<Option<Self>> {
        let mut set = LoraSet::new();
        for (key, _) in ck.entries() {
            let Some(name) = key.strip_prefix("lora.").and_then(|k| k.strip_suffix(".scale")) else {
                continue;
            };
            let a = ck.require(&format!("lora.{name}.a"))?.clone();
            let b = ck.require(&format!("lora.{name}.b"))?.clone();
            let scale = ck.require(key)?.item()?;
            set.insert(name, LoraAdapter::from_parts(a, b, scale)?);
        }
        Ok(if set.is_empty() { None } else { Some(set) })
    }
}

/// A base network with adapters applied: forward uses `W + s·B·A` for every
/// adapted weight; the base weights stay frozen.
#[derive(Clone, Debug)]
pub struct LoraView<'a, T: Scalar = f32> {
    base: &'a VelocityNet<T>,
    adapters: &'a LoraSet<T>,
}

impl<'a, T: Scalar> LoraView<'a, T> {
    pub fn new(base: &'a VelocityNet<T>, adapters: &'a LoraSet<T>) -> Result<Self> {
        for (name, ad) in adapters.iter() {
            let w = base
                .params()
                .get(name)
                .ok_or_else(|| Error::invalid(format!("adapter targets unknown weight `{name}`")))?;
            ad.check_target(w)?;
        }
        Ok(LoraView { base, adapters })
    }

    pub fn base(&self) -> &VelocityNet<T> {
        self.base
    }

    pub fn adapters(&self) -> &LoraSet<T> {
        self.adapters
    }

    /// Bind frozen base weights as constants and adapter factors as
    /// parameters (when `trainable`). The returned vars resolve adapted names
    /// to their effective weights; factors are listed as `lora.<target>.a|b`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<(ParamVars, ParamVars)> {
        let mut vars = self.base.bind(g, false);
        let factors = self.adapters.to_params().bind(g, trainable);
        for (name, ad) in self.adapters.iter() {
            let w = vars.get(name)?;
            let a = factors.get(&format!("lora.{name}.a"))?;
            let b = factors.get(&format!("lora.{name}.b"))?;
            let ba = g.matmul(b, a)?;
            let ba = g.mul_scalar(ba, ad.scale)?;
            let shape = g.shape(w).to_vec();
            let ba = g.reshape(ba, &shape)?;
            let eff = g.add(w, ba)?;
            vars.set(name.clone(), eff);
        }
        Ok((vars, factors))
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &ParamVars, inputs: &NetInputs<T>) -> Result<Var> {
        self.base.forward_graph(g, vars, inputs)
    }

    pub fn predict_batch(&self, items: &[(&VideoClip, f32, &ConditionSet)]) -> Result<Vec<VelocityField>> {
        predict_with(items, |g, inputs| {
            let (vars, _) = self.bind(g, false)?;
            self.forward_graph(g, &vars, inputs)
        })
    }
}

impl VelocityModel for LoraView<'_, f32> {
    fn velocity(&self, x_t: &VideoClip, t: f32, cond: &ConditionSet) -> Result<VelocityField> {
        Ok(self.predict_batch(&[(x_t, t, cond)])?.remove(0))
    }

    fn velocity_batch(&self, items: &[(&VideoClip, f32, &ConditionSet)]) -> Result<Vec<VelocityField>> {
        self.predict_batch(items)
    }
}
