//! Self-supervised training: flow matching on perturbed conditions plus the
//! dual-branch consistency term, with Adam, checkpointing and resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::interpolate;
use crate::nn::{
    adam_step, AdamConfig, AdamState, Checkpoint, LoraSet, LoraView, NetConfig, NetInputs, ParamStore, ParamVars,
    VelocityNet,
};
use crate::perturb::{gaussian_blur, perturb_high, perturb_low, PerturbConfig};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::video::{Image, VideoClip};

/// Loss above which a run is considered diverged.
pub const DIVERGENCE_LIMIT: f32 = 1e4;

pub const LOSS_CSV_HEADER: &str = "step,loss_fm,loss_consis,loss_total,grad_norm";

const STEP_STREAM: u64 = 0x5354_4550;
const FM_STREAM: u64 = 1;
const CONSIS_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Weight of the consistency term.
    pub alpha: f32,
    /// Evaluate the consistency term every this many steps.
    pub consistency_every: usize,
    /// Blur applied to the perturbed reference in the second consistency branch.
    pub gaussian_ref_sigma: f32,
    /// Constant flow-matching weight.
    pub lambda: f32,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic writes).
    pub checkpoint_every: usize,
    /// Freeze the base network and train low-rank adapters only.
    pub freeze_base: bool,
    pub lora_rank: usize,
    pub lora_scale: f32,
    pub perturb: PerturbConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 8,
            total_steps: 2000,
            alpha: 0.1,
            consistency_every: 1,
            gaussian_ref_sigma: 2.0,
            lambda: 1.0,
            seed: 0,
            checkpoint_every: 0,
            freeze_base: false,
            lora_rank: 4,
            lora_scale: 1.0,
            perturb: PerturbConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.consistency_every == 0 {
            return Err(Error::invalid("consistency_every must be at least 1"));
        }
        if !(self.gaussian_ref_sigma >= 0.0) {
            return Err(Error::invalid("gaussian_ref_sigma must be non-negative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.freeze_base && self.lora_rank == 0 {
            return Err(Error::invalid("lora_rank must be at least 1 when the base is frozen"));
        }
        self.perturb.validate()?;
        self.net.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub loss_fm: f32,
    pub loss_consis: f32,
    pub loss_total: f32,
    pub grad_norm: f32,
}

impl TrainStepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss_fm, self.loss_consis, self.loss_total, self.grad_norm
        )
    }
}

// ---------------------------------------------------------------------------
// per-sample draws

/// Inputs of one flow-matching evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FmSample {
    pub x0: VideoClip,
    pub eps: VideoClip,
    pub t: f32,
    pub structural: VideoClip,
    pub reference: Image,
}

/// The two branches of one consistency evaluation. They share `t` and `eps`;
/// branch one reconstructs the source from the colour-perturbed structure,
/// branch two reconstructs the perturbed video from the source structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencySample {
    pub src: FmSample,
    pub aug: FmSample,
}

fn draw_noise(like: &VideoClip, rng: &mut impl Rng) -> VideoClip {
    let mut eps = VideoClip::zeros(like.frames(), like.height(), like.width());
    eps.data_mut().iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
    eps
}

/// `t ~ U[0,1)`, `eps ~ N(0,1)`, structure from the colour-perturbed video
/// and reference from the structure-perturbed first frame.
pub fn draw_fm_sample(video: &VideoClip, perturb: &PerturbConfig, seed: u64) -> Result<FmSample> {
    let mut rng = stream(seed, &[0]);
    let t: f32 = rng.gen();
    let eps = draw_noise(video, &mut rng);
    let structural = perturb_low(video, perturb, derive_seed(seed, &[1, perturb.seed]));
    let reference = perturb_high(&video.first_frame(), perturb, derive_seed(seed, &[2, perturb.seed]))?;
    Ok(FmSample {
        x0: video.clone(),
        eps,
        t,
        structural,
        reference,
    })
}

pub fn draw_consistency_sample(
    video: &VideoClip,
    perturb: &PerturbConfig,
    ref_sigma: f32,
    seed: u64,
) -> Result<ConsistencySample> {
    let mut rng = stream(seed, &[0]);
    let t: f32 = rng.gen();
    let eps = draw_noise(video, &mut rng);
    let x_aug = perturb_low(video, perturb, derive_seed(seed, &[1, perturb.seed]));
    consistency_sample_from(video, &x_aug, &eps, t, ref_sigma)
}

/// Assemble both consistency branches from explicit draws.
pub fn consistency_sample_from(
    video: &VideoClip,
    x_aug: &VideoClip,
    eps: &VideoClip,
    t: f32,
    ref_sigma: f32,
) -> Result<ConsistencySample> {
    video.ensure_same_shape("consistency", x_aug)?;
    Ok(ConsistencySample {
        src: FmSample {
            x0: video.clone(),
            eps: eps.clone(),
            t,
            structural: x_aug.clone(),
            reference: video.first_frame(),
        },
        aug: FmSample {
            x0: x_aug.clone(),
            eps: eps.clone(),
            t,
            structural: video.clone(),
            reference: gaussian_blur(&x_aug.first_frame(), ref_sigma)?,
        },
    })
}

// ---------------------------------------------------------------------------
// batched graph construction

/// A stacked batch of [`FmSample`]s ready to be recorded in a graph.
#[derive(Clone, Debug)]
pub struct FmBatch<T: Scalar> {
    pub x_t: Tensor<T>,
    pub structural: Tensor<T>,
    pub reference: Tensor<T>,
    /// `eps - x0`.
    pub target: Tensor<T>,
    pub t: Vec<T>,
    pub frames: usize,
}

fn stack<'a, T: Scalar>(parts: impl Iterator<Item = &'a [f32]>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let data: Vec<T> = parts.flat_map(|p| p.iter().map(|&v| T::lit(v as f64))).collect();
    Tensor::new(shape, data)
}

impl<T: Scalar> FmBatch<T> {
    pub fn new(samples: &[&FmSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let [frames, c, h, w] = first.x0.shape();
        let mut xs = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            s.x0.ensure_same_shape("fm_batch", &first.x0)?;
            s.structural.ensure_same_shape("fm_batch", &s.x0)?;
            if s.reference.height() != h || s.reference.width() != w {
                return Err(Error::ShapeMismatch {
                    op: "fm_batch",
                    lhs: vec![h, w],
                    rhs: vec![s.reference.height(), s.reference.width()],
                });
            }
            xs.push(interpolate(&s.x0, &s.eps, s.t)?.x_t);
            targets.push(s.eps.zip_map(&s.x0, |e, a| e - a)?);
        }
        let n = samples.len();
        let clip_shape = vec![n * frames, c, h, w];
        Ok(FmBatch {
            x_t: stack(xs.iter().map(|x| x.data()), clip_shape.clone())?,
            structural: stack(samples.iter().map(|s| s.structural.data()), clip_shape.clone())?,
            reference: stack(samples.iter().map(|s| s.reference.data()), vec![n, c, h, w])?,
            target: stack(targets.iter().map(|x| x.data()), clip_shape)?,
            t: samples.iter().map(|s| T::lit(s.t as f64)).collect(),
            frames,
        })
    }

    fn record(&self, g: &mut Graph<T>) -> (NetInputs<T>, Var) {
        let inputs = NetInputs {
            x_t: g.constant(self.x_t.clone()),
            structural: g.constant(self.structural.clone()),
            reference: g.constant(self.reference.clone()),
            t: self.t.clone(),
            frames: self.frames,
        };
        (inputs, g.constant(self.target.clone()))
    }
}

/// `lambda · mse(net(x_t, t, cond), eps - x0)`.
pub fn fm_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &VelocityNet<T>,
    vars: &ParamVars,
    batch: &FmBatch<T>,
    lambda: T,
) -> Result<Var> {
    let (inputs, target) = batch.record(g);
    let out = net.forward_graph(g, vars, &inputs)?;
    let loss = g.mse(out, target)?;
    g.mul_scalar(loss, lambda)
}

/// Residual velocity `(eps - x0) - net(...)` of one branch.
fn residual_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &VelocityNet<T>,
    vars: &ParamVars,
    batch: &FmBatch<T>,
) -> Result<Var> {
    let (inputs, target) = batch.record(g);
    let out = net.forward_graph(g, vars, &inputs)?;
    g.sub(target, out)
}

/// `mse(V_src_res, sg(V_aug_res))`. Each branch has its own parameter
/// bindings so callers can observe where gradients flow; training passes
/// the same bindings twice. `stop_gradient = false` drops the detach.
pub fn consistency_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &VelocityNet<T>,
    src_vars: &ParamVars,
    aug_vars: &ParamVars,
    src: &FmBatch<T>,
    aug: &FmBatch<T>,
    stop_gradient: bool,
) -> Result<Var> {
    let v_src = residual_graph(g, net, src_vars, src)?;
    let v_aug = residual_graph(g, net, aug_vars, aug)?;
    let v_aug = if stop_gradient { g.detach(v_aug) } else { v_aug };
    g.mse(v_src, v_aug)
}

/// Both consistency batches for a set of samples.
pub fn consistency_batches<T: Scalar>(samples: &[ConsistencySample]) -> Result<(FmBatch<T>, FmBatch<T>)> {
    let src: Vec<&FmSample> = samples.iter().map(|s| &s.src).collect();
    let aug: Vec<&FmSample> = samples.iter().map(|s| &s.aug).collect();
    Ok((FmBatch::new(&src)?, FmBatch::new(&aug)?))
}

// ---------------------------------------------------------------------------
// the loop

/// Training state: network, optional adapters, optimizer and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: VelocityNet<f32>,
    lora: Option<LoraSet<f32>>,
    adam: AdamState<f32>,
    step: usize,
}

impl Trainer {
    /// Fresh network initialised from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = VelocityNet::new(cfg.net, derive_seed(cfg.seed, &[0x4e45_54]))?;
        Self::with_net(cfg, net)
    }

    /// Train starting from an existing network. With `freeze_base` the
    /// network stays fixed and rank-`lora_rank` adapters are trained.
    pub fn with_net(cfg: TrainConfig, net: VelocityNet<f32>) -> Result<Self> {
        cfg.validate()?;
        let lora = if cfg.freeze_base {
            Some(LoraSet::for_convs(
                &net,
                cfg.lora_rank,
                cfg.lora_scale,
                derive_seed(cfg.seed, &[0x4c4f_5241]),
            )?)
        } else {
            None
        };
        Ok(Trainer {
            cfg,
            net,
            lora,
            adam: AdamState::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &VelocityNet<f32> {
        &self.net
    }

    pub fn lora(&self) -> Option<&LoraSet<f32>> {
        self.lora.as_ref()
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Result<(ParamVars, ParamVars)> {
        match &self.lora {
            Some(set) => LoraView::new(&self.net, set)?.bind(g, trainable),
            None => {
                let vars = self.net.bind(g, trainable);
                Ok((vars.clone(), vars))
            }
        }
    }

    fn batch_indices(&self, len: usize) -> Vec<usize> {
        let mut rng = stream(self.cfg.seed, &[STEP_STREAM, self.step as u64]);
        (0..self.cfg.batch_size).map(|_| rng.gen_range(0..len)).collect()
    }

    fn sample_seed(&self, purpose: u64, j: usize) -> u64 {
        derive_seed(self.cfg.seed, &[STEP_STREAM, self.step as u64, purpose, j as u64])
    }

    /// One optimisation step on a batch drawn from `dataset`.
    pub fn train_step(&mut self, dataset: &[VideoClip]) -> Result<TrainStepReport> {
        if dataset.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let idx = self.batch_indices(dataset.len());
        let fm_samples = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| draw_fm_sample(&dataset[i], &self.cfg.perturb, self.sample_seed(FM_STREAM, j)))
            .collect::<Result<Vec<_>>>()?;
        let fm_batch = FmBatch::<f32>::new(&fm_samples.iter().collect::<Vec<_>>())?;
        let with_consis = self.step.is_multiple_of(self.cfg.consistency_every);
        let consis = if with_consis {
            let samples = idx
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    draw_consistency_sample(
                        &dataset[i],
                        &self.cfg.perturb,
                        self.cfg.gaussian_ref_sigma,
                        self.sample_seed(CONSIS_STREAM, j),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Some(consistency_batches::<f32>(&samples)?)
        } else {
            None
        };

        let mut g = Graph::<f32>::new();
        let (vars, trainable) = self.bind(&mut g, true)?;
        let loss_fm = fm_loss_graph(&mut g, &self.net, &vars, &fm_batch, self.cfg.lambda)?;
        let fm_value = g.value(loss_fm).item()?;
        let mut consis_value = 0.0f32;
        let mut total = loss_fm;
        if let Some((src, aug)) = &consis {
            if self.cfg.alpha > 0.0 {
                let lc = consistency_loss_graph(&mut g, &self.net, &vars, &vars, src, aug, true)?;
                consis_value = g.value(lc).item()?;
                let weighted = g.mul_scalar(lc, self.cfg.alpha)?;
                total = g.add(loss_fm, weighted)?;
            } else {
                // reported but kept out of the gradient graph entirely
                let mut probe = Graph::<f32>::new();
                let (pv, _) = self.bind(&mut probe, false)?;
                let lc = consistency_loss_graph(&mut probe, &self.net, &pv, &pv, src, aug, true)?;
                consis_value = probe.value(lc).item()?;
            }
        }
        let total_value = g.value(total).item()?;
        if !total_value.is_finite() || total_value > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss_fm = {fm_value}, loss_consis = {consis_value}, total = {total_value}"),
            });
        }
        g.backward(total)?;
        let grads = trainable.grads(&g);
        let grad_norm = grads
            .values()
            .flat_map(|v| v.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt() as f32;
        drop(g);
        self.apply(&grads)?;
        let report = TrainStepReport {
            step: self.step,
            loss_fm: fm_value,
            loss_consis: consis_value,
            loss_total: total_value,
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }

    fn apply(&mut self, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let adam = self.cfg.adam();
        match &mut self.lora {
            Some(set) => {
                let mut params = set.to_params();
                adam_step(&mut params, grads, &mut self.adam, &adam)?;
                set.load_params(&params)
            }
            None => adam_step(self.net.params_mut(), grads, &mut self.adam, &adam),
        }
    }

    /// Run until `total_steps`, calling `on_step` after every step and
    /// writing periodic checkpoints to `checkpoint_path` when given.
    pub fn run(
        &mut self,
        dataset: &[VideoClip],
        checkpoint_path: Option<&Path>,
        mut on_step: impl FnMut(&TrainStepReport) -> Result<()>,
    ) -> Result<Vec<TrainStepReport>> {
        let mut history = Vec::with_capacity(self.cfg.total_steps.saturating_sub(self.step));
        while self.step < self.cfg.total_steps {
            let report = self.train_step(dataset)?;
            on_step(&report)?;
            history.push(report);
            if let Some(path) = checkpoint_path {
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.checkpoint().write(path)?;
                }
            }
        }
        Ok(history)
    }

    /// Network, adapters, optimizer state and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.net.to_checkpoint();
        if let Some(set) = &self.lora {
            set.save_into(&mut ck);
        }
        ck.push("trainer.step", Tensor::from_vec(vec![self.step as f32]));
        self.adam.save_into(&mut ck);
        ck
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let net = VelocityNet::from_checkpoint(ckpt)?;
        if *net.config() != cfg.net {
            return Err(Error::invalid(
                "checkpoint architecture differs from the configured net",
            ));
        }
        let mut trainer = Self::with_net(cfg, net)?;
        if let Some(set) = &mut trainer.lora {
            let mut params = ParamStore::new();
            for (name, _) in set.to_params().iter() {
                params.insert(name.clone(), ckpt.require(name)?.clone());
            }
            set.load_params(&params)?;
        }
        let step = ckpt.require("trainer.step")?.item()?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::format("checkpoint", format!("invalid trainer.step {step}")));
        }
        trainer.step = step as usize;
        trainer.adam = AdamState::load_from(ckpt)?;
        Ok(trainer)
    }
}

/// Writes the loss history as CSV rows as training progresses.
pub struct LossLog {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "{LOSS_CSV_HEADER}")?;
        Ok(LossLog { path, out })
    }

    /// Continue the log of a run resumed at `step`. Rows of an existing file
    /// from before `step` are kept; later rows (a run that went further
    /// before being resumed from an older checkpoint) are dropped.
    pub fn resume(path: impl AsRef<Path>, step: usize) -> Result<Self> {
        let path = path.as_ref();
        let kept: Vec<String> = match std::fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter(|line| {
                    line.split(',')
                        .next()
                        .and_then(|s| s.parse::<usize>().ok())
                        .is_some_and(|s| s < step)
                })
                .map(str::to_owned)
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut log = Self::create(path)?;
        for line in kept {
            writeln!(log.out, "{line}")?;
        }
        Ok(log)
    }

    pub fn append(&mut self, r: &TrainStepReport) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush()?;
        Ok(self.path)
    }
}
