//! Rectified-flow mathematics: straight-path interpolation, the
//! flow-matching objective, Euler sampling and residual-velocity
//! trajectory rectification for editing.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::video::{Image, VelocityField, VideoClip};

/// Tolerance on `t - dt` going below zero.
pub const T_TOLERANCE: f64 = 1e-9;

const NOISE_STREAM: u64 = 0x4e4f_4953;

/// Conditions of the velocity model: the structural video slot and the
/// reference image slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub structural: VideoClip,
    pub reference: Image,
}

impl ConditionSet {
    pub fn new(structural: VideoClip, reference: Image) -> Result<Self> {
        if reference.height() != structural.height() || reference.width() != structural.width() {
            return Err(Error::ShapeMismatch {
                op: "condition_set",
                lhs: vec![structural.height(), structural.width()],
                rhs: vec![reference.height(), reference.width()],
            });
        }
        Ok(ConditionSet { structural, reference })
    }

    /// Reconstruction conditions: the video itself and its first frame.
    pub fn reconstruction(src: &VideoClip) -> Self {
        ConditionSet {
            structural: src.clone(),
            reference: src.first_frame(),
        }
    }

    pub fn validate_against(&self, x: &VideoClip) -> Result<()> {
        self.structural.ensure_same_shape("condition_set", x)
    }
}

/// A point on a sampling trajectory together with the noise that seeded it.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x_t: VideoClip,
    pub t: f32,
    pub eps_init: VideoClip,
}

/// Where the reconstruction velocity is evaluated during editing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// At the editing trajectory's own state `x_t`.
    #[default]
    SharedState,
    /// At the source's straight path `interpolate(src, eps_init, t)`.
    StraightPath,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub gamma: f32,
    pub residual_cache_stride: usize,
    pub seed: u64,
    pub residual_mode: ResidualMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 20,
            gamma: 1.0,
            residual_cache_stride: 2,
            seed: 0,
            residual_mode: ResidualMode::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be at least 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        if self.residual_cache_stride == 0 {
            return Err(Error::invalid("residual_cache_stride must be at least 1"));
        }
        Ok(())
    }

    /// Timestep `t_i = 1 - i/N`.
    pub fn timestep(&self, i: usize) -> f32 {
        (1.0 - i as f64 / self.num_steps as f64) as f32
    }

    pub fn dt(&self) -> f32 {
        (1.0 / self.num_steps as f64) as f32
    }
}

/// Anything that predicts a velocity for a noisy state under conditions.
pub trait VelocityModel {
    fn velocity(&self, x_t: &VideoClip, t: f32, cond: &ConditionSet) -> Result<VelocityField>;

    /// Several evaluations at once; models may batch them.
    fn velocity_batch(&self, items: &[(&VideoClip, f32, &ConditionSet)]) -> Result<Vec<VelocityField>> {
        items.iter().map(|(x, t, c)| self.velocity(x, *t, c)).collect()
    }
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn velocity(&self, x_t: &VideoClip, t: f32, cond: &ConditionSet) -> Result<VelocityField> {
        (**self).velocity(x_t, t, cond)
    }

    fn velocity_batch(&self, items: &[(&VideoClip, f32, &ConditionSet)]) -> Result<Vec<VelocityField>> {
        (**self).velocity_batch(items)
    }
}

/// Adapts a closure into a [`VelocityModel`].
pub struct FnModel<F>(pub F);

impl<F> VelocityModel for FnModel<F>
where
    F: Fn(&VideoClip, f32, &ConditionSet) -> Result<VelocityField>,
{
    fn velocity(&self, x_t: &VideoClip, t: f32, cond: &ConditionSet) -> Result<VelocityField> {
        (self.0)(x_t, t, cond)
    }
}

fn check_unit(op: &'static str, t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("{op}: t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// Standard normal noise of the given clip shape.
pub fn sample_noise(frames: usize, height: usize, width: usize, seed: u64) -> VideoClip {
    let mut rng = stream(seed, &[NOISE_STREAM]);
    let mut clip = VideoClip::zeros(frames, height, width);
    for v in clip.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    clip
}

/// `x_t = (1-t)·x0 + t·eps`.
pub fn interpolate(x0: &VideoClip, eps: &VideoClip, t: f32) -> Result<FlowState> {
    check_unit("interpolate", t)?;
    let x_t = x0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?;
    Ok(FlowState {
        x_t,
        t,
        eps_init: eps.clone(),
    })
}

/// `eps - x0`.
pub fn fm_target(x0: &VideoClip, eps: &VideoClip) -> Result<VelocityField> {
    Ok(VelocityField::from_clip(eps.zip_map(x0, |e, a| e - a)?))
}

/// `lambda_t · mean((v_pred - (eps - x0))²)`.
pub fn fm_loss(v_pred: &VelocityField, x0: &VideoClip, eps: &VideoClip, lambda_t: f32) -> Result<f32> {
    let target = fm_target(x0, eps)?;
    v_pred.as_clip().ensure_same_shape("fm_loss", target.as_clip())?;
    let n = target.data().len().max(1);
    let sse: f64 = v_pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    Ok((lambda_t as f64 * sse / n as f64) as f32)
}

/// `x_{t-dt} = x_t - dt·v`.
pub fn euler_step(state: &FlowState, v: &VelocityField, dt: f32) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("euler_step: dt must be positive, got {dt}")));
    }
    let next_t = state.t as f64 - dt as f64;
    if next_t < -T_TOLERANCE {
        return Err(Error::invalid(format!(
            "euler_step: dt = {dt} overshoots below zero from t = {}",
            state.t
        )));
    }
    let x_t = state.x_t.zip_map(v.as_clip(), |x, u| x - dt * u)?;
    Ok(FlowState {
        x_t,
        t: next_t.max(0.0) as f32,
        eps_init: state.eps_init.clone(),
    })
}

/// `V_res = (eps_init - x0_src) - v_recon`.
pub fn residual_velocity(v_recon: &VelocityField, x0_src: &VideoClip, eps_init: &VideoClip) -> Result<VelocityField> {
    x0_src.ensure_same_shape("residual_velocity", eps_init)?;
    v_recon.as_clip().ensure_same_shape("residual_velocity", x0_src)?;
    let data = eps_init
        .data()
        .iter()
        .zip(x0_src.data())
        .zip(v_recon.data())
        .map(|((&e, &s), &r)| (e - s) - r)
        .collect();
    let [t, _, h, w] = x0_src.shape();
    Ok(VelocityField::from_clip(VideoClip::new(t, h, w, data)?))
}

/// `v_edit + gamma·v_res`.
pub fn rectified_velocity(v_edit: &VelocityField, v_res: &VelocityField, gamma: f32) -> Result<VelocityField> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    v_edit.zip_map(v_res, |e, r| e + gamma * r)
}

/// Plain conditional Euler sampling from `eps` at `t = 1` down to `t = 0`.
pub fn sample_from(
    model: &impl VelocityModel,
    cond: &ConditionSet,
    eps: &VideoClip,
    cfg: &SamplerConfig,
) -> Result<VideoClip> {
    cfg.validate()?;
    cond.validate_against(eps)?;
    let mut state = FlowState {
        x_t: eps.clone(),
        t: 1.0,
        eps_init: eps.clone(),
    };
    for i in 0..cfg.num_steps {
        let v = model.velocity(&state.x_t, cfg.timestep(i), cond)?;
        state = advance(&state, &v, cfg, i)?;
    }
    let mut out = state.x_t;
    out.clamp01();
    Ok(out)
}

/// [`sample_from`] with noise drawn from `cfg.seed`.
pub fn sample(model: &impl VelocityModel, cond: &ConditionSet, cfg: &SamplerConfig) -> Result<VideoClip> {
    let [t, _, h, w] = cond.structural.shape();
    sample_from(model, cond, &sample_noise(t, h, w, cfg.seed), cfg)
}

fn advance(state: &FlowState, v: &VelocityField, cfg: &SamplerConfig, i: usize) -> Result<FlowState> {
    let mut next = euler_step(state, v, cfg.dt())?;
    // pin to the grid so rounding in repeated subtraction never accumulates
    next.t = cfg.timestep(i + 1);
    Ok(next)
}

/// Edit `src` towards the photometry of `reference` with residual-velocity
/// rectification. Noise is drawn from `cfg.seed`.
pub fn sample_edit(
    model: &impl VelocityModel,
    src: &VideoClip,
    reference: &Image,
    cfg: &SamplerConfig,
) -> Result<VideoClip> {
    let [t, _, h, w] = src.shape();
    sample_edit_from(model, src, reference, &sample_noise(t, h, w, cfg.seed), cfg)
}

/// [`sample_edit`] with explicit initial noise.
pub fn sample_edit_from(
    model: &impl VelocityModel,
    src: &VideoClip,
    reference: &Image,
    eps: &VideoClip,
    cfg: &SamplerConfig,
) -> Result<VideoClip> {
    Ok(edit_trajectory(model, src, reference, eps, cfg, cfg.residual_cache_stride)?.x_t)
}

/// Reference editing loop that recomputes the residual at every step.
pub fn sample_edit_uncached(
    model: &impl VelocityModel,
    src: &VideoClip,
    reference: &Image,
    eps: &VideoClip,
    cfg: &SamplerConfig,
) -> Result<VideoClip> {
    cfg.validate()?;
    let edit = ConditionSet::new(src.clone(), reference.clone())?;
    let recon = ConditionSet::reconstruction(src);
    edit.validate_against(eps)?;
    let mut state = FlowState {
        x_t: eps.clone(),
        t: 1.0,
        eps_init: eps.clone(),
    };
    for i in 0..cfg.num_steps {
        let v = edit_velocity(model, &state, cfg.timestep(i), src, &edit, &recon, cfg)?;
        state = advance(&state, &v, cfg, i)?;
    }
    state.x_t.clamp01();
    Ok(state.x_t)
}

/// One uncached editing step of size `cfg.dt()` from an arbitrary `state`.
/// The residual uses `state.eps_init` as the initial noise.
pub fn rectified_step(
    model: &impl VelocityModel,
    state: &FlowState,
    src: &VideoClip,
    reference: &Image,
    cfg: &SamplerConfig,
) -> Result<FlowState> {
    cfg.validate()?;
    let edit = ConditionSet::new(src.clone(), reference.clone())?;
    let recon = ConditionSet::reconstruction(src);
    edit.validate_against(&state.x_t)?;
    let v = edit_velocity(model, state, state.t, src, &edit, &recon, cfg)?;
    euler_step(state, &v, cfg.dt())
}

fn edit_velocity(
    model: &impl VelocityModel,
    state: &FlowState,
    t: f32,
    src: &VideoClip,
    edit: &ConditionSet,
    recon: &ConditionSet,
    cfg: &SamplerConfig,
) -> Result<VelocityField> {
    let v_edit = model.velocity(&state.x_t, t, edit)?;
    if cfg.gamma == 0.0 {
        return Ok(v_edit);
    }
    let eps = &state.eps_init;
    let probe = match cfg.residual_mode {
        ResidualMode::SharedState => state.x_t.clone(),
        ResidualMode::StraightPath => interpolate(src, eps, t)?.x_t,
    };
    let v_recon = model.velocity(&probe, t, recon)?;
    let v_res = residual_velocity(&v_recon, src, eps)?;
    rectified_velocity(&v_edit, &v_res, cfg.gamma)
}

fn edit_trajectory(
    model: &impl VelocityModel,
    src: &VideoClip,
    reference: &Image,
    eps: &VideoClip,
    cfg: &SamplerConfig,
    stride: usize,
) -> Result<FlowState> {
    cfg.validate()?;
    let edit = ConditionSet::new(src.clone(), reference.clone())?;
    let recon = ConditionSet::reconstruction(src);
    edit.validate_against(eps)?;
    let mut state = FlowState {
        x_t: eps.clone(),
        t: 1.0,
        eps_init: eps.clone(),
    };
    let mut cached: Option<VelocityField> = None;
    for i in 0..cfg.num_steps {
        let t = cfg.timestep(i);
        let v = if cfg.gamma == 0.0 {
            model.velocity(&state.x_t, t, &edit)?
        } else if i % stride == 0 || cached.is_none() {
            let probe = match cfg.residual_mode {
                ResidualMode::SharedState => state.x_t.clone(),
                ResidualMode::StraightPath => interpolate(src, eps, t)?.x_t,
            };
            let mut out = model.velocity_batch(&[(&state.x_t, t, &edit), (&probe, t, &recon)])?;
            let v_recon = out.pop().expect("two outputs");
            let v_edit = out.pop().expect("two outputs");
            let v_res = residual_velocity(&v_recon, src, eps)?;
            let v = rectified_velocity(&v_edit, &v_res, cfg.gamma)?;
            cached = Some(v_res);
            v
        } else {
            let v_edit = model.velocity(&state.x_t, t, &edit)?;
            rectified_velocity(&v_edit, cached.as_ref().expect("cache filled"), cfg.gamma)?
        };
        state = advance(&state, &v, cfg, i)?;
    }
    state.x_t.clamp01();
    Ok(state)
}
