//! Posterior sampling with a diffusion prior.
//!
//! The main loop alternates three phases per noise level: a clean estimate
//! from the prior (probability-flow ODE plus a final Tweedie step), Langevin
//! refinement of that estimate against the observations, and re-noising to
//! the next level. A stop-gradient DPS sampler is provided as a baseline.
//!
//! Everything below runs in normalized space unless it takes a
//! [`NormParams`]; those entry points normalize observations on the way in
//! and denormalize samples on the way out.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, Zip};
use rayon::prelude::*;

use crate::aodf;
use crate::denoiser::{gaussian_x0, ScoreModel};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, NormParams};
use crate::observe::{fidelity_grad_array, Observation, OperatorKind};
use crate::rng::{self, derive_named, derive_seed};
use crate::train::{gather_frames, window_indices};

pub const SIGMA_MAX: f64 = 80.0;
pub const SIGMA_MIN: f64 = 0.002;
pub const RHO: f64 = 7.0;

/// Strictly decreasing noise levels; a terminal 0 is implied after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSchedule {
    sigmas: Vec<f64>,
}

impl AnnealSchedule {
    /// `sigma_i = (max^(1/rho) + i/(T-1) * (min^(1/rho) - max^(1/rho)))^rho`.
    pub fn karras(sigma_max: f64, sigma_min: f64, rho: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(steps));
        }
        if !(sigma_max > sigma_min && sigma_min > 0.0 && rho > 0.0) {
            return Err(Error::Range(format!("bad schedule bounds {sigma_max} > {sigma_min} > 0, rho {rho}")));
        }
        let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
        let mut sigmas: Vec<f64> = (0..steps).map(|i| (a + i as f64 / (steps - 1) as f64 * (b - a)).powf(rho)).collect();
        sigmas[0] = sigma_max;
        sigmas[steps - 1] = sigma_min;
        Ok(Self { sigmas })
    }

    pub fn with_steps(steps: usize) -> Result<Self> {
        Self::karras(SIGMA_MAX, SIGMA_MIN, RHO, steps)
    }

    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::Schedule(sigmas.len()));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) || !(sigmas[sigmas.len() - 1] > 0.0) {
            return Err(Error::Range("schedule must be strictly decreasing and positive".into()));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Level after step `i`; 0 after the last.
    pub fn next(&self, i: usize) -> f64 {
        self.sigmas.get(i + 1).copied().unwrap_or(0.0)
    }
}

/// Spread of the Gaussian approximation to `p(x0 | x_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPriorRule {
    EqualToSigmaTau,
    Constant(f64),
    /// `c * sigma`.
    Scaled(f64),
    /// `sigma * s / sqrt(s^2 + sigma^2)`: the exact conditional spread for
    /// Gaussian data of standard deviation `s`.
    EdmConditional(f64),
}

impl SigmaPriorRule {
    pub fn apply(&self, sigma: f64) -> f64 {
        match *self {
            SigmaPriorRule::EqualToSigmaTau => sigma,
            SigmaPriorRule::Constant(c) => c,
            SigmaPriorRule::Scaled(c) => c * sigma,
            SigmaPriorRule::EdmConditional(s) => sigma * s / (s * s + sigma * sigma).sqrt(),
        }
    }
}

fn paren_arg(s: &str, name: &str) -> Option<f64> {
    s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?.trim().parse().ok()
}

impl FromStr for SigmaPriorRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "equal_to_sigma_tau" {
            return Ok(SigmaPriorRule::EqualToSigmaTau);
        }
        let rule = paren_arg(s, "constant")
            .map(SigmaPriorRule::Constant)
            .or_else(|| paren_arg(s, "scaled").map(SigmaPriorRule::Scaled))
            .or_else(|| paren_arg(s, "edm_conditional").map(SigmaPriorRule::EdmConditional))
            .ok_or_else(|| Error::Config(format!("unknown sigma_prior_rule {s:?}")))?;
        match rule {
            SigmaPriorRule::Constant(c) | SigmaPriorRule::Scaled(c) | SigmaPriorRule::EdmConditional(c) if !(c > 0.0) => {
                Err(Error::Config(format!("sigma_prior_rule argument must be > 0 in {s:?}")))
            }
            r => Ok(r),
        }
    }
}

impl std::fmt::Display for SigmaPriorRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaPriorRule::EqualToSigmaTau => write!(f, "equal_to_sigma_tau"),
            SigmaPriorRule::Constant(c) => write!(f, "constant({c:?})"),
            SigmaPriorRule::Scaled(c) => write!(f, "scaled({c:?})"),
            SigmaPriorRule::EdmConditional(c) => write!(f, "edm_conditional({c:?})"),
        }
    }
}

/// Validity channel fed to the network during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMask {
    /// All cells valid: the network always sees the full current state.
    Ones,
    /// The intersection of all masking observations' masks.
    Observation,
}

impl FromStr for GuidanceMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ones" => Ok(GuidanceMask::Ones),
            "observation" => Ok(GuidanceMask::Observation),
            _ => Err(Error::Config(format!("unknown guidance_mask {s:?}"))),
        }
    }
}

impl std::fmt::Display for GuidanceMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMask::Ones => "ones",
            GuidanceMask::Observation => "observation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapsConfig {
    pub n_langevin: usize,
    pub eta: f64,
    /// Per outer step multiplier on `eta`.
    pub eta_decay: f64,
    /// Langevin steps are capped at `step_cap / L`, `L` the Lipschitz
    /// constant of the guidance gradient. `None` uses `eta` as is.
    pub step_cap: Option<f64>,
    pub sigma_prior_rule: SigmaPriorRule,
    pub ode_substeps: usize,
    pub guidance_mask: GuidanceMask,
    pub seed: u64,
}

impl Default for DapsConfig {
    fn default() -> Self {
        Self {
            n_langevin: 50,
            eta: 1e-2,
            eta_decay: 1.0,
            step_cap: Some(0.1),
            sigma_prior_rule: SigmaPriorRule::EqualToSigmaTau,
            ode_substeps: 5,
            guidance_mask: GuidanceMask::Ones,
            seed: 0,
        }
    }
}

impl DapsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta {} must be > 0", self.eta)));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return Err(Error::Config(format!("eta_decay {} not in (0, 1]", self.eta_decay)));
        }
        if self.ode_substeps == 0 {
            return Err(Error::Config("ode_substeps must be positive".into()));
        }
        if let Some(c) = self.step_cap {
            if !(c > 0.0) {
                return Err(Error::Config(format!("step_cap {c} must be > 0")));
            }
        }
        Ok(())
    }
}

fn check_finite(x: &Array3<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState(what.to_string()))
    }
}

/// Clean estimate of every frame from the window centred on it.
pub fn sliding_window_estimate(model: &ScoreModel, x: &Array3<f64>, mask: &Array3<u8>, sigma: f64) -> Result<Array3<f64>> {
    if x.dim() != mask.dim() {
        return Err(Error::Shape(format!("state {:?} vs mask {:?}", x.dim(), mask.dim())));
    }
    match model {
        ScoreModel::AnalyticGaussian { mean, var_diag } => {
            if mean.dim() != x.dim() {
                return Err(Error::Shape(format!("state {:?} vs prior {:?}", x.dim(), mean.dim())));
            }
            if !(sigma > 0.0) {
                return Err(Error::NonPositiveSigma(sigma));
            }
            Ok(gaussian_x0(x.view(), mean.view(), var_diag.view(), sigma))
        }
        ScoreModel::Learned { .. } => {
            let (n, h, w) = x.dim();
            let win = model.window();
            let frames = (0..n)
                .into_par_iter()
                .map(|i| {
                    let idx = window_indices(i, n, win);
                    let out = model.forward(gather_frames(x, &idx).view(), gather_frames(mask, &idx).view(), sigma)?;
                    Ok(out.slice(s![win / 2, .., ..]).to_owned())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = Array3::zeros((n, h, w));
            for (i, f) in frames.into_iter().enumerate() {
                out.slice_mut(s![i, .., ..]).assign(&f);
            }
            Ok(out)
        }
    }
}

/// `n` denoiser evaluations: `n - 1` Euler steps of the probability-flow ODE
/// on a Karras grid from `sigma_tau` to `SIGMA_MIN`, then a Tweedie estimate
/// at the last level. `n = 1` is the Tweedie estimate at `sigma_tau`.
pub fn prior_estimate(model: &ScoreModel, x_tau: &Array3<f64>, mask: &Array3<u8>, sigma_tau: f64, ode_substeps: usize) -> Result<Array3<f64>> {
    if !(sigma_tau > 0.0) {
        return Err(Error::NonPositiveSigma(sigma_tau));
    }
    if ode_substeps == 0 {
        return Err(Error::Config("ode_substeps must be positive".into()));
    }
    if ode_substeps == 1 || sigma_tau <= SIGMA_MIN {
        let x0 = sliding_window_estimate(model, x_tau, mask, sigma_tau)?;
        check_finite(&x0, "prior estimate")?;
        return Ok(x0);
    }
    let sub = AnnealSchedule::karras(sigma_tau, SIGMA_MIN, RHO, ode_substeps)?;
    let mut x = x_tau.clone();
    for w in sub.sigmas().windows(2) {
        let (a, b) = (w[0], w[1]);
        let x0 = sliding_window_estimate(model, &x, mask, a)?;
        Zip::from(&mut x).and(&x0).for_each(|xv, &d| *xv += (b - a) * (*xv - d) / a);
        check_finite(&x, "ODE state")?;
    }
    let x0 = sliding_window_estimate(model, &x, mask, SIGMA_MIN)?;
    check_finite(&x0, "prior estimate")?;
    Ok(x0)
}

/// An observation in model space.
#[derive(Debug, Clone)]
pub struct PreparedObs {
    pub kind: OperatorKind,
    pub y: Array3<f64>,
    pub lambda: f64,
}

/// Normalize observations and fix their order by canonical key.
pub fn prepare_observations(observations: &[Observation], norm: Option<&NormParams>, target: (usize, usize, usize)) -> Result<Vec<PreparedObs>> {
    let mut sorted: Vec<&Observation> = observations.iter().collect();
    sorted.sort_by_key(|o| o.canonical_key());
    sorted
        .into_iter()
        .map(|o| {
            o.check_target(target)?;
            let support = o.kind.support(target)?;
            let mut y = Array3::zeros(o.y.spec().shape());
            let mut bad = None;
            Zip::indexed(&mut y).and(o.y.values()).and(&support).for_each(|idx, out, &raw, &m| {
                if m == 1 {
                    *out = match norm {
                        Some(p) => {
                            if raw <= -1.0 && bad.is_none() {
                                bad = Some((idx, raw));
                            }
                            p.forward(raw)
                        }
                        None => raw,
                    };
                }
            });
            if let Some(((t, i, j), value)) = bad {
                let (_, h, w) = o.y.spec().shape();
                return Err(Error::NegativeInput { index: (t * h + i) * w + j, value });
            }
            Ok(PreparedObs { kind: o.kind.clone(), y, lambda: o.lambda_m })
        })
        .collect()
}

/// Network validity channel for a run.
pub fn guidance_mask(rule: GuidanceMask, observations: &[PreparedObs], target: (usize, usize, usize)) -> Array3<u8> {
    let mut m = Array3::from_elem(target, 1u8);
    if rule == GuidanceMask::Observation {
        for o in observations {
            if let OperatorKind::Masking { mask } = &o.kind {
                Zip::from(&mut m).and(mask.flags()).for_each(|a, &b| *a &= b);
            }
        }
    }
    m
}

/// Effective Langevin step at outer step `outer`.
pub fn langevin_step(cfg: &DapsConfig, observations: &[PreparedObs], sigma_prior: f64, outer: usize) -> f64 {
    let eta = cfg.eta * cfg.eta_decay.powi(outer as i32);
    match cfg.step_cap {
        None => eta,
        Some(cap) => {
            let lip = 1.0 / (sigma_prior * sigma_prior) + observations.iter().map(|o| 2.0 * o.lambda * o.kind.norm_sq()).sum::<f64>();
            eta.min(cap / lip)
        }
    }
}

/// `N` steps of `x <- x - eta grad J(x) + sqrt(2 eta) xi` with
/// `grad J = (x - x0_init) / sigma_prior^2 + sum_m lambda_m 2 A_m^T (A_m x - y_m)`.
pub fn langevin_guidance(
    x0_init: &Array3<f64>,
    observations: &[PreparedObs],
    sigma_prior: f64,
    n_steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Array3<f64>> {
    if !(sigma_prior > 0.0) {
        return Err(Error::NonPositiveSigma(sigma_prior));
    }
    let mut x = x0_init.clone();
    if n_steps == 0 {
        return Ok(x);
    }
    let mut r = rng::rng(seed);
    let inv_p = 1.0 / (sigma_prior * sigma_prior);
    let noise_scale = (2.0 * eta).sqrt();
    let mut noise = Array3::zeros(x.dim());
    for _ in 0..n_steps {
        let mut grad = (&x - x0_init) * inv_p;
        for o in observations {
            let g = fidelity_grad_array(&o.kind, &o.y, &x)?;
            grad.scaled_add(o.lambda, &g);
        }
        noise.iter_mut().for_each(|v| *v = rng::normal(&mut r));
        Zip::from(&mut x).and(&grad).and(&noise).for_each(|xv, &g, &n| *xv += -eta * g + noise_scale * n);
    }
    check_finite(&x, "Langevin iterate")?;
    Ok(x)
}

/// Snapshot handed to an observer after each outer step.
pub struct DapsStep<'a> {
    pub step: usize,
    pub sigma: f64,
    pub sigma_next: f64,
    pub x0_hat: &'a Array3<f64>,
    pub x0_guided: &'a Array3<f64>,
    /// State after re-noising (equal to `x0_guided` at the last step).
    pub x_next: &'a Array3<f64>,
}

/// Decoupled annealing in model space. Returns the final guided estimate.
pub fn daps_run(
    model: &ScoreModel,
    observations: &[PreparedObs],
    schedule: &AnnealSchedule,
    cfg: &DapsConfig,
    target: (usize, usize, usize),
    mut observer: Option<&mut dyn FnMut(&DapsStep)>,
) -> Result<Array3<f64>> {
    cfg.validate()?;
    if schedule.len() < 2 {
        return Err(Error::Schedule(schedule.len()));
    }
    let gmask = guidance_mask(cfg.guidance_mask, observations, target);
    let mut r = rng::rng(derive_named(cfg.seed, "init"));
    let mut x = Array3::zeros(target);
    x.iter_mut().for_each(|v| *v = schedule.sigmas()[0] * rng::normal(&mut r));
    let langevin_seed = derive_named(cfg.seed, "langevin");
    let renoise_seed = derive_named(cfg.seed, "renoise");
    let mut out = x.clone();
    for (i, &sigma) in schedule.sigmas().iter().enumerate() {
        let x0 = prior_estimate(model, &x, &gmask, sigma, cfg.ode_substeps)?;
        let sp = cfg.sigma_prior_rule.apply(sigma);
        let eta = langevin_step(cfg, observations, sp, i);
        let x0y = langevin_guidance(&x0, observations, sp, cfg.n_langevin, eta, derive_seed(langevin_seed, i as u64))?;
        let next = schedule.next(i);
        x = x0y.clone();
        if next > 0.0 {
            let mut rn = rng::rng(derive_seed(renoise_seed, i as u64));
            x.iter_mut().for_each(|v| *v += next * rng::normal(&mut rn));
        }
        if let Some(obs) = observer.as_mut() {
            obs(&DapsStep { step: i, sigma, sigma_next: next, x0_hat: &x0, x0_guided: &x0y, x_next: &x });
        }
        out = x0y;
    }
    Ok(out)
}

fn to_field(x: Array3<f64>, spec: GridSpec, norm: Option<&NormParams>) -> Result<Field> {
    let x = match norm {
        Some(p) => x.mapv(|v| p.inverse(v)),
        None => x,
    };
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState(format!("denormalized sample cell {i}")));
    }
    Field::new(spec, x)
}

/// One posterior sample in data space.
pub fn daps_reconstruct(
    model: &ScoreModel,
    observations: &[Observation],
    schedule: &AnnealSchedule,
    cfg: &DapsConfig,
    norm: Option<&NormParams>,
    spec: GridSpec,
) -> Result<Field> {
    let prepared = prepare_observations(observations, norm, spec.shape())?;
    let x = daps_run(model, &prepared, schedule, cfg, spec.shape(), None)?;
    to_field(x, spec, norm)
}

/// Probability-flow Euler sampling with a stop-gradient likelihood
/// correction after each step: `x -= sum_m scale * lambda_m * g_m / ||r_m||`
/// where `g_m` is the fidelity gradient and `r_m` the residual, both at the
/// clean estimate.
pub fn dps_run(
    model: &ScoreModel,
    observations: &[PreparedObs],
    schedule: &AnnealSchedule,
    guidance_scale: f64,
    seed: u64,
    target: (usize, usize, usize),
) -> Result<Array3<f64>> {
    if schedule.len() < 2 {
        return Err(Error::Schedule(schedule.len()));
    }
    let gmask = Array3::from_elem(target, 1u8);
    let mut r = rng::rng(derive_named(seed, "init"));
    let mut x = Array3::zeros(target);
    x.iter_mut().for_each(|v| *v = schedule.sigmas()[0] * rng::normal(&mut r));
    for (i, &sigma) in schedule.sigmas().iter().enumerate() {
        let x0 = sliding_window_estimate(model, &x, &gmask, sigma)?;
        let next = schedule.next(i);
        Zip::from(&mut x).and(&x0).for_each(|xv, &d| *xv += (next - sigma) * (*xv - d) / sigma);
        if guidance_scale != 0.0 {
            for o in observations {
                let mut res = o.kind.apply(&x0)? - &o.y;
                let support = o.kind.support(target)?;
                Zip::from(&mut res).and(&support).for_each(|v, &m| {
                    if m == 0 {
                        *v = 0.0;
                    }
                });
                let rn = res.iter().map(|v| v * v).sum::<f64>().sqrt();
                if rn > 0.0 {
                    let g = fidelity_grad_array(&o.kind, &o.y, &x0)?;
                    x.scaled_add(-guidance_scale * o.lambda / rn, &g);
                }
            }
        }
        check_finite(&x, "DPS state")?;
    }
    Ok(x)
}

pub fn dps_reconstruct(
    model: &ScoreModel,
    observations: &[Observation],
    schedule: &AnnealSchedule,
    guidance_scale: f64,
    seed: u64,
    norm: Option<&NormParams>,
    spec: GridSpec,
) -> Result<Field> {
    let prepared = prepare_observations(observations, norm, spec.shape())?;
    let x = dps_run(model, &prepared, schedule, guidance_scale, seed, spec.shape())?;
    to_field(x, spec, norm)
}

/// Deterministic probability-flow sample (DPS without guidance).
pub fn probability_flow_sample(model: &ScoreModel, schedule: &AnnealSchedule, seed: u64, norm: Option<&NormParams>, spec: GridSpec) -> Result<Field> {
    dps_reconstruct(model, &[], schedule, 0.0, seed, norm, spec)
}

/// The annealing loop with no observations and no Langevin phase.
pub fn unconditional_sample(
    model: &ScoreModel,
    schedule: &AnnealSchedule,
    cfg: &DapsConfig,
    norm: Option<&NormParams>,
    spec: GridSpec,
) -> Result<Field> {
    let cfg = DapsConfig { n_langevin: 0, ..cfg.clone() };
    daps_reconstruct(model, &[], schedule, &cfg, norm, spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub samples: Vec<Field>,
    pub mean: Field,
    /// Population standard deviation across members.
    pub std: Field,
    pub seeds: Vec<u64>,
}

impl ReconResult {
    pub fn from_samples(samples: Vec<Field>, seeds: Vec<u64>) -> Result<Self> {
        let first = samples.first().ok_or(Error::TooFewValues { needed: 1, got: 0 })?;
        let spec = *first.spec();
        let n = samples.len() as f64;
        let mut mean = Array3::zeros(spec.shape());
        for s in &samples {
            mean += s.values();
        }
        mean /= n;
        let mut var = Array3::<f64>::zeros(spec.shape());
        for s in &samples {
            Zip::from(&mut var).and(s.values()).and(&mean).for_each(|v, &x, &m| *v += (x - m) * (x - m));
        }
        let std = var.mapv(|v| (v / n).sqrt());
        Ok(Self { mean: Field::new(spec, mean)?, std: Field::new(spec, std)?, samples, seeds })
    }

    /// Writes `<stem>.samples.aodf` (members concatenated in time),
    /// `<stem>.mean.aodf` and `<stem>.std.aodf`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let paths: Vec<PathBuf> = ["samples", "mean", "std"].iter().map(|k| dir.join(format!("{stem}.{k}.aodf"))).collect();
        aodf::write_field(&Field::concat_time(&self.samples)?, &paths[0])?;
        aodf::write_field(&self.mean, &paths[1])?;
        aodf::write_field(&self.std, &paths[2])?;
        Ok(paths)
    }
}

/// Member seeds `derive_seed(cfg.seed, m)`.
pub fn ensemble_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n).map(|m| derive_seed(seed, m as u64)).collect()
}

/// Independent DAPS runs with the given member seeds.
pub fn ensemble_with_seeds(
    model: &ScoreModel,
    observations: &[Observation],
    schedule: &AnnealSchedule,
    cfg: &DapsConfig,
    seeds: &[u64],
    norm: Option<&NormParams>,
    spec: GridSpec,
) -> Result<ReconResult> {
    if seeds.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: seeds.len() });
    }
    let prepared = prepare_observations(observations, norm, spec.shape())?;
    let samples = seeds
        .par_iter()
        .map(|&seed| {
            let member = DapsConfig { seed, ..cfg.clone() };
            let x = daps_run(model, &prepared, schedule, &member, spec.shape(), None)?;
            to_field(x, spec, norm)
        })
        .collect::<Result<Vec<_>>>()?;
    ReconResult::from_samples(samples, seeds.to_vec())
}

pub fn ensemble_reconstruct(
    model: &ScoreModel,
    observations: &[Observation],
    schedule: &AnnealSchedule,
    cfg: &DapsConfig,
    n_ensemble: usize,
    norm: Option<&NormParams>,
    spec: GridSpec,
) -> Result<ReconResult> {
    ensemble_with_seeds(model, observations, schedule, cfg, &ensemble_seeds(cfg.seed, n_ensemble), norm, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MaskField;

    fn gauss(shape: (usize, usize, usize), seed: u64) -> ScoreModel {
        let n = shape.0 * shape.1 * shape.2;
        let mean = Array3::from_shape_vec(shape, rng::normal_vec(&mut rng::rng(seed), n)).unwrap();
        ScoreModel::analytic(mean, Array3::from_elem(shape, 1.0)).unwrap()
    }

    #[test]
    fn karras_schedule() {
        let s = AnnealSchedule::with_steps(30).unwrap();
        assert_eq!(s.sigmas()[0], 80.0);
        assert_eq!(s.sigmas()[29], 0.002);
        assert!(s.sigmas().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.next(29), 0.0);
        assert!(matches!(AnnealSchedule::with_steps(1), Err(Error::Schedule(1))));
        let mid = (80f64.powf(1.0 / 7.0) + 0.5 * (0.002f64.powf(1.0 / 7.0) - 80f64.powf(1.0 / 7.0))).powf(7.0);
        assert!((AnnealSchedule::with_steps(3).unwrap().sigmas()[1] - mid).abs() < 1e-12);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("constant(0.5)".parse::<SigmaPriorRule>().unwrap(), SigmaPriorRule::Constant(0.5));
        assert_eq!("equal_to_sigma_tau".parse::<SigmaPriorRule>().unwrap(), SigmaPriorRule::EqualToSigmaTau);
        assert_eq!("scaled(0.3)".parse::<SigmaPriorRule>().unwrap().apply(2.0), 0.6);
        let r = SigmaPriorRule::EdmConditional(0.5);
        assert_eq!(r.to_string().parse::<SigmaPriorRule>().unwrap(), r);
        assert!("constant(-1)".parse::<SigmaPriorRule>().is_err());
        assert!("bogus".parse::<SigmaPriorRule>().is_err());
    }

    #[test]
    fn single_substep_is_tweedie() {
        let shape = (2, 4, 4);
        let m = gauss(shape, 1);
        let x = Array3::from_elem(shape, 0.7);
        let ones = Array3::from_elem(shape, 1u8);
        let a = prior_estimate(&m, &x, &ones, 1.3, 1).unwrap();
        assert_eq!(a, m.forward(x.view(), ones.view(), 1.3).unwrap());
        let b = prior_estimate(&m, &x, &ones, SIGMA_MIN, 7).unwrap();
        assert_eq!(b, m.forward(x.view(), ones.view(), SIGMA_MIN).unwrap());
    }

    #[test]
    fn gaussian_ode_recursion() {
        let shape = (1, 4, 4);
        let m = gauss(shape, 2);
        let ScoreModel::AnalyticGaussian { mean, .. } = &m else { unreachable!() };
        let x = Array3::from_shape_vec(shape, rng::normal_vec(&mut rng::rng(3), 16)).unwrap();
        let ones = Array3::from_elem(shape, 1u8);
        // Euler on dx/ds = s (x - mu) / (1 + s^2) multiplies (x - mu) by 1 + (b - a) a / (1 + a^2)
        let n = 6;
        let sub = AnnealSchedule::karras(1.0, SIGMA_MIN, RHO, n).unwrap();
        let factor: f64 = sub.sigmas().windows(2).map(|w| 1.0 + (w[1] - w[0]) * w[0] / (1.0 + w[0] * w[0])).product();
        let tw = 1.0 / (1.0 + SIGMA_MIN * SIGMA_MIN);
        let got = prior_estimate(&m, &x, &ones, 1.0, n).unwrap();
        for ((g, xv), mu) in got.iter().zip(x.iter()).zip(mean.iter()) {
            let exact = mu + tw * factor * (xv - mu);
            assert!((g - exact).abs() < 1e-10);
        }
        // continuous flow: x(s) - mu = (x - mu) sqrt((1 + s^2) / 2), approached at first order
        let err = |n: usize| {
            let got = prior_estimate(&m, &x, &ones, 1.0, n).unwrap();
            got.iter()
                .zip(x.iter())
                .zip(mean.iter())
                .map(|((g, xv), mu)| (g - (mu + tw * (xv - mu) * ((1.0 + SIGMA_MIN * SIGMA_MIN) / 2.0).sqrt())).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(1000), err(4000));
        assert!(fine < 5e-3, "{fine}");
        assert!((3.0..5.0).contains(&(coarse / fine)), "{coarse} {fine}");
    }

    #[test]
    fn langevin_basics() {
        let shape = (1, 4, 4);
        let x0 = Array3::from_elem(shape, 0.3);
        assert_eq!(langevin_guidance(&x0, &[], 0.5, 0, 1e-2, 1).unwrap(), x0);
        let a = langevin_guidance(&x0, &[], 0.5, 20, 1e-2, 1).unwrap();
        assert_eq!(a, langevin_guidance(&x0, &[], 0.5, 20, 1e-2, 1).unwrap());
        assert!(langevin_guidance(&x0, &[], 0.0, 20, 1e-2, 1).is_err());
    }

    #[test]
    fn langevin_stationary_variance() {
        let x0 = Array3::zeros((1, 64, 64));
        let sp = 0.5;
        let x = langevin_guidance(&x0, &[], sp, 3000, 1e-3, 12).unwrap();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((0.9 * sp * sp..=1.1 * sp * sp).contains(&var), "{var}");
    }

    #[test]
    fn sliding_window_matches_closed_form() {
        let shape = (4, 4, 4);
        let m = gauss(shape, 4);
        let x = Array3::from_elem(shape, 1.5);
        let ones = Array3::from_elem(shape, 1u8);
        let a = sliding_window_estimate(&m, &x, &ones, 0.8).unwrap();
        let b = m.forward(x.view(), ones.view(), 0.8).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn permutation_invariant() {
        let shape = (1, 8, 8);
        let m = gauss(shape, 5);
        let spec = GridSpec::new(1, 8, 8).unwrap();
        let truth = Field::from_vec(spec, rng::normal_vec(&mut rng::rng(6), 64)).unwrap();
        let mask = MaskField::new(spec, Array3::from_shape_fn(shape, |(_, i, j)| ((i + j) % 3 != 0) as u8)).unwrap();
        let o1 = crate::observe::observe_noisy(&OperatorKind::Masking { mask }, &truth, 0.1, 1).unwrap();
        let o2 = crate::observe::observe_noisy(&OperatorKind::Downsample { s_step: 2, t_step: 1 }, &truth, 0.1, 2).unwrap();
        let sched = AnnealSchedule::with_steps(6).unwrap();
        let cfg = DapsConfig { n_langevin: 5, seed: 3, ..Default::default() };
        let a = daps_reconstruct(&m, &[o1.clone(), o2.clone()], &sched, &cfg, None, spec).unwrap();
        let b = daps_reconstruct(&m, &[o2, o1], &sched, &cfg, None, spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weight_matches_empty() {
        let shape = (1, 8, 8);
        let m = gauss(shape, 7);
        let spec = GridSpec::new(1, 8, 8).unwrap();
        let truth = Field::from_vec(spec, rng::normal_vec(&mut rng::rng(8), 64)).unwrap();
        let mut o = crate::observe::observe_noisy(&OperatorKind::Identity, &truth, 0.1, 1).unwrap();
        o.lambda_m = 1e-300;
        let sched = AnnealSchedule::with_steps(6).unwrap();
        let cfg = DapsConfig { n_langevin: 5, seed: 3, ..Default::default() };
        let a = daps_reconstruct(&m, &[o], &sched, &cfg, None, spec).unwrap();
        let b = daps_reconstruct(&m, &[], &sched, &cfg, None, spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dps_without_guidance_is_flow_sampling() {
        let shape = (1, 8, 8);
        let m = gauss(shape, 9);
        let spec = GridSpec::new(1, 8, 8).unwrap();
        let truth = Field::from_vec(spec, rng::normal_vec(&mut rng::rng(8), 64)).unwrap();
        let o = crate::observe::observe_noisy(&OperatorKind::Identity, &truth, 0.1, 1).unwrap();
        let sched = AnnealSchedule::with_steps(10).unwrap();
        let a = dps_reconstruct(&m, &[o], &sched, 0.0, 4, None, spec).unwrap();
        assert_eq!(a, probability_flow_sample(&m, &sched, 4, None, spec).unwrap());
    }

    #[test]
    fn dps_divergence_surfaces() {
        let shape = (1, 8, 8);
        let m = gauss(shape, 10);
        let spec = GridSpec::new(1, 8, 8).unwrap();
        let truth = Field::constant(spec, 0.4);
        let o = crate::observe::observe_noisy(&OperatorKind::Identity, &truth, 0.0, 1).unwrap();
        let norm = NormParams::new(0.0, 1.0).unwrap();
        let sched = AnnealSchedule::with_steps(10).unwrap();
        let r = dps_reconstruct(&m, &[o], &sched, 1e9, 4, Some(&norm), spec);
        assert!(matches!(r, Err(Error::NonFiniteState(_))), "{r:?}");
    }

    #[test]
    fn degenerate_ensemble() {
        let shape = (1, 4, 4);
        let m = gauss(shape, 11);
        let spec = GridSpec::new(1, 4, 4).unwrap();
        let sched = AnnealSchedule::with_steps(5).unwrap();
        let cfg = DapsConfig { n_langevin: 3, ..Default::default() };
        let r = ensemble_with_seeds(&m, &[], &sched, &cfg, &[7, 7], None, spec).unwrap();
        assert!(r.std.as_slice().iter().all(|&v| v == 0.0));
        let r = ensemble_reconstruct(&m, &[], &sched, &cfg, 3, None, spec).unwrap();
        assert!(r.std.as_slice().iter().all(|&v| v > 0.0));
        assert!(ensemble_with_seeds(&m, &[], &sched, &cfg, &[1], None, spec).is_err());
    }
}
