//! Benchmark grid: {DAPS, DPS} x priors x downsample factors x missing
//! ratios over a set of ground-truth cases.
//!
//! Observations and sampler seeds depend only on the case index, so every
//! method and prior sees identical inputs. Masks for different missing
//! ratios threshold the same cloud field and are nested.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use recon_core::denoiser::ScoreModel;
use recon_core::metrics::{melr, nrmse};
use recon_core::observe::{mask_from_cloud, observe_noisy};
use recon_core::rng::{derive_named, derive_seed};
use recon_core::sampler::{daps_reconstruct, dps_reconstruct, AnnealSchedule, DapsConfig};
use recon_core::synth::{gen_cloud, CloudConfig};
use recon_core::{Error, Field, NormParams, Observation, OperatorKind, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Daps,
    Dps,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "daps" => Ok(Method::Daps),
            "dps" => Ok(Method::Dps),
            _ => Err(Error::Config(format!("unknown sampler {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Daps => "daps",
            Method::Dps => "dps",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub methods: Vec<Method>,
    pub factors: Vec<usize>,
    pub missing_ratios: Vec<f64>,
    pub schedule: AnnealSchedule,
    pub daps: DapsConfig,
    pub dps_scale: f64,
    pub lambda_m: f64,
    pub sigma_m: f64,
    pub mask_correlation_length: f64,
    pub mask_temporal_rho: f64,
    pub seed: u64,
}

pub struct Prior<'a> {
    pub name: String,
    pub model: &'a ScoreModel,
}

impl Prior<'_> {
    pub fn norm(&self) -> Option<&NormParams> {
        match self.model {
            ScoreModel::Learned { norm, .. } => norm.as_ref(),
            ScoreModel::AnalyticGaussian { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: Method,
    pub prior: String,
    pub factor: usize,
    pub missing_ratio: f64,
    pub seeds: Vec<u64>,
    pub nrmse: Vec<f64>,
    pub melr: Vec<f64>,
}

impl CellResult {
    pub fn nrmse_mean(&self) -> f64 {
        mean(&self.nrmse)
    }

    pub fn melr_mean(&self) -> f64 {
        mean(&self.melr)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sampler_seed(s: &BenchSettings, case: usize) -> u64 {
    derive_seed(derive_named(s.seed, "sampler"), case as u64)
}

/// Observations of case `case`: a cloud mask hiding `missing_ratio` of the
/// cells (skipped at 0) and an average-pooled field (skipped at factor 1).
pub fn case_observations(gt: &Field, case: usize, factor: usize, missing_ratio: f64, s: &BenchSettings) -> Result<Vec<Observation>> {
    let spec = *gt.spec();
    let noise = derive_seed(derive_named(s.seed, "noise"), case as u64);
    let mut obs = Vec::new();
    if missing_ratio > 0.0 {
        let tcc = gen_cloud(&CloudConfig {
            spec,
            correlation_length: s.mask_correlation_length,
            temporal_rho: s.mask_temporal_rho,
            seed: derive_seed(derive_named(s.seed, "cloud"), case as u64),
        })?;
        let mask = mask_from_cloud(&tcc, 1.0 - missing_ratio)?;
        obs.push(observe_noisy(&OperatorKind::Masking { mask }, gt, s.sigma_m, derive_seed(noise, 0))?);
    }
    if factor > 1 {
        obs.push(observe_noisy(&OperatorKind::Downsample { s_step: factor, t_step: 1 }, gt, s.sigma_m, derive_seed(noise, 1))?);
    }
    if obs.is_empty() {
        return Err(Error::Config("a benchmark cell needs factor > 1 or missing_ratio > 0".into()));
    }
    for o in &mut obs {
        o.lambda_m = s.lambda_m;
    }
    Ok(obs)
}

pub fn reconstruct(method: Method, prior: &Prior, obs: &[Observation], gt: &Field, seed: u64, s: &BenchSettings) -> Result<Field> {
    let spec = *gt.spec();
    match method {
        Method::Daps => daps_reconstruct(prior.model, obs, &s.schedule, &DapsConfig { seed, ..s.daps.clone() }, prior.norm(), spec),
        Method::Dps => dps_reconstruct(prior.model, obs, &s.schedule, s.dps_scale, seed, prior.norm(), spec),
    }
}

/// Every grid cell over every case, rows ordered method, prior, factor,
/// missing ratio.
pub fn run_grid(priors: &[Prior], cases: &[Field], sigma_x: f64, s: &BenchSettings) -> Result<Vec<CellResult>> {
    let mut rows = Vec::new();
    for &method in &s.methods {
        for prior in priors {
            for &factor in &s.factors {
                for &ratio in &s.missing_ratios {
                    let per_case = cases
                        .par_iter()
                        .enumerate()
                        .map(|(c, gt)| {
                            let obs = case_observations(gt, c, factor, ratio, s)?;
                            let seed = sampler_seed(s, c);
                            let x = reconstruct(method, prior, &obs, gt, seed, s)?;
                            Ok((seed, nrmse(&x, gt, sigma_x)?, melr(&x, gt)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    rows.push(CellResult {
                        method,
                        prior: prior.name.clone(),
                        factor,
                        missing_ratio: ratio,
                        seeds: per_case.iter().map(|r| r.0).collect(),
                        nrmse: per_case.iter().map(|r| r.1).collect(),
                        melr: per_case.iter().map(|r| r.2).collect(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Pick the DPS guidance scale with the lowest nRMSE on one validation case.
/// Diverging candidates score infinity. Returns the choice and every score.
pub fn tune_dps_scale(
    prior: &Prior,
    validation: &Field,
    factor: usize,
    missing_ratio: f64,
    candidates: &[f64],
    sigma_x: f64,
    s: &BenchSettings,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let probe = BenchSettings { seed: derive_named(s.seed, "validation"), ..s.clone() };
    let obs = case_observations(validation, 0, factor, missing_ratio, &probe)?;
    let seed = sampler_seed(&probe, 0);
    let scores = candidates
        .iter()
        .map(|&z| {
            let run = BenchSettings { dps_scale: z, ..probe.clone() };
            let score = match reconstruct(Method::Dps, prior, &obs, validation, seed, &run) {
                Ok(x) => nrmse(&x, validation, sigma_x)?,
                Err(Error::NonFiniteState(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok((z, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let best = scores
        .iter()
        .copied()
        .filter(|p| p.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::NonFiniteState("every DPS guidance scale diverged".into()))?;
    Ok((best.0, scores))
}

pub const TABLE_HEADER: &str = "method,prior,factor,missing_ratio,n_cases,nrmse_mean,nrmse_std,melr_mean,melr_std,guidance_scale,note";

fn std_of(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// One row per cell. DPS rows carry the stop-gradient caveat.
pub fn table_csv(rows: &[CellResult], s: &BenchSettings) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let (scale, note) = match r.method {
            Method::Daps => (String::new(), ""),
            Method::Dps => (format!("{:?}", s.dps_scale), "stop-gradient guidance: no backpropagation through the denoiser"),
        };
        writeln!(
            out,
            "{},{},{},{:?},{},{:?},{:?},{:?},{:?},{},{}",
            r.method,
            r.prior,
            r.factor,
            r.missing_ratio,
            r.nrmse.len(),
            r.nrmse_mean(),
            std_of(&r.nrmse),
            r.melr_mean(),
            std_of(&r.melr),
            scale,
            note
        )
        .unwrap();
    }
    out
}

pub fn cases_csv(rows: &[CellResult]) -> String {
    let mut out = String::from("method,prior,factor,missing_ratio,case,seed,nrmse,melr\n");
    for r in rows {
        for c in 0..r.nrmse.len() {
            writeln!(out, "{},{},{},{:?},{c},{},{:?},{:?}", r.method, r.prior, r.factor, r.missing_ratio, r.seeds[c], r.nrmse[c], r.melr[c]).unwrap();
        }
    }
    out
}
