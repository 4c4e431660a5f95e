//! Synthetic proxy data: log-normal Gaussian random field sequences standing
//! in for aerosol optical depth, and cloud-cover surrogates in [0, 1].
//!
//! Frames are synthesized spectrally: white noise is transformed to the
//! Fourier domain, multiplied by a radial filter, and transformed back. The
//! filter is rescaled so each innovation frame has unit marginal variance.
//! Frames then follow an AR(1) recursion
//! `f_t = rho * f_{t-1} + sqrt(1 - rho^2) * e_t`, which keeps unit variance.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::aodf;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, MaskField};
use crate::observe::mask_from_cloud;
use crate::rng::{self, derive_seed};
use crate::spectral::{fft2_real, ifft2_real, signed_freq};

#[derive(Debug, Clone, PartialEq)]
pub struct GrfConfig {
    pub spec: GridSpec,
    /// Exponent of the target isotropic power spectrum `k^-slope`.
    pub spectral_slope: f64,
    /// Lag-one frame correlation.
    pub temporal_rho: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub seed: u64,
}

impl GrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.temporal_rho) {
            return Err(Error::Range(format!("temporal_rho {} not in [0, 1]", self.temporal_rho)));
        }
        if !(self.spectral_slope >= 0.0) {
            return Err(Error::Range(format!("spectral_slope {} must be >= 0", self.spectral_slope)));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::Range(format!("amplitude {} must be > 0", self.amplitude)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudConfig {
    pub spec: GridSpec,
    /// Standard deviation, in cells, of the Gaussian smoothing kernel.
    pub correlation_length: f64,
    pub temporal_rho: f64,
    pub seed: u64,
}

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.correlation_length >= 1.0) {
            return Err(Error::Range(format!("correlation_length {} must be >= 1", self.correlation_length)));
        }
        if !(0.0..=1.0).contains(&self.temporal_rho) {
            return Err(Error::Range(format!("temporal_rho {} not in [0, 1]", self.temporal_rho)));
        }
        Ok(())
    }
}

/// Spectral filter over DFT cells (signed frequencies in cycles per cell),
/// rescaled so filtered white noise has unit variance.
fn unit_variance_filter(height: usize, width: usize, gain: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..height * width)
        .map(|idx| {
            let fy = signed_freq(idx / width, height) as f64 / height as f64;
            let fx = signed_freq(idx % width, width) as f64 / width as f64;
            gain(fy, fx)
        })
        .collect();
    let mean_sq = g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
    if mean_sq > 0.0 {
        let s = mean_sq.sqrt();
        g.iter_mut().for_each(|v| *v /= s);
    }
    g
}

fn filtered_noise(rng: &mut rng::Rng, filter: &[f64], height: usize, width: usize) -> Vec<f64> {
    let white = rng::normal_vec(rng, height * width);
    let mut spec = fft2_real(&white, height, width);
    for (c, g) in spec.iter_mut().zip(filter) {
        *c *= *g;
    }
    ifft2_real(spec, height, width)
}

fn ar1_sequence(rng: &mut rng::Rng, filter: &[f64], spec: &GridSpec, rho: f64) -> Vec<f64> {
    let (n, h, w) = spec.shape();
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    let innov_scale = (1.0 - rho * rho).max(0.0).sqrt();
    for t in 0..n {
        let e = filtered_noise(rng, filter, h, w);
        if t == 0 {
            out[..plane].copy_from_slice(&e);
        } else {
            let (prev, cur) = out.split_at_mut(t * plane);
            let prev = &prev[(t - 1) * plane..];
            for ((c, p), e) in cur[..plane].iter_mut().zip(prev).zip(&e) {
                *c = rho * p + innov_scale * e;
            }
        }
    }
    out
}

/// Power-law-spectrum log-normal field sequence. The DC coefficient is zeroed
/// before shaping; `offset` sets the mean of the Gaussian layer.
pub fn gen_grf(cfg: &GrfConfig) -> Result<Field> {
    cfg.validate()?;
    let (_, h, w) = cfg.spec.shape();
    let slope = cfg.spectral_slope;
    let filter = unit_variance_filter(h, w, |fy, fx| {
        // integer wavenumber magnitude
        let k = ((fy * h as f64).powi(2) + (fx * w as f64).powi(2)).sqrt();
        if k == 0.0 {
            0.0
        } else {
            k.powf(-slope / 2.0)
        }
    });
    let mut r = rng::rng(cfg.seed);
    let gauss = ar1_sequence(&mut r, &filter, &cfg.spec, cfg.temporal_rho);
    let data = gauss.into_iter().map(|v| (cfg.amplitude * v + cfg.offset).exp()).collect();
    Field::from_vec(cfg.spec, data)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Smooth total-cloud-cover surrogate with approximately uniform marginals.
pub fn gen_cloud(cfg: &CloudConfig) -> Result<Field> {
    cfg.validate()?;
    let (_, h, w) = cfg.spec.shape();
    let ell = cfg.correlation_length;
    // Gaussian smoothing kernel with std `ell` cells.
    let filter = unit_variance_filter(h, w, |fy, fx| {
        (-2.0 * std::f64::consts::PI.powi(2) * ell * ell * (fx * fx + fy * fy)).exp()
    });
    let mut r = rng::rng(cfg.seed);
    let gauss = ar1_sequence(&mut r, &filter, &cfg.spec, cfg.temporal_rho);
    Field::from_vec(cfg.spec, gauss.into_iter().map(std_normal_cdf).collect())
}

/// Options for attaching cloud-derived observation masks to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOptions {
    /// Target fraction of missing cells; the cloud threshold is `1 - fraction`.
    pub missing_fraction: f64,
    pub correlation_length: f64,
    pub temporal_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub seed: u64,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(Error::format(path, format!("line {}: expected path<TAB>seed[<TAB>mask]", lineno + 1)));
            }
            let seed = cols[1]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad seed {:?}", lineno + 1, cols[1])))?;
            entries.push(ManifestEntry {
                path: base.join(cols[0]),
                seed,
                mask: cols.get(2).map(|m| base.join(m)),
            });
        }
        Ok(Manifest { path: path.to_path_buf(), entries })
    }

    /// Load every sequence with its optional mask.
    pub fn load(&self) -> Result<Vec<(Field, Option<MaskField>)>> {
        self.entries
            .iter()
            .map(|e| {
                let f = aodf::read_field(&e.path)?;
                let m = e.mask.as_ref().map(aodf::read_mask).transpose()?;
                if let Some(m) = &m {
                    if m.spec().shape() != f.spec().shape() {
                        return Err(Error::format(&e.path, "mask shape differs from field"));
                    }
                }
                Ok((f, m))
            })
            .collect()
    }
}

/// Write `n_sequences` AODF files plus `manifest.tsv` into `out_dir`.
///
/// Sequence `i` uses seed `derive_seed(cfg.seed, i)`; its cloud mask, when
/// requested, uses `derive_seed(that_seed, 1)`.
pub fn make_dataset(cfg: &GrfConfig, n_sequences: usize, masks: Option<&MaskOptions>, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<Result<String>> = (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let field = gen_grf(&GrfConfig { seed, ..cfg.clone() })?;
            let name = format!("seq_{i:04}.aodf");
            aodf::write_field(&field, out_dir.join(&name))?;
            let mut row = format!("{name}\t{seed}");
            if let Some(m) = masks {
                let tcc = gen_cloud(&CloudConfig {
                    spec: cfg.spec,
                    correlation_length: m.correlation_length,
                    temporal_rho: m.temporal_rho,
                    seed: derive_seed(seed, 1),
                })?;
                let mask = mask_from_cloud(&tcc, 1.0 - m.missing_fraction)?;
                let mname = format!("seq_{i:04}.mask.aodf");
                aodf::write_mask(&mask, out_dir.join(&mname))?;
                write!(row, "\t{mname}").unwrap();
            }
            Ok(row)
        })
        .collect();
    let mut text = String::new();
    for r in rows {
        text.push_str(&r?);
        text.push('\n');
    }
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Manifest::read(&path)
}
