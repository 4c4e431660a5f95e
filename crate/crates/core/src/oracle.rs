//! Exact posteriors for linear observations of a diagonal Gaussian prior.

use ndarray::{s, Array3, Zip};

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::observe::OperatorKind;

/// Independent Gaussian per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Array3<f64>,
    pub var_diag: Array3<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Array3<f64>, var_diag: Array3<f64>) -> Result<Self> {
        if mean.dim() != var_diag.dim() {
            return Err(Error::Shape("mean and variance shapes differ".into()));
        }
        if let Some(i) = var_diag.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Range(format!("var_diag[{i}] must be positive")));
        }
        Ok(Self { mean, var_diag })
    }
}

/// Posterior of `x ~ prior` given `y = A x + sigma_y * xi`.
///
/// Masking and identity act cell by cell. Downsampling observes each block
/// mean once, a rank-one update per block: with `n = s^2` cells of prior
/// variances `v_i` and `S = sum(v_i) / n^2 + sigma_y^2`,
/// `mean_i += v_i / (n S) * (y - mean(mu))` and `var_i -= v_i^2 / (n^2 S)`.
/// The diagonal of that block posterior is returned. Frames skipped by
/// temporal subsampling keep the prior.
pub fn exact_gaussian_posterior(prior: &GaussianBelief, kind: &OperatorKind, y: &Field, sigma_y: f64) -> Result<GaussianBelief> {
    if !(sigma_y > 0.0) {
        return Err(Error::Range(format!("sigma_y {sigma_y} must be > 0")));
    }
    let shape = prior.mean.dim();
    let want = kind.output_shape(shape)?;
    if y.spec().shape() != want {
        return Err(Error::Shape(format!("y {:?}, operator output {:?}", y.spec().shape(), want)));
    }
    let mut post = prior.clone();
    let prec_y = 1.0 / (sigma_y * sigma_y);
    let fuse = |m: &mut f64, v: &mut f64, obs: f64| {
        let prec = 1.0 / *v + prec_y;
        *m = (*m / *v + obs * prec_y) / prec;
        *v = 1.0 / prec;
    };
    match kind {
        OperatorKind::Identity => {
            Zip::from(&mut post.mean).and(&mut post.var_diag).and(y.values()).for_each(|m, v, &o| fuse(m, v, o));
        }
        OperatorKind::Masking { mask } => {
            Zip::from(&mut post.mean).and(&mut post.var_diag).and(y.values()).and(mask.flags()).for_each(|m, v, &o, &f| {
                if f == 1 {
                    fuse(m, v, o)
                }
            });
        }
        &OperatorKind::Downsample { s_step, t_step } => {
            let n = (s_step * s_step) as f64;
            let (to, ho, wo) = want;
            for tt in 0..to {
                let t = tt * t_step;
                for bi in 0..ho {
                    for bj in 0..wo {
                        let blk = s![t, bi * s_step..(bi + 1) * s_step, bj * s_step..(bj + 1) * s_step];
                        let mu_bar = prior.mean.slice(blk).sum() / n;
                        let ssum = prior.var_diag.slice(blk).sum() / (n * n) + sigma_y * sigma_y;
                        let innov = y.values()[[tt, bi, bj]] - mu_bar;
                        let var_blk = prior.var_diag.slice(blk);
                        Zip::from(post.mean.slice_mut(blk)).and(&var_blk).for_each(|m, &v| *m += v / (n * ssum) * innov);
                        Zip::from(post.var_diag.slice_mut(blk)).and(&var_blk).for_each(|pv, &v| *pv = v - v * v / (n * n * ssum));
                    }
                }
            }
        }
    }
    Ok(post)
}

/// Per-cell sample mean and unbiased sample variance.
pub fn posterior_sample_stats(samples: &[Field]) -> Result<(Array3<f64>, Array3<f64>)> {
    if samples.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: samples.len() });
    }
    let shape = samples[0].spec().shape();
    if samples.iter().any(|s| s.spec().shape() != shape) {
        return Err(Error::Shape("samples differ in shape".into()));
    }
    let n = samples.len() as f64;
    let mut mean = Array3::zeros(shape);
    for s in samples {
        mean += s.values();
    }
    mean /= n;
    let mut var = Array3::zeros(shape);
    for s in samples {
        Zip::from(&mut var).and(s.values()).and(&mean).for_each(|v, &x, &m| *v += (x - m) * (x - m));
    }
    var /= n - 1.0;
    Ok((mean, var))
}
