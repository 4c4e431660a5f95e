//! Evaluation metrics: nRMSE, radially averaged power spectra, MELR,
//! temporal autocorrelation and per-cell climatology.
//!
//! Spectrum convention: the frame mean is removed, the unnormalized DFT `F`
//! is taken over the full grid, and each DFT cell carries power
//! `|F|^2 / (H W)^2`. Cells are binned into integer rings
//! `k = round(sqrt(kx^2 + ky^2))` over the full (two-sided) spectrum, and a
//! bin's power is the mean over its cells. With this convention
//! `sum_k power_k * n_k` equals the population variance of the frame.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::spectral::{fft2_real, wavenumber};

/// Header line written above spectrum dumps.
pub const SPECTRUM_CONVENTION: &str =
    "# rapsd: mean-removed, power per DFT cell |F|^2/(H*W)^2, two-sided integer rings, bin mean; sum(power*n) = population variance";

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub wavenumbers: Vec<usize>,
    pub power: Vec<f64>,
    pub n_contributors: Vec<usize>,
}

impl Spectrum {
    pub fn power_at(&self, k: usize) -> Option<f64> {
        self.wavenumbers.iter().position(|&w| w == k).map(|i| self.power[i])
    }

    pub fn k_max(&self) -> usize {
        self.wavenumbers.last().copied().unwrap_or(0)
    }
}

pub fn rapsd(frame: ArrayView2<f64>) -> Spectrum {
    let (h, w) = frame.dim();
    let vals: Vec<f64> = frame.iter().copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let centred: Vec<f64> = vals.iter().map(|v| v - mean).collect();
    let f = fft2_real(&centred, h, w);
    let norm = ((h * w) as f64).powi(2);
    let kmax = wavenumber(h / 2, w / 2, h, w).round() as usize;
    let mut sum = vec![0.0; kmax + 1];
    let mut cnt = vec![0usize; kmax + 1];
    for i in 0..h {
        for j in 0..w {
            let k = wavenumber(i, j, h, w).round() as usize;
            sum[k] += f[i * w + j].norm_sqr() / norm;
            cnt[k] += 1;
        }
    }
    let mut s = Spectrum { wavenumbers: Vec::new(), power: Vec::new(), n_contributors: Vec::new() };
    for k in 0..=kmax {
        if cnt[k] > 0 {
            s.wavenumbers.push(k);
            s.power.push(sum[k] / cnt[k] as f64);
            s.n_contributors.push(cnt[k]);
        }
    }
    s
}

/// Bin-wise mean of spectra sharing the same bins.
pub fn mean_spectrum(spectra: &[Spectrum]) -> Result<Spectrum> {
    let first = spectra.first().ok_or(Error::EmptySpectrum)?;
    if spectra.iter().any(|s| s.wavenumbers != first.wavenumbers) {
        return Err(Error::Shape("spectra have different bins".into()));
    }
    let mut out = first.clone();
    for (i, p) in out.power.iter_mut().enumerate() {
        *p = spectra.iter().map(|s| s.power[i]).sum::<f64>() / spectra.len() as f64;
    }
    Ok(out)
}

/// Mean |ln ratio| over `k in [1, K]` for one pair of spectra. Returns the
/// mean and the number of excluded bins, or `None` when every bin was excluded.
fn log_ratio_mean(gen: &Spectrum, gt: &Spectrum) -> (Option<f64>, usize) {
    let k_top = gen.k_max().min(gt.k_max());
    let mut acc = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for k in 1..=k_top {
        match (gen.power_at(k), gt.power_at(k)) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 => {
                acc += (a / b).ln().abs();
                n += 1;
            }
            (Some(_), Some(_)) => excluded += 1,
            _ => {}
        }
    }
    ((n > 0).then(|| acc / n as f64), excluded)
}

fn melr_pairs(pairs: &[(Spectrum, Spectrum)]) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    let mut excluded = 0usize;
    for (g, t) in pairs {
        let (m, ex) = log_ratio_mean(g, t);
        excluded += ex;
        if let Some(m) = m {
            total += m;
            frames += 1;
        }
    }
    if excluded > 0 {
        log::warn!("melr: {excluded} zero-power bins excluded");
    }
    if frames == 0 {
        return Err(Error::EmptySpectrum);
    }
    Ok(total / frames as f64)
}

fn check_same(a: &Field, b: &Field) -> Result<()> {
    if a.spec().shape() != b.spec().shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.spec().shape(), b.spec().shape())));
    }
    Ok(())
}

/// Mean absolute log ratio of spectra, averaged over wavenumbers then frames.
pub fn melr(gen: &Field, gt: &Field) -> Result<f64> {
    check_same(gen, gt)?;
    let pairs: Vec<(Spectrum, Spectrum)> =
        (0..gen.spec().n_time).into_par_iter().map(|t| (rapsd(gen.frame(t)), rapsd(gt.frame(t)))).collect();
    melr_pairs(&pairs)
}

/// MELR between two sample sets, per frame on the set-mean spectra.
pub fn melr_sets(gen: &[Field], gt: &[Field]) -> Result<f64> {
    let first = gen.first().ok_or(Error::EmptySpectrum)?;
    if gt.is_empty() {
        return Err(Error::EmptySpectrum);
    }
    for f in gen.iter().chain(gt) {
        check_same(first, f)?;
    }
    let pairs = (0..first.spec().n_time)
        .map(|t| {
            let a = mean_spectrum(&gen.iter().map(|f| rapsd(f.frame(t))).collect::<Vec<_>>())?;
            let b = mean_spectrum(&gt.iter().map(|f| rapsd(f.frame(t))).collect::<Vec<_>>())?;
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    melr_pairs(&pairs)
}

/// Per-frame RMSE divided by `sigma_x`, averaged over frames.
pub fn nrmse(gen: &Field, gt: &Field, sigma_x: f64) -> Result<f64> {
    check_same(gen, gt)?;
    if !(sigma_x > 0.0) {
        return Err(Error::Range(format!("sigma_x {sigma_x} must be > 0")));
    }
    let n_t = gen.spec().n_time;
    let total: f64 = (0..n_t)
        .map(|t| {
            let (a, b) = (gen.frame(t), gt.frame(t));
            let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
            mse.sqrt() / sigma_x
        })
        .sum();
    Ok(total / n_t as f64)
}

/// Population standard deviation pooled over every cell of every field.
pub fn dataset_std(fields: &[Field]) -> Result<f64> {
    let n: usize = fields.iter().map(|f| f.as_slice().len()).sum();
    if n == 0 {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    let mean = fields.iter().flat_map(|f| f.as_slice()).sum::<f64>() / n as f64;
    Ok((fields.iter().flat_map(|f| f.as_slice()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcfCurve {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-cell autocorrelation (biased estimator, so every value lies in
/// [-1, 1]) averaged over cells with nonzero variance.
pub fn temporal_acf(x: &Field, max_lag: usize) -> Result<AcfCurve> {
    let (n_t, h, w) = x.spec().shape();
    if max_lag < 1 || max_lag >= n_t {
        return Err(Error::Range(format!("max_lag {max_lag} must be in [1, {})", n_t)));
    }
    let v = x.values();
    let mut sums = vec![0.0; max_lag + 1];
    let mut cells = 0usize;
    let mut series = vec![0.0; n_t];
    for i in 0..h {
        for j in 0..w {
            for t in 0..n_t {
                series[t] = v[[t, i, j]];
            }
            let mean = series.iter().sum::<f64>() / n_t as f64;
            series.iter_mut().for_each(|s| *s -= mean);
            let c0: f64 = series.iter().map(|s| s * s).sum();
            if c0 <= 0.0 {
                continue;
            }
            cells += 1;
            sums[0] += 1.0;
            for (lag, acc) in sums.iter_mut().enumerate().skip(1) {
                *acc += series[..n_t - lag].iter().zip(&series[lag..]).map(|(a, b)| a * b).sum::<f64>() / c0;
            }
        }
    }
    if cells == 0 {
        return Err(Error::AllConstant);
    }
    let mut values: Vec<f64> = sums.iter().map(|s| s / cells as f64).collect();
    values[0] = 1.0;
    Ok(AcfCurve { lags: (0..=max_lag).collect(), values })
}

/// Per-cell temporal mean and population standard deviation.
pub fn spatial_mean_std(x: &Field) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n_t, h, w) = x.spec().shape();
    if n_t < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n_t });
    }
    let v = x.values();
    let mut mean = Array2::zeros((h, w));
    let mut std = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let m = (0..n_t).map(|t| v[[t, i, j]]).sum::<f64>() / n_t as f64;
            let var = (0..n_t).map(|t| (v[[t, i, j]] - m).powi(2)).sum::<f64>() / n_t as f64;
            mean[[i, j]] = m;
            std[[i, j]] = var.sqrt();
        }
    }
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::rng;
    use proptest::prelude::*;

    fn rand_field(seed: u64, t: usize, h: usize, w: usize) -> Field {
        Field::from_vec(GridSpec::new(t, h, w).unwrap(), rng::normal_vec(&mut rng::rng(seed), t * h * w)).unwrap()
    }

    #[test]
    fn constant_frame_has_no_power() {
        let f = Field::constant(GridSpec::new(1, 8, 8).unwrap(), 3.0);
        assert!(rapsd(f.frame(0)).power.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn pure_tone_lands_in_its_ring() {
        let (h, w) = (32, 32);
        let frame = Array2::from_shape_fn((h, w), |(_, j)| (2.0 * std::f64::consts::PI * 4.0 * j as f64 / w as f64).cos());
        let s = rapsd(frame.view());
        let total: f64 = s.power.iter().zip(&s.n_contributors).map(|(p, n)| p * *n as f64).sum();
        let at4 = s.power_at(4).unwrap() * s.n_contributors[s.wavenumbers.iter().position(|&k| k == 4).unwrap()] as f64;
        assert!(at4 >= 0.99 * total);
    }

    #[test]
    fn parseval() {
        for (seed, h, w) in [(1, 8, 8), (2, 16, 12), (3, 9, 7)] {
            let f = rand_field(seed, 1, h.max(4), w.max(4));
            let s = rapsd(f.frame(0));
            let lhs: f64 = s.power.iter().zip(&s.n_contributors).map(|(p, n)| p * *n as f64).sum();
            let vals = f.as_slice();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let rhs = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((lhs - rhs).abs() <= 1e-8 * rhs);
        }
    }

    #[test]
    fn melr_identities() {
        let gt = rand_field(4, 3, 16, 16);
        assert_eq!(melr(&gt, &gt).unwrap(), 0.0);
        let mut scaled = gt.values().clone();
        for t in 0..3 {
            let m = gt.frame(t).mean().unwrap();
            scaled.slice_mut(ndarray::s![t, .., ..]).mapv_inplace(|v| 2.0 * (v - m) + m);
        }
        let scaled = Field::new(*gt.spec(), scaled).unwrap();
        assert!((melr(&scaled, &gt).unwrap() - 4f64.ln()).abs() < 1e-9);
        let c = Field::constant(*gt.spec(), 1.0);
        assert!(matches!(melr(&c, &gt), Err(Error::EmptySpectrum)));
    }

    /// Direct loop: explicit DFT sums per cell, ring bins, |ln ratio|.
    fn melr_reference(a: &Field, b: &Field) -> f64 {
        let (n_t, h, w) = a.spec().shape();
        let spectrum = |f: &Field, t: usize| {
            let fr = f.frame(t);
            let m = fr.mean().unwrap();
            let mut bins = std::collections::BTreeMap::<usize, (f64, usize)>::new();
            for u in 0..h {
                for v in 0..w {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..h {
                        for j in 0..w {
                            let ph = -2.0 * std::f64::consts::PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                            re += (fr[[i, j]] - m) * ph.cos();
                            im += (fr[[i, j]] - m) * ph.sin();
                        }
                    }
                    let ku = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 };
                    let kv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 };
                    let k = (ku * ku + kv * kv).sqrt().round() as usize;
                    let e = bins.entry(k).or_insert((0.0, 0));
                    e.0 += (re * re + im * im) / ((h * w) as f64).powi(2);
                    e.1 += 1;
                }
            }
            bins
        };
        let mut tot = 0.0;
        for t in 0..n_t {
            let (sa, sb) = (spectrum(a, t), spectrum(b, t));
            let kmax = *sa.keys().last().unwrap();
            let vals: Vec<f64> =
                (1..=kmax).map(|k| ((sa[&k].0 / sa[&k].1 as f64) / (sb[&k].0 / sb[&k].1 as f64)).ln().abs()).collect();
            tot += vals.iter().sum::<f64>() / vals.len() as f64;
        }
        tot / n_t as f64
    }

    #[test]
    fn melr_matches_reference() {
        let a = rand_field(5, 2, 8, 8);
        let b = rand_field(6, 2, 8, 8);
        assert!((melr(&a, &b).unwrap() - melr_reference(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn nrmse_cases() {
        let gt = rand_field(7, 3, 8, 8);
        assert_eq!(nrmse(&gt, &gt, 1.3).unwrap(), 0.0);
        let shifted = gt.map(|v| v + 0.5).unwrap();
        assert!((nrmse(&shifted, &gt, 2.0).unwrap() - 0.25).abs() < 1e-15);
        let gen = rand_field(8, 3, 8, 8);
        let mut reference = 0.0;
        for t in 0..3 {
            let mut acc = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    acc += (gen.values()[[t, i, j]] - gt.values()[[t, i, j]]).powi(2);
                }
            }
            reference += (acc / 64.0).sqrt() / 0.7;
        }
        reference /= 3.0;
        assert!((nrmse(&gen, &gt, 0.7).unwrap() - reference).abs() <= 1e-12 * reference);
    }

    #[test]
    fn acf_white_and_ar1() {
        let spec = GridSpec::new(256, 8, 8).unwrap();
        let white = Field::from_vec(spec, rng::normal_vec(&mut rng::rng(9), spec.len())).unwrap();
        let a = temporal_acf(&white, 3).unwrap();
        assert_eq!(a.values[0], 1.0);
        assert!(a.values[1].abs() < 0.1);
        let mut r = rng::rng(10);
        let mut data = vec![0.0; spec.len()];
        let plane = 64;
        for t in 0..256 {
            for c in 0..plane {
                let e = rng::normal(&mut r);
                data[t * plane + c] = if t == 0 { e } else { 0.9 * data[(t - 1) * plane + c] + (1.0f64 - 0.81).sqrt() * e };
            }
        }
        let ar = Field::from_vec(spec, data).unwrap();
        let v = temporal_acf(&ar, 1).unwrap().values[1];
        assert!((0.8..=0.95).contains(&v), "{v}");
        assert!(matches!(temporal_acf(&Field::zeros(spec), 2), Err(Error::AllConstant)));
    }

    #[test]
    fn climatology() {
        let spec = GridSpec::new(2, 4, 4).unwrap();
        let f = Field::from_vec(spec, (0..32).map(|i| if i < 16 { 1.0 } else { 4.0 }).collect()).unwrap();
        let (m, s) = spatial_mean_std(&f).unwrap();
        assert!(m.iter().all(|&v| v == 2.5) && s.iter().all(|&v| v == 1.5));
        let (_, s) = spatial_mean_std(&Field::constant(spec, 2.0)).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn invariants(seed in 0u64..5000, c in -5.0f64..5.0) {
            let a = rand_field(seed, 4, 8, 8);
            let b = rand_field(seed + 1, 4, 8, 8);
            prop_assert!((melr(&a, &b).unwrap() - melr(&b, &a).unwrap()).abs() < 1e-12);
            let shifted = a.map(|v| v + c).unwrap();
            let (s0, s1) = (rapsd(a.frame(0)), rapsd(shifted.frame(0)));
            for (p, q) in s0.power.iter().zip(&s1.power) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            }
            prop_assert!((nrmse(&shifted, &a, 1.0).unwrap() - c.abs()).abs() < 1e-12);
            for v in temporal_acf(&a, 3).unwrap().values {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
