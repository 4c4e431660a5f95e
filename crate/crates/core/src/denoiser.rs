//! Score models: the learned encoder-decoder denoiser with EDM
//! preconditioning, and an analytic diagonal-Gaussian model used as an
//! oracle. Both produce a clean estimate `x0_hat`; the score follows from
//! Tweedie's formula `(x0_hat - x) / sigma^2`.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Zip};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::NormParams;
use crate::kv::{KvDoc, Section};
use crate::net::{self, NetConfig, ParamInfo};
use crate::rng;

/// Data standard deviation in normalized space.
pub const SIGMA_DATA: f64 = 0.5;

pub fn c_skip(sigma: f64) -> f64 {
    SIGMA_DATA * SIGMA_DATA / (sigma * sigma + SIGMA_DATA * SIGMA_DATA)
}

pub fn c_out(sigma: f64) -> f64 {
    sigma * SIGMA_DATA / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

pub fn c_in(sigma: f64) -> f64 {
    1.0 / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

pub fn c_noise(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// Loss weight `(sigma^2 + sigma_d^2) / (sigma * sigma_d)^2`.
pub fn loss_weight(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2)
}

/// Loss weight of a cell that is visible to the network (`loss_weight`) or
/// hidden by the training mask (`1 / sigma_d^2`).
pub fn cell_weight(sigma: f64, visible: bool) -> f64 {
    if visible {
        loss_weight(sigma)
    } else {
        1.0 / (SIGMA_DATA * SIGMA_DATA)
    }
}

/// Named parameter tensors in a fixed flatten order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub infos: Vec<ParamInfo>,
    pub values: Vec<Vec<f64>>,
}

impl NetParams {
    pub fn zeros_like(&self) -> NetParams {
        NetParams { infos: self.infos.clone(), values: self.values.iter().map(|v| vec![0.0; v.len()]).collect() }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.concat()
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<NetParams> {
        if flat.len() != self.count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.count())));
        }
        let mut off = 0;
        let values = self
            .values
            .iter()
            .map(|v| {
                let s = flat[off..off + v.len()].to_vec();
                off += v.len();
                s
            })
            .collect();
        Ok(NetParams { infos: self.infos.clone(), values })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Fan-in uniform init; biases and the output convolution start at zero.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<NetParams> {
    cfg.validate()?;
    let infos = net::layout(cfg);
    let mut r = rng::rng(seed);
    let values = infos
        .iter()
        .map(|info| {
            if info.zero_init {
                vec![0.0; info.len()]
            } else {
                let bound = 1.0 / (info.fan_in as f64).sqrt();
                (0..info.len()).map(|_| r.random_range(-bound..bound)).collect()
            }
        })
        .collect();
    Ok(NetParams { infos, values })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreModel {
    Learned { config: NetConfig, params: NetParams, norm: Option<NormParams> },
    AnalyticGaussian { mean: Array3<f64>, var_diag: Array3<f64> },
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveSigma(sigma))
    }
}

/// Network input: `c_in * (x masked) ++ mask`, plus the masked `x` itself.
fn net_input(x: ArrayView3<f64>, mask: ArrayView3<u8>, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let xm: Vec<f64> = x.iter().zip(mask.iter()).map(|(&v, &m)| if m == 1 { v } else { 0.0 }).collect();
    let ci = c_in(sigma);
    let mut input: Vec<f64> = xm.iter().map(|v| ci * v).collect();
    input.extend(mask.iter().map(|&m| m as f64));
    (input, xm)
}

/// Learned denoiser on one window. Returns the tape, output node, and
/// `x0_hat`.
///
/// Cells outside the mask carry no information about `x0`, so they are
/// preconditioned as if their noise level were infinite: no skip term and
/// an output scale of `SIGMA_DATA`.
fn learned_forward(
    config: &NetConfig,
    params: &NetParams,
    x: ArrayView3<f64>,
    mask: ArrayView3<u8>,
    sigma: f64,
) -> (net::Tape, net::Var, Vec<f64>) {
    let (_, h, w) = x.dim();
    let (input, xm) = net_input(x, mask, sigma);
    let (tape, out) = net::run(config, &params.values, input, (h, w), c_noise(sigma));
    let (cs, co) = (c_skip(sigma), c_out(sigma));
    let x0: Vec<f64> = xm
        .iter()
        .zip(mask.iter())
        .zip(tape.value(out))
        .map(|((a, &m), f)| if m == 1 { cs * a + co * f } else { SIGMA_DATA * f })
        .collect();
    (tape, out, x0)
}

impl ScoreModel {
    /// Frames per model evaluation: `w` for the network, 1 for the
    /// time-separable Gaussian.
    pub fn window(&self) -> usize {
        match self {
            ScoreModel::Learned { config, .. } => config.window,
            ScoreModel::AnalyticGaussian { .. } => 1,
        }
    }

    pub fn analytic(mean: Array3<f64>, var_diag: Array3<f64>) -> Result<ScoreModel> {
        if mean.dim() != var_diag.dim() {
            return Err(Error::Shape("mean and var_diag shapes differ".into()));
        }
        if let Some(i) = var_diag.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Range(format!("var_diag[{i}] must be positive")));
        }
        if let Some(index) = mean.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ScoreModel::AnalyticGaussian { mean, var_diag })
    }

    /// Clean estimate for a window. For the Gaussian model `x` must have the
    /// shape of its mean.
    pub fn forward(&self, x: ArrayView3<f64>, mask: ArrayView3<u8>, sigma: f64) -> Result<Array3<f64>> {
        check_sigma(sigma)?;
        if x.dim() != mask.dim() {
            return Err(Error::Shape(format!("window {:?} vs mask {:?}", x.dim(), mask.dim())));
        }
        match self {
            ScoreModel::Learned { config, params, .. } => {
                let (w, h, wd) = x.dim();
                if w != config.window {
                    return Err(Error::Shape(format!("window of {w} frames, model expects {}", config.window)));
                }
                config.check_grid(h, wd)?;
                let (_, _, x0) = learned_forward(config, params, x, mask, sigma);
                Ok(Array3::from_shape_vec(x.dim(), x0).unwrap())
            }
            ScoreModel::AnalyticGaussian { mean, var_diag } => {
                if x.dim() != mean.dim() {
                    return Err(Error::Shape(format!("input {:?} vs prior {:?}", x.dim(), mean.dim())));
                }
                Ok(gaussian_x0(x, mean.view(), var_diag.view(), sigma))
            }
        }
    }

    /// Tweedie score `(forward - x) / sigma^2`.
    pub fn score(&self, x: ArrayView3<f64>, mask: ArrayView3<u8>, sigma: f64) -> Result<Array3<f64>> {
        let x0 = self.forward(x, mask, sigma)?;
        Ok((x0 - x) / (sigma * sigma))
    }
}

/// Posterior mean of `x0` given `x = x0 + sigma * xi` under `N(mean, var)`.
pub fn gaussian_x0(x: ArrayView3<f64>, mean: ArrayView3<f64>, var: ArrayView3<f64>, sigma: f64) -> Array3<f64> {
    let s2 = sigma * sigma;
    let mut out = Array3::zeros(x.dim());
    Zip::from(&mut out).and(x).and(mean).and(var).for_each(|o, &xv, &m, &v| *o = (v * xv + s2 * m) / (v + s2));
    out
}

/// One training example: clean window, observation mask `A`, training mask
/// `A_tilde`, noise level and noise draw.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Array3<f64>,
    pub a: Array3<u8>,
    pub a_tilde: Array3<u8>,
    pub sigma: f64,
    pub noise: Array3<f64>,
}

/// Ambient denoising loss and its exact parameter gradient.
///
/// The loss is the weighted squared error over all `A`-valid cells of the
/// batch divided by their count. Cells with `A = 0` are never read. Cells
/// hidden by the training mask are weighted `1 / SIGMA_DATA^2`, the limit of
/// `loss_weight` as the noise level grows.
/// Items run concurrently; gradients are summed in batch order.
pub fn loss_and_grad(config: &NetConfig, params: &NetParams, batch: &[TrainItem]) -> Result<(f64, NetParams)> {
    loss_and_grad_items(config, params, batch).map(|(l, g, _)| (l, g))
}

/// As [`loss_and_grad`], also returning each item's weighted error sum and
/// `A`-valid cell count.
pub fn loss_and_grad_items(config: &NetConfig, params: &NetParams, batch: &[TrainItem]) -> Result<(f64, NetParams, Vec<(f64, usize)>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for item in batch {
        check_sigma(item.sigma)?;
        let shape = item.x0.dim();
        if [item.a.dim(), item.a_tilde.dim(), item.noise.dim()].iter().any(|&d| d != shape) || shape.0 != config.window {
            return Err(Error::Shape("training item arrays disagree".into()));
        }
        if let Some(index) = item.a_tilde.iter().zip(item.a.iter()).position(|(&t, &a)| t > a) {
            return Err(Error::MaskViolation { index });
        }
    }
    let counts: Vec<usize> = batch.iter().map(|it| it.a.iter().filter(|&&m| m == 1).count()).collect();
    let count: usize = counts.iter().sum();
    if count == 0 {
        return Ok((0.0, params.zeros_like(), counts.iter().map(|&n| (0.0, n)).collect()));
    }
    let inv = 1.0 / count as f64;
    let parts: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|item| {
            let sigma = item.sigma;
            let mut noisy = Array3::zeros(item.x0.dim());
            Zip::from(&mut noisy).and(&item.x0).and(&item.noise).and(&item.a_tilde).for_each(|o, &x, &n, &m| {
                if m == 1 {
                    *o = x + sigma * n;
                }
            });
            let (tape, out, x0_hat) = learned_forward(config, params, noisy.view(), item.a_tilde.view(), sigma);
            let visible = (cell_weight(sigma, true), c_out(sigma));
            let hidden = (cell_weight(sigma, false), SIGMA_DATA);
            let mut loss = 0.0;
            let mut seed = vec![0.0; x0_hat.len()];
            let cells = item.x0.iter().zip(item.a.iter()).zip(item.a_tilde.iter());
            for ((s, &xh), ((&x, &a), &t)) in seed.iter_mut().zip(&x0_hat).zip(cells) {
                if a == 1 {
                    let (lam, scale) = if t == 1 { visible } else { hidden };
                    let d = xh - x;
                    loss += lam * d * d;
                    *s = 2.0 * lam * d * inv * scale;
                }
            }
            (loss, tape.backward(out, &seed, params.values.len()))
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut items = Vec::with_capacity(batch.len());
    for ((l, g), &n) in parts.into_iter().zip(&counts) {
        loss += l;
        items.push((l, n));
        for (acc, gi) in grads.values.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss * inv, grads, items))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AODP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_section(config: &NetConfig, norm: Option<&NormParams>) -> Section {
    let mut s = Section::default();
    s.set("window", config.window);
    s.set("base_channels", config.base_channels);
    s.set("n_levels", config.n_levels);
    s.set("attn_heads", config.attn_heads);
    s.set("sigma_data", format!("{SIGMA_DATA:?}"));
    if let Some(n) = norm {
        s.set("q_lo", format!("{:?}", n.q_lo));
        s.set("q_hi", format!("{:?}", n.q_hi));
    }
    s
}

/// Checkpoint layout (little-endian): magic `AODP`, version `u32`, parameter
/// count `u64`, section count `u32`; per section a `u32` name length, the
/// name, `u32` rank and `u32` dims; the `f32` payload in flatten order; then
/// the config as UTF-8 `key = value` text to end of file.
pub fn encode_checkpoint(config: &NetConfig, params: &NetParams, norm: Option<&NormParams>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.count() as u64).to_le_bytes());
    out.extend_from_slice(&(params.infos.len() as u32).to_le_bytes());
    for info in &params.infos {
        out.extend_from_slice(&(info.name.len() as u32).to_le_bytes());
        out.extend_from_slice(info.name.as_bytes());
        out.extend_from_slice(&(info.shape.len() as u32).to_le_bytes());
        for &d in &info.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in params.values.iter().flatten() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(config_section(config, norm).to_text().as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Returns the model (with normalizer when recorded).
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ScoreModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let total = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let n_sections = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "section name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut values = Vec::with_capacity(n_sections);
    for (_, shape) in &table {
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        values.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect::<Vec<_>>());
    }
    if values.iter().map(Vec::len).sum::<usize>() != total {
        return Err(Error::format(path, "parameter count does not match section table"));
    }
    let footer = std::str::from_utf8(&bytes[r.pos..]).map_err(|_| Error::format(path, "config footer is not UTF-8"))?;
    let doc = KvDoc::parse(footer).map_err(|e| Error::format(path, e.to_string()))?;
    let g = &doc.global;
    let config = NetConfig {
        window: g.require("window")?,
        base_channels: g.require("base_channels")?,
        n_levels: g.require("n_levels")?,
        attn_heads: g.require("attn_heads")?,
    };
    config.validate()?;
    let infos = net::layout(&config);
    if infos.len() != table.len() || infos.iter().zip(&table).any(|(i, (n, s))| &i.name != n || &i.shape != s) {
        return Err(Error::format(path, "section table does not match the recorded architecture"));
    }
    let norm = match (g.parse::<f64>("q_lo")?, g.parse::<f64>("q_hi")?) {
        (Some(lo), Some(hi)) => Some(NormParams::new(lo, hi)?),
        _ => None,
    };
    Ok(ScoreModel::Learned { config, params: NetParams { infos, values }, norm })
}

pub fn write_checkpoint(path: impl AsRef<Path>, config: &NetConfig, params: &NetParams, norm: Option<&NormParams>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(config, params, norm)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ScoreModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> NetConfig {
        NetConfig { window: 3, base_channels: 4, n_levels: 2, attn_heads: 2 }
    }

    fn rand3(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_vec(shape, rng::normal_vec(&mut rng::rng(seed), shape.0 * shape.1 * shape.2)).unwrap()
    }

    #[test]
    fn preconditioning_identities() {
        for s in [1e-3, 0.1, 0.5, 3.0, 80.0] {
            // c_skip^2 * (s^2 + sd^2) + c_out^2 = sd^2 (unit-variance target)
            let lhs = c_skip(s).powi(2) * s * s + (1.0 - c_skip(s)).powi(2) * SIGMA_DATA.powi(2);
            assert!((lhs - c_out(s).powi(2)).abs() < 1e-12);
            assert!((loss_weight(s) * c_out(s).powi(2) - 1.0).abs() < 1e-12);
        }
        assert_eq!(c_noise(1.0), 0.0);
    }

    #[test]
    fn zero_final_layer_gives_skip() {
        let cfg = desk();
        let p = init_params(&cfg, 3).unwrap();
        let out = p.infos.iter().position(|i| i.name == "out.w").unwrap();
        assert!(p.values[out].iter().all(|&v| v == 0.0));
        let m = ScoreModel::Learned { config: cfg, params: p, norm: None };
        let x = rand3(1, (3, 8, 8));
        let mask = Array3::from_elem((3, 8, 8), 1u8);
        for s in [0.01, 0.7, 40.0] {
            let y = m.forward(x.view(), mask.view(), s).unwrap();
            assert_eq!(y, x.mapv(|v| c_skip(s) * v));
        }
    }

    #[test]
    fn init_is_deterministic_and_count_matches() {
        let cfg = desk();
        assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
        assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
        // w=3, base=4, levels=2, emb=16, 8 Fourier features:
        // emb 8*16+16=144; stem 6*4*9+4=220;
        // enc0 (4->4): 148+68+148=364; enc1 (4->8): 296+136+584+40=1056;
        // mid (8->16): 1168+272+2320+144=3904;
        // attn (16, 3 frames): proj_in 16*48+48=816, 4*256=1024, proj_out 48*16+16=784 -> 2624;
        // dec1 (16+8->8): 1736+136+584+200=2656; dec0 (12->4): 436+68+148+52=704;
        // out 4*3*9+3=111.
        let total = 144 + 220 + 364 + 1056 + 3904 + 2624 + 2656 + 704 + 111;
        assert_eq!(init_params(&cfg, 0).unwrap().count(), total);
    }

    #[test]
    fn flatten_round_trip() {
        let p = init_params(&desk(), 1).unwrap();
        assert_eq!(p.unflatten(&p.flatten()).unwrap(), p);
        assert!(p.unflatten(&[0.0]).is_err());
    }

    #[test]
    fn analytic_limits() {
        let shape = (1, 4, 4);
        let mean = rand3(1, shape);
        let var = Array3::from_elem(shape, 1.0);
        let m = ScoreModel::analytic(mean.clone(), var.clone()).unwrap();
        let x = rand3(2, shape);
        let mask = Array3::from_elem(shape, 1u8);
        let small = m.forward(x.view(), mask.view(), 1e-6).unwrap();
        assert!((&small - &x).iter().all(|d| d.abs() < 1e-4));
        let big = m.forward(x.view(), mask.view(), 1e3).unwrap();
        for (b, mu) in big.iter().zip(mean.iter()) {
            assert!((b - mu).abs() <= 1e-3 * mu.abs().max(1e-3) + 1e-6);
        }
        let s = m.score(x.view(), mask.view(), 1e-3).unwrap();
        for ((sv, xv), mu) in s.iter().zip(x.iter()).zip(mean.iter()) {
            let exact = -(xv - mu);
            assert!((sv - exact).abs() <= 1e-3 * exact.abs().max(1e-6));
        }
        // marginal N(mean, var + sigma^2) score
        let sig = 0.3 * 2f64.sqrt();
        let s = m.score(x.view(), mask.view(), sig).unwrap();
        for ((sv, xv), mu) in s.iter().zip(x.iter()).zip(mean.iter()) {
            let exact = -(xv - mu) / (1.0 + sig * sig);
            assert!((sv - exact).abs() <= 1e-10 * exact.abs().max(1e-12));
        }
        assert!(m.score(mean.view(), mask.view(), 0.4).unwrap().iter().all(|&v| v.abs() < 1e-12));
        assert!(ScoreModel::analytic(mean.clone(), Array3::zeros(shape)).is_err());
        assert!(m.forward(x.view(), mask.view(), 0.0).is_err());
    }

    #[test]
    fn loss_masks() {
        let cfg = desk();
        let p = init_params(&cfg, 2).unwrap();
        let shape = (3, 8, 8);
        let a = rand3(3, shape).mapv(|v| (v > -0.3) as u8);
        let b = rand3(4, shape).mapv(|v| (v > -0.5) as u8);
        let at = &a * &b;
        let mut item = TrainItem { x0: rand3(5, shape), a: a.clone(), a_tilde: at, sigma: 0.8, noise: rand3(6, shape) };
        let (l1, g1) = loss_and_grad(&cfg, &p, std::slice::from_ref(&item)).unwrap();
        Zip::from(&mut item.x0).and(&a).for_each(|v, &m| {
            if m == 0 {
                *v = 1e6;
            }
        });
        let (l2, g2) = loss_and_grad(&cfg, &p, std::slice::from_ref(&item)).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
        item.a_tilde = Array3::from_elem(shape, 1);
        assert!(matches!(loss_and_grad(&cfg, &p, &[item]), Err(Error::MaskViolation { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = desk();
        let mut p = init_params(&cfg, 9).unwrap();
        for v in p.values.iter_mut().flatten() {
            *v = (*v as f32) as f64;
        }
        let norm = NormParams::new(-0.25, 1.5).unwrap();
        let bytes = encode_checkpoint(&cfg, &p, Some(&norm));
        assert_eq!(&bytes[..4], b"AODP");
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ScoreModel::Learned { config: cfg.clone(), params: p.clone(), norm: Some(norm) });
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("mem")).is_err());
        assert!(decode_checkpoint(&bytes[..100], Path::new("mem")).is_err());
    }
}
