//! Corruption-aware training of the denoiser on incomplete sequences.
//!
//! Each step draws i.i.d. windows (sequence, centre frame) with frame
//! replication at the ends, a log-normal noise level per window, and an
//! extra dropout mask `B`; the network sees `A * B` and is scored on `A`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array3, Zip};
use rand::Rng as _;

use crate::denoiser::{self, NetParams, TrainItem};
use crate::error::{Error, Result};
use crate::grid::{fit_normalizer_masked, normalize, normalize_masked, Field, GridSpec, MaskField, NormParams};
use crate::net::NetConfig;
use crate::rng::{self, derive_named, derive_seed};
use crate::synth::{gen_cloud, CloudConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutKind {
    Rects,
    Cloudlike,
    None,
}

impl std::str::FromStr for DropoutKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rects" => Ok(DropoutKind::Rects),
            "cloudlike" => Ok(DropoutKind::Cloudlike),
            "none" => Ok(DropoutKind::None),
            _ => Err(Error::Config(format!("unknown dropout_kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for DropoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropoutKind::Rects => "rects",
            DropoutKind::Cloudlike => "cloudlike",
            DropoutKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown lr_schedule {s:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub p_mean: f64,
    pub p_std: f64,
    pub dropout_kind: DropoutKind,
    pub dropout_rate: f64,
    /// Smoothing length in cells for cloudlike dropout.
    pub dropout_scale: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
    /// Fit and apply the robust normalizer; off for data already in model space.
    pub normalize: bool,
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
            dropout_kind: DropoutKind::None,
            dropout_rate: 0.0,
            dropout_scale: 3.0,
            batch_size: 8,
            n_steps: 1000,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            ema_decay: 0.999,
            normalize: true,
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 0.9]", self.dropout_rate)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.p_std > 0.0) {
            return Err(Error::Config(format!("p_std {} must be > 0", self.p_std)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} not in [0, 1)", self.ema_decay)));
        }
        if !(self.dropout_scale >= 1.0) {
            return Err(Error::Config(format!("dropout_scale {} must be >= 1", self.dropout_scale)));
        }
        Ok(())
    }
}

/// `exp(p_mean + p_std * z)` with `z` drawn from stream `i` of `seed`.
pub fn sample_sigma(cfg: &TrainConfig, seed: u64, i: u64) -> f64 {
    let mut r = rng::rng(derive_seed(derive_named(seed, "sigma"), i));
    (cfg.p_mean + cfg.p_std * rng::normal(&mut r)).exp()
}

fn drop_rects(a: &Array3<u8>, rate: f64, r: &mut rng::Rng) -> Array3<u8> {
    let (t, h, w) = a.dim();
    let mut b = Array3::from_elem(a.dim(), 1u8);
    let target = (rate * (h * w) as f64).round() as usize;
    for f in 0..t {
        let mut frame = b.slice_mut(s![f, .., ..]);
        let mut dropped = 0;
        while dropped < target {
            let rh = r.random_range(1..=(h / 2).max(1));
            let rw = r.random_range(1..=(w / 2).max(1));
            let i0 = r.random_range(0..=h - rh);
            let j0 = r.random_range(0..=w - rw);
            for v in frame.slice_mut(s![i0..i0 + rh, j0..j0 + rw]).iter_mut() {
                if *v == 1 && dropped < target {
                    *v = 0;
                    dropped += 1;
                }
            }
        }
    }
    b
}

/// Drops the `rate` fraction of cells with the largest smooth-noise values.
fn drop_cloudlike(a: &Array3<u8>, rate: f64, scale: f64, seed: u64) -> Result<Array3<u8>> {
    let (t, h, w) = a.dim();
    let spec = GridSpec::derived(t, h, w, 1.0)?;
    let cloud = gen_cloud(&CloudConfig { spec, correlation_length: scale, temporal_rho: 0.8, seed })?;
    let n = spec.len();
    let n_drop = (rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let vals = cloud.as_slice();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
    let mut flags = vec![1u8; n];
    for &i in &order[..n_drop] {
        flags[i] = 0;
    }
    Ok(Array3::from_shape_vec(a.dim(), flags).unwrap())
}

/// `A_tilde = A * B` with `B` drawn per `cfg.dropout_kind`.
pub fn make_train_mask(a: &Array3<u8>, cfg: &TrainConfig, seed: u64) -> Result<Array3<u8>> {
    if a.iter().any(|&v| v > 1) {
        return Err(Error::Range("mask values must be 0 or 1".into()));
    }
    let b = match cfg.dropout_kind {
        DropoutKind::None => return Ok(a.clone()),
        _ if cfg.dropout_rate == 0.0 => return Ok(a.clone()),
        DropoutKind::Rects => drop_rects(a, cfg.dropout_rate, &mut rng::rng(seed)),
        DropoutKind::Cloudlike => drop_cloudlike(a, cfg.dropout_rate, cfg.dropout_scale, seed)?,
    };
    Ok(a * &b)
}

/// Frame indices of the window centred at `center`, clamped at the ends.
pub fn window_indices(center: usize, n_time: usize, window: usize) -> Vec<usize> {
    let k = (window / 2) as isize;
    (-k..=k).map(|d| (center as isize + d).clamp(0, n_time as isize - 1) as usize).collect()
}

pub fn gather_frames<T: Copy>(x: &Array3<T>, idx: &[usize]) -> Array3<T> {
    let (_, h, w) = x.dim();
    let mut out = Array3::from_elem((idx.len(), h, w), x[[0, 0, 0]]);
    for (o, &i) in idx.iter().enumerate() {
        out.slice_mut(s![o, .., ..]).assign(&x.slice(s![i, .., ..]));
    }
    out
}

/// Noise-level bucket boundaries used in the training log.
pub const SIGMA_BUCKETS: [f64; 3] = [0.1, 0.5, 2.0];

pub fn sigma_bucket(sigma: f64) -> usize {
    SIGMA_BUCKETS.iter().take_while(|&&b| sigma >= b).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean weighted error per noise bucket; `None` when the bucket was empty.
    pub bucket_loss: [Option<f64>; 4],
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,sigma_bucket,seconds\n");
        for r in &self.records {
            writeln!(out, "{},{:?},all,{:?}", r.step, r.loss, r.seconds).unwrap();
            for (b, l) in r.bucket_loss.iter().enumerate() {
                if let Some(l) = l {
                    writeln!(out, "{},{:?},{},{:?}", r.step, l, b, r.seconds).unwrap();
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Bias-corrected exponential moving average of the iterates: the
    /// average starts at zero and is divided by `1 - decay^steps`, so the
    /// initialization does not enter the average.
    pub params: NetParams,
    /// Final optimizer iterate.
    pub raw: NetParams,
    pub norm: Option<NormParams>,
    pub log: TrainLog,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &NetParams) -> Self {
        let z = p.zeros_like().values;
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, params: &mut NetParams, grads: &NetParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.values.iter_mut().zip(&grads.values).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.n_steps.max(1) as f64).cos()),
    }
}

/// Normalized sequences with their observation masks (all-ones when absent).
fn prepare(dataset: &[(Field, Option<MaskField>)], cfg: &TrainConfig) -> Result<(Vec<(Array3<f64>, Array3<u8>)>, Option<NormParams>)> {
    let norm = if cfg.normalize { Some(fit_normalizer_masked(dataset)?) } else { None };
    let seqs = dataset
        .iter()
        .map(|(f, m)| {
            let x = match (&norm, m) {
                (Some(p), Some(m)) => normalize_masked(f, m, p)?,
                (Some(p), None) => normalize(f, p)?,
                (None, _) => f.clone(),
            };
            let a = m.as_ref().map(|m| m.flags().clone()).unwrap_or_else(|| Array3::from_elem(f.spec().shape(), 1));
            Ok((x.into_values(), a))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((seqs, norm))
}

/// Draws training example `i` of the run.
fn draw_item(seqs: &[(Array3<f64>, Array3<u8>)], window: usize, cfg: &TrainConfig, i: u64) -> Result<TrainItem> {
    let mut r = rng::rng(derive_seed(derive_named(cfg.seed, "window"), i));
    let s = r.random_range(0..seqs.len());
    let (x, a) = &seqs[s];
    let center = r.random_range(0..x.dim().0);
    let idx = window_indices(center, x.dim().0, window);
    let x0 = gather_frames(x, &idx);
    let a = gather_frames(a, &idx);
    let mut noise = Array3::zeros(x0.dim());
    noise.iter_mut().for_each(|v| *v = rng::normal(&mut r));
    let a_tilde = make_train_mask(&a, cfg, derive_seed(derive_named(cfg.seed, "dropout"), i))?;
    Ok(TrainItem { x0, a, a_tilde, sigma: sample_sigma(cfg, cfg.seed, i), noise })
}

/// Train from `init` (or a fresh init seeded from `cfg.seed`).
pub fn train(dataset: &[(Field, Option<MaskField>)], net_cfg: &NetConfig, cfg: &TrainConfig, init: Option<NetParams>) -> Result<TrainOutput> {
    cfg.validate()?;
    net_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    for (f, m) in dataset {
        let (_, h, w) = f.spec().shape();
        net_cfg.check_grid(h, w)?;
        if let Some(m) = m {
            if m.spec().shape() != f.spec().shape() {
                return Err(Error::Shape("mask shape differs from its sequence".into()));
            }
        }
    }
    let (seqs, norm) = prepare(dataset, cfg)?;
    let mut params = match init {
        Some(p) => p,
        None => denoiser::init_params(net_cfg, derive_named(cfg.seed, "init"))?,
    };
    let mut ema = params.zeros_like();
    let mut adam = Adam::new(&params);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for step in 0..cfg.n_steps {
        let batch = (0..cfg.batch_size)
            .map(|b| draw_item(&seqs, net_cfg.window, cfg, (step * cfg.batch_size + b) as u64))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads, per_item) = denoiser::loss_and_grad_items(net_cfg, &params, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            log::error!("training diverged at step {step}: loss {loss}");
            return Err(Error::DivergedLoss { step, loss });
        }
        adam.step(&mut params, &grads, lr_at(cfg, step));
        for (e, p) in ema.values.iter_mut().flatten().zip(params.values.iter().flatten()) {
            *e = cfg.ema_decay * *e + (1.0 - cfg.ema_decay) * p;
        }
        let mut sums = [(0.0, 0usize); 4];
        for (item, &(l, n)) in batch.iter().zip(&per_item) {
            let b = sigma_bucket(item.sigma);
            sums[b].0 += l;
            sums[b].1 += n;
        }
        let bucket_loss = sums.map(|(l, n)| (n > 0).then(|| l / n as f64));
        let seconds = if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        log.records.push(StepRecord { step, loss, bucket_loss, seconds });
        if step % 500 == 0 {
            log::info!("step {step} loss {loss:.5}");
        }
    }
    if cfg.n_steps > 0 {
        let c = 1.0 - cfg.ema_decay.powi(cfg.n_steps as i32);
        ema.values.iter_mut().flatten().for_each(|e| *e /= c);
    } else {
        ema = params.clone();
    }
    Ok(TrainOutput { params: ema, raw: params, norm, log })
}

/// Mean ambient loss of any clean-estimate function over the same draws
/// `train` would see at steps `[0, n_steps)`. Used for baselines.
pub fn evaluate_loss(
    dataset: &[(Field, Option<MaskField>)],
    window: usize,
    cfg: &TrainConfig,
    steps: std::ops::Range<usize>,
    denoise: impl Fn(&Array3<f64>, &Array3<u8>, f64) -> Result<Array3<f64>>,
) -> Result<f64> {
    let (seqs, _) = prepare(dataset, cfg)?;
    let mut total = 0.0;
    let mut n_steps = 0;
    for step in steps {
        let mut num = 0.0;
        let mut cnt = 0usize;
        for b in 0..cfg.batch_size {
            let item = draw_item(&seqs, window, cfg, (step * cfg.batch_size + b) as u64)?;
            let mut noisy = Array3::zeros(item.x0.dim());
            Zip::from(&mut noisy).and(&item.x0).and(&item.noise).and(&item.a_tilde).for_each(|o, &x, &n, &m| {
                if m == 1 {
                    *o = x + item.sigma * n;
                }
            });
            let x0_hat = denoise(&noisy, &item.a_tilde, item.sigma)?;
            Zip::from(&x0_hat).and(&item.x0).and(&item.a).and(&item.a_tilde).for_each(|&xh, &x, &a, &t| {
                if a == 1 {
                    num += denoiser::cell_weight(item.sigma, t == 1) * (xh - x).powi(2);
                    cnt += 1;
                }
            });
        }
        total += if cnt > 0 { num / cnt as f64 } else { 0.0 };
        n_steps += 1;
    }
    Ok(total / n_steps.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_draws() {
        let cfg = TrainConfig { p_std: 1e-12, ..Default::default() };
        assert!((sample_sigma(&cfg, 1, 7) - (-1.2f64).exp()).abs() < 1e-9);
        let cfg = TrainConfig::default();
        let n = 100_000;
        let logs: Vec<f64> = (0..n).map(|i| sample_sigma(&cfg, 3, i).ln()).collect();
        assert!(logs.iter().all(|l| l.is_finite()));
        let mean = logs.iter().sum::<f64>() / n as f64;
        assert!((mean + 1.2).abs() < 0.02, "{mean}");
        assert_eq!(sample_sigma(&cfg, 3, 5), sample_sigma(&cfg, 3, 5));
    }

    #[test]
    fn train_masks() {
        let a = Array3::from_shape_fn((4, 50, 50), |(t, i, j)| ((t + i * 3 + j * 7) % 5 != 0) as u8);
        let none = TrainConfig { dropout_kind: DropoutKind::None, dropout_rate: 0.5, ..Default::default() };
        assert_eq!(make_train_mask(&a, &none, 1).unwrap(), a);
        for kind in [DropoutKind::Rects, DropoutKind::Cloudlike] {
            let cfg = TrainConfig { dropout_kind: kind, dropout_rate: 0.3, ..Default::default() };
            let at = make_train_mask(&a, &cfg, 2).unwrap();
            assert!(at.iter().zip(a.iter()).all(|(&t, &v)| t <= v));
            let ones = Array3::from_elem((4, 50, 50), 1u8);
            let b = make_train_mask(&ones, &cfg, 3).unwrap();
            let dropped = b.iter().filter(|&&v| v == 0).count() as f64 / b.len() as f64;
            assert!((0.25..=0.35).contains(&dropped), "{kind}: {dropped}");
        }
    }

    #[test]
    fn windows_replicate_edges() {
        assert_eq!(window_indices(0, 5, 3), vec![0, 0, 1]);
        assert_eq!(window_indices(4, 5, 5), vec![2, 3, 4, 4, 4]);
        assert_eq!(window_indices(0, 1, 3), vec![0, 0, 0]);
    }

    #[test]
    fn buckets() {
        assert_eq!(sigma_bucket(0.01), 0);
        assert_eq!(sigma_bucket(0.1), 1);
        assert_eq!(sigma_bucket(1.0), 2);
        assert_eq!(sigma_bucket(50.0), 3);
    }
}
