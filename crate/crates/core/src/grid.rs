//! Grid data model and robust normalization.
//!
//! Raw fields are nonnegative physical quantities. They are mapped into the
//! model space by `ln(1 + x)` followed by an affine map that sends the pooled
//! 1st/99th percentiles of the log field to -1/+1. Values outside those
//! percentiles are not clipped.

use ndarray::{Array2, Array3, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Grid dimensions of a (time, row, column) sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub n_time: usize,
    /// Nominal time step in hours. Informational only.
    pub dt_hours: f64,
}

impl GridSpec {
    pub fn new(n_time: usize, height: usize, width: usize) -> Result<Self> {
        Self::with_dt(n_time, height, width, 1.0)
    }

    pub fn with_dt(n_time: usize, height: usize, width: usize, dt_hours: f64) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::InvalidGrid(format!("height and width must be >= 4, got {height}x{width}")));
        }
        if n_time < 1 {
            return Err(Error::InvalidGrid("n_time must be >= 1".into()));
        }
        if !(dt_hours > 0.0 && dt_hours.is_finite()) {
            return Err(Error::InvalidGrid(format!("dt_hours must be positive, got {dt_hours}")));
        }
        Ok(Self { height, width, n_time, dt_hours })
    }

    /// Grid of an operator output (for example a pooled observation), which may
    /// be coarser than the 4x4 minimum imposed on reconstruction grids.
    pub fn derived(n_time: usize, height: usize, width: usize, dt_hours: f64) -> Result<Self> {
        if height == 0 || width == 0 || n_time == 0 {
            return Err(Error::InvalidGrid(format!("empty derived grid {n_time}x{height}x{width}")));
        }
        Ok(Self { height, width, n_time, dt_hours })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_time, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.n_time * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }
}

/// A real-valued (time, row, column) field. Every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    spec: GridSpec,
    values: Array3<f64>,
}

impl Field {
    pub fn new(spec: GridSpec, values: Array3<f64>) -> Result<Self> {
        if values.dim() != spec.shape() {
            return Err(Error::Shape(format!("values {:?} do not match grid {:?}", values.dim(), spec.shape())));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { spec, values })
    }

    pub fn from_vec(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        let values = Array3::from_shape_vec(spec.shape(), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(spec, values)
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, values: Array3::zeros(spec.shape()) }
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self { spec, values: Array3::from_elem(spec.shape(), value) }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(0), t)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("fields are stored in standard layout")
    }

    /// Apply `f` elementwise, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.spec, self.values.mapv(f))
    }

    /// Stack frames along time.
    pub fn concat_time(parts: &[Field]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("no frames to concatenate".into()))?;
        let (h, w) = (first.spec.height, first.spec.width);
        let mut data = Vec::new();
        for p in parts {
            if p.spec.height != h || p.spec.width != w {
                return Err(Error::Shape("frame sizes differ".into()));
            }
            data.extend_from_slice(p.as_slice());
        }
        let n = data.len() / (h * w);
        let spec = GridSpec { n_time: n, ..first.spec };
        Field::from_vec(spec, data)
    }

    /// Population standard deviation over every value.
    pub fn std(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.sum() / n;
        (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Binary validity flags over a (time, row, column) grid: 1 observed, 0 missing.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskField {
    spec: GridSpec,
    flags: Array3<u8>,
}

impl MaskField {
    pub fn new(spec: GridSpec, flags: Array3<u8>) -> Result<Self> {
        if flags.dim() != spec.shape() {
            return Err(Error::Shape(format!("mask {:?} does not match grid {:?}", flags.dim(), spec.shape())));
        }
        if let Some(i) = flags.iter().position(|&f| f > 1) {
            return Err(Error::Range(format!("mask flag {} at flat index {i} is not binary", flags.iter().nth(i).unwrap())));
        }
        Ok(Self { spec, flags })
    }

    pub fn ones(spec: GridSpec) -> Self {
        Self { spec, flags: Array3::from_elem(spec.shape(), 1) }
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, flags: Array3::zeros(spec.shape()) }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn flags(&self) -> &Array3<u8> {
        &self.flags
    }

    pub fn as_slice(&self) -> &[u8] {
        self.flags.as_slice().expect("masks are stored in standard layout")
    }

    pub fn observed_fraction(&self) -> f64 {
        self.flags.iter().filter(|&&f| f == 1).count() as f64 / self.flags.len() as f64
    }

    /// Elementwise logical AND.
    pub fn intersect(&self, other: &MaskField) -> Result<MaskField> {
        if self.spec.shape() != other.spec.shape() {
            return Err(Error::Shape("mask shapes differ".into()));
        }
        let mut flags = self.flags.clone();
        Zip::from(&mut flags).and(&other.flags).for_each(|a, &b| *a &= b);
        Ok(MaskField { spec: self.spec, flags })
    }
}

/// Robust scaling anchors: pooled 1st and 99th percentiles of `ln(1 + x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub q_lo: f64,
    pub q_hi: f64,
}

impl NormParams {
    pub fn new(q_lo: f64, q_hi: f64) -> Result<Self> {
        if !(q_hi > q_lo) || !q_lo.is_finite() || !q_hi.is_finite() {
            return Err(Error::Range(format!("need q_hi > q_lo, got q_lo={q_lo} q_hi={q_hi}")));
        }
        Ok(Self { q_lo, q_hi })
    }

    /// Map one raw value into model space.
    pub fn forward(&self, raw: f64) -> f64 {
        2.0 * ((raw.ln_1p() - self.q_lo) / (self.q_hi - self.q_lo)) - 1.0
    }

    /// Map one model-space value back to physical units.
    pub fn inverse(&self, v: f64) -> f64 {
        (((v + 1.0) * 0.5) * (self.q_hi - self.q_lo) + self.q_lo).exp_m1()
    }
}

fn check_log_domain(values: impl Iterator<Item = f64>) -> Result<()> {
    let floor = -1.0 + f64::EPSILON;
    for (index, value) in values.enumerate() {
        if value < floor {
            return Err(Error::NegativeInput { index, value });
        }
    }
    Ok(())
}

/// Elementwise `ln(1 + v)`.
pub fn log_transform(x: &Field) -> Result<Field> {
    check_log_domain(x.values.iter().copied())?;
    x.map(f64::ln_1p)
}

/// Percentile with linear interpolation between closest order statistics
/// (position `p * (n - 1)` in the sorted sample).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn norm_from_log_values(mut pooled: Vec<f64>) -> Result<NormParams> {
    if pooled.len() < 100 {
        return Err(Error::TooFewValues { needed: 100, got: pooled.len() });
    }
    pooled.sort_by(f64::total_cmp);
    let q_lo = percentile_sorted(&pooled, 0.01);
    let q_hi = percentile_sorted(&pooled, 0.99);
    if q_hi - q_lo < 1e-9 {
        return Err(Error::DegenerateDistribution { spread: q_hi - q_lo });
    }
    NormParams::new(q_lo, q_hi)
}

/// Fit the robust scaling on the pooled log values of a training set.
pub fn fit_normalizer(dataset: &[Field]) -> Result<NormParams> {
    let mut pooled = Vec::with_capacity(dataset.iter().map(|f| f.values.len()).sum());
    for f in dataset {
        check_log_domain(f.values.iter().copied())?;
        pooled.extend(f.values.iter().map(|v| v.ln_1p()));
    }
    norm_from_log_values(pooled)
}

/// Fit the robust scaling on observed cells only. Missing cells are never read.
pub fn fit_normalizer_masked(dataset: &[(Field, Option<MaskField>)]) -> Result<NormParams> {
    let mut pooled = Vec::new();
    for (f, m) in dataset {
        match m {
            Some(m) => {
                if m.spec.shape() != f.spec.shape() {
                    return Err(Error::Shape("mask does not match field".into()));
                }
                for (&v, &flag) in f.as_slice().iter().zip(m.as_slice()) {
                    if flag == 1 {
                        check_log_domain(std::iter::once(v))?;
                        pooled.push(v.ln_1p());
                    }
                }
            }
            None => {
                check_log_domain(f.values.iter().copied())?;
                pooled.extend(f.values.iter().map(|v| v.ln_1p()));
            }
        }
    }
    norm_from_log_values(pooled)
}

pub fn normalize(x: &Field, p: &NormParams) -> Result<Field> {
    check_log_domain(x.values.iter().copied())?;
    x.map(|v| p.forward(v))
}

/// Normalize observed cells; missing cells are set to 0 without being read.
pub fn normalize_masked(x: &Field, mask: &MaskField, p: &NormParams) -> Result<Field> {
    if x.spec.shape() != mask.spec.shape() {
        return Err(Error::Shape("mask does not match field".into()));
    }
    let mut out = Array3::zeros(x.spec.shape());
    for ((o, &v), &m) in out.iter_mut().zip(x.values.iter()).zip(mask.flags.iter()) {
        if m == 1 {
            check_log_domain(std::iter::once(v))?;
            *o = p.forward(v);
        }
    }
    Field::new(x.spec, out)
}

pub fn denormalize(x: &Field, p: &NormParams) -> Result<Field> {
    x.map(|v| p.inverse(v))
}

/// Per-cell mean over time.
pub fn time_mean(x: &Field) -> Array2<f64> {
    x.values.mean_axis(ndarray::Axis(0)).expect("n_time >= 1")
}
