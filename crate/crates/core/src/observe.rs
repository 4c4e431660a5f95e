//! Observation operators: cloud masking, average-pool downsampling with
//! temporal subsampling, and identity. Each operator is linear; its adjoint
//! is used by the fidelity gradient `2 A^T (A x - y)`.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};

use crate::aodf;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, MaskField};
use crate::kv::{KvDoc, Section};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Masking { mask: MaskField },
    Downsample { s_step: usize, t_step: usize },
    Identity,
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Masking { .. } => "masking",
            OperatorKind::Downsample { .. } => "downsample",
            OperatorKind::Identity => "identity",
        }
    }

    /// Output shape on a target grid of shape `(t, h, w)`.
    pub fn output_shape(&self, shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (t, h, w) = shape;
        match self {
            OperatorKind::Identity => Ok(shape),
            OperatorKind::Masking { mask } => {
                if mask.spec().shape() != shape {
                    return Err(Error::Shape(format!("mask {:?} vs target {:?}", mask.spec().shape(), shape)));
                }
                Ok(shape)
            }
            &OperatorKind::Downsample { s_step, t_step } => {
                if s_step == 0 || t_step == 0 {
                    return Err(Error::Shape("downsample steps must be positive".into()));
                }
                if h % s_step != 0 || w % s_step != 0 {
                    return Err(Error::Shape(format!("s_step {s_step} does not divide {h}x{w}")));
                }
                if t_step > t {
                    return Err(Error::Shape(format!("t_step {t_step} exceeds n_time {t}")));
                }
                Ok((t.div_ceil(t_step), h / s_step, w / s_step))
            }
        }
    }

    /// Squared operator norm of `A`, used to bound Langevin step sizes.
    pub fn norm_sq(&self) -> f64 {
        match self {
            OperatorKind::Identity | OperatorKind::Masking { .. } => 1.0,
            OperatorKind::Downsample { s_step, .. } => 1.0 / (s_step * s_step) as f64,
        }
    }

    /// `A x` on a raw array.
    pub fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let out_shape = self.output_shape(x.dim())?;
        match self {
            OperatorKind::Identity => Ok(x.clone()),
            OperatorKind::Masking { mask } => {
                let mut out = Array3::zeros(out_shape);
                Zip::from(&mut out).and(x).and(mask.flags()).for_each(|o, &v, &m| {
                    if m == 1 {
                        *o = v;
                    }
                });
                Ok(out)
            }
            &OperatorKind::Downsample { s_step, t_step } => {
                let (to, ho, wo) = out_shape;
                let inv = 1.0 / (s_step * s_step) as f64;
                let mut out = Array3::zeros(out_shape);
                for tt in 0..to {
                    let t = tt * t_step;
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for di in 0..s_step {
                                for dj in 0..s_step {
                                    acc += x[[t, i * s_step + di, j * s_step + dj]];
                                }
                            }
                            out[[tt, i, j]] = acc * inv;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// `A^T u` onto a target grid of shape `target`.
    pub fn adjoint(&self, u: &Array3<f64>, target: (usize, usize, usize)) -> Result<Array3<f64>> {
        let out_shape = self.output_shape(target)?;
        if u.dim() != out_shape {
            return Err(Error::Shape(format!("adjoint input {:?}, expected {:?}", u.dim(), out_shape)));
        }
        match self {
            OperatorKind::Identity => Ok(u.clone()),
            OperatorKind::Masking { .. } => self.apply(u),
            &OperatorKind::Downsample { s_step, t_step } => {
                let (to, ho, wo) = out_shape;
                let inv = 1.0 / (s_step * s_step) as f64;
                let mut out = Array3::zeros(target);
                for tt in 0..to {
                    let t = tt * t_step;
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = u[[tt, i, j]] * inv;
                            for di in 0..s_step {
                                for dj in 0..s_step {
                                    out[[t, i * s_step + di, j * s_step + dj]] = v;
                                }
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Cells of the observation grid carrying data (all cells except masked ones).
    pub fn support(&self, shape: (usize, usize, usize)) -> Result<Array3<u8>> {
        let out_shape = self.output_shape(shape)?;
        Ok(match self {
            OperatorKind::Masking { mask } => mask.flags().clone(),
            _ => Array3::from_elem(out_shape, 1),
        })
    }
}

/// One degraded observation of the target field.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub kind: OperatorKind,
    pub y: Field,
    pub sigma_m: f64,
    pub lambda_m: f64,
    /// Cloud threshold that produced a masking operator, when known.
    pub gamma: Option<f64>,
}

impl Observation {
    pub fn new(kind: OperatorKind, y: Field, sigma_m: f64, lambda_m: f64) -> Result<Self> {
        if !(sigma_m >= 0.0) {
            return Err(Error::Range(format!("sigma_m {sigma_m} must be >= 0")));
        }
        if !(lambda_m > 0.0) {
            return Err(Error::Range(format!("lambda_m {lambda_m} must be > 0")));
        }
        Ok(Self { kind, y, sigma_m, lambda_m, gamma: None })
    }

    /// Check that `y` has the operator's output shape on `target`.
    pub fn check_target(&self, target: (usize, usize, usize)) -> Result<()> {
        let want = self.kind.output_shape(target)?;
        if self.y.spec().shape() != want {
            return Err(Error::Shape(format!("observation y {:?}, operator output {:?}", self.y.spec().shape(), want)));
        }
        Ok(())
    }

    /// Total order used to fix the summation order of guidance gradients.
    pub fn canonical_key(&self) -> (u8, u64) {
        let mut h = DefaultHasher::new();
        let tag = match &self.kind {
            OperatorKind::Identity => 0u8,
            OperatorKind::Masking { mask } => {
                mask.as_slice().hash(&mut h);
                1
            }
            OperatorKind::Downsample { s_step, t_step } => {
                (s_step, t_step).hash(&mut h);
                2
            }
        };
        self.sigma_m.to_bits().hash(&mut h);
        self.lambda_m.to_bits().hash(&mut h);
        self.y.spec().shape().hash(&mut h);
        for v in self.y.as_slice() {
            v.to_bits().hash(&mut h);
        }
        (tag, h.finish())
    }

    /// Persist as `<stem>.y.aodf`, `<stem>.mask.aodf` (masking only) and a
    /// `<stem>.obs` descriptor. Returns the descriptor path.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut sec = Section::default();
        sec.set("kind", self.kind.name());
        let y_name = format!("{stem}.y.aodf");
        aodf::write_field(&self.y, dir.join(&y_name))?;
        sec.set("y", &y_name);
        match &self.kind {
            OperatorKind::Masking { mask } => {
                let m_name = format!("{stem}.mask.aodf");
                aodf::write_mask(mask, dir.join(&m_name))?;
                sec.set("mask", &m_name);
            }
            OperatorKind::Downsample { s_step, t_step } => {
                sec.set("s_step", s_step);
                sec.set("t_step", t_step);
            }
            OperatorKind::Identity => {}
        }
        sec.set("sigma_m", format!("{:?}", self.sigma_m));
        sec.set("lambda_m", format!("{:?}", self.lambda_m));
        if let Some(g) = self.gamma {
            sec.set("gamma", format!("{g:?}"));
        }
        let path = dir.join(format!("{stem}.obs"));
        fs::write(&path, sec.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(descriptor: impl AsRef<Path>) -> Result<Self> {
        let descriptor = descriptor.as_ref();
        let doc = KvDoc::read(descriptor)?;
        let base = descriptor.parent().unwrap_or(Path::new("."));
        Self::from_section(&doc.global, base)
    }

    /// Build from descriptor keys; file names resolve against `base`.
    pub fn from_section(sec: &Section, base: &Path) -> Result<Self> {
        sec.check_keys(&["kind", "y", "mask", "s_step", "t_step", "sigma_m", "lambda_m", "gamma"])?;
        let y = aodf::read_field(base.join(sec.require_str("y")?))?;
        let kind = match sec.require_str("kind")? {
            "masking" => OperatorKind::Masking { mask: aodf::read_mask(base.join(sec.require_str("mask")?))? },
            "downsample" => OperatorKind::Downsample { s_step: sec.require("s_step")?, t_step: sec.parse_or("t_step", 1)? },
            "identity" => OperatorKind::Identity,
            other => return Err(Error::Config(format!("unknown observation kind {other:?}"))),
        };
        let mut obs = Observation::new(kind, y, sec.parse_or("sigma_m", 0.0)?, sec.require("lambda_m")?)?;
        obs.gamma = sec.parse("gamma")?;
        Ok(obs)
    }
}

/// Cloud threshold rule: a cell is missing when its cloud cover exceeds `gamma`.
pub fn mask_from_cloud(tcc: &Field, gamma: f64) -> Result<MaskField> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Range(format!("gamma {gamma} not in [0, 1]")));
    }
    let flags = tcc.values().mapv(|c| if c > gamma { 0u8 } else { 1u8 });
    MaskField::new(*tcc.spec(), flags)
}

fn output_spec(kind: &OperatorKind, spec: &GridSpec) -> Result<GridSpec> {
    let (t, h, w) = kind.output_shape(spec.shape())?;
    let dt = match kind {
        OperatorKind::Downsample { t_step, .. } => spec.dt_hours * *t_step as f64,
        _ => spec.dt_hours,
    };
    GridSpec::derived(t, h, w, dt)
}

pub fn apply_operator(kind: &OperatorKind, x: &Field) -> Result<Field> {
    let out = kind.apply(x.values())?;
    Field::new(output_spec(kind, x.spec())?, out)
}

/// `y = A(x) + sigma_m * xi`. Masked cells receive no noise and stay exactly 0.
pub fn observe_noisy(kind: &OperatorKind, x: &Field, sigma_m: f64, seed: u64) -> Result<Observation> {
    if !(sigma_m >= 0.0) {
        return Err(Error::Range(format!("sigma_m {sigma_m} must be >= 0")));
    }
    let mut y = kind.apply(x.values())?;
    if sigma_m > 0.0 {
        let support = kind.support(x.spec().shape())?;
        let mut r = rng::rng(seed);
        Zip::from(&mut y).and(&support).for_each(|v, &s| {
            let xi = rng::normal(&mut r);
            if s == 1 {
                *v += sigma_m * xi;
            }
        });
    }
    let y = Field::new(output_spec(kind, x.spec())?, y)?;
    Observation::new(kind.clone(), y, sigma_m, 1.0)
}

/// `grad_x ||A x - y||^2 = 2 A^T (A x - y)` on raw arrays.
pub fn fidelity_grad_array(kind: &OperatorKind, y: &Array3<f64>, x: &Array3<f64>) -> Result<Array3<f64>> {
    let mut r = kind.apply(x)?;
    if r.dim() != y.dim() {
        return Err(Error::Shape(format!("observation {:?} vs operator output {:?}", y.dim(), r.dim())));
    }
    r -= y;
    if let OperatorKind::Masking { mask } = kind {
        // residual lives on observed cells only
        Zip::from(&mut r).and(mask.flags()).for_each(|v, &m| {
            if m == 0 {
                *v = 0.0;
            }
        });
    }
    let mut g = kind.adjoint(&r, x.dim())?;
    g *= 2.0;
    Ok(g)
}

pub fn fidelity_grad(obs: &Observation, x: &Field) -> Result<Field> {
    let g = fidelity_grad_array(&obs.kind, obs.y.values(), x.values())?;
    Field::new(*x.spec(), g)
}

/// `||A x - y||^2` over the observation support.
pub fn fidelity(kind: &OperatorKind, y: &Array3<f64>, x: &Array3<f64>) -> Result<f64> {
    let ax = kind.apply(x)?;
    if ax.dim() != y.dim() {
        return Err(Error::Shape("observation shape mismatch".into()));
    }
    let support = kind.support(x.dim())?;
    Ok(Zip::from(&ax).and(y).and(&support).fold(0.0, |acc, &a, &b, &s| if s == 1 { acc + (a - b).powi(2) } else { acc }))
}
