//! The `recon` command line: data generation, training, reconstruction,
//! evaluation and the benchmark grid.
//!
//! Each command reads a `key = value` config, writes a manifest echoing the
//! effective settings and derived seeds before doing any work, and reports
//! failures through a fixed set of exit codes.

pub mod bench;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use recon_core::aodf;
use recon_core::denoiser::{read_checkpoint, write_checkpoint, ScoreModel};
use recon_core::metrics::{dataset_std, mean_spectrum, melr, nrmse, rapsd, temporal_acf, SPECTRUM_CONVENTION};
use recon_core::net::NetConfig;
use recon_core::rng::derive_named;
use recon_core::sampler::{
    daps_reconstruct, dps_reconstruct, ensemble_seeds, probability_flow_sample, unconditional_sample, AnnealSchedule, DapsConfig,
    ReconResult,
};
use recon_core::synth::{make_dataset, GrfConfig, Manifest, MaskOptions};
use recon_core::train::{train, TrainConfig};
use recon_core::{Error, Field, GridSpec, NormParams, Observation, Result};

use bench::{BenchSettings, Method, Prior};
use config::{io_err, Key, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::DivergedLoss { .. } => EXIT_DIVERGED,
        Error::NonFiniteState(_) => EXIT_NON_FINITE,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Reconstruct,
    Evaluate,
    Benchmark,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Reconstruct => "reconstruct",
            Command::Evaluate => "evaluate",
            Command::Benchmark => "benchmark",
        }
    }

    pub fn keys(self) -> Vec<Key> {
        match self {
            Command::GenData => GEN_DATA_KEYS.to_vec(),
            Command::Train => TRAIN_KEYS.to_vec(),
            Command::Reconstruct => [RECONSTRUCT_KEYS, SAMPLER_KEYS].concat(),
            Command::Evaluate => EVALUATE_KEYS.to_vec(),
            Command::Benchmark => [BENCHMARK_KEYS, SAMPLER_KEYS].concat(),
        }
    }

    fn blocks(self) -> &'static [&'static str] {
        match self {
            Command::Reconstruct => &["observation"],
            _ => &[],
        }
    }
}

/// Load the config and run `cmd`. Returns the summary line.
pub fn run(cmd: Command, config: &Path, sets: &[String], seed: Option<u64>) -> Result<String> {
    let cfg = RunConfig::load(cmd.name(), config, sets, seed, &cmd.keys(), cmd.blocks())?;
    match cmd {
        Command::GenData => gen_data(&cfg),
        Command::Train => train_cmd(&cfg),
        Command::Reconstruct => reconstruct(&cfg),
        Command::Evaluate => evaluate(&cfg),
        Command::Benchmark => benchmark(&cfg),
    }
}

const GEN_DATA_KEYS: &[Key] = &[
    ("out_dir", None),
    ("n_sequences", None),
    ("n_time", Some("8")),
    ("height", Some("32")),
    ("width", Some("32")),
    ("dt_hours", Some("1")),
    ("spectral_slope", Some("3")),
    ("temporal_rho", Some("0.8")),
    ("amplitude", Some("0.5")),
    ("offset", Some("-1.5")),
    ("missing_fraction", Some("0")),
    ("mask_correlation_length", Some("3")),
    ("mask_temporal_rho", Some("0.8")),
];

fn gen_data(cfg: &RunConfig) -> Result<String> {
    let out = cfg.path("out_dir")?;
    let data_seed = derive_named(cfg.seed, "data");
    let grf = GrfConfig {
        spec: GridSpec::with_dt(cfg.get("n_time")?, cfg.get("height")?, cfg.get("width")?, cfg.get("dt_hours")?)?,
        spectral_slope: cfg.get("spectral_slope")?,
        temporal_rho: cfg.get("temporal_rho")?,
        amplitude: cfg.get("amplitude")?,
        offset: cfg.get("offset")?,
        seed: data_seed,
    };
    grf.validate()?;
    let missing: f64 = cfg.get("missing_fraction")?;
    if !(0.0..1.0).contains(&missing) {
        return Err(Error::Config(format!("missing_fraction {missing} not in [0, 1)")));
    }
    let masks = (missing > 0.0).then(|| -> Result<MaskOptions> {
        Ok(MaskOptions {
            missing_fraction: missing,
            correlation_length: cfg.get("mask_correlation_length")?,
            temporal_rho: cfg.get("mask_temporal_rho")?,
        })
    });
    let masks = masks.transpose()?;
    let n: usize = cfg.get("n_sequences")?;
    cfg.write_manifest(&out.join("gen-data.manifest"), &[("data", data_seed)])?;
    let m = make_dataset(&grf, n, masks.as_ref(), &out)?;
    Ok(format!("wrote {} sequences and {}", m.entries.len(), m.path.display()))
}

const TRAIN_KEYS: &[Key] = &[
    ("manifest", None),
    ("out", None),
    ("log", Some("none")),
    ("window", Some("3")),
    ("base_channels", Some("8")),
    ("n_levels", Some("2")),
    ("attn_heads", Some("2")),
    ("p_mean", Some("-1.2")),
    ("p_std", Some("1.2")),
    ("dropout_kind", Some("none")),
    ("dropout_rate", Some("0")),
    ("dropout_scale", Some("3")),
    ("batch_size", Some("8")),
    ("n_steps", Some("1000")),
    ("lr", Some("0.001")),
    ("lr_schedule", Some("constant")),
    ("ema_decay", Some("0.999")),
    ("normalize", Some("true")),
    ("record_wall_time", Some("false")),
];

/// `<path><suffix>` without touching the existing extension.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let out = cfg.path("out")?;
    let log = cfg.opt_path("log")?.unwrap_or_else(|| with_suffix(&out, ".log.csv"));
    let net = NetConfig {
        window: cfg.get("window")?,
        base_channels: cfg.get("base_channels")?,
        n_levels: cfg.get("n_levels")?,
        attn_heads: cfg.get("attn_heads")?,
    };
    let tc = TrainConfig {
        p_mean: cfg.get("p_mean")?,
        p_std: cfg.get("p_std")?,
        dropout_kind: cfg.get("dropout_kind")?,
        dropout_rate: cfg.get("dropout_rate")?,
        dropout_scale: cfg.get("dropout_scale")?,
        batch_size: cfg.get("batch_size")?,
        n_steps: cfg.get("n_steps")?,
        lr: cfg.get("lr")?,
        lr_schedule: cfg.get("lr_schedule")?,
        ema_decay: cfg.get("ema_decay")?,
        normalize: cfg.get("normalize")?,
        record_wall_time: cfg.get("record_wall_time")?,
        seed: derive_named(cfg.seed, "train"),
    };
    tc.validate()?;
    cfg.write_manifest(&with_suffix(&out, ".manifest"), &[("train", tc.seed)])?;
    let data = Manifest::read(cfg.path("manifest")?)?.load()?;
    let o = train(&data, &net, &tc, None)?;
    write_checkpoint(&out, &net, &o.params, o.norm.as_ref())?;
    o.log.write_csv(&log)?;
    let last = o.log.losses().last().copied();
    Ok(match last {
        Some(l) => format!("trained {} steps, final loss {l:.4}, wrote {}", tc.n_steps, out.display()),
        None => format!("wrote initial parameters to {}", out.display()),
    })
}

const SAMPLER_KEYS: &[Key] = &[
    ("sampler", Some("daps")),
    ("steps", Some("50")),
    ("n_langevin", Some("50")),
    ("eta", Some("0.01")),
    ("eta_decay", Some("1")),
    ("step_cap", Some("0.1")),
    ("sigma_prior_rule", Some("equal_to_sigma_tau")),
    ("ode_substeps", Some("5")),
    ("guidance_mask", Some("ones")),
    ("guidance_scale", Some("0.001")),
];

fn daps_config(cfg: &RunConfig) -> Result<DapsConfig> {
    let c = DapsConfig {
        n_langevin: cfg.get("n_langevin")?,
        eta: cfg.get("eta")?,
        eta_decay: cfg.get("eta_decay")?,
        step_cap: cfg.opt("step_cap")?,
        sigma_prior_rule: cfg.get("sigma_prior_rule")?,
        ode_substeps: cfg.get("ode_substeps")?,
        guidance_mask: cfg.get("guidance_mask")?,
        seed: 0,
    };
    c.validate()?;
    Ok(c)
}

const RECONSTRUCT_KEYS: &[Key] = &[
    ("checkpoint", None),
    ("out_dir", None),
    ("stem", Some("recon")),
    ("n_time", Some("auto")),
    ("height", Some("auto")),
    ("width", Some("auto")),
    ("dt_hours", Some("1")),
    ("n_samples", Some("1")),
];

fn model_norm(model: &ScoreModel) -> Option<&NormParams> {
    match model {
        ScoreModel::Learned { norm, .. } => norm.as_ref(),
        ScoreModel::AnalyticGaussian { .. } => None,
    }
}

/// Target grid from explicit keys, else from the first observation.
fn target_grid(cfg: &RunConfig, obs: &[Observation]) -> Result<GridSpec> {
    let inferred = obs.first().map(|o| {
        let (t, h, w) = o.y.spec().shape();
        match o.kind {
            recon_core::OperatorKind::Downsample { s_step, t_step } => (t * t_step, h * s_step, w * s_step),
            _ => (t, h, w),
        }
    });
    let dim = |key: &str, i: usize| -> Result<usize> {
        match cfg.str(key)? {
            "auto" => inferred
                .map(|s| [s.0, s.1, s.2][i])
                .ok_or_else(|| Error::Config(format!("`{key}` is required without observations"))),
            _ => cfg.get(key),
        }
    };
    GridSpec::with_dt(dim("n_time", 0)?, dim("height", 1)?, dim("width", 2)?, cfg.get("dt_hours")?)
}

fn reconstruct(cfg: &RunConfig) -> Result<String> {
    let out = cfg.path("out_dir")?;
    let stem = cfg.str("stem")?.to_string();
    let method: Method = cfg.get("sampler")?;
    let daps = daps_config(cfg)?;
    let scale: f64 = cfg.get("guidance_scale")?;
    let n: usize = cfg.get("n_samples")?;
    if n == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let schedule = AnnealSchedule::with_steps(cfg.get("steps")?)?;
    let seeds = ensemble_seeds(derive_named(cfg.seed, "sampler"), n);
    let named: Vec<(String, u64)> = seeds.iter().enumerate().map(|(i, &s)| (format!("member_{i}"), s)).collect();
    let named: Vec<(&str, u64)> = named.iter().map(|(k, s)| (k.as_str(), *s)).collect();
    cfg.write_manifest(&out.join(format!("{stem}.manifest")), &named)?;
    let obs = cfg.blocks.iter().map(|b| Observation::from_section(b, &cfg.base)).collect::<Result<Vec<_>>>()?;
    let spec = target_grid(cfg, &obs)?;
    let model = read_checkpoint(cfg.path("checkpoint")?)?;
    let norm = model_norm(&model);
    let samples = seeds
        .par_iter()
        .map(|&seed| match (method, obs.is_empty()) {
            (Method::Daps, true) => unconditional_sample(&model, &schedule, &DapsConfig { seed, ..daps.clone() }, norm, spec),
            (Method::Daps, false) => daps_reconstruct(&model, &obs, &schedule, &DapsConfig { seed, ..daps.clone() }, norm, spec),
            (Method::Dps, true) => probability_flow_sample(&model, &schedule, seed, norm, spec),
            (Method::Dps, false) => dps_reconstruct(&model, &obs, &schedule, scale, seed, norm, spec),
        })
        .collect::<Result<Vec<_>>>()?;
    let r = ReconResult::from_samples(samples, seeds)?;
    r.write(&out, &stem)?;
    let mode = if obs.is_empty() { "unconditional" } else { "conditional" };
    Ok(format!("{method} {mode} reconstruction, {n} member(s), {} observation block(s), wrote {stem}.* in {}", obs.len(), out.display()))
}

const EVALUATE_KEYS: &[Key] = &[("gen", None), ("gt", None), ("out", None), ("sigma_x", Some("auto")), ("dataset", Some("none")), ("max_lag", Some("auto"))];

/// CSV rows `metric,index,gen,gt`: nRMSE and MELR, the temporal ACF per lag
/// and the frame-mean spectrum per wavenumber.
pub fn evaluation_csv(gen: &Field, gt: &Field, sigma_x: f64, max_lag: usize) -> Result<String> {
    let mut out = format!("{SPECTRUM_CONVENTION}\nmetric,index,gen,gt\n");
    writeln!(out, "nrmse,,{:?},", nrmse(gen, gt, sigma_x)?).unwrap();
    writeln!(out, "melr,,{:?},", melr(gen, gt)?).unwrap();
    if max_lag > 0 {
        let (a, b) = (temporal_acf(gen, max_lag)?, temporal_acf(gt, max_lag)?);
        for (i, lag) in a.lags.iter().enumerate() {
            writeln!(out, "acf,{lag},{:?},{:?}", a.values[i], b.values[i]).unwrap();
        }
    }
    let spectrum = |f: &Field| mean_spectrum(&(0..f.spec().n_time).map(|t| rapsd(f.frame(t))).collect::<Vec<_>>());
    let (a, b) = (spectrum(gen)?, spectrum(gt)?);
    for (i, k) in a.wavenumbers.iter().enumerate() {
        writeln!(out, "spectrum,{k},{:?},{:?}", a.power[i], b.power[i]).unwrap();
    }
    Ok(out)
}

fn evaluate(cfg: &RunConfig) -> Result<String> {
    let out = cfg.path("out")?;
    cfg.write_manifest(&with_suffix(&out, ".manifest"), &[])?;
    let gen = aodf::read_field(cfg.path("gen")?)?;
    let gt = aodf::read_field(cfg.path("gt")?)?;
    if gen.spec().shape() != gt.spec().shape() {
        return Err(Error::Shape(format!("gen {:?} vs gt {:?}", gen.spec().shape(), gt.spec().shape())));
    }
    let sigma_x = match (cfg.opt::<f64>("sigma_x").ok().flatten(), cfg.opt_path("dataset")?) {
        (Some(s), _) => s,
        (None, Some(d)) => {
            let fields: Vec<Field> = Manifest::read(d)?.load()?.into_iter().map(|p| p.0).collect();
            dataset_std(&fields)?
        }
        (None, None) if cfg.str("sigma_x")? == "auto" => gt.std(),
        (None, None) => return Err(Error::Config(format!("cannot parse `sigma_x` = {:?}", cfg.str("sigma_x")?))),
    };
    let n_t = gt.spec().n_time;
    let max_lag = match cfg.str("max_lag")? {
        "auto" => n_t.saturating_sub(1).min(24),
        _ => cfg.get("max_lag")?,
    };
    let csv = evaluation_csv(&gen, &gt, sigma_x, max_lag)?;
    std::fs::write(&out, csv).map_err(|e| io_err(&out, e))?;
    Ok(format!("wrote {}", out.display()))
}

const BENCHMARK_KEYS: &[Key] = &[
    ("clean_checkpoint", None),
    ("corrupt_checkpoint", None),
    ("test_manifest", None),
    ("out", None),
    ("cases_out", Some("none")),
    ("methods", Some("daps,dps")),
    ("priors", Some("clean,corrupt")),
    ("factors", Some("1")),
    ("missing_ratios", Some("0.6")),
    ("n_cases", Some("all")),
    ("sigma_x", Some("auto")),
    ("dataset", Some("none")),
    ("lambda_m", Some("1000")),
    ("sigma_m", Some("0")),
    ("mask_correlation_length", Some("3")),
    ("mask_temporal_rho", Some("0.8")),
    ("validation_manifest", Some("none")),
    ("guidance_candidates", Some("0.00003,0.0001,0.0003,0.001,0.003,0.01")),
];

fn load_fields(path: &Path) -> Result<Vec<Field>> {
    Ok(Manifest::read(path)?.load()?.into_iter().map(|p| p.0).collect())
}

fn benchmark(cfg: &RunConfig) -> Result<String> {
    let out = cfg.path("out")?;
    let mut settings = BenchSettings {
        methods: cfg.list("methods")?,
        factors: cfg.list("factors")?,
        missing_ratios: cfg.list("missing_ratios")?,
        schedule: AnnealSchedule::with_steps(cfg.get("steps")?)?,
        daps: daps_config(cfg)?,
        dps_scale: 0.0,
        lambda_m: cfg.get("lambda_m")?,
        sigma_m: cfg.get("sigma_m")?,
        mask_correlation_length: cfg.get("mask_correlation_length")?,
        mask_temporal_rho: cfg.get("mask_temporal_rho")?,
        seed: derive_named(cfg.seed, "benchmark"),
    };
    let prior_names: Vec<String> = cfg.list("priors")?;
    for p in &prior_names {
        if p != "clean" && p != "corrupt" {
            return Err(Error::Config(format!("unknown prior {p:?}")));
        }
    }
    let auto_scale = cfg.str("guidance_scale")? == "auto";
    if !auto_scale {
        settings.dps_scale = cfg.get("guidance_scale")?;
    }
    let validation = cfg.opt_path("validation_manifest")?;
    if auto_scale && validation.is_none() && settings.methods.contains(&Method::Dps) {
        return Err(Error::Config("guidance_scale = auto needs `validation_manifest`".into()));
    }
    cfg.write_manifest(&with_suffix(&out, ".manifest"), &[("benchmark", settings.seed)])?;

    let mut cases = load_fields(&cfg.path("test_manifest")?)?;
    if cfg.str("n_cases")? != "all" {
        cases.truncate(cfg.get("n_cases")?);
    }
    if cases.is_empty() {
        return Err(Error::Config("benchmark needs at least one test case".into()));
    }
    let sigma_x = match cfg.str("sigma_x")? {
        "auto" => match cfg.opt_path("dataset")? {
            Some(d) => dataset_std(&load_fields(&d)?)?,
            None => dataset_std(&cases)?,
        },
        _ => cfg.get("sigma_x")?,
    };
    let models: Vec<(String, ScoreModel)> = prior_names
        .iter()
        .map(|p| Ok((p.clone(), read_checkpoint(cfg.path(&format!("{p}_checkpoint"))?)?)))
        .collect::<Result<_>>()?;
    let priors: Vec<Prior> = models.iter().map(|(name, model)| Prior { name: name.clone(), model }).collect();
    if auto_scale && settings.methods.contains(&Method::Dps) {
        let v = load_fields(&validation.unwrap())?;
        let gt = v.first().ok_or_else(|| Error::Config("validation manifest is empty".into()))?;
        let candidates: Vec<f64> = cfg.list("guidance_candidates")?;
        let (best, _) = tune_first(&priors[0], gt, &candidates, sigma_x, &settings)?;
        settings.dps_scale = best;
    }
    let rows = bench::run_grid(&priors, &cases, sigma_x, &settings)?;
    std::fs::write(&out, bench::table_csv(&rows, &settings)).map_err(|e| io_err(&out, e))?;
    if let Some(p) = cfg.opt_path("cases_out")? {
        std::fs::write(&p, bench::cases_csv(&rows)).map_err(|e| io_err(&p, e))?;
    }
    Ok(format!("{} grid cells over {} cases, wrote {}", rows.len(), cases.len(), out.display()))
}

/// Tune on the first factor and missing ratio of the grid.
fn tune_first(prior: &Prior, gt: &Field, candidates: &[f64], sigma_x: f64, s: &BenchSettings) -> Result<(f64, Vec<(f64, f64)>)> {
    bench::tune_dps_scale(prior, gt, s.factors[0], s.missing_ratios[0], candidates, sigma_x, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_defaults_match_core() {
        let cfg = RunConfig::from_doc(
            "reconstruct",
            recon_core::kv::KvDoc::parse("checkpoint = c\nout_dir = o\n").unwrap(),
            PathBuf::new(),
            &[],
            None,
            &Command::Reconstruct.keys(),
            &["observation"],
        )
        .unwrap();
        assert_eq!(daps_config(&cfg).unwrap(), DapsConfig::default());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::DivergedLoss { step: 1, loss: f64::NAN }), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::NonFiniteState("x".into())), EXIT_NON_FINITE);
        let io = Error::Io { path: "p".into(), source: std::io::Error::from(std::io::ErrorKind::NotFound) };
        assert_eq!(exit_code(&io), EXIT_IO);
    }

    #[test]
    fn suffix_keeps_extension() {
        assert_eq!(with_suffix(Path::new("a/b.ckpt"), ".manifest"), PathBuf::from("a/b.ckpt.manifest"));
    }
}
