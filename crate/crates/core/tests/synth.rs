use ndarray::s;
use recon_core::aodf;
use recon_core::grid::GridSpec;
use recon_core::metrics::{mean_spectrum, rapsd, temporal_acf, Spectrum};
use recon_core::synth::*;

fn grf(t: usize, n: usize, slope: f64, rho: f64, seed: u64) -> GrfConfig {
    GrfConfig { spec: GridSpec::new(t, n, n).unwrap(), spectral_slope: slope, temporal_rho: rho, amplitude: 1.0, offset: 0.0, seed }
}

/// Mean RAPSD of the underlying Gaussian field (log of the output).
fn log_spectrum(cfg: &GrfConfig) -> Spectrum {
    let f = gen_grf(cfg).unwrap();
    let logs = f.values().mapv(f64::ln);
    let spectra: Vec<Spectrum> = (0..cfg.spec.n_time).map(|t| rapsd(logs.slice(s![t, .., ..]))).collect();
    mean_spectrum(&spectra).unwrap()
}

fn band(s: &Spectrum, n: usize) -> Vec<(f64, f64)> {
    (2..=n / 4).map(|k| (k as f64, s.power_at(k).unwrap())).collect()
}

#[test]
fn unit_rho_freezes_frames() {
    let f = gen_grf(&grf(5, 16, 2.0, 1.0, 3)).unwrap();
    for t in 1..5 {
        assert_eq!(f.values().slice(s![t, .., ..]), f.values().slice(s![0, .., ..]));
    }
}

#[test]
fn white_spectrum_is_flat() {
    let s = log_spectrum(&grf(32, 64, 0.0, 0.0, 4));
    let p: Vec<f64> = band(&s, 64).into_iter().map(|(_, p)| p).collect();
    let (lo, hi) = p.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 2.0, "{}", hi / lo);
}

#[test]
fn power_law_slope() {
    let s = log_spectrum(&grf(32, 64, 2.0, 0.0, 5));
    let pts: Vec<(f64, f64)> = band(&s, 64).into_iter().map(|(k, p)| (k.ln(), p.ln())).collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 2.0).abs() <= 0.5, "{slope}");
}

#[test]
fn zero_rho_decorrelates() {
    let f = gen_grf(&grf(256, 16, 1.0, 0.0, 6)).unwrap();
    let acf = temporal_acf(&f, 1).unwrap();
    assert_eq!(acf.values[0], 1.0);
    assert!(acf.values[1].abs() <= 0.1, "{}", acf.values[1]);
}

#[test]
fn grf_positive_and_deterministic() {
    let cfg = grf(4, 16, 1.5, 0.7, 7);
    let a = gen_grf(&cfg).unwrap();
    assert!(a.as_slice().iter().all(|&v| v > 0.0));
    assert_eq!(a, gen_grf(&cfg).unwrap());
    assert_ne!(a, gen_grf(&GrfConfig { seed: 8, ..cfg }).unwrap());
}

#[test]
fn cloud_marginal() {
    let spec = GridSpec::new(100, 32, 32).unwrap();
    let c = gen_cloud(&CloudConfig { spec, correlation_length: 2.0, temporal_rho: 0.5, seed: 9 }).unwrap();
    assert!(c.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let mean = c.as_slice().iter().sum::<f64>() / c.as_slice().len() as f64;
    assert!((0.45..=0.55).contains(&mean), "{mean}");
}

#[test]
fn wide_cloud_is_smooth() {
    let spec = GridSpec::new(64, 16, 16).unwrap();
    let c = gen_cloud(&CloudConfig { spec, correlation_length: 16.0, temporal_rho: 0.0, seed: 10 }).unwrap();
    let all = c.as_slice();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let marginal = (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    for t in 0..64 {
        let fr = c.values().slice(s![t, .., ..]);
        let fm = fr.mean().unwrap();
        let sd = (fr.iter().map(|v| (v - fm).powi(2)).sum::<f64>() / fr.len() as f64).sqrt();
        assert!(sd < marginal / 3.0, "{sd} {marginal}");
    }
}

#[test]
fn empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(&grf(2, 8, 1.0, 0.5, 1), 0, None, dir.path()).unwrap();
    assert!(m.entries.is_empty());
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec![std::ffi::OsString::from("manifest.tsv")]);
}

#[test]
fn dataset_round_trip() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = grf(3, 8, 1.0, 0.5, 2);
    let opts = MaskOptions { missing_fraction: 0.3, correlation_length: 2.0, temporal_rho: 0.5 };
    let m = make_dataset(&cfg, 3, Some(&opts), a.path()).unwrap();
    make_dataset(&cfg, 3, Some(&opts), b.path()).unwrap();
    assert_eq!(m.entries.len(), 3);
    let back = Manifest::read(&m.path).unwrap();
    assert_eq!(back.entries, m.entries);
    for e in &m.entries {
        let h = aodf::read_header(&e.path).unwrap();
        assert_eq!((h.n_time, h.height, h.width), (3, 8, 8));
        let name = e.path.file_name().unwrap();
        assert_eq!(std::fs::read(&e.path).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    assert_eq!(back.load().unwrap().len(), 3);
}
