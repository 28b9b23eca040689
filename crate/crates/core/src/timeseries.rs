//! Multiple superimposed oscillator (MSO) signals and the tooling around them:
//! additive noise, Welch power spectra, spectral peak counting, supervised
//! forecasting datasets and the NRMSE metric.

use std::f64::consts::{E, PI};
use std::fs::File;
use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{Error, Result};

/// Default base angular frequency (radians per step). Keeps `e^7 * phi < pi`.
pub const DEFAULT_PHI: f64 = 0.0025;
pub const DEFAULT_LENGTH: usize = 5000;
pub const DEFAULT_HORIZON: usize = 15;
pub const DEFAULT_NOISE_RATIO: f64 = 0.2;
pub const DEFAULT_SEGMENT_LEN: usize = 1024;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_PROMINENCE: f64 = 0.05;
pub const DEFAULT_WASHOUT: usize = 100;
pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Provenance of a generated series.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeriesMeta {
    /// Number of superimposed sinusoids (0 when unknown, e.g. imported data).
    pub k: usize,
    pub phi: f64,
    pub noise_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<f64>,
    pub meta: SeriesMeta,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, meta: SeriesMeta) -> Result<Self> {
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                t,
                context: "time series",
            });
        }
        Ok(Self { values, meta })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// `x_K[t] = sum_{k=1..K} sin(e^k * phi * t)` for `t = 0..len`.
pub fn gen_mso(k: usize, phi: f64, len: usize) -> Result<TimeSeries> {
    if k == 0 {
        return Err(Error::invalid("K", "need at least one component"));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::invalid("phi", format!("must be positive, got {phi}")));
    }
    if len == 0 {
        return Err(Error::invalid("T", "series length must be at least 1"));
    }
    let omegas: Vec<f64> = (1..=k).map(|j| E.powi(j as i32) * phi).collect();
    if let Some((j, &omega)) = omegas.iter().enumerate().find(|(_, &w)| w >= PI) {
        return Err(Error::AboveNyquist { k: j + 1, omega });
    }
    let values = (0..len)
        .map(|t| {
            let t = t as f64;
            omegas.iter().map(|w| (w * t).sin()).sum()
        })
        .collect();
    TimeSeries::new(
        values,
        SeriesMeta {
            k,
            phi,
            noise_ratio: 0.0,
            seed: 0,
        },
    )
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance (mean squared deviation from the mean).
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

pub fn std_dev(values: &[f64]) -> f64 {
    variance(values).sqrt()
}

/// Adds white Gaussian noise with standard deviation `noise_ratio * std(ts)`.
pub fn add_noise(ts: &TimeSeries, noise_ratio: f64, seed: u64) -> Result<TimeSeries> {
    if !(noise_ratio >= 0.0 && noise_ratio.is_finite()) {
        return Err(Error::invalid(
            "noise_ratio",
            format!("must be finite and non-negative, got {noise_ratio}"),
        ));
    }
    if ts.meta.noise_ratio != 0.0 {
        return Err(Error::invalid("ts", "series already carries noise"));
    }
    let mut meta = ts.meta;
    meta.noise_ratio = noise_ratio;
    meta.seed = seed;
    if noise_ratio == 0.0 || ts.is_empty() {
        return TimeSeries::new(ts.values.clone(), meta);
    }
    let sigma = noise_ratio * std_dev(&ts.values);
    let mut rng = rng::seeded(seed, streams::NOISE);
    let values = ts
        .values
        .iter()
        .map(|v| {
            let g: f64 = StandardNormal.sample(&mut rng);
            v + sigma * g
        })
        .collect();
    TimeSeries::new(values, meta)
}

/// One-sided power spectrum on normalized frequencies (cycles per step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    pub segment_len: usize,
    pub overlap: f64,
    pub segments: usize,
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch estimate: Hann-windowed segments, squared FFT magnitude, averaged.
///
/// Power uses "spectrum" scaling, `|X|^2 / (sum w)^2` doubled on interior
/// bins, so a unit-amplitude sinusoid centred on a bin peaks at 0.5 (its
/// mean power).
pub fn psd_estimate(values: &[f64], segment_len: usize, overlap: f64) -> Result<Spectrum> {
    if segment_len < 2 || !segment_len.is_power_of_two() {
        return Err(Error::invalid(
            "segment_len",
            format!("must be a power of two >= 2, got {segment_len}"),
        ));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(
            "overlap",
            format!("must lie in [0, 1), got {overlap}"),
        ));
    }
    if values.len() < segment_len {
        return Err(Error::invalid(
            "ts",
            format!(
                "series of length {} is shorter than one segment ({segment_len})",
                values.len()
            ),
        ));
    }
    let step = segment_len - (overlap * segment_len as f64).round() as usize;
    let step = step.max(1);
    let segments = (values.len() - segment_len) / step + 1;
    let window = hann_periodic(segment_len);
    let scale = window.iter().sum::<f64>().powi(2);

    let fft = FftPlanner::new().plan_fft_forward(segment_len);
    let n_bins = segment_len / 2 + 1;
    let mut power = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); segment_len];
    for s in 0..segments {
        let start = s * step;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(values[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
    }
    for (bin, p) in power.iter_mut().enumerate() {
        *p /= segments as f64 * scale;
        if bin != 0 && bin != segment_len / 2 {
            *p *= 2.0;
        }
    }
    let frequencies = (0..n_bins).map(|bin| bin as f64 / segment_len as f64).collect();
    Ok(Spectrum {
        frequencies,
        power,
        segment_len,
        overlap,
        segments,
    })
}

/// Indices of interior local maxima. A flat top counts once, at its middle.
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let n = values.len();
    let mut i = 1;
    while i + 1 < n {
        if values[i - 1] < values[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && values[ahead] == values[i] {
                ahead += 1;
            }
            if values[ahead] < values[i] {
                peaks.push((i + ahead - 1) / 2);
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    peaks
}

/// Topographic prominence of the peak at `peak`: its height above the higher
/// of the two lowest points reached before climbing to something taller.
pub fn prominence(values: &[f64], peak: usize) -> f64 {
    let height = values[peak];
    let mut left_min = height;
    for &v in values[..peak].iter().rev() {
        if v > height {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = height;
    for &v in &values[peak + 1..] {
        if v > height {
            break;
        }
        right_min = right_min.min(v);
    }
    height - left_min.max(right_min)
}

/// Number of spectral peaks whose prominence exceeds `prominence_frac` of the
/// maximum power. This is the suggested number of neuron groups.
pub fn count_spectral_peaks(sp: &Spectrum, prominence_frac: f64) -> Result<usize> {
    if sp.power.is_empty() {
        return Err(Error::invalid("spectrum", "empty spectrum"));
    }
    if !(prominence_frac > 0.0 && prominence_frac < 1.0) {
        return Err(Error::invalid(
            "prominence",
            format!("must lie in (0, 1), got {prominence_frac}"),
        ));
    }
    let max = sp.power.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(0);
    }
    let threshold = prominence_frac * max;
    Ok(local_maxima(&sp.power)
        .into_iter()
        .filter(|&p| prominence(&sp.power, p) > threshold)
        .count())
}

/// `sqrt(mean((pred - truth)^2) / var(truth))`.
///
/// The denominator is the variance of the ground truth, so the constant
/// predictor `mean(truth)` scores exactly 1.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "nrmse",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("truth", "empty sequence"));
    }
    let var = variance(truth);
    if !(var > 0.0) {
        return Err(Error::ConstantTruth);
    }
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / truth.len() as f64;
    Ok((mse / var).sqrt())
}

/// Aligned `(input, target)` pairs with chronological train/validation/test
/// ranges. Ranges index into `inputs`/`targets` and all start at or after
/// `washout`; the first `washout` pairs only warm up the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedDataset {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub horizon: usize,
    pub washout: usize,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SupervisedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn make_supervised(
    values: &[f64],
    horizon: usize,
    washout: usize,
    split: [f64; 3],
) -> Result<SupervisedDataset> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    if split.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::invalid("split", "fractions must be non-negative"));
    }
    let total: f64 = split.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "split",
            format!("fractions sum to {total}, expected 1"),
        ));
    }
    if values.len() <= horizon + washout {
        return Err(Error::invalid(
            "ts",
            format!(
                "length {} must exceed horizon + washout = {}",
                values.len(),
                horizon + washout
            ),
        ));
    }
    let pairs = values.len() - horizon;
    let usable = pairs - washout;
    let n_train = ((usable as f64 * split[0]).round() as usize).min(usable);
    let n_val = ((usable as f64 * split[1]).round() as usize).min(usable - n_train);
    let train = washout..washout + n_train;
    let validation = train.end..train.end + n_val;
    let test = validation.end..pairs;
    Ok(SupervisedDataset {
        inputs: values[..pairs].to_vec(),
        targets: values[horizon..].to_vec(),
        horizon,
        washout,
        train,
        validation,
        test,
    })
}

pub fn write_series_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, ["t", "value"])?;
    for (t, v) in values.iter().enumerate() {
        write_row(&mut w, path, [t.to_string(), v.to_string()])?;
    }
    flush(w, path)
}

pub fn read_series_csv(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if headers != vec!["t", "value"] {
        return Err(Error::Parse(format!(
            "{}: expected header `t,value`",
            path.display()
        )));
    }
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let t: usize = parse_field(&record, 0, path)?;
        if t != row {
            return Err(Error::Parse(format!(
                "{}: expected t={row}, found t={t}",
                path.display()
            )));
        }
        values.push(parse_field(&record, 1, path)?);
    }
    Ok(values)
}

pub fn write_spectrum_csv(path: &Path, sp: &Spectrum) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, ["freq", "power"])?;
    for (f, p) in sp.frequencies.iter().zip(&sp.power) {
        write_row(&mut w, path, [f.to_string(), p.to_string()])?;
    }
    flush(w, path)
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn write_row<I, S>(w: &mut csv::Writer<File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub(crate) fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
) -> Result<T> {
    record
        .get(idx)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| {
            Error::Parse(format!(
                "{}: bad field {idx} in line {:?}",
                path.display(),
                record.position().map(|p| p.line())
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mso_starts_at_zero() {
        let ts = gen_mso(1, 0.002, 10).unwrap();
        assert_eq!(ts.values()[0], 0.0);
    }

    #[test]
    fn mso_matches_scalar_evaluation() {
        let ts = gen_mso(2, 0.002, 3).unwrap();
        let expected =
            (std::f64::consts::E * 0.002).sin() + (std::f64::consts::E * std::f64::consts::E * 0.002).sin();
        assert!((ts.values()[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn mso_default_length() {
        let ts = gen_mso(7, DEFAULT_PHI, DEFAULT_LENGTH).unwrap();
        assert_eq!(ts.len(), 5000);
        assert!(ts.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mso_rejects_aliasing() {
        let err = gen_mso(7, 0.003, 100).unwrap_err();
        match err {
            Error::AboveNyquist { k, omega } => {
                assert_eq!(k, 7);
                assert!(omega > PI);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(gen_mso(0, 0.1, 10).is_err());
        assert!(gen_mso(1, 0.0, 10).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let ts = gen_mso(3, DEFAULT_PHI, 500).unwrap();
        let noisy = add_noise(&ts, 0.0, 7).unwrap();
        assert_eq!(noisy.values(), ts.values());
    }

    #[test]
    fn noise_is_seeded() {
        let ts = gen_mso(2, DEFAULT_PHI, 500).unwrap();
        let a = add_noise(&ts, 0.2, 11).unwrap();
        let b = add_noise(&ts, 0.2, 11).unwrap();
        let c = add_noise(&ts, 0.2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        assert_eq!(a.meta.noise_ratio, 0.2);
    }

    #[test]
    fn noise_ratio_statistics() {
        let ts = gen_mso(3, DEFAULT_PHI, 100_000).unwrap();
        let noisy = add_noise(&ts, 0.2, 3).unwrap();
        let diff: Vec<f64> = noisy
            .values()
            .iter()
            .zip(ts.values())
            .map(|(a, b)| a - b)
            .collect();
        let ratio = std_dev(&diff) / std_dev(ts.values());
        assert!((0.19..=0.21).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn noise_rejects_bad_input() {
        let ts = gen_mso(2, DEFAULT_PHI, 100).unwrap();
        assert!(add_noise(&ts, -0.1, 1).is_err());
        let noisy = add_noise(&ts, 0.2, 1).unwrap();
        assert!(add_noise(&noisy, 0.2, 1).is_err());
    }

    #[test]
    fn psd_peak_of_pure_sine() {
        let values: Vec<f64> = (0..4096).map(|t| (0.1 * t as f64).sin()).collect();
        let sp = psd_estimate(&values, 1024, 0.5).unwrap();
        let argmax = (0..sp.power.len())
            .max_by(|&a, &b| sp.power[a].total_cmp(&sp.power[b]))
            .unwrap();
        let expected = 0.1 / (2.0 * PI);
        assert!((sp.frequencies[argmax] - expected).abs() <= 1.0 / 1024.0);
        assert!(sp.power[argmax] > 0.25 && sp.power[argmax] <= 0.5 + 1e-12);
    }

    #[test]
    fn psd_of_zero_is_zero() {
        let sp = psd_estimate(&[0.0; 2048], 1024, 0.5).unwrap();
        assert!(sp.power.iter().all(|&p| p == 0.0));
        assert_eq!(sp.segments, 3);
    }

    #[test]
    fn psd_frequencies_increasing() {
        let ts = gen_mso(2, DEFAULT_PHI, 5000).unwrap();
        let sp = psd_estimate(ts.values(), 1024, 0.5).unwrap();
        assert_eq!(sp.frequencies.len(), 513);
        assert!(sp.frequencies.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*sp.frequencies.last().unwrap(), 0.5);
        assert!(sp.power.iter().all(|p| *p >= 0.0 && p.is_finite()));
    }

    #[test]
    fn psd_rejects_short_series() {
        assert!(psd_estimate(&[1.0; 100], 128, 0.5).is_err());
        assert!(psd_estimate(&[1.0; 100], 48, 0.5).is_err());
    }

    #[test]
    fn peaks_of_noiseless_mso() {
        for (k, expected) in [(2usize, 2..=2usize), (3, 3..=3), (5, 4..=5), (7, 6..=7)] {
            let ts = gen_mso(k, DEFAULT_PHI, DEFAULT_LENGTH).unwrap();
            let sp = psd_estimate(ts.values(), DEFAULT_SEGMENT_LEN, DEFAULT_OVERLAP).unwrap();
            let n = count_spectral_peaks(&sp, DEFAULT_PROMINENCE).unwrap();
            assert!(expected.contains(&n), "K={k}: {n} peaks");
        }
    }

    #[test]
    fn monotone_spectrum_has_no_peaks() {
        let sp = Spectrum {
            frequencies: (0..10).map(|i| i as f64 / 20.0).collect(),
            power: (0..10).map(|i| 10.0 - i as f64).collect(),
            segment_len: 18,
            overlap: 0.0,
            segments: 1,
        };
        assert_eq!(count_spectral_peaks(&sp, 0.05).unwrap(), 0);
    }

    #[test]
    fn plateau_and_prominence() {
        let v = [0.0, 1.0, 3.0, 3.0, 3.0, 1.0, 2.0, 1.5, 0.0];
        assert_eq!(local_maxima(&v), vec![3, 6]);
        assert_eq!(prominence(&v, 3), 3.0);
        assert_eq!(prominence(&v, 6), 1.0);
    }

    #[test]
    fn nrmse_examples() {
        let truth = [1.0, -1.0, 3.0, 0.5];
        assert_eq!(nrmse(&truth, &truth).unwrap(), 0.0);
        let m = mean(&truth);
        assert!((nrmse(&[m; 4], &truth).unwrap() - 1.0).abs() < 1e-12);

        // truth mean = 1, squared deviations 0, 4, 4 -> var 8/3;
        // squared errors 1, 1, 0 -> mse 2/3; nrmse = sqrt(1/4) = 0.5.
        let v = nrmse(&[0.0, 0.0, 3.0], &[1.0, -1.0, 3.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nrmse_errors() {
        assert!(matches!(
            nrmse(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::ConstantTruth)
        ));
        assert!(nrmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(nrmse(&[], &[]).is_err());
    }

    #[test]
    fn supervised_pairs() {
        let ds = make_supervised(&[1.0, 2.0, 3.0, 4.0], 1, 0, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ds.inputs, vec![1.0, 2.0, 3.0]);
        assert_eq!(ds.targets, vec![2.0, 3.0, 4.0]);
        assert_eq!(ds.train, 0..3);
    }

    #[test]
    fn supervised_default_protocol() {
        let ts = gen_mso(2, DEFAULT_PHI, 5000).unwrap();
        let ds = make_supervised(ts.values(), 15, 0, DEFAULT_SPLIT).unwrap();
        assert_eq!(ds.len(), 4985);
        let ds = make_supervised(ts.values(), 15, 100, DEFAULT_SPLIT).unwrap();
        assert_eq!(ds.train.start, 100);
        assert_eq!(ds.test.end, 4985);
        assert_eq!(ds.train.end, ds.validation.start);
        assert_eq!(ds.validation.end, ds.test.start);
    }

    #[test]
    fn supervised_split_sizes() {
        let values: Vec<f64> = (0..101).map(|v| v as f64).collect();
        let ds = make_supervised(&values, 1, 0, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!(ds.train.len(), 60);
        assert_eq!(ds.validation.len(), 20);
        assert_eq!(ds.test.len(), 20);
    }

    #[test]
    fn supervised_rejects_bad_split() {
        let values = [0.0; 50];
        assert!(make_supervised(&values, 1, 0, [0.6, 0.2, 0.1]).is_err());
        assert!(make_supervised(&values, 0, 0, [0.6, 0.2, 0.2]).is_err());
        assert!(make_supervised(&values, 10, 40, [0.6, 0.2, 0.2]).is_err());
    }

    #[test]
    fn series_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let ts = add_noise(&gen_mso(3, DEFAULT_PHI, 200).unwrap(), 0.2, 5).unwrap();
        write_series_csv(&path, ts.values()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,value\n"));
        assert_eq!(read_series_csv(&path).unwrap(), ts.values());
    }
}
