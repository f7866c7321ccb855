//! Temperature scaling, expected calibration error and reliability bins.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::ClassLabel;
use crate::error::{csv_at, invalid, Error, Result};
use crate::uncertainty::ProbVector;
use crate::N_CLASSES;

/// Equal-width confidence bins used for ECE.
pub const ECE_BINS: usize = 15;
const LOG_T_RANGE: (f64, f64) = (-2.995_732_273_553_991, 2.995_732_273_553_991); // ln 0.05, ln 20
const SEARCH_ITERS: usize = 200;
const SEARCH_TOL: f64 = 1e-4;

/// `softmax(z / t)`; `t` must be positive.
pub fn scale(z: &[f64; N_CLASSES], t: f64) -> Result<ProbVector> {
    if t.is_nan() || t <= 0.0 || t.is_infinite() {
        return Err(invalid(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(ProbVector::from_logits(z, t))
}

/// Result of a temperature fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    pub nll_at_one: f64,
    /// Set when the labels hold a single class and no fit was attempted.
    pub degenerate: bool,
}

fn log_prob(z: &[f64; N_CLASSES], y: usize, t: f64) -> f64 {
    let s = z.map(|v| v / t);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    s[y] - max - s.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of `softmax(z / t)`.
pub fn nll(logits: &[[f64; N_CLASSES]], labels: &[ClassLabel], t: f64) -> f64 {
    -logits
        .iter()
        .zip(labels)
        .map(|(z, y)| log_prob(z, y.index(), t))
        .sum::<f64>()
        / logits.len() as f64
}

/// Mean NLL of MC predictions whose passes are each rescaled by `t`
/// before their probabilities are averaged.
pub fn nll_mc(passes: &[Vec<[f64; N_CLASSES]>], labels: &[ClassLabel], t: f64) -> f64 {
    let total: f64 = passes
        .iter()
        .zip(labels)
        .map(|(rows, y)| {
            let p: f64 = rows
                .iter()
                .map(|z| log_prob(z, y.index(), t).exp())
                .sum::<f64>()
                / rows.len() as f64;
            -p.max(f64::MIN_POSITIVE).ln()
        })
        .sum();
    total / passes.len() as f64
}

fn check_fit_inputs(n: usize, labels: &[ClassLabel]) -> Result<bool> {
    if n == 0 || n != labels.len() {
        return Err(invalid(format!(
            "temperature fit needs matching nonempty inputs, got {n} and {}",
            labels.len()
        )));
    }
    Ok(labels.iter().all(|&l| l == labels[0]))
}

/// Golden-section minimisation over `log t`, then a guard that never
/// returns a temperature worse than `t = 1`.
pub fn minimise_over_temperature(objective: impl Fn(f64) -> f64) -> TemperatureFit {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (objective(c.exp()), objective(d.exp()));
    for _ in 0..SEARCH_ITERS {
        if b - a < SEARCH_TOL {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d.exp());
        }
    }
    let t = ((a + b) / 2.0).exp();
    let (fit, at_one) = (objective(t), objective(1.0));
    if at_one < fit {
        return TemperatureFit {
            temperature: 1.0,
            nll: at_one,
            nll_at_one: at_one,
            degenerate: false,
        };
    }
    TemperatureFit {
        temperature: t,
        nll: fit,
        nll_at_one: at_one,
        degenerate: false,
    }
}

fn degenerate(at_one: f64) -> TemperatureFit {
    TemperatureFit {
        temperature: 1.0,
        nll: at_one,
        nll_at_one: at_one,
        degenerate: true,
    }
}

/// Fits `t` minimising the NLL of plain (single-pass) logits.
pub fn fit_temperature(
    logits: &[[f64; N_CLASSES]],
    labels: &[ClassLabel],
) -> Result<TemperatureFit> {
    if check_fit_inputs(logits.len(), labels)? {
        return Ok(degenerate(nll(logits, labels, 1.0)));
    }
    Ok(minimise_over_temperature(|t| nll(logits, labels, t)))
}

/// Fits `t` for MC predictions, scaling every pass before averaging.
pub fn fit_temperature_mc(
    passes: &[Vec<[f64; N_CLASSES]>],
    labels: &[ClassLabel],
) -> Result<TemperatureFit> {
    if passes.iter().any(Vec::is_empty) {
        return Err(invalid("every prediction needs at least one pass"));
    }
    if check_fit_inputs(passes.len(), labels)? {
        return Ok(degenerate(nll_mc(passes, labels, 1.0)));
    }
    Ok(minimise_over_temperature(|t| nll_mc(passes, labels, t)))
}

/// One confidence interval of a reliability diagram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub avg_confidence: f64,
    pub accuracy: f64,
}

/// Binned confidence statistics plus overall markers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub bins: Vec<ReliabilityBin>,
    pub n: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

impl Reliability {
    pub fn ece(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| b.count as f64 / self.n as f64 * (b.accuracy - b.avg_confidence).abs())
            .sum()
    }
}

/// Index of the bin holding `c`: `[lo, hi)` except the last, which is closed.
pub fn bin_index(c: f64, m: usize) -> usize {
    let lo = |i: usize| i as f64 / m as f64;
    let mut i = ((c * m as f64).floor() as usize).min(m - 1);
    while i > 0 && c < lo(i) {
        i -= 1;
    }
    while i + 1 < m && c >= lo(i + 1) {
        i += 1;
    }
    i
}

/// Bins `(confidence, correct)` pairs into `m` equal-width bins over [0, 1].
pub fn reliability_data(samples: &[(f64, bool)], m: usize) -> Result<Reliability> {
    if samples.is_empty() || m == 0 {
        return Err(invalid(
            "reliability data needs samples and at least one bin",
        ));
    }
    if let Some((c, _)) = samples.iter().find(|(c, _)| !(0.0..=1.0).contains(c)) {
        return Err(invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; m];
    let mut conf = vec![0.0f64; m];
    let mut hits = vec![0usize; m];
    for &(c, ok) in samples {
        let i = bin_index(c, m);
        count[i] += 1;
        conf[i] += c;
        hits[i] += ok as usize;
    }
    let bins = (0..m)
        .map(|i| ReliabilityBin {
            lo: i as f64 / m as f64,
            hi: (i + 1) as f64 / m as f64,
            count: count[i],
            avg_confidence: if count[i] > 0 {
                conf[i] / count[i] as f64
            } else {
                0.0
            },
            accuracy: if count[i] > 0 {
                hits[i] as f64 / count[i] as f64
            } else {
                0.0
            },
        })
        .collect();
    let n = samples.len();
    Ok(Reliability {
        bins,
        n,
        accuracy: samples.iter().filter(|s| s.1).count() as f64 / n as f64,
        mean_confidence: samples.iter().map(|s| s.0).sum::<f64>() / n as f64,
    })
}

/// Expected calibration error over `m` equal-width bins.
pub fn ece(samples: &[(f64, bool)], m: usize) -> Result<f64> {
    Ok(reliability_data(samples, m)?.ece())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Segment,
    Patient,
}

/// Calibration outcome at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub level: Level,
    pub temperature: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub before: Reliability,
    pub after: Reliability,
    /// Published (before, after) ECE for comparison; not a target here.
    pub reference_ece: (f64, f64),
}

impl CalibrationReport {
    pub fn new(
        level: Level,
        temperature: f64,
        before: &[(f64, bool)],
        after: &[(f64, bool)],
    ) -> Result<Self> {
        let (before, after) = (
            reliability_data(before, ECE_BINS)?,
            reliability_data(after, ECE_BINS)?,
        );
        Ok(Self {
            level,
            temperature,
            ece_before: before.ece(),
            ece_after: after.ece(),
            before,
            after,
            reference_ece: match level {
                Level::Segment => (0.063, 0.049),
                Level::Patient => (0.098, 0.043),
            },
        })
    }
}

/// Writes bins as `bin_lo,bin_hi,count,avg_conf,accuracy`.
pub fn write_bins_csv(path: &Path, bins: &[ReliabilityBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_at(path))?;
    w.write_record(["bin_lo", "bin_hi", "count", "avg_conf", "accuracy"])?;
    for b in bins {
        w.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            b.avg_confidence.to_string(),
            b.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scale_examples() {
        let z = [2.0, 1.0, 0.0];
        let p = scale(&z, 2.0).unwrap();
        for (a, b) in p.0.iter().zip([0.5064, 0.3072, 0.1863]) {
            assert!((a - b).abs() < 1e-4, "{p:?}");
        }
        let hot = scale(&z, 1e4).unwrap();
        assert!(hot.0.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-3));
        assert_eq!(scale(&z, 1.0).unwrap(), ProbVector::from_logits(&z, 1.0));
        assert!(scale(&z, 0.0).is_err());
        assert!(scale(&z, -1.0).is_err());
    }

    #[test]
    fn ece_examples() {
        assert!((ece(&[(0.8, true)], 15).unwrap() - 0.2).abs() < 1e-12);
        let four = [(0.9, true), (0.9, true), (0.9, true), (0.9, false)];
        assert!((ece(&four, 15).unwrap() - 0.15).abs() < 1e-12);
        let perfect = [(0.75, true), (0.75, true), (0.75, true), (0.75, false)];
        assert!(ece(&perfect, 15).unwrap().abs() < 1e-12);
        assert!(ece(&[], 15).is_err());
    }

    #[test]
    fn one_sample_per_bin() {
        let samples: Vec<(f64, bool)> = (0..15)
            .map(|i| (0.025 + i as f64 / 15.0, i % 2 == 0))
            .collect();
        let r = reliability_data(&samples, 15).unwrap();
        assert!(r.bins.iter().all(|b| b.count == 1));
        assert_eq!(r.bins.len(), 15);
        assert_eq!(r.bins[0].lo, 0.0);
        assert_eq!(r.bins[14].hi, 1.0);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        for i in 1..15 {
            let edge = i as f64 / 15.0;
            assert_eq!(bin_index(edge, 15), i, "edge {edge} opens bin {i}");
            assert_eq!(bin_index(edge - 1e-12, 15), i - 1);
        }
    }

    #[test]
    fn single_class_fit_is_degenerate() {
        let fit = fit_temperature(
            &[[1.0, 0.0, 0.0], [2.0, 0.5, 0.0]],
            &[ClassLabel::Absent; 2],
        )
        .unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.temperature, 1.0);
        assert!(fit_temperature(&[], &[]).is_err());
    }

    #[test]
    fn identical_logits_with_different_labels() {
        let z = [[1.0, 0.0, -1.0]; 2];
        let fit = fit_temperature(&z, &[ClassLabel::Absent, ClassLabel::Present]).unwrap();
        assert!(fit.temperature.is_finite() && fit.temperature > 0.0);
        // optimum spreads mass evenly over the two observed classes: NLL -> ln 2 from above
        assert!(fit.nll >= 2f64.ln() - 1e-9 && fit.nll <= fit.nll_at_one);
    }

    #[test]
    fn mc_fit_with_one_pass_matches_plain_fit() {
        let logits = [
            [2.0, 0.1, -1.0],
            [0.3, 1.2, 0.0],
            [-0.5, 0.4, 1.1],
            [1.5, 1.4, 0.2],
        ];
        let labels = [
            ClassLabel::Absent,
            ClassLabel::Absent,
            ClassLabel::Unknown,
            ClassLabel::Present,
        ];
        let plain = fit_temperature(&logits, &labels).unwrap();
        let passes: Vec<Vec<[f64; 3]>> = logits.iter().map(|z| vec![*z]).collect();
        let mc = fit_temperature_mc(&passes, &labels).unwrap();
        assert!((plain.temperature - mc.temperature).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reliability_recombines_to_ece(samples in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200)) {
            let r = reliability_data(&samples, 15).unwrap();
            prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), samples.len());
            prop_assert_eq!(r.ece(), ece(&samples, 15).unwrap());
            prop_assert!((0.0..=1.0).contains(&r.ece()));
        }

        #[test]
        fn fit_never_raises_nll(rows in prop::collection::vec((prop::array::uniform3(-5.0f64..5.0), 0usize..3), 2..60)) {
            let logits: Vec<[f64; 3]> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<ClassLabel> = rows.iter().map(|r| ClassLabel::from_index(r.1).unwrap()).collect();
            let fit = fit_temperature(&logits, &labels).unwrap();
            prop_assert!(fit.nll <= nll(&logits, &labels, 1.0) + 1e-15);
        }
    }
}
