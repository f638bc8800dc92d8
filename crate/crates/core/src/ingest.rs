//! Pulse-height spectra to outcome counts.
//!
//! The charge spectrum of a photon counter shows one roughly Gaussian peak per
//! number of photoelectrons. Ingestion fits a sum of Gaussians to those peaks,
//! puts a threshold halfway between neighbouring peak centers, and counts the
//! events between consecutive thresholds. Everything above the topmost
//! threshold in use is the overflow outcome `M`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::{detection_distribution, EfficiencyGrid};
use crate::error::{Error, Result};
use crate::sampler::{multinomial, rng_for, OutcomeCounts};
use crate::states::PhotonDistribution;

/// Binned charge spectrum recorded at one efficiency setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeHistogram {
    bin_edges: Vec<f64>,
    counts: Vec<u64>,
    eta: Option<f64>,
}

impl ChargeHistogram {
    pub fn new(bin_edges: Vec<f64>, counts: Vec<u64>, eta: Option<f64>) -> Result<Self> {
        if bin_edges.len() != counts.len() + 1 {
            return Err(Error::ShapeMismatch {
                what: "histogram edges",
                expected: counts.len() + 1,
                actual: bin_edges.len(),
            });
        }
        if counts.is_empty() {
            return Err(Error::invalid("counts", "histogram needs at least one bin"));
        }
        if bin_edges.iter().any(|e| !e.is_finite()) || bin_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("bin_edges", "edges must be finite and strictly increasing"));
        }
        if let Some(eta) = eta {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::invalid("eta", format!("efficiency {eta} outside (0, 1]")));
            }
        }
        Ok(Self { bin_edges, counts, eta })
    }

    /// Histograms raw per-pulse charges into uniform bins of `bin_width`
    /// covering `[lo, hi)`; values outside land in the end bins.
    pub fn from_charges(charges: &[f64], lo: f64, hi: f64, bin_width: f64, eta: Option<f64>) -> Result<Self> {
        if !(bin_width > 0.0) || !(hi > lo) {
            return Err(Error::invalid("bin_width", "need bin_width > 0 and hi > lo"));
        }
        let bins = ((hi - lo) / bin_width).ceil() as usize;
        let edges = (0..=bins).map(|i| lo + i as f64 * bin_width).collect();
        let mut counts = vec![0; bins];
        for &x in charges {
            if !x.is_finite() {
                return Err(Error::invalid("charges", "non-finite charge value"));
            }
            let i = ((x - lo) / bin_width).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[i] += 1;
        }
        Self::new(edges, counts, eta)
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn eta(&self) -> Option<f64> {
        self.eta
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        self.eta = Some(eta);
        Self::new(self.bin_edges, self.counts, self.eta)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1]))
    }

    /// Sum of histograms sharing the same binning; the efficiency label is dropped.
    pub fn pooled(spectra: &[ChargeHistogram]) -> Result<Self> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::invalid("spectra", "nothing to pool"))?;
        let mut counts = first.counts.clone();
        for s in &spectra[1..] {
            if s.bin_edges != first.bin_edges {
                return Err(Error::invalid("spectra", "pooled spectra must share bin edges"));
            }
            for (c, x) in counts.iter_mut().zip(&s.counts) {
                *c += x;
            }
        }
        Self::new(first.bin_edges.clone(), counts, None)
    }
}

/// One photoelectron peak. `amplitude` is the number of events under the peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPeak {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl GaussianPeak {
    /// Expected events in `[lo, hi)`.
    fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.amplitude * (normal_cdf((hi - self.center) / self.width) - normal_cdf((lo - self.center) / self.width))
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian peaks ordered by increasing center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakModel {
    peaks: Vec<GaussianPeak>,
}

impl PeakModel {
    pub fn new(mut peaks: Vec<GaussianPeak>) -> Result<Self> {
        if peaks.is_empty() {
            return Err(Error::invalid("peaks", "need at least one peak"));
        }
        if peaks.iter().any(|p| !(p.width > 0.0) || p.amplitude < 0.0 || !p.center.is_finite()) {
            return Err(Error::invalid("peaks", "widths must be positive and amplitudes nonnegative"));
        }
        peaks.sort_by(|a, b| a.center.total_cmp(&b.center));
        if peaks.windows(2).any(|w| w[1].center <= w[0].center) {
            return Err(Error::invalid("peaks", "peak centers must be distinct"));
        }
        Ok(Self { peaks })
    }

    pub fn peaks(&self) -> &[GaussianPeak] {
        &self.peaks
    }

    pub fn centers(&self) -> Vec<f64> {
        self.peaks.iter().map(|p| p.center).collect()
    }

    /// Expected events in `[lo, hi)` summed over peaks.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.peaks.iter().map(|p| p.mass(lo, hi)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWarning {
    /// Two neighbouring peaks are closer than 1.5 times the sum of their widths.
    OverlappingPeaks,
    /// Reduced chi-square above 3.
    PoorFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    pub model: PeakModel,
    pub chi_square: f64,
    pub reduced_chi_square: f64,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Moving-average window (bins) applied before looking for local maxima.
    pub smoothing_window: usize,
    /// Local maxima must rise this many standard errors above their surroundings.
    pub min_significance: f64,
    pub max_iterations: usize,
    /// Stop once the relative chi-square improvement of an accepted step drops below this.
    pub tolerance: f64,
    /// Starting centers; skips the local-maximum search when given.
    pub initial_centers: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            smoothing_window: 5,
            min_significance: 3.0,
            max_iterations: 500,
            tolerance: 1e-10,
            initial_centers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCandidate {
    pub center: f64,
    pub height: f64,
    pub prominence: f64,
}

fn smooth(counts: &[u64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = counts.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            counts[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64
        })
        .collect()
}

/// Local maxima of the smoothed spectrum, most prominent first. A maximum's
/// prominence is its height above the higher of the two lowest points
/// separating it from taller maxima (or the spectrum ends). Maxima whose
/// prominence is within `min_significance` Poisson standard errors of the
/// smoothed height are dropped as noise.
pub fn find_peak_candidates(hist: &ChargeHistogram, smoothing_window: usize, min_significance: f64) -> Vec<PeakCandidate> {
    let window = smoothing_window.max(1);
    let s = smooth(&hist.counts, window);
    let centers: Vec<f64> = hist.centers().collect();
    let n = s.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        // Treat a run of equal values as one plateau.
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let left_lower = i == 0 || s[i - 1] < s[i];
        let right_lower = j + 1 == n || s[j + 1] < s[i];
        if s[i] > 0.0 && left_lower && right_lower {
            let height = s[i];
            let mut left_min = height;
            let mut k = i;
            while k > 0 && s[k - 1] <= height {
                k -= 1;
                left_min = left_min.min(s[k]);
            }
            if k == 0 {
                left_min = left_min.min(0.0);
            }
            let mut right_min = height;
            let mut k = j;
            while k + 1 < n && s[k + 1] <= height {
                k += 1;
                right_min = right_min.min(s[k]);
            }
            if k + 1 == n {
                right_min = right_min.min(0.0);
            }
            let prominence = height - left_min.max(right_min);
            let noise = (height / window as f64).sqrt();
            if prominence > min_significance * noise {
                out.push(PeakCandidate {
                    center: 0.5 * (centers[i] + centers[j]),
                    height,
                    prominence,
                });
            }
        }
        i = j + 1;
    }
    out.sort_by(|a, b| b.prominence.total_cmp(&a.prominence));
    out
}

fn initial_model(hist: &ChargeHistogram, centers: &[f64]) -> Vec<GaussianPeak> {
    let total = hist.total() as f64;
    if centers.len() == 1 {
        let mean = hist.centers().zip(&hist.counts).map(|(x, &c)| x * c as f64).sum::<f64>() / total;
        let var = hist
            .centers()
            .zip(&hist.counts)
            .map(|(x, &c)| (x - mean).powi(2) * c as f64)
            .sum::<f64>()
            / total;
        let bin = hist.bin_edges[1] - hist.bin_edges[0];
        return vec![GaussianPeak {
            amplitude: total,
            center: centers[0],
            width: var.sqrt().max(bin),
        }];
    }
    let spacing = centers
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let width = 0.5 * spacing;
    centers
        .iter()
        .map(|&c| {
            let amplitude = hist
                .centers()
                .zip(&hist.counts)
                .filter(|(x, _)| (x - c).abs() < 0.5 * spacing)
                .map(|(_, &n)| n as f64)
                .sum::<f64>()
                .max(1.0);
            GaussianPeak { amplitude, center: c, width }
        })
        .collect()
}

struct Problem<'a> {
    edges: &'a [f64],
    y: Vec<f64>,
    weights: Vec<f64>,
}

impl Problem<'_> {
    fn chi_square(&self, peaks: &[GaussianPeak]) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.y)
            .zip(&self.weights)
            .map(|((e, y), w)| {
                let model: f64 = peaks.iter().map(|p| p.mass(e[0], e[1])).sum();
                (y - model).powi(2) * w
            })
            .sum()
    }

    /// Normal equations `J^T W J` and `J^T W r` at `peaks`.
    fn normal_equations(&self, peaks: &[GaussianPeak]) -> (DMatrix<f64>, DVector<f64>) {
        let np = 3 * peaks.len();
        let mut jtj = DMatrix::zeros(np, np);
        let mut jtr = DVector::zeros(np);
        let mut grad = vec![0.0; np];
        for ((e, &y), &w) in self.edges.windows(2).zip(&self.y).zip(&self.weights) {
            let mut model = 0.0;
            for (k, p) in peaks.iter().enumerate() {
                let lo = (e[0] - p.center) / p.width;
                let hi = (e[1] - p.center) / p.width;
                let (phi_lo, phi_hi) = (normal_pdf(lo), normal_pdf(hi));
                let frac = normal_cdf(hi) - normal_cdf(lo);
                model += p.amplitude * frac;
                grad[3 * k] = frac;
                grad[3 * k + 1] = p.amplitude * (phi_lo - phi_hi) / p.width;
                grad[3 * k + 2] = p.amplitude * (phi_lo * lo - phi_hi * hi) / p.width;
            }
            let r = y - model;
            for a in 0..np {
                if grad[a] == 0.0 {
                    continue;
                }
                jtr[a] += w * grad[a] * r;
                for b in 0..=a {
                    jtj[(a, b)] += w * grad[a] * grad[b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[(b, a)] = jtj[(a, b)];
            }
        }
        (jtj, jtr)
    }
}

/// Fits `num_peaks` Gaussians to the spectrum by damped least squares
/// (Levenberg-Marquardt) on the binned counts, weighting each bin by the
/// inverse of its Poisson variance (counts floored at one). Starting centers
/// are the most prominent local maxima of the smoothed spectrum and starting
/// widths half the smallest center spacing.
pub fn fit_gaussian_peaks(hist: &ChargeHistogram, num_peaks: usize) -> Result<PeakFit> {
    fit_gaussian_peaks_with(hist, num_peaks, &FitOptions::default())
}

pub fn fit_gaussian_peaks_with(hist: &ChargeHistogram, num_peaks: usize, opts: &FitOptions) -> Result<PeakFit> {
    if num_peaks < 1 {
        return Err(Error::invalid("num_peaks", "need at least one peak"));
    }
    if hist.total() == 0 {
        return Err(Error::invalid("histogram", "spectrum is empty"));
    }
    let mut centers = match &opts.initial_centers {
        Some(c) if c.len() == num_peaks => c.clone(),
        Some(c) => {
            return Err(Error::ShapeMismatch {
                what: "initial centers",
                expected: num_peaks,
                actual: c.len(),
            })
        }
        None => {
            let found = find_peak_candidates(hist, opts.smoothing_window, opts.min_significance);
            if found.len() < num_peaks {
                return Err(Error::TooFewPeaks {
                    found: found.len(),
                    needed: num_peaks,
                });
            }
            found[..num_peaks].iter().map(|p| p.center).collect()
        }
    };
    centers.sort_by(f64::total_cmp);

    let problem = Problem {
        edges: &hist.bin_edges,
        y: hist.counts.iter().map(|&c| c as f64).collect(),
        weights: hist.counts.iter().map(|&c| 1.0 / (c.max(1) as f64)).collect(),
    };
    let mut peaks = initial_model(hist, &centers);
    let mut chi2 = problem.chi_square(&peaks);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (jtj, jtr) = problem.normal_equations(&peaks);
        let mut improved = false;
        // Raise the damping until a step lowers chi-square.
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for a in 0..damped.nrows() {
                damped[(a, a)] *= 1.0 + lambda;
                if damped[(a, a)] == 0.0 {
                    damped[(a, a)] = lambda;
                }
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<GaussianPeak> = peaks
                .iter()
                .enumerate()
                .map(|(k, p)| GaussianPeak {
                    amplitude: p.amplitude + step[3 * k],
                    center: p.center + step[3 * k + 1],
                    width: p.width + step[3 * k + 2],
                })
                .collect();
            if trial.iter().any(|p| p.width <= 0.0 || p.amplitude < 0.0 || !p.center.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let trial_chi2 = problem.chi_square(&trial);
            if trial_chi2 < chi2 {
                let gain = (chi2 - trial_chi2) / chi2.max(f64::MIN_POSITIVE);
                peaks = trial;
                chi2 = trial_chi2;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                converged = gain < opts.tolerance;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: at a minimum to machine precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::FitDidNotConverge { iterations });
    }

    let model = PeakModel::new(peaks)?;
    let dof = hist.counts.len().saturating_sub(3 * num_peaks).max(1);
    let reduced = chi2 / dof as f64;
    let mut warnings = Vec::new();
    if model
        .peaks
        .windows(2)
        .any(|w| w[1].center - w[0].center < 1.5 * (w[0].width + w[1].width))
    {
        warnings.push(FitWarning::OverlappingPeaks);
    }
    if reduced > 3.0 {
        warnings.push(FitWarning::PoorFit);
    }
    Ok(PeakFit {
        model,
        chi_square: chi2,
        reduced_chi_square: reduced,
        iterations,
        warnings,
    })
}

/// Strictly increasing charge thresholds `t_1 < ... < t_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    thresholds: Vec<f64>,
}

impl ThresholdSet {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::invalid("thresholds", "need at least one threshold"));
        }
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("thresholds", "thresholds must be finite and strictly increasing"));
        }
        Ok(Self { thresholds })
    }

    pub fn values(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// The lowest `count` thresholds, enough for a counter with `M = count`.
    pub fn lowest(&self, count: usize) -> Result<Self> {
        if count < 1 || count > self.thresholds.len() {
            return Err(Error::invalid(
                "M",
                format!("have {} thresholds, asked for {count}", self.thresholds.len()),
            ));
        }
        Ok(Self {
            thresholds: self.thresholds[..count].to_vec(),
        })
    }
}

/// Thresholds halfway between consecutive peak centers.
pub fn midpoint_thresholds(model: &PeakModel) -> Result<ThresholdSet> {
    if model.peaks.len() < 2 {
        return Err(Error::invalid("model", "need at least two peaks for a threshold"));
    }
    ThresholdSet::new(
        model
            .peaks
            .windows(2)
            .map(|w| 0.5 * (w[0].center + w[1].center))
            .collect(),
    )
}

/// Splits `total` integer events according to real-valued `shares` (summing
/// to `total`) by the largest-remainder rule, so the parts sum exactly.
fn apportion(shares: &[f64], total: u64) -> Vec<u64> {
    let mut parts: Vec<u64> = shares.iter().map(|s| s.max(0.0).floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Counts events per outcome: outcome `m` collects charges in
/// `(t_m, t_{m+1}]`, with `t_0 = -inf` and everything above `t_M` in the
/// overflow outcome `M`. A bin straddling a threshold is split in proportion
/// to the width on either side; the split shares are then rounded so the
/// row total equals the histogram total exactly.
pub fn bin_by_thresholds(hist: &ChargeHistogram, thresholds: &ThresholdSet, counting_capability: usize) -> Result<Vec<u64>> {
    if thresholds.len() != counting_capability {
        return Err(Error::ShapeMismatch {
            what: "thresholds",
            expected: counting_capability,
            actual: thresholds.len(),
        });
    }
    let t = thresholds.values();
    let mut shares = vec![0.0; counting_capability + 1];
    for (e, &c) in hist.bin_edges.windows(2).zip(&hist.counts) {
        if c == 0 {
            continue;
        }
        let (lo, hi) = (e[0], e[1]);
        let width = hi - lo;
        let mut cursor = lo;
        let mut m = t.partition_point(|&x| x <= lo);
        while cursor < hi {
            let end = if m < t.len() { t[m].min(hi) } else { hi };
            shares[m] += c as f64 * (end - cursor) / width;
            cursor = end;
            m += 1;
        }
    }
    Ok(apportion(&shares, hist.total()))
}

/// Detector response used to synthesize spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSettings {
    /// Charge per photoelectron.
    pub gain: f64,
    /// Standard deviation of the Gaussian charge noise.
    pub noise_width: f64,
    pub bin_width: f64,
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        Self {
            gain: 10.0,
            noise_width: 1.0,
            bin_width: 0.25,
        }
    }
}

/// Simulated charge spectrum: `n_runs` events with `m` photoelectrons drawn
/// from the detected-photon statistics of `rho` at `eta`, each giving charge
/// `m * gain` plus Gaussian noise. The binning covers `-6 noise_width` to
/// `N * gain + 6 noise_width` regardless of the draw, so spectra of the same
/// truncation and settings can be pooled.
pub fn synthesize_spectrum(
    rho: &PhotonDistribution,
    eta: f64,
    settings: SpectrumSettings,
    n_runs: u64,
    seed: u64,
) -> Result<ChargeHistogram> {
    if !(settings.gain > 0.0) || !(settings.noise_width > 0.0) || !(settings.bin_width > 0.0) {
        return Err(Error::invalid("settings", "gain, noise_width and bin_width must be positive"));
    }
    if n_runs < 1 {
        return Err(Error::invalid("n_runs", "need at least one run"));
    }
    let detected = detection_distribution(rho, eta)?;
    let mut rng = rng_for(seed, 0);
    let per_m = multinomial(&mut rng, n_runs, detected.probs());
    let margin = (6.0 * settings.noise_width / settings.bin_width).ceil() * settings.bin_width;
    let lo = -margin;
    let hi = rho.truncation() as f64 * settings.gain + margin;
    let mut charges = Vec::with_capacity(n_runs as usize);
    for (m, &k) in per_m.iter().enumerate() {
        for _ in 0..k {
            let noise: f64 = StandardNormal.sample(&mut rng);
            charges.push(m as f64 * settings.gain + settings.noise_width * noise);
        }
    }
    ChargeHistogram::from_charges(&charges, lo, hi, settings.bin_width, Some(eta))
}

/// Which spectra the peak positions are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitScope {
    /// One fit on the sum of all spectra; one threshold set for every efficiency.
    /// High peaks are barely populated at low efficiency, so this is the default.
    #[default]
    Pooled,
    /// A separate fit and threshold set per spectrum.
    PerSpectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub counting_capability: usize,
    /// Peaks to fit; defaults to `M + 2` when absent.
    pub num_peaks: Option<usize>,
    pub scope: FitScope,
    /// Bin width used when a spectrum file holds raw per-pulse charges.
    pub raw_bin_width: f64,
    pub fit: FitOptions,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            counting_capability: 3,
            num_peaks: None,
            scope: FitScope::Pooled,
            raw_bin_width: 0.25,
            fit: FitOptions::default(),
        }
    }
}

impl IngestOptions {
    pub fn peaks(&self) -> usize {
        self.num_peaks.unwrap_or(self.counting_capability + 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub counts: OutcomeCounts,
    /// One fit for pooled ingestion, one per efficiency otherwise.
    pub fits: Vec<PeakFit>,
    pub thresholds: Vec<ThresholdSet>,
}

/// Turns per-efficiency spectra into outcome counts. Spectra are ordered by
/// their efficiency labels, which must be present and distinct, and must all
/// contain the same number of events.
pub fn ingest_spectra(spectra: &[ChargeHistogram], opts: &IngestOptions) -> Result<IngestReport> {
    let m_cap = opts.counting_capability;
    if m_cap < 1 {
        return Err(Error::invalid("counting_capability", "must be at least 1"));
    }
    if opts.peaks() < m_cap + 1 {
        return Err(Error::invalid(
            "num_peaks",
            format!("{m_cap} thresholds need at least {} peaks", m_cap + 1),
        ));
    }
    let mut ordered: Vec<&ChargeHistogram> = spectra.iter().collect();
    if ordered.iter().any(|s| s.eta.is_none()) {
        return Err(Error::invalid("spectra", "every spectrum needs an efficiency label"));
    }
    ordered.sort_by(|a, b| a.eta.unwrap().total_cmp(&b.eta.unwrap()));
    let etas: Vec<f64> = ordered.iter().map(|s| s.eta.unwrap()).collect();
    EfficiencyGrid::new(etas.clone())?;

    let fit_one = |h: &ChargeHistogram| -> Result<(PeakFit, ThresholdSet)> {
        let fit = fit_gaussian_peaks_with(h, opts.peaks(), &opts.fit)?;
        let thresholds = midpoint_thresholds(&fit.model)?.lowest(m_cap)?;
        Ok((fit, thresholds))
    };

    let (fits, thresholds): (Vec<PeakFit>, Vec<ThresholdSet>) = match opts.scope {
        FitScope::Pooled => {
            let owned: Vec<ChargeHistogram> = ordered.iter().map(|s| (*s).clone()).collect();
            let (fit, t) = fit_one(&ChargeHistogram::pooled(&owned)?)?;
            (vec![fit], vec![t])
        }
        FitScope::PerSpectrum => ordered.iter().map(|s| fit_one(s)).collect::<Result<Vec<_>>>()?.into_iter().unzip(),
    };

    let rows = ordered
        .iter()
        .enumerate()
        .map(|(i, s)| bin_by_thresholds(s, &thresholds[i.min(thresholds.len() - 1)], m_cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(IngestReport {
        counts: OutcomeCounts::from_rows(etas, rows)?,
        fits,
        thresholds,
    })
}

/// Reads a spectrum file. Two numeric columns are `(charge, count)` pairs
/// with the charge at the bin center of a uniform binning; a single column is
/// a list of raw per-pulse charges, histogrammed with `raw_bin_width`.
/// Blank lines and lines starting with `#` are skipped; columns may be
/// separated by commas or whitespace.
pub fn read_spectrum(path: &Path, raw_bin_width: f64) -> Result<ChargeHistogram> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spectrum(&text, raw_bin_width).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_spectrum(text: &str, raw_bin_width: f64) -> std::result::Result<ChargeHistogram, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 1)))
            .collect::<std::result::Result<Vec<f64>, String>>();
        match fields {
            Ok(f) => rows.push(f),
            // A non-numeric first line is a header.
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(e),
        }
    }
    let width = rows.first().map(Vec::len).ok_or("no data")?;
    if rows.iter().any(|r| r.len() != width) {
        return Err("inconsistent number of columns".into());
    }
    match width {
        1 => {
            let charges: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let lo = charges.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = charges.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = (lo / raw_bin_width).floor() * raw_bin_width;
            let hi = ((hi / raw_bin_width).floor() + 1.0) * raw_bin_width;
            ChargeHistogram::from_charges(&charges, lo, hi, raw_bin_width, None).map_err(|e| e.to_string())
        }
        2 => {
            if rows.len() < 2 {
                return Err("need at least two bins".into());
            }
            let centers: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let mut counts = Vec::with_capacity(rows.len());
            for r in &rows {
                if r[1] < 0.0 || r[1].fract() != 0.0 {
                    return Err(format!("count {} is not a nonnegative integer", r[1]));
                }
                counts.push(r[1] as u64);
            }
            let mut edges = Vec::with_capacity(centers.len() + 1);
            edges.push(centers[0] - 0.5 * (centers[1] - centers[0]));
            edges.extend(centers.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            let n = centers.len();
            edges.push(centers[n - 1] + 0.5 * (centers[n - 1] - centers[n - 2]));
            ChargeHistogram::new(edges, counts, None).map_err(|e| e.to_string())
        }
        w => Err(format!("expected 1 or 2 columns, found {w}")),
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    file: PathBuf,
    eta: f64,
}

/// Reads a `file,eta` manifest and the spectra it lists. Relative file paths
/// resolve against `spectra_dir`.
pub fn read_manifest(manifest: &Path, spectra_dir: &Path, raw_bin_width: f64) -> Result<Vec<ChargeHistogram>> {
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut out = Vec::new();
    for rec in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file).deserialize::<ManifestRecord>() {
        let rec = rec.map_err(|e| Error::Parse {
            path: manifest.to_path_buf(),
            message: e.to_string(),
        })?;
        let path = if rec.file.is_absolute() { rec.file } else { spectra_dir.join(rec.file) };
        out.push(read_spectrum(&path, raw_bin_width)?.with_eta(rec.eta)?);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: manifest.to_path_buf(),
            message: "manifest lists no spectra".into(),
        });
    }
    Ok(out)
}
