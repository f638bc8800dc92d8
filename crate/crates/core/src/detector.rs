//! Lossy, finite-resolution photon counter.
//!
//! A detector with quantum efficiency `eta` loses each photon independently,
//! so `n` incoming photons produce `m` detected ones with the binomial
//! probability `C(n,m) (1-eta)^(n-m) eta^m`. A counter with counting
//! capability `M` distinguishes `m = 0..M-1`; every `m >= M` lands in a single
//! overflow outcome `M`. Measuring at `K` efficiencies yields the response
//! tensor `B(nu, m, n)`, which maps photon statistics to outcome
//! probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::states::PhotonDistribution;

fn check_efficiency(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("eta", format!("efficiency must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

/// Binomial coefficient as `f64`. Exact while it fits in 53 bits, a few ulps
/// off beyond that; switches to log-gamma once the product would overflow.
fn binomial_coefficient(n: u64, m: u64) -> f64 {
    let k = m.min(n - m);
    if n <= 1000 {
        (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64)
    } else {
        (libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0))
            .exp()
    }
}

/// Probability that `n` photons yield exactly `m` detections at efficiency `eta`.
/// Returns 0 when `m > n`.
pub fn binomial_response(eta: f64, m: usize, n: usize) -> Result<f64> {
    check_efficiency(eta)?;
    Ok(binomial_response_unchecked(eta, m, n))
}

pub(crate) fn binomial_response_unchecked(eta: f64, m: usize, n: usize) -> f64 {
    if m > n {
        return 0.0;
    }
    let lost = n - m;
    if eta == 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    if eta == 1.0 {
        return if lost == 0 { 1.0 } else { 0.0 };
    }
    if n > 1000 {
        let log = libm::lgamma(n as f64 + 1.0) - libm::lgamma(m as f64 + 1.0) - libm::lgamma(lost as f64 + 1.0)
            + lost as f64 * (1.0 - eta).ln()
            + m as f64 * eta.ln();
        return log.exp();
    }
    binomial_coefficient(n as u64, m as u64) * (1.0 - eta).powi(lost as i32) * eta.powi(m as i32)
}

/// Detected-photon statistics `p(m) = sum_n B(m,n) rho_n` for an ideal
/// (unlimited resolution) counter. The result has the same length as `rho`
/// and is itself a valid photon distribution, so losses can be chained.
pub fn detection_distribution(rho: &PhotonDistribution, eta: f64) -> Result<PhotonDistribution> {
    check_efficiency(eta)?;
    let probs = rho.probs();
    let detected = (0..probs.len())
        .map(|m| {
            probs
                .iter()
                .enumerate()
                .skip(m)
                .map(|(n, &r)| binomial_response_unchecked(eta, m, n) * r)
                .sum()
        })
        .collect();
    Ok(PhotonDistribution::normalized(detected, 0.0))
}

/// Outcome probabilities of one efficiency setting, `q[0..=M]` with the
/// overflow outcome last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedDistribution {
    q: Vec<f64>,
}

impl BinnedDistribution {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.len() < 2 {
            return Err(Error::invalid("q", "need at least two outcomes"));
        }
        if q.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("q", "entries must be finite and nonnegative"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("q", format!("entries sum to {total}, not 1")));
        }
        Ok(Self { q })
    }

    pub fn probs(&self) -> &[f64] {
        &self.q
    }

    /// Counting capability `M`; there are `M + 1` outcomes.
    pub fn counting_capability(&self) -> usize {
        self.q.len() - 1
    }
}

/// Collapses detected-photon statistics onto the outcomes of a counter with
/// capability `M`: `q[m] = p(m)` for `m < M` and `q[M]` the remaining tail.
pub fn bin_outcomes(detected: &PhotonDistribution, counting_capability: usize) -> Result<BinnedDistribution> {
    if counting_capability < 1 {
        return Err(Error::invalid("M", "counting capability must be at least 1"));
    }
    let p = detected.probs();
    let mut q: Vec<f64> = (0..counting_capability)
        .map(|m| p.get(m).copied().unwrap_or(0.0))
        .collect();
    // Summing the tail directly keeps q[M] exactly zero when p has no mass
    // there, instead of leaving 1 - sum(q) rounding noise.
    q.push(p.iter().skip(counting_capability).sum());
    Ok(BinnedDistribution { q })
}

/// Strictly increasing quantum efficiencies `eta_1 < ... < eta_K` in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyGrid {
    etas: Vec<f64>,
}

impl EfficiencyGrid {
    pub fn new(etas: Vec<f64>) -> Result<Self> {
        if etas.is_empty() {
            return Err(Error::invalid("etas", "need at least one efficiency"));
        }
        if let Some(eta) = etas.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::invalid("etas", format!("efficiency {eta} outside (0, 1]")));
        }
        if etas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("etas", "efficiencies must be strictly increasing"));
        }
        Ok(Self { etas })
    }

    /// `K` evenly spaced efficiencies `nu * eta_max / K`, `nu = 1..=K`.
    pub fn uniform(k: usize, eta_max: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::invalid("K", "need at least one efficiency"));
        }
        if !(eta_max > 0.0 && eta_max <= 1.0) {
            return Err(Error::invalid("eta_max", format!("must lie in (0, 1], got {eta_max}")));
        }
        Ok(Self {
            etas: (1..=k).map(|nu| nu as f64 * eta_max / k as f64).collect(),
        })
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn len(&self) -> usize {
        self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Largest detected-photon number distinguishable from the one below, `M`.
    pub counting_capability: usize,
    /// Highest photon number of the reconstruction, `N`.
    pub truncation: usize,
}

impl DetectorConfig {
    pub fn new(counting_capability: usize, truncation: usize) -> Result<Self> {
        if counting_capability < 1 {
            return Err(Error::invalid("M", "counting capability must be at least 1"));
        }
        if truncation < counting_capability {
            return Err(Error::invalid(
                "N",
                format!("truncation {truncation} is below counting capability {counting_capability}"),
            ));
        }
        Ok(Self {
            counting_capability,
            truncation,
        })
    }

    pub fn outcomes(&self) -> usize {
        self.counting_capability + 1
    }
}

/// Dense `K x (M+1)` table of per-outcome probabilities, row per efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl OutcomeMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::ShapeMismatch {
                    what: "outcome row",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, nu: usize, m: usize) -> f64 {
        self.data[nu * self.cols + m]
    }

    pub fn row(&self, nu: usize) -> &[f64] {
        &self.data[nu * self.cols..(nu + 1) * self.cols]
    }

    pub fn row_mut(&mut self, nu: usize) -> &mut [f64] {
        &mut self.data[nu * self.cols..(nu + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

/// `B(nu, m, n)`: probability that `n` photons produce outcome `m` at the
/// `nu`-th efficiency, stored `[nu][m][n]` contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTensor {
    etas: Vec<f64>,
    outcomes: usize,
    photons: usize,
    data: Vec<f64>,
    /// `sum_nu sum_m B(nu, m, n)`; equals `K` up to rounding.
    column_sums: Vec<f64>,
}

impl ResponseTensor {
    pub fn build(grid: &EfficiencyGrid, cfg: DetectorConfig) -> Self {
        let outcomes = cfg.outcomes();
        let photons = cfg.truncation + 1;
        let top = cfg.counting_capability;
        let mut data = vec![0.0; grid.len() * outcomes * photons];
        for (nu, &eta) in grid.etas().iter().enumerate() {
            let block = &mut data[nu * outcomes * photons..(nu + 1) * outcomes * photons];
            for n in 0..photons {
                let mut overflow = 0.0;
                for m in 0..=n {
                    let b = binomial_response_unchecked(eta, m, n);
                    if m < top {
                        block[m * photons + n] = b;
                    } else {
                        overflow += b;
                    }
                }
                block[top * photons + n] = overflow;
            }
        }
        let mut column_sums = vec![0.0; photons];
        for chunk in data.chunks_exact(photons) {
            for (s, b) in column_sums.iter_mut().zip(chunk) {
                *s += b;
            }
        }
        Self {
            etas: grid.etas().to_vec(),
            outcomes,
            photons,
            data,
            column_sums,
        }
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    /// Number of efficiency settings `K`.
    pub fn settings(&self) -> usize {
        self.etas.len()
    }

    /// Number of outcomes `M + 1`.
    pub fn outcomes(&self) -> usize {
        self.outcomes
    }

    pub fn counting_capability(&self) -> usize {
        self.outcomes - 1
    }

    /// Number of photon numbers `N + 1`.
    pub fn photons(&self) -> usize {
        self.photons
    }

    pub fn truncation(&self) -> usize {
        self.photons - 1
    }

    pub fn get(&self, nu: usize, m: usize, n: usize) -> f64 {
        self.data[(nu * self.outcomes + m) * self.photons + n]
    }

    /// `B(nu, m, .)` over photon numbers.
    pub fn row(&self, nu: usize, m: usize) -> &[f64] {
        let start = (nu * self.outcomes + m) * self.photons;
        &self.data[start..start + self.photons]
    }

    /// All `(nu, m)` rows in order, i.e. the flattened `K(M+1) x (N+1)` system matrix.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.photons)
    }

    pub fn column_sums(&self) -> &[f64] {
        &self.column_sums
    }

    /// Model outcome probabilities `q[nu][m] = sum_n B(nu,m,n) rho_n`.
    pub fn predict(&self, rho: &[f64]) -> Result<OutcomeMatrix> {
        if rho.len() != self.photons {
            return Err(Error::ShapeMismatch {
                what: "photon distribution",
                expected: self.photons,
                actual: rho.len(),
            });
        }
        let mut q = OutcomeMatrix::zeros(self.settings(), self.outcomes);
        self.predict_into(rho, &mut q.data);
        Ok(q)
    }

    pub(crate) fn predict_into(&self, rho: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.rows()) {
            *o = row.iter().zip(rho).map(|(b, r)| b * r).sum();
        }
    }

    /// Outcome distributions for `rho` at every efficiency.
    pub fn binned(&self, rho: &PhotonDistribution) -> Result<Vec<BinnedDistribution>> {
        let q = self.predict(rho.probs())?;
        Ok(q.iter_rows().map(|r| BinnedDistribution { q: r.to_vec() }).collect())
    }
}
