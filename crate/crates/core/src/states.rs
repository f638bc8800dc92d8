//! Truncated photon-number distributions for the state families used in the
//! simulations: coherent (Poissonian), thermal (geometric), Fock, equal
//! two-Fock superpositions, and user-supplied vectors.
//!
//! Analytic families are evaluated on `0..=N` and renormalized. The mass that
//! fell beyond `N` is kept in [`PhotonDistribution::tail_mass`] so callers can
//! warn when the truncation is too aggressive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tail mass above which a truncation is considered lossy.
pub const TAIL_WARN_THRESHOLD: f64 = 1e-6;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Photon-number statistics `rho_n` for `n = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonDistribution {
    probs: Vec<f64>,
    /// Probability mass the untruncated distribution puts on `n > N`.
    tail_mass: f64,
}

impl PhotonDistribution {
    /// Wraps an explicit probability vector. Entries must be finite and
    /// nonnegative and sum to one within `1e-6`; the vector is then
    /// renormalized exactly.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("probs", "need at least two entries (N >= 1)"));
        }
        if let Some((n, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::invalid("probs", format!("entry {n} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("probs", format!("entries sum to {total}, not 1")));
        }
        Ok(Self::normalized(probs, 0.0))
    }

    /// Wraps an arbitrary nonnegative vector, rescaling it to unit sum.
    /// Used for iterates and detected-photon statistics, where the sum is one
    /// up to rounding.
    pub(crate) fn normalized(mut probs: Vec<f64>, tail_mass: f64) -> Self {
        let total: f64 = probs.iter().sum();
        if total > 0.0 && (total - 1.0).abs() > f64::EPSILON {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Self { probs, tail_mass }
    }

    /// Wraps a vector as-is, without rescaling.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self { probs, tail_mass: 0.0 }
    }

    /// Uniform distribution on `0..=N`, the default EM starting point.
    pub fn uniform(truncation: usize) -> Result<Self> {
        check_truncation(truncation)?;
        let p = 1.0 / (truncation + 1) as f64;
        Ok(Self {
            probs: vec![p; truncation + 1],
            tail_mass: 0.0,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Highest photon number represented, `N`.
    pub fn truncation(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn truncation_is_lossy(&self) -> bool {
        self.tail_mass > TAIL_WARN_THRESHOLD
    }

    /// Restriction to `0..=truncation`, renormalized; the dropped mass is
    /// added to the tail.
    pub fn truncated_to(&self, truncation: usize) -> Result<Self> {
        check_truncation(truncation)?;
        if truncation >= self.truncation() {
            return Err(Error::invalid(
                "truncation",
                format!("{truncation} does not shorten a distribution on 0..={}", self.truncation()),
            ));
        }
        let kept = &self.probs[..=truncation];
        let total: f64 = kept.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("truncation", "no probability mass left after truncation"));
        }
        let dropped = 1.0 - total;
        Ok(Self {
            probs: kept.iter().map(|p| p / total).collect(),
            tail_mass: self.tail_mass + dropped * (1.0 - self.tail_mass),
        })
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// Checks the nonnegativity and normalization invariants.
    pub fn is_valid(&self) -> bool {
        let total: f64 = self.probs.iter().sum();
        self.probs.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (total - 1.0).abs() <= NORMALIZATION_TOL
    }
}

fn check_truncation(truncation: usize) -> Result<()> {
    if truncation < 1 {
        return Err(Error::invalid("N", "truncation must be at least 1"));
    }
    Ok(())
}

fn check_mean(mean: f64) -> Result<()> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::invalid("mean", format!("must be finite and >= 0, got {mean}")));
    }
    Ok(())
}

fn from_pmf(pmf: Vec<f64>) -> PhotonDistribution {
    let kept: f64 = pmf.iter().sum();
    PhotonDistribution::normalized(pmf, (1.0 - kept).max(0.0))
}

/// Poissonian statistics with the given mean photon number.
pub fn coherent(mean: f64, truncation: usize) -> Result<PhotonDistribution> {
    check_mean(mean)?;
    check_truncation(truncation)?;
    if mean == 0.0 {
        return Ok(fock(0, truncation).expect("vacuum is always in range"));
    }
    let log_mean = mean.ln();
    let pmf = (0..=truncation)
        .map(|n| {
            let n = n as f64;
            (n * log_mean - mean - libm::lgamma(n + 1.0)).exp()
        })
        .collect();
    Ok(from_pmf(pmf))
}

/// Bose-Einstein (geometric) statistics with the given mean photon number.
pub fn thermal(mean: f64, truncation: usize) -> Result<PhotonDistribution> {
    check_mean(mean)?;
    check_truncation(truncation)?;
    let ratio = mean / (1.0 + mean);
    let p0 = 1.0 / (1.0 + mean);
    let pmf = (0..=truncation)
        .map(|n| p0 * ratio.powi(n as i32))
        .collect();
    Ok(from_pmf(pmf))
}

/// Number state `|n0>`.
pub fn fock(n0: usize, truncation: usize) -> Result<PhotonDistribution> {
    check_truncation(truncation)?;
    if n0 > truncation {
        return Err(Error::invalid(
            "n0",
            format!("photon number {n0} exceeds truncation {truncation}"),
        ));
    }
    let mut probs = vec![0.0; truncation + 1];
    probs[n0] = 1.0;
    Ok(PhotonDistribution {
        probs,
        tail_mass: 0.0,
    })
}

/// Photon statistics of `(|n_lo> + |n_hi>)/sqrt(2)`: half the mass on each
/// number state. Phases play no role in the diagonal.
pub fn fock_superposition(n_lo: usize, n_hi: usize, truncation: usize) -> Result<PhotonDistribution> {
    check_truncation(truncation)?;
    if n_lo >= n_hi {
        return Err(Error::invalid(
            "n_lo",
            format!("need n_lo < n_hi, got {n_lo} and {n_hi}"),
        ));
    }
    if n_hi > truncation {
        return Err(Error::invalid(
            "n_hi",
            format!("photon number {n_hi} exceeds truncation {truncation}"),
        ));
    }
    let mut probs = vec![0.0; truncation + 1];
    probs[n_lo] = 0.5;
    probs[n_hi] = 0.5;
    Ok(PhotonDistribution {
        probs,
        tail_mass: 0.0,
    })
}

/// Named state family with its parameters, as selected from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    Coherent { mean: f64 },
    Thermal { mean: f64 },
    Fock { n: usize },
    FockSuperposition { n_lo: usize, n_hi: usize },
    Custom { probs: Vec<f64> },
}

impl StateSpec {
    pub fn build(&self, truncation: usize) -> Result<PhotonDistribution> {
        match self {
            StateSpec::Coherent { mean } => coherent(*mean, truncation),
            StateSpec::Thermal { mean } => thermal(*mean, truncation),
            StateSpec::Fock { n } => fock(*n, truncation),
            StateSpec::FockSuperposition { n_lo, n_hi } => fock_superposition(*n_lo, *n_hi, truncation),
            StateSpec::Custom { probs } => {
                if probs.len() != truncation + 1 {
                    return Err(Error::ShapeMismatch {
                        what: "custom probability vector",
                        expected: truncation + 1,
                        actual: probs.len(),
                    });
                }
                PhotonDistribution::from_probs(probs.clone())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            StateSpec::Coherent { mean } => format!("coherent(mean={mean})"),
            StateSpec::Thermal { mean } => format!("thermal(mean={mean})"),
            StateSpec::Fock { n } => format!("fock({n})"),
            StateSpec::FockSuperposition { n_lo, n_hi } => format!("fock_superposition({n_lo},{n_hi})"),
            StateSpec::Custom { probs } => format!("custom(len={})", probs.len()),
        }
    }
}

/// State family without parameters, used for sweeps over the mean photon number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Coherent,
    Thermal,
    Fock,
    FockSuperposition,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Coherent => "coherent",
            Family::Thermal => "thermal",
            Family::Fock => "fock",
            Family::FockSuperposition => "fock_superposition",
        }
    }

    /// Member of the family with the given mean photon number. Fock states need
    /// an integer mean; superpositions use `|mean-1>` and `|mean+1>`.
    pub fn with_mean(self, mean: f64) -> Result<StateSpec> {
        check_mean(mean)?;
        let integral = || -> Result<usize> {
            if mean.fract() != 0.0 {
                return Err(Error::invalid(
                    "mean",
                    format!("{} sweeps need integer means, got {mean}", self.name()),
                ));
            }
            Ok(mean as usize)
        };
        Ok(match self {
            Family::Coherent => StateSpec::Coherent { mean },
            Family::Thermal => StateSpec::Thermal { mean },
            Family::Fock => StateSpec::Fock { n: integral()? },
            Family::FockSuperposition => {
                let n = integral()?;
                if n < 1 {
                    return Err(Error::invalid("mean", "superposition sweeps need mean >= 1"));
                }
                StateSpec::FockSuperposition {
                    n_lo: n - 1,
                    n_hi: n + 1,
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_moves_mass_to_tail() {
        let full = thermal(4.0, 60).unwrap();
        let short = full.truncated_to(10).unwrap();
        assert!(short.is_valid());
        let ratio = 4.0 / 5.0f64;
        let expected_tail = ratio.powi(11);
        assert!((short.tail_mass() - expected_tail).abs() < 1e-6);
        let direct = thermal(4.0, 10).unwrap();
        for (a, b) in short.probs().iter().zip(direct.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(full.truncated_to(60).is_err());
    }
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn coherent_vacuum_limit() {
        let d = coherent(0.0, 10).unwrap();
        assert_eq!(d.probs()[0], 1.0);
        assert!(d.probs()[1..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn coherent_mean_three() {
        let d = coherent(3.0, 30).unwrap();
        // Poisson pmf by direct evaluation: e^-3 and 27 e^-3 / 6.
        assert_close(d.probs()[0], (-3.0f64).exp(), 1e-12);
        assert_close(d.probs()[3], 4.5 * (-3.0f64).exp(), 1e-12);
        assert_close(d.probs()[0], 0.049787, 1e-6);
        assert_close(d.probs()[3], 0.224042, 1e-6);
        assert_close(d.probs().iter().sum(), 1.0, 1e-9);
        assert!(!d.truncation_is_lossy());
    }

    #[test]
    fn coherent_mean_tracks_parameter() {
        for &m in &[0.5, 1.0, 3.0, 6.0, 10.0] {
            let n = (m + 10.0 * f64::sqrt(m)).ceil() as usize;
            assert_close(coherent(m, n).unwrap().mean(), m, 1e-3);
        }
    }

    #[test]
    fn thermal_vacuum_and_ratio() {
        let d = thermal(0.0, 10).unwrap();
        assert_eq!(d.probs()[0], 1.0);

        let d = thermal(1.0, 30).unwrap();
        for w in d.probs().windows(2) {
            assert_close(w[1] / w[0], 0.5, 1e-12);
        }
    }

    #[test]
    fn thermal_mean_three_reports_tail() {
        let d = thermal(3.0, 30).unwrap();
        let tail = 0.75f64.powi(31);
        assert_close(d.tail_mass(), tail, 1e-12);
        // Before renormalization p0 is exactly 1/4.
        assert_close(d.probs()[0] * (1.0 - tail), 0.25, 1e-12);
        assert!(d.truncation_is_lossy());
    }

    #[test]
    fn fock_cases() {
        let d = fock(4, 30).unwrap();
        assert_eq!(d.probs()[4], 1.0);
        assert_eq!(d.probs().iter().sum::<f64>(), 1.0);
        assert_eq!(fock(0, 1).unwrap().probs(), &[1.0, 0.0]);
        assert!(fock(5, 4).is_err());
    }

    #[test]
    fn superposition_cases() {
        let d = fock_superposition(3, 5, 30).unwrap();
        assert_eq!(d.probs()[3], 0.5);
        assert_eq!(d.probs()[5], 0.5);
        assert_eq!(d.probs().iter().filter(|&&p| p > 0.0).count(), 2);
        let d = fock_superposition(5, 7, 30).unwrap();
        assert_eq!((d.probs()[5], d.probs()[7]), (0.5, 0.5));
        assert_eq!(fock_superposition(0, 1, 1).unwrap().probs(), &[0.5, 0.5]);
        assert!(fock_superposition(3, 3, 30).is_err());
        assert!(fock_superposition(3, 31, 30).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(coherent(-1.0, 10).is_err());
        assert!(coherent(1.0, 0).is_err());
        assert!(thermal(-0.1, 10).is_err());
        assert!(PhotonDistribution::from_probs(vec![0.5, 0.6]).is_err());
        assert!(PhotonDistribution::from_probs(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn family_means() {
        assert_eq!(
            Family::FockSuperposition.with_mean(4.0).unwrap(),
            StateSpec::FockSuperposition { n_lo: 3, n_hi: 5 }
        );
        assert!(Family::Fock.with_mean(2.5).is_err());
        assert!(Family::FockSuperposition.with_mean(0.0).is_err());
    }

    #[test]
    fn state_spec_from_toml() {
        let s: StateSpec = toml::from_str("family = \"fock_superposition\"\nn_lo = 3\nn_hi = 5").unwrap();
        assert_eq!(s, StateSpec::FockSuperposition { n_lo: 3, n_hi: 5 });
        let s: StateSpec = toml::from_str("family = \"custom\"\nprobs = [0.25, 0.75]").unwrap();
        assert_eq!(s.build(1).unwrap().probs(), &[0.25, 0.75]);
        assert!(s.build(2).is_err());
    }

    proptest! {
        #[test]
        fn generators_are_normalized(mean in 0.0f64..12.0, n in 1usize..60, k in 0usize..60) {
            for d in [coherent(mean, n).unwrap(), thermal(mean, n).unwrap(), fock(k.min(n), n).unwrap()] {
                prop_assert!(d.is_valid());
                prop_assert_eq!(d.truncation(), n);
            }
        }
    }
}
