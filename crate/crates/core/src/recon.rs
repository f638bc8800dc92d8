//! Maximum-likelihood reconstruction of photon statistics by
//! expectation-maximization.
//!
//! Given observed frequencies `f[nu][m]` and the response tensor `B`, one EM
//! step maps an iterate `rho` to
//!
//! ```text
//! rho'[n] = rho[n] / (sum_nu sum_m B[nu][m][n]) * sum_nu sum_m B[nu][m][n] f[nu][m] / q[nu][m]
//! ```
//!
//! where `q = B rho` are the model outcome probabilities. Both sums run over
//! every outcome including the overflow one, so the normalizer is exactly `K`
//! and each step preserves nonnegativity and unit sum. A photon number whose
//! initial weight is zero stays at zero forever, which is why the default
//! starting point is the strictly positive uniform distribution.
//!
//! [`reconstruct`] iterates from that starting point up to a cap (by default
//! the number of runs per efficiency). If the total absolute error has not
//! settled by the cap, iteration continues until it does, within an
//! extension budget. Settling is judged by the relative change of the error
//! over a sliding window.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detector::{OutcomeMatrix, ResponseTensor};
use crate::error::{Error, Result};
use crate::sampler::OutcomeFrequencies;
use crate::states::PhotonDistribution;

fn check_shapes(f: &OutcomeFrequencies, tensor: &ResponseTensor) -> Result<()> {
    if f.settings() != tensor.settings() {
        return Err(Error::ShapeMismatch {
            what: "efficiency settings",
            expected: tensor.settings(),
            actual: f.settings(),
        });
    }
    if f.outcomes() != tensor.outcomes() {
        return Err(Error::ShapeMismatch {
            what: "outcomes per setting",
            expected: tensor.outcomes(),
            actual: f.outcomes(),
        });
    }
    Ok(())
}

fn check_rho(rho: &[f64], tensor: &ResponseTensor) -> Result<()> {
    if rho.len() != tensor.photons() {
        return Err(Error::ShapeMismatch {
            what: "photon distribution",
            expected: tensor.photons(),
            actual: rho.len(),
        });
    }
    Ok(())
}

/// Scratch buffers for repeated EM steps on one problem.
struct EmScratch {
    q: Vec<f64>,
    ratio: Vec<f64>,
    acc: Vec<f64>,
}

impl EmScratch {
    fn new(tensor: &ResponseTensor) -> Self {
        let rows = tensor.settings() * tensor.outcomes();
        Self {
            q: vec![0.0; rows],
            ratio: vec![0.0; rows],
            acc: vec![0.0; tensor.photons()],
        }
    }

    /// Fills `self.ratio` with `f / q` for the `q` already in `self.q`.
    fn fill_ratio(&mut self, f: &[f64], outcomes: usize) -> Result<()> {
        for (i, ((r, &fi), &qi)) in self.ratio.iter_mut().zip(f).zip(&self.q).enumerate() {
            *r = if fi == 0.0 {
                0.0
            } else if qi > 0.0 {
                fi / qi
            } else {
                return Err(Error::ZeroProbabilityOutcome {
                    nu: i / outcomes,
                    m: i % outcomes,
                    frequency: fi,
                });
            };
        }
        Ok(())
    }

    /// Writes the next iterate into `out`, given `self.ratio` for `rho`.
    fn update(&mut self, tensor: &ResponseTensor, rho: &[f64], out: &mut [f64]) {
        self.acc.iter_mut().for_each(|a| *a = 0.0);
        for (row, &w) in tensor.rows().zip(&self.ratio) {
            if w != 0.0 {
                for (a, b) in self.acc.iter_mut().zip(row) {
                    *a += b * w;
                }
            }
        }
        for (((o, &r), &a), &norm) in out.iter_mut().zip(rho).zip(&self.acc).zip(tensor.column_sums()) {
            *o = r * a / norm;
        }
    }
}

/// One EM update of `rho` against observed frequencies `f`.
///
/// Fails with [`Error::ZeroProbabilityOutcome`] if an observed outcome has zero
/// model probability under `rho`.
pub fn em_step(rho: &PhotonDistribution, tensor: &ResponseTensor, f: &OutcomeFrequencies) -> Result<PhotonDistribution> {
    check_shapes(f, tensor)?;
    check_rho(rho.probs(), tensor)?;
    let mut scratch = EmScratch::new(tensor);
    tensor.predict_into(rho.probs(), &mut scratch.q);
    scratch.fill_ratio(f.matrix().as_slice(), tensor.outcomes())?;
    let mut next = vec![0.0; tensor.photons()];
    scratch.update(tensor, rho.probs(), &mut next);
    Ok(PhotonDistribution::from_raw(next))
}

fn l1_distance(f: &[f64], q: &[f64]) -> f64 {
    f.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

fn mean_log_likelihood(f: &[f64], q: &[f64], outcomes: usize) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&fi, &qi)) in f.iter().zip(q).enumerate() {
        if fi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::ZeroProbabilityOutcome {
                nu: i / outcomes,
                m: i % outcomes,
                frequency: fi,
            });
        }
        total += fi * qi.ln();
    }
    Ok(total)
}

fn check_table_shapes(f: &OutcomeFrequencies, q: &OutcomeMatrix) -> Result<()> {
    if f.settings() != q.rows() {
        return Err(Error::ShapeMismatch {
            what: "efficiency settings",
            expected: f.settings(),
            actual: q.rows(),
        });
    }
    if f.outcomes() != q.cols() {
        return Err(Error::ShapeMismatch {
            what: "outcomes per setting",
            expected: f.outcomes(),
            actual: q.cols(),
        });
    }
    Ok(())
}

/// Total absolute error `sum_nu sum_m |f - q|` over every outcome.
pub fn total_absolute_error(f: &OutcomeFrequencies, q: &OutcomeMatrix) -> Result<f64> {
    check_table_shapes(f, q)?;
    Ok(l1_distance(f.matrix().as_slice(), q.as_slice()))
}

/// `log L = n_runs * sum_nu sum_m f log q`; outcomes never observed contribute nothing.
pub fn log_likelihood(f: &OutcomeFrequencies, n_runs: u64, q: &OutcomeMatrix) -> Result<f64> {
    check_table_shapes(f, q)?;
    Ok(n_runs as f64 * mean_log_likelihood(f.matrix().as_slice(), q.as_slice(), q.cols())?)
}

/// Fidelity `sum_n sqrt(a_n b_n)` over the whole truncated range.
pub fn fidelity(a: &PhotonDistribution, b: &PhotonDistribution) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            what: "photon distribution",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(fidelity_slices(a.probs(), b.probs()))
}

fn fidelity_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum::<f64>().min(1.0)
}

/// When to stop iterating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingRule {
    /// Iteration cap; conventionally the number of runs per efficiency.
    pub max_iterations: usize,
    /// Iterations over which the relative change of the error is measured.
    pub convergence_window: usize,
    /// The error has settled once `|e[i-w] - e[i]| <= threshold * e[i-w]`.
    pub epsilon_rate_threshold: f64,
    /// Extra iterations allowed past the cap while waiting for the error to settle.
    pub extension_limit: usize,
    /// Stop at the first sign of settling, even before the cap.
    pub stop_at_first_convergence: bool,
    /// Record traces every this many iterations; `None` picks `max(1, cap/1000)`.
    pub trace_stride: Option<usize>,
}

impl StoppingRule {
    /// Cap at `max_iterations`, window 100, threshold `1e-6`, extension up to
    /// ten times the cap in total.
    pub fn with_cap(max_iterations: usize) -> Self {
        Self {
            max_iterations,
            convergence_window: 100,
            epsilon_rate_threshold: 1e-6,
            extension_limit: max_iterations.saturating_mul(9),
            stop_at_first_convergence: false,
            trace_stride: None,
        }
    }

    /// Cap with no extension: exactly `max_iterations` steps unless settling
    /// is requested to stop early.
    pub fn fixed(max_iterations: usize) -> Self {
        Self {
            extension_limit: 0,
            ..Self::with_cap(max_iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.convergence_window < 1 {
            return Err(Error::invalid("convergence_window", "must be at least 1"));
        }
        if !(self.epsilon_rate_threshold > 0.0) {
            return Err(Error::invalid("epsilon_rate_threshold", "must be positive"));
        }
        if self.trace_stride == Some(0) {
            return Err(Error::invalid("trace_stride", "must be at least 1"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.trace_stride.unwrap_or((self.max_iterations / 1000).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Reached the cap with the error already settled.
    CapReached,
    /// Error settled after the cap, within the extension budget.
    ConvergedAfterCap,
    /// Error settled before the cap and early stopping was requested.
    ConvergedEarly,
    /// Ran out of iterations (cap plus extension) without the error settling.
    Unconverged,
}

/// Sliding-window settling detector for the error sequence.
struct SettlingMonitor {
    window: usize,
    threshold: f64,
    history: VecDeque<f64>,
}

impl SettlingMonitor {
    fn new(rule: &StoppingRule) -> Self {
        Self {
            window: rule.convergence_window,
            threshold: rule.epsilon_rate_threshold,
            history: VecDeque::with_capacity(rule.convergence_window + 1),
        }
    }

    fn push(&mut self, epsilon: f64) -> bool {
        if self.history.len() == self.window + 1 {
            self.history.pop_front();
        }
        self.history.push_back(epsilon);
        if self.history.len() < self.window + 1 {
            return false;
        }
        let old = self.history[0];
        (old - epsilon).abs() <= self.threshold * old
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub rho_final: PhotonDistribution,
    /// Iteration index of every recorded trace entry.
    pub trace_iterations: Vec<usize>,
    pub epsilon_trace: Vec<f64>,
    /// Log-likelihood per run, `sum f log q`; multiply by the runs per
    /// efficiency for the full log-likelihood.
    pub loglik_trace: Vec<f64>,
    /// Fidelity against the reference, when one was given.
    pub fidelity_trace: Option<Vec<f64>>,
    /// Number of EM steps applied to reach `rho_final`.
    pub iterations_run: usize,
    pub stop_reason: StopReason,
}

impl ReconstructionResult {
    pub fn final_epsilon(&self) -> f64 {
        *self.epsilon_trace.last().expect("final iterate is always recorded")
    }

    pub fn final_fidelity(&self) -> Option<f64> {
        self.fidelity_trace.as_ref().and_then(|t| t.last().copied())
    }
}

/// Runs EM from the uniform distribution.
pub fn reconstruct(
    f: &OutcomeFrequencies,
    tensor: &ResponseTensor,
    rule: &StoppingRule,
    reference: Option<&PhotonDistribution>,
) -> Result<ReconstructionResult> {
    let init = PhotonDistribution::uniform(tensor.truncation())?;
    reconstruct_from(f, tensor, rule, reference, &init)
}

/// Runs EM from an arbitrary starting distribution. Photon numbers with zero
/// starting weight are never revived.
pub fn reconstruct_from(
    f: &OutcomeFrequencies,
    tensor: &ResponseTensor,
    rule: &StoppingRule,
    reference: Option<&PhotonDistribution>,
    init: &PhotonDistribution,
) -> Result<ReconstructionResult> {
    check_shapes(f, tensor)?;
    check_rho(init.probs(), tensor)?;
    if let Some(r) = reference {
        check_rho(r.probs(), tensor)?;
    }
    rule.validate()?;

    let stride = rule.stride();
    let outcomes = tensor.outcomes();
    let freqs = f.matrix().as_slice();
    let mut scratch = EmScratch::new(tensor);
    let mut monitor = SettlingMonitor::new(rule);
    let mut rho = init.probs().to_vec();
    let mut next = vec![0.0; rho.len()];

    let mut trace_iterations = Vec::new();
    let mut epsilon_trace = Vec::new();
    let mut loglik_trace = Vec::new();
    let mut fidelity_trace = reference.map(|_| Vec::new());

    let hard_limit = rule.max_iterations.saturating_add(rule.extension_limit);
    let mut iteration = 0;
    let stop_reason = loop {
        tensor.predict_into(&rho, &mut scratch.q);
        let epsilon = l1_distance(freqs, &scratch.q);
        let settled = monitor.push(epsilon);

        let stop = if iteration >= rule.max_iterations {
            if settled {
                Some(if iteration == rule.max_iterations {
                    StopReason::CapReached
                } else {
                    StopReason::ConvergedAfterCap
                })
            } else if iteration >= hard_limit {
                Some(StopReason::Unconverged)
            } else {
                None
            }
        } else if rule.stop_at_first_convergence && settled {
            Some(StopReason::ConvergedEarly)
        } else {
            None
        };

        if iteration % stride == 0 || stop.is_some() {
            trace_iterations.push(iteration);
            epsilon_trace.push(epsilon);
            loglik_trace.push(mean_log_likelihood(freqs, &scratch.q, outcomes)?);
            if let (Some(trace), Some(r)) = (fidelity_trace.as_mut(), reference) {
                trace.push(fidelity_slices(&rho, r.probs()));
            }
        }
        if let Some(reason) = stop {
            break reason;
        }

        scratch.fill_ratio(freqs, outcomes)?;
        scratch.update(tensor, &rho, &mut next);
        std::mem::swap(&mut rho, &mut next);
        iteration += 1;
    };

    Ok(ReconstructionResult {
        rho_final: PhotonDistribution::from_raw(rho),
        trace_iterations,
        epsilon_trace,
        loglik_trace,
        fidelity_trace,
        iterations_run: iteration,
        stop_reason,
    })
}

/// Unconstrained least-squares solution of `B rho = f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearInversion {
    /// Raw estimate; may be negative and need not sum to one.
    pub estimate: Vec<f64>,
    /// Singular values above `max(rows, cols) * eps * sigma_max`.
    pub effective_rank: usize,
    /// `sigma_max / sigma_min` over all singular values (infinite if one vanishes).
    pub condition_number: f64,
}

/// Direct inversion of the stacked linear system by SVD, with singular
/// values below the effective-rank cutoff discarded (minimum-norm solution).
///
/// Fails when the system has fewer equations than unknowns.
pub fn linear_inversion_baseline(f: &OutcomeFrequencies, tensor: &ResponseTensor) -> Result<LinearInversion> {
    check_shapes(f, tensor)?;
    let rows = tensor.settings() * tensor.outcomes();
    let cols = tensor.photons();
    let a = DMatrix::from_row_iterator(rows, cols, tensor.rows().flatten().copied());
    let b = DVector::from_column_slice(f.matrix().as_slice());

    let svd = a.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let cutoff = rows.max(cols) as f64 * f64::EPSILON * sigma_max;
    let effective_rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
    if rows < cols || effective_rank == 0 {
        return Err(Error::RankDeficient {
            rank: effective_rank,
            unknowns: cols,
        });
    }
    let solution = svd
        .solve(&b, cutoff)
        .map_err(|e| Error::Config(format!("svd solve failed: {e}")))?;
    Ok(LinearInversion {
        estimate: solution.iter().copied().collect(),
        effective_rank,
        condition_number: if sigma_min > 0.0 { sigma_max / sigma_min } else { f64::INFINITY },
    })
}
