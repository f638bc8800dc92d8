//! Experiment orchestration: configuration, single runs, fidelity sweeps,
//! baseline comparisons and plot-ready output files.
//!
//! Every run is determined by its configuration and master seed. A single run
//! draws its counts from the master seed itself and replica `r` of a sweep
//! from `derive_seed(master, r)`, so a sweep cell repeats a single run once
//! per replica seed. Counts are always drawn at full photon-number
//! resolution and then coarsened to each counting capability, so
//! reconstructions at different `M` see the same simulated events.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, EfficiencyGrid, ResponseTensor};
use crate::error::{Error, Result};
use crate::ingest::{ingest_spectra, read_manifest, IngestOptions, IngestReport};
use crate::recon::{
    fidelity, linear_inversion_baseline, reconstruct, ReconstructionResult, StopReason, StoppingRule,
};
use crate::sampler::{derive_seed, exact_frequencies, sample_counts, save_counts, to_frequencies, OutcomeCounts, OutcomeFrequencies};
use crate::states::{Family, PhotonDistribution, StateSpec};

/// Overrides applied on top of the default stopping rule for a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingOverrides {
    /// Defaults to the runs per efficiency.
    pub max_iterations: Option<usize>,
    pub convergence_window: Option<usize>,
    pub epsilon_rate_threshold: Option<f64>,
    /// Defaults to nine times the cap.
    pub extension_limit: Option<usize>,
    pub stop_at_first_convergence: Option<bool>,
    pub trace_stride: Option<usize>,
}

/// Grid of states and detector settings for a fidelity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub families: Vec<Family>,
    pub means: Vec<f64>,
    /// Defaults to the top-level list.
    #[serde(default)]
    pub counting_capabilities: Option<Vec<usize>>,
    /// Defaults to the top-level `eta_max`.
    #[serde(default)]
    pub eta_max: Option<Vec<f64>>,
}

/// A complete experiment description, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub state: Option<StateSpec>,
    /// Largest photon number `N` of the reconstruction.
    pub truncation: usize,
    /// Largest photon number of the simulated source; defaults to `truncation`.
    /// A larger value lets the data contain photon numbers the reconstruction
    /// cannot represent.
    pub source_truncation: Option<usize>,
    /// Number `K` of efficiency settings, `eta_nu = nu * eta_max / K`.
    pub efficiencies: usize,
    pub eta_max: f64,
    pub counting_capabilities: Vec<usize>,
    pub runs_per_eta: u64,
    pub replicas: usize,
    pub seed: u64,
    /// Use the exact outcome probabilities instead of sampled counts.
    pub exact: bool,
    pub stopping: StoppingOverrides,
    pub output_dir: PathBuf,
    pub sweep: Option<SweepSpec>,
    pub ingest: IngestOptions,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            state: None,
            truncation: 30,
            source_truncation: None,
            efficiencies: 30,
            eta_max: 0.2,
            counting_capabilities: vec![2],
            runs_per_eta: 10_000,
            replicas: 40,
            seed: 0,
            exact: false,
            stopping: StoppingOverrides::default(),
            output_dir: "out".into(),
            sweep: None,
            ingest: IngestOptions::default(),
        }
    }
}

/// Which operation a spec is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    Sweep,
    Baseline,
    Reconstruct,
    Ingest,
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Directory the run writes into: `<output_dir>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn stopping_rule(&self) -> StoppingRule {
        let o = &self.stopping;
        let cap = o.max_iterations.unwrap_or(self.runs_per_eta as usize);
        let base = StoppingRule::with_cap(cap);
        StoppingRule {
            max_iterations: cap,
            convergence_window: o.convergence_window.unwrap_or(base.convergence_window),
            epsilon_rate_threshold: o.epsilon_rate_threshold.unwrap_or(base.epsilon_rate_threshold),
            extension_limit: o.extension_limit.unwrap_or(base.extension_limit),
            stop_at_first_convergence: o.stop_at_first_convergence.unwrap_or(base.stop_at_first_convergence),
            trace_stride: o.trace_stride,
        }
    }

    pub fn source_truncation(&self) -> usize {
        self.source_truncation.unwrap_or(self.truncation)
    }

    /// The state as simulated and its restriction to the reconstruction range.
    fn truth(&self, state: &StateSpec) -> Result<Truth> {
        let source = state.build(self.source_truncation())?;
        let reference = if self.source_truncation() > self.truncation {
            source.truncated_to(self.truncation)?
        } else {
            source.clone()
        };
        Ok(Truth { source, reference })
    }

    pub fn grid(&self) -> Result<EfficiencyGrid> {
        EfficiencyGrid::uniform(self.efficiencies, self.eta_max)
    }

    /// Checks everything a run in `mode` will need, before any compute.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::invalid("name", "must be a non-empty plain directory name"));
        }
        if self.truncation < 1 {
            return Err(Error::invalid("truncation", "must be at least 1"));
        }
        if self.source_truncation() < self.truncation {
            return Err(Error::invalid("source_truncation", "must not be below truncation"));
        }
        if self.runs_per_eta < 1 {
            return Err(Error::invalid("runs_per_eta", "must be at least 1"));
        }
        if self.replicas < 1 {
            return Err(Error::invalid("replicas", "must be at least 1"));
        }
        check_capabilities(&self.counting_capabilities, self.truncation)?;
        self.stopping_rule().validate()?;
        if mode == Mode::Ingest {
            return check_ingest(&self.ingest);
        }
        if mode == Mode::Reconstruct {
            if let Some(state) = &self.state {
                self.truth(state)?;
            }
            return Ok(());
        }
        self.grid()?;
        match mode {
            Mode::Single | Mode::Baseline => {
                let state = self
                    .state
                    .as_ref()
                    .ok_or_else(|| Error::Config("a [state] table is required for this command".into()))?;
                self.truth(state)?;
            }
            Mode::Sweep => {
                let sweep = self
                    .sweep
                    .as_ref()
                    .ok_or_else(|| Error::Config("a [sweep] table is required for the sweep command".into()))?;
                self.validate_sweep(sweep)?;
            }
            Mode::Reconstruct | Mode::Ingest => unreachable!(),
        }
        Ok(())
    }

    fn validate_sweep(&self, sweep: &SweepSpec) -> Result<()> {
        if sweep.families.is_empty() || sweep.means.is_empty() {
            return Err(Error::Config("sweep needs at least one family and one mean".into()));
        }
        if self.replicas < 2 && !self.exact {
            return Err(Error::invalid("replicas", "a sweep needs at least 2 replicas for spreads"));
        }
        if sweep.families.contains(&Family::FockSuperposition) && self.stopping.max_iterations.is_none() {
            return Err(Error::Config(
                "sweeps over fock_superposition need an explicit stopping.max_iterations".into(),
            ));
        }
        if let Some(ms) = &sweep.counting_capabilities {
            check_capabilities(ms, self.truncation)?;
        }
        for &eta_max in self.sweep_eta_max(sweep).iter() {
            EfficiencyGrid::uniform(self.efficiencies, eta_max)?;
        }
        for &family in &sweep.families {
            for &mean in &sweep.means {
                self.truth(&family.with_mean(mean)?)?;
            }
        }
        Ok(())
    }

    fn sweep_eta_max(&self, sweep: &SweepSpec) -> Vec<f64> {
        sweep.eta_max.clone().unwrap_or_else(|| vec![self.eta_max])
    }
}

fn check_capabilities(ms: &[usize], truncation: usize) -> Result<()> {
    if ms.is_empty() {
        return Err(Error::invalid("counting_capabilities", "list at least one M"));
    }
    for &m in ms {
        DetectorConfig::new(m, truncation)?;
    }
    Ok(())
}

fn check_ingest(opts: &IngestOptions) -> Result<()> {
    if opts.counting_capability < 1 {
        return Err(Error::invalid("ingest.counting_capability", "must be at least 1"));
    }
    if opts.peaks() < opts.counting_capability + 1 {
        return Err(Error::invalid("ingest.num_peaks", "need at least M + 1 peaks"));
    }
    if !(opts.raw_bin_width > 0.0) {
        return Err(Error::invalid("ingest.raw_bin_width", "must be positive"));
    }
    Ok(())
}

struct Truth {
    source: PhotonDistribution,
    reference: PhotonDistribution,
}

/// Observed data for one replica: counts at full resolution, or exact probabilities.
enum Data {
    Sampled(OutcomeCounts),
    Exact(PhotonDistribution, EfficiencyGrid),
}

impl Data {
    fn generate(source: &PhotonDistribution, grid: &EfficiencyGrid, exact: bool, n_runs: u64, seed: u64) -> Result<Self> {
        if exact {
            return Ok(Data::Exact(source.clone(), grid.clone()));
        }
        let n = source.truncation();
        let full = ResponseTensor::build(grid, DetectorConfig::new(n, n)?);
        Ok(Data::Sampled(sample_counts(grid, &full.binned(source)?, n_runs, seed)?))
    }

    fn frequencies(&self, counting_capability: usize) -> Result<OutcomeFrequencies> {
        match self {
            Data::Sampled(c) => Ok(to_frequencies(&c.rebin(counting_capability)?)),
            Data::Exact(source, grid) => {
                let tensor = tensor_for(grid, counting_capability, source.truncation())?;
                exact_frequencies(&tensor.binned(source)?)
            }
        }
    }
}

fn tensor_for(grid: &EfficiencyGrid, m: usize, truncation: usize) -> Result<ResponseTensor> {
    Ok(ResponseTensor::build(grid, DetectorConfig::new(m, truncation)?))
}

/// Reconstruction at one counting capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityRun {
    pub counting_capability: usize,
    pub result: ReconstructionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleReport {
    pub rho_true: Option<PhotonDistribution>,
    pub runs: Vec<CapabilityRun>,
    pub run_dir: PathBuf,
}

/// One simulated experiment reconstructed at every listed counting
/// capability, with summary, final estimates and traces written to disk.
pub fn run_single(spec: &ExperimentSpec) -> Result<SingleReport> {
    spec.validate(Mode::Single)?;
    let report = simulate_single(spec)?;
    write_single(spec, &report)?;
    Ok(report)
}

/// Same as [`run_single`] without touching the filesystem.
pub fn simulate_single(spec: &ExperimentSpec) -> Result<SingleReport> {
    spec.validate(Mode::Single)?;
    let truth = spec.truth(spec.state.as_ref().expect("validated"))?;
    let rho = truth.reference;
    let grid = spec.grid()?;
    let data = Data::generate(&truth.source, &grid, spec.exact, spec.runs_per_eta, spec.seed)?;
    let rule = spec.stopping_rule();
    let runs = spec
        .counting_capabilities
        .par_iter()
        .map(|&m| {
            let tensor = tensor_for(&grid, m, spec.truncation)?;
            let f = data.frequencies(m)?;
            Ok(CapabilityRun {
                counting_capability: m,
                result: reconstruct(&f, &tensor, &rule, Some(&rho))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SingleReport {
        rho_true: Some(rho),
        runs,
        run_dir: spec.run_dir(),
    })
}

/// Reconstructs measured (or previously simulated) counts. Each listed
/// counting capability not above that of the data is reconstructed from the
/// correspondingly coarsened counts; the configured state, if any, is used as
/// the fidelity reference.
pub fn reconstruct_counts(spec: &ExperimentSpec, counts: &OutcomeCounts) -> Result<SingleReport> {
    spec.validate(Mode::Reconstruct)?;
    let grid = EfficiencyGrid::new(counts.etas().to_vec())?;
    let reference = spec.state.as_ref().map(|s| spec.truth(s).map(|t| t.reference)).transpose()?;
    let available = counts.counting_capability();
    let mut ms: Vec<usize> = spec.counting_capabilities.iter().copied().filter(|&m| m <= available).collect();
    if ms.is_empty() {
        ms.push(available);
    }
    let rule = spec.stopping_rule();
    let runs = ms
        .par_iter()
        .map(|&m| {
            let tensor = tensor_for(&grid, m, spec.truncation)?;
            let f = to_frequencies(&counts.rebin(m)?);
            Ok(CapabilityRun {
                counting_capability: m,
                result: reconstruct(&f, &tensor, &rule, reference.as_ref())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SingleReport {
        rho_true: reference,
        runs,
        run_dir: spec.run_dir(),
    };
    write_single(spec, &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    counting_capability: usize,
    iterations_run: usize,
    stop_reason: StopReason,
    final_epsilon: f64,
    final_log_likelihood_per_run: f64,
    final_fidelity: Option<f64>,
    rho_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

#[derive(Serialize)]
struct SingleSummary<'a> {
    name: &'a str,
    state: Option<String>,
    truncation: usize,
    source_truncation: usize,
    truncated_tail_mass: Option<f64>,
    runs_per_eta: u64,
    seed: u64,
    exact: bool,
    stopping: StoppingRule,
    results: Vec<RunSummary<'a>>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_single(spec: &ExperimentSpec, report: &SingleReport) -> Result<()> {
    let dir = &report.run_dir;
    create_dir(dir)?;
    let summary = SingleSummary {
        name: &spec.name,
        state: spec.state.as_ref().map(StateSpec::label),
        truncation: spec.truncation,
        source_truncation: spec.source_truncation(),
        truncated_tail_mass: report.rho_true.as_ref().map(PhotonDistribution::tail_mass),
        runs_per_eta: spec.runs_per_eta,
        seed: spec.seed,
        exact: spec.exact,
        stopping: spec.stopping_rule(),
        results: report
            .runs
            .iter()
            .map(|r| RunSummary {
                counting_capability: r.counting_capability,
                iterations_run: r.result.iterations_run,
                stop_reason: r.result.stop_reason,
                final_epsilon: r.result.final_epsilon(),
                final_log_likelihood_per_run: *r.result.loglik_trace.last().expect("final iterate recorded"),
                final_fidelity: r.result.final_fidelity(),
                rho_mean: r.result.rho_final.mean(),
                note: (r.result.stop_reason == StopReason::Unconverged)
                    .then_some("error still changing at the iteration limit"),
            })
            .collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    let path = dir.join("rho_final.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["n".to_string()];
    if report.rho_true.is_some() {
        header.push("rho_true".into());
    }
    header.extend(report.runs.iter().map(|r| format!("rho_M{}", r.counting_capability)));
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for n in 0..=spec.truncation {
        let mut row = vec![n.to_string()];
        if let Some(rho) = &report.rho_true {
            row.push(rho.probs()[n].to_string());
        }
        row.extend(report.runs.iter().map(|r| r.result.rho_final.probs()[n].to_string()));
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("traces.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["M", "iteration", "epsilon", "loglik_per_run", "fidelity"])
        .map_err(|e| csv_error(&path, e))?;
    for r in &report.runs {
        let res = &r.result;
        for i in 0..res.trace_iterations.len() {
            let g = res.fidelity_trace.as_ref().map(|t| t[i].to_string()).unwrap_or_default();
            w.write_record([
                r.counting_capability.to_string(),
                res.trace_iterations[i].to_string(),
                res.epsilon_trace[i].to_string(),
                res.loglik_trace[i].to_string(),
                g,
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Outcome of one replica of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica: usize,
    pub seed: u64,
    pub fidelity: f64,
    pub epsilon: f64,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
}

/// One (state, M, eta_max) point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub family: Family,
    pub mean: f64,
    pub counting_capability: usize,
    pub eta_max: f64,
    pub replicas: Vec<ReplicaRecord>,
    pub mean_fidelity: f64,
    /// Sample standard deviation over replicas (zero for a single replica).
    pub std_fidelity: f64,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn standard_error(&self) -> f64 {
        if self.replicas.is_empty() {
            return f64::NAN;
        }
        self.std_fidelity / (self.replicas.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, family: Family, mean: f64, counting_capability: usize, eta_max: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| {
            c.family == family && c.mean == mean && c.counting_capability == counting_capability && c.eta_max == eta_max
        })
    }
}

struct CellKey {
    family: Family,
    mean: f64,
    counting_capability: usize,
    eta_max: f64,
}

fn run_replica(spec: &ExperimentSpec, key: &CellKey, replica: usize, rule: &StoppingRule) -> Result<ReplicaRecord> {
    let truth = spec.truth(&key.family.with_mean(key.mean)?)?;
    let grid = EfficiencyGrid::uniform(spec.efficiencies, key.eta_max)?;
    let seed = derive_seed(spec.seed, replica as u64);
    let data = Data::generate(&truth.source, &grid, spec.exact, spec.runs_per_eta, seed)?;
    let tensor = tensor_for(&grid, key.counting_capability, spec.truncation)?;
    let result = reconstruct(&data.frequencies(key.counting_capability)?, &tensor, rule, Some(&truth.reference))?;
    Ok(ReplicaRecord {
        replica,
        seed,
        fidelity: result.final_fidelity().expect("reference given"),
        epsilon: result.final_epsilon(),
        iterations_run: result.iterations_run,
        stop_reason: result.stop_reason,
    })
}

/// Runs every (family, mean, M, eta_max) cell of the sweep for all replicas in
/// parallel and aggregates the final fidelities. The counts of replica `r`
/// are drawn from seed `derive_seed(seed, r)` in every cell, so a one-cell
/// sweep repeats [`simulate_single`] once per replica seed. Exact-data sweeps
/// run a single replica.
pub fn simulate_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate(Mode::Sweep)?;
    let sweep = spec.sweep.as_ref().expect("validated");
    let ms = sweep.counting_capabilities.as_ref().unwrap_or(&spec.counting_capabilities);
    let replicas = if spec.exact { 1 } else { spec.replicas };
    let mut keys = Vec::new();
    for &family in &sweep.families {
        for &eta_max in &spec.sweep_eta_max(sweep) {
            for &mean in &sweep.means {
                for &m in ms {
                    keys.push(CellKey {
                        family,
                        mean,
                        counting_capability: m,
                        eta_max,
                    });
                }
            }
        }
    }
    let rule = spec.stopping_rule();
    let outcomes: Vec<Result<ReplicaRecord>> = (0..keys.len() * replicas)
        .into_par_iter()
        .map(|task| run_replica(spec, &keys[task / replicas], task % replicas, &rule))
        .collect();

    let cells = keys
        .iter()
        .zip(outcomes.chunks(replicas))
        .map(|(key, results)| {
            let mut records = Vec::with_capacity(replicas);
            let mut error = None;
            for r in results {
                match r {
                    Ok(rec) => records.push(rec.clone()),
                    Err(e) if error.is_none() => error = Some(e.to_string()),
                    Err(_) => {}
                }
            }
            let (mean_fidelity, std_fidelity) = mean_and_std(records.iter().map(|r| r.fidelity));
            SweepCell {
                family: key.family,
                mean: key.mean,
                counting_capability: key.counting_capability,
                eta_max: key.eta_max,
                replicas: records,
                mean_fidelity,
                std_fidelity,
                error,
            }
        })
        .collect();
    Ok(SweepResult { cells })
}

/// [`simulate_sweep`] plus `sweep.csv`, `replicas.csv`, `summary.json` and one
/// `panel_<family>_eta<eta_max>.csv` per family and maximum efficiency.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    let result = simulate_sweep(spec)?;
    write_sweep(spec, &result)?;
    Ok(result)
}

fn mean_and_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (mean, var.sqrt())
}

fn write_sweep(spec: &ExperimentSpec, result: &SweepResult) -> Result<()> {
    let dir = spec.run_dir();
    create_dir(&dir)?;

    let path = dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["family", "mean", "eta_max", "M", "replicas", "mean_G", "std_G", "se_G", "error"])
        .map_err(|e| csv_error(&path, e))?;
    for c in &result.cells {
        w.write_record([
            c.family.name().to_string(),
            c.mean.to_string(),
            c.eta_max.to_string(),
            c.counting_capability.to_string(),
            c.replicas.len().to_string(),
            c.mean_fidelity.to_string(),
            c.std_fidelity.to_string(),
            c.standard_error().to_string(),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("replicas.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["family", "mean", "eta_max", "M", "replica", "seed", "G", "epsilon", "iterations", "stop_reason"])
        .map_err(|e| csv_error(&path, e))?;
    for c in &result.cells {
        for r in &c.replicas {
            w.write_record([
                c.family.name().to_string(),
                c.mean.to_string(),
                c.eta_max.to_string(),
                c.counting_capability.to_string(),
                r.replica.to_string(),
                r.seed.to_string(),
                r.fidelity.to_string(),
                r.epsilon.to_string(),
                r.iterations_run.to_string(),
                serde_json::to_value(r.stop_reason)?.as_str().unwrap_or_default().to_string(),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    // Wide panels: one row per mean, mean and spread of G per M.
    let mut panels: Vec<(Family, f64)> = Vec::new();
    for c in &result.cells {
        if !panels.contains(&(c.family, c.eta_max)) {
            panels.push((c.family, c.eta_max));
        }
    }
    for (family, eta_max) in panels {
        let cells: Vec<&SweepCell> = result
            .cells
            .iter()
            .filter(|c| c.family == family && c.eta_max == eta_max)
            .collect();
        let mut ms: Vec<usize> = cells.iter().map(|c| c.counting_capability).collect();
        ms.sort_unstable();
        ms.dedup();
        let mut means: Vec<f64> = cells.iter().map(|c| c.mean).collect();
        means.sort_by(f64::total_cmp);
        means.dedup();
        let path = dir.join(format!("panel_{}_eta{}.csv", family.name(), eta_max));
        let mut w = csv_writer(&path)?;
        let mut header = vec!["mean".to_string()];
        for m in &ms {
            header.push(format!("G_M{m}"));
            header.push(format!("std_M{m}"));
        }
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for mean in means {
            let mut row = vec![mean.to_string()];
            for &m in &ms {
                match cells.iter().find(|c| c.mean == mean && c.counting_capability == m) {
                    Some(c) => {
                        row.push(c.mean_fidelity.to_string());
                        row.push(c.std_fidelity.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        name: &'a str,
        truncation: usize,
        efficiencies: usize,
        runs_per_eta: u64,
        replicas: usize,
        seed: u64,
        exact: bool,
        stopping: StoppingRule,
        failed_cells: usize,
        cells: &'a [SweepCell],
    }
    write_json(
        &dir.join("summary.json"),
        &Summary {
            name: &spec.name,
            truncation: spec.truncation,
            efficiencies: spec.efficiencies,
            runs_per_eta: spec.runs_per_eta,
            replicas: spec.replicas,
            seed: spec.seed,
            exact: spec.exact,
            stopping: spec.stopping_rule(),
            failed_cells: result.cells.iter().filter(|c| c.error.is_some()).count(),
            cells: &result.cells,
        },
    )
}

/// Linear inversion against EM on the same data, at one counting capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub counting_capability: usize,
    pub em_l1: f64,
    pub em_fidelity: f64,
    pub baseline_l1: f64,
    /// Sum of the magnitudes of the negative baseline entries.
    pub negativity_mass: f64,
    pub negative_entries: usize,
    pub effective_rank: usize,
    pub condition_number: f64,
    pub em_estimate: Vec<f64>,
    pub baseline_estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rho_true: Vec<f64>,
    pub comparisons: Vec<BaselineComparison>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Reconstructs one data set both by EM and by linear inversion and reports
/// their L1 distances to the true distribution.
pub fn compare_baseline(spec: &ExperimentSpec) -> Result<BaselineReport> {
    spec.validate(Mode::Baseline)?;
    let truth = spec.truth(spec.state.as_ref().expect("validated"))?;
    let rho = truth.reference;
    let grid = spec.grid()?;
    let data = Data::generate(&truth.source, &grid, spec.exact, spec.runs_per_eta, spec.seed)?;
    let rule = spec.stopping_rule();
    let comparisons = spec
        .counting_capabilities
        .par_iter()
        .map(|&m| {
            let tensor = tensor_for(&grid, m, spec.truncation)?;
            let f = data.frequencies(m)?;
            let em = reconstruct(&f, &tensor, &rule, Some(&rho))?;
            let lin = linear_inversion_baseline(&f, &tensor)?;
            let negative: Vec<f64> = lin.estimate.iter().copied().filter(|&x| x < 0.0).collect();
            Ok(BaselineComparison {
                counting_capability: m,
                em_l1: l1(em.rho_final.probs(), rho.probs()),
                em_fidelity: fidelity(&em.rho_final, &rho)?,
                baseline_l1: l1(&lin.estimate, rho.probs()),
                negativity_mass: -negative.iter().sum::<f64>(),
                negative_entries: negative.len(),
                effective_rank: lin.effective_rank,
                condition_number: lin.condition_number,
                em_estimate: em.rho_final.into_probs(),
                baseline_estimate: lin.estimate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineReport {
        rho_true: rho.into_probs(),
        comparisons,
    })
}

/// [`compare_baseline`] plus `baseline.json` and `baseline.csv`.
pub fn run_baseline_comparison(spec: &ExperimentSpec) -> Result<BaselineReport> {
    let report = compare_baseline(spec)?;
    let dir = spec.run_dir();
    create_dir(&dir)?;
    write_json(&dir.join("baseline.json"), &report)?;
    let path = dir.join("baseline.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["n".to_string(), "rho_true".to_string()];
    for c in &report.comparisons {
        header.push(format!("em_M{}", c.counting_capability));
        header.push(format!("linear_M{}", c.counting_capability));
    }
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for n in 0..report.rho_true.len() {
        let mut row = vec![n.to_string(), report.rho_true[n].to_string()];
        for c in &report.comparisons {
            row.push(c.em_estimate[n].to_string());
            row.push(c.baseline_estimate[n].to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Reads the spectra listed in `manifest`, turns them into outcome counts and
/// writes `counts.csv` and `fits.json`.
pub fn run_ingest(spec: &ExperimentSpec, manifest: &Path) -> Result<IngestReport> {
    spec.validate(Mode::Ingest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let spectra = read_manifest(manifest, base, spec.ingest.raw_bin_width)?;
    let report = ingest_spectra(&spectra, &spec.ingest)?;
    let dir = spec.run_dir();
    create_dir(&dir)?;
    save_counts(&report.counts, &dir.join("counts.csv"))?;
    #[derive(Serialize)]
    struct Fits<'a> {
        fits: &'a [crate::ingest::PeakFit],
        thresholds: &'a [crate::ingest::ThresholdSet],
    }
    write_json(
        &dir.join("fits.json"),
        &Fits {
            fits: &report.fits,
            thresholds: &report.thresholds,
        },
    )?;
    Ok(report)
}

/// Human-readable one-line-per-result digest of a single run.
pub fn describe_single(report: &SingleReport) -> String {
    let mut out = String::new();
    for r in &report.runs {
        let res = &r.result;
        out += &format!(
            "M={}: iterations={} stop={:?} epsilon={:.6}",
            r.counting_capability,
            res.iterations_run,
            res.stop_reason,
            res.final_epsilon()
        );
        if let Some(g) = res.final_fidelity() {
            out += &format!(" G={g:.6}");
        }
        out.push('\n');
    }
    out + &format!("wrote {}", report.run_dir.display())
}
