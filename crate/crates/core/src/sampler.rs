//! Finite-sample outcome counts for simulated experiments.
//!
//! Each efficiency setting `nu` gets its own ChaCha8 stream seeded with
//! `splitmix64(master + 0x9E3779B97F4A7C15 * (nu + 1))`, so rows can be drawn
//! in any order (or in parallel) and still reproduce bit-for-bit. A row is a
//! multinomial draw of size `n_runs`, produced by sequential binomial
//! conditioning over the outcomes.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::detector::{BinnedDistribution, EfficiencyGrid, OutcomeMatrix};
use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for index `index` derived from `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index + 1)))
}

pub(crate) fn rng_for(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// Multinomial draw of size `n` over `probs` by sequential binomials.
pub(crate) fn multinomial<R: rand::Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut remaining = n;
    let mut mass_left: f64 = probs.iter().sum();
    let last = probs.len() - 1;
    for (m, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if m == last {
            out[m] = remaining;
            break;
        }
        let conditional = if mass_left > 0.0 { (p / mass_left).clamp(0.0, 1.0) } else { 0.0 };
        let draw = if conditional == 0.0 {
            0
        } else if conditional == 1.0 {
            remaining
        } else {
            Binomial::new(remaining, conditional)
                .expect("probability clamped to [0, 1]")
                .sample(rng)
        };
        out[m] = draw;
        remaining -= draw;
        mass_left -= p;
    }
    out
}

/// Event counts `n[nu][m]` per efficiency setting, all rows of size `n_runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    etas: Vec<f64>,
    outcomes: usize,
    counts: Vec<u64>,
    runs_per_eta: u64,
}

impl OutcomeCounts {
    /// Builds counts from per-setting rows. Every row needs the same number of
    /// outcomes (at least two) and the same, nonzero total.
    pub fn from_rows(etas: Vec<f64>, rows: Vec<Vec<u64>>) -> Result<Self> {
        if rows.len() != etas.len() {
            return Err(Error::ShapeMismatch {
                what: "count rows",
                expected: etas.len(),
                actual: rows.len(),
            });
        }
        EfficiencyGrid::new(etas.clone())?;
        let outcomes = rows[0].len();
        if outcomes < 2 {
            return Err(Error::invalid("counts", "need at least two outcomes per row"));
        }
        let runs_per_eta: u64 = rows[0].iter().sum();
        if runs_per_eta == 0 {
            return Err(Error::invalid("counts", "rows must contain at least one event"));
        }
        let mut counts = Vec::with_capacity(rows.len() * outcomes);
        for (nu, row) in rows.iter().enumerate() {
            if row.len() != outcomes {
                return Err(Error::ShapeMismatch {
                    what: "outcomes per row",
                    expected: outcomes,
                    actual: row.len(),
                });
            }
            let total: u64 = row.iter().sum();
            if total != runs_per_eta {
                return Err(Error::invalid(
                    "counts",
                    format!("row {} has {total} events, expected {runs_per_eta} like row 1", nu + 1),
                ));
            }
            counts.extend_from_slice(row);
        }
        Ok(Self {
            etas,
            outcomes,
            counts,
            runs_per_eta,
        })
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn settings(&self) -> usize {
        self.etas.len()
    }

    pub fn outcomes(&self) -> usize {
        self.outcomes
    }

    pub fn counting_capability(&self) -> usize {
        self.outcomes - 1
    }

    pub fn runs_per_eta(&self) -> u64 {
        self.runs_per_eta
    }

    pub fn get(&self, nu: usize, m: usize) -> u64 {
        self.counts[nu * self.outcomes + m]
    }

    pub fn row(&self, nu: usize) -> &[u64] {
        &self.counts[nu * self.outcomes..(nu + 1) * self.outcomes]
    }

    /// Merges outcomes `m >= M` into the overflow outcome of a coarser counter.
    pub fn rebin(&self, counting_capability: usize) -> Result<Self> {
        if counting_capability < 1 || counting_capability > self.counting_capability() {
            return Err(Error::invalid(
                "M",
                format!(
                    "can only coarsen to 1..={}, got {counting_capability}",
                    self.counting_capability()
                ),
            ));
        }
        let outcomes = counting_capability + 1;
        let mut counts = Vec::with_capacity(self.settings() * outcomes);
        for nu in 0..self.settings() {
            let row = self.row(nu);
            counts.extend_from_slice(&row[..counting_capability]);
            counts.push(row[counting_capability..].iter().sum());
        }
        Ok(Self {
            etas: self.etas.clone(),
            outcomes,
            counts,
            runs_per_eta: self.runs_per_eta,
        })
    }
}

/// Draws `n_runs` events at every efficiency of `grid` from the matching
/// outcome distribution.
pub fn sample_counts(
    grid: &EfficiencyGrid,
    q_per_eta: &[BinnedDistribution],
    n_runs: u64,
    seed: u64,
) -> Result<OutcomeCounts> {
    if n_runs < 1 {
        return Err(Error::invalid("n_runs", "need at least one run per efficiency"));
    }
    if q_per_eta.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            what: "outcome distributions",
            expected: grid.len(),
            actual: q_per_eta.len(),
        });
    }
    let outcomes = q_per_eta[0].probs().len();
    let mut counts = Vec::with_capacity(grid.len() * outcomes);
    for (nu, q) in q_per_eta.iter().enumerate() {
        if q.probs().len() != outcomes {
            return Err(Error::ShapeMismatch {
                what: "outcomes per efficiency",
                expected: outcomes,
                actual: q.probs().len(),
            });
        }
        let mut rng = rng_for(seed, nu as u64);
        counts.extend(multinomial(&mut rng, n_runs, q.probs()));
    }
    Ok(OutcomeCounts {
        etas: grid.etas().to_vec(),
        outcomes,
        counts,
        runs_per_eta: n_runs,
    })
}

/// Observed outcome frequencies `f[nu][m]`; every row sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFrequencies(OutcomeMatrix);

impl OutcomeFrequencies {
    pub fn new(matrix: OutcomeMatrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() < 2 {
            return Err(Error::invalid("frequencies", "need at least one row of two outcomes"));
        }
        for (nu, row) in matrix.iter_rows().enumerate() {
            if row.iter().any(|f| !f.is_finite() || *f < 0.0) {
                return Err(Error::invalid("frequencies", format!("row {} has invalid entries", nu + 1)));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "frequencies",
                    format!("row {} sums to {total}, not 1", nu + 1),
                ));
            }
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &OutcomeMatrix {
        &self.0
    }

    pub fn settings(&self) -> usize {
        self.0.rows()
    }

    pub fn outcomes(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, nu: usize, m: usize) -> f64 {
        self.0.get(nu, m)
    }

    pub fn row(&self, nu: usize) -> &[f64] {
        self.0.row(nu)
    }
}

pub fn to_frequencies(counts: &OutcomeCounts) -> OutcomeFrequencies {
    let n = counts.runs_per_eta as f64;
    let mut matrix = OutcomeMatrix::zeros(counts.settings(), counts.outcomes);
    for nu in 0..counts.settings() {
        for (f, &c) in matrix.row_mut(nu).iter_mut().zip(counts.row(nu)) {
            *f = c as f64 / n;
        }
    }
    OutcomeFrequencies(matrix)
}

/// Infinite-sample frequencies: `f = q` exactly.
pub fn exact_frequencies(q_per_eta: &[BinnedDistribution]) -> Result<OutcomeFrequencies> {
    let rows: Vec<Vec<f64>> = q_per_eta.iter().map(|q| q.probs().to_vec()).collect();
    if rows.is_empty() {
        return Err(Error::invalid("q_per_eta", "need at least one efficiency"));
    }
    OutcomeFrequencies::new(OutcomeMatrix::from_rows(&rows)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRecord {
    nu: usize,
    eta: f64,
    m: usize,
    count: u64,
}

/// Writes counts as CSV with header `nu,eta,m,count`, `nu` starting at 1.
pub fn write_counts_csv<W: Write>(counts: &OutcomeCounts, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for nu in 0..counts.settings() {
        for m in 0..counts.outcomes {
            w.serialize(CountRecord {
                nu: nu + 1,
                eta: counts.etas[nu],
                m,
                count: counts.get(nu, m),
            })
            .map_err(|e| Error::Config(format!("writing counts: {e}")))?;
        }
    }
    w.flush().map_err(|e| Error::io("counts csv", e))
}

/// Reads the `nu,eta,m,count` CSV produced by [`write_counts_csv`] or by
/// spectrum ingestion. Rows may come in any order, but every `(nu, m)` pair
/// for `m = 0..=M` must be present exactly once.
pub fn read_counts_csv<R: Read>(reader: R) -> Result<OutcomeCounts> {
    let parse_err = |message: String| Error::Parse {
        path: "counts csv".into(),
        message,
    };
    let mut records = Vec::new();
    for (line, rec) in csv::Reader::from_reader(reader).deserialize::<CountRecord>().enumerate() {
        records.push(rec.map_err(|e| parse_err(format!("record {}: {e}", line + 1)))?);
    }
    if records.is_empty() {
        return Err(parse_err("no records".into()));
    }
    let k = records.iter().map(|r| r.nu).max().unwrap_or(0);
    let outcomes = records.iter().map(|r| r.m).max().unwrap_or(0) + 1;
    if records.iter().any(|r| r.nu == 0) {
        return Err(parse_err("nu is 1-based".into()));
    }
    let mut etas = vec![f64::NAN; k];
    let mut rows = vec![vec![None; outcomes]; k];
    for r in &records {
        let eta = &mut etas[r.nu - 1];
        if eta.is_nan() {
            *eta = r.eta;
        } else if *eta != r.eta {
            return Err(parse_err(format!("nu={} listed with two efficiencies", r.nu)));
        }
        let slot = &mut rows[r.nu - 1][r.m];
        if slot.replace(r.count).is_some() {
            return Err(parse_err(format!("duplicate record nu={} m={}", r.nu, r.m)));
        }
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(nu, row)| {
            row.into_iter()
                .enumerate()
                .map(|(m, c)| c.ok_or_else(|| parse_err(format!("missing record nu={} m={m}", nu + 1))))
                .collect::<Result<Vec<u64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    OutcomeCounts::from_rows(etas, rows)
}

pub fn save_counts(counts: &OutcomeCounts, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_counts_csv(counts, std::io::BufWriter::new(file))
}

pub fn load_counts(path: &Path) -> Result<OutcomeCounts> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_counts_csv(file).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}
