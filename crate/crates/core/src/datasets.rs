//! Series families: synthetic generators, CSV ingestion, normalization and
//! windowing.
//!
//! Variates are addressed by a global id: `0..M` are the input columns in
//! header order, `M..M+N` the virtual columns in header order.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFamily {
    names: Vec<String>,
    roles: Vec<Role>,
    columns: Vec<Vec<f64>>,
    /// Abstract time between samples.
    pub sample_period: f64,
    /// Column index for each variate id.
    order: Vec<usize>,
    m: usize,
}

impl SeriesFamily {
    pub fn new(names: Vec<String>, roles: Vec<Role>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != roles.len() || names.len() != columns.len() {
            return Err(invalid(format!(
                "{} names, {} roles and {} columns",
                names.len(),
                roles.len(),
                columns.len()
            )));
        }
        let t = columns.first().map_or(0, Vec::len);
        if t == 0 {
            return Err(invalid("series family needs at least one sample"));
        }
        if let Some((i, _)) = columns.iter().enumerate().find(|(_, c)| c.len() != t) {
            return Err(invalid(format!("column `{}` has a different length", names[i])));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(invalid(format!("duplicate column name `{n}`")));
            }
        }
        let mut order: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == Role::Input).collect();
        let m = order.len();
        if m == 0 {
            return Err(invalid("series family needs at least one input column"));
        }
        order.extend((0..roles.len()).filter(|&i| roles[i] == Role::Virtual));
        Ok(SeriesFamily {
            names,
            roles,
            columns,
            sample_period: 1.0,
            order,
            m,
        })
    }

    /// Number of input signals.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of virtual sensors.
    pub fn n(&self) -> usize {
        self.columns.len() - self.m
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn variate(&self, id: usize) -> &[f64] {
        &self.columns[self.order[id]]
    }

    pub fn variate_name(&self, id: usize) -> &str {
        &self.names[self.order[id]]
    }

    /// Global id of the `j`-th virtual sensor (0-based).
    pub fn virtual_id(&self, j: usize) -> usize {
        self.m + j
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(&self.names).map_err(|e| csv_io(path, e))?;
        let mut row = vec![String::new(); self.columns.len()];
        for t in 0..self.len() {
            for (cell, col) in row.iter_mut().zip(&self.columns) {
                *cell = format!("{}", col[t]);
            }
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads a rectangular CSV with a header row. Columns not named in
/// `role_map` are inputs.
pub fn load_csv(path: &Path, role_map: &HashMap<String, Role>) -> Result<SeriesFamily> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for name in role_map.keys() {
        if !headers.contains(name) {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row: 1,
                column: name.clone(),
                message: "role map names a column that is not in the header".into(),
            });
        }
    }
    let mut columns = vec![Vec::new(); headers.len()];
    for (r, rec) in rdr.records().enumerate() {
        // Row numbers are 1-based and count the header.
        let row = r + 2;
        let rec = rec.map_err(|e| csv_io(path, e))?;
        if rec.len() != headers.len() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let bad = |message: String| Error::Csv {
                path: path.to_path_buf(),
                row,
                column: headers[c].clone(),
                message,
            };
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| bad(format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("`{cell}` is not a finite number")));
            }
            columns[c].push(v);
        }
    }
    if columns.first().is_none_or(Vec::is_empty) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            row: 2,
            column: String::new(),
            message: "no data rows".into(),
        });
    }
    let roles = headers
        .iter()
        .map(|h| role_map.get(h).copied().unwrap_or(Role::Input))
        .collect();
    SeriesFamily::new(headers, roles, columns)
}

// ---- synthetic data -----------------------------------------------------

/// Draws `count` sinusoid frequencies per signal for `signals` signals.
///
/// Frequencies are distinct integer DFT bins (cycles per `t` samples) taken
/// from periods between 24 and 1024 samples, so signals are exactly
/// orthogonal over the full length. When the band holds too few bins,
/// continuous frequencies from the same band are used instead.
fn draw_frequencies(rng: &mut ChaCha8Rng, signals: usize, count: usize, t: usize) -> Vec<Vec<f64>> {
    let lo = (t / 1024).max(1);
    let hi = (t / 24).max(lo);
    let bins: Vec<usize> = (lo..=hi).collect();
    if bins.len() >= signals * count {
        let mut chosen: Vec<usize> = bins.choose_multiple(rng, signals * count).copied().collect();
        chosen.shuffle(rng);
        chosen
            .chunks(count)
            .map(|c| c.iter().map(|&k| k as f64 / t as f64).collect())
            .collect()
    } else {
        let (flo, fhi) = (1.0 / 1024.0, 1.0 / 24.0);
        (0..signals)
            .map(|_| (0..count).map(|_| rng.gen_range(flo..fhi)).collect())
            .collect()
    }
}

fn sinusoid_mixtures(m: usize, t: usize, per_signal: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let freqs = draw_frequencies(rng, m, per_signal, t);
    freqs
        .iter()
        .map(|fs| {
            let comps: Vec<(f64, f64, f64)> = fs
                .iter()
                .map(|&f| (f, rng.gen_range(0.5..1.5), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            (0..t)
                .map(|i| {
                    comps
                        .iter()
                        .map(|&(f, a, ph)| a * (2.0 * PI * f * i as f64 + ph).sin())
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn input_names(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("z{i}")).collect()
}

/// `m` mutually uncorrelated sinusoid-mixture inputs plus one virtual column
/// per entry of `targets`, each an exact copy of input `targets[j]`
/// (1-based).
pub fn generate_synthetic_uncorrelated(
    m: usize,
    t: usize,
    targets: &[usize],
    frequencies_per_signal: usize,
    seed: u64,
) -> Result<SeriesFamily> {
    if m == 0 || t == 0 {
        return Err(invalid("need at least one input signal and one sample"));
    }
    if frequencies_per_signal == 0 {
        return Err(invalid("frequencies_per_signal must be at least 1"));
    }
    let mut seen = BTreeSet::new();
    for &a in targets {
        if a == 0 || a > m {
            return Err(invalid(format!("target {a} outside 1..={m}")));
        }
        if !seen.insert(a) {
            return Err(invalid(format!("target {a} listed twice")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = sinusoid_mixtures(m, t, frequencies_per_signal, &mut rng);
    let mut names = input_names(m);
    let mut roles = vec![Role::Input; m];
    for (j, &a) in targets.iter().enumerate() {
        columns.push(columns[a - 1].clone());
        names.push(format!("v{}", j + 1));
        roles.push(Role::Virtual);
    }
    SeriesFamily::new(names, roles, columns)
}

/// Inputs as in [`generate_synthetic_uncorrelated`]; virtual column `j` is
/// the standardized product of inputs `factor_pairs[j]` (1-based).
pub fn generate_synthetic_nonlinear(
    m: usize,
    t: usize,
    factor_pairs: &[(usize, usize)],
    frequencies_per_signal: usize,
    seed: u64,
) -> Result<SeriesFamily> {
    if m == 0 || t == 0 || frequencies_per_signal == 0 {
        return Err(invalid("need inputs, samples and at least one frequency"));
    }
    for &(a, b) in factor_pairs {
        if a == 0 || b == 0 || a > m || b > m {
            return Err(invalid(format!("factor pair ({a}, {b}) outside 1..={m}")));
        }
        if a == b {
            return Err(invalid(format!("factor pair ({a}, {b}) repeats an input")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = sinusoid_mixtures(m, t, frequencies_per_signal, &mut rng);
    let mut names = input_names(m);
    let mut roles = vec![Role::Input; m];
    for (j, &(a, b)) in factor_pairs.iter().enumerate() {
        let prod: Vec<f64> = columns[a - 1]
            .iter()
            .zip(&columns[b - 1])
            .map(|(x, y)| x * y)
            .collect();
        let (mean, std) = mean_std(&prod);
        columns.push(prod.iter().map(|v| (v - mean) / std).collect());
        names.push(format!("v{}", j + 1));
        roles.push(Role::Virtual);
    }
    SeriesFamily::new(names, roles, columns)
}

// ---- normalization --------------------------------------------------------

/// Population mean and standard deviation (clamped below by [`NORM_EPS`]).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(NORM_EPS))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len().max(1) as f64;
    cov / (sa * sb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn normalize(&self, id: usize, x: f64) -> f64 {
        (x - self.mean[id]) / self.std[id]
    }

    pub fn denormalize(&self, id: usize, z: f64) -> f64 {
        z * self.std[id] + self.mean[id]
    }
}

/// Number of leading samples that form the training split.
pub fn train_len(t: usize, train_fraction: f64) -> usize {
    ((t as f64 * train_fraction).round() as usize).clamp(1, t)
}

/// Per-variate statistics over the leading `train_fraction` of the samples.
pub fn compute_norm_stats(family: &SeriesFamily, train_fraction: f64) -> Result<NormStats> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(invalid(format!("train fraction {train_fraction} outside (0, 1]")));
    }
    let n = train_len(family.len(), train_fraction);
    let (mean, std) = (0..family.m() + family.n())
        .map(|id| mean_std(&family.variate(id)[..n]))
        .unzip();
    Ok(NormStats { mean, std })
}

// ---- windows ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Context slots `c`.
    pub context: usize,
    /// Horizon slots `K`.
    pub horizon: usize,
    /// Patch length `p`.
    pub patch: usize,
    /// Samples between consecutive window starts.
    pub stride: usize,
}

impl WindowSpec {
    pub fn slots(&self) -> usize {
        self.context + self.horizon
    }

    pub fn sample_len(&self) -> usize {
        self.slots() * self.patch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// One normalized window: `slots × p` samples for every variate.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// First sample index in the family.
    pub start: usize,
    pub patch: usize,
    pub slots: usize,
    /// Indexed by variate id.
    pub data: Vec<Vec<f64>>,
}

impl Window {
    /// Patch at a 1-based slot.
    pub fn patch(&self, variate: usize, slot: usize) -> &[f64] {
        let p = self.patch;
        &self.data[variate][(slot - 1) * p..slot * p]
    }

    pub fn variates(&self) -> usize {
        self.data.len()
    }
}

/// Start offsets of all windows of length `len` inside `[lo, hi)`.
pub fn window_starts(lo: usize, hi: usize, len: usize, stride: usize) -> Vec<usize> {
    if hi < lo + len {
        return Vec::new();
    }
    (lo..=hi - len).step_by(stride).collect()
}

/// Cuts stride-spaced windows from one split, normalized with `stats`.
pub fn make_windows(
    family: &SeriesFamily,
    spec: &WindowSpec,
    stats: &NormStats,
    train_fraction: f64,
    split: Split,
) -> Result<Vec<Window>> {
    if spec.stride == 0 || spec.patch == 0 || spec.slots() == 0 {
        return Err(invalid("window stride, patch length and slot count must be positive"));
    }
    let t = family.len();
    let cut = train_len(t, train_fraction);
    let (lo, hi) = match split {
        Split::Train => (0, cut),
        Split::Validation => (cut, t),
    };
    let len = spec.sample_len();
    if len > hi - lo {
        return Err(Error::WindowTooLong {
            needed: len,
            available: hi - lo,
        });
    }
    let ids = family.m() + family.n();
    Ok(window_starts(lo, hi, len, spec.stride)
        .into_iter()
        .map(|start| Window {
            start,
            patch: spec.patch,
            slots: spec.slots(),
            data: (0..ids)
                .map(|id| {
                    family.variate(id)[start..start + len]
                        .iter()
                        .map(|&x| stats.normalize(id, x))
                        .collect()
                })
                .collect(),
        })
        .collect())
}
