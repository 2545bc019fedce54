//! Discovery metrics on the attribute-change matrix, plus MIG and the
//! FactorVAE vote metric for learned representations.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentCodeExt;
use crate::navigator::{apply, Modification};
use crate::toyworld::ToyWorld;

/// Rows whose largest raw entry is below this are dead.
pub const EPS_ROW: f64 = 1e-8;
/// Tolerance of the "row contains a 1" test.
pub const EPS_TIE: f64 = 1e-6;

/// Mean absolute factor change per direction, and its row-normalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeChangeMatrix {
    pub m: usize,
    pub p: usize,
    pub a: Vec<f64>,
    pub a_raw: Vec<f64>,
    pub dead_rows: Vec<usize>,
    pub sample_count: usize,
}

impl AttributeChangeMatrix {
    /// Row-normalizes a raw `m x p` matrix.
    pub fn from_raw(m: usize, p: usize, a_raw: Vec<f64>, sample_count: usize) -> Result<Self> {
        if a_raw.len() != m * p || m == 0 || p == 0 {
            return Err(Error::InvalidArgument(format!(
                "attribute matrix of {m}x{p} given {} values",
                a_raw.len()
            )));
        }
        if a_raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("attribute changes must be finite and non-negative".into()));
        }
        let mut a = vec![0.0; m * p];
        let mut dead_rows = Vec::new();
        for d in 0..m {
            let row = &a_raw[d * p..(d + 1) * p];
            let max = row.iter().copied().fold(0.0, f64::max);
            if max < EPS_ROW {
                dead_rows.push(d);
                continue;
            }
            for (o, &v) in a[d * p..(d + 1) * p].iter_mut().zip(row) {
                *o = v / max;
            }
        }
        Ok(AttributeChangeMatrix {
            m,
            p,
            a,
            a_raw,
            dead_rows,
            sample_count,
        })
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.a[d * self.p..(d + 1) * self.p]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|d| self.row(d).to_vec()).collect()
    }

    fn live_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.m).filter(|d| !self.dead_rows.contains(d))
    }
}

/// Mean absolute change of every oracle factor over `n` sampled codes, for
/// each modification scaled by `strength`.
pub fn attribute_change_matrix<R: Rng>(
    mods: &[Modification],
    world: &ToyWorld,
    n: usize,
    strength: f64,
    rng: &mut R,
) -> Result<AttributeChangeMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("attribute matrix needs at least one sample".into()));
    }
    if mods.is_empty() {
        return Err(Error::InvalidArgument("no directions to evaluate".into()));
    }
    let p = world.num_factors();
    let codes: Vec<LatentCodeExt> = (0..n).map(|_| world.sample_code(rng)).collect();
    let mut raw = vec![0.0; mods.len() * p];
    for (d, m) in mods.iter().enumerate() {
        let scaled = m.scaled(strength);
        for w in &codes {
            let before = world.read_factors(w);
            let after = world.read_factors(&apply(w, &scaled)?);
            for j in 0..p {
                raw[d * p + j] += (after[j] - before[j]).abs();
            }
        }
    }
    raw.iter_mut().for_each(|v| *v /= n as f64);
    AttributeChangeMatrix::from_raw(mods.len(), p, raw, n)
}

/// Mean over live rows of the gap between the largest and second-largest
/// entry.
pub fn s_disen(a: &AttributeChangeMatrix) -> Result<f64> {
    if a.p < 2 {
        return Err(Error::InvalidArgument("S_disen needs at least two attributes".into()));
    }
    let mut total = 0.0;
    let mut live = 0;
    for d in a.live_rows() {
        let mut row = a.row(d).to_vec();
        row.sort_by(|x, y| y.partial_cmp(x).expect("finite entries"));
        total += row[0] - row[1];
        live += 1;
    }
    if live == 0 {
        return Err(Error::Numerical("every row of the attribute matrix is dead".into()));
    }
    Ok(total / live as f64)
}

/// Number of attributes that reach a row maximum.
pub fn n_discov(a: &AttributeChangeMatrix) -> usize {
    (0..a.p)
        .filter(|&j| a.live_rows().any(|d| a.row(d)[j] >= 1.0 - EPS_TIE))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "S_disen")]
    pub s_disen: f64,
    #[serde(rename = "N_discov")]
    pub n_discov: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub dead_rows: Vec<usize>,
}

impl MetricsReport {
    pub fn from_matrix(a: &AttributeChangeMatrix) -> Result<Self> {
        Ok(MetricsReport {
            s_disen: s_disen(a)?,
            n_discov: n_discov(a),
            a: a.rows(),
            dead_rows: a.dead_rows.clone(),
        })
    }
}

/// Equal-width histogram bin of every entry of a column.
fn discretize(column: &[f64], bins: usize) -> Vec<usize> {
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    column
        .iter()
        .map(|&x| {
            if width > 0.0 {
                (((x - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

fn entropy(labels: &[usize], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    labels.iter().for_each(|&l| counts[l] += 1);
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(a: &[usize], b: &[usize], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut ca = vec![0usize; bins];
    let mut cb = vec![0usize; bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * bins + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..bins {
        for y in 0..bins {
            let c = joint[x * bins + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigReport {
    pub mig: f64,
    /// Normalized gap per factor; `None` for excluded constant factors.
    pub per_factor: Vec<Option<f64>>,
}

/// Mutual information gap with histogram-binned estimates. `codes` and
/// `factors` hold one row per sample.
pub fn mig(codes: &[Vec<f64>], factors: &[Vec<f64>], bins: usize) -> Result<MigReport> {
    if codes.is_empty() || codes.len() != factors.len() {
        return Err(Error::InvalidArgument("codes and factors must have the same non-zero row count".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument("MIG needs at least 2 bins".into()));
    }
    let q = codes[0].len();
    let p = factors[0].len();
    if q == 0 || p == 0 || codes.iter().any(|r| r.len() != q) || factors.iter().any(|r| r.len() != p) {
        return Err(Error::InvalidArgument("ragged code or factor rows".into()));
    }
    let column = |rows: &[Vec<f64>], j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let code_bins: Vec<Vec<usize>> = (0..q).map(|j| discretize(&column(codes, j), bins)).collect();
    let mut per_factor = Vec::with_capacity(p);
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..p {
        let f = discretize(&column(factors, i), bins);
        let h = entropy(&f, bins);
        if h <= 0.0 {
            warn!("factor {i} is constant and is excluded from MIG");
            per_factor.push(None);
            continue;
        }
        let mut mis: Vec<f64> = code_bins.iter().map(|c| mutual_information(c, &f, bins)).collect();
        mis.sort_by(|a, b| b.partial_cmp(a).expect("finite information"));
        let second = mis.get(1).copied().unwrap_or(0.0);
        let gap = (mis[0] - second) / h;
        total += gap;
        counted += 1;
        per_factor.push(Some(gap));
    }
    if counted == 0 {
        return Err(Error::Numerical("every factor is constant".into()));
    }
    Ok(MigReport {
        mig: total / counted as f64,
        per_factor,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvmConfig {
    pub train_votes: usize,
    pub eval_votes: usize,
    pub batch: usize,
    /// Samples used to estimate the per-dimension scale.
    pub global_samples: usize,
}

impl Default for FvmConfig {
    fn default() -> Self {
        FvmConfig {
            train_votes: 500,
            eval_votes: 500,
            batch: 64,
            global_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvmReport {
    pub accuracy: f64,
    pub active_dims: Vec<usize>,
}

/// Majority-vote accuracy of predicting the fixed factor from the code
/// dimension of least normalized variance. Codes are drawn from
/// layer-mixed samples so that factors vary independently.
pub fn fvm<R: Rng>(
    encode: &mut dyn FnMut(&[LatentCodeExt]) -> Vec<Vec<f64>>,
    world: &ToyWorld,
    cfg: &FvmConfig,
    rng: &mut R,
) -> Result<FvmReport> {
    if cfg.batch < 2 || cfg.train_votes == 0 || cfg.eval_votes == 0 || cfg.global_samples < 2 {
        return Err(Error::InvalidArgument("FVM sizes too small".into()));
    }
    let p = world.num_factors();
    let global_codes: Vec<LatentCodeExt> = (0..cfg.global_samples).map(|_| world.sample_mixed_code(rng)).collect();
    let global = encode(&global_codes);
    let q = global[0].len();
    let std: Vec<f64> = (0..q)
        .map(|j| {
            let col: Vec<f64> = global.iter().map(|r| r[j]).collect();
            variance(&col).sqrt()
        })
        .collect();
    let active_dims: Vec<usize> = (0..q).filter(|&j| std[j] > 1e-8).collect();
    if active_dims.is_empty() {
        return Err(Error::Numerical("every code dimension is constant".into()));
    }

    let mut vote = |rng: &mut R| -> (usize, usize) {
        let factor = rng.gen_range(0..p);
        let anchor = world.read_factors(&world.sample_mixed_code(rng))[factor];
        let batch: Vec<LatentCodeExt> = (0..cfg.batch)
            .map(|_| world.with_factor(&world.sample_mixed_code(rng), factor, anchor))
            .collect();
        let codes = encode(&batch);
        let mut best = active_dims[0];
        let mut best_var = f64::INFINITY;
        for &j in &active_dims {
            let col: Vec<f64> = codes.iter().map(|r| r[j] / std[j]).collect();
            let v = variance(&col);
            if v < best_var {
                best_var = v;
                best = j;
            }
        }
        (best, factor)
    };

    let mut table = vec![0usize; q * p];
    for _ in 0..cfg.train_votes {
        let (dim, factor) = vote(rng);
        table[dim * p + factor] += 1;
    }
    let classifier: Vec<usize> = (0..q)
        .map(|j| {
            let row = &table[j * p..(j + 1) * p];
            let mut best = 0;
            for f in 1..p {
                if row[f] > row[best] {
                    best = f;
                }
            }
            best
        })
        .collect();
    let mut correct = 0;
    for _ in 0..cfg.eval_votes {
        let (dim, factor) = vote(rng);
        if classifier[dim] == factor {
            correct += 1;
        }
    }
    Ok(FvmReport {
        accuracy: correct as f64 / cfg.eval_votes as f64,
        active_dims,
    })
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}
