//! Learnable directions with per-direction layer attention.
//!
//! Direction `d` is `norm(V[:, :k] v_sub[d])` in the base space. Its layer
//! attention is `smooth(softmax(att_logits[d]))`. The latent modification is
//! the outer product of the two, scaled by the edit strength.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{project_direction, LatentCodeExt, PcaBasis};
use crate::tape::{Gradients, Real, Tape, Var};

/// Rows of `v_sub` shorter than this are re-drawn.
pub const MIN_ROW_NORM: f32 = 1e-8;

/// Trainable navigator state, stored row-major in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct NavigatorParams {
    pub m: usize,
    pub k: usize,
    pub k_layers: usize,
    /// `m x k` subspace coefficients.
    pub v_sub: Vec<f32>,
    /// `m x k_layers` attention logits.
    pub att_logits: Vec<f32>,
}

fn random_unit_row<R: Rng>(rng: &mut R, k: usize) -> Vec<f32> {
    loop {
        let row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return row.into_iter().map(|v| (v / norm) as f32).collect();
        }
    }
}

impl NavigatorParams {
    /// Unit-norm Gaussian coefficient rows and zero logits.
    pub fn init<R: Rng>(m: usize, k: usize, k_layers: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || k == 0 || k_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "navigator needs positive sizes (m={m}, k={k}, layers={k_layers})"
            )));
        }
        let mut v_sub = Vec::with_capacity(m * k);
        for _ in 0..m {
            v_sub.extend(random_unit_row(rng, k));
        }
        Ok(NavigatorParams {
            m,
            k,
            k_layers,
            v_sub,
            att_logits: vec![0.0; m * k_layers],
        })
    }

    /// Frozen directions given as explicit coefficient rows.
    pub fn from_rows(rows: &[Vec<f64>], k_layers: usize) -> Result<Self> {
        let m = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if m == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "direction rows must be non-empty and of equal length".into(),
            ));
        }
        let v_sub: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        if v_sub.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("direction rows contain non-finite values".into()));
        }
        for (d, row) in v_sub.chunks_exact(k).enumerate() {
            if row_norm(row) < MIN_ROW_NORM {
                return Err(Error::InvalidArgument(format!("direction row {d} is zero")));
            }
        }
        Ok(NavigatorParams {
            m,
            k,
            k_layers,
            v_sub,
            att_logits: vec![0.0; m * k_layers],
        })
    }

    /// The first `m` principal components, i.e. unit coefficient vectors.
    pub fn pca_top(m: usize, k: usize, k_layers: usize) -> Result<Self> {
        if m > k {
            return Err(Error::InvalidArgument(format!(
                "cannot take {m} principal directions from a {k}-dimensional subspace"
            )));
        }
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|d| (0..k).map(|j| if j == d { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(&rows, k_layers)
    }

    pub fn v_sub_row(&self, d: usize) -> &[f32] {
        &self.v_sub[d * self.k..(d + 1) * self.k]
    }

    pub fn logits_row(&self, d: usize) -> &[f32] {
        &self.att_logits[d * self.k_layers..(d + 1) * self.k_layers]
    }

    pub fn is_finite(&self) -> bool {
        self.v_sub.iter().chain(&self.att_logits).all(|v| v.is_finite())
    }

    /// Re-draws coefficient rows whose norm collapsed. Returns the indices of
    /// the rows that were replaced.
    pub fn clamp_rows<R: Rng>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut replaced = Vec::new();
        for d in 0..self.m {
            let row = &mut self.v_sub[d * self.k..(d + 1) * self.k];
            if row_norm(row) < MIN_ROW_NORM {
                row.copy_from_slice(&random_unit_row(rng, self.k));
                replaced.push(d);
            }
        }
        replaced
    }
}

fn row_norm(row: &[f32]) -> f32 {
    row.iter().map(|v| v * v).sum::<f32>().sqrt()
}

/// Hyper-parameters of the direction and attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavigatorConfig {
    /// Euclidean length of each base-space direction.
    pub length: f64,
    /// Width of the 3-tap Gaussian attention smoothing.
    pub sigma: f64,
}

impl Default for NavigatorConfig {
    fn default() -> Self {
        NavigatorConfig {
            length: 1.0,
            sigma: 1.0,
        }
    }
}

/// Normalized taps `(left, centre, right)` of the smoothing kernel.
pub fn smoothing_kernel(sigma: f64) -> [f64; 3] {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let total = 1.0 + 2.0 * side;
    [side / total, 1.0 / total, side / total]
}

/// Linear part of the smoothing as a `k_layers x k_layers` row-major matrix.
/// Rows at the boundaries use the truncated kernel rescaled to sum to one.
pub fn smoothing_matrix(k_layers: usize, sigma: f64) -> Vec<f64> {
    let taps = smoothing_kernel(sigma);
    let mut s = vec![0.0; k_layers * k_layers];
    for j in 0..k_layers {
        let mut row_total = 0.0;
        for (t, &w) in taps.iter().enumerate() {
            let src = j as isize + t as isize - 1;
            if src >= 0 && (src as usize) < k_layers {
                s[j * k_layers + src as usize] = w;
                row_total += w;
            }
        }
        for v in &mut s[j * k_layers..(j + 1) * k_layers] {
            *v /= row_total;
        }
    }
    s
}

/// Non-negative layer weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector(pub Vec<f64>);

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Smooths a probability vector over layers and renormalizes it.
pub fn smooth_probabilities(p: &[f64], sigma: f64) -> AttentionVector {
    let k = p.len();
    let s = smoothing_matrix(k, sigma);
    let q: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| s[j * k + i] * p[i]).sum())
        .collect();
    let total: f64 = q.iter().sum();
    AttentionVector(q.into_iter().map(|v| v / total).collect())
}

pub fn smooth_attention(logits: &[f64], sigma: f64) -> AttentionVector {
    smooth_probabilities(&softmax(logits), sigma)
}

/// A `k_layers x n` edit of an extended latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct Modification {
    pub k_layers: usize,
    pub n: usize,
    pub delta: Vec<f64>,
    pub direction_index: usize,
}

impl Modification {
    pub fn zeros(k_layers: usize, n: usize, direction_index: usize) -> Self {
        Modification {
            k_layers,
            n,
            delta: vec![0.0; k_layers * n],
            direction_index,
        }
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.delta[layer * self.n..(layer + 1) * self.n]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Modification {
            delta: self.delta.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Elementwise sum; keeps the index of `self`.
    pub fn plus(&self, other: &Modification) -> Result<Self> {
        if (self.k_layers, self.n) != (other.k_layers, other.n) {
            return Err(Error::InvalidArgument("modification shapes differ".into()));
        }
        Ok(Modification {
            delta: self.delta.iter().zip(&other.delta).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }
}

/// `delta[r, :] = strength * att[r] * v_dir`.
pub fn compose_modification(v_dir: &[f64], att: &AttentionVector, strength: f64, direction_index: usize) -> Modification {
    let mut delta = Vec::with_capacity(att.0.len() * v_dir.len());
    for &a in &att.0 {
        delta.extend(v_dir.iter().map(|&v| strength * a * v));
    }
    Modification {
        k_layers: att.0.len(),
        n: v_dir.len(),
        delta,
        direction_index,
    }
}

pub fn apply(w: &LatentCodeExt, m: &Modification) -> Result<LatentCodeExt> {
    if (w.layers(), w.dim()) != (m.k_layers, m.n) {
        return Err(Error::InvalidArgument(format!(
            "cannot apply a {}x{} modification to a {}x{} code",
            m.k_layers,
            m.n,
            w.layers(),
            w.dim()
        )));
    }
    let values = w.as_slice().iter().zip(&m.delta).map(|(a, b)| a + b).collect();
    LatentCodeExt::from_rows(w.layers(), w.dim(), values)
}

fn check_compatible(params: &NavigatorParams, basis: &PcaBasis) -> Result<()> {
    if params.k > basis.dim {
        return Err(Error::InvalidArgument(format!(
            "subspace size {} exceeds latent dimension {}",
            params.k, basis.dim
        )));
    }
    Ok(())
}

/// Base-space direction of every navigator row.
pub fn directions(params: &NavigatorParams, basis: &PcaBasis, length: f64) -> Result<Vec<Vec<f64>>> {
    check_compatible(params, basis)?;
    (0..params.m)
        .map(|d| {
            let c: Vec<f64> = params.v_sub_row(d).iter().map(|&v| v as f64).collect();
            project_direction(&c, basis, params.k, length)
        })
        .collect()
}

/// Smoothed attention of every navigator row.
pub fn attentions(params: &NavigatorParams, sigma: f64) -> Vec<AttentionVector> {
    (0..params.m)
        .map(|d| {
            let l: Vec<f64> = params.logits_row(d).iter().map(|&v| v as f64).collect();
            smooth_attention(&l, sigma)
        })
        .collect()
}

/// Uniform attention for every row, as used when attention is ablated.
pub fn uniform_attentions(params: &NavigatorParams) -> Vec<AttentionVector> {
    let u = 1.0 / params.k_layers as f64;
    vec![AttentionVector(vec![u; params.k_layers]); params.m]
}

/// The modification of every direction at the given strength.
pub fn modifications(
    params: &NavigatorParams,
    basis: &PcaBasis,
    cfg: &NavigatorConfig,
    strength: f64,
) -> Result<Vec<Modification>> {
    let dirs = directions(params, basis, cfg.length)?;
    let atts = attentions(params, cfg.sigma);
    Ok(dirs
        .iter()
        .zip(&atts)
        .enumerate()
        .map(|(d, (v, a))| compose_modification(v, a, strength, d))
        .collect())
}

/// Navigator parameters registered on a tape. Rows are separate leaves so
/// gradients can be read back per direction.
pub struct TapeNavigator<T: Real> {
    basis_k: Var,
    smoothing: Var,
    v_sub: Vec<Var>,
    logits: Vec<Var>,
    dirs: Vec<Option<Var>>,
    atts: Vec<Option<Var>>,
    length: T,
    k_layers: usize,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub directions: bool,
    pub attention: bool,
}

impl<T: Real> TapeNavigator<T> {
    pub fn register(
        tape: &mut Tape<T>,
        params: &NavigatorParams,
        basis: &PcaBasis,
        cfg: &NavigatorConfig,
        freeze: Freeze,
    ) -> Result<Self> {
        let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
        Self::register_values(
            tape,
            (params.m, params.k, params.k_layers),
            &widen(&params.v_sub),
            &widen(&params.att_logits),
            basis,
            cfg,
            freeze,
        )
    }

    /// Registers parameters given in 64-bit precision; `dims` is
    /// `(m, k, k_layers)`.
    pub fn register_values(
        tape: &mut Tape<T>,
        dims: (usize, usize, usize),
        v_sub: &[f64],
        att_logits: &[f64],
        basis: &PcaBasis,
        cfg: &NavigatorConfig,
        freeze: Freeze,
    ) -> Result<Self> {
        let (m, k, k_layers) = dims;
        if k > basis.dim {
            return Err(Error::InvalidArgument(format!(
                "subspace size {k} exceeds latent dimension {}",
                basis.dim
            )));
        }
        assert_eq!(v_sub.len(), m * k, "v_sub size");
        assert_eq!(att_logits.len(), m * k_layers, "att_logits size");
        let n = basis.dim;
        let top: Vec<T> = basis.top_k(k).into_iter().map(T::lit).collect();
        let basis_k = tape.constant(top, &[n, k]);
        let s: Vec<T> = smoothing_matrix(k_layers, cfg.sigma).into_iter().map(T::lit).collect();
        let smoothing = tape.constant(s, &[k_layers, k_layers]);
        let leaf = |tape: &mut Tape<T>, row: &[f64], frozen: bool| {
            let v: Vec<T> = row.iter().map(|&x| T::lit(x)).collect();
            let shape = [v.len()];
            if frozen {
                tape.constant(v, &shape)
            } else {
                tape.param(v, &shape)
            }
        };
        let v_sub = v_sub.chunks_exact(k).map(|r| leaf(tape, r, freeze.directions)).collect();
        let logits = att_logits
            .chunks_exact(k_layers)
            .map(|r| leaf(tape, r, freeze.attention))
            .collect();
        Ok(TapeNavigator {
            basis_k,
            smoothing,
            v_sub,
            logits,
            dirs: vec![None; m],
            atts: vec![None; m],
            length: T::lit(cfg.length),
            k_layers,
        })
    }

    pub fn m(&self) -> usize {
        self.v_sub.len()
    }

    /// Base-space direction `d`, shape `[n]`.
    pub fn direction(&mut self, tape: &mut Tape<T>, d: usize) -> Var {
        if let Some(v) = self.dirs[d] {
            return v;
        }
        let raw = tape.matvec(self.basis_k, self.v_sub[d]);
        let v = tape.normalize(raw, self.length);
        self.dirs[d] = Some(v);
        v
    }

    /// Smoothed attention of direction `d`, shape `[k_layers]`.
    pub fn attention(&mut self, tape: &mut Tape<T>, d: usize) -> Var {
        if let Some(a) = self.atts[d] {
            return a;
        }
        let p = tape.softmax(self.logits[d]);
        let q = tape.matvec(self.smoothing, p);
        let a = tape.div_by_sum(q);
        self.atts[d] = Some(a);
        a
    }

    /// Modification of direction `d`, shape `[k_layers, n]`.
    pub fn delta(&mut self, tape: &mut Tape<T>, d: usize, strength: T) -> Var {
        let att = self.attention(tape, d);
        let dir = self.direction(tape, d);
        let outer = tape.outer(att, dir);
        if strength == T::one() {
            outer
        } else {
            tape.scale(outer, strength)
        }
    }

    /// All directions stacked into `[m, n]`.
    pub fn all_directions(&mut self, tape: &mut Tape<T>) -> Var {
        let dirs: Vec<Var> = (0..self.m()).map(|d| self.direction(tape, d)).collect();
        tape.stack(&dirs)
    }

    pub fn k_layers(&self) -> usize {
        self.k_layers
    }

    /// Gradients of `v_sub` and `att_logits`, laid out like the parameters.
    pub fn gradients(&self, tape: &Tape<T>, grads: &Gradients<T>) -> (Vec<T>, Vec<T>) {
        let collect = |vars: &[Var]| -> Vec<T> { vars.iter().flat_map(|&v| grads.wrt(tape, v)).collect() };
        (collect(&self.v_sub), collect(&self.logits))
    }
}
