//! Contrastive losses on deep-feature changes.
//!
//! Every loss is built from one per-stage aggregate: the weighted mean of the
//! squared cosine similarity (over channels) between two feature maps. The
//! weighting is the spatial L2 mask, uniform, or absent after spatial mean
//! pooling. Consistency sums the aggregates with a negative sign and
//! orthogonality with a positive sign.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentCodeExt, PcaBasis};
use crate::navigator::{apply, Freeze, Modification, NavigatorConfig, NavigatorParams, TapeNavigator};
use crate::tape::{cos2_aggregate_forward, pairwise_cos2_forward, Real, Tape, Var, Weighting};
use crate::toyworld::{FeatureStack, TapeWorld, ToyWorld};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    L2mask,
    Pooled,
    Nofoc,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Pooled, LossMode::Nofoc, LossMode::L2mask];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::L2mask => "l2mask",
            LossMode::Pooled => "pooled",
            LossMode::Nofoc => "nofoc",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2mask" => Ok(LossMode::L2mask),
            "pooled" => Ok(LossMode::Pooled),
            "nofoc" => Ok(LossMode::Nofoc),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Contrast two sampled codes.
    Bi,
    /// Contrast against learned prototype patterns.
    Pt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bi => "bi",
            Variant::Pt => "pt",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(Variant::Bi),
            "pt" => Ok(Variant::Pt),
            other => Err(Error::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub variant: Variant,
    /// Weight of the diversity term.
    pub lambda: f64,
    /// Guard for every norm division.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::L2mask,
            variant: Variant::Bi,
            lambda: 0.01,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Stage-wise feature difference caused by one modification.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureChange {
    pub stack: FeatureStack,
    pub direction: usize,
}

impl FeatureChange {
    pub fn num_stages(&self) -> usize {
        self.stack.num_stages()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.stack.maps.iter_mut().flatten().for_each(|v| *v *= c);
        out
    }
}

/// `(E o G)(w + mod) - (E o G)(w)`.
pub fn feature_change(w: &LatentCodeExt, m: &Modification, world: &ToyWorld) -> Result<FeatureChange> {
    let edited = apply(w, m)?;
    Ok(FeatureChange {
        stack: world.features_of(&edited).minus(&world.features_of(w)),
        direction: m.direction_index,
    })
}

/// A loss value and the stages on which it was degenerate (no position
/// carried weight); those stages contribute zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub degenerate_stages: Vec<usize>,
}

/// Per-stage aggregate in `[0, 1]`.
pub fn stage_similarity(x: &[f64], y: &[f64], channels: usize, mode: LossMode, eps: f64) -> (f64, bool) {
    let agg = match mode {
        LossMode::L2mask => cos2_aggregate_forward(x, y, channels, Weighting::L2Mask, eps),
        LossMode::Nofoc => cos2_aggregate_forward(x, y, channels, Weighting::Uniform, eps),
        LossMode::Pooled => {
            let px = pool(x, channels);
            let py = pool(y, channels);
            cos2_aggregate_forward(&px, &py, channels, Weighting::Uniform, eps)
        }
    };
    (agg.value, agg.degenerate)
}

fn pool(x: &[f64], c: usize) -> Vec<f64> {
    let rows = (x.len() / c) as f64;
    let mut out = vec![0.0; c];
    for row in x.chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= rows);
    out
}

fn summed_similarity(x: &FeatureStack, y: &FeatureStack, cfg: &LossConfig) -> Result<LossValue> {
    if x.shapes != y.shapes {
        return Err(Error::InvalidArgument("feature stacks differ in shape".into()));
    }
    let mut value = 0.0;
    let mut degenerate_stages = Vec::new();
    for (l, (a, b)) in x.maps.iter().zip(&y.maps).enumerate() {
        let (v, degenerate) = stage_similarity(a, b, x.shapes[l][2], cfg.mode, cfg.eps);
        value += v;
        if degenerate {
            degenerate_stages.push(l);
        }
    }
    Ok(LossValue {
        value,
        degenerate_stages,
    })
}

/// `-sum_l agg(Fx^l, Fy^l)`, in `[-L, 0]`.
pub fn masked_consistency(fx: &FeatureChange, fy: &FeatureChange, cfg: &LossConfig) -> Result<LossValue> {
    let mut v = summed_similarity(&fx.stack, &fy.stack, cfg)?;
    v.value = -v.value;
    Ok(v)
}

/// `sum_l agg(Fx^l, Fy^l)`, in `[0, L]`.
pub fn masked_orthogonality(fx: &FeatureChange, fy: &FeatureChange, cfg: &LossConfig) -> Result<LossValue> {
    summed_similarity(&fx.stack, &fy.stack, cfg)
}

/// Learned variation patterns, one `H x W x 3` pre-activation array per
/// direction, stored in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub m: usize,
    pub size: usize,
    pub patterns: Vec<f32>,
}

/// Standard deviation of the initial prototype entries.
pub const PROTOTYPE_INIT_STD: f64 = 0.1;

impl PrototypeBank {
    pub fn init<R: Rng>(m: usize, size: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, PROTOTYPE_INIT_STD).expect("valid std");
        PrototypeBank {
            m,
            size,
            patterns: (0..m * size * size * 3).map(|_| normal.sample(rng) as f32).collect(),
        }
    }

    pub fn zeros(m: usize, size: usize) -> Self {
        PrototypeBank {
            m,
            size,
            patterns: vec![0.0; m * size * size * 3],
        }
    }

    pub fn pattern_len(&self) -> usize {
        self.size * self.size * 3
    }

    pub fn pattern(&self, d: usize) -> &[f32] {
        &self.patterns[d * self.pattern_len()..(d + 1) * self.pattern_len()]
    }

    pub fn is_finite(&self) -> bool {
        self.patterns.iter().all(|v| v.is_finite())
    }
}

/// `E(tanh(P_d))`.
pub fn prototype_features(bank: &PrototypeBank, d: usize, world: &ToyWorld) -> Result<FeatureStack> {
    if d >= bank.m {
        return Err(Error::InvalidArgument(format!(
            "prototype index {d} out of range for {} patterns",
            bank.m
        )));
    }
    if bank.size != world.image_size() {
        return Err(Error::InvalidArgument(format!(
            "prototype size {} differs from image size {}",
            bank.size,
            world.image_size()
        )));
    }
    let img: Vec<f64> = bank.pattern(d).iter().map(|&v| (v as f64).tanh()).collect();
    Ok(world.extract_features(&img))
}

/// Consistency with the prototype features standing in for `Fy`.
pub fn pt_consistency(fx: &FeatureChange, proto: &FeatureStack, cfg: &LossConfig) -> Result<LossValue> {
    let mut v = summed_similarity(&fx.stack, proto, cfg)?;
    v.value = -v.value;
    Ok(v)
}

/// Mean over `d' != d` of the orthogonality against prototype `d'`.
pub fn pt_orthogonality(
    fx: &FeatureChange,
    bank: &PrototypeBank,
    d: usize,
    cfg: &LossConfig,
    world: &ToyWorld,
) -> Result<LossValue> {
    if bank.m < 2 {
        return Err(Error::InvalidArgument("prototype orthogonality needs at least 2 patterns".into()));
    }
    if d >= bank.m {
        return Err(Error::InvalidArgument(format!("direction {d} out of range")));
    }
    let mut value = 0.0;
    let mut degenerate_stages = Vec::new();
    for other in (0..bank.m).filter(|&o| o != d) {
        let proto = prototype_features(bank, other, world)?;
        let v = summed_similarity(&fx.stack, &proto, cfg)?;
        value += v.value;
        for s in v.degenerate_stages {
            if !degenerate_stages.contains(&s) {
                degenerate_stages.push(s);
            }
        }
    }
    degenerate_stages.sort_unstable();
    Ok(LossValue {
        value: value / (bank.m - 1) as f64,
        degenerate_stages,
    })
}

/// Sum over ordered pairs `i != j` of `cos^2(v_i, v_j)`.
pub fn diversity(directions: &[Vec<f64>]) -> Result<f64> {
    let m = directions.len();
    if m < 2 {
        return Err(Error::InvalidArgument("diversity needs at least 2 directions".into()));
    }
    let n = directions[0].len();
    if directions.iter().any(|d| d.len() != n) {
        return Err(Error::InvalidArgument("directions differ in length".into()));
    }
    let flat: Vec<f64> = directions.iter().flatten().copied().collect();
    Ok(pairwise_cos2_forward(&flat, m, n, 1e-12))
}

/// Codes and direction indices of one training step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub d: usize,
    /// Contrasting direction for the binary orthogonality term.
    pub d_other: usize,
    pub xs: Vec<LatentCodeExt>,
    /// Partner code of each `x`, used by the binary variant only.
    pub ys: Vec<LatentCodeExt>,
}

/// Parameter values at which a loss is evaluated, in 64-bit precision.
#[derive(Clone, Debug)]
pub struct ParamValues {
    pub m: usize,
    pub k: usize,
    pub k_layers: usize,
    pub v_sub: Vec<f64>,
    pub att_logits: Vec<f64>,
    /// `m` patterns of `size x size x 3`, when the prototype variant is used.
    pub prototypes: Option<Vec<f64>>,
}

impl ParamValues {
    pub fn new(params: &NavigatorParams, bank: Option<&PrototypeBank>) -> Self {
        let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
        ParamValues {
            m: params.m,
            k: params.k,
            k_layers: params.k_layers,
            v_sub: widen(&params.v_sub),
            att_logits: widen(&params.att_logits),
            prototypes: bank.map(|b| widen(&b.patterns)),
        }
    }
}

/// Options of the combined objective that are not loss hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub loss: LossConfig,
    pub navigator: NavigatorConfig,
    pub freeze: Freeze,
    pub strength: f64,
}

/// Loss terms averaged over the batch, with gradients laid out like the
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub cons: f64,
    pub orth: f64,
    pub div: f64,
    pub grad_v_sub: Vec<f64>,
    pub grad_att_logits: Vec<f64>,
    pub grad_prototypes: Option<Vec<f64>>,
}

fn tape_similarity<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, mode: LossMode, eps: T) -> Var {
    match mode {
        LossMode::L2mask => tape.cos2_aggregate(x, y, Weighting::L2Mask, eps),
        LossMode::Nofoc => tape.cos2_aggregate(x, y, Weighting::Uniform, eps),
        LossMode::Pooled => {
            let px = tape.mean_rows(x);
            let py = tape.mean_rows(y);
            tape.cos2_aggregate(px, py, Weighting::Uniform, eps)
        }
    }
}

fn tape_summed<T: Real>(tape: &mut Tape<T>, xs: &[Var], ys: &[Var], mode: LossMode, eps: T) -> Var {
    let parts: Vec<Var> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| tape_similarity(tape, x, y, mode, eps))
        .collect();
    let stacked = tape.stack(&parts);
    tape.sum(stacked)
}

fn tape_change<T: Real>(tape: &mut Tape<T>, tw: &TapeWorld<T>, base: &[Var], w: Var, delta: Var) -> Vec<Var> {
    let edited = tw.edit(tape, w, delta);
    let feats = tw.features(tape, edited);
    feats.iter().zip(base).map(|(&f, &b)| tape.sub(f, b)).collect()
}

fn mean_of<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Var {
    let stacked = tape.stack(parts);
    let s = tape.sum(stacked);
    tape.scale(s, T::one() / T::from_usize(parts.len()).unwrap())
}

/// The combined objective `consistency + orthogonality + lambda * diversity`
/// averaged over the batch, evaluated on a tape of scalar type `T`.
pub fn total_loss_at<T: Real>(
    batch: &Batch,
    values: &ParamValues,
    basis: &PcaBasis,
    objective: &Objective,
    world: &ToyWorld,
) -> Result<LossOutput> {
    let cfg = &objective.loss;
    if values.m < 2 {
        return Err(Error::Config("the orthogonality term needs at least 2 directions".into()));
    }
    if batch.xs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.d >= values.m || batch.d_other >= values.m {
        return Err(Error::InvalidArgument("direction index out of range".into()));
    }
    let eps = T::lit(cfg.eps);
    let strength = T::lit(objective.strength);
    let mut tape = Tape::<T>::new();
    let tw = world.on_tape(&mut tape);
    let mut nav = TapeNavigator::register_values(
        &mut tape,
        (values.m, values.k, values.k_layers),
        &values.v_sub,
        &values.att_logits,
        basis,
        &objective.navigator,
        objective.freeze,
    )?;

    let delta_d = nav.delta(&mut tape, batch.d, strength);
    let mut cons_terms = Vec::with_capacity(batch.xs.len());
    let mut orth_terms = Vec::with_capacity(batch.xs.len());
    let mut proto_vars = Vec::new();

    match cfg.variant {
        Variant::Bi => {
            if batch.ys.len() != batch.xs.len() {
                return Err(Error::InvalidArgument("binary variant needs one partner per code".into()));
            }
            if batch.d_other == batch.d {
                return Err(Error::InvalidArgument("contrasting direction equals d".into()));
            }
            let delta_o = nav.delta(&mut tape, batch.d_other, strength);
            for (x, y) in batch.xs.iter().zip(&batch.ys) {
                let wx = tw.code(&mut tape, x);
                let wy = tw.code(&mut tape, y);
                let fx0 = tw.features(&mut tape, wx);
                let fy0 = tw.features(&mut tape, wy);
                let fx = tape_change(&mut tape, &tw, &fx0, wx, delta_d);
                let fy = tape_change(&mut tape, &tw, &fy0, wy, delta_d);
                let fo = tape_change(&mut tape, &tw, &fy0, wy, delta_o);
                let c = tape_summed(&mut tape, &fx, &fy, cfg.mode, eps);
                cons_terms.push(tape.scale(c, -T::one()));
                orth_terms.push(tape_summed(&mut tape, &fx, &fo, cfg.mode, eps));
            }
        }
        Variant::Pt => {
            let patterns = values
                .prototypes
                .as_ref()
                .ok_or_else(|| Error::Config("prototype variant needs a prototype bank".into()))?;
            let size = world.image_size();
            let plen = size * size * 3;
            if patterns.len() != values.m * plen {
                return Err(Error::InvalidArgument("prototype bank does not match m and image size".into()));
            }
            let mut proto_feats = Vec::with_capacity(values.m);
            for chunk in patterns.chunks_exact(plen) {
                let p = tape.param(chunk.iter().map(|&v| T::lit(v)).collect(), &[size, size, 3]);
                proto_vars.push(p);
                let img = tape.tanh(p);
                proto_feats.push(tw.extract(&mut tape, img));
            }
            for x in &batch.xs {
                let wx = tw.code(&mut tape, x);
                let fx0 = tw.features(&mut tape, wx);
                let fx = tape_change(&mut tape, &tw, &fx0, wx, delta_d);
                let c = tape_summed(&mut tape, &fx, &proto_feats[batch.d], cfg.mode, eps);
                cons_terms.push(tape.scale(c, -T::one()));
                let others: Vec<Var> = (0..values.m)
                    .filter(|&o| o != batch.d)
                    .map(|o| tape_summed(&mut tape, &fx, &proto_feats[o], cfg.mode, eps))
                    .collect();
                orth_terms.push(mean_of(&mut tape, &others));
            }
        }
    }

    let cons = mean_of(&mut tape, &cons_terms);
    let orth = mean_of(&mut tape, &orth_terms);
    let dirs = nav.all_directions(&mut tape);
    let div = tape.pairwise_cos2(dirs, T::lit(1e-12));
    let weighted_div = tape.scale(div, T::lit(cfg.lambda));
    let contrast = tape.add(cons, orth);
    let total = tape.add(contrast, weighted_div);

    let grads = tape.backward(total);
    let (gv, gl) = nav.gradients(&tape, &grads);
    let widen = |v: Vec<T>| -> Vec<f64> { v.into_iter().map(Real::as_f64).collect() };
    let grad_prototypes = if proto_vars.is_empty() {
        None
    } else {
        Some(proto_vars.iter().flat_map(|&p| widen(grads.wrt(&tape, p))).collect())
    };
    Ok(LossOutput {
        total: tape.scalar(total).as_f64(),
        cons: tape.scalar(cons).as_f64(),
        orth: tape.scalar(orth).as_f64(),
        div: tape.scalar(div).as_f64(),
        grad_v_sub: widen(gv),
        grad_att_logits: widen(gl),
        grad_prototypes,
    })
}

/// [`total_loss_at`] on stored 32-bit parameters with a 32-bit tape.
pub fn total_loss(
    batch: &Batch,
    params: &NavigatorParams,
    bank: Option<&PrototypeBank>,
    basis: &PcaBasis,
    objective: &Objective,
    world: &ToyWorld,
) -> Result<LossOutput> {
    if objective.loss.variant == Variant::Pt && bank.is_none() {
        return Err(Error::Config("prototype variant needs a prototype bank".into()));
    }
    let bank = if objective.loss.variant == Variant::Pt { bank } else { None };
    total_loss_at::<f32>(batch, &ParamValues::new(params, bank), basis, objective, world)
}
