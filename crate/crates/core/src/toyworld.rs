//! Self-contained differentiable generator with known factors: a linear
//! mapping network, a layered blob renderer and a frozen random conv
//! feature extractor.
//!
//! Six factors are read linearly from the extended code, two per layer.
//! Reads of one layer are orthonormal. The last layer reads the same plane of
//! the base space as the first layer, rotated by 45 degrees, so a direction in
//! that plane edits both layers unless attention separates them.

use std::f64::consts::FRAC_1_SQRT_2;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{broadcast, LatentCode0, LatentCodeExt};
use crate::navigator::Modification;
use crate::render::{render_forward, RenderParams, FACTOR_NAMES, NUM_FACTORS};
use crate::tape::{conv2d_forward, ConvGeometry, Real, Tape, Var};

pub const MAX_STAGES: usize = 3;
const STAGE_CHANNELS: [usize; MAX_STAGES + 1] = [3, 8, 16, 32];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Largest and smallest singular value of the mapping matrix.
pub const MAPPING_SPECTRUM: (f64, f64) = (3.0, 0.05);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorldSpec {
    pub seed: u64,
    pub z_dim: usize,
    pub n: usize,
    pub k_layers: usize,
    pub image_size: usize,
    /// Number of extractor stages used, 1 to 3.
    pub stages: usize,
    /// Extractor weight std is `gain / sqrt(fan_in)`.
    pub extractor_gain: f64,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        ToyWorldSpec {
            seed: 0,
            z_dim: 8,
            n: 16,
            k_layers: 3,
            image_size: 32,
            stages: 3,
            extractor_gain: 1.0,
        }
    }
}

impl ToyWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.z_dim < 8 || self.z_dim % 2 != 0 {
            return fail(format!("z_dim must be even and at least 8, got {}", self.z_dim));
        }
        if self.n < self.z_dim {
            return fail(format!("n ({}) must be at least z_dim ({})", self.n, self.z_dim));
        }
        if self.k_layers < 3 {
            return fail(format!("k_layers must be at least 3, got {}", self.k_layers));
        }
        if !(1..=MAX_STAGES).contains(&self.stages) {
            return fail(format!("stages must be in 1..={MAX_STAGES}, got {}", self.stages));
        }
        if self.image_size < 4 || self.image_size % (1 << self.stages) != 0 {
            return fail(format!(
                "image_size {} must be at least 4 and divisible by 2^stages",
                self.image_size
            ));
        }
        if !(self.extractor_gain > 0.0) {
            return fail("extractor_gain must be positive".into());
        }
        Ok(())
    }
}

/// One ground-truth factor: `value = read . w[layer]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorRead {
    pub name: &'static str,
    pub layer: usize,
    pub read: Vec<f64>,
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: Vec<f64>,
    bias: Vec<f64>,
    geom: ConvGeometry,
}

/// Per-stage `H x W x C` feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub shapes: Vec<[usize; 3]>,
    pub maps: Vec<Vec<f64>>,
}

impl FeatureStack {
    pub fn num_stages(&self) -> usize {
        self.maps.len()
    }

    /// Stage-wise `self - other`.
    pub fn minus(&self, other: &FeatureStack) -> FeatureStack {
        assert_eq!(self.shapes, other.shapes, "feature stacks differ in shape");
        FeatureStack {
            shapes: self.shapes.clone(),
            maps: self
                .maps
                .iter()
                .zip(&other.maps)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().flatten().all(|v| v.is_finite())
    }
}

/// Frozen toy generator and extractor.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    spec: ToyWorldSpec,
    /// `n x z_dim`, row-major.
    mapping: Vec<f64>,
    singular_values: Vec<f64>,
    factors: Vec<FactorRead>,
    render_params: Rc<RenderParams>,
    stages: Vec<ConvStage>,
}

fn orthonormal_columns<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix the sign ambiguity of QR so the result depends only on the draws.
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.columns(0, cols).into_owned()
}

/// Four orthonormal vectors of length `sv.len()` on whose span the form
/// `diag(sv^2)` equals `sv[h-1]^2 I` (`h` = half the length). Each mixes one
/// singular direction from the top half with one from the bottom half; the
/// pairing, signs and order are random.
fn balanced_reads<R: Rng>(rng: &mut R, sv: &[f64]) -> DMatrix<f64> {
    let dim = sv.len();
    let half = dim / 2;
    let target = sv[half - 1] * sv[half - 1];
    let mut low: Vec<usize> = (half..dim).collect();
    low.shuffle(rng);
    let mut high: Vec<usize> = (0..half).collect();
    high.shuffle(rng);
    let mut out = DMatrix::zeros(dim, 4);
    for (col, (&i, &j)) in high.iter().zip(&low).take(4).enumerate() {
        let (si, sj) = (sv[i] * sv[i], sv[j] * sv[j]);
        let c2 = (target - sj) / (si - sj);
        let sign = |rng: &mut R| if rng.gen::<bool>() { 1.0 } else { -1.0 };
        out[(i, col)] = sign(rng) * c2.sqrt();
        out[(j, col)] = sign(rng) * (1.0 - c2).sqrt();
    }
    out
}

impl ToyWorld {
    pub fn new(spec: ToyWorldSpec) -> Result<Self> {
        let render = RenderParams::new(spec.image_size);
        Self::with_render(spec, render)
    }

    /// Same world with non-default renderer constants.
    pub fn with_render(spec: ToyWorldSpec, render: RenderParams) -> Result<Self> {
        spec.validate()?;
        if render.image_size != spec.image_size {
            return Err(Error::Config(format!(
                "render image size {} differs from world image size {}",
                render.image_size, spec.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (n, zd) = (spec.n, spec.z_dim);

        let u = orthonormal_columns(&mut rng, n, zd);
        let v = orthonormal_columns(&mut rng, zd, zd);
        let (hi, lo) = MAPPING_SPECTRUM;
        let singular_values: Vec<f64> = (0..zd)
            .map(|j| hi * (lo / hi).powf(j as f64 / (zd - 1) as f64))
            .collect();
        let m = &u * DMatrix::from_diagonal(&DVector::from_vec(singular_values.clone())) * v.transpose();
        let mapping = (0..n).flat_map(|i| (0..zd).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();

        // Four orthonormal reads inside the column space of the mapping. All
        // six factors get the same variance and are uncorrelated within a layer.
        let r = balanced_reads(&mut rng, &singular_values);
        let reads = &u * r;
        let col = |j: usize| -> Vec<f64> { reads.column(j).iter().copied().collect() };
        let (a, b, c, d) = (col(0), col(1), col(2), col(3));
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) * FRAC_1_SQRT_2).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * FRAC_1_SQRT_2).collect();
        let last = spec.k_layers - 1;
        let mid = spec.k_layers / 2;
        let layout = [(0, a), (0, b), (mid, c), (mid, d), (last, sum), (last, diff)];
        let factors = layout
            .into_iter()
            .zip(FACTOR_NAMES)
            .map(|((layer, read), name)| FactorRead { name, layer, read })
            .collect();

        let mut ext_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_e57a_c7e5_0001);
        let mut stages = Vec::with_capacity(spec.stages);
        let mut size = spec.image_size;
        for s in 0..spec.stages {
            let (cin, cout) = (STAGE_CHANNELS[s], STAGE_CHANNELS[s + 1]);
            let std = spec.extractor_gain / ((KERNEL * KERNEL * cin) as f64).sqrt();
            let weight = (0..KERNEL * KERNEL * cin * cout)
                .map(|_| std * ext_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let geom = ConvGeometry {
                in_h: size,
                in_w: size,
                cin,
                cout,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            size = geom.out_h();
            stages.push(ConvStage {
                weight,
                bias: vec![0.0; cout],
                geom,
            });
        }

        Ok(ToyWorld {
            render_params: Rc::new(render),
            spec,
            mapping,
            singular_values,
            factors,
            stages,
        })
    }

    pub fn spec(&self) -> &ToyWorldSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn k_layers(&self) -> usize {
        self.spec.k_layers
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    pub fn num_factors(&self) -> usize {
        NUM_FACTORS
    }

    pub fn factors(&self) -> &[FactorRead] {
        &self.factors
    }

    pub fn render_params(&self) -> &Rc<RenderParams> {
        &self.render_params
    }

    /// Mapping matrix, `n x z_dim` row-major.
    pub fn mapping(&self) -> &[f64] {
        &self.mapping
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `w0 = M z`.
    pub fn map_latent(&self, z: &[f64]) -> Result<LatentCode0> {
        if z.len() != self.spec.z_dim {
            return Err(Error::InvalidArgument(format!(
                "z has length {}, expected {}",
                z.len(),
                self.spec.z_dim
            )));
        }
        let w = self
            .mapping
            .chunks_exact(self.spec.z_dim)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect();
        LatentCode0::new(w)
    }

    pub fn sample_w0<R: Rng>(&self, rng: &mut R) -> LatentCode0 {
        let z: Vec<f64> = (0..self.spec.z_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.map_latent(&z).expect("z has the configured length")
    }

    /// A base code broadcast to every layer.
    pub fn sample_code<R: Rng>(&self, rng: &mut R) -> LatentCodeExt {
        broadcast(&self.sample_w0(rng), self.spec.k_layers)
    }

    /// An extended code whose layers come from independent base codes, so
    /// that factors of different layers vary independently.
    pub fn sample_mixed_code<R: Rng>(&self, rng: &mut R) -> LatentCodeExt {
        let mut values = Vec::with_capacity(self.spec.k_layers * self.spec.n);
        for _ in 0..self.spec.k_layers {
            values.extend(self.sample_w0(rng).0);
        }
        LatentCodeExt::from_rows(self.spec.k_layers, self.spec.n, values).expect("shape is consistent")
    }

    fn check_code(&self, w: &LatentCodeExt) {
        assert_eq!(
            (w.layers(), w.dim()),
            (self.spec.k_layers, self.spec.n),
            "code shape does not match the world"
        );
    }

    pub fn read_factors(&self, w: &LatentCodeExt) -> Vec<f64> {
        self.check_code(w);
        self.factors
            .iter()
            .map(|f| f.read.iter().zip(w.row(f.layer)).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Factor reads as a `p x (k_layers * n)` row-major matrix acting on the
    /// flattened extended code.
    pub fn read_matrix(&self) -> Vec<f64> {
        let width = self.spec.k_layers * self.spec.n;
        let mut out = vec![0.0; NUM_FACTORS * width];
        for (i, f) in self.factors.iter().enumerate() {
            let start = i * width + f.layer * self.spec.n;
            out[start..start + self.spec.n].copy_from_slice(&f.read);
        }
        out
    }

    /// Returns a copy of `w` whose factor `i` equals `value`, all other
    /// factors unchanged.
    pub fn with_factor(&self, w: &LatentCodeExt, i: usize, value: f64) -> LatentCodeExt {
        let f = &self.factors[i];
        let current: f64 = f.read.iter().zip(w.row(f.layer)).map(|(a, b)| a * b).sum();
        let mut values = w.as_slice().to_vec();
        let start = f.layer * self.spec.n;
        for (v, a) in values[start..start + self.spec.n].iter_mut().zip(&f.read) {
            *v += (value - current) * a;
        }
        LatentCodeExt::from_rows(w.layers(), w.dim(), values).expect("shape is unchanged")
    }

    pub fn render_factors(&self, factors: &[f64]) -> Vec<f64> {
        render_forward(factors, &self.render_params)
    }

    /// HWC image in `(-1, 1)`.
    pub fn render(&self, w: &LatentCodeExt) -> Vec<f64> {
        self.render_factors(&self.read_factors(w))
    }

    pub fn feature_shapes(&self) -> Vec<[usize; 3]> {
        self.stages
            .iter()
            .map(|s| [s.geom.out_h(), s.geom.out_w(), s.geom.cout])
            .collect()
    }

    pub fn extract_features(&self, image: &[f64]) -> FeatureStack {
        let size = self.spec.image_size;
        assert_eq!(image.len(), size * size * 3, "image size does not match the world");
        let mut x = image.to_vec();
        let mut maps = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            x = conv2d_forward(&x, &s.weight, &s.bias, &s.geom);
            x.iter_mut().for_each(|v| *v = v.tanh());
            maps.push(x.clone());
        }
        FeatureStack {
            shapes: self.feature_shapes(),
            maps,
        }
    }

    pub fn features_of(&self, w: &LatentCodeExt) -> FeatureStack {
        self.extract_features(&self.render(w))
    }

    /// Ground-truth modification of every factor: its read placed in its own
    /// layer at unit strength.
    pub fn oracle_modifications(&self) -> Vec<Modification> {
        self.factors
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut m = Modification::zeros(self.spec.k_layers, self.spec.n, i);
                let start = f.layer * self.spec.n;
                m.delta[start..start + self.spec.n].copy_from_slice(&f.read);
                m
            })
            .collect()
    }

    /// Registers the frozen generator and extractor as constants on a tape.
    pub fn on_tape<T: Real>(&self, tape: &mut Tape<T>) -> TapeWorld<T> {
        let conv = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::lit(x)).collect() };
        let width = self.spec.k_layers * self.spec.n;
        let reads = tape.constant(conv(&self.read_matrix()), &[NUM_FACTORS, width]);
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let w = tape.constant(conv(&s.weight), &[KERNEL, KERNEL, s.geom.cin, s.geom.cout]);
                let b = tape.constant(conv(&s.bias), &[s.geom.cout]);
                (w, b)
            })
            .collect();
        TapeWorld {
            reads,
            stages,
            width,
            image_size: self.spec.image_size,
            render_params: Rc::clone(&self.render_params),
            _marker: std::marker::PhantomData,
        }
    }
}

/// Handles to a [`ToyWorld`] registered on one tape.
pub struct TapeWorld<T: Real> {
    reads: Var,
    stages: Vec<(Var, Var)>,
    width: usize,
    image_size: usize,
    render_params: Rc<RenderParams>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> TapeWorld<T> {
    /// A constant extended code, flattened to `[k_layers * n]`.
    pub fn code(&self, tape: &mut Tape<T>, w: &LatentCodeExt) -> Var {
        assert_eq!(w.as_slice().len(), self.width, "code shape does not match the world");
        tape.constant(w.as_slice().iter().map(|&x| T::lit(x)).collect(), &[self.width])
    }

    /// `w + delta` with `delta` shaped `[k_layers, n]`.
    pub fn edit(&self, tape: &mut Tape<T>, w: Var, delta: Var) -> Var {
        let flat = tape.reshape(delta, &[self.width]);
        tape.add(w, flat)
    }

    /// Flattened code to image.
    pub fn render(&self, tape: &mut Tape<T>, w: Var) -> Var {
        let f = tape.matvec(self.reads, w);
        tape.render(f, Rc::clone(&self.render_params))
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// HWC image to per-stage feature maps.
    pub fn extract(&self, tape: &mut Tape<T>, image: Var) -> Vec<Var> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for &(w, b) in &self.stages {
            let c = tape.conv2d(x, w, b, STRIDE, PAD);
            x = tape.tanh(c);
            out.push(x);
        }
        out
    }

    pub fn features(&self, tape: &mut Tape<T>, w: Var) -> Vec<Var> {
        let img = self.render(tape, w);
        self.extract(tape, img)
    }
}
