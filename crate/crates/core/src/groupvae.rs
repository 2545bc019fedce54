//! Paired-image datasets built from latent directions, and a group-based VAE
//! that averages the posteriors of a pair on every latent dimension except
//! the one tied to the varied direction.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{clip_global_norm, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::latent::LatentCodeExt;
use crate::navigator::{apply, Modification};
use crate::tape::{Real, Tape, Var};
use crate::toyworld::ToyWorld;

/// Two images whose latent codes differ by one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub image_a: Vec<f32>,
    pub image_b: Vec<f32>,
    pub varied: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub image_size: usize,
    /// Number of directions the pairs cycle through.
    pub directions: usize,
    pub samples: Vec<PairedSample>,
}

/// Box-filter downsampling of an HWC RGB image from `size` to `target`.
pub fn downsample(image: &[f64], size: usize, target: usize) -> Result<Vec<f64>> {
    if target == 0 || size % target != 0 || image.len() != size * size * 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample a {size}x{size} image ({} values) to {target}x{target}",
            image.len()
        )));
    }
    let f = size / target;
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; target * target * 3];
    for y in 0..size {
        for x in 0..size {
            let dst = ((y / f) * target + x / f) * 3;
            let src = (y * size + x) * 3;
            for c in 0..3 {
                out[dst + c] += image[src + c] * inv;
            }
        }
    }
    Ok(out)
}

/// Renders `w` at the world's resolution and downsamples it to `image_size`.
pub fn render_at(world: &ToyWorld, w: &LatentCodeExt, image_size: usize) -> Result<Vec<f64>> {
    downsample(&world.render(w), world.image_size(), image_size)
}

/// `count` code pairs `(w, w + strength * v_d, d)` with `d` cycling over the
/// directions and `w` drawn fresh per pair from layer-mixed codes.
pub fn pair_codes<R: Rng>(
    mods: &[Modification],
    world: &ToyWorld,
    count: usize,
    strength: f64,
    rng: &mut R,
) -> Result<Vec<(LatentCodeExt, LatentCodeExt, usize)>> {
    if mods.is_empty() {
        return Err(Error::InvalidArgument("no directions to build pairs from".into()));
    }
    (0..count)
        .map(|i| {
            let d = i % mods.len();
            let w = world.sample_mixed_code(rng);
            let moved = apply(&w, &mods[d].scaled(strength))?;
            Ok((w, moved, d))
        })
        .collect()
}

/// The images `(G(w), G(w + strength * v_d))` of [`pair_codes`].
pub fn build_pair_dataset<R: Rng>(
    mods: &[Modification],
    world: &ToyWorld,
    count: usize,
    strength: f64,
    image_size: usize,
    rng: &mut R,
) -> Result<PairDataset> {
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let samples = pair_codes(mods, world, count, strength, rng)?
        .into_iter()
        .map(|(w, moved, d)| {
            Ok(PairedSample {
                image_a: to_f32(render_at(world, &w, image_size)?),
                image_b: to_f32(render_at(world, &moved, image_size)?),
                varied: d,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairDataset {
        image_size,
        directions: mods.len(),
        samples,
    })
}

/// Diagonal Gaussian `q(z | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::InvalidArgument("mean and variance lengths differ".into()));
        }
        if variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("posterior needs finite means and positive variances".into()));
        }
        Ok(GaussianPosterior { mean, variance })
    }

    /// `KL(q || N(0, I))`.
    pub fn kl_to_prior(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| 0.5 * (v + m * m - 1.0 - v.ln()))
            .sum()
    }
}

/// On shared dimensions both posteriors become the arithmetic mean of the
/// two means and of the two variances; other dimensions pass through.
pub fn merge_posteriors(
    pa: &GaussianPosterior,
    pb: &GaussianPosterior,
    shared: &[bool],
) -> Result<(GaussianPosterior, GaussianPosterior)> {
    let q = pa.mean.len();
    if pb.mean.len() != q || shared.len() != q {
        return Err(Error::InvalidArgument(format!(
            "posterior dims {} and {} with a mask of {}",
            q,
            pb.mean.len(),
            shared.len()
        )));
    }
    let (mut a, mut b) = (pa.clone(), pb.clone());
    for j in (0..q).filter(|&j| shared[j]) {
        let m = 0.5 * (pa.mean[j] + pb.mean[j]);
        let v = 0.5 * (pa.variance[j] + pb.variance[j]);
        a.mean[j] = m;
        b.mean[j] = m;
        a.variance[j] = v;
        b.variance[j] = v;
    }
    Ok((a, b))
}

/// Shared-dimension mask for a pair varied along `varied`. The plain VAE
/// shares nothing.
pub fn shared_mask(latent_dim: usize, varied: usize, group: bool) -> Vec<bool> {
    (0..latent_dim).map(|j| group && j != varied).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSpec {
    pub latent_dim: usize,
    pub image_size: usize,
    pub channels: [usize; 3],
    /// Standard deviation of the Gaussian reconstruction likelihood.
    pub likelihood_scale: f64,
}

impl VaeSpec {
    pub fn new(latent_dim: usize, image_size: usize) -> Self {
        VaeSpec {
            latent_dim,
            image_size,
            channels: [16, 32, 64],
            likelihood_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "VAE image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if !(self.likelihood_scale > 0.0 && self.likelihood_scale.is_finite()) {
            return Err(Error::Config("likelihood_scale must be positive".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("VAE channels must be positive".into()));
        }
        Ok(())
    }

    fn bottleneck_side(&self) -> usize {
        self.image_size / 8
    }

    fn bottleneck(&self) -> usize {
        self.bottleneck_side() * self.bottleneck_side() * self.channels[2]
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2, c3] = self.channels;
        let (q, f) = (self.latent_dim, self.bottleneck());
        vec![
            ("enc1.w", vec![3, 3, 3, c1]),
            ("enc1.b", vec![c1]),
            ("enc2.w", vec![3, 3, c1, c2]),
            ("enc2.b", vec![c2]),
            ("enc3.w", vec![3, 3, c2, c3]),
            ("enc3.b", vec![c3]),
            ("mean.w", vec![q, f]),
            ("mean.b", vec![q]),
            ("logvar.w", vec![q, f]),
            ("logvar.b", vec![q]),
            ("dec_fc.w", vec![f, q]),
            ("dec_fc.b", vec![f]),
            ("dec1.w", vec![3, 3, c3, c2]),
            ("dec1.b", vec![c2]),
            ("dec2.w", vec![3, 3, c2, c1]),
            ("dec2.b", vec![c1]),
            ("dec3.w", vec![3, 3, c1, 3]),
            ("dec3.b", vec![3]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub spec: VaeSpec,
    /// One flat tensor per entry of [`VaeSpec::tensor_shapes`].
    pub tensors: Vec<Vec<f32>>,
}

impl VaeParams {
    /// Weights drawn from `N(0, 1 / fan_in)`, biases zero.
    pub fn init<R: Rng>(spec: &VaeSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let tensors = spec
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                if name.ends_with(".b") {
                    return vec![0.0; len];
                }
                // conv weights are [k, k, cin, cout], dense weights [out, in]
                let fan_in = if shape.len() == 4 { shape[0] * shape[1] * shape[2] } else { shape[1] };
                let std = 1.0 / (fan_in as f64).sqrt();
                (0..len)
                    .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            })
            .collect();
        Ok(VaeParams {
            spec: spec.clone(),
            tensors,
        })
    }

    pub fn from_tensors(spec: VaeSpec, tensors: Vec<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.tensor_shapes();
        if tensors.len() != shapes.len()
            || tensors
                .iter()
                .zip(&shapes)
                .any(|(t, (_, s))| t.len() != s.iter().product::<usize>())
        {
            return Err(Error::InvalidArgument("VAE tensors do not match the spec".into()));
        }
        Ok(VaeParams { spec, tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// VAE parameters registered on a tape.
pub struct TapeVae {
    spec: VaeSpec,
    vars: Vec<Var>,
}

impl TapeVae {
    pub fn register<T: Real>(params: &VaeParams, tape: &mut Tape<T>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .zip(params.spec.tensor_shapes())
            .map(|(t, (_, shape))| {
                let v: Vec<T> = t.iter().map(|&x| T::lit(x as f64)).collect();
                if trainable {
                    tape.param(v, &shape)
                } else {
                    tape.constant(v, &shape)
                }
            })
            .collect();
        TapeVae {
            spec: params.spec.clone(),
            vars,
        }
    }

    /// Same as [`TapeVae::register`] from f64 values, for gradient checks.
    pub fn register_values<T: Real>(spec: &VaeSpec, tensors: &[Vec<f64>], tape: &mut Tape<T>) -> Self {
        let vars = tensors
            .iter()
            .zip(spec.tensor_shapes())
            .map(|(t, (_, shape))| tape.param(t.iter().map(|&x| T::lit(x)).collect(), &shape))
            .collect();
        TapeVae {
            spec: spec.clone(),
            vars,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Posterior mean and log-variance of an `[s, s, 3]` image.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, image: Var) -> (Var, Var) {
        let v = &self.vars;
        let mut h = image;
        for s in 0..3 {
            h = tape.conv2d(h, v[2 * s], v[2 * s + 1], 2, 1);
            h = tape.silu(h);
        }
        let flat = tape.reshape(h, &[self.spec.bottleneck()]);
        let mean = tape.matvec(v[6], flat);
        let mean = tape.add(mean, v[7]);
        let logvar = tape.matvec(v[8], flat);
        let logvar = tape.add(logvar, v[9]);
        (mean, logvar)
    }

    /// Reconstruction `[s, s, 3]` of a latent sample.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Var {
        let v = &self.vars;
        let side = self.spec.bottleneck_side();
        let h = tape.matvec(v[10], z);
        let h = tape.add(h, v[11]);
        let mut h = tape.reshape(h, &[side, side, self.spec.channels[2]]);
        for s in 0..3 {
            h = tape.silu(h);
            h = tape.upsample2x(h);
            h = tape.conv2d(h, v[12 + 2 * s], v[13 + 2 * s], 1, 1);
        }
        h
    }
}

/// Per-image terms after posterior merging.
struct Encoded {
    mean: Var,
    var: Var,
}

fn kl_term<T: Real>(tape: &mut Tape<T>, e: &Encoded) -> Var {
    // 0.5 * sum(var + mean^2 - 1 - ln var)
    let m2 = tape.square(e.mean);
    let s = tape.add(e.var, m2);
    let lv = tape.ln(e.var);
    let s = tape.sub(s, lv);
    let s = tape.offset(s, -T::one());
    let s = tape.sum(s);
    tape.scale(s, T::lit(0.5))
}

fn recon_term<T: Real>(tape: &mut Tape<T>, vae: &TapeVae, e: &Encoded, image: Var, noise: &[f64]) -> Var {
    let q = vae.spec.latent_dim;
    let eps = tape.constant(noise.iter().map(|&x| T::lit(x)).collect(), &[q]);
    let sd = tape.sqrt(e.var);
    let jitter = tape.mul(sd, eps);
    let z = tape.add(e.mean, jitter);
    let recon = vae.decode(tape, z);
    let diff = tape.sub(recon, image);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    let sigma = vae.spec.likelihood_scale;
    tape.scale(s, T::lit(0.5 / (sigma * sigma)))
}

fn image_const<T: Real>(tape: &mut Tape<T>, image: &[f32], size: usize) -> Var {
    tape.constant(image.iter().map(|&x| T::lit(x as f64)).collect(), &[size, size, 3])
}

/// Negative ELBO of one pair (up to the likelihood constant): the
/// reconstructions of both images plus the KL of both merged posteriors.
pub fn group_elbo_on_tape<T: Real>(
    tape: &mut Tape<T>,
    vae: &TapeVae,
    pair: &PairedSample,
    shared: &[bool],
    noise_a: &[f64],
    noise_b: &[f64],
) -> Var {
    let size = vae.spec.image_size;
    let xa = image_const(tape, &pair.image_a, size);
    let xb = image_const(tape, &pair.image_b, size);
    let (ma, la) = vae.encode(tape, xa);
    let (mb, lb) = vae.encode(tape, xb);
    let va = tape.exp(la);
    let vb = tape.exp(lb);
    let (ea, eb) = if shared.iter().any(|&s| s) {
        let mask: Rc<Vec<T>> = Rc::new(shared.iter().map(|&s| if s { T::one() } else { T::zero() }).collect());
        let keep: Rc<Vec<T>> = Rc::new(shared.iter().map(|&s| if s { T::zero() } else { T::one() }).collect());
        let mut merge = |own: Var, other: Var| -> Var {
            let sum = tape.add(own, other);
            let avg = tape.scale(sum, T::lit(0.5));
            let avg = tape.mul_const(avg, Rc::clone(&mask));
            let kept = tape.mul_const(own, Rc::clone(&keep));
            tape.add(avg, kept)
        };
        (
            Encoded {
                mean: merge(ma, mb),
                var: merge(va, vb),
            },
            Encoded {
                mean: merge(mb, ma),
                var: merge(vb, va),
            },
        )
    } else {
        (Encoded { mean: ma, var: va }, Encoded { mean: mb, var: vb })
    };
    let ra = recon_term(tape, vae, &ea, xa, noise_a);
    let rb = recon_term(tape, vae, &eb, xb, noise_b);
    let ka = kl_term(tape, &ea);
    let kb = kl_term(tape, &eb);
    let r = tape.add(ra, rb);
    let k = tape.add(ka, kb);
    tape.add(r, k)
}

/// Negative ELBO of a single image.
pub fn plain_elbo_on_tape<T: Real>(tape: &mut Tape<T>, vae: &TapeVae, image: &[f32], noise: &[f64]) -> Var {
    let x = image_const(tape, image, vae.spec.image_size);
    let (mean, logvar) = vae.encode(tape, x);
    let var = tape.exp(logvar);
    let e = Encoded { mean, var };
    let r = recon_term(tape, vae, &e, x, noise);
    let k = kl_term(tape, &e);
    tape.add(r, k)
}

/// Loss of one pair and its gradient for every parameter tensor.
pub fn group_elbo<T: Real>(
    params: &VaeParams,
    pair: &PairedSample,
    shared: &[bool],
    noise_a: &[f64],
    noise_b: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let q = params.spec.latent_dim;
    if noise_a.len() != q || noise_b.len() != q || shared.len() != q {
        return Err(Error::InvalidArgument("noise or mask length differs from the latent size".into()));
    }
    let mut tape = Tape::<T>::new();
    let vae = TapeVae::register(params, &mut tape, true);
    let loss = group_elbo_on_tape(&mut tape, &vae, pair, shared, noise_a, noise_b);
    let value = tape.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite VAE loss for a pair varied along {}", pair.varied)));
    }
    let grads = tape.backward(loss);
    let g = vae
        .vars
        .iter()
        .map(|&v| grads.wrt(&tape, v).into_iter().map(|x| x.as_f64()).collect())
        .collect();
    Ok((value, g))
}

/// Posterior means of a batch of `[s, s, 3]` images.
pub fn encode_means(params: &VaeParams, images: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = params.spec.image_size;
    images
        .iter()
        .map(|img| {
            let mut tape = Tape::<f32>::new();
            let vae = TapeVae::register(params, &mut tape, false);
            let x = tape.constant(img.iter().map(|&v| v as f32).collect(), &[s, s, 3]);
            let (mean, _) = vae.encode(&mut tape, x);
            tape.value(mean).iter().map(|&v| v as f64).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    /// Average posteriors on shared dimensions; `false` trains a plain VAE on
    /// the same images.
    pub group: bool,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 10.0,
            group: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VaeRun {
    pub params: VaeParams,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Adam training on pairs drawn uniformly with replacement.
pub fn train_group_vae(dataset: &PairDataset, spec: &VaeSpec, cfg: &VaeTrainConfig) -> Result<VaeRun> {
    spec.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("empty pair dataset".into()));
    }
    if dataset.image_size != spec.image_size {
        return Err(Error::Config(format!(
            "dataset images are {} pixels but the VAE expects {}",
            dataset.image_size, spec.image_size
        )));
    }
    if cfg.group && spec.latent_dim < dataset.directions {
        return Err(Error::Config(format!(
            "latent_dim {} is smaller than the {} varied directions",
            spec.latent_dim, dataset.directions
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = VaeParams::init(spec, &mut rng)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    };
    let mut adams: Vec<Adam> = params.tensors.iter().map(|t| Adam::new(adam_cfg, t.len())).collect();
    let q = spec.latent_dim;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut acc: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = &dataset.samples[rng.gen_range(0..dataset.samples.len())];
            let noise_a: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
            let noise_b: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
            let shared = shared_mask(q, pair.varied, cfg.group);
            let (loss, grads) = group_elbo::<f32>(&params, pair, &shared, &noise_a, &noise_b)
                .map_err(|e| Error::Numerical(format!("VAE step {step}: {e}")))?;
            total += loss;
            for (a, g) in acc.iter_mut().zip(grads) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        acc.iter_mut().flatten().for_each(|g| *g *= inv);
        let mut groups: Vec<&mut Vec<f64>> = acc.iter_mut().collect();
        clip_global_norm(&mut groups, cfg.clip_norm);
        for ((t, g), adam) in params.tensors.iter_mut().zip(&acc).zip(&mut adams) {
            adam.step(t, g);
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("VAE parameters became non-finite at step {step}")));
        }
        losses.push(total * inv);
    }
    Ok(VaeRun { params, losses })
}

/// Encoder means and true factors of `count` fresh layer-mixed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    pub codes: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
}

pub fn code_table<R: Rng>(params: &VaeParams, world: &ToyWorld, count: usize, rng: &mut R) -> Result<CodeTable> {
    let mut images = Vec::with_capacity(count);
    let mut factors = Vec::with_capacity(count);
    for _ in 0..count {
        let w = world.sample_mixed_code(rng);
        images.push(render_at(world, &w, params.spec.image_size)?);
        factors.push(world.read_factors(&w));
    }
    Ok(CodeTable {
        codes: encode_means(params, &images),
        factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::ToyWorldSpec;

    fn small_world() -> ToyWorld {
        ToyWorld::new(ToyWorldSpec {
            image_size: 16,
            stages: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn merge_hand_case() {
        let a = GaussianPosterior::new(vec![0.0, 5.0], vec![1.0, 1.0]).unwrap();
        let b = GaussianPosterior::new(vec![2.0, -1.0], vec![3.0, 2.0]).unwrap();
        let (ma, mb) = merge_posteriors(&a, &b, &[true, false]).unwrap();
        assert_eq!((ma.mean[0], ma.variance[0]), (1.0, 2.0));
        assert_eq!((mb.mean[0], mb.variance[0]), (1.0, 2.0));
        assert_eq!((ma.mean[1], mb.mean[1]), (5.0, -1.0));
        assert_eq!((ma.variance[1], mb.variance[1]), (1.0, 2.0));
    }

    #[test]
    fn merge_identical_is_identity() {
        let a = GaussianPosterior::new(vec![0.3, -0.2], vec![0.5, 2.0]).unwrap();
        let (x, y) = merge_posteriors(&a, &a, &[true, true]).unwrap();
        assert_eq!(x, a);
        assert_eq!(y, a);
        assert!(merge_posteriors(&a, &a, &[true]).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(GaussianPosterior::new(vec![0.0; 3], vec![1.0; 3]).unwrap().kl_to_prior(), 0.0);
        let p = GaussianPosterior::new(vec![1.0], vec![1.0]).unwrap();
        assert!((p.kl_to_prior() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mask_leaves_varied_dimension() {
        assert_eq!(shared_mask(3, 1, true), vec![true, false, true]);
        assert_eq!(shared_mask(3, 1, false), vec![false; 3]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64).collect();
        let out = downsample(&img, 4, 2).unwrap();
        // top-left block: pixels (0,0),(0,1),(1,0),(1,1), red channel 0, 3, 12, 15
        assert_eq!(out[0], 7.5);
        assert!(downsample(&img, 4, 3).is_err());
    }

    #[test]
    fn dataset_cycles_directions_and_strength_zero_is_identity() {
        let world = small_world();
        let mods = world.oracle_modifications();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = build_pair_dataset(&mods, &world, 14, 0.0, 8, &mut rng).unwrap();
        let mut counts = vec![0; 6];
        for s in &ds.samples {
            counts[s.varied] += 1;
            assert_eq!(s.image_a, s.image_b);
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn group_elbo_of_identical_pair_is_twice_plain() {
        let world = small_world();
        let spec = VaeSpec::new(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = VaeParams::init(&spec, &mut rng).unwrap();
        let ds = build_pair_dataset(&world.oracle_modifications(), &world, 1, 0.0, 8, &mut rng).unwrap();
        let pair = &ds.samples[0];
        let noise: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let (group, _) = group_elbo::<f64>(&params, pair, &[true; 6], &noise, &noise).unwrap();
        let mut tape = Tape::<f64>::new();
        let vae = TapeVae::register(&params, &mut tape, false);
        let plain = plain_elbo_on_tape(&mut tape, &vae, &pair.image_a, &noise);
        assert!((group - 2.0 * tape.scalar(plain)).abs() < 1e-6);
    }

    #[test]
    fn prior_posterior_has_zero_kl_term() {
        // zero encoder heads give mean 0 and variance 1
        let spec = VaeSpec::new(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = VaeParams::init(&spec, &mut rng).unwrap();
        for i in 6..10 {
            params.tensors[i].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::<f64>::new();
        let vae = TapeVae::register(&params, &mut tape, false);
        let x = tape.constant(vec![0.1; 8 * 8 * 3], &[8, 8, 3]);
        let (mean, logvar) = vae.encode(&mut tape, x);
        let var = tape.exp(logvar);
        let kl = kl_term(&mut tape, &Encoded { mean, var });
        assert_eq!(tape.scalar(kl), 0.0);
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let world = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = build_pair_dataset(&world.oracle_modifications(), &world, 24, 1.0, 8, &mut rng).unwrap();
        let spec = VaeSpec::new(6, 8);
        let cfg = VaeTrainConfig {
            steps: 40,
            batch_size: 4,
            ..Default::default()
        };
        let a = train_group_vae(&ds, &spec, &cfg).unwrap();
        let b = train_group_vae(&ds, &spec, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses, b.losses);
        let head: f64 = a.losses[..10].iter().sum();
        let tail: f64 = a.losses[30..].iter().sum();
        assert!(tail < head, "loss did not fall: {head} -> {tail}");
    }
}
