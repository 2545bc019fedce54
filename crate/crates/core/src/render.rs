//! Procedural blob renderer used as the toy synthesis network.
//!
//! The image is a Gaussian blob composited over a flat background whose
//! brightness factor is a gain on its colour. The blob
//! carries a stripe texture anchored at its centre: luminance stripes along x
//! and chroma stripes along y, so horizontal and vertical moves change
//! different colour channels. The image depends on the latent code only
//! through six factor reads, in this order: blob centre x, blob centre y,
//! blob radius, blob hue, background hue, background brightness.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub const NUM_FACTORS: usize = 6;

pub const FACTOR_NAMES: [&str; NUM_FACTORS] = [
    "pos_x",
    "pos_y",
    "radius",
    "blob_hue",
    "bg_hue",
    "bg_brightness",
];

/// Colour of the x stripes (luminance).
const STRIPE_X: [f64; 3] = [0.577_350_269_189_625_8; 3];
/// Colour of the y stripes (chroma, orthogonal to luminance and to the blob
/// hue derivative at zero hue).
const STRIPE_Y: [f64; 3] = [
    0.816_496_580_927_726,
    -0.408_248_290_463_863,
    -0.408_248_290_463_863,
];

/// Shape constants of the renderer. Squashing scales divide the raw factor
/// before the `tanh` that bounds each geometric quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub image_size: usize,
    pub center_range: f64,
    pub center_scale: f64,
    pub radius_base: f64,
    pub radius_range: f64,
    pub radius_scale: f64,
    pub blob_saturation: f64,
    pub blob_luminance: f64,
    pub bg_saturation: f64,
    pub bg_luminance: f64,
    /// Largest relative change of the background gain; below 1.
    pub brightness_range: f64,
    pub brightness_scale: f64,
    /// Radians of hue per unit factor.
    pub hue_rate: f64,
    /// Hue of the blob and of the background at a zero factor.
    pub blob_hue_offset: f64,
    pub bg_hue_offset: f64,
    pub stripe_amplitude: f64,
    /// Radians of stripe phase per unit of image coordinate (image spans [-1, 1]).
    pub stripe_frequency: f64,
}

impl RenderParams {
    pub fn new(image_size: usize) -> Self {
        RenderParams {
            image_size,
            center_range: 0.1,
            center_scale: 0.5,
            radius_base: 0.45,
            radius_range: 0.15,
            radius_scale: 0.4,
            blob_saturation: 0.4,
            blob_luminance: 0.5,
            bg_saturation: 0.4,
            bg_luminance: 0.1,
            brightness_range: 0.5,
            brightness_scale: 0.4,
            hue_rate: 0.5,
            blob_hue_offset: 0.0,
            bg_hue_offset: 0.5 * PI,
            stripe_amplitude: 0.5,
            stripe_frequency: 6.0,
        }
    }
}

fn hue_color(h: f64) -> [f64; 3] {
    [h.cos(), (h - 2.0 * PI / 3.0).cos(), (h + 2.0 * PI / 3.0).cos()]
}

fn hue_color_deriv(h: f64) -> [f64; 3] {
    [-h.sin(), -(h - 2.0 * PI / 3.0).sin(), -(h + 2.0 * PI / 3.0).sin()]
}

struct Scene {
    cx: f64,
    cy: f64,
    r: f64,
    blob: [f64; 3],
    bg: [f64; 3],
    /// Background colour at unit gain.
    bg_unit: [f64; 3],
    // derivatives of the scene quantities w.r.t. their factor
    dcx: f64,
    dcy: f64,
    dr: f64,
    dblob: [f64; 3],
    dbg_hue: [f64; 3],
    dbright: f64,
}

fn scene(f: &[f64], p: &RenderParams) -> Scene {
    assert_eq!(f.len(), NUM_FACTORS, "renderer expects {NUM_FACTORS} factors");
    let squash = |x: f64, range: f64, scale: f64| {
        let t = (x / scale).tanh();
        (range * t, range * (1.0 - t * t) / scale)
    };
    let (cx, dcx) = squash(f[0], p.center_range, p.center_scale);
    let (cy, dcy) = squash(f[1], p.center_range, p.center_scale);
    let (rr, dr) = squash(f[2], p.radius_range, p.radius_scale);
    let (bright, dbright) = squash(f[5], p.brightness_range, p.brightness_scale);
    let (h_blob, h_bg) = (
        p.blob_hue_offset + p.hue_rate * f[3],
        p.bg_hue_offset + p.hue_rate * f[4],
    );
    let (hb, hbd) = (hue_color(h_blob), hue_color_deriv(h_blob));
    let (hg, hgd) = (hue_color(h_bg), hue_color_deriv(h_bg));
    let mut blob = [0.0; 3];
    let mut bg = [0.0; 3];
    let mut bg_unit = [0.0; 3];
    let mut dblob = [0.0; 3];
    let mut dbg_hue = [0.0; 3];
    for c in 0..3 {
        blob[c] = p.blob_saturation * hb[c] + p.blob_luminance;
        bg_unit[c] = p.bg_luminance + p.bg_saturation * hg[c];
        bg[c] = (1.0 + bright) * bg_unit[c];
        dblob[c] = p.blob_saturation * p.hue_rate * hbd[c];
        dbg_hue[c] = (1.0 + bright) * p.bg_saturation * p.hue_rate * hgd[c];
    }
    Scene {
        cx,
        cy,
        r: p.radius_base + rr,
        blob,
        bg,
        bg_unit,
        dcx,
        dcy,
        dr,
        dblob,
        dbg_hue,
        dbright,
    }
}

fn pixel_center(i: usize, size: usize) -> f64 {
    (i as f64 + 0.5) / size as f64 * 2.0 - 1.0
}

/// Per-pixel geometry shared by the forward and backward passes.
struct Pixel {
    alpha: f64,
    /// Textured blob colour at this pixel.
    color: [f64; 3],
    /// Derivative of `color` w.r.t. the blob centre x and y.
    dcolor_x: [f64; 3],
    dcolor_y: [f64; 3],
}

fn pixel(s: &Scene, p: &RenderParams, dx: f64, dy: f64) -> Pixel {
    let alpha = (-(dx * dx + dy * dy) / (2.0 * s.r * s.r)).exp();
    let (w, a) = (p.stripe_frequency, p.stripe_amplitude);
    let (sx, cx) = (w * dx).sin_cos();
    let (sy, cy) = (w * dy).sin_cos();
    let mut px = Pixel {
        alpha,
        color: [0.0; 3],
        dcolor_x: [0.0; 3],
        dcolor_y: [0.0; 3],
    };
    for c in 0..3 {
        px.color[c] = s.blob[c] + a * (cx * STRIPE_X[c] + cy * STRIPE_Y[c]);
        // dx = x - centre, so d/d(centre) flips the sign of d/dx
        px.dcolor_x[c] = a * w * sx * STRIPE_X[c];
        px.dcolor_y[c] = a * w * sy * STRIPE_Y[c];
    }
    px
}

/// Renders factors into an HWC image with values in (-1, 1).
pub fn render_forward(f: &[f64], p: &RenderParams) -> Vec<f64> {
    let s = scene(f, p);
    let n = p.image_size;
    let mut out = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        let dy = pixel_center(y, n) - s.cy;
        for x in 0..n {
            let dx = pixel_center(x, n) - s.cx;
            let px = pixel(&s, p, dx, dy);
            for c in 0..3 {
                out.push((px.alpha * px.color[c] + (1.0 - px.alpha) * s.bg[c]).tanh());
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`render_forward`]: gradient w.r.t. the factors
/// given the upstream image gradient.
pub fn render_backward(f: &[f64], p: &RenderParams, g: &[f64]) -> [f64; NUM_FACTORS] {
    let s = scene(f, p);
    let n = p.image_size;
    let r2 = s.r * s.r;
    let (mut gcx, mut gcy, mut gr) = (0.0, 0.0, 0.0);
    let (mut ghb, mut ghg, mut gbr) = (0.0, 0.0, 0.0);
    for y in 0..n {
        let dy = pixel_center(y, n) - s.cy;
        for x in 0..n {
            let dx = pixel_center(x, n) - s.cx;
            let px = pixel(&s, p, dx, dy);
            let alpha = px.alpha;
            let base = (y * n + x) * 3;
            let mut galpha = 0.0;
            for c in 0..3 {
                let v = alpha * px.color[c] + (1.0 - alpha) * s.bg[c];
                let t = v.tanh();
                let gv = g[base + c] * (1.0 - t * t);
                galpha += gv * (px.color[c] - s.bg[c]);
                gcx += gv * alpha * px.dcolor_x[c];
                gcy += gv * alpha * px.dcolor_y[c];
                ghb += gv * alpha * s.dblob[c];
                ghg += gv * (1.0 - alpha) * s.dbg_hue[c];
                gbr += gv * (1.0 - alpha) * s.bg_unit[c];
            }
            gcx += galpha * alpha * dx / r2;
            gcy += galpha * alpha * dy / r2;
            gr += galpha * alpha * (dx * dx + dy * dy) / (r2 * s.r);
        }
    }
    [
        gcx * s.dcx,
        gcy * s.dcy,
        gr * s.dr,
        ghb,
        ghg,
        gbr * s.dbright,
    ]
}
