//! Procedurally rendered textured-ellipse classes.
//!
//! Each class owns a fixed parameter tuple (lobe count, eccentricity, wall
//! thickness, texture frequency, hue, orientation). Samples jitter around
//! the tuple in proportion to `intra_class_variance`, plus pose and pixel
//! noise, so the knob moves the corpus from trivially separable (0) to
//! heavily overlapping ([`MAX_VARIANCE`]).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Modality, Sample};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Upper end of the meaningful variance range.
pub const MAX_VARIANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub intra_class_variance: f64,
    pub image_size: usize,
    pub seed: u64,
    /// Linear count skew: class `c` gets `per_class * (1 - imbalance * c / (C - 1))`
    /// items, rounded, never below `min_per_class`.
    pub imbalance: f64,
    pub min_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 14,
            per_class: 20,
            intra_class_variance: 0.5,
            image_size: 32,
            seed: 0,
            imbalance: 0.0,
            min_per_class: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic: {m}")));
        if self.classes < 2 {
            return fail(format!("classes = {} must be >= 2", self.classes));
        }
        if self.per_class == 0 {
            return fail("per_class must be >= 1".into());
        }
        if !(self.intra_class_variance >= 0.0 && self.intra_class_variance.is_finite()) {
            return fail(format!(
                "intra_class_variance = {} must be >= 0",
                self.intra_class_variance
            ));
        }
        if self.image_size < 8 {
            return fail(format!("image_size = {} must be >= 8", self.image_size));
        }
        if !(0.0..1.0).contains(&self.imbalance) {
            return fail(format!("imbalance = {} must lie in [0, 1)", self.imbalance));
        }
        Ok(())
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let last = (self.classes - 1).max(1) as f64;
        (0..self.classes)
            .map(|c| {
                let n = (self.per_class as f64 * (1.0 - self.imbalance * c as f64 / last)).round()
                    as usize;
                n.max(self.min_per_class.min(self.per_class)).max(1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Family {
    lobes: u32,
    eccentricity: f64,
    wall: f64,
    frequency: f64,
    hue: f64,
    orientation: f64,
}

fn families(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Family> {
    let c = spec.classes;
    (0..c)
        .map(|k| Family {
            lobes: [0, 3, 5][k % 3],
            eccentricity: rng.uniform(0.0, 0.55),
            wall: rng.uniform(0.1, 0.35),
            frequency: rng.uniform(0.5, 3.0),
            // Evenly spaced hues keep every tuple distinct.
            hue: (k as f64 + 0.5) / c as f64,
            orientation: rng.uniform(0.0, PI),
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(f: &Family, size: usize, v: f64, rng: &mut Rng) -> Image {
    let s = size as f64;
    let mut jit = |scale: f64| {
        if v > 0.0 {
            rng.normal() * scale * v
        } else {
            0.0
        }
    };
    let cx = (s - 1.0) / 2.0 + jit(0.08 * s);
    let cy = (s - 1.0) / 2.0 + jit(0.08 * s);
    let theta = f.orientation + jit(PI / 2.0);
    let radius = 0.32 * s * (1.0 + jit(0.15));
    let ecc = (f.eccentricity + jit(0.12)).clamp(0.0, 0.75);
    let wall = (f.wall + jit(0.06)).clamp(0.05, 0.5);
    let freq = f.frequency * jit(0.25).exp();
    let hue = f.hue + jit(0.03);
    let brightness = (1.0 + jit(0.12)).clamp(0.5, 1.5);
    let phase = jit(PI);
    let noise = 0.04 * v;
    let rgb = hsv_to_rgb(hue, 0.75, 1.0);
    let (sin_t, cos_t) = theta.sin_cos();
    let (a, b) = (radius, radius * (1.0 - ecc));
    let mut img = Image::filled(3, size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, w) = (cos_t * dx + sin_t * dy, -sin_t * dx + cos_t * dy);
            let (nu, nw) = (u / a, w / b);
            let mut rho = (nu * nu + nw * nw).sqrt();
            if f.lobes > 0 {
                rho /= 1.0 + 0.15 * (f.lobes as f64 * nw.atan2(nu)).cos();
            }
            let level = if rho > 1.0 {
                None
            } else if rho > 1.0 - wall {
                Some(0.95)
            } else {
                Some(0.35 + 0.3 * (0.5 + 0.5 * (2.0 * PI * freq * nu + phase).sin()))
            };
            for (ch, &base) in rgb.iter().enumerate() {
                let value = match level {
                    Some(l) => base * l * brightness,
                    None => 0.08,
                };
                let n = if noise > 0.0 {
                    rng.normal() * noise
                } else {
                    0.0
                };
                img.set(ch, y, x, (value + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

fn class_names(c: usize) -> Vec<String> {
    (0..c).map(|k| format!("class_{k:02}")).collect()
}

/// Renders the synthetic image corpus; items are ordered by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, streams::SYNTHETIC);
    let fams = families(spec, &mut rng);
    let v = spec.intra_class_variance;
    let mut items = Vec::new();
    for (label, (fam, n)) in fams.iter().zip(spec.class_sizes()).enumerate() {
        for _ in 0..n {
            items.push(Sample {
                image: render(fam, spec.image_size, v, &mut rng),
                label,
            });
        }
    }
    Dataset::new(items, class_names(spec.classes), Modality::Image)
}

/// Symmetric-matrix counterpart: class `c` is the rank-one pattern
/// `u_c u_c^T` plus symmetric Gaussian jitter scaled by the variance.
pub fn generate_synthetic_pseudo(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = Rng::stream(spec.seed, streams::SYNTHETIC);
    let bases: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..s).map(|_| rng.normal()).collect())
        .collect();
    let v = spec.intra_class_variance;
    let mut items = Vec::new();
    for (label, (u, n)) in bases.iter().zip(spec.class_sizes()).enumerate() {
        for _ in 0..n {
            let mut m = Image::filled(1, s, s, 0.0);
            for i in 0..s {
                for j in i..s {
                    let jitter = if v > 0.0 { rng.normal() * v } else { 0.0 };
                    let value = (u[i] * u[j] + jitter) as f32;
                    m.set(0, i, j, value);
                    m.set(0, j, i, value);
                }
            }
            items.push(Sample { image: m, label });
        }
    }
    Dataset::new(items, class_names(spec.classes), Modality::PseudoImage)
}
