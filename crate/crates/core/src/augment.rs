//! Label-preserving augmentations used to build query samples.
//!
//! Colour images get geometric (zoom, rotation, shear, flips) and
//! photometric (contrast, solarise) transforms; pseudo-images get additive
//! Gaussian noise on symmetric pairs of entries, which keeps the matrix
//! symmetric.

use serde::{Deserialize, Serialize};

use crate::data::{Image, Modality, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Scale factor interval.
    Zoom,
    /// Angle interval in degrees.
    Rotation,
    /// Contrast factor interval.
    Contrast,
    HorizontalFlip,
    VerticalFlip,
    /// Shear angle interval in degrees.
    Shear,
    /// Threshold interval; pixels at or above the threshold are inverted.
    Solarize,
    /// Fraction of matrix entries receiving N(0, 1) noise (use `[f, f]`).
    SymmetricNoise,
}

impl TransformKind {
    fn takes_range(self) -> bool {
        !matches!(
            self,
            TransformKind::HorizontalFlip | TransformKind::VerticalFlip
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default = "default_probability")]
    pub probability: f64,
    /// Parameter interval `[lo, hi]`, sampled uniformly. Absent for flips.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

fn default_probability() -> f64 {
    0.5
}

impl TransformSpec {
    pub fn new(kind: TransformKind, probability: f64, range: Option<[f64; 2]>) -> Self {
        TransformSpec {
            kind,
            probability,
            range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("augment {:?}: {m}", self.kind)));
        if !(0.0..=1.0).contains(&self.probability) {
            return fail("probability must lie in [0, 1]");
        }
        match (self.kind.takes_range(), self.range) {
            (true, None) => return fail("missing parameter range"),
            (false, Some(_)) => return fail("flips take no parameter range"),
            _ => {}
        }
        if let Some([lo, hi]) = self.range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return fail("range must be a finite interval with lo <= hi");
            }
            let ok = match self.kind {
                TransformKind::Zoom | TransformKind::Contrast => lo > 0.0,
                TransformKind::Rotation => lo >= -180.0 && hi <= 180.0,
                TransformKind::Shear => lo > -90.0 && hi < 90.0,
                TransformKind::Solarize => lo >= 0.0 && hi <= 1.0,
                TransformKind::SymmetricNoise => lo > 0.0 && hi < 1.0,
                TransformKind::HorizontalFlip | TransformKind::VerticalFlip => true,
            };
            if !ok {
                return fail("range outside the admissible values for this transform");
            }
        }
        Ok(())
    }
}

/// Ordered list of randomly applied transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub transforms: Vec<TransformSpec>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::microscopy()
    }
}

impl AugmentPolicy {
    pub fn empty() -> Self {
        AugmentPolicy { transforms: vec![] }
    }

    /// Zoom, rotation, contrast, flips, shear and solarise, each applied with
    /// probability 0.5.
    pub fn microscopy() -> Self {
        use TransformKind::*;
        let t = TransformSpec::new;
        AugmentPolicy {
            transforms: vec![
                t(Zoom, 0.5, Some([0.8, 1.2])),
                t(Rotation, 0.5, Some([-30.0, 30.0])),
                t(Contrast, 0.5, Some([0.7, 1.3])),
                t(HorizontalFlip, 0.5, None),
                t(VerticalFlip, 0.5, None),
                t(Shear, 0.5, Some([-15.0, 15.0])),
                t(Solarize, 0.5, Some([0.5, 1.0])),
            ],
        }
    }

    /// Symmetric Gaussian noise on 5% of the entries, always applied.
    pub fn pseudo_image() -> Self {
        AugmentPolicy {
            transforms: vec![TransformSpec::new(
                TransformKind::SymmetricNoise,
                1.0,
                Some([0.05, 0.05]),
            )],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transforms.iter().try_for_each(TransformSpec::validate)
    }

    /// Checks the policy against the data it will be applied to.
    pub fn validate_for(&self, modality: Modality) -> Result<()> {
        self.validate()?;
        if modality == Modality::PseudoImage {
            if let Some(t) = self
                .transforms
                .iter()
                .find(|t| t.kind != TransformKind::SymmetricNoise)
            {
                return Err(Error::Config(format!(
                    "augment {:?} would break pseudo-image symmetry; only symmetric_noise is allowed",
                    t.kind
                )));
            }
        }
        Ok(())
    }
}

/// Inverse-mapped resampling with bilinear interpolation and edge replication.
/// `map(x, y)` returns the source coordinate of output pixel `(x, y)`.
fn warp(image: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (xs, ys) = map(x as f64, y as f64);
            let xs = xs.clamp(0.0, (w - 1) as f64);
            let ys = ys.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (xs.floor() as usize, ys.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (xs - x0 as f64, ys - y0 as f64);
            for c in 0..image.channels() {
                let top = image.at(c, y0, x0) as f64 * (1.0 - fx) + image.at(c, y0, x1) as f64 * fx;
                let bottom =
                    image.at(c, y1, x0) as f64 * (1.0 - fx) + image.at(c, y1, x1) as f64 * fx;
                out.set(c, y, x, (top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    out
}

fn center(image: &Image) -> (f64, f64) {
    (
        (image.width() - 1) as f64 / 2.0,
        (image.height() - 1) as f64 / 2.0,
    )
}

/// Rotates by `degrees` about the image centre.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    let (cx, cy) = center(image);
    let (s, c) = degrees.to_radians().sin_cos();
    warp(image, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    })
}

/// Scales about the centre; `factor > 1` magnifies.
pub fn zoom(image: &Image, factor: f64) -> Image {
    let (cx, cy) = center(image);
    warp(image, |x, y| {
        (cx + (x - cx) / factor, cy + (y - cy) / factor)
    })
}

/// Horizontal shear about the centre row.
pub fn shear(image: &Image, degrees: f64) -> Image {
    let (_, cy) = center(image);
    let k = degrees.to_radians().tan();
    warp(image, |x, y| (x + k * (y - cy), y))
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width();
    for c in 0..image.channels() {
        for y in 0..image.height() {
            for x in 0..w {
                out.set(c, y, x, image.at(c, y, w - 1 - x));
            }
        }
    }
    out
}

pub fn flip_vertical(image: &Image) -> Image {
    let mut out = image.clone();
    let h = image.height();
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..image.width() {
                out.set(c, y, x, image.at(c, h - 1 - y, x));
            }
        }
    }
    out
}

/// Scales deviations from the global mean intensity by `factor`.
pub fn contrast(image: &Image, factor: f64) -> Image {
    let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len() as f64;
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (mean + factor * (*v as f64 - mean)) as f32;
    }
    out
}

pub fn solarize(image: &Image, threshold: f64) -> Image {
    let t = threshold as f32;
    let mut out = image.clone();
    for v in out.data_mut() {
        if *v >= t {
            *v = 1.0 - *v;
        }
    }
    out
}

/// One noise draw applied to `(row, col)` and its mirror `(col, row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// Number of entries the symmetric noise touches for a side-`s` matrix.
pub fn noise_target(side: usize, fraction: f64) -> usize {
    (fraction * (side * side) as f64).ceil() as usize
}

/// Adds N(0, 1) noise to `ceil(fraction * S^2)` entries chosen as symmetric
/// pairs (a diagonal entry counts once), returning the noisy matrix and the
/// draws. The final pair may overshoot the target by one entry.
pub fn augment_pseudo_image_traced(
    matrix: &Image,
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Image, Vec<NoiseDraw>)> {
    if matrix.channels() != 1 || !matrix.is_square() {
        return Err(Error::InvalidArgument(format!(
            "symmetric noise needs a square single-channel matrix, got {}x{}x{}",
            matrix.channels(),
            matrix.height(),
            matrix.width()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "noise fraction {fraction} outside (0, 1)"
        )));
    }
    if let Some((d, i, j)) = matrix.asymmetry() {
        if d > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "matrix is not symmetric: entry ({i}, {j}) differs from its mirror by {d}"
            )));
        }
    }
    let s = matrix.height();
    let target = noise_target(s, fraction);
    let mut cells: Vec<(usize, usize)> = (0..s).flat_map(|i| (i..s).map(move |j| (i, j))).collect();
    let mut out = matrix.clone();
    let mut draws = Vec::new();
    let mut touched = 0;
    let mut next = 0;
    while touched < target && next < cells.len() {
        let pick = next + rng.below(cells.len() - next);
        cells.swap(next, pick);
        let (i, j) = cells[next];
        next += 1;
        let value = rng.normal() as f32;
        let noisy = out.at(0, i, j) + value;
        out.set(0, i, j, noisy);
        out.set(0, j, i, noisy);
        touched += if i == j { 1 } else { 2 };
        draws.push(NoiseDraw {
            row: i,
            col: j,
            value,
        });
    }
    Ok((out, draws))
}

pub fn augment_pseudo_image(matrix: &Image, fraction: f64, rng: &mut Rng) -> Result<Image> {
    augment_pseudo_image_traced(matrix, fraction, rng).map(|(m, _)| m)
}

fn apply_transforms(image: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Image> {
    let mut out = image.clone();
    for spec in &policy.transforms {
        if !rng.bernoulli(spec.probability) {
            continue;
        }
        let param = spec.range.map_or(0.0, |[lo, hi]| rng.uniform(lo, hi));
        out = match spec.kind {
            TransformKind::Zoom => zoom(&out, param),
            TransformKind::Rotation => rotate(&out, param),
            TransformKind::Contrast => contrast(&out, param),
            TransformKind::HorizontalFlip => flip_horizontal(&out),
            TransformKind::VerticalFlip => flip_vertical(&out),
            TransformKind::Shear => shear(&out, param),
            TransformKind::Solarize => solarize(&out, param),
            TransformKind::SymmetricNoise => augment_pseudo_image(&out, param, rng)?,
        };
    }
    Ok(out)
}

/// Augments a `[C, S, S]` image with values in `[0, 1]`; the result is
/// clamped back into `[0, 1]`.
pub fn augment_image(image: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Image> {
    if policy.transforms.is_empty() {
        return Ok(image.clone());
    }
    let mut out = apply_transforms(image, policy, rng)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Augments according to the sample's modality: images are clamped to
/// `[0, 1]`, pseudo-images keep their real-valued range.
pub fn augment_sample(
    image: &Image,
    modality: Modality,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<Image> {
    match modality {
        Modality::Image => augment_image(image, policy, rng),
        Modality::PseudoImage => apply_transforms(image, policy, rng),
    }
}

/// `k` independent augmentations of `sample`, each keeping its label.
pub fn make_query_set(
    sample: &Sample,
    modality: Modality,
    policy: &AugmentPolicy,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Sample>> {
    if k < 1 {
        return Err(Error::InvalidArgument(
            "query set size k must be >= 1".into(),
        ));
    }
    (0..k)
        .map(|_| {
            Ok(Sample {
                image: augment_sample(&sample.image, modality, policy, rng)?,
                label: sample.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(c: usize, s: usize) -> Image {
        let data = (0..c * s * s)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Image::new(c, s, s, data).unwrap()
    }

    #[test]
    fn empty_policy_is_identity() {
        let img = gradient_image(3, 8);
        let out = augment_image(&img, &AugmentPolicy::empty(), &mut Rng::new(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient_image(3, 7);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn identity_parameters_preserve_image() {
        let img = gradient_image(1, 9);
        for out in [
            rotate(&img, 0.0),
            zoom(&img, 1.0),
            shear(&img, 0.0),
            contrast(&img, 1.0),
        ] {
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(solarize(&img, 1.01), img);
    }

    #[test]
    fn rotation_by_90_moves_pixels_exactly() {
        let img = gradient_image(1, 5);
        let r = rotate(&img, 90.0);
        // Output (x, y) samples source (cx + dy, cy - dx).
        for y in 0..5 {
            for x in 0..5 {
                assert!((r.at(0, y, x) - img.at(0, 4 - x, y)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_interval_and_keep_shape() {
        let img = gradient_image(3, 16);
        let policy = AugmentPolicy {
            transforms: AugmentPolicy::microscopy()
                .transforms
                .into_iter()
                .map(|t| TransformSpec {
                    probability: 1.0,
                    ..t
                })
                .collect(),
        };
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let out = augment_image(&img, &policy, &mut rng).unwrap();
            assert_eq!((out.channels(), out.height(), out.width()), (3, 16, 16));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::microscopy().validate().is_ok());
        assert!(AugmentPolicy::pseudo_image()
            .validate_for(Modality::PseudoImage)
            .is_ok());
        assert!(AugmentPolicy::microscopy()
            .validate_for(Modality::PseudoImage)
            .is_err());
        let bad = |kind, p, r| TransformSpec::new(kind, p, r).validate().is_err();
        assert!(bad(TransformKind::Zoom, 1.5, Some([0.8, 1.2])));
        assert!(bad(TransformKind::Zoom, 0.5, Some([1.2, 0.8])));
        assert!(bad(TransformKind::Zoom, 0.5, None));
        assert!(bad(TransformKind::HorizontalFlip, 0.5, Some([0.0, 1.0])));
        assert!(bad(TransformKind::SymmetricNoise, 1.0, Some([0.0, 0.05])));
        assert!(bad(TransformKind::Solarize, 0.5, Some([0.5, 1.5])));
    }

    #[test]
    fn symmetric_noise_rejects_bad_input() {
        let mut rng = Rng::new(1);
        let rgb = gradient_image(3, 8);
        assert!(augment_pseudo_image(&rgb, 0.05, &mut rng).is_err());
        let rect = Image::filled(1, 4, 5, 0.0);
        assert!(augment_pseudo_image(&rect, 0.05, &mut rng).is_err());
        let mut asym = Image::filled(1, 4, 4, 0.0);
        asym.set(0, 0, 3, 1.0);
        assert!(augment_pseudo_image(&asym, 0.05, &mut rng).is_err());
        let sym = Image::filled(1, 4, 4, 0.0);
        assert!(augment_pseudo_image(&sym, 0.0, &mut rng).is_err());
        assert!(augment_pseudo_image(&sym, 1.0, &mut rng).is_err());
    }

    #[test]
    fn query_set_inherits_label() {
        let sample = Sample {
            image: gradient_image(3, 8),
            label: 4,
        };
        let mut rng = Rng::new(2);
        let q = make_query_set(
            &sample,
            Modality::Image,
            &AugmentPolicy::microscopy(),
            5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(q.len(), 5);
        assert!(q.iter().all(|s| s.label == 4));
        let one = make_query_set(
            &sample,
            Modality::Image,
            &AugmentPolicy::empty(),
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(one[0], sample);
        assert!(make_query_set(
            &sample,
            Modality::Image,
            &AugmentPolicy::empty(),
            0,
            &mut rng
        )
        .is_err());
    }
}
