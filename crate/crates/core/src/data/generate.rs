use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, DetRng};

use super::{DomainDataset, Split, IMAGE_SIDE};

const SIDE: usize = IMAGE_SIDE;

/// Procedural image families.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// Smooth per-class prototypes made of Gaussian bumps, plus pixel noise.
    Blobs,
    /// A line at a class-specific orientation with random offset.
    Bars,
    /// Seven-segment digit glyphs at a random position (at most 10 classes).
    DigitsLite,
    /// `1 - p` applied to another family.
    Inverted(Box<Family>),
    /// Another family rotated by 90 degrees.
    Rotated(Box<Family>),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Blobs => f.write_str("blobs"),
            Family::Bars => f.write_str("bars"),
            Family::DigitsLite => f.write_str("digits-lite"),
            Family::Inverted(b) => write!(f, "inverted-{b}"),
            Family::Rotated(b) => write!(f, "rotated-{b}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("inverted-") {
            return Ok(Family::Inverted(Box::new(rest.parse()?)));
        }
        if let Some(rest) = s.strip_prefix("rotated-") {
            return Ok(Family::Rotated(Box::new(rest.parse()?)));
        }
        match s {
            "blobs" => Ok(Family::Blobs),
            "bars" => Ok(Family::Bars),
            "digits-lite" | "digits" => Ok(Family::DigitsLite),
            _ => Err(Error::UnknownFamily(s.to_string())),
        }
    }
}

impl Family {
    fn base(&self) -> &Family {
        match self {
            Family::Inverted(b) | Family::Rotated(b) => b.base(),
            other => other,
        }
    }

    pub fn max_classes(&self) -> usize {
        match self.base() {
            Family::DigitsLite => 10,
            _ => 64,
        }
    }
}

/// Generation knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenParams {
    /// Standard deviation of additive Gaussian pixel noise (before clamping).
    pub noise: f32,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { noise: 0.15 }
    }
}

pub fn generate(family: &Family, num_classes: usize, n_train: usize, n_test: usize, seed: u64) -> Result<DomainDataset> {
    generate_with(family, num_classes, n_train, n_test, seed, GenParams::default())
}

/// Deterministic dataset: class templates come from one seed stream, the
/// train and test samples from two further, disjoint streams.
pub fn generate_with(
    family: &Family,
    num_classes: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    params: GenParams,
) -> Result<DomainDataset> {
    if num_classes < 2 || num_classes > family.max_classes() {
        return Err(Error::Config(format!(
            "{family} supports 2..={} classes, got {num_classes}",
            family.max_classes()
        )));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be a finite non-negative number, got {}", params.noise)));
    }
    let templates = Templates::new(family.base(), num_classes, &mut rng::stream(seed, 100));
    let split = |n: usize, stream: u64| {
        let mut rng = rng::stream(seed, stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
        labels.shuffle(&mut rng);
        let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
        for &label in &labels {
            let mut img = templates.sample(label, &mut rng);
            add_noise(&mut img, params.noise, &mut rng);
            apply_transforms(family, &mut img);
            pixels.extend_from_slice(&img);
        }
        Split { height: SIDE, width: SIDE, pixels, labels }
    };
    Ok(DomainDataset {
        name: family.to_string(),
        num_classes,
        seed,
        train: split(n_train, 1),
        test: split(n_test, 2),
    })
}

fn add_noise(img: &mut [f32], std: f32, rng: &mut DetRng) {
    if std > 0.0 {
        let noise = rng::normal_vec(rng, img.len(), std);
        for (p, n) in img.iter_mut().zip(noise) {
            *p += n;
        }
    }
    for p in img.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

fn apply_transforms(family: &Family, img: &mut [f32]) {
    match family {
        Family::Inverted(b) => {
            apply_transforms(b, img);
            for p in img.iter_mut() {
                *p = 1.0 - *p;
            }
        }
        Family::Rotated(b) => {
            apply_transforms(b, img);
            let src = img.to_vec();
            for i in 0..SIDE {
                for j in 0..SIDE {
                    img[i * SIDE + j] = src[j * SIDE + (SIDE - 1 - i)];
                }
            }
        }
        _ => {}
    }
}

/// Per-class generation state of a base family.
enum Templates {
    Blobs(Vec<Vec<f32>>),
    Bars(Vec<f32>),
    Digits,
}

// Segments a..g of a seven-segment display, per digit.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

const GLYPH_W: usize = 6;
const GLYPH_H: usize = 11;

impl Templates {
    fn new(family: &Family, num_classes: usize, rng: &mut DetRng) -> Self {
        match family {
            Family::Blobs => Templates::Blobs((0..num_classes).map(|_| blob_prototype(rng)).collect()),
            Family::Bars => {
                // Evenly spaced orientations with a random global phase.
                let phase = rng.random_range(0.0..PI / num_classes as f32);
                Templates::Bars((0..num_classes).map(|c| phase + PI * c as f32 / num_classes as f32).collect())
            }
            Family::DigitsLite => Templates::Digits,
            Family::Inverted(_) | Family::Rotated(_) => unreachable!("templates use the base family"),
        }
    }

    fn sample(&self, class: usize, rng: &mut DetRng) -> Vec<f32> {
        match self {
            Templates::Blobs(protos) => protos[class].clone(),
            Templates::Bars(angles) => bar_image(angles[class], rng),
            Templates::Digits => digit_image(class, rng),
        }
    }
}

fn blob_prototype(rng: &mut DetRng) -> Vec<f32> {
    let mut img = vec![0.0f32; SIDE * SIDE];
    for _ in 0..3 {
        let cy = rng.random_range(2.0..(SIDE as f32 - 2.0));
        let cx = rng.random_range(2.0..(SIDE as f32 - 2.0));
        let sigma = rng.random_range(1.5f32..3.0);
        let amp = rng.random_range(0.5f32..1.0);
        for i in 0..SIDE {
            for j in 0..SIDE {
                let d2 = (i as f32 - cy).powi(2) + (j as f32 - cx).powi(2);
                img[i * SIDE + j] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for p in img.iter_mut() {
        *p = p.min(1.0);
    }
    img
}

fn bar_image(angle: f32, rng: &mut DetRng) -> Vec<f32> {
    let angle = angle + rng.random_range(-0.08f32..0.08);
    let offset = rng.random_range(-3.0f32..3.0);
    let (s, c) = angle.sin_cos();
    let mid = (SIDE as f32 - 1.0) / 2.0;
    let mut img = vec![0.0f32; SIDE * SIDE];
    for i in 0..SIDE {
        for j in 0..SIDE {
            let (y, x) = (i as f32 - mid, j as f32 - mid);
            // Distance to the line through `offset·n` with direction (c, s).
            let d = -x * s + y * c - offset;
            img[i * SIDE + j] = (-d * d / (2.0 * 0.7 * 0.7)).exp();
        }
    }
    img
}

fn digit_image(digit: usize, rng: &mut DetRng) -> Vec<f32> {
    let x0 = rng.random_range(1..=SIDE - GLYPH_W - 1);
    let y0 = rng.random_range(1..=SIDE - GLYPH_H - 1);
    let ink = rng.random_range(0.7f32..1.0);
    let (w, h, mid) = (GLYPH_W - 1, GLYPH_H - 1, (GLYPH_H - 1) / 2);
    let mut img = vec![0.0f32; SIDE * SIDE];
    let mut hline = |row: usize| {
        for col in 0..=w {
            img[(y0 + row) * SIDE + x0 + col] = ink;
        }
    };
    let seg = &SEGMENTS[digit];
    if seg[0] {
        hline(0);
    }
    if seg[6] {
        hline(mid);
    }
    if seg[3] {
        hline(h);
    }
    let mut vline = |col: usize, from: usize, to: usize| {
        for row in from..=to {
            img[(y0 + row) * SIDE + x0 + col] = ink;
        }
    };
    if seg[1] {
        vline(w, 0, mid);
    }
    if seg[2] {
        vline(w, mid, h);
    }
    if seg[4] {
        vline(0, mid, h);
    }
    if seg[5] {
        vline(0, 0, mid);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_prototype_accuracy(ds: &DomainDataset) -> f32 {
        // Class means of the noiseless train split act as prototypes.
        let n = SIDE * SIDE;
        let mut protos = vec![vec![0.0f32; n]; ds.num_classes];
        let counts = ds.train.class_counts(ds.num_classes);
        for i in 0..ds.train.len() {
            let l = ds.train.labels[i];
            for (p, v) in protos[l].iter_mut().zip(ds.train.image(i)) {
                *p += v / counts[l] as f32;
            }
        }
        let hits = (0..ds.test.len())
            .filter(|&i| {
                let img = ds.test.image(i);
                let best = (0..ds.num_classes)
                    .min_by(|&a, &b| {
                        let da: f32 = protos[a].iter().zip(img).map(|(p, v)| (p - v).powi(2)).sum();
                        let db: f32 = protos[b].iter().zip(img).map(|(p, v)| (p - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ds.test.labels[i]
            })
            .count();
        hits as f32 / ds.test.len() as f32
    }

    #[test]
    fn deterministic_given_seed() {
        for fam in ["blobs", "bars", "digits-lite", "inverted-digits", "rotated-bars"] {
            let f: Family = fam.parse().unwrap();
            let a = generate(&f, 5, 40, 20, 9).unwrap();
            let b = generate(&f, 5, 40, 20, 9).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.train.pixels, generate(&f, 5, 40, 20, 10).unwrap().train.pixels);
        }
    }

    #[test]
    fn noiseless_blobs_are_separable_by_nearest_prototype() {
        let ds = generate_with(&Family::Blobs, 8, 64, 64, 3, GenParams { noise: 0.0 }).unwrap();
        assert_eq!(nearest_prototype_accuracy(&ds), 1.0);
    }

    #[test]
    fn inverted_is_pixelwise_complement() {
        let base = generate(&Family::DigitsLite, 10, 30, 10, 4).unwrap();
        let inv = generate(&Family::Inverted(Box::new(Family::DigitsLite)), 10, 30, 10, 4).unwrap();
        assert_eq!(base.train.labels, inv.train.labels);
        for (a, b) in base.train.pixels.iter().zip(&inv.train.pixels) {
            assert_eq!(*b, 1.0 - a);
        }
    }

    #[test]
    fn rotated_is_a_quarter_turn() {
        let base = generate(&Family::Bars, 4, 8, 4, 4).unwrap();
        let rot = generate(&Family::Rotated(Box::new(Family::Bars)), 4, 8, 4, 4).unwrap();
        assert_eq!(base.test.labels, rot.test.labels);
        let (a, b) = (base.train.image(0), rot.train.image(0));
        for i in 0..SIDE {
            for j in 0..SIDE {
                assert_eq!(b[i * SIDE + j], a[j * SIDE + SIDE - 1 - i]);
            }
        }
    }

    #[test]
    fn balanced_and_in_range() {
        for fam in ["blobs", "bars", "digits", "inverted-bars", "rotated-digits"] {
            let f: Family = fam.parse().unwrap();
            let ds = generate(&f, 7, 101, 33, 1).unwrap();
            for (split, n) in [(&ds.train, 101), (&ds.test, 33)] {
                assert_eq!(split.len(), n);
                for c in split.class_counts(7) {
                    assert!(c.abs_diff(n / 7) <= 1, "{fam}: {c}");
                }
                assert!(split.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn rejects_unknown_family_and_bad_class_counts() {
        assert!(matches!("stripes".parse::<Family>(), Err(Error::UnknownFamily(_))));
        assert!(matches!("inverted-stripes".parse::<Family>(), Err(Error::UnknownFamily(_))));
        assert!(generate(&Family::DigitsLite, 11, 10, 10, 0).is_err());
        assert!(generate(&Family::Blobs, 1, 10, 10, 0).is_err());
    }
}
