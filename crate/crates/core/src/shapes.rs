//! Mirror-symmetric synthetic shapes.
//!
//! Axes: `x` is left/right (the mirror normal), `y` points forward and `z`
//! up. A half object with `x > 0` is sampled from a union of primitive
//! surfaces, centred and scaled, then reflected across `x = 0`. Right-side
//! points carry label 1 and their mirror images label 0. Tables are built
//! from a quarter and are also symmetric about `y = 0`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_unit_scale, norm, PointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Airplane,
    Chair,
    Cap,
    Table,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Airplane,
        ShapeKind::Chair,
        ShapeKind::Cap,
        ShapeKind::Table,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Airplane => "airplane",
            ShapeKind::Chair => "chair",
            ShapeKind::Cap => "cap",
            ShapeKind::Table => "table",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub seed: u64,
    #[serde(default)]
    pub jitter_sigma: f64,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, n_points: usize, seed: u64, jitter_sigma: f64) -> Self {
        Self {
            kind,
            n_points,
            seed,
            jitter_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 4 || self.n_points % 2 != 0 {
            return Err(Error::Contract(format!(
                "n_points must be even and >= 4, got {}",
                self.n_points
            )));
        }
        if self.kind == ShapeKind::Table && self.n_points % 4 != 0 {
            return Err(Error::Contract(format!(
                "table clouds are built from quarters; n_points must be a multiple of 4, got {}",
                self.n_points
            )));
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(Error::Contract(format!(
                "jitter_sigma must be finite and >= 0, got {}",
                self.jitter_sigma
            )));
        }
        Ok(())
    }
}

/// Closest allowed approach of a half-object point to the mirror plane.
const PLANE_MARGIN: f64 = 2e-3;

/// Samples a labelled, mirror-symmetric cloud.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let name = format!("{}-{}", spec.kind, spec.seed);

    let (mut half, mirror_y) = match spec.kind {
        ShapeKind::Table => (table_quarter(&mut rng, spec.n_points / 4), true),
        kind => (half_object(kind, &mut rng, spec.n_points / 2), false),
    };

    // Centre the free axes (the mirrored ones have centroid 0 by construction)
    // and scale, before mirroring so the reflection stays exact.
    let m = half.len() as f64;
    let first_free = if mirror_y { 2 } else { 1 };
    for t in first_free..3 {
        let c = half.iter().map(|p| p[t]).sum::<f64>() / m;
        half.iter_mut().for_each(|p| p[t] -= c);
    }
    let r = half.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    half.iter_mut().for_each(|p| *p = p.map(|v| v / r));

    if mirror_y {
        let back: Vec<Vec3> = half.iter().map(|p| [p[0], -p[1], p[2]]).collect();
        half.extend(back);
    }
    let mut points = half.clone();
    points.extend(half.iter().map(|p| [-p[0], p[1], p[2]]));
    let mut labels = vec![1u8; half.len()];
    labels.extend(std::iter::repeat(0u8).take(half.len()));

    let cloud = PointCloud::new(points, Some(labels), name)?;
    if spec.jitter_sigma == 0.0 {
        return Ok(cloud);
    }
    let noise = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::Contract(e.to_string()))?;
    let mut jittered = cloud;
    for p in &mut jittered.points {
        for v in p.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    center_unit_scale(&jittered)
}

fn vary(rng: &mut ChaCha8Rng, base: f64) -> f64 {
    base * rng.random_range(0.85..1.15)
}

/// Picks a component index with probability proportional to `weights`.
fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Uniform direction with `x > 0` (and `z >= 0` when `upper`).
fn half_direction(rng: &mut ChaCha8Rng, upper: bool) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n < 1e-9 {
            continue;
        }
        let mut d = v.map(|c| c / n);
        d[0] = d[0].abs();
        if upper {
            d[2] = d[2].abs();
        }
        return d;
    }
}

fn half_object(kind: ShapeKind, rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec3> {
    match kind {
        ShapeKind::Airplane => sample_until(rng, count, airplane),
        ShapeKind::Chair => sample_until(rng, count, chair),
        ShapeKind::Cap => sample_until(rng, count, cap),
        ShapeKind::Table => unreachable!("tables are built from quarters"),
    }
}

/// Draws shape parameters once, then points until `count` clear the plane margin.
fn sample_until<P, F>(rng: &mut ChaCha8Rng, count: usize, make: F) -> Vec<Vec3>
where
    F: Fn(&mut ChaCha8Rng) -> P,
    P: FnMut(&mut ChaCha8Rng) -> Vec3,
{
    let mut sampler = make(rng);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = sampler(rng);
        if p[0] > PLANE_MARGIN {
            out.push(p);
        }
    }
    out
}

/// Fuselage ellipsoid, swept wing with dihedral, tail plane and a vertical fin.
fn airplane(rng: &mut ChaCha8Rng) -> impl FnMut(&mut ChaCha8Rng) -> Vec3 {
    let length = vary(rng, 1.0);
    let radius = vary(rng, 0.1);
    let span = vary(rng, 0.9);
    let root_chord = vary(rng, 0.35);
    let sweep = vary(rng, 0.5);
    let dihedral = vary(rng, 0.1);
    let fin_height = vary(rng, 0.35);
    move |rng| match pick(rng, &[0.35, 0.35, 0.1, 0.2]) {
        0 => {
            let d = half_direction(rng, false);
            [radius * d[0], length * d[1], radius * d[2]]
        }
        1 => {
            let s = rng.random_range(0.5 * radius..span);
            let chord = root_chord * (1.0 - 0.6 * s / span);
            let lead = 0.25 * length - sweep * s;
            [
                s,
                lead - rng.random_range(0.0..chord),
                dihedral * s + rng.random_range(-0.01..0.01),
            ]
        }
        2 => {
            let s = rng.random_range(0.5 * radius..0.35 * span);
            let lead = -0.75 * length - 0.3 * s;
            [s, lead - rng.random_range(0.0..0.15), 0.03 + rng.random_range(-0.005..0.005)]
        }
        _ => {
            let h = rng.random_range(0.5 * radius..fin_height);
            let chord = 0.25 * (1.0 - 0.5 * h / fin_height);
            let lead = -0.7 * length - 0.4 * h;
            [rng.random_range(0.0..0.02), lead - rng.random_range(0.0..chord), h]
        }
    }
}

/// Seat, backrest and two legs.
fn chair(rng: &mut ChaCha8Rng) -> impl FnMut(&mut ChaCha8Rng) -> Vec3 {
    let width = vary(rng, 0.45);
    let depth = vary(rng, 0.45);
    let back_height = vary(rng, 0.9);
    let leg_height = vary(rng, 0.8);
    let leg_radius = 0.03;
    move |rng| match pick(rng, &[0.35, 0.35, 0.3]) {
        0 => [
            rng.random_range(0.0..width),
            rng.random_range(-depth..depth),
            rng.random_range(-0.02..0.02),
        ],
        1 => [
            rng.random_range(0.0..width),
            -depth + rng.random_range(-0.02..0.02),
            rng.random_range(0.0..back_height),
        ],
        _ => {
            let front = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            [
                width - 0.05 + leg_radius * a.cos(),
                front * (depth - 0.05) + leg_radius * a.sin(),
                -rng.random_range(0.0..leg_height),
            ]
        }
    }
}

/// Hemispherical crown with a brim on the front only.
fn cap(rng: &mut ChaCha8Rng) -> impl FnMut(&mut ChaCha8Rng) -> Vec3 {
    let radius = vary(rng, 0.5);
    let brim = vary(rng, 0.35);
    let height = vary(rng, 1.0);
    move |rng| match pick(rng, &[0.65, 0.35]) {
        0 => {
            let d = half_direction(rng, true);
            [radius * d[0], radius * d[1], height * radius * d[2]]
        }
        _ => {
            let r = rng.random_range(radius..radius + brim);
            let a = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            [r * a.cos(), r * a.sin(), rng.random_range(-0.01..0.01)]
        }
    }
}

/// Quarter table with `x > 0`, `y > 0`: top plate and one leg.
fn table_quarter(rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec3> {
    let width = vary(rng, 0.6);
    let depth = vary(rng, 0.4);
    let leg_height = vary(rng, 0.7);
    let leg_radius = 0.03;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = match pick(rng, &[0.6, 0.4]) {
            0 => [
                rng.random_range(0.0..width),
                rng.random_range(0.0..depth),
                rng.random_range(-0.02..0.02),
            ],
            _ => {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [
                    width - 0.05 + leg_radius * a.cos(),
                    depth - 0.05 + leg_radius * a.sin(),
                    -rng.random_range(0.0..leg_height),
                ]
            }
        };
        if p[0] > PLANE_MARGIN && p[1] > PLANE_MARGIN {
            out.push(p);
        }
    }
    out
}

/// `n_points` per cloud, seeds `base_seed..base_seed + count`.
pub fn gen_dataset(
    kind: ShapeKind,
    count: usize,
    n_points: usize,
    jitter_sigma: f64,
    base_seed: u64,
) -> Result<Vec<PointCloud>> {
    (0..count as u64)
        .map(|i| gen_shape(&ShapeSpec::new(kind, n_points, base_seed + i, jitter_sigma)))
        .collect()
}
