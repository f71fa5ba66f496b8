//! Browser bindings. Every entry point takes plain numbers and strings and
//! returns a JSON document, so the page needs no generated types.

use oavnn::autodiff::{Tape, Tensor, Var};
use oavnn::geometry::{apply_transform, random_o3, PointCloud, TransformO3, Vec3};
use oavnn::layers::{complex_linear, vn_linear, ComplexWeights};
use oavnn::shapes::{gen_shape, ShapeKind, ShapeSpec};
use oavnn::symmetry::{planar_symmetry_direction, segment_by_plane};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ShapeView {
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
    /// Normal of the symmetry plane after the random transform.
    pub true_normal: Vec3,
    pub c: Vec3,
    pub magnitude: f64,
    pub direction: Option<Vec3>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn shape(kind: &str, n_points: usize, jitter: f64, seed: u64, pose_seed: u64, reflect: bool) -> Result<(PointCloud, TransformO3), String> {
    let kind: ShapeKind = kind.parse().map_err(err)?;
    let cloud = gen_shape(&ShapeSpec::new(kind, n_points, seed, jitter)).map_err(err)?;
    let pose = random_o3(pose_seed, reflect);
    Ok((apply_transform(&cloud, &pose), pose))
}

/// Generates a shape in a random pose and estimates its symmetry direction.
pub fn generate_json(
    kind: &str,
    n_points: usize,
    jitter: f64,
    seed: u64,
    pose_seed: u64,
    shells: usize,
) -> Result<String, String> {
    let (cloud, pose) = shape(kind, n_points, jitter, seed, pose_seed, false)?;
    let est = planar_symmetry_direction(&cloud.points, shells).map_err(err)?;
    let view = ShapeView {
        labels: cloud.labels.clone().unwrap_or_default(),
        true_normal: pose.apply([1.0, 0.0, 0.0]),
        points: cloud.points,
        c: est.direction,
        magnitude: est.magnitude,
        direction: est.unit_direction,
    };
    serde_json::to_string(&view).map_err(err)
}

#[derive(Debug, Serialize)]
pub struct SegmentView {
    pub labels: Vec<u8>,
    pub on_plane: Vec<bool>,
    pub direction: Vec3,
    pub accuracy: Option<f64>,
}

/// Splits the same shape by its estimated plane and scores it against the
/// generator's labels.
pub fn segment_json(
    kind: &str,
    n_points: usize,
    jitter: f64,
    seed: u64,
    pose_seed: u64,
    shells: usize,
) -> Result<String, String> {
    let (cloud, _) = shape(kind, n_points, jitter, seed, pose_seed, false)?;
    let seg = segment_by_plane(&cloud.points, cloud.labels.as_deref(), shells).map_err(err)?;
    let view = SegmentView {
        labels: seg.labels,
        on_plane: seg.on_plane,
        direction: seg.estimate.unit_direction.unwrap_or([0.0; 3]),
        accuracy: seg.accuracy,
    };
    serde_json::to_string(&view).map_err(err)
}

#[derive(Debug, Serialize)]
pub struct ExplorerRow {
    pub layer: &'static str,
    pub error: f64,
}

#[derive(Debug, Serialize)]
pub struct ExplorerView {
    pub proper: bool,
    pub determinant: f64,
    pub rows: Vec<ExplorerRow>,
}

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    // Small LCG keeps the explorer independent of the library's RNG streams.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn relative(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    diff.sqrt() / b.norm().max(1e-300)
}

/// Relative error `|f(X R) - f(X) R| / |f(X) R|` for a linear VN layer and
/// for the complex linear layer with `J` treated as a vector or as a
/// pseudovector (`J -> det(R) J R`). `b_scale` scales the rotation weights.
pub fn explore_json(seed: u64, reflect: bool, b_scale: f64) -> Result<String, String> {
    let (n, c, out) = (32, 4, 4);
    let x = random_tensor(seed, &[n, c, 3]);
    let j = random_tensor(seed ^ 1, &[n, c, 3]);
    let wa = random_tensor(seed ^ 2, &[out, c]);
    let wb = random_tensor(seed ^ 3, &[out, c]).map(|v| v * b_scale);
    let wc = random_tensor(seed ^ 4, &[out, c]);
    let r = random_o3(seed ^ 5, reflect);
    let det = if r.is_proper() { 1.0 } else { -1.0 };

    let run = |x: &Tensor, j: Option<&Tensor>| -> Result<Tensor, String> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y: Var = match j {
            None => {
                let w = t.constant(wa.clone());
                vn_linear(&mut t, xv, w).map_err(err)?
            }
            Some(j) => {
                let jv = t.constant(j.clone());
                let w = ComplexWeights {
                    a: t.constant(wa.clone()),
                    b: t.constant(wb.clone()),
                    c: t.constant(wc.clone()),
                };
                complex_linear(&mut t, xv, jv, &w).map_err(err)?
            }
        };
        Ok(t.value(y).clone())
    };

    let xr = r.apply_tensor(&x);
    let jr = r.apply_tensor(&j);
    let jp = jr.map(|v| det * v);
    let rows = vec![
        ExplorerRow {
            layer: "vn_linear",
            error: relative(&run(&xr, None)?, &r.apply_tensor(&run(&x, None)?)),
        },
        ExplorerRow {
            layer: "complex_linear, J as vector",
            error: relative(&run(&xr, Some(&jr))?, &r.apply_tensor(&run(&x, Some(&j))?)),
        },
        ExplorerRow {
            layer: "complex_linear, J as pseudovector",
            error: relative(&run(&xr, Some(&jp))?, &r.apply_tensor(&run(&x, Some(&j))?)),
        },
    ];
    serde_json::to_string(&ExplorerView {
        proper: r.is_proper(),
        determinant: det,
        rows,
    })
    .map_err(err)
}

#[wasm_bindgen]
pub fn generate(kind: &str, n_points: usize, jitter: f64, seed: u32, pose_seed: u32, shells: usize) -> Result<String, JsError> {
    generate_json(kind, n_points, jitter, seed.into(), pose_seed.into(), shells).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn segment(kind: &str, n_points: usize, jitter: f64, seed: u32, pose_seed: u32, shells: usize) -> Result<String, JsError> {
    segment_json(kind, n_points, jitter, seed.into(), pose_seed.into(), shells).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn explore(seed: u32, reflect: bool, b_scale: f64) -> Result<String, JsError> {
    explore_json(seed.into(), reflect, b_scale).map_err(|e| JsError::new(&e))
}
