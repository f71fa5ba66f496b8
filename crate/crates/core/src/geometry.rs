//! Point clouds, XYZ files, neighbourhoods and O(3) transforms.
//!
//! Points are row vectors; a transform `M` acts as `p -> p * M`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// A finite point set with optional binary left (0) / right (1) labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<u8>>,
    pub name: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, labels: Option<Vec<u8>>, name: impl Into<String>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Contract(format!(
                "a point cloud needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("point coordinates must be finite".into()));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::Contract(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
            if let Some(bad) = l.iter().find(|&&v| v > 1) {
                return Err(Error::Contract(format!("label {} is not 0 or 1", bad)));
            }
        }
        Ok(Self {
            points,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.points)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|&p| norm(p)).fold(0.0, f64::max)
    }

    /// Points as an `[N, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("N x 3")
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        for t in 0..3 {
            c[t] += p[t];
        }
    }
    scale(c, 1.0 / points.len() as f64)
}

/// Parses the XYZ text format: `x y z` or `x y z label` per line, `#` comments.
pub fn parse_xyz(text: &str, name: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (t, f) in fields[..3].iter().enumerate() {
            p[t] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad coordinate {:?}: {}", f, e),
            })?;
            if !p[t].is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite coordinate {:?}", f),
                });
            }
        }
        let has_label = fields.len() == 4;
        match labelled {
            None => labelled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(Error::Format(format!(
                    "line {} mixes labelled and unlabelled points",
                    lineno
                )))
            }
            _ => {}
        }
        if has_label {
            let l = match fields[3] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("label must be 0 or 1, found {:?}", other),
                    })
                }
            };
            labels.push(l);
        }
        points.push(p);
    }
    let labels = (labelled == Some(true)).then_some(labels);
    PointCloud::new(points, labels, name)
}

/// Renders the XYZ text format. Coordinates use the shortest representation
/// that parses back to the identical `f64`.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        if let Some(l) = &cloud.labels {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_xyz(&text, &name)
}

pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_xyz(cloud))?;
    Ok(())
}

/// Translates the centroid to the origin and scales the farthest point to norm 1.
pub fn center_unit_scale(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let mut points: Vec<Vec3> = cloud.points.iter().map(|&p| sub(p, c)).collect();
    let r = points.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::Degenerate("all points are identical".into()));
    }
    for p in &mut points {
        *p = scale(*p, 1.0 / r);
    }
    Ok(PointCloud {
        points,
        labels: cloud.labels.clone(),
        name: cloud.name.clone(),
    })
}

/// Every other point ordered by `(distance, index)`.
pub fn sorted_neighbors(points: &[Vec3], i: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &p)| (dist2(points[i], p), j))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, j)| j).collect()
}

/// The `k` nearest neighbours of each point, self excluded, sorted by
/// `(distance, index)`.
pub fn knn(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if k == 0 || k + 1 > n {
        return Err(Error::Contract(format!(
            "k = {} must lie in 1..={} for {} points",
            k,
            n.saturating_sub(1),
            n
        )));
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut rows = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        buf.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &p)| (dist2(points[i], p), j)),
        );
        if k < buf.len() {
            buf.select_nth_unstable_by(k, cmp);
            buf.truncate(k);
        }
        buf.sort_unstable_by(cmp);
        rows.push(buf.iter().map(|&(_, j)| j).collect());
    }
    Ok(rows)
}

/// Patch features `[N, k, 2, 3]`: `(x_j - x_i, x_i)` for each neighbour `j` of `i`.
pub fn nn_embedding(points: &[Vec3], k: usize) -> Result<Tensor> {
    let nbrs = knn(points, k)?;
    Ok(embed_neighbors(points, &nbrs))
}

pub fn embed_neighbors(points: &[Vec3], nbrs: &[Vec<usize>]) -> Tensor {
    let n = points.len();
    let k = nbrs.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(n * k * 6);
    for (i, row) in nbrs.iter().enumerate() {
        for &j in row {
            data.extend_from_slice(&sub(points[j], points[i]));
            data.extend_from_slice(&points[i]);
        }
    }
    Tensor::new(vec![n, k, 2, 3], data).expect("embedding shape")
}

/// An orthogonal 3x3 matrix with its determinant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformO3 {
    pub matrix: [[f64; 3]; 3],
    pub det: f64,
}

impl TransformO3 {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            det: 1.0,
        }
    }

    /// Validates orthogonality (within 1e-12) and derives the determinant.
    pub fn from_matrix(matrix: [[f64; 3]; 3]) -> Result<Self> {
        let mut worst = 0.0f64;
        for a in 0..3 {
            for b in 0..3 {
                let g = dot(matrix[a], matrix[b]);
                worst = worst.max((g - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        if worst > 1e-12 {
            return Err(Error::Contract(format!(
                "matrix is not orthogonal (error {:.3e})",
                worst
            )));
        }
        let det = dot(matrix[0], cross(matrix[1], matrix[2]));
        Ok(Self {
            matrix,
            det: det.signum(),
        })
    }

    /// Reflection across the plane through the origin with normal `n`.
    pub fn mirror(n: Vec3) -> Self {
        let u = scale(n, 1.0 / norm(n));
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = if a == b { 1.0 } else { 0.0 } - 2.0 * u[a] * u[b];
            }
        }
        Self { matrix: m, det: -1.0 }
    }

    pub fn is_proper(&self) -> bool {
        self.det > 0.0
    }

    pub fn transpose(&self) -> Self {
        let m = self.matrix;
        Self {
            matrix: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
            det: self.det,
        }
    }

    /// `self` followed by `other` (row-vector convention: `M_self * M_other`).
    pub fn then(&self, other: &TransformO3) -> Self {
        let (a, b) = (self.matrix, other.matrix);
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|t| a[i][t] * b[t][j]).sum();
            }
        }
        Self {
            matrix: m,
            det: self.det * other.det,
        }
    }

    /// Row vector times matrix.
    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = self.matrix;
        [
            v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
            v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
            v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
        ]
    }

    pub fn trace(&self) -> f64 {
        self.matrix[0][0] + self.matrix[1][1] + self.matrix[2][2]
    }

    /// Applies the transform to every trailing 3-vector of a tensor.
    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        assert_eq!(t.shape().last(), Some(&3), "trailing axis must be 3");
        let mut out = t.clone();
        for chunk in out.data_mut().chunks_mut(3) {
            let v = self.apply([chunk[0], chunk[1], chunk[2]]);
            chunk.copy_from_slice(&v);
        }
        out
    }
}

/// Haar-uniform rotation from a normalised Gaussian quaternion, composed
/// with `diag(-1, 1, 1)` when `improper`.
pub fn random_o3(seed: u64, improper: bool) -> TransformO3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_o3_with(&mut rng, improper)
}

pub fn random_o3_with<R: rand::Rng + ?Sized>(rng: &mut R, improper: bool) -> TransformO3 {
    let mut q = [0.0f64; 4];
    let mut len = 0.0;
    while len < 1e-6 {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let [w, x, y, z] = q.map(|v| v / len);
    // Column-vector rotation matrix of the quaternion; its transpose acts on rows.
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let rot = TransformO3 { matrix: r, det: 1.0 }.transpose();
    if improper {
        TransformO3::mirror([1.0, 0.0, 0.0]).then(&rot)
    } else {
        rot
    }
}

/// `points * M`, labels kept.
pub fn apply_transform(cloud: &PointCloud, t: &TransformO3) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| t.apply(p)).collect(),
        labels: cloud.labels.clone(),
        name: cloud.name.clone(),
    }
}

/// Largest distance from a mirrored point (plane through the origin with
/// normal `n`) to its nearest point in the cloud.
pub fn mirror_residual(points: &[Vec3], n: Vec3) -> f64 {
    let m = TransformO3::mirror(n);
    points
        .iter()
        .map(|&p| {
            let q = m.apply(p);
            points
                .iter()
                .map(|&r| dist2(q, r))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max)
}
