//! Planar symmetry detection from distance shells and directed cross products.
//!
//! For every point the remaining points are ranked by distance and cut into
//! `n` consecutive shells. Each shell contributes the mean displacement from
//! the point (its shell vector); crossing nearer shell vectors with further
//! ones and averaging gives the point's cross vector, and the mean over all
//! points is the estimate. On a cloud with a single mirror plane the
//! in-plane components cancel between mirrored points, leaving a vector
//! along the plane normal. With two or more planes the estimate vanishes.
//!
//! Cross products are pseudovectors: under `p -> p * R` the estimate maps to
//! `det(R) * (c * R)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, cross, dot, norm, scale, sorted_neighbors, sub, Vec3};

/// Default shell count.
pub const DEFAULT_SHELLS: usize = 4;

/// Relative threshold under which the averaged cross vector counts as zero.
pub const ZERO_TOLERANCE: f64 = 1e-9;

/// Projections smaller than this put a point on the classifier plane.
pub const ON_PLANE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ShellDecomposition {
    /// `shells[i][j]` lists the members of shell `j` around point `i`, nearest first.
    pub shells: Vec<Vec<Vec<usize>>>,
    /// `vectors[i][j]`: mean of `member - x_i` over shell `j`.
    pub vectors: Vec<Vec<Vec3>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryEstimate {
    pub per_point: Vec<Vec3>,
    pub direction: Vec3,
    /// `None` when the estimate is below the zero threshold (several planes
    /// or an isotropic cloud).
    pub unit_direction: Option<Vec3>,
    pub magnitude: f64,
    pub n_shells: usize,
}

impl SymmetryEstimate {
    pub fn is_degenerate(&self) -> bool {
        self.unit_direction.is_none()
    }
}

/// Index ranges of the `n` shells over `others` ranked neighbours. Each shell
/// has `others / n` members; the remainder joins the outermost shell.
pub fn shell_ranges(others: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let size = others / n;
    (0..n)
        .map(|j| j * size..if j + 1 == n { others } else { (j + 1) * size })
        .collect()
}

fn check_shells(points: &[Vec3], n: usize) -> Result<()> {
    if points.len() < 3 || n < 2 || n + 1 > points.len() {
        return Err(Error::Contract(format!(
            "shell count {} must lie in 2..={} for {} points",
            n,
            points.len().saturating_sub(1),
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("point coordinates must be finite".into()));
    }
    Ok(())
}

fn vectors_for(points: &[Vec3], i: usize, ranked: &[usize], ranges: &[std::ops::Range<usize>]) -> Vec<Vec3> {
    ranges
        .iter()
        .map(|r| {
            let mut acc = [0.0; 3];
            for &m in &ranked[r.clone()] {
                let d = sub(points[m], points[i]);
                for t in 0..3 {
                    acc[t] += d[t];
                }
            }
            scale(acc, 1.0 / r.len() as f64)
        })
        .collect()
}

pub fn shell_vectors(points: &[Vec3], n: usize) -> Result<ShellDecomposition> {
    check_shells(points, n)?;
    let ranges = shell_ranges(points.len() - 1, n);
    let mut shells = Vec::with_capacity(points.len());
    let mut vectors = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let ranked = sorted_neighbors(points, i);
        vectors.push(vectors_for(points, i, &ranked, &ranges));
        shells.push(ranges.iter().map(|r| ranked[r.clone()].to_vec()).collect());
    }
    Ok(ShellDecomposition { shells, vectors })
}

/// Mean of `v_j x v_k` over all pairs `j < k`.
pub fn cross_features(vectors: &[Vec3]) -> Vec3 {
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for j in 0..vectors.len() {
        for k in j + 1..vectors.len() {
            let c = cross(vectors[j], vectors[k]);
            for t in 0..3 {
                acc[t] += c[t];
            }
            count += 1;
        }
    }
    if count == 0 {
        return [0.0; 3];
    }
    scale(acc, 1.0 / count as f64)
}

/// Averaged cross vector of the cloud.
pub fn planar_symmetry_direction(points: &[Vec3], n: usize) -> Result<SymmetryEstimate> {
    check_shells(points, n)?;
    let ranges = shell_ranges(points.len() - 1, n);
    let per_point: Vec<Vec3> = (0..points.len())
        .map(|i| {
            let ranked = sorted_neighbors(points, i);
            cross_features(&vectors_for(points, i, &ranked, &ranges))
        })
        .collect();
    let direction = centroid(&per_point);
    let magnitude = norm(direction);

    // Cross vectors scale with squared length.
    let c = centroid(points);
    let extent = points.iter().map(|&p| norm(sub(p, c))).fold(0.0, f64::max);
    let threshold = ZERO_TOLERANCE * extent * extent;
    let unit_direction = (magnitude > threshold).then(|| scale(direction, 1.0 / magnitude));
    Ok(SymmetryEstimate {
        per_point,
        direction,
        unit_direction,
        magnitude,
        n_shells: n,
    })
}

/// Signed distances of the points to the plane through the origin normal to `direction`.
pub fn plane_projections(points: &[Vec3], direction: Vec3) -> Result<Vec<f64>> {
    let n = norm(direction);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("symmetry direction is zero".into()));
    }
    let u = scale(direction, 1.0 / n);
    Ok(points.iter().map(|&p| dot(p, u)).collect())
}

/// Labels points by the side of the plane through the origin normal to
/// `direction`: 1 on the positive side, 0 otherwise (including on-plane points).
pub fn plane_classifier(points: &[Vec3], direction: Vec3) -> Result<Vec<u8>> {
    let c = centroid(points);
    if norm(c) >= 1e-9 {
        return Err(Error::Contract(format!(
            "plane classifier needs a centred cloud (centroid norm {:.3e})",
            norm(c)
        )));
    }
    Ok(plane_projections(points, direction)?
        .into_iter()
        .map(|d| u8::from(d > 0.0 && d.abs() >= ON_PLANE_TOLERANCE))
        .collect())
}

/// `max(acc, 1 - acc)`: the estimated normal has no canonical sign.
pub fn accuracy_best_sign(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Contract("no labels to score".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    let acc = hits as f64 / predicted.len() as f64;
    Ok(acc.max(1.0 - acc))
}

/// Output of [`segment_by_plane`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSegmentation {
    pub estimate: SymmetryEstimate,
    pub labels: Vec<u8>,
    pub on_plane: Vec<bool>,
    /// Best-sign accuracy over off-plane points, when ground truth was given.
    pub accuracy: Option<f64>,
}

/// Estimates the symmetry normal of a centred cloud and splits it by the
/// plane through the origin.
pub fn segment_by_plane(points: &[Vec3], truth: Option<&[u8]>, n: usize) -> Result<PlaneSegmentation> {
    if let Some(t) = truth {
        if t.len() != points.len() {
            return Err(Error::Contract(format!("{} labels for {} points", t.len(), points.len())));
        }
    }
    let estimate = planar_symmetry_direction(points, n)?;
    let Some(u) = estimate.unit_direction else {
        return Err(Error::Degenerate(format!(
            "cross vector magnitude {:.3e} is below threshold: the cloud has several symmetry planes or none",
            estimate.magnitude
        )));
    };
    let labels = plane_classifier(points, u)?;
    let on_plane: Vec<bool> = plane_projections(points, u)?
        .into_iter()
        .map(|d| d.abs() < ON_PLANE_TOLERANCE)
        .collect();
    let accuracy = match truth {
        Some(t) => {
            let (p, t): (Vec<u8>, Vec<u8>) = labels
                .iter()
                .zip(t)
                .zip(&on_plane)
                .filter(|(_, &on)| !on)
                .map(|((&p, &t), _)| (p, t))
                .unzip();
            Some(accuracy_best_sign(&p, &t)?)
        }
        None => None,
    };
    Ok(PlaneSegmentation {
        estimate,
        labels,
        on_plane,
        accuracy,
    })
}
