//! Point-cloud preprocessing: random downsampling, centering and the
//! null point that hosts landmarks of absent teeth.

use rand::seq::index;
use rand::Rng;

pub type Point = [f64; 3];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    Empty,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("downsampling target must be at least 1")]
    ZeroTarget,
    #[error("point cloud already ends with a null point")]
    NullAlreadyPresent,
    #[error("operation requires a cloud without a null point")]
    UnexpectedNull,
    #[error("point cloud has zero extent; the null point would coincide with the data")]
    ZeroExtent,
    #[error("last point does not match the null point computed from the others")]
    NullMismatch,
}

/// Ordered points in millimeters. When `has_null` is set the last point is
/// the null point of the preceding ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    has_null: bool,
}

impl PointCloud {
    /// A cloud of mesh points only.
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        check_finite(&points)?;
        Ok(Self { points, has_null: false })
    }

    /// A cloud whose last point is claimed to be the null point; the claim
    /// is verified to within 1e-9 mm.
    pub fn with_null(points: Vec<Point>) -> Result<Self, GeometryError> {
        check_finite(&points)?;
        let Some((last, mesh)) = points.split_last() else {
            return Err(GeometryError::Empty);
        };
        if mesh.is_empty() {
            return Err(GeometryError::Empty);
        }
        let expected = compute_null_point(mesh)?;
        if distance(last, &expected) > 1e-9 {
            return Err(GeometryError::NullMismatch);
        }
        Ok(Self { points, has_null: true })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn has_null(&self) -> bool {
        self.has_null
    }

    /// Total number of points including the null point.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points excluding the null point.
    pub fn mesh_points(&self) -> &[Point] {
        if self.has_null {
            &self.points[..self.points.len() - 1]
        } else {
            &self.points
        }
    }

    /// Index of the null point, if present.
    pub fn null_index(&self) -> Option<usize> {
        self.has_null.then(|| self.points.len() - 1)
    }

    pub fn null_point(&self) -> Option<Point> {
        self.null_index().map(|i| self.points[i])
    }
}

fn check_finite(points: &[Point]) -> Result<(), GeometryError> {
    match points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(index) => Err(GeometryError::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    distance_sq(a, b).sqrt()
}

pub fn distance_sq(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub fn centroid(points: &[Point]) -> Result<Point, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty);
    }
    let mut sum = [0.0; 3];
    for p in points {
        for a in 0..3 {
            sum[a] += p[a];
        }
    }
    let n = points.len() as f64;
    Ok([sum[0] / n, sum[1] / n, sum[2] / n])
}

/// Axis-aligned bounding box as `(min, max)` corners.
pub fn bounding_box(points: &[Point]) -> Result<(Point, Point), GeometryError> {
    let first = points.first().ok_or(GeometryError::Empty)?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Ok((lo, hi))
}

/// Random subset of `n` points, uniform without replacement. A cloud with
/// fewer than `n` points keeps every original and is padded by resampling
/// with replacement.
pub fn downsample<R: Rng + ?Sized>(pc: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud, GeometryError> {
    if pc.has_null {
        return Err(GeometryError::UnexpectedNull);
    }
    if pc.is_empty() {
        return Err(GeometryError::Empty);
    }
    if n == 0 {
        return Err(GeometryError::ZeroTarget);
    }
    let src = &pc.points;
    let points = if src.len() >= n {
        index::sample(rng, src.len(), n).into_iter().map(|i| src[i]).collect()
    } else {
        let mut out = src.clone();
        out.extend((0..n - src.len()).map(|_| src[rng.random_range(0..src.len())]));
        out
    };
    Ok(PointCloud { points, has_null: false })
}

/// Translate so the centroid is at the origin; returns the removed centroid.
pub fn center(pc: &PointCloud) -> Result<(PointCloud, Point), GeometryError> {
    if pc.has_null {
        return Err(GeometryError::UnexpectedNull);
    }
    let c = centroid(&pc.points)?;
    let points = pc.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    Ok((PointCloud { points, has_null: false }, c))
}

/// `c + (m_b / 2)·(0, 1, 0)` with `c` the centroid and `m_b` the largest
/// bounding-box extent.
pub fn compute_null_point(points: &[Point]) -> Result<Point, GeometryError> {
    let c = centroid(points)?;
    let m_b = max_extent(points)?;
    Ok([c[0], c[1] + m_b / 2.0, c[2]])
}

/// Largest side of the axis-aligned bounding box.
pub fn max_extent(points: &[Point]) -> Result<f64, GeometryError> {
    let (lo, hi) = bounding_box(points)?;
    Ok((0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max))
}

pub fn append_null(pc: &PointCloud) -> Result<PointCloud, GeometryError> {
    if pc.has_null {
        return Err(GeometryError::NullAlreadyPresent);
    }
    if max_extent(&pc.points)? == 0.0 {
        return Err(GeometryError::ZeroExtent);
    }
    let mut points = pc.points.clone();
    points.push(compute_null_point(&pc.points)?);
    Ok(PointCloud { points, has_null: true })
}

/// A network-ready cloud and the translation that was removed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub cloud: PointCloud,
    pub centroid: Point,
}

/// Center, downsample to `n` mesh points and append the null point.
pub fn preprocess<R: Rng + ?Sized>(raw: &PointCloud, n: usize, rng: &mut R) -> Result<Preprocessed, GeometryError> {
    let (centered, centroid) = center(raw)?;
    let sampled = downsample(&centered, n, rng)?;
    Ok(Preprocessed {
        cloud: append_null(&sampled)?,
        centroid,
    })
}
