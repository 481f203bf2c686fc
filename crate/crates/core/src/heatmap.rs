//! Gaussian ground-truth heatmaps, presence conditioning and argmax
//! decoding of landmark positions.

use crate::dental::DentalAnnotation;
use crate::geometry::{distance_sq, Point, PointCloud};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HeatmapError {
    #[error("heatmap width must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("point cloud has no null point")]
    MissingNull,
    #[error("presence probability {value} at tooth {tooth} outside [0, 1]")]
    InvalidProbability { tooth: usize, value: f64 },
    #[error("{landmarks} landmark rows cannot be split evenly over {teeth} teeth")]
    TeethMismatch { landmarks: usize, teeth: usize },
    #[error("expected a {expected:?} heatmap set, got {actual:?}")]
    WrongKind { expected: HeatmapKind, actual: HeatmapKind },
    #[error("heatmap has {columns} columns but the cloud has {points} points")]
    ColumnMismatch { columns: usize, points: usize },
    #[error("heatmap data length {len} does not match {landmarks}x{points}")]
    Shape { len: usize, landmarks: usize, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    GroundTruth,
    Raw,
    Conditioned,
}

/// Per-landmark likelihoods over the points of a cloud: one row per
/// landmark, one column per point, the null point last.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    kind: HeatmapKind,
    landmarks: usize,
    points: usize,
    values: Vec<f64>,
}

impl HeatmapSet {
    /// Landmark-major (`landmarks × points`) values.
    pub fn new(kind: HeatmapKind, landmarks: usize, points: usize, values: Vec<f64>) -> Result<Self, HeatmapError> {
        if values.len() != landmarks * points {
            return Err(HeatmapError::Shape {
                len: values.len(),
                landmarks,
                points,
            });
        }
        Ok(Self {
            kind,
            landmarks,
            points,
            values,
        })
    }

    /// From point-major (`points × landmarks`) values, the layout the
    /// network produces.
    pub fn from_point_major(
        kind: HeatmapKind,
        landmarks: usize,
        points: usize,
        values: &[f64],
    ) -> Result<Self, HeatmapError> {
        if values.len() != landmarks * points {
            return Err(HeatmapError::Shape {
                len: values.len(),
                landmarks,
                points,
            });
        }
        let mut out = vec![0.0; values.len()];
        for i in 0..points {
            for k in 0..landmarks {
                out[k * points + i] = values[i * landmarks + k];
            }
        }
        Self::new(kind, landmarks, points, out)
    }

    /// Point-major copy of the values.
    pub fn to_point_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for k in 0..self.landmarks {
            for i in 0..self.points {
                out[i * self.landmarks + k] = self.values[k * self.points + i];
            }
        }
        out
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row of landmark `k` (zero-based).
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.points..(k + 1) * self.points]
    }
}

/// `exp(−d²/(2σ²))` for a squared distance `d²`.
pub fn gaussian(dist_sq: f64, sigma: f64) -> f64 {
    (-dist_sq / (2.0 * sigma * sigma)).exp()
}

/// Ground-truth heatmaps for explicit per-landmark targets: `Some(l)` for a
/// landmark at `l`, `None` for a landmark of an absent tooth, which targets
/// the null point.
pub fn gt_heatmaps_for(pc: &PointCloud, targets: &[Option<Point>], sigma: f64) -> Result<HeatmapSet, HeatmapError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(HeatmapError::InvalidSigma(sigma));
    }
    let null = pc.null_point().ok_or(HeatmapError::MissingNull)?;
    let points = pc.points();
    let mut values = Vec::with_capacity(targets.len() * points.len());
    for target in targets {
        let l = target.unwrap_or(null);
        values.extend(points.iter().map(|p| gaussian(distance_sq(p, &l), sigma)));
    }
    HeatmapSet::new(HeatmapKind::GroundTruth, targets.len(), points.len(), values)
}

/// Ground-truth heatmaps for all 80 landmarks of an annotation, expressed
/// in the same frame as `pc`.
pub fn gt_heatmaps(pc: &PointCloud, ann: &DentalAnnotation, sigma: f64) -> Result<HeatmapSet, HeatmapError> {
    gt_heatmaps_for(pc, &annotation_targets(ann), sigma)
}

/// Per-landmark targets of an annotation in landmark-index order.
pub fn annotation_targets(ann: &DentalAnnotation) -> Vec<Option<Point>> {
    ann.teeth
        .iter()
        .flat_map(|tooth| match tooth {
            Some(lm) => lm.map(Some),
            None => [None; crate::dental::LANDMARKS_PER_TOOTH],
        })
        .collect()
}

/// Scale mesh columns of every row of tooth `t` by `p_t` and the null
/// column by `1 − p_t`.
pub fn char_condition(raw: &HeatmapSet, presence: &[f64]) -> Result<HeatmapSet, HeatmapError> {
    if raw.kind != HeatmapKind::Raw {
        return Err(HeatmapError::WrongKind {
            expected: HeatmapKind::Raw,
            actual: raw.kind,
        });
    }
    if presence.is_empty() || raw.landmarks % presence.len() != 0 {
        return Err(HeatmapError::TeethMismatch {
            landmarks: raw.landmarks,
            teeth: presence.len(),
        });
    }
    if let Some((tooth, &value)) = presence.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(HeatmapError::InvalidProbability { tooth: tooth + 1, value });
    }
    let per_tooth = raw.landmarks / presence.len();
    let n = raw.points;
    let mut values = raw.values.clone();
    for k in 0..raw.landmarks {
        let p = presence[k / per_tooth];
        let row = &mut values[k * n..(k + 1) * n];
        let (mesh, null) = row.split_at_mut(n - 1);
        mesh.iter_mut().for_each(|v| *v *= p);
        null[0] *= 1.0 - p;
    }
    HeatmapSet::new(HeatmapKind::Conditioned, raw.landmarks, n, values)
}

/// Argmax decoding of every heatmap row.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub positions: Vec<Point>,
    /// `true` when the argmax is a mesh point rather than the null point.
    pub in_mesh: Vec<bool>,
    pub indices: Vec<usize>,
}

/// Position of the first maximum of each row; a maximum at the null point
/// marks the landmark as absent from the mesh.
pub fn decode_landmarks(h: &HeatmapSet, pc: &PointCloud) -> Result<Decoded, HeatmapError> {
    if h.points != pc.len() {
        return Err(HeatmapError::ColumnMismatch {
            columns: h.points,
            points: pc.len(),
        });
    }
    let null = pc.null_index().ok_or(HeatmapError::MissingNull)?;
    let mut out = Decoded {
        positions: Vec::with_capacity(h.landmarks),
        in_mesh: Vec::with_capacity(h.landmarks),
        indices: Vec::with_capacity(h.landmarks),
    };
    for k in 0..h.landmarks {
        let i = argmax(h.row(k));
        out.positions.push(pc.points()[i]);
        out.in_mesh.push(i != null);
        out.indices.push(i);
    }
    Ok(out)
}

/// Index of the first maximal element. NaN entries never win.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dental::Arch;
    use crate::geometry::append_null;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cloud() -> PointCloud {
        append_null(&PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 20.0], [30.0, 0.0, 0.0]]).unwrap())
            .unwrap()
    }

    fn raw_row(mesh: &[f64], null: f64) -> HeatmapSet {
        let mut v = mesh.to_vec();
        v.push(null);
        HeatmapSet::new(HeatmapKind::Raw, 1, v.len(), v).unwrap()
    }

    #[test]
    fn gaussian_values() {
        let pc = small_cloud();
        let h = gt_heatmaps_for(&pc, &[Some([0.0, 0.0, 0.0])], 2.0).unwrap();
        assert_eq!(h.row(0)[0], 1.0);
        assert!((h.row(0)[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((h.row(0)[1] - 0.60653).abs() < 1e-5);
        assert_eq!(gt_heatmaps_for(&pc, &[None], 0.0), Err(HeatmapError::InvalidSigma(0.0)));
        let bare = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert_eq!(gt_heatmaps_for(&bare, &[None], 2.0), Err(HeatmapError::MissingNull));
    }

    #[test]
    fn absent_tooth_rows_peak_at_null() {
        let pc = small_cloud();
        let mut ann = DentalAnnotation {
            model_id: "m".into(),
            patient_id: "p".into(),
            arch: Arch::Lower,
            teeth: [Some([[1.0, 0.0, 0.0]; 5]); 16],
        };
        ann.teeth[3] = None;
        let h = gt_heatmaps(&pc, &ann, 2.0).unwrap();
        assert_eq!(h.landmarks(), 80);
        let null = pc.null_index().unwrap();
        let null_pt = pc.null_point().unwrap();
        for k in 15..20 {
            assert_eq!(h.row(k)[null], 1.0);
            for (i, p) in pc.mesh_points().iter().enumerate() {
                if distance_sq(p, &null_pt).sqrt() > 10.5 {
                    assert!(h.row(k)[i] < 1e-6);
                }
            }
        }
        assert!(h.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn condition_examples() {
        let off = char_condition(&raw_row(&[0.2, 0.9], 0.5), &[0.0]).unwrap();
        assert_eq!(off.values(), &[0.0, 0.0, 0.5]);
        assert_eq!(argmax(off.row(0)), 2);
        let on = char_condition(&raw_row(&[0.2, 0.9], 0.5), &[1.0]).unwrap();
        assert_eq!(on.values(), &[0.2, 0.9, 0.0]);
        assert_eq!(argmax(on.row(0)), 1);
        let half = char_condition(&raw_row(&[0.2, 0.9], 0.5), &[0.5]).unwrap();
        assert_eq!(half.values(), &[0.1, 0.45, 0.25]);
        assert_eq!(half.kind(), HeatmapKind::Conditioned);

        assert!(matches!(
            char_condition(&raw_row(&[0.2], 0.5), &[1.5]),
            Err(HeatmapError::InvalidProbability { tooth: 1, .. })
        ));
        assert!(matches!(char_condition(&half, &[0.5]), Err(HeatmapError::WrongKind { .. })));
        let two = HeatmapSet::new(HeatmapKind::Raw, 3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(char_condition(&two, &[0.5, 0.5]), Err(HeatmapError::TeethMismatch { .. })));
    }

    #[test]
    fn decode_examples() {
        let pc = small_cloud();
        let n = pc.len();
        let mut v = vec![0.0; 2 * n];
        v[2] = 1.0;
        v[n + n - 1] = 1.0;
        let h = HeatmapSet::new(HeatmapKind::Raw, 2, n, v).unwrap();
        let d = decode_landmarks(&h, &pc).unwrap();
        assert_eq!(d.positions[0], pc.points()[2]);
        assert!(d.in_mesh[0]);
        assert_eq!(d.positions[1], pc.null_point().unwrap());
        assert!(!d.in_mesh[1]);
        let short = HeatmapSet::new(HeatmapKind::Raw, 1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(decode_landmarks(&short, &pc), Err(HeatmapError::ColumnMismatch { .. })));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[0.3, 0.3]), 0);
        assert_eq!(argmax(&[f64::NAN, 0.1]), 1);
    }

    #[test]
    fn layout_round_trip() {
        let pm: Vec<f64> = (0..12).map(f64::from).collect();
        let h = HeatmapSet::from_point_major(HeatmapKind::Raw, 3, 4, &pm).unwrap();
        assert_eq!(h.row(1), &[1.0, 4.0, 7.0, 10.0]);
        assert_eq!(h.to_point_major(), pm);
    }

    #[test]
    fn conditioning_with_all_ones_only_zeroes_null_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..10 * 7).map(|_| rng.random_range(0.0..1.0)).collect();
        let raw = HeatmapSet::new(HeatmapKind::Raw, 10, 7, v).unwrap();
        let c = char_condition(&raw, &[1.0, 1.0]).unwrap();
        for k in 0..10 {
            assert_eq!(&c.row(k)[..6], &raw.row(k)[..6]);
            assert_eq!(c.row(k)[6], 0.0);
        }
    }
}
