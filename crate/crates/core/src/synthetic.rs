//! Seeded generator of dental-arch point clouds with exact landmarks.
//!
//! Frame: the arch lies in the xy-plane with incisors toward +y and crowns
//! pointing up (+z). Teeth of the patient's right side sit at negative x.
//! Each present tooth is a superellipsoid crown cut at the gingival ridge,
//! which is a half-elliptic tube running along a parabolic arch curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dental::{
    classify_dentition, Arch, DentalAnnotation, DentitionType, Presence, ToothLandmarks, NUM_TEETH,
};
use crate::geometry::{bounding_box, compute_null_point, distance, Point, PointCloud};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SyntheticError {
    #[error("at least 2 teeth must be present, got {0}")]
    TooFewTeeth(usize),
    #[error("invalid generator setting: {0}")]
    InvalidSpec(String),
    #[error("{count} samples cannot cover {types} requested dentition types")]
    TooFewSamples { count: usize, types: usize },
    #[error("dentition mix must be non-negative and sum to 1 (sum {0})")]
    InvalidMix(f64),
    #[error("generated arch violates an invariant: {0}")]
    Invariant(String),
}

/// Everything needed to generate one arch.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub arch: Arch,
    /// Indexed by `t − 1`.
    pub presence: Presence,
    /// Standard deviation of per-axis crown size perturbations, mm.
    pub size_jitter: f64,
    /// Standard deviation of crown center displacements, mm.
    pub position_jitter: f64,
    /// Distance between the distal ends of the two third-molar slots, mm.
    pub arch_width: f64,
    /// Distance from the molar line to the incisors, mm.
    pub arch_depth: f64,
    pub points_per_tooth: usize,
    pub gingiva_points: usize,
    /// Standard deviation of isotropic Gaussian point noise, mm.
    pub noise_sigma: f64,
    pub seed: u64,
    pub model_id: String,
    pub patient_id: String,
}

impl ArchSpec {
    /// Full dentition with default sizes and densities.
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            arch,
            presence: [true; NUM_TEETH],
            size_jitter: 0.3,
            position_jitter: 0.3,
            arch_width: 55.0,
            arch_depth: 45.0,
            points_per_tooth: 1200,
            gingiva_points: 3000,
            noise_sigma: 0.02,
            seed,
            model_id: format!("model-{seed}"),
            patient_id: format!("patient-{seed}"),
        }
    }

    /// Left/right mirror image of the specification.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        out.presence = std::array::from_fn(|i| self.presence[NUM_TEETH - 1 - i]);
        out
    }
}

/// A generated arch: raw cloud (no null point) and its exact annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub cloud: PointCloud,
    pub annotation: DentalAnnotation,
}

impl GeneratedSample {
    pub fn dentition_type(&self) -> DentitionType {
        self.annotation.dentition_type()
    }
}

/// Nominal (mesiodistal, buccolingual, crown height) in mm for positions 1..=8.
const UPPER_DIMS: [[f64; 3]; 8] = [
    [8.5, 7.0, 10.0],
    [6.5, 6.0, 9.0],
    [7.5, 8.0, 10.0],
    [7.0, 9.0, 8.0],
    [6.5, 9.0, 7.5],
    [10.0, 11.0, 7.0],
    [9.0, 10.5, 6.5],
    [8.5, 10.0, 6.0],
];
const LOWER_DIMS: [[f64; 3]; 8] = [
    [5.0, 6.0, 9.0],
    [5.5, 6.0, 9.0],
    [6.5, 7.5, 10.0],
    [7.0, 7.5, 8.0],
    [7.0, 8.0, 7.5],
    [11.0, 10.5, 7.0],
    [10.5, 10.0, 6.5],
    [10.0, 9.5, 6.0],
];

/// Superellipsoid exponent of the crowns.
const CROWN_EXPONENT: f64 = 2.6;
/// The crown is cut at this fraction of its vertical semi-axis below center.
const CUT: f64 = 0.4;
/// The cut sits this far below the ridge top, so crowns emerge from the gum.
const SINK: f64 = 0.8;
/// Gingival tube half-width and height, mm.
const GUM_HALF_WIDTH: f64 = 6.5;
const GUM_HEIGHT: f64 = 3.0;

/// Parabolic arch curve `y = D·(1 − (x/a)²)` for `x ≥ 0`, parameterized by
/// arc length from the midline via a dense lookup table.
struct ArchCurve {
    a: f64,
    depth: f64,
    xs: Vec<f64>,
    lengths: Vec<f64>,
}

impl ArchCurve {
    fn new(half_width: f64, depth: f64) -> Self {
        let steps = 4000;
        let reach = half_width * 1.15;
        let mut xs = Vec::with_capacity(steps + 1);
        let mut lengths = Vec::with_capacity(steps + 1);
        let mut s = 0.0;
        let mut prev = [0.0, depth];
        for i in 0..=steps {
            let x = reach * i as f64 / steps as f64;
            let p = [x, depth * (1.0 - (x / half_width).powi(2))];
            s += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            prev = p;
            xs.push(x);
            lengths.push(s);
        }
        Self {
            a: half_width,
            depth,
            xs,
            lengths,
        }
    }

    fn length_to(&self, x: f64) -> f64 {
        let i = self.xs.partition_point(|&v| v < x).min(self.xs.len() - 1);
        self.lengths[i]
    }

    fn x_at(&self, s: f64) -> f64 {
        let i = self.lengths.partition_point(|&v| v < s);
        if i == 0 {
            return 0.0;
        }
        if i >= self.lengths.len() {
            return *self.xs.last().expect("non-empty");
        }
        let (s0, s1) = (self.lengths[i - 1], self.lengths[i]);
        let f = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        self.xs[i - 1] + f * (self.xs[i] - self.xs[i - 1])
    }

    /// Point, distal tangent and facial normal at arc length `s ≥ 0`.
    fn frame(&self, s: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let x = self.x_at(s);
        let slope = -2.0 * self.depth * x / (self.a * self.a);
        let norm = (1.0 + slope * slope).sqrt();
        let tangent = [1.0 / norm, slope / norm];
        let normal = [-slope / norm, 1.0 / norm];
        ([x, self.depth * (1.0 - (x / self.a).powi(2))], tangent, normal)
    }
}

/// Crown of one tooth in world coordinates for the patient's left side;
/// right-side teeth are the mirror image.
struct Crown {
    center: Point,
    u: [f64; 2],
    v: [f64; 2],
    radii: [f64; 3],
}

impl Crown {
    fn to_world(&self, local: [f64; 3]) -> Point {
        [
            self.center[0] + local[0] * self.u[0] + local[1] * self.v[0],
            self.center[1] + local[0] * self.u[1] + local[1] * self.v[1],
            self.center[2] + local[2],
        ]
    }

    /// Superellipsoid level-set value of a local point.
    fn level(&self, local: [f64; 3]) -> f64 {
        (0..3).map(|i| (local[i] / self.radii[i]).abs().powf(CROWN_EXPONENT)).sum()
    }

    fn to_local(&self, p: Point) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        [
            d[0] * self.u[0] + d[1] * self.u[1],
            d[0] * self.v[0] + d[1] * self.v[1],
            p[2] - self.center[2],
        ]
    }

    fn contains(&self, p: Point) -> bool {
        let l = self.to_local(p);
        l[2] >= -CUT * self.radii[2] - 1e-9 && self.level(l) < 1.0
    }

    fn landmarks(&self) -> ToothLandmarks {
        let [ru, rv, rw] = self.radii;
        let cut = -CUT * rw;
        // Half-width of the cross-section at the cut along v.
        let rim = rv * (1.0 - (CUT).powf(CROWN_EXPONENT)).powf(1.0 / CROWN_EXPONENT);
        [
            self.to_world([-ru, 0.0, 0.0]),
            self.to_world([ru, 0.0, 0.0]),
            self.to_world([0.0, 0.0, rw]),
            self.to_world([0.0, rim, cut]),
            self.to_world([0.0, -rim, cut]),
        ]
    }

    /// Surface points of the exposed part, by radial projection of random
    /// directions onto the superellipsoid.
    fn sample(&self, count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
        let mut made = 0;
        while made < count {
            let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let level = self.level(d);
            if level == 0.0 {
                continue;
            }
            let scale = level.powf(-1.0 / CROWN_EXPONENT);
            let local = d.map(|c| c * scale);
            if local[2] < -CUT * self.radii[2] {
                continue;
            }
            out.push(self.to_world(local));
            made += 1;
        }
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    // SplitMix64 finalizer folded over the parts.
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn mirror_x(p: Point) -> Point {
    [-p[0], p[1], p[2]]
}

fn check_spec(spec: &ArchSpec) -> Result<(), SyntheticError> {
    let present = spec.presence.iter().filter(|&&p| p).count();
    if present < 2 {
        return Err(SyntheticError::TooFewTeeth(present));
    }
    let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
    if !(finite_nonneg(spec.size_jitter) && finite_nonneg(spec.position_jitter) && finite_nonneg(spec.noise_sigma)) {
        return Err(SyntheticError::InvalidSpec("jitters and noise must be finite and non-negative".into()));
    }
    if !(spec.arch_width > 0.0 && spec.arch_depth > 0.0 && spec.arch_width.is_finite() && spec.arch_depth.is_finite()) {
        return Err(SyntheticError::InvalidSpec("arch width and depth must be positive".into()));
    }
    if spec.points_per_tooth == 0 {
        return Err(SyntheticError::InvalidSpec("points per tooth must be positive".into()));
    }
    Ok(())
}

/// Generate one arch. Deterministic per specification.
pub fn generate_arch(spec: &ArchSpec) -> Result<GeneratedSample, SyntheticError> {
    check_spec(spec)?;
    let dims = match spec.arch {
        Arch::Upper => &UPPER_DIMS,
        Arch::Lower => &LOWER_DIMS,
    };
    let curve = ArchCurve::new(spec.arch_width / 2.0, spec.arch_depth);
    let half_length = curve.length_to(curve.a);
    let nominal: f64 = dims.iter().map(|d| d[0]).sum();
    let fit = (half_length / nominal).min(1.0);
    let arch_tag = spec.arch as u64;

    let mut points = Vec::new();
    let mut teeth = [None; NUM_TEETH];
    let mut crowns = Vec::new();
    let mut start = 0.0;
    for (pos_idx, dim) in dims.iter().enumerate() {
        let position = pos_idx as u64 + 1;
        let slot = dim[0] * fit;
        let s_center = start + slot / 2.0;
        start += slot;
        for left in [false, true] {
            let t = if left { 8 + pos_idx } else { 7 - pos_idx };
            if !spec.presence[t] {
                continue;
            }
            let side_tag = left as u64;
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, arch_tag, position, side_tag, 1]));
            let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, arch_tag, position, 2]));
            let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, arch_tag, position, side_tag, 3]));

            let gauss = |rng: &mut ChaCha8Rng, sd: f64| if sd > 0.0 { Normal::new(0.0, sd).expect("sd").sample(rng) } else { 0.0 };
            let (p, tangent, normal) = curve.frame(s_center);
            let du = gauss(&mut jitter_rng, spec.position_jitter);
            let dv = gauss(&mut jitter_rng, spec.position_jitter);
            let radii = [
                (dim[0] * fit / 2.0 + gauss(&mut jitter_rng, spec.size_jitter)).max(1.0),
                (dim[1] / 2.0 + gauss(&mut jitter_rng, spec.size_jitter)).max(1.0),
                (dim[2] / (1.0 + CUT) + gauss(&mut jitter_rng, spec.size_jitter)).max(1.5),
            ];
            let crown = Crown {
                center: [
                    p[0] + du * tangent[0] + dv * normal[0],
                    p[1] + du * tangent[1] + dv * normal[1],
                    CUT * radii[2] - SINK,
                ],
                u: tangent,
                v: normal,
                radii,
            };
            let mut cluster = Vec::with_capacity(spec.points_per_tooth + 5);
            crown.sample(spec.points_per_tooth, &mut sample_rng, &mut cluster);
            let mut landmarks = crown.landmarks();
            // Landmarks sit on surface vertices, as they would on a scanned mesh.
            cluster.extend_from_slice(&landmarks);
            if spec.noise_sigma > 0.0 {
                let noise = Normal::new(0.0, spec.noise_sigma).expect("sd");
                for q in &mut cluster {
                    for c in q.iter_mut() {
                        *c += noise.sample(&mut noise_rng);
                    }
                }
            }
            if !left {
                cluster.iter_mut().for_each(|q| *q = mirror_x(*q));
                landmarks.iter_mut().for_each(|q| *q = mirror_x(*q));
            }
            teeth[t] = Some(landmarks);
            crowns.push((crown, left));
            points.extend(cluster);
        }
    }

    sample_gingiva(spec, &curve, start, &crowns, &mut points);

    let cloud = PointCloud::new(points).map_err(|e| SyntheticError::Invariant(e.to_string()))?;
    let annotation = DentalAnnotation {
        model_id: spec.model_id.clone(),
        patient_id: spec.patient_id.clone(),
        arch: spec.arch,
        teeth,
    };
    let sample = GeneratedSample { cloud, annotation };
    verify_sample(&sample, 6.0 * spec.noise_sigma + 1e-6)?;
    Ok(sample)
}

/// Gum surface along the arch, generated in mirrored pairs and kept only
/// where no present crown occupies the space.
fn sample_gingiva(spec: &ArchSpec, curve: &ArchCurve, length: f64, crowns: &[(Crown, bool)], out: &mut Vec<Point>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, spec.arch as u64, 99]));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, spec.arch as u64, 98]));
    let inside = |p: Point| {
        crowns.iter().any(|(c, left)| {
            let q = if *left { p } else { mirror_x(p) };
            c.contains(q)
        })
    };
    let pairs = spec.gingiva_points / 2;
    let mut made = 0;
    let mut attempts = 0;
    while made < pairs && attempts < pairs * 20 {
        attempts += 1;
        let s = rng.random_range(0.0..length);
        let phi = rng.random_range(0.0..std::f64::consts::PI);
        let (p, _, normal) = curve.frame(s);
        let off = GUM_HALF_WIDTH * phi.cos();
        let z = GUM_HEIGHT * phi.sin() - GUM_HEIGHT;
        let left_pt = [p[0] + off * normal[0], p[1] + off * normal[1], z];
        let right_pt = mirror_x(left_pt);
        if inside(left_pt) || inside(right_pt) {
            continue;
        }
        let mut pair = [left_pt, right_pt];
        if spec.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, spec.noise_sigma).expect("sd");
            for q in &mut pair {
                for c in q.iter_mut() {
                    *c += noise.sample(&mut noise_rng);
                }
            }
        }
        out.extend(pair);
        made += 1;
    }
}

/// Generator-side invariants: landmarks inside the cloud's bounds up to
/// `slack`, the taxonomy consistent, and the null point clear of the cloud
/// in +y.
fn verify_sample(sample: &GeneratedSample, slack: f64) -> Result<(), SyntheticError> {
    let pts = sample.cloud.points();
    let (lo, hi) = bounding_box(pts).map_err(|e| SyntheticError::Invariant(e.to_string()))?;
    for lm in sample.annotation.teeth.iter().flatten() {
        for l in lm {
            if (0..3).any(|a| l[a] < lo[a] - slack || l[a] > hi[a] + slack) {
                return Err(SyntheticError::Invariant("landmark outside the cloud bounds".into()));
            }
        }
    }
    let null = compute_null_point(pts).map_err(|e| SyntheticError::Invariant(e.to_string()))?;
    if null[1] <= hi[1] {
        return Err(SyntheticError::Invariant(format!(
            "null point y {:.3} not beyond cloud max y {:.3}",
            null[1], hi[1]
        )));
    }
    let ty = classify_dentition(&sample.annotation.presence());
    if ty != sample.annotation.dentition_type() {
        return Err(SyntheticError::Invariant("dentition type mismatch".into()));
    }
    Ok(())
}

/// Distance from each present landmark to its nearest raw point.
pub fn landmark_nearest_distances(sample: &GeneratedSample) -> Vec<f64> {
    let pts = sample.cloud.points();
    sample
        .annotation
        .teeth
        .iter()
        .flatten()
        .flatten()
        .map(|l| pts.iter().map(|p| distance(p, l)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Proportions over the ten dentition types in table order 00..04, 10..14.
#[derive(Debug, Clone, PartialEq)]
pub struct DentitionMix(pub [f64; 10]);

impl DentitionMix {
    pub fn uniform() -> Self {
        Self([0.1; 10])
    }

    /// Proportional to the per-type model counts of the reference dataset.
    pub fn weighted() -> Self {
        let counts = [668.0, 85.0, 106.0, 14.0, 10.0, 211.0, 44.0, 59.0, 9.0, 8.0];
        let total: f64 = counts.iter().sum();
        Self(counts.map(|c| c / total))
    }

    /// Only the given type.
    pub fn single(ty: DentitionType) -> Self {
        let mut p = [0.0; 10];
        p[ty.ordinal()] = 1.0;
        Self(p)
    }

    /// Equal shares over the given types.
    pub fn over(types: &[DentitionType]) -> Self {
        let mut p = [0.0; 10];
        for ty in types {
            p[ty.ordinal()] = 1.0 / types.len() as f64;
        }
        Self(p)
    }

    fn validate(&self) -> Result<(), SyntheticError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(SyntheticError::InvalidMix(sum));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `count` samples.
    pub fn apportion(&self, count: usize) -> Result<[usize; 10], SyntheticError> {
        self.validate()?;
        Ok(largest_remainder(&self.0, count))
    }
}

pub(crate) fn largest_remainder<const N: usize>(shares: &[f64; N], count: usize) -> [usize; N] {
    let exact = shares.map(|p| p * count as f64);
    let mut out = exact.map(|e| e.floor() as usize);
    let mut left = count.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if shares[i] > 0.0 {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Dataset-wide generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub points_per_tooth: usize,
    pub gingiva_points: usize,
    pub noise_sigma: f64,
    pub size_jitter: f64,
    pub position_jitter: f64,
    /// Arch widths are drawn uniformly from this range, mm.
    pub width_range: (f64, f64),
    /// Arch depths are drawn uniformly from this range, mm.
    pub depth_range: (f64, f64),
    pub models_per_patient: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        let spec = ArchSpec::new(Arch::Upper, 0);
        Self {
            points_per_tooth: spec.points_per_tooth,
            gingiva_points: spec.gingiva_points,
            noise_sigma: spec.noise_sigma,
            size_jitter: spec.size_jitter,
            position_jitter: spec.position_jitter,
            width_range: (52.0, 58.0),
            depth_range: (42.0, 48.0),
            models_per_patient: 1,
        }
    }
}

/// Presence flags for a dentition type: third molars per the first digit
/// (one or both when present), exactly the missing count for 0..=3 and
/// four to six missing teeth for the open-ended last class.
pub fn sample_presence<R: Rng + ?Sized>(ty: DentitionType, rng: &mut R) -> Presence {
    let mut presence = [true; NUM_TEETH];
    if ty.has_third_molar() {
        match rng.random_range(0..3) {
            0 => presence[0] = false,
            1 => presence[NUM_TEETH - 1] = false,
            _ => {}
        }
    } else {
        presence[0] = false;
        presence[NUM_TEETH - 1] = false;
    }
    let missing = match ty.missing() {
        4 => rng.random_range(4..=6),
        m => m as usize,
    };
    let candidates: Vec<usize> = (1..NUM_TEETH - 1).collect();
    for i in rand::seq::index::sample(rng, candidates.len(), missing) {
        presence[candidates[i]] = false;
    }
    presence
}

/// Generate `count` arches with per-type counts apportioned from `mix`.
pub fn generate_dataset(
    count: usize,
    mix: &DentitionMix,
    seed: u64,
    options: &DatasetOptions,
) -> Result<Vec<GeneratedSample>, SyntheticError> {
    let per_type = mix.apportion(count)?;
    let requested = mix.0.iter().filter(|&&p| p > 0.0).count();
    if count < requested {
        return Err(SyntheticError::TooFewSamples { count, types: requested });
    }
    if options.models_per_patient == 0 {
        return Err(SyntheticError::InvalidSpec("models per patient must be positive".into()));
    }
    let width = options.width_range;
    let depth = options.depth_range;
    if !(width.0 <= width.1 && depth.0 <= depth.1) {
        return Err(SyntheticError::InvalidSpec("empty width or depth range".into()));
    }
    let types: Vec<DentitionType> = DentitionType::ALL
        .iter()
        .zip(per_type)
        .flat_map(|(&ty, n)| std::iter::repeat_n(ty, n))
        .collect();
    let mut out = Vec::with_capacity(count);
    for (i, ty) in types.into_iter().enumerate() {
        let sample_seed = mix_seed(&[seed, i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let arch = if rng.random_bool(0.5) { Arch::Upper } else { Arch::Lower };
        let presence = sample_presence(ty, &mut rng);
        let spec = ArchSpec {
            arch,
            presence,
            size_jitter: options.size_jitter,
            position_jitter: options.position_jitter,
            arch_width: if width.0 < width.1 { rng.random_range(width.0..=width.1) } else { width.0 },
            arch_depth: if depth.0 < depth.1 { rng.random_range(depth.0..=depth.1) } else { depth.0 },
            points_per_tooth: options.points_per_tooth,
            gingiva_points: options.gingiva_points,
            noise_sigma: options.noise_sigma,
            seed: sample_seed,
            model_id: format!("S{seed}-M{i:05}"),
            patient_id: format!("S{seed}-P{:05}", i / options.models_per_patient),
        };
        out.push(generate_arch(&spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
