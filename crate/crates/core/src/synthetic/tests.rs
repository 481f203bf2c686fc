use super::*;
use crate::dental::LandmarkKind;
use crate::geometry::preprocess;

fn exact(arch: Arch, seed: u64) -> ArchSpec {
    let mut spec = ArchSpec::new(arch, seed);
    spec.noise_sigma = 0.0;
    spec.size_jitter = 0.0;
    spec.position_jitter = 0.0;
    spec.points_per_tooth = 300;
    spec.gingiva_points = 600;
    spec
}

fn sorted(points: &[Point]) -> Vec<Point> {
    let mut v = points.to_vec();
    v.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2])));
    v
}

#[test]
fn mirrored_spec_mirrors_cloud_and_landmarks() {
    for arch in [Arch::Upper, Arch::Lower] {
        let mut spec = exact(arch, 5);
        spec.presence[0] = false;
        spec.presence[3] = false;
        spec.presence[12] = false;
        let a = generate_arch(&spec).unwrap();
        let b = generate_arch(&spec.mirrored()).unwrap();
        let flipped: Vec<Point> = a.cloud.points().iter().map(|p| mirror_x(*p)).collect();
        let (x, y) = (sorted(&flipped), sorted(b.cloud.points()));
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(&y) {
            assert!(distance(p, q) <= 1e-9, "{p:?} vs {q:?}");
        }
        for t in 0..NUM_TEETH {
            let mirrored = a.annotation.teeth[NUM_TEETH - 1 - t].map(|lm| lm.map(mirror_x));
            match (mirrored, b.annotation.teeth[t]) {
                (None, None) => {}
                (Some(m), Some(l)) => {
                    for g in 0..5 {
                        assert!(distance(&m[g], &l[g]) <= 1e-9);
                    }
                }
                _ => panic!("presence differs at tooth {}", t + 1),
            }
        }
    }
}

#[test]
fn every_dentition_type_is_produced_exactly() {
    let options = DatasetOptions {
        points_per_tooth: 150,
        gingiva_points: 300,
        ..DatasetOptions::default()
    };
    for ty in DentitionType::ALL {
        let data = generate_dataset(4, &DentitionMix::single(ty), 11, &options).unwrap();
        for s in &data {
            assert_eq!(s.dentition_type(), ty);
            assert_eq!(classify_dentition(&s.annotation.presence()), ty);
        }
    }
}

#[test]
fn landmarks_have_nearby_raw_points() {
    let sample = generate_arch(&exact(Arch::Upper, 2)).unwrap();
    assert!(landmark_nearest_distances(&sample).iter().all(|&d| d <= 0.5));
    let noisy = generate_arch(&ArchSpec::new(Arch::Lower, 2)).unwrap();
    assert!(landmark_nearest_distances(&noisy).iter().all(|&d| d <= 0.5));
}

#[test]
fn landmark_roles_follow_anatomy() {
    for arch in [Arch::Upper, Arch::Lower] {
        let sample = generate_arch(&exact(arch, 9)).unwrap();
        let c = crate::geometry::centroid(sample.cloud.points()).unwrap();
        for (t, lm) in sample.annotation.teeth.iter().enumerate() {
            let lm = lm.expect("full dentition");
            let get = |k: LandmarkKind| lm[k.index() - 1];
            let (mp, dp, cp) = (get(LandmarkKind::MP), get(LandmarkKind::DP), get(LandmarkKind::CP));
            let (fgp, lgp) = (get(LandmarkKind::FGP), get(LandmarkKind::LGP));
            // Mesial points lie closer to the midline along the arch.
            let along = |p: Point| (p[0].abs(), -p[1]);
            assert!(along(mp) < along(dp), "tooth {}", t + 1);
            assert!(cp[2] > fgp[2] && cp[2] > lgp[2]);
            let radial = |p: Point| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            assert!(radial(fgp) > radial(lgp), "facial side is outward, tooth {}", t + 1);
            assert_eq!(t < 8, mp[0] < 0.0, "right side teeth sit at negative x");
        }
    }
}

#[test]
fn null_point_is_separated_for_all_types() {
    let data = generate_dataset(20, &DentitionMix::uniform(), 4, &DatasetOptions::default()).unwrap();
    assert_eq!(data.len(), 20);
    for s in &data {
        let (_, hi) = bounding_box(s.cloud.points()).unwrap();
        assert!(compute_null_point(s.cloud.points()).unwrap()[1] > hi[1]);
    }
}

#[test]
fn generation_is_deterministic() {
    let options = DatasetOptions {
        points_per_tooth: 100,
        gingiva_points: 200,
        ..DatasetOptions::default()
    };
    let a = generate_dataset(10, &DentitionMix::uniform(), 8, &options);
    let b = generate_dataset(10, &DentitionMix::uniform(), 8, &options);
    assert_eq!(a, b);
    let c = generate_dataset(10, &DentitionMix::uniform(), 9, &options);
    assert_ne!(a, c);
}

#[test]
fn weighted_mix_reproduces_reference_counts() {
    let counts = DentitionMix::weighted().apportion(1214).unwrap();
    assert_eq!(counts, [668, 85, 106, 14, 10, 211, 44, 59, 9, 8]);
    let uniform = DentitionMix::uniform().apportion(25).unwrap();
    assert_eq!(uniform.iter().sum::<usize>(), 25);
    assert!(uniform.iter().all(|&c| c == 2 || c == 3));
}

#[test]
fn invalid_requests_are_rejected() {
    let mut spec = exact(Arch::Upper, 1);
    spec.presence = [false; NUM_TEETH];
    spec.presence[4] = true;
    assert_eq!(generate_arch(&spec), Err(SyntheticError::TooFewTeeth(1)));
    assert!(matches!(
        generate_dataset(5, &DentitionMix::uniform(), 1, &DatasetOptions::default()),
        Err(SyntheticError::TooFewSamples { count: 5, types: 10 })
    ));
    assert!(matches!(
        generate_dataset(5, &DentitionMix([0.5; 10]), 1, &DatasetOptions::default()),
        Err(SyntheticError::InvalidMix(_))
    ));
}

#[test]
fn default_density_supports_sub_millimetre_decoding() {
    // Mean distance from each landmark to its nearest point after the
    // standard 2048-point downsampling; a lower bound on decoding error.
    let data = generate_dataset(10, &DentitionMix::uniform(), 3, &DatasetOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut n = 0;
    for s in &data {
        let pre = preprocess(&s.cloud, 2048, &mut rng).unwrap();
        let moved = s.annotation.translated([-pre.centroid[0], -pre.centroid[1], -pre.centroid[2]]);
        for l in moved.teeth.iter().flatten().flatten() {
            total += pre.cloud.mesh_points().iter().map(|p| distance(p, l)).fold(f64::INFINITY, f64::min);
            n += 1;
        }
    }
    let mean = total / n as f64;
    eprintln!("mean landmark-to-nearest-point distance: {mean:.3} mm");
    assert!(mean < 0.8, "{mean}");
}
