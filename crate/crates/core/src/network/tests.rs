use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_gradients;
use crate::geometry::append_null;
use crate::heatmap::{char_condition, gt_heatmaps_for};

fn random_cloud(rng: &mut ChaCha8Rng, mesh_points: usize) -> PointCloud {
    scaled_cloud(rng, mesh_points, 1.0)
}

fn scaled_cloud(rng: &mut ChaCha8Rng, mesh_points: usize, scale: f64) -> PointCloud {
    let pts = (0..mesh_points)
        .map(|_| {
            let p: [f64; 3] = [rng.random_range(-20.0..20.0), rng.random_range(-15.0..15.0), rng.random_range(-5.0..5.0)];
            p.map(|c| c * scale)
        })
        .collect();
    append_null(&PointCloud::new(pts).unwrap()).unwrap()
}

/// Closed-form parameter counts, written independently of `param_specs`.
fn expected_counts(desc: &ArchDescriptor) -> (usize, usize) {
    let mut learnable = 0;
    let mut running = 0;
    let mut prev = 3;
    for &w in &desc.encoder_widths {
        learnable += prev * w + 2 * w;
        running += 2 * w;
        prev = w;
    }
    let feat = prev;
    prev = 2 * feat;
    for &w in &desc.decoder_widths {
        learnable += prev * w + 2 * w;
        running += 2 * w;
        prev = w;
    }
    let k = desc.num_teeth * desc.landmarks_per_tooth;
    learnable += prev * k + k;
    if desc.char_module {
        let h = desc.presence_hidden;
        learnable += feat * h + 2 * h + h * h + 2 * h + h * desc.num_teeth + desc.num_teeth;
        running += 4 * h;
    }
    (learnable, running)
}

#[test]
fn init_is_deterministic_and_counts_match() {
    let desc = ArchDescriptor::default();
    let a = init_params(&desc, 0).unwrap();
    let b = init_params(&desc, 0).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(&desc, 1).unwrap());
    let (learnable, running) = expected_counts(&desc);
    assert_eq!(a.count(ParamRole::Learnable), learnable);
    assert_eq!(learnable, 353_184);
    assert_eq!(a.count(ParamRole::RunningMean) + a.count(ParamRole::RunningVar), running);
    assert_eq!(running, 2688);

    let base = init_params(&desc.clone().baseline(), 0).unwrap();
    assert_eq!(base.count(ParamRole::Learnable), expected_counts(&desc.baseline()).0);

    assert_eq!(a.get("encoder.0.bn.scale").unwrap().data(), &[1.0; 64]);
    assert_eq!(a.get("presence.1.bn.running_var").unwrap().data(), &[1.0; 256]);
    let w = a.get("encoder.1.weight").unwrap();
    let bound = 1.0 / 64f64.sqrt();
    assert!(w.data().iter().all(|v| v.abs() < bound));
}

#[test]
fn invalid_widths_are_rejected() {
    let mut desc = ArchDescriptor::default();
    desc.presence_hidden = 0;
    assert!(matches!(init_params(&desc, 0), Err(NetworkError::InvalidArch(_))));
    let mut desc = ArchDescriptor::default();
    desc.encoder_widths[1] = 0;
    assert!(init_params(&desc, 0).is_err());
    let mut desc = ArchDescriptor::default();
    desc.decoder_widths.clear();
    assert!(init_params(&desc, 0).is_err());
}

fn permuted(pc: &PointCloud, perm: &[usize]) -> PointCloud {
    let mesh = pc.mesh_points();
    let mut pts: Vec<_> = perm.iter().map(|&i| mesh[i]).collect();
    pts.push(pc.null_point().unwrap());
    PointCloud::with_null(pts).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn encoder_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_params(&ArchDescriptor::reduced(), 5).unwrap();
    let pc = random_cloud(&mut rng, 20);
    let perm: Vec<usize> = (0..20).rev().collect();
    let pp = permuted(&pc, &perm);
    for mode in [Mode::Infer, Mode::Train] {
        let (f, g) = encoder_forward(&params, &pc, mode).unwrap();
        let (fp, gp) = encoder_forward(&params, &pp, mode).unwrap();
        assert!(close(g.data(), gp.data(), 1e-12));
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert!(close(fp.row_slice(new_row), f.row_slice(old_row), 1e-12));
        }
    }
}

#[test]
fn duplicated_point_leaves_global_feature_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = init_params(&ArchDescriptor::reduced(), 5).unwrap();
    let pc = random_cloud(&mut rng, 10);
    let g = encoder_forward(&params, &pc, Mode::Infer).unwrap().1;
    // Repeat row 3 of the stacked input and run the encoder on it directly.
    let input = stack_points(&[&pc]).unwrap();
    let mut rows = input.data().to_vec();
    rows.splice(9..9, input.data()[9..12].to_vec());
    let input = Tensor::matrix(pc.len() + 1, 3, rows).unwrap();
    let mut builder = Builder::new(params.descriptor(), ForwardOptions::infer()).unwrap();
    let x = builder.graph.leaf("points");
    let (_, gb) = builder.encoder(x, 1);
    let values = evaluate_partial(&builder, &params, &[(x, &input)]).unwrap();
    assert_eq!(values.0[gb.index()].data(), g.data());
}

#[test]
fn all_zero_cloud_gives_finite_output() {
    let params = init_params(&ArchDescriptor::reduced(), 5).unwrap();
    let zero = PointCloud::with_null(vec![[0.0; 3]; 6]).unwrap();
    for opts in [ForwardOptions::train(0.5, 1), ForwardOptions::infer()] {
        let out = charnet_forward(&params, &zero, opts).unwrap();
        assert!(out.raw.values().iter().all(|v| v.is_finite()));
        assert!(out.presence.unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn heatmap_head_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = init_params(&ArchDescriptor::reduced(), 6).unwrap();
    for n in [3, 17] {
        let pc = random_cloud(&mut rng, n);
        let (f, g) = encoder_forward(&params, &pc, Mode::Infer).unwrap();
        let h = heatmap_head_forward(&params, &f, &g, Mode::Infer).unwrap();
        assert_eq!((h.landmarks(), h.points()), (10, n + 1));
        assert!(h.values().iter().all(|&v| v > 0.0 && v < 1.0));
        // Per-point sharing: permuting feature rows permutes columns.
        let rev: Vec<f64> = (0..f.rows()).rev().flat_map(|r| f.row_slice(r).to_vec()).collect();
        let fr = Tensor::matrix(f.rows(), f.cols(), rev).unwrap();
        let hr = heatmap_head_forward(&params, &fr, &g, Mode::Infer).unwrap();
        for k in 0..10 {
            let mut col = hr.row(k).to_vec();
            col.reverse();
            assert!(close(&col, h.row(k), 1e-12));
        }
    }
}

#[test]
fn presence_head_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = init_params(&ArchDescriptor::reduced(), 7).unwrap();
    let g = Tensor::row((0..6).map(|_| rng.random_range(0.0..3.0)).collect());
    let p1 = presence_head_forward(&params, &g, ForwardOptions::infer()).unwrap();
    let p2 = presence_head_forward(&params, &g, ForwardOptions::infer()).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p1.len(), 2);
    assert!(p1.iter().all(|p| (0.0..=1.0).contains(p)));
    for name in ["presence.2.weight", "presence.2.bias"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let half = presence_head_forward(&params, &g, ForwardOptions::train(0.5, 3)).unwrap();
    assert_eq!(half, vec![0.5, 0.5]);
    let base = init_params(&ArchDescriptor::reduced().baseline(), 7).unwrap();
    assert!(presence_head_forward(&base, &g, ForwardOptions::infer()).is_err());
}

#[test]
fn conditioned_output_equals_external_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = init_params(&ArchDescriptor::reduced(), 8).unwrap();
    let clouds: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut rng, 12)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    for opts in [ForwardOptions::infer(), ForwardOptions::train(0.5, 9)] {
        let outs = forward_batch(&params, &refs, opts).unwrap();
        for out in &outs {
            let p = out.presence.as_ref().unwrap();
            let cond = out.conditioned.as_ref().unwrap();
            assert_eq!(cond, &char_condition(&out.raw, p).unwrap());
            let n = out.raw.points();
            for k in 0..out.raw.landmarks() {
                for i in 0..n {
                    assert!(cond.row(k)[i] <= out.raw.row(k)[i]);
                }
            }
        }
        let again = forward_batch(&params, &refs, opts).unwrap();
        assert_eq!(outs, again);
    }
}

#[test]
fn mesh_permutation_permutes_heatmaps_and_keeps_presence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = init_params(&ArchDescriptor::reduced(), 9).unwrap();
    let pc = random_cloud(&mut rng, 15);
    let perm: Vec<usize> = (0..15).map(|i| (i * 7) % 15).collect();
    let pp = permuted(&pc, &perm);
    let a = charnet_forward(&params, &pc, ForwardOptions::infer()).unwrap();
    let b = charnet_forward(&params, &pp, ForwardOptions::infer()).unwrap();
    assert!(close(a.presence.as_ref().unwrap(), b.presence.as_ref().unwrap(), 1e-12));
    for k in 0..10 {
        for (new, &old) in perm.iter().enumerate() {
            assert!((a.raw.row(k)[old] - b.raw.row(k)[new]).abs() < 1e-12);
        }
        assert!((a.raw.row(k)[15] - b.raw.row(k)[15]).abs() < 1e-12);
    }
}

#[test]
fn baseline_has_no_presence_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = init_params(&ArchDescriptor::reduced().baseline(), 1).unwrap();
    let out = charnet_forward(&params, &random_cloud(&mut rng, 8), ForwardOptions::infer()).unwrap();
    assert!(out.presence.is_none() && out.conditioned.is_none());
    assert_eq!(out.decodable(), &out.raw);
}

struct GradCase {
    net: NetGraph,
    leaves: Vec<(NodeId, Tensor)>,
    loss: NodeId,
    wrt: Vec<NodeId>,
}

/// Combined objective on `batch` random 32-point clouds of the reduced
/// architecture with random landmarks and presence labels.
fn gradient_case(seed: u64, batch: usize, opts: ForwardOptions) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let desc = ArchDescriptor::reduced();
    let mut params = init_params(&desc, seed).unwrap();
    // Non-trivial running statistics.
    for e in params.entries_mut() {
        match e.role {
            ParamRole::RunningMean => e.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5)),
            ParamRole::RunningVar => e.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0)),
            ParamRole::Learnable => {}
        }
    }
    let clouds: Vec<PointCloud> = (0..batch).map(|_| random_cloud(&mut rng, 31)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let input = stack_points(&refs).unwrap();
    let mut net = build_network(&desc, batch, 32, opts).unwrap();
    let loss = net.attach_loss(&LossWeights {
        lambda_reg: 1.0,
        lambda_cls: 1.0,
        bce_clamp: 1e-7,
        mse_on_raw: false,
    });
    let mut gt = Vec::new();
    let mut labels = Vec::new();
    for c in &clouds {
        let present: Vec<bool> = (0..2).map(|_| rng.random_bool(0.6)).collect();
        let targets: Vec<Option<[f64; 3]>> = (0..10)
            .map(|k| present[k / 5].then(|| c.mesh_points()[rng.random_range(0..31)]))
            .collect();
        gt.extend(gt_heatmaps_for(c, &targets, 2.0).unwrap().to_point_major());
        labels.extend(present.iter().map(|&p| p as u8 as f64));
    }
    let mut leaves: Vec<(NodeId, Tensor)> = net
        .params
        .iter()
        .zip(params.entries())
        .map(|(n, e)| (*n, e.value.clone()))
        .collect();
    leaves.push((net.input, input));
    leaves.push((loss.heatmap_target, Tensor::matrix(batch * 32, 10, gt).unwrap()));
    leaves.push((loss.presence_target.unwrap(), Tensor::matrix(batch, 2, labels).unwrap()));
    let wrt = net.learnable(&params);
    GradCase {
        net,
        leaves,
        loss: loss.total,
        wrt,
    }
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    for seed in 0..3u64 {
        let mut opts = ForwardOptions::train(0.5, seed);
        opts.running_stats = true;
        let c = gradient_case(seed, 2, opts);
        let report = check_gradients(&c.net.graph, &c.leaves, c.loss, &c.wrt, 1e-3, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

/// With batch statistics the loss is far more curved along first-layer
/// weights, so the central difference needs a smaller step to resolve it.
#[test]
fn batch_statistics_gradient_matches_finite_differences() {
    for seed in 0..2u64 {
        let c = gradient_case(seed, 4, ForwardOptions::train(0.5, seed));
        let report = check_gradients(&c.net.graph, &c.leaves, c.loss, &c.wrt, 1e-5, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}
