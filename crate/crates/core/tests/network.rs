use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpcnet::geometry::{PointCloud, PointTag};
use vpcnet::network::{Mode, NetConfig, Network};
use vpcnet::tensor::{no_grad, Tensor};

fn small(cfg: NetConfig) -> NetConfig {
    NetConfig {
        n_coarse: 32,
        r: 4,
        width_divisor: 8,
        ..cfg
    }
}

fn cloud(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::constant(&[n, 3], data).unwrap()
}

fn zero_param(net: &mut Network, path: &str) {
    let n = net.params.get(path).unwrap().numel();
    net.params.set_data(path, vec![0.0; n]).unwrap();
}

fn randomize(net: &mut Network, path: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.params.get(path).unwrap().numel();
    net.params.set_data(path, (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
}

#[test]
fn untrained_tnet_is_identity() {
    let net = Network::new(small(NetConfig::default()), 1).unwrap();
    for n in [1, 12, 4200] {
        let (t, _) = net.tnet(&cloud(n, n as u64), Mode::Train).unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}

#[test]
fn tnet_first_layer_gradient_matches_finite_differences() {
    let cfg = NetConfig {
        batch_norm: false,
        ..small(NetConfig::default())
    };
    let mut net = Network::new(cfg, 2).unwrap();
    randomize(&mut net, "encoder.tnet.out.weight", 5);
    let x = cloud(10, 3);
    let c: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).sin()).collect();
    let weights = Tensor::constant(&[3, 3], c.clone()).unwrap();
    let objective = |net: &Network| -> f64 {
        no_grad(|| {
            let (t, _) = net.tnet(&x, Mode::Train).unwrap();
            t.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        })
    };
    let (t, _) = net.tnet(&x, Mode::Train).unwrap();
    t.mul(&weights).unwrap().sum().unwrap().backward().unwrap();
    let path = "encoder.tnet.conv.mlp0.weight";
    let grad = net.params.grad_of(path).unwrap();
    let base = net.params.get(path).unwrap().data().to_vec();
    let h = 1e-5;
    for k in 0..base.len() {
        let mut probe = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            net.params.set_data(path, v).unwrap();
            objective(&net)
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h);
        let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
        assert!(err < 1e-4, "weight {k}: fd {fd} analytic {}", grad[k]);
    }
}

#[test]
fn single_point_input_gives_full_latent() {
    let net = Network::new(NetConfig::default(), 3).unwrap();
    let (enc, _) = no_grad(|| net.encode(&cloud(1, 1), Mode::Train)).unwrap();
    assert_eq!(enc.f3.numel(), 1280);
    assert_eq!(enc.f1.numel(), 256);
    assert_eq!(enc.f2.numel(), 1024);
    assert_eq!(enc.p1.shape(), &[1, 64]);
}

#[test]
fn encoder_is_permutation_invariant_without_batch_norm() {
    let cfg = NetConfig {
        batch_norm: false,
        ..small(NetConfig::default())
    };
    let mut net = Network::new(cfg, 4).unwrap();
    randomize(&mut net, "encoder.tnet.out.weight", 9);
    let x = cloud(50, 8);
    let mut perm: Vec<usize> = (0..50).collect();
    perm.reverse();
    perm.swap(3, 17);
    let shuffled = x.gather_rows(&perm).unwrap();
    let (a, _) = net.encode(&x, Mode::Train).unwrap();
    let (b, _) = net.encode(&shuffled, Mode::Train).unwrap();
    for (u, v) in a.f3.data().iter().zip(b.f3.data()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn rotated_input_stays_finite() {
    let net = Network::new(small(NetConfig::default()), 5).unwrap();
    let x = cloud(40, 2);
    let (a, b) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    let rot = Tensor::constant(&[3, 3], vec![a, -b, 0.0, b, a, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let (e0, _) = net.encode(&x, Mode::Train).unwrap();
    let (e1, _) = net.encode(&x.matmul(&rot).unwrap(), Mode::Train).unwrap();
    assert!(e1.f3.data().iter().all(|v| v.is_finite()));
    assert_ne!(e0.f3.data(), e1.f3.data());
}

#[test]
fn coarse_decoder_shape_and_zero_map() {
    let mut net = Network::new(NetConfig::default(), 6).unwrap();
    let f3 = Tensor::constant(&[1, 1280], vec![0.3; 1280]).unwrap();
    assert_eq!(net.decode_coarse(&f3).unwrap().shape(), &[1024, 3]);
    for i in 0..3 {
        zero_param(&mut net, &format!("decoder.coarse.mlp{i}.weight"));
    }
    let zero = Tensor::zeros(&[1, 1280]);
    assert!(net.decode_coarse(&zero).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn coarse_output_responds_to_latent() {
    let net = Network::new(small(NetConfig::default()), 7).unwrap();
    let f = net.config().f3_len();
    let f3 = Tensor::leaf(&[1, f], (0..f).map(|k| (k as f64).cos()).collect(), true).unwrap();
    let coarse = net.decode_coarse(&f3).unwrap();
    let gt = cloud(40, 11);
    vpcnet::metrics::chamfer_loss(&coarse, &gt).unwrap().backward().unwrap();
    assert!(f3.grad().unwrap().iter().any(|g| g.abs() > 1e-8));
}

#[test]
fn folding_grid_is_centered_with_distinct_rows() {
    let cfg = NetConfig {
        n_coarse: 8,
        width_divisor: 8,
        ..NetConfig::default()
    };
    let net = Network::new(cfg, 8).unwrap();
    let grid = net.folding_grid().unwrap();
    assert_eq!(grid.len(), 16);
    let mean = grid.iter().fold([0.0, 0.0], |a, g| [a[0] + g[0] / 16.0, a[1] + g[1] / 16.0]);
    assert!(mean[0].abs() < 1e-15 && mean[1].abs() < 1e-15);
    for i in 0..16 {
        for j in 0..i {
            assert_ne!(grid[i], grid[j]);
        }
    }
    assert!(grid.iter().all(|g| g[0].abs() <= 0.05 && g[1].abs() <= 0.05));
    assert!(Network::new(NetConfig { r: 5, ..NetConfig::default() }, 0).is_err());
}

#[test]
fn zero_folding_output_layer_gives_tiled_coarse() {
    let mut net = Network::new(small(NetConfig::default()), 9).unwrap();
    zero_param(&mut net, "decoder.fold.mlp2.weight");
    let (out, _) = net.forward(&cloud(30, 4), Mode::Train).unwrap();
    assert_eq!(out.dense.data(), out.coarse.repeat_rows(4).unwrap().data());
}

#[test]
fn zero_refiner_output_layer_gives_sampled_merge() {
    let mut net = Network::new(small(NetConfig::default()), 10).unwrap();
    zero_param(&mut net, "refiner.dec.mlp3.weight");
    for mode in [Mode::Train, Mode::Eval] {
        let (out, _) = net.forward(&cloud(30, 5), mode).unwrap();
        assert_eq!(out.refined.data(), out.refiner_base.data());
    }
}

#[test]
fn refiner_samples_from_merge_and_offsets_are_bounded() {
    let net = Network::new(small(NetConfig::default()), 11).unwrap();
    let x = cloud(30, 6);
    let (out, _) = net.forward(&x, Mode::Train).unwrap();
    let rn = 32 * 4;
    assert_eq!(out.refiner_base.shape(), &[rn, 3]);
    let merged: Vec<&[f64]> = x.data().chunks(3).chain(out.dense.data().chunks(3)).collect();
    for (i, row) in out.refiner_base.data().chunks(3).enumerate() {
        let pos = merged.iter().position(|m| *m == row).expect("sampled row comes from the merge");
        assert_eq!(out.tags[i] == PointTag::FromInput, pos < 30);
    }
    for (a, b) in out.refined.data().iter().zip(out.refiner_base.data()) {
        assert!((a - b).abs() <= 1.0);
    }
    // without resampling the dense cloud passes through
    let net = Network::new(small(NetConfig { refiner_fps: false, ..NetConfig::default() }), 11).unwrap();
    let (out, _) = net.forward(&x, Mode::Train).unwrap();
    assert_eq!(out.refiner_base.data(), out.dense.data());
}

#[test]
fn all_stages_off_passes_dense_through() {
    let cfg = NetConfig {
        enable_stn: false,
        enable_pfe: false,
        enable_refiner: false,
        ..small(NetConfig::default())
    };
    let net = Network::new(cfg, 12).unwrap();
    assert!(!net.params.contains("encoder.tnet.out.weight"));
    let (out, _) = net.forward(&cloud(20, 7), Mode::Train).unwrap();
    assert_eq!(out.refined.data(), out.dense.data());
    assert_eq!(cfg.f3_len(), 128);
}

#[test]
fn shape_contract_across_input_sizes() {
    let net = Network::new(small(NetConfig::default()), 13).unwrap();
    for n in [1, 2, 12, 100, 5000] {
        let (out, _) = no_grad(|| net.forward(&cloud(n, n as u64), Mode::Train)).unwrap();
        assert_eq!(out.coarse.shape(), &[32, 3]);
        assert_eq!(out.dense.shape(), &[128, 3]);
        assert_eq!(out.refined.shape(), &[128, 3]);
    }
}

#[test]
fn forward_is_deterministic_and_checkpoints_rebuild() {
    let net = Network::new(small(NetConfig::default()), 14).unwrap();
    let x = PointCloud::from_tensor(&cloud(25, 9)).unwrap();
    let a = net.complete(&x).unwrap();
    let b = Network::new(small(NetConfig::default()), 14).unwrap().complete(&x).unwrap();
    assert_eq!(a, b);
    let restored = Network::from_params(vpcnet::tensor::ParamStore::from_bytes(&net.params.to_bytes()).unwrap()).unwrap();
    assert_eq!(restored.config(), net.config());
    assert_eq!(restored.complete(&x).unwrap(), a);
}

#[test]
fn batch_norm_running_stats_track_batches() {
    let mut net = Network::new(small(NetConfig::default()), 15).unwrap();
    let (_, updates) = net.forward(&cloud(20, 1), Mode::Train).unwrap();
    let path = "encoder.pn1.mlp0";
    let batch_mean = updates.0.iter().find(|(p, _)| p == path).unwrap().1.mean.clone();
    net.apply_bn_updates(updates).unwrap();
    let running = net.params.get(&format!("{path}.bn.running_mean")).unwrap();
    for (r, b) in running.data().iter().zip(&batch_mean) {
        assert!((r - 0.1 * b).abs() < 1e-15);
    }
}

#[test]
fn layers_fed_tiled_features_skip_batch_norm() {
    // per-cloud statistics would subtract the tiled part exactly
    let net = Network::new(small(NetConfig::default()), 16).unwrap();
    for path in ["encoder.pn2.mlp0", "decoder.fold.mlp0", "refiner.dec.mlp0"] {
        assert!(!net.params.contains(&format!("{path}.bn.gamma")), "{path}");
    }
    for path in ["encoder.pn1.mlp0", "decoder.fold.mlp1", "refiner.dec.mlp1"] {
        assert!(net.params.contains(&format!("{path}.bn.gamma")), "{path}");
    }
}
