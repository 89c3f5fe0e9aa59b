mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use eventclip::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use eventclip::encoders::load_backend;
use eventclip::optim::OptimizerState;
use eventclip::pipeline::TrainConfig;
use eventclip::reconstruction::{Normalization, ReconNet, ReconNetConfig};
use eventclip::representation::{crop, BilinearMap, CropRect, EventTensor};
use eventclip::Error;

fn tensor(rng: &mut ChaCha8Rng, bins: usize, n: usize) -> EventTensor {
    let data = (0..2 * bins * n * n)
        .map(|_| rng.gen_range(0.0..3.0))
        .collect();
    EventTensor::from_parts(bins, n, n, 1, data).unwrap()
}

fn small(t_bins: usize) -> ReconNetConfig {
    ReconNetConfig {
        t_bins,
        base_width: 4,
        min_input_size: 8,
        ..Default::default()
    }
}

#[test]
fn parameter_count_matches_census() {
    for (t, levels, width, res, norm) in [
        (9, 3, 32, 2, true),
        (9, 3, 4, 2, true),
        (5, 2, 8, 1, false),
        (3, 1, 6, 0, true),
        (9, 4, 16, 3, false),
    ] {
        let cfg = ReconNetConfig {
            t_bins: t,
            levels,
            base_width: width,
            residual_blocks: res,
            normalization: if norm {
                Normalization::Instance
            } else {
                Normalization::None
            },
            min_input_size: 1 << (levels - 1),
            ..Default::default()
        };
        let net = ReconNet::init(cfg, 0).unwrap();
        assert_eq!(
            net.parameter_count(),
            unet_census(t, levels, width, res, norm),
            "t={t} levels={levels} width={width} res={res} norm={norm}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn output_is_a_valid_image(seed in any::<u64>(), n in 2usize..6, bins in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ReconNet::init(small(bins), seed).unwrap();
        let side = 4 * n;
        let img = net.reconstruct(&tensor(&mut rng, bins, side)).unwrap();
        prop_assert_eq!((img.height(), img.width()), (side, side));
        prop_assert!(img.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn bilinear_adjoint_identity(seed in any::<u64>(), ih in 1usize..20, iw in 1usize..20, oh in 1usize..20, ow in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = BilinearMap::new(ih, iw, oh, ow);
        let x: Vec<f64> = (0..ih * iw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ax = vec![0.0; oh * ow];
        map.apply(&x, &mut ax);
        let mut aty = vec![0.0; ih * iw];
        map.apply_adjoint(&y, &mut aty);
        prop_assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-9);
        // rows of the resampling operator sum to one
        let mut ones = vec![0.0; oh * ow];
        map.apply(&vec![1.0; ih * iw], &mut ones);
        prop_assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn crops_compose(seed in any::<u64>(), n in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = tensor(&mut rng, 2, n);
        let outer_size = rng.gen_range(1..=n);
        let outer = CropRect { top: rng.gen_range(0..=n - outer_size), left: rng.gen_range(0..=n - outer_size), size: outer_size };
        let inner_size = rng.gen_range(1..=outer_size);
        let inner = CropRect { top: rng.gen_range(0..=outer_size - inner_size), left: rng.gen_range(0..=outer_size - inner_size), size: inner_size };
        let twice = crop(&crop(&t, &outer).unwrap(), &inner).unwrap();
        let once = crop(&t, &outer.compose(&inner)).unwrap();
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(crop(&t, &CropRect::full(n)).unwrap(), t);
    }
}

#[test]
fn crop_outside_the_frame_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = tensor(&mut rng, 1, 8);
    assert!(matches!(
        crop(
            &t,
            &CropRect {
                top: 5,
                left: 0,
                size: 4
            }
        ),
        Err(Error::InvalidRect(_))
    ));
}

#[test]
fn wrong_channel_count_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = ReconNet::init(small(9), 0).unwrap();
    assert!(net.reconstruct(&tensor(&mut rng, 5, 8)).is_err());
    assert!(net.reconstruct(&tensor(&mut rng, 9, 6)).is_err());
}

fn checkpoint(t_bins: usize) -> Checkpoint {
    let config = TrainConfig {
        t_bins,
        resize: 24,
        crop: 12,
        batch_size: 4,
        k: 2,
        ..Default::default()
    };
    let backend = load_backend(&config.backend).unwrap();
    let net = ReconNet::init(config.recon_config(), 3).unwrap();
    let mut optimizer = OptimizerState::new(net.params());
    optimizer.step = 17;
    optimizer.m[0][0] = 0.25;
    Checkpoint {
        categories: vec!["a".into(), "b".into()],
        params: net.params().to_vec(),
        optimizer,
        step: 17,
        backend: backend.identifier(),
        preprocessing: backend.preprocessing(),
        config,
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let ckpt = checkpoint(9);
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tensor(&mut rng, 9, 24);
    let a = back.network().unwrap().reconstruct(&x).unwrap();
    let b = ReconNet::init(ckpt.config.recon_config(), 3)
        .unwrap()
        .reconstruct(&x)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let bytes = checkpoint(9).to_bytes().unwrap();
    for pos in [0, 9, 30, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(
            Checkpoint::from_bytes(&bad).is_err(),
            "flip at {pos} accepted"
        );
    }
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 10]),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn t_bins_mismatch_is_a_channel_error() {
    let ckpt = checkpoint(9);
    let expected = ReconNetConfig {
        t_bins: 5,
        ..ckpt.config.recon_config()
    };
    assert!(matches!(
        ckpt.network_for(&expected),
        Err(Error::ChannelMismatch { .. })
    ));
    assert!(ckpt.network_for(&ckpt.config.recon_config()).is_ok());
}

#[test]
fn future_format_version_is_refused() {
    use sha2::{Digest, Sha256};
    let mut bytes = checkpoint(9).to_bytes().unwrap();
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    let body = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body]);
    bytes[body..].copy_from_slice(&digest);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::Version { .. })
    ));
}
