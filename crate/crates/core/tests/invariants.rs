//! Property suites over cross-cutting invariants: standardization
//! round-trips, split hygiene, file formats, encoder bounds and sampling
//! validity.

use proptest::prelude::*;

use skelact::data::{
    parse_pose_dataset, render_pose_dataset, root_center, split_dataset, standardize_2d,
    DatasetKind, DatasetMeta, LabeledSample, NormStats, Pose2D, Pose3D, PoseDataset,
    PoseSequence, PoseSource, SplitProtocol,
};
use skelact::encoder::{encode, motion_map, pose_map, EncoderConfig};
use skelact::lifter::{huber_loss, mpjpe};
use skelact::nas::{cosine_lr, init_controller, sample_genotype, ControllerConfig, SampleMode, SearchSpace};
use skelact::recognizer::{augment, AugmentConfig};

fn finite_coord() -> impl Strategy<Value = f64> {
    -1.0e4..1.0e4
}

prop_compose! {
    fn pose3_strategy(joints: usize)(coords in prop::collection::vec((finite_coord(), finite_coord(), finite_coord()), joints)) -> Pose3D {
        Pose3D::new(coords.into_iter().map(|(x, y, z)| [x, y, z]).collect(), 0).unwrap()
    }
}

prop_compose! {
    fn sequence_strategy()(frames in 2usize..8, joints in 2usize..6)(
        poses in prop::collection::vec(pose3_strategy(joints), frames),
        rate in 5.0f64..60.0
    ) -> PoseSequence {
        PoseSequence::from_3d(poses, rate).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardize_then_inverse_roundtrips(
        coords in prop::collection::vec((finite_coord(), finite_coord()), 2..12),
        mean_scale in -100.0f64..100.0,
        std_scale in 0.1f64..50.0,
    ) {
        let pose = Pose2D::new(coords.iter().map(|&(u, v)| [u, v]).collect(), PoseSource::GroundTruth).unwrap();
        let dim = coords.len() * 2;
        let stats = NormStats {
            mean: (0..dim).map(|i| mean_scale + i as f64).collect(),
            std: (0..dim).map(|i| std_scale + i as f64 * 0.1).collect(),
        };
        let z = standardize_2d(&pose, &stats).unwrap();
        let back = stats.destandardize(&z).unwrap();
        for (a, b) in pose.flatten().iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn splits_disjoint_and_covering(seed in 0u64..10_000, n in 2usize..40) {
        let samples: Vec<LabeledSample> = (0..n)
            .map(|i| LabeledSample {
                id: format!("s{i}"),
                sequence: PoseSequence::from_3d(
                    vec![Pose3D::new(vec![[i as f64, 0.0, 0.0]; 3], 0).unwrap()],
                    10.0,
                )
                .unwrap(),
                label: i % 3,
                subject: i % 9 + 1,
                split_tag: None,
            })
            .collect();
        for protocol in [SplitProtocol::MsrHalf, SplitProtocol::Sbu5Fold, SplitProtocol::RandomHoldout] {
            let fold = matches!(protocol, SplitProtocol::Sbu5Fold).then_some((seed % 5) as usize);
            let (train, test) = split_dataset(&samples, protocol, fold, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            let train_ids: std::collections::HashSet<_> = train.iter().map(|s| s.id.clone()).collect();
            for t in &test {
                prop_assert!(!train_ids.contains(&t.id));
            }
        }
    }

    #[test]
    fn dataset_file_roundtrip_lossless(
        n_samples in 1usize..4,
        frames in 1usize..4,
        joints in 1usize..5,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<LabeledSample> = (0..n_samples)
            .map(|i| {
                let poses: Vec<Pose3D> = (0..frames)
                    .map(|_| {
                        Pose3D::new(
                            (0..joints)
                                .map(|_| [
                                    rng.random::<f64>() * 100.0,
                                    rng.random::<f64>() * -50.0,
                                    rng.random::<f64>(),
                                ])
                                .collect(),
                            0,
                        )
                        .unwrap()
                    })
                    .collect();
                LabeledSample {
                    id: format!("s{i}"),
                    sequence: PoseSequence::from_3d(poses, 30.0).unwrap(),
                    label: 0,
                    subject: 1,
                    split_tag: None,
                }
            })
            .collect();
        let dataset = PoseDataset {
            meta: DatasetMeta {
                schema_id: "prop".into(),
                kind: DatasetKind::Pose3D,
                source: PoseSource::GroundTruth,
                n: joints,
                m: joints,
                root_index: 0,
                frame_rate: 30.0,
                has_confidence: false,
                class_names: vec!["only".into()],
            },
            samples,
        };
        let text = render_pose_dataset(&dataset);
        let parsed = parse_pose_dataset(&text).unwrap();
        prop_assert_eq!(&parsed, &dataset);
        prop_assert_eq!(render_pose_dataset(&parsed), text);
    }

    #[test]
    fn encoder_output_always_in_unit_cube(seq in sequence_strategy()) {
        let config = EncoderConfig {
            output_height: 16,
            output_width: 16,
            ..Default::default()
        };
        let img = encode(&seq, &config).unwrap();
        prop_assert_eq!(img.pixels.dim(), (16, 16, 3));
        for &v in img.pixels.iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn encoder_scale_and_translation_invariance(seq in sequence_strategy(), s in 0.1f64..20.0) {
        let frames = seq.as_3d().unwrap();
        let scaled: Vec<Pose3D> = frames
            .iter()
            .map(|p| Pose3D::new(p.joints.iter().map(|j| [j[0] * s, j[1] * s, j[2] * s]).collect(), 0).unwrap())
            .collect();
        let scaled_seq = PoseSequence::from_3d(scaled, seq.frame_rate).unwrap();
        let a = pose_map(&seq).unwrap();
        let b = pose_map(&scaled_seq).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let moved: Vec<Pose3D> = frames
            .iter()
            .map(|p| Pose3D::new(p.joints.iter().map(|j| [j[0] + 31.0, j[1] - 12.0, j[2] + 4.0]).collect(), 0).unwrap())
            .collect();
        let moved_seq = PoseSequence::from_3d(moved, seq.frame_rate).unwrap();
        let ma = motion_map(&seq, 0.05).unwrap();
        let mb = motion_map(&moved_seq, 0.05).unwrap();
        for (x, y) in ma.iter().zip(mb.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mpjpe_properties(a in pose3_strategy(5), b in pose3_strategy(5), t in (finite_coord(), finite_coord(), finite_coord())) {
        // Nonnegative; zero iff identical.
        let d = mpjpe(&[a.clone()], &[b.clone()]).unwrap();
        prop_assert!(d >= 0.0);
        let self_d = mpjpe(&[a.clone()], &[a.clone()]).unwrap();
        prop_assert_eq!(self_d, 0.0);
        if a != b {
            prop_assert!(d > 0.0);
        }
        // Invariant to a common rigid translation applied pre-root-centering.
        let translate = |p: &Pose3D| {
            Pose3D::new(
                p.joints.iter().map(|j| [j[0] + t.0, j[1] + t.1, j[2] + t.2]).collect(),
                p.root_index,
            )
            .unwrap()
        };
        let d_translated = mpjpe(
            &[root_center(&translate(&a))],
            &[root_center(&translate(&b))],
        )
        .unwrap();
        let d_centered = mpjpe(&[root_center(&a)], &[root_center(&b)]).unwrap();
        prop_assert!((d_translated - d_centered).abs() < 1e-6);
    }

    #[test]
    fn huber_continuous_at_delta(delta in 0.01f64..10.0) {
        use ndarray::array;
        let eps = 1e-9 * delta.max(1.0);
        let below = huber_loss(&array![[delta - eps]], &array![[0.0]], delta).unwrap();
        let above = huber_loss(&array![[delta + eps]], &array![[0.0]], delta).unwrap();
        prop_assert!((above - below).abs() < 1e-6);
    }

    #[test]
    fn sampled_genotypes_always_valid(seed in 0u64..5000, b in 2usize..6) {
        let space = SearchSpace::standard(b, 4);
        let ctrl = init_controller(&space, &ControllerConfig { hidden: 16, ..Default::default() }, 1);
        let (g, log_prob) = sample_genotype(&ctrl, seed, SampleMode::Stochastic);
        prop_assert!(g.validate(&space).is_ok());
        prop_assert!(log_prob.is_finite());
        prop_assert!(log_prob < 0.0);
    }

    #[test]
    fn cosine_lr_bounded_and_monotone(total in 1usize..500, lr_max in 0.001f64..1.0) {
        let lr_min = lr_max / 100.0;
        let mut last = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, lr_max, lr_min).unwrap();
            prop_assert!(lr <= lr_max + 1e-12 && lr >= lr_min - 1e-12);
            prop_assert!(lr <= last + 1e-12);
            last = lr;
        }
    }

    #[test]
    fn augmentation_preserves_shape(seed in 0u64..1000, pad in 0usize..4, flip in 0.0f64..1.0) {
        use ndarray::Array3;
        let img = skelact::encoder::SPMFImage {
            pixels: Array3::from_shape_fn((12, 12, 3), |(y, x, c)| {
                ((y * 31 + x * 7 + c) % 13) as f64 / 13.0
            }),
            provenance: "p".into(),
        };
        let config = AugmentConfig {
            crop_padding: pad,
            hflip_prob: flip,
        };
        let out = augment(&img, &config, seed);
        prop_assert_eq!(out.pixels.dim(), (12, 12, 3));
        prop_assert_eq!(out.provenance, "p");
        for &v in out.pixels.iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
