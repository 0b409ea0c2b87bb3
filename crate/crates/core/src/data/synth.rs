//! Synthetic action generator: the desk-scale verification oracle.
//!
//! Classes are parametric trajectory families around a fixed chain
//! skeleton: class k drives every joint with a sinusoid at frequency
//! `base_frequency * (k + 1)` and phase `2*pi*k / K`, plus a per-joint
//! spatial phase. Per-sample Gaussian jitter is the only randomness, so
//! the class-mean trajectory equals the noiseless family exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::types::{LabeledSample, Pose3D, PoseSequence};
use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of action classes K.
    pub classes: usize,
    pub samples_per_class: usize,
    pub frames_per_sequence: usize,
    pub joints: usize,
    /// Hz.
    pub frame_rate: f64,
    /// Stddev of per-coordinate jitter in mm.
    pub noise_std: f64,
    /// Motion amplitude in mm.
    pub amplitude: f64,
    /// Base frequency in Hz; class k oscillates at base * (k+1).
    pub base_frequency: f64,
    /// Subjects cycle 1..=num_subjects across samples.
    pub num_subjects: usize,
    /// Required minimum L2 separation between class-mean trajectories,
    /// checked by callers against [`min_class_separation`].
    pub class_margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 20,
            frames_per_sequence: 24,
            joints: 17,
            frame_rate: 20.0,
            noise_std: 2.0,
            amplitude: 60.0,
            base_frequency: 0.8,
            num_subjects: 10,
            class_margin: 100.0,
        }
    }
}

/// Fixed base skeleton: a chain of `joints` joints winding around the
/// vertical axis, roughly human-sized (900 mm tall, 150 mm radius).
pub fn base_skeleton(joints: usize) -> Vec<[f64; 3]> {
    let m = joints.max(1);
    (0..m)
        .map(|j| {
            let theta = 4.0 * std::f64::consts::PI * j as f64 / m as f64;
            let height = if m > 1 {
                900.0 * j as f64 / (m - 1) as f64 - 450.0
            } else {
                0.0
            };
            [150.0 * theta.cos(), height, 150.0 * theta.sin()]
        })
        .collect()
}

/// Mean length of the skeleton's bones (consecutive-joint chain edges).
pub fn mean_bone_length(config: &SynthConfig) -> f64 {
    let base = base_skeleton(config.joints);
    if base.len() < 2 {
        return 0.0;
    }
    let total: f64 = base
        .windows(2)
        .map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    total / (base.len() - 1) as f64
}

/// Per-joint unit displacement direction, fixed across classes.
fn joint_direction(j: usize, joints: usize) -> [f64; 3] {
    let phi = 2.0 * std::f64::consts::PI * j as f64 / joints.max(1) as f64;
    let d = [phi.cos(), (2.0 * phi).sin() * 0.5, phi.sin()];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / norm, d[1] / norm, d[2] / norm]
}

fn noiseless_joint(config: &SynthConfig, base: &[[f64; 3]], class: usize, t: usize, j: usize) -> [f64; 3] {
    let freq = config.base_frequency * (class + 1) as f64;
    let class_phase = 2.0 * std::f64::consts::PI * class as f64 / config.classes as f64;
    let joint_phase = 2.0 * std::f64::consts::PI * j as f64 / config.joints as f64;
    let s = (2.0 * std::f64::consts::PI * freq * t as f64 / config.frame_rate
        + class_phase
        + joint_phase)
        .sin();
    let dir = joint_direction(j, config.joints);
    [
        base[j][0] + config.amplitude * s * dir[0],
        base[j][1] + config.amplitude * s * dir[1],
        base[j][2] + config.amplitude * s * dir[2],
    ]
}

/// The noiseless trajectory of class `k` — the exact class mean.
pub fn class_mean_trajectory(config: &SynthConfig, class: usize) -> Vec<Pose3D> {
    let base = base_skeleton(config.joints);
    (0..config.frames_per_sequence)
        .map(|t| {
            let joints = (0..config.joints)
                .map(|j| noiseless_joint(config, &base, class, t, j))
                .collect();
            Pose3D { joints, root_index: 0 }
        })
        .collect()
}

/// Minimum pairwise L2 distance between class-mean trajectories, treating
/// each trajectory as one flat vector.
pub fn min_class_separation(config: &SynthConfig) -> f64 {
    let trajectories: Vec<Vec<f64>> = (0..config.classes)
        .map(|k| {
            class_mean_trajectory(config, k)
                .iter()
                .flat_map(|p| p.flatten())
                .collect()
        })
        .collect();
    let mut min = f64::INFINITY;
    for a in 0..config.classes {
        for b in (a + 1)..config.classes {
            let d: f64 = trajectories[a]
                .iter()
                .zip(&trajectories[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    min
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Generate the synthetic dataset: `classes * samples_per_class` labeled 3D
/// sequences, bit-identical for a given (config, seed).
pub fn generate_synthetic_actions(
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<LabeledSample>, DataError> {
    if config.classes < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 classes, got {}",
            config.classes
        )));
    }
    if config.joints == 0 || config.frames_per_sequence == 0 || config.samples_per_class == 0 {
        return Err(DataError::Config("degenerate synthetic config".into()));
    }
    let base = base_skeleton(config.joints);
    let noise = Normal::new(0.0, config.noise_std.max(0.0))
        .map_err(|e| DataError::Config(format!("bad noise std: {e}")))?;
    let mut samples = Vec::with_capacity(config.classes * config.samples_per_class);
    for class in 0..config.classes {
        for idx in 0..config.samples_per_class {
            let global = (class * config.samples_per_class + idx) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(global + 1)));
            let frames: Vec<Pose3D> = (0..config.frames_per_sequence)
                .map(|t| {
                    let joints = (0..config.joints)
                        .map(|j| {
                            let p = noiseless_joint(config, &base, class, t, j);
                            if config.noise_std > 0.0 {
                                [
                                    p[0] + noise.sample(&mut rng),
                                    p[1] + noise.sample(&mut rng),
                                    p[2] + noise.sample(&mut rng),
                                ]
                            } else {
                                p
                            }
                        })
                        .collect();
                    Pose3D { joints, root_index: 0 }
                })
                .collect();
            samples.push(LabeledSample {
                id: format!("c{class}_s{idx:03}"),
                sequence: PoseSequence::from_3d(frames, config.frame_rate)?,
                label: class,
                subject: (class * config.samples_per_class + idx) % config.num_subjects + 1,
                split_tag: None,
            });
        }
    }
    Ok(samples)
}

/// Class names for the synthetic dataset ("action0", "action1", ...).
pub fn synth_class_names(config: &SynthConfig) -> Vec<String> {
    (0..config.classes).map(|k| format!("action{k}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let config = SynthConfig::default();
        let a = generate_synthetic_actions(&config, 11).unwrap();
        let b = generate_synthetic_actions(&config, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_and_labels() {
        let config = SynthConfig {
            classes: 3,
            samples_per_class: 10,
            ..Default::default()
        };
        let samples = generate_synthetic_actions(&config, 5).unwrap();
        assert_eq!(samples.len(), 30);
        for k in 0..3 {
            assert_eq!(samples.iter().filter(|s| s.label == k).count(), 10);
        }
    }

    #[test]
    fn class_means_separated_by_margin() {
        let config = SynthConfig::default();
        let sep = min_class_separation(&config);
        assert!(
            sep >= config.class_margin,
            "class separation {sep} below margin {}",
            config.class_margin
        );
    }

    #[test]
    fn too_few_classes_is_config_error() {
        let config = SynthConfig {
            classes: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_actions(&config, 0),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn different_seeds_differ() {
        let config = SynthConfig::default();
        let a = generate_synthetic_actions(&config, 1).unwrap();
        let b = generate_synthetic_actions(&config, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mean_bone_length_positive() {
        let config = SynthConfig::default();
        let mbl = mean_bone_length(&config);
        assert!(mbl > 10.0, "suspicious mean bone length {mbl}");
    }

    #[test]
    fn noiseless_samples_equal_class_mean() {
        let config = SynthConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        let samples = generate_synthetic_actions(&config, 3).unwrap();
        let mean = class_mean_trajectory(&config, 0);
        let frames = samples[0].sequence.as_3d().unwrap();
        for (f, m) in frames.iter().zip(&mean) {
            for (a, b) in f.joints.iter().zip(&m.joints) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-12);
                }
            }
        }
    }
}
