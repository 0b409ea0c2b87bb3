//! Search orchestration: alternate shared-weight epochs with controller
//! epochs, then derive the best genotype from a batch of candidates.

use super::controller::{
    controller_epoch, init_controller, sample_genotype, ControllerConfig, ControllerState,
    SampleMode,
};
use super::supernet::{
    init_supernet, train_shared_epoch, NetMode, ParamStore, SharedOptConfig, SharedOptState,
    SEARCH_LAYOUT,
};
use super::{CellGenotype, EncodedDataset, NasError, SearchSpace};
use crate::nn::argmax_rows;

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub epochs: usize,
    pub controller_samples_per_epoch: usize,
    pub derive_candidates: usize,
    pub controller: ControllerConfig,
    pub shared_lr_max: f64,
    pub shared_lr_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            space: SearchSpace::standard(5, 16),
            epochs: 200,
            controller_samples_per_epoch: 10,
            derive_candidates: 10,
            controller: ControllerConfig::default(),
            shared_lr_max: 0.05,
            shared_lr_min: 0.001,
            momentum: 0.9,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchHistory {
    pub shared_loss: Vec<f64>,
    pub mean_reward: Vec<f64>,
}

/// Full-split accuracy of one genotype under the shared weights.
fn full_split_accuracy(
    store: &ParamStore,
    genotype: &CellGenotype,
    split: &EncodedDataset,
    batch_size: usize,
) -> Result<f64, NasError> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = split.batch(chunk);
        let logits = super::supernet::supernet_forward(store, genotype, &x, NetMode::Train, 0)?;
        let preds = argmax_rows(&logits);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Sample `n_candidates` genotypes, score each on the full validation
/// split, and return the best. Ties break toward the higher log
/// probability, then the lexicographically smaller genotype.
pub fn derive_best_genotype(
    ctrl: &ControllerState,
    store: &ParamStore,
    val: &EncodedDataset,
    n_candidates: usize,
    batch_size: usize,
    seed: u64,
) -> Result<CellGenotype, NasError> {
    if n_candidates == 0 {
        return Err(NasError::Config("need at least one candidate".into()));
    }
    if val.is_empty() {
        return Err(NasError::EmptySplit("derivation validation set".into()));
    }
    let mut best: Option<(f64, f64, CellGenotype)> = None;
    for i in 0..n_candidates {
        let sample_seed = seed
            .wrapping_mul(0x100000001B3)
            .wrapping_add(i as u64 + 1);
        let (genotype, log_prob) = sample_genotype(ctrl, sample_seed, SampleMode::Stochastic);
        let accuracy = full_split_accuracy(store, &genotype, val, batch_size)?;
        let better = match &best {
            None => true,
            Some((best_acc, best_lp, best_g)) => {
                accuracy > *best_acc
                    || (accuracy == *best_acc && log_prob > *best_lp)
                    || (accuracy == *best_acc && log_prob == *best_lp && genotype < *best_g)
            }
        };
        if better {
            best = Some((accuracy, log_prob, genotype));
        }
    }
    Ok(best.unwrap().2)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Run the whole search: alternate shared-weight training and controller
/// updates for `config.epochs`, then derive. Fully seeded.
pub fn run_search(
    train: &EncodedDataset,
    val: &EncodedDataset,
    config: &SearchConfig,
) -> Result<(CellGenotype, SearchHistory, ParamStore, ControllerState), NasError> {
    if train.is_empty() {
        return Err(NasError::EmptySplit("search training set".into()));
    }
    if val.is_empty() {
        return Err(NasError::EmptySplit("search validation set".into()));
    }
    if train.has_test_tag() || val.has_test_tag() {
        return Err(NasError::Config("test-tagged samples in search splits".into()));
    }
    config.space.validate()?;
    let mut store = init_supernet(
        &config.space,
        train.num_classes,
        &SEARCH_LAYOUT,
        splitmix64(config.seed ^ 0x7375706572),
    )?;
    let mut ctrl = init_controller(
        &config.space,
        &config.controller,
        splitmix64(config.seed ^ 0x6374726c),
    );
    let steps_per_epoch = train.len().div_ceil(config.batch_size.max(1));
    let mut opt = SharedOptState::new(
        &store,
        SharedOptConfig {
            lr_max: config.shared_lr_max,
            lr_min: config.shared_lr_min,
            momentum: config.momentum,
            batch_size: config.batch_size,
            total_steps: (config.epochs * steps_per_epoch).max(1),
            clip_norm: config.clip_norm,
        },
    );
    let mut history = SearchHistory::default();
    for epoch in 0..config.epochs {
        let epoch_seed = splitmix64(config.seed.wrapping_add(epoch as u64 + 1));
        let loss = train_shared_epoch(&mut store, &ctrl, train, &mut opt, epoch_seed)?;
        let reward = controller_epoch(
            &mut ctrl,
            &store,
            val,
            config.controller_samples_per_epoch,
            config.batch_size,
            splitmix64(epoch_seed ^ 0x637472),
        )?;
        history.shared_loss.push(loss);
        history.mean_reward.push(reward);
    }
    let genotype = derive_best_genotype(
        &ctrl,
        &store,
        val,
        config.derive_candidates,
        config.batch_size,
        splitmix64(config.seed ^ 0x646572697665),
    )?;
    Ok((genotype, history, store, ctrl))
}
