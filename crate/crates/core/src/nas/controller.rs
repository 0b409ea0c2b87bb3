//! The sampling policy: a single-layer recurrent cell autoregressively
//! emits (input, op) choices for every node of both cells. Trained with
//! REINFORCE against an exponential-moving-average baseline, with Adam
//! updates at a small fixed learning rate.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::supernet::CellKind;
use super::{CellGenotype, EncodedDataset, NasError, NodeGene, ParamStore, SearchSpace};
use crate::nn::masked_softmax;
use crate::opt::AdamState;

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub temperature: f64,
    pub baseline_decay: f64,
    pub lr: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            temperature: 1.0,
            baseline_decay: 0.95,
            lr: 0.00035,
        }
    }
}

/// Recurrent policy state. Embedding width equals the hidden width.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub space: SearchSpace,
    pub hidden: usize,
    pub temperature: f64,
    pub baseline: f64,
    pub baseline_decay: f64,
    pub lr: f64,
    // tanh RNN cell.
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_h: Array1<f64>,
    // Embeddings for the previous choice.
    pub emb_start: Array1<f64>,
    pub emb_input: Array2<f64>,
    pub emb_op: Array2<f64>,
    // Decision heads.
    pub head_input: Array2<f64>,
    pub head_op: Array2<f64>,
    pub adam: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    /// Per-step argmax: the temperature -> 0 limit.
    Argmax,
}

/// What kind of decision a step makes, and which choice is taken.
#[derive(Debug, Clone, Copy)]
enum Decision {
    /// Input selection for node k: k + 2 valid choices.
    Input { valid: usize },
    /// Op selection over the whole op list.
    Op,
}

impl ControllerState {
    pub fn num_trainable(&self) -> usize {
        self.flatten().len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_ih.iter());
        out.extend(self.w_hh.iter());
        out.extend(self.b_h.iter());
        out.extend(self.emb_start.iter());
        out.extend(self.emb_input.iter());
        out.extend(self.emb_op.iter());
        out.extend(self.head_input.iter());
        out.extend(self.head_op.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut i = 0usize;
        let mut take = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for v in dst {
                *v = flat[i];
                i += 1;
            }
        };
        take(&mut self.w_ih.iter_mut());
        take(&mut self.w_hh.iter_mut());
        take(&mut self.b_h.iter_mut());
        take(&mut self.emb_start.iter_mut());
        take(&mut self.emb_input.iter_mut());
        take(&mut self.emb_op.iter_mut());
        take(&mut self.head_input.iter_mut());
        take(&mut self.head_op.iter_mut());
        assert_eq!(i, flat.len());
    }
}

/// Uniform[-0.1, 0.1] initialization, deterministic per seed.
pub fn init_controller(space: &SearchSpace, config: &ControllerConfig, seed: u64) -> ControllerState {
    assert!(config.temperature > 0.0, "temperature must be positive");
    assert!(config.hidden > 0, "hidden size must be positive");
    let h = config.hidden;
    let b = space.nodes_per_cell;
    let num_ops = space.ops.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 0.2 - 0.1)
    };
    let vec1 = |len: usize, rng: &mut ChaCha8Rng| {
        Array1::from_shape_fn(len, |_| rng.random::<f64>() * 0.2 - 0.1)
    };
    let state = ControllerState {
        space: space.clone(),
        hidden: h,
        temperature: config.temperature,
        baseline: 0.0,
        baseline_decay: config.baseline_decay,
        lr: config.lr,
        w_ih: mat(h, h, &mut rng),
        w_hh: mat(h, h, &mut rng),
        b_h: vec1(h, &mut rng),
        emb_start: vec1(h, &mut rng),
        emb_input: mat(b + 1, h, &mut rng),
        emb_op: mat(num_ops, h, &mut rng),
        head_input: mat(b + 1, h, &mut rng),
        head_op: mat(num_ops, h, &mut rng),
        adam: AdamState::new(0),
    };
    let n = state.num_trainable();
    ControllerState {
        adam: AdamState::new(n),
        ..state
    }
}

/// The fixed decision sequence for one genotype.
fn decision_plan(space: &SearchSpace) -> Vec<Decision> {
    let mut plan = Vec::new();
    for _kind in [CellKind::Normal, CellKind::Reduction] {
        for node in 0..space.nodes_per_cell {
            plan.push(Decision::Input { valid: node + 2 });
            plan.push(Decision::Op);
            plan.push(Decision::Input { valid: node + 2 });
            plan.push(Decision::Op);
        }
    }
    plan
}

struct StepTrace {
    decision: Decision,
    h_prev: Array1<f64>,
    embed: Array1<f64>,
    /// Index into embedding tables of the previous choice; None = start.
    prev_choice: Option<(bool, usize)>, // (is_op, index)
    h_new: Array1<f64>,
    probs: Array1<f64>,
    choice: usize,
}

fn run_policy(
    ctrl: &ControllerState,
    mut choose: impl FnMut(&Array1<f64>, usize, &mut ChaCha8Rng) -> usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<StepTrace>, f64) {
    let plan = decision_plan(&ctrl.space);
    let mut h = Array1::zeros(ctrl.hidden);
    let mut embed = ctrl.emb_start.clone();
    let mut prev_choice: Option<(bool, usize)> = None;
    let mut traces = Vec::with_capacity(plan.len());
    let mut log_prob = 0.0;
    for decision in plan {
        let pre = ctrl.w_ih.dot(&embed) + ctrl.w_hh.dot(&h) + &ctrl.b_h;
        let h_new = pre.mapv(f64::tanh);
        let (head, valid) = match decision {
            Decision::Input { valid } => (&ctrl.head_input, valid),
            Decision::Op => (&ctrl.head_op, ctrl.space.ops.len()),
        };
        let logits = head.dot(&h_new);
        let probs = masked_softmax(&logits, valid, ctrl.temperature);
        let choice = choose(&probs, valid, rng);
        log_prob += probs[choice].ln();
        traces.push(StepTrace {
            decision,
            h_prev: h.clone(),
            embed: embed.clone(),
            prev_choice,
            h_new: h_new.clone(),
            probs: probs.clone(),
            choice,
        });
        embed = match decision {
            Decision::Input { .. } => ctrl.emb_input.row(choice).to_owned(),
            Decision::Op => ctrl.emb_op.row(choice).to_owned(),
        };
        prev_choice = Some((matches!(decision, Decision::Op), choice));
        h = h_new;
    }
    (traces, log_prob)
}

fn genotype_from_choices(space: &SearchSpace, choices: &[usize]) -> CellGenotype {
    let b = space.nodes_per_cell;
    let mut cells: Vec<Vec<NodeGene>> = Vec::with_capacity(2);
    let mut it = choices.iter();
    for _ in 0..2 {
        let mut nodes = Vec::with_capacity(b);
        for _ in 0..b {
            let input_a = *it.next().unwrap();
            let op_a = space.ops[*it.next().unwrap()];
            let input_b = *it.next().unwrap();
            let op_b = space.ops[*it.next().unwrap()];
            nodes.push(NodeGene {
                input_a,
                op_a,
                input_b,
                op_b,
            });
        }
        cells.push(nodes);
    }
    let reduction = cells.pop().unwrap();
    let normal = cells.pop().unwrap();
    CellGenotype { normal, reduction }
}

/// Autoregressively sample a genotype; returns it with the summed log
/// probability of every choice. Deterministic per seed.
pub fn sample_genotype(
    ctrl: &ControllerState,
    seed: u64,
    mode: SampleMode,
) -> (CellGenotype, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (traces, log_prob) = match mode {
        SampleMode::Stochastic => run_policy(
            ctrl,
            |probs, valid, rng| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for i in 0..valid {
                    acc += probs[i];
                    if u < acc {
                        return i;
                    }
                }
                valid - 1
            },
            &mut rng,
        ),
        SampleMode::Argmax => run_policy(
            ctrl,
            |probs, valid, _| {
                let mut best = 0;
                let mut best_p = f64::NEG_INFINITY;
                for i in 0..valid {
                    if probs[i] > best_p {
                        best_p = probs[i];
                        best = i;
                    }
                }
                best
            },
            &mut rng,
        ),
    };
    let choices: Vec<usize> = traces.iter().map(|t| t.choice).collect();
    (genotype_from_choices(&ctrl.space, &choices), log_prob)
}

fn choices_of_genotype(space: &SearchSpace, genotype: &CellGenotype) -> Vec<usize> {
    let op_index = |op: super::OpId| space.ops.iter().position(|&o| o == op).unwrap();
    let mut out = Vec::new();
    for nodes in [&genotype.normal, &genotype.reduction] {
        for node in nodes {
            out.push(node.input_a);
            out.push(op_index(node.op_a));
            out.push(node.input_b);
            out.push(op_index(node.op_b));
        }
    }
    out
}

/// Teacher-forced log probability of an existing genotype.
pub fn genotype_log_prob(ctrl: &ControllerState, genotype: &CellGenotype) -> f64 {
    let forced = choices_of_genotype(&ctrl.space, genotype);
    let mut idx = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, log_prob) = run_policy(
        ctrl,
        |_, _, _| {
            let c = forced[idx];
            idx += 1;
            c
        },
        &mut rng,
    );
    log_prob
}

/// Per-step (probability of the chosen action) for an existing genotype,
/// for consistency checks against exp(log_prob).
pub fn genotype_step_probs(ctrl: &ControllerState, genotype: &CellGenotype) -> Vec<f64> {
    let forced = choices_of_genotype(&ctrl.space, genotype);
    let mut idx = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (traces, _) = run_policy(
        ctrl,
        |_, _, _| {
            let c = forced[idx];
            idx += 1;
            c
        },
        &mut rng,
    );
    traces.iter().map(|t| t.probs[t.choice]).collect()
}

/// Gradient of `-(advantage) * log_prob(genotype)` with respect to every
/// controller parameter, via backprop through time over the recorded
/// decision sequence.
struct ControllerGrads {
    w_ih: Array2<f64>,
    w_hh: Array2<f64>,
    b_h: Array1<f64>,
    emb_start: Array1<f64>,
    emb_input: Array2<f64>,
    emb_op: Array2<f64>,
    head_input: Array2<f64>,
    head_op: Array2<f64>,
}

impl ControllerGrads {
    fn zeros(ctrl: &ControllerState) -> Self {
        Self {
            w_ih: Array2::zeros(ctrl.w_ih.dim()),
            w_hh: Array2::zeros(ctrl.w_hh.dim()),
            b_h: Array1::zeros(ctrl.b_h.len()),
            emb_start: Array1::zeros(ctrl.emb_start.len()),
            emb_input: Array2::zeros(ctrl.emb_input.dim()),
            emb_op: Array2::zeros(ctrl.emb_op.dim()),
            head_input: Array2::zeros(ctrl.head_input.dim()),
            head_op: Array2::zeros(ctrl.head_op.dim()),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_ih.iter());
        out.extend(self.w_hh.iter());
        out.extend(self.b_h.iter());
        out.extend(self.emb_start.iter());
        out.extend(self.emb_input.iter());
        out.extend(self.emb_op.iter());
        out.extend(self.head_input.iter());
        out.extend(self.head_op.iter());
        out
    }
}

fn policy_gradient(ctrl: &ControllerState, traces: &[StepTrace], advantage: f64) -> ControllerGrads {
    let mut grads = ControllerGrads::zeros(ctrl);
    // d h carried backward through the recurrent chain.
    let mut dh_next = Array1::zeros(ctrl.hidden);
    for trace in traces.iter().rev() {
        // dL/dlogits for L = -advantage * sum log p[choice]:
        // (p - onehot) * advantage / temperature over valid entries.
        let (head, head_grad, valid): (&Array2<f64>, &mut Array2<f64>, usize) =
            match trace.decision {
                Decision::Input { valid } => (&ctrl.head_input, &mut grads.head_input, valid),
                Decision::Op => (&ctrl.head_op, &mut grads.head_op, ctrl.space.ops.len()),
            };
        let mut dlogits = Array1::zeros(head.nrows());
        for i in 0..valid {
            let indicator = if i == trace.choice { 1.0 } else { 0.0 };
            dlogits[i] = advantage * (trace.probs[i] - indicator) / ctrl.temperature;
        }
        // Head: logits = head . h_new.
        for i in 0..head.nrows() {
            if dlogits[i] == 0.0 {
                continue;
            }
            for j in 0..ctrl.hidden {
                head_grad[[i, j]] += dlogits[i] * trace.h_new[j];
            }
        }
        let mut dh = dh_next.clone();
        for j in 0..ctrl.hidden {
            let mut acc = 0.0;
            for i in 0..head.nrows() {
                acc += head[[i, j]] * dlogits[i];
            }
            dh[j] += acc;
        }
        // tanh cell: h_new = tanh(W_ih e + W_hh h_prev + b).
        let dpre = &dh * &trace.h_new.mapv(|v| 1.0 - v * v);
        for i in 0..ctrl.hidden {
            grads.b_h[i] += dpre[i];
            for j in 0..ctrl.hidden {
                grads.w_ih[[i, j]] += dpre[i] * trace.embed[j];
                grads.w_hh[[i, j]] += dpre[i] * trace.h_prev[j];
            }
        }
        // Gradient into the embedding used at this step.
        let de = ctrl.w_ih.t().dot(&dpre);
        match trace.prev_choice {
            None => grads.emb_start += &de,
            Some((true, idx)) => {
                for j in 0..ctrl.hidden {
                    grads.emb_op[[idx, j]] += de[j];
                }
            }
            Some((false, idx)) => {
                for j in 0..ctrl.hidden {
                    grads.emb_input[[idx, j]] += de[j];
                }
            }
        }
        // Hidden-state gradient into the previous step.
        dh_next = ctrl.w_hh.t().dot(&dpre);
    }
    grads
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// One policy-gradient step for a single (genotype, reward) observation.
/// The advantage is computed against the baseline before the baseline is
/// folded forward.
pub fn reinforce_step(ctrl: &mut ControllerState, genotype: &CellGenotype, reward: f64) {
    let forced = choices_of_genotype(&ctrl.space, genotype);
    let mut idx = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (traces, _) = run_policy(
        ctrl,
        |_, _, _| {
            let c = forced[idx];
            idx += 1;
            c
        },
        &mut rng,
    );
    let advantage = reward - ctrl.baseline;
    let grads = policy_gradient(ctrl, &traces, advantage);
    let mut flat = ctrl.flatten();
    let gflat = grads.flatten();
    let lr = ctrl.lr;
    ctrl.adam.step(&mut flat, &gflat, lr);
    ctrl.set_flat(&flat);
    ctrl.baseline = ctrl.baseline_decay * ctrl.baseline + (1.0 - ctrl.baseline_decay) * reward;
}

/// One controller epoch: sample `samples_per_epoch` genotypes, score each
/// on one held-out validation mini-batch under the shared weights, apply a
/// REINFORCE step per sample. Returns the mean reward.
pub fn controller_epoch(
    ctrl: &mut ControllerState,
    store: &ParamStore,
    val: &EncodedDataset,
    samples_per_epoch: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64, NasError> {
    use rand::seq::SliceRandom;
    if val.is_empty() {
        return Err(NasError::EmptySplit("controller validation set".into()));
    }
    let mut order: Vec<usize> = (0..val.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x76616c));
    order.shuffle(&mut rng);
    let batches: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    let mut total_reward = 0.0;
    for i in 0..samples_per_epoch {
        let sample_seed = splitmix64(seed.wrapping_add(1 + i as u64));
        let (genotype, _) = sample_genotype(ctrl, sample_seed, SampleMode::Stochastic);
        let chunk = batches[i % batches.len()];
        let (x, labels) = val.batch(chunk);
        let reward = super::supernet::genotype_batch_accuracy(store, &genotype, &x, &labels)?;
        reinforce_step(ctrl, &genotype, reward);
        total_reward += reward;
    }
    Ok(total_reward / samples_per_epoch as f64)
}
