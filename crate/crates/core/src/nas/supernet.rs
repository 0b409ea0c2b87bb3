//! Shared-parameter network over the cell search space.
//!
//! One [`ParamStore`] holds every op's weights. During search the store is
//! keyed by cell *type* — all normal cells read the same entries, all
//! reduction cells likewise — which is what makes child models cheap to
//! score. The final derived network uses the same machinery with
//! per-instance keys and only the genotype's entries materialized.
//!
//! Cell semantics: inputs 0/1 are the previous two cell outputs (input 0
//! average-pooled down when a reduction changed the resolution in
//! between); node k applies its two chosen ops to its chosen inputs and
//! sums them; reduction cells run ops on cell inputs at stride 2; the
//! outputs of loose-end nodes are concatenated and mixed back to C
//! channels by a 1x1 projection whose columns are sliced per loose set.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    avg_pool3, bn2d_backward, bn2d_forward_eval, bn2d_forward_train, bn2d_update_running,
    conv_out_size, op_backward, op_forward, BatchNorm2d, Bn2dCache, OpCache, OpId, SepConvGrads,
    SepConvParams,
};
use super::{cosine_lr, CellGenotype, EncodedDataset, NasError, SearchSpace};
use crate::nn::{cross_entropy_with_grad, he_vec};
use crate::opt::NesterovState;

/// Macro layout used during search.
pub const SEARCH_LAYOUT: [CellKind; 8] = [
    CellKind::Normal,
    CellKind::Normal,
    CellKind::Reduction,
    CellKind::Normal,
    CellKind::Normal,
    CellKind::Reduction,
    CellKind::Normal,
    CellKind::Normal,
];

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// Parameter addressing: shared stores key ops by cell type, standalone
/// networks key them by position in the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    Shared(CellKind),
    Instance(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpKey {
    pub scope: Scope,
    pub node: usize,
    pub slot: Slot,
    pub op: OpId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams {
    /// (C, 3, 3, 3): full 3x3 convolution over RGB.
    pub conv: Array4<f64>,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// (K, C)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoping {
    Shared,
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub space: SearchSpace,
    pub num_classes: usize,
    pub layout: Vec<CellKind>,
    pub scoping: Scoping,
    pub stem: StemParams,
    pub ops: BTreeMap<OpKey, SepConvParams>,
    /// Per scope: 1x1 projection. Shared scopes hold (C, B*C) sliced by
    /// loose set; instance scopes hold exactly (C, loose*C).
    pub projections: BTreeMap<Scope, Array2<f64>>,
    pub classifier: ClassifierParams,
}

impl ParamStore {
    pub fn scope_of(&self, cell_idx: usize) -> Scope {
        match self.scoping {
            Scoping::Shared => Scope::Shared(self.layout[cell_idx]),
            Scoping::PerInstance => Scope::Instance(cell_idx),
        }
    }

    pub fn channels(&self) -> usize {
        self.space.stem_channels
    }

    /// Flatten every trainable parameter in a fixed order (stem, ops in
    /// key order, projections, classifier). BN running stats excluded.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.stem.conv.iter());
        out.extend(self.stem.bn.gamma.iter());
        out.extend(self.stem.bn.beta.iter());
        for params in self.ops.values() {
            out.extend(params.depthwise.iter());
            out.extend(params.pointwise.iter());
            out.extend(params.bn.gamma.iter());
            out.extend(params.bn.beta.iter());
        }
        for proj in self.projections.values() {
            out.extend(proj.iter());
        }
        out.extend(self.classifier.w.iter());
        out.extend(self.classifier.b.iter());
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
        take(&mut self.stem.conv.iter_mut());
        take(&mut self.stem.bn.gamma.iter_mut());
        take(&mut self.stem.bn.beta.iter_mut());
        for params in self.ops.values_mut() {
            take(&mut params.depthwise.iter_mut());
            take(&mut params.pointwise.iter_mut());
            take(&mut params.bn.gamma.iter_mut());
            take(&mut params.bn.beta.iter_mut());
        }
        for proj in self.projections.values_mut() {
            take(&mut proj.iter_mut());
        }
        take(&mut self.classifier.w.iter_mut());
        take(&mut self.classifier.b.iter_mut());
        assert_eq!(i, flat.len(), "flat length mismatch");
    }

    pub fn num_params(&self) -> usize {
        self.flatten().len()
    }
}

/// Gradients aligned with a [`ParamStore`]; op entries exist only for keys
/// the backward pass touched — everything else is exactly zero.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    pub stem_conv: Option<Array4<f64>>,
    pub stem_gamma: Option<Array1<f64>>,
    pub stem_beta: Option<Array1<f64>>,
    pub ops: BTreeMap<OpKey, SepConvGrads>,
    pub projections: BTreeMap<Scope, Array2<f64>>,
    pub classifier_w: Option<Array2<f64>>,
    pub classifier_b: Option<Array1<f64>>,
}

impl GradStore {
    fn add_op(&mut self, key: OpKey, grads: SepConvGrads) {
        match self.ops.get_mut(&key) {
            Some(entry) => {
                entry.depthwise += &grads.depthwise;
                entry.pointwise += &grads.pointwise;
                entry.gamma += &grads.gamma;
                entry.beta += &grads.beta;
            }
            None => {
                self.ops.insert(key, grads);
            }
        }
    }

    fn add_projection(&mut self, scope: Scope, grad: Array2<f64>) {
        match self.projections.get_mut(&scope) {
            Some(entry) => *entry += &grad,
            None => {
                self.projections.insert(scope, grad);
            }
        }
    }

    /// Flatten aligned with `store.flatten()`, zeros for untouched keys.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.stem_conv {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat_n(0.0, store.stem.conv.len())),
        }
        match &self.stem_gamma {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat_n(0.0, store.stem.bn.gamma.len())),
        }
        match &self.stem_beta {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat_n(0.0, store.stem.bn.beta.len())),
        }
        for (key, params) in &store.ops {
            match self.ops.get(key) {
                Some(g) => {
                    out.extend(g.depthwise.iter());
                    out.extend(g.pointwise.iter());
                    out.extend(g.gamma.iter());
                    out.extend(g.beta.iter());
                }
                None => {
                    let len = params.depthwise.len()
                        + params.pointwise.len()
                        + params.bn.gamma.len()
                        + params.bn.beta.len();
                    out.extend(std::iter::repeat_n(0.0, len));
                }
            }
        }
        for (scope, proj) in &store.projections {
            match self.projections.get(scope) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, proj.len())),
            }
        }
        match &self.classifier_w {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat_n(0.0, store.classifier.w.len())),
        }
        match &self.classifier_b {
            Some(g) => out.extend(g.iter()),
            None => out.extend(std::iter::repeat_n(0.0, store.classifier.b.len())),
        }
        out
    }
}

fn he_array4(dim: (usize, usize, usize, usize), fan_in: usize, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let data = he_vec(dim.0 * dim.1 * dim.2 * dim.3, fan_in, rng);
    Array4::from_shape_vec(dim, data).unwrap()
}

fn he_array3(dim: (usize, usize, usize), fan_in: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let data = he_vec(dim.0 * dim.1 * dim.2, fan_in, rng);
    Array3::from_shape_vec(dim, data).unwrap()
}

fn he_array2(dim: (usize, usize), fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let data = he_vec(dim.0 * dim.1, fan_in, rng);
    Array2::from_shape_vec(dim, data).unwrap()
}

fn init_sep_conv(c: usize, k: usize, rng: &mut ChaCha8Rng) -> SepConvParams {
    SepConvParams {
        depthwise: he_array3((c, k, k), k * k, rng),
        pointwise: he_array2((c, c), c, rng),
        bn: BatchNorm2d::new(c),
    }
}

/// Build the shared store: an entry for every (cell type, node, slot,
/// parameterized op) in the space, plus stem, projections and classifier.
pub fn init_supernet(
    space: &SearchSpace,
    num_classes: usize,
    layout: &[CellKind],
    seed: u64,
) -> Result<ParamStore, NasError> {
    space.validate()?;
    if num_classes < 2 {
        return Err(NasError::Config("need at least 2 classes".into()));
    }
    let c = space.stem_channels;
    let b = space.nodes_per_cell;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = StemParams {
        conv: he_array4((c, 3, 3, 3), 27, &mut rng),
        bn: BatchNorm2d::new(c),
    };
    // Deterministic init order: sorted key list.
    let mut keys = Vec::new();
    for kind in [CellKind::Normal, CellKind::Reduction] {
        for node in 0..b {
            for slot in [Slot::A, Slot::B] {
                for &op in &space.ops {
                    if op.has_params() {
                        keys.push(OpKey {
                            scope: Scope::Shared(kind),
                            node,
                            slot,
                            op,
                        });
                    }
                }
            }
        }
    }
    keys.sort();
    let mut ops = BTreeMap::new();
    for key in keys {
        let k = key.op.kernel().unwrap();
        ops.insert(key, init_sep_conv(c, k, &mut rng));
    }
    let mut projections = BTreeMap::new();
    for kind in [CellKind::Normal, CellKind::Reduction] {
        projections.insert(
            Scope::Shared(kind),
            he_array2((c, b * c), b * c, &mut rng),
        );
    }
    let classifier = ClassifierParams {
        w: he_array2((num_classes, c), c, &mut rng),
        b: Array1::zeros(num_classes),
    };
    Ok(ParamStore {
        space: space.clone(),
        num_classes,
        layout: layout.to_vec(),
        scoping: Scoping::Shared,
        stem,
        ops,
        projections,
        classifier,
    })
}

/// Build a standalone store for one genotype: fresh per-instance entries
/// for exactly the ops the genotype selects.
pub fn init_standalone(
    space: &SearchSpace,
    num_classes: usize,
    layout: &[CellKind],
    genotype: &CellGenotype,
    seed: u64,
) -> Result<ParamStore, NasError> {
    space.validate()?;
    genotype.validate(space)?;
    if num_classes < 2 {
        return Err(NasError::Config("need at least 2 classes".into()));
    }
    let c = space.stem_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = StemParams {
        conv: he_array4((c, 3, 3, 3), 27, &mut rng),
        bn: BatchNorm2d::new(c),
    };
    let mut keys = Vec::new();
    for (cell_idx, &kind) in layout.iter().enumerate() {
        for (node_idx, node) in genotype.cell(kind).iter().enumerate() {
            for (slot, op) in [(Slot::A, node.op_a), (Slot::B, node.op_b)] {
                if op.has_params() {
                    keys.push(OpKey {
                        scope: Scope::Instance(cell_idx),
                        node: node_idx,
                        slot,
                        op,
                    });
                }
            }
        }
    }
    keys.sort();
    let mut ops = BTreeMap::new();
    for key in keys {
        let k = key.op.kernel().unwrap();
        ops.insert(key, init_sep_conv(c, k, &mut rng));
    }
    let mut projections = BTreeMap::new();
    for (cell_idx, &kind) in layout.iter().enumerate() {
        let loose = genotype.loose_ends(kind).len();
        projections.insert(
            Scope::Instance(cell_idx),
            he_array2((c, loose * c), loose * c, &mut rng),
        );
    }
    let classifier = ClassifierParams {
        w: he_array2((num_classes, c), c, &mut rng),
        b: Array1::zeros(num_classes),
    };
    Ok(ParamStore {
        space: space.clone(),
        num_classes,
        layout: layout.to_vec(),
        scoping: Scoping::PerInstance,
        stem,
        ops,
        projections,
        classifier,
    })
}

// Full 3x3 convolution for the stem (stride 1, pad 1).
fn stem_conv_forward(x: &Array4<f64>, w: &Array4<f64>) -> Array4<f64> {
    let (b, c_in, h, ww) = x.dim();
    let c_out = w.dim().0;
    let oh = conv_out_size(h, 3, 1, 1);
    let ow = conv_out_size(ww, 3, 1, 1);
    let mut out = Array4::zeros((b, c_out, oh, ow));
    for bi in 0..b {
        for o in 0..c_out {
            for ci in 0..c_in {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox + kx) as isize - 1;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += x[[bi, ci, iy as usize, ix as usize]]
                                    * w[[o, ci, ky, kx]];
                            }
                        }
                        out[[bi, o, oy, ox]] += acc;
                    }
                }
            }
        }
    }
    out
}

fn stem_conv_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let (b, c_in, h, ww) = x.dim();
    let (c_out, _, _, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c_in, h, ww));
    let mut dw = Array4::zeros(w.dim());
    for bi in 0..b {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[bi, o, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox + kx) as isize - 1;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                dx[[bi, ci, iy as usize, ix as usize]] += g * w[[o, ci, ky, kx]];
                                dw[[o, ci, ky, kx]] +=
                                    g * x[[bi, ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

struct NodeSlotCache {
    op: OpId,
    key: Option<OpKey>,
    input: usize,
    stride: usize,
    cache: OpCache,
}

struct CellCache {
    scope: Scope,
    kind: CellKind,
    /// Average-pool calibration applied to input 0.
    s0_pool_dim: Option<(usize, usize, usize, usize)>,
    slots: Vec<[NodeSlotCache; 2]>,
    loose: Vec<usize>,
    concat: Array4<f64>,
}

struct NetCache {
    x: Array4<f64>,
    stem_bn_cache: Option<Bn2dCache>,
    stem_pre_relu: Array4<f64>,
    /// states[0] = states[1] = stem output; states[i+2] = cell i output.
    states: Vec<Array4<f64>>,
    cells: Vec<CellCache>,
    gap_in_dim: (usize, usize, usize, usize),
    gap_out: Array2<f64>,
}

/// Slice the projection for a given loose set from a stored matrix.
fn projection_slice(proj: &Array2<f64>, loose: &[usize], c: usize, shared: bool) -> Array2<f64> {
    if !shared {
        // Instance projections are stored pre-sliced.
        return proj.clone();
    }
    let mut out = Array2::zeros((proj.nrows(), loose.len() * c));
    for (li, &node) in loose.iter().enumerate() {
        for row in 0..proj.nrows() {
            for col in 0..c {
                out[[row, li * c + col]] = proj[[row, node * c + col]];
            }
        }
    }
    out
}

fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    let (b, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::zeros((b, total, h, w));
    let mut offset = 0;
    for part in parts {
        let c = part.dim().1;
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, offset + ci, y, x]] = part[[bi, ci, y, x]];
                    }
                }
            }
        }
        offset += c;
    }
    out
}

// 1x1 "conv" as a channel-mixing matrix multiply.
fn mix_forward(x: &Array4<f64>, w: &Array2<f64>) -> Array4<f64> {
    let (b, c_in, h, ww) = x.dim();
    let c_out = w.nrows();
    let mut out = Array4::zeros((b, c_out, h, ww));
    for bi in 0..b {
        for o in 0..c_out {
            for ci in 0..c_in {
                let coeff = w[[o, ci]];
                if coeff == 0.0 {
                    continue;
                }
                for y in 0..h {
                    for xx in 0..ww {
                        out[[bi, o, y, xx]] += coeff * x[[bi, ci, y, xx]];
                    }
                }
            }
        }
    }
    out
}

fn mix_backward(x: &Array4<f64>, w: &Array2<f64>, dy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
    let (b, c_in, h, ww) = x.dim();
    let c_out = w.nrows();
    let mut dx = Array4::zeros((b, c_in, h, ww));
    let mut dw = Array2::zeros((c_out, c_in));
    for bi in 0..b {
        for o in 0..c_out {
            for ci in 0..c_in {
                let coeff = w[[o, ci]];
                let mut acc = 0.0;
                for y in 0..h {
                    for xx in 0..ww {
                        let g = dy[[bi, o, y, xx]];
                        dx[[bi, ci, y, xx]] += coeff * g;
                        acc += g * x[[bi, ci, y, xx]];
                    }
                }
                dw[[o, ci]] += acc;
            }
        }
    }
    (dx, dw)
}

fn network_forward_cached(
    store: &ParamStore,
    genotype: &CellGenotype,
    x: &Array4<f64>,
    train: bool,
) -> Result<(Array2<f64>, NetCache), NasError> {
    genotype.validate(&store.space)?;
    let (batch, in_c, _, _) = x.dim();
    if in_c != 3 {
        return Err(NasError::Shape(format!("expected 3 input channels, got {in_c}")));
    }
    let c = store.channels();

    let stem_conv_out = stem_conv_forward(x, &store.stem.conv);
    let (stem_bn_out, stem_bn_cache) = if train {
        let (out, cache) = bn2d_forward_train(&store.stem.bn, &stem_conv_out);
        (out, Some(cache))
    } else {
        (bn2d_forward_eval(&store.stem.bn, &stem_conv_out), None)
    };
    drop(stem_conv_out);
    let stem_out = stem_bn_out.mapv(|v| v.max(0.0));

    let mut states: Vec<Array4<f64>> = vec![stem_out.clone(), stem_out.clone()];
    let mut cells = Vec::with_capacity(store.layout.len());

    for (cell_idx, &kind) in store.layout.iter().enumerate() {
        let scope = store.scope_of(cell_idx);
        let s0_raw = &states[cell_idx];
        let s1 = &states[cell_idx + 1];
        let needs_pool = s0_raw.dim().2 != s1.dim().2 || s0_raw.dim().3 != s1.dim().3;
        let (s0, s0_pool_dim) = if needs_pool {
            (avg_pool3(s0_raw, 2), Some(s0_raw.dim()))
        } else {
            (s0_raw.clone(), None)
        };

        let nodes = genotype.cell(kind);
        let mut node_outs: Vec<Array4<f64>> = Vec::with_capacity(nodes.len());
        let mut slots = Vec::with_capacity(nodes.len());
        for node in nodes {
            let mut slot_caches = Vec::with_capacity(2);
            let mut node_out: Option<Array4<f64>> = None;
            for (slot, input, op) in [
                (Slot::A, node.input_a, node.op_a),
                (Slot::B, node.input_b, node.op_b),
            ] {
                let source: &Array4<f64> = match input {
                    0 => &s0,
                    1 => s1,
                    i => &node_outs[i - 2],
                };
                let stride = if kind == CellKind::Reduction && input < 2 {
                    2
                } else {
                    1
                };
                let key = if op.has_params() {
                    Some(OpKey {
                        scope,
                        node: node_outs.len(),
                        slot,
                        op,
                    })
                } else {
                    None
                };
                let params = match &key {
                    Some(k) => Some(store.ops.get(k).ok_or_else(|| {
                        NasError::Shape(format!("missing op entry for {k:?}"))
                    })?),
                    None => None,
                };
                let (out, cache) = op_forward(op, params, source, stride, train)?;
                node_out = Some(match node_out {
                    Some(acc) => acc + &out,
                    None => out.clone(),
                });
                slot_caches.push(NodeSlotCache {
                    op,
                    key,
                    input,
                    stride,
                    cache,
                });
            }
            node_outs.push(node_out.unwrap());
            let b_cache = slot_caches.pop().unwrap();
            let a_cache = slot_caches.pop().unwrap();
            slots.push([a_cache, b_cache]);
        }

        let loose = genotype.loose_ends(kind);
        let parts: Vec<&Array4<f64>> = loose.iter().map(|&i| &node_outs[i]).collect();
        let concat = concat_channels(&parts);
        let proj = store
            .projections
            .get(&scope)
            .ok_or_else(|| NasError::Shape(format!("missing projection for {scope:?}")))?;
        let shared = matches!(scope, Scope::Shared(_));
        let slice = projection_slice(proj, &loose, c, shared);
        let cell_out = mix_forward(&concat, &slice);

        cells.push(CellCache {
            scope,
            kind,
            s0_pool_dim,
            slots,
            loose,
            concat,
        });
        states.push(cell_out);
    }

    // Global average pool then linear classifier.
    let last = states.last().unwrap();
    let (b, cc, h, w) = last.dim();
    let mut gap = Array2::zeros((batch, cc));
    for bi in 0..b {
        for ci in 0..cc {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += last[[bi, ci, y, xx]];
                }
            }
            gap[[bi, ci]] = acc / (h * w) as f64;
        }
    }
    let logits = gap.dot(&store.classifier.w.t()) + &store.classifier.b;

    Ok((
        logits,
        NetCache {
            x: x.clone(),
            stem_bn_cache,
            stem_pre_relu: stem_bn_out,
            states,
            cells,
            gap_in_dim: (b, cc, h, w),
            gap_out: gap,
        },
    ))
}

/// Class logits for a batch under one genotype. The seed parameter is
/// reserved; the current op set has no stochastic layers, so train/eval
/// differ only in which BN statistics they use.
pub fn supernet_forward(
    store: &ParamStore,
    genotype: &CellGenotype,
    x: &Array4<f64>,
    mode: NetMode,
    seed: u64,
) -> Result<Array2<f64>, NasError> {
    let _ = seed;
    let (logits, _) = network_forward_cached(store, genotype, x, mode == NetMode::Train)?;
    Ok(logits)
}

fn network_backward(
    store: &ParamStore,
    genotype: &CellGenotype,
    cache: &NetCache,
    dlogits: &Array2<f64>,
) -> Result<GradStore, NasError> {
    let c = store.channels();
    let mut grads = GradStore::default();

    // Classifier.
    grads.classifier_w = Some(dlogits.t().dot(&cache.gap_out));
    grads.classifier_b = Some(dlogits.sum_axis(ndarray::Axis(0)));
    let dgap = dlogits.dot(&store.classifier.w);

    // GAP.
    let (b, cc, h, w) = cache.gap_in_dim;
    let mut d_state_last = Array4::zeros((b, cc, h, w));
    let denom = (h * w) as f64;
    for bi in 0..b {
        for ci in 0..cc {
            let g = dgap[[bi, ci]] / denom;
            for y in 0..h {
                for xx in 0..w {
                    d_state_last[[bi, ci, y, xx]] = g;
                }
            }
        }
    }

    // Per-state gradient accumulators.
    let mut d_states: Vec<Array4<f64>> = cache
        .states
        .iter()
        .map(|s| Array4::zeros(s.dim()))
        .collect();
    *d_states.last_mut().unwrap() = d_state_last;

    for (cell_idx, cell) in cache.cells.iter().enumerate().rev() {
        let d_out = d_states[cell_idx + 2].clone();
        let nodes = genotype.cell(cell.kind);

        // Projection.
        let proj = store.projections.get(&cell.scope).unwrap();
        let shared = matches!(cell.scope, Scope::Shared(_));
        let slice = projection_slice(proj, &cell.loose, c, shared);
        let (d_concat, d_slice) = mix_backward(&cell.concat, &slice, &d_out);
        // Scatter the slice gradient back into the stored projection shape.
        let d_proj = if shared {
            let mut full = Array2::zeros(proj.dim());
            for (li, &node) in cell.loose.iter().enumerate() {
                for row in 0..proj.nrows() {
                    for col in 0..c {
                        full[[row, node * c + col]] = d_slice[[row, li * c + col]];
                    }
                }
            }
            full
        } else {
            d_slice
        };
        grads.add_projection(cell.scope, d_proj);

        // Split concat gradient into per-loose-node gradients.
        let mut d_nodes: Vec<Array4<f64>> = nodes
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let dim = {
                    // Node output dims equal concat spatial dims with C channels.
                    let (bb, _, hh, ww) = d_concat.dim();
                    let _ = i;
                    (bb, c, hh, ww)
                };
                Array4::zeros(dim)
            })
            .collect();
        for (li, &node) in cell.loose.iter().enumerate() {
            let (bb, _, hh, ww) = d_concat.dim();
            for bi in 0..bb {
                for ci in 0..c {
                    for y in 0..hh {
                        for xx in 0..ww {
                            d_nodes[node][[bi, ci, y, xx]] += d_concat[[bi, li * c + ci, y, xx]];
                        }
                    }
                }
            }
        }

        // Nodes in reverse.
        let mut d_s0_acc: Option<Array4<f64>> = None;
        let mut d_s1_acc: Option<Array4<f64>> = None;
        for node_idx in (0..nodes.len()).rev() {
            let dy = d_nodes[node_idx].clone();
            for slot_cache in cell.slots[node_idx].iter().rev() {
                let params = slot_cache.key.as_ref().map(|k| store.ops.get(k).unwrap());
                let (dx, op_grads) = op_backward(
                    slot_cache.op,
                    params,
                    &slot_cache.cache,
                    &dy,
                    slot_cache.stride,
                )?;
                if let (Some(key), Some(g)) = (slot_cache.key, op_grads) {
                    grads.add_op(key, g);
                }
                match slot_cache.input {
                    0 => match &mut d_s0_acc {
                        Some(acc) => *acc += &dx,
                        None => d_s0_acc = Some(dx),
                    },
                    1 => match &mut d_s1_acc {
                        Some(acc) => *acc += &dx,
                        None => d_s1_acc = Some(dx),
                    },
                    i => d_nodes[i - 2] += &dx,
                }
            }
        }

        // Route input gradients to the state accumulators, undoing the
        // calibration pool on input 0 when it was applied.
        if let Some(d_s1) = d_s1_acc {
            d_states[cell_idx + 1] += &d_s1;
        }
        if let Some(d_s0) = d_s0_acc {
            match cell.s0_pool_dim {
                Some(in_dim) => {
                    let d_raw = super::ops::avg_pool3_backward(in_dim, &d_s0, 2);
                    d_states[cell_idx] += &d_raw;
                }
                None => d_states[cell_idx] += &d_s0,
            }
        }
    }

    // Stem: states[0] and states[1] are both the stem output.
    let d_stem_out = &d_states[0] + &d_states[1];
    let mut d_bn_out = d_stem_out;
    for (g, &pre) in d_bn_out.iter_mut().zip(cache.stem_pre_relu.iter()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    let stem_cache = cache
        .stem_bn_cache
        .as_ref()
        .ok_or_else(|| NasError::Shape("backward through eval-mode stem".into()))?;
    let (d_conv_out, dgamma, dbeta) = bn2d_backward(&store.stem.bn, stem_cache, &d_bn_out);
    let (_, dw) = stem_conv_backward(&cache.x, &store.stem.conv, &d_conv_out);
    grads.stem_conv = Some(dw);
    grads.stem_gamma = Some(dgamma);
    grads.stem_beta = Some(dbeta);

    Ok(grads)
}

/// Cross-entropy loss and exact gradients for one batch under one
/// genotype, in train mode (batch-statistics BN).
pub fn supernet_backward(
    store: &ParamStore,
    genotype: &CellGenotype,
    x: &Array4<f64>,
    labels: &[usize],
) -> Result<(f64, GradStore), NasError> {
    let (loss, grads, _) = supernet_backward_full(store, genotype, x, labels)?;
    Ok((loss, grads))
}

pub(crate) enum BnSite {
    Stem,
    Op(OpKey),
}

pub(crate) type BnSiteStats = Vec<(BnSite, Bn2dCache)>;

pub(crate) fn supernet_backward_full(
    store: &ParamStore,
    genotype: &CellGenotype,
    x: &Array4<f64>,
    labels: &[usize],
) -> Result<(f64, GradStore, BnSiteStats), NasError> {
    let (logits, cache) = network_forward_cached(store, genotype, x, true)?;
    let (loss, dlogits) = cross_entropy_with_grad(&logits, labels);
    let grads = network_backward(store, genotype, &cache, &dlogits)?;
    let mut bn_sites = Vec::new();
    if let Some(c) = cache.stem_bn_cache {
        bn_sites.push((BnSite::Stem, c));
    }
    for cell in cache.cells {
        for slot_pair in cell.slots {
            for slot_cache in slot_pair {
                if let (Some(key), OpCache::SepConv { bn_cache: Some(c), .. }) =
                    (slot_cache.key, slot_cache.cache)
                {
                    bn_sites.push((BnSite::Op(key), c));
                }
            }
        }
    }
    Ok((loss, grads, bn_sites))
}

pub(crate) fn apply_bn_sites(store: &mut ParamStore, sites: &BnSiteStats) {
    for (site, cache) in sites {
        match site {
            BnSite::Stem => bn2d_update_running(&mut store.stem.bn, cache),
            BnSite::Op(key) => {
                if let Some(params) = store.ops.get_mut(key) {
                    bn2d_update_running(&mut params.bn, cache);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharedOptConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Global-norm gradient clip applied before each update.
    pub clip_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SharedOptState {
    pub nesterov: NesterovState,
    pub step: usize,
    pub config: SharedOptConfig,
}

impl SharedOptState {
    pub fn new(store: &ParamStore, config: SharedOptConfig) -> Self {
        Self {
            nesterov: NesterovState::new(store.num_params(), config.momentum),
            step: 0,
            config,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// One epoch of shared-weight training: per mini-batch, sample a genotype
/// from the controller, backprop cross-entropy through the supernet, and
/// apply Nesterov momentum at the cosine-annealed rate.
pub fn train_shared_epoch(
    store: &mut ParamStore,
    ctrl: &super::ControllerState,
    train: &EncodedDataset,
    opt: &mut SharedOptState,
    seed: u64,
) -> Result<f64, NasError> {
    use rand::seq::SliceRandom;
    if train.is_empty() {
        return Err(NasError::EmptySplit("shared training set".into()));
    }
    if train.has_test_tag() {
        return Err(NasError::Config("test-tagged samples in shared training".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    order.shuffle(&mut rng);
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(opt.config.batch_size.max(1)) {
        let sample_seed = splitmix64(seed ^ (opt.step as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let (genotype, _) =
            super::sample_genotype(ctrl, sample_seed, super::SampleMode::Stochastic);
        let (x, labels) = train.batch(chunk);
        let (loss, grads, bn_sites) = supernet_backward_full(store, &genotype, &x, &labels)?;
        let lr = cosine_lr(
            opt.step.min(opt.config.total_steps),
            opt.config.total_steps,
            opt.config.lr_max,
            opt.config.lr_min,
        )?;
        let mut flat = store.flatten();
        let mut grad_flat = grads.flatten(store);
        crate::opt::clip_global_norm(&mut grad_flat, opt.config.clip_norm);
        opt.nesterov.step(&mut flat, &grad_flat, lr);
        store.set_flat(&flat);
        apply_bn_sites(store, &bn_sites);
        opt.step += 1;
        total_loss += loss;
        batches += 1;
    }
    Ok(total_loss / batches as f64)
}

/// Accuracy of argmax predictions for a labeled batch under one genotype.
pub fn genotype_batch_accuracy(
    store: &ParamStore,
    genotype: &CellGenotype,
    x: &Array4<f64>,
    labels: &[usize],
) -> Result<f64, NasError> {
    // Batch statistics: shared running stats mix many architectures, so
    // child models are scored with their own batch stats.
    let (logits, _) = network_forward_cached(store, genotype, x, true)?;
    let preds = crate::nn::argmax_rows(&logits);
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
