//! Weight-sharing supernet assembly, classification/projection heads, and
//! derivation of a discrete child network from a genotype.
//!
//! A [`Network`] is a structural plan (cells, edges, operation instances and
//! their parameter ids); the actual tensors live in a [`ParamStore`] so the
//! same plan can be replayed onto a fresh tape every step. Parameters are
//! initialized per-name from the seed, so two builds with one seed are
//! bit-identical, and a child derived with the same seed shares its surviving
//! parameters' initial values with the supernet.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::search_space::{mixed_edge, CellKind, CellSpec, Gating, OperationKind};
use crate::seeding::rng_for;
use crate::tensor::{Conv2dSpec, Element, PoolKind, Tape, Tensor, Var};

/// Static configuration of the supernet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Output dimension of the projection head.
    pub embed_dim: usize,
    /// Disable batch norm everywhere (tiny configs for exact-consistency
    /// tests between supernet and child).
    pub batch_norm: bool,
    /// Candidate operations per edge, canonical order.
    pub ops: Vec<OperationKind>,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            num_cells: 8,
            init_channels: 8,
            num_classes: 10,
            image_size: 32,
            embed_dim: 64,
            batch_norm: true,
            ops: OperationKind::ALL.to_vec(),
        }
    }
}

impl SupernetConfig {
    /// Reduction cells sit at 1/3 and 2/3 of the depth.
    pub fn reduction_positions(&self) -> Vec<usize> {
        let mut pos = vec![self.num_cells / 3, 2 * self.num_cells / 3];
        pos.dedup();
        pos.retain(|&p| p < self.num_cells);
        pos
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cells == 0 || self.init_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArg(
                "num_cells, init_channels and num_classes must be positive".into(),
            ));
        }
        let reductions = self.reduction_positions().len();
        let min_size = 1usize << reductions;
        if self.image_size < min_size || self.image_size % min_size != 0 {
            return Err(Error::InvalidArg(format!(
                "image size {} too small for {} reduction cells; must be a \
                 multiple of the computed minimum size {min_size}",
                self.image_size, reductions
            )));
        }
        if self.ops.is_empty() {
            return Err(Error::InvalidArg("empty candidate operation set".into()));
        }
        Ok(())
    }
}

/// Identifier of a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// All tensors owned by the network (stem, cells, heads), disjoint from the
/// architecture parameters and updated only by the weight optimizer.
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Iterate `(name, tensor)` in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Replace a tensor's data (same shape) — used by checkpoint restore.
    pub fn restore(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let id = self.lookup(name).ok_or_else(|| {
            Error::ConfigMismatch(format!("checkpoint parameter `{name}` not in network"))
        })?;
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint parameter `{name}` has {} values, network expects {}",
                data.len(),
                t.numel()
            )));
        }
        *t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(())
    }

    /// Register every parameter on a tape. Returns vars aligned with
    /// [`ParamId`] order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Binding { vars }
    }
}

/// Tape registration of a parameter store for one forward/backward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Adopt an externally registered var list (gradient-check harnesses);
    /// order must match [`ParamStore`] id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FrIds {
    conv1: ParamId,
    conv2: ParamId,
    bn: Option<BnIds>,
}

#[derive(Debug, Clone)]
enum OpParams {
    NoParams,
    FactorizedReduce(FrIds),
    SepConv {
        kernel: usize,
        dw1: ParamId,
        pw1: ParamId,
        bn1: Option<BnIds>,
        dw2: ParamId,
        pw2: ParamId,
        bn2: Option<BnIds>,
    },
    DilConv {
        kernel: usize,
        dw: ParamId,
        pw: ParamId,
        bn: Option<BnIds>,
    },
}

#[derive(Debug, Clone)]
struct OpInstance {
    kind: OperationKind,
    stride: usize,
    params: OpParams,
}

#[derive(Debug, Clone)]
struct EdgeInstance {
    src: usize,
    /// Row of the alpha matrix gating this edge (canonical edge index).
    edge_idx: usize,
    dst: usize,
    ops: Vec<OpInstance>,
}

#[derive(Debug, Clone)]
enum Preproc {
    ReluConvBn { conv: ParamId, bn: Option<BnIds> },
    FactorizedReduce(FrIds),
}

#[derive(Debug, Clone)]
struct CellPlan {
    kind: CellKind,
    channels: usize,
    pre0: Preproc,
    pre1: Preproc,
    edges: Vec<EdgeInstance>,
}

struct HeadPlan {
    classifier_w: ParamId,
    classifier_b: ParamId,
    projector_w1: ParamId,
    projector_b1: ParamId,
    projector_w2: ParamId,
    projector_b2: ParamId,
}

/// Which head terminates the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Classifier,
    Projector,
}

/// The two alpha matrices registered on a tape.
pub struct ArchVars {
    pub normal: Var,
    pub reduce: Var,
}

/// A runnable network plan: either the full weight-sharing supernet or a
/// discrete child derived from a genotype.
pub struct Network {
    pub cfg: SupernetConfig,
    stem_conv: ParamId,
    stem_bn: Option<BnIds>,
    cells: Vec<CellPlan>,
    head: HeadPlan,
    /// Channel count feeding the heads.
    final_channels: usize,
    is_child: bool,
}

/// Shared builder for supernet and child networks. `edge_ops(kind, edge)`
/// returns the operations instantiated on an edge.
struct Builder<'a, T: Element> {
    store: ParamStore<T>,
    seed: u64,
    batch_norm: bool,
    _cfg: &'a SupernetConfig,
}

impl<'a, T: Element> Builder<'a, T> {
    fn new(cfg: &'a SupernetConfig, seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            seed,
            batch_norm: cfg.batch_norm,
            _cfg: cfg,
        }
    }

    /// He fan-in normal initialization, seeded by parameter name.
    fn conv_param(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let fan_in: usize = shape[1] * shape[2] * shape[3];
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(self.seed, &["param", &name]);
        let t = Tensor::randn(shape, std, &mut rng);
        self.store.insert(name, t)
    }

    fn linear_param(&mut self, name: String, d: usize, k: usize) -> ParamId {
        let std = (2.0 / d as f64).sqrt();
        let mut rng = rng_for(self.seed, &["param", &name]);
        let t = Tensor::randn(vec![d, k], std, &mut rng);
        self.store.insert(name, t)
    }

    fn zeros_param(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> Option<BnIds> {
        if !self.batch_norm {
            return None;
        }
        let gamma = self
            .store
            .insert(format!("{prefix}.gamma"), Tensor::full(vec![channels], T::ONE));
        let beta = self.zeros_param(format!("{prefix}.beta"), vec![channels]);
        Some(BnIds { gamma, beta })
    }

    fn factorized_reduce(&mut self, prefix: &str, c_in: usize, c_out: usize) -> FrIds {
        let c1 = c_out - c_out / 2;
        let c2 = c_out / 2;
        let conv1 = self.conv_param(format!("{prefix}.conv1.weight"), vec![c1, c_in, 1, 1]);
        let conv2 = self.conv_param(format!("{prefix}.conv2.weight"), vec![c2, c_in, 1, 1]);
        let bn = self.bn(&format!("{prefix}.bn"), c_out);
        FrIds { conv1, conv2, bn }
    }

    fn preproc(&mut self, prefix: &str, c_in: usize, c_out: usize, reduce_spatial: bool) -> Preproc {
        if reduce_spatial {
            Preproc::FactorizedReduce(self.factorized_reduce(&format!("{prefix}.fr"), c_in, c_out))
        } else {
            let conv = self.conv_param(format!("{prefix}.conv.weight"), vec![c_out, c_in, 1, 1]);
            let bn = self.bn(&format!("{prefix}.bn"), c_out);
            Preproc::ReluConvBn { conv, bn }
        }
    }

    fn op_instance(
        &mut self,
        prefix: &str,
        kind: OperationKind,
        channels: usize,
        stride: usize,
    ) -> OpInstance {
        let params = match kind {
            OperationKind::None | OperationKind::MaxPool3x3 | OperationKind::AvgPool3x3 => {
                OpParams::NoParams
            }
            OperationKind::SkipConnect => {
                if stride == 1 {
                    OpParams::NoParams
                } else {
                    OpParams::FactorizedReduce(self.factorized_reduce(
                        &format!("{prefix}.fr"),
                        channels,
                        channels,
                    ))
                }
            }
            OperationKind::SepConv3x3 | OperationKind::SepConv5x5 => {
                let k = if kind == OperationKind::SepConv3x3 { 3 } else { 5 };
                OpParams::SepConv {
                    kernel: k,
                    dw1: self.conv_param(format!("{prefix}.dw1.weight"), vec![channels, 1, k, k]),
                    pw1: self.conv_param(
                        format!("{prefix}.pw1.weight"),
                        vec![channels, channels, 1, 1],
                    ),
                    bn1: self.bn(&format!("{prefix}.bn1"), channels),
                    dw2: self.conv_param(format!("{prefix}.dw2.weight"), vec![channels, 1, k, k]),
                    pw2: self.conv_param(
                        format!("{prefix}.pw2.weight"),
                        vec![channels, channels, 1, 1],
                    ),
                    bn2: self.bn(&format!("{prefix}.bn2"), channels),
                }
            }
            OperationKind::DilConv3x3 | OperationKind::DilConv5x5 => {
                let k = if kind == OperationKind::DilConv3x3 { 3 } else { 5 };
                OpParams::DilConv {
                    kernel: k,
                    dw: self.conv_param(format!("{prefix}.dw.weight"), vec![channels, 1, k, k]),
                    pw: self.conv_param(
                        format!("{prefix}.pw.weight"),
                        vec![channels, channels, 1, 1],
                    ),
                    bn: self.bn(&format!("{prefix}.bn"), channels),
                }
            }
        };
        OpInstance {
            kind,
            stride,
            params,
        }
    }
}

fn build_network<T: Element, F>(
    cfg: &SupernetConfig,
    seed: u64,
    is_child: bool,
    edge_ops: F,
) -> Result<(Network, ParamStore<T>)>
where
    F: Fn(CellKind, usize) -> Vec<OperationKind>,
{
    cfg.validate()?;
    let mut b = Builder::<T>::new(cfg, seed);

    let stem_conv = b.conv_param("stem.conv.weight".into(), vec![cfg.init_channels, 3, 3, 3]);
    let stem_bn = b.bn("stem.bn", cfg.init_channels);

    let reductions = cfg.reduction_positions();
    let mut c_pp = cfg.init_channels; // channels of cell k-2 output
    let mut c_p = cfg.init_channels; // channels of cell k-1 output
    let mut c_curr = cfg.init_channels;
    let mut prev_was_reduction = false;
    let mut cells = Vec::with_capacity(cfg.num_cells);

    for cell_idx in 0..cfg.num_cells {
        let is_reduction = reductions.contains(&cell_idx);
        if is_reduction {
            c_curr *= 2;
        }
        let kind = if is_reduction {
            CellKind::Reduce
        } else {
            CellKind::Normal
        };
        let prefix = format!("cell{cell_idx}");
        let pre0 = b.preproc(&format!("{prefix}.pre0"), c_pp, c_curr, prev_was_reduction);
        let pre1 = b.preproc(&format!("{prefix}.pre1"), c_p, c_curr, false);

        let mut edges = Vec::with_capacity(CellSpec::NUM_EDGES);
        for (edge_idx, (src, dst)) in CellSpec::edges().into_iter().enumerate() {
            let stride = if is_reduction && src < CellSpec::NUM_INPUT_NODES {
                2
            } else {
                1
            };
            let ops = edge_ops(kind, edge_idx)
                .into_iter()
                .map(|op| {
                    b.op_instance(
                        &format!("{prefix}.e{edge_idx}.{}", op.name()),
                        op,
                        c_curr,
                        stride,
                    )
                })
                .collect();
            edges.push(EdgeInstance {
                src,
                edge_idx,
                dst,
                ops,
            });
        }
        cells.push(CellPlan {
            kind,
            channels: c_curr,
            pre0,
            pre1,
            edges,
        });
        c_pp = c_p;
        c_p = CellSpec::NUM_INTERMEDIATE * c_curr;
        prev_was_reduction = is_reduction;
    }

    let final_channels = c_p;
    let hidden = 4 * cfg.embed_dim;
    let head = HeadPlan {
        classifier_w: b.linear_param("classifier.weight".into(), final_channels, cfg.num_classes),
        classifier_b: b.zeros_param("classifier.bias".into(), vec![cfg.num_classes]),
        projector_w1: b.linear_param("projector.fc1.weight".into(), final_channels, hidden),
        projector_b1: b.zeros_param("projector.fc1.bias".into(), vec![hidden]),
        projector_w2: b.linear_param("projector.fc2.weight".into(), hidden, cfg.embed_dim),
        projector_b2: b.zeros_param("projector.fc2.bias".into(), vec![cfg.embed_dim]),
    };

    Ok((
        Network {
            cfg: cfg.clone(),
            stem_conv,
            stem_bn,
            cells,
            head,
            final_channels,
            is_child,
        },
        b.store,
    ))
}

/// Build the full weight-sharing supernet: every candidate op on every edge.
pub fn build_supernet<T: Element>(
    cfg: &SupernetConfig,
    seed: u64,
) -> Result<(Network, ParamStore<T>)> {
    let ops = cfg.ops.clone();
    build_network(cfg, seed, false, move |_, _| ops.clone())
}

/// Build a discrete child containing only the genotype's retained ops, with
/// fresh (seed-derived) initialization and no gates.
pub fn derive_child<T: Element>(
    genotype: &Genotype,
    cfg: &SupernetConfig,
    seed: u64,
) -> Result<(Network, ParamStore<T>)> {
    genotype.validate()?;
    for edges in [&genotype.normal, &genotype.reduce] {
        for e in edges {
            if e.op != OperationKind::None && !cfg.ops.contains(&e.op) {
                return Err(Error::ConfigMismatch(format!(
                    "genotype uses {} which is not in the configured candidate set",
                    e.op.name()
                )));
            }
        }
    }
    let normal: Vec<OperationKind> = genotype.normal.iter().map(|e| e.op).collect();
    let reduce: Vec<OperationKind> = genotype.reduce.iter().map(|e| e.op).collect();
    build_network(cfg, seed, true, move |kind, edge_idx| {
        let op = match kind {
            CellKind::Normal => normal[edge_idx],
            CellKind::Reduce => reduce[edge_idx],
        };
        match op {
            OperationKind::None => vec![],
            op => vec![op],
        }
    })
}

impl Network {
    pub fn is_child(&self) -> bool {
        self.is_child
    }

    pub fn final_channels(&self) -> usize {
        self.final_channels
    }

    fn eps<T: Element>() -> T {
        T::from_f64(1e-5)
    }

    fn apply_bn<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
        bn: &Option<BnIds>,
    ) -> Result<Var> {
        match bn {
            Some(ids) => tape.batch_norm(x, binding.var(ids.gamma), binding.var(ids.beta), Self::eps()),
            None => Ok(x),
        }
    }

    fn factorized_reduce_fwd<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
        ids: &FrIds,
    ) -> Result<Var> {
        let act = tape.relu(x);
        let s2 = Conv2dSpec {
            stride: 2,
            ..Default::default()
        };
        let p1 = tape.conv2d(act, binding.var(ids.conv1), s2)?;
        let shifted = tape.offset2d(act, 1, 1)?;
        let p2 = tape.conv2d(shifted, binding.var(ids.conv2), s2)?;
        let cat = tape.concat_channels(&[p1, p2])?;
        self.apply_bn(tape, binding, cat, &ids.bn)
    }

    fn preproc_fwd<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
        pre: &Preproc,
    ) -> Result<Var> {
        match pre {
            Preproc::ReluConvBn { conv, bn } => {
                let act = tape.relu(x);
                let out = tape.conv2d(act, binding.var(*conv), Conv2dSpec::default())?;
                self.apply_bn(tape, binding, out, bn)
            }
            Preproc::FactorizedReduce(ids) => self.factorized_reduce_fwd(tape, binding, x, ids),
        }
    }

    fn op_fwd<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: Var,
        op: &OpInstance,
        zeros_cache: &mut Vec<(Vec<usize>, Var)>,
    ) -> Result<Var> {
        let stride = op.stride;
        match (&op.kind, &op.params) {
            (OperationKind::None, _) => {
                let s = tape.shape(x);
                let shape = vec![
                    s[0],
                    s[1],
                    (s[2] + stride - 1) / stride,
                    (s[3] + stride - 1) / stride,
                ];
                if let Some((_, v)) = zeros_cache.iter().find(|(sh, _)| *sh == shape) {
                    return Ok(*v);
                }
                let v = tape.zeros(shape.clone());
                zeros_cache.push((shape, v));
                Ok(v)
            }
            (OperationKind::MaxPool3x3, _) => tape.pool2d(x, PoolKind::Max, 3, stride, 1),
            (OperationKind::AvgPool3x3, _) => tape.pool2d(x, PoolKind::Avg, 3, stride, 1),
            (OperationKind::SkipConnect, OpParams::NoParams) => Ok(x),
            (OperationKind::SkipConnect, OpParams::FactorizedReduce(ids)) => {
                self.factorized_reduce_fwd(tape, binding, x, ids)
            }
            (
                _,
                OpParams::SepConv {
                    kernel,
                    dw1,
                    pw1,
                    bn1,
                    dw2,
                    pw2,
                    bn2,
                },
            ) => {
                let c = tape.shape(x)[1];
                let pad = kernel / 2;
                let dw_spec = |s: usize| Conv2dSpec {
                    stride: s,
                    padding: pad,
                    dilation: 1,
                    groups: c,
                };
                let act = tape.relu(x);
                let d1 = tape.conv2d(act, binding.var(*dw1), dw_spec(stride))?;
                let p1 = tape.conv2d(d1, binding.var(*pw1), Conv2dSpec::default())?;
                let b1 = self.apply_bn(tape, binding, p1, bn1)?;
                let act2 = tape.relu(b1);
                let d2 = tape.conv2d(act2, binding.var(*dw2), dw_spec(1))?;
                let p2 = tape.conv2d(d2, binding.var(*pw2), Conv2dSpec::default())?;
                self.apply_bn(tape, binding, p2, bn2)
            }
            (_, OpParams::DilConv { kernel, dw, pw, bn }) => {
                let c = tape.shape(x)[1];
                let spec = Conv2dSpec {
                    stride,
                    padding: kernel - 1,
                    dilation: 2,
                    groups: c,
                };
                let act = tape.relu(x);
                let d = tape.conv2d(act, binding.var(*dw), spec)?;
                let p = tape.conv2d(d, binding.var(*pw), Conv2dSpec::default())?;
                self.apply_bn(tape, binding, p, bn)
            }
            (kind, params) => Err(Error::InvalidArg(format!(
                "inconsistent op plan: {kind:?} with {}",
                match params {
                    OpParams::NoParams => "no params",
                    _ => "unexpected params",
                }
            ))),
        }
    }

    fn cell_fwd<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        cell: &CellPlan,
        s0: Var,
        s1: Var,
        arch: Option<(&ArchVars, Gating)>,
    ) -> Result<Var> {
        let p0 = self.preproc_fwd(tape, binding, s0, &cell.pre0)?;
        let p1 = self.preproc_fwd(tape, binding, s1, &cell.pre1)?;
        let mut states = vec![p0, p1];
        let mut zeros_cache: Vec<(Vec<usize>, Var)> = Vec::new();

        // Node shape inside this cell (after any reduction).
        let s1_shape = tape.shape(p1).to_vec();
        let reduction = cell.kind == CellKind::Reduce;
        let node_shape = vec![
            s1_shape[0],
            cell.channels,
            if reduction { s1_shape[2] / 2 } else { s1_shape[2] },
            if reduction { s1_shape[3] / 2 } else { s1_shape[3] },
        ];

        for dst in CellSpec::NUM_INPUT_NODES..CellSpec::NUM_INPUT_NODES + CellSpec::NUM_INTERMEDIATE
        {
            let mut acc: Option<Var> = None;
            for edge in cell.edges.iter().filter(|e| e.dst == dst) {
                let x = states[edge.src];
                let contribution = match arch {
                    Some((arch_vars, gating)) => {
                        let alpha_matrix = match cell.kind {
                            CellKind::Normal => arch_vars.normal,
                            CellKind::Reduce => arch_vars.reduce,
                        };
                        let alpha_row = tape.row(alpha_matrix, edge.edge_idx)?;
                        let outs = edge
                            .ops
                            .iter()
                            .map(|op| self.op_fwd(tape, binding, x, op, &mut zeros_cache))
                            .collect::<Result<Vec<_>>>()?;
                        Some(mixed_edge(tape, gating, &outs, alpha_row)?)
                    }
                    None => {
                        // Discrete child: zero or one retained op per edge.
                        match edge.ops.first() {
                            Some(op) => Some(self.op_fwd(tape, binding, x, op, &mut zeros_cache)?),
                            None => None,
                        }
                    }
                };
                if let Some(c) = contribution {
                    acc = Some(match acc {
                        Some(a) => tape.add(a, c)?,
                        None => c,
                    });
                }
            }
            // Nodes with no incoming retained edges contribute zero maps.
            let node = match acc {
                Some(a) => a,
                None => {
                    if let Some((_, v)) = zeros_cache.iter().find(|(sh, _)| *sh == node_shape) {
                        *v
                    } else {
                        let v = tape.zeros(node_shape.clone());
                        zeros_cache.push((node_shape.clone(), v));
                        v
                    }
                }
            };
            states.push(node);
        }
        tape.concat_channels(&states[CellSpec::NUM_INPUT_NODES..])
    }

    /// Run the backbone to the final cell's concatenated feature map,
    /// then global-average-pool to `[N, final_channels]`.
    fn features<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        images: Var,
        arch: Option<(&ArchVars, Gating)>,
    ) -> Result<Var> {
        let ishape = tape.shape(images).to_vec();
        if ishape.len() != 4
            || ishape[1] != 3
            || ishape[2] != self.cfg.image_size
            || ishape[3] != self.cfg.image_size
        {
            return Err(Error::ShapeMismatch(format!(
                "images shape {ishape:?}, expected [N, 3, {0}, {0}]",
                self.cfg.image_size
            )));
        }
        if arch.is_none() && !self.is_child {
            return Err(Error::InvalidArg(
                "supernet forward requires architecture parameters".into(),
            ));
        }
        let stem_spec = Conv2dSpec {
            padding: 1,
            ..Default::default()
        };
        let conv = tape.conv2d(images, binding.var(self.stem_conv), stem_spec)?;
        let stem = self.apply_bn(tape, binding, conv, &self.stem_bn)?;
        let mut s0 = stem;
        let mut s1 = stem;
        for cell in &self.cells {
            let out = self.cell_fwd(tape, binding, cell, s0, s1, arch)?;
            s0 = s1;
            s1 = out;
        }
        tape.mean_spatial(s1)
    }

    /// Forward to logits (classifier head) or embeddings (projector head).
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        images: Var,
        arch: Option<(&ArchVars, Gating)>,
        head: Head,
    ) -> Result<Var> {
        let feats = self.features(tape, binding, images, arch)?;
        match head {
            Head::Classifier => tape.linear(
                feats,
                binding.var(self.head.classifier_w),
                Some(binding.var(self.head.classifier_b)),
            ),
            Head::Projector => {
                let h = tape.linear(
                    feats,
                    binding.var(self.head.projector_w1),
                    Some(binding.var(self.head.projector_b1)),
                )?;
                let act = tape.relu(h);
                tape.linear(
                    act,
                    binding.var(self.head.projector_w2),
                    Some(binding.var(self.head.projector_b2)),
                )
            }
        }
    }
}
