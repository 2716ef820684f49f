//! Multi-task crystal graph network.
//!
//! Raw atom features are embedded to `atom_len`, refined by `n_conv`
//! convolutions over the crystal graph, mean-pooled into one crystal vector and
//! fed to one independent fully-connected head per task. The heads share
//! nothing but the pooled vector.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CrystalGraph;
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model config: {0}")]
    Config(String),
    #[error("graph {graph:?}: {what} has length {found}, model expects {expected}")]
    Dimension {
        graph: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvVariant {
    /// Shared neighbor weights: `g[(sum_jk v_j ⊕ u_ijk) W_c + v_i W_s + b_c + b_s]`.
    Simple,
    /// Edge-gated residual update:
    /// `v_i + sum_jk sigmoid(z W_c + b_c) ⊙ g(z W_s + b_s)`, `z = v_i ⊕ v_j ⊕ u_ijk`.
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_variant: ConvVariant,
    pub n_conv: usize,
    pub atom_len: usize,
    pub hidden_len: usize,
    /// Softplus layers per head before the scalar output layer.
    pub n_hidden_per_task: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_variant: ConvVariant::Gated,
            n_conv: 3,
            atom_len: 64,
            hidden_len: 128,
            n_hidden_per_task: 1,
            n_tasks: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.atom_len == 0 || self.hidden_len == 0 {
            return Err(ModelError::Config("atom_len and hidden_len must be >= 1".into()));
        }
        if self.n_conv == 0 {
            return Err(ModelError::Config("n_conv must be >= 1".into()));
        }
        if self.n_tasks == 0 {
            return Err(ModelError::Config("n_tasks must be >= 1".into()));
        }
        Ok(())
    }
}

/// `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Parameters of one convolution layer.
///
/// In the gated variant `conv` drives the sigmoid gate and `self_loop` the
/// softplus message, both reading `v_i ⊕ v_j ⊕ u`. In the simple variant
/// `conv` reads the summed `v_j ⊕ u` and `self_loop` reads `v_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub conv: Dense,
    pub self_loop: Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embed: Dense,
    pub convs: Vec<ConvLayer>,
    pub heads: Vec<Head>,
}

impl ModelParams {
    /// Seeded initialization. Matrices are drawn in a fixed order from one
    /// ChaCha8 stream seeded with `cfg.seed`: embedding, then each conv layer
    /// (`conv`, then `self_loop`), then each head in task order (hidden layers,
    /// then output). Biases start at zero and consume no randomness.
    ///
    /// Because heads come last, head 0 of an `n`-task model is identical to
    /// the only head of a 1-task model with the same seed.
    pub fn init(cfg: &ModelConfig, raw_atom_len: usize, bond_len: usize) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self::build(cfg, raw_atom_len, bond_len, |i, o| {
            Dense::glorot(i, o, &mut rng)
        }))
    }

    /// All weights and biases zero.
    pub fn zeros(cfg: &ModelConfig, raw_atom_len: usize, bond_len: usize) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self::build(cfg, raw_atom_len, bond_len, Dense::zeros))
    }

    fn build(
        cfg: &ModelConfig,
        raw_atom_len: usize,
        bond_len: usize,
        mut make: impl FnMut(usize, usize) -> Dense,
    ) -> Self {
        let a = cfg.atom_len;
        let embed = make(raw_atom_len, a);
        let convs = (0..cfg.n_conv)
            .map(|_| match cfg.conv_variant {
                ConvVariant::Gated => ConvLayer {
                    conv: make(2 * a + bond_len, a),
                    self_loop: make(2 * a + bond_len, a),
                },
                ConvVariant::Simple => ConvLayer {
                    conv: make(a + bond_len, a),
                    self_loop: make(a, a),
                },
            })
            .collect();
        let heads = (0..cfg.n_tasks)
            .map(|_| {
                let mut width = a;
                let hidden = (0..cfg.n_hidden_per_task)
                    .map(|_| {
                        let d = make(width, cfg.hidden_len);
                        width = cfg.hidden_len;
                        d
                    })
                    .collect();
                Head {
                    hidden,
                    output: make(width, 1),
                }
            })
            .collect();
        Self { embed, convs, heads }
    }

    pub fn raw_atom_len(&self) -> usize {
        self.embed.fan_in()
    }

    pub fn atom_len(&self) -> usize {
        self.embed.fan_out()
    }

    /// Bond feature length the conv layers were sized for.
    pub fn bond_len(&self, variant: ConvVariant) -> usize {
        let a = self.atom_len();
        let fan_in = self.convs[0].conv.fan_in();
        match variant {
            ConvVariant::Gated => fan_in - 2 * a,
            ConvVariant::Simple => fan_in - a,
        }
    }

    fn denses(&self) -> Vec<(String, &Dense)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (t, c) in self.convs.iter().enumerate() {
            out.push((format!("conv.{t}.conv"), &c.conv));
            out.push((format!("conv.{t}.self"), &c.self_loop));
        }
        for (p, h) in self.heads.iter().enumerate() {
            for (l, d) in h.hidden.iter().enumerate() {
                out.push((format!("head.{p}.hidden.{l}"), d));
            }
            out.push((format!("head.{p}.output"), &h.output));
        }
        out
    }

    fn denses_mut(&mut self) -> Vec<&mut Dense> {
        let mut out = vec![&mut self.embed];
        for c in self.convs.iter_mut() {
            out.push(&mut c.conv);
            out.push(&mut c.self_loop);
        }
        for h in self.heads.iter_mut() {
            out.extend(h.hidden.iter_mut());
            out.push(&mut h.output);
        }
        out
    }

    /// Every parameter tensor with a stable name, in initialization order.
    /// Names end in `.weight` or `.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.denses()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    (format!("{name}.weight"), &d.weight),
                    (format!("{name}.bias"), &d.bias),
                ]
            })
            .collect()
    }

    /// Mutable view in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.denses_mut()
            .into_iter()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Indices (into the flat order) of the parameters owned by head `p`.
    pub fn head_param_range(&self, p: usize) -> std::ops::Range<usize> {
        let trunk = 2 * (1 + 2 * self.convs.len());
        let per_head: Vec<usize> = self.heads.iter().map(|h| 2 * (h.hidden.len() + 1)).collect();
        let start = trunk + per_head[..p].iter().sum::<usize>();
        start..start + per_head[p]
    }

    /// Number of trunk tensors (embedding and convolutions), which come first
    /// in the flat order.
    pub fn trunk_len(&self) -> usize {
        2 * (1 + 2 * self.convs.len())
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Several graphs stacked into one disjoint graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub atom_features: Tensor,
    pub bond_features: Tensor,
    pub centers: Arc<[usize]>,
    pub neighbors: Arc<[usize]>,
    /// `(first atom row, atom count)` per graph.
    pub segments: Arc<[(usize, usize)]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&CrystalGraph], raw_atom_len: usize, bond_len: usize) -> Result<Self, ModelError> {
        if graphs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n_atoms: usize = graphs.iter().map(|g| g.n_atoms()).sum();
        let n_edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
        let mut atoms = Vec::with_capacity(n_atoms * raw_atom_len);
        let mut bonds = Vec::with_capacity(n_edges * bond_len);
        let mut centers = Vec::with_capacity(n_edges);
        let mut neighbors = Vec::with_capacity(n_edges);
        let mut segments = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for g in graphs {
            if g.n_atoms() == 0 {
                return Err(NumericsError::EmptyGraph { op: "batch" }.into());
            }
            for row in &g.atom_features {
                if row.len() != raw_atom_len {
                    return Err(ModelError::Dimension {
                        graph: g.id.clone(),
                        what: "atom feature",
                        expected: raw_atom_len,
                        found: row.len(),
                    });
                }
                atoms.extend_from_slice(row);
            }
            for e in &g.edges {
                if e.bond_feature.len() != bond_len {
                    return Err(ModelError::Dimension {
                        graph: g.id.clone(),
                        what: "bond feature",
                        expected: bond_len,
                        found: e.bond_feature.len(),
                    });
                }
                bonds.extend_from_slice(&e.bond_feature);
                centers.push(offset + e.center);
                neighbors.push(offset + e.neighbor);
            }
            segments.push((offset, g.n_atoms()));
            offset += g.n_atoms();
        }
        Ok(Self {
            atom_features: Tensor::new(vec![n_atoms, raw_atom_len], atoms)?,
            bond_features: Tensor::new(vec![n_edges, bond_len], bonds)?,
            centers: centers.into(),
            neighbors: neighbors.into(),
            segments: segments.into(),
        })
    }

    pub fn n_graphs(&self) -> usize {
        self.segments.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_features.rows()
    }
}

/// Tape handles for a [`Dense`].
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub conv: DenseVars,
    pub self_loop: DenseVars,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub hidden: Vec<DenseVars>,
    pub output: DenseVars,
}

/// All parameters registered on a tape, plus the flat list in
/// [`ModelParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embed: DenseVars,
    pub convs: Vec<ConvVars>,
    pub heads: Vec<HeadVars>,
    pub flat: Vec<Var>,
}

impl ParamVars {
    /// Registers `params` as trainable leaves (or constants when
    /// `trainable` is false).
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<Self, ModelError> {
        let mut flat = Vec::new();
        let mut reg = |d: &Dense| -> Result<DenseVars, ModelError> {
            let w = d.weight.clone().with_requires_grad(trainable);
            let b = d.bias.clone().with_requires_grad(trainable);
            let vars = DenseVars {
                weight: tape.leaf(w)?,
                bias: tape.leaf(b)?,
            };
            flat.push(vars.weight);
            flat.push(vars.bias);
            Ok(vars)
        };
        let embed = reg(&params.embed)?;
        let mut convs = Vec::new();
        for c in &params.convs {
            convs.push(ConvVars {
                conv: reg(&c.conv)?,
                self_loop: reg(&c.self_loop)?,
            });
        }
        let mut heads = Vec::new();
        for h in &params.heads {
            let hidden = h.hidden.iter().map(&mut reg).collect::<Result<Vec<_>, _>>()?;
            heads.push(HeadVars {
                hidden,
                output: reg(&h.output)?,
            });
        }
        Ok(Self {
            embed,
            convs,
            heads,
            flat,
        })
    }
}

/// Edge endpoints shared by every conv layer of a forward pass.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub centers: Arc<[usize]>,
    pub neighbors: Arc<[usize]>,
    pub n_atoms: usize,
}

/// Plain convolution. Atoms without edges see a zero neighbor sum.
pub fn conv_simple(
    tape: &mut Tape,
    state: Var,
    bonds: Var,
    edges: &EdgeIndex,
    layer: &ConvVars,
) -> Result<Var, ModelError> {
    let vj = tape.gather_rows(state, edges.neighbors.clone())?;
    let message = tape.concat_cols(&[vj, bonds])?;
    let summed = tape.scatter_add_rows(message, edges.centers.clone(), edges.n_atoms)?;
    let from_neighbors = tape.linear(summed, layer.conv.weight, layer.conv.bias)?;
    let from_self = tape.linear(state, layer.self_loop.weight, layer.self_loop.bias)?;
    let pre = tape.add(from_neighbors, from_self)?;
    Ok(tape.softplus(pre)?)
}

/// Edge-gated residual convolution. Atoms without edges pass through unchanged.
pub fn conv_gated(
    tape: &mut Tape,
    state: Var,
    bonds: Var,
    edges: &EdgeIndex,
    layer: &ConvVars,
) -> Result<Var, ModelError> {
    let vi = tape.gather_rows(state, edges.centers.clone())?;
    let vj = tape.gather_rows(state, edges.neighbors.clone())?;
    let z = tape.concat_cols(&[vi, vj, bonds])?;
    let gate_pre = tape.linear(z, layer.conv.weight, layer.conv.bias)?;
    let gate = tape.sigmoid(gate_pre)?;
    let core_pre = tape.linear(z, layer.self_loop.weight, layer.self_loop.bias)?;
    let core = tape.softplus(core_pre)?;
    let message = tape.mul(gate, core)?;
    let summed = tape.scatter_add_rows(message, edges.centers.clone(), edges.n_atoms)?;
    Ok(tape.add(state, summed)?)
}

/// Average of atom rows within each graph segment.
pub fn pool(tape: &mut Tape, state: Var, segments: Arc<[(usize, usize)]>) -> Result<Var, ModelError> {
    Ok(tape.segment_mean(state, segments)?)
}

/// Runs every head on the pooled rows; one `B x 1` output per task.
pub fn predict_tasks(tape: &mut Tape, pooled: Var, heads: &[HeadVars]) -> Result<Vec<Var>, ModelError> {
    heads
        .iter()
        .map(|head| {
            let mut h = pooled;
            for layer in &head.hidden {
                let pre = tape.linear(h, layer.weight, layer.bias)?;
                h = tape.softplus(pre)?;
            }
            Ok(tape.linear(h, head.output.weight, head.output.bias)?)
        })
        .collect()
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Per task, a `B x 1` column of normalized predictions.
    pub outputs: Vec<Var>,
    /// `B x atom_len` crystal vectors.
    pub pooled: Var,
}

/// Records the full network on `tape` for a batch.
pub fn forward(
    tape: &mut Tape,
    batch: &GraphBatch,
    vars: &ParamVars,
    cfg: &ModelConfig,
) -> Result<ForwardVars, ModelError> {
    let x = tape.constant(batch.atom_features.clone())?;
    let bonds = tape.constant(batch.bond_features.clone())?;
    let edges = EdgeIndex {
        centers: batch.centers.clone(),
        neighbors: batch.neighbors.clone(),
        n_atoms: batch.n_atoms(),
    };
    let mut state = tape.linear(x, vars.embed.weight, vars.embed.bias)?;
    for layer in &vars.convs {
        state = match cfg.conv_variant {
            ConvVariant::Simple => conv_simple(tape, state, bonds, &edges, layer)?,
            ConvVariant::Gated => conv_gated(tape, state, bonds, &edges, layer)?,
        };
    }
    let pooled = pool(tape, state, batch.segments.clone())?;
    let outputs = predict_tasks(tape, pooled, &vars.heads)?;
    Ok(ForwardVars { outputs, pooled })
}

/// Normalized per-task predictions for one crystal.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Forward pass without gradient tracking over a set of graphs.
pub fn predict_batch(
    graphs: &[&CrystalGraph],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Prediction>, ModelError> {
    let batch = GraphBatch::new(graphs, params.raw_atom_len(), params.bond_len(cfg.conv_variant))?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let out = forward(&mut tape, &batch, &vars, cfg)?;
    let pooled = tape.value(out.pooled);
    Ok((0..batch.n_graphs())
        .map(|g| Prediction {
            values: out.outputs.iter().map(|&o| tape.value(o).data()[g]).collect(),
            pooled: pooled.row(g).to_vec(),
        })
        .collect())
}

pub fn predict(graph: &CrystalGraph, params: &ModelParams, cfg: &ModelConfig) -> Result<Prediction, ModelError> {
    Ok(predict_batch(&[graph], params, cfg)?.remove(0))
}
