//! The full network: a kNN local operator lifts xyz into features, two
//! disentangle-and-attend blocks refine them, a second local operator and a
//! pointwise MLP widen them, and a head produces class or part logits.

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{AdjacencyMode, FusionMode, ModelConfig, Task};

use crate::error::{Error, Result};
use crate::gdm::{disentangle, VariationSplit};
use crate::graph::{build_adjacency, knn, GraphConfig, NeighborGraph};
use crate::pointcloud::PointCloud;
use crate::sgcam::{fuse_indices, self_attention_vars, SgcamParams};
use crate::tensor::{Activation, Bound, InitScheme, Linear, Mlp, MlpInit, ParamStore, Real, Tape, Tensor, Var};

/// Total number of learnable scalars in `store`.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.count_scalars()
}

// Decorrelates per-module seeds derived from one model seed.
fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Edge convolution: for every point `i` and each of its `k` nearest
/// neighbors `j` (in the current feature space) the edge feature
/// `[x_i, x_j − x_i]` goes through a shared MLP, then a max over the
/// neighbors. Without kNN it degrades to a pointwise MLP.
#[derive(Clone, Debug)]
pub struct LocalOperator {
    mlp: Mlp,
    in_dim: usize,
    k: Option<usize>,
}

impl LocalOperator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        k: Option<usize>,
        channel_norm: bool,
        seed: u64,
    ) -> Result<Self> {
        let init = MlpInit {
            last_activation: Activation::Relu,
            channel_norm,
            ..MlpInit::default()
        };
        let edge_dim = if k.is_some() { 2 * in_dim } else { in_dim };
        let mlp = Mlp::new(store, name, edge_dim, widths, init, seed)?;
        Ok(Self { mlp, in_dim, k })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward<T: Real>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let Some(k) = self.k else {
            return self.mlp.forward(tape, bound, x);
        };
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape {
                op: "local_operator",
                lhs: shape,
                rhs: vec![0, self.in_dim],
            });
        }
        let n = shape[0];
        if k >= n {
            return Err(Error::Config(format!("k_local = {k} needs more than {n} points")));
        }
        let nbrs = knn(&tape.value(x), k)?;
        // The first layer acts on [x_i, x_j − x_i] with W = [W_top; W_bot],
        // i.e. x_i (W_top − W_bot) + x_j W_bot: two N-row products instead
        // of one N·k-row product.
        let first = &self.mlp.layers()[0];
        let c = self.in_dim;
        let w = bound.var(first.weight);
        let w_top = tape.narrow(w, 0, c)?;
        let w_bot = tape.narrow(w, c, c)?;
        let w_centre = tape.sub(w_top, w_bot)?;
        let p = tape.matmul(x, w_centre)?;
        let p = tape.add(p, bound.var(first.bias))?;
        let q = tape.matmul(x, w_bot)?;
        let others: Vec<usize> = nbrs.into_iter().flatten().collect();
        if self.mlp.layers().len() == 1 {
            // The activation is monotone, so the max over edges reduces to
            // act(p_i + max_j q_j) and the edge tensor is never formed.
            let qmax = tape.gather_max(q, &others, k)?;
            let pre = tape.add(p, qmax)?;
            return self.mlp.activate(tape, bound, pre, 0);
        }
        let centre: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let pe = tape.gather_rows(p, &centre)?;
        let qe = tape.gather_rows(q, &others)?;
        let edges = tape.add(pe, qe)?;
        let h = self.mlp.forward_after_first(tape, bound, edges)?;
        let h = tape.reshape(h, &[n, k, self.out_dim()])?;
        tape.max_axis(h, 1)
    }
}

/// One disentangle-attend-project block with a residual connection.
#[derive(Clone, Debug)]
pub struct GdaBlock {
    pub attention: Option<SgcamParams>,
    pub projection: Linear,
}

/// What a block selected and how it attended, for inspection and export.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace<T> {
    pub split: Option<VariationSplit>,
    pub w_sharp: Option<Tensor<T>>,
    pub w_gentle: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Gdanet {
    config: ModelConfig,
    lift: LocalOperator,
    blocks: Vec<GdaBlock>,
    local: LocalOperator,
    final_mlp: Mlp,
    cls_head: Option<Mlp>,
    seg_heads: Vec<Mlp>,
}

impl Gdanet {
    /// Builds the network and a freshly initialized parameter store.
    pub fn init<T: Real>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut store)?;
        Ok((model, store))
    }

    /// Registers all parameters in `store`, in a fixed order.
    pub fn build<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let norm = config.channel_norm;
        let k_local = config.use_knn_local.then_some(config.k_local);
        let lift = LocalOperator::new(store, "lift", 3, &config.lift_widths, k_local, norm, sub_seed(s, "lift"))?;
        let c = lift.out_dim();
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let name = format!("block{b}");
            let attention = match config.fusion {
                FusionMode::None => None,
                _ => {
                    let att_cfg = crate::sgcam::SgcamConfig {
                        channel_norm: norm,
                        ..config.attention
                    };
                    let seed = sub_seed(s, &format!("{name}.att"));
                    Some(SgcamParams::new(store, &format!("{name}.att"), c, att_cfg, seed)?)
                }
            };
            let scheme = if config.zero_init_projection {
                InitScheme::Zeros
            } else {
                InitScheme::KaimingUniform
            };
            let seed = sub_seed(s, &format!("{name}.proj"));
            let projection = Linear::new(store, &format!("{name}.proj"), 2 * c, c, scheme, seed)?;
            blocks.push(GdaBlock { attention, projection });
        }
        let local = LocalOperator::new(store, "local", c, &config.local_widths, k_local, norm, sub_seed(s, "local"))?;
        let final_init = MlpInit {
            last_activation: Activation::Relu,
            channel_norm: norm,
            ..MlpInit::default()
        };
        let final_mlp = Mlp::new(store, "final", local.out_dim(), &config.final_widths, final_init, sub_seed(s, "final"))?;
        let f = final_mlp.out_dim();
        let head_init = MlpInit {
            channel_norm: norm,
            ..MlpInit::default()
        };
        let (cls_head, seg_heads) = match config.task {
            Task::Classification => {
                let mut widths = config.cls_head_widths.clone();
                widths.push(config.n_classes);
                // A single pooled row has no spread to normalize over.
                let init = MlpInit {
                    channel_norm: false,
                    ..head_init
                };
                let head = Mlp::new(store, "head", f, &widths, init, sub_seed(s, "head"))?;
                (Some(head), Vec::new())
            }
            Task::Segmentation => {
                let mut widths = config.seg_head_widths.clone();
                widths.push(config.n_classes);
                let heads = (0..config.n_seg_heads)
                    .map(|h| {
                        let name = format!("seg_head{h}");
                        let seed = sub_seed(s, &name);
                        Mlp::new(store, &name, 2 * f, &widths, head_init, seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (None, heads)
            }
        };
        Ok(Self {
            config,
            lift,
            blocks,
            local,
            final_mlp,
            cls_head,
            seg_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[GdaBlock] {
        &self.blocks
    }

    pub fn lift(&self) -> &LocalOperator {
        &self.lift
    }

    fn check_input(&self, n: usize) -> Result<usize> {
        let min = self.config.min_points();
        if n < min {
            return Err(Error::InvalidInput(format!(
                "the network needs at least {min} points, got {n}"
            )));
        }
        if self.blocks.is_empty() || self.config.fusion == FusionMode::None {
            Ok(0)
        } else {
            self.config.m_for(n)
        }
    }

    /// One block on features `x` (`N x C`).
    pub fn block_forward<T: Real>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        block: &GdaBlock,
        x: Var,
        m: usize,
        coords_graph: Option<&NeighborGraph>,
        trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Var> {
        let mut record = BlockTrace::default();
        let z = match &block.attention {
            None => tape.concat(&[x, x], 1)?,
            Some(att) if self.config.fusion == FusionMode::SelfAttention => {
                let out = self_attention_vars(tape, bound, att, x)?;
                record.w_sharp = out.w_sharp.map(|w| tape.value(w).clone());
                record.w_gentle = out.w_gentle.map(|w| tape.value(w).clone());
                out.z
            }
            Some(att) => {
                let split = {
                    let features = tape.value(x);
                    let owned;
                    let graph = match (self.config.adjacency, coords_graph) {
                        (AdjacencyMode::Coords, Some(g)) => g,
                        _ => {
                            owned = build_adjacency(&*features, &GraphConfig::with_k(self.config.k_graph))?;
                            &owned
                        }
                    };
                    disentangle(graph, &*features, m)?
                };
                let (sharp, gentle) = match self.config.fusion {
                    FusionMode::SharpOnly => (Some(split.sharp_idx()), None),
                    FusionMode::GentleOnly => (None, Some(split.gentle_idx())),
                    _ => (Some(split.sharp_idx()), Some(split.gentle_idx())),
                };
                let out = fuse_indices(tape, bound, att, x, x, sharp, gentle)?;
                record.w_sharp = out.w_sharp.map(|w| tape.value(w).clone());
                record.w_gentle = out.w_gentle.map(|w| tape.value(w).clone());
                record.split = Some(split);
                out.z
            }
        };
        let projected = block.projection.forward(tape, bound, z)?;
        if let Some(t) = trace {
            t.push(record);
        }
        tape.add(projected, x)
    }

    /// Per-point features before pooling, `N x F`.
    pub fn trunk<T: Real>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        coords: &Tensor<T>,
        mut trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Var> {
        if coords.rank() != 2 || coords.cols() != 3 {
            return Err(Error::Shape {
                op: "trunk",
                lhs: coords.shape().to_vec(),
                rhs: vec![0, 3],
            });
        }
        let m = self.check_input(coords.rows())?;
        let coords_graph = match self.config.adjacency {
            AdjacencyMode::Coords if !self.blocks.is_empty() && self.config.fusion != FusionMode::None => {
                Some(build_adjacency(coords, &GraphConfig::with_k(self.config.k_graph))?)
            }
            _ => None,
        };
        let x = tape.constant(coords.clone());
        let mut h = self.lift.forward(tape, bound, x)?;
        for block in &self.blocks {
            h = self.block_forward(tape, bound, block, h, m, coords_graph.as_ref(), trace.as_deref_mut())?;
        }
        let h = self.local.forward(tape, bound, h)?;
        self.final_mlp.forward(tape, bound, h)
    }

    /// Class logits, shape `[n_classes]`.
    pub fn classify_vars<T: Real>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        coords: &Tensor<T>,
        trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Var> {
        let head = self
            .cls_head
            .as_ref()
            .ok_or_else(|| Error::Config("model was built for segmentation".into()))?;
        let h = self.trunk(tape, bound, coords, trace)?;
        let pooled = tape.max_axis(h, 0)?;
        let f = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, f])?;
        let logits = head.forward(tape, bound, pooled)?;
        tape.reshape(logits, &[self.config.n_classes])
    }

    /// Per-point part logits from head `category`, shape `[N, n_parts]`.
    pub fn segment_vars<T: Real>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        coords: &Tensor<T>,
        category: usize,
        trace: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<Var> {
        if self.config.task != Task::Segmentation {
            return Err(Error::Config("model was built for classification".into()));
        }
        let head = self.seg_heads.get(category).ok_or_else(|| {
            Error::Config(format!(
                "segmentation head {category} out of range for {} heads",
                self.seg_heads.len()
            ))
        })?;
        let h = self.trunk(tape, bound, coords, trace)?;
        let n = coords.rows();
        let global = tape.max_axis(h, 0)?;
        let f = tape.shape(global)[0];
        let global = tape.reshape(global, &[1, f])?;
        let global = tape.gather_rows(global, &vec![0; n])?;
        let joined = tape.concat(&[h, global], 1)?;
        head.forward(tape, bound, joined)
    }

    pub fn forward_classify<T: Real>(&self, store: &ParamStore<T>, cloud: &PointCloud) -> Result<Tensor<T>> {
        Ok(self.forward_classify_traced(store, cloud)?.0)
    }

    pub fn forward_classify_traced<T: Real>(
        &self,
        store: &ParamStore<T>,
        cloud: &PointCloud,
    ) -> Result<(Tensor<T>, Vec<BlockTrace<T>>)> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut trace = Vec::new();
        let out = self.classify_vars(&tape, &bound, &cloud.coords_tensor(), Some(&mut trace))?;
        let logits = tape.value(out).clone();
        Ok((logits, trace))
    }

    pub fn forward_segment<T: Real>(
        &self,
        store: &ParamStore<T>,
        cloud: &PointCloud,
        category: usize,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_segment_traced(store, cloud, category)?.0)
    }

    pub fn forward_segment_traced<T: Real>(
        &self,
        store: &ParamStore<T>,
        cloud: &PointCloud,
        category: usize,
    ) -> Result<(Tensor<T>, Vec<BlockTrace<T>>)> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let mut trace = Vec::new();
        let out = self.segment_vars(&tape, &bound, &cloud.coords_tensor(), category, Some(&mut trace))?;
        let logits = tape.value(out).clone();
        Ok((logits, trace))
    }
}
