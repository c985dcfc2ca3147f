use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sgcam::SgcamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// What a block fuses its input with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Sharp and gentle components (the full module).
    Both,
    SharpOnly,
    GentleOnly,
    /// Both branches attend to every point.
    SelfAttention,
    /// No attention: `Z = X ⊕ X`.
    None,
}

/// Where the block graphs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Rebuilt from each block's input features.
    Dynamic,
    /// Built once from the xyz coordinates and shared by both blocks.
    Coords,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Classes (classification) or parts per head (segmentation).
    pub n_classes: usize,
    pub n_seg_heads: usize,
    pub k_local: usize,
    pub k_graph: usize,
    /// Points per component; `None` selects a quarter of the cloud.
    pub m: Option<usize>,
    /// Edge MLP of the first local operator (input is xyz).
    pub lift_widths: Vec<usize>,
    /// Channel width `C` inside the blocks; the fused width is `2C`.
    pub block_channels: usize,
    pub n_blocks: usize,
    /// Edge MLP of the second local operator.
    pub local_widths: Vec<usize>,
    /// Pointwise MLP before pooling.
    pub final_widths: Vec<usize>,
    /// Hidden widths of the classification head.
    pub cls_head_widths: Vec<usize>,
    /// Hidden widths of each segmentation head.
    pub seg_head_widths: Vec<usize>,
    pub attention: SgcamConfig,
    pub fusion: FusionMode,
    pub use_knn_local: bool,
    pub adjacency: AdjacencyMode,
    /// Per-cloud channel normalization after hidden MLP layers.
    pub channel_norm: bool,
    /// Start the block projections at zero so each block is the identity.
    pub zero_init_projection: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            n_classes: 4,
            n_seg_heads: 1,
            k_local: 20,
            k_graph: 20,
            m: None,
            lift_widths: vec![64],
            block_channels: 64,
            n_blocks: 2,
            local_widths: vec![128],
            final_widths: vec![512],
            cls_head_widths: vec![256],
            seg_head_widths: vec![128],
            attention: SgcamConfig::default(),
            fusion: FusionMode::Both,
            use_knn_local: true,
            adjacency: AdjacencyMode::Dynamic,
            channel_norm: true,
            zero_init_projection: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn segmentation(n_parts: usize, n_heads: usize) -> Self {
        Self {
            task: Task::Segmentation,
            n_classes: n_parts,
            n_seg_heads: n_heads,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            &self.lift_widths,
            &self.local_widths,
            &self.final_widths,
        ];
        if widths.iter().any(|w| w.is_empty() || w.contains(&0))
            || self.cls_head_widths.contains(&0)
            || self.seg_head_widths.contains(&0)
        {
            return Err(Error::Config("layer widths must be non-empty and positive".into()));
        }
        if self.n_classes == 0 || self.block_channels == 0 || self.attention.embed_dim == 0 {
            return Err(Error::Config("class count and block widths must be positive".into()));
        }
        if self.n_blocks > 2 {
            return Err(Error::Config(format!("at most two blocks are supported, got {}", self.n_blocks)));
        }
        if *self.lift_widths.last().unwrap() != self.block_channels && self.n_blocks > 0 {
            return Err(Error::Config(format!(
                "the first local operator must output the block width {}, got {}",
                self.block_channels,
                self.lift_widths.last().unwrap()
            )));
        }
        if self.k_local == 0 || self.k_graph == 0 {
            return Err(Error::Config("k_local and k_graph must be positive".into()));
        }
        if self.m == Some(0) {
            return Err(Error::Config("m must be positive".into()));
        }
        if self.task == Task::Segmentation && self.n_seg_heads == 0 {
            return Err(Error::Config("segmentation needs at least one head".into()));
        }
        Ok(())
    }

    /// Component size for a cloud of `n` points.
    pub fn m_for(&self, n: usize) -> Result<usize> {
        let m = self.m.unwrap_or((n / 4).max(1));
        if 2 * m > n {
            return Err(Error::Config(format!(
                "selection overlap: m = {m} exceeds half of N = {n}"
            )));
        }
        Ok(m)
    }

    /// Number of scalar parameters the network built from this config
    /// holds, computed without allocating; saturates instead of overflowing.
    pub fn scalar_count(&self) -> u128 {
        fn mlp(input: usize, widths: &[usize], norm: bool) -> u128 {
            let mut prev = input as u128;
            let mut total = 0u128;
            for (l, &w) in widths.iter().enumerate() {
                let w = w as u128;
                total = total.saturating_add(prev.saturating_mul(w).saturating_add(w));
                if norm && l + 1 < widths.len() {
                    total = total.saturating_add(2 * w);
                }
                prev = w;
            }
            total
        }
        let norm = self.channel_norm;
        let edge = |d: usize| if self.use_knn_local { 2 * d as u128 } else { d as u128 };
        let last = |w: &[usize]| w.last().copied().unwrap_or(0);
        let c = last(&self.lift_widths);
        let mut total = mlp(edge(3) as usize, &self.lift_widths, norm);
        let d = self.attention.embed_dim;
        let mut block = (2 * c as u128).saturating_mul(c as u128).saturating_add(c as u128);
        if self.fusion != FusionMode::None {
            let key = mlp(c, &[d, d], norm);
            let value = mlp(c, &[c, c], norm);
            block = block.saturating_add(key.saturating_mul(4)).saturating_add(value.saturating_mul(2));
        }
        total = total.saturating_add(block.saturating_mul(self.n_blocks as u128));
        total = total.saturating_add(mlp(edge(c).min(usize::MAX as u128) as usize, &self.local_widths, norm));
        total = total.saturating_add(mlp(last(&self.local_widths), &self.final_widths, norm));
        let f = last(&self.final_widths);
        match self.task {
            Task::Classification => {
                let widths: Vec<usize> = self.cls_head_widths.iter().copied().chain([self.n_classes]).collect();
                total.saturating_add(mlp(f, &widths, false))
            }
            Task::Segmentation => {
                let widths: Vec<usize> = self.seg_head_widths.iter().copied().chain([self.n_classes]).collect();
                let head = mlp(f.saturating_mul(2), &widths, norm);
                total.saturating_add(head.saturating_mul(self.n_seg_heads as u128))
            }
        }
    }

    /// Smallest cloud the network accepts.
    pub fn min_points(&self) -> usize {
        let graph = if self.n_blocks > 0 && self.fusion != FusionMode::None {
            self.k_graph
        } else {
            0
        };
        let local = if self.use_knn_local { self.k_local } else { 0 };
        local.max(graph) + 1
    }

    /// Canonical JSON used inside checkpoints and manifests.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
