//! Densely connected 3D U-net: a heavy residual encoder, nested dense skip
//! pathways, a light decoder and summed multi-level segmentation heads.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::ConvGeometry;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_size: [usize; 3],
    pub depth: usize,
    pub base_filters: usize,
    pub groupnorm_groups: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 3,
            patch_size: [128; 3],
            depth: 5,
            base_filters: 16,
            groupnorm_groups: 8,
            dropout_rate: 0.3,
            weight_decay: 1e-5,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if !matches!(self.out_channels, 1 | 3) {
            return fail(format!("out_channels must be 1 or 3, got {}", self.out_channels));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".to_string());
        }
        if self.groupnorm_groups == 0 || self.base_filters % self.groupnorm_groups != 0 {
            return fail(format!(
                "base_filters {} must be divisible by groupnorm_groups {}",
                self.base_filters, self.groupnorm_groups
            ));
        }
        let factor = 1usize << (self.depth - 1);
        if self.patch_size.iter().any(|&p| p == 0 || p % factor != 0) {
            return fail(format!(
                "patch size {:?} must be divisible by 2^(depth-1) = {factor}",
                self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".to_string());
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    fn dims_at(&self, level: usize) -> [usize; 3] {
        self.patch_size.map(|p| p >> level)
    }
}

/// Convolution optionally followed by group normalization and ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    geo: ConvGeometry,
}

impl ConvUnit {
    fn normalized(
        params: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let geo = ConvGeometry {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: 3,
            stride,
            pad: 1,
        };
        Self {
            weight: params.conv_weight(name, out_ch, in_ch, 3),
            bias: None,
            norm: Some(params.norm(&format!("{name}.norm"), out_ch)),
            geo,
        }
    }

    fn pointwise(params: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let geo = ConvGeometry {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        Self {
            weight: params.conv_weight(name, out_ch, in_ch, 1),
            bias: Some(params.bias(name, out_ch)),
            norm: None,
            geo,
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId, groups: usize) -> NodeId {
        let y = g.conv(x, self.weight, self.bias, self.geo);
        let Some((gamma, beta)) = self.norm else {
            return y;
        };
        let n = g.group_norm(y, gamma, beta, groups);
        g.release(y);
        let r = g.relu(n);
        g.release(n);
        r
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    first: ConvUnit,
    second: ConvUnit,
}

impl ResidualBlock {
    fn new(params: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            first: ConvUnit::normalized(params, &format!("{name}.conv1"), channels, channels, 1),
            second: ConvUnit::normalized(params, &format!("{name}.conv2"), channels, channels, 1),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId, groups: usize) -> NodeId {
        let a = self.first.apply(g, x, groups);
        let b = self.second.apply(g, a, groups);
        g.release(a);
        let out = g.add(x, b);
        g.release(b);
        out
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    /// Stem convolution at level 0, strided downsampling below it.
    entry: ConvUnit,
    blocks: Vec<ResidualBlock>,
}

/// Node `(level, column)` of the nested skip grid, `column ≥ 1`.
#[derive(Debug, Clone)]
struct DenseNode {
    level: usize,
    column: usize,
    /// 1×1×1 projection of the coarser node to this level's channel count.
    project: ConvUnit,
    conv: ConvUnit,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<EncoderLevel>,
    /// Ordered column by column so that every input exists before it is read.
    dense: Vec<DenseNode>,
    /// One head per decoder level `0..depth-1`.
    heads: Vec<ConvUnit>,
}

pub const RESIDUAL_BLOCKS_PER_LEVEL: usize = 2;

/// A built network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetworkConfig,
    params: ParamStore,
    layout: Layout,
}

pub fn build_network(config: &NetworkConfig) -> Result<Model> {
    config.validate()?;
    let mut params = ParamStore::new(config.init_seed);
    let depth = config.depth;

    let mut encoder = Vec::with_capacity(depth);
    for level in 0..depth {
        let ch = config.channels_at(level);
        let entry = if level == 0 {
            ConvUnit::normalized(&mut params, "enc0.stem", config.in_channels, ch, 1)
        } else {
            ConvUnit::normalized(
                &mut params,
                &format!("enc{level}.down"),
                config.channels_at(level - 1),
                ch,
                2,
            )
        };
        let blocks = (0..RESIDUAL_BLOCKS_PER_LEVEL)
            .map(|b| ResidualBlock::new(&mut params, &format!("enc{level}.res{b}"), ch))
            .collect();
        encoder.push(EncoderLevel { entry, blocks });
    }

    let mut dense = Vec::new();
    for column in 1..depth {
        for level in 0..depth - column {
            let ch = config.channels_at(level);
            let name = format!("dense{level}_{column}");
            dense.push(DenseNode {
                level,
                column,
                project: ConvUnit::pointwise(
                    &mut params,
                    &format!("{name}.project"),
                    config.channels_at(level + 1),
                    ch,
                ),
                conv: ConvUnit::normalized(&mut params, &format!("{name}.conv"), (column + 1) * ch, ch, 1),
            });
        }
    }

    let heads = (0..depth - 1)
        .map(|level| {
            ConvUnit::pointwise(
                &mut params,
                &format!("head{level}"),
                config.channels_at(level),
                config.out_channels,
            )
        })
        .collect();

    Ok(Model {
        config: config.clone(),
        params,
        layout: Layout {
            encoder,
            dense,
            heads,
        },
    })
}

impl Model {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_input(&self, input: &Array4<f64>) -> Result<()> {
        let s = input.shape();
        let expected = [
            self.config.in_channels,
            self.config.patch_size[0],
            self.config.patch_size[1],
            self.config.patch_size[2],
        ];
        if s != expected {
            return Err(Error::ShapeMismatch(format!(
                "network input {s:?}, expected {expected:?}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass into `g` and returns the sigmoid output node.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        input: &Array4<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.check_input(input)?;
        let cfg = &self.config;
        let depth = cfg.depth;
        let groups = cfg.groupnorm_groups;
        let x = g.input(input.as_standard_layout().into_owned());

        // grid[level][column]
        let mut grid: Vec<Vec<NodeId>> = vec![Vec::new(); depth];
        for (level, enc) in self.layout.encoder.iter().enumerate() {
            let src = if level == 0 { x } else { grid[level - 1][0] };
            let mut h = enc.entry.apply(g, src, groups);
            for block in &enc.blocks {
                let next = block.apply(g, h, groups);
                g.release(h);
                h = next;
            }
            grid[level].push(h);
        }
        g.release(x);

        for node in &self.layout.dense {
            let (level, column) = (node.level, node.column);
            // 1×1 projection and trilinear upsampling commute (both linear,
            // interpolation weights sum to one), so project at the coarse scale.
            let coarse = grid[level + 1][column - 1];
            let projected = node.project.apply(g, coarse, groups);
            let up = g.resize(projected, cfg.dims_at(level));
            g.release(projected);
            let mut inputs = grid[level].clone();
            inputs.push(up);
            let merged = g.concat(&inputs);
            g.release(up);
            let merged = match dropout_rng.as_deref_mut() {
                Some(rng) if cfg.dropout_rate > 0.0 => {
                    let d = g.dropout(merged, cfg.dropout_rate, rng);
                    g.release(merged);
                    d
                }
                _ => merged,
            };
            let out = node.conv.apply(g, merged, groups);
            g.release(merged);
            grid[level].push(out);
            // the coarser level's last node has now been read by the dense
            // grid; only its head still needs it
            if level + column == depth - 1 {
                let coarser = level + 1;
                let keep = if coarser < depth - 1 { 1 } else { 0 };
                let done = grid[coarser].len() - keep;
                for &n in &grid[coarser][..done] {
                    g.release(n);
                }
            }
        }

        // Deep supervision: heads from coarse to fine, each upsampled and
        // added to the next finer one.
        let mut acc: Option<NodeId> = None;
        for level in (0..depth - 1).rev() {
            let decoder = grid[level][depth - 1 - level];
            let head = self.layout.heads[level].apply(g, decoder, groups);
            g.release(decoder);
            acc = Some(match acc {
                None => head,
                Some(prev) => {
                    let up = g.resize(prev, cfg.dims_at(level));
                    g.release(prev);
                    let sum = g.add(up, head);
                    g.release(up);
                    g.release(head);
                    sum
                }
            });
        }
        for column in &grid[0] {
            g.release(*column);
        }
        let logits = acc.expect("depth >= 2 yields at least one head");
        let out = g.sigmoid(logits);
        g.release(logits);
        Ok(out)
    }

    /// Evaluation-mode forward pass, or training mode when `dropout_rng` is given.
    pub fn forward(&self, input: &Array4<f64>, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Array4<f64>> {
        let mut g = Graph::new(&self.params, false);
        let out = self.forward_graph(&mut g, input, dropout_rng)?;
        Ok(g.take(out))
    }
}

/// Anything that maps a 4-channel patch to per-channel probabilities.
pub trait Predictor: Sync {
    fn patch_size(&self) -> [usize; 3];
    fn out_channels(&self) -> usize;
    fn predict(&self, patch: &Array4<f64>) -> Result<Array4<f64>>;
}

impl Predictor for Model {
    fn patch_size(&self) -> [usize; 3] {
        self.config.patch_size
    }

    fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    fn predict(&self, patch: &Array4<f64>) -> Result<Array4<f64>> {
        self.forward(patch, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn toy_config(depth: usize, base: usize, patch: usize, out: usize) -> NetworkConfig {
        NetworkConfig {
            out_channels: out,
            patch_size: [patch; 3],
            depth,
            base_filters: base,
            groupnorm_groups: 2,
            ..NetworkConfig::default()
        }
    }

    fn random_input(patch: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((4, patch, patch, patch), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn multitask_output_shape_and_range() {
        let model = build_network(&toy_config(3, 4, 32, 3)).unwrap();
        let out = model.forward(&random_input(32, 1), None).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32, 32]);
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn cascaded_stage_has_one_channel() {
        let model = build_network(&toy_config(3, 4, 32, 1)).unwrap();
        let out = model.forward(&random_input(32, 2), None).unwrap();
        assert_eq!(out.shape(), &[1, 32, 32, 32]);
    }

    #[test]
    fn parameter_count_scales_quadratically_with_width() {
        let small = build_network(&toy_config(3, 4, 32, 3)).unwrap().parameter_count();
        let large = build_network(&toy_config(3, 8, 32, 3)).unwrap().parameter_count();
        let ratio = large as f64 / small as f64;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let model = build_network(&toy_config(2, 4, 16, 3)).unwrap();
        let input = random_input(16, 3);
        assert_eq!(model.forward(&input, None).unwrap(), model.forward(&input, None).unwrap());
        let zeros = model.forward(&Array4::zeros((4, 16, 16, 16)), None).unwrap();
        assert!(zeros.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn train_mode_varies_only_through_dropout() {
        let model = build_network(&toy_config(2, 4, 16, 1)).unwrap();
        let input = random_input(16, 4);
        let a = model.forward(&input, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        let b = model.forward(&input, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        let c = model.forward(&input, Some(&mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut no_dropout = toy_config(2, 4, 16, 1);
        no_dropout.dropout_rate = 0.0;
        let model = build_network(&no_dropout).unwrap();
        let eval = model.forward(&input, None).unwrap();
        let train = model.forward(&input, Some(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
        assert_eq!(eval, train);
    }

    #[test]
    fn rejects_indivisible_patch() {
        let mut cfg = toy_config(3, 4, 32, 3);
        cfg.patch_size = [32, 30, 32];
        assert!(matches!(build_network(&cfg), Err(Error::Config(_))));
        cfg.patch_size = [32; 3];
        cfg.groupnorm_groups = 3;
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model = build_network(&toy_config(2, 4, 16, 3)).unwrap();
        assert!(model.forward(&random_input(32, 0), None).is_err());
    }

    #[test]
    fn recorded_and_streaming_passes_agree() {
        let model = build_network(&toy_config(3, 4, 16, 3)).unwrap();
        let input = random_input(16, 5);
        let mut g = Graph::new(model.params(), true);
        let out = model.forward_graph(&mut g, &input, None).unwrap();
        assert_eq!(g.value(out), &model.forward(&input, None).unwrap());
    }
}
