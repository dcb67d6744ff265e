//! Adaptation head: projects hidden states over the vision token positions
//! back to a dense unit-range depth map, then rescales to meters.
//!
//! The head slices the last N token states, applies a linear layer, folds
//! them into a g x g feature map, runs three UpsampleBN blocks (each doubles
//! the spatial side), collapses to one channel, resizes bilinearly to the
//! target resolution, and squashes through a sigmoid.

use crate::dataset::DepthMap;
use crate::error::{Error, Result};
use crate::init;
use crate::tape::{ParamRegistry, Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Text encoder width feeding the head.
    pub input_width: usize,
    /// Patch grid side; the vision token count must equal its square.
    pub grid_side: usize,
    /// Channel schedule [C0, C1, C2, C3] across the three blocks.
    pub channels: [usize; 4],
    /// Output resolution in pixels.
    pub target: usize,
}

impl HeadConfig {
    pub fn new(
        input_width: usize,
        n_vision_tokens: usize,
        channels: [usize; 4],
        target: usize,
    ) -> Result<Self> {
        let g = (n_vision_tokens as f64).sqrt().round() as usize;
        if g * g != n_vision_tokens {
            return Err(Error::Shape(format!(
                "vision token count {n_vision_tokens} is not a perfect square"
            )));
        }
        let cfg = HeadConfig {
            input_width,
            grid_side: g,
            channels,
            target,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("channel schedule must be positive".into()));
        }
        if self.grid_side * 8 > self.target {
            return Err(Error::Config(format!(
                "grid {} upsampled x8 exceeds target {}",
                self.grid_side, self.target
            )));
        }
        Ok(())
    }

    pub fn n_vision_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Desk-scale channel schedule.
    pub fn desk_channels() -> [usize; 4] {
        [16, 8, 8, 4]
    }

    /// Published-scale channel schedule.
    pub fn paper_channels() -> [usize; 4] {
        [128, 64, 32, 16]
    }
}

/// 2x nearest upsample, then conv + batch norm + leaky rectification with
/// a residual path (1x1 projection when the channel count changes).
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleBnBlock {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    /// Present only when input and output channel counts differ.
    pub proj_w: Option<Tensor>,
}

impl UpsampleBnBlock {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        UpsampleBnBlock {
            conv_w: init::gaussian(rng, [c_out, c_in, 3, 3], init::kaiming_sigma(c_in * 9)),
            conv_b: Tensor::zeros([c_out]),
            bn_gamma: Tensor::filled([c_out], 1.0),
            bn_beta: Tensor::zeros([c_out]),
            bn_mean: vec![0.0; c_out],
            bn_var: vec![1.0; c_out],
            proj_w: (c_in != c_out)
                .then(|| init::gaussian(rng, [c_out, c_in, 1, 1], init::kaiming_sigma(c_in))),
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize) -> Self {
        UpsampleBnBlock {
            conv_w: Tensor::zeros([c_out, c_in, 3, 3]),
            conv_b: Tensor::zeros([c_out]),
            bn_gamma: Tensor::filled([c_out], 1.0),
            bn_beta: Tensor::zeros([c_out]),
            bn_mean: vec![0.0; c_out],
            bn_var: vec![1.0; c_out],
            proj_w: (c_in != c_out).then(|| Tensor::zeros([c_out, c_in, 1, 1])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub linear_w: Tensor,
    pub linear_b: Tensor,
    pub blocks: Vec<UpsampleBnBlock>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl HeadWeights {
    pub fn init(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c0, c1, c2, c3] = cfg.channels;
        Ok(HeadWeights {
            linear_w: init::gaussian(
                &mut rng,
                [cfg.input_width, c0],
                init::xavier_sigma(cfg.input_width, c0),
            ),
            linear_b: Tensor::zeros([c0]),
            blocks: vec![
                UpsampleBnBlock::init(&mut rng, c0, c1),
                UpsampleBnBlock::init(&mut rng, c1, c2),
                UpsampleBnBlock::init(&mut rng, c2, c3),
            ],
            out_w: init::gaussian(&mut rng, [1, c3, 1, 1], init::kaiming_sigma(c3)),
            out_b: Tensor::zeros([1]),
        })
    }

    /// Every parameter zero with identity batch-norm statistics; maps any
    /// input to the constant sigmoid(0) = 0.5.
    pub fn zeroed(cfg: &HeadConfig) -> Self {
        let [c0, c1, c2, c3] = cfg.channels;
        HeadWeights {
            linear_w: Tensor::zeros([cfg.input_width, c0]),
            linear_b: Tensor::zeros([c0]),
            blocks: vec![
                UpsampleBnBlock::zeroed(c0, c1),
                UpsampleBnBlock::zeroed(c1, c2),
                UpsampleBnBlock::zeroed(c2, c3),
            ],
            out_w: Tensor::zeros([1, c3, 1, 1]),
            out_b: Tensor::zeros([1]),
        }
    }
}

pub struct BlockVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub proj_w: Option<Var>,
}

pub struct HeadVars {
    pub linear_w: Var,
    pub linear_b: Var,
    pub blocks: Vec<BlockVars>,
    pub out_w: Var,
    pub out_b: Var,
}

impl HeadWeights {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, trainable: bool) -> HeadVars {
        HeadVars {
            linear_w: reg.bind(tape, "head.linear_w", &self.linear_w, trainable),
            linear_b: reg.bind(tape, "head.linear_b", &self.linear_b, trainable),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockVars {
                    conv_w: reg.bind(tape, &format!("head.block{i}.conv_w"), &b.conv_w, trainable),
                    conv_b: reg.bind(tape, &format!("head.block{i}.conv_b"), &b.conv_b, trainable),
                    bn_gamma: reg.bind(tape, &format!("head.block{i}.bn_g"), &b.bn_gamma, trainable),
                    bn_beta: reg.bind(tape, &format!("head.block{i}.bn_b"), &b.bn_beta, trainable),
                    proj_w: b
                        .proj_w
                        .as_ref()
                        .map(|p| reg.bind(tape, &format!("head.block{i}.proj_w"), p, trainable)),
                })
                .collect(),
            out_w: reg.bind(tape, "head.out_w", &self.out_w, trainable),
            out_b: reg.bind(tape, "head.out_b", &self.out_b, trainable),
        }
    }
}

/// How batch normalization sources its statistics.
pub enum BnMode {
    /// Per-map batch statistics; the forward pass reports them back for
    /// running-average updates.
    Batch,
    /// Frozen running statistics (evaluation and gradient checks).
    Frozen,
}

/// Per-block statistics observed during a training forward pass.
pub type BnBatchStats = Vec<(Vec<f64>, Vec<f64>)>;

fn run_block(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    weights: &UpsampleBnBlock,
    mode: &BnMode,
    stats_out: &mut BnBatchStats,
) -> Var {
    let up = tape.upsample2x(x);
    let conv = tape.conv2d(up, vars.conv_w, vars.conv_b, 1);
    let normed = match mode {
        BnMode::Batch => {
            let (y, stats) = tape.batch_norm_train(conv, vars.bn_gamma, vars.bn_beta);
            stats_out.push(stats);
            y
        }
        BnMode::Frozen => tape.batch_norm_frozen(
            conv,
            vars.bn_gamma,
            vars.bn_beta,
            &weights.bn_mean,
            &weights.bn_var,
        ),
    };
    let residual = match vars.proj_w {
        Some(p) => {
            let zero_b = tape.leaf(Tensor::zeros([tape.value(p).shape()[0]]));
            tape.conv2d(up, p, zero_b, 0)
        }
        None => up,
    };
    let summed = tape.add(normed, residual);
    tape.leaky_relu(summed, LEAKY_SLOPE)
}

/// Dense unit-range depth from the fused hidden states.
///
/// Slices the last N = g^2 token states, lifts them onto the patch grid,
/// and upsamples to the target resolution; every output value is strictly
/// inside (0, 1). In `BnMode::Batch` the observed per-block statistics are
/// returned for running-average updates.
pub fn head_forward(
    tape: &mut Tape,
    hidden: Var,
    vars: &HeadVars,
    weights: &HeadWeights,
    cfg: &HeadConfig,
    mode: &BnMode,
) -> Result<(Var, BnBatchStats)> {
    let t = tape.value(hidden).rows();
    let n = cfg.n_vision_tokens();
    if t < n {
        return Err(Error::Shape(format!(
            "sequence length {t} shorter than vision token count {n}"
        )));
    }
    if tape.value(hidden).cols() != cfg.input_width {
        return Err(Error::Shape(format!(
            "hidden width {} != head input width {}",
            tape.value(hidden).cols(),
            cfg.input_width
        )));
    }
    let g = cfg.grid_side;
    let vision = tape.slice_rows(hidden, t - n, n);
    let lifted = tape.matmul(vision, vars.linear_w);
    let lifted = tape.add_row(lifted, vars.linear_b);
    // rows are patches in row-major grid order; channels become planes
    let transposed = tape.transpose(lifted);
    let mut x = tape.reshape(transposed, [cfg.channels[0], g, g]);

    let mut stats = BnBatchStats::new();
    for (vars_b, weights_b) in vars.blocks.iter().zip(weights.blocks.iter()) {
        x = run_block(tape, x, vars_b, weights_b, mode, &mut stats);
    }
    let out = tape.conv2d(x, vars.out_w, vars.out_b, 0);
    let resized = tape.bilinear(out, cfg.target, cfg.target);
    let unit = tape.sigmoid(resized);
    let unit = tape.reshape(unit, [cfg.target, cfg.target]);
    Ok((unit, stats))
}

/// Folds observed batch statistics into the running averages.
pub fn update_running_stats(weights: &mut HeadWeights, stats: &BnBatchStats) {
    for (block, (mean, var)) in weights.blocks.iter_mut().zip(stats.iter()) {
        for c in 0..block.bn_mean.len() {
            block.bn_mean[c] = (1.0 - BN_MOMENTUM) * block.bn_mean[c] + BN_MOMENTUM * mean[c];
            block.bn_var[c] = (1.0 - BN_MOMENTUM) * block.bn_var[c] + BN_MOMENTUM * var[c];
        }
    }
}

/// Affine map from unit range to metric depth in (d_min, d_max).
pub fn to_metric_depth(tape: &mut Tape, unit: Var, d_min: f64, d_max: f64) -> Result<Var> {
    check_depth_range(d_min, d_max)?;
    let scaled = tape.scale(unit, d_max - d_min);
    Ok(tape.add_scalar(scaled, d_min))
}

pub fn check_depth_range(d_min: f64, d_max: f64) -> Result<()> {
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::Config(format!(
            "depth range [{d_min}, {d_max}] must satisfy 0 < d_min < d_max"
        )));
    }
    Ok(())
}

/// Wraps a square tape output as an all-valid depth map.
pub fn depth_map_from_tensor(t: &Tensor) -> Result<DepthMap> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected [H,W] depth, got {s:?}")));
    }
    DepthMap::dense(s[0], s[1], t.data().to_vec())
}

// serialization

pub fn named_head_tensors(head: &HeadWeights) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("head.linear_w".to_string(), head.linear_w.clone()),
        ("head.linear_b".to_string(), head.linear_b.clone()),
    ];
    for (i, b) in head.blocks.iter().enumerate() {
        out.push((format!("head.block{i}.conv_w"), b.conv_w.clone()));
        out.push((format!("head.block{i}.conv_b"), b.conv_b.clone()));
        out.push((format!("head.block{i}.bn_g"), b.bn_gamma.clone()));
        out.push((format!("head.block{i}.bn_b"), b.bn_beta.clone()));
        out.push((
            format!("head.block{i}.bn_mean"),
            Tensor::new([b.bn_mean.len()], b.bn_mean.clone()),
        ));
        out.push((
            format!("head.block{i}.bn_var"),
            Tensor::new([b.bn_var.len()], b.bn_var.clone()),
        ));
        if let Some(p) = &b.proj_w {
            out.push((format!("head.block{i}.proj_w"), p.clone()));
        }
    }
    out.push(("head.out_w".to_string(), head.out_w.clone()));
    out.push(("head.out_b".to_string(), head.out_b.clone()));
    out
}

pub fn head_from_map(map: &mut crate::weights::TensorMap, cfg: &HeadConfig) -> Result<HeadWeights> {
    let [c0, c1, c2, c3] = cfg.channels;
    let dims = [(c0, c1), (c1, c2), (c2, c3)];
    let mut blocks = Vec::with_capacity(3);
    for (i, (ci, co)) in dims.iter().enumerate() {
        let proj_w = if ci != co {
            Some(map.take(&format!("head.block{i}.proj_w"), &[*co, *ci, 1, 1])?)
        } else {
            None
        };
        blocks.push(UpsampleBnBlock {
            conv_w: map.take(&format!("head.block{i}.conv_w"), &[*co, *ci, 3, 3])?,
            conv_b: map.take(&format!("head.block{i}.conv_b"), &[*co])?,
            bn_gamma: map.take(&format!("head.block{i}.bn_g"), &[*co])?,
            bn_beta: map.take(&format!("head.block{i}.bn_b"), &[*co])?,
            bn_mean: map
                .take(&format!("head.block{i}.bn_mean"), &[*co])?
                .into_data(),
            bn_var: map
                .take(&format!("head.block{i}.bn_var"), &[*co])?
                .into_data(),
            proj_w,
        });
    }
    Ok(HeadWeights {
        linear_w: map.take("head.linear_w", &[cfg.input_width, c0])?,
        linear_b: map.take("head.linear_b", &[c0])?,
        blocks,
        out_w: map.take("head.out_w", &[1, c3, 1, 1])?,
        out_b: map.take("head.out_b", &[1])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use rand_chacha::rand_core::RngCore;

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|_| rng.next_u64() as f64 / u64::MAX as f64 * 2.0 - 1.0)
                .collect(),
        )
    }

    fn forward_eval(weights: &HeadWeights, hidden: &Tensor, cfg: &HeadConfig) -> Tensor {
        let mut tape = Tape::no_grad();
        let mut reg = ParamRegistry::new();
        let vars = weights.bind(&mut tape, &mut reg, false);
        let h = tape.leaf(hidden.clone());
        let (out, _) =
            head_forward(&mut tape, h, &vars, weights, cfg, &BnMode::Frozen).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn paper_grid_reaches_224() {
        let cfg = HeadConfig::new(8, 196, [4, 4, 4, 2], 224).unwrap();
        assert_eq!(cfg.grid_side, 14);
        let weights = HeadWeights::init(&cfg, 1).unwrap();
        let hidden = rng_tensor(&[200, 8], 2);
        let out = forward_eval(&weights, &hidden, &cfg);
        assert_eq!(out.shape(), [224, 224]);
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let cfg = HeadConfig::new(8, 16, [8, 4, 4, 2], 32).unwrap();
        let weights = HeadWeights::init(&cfg, 3).unwrap();
        let hidden = rng_tensor(&[20, 8], 4).map(|v| v * 3.0);
        let out = forward_eval(&weights, &hidden, &cfg);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn zeroed_parameters_give_constant_half() {
        let cfg = HeadConfig::new(8, 16, [8, 4, 4, 2], 32).unwrap();
        let weights = HeadWeights::zeroed(&cfg);
        let hidden = Tensor::zeros([20, 8]);
        let out = forward_eval(&weights, &hidden, &cfg);
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn non_square_token_count_is_shape_error() {
        assert!(matches!(
            HeadConfig::new(8, 15, [4, 4, 4, 2], 32),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grid_exceeding_target_is_config_error() {
        assert!(matches!(
            HeadConfig::new(8, 16, [4, 4, 4, 2], 16),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_identity_block() {
        // same channel count, zero conv: the block is upsample(input)
        // passed through the (here inactive) rectifier
        let mut block = UpsampleBnBlock::zeroed(3, 3);
        block.conv_w = Tensor::zeros([3, 3, 3, 3]);
        let x = rng_tensor(&[3, 4, 4], 5).map(|v| v.abs() + 0.1);
        let mut tape = Tape::no_grad();
        let mut reg = ParamRegistry::new();
        let vars = BlockVars {
            conv_w: reg.bind(&mut tape, "c", &block.conv_w, false),
            conv_b: reg.bind(&mut tape, "b", &block.conv_b, false),
            bn_gamma: reg.bind(&mut tape, "g", &block.bn_gamma, false),
            bn_beta: reg.bind(&mut tape, "be", &block.bn_beta, false),
            proj_w: None,
        };
        let xv = tape.leaf(x.clone());
        let mut stats = BnBatchStats::new();
        let out = run_block(&mut tape, xv, &vars, &block, &BnMode::Frozen, &mut stats);
        let up = {
            let mut t2 = Tape::no_grad();
            let v = t2.leaf(x);
            let u = t2.upsample2x(v);
            t2.value(u).clone()
        };
        assert!(tape.value(out).max_abs_diff(&up) < 1e-12);
    }

    #[test]
    fn batch_mode_reports_stats_and_updates_running() {
        let cfg = HeadConfig::new(8, 16, [8, 4, 4, 2], 32).unwrap();
        let mut weights = HeadWeights::init(&cfg, 6).unwrap();
        let hidden = rng_tensor(&[20, 8], 7);
        let mut tape = Tape::no_grad();
        let mut reg = ParamRegistry::new();
        let vars = weights.bind(&mut tape, &mut reg, false);
        let h = tape.leaf(hidden);
        let (_, stats) = head_forward(&mut tape, h, &vars, &weights, &cfg, &BnMode::Batch).unwrap();
        assert_eq!(stats.len(), 3);
        let before = weights.blocks[0].bn_mean.clone();
        update_running_stats(&mut weights, &stats);
        assert_ne!(before, weights.blocks[0].bn_mean);
    }

    #[test]
    fn sampled_conv_weight_gradient_matches_fd() {
        let cfg = HeadConfig::new(6, 4, [4, 3, 3, 2], 16).unwrap();
        let weights = HeadWeights::init(&cfg, 8).unwrap();
        let hidden = rng_tensor(&[4, 6], 9);
        let probe = rng_tensor(&[16, 16], 10);

        let eval = |w: &HeadWeights| -> f64 {
            let mut tape = Tape::no_grad();
            let mut reg = ParamRegistry::new();
            let vars = w.bind(&mut tape, &mut reg, false);
            let h = tape.leaf(hidden.clone());
            let (unit, _) = head_forward(&mut tape, h, &vars, w, &cfg, &BnMode::Frozen).unwrap();
            tape.value(unit)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        // analytic gradient of the same probe through the tape
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = weights.bind(&mut tape, &mut reg, true);
        let h = tape.leaf(hidden.clone());
        let (unit, _) = head_forward(&mut tape, h, &vars, &weights, &cfg, &BnMode::Frozen).unwrap();
        let pv = tape.leaf(probe.clone());
        let prod = tape.mul(unit, pv);
        let root = tape.sum_all(prod);
        let grads = tape.backward(root);
        let g = grads.wrt(vars.blocks[1].conv_w).unwrap().clone();

        // probe five scattered conv weights of block 1
        for idx in [0usize, 7, 19, 51, 80] {
            let idx = idx % weights.blocks[1].conv_w.numel();
            let mut bumped = weights.clone();
            let fd = {
                let h = 1e-5;
                bumped.blocks[1].conv_w.data_mut()[idx] += h;
                let up = eval(&bumped);
                bumped.blocks[1].conv_w.data_mut()[idx] -= 2.0 * h;
                let down = eval(&bumped);
                (up - down) / (2.0 * h)
            };
            let an = g.data()[idx];
            assert!(
                rel_err(an, fd) < 1e-3 || (an - fd).abs() < 1e-8,
                "conv grad mismatch at {idx}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn metric_depth_affine_and_monotone() {
        let mut tape = Tape::no_grad();
        let unit = tape.leaf(Tensor::new([3], vec![0.0, 0.5, 1.0]));
        let depth = to_metric_depth(&mut tape, unit, 1e-3, 10.0).unwrap();
        let d = tape.value(depth).data().to_vec();
        assert!((d[1] - (1e-3 + 0.5 * (10.0 - 1e-3))).abs() < 1e-12);
        assert!(d[0] < d[1] && d[1] < d[2]);
        assert!((d[0] - 1e-3).abs() < 1e-12);
        assert!((d[2] - 10.0).abs() < 1e-12);
        assert!(matches!(
            to_metric_depth(&mut tape, unit, 5.0, 5.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            to_metric_depth(&mut tape, unit, 0.0, 5.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn head_roundtrips_through_tensor_map() {
        let cfg = HeadConfig::new(8, 16, [8, 4, 4, 2], 32).unwrap();
        let mut weights = HeadWeights::init(&cfg, 11).unwrap();
        weights.blocks[0].bn_mean = vec![0.5; 4];
        let named = named_head_tensors(&weights);
        let refs: Vec<(String, Tensor)> = named;
        let mut map = crate::weights::TensorMap::from_entries(refs);
        let back = head_from_map(&mut map, &cfg).unwrap();
        assert_eq!(weights, back);
        assert!(map.is_empty());
    }
}
