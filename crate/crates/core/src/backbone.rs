//! Vision and text encoders plus the frozen word-embedding table.
//!
//! Both encoders are stacks of pre-norm residual blocks (attention then a
//! GELU MLP) without a terminal layer norm, so an all-zero block stack is
//! an exact pass-through. Weights initialize from a seeded scaled Gaussian
//! and can be overridden by a weight file.

use crate::error::{Error, Result};
use crate::init;
use crate::lora::LoraAdapter;
use crate::tape::{ParamRegistry, Tape, Var};
use crate::tensor::Tensor;
use crate::weights::{TensorMap, WeightHeader};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    /// Vision encoder width (the patch embedding dimension).
    pub vision_width: usize,
    /// Text encoder width (the word embedding dimension).
    pub text_width: usize,
    pub vocab: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Square training resolution; fixes the patch-grid positional table.
    pub resolution: usize,
    /// Longest prompt—plus—patch sequence the text encoder accepts.
    pub max_text_len: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    /// Small widths that train in seconds on a CPU.
    pub fn desk() -> Self {
        BackboneConfig {
            vision_width: 64,
            text_width: 64,
            vocab: 512,
            vision_layers: 2,
            text_layers: 2,
            heads: 4,
            patch_size: 16,
            resolution: 64,
            max_text_len: 64,
            dropout: 0.1,
        }
    }

    /// Published configuration: ViT-base widths with a 12-layer text
    /// encoder, patch size 16, resolution 224, dropout 0.1.
    pub fn paper() -> Self {
        BackboneConfig {
            vision_width: 768,
            text_width: 768,
            vocab: 30_522,
            vision_layers: 12,
            text_layers: 12,
            heads: 12,
            patch_size: 16,
            resolution: 224,
            max_text_len: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.vision_width.is_multiple_of(self.heads) || !self.text_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "widths ({}, {}) must divide by heads {}",
                self.vision_width, self.text_width, self.heads
            )));
        }
        if !self.resolution.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "resolution {} not divisible by patch size {}",
                self.resolution, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.max_text_len == 0 {
            return Err(Error::Config("max_text_len must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.resolution / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Longest sequence the text encoder must embed positions for.
    pub fn text_seq_capacity(&self) -> usize {
        self.max_text_len + self.num_patches()
    }

    pub fn to_header(&self) -> WeightHeader {
        WeightHeader {
            vision_width: self.vision_width as u32,
            text_width: self.text_width as u32,
            vocab: self.vocab as u32,
            vision_layers: self.vision_layers as u32,
            text_layers: self.text_layers as u32,
            heads: self.heads as u32,
            patch_size: self.patch_size as u32,
            resolution: self.resolution as u32,
            max_text_len: self.max_text_len as u32,
            dropout: self.dropout as f32,
        }
    }

    pub fn from_header(h: &WeightHeader) -> Self {
        BackboneConfig {
            vision_width: h.vision_width as usize,
            text_width: h.text_width as usize,
            vocab: h.vocab as usize,
            vision_layers: h.vision_layers as usize,
            text_layers: h.text_layers as usize,
            heads: h.heads as usize,
            patch_size: h.patch_size as usize,
            resolution: h.resolution as usize,
            max_text_len: h.max_text_len as usize,
            dropout: h.dropout as f64,
        }
    }
}

/// Whether a forward pass applies dropout and batch statistics.
pub enum RunMode<'r> {
    Train { rng: &'r mut ChaCha8Rng },
    Eval,
}

impl RunMode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        match self {
            RunMode::Train { rng } => tape.dropout(x, p, rng),
            RunMode::Eval => x,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, RunMode::Train { .. })
    }
}

// ---- weights ----

/// One pre-norm residual block: attention and a GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl EncoderBlock {
    fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        let hidden = width * MLP_RATIO;
        let proj = |rng: &mut ChaCha8Rng| {
            init::gaussian(rng, [width, width], init::xavier_sigma(width, width))
        };
        EncoderBlock {
            ln1_gamma: Tensor::filled([width], 1.0),
            ln1_beta: Tensor::zeros([width]),
            wq: proj(rng),
            bq: Tensor::zeros([width]),
            wk: proj(rng),
            bk: Tensor::zeros([width]),
            wv: proj(rng),
            bv: Tensor::zeros([width]),
            wo: proj(rng),
            bo: Tensor::zeros([width]),
            ln2_gamma: Tensor::filled([width], 1.0),
            ln2_beta: Tensor::zeros([width]),
            w_up: init::gaussian(rng, [width, hidden], init::xavier_sigma(width, hidden)),
            b_up: Tensor::zeros([hidden]),
            w_down: init::gaussian(rng, [hidden, width], init::xavier_sigma(hidden, width)),
            b_down: Tensor::zeros([width]),
        }
    }

    fn zeroed(width: usize) -> Self {
        let hidden = width * MLP_RATIO;
        EncoderBlock {
            ln1_gamma: Tensor::zeros([width]),
            ln1_beta: Tensor::zeros([width]),
            wq: Tensor::zeros([width, width]),
            bq: Tensor::zeros([width]),
            wk: Tensor::zeros([width, width]),
            bk: Tensor::zeros([width]),
            wv: Tensor::zeros([width, width]),
            bv: Tensor::zeros([width]),
            wo: Tensor::zeros([width, width]),
            bo: Tensor::zeros([width]),
            ln2_gamma: Tensor::zeros([width]),
            ln2_beta: Tensor::zeros([width]),
            w_up: Tensor::zeros([width, hidden]),
            b_up: Tensor::zeros([hidden]),
            w_down: Tensor::zeros([hidden, width]),
            b_down: Tensor::zeros([width]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_g", &self.ln1_gamma),
            ("ln1_b", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_gamma),
            ("ln2_b", &self.ln2_beta),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn from_map(map: &mut TensorMap, prefix: &str, width: usize) -> Result<Self> {
        let hidden = width * MLP_RATIO;
        Ok(EncoderBlock {
            ln1_gamma: map.take(&format!("{prefix}.ln1_g"), &[width])?,
            ln1_beta: map.take(&format!("{prefix}.ln1_b"), &[width])?,
            wq: map.take(&format!("{prefix}.wq"), &[width, width])?,
            bq: map.take(&format!("{prefix}.bq"), &[width])?,
            wk: map.take(&format!("{prefix}.wk"), &[width, width])?,
            bk: map.take(&format!("{prefix}.bk"), &[width])?,
            wv: map.take(&format!("{prefix}.wv"), &[width, width])?,
            bv: map.take(&format!("{prefix}.bv"), &[width])?,
            wo: map.take(&format!("{prefix}.wo"), &[width, width])?,
            bo: map.take(&format!("{prefix}.bo"), &[width])?,
            ln2_gamma: map.take(&format!("{prefix}.ln2_g"), &[width])?,
            ln2_beta: map.take(&format!("{prefix}.ln2_b"), &[width])?,
            w_up: map.take(&format!("{prefix}.w_up"), &[width, hidden])?,
            b_up: map.take(&format!("{prefix}.b_up"), &[hidden])?,
            w_down: map.take(&format!("{prefix}.w_down"), &[hidden, width])?,
            b_down: map.take(&format!("{prefix}.b_down"), &[width])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderWeights {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<EncoderBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable {
    pub table: Tensor,
}

impl WordEmbeddingTable {
    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderWeights {
    pub pos: Tensor,
    pub blocks: Vec<EncoderBlock>,
}

impl TextEncoderWeights {
    /// All-zero stack; encodes any sequence to itself.
    pub fn zeroed(config: &BackboneConfig) -> Self {
        TextEncoderWeights {
            pos: Tensor::zeros([config.text_seq_capacity(), config.text_width]),
            blocks: (0..config.text_layers)
                .map(|_| EncoderBlock::zeroed(config.text_width))
                .collect(),
        }
    }
}

/// Deterministic scaled-Gaussian initialization of both encoders and the
/// embedding table.
pub fn init_backbones(
    config: &BackboneConfig,
    seed: u64,
) -> Result<(VisionEncoderWeights, WordEmbeddingTable, TextEncoderWeights)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.num_patches();
    let vision = VisionEncoderWeights {
        patch_proj: init::gaussian(
            &mut rng,
            [config.patch_dim(), config.vision_width],
            init::xavier_sigma(config.patch_dim(), config.vision_width),
        ),
        patch_bias: Tensor::zeros([config.vision_width]),
        pos: init::gaussian(&mut rng, [n, config.vision_width], 0.02),
        blocks: (0..config.vision_layers)
            .map(|_| EncoderBlock::init(&mut rng, config.vision_width))
            .collect(),
    };
    let embed = WordEmbeddingTable {
        table: init::gaussian(
            &mut rng,
            [config.vocab, config.text_width],
            1.0 / (config.text_width as f64).sqrt(),
        ),
    };
    let text = TextEncoderWeights {
        pos: init::gaussian(
            &mut rng,
            [config.text_seq_capacity(), config.text_width],
            0.02,
        ),
        blocks: (0..config.text_layers)
            .map(|_| EncoderBlock::init(&mut rng, config.text_width))
            .collect(),
    };
    Ok((vision, embed, text))
}

// ---- serialization ----

pub fn named_backbone_tensors<'a>(
    vision: &'a VisionEncoderWeights,
    embed: &'a WordEmbeddingTable,
    text: &'a TextEncoderWeights,
) -> Vec<(String, &'a Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![
        ("vision.patch_proj".into(), &vision.patch_proj),
        ("vision.patch_bias".into(), &vision.patch_bias),
        ("vision.pos".into(), &vision.pos),
    ];
    for (i, b) in vision.blocks.iter().enumerate() {
        for (f, t) in b.fields() {
            out.push((format!("vision.block{i}.{f}"), t));
        }
    }
    out.push(("embed.E".into(), &embed.table));
    out.push(("text.pos".into(), &text.pos));
    for (i, b) in text.blocks.iter().enumerate() {
        for (f, t) in b.fields() {
            out.push((format!("text.block{i}.{f}"), t));
        }
    }
    out
}

pub fn backbones_from_map(
    config: &BackboneConfig,
    map: &mut TensorMap,
) -> Result<(VisionEncoderWeights, WordEmbeddingTable, TextEncoderWeights)> {
    let n = config.num_patches();
    let dv = config.vision_width;
    let dt = config.text_width;
    let vision = VisionEncoderWeights {
        patch_proj: map.take("vision.patch_proj", &[config.patch_dim(), dv])?,
        patch_bias: map.take("vision.patch_bias", &[dv])?,
        pos: map.take("vision.pos", &[n, dv])?,
        blocks: (0..config.vision_layers)
            .map(|i| EncoderBlock::from_map(map, &format!("vision.block{i}"), dv))
            .collect::<Result<_>>()?,
    };
    let embed = WordEmbeddingTable {
        table: map.take("embed.E", &[config.vocab, dt])?,
    };
    let text = TextEncoderWeights {
        pos: map.take("text.pos", &[config.text_seq_capacity(), dt])?,
        blocks: (0..config.text_layers)
            .map(|i| EncoderBlock::from_map(map, &format!("text.block{i}"), dt))
            .collect::<Result<_>>()?,
    };
    Ok((vision, embed, text))
}

// ---- binding and forward ----

pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

impl EncoderBlock {
    /// Registers the block as frozen leaves; attention query/value weights
    /// route through their adapters when present.
    pub fn bind(
        &self,
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        prefix: &str,
        q_adapter: Option<&LoraAdapter>,
        v_adapter: Option<&LoraAdapter>,
    ) -> Result<BlockVars> {
        let frozen = |tape: &mut Tape, reg: &mut ParamRegistry, f: &str, t: &Tensor| {
            reg.bind(tape, &format!("{prefix}.{f}"), t, false)
        };
        let wq = match q_adapter {
            Some(ad) => ad.bind_effective(tape, reg, &self.wq)?,
            None => frozen(tape, reg, "wq", &self.wq),
        };
        let wv = match v_adapter {
            Some(ad) => ad.bind_effective(tape, reg, &self.wv)?,
            None => frozen(tape, reg, "wv", &self.wv),
        };
        Ok(BlockVars {
            ln1_gamma: frozen(tape, reg, "ln1_g", &self.ln1_gamma),
            ln1_beta: frozen(tape, reg, "ln1_b", &self.ln1_beta),
            wq,
            bq: frozen(tape, reg, "bq", &self.bq),
            wk: frozen(tape, reg, "wk", &self.wk),
            bk: frozen(tape, reg, "bk", &self.bk),
            wv,
            bv: frozen(tape, reg, "bv", &self.bv),
            wo: frozen(tape, reg, "wo", &self.wo),
            bo: frozen(tape, reg, "bo", &self.bo),
            ln2_gamma: frozen(tape, reg, "ln2_g", &self.ln2_gamma),
            ln2_beta: frozen(tape, reg, "ln2_b", &self.ln2_beta),
            w_up: frozen(tape, reg, "w_up", &self.w_up),
            b_up: frozen(tape, reg, "b_up", &self.b_up),
            w_down: frozen(tape, reg, "w_down", &self.w_down),
            b_down: frozen(tape, reg, "b_down", &self.b_down),
        })
    }
}

pub struct VisionVars {
    pub patch_proj: Var,
    pub patch_bias: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
}

impl VisionEncoderWeights {
    pub fn bind(
        &self,
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        adapters: &[LoraAdapter],
    ) -> Result<VisionVars> {
        let blocks = bind_blocks(&self.blocks, tape, reg, "vision", adapters)?;
        Ok(VisionVars {
            patch_proj: reg.bind(tape, "vision.patch_proj", &self.patch_proj, false),
            patch_bias: reg.bind(tape, "vision.patch_bias", &self.patch_bias, false),
            pos: reg.bind(tape, "vision.pos", &self.pos, false),
            blocks,
        })
    }
}

pub struct TextVars {
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
}

impl TextEncoderWeights {
    pub fn bind(
        &self,
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        adapters: &[LoraAdapter],
    ) -> Result<TextVars> {
        let blocks = bind_blocks(&self.blocks, tape, reg, "text", adapters)?;
        Ok(TextVars {
            pos: reg.bind(tape, "text.pos", &self.pos, false),
            blocks,
        })
    }
}

fn bind_blocks(
    blocks: &[EncoderBlock],
    tape: &mut Tape,
    reg: &mut ParamRegistry,
    component: &str,
    adapters: &[LoraAdapter],
) -> Result<Vec<BlockVars>> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let find = |slot: &str| {
                adapters
                    .iter()
                    .find(|a| a.target == format!("{component}.block{i}.{slot}"))
            };
            b.bind(tape, reg, &format!("{component}.block{i}"), find("wq"), find("wv"))
        })
        .collect()
}

fn attention_block(
    tape: &mut Tape,
    x: Var,
    b: &BlockVars,
    heads: usize,
    dropout: f64,
    mode: &mut RunMode,
) -> Var {
    let width = tape.value(x).cols();
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let h = tape.layer_norm(x, b.ln1_gamma, b.ln1_beta);
    let q = tape.matmul(h, b.wq);
    let q = tape.add_row(q, b.bq);
    let k = tape.matmul(h, b.wk);
    let k = tape.add_row(k, b.bk);
    let v = tape.matmul(h, b.wv);
    let v = tape.add_row(v, b.bv);

    let mut head_outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * head_dim, head_dim);
        let kh = tape.slice_cols(k, hd * head_dim, head_dim);
        let vh = tape.slice_cols(v, hd * head_dim, head_dim);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits);
        head_outs.push(tape.matmul(attn, vh));
    }
    let concat = tape.concat_cols(&head_outs);
    let o = tape.matmul(concat, b.wo);
    let o = tape.add_row(o, b.bo);
    let o = mode.dropout(tape, o, dropout);
    let x = tape.add(x, o);

    let h2 = tape.layer_norm(x, b.ln2_gamma, b.ln2_beta);
    let up = tape.matmul(h2, b.w_up);
    let up = tape.add_row(up, b.b_up);
    let act = tape.gelu(up);
    let down = tape.matmul(act, b.w_down);
    let down = tape.add_row(down, b.b_down);
    let down = mode.dropout(tape, down, dropout);
    tape.add(x, down)
}

/// Runs the patch transformer; output row i corresponds to patch i.
pub fn encode_image(
    tape: &mut Tape,
    vars: &VisionVars,
    patches: &Tensor,
    config: &BackboneConfig,
    mode: &mut RunMode,
) -> Result<Var> {
    let n = tape.value(vars.pos).rows();
    if patches.rows() != n {
        return Err(Error::Shape(format!(
            "patch count {} does not match positional table {n}",
            patches.rows()
        )));
    }
    if patches.cols() != config.patch_dim() {
        return Err(Error::Shape(format!(
            "patch dim {} != {}",
            patches.cols(),
            config.patch_dim()
        )));
    }
    patches.check_finite("image patches")?;
    let p = tape.leaf(patches.clone());
    let x = tape.matmul(p, vars.patch_proj);
    let x = tape.add_row(x, vars.patch_bias);
    let mut x = tape.add(x, vars.pos);
    for b in &vars.blocks {
        x = attention_block(tape, x, b, config.heads, config.dropout, mode);
    }
    Ok(x)
}

/// Looks tokens up in the frozen embedding table; row t equals E[ids[t]].
pub fn embed_tokens(embed: &WordEmbeddingTable, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = (embed.vocab(), embed.width());
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Vocab { id, vocab: v });
        }
        data.extend_from_slice(embed.table.row(id));
    }
    Ok(Tensor::new([ids.len(), d], data))
}

/// Runs the bidirectional text encoder over an already-embedded sequence.
pub fn encode_sequence(
    tape: &mut Tape,
    vars: &TextVars,
    seq: Var,
    config: &BackboneConfig,
    mode: &mut RunMode,
) -> Result<Var> {
    let t = tape.value(seq).rows();
    if t == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    let cap = tape.value(vars.pos).rows();
    if t > cap {
        return Err(Error::Shape(format!(
            "sequence length {t} exceeds positional capacity {cap}"
        )));
    }
    tape.value(seq).check_finite("text encoder input")?;
    let pos = tape.slice_rows(vars.pos, 0, t);
    let mut x = tape.add(seq, pos);
    for b in &vars.blocks {
        x = attention_block(tape, x, b, config.heads, config.dropout, mode);
    }
    Ok(x)
}
