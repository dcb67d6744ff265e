//! Cross-modal reprogramming: multi-head cross attention from vision patch
//! embeddings to a small set of learned text prototypes, plus the fusion of
//! the result with prompt embeddings into one sequence.
//!
//! Prototypes are rows of E' = P * E, a trainable linear mixture of the
//! frozen word embeddings. Per head k the attention is
//! softmax(Q K^T / sqrt(d)) V with Q from patches and K, V from E'; head
//! outputs are concatenated and passed through an output projection.

use crate::error::{Error, Result};
use crate::init;
use crate::tape::{ParamRegistry, Tape, Var};
use crate::tensor::{self, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trainable mixture matrix P (V' x V) defining the prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMap {
    pub p: Tensor,
}

impl PrototypeMap {
    pub fn init(v_prime: usize, vocab: usize, seed: u64) -> Result<Self> {
        if v_prime == 0 || v_prime > vocab / 4 {
            return Err(Error::Config(format!(
                "prototype count {v_prime} must be in 1..={} (vocab/4)",
                vocab / 4
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PrototypeMap {
            p: init::gaussian(&mut rng, [v_prime, vocab], 1.0 / (vocab as f64).sqrt()),
        })
    }

    pub fn v_prime(&self) -> usize {
        self.p.rows()
    }
}

/// Per-head projection triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprogramHead {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprogrammingWeights {
    pub heads: Vec<ReprogramHead>,
    pub out_proj: Tensor,
    /// Projects the reprogrammed patches from vision width to text width
    /// before fusion.
    pub fuse_proj: Tensor,
}

impl ReprogrammingWeights {
    pub fn init(vision_width: usize, text_width: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !vision_width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "vision width {vision_width} must divide by heads {heads}"
            )));
        }
        let d = vision_width / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..heads)
            .map(|_| ReprogramHead {
                wq: init::gaussian(&mut rng, [vision_width, d], init::xavier_sigma(vision_width, d)),
                wk: init::gaussian(&mut rng, [text_width, d], init::xavier_sigma(text_width, d)),
                wv: init::gaussian(&mut rng, [text_width, d], init::xavier_sigma(text_width, d)),
            })
            .collect();
        Ok(ReprogrammingWeights {
            heads,
            out_proj: init::gaussian(
                &mut rng,
                [vision_width, vision_width],
                init::xavier_sigma(vision_width, vision_width),
            ),
            fuse_proj: init::gaussian(
                &mut rng,
                [vision_width, text_width],
                init::xavier_sigma(vision_width, text_width),
            ),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].wq.cols()
    }
}

pub struct ReprogrammingVars {
    pub heads: Vec<(Var, Var, Var)>,
    pub out_proj: Var,
    pub fuse_proj: Var,
}

impl ReprogrammingWeights {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, trainable: bool) -> ReprogrammingVars {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| {
                (
                    reg.bind(tape, &format!("reprog.head{k}.q"), &h.wq, trainable),
                    reg.bind(tape, &format!("reprog.head{k}.k"), &h.wk, trainable),
                    reg.bind(tape, &format!("reprog.head{k}.v"), &h.wv, trainable),
                )
            })
            .collect();
        ReprogrammingVars {
            heads,
            out_proj: reg.bind(tape, "reprog.out", &self.out_proj, trainable),
            fuse_proj: reg.bind(tape, "reprog.fuse", &self.fuse_proj, trainable),
        }
    }
}

impl PrototypeMap {
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry, trainable: bool) -> Var {
        reg.bind(tape, "proto.P", &self.p, trainable)
    }
}

/// E' = P * E with E frozen; differentiable with respect to P.
pub fn derive_prototypes(tape: &mut Tape, p: Var, embedding: Var) -> Result<Var> {
    let (pc, er) = (tape.value(p).cols(), tape.value(embedding).rows());
    if pc != er {
        return Err(Error::Shape(format!(
            "prototype map columns {pc} != vocabulary rows {er}"
        )));
    }
    Ok(tape.matmul(p, embedding))
}

/// Plain-tensor prototype derivation for callers outside a tape.
pub fn derive_prototypes_plain(p: &Tensor, embedding: &Tensor) -> Result<Tensor> {
    if p.cols() != embedding.rows() {
        return Err(Error::Shape(format!(
            "prototype map columns {} != vocabulary rows {}",
            p.cols(),
            embedding.rows()
        )));
    }
    Ok(tensor::matmul(p, embedding))
}

/// Reprogramming outputs with the per-head attention maps exposed.
pub struct ReprogramDetail {
    /// After the output projection, N x d_m.
    pub output: Var,
    /// Concatenated head outputs before the output projection.
    pub pre_projection: Var,
    /// Row-stochastic attention maps, one N x V' matrix per head.
    pub attention: Vec<Var>,
}

/// Cross attention from patch embeddings to prototypes (Q from patches,
/// K and V from E'), heads concatenated then linearly projected.
pub fn reprogram_detailed(
    tape: &mut Tape,
    patches: Var,
    prototypes: Var,
    vars: &ReprogrammingVars,
) -> Result<ReprogramDetail> {
    let d_m = tape.value(patches).cols();
    let d_text = tape.value(prototypes).cols();
    let k_heads = vars.heads.len();
    if !d_m.is_multiple_of(k_heads) {
        return Err(Error::Shape(format!(
            "vision width {d_m} does not divide into {k_heads} heads"
        )));
    }
    let d = d_m / k_heads;
    let mut outs = Vec::with_capacity(k_heads);
    let mut attention = Vec::with_capacity(k_heads);
    for &(wq, wk, wv) in &vars.heads {
        let (qr, qc) = (tape.value(wq).rows(), tape.value(wq).cols());
        if qr != d_m || qc != d {
            return Err(Error::Shape(format!(
                "head query projection {qr}x{qc}, expected {d_m}x{d}"
            )));
        }
        if tape.value(wk).rows() != d_text || tape.value(wv).rows() != d_text {
            return Err(Error::Shape(format!(
                "key/value projections must take width {d_text}"
            )));
        }
        let q = tape.matmul(patches, wq);
        let k = tape.matmul(prototypes, wk);
        let v = tape.matmul(prototypes, wv);
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        tape.value(logits).check_finite("reprogramming logits")?;
        let attn = tape.softmax_rows(logits);
        outs.push(tape.matmul(attn, v));
        attention.push(attn);
    }
    let pre_projection = tape.concat_cols(&outs);
    let output = tape.matmul(pre_projection, vars.out_proj);
    Ok(ReprogramDetail {
        output,
        pre_projection,
        attention,
    })
}

/// Reprogrammed patch features F, N x d_m.
pub fn reprogram(
    tape: &mut Tape,
    patches: Var,
    prototypes: Var,
    vars: &ReprogrammingVars,
) -> Result<Var> {
    Ok(reprogram_detailed(tape, patches, prototypes, vars)?.output)
}

/// Prompt-prefixed fused sequence for the text encoder.
pub struct FusedSequence {
    pub tokens: Var,
    pub prompt_len: usize,
    pub vision_len: usize,
}

/// Projects F to the text width and concatenates it after the prompt
/// embeddings. An empty prompt yields the projected patches alone.
pub fn fuse(
    tape: &mut Tape,
    reprogrammed: Var,
    prompt_embeddings: Var,
    fuse_proj: Var,
) -> Result<FusedSequence> {
    let f = tape.value(reprogrammed);
    f.check_finite("fused features")?;
    let d_m = f.cols();
    let n = f.rows();
    if tape.value(fuse_proj).rows() != d_m {
        return Err(Error::Shape(format!(
            "fuse projection expects input width {}, got {d_m}",
            tape.value(fuse_proj).rows()
        )));
    }
    let d_text = tape.value(fuse_proj).cols();
    if tape.value(prompt_embeddings).cols() != d_text {
        return Err(Error::Shape(format!(
            "prompt width {} != text width {d_text}",
            tape.value(prompt_embeddings).cols()
        )));
    }
    let prompt_len = tape.value(prompt_embeddings).rows();
    let projected = tape.matmul(reprogrammed, fuse_proj);
    let tokens = if prompt_len == 0 {
        projected
    } else {
        tape.concat_rows(&[prompt_embeddings, projected])
    };
    Ok(FusedSequence {
        tokens,
        prompt_len,
        vision_len: n,
    })
}
