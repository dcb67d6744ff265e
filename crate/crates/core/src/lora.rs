//! Low-rank adaptation of frozen weight matrices.
//!
//! An adapter holds factors A (rows x r) and B (r x cols) for one target
//! weight; the effective weight is W + (alpha / r) * A * B. B starts at
//! zero so a fresh adapter leaves the model untouched, and merging folds
//! the update into W while retiring the adapter.

use crate::error::{Error, Result};
use crate::init;
use crate::tape::{ParamRegistry, Tape, Var};
use crate::tensor::{self, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which backbones carry adapters. Scheme 1 freezes everything, scheme 2
/// adapts the vision encoder, scheme 3 adapts both encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraScheme {
    FrozenBoth,
    VisionOnly,
    VisionAndText,
}

impl LoraScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" | "scheme1" => Ok(LoraScheme::FrozenBoth),
            "vision" | "scheme2" => Ok(LoraScheme::VisionOnly),
            "both" | "scheme3" => Ok(LoraScheme::VisionAndText),
            other => Err(Error::Config(format!("unknown lora scheme {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LoraScheme::FrozenBoth => "frozen",
            LoraScheme::VisionOnly => "vision",
            LoraScheme::VisionAndText => "both",
        }
    }

    pub fn adapts_vision(&self) -> bool {
        !matches!(self, LoraScheme::FrozenBoth)
    }

    pub fn adapts_text(&self) -> bool {
        matches!(self, LoraScheme::VisionAndText)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Identifier of the weight matrix this adapter attaches to.
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
    pub merged: bool,
}

/// Fresh adapter for a rows x cols weight. A is scaled Gaussian, B is zero,
/// so the effective weight initially equals the base weight exactly.
pub fn init_adapter(
    target: &str,
    rows: usize,
    cols: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    if rank < 1 {
        return Err(Error::Config("lora rank must be >= 1".into()));
    }
    if rank > rows.min(cols) / 2 {
        return Err(Error::Config(format!(
            "lora rank {rank} exceeds min({rows},{cols})/2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraAdapter {
        target: target.to_string(),
        a: init::gaussian(&mut rng, [rows, rank], init::kaiming_sigma(rows)),
        b: Tensor::zeros([rank, cols]),
        alpha,
        rank,
        merged: false,
    })
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// W + (alpha / r) * A * B, leaving W untouched.
    pub fn effective_weight(&self, w: &Tensor) -> Result<Tensor> {
        self.check_shapes(w)?;
        let mut out = w.clone();
        out.axpy(self.scaling(), &tensor::matmul(&self.a, &self.b));
        Ok(out)
    }

    /// Folds the update into `w` and retires the adapter; forwarding with
    /// the merged weight matches forwarding with (w, adapter).
    pub fn merge(&mut self, w: &Tensor) -> Result<Tensor> {
        if self.merged {
            return Err(Error::State(format!(
                "adapter {} already merged",
                self.target
            )));
        }
        let merged = self.effective_weight(w)?;
        self.merged = true;
        Ok(merged)
    }

    /// Trainable parameter count: r * (rows + cols).
    pub fn param_count(&self) -> usize {
        self.rank * (self.a.rows() + self.b.cols())
    }

    /// Registers A and B on the tape and returns the effective weight var.
    /// The base weight stays a frozen leaf.
    pub fn bind_effective(
        &self,
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        base: &Tensor,
    ) -> Result<Var> {
        self.check_shapes(base)?;
        let w = reg.bind(tape, &format!("{}.base", self.target), base, false);
        let a = reg.bind(tape, &format!("lora.{}.A", self.target), &self.a, true);
        let b = reg.bind(tape, &format!("lora.{}.B", self.target), &self.b, true);
        let ab = tape.matmul(a, b);
        let scaled = tape.scale(ab, self.scaling());
        Ok(tape.add(w, scaled))
    }

    fn check_shapes(&self, w: &Tensor) -> Result<()> {
        if w.shape() != [self.a.rows(), self.b.cols()]
            || self.a.cols() != self.rank
            || self.b.rows() != self.rank
        {
            return Err(Error::Shape(format!(
                "adapter {} factors {:?}x{:?} do not fit weight {:?}",
                self.target,
                self.a.shape(),
                self.b.shape(),
                w.shape()
            )));
        }
        Ok(())
    }
}

pub use crate::model::trainable_param_count;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_adapter_is_identity() {
        let w = Tensor::new([4, 6], (0..24).map(|i| i as f64 * 0.3).collect());
        let ad = init_adapter("t", 4, 6, 2, 8.0, 1).unwrap();
        assert_eq!(ad.effective_weight(&w).unwrap(), w);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_adapter("t", 8, 8, 4, 16.0, 9).unwrap();
        let b = init_adapter("t", 8, 8, 4, 16.0, 9).unwrap();
        assert_eq!(a.a, b.a);
    }

    #[test]
    fn rank_bound_is_enforced() {
        assert!(matches!(
            init_adapter("t", 8, 8, 5, 1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(init_adapter("t", 8, 8, 4, 1.0, 0).is_ok());
        assert!(matches!(
            init_adapter("t", 8, 8, 0, 1.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn two_by_two_hand_value() {
        let w = Tensor::eye(2);
        let ad = LoraAdapter {
            target: "t".into(),
            a: Tensor::new([2, 1], vec![1.0, 0.0]),
            b: Tensor::new([1, 2], vec![0.0, 1.0]),
            alpha: 1.0,
            rank: 1,
            merged: false,
        };
        let out = ad.effective_weight(&w).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn random_case_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = init::gaussian(&mut rng, [6, 6], 1.0);
        let mut ad = init_adapter("t", 6, 6, 2, 5.0, 4).unwrap();
        ad.b = init::gaussian(&mut rng, [2, 6], 0.7);
        let fast = ad.effective_weight(&w).unwrap();
        // independent oracle: explicit loops over W + (alpha/r) A B
        let scale = 5.0 / 2.0;
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = w.at2(i, j);
                for k in 0..2 {
                    acc += scale * ad.a.at2(i, k) * ad.b.at2(k, j);
                }
                assert!((fast.at2(i, j) - acc).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn merge_matches_adapter_forward_and_retires() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = init::gaussian(&mut rng, [5, 7], 0.8);
        let mut ad = init_adapter("t", 5, 7, 2, 4.0, 7).unwrap();
        ad.b = init::gaussian(&mut rng, [2, 7], 0.5);
        let x = init::gaussian(&mut rng, [3, 5], 1.0);
        let effective = ad.effective_weight(&w).unwrap();
        let merged = ad.merge(&w).unwrap();
        let y_adapter = tensor::matmul(&x, &effective);
        let y_merged = tensor::matmul(&x, &merged);
        assert!(y_adapter.max_abs_diff(&y_merged) < 1e-6);
        assert!(matches!(ad.merge(&w), Err(Error::State(_))));
    }

    #[test]
    fn merge_of_fresh_adapter_keeps_weight() {
        let w = Tensor::new([4, 4], (0..16).map(|i| i as f64).collect());
        let mut ad = init_adapter("t", 4, 4, 2, 2.0, 8).unwrap();
        assert_eq!(ad.merge(&w).unwrap(), w);
    }

    #[test]
    fn full_rank_factors_represent_any_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = init::gaussian(&mut rng, [3, 3], 1.0);
        let delta = init::gaussian(&mut rng, [3, 3], 0.5);
        // bypass init's rank cap: A = (r/alpha) * delta, B = I
        let ad = LoraAdapter {
            target: "t".into(),
            a: {
                let mut a = delta.clone();
                for v in a.data_mut() {
                    *v *= 3.0 / 2.0;
                }
                a
            },
            b: Tensor::eye(3),
            alpha: 2.0,
            rank: 3,
            merged: false,
        };
        let got = ad.effective_weight(&w).unwrap();
        let mut want = w.clone();
        want.axpy(1.0, &delta);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn effective_weight_linear_in_each_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::zeros([4, 4]);
        let base = init_adapter("t", 4, 4, 2, 2.0, 12).unwrap();
        let a1 = init::gaussian(&mut rng, [4, 2], 1.0);
        let a2 = init::gaussian(&mut rng, [4, 2], 1.0);
        let b = init::gaussian(&mut rng, [2, 4], 1.0);
        let with = |a: Tensor, b: Tensor| {
            let mut ad = base.clone();
            ad.a = a;
            ad.b = b;
            ad.effective_weight(&w).unwrap()
        };
        let mut sum_a = a1.clone();
        sum_a.axpy(1.0, &a2);
        let lhs = with(sum_a, b.clone());
        let mut rhs = with(a1, b.clone());
        rhs.axpy(1.0, &with(a2, b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn bind_effective_trains_only_factors() {
        let w = Tensor::eye(4);
        let mut ad = init_adapter("enc.wq", 4, 4, 2, 4.0, 13).unwrap();
        ad.b = Tensor::filled([2, 4], 0.1);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let eff = ad.bind_effective(&mut tape, &mut reg, &w).unwrap();
        let names: Vec<&str> = reg.trainable().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["lora.enc.wq.A", "lora.enc.wq.B"]);
        let expect = ad.effective_weight(&w).unwrap();
        assert!(tape.value(eff).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = Tensor::zeros([4, 5]);
        let ad = init_adapter("t", 4, 4, 2, 1.0, 0).unwrap();
        assert!(matches!(ad.effective_weight(&w), Err(Error::Shape(_))));
    }
}
