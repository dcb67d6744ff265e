//! The assembled depth model: frozen backbones, trainable reprogramming,
//! prompts, adaptation head, and optional LoRA adapters.
//!
//! A forward pass runs patchify -> vision encoder -> cross-modal
//! reprogramming -> prompt fusion -> text encoder -> adaptation head ->
//! metric depth. Binding registers every tensor on a tape once per step;
//! the trainable subset depends on the LoRA scheme.

use crate::adaptation_head::{
    self, BnBatchStats, BnMode, HeadConfig, HeadVars, HeadWeights,
};
use crate::apg::{self, PromptMode, PromptTemplates, Tokenizer};
use crate::backbone::{
    self, BackboneConfig, RunMode, TextEncoderWeights, TextVars, VisionEncoderWeights, VisionVars,
    WordEmbeddingTable,
};
use crate::dataset::SceneSample;
use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter, LoraScheme};
use crate::reprogramming::{
    self, PrototypeMap, ReprogrammingVars, ReprogrammingWeights,
};
use crate::tape::{ParamRegistry, Tape, Var};
use crate::tensor::Tensor;
use crate::weights::{self, TensorMap};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of text prototypes, at most vocab / 4.
    pub v_prime: usize,
    pub head_channels: [usize; 4],
    pub depth_range: (f64, f64),
    pub prompt_mode: PromptMode,
    pub lora_scheme: LoraScheme,
    pub lora_rank_vision: usize,
    pub lora_alpha_vision: f64,
    pub lora_rank_text: usize,
    pub lora_alpha_text: f64,
    pub dataset_name: String,
    pub templates: PromptTemplates,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            v_prime: 32,
            head_channels: HeadConfig::desk_channels(),
            // f32-exact so the weight-file roundtrip is lossless
            depth_range: (1e-3f32 as f64, 10.0),
            prompt_mode: PromptMode::Apg,
            lora_scheme: LoraScheme::VisionAndText,
            lora_rank_vision: 8,
            lora_alpha_vision: 16.0,
            lora_rank_text: 8,
            lora_alpha_text: 8.0,
            dataset_name: "synthetic".into(),
            templates: PromptTemplates::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.v_prime == 0 || self.v_prime > self.backbone.vocab / 4 {
            return Err(Error::Config(format!(
                "v_prime {} must be in 1..={}",
                self.v_prime,
                self.backbone.vocab / 4
            )));
        }
        adaptation_head::check_depth_range(self.depth_range.0, self.depth_range.1)?;
        Ok(())
    }

    pub fn head_config(&self) -> Result<HeadConfig> {
        HeadConfig::new(
            self.backbone.text_width,
            self.backbone.num_patches(),
            self.head_channels,
            self.backbone.resolution,
        )
    }
}

#[derive(Debug, Clone)]
pub struct DepthModel {
    pub config: ModelConfig,
    pub head_config: HeadConfig,
    pub vision: VisionEncoderWeights,
    pub embed: WordEmbeddingTable,
    pub text: TextEncoderWeights,
    pub prototypes: PrototypeMap,
    pub reprogramming: ReprogrammingWeights,
    pub head: HeadWeights,
    pub adapters: Vec<LoraAdapter>,
    pub tokenizer: Tokenizer,
}

fn build_adapters(config: &ModelConfig, seed: u64) -> Result<Vec<LoraAdapter>> {
    let mut adapters = Vec::new();
    let mut n = 0u64;
    if config.lora_scheme.adapts_vision() {
        let d = config.backbone.vision_width;
        for i in 0..config.backbone.vision_layers {
            for slot in ["wq", "wv"] {
                adapters.push(lora::init_adapter(
                    &format!("vision.block{i}.{slot}"),
                    d,
                    d,
                    config.lora_rank_vision,
                    config.lora_alpha_vision,
                    seed.wrapping_add(n),
                )?);
                n += 1;
            }
        }
    }
    if config.lora_scheme.adapts_text() {
        let d = config.backbone.text_width;
        for i in 0..config.backbone.text_layers {
            for slot in ["wq", "wv"] {
                adapters.push(lora::init_adapter(
                    &format!("text.block{i}.{slot}"),
                    d,
                    d,
                    config.lora_rank_text,
                    config.lora_alpha_text,
                    seed.wrapping_add(n),
                )?);
                n += 1;
            }
        }
    }
    Ok(adapters)
}

impl DepthModel {
    /// Deterministic initialization of every component from one seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let head_config = config.head_config()?;
        let (vision, embed, text) = backbone::init_backbones(&config.backbone, seed)?;
        let prototypes = PrototypeMap::init(
            config.v_prime,
            config.backbone.vocab,
            seed.wrapping_add(1),
        )?;
        let reprogramming = ReprogrammingWeights::init(
            config.backbone.vision_width,
            config.backbone.text_width,
            config.backbone.heads,
            seed.wrapping_add(2),
        )?;
        let head = HeadWeights::init(&head_config, seed.wrapping_add(3))?;
        let adapters = build_adapters(&config, seed.wrapping_add(100))?;
        let tokenizer = Tokenizer::for_templates(&config.templates, &[config.dataset_name.as_str()]);
        let model = DepthModel {
            config,
            head_config,
            vision,
            embed,
            text,
            prototypes,
            reprogramming,
            head,
            adapters,
            tokenizer,
        };
        model.check_tokenizer()?;
        Ok(model)
    }

    fn check_tokenizer(&self) -> Result<()> {
        if self.tokenizer.vocab_size() > self.config.backbone.vocab {
            return Err(Error::Config(format!(
                "tokenizer vocabulary {} exceeds embedding table {}",
                self.tokenizer.vocab_size(),
                self.config.backbone.vocab
            )));
        }
        let cap = apg::max_prompt_len_with(
            &self.config.templates,
            &self.tokenizer,
            &self.config.dataset_name,
        );
        if cap > self.config.backbone.max_text_len {
            return Err(Error::Config(format!(
                "prompts may reach {cap} tokens but max_text_len is {}",
                self.config.backbone.max_text_len
            )));
        }
        Ok(())
    }

    /// Registers every tensor on the tape. Reprogramming, prototypes, and
    /// the head are trainable; backbones are frozen with LoRA factors as
    /// the only trainable attachment.
    pub fn bind(&self, tape: &mut Tape, reg: &mut ParamRegistry) -> Result<BoundModel> {
        let proto = self.prototypes.bind(tape, reg, true);
        let embedding = reg.bind(tape, "embed.E", &self.embed.table, false);
        let prototypes = reprogramming::derive_prototypes(tape, proto, embedding)?;
        Ok(BoundModel {
            vision: self.vision.bind(tape, reg, &self.adapters)?,
            text: self.text.bind(tape, reg, &self.adapters)?,
            reprogramming: self.reprogramming.bind(tape, reg, true),
            head: self.head.bind(tape, reg, true),
            prototypes,
        })
    }

    /// Full pipeline for one sample on an existing tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        sample: &SceneSample,
        mode: &mut RunMode,
        bn_mode: &BnMode,
    ) -> Result<ForwardOutput> {
        let patches = crate::dataset::patchify(&sample.image, self.config.backbone.patch_size)?;
        let encoded = backbone::encode_image(
            tape,
            &bound.vision,
            &patches,
            &self.config.backbone,
            mode,
        )?;
        let reprogrammed =
            reprogramming::reprogram(tape, encoded, bound.prototypes, &bound.reprogramming)?;
        let bundle = apg::build_prompt_bundle_with(
            &self.config.templates,
            sample,
            &self.config.dataset_name,
            &self.tokenizer,
            self.config.prompt_mode,
        );
        let prompt_emb = backbone::embed_tokens(&self.embed, &bundle.token_ids)?;
        let prompt_var = tape.leaf(prompt_emb);
        let fused = reprogramming::fuse(
            tape,
            reprogrammed,
            prompt_var,
            bound.reprogramming.fuse_proj,
        )?;
        let hidden = backbone::encode_sequence(
            tape,
            &bound.text,
            fused.tokens,
            &self.config.backbone,
            mode,
        )?;
        let (unit, bn_stats) = adaptation_head::head_forward(
            tape,
            hidden,
            &bound.head,
            &self.head,
            &self.head_config,
            bn_mode,
        )?;
        let depth = adaptation_head::to_metric_depth(
            tape,
            unit,
            self.config.depth_range.0,
            self.config.depth_range.1,
        )?;
        Ok(ForwardOutput {
            unit,
            depth,
            prompt_len: fused.prompt_len,
            bn_stats,
        })
    }

    /// Evaluation-mode prediction as a dense metric depth map.
    pub fn predict(&self, sample: &SceneSample) -> Result<crate::dataset::DepthMap> {
        let mut tape = Tape::no_grad();
        let mut reg = ParamRegistry::new();
        let bound = self.bind(&mut tape, &mut reg)?;
        let out = self.forward(
            &mut tape,
            &bound,
            sample,
            &mut RunMode::Eval,
            &BnMode::Frozen,
        )?;
        adaptation_head::depth_map_from_tensor(tape.value(out.depth))
    }

    /// Borrow a parameter tensor by its registry name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let (target, factor) = rest.rsplit_once('.')?;
            let ad = self.adapters.iter_mut().find(|a| a.target == target)?;
            return match factor {
                "A" => Some(&mut ad.a),
                "B" => Some(&mut ad.b),
                _ => None,
            };
        }
        if name == "proto.P" {
            return Some(&mut self.prototypes.p);
        }
        if let Some(rest) = name.strip_prefix("reprog.") {
            if rest == "out" {
                return Some(&mut self.reprogramming.out_proj);
            }
            if rest == "fuse" {
                return Some(&mut self.reprogramming.fuse_proj);
            }
            let idx: usize = rest
                .strip_prefix("head")?
                .split('.')
                .next()?
                .parse()
                .ok()?;
            let h = self.reprogramming.heads.get_mut(idx)?;
            return match rest.rsplit_once('.')?.1 {
                "q" => Some(&mut h.wq),
                "k" => Some(&mut h.wk),
                "v" => Some(&mut h.wv),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("head.") {
            if rest == "linear_w" {
                return Some(&mut self.head.linear_w);
            }
            if rest == "linear_b" {
                return Some(&mut self.head.linear_b);
            }
            if rest == "out_w" {
                return Some(&mut self.head.out_w);
            }
            if rest == "out_b" {
                return Some(&mut self.head.out_b);
            }
            let rest = rest.strip_prefix("block")?;
            let (idx, field) = rest.split_once('.')?;
            let b = self.head.blocks.get_mut(idx.parse::<usize>().ok()?)?;
            return match field {
                "conv_w" => Some(&mut b.conv_w),
                "conv_b" => Some(&mut b.conv_b),
                "bn_g" => Some(&mut b.bn_gamma),
                "bn_b" => Some(&mut b.bn_beta),
                "proj_w" => b.proj_w.as_mut(),
                _ => None,
            };
        }
        None
    }

    /// Snapshot of the frozen backbone tensors for bit-identity checks.
    pub fn frozen_backbone_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in backbone::named_backbone_tensors(&self.vision, &self.embed, &self.text) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.meta_tensor();
        let string_tensor = |s: &str| {
            let bytes: Vec<f64> = s.as_bytes().iter().map(|b| *b as f64).collect();
            Tensor::new([bytes.len()], bytes)
        };
        let name_tensor = string_tensor(&self.config.dataset_name);
        let tpl_tensors = [
            ("model.tpl.dataset", string_tensor(&self.config.templates.dataset)),
            ("model.tpl.task", string_tensor(&self.config.templates.task)),
            ("model.tpl.pixel", string_tensor(&self.config.templates.pixel)),
            ("model.tpl.class", string_tensor(&self.config.templates.class)),
        ];
        let head_named = adaptation_head::named_head_tensors(&self.head);
        let mut entries: Vec<(String, &Tensor)> =
            backbone::named_backbone_tensors(&self.vision, &self.embed, &self.text);
        entries.push(("proto.P".into(), &self.prototypes.p));
        for (k, h) in self.reprogramming.heads.iter().enumerate() {
            entries.push((format!("reprog.head{k}.q"), &h.wq));
            entries.push((format!("reprog.head{k}.k"), &h.wk));
            entries.push((format!("reprog.head{k}.v"), &h.wv));
        }
        entries.push(("reprog.out".into(), &self.reprogramming.out_proj));
        entries.push(("reprog.fuse".into(), &self.reprogramming.fuse_proj));
        for (name, t) in &head_named {
            entries.push((name.clone(), t));
        }
        let adapter_meta: Vec<(String, Tensor)> = self
            .adapters
            .iter()
            .map(|a| {
                (
                    format!("lora.{}.meta", a.target),
                    Tensor::new([2], vec![a.alpha, a.rank as f64]),
                )
            })
            .collect();
        for (a, meta_t) in self.adapters.iter().zip(adapter_meta.iter()) {
            entries.push((format!("lora.{}.A", a.target), &a.a));
            entries.push((format!("lora.{}.B", a.target), &a.b));
            entries.push((meta_t.0.clone(), &meta_t.1));
        }
        entries.push(("model.meta".into(), &meta));
        entries.push(("model.dataset_name".into(), &name_tensor));
        for (name, t) in &tpl_tensors {
            entries.push(((*name).into(), t));
        }
        weights::save(path, &self.config.backbone.to_header(), &entries)
    }

    fn meta_tensor(&self) -> Tensor {
        let c = &self.config;
        Tensor::new(
            [13],
            vec![
                c.v_prime as f64,
                c.head_channels[0] as f64,
                c.head_channels[1] as f64,
                c.head_channels[2] as f64,
                c.head_channels[3] as f64,
                c.depth_range.0,
                c.depth_range.1,
                match c.prompt_mode {
                    PromptMode::Apg => 0.0,
                    PromptMode::Fixed => 1.0,
                    PromptMode::None => 2.0,
                },
                match c.lora_scheme {
                    LoraScheme::FrozenBoth => 0.0,
                    LoraScheme::VisionOnly => 1.0,
                    LoraScheme::VisionAndText => 2.0,
                },
                c.lora_rank_vision as f64,
                c.lora_alpha_vision,
                c.lora_rank_text as f64,
                c.lora_alpha_text,
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, entries) = weights::load(path)?;
        let backbone_cfg = BackboneConfig::from_header(&header);
        let mut map = TensorMap::from_entries(entries);
        let meta = map.take("model.meta", &[13])?;
        let m = meta.data();
        let take_string = |map: &mut TensorMap, name: &str| -> Result<String> {
            let t = map
                .take_dynamic(name)
                .ok_or_else(|| Error::WeightLoad(format!("missing tensor {name:?}")))?;
            Ok(t.data().iter().map(|v| *v as u8 as char).collect())
        };
        let dataset_name = take_string(&mut map, "model.dataset_name")?;
        let templates = PromptTemplates {
            dataset: take_string(&mut map, "model.tpl.dataset")?,
            task: take_string(&mut map, "model.tpl.task")?,
            pixel: take_string(&mut map, "model.tpl.pixel")?,
            class: take_string(&mut map, "model.tpl.class")?,
        };
        let prompt_mode = match m[7] as usize {
            0 => PromptMode::Apg,
            1 => PromptMode::Fixed,
            _ => PromptMode::None,
        };
        let lora_scheme = match m[8] as usize {
            0 => LoraScheme::FrozenBoth,
            1 => LoraScheme::VisionOnly,
            _ => LoraScheme::VisionAndText,
        };
        let config = ModelConfig {
            backbone: backbone_cfg,
            v_prime: m[0] as usize,
            head_channels: [m[1] as usize, m[2] as usize, m[3] as usize, m[4] as usize],
            depth_range: (m[5], m[6]),
            prompt_mode,
            lora_scheme,
            lora_rank_vision: m[9] as usize,
            lora_alpha_vision: m[10],
            lora_rank_text: m[11] as usize,
            lora_alpha_text: m[12],
            dataset_name: dataset_name.clone(),
            templates,
        };
        config.validate()?;
        let head_config = config.head_config()?;
        let (vision, embed, text) = backbone::backbones_from_map(&config.backbone, &mut map)?;
        let dm = config.backbone.vision_width;
        let dt = config.backbone.text_width;
        let d = dm / config.backbone.heads;
        let mut heads = Vec::with_capacity(config.backbone.heads);
        for k in 0..config.backbone.heads {
            heads.push(crate::reprogramming::ReprogramHead {
                wq: map.take(&format!("reprog.head{k}.q"), &[dm, d])?,
                wk: map.take(&format!("reprog.head{k}.k"), &[dt, d])?,
                wv: map.take(&format!("reprog.head{k}.v"), &[dt, d])?,
            });
        }
        let prototypes = PrototypeMap {
            p: map.take("proto.P", &[config.v_prime, config.backbone.vocab])?,
        };
        let reprogramming = ReprogrammingWeights {
            heads,
            out_proj: map.take("reprog.out", &[dm, dm])?,
            fuse_proj: map.take("reprog.fuse", &[dm, dt])?,
        };
        let head = adaptation_head::head_from_map(&mut map, &head_config)?;
        let mut adapters = Vec::new();
        for target in adapter_targets(&config) {
            let meta = map.take(&format!("lora.{target}.meta"), &[2])?;
            let rank = meta.data()[1] as usize;
            let rows = if target.starts_with("vision") { dm } else { dt };
            adapters.push(LoraAdapter {
                a: map.take(&format!("lora.{target}.A"), &[rows, rank])?,
                b: map.take(&format!("lora.{target}.B"), &[rank, rows])?,
                alpha: meta.data()[0],
                rank,
                target,
                merged: false,
            });
        }
        let tokenizer =
            Tokenizer::for_templates(&config.templates, &[dataset_name.as_str()]);
        let model = DepthModel {
            config,
            head_config,
            vision,
            embed,
            text,
            prototypes,
            reprogramming,
            head,
            adapters,
            tokenizer,
        };
        model.check_tokenizer()?;
        Ok(model)
    }
}

fn adapter_targets(config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    if config.lora_scheme.adapts_vision() {
        for i in 0..config.backbone.vision_layers {
            out.push(format!("vision.block{i}.wq"));
            out.push(format!("vision.block{i}.wv"));
        }
    }
    if config.lora_scheme.adapts_text() {
        for i in 0..config.backbone.text_layers {
            out.push(format!("text.block{i}.wq"));
            out.push(format!("text.block{i}.wv"));
        }
    }
    out
}

pub struct BoundModel {
    pub vision: VisionVars,
    pub text: TextVars,
    pub reprogramming: ReprogrammingVars,
    pub head: HeadVars,
    /// Derived prototype matrix E' = P E on the tape.
    pub prototypes: Var,
}

pub struct ForwardOutput {
    pub unit: Var,
    pub depth: Var,
    pub prompt_len: usize,
    pub bn_stats: BnBatchStats,
}

/// (trainable, total) parameter counts. Trainable covers the prototype
/// map, reprogramming, the head, and LoRA factors; frozen backbones and
/// batch-norm running statistics are excluded from the trainable side.
pub fn trainable_param_count(model: &DepthModel) -> (usize, usize) {
    let backbone_total: usize =
        backbone::named_backbone_tensors(&model.vision, &model.embed, &model.text)
            .iter()
            .map(|(_, t)| t.numel())
            .sum();
    let mut trainable = model.prototypes.p.numel();
    for h in &model.reprogramming.heads {
        trainable += h.wq.numel() + h.wk.numel() + h.wv.numel();
    }
    trainable += model.reprogramming.out_proj.numel() + model.reprogramming.fuse_proj.numel();
    trainable += model.head.linear_w.numel() + model.head.linear_b.numel();
    for b in &model.head.blocks {
        trainable += b.conv_w.numel() + b.conv_b.numel();
        trainable += b.bn_gamma.numel() + b.bn_beta.numel();
        if let Some(p) = &b.proj_w {
            trainable += p.numel();
        }
    }
    trainable += model.head.out_w.numel() + model.head.out_b.numel();
    let adapter_params: usize = model.adapters.iter().map(|a| a.param_count()).sum();
    trainable += adapter_params;
    (trainable, backbone_total + trainable)
}
