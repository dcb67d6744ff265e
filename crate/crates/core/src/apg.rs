//! Adaptive depth prompt generation.
//!
//! Builds four prompt strings per image — dataset, task, pixel statistics,
//! and a coarse distance class — and tokenizes them with a deterministic
//! word-level vocabulary. Numbers are printed with three decimals and
//! tokenized digit by digit so that statistics survive the vocabulary.

use crate::dataset::{RgbImage, SceneSample};
use crate::error::{Error, Result};
use std::path::Path;

/// Distance classes in increasing order of remoteness.
pub const CLASS_LABELS: [&str; 7] = [
    "giant",
    "extremely close",
    "close",
    "not in distance",
    "a little remote",
    "far",
    "unseen",
];

pub const DATASET_TEMPLATE: &str = "dataset {name} indoor monocular images";
pub const TASK_TEMPLATE: &str = "estimate a dense depth map for this image";
pub const PIXEL_TEMPLATE: &str = "pixel statistics min {min} max {max} median {median}";
pub const CLASS_TEMPLATE: &str = "overall scene distance class {class}";

/// The four prompt templates. Placeholders: `{name}` in the dataset
/// template, `{min}`/`{max}`/`{median}` in the pixel template, `{class}`
/// in the class template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub dataset: String,
    pub task: String,
    pub pixel: String,
    pub class: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            dataset: DATASET_TEMPLATE.into(),
            task: TASK_TEMPLATE.into(),
            pixel: PIXEL_TEMPLATE.into(),
            class: CLASS_TEMPLATE.into(),
        }
    }
}

impl PromptTemplates {
    /// Loads templates from a UTF-8 file, one `key: template` line per
    /// prompt (keys dataset, task, pixel, class; missing keys keep their
    /// defaults).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = PromptTemplates::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, template) = line.split_once(':').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key: template`, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let template = template.trim().to_string();
            match key.trim() {
                "dataset" => out.dataset = template,
                "task" => out.task = template,
                "pixel" => out.pixel = template,
                "class" => out.class = template,
                other => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown template key {other:?}",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(out)
    }

    fn all(&self) -> [&str; 4] {
        [&self.dataset, &self.task, &self.pixel, &self.class]
    }
}

/// Order statistics of an image's luminance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
}

/// Prompting regimes: statistics-driven, frozen placeholders, or no
/// prompts at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    Apg,
    Fixed,
    None,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "apg" => Ok(PromptMode::Apg),
            "fixed" => Ok(PromptMode::Fixed),
            "none" => Ok(PromptMode::None),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::Apg => "apg",
            PromptMode::Fixed => "fixed",
            PromptMode::None => "none",
        }
    }
}

/// The four prompt texts and their combined token-id sequence, in
/// dataset, task, pixel, class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub dataset_text: String,
    pub task_text: String,
    pub pixel_text: String,
    pub class_text: String,
    pub token_ids: Vec<usize>,
}

impl PromptBundle {
    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Exact order statistics over luminance; the median of an even count is
/// the lower-middle element.
pub fn compute_pixel_stats(image: &RgbImage) -> PixelStats {
    let mut lums: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .map(|px| luminance(px[0], px[1], px[2]))
        .collect();
    let mean = lums.iter().sum::<f64>() / lums.len() as f64;
    lums.sort_by(|a, b| a.total_cmp(b));
    PixelStats {
        min: lums[0],
        max: lums[lums.len() - 1],
        median: lums[(lums.len() - 1) / 2],
        mean,
    }
}

/// Bins the median luminance into seven equal-width bins over [0, 1] and
/// returns the matching distance class. A value on a bin boundary belongs
/// to the lower bin.
pub fn classify_image(stats: &PixelStats) -> &'static str {
    let m = stats.median;
    for (i, label) in CLASS_LABELS.iter().enumerate().take(CLASS_LABELS.len() - 1) {
        if m <= (i + 1) as f64 / CLASS_LABELS.len() as f64 {
            return label;
        }
    }
    CLASS_LABELS[CLASS_LABELS.len() - 1]
}

/// Deterministic word-level tokenizer. Tokens are lowercased, split on
/// whitespace and punctuation, and digit runs are split into single
/// digits; out-of-vocabulary words map to the unknown id.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    unknown_id: usize,
}

impl Tokenizer {
    /// Vocabulary covering the default templates; see [`Self::for_templates`].
    pub fn new(extra_words: &[&str]) -> Self {
        Tokenizer::for_templates(&PromptTemplates::default(), extra_words)
    }

    /// Vocabulary covering the given templates, the distance classes,
    /// digits, the fixed-prompt placeholder, and any extra words (dataset
    /// names). Id 0 is the unknown token.
    pub fn for_templates(templates: &PromptTemplates, extra_words: &[&str]) -> Self {
        let mut words: Vec<String> = vec!["<unk>".to_string()];
        let mut add = |text: &str| {
            for w in split_words(text) {
                if !words.contains(&w) {
                    words.push(w);
                }
            }
        };
        for t in templates.all() {
            add(&t.replace(['{', '}'], " "));
        }
        for label in CLASS_LABELS {
            add(label);
        }
        for d in 0..10 {
            add(&d.to_string());
        }
        add("unknown");
        for w in extra_words {
            add(w);
        }
        Tokenizer {
            words,
            unknown_id: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn unknown_id(&self) -> usize {
        self.unknown_id
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.words
            .iter()
            .position(|w| w == word)
            .unwrap_or(self.unknown_id)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id_of(w)).collect()
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(&["nyu", "synthetic"])
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '<' && c != '>'))
    {
        if raw.is_empty() {
            continue;
        }
        if raw.chars().all(|c| c.is_ascii_digit()) {
            for c in raw.chars() {
                out.push(c.to_string());
            }
        } else {
            out.push(raw.to_string());
        }
    }
    out
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in pairs {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

fn stat(v: f64) -> String {
    format!("{v:.3}")
}

/// Builds the prompt bundle for one sample using the default templates.
pub fn build_prompt_bundle(
    sample: &SceneSample,
    dataset_name: &str,
    tokenizer: &Tokenizer,
    mode: PromptMode,
) -> PromptBundle {
    build_prompt_bundle_with(
        &PromptTemplates::default(),
        sample,
        dataset_name,
        tokenizer,
        mode,
    )
}

/// Builds the prompt bundle for one sample.
///
/// `Apg` fills the templates with live statistics, `Fixed` freezes every
/// statistic placeholder to the literal word "unknown" so the bundle is
/// identical for every image, and `None` produces an empty bundle.
pub fn build_prompt_bundle_with(
    templates: &PromptTemplates,
    sample: &SceneSample,
    dataset_name: &str,
    tokenizer: &Tokenizer,
    mode: PromptMode,
) -> PromptBundle {
    match mode {
        PromptMode::None => PromptBundle {
            dataset_text: String::new(),
            task_text: String::new(),
            pixel_text: String::new(),
            class_text: String::new(),
            token_ids: Vec::new(),
        },
        PromptMode::Fixed => {
            let dataset_text = fill(&templates.dataset, &[("name", dataset_name)]);
            let task_text = templates.task.clone();
            let pixel_text = fill(
                &templates.pixel,
                &[("min", "unknown"), ("max", "unknown"), ("median", "unknown")],
            );
            let class_text = fill(&templates.class, &[("class", "unknown")]);
            finish_bundle(dataset_text, task_text, pixel_text, class_text, tokenizer)
        }
        PromptMode::Apg => {
            let stats = compute_pixel_stats(&sample.image);
            let class = classify_image(&stats);
            let dataset_text = fill(&templates.dataset, &[("name", dataset_name)]);
            let task_text = templates.task.clone();
            let pixel_text = fill(
                &templates.pixel,
                &[
                    ("min", stat(stats.min).as_str()),
                    ("max", stat(stats.max).as_str()),
                    ("median", stat(stats.median).as_str()),
                ],
            );
            let class_text = fill(&templates.class, &[("class", class)]);
            finish_bundle(dataset_text, task_text, pixel_text, class_text, tokenizer)
        }
    }
}

fn finish_bundle(
    dataset_text: String,
    task_text: String,
    pixel_text: String,
    class_text: String,
    tokenizer: &Tokenizer,
) -> PromptBundle {
    let joined = format!("{dataset_text} {task_text} {pixel_text} {class_text}");
    let token_ids = tokenizer.tokenize(&joined);
    PromptBundle {
        dataset_text,
        task_text,
        pixel_text,
        class_text,
        token_ids,
    }
}

/// Upper bound on the token count of any bundle this tokenizer can emit;
/// sizes the text positional embeddings.
pub fn max_prompt_len(tokenizer: &Tokenizer, dataset_name: &str) -> usize {
    max_prompt_len_with(&PromptTemplates::default(), tokenizer, dataset_name)
}

pub fn max_prompt_len_with(
    templates: &PromptTemplates,
    tokenizer: &Tokenizer,
    dataset_name: &str,
) -> usize {
    let worst_pixel = fill(
        &templates.pixel,
        &[("min", "0.000"), ("max", "0.000"), ("median", "0.000")],
    );
    let longest_class = CLASS_LABELS
        .iter()
        .map(|c| fill(&templates.class, &[("class", c)]))
        .max_by_key(|t| tokenizer.tokenize(t).len())
        .unwrap();
    let joined = format!(
        "{} {} {} {}",
        fill(&templates.dataset, &[("name", dataset_name)]),
        templates.task,
        worst_pixel,
        longest_class
    );
    tokenizer.tokenize(&joined).len()
}
