//! Shared value types: images, labels, prompt books, loss weights and the
//! training configuration.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape, validation, ClimsError, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Placeholder substituted by a class or background name in a prompt template.
pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_TEMPLATE: &str = "a photo of {}";

/// RGB image stored as an `H x W x 3` array with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(shape(format!("image must have 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(validation(format!(
                "image is {h}x{w}, both sides must be at least {MIN_IMAGE_SIDE}"
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(validation(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Wraps an array produced internally (masking, flipping) without
    /// re-checking the value range.
    pub(crate) fn from_array_unchecked(pixels: Array3<f64>) -> Self {
        Self { pixels }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Array3::zeros((height, width, 3));
        for (ch, v) in rgb.iter().enumerate() {
            pixels.index_axis_mut(Axis(2), ch).fill(*v);
        }
        Self { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_array(self) -> Array3<f64> {
        self.pixels
    }

    pub fn flip_horizontal(&self) -> Image {
        Image {
            pixels: self.pixels.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height() || left + width > self.width() {
            return Err(shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Image {
            pixels: self
                .pixels
                .slice(s![top..top + height, left..left + width, ..])
                .to_owned(),
        })
    }
}

/// Image-level multi-hot labels over `K` foreground classes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(flags: Vec<u8>) -> Result<Self> {
        if let Some(bad) = flags.iter().find(|f| **f > 1) {
            return Err(validation(format!(
                "label entries must be 0 or 1, got {bad}"
            )));
        }
        Ok(Self(flags))
    }

    pub fn from_bools(flags: &[bool]) -> Self {
        Self(flags.iter().map(|f| u8::from(*f)).collect())
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0; k])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn is_set(&self, k: usize) -> bool {
        self.0.get(k).copied() == Some(1)
    }

    pub fn flags(&self) -> &[u8] {
        &self.0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|f| f64::from(*f)).collect()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == 1)
            .map(|(k, _)| k)
    }

    pub fn any(&self) -> bool {
        self.0.contains(&1)
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = ClimsError;

    fn try_from(value: Vec<u8>) -> Result<Self> {
        LabelVector::new(value)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(value: LabelVector) -> Self {
        value.0
    }
}

/// Object and class-related background prompts for every class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBook {
    template: String,
    class_names: Vec<String>,
    object_prompts: Vec<String>,
    background_prompts: Vec<Vec<String>>,
}

fn instantiate(template: &str, name: &str) -> String {
    template.replacen(PLACEHOLDER, name, 1)
}

/// Builds the prompt book for `class_names`; classes missing from
/// `background_map` get no background prompts.
pub fn build_prompt_book(
    class_names: &[String],
    background_map: &BTreeMap<String, Vec<String>>,
    template: &str,
) -> Result<PromptBook> {
    if class_names.is_empty() {
        return Err(validation("class list is empty"));
    }
    let placeholders = template.matches(PLACEHOLDER).count();
    if placeholders != 1 {
        return Err(validation(format!(
            "template {template:?} must contain exactly one {PLACEHOLDER} placeholder, found {placeholders}"
        )));
    }
    let mut seen = HashSet::new();
    for name in class_names {
        if name.is_empty() {
            return Err(validation("empty class name"));
        }
        if !seen.insert(name.as_str()) {
            return Err(validation(format!("duplicate class name {name:?}")));
        }
    }
    let object_prompts = class_names
        .iter()
        .map(|n| instantiate(template, n))
        .collect();
    let background_prompts = class_names
        .iter()
        .map(|n| {
            background_map
                .get(n)
                .map(|bgs| bgs.iter().map(|b| instantiate(template, b)).collect())
                .unwrap_or_default()
        })
        .collect();
    Ok(PromptBook {
        template: template.to_owned(),
        class_names: class_names.to_vec(),
        object_prompts,
        background_prompts,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptBookFile {
    template: String,
    classes: Vec<String>,
    #[serde(default)]
    backgrounds: BTreeMap<String, Vec<String>>,
}

impl PromptBook {
    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn object_prompt(&self, k: usize) -> &str {
        &self.object_prompts[k]
    }

    pub fn object_prompts(&self) -> &[String] {
        &self.object_prompts
    }

    pub fn background_prompts(&self, k: usize) -> &[String] {
        &self.background_prompts[k]
    }

    pub fn background_counts(&self) -> Vec<usize> {
        self.background_prompts.iter().map(Vec::len).collect()
    }

    /// The raw background names, recovered from the prompts.
    fn background_map(&self) -> BTreeMap<String, Vec<String>> {
        let (prefix, suffix) = self
            .template
            .split_once(PLACEHOLDER)
            .expect("template validated at construction");
        self.class_names
            .iter()
            .zip(&self.background_prompts)
            .filter(|(_, bgs)| !bgs.is_empty())
            .map(|(name, bgs)| {
                let raw = bgs
                    .iter()
                    .map(|p| {
                        p.strip_prefix(prefix)
                            .and_then(|r| r.strip_suffix(suffix))
                            .unwrap_or(p)
                            .to_owned()
                    })
                    .collect();
                (name.clone(), raw)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PromptBookFile {
            template: self.template.clone(),
            classes: self.class_names.clone(),
            backgrounds: self.background_map(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PromptBookFile = serde_json::from_str(text)?;
        if let Some(unknown) = file.backgrounds.keys().find(|k| !file.classes.contains(k)) {
            return Err(validation(format!(
                "background set given for unknown class {unknown:?}"
            )));
        }
        build_prompt_book(&file.classes, &file.backgrounds, &file.template)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClimsError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Background sets shipped for the two classes that have them; every other
/// class has none.
pub fn default_background_map() -> BTreeMap<String, Vec<String>> {
    let mut map = BTreeMap::new();
    map.insert(
        "train".to_owned(),
        vec!["railroad".into(), "railway".into(), "tree".into()],
    );
    map.insert(
        "boat".to_owned(),
        vec!["river".into(), "sea".into(), "lake".into()],
    );
    map
}

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Weights of the object-matching, background-matching, co-occurring
/// background suppression and area terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 25.0,
            gamma: 29.5,
            delta: 1.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Which objective terms are active during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LossSelection {
    pub otm: bool,
    pub btm: bool,
    pub cbs: bool,
    pub reg: bool,
}

impl LossSelection {
    pub const ALL: LossSelection = LossSelection {
        otm: true,
        btm: true,
        cbs: true,
        reg: true,
    };

    pub const NONE: LossSelection = LossSelection {
        otm: false,
        btm: false,
        cbs: false,
        reg: false,
    };

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.otm {
            out.push("otm");
        }
        if self.btm {
            out.push("btm");
        }
        if self.cbs {
            out.push("cbs");
        }
        if self.reg {
            out.push("reg");
        }
        out
    }
}

/// Training objective: the matching losses, or the sigmoid cross-entropy
/// classification baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Matching(LossSelection),
    Classification,
}

impl Default for Objective {
    fn default() -> Self {
        Objective::Matching(LossSelection::ALL)
    }
}

impl Objective {
    /// Parses names from {otm, btm, cbs, reg, cls}; `cls` must appear alone.
    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(validation("loss list is empty"));
        }
        let mut sel = LossSelection::NONE;
        let mut cls = false;
        for raw in names {
            match raw.as_ref().trim().to_ascii_lowercase().as_str() {
                "otm" => sel.otm = true,
                "btm" => sel.btm = true,
                "cbs" => sel.cbs = true,
                "reg" => sel.reg = true,
                "cls" => cls = true,
                other => {
                    return Err(validation(format!(
                        "unknown loss {other:?}, expected one of otm, btm, cbs, reg, cls"
                    )))
                }
            }
        }
        match (cls, sel == LossSelection::NONE) {
            (true, true) => Ok(Objective::Classification),
            (true, false) => Err(validation("cls cannot be combined with matching losses")),
            (false, _) => Ok(Objective::Matching(sel)),
        }
    }

    pub fn parse_comma_list(list: &str) -> Result<Self> {
        let names: Vec<&str> = list.split(',').filter(|s| !s.trim().is_empty()).collect();
        Self::parse(&names)
    }

    pub fn names(&self) -> Vec<&'static str> {
        match self {
            Objective::Matching(sel) => sel.names(),
            Objective::Classification => vec!["cls"],
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.names().join(","))
    }
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub similarity_clamp_epsilon: f64,
    pub loss_weights: LossWeights,
    pub objective: Objective,
    pub deterministic: bool,
    /// Initial learning rate of the classification baseline.
    pub baseline_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.00025,
            weight_decay: 0.0001,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            crop_size: 64,
            seed: 0,
            similarity_clamp_epsilon: 1e-4,
            loss_weights: LossWeights::default(),
            objective: Objective::default(),
            deterministic: true,
            baseline_learning_rate: 0.01,
        }
    }
}

/// Flat on-disk form of [`TrainConfig`]; every key is optional.
#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crop_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity_clamp_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    losses: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    deterministic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_learning_rate: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(validation(format!(
                "learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        let lr = self.baseline_learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(validation(format!(
                "baseline_learning_rate = {lr} must be > 0"
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(validation(format!(
                "weight_decay = {} must be >= 0",
                self.weight_decay
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(validation(format!(
                "momentum = {} must be in [0, 1)",
                self.momentum
            )));
        }
        if self.epochs < 1 {
            return Err(validation("epochs = 0 must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(validation("batch_size = 0 must be >= 1"));
        }
        if self.crop_size < MIN_IMAGE_SIDE {
            return Err(validation(format!(
                "crop_size = {} must be >= {MIN_IMAGE_SIDE}",
                self.crop_size
            )));
        }
        let eps = self.similarity_clamp_epsilon;
        if !(eps > 0.0 && eps < 0.5) {
            return Err(validation(format!(
                "similarity_clamp_epsilon = {eps} must be in (0, 0.5)"
            )));
        }
        self.loss_weights.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile = if text.trim().is_empty() {
            ConfigFile::default()
        } else {
            serde_json::from_str(text).map_err(|e| validation(format!("config: {e}")))?
        };
        let d = TrainConfig::default();
        let objective = match file.losses {
            Some(names) => Objective::parse(&names)?,
            None => d.objective,
        };
        let config = TrainConfig {
            learning_rate: file.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: file.weight_decay.unwrap_or(d.weight_decay),
            momentum: file.momentum.unwrap_or(d.momentum),
            epochs: file.epochs.unwrap_or(d.epochs),
            batch_size: file.batch_size.unwrap_or(d.batch_size),
            crop_size: file.crop_size.unwrap_or(d.crop_size),
            seed: file.seed.unwrap_or(d.seed),
            similarity_clamp_epsilon: file
                .similarity_clamp_epsilon
                .unwrap_or(d.similarity_clamp_epsilon),
            loss_weights: LossWeights {
                alpha: file.alpha.unwrap_or(d.loss_weights.alpha),
                beta: file.beta.unwrap_or(d.loss_weights.beta),
                gamma: file.gamma.unwrap_or(d.loss_weights.gamma),
                delta: file.delta.unwrap_or(d.loss_weights.delta),
            },
            objective,
            deterministic: file.deterministic.unwrap_or(d.deterministic),
            baseline_learning_rate: file
                .baseline_learning_rate
                .unwrap_or(d.baseline_learning_rate),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let file = ConfigFile {
            learning_rate: Some(self.learning_rate),
            weight_decay: Some(self.weight_decay),
            momentum: Some(self.momentum),
            epochs: Some(self.epochs),
            batch_size: Some(self.batch_size),
            crop_size: Some(self.crop_size),
            seed: Some(self.seed),
            similarity_clamp_epsilon: Some(self.similarity_clamp_epsilon),
            alpha: Some(self.loss_weights.alpha),
            beta: Some(self.loss_weights.beta),
            gamma: Some(self.loss_weights.gamma),
            delta: Some(self.loss_weights.delta),
            losses: Some(
                self.objective
                    .names()
                    .into_iter()
                    .map(str::to_owned)
                    .collect(),
            ),
            deterministic: Some(self.deterministic),
            baseline_learning_rate: Some(self.baseline_learning_rate),
        };
        serde_json::to_string_pretty(&file).expect("config serializes")
    }

    /// Initial learning rate for the configured objective.
    pub fn effective_learning_rate(&self) -> f64 {
        match self.objective {
            Objective::Classification => self.baseline_learning_rate,
            Objective::Matching(_) => self.learning_rate,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Reads and validates a JSON config file; absent keys take default values.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ClimsError::io(path, e))?;
    TrainConfig::from_json(&text)
}
