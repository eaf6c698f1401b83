//! Deterministic synthetic scenes where objects co-occur with textured
//! backgrounds, with image-level labels and pixel ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{build_prompt_book, Image, LabelVector, PromptBook, DEFAULT_TEMPLATE};
use crate::error::{validation, ClimsError, Result};
use crate::matcher::{Concept, ConceptRole, ConceptTable};

/// Intensity pattern painted with a concept's color.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    #[default]
    Plain,
    /// Vertical sleepers every few columns over two bright rails.
    Stripes,
    /// Per-pixel random intensity.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub color: [f64; 3],
    pub role: ConceptRole,
    #[serde(default)]
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background concept painted everywhere else.
    pub canvas: String,
    pub concepts: Vec<ConceptSpec>,
    /// `object -> background -> P(background present | object present)`.
    pub cooccurrence: BTreeMap<String, BTreeMap<String, f64>>,
    /// Inclusive range of objects per scene; the lower end may be 0.
    pub object_count: [usize; 2],
    /// Inclusive range of object side length (disc diameter).
    pub object_size: [usize; 2],
    /// Inclusive range of co-occurring background band height.
    pub band_height: [usize; 2],
    /// Accepted range of object pixels / all pixels.
    pub object_fraction: [f64; 2],
    /// Max multiplicative intensity jitter per pixel.
    pub jitter: f64,
    /// Chromaticity tolerance of the derived concept table.
    pub tolerance: f64,
    /// Weight of each co-occurring background in its object's text embedding.
    pub text_affinity: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// 64x64 scenes with toy trains over railroads and toy boats over rivers.
    pub fn default_spec() -> Self {
        let concept = |name: &str, color: [f64; 3], role, texture| ConceptSpec {
            name: name.into(),
            color,
            role,
            texture,
        };
        let mut cooccurrence = BTreeMap::new();
        cooccurrence.insert(
            "toy-train".to_owned(),
            BTreeMap::from([("railroad".to_owned(), 0.9)]),
        );
        cooccurrence.insert(
            "toy-boat".to_owned(),
            BTreeMap::from([("river".to_owned(), 0.9)]),
        );
        Self {
            height: 64,
            width: 64,
            canvas: "ground".into(),
            concepts: vec![
                concept(
                    "toy-train",
                    [0.85, 0.12, 0.12],
                    ConceptRole::Object,
                    Texture::Plain,
                ),
                concept(
                    "toy-boat",
                    [0.55, 0.15, 0.90],
                    ConceptRole::Object,
                    Texture::Plain,
                ),
                concept(
                    "railroad",
                    [0.60, 0.35, 0.15],
                    ConceptRole::Background,
                    Texture::Stripes,
                ),
                concept(
                    "river",
                    [0.15, 0.35, 0.85],
                    ConceptRole::Background,
                    Texture::Noise,
                ),
                concept(
                    "ground",
                    [0.30, 0.65, 0.25],
                    ConceptRole::Background,
                    Texture::Plain,
                ),
            ],
            cooccurrence,
            object_count: [0, 1],
            object_size: [14, 30],
            band_height: [8, 12],
            object_fraction: [0.02, 0.3],
            jitter: 0.15,
            tolerance: 0.1,
            text_affinity: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(validation("canvas must be at least 8x8"));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.concepts {
            if !names.insert(c.name.as_str()) {
                return Err(validation(format!("duplicate concept {:?}", c.name)));
            }
        }
        let role_of = |n: &str| self.concepts.iter().find(|c| c.name == n).map(|c| c.role);
        if role_of(&self.canvas) != Some(ConceptRole::Background) {
            return Err(validation(format!(
                "canvas {:?} must name a background concept",
                self.canvas
            )));
        }
        if self.object_classes().is_empty() {
            return Err(validation("spec needs at least one object concept"));
        }
        for (obj, bgs) in &self.cooccurrence {
            if role_of(obj) != Some(ConceptRole::Object) {
                return Err(validation(format!(
                    "co-occurrence key {obj:?} is not an object"
                )));
            }
            for (bg, p) in bgs {
                if role_of(bg) != Some(ConceptRole::Background) {
                    return Err(validation(format!("{bg:?} is not a background concept")));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(validation(format!(
                        "probability {p} for {obj}/{bg} outside [0, 1]"
                    )));
                }
            }
        }
        let ordered = |r: [usize; 2], what: &str| {
            if r[0] == 0 || r[0] > r[1] {
                Err(validation(format!("{what} range {r:?} is invalid")))
            } else {
                Ok(())
            }
        };
        if self.object_count[1] == 0 || self.object_count[0] > self.object_count[1] {
            return Err(validation(format!(
                "object_count range {:?} is invalid",
                self.object_count
            )));
        }
        ordered(self.object_size, "object_size")?;
        ordered(self.band_height, "band_height")?;
        let [fmin, fmax] = self.object_fraction;
        if !(0.0..=1.0).contains(&fmin) || !(0.0..=1.0).contains(&fmax) || fmin > fmax {
            return Err(validation(
                "object_fraction must be an ordered range in [0, 1]",
            ));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(validation("jitter must be in [0, 1)"));
        }
        if !(self.tolerance > 0.0 && self.text_affinity >= 0.0) {
            return Err(validation("tolerance must be > 0 and text_affinity >= 0"));
        }
        let lane = self.height / self.object_count[1];
        let bands = self.max_bands() * self.band_height[1];
        if lane < self.object_size[1] + bands || self.width < self.object_size[1] {
            return Err(validation(format!(
                "canvas {}x{} too small for {} objects of size {} with {} px of bands",
                self.height, self.width, self.object_count[1], self.object_size[1], bands
            )));
        }
        Ok(())
    }

    fn max_bands(&self) -> usize {
        self.cooccurrence
            .values()
            .map(|m| m.values().filter(|p| **p > 0.0).count())
            .max()
            .unwrap_or(0)
    }

    pub fn object_classes(&self) -> Vec<String> {
        self.concepts
            .iter()
            .filter(|c| c.role == ConceptRole::Object)
            .map(|c| c.name.clone())
            .collect()
    }

    fn concept(&self, name: &str) -> &ConceptSpec {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .expect("names validated")
    }

    /// Backgrounds that can co-occur with `object`, in name order.
    pub fn backgrounds_of(&self, object: &str) -> Vec<String> {
        self.cooccurrence
            .get(object)
            .map(|m| {
                m.iter()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(b, _)| b.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Concept table for the synthetic matcher; object prompts lean towards
    /// their co-occurring backgrounds by `text_affinity`.
    pub fn concept_table(&self, seed: u64) -> ConceptTable {
        let concepts = self
            .concepts
            .iter()
            .map(|c| Concept {
                name: c.name.clone(),
                color: c.color,
                tolerance: self.tolerance,
                role: c.role,
                text_affinity: if self.text_affinity > 0.0 {
                    self.backgrounds_of(&c.name)
                        .into_iter()
                        .map(|b| (b, self.text_affinity))
                        .collect()
                } else {
                    BTreeMap::new()
                },
            })
            .collect();
        ConceptTable { seed, concepts }
    }

    pub fn prompt_book(&self) -> Result<PromptBook> {
        let classes = self.object_classes();
        let map = classes
            .iter()
            .map(|c| (c.clone(), self.backgrounds_of(c)))
            .filter(|(_, b)| !b.is_empty())
            .collect();
        build_prompt_book(&classes, &map, DEFAULT_TEMPLATE)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Generated scene. `gt_mask` holds 0 for background and `k + 1` for class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelVector,
    pub gt_mask: Array2<u8>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Placement {
    class: usize,
    disc: bool,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    bands: Vec<(usize, usize, usize)>, // (concept index, top, height)
}

fn paint(pixels: &mut Array3<f64>, y: usize, x: usize, color: [f64; 3], intensity: f64) {
    for ch in 0..3 {
        pixels[[y, x, ch]] = quantize(color[ch] * intensity);
    }
}

fn texture_intensity(
    texture: Texture,
    y: usize,
    x: usize,
    band_top: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    match texture {
        Texture::Plain => 1.0,
        Texture::Stripes => {
            let row = y - band_top;
            if row == 1 || x.is_multiple_of(4) {
                1.0
            } else {
                0.6
            }
        }
        Texture::Noise => rng.gen_range(0.7..=1.0),
    }
}

/// Scene `index` of `spec`; identical for identical `(seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let classes = spec.object_classes();
    let total = (spec.height * spec.width) as f64;
    for _attempt in 0..100 {
        let n = rng.gen_range(spec.object_count[0]..=spec.object_count[1]);
        let lane_h = spec.height / n.max(1);
        let mut placements = Vec::with_capacity(n);
        let mut object_pixels = 0usize;
        for lane in 0..n {
            let class = rng.gen_range(0..classes.len());
            let disc = rng.gen_bool(0.5);
            let h = rng.gen_range(spec.object_size[0]..=spec.object_size[1]);
            let w = if disc {
                h
            } else {
                rng.gen_range(spec.object_size[0]..=spec.object_size[1])
            };
            let present: Vec<usize> = spec
                .backgrounds_of(&classes[class])
                .iter()
                .filter(|b| {
                    let p = spec.cooccurrence[&classes[class]][*b];
                    rng.gen_bool(p)
                })
                .map(|b| {
                    spec.concepts
                        .iter()
                        .position(|c| &c.name == b)
                        .expect("validated")
                })
                .collect();
            let band_hs: Vec<usize> = present
                .iter()
                .map(|_| rng.gen_range(spec.band_height[0]..=spec.band_height[1]))
                .collect();
            let stack: usize = band_hs.iter().sum();
            let lane_top = lane * lane_h;
            let slack = lane_h - h - stack;
            let top = lane_top + rng.gen_range(0..=slack);
            let left = rng.gen_range(0..=spec.width - w);
            let mut band_top = top + h;
            let bands = present
                .into_iter()
                .zip(band_hs)
                .map(|(c, bh)| {
                    let b = (c, band_top, bh);
                    band_top += bh;
                    b
                })
                .collect();
            object_pixels += if disc { disc_area(h) } else { h * w };
            placements.push(Placement {
                class,
                disc,
                top,
                left,
                h,
                w,
                bands,
            });
        }
        let fraction = object_pixels as f64 / total;
        if n > 0 && (fraction < spec.object_fraction[0] || fraction > spec.object_fraction[1]) {
            continue;
        }
        return Ok(render(spec, &classes, &placements, &mut rng));
    }
    Err(validation(format!(
        "could not place objects within fraction range {:?} after 100 attempts",
        spec.object_fraction
    )))
}

fn in_disc(dy: usize, dx: usize, d: usize) -> bool {
    let r = d as f64 / 2.0;
    let (cy, cx) = (dy as f64 + 0.5 - r, dx as f64 + 0.5 - r);
    cy * cy + cx * cx <= r * r
}

fn disc_area(d: usize) -> usize {
    (0..d)
        .flat_map(|y| (0..d).map(move |x| (y, x)))
        .filter(|(y, x)| in_disc(*y, *x, d))
        .count()
}

fn render(
    spec: &SceneSpec,
    classes: &[String],
    placements: &[Placement],
    rng: &mut ChaCha8Rng,
) -> Scene {
    let (hh, ww) = (spec.height, spec.width);
    let mut pixels = Array3::zeros((hh, ww, 3));
    let mut gt = Array2::<u8>::zeros((hh, ww));
    let canvas = spec.concept(&spec.canvas);
    for y in 0..hh {
        for x in 0..ww {
            let j = 1.0 - rng.gen_range(0.0..=spec.jitter);
            paint(&mut pixels, y, x, canvas.color, j);
        }
    }
    for p in placements {
        for &(c, top, bh) in &p.bands {
            let concept = &spec.concepts[c];
            for y in top..top + bh {
                for x in 0..ww {
                    let t = texture_intensity(concept.texture, y, x, top, rng);
                    let j = 1.0 - rng.gen_range(0.0..=spec.jitter);
                    paint(&mut pixels, y, x, concept.color, t * j);
                }
            }
        }
        let concept = spec.concept(&classes[p.class]);
        for dy in 0..p.h {
            for dx in 0..p.w {
                if p.disc && !in_disc(dy, dx, p.h) {
                    continue;
                }
                let (y, x) = (p.top + dy, p.left + dx);
                let j = 1.0 - rng.gen_range(0.0..=spec.jitter);
                paint(&mut pixels, y, x, concept.color, j);
                gt[[y, x]] = (p.class + 1) as u8;
            }
        }
    }
    let mut flags = vec![false; classes.len()];
    for v in gt.iter().filter(|v| **v > 0) {
        flags[*v as usize - 1] = true;
    }
    Scene {
        image: Image::new(pixels).expect("generated pixels are in range"),
        labels: LabelVector::from_bools(&flags),
        gt_mask: gt,
    }
}

/// Entry of the on-disk manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub labels: LabelVector,
}

/// Dataset-level sidecar written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SceneSpec,
    pub spec_hash: String,
    pub class_names: Vec<String>,
    pub first_index: u64,
    pub count: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INFO_FILE: &str = "dataset.json";
pub const CONCEPTS_FILE: &str = "concepts.json";
pub const PROMPTS_FILE: &str = "prompts.json";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ClimsError::io(path, e))
}

fn save_rgb(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let px = image.pixels();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|c| (px[[y, x, c]] * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| ClimsError::Codec {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]]])
    });
    buf.save(path).map_err(|e| ClimsError::Codec {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn codec_err(path: &Path, e: impl std::fmt::Display) -> ClimsError {
    ClimsError::Codec {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| codec_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    Image::new(px)
}

pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| codec_err(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Writes scenes `first_index .. first_index + n` as PNG pairs plus the
/// manifest and sidecars.
pub fn generate_dataset(
    spec: &SceneSpec,
    first_index: u64,
    n: usize,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let scenes = (0..n as u64)
        .map(|i| generate_scene(spec, first_index + i))
        .collect::<Result<Vec<_>>>()?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| ClimsError::io(&dir, e))?;
    }
    let mut manifest = Vec::with_capacity(n);
    for (i, scene) in scenes.iter().enumerate() {
        let id = first_index + i as u64;
        let image_path = format!("images/{id:06}.png");
        let mask_path = format!("masks/{id:06}.png");
        save_rgb(&scene.image, &out_dir.join(&image_path))?;
        save_mask(&scene.gt_mask, &out_dir.join(&mask_path))?;
        manifest.push(ManifestEntry {
            image_path,
            mask_path,
            labels: scene.labels.clone(),
        });
    }
    let info = DatasetInfo {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        class_names: spec.object_classes(),
        first_index,
        count: n,
    };
    write_file(
        &out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    write_file(
        &out_dir.join(INFO_FILE),
        serde_json::to_string_pretty(&info)?.as_bytes(),
    )?;
    write_file(
        &out_dir.join(CONCEPTS_FILE),
        spec.concept_table(spec.seed).to_json().as_bytes(),
    )?;
    write_file(
        &out_dir.join(PROMPTS_FILE),
        spec.prompt_book()?.to_json()?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Labeled scenes; ground-truth masks are reachable only through
/// [`Dataset::for_evaluation`].
#[derive(Clone, Debug)]
pub struct Dataset {
    class_names: Vec<String>,
    images: Vec<Image>,
    labels: Vec<LabelVector>,
    masks: Option<Vec<Array2<u8>>>,
}

/// Images and image-level labels only.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub class_names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<LabelVector>,
}

#[derive(Clone, Debug)]
pub struct EvaluationSet {
    pub class_names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<LabelVector>,
    pub masks: Vec<Array2<u8>>,
}

impl Dataset {
    pub fn from_scenes(class_names: Vec<String>, scenes: Vec<Scene>) -> Self {
        let mut images = Vec::with_capacity(scenes.len());
        let mut labels = Vec::with_capacity(scenes.len());
        let mut masks = Vec::with_capacity(scenes.len());
        for s in scenes {
            images.push(s.image);
            labels.push(s.labels);
            masks.push(s.gt_mask);
        }
        Self {
            class_names,
            images,
            labels,
            masks: Some(masks),
        }
    }

    /// Generates scenes `first_index .. first_index + n` in memory.
    pub fn generate(spec: &SceneSpec, first_index: u64, n: usize) -> Result<Self> {
        let scenes = (0..n as u64)
            .map(|i| generate_scene(spec, first_index + i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_scenes(spec.object_classes(), scenes))
    }

    /// Loads a directory written by [`generate_dataset`]. Masks are read when
    /// every listed mask file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let info = read_info(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| ClimsError::io(&path, e))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let mut images = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        let mut masks = Vec::with_capacity(manifest.len());
        let mut have_masks = true;
        for e in &manifest {
            if e.labels.num_classes() != info.class_names.len() {
                return Err(validation(format!(
                    "{} has {} labels, dataset has {} classes",
                    e.image_path,
                    e.labels.num_classes(),
                    info.class_names.len()
                )));
            }
            images.push(load_rgb(&dir.join(&e.image_path))?);
            labels.push(e.labels.clone());
            let mp = dir.join(&e.mask_path);
            if have_masks && mp.exists() {
                masks.push(load_mask(&mp)?);
            } else {
                have_masks = false;
            }
        }
        Ok(Self {
            class_names: info.class_names,
            images,
            labels,
            masks: have_masks.then_some(masks),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn has_masks(&self) -> bool {
        self.masks.is_some()
    }

    pub fn for_training(&self) -> TrainingSet {
        TrainingSet {
            class_names: self.class_names.clone(),
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn for_evaluation(&self) -> Result<EvaluationSet> {
        let masks = self
            .masks
            .clone()
            .ok_or_else(|| validation("dataset has no ground-truth masks"))?;
        Ok(EvaluationSet {
            class_names: self.class_names.clone(),
            images: self.images.clone(),
            labels: self.labels.clone(),
            masks,
        })
    }
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl EvaluationSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn read_info(dir: &Path) -> Result<DatasetInfo> {
    let path: PathBuf = dir.join(INFO_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ClimsError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object_spec(p: f64) -> SceneSpec {
        let mut spec = SceneSpec::default_spec();
        spec.object_count = [1, 1];
        for m in spec.cooccurrence.values_mut() {
            for v in m.values_mut() {
                *v = p;
            }
        }
        spec
    }

    #[test]
    fn certain_cooccurrence_always_draws_band() {
        let spec = one_object_spec(1.0);
        let rail = spec
            .concepts
            .iter()
            .find(|c| c.name == "railroad")
            .unwrap()
            .color;
        let mut trains = 0;
        for i in 0..40 {
            let s = generate_scene(&spec, i).unwrap();
            if s.labels.is_set(0) {
                trains += 1;
                let found = s
                    .image
                    .pixels()
                    .lanes(ndarray::Axis(2))
                    .into_iter()
                    .any(|px| {
                        let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
                        let nr = (rail[0] * rail[0] + rail[1] * rail[1] + rail[2] * rail[2]).sqrt();
                        let cos = (px[0] * rail[0] + px[1] * rail[1] + px[2] * rail[2]) / (n * nr);
                        cos > 0.999
                    });
                assert!(found, "scene {i} lacks railroad pixels");
            }
        }
        assert!(trains > 5);
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::default_spec();
        assert_eq!(
            generate_scene(&spec, 3).unwrap(),
            generate_scene(&spec, 3).unwrap()
        );
        assert_ne!(
            generate_scene(&spec, 3).unwrap(),
            generate_scene(&spec, 4).unwrap()
        );
    }

    #[test]
    fn no_cooccurrence_leaves_plain_canvas() {
        let mut spec = one_object_spec(0.0);
        spec.jitter = 0.0;
        let canvas = spec
            .concepts
            .iter()
            .find(|c| c.name == "ground")
            .unwrap()
            .color
            .map(quantize);
        for i in 0..10 {
            let s = generate_scene(&spec, i).unwrap();
            for ((y, x), g) in s.gt_mask.indexed_iter() {
                if *g == 0 {
                    let px = s.image.pixels();
                    assert_eq!([px[[y, x, 0]], px[[y, x, 1]], px[[y, x, 2]]], canvas);
                }
            }
        }
    }

    #[test]
    fn labels_match_masks_and_fraction_in_range() {
        let spec = SceneSpec::default_spec();
        for i in 0..50 {
            let s = generate_scene(&spec, i).unwrap();
            for k in 0..2 {
                let present = s.gt_mask.iter().any(|v| *v as usize == k + 1);
                assert_eq!(present, s.labels.is_set(k));
            }
            let frac = s.gt_mask.iter().filter(|v| **v > 0).count() as f64 / 4096.0;
            assert!(
                frac == 0.0 || (frac >= spec.object_fraction[0] && frac <= spec.object_fraction[1])
            );
        }
    }

    #[test]
    fn too_small_canvas_rejected() {
        let mut spec = SceneSpec::default_spec();
        spec.object_count = [1, 4];
        assert!(generate_scene(&spec, 0).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SceneSpec::default_spec();
        assert_eq!(SceneSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn derived_prompt_book_and_table() {
        let spec = SceneSpec::default_spec();
        let book = spec.prompt_book().unwrap();
        assert_eq!(book.class_names(), ["toy-train", "toy-boat"]);
        assert_eq!(book.background_prompts(0), ["a photo of railroad"]);
        assert_eq!(book.background_prompts(1), ["a photo of river"]);
        let table = spec.concept_table(0);
        table.validate().unwrap();
        assert_eq!(
            table.concepts[0].text_affinity.get("railroad"),
            Some(&spec.text_affinity)
        );
    }
}
