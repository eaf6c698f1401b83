//! Image and text encoders scoring masked regions against prompts.
//!
//! [`SyntheticMatcher`] is a closed-form, differentiable stand-in for a
//! pretrained image-text model: every concept owns a color signature and a
//! direction in embedding space, and an image embeds to the
//! coverage-weighted sum of the directions of the concepts it shows.
//! [`ExternalMatcher`] wraps a real model backend behind the same trait.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Resampler;
use crate::datamodel::Image;
use crate::error::{validation, ClimsError, Result};

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Below this norm the raw image embedding is replaced by the null embedding.
pub const NULL_NORM: f64 = 1e-8;

const BLACK_NORM: f64 = 1e-12;

/// Unit-norm encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Frozen image/text encoder pair.
pub trait Matcher: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_image(&self, image: &Image) -> Result<Embedding>;

    /// Gradient of `<upstream, encode_image(image)>` with respect to every
    /// pixel, shaped like the image (`H x W x 3`).
    fn encode_image_vjp(&self, image: &Image, upstream: &[f64]) -> Result<Array3<f64>>;

    fn encode_text(&self, prompt: &str) -> Result<Embedding>;
}

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(validation(format!(
            "cannot compare vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(validation("cosine similarity of a zero vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to `u`.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let c = cosine_similarity(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    Ok(u.iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptRole {
    Object,
    Background,
}

/// A recognizable concept: name, pixel signature and text affinities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    /// Reference RGB color; only its direction (chromaticity) matters.
    pub color: [f64; 3],
    /// Chromaticity tolerance: membership is `exp(-(1 - cos)/tolerance^2)`.
    pub tolerance: f64,
    pub role: ConceptRole,
    /// Extra weight of other concepts' directions in this concept's text
    /// embedding. Models text-side co-occurrence bias (the prompt for an
    /// object also partially describes its usual surroundings).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub text_affinity: BTreeMap<String, f64>,
}

/// Serialized concept table; vectors are regenerated from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTable {
    pub seed: u64,
    pub concepts: Vec<Concept>,
}

impl ConceptTable {
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(validation("concept table is empty"));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.concepts {
            if !names.insert(c.name.as_str()) {
                return Err(validation(format!("duplicate concept {:?}", c.name)));
            }
            if !(c.tolerance.is_finite() && c.tolerance > 0.0) {
                return Err(validation(format!(
                    "concept {:?} has bad tolerance",
                    c.name
                )));
            }
            if c.color.iter().any(|v| !v.is_finite() || *v < 0.0) || norm(&c.color) == 0.0 {
                return Err(validation(format!("concept {:?} has bad color", c.name)));
            }
        }
        for c in &self.concepts {
            for (other, w) in &c.text_affinity {
                if !names.contains(other.as_str()) || other == &c.name {
                    return Err(validation(format!(
                        "concept {:?} has affinity to unknown concept {other:?}",
                        c.name
                    )));
                }
                if !(w.is_finite() && *w >= 0.0) {
                    return Err(validation(format!("affinity {w} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ConceptTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClimsError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("concept table serializes")
    }
}

/// Seeded orthonormal basis: Gram-Schmidt on the columns of a Gaussian matrix.
fn orthonormal_basis(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m = Array2::from_shape_simple_fn((dim, dim), || {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let mut ok = true;
        for j in 0..dim {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ci = m.column(i).to_owned();
                m.column_mut(j).scaled_add(-proj, &ci);
            }
            let n = m.column(j).dot(&m.column(j)).sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            m.column_mut(j).mapv_inplace(|v| v / n);
        }
        if ok {
            return m;
        }
    }
}

struct Signature {
    direction: [f64; 3],
    inv_tol2: f64,
}

/// Deterministic differentiable matcher driven by a [`ConceptTable`].
pub struct SyntheticMatcher {
    table: ConceptTable,
    signatures: Vec<Signature>,
    /// One row per concept.
    vectors: Array2<f64>,
    null: Vec<f64>,
}

impl SyntheticMatcher {
    pub fn new(table: ConceptTable) -> Result<Self> {
        table.validate()?;
        let n = table.concepts.len();
        let basis = orthonormal_basis(n + 1, table.seed);
        let vectors = basis.t().slice(ndarray::s![..n, ..]).to_owned();
        let null = basis.column(n).to_vec();
        let signatures = table
            .concepts
            .iter()
            .map(|c| {
                let nc = norm(&c.color);
                Signature {
                    direction: [c.color[0] / nc, c.color[1] / nc, c.color[2] / nc],
                    inv_tol2: 1.0 / (c.tolerance * c.tolerance),
                }
            })
            .collect();
        Ok(Self {
            table,
            signatures,
            vectors,
            null,
        })
    }

    pub fn table(&self) -> &ConceptTable {
        &self.table
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.table.concepts.iter().position(|c| c.name == name)
    }

    pub fn concept_vector(&self, index: usize) -> Embedding {
        Embedding(self.vectors.row(index).to_vec())
    }

    pub fn null_embedding(&self) -> Embedding {
        Embedding(self.null.clone())
    }

    /// Per-concept coverage `w_c = sum_pixels membership_c * luminance`.
    pub fn coverage(&self, image: &Image) -> Vec<f64> {
        let mut w = vec![0.0; self.signatures.len()];
        for px in image.pixels().lanes(Axis(2)) {
            let x = [px[0], px[1], px[2]];
            let n = norm(&x);
            if n < BLACK_NORM {
                continue;
            }
            let lum = dot(&LUMA, &x);
            for (wc, sig) in w.iter_mut().zip(&self.signatures) {
                let cos = dot(&sig.direction, &x) / n;
                *wc += (-(1.0 - cos) * sig.inv_tol2).exp() * lum;
            }
        }
        w
    }

    fn raw_embedding(&self, coverage: &[f64]) -> Vec<f64> {
        self.vectors
            .t()
            .dot(&ndarray::ArrayView1::from(coverage))
            .to_vec()
    }

    /// Longest concept name contained in `prompt`.
    fn lookup(&self, prompt: &str) -> Result<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (i, c) in self.table.concepts.iter().enumerate() {
            if prompt.contains(c.name.as_str()) && best.is_none_or(|(_, l)| c.name.len() > l) {
                best = Some((i, c.name.len()));
            }
        }
        best.map(|(i, _)| i).ok_or_else(|| {
            let known: Vec<&str> = self
                .table
                .concepts
                .iter()
                .map(|c| c.name.as_str())
                .collect();
            ClimsError::Matcher(format!(
                "prompt {prompt:?} names no known concept; known concepts: {}",
                known.join(", ")
            ))
        })
    }
}

impl Matcher for SyntheticMatcher {
    fn dim(&self) -> usize {
        self.null.len()
    }

    fn encode_image(&self, image: &Image) -> Result<Embedding> {
        let raw = self.raw_embedding(&self.coverage(image));
        let n = norm(&raw);
        if n < NULL_NORM {
            return Ok(self.null_embedding());
        }
        Ok(Embedding(raw.iter().map(|v| v / n).collect()))
    }

    fn encode_image_vjp(&self, image: &Image, upstream: &[f64]) -> Result<Array3<f64>> {
        if upstream.len() != self.dim() {
            return Err(validation("upstream gradient has wrong dimension"));
        }
        let mut grad = Array3::zeros(image.pixels().dim());
        let raw = self.raw_embedding(&self.coverage(image));
        let n = norm(&raw);
        if n < NULL_NORM {
            return Ok(grad);
        }
        let v: Vec<f64> = raw.iter().map(|r| r / n).collect();
        let vg = dot(&v, upstream);
        let g_raw: Vec<f64> = upstream
            .iter()
            .zip(&v)
            .map(|(g, vi)| (g - vi * vg) / n)
            .collect();
        let g_cov = self.vectors.dot(&ndarray::ArrayView1::from(&g_raw[..]));
        for (px, mut gpx) in image
            .pixels()
            .lanes(Axis(2))
            .into_iter()
            .zip(grad.lanes_mut(Axis(2)))
        {
            let x = [px[0], px[1], px[2]];
            let nx = norm(&x);
            if nx < BLACK_NORM {
                continue;
            }
            let u = [x[0] / nx, x[1] / nx, x[2] / nx];
            let lum = dot(&LUMA, &x);
            let mut acc = [0.0; 3];
            for (gc, sig) in g_cov.iter().zip(&self.signatures) {
                if *gc == 0.0 {
                    continue;
                }
                let cos = dot(&sig.direction, &u);
                let m = (-(1.0 - cos) * sig.inv_tol2).exp();
                // d m / d x = m / tol^2 * (s - u (u.s)) / |x|
                let dm_scale = lum * m * sig.inv_tol2 / nx;
                for ch in 0..3 {
                    acc[ch] += gc * (m * LUMA[ch] + dm_scale * (sig.direction[ch] - u[ch] * cos));
                }
            }
            for ch in 0..3 {
                gpx[ch] = acc[ch];
            }
        }
        Ok(grad)
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        if prompt.trim().is_empty() {
            return Err(ClimsError::Matcher("empty prompt".into()));
        }
        let idx = self.lookup(prompt)?;
        let concept = &self.table.concepts[idx];
        if concept.text_affinity.is_empty() {
            return Ok(self.concept_vector(idx));
        }
        let mut v = self.vectors.row(idx).to_owned();
        for (other, w) in &concept.text_affinity {
            let j = self.concept_index(other).expect("affinities validated");
            v.scaled_add(*w, &self.vectors.row(j));
        }
        let n = v.dot(&v).sqrt();
        Ok(Embedding(v.iter().map(|x| x / n).collect()))
    }
}

/// Backend of a pretrained image-text model operating on preprocessed
/// `3 x S x S` tensors. Outputs need not be normalized.
pub trait ImageTextBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_pixels(&self, chw: &Array3<f64>) -> Result<Vec<f64>>;
    fn encode_pixels_vjp(&self, chw: &Array3<f64>, upstream: &[f64]) -> Result<Array3<f64>>;
    fn encode_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Identifies the external model and its square input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub model_id: String,
    pub input_size: usize,
    #[serde(default = "default_mean")]
    pub mean: [f64; 3],
    #[serde(default = "default_std")]
    pub std: [f64; 3],
}

fn default_mean() -> [f64; 3] {
    [0.48145466, 0.4578275, 0.40821073]
}

fn default_std() -> [f64; 3] {
    [0.26862954, 0.26130258, 0.27577711]
}

impl AdapterConfig {
    pub fn new(model_id: impl Into<String>, input_size: usize) -> Self {
        Self {
            model_id: model_id.into(),
            input_size,
            mean: default_mean(),
            std: default_std(),
        }
    }
}

/// Adapter for a real model: bilinear resize to the model input size,
/// per-channel normalization, then the backend; outputs are unit-normalized.
pub struct ExternalMatcher {
    config: AdapterConfig,
    backend: Option<Box<dyn ImageTextBackend>>,
}

impl ExternalMatcher {
    pub fn new(config: AdapterConfig) -> Self {
        Self {
            config,
            backend: None,
        }
    }

    pub fn with_backend(mut self, backend: Box<dyn ImageTextBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    fn backend(&self) -> Result<&dyn ImageTextBackend> {
        self.backend.as_deref().ok_or_else(|| {
            ClimsError::Matcher(format!(
                "matcher for model {:?} has no backend loaded",
                self.config.model_id
            ))
        })
    }

    fn resampler(&self, image: &Image) -> Resampler {
        let s = self.config.input_size;
        Resampler::new((image.height(), image.width()), (s, s))
    }

    fn preprocess(&self, image: &Image) -> Array3<f64> {
        let chw = image
            .pixels()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned();
        let mut out = self.resampler(image).apply(&chw);
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (self.config.mean[ch], self.config.std[ch]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

fn normalize_with_grad(raw: &[f64], upstream: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = norm(raw);
    if n == 0.0 || !n.is_finite() {
        return Err(ClimsError::Matcher(
            "backend returned a zero embedding".into(),
        ));
    }
    let v: Vec<f64> = raw.iter().map(|r| r / n).collect();
    let g = match upstream {
        Some(up) => {
            let vg = dot(&v, up);
            up.iter().zip(&v).map(|(g, vi)| (g - vi * vg) / n).collect()
        }
        None => Vec::new(),
    };
    Ok((v, g))
}

impl Matcher for ExternalMatcher {
    fn dim(&self) -> usize {
        self.backend.as_ref().map_or(0, |b| b.dim())
    }

    fn encode_image(&self, image: &Image) -> Result<Embedding> {
        let backend = self.backend()?;
        let raw = backend.encode_pixels(&self.preprocess(image))?;
        Ok(Embedding(normalize_with_grad(&raw, None)?.0))
    }

    fn encode_image_vjp(&self, image: &Image, upstream: &[f64]) -> Result<Array3<f64>> {
        let backend = self.backend()?;
        let x = self.preprocess(image);
        let raw = backend.encode_pixels(&x)?;
        let (_, g_raw) = normalize_with_grad(&raw, Some(upstream))?;
        let mut g = backend.encode_pixels_vjp(&x, &g_raw)?;
        for (ch, mut plane) in g.outer_iter_mut().enumerate() {
            let s = self.config.std[ch];
            plane.mapv_inplace(|v| v / s);
        }
        let g_chw = self.resampler(image).adjoint(&g);
        Ok(g_chw
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .into_owned())
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let raw = self.backend()?.encode_text(prompt)?;
        Ok(Embedding(normalize_with_grad(&raw, None)?.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn concept(name: &str, color: [f64; 3], role: ConceptRole) -> Concept {
        Concept {
            name: name.into(),
            color,
            tolerance: 0.1,
            role,
            text_affinity: BTreeMap::new(),
        }
    }

    fn matcher() -> SyntheticMatcher {
        SyntheticMatcher::new(ConceptTable {
            seed: 3,
            concepts: vec![
                concept("red-thing", [1.0, 0.0, 0.0], ConceptRole::Object),
                concept("green-thing", [0.0, 1.0, 0.0], ConceptRole::Object),
                concept("railroad", [0.6, 0.35, 0.15], ConceptRole::Background),
            ],
        })
        .unwrap()
    }

    #[test]
    fn concept_vectors_orthonormal_with_null() {
        let m = matcher();
        for i in 0..3 {
            let vi = m.concept_vector(i);
            assert_abs_diff_eq!(vi.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(dot(&vi.0, &m.null_embedding().0), 0.0, epsilon = 1e-12);
            for j in 0..i {
                assert_abs_diff_eq!(dot(&vi.0, &m.concept_vector(j).0), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pure_concept_image_matches_concept() {
        let m = matcher();
        let img = Image::filled(8, 8, [0.8, 0.0, 0.0]);
        let e = m.encode_image(&img).unwrap();
        let c = cosine_similarity(&e.0, &m.concept_vector(0).0).unwrap();
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn black_image_is_null() {
        let m = matcher();
        let e = m.encode_image(&Image::zeros(8, 8)).unwrap();
        assert_eq!(e, m.null_embedding());
        for i in 0..3 {
            assert_abs_diff_eq!(dot(&e.0, &m.concept_vector(i).0), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn half_and_half_image() {
        // Equal luminance so both halves carry equal coverage.
        let m = matcher();
        let mut px = Array3::zeros((8, 8, 3));
        for h in 0..8 {
            for w in 0..8 {
                if w < 4 {
                    px[[h, w, 0]] = 1.0;
                } else {
                    px[[h, w, 1]] = LUMA[0] / LUMA[1];
                }
            }
        }
        let e = m.encode_image(&Image::new(px).unwrap()).unwrap();
        let a = cosine_similarity(&e.0, &m.concept_vector(0).0).unwrap();
        let b = cosine_similarity(&e.0, &m.concept_vector(1).0).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert_abs_diff_eq!(a, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-6);
    }

    #[test]
    fn scaling_intensity_keeps_direction() {
        let m = matcher();
        let mut px = Array3::zeros((8, 8, 3));
        for h in 0..8 {
            for w in 0..8 {
                let c = if (h + w) % 3 == 0 {
                    [0.9, 0.05, 0.05]
                } else {
                    [0.6, 0.35, 0.15]
                };
                for ch in 0..3 {
                    px[[h, w, ch]] = c[ch];
                }
            }
        }
        let a = m.encode_image(&Image::new(px.clone()).unwrap()).unwrap();
        let b = m.encode_image(&Image::new(px * 0.5).unwrap()).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn masking_a_concept_lowers_its_similarity() {
        let m = matcher();
        let mut px = Array3::zeros((8, 8, 3));
        for h in 0..8 {
            for w in 0..8 {
                let c = if h < 3 {
                    [0.9, 0.05, 0.05]
                } else {
                    [0.6, 0.35, 0.15]
                };
                for ch in 0..3 {
                    px[[h, w, ch]] = c[ch];
                }
            }
        }
        let text = m.encode_text("a photo of railroad").unwrap();
        let before = cosine_similarity(
            &m.encode_image(&Image::new(px.clone()).unwrap()).unwrap().0,
            &text.0,
        )
        .unwrap();
        for h in 3..8 {
            for w in 0..8 {
                for ch in 0..3 {
                    px[[h, w, ch]] = 0.0;
                }
            }
        }
        let after = cosine_similarity(
            &m.encode_image(&Image::new(px).unwrap()).unwrap().0,
            &text.0,
        )
        .unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn text_lookup() {
        let m = matcher();
        let t = m.encode_text("a photo of railroad").unwrap();
        assert_eq!(t, m.concept_vector(2));
        assert_eq!(t, m.encode_text("a photo of railroad").unwrap());
        let err = m.encode_text("a photo of unicorn").unwrap_err();
        assert!(err.to_string().contains("railroad"), "{err}");
        assert!(m.encode_text("").is_err());
    }

    #[test]
    fn text_affinity_mixes_directions() {
        let mut table = matcher().table().clone();
        table.concepts[0]
            .text_affinity
            .insert("railroad".into(), 1.0);
        let m = SyntheticMatcher::new(table).unwrap();
        let t = m.encode_text("a photo of red-thing").unwrap();
        assert_abs_diff_eq!(
            dot(&t.0, &m.concept_vector(0).0),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            dot(&t.0, &m.concept_vector(2).0),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_eq!(
            m.encode_text("a photo of railroad").unwrap(),
            m.concept_vector(2)
        );
    }

    #[test]
    fn cosine_basics() {
        let u = [0.6, 0.8, 0.0];
        assert_abs_diff_eq!(cosine_similarity(&u, &u).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let u3: Vec<f64> = u.iter().map(|v| 3.0 * v).collect();
        assert_abs_diff_eq!(cosine_similarity(&u, &u3).unwrap(), 1.0, epsilon = 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn image_vjp_matches_finite_differences() {
        let m = matcher();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let colors = [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05], [0.6, 0.35, 0.15]];
        let mut px = Array3::zeros((8, 8, 3));
        for h in 0..8 {
            for w in 0..8 {
                let c = colors[(h * 8 + w) % 3];
                let s: f64 = 0.3 + 0.6 * rand::Rng::gen::<f64>(&mut rng);
                for ch in 0..3 {
                    px[[h, w, ch]] = (c[ch] * s + 0.02 * rand::Rng::gen::<f64>(&mut rng)).min(1.0);
                }
            }
        }
        let up: Vec<f64> = (0..m.dim()).map(|i| (i as f64 * 0.7).sin()).collect();
        let img = Image::new(px.clone()).unwrap();
        let g = m.encode_image_vjp(&img, &up).unwrap();
        let f = |p: &Array3<f64>| {
            dot(
                &m.encode_image(&Image::from_array_unchecked(p.clone()))
                    .unwrap()
                    .0,
                &up,
            )
        };
        let step = 1e-5;
        for idx in [[0, 0, 0], [1, 2, 1], [3, 5, 2], [7, 7, 0], [4, 4, 1]] {
            let mut p = px.clone();
            p[idx] += step;
            let mut q = px.clone();
            q[idx] -= step;
            let fd = (f(&p) - f(&q)) / (2.0 * step);
            let an = g[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(1e-6),
                "{idx:?}: fd {fd} an {an}"
            );
        }
    }

    struct LinearBackend {
        proj: Array2<f64>,
    }

    impl ImageTextBackend for LinearBackend {
        fn dim(&self) -> usize {
            self.proj.nrows()
        }
        fn encode_pixels(&self, chw: &Array3<f64>) -> Result<Vec<f64>> {
            let flat = chw.iter().copied().collect::<ndarray::Array1<f64>>();
            Ok(self.proj.dot(&flat).mapv(|v| v + 1.0).to_vec())
        }
        fn encode_pixels_vjp(&self, chw: &Array3<f64>, upstream: &[f64]) -> Result<Array3<f64>> {
            let g = self.proj.t().dot(&ndarray::ArrayView1::from(upstream));
            Ok(Array3::from_shape_vec(chw.dim(), g.to_vec()).unwrap())
        }
        fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
            Ok((0..self.dim()).map(|i| (prompt.len() + i) as f64).collect())
        }
    }

    #[test]
    fn external_adapter_requires_backend() {
        let m = ExternalMatcher::new(AdapterConfig::new("ViT-B/16", 4));
        assert!(matches!(
            m.encode_image(&Image::zeros(8, 8)),
            Err(ClimsError::Matcher(_))
        ));
        assert!(m.encode_text("a photo of cat").is_err());
    }

    #[test]
    fn external_adapter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = Array2::from_shape_simple_fn((5, 3 * 4 * 4), || {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let m = ExternalMatcher::new(AdapterConfig::new("mock", 4))
            .with_backend(Box::new(LinearBackend { proj }));
        let px = Array3::from_shape_fn((8, 8, 3), |(h, w, c)| {
            ((h * 7 + w * 3 + c) % 10) as f64 / 10.0
        });
        let img = Image::new(px.clone()).unwrap();
        let e = m.encode_image(&img).unwrap();
        assert_abs_diff_eq!(e.norm(), 1.0, epsilon = 1e-12);
        let up = [0.3, -0.2, 0.5, 0.1, -0.4];
        let g = m.encode_image_vjp(&img, &up).unwrap();
        let f = |p: &Array3<f64>| {
            dot(
                &m.encode_image(&Image::from_array_unchecked(p.clone()))
                    .unwrap()
                    .0,
                &up,
            )
        };
        for idx in [[0, 0, 0], [3, 4, 1], [7, 2, 2]] {
            let mut p = px.clone();
            p[idx] += 1e-5;
            let mut q = px.clone();
            q[idx] -= 1e-5;
            let fd = (f(&p) - f(&q)) / 2e-5;
            assert!((fd - g[idx]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }

    #[test]
    fn table_json_round_trip_and_validation() {
        let t = matcher().table().clone();
        assert_eq!(ConceptTable::from_json(&t.to_json()).unwrap(), t);
        let mut bad = t.clone();
        bad.concepts[1].name = "red-thing".into();
        assert!(SyntheticMatcher::new(bad).is_err());
        let mut bad = t;
        bad.concepts[0].text_affinity.insert("nothing".into(), 1.0);
        assert!(bad.validate().is_err());
    }
}
