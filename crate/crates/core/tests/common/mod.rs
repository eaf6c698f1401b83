//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use clims::backbone::{sigmoid, ActivationMaps};
use clims::datamodel::{
    build_prompt_book, Image, LabelVector, LossSelection, LossWeights, PromptBook, DEFAULT_TEMPLATE,
};
use clims::losses;
use clims::matcher::{Concept, ConceptRole, ConceptTable, SyntheticMatcher};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const COLORS: [(&str, [f64; 3], ConceptRole); 6] = [
    ("alpha", [0.85, 0.12, 0.12], ConceptRole::Object),
    ("beta", [0.55, 0.15, 0.90], ConceptRole::Object),
    ("gamma", [0.80, 0.80, 0.10], ConceptRole::Object),
    ("rail", [0.60, 0.35, 0.15], ConceptRole::Background),
    ("lake", [0.15, 0.35, 0.85], ConceptRole::Background),
    ("ground", [0.30, 0.65, 0.25], ConceptRole::Background),
];

/// Three object classes: two backgrounds for the first, one for the
/// second and none for the third. The first object's text leans towards
/// its first background.
pub fn world(k: usize) -> (SyntheticMatcher, PromptBook) {
    let concepts = COLORS
        .iter()
        .map(|(name, color, role)| Concept {
            name: (*name).into(),
            color: *color,
            tolerance: 0.15,
            role: *role,
            text_affinity: if *name == "alpha" {
                BTreeMap::from([("rail".to_owned(), 0.7)])
            } else {
                BTreeMap::new()
            },
        })
        .collect();
    let matcher = SyntheticMatcher::new(ConceptTable { seed: 11, concepts }).unwrap();
    let classes: Vec<String> = ["alpha", "beta", "gamma"][..k]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut bgs = BTreeMap::new();
    bgs.insert(
        "alpha".to_owned(),
        vec!["rail".to_owned(), "lake".to_owned()],
    );
    bgs.insert("beta".to_owned(), vec!["lake".to_owned()]);
    let book = build_prompt_book(&classes, &bgs, DEFAULT_TEMPLATE).unwrap();
    (matcher, book)
}

/// Pixels drawn from the fixture palette with random brightness and noise.
pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let mut px = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (_, c, _) = COLORS[rng.gen_range(0..COLORS.len())];
            let b = rng.gen_range(0.3..1.0);
            for ch in 0..3 {
                let v: f64 = c[ch] * b + rng.gen_range(-0.05..0.05);
                px[[y, x, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(px).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, k: usize) -> LabelVector {
    loop {
        let flags: Vec<u8> = (0..k).map(|_| rng.gen_range(0..2)).collect();
        if flags.contains(&1) {
            return LabelVector::new(flags).unwrap();
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;

pub fn only(term: &str) -> (LossSelection, LossWeights) {
    let mut s = LossSelection::NONE;
    let mut w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.0,
    };
    match term {
        "otm" => (s.otm, w.alpha) = (true, 1.0),
        "btm" => (s.btm, w.beta) = (true, 1.0),
        "cbs" => (s.cbs, w.gamma) = (true, 1.0),
        "reg" => (s.reg, w.delta) = (true, 1.0),
        _ => return (LossSelection::ALL, LossWeights::default()),
    }
    (s, w)
}

fn loss_at(obj: &losses::Objective<'_>, img: &Image, y: &LabelVector, a: &Array3<f64>) -> f64 {
    let p = ActivationMaps(a.mapv(sigmoid));
    obj.image_loss(img, y, &p, false).unwrap().0.total
}

/// Largest violation of `|analytic - numeric| <= RTOL * max(|numeric|, floor)`
/// over every logit, where `floor` is 1e-3 of the largest numeric entry.
pub fn fd_relative_error(
    obj: &losses::Objective<'_>,
    img: &Image,
    y: &LabelVector,
    a: &Array3<f64>,
) -> f64 {
    let p = ActivationMaps(a.mapv(sigmoid));
    let (_, _, g) = obj.image_loss(img, y, &p, true).unwrap();
    let analytic = g.unwrap() * &p.0.mapv(|v| v * (1.0 - v));
    let mut numeric = Array3::zeros(a.dim());
    for idx in ndarray::indices(a.dim()) {
        let mut plus = a.clone();
        plus[idx] += STEP;
        let mut minus = a.clone();
        minus[idx] -= STEP;
        numeric[idx] = (loss_at(obj, img, y, &plus) - loss_at(obj, img, y, &minus)) / (2.0 * STEP);
    }
    let floor = 1e-3 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(x, n)| {
            let scale = n.abs().max(floor);
            if scale == 0.0 {
                (x - n).abs()
            } else {
                (x - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
