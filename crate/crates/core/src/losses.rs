//! Region masking and the four matching/regularization objectives.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::ActivationMaps;
use crate::datamodel::{Image, LabelVector, LossSelection, LossWeights, PromptBook};
use crate::error::{shape, validation, Result};
use crate::matcher::{cosine_similarity, cosine_similarity_grad, Embedding, Matcher};

/// Multiplies every channel of `image` by `map` (same spatial size).
pub fn mask_out(image: &Image, map: ArrayView2<'_, f64>) -> Result<Image> {
    if map.dim() != (image.height(), image.width()) {
        return Err(shape(format!(
            "map is {:?}, image is {}x{}",
            map.dim(),
            image.height(),
            image.width()
        )));
    }
    let mut out = image.as_array().clone();
    for mut plane in out.axis_iter_mut(Axis(2)) {
        plane *= &map;
    }
    Ok(Image::from_array_unchecked(out))
}

/// Restricts a similarity to `[eps, 1 - eps]` before it enters a logarithm.
pub fn clamp_similarity(s: f64, eps: f64) -> f64 {
    s.max(eps).min(1.0 - eps)
}

/// Derivative of [`clamp_similarity`] (0 where clamped).
fn clamp_grad(s: f64, eps: f64) -> f64 {
    if s > eps && s < 1.0 - eps {
        1.0
    } else {
        0.0
    }
}

fn check_len(values: usize, labels: &LabelVector) -> Result<()> {
    if values != labels.num_classes() {
        return Err(shape(format!(
            "{values} similarities for {} labels",
            labels.num_classes()
        )));
    }
    Ok(())
}

/// `-sum_k y_k log s_oo_k` on clamped similarities.
pub fn otm_loss(s_oo: &[f64], y: &LabelVector) -> Result<f64> {
    check_len(s_oo.len(), y)?;
    Ok(y.active().map(|k| -s_oo[k].ln()).sum())
}

/// `-sum_k y_k log(1 - s_bo_k)` on clamped similarities.
pub fn btm_loss(s_bo: &[f64], y: &LabelVector) -> Result<f64> {
    check_len(s_bo.len(), y)?;
    Ok(y.active().map(|k| -(1.0 - s_bo[k]).ln()).sum())
}

/// `-sum_k sum_l y_k log(1 - s_ob_kl)`; row `k` holds the `L_k` valid entries.
pub fn cbs_loss(s_ob: &[Vec<f64>], y: &LabelVector) -> Result<f64> {
    check_len(s_ob.len(), y)?;
    Ok(y.active()
        .flat_map(|k| s_ob[k].iter())
        .map(|s| -(1.0 - s).ln())
        .sum())
}

/// Mean activation per class and their average over all classes.
pub fn area_regularization(p: &ActivationMaps) -> (f64, Vec<f64>) {
    let areas: Vec<f64> = p.0.outer_iter().map(|m| m.mean().unwrap_or(0.0)).collect();
    let reg = if areas.is_empty() {
        0.0
    } else {
        areas.iter().sum::<f64>() / areas.len() as f64
    };
    (reg, areas)
}

/// Cosine similarities of one image against its prompts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityBundle {
    pub s_oo: Vec<f64>,
    pub s_bo: Vec<f64>,
    /// Row `k` has one entry per background prompt of class `k`.
    pub s_ob: Vec<Vec<f64>>,
}

/// Objective components, the weighted total and per-class areas.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub otm: f64,
    pub btm: f64,
    pub cbs: f64,
    pub reg: f64,
    pub total: f64,
    pub areas: Vec<f64>,
}

impl LossBreakdown {
    pub fn mean_area(&self) -> f64 {
        if self.areas.is_empty() {
            0.0
        } else {
            self.areas.iter().sum::<f64>() / self.areas.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.otm, self.btm, self.cbs, self.reg, self.total]
            .iter()
            .chain(&self.areas)
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of `parts`, summed in order.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let k = parts.first().map_or(0, |p| p.areas.len());
        let mut out = LossBreakdown {
            areas: vec![0.0; k],
            ..Default::default()
        };
        for p in parts {
            out.otm += p.otm;
            out.btm += p.btm;
            out.cbs += p.cbs;
            out.reg += p.reg;
            out.total += p.total;
            for (a, b) in out.areas.iter_mut().zip(&p.areas) {
                *a += b;
            }
        }
        out.otm /= n;
        out.btm /= n;
        out.cbs /= n;
        out.reg /= n;
        out.total /= n;
        out.areas.iter_mut().for_each(|a| *a /= n);
        out
    }
}

/// `alpha*otm + beta*btm + gamma*cbs + delta*reg`.
pub fn total_loss(otm: f64, btm: f64, cbs: f64, reg: f64, w: &LossWeights) -> f64 {
    w.alpha * otm + w.beta * btm + w.gamma * cbs + w.delta * reg
}

/// Text embeddings of a prompt book, computed once per run.
#[derive(Clone, Debug)]
pub struct TextBank {
    pub objects: Vec<Embedding>,
    pub backgrounds: Vec<Vec<Embedding>>,
}

impl TextBank {
    pub fn new(book: &PromptBook, matcher: &dyn Matcher) -> Result<Self> {
        let objects = book
            .object_prompts()
            .iter()
            .map(|p| matcher.encode_text(p))
            .collect::<Result<Vec<_>>>()?;
        let backgrounds = (0..book.num_classes())
            .map(|k| {
                book.background_prompts(k)
                    .iter()
                    .map(|p| matcher.encode_text(p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            objects,
            backgrounds,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.objects.len()
    }
}

/// Everything fixed across a training run that the objective needs.
pub struct Objective<'a> {
    pub matcher: &'a dyn Matcher,
    pub bank: &'a TextBank,
    pub weights: LossWeights,
    pub selection: LossSelection,
    pub clamp_epsilon: f64,
}

impl Objective<'_> {
    fn check(&self, labels: &LabelVector, p: &ActivationMaps, image: &Image) -> Result<()> {
        if labels.num_classes() > self.bank.num_classes() {
            return Err(validation(format!(
                "labels cover {} classes but the prompt book has {}",
                labels.num_classes(),
                self.bank.num_classes()
            )));
        }
        if p.num_classes() != labels.num_classes() {
            return Err(shape(format!(
                "{} activation maps for {} labels",
                p.num_classes(),
                labels.num_classes()
            )));
        }
        if (p.height(), p.width()) != (image.height(), image.width()) {
            return Err(shape(format!(
                "maps are {}x{} but image is {}x{}; upsample first",
                p.height(),
                p.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Loss for one image and, when `with_grad`, `dL/dP` at image resolution.
    pub fn image_loss(
        &self,
        image: &Image,
        labels: &LabelVector,
        p: &ActivationMaps,
        with_grad: bool,
    ) -> Result<(LossBreakdown, SimilarityBundle, Option<Array3<f64>>)> {
        self.check(labels, p, image)?;
        let k_total = labels.num_classes();
        let eps = self.clamp_epsilon;
        let sel = self.selection;
        let w = self.weights;
        let mut bundle = SimilarityBundle {
            s_oo: vec![0.0; k_total],
            s_bo: vec![0.0; k_total],
            s_ob: vec![Vec::new(); k_total],
        };
        let mut grad = with_grad.then(|| Array3::<f64>::zeros(p.0.dim()));
        let (mut otm, mut btm, mut cbs) = (0.0, 0.0, 0.0);

        let need_fg = sel.otm || sel.cbs;
        for k in labels.active() {
            let pk = p.0.index_axis(Axis(0), k);
            let text = &self.bank.objects[k].0;
            if need_fg {
                let fg = mask_out(image, pk)?;
                let v_io = self.matcher.encode_image(&fg)?;
                let mut up = vec![0.0; v_io.dim()];
                if sel.otm {
                    let raw = cosine_similarity(&v_io.0, text)?;
                    let s = clamp_similarity(raw, eps);
                    bundle.s_oo[k] = s;
                    otm += -s.ln();
                    // d(-alpha ln s)/ds
                    let coef = -w.alpha / s * clamp_grad(raw, eps);
                    if coef != 0.0 {
                        for (u, g) in up.iter_mut().zip(cosine_similarity_grad(&v_io.0, text)?) {
                            *u += coef * g;
                        }
                    }
                }
                if sel.cbs {
                    for bg_text in &self.bank.backgrounds[k] {
                        let raw = cosine_similarity(&v_io.0, &bg_text.0)?;
                        let s = clamp_similarity(raw, eps);
                        bundle.s_ob[k].push(s);
                        cbs += -(1.0 - s).ln();
                        let coef = w.gamma / (1.0 - s) * clamp_grad(raw, eps);
                        if coef != 0.0 {
                            for (u, g) in up
                                .iter_mut()
                                .zip(cosine_similarity_grad(&v_io.0, &bg_text.0)?)
                            {
                                *u += coef * g;
                            }
                        }
                    }
                }
                if let Some(grad) = grad.as_mut() {
                    if up.iter().any(|u| *u != 0.0) {
                        let gpx = self.matcher.encode_image_vjp(&fg, &up)?;
                        accumulate_mask_grad(grad, k, image, &gpx, 1.0);
                    }
                }
            }
            if sel.btm {
                let inv = pk.mapv(|v| 1.0 - v);
                let bg = mask_out(image, inv.view())?;
                let v_ib = self.matcher.encode_image(&bg)?;
                let raw = cosine_similarity(&v_ib.0, text)?;
                let s = clamp_similarity(raw, eps);
                bundle.s_bo[k] = s;
                btm += -(1.0 - s).ln();
                let coef = w.beta / (1.0 - s) * clamp_grad(raw, eps);
                if let Some(grad) = grad.as_mut() {
                    if coef != 0.0 {
                        let up: Vec<f64> = cosine_similarity_grad(&v_ib.0, text)?
                            .into_iter()
                            .map(|g| coef * g)
                            .collect();
                        let gpx = self.matcher.encode_image_vjp(&bg, &up)?;
                        accumulate_mask_grad(grad, k, image, &gpx, -1.0);
                    }
                }
            }
        }

        let (reg_value, areas) = area_regularization(p);
        let reg = if sel.reg { reg_value } else { 0.0 };
        if let Some(grad) = grad.as_mut() {
            if sel.reg && w.delta != 0.0 {
                let (k, h, wd) = p.0.dim();
                let per_pixel = w.delta / (k * h * wd) as f64;
                grad.mapv_inplace(|g| g + per_pixel);
            }
        }
        let breakdown = LossBreakdown {
            otm,
            btm,
            cbs,
            reg,
            total: total_loss(otm, btm, cbs, reg, &w),
            areas,
        };
        Ok((breakdown, bundle, grad))
    }
}

/// `grad[k] += sign * sum_c image * gpx`: chain rule through `X * map`.
fn accumulate_mask_grad(
    grad: &mut Array3<f64>,
    k: usize,
    image: &Image,
    gpx: &Array3<f64>,
    sign: f64,
) {
    let mut gk = grad.index_axis_mut(Axis(0), k);
    let x = image.pixels();
    Zip::from(&mut gk)
        .and(x.lanes(Axis(2)))
        .and(gpx.lanes(Axis(2)))
        .for_each(|g, xl, gl| {
            *g += sign * (xl[0] * gl[0] + xl[1] * gl[1] + xl[2] * gl[2]);
        });
}

/// Batch-mean breakdown for images whose maps are already at image resolution.
pub fn clims_batch_loss(
    images: &[Image],
    labels: &[LabelVector],
    maps: &[ActivationMaps],
    objective: &Objective<'_>,
) -> Result<LossBreakdown> {
    if images.len() != labels.len() || images.len() != maps.len() {
        return Err(shape("images, labels and maps differ in count"));
    }
    let parts = images
        .iter()
        .zip(labels)
        .zip(maps)
        .map(|((img, y), p)| objective.image_loss(img, y, p, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts))
}

/// Convenience wrapper building the text bank from a prompt book.
pub fn clims_batch_loss_with_book(
    images: &[Image],
    labels: &[LabelVector],
    maps: &[ActivationMaps],
    book: &PromptBook,
    matcher: &dyn Matcher,
    weights: LossWeights,
    clamp_epsilon: f64,
) -> Result<LossBreakdown> {
    if let Some(y) = labels.iter().find(|y| y.num_classes() > book.num_classes()) {
        return Err(validation(format!(
            "labels cover {} classes but the prompt book has {}",
            y.num_classes(),
            book.num_classes()
        )));
    }
    let bank = TextBank::new(book, matcher)?;
    let objective = Objective {
        matcher,
        bank: &bank,
        weights,
        selection: LossSelection::ALL,
        clamp_epsilon,
    };
    clims_batch_loss(images, labels, maps, &objective)
}

/// Brute-force double loop mean of one map; reference for tests.
pub fn map_mean_reference(map: &Array2<f64>) -> f64 {
    let (h, w) = map.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            total += map[[i, j]];
        }
    }
    total / (h * w) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn y(v: &[u8]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn mask_identity_zero_and_partition() {
        let px = Array3::from_shape_fn((8, 8, 3), |(h, w, c)| ((h + 2 * w + c) % 7) as f64 / 7.0);
        let img = Image::new(px).unwrap();
        let ones = Array2::ones((8, 8));
        assert_eq!(mask_out(&img, ones.view()).unwrap(), img);
        let zeros = Array2::zeros((8, 8));
        assert!(mask_out(&img, zeros.view())
            .unwrap()
            .pixels()
            .iter()
            .all(|v| *v == 0.0));
        let map = Array2::from_shape_fn((8, 8), |(h, w)| ((h * w) % 5) as f64 / 4.0);
        let inv = map.mapv(|v| 1.0 - v);
        let a = mask_out(&img, map.view()).unwrap();
        let b = mask_out(&img, inv.view()).unwrap();
        let sum = a.as_array() + b.as_array();
        for (s, o) in sum.iter().zip(img.pixels().iter()) {
            assert_abs_diff_eq!(s, o, epsilon = 1e-15);
        }
        assert!(mask_out(&img, Array2::ones((4, 8)).view()).is_err());
    }

    #[test]
    fn clamp_values() {
        assert_eq!(clamp_similarity(-0.2, 1e-4), 1e-4);
        assert_abs_diff_eq!(clamp_similarity(1.0, 1e-4), 0.9999, epsilon = 1e-15);
        assert_eq!(clamp_similarity(0.5, 1e-4), 0.5);
    }

    #[test]
    fn otm_values() {
        let s = clamp_similarity(1.0, 1e-4);
        assert_abs_diff_eq!(
            otm_loss(&[s], &y(&[1])).unwrap(),
            1.0000500033334732e-4,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            otm_loss(&[0.5], &y(&[1])).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            otm_loss(&[0.8, 0.1], &y(&[1, 0])).unwrap(),
            0.2231435513142097,
            epsilon = 1e-12
        );
        assert!(otm_loss(&[0.5], &y(&[1, 0])).is_err());
    }

    #[test]
    fn btm_values() {
        let s = clamp_similarity(0.0, 1e-4);
        assert_abs_diff_eq!(
            btm_loss(&[s], &y(&[1])).unwrap(),
            1.0000500033334732e-4,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            btm_loss(&[0.5], &y(&[1])).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_eq!(btm_loss(&[0.7], &y(&[0])).unwrap(), 0.0);
    }

    #[test]
    fn cbs_values() {
        assert_abs_diff_eq!(
            cbs_loss(&[vec![0.5, 0.5]], &y(&[1])).unwrap(),
            1.3862943611198906,
            epsilon = 1e-12
        );
        assert_eq!(cbs_loss(&[vec![]], &y(&[1])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cbs_loss(&[vec![0.5], vec![1e-4]], &y(&[1, 1])).unwrap(),
            std::f64::consts::LN_2 + 1.0000500033334732e-4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn area_values() {
        let (r, _) = area_regularization(&ActivationMaps(Array3::ones((3, 4, 4))));
        assert_eq!(r, 1.0);
        let (r, s) = area_regularization(&ActivationMaps(Array3::from_elem((2, 4, 4), 0.5)));
        assert_eq!(r, 0.5);
        assert_eq!(s, vec![0.5, 0.5]);
        let mut p = Array3::zeros((2, 4, 4));
        p.index_axis_mut(Axis(0), 0).fill(1.0);
        assert_eq!(area_regularization(&ActivationMaps(p)).0, 0.5);
    }

    #[test]
    fn total_values() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(total_loss(0.1, 0.2, 0.05, 0.5, &w), 8.05, epsilon = 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let proj = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        };
        assert_eq!(total_loss(0.37, 0.2, 0.05, 0.5, &proj), 0.37);
    }

    #[test]
    fn breakdown_mean_of_duplicates() {
        let b = LossBreakdown {
            otm: 1.0,
            btm: 2.0,
            cbs: 3.0,
            reg: 0.25,
            total: 9.0,
            areas: vec![0.2, 0.3],
        };
        assert_eq!(LossBreakdown::mean(&[b.clone(), b.clone()]), b);
    }
}
