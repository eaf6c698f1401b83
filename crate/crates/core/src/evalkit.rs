//! CAM extraction, pseudo masks, IoU reports, threshold sweeps and loss
//! ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    activation_head, conventional_cam, upsample_maps, ActivationMaps, FeatureExtractor, TinyCnn,
};
use crate::datamodel::{Image, LabelVector, LossSelection, Objective, PromptBook, TrainConfig};
use crate::error::{shape, validation, ClimsError, Result};
use crate::matcher::Matcher;
use crate::pipeline::{train, TrainOptions};
use crate::synthgen::EvaluationSet;

/// How activation maps are read off the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMode {
    /// `sigmoid(W^T Z)`.
    Sigmoid,
    /// `ReLU(W^T Z)` divided by its per-class maximum.
    Conventional,
}

impl CamMode {
    pub fn for_objective(objective: &Objective) -> Self {
        match objective {
            Objective::Classification => CamMode::Conventional,
            Objective::Matching(_) => CamMode::Sigmoid,
        }
    }
}

fn raw_maps(model: &TinyCnn, mode: CamMode, image: &Image) -> Result<ActivationMaps> {
    let z = model.features(image)?;
    let p = match mode {
        CamMode::Sigmoid => activation_head(&z, &model.head)?,
        CamMode::Conventional => {
            let mut cam = conventional_cam(&z, &model.head)?;
            for mut m in cam.0.axis_iter_mut(Axis(0)) {
                m.mapv_inplace(|v| v.max(0.0));
                let max = m.fold(0.0f64, |a, b| a.max(*b));
                m.mapv_inplace(|v| v / (max + 1e-5));
            }
            cam
        }
    };
    upsample_maps(&p, image.height(), image.width())
}

/// Maps at image resolution, averaged with the flipped image's maps and
/// zeroed for absent labels.
pub fn extract_cams(
    model: &TinyCnn,
    mode: CamMode,
    image: &Image,
    labels: &LabelVector,
) -> Result<ActivationMaps> {
    if model
        .param_slices()
        .iter()
        .any(|s| s.iter().any(|v| !v.is_finite()))
    {
        return Err(validation("model parameters are not finite"));
    }
    if labels.num_classes() != model.num_classes() {
        return Err(shape(format!(
            "{} labels for a {}-class model",
            labels.num_classes(),
            model.num_classes()
        )));
    }
    let a = raw_maps(model, mode, image)?;
    let b = raw_maps(model, mode, &image.flip_horizontal())?.flip_horizontal();
    let mut out = (a.0 + b.0) * 0.5;
    for (k, mut m) in out.axis_iter_mut(Axis(0)).enumerate() {
        if !labels.is_set(k) {
            m.fill(0.0);
        }
    }
    Ok(ActivationMaps(out))
}

/// `0` for background, `k + 1` for class `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoMask(pub Array2<u8>);

/// Argmax over classes where the maximum reaches `bg_threshold`; ties go to
/// the lowest class index.
pub fn to_pseudo_mask(cams: &ActivationMaps, bg_threshold: f64) -> PseudoMask {
    let (k, h, w) = cams.0.dim();
    let mut mask = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let v = cams.0[[c, y, x]];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if k > 0 && best_v >= bg_threshold {
                mask[[y, x]] = (best + 1) as u8;
            }
        }
    }
    PseudoMask(mask)
}

/// Pixel counts per class `0..=K` (0 is background).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub gt: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes + 1],
            union: vec![0; num_classes + 1],
            gt: vec![0; num_classes + 1],
        }
    }

    pub fn add(&mut self, pred: &PseudoMask, gt: &Array2<u8>) -> Result<()> {
        if pred.0.dim() != gt.dim() {
            return Err(shape(format!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.0.dim(),
                gt.dim()
            )));
        }
        let n = self.union.len();
        for (&p, &g) in pred.0.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(validation(format!("label {} outside 0..{n}", p.max(g))));
            }
            self.gt[g] += 1;
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for (a, b) in [
            (&mut self.intersection, &other.intersection),
            (&mut self.union, &other.union),
            (&mut self.gt, &other.gt),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn report(&self) -> IoUReport {
        let iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IoUReport {
            iou,
            miou,
            counts: self.clone(),
        }
    }

    /// Share of each foreground class's ground-truth pixels predicted as it.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.gt)
            .skip(1)
            .map(|(&i, &g)| (g > 0).then(|| i as f64 / g as f64))
            .collect()
    }
}

/// Per-class IoU including background; `None` where the union is empty,
/// and such classes are left out of the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub counts: IouCounts,
}

pub fn iou_report(pred: &PseudoMask, gt: &Array2<u8>, num_classes: usize) -> Result<IoUReport> {
    let mut c = IouCounts::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.report())
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

fn dataset_counts(
    cams: &[ActivationMaps],
    gts: &[Array2<u8>],
    k: usize,
    thr: f64,
) -> Result<IouCounts> {
    let parts = cams
        .par_iter()
        .zip(gts.par_iter())
        .map(|(c, g)| {
            let mut counts = IouCounts::new(k);
            counts.add(&to_pseudo_mask(c, thr), g)?;
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = IouCounts::new(k);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Best threshold (earliest on ties) and the dataset mIoU at each grid point.
pub fn sweep_background_threshold(
    cams: &[ActivationMaps],
    gts: &[Array2<u8>],
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(validation("threshold grid is empty"));
    }
    if cams.len() != gts.len() || cams.is_empty() {
        return Err(shape("need one ground-truth mask per CAM set"));
    }
    let k = cams[0].num_classes();
    let mut curve = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (i, &t) in grid.iter().enumerate() {
        if !(t > 0.0 && t < 1.0) {
            return Err(validation(format!("threshold {t} outside (0, 1)")));
        }
        let m = dataset_counts(cams, gts, k, t)?.report().miou;
        if m > curve.get(best).copied().unwrap_or(f64::NEG_INFINITY) {
            best = i;
        }
        curve.push(m);
    }
    Ok((grid[best], curve))
}

/// Result of evaluating one model on an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub mode: CamMode,
    pub threshold: f64,
    pub grid: Vec<f64>,
    pub curve: Vec<f64>,
    pub iou: IoUReport,
    /// Foreground recall per class at `threshold`.
    pub recall: Vec<Option<f64>>,
    /// Foreground recall per class at [`RECALL_THRESHOLD`], comparable
    /// across models whose swept thresholds differ.
    pub recall_fixed: Vec<Option<f64>>,
    /// Mean over (image, present class) of the mean map value.
    pub mean_area: f64,
}

/// Fixed cut for [`EvalReport::recall_fixed`].
pub const RECALL_THRESHOLD: f64 = 0.5;

impl EvalReport {
    pub fn mean_recall(&self) -> f64 {
        mean_defined(&self.recall)
    }

    pub fn mean_recall_fixed(&self) -> f64 {
        mean_defined(&self.recall_fixed)
    }

    pub fn class_iou(&self, name: &str) -> Option<f64> {
        let k = self.class_names.iter().position(|c| c == name)?;
        self.iou.iou[k + 1]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "threshold {:.2}  mIoU {:.1}",
            self.threshold,
            100.0 * self.iou.miou
        );
        let _ = writeln!(s, "{:<16} {:>7} {:>7}", "class", "IoU", "recall");
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>7}",
            "background",
            pct(self.iou.iou[0]),
            "-"
        );
        for (k, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>7}",
                name,
                pct(self.iou.iou[k + 1]),
                pct(self.recall[k])
            );
        }
        s
    }
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{:.1}", 100.0 * x))
}

pub fn extract_all(
    model: &TinyCnn,
    mode: CamMode,
    set: &EvaluationSet,
) -> Result<Vec<ActivationMaps>> {
    set.images
        .par_iter()
        .zip(set.labels.par_iter())
        .map(|(img, y)| extract_cams(model, mode, img, y))
        .collect()
}

/// Flip-averaged CAMs, then a threshold sweep unless `threshold` is given.
pub fn evaluate(
    model: &TinyCnn,
    mode: CamMode,
    set: &EvaluationSet,
    threshold: Option<f64>,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(validation("evaluation set is empty"));
    }
    let cams = extract_all(model, mode, set)?;
    evaluate_cams(&cams, set, mode, threshold)
}

pub fn evaluate_cams(
    cams: &[ActivationMaps],
    set: &EvaluationSet,
    mode: CamMode,
    threshold: Option<f64>,
) -> Result<EvalReport> {
    let (threshold, grid, curve) = match threshold {
        Some(t) => {
            let (_, curve) = sweep_background_threshold(cams, &set.masks, &[t])?;
            (t, vec![t], curve)
        }
        None => {
            let grid = default_threshold_grid();
            let (t, curve) = sweep_background_threshold(cams, &set.masks, &grid)?;
            (t, grid, curve)
        }
    };
    let counts = dataset_counts(cams, &set.masks, set.class_names.len(), threshold)?;
    let fixed = dataset_counts(cams, &set.masks, set.class_names.len(), RECALL_THRESHOLD)?;
    let mut area_sum = 0.0;
    let mut area_n = 0usize;
    for (c, y) in cams.iter().zip(&set.labels) {
        for k in y.active() {
            area_sum += c.0.index_axis(Axis(0), k).mean().unwrap_or(0.0);
            area_n += 1;
        }
    }
    Ok(EvalReport {
        class_names: set.class_names.clone(),
        mode,
        threshold,
        grid,
        curve,
        recall: counts.recall(),
        recall_fixed: fixed.recall(),
        iou: counts.report(),
        mean_area: if area_n > 0 {
            area_sum / area_n as f64
        } else {
            0.0
        },
    })
}

/// Sidecar written next to exported CAM images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CamSidecar {
    pub class_names: Vec<String>,
    pub threshold: f64,
    pub config_hash: String,
    pub files: Vec<String>,
}

/// Writes each present class map as a 16-bit PNG (`round(65535 * P)`).
pub fn export_cams(
    cams: &ActivationMaps,
    labels: &LabelVector,
    class_names: &[String],
    stem: &str,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| ClimsError::io(dir, e))?;
    let mut out = Vec::new();
    for k in labels.active() {
        let m = cams.0.index_axis(Axis(0), k);
        let (h, w) = m.dim();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
            w as u32,
            h as u32,
            |x, y| {
                image::Luma([
                    (m[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16,
                ])
            },
        );
        let path = dir.join(format!("{stem}_{}.png", class_names[k]));
        img.save(&path).map_err(|e| ClimsError::Codec {
            path: path.clone(),
            message: e.to_string(),
        })?;
        out.push(path);
    }
    Ok(out)
}

/// Loss subsets compared in the ablation, plus the classification baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Otm,
    OtmBtm,
    OtmBtmReg,
    OtmBtmCbs,
    Full,
    Cls,
}

/// Reference VOC mIoU for each variant, as reported for the original method.
pub const REFERENCE_MIOU: [(Variant, f64); 6] = [
    (Variant::Otm, 37.2),
    (Variant::OtmBtm, 41.3),
    (Variant::OtmBtmReg, 53.1),
    (Variant::OtmBtmCbs, 45.4),
    (Variant::Full, 56.6),
    (Variant::Cls, 28.6),
];

/// Reference boat / train IoU without and with the background suppression term.
pub const REFERENCE_BOAT_TRAIN: [(Variant, f64, f64); 2] = [
    (Variant::OtmBtm, 7.1, 30.7),
    (Variant::OtmBtmCbs, 58.2, 63.9),
];

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Otm,
        Variant::OtmBtm,
        Variant::OtmBtmReg,
        Variant::OtmBtmCbs,
        Variant::Full,
        Variant::Cls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Otm => "OTM",
            Variant::OtmBtm => "OTM+BTM",
            Variant::OtmBtmReg => "OTM+BTM+REG",
            Variant::OtmBtmCbs => "OTM+BTM+CBS",
            Variant::Full => "OTM+BTM+REG+CBS",
            Variant::Cls => "CLS",
        }
    }

    pub fn objective(self) -> Objective {
        let sel = |otm, btm, cbs, reg| Objective::Matching(LossSelection { otm, btm, cbs, reg });
        match self {
            Variant::Otm => sel(true, false, false, false),
            Variant::OtmBtm => sel(true, true, false, false),
            Variant::OtmBtmReg => sel(true, true, false, true),
            Variant::OtmBtmCbs => sel(true, true, true, false),
            Variant::Full => sel(true, true, true, true),
            Variant::Cls => Objective::Classification,
        }
    }

    /// Accepts `+` or `,` separated term names in any order and case, or
    /// `cls` / `cls-baseline`.
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        if lower == "cls" || lower == "cls-baseline" {
            return Ok(Variant::Cls);
        }
        let terms: Vec<&str> = lower.split(['+', ',']).map(str::trim).collect();
        let objective = Objective::parse(&terms).map_err(|_| unknown_variant(name))?;
        Variant::ALL
            .into_iter()
            .find(|v| v.objective() == objective)
            .ok_or_else(|| unknown_variant(name))
    }

    pub fn reference_miou(self) -> f64 {
        REFERENCE_MIOU
            .iter()
            .find(|(v, _)| *v == self)
            .expect("all listed")
            .1
    }
}

fn unknown_variant(name: &str) -> ClimsError {
    let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    validation(format!(
        "unknown variant {name:?}; expected one of {}",
        known.join(", ")
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub reference_miou: f64,
    pub miou: f64,
    pub threshold: f64,
    pub class_iou: Vec<Option<f64>>,
    /// Mean foreground recall at the swept threshold.
    pub mean_recall: f64,
    /// Mean foreground recall at [`RECALL_THRESHOLD`].
    pub mean_recall_fixed: f64,
    pub mean_area: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.name())
    }

    pub fn class_iou(&self, v: Variant, class: &str) -> Option<f64> {
        let k = self.class_names.iter().position(|c| c == class)?;
        self.row(v)?.class_iou[k + 1]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<17} {:>7} {:>7} {:>9} {:>7} {:>7} {:>9}",
            "variant", "mIoU", "recall", "recall@.5", "area", "thr", "VOC ref"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<17} {:>7.1} {:>7.1} {:>9.1} {:>7.3} {:>7.2} {:>9.1}",
                r.variant,
                100.0 * r.miou,
                100.0 * r.mean_recall,
                100.0 * r.mean_recall_fixed,
                r.mean_area,
                r.threshold,
                r.reference_miou
            );
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<17}", "per-class IoU");
        for c in std::iter::once("background").chain(self.class_names.iter().map(String::as_str)) {
            let _ = write!(s, " {:>11}", c);
        }
        let _ = writeln!(s);
        for r in &self.rows {
            let _ = write!(s, "{:<17}", r.variant);
            for v in &r.class_iou {
                let _ = write!(s, " {:>11}", pct(*v));
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Trains and evaluates each variant with the same seed and data.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    config: &TrainConfig,
    train_images: &[Image],
    train_labels: &[LabelVector],
    eval_set: &EvaluationSet,
    book: &PromptBook,
    matcher: &dyn Matcher,
    variants: &[Variant],
    out_dir: &Path,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(validation("no variants requested"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut cfg = config.clone();
        cfg.objective = v.objective();
        let dir = out_dir.join(v.name().replace('+', "_").to_ascii_lowercase());
        let summary = train(
            &cfg,
            train_images,
            train_labels,
            &eval_set.class_names,
            book,
            matcher,
            &dir,
            TrainOptions::default(),
        )?;
        let report = evaluate(
            &summary.state.model,
            CamMode::for_objective(&cfg.objective),
            eval_set,
            None,
        )?;
        rows.push(AblationRow {
            variant: v.name().to_owned(),
            reference_miou: v.reference_miou(),
            miou: report.iou.miou,
            threshold: report.threshold,
            class_iou: report.iou.iou.clone(),
            mean_recall: report.mean_recall(),
            mean_recall_fixed: report.mean_recall_fixed(),
            mean_area: report.mean_area,
            checkpoint: summary.checkpoint,
        });
    }
    Ok(AblationTable {
        class_names: eval_set.class_names.clone(),
        seed: config.seed,
        rows,
    })
}

/// Sanity check used by callers that accept maps from elsewhere.
pub fn check_cam_range(cams: &ActivationMaps) -> Result<()> {
    if cams.0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(validation("CAM values outside [0, 1]"));
    }
    Ok(())
}

/// Stacks per-class maps `K x H x W` from individual arrays.
pub fn stack_maps(maps: &[Array2<f64>]) -> Result<ActivationMaps> {
    let first = maps.first().ok_or_else(|| validation("no maps"))?;
    let (h, w) = first.dim();
    let mut out = Array3::zeros((maps.len(), h, w));
    for (k, m) in maps.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(shape("maps differ in size"));
        }
        out.index_axis_mut(Axis(0), k).assign(m);
    }
    Ok(ActivationMaps(out))
}
