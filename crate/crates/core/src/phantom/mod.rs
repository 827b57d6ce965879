//! Synthetic chest phantoms with exact ground truth.
//!
//! A phantom is a schematic frontal film: elliptical lungs and heart, a
//! rectangular trachea, dome-shaped hemidiaphragms, and rectangular-band
//! opacity regions whose area encodes severity. Every measurement the engine
//! makes has an analytic answer derived from [`PhantomParams`].

mod fixture;

use std::sync::Arc;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, DiaphragmFlag, GeometryThresholds, TrachealVerdict};
use crate::model::{
    Confidence, Finding, FindingLabel, ImageRef, Laterality, Mask, PatientContext, Polarity, Progression, Projection,
    Severity, Study,
};

pub use fixture::{
    load_case, load_case_dir, load_fixture, load_fixture_dir, write_case, CaseMeta, FixtureError, LoadedCase,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomFinding {
    pub label: FindingLabel,
    pub laterality: Laterality,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_id: Option<String>,
    pub image_size: (u32, u32),
    #[serde(default)]
    pub projection: Projection,
    /// Cardiac width over thoracic width.
    pub heart_width_frac: f64,
    /// Signed, as a fraction of thoracic width; positive toward the patient's left.
    pub trachea_offset_frac: f64,
    pub right_diaphragm_row_frac: f64,
    pub left_diaphragm_row_frac: f64,
    #[serde(default)]
    pub findings: Vec<PhantomFinding>,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            study_id: None,
            image_size: (512, 512),
            projection: Projection::PA,
            heart_width_frac: 0.42,
            trachea_offset_frac: 0.0,
            right_diaphragm_row_frac: 0.70,
            left_diaphragm_row_frac: 0.72,
            findings: Vec::new(),
            seed: 0,
        }
    }
}

/// Inclusive limits on diaphragm row fractions that keep the lungs renderable.
pub const DIAPHRAGM_ROW_RANGE: (f64, f64) = (0.35, 0.85);
pub const MIN_IMAGE_SIDE: u32 = 64;

impl PhantomParams {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |msg: String| Err(PhantomError::InvalidParams(msg));
        let (w, h) = self.image_size;
        if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
            return bad(format!("image_size {w}x{h} below {MIN_IMAGE_SIDE} px"));
        }
        if !(self.heart_width_frac > 0.0 && self.heart_width_frac < 1.0) {
            return bad(format!("heart_width_frac {} not in (0,1)", self.heart_width_frac));
        }
        if !(-0.2..=0.2).contains(&self.trachea_offset_frac) {
            return bad(format!("trachea_offset_frac {} not in [-0.2,0.2]", self.trachea_offset_frac));
        }
        for (name, v) in [
            ("right_diaphragm_row_frac", self.right_diaphragm_row_frac),
            ("left_diaphragm_row_frac", self.left_diaphragm_row_frac),
        ] {
            if !(DIAPHRAGM_ROW_RANGE.0..=DIAPHRAGM_ROW_RANGE.1).contains(&v) {
                return bad(format!(
                    "{name} {v} not in [{}, {}]",
                    DIAPHRAGM_ROW_RANGE.0, DIAPHRAGM_ROW_RANGE.1
                ));
            }
        }
        let mut seen = Vec::new();
        for f in &self.findings {
            if f.label.is_geometric() || f.label == FindingLabel::NoFinding {
                return bad(format!("{} is derived from geometry, not listed", f.label));
            }
            if seen.contains(&f.label) {
                return bad(format!("{} listed twice", f.label));
            }
            if !f.label.is_global() && !f.laterality.is_sided() {
                return bad(format!("{} needs a laterality", f.label));
            }
            seen.push(f.label);
        }
        Ok(())
    }

    pub fn study_id(&self) -> String {
        self.study_id.clone().unwrap_or_else(|| format!("phantom-{:016x}", self.seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganMasks {
    pub heart: Mask,
    pub left_lung: Mask,
    pub right_lung: Mask,
    pub trachea: Mask,
    pub left_hemidiaphragm: Mask,
    pub right_hemidiaphragm: Mask,
}

/// Organs a segmenter can be asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Organ {
    Heart,
    LeftLung,
    RightLung,
    Trachea,
    LeftHemidiaphragm,
    RightHemidiaphragm,
}

impl Organ {
    pub const ALL: [Organ; 6] = [
        Organ::Heart,
        Organ::LeftLung,
        Organ::RightLung,
        Organ::Trachea,
        Organ::LeftHemidiaphragm,
        Organ::RightHemidiaphragm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Organ::Heart => "heart",
            Organ::LeftLung => "left_lung",
            Organ::RightLung => "right_lung",
            Organ::Trachea => "trachea",
            Organ::LeftHemidiaphragm => "left_hemidiaphragm",
            Organ::RightHemidiaphragm => "right_hemidiaphragm",
        }
    }

    pub fn parse(s: &str) -> Option<Organ> {
        Organ::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

impl OrganMasks {
    pub fn get(&self, organ: Organ) -> &Mask {
        match organ {
            Organ::Heart => &self.heart,
            Organ::LeftLung => &self.left_lung,
            Organ::RightLung => &self.right_lung,
            Organ::Trachea => &self.trachea,
            Organ::LeftHemidiaphragm => &self.left_hemidiaphragm,
            Organ::RightHemidiaphragm => &self.right_hemidiaphragm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub label: FindingLabel,
    pub laterality: Laterality,
    pub severity: Severity,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMeasurements {
    pub ctr: f64,
    pub tracheal_offset_frac: f64,
    pub diaphragm_delta_rows: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub masks: OrganMasks,
    pub lesions: Vec<Lesion>,
    /// Present findings only; every other label is absent.
    pub labels: Vec<Finding>,
    pub measurements: TruthMeasurements,
}

impl GroundTruth {
    pub fn finding(&self, label: FindingLabel) -> Option<&Finding> {
        self.labels.iter().find(|f| f.label == label)
    }

    pub fn polarity(&self, label: FindingLabel) -> Polarity {
        if label == FindingLabel::NoFinding {
            let any = self
                .labels
                .iter()
                .any(|f| f.label.is_chexpert() && f.label != FindingLabel::SupportDevices);
            return Polarity::from_present(!any);
        }
        Polarity::from_present(self.finding(label).is_some())
    }

    pub fn lesion(&self, label: FindingLabel) -> Option<&Lesion> {
        self.lesions.iter().find(|l| l.label == label)
    }

    pub fn severity(&self, label: FindingLabel) -> Option<Severity> {
        self.lesion(label).map(|l| l.severity)
    }
}

/// A study as the engine sees it: metadata, decoded pixels, and ground truth
/// when the study is a phantom or an annotated fixture.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub study: Study,
    pub current_pixels: Arc<GrayImage>,
    pub prior_pixels: Option<Arc<GrayImage>>,
    pub truth: Option<Arc<GroundTruth>>,
    pub prior_truth: Option<Arc<GroundTruth>>,
}

impl CaseStudy {
    pub fn id(&self) -> &str {
        &self.study.study_id
    }

    pub fn has_prior(&self) -> bool {
        self.study.prior_image.is_some()
    }

    /// The same case with prior image and prior truth removed.
    pub fn without_prior(&self) -> CaseStudy {
        let mut out = self.clone();
        out.study.prior_image = None;
        out.prior_pixels = None;
        out.prior_truth = None;
        out
    }

    pub fn without_patient_context(&self) -> CaseStudy {
        let mut out = self.clone();
        out.study.context = PatientContext::default();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudy {
    pub params: PhantomParams,
    pub study: Study,
    pub image: GrayImage,
    pub truth: GroundTruth,
}

impl SyntheticStudy {
    pub fn to_case(&self) -> CaseStudy {
        CaseStudy {
            study: self.study.clone(),
            current_pixels: Arc::new(self.image.clone()),
            prior_pixels: None,
            truth: Some(Arc::new(self.truth.clone())),
            prior_truth: None,
        }
    }
}

/// Links a prior phantom to the current one as a comparison case.
pub fn pair_case(prior: &SyntheticStudy, current: &SyntheticStudy) -> CaseStudy {
    let mut case = current.to_case();
    case.study.prior_image = Some(prior.study.current_image.clone());
    case.prior_pixels = Some(Arc::new(prior.image.clone()));
    case.prior_truth = Some(Arc::new(prior.truth.clone()));
    case
}

/// Inclusive rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Rect {
    r0: u32,
    r1: u32,
    c0: u32,
    c1: u32,
}

/// Ellipse inscribed in an inclusive rectangle.
fn ellipse(w: u32, h: u32, rect: Rect) -> Mask {
    let cy = (rect.r0 as f64 + rect.r1 as f64) / 2.0;
    let cx = (rect.c0 as f64 + rect.c1 as f64) / 2.0;
    let b = (rect.r1 - rect.r0 + 1) as f64 / 2.0;
    let a = (rect.c1 - rect.c0 + 1) as f64 / 2.0;
    Mask::from_fn(w, h, |r, c| {
        if r < rect.r0 || r > rect.r1 || c < rect.c0 || c > rect.c1 {
            return false;
        }
        let dy = (r as f64 - cy) / b;
        let dx = (c as f64 - cx) / a;
        dx * dx + dy * dy <= 1.0
    })
}

fn rectangle(w: u32, h: u32, rect: Rect) -> Mask {
    Mask::from_fn(w, h, |r, c| r >= rect.r0 && r <= rect.r1 && c >= rect.c0 && c <= rect.c1)
}

/// Upper half of an ellipse whose top row is `apex`.
fn dome(w: u32, h: u32, apex: u32, dome_h: u32, c0: u32, c1: u32) -> Mask {
    let full = ellipse(
        w,
        h,
        Rect {
            r0: apex,
            r1: apex + 2 * dome_h,
            c0,
            c1,
        },
    );
    let keep_to = apex + dome_h;
    Mask::from_fn(w, h, |r, c| r <= keep_to && full.get(r, c))
}

struct Layout {
    thoracic_left: u32,
    thoracic_right: u32,
    right_lung: Rect,
    left_lung: Rect,
    heart: Rect,
    trachea: Rect,
    right_apex: u32,
    left_apex: u32,
    dome_h: u32,
}

fn layout(p: &PhantomParams) -> Layout {
    let (w, h) = p.image_size;
    let round = |v: f64| v.round() as u32;
    let thoracic = round(0.8 * w as f64);
    let x0 = (w - thoracic) / 2;
    let x1 = x0 + thoracic - 1;
    let gap = (round(0.06 * thoracic as f64)).max(2);
    let lung_w = (thoracic - gap) / 2;
    let dome_h = round(0.05 * h as f64).max(3);
    let lung_top = round(0.12 * h as f64);
    let right_apex = round(p.right_diaphragm_row_frac * h as f64);
    let left_apex = round(p.left_diaphragm_row_frac * h as f64);
    let right_lung = Rect {
        r0: lung_top,
        r1: right_apex + dome_h,
        c0: x0,
        c1: x0 + lung_w - 1,
    };
    let left_lung = Rect {
        r0: lung_top,
        r1: left_apex + dome_h,
        c0: x1 + 1 - lung_w,
        c1: x1,
    };
    let cardiac = round(p.heart_width_frac * thoracic as f64).clamp(1, thoracic);
    let heart_c0 = x0 + (thoracic - cardiac) / 2;
    let heart_top = round(0.40 * h as f64);
    let heart = Rect {
        r0: heart_top,
        r1: (heart_top + round(0.30 * h as f64)).min(h - 1),
        c0: heart_c0,
        c1: heart_c0 + cardiac - 1,
    };
    let midline = (x0 as f64 + x1 as f64) / 2.0;
    let mut tw = round(0.04 * thoracic as f64).max(3);
    if tw % 2 == 0 {
        tw += 1;
    }
    let center = midline + p.trachea_offset_frac * thoracic as f64;
    let t0 = (center - (tw - 1) as f64 / 2.0).round().max(0.0) as u32;
    let trachea = Rect {
        r0: round(0.02 * h as f64),
        r1: round(0.38 * h as f64),
        c0: t0,
        c1: (t0 + tw - 1).min(w - 1),
    };
    Layout {
        thoracic_left: x0,
        thoracic_right: x1,
        right_lung,
        left_lung,
        heart,
        trachea,
        right_apex,
        left_apex,
        dome_h,
    }
}

/// Grows a horizontal band inside `lung` until it covers `fraction` of it.
fn lesion_band(lung: &Mask, fraction: f64, label: FindingLabel) -> Mask {
    let (w, h) = (lung.width(), lung.height());
    let (top, bottom) = match geometry::row_extent(lung) {
        Some(e) => e,
        None => return Mask::empty(w, h),
    };
    let mut row_counts = vec![0u64; h as usize];
    for (r, _) in lung.iter_set() {
        row_counts[r as usize] += 1;
    }
    let target = (fraction * lung.area() as f64).round() as u64;
    let order: Vec<u32> = match label {
        FindingLabel::PleuralEffusion => (top..=bottom).rev().collect(),
        FindingLabel::Pneumothorax => (top..=bottom).collect(),
        _ => {
            let mid = (top + bottom) / 2;
            let mut rows = vec![mid];
            let mut k = 1;
            while rows.len() < (bottom - top + 1) as usize {
                if mid + k <= bottom {
                    rows.push(mid + k);
                }
                if mid >= top + k {
                    rows.push(mid - k);
                }
                k += 1;
            }
            rows
        }
    };
    let mut selected = vec![false; h as usize];
    let mut covered = 0;
    for r in order {
        if covered >= target {
            break;
        }
        selected[r as usize] = true;
        covered += row_counts[r as usize];
    }
    Mask::from_fn(w, h, |r, c| selected[r as usize] && lung.get(r, c))
}

fn attribute_words(label: FindingLabel, laterality: Laterality, severity: Severity) -> Vec<String> {
    let mut out = vec![severity.as_str().to_string()];
    let pattern = match label {
        FindingLabel::Consolidation | FindingLabel::Pneumonia | FindingLabel::LungOpacity => Some("alveolar"),
        FindingLabel::Edema | FindingLabel::Atelectasis => Some("interstitial"),
        FindingLabel::LungLesion => Some("nodular"),
        _ => None,
    };
    if let Some(p) = pattern {
        out.push(p.to_string());
    }
    let zone = match label {
        FindingLabel::PleuralEffusion | FindingLabel::Atelectasis => Some("lower"),
        FindingLabel::Pneumothorax => Some("upper"),
        _ => None,
    };
    if let Some(z) = zone {
        out.push(z.to_string());
    }
    if let Some(side) = laterality.describe() {
        out.push(side.to_string());
    }
    out
}

pub fn generate_study(params: &PhantomParams) -> Result<SyntheticStudy, PhantomError> {
    params.validate()?;
    let (w, h) = params.image_size;
    let lay = layout(params);
    let right_lung = ellipse(w, h, lay.right_lung);
    let left_lung = ellipse(w, h, lay.left_lung);
    let heart = ellipse(w, h, lay.heart);
    let trachea = rectangle(w, h, lay.trachea);
    let right_hemi = dome(w, h, lay.right_apex, lay.dome_h, lay.right_lung.c0, lay.right_lung.c1);
    let left_hemi = dome(w, h, lay.left_apex, lay.dome_h, lay.left_lung.c0, lay.left_lung.c1);

    let mut lesions = Vec::new();
    let mut labels = Vec::new();
    let unit = Confidence::ONE;
    for f in &params.findings {
        let frac = f.severity.area_fraction();
        let mask = match f.laterality {
            Laterality::Right => lesion_band(&right_lung, frac, f.label),
            Laterality::Left => lesion_band(&left_lung, frac, f.label),
            Laterality::Bilateral | Laterality::None => lesion_band(&right_lung, frac, f.label)
                .union(&lesion_band(&left_lung, frac, f.label))
                .expect("same dimensions"),
        };
        labels.push(
            Finding::new(f.label, Polarity::Present, f.laterality, unit)
                .expect("validated laterality")
                .with_attributes(attribute_words(f.label, f.laterality, f.severity)),
        );
        lesions.push(Lesion {
            label: f.label,
            laterality: f.laterality,
            severity: f.severity,
            mask,
        });
    }

    // Geometric findings follow the rendered masks so labels and pixels agree.
    let thresholds = GeometryThresholds::default();
    let ctr = geometry::cardiothoracic_ratio(&heart, &left_lung, &right_lung, params.projection).expect("nonempty");
    if ctr.is_enlarged(&thresholds) {
        labels.push(Finding::new(FindingLabel::Cardiomegaly, Polarity::Present, Laterality::None, unit).unwrap());
    }
    let trach = geometry::tracheal_deviation(&trachea, &left_lung, &right_lung).expect("nonempty");
    if trach.verdict != TrachealVerdict::Midline {
        let toward = if trach.verdict == TrachealVerdict::DeviatedPatientLeft {
            "toward patient left"
        } else {
            "toward patient right"
        };
        labels.push(
            Finding::new(FindingLabel::TrachealDeviation, Polarity::Present, Laterality::None, unit)
                .unwrap()
                .with_attributes(vec![toward.to_string()]),
        );
    }
    let dia = geometry::hemidiaphragm_comparison(&left_hemi, &right_hemi).expect("nonempty");
    if dia.flag == DiaphragmFlag::LeftHigherThanRight {
        labels.push(Finding::new(FindingLabel::DiaphragmElevation, Polarity::Present, Laterality::Left, unit).unwrap());
    }
    labels.sort_by_key(|f| f.label);

    let masks = OrganMasks {
        heart,
        left_lung,
        right_lung,
        trachea,
        left_hemidiaphragm: left_hemi,
        right_hemidiaphragm: right_hemi,
    };
    let image = render(params, &lay, &masks, &lesions);
    let study_id = params.study_id();
    let study = Study {
        current_image: ImageRef::new(format!("phantom://{study_id}/current.png"), w, h).expect("validated size"),
        study_id,
        prior_image: None,
        view: params.projection,
        context: PatientContext {
            indication: Some("synthetic phantom".into()),
            technique: Some(format!("{:?} frontal", params.projection)),
            demographics: None,
        },
    };
    let truth = GroundTruth {
        measurements: TruthMeasurements {
            ctr: params.heart_width_frac,
            tracheal_offset_frac: params.trachea_offset_frac,
            diaphragm_delta_rows: lay.left_apex as i64 - lay.right_apex as i64,
        },
        masks,
        lesions,
        labels,
    };
    Ok(SyntheticStudy {
        params: params.clone(),
        study,
        image,
        truth,
    })
}

fn render(params: &PhantomParams, lay: &Layout, masks: &OrganMasks, lesions: &[Lesion]) -> GrayImage {
    let (w, h) = params.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let body = ellipse(
        w,
        h,
        Rect {
            r0: 0,
            r1: h - 1,
            c0: lay.thoracic_left.saturating_sub(w / 20),
            c1: (lay.thoracic_right + w / 20).min(w - 1),
        },
    );
    let mut levels = vec![20u8; (w * h) as usize];
    let paint = |levels: &mut Vec<u8>, mask: &Mask, value: u8| {
        for (r, c) in mask.iter_set() {
            levels[(r * w + c) as usize] = value;
        }
    };
    paint(&mut levels, &body, 95);
    paint(&mut levels, &masks.right_lung, 40);
    paint(&mut levels, &masks.left_lung, 40);
    paint(&mut levels, &masks.right_hemidiaphragm, 150);
    paint(&mut levels, &masks.left_hemidiaphragm, 150);
    paint(&mut levels, &masks.heart, 170);
    paint(&mut levels, &masks.trachea, 12);
    for lesion in lesions {
        let value = if lesion.label == FindingLabel::Pneumothorax {
            8
        } else {
            match lesion.severity {
                Severity::Mild => 100,
                Severity::Moderate => 125,
                Severity::Severe => 150,
            }
        };
        paint(&mut levels, &lesion.mask, value);
    }
    let raw: Vec<u8> = levels
        .into_iter()
        .map(|v| v.saturating_add(rng.random_range(0..6u8)))
        .collect();
    GrayImage::from_raw(w, h, raw).expect("buffer sized to image")
}

/// Picks severities that encode `progression` and renders both studies.
pub fn generate_pair(
    params: &PhantomParams,
    progression: Progression,
    finding: FindingLabel,
) -> Result<(SyntheticStudy, SyntheticStudy), PhantomError> {
    if !FindingLabel::PROGRESSION.contains(&finding) {
        return Err(PhantomError::InvalidParams(format!(
            "{finding} is not a progression finding"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (prior_sev, current_sev) = match progression {
        Progression::Worsening => (
            Severity::Mild,
            if rng.random_bool(0.5) {
                Severity::Moderate
            } else {
                Severity::Severe
            },
        ),
        Progression::Improving => (
            if rng.random_bool(0.5) {
                Severity::Moderate
            } else {
                Severity::Severe
            },
            Severity::Mild,
        ),
        Progression::Stable => {
            let s = Severity::ALL[rng.random_range(0..3)];
            (s, s)
        }
    };
    let laterality = params
        .findings
        .iter()
        .find(|f| f.label == finding)
        .map(|f| f.laterality)
        .unwrap_or(if finding == FindingLabel::Edema {
            Laterality::Bilateral
        } else {
            Laterality::Right
        });
    let base_id = params.study_id();
    let with_severity = |severity: Severity, seed: u64, id: String| {
        let mut p = params.clone();
        p.findings.retain(|f| f.label != finding);
        p.findings.push(PhantomFinding {
            label: finding,
            laterality,
            severity,
        });
        p.seed = seed;
        p.study_id = Some(id);
        p
    };
    let prior = generate_study(&with_severity(prior_sev, params.seed, format!("{base_id}-prior")))?;
    let current = generate_study(&with_severity(
        current_sev,
        params.seed.wrapping_add(1),
        base_id,
    ))?;
    Ok((prior, current))
}

/// Random but always-valid parameters for property tests and grids.
pub fn random_params(seed: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(256..=640u32);
    PhantomParams {
        study_id: None,
        image_size: (side, rng.random_range(256..=640u32)),
        projection: if rng.random_bool(0.5) {
            Projection::PA
        } else {
            Projection::AP
        },
        heart_width_frac: rng.random_range(0.30..0.70),
        trachea_offset_frac: rng.random_range(-0.15..0.15),
        right_diaphragm_row_frac: rng.random_range(0.60..0.75),
        left_diaphragm_row_frac: rng.random_range(0.60..0.78),
        findings: Vec::new(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heart_extent_matches_fraction() {
        let p = PhantomParams {
            image_size: (500, 500),
            heart_width_frac: 0.5,
            ..PhantomParams::default()
        };
        let s = generate_study(&p).unwrap();
        let (t0, t1) = geometry::column_extent(&s.truth.masks.left_lung.union(&s.truth.masks.right_lung).unwrap()).unwrap();
        assert_eq!(t1 - t0 + 1, 400);
        let (h0, h1) = geometry::column_extent(&s.truth.masks.heart).unwrap();
        assert!(((h1 - h0 + 1) as i64 - 200).abs() <= 1);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let p = random_params(7);
        let a = generate_study(&p).unwrap();
        let b = generate_study(&p).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn different_seed_changes_noise() {
        let mut p = random_params(7);
        let a = generate_study(&p).unwrap();
        p.seed += 1;
        let b = generate_study(&p).unwrap();
        assert_ne!(a.image.as_raw(), b.image.as_raw());
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            PhantomParams {
                heart_width_frac: 1.0,
                ..PhantomParams::default()
            },
            PhantomParams {
                trachea_offset_frac: 0.25,
                ..PhantomParams::default()
            },
            PhantomParams {
                image_size: (32, 512),
                ..PhantomParams::default()
            },
            PhantomParams {
                findings: vec![PhantomFinding {
                    label: FindingLabel::Cardiomegaly,
                    laterality: Laterality::None,
                    severity: Severity::Mild,
                }],
                ..PhantomParams::default()
            },
            PhantomParams {
                findings: vec![PhantomFinding {
                    label: FindingLabel::PleuralEffusion,
                    laterality: Laterality::None,
                    severity: Severity::Mild,
                }],
                ..PhantomParams::default()
            },
        ];
        for p in bad {
            assert!(matches!(generate_study(&p), Err(PhantomError::InvalidParams(_))), "{p:?}");
        }
    }

    #[test]
    fn trachea_centroid_tracks_offset() {
        for frac in [-0.15, -0.1, 0.0, 0.05, 0.1, 0.2] {
            let p = PhantomParams {
                trachea_offset_frac: frac,
                ..PhantomParams::default()
            };
            let s = generate_study(&p).unwrap();
            let m = &s.truth.masks;
            let (_, cc) = geometry::mask_centroid(&m.trachea).unwrap();
            let (t0, t1) = geometry::column_extent(&m.left_lung.union(&m.right_lung).unwrap()).unwrap();
            let midline = (t0 + t1) as f64 / 2.0;
            let expected = frac * (t1 - t0 + 1) as f64;
            assert!((cc - midline - expected).abs() <= 1.0, "frac {frac}");
        }
    }

    #[test]
    fn rendered_extents_are_exact() {
        for seed in 0..20 {
            let p = random_params(seed);
            let s = generate_study(&p).unwrap();
            let lay = layout(&p);
            let m = &s.truth.masks;
            assert_eq!(geometry::column_extent(&m.right_lung), Some((lay.right_lung.c0, lay.right_lung.c1)));
            assert_eq!(geometry::column_extent(&m.left_lung), Some((lay.left_lung.c0, lay.left_lung.c1)));
            assert_eq!(geometry::column_extent(&m.heart), Some((lay.heart.c0, lay.heart.c1)));
            assert_eq!(geometry::row_extent(&m.right_hemidiaphragm).unwrap().0, lay.right_apex);
            assert_eq!(geometry::row_extent(&m.left_hemidiaphragm).unwrap().0, lay.left_apex);
        }
    }

    #[test]
    fn lesion_area_tracks_severity() {
        for sev in Severity::ALL {
            let p = PhantomParams {
                findings: vec![PhantomFinding {
                    label: FindingLabel::PleuralEffusion,
                    laterality: Laterality::Right,
                    severity: sev,
                }],
                ..PhantomParams::default()
            };
            let s = generate_study(&p).unwrap();
            let lesion = s.truth.lesion(FindingLabel::PleuralEffusion).unwrap();
            let frac = lesion.mask.area() as f64 / s.truth.masks.right_lung.area() as f64;
            assert!((frac - sev.area_fraction()).abs() < 0.01, "{sev:?}: {frac}");
            assert!(lesion.mask.intersection(&s.truth.masks.left_lung).unwrap().is_empty());
        }
    }

    #[test]
    fn worsening_effusion_pair() {
        let (prior, current) =
            generate_pair(&PhantomParams::default(), Progression::Worsening, FindingLabel::PleuralEffusion).unwrap();
        assert_eq!(prior.truth.severity(FindingLabel::PleuralEffusion), Some(Severity::Mild));
        assert!(matches!(
            current.truth.severity(FindingLabel::PleuralEffusion),
            Some(Severity::Moderate | Severity::Severe)
        ));
    }

    #[test]
    fn stable_edema_pair_differs_only_in_noise() {
        let (prior, current) =
            generate_pair(&PhantomParams::default(), Progression::Stable, FindingLabel::Edema).unwrap();
        assert_eq!(
            prior.truth.severity(FindingLabel::Edema),
            current.truth.severity(FindingLabel::Edema)
        );
        assert_ne!(prior.params.seed, current.params.seed);
        assert_ne!(prior.image.as_raw(), current.image.as_raw());
    }

    #[test]
    fn pair_rejects_non_progression_finding() {
        assert!(generate_pair(&PhantomParams::default(), Progression::Stable, FindingLabel::Cardiomegaly).is_err());
    }

    #[test]
    fn derived_labels_follow_geometry() {
        let p = PhantomParams {
            heart_width_frac: 0.62,
            trachea_offset_frac: 0.1,
            right_diaphragm_row_frac: 0.72,
            left_diaphragm_row_frac: 0.62,
            ..PhantomParams::default()
        };
        let s = generate_study(&p).unwrap();
        for label in [
            FindingLabel::Cardiomegaly,
            FindingLabel::TrachealDeviation,
            FindingLabel::DiaphragmElevation,
        ] {
            assert_eq!(s.truth.polarity(label), Polarity::Present, "{label}");
        }
        assert_eq!(s.truth.polarity(FindingLabel::NoFinding), Polarity::Absent);
        let normal = generate_study(&PhantomParams::default()).unwrap();
        assert!(normal.truth.labels.is_empty());
        assert_eq!(normal.truth.polarity(FindingLabel::NoFinding), Polarity::Present);
    }
}
