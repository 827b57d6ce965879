//! Fixture documents: one JSON file per study, with images and masks stored
//! as 8-bit grayscale PNG/PGM files next to it.
//!
//! ```json
//! {
//!   "study_id": "s1", "view": "PA",
//!   "images": ["s1/current.png", "s1/prior.png"], "prior": true,
//!   "context": {"indication": "..."},
//!   "query_finding": "pleural_effusion",
//!   "ground_truth": {"labels": [...], "measurements": {...},
//!                    "mask_paths": {"heart": "s1/heart.png", ...},
//!                    "lesions": [...], "progression": "worsening"},
//!   "prior_ground_truth": {...}
//! }
//! ```
//! Paths are relative to the fixture file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CaseStudy, GroundTruth, Lesion, Organ, OrganMasks, TruthMeasurements};
use crate::model::{Finding, FindingLabel, ImageRef, Laterality, Mask, PatientContext, Progression, Projection, Severity, Study};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureDoc {
    study_id: String,
    view: Projection,
    images: Vec<String>,
    prior: bool,
    #[serde(default)]
    context: PatientContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_finding: Option<FindingLabel>,
    #[serde(default = "default_true")]
    consensus: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<TruthDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_ground_truth: Option<TruthDoc>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthDoc {
    labels: Vec<Finding>,
    measurements: TruthMeasurements,
    mask_paths: BTreeMap<String, String>,
    #[serde(default)]
    lesions: Vec<LesionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    progression: Option<Progression>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LesionDoc {
    label: FindingLabel,
    laterality: Laterality,
    severity: Severity,
    mask_path: String,
}

/// A loaded fixture with the evaluation metadata it carries.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub path: PathBuf,
    pub case: CaseStudy,
    pub query_finding: Option<FindingLabel>,
    pub progression: Option<Progression>,
    pub consensus: bool,
}

fn read_doc(path: &Path) -> Result<FixtureDoc, FixtureError> {
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: FixtureDoc = serde_json::from_str(&text).map_err(|e| FixtureError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let expected = if doc.prior { 2 } else { 1 };
    if doc.images.len() != expected {
        return Err(FixtureError::Parse {
            path: path.to_path_buf(),
            message: format!("prior={} but {} image(s) listed", doc.prior, doc.images.len()),
        });
    }
    Ok(doc)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn image_ref(base: &Path, rel: &str) -> Result<ImageRef, FixtureError> {
    let full = base.join(rel);
    if !full.is_file() {
        return Err(FixtureError::MissingImage(full));
    }
    let (w, h) = image::image_dimensions(&full).map_err(|e| FixtureError::Image {
        path: full.clone(),
        message: e.to_string(),
    })?;
    ImageRef::new(full.to_string_lossy(), w, h).map_err(|e| FixtureError::Image {
        path: full,
        message: e.to_string(),
    })
}

fn study_from_doc(doc: &FixtureDoc, base: &Path) -> Result<Study, FixtureError> {
    let current_image = image_ref(base, &doc.images[0])?;
    let prior_image = if doc.prior {
        Some(image_ref(base, &doc.images[1])?)
    } else {
        None
    };
    Ok(Study {
        study_id: doc.study_id.clone(),
        current_image,
        prior_image,
        view: doc.view,
        context: doc.context.clone(),
    })
}

pub fn load_fixture(path: impl AsRef<Path>) -> Result<Study, FixtureError> {
    let path = path.as_ref();
    let doc = read_doc(path)?;
    study_from_doc(&doc, &base_dir(path))
}

fn fixture_files(dir: &Path) -> Result<Vec<PathBuf>, FixtureError> {
    let entries = fs::read_dir(dir).map_err(|source| FixtureError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_fixture_dir(dir: impl AsRef<Path>) -> Result<Vec<Study>, FixtureError> {
    fixture_files(dir.as_ref())?.iter().map(load_fixture).collect()
}

fn load_gray(path: &Path) -> Result<GrayImage, FixtureError> {
    if !path.is_file() {
        return Err(FixtureError::MissingImage(path.to_path_buf()));
    }
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|e| FixtureError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn load_mask(path: &Path) -> Result<Mask, FixtureError> {
    let img = load_gray(path)?;
    let bits = img.pixels().map(|p| p[0] > 127).collect();
    Mask::from_bits(img.width(), img.height(), bits).map_err(|e| FixtureError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn truth_from_doc(doc: &TruthDoc, base: &Path, fixture: &Path) -> Result<GroundTruth, FixtureError> {
    let mask = |organ: Organ| -> Result<Mask, FixtureError> {
        let rel = doc.mask_paths.get(organ.as_str()).ok_or_else(|| FixtureError::Parse {
            path: fixture.to_path_buf(),
            message: format!("ground_truth.mask_paths lacks `{}`", organ.as_str()),
        })?;
        load_mask(&base.join(rel))
    };
    let masks = OrganMasks {
        heart: mask(Organ::Heart)?,
        left_lung: mask(Organ::LeftLung)?,
        right_lung: mask(Organ::RightLung)?,
        trachea: mask(Organ::Trachea)?,
        left_hemidiaphragm: mask(Organ::LeftHemidiaphragm)?,
        right_hemidiaphragm: mask(Organ::RightHemidiaphragm)?,
    };
    let lesions = doc
        .lesions
        .iter()
        .map(|l| {
            Ok(Lesion {
                label: l.label,
                laterality: l.laterality,
                severity: l.severity,
                mask: load_mask(&base.join(&l.mask_path))?,
            })
        })
        .collect::<Result<Vec<_>, FixtureError>>()?;
    Ok(GroundTruth {
        masks,
        lesions,
        labels: doc.labels.clone(),
        measurements: doc.measurements.clone(),
    })
}

pub fn load_case(path: impl AsRef<Path>) -> Result<LoadedCase, FixtureError> {
    let path = path.as_ref();
    let doc = read_doc(path)?;
    let base = base_dir(path);
    let study = study_from_doc(&doc, &base)?;
    let current_pixels = Arc::new(load_gray(Path::new(&study.current_image.path))?);
    let prior_pixels = match &study.prior_image {
        Some(p) => Some(Arc::new(load_gray(Path::new(&p.path))?)),
        None => None,
    };
    let truth = doc
        .ground_truth
        .as_ref()
        .map(|t| truth_from_doc(t, &base, path).map(Arc::new))
        .transpose()?;
    let prior_truth = doc
        .prior_ground_truth
        .as_ref()
        .map(|t| truth_from_doc(t, &base, path).map(Arc::new))
        .transpose()?;
    Ok(LoadedCase {
        path: path.to_path_buf(),
        case: CaseStudy {
            study,
            current_pixels,
            prior_pixels,
            truth,
            prior_truth,
        },
        query_finding: doc.query_finding,
        progression: doc.ground_truth.as_ref().and_then(|t| t.progression),
        consensus: doc.consensus,
    })
}

pub fn load_case_dir(dir: impl AsRef<Path>) -> Result<Vec<LoadedCase>, FixtureError> {
    fixture_files(dir.as_ref())?.iter().map(load_case).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn save_png(img: &GrayImage, path: &Path) -> Result<(), FixtureError> {
    img.save(path).map_err(|e| FixtureError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn mask_image(mask: &Mask) -> GrayImage {
    GrayImage::from_fn(mask.width(), mask.height(), |x, y| Luma([if mask.get(y, x) { 255 } else { 0 }]))
}

fn write_truth(truth: &GroundTruth, dir: &Path, prefix: &str, rel_dir: &str) -> Result<TruthDoc, FixtureError> {
    let mut mask_paths = BTreeMap::new();
    for organ in Organ::ALL {
        let name = format!("{prefix}{}.png", organ.as_str());
        save_png(&mask_image(truth.masks.get(organ)), &dir.join(&name))?;
        mask_paths.insert(organ.as_str().to_string(), format!("{rel_dir}/{name}"));
    }
    let mut lesions = Vec::new();
    for lesion in &truth.lesions {
        let name = format!("{prefix}lesion_{}.png", lesion.label.as_snake());
        save_png(&mask_image(&lesion.mask), &dir.join(&name))?;
        lesions.push(LesionDoc {
            label: lesion.label,
            laterality: lesion.laterality,
            severity: lesion.severity,
            mask_path: format!("{rel_dir}/{name}"),
        });
    }
    Ok(TruthDoc {
        labels: truth.labels.clone(),
        measurements: truth.measurements.clone(),
        mask_paths,
        lesions,
        progression: None,
    })
}

/// Evaluation metadata written alongside a case.
#[derive(Debug, Clone, Default)]
pub struct CaseMeta {
    pub query_finding: Option<FindingLabel>,
    pub progression: Option<Progression>,
}

/// Writes `case` as `<dir>/<study_id>.json` plus a `<study_id>/` folder of
/// images and masks.
pub fn write_case(dir: impl AsRef<Path>, case: &CaseStudy, meta: &CaseMeta) -> Result<PathBuf, FixtureError> {
    let dir = dir.as_ref();
    let id = case.id();
    let asset_dir = dir.join(id);
    fs::create_dir_all(&asset_dir).map_err(io_err(&asset_dir))?;
    save_png(&case.current_pixels, &asset_dir.join("current.png"))?;
    let mut images = vec![format!("{id}/current.png")];
    if let Some(prior) = &case.prior_pixels {
        save_png(prior, &asset_dir.join("prior.png"))?;
        images.push(format!("{id}/prior.png"));
    }
    let ground_truth = match &case.truth {
        Some(t) => {
            let mut doc = write_truth(t, &asset_dir, "", id)?;
            doc.progression = meta.progression;
            Some(doc)
        }
        None => None,
    };
    let prior_ground_truth = match &case.prior_truth {
        Some(t) => Some(write_truth(t, &asset_dir, "prior_", id)?),
        None => None,
    };
    let doc = FixtureDoc {
        study_id: id.to_string(),
        view: case.study.view,
        prior: images.len() == 2,
        images,
        context: case.study.context.clone(),
        query_finding: meta.query_finding,
        consensus: true,
        ground_truth,
        prior_ground_truth,
    };
    let path = dir.join(format!("{id}.json"));
    let text = serde_json::to_string_pretty(&doc).expect("fixture serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}
