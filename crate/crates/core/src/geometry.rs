//! Mask and box measurements: cardiothoracic ratio, tracheal position,
//! hemidiaphragm heights, quarter patches, and a few shared primitives.
//!
//! Widths are inclusive pixel extents (`max - min + 1`).

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BBox, Mask, Projection};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("mask `{0}` is empty")]
    EmptyMask(String),
    #[error("mask dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("image {width}x{height} is too small to split into quarters")]
    ImageTooSmall { width: u32, height: u32 },
}

/// Interpretation cutoffs shared by the measurement workflows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryThresholds {
    pub ctr_enlarged_pa: f64,
    pub ctr_enlarged_ap: f64,
    pub midline_tolerance: f64,
    pub diaphragm_height_fraction: f64,
}

impl Default for GeometryThresholds {
    fn default() -> Self {
        Self {
            ctr_enlarged_pa: 0.50,
            ctr_enlarged_ap: 0.57,
            midline_tolerance: 0.03,
            diaphragm_height_fraction: 0.02,
        }
    }
}

impl GeometryThresholds {
    pub fn ctr_cutoff(&self, projection: Projection) -> f64 {
        match projection {
            Projection::PA => self.ctr_enlarged_pa,
            Projection::AP => self.ctr_enlarged_ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrResult {
    pub cardiac_width_px: u32,
    pub thoracic_width_px: u32,
    pub ratio: f64,
    pub projection: Projection,
}

impl CtrResult {
    pub fn is_enlarged(&self, thresholds: &GeometryThresholds) -> bool {
        self.ratio > thresholds.ctr_cutoff(self.projection)
    }

    pub fn caveats(&self) -> Vec<String> {
        match self.projection {
            Projection::AP => vec!["AP projection magnifies the cardiac silhouette; AP cutoff applied".to_string()],
            Projection::PA => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrachealVerdict {
    Midline,
    DeviatedPatientLeft,
    DeviatedPatientRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrachealDeviation {
    /// Positive toward image right, i.e. the patient's left.
    pub offset_px: i64,
    pub normalized_offset: f64,
    pub verdict: TrachealVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiaphragmFlag {
    Normal,
    LeftHigherThanRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiaphragmComparison {
    pub right_apex_row: u32,
    pub left_apex_row: u32,
    pub delta_rows: i64,
    pub flag: DiaphragmFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    UL,
    UR,
    LL,
    LR,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::UL, Quadrant::UR, Quadrant::LL, Quadrant::LR];
}

fn same_dims(a: &Mask, b: &Mask, what: &str) -> Result<(), GeometryError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(GeometryError::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Inclusive `(min_col, max_col)` over set pixels.
pub fn column_extent(mask: &Mask) -> Option<(u32, u32)> {
    let mut extent: Option<(u32, u32)> = None;
    for (_, col) in mask.iter_set() {
        extent = Some(match extent {
            None => (col, col),
            Some((lo, hi)) => (lo.min(col), hi.max(col)),
        });
    }
    extent
}

/// Inclusive `(min_row, max_row)` over set pixels.
pub fn row_extent(mask: &Mask) -> Option<(u32, u32)> {
    let mut rows = mask.iter_set().map(|(r, _)| r);
    let first = rows.next()?;
    let last = rows.last().unwrap_or(first);
    Some((first, last))
}

pub fn mask_bbox(mask: &Mask) -> Option<BBox> {
    let (c0, c1) = column_extent(mask)?;
    let (r0, r1) = row_extent(mask)?;
    Some(BBox {
        x_min: c0,
        y_min: r0,
        x_max: c1,
        y_max: r1,
    })
}

fn joint_lung_extent(left_lung: &Mask, right_lung: &Mask) -> Result<(u32, u32), GeometryError> {
    same_dims(left_lung, right_lung, "lungs")?;
    let left = column_extent(left_lung).ok_or_else(|| GeometryError::EmptyMask("left_lung".into()))?;
    let right = column_extent(right_lung).ok_or_else(|| GeometryError::EmptyMask("right_lung".into()))?;
    Ok((left.0.min(right.0), left.1.max(right.1)))
}

pub fn cardiothoracic_ratio(
    heart: &Mask,
    left_lung: &Mask,
    right_lung: &Mask,
    projection: Projection,
) -> Result<CtrResult, GeometryError> {
    same_dims(heart, left_lung, "heart/left_lung")?;
    let (h0, h1) = column_extent(heart).ok_or_else(|| GeometryError::EmptyMask("heart".into()))?;
    let (t0, t1) = joint_lung_extent(left_lung, right_lung)?;
    let cardiac = h1 - h0 + 1;
    let thoracic = t1 - t0 + 1;
    Ok(CtrResult {
        cardiac_width_px: cardiac,
        thoracic_width_px: thoracic,
        ratio: cardiac as f64 / thoracic as f64,
        projection,
    })
}

pub fn tracheal_deviation(trachea: &Mask, left_lung: &Mask, right_lung: &Mask) -> Result<TrachealDeviation, GeometryError> {
    tracheal_deviation_with(trachea, left_lung, right_lung, GeometryThresholds::default().midline_tolerance)
}

pub fn tracheal_deviation_with(
    trachea: &Mask,
    left_lung: &Mask,
    right_lung: &Mask,
    midline_tolerance: f64,
) -> Result<TrachealDeviation, GeometryError> {
    same_dims(trachea, left_lung, "trachea/left_lung")?;
    let (_, centroid_col) = mask_centroid(trachea).map_err(|_| GeometryError::EmptyMask("trachea".into()))?;
    let (t0, t1) = joint_lung_extent(left_lung, right_lung)?;
    let midline = (t0 as f64 + t1 as f64) / 2.0;
    let width = (t1 - t0 + 1) as f64;
    let offset = centroid_col - midline;
    let normalized_offset = offset / width;
    let verdict = if normalized_offset.abs() <= midline_tolerance {
        TrachealVerdict::Midline
    } else if normalized_offset > 0.0 {
        TrachealVerdict::DeviatedPatientLeft
    } else {
        TrachealVerdict::DeviatedPatientRight
    };
    Ok(TrachealDeviation {
        offset_px: offset.round() as i64,
        normalized_offset,
        verdict,
    })
}

pub fn hemidiaphragm_comparison(left_hemi: &Mask, right_hemi: &Mask) -> Result<DiaphragmComparison, GeometryError> {
    hemidiaphragm_comparison_with(left_hemi, right_hemi, GeometryThresholds::default().diaphragm_height_fraction)
}

pub fn hemidiaphragm_comparison_with(
    left_hemi: &Mask,
    right_hemi: &Mask,
    height_fraction: f64,
) -> Result<DiaphragmComparison, GeometryError> {
    let left_apex_row = row_extent(left_hemi)
        .ok_or_else(|| GeometryError::EmptyMask("left_hemidiaphragm".into()))?
        .0;
    let right_apex_row = row_extent(right_hemi)
        .ok_or_else(|| GeometryError::EmptyMask("right_hemidiaphragm".into()))?
        .0;
    let gap = right_apex_row as f64 - left_apex_row as f64;
    let flag = if gap > height_fraction * left_hemi.height() as f64 {
        DiaphragmFlag::LeftHigherThanRight
    } else {
        DiaphragmFlag::Normal
    };
    Ok(DiaphragmComparison {
        right_apex_row,
        left_apex_row,
        delta_rows: left_apex_row as i64 - right_apex_row as i64,
        flag,
    })
}

/// Bounds of a quadrant; odd dimensions give the extra row/column to the
/// upper/left patch.
pub fn quarter_bounds(width: u32, height: u32, quadrant: Quadrant) -> Result<BBox, GeometryError> {
    if width < 2 || height < 2 {
        return Err(GeometryError::ImageTooSmall { width, height });
    }
    let left_w = width.div_ceil(2);
    let upper_h = height.div_ceil(2);
    let (x_min, x_max) = match quadrant {
        Quadrant::UL | Quadrant::LL => (0, left_w - 1),
        Quadrant::UR | Quadrant::LR => (left_w, width - 1),
    };
    let (y_min, y_max) = match quadrant {
        Quadrant::UL | Quadrant::UR => (0, upper_h - 1),
        Quadrant::LL | Quadrant::LR => (upper_h, height - 1),
    };
    Ok(BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

pub fn quarter_patch(image: &GrayImage, quadrant: Quadrant) -> Result<GrayImage, GeometryError> {
    let b = quarter_bounds(image.width(), image.height(), quadrant)?;
    Ok(image::imageops::crop_imm(image, b.x_min, b.y_min, b.width(), b.height()).to_image())
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix0 = a.x_min.max(b.x_min);
    let iy0 = a.y_min.max(b.y_min);
    let ix1 = a.x_max.min(b.x_max);
    let iy1 = a.y_max.min(b.y_max);
    let inter = if ix0 > ix1 || iy0 > iy1 {
        0
    } else {
        (ix1 - ix0 + 1) as u64 * (iy1 - iy0 + 1) as u64
    };
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mask_area_fraction(mask: &Mask) -> f64 {
    let total = mask.width() as u64 * mask.height() as u64;
    if total == 0 {
        0.0
    } else {
        mask.area() as f64 / total as f64
    }
}

/// Mean `(row, col)` of set pixels.
pub fn mask_centroid(mask: &Mask) -> Result<(f64, f64), GeometryError> {
    let (mut n, mut sr, mut sc) = (0u64, 0u64, 0u64);
    for (r, c) in mask.iter_set() {
        n += 1;
        sr += r as u64;
        sc += c as u64;
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask("mask".into()));
    }
    Ok((sr as f64 / n as f64, sc as f64 / n as f64))
}

/// Debug overlay: the grayscale image with each mask tinted in its color.
pub fn render_overlay(image: &GrayImage, masks: &[(&Mask, [u8; 3])]) -> RgbImage {
    let mut out = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = image.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    for (mask, color) in masks {
        for (row, col) in mask.iter_set() {
            if col < out.width() && row < out.height() {
                let px = out.get_pixel_mut(col, row);
                for ch in 0..3 {
                    px[ch] = ((px[ch] as u16 + color[ch] as u16) / 2) as u8;
                }
            }
        }
    }
    out
}
