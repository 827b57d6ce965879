//! Domain types shared across the engine.
//!
//! Pixel coordinates follow image convention: row 0 is the top of the image,
//! column 0 the left edge. A frontal chest film is viewed as if facing the
//! patient, so the patient's right side lies in the left half of the image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("mask buffer holds {got} cells, expected {expected}")]
    MaskBufferSize { expected: usize, got: usize },
    #[error("invalid box ({x_min},{y_min})-({x_max},{y_max})")]
    InvalidBox {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    #[error("{label} present without laterality")]
    MissingLaterality { label: FindingLabel },
    #[error("measurement {kind:?} value {value} outside its valid range")]
    MeasurementRange { kind: MeasurementKind, value: f64 },
    #[error("unknown finding label `{0}`")]
    UnknownLabel(String),
}

/// A confidence score, always within `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Confidence(f64);

impl Confidence {
    pub const ZERO: Confidence = Confidence(0.0);
    pub const ONE: Confidence = Confidence(1.0);

    pub fn new(value: f64) -> Result<Self, ModelError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Confidence(value))
        } else {
            Err(ModelError::ConfidenceOutOfRange(value))
        }
    }

    /// Clamps into range; NaN maps to zero.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Confidence(0.0)
        } else {
            Confidence(value.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn min(self, other: Confidence) -> Confidence {
        Confidence(self.0.min(other.0))
    }

    pub fn max(self, other: Confidence) -> Confidence {
        Confidence(self.0.max(other.0))
    }
}

impl TryFrom<f64> for Confidence {
    type Error = ModelError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Confidence::new(value)
    }
}

impl From<Confidence> for f64 {
    fn from(c: Confidence) -> f64 {
        c.0
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}", self.0)
    }
}

/// Frontal projection of the radiograph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Projection {
    #[default]
    PA,
    AP,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub width_px: u32,
    pub height_px: u32,
}

impl ImageRef {
    pub fn new(path: impl Into<String>, width_px: u32, height_px: u32) -> Result<Self, ModelError> {
        if width_px == 0 || height_px == 0 {
            return Err(ModelError::EmptyDimensions {
                width: width_px,
                height: height_px,
            });
        }
        Ok(Self {
            path: path.into(),
            width_px,
            height_px,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PatientContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indication: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub technique: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub current_image: ImageRef,
    pub prior_image: Option<ImageRef>,
    pub view: Projection,
    pub context: PatientContext,
}

/// Binary mask, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, ModelError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(ModelError::MaskBufferSize {
                expected,
                got: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        row < self.height && col < self.width && self.bits[self.index(row, col)]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        let idx = self.index(row, col);
        self.bits[idx] = value;
    }

    fn index(&self, row: u32, col: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|b| **b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Iterates `(row, col)` of set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i / w) as u32, (i % w) as u32))
    }

    pub fn union(&self, other: &Mask) -> Option<Mask> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a || *b)
            .collect();
        Some(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn intersection(&self, other: &Mask) -> Option<Mask> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && *b)
            .collect();
        Some(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }
}

/// Inclusive pixel box: a box with `x_min == x_max` is one column wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, ModelError> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_degenerate() {
            return Err(ModelError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(b)
    }

    pub fn is_degenerate(&self) -> bool {
        self.x_min > self.x_max || self.y_min > self.y_max
    }

    pub fn width(&self) -> u32 {
        if self.x_max < self.x_min {
            0
        } else {
            self.x_max - self.x_min + 1
        }
    }

    pub fn height(&self) -> u32 {
        if self.y_max < self.y_min {
            0
        } else {
            self.y_max - self.y_min + 1
        }
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_max < width && self.y_max < height
    }

    pub fn center_col(&self) -> f64 {
        (self.x_min as f64 + self.x_max as f64) / 2.0
    }
}

macro_rules! finding_labels {
    ($( $variant:ident => $snake:literal, $display:literal; )*) => {
        /// Finding vocabulary: the CheXpert label set plus the two
        /// geometry-derived findings assessed by the airway and diaphragm agents.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum FindingLabel {
            $( $variant, )*
        }

        impl FindingLabel {
            pub const ALL: &'static [FindingLabel] = &[$( FindingLabel::$variant, )*];

            pub fn as_snake(self) -> &'static str {
                match self {
                    $( FindingLabel::$variant => $snake, )*
                }
            }

            /// Lowercase human-readable name, e.g. "pleural effusion".
            pub fn display_name(self) -> &'static str {
                match self {
                    $( FindingLabel::$variant => $display, )*
                }
            }
        }

        impl FromStr for FindingLabel {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
                match norm.as_str() {
                    $( $snake => Ok(FindingLabel::$variant), )*
                    "effusion" => Ok(FindingLabel::PleuralEffusion),
                    "trachea" | "tracheal_findings" => Ok(FindingLabel::TrachealDeviation),
                    "hemidiaphragm_elevation" | "elevated_hemidiaphragm" => Ok(FindingLabel::DiaphragmElevation),
                    _ => Err(ModelError::UnknownLabel(s.to_string())),
                }
            }
        }
    };
}

finding_labels! {
    Atelectasis => "atelectasis", "atelectasis";
    Cardiomegaly => "cardiomegaly", "cardiomegaly";
    Consolidation => "consolidation", "consolidation";
    Edema => "edema", "edema";
    EnlargedCardiomediastinum => "enlarged_cardiomediastinum", "enlarged cardiomediastinum";
    Fracture => "fracture", "fracture";
    LungLesion => "lung_lesion", "lung lesion";
    LungOpacity => "lung_opacity", "lung opacity";
    NoFinding => "no_finding", "no finding";
    PleuralEffusion => "pleural_effusion", "pleural effusion";
    PleuralOther => "pleural_other", "pleural other";
    Pneumonia => "pneumonia", "pneumonia";
    Pneumothorax => "pneumothorax", "pneumothorax";
    SupportDevices => "support_devices", "support devices";
    TrachealDeviation => "tracheal_deviation", "tracheal deviation";
    DiaphragmElevation => "diaphragm_elevation", "diaphragm elevation";
}

impl FindingLabel {
    /// The fourteen CheXpert labels, in the canonical order used by the metrics.
    pub const CHEXPERT: [FindingLabel; 14] = [
        FindingLabel::Atelectasis,
        FindingLabel::Cardiomegaly,
        FindingLabel::Consolidation,
        FindingLabel::Edema,
        FindingLabel::EnlargedCardiomediastinum,
        FindingLabel::Fracture,
        FindingLabel::LungLesion,
        FindingLabel::LungOpacity,
        FindingLabel::NoFinding,
        FindingLabel::PleuralEffusion,
        FindingLabel::PleuralOther,
        FindingLabel::Pneumonia,
        FindingLabel::Pneumothorax,
        FindingLabel::SupportDevices,
    ];

    /// The seven findings posed in existence-and-attribute questions.
    pub const QUERIED: [FindingLabel; 7] = [
        FindingLabel::Atelectasis,
        FindingLabel::Cardiomegaly,
        FindingLabel::Consolidation,
        FindingLabel::Edema,
        FindingLabel::LungOpacity,
        FindingLabel::PleuralEffusion,
        FindingLabel::Pneumothorax,
    ];

    /// Findings tracked for temporal progression.
    pub const PROGRESSION: [FindingLabel; 4] = [
        FindingLabel::Consolidation,
        FindingLabel::Edema,
        FindingLabel::PleuralEffusion,
        FindingLabel::Pneumothorax,
    ];

    /// Midline or global findings, which carry no side.
    pub fn is_global(self) -> bool {
        matches!(
            self,
            FindingLabel::Cardiomegaly
                | FindingLabel::EnlargedCardiomediastinum
                | FindingLabel::NoFinding
                | FindingLabel::SupportDevices
                | FindingLabel::TrachealDeviation
        )
    }

    /// Labels whose ground truth comes from rendered geometry rather than an
    /// opacity region.
    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            FindingLabel::Cardiomegaly | FindingLabel::TrachealDeviation | FindingLabel::DiaphragmElevation
        )
    }

    pub fn is_chexpert(self) -> bool {
        Self::CHEXPERT.contains(&self)
    }

    /// Sentence-initial form of the display name.
    pub fn capitalized(self) -> String {
        let name = self.display_name();
        let mut chars = name.chars();
        match chars.next() {
            Some(c) => c.to_ascii_uppercase().to_string() + chars.as_str(),
            None => String::new(),
        }
    }
}

impl fmt::Display for FindingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Present,
    Absent,
    Uncertain,
}

impl Polarity {
    pub fn opposite(self) -> Polarity {
        match self {
            Polarity::Present => Polarity::Absent,
            Polarity::Absent => Polarity::Present,
            Polarity::Uncertain => Polarity::Uncertain,
        }
    }

    pub fn from_present(present: bool) -> Polarity {
        if present {
            Polarity::Present
        } else {
            Polarity::Absent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Left,
    Right,
    Bilateral,
    #[default]
    None,
}

impl Laterality {
    pub fn is_sided(self) -> bool {
        self != Laterality::None
    }

    pub fn describe(self) -> Option<&'static str> {
        match self {
            Laterality::Left => Some("left"),
            Laterality::Right => Some("right"),
            Laterality::Bilateral => Some("bilateral"),
            Laterality::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    /// Opacity area as a fraction of the affected lung.
    pub fn area_fraction(self) -> f64 {
        match self {
            Severity::Mild => 0.05,
            Severity::Moderate => 0.15,
            Severity::Severe => 0.30,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub label: FindingLabel,
    pub polarity: Polarity,
    pub laterality: Laterality,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub confidence: Confidence,
}

impl Finding {
    /// A present, lateral finding must name its side; absent and uncertain
    /// findings may omit it.
    pub fn new(
        label: FindingLabel,
        polarity: Polarity,
        laterality: Laterality,
        confidence: Confidence,
    ) -> Result<Self, ModelError> {
        if polarity == Polarity::Present && !label.is_global() && !laterality.is_sided() {
            return Err(ModelError::MissingLaterality { label });
        }
        Ok(Self {
            label,
            polarity,
            laterality,
            attributes: Vec::new(),
            confidence,
        })
    }

    pub fn with_attributes(mut self, attributes: Vec<String>) -> Self {
        self.attributes = attributes;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    CardiacWidth,
    ThoracicWidth,
    Ctr,
    TrachealOffset,
    DiaphragmDelta,
    LesionArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Px,
    Ratio,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub value: f64,
    pub units: Units,
    pub projection: Projection,
}

impl Measurement {
    /// Ratios lie in `[0, 1.5]`; normalized values are signed with magnitude at
    /// most 1.5; pixel widths are nonnegative integers.
    pub fn new(kind: MeasurementKind, value: f64, units: Units, projection: Projection) -> Result<Self, ModelError> {
        let ok = match units {
            Units::Ratio => (0.0..=1.5).contains(&value),
            Units::Normalized => value.abs() <= 1.5,
            Units::Px => match kind {
                MeasurementKind::CardiacWidth | MeasurementKind::ThoracicWidth => value >= 0.0 && value.fract() == 0.0,
                _ => value.is_finite() && value.fract() == 0.0,
            },
        };
        if !ok {
            return Err(ModelError::MeasurementRange { kind, value });
        }
        Ok(Self {
            kind,
            value,
            units,
            projection,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_rejects_out_of_range() {
        assert!(Confidence::new(1.01).is_err());
        assert!(Confidence::new(-0.1).is_err());
        assert!(Confidence::new(f64::NAN).is_err());
        assert_eq!(Confidence::new(0.6).unwrap().get(), 0.6);
        let parsed: Result<Confidence, _> = serde_json::from_str("1.5");
        assert!(parsed.is_err());
    }

    #[test]
    fn present_lateral_finding_requires_side() {
        let c = Confidence::ONE;
        assert!(Finding::new(FindingLabel::PleuralEffusion, Polarity::Present, Laterality::None, c).is_err());
        assert!(Finding::new(FindingLabel::PleuralEffusion, Polarity::Absent, Laterality::None, c).is_ok());
        assert!(Finding::new(FindingLabel::Cardiomegaly, Polarity::Present, Laterality::None, c).is_ok());
    }

    #[test]
    fn label_parsing_accepts_display_and_snake_forms() {
        assert_eq!("pleural effusion".parse::<FindingLabel>().unwrap(), FindingLabel::PleuralEffusion);
        assert_eq!("Lung_Opacity".parse::<FindingLabel>().unwrap(), FindingLabel::LungOpacity);
        assert!("sky".parse::<FindingLabel>().is_err());
        for label in FindingLabel::ALL {
            assert_eq!(label.as_snake().parse::<FindingLabel>().unwrap(), *label);
        }
    }

    #[test]
    fn measurement_ranges() {
        assert!(Measurement::new(MeasurementKind::Ctr, 1.6, Units::Ratio, Projection::PA).is_err());
        assert!(Measurement::new(MeasurementKind::TrachealOffset, -0.1, Units::Normalized, Projection::PA).is_ok());
        assert!(Measurement::new(MeasurementKind::CardiacWidth, 20.5, Units::Px, Projection::PA).is_err());
        assert!(Measurement::new(MeasurementKind::DiaphragmDelta, -20.0, Units::Px, Projection::PA).is_ok());
    }

    #[test]
    fn bbox_inclusive_extent() {
        let b = BBox::new(0, 0, 9, 9).unwrap();
        assert_eq!(b.area(), 100);
        assert!(BBox::new(5, 0, 4, 0).is_err());
    }
}

/// Temporal change of a finding between a prior and a current study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Progression {
    Improving,
    Stable,
    Worsening,
}

impl Progression {
    pub const ALL: [Progression; 3] = [Progression::Improving, Progression::Stable, Progression::Worsening];

    pub fn as_str(self) -> &'static str {
        match self {
            Progression::Improving => "improving",
            Progression::Stable => "stable",
            Progression::Worsening => "worsening",
        }
    }

    /// Recovers the progression from prior and current severities.
    pub fn from_severities(prior: Severity, current: Severity) -> Progression {
        match current.cmp(&prior) {
            std::cmp::Ordering::Greater => Progression::Worsening,
            std::cmp::Ordering::Equal => Progression::Stable,
            std::cmp::Ordering::Less => Progression::Improving,
        }
    }
}

impl FromStr for Progression {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "improving" => Ok(Progression::Improving),
            "stable" => Ok(Progression::Stable),
            "worsening" => Ok(Progression::Worsening),
            other => Err(ModelError::UnknownLabel(other.to_string())),
        }
    }
}
