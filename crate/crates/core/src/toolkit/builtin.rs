//! Programming tools backed by the geometry module.

use std::sync::Arc;

use super::{Capability, Payload, Provenance, Tool, ToolCard, ToolError, ToolOutput, ToolRegistry, ToolRequest, ToolSource};
use crate::geometry::{self, GeometryError};
use crate::model::{Confidence, Mask, Measurement, MeasurementKind, Units};
use crate::phantom::{CaseStudy, Organ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeometryOp {
    Ctr,
    Trachea,
    Diaphragm,
    Area,
    QuarterPatch,
}

impl GeometryOp {
    pub const ALL: [GeometryOp; 5] = [
        GeometryOp::Ctr,
        GeometryOp::Trachea,
        GeometryOp::Diaphragm,
        GeometryOp::Area,
        GeometryOp::QuarterPatch,
    ];

    pub fn tool_id(self) -> &'static str {
        match self {
            GeometryOp::Ctr => "geometry_ctr",
            GeometryOp::Trachea => "geometry_trachea",
            GeometryOp::Diaphragm => "geometry_diaphragm",
            GeometryOp::Area => "geometry_area",
            GeometryOp::QuarterPatch => "geometry_quarter_patch",
        }
    }

    fn capability(self) -> Capability {
        match self {
            GeometryOp::Ctr | GeometryOp::Trachea | GeometryOp::Diaphragm => Capability::Measure,
            GeometryOp::Area => Capability::Calculate,
            GeometryOp::QuarterPatch => Capability::Crop,
        }
    }

    fn kind(self) -> Option<MeasurementKind> {
        match self {
            GeometryOp::Ctr => Some(MeasurementKind::Ctr),
            GeometryOp::Trachea => Some(MeasurementKind::TrachealOffset),
            GeometryOp::Diaphragm => Some(MeasurementKind::DiaphragmDelta),
            GeometryOp::Area => Some(MeasurementKind::LesionArea),
            GeometryOp::QuarterPatch => None,
        }
    }

    /// The geometry tool that produces `kind`, if any.
    pub fn for_kind(kind: MeasurementKind) -> Option<GeometryOp> {
        GeometryOp::ALL.into_iter().find(|op| op.kind() == Some(kind))
    }
}

pub struct GeometryTool {
    card: ToolCard,
    op: GeometryOp,
}

impl GeometryTool {
    pub fn new(op: GeometryOp) -> Self {
        Self {
            card: ToolCard::new(op.tool_id(), op.capability(), 0, ToolSource::BuiltinGeometry),
            op,
        }
    }

    fn fail(&self, e: GeometryError) -> ToolError {
        ToolError::Failed {
            tool_id: self.card.tool_id.clone(),
            message: e.to_string(),
        }
    }

    fn mismatch(&self, detail: String) -> ToolError {
        ToolError::SchemaMismatch {
            tool_id: self.card.tool_id.clone(),
            detail,
            raw: String::new(),
        }
    }
}

pub fn register_geometry_tools(registry: &mut ToolRegistry) -> Result<(), ToolError> {
    for op in GeometryOp::ALL {
        registry.register(Arc::new(GeometryTool::new(op)))?;
    }
    Ok(())
}

fn m(kind: MeasurementKind, value: f64, units: Units, projection: crate::model::Projection) -> Measurement {
    Measurement::new(kind, value, units, projection).expect("geometry values are in range")
}

impl Tool for GeometryTool {
    fn card(&self) -> &ToolCard {
        &self.card
    }

    fn invoke(&self, request: &ToolRequest, case: &CaseStudy) -> Result<ToolOutput, ToolError> {
        let payload = match (self.op, request) {
            (GeometryOp::QuarterPatch, ToolRequest::Crop { quadrant, slot }) => {
                let image = match slot {
                    super::ImageSlot::Current => &case.current_pixels,
                    super::ImageSlot::Prior => case
                        .prior_pixels
                        .as_ref()
                        .ok_or_else(|| self.mismatch("study has no prior image".into()))?,
                };
                Payload::Patch(geometry::quarter_patch(image, *quadrant).map_err(|e| self.fail(e))?)
            }
            (GeometryOp::Area, ToolRequest::Calculate { mask }) => {
                let p = case.study.view;
                Payload::Measurements(vec![m(MeasurementKind::LesionArea, mask.area() as f64, Units::Px, p)])
            }
            (op, ToolRequest::Measure { kind, masks, projection }) if op.kind() == Some(*kind) => {
                let get = |o: Organ| -> Result<&Mask, ToolError> {
                    masks.get(&o).ok_or_else(|| self.mismatch(format!("missing `{}` mask", o.as_str())))
                };
                let p = *projection;
                match op {
                    GeometryOp::Ctr => {
                        let r = geometry::cardiothoracic_ratio(get(Organ::Heart)?, get(Organ::LeftLung)?, get(Organ::RightLung)?, p)
                            .map_err(|e| self.fail(e))?;
                        Payload::Measurements(vec![
                            m(MeasurementKind::CardiacWidth, r.cardiac_width_px as f64, Units::Px, p),
                            m(MeasurementKind::ThoracicWidth, r.thoracic_width_px as f64, Units::Px, p),
                            m(MeasurementKind::Ctr, r.ratio, Units::Ratio, p),
                        ])
                    }
                    GeometryOp::Trachea => {
                        let t = geometry::tracheal_deviation(get(Organ::Trachea)?, get(Organ::LeftLung)?, get(Organ::RightLung)?)
                            .map_err(|e| self.fail(e))?;
                        Payload::Measurements(vec![
                            m(MeasurementKind::TrachealOffset, t.offset_px as f64, Units::Px, p),
                            m(MeasurementKind::TrachealOffset, t.normalized_offset, Units::Normalized, p),
                        ])
                    }
                    GeometryOp::Diaphragm => {
                        let d = geometry::hemidiaphragm_comparison(
                            get(Organ::LeftHemidiaphragm)?,
                            get(Organ::RightHemidiaphragm)?,
                        )
                        .map_err(|e| self.fail(e))?;
                        Payload::Measurements(vec![m(MeasurementKind::DiaphragmDelta, d.delta_rows as f64, Units::Px, p)])
                    }
                    GeometryOp::Area | GeometryOp::QuarterPatch => unreachable!("guarded by kind()"),
                }
            }
            _ => return Err(self.mismatch(format!("cannot serve `{}`", request.describe()))),
        };
        Ok(ToolOutput {
            tool_id: self.card.tool_id.clone(),
            payload,
            confidence: Confidence::ONE,
            latency_ms: 0,
            provenance: Provenance::Geometry,
        })
    }
}
