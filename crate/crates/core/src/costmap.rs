//! Traversability cost-maps: per-instance ratings painted back onto the
//! segmentation masks.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::mask::is_foreground;
use crate::parser::FailureReason;
use crate::rating::TraversabilityRating;

/// Cost written for non-navigable terrain and for instances whose prediction failed.
pub const FORBIDDEN_COST: u8 = 255;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostMapError {
    #[error("instance {instance_id}: mask is {mask:?}, expected {expected:?}")]
    DimensionMismatch {
        instance_id: String,
        mask: (u32, u32),
        expected: (u32, u32),
    },
    #[error("image is {image:?} but cost-map is {costmap:?}")]
    OverlayMismatch { image: (u32, u32), costmap: (u32, u32) },
    #[error("invalid cost mapping: {0}")]
    InvalidMapping(String),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("png encoding: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostMapping {
    /// Cost for ratings 1..=4, indexed by `rating - 1`.
    pub costs: [u8; 4],
    /// Cost of pixels that belong to no rated instance.
    pub unassigned: u8,
}

impl Default for CostMapping {
    fn default() -> Self {
        CostMapping {
            costs: [0, 85, 170, FORBIDDEN_COST],
            unassigned: 0,
        }
    }
}

impl CostMapping {
    pub fn new(costs: [u8; 4], unassigned: u8) -> Result<Self, CostMapError> {
        let m = CostMapping { costs, unassigned };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CostMapError> {
        if !self.costs.windows(2).all(|w| w[0] < w[1]) {
            return Err(CostMapError::InvalidMapping(format!(
                "costs {:?} are not strictly increasing",
                self.costs
            )));
        }
        if self.costs[3] != FORBIDDEN_COST {
            return Err(CostMapError::InvalidMapping(format!(
                "rating 4 must cost {FORBIDDEN_COST}, got {}",
                self.costs[3]
            )));
        }
        Ok(())
    }

    pub fn cost(&self, rating: TraversabilityRating) -> u8 {
        self.costs[rating.index()]
    }
}

/// Prediction outcome for one instance as far as the cost-map cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceOutcome {
    Rated(TraversabilityRating),
    Failed(FailureReason),
    /// No model answer at all (the request itself failed).
    Missing,
}

pub struct CostInput<'a> {
    pub instance_id: &'a str,
    pub mask: &'a GrayImage,
    pub outcome: InstanceOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceProvenance {
    pub instance_id: String,
    pub rating: Option<TraversabilityRating>,
    pub failure: Option<FailureReason>,
    pub cost: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub costs: GrayImage,
    /// Row-major flags: pixel lies under at least one instance.
    pub covered: Vec<bool>,
    pub mapping: CostMapping,
    pub instances: Vec<InstanceProvenance>,
}

impl CostMap {
    pub fn width(&self) -> u32 {
        self.costs.width()
    }

    pub fn height(&self) -> u32 {
        self.costs.height()
    }

    pub fn is_covered(&self, x: u32, y: u32) -> bool {
        self.covered[(y * self.width() + x) as usize]
    }

    pub fn to_png(&self) -> Result<Vec<u8>, CostMapError> {
        encode_png(|buf| self.costs.write_to(buf, ImageFormat::Png))
    }

    pub fn sidecar(&self, image_id: &str, run_id: &str) -> CostMapSidecar {
        CostMapSidecar {
            image_id: image_id.to_string(),
            run_id: run_id.to_string(),
            width: self.width(),
            height: self.height(),
            mapping: self.mapping,
            instances: self.instances.clone(),
        }
    }
}

/// JSON written next to each cost-map PNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMapSidecar {
    pub image_id: String,
    pub run_id: String,
    pub width: u32,
    pub height: u32,
    pub mapping: CostMapping,
    pub instances: Vec<InstanceProvenance>,
}

fn encode_png(
    write: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>,
) -> Result<Vec<u8>, CostMapError> {
    let mut buf = Cursor::new(Vec::new());
    write(&mut buf).map_err(|e| CostMapError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn rgb_to_png(image: &RgbImage) -> Result<Vec<u8>, CostMapError> {
    encode_png(|buf| image.write_to(buf, ImageFormat::Png))
}

/// Paint each instance's cost onto its mask. Failed or missing predictions
/// cost [`FORBIDDEN_COST`]; where instances overlap the highest cost wins; every
/// other pixel gets `mapping.unassigned`.
pub fn build_costmap(
    instances: &[CostInput<'_>],
    width: u32,
    height: u32,
    mapping: &CostMapping,
) -> Result<CostMap, CostMapError> {
    mapping.validate()?;
    let mut painted: Vec<Option<u8>> = vec![None; (width as usize) * (height as usize)];
    let mut provenance = Vec::with_capacity(instances.len());
    for input in instances {
        if input.mask.dimensions() != (width, height) {
            return Err(CostMapError::DimensionMismatch {
                instance_id: input.instance_id.to_string(),
                mask: input.mask.dimensions(),
                expected: (width, height),
            });
        }
        let (cost, rating, failure) = match input.outcome {
            InstanceOutcome::Rated(r) => (mapping.cost(r), Some(r), None),
            InstanceOutcome::Failed(reason) => (FORBIDDEN_COST, None, Some(reason)),
            InstanceOutcome::Missing => (FORBIDDEN_COST, None, None),
        };
        for (x, y, p) in input.mask.enumerate_pixels() {
            if is_foreground(p.0[0]) {
                let slot = &mut painted[(y * width + x) as usize];
                *slot = Some(slot.map_or(cost, |c| c.max(cost)));
            }
        }
        provenance.push(InstanceProvenance {
            instance_id: input.instance_id.to_string(),
            rating,
            failure,
            cost,
        });
    }
    provenance.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let costs = GrayImage::from_fn(width, height, |x, y| {
        Luma([painted[(y * width + x) as usize].unwrap_or(mapping.unassigned)])
    });
    Ok(CostMap {
        costs,
        covered: painted.iter().map(Option::is_some).collect(),
        mapping: *mapping,
        instances: provenance,
    })
}

/// Green (cost 0) through yellow to red (cost 255).
pub fn ramp_color(cost: u8) -> Rgb<u8> {
    let c = cost as u32;
    if c <= 127 {
        Rgb([(c * 255 / 127) as u8, 255, 0])
    } else {
        Rgb([255, (255 - (c - 127) * 255 / 128) as u8, 0])
    }
}

/// Alpha-blend the cost ramp over covered pixels of `image`.
pub fn render_overlay(
    image: &RgbImage,
    costmap: &CostMap,
    alpha: f64,
) -> Result<RgbImage, CostMapError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CostMapError::InvalidAlpha(alpha));
    }
    if image.dimensions() != costmap.costs.dimensions() {
        return Err(CostMapError::OverlayMismatch {
            image: image.dimensions(),
            costmap: costmap.costs.dimensions(),
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if !costmap.is_covered(x, y) {
            continue;
        }
        let color = ramp_color(costmap.costs.get_pixel(x, y).0[0]);
        for (c, target) in px.0.iter_mut().zip(color.0) {
            let blended = (1.0 - alpha) * *c as f64 + alpha * target as f64;
            *c = blended.round() as u8;
        }
    }
    Ok(out)
}
