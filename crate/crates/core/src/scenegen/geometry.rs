use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roomsim::{ArraySpec, Position};

pub const DEFAULT_ROI_ANGLE_DEG: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    InsideRoi,
    Outside,
    /// Mirror image of the ROI across the array axis, which a linear array
    /// cannot tell apart from the ROI itself.
    MirrorForbidden,
}

fn horizontal_offset(array: &ArraySpec, pos: &Position) -> Result<(f64, f64)> {
    let dx = pos[0] - array.center[0];
    let dy = pos[1] - array.center[1];
    if dx.hypot(dy) < 1e-12 {
        return Err(Error::Geometry("position coincides with the array center".into()));
    }
    Ok((dx, dy))
}

/// Unsigned angle in degrees between the broadside and the horizontal
/// direction towards `pos`: 0 straight ahead, 90 along the axis, 180 behind.
pub fn source_angle_deg(array: &ArraySpec, pos: &Position) -> Result<f64> {
    let (dx, dy) = horizontal_offset(array, pos)?;
    let front = dx * array.broadside[0] + dy * array.broadside[1];
    let along = dx * array.axis[0] + dy * array.axis[1];
    Ok(along.abs().atan2(front).to_degrees())
}

pub fn classify_position(array: &ArraySpec, roi_angle_deg: f64, pos: &Position) -> Result<Region> {
    let angle = source_angle_deg(array, pos)?;
    let half = roi_angle_deg / 2.0;
    Ok(if angle < 90.0 && angle <= half {
        Region::InsideRoi
    } else if angle > 90.0 && 180.0 - angle <= half {
        Region::MirrorForbidden
    } else {
        Region::Outside
    })
}
