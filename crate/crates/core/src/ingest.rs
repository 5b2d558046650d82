//! Transaction slotting and derived station features.
//!
//! The operating day runs 06:30-23:00; tap events are binned into half-open
//! 15-minute slots `[start, start + 15min)`, 66 per day. CSV parsing of the
//! transaction feed lives in the companion crate; this module owns the slot
//! arithmetic and the great-circle distance feature.

use alloc::format;

use num_traits::Float;

use crate::error::{CoreError, Result};

/// First operational minute of the day (06:30).
pub const DAY_OPEN_MINUTE: u32 = 6 * 60 + 30;
/// End of service (23:00), exclusive.
pub const DAY_CLOSE_MINUTE: u32 = 23 * 60;
/// Minutes per slot.
pub const SLOT_MINUTES: u32 = 15;

/// Mean earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    In,
    Out,
}

use serde::{Deserialize, Serialize};

impl FlowKind {
    pub fn channel(self) -> usize {
        match self {
            FlowKind::In => 0,
            FlowKind::Out => 1,
        }
    }
}

/// Raw 15-minute slot index for a minute-of-day, or `None` outside the
/// operating hours. Slots are half-open, so 23:00 itself is out of service.
pub fn slot_of_minute(minute_of_day: u32) -> Option<usize> {
    if minute_of_day < DAY_OPEN_MINUTE || minute_of_day >= DAY_CLOSE_MINUTE {
        return None;
    }
    Some(((minute_of_day - DAY_OPEN_MINUTE) / SLOT_MINUTES) as usize)
}

/// Minute-of-day at which a raw slot begins.
pub fn slot_start_minute(slot: usize) -> u32 {
    DAY_OPEN_MINUTE + slot as u32 * SLOT_MINUTES
}

/// Great-circle distance via the spherical law of cosines with coordinates
/// in degrees.
pub fn city_center_distance(lat: f64, lon: f64, lat0: f64, lon0: f64) -> Result<f64> {
    for (value, bound, what) in
        [(lat, 90.0, "latitude"), (lat0, 90.0, "latitude"), (lon, 180.0, "longitude"), (lon0, 180.0, "longitude")]
    {
        if value.abs() > bound || !value.is_finite() {
            return Err(CoreError::Config(format!("{what} {value} outside +/-{bound}")));
        }
    }
    let (phi1, phi2) = (lat.to_radians(), lat0.to_radians());
    let dlon = (lon0 - lon).to_radians();
    let cos_angle = phi2.cos() * phi1.cos() * dlon.cos() + phi1.sin() * phi2.sin();
    // floating point can push the cosine a hair outside [-1, 1]
    Ok(EARTH_RADIUS_KM * cos_angle.clamp(-1.0, 1.0).acos())
}
