//! Preprocessing chain and its exact inverse.
//!
//! Raw tap counts arrive as 66 fifteen-minute slots per operating day. A
//! one-hour rolling sum turns them into 63 slots per day; the model is then
//! trained on min-max-scaled, day-lag differenced, log-transformed values,
//! and every prediction is pushed back through the inverse chain before any
//! metric is computed.
//!
//! Slot indices are global across the aggregated series: slot `t` of day `d`
//! has index `d * 63 + t`, so a lag of 63 is exactly "same slot yesterday".

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use chrono::{Datelike, NaiveDate};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

/// Flow channels per station: inflow then outflow.
pub const CHANNELS: usize = 2;
/// 06:30-23:00 at 15 minutes gives 66 raw slots per day.
pub const RAW_SLOTS_PER_DAY: usize = 66;
/// One-hour rolling aggregation drops the first three slots of each day.
pub const AGG_SLOTS_PER_DAY: usize = 63;
/// Daily seasonality lag in aggregated slots.
pub const SEASONAL_LAG: usize = 63;

/// A station x channel time series stored slot-major:
/// `data[slot * stations * 2 + station * 2 + channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTensor {
    slots: usize,
    stations: usize,
    data: Vec<f64>,
}

impl FlowTensor {
    pub fn zeros(slots: usize, stations: usize) -> Self {
        FlowTensor { slots, stations, data: vec![0.0; slots * stations * CHANNELS] }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn stations(&self) -> usize {
        self.stations
    }

    pub fn columns(&self) -> usize {
        self.stations * CHANNELS
    }

    #[inline]
    pub fn get(&self, slot: usize, station: usize, channel: usize) -> f64 {
        self.data[(slot * self.stations + station) * CHANNELS + channel]
    }

    #[inline]
    pub fn set(&mut self, slot: usize, station: usize, channel: usize, v: f64) {
        self.data[(slot * self.stations + station) * CHANNELS + channel] = v;
    }

    /// One slot as an N x 2 matrix (inflow column 0, outflow column 1).
    pub fn slot_matrix(&self, slot: usize) -> Matrix {
        let base = slot * self.stations * CHANNELS;
        Matrix::from_fn(self.stations, CHANNELS, |r, c| self.data[base + r * CHANNELS + c])
    }

    /// One slot flattened to 1 x (N*2), row-major over stations.
    pub fn slot_row(&self, slot: usize) -> Matrix {
        let base = slot * self.stations * CHANNELS;
        Matrix::from_fn(1, self.stations * CHANNELS, |_, c| self.data[base + c])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Maps global slot indices to calendar dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotCalendar {
    pub dates: Vec<NaiveDate>,
    pub slots_per_day: usize,
}

impl SlotCalendar {
    pub fn new(dates: Vec<NaiveDate>, slots_per_day: usize) -> Self {
        SlotCalendar { dates, slots_per_day }
    }

    pub fn total_slots(&self) -> usize {
        self.dates.len() * self.slots_per_day
    }

    pub fn date_of(&self, slot: usize) -> NaiveDate {
        self.dates[slot / self.slots_per_day]
    }

    /// Global slot index of the first slot of the given date.
    pub fn day_start(&self, date: NaiveDate) -> Option<usize> {
        self.dates.iter().position(|&d| d == date).map(|i| i * self.slots_per_day)
    }
}

/// One-hour rolling sum over 15-minute slots, day by day. Slot `k` of the
/// output (k in 0..63) is the sum of raw slots `k..k+4` of the same day; the
/// first three raw slots of each day have no aggregated value and are
/// dropped.
pub fn rolling_hour(raw: &FlowTensor, calendar: &SlotCalendar) -> Result<(FlowTensor, SlotCalendar)> {
    if calendar.slots_per_day != RAW_SLOTS_PER_DAY {
        return Err(CoreError::Data(format!(
            "rolling aggregation expects {RAW_SLOTS_PER_DAY} raw slots per day, calendar has {}",
            calendar.slots_per_day
        )));
    }
    if raw.slots != calendar.total_slots() {
        return Err(CoreError::Data(format!(
            "series has {} slots but calendar covers {} ({} days x {RAW_SLOTS_PER_DAY})",
            raw.slots,
            calendar.total_slots(),
            calendar.dates.len()
        )));
    }
    let days = calendar.dates.len();
    let mut out = FlowTensor::zeros(days * AGG_SLOTS_PER_DAY, raw.stations);
    for day in 0..days {
        for k in 0..AGG_SLOTS_PER_DAY {
            for st in 0..raw.stations {
                for ch in 0..CHANNELS {
                    let mut acc = 0.0;
                    for off in 0..4 {
                        acc += raw.get(day * RAW_SLOTS_PER_DAY + k + off, st, ch);
                    }
                    out.set(day * AGG_SLOTS_PER_DAY + k, st, ch, acc);
                }
            }
        }
    }
    let cal = SlotCalendar::new(calendar.dates.clone(), AGG_SLOTS_PER_DAY);
    Ok((out, cal))
}

/// y = ln(1 + x); requires x >= 0.
pub fn log_series(x: &FlowTensor) -> Result<FlowTensor> {
    if let Some(bad) = x.data.iter().find(|v| **v < 0.0) {
        return Err(CoreError::Contract(format!(
            "log transform requires nonnegative flows, found {bad}"
        )));
    }
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = v.ln_1p();
    }
    Ok(out)
}

/// Inverse of the log transform for a single value.
pub fn log_inverse(y: f64) -> f64 {
    y.exp_m1()
}

/// z_i = y_{i+lag} - y_i; the output has `slots - lag` entries and its slot 0
/// corresponds to input slot `lag`.
pub fn seasonal_difference(y: &FlowTensor, lag: usize) -> Result<FlowTensor> {
    if y.slots <= lag {
        return Err(CoreError::Contract(format!(
            "seasonal differencing with lag {lag} needs more than {lag} slots, got {}",
            y.slots
        )));
    }
    let mut out = FlowTensor::zeros(y.slots - lag, y.stations);
    for t in 0..out.slots {
        for st in 0..y.stations {
            for ch in 0..CHANNELS {
                out.set(t, st, ch, y.get(t + lag, st, ch) - y.get(t, st, ch));
            }
        }
    }
    Ok(out)
}

/// Per-column (station x channel) min-max scaler. A scaler only exists once
/// fitted, so transform-before-fit is unrepresentable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on slots `[0, end_slot)` only; the caller passes the training
    /// boundary so test data never leaks into the ranges.
    pub fn fit(x: &FlowTensor, end_slot: usize) -> Result<Self> {
        if end_slot == 0 || end_slot > x.slots {
            return Err(CoreError::Contract(format!(
                "scaler fit range [0, {end_slot}) invalid for series of {} slots",
                x.slots
            )));
        }
        let cols = x.columns();
        let mut mins = vec![f64::INFINITY; cols];
        let mut maxs = vec![f64::NEG_INFINITY; cols];
        for slot in 0..end_slot {
            for st in 0..x.stations {
                for ch in 0..CHANNELS {
                    let col = st * CHANNELS + ch;
                    let v = x.get(slot, st, ch);
                    if v < mins[col] {
                        mins[col] = v;
                    }
                    if v > maxs[col] {
                        maxs[col] = v;
                    }
                }
            }
        }
        Ok(MinMaxScaler { mins, maxs })
    }

    pub fn transform_value(&self, col: usize, z: f64) -> f64 {
        let (lo, hi) = (self.mins[col], self.maxs[col]);
        if hi == lo {
            0.5
        } else {
            (z - lo) / (hi - lo)
        }
    }

    pub fn inverse_value(&self, col: usize, u: f64) -> f64 {
        let (lo, hi) = (self.mins[col], self.maxs[col]);
        if hi == lo {
            lo
        } else {
            lo + u * (hi - lo)
        }
    }

    /// Values outside the fitted range map outside [0, 1]; they are not
    /// clipped, so the inverse stays exact.
    pub fn transform(&self, x: &FlowTensor) -> FlowTensor {
        let mut out = x.clone();
        for slot in 0..x.slots {
            for st in 0..x.stations {
                for ch in 0..CHANNELS {
                    let col = st * CHANNELS + ch;
                    out.set(slot, st, ch, self.transform_value(col, x.get(slot, st, ch)));
                }
            }
        }
        out
    }
}

/// Which transforms sit between aggregated flows and model space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub log: bool,
    pub diff: bool,
    pub lag: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { log: true, diff: true, lag: SEASONAL_LAG }
    }
}

impl PreprocessSpec {
    pub fn disabled() -> Self {
        PreprocessSpec { log: false, diff: false, lag: SEASONAL_LAG }
    }
}

/// The fully transformed series plus everything the inverse chain needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedSeries {
    /// Model-space series; its slot 0 corresponds to global slot `offset`.
    pub scaled: FlowTensor,
    pub offset: usize,
    pub scaler: MinMaxScaler,
    pub spec: PreprocessSpec,
    /// Pre-differencing series (log space when log is on); lag references
    /// for the inverse come from here.
    base: FlowTensor,
}

impl PreparedSeries {
    /// Value at a global aggregated slot, in model space.
    pub fn scaled_at(&self, global_slot: usize, station: usize, channel: usize) -> f64 {
        self.scaled.get(global_slot - self.offset, station, channel)
    }

    pub fn first_slot(&self) -> usize {
        self.offset
    }

    pub fn last_slot_exclusive(&self) -> usize {
        self.offset + self.scaled.slots()
    }
}

/// Runs the forward chain over the aggregated series. `train_end_slot` is
/// the first global slot of the test span; the scaler sees only data before
/// it.
pub fn prepare_series(
    agg: &FlowTensor,
    spec: PreprocessSpec,
    train_end_slot: usize,
) -> Result<PreparedSeries> {
    let base = if spec.log { log_series(agg)? } else { agg.clone() };
    let (model_space, offset) = if spec.diff {
        (seasonal_difference(&base, spec.lag)?, spec.lag)
    } else {
        (base.clone(), 0)
    };
    if train_end_slot <= offset || train_end_slot > agg.slots() {
        return Err(CoreError::Contract(format!(
            "train/test split slot {train_end_slot} outside usable range ({}, {}]",
            offset,
            agg.slots()
        )));
    }
    let scaler = MinMaxScaler::fit(&model_space, train_end_slot - offset)?;
    let scaled = scaler.transform(&model_space);
    Ok(PreparedSeries { scaled, offset, scaler, spec, base })
}

/// Inverse chain for one predicted value at a global aggregated slot:
/// min-max inverse, add back the lag reference, undo the log, clamp at 0.
pub fn inverse_value(
    prep: &PreparedSeries,
    global_slot: usize,
    station: usize,
    channel: usize,
    u: f64,
) -> Result<f64> {
    let col = station * CHANNELS + channel;
    let z = prep.scaler.inverse_value(col, u);
    let y = if prep.spec.diff {
        if global_slot < prep.spec.lag {
            return Err(CoreError::Contract(format!(
                "inverse differencing at slot {global_slot} needs history slot {} before series start",
                global_slot as i64 - prep.spec.lag as i64
            )));
        }
        z + prep.base.get(global_slot - prep.spec.lag, station, channel)
    } else {
        z
    };
    let flow = if prep.spec.log { log_inverse(y) } else { y };
    Ok(flow.max(0.0))
}

/// Day-of-week (Monday = 1 .. Sunday = 7) and holiday flag per global slot.
pub fn encode_exogenous(
    calendar: &SlotCalendar,
    holidays: &BTreeSet<NaiveDate>,
) -> Vec<(u8, bool)> {
    (0..calendar.total_slots())
        .map(|slot| {
            let date = calendar.date_of(slot);
            let dow = date.weekday().number_from_monday() as u8;
            (dow, holidays.contains(&date))
        })
        .collect()
}

/// Sliding windows over the usable series. Anchors are global slot indices
/// of the first target slot: inputs occupy `T-l..T`, targets `T..T+p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub l: usize,
    pub p: usize,
}

/// `series_start` is the first global slot with a model-space value,
/// `min_input_slot` the first slot for which per-slot graphs can exist.
/// Training windows end strictly before `split_slot`; test targets start at
/// or after it. Windows straddling the split are dropped.
pub fn make_windows(
    series_start: usize,
    total_slots: usize,
    l: usize,
    p: usize,
    split_slot: usize,
    min_input_slot: usize,
) -> Result<WindowPlan> {
    if l == 0 || p == 0 {
        return Err(CoreError::Config("window sizes l and p must be positive".into()));
    }
    let first_anchor = series_start.max(min_input_slot) + l;
    if first_anchor + p > total_slots {
        return Err(CoreError::Contract(format!(
            "series too short: need at least {} usable slots for l={l}, p={p}",
            l + p
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for anchor in first_anchor..=(total_slots - p) {
        if anchor + p <= split_slot {
            train.push(anchor);
        } else if anchor >= split_slot {
            test.push(anchor);
        }
    }
    Ok(WindowPlan { train, test, l, p })
}
