use std::f64::consts::PI;

use super::{CadError, Result, Slot, NUM_LEVELS, NUM_PARAMS};

const TOP: f64 = (NUM_LEVELS - 1) as f64;
/// Fraction of the range a value may overshoot before it is rejected.
const RANGE_TOLERANCE: f64 = 0.01;

/// Continuous range of a slot, or a pass-through integer slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamRange {
    Continuous { lo: f64, hi: f64 },
    Discrete { max: i64 },
}

impl ParamRange {
    /// Width of one quantization step, zero for discrete slots.
    pub fn step(&self) -> f64 {
        match *self {
            ParamRange::Continuous { lo, hi } => (hi - lo) / TOP,
            ParamRange::Discrete { .. } => 0.0,
        }
    }
}

/// Per-slot quantization ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRangeTable {
    ranges: [ParamRange; NUM_PARAMS],
}

impl Default for ParamRangeTable {
    fn default() -> Self {
        use ParamRange::*;
        let unit = Continuous { lo: 0.0, hi: 1.0 };
        let signed = Continuous { lo: -1.0, hi: 1.0 };
        let half_turn = Continuous { lo: -PI, hi: PI };
        ParamRangeTable {
            ranges: [
                unit,                                // x
                unit,                                // y
                Continuous { lo: 0.0, hi: 2.0 * PI }, // alpha
                Discrete { max: 1 },                 // ccw flag
                unit,                                // r
                Continuous { lo: 0.0, hi: PI },      // theta
                half_turn,                           // phi
                half_turn,                           // gamma
                signed,                              // px
                signed,                              // py
                signed,                              // pz
                Continuous { lo: 0.0, hi: 2.0 },     // s
                signed,                              // e1
                signed,                              // e2
                Discrete { max: 3 },                 // bool
                Discrete { max: 2 },                 // extent
            ],
        }
    }
}

impl ParamRangeTable {
    pub fn range(&self, slot: Slot) -> ParamRange {
        self.ranges[slot.index()]
    }

    pub fn step(&self, slot: Slot) -> f64 {
        self.range(slot).step()
    }

    pub fn quantize(&self, slot: Slot, v: f64) -> Result<i16> {
        if !v.is_finite() {
            return Err(CadError::NonFinite { slot, value: v });
        }
        match self.range(slot) {
            ParamRange::Discrete { max } => {
                let level = v.round();
                if level != v || level < 0.0 || level > max as f64 {
                    return Err(CadError::BadDiscrete { slot, value: v as i64, max });
                }
                Ok(level as i16)
            }
            ParamRange::Continuous { lo, hi } => {
                let slack = RANGE_TOLERANCE * (hi - lo);
                if v < lo - slack || v > hi + slack {
                    return Err(CadError::OutOfRange { slot, value: v, lo, hi });
                }
                let level = ((v - lo) / (hi - lo) * TOP + 0.5).floor();
                Ok(level.clamp(0.0, TOP) as i16)
            }
        }
    }

    pub fn dequantize(&self, slot: Slot, level: i64) -> Result<f64> {
        match self.range(slot) {
            ParamRange::Discrete { max } => {
                if !(0..=max).contains(&level) {
                    return Err(CadError::BadDiscrete { slot, value: level, max });
                }
                Ok(level as f64)
            }
            ParamRange::Continuous { lo, hi } => {
                if !(0..NUM_LEVELS as i64).contains(&level) {
                    return Err(CadError::BadLevel { slot, level });
                }
                Ok(lo + (level as f64 / TOP) * (hi - lo))
            }
        }
    }
}

/// Quantizes `v` with the default range table.
pub fn quantize_param(v: f64, slot: Slot) -> Result<i16> {
    ParamRangeTable::default().quantize(slot, v)
}

/// Dequantizes `level` with the default range table.
pub fn dequantize_param(level: i64, slot: Slot) -> Result<f64> {
    ParamRangeTable::default().dequantize(slot, level)
}
