//! Discrete emotion classes and their relation to valence/arousal space.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmotionError {
    #[error("emotion label {0} outside 1..=7")]
    RawLabel(i64),
    #[error("emotion code {0} outside 0..=6")]
    Code(i64),
    #[error("unknown emotion name {0:?}")]
    Name(String),
    #[error("valence/arousal ({0}, {1}) outside [-1, 1]")]
    OutOfRange(f64, f64),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
}

/// The seven basic emotions, numbered by internal code 0..=6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionClass {
    Happiness = 0,
    Sadness = 1,
    Neutral = 2,
    Anger = 3,
    Surprise = 4,
    Disgust = 5,
    Fear = 6,
}

pub const NUM_CLASSES: usize = 7;

impl EmotionClass {
    pub const ALL: [EmotionClass; NUM_CLASSES] = [
        EmotionClass::Happiness,
        EmotionClass::Sadness,
        EmotionClass::Neutral,
        EmotionClass::Anger,
        EmotionClass::Surprise,
        EmotionClass::Disgust,
        EmotionClass::Fear,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self, EmotionError> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or(EmotionError::Code(code as i64))
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Happiness => "happiness",
            EmotionClass::Sadness => "sadness",
            EmotionClass::Neutral => "neutral",
            EmotionClass::Anger => "anger",
            EmotionClass::Surprise => "surprise",
            EmotionClass::Disgust => "disgust",
            EmotionClass::Fear => "fear",
        }
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = EmotionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| EmotionError::Name(s.to_string()))
    }
}

/// Map the 1-based annotation numbering (1 = happiness ... 7 = fear) to a class.
pub fn remap_label(raw: i64) -> Result<EmotionClass, EmotionError> {
    if !(1..=7).contains(&raw) {
        return Err(EmotionError::RawLabel(raw));
    }
    EmotionClass::from_code((raw - 1) as usize)
}

/// Nearest-prototype partition of the valence/arousal square.
#[derive(Debug, Clone, PartialEq)]
pub struct VaThresholds {
    pub neutral_radius: f64,
    /// (valence, arousal) per class, indexed by code.
    pub prototypes: [(f64, f64); NUM_CLASSES],
}

impl Default for VaThresholds {
    fn default() -> Self {
        Self {
            neutral_radius: 0.15,
            prototypes: [
                (0.8, 0.5),   // happiness
                (-0.7, -0.4), // sadness
                (0.0, 0.0),   // neutral
                (-0.6, 0.7),  // anger
                (0.3, 0.8),   // surprise
                (-0.7, 0.3),  // disgust
                (-0.6, 0.8),  // fear
            ],
        }
    }
}

impl VaThresholds {
    pub fn validate(&self) -> Result<(), EmotionError> {
        if self.neutral_radius.is_nan() || self.neutral_radius <= 0.0 {
            return Err(EmotionError::Thresholds("neutral_radius must be > 0".into()));
        }
        if self.prototypes[EmotionClass::Neutral.code()] != (0.0, 0.0) {
            return Err(EmotionError::Thresholds(
                "neutral prototype must be (0, 0)".into(),
            ));
        }
        for (i, &(v, a)) in self.prototypes.iter().enumerate() {
            if !in_unit(v) || !in_unit(a) {
                return Err(EmotionError::Thresholds(format!(
                    "{} prototype ({v}, {a}) outside [-1, 1]",
                    EmotionClass::ALL[i]
                )));
            }
            for &other in &self.prototypes[..i] {
                if other == (v, a) {
                    return Err(EmotionError::Thresholds(format!(
                        "duplicate prototype ({v}, {a})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn in_unit(x: f64) -> bool {
    (-1.0..=1.0).contains(&x)
}

pub fn va_to_class(valence: f64, arousal: f64, t: &VaThresholds) -> Result<EmotionClass, EmotionError> {
    if !in_unit(valence) || !in_unit(arousal) {
        return Err(EmotionError::OutOfRange(valence, arousal));
    }
    if valence.hypot(arousal) < t.neutral_radius {
        return Ok(EmotionClass::Neutral);
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &(pv, pa)) in t.prototypes.iter().enumerate() {
        let d = (valence - pv).hypot(arousal - pa);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    EmotionClass::from_code(best)
}
