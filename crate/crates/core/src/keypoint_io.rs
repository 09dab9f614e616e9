//! OpenPose per-frame JSON parsing and feature extraction.
//!
//! Each OpenPose frame file carries a top-level `"people"` array. For every
//! person we read `"pose_keypoints_2d"` (BODY_25, 75 numbers) and
//! `"face_keypoints_2d"` (70 points, 210 numbers), both flattened as
//! `x, y, c` triples. Everything else in the file is ignored.

use std::path::Path;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

/// Body points in the BODY_25 layout.
pub const POSE_POINTS: usize = 25;
/// Face landmark points.
pub const FACE_POINTS: usize = 70;
/// Total keypoints per person in the strict layout.
pub const TOTAL_POINTS: usize = POSE_POINTS + FACE_POINTS;
/// Length of a [`FeatureVector`] in the strict layout.
pub const FEATURE_DIM: usize = 3 * TOTAL_POINTS;

pub const POSE_KEY: &str = "pose_keypoints_2d";
pub const FACE_KEY: &str = "face_keypoints_2d";

/// BODY_25 index of the neck.
pub const NECK: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("{key}: expected {expected}, got {got}")]
    Length {
        key: String,
        expected: String,
        got: usize,
    },
    #[error("missing key \"{0}\"")]
    MissingKey(String),
    #[error("{key}: {message}")]
    Schema { key: String, message: String },
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
}

/// A single 2D landmark. `c == 0` marks an undetected point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub c: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, c: f64) -> Self {
        Self { x, y, c }
    }

    pub fn detected(&self) -> bool {
        self.c > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonKeypoints {
    pub pose: Vec<Keypoint>,
    pub face: Vec<Keypoint>,
}

impl PersonKeypoints {
    /// A person with every keypoint undetected, in the strict layout.
    pub fn undetected() -> Self {
        Self {
            pose: vec![Keypoint::default(); POSE_POINTS],
            face: vec![Keypoint::default(); FACE_POINTS],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint> {
        self.pose.iter().chain(self.face.iter())
    }

    pub fn len(&self) -> usize {
        self.pose.len() + self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn confidence_sum(&self) -> f64 {
        self.iter().map(|k| k.c).sum()
    }
}

/// Identifies the frame a keypoint file belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: u64,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, frame_index: u64) -> Self {
        Self {
            video_id: video_id.into(),
            frame_index,
        }
    }
}

impl std::fmt::Display for FrameRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.video_id, self.frame_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameKeypoints {
    pub persons: Vec<PersonKeypoints>,
    pub source: FrameRef,
}

/// Controls how strictly keypoint arrays are validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// When false, any array whose length is a multiple of 3 is accepted and
    /// its layout is kept as-is.
    pub strict_layout: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            strict_layout: true,
        }
    }
}

/// Parse one OpenPose frame file with the strict 25 + 70 layout.
pub fn parse_frame(bytes: &[u8], source: FrameRef) -> Result<FrameKeypoints, KeypointError> {
    parse_frame_with(bytes, source, ParseOptions::default())
}

pub fn parse_frame_with(
    bytes: &[u8],
    source: FrameRef,
    opts: ParseOptions,
) -> Result<FrameKeypoints, KeypointError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| KeypointError::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let people = root
        .as_object()
        .ok_or_else(|| KeypointError::Schema {
            key: "<root>".into(),
            message: "expected a JSON object".into(),
        })?
        .get("people")
        .ok_or_else(|| KeypointError::MissingKey("people".into()))?
        .as_array()
        .ok_or_else(|| KeypointError::Schema {
            key: "people".into(),
            message: "expected an array".into(),
        })?;

    let persons = people
        .iter()
        .map(|person| {
            let obj = person.as_object().ok_or_else(|| KeypointError::Schema {
                key: "people".into(),
                message: "entries must be objects".into(),
            })?;
            let pose = read_triples(obj.get(POSE_KEY), POSE_KEY, POSE_POINTS, opts)?;
            let face = read_triples(obj.get(FACE_KEY), FACE_KEY, FACE_POINTS, opts)?;
            Ok(PersonKeypoints { pose, face })
        })
        .collect::<Result<Vec<_>, KeypointError>>()?;

    Ok(FrameKeypoints { persons, source })
}

fn read_triples(
    value: Option<&Value>,
    key: &str,
    points: usize,
    opts: ParseOptions,
) -> Result<Vec<Keypoint>, KeypointError> {
    let arr = value
        .ok_or_else(|| KeypointError::MissingKey(key.to_string()))?
        .as_array()
        .ok_or_else(|| KeypointError::Schema {
            key: key.to_string(),
            message: "expected an array of numbers".into(),
        })?;
    if opts.strict_layout {
        if arr.len() != 3 * points {
            return Err(KeypointError::Length {
                key: key.to_string(),
                expected: (3 * points).to_string(),
                got: arr.len(),
            });
        }
    } else if arr.len() % 3 != 0 {
        return Err(KeypointError::Length {
            key: key.to_string(),
            expected: "a multiple of 3".into(),
            got: arr.len(),
        });
    }

    let mut nums = Vec::with_capacity(arr.len());
    for (i, v) in arr.iter().enumerate() {
        let n = v.as_f64().ok_or_else(|| KeypointError::Schema {
            key: key.to_string(),
            message: format!("element {i} is not a number"),
        })?;
        nums.push(n);
    }
    nums.chunks_exact(3)
        .enumerate()
        .map(|(i, t)| {
            if t[2] < 0.0 {
                Err(KeypointError::Schema {
                    key: key.to_string(),
                    message: format!("keypoint {i} has negative confidence {}", t[2]),
                })
            } else {
                Ok(Keypoint::new(t[0], t[1], t[2]))
            }
        })
        .collect()
}

/// serde_json reports 1-based line/column; convert to a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut line_start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

/// Read and parse a frame file from disk.
pub fn read_frame(path: &Path, source: FrameRef, opts: ParseOptions) -> Result<FrameKeypoints, KeypointError> {
    let bytes = std::fs::read(path).map_err(|e| KeypointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_frame_with(&bytes, source, opts)
}

/// Pick the person with the largest total confidence; earliest index wins ties.
pub fn select_person(frame: &FrameKeypoints) -> Option<&PersonKeypoints> {
    let mut best: Option<(&PersonKeypoints, f64)> = None;
    for p in &frame.persons {
        let s = p.confidence_sum();
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((p, s)),
        }
    }
    best.map(|(p, _)| p)
}

/// Fraction of keypoints with positive confidence.
pub fn validity_ratio(p: &PersonKeypoints) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    p.iter().filter(|k| k.detected()).count() as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationConfig {
    /// Pose index used as the origin.
    pub anchor: usize,
    /// Pixel diagonal used when the bounding box is degenerate or the anchor
    /// is missing.
    pub image_diagonal: f64,
    /// Degenerate-scale threshold, measured as bbox diagonal / image diagonal.
    pub eps: f64,
    /// When false the confidence channel is written as zeros (layout unchanged).
    pub include_confidence: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            anchor: NECK,
            // 1920x1080
            image_diagonal: (1920.0f64 * 1920.0 + 1080.0 * 1080.0).sqrt(),
            eps: 1e-6,
            include_confidence: true,
        }
    }
}

/// Normalized network input for one person.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub validity: f64,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The vector used for a frame with nobody in it.
    pub fn empty_frame() -> Self {
        Self {
            values: vec![0.0; FEATURE_DIM],
            validity: 0.0,
        }
    }
}

/// Anchor-translate and box-diagonal-scale a person's keypoints.
///
/// Undetected keypoints are written as `(0, 0, 0)`.
pub fn to_feature_vector(p: &PersonKeypoints, cfg: &NormalizationConfig) -> FeatureVector {
    let anchor = p.pose.get(cfg.anchor).filter(|k| k.detected());

    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in p.iter().filter(|k| k.detected()) {
        min = (min.0.min(k.x), min.1.min(k.y));
        max = (max.0.max(k.x), max.1.max(k.y));
    }
    let diag = if min.0.is_finite() {
        (max.0 - min.0).hypot(max.1 - min.1)
    } else {
        0.0
    };

    let (origin, scale) = match anchor {
        Some(a) if diag.is_finite() && diag / cfg.image_diagonal >= cfg.eps => ((a.x, a.y), diag),
        Some(a) => ((a.x, a.y), cfg.image_diagonal),
        None => ((0.0, 0.0), cfg.image_diagonal),
    };

    let mut values = Vec::with_capacity(3 * p.len());
    for k in p.iter() {
        if k.detected() {
            let x = (k.x - origin.0) / scale;
            let y = (k.y - origin.1) / scale;
            let c = if cfg.include_confidence { k.c } else { 0.0 };
            // coordinates from a hostile file may overflow
            values.push(if x.is_finite() { x } else { 0.0 });
            values.push(if y.is_finite() { y } else { 0.0 });
            values.push(c);
        } else {
            values.extend_from_slice(&[0.0, 0.0, 0.0]);
        }
    }

    FeatureVector {
        values,
        validity: validity_ratio(p),
    }
}

/// Recovers the frame index from a file name via the first capture group.
#[derive(Debug, Clone)]
pub struct FrameNamePattern {
    re: Regex,
}

impl FrameNamePattern {
    pub const DEFAULT: &'static str = r"(\d+)_keypoints\.json$";

    pub fn new(pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            re: Regex::new(pattern)?,
        })
    }

    pub fn frame_index(&self, file_name: &str) -> Option<u64> {
        self.re
            .captures(file_name)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().parse().ok())
    }
}

impl Default for FrameNamePattern {
    fn default() -> Self {
        Self::new(Self::DEFAULT).expect("default pattern is valid")
    }
}

/// Serialize the keys this module reads back into OpenPose-shaped JSON.
pub fn frame_to_json(frame: &FrameKeypoints) -> Value {
    let flat = |kps: &[Keypoint]| -> Value {
        Value::Array(
            kps.iter()
                .flat_map(|k| [k.x, k.y, k.c])
                .map(Value::from)
                .collect(),
        )
    };
    let people = frame
        .persons
        .iter()
        .map(|p| {
            serde_json::json!({
                POSE_KEY: flat(&p.pose),
                FACE_KEY: flat(&p.face),
            })
        })
        .collect::<Vec<_>>();
    serde_json::json!({ "version": 1.3, "people": people })
}
