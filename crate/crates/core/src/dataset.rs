//! Sample manifests: ingestion from keypoint folders and label files,
//! subsampling, video-level train/val splits and batch iteration.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::emotion::NUM_CLASSES;
use crate::keypoint_io::{read_frame, FeatureVector, FrameNamePattern, FrameRef, ParseOptions};
use crate::nn::DenseMatrix;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no label file for video {0:?}")]
    MissingLabels(String),
    #[error("label file {file}: line {line}: {message}")]
    LabelFormat {
        file: String,
        line: usize,
        message: String,
    },
    #[error("manifest line {line}: {message}")]
    ManifestFormat { line: usize, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Marker written for an absent label.
pub const MISSING: &str = "·";
pub const MANIFEST_HEADER: &str = "video_id\tframe_index\tframe_path\texpr\tvalence\tarousal\tsplit";

const EXPR_SENTINEL: i64 = -1;
const VA_SENTINEL: f64 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelScheme {
    Expr,
    Va,
}

impl LabelScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelScheme::Expr => "EXPR",
            LabelScheme::Va => "VA",
        }
    }
}

impl FromStr for LabelScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "EXPR" => Ok(LabelScheme::Expr),
            "VA" => Ok(LabelScheme::Va),
            _ => Err(format!("unknown label scheme {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Expr(usize),
    Va(f64, f64),
}

/// Per-frame annotations; `None` rows are sentinel (invalid) frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile {
    pub scheme: LabelScheme,
    pub rows: Vec<Option<Label>>,
}

impl LabelFile {
    pub fn parse(text: &str, file: &str) -> Result<Self, DatasetError> {
        let err = |line: usize, message: String| DatasetError::LabelFormat {
            file: file.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let scheme = match lines.next() {
            Some((_, h)) => h.parse::<LabelScheme>().map_err(|m| err(1, m))?,
            None => return Err(err(1, "empty file, expected EXPR or VA header".into())),
        };
        let mut rows = Vec::new();
        let mut pending_blank = None;
        for (n, line) in lines {
            if line.is_empty() {
                pending_blank.get_or_insert(n);
                continue;
            }
            if let Some(b) = pending_blank {
                return Err(err(b, "blank line inside label rows".into()));
            }
            let row = match scheme {
                LabelScheme::Expr => {
                    let v: i64 = line.parse().map_err(|_| err(n, format!("expected an integer, got {line:?}")))?;
                    match v {
                        EXPR_SENTINEL => None,
                        0..=6 => Some(Label::Expr(v as usize)),
                        _ => return Err(err(n, format!("expression label {v} outside {{-1, 0..6}}"))),
                    }
                }
                LabelScheme::Va => {
                    let (v, a) = line
                        .split_once(',')
                        .ok_or_else(|| err(n, format!("expected \"valence,arousal\", got {line:?}")))?;
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| err(n, format!("not a number: {s:?}")))
                    };
                    let (v, a) = (parse(v)?, parse(a)?);
                    if v == VA_SENTINEL || a == VA_SENTINEL {
                        None
                    } else if (-1.0..=1.0).contains(&v) && (-1.0..=1.0).contains(&a) {
                        Some(Label::Va(v, a))
                    } else {
                        return Err(err(n, format!("valence/arousal ({v}, {a}) outside [-1, 1]")));
                    }
                }
            };
            rows.push(row);
        }
        Ok(Self { scheme, rows })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub frame_path: PathBuf,
    pub video_id: String,
    pub frame_index: u64,
    pub expr_label: Option<usize>,
    pub va_label: Option<(f64, f64)>,
    pub split: Split,
}

impl SampleRecord {
    pub fn frame_ref(&self) -> FrameRef {
        FrameRef::new(self.video_id.clone(), self.frame_index)
    }

    fn key(&self) -> (&str, u64) {
        (&self.video_id, self.frame_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestMeta {
    /// Effective frame stride relative to the source videos.
    pub stride: usize,
    pub schemes: BTreeSet<LabelScheme>,
    /// Seed of the train/val split, once assigned.
    pub seed: Option<u64>,
}

impl Default for ManifestMeta {
    fn default() -> Self {
        Self {
            stride: 1,
            schemes: BTreeSet::new(),
            seed: None,
        }
    }
}

/// Records ordered by `(video_id, frame_index)` without duplicates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    pub meta: ManifestMeta,
}

impl Manifest {
    /// Sort records and reject duplicate frames or out-of-range labels.
    pub fn new(mut records: Vec<SampleRecord>, meta: ManifestMeta) -> Result<Self, DatasetError> {
        records.sort_by(|a, b| a.key().cmp(&b.key()));
        if let Some(w) = records.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(DatasetError::Argument(format!(
                "duplicate frame {}/{}",
                w[0].video_id, w[0].frame_index
            )));
        }
        for r in &records {
            check_record(r).map_err(DatasetError::Argument)?;
        }
        Ok(Self { records, meta })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn video_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.video_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_counts(&self) -> (usize, usize) {
        let val = self.records.iter().filter(|r| r.split == Split::Val).count();
        (self.records.len() - val, val)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), DatasetError> {
        let mut out = String::new();
        out.push_str(&format!("# stride={}\n", self.meta.stride));
        let schemes: Vec<&str> = self.meta.schemes.iter().map(|s| s.as_str()).collect();
        out.push_str(&format!("# labels={}\n", schemes.join(",")));
        if let Some(seed) = self.meta.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let path = r.frame_path.to_string_lossy();
            if path.contains(['\t', '\n']) || r.video_id.contains(['\t', '\n']) {
                return Err(DatasetError::Argument(format!(
                    "record {}/{} contains a tab or newline",
                    r.video_id, r.frame_index
                )));
            }
            let expr = r.expr_label.map_or(MISSING.to_string(), |e| e.to_string());
            let (v, a) = r
                .va_label
                .map_or((MISSING.to_string(), MISSING.to_string()), |(v, a)| (v.to_string(), a.to_string()));
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.video_id, r.frame_index, path, expr, v, a, r.split
            ));
        }
        w.write_all(out.as_bytes()).map_err(|source| DatasetError::Io {
            path: "<manifest>".into(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        self.write_to(io::BufWriter::new(f))
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut meta = ManifestMeta::default();
        let mut records = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let err = |message: String| DatasetError::ManifestFormat { line: n, message };
            if !header_seen {
                if let Some(kv) = line.strip_prefix('#') {
                    let (k, v) = kv
                        .trim()
                        .split_once('=')
                        .ok_or_else(|| err(format!("bad metadata line {line:?}")))?;
                    match k {
                        "stride" => meta.stride = v.parse().map_err(|_| err(format!("bad stride {v:?}")))?,
                        "labels" => {
                            for s in v.split(',').filter(|s| !s.is_empty()) {
                                meta.schemes.insert(s.parse().map_err(err)?);
                            }
                        }
                        "seed" => meta.seed = Some(v.parse().map_err(|_| err(format!("bad seed {v:?}")))?),
                        _ => return Err(err(format!("unknown metadata key {k:?}"))),
                    }
                    continue;
                }
                if line != MANIFEST_HEADER {
                    return Err(err("missing header line".into()));
                }
                header_seen = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(err(format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("not a number: {s:?}")));
            let va = match (present(f[4]), present(f[5])) {
                (Some(v), Some(a)) => Some((num(v)?, num(a)?)),
                (None, None) => None,
                _ => return Err(err("valence and arousal must both be present or both missing".into())),
            };
            let record = SampleRecord {
                video_id: f[0].to_string(),
                frame_index: f[1].parse().map_err(|_| err(format!("bad frame index {:?}", f[1])))?,
                frame_path: PathBuf::from(f[2]),
                expr_label: present(f[3])
                    .map(|e| e.parse::<usize>().map_err(|_| err(format!("bad expression label {e:?}"))))
                    .transpose()?,
                va_label: va,
                split: f[6].parse().map_err(err)?,
            };
            check_record(&record).map_err(err)?;
            records.push(record);
        }
        if !header_seen {
            return Err(DatasetError::ManifestFormat {
                line: 1,
                message: "missing header line".into(),
            });
        }
        if records.windows(2).any(|w| w[0].key() >= w[1].key()) {
            return Err(DatasetError::ManifestFormat {
                line: 0,
                message: "records are not sorted by (video_id, frame_index) or contain duplicates".into(),
            });
        }
        Ok(Self { records, meta })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}

fn present(s: &str) -> Option<&str> {
    if s == MISSING {
        None
    } else {
        Some(s)
    }
}

fn check_record(r: &SampleRecord) -> Result<(), String> {
    if r.expr_label.is_none() && r.va_label.is_none() {
        return Err(format!("{}/{} has no label", r.video_id, r.frame_index));
    }
    if let Some(e) = r.expr_label {
        if e >= NUM_CLASSES {
            return Err(format!("expression label {e} outside 0..6"));
        }
    }
    if let Some((v, a)) = r.va_label {
        if !(-1.0..=1.0).contains(&v) || !(-1.0..=1.0).contains(&a) {
            return Err(format!("valence/arousal ({v}, {a}) outside [-1, 1]"));
        }
    }
    Ok(())
}

/// Frames dropped during ingestion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    /// Label row was a sentinel.
    pub sentinel: usize,
    /// The label file had no row for the frame.
    pub unlabeled: usize,
    /// Frame files that could not be read or parsed.
    pub unreadable: Vec<(PathBuf, String)>,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.sentinel + self.unlabeled + self.unreadable.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub pattern: FrameNamePattern,
    pub parse: ParseOptions,
}

/// Scan `root_dir/<video>/` for frame files and join them with
/// `labels_dir/<video>.txt`.
pub fn build_manifest(
    root_dir: &Path,
    labels_dir: &Path,
    opts: &IngestOptions,
) -> Result<(Manifest, SkipReport), DatasetError> {
    let mut videos: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root_dir).map_err(io_err(root_dir))? {
        let entry = entry.map_err(io_err(root_dir))?;
        if entry.path().is_dir() {
            videos.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    videos.sort();

    let mut report = SkipReport::default();
    let mut records = Vec::new();
    let mut meta = ManifestMeta::default();
    for (video, dir) in videos {
        let label_path = labels_dir.join(format!("{video}.txt"));
        if !label_path.is_file() {
            return Err(DatasetError::MissingLabels(video));
        }
        let labels = LabelFile::read(&label_path)?;
        meta.schemes.insert(labels.scheme);

        let mut frames: Vec<(u64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(idx) = opts.pattern.frame_index(&name) {
                frames.push((idx, entry.path()));
            }
        }
        frames.sort();
        frames.dedup_by_key(|f| f.0);

        for (idx, path) in frames {
            let label = match usize::try_from(idx).ok().and_then(|i| labels.rows.get(i)) {
                None => {
                    report.unlabeled += 1;
                    continue;
                }
                Some(None) => {
                    report.sentinel += 1;
                    continue;
                }
                Some(Some(l)) => *l,
            };
            if let Err(e) = read_frame(&path, FrameRef::new(video.clone(), idx), opts.parse) {
                report.unreadable.push((path, e.to_string()));
                continue;
            }
            let (expr_label, va_label) = match label {
                Label::Expr(e) => (Some(e), None),
                Label::Va(v, a) => (None, Some((v, a))),
            };
            records.push(SampleRecord {
                frame_path: path,
                video_id: video.clone(),
                frame_index: idx,
                expr_label,
                va_label,
                split: Split::Train,
            });
        }
    }
    Ok((Manifest::new(records, meta)?, report))
}

/// Keep positions `0, stride, 2*stride, ...` within each video.
pub fn subsample(m: &Manifest, stride: usize) -> Result<Manifest, DatasetError> {
    if stride == 0 {
        return Err(DatasetError::Argument("stride must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(m.len() / stride + 1);
    let mut pos = 0;
    for (i, r) in m.records.iter().enumerate() {
        if i > 0 && m.records[i - 1].video_id != r.video_id {
            pos = 0;
        }
        if pos % stride == 0 {
            records.push(r.clone());
        }
        pos += 1;
    }
    let mut meta = m.meta.clone();
    meta.stride = meta.stride.saturating_mul(stride);
    Ok(Manifest { records, meta })
}

/// Assign whole videos to the validation split by a seeded shuffle of the
/// video ids. The number of validation videos is `round(fraction * videos)`,
/// clamped so both splits are non-empty.
pub fn split_train_val(m: &Manifest, val_fraction: f64, seed: u64) -> Result<Manifest, DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::Argument(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut videos: Vec<String> = m.video_ids().into_iter().map(String::from).collect();
    if videos.len() < 2 {
        return Err(DatasetError::Split(format!(
            "need at least 2 videos, found {}",
            videos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    videos.shuffle(&mut rng);
    let n_val = ((val_fraction * videos.len() as f64).round() as usize).clamp(1, videos.len() - 1);
    let val: BTreeSet<&str> = videos[..n_val].iter().map(String::as_str).collect();

    let records = m
        .records
        .iter()
        .map(|r| SampleRecord {
            split: if val.contains(r.video_id.as_str()) {
                Split::Val
            } else {
                Split::Train
            },
            ..r.clone()
        })
        .collect();
    let mut meta = m.meta.clone();
    meta.seed = Some(seed);
    Ok(Manifest { records, meta })
}

/// Counts of expression labels per class.
pub fn class_histogram(m: &Manifest) -> [usize; NUM_CLASSES] {
    class_histogram_of(m.records.iter())
}

pub fn class_histogram_of<'a>(records: impl Iterator<Item = &'a SampleRecord>) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for r in records {
        if let Some(e) = r.expr_label {
            counts[e] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// `None` keeps manifest order.
    pub shuffle_seed: Option<u64>,
    pub min_validity: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            shuffle_seed: None,
            min_validity: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// One feature vector per row.
    pub inputs: DenseMatrix,
    pub expr: Vec<Option<usize>>,
    pub va: Vec<Option<(f64, f64)>>,
    /// Positions of the samples in the record slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub yielded: usize,
    pub low_validity: usize,
    pub load_errors: usize,
}

impl BatchStats {
    pub fn skipped(&self) -> usize {
        self.low_validity + self.load_errors
    }
}

/// Streams batches of loaded feature vectors for one epoch.
pub struct BatchIter<'a, F> {
    records: &'a [SampleRecord],
    order: Vec<usize>,
    pos: usize,
    cfg: BatchConfig,
    loader: F,
    width: Option<usize>,
    stats: BatchStats,
}

/// Epoch order is a permutation seeded by `(shuffle_seed, epoch)`.
pub fn batch_iter<'a, F, E>(
    records: &'a [SampleRecord],
    cfg: &BatchConfig,
    epoch: u64,
    loader: F,
) -> Result<BatchIter<'a, F>, DatasetError>
where
    F: FnMut(&Path) -> Result<FeatureVector, E>,
{
    if cfg.batch_size == 0 {
        return Err(DatasetError::Argument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(seed) = cfg.shuffle_seed {
        order.shuffle(&mut epoch_rng(seed, epoch));
    }
    Ok(BatchIter {
        records,
        order,
        pos: 0,
        cfg: cfg.clone(),
        loader,
        width: None,
        stats: BatchStats::default(),
    })
}

pub(crate) fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

impl<F> BatchIter<'_, F> {
    pub fn stats(&self) -> BatchStats {
        self.stats
    }
}

impl<F, E> Iterator for BatchIter<'_, F>
where
    F: FnMut(&Path) -> Result<FeatureVector, E>,
{
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.batch_size);
        let mut indices = Vec::with_capacity(self.cfg.batch_size);
        while rows.len() < self.cfg.batch_size && self.pos < self.order.len() {
            let idx = self.order[self.pos];
            self.pos += 1;
            let record = &self.records[idx];
            let fv = match (self.loader)(&record.frame_path) {
                Ok(fv) => fv,
                Err(_) => {
                    self.stats.load_errors += 1;
                    continue;
                }
            };
            if fv.values.is_empty() || *self.width.get_or_insert(fv.values.len()) != fv.values.len() {
                self.stats.load_errors += 1;
                continue;
            }
            if fv.validity < self.cfg.min_validity {
                self.stats.low_validity += 1;
                continue;
            }
            rows.push(fv.values);
            indices.push(idx);
        }
        if rows.is_empty() {
            return None;
        }
        self.stats.yielded += rows.len();
        let inputs = DenseMatrix::from_rows(&rows).expect("rows share one width");
        Some(Batch {
            expr: indices.iter().map(|&i| self.records[i].expr_label).collect(),
            va: indices.iter().map(|&i| self.records[i].va_label).collect(),
            inputs,
            indices,
        })
    }
}
