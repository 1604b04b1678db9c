//! File formats: dataset JSON, assignment/detection/curve CSVs, PGM
//! heatmaps, and the tool configuration.
//!
//! Every writer goes through an atomic same-directory temp-file-plus-rename,
//! so a crash mid-write never leaves a truncated file behind. Floats are
//! written as `{:.16e}` (17 significant digits), which round-trips every
//! `f64` bit-exactly through `str::parse`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assigner::{
    AssignerConfig, AssignmentTable, LevelAssignment, LocationTarget, MatchedGt,
};
use crate::geometry::{BBox, Ltrb, Point};
use crate::inference::{decode_box, Detection, NmsConfig};
use crate::losses::{GPartCurves, LossParams};
use crate::simulator::{SceneSpec, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {reason}")]
    Json { path: PathBuf, reason: String },
    #[error("invalid config `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },
    #[error("image {id}: {reason}")]
    InvalidImage { id: u64, reason: String },
    #[error("annotation {annotation}: {reason}")]
    InvalidAnnotation { annotation: u64, reason: String },
    #[error("annotation {annotation} references unknown image {image_id}")]
    DanglingAnnotation { annotation: u64, image_id: u64 },
    #[error("{path}:{line}: {reason}")]
    Csv {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("heatmap value {value} at index {index} lies outside [0, 1]")]
    HeatmapRange { index: usize, value: f64 },
    #[error("heatmap of {width}x{height} needs {expected} values, got {got}")]
    HeatmapSize {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("detection {index} carries no quality score but the quality column was requested")]
    MissingQuality { index: usize },
    #[error("inconsistent data: {reason}")]
    InvalidData { reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` atomically: the data lands in a temp file in the
/// same directory and is renamed over the target, so readers never observe a
/// partial file. The parent directory must already exist.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Serializes `value` as pretty-printed JSON (with a trailing newline) and
/// writes it atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| DataError::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

/// Lossless float cell: 17 significant digits in scientific notation.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// One image of a dataset with its decoded ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// `(box, category id)` pairs in annotation file order.
    pub gt_boxes: Vec<(BBox, u32)>,
}

#[derive(Debug, Deserialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    /// `[x, y, width, height]` in pixels.
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
}

/// Loads a dataset in the common detection-JSON layout: an `images` array
/// (`id`, `width`, `height`, optional `file_name`) and an `annotations`
/// array (`id`, `image_id`, `category_id`, `bbox` as `[x, y, w, h]`).
/// Unknown fields are ignored. Images keep their file order; every
/// annotation must reference an existing image and describe a box of
/// non-negative extent inside finite coordinates.
pub fn load_dataset(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let raw: RawDataset = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let mut records: Vec<ImageRecord> = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        if img.width == 0 || img.height == 0 {
            return Err(DataError::InvalidImage {
                id: img.id,
                reason: format!(
                    "dimensions must be positive, got {}x{}",
                    img.width, img.height
                ),
            });
        }
        records.push(ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            gt_boxes: Vec::new(),
        });
    }

    for ann in &raw.annotations {
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| DataError::InvalidAnnotation {
            annotation: ann.id,
            reason: e.to_string(),
        })?;
        let record = records.iter_mut().find(|r| r.id == ann.image_id).ok_or(
            DataError::DanglingAnnotation {
                annotation: ann.id,
                image_id: ann.image_id,
            },
        )?;
        record.gt_boxes.push((bbox, ann.category_id));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Assignment CSV
// ---------------------------------------------------------------------------

const ASSIGNMENT_HEADER: &str =
    "level,row,col,img_x,img_y,gt_index,class,head_s,centerness_s,label_s,label_d,l,t,r,b";

/// Writes one row per grid location in canonical order (levels in order,
/// row-major within each level). Unmatched locations leave the ground-truth
/// columns (`gt_index`, `class`, `l`, `t`, `r`, `b`) empty.
pub fn write_assignments_csv(path: &Path, table: &AssignmentTable) -> Result<(), DataError> {
    let mut out = String::with_capacity(64 * (table.len() + 1));
    out.push_str(ASSIGNMENT_HEADER);
    out.push('\n');
    for t in table.locations() {
        let _ = write!(
            out,
            "{},{},{},{},{},",
            t.level,
            t.row,
            t.col,
            fmt_f64(t.location.x),
            fmt_f64(t.location.y)
        );
        match &t.matched {
            Some(m) => {
                let _ = write!(out, "{},{},", m.gt_index, m.class_id);
            }
            None => out.push_str(",,"),
        }
        let _ = write!(
            out,
            "{},{},{},{},",
            fmt_f64(t.head_s),
            fmt_f64(t.centerness_s),
            fmt_f64(t.label_s),
            fmt_f64(t.label_d)
        );
        match &t.matched {
            Some(m) => {
                let r = m.regression;
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_f64(r.l),
                    fmt_f64(r.t),
                    fmt_f64(r.r),
                    fmt_f64(r.b)
                );
            }
            None => out.push_str(",,,\n"),
        }
    }
    write_atomic(path, out.as_bytes())
}

struct CsvRow<'a> {
    path: &'a Path,
    line: usize,
    fields: Vec<&'a str>,
}

impl<'a> CsvRow<'a> {
    fn err(&self, reason: String) -> DataError {
        DataError::Csv {
            path: self.path.to_path_buf(),
            line: self.line,
            reason,
        }
    }

    fn parse<T: std::str::FromStr>(&self, idx: usize, name: &str) -> Result<T, DataError> {
        self.fields[idx]
            .parse()
            .map_err(|_| self.err(format!("cannot parse {name} from `{}`", self.fields[idx])))
    }

    fn parse_opt<T: std::str::FromStr>(
        &self,
        idx: usize,
        name: &str,
    ) -> Result<Option<T>, DataError> {
        if self.fields[idx].is_empty() {
            Ok(None)
        } else {
            self.parse(idx, name).map(Some)
        }
    }
}

/// Splits CSV text into rows, validates the header, and hands back the data
/// rows with line numbers (1-based, header is line 1).
fn csv_rows<'a>(
    path: &'a Path,
    text: &'a str,
    expected_headers: &[&str],
) -> Result<(usize, Vec<CsvRow<'a>>), DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Csv {
        path: path.to_path_buf(),
        line: 1,
        reason: "file is empty, expected a header row".into(),
    })?;
    let header_idx = expected_headers
        .iter()
        .position(|h| *h == header)
        .ok_or_else(|| DataError::Csv {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("unexpected header `{header}`"),
        })?;
    let ncols = expected_headers[header_idx].split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(DataError::Csv {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected {ncols} fields, got {}", fields.len()),
            });
        }
        rows.push(CsvRow {
            path,
            line: i + 1,
            fields,
        });
    }
    Ok((header_idx, rows))
}

/// Reads an assignment CSV back into a dense [`AssignmentTable`].
///
/// Grid shapes are reconstructed from the data: each level spans
/// `(max row + 1) x (max col + 1)` cells and its stride is twice the `img_x`
/// of its column-0 cells. Every cell must appear exactly once.
pub fn read_assignments_csv(path: &Path) -> Result<AssignmentTable, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (_, rows) = csv_rows(path, &text, &[ASSIGNMENT_HEADER])?;

    let mut targets: Vec<(usize, LocationTarget)> = Vec::with_capacity(rows.len());
    let mut nlevels = 0usize;
    for row in &rows {
        let level: usize = row.parse(0, "level")?;
        let grid_row: usize = row.parse(1, "row")?;
        let grid_col: usize = row.parse(2, "col")?;
        let img_x: f64 = row.parse(3, "img_x")?;
        let img_y: f64 = row.parse(4, "img_y")?;
        let gt_index: Option<usize> = row.parse_opt(5, "gt_index")?;
        let class_id: Option<u32> = row.parse_opt(6, "class")?;
        let head_s: f64 = row.parse(7, "head_s")?;
        let centerness_s: f64 = row.parse(8, "centerness_s")?;
        let label_s: f64 = row.parse(9, "label_s")?;
        let label_d: f64 = row.parse(10, "label_d")?;
        let l: Option<f64> = row.parse_opt(11, "l")?;
        let t: Option<f64> = row.parse_opt(12, "t")?;
        let r: Option<f64> = row.parse_opt(13, "r")?;
        let b: Option<f64> = row.parse_opt(14, "b")?;

        let matched = match (gt_index, class_id, l, t, r, b) {
            (Some(gt_index), Some(class_id), Some(l), Some(t), Some(r), Some(b)) => {
                Some(MatchedGt {
                    gt_index,
                    class_id,
                    regression: Ltrb::new(l, t, r, b),
                })
            }
            (None, None, None, None, None, None) => None,
            _ => return Err(row.err(
                "ground-truth columns (gt_index, class, l, t, r, b) must be all set or all empty"
                    .into(),
            )),
        };
        nlevels = nlevels.max(level + 1);
        targets.push((
            row.line,
            LocationTarget {
                level,
                row: grid_row,
                col: grid_col,
                location: Point::new(img_x, img_y),
                matched,
                head_s,
                centerness_s,
                label_s,
                label_d,
            },
        ));
    }

    let mut levels = Vec::with_capacity(nlevels);
    for level in 0..nlevels {
        let of_level: Vec<&(usize, LocationTarget)> =
            targets.iter().filter(|(_, t)| t.level == level).collect();
        if of_level.is_empty() {
            return Err(DataError::InvalidData {
                reason: format!("level {level} has no rows; level indices must be contiguous"),
            });
        }
        let nrows = 1 + of_level.iter().map(|(_, t)| t.row).max().unwrap();
        let ncols = 1 + of_level.iter().map(|(_, t)| t.col).max().unwrap();
        let mut cells: Vec<Option<LocationTarget>> = vec![None; nrows * ncols];
        let mut stride = 0u32;
        for (line, t) in of_level {
            let idx = t.row * ncols + t.col;
            if cells[idx].is_some() {
                return Err(DataError::Csv {
                    path: path.to_path_buf(),
                    line: *line,
                    reason: format!(
                        "duplicate cell (level {level}, row {}, col {})",
                        t.row, t.col
                    ),
                });
            }
            if t.col == 0 {
                stride = (2.0 * t.location.x).round() as u32;
            }
            cells[idx] = Some(t.clone());
        }
        if stride == 0 {
            return Err(DataError::InvalidData {
                reason: format!("level {level}: cannot infer a positive stride from column 0"),
            });
        }
        let mut level_targets = Vec::with_capacity(nrows * ncols);
        for (idx, cell) in cells.into_iter().enumerate() {
            level_targets.push(cell.ok_or_else(|| DataError::InvalidData {
                reason: format!(
                    "level {level} is missing cell (row {}, col {})",
                    idx / ncols,
                    idx % ncols
                ),
            })?);
        }
        levels.push(LevelAssignment {
            level,
            stride,
            ncols,
            nrows,
            targets: level_targets,
        });
    }
    Ok(AssignmentTable { levels })
}

// ---------------------------------------------------------------------------
// Detection CSV
// ---------------------------------------------------------------------------

const DETECTION_HEADER: &str = "class,score,x1,y1,x2,y2,level,row,col";
const DETECTION_HEADER_Q: &str = "class,score,x1,y1,x2,y2,level,row,col,quality";

/// Writes detections, one per row. With `include_quality` the file gains a
/// `quality` column and every detection must carry one; without it the
/// column is omitted entirely.
pub fn write_detections_csv(
    path: &Path,
    detections: &[Detection],
    include_quality: bool,
) -> Result<(), DataError> {
    let mut out = String::with_capacity(64 * (detections.len() + 1));
    out.push_str(if include_quality {
        DETECTION_HEADER_Q
    } else {
        DETECTION_HEADER
    });
    out.push('\n');
    for (index, d) in detections.iter().enumerate() {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            d.class_id,
            fmt_f64(d.score),
            fmt_f64(d.bbox.x1),
            fmt_f64(d.bbox.y1),
            fmt_f64(d.bbox.x2),
            fmt_f64(d.bbox.y2),
            d.level,
            d.row,
            d.col
        );
        if include_quality {
            let q = d.quality.ok_or(DataError::MissingQuality { index })?;
            let _ = write!(out, ",{}", fmt_f64(q));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a detection CSV; the `quality` column is optional and its absence
/// leaves [`Detection::quality`] as `None`.
pub fn read_detections_csv(path: &Path) -> Result<Vec<Detection>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let (header_idx, rows) = csv_rows(path, &text, &[DETECTION_HEADER, DETECTION_HEADER_Q])?;
    let has_quality = header_idx == 1;
    let mut detections = Vec::with_capacity(rows.len());
    for row in rows {
        let class_id: u32 = row.parse(0, "class")?;
        let score: f64 = row.parse(1, "score")?;
        let x1: f64 = row.parse(2, "x1")?;
        let y1: f64 = row.parse(3, "y1")?;
        let x2: f64 = row.parse(4, "x2")?;
        let y2: f64 = row.parse(5, "y2")?;
        let level: usize = row.parse(6, "level")?;
        let grid_row: usize = row.parse(7, "row")?;
        let col: usize = row.parse(8, "col")?;
        let quality: Option<f64> = if has_quality {
            row.parse_opt(9, "quality")?
        } else {
            None
        };
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| row.err(e.to_string()))?;
        detections.push(Detection {
            bbox,
            class_id,
            score,
            quality,
            level,
            row: grid_row,
            col,
        });
    }
    Ok(detections)
}

// ---------------------------------------------------------------------------
// Gradient curve CSV
// ---------------------------------------------------------------------------

/// Writes gradient curves with one row per grid probability: the two focal
/// columns followed by one `g_gfl_y=<value>` column per soft target.
pub fn write_curves_csv(path: &Path, curves: &GPartCurves) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("p,g_a,g_b");
    for y in &curves.y_values {
        let _ = write!(out, ",g_gfl_y={y}");
    }
    out.push('\n');
    for point in &curves.points {
        let _ = write!(
            out,
            "{},{},{}",
            fmt_f64(point.p),
            fmt_f64(point.g_a),
            fmt_f64(point.g_b)
        );
        for g in &point.g_gfl {
            let _ = write!(out, ",{}", fmt_f64(*g));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// PGM heatmap
// ---------------------------------------------------------------------------

/// Writes a binary (P5) PGM image from row-major values in `[0, 1]`, mapped
/// to gray levels by `round(255 * v)`.
pub fn write_heatmap(
    path: &Path,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<(), DataError> {
    if values.len() != width * height {
        return Err(DataError::HeatmapSize {
            width,
            height,
            expected: width * height,
            got: values.len(),
        });
    }
    for (index, &value) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(DataError::HeatmapRange { index, value });
        }
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v * 255.0).round() as u8));
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// Tool configuration
// ---------------------------------------------------------------------------

/// The `simulator` section of a tool config: scene recipe plus the training
/// knobs that are not already covered by the top-level `assigner` and `loss`
/// sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorSection {
    pub scene: SceneSpec,
    pub learning_rate: f64,
    pub iterations: usize,
    pub patch_radius: usize,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            scene: SceneSpec::default(),
            learning_rate: train.learning_rate,
            iterations: train.iterations,
            patch_radius: train.patch_radius,
        }
    }
}

/// Complete tool configuration as stored in a JSON file. Any subset of the
/// sections (and of their fields) may be present; everything else falls back
/// to defaults, and unknown fields are ignored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolConfig {
    pub assigner: AssignerConfig,
    pub loss: LossParams,
    pub nms: NmsConfig,
    pub simulator: SimulatorSection,
}

impl ToolConfig {
    /// Validates every section, reporting offending fields as dotted paths
    /// (for example `assigner.kappa`).
    pub fn validate(&self) -> Result<(), DataError> {
        use crate::assigner::AssignError;
        use crate::inference::InferenceError;
        use crate::losses::LossError;
        use crate::simulator::SimulatorError;

        self.assigner.validate().map_err(|e| match e {
            AssignError::InvalidConfig { field, reason } => DataError::InvalidConfig {
                path: format!("assigner.{field}"),
                reason,
            },
            other => DataError::InvalidConfig {
                path: "assigner".into(),
                reason: other.to_string(),
            },
        })?;
        self.loss.validate().map_err(|e| match e {
            LossError::InvalidParams { field, reason } => DataError::InvalidConfig {
                path: format!("loss.{field}"),
                reason,
            },
            other => DataError::InvalidConfig {
                path: "loss".into(),
                reason: other.to_string(),
            },
        })?;
        self.nms.validate().map_err(|e| match e {
            InferenceError::InvalidConfig { field, reason } => DataError::InvalidConfig {
                path: format!("nms.{field}"),
                reason,
            },
            other => DataError::InvalidConfig {
                path: "nms".into(),
                reason: other.to_string(),
            },
        })?;
        self.simulator.scene.validate().map_err(|e| match e {
            SimulatorError::InvalidSpec { field, reason } => DataError::InvalidConfig {
                path: format!("simulator.scene.{field}"),
                reason,
            },
            other => DataError::InvalidConfig {
                path: "simulator.scene".into(),
                reason: other.to_string(),
            },
        })?;
        self.train_config(TrainMode::GflDslaDynamic)
            .validate()
            .map_err(|e| match e {
                SimulatorError::InvalidTrainConfig { field, reason } => DataError::InvalidConfig {
                    path: format!("simulator.{field}"),
                    reason,
                },
                other => DataError::InvalidConfig {
                    path: "simulator".into(),
                    reason: other.to_string(),
                },
            })?;
        Ok(())
    }

    /// Assembles the training configuration for one label scheme from the
    /// shared sections. The run seed is the scene seed, so one `--seed`
    /// switch moves the whole experiment.
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            learning_rate: self.simulator.learning_rate,
            iterations: self.simulator.iterations,
            patch_radius: self.simulator.patch_radius,
            seed: self.simulator.scene.seed,
            loss: self.loss,
            assigner: self.assigner.clone(),
        }
    }
}

/// Loads and validates a tool configuration from a JSON file.
pub fn load_config(path: &Path) -> Result<ToolConfig, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let config: ToolConfig = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Assignment statistics
// ---------------------------------------------------------------------------

/// Positive counts for one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub stride: u32,
    pub locations: usize,
    pub positives: usize,
}

/// Summary of one assignment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentStats {
    pub locations: usize,
    pub positives: usize,
    pub per_level: Vec<LevelStats>,
    /// Histogram of positive `label_s` values over 20 equal bins spanning
    /// `[0, 1]`; a label of exactly 1 lands in the last bin.
    pub label_s_histogram: Vec<usize>,
    /// Grid locations (over all levels) lying strictly inside two or more
    /// distinct ground-truth boxes — the locations an assigner has to
    /// arbitrate. Boxes are recovered from the stored regression targets.
    pub ambiguous_locations: usize,
}

/// Computes summary statistics for an assignment table.
pub fn assignment_stats(table: &AssignmentTable) -> Result<AssignmentStats, DataError> {
    let per_level = table
        .levels
        .iter()
        .map(|l| LevelStats {
            level: l.level,
            stride: l.stride,
            locations: l.targets.len(),
            positives: l.targets.iter().filter(|t| t.is_positive()).count(),
        })
        .collect();

    let mut histogram = vec![0usize; 20];
    for t in table.locations().filter(|t| t.is_positive()) {
        let bin = ((t.label_s * 20.0).floor() as usize).min(19);
        histogram[bin] += 1;
    }

    // recover each ground-truth box from the first location matched to it
    let mut gt_boxes: Vec<(usize, BBox)> = Vec::new();
    for t in table.locations() {
        if let Some(m) = &t.matched {
            if !gt_boxes.iter().any(|(i, _)| *i == m.gt_index) {
                let bbox =
                    decode_box(t.location, m.regression).map_err(|e| DataError::InvalidData {
                        reason: e.to_string(),
                    })?;
                gt_boxes.push((m.gt_index, bbox));
            }
        }
    }
    gt_boxes.sort_by_key(|(i, _)| *i);
    let ambiguous_locations = table
        .locations()
        .filter(|t| {
            gt_boxes
                .iter()
                .filter(|(_, b)| b.strictly_contains(t.location))
                .count()
                >= 2
        })
        .count();

    Ok(AssignmentStats {
        locations: table.len(),
        positives: table.positives(),
        per_level,
        label_s_histogram: histogram,
        ambiguous_locations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assigner::assign_all;
    use crate::losses::{gpart_curves, DEFAULT_GFL_TARGETS};
    use tempfile::tempdir;

    fn sample_table() -> AssignmentTable {
        let gt = [
            (BBox::new(8.0, 8.0, 44.0, 40.0).unwrap(), 3),
            (BBox::new(20.0, 16.0, 60.0, 60.0).unwrap(), 1),
        ];
        let config = AssignerConfig {
            strides: vec![8, 16],
            range_bounds: vec![0.0, 32.0, f64::INFINITY],
            ..Default::default()
        };
        assign_all(&gt, (64, 64), &config).unwrap()
    }

    #[test]
    fn assignments_round_trip_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("assignments.csv");
        let table = sample_table();
        write_assignments_csv(&path, &table).unwrap();
        let back = read_assignments_csv(&path).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn assignment_reader_rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "level,row,col\n").unwrap();
        assert!(matches!(
            read_assignments_csv(&path),
            Err(DataError::Csv { line: 1, .. })
        ));

        let half_matched =
            format!("{ASSIGNMENT_HEADER}\n0,0,0,4.0,4.0,1,,0.0,0.0,0.0,0.0,1.0,1.0,1.0,1.0\n");
        std::fs::write(&path, half_matched).unwrap();
        assert!(matches!(
            read_assignments_csv(&path),
            Err(DataError::Csv { line: 2, .. })
        ));

        let dup = format!(
            "{ASSIGNMENT_HEADER}\n0,0,0,4.0,4.0,,,0.0,0.0,0.0,0.0,,,,\n0,0,0,4.0,4.0,,,0.0,0.0,0.0,0.0,,,,\n"
        );
        std::fs::write(&path, dup).unwrap();
        assert!(matches!(
            read_assignments_csv(&path),
            Err(DataError::Csv { line: 3, .. })
        ));

        let hole = format!("{ASSIGNMENT_HEADER}\n0,1,1,12.0,12.0,,,0.0,0.0,0.0,0.0,,,,\n");
        std::fs::write(&path, hole).unwrap();
        assert!(matches!(
            read_assignments_csv(&path),
            Err(DataError::InvalidData { .. })
        ));
    }

    #[test]
    fn detections_round_trip_with_and_without_quality() {
        let dir = tempdir().unwrap();
        let dets = vec![
            Detection {
                bbox: BBox::new(1.0, 2.0, 30.5, 40.25).unwrap(),
                class_id: 2,
                score: 0.734_218_750_000_000_1,
                quality: Some(0.5),
                level: 0,
                row: 3,
                col: 4,
            },
            Detection {
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                class_id: 1,
                score: 0.25,
                quality: Some(1.0),
                level: 1,
                row: 0,
                col: 0,
            },
        ];

        let with_q = dir.path().join("with_quality.csv");
        write_detections_csv(&with_q, &dets, true).unwrap();
        assert_eq!(read_detections_csv(&with_q).unwrap(), dets);

        let without_q = dir.path().join("plain.csv");
        write_detections_csv(&without_q, &dets, false).unwrap();
        let stripped: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                quality: None,
                ..d.clone()
            })
            .collect();
        assert_eq!(read_detections_csv(&without_q).unwrap(), stripped);
    }

    #[test]
    fn detection_writer_demands_quality_when_column_requested() {
        let dir = tempdir().unwrap();
        let det = Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            class_id: 1,
            score: 0.5,
            quality: None,
            level: 0,
            row: 0,
            col: 0,
        };
        let path = dir.path().join("detections.csv");
        let err = write_detections_csv(&path, &[det], true).unwrap_err();
        assert!(matches!(err, DataError::MissingQuality { index: 0 }));
        assert!(!path.exists(), "nothing may be written on failure");
    }

    #[test]
    fn detection_reader_rejects_flipped_boxes_and_bad_headers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("detections.csv");
        std::fs::write(
            &path,
            format!("{DETECTION_HEADER}\n1,0.5,10.0,0.0,5.0,1.0,0,0,0\n"),
        )
        .unwrap();
        assert!(matches!(
            read_detections_csv(&path),
            Err(DataError::Csv { line: 2, .. })
        ));
        std::fs::write(&path, "class,score\n").unwrap();
        assert!(matches!(
            read_detections_csv(&path),
            Err(DataError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn dataset_loads_boxes_onto_their_images() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dataset.json");
        std::fs::write(
            &path,
            r#"{
                "info": {"description": "ignored"},
                "images": [
                    {"id": 7, "width": 100, "height": 80, "file_name": "a.png"},
                    {"id": 9, "width": 64, "height": 64}
                ],
                "annotations": [
                    {"id": 1, "image_id": 9, "category_id": 2, "bbox": [4, 6, 20, 10]},
                    {"id": 2, "image_id": 7, "category_id": 5, "bbox": [0, 0, 50, 40], "iscrowd": 0}
                ]
            }"#,
        )
        .unwrap();
        let records = load_dataset(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, 7);
        assert_eq!(records[0].file_name, "a.png");
        assert_eq!(
            records[0].gt_boxes,
            vec![(BBox::new(0.0, 0.0, 50.0, 40.0).unwrap(), 5)]
        );
        assert_eq!(records[1].file_name, "");
        assert_eq!(
            records[1].gt_boxes,
            vec![(BBox::new(4.0, 6.0, 24.0, 16.0).unwrap(), 2)]
        );
    }

    #[test]
    fn dataset_rejects_dangling_and_negative_annotations() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dataset.json");
        std::fs::write(
            &path,
            r#"{"images": [{"id": 1, "width": 10, "height": 10}],
                "annotations": [{"id": 4, "image_id": 2, "category_id": 1, "bbox": [0, 0, 5, 5]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::DanglingAnnotation {
                annotation: 4,
                image_id: 2
            })
        ));

        std::fs::write(
            &path,
            r#"{"images": [{"id": 1, "width": 10, "height": 10}],
                "annotations": [{"id": 4, "image_id": 1, "category_id": 1, "bbox": [0, 0, -5, 5]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::InvalidAnnotation { annotation: 4, .. })
        ));

        std::fs::write(
            &path,
            r#"{"images": [{"id": 1, "width": 0, "height": 10}], "annotations": []}"#,
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::InvalidImage { id: 1, .. })
        ));
    }

    #[test]
    fn curves_csv_lists_one_gfl_column_per_target() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let curves =
            gpart_curves(&[0.25, 0.5], &DEFAULT_GFL_TARGETS, &LossParams::default()).unwrap();
        write_curves_csv(&path, &curves).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "p,g_a,g_b,g_gfl_y=0.2,g_gfl_y=0.5,g_gfl_y=0.8"
        );
        // the {:.16e} cells round-trip the computed values bit-exactly
        let row: Vec<f64> = lines
            .nth(1)
            .unwrap()
            .split(',')
            .map(|f| f.parse().unwrap())
            .collect();
        let point = &curves.points[1];
        assert_eq!(row[0], 0.5);
        assert_eq!(row[1], point.g_a);
        assert_eq!(row[2], point.g_b);
        assert_eq!(row[3], point.g_gfl[0]);
        assert_eq!(row[4], 0.0); // y == p
    }

    #[test]
    fn heatmap_bytes_are_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_heatmap(&path, 2, 2, &[0.0, 0.5, 0.75, 1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(
            bytes,
            [b"P5\n2 2\n255\n".as_slice(), &[0, 128, 191, 255]].concat()
        );

        assert!(matches!(
            write_heatmap(&path, 2, 2, &[0.0, 0.5, 0.75]),
            Err(DataError::HeatmapSize {
                expected: 4,
                got: 3,
                ..
            })
        ));
        assert!(matches!(
            write_heatmap(&path, 1, 2, &[0.0, 1.2]),
            Err(DataError::HeatmapRange { index: 1, .. })
        ));
    }

    #[test]
    fn config_defaults_round_trip_through_json() {
        let config = ToolConfig::default();
        let json = serde_json::to_string_pretty(&config).unwrap();
        // the infinite outer bound serializes as null...
        assert!(json.contains("null"));
        let back: ToolConfig = serde_json::from_str(&json).unwrap();
        // ...and comes back as infinity
        assert_eq!(back, config);
        assert_eq!(*back.assigner.range_bounds.last().unwrap(), f64::INFINITY);
    }

    #[test]
    fn partial_configs_inherit_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"assigner": {"kappa": 0.1}, "simulator": {"iterations": 7}, "extra": true}"#,
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.assigner.kappa, 0.1);
        assert_eq!(config.assigner.strides, AssignerConfig::default().strides);
        assert_eq!(config.simulator.iterations, 7);
        assert_eq!(config.loss, LossParams::default());

        let train = config.train_config(TrainMode::FlHard);
        assert_eq!(train.iterations, 7);
        assert_eq!(train.seed, config.simulator.scene.seed);
        assert_eq!(train.assigner.kappa, 0.1);
    }

    #[test]
    fn config_errors_carry_field_paths() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"assigner": {"kappa": 1.5}}"#).unwrap();
        match load_config(&path) {
            Err(DataError::InvalidConfig { path, .. }) => assert_eq!(path, "assigner.kappa"),
            other => panic!("expected a config error, got {other:?}"),
        }
        std::fs::write(&path, r#"{"nms": {"iou_threshold": 2.0}}"#).unwrap();
        match load_config(&path) {
            Err(DataError::InvalidConfig { path, .. }) => assert_eq!(path, "nms.iou_threshold"),
            other => panic!("expected a config error, got {other:?}"),
        }
        std::fs::write(&path, r#"{"simulator": {"learning_rate": -1.0}}"#).unwrap();
        match load_config(&path) {
            Err(DataError::InvalidConfig { path, .. }) => {
                assert_eq!(path, "simulator.learning_rate")
            }
            other => panic!("expected a config error, got {other:?}"),
        }
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_config(&path), Err(DataError::Json { .. })));
    }

    #[test]
    fn stats_count_positives_and_ambiguity() {
        let table = sample_table();
        let stats = assignment_stats(&table).unwrap();
        assert_eq!(stats.locations, table.len());
        assert_eq!(stats.positives, table.positives());
        assert_eq!(stats.per_level.len(), 2);
        assert_eq!(
            stats.per_level.iter().map(|l| l.positives).sum::<usize>(),
            stats.positives
        );
        assert_eq!(
            stats.per_level.iter().map(|l| l.locations).sum::<usize>(),
            stats.locations
        );
        assert_eq!(
            stats.label_s_histogram.iter().sum::<usize>(),
            stats.positives
        );
        // the two sample boxes overlap over a whole stride-8 cell region
        assert!(stats.ambiguous_locations > 0);
    }

    #[test]
    fn stats_on_an_empty_assignment() {
        let table = assign_all(&[], (32, 32), &AssignerConfig::default()).unwrap();
        let stats = assignment_stats(&table).unwrap();
        assert_eq!(stats.positives, 0);
        assert_eq!(stats.ambiguous_locations, 0);
        assert_eq!(stats.label_s_histogram.iter().sum::<usize>(), 0);
    }

    #[test]
    fn atomic_writes_replace_existing_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        // no temp files left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);

        let missing_dir = dir.path().join("nope").join("out.txt");
        assert!(matches!(
            write_atomic(&missing_dir, b"x"),
            Err(DataError::Io { .. })
        ));
    }
}
