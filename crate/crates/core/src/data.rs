//! ARC task files: grids, demo/infer pairs, task sets and RE-ARC expansion.
//!
//! Tasks follow the public ARC JSON layout: an object with a `"train"` array
//! (demonstration pairs) and a `"test"` array (inference pairs), each pair an
//! object with `"input"` and `"output"` grids given as nested integer arrays.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest side length of a raw ARC grid.
pub const MAX_GRID_SIDE: usize = 30;
/// Number of ARC colors.
pub const NUM_COLORS: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("grid is empty")]
    EmptyGrid,
    #[error("grid rows have different lengths (row 0 has {expected}, row {row} has {found})")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("cell value {value} at ({row}, {col}) is not a color in 0..=9")]
    ColorOutOfRange { row: usize, col: usize, value: i64 },
    #[error("grid is {rows}x{cols}, raw ARC grids are at most 30x30")]
    GridTooLarge { rows: usize, cols: usize },
    #[error("grid value is not an array of integer arrays")]
    NotAGrid,
    #[error("cell buffer has {found} entries, expected {expected}")]
    CellCount { expected: usize, found: usize },
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("task has no demonstration pairs")]
    NoDemoPairs,
    #[error("task has no inference pairs")]
    NoInferPairs,
    #[error("no task files found in {0}")]
    EmptyTaskSet(PathBuf),
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    fn in_file(self, path: &Path) -> DataError {
        DataError::InFile { path: path.to_path_buf(), source: Box::new(self) }
    }
}

/// A rectangular grid of colors, stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    rows: usize,
    cols: usize,
    cells: Vec<u8>,
}

impl Grid {
    /// Builds a grid of any positive size (derived grids may exceed 30x30).
    pub fn new(rows: usize, cols: usize, cells: Vec<u8>) -> Result<Grid, DataError> {
        if rows == 0 || cols == 0 {
            return Err(DataError::EmptyGrid);
        }
        if cells.len() != rows * cols {
            return Err(DataError::CellCount { expected: rows * cols, found: cells.len() });
        }
        if let Some(i) = cells.iter().position(|&c| c as usize >= NUM_COLORS) {
            return Err(DataError::ColorOutOfRange {
                row: i / cols,
                col: i % cols,
                value: cells[i] as i64,
            });
        }
        Ok(Grid { rows, cols, cells })
    }

    pub fn filled(rows: usize, cols: usize, color: u8) -> Grid {
        assert!(rows > 0 && cols > 0 && (color as usize) < NUM_COLORS);
        Grid { rows, cols, cells: vec![color; rows * cols] }
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Grid, DataError> {
        let first = rows.first().ok_or(DataError::EmptyGrid)?.as_ref().len();
        let mut cells = Vec::with_capacity(rows.len() * first);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != first {
                return Err(DataError::RaggedRows { row: i, expected: first, found: r.len() });
            }
            cells.extend_from_slice(r);
        }
        Grid::new(rows.len(), first, cells)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: u8) {
        assert!((color as usize) < NUM_COLORS);
        self.cells[row * self.cols + col] = color;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.cells[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            (0..self.rows)
                .map(|r| Value::Array(self.row(r).iter().map(|&c| Value::from(c)).collect()))
                .collect(),
        )
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}x{})[", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                f.write_str("|")?;
            }
            for &c in self.row(r) {
                write!(f, "{c}")?;
            }
        }
        f.write_str("]")
    }
}

impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[u8]> = (0..self.rows).map(|r| self.row(r)).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        parse_grid(&v).map_err(serde::de::Error::custom)
    }
}

/// Parses a raw ARC grid from its JSON form, enforcing the 30x30 limit.
pub fn parse_grid(value: &Value) -> Result<Grid, DataError> {
    let outer = value.as_array().ok_or(DataError::NotAGrid)?;
    if outer.is_empty() {
        return Err(DataError::EmptyGrid);
    }
    let mut width = None;
    let mut cells = Vec::new();
    for (r, row) in outer.iter().enumerate() {
        let row = row.as_array().ok_or(DataError::NotAGrid)?;
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected {
            return Err(DataError::RaggedRows { row: r, expected, found: row.len() });
        }
        for (c, v) in row.iter().enumerate() {
            let v = v.as_i64().ok_or(DataError::NotAGrid)?;
            if !(0..NUM_COLORS as i64).contains(&v) {
                return Err(DataError::ColorOutOfRange { row: r, col: c, value: v });
            }
            cells.push(v as u8);
        }
    }
    let cols = width.unwrap_or(0);
    if cols == 0 {
        return Err(DataError::EmptyGrid);
    }
    let rows = outer.len();
    if rows > MAX_GRID_SIDE || cols > MAX_GRID_SIDE {
        return Err(DataError::GridTooLarge { rows, cols });
    }
    Grid::new(rows, cols, cells)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub input: Grid,
    pub output: Grid,
}

/// An inference pair; the output is absent when ground truth is withheld.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferPair {
    pub input: Grid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub task_id: String,
    pub demo: Vec<ExamplePair>,
    pub infer: Vec<InferPair>,
}

impl Task {
    pub fn new(task_id: impl Into<String>, demo: Vec<ExamplePair>, infer: Vec<InferPair>) -> Result<Task, DataError> {
        if demo.is_empty() {
            return Err(DataError::NoDemoPairs);
        }
        if infer.is_empty() {
            return Err(DataError::NoInferPairs);
        }
        Ok(Task { task_id: task_id.into(), demo, infer })
    }

    /// Parses one task object (`{"train": [...], "test": [...]}`).
    pub fn from_json(task_id: &str, value: &Value) -> Result<Task, DataError> {
        let train = value.get("train").and_then(Value::as_array).ok_or(DataError::MissingField("train"))?;
        let test = value.get("test").and_then(Value::as_array).ok_or(DataError::MissingField("test"))?;
        let demo = train
            .iter()
            .map(|p| {
                let input = parse_grid(p.get("input").ok_or(DataError::MissingField("input"))?)?;
                let output = parse_grid(p.get("output").ok_or(DataError::MissingField("output"))?)?;
                Ok(ExamplePair { input, output })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let infer = test
            .iter()
            .map(|p| {
                let input = parse_grid(p.get("input").ok_or(DataError::MissingField("input"))?)?;
                let output = p.get("output").map(parse_grid).transpose()?;
                Ok(InferPair { input, output })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Task::new(task_id, demo, infer)
    }

    pub fn to_json(&self) -> Value {
        let pair = |i: &Grid, o: Option<&Grid>| {
            let mut m = serde_json::Map::new();
            m.insert("input".into(), i.to_json());
            if let Some(o) = o {
                m.insert("output".into(), o.to_json());
            }
            Value::Object(m)
        };
        serde_json::json!({
            "train": self.demo.iter().map(|p| pair(&p.input, Some(&p.output))).collect::<Vec<_>>(),
            "test": self.infer.iter().map(|p| pair(&p.input, p.output.as_ref())).collect::<Vec<_>>(),
        })
    }

    pub fn load(path: &Path) -> Result<Task, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::from(e).in_file(path))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| DataError::from(e).in_file(path))?;
        Task::from_json(&file_stem(path), &value).map_err(|e| e.in_file(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSet {
    pub split: Split,
    tasks: Vec<Task>,
}

impl TaskSet {
    /// Sorts tasks by id so embedding indices are reproducible.
    pub fn new(split: Split, mut tasks: Vec<Task>) -> Result<TaskSet, DataError> {
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        for w in tasks.windows(2) {
            if w[0].task_id == w[1].task_id {
                return Err(DataError::DuplicateTaskId(w[0].task_id.clone()));
            }
        }
        Ok(TaskSet { split, tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks
            .binary_search_by(|t| t.task_id.as_str().cmp(task_id))
            .ok()
            .map(|i| &self.tasks[i])
    }

    pub fn index_of(&self, task_id: &str) -> Option<usize> {
        self.tasks.binary_search_by(|t| t.task_id.as_str().cmp(task_id)).ok()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn demo_pair_count(&self) -> usize {
        self.tasks.iter().map(|t| t.demo.len()).sum()
    }

    pub fn infer_pair_count(&self) -> usize {
        self.tasks.iter().map(|t| t.infer.len()).sum()
    }

    /// SHA-256 over the canonical JSON of every task, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tasks {
            h.update(t.task_id.as_bytes());
            h.update([0u8]);
            h.update(t.to_json().to_string().as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn report(&self) -> LoadReport {
        LoadReport {
            split: self.split,
            tasks: self.len(),
            demo_pairs: self.demo_pair_count(),
            infer_pairs: self.infer_pair_count(),
            rearc: None,
        }
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::from(e).in_file(dir))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a task set from a directory of per-task JSON files (task id = file
/// stem), or from a single JSON object mapping task ids to tasks.
pub fn load_taskset(path: &Path, split: Split) -> Result<TaskSet, DataError> {
    let tasks = if path.is_dir() {
        let files = json_files(path)?;
        if files.is_empty() {
            return Err(DataError::EmptyTaskSet(path.to_path_buf()));
        }
        files.iter().map(|f| Task::load(f)).collect::<Result<Vec<_>, _>>()?
    } else {
        let text = fs::read_to_string(path).map_err(|e| DataError::from(e).in_file(path))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| DataError::from(e).in_file(path))?;
        let obj = value.as_object().ok_or_else(|| DataError::MissingField("train").in_file(path))?;
        if obj.contains_key("train") && obj.contains_key("test") {
            vec![Task::from_json(&file_stem(path), &value).map_err(|e| e.in_file(path))?]
        } else {
            obj.iter()
                .map(|(id, t)| Task::from_json(id, t).map_err(|e| e.in_file(&path.join(id))))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    if tasks.is_empty() {
        return Err(DataError::EmptyTaskSet(path.to_path_buf()));
    }
    TaskSet::new(split, tasks)
}

/// Task count, pair counts and RE-ARC merge summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub split: Split,
    pub tasks: usize,
    pub demo_pairs: usize,
    pub infer_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rearc: Option<MergeReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MergeReport {
    pub pairs_added: usize,
    pub tasks_extended: usize,
    /// RE-ARC files whose id matches no base task; skipped.
    pub unknown_task_ids: Vec<String>,
    pub with_replacement: bool,
}

/// Reads one RE-ARC file: either a bare array of pairs or an object with a
/// `"train"` array.
fn load_rearc_pairs(path: &Path) -> Result<Vec<ExamplePair>, DataError> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    let arr = match &value {
        Value::Array(a) => a,
        Value::Object(o) => o.get("train").and_then(Value::as_array).ok_or(DataError::MissingField("train"))?,
        _ => return Err(DataError::MissingField("train")),
    };
    arr.iter()
        .map(|p| {
            Ok(ExamplePair {
                input: parse_grid(p.get("input").ok_or(DataError::MissingField("input"))?)?,
                output: parse_grid(p.get("output").ok_or(DataError::MissingField("output"))?)?,
            })
        })
        .collect()
}

/// Appends up to `pairs_per_task` RE-ARC pairs to each matching task.
///
/// Sampling is without replacement unless `with_replacement` is set. Tasks
/// are visited in id order with a single seeded generator.
pub fn merge_rearc(
    base: &TaskSet,
    rearc_dir: &Path,
    pairs_per_task: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<(TaskSet, MergeReport), DataError> {
    let mut report = MergeReport { with_replacement, ..MergeReport::default() };
    if pairs_per_task == 0 {
        return Ok((base.clone(), report));
    }
    let mut pools: BTreeMap<String, Vec<ExamplePair>> = BTreeMap::new();
    for f in json_files(rearc_dir)? {
        let id = file_stem(&f);
        if base.get(&id).is_none() {
            log::warn!("RE-ARC file {} matches no task, skipping", f.display());
            report.unknown_task_ids.push(id);
            continue;
        }
        pools.insert(id, load_rearc_pairs(&f).map_err(|e| e.in_file(&f))?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = base.tasks.clone();
    for task in &mut tasks {
        let Some(pool) = pools.get(&task.task_id) else { continue };
        if pool.is_empty() {
            continue;
        }
        let picked: Vec<usize> = if with_replacement {
            (0..pairs_per_task).map(|_| rng.random_range(0..pool.len())).collect()
        } else {
            index::sample(&mut rng, pool.len(), pairs_per_task.min(pool.len())).into_vec()
        };
        report.pairs_added += picked.len();
        report.tasks_extended += 1;
        task.demo.extend(picked.into_iter().map(|i| pool[i].clone()));
    }
    let merged = TaskSet { split: base.split, tasks };
    Ok((merged, report))
}
