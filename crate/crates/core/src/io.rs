//! File formats: graph and world JSON, episode JSONL, binary checkpoints, and
//! the per-epoch metrics CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Result, TsgmError};
use crate::graph::{ImageId, ImageNode, ObjectId, ObjectState, TsgmGraph};
use crate::gridsim::{Episode, Placement, Tier, World, WorldConfig};
use crate::model::{ModelConfig, TsgmModel};
use crate::tensor::Matrix;
use crate::training::{EpochRecord, Phase};

pub const GRAPH_VERSION: u32 = 1;
pub const WORLD_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSGMCKPT";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| TsgmError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| TsgmError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| TsgmError::io(path, e))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data always serializes");
    s.push('\n');
    s
}

fn check_version(path: &Path, found: u32, supported: u32) -> Result<()> {
    if found != supported {
        return Err(TsgmError::format(path, format!("unsupported version {found} (this build reads version {supported})")));
    }
    Ok(())
}

/// Names the offending field when a JSON document does not match its schema.
fn schema_error(path: &Path, e: serde_json::Error) -> TsgmError {
    if e.is_io() || e.is_syntax() || e.is_eof() {
        TsgmError::format(path, e.to_string())
    } else {
        TsgmError::validation(path.display().to_string(), e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub version: u32,
    pub dim_image: usize,
    pub dim_object: usize,
    pub num_categories: usize,
    pub images: Vec<ImageNode>,
    pub objects: Vec<ObjectState>,
    pub image_edges: Vec<(ImageId, ImageId)>,
    pub cross_edges: Vec<(ImageId, ObjectId)>,
    #[serde(default)]
    pub last_localized: Option<ImageId>,
    pub meta: GraphMeta,
}

impl GraphFile {
    pub fn from_graph(graph: &TsgmGraph, meta: GraphMeta) -> Self {
        GraphFile {
            version: GRAPH_VERSION,
            dim_image: graph.dim_image(),
            dim_object: graph.dim_object(),
            num_categories: graph.num_categories(),
            images: graph.images().to_vec(),
            objects: graph.objects().to_vec(),
            image_edges: graph.image_edges().iter().copied().collect(),
            cross_edges: graph.cross_edges().iter().copied().collect(),
            last_localized: graph.last_localized(),
            meta,
        }
    }

    pub fn into_graph(self) -> Result<TsgmGraph> {
        TsgmGraph::from_parts(
            self.dim_image,
            self.dim_object,
            self.num_categories,
            self.images,
            self.objects,
            self.image_edges,
            self.cross_edges,
            self.last_localized,
        )
    }
}

pub fn graph_to_json(graph: &TsgmGraph, meta: GraphMeta) -> String {
    to_pretty_json(&GraphFile::from_graph(graph, meta))
}

pub fn save_graph(path: &Path, graph: &TsgmGraph, meta: GraphMeta) -> Result<()> {
    write_file(path, graph_to_json(graph, meta).as_bytes())
}

pub fn load_graph(path: &Path) -> Result<(TsgmGraph, GraphMeta)> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| schema_error(path, e))?;
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| TsgmError::validation("version", "missing or not an integer"))?;
    check_version(path, version as u32, GRAPH_VERSION)?;
    let file: GraphFile = serde_json::from_value(value).map_err(|e| schema_error(path, e))?;
    let meta = file.meta.clone();
    Ok((file.into_graph()?, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub encoder: EncoderConfig,
    /// One string per grid row, `#` for walls and `.` for free cells.
    pub grid: Vec<String>,
    pub objects: Vec<Placement>,
}

impl WorldFile {
    pub fn from_world(world: &World, encoder: &EncoderConfig) -> Self {
        let grid = (0..world.height())
            .map(|y| (0..world.width()).map(|x| if world.is_free(x, y) { '.' } else { '#' }).collect())
            .collect();
        WorldFile {
            version: WORLD_VERSION,
            seed: world.seed(),
            config: world.config().clone(),
            encoder: encoder.clone(),
            grid,
            objects: world.objects().to_vec(),
        }
    }

    pub fn into_world(self) -> Result<World> {
        if self.grid.len() != self.config.height {
            return Err(TsgmError::validation("grid", format!("expected {} rows, found {}", self.config.height, self.grid.len())));
        }
        let mut free = Vec::with_capacity(self.config.width * self.config.height);
        for (y, row) in self.grid.iter().enumerate() {
            if row.chars().count() != self.config.width {
                return Err(TsgmError::validation("grid", format!("row {y} does not have {} cells", self.config.width)));
            }
            for c in row.chars() {
                free.push(match c {
                    '.' => true,
                    '#' => false,
                    other => return Err(TsgmError::validation("grid", format!("unexpected cell `{other}` in row {y}"))),
                });
            }
        }
        World::from_parts(self.config, &self.encoder, self.seed, free, self.objects)
    }
}

pub fn save_world(path: &Path, world: &World, encoder: &EncoderConfig) -> Result<()> {
    write_file(path, to_pretty_json(&WorldFile::from_world(world, encoder)).as_bytes())
}

pub fn load_world(path: &Path) -> Result<World> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| schema_error(path, e))?;
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| TsgmError::validation("version", "missing or not an integer"))?;
    check_version(path, version as u32, WORLD_VERSION)?;
    let file: WorldFile = serde_json::from_value(value).map_err(|e| schema_error(path, e))?;
    file.into_world()
}

/// One JSON object per line.
pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("plain data always serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| TsgmError::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TsgmError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| TsgmError::format(path, format!("line {}: {e}", n + 1)))?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    save_jsonl(path, episodes)
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    load_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub tensors: Vec<TensorEntry>,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub num_categories: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub seed: u64,
    /// Full run configuration at save time, if the caller has one.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub phase: Phase,
    pub seed: u64,
}

/// Layout: magic, u32 version, u64 manifest length, manifest JSON, then every
/// tensor as little-endian f64 in manifest order. All integers little-endian.
pub fn save_checkpoint(path: &Path, model: &TsgmModel, info: CheckpointInfo, config: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.rows() * m.cols();
    }
    let manifest = CheckpointManifest {
        tensors,
        model: model.config.clone(),
        encoder: model.encoder.clone(),
        num_categories: model.num_categories,
        epoch: info.epoch,
        phase: info.phase,
        seed: info.seed,
        config,
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest always serializes");
    let mut bytes = Vec::with_capacity(20 + manifest.len() + offset * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for (_, m) in model.store.iter() {
        for x in m.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| TsgmError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| TsgmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| TsgmError::io(path, e))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TsgmError::format(path, "checkpoint is truncated"),
        _ => TsgmError::io(path, e),
    })
}

/// Reads the manifest and raw tensor data without building a model.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, Vec<Matrix>)> {
    let file = File::open(path).map_err(|e| TsgmError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TsgmError::format(path, "not a checkpoint (bad magic)"));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, path)?;
    check_version(path, u32::from_le_bytes(word), CHECKPOINT_VERSION)?;
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len, path)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    read_exact(&mut r, &mut manifest, path)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest).map_err(|e| TsgmError::format(path, format!("manifest: {e}")))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(TsgmError::format(path, format!("tensor `{}` has offset {} but {} was expected", entry.name, entry.offset, expected_offset)));
        }
        let n = entry.rows * entry.cols;
        let mut raw = vec![0u8; n * 8];
        read_exact(&mut r, &mut raw, path)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        tensors.push(Matrix::from_vec(entry.rows, entry.cols, data));
        expected_offset += n;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| TsgmError::io(path, e))? != 0 {
        return Err(TsgmError::format(path, "trailing bytes after tensor data"));
    }
    Ok((manifest, tensors))
}

/// Copies checkpoint tensors into `model`, which must have exactly the same
/// parameter names and shapes.
pub fn load_checkpoint_into(path: &Path, model: &mut TsgmModel) -> Result<CheckpointManifest> {
    let (manifest, tensors) = read_checkpoint(path)?;
    if manifest.tensors.len() != model.store.len() {
        return Err(TsgmError::Incompatible(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (entry, id) in manifest.tensors.iter().zip(&ids) {
        let expected = model.store.get(*id);
        if entry.name != model.store.name(*id) {
            return Err(TsgmError::Incompatible(format!("tensor `{}` found where `{}` was expected", entry.name, model.store.name(*id))));
        }
        if (entry.rows, entry.cols) != (expected.rows(), expected.cols()) {
            return Err(TsgmError::Incompatible(format!(
                "tensor `{}` is {}x{} in the checkpoint but {}x{} in the model",
                entry.name,
                entry.rows,
                entry.cols,
                expected.rows(),
                expected.cols()
            )));
        }
    }
    for (tensor, id) in tensors.into_iter().zip(ids) {
        *model.store.get_mut(id) = tensor;
    }
    Ok(manifest)
}

/// Builds a model from the checkpoint's own config echo and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(TsgmModel, CheckpointManifest)> {
    let (manifest, _) = read_checkpoint(path)?;
    let mut model = TsgmModel::new(&manifest.model, &manifest.encoder, manifest.num_categories, 0)?;
    let manifest = load_checkpoint_into(path, &mut model)?;
    Ok((model, manifest))
}

pub const METRICS_HEADER: &str = "epoch,phase,loss,success,spl,success_easy,success_medium,success_hard";

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One CSV row; blank cells where a value was not measured.
pub fn metrics_row(record: &EpochRecord) -> String {
    let eval = record.eval.as_ref();
    let tier = |t: Tier| eval.and_then(|m| m.per_tier.get(&t)).map(|m| m.success);
    format!(
        "{},{},{},{},{},{},{},{}",
        record.epoch,
        record.phase,
        cell(record.loss),
        cell(eval.map(|m| m.success)),
        cell(eval.map(|m| m.spl)),
        cell(tier(Tier::Easy)),
        cell(tier(Tier::Medium)),
        cell(tier(Tier::Hard)),
    )
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    out
}

pub fn save_metrics_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    write_file(path, metrics_csv(records).as_bytes())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_pretty_json(value).as_bytes())
}
