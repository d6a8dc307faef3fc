//! On-disk formats, run configuration, and the command implementations
//! behind the `cir` binary.
//!
//! Embedding files are a 20-byte little-endian header (`DEGE`, version u32,
//! count u64, dim u32) followed by `count * dim` f32 values. A companion
//! `<stem>.ids.jsonl` holds one `{"row", "id"}` object per row. Every write
//! goes to a temporary sibling first and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{self, QueryRecord, World, WorldSpec};
use crate::encoders::Composer;
use crate::error::{Error, Result};
use crate::mappers::{Layer, MapperPair, MapperParams, MapperRole};
use crate::numerics::Tensor;
use crate::retrieval::{self, BaselineMode, EvalTask, Gallery, Metric};
use crate::rng::PRNG_NAME;
use crate::sset;
use crate::trainer::{self, PairDataset, StepLog, TrainConfig};

pub const EMB_MAGIC: [u8; 4] = *b"DEGE";
pub const EMB_VERSION: u32 = 1;
pub const EMB_HEADER_LEN: usize = 20;
pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// raw files

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{}.tmp", name));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?);
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {}", i + 1, e))))
        .collect()
}

// ---------------------------------------------------------------------------
// embedding files

/// Serializes a `[count x dim]` matrix (a vector counts as one row).
pub fn encode_embeddings(t: &Tensor) -> Vec<u8> {
    let (count, dim) = t.dims2();
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + 4 * t.len());
    out.extend_from_slice(&EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an embedding file image; `path` is only used in diagnostics.
pub fn decode_embeddings(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < EMB_HEADER_LEN {
        return Err(Error::format(
            path,
            format!("truncated header: {} of {} bytes", bytes.len(), EMB_HEADER_LEN),
        ));
    }
    if bytes[0..4] != EMB_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", &bytes[0..4], EMB_MAGIC),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != EMB_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", version)));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let expected = (count as u128) * (dim as u128) * 4;
    let payload = &bytes[EMB_HEADER_LEN..];
    if payload.len() as u128 != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header promises {} x {} f32 = {}",
                payload.len(),
                count,
                dim,
                expected
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload contains non-finite values"));
    }
    Tensor::matrix(count as usize, dim as usize, data)
}

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &encode_embeddings(t))
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    decode_embeddings(path, &read_bytes(path)?)
}

/// `dir/name.emb` -> `dir/name.ids.jsonl`.
pub fn ids_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{}.ids.jsonl", stem))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdLine {
    row: usize,
    id: String,
}

pub fn write_embeddings(path: &Path, ids: &[String], t: &Tensor) -> Result<()> {
    if ids.len() != t.dims2().0 {
        return Err(Error::shape(
            "write_embeddings",
            format!("{} ids for {} rows", ids.len(), t.dims2().0),
        ));
    }
    let lines: Vec<IdLine> = ids
        .iter()
        .enumerate()
        .map(|(row, id)| IdLine { row, id: id.clone() })
        .collect();
    write_matrix(path, t)?;
    write_jsonl(&ids_path(path), &lines)
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let t = read_matrix(path)?;
    let idp = ids_path(path);
    let lines: Vec<IdLine> = read_jsonl(&idp)?;
    if lines.len() != t.rows() {
        return Err(Error::format(
            &idp,
            format!("{} id lines for {} embedding rows", lines.len(), t.rows()),
        ));
    }
    let mut ids = Vec::with_capacity(lines.len());
    for (i, l) in lines.into_iter().enumerate() {
        if l.row != i {
            return Err(Error::format(&idp, format!("line {} carries row {}", i + 1, l.row)));
        }
        ids.push(l.id);
    }
    Ok((ids, t))
}

// ---------------------------------------------------------------------------
// world files

pub const TRAIN_IMAGES: &str = "train_images.emb";
pub const TRAIN_TEXTS: &str = "train_texts.emb";
pub const TRAIN_META: &str = "train_meta.jsonl";
pub const GALLERY: &str = "gallery.emb";
pub const REFERENCES: &str = "references.emb";
pub const CONDITIONS: &str = "conditions.emb";
pub const QUERIES: &str = "queries.jsonl";
pub const TASK: &str = "task.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Evaluation task descriptor. File names are relative to its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub gallery: String,
    pub references: String,
    pub conditions: String,
    pub queries: String,
    pub metrics: Vec<Metric>,
    pub k_values: Vec<usize>,
    pub gamma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldFiles {
    pub dir: PathBuf,
    pub train_images: PathBuf,
    pub train_texts: PathBuf,
    pub gallery: PathBuf,
    pub references: PathBuf,
    pub conditions: PathBuf,
    pub queries: PathBuf,
    pub task: PathBuf,
}

impl WorldFiles {
    pub fn in_dir(dir: &Path) -> Self {
        WorldFiles {
            dir: dir.to_path_buf(),
            train_images: dir.join(TRAIN_IMAGES),
            train_texts: dir.join(TRAIN_TEXTS),
            gallery: dir.join(GALLERY),
            references: dir.join(REFERENCES),
            conditions: dir.join(CONDITIONS),
            queries: dir.join(QUERIES),
            task: dir.join(TASK),
        }
    }
}

/// Writes every world table plus a task file using default eval settings.
pub fn write_world(world: &World, dir: &Path) -> Result<WorldFiles> {
    write_world_with(world, dir, &EvalConfig::default())
}

pub fn write_world_with(world: &World, dir: &Path, eval: &EvalConfig) -> Result<WorldFiles> {
    let f = WorldFiles::in_dir(dir);
    write_embeddings(&f.train_images, &world.train_ids, &world.train.images)?;
    write_embeddings(&f.train_texts, &world.train_ids, &world.train.texts)?;
    write_jsonl(&dir.join(TRAIN_META), &world.train_meta)?;
    write_embeddings(&f.gallery, world.gallery.ids(), world.gallery.vectors())?;
    write_embeddings(&f.references, &world.reference_ids, &world.references)?;
    write_embeddings(&f.conditions, &world.condition_ids, &world.conditions)?;
    write_jsonl(&f.queries, &world.queries)?;
    let task = TaskFile {
        gallery: GALLERY.into(),
        references: REFERENCES.into(),
        conditions: CONDITIONS.into(),
        queries: QUERIES.into(),
        metrics: eval.metrics.clone(),
        k_values: eval.k_values.clone(),
        gamma: eval.resolved_gamma(),
    };
    write_json(&f.task, &task)?;
    Ok(f)
}

pub fn read_train_pairs(dir: &Path) -> Result<(Vec<String>, PairDataset)> {
    let (ids, images) = read_embeddings(&dir.join(TRAIN_IMAGES))?;
    let (tids, texts) = read_embeddings(&dir.join(TRAIN_TEXTS))?;
    if ids != tids {
        return Err(Error::format(dir.join(TRAIN_TEXTS), "ids differ from the image file"));
    }
    Ok((ids, PairDataset::new(images, texts)?))
}

pub fn read_task(task_path: &Path) -> Result<(TaskFile, EvalTask)> {
    let task: TaskFile = read_json(task_path)?;
    let dir = task_path.parent().unwrap_or(Path::new("."));
    let (gids, gvecs) = read_embeddings(&dir.join(&task.gallery))?;
    let (rids, refs) = read_embeddings(&dir.join(&task.references))?;
    let (cids, conds) = read_embeddings(&dir.join(&task.conditions))?;
    let records: Vec<QueryRecord> = read_jsonl(&dir.join(&task.queries))?;
    let gallery = Gallery::new(gids, gvecs)?;
    let eval = datagen::build_task(gallery, &rids, &refs, &cids, &conds, &records)?;
    Ok((task, eval))
}

// ---------------------------------------------------------------------------
// checkpoints

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: MapperRole,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub prng: String,
    pub seed: u64,
    pub steps: usize,
    pub dim: usize,
    pub hidden: usize,
    pub composer_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    mappers: &MapperPair,
    seed: u64,
    steps: usize,
    composer_hash: &str,
) -> Result<CheckpointManifest> {
    let mut tensors = Vec::new();
    for m in [&mappers.phi, &mappers.phi_ts] {
        for (name, t) in m.named_tensors() {
            let file = format!("{}.{}.emb", m.role().name(), name);
            write_matrix(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                name,
                role: m.role(),
                file,
                shape: t.shape().to_vec(),
            });
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        prng: PRNG_NAME.into(),
        seed,
        steps,
        dim: mappers.phi.dim(),
        hidden: mappers.phi.hidden(),
        composer_hash: composer_hash.into(),
        tensors,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(MapperPair, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST);
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }
    let load = |role: MapperRole| -> Result<MapperParams> {
        let mut layers = Vec::new();
        for i in 0..3 {
            let get = |suffix: &str| -> Result<Tensor> {
                let name = format!("l{}.{}", i, suffix);
                let e = manifest
                    .tensors
                    .iter()
                    .find(|e| e.role == role && e.name == name)
                    .ok_or_else(|| Error::format(&mpath, format!("missing {} {}", role.name(), name)))?;
                let path = dir.join(&e.file);
                let t = read_matrix(&path)?;
                t.reshape(e.shape.clone()).map_err(|_| {
                    Error::format(&path, format!("does not match manifest shape {:?}", e.shape))
                })
            };
            layers.push(Layer {
                weight: get("weight")?,
                bias: get("bias")?,
            });
        }
        MapperParams::from_layers(role, layers)
    };
    let pair = MapperPair {
        phi: load(MapperRole::Phi)?,
        phi_ts: load(MapperRole::PhiTs)?,
    };
    Ok((pair, manifest))
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPreset {
    Cirr,
    Circo,
    FashionIq,
    Coco,
}

impl GammaPreset {
    pub fn gamma(self) -> f32 {
        match self {
            GammaPreset::Cirr => 0.6,
            GammaPreset::Circo => 0.7,
            GammaPreset::FashionIq | GammaPreset::Coco => 1.0,
        }
    }
}

/// Gamma used when neither a value nor a preset is configured. The synthetic
/// task edits a single attribute per query, like Fashion-IQ.
pub const DEFAULT_GAMMA: f32 = 1.0;

fn d_metrics() -> Vec<Metric> {
    vec![Metric::Recall, Metric::Map]
}
fn d_ks() -> Vec<usize> {
    vec![1, 5, 10, 50]
}
fn d_slerp_t() -> f32 {
    0.5
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub gamma: Option<f32>,
    #[serde(default)]
    pub gamma_preset: Option<GammaPreset>,
    #[serde(default = "d_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "d_ks")]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub per_query: bool,
    #[serde(default = "yes")]
    pub baselines: bool,
    #[serde(default = "d_slerp_t")]
    pub slerp_t: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl EvalConfig {
    /// Explicit value, else preset, else [`DEFAULT_GAMMA`].
    pub fn resolved_gamma(&self) -> f32 {
        self.gamma
            .or(self.gamma_preset.map(GammaPreset::gamma))
            .unwrap_or(DEFAULT_GAMMA)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.resolved_gamma();
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::param("gamma", format!("must lie in [0, 1], got {}", g)));
        }
        if self.metrics.is_empty() || self.k_values.is_empty() {
            return Err(Error::param("metrics", "need at least one metric and one k"));
        }
        if self.k_values.contains(&0) {
            return Err(Error::param("k_values", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.slerp_t) {
            return Err(Error::param("slerp_t", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn d_data_dir() -> PathBuf {
    "data".into()
}
fn d_run_dir() -> PathBuf {
    "run".into()
}
fn d_report() -> PathBuf {
    "report.json".into()
}

/// Relative paths resolve against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "d_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "d_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default = "d_report")]
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses and resolves a config document. The top-level seed drives both
    /// the world and training; section seeds, if present, must agree with it.
    /// `train.dim` follows `world.dim` unless set.
    pub fn from_json(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let given = |section: &str, key: &str| raw.get(section).and_then(|s| s.get(key)).is_some();
        for section in ["world", "train"] {
            if given(section, "seed") {
                let v = raw[section]["seed"].as_u64();
                if v != Some(cfg.seed) {
                    return Err(Error::Config(format!(
                        "{}.seed conflicts with the top-level seed {}; set only the top-level seed",
                        section, cfg.seed
                    )));
                }
            }
        }
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.world.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        if !given("train", "dim") {
            cfg.train.dim = cfg.world.dim;
        }
        cfg.eval.gamma = Some(cfg.eval.resolved_gamma());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.train.dim != self.world.dim {
            return Err(Error::Config(format!(
                "train.dim {} differs from world.dim {}",
                self.train.dim, self.world.dim
            )));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f32 {
        self.eval.resolved_gamma()
    }

    pub fn set_gamma(&mut self, gamma: f32) -> Result<()> {
        self.eval.gamma = Some(gamma);
        self.eval.validate()
    }
}

/// A loaded config plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))?;
        let config = RunConfig::from_json(&text, seed_override)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.data_dir)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.run_dir)
    }

    pub fn report_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.report)
    }

    /// Echo of the fully resolved config.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let mut v = serde_json::to_value(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        v["prng"] = json!(PRNG_NAME);
        write_json(&dir.join(RESOLVED_CONFIG), &v)
    }
}

// ---------------------------------------------------------------------------
// commands

pub fn cmd_gen_data(cfg: &LoadedConfig, out: Option<&Path>) -> Result<WorldFiles> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let world = datagen::generate_world(&cfg.config.world)?;
    let files = write_world_with(&world, &dir, &cfg.config.eval)?;
    cfg.echo(&dir)?;
    Ok(files)
}

pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: CheckpointManifest,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn cmd_train(cfg: &LoadedConfig, data_dir: Option<&Path>, out: Option<&Path>) -> Result<TrainArtifacts> {
    let data_dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let run_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    let (_, data) = read_train_pairs(&data_dir)?;
    let composer = Composer::new(cfg.config.world.composer_spec())?;
    let hash = composer.weights_hash();
    let outcome = trainer::train(&cfg.config.train, &data, &composer)?;
    if composer.weights_hash() != hash {
        return Err(Error::Contract("composer weights changed during training".into()));
    }
    let checkpoint = run_dir.join(CHECKPOINT_DIR);
    let manifest = save_checkpoint(
        &checkpoint,
        &outcome.mappers,
        cfg.config.seed,
        outcome.log.len(),
        &hash,
    )?;
    let log = run_dir.join(TRAIN_LOG);
    write_jsonl::<StepLog>(&log, &outcome.log)?;
    cfg.echo(&run_dir)?;
    Ok(TrainArtifacts {
        run_dir,
        checkpoint,
        log,
        manifest,
    })
}

/// Ranks every query under the trained composition and, if configured, the
/// training-free baselines; returns the report document.
pub fn evaluate_report(
    task: &EvalTask,
    mappers: &MapperPair,
    composer: &Composer,
    eval: &EvalConfig,
) -> Result<Value> {
    let gamma = eval.resolved_gamma();
    let kmax = eval.k_values.iter().copied().max().unwrap_or(1);
    let qs = retrieval::composed_queries(task, mappers, composer, gamma)?;
    let results = retrieval::rank_all(&task.gallery, &qs, Some(kmax))?;
    let metrics = retrieval::score(&results, &task.queries, &eval.metrics, &eval.k_values)?;
    let mut report = BTreeMap::<String, Value>::new();
    report.insert("gamma".into(), json!(gamma));
    report.insert("n_queries".into(), json!(task.queries.len()));
    report.insert("gallery_size".into(), json!(task.gallery.len()));
    report.insert("composer_hash".into(), json!(composer.weights_hash()));
    report.insert("metrics".into(), json!(metrics));
    if eval.baselines {
        let mut b = BTreeMap::new();
        for mode in BaselineMode::ALL {
            let bq = retrieval::baseline_queries(task, mode, eval.slerp_t)?;
            let br = retrieval::rank_all(&task.gallery, &bq, Some(kmax))?;
            b.insert(
                mode.name().to_string(),
                retrieval::score(&br, &task.queries, &eval.metrics, &eval.k_values)?,
            );
        }
        report.insert("baselines".into(), json!(b));
    }
    if eval.per_query {
        let rows: Vec<Value> = results
            .iter()
            .zip(&task.queries)
            .map(|(r, q)| {
                let first_hit = r
                    .ids()
                    .position(|id| q.target_ids.iter().any(|t| t == id))
                    .map(|p| p + 1);
                json!({
                    "query_id": q.query_id,
                    "top": r.ids().take(kmax.min(10)).collect::<Vec<_>>(),
                    "first_target_rank": first_hit,
                })
            })
            .collect();
        report.insert("per_query".into(), Value::Array(rows));
    }
    Ok(json!(report))
}

pub fn load_composer_for(cfg: &RunConfig, manifest: &CheckpointManifest, ckpt: &Path) -> Result<Composer> {
    let composer = Composer::new(cfg.world.composer_spec())?;
    if composer.weights_hash() != manifest.composer_hash {
        return Err(Error::format(
            ckpt.join(MANIFEST),
            "checkpoint was trained against a different composer",
        ));
    }
    Ok(composer)
}

pub fn cmd_evaluate(
    cfg: &LoadedConfig,
    checkpoint: Option<&Path>,
    data_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<(PathBuf, Value)> {
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir().join(CHECKPOINT_DIR));
    let data_dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let (mappers, manifest) = load_checkpoint(&ckpt)?;
    let composer = load_composer_for(&cfg.config, &manifest, &ckpt)?;
    let (_, task) = read_task(&data_dir.join(TASK))?;
    let report = evaluate_report(&task, &mappers, &composer, &cfg.config.eval)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.report_path());
    write_json(&path, &report)?;
    cfg.echo(path.parent().unwrap_or(Path::new(".")))?;
    Ok((path, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub index: usize,
    pub argmax: usize,
    pub s: f32,
    pub selected: bool,
}

/// Mines the semantic set over consecutive blocks of `batch_size` rows (the
/// whole file when `None`); a trailing partial block is mined as is.
pub fn mine_sset(
    data: &PairDataset,
    sigma: f32,
    lambda: f32,
    batch_size: Option<usize>,
) -> Result<Vec<SelectionRow>> {
    let n = data.len();
    let b = batch_size.unwrap_or(n).max(1);
    let mut rows = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + b).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (v, w) = data.batch(&idx)?;
        let sel = sset::select(&v, &w, sigma, lambda)?;
        for i in 0..idx.len() {
            rows.push(SelectionRow {
                index: start + i,
                argmax: start + sel.argmax_index[i],
                s: sel.caption_similarity[i],
                selected: sel.mask[i],
            });
        }
        start = end;
    }
    Ok(rows)
}

pub fn cmd_mine_sset(
    images: &Path,
    texts: &Path,
    sigma: f32,
    lambda: f32,
    batch_size: Option<usize>,
    out: &Path,
) -> Result<Vec<SelectionRow>> {
    let (ids, v) = read_embeddings(images)?;
    let (tids, w) = read_embeddings(texts)?;
    if ids != tids {
        return Err(Error::format(texts, "ids differ from the image file"));
    }
    let data = PairDataset::new(v, w)?;
    let rows = mine_sset(&data, sigma, lambda, batch_size)?;
    write_jsonl(out, &rows)?;
    let echo = json!({
        "images": images,
        "texts": texts,
        "sigma": sigma,
        "lambda": lambda,
        "batch_size": batch_size,
        "prng": PRNG_NAME,
    });
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_json(&out.with_file_name(format!("{}.config.json", name)), &echo)?;
    Ok(rows)
}

/// Composes one query and returns its vector and top gallery hits.
pub fn cmd_compose(
    cfg: &LoadedConfig,
    checkpoint: Option<&Path>,
    data_dir: Option<&Path>,
    query_id: &str,
    top: usize,
) -> Result<Value> {
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir().join(CHECKPOINT_DIR));
    let data_dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let (mappers, manifest) = load_checkpoint(&ckpt)?;
    let composer = load_composer_for(&cfg.config, &manifest, &ckpt)?;
    let (_, task) = read_task(&data_dir.join(TASK))?;
    let q = task
        .queries
        .iter()
        .find(|q| q.query_id == query_id)
        .ok_or_else(|| Error::Lookup(query_id.to_string()))?;
    let gamma = cfg.config.gamma();
    let vec = retrieval::compose_query(q, &mappers, &composer, gamma)?;
    let ranked = retrieval::rank(&task.gallery, &vec, top)?;
    Ok(json!({
        "query_id": q.query_id,
        "gamma": gamma,
        "vector": vec.data(),
        "top": ranked.items,
        "target_ids": q.target_ids,
    }))
}
