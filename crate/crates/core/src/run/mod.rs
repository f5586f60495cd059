//! Batch rating runs: crop, prompt, query, parse, record, and paint cost-maps.
//!
//! A run directory holds:
//!
//! - `run.json`: the resolved configuration (no credentials; only the names
//!   of the environment variables that hold them);
//! - `predictions.jsonl`: one [`PredictionRecord`] per (backend, temperature,
//!   strategy, query mode, robot, instance), in a fixed order;
//! - `errors.jsonl`: queries that got no model answer in the latest
//!   invocation; they are retried when the run is resumed;
//! - `costmaps/<image_id>.png` + `.meta.json` and `overlays/<image_id>.png`;
//! - `crops/<instance_id>.png` when `save_crops` is on.
//!
//! Rerunning the same config skips every query whose records are already
//! present, so an interrupted run resumes without repaying finished queries.

mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::costmap::{build_costmap, render_overlay, rgb_to_png, CostInput, CostMapError, InstanceOutcome};
use crate::dataset::{load_manifest, DatasetError, DatasetManifest};
use crate::eval::{config_key, read_predictions, EvalError, PredictionOutcome, PredictionRecord, PREDICTIONS_FILE};
use crate::extract::{annotate_scene, extract_instance, ExtractError};
use crate::gateway::{for_each_bounded, Gateway, GatewayError, VlmRequest};
use crate::parser::parse_rating;
use crate::prompt::{PromptError, PromptSpec, PromptStrategy, QueryMode, TemplateSet};

pub use config::{CostmapConfig, RunConfig};

pub const RUN_FILE: &str = "run.json";
pub const ERRORS_FILE: &str = "errors.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    CostMap(#[from] CostMapError),
    #[error(transparent)]
    Records(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A query that produced no model answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub run_id: String,
    pub model_tag: String,
    pub strategy: PromptStrategy,
    pub temperature: f64,
    pub query_mode: QueryMode,
    pub robot_id: String,
    pub image_id: String,
    pub instance_ids: Vec<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub queries_total: usize,
    pub queries_skipped: usize,
    pub queries_sent: usize,
    pub predictions_written: usize,
    pub parse_failures: usize,
    pub query_errors: usize,
    pub costmaps_written: usize,
}

/// One model request: a configuration plus the instances it covers.
#[derive(Debug, Clone)]
struct Query {
    backend: usize,
    temperature: f64,
    strategy: PromptStrategy,
    mode: QueryMode,
    robot: usize,
    image: usize,
    instances: Vec<usize>,
}

struct Plan<'a> {
    config: &'a RunConfig,
    manifest: &'a DatasetManifest,
    robots: Vec<usize>,
    labels: Vec<String>,
}

impl Plan<'_> {
    fn keys(&self, q: &Query) -> Vec<String> {
        q.instances
            .iter()
            .map(|&i| {
                config_key(
                    &self.labels[q.backend],
                    q.strategy,
                    q.temperature,
                    q.mode,
                    &self.manifest.robots[q.robot].id,
                    &self.manifest.instances[i].id,
                )
            })
            .collect()
    }

    /// Every query of the run, in the order their records are written.
    fn queries(&self) -> Vec<Query> {
        let mut out = Vec::new();
        for (b, backend) in self.config.backends.iter().enumerate() {
            for temperature in self.config.temperatures_for(backend) {
                for &strategy in &self.config.strategies {
                    for &mode in &self.config.query_modes {
                        for &robot in &self.robots {
                            for (image, record) in self.manifest.images.iter().enumerate() {
                                let members: Vec<usize> = self
                                    .manifest
                                    .instances
                                    .iter()
                                    .enumerate()
                                    .filter(|(_, i)| i.image_id == record.id)
                                    .map(|(k, _)| k)
                                    .collect();
                                let q = |instances| Query {
                                    backend: b,
                                    temperature,
                                    strategy,
                                    mode,
                                    robot,
                                    image,
                                    instances,
                                };
                                match mode {
                                    QueryMode::PerInstanceCrop => {
                                        out.extend(members.iter().map(|&k| q(vec![k])))
                                    }
                                    QueryMode::FullImageAllInstances if !members.is_empty() => {
                                        out.push(q(members))
                                    }
                                    QueryMode::FullImageAllInstances => {}
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

enum QueryOutput {
    Records(Vec<PredictionRecord>),
    Error(ErrorRecord),
}

/// Writes query outputs in plan order even though they finish out of order.
struct OrderedWriter {
    next: usize,
    pending: BTreeMap<usize, QueryOutput>,
    predictions: File,
    predictions_path: PathBuf,
    errors: File,
    errors_path: PathBuf,
    written: usize,
    parse_failures: usize,
    query_errors: usize,
    io_error: Option<RunError>,
}

impl OrderedWriter {
    fn submit(&mut self, position: usize, output: QueryOutput) {
        self.pending.insert(position, output);
        while let Some(out) = self.pending.remove(&self.next) {
            self.next += 1;
            if let Err(e) = self.write(out) {
                self.io_error.get_or_insert(e);
            }
        }
    }

    fn write(&mut self, output: QueryOutput) -> Result<(), RunError> {
        match output {
            QueryOutput::Records(records) => {
                let mut buf = String::new();
                for r in &records {
                    buf.push_str(&serde_json::to_string(r).expect("record serializes"));
                    buf.push('\n');
                    if matches!(r.outcome, PredictionOutcome::Failure { .. }) {
                        self.parse_failures += 1;
                    }
                }
                self.predictions
                    .write_all(buf.as_bytes())
                    .map_err(io_err(&self.predictions_path))?;
                self.written += records.len();
            }
            QueryOutput::Error(e) => {
                let mut line = serde_json::to_string(&e).expect("error record serializes");
                line.push('\n');
                self.errors
                    .write_all(line.as_bytes())
                    .map_err(io_err(&self.errors_path))?;
                self.query_errors += 1;
            }
        }
        Ok(())
    }
}

/// Lines of an existing predictions file, minus a torn last line.
fn existing_lines(path: &Path) -> Result<Vec<String>, RunError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut lines: Vec<&str> = text.split_inclusive('\n').collect();
    if lines.last().is_some_and(|l| !l.ends_with('\n')) {
        tracing::warn!("dropping torn last line of {}", path.display());
        lines.pop();
    }
    Ok(lines
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim_end_matches('\n').to_string())
        .collect())
}

/// Keep only records of queries that were recorded completely, once each.
/// Returns the kept lines and the set of finished config keys.
fn resume_state(
    lines: Vec<String>,
    path: &Path,
    queries: &[Query],
    plan: &Plan<'_>,
) -> Result<(Vec<String>, HashSet<String>), RunError> {
    let mut by_key: BTreeMap<String, String> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, line) in lines.into_iter().enumerate() {
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| {
            RunError::Records(EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })?;
        let key = rec.config_key();
        if by_key.insert(key.clone(), line).is_none() {
            order.push(key);
        }
    }
    let mut complete = HashSet::new();
    for q in queries {
        let keys = plan.keys(q);
        if keys.iter().all(|k| by_key.contains_key(k)) {
            complete.extend(keys);
        }
    }
    let kept = order
        .into_iter()
        .filter(|k| complete.contains(k))
        .map(|k| by_key.remove(&k).expect("key recorded"))
        .collect();
    Ok((kept, complete))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Loaded {
    image: RgbImage,
    masks: Vec<GrayImage>,
}

fn load_scene(manifest: &DatasetManifest, q: &Query) -> Result<Loaded, RunError> {
    let image = manifest.load_image(&manifest.images[q.image])?;
    let masks = q
        .instances
        .iter()
        .map(|&i| manifest.load_mask(&manifest.instances[i]))
        .collect::<Result<_, _>>()?;
    Ok(Loaded { image, masks })
}

fn build_request(
    plan: &Plan<'_>,
    templates: &TemplateSet,
    gateway: &Gateway,
    q: &Query,
) -> Result<(VlmRequest, Vec<String>), RunError> {
    let manifest = plan.manifest;
    let ids: Vec<String> = q
        .instances
        .iter()
        .map(|&i| manifest.instances[i].id.clone())
        .collect();
    let scene = load_scene(manifest, q)?;
    let crop_spec = &plan.config.crop;
    let mut images = Vec::new();
    if q.mode == QueryMode::FullImageAllInstances {
        let masks: Vec<&GrayImage> = scene.masks.iter().collect();
        images.push(annotate_scene(&scene.image, &masks, crop_spec)?);
    }
    for (id, mask) in ids.iter().zip(&scene.masks) {
        images.push(extract_instance(&scene.image, id, mask, crop_spec)?.pixels);
    }
    let spec = PromptSpec::new(manifest.robots[q.robot].clone(), q.strategy, q.mode, ids.clone())?;
    let request = VlmRequest {
        prompt: templates.render(&spec),
        images,
        temperature: q.temperature,
        max_output_tokens: gateway.config().max_output_tokens,
    };
    Ok((request, ids))
}

fn run_query(
    plan: &Plan<'_>,
    templates: &TemplateSet,
    gateway: &Gateway,
    q: &Query,
) -> QueryOutput {
    let manifest = plan.manifest;
    let config = plan.config;
    let robot_id = manifest.robots[q.robot].id.clone();
    let image_id = manifest.images[q.image].id.clone();
    let error = |detail: String, ids: Vec<String>| {
        QueryOutput::Error(ErrorRecord {
            run_id: config.run_id.clone(),
            model_tag: plan.labels[q.backend].clone(),
            strategy: q.strategy,
            temperature: q.temperature,
            query_mode: q.mode,
            robot_id: robot_id.clone(),
            image_id: image_id.clone(),
            instance_ids: ids,
            error: detail,
        })
    };
    let all_ids = || -> Vec<String> {
        q.instances.iter().map(|&i| manifest.instances[i].id.clone()).collect()
    };
    let (request, ids) = match build_request(plan, templates, gateway, q) {
        Ok(r) => r,
        Err(e) => return error(e.to_string(), all_ids()),
    };

    let mut parse_attempts = 0;
    let (response, parsed) = loop {
        parse_attempts += 1;
        let response = match gateway.send(&request) {
            Ok(r) => r,
            Err(e) => return error(e.to_string(), ids),
        };
        let parsed = parse_rating(&response.raw_text, &ids);
        if parsed.is_ok() || parse_attempts > config.parse_retries {
            break (response, parsed);
        }
        tracing::debug!(image = %image_id, robot = %robot_id, "unparseable answer, asking again");
    };

    let records = ids
        .iter()
        .map(|id| {
            let (outcome, tier) = match &parsed {
                Ok(p) => (PredictionOutcome::Rating(p.ratings[id]), Some(p.extraction_tier)),
                Err(f) => (
                    PredictionOutcome::Failure {
                        reason: f.reason,
                        excerpt: f.excerpt.clone(),
                    },
                    None,
                ),
            };
            PredictionRecord {
                run_id: config.run_id.clone(),
                image_id: image_id.clone(),
                instance_id: id.clone(),
                robot_id: robot_id.clone(),
                model_tag: plan.labels[q.backend].clone(),
                strategy: q.strategy,
                temperature: q.temperature,
                query_mode: q.mode,
                outcome,
                extraction_tier: tier,
                latency_ms: response.latency_ms,
                attempts: response.attempt_count,
                parse_attempts,
            }
        })
        .collect();
    QueryOutput::Records(records)
}

fn resolve_robots(config: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<usize>, RunError> {
    match &config.robots {
        None => Ok((0..manifest.robots.len()).collect()),
        Some(ids) => ids
            .iter()
            .map(|id| {
                manifest
                    .robots
                    .iter()
                    .position(|r| &r.id == id)
                    .ok_or_else(|| RunError::Config(format!("robot {id} is not in the manifest")))
            })
            .collect(),
    }
}

/// Run with gateways built from the config's backends.
pub fn execute(config: &RunConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let gateways = config
        .backends
        .iter()
        .enumerate()
        .map(|(i, b)| Ok(Gateway::from_config(b.clone())?.with_seed(config.seed.wrapping_add(i as u64))))
        .collect::<Result<Vec<_>, RunError>>()?;
    execute_with(config, gateways)
}

/// Run with caller-supplied gateways, one per configured backend, in order.
pub fn execute_with(config: &RunConfig, gateways: Vec<Gateway>) -> Result<RunSummary, RunError> {
    config.validate()?;
    if gateways.len() != config.backends.len() {
        return Err(RunError::Config(format!(
            "{} gateways for {} backends",
            gateways.len(),
            config.backends.len()
        )));
    }
    let manifest = load_manifest(&config.dataset)?;
    let robots = resolve_robots(config, &manifest)?;
    let templates = match &config.prompts_dir {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let plan = Plan {
        config,
        manifest: &manifest,
        robots,
        labels: config.backends.iter().map(|b| b.label().to_string()).collect(),
    };

    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let mut snapshot = config.clone();
    snapshot.dataset = manifest.root.canonicalize().unwrap_or(manifest.root.clone());
    let mut run_json = serde_json::to_string_pretty(&snapshot).expect("config serializes");
    run_json.push('\n');
    write_atomic(&run_dir.join(RUN_FILE), run_json.as_bytes())?;

    if config.save_crops {
        save_crops(&plan, &run_dir)?;
    }

    let queries = plan.queries();
    let predictions_path = run_dir.join(PREDICTIONS_FILE);
    let lines = existing_lines(&predictions_path)?;
    let n_lines = lines.len();
    let (kept, done) = resume_state(lines, &predictions_path, &queries, &plan)?;
    // Rewritten even when nothing was dropped, to shed a torn last line.
    if predictions_path.exists() {
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_atomic(&predictions_path, text.as_bytes())?;
    }
    if kept.len() != n_lines {
        tracing::warn!("discarded {} records of incomplete queries", n_lines - kept.len());
    }

    let pending: Vec<&Query> = queries
        .iter()
        .filter(|q| !plan.keys(q).iter().all(|k| done.contains(k)))
        .collect();
    tracing::info!(
        total = queries.len(),
        pending = pending.len(),
        "run {} in {}",
        config.run_id,
        run_dir.display()
    );

    let errors_path = run_dir.join(ERRORS_FILE);
    let writer = Mutex::new(OrderedWriter {
        next: 0,
        pending: BTreeMap::new(),
        predictions: OpenOptions::new()
            .create(true)
            .append(true)
            .open(&predictions_path)
            .map_err(io_err(&predictions_path))?,
        predictions_path: predictions_path.clone(),
        errors: File::create(&errors_path).map_err(io_err(&errors_path))?,
        errors_path,
        written: 0,
        parse_failures: 0,
        query_errors: 0,
        io_error: None,
    });

    // Backends run one after another; each keeps its own bound on parallel requests.
    let mut offset = 0;
    for (b, gateway) in gateways.iter().enumerate() {
        let batch: Vec<&Query> = pending.iter().copied().filter(|q| q.backend == b).collect();
        for_each_bounded(
            batch.len(),
            gateway.config().max_parallel,
            |i| run_query(&plan, &templates, gateway, batch[i]),
            |i, out| {
                writer
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .submit(offset + i, out)
            },
        );
        offset += batch.len();
    }
    let writer = writer.into_inner().unwrap_or_else(|e| e.into_inner());
    if let Some(e) = writer.io_error {
        return Err(e);
    }

    let costmaps_written = write_costmaps(&plan, &run_dir)?;
    Ok(RunSummary {
        run_dir,
        queries_total: queries.len(),
        queries_skipped: queries.len() - pending.len(),
        queries_sent: pending.len(),
        predictions_written: writer.written,
        parse_failures: writer.parse_failures,
        query_errors: writer.query_errors,
        costmaps_written,
    })
}

fn save_crops(plan: &Plan<'_>, run_dir: &Path) -> Result<(), RunError> {
    let dir = run_dir.join("crops");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = plan.manifest;
    for image in &manifest.images {
        let pixels = manifest.load_image(image)?;
        for inst in manifest.instances_of(&image.id) {
            let mask = manifest.load_mask(inst)?;
            let crop = extract_instance(&pixels, &inst.id, &mask, &plan.config.crop)?;
            let path = dir.join(format!("{}.png", inst.id));
            fs::write(&path, rgb_to_png(&crop.pixels)?).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Paint the primary configuration's predictions for every image.
fn write_costmaps(plan: &Plan<'_>, run_dir: &Path) -> Result<usize, RunError> {
    let config = plan.config;
    let sel = &config.costmap;
    let backend = match &sel.backend {
        Some(b) => plan.labels.iter().position(|l| l == b).expect("validated"),
        None => 0,
    };
    let temperature = sel
        .temperature
        .unwrap_or_else(|| config.temperatures_for(&config.backends[backend])[0]);
    let strategy = sel.strategy.unwrap_or(config.strategies[0]);
    let query_mode = sel.query_mode.unwrap_or(config.query_modes[0]);
    let robot_id = match &sel.robot {
        Some(r) => r.clone(),
        None => plan.manifest.robots[plan.robots[0]].id.clone(),
    };
    let label = &plan.labels[backend];

    let records = read_predictions(run_dir.join(PREDICTIONS_FILE))?;
    let outcomes: BTreeMap<&str, &PredictionOutcome> = records
        .iter()
        .filter(|r| {
            &r.model_tag == label
                && r.strategy == strategy
                && r.temperature == temperature
                && r.query_mode == query_mode
                && r.robot_id == robot_id
        })
        .map(|r| (r.instance_id.as_str(), &r.outcome))
        .collect();

    let cost_dir = run_dir.join("costmaps");
    let overlay_dir = run_dir.join("overlays");
    for d in [&cost_dir, &overlay_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mapping = sel.mapping();
    let manifest = plan.manifest;
    let mut written = 0;
    for image in &manifest.images {
        let pixels = manifest.load_image(image)?;
        let instances: Vec<_> = manifest.instances_of(&image.id).collect();
        let masks = instances
            .iter()
            .map(|i| manifest.load_mask(i))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs: Vec<CostInput<'_>> = instances
            .iter()
            .zip(&masks)
            .map(|(inst, mask)| CostInput {
                instance_id: &inst.id,
                mask,
                outcome: match outcomes.get(inst.id.as_str()) {
                    Some(PredictionOutcome::Rating(r)) => InstanceOutcome::Rated(*r),
                    Some(PredictionOutcome::Failure { reason, .. }) => InstanceOutcome::Failed(*reason),
                    None => InstanceOutcome::Missing,
                },
            })
            .collect();
        let costmap = build_costmap(&inputs, image.width, image.height, &mapping)?;
        let png = cost_dir.join(format!("{}.png", image.id));
        fs::write(&png, costmap.to_png()?).map_err(io_err(&png))?;
        let meta = cost_dir.join(format!("{}.meta.json", image.id));
        let mut sidecar = serde_json::to_string_pretty(&costmap.sidecar(&image.id, &config.run_id))
            .expect("sidecar serializes");
        sidecar.push('\n');
        fs::write(&meta, sidecar).map_err(io_err(&meta))?;
        let overlay = render_overlay(&pixels, &costmap, sel.overlay_alpha)?;
        let path = overlay_dir.join(format!("{}.png", image.id));
        fs::write(&path, rgb_to_png(&overlay)?).map_err(io_err(&path))?;
        written += 1;
    }
    Ok(written)
}
