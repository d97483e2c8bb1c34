//! The subcommands behind the `gemtrans` binary. Each returns its report and
//! writes its artifacts under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::metrics::{evaluate, MetricsReport};
use super::train::{batch_loss, train, History};
use crate::error::{GemtError, Result};
use crate::model::{infer, AttentionRecord, EncoderConfig, GemTransModel, Level, Mode, Task, VideoSample};
use crate::proto::{
    branch_accuracy, collect_tokens, prototype_similarity, train_prototype_branch, ProjectionEntry, PrototypeBank,
};
use crate::supervision::AttnLossWeights;
use crate::synth::{gen_split, make_splits, Split, Splits, SynthConfig};
use crate::tensor::{
    grad_check, gradcheck::grad_check_against, load_checkpoint, save_checkpoint, GradCheckReport, ParameterStore,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.gemt";
pub const CONFIG_FILE: &str = "config.txt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn projection_file(level: Level) -> String {
    format!("prototypes_{}.json", level.name())
}

/// Loads a checkpoint whose backbone matches `config`.
pub fn load_model(path: &Path, config: &EncoderConfig) -> Result<GemTransModel<f32>> {
    let template = GemTransModel::<f32>::init(config.clone(), 0)?;
    let params = load_checkpoint(path, &template.params)?;
    GemTransModel::from_params(config.clone(), params)
}

/// Prototype banks stored in a model, with projection tables read from the
/// JSON files next to the checkpoint when present.
pub fn load_banks(model: &GemTransModel<f32>, checkpoint: &Path) -> Result<Vec<PrototypeBank>> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let mut banks = vec![];
    for level in [Level::Spatial, Level::Temporal] {
        if let Some(mut bank) = PrototypeBank::from_params(&model.params, level)? {
            let file = dir.join(projection_file(level));
            if file.exists() {
                let map: std::collections::BTreeMap<String, ProjectionEntry> =
                    serde_json::from_str(&fs::read_to_string(file)?)?;
                bank.projection = map.into_values().collect();
            }
            banks.push(bank);
        }
    }
    Ok(banks)
}

// ── train ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct BranchSummary {
    pub level: &'static str,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub history: History,
    /// Test metrics of the best checkpoint.
    pub test: MetricsReport,
    pub prototypes: Vec<BranchSummary>,
}

/// Trains, keeps the best-validation parameters, and writes
/// `checkpoint.gemt`, `config.txt`, `history.json` and `metrics.json`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let splits = make_splits(&cfg.data)?;
    let outcome = train(cfg, &splits)?;
    let mut model = outcome.best;
    let test: Vec<&VideoSample> = splits.test.iter().collect();
    let test_metrics = evaluate(&model, &test, cfg.task, 32)?;

    let mut prototypes = vec![];
    if cfg.proto_train {
        let train: Vec<&VideoSample> = splits.train.iter().collect();
        let mut extra = ParameterStore::new();
        for level in [Level::Spatial, Level::Temporal] {
            let fit = train_prototype_branch(&model, &train, cfg.task, level, &cfg.proto)?;
            prototypes.push(BranchSummary {
                level: level.name(),
                train_accuracy: fit.train_accuracy,
                test_accuracy: branch_accuracy(&model, &fit.bank, &test, cfg.task, &cfg.proto)?,
                loss_history: fit.loss_history,
            });
            fs::write(out.join(projection_file(level)), fit.bank.projection_json()? + "\n")?;
            extra.merge(fit.bank.to_params()?);
        }
        model.params.merge(extra);
    }

    save_checkpoint(out.join(CHECKPOINT_FILE), &model.params)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_kv())?;
    write_json(&out.join("history.json"), &outcome.history)?;
    let report = TrainReport {
        history: outcome.history,
        test: test_metrics,
        prototypes,
    };
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({ "test": report.test, "prototypes": report.prototypes }),
    )?;
    Ok(report)
}

// ── eval ───────────────────────────────────────────────────────────

/// Metrics of a checkpoint on the test split generated from `cfg.data`.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, out: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let model = load_model(checkpoint, &cfg.model)?;
    let test = gen_split(&cfg.data, Split::Test)?;
    let refs: Vec<&VideoSample> = test.iter().collect();
    let report = evaluate(&model, &refs, cfg.task, 32)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(report)
}

// ── explain ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct PrototypeHit {
    pub level: &'static str,
    pub prototype: usize,
    pub class: usize,
    pub similarity: f64,
    /// Training token the prototype was projected onto.
    pub projection: Option<ProjectionEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Explanation {
    pub sample_id: String,
    pub task: Task,
    pub prediction: Vec<f64>,
    pub ef_label: Option<f32>,
    pub as_label: Option<usize>,
    /// Patch grid of the spatial attention.
    pub grid: [usize; 2],
    pub attention: AttentionRecord,
    pub prototypes: Vec<PrototypeHit>,
}

const TOP_PROTOTYPES: usize = 3;

fn find_samples(splits: &Splits, ids: &[String]) -> Result<Vec<VideoSample>> {
    ids.iter()
        .map(|id| {
            Split::ALL
                .iter()
                .flat_map(|&s| splits.get(s))
                .find(|s| &s.sample_id == id)
                .cloned()
                .ok_or_else(|| GemtError::arg("explain", format!("no sample with id `{id}`")))
        })
        .collect()
}

fn text_grid(e: &Explanation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sample {}  prediction {:?}", e.sample_id, e.prediction);
    for (k, video) in e.attention.spatial.iter().enumerate() {
        for (t, frame) in video.iter().enumerate() {
            let _ = writeln!(s, "\nspatial k={k} t={t}");
            for row in frame.chunks(e.grid[1]) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                let _ = writeln!(s, "  {}", cells.join(" "));
            }
        }
        let cells: Vec<String> = e.attention.temporal[k].iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(s, "\ntemporal k={k}\n  {}", cells.join(" "));
    }
    let cells: Vec<String> = e.attention.video.iter().map(|v| format!("{v:.3}")).collect();
    let _ = writeln!(s, "\nvideo\n  {}", cells.join(" "));
    for h in &e.prototypes {
        let _ = write!(
            s,
            "\n{} prototype {} (class {}) similarity {:.3}",
            h.level, h.prototype, h.class, h.similarity
        );
        if let Some(p) = &h.projection {
            let _ = write!(s, " <- {} k={} t={}", p.sample_id, p.k, p.t);
            if let Some(patch) = p.s {
                let _ = write!(s, " patch={patch}");
            }
        }
    }
    s.push('\n');
    s
}

/// Writes `{id}.json` per requested sample and a plain-text grid per sample
/// under `grids/`. Returns the JSON paths.
pub fn cmd_explain(checkpoint: &Path, cfg: &RunConfig, ids: &[String], out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let model = load_model(checkpoint, &cfg.model)?;
    let banks = load_banks(&model, checkpoint)?;
    let splits = make_splits(&cfg.data)?;
    let samples = find_samples(&splits, ids)?;
    let refs: Vec<&VideoSample> = samples.iter().collect();
    let inf = infer(&model, &refs, cfg.task, 32)?;
    let grid = [cfg.model.h / cfg.model.patch_size, cfg.model.w / cfg.model.patch_size];

    let mut hits: Vec<Vec<PrototypeHit>> = vec![vec![]; samples.len()];
    for bank in &banks {
        let caches = collect_tokens(&model, &refs, cfg.task, bank.level, &cfg.proto, 32)?;
        for (i, c) in caches.iter().enumerate() {
            let sims = prototype_similarity(&c.tokens, bank)?;
            let mut order: Vec<usize> = (0..sims.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            for &j in order.iter().take(TOP_PROTOTYPES) {
                hits[i].push(PrototypeHit {
                    level: bank.level.name(),
                    prototype: j,
                    class: bank.class_of(j),
                    similarity: sims[j],
                    projection: bank.projection.iter().find(|e| e.prototype == j).cloned(),
                });
            }
        }
    }

    fs::create_dir_all(out.join("grids"))?;
    let mut written = vec![];
    for (i, s) in samples.iter().enumerate() {
        let e = Explanation {
            sample_id: s.sample_id.clone(),
            task: cfg.task,
            prediction: inf.predictions[i].clone(),
            ef_label: s.ef_label,
            as_label: s.as_label,
            grid,
            attention: inf.attention[i].clone(),
            prototypes: std::mem::take(&mut hits[i]),
        };
        let path = out.join(format!("{}.json", s.sample_id));
        write_json(&path, &e)?;
        fs::write(out.join("grids").join(format!("{}.txt", s.sample_id)), text_grid(&e))?;
        written.push(path);
    }
    Ok(written)
}

// ── ablate ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub lambda_spatial: f64,
    pub lambda_temporal: f64,
    pub seed: u64,
    pub val_mae: Option<f64>,
    pub val_r2: Option<f64>,
    pub in_mask_fraction: Option<f64>,
    pub ed_es_mass: Option<f64>,
    pub best_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::from(
            "| run | λ_spatial | λ_temporal | val MAE | val R² | in-mask fraction | ED/ES mass |\n|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.name,
                r.lambda_spatial,
                r.lambda_temporal,
                f(r.val_mae),
                f(r.val_r2),
                f(r.in_mask_fraction),
                f(r.ed_es_mass)
            );
        }
        s
    }
}

pub const ABLATIONS: [(&str, bool, bool); 3] = [
    ("full", true, true),
    ("no-spatial", false, true),
    ("no-temporal", true, false),
];

/// Trains the full, no-spatial and no-temporal variants with one seed and
/// compares their final parameters on the validation split.
pub fn cmd_ablate(cfg: &RunConfig, out: Option<&Path>) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.task != Task::Ef {
        return Err(GemtError::Config("ablation runs on the EF task".into()));
    }
    let splits = make_splits(&cfg.data)?;
    let val: Vec<&VideoSample> = splits.val.iter().collect();
    let lambda = |on: bool, v: f64| {
        if on {
            if v > 0.0 {
                v
            } else {
                1.0
            }
        } else {
            0.0
        }
    };
    let mut rows = vec![];
    for (name, spatial, temporal) in ABLATIONS {
        let mut run = cfg.clone();
        run.attn = AttnLossWeights {
            lambda_spatial: lambda(spatial, cfg.attn.lambda_spatial),
            lambda_temporal: lambda(temporal, cfg.attn.lambda_temporal),
            ..cfg.attn
        };
        let outcome = train(&run, &splits)?;
        let last = evaluate(&outcome.last, &val, run.task, 32)?;
        rows.push(AblationRow {
            name,
            lambda_spatial: run.attn.lambda_spatial,
            lambda_temporal: run.attn.lambda_temporal,
            seed: run.seed,
            val_mae: last.mae,
            val_r2: last.r2,
            in_mask_fraction: last.in_mask_fraction,
            ed_es_mass: last.ed_es_mass,
            best_step: outcome.history.best_step,
        });
    }
    let report = AblationReport { rows };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("ablation.json"), &report)?;
        fs::write(dir.join("ablation.md"), report.to_table())?;
    }
    Ok(report)
}

// ── gradcheck ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    pub samples: usize,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of this parameter.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tol: 1e-4,
            samples: 2,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskGradcheck {
    pub task: Task,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub passed: bool,
    pub tasks: Vec<TaskGradcheck>,
}

impl GradcheckSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tasks {
            let r = &t.report;
            let _ = writeln!(
                s,
                "{} loss {:.6}  max rel error {:.3e}  {}",
                t.task.name(),
                r.loss,
                r.max_rel_error,
                if r.passed { "PASS" } else { "FAIL" }
            );
            for p in &r.params {
                let flag = if p.max_rel_error < r.tol { "" } else { "  <-- FAIL" };
                let _ = writeln!(s, "  {:<32} {:>5}  {:.3e}{flag}", p.path, p.numel, p.max_rel_error);
            }
        }
        s
    }
}

/// Configuration of the gradient check: the tiny model with two views.
pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        k: 2,
        ..EncoderConfig::tiny()
    }
}

/// Checks the full EF and AS objectives of the tiny model in 64-bit.
pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    let model_cfg = gradcheck_config();
    let model = GemTransModel::<f64>::init(model_cfg.clone(), opts.seed)?;
    let mut tasks = vec![];
    for task in [Task::Ef, Task::As] {
        let data = SynthConfig {
            seed: opts.seed,
            train: opts.samples,
            k: model_cfg.k,
            t: model_cfg.t,
            h: model_cfg.h,
            w: model_cfg.w,
            ..SynthConfig::new(task)
        };
        let samples = gen_split(&data, Split::Train)?;
        let refs: Vec<&VideoSample> = samples.iter().collect();
        let weights = match task {
            Task::Ef => AttnLossWeights::default(),
            Task::As => AttnLossWeights::disabled(),
        };
        let f = |tape: &mut crate::tensor::Tape<f64>, b: &crate::tensor::params::Bound| {
            Ok(batch_loss(tape, b, &model_cfg, &refs, task, &weights, &mut Mode::Eval)?.total)
        };
        let report = match &opts.corrupt {
            None => grad_check(f, &model.params, opts.h, opts.tol)?,
            Some(path) => {
                let (_, mut analytic) = crate::tensor::gradcheck::analytic_gradients(&f, &model.params)?;
                let g = analytic
                    .get_mut(path)
                    .map_err(|_| GemtError::UnknownParameter(path.clone()))?;
                for v in g.data_mut() {
                    *v = *v * 1.5 + 1e-3;
                }
                grad_check_against(&f, &model.params, &analytic, opts.h, opts.tol)?
            }
        };
        tasks.push(TaskGradcheck { task, report });
    }
    Ok(GradcheckSummary {
        passed: tasks.iter().all(|t| t.report.passed),
        tasks,
    })
}
