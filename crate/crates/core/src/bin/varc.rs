use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use varc::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use varc::config::RunConfig;
use varc::data::{load_taskset, merge_rearc, Grid, Split, Task, TaskSet};
use varc::geometry::dump::{heatmap_pixels, write_pgm};
use varc::geometry::place_input;
use varc::infer::{evaluate_taskset, multi_view_infer, predict_view, single_view_geometry, EvalReport};
use varc::synthetic::{held_out_set, micro_training_set, novel_rule_set};
use varc::train::{test_time_train, train_offline, AuxTask, EpochMetrics, TrainConfig};
use varc::vit::VitModel;

#[derive(Parser)]
#[command(name = "varc", version, about = "Grid puzzles as image-to-image translation with a vision transformer")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set base_lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load and validate a task set, optionally merging RE-ARC pairs.
    Ingest {
        /// Directory of task files or a single JSON file.
        data: PathBuf,
        #[arg(long)]
        rearc: Option<PathBuf>,
    },
    /// Offline training on every task's demonstration pairs.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Test-time training on one task; writes the adapted checkpoint.
    Ttt {
        #[command(flatten)]
        ck: CheckpointArg,
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Adapt to and score every task of an evaluation set.
    Eval {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Largest k of the pass@k curve.
        #[arg(short = 'k')]
        k: Option<usize>,
        /// Views per auxiliary frame.
        #[arg(long)]
        views: Option<usize>,
        /// Auxiliary frames used for adaptation and voting.
        #[arg(long)]
        aux: Option<usize>,
        #[arg(long)]
        joint_ttt: bool,
        /// One identity-frame view; reports pass@1 only.
        #[arg(long)]
        single_view: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt to one task and write the top two answers per input in ARC
    /// submission format.
    Predict {
        #[command(flatten)]
        ck: CheckpointArg,
        task: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention maps, task-embedding dumps and TTT progress snapshots.
    Inspect {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long)]
        task: Option<PathBuf>,
        /// `layer,row,col`; layer may be `all`.
        #[arg(long, value_name = "LAYER,ROW,COL")]
        attention: Option<String>,
        #[arg(long)]
        task_embeddings: bool,
        #[arg(long)]
        ttt_snapshots: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic micro-task sets used in tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 3)]
        demos: usize,
        #[arg(long, default_value_t = 5)]
        max_side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Config file, else the run config stored in the checkpoint, else defaults;
/// overrides go on top.
fn resolve_config(cli: &Cli, ck: Option<&Checkpoint>) -> Result<RunConfig> {
    if cli.config.is_none() {
        if let Some(run) = ck.map(|c| &c.meta.run).filter(|r| !r.is_null()) {
            let text = toml::to_string(run).map_err(config_err)?;
            return RunConfig::from_toml(&text, &cli.overrides).map_err(config_err);
        }
    }
    RunConfig::load(cli.config.as_deref(), &cli.overrides).map_err(config_err)
}

fn load_checkpoint(arg: &CheckpointArg) -> Result<Checkpoint> {
    let path = arg.checkpoint.as_deref().ok_or_else(|| config_err("--checkpoint is required"))?;
    Checkpoint::load(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path, split: Split, cfg: &RunConfig) -> Result<TaskSet> {
    let set = load_taskset(path, split).map_err(data_err)?;
    match &cfg.rearc_dir {
        Some(dir) if split == Split::Train => {
            let (merged, report) = merge_rearc(&set, dir, cfg.rearc_pairs_per_task, cfg.seed, cfg.rearc_with_replacement)
                .map_err(data_err)?;
            log::info!("merged {} RE-ARC pairs into {} tasks", report.pairs_added, report.tasks_extended);
            Ok(merged)
        }
        _ => Ok(set),
    }
}

fn require(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone()).ok_or_else(|| config_err(format!("no {what} given (flag or config key)")))
}

fn run_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

struct MetricsLog(Option<BufWriter<fs::File>>);

impl MetricsLog {
    fn open(path: Option<&Path>) -> Result<MetricsLog> {
        match path {
            None => Ok(MetricsLog(None)),
            Some(p) => {
                let f = fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| runtime_err(format!("{}: {e}", p.display())))?;
                Ok(MetricsLog(Some(BufWriter::new(f))))
            }
        }
    }

    fn write(&mut self, stage: &str, m: &EpochMetrics) {
        log::info!("{stage} epoch {} loss {:.4} lr {:.2e}{}", m.epoch, m.mean_loss, m.lr, m.val_exact.map(|v| format!(" val {v:.3}")).unwrap_or_default());
        if let Some(w) = &mut self.0 {
            let mut v = serde_json::to_value(m).expect("metrics serialize");
            v["stage"] = json!(stage);
            if writeln!(w, "{v}").and_then(|_| w.flush()).is_err() {
                log::warn!("could not append to metrics file");
            }
        }
    }
}

fn write_json(path: Option<&Path>, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializes");
    match path {
        Some(p) => write_atomic(p, format!("{text}\n").as_bytes()).map_err(|e| runtime_err(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Ingest { data, rearc } => {
            let mut cfg = resolve_config(&cli, None)?;
            if rearc.is_some() {
                cfg.rearc_dir = rearc.clone();
            }
            let mut set = load_taskset(data, Split::Train).map_err(data_err)?;
            let mut merge = None;
            if let Some(dir) = &cfg.rearc_dir {
                let (merged, m) =
                    merge_rearc(&set, dir, cfg.rearc_pairs_per_task, cfg.seed, cfg.rearc_with_replacement).map_err(data_err)?;
                set = merged;
                merge = Some(m);
            }
            let mut report = set.report();
            report.rearc = merge;
            write_json(None, &json!({ "report": report, "data_hash": set.content_hash() }))
        }
        Cmd::Train { data, out, metrics } => {
            let cfg = resolve_config(&cli, None)?;
            let data_path = require(data.clone(), &cfg.train_data, "training data")?;
            let out = require(out.clone(), &cfg.checkpoint, "checkpoint path")?;
            let set = load_data(&data_path, Split::Train, &cfg)?;
            let model_cfg = cfg.vit_config(set.len());
            let mut log = MetricsLog::open(metrics.as_deref().or(cfg.metrics.as_deref()))?;
            let trained = train_offline(&set, &model_cfg, &cfg.train_config(), &mut |m, _| log.write("train", m)).map_err(runtime_err)?;
            let meta = CheckpointMeta {
                model: model_cfg,
                seed: cfg.seed,
                epoch: cfg.epochs,
                data_hash: set.content_hash(),
                task_ids: set.task_ids(),
                adam_step: None,
                run: run_value(&cfg),
            };
            Checkpoint::from_model(&trained.model, Some(&trained.adam), meta).save(&out).map_err(runtime_err)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Ttt { ck, task, out, metrics } => {
            let base = load_checkpoint(ck)?;
            let cfg = resolve_config(&cli, Some(&base))?;
            let model = base.model().map_err(data_err)?;
            let task = Task::load(task).map_err(data_err)?;
            let mut log = MetricsLog::open(metrics.as_deref().or(cfg.metrics.as_deref()))?;
            let ttt = cfg.ttt_config();
            let adapted = test_time_train(&model, &task, &ttt, &mut |m, _| log.write("ttt", m)).map_err(runtime_err)?;
            let meta = CheckpointMeta {
                model: adapted.model.config().clone(),
                seed: cfg.seed,
                epoch: cfg.ttt_epochs,
                data_hash: base.meta.data_hash.clone(),
                task_ids: adapted.aux.iter().map(|a| format!("{}#aux{}", task.task_id, a.aux_index)).collect(),
                adam_step: None,
                run: run_value(&cfg),
            };
            Checkpoint::from_model(&adapted.model, None, meta).save(out).map_err(runtime_err)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Eval { ck, data, k, views, aux, joint_ttt, single_view, jobs, out } => {
            let base = load_checkpoint(ck)?;
            let mut cfg = resolve_config(&cli, Some(&base))?;
            if let Some(k) = k {
                cfg.max_k = *k;
            }
            if let Some(v) = views {
                cfg.views_per_aux = *v;
            }
            if let Some(a) = aux {
                cfg.num_aux = *a;
            }
            if let Some(j) = jobs {
                cfg.jobs = *j;
            }
            cfg.joint_ttt |= joint_ttt;
            cfg.single_view |= single_view;
            cfg.validate().map_err(config_err)?;
            let data_path = require(data.clone(), &cfg.eval_data, "evaluation data")?;
            let set = load_data(&data_path, Split::Eval, &cfg)?;
            let model = base.model().map_err(data_err)?;
            let mut report: EvalReport = evaluate_taskset(&model, &set, &cfg.eval_config());
            report.config = json!({ "run": run_value(&cfg), "seed": cfg.seed, "checkpoint_data_hash": base.meta.data_hash });
            for (k, v) in &report.pass_at_k {
                log::info!("pass@{k} = {v:.1}%");
            }
            write_json(out.as_deref().or(cfg.report.as_deref()), &report)
        }
        Cmd::Predict { ck, task, out } => {
            let base = load_checkpoint(ck)?;
            let cfg = resolve_config(&cli, Some(&base))?;
            let model = base.model().map_err(data_err)?;
            let task = Task::load(task).map_err(data_err)?;
            let adapted = test_time_train(&model, &task, &cfg.ttt_config(), &mut |_, _| {}).map_err(runtime_err)?;
            let infer = if cfg.single_view { cfg.infer_config().single_view() } else { cfg.infer_config() };
            let mut answers = Vec::new();
            for p in &task.infer {
                let attempts = match multi_view_infer(&adapted, &task.demo, &p.input, &infer) {
                    Ok(t) => t.ranked.iter().take(2).map(|e| e.grid.to_json()).collect::<Vec<_>>(),
                    Err(e) => {
                        log::error!("{}: {e}", task.task_id);
                        Vec::new()
                    }
                };
                let fallback = json!([[0]]);
                answers.push(json!({
                    "attempt_1": attempts.first().cloned().unwrap_or(fallback.clone()),
                    "attempt_2": attempts.get(1).cloned().unwrap_or(fallback),
                }));
            }
            write_json(out.as_deref(), &json!({ task.task_id.clone(): answers }))
        }
        Cmd::Inspect { ck, task, attention, task_embeddings, ttt_snapshots, out } => {
            let base = load_checkpoint(ck)?;
            let cfg = resolve_config(&cli, Some(&base))?;
            let model = base.model().map_err(data_err)?;
            fs::create_dir_all(out).map_err(runtime_err)?;
            if !(*task_embeddings || *ttt_snapshots || attention.is_some()) {
                return Err(config_err("nothing to inspect: pass --attention, --task-embeddings or --ttt-snapshots"));
            }
            if *task_embeddings {
                dump_task_embeddings(&model, &base.meta.task_ids, &out.join("task_embeddings.csv"))?;
            }
            if attention.is_some() || *ttt_snapshots {
                let path = task.as_deref().ok_or_else(|| config_err("--task is required for --attention and --ttt-snapshots"))?;
                let task = Task::load(path).map_err(data_err)?;
                if let Some(spec) = attention {
                    dump_attention(&model, &task, spec, out)?;
                }
                if *ttt_snapshots {
                    ttt_snapshots_run(&model, &task, &cfg, out)?;
                }
            }
            Ok(())
        }
        Cmd::Synth { out, pairs, demos, max_side, seed } => {
            fs::create_dir_all(out).map_err(runtime_err)?;
            for (name, set) in [
                ("train", micro_training_set(*seed, *pairs, 1, *max_side)),
                ("eval", held_out_set(seed.wrapping_add(1), *demos, *max_side)),
                ("novel", novel_rule_set(seed.wrapping_add(2), *demos, *max_side)),
            ] {
                let dir = out.join(name);
                fs::create_dir_all(&dir).map_err(runtime_err)?;
                for t in set.tasks() {
                    write_json(Some(&dir.join(format!("{}.json", t.task_id))), &t.to_json())?;
                }
            }
            Ok(())
        }
    }
}

fn dump_task_embeddings(model: &VitModel, ids: &[String], path: &Path) -> Result<()> {
    let t = model.task_embeddings();
    let (rows, h) = (t.shape()[0], t.shape()[1]);
    let mut text = String::from("task_id");
    for j in 0..h {
        text.push_str(&format!(",e{j}"));
    }
    text.push('\n');
    for r in 0..rows {
        text.push_str(ids.get(r).map(String::as_str).unwrap_or(""));
        for v in &t.data()[r * h..(r + 1) * h] {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(runtime_err)
}

fn dump_attention(model: &VitModel, task: &Task, spec: &str, out: &Path) -> Result<()> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [layer, row, col] = parts[..] else {
        return Err(config_err(format!("--attention expects layer,row,col, got `{spec}`")));
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| config_err(format!("`{s}` in --attention is not a number")));
    let (row, col) = (num(row)?, num(col)?);
    let depth = model.config().depth;
    let layers: Vec<usize> = if layer == "all" { (0..depth).collect() } else { vec![num(layer)?] };
    let s = model.config().canvas_size;
    if layers.iter().any(|&l| l >= depth) || row >= s || col >= s {
        return Err(config_err(format!("--attention {spec} is outside depth {depth} / canvas {s}")));
    }
    let x = task.infer.first().map(|p| &p.input).unwrap_or(&task.demo[0].input);
    let geom = single_view_geometry(&task.demo, x, &AuxTask::IDENTITY, &TrainConfig::ttt().view_sampling(s))
        .ok_or_else(|| runtime_err("input does not fit on the canvas"))?;
    let canvas = place_input(x, &geom, s).map_err(runtime_err)?;
    for l in layers {
        let (logits, probs) = model.attention_probe(&canvas, 0, l, row, col).map_err(runtime_err)?;
        for (kind, values) in [("logits", logits), ("softmax", probs)] {
            let path = out.join(format!("attention_l{l}_r{row}_c{col}_{kind}.pgm"));
            let mut bytes = Vec::new();
            write_pgm(&mut bytes, s, s, &heatmap_pixels(&values)).map_err(runtime_err)?;
            write_atomic(&path, &bytes).map_err(runtime_err)?;
        }
    }
    Ok(())
}

/// Runs TTT on `task`, writing the identity-frame prediction for each
/// inference input after every epoch.
fn ttt_snapshots_run(model: &VitModel, task: &Task, cfg: &RunConfig, out: &Path) -> Result<()> {
    let ttt = cfg.ttt_config();
    let vs = ttt.train.view_sampling(model.config().canvas_size);
    let mut failed = None;
    let mut observer = |m: &EpochMetrics, current: &VitModel| {
        let preds: Vec<Value> = task
            .infer
            .iter()
            .map(|p| {
                single_view_geometry(&task.demo, &p.input, &AuxTask::IDENTITY, &vs)
                    .and_then(|g| predict_view(current, 0, &p.input, &AuxTask::IDENTITY, &g).ok())
                    .map(|g: Grid| g.to_json())
                    .unwrap_or(Value::Null)
            })
            .collect();
        let path = out.join(format!("ttt_epoch_{:04}.json", m.epoch));
        let text = serde_json::to_string(&json!({ task.task_id.clone(): preds, "epoch": m.epoch, "loss": m.mean_loss })).expect("serializes");
        if let Err(e) = write_atomic(&path, text.as_bytes()) {
            failed = Some(e);
        }
    };
    test_time_train(model, task, &ttt, &mut observer).map_err(runtime_err)?;
    match failed {
        Some(e) => Err(runtime_err(e)),
        None => Ok(()),
    }
}
