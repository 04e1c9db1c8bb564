//! The `dap` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dap_core::decoder::ground;
use dap_core::metrics::{alignment_populations, upsample_grid, MetricsReport};
use dap_core::model::{patch_norm_map, Model};
use dap_core::prompting::PromptLayers;
use dap_core::relevance::PromptMap;
use dap_core::synth::{generate_range, Sample};
use dap_core::trainer::{self, Ablation, Prompts, RunRecord, TrainConfig};
use dap_core::DapError;
use serde_json::json;

use crate::checkpoint;
use crate::config::{schema_help, AppConfig};
use crate::dataset;
use crate::error::{AppError, AppResult};
use crate::fsutil;
use crate::plots;
use crate::prompt_cache;

#[derive(Debug, Parser)]
#[command(name = "dap", version, about = "Relevance-prompted training and evaluation of text grounding on synthetic lesion images")]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RequiredConfig {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct OptionalConfig {
    /// Flat JSON config file; only evaluation keys (train.theta) are read.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// Retrain with Φ corrupted at each `--k`.
    Robustness,
    /// The four loss/prompt configurations.
    Ablation,
    /// Prompted layer sets: last, first-half, last-half, full.
    Layers,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split.
    #[command(after_help = schema_help())]
    Synth {
        #[command(flatten)]
        cfg: RequiredConfig,
        #[arg(long)]
        n: usize,
        /// First sample id; disjoint id ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline with the global contrastive loss only.
    #[command(after_help = schema_help())]
    Pretrain {
        #[command(flatten)]
        cfg: RequiredConfig,
        #[arg(long)]
        data: PathBuf,
        /// Split scored into metrics.json (defaults to --data).
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract Φ for every sample with a frozen model and cache it.
    #[command(name = "extract-prompts", after_help = schema_help())]
    ExtractPrompts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompted training from a baseline checkpoint.
    #[command(after_help = schema_help())]
    Train {
        #[command(flatten)]
        cfg: RequiredConfig,
        /// Baseline checkpoint; also the Φ extractor when --prompts is absent.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Φ cache from `extract-prompts`.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Dice fine-tuning on the first k samples with ground-truth masks.
    #[command(after_help = schema_help())]
    Finetune {
        #[command(flatten)]
        cfg: RequiredConfig,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to train.few_shot_k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint; writes a MetricsReport.
    #[command(after_help = schema_help())]
    Eval {
        #[command(flatten)]
        cfg: OptionalConfig,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: PathBuf,
        /// Include norm-overlap, alignment and strata diagnostics.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Norm-map overlays, cosine histograms and strata tables.
    #[command(after_help = schema_help())]
    Diagnose {
        #[command(flatten)]
        cfg: OptionalConfig,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also histogram the prompted encoding with this Φ cache.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Samples rendered as overlays.
        #[arg(long, default_value_t = 8)]
        overlays: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Robustness, ablation or layer-set sweeps from one baseline.
    #[command(after_help = schema_help())]
    Sweep {
        #[command(flatten)]
        cfg: RequiredConfig,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepKind::Robustness)]
        kind: SweepKind,
        /// Corruption percentages for the robustness sweep.
        #[arg(long, value_delimiter = ',', default_value = "0,10,30,50,70")]
        k: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample Dice of the model against its Φ pseudo-labels.
    #[command(name = "self-enhance", after_help = schema_help())]
    SelfEnhance {
        #[command(flatten)]
        cfg: OptionalConfig,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        json: PathBuf,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Synth { cfg, n, start, out } => {
            let c = load_required(&cfg)?;
            let samples = generate_range(&c.synth, start..start + n)?;
            dataset::save(&out, &samples, Some(&c.synth))?;
            log::info!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Command::Pretrain { cfg, data, eval, out } => {
            let c = load_required(&cfg)?;
            let train = dataset::load(&data)?;
            let eval = load_eval(eval.as_deref(), &data, &train)?;
            let started = Instant::now();
            let mut model = Model::new(c.model.clone())?;
            let tc = c.pretrain_config();
            let result = trainer::pretrain_baseline(&mut model, &train, &tc);
            let record = guard_divergence(result, &out, "baseline", &model)?;
            finish_run(&out, "baseline", &c, &model, record, &eval, started)?;
            Ok(())
        }
        Command::ExtractPrompts { model, data, out } => {
            let (m, _) = checkpoint::load(&model)?;
            let samples = dataset::load(&data)?;
            let prompts = trainer::extract_prompts(&m, &samples)?;
            let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
            prompt_cache::save(&out, &ids, &prompts)?;
            log::info!("cached {} prompts in {}", prompts.len(), out.display());
            Ok(())
        }
        Command::Train { cfg, model, data, prompts, eval, out, ablation } => {
            let c = load_required(&cfg)?;
            let ablation: Ablation = ablation.parse()?;
            let (baseline, _) = checkpoint::load(&model)?;
            check_model_matches(&baseline, &c)?;
            let train = dataset::load(&data)?;
            let eval = load_eval(eval.as_deref(), &data, &train)?;
            let tc = ablation.apply(&c.train);
            let started = Instant::now();
            let mut m = baseline.clone();
            let result = match &prompts {
                Some(dir) => {
                    let maps = prompt_cache::load_for(dir, &train)?;
                    trainer::train_dap(&mut m, &train, Prompts::Cached(&maps), &tc)
                }
                None => trainer::train_dap(&mut m, &train, Prompts::OnTheFly(&baseline), &tc),
            };
            let record = guard_divergence(result, &out, "dap", &m)?;
            finish_run(&out, "dap", &c, &m, record, &eval, started)?;
            Ok(())
        }
        Command::Finetune { cfg, model, data, k, eval, out } => {
            let c = load_required(&cfg)?;
            let (mut m, _) = checkpoint::load(&model)?;
            let train = dataset::load(&data)?;
            let eval = load_eval(eval.as_deref(), &data, &train)?;
            let k = k.unwrap_or(c.train.few_shot_k);
            let started = Instant::now();
            let result = trainer::finetune_fewshot(&mut m, &train, k, &c.train);
            let record = guard_divergence(result, &out, "finetuned", &m)?;
            finish_run(&out, "finetuned", &c, &m, record, &eval, started)?;
            Ok(())
        }
        Command::Eval { cfg, model, data, json, diagnostics } => {
            let theta = load_optional(&cfg)?.train.theta;
            let (m, _) = checkpoint::load(&model)?;
            let samples = dataset::load(&data)?;
            let report = trainer::evaluate(&m, &samples, theta, diagnostics)?;
            fsutil::write_json(&json, &report)?;
            log::info!("cnr {:.4} pg {:.4} dice {:.4} iou {:.4}", report.cnr, report.pg, report.dice, report.iou);
            Ok(())
        }
        Command::Diagnose { cfg, model, data, prompts, overlays, out } => {
            let theta = load_optional(&cfg)?.train.theta;
            let (m, _) = checkpoint::load(&model)?;
            let samples = dataset::load(&data)?;
            let maps = prompts.as_deref().map(|d| prompt_cache::load_for(d, &samples)).transpose()?;
            diagnose(&m, &samples, maps.as_deref(), theta, overlays, &out)
        }
        Command::Sweep { cfg, model, data, prompts, eval, kind, k, out } => {
            let c = load_required(&cfg)?;
            let (baseline, _) = checkpoint::load(&model)?;
            check_model_matches(&baseline, &c)?;
            let train = dataset::load(&data)?;
            let test = dataset::load(&eval)?;
            let maps = match prompts {
                Some(dir) => prompt_cache::load_for(&dir, &train)?,
                None => trainer::extract_prompts(&baseline, &train)?,
            };
            sweep(&baseline, &train, &maps, &test, kind, &k, &c, &out)
        }
        Command::SelfEnhance { cfg, model, data, prompts, json } => {
            let theta = load_optional(&cfg)?.train.theta;
            let (m, _) = checkpoint::load(&model)?;
            let samples = dataset::load(&data)?;
            let maps = prompt_cache::load_for(&prompts, &samples)?;
            let report = trainer::self_enhancement_report(&m, &samples, &maps, theta)?;
            fsutil::write_json(&json, &report)?;
            log::info!(
                "fraction above {:.3}, median dice model {:.4} vs prompt {:.4}",
                report.fraction_above,
                report.median_dice_model,
                report.median_dice_prompt
            );
            Ok(())
        }
    }
}

fn load_required(cfg: &RequiredConfig) -> AppResult<AppConfig> {
    AppConfig::load(Some(&cfg.config), &cfg.overrides)
}

fn load_optional(cfg: &OptionalConfig) -> AppResult<AppConfig> {
    AppConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

fn load_eval(eval: Option<&Path>, data: &Path, train: &[Sample]) -> AppResult<Vec<Sample>> {
    match eval {
        Some(p) if p != data => dataset::load(p),
        _ => Ok(train.to_vec()),
    }
}

fn check_model_matches(model: &Model, c: &AppConfig) -> AppResult<()> {
    let v = &model.config().vision;
    if v.image_size != c.synth.image_size || v.patch_size != c.synth.patch_size {
        return Err(AppError::Config(format!(
            "checkpoint expects {}px images with {}px patches, config says {} / {}",
            v.image_size, v.patch_size, c.synth.image_size, c.synth.patch_size
        )));
    }
    c.train.prompt_layers(v.depth)?;
    Ok(())
}

/// On divergence, keep the last finite parameters next to the run before failing.
fn guard_divergence(
    result: Result<RunRecord, DapError>,
    out: &Path,
    stage: &str,
    model: &Model,
) -> AppResult<RunRecord> {
    match result {
        Err(e @ DapError::Diverged { .. }) => {
            let path = out.join("checkpoints").join(format!("{stage}.last-good.ckpt"));
            checkpoint::save(&path, model, json!({ "stage": stage, "diverged": e.to_string() }))?;
            log::error!("{e}; last finite parameters saved to {}", path.display());
            Err(e.into())
        }
        other => Ok(other?),
    }
}

/// Writes `config.json`, the checkpoint, `metrics.json`, `run.json` and loss plots.
pub fn finish_run(
    out: &Path,
    stage: &str,
    config: &AppConfig,
    model: &Model,
    mut record: RunRecord,
    eval: &[Sample],
    started: Instant,
) -> AppResult<RunRecord> {
    fsutil::create_dir(&out.join("plots"))?;
    config.save(&out.join("config.json"))?;
    let rel = format!("checkpoints/{stage}.ckpt");
    checkpoint::save(&out.join(&rel), model, json!({ "stage": stage, "train": record.config }))?;
    let metrics = trainer::evaluate(model, eval, config.train.theta, false)?;
    fsutil::write_json(&out.join("metrics.json"), &metrics)?;
    record.metrics = Some(metrics);
    record.checkpoint = Some(rel);
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    fsutil::write_json(&out.join("run.json"), &record)?;

    let rows: Vec<Vec<String>> = record
        .epochs
        .iter()
        .map(|e| {
            vec![e.epoch.to_string(), e.total.to_string(), e.glb.to_string(), e.lcl.to_string(), e.seg.to_string()]
        })
        .collect();
    plots::write_csv(&out.join("plots/loss.csv"), &["epoch", "total", "glb", "lcl", "seg"], &rows)?;
    let totals: Vec<f64> = record.epochs.iter().map(|e| e.total).collect();
    plots::bar_chart(&[totals], 8, 120).save_png(&out.join("plots/loss.png"))?;
    if let Some(m) = &record.metrics {
        log::info!("{stage}: cnr {:.4} pg {:.4} dice {:.4}", m.cnr, m.pg, m.dice);
    }
    Ok(record)
}

fn fmt_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<String>> {
    rows.into_iter().map(|r| r.into_iter().map(|v| v.to_string()).collect()).collect()
}

fn diagnose(
    model: &Model,
    samples: &[Sample],
    prompts: Option<&[PromptMap]>,
    theta: f64,
    overlays: usize,
    out: &Path,
) -> AppResult<()> {
    fsutil::create_dir(out)?;
    let report = trainer::evaluate(model, samples, theta, true)?;
    fsutil::write_json(&out.join("diagnostics.json"), &report.diagnostics)?;

    // Norm maps and grounding maps, overlaid on the first few images.
    let layers = PromptLayers::last(model.config().vision.depth);
    let mut norm_rows = Vec::new();
    for s in samples.iter().take(overlays) {
        let bundle = model.encode_image(&s.image, None, &layers)?;
        let (h, w) = (s.image.height, s.image.width);
        let pn = patch_norm_map(&bundle);
        let norm = upsample_grid(&pn, h, w);
        let gt = s.gt_mask();
        let gray = &s.image.data[..h * w];
        plots::overlay(gray, &norm, &gt, 0.5).scaled(4).save_png(&out.join(format!("norm_overlay_{:06}.png", s.id)))?;
        let cls = model.encode_text(&s.text_tokens)?.cls_token;
        let vg = ground(model, &bundle, &cls)?;
        plots::overlay(gray, vg.scores.data(), &gt, 0.5)
            .scaled(4)
            .save_png(&out.join(format!("grounding_overlay_{:06}.png", s.id)))?;
        for r in 0..pn.rows() {
            for c in 0..pn.cols() {
                norm_rows.push(vec![s.id as f64, r as f64, c as f64, pn.get(r, c)]);
            }
        }
    }
    plots::write_csv(&out.join("norm_maps.csv"), &["id", "row", "col", "norm"], &fmt_rows(norm_rows))?;

    let mut runs = vec![("unprompted", alignment_populations(model, samples, None, &layers)?)];
    if let Some(p) = prompts {
        runs.push(("prompted", alignment_populations(model, samples, Some(p), &layers)?));
    }
    for (name, pops) in runs {
        let bins = 40;
        let series = [&pops.img_fg, &pops.img_bg, &pops.cls_fg, &pops.cls_bg];
        let hist: Vec<Vec<usize>> = series.iter().map(|v| plots::histogram(v, -1.0, 1.0, bins)).collect();
        let rows: Vec<Vec<f64>> = (0..bins)
            .map(|b| {
                let lo = -1.0 + 2.0 * b as f64 / bins as f64;
                let mut r = vec![lo, lo + 2.0 / bins as f64];
                r.extend(hist.iter().map(|h| h[b] as f64));
                r
            })
            .collect();
        plots::write_csv(
            &out.join(format!("cosine_hist_{name}.csv")),
            &["bin_lo", "bin_hi", "img_fg", "img_bg", "cls_fg", "cls_bg"],
            &fmt_rows(rows),
        )?;
        // Densities, so FG and BG populations of different sizes compare.
        let density = |h: &Vec<usize>| {
            let n = h.iter().sum::<usize>().max(1) as f64;
            h.iter().map(|&c| c as f64 / n).collect::<Vec<f64>>()
        };
        plots::bar_chart(&[density(&hist[0]), density(&hist[1])], 3, 160)
            .save_png(&out.join(format!("cosine_hist_{name}.png")))?;
    }

    let strata = trainer::strata_of(&report);
    for (name, group) in [("area", &strata.by_area), ("lesion_count", &strata.by_lesion_count)] {
        let rows: Vec<Vec<String>> = group
            .iter()
            .map(|s| vec![s.label.clone(), s.lo.to_string(), s.hi.to_string(), s.count.to_string(), s.dice.to_string()])
            .collect();
        plots::write_csv(&out.join(format!("strata_{name}.csv")), &["label", "lo", "hi", "count", "dice"], &rows)?;
        let dice: Vec<f64> = group.iter().map(|s| s.dice).collect();
        plots::bar_chart(&[dice], 12, 120).save_png(&out.join(format!("strata_{name}.png")))?;
    }
    if let Some(w) = &strata.warning {
        log::warn!("{w}");
    }
    log::info!("diagnostics written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    baseline: &Model,
    train: &[Sample],
    prompts: &[PromptMap],
    test: &[Sample],
    kind: SweepKind,
    k_set: &[f64],
    c: &AppConfig,
    out: &Path,
) -> AppResult<()> {
    fsutil::create_dir(out)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut push = |label: String, m: &MetricsReport| {
        rows.push(vec![label.clone(), m.cnr.to_string(), m.pg.to_string(), m.dice.to_string(), m.iou.to_string()]);
        summary.push(json!({ "label": label, "cnr": m.cnr, "pg": m.pg, "dice": m.dice, "iou": m.iou }));
    };
    match kind {
        SweepKind::Robustness => {
            for p in trainer::robustness_sweep(baseline, train, prompts, test, k_set, &c.train)? {
                push(format!("k={}", p.k_percent), p.record.metrics.as_ref().expect("sweep evaluates"));
            }
        }
        SweepKind::Ablation => {
            for a in Ablation::ALL {
                let m = retrain(baseline, train, prompts, test, &a.apply(&c.train))?;
                push(a.name().to_string(), &m);
            }
        }
        SweepKind::Layers => {
            for set in ["last", "first-half", "last-half", "full"] {
                let mut tc = c.train.clone();
                tc.prompt.layers = set.to_string();
                let m = retrain(baseline, train, prompts, test, &tc)?;
                push(set.to_string(), &m);
            }
        }
    }
    plots::write_csv(&out.join("sweep.csv"), &["label", "cnr", "pg", "dice", "iou"], &rows)?;
    let dice: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let cnr: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    plots::bar_chart(&[dice, cnr], 10, 160).save_png(&out.join("sweep.png"))?;
    fsutil::write_json(&out.join("sweep.json"), &summary)?;
    c.save(&out.join("config.json"))
}

fn retrain(
    baseline: &Model,
    train: &[Sample],
    prompts: &[PromptMap],
    test: &[Sample],
    tc: &TrainConfig,
) -> AppResult<MetricsReport> {
    let mut m = baseline.clone();
    trainer::train_dap(&mut m, train, Prompts::Cached(prompts), tc)?;
    Ok(trainer::evaluate(&m, test, tc.theta, false)?)
}
