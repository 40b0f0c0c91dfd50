use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use image::{Rgb, RgbImage};
use maple::contact_eval::{
    build_feature_dataset, render_heatmap, save_selected, score_predictions, summarize, to_grid, train_cvae, FeatureEncoder,
};
use maple::extraction::{build_dataset, VideoInput};
use maple::geometry::Point2D;
use maple::manifest::{read_records, write_dataset, LoadedDataset, MANIFEST_FILE};
use maple::policy::{
    collect_expert_demonstrations, derive_seed, run_protocol, BcSubject, CentroidEncoder, PooledPixelEncoder, ResizingEncoder, ToyEnv,
};
use maple::prior_model::{tail_means, train_prior, write_loss_log, HandHeadMode, LossRecord, PriorModel, TrainOptions};
use maple::synth::{approach_corpus_specs, generate_pose_corpus, generate_prior_dataset, ApproachSequence, SynthSceneSpec};
use maple::tokenizer::{save_trained, train_tokenizer, TokenizerModel};
use serde::Serialize;

use crate::config::{RunConfig, Source};
use crate::plot::{line_chart, series_csv, Series};

pub const PRIOR_LOG: &str = "losses.jsonl";
pub const TOKENIZER_LOG: &str = "tokenizer_losses.csv";
pub const PROTOCOL_REPORT: &str = "protocol.json";
pub const EVAL_SUMMARY: &str = "eval_summary.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Which synthetic corpus to build.
    #[arg(long, value_enum)]
    pub source: Option<Source>,
    /// JSON list of approach-scene specifications replacing the generated corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of prior scenes.
    #[arg(long)]
    pub samples: Option<usize>,
}

pub fn extract(mut cfg: RunConfig, args: &ExtractArgs, out: &Path) -> Result<()> {
    if let Some(s) = args.source {
        cfg.extract.source = s;
    }
    if let Some(n) = args.samples {
        cfg.extract.samples = n;
    }
    // Everything is computed before the output directory is touched, so a
    // failure never leaves a partial manifest behind.
    match cfg.extract.source {
        Source::Approach => {
            let specs: Vec<SynthSceneSpec> = match &args.spec {
                Some(path) => {
                    require_file(path, "scene specification")?;
                    serde_json::from_str(&fs::read_to_string(path)?)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => approach_corpus_specs(cfg.extract.mix, cfg.seed),
            };
            let sequences = specs
                .into_iter()
                .map(ApproachSequence::generate)
                .collect::<maple::Result<Vec<_>>>()?;
            let videos: Vec<VideoInput<'_>> = sequences
                .iter()
                .map(|s| VideoInput {
                    source: s,
                    oracle: s,
                })
                .collect();
            let build = build_dataset(&videos, &cfg.extract.extraction);
            create_dir(out)?;
            cfg.echo(out)?;
            let truth: Vec<_> = sequences.iter().map(|s| s.ground_truth().clone()).collect();
            write_json(&out.join("ground_truth.json"), &truth)?;
            write_json(&out.join("summary.json"), &build.summary)?;
            write_dataset(out, &build.samples)?;
            for (status, n) in &build.summary.status_counts {
                println!("{:<26} {n}", status.as_str());
            }
            println!("{} records -> {}", build.samples.len(), out.join(MANIFEST_FILE).display());
        }
        Source::Prior => {
            ensure!(args.spec.is_none(), "--spec applies to the approach source only");
            let corpus = generate_pose_corpus(&cfg.extract.poses)?;
            let ds = generate_prior_dataset(&cfg.extract.scenes, &corpus, None, cfg.extract.samples)?;
            create_dir(out)?;
            cfg.echo(out)?;
            write_json(&out.join("scene_truth.json"), &ds.truth)?;
            write_dataset(out, &ds.samples)?;
            println!("{} records -> {}", ds.samples.len(), out.join(MANIFEST_FILE).display());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Train on the hand poses of this manifest instead of a synthetic corpus.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Serialize)]
struct TokenizerSummary {
    corpus_size: usize,
    steps: usize,
    reconstruction_error: f64,
    mean_utilization: f64,
    utilization: Vec<f64>,
    final_loss: f64,
}

pub fn train_tokenizer_cmd(mut cfg: RunConfig, args: &TrainTokenizerArgs, out: &Path) -> Result<()> {
    if let Some(s) = args.steps {
        cfg.tokenizer.model.steps = s;
    }
    let poses = match &args.manifest {
        Some(m) => {
            require_file(m, "manifest")?;
            read_records(m)?.into_iter().map(|r| r.hand_pose).collect()
        }
        None => generate_pose_corpus(&cfg.tokenizer.corpus)?.poses,
    };
    let (model, report) = train_tokenizer(&poses, &cfg.tokenizer.model)?;
    create_dir(out)?;
    cfg.echo(out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&out.join(TOKENIZER_LOG), &csv)?;
    let summary = TokenizerSummary {
        corpus_size: poses.len(),
        steps: cfg.tokenizer.model.steps,
        reconstruction_error: report.reconstruction_error,
        mean_utilization: report.utilization.iter().sum::<f64>() / report.utilization.len().max(1) as f64,
        utilization: report.utilization.clone(),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
    };
    write_json(&out.join("tokenizer_report.json"), &summary)?;
    let ck = out.join("tokenizer.safetensors");
    save_trained(&model, cfg.tokenizer.model.steps, &ck)?;
    println!(
        "reconstruction error {:.4}, codebook utilization {:.3} -> {}",
        summary.reconstruction_error,
        summary.mean_utilization,
        ck.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Tokenizer checkpoint used to fill in missing hand tokens.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub no_contact_loss: bool,
    #[arg(long, conflicts_with = "hand_regression")]
    pub no_hand_loss: bool,
    /// Regress the 63 joint coordinates instead of classifying tokens.
    #[arg(long)]
    pub hand_regression: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by a run with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct PriorSummary {
    iterations: usize,
    first_step: usize,
    tail_means: BTreeMap<&'static str, f64>,
    checkpoints: Vec<PathBuf>,
}

fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn train_prior_cmd(mut cfg: RunConfig, args: &TrainPriorArgs, out: &Path) -> Result<()> {
    if args.no_contact_loss {
        cfg.prior.contact_head = false;
    }
    if args.no_hand_loss {
        cfg.prior.hand_head_mode = HandHeadMode::Off;
    }
    if args.hand_regression {
        cfg.prior.hand_head_mode = HandHeadMode::Regression;
    }
    if let Some(n) = args.iterations {
        cfg.prior.iterations = n;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.prior.checkpoint_every = n;
    }
    cfg.prior.validate()?;
    require_file(&args.manifest, "manifest")?;
    if let Some(r) = &args.resume {
        require_file(r, "checkpoint")?;
    }
    let mut data = LoadedDataset::load(&args.manifest)?;
    for (rec, img) in data.records.iter().zip(&data.images) {
        ensure!(
            img.dimensions() == (cfg.prior.image_size as u32, cfg.prior.image_size as u32),
            "record {} has a {}x{} image but the prior expects {}x{}",
            rec.sample_id,
            img.width(),
            img.height(),
            cfg.prior.image_size,
            cfg.prior.image_size
        );
    }
    if cfg.prior.hand_head_mode == HandHeadMode::Tokens && data.records.iter().any(|r| r.tokens.is_none()) {
        let Some(path) = &args.tokenizer else {
            bail!("manifest has records without hand tokens; pass --tokenizer");
        };
        require_file(path, "tokenizer checkpoint")?;
        let tok = TokenizerModel::load(path)?;
        ensure!(
            tok.num_codebooks() == cfg.prior.num_hand_tokens && tok.codebook_size() == cfg.prior.codebook_size,
            "tokenizer emits {} tokens over {} codes but the prior expects {} over {}",
            tok.num_codebooks(),
            tok.codebook_size(),
            cfg.prior.num_hand_tokens,
            cfg.prior.codebook_size
        );
        let tokens = tok.tokenize_batch(&data.records.iter().map(|r| &r.hand_pose).collect::<Vec<_>>())?;
        for (rec, t) in data.records.iter_mut().zip(tokens) {
            rec.tokens.get_or_insert(t.0);
        }
    }

    create_dir(out)?;
    cfg.echo(out)?;
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    let run = train_prior(
        &data,
        &cfg.prior,
        &TrainOptions {
            checkpoint_dir: Some(ck_dir),
            resume_from: args.resume.clone(),
        },
    )?;
    let first_step = run.log.first().map_or(cfg.prior.iterations, |r| r.step);
    let log_path = out.join(PRIOR_LOG);
    let mut log = Vec::new();
    if args.resume.is_some() && log_path.is_file() {
        log.extend(read_loss_log(&log_path)?.into_iter().filter(|r| r.step < first_step));
    }
    log.extend(run.log.iter().copied());
    write_loss_log(&log_path, &log)?;
    let mut csv = String::from("step,L_ct,L_hand,L_total\n");
    for r in &log {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.contact, r.hand, r.total));
    }
    write_text(&out.join("losses.csv"), &csv)?;
    let summary = PriorSummary {
        iterations: cfg.prior.iterations,
        first_step,
        tail_means: tail_means(&run.log, 100),
        checkpoints: run.checkpoints.clone(),
    };
    write_json(&out.join("prior_summary.json"), &summary)?;
    println!("tail losses {:?} -> {}", summary.tail_means, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Predictor {
    /// cVAE head on frozen prior-encoder features.
    Cvae,
    /// Ground-truth points as predictions; an upper-bound sanity check.
    Oracle,
}

#[derive(Debug, Args)]
pub struct EvalContactArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prior checkpoint whose encoder provides the features.
    #[arg(long, required_if_eq("predictor", "cvae"))]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cvae")]
    pub predictor: Predictor,
    /// Every k-th record is held out for evaluation.
    #[arg(long, default_value_t = 5)]
    pub holdout_every: usize,
    /// Number of held-out samples rendered as heatmap overlays.
    #[arg(long, default_value_t = 8)]
    pub overlays: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
}

pub fn eval_contact(mut cfg: RunConfig, args: &EvalContactArgs, out: &Path) -> Result<()> {
    if let Some(n) = args.iterations {
        cfg.cvae.iterations = n;
    }
    cfg.cvae.validate()?;
    ensure!(args.holdout_every >= 2, "--holdout-every must be at least 2");
    require_file(&args.manifest, "manifest")?;
    if let Some(c) = &args.checkpoint {
        require_file(c, "checkpoint")?;
    }
    let data = LoadedDataset::load(&args.manifest)?;
    let (train, held) = data.split_every(args.holdout_every);
    ensure!(!held.is_empty() && !train.is_empty(), "manifest too small to split");
    let grid = cfg.cvae.grid;

    let (name, predictions, records, curve) = match args.predictor {
        Predictor::Oracle => {
            let mut preds = Vec::new();
            let mut records = Vec::new();
            for (rec, img) in held.records.iter().zip(&held.images) {
                let (w, h) = (img.width() as f64, img.height() as f64);
                let (a, b) = rec.contact_points();
                let p = vec![to_grid(a, w, h, grid, grid), to_grid(b, w, h, grid, grid)];
                records.push(score_predictions(&rec.sample_id, &p, &p, &cfg.cvae)?);
                preds.push(p);
            }
            ("oracle".to_string(), preds, records, None)
        }
        Predictor::Cvae => {
            let model = PriorModel::load(args.checkpoint.as_deref().expect("required by clap"))?;
            let size = model.config().image_size as u32;
            if let Some(img) = data.images.iter().find(|i| i.dimensions() != (size, size)) {
                bail!("manifest image is {}x{} but the encoder expects {size}x{size}", img.width(), img.height());
            }
            let train_f = build_feature_dataset(&model, &train, grid)?;
            let held_f = build_feature_dataset(&model, &held, grid)?;
            let (head, report) = train_cvae(&train_f, &held_f, &cfg.cvae)?;
            create_dir(out)?;
            save_selected(&head, &report, &out.join("cvae.safetensors"))?;
            let mut preds = Vec::new();
            let mut records = Vec::new();
            for (ci, chunk) in held_f.chunks(256).enumerate() {
                let rows: Vec<&[f32]> = chunk.iter().map(|s| s.features.as_slice()).collect();
                for (s, p) in chunk.iter().zip(head.predict(&rows, cfg.cvae.seed.wrapping_add(ci as u64))?) {
                    records.push(score_predictions(&s.sample_id, &p, &s.points, head.config())?);
                    preds.push(p);
                }
            }
            (model.name(), preds, records, Some(report))
        }
    };

    create_dir(out)?;
    cfg.echo(out)?;
    let summary = summarize(&name, &records);
    write_json(&out.join(EVAL_SUMMARY), &summary)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_text(&out.join("metrics.jsonl"), &lines)?;
    if let Some(report) = &curve {
        let mut csv = String::from("iteration,train_loss,mean_SIM,mean_NSS\n");
        for e in &report.evals {
            csv.push_str(&format!("{},{},{},{}\n", e.iteration, e.train_loss, e.mean_sim, e.mean_nss));
        }
        write_text(&out.join("cvae_curve.csv"), &csv)?;
    }
    let overlay_dir = out.join("overlays");
    create_dir(&overlay_dir)?;
    for ((rec, img), pred) in held.records.iter().zip(&held.images).zip(&predictions).take(args.overlays) {
        let (a, b) = rec.contact_points();
        let overlay = heatmap_overlay(img, pred, &[a, b], &cfg.cvae)?;
        overlay.save(overlay_dir.join(format!("{}.png", rec.sample_id)))?;
    }
    println!(
        "{}: mean SIM {:.4}, mean NSS {:.4} over {} held-out samples",
        summary.encoder_name, summary.mean_sim, summary.mean_nss, summary.n_samples
    );
    Ok(())
}

/// Predicted heatmap blended in red over the image; true fingertips as green crosses.
fn heatmap_overlay(
    img: &RgbImage,
    predicted_grid: &[Point2D],
    truth_px: &[Point2D],
    cfg: &maple::contact_eval::CvaeConfig,
) -> Result<RgbImage> {
    let heat = render_heatmap(predicted_grid, cfg.sigma, cfg.grid, cfg.grid)?.to_image(1);
    let heat = image::imageops::resize(&heat, img.width(), img.height(), image::imageops::FilterType::Triangle);
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let a = 0.7 * heat.get_pixel(x, y).0[0] as f64 / 255.0;
        for (c, target) in px.0.iter_mut().zip([255.0, 0.0, 0.0]) {
            *c = ((1.0 - a) * *c as f64 + a * target).round() as u8;
        }
    }
    for p in truth_px {
        let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
        for d in -3i64..=3 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && y >= 0 && (x as u32) < out.width() && (y as u32) < out.height() {
                    out.put_pixel(x as u32, y as u32, Rgb([0, 255, 0]));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyEncoder {
    /// Parameter-free per-channel intensity centroids.
    Centroid,
    /// Parameter-free pooled pixels.
    Pooled,
    /// Frozen encoder of a trained prior checkpoint.
    Prior,
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    #[arg(long, value_enum, default_value = "centroid")]
    pub encoder: PolicyEncoder,
    #[arg(long, required_if_eq("encoder", "prior"))]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub demos: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

pub fn train_policy(mut cfg: RunConfig, args: &TrainPolicyArgs, out: &Path) -> Result<()> {
    let p = &mut cfg.policy;
    if let Some(v) = args.demos {
        p.demos = v;
    }
    if let Some(v) = args.total_steps {
        p.protocol.total_steps = v;
    }
    if let Some(v) = args.eval_every {
        p.protocol.eval_every = v;
    }
    if let Some(v) = args.rollouts {
        p.protocol.rollouts = v;
    }
    if let Some(v) = args.views {
        p.protocol.views = v;
    }
    if let Some(v) = args.seeds {
        p.protocol.seeds = v;
    }
    if let Some(v) = args.noise {
        p.protocol.action_noise_sigma = v;
    }
    let pooled = PooledPixelEncoder {
        image_size: cfg.policy.env.image_size,
        ..Default::default()
    };
    let prior = match args.encoder {
        PolicyEncoder::Centroid | PolicyEncoder::Pooled => None,
        PolicyEncoder::Prior => {
            let path = args.checkpoint.as_deref().expect("required by clap");
            require_file(path, "checkpoint")?;
            Some(PriorModel::load(path)?)
        }
    };
    let resized;
    let encoder: &dyn FeatureEncoder = match &prior {
        None if args.encoder == PolicyEncoder::Centroid => &CentroidEncoder,
        None => &pooled,
        Some(m) => {
            resized = ResizingEncoder {
                inner: m,
                size: m.config().image_size as u32,
            };
            &resized
        }
    };

    let mut env = ToyEnv::new(cfg.policy.env.clone());
    let mut demos = BTreeMap::new();
    for view in 0..cfg.policy.protocol.views {
        let seed = derive_seed(&[cfg.seed, view as u64]);
        demos.insert(view, collect_expert_demonstrations(&mut env, encoder, view, cfg.policy.demos, seed)?);
    }
    let mut subject = BcSubject::new(encoder, demos, cfg.policy.bc.clone());
    let report = run_protocol(&mut subject, &mut env, &cfg.policy.protocol)?;

    create_dir(out)?;
    cfg.echo(out)?;
    write_json(&out.join(PROTOCOL_REPORT), &report)?;
    let series: Vec<Series> = report.runs.iter().map(run_series).collect();
    write_text(&out.join("success_curve.csv"), &series_csv("step", "success_rate", &series))?;
    println!("final score {:.2}% over {} runs", report.final_score, report.runs.len());
    Ok(())
}

fn run_series(r: &maple::policy::RunReport) -> Series {
    Series {
        name: format!("view{}-seed{}", r.view, r.seed),
        points: r.steps.iter().map(|&s| s as f64).zip(r.rates.iter().copied()).collect(),
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of earlier runs; repeat to overlay several runs.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
}

/// Rebuilds plots and tables purely from the logs of earlier runs.
pub fn report(args: &ReportArgs, out: &Path) -> Result<()> {
    let mut prior = Vec::new();
    let mut tokenizer = Vec::new();
    let mut success = Vec::new();
    let mut table = String::from("| run | kind | result |\n|---|---|---|\n");
    let mut found = 0usize;
    for dir in &args.runs {
        ensure!(dir.is_dir(), "run directory {} does not exist", dir.display());
        let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let log = dir.join(PRIOR_LOG);
        if log.is_file() {
            found += 1;
            let records = read_loss_log(&log)?;
            for (key, get) in [
                ("L_ct", (|r: &LossRecord| r.contact) as fn(&LossRecord) -> f64),
                ("L_hand", |r| r.hand),
                ("L_total", |r| r.total),
            ] {
                prior.push(Series {
                    name: format!("{label}:{key}"),
                    points: records.iter().map(|r| (r.step as f64, get(r))).collect(),
                });
            }
            let tail = tail_means(&records, 100);
            table.push_str(&format!(
                "| {label} | prior | tail L_ct {:.4}, L_hand {:.4}, L_total {:.4} |\n",
                tail["L_ct"], tail["L_hand"], tail["L_total"]
            ));
        }
        let log = dir.join(TOKENIZER_LOG);
        if log.is_file() {
            found += 1;
            let points = fs::read_to_string(&log)?
                .lines()
                .skip(1)
                .map(|l| {
                    let (s, v) = l.split_once(',').context("malformed tokenizer log")?;
                    Ok((s.parse::<f64>()?, v.parse::<f64>()?))
                })
                .collect::<Result<Vec<_>>>()?;
            let last = points.last().map_or(f64::NAN, |p| p.1);
            tokenizer.push(Series {
                name: label.clone(),
                points,
            });
            table.push_str(&format!("| {label} | tokenizer | final loss {last:.5} |\n"));
        }
        let proto = dir.join(PROTOCOL_REPORT);
        if proto.is_file() {
            found += 1;
            let r: maple::policy::ProtocolReport = serde_json::from_str(&fs::read_to_string(&proto)?)?;
            success.extend(r.runs.iter().map(|run| {
                let mut s = run_series(run);
                s.name = format!("{label}:{}", s.name);
                s
            }));
            table.push_str(&format!(
                "| {label} | policy | best-of-evaluations mean {:.2}% over {} runs |\n",
                r.final_score,
                r.runs.len()
            ));
        }
        let eval = dir.join(EVAL_SUMMARY);
        if eval.is_file() {
            found += 1;
            let s: maple::contact_eval::EvalSummary = serde_json::from_str(&fs::read_to_string(&eval)?)?;
            table.push_str(&format!(
                "| {label} | contact ({}) | SIM {:.4}, NSS {:.4}, n = {} |\n",
                s.encoder_name, s.mean_sim, s.mean_nss, s.n_samples
            ));
        }
    }
    ensure!(found > 0, "no training logs or reports found in the given run directories");
    create_dir(out)?;
    for (name, title, x, y, series) in [
        ("prior_losses", "Prior training losses", "step", "loss", &prior),
        ("tokenizer_losses", "Tokenizer reconstruction loss", "step", "loss", &tokenizer),
        ("success_curve", "Policy success rate", "step", "success rate (%)", &success),
    ] {
        if series.is_empty() {
            continue;
        }
        write_text(&out.join(format!("{name}.csv")), &series_csv(x, y, series))?;
        write_text(&out.join(format!("{name}.svg")), &line_chart(title, x, y, series))?;
    }
    write_text(&out.join("report.md"), &format!("# Run report\n\n{table}"))?;
    println!("report -> {}", out.display());
    Ok(())
}
