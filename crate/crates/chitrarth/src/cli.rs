//! Command-line entry points: prepare-data, train, eval, generate,
//! grad-check, and ablate-languages.
//!
//! Exit codes: 0 success, 1 usage/config problems, 2 runtime aborts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, load_into, save_checkpoint, CheckpointMeta};
use crate::config::{resolve_config, RunConfig};
use crate::data::{cipher, mix, synth, ConversationSample, ImageRef, ShapeSpec};
use crate::error::{Error, Result};
use crate::eval::{
    ablation::language_ablation, generate_predictions, load_eval_manifest, save_eval_manifest,
    save_predictions, score_all, EvalRecord, Lexicons, Task,
};
use crate::model::{answer, end_to_end_grad_check, ChitrarthModel};
use crate::tensor::grad_check;
use crate::trainer::{run_stage, StageConfig};

#[derive(Parser)]
#[command(
    name = "chitrarth",
    about = "Desk-scale multilingual vision-language training pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file merged over built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (equivalent to --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key overrides, e.g. --set stage1.peak_lr=0.001
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut sets = self.set.clone();
        if let Some(seed) = self.seed {
            sets.push(format!("seed={seed}"));
        }
        resolve_config(self.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synth corpus, cipher translations, mixed stage-1/2
    /// manifests, and eval manifests.
    PrepareData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for manifests and stats.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; stage 2 resumes from a stage-1 checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training stage (1 or 2).
        #[arg(long)]
        stage: u8,
        /// Training manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to resume from (required for stage 2).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Allow stage 2 without a stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Generate predictions for a benchmark manifest and score them.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Benchmark manifest path.
        #[arg(long)]
        data: PathBuf,
    },
    /// Answer one prompt with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM path or inline spec "shape,color,row,col" (e.g. "circle,red,0,2").
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
    /// Finite-difference gradient checks for every kernel and the
    /// end-to-end graph.
    GradCheck {
        /// Kernel tolerance.
        #[arg(long, default_value_t = grad_check::KERNEL_TOLERANCE)]
        tol: f64,
        /// End-to-end tolerance.
        #[arg(long, default_value_t = 1e-3)]
        tol_e2e: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also run a deliberately distorted gradient that must fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Language-count ablation: english-only vs english+2 vs english+10.
    AblateLanguages {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses arguments and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { config, out } => cmd_prepare_data(&config.resolve()?, &out),
        Command::Train {
            config,
            out,
            stage,
            data,
            checkpoint,
            from_scratch,
        } => cmd_train(&config.resolve()?, &out, stage, &data, checkpoint.as_deref(), from_scratch),
        Command::Eval {
            config,
            out,
            checkpoint,
            data,
        } => cmd_eval(&config.resolve()?, &out, &checkpoint, &data),
        Command::Generate {
            checkpoint,
            image,
            prompt,
            max_new,
        } => cmd_generate(&checkpoint, image.as_deref(), &prompt, max_new),
        Command::GradCheck {
            tol,
            tol_e2e,
            seed,
            negative_control,
        } => cmd_grad_check(tol, tol_e2e, seed, negative_control),
        Command::AblateLanguages { config, out } => cmd_ablate(&config.resolve()?, &out),
    }
}

fn write_config_echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn language_tags(n: usize) -> Vec<String> {
    cipher::LANGUAGE_TAGS[..n].iter().map(|t| t.to_string()).collect()
}

/// Converts inline shape specs to PPM files on disk when requested.
fn externalize_images(samples: &mut [ConversationSample], dir: &Path, image_size: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for sample in samples.iter_mut() {
        if let Some(ImageRef::Spec(spec)) = &sample.image {
            let rgb = synth::render_shape(spec, image_size);
            let raw = crate::vision::ppm::RawImage::new(image_size, image_size, rgb)?;
            let filename = format!("{}.ppm", sample.id);
            crate::vision::ppm::write_ppm(&dir.join(&filename), &raw)?;
            sample.image = Some(ImageRef::Path(format!("images/{filename}")));
        }
    }
    Ok(())
}

fn cmd_prepare_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let languages = language_tags(cfg.data.languages);
    let seed = cfg.seed;

    // Stage 1: caption pairs, half English, equal non-English shares.
    let english: Vec<ConversationSample> = synth::synth_corpus(cfg.data.stage1_total, seed.wrapping_add(1))
        .into_iter()
        .map(|item| {
            synth::caption_to_single_turn(ImageRef::Spec(item.spec), &item.caption, "en", &item.id)
        })
        .collect::<Result<_>>()?;
    let mut stage1_sources: BTreeMap<String, Vec<ConversationSample>> = BTreeMap::new();
    stage1_sources.insert("en".to_string(), english.clone());
    for lang in &languages {
        let pool = english
            .iter()
            .map(|s| {
                let caption = cipher::cipher_translate(&s.turns[1].text, lang)?;
                synth::caption_to_single_turn(
                    s.image.clone().expect("caption sample"),
                    &caption,
                    lang,
                    &format!("{}-{lang}", s.id),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        stage1_sources.insert(lang.clone(), pool);
    }
    let stage1_spec = mix::MixSpec {
        total: cfg.data.stage1_total,
        english_fraction: if languages.is_empty() { 1.0 } else { cfg.data.english_fraction },
        languages: languages.clone(),
        seed,
    };
    let mut stage1 = mix::mix_languages(&stage1_sources, &stage1_spec)?;

    // Stage 2: instruction corpus with the same mixing rule.
    let mut stage2_sources: BTreeMap<String, Vec<ConversationSample>> = BTreeMap::new();
    stage2_sources.insert(
        "en".to_string(),
        synth::stage2_corpus(cfg.data.stage2_total, seed.wrapping_add(2), "en")?,
    );
    for lang in &languages {
        stage2_sources.insert(
            lang.clone(),
            synth::stage2_corpus(cfg.data.stage2_total, seed.wrapping_add(2), lang)?,
        );
    }
    let stage2_spec = mix::MixSpec {
        total: cfg.data.stage2_total,
        ..stage1_spec.clone()
    };
    let mut stage2 = mix::mix_languages(&stage2_sources, &stage2_spec)?;

    if cfg.data.ppm_images {
        let images_dir = out.join("images");
        externalize_images(&mut stage1, &images_dir, cfg.model.encoder.image_size)?;
        externalize_images(&mut stage2, &images_dir, cfg.model.encoder.image_size)?;
    }

    crate::data::save_manifest(&out.join("train_stage1.jsonl"), &stage1)?;
    crate::data::save_manifest(&out.join("train_stage2.jsonl"), &stage2)?;

    // Eval manifests: genqa + pope per language (English included).
    let mut eval_records = Vec::new();
    let mut eval_langs = vec!["en".to_string()];
    eval_langs.extend(languages.iter().cloned());
    for (li, lang) in eval_langs.iter().enumerate() {
        let genqa_seed = seed.wrapping_add(1000 + li as u64);
        for item in synth::synth_corpus(cfg.data.eval_per_language, genqa_seed) {
            let sample = if lang == "en" {
                synth::caption_to_single_turn(ImageRef::Spec(item.spec), &item.caption, "en", &item.id)?
            } else {
                let caption = cipher::cipher_translate(&item.caption, lang)?;
                synth::caption_to_single_turn(
                    ImageRef::Spec(item.spec),
                    &caption,
                    lang,
                    &format!("{}-{lang}", item.id),
                )?
            };
            eval_records.push(EvalRecord {
                id: format!("genqa-{}", sample.id),
                language: lang.clone(),
                task: Task::Genqa,
                image: sample.image.clone(),
                question: sample.turns[0].text.clone(),
                reference: sample.turns[1].text.clone(),
                prediction: None,
            });
        }
        let pope_seed = seed.wrapping_add(2000 + li as u64);
        for (i, item) in synth::synth_corpus(cfg.data.eval_per_language, pope_seed)
            .into_iter()
            .enumerate()
        {
            let positive = i % 2 == 0;
            let (shape, color) = if positive {
                (item.spec.shape, item.spec.color)
            } else {
                // Deterministic different class: rotate shape and color.
                let s = synth::SHAPES[(synth::SHAPES.iter().position(|&x| x == item.spec.shape).unwrap() + 1) % 3];
                let c = synth::COLORS[(synth::COLORS.iter().position(|&x| x == item.spec.color).unwrap() + 1) % 3];
                (s, c)
            };
            let question = synth::yesno_question(shape, color);
            let reference = if positive { "yes" } else { "no" };
            let (question, reference) = if lang == "en" {
                (question, reference.to_string())
            } else {
                (
                    cipher::cipher_translate(&question, lang)?,
                    cipher::cipher_translate(reference, lang)?,
                )
            };
            eval_records.push(EvalRecord {
                id: format!("pope-{}-{lang}-{i}", item.id),
                language: lang.clone(),
                task: Task::Pope,
                image: Some(ImageRef::Spec(item.spec)),
                question,
                reference,
                prediction: None,
            });
        }
    }
    save_eval_manifest(&out.join("eval.jsonl"), &eval_records)?;

    // Stats summary: language histograms per manifest.
    let stats = serde_json::json!({
        "stage1": mix::language_histogram(&stage1),
        "stage2": mix::language_histogram(&stage2),
        "eval_records": eval_records.len(),
        "eval_languages": eval_langs,
    });
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;

    println!("stage1 histogram: {:?}", mix::language_histogram(&stage1));
    println!("stage2 histogram: {:?}", mix::language_histogram(&stage2));
    println!(
        "wrote {} + {} training samples, {} eval records to {}",
        stage1.len(),
        stage2.len(),
        eval_records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    stage: u8,
    data_path: &Path,
    checkpoint: Option<&Path>,
    from_scratch: bool,
) -> Result<()> {
    write_config_echo(cfg, out)?;
    let data = crate::data::load_manifest(data_path)?;

    let mut model = ChitrarthModel::init(cfg.model.clone(), cfg.seed)?;
    let mut stage_cfg: StageConfig = match stage {
        1 => cfg.stage1.clone(),
        2 => cfg.stage2.clone(),
        other => return Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
    };
    stage_cfg.seed = cfg.seed;

    match (stage, checkpoint) {
        (2, None) if !from_scratch => {
            return Err(Error::Config(
                "stage 2 requires --checkpoint from stage 1 (or --from-scratch)".into(),
            ))
        }
        (_, Some(path)) => {
            load_into(path, &mut model)?;
        }
        _ => {}
    }

    let log = run_stage(&mut model, &data, &stage_cfg)?;

    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    for m in &log.metrics {
        serde_json::to_writer(&mut metrics_file, m)?;
        metrics_file.write_all(b"\n")?;
    }
    metrics_file.flush()?;

    let mut metric_snapshot = BTreeMap::new();
    if let Some(loss) = log.final_loss() {
        metric_snapshot.insert("final_loss".to_string(), loss as f64);
    }
    let meta = CheckpointMeta {
        stage,
        step: log.metrics.len(),
        seed: cfg.seed,
        metrics: metric_snapshot,
    };
    save_checkpoint(&out.join("checkpoint.bin"), &model, &meta)?;

    println!(
        "stage {stage}: {} steps, seed {}, final loss {:?}, skipped {} overlong",
        log.metrics.len(),
        cfg.seed,
        log.final_loss(),
        log.skipped_overlong
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, data: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let records = load_eval_manifest(data)?;
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let (_, model) = load_checkpoint(checkpoint)?;

    let predictions = generate_predictions(&model, &records, cfg.eval.max_new)?;
    save_predictions(&out.join("predictions.jsonl"), &predictions)?;

    let by_id: BTreeMap<&str, &str> = predictions
        .iter()
        .map(|(id, p)| (id.as_str(), p.as_str()))
        .collect();
    let mut scored = records.clone();
    for r in scored.iter_mut() {
        r.prediction = by_id.get(r.id.as_str()).map(|p| p.to_string());
    }
    let report = score_all(&scored, &Lexicons::default())?;
    let text = report.render_text();
    std::fs::write(out.join("report.txt"), &text)?;
    report.write_cells(&out.join("report_cells.jsonl"))?;
    print!("{text}");
    Ok(())
}

fn parse_inline_spec(text: &str) -> Result<ShapeSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "inline image spec must be shape,color,row,col — got {text:?}"
        )));
    }
    let spec = serde_json::from_value(serde_json::json!({
        "shape": parts[0],
        "color": parts[1],
        "row": parts[2].parse::<u8>().map_err(|_| Error::Config(format!("bad row {:?}", parts[2])))?,
        "col": parts[3].parse::<u8>().map_err(|_| Error::Config(format!("bad col {:?}", parts[3])))?,
    }))
    .map_err(|e| Error::Config(format!("inline image spec: {e}")))?;
    Ok(spec)
}

fn cmd_generate(checkpoint: &Path, image: Option<&str>, prompt: &str, max_new: usize) -> Result<()> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let image_ref = image
        .map(|text| -> Result<ImageRef> {
            if text.ends_with(".ppm") {
                Ok(ImageRef::Path(text.to_string()))
            } else {
                Ok(ImageRef::Spec(parse_inline_spec(text)?))
            }
        })
        .transpose()?;
    let reply = answer(&model, image_ref.as_ref(), prompt, max_new)?;
    println!("{reply}");
    Ok(())
}

fn cmd_grad_check(tol: f64, tol_e2e: f64, seed: u64, negative_control: bool) -> Result<()> {
    let mut checks = grad_check::check_all_kernels(seed, tol);
    checks.push(end_to_end_grad_check(seed, tol_e2e));
    if negative_control {
        checks.push(grad_check::negative_control(seed, tol));
    }
    let mut failures = 0;
    for check in &checks {
        println!("{check}");
        if !check.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Config(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let report = language_ablation(&cfg.ablation)?;
    let table = report.render_table();
    std::fs::write(out.join("ablation.txt"), &table)?;
    let mut cells = std::io::BufWriter::new(std::fs::File::create(out.join("ablation_cells.jsonl"))?);
    for cell in &report.cells {
        serde_json::to_writer(&mut cells, cell)?;
        cells.write_all(b"\n")?;
    }
    cells.flush()?;
    print!("{table}");
    Ok(())
}
