use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::ValueEnum;
use hoi_compose::conditioning::{
    build_bundle, preprocess_foreground, resize_bilinear, BackdropSegmenter, BundleInputs, NEUTRAL_GRAY,
};
use hoi_compose::config::{parse_value, RunConfig};
use hoi_compose::dataset::{split_dataset, write_split, write_synthetic_dataset, MANIFEST_FILE};
use hoi_compose::denoiser::{
    load_checkpoint, prepare_example, pretrain, sample, train, AttentionCapture, Denoiser, SampleOptions,
    TrainBackends, TrainState,
};
use hoi_compose::eval::{
    run_ablation_grid, run_bench, AblationAxis, AblationBase, BenchSpec, ExternalScorer, ScorerRegistry,
};
use hoi_compose::image::Image;
use hoi_compose::losses::LossCoefficients;
use hoi_compose::record::{load_record, read_manifest, read_manifest_lines, validate_record, InteractionRecord};
use hoi_compose::region_query::{run_region_query, InteractionSpec, MockClient, VisionLanguageClient};
use hoi_compose::attention::ModulationVariant;
use hoi_compose::Error;
use toml::Value;

use crate::{Command, Failure, RunArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Coefficients,
    Variant,
    Modulation,
    Views,
    Guidance,
}

type CmdResult = std::result::Result<ExitCode, Failure>;

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::DatasetGen { run, count, canvas } => dataset_gen(&run, count, canvas),
        Command::Mrpg {
            fg,
            bg,
            mock,
            attempts,
            run,
        } => mrpg(&run, &fg, &bg, mock.as_deref(), attempts),
        Command::Train {
            data,
            steps,
            pretrain_steps,
            run,
        } => train_cmd(&run, &data, steps, pretrain_steps),
        Command::Sample {
            checkpoint,
            fg,
            bg,
            spec,
            mock,
            guidance,
            steps,
            dump_attention,
            run,
        } => sample_cmd(
            &run,
            &checkpoint,
            (&fg, &bg),
            spec.as_deref(),
            mock.as_deref(),
            guidance,
            steps,
            dump_attention,
        ),
        Command::Bench {
            checkpoint,
            data,
            mock,
            seeds,
            workers,
            run,
        } => bench_cmd(&run, &checkpoint, &data, mock.as_deref(), seeds, workers),
        Command::Ablate {
            data,
            bench,
            axis,
            values,
            steps,
            pretrain_steps,
            seeds,
            run,
        } => ablate(&run, &data, bench.as_deref(), axis, &values, steps, pretrain_steps, seeds),
        Command::Validate { manifest } => validate(&manifest),
    }
}

fn overrides(run: &RunArgs, flags: Vec<(&str, Option<Value>)>) -> std::result::Result<Vec<(String, Value)>, Failure> {
    let mut out = Vec::new();
    for s in &run.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        out.push((k.trim().to_string(), parse_value(v.trim())));
    }
    if let Some(seed) = run.seed {
        for k in ["seed", "model.seed", "train.seed"] {
            out.push((k.to_string(), Value::Integer(seed as i64)));
        }
    }
    out.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(out)
}

fn int(v: Option<usize>) -> Option<Value> {
    v.map(|v| Value::Integer(v as i64))
}

fn default_out(command: &str) -> PathBuf {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    PathBuf::from("runs").join(format!("{command}-{secs}"))
}

/// Resolves the configuration and prepares the run directory.
fn start(run: &RunArgs, command: &str, flags: Vec<(&str, Option<Value>)>) -> std::result::Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::resolve(run.config.as_deref(), &overrides(run, flags)?)?;
    cfg.query.resolve_env();
    let out = run.out.clone().unwrap_or_else(|| default_out(command));
    cfg.write_resolved(&out)?;
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> hoi_compose::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_records(manifest: &Path) -> hoi_compose::Result<Vec<InteractionRecord>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|e| load_record(e, root)).collect()
}

fn dataset_gen(run: &RunArgs, count: Option<usize>, canvas: Option<usize>) -> CmdResult {
    let flags = vec![
        ("dataset.count", int(count)),
        ("dataset.canvas", int(canvas)),
        ("model.image_size", int(canvas)),
    ];
    let (cfg, out) = start(run, "dataset-gen", flags)?;
    let report = write_synthetic_dataset(&out, cfg.dataset.count, cfg.seed, cfg.dataset.canvas)?;
    let split = split_dataset(&report.entries, cfg.dataset.split, cfg.seed)?;
    write_split(&out, &split)?;
    println!(
        "{} records ({} rejected) in {}; split {}/{}/{}",
        report.entries.len(),
        report.rejects.len(),
        out.join(MANIFEST_FILE).display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn client_for(
    cfg: &RunConfig,
    mock: Option<&Path>,
    out: Option<&Path>,
) -> hoi_compose::Result<Box<dyn VisionLanguageClient>> {
    Ok(match mock {
        Some(p) => Box::new(MockClient::from_file(p)?),
        None => {
            let mut q = cfg.query.clone();
            if out.is_none() {
                q.cache = None;
            }
            Box::new(q.http_client(out.unwrap_or(Path::new(".")))?)
        }
    })
}

fn mrpg(run: &RunArgs, fg: &Path, bg: &Path, mock: Option<&Path>, attempts: Option<usize>) -> CmdResult {
    let flags = vec![("query.attempts", int(attempts))];
    // Without --out nothing is written; the interaction spec goes to stdout only.
    let (cfg, out) = match &run.out {
        Some(_) => {
            let (c, o) = start(run, "mrpg", flags)?;
            (c, Some(o))
        }
        None => {
            let mut c = RunConfig::resolve(run.config.as_deref(), &overrides(run, flags)?)?;
            c.query.resolve_env();
            (c, None)
        }
    };
    let client = client_for(&cfg, mock, out.as_deref())?;
    let (fg, bg) = (Image::load_png(fg)?, Image::load_png(bg)?);
    let (spec, trace) = run_region_query(client.as_ref(), &fg, &bg, &cfg.bench.templates, cfg.query.attempts)?;
    if let Some(dir) = &out {
        write_json(&dir.join("spec.json"), &spec)?;
        write_json(&dir.join("trace.json"), &trace)?;
    }
    println!("{}", serde_json::to_string_pretty(&spec).map_err(Error::from)?);
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(run: &RunArgs, data: &Path, steps: Option<usize>, pretrain_steps: Option<usize>) -> CmdResult {
    let flags = vec![("train.steps", int(steps)), ("pretrain.steps", int(pretrain_steps))];
    let (cfg, out) = start(run, "train", flags)?;
    let records = load_records(data)?;
    let mut model = Denoiser::new(cfg.model.clone())?;
    let backends = TrainBackends::toy(&model, cfg.views)?;
    let examples = records
        .iter()
        .map(|r| prepare_example(r, &model, &backends))
        .collect::<hoi_compose::Result<Vec<_>>>()?;
    if cfg.pretrain.steps > 0 {
        model = pretrain(model, &examples, &backends, cfg.pretrain.steps, cfg.pretrain.learning_rate, cfg.seed)?;
    }
    let mut opts = cfg.train.clone();
    opts.run_dir = Some(out.clone());
    let losses = out.join("losses.jsonl");
    if losses.exists() {
        fs::remove_file(&losses).map_err(|e| Error::Io { path: losses.clone(), source: e })?;
    }
    let outcome = train(TrainState::new(model, cfg.seed), &examples, &backends, &opts)?;
    match (outcome.curve.first(), outcome.curve.last()) {
        (Some(a), Some(b)) => println!(
            "{} steps: total loss {:.4} -> {:.4}; checkpoint {}",
            outcome.curve.len(),
            a.total,
            b.total,
            out.join("checkpoint").display()
        ),
        _ => println!("0 steps; checkpoint {}", out.join("checkpoint").display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn fit(img: Image, size: usize) -> Image {
    if img.height() == size && img.width() == size {
        img
    } else {
        resize_bilinear(&img, size, size)
    }
}

fn heatmap(values: &[f64], grid: (usize, usize), size: usize) -> hoi_compose::Result<Image> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scaled = values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    let small = Image::new(grid.0, grid.1, 1, scaled)?;
    let (sh, sw) = (size / grid.0, size / grid.1);
    let mut data = Vec::with_capacity(size * size);
    for r in 0..grid.0 * sh {
        for c in 0..grid.1 * sw {
            data.push(small.pixel(r / sh, c / sw)[0]);
        }
    }
    Image::new(grid.0 * sh, grid.1 * sw, 1, data)
}

fn dump_attention(cap: &AttentionCapture, grid: (usize, usize), size: usize, dir: &Path) -> hoi_compose::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for s in &cap.slices {
        heatmap(&s.foreground_text, grid, size)?
            .save_png(dir.join(format!("block{}_head{}_foreground_text.png", s.block, s.head)))?;
        heatmap(&s.identity, grid, size)?.save_png(dir.join(format!("block{}_head{}_identity.png", s.block, s.head)))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    run: &RunArgs,
    checkpoint: &Path,
    (fg, bg): (&Path, &Path),
    spec: Option<&Path>,
    mock: Option<&Path>,
    guidance: Option<f64>,
    steps: Option<usize>,
    attention: bool,
) -> CmdResult {
    let flags = vec![
        ("bench.guidance_scale", guidance.map(Value::Float)),
        ("bench.sample_steps", int(steps)),
    ];
    let (cfg, out) = start(run, "sample", flags)?;
    let (state, _) = load_checkpoint(checkpoint)?;
    let model = state.model;
    let size = model.config.image_size;
    let segmenter = BackdropSegmenter {
        backdrop: [NEUTRAL_GRAY; 3],
        tolerance: 2.0 / 255.0,
    };
    let fg = fit(preprocess_foreground(&Image::load_png(fg)?, &segmenter)?, size);
    let bg = fit(Image::load_png(bg)?, size);
    let spec: InteractionSpec = match spec {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            serde_json::from_slice(&bytes).map_err(Error::from)?
        }
        None => {
            let client = client_for(&cfg, mock, Some(&out))?;
            run_region_query(client.as_ref(), &fg, &bg, &cfg.bench.templates, cfg.query.attempts)?.0
        }
    };
    spec.validate()?;
    let inputs = BundleInputs {
        prompt: &spec.prompt,
        foreground_span: spec.foreground_span,
        interaction_region: spec.interaction_region,
        foreground: &fg,
        background: &bg,
        object_mask: None,
    };
    let bundle = build_bundle(&inputs, &model.config.encoders()?, model.config.codec(), model.config.detail_sigma)?;
    let mut opts = SampleOptions::new(cfg.bench.guidance_scale, cfg.bench.sample_steps, cfg.seed);
    opts.capture_attention = attention;
    let result = sample(&model, &bundle, &opts)?;
    result.image.save_png(out.join("sample.png"))?;
    write_json(&out.join("spec.json"), &spec)?;
    if let Some(cap) = &result.attention {
        dump_attention(cap, bundle.grid, size, &out.join("attention"))?;
    }
    println!("{}", out.join("sample.png").display());
    Ok(ExitCode::SUCCESS)
}

fn scorers(cfg: &RunConfig) -> hoi_compose::Result<Vec<Box<dyn ExternalScorer>>> {
    let reg = ScorerRegistry::with_builtins();
    cfg.scorers.iter().map(|s| reg.create(s)).collect()
}

fn bench_cmd(
    run: &RunArgs,
    checkpoint: &Path,
    data: &Path,
    mock: Option<&Path>,
    seeds: Vec<u64>,
    workers: Option<usize>,
) -> CmdResult {
    let (cfg, out) = start(run, "bench", vec![("bench.workers", int(workers))])?;
    let (state, _) = load_checkpoint(checkpoint)?;
    let spec = BenchSpec::from_manifest(data, seeds)?;
    let client = match mock {
        Some(p) => Some(MockClient::from_file(p)?),
        None => None,
    };
    let client_ref = client.as_ref().map(|c| c as &dyn VisionLanguageClient);
    let report = run_bench(&spec, &state.model, client_ref, &scorers(&cfg)?, &cfg.bench, Some(&out))?;
    print!("{}", report.markdown());
    Ok(ExitCode::SUCCESS)
}

fn parse_axis(axis: Axis, values: &str) -> std::result::Result<AblationAxis, Failure> {
    let bad = |v: &str| Failure::Usage(format!("invalid {axis:?} value {v:?}"));
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Failure::Usage("--values is empty".into()));
    }
    Ok(match axis {
        Axis::Coefficients => AblationAxis::Coefficients(
            items
                .iter()
                .map(|v| {
                    let n: Vec<f64> = v.split(':').map(|x| x.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?;
                    match n[..] {
                        [alpha1, alpha2, alpha3, alpha] => Ok(LossCoefficients {
                            alpha1,
                            alpha2,
                            alpha3,
                            alpha,
                        }),
                        _ => Err(bad(v)),
                    }
                })
                .collect::<Result<_, _>>()?,
        ),
        Axis::Variant => AblationAxis::ModulationVariant(
            items
                .iter()
                .map(|v| match *v {
                    "residual" => Ok(ModulationVariant::Residual),
                    "non_residual" | "non-residual" => Ok(ModulationVariant::NonResidual),
                    _ => Err(bad(v)),
                })
                .collect::<Result<_, _>>()?,
        ),
        Axis::Modulation => AblationAxis::Modulation(
            items
                .iter()
                .map(|v| match *v {
                    "on" | "true" => Ok(true),
                    "off" | "false" => Ok(false),
                    _ => Err(bad(v)),
                })
                .collect::<Result<_, _>>()?,
        ),
        Axis::Views => AblationAxis::Views(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?),
        Axis::Guidance => {
            AblationAxis::GuidanceScale(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?)
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    run: &RunArgs,
    data: &Path,
    bench: Option<&Path>,
    axis: Axis,
    values: &str,
    steps: Option<usize>,
    pretrain_steps: Option<usize>,
    seeds: Vec<u64>,
) -> CmdResult {
    let axis = parse_axis(axis, values)?;
    let flags = vec![("train.steps", int(steps)), ("pretrain.steps", int(pretrain_steps))];
    let (cfg, out) = start(run, "ablate", flags)?;
    let records = load_records(data)?;
    let spec = BenchSpec::from_manifest(bench.unwrap_or(data), seeds)?;
    let pretrained = if cfg.pretrain.steps > 0 {
        let model = Denoiser::new(cfg.model.clone())?;
        let backends = TrainBackends::toy(&model, cfg.views)?;
        let examples = records
            .iter()
            .map(|r| prepare_example(r, &model, &backends))
            .collect::<hoi_compose::Result<Vec<_>>>()?;
        Some(pretrain(model, &examples, &backends, cfg.pretrain.steps, cfg.pretrain.learning_rate, cfg.seed)?)
    } else {
        None
    };
    let base = AblationBase {
        config: cfg.model.clone(),
        train: cfg.train.clone(),
        views: cfg.views,
        train_records: &records,
        bench: &spec,
        bench_options: cfg.bench.clone(),
        client: None,
        pretrained: pretrained.as_ref(),
        out_dir: Some(out.clone()),
    };
    let report = run_ablation_grid(&axis, &base, &scorers(&cfg)?)?;
    print!("{}", report.markdown());
    Ok(ExitCode::SUCCESS)
}

fn validate(manifest: &Path) -> CmdResult {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut violations = 0usize;
    for (line, entry) in read_manifest_lines(manifest)? {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                println!("line {line}: {e}");
                violations += 1;
                continue;
            }
        };
        match load_record(&entry, root) {
            Ok(record) => {
                for v in validate_record(&record) {
                    println!("{}: {v}", entry.id);
                    violations += 1;
                }
            }
            Err(e) => {
                println!("{}: {e}", entry.id);
                violations += 1;
            }
        }
    }
    println!("{violations} violations");
    Ok(if violations == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
