use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};

use winpose::coco::{load_image, parse_keypoint_dataset, synth_dataset, write_predictions, DatasetIndex};
use winpose::config::{default_window, FusionMethod, Preset, RunConfig, SwinConfig};
use winpose::eval::{evaluate, EvalParams, KeypointConstants, PredictionInstance};
use winpose::model::PoseModel;
use winpose::profile::{ProfileRow, ProfileTable};
use winpose::selfcheck;
use winpose::train::{infer, sample_from_image, synthetic_samples, train, TrainSample};
use winpose::weights::{load_from_path, save_to_path, Dtype};
use winpose::{Error, Tensor};

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "winpose", version, about = "Windowed-attention human pose estimation")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Opts {
    /// JSON run config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// swin-t, swin-s, swin-b, swin-l or toy.
    #[arg(long, global = true)]
    model: Option<Preset>,
    /// sum or concat.
    #[arg(long, global = true)]
    fusion: Option<FusionMethod>,
    /// Square side (224, 384, ...) or HxW.
    #[arg(long, global = true, value_parser = parse_input)]
    input: Option<(usize, usize)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write skeleton overlays next to the output.
    #[arg(long, global = true)]
    render: bool,
    /// COCO-format keypoint annotation file.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Directory holding the dataset's images.
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    /// Use N generated images instead of a dataset.
    #[arg(long, global = true, value_name = "N")]
    synthetic: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Store weights as f64 instead of f32.
    #[arg(long, global = true)]
    f64_weights: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch and save weights.
    Train,
    /// Predict on a dataset and report keypoint AP/AR.
    Eval,
    /// Predict keypoints and write them as JSON.
    Infer,
    /// Print parameter and GFLOP counts.
    Profile,
    /// Run every oracle suite.
    Selfcheck,
}

fn parse_input(s: &str) -> Result<(usize, usize), String> {
    let side = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{s}` is not a size"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((side(h)?, side(w)?)),
        None => side(s).map(|v| (v, v)),
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn config_err(e: impl fmt::Display) -> Failure {
    Failure { code: EXIT_CONFIG, message: format!("config: {e}") }
}

fn data_err(e: impl fmt::Display) -> Failure {
    Failure { code: EXIT_DATA, message: format!("data: {e}") }
}

fn runtime_err(e: impl fmt::Display) -> Failure {
    Failure { code: EXIT_RUNTIME, message: e.to_string() }
}

/// Maps library errors onto the exit-code classes.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::FingerprintMismatch | Error::WeightsVersion { .. } => config_err(e),
        Error::MissingField(_)
        | Error::KeypointLength { .. }
        | Error::DanglingImage { .. }
        | Error::DegenerateBox(_)
        | Error::UnknownImage(_)
        | Error::Image { .. }
        | Error::WeightsFormat(_) => data_err(e),
        _ => runtime_err(e),
    }
}

fn run_config(opts: &Opts) -> Result<RunConfig, Failure> {
    let mut run = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(config_err)?
        }
        None => RunConfig::new(SwinConfig::toy(FusionMethod::Sum)),
    };
    let fusion = opts.fusion.unwrap_or(run.model.fusion_method);
    if let Some(preset) = opts.model {
        let side = opts.input.map_or(run.model.input_h, |(h, _)| h);
        run.model = SwinConfig::preset(preset, side, fusion);
    }
    run.model.fusion_method = fusion;
    if let Some((h, w)) = opts.input {
        if opts.model != Some(Preset::Toy) {
            run.model.window = default_window(h.max(w));
        }
        run.model.input_h = h;
        run.model.input_w = w;
    }
    if let Some(seed) = opts.seed {
        run.seed = seed;
    }
    if let Some(epochs) = opts.epochs {
        run.epochs = epochs;
    }
    if let Some(p) = &opts.dataset {
        run.paths.dataset = Some(p.display().to_string());
    }
    if let Some(p) = &opts.images {
        run.paths.images = Some(p.display().to_string());
    }
    if let Some(p) = &opts.weights {
        run.paths.weights = Some(p.display().to_string());
    }
    if let Some(p) = &opts.out {
        run.paths.output = Some(p.display().to_string());
    }
    run.validate().map_err(config_err)?;
    Ok(run)
}

/// Samples plus what rendering needs: the source images and the skeleton.
struct Loaded {
    samples: Vec<TrainSample>,
    index: DatasetIndex,
    images: HashMap<u64, Tensor>,
}

fn load_data(run: &RunConfig, opts: &Opts) -> Result<Loaded, Failure> {
    if let Some(n) = opts.synthetic {
        if run.model.input_h != run.model.input_w {
            return Err(config_err("synthetic data needs a square input"));
        }
        let data = synth_dataset(n, run.model.input_h, run.seed).map_err(data_err)?;
        let samples = synthetic_samples(run, &data).map_err(classify)?;
        let images = data.index.annotations.iter().map(|a| a.image_id).zip(data.images).collect();
        return Ok(Loaded { samples, index: data.index, images });
    }
    let path = run.paths.dataset.as_ref().ok_or_else(|| data_err("no dataset given (--dataset or --synthetic)"))?;
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{path}: {e}")))?;
    let index = parse_keypoint_dataset(&text).map_err(data_err)?;
    let root = run
        .paths
        .images
        .as_ref()
        .map(PathBuf::from)
        .or_else(|| Path::new(path).parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let mut images = HashMap::new();
    let mut samples = Vec::new();
    for gt in &index.annotations {
        if let std::collections::hash_map::Entry::Vacant(e) = images.entry(gt.image_id) {
            let info = index.image(gt.image_id).ok_or_else(|| data_err(format!("image {} missing", gt.image_id)))?;
            e.insert(load_image(&root.join(&info.file_name)).map_err(data_err)?);
        }
        samples.push(sample_from_image(run, &images[&gt.image_id], gt).map_err(classify)?);
    }
    log::info!("{} person instances from {} images", samples.len(), images.len());
    Ok(Loaded { samples, index, images })
}

fn load_model(run: &RunConfig) -> Result<PoseModel, Failure> {
    let path = run.paths.weights.as_ref().ok_or_else(|| config_err("--weights is required"))?;
    load_from_path(Path::new(path), &run.model).map_err(|e| match e {
        Error::Io(io) => data_err(format!("{path}: {io}")),
        e => classify(e),
    })
}

fn constants(run: &RunConfig) -> KeypointConstants {
    match &run.oks_constants {
        Some(k) => KeypointConstants(k.clone()),
        None if run.model.num_keypoints == 17 => KeypointConstants::coco(),
        None => KeypointConstants::uniform(run.model.num_keypoints, 0.1),
    }
}

fn cmd_train(opts: &Opts) -> Result<(), Failure> {
    let run = run_config(opts)?;
    let data = load_data(&run, opts)?;
    let mut model = PoseModel::new(run.model.clone(), run.seed).map_err(config_err)?;
    log::info!("{} parameters, {} samples, {} epochs", model.num_params(), data.samples.len(), run.epochs);
    let history = train(&mut model, &data.samples, &run).map_err(classify)?;
    let out = opts
        .out
        .clone()
        .or_else(|| run.paths.weights.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weights.swpw"));
    let dtype = if opts.f64_weights { Dtype::F64 } else { Dtype::F32 };
    save_to_path(&model, dtype, &out).map_err(runtime_err)?;
    if let (Some(first), Some(last)) = (history.epoch_losses.first(), history.epoch_losses.last()) {
        println!("loss {first:.6e} -> {last:.6e} over {} steps", history.step_losses.len());
    }
    println!("weights written to {}", out.display());
    Ok(())
}

fn predictions(opts: &Opts) -> Result<(RunConfig, Loaded, Vec<PredictionInstance>), Failure> {
    let run = run_config(opts)?;
    let model = load_model(&run)?;
    let data = load_data(&run, opts)?;
    let preds = infer(&model, &data.samples).map_err(classify)?;
    Ok((run, data, preds))
}

fn cmd_eval(opts: &Opts) -> Result<(), Failure> {
    let (run, data, preds) = predictions(opts)?;
    let mut params = EvalParams::new(constants(&run));
    params.image_ids = Some(data.index.images.iter().map(|i| i.id).collect());
    let report = evaluate(&preds, &data.index.annotations, &params).map_err(classify)?;
    println!("{report}");
    if let Some(out) = &opts.out {
        std::fs::write(out, write_predictions(&preds)).map_err(runtime_err)?;
    }
    finish_render(opts, &data, &preds)
}

fn cmd_infer(opts: &Opts) -> Result<(), Failure> {
    let (_, data, preds) = predictions(opts)?;
    let json = write_predictions(&preds);
    match &opts.out {
        Some(out) => std::fs::write(out, json).map_err(runtime_err)?,
        None => println!("{json}"),
    }
    finish_render(opts, &data, &preds)
}

fn finish_render(opts: &Opts, data: &Loaded, preds: &[PredictionInstance]) -> Result<(), Failure> {
    if !opts.render {
        return Ok(());
    }
    let dir = opts
        .out
        .as_ref()
        .and_then(|p| p.parent())
        .map(|p| p.join("overlays"))
        .unwrap_or_else(|| PathBuf::from("overlays"));
    std::fs::create_dir_all(&dir).map_err(runtime_err)?;
    let mut by_image: HashMap<u64, Vec<&PredictionInstance>> = HashMap::new();
    for p in preds {
        by_image.entry(p.image_id).or_default().push(p);
    }
    for (id, people) in by_image {
        let mut canvas = to_rgb(&data.images[&id]);
        for person in people {
            draw_person(&mut canvas, person, &data.index.skeleton);
        }
        let path = dir.join(format!("{id}.png"));
        canvas.save(&path).map_err(runtime_err)?;
    }
    println!("overlays written to {}", dir.display());
    Ok(())
}

fn to_rgb(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let data = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, data).expect("[h,w,3] image")
}

fn put(canvas: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
        canvas.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_person(canvas: &mut RgbImage, person: &PredictionInstance, skeleton: &[[usize; 2]]) {
    let limb = Rgb([255, 255, 0]);
    let joint = Rgb([255, 0, 0]);
    let kps = &person.keypoints;
    for [a, b] in skeleton {
        let (Some(p), Some(q)) = (kps.get(a.wrapping_sub(1)), kps.get(b.wrapping_sub(1))) else { continue };
        let steps = (q.x - p.x).abs().max((q.y - p.y).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            put(canvas, (p.x + t * (q.x - p.x)).round() as i64, (p.y + t * (q.y - p.y)).round() as i64, limb);
        }
    }
    for k in kps {
        let (x, y) = (k.x.round() as i64, k.y.round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                put(canvas, x + dx, y + dy, joint);
            }
        }
    }
}

fn cmd_profile(opts: &Opts) -> Result<(), Failure> {
    let run = run_config(opts)?;
    let fusions = match opts.fusion {
        Some(f) => vec![f],
        None => vec![FusionMethod::Concat, FusionMethod::Sum],
    };
    let label = opts.model.map_or_else(|| "custom".to_string(), |p| p.to_string());
    let rows: Vec<ProfileRow> = fusions
        .into_iter()
        .map(|f| {
            let mut config = run.model.clone();
            config.fusion_method = f;
            ProfileRow::new(label.clone(), &config, None)
        })
        .collect();
    print!("{}", ProfileTable(&rows));
    Ok(())
}

fn cmd_selfcheck() -> Result<(), Failure> {
    let outcomes = selfcheck::run_all();
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        println!("all {} suites passed", outcomes.len());
        Ok(())
    } else {
        Err(runtime_err(format!("{failed} of {} suites failed", outcomes.len())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train => cmd_train(&cli.opts),
        Command::Eval => cmd_eval(&cli.opts),
        Command::Infer => cmd_infer(&cli.opts),
        Command::Profile => cmd_profile(&cli.opts),
        Command::Selfcheck => cmd_selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
