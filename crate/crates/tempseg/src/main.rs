//! Command-line entry point: data generation, training, evaluation, gradient
//! checking, rendering, and parameter counting. Reports go to stdout, logs to
//! stderr; exit codes: 0 success, 2 usage/config error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tempseg::checkpoint::Checkpoint;
use tempseg::datagen::{generate_dataset, read_dataset, sparse_labels, write_dataset, SceneConfig};
use tempseg::error::{Error, Result};
use tempseg::losses::Difference;
use tempseg::metrics::{inconsistency_maps, ConsistencyMode, EvalAccumulator};
use tempseg::models::{Model, ModelSpec};
use tempseg::netpbm::{labels_to_image, mask_to_image, write_pgm, write_ppm};
use tempseg::recipes::{pretrain_encoder, rows_to_table, run_recipe, Recipe, RecipeConfig};
use tempseg::suite::{format_rows, run_suite, sign_flip_self_test, Scope};
use tempseg::training::{model_from_checkpoint, OptimizerKind, Phase, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "tempseg", about = "Temporal video semantic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// key=value config file (one pair per line, # comments)
    #[arg(long)]
    config: Option<PathBuf>,
    /// inline key=value overrides, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a moving-shapes video dataset on disk
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model (--model SPEC) or run a named experiment recipe
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// model spec, e.g. "architecture=VSSNet,num_classes=6"
        #[arg(long, conflicts_with = "recipe")]
        model: Option<String>,
        /// recipe name: single_frame_baseline | convlstm_positions |
        /// convolution_types | lambda_sweep | diff_variant | combined
        #[arg(long)]
        recipe: Option<String>,
        /// validation split directory (required for recipes)
        #[arg(long)]
        val: Option<PathBuf>,
        /// resume training from this checkpoint
        #[arg(long, conflicts_with = "recipe")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// use sparse ground truth: only every Nth frame drives mIoU/Acc
        #[arg(long, value_name = "N")]
        sparse_gt: Option<usize>,
        /// consistency denominator excludes a dilated band around GT changes
        #[arg(long)]
        dilated: bool,
        /// report file (default: <ckpt>.eval.txt)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        /// number of random seeds per check
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Render predictions, labels, and inconsistency masks for one scene
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report parameter counts for a model spec
    Params {
        #[arg(long)]
        model: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::Io { .. }
        | Error::Format { .. } => 2,
        _ => 3,
    }
}

/// Parses key=value pairs from a config file body or an inline override.
fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for raw in text.lines().flat_map(|l| l.split(',')) {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("expected key=value, got '{}'", line))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn collected_pairs(overrides: &Overrides) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(path) = &overrides.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        pairs.extend(parse_pairs(&text)?);
    }
    for s in &overrides.set {
        pairs.extend(parse_pairs(s)?);
    }
    Ok(pairs)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value '{}' for '{}'", value, key)))
}

/// Training-loop keys accepted in config files and --set overrides.
fn apply_train_pair(tc: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "epochs" => tc.epochs = parse_num(key, value)?,
        "learning_rate" | "lr" => tc.learning_rate = parse_num(key, value)?,
        "lr_decay" => tc.lr_decay = parse_num(key, value)?,
        "seed" => tc.seed = parse_num(key, value)?,
        "clip_norm" => tc.clip_norm = parse_num(key, value)?,
        "eval_interval" => tc.eval_interval = parse_num(key, value)?,
        "phase" => tc.phase = Phase::parse(value)?,
        "optimizer" => {
            tc.optimizer = match value.to_ascii_lowercase().as_str() {
                "adam" => OptimizerKind::default(),
                "sgd" => OptimizerKind::Sgd { momentum: 0.9 },
                other => {
                    return Err(Error::InvalidConfig(format!("unknown optimizer '{}'", other)))
                }
            }
        }
        "momentum" => match &mut tc.optimizer {
            OptimizerKind::Sgd { momentum } => *momentum = parse_num(key, value)?,
            _ => {
                return Err(Error::InvalidConfig(
                    "momentum only applies to optimizer=sgd".into(),
                ))
            }
        },
        "lambda_ce" => tc.loss.lambda_ce = parse_num(key, value)?,
        "lambda_incons" => tc.loss.lambda_incons = parse_num(key, value)?,
        "difference" => tc.loss.difference = Difference::parse(value)?,
        other => {
            return Err(Error::InvalidConfig(format!("unknown training key '{}'", other)))
        }
    }
    Ok(())
}

fn describe_train_config(tc: &TrainConfig) -> String {
    let opt = match tc.optimizer {
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            format!("adam(beta1={},beta2={},epsilon={})", beta1, beta2, epsilon)
        }
        OptimizerKind::Sgd { momentum } => format!("sgd(momentum={})", momentum),
    };
    format!(
        "epochs={}\noptimizer={}\nlearning_rate={}\nlr_decay={}\nseed={}\nphase={}\nclip_norm={}\neval_interval={}\nlambda_ce={}\nlambda_incons={}\ndifference={}\n",
        tc.epochs,
        opt,
        tc.learning_rate,
        tc.lr_decay,
        tc.seed,
        match tc.phase {
            Phase::Full => "full",
            Phase::LstmOnly => "lstm_only",
        },
        tc.clip_norm,
        tc.eval_interval,
        tc.loss.lambda_ce,
        tc.loss.lambda_incons,
        match tc.loss.difference {
            Difference::Squared => "squared",
            Difference::Absolute => "absolute",
        },
    )
}

fn echo_config(header: &str, body: &str) {
    eprintln!("[config] {}", header);
    for line in body.lines() {
        eprintln!("[config]   {}", line);
    }
}

fn cmd_generate_data(
    out: &Path,
    scenes: usize,
    seed: Option<u64>,
    split: &str,
    overrides: &Overrides,
) -> Result<()> {
    let mut config = SceneConfig::default();
    for (k, v) in collected_pairs(overrides)? {
        config.apply_pair(&k, &v)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    echo_config("generate-data", &config.to_block());

    let dataset = generate_dataset(&config, scenes, split)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_dataset(&dataset, out)?;

    let mut histogram = vec![0u64; config.num_classes];
    let mut total = 0u64;
    for scene in &dataset.scenes {
        for &label in scene.labels.data() {
            histogram[label as usize] += 1;
            total += 1;
        }
    }
    println!("scenes={}", dataset.scenes.len());
    println!("frames_per_scene={}", config.frames);
    println!("resolution={}x{}", config.height, config.width);
    for (c, count) in histogram.iter().enumerate() {
        println!("class_{}={}", c, count);
    }
    println!("label_pixels={}", total);
    eprintln!("wrote {} scenes to {}", dataset.scenes.len(), out.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    out: &Path,
    model: Option<&str>,
    recipe: Option<&str>,
    val: Option<&Path>,
    resume: Option<&Path>,
    overrides: &Overrides,
) -> Result<()> {
    let dataset = read_dataset(data)?;
    let val_dataset = val.map(read_dataset).transpose()?;
    let pairs = collected_pairs(overrides)?;

    if let Some(recipe) = recipe {
        let recipe = Recipe::parse(recipe)?;
        let val_dataset = val_dataset.ok_or_else(|| {
            Error::InvalidArgument("recipes need a validation split (--val DIR)".into())
        })?;
        let mut cfg =
            RecipeConfig { num_classes: dataset.config.num_classes, ..Default::default() };
        for (k, v) in &pairs {
            match k.as_str() {
                "base_channels" => cfg.base_channels = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                "pretrain_epochs" => cfg.pretrain_epochs = parse_num(k, v)?,
                "epochs" => cfg.epochs = parse_num(k, v)?,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown recipe key '{}'", other)))
                }
            }
        }
        echo_config(
            "train (recipe)",
            &format!(
                "recipe={}\nnum_classes={}\nbase_channels={}\nseed={}\npretrain_epochs={}\nepochs={}\n",
                recipe.label(),
                cfg.num_classes,
                cfg.base_channels,
                cfg.seed,
                cfg.pretrain_epochs,
                cfg.epochs
            ),
        );
        let encoder;
        let shared = match recipe {
            Recipe::ConvolutionTypes | Recipe::LambdaSweep | Recipe::DiffVariant
            | Recipe::Combined => {
                eprintln!("pretraining shared encoder ({} epochs)", cfg.pretrain_epochs);
                encoder = pretrain_encoder(&dataset.scenes, &cfg)?;
                Some(&encoder)
            }
            _ => None,
        };
        let rows = run_recipe(recipe, &dataset.scenes, &val_dataset.scenes, &cfg, shared)?;
        let table = rows_to_table(recipe, &rows);
        print!("{}", table);
        fs::write(out, &table).map_err(|e| Error::io(out, e))?;
        eprintln!("wrote table to {}", out.display());
        return Ok(());
    }

    let mut tc = TrainConfig::default();
    for (k, v) in &pairs {
        apply_train_pair(&mut tc, k, v)?;
    }

    let mut trainer = if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        eprintln!("resuming from {} (epoch {})", path.display(), ckpt.epoch);
        Trainer::from_checkpoint(&ckpt, tc.clone())?
    } else {
        let spec_text = model.ok_or_else(|| {
            Error::InvalidArgument("train needs --model SPEC, --recipe NAME, or --resume".into())
        })?;
        let spec = ModelSpec::parse(spec_text)?;
        if spec.num_classes < dataset.config.num_classes {
            return Err(Error::InvalidConfig(format!(
                "model has {} classes but the dataset uses {}",
                spec.num_classes, dataset.config.num_classes
            )));
        }
        Trainer::new(Model::build(&spec, tc.seed)?, tc.clone())?
    };
    echo_config("train (model)", &trainer.model.spec.to_block());
    echo_config("train (loop)", &describe_train_config(&tc));

    let log = trainer.run(&dataset.scenes, val_dataset.as_ref().map(|d| d.scenes.as_slice()))?;
    for line in &log.lines {
        eprintln!("{}", line);
    }
    trainer.save(out)?;
    let log_path = out.with_extension("log");
    fs::write(&log_path, log.lines.join("\n") + "\n").map_err(|e| Error::io(&log_path, e))?;
    eprintln!("saved checkpoint to {}", out.display());
    Ok(())
}

fn cmd_eval(
    data: &Path,
    ckpt_path: &Path,
    sparse_gt: Option<usize>,
    dilated: bool,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = model_from_checkpoint(&ckpt)?;
    echo_config("eval (model)", &model.spec.to_block());
    let dataset = read_dataset(data)?;
    let mode = if dilated { ConsistencyMode::Dilated } else { ConsistencyMode::Raw };

    let mut acc = EvalAccumulator::new(model.spec.num_classes, mode);
    if let Some(stride) = sparse_gt {
        acc.gt_coverage = format!("sparse({})", stride);
    }
    for scene in &dataset.scenes {
        let preds = model.forward_sequence_eval(&scene.frames)?;
        match sparse_gt {
            Some(stride) => {
                let spatial = sparse_labels(&scene.labels, stride)?;
                acc.add_scene_split(&preds, &spatial, &scene.labels)?;
            }
            None => acc.add_scene(&preds, &scene.labels)?,
        }
    }
    let report = acc.finalize()?;

    print!("{}", report.to_key_values());
    eprint!("{}", report.to_text());
    let default_out = ckpt_path.with_extension("eval.txt");
    let out = out.unwrap_or(&default_out);
    fs::write(out, report.to_key_values()).map_err(|e| Error::io(out, e))?;
    eprintln!("wrote report to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(scope: &str, seeds: u64) -> Result<()> {
    let scope = Scope::parse(scope)?;
    let seed_list: Vec<u64> = (0..seeds).collect();
    echo_config("gradcheck", &format!("scope={:?}\nseeds={:?}\n", scope, seed_list));
    let rows = run_suite(scope, &seed_list)?;
    print!("{}", format_rows(&rows));

    // harness self-test: a deliberately wrong gradient must fail
    let flip = sign_flip_self_test()?;
    let detected = !flip.pass();
    println!(
        "{:<28} {:>12.3e}  {}",
        flip.name,
        flip.max_err,
        if detected { "pass" } else { "FAIL" }
    );
    if rows.iter().all(|r| r.pass()) && detected {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient check failed (see table)".into()))
    }
}

fn cmd_render(data: &Path, ckpt_path: &Path, scene_idx: usize, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = model_from_checkpoint(&ckpt)?;
    let dataset = read_dataset(data)?;
    let scene = dataset.scenes.get(scene_idx).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "scene index {} out of range (dataset has {})",
            scene_idx,
            dataset.scenes.len()
        ))
    })?;
    echo_config(
        "render",
        &format!("scene={}\nframes={}\n{}", scene_idx, scene.frames.len(), model.spec.to_block()),
    );
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let s = model.spec.num_classes;
    let preds = model.forward_sequence_eval(&scene.frames)?;
    let pred_labels = preds.argmax_labels();
    let (frames, height, width) = (scene.frames.len(), scene.labels.height, scene.labels.width);
    let save = |name: String, write: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
        let path = out.join(name);
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    };
    for t in 0..frames {
        let pred_img = labels_to_image(pred_labels.frame(t), height, width, s);
        save(format!("pred_{:03}.ppm", t), &|w| write_ppm(w, &pred_img))?;
        let label_img = labels_to_image(scene.labels.frame(t), height, width, s);
        save(format!("label_{:03}.ppm", t), &|w| write_ppm(w, &label_img))?;
    }
    for t in 0..frames.saturating_sub(1) {
        let (pred_incons, gt_change) = inconsistency_maps(&preds, &scene.labels, t)?;
        let pi = mask_to_image(&pred_incons, height, width);
        save(format!("pred_incons_{:03}.pgm", t), &|w| write_pgm(w, &pi))?;
        let gc = mask_to_image(&gt_change, height, width);
        save(format!("gt_change_{:03}.pgm", t), &|w| write_pgm(w, &gc))?;
    }
    eprintln!(
        "wrote {} prediction/label frames and {} mask pairs to {}",
        frames,
        frames.saturating_sub(1),
        out.display()
    );
    Ok(())
}

fn cmd_params(spec_text: &str) -> Result<()> {
    let spec = ModelSpec::parse(spec_text)?;
    echo_config("params", &spec.to_block());
    let model = Model::build(&spec, 0)?;
    println!("total_params={}", model.total_params());
    match (&model.cell, model.cell_param_count()) {
        (Some(cell), Some(formula)) => {
            println!("cell_params={}", formula);
            println!("cell_params_enumerated={}", cell.enumerate_params());
            println!("cell_variant={}", spec.lstm_variant.label());
            println!("cell_filter={}", spec.effective_lstm_filter());
        }
        _ => println!("cell_params=0"),
    }
    for (name, p) in model.named_params() {
        println!("param.{}={}", name, p.value.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData { out, scenes, seed, split, overrides } => {
            cmd_generate_data(out, *scenes, *seed, split, overrides)
        }
        Command::Train { data, out, model, recipe, val, resume, overrides } => cmd_train(
            data,
            out,
            model.as_deref(),
            recipe.as_deref(),
            val.as_deref(),
            resume.as_deref(),
            overrides,
        ),
        Command::Eval { data, ckpt, sparse_gt, dilated, out } => {
            cmd_eval(data, ckpt, *sparse_gt, *dilated, out.as_deref())
        }
        Command::Gradcheck { scope, seeds } => cmd_gradcheck(scope, *seeds),
        Command::Render { data, ckpt, scene, out } => cmd_render(data, ckpt, *scene, out),
        Command::Params { model } => cmd_params(model),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
