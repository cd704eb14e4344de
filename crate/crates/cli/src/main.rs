//! `updetr`: synthetic data, pre-training, fine-tuning, evaluation,
//! localization, ablations and the gradient suite from one executable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{Map, Value};

use updetr::checkpoint::Checkpoint;
use updetr::eval::{evaluate_model, locate, read_csv};
use updetr::model::{HeadMode, Model};
use updetr::pretext::ppm::read_ppm;
use updetr::pretext::{load_detection_dir, write_synth_dataset, SceneSpec};
use updetr::train::{
    ablation_matrix, AblationConfig, TrainConfig, TrainMode, Trainer, CHECKPOINT_FILE, CONFIG_FILE, CURVES_FILE,
    FINETUNE_PREFIX,
};
use updetr::verify::full_suite;
use updetr::Error;

const AFTER_HELP: &str = "\
Training commands (pretrain, finetune, ablate) also take any config key as
`--key value`, e.g. `--epochs 5 --use_attention_mask false`; these win over
the config file. For ablate, `--finetune.key value` sets a fine-tuning-only key.

Exit codes: 0 success, 1 runtime failure, 2 usage error.";

#[derive(Parser, Debug)]
#[command(name = "updetr", version, about = "Random query patch detection at desk scale", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic detection dataset (PPM images, manifest, ground truth).
    Synth {
        /// Number of images.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        #[arg(long, default_value_t = 6)]
        max_objects: usize,
    },
    /// Pre-train on random query patches.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune a detector, from `--init` or from scratch.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a detection checkpoint on a dataset directory written by `synth`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Find query patches in an image with a pre-trained checkpoint.
    Locate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Query patch image; repeat for several patches.
        #[arg(long = "patch", required = true)]
        patches: Vec<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the frozen-CNN × reconstruction matrix plus the mask, shuffle and
    /// patch-count comparisons.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference check of every differentiable op and of the
    /// end-to-end pretext loss.
    Gradcheck {
        /// Random inputs per op.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat JSON config; its values are defaults for the command line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Pulls `--key value` pairs naming config keys out of `argv`.
fn split_overrides(argv: Vec<String>, is_key: impl Fn(&str) -> bool) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").map(|k| k.split_once('=').map_or((k, None), |(k, v)| (k, Some(v))));
        match key {
            Some((k, inline)) if is_key(k) => {
                let value = match inline {
                    Some(v) => Some(v.to_string()),
                    None => it.next(),
                };
                match value {
                    Some(v) => overrides.push((k.to_string(), v)),
                    // leave it to clap to report the dangling flag
                    None => rest.push(a),
                }
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn is_override_key(command: Option<&str>, key: &str) -> bool {
    match command {
        Some("pretrain" | "finetune") => TrainConfig::is_key(key),
        Some("ablate") => TrainConfig::is_key(key.strip_prefix(FINETUNE_PREFIX).unwrap_or(key)),
        _ => false,
    }
}

fn read_object(path: Option<&Path>) -> Result<Map<String, Value>, Error> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(o)) => Ok(o),
        Ok(_) => Err(Error::Config(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: not valid JSON: {e}", path.display()))),
    }
}

fn with_path(path: Option<&Path>, e: Error) -> Error {
    match (path, e) {
        (Some(p), Error::Config(m)) => Error::Config(format!("{}: {m}", p.display())),
        (_, e) => e,
    }
}

/// File values for `mode`, then command-line overrides on top.
fn train_config(run: &RunArgs, mode: TrainMode, overrides: &[(String, String)]) -> Result<TrainConfig, Error> {
    let path = run.config.as_deref();
    let mut obj = read_object(path)?;
    let want = serde_json::to_value(mode).expect("mode serializes");
    match obj.get("mode") {
        Some(m) if *m != want => {
            return Err(with_path(path, Error::Config(format!("key `mode`: this command needs {want}, got {m}"))))
        }
        _ => {
            obj.insert("mode".into(), want);
        }
    }
    let mut cfg = TrainConfig::from_value(&Value::Object(obj)).map_err(|e| with_path(path, e))?;
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn train(cfg: &TrainConfig, out: &Path, resume: bool) -> Result<(), Error> {
    create_dir(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let curves = out.join(CURVES_FILE);
        let records = if curves.exists() { read_csv(&curves)? } else { Vec::new() };
        Trainer::resume(cfg, &ck, records)?
    } else {
        Trainer::new(cfg)?
    };
    while !trainer.finished() {
        trainer.run_epoch()?;
        trainer.save(out)?;
        let epoch = trainer.epoch();
        let line: Vec<String> = trainer
            .records()
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| format!("{}/{}={:.4}", r.split, r.metric, r.value))
            .collect();
        eprintln!("epoch {epoch}: {}", line.join(" "));
    }
    // a finished run that was resumed still leaves a full set of outputs
    trainer.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Error> {
    match cli.command {
        Command::Synth { n, out, seed, size, min_objects, max_objects } => {
            let spec = SceneSpec {
                width: size,
                height: size,
                min_shapes: min_objects,
                max_shapes: max_objects,
                ..SceneSpec::default()
            };
            write_synth_dataset(&out, n, &spec, seed)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Pretrain { run, resume } => {
            let cfg = train_config(&run, TrainMode::Pretrain, &overrides)?;
            train(&cfg, &run.out, resume)?;
        }
        Command::Finetune { run, init, resume } => {
            let mut cfg = train_config(&run, TrainMode::Finetune, &overrides)?;
            if let Some(init) = init {
                if !init.exists() {
                    return Err(Error::Io { path: init, source: std::io::ErrorKind::NotFound.into() });
                }
                cfg.init_checkpoint = Some(init);
            }
            train(&cfg, &run.out, resume)?;
        }
        Command::Eval { checkpoint, data, .. } => {
            let model = Model::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            if model.mode() != HeadMode::Detection {
                return Err(Error::Input(format!("{}: not a detection checkpoint", checkpoint.display())));
            }
            let samples: Vec<_> = load_detection_dir(&data)?.into_iter().map(|(_, s)| s).collect();
            let report = evaluate_model(&model, &samples)?;
            let o = report.overall;
            println!("ap {:.6}\nap50 {:.6}\nap75 {:.6}", o.ap, o.ap50, o.ap75);
            for (k, c) in report.per_class.iter().enumerate() {
                if let Some(c) = c {
                    println!("class{k} ap {:.6} ap50 {:.6} ap75 {:.6}", c.ap, c.ap50, c.ap75);
                }
            }
        }
        Command::Locate { checkpoint, image, patches, out, .. } => {
            let model = Model::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let img = read_ppm(&image)?;
            let patches = patches.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>, _>>()?;
            let text = locate(&model, &img, &patches)?.to_text();
            print!("{text}");
            if let Some(out) = out {
                std::fs::write(&out, &text).map_err(|e| Error::Io { path: out, source: e })?;
            }
        }
        Command::Ablate { run } => {
            let path = run.config.as_deref();
            let mut obj = read_object(path)?;
            for (k, raw) in &overrides {
                let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
                obj.insert(k.clone(), v);
            }
            let cfg = AblationConfig::from_value(&Value::Object(obj)).map_err(|e| with_path(path, e))?;
            create_dir(&run.out)?;
            let report = ablation_matrix(&cfg, Some(&run.out))?;
            print!("{}", report.summary());
            let p = run.out.join(CONFIG_FILE);
            let both = serde_json::json!({ "pretrain": cfg.pretrain, "finetune": cfg.finetune });
            std::fs::write(&p, serde_json::to_string_pretty(&both).expect("config serializes") + "\n")
                .map_err(|e| Error::Io { path: p, source: e })?;
        }
        Command::Gradcheck { trials, seed } => {
            let reports = full_suite(trials, seed)?;
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<28} {:.3e} < {:.0e} {verdict}", r.name, r.max_rel_error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

/// Every config key with its default for `mode`, for subcommand help.
fn key_reference(mode: TrainMode, prefix: &str) -> String {
    let v = serde_json::to_value(TrainConfig::defaults(mode)).expect("config serializes");
    let mut s = format!("Config keys (settable as `--{prefix}key value`), {mode:?} defaults:\n");
    for (k, v) in v.as_object().expect("config is an object") {
        s.push_str(&format!("  --{prefix}{k} {v}\n"));
    }
    s
}

fn parse(argv: Vec<String>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command()
        .mut_subcommand("pretrain", |c| c.after_help(key_reference(TrainMode::Pretrain, "")))
        .mut_subcommand("finetune", |c| c.after_help(key_reference(TrainMode::Finetune, "")))
        .mut_subcommand("ablate", |c| {
            c.after_help(format!(
                "{}\nSchedule keys apply to pre-training only; prefix any key with `{FINETUNE_PREFIX}` to set it for the fine-tuning runs.",
                key_reference(TrainMode::Pretrain, "")
            ))
        });
    Cli::from_arg_matches(&cmd.try_get_matches_from(argv)?)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let command = argv.get(1).cloned();
    let (rest, overrides) = split_overrides(argv, |k| is_override_key(command.as_deref(), k));
    let cli = match parse(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_pulled_out() {
        let (rest, o) = split_overrides(argv("updetr pretrain --out x --epochs 3 --seed=4"), |k| {
            is_override_key(Some("pretrain"), k)
        });
        assert_eq!(rest, argv("updetr pretrain --out x"));
        assert_eq!(o, vec![("epochs".into(), "3".into()), ("seed".into(), "4".into())]);
    }

    #[test]
    fn dangling_key_is_left_for_clap() {
        let (rest, o) = split_overrides(argv("updetr pretrain --epochs"), |k| is_override_key(Some("pretrain"), k));
        assert_eq!(rest, argv("updetr pretrain --epochs"));
        assert!(o.is_empty());
    }

    #[test]
    fn ablate_accepts_finetune_prefix() {
        assert!(is_override_key(Some("ablate"), "finetune.epochs"));
        assert!(!is_override_key(Some("ablate"), "finetune.bogus"));
        assert!(!is_override_key(Some("eval"), "epochs"));
    }
}
