use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dcunet_core::inference::{
    ensemble, predict_cascaded, predict_multitask, threshold_subregions, CascadeModels,
};
use dcunet_core::io::{
    list_cases, load_case, load_labelmap, metrics_csv, save_case, save_labelmap, write_atomic,
    Framework, PipelineConfig,
};
use dcunet_core::network::{load_checkpoint, save_checkpoint, Model, ModelRole};
use dcunet_core::objectives::evaluate_case;
use dcunet_core::phantoms::{make_phantom, PhantomSpec};
use dcunet_core::postprocess::postprocess;
use dcunet_core::preprocess::zscore_normalize;
use dcunet_core::trainer::{train_cascaded, train_multitask, Dataset, TrainOutcome, TrainingCase};
use dcunet_core::volumes::{brain_mask, labels_to_subregions, MultiModalVolume, ProbabilityMaps, Subregion};

/// Brain-tumour subregion segmentation with cascaded dense 3D U-nets.
#[derive(Parser)]
#[command(name = "dcunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Z-score normalise every case of a BraTS-layout directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a multi-task network or cascade stages.
    Train(TrainArgs),
    /// Segment one case and write the label map.
    Predict(PredictArgs),
    /// Dice and HD95 of predicted against reference segmentations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the post-processing rules to an existing segmentation.
    Postprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write synthetic nested-sphere cases in BraTS layout.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_framework)]
    framework: Framework,
    /// Cascade stage; all three are trained when omitted.
    #[arg(long)]
    stage: Option<Subregion>,
    /// Overrides `data_root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `output_root`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both the training and initialisation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Write 0 in the seconds column so histories are reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long = "case")]
    case_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the configured framework.
    #[arg(long, value_parser = parse_framework)]
    framework: Option<Framework>,
}

fn parse_framework(s: &str) -> std::result::Result<Framework, String> {
    s.parse().map_err(|e: dcunet_core::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => {
            let mut config = PipelineConfig::default();
            if let Some(out) = std::env::var_os(dcunet_core::io::OUTPUT_ENV) {
                config.output_root = out.into();
            }
            Ok(config)
        }
    }
}

fn normalize(volume: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mask = brain_mask(volume)?;
    Ok(zscore_normalize(volume, &mask)?.volume)
}

fn preprocess(data: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let cases = list_cases(data)?;
    if cases.is_empty() {
        bail!("no case directories under {}", data.display());
    }
    cases.par_iter().try_for_each(|dir| -> Result<()> {
        let case = load_case(dir).with_context(|| format!("loading {}", dir.display()))?;
        let normalized = normalize(&case.volume).with_context(|| format!("normalising {}", case.case_id))?;
        save_case(out, &case.case_id, &normalized, case.labels.as_ref())?;
        log::info!("preprocessed {}", case.case_id);
        Ok(())
    })
}

fn load_training_cases(root: &Path) -> Result<Vec<TrainingCase>> {
    let mut cases = Vec::new();
    for dir in list_cases(root)? {
        let case = load_case(&dir).with_context(|| format!("loading {}", dir.display()))?;
        let Some(labels) = case.labels else {
            bail!("{} has no segmentation", dir.display());
        };
        cases.push(TrainingCase {
            id: case.case_id,
            volume: normalize(&case.volume)?,
            labels,
        });
    }
    if cases.is_empty() {
        bail!("no training cases under {}", root.display());
    }
    Ok(cases)
}

fn role_name(role: ModelRole) -> String {
    match role {
        ModelRole::Multitask => "multitask".to_string(),
        ModelRole::Cascaded(s) => format!("cascaded_{}", s.name()),
    }
}

fn write_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    let name = role_name(outcome.role);
    write_atomic(&out.join(format!("{name}_history.csv")), outcome.history.to_csv().as_bytes())?;
    let ckpt = out.join(format!("{name}.ckpt"));
    save_checkpoint(&outcome.model, outcome.role, &ckpt)?;
    let best = outcome.history.records.get(outcome.history.best_epoch);
    log::info!(
        "{name}: {} epochs, best epoch {} (val dice {:.4}), checkpoint {}",
        outcome.history.records.len(),
        outcome.history.best_epoch,
        best.map_or(f64::NAN, |r| r.val_dice),
        ckpt.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
        config.init_seed = seed;
    }
    if args.no_timing {
        config.record_time = false;
    }
    let data = args.data.clone().unwrap_or_else(|| config.data_root.clone());
    let out = args.out.clone().unwrap_or_else(|| config.output_root.clone());
    fs::create_dir_all(&out)?;
    let dataset = Dataset::split(load_training_cases(&data)?, config.val_fraction);
    let train_cfg = config.train();
    match args.framework {
        Framework::Multitask => {
            if args.stage.is_some() {
                bail!("--stage only applies to the cascaded framework");
            }
            let outcome = train_multitask(&dataset, &config.network(ModelRole::Multitask), &train_cfg)?;
            write_outcome(&out, &outcome)
        }
        Framework::Cascaded => {
            let stages = match args.stage {
                Some(s) => vec![s],
                None => Subregion::ALL.to_vec(),
            };
            for stage in stages {
                let role = ModelRole::Cascaded(stage);
                let outcome = train_cascaded(&dataset, &config.network(role), &train_cfg, stage)?;
                write_outcome(&out, &outcome)?;
            }
            Ok(())
        }
        Framework::Ensemble => bail!("train the multitask and cascaded frameworks separately"),
    }
}

/// Checkpoints keyed by role; each role may appear once.
fn load_models(paths: &[PathBuf]) -> Result<BTreeMap<String, (ModelRole, Model)>> {
    let mut models = BTreeMap::new();
    for path in paths {
        let (model, role) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        if models.insert(role_name(role), (role, model)).is_some() {
            bail!("more than one {} checkpoint given", role_name(role));
        }
    }
    Ok(models)
}

fn predict(args: &PredictArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let framework = args.framework.unwrap_or(config.framework);
    let models = load_models(&args.checkpoints)?;
    let expected: &[&str] = match framework {
        Framework::Multitask => &["multitask"],
        Framework::Cascaded => &["cascaded_et", "cascaded_tc", "cascaded_wt"],
        Framework::Ensemble => &["cascaded_et", "cascaded_tc", "cascaded_wt", "multitask"],
    };
    let given: Vec<&str> = models.keys().map(String::as_str).collect();
    if given != expected {
        bail!("{framework:?} prediction needs checkpoints {expected:?}, got {given:?}");
    }
    let case = load_case(&args.case_dir).with_context(|| format!("loading {}", args.case_dir.display()))?;
    let volume = normalize(&case.volume)?;
    let tta = config.tta();
    let policy = config.thresholds();
    let multitask = || -> Result<ProbabilityMaps> {
        Ok(predict_multitask(&models["multitask"].1, &volume, &tta, &policy)?)
    };
    let cascaded = || -> Result<ProbabilityMaps> {
        let stages = CascadeModels {
            wt: &models["cascaded_wt"].1,
            tc: &models["cascaded_tc"].1,
            et: &models["cascaded_et"].1,
        };
        Ok(predict_cascaded(stages, &volume, &tta, &policy)?)
    };
    let probs = match framework {
        Framework::Multitask => multitask()?,
        Framework::Cascaded => cascaded()?,
        Framework::Ensemble => ensemble(&multitask()?, &cascaded()?)?,
    };
    let masks = threshold_subregions(&probs, &policy);
    let labels = postprocess(&masks, &config.postprocess(), *volume.geometry())?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_labelmap(&labels, &args.out)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

/// Segmentation files keyed by case id: `<id>/<id>_seg.nii.gz`,
/// `<id>_seg.nii.gz` or `<id>.nii.gz`.
fn find_segmentations(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_dir() {
            let seg = path.join(format!("{name}_seg.nii.gz"));
            if seg.exists() {
                found.insert(name, seg);
            }
        } else if let Some(stem) = name.strip_suffix(".nii.gz") {
            let id = stem.strip_suffix("_seg").unwrap_or(stem);
            found.insert(id.to_string(), path);
        }
    }
    Ok(found)
}

fn evaluate(pred: &Path, truth: &Path, out: &Path) -> Result<()> {
    let truths = find_segmentations(truth)?;
    if truths.is_empty() {
        bail!("no reference segmentations under {}", truth.display());
    }
    let preds = find_segmentations(pred)?;
    let rows: Vec<(String, dcunet_core::objectives::CaseMetrics)> = truths
        .par_iter()
        .map(|(id, truth_path)| -> Result<_> {
            let pred_path = preds
                .get(id)
                .with_context(|| format!("no prediction for case {id} under {}", pred.display()))?;
            let metrics = evaluate_case(&load_labelmap(pred_path)?, &load_labelmap(truth_path)?)
                .with_context(|| format!("evaluating {id}"))?;
            Ok((id.clone(), metrics))
        })
        .collect::<Result<_>>()?;
    write_atomic(out, metrics_csv(&rows)?.as_bytes())?;
    Ok(())
}

fn postprocess_file(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let labels = load_labelmap(input).with_context(|| format!("loading {}", input.display()))?;
    let masks = labels_to_subregions(&labels);
    let cleaned = postprocess(&masks, &config.postprocess(), *labels.geometry())?;
    save_labelmap(&cleaned, out)?;
    Ok(())
}

fn phantoms(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    for i in 0..count {
        let r_wt = n * rng.random_range(0.34..0.40);
        let mut spec = PhantomSpec::centred([size; 3], r_wt, 0.7 * r_wt, 0.45 * r_wt, rng.random());
        let slack = ((n - 1.0) / 2.0 - r_wt).clamp(0.0, 1.5);
        for c in spec.tumour_centre.iter_mut() {
            *c += rng.random_range(-slack..=slack);
        }
        let (volume, labels) = make_phantom(&spec)?;
        save_case(out, &format!("phantom_{i:03}"), &volume, Some(&labels))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { data, out } => preprocess(&data, &out),
        Command::Train(args) => train(&args),
        Command::Predict(args) => predict(&args),
        Command::Evaluate { pred, truth, out } => evaluate(&pred, &truth, &out),
        Command::Postprocess { input, out, config } => postprocess_file(&input, &out, config.as_deref()),
        Command::Phantom { out, count, size, seed } => phantoms(&out, count, size, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
