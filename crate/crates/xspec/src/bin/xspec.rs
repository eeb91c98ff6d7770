use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xspec::config::RunConfig;
use xspec::error::{Error, Result};
use xspec::eval::{export_embeddings, TrialProtocol};
use xspec::net::{load_checkpoint, save_checkpoint, Precision};
use xspec::pairgen::{generate_pairs, PairOptions, PatchRecord};
use xspec::pipeline::{
    embed_images, patch_records, preprocess_dataset, report_table, run_identification_trials,
    train, Aggregation, ImagePatches, ProbeMode,
};
use xspec::rng::derive_seed;
use xspec::synth::{generate_dataset, load_dataset, write_dataset};
use xspec::tensor::{write_tensor, DType, Tensor};

/// Cross-spectrum face identification pipeline.
#[derive(Parser)]
#[command(name = "xspec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config handling: optional JSON file, then flag overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat JSON config file; unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    images_per_condition: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// identity | linear_mix | nonlinear_warp
    #[arg(long)]
    cross_modal_map: Option<String>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    dog_radius: Option<usize>,
    /// patch side length
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// none | zero_mean_unit_var
    #[arg(long)]
    normalize: Option<String>,
    /// difference | as_written
    #[arg(long)]
    convention: Option<String>,
    /// polarimetric | thermal_s0
    #[arg(long)]
    probe_mode: Option<String>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    pair_ratio: Option<f64>,
    #[arg(long)]
    same_range: Option<bool>,
    #[arg(long)]
    freeze_except_last: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    train_subjects: Option<usize>,
    /// rank probes by mean embedding or per-patch majority vote
    #[arg(long)]
    patch_vote: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.subjects {
            cfg.n_subjects = v;
        }
        if let Some(v) = self.images_per_condition {
            cfg.images_per_condition = v;
        }
        if let Some(v) = self.image_size {
            cfg.image_size = v;
        }
        if let Some(v) = self.noise_std {
            cfg.noise_std = v;
        }
        if let Some(v) = &self.cross_modal_map {
            cfg.cross_modal_map = v.parse()?;
        }
        if let Some(v) = self.sigma0 {
            cfg.sigma0 = v;
        }
        if let Some(v) = self.sigma1 {
            cfg.sigma1 = v;
        }
        if let Some(v) = self.dog_radius {
            cfg.dog_radius = v;
        }
        if let Some(v) = self.patch {
            cfg.patch_size = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = &self.normalize {
            cfg.normalize = v.parse()?;
        }
        if let Some(v) = &self.convention {
            cfg.convention = v.parse()?;
        }
        if let Some(v) = &self.probe_mode {
            cfg.probe_mode = v.parse()?;
        }
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.pair_ratio {
            cfg.pair_ratio = v;
        }
        if let Some(v) = self.same_range {
            cfg.same_range = v;
        }
        if let Some(v) = self.freeze_except_last {
            cfg.freeze_except_last = Some(v);
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.train_subjects {
            cfg.train_subjects = v;
        }
        if self.patch_vote {
            cfg.aggregation = Aggregation::PatchVote;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-modality dataset
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Polarimetry + band-pass filtering + patch extraction over a dataset
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the balanced genuine/impostor pair list for a preprocessed set
    Pairs {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// preprocess output directory
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the coupled model on a dataset directory
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fine-tune from an existing checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Emit image-level embeddings for a dataset through a checkpoint
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated-random-split identification trials with CMC reports
    EvalCmc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// initialize each trial's model from a checkpoint
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// evaluate without training (chance baseline)
        #[arg(long)]
        untrained: bool,
    },
}

fn load_patches(cfg: &RunConfig, data: &Path) -> Result<Vec<ImagePatches>> {
    let ds = load_dataset(data)?;
    preprocess_dataset(
        &ds,
        &cfg.dog_config(),
        &cfg.patch_grid(),
        cfg.normalize,
        cfg.convention,
        cfg.probe_mode,
    )
}

fn cmd_synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = generate_dataset(&cfg.synth_config())?;
    write_dataset(&ds, out)?;
    cfg.write_resolved(out)?;
    println!("wrote {} images to {}", ds.records.len(), out.display());
    Ok(())
}

fn cmd_preprocess(args: &ConfigArgs, input: &Path, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let images = load_patches(&cfg, input)?;
    std::fs::create_dir_all(out.join("patches"))?;
    let mut sidecar =
        String::from("image_id,subject_id,modality,range,condition,row,col,path\n");
    let mut n = 0usize;
    for (i, img) in images.iter().enumerate() {
        for (row, col, patch) in &img.patches {
            let rel = format!("patches/{i:05}_{row}_{col}.xspt");
            write_tensor(patch, DType::F64, &out.join(&rel))?;
            sidecar.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                img.image_id,
                img.subject_id,
                img.modality.as_str(),
                img.range_id.as_str(),
                img.condition.as_str(),
                row,
                col,
                rel
            ));
            n += 1;
        }
    }
    std::fs::write(out.join("patches.csv"), sidecar)?;
    cfg.write_resolved(out)?;
    println!("wrote {n} patches to {}", out.display());
    Ok(())
}

fn cmd_pairs(args: &ConfigArgs, input: &Path, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let text = std::fs::read_to_string(input.join("patches.csv"))?;
    let mut records = Vec::new();
    let mut paths = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format("malformed patches.csv row".into()));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad grid index `{s}`")))
        };
        records.push(PatchRecord {
            subject_id: f[1].to_string(),
            modality: f[2].parse()?,
            range_id: f[3].parse()?,
            condition: f[4].parse()?,
            grid_pos: (parse_usize(f[5])?, parse_usize(f[6])?),
            patch: Tensor::zeros(&[0]),
        });
        paths.push(f[7].to_string());
    }
    let opts = PairOptions {
        ratio: cfg.pair_ratio,
        same_range: cfg.same_range,
    };
    let pairs = generate_pairs(&records, derive_seed(cfg.seed, 20), &opts)?;
    let mut csv = String::from("vis_path,pol_path,row,col,y_cont\n");
    for p in &pairs {
        let (row, col) = records[p.vis].grid_pos;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            paths[p.vis], paths[p.pol], row, col, p.y_cont
        ));
    }
    std::fs::write(out, csv)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn cmd_train(args: &ConfigArgs, data: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let cfg = args.resolve()?;
    let images = load_patches(&cfg, data)?;
    let mut subjects: Vec<String> = images.iter().map(|i| i.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let records = patch_records(&images, &subjects);
    let init_model = init.map(load_checkpoint).transpose()?;
    let (model, log) = train(&records, &cfg.train_config(), init_model)?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&model, Precision::F64, &out.join("model.xspc"))?;
    let mut csv = String::from("epoch,mean_loss,mean_genuine_dist,mean_impostor_dist\n");
    for row in &log {
        csv.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            row.epoch, row.mean_loss, row.mean_genuine_dist, row.mean_impostor_dist
        ));
    }
    std::fs::write(out.join("train_log.csv"), csv)?;
    cfg.write_resolved(out)?;
    let last = log.last().expect("epochs >= 1");
    println!(
        "trained {} epochs; final mean loss {:.6} -> {}",
        log.len(),
        last.mean_loss,
        out.display()
    );
    Ok(())
}

fn cmd_embed(args: &ConfigArgs, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let model = load_checkpoint(ckpt)?;
    let images = load_patches(&cfg, data)?;
    let embeddings = embed_images(&model, &images)?;
    export_embeddings(&embeddings, out)?;
    println!("wrote {} embeddings to {}", embeddings.len(), out.display());
    Ok(())
}

fn cmd_eval_cmc(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    untrained: bool,
) -> Result<()> {
    let cfg = args.resolve()?;
    let images = load_patches(&cfg, data)?;
    let mut subjects: Vec<&str> = images.iter().map(|i| i.subject_id.as_str()).collect();
    subjects.sort();
    subjects.dedup();
    cfg.validate_protocol(subjects.len())?;
    let init = ckpt.map(load_checkpoint).transpose()?;
    let protocol = TrialProtocol {
        n_train: cfg.train_subjects,
        n_trials: cfg.trials,
        seed: cfg.seed,
    };
    let report = run_identification_trials(
        &images,
        &protocol,
        &cfg.train_config(),
        init.as_ref(),
        !untrained,
        cfg.aggregation,
    )?;
    std::fs::create_dir_all(out)?;
    let mut cmc = String::from("rank,rate\n");
    for (i, r) in report.mean_cmc.rates.iter().enumerate() {
        cmc.push_str(&format!("{},{:.16e}\n", i + 1, r));
    }
    std::fs::write(out.join("cmc.csv"), cmc)?;
    let rank1 = serde_json::json!({
        "mean_rank1": report.mean_rank1(),
        "rank1_std": report.rank1_std(),
        "per_trial_rank1": report.per_trial_rank1,
    });
    std::fs::write(
        out.join("rank1.json"),
        serde_json::to_string_pretty(&rank1).map_err(|e| Error::Format(e.to_string()))? + "\n",
    )?;
    let label = match cfg.probe_mode {
        ProbeMode::Polarimetric => "polar",
        ProbeMode::ThermalS0 => "therm",
    };
    let table = report_table(&report, label);
    std::fs::write(out.join("table.txt"), &table)?;
    cfg.write_resolved(out)?;
    print!("{table}");
    println!("mean rank-1 {:.4} over {} trials", report.mean_rank1(), cfg.trials);
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { cfg, out } => cmd_synth(cfg, out),
        Command::Preprocess { cfg, input, out } => cmd_preprocess(cfg, input, out),
        Command::Pairs { cfg, input, out } => cmd_pairs(cfg, input, out),
        Command::Train {
            cfg,
            data,
            out,
            init,
        } => cmd_train(cfg, data, out, init.as_deref()),
        Command::Embed {
            cfg,
            ckpt,
            data,
            out,
        } => cmd_embed(cfg, ckpt, data, out),
        Command::EvalCmc {
            cfg,
            data,
            out,
            ckpt,
            untrained,
        } => cmd_eval_cmc(cfg, data, out, ckpt.as_deref(), *untrained),
    }
}

fn main() -> ExitCode {
    // results are thread-count invariant: all pipeline stages are
    // single-threaded; XSPEC_THREADS is accepted for interface stability
    if let Ok(v) = std::env::var("XSPEC_THREADS") {
        if v.parse::<usize>().map(|n| n == 0).unwrap_or(true) {
            eprintln!("error: config: XSPEC_THREADS must be a positive integer");
            return ExitCode::from(2);
        }
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
