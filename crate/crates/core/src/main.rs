use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcskd::evalkit::{
    bench_fps, binarize, evaluate_with, predict, run_ablation, write_panel, Matrix, MetricsReport,
    SIMPLIFIED_AP_NOTE,
};
use tcskd::nets::{init_params, NetParams, Role};
use tcskd::scenegen::{generate_split, load_dataset, save_dataset, SceneSample};
use tcskd::trainer::{distill_student, log_csv, pretrain_teacher_coach};
use tcskd::{file_crc, Error, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "tcskd",
    version,
    about = "Teacher-coach-student BEV map distillation at desk scale"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set distill.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this command (default: <out_dir>/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/val scene containers and a CRC manifest.
    Gen,
    /// Jointly pretrain teacher and coach.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill a student from the frozen teacher and coach.
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding teacher.tcsp and coach.tcsp.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Drop the coach (beta2 = gamma2 = 0).
        #[arg(long)]
        two_stage: bool,
        /// Train the plain supervised student instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Metrics of one or more checkpoints on the validation split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
    /// Run an ablation matrix: table3, table4, beta or gamma.
    Ablate {
        matrix: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Parallel student runs (overrides ablate.jobs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Forward throughput of checkpoints (or freshly initialized roles).
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoints; with none, student and teacher at init are timed.
        models: Vec<PathBuf>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Gen => "gen",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::Distill { .. } => "distill",
            Cmd::Eval { .. } => "eval",
            Cmd::Ablate { .. } => "ablate",
            Cmd::Bench { .. } => "bench",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::MissingInput(_) => 3,
        Error::Corrupt { .. } => 4,
        Error::Diverged(_) => 5,
        _ => 1,
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let base = cfg.resolved_out_dir();
    let out = cli
        .common
        .out
        .clone()
        .unwrap_or_else(|| base.join(cli.cmd.name()));
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| base.join("gen"));
    let models_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| base.join("pretrain"));
    prepare_out(&out, cli.common.force)?;
    write(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    match &cli.cmd {
        Cmd::Gen => cmd_gen(&cfg, &out),
        Cmd::Pretrain { data } => cmd_pretrain(&cfg, &data_dir(data), &out),
        Cmd::Distill {
            data,
            models,
            two_stage,
            baseline,
        } => cmd_distill(
            &cfg,
            &data_dir(data),
            &models_dir(models),
            &out,
            *two_stage,
            *baseline,
        ),
        Cmd::Eval { data, models } => cmd_eval(&cfg, &data_dir(data), models, &out),
        Cmd::Ablate {
            matrix,
            data,
            models,
            jobs,
        } => {
            let mut cfg = cfg.clone();
            if let Some(j) = jobs {
                cfg.ablate.jobs = *j;
            }
            cmd_ablate(
                &cfg,
                Matrix::parse(matrix)?,
                &data_dir(data),
                &models_dir(models),
                &out,
            )
        }
        Cmd::Bench { data, models } => cmd_bench(&cfg, &data_dir(data), models, &out),
    }
}

/// Refuse to write into a non-empty directory unless forced.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() {
            if !force {
                return Err(Error::InvalidArgument(format!(
                    "{} exists and is not empty (use --force)",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn need_file(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingInput(format!("{} not found", path.display())))
    }
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<SceneSample>> {
    Ok(load_dataset(need_file(&dir.join(format!("{split}.tcsd")))?)?.samples)
}

fn load_model(path: &Path) -> Result<NetParams> {
    NetParams::load(need_file(path)?)
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let echo = cfg.to_text();
    let mut manifest = String::from("file,samples,crc32\n");
    for (split, count) in [("train", cfg.gen.train_count), ("val", cfg.gen.val_count)] {
        let idx = if split == "train" { 0 } else { 1 };
        let samples = generate_split(&cfg.gen, cfg.seed, idx, count)?;
        let name = format!("{split}.tcsd");
        let path = out.join(&name);
        save_dataset(&samples, &echo, &path)?;
        let _ = writeln!(manifest, "{name},{count},{:08x}", file_crc(&path)?);
    }
    write(&out.join("manifest.csv"), manifest.as_bytes())?;
    print!("{manifest}");
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let r = pretrain_teacher_coach(&cfg.pretrain, &train, &val, cfg.seed, Some(&ckpt))?;
    r.teacher.save(&out.join("teacher.tcsp"))?;
    r.coach.save(&out.join("coach.tcsp"))?;
    write(
        &out.join("teacher_log.csv"),
        log_csv(&r.teacher_log).as_bytes(),
    )?;
    write(&out.join("coach_log.csv"), log_csv(&r.coach_log).as_bytes())?;
    Ok(())
}

fn cmd_distill(
    cfg: &RunConfig,
    data: &Path,
    models: &Path,
    out: &Path,
    two_stage: bool,
    baseline: bool,
) -> Result<()> {
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let mut settings = cfg.distill.clone();
    if two_stage {
        settings.weights = tcskd::evalkit::two_stage(&settings.weights);
    }
    if baseline {
        settings.weights.lambda1 = 0.0;
        settings.weights.lambda2 = 0.0;
    }
    let run = if settings.weights.lambda1 == 0.0 && settings.weights.lambda2 == 0.0 {
        tcskd::trainer::train_student(&settings, &train, &val, None, cfg.seed)?
    } else {
        let teacher = load_model(&models.join("teacher.tcsp"))?;
        let coach = if settings.weights.uses_coach() {
            Some(load_model(&models.join("coach.tcsp"))?)
        } else {
            None
        };
        distill_student(&settings, &train, &val, &teacher, coach.as_ref(), cfg.seed)?
    };
    run.student.save(&out.join("student.tcsp"))?;
    write(&out.join("student_log.csv"), log_csv(&run.log).as_bytes())?;
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn cmd_eval(cfg: &RunConfig, data: &Path, models: &[PathBuf], out: &Path) -> Result<()> {
    let val = load_split(data, "val")?;
    let mut csv = format!("{SIMPLIFIED_AP_NOTE}\n{}\n", MetricsReport::csv_header());
    let mut loaded = Vec::new();
    for path in models {
        let m = load_model(path)?;
        let r = evaluate_with(&m, &val, cfg.eval.batch_size, cfg.eval.threshold)?;
        csv.push_str(&r.csv_row(&model_name(path), cfg.seed));
        csv.push('\n');
        loaded.push(m);
    }
    write(&out.join("metrics.csv"), csv.as_bytes())?;
    print!("{csv}");
    let n = cfg.eval.panels.min(val.len());
    if n > 0 {
        let preds: Vec<Vec<_>> = loaded
            .iter()
            .map(|m| predict(m, &val[..n], 1))
            .collect::<Result<_>>()?;
        for (i, s) in val[..n].iter().enumerate() {
            let bins: Vec<_> = preds
                .iter()
                .map(|p| binarize(&p[i], cfg.eval.threshold))
                .collect();
            let mut tiles = vec![&s.gt_sem];
            tiles.extend(bins.iter());
            write_panel(&out.join(format!("panel_{i:03}.ppm")), &tiles)?;
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, m: Matrix, data: &Path, models: &Path, out: &Path) -> Result<()> {
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let teacher = load_model(&models.join("teacher.tcsp"))?;
    let coach = load_model(&models.join("coach.tcsp"))?;
    let table = run_ablation(
        m,
        &cfg.distill,
        &train,
        &val,
        &teacher,
        &coach,
        cfg.seed,
        &cfg.ablate,
    )?;
    let csv = table.csv();
    write(&out.join(format!("{}.csv", m.name())), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, data: &Path, models: &[PathBuf], out: &Path) -> Result<()> {
    let val = load_split(data, "val")?;
    let named: Vec<(String, NetParams)> = if models.is_empty() {
        [Role::Student, Role::Teacher]
            .into_iter()
            .map(|r| (r.name().to_string(), init_params(r, cfg.seed)))
            .collect()
    } else {
        models
            .iter()
            .map(|p| Ok((model_name(p), load_model(p)?)))
            .collect::<Result<_>>()?
    };
    let b = &cfg.bench;
    let mut csv = String::from("model,run,params,fps\n");
    for (name, m) in &named {
        for run in 0..b.runs {
            let fps = bench_fps(m, &val, b.warmup, b.iters, b.batch_size)?;
            let _ = writeln!(csv, "{name},{run},{},{fps:.3}", m.param_count());
        }
    }
    write(&out.join("bench.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
