use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use egotpil::config::{ConfigError, RunConfig};
use egotpil::eval::{
    dump_permutation_recon, eval_alignment, pca_csv, pca_projection, EvalError, PpmError,
};
use egotpil::imitation::{
    eval_policy, train_policy, Actor, Demo, ImitationError, PolicyNet, StateEncoder,
};
use egotpil::model::{Branch, DualAe, ModelError};
use egotpil::sim::{collect_dataset, Dataset, SimError, Split};
use egotpil::tensor::{read_checkpoint, write_checkpoint, CheckpointError, TensorError};
use egotpil::train::{train, TrainError};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "egotpil",
    version,
    about = "Multi-view state representations and imitation from a single demonstration"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fpil,
    Tpil,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Roll the expert and write a dataset with its manifest.
    Collect {
        /// Output directory; defaults to data.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing non-empty directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the dual auto-encoder.
    TrainRepr {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "repr.egw")]
        out: PathBuf,
        /// Viewpoint code size; 0 gives the baseline without L_permute.
        #[arg(long)]
        dim_v: Option<usize>,
        /// Loss log; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Alignment report, PCA projection and reconstruction dumps.
    EvalRepr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Learn a policy from one held-out demonstration.
    TrainPolicy {
        #[arg(long)]
        repr: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        demo_id: usize,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value = "policy.egw")]
        out: PathBuf,
        /// Per-update statistics; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Greedy evaluation episodes toward the demonstration's target.
    EvalPolicy {
        /// Trained policy; not needed with --random-policy.
        #[arg(long, required_unless_present = "random_policy")]
        policy: Option<PathBuf>,
        #[arg(long)]
        repr: PathBuf,
        /// Uniform-random actions instead of a trained policy.
        #[arg(long)]
        random_policy: bool,
        /// Take the target from this demonstration instead of the policy checkpoint.
        #[arg(long, requires = "demo_id")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        demo_id: Option<usize>,
        #[arg(long, default_value = "policy_eval.csv")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage/config, 2 I/O, 3 numerical failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        let kind = if let Some(x) = cause.downcast_ref::<TensorError>() {
            tensor_kind(x)
        } else if let Some(x) = cause.downcast_ref::<ModelError>() {
            model_kind(x)
        } else if let Some(x) = cause.downcast_ref::<CheckpointError>() {
            matches!(x, CheckpointError::Io(_)).then_some(2)
        } else if let Some(x) = cause.downcast_ref::<SimError>() {
            matches!(x, SimError::Io(_) | SimError::Path { .. }).then_some(2)
        } else if let Some(x) = cause.downcast_ref::<EvalError>() {
            eval_kind(x)
        } else if let Some(x) = cause.downcast_ref::<TrainError>() {
            match x {
                TrainError::Model(m) => model_kind(m),
                TrainError::Eval(e) => eval_kind(e),
                TrainError::Io(_) => Some(2),
                _ => None,
            }
        } else if let Some(x) = cause.downcast_ref::<ImitationError>() {
            match x {
                ImitationError::NonFinite { .. } => Some(3),
                ImitationError::Tensor(t) => tensor_kind(t),
                ImitationError::Model(m) => model_kind(m),
                ImitationError::Sim(SimError::Io(_) | SimError::Path { .. })
                | ImitationError::Io(_) => Some(2),
                _ => None,
            }
        } else if let Some(x) = cause.downcast_ref::<ConfigError>() {
            matches!(x, ConfigError::Io { .. }).then_some(2)
        } else {
            None
        };
        if let Some(k) = kind {
            return k;
        }
    }
    1
}

fn tensor_kind(e: &TensorError) -> Option<u8> {
    matches!(e, TensorError::NonFinite { .. }).then_some(3)
}

fn model_kind(e: &ModelError) -> Option<u8> {
    match e {
        ModelError::Tensor(t) => tensor_kind(t),
        _ => None,
    }
}

fn eval_kind(e: &EvalError) -> Option<u8> {
    match e {
        EvalError::Model(m) => model_kind(m),
        EvalError::Io(_) | EvalError::Ppm(PpmError::Io(_)) => Some(2),
        _ => None,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.apply_seed();
    }
    match cli.command {
        Command::Collect { out, overwrite } => collect(&cfg, out, overwrite),
        Command::TrainRepr {
            dataset,
            out,
            dim_v,
            log,
        } => train_repr(&cfg, dataset, &out, dim_v, log),
        Command::EvalRepr {
            checkpoint,
            dataset,
            split,
            out_dir,
        } => eval_repr(&cfg, &checkpoint, dataset, split, &out_dir),
        Command::TrainPolicy {
            repr,
            dataset,
            demo_id,
            mode,
            out,
            stats,
        } => train_pol(&cfg, &repr, dataset, demo_id, mode, &out, stats),
        Command::EvalPolicy {
            policy,
            repr,
            random_policy,
            dataset,
            demo_id,
            out,
        } => eval_pol(&cfg, policy, &repr, random_policy, dataset, demo_id, &out),
    }
}

fn dataset_dir(cfg: &RunConfig, arg: Option<PathBuf>) -> PathBuf {
    cfg.resolve(&arg.unwrap_or_else(|| cfg.data.out_dir.clone()))
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    p.with_extension(ext)
}

fn collect(cfg: &RunConfig, out: Option<PathBuf>, overwrite: bool) -> anyhow::Result<()> {
    let dir = dataset_dir(cfg, out);
    let non_empty = dir.is_dir()
        && fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if non_empty {
        if !overwrite {
            bail!(
                "{} exists and is not empty; pass --overwrite to replace it",
                dir.display()
            );
        }
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    let m = collect_dataset(
        &cfg.env,
        cfg.data.trajectories,
        cfg.data.test_fraction,
        cfg.seed,
        &dir,
    )?;
    println!(
        "collected {} trajectories ({} train, {} test) into {}",
        m.trajectories.len(),
        m.ids(Split::Train).len(),
        m.ids(Split::Test).len(),
        dir.display()
    );
    Ok(())
}

fn load_repr(cfg: &RunConfig, path: &Path) -> anyhow::Result<DualAe> {
    let path = cfg.resolve(path);
    let ck = read_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
    let model = DualAe::from_checkpoint(&ck)?;
    if model.arch.resolution != cfg.env.resolution {
        bail!(
            "representation expects {}px frames, env renders {}px",
            model.arch.resolution,
            cfg.env.resolution
        );
    }
    Ok(model)
}

fn train_repr(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    out: &Path,
    dim_v: Option<usize>,
    log: Option<PathBuf>,
) -> anyhow::Result<()> {
    let dir = dataset_dir(cfg, dataset);
    let train_data = Dataset::load(&dir, &[Split::Train])?;
    let test_data = Dataset::load(&dir, &[Split::Test])?;
    let mut tc = cfg.repr.clone();
    if let Some(d) = dim_v {
        tc.arch.dim_v = d;
    }
    let out = cfg.resolve(out);
    let log_path = log.map_or_else(|| with_ext(&out, "csv"), |p| cfg.resolve(&p));
    let mut model = DualAe::new(tc.arch.clone(), tc.seed)?;
    let mut w = BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let eval = (!test_data.split_ids(Split::Test).is_empty()).then_some(&test_data);
    let report = train(&mut model, &train_data, eval, &tc, Some(&mut w), None)?;
    let ck = model.to_checkpoint(json!({
        "dataset_seed": train_data.manifest.seed,
        "seed": tc.seed,
        "steps": tc.steps,
        "best_step": report.best_step,
    }));
    write_checkpoint(&out, &ck).with_context(|| format!("writing {}", out.display()))?;
    println!("trained {} steps; wrote {}", report.steps, out.display());
    Ok(())
}

fn eval_repr(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<PathBuf>,
    split: SplitArg,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let model = load_repr(cfg, checkpoint)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = Dataset::load(&dataset_dir(cfg, dataset), &[split])?;
    let out_dir = cfg.resolve(out_dir);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let id = checkpoint
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let report = eval_alignment(&model, &data, split, &id)?;
    write(&out_dir.join("alignment.csv"), report.to_csv())?;
    let (_, rows) = pca_projection(&model, &data, split)?;
    write(&out_dir.join("pca.csv"), pca_csv(&rows))?;
    if let Some((tid, traj)) = data.split(split).first() {
        dump_permutation_recon(
            &model,
            traj,
            traj.len() / 2,
            &out_dir.join(format!("recon_traj{tid}")),
        )?;
    }
    println!("all_views_alignment_error={}", report.all_views_mean);
    println!("alignment_error={}", report.mean);
    Ok(())
}

fn write(path: &Path, s: String) -> anyhow::Result<()> {
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// The demonstration trajectory, refused unless it is held out.
fn load_demo(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    id: usize,
) -> anyhow::Result<egotpil::sim::Trajectory> {
    let data = Dataset::load(&dataset_dir(cfg, dataset), &[Split::Test])?;
    let entry = data.manifest.trajectories.get(id).ok_or_else(|| {
        anyhow!(
            "demo {id} is not in the dataset ({} trajectories)",
            data.manifest.trajectories.len()
        )
    })?;
    if entry.split != Split::Test {
        bail!("demo {id} belongs to the train split; demonstrations must come from the test split");
    }
    Ok(data.trajectories[id].clone().expect("test split loaded"))
}

fn train_pol(
    cfg: &RunConfig,
    repr: &Path,
    dataset: Option<PathBuf>,
    demo_id: usize,
    mode: Mode,
    out: &Path,
    stats: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = load_repr(cfg, repr)?;
    let traj = load_demo(cfg, dataset, demo_id)?;
    let mut reward = cfg.policy.reward;
    reward.demo_branch = match mode {
        Mode::Fpil => Branch::Fpv,
        Mode::Tpil => Branch::Tpv,
    };
    let demo = Demo::encode(&model, &traj, &reward)?;
    let out = cfg.resolve(out);
    let stats_path = stats.map_or_else(|| with_ext(&out, "csv"), |p| cfg.resolve(&p));
    let mut w = BufWriter::new(
        fs::File::create(&stats_path)
            .with_context(|| format!("creating {}", stats_path.display()))?,
    );
    let mut enc = StateEncoder::new(&model, cfg.env.resolution);
    let (policy, hist) = train_policy(
        &cfg.env,
        &mut enc,
        &demo,
        &reward,
        &cfg.policy.ppo,
        Some(&mut w),
    )?;
    let ck = policy.to_checkpoint(json!({
        "mode": match mode { Mode::Fpil => "fpil", Mode::Tpil => "tpil" },
        "demo_id": demo_id,
        "target": [demo.target.0, demo.target.1],
        "seed": cfg.policy.ppo.seed,
    }));
    write_checkpoint(&out, &ck).with_context(|| format!("writing {}", out.display()))?;
    println!("trained {} updates; wrote {}", hist.len(), out.display());
    Ok(())
}

fn eval_pol(
    cfg: &RunConfig,
    policy: Option<PathBuf>,
    repr: &Path,
    random_policy: bool,
    dataset: Option<PathBuf>,
    demo_id: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let model = load_repr(cfg, repr)?;
    let policy = match (&policy, random_policy) {
        (Some(p), false) => {
            let path = cfg.resolve(p);
            let ck =
                read_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
            Some((PolicyNet::from_checkpoint(&ck)?, ck.meta))
        }
        _ => None,
    };
    let target = if let Some(id) = demo_id {
        let t = load_demo(cfg, dataset, id)?;
        let s = t.states.last().expect("non-empty trajectory");
        (s.target_x as i32, s.target_y as i32)
    } else if let Some((_, meta)) = &policy {
        let t = &meta["extra"]["target"];
        match (t[0].as_i64(), t[1].as_i64()) {
            (Some(x), Some(y)) => (x as i32, y as i32),
            _ => bail!("policy checkpoint records no target; pass --demo-id"),
        }
    } else {
        bail!("--random-policy needs --demo-id to fix the target");
    };
    if let Some((p, _)) = &policy {
        if p.dim_h != model.arch.dim_h {
            bail!(
                "policy expects {}-d state codes, representation has {}",
                p.dim_h,
                model.arch.dim_h
            );
        }
    }
    let actor = match &policy {
        Some((p, _)) => Actor::Policy(p),
        None => Actor::Random,
    };
    let mut enc = StateEncoder::new(&model, cfg.env.resolution);
    let r = eval_policy(
        &cfg.env,
        &actor,
        &mut enc,
        target,
        cfg.policy.episodes,
        cfg.seed,
    )?;
    write(&cfg.resolve(out), r.to_csv())?;
    println!("{}", r.summary_line());
    Ok(())
}
