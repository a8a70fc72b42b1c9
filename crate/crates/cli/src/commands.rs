use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rscl_core::analysis::{cknna, dump_embeddings, linear_cka};
use rscl_core::synthenv::{
    evaluate_policy, generate_dataset, Dataset, EvalReport, ExpertPolicy, Policy, RandomPolicy, Renderer,
};
use rscl_core::tensor::TensorError;
use rscl_core::trainer::{check_objectives, run_with, Checkpoint, Progress, TrainConfig, Trainer, CONFIG_KEYS};
use rscl_core::Error;

/// Relative-error threshold of the gradient check.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "rscl", version, about = "Toy multi-view policy with a state-weighted contrastive regularizer")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyKind {
    Model,
    Expert,
    Random,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate expert demonstrations and the statistics sidecar.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of trajectories (config key `n_traj`).
        #[arg(long)]
        n: Option<usize>,
        /// Dataset seed (config key `data_seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a policy. Any config key can be overridden with `--key value`.
    #[command(after_help = "Run `rscl config-keys` for the list of keys.")]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint; its config is used and overrides are rejected.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every N steps (0 silences it).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Closed-loop success rate.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Seed of the first episode; defaults to the config's `eval_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyKind,
        /// Config for the expert and random policies (the checkpoint's is used otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write one CSV row per episode here.
        #[arg(long)]
        episodes_out: Option<PathBuf>,
    },
    /// Alignment between pooled adapter embeddings and proprio states.
    Analyze {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Timestep stride within each trajectory.
        #[arg(long, default_value_t = 16)]
        window: usize,
        /// Trajectories per task.
        #[arg(long, default_value_t = 10)]
        per_task: usize,
        /// Directory for embedding dumps, one file per checkpoint.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Compare analytic gradients of every loss with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Probed coordinates per parameter tensor; 0 probes all.
        #[arg(long, default_value_t = 32)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List every config key with its default and meaning.
    ConfigKeys,
}

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::NonFinite(_) | Error::Tensor(TensorError::NonFinite { .. }) => 3,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: msg.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::GenData { config, out, n, seed } => gen_data(config.as_deref(), &out, n, seed),
        Cmd::Train {
            config,
            resume,
            log_every,
            overrides,
        } => train(config.as_deref(), resume.as_deref(), log_every, &overrides),
        Cmd::Eval {
            checkpoint,
            episodes,
            seed,
            policy,
            config,
            episodes_out,
        } => eval(checkpoint.as_deref(), episodes, seed, policy, config.as_deref(), episodes_out.as_deref()),
        Cmd::Analyze {
            checkpoint,
            dataset,
            k,
            window,
            per_task,
            dump_dir,
        } => analyze(&checkpoint, &dataset, k, window, per_task, dump_dir.as_deref()),
        Cmd::Gradcheck {
            seed,
            seeds,
            batch,
            coords,
            step,
            config,
        } => gradcheck(seed, seeds, batch, coords, step, config.as_deref()),
        Cmd::ConfigKeys => {
            let defaults = TrainConfig::default().to_pairs();
            for ((key, doc), (_, value)) in CONFIG_KEYS.iter().zip(defaults) {
                println!("{key} = {value}    # {doc}");
            }
            Ok(())
        }
    }
}

/// Splits `--key value` / `--key=value` arguments; dashes in keys become
/// underscores.
fn parse_overrides(args: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(usage(format!("unexpected argument `{a}`; overrides are `--key value`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| usage(format!("missing value for `--{flag}`")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_config(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<TrainConfig> {
    let text = file.map(read_text).transpose()?;
    Ok(TrainConfig::load(
        text.as_deref(),
        overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())),
    )?)
}

fn gen_data(config: Option<&Path>, out: &Path, n: Option<usize>, seed: Option<u64>) -> CliResult<()> {
    let mut ov = Vec::new();
    if let Some(n) = n {
        ov.push(("n_traj".to_string(), n.to_string()));
    }
    if let Some(s) = seed {
        ov.push(("data_seed".to_string(), s.to_string()));
    }
    let cfg = load_config(config, &ov)?;
    let ds = generate_dataset(cfg.n_traj, &cfg.env_config(), cfg.data_seed)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    ds.write(out)?;
    eprintln!(
        "wrote {} trajectories to {} ({} redrawn)",
        ds.trajectories.len(),
        out.display(),
        ds.stats.redrawn
    );
    Ok(())
}

fn train(config: Option<&Path>, resume: Option<&Path>, log_every: u64, raw: &[String]) -> CliResult<()> {
    let mut overrides = parse_overrides(raw)?;
    // The command's own flags may appear after the first override.
    let mut config = config.map(Path::to_path_buf);
    let mut resume = resume.map(Path::to_path_buf);
    let mut log_every = log_every;
    let mut rest = Vec::with_capacity(overrides.len());
    for (k, v) in overrides.drain(..) {
        match k.as_str() {
            "config" => config = Some(PathBuf::from(v)),
            "resume" => resume = Some(PathBuf::from(v)),
            "log_every" => log_every = v.parse().map_err(|_| usage(format!("invalid --log-every `{v}`")))?,
            _ => rest.push((k, v)),
        }
    }
    let overrides = rest;
    let (config, resume) = (config.as_deref(), resume.as_deref());
    let mut trainer = match resume {
        Some(path) => {
            if config.is_some() || !overrides.is_empty() {
                return Err(usage("--resume takes its configuration from the checkpoint"));
            }
            let ck = Checkpoint::load(path)?;
            let cfg = ck.config()?;
            let ds = Dataset::read(&cfg.dataset)?;
            ck.into_trainer(ds)?
        }
        None => {
            let cfg = load_config(config, &overrides)?;
            let ds = Dataset::read(&cfg.dataset)?;
            Trainer::new(cfg, ds)?
        }
    };
    let out_dir = trainer.cfg.out_dir.clone();
    let outcome = run_with(&mut trainer, &out_dir, |p| match p {
        Progress::Step(m) if log_every > 0 && m.step % log_every == 0 => eprintln!(
            "step {:>6}  total {:.5}  fm {:.5}  rscl {:.4}  lambda {:.3}  |g| {:.4}",
            m.step, m.total, m.loss_fm, m.loss_rscl, m.lambda, m.grad_norm
        ),
        Progress::Eval(r) => eprintln!(
            "eval step {:>6}  success {:.3}  cknna {:.4}",
            r.step, r.success_rate, r.cknna_proprio
        ),
        _ => {}
    })?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn eval(
    checkpoint: Option<&Path>,
    episodes: usize,
    seed: Option<u64>,
    kind: PolicyKind,
    config: Option<&Path>,
    episodes_out: Option<&Path>,
) -> CliResult<()> {
    let (cfg, stats_seed, mut policy): (TrainConfig, u64, Box<dyn Policy>) = match kind {
        PolicyKind::Model => {
            let path = checkpoint.ok_or_else(|| usage("--checkpoint is required for the model policy"))?;
            let ck = Checkpoint::load(path)?;
            let cfg = ck.config()?;
            (cfg, ck.stats.render_seed, Box::new(ck.policy()?))
        }
        PolicyKind::Expert | PolicyKind::Random => {
            let cfg = load_config(config, &[])?;
            let env = cfg.env_config();
            let p: Box<dyn Policy> = match kind {
                PolicyKind::Expert => Box::new(ExpertPolicy { cfg: env }),
                _ => Box::new(RandomPolicy { cfg: env }),
            };
            let s = cfg.data_seed;
            (cfg, s, p)
        }
    };
    let env = cfg.env_config();
    let renderer = Renderer::new(&env, stats_seed)?;
    let seed = seed.unwrap_or(cfg.eval_seed);
    let report: EvalReport = evaluate_policy(policy.as_mut(), &env, &renderer, episodes, seed)?;
    if let Some(path) = episodes_out {
        let mut s = String::from("episode,seed,task_id,success,steps\n");
        for e in &report.episodes {
            s.push_str(&format!("{},{},{},{},{}\n", e.episode, e.seed, e.task_id, e.success as u8, e.steps));
        }
        fs::write(path, s).map_err(|e| io_err(path, e))?;
    }
    let name = checkpoint.map_or_else(String::new, |p| p.display().to_string());
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "policy,checkpoint,episodes,seed,success_rate");
    let _ = writeln!(
        out,
        "{},{},{},{},{}",
        format!("{kind:?}").to_lowercase(),
        name,
        episodes,
        seed,
        report.success_rate
    );
    Ok(())
}

fn analyze(
    checkpoints: &[PathBuf],
    dataset: &Path,
    k: usize,
    window: usize,
    per_task: usize,
    dump_dir: Option<&Path>,
) -> CliResult<()> {
    let ds = Dataset::read(dataset)?;
    let mut rows = vec!["checkpoint,metric,k,value".to_string()];
    for (i, path) in checkpoints.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let cfg = ck.config()?;
        let name = path.display().to_string();
        let dump = dump_embeddings(&ck.params, &cfg.model_dims(), &ds, per_task, window, &name)?;
        if let Some(dir) = dump_dir {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            dump.write(&dir.join(format!("dump_{i:02}.json")))?;
        }
        rows.push(format!("{name},linear_cka,,{}", linear_cka(&dump.x, &dump.q)?));
        rows.push(format!("{name},cknna,{k},{}", cknna(&dump.x, &dump.q, k)?));
        rows.push(format!("{name},cknna_self,{k},{}", cknna(&dump.x, &dump.x, k)?));
    }
    println!("{}", rows.join("\n"));
    Ok(())
}

fn gradcheck(seed: u64, seeds: u64, batch: usize, coords: usize, step: f64, config: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config, &[])?;
    let coords = (coords > 0).then_some(coords);
    println!("seed,loss,max_rel_err,worst_param,coords_checked,pass");
    let mut failed = 0;
    for s in seed..seed + seeds {
        for c in check_objectives(&cfg, s, batch, coords, step)? {
            let pass = c.max_rel_err < GRADCHECK_TOLERANCE;
            failed += usize::from(!pass);
            println!(
                "{s},{},{:e},{},{},{}",
                c.loss, c.max_rel_err, c.worst_param, c.coords_checked, pass
            );
        }
    }
    if failed > 0 {
        return Err(CliError {
            code: 3,
            message: format!("{failed} gradient checks exceeded {GRADCHECK_TOLERANCE:e}"),
        });
    }
    Ok(())
}
