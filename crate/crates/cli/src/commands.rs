use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use coca::credit::{contribution_profile, RewardProbe};
use coca::diffusion::pretrain as fit_denoiser;
use coca::mdp::rollout;
use coca::rng::{stream_rng, Stream};
use coca::shaping::verify_suite;
use coca::trainer::{train_with_observer, EpochTrace, RunStatus, TrainEnv};
use coca::DenoiserParams;
use rand::Rng;

use crate::artifacts::{
    learning_curve_svg, write_curve, write_json, Checkpoint, ContributionLine, CurveRow, RunMeta, CONTRIBUTIONS_FILE,
    CURVE_FILE, META_FILE, SVG_FILE,
};
use crate::compare::{compare as compare_runs, render_text, write_csv, RunSummary, ThresholdRule};
use crate::config::RunConfig;
use crate::{
    CompareArgs, CreditArgs, DataArgs, DumpProfileArgs, Invalid, Outcome, PretrainArgs, RewardArgs, TrainArgs,
    VerifyArgs,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.data.dim, self.dim);
        set(&mut cfg.data.modes, self.modes);
        set(&mut cfg.data.radius, self.data_radius);
        set(&mut cfg.data.std, self.data_std);
        set(&mut cfg.schedule.horizon, self.horizon);
        set(&mut cfg.schedule.beta_start, self.beta_start);
        set(&mut cfg.schedule.beta_end, self.beta_end);
    }
}

impl RewardArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.reward.kind, self.reward_kind);
        set(&mut cfg.reward.target, self.target.clone());
        set(&mut cfg.reward.radius, self.ring_radius);
        set(&mut cfg.reward.mode, self.mode);
    }
}

impl CreditArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.train.similarity, self.similarity);
        set(&mut cfg.train.window_size, self.window);
        set(&mut cfg.train.weights.norm, self.weight_norm);
        set(&mut cfg.train.weights.denominator, self.denominator);
    }
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.method, self.method);
        set(&mut t.beta, self.beta);
        set(&mut t.epochs, self.epochs);
        set(&mut t.samples_per_epoch, self.samples);
        set(&mut t.minibatch_size, self.minibatch);
        set(&mut t.inner_epochs, self.inner_epochs);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.clip_range, self.clip_range);
        set(&mut t.seed, self.seed);
        set(&mut t.workers, self.workers);
        if self.no_stage1 {
            t.stage1 = false;
        }
        if self.no_stage2 {
            t.stage2 = false;
        }
        cfg.dump_contributions |= self.dump_contributions;
        cfg.svg |= self.svg;
        self.credit.apply(cfg);
        self.reward.apply(cfg);
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Invalid(format!("output directory {}: {e}", dir.display())))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

pub fn pretrain(args: &PretrainArgs) -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    args.data.apply(&mut cfg);
    set(&mut cfg.pretrain.steps, args.steps);
    set(&mut cfg.pretrain.batch_size, args.batch_size);
    set(&mut cfg.pretrain.hidden, args.hidden);
    set(&mut cfg.pretrain.learning_rate, args.lr);
    let seed = args.seed.unwrap_or(cfg.train.seed);
    cfg.validate()?;

    let out = args.out.clone().unwrap_or_else(|| default_checkpoint(&cfg));
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
    ensure_parent(&out)?;
    ensure_parent(&loss_path)?;

    let schedule = cfg.schedule.build()?;
    let (params, losses) = fit_denoiser(&cfg.data, &schedule, &cfg.pretrain, seed)?;

    let mut w = csv::Writer::from_path(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    w.write_record(["step", "loss"])?;
    for (step, loss) in losses.iter().enumerate() {
        w.write_record([step.to_string(), loss.to_string()])?;
    }
    w.flush()?;

    let checkpoint = Checkpoint {
        version: VERSION.into(),
        seed,
        data: cfg.data,
        schedule: cfg.schedule,
        pretrain: cfg.pretrain,
        final_loss: losses.last().copied(),
        params: params.to_json(),
    };
    checkpoint.write(&out)?;
    match (losses.first(), losses.last()) {
        (Some(a), Some(b)) => {
            println!("pretrained {} steps: loss {a:.5} -> {b:.5}; wrote {}", losses.len(), out.display())
        }
        _ => println!("wrote initialization to {}", out.display()),
    }
    Ok(Outcome::Success)
}

/// Resolves the configuration and checkpoint for `train`, flags last.
pub fn resolve_train(args: &TrainArgs) -> anyhow::Result<(RunConfig, Checkpoint)> {
    let (mut cfg, checkpoint) = match &args.replay {
        Some(meta) => {
            let meta = RunMeta::read(meta)?;
            (meta.config, meta.checkpoint)
        }
        None => {
            let cfg = RunConfig::load(args.config.as_deref())?;
            let path = args.checkpoint.as_deref().ok_or_else(|| Invalid("--checkpoint is required".into()))?;
            if !path.exists() {
                return Err(Invalid(format!("checkpoint {} does not exist", path.display())).into());
            }
            (cfg, Checkpoint::read(path)?)
        }
    };
    args.apply(&mut cfg);
    cfg.data = checkpoint.data;
    cfg.schedule = checkpoint.schedule;
    cfg.pretrain = checkpoint.pretrain;
    cfg.validate()?;
    Ok((cfg, checkpoint))
}

fn contribution_lines<'a>(trace: &'a EpochTrace<'a>) -> impl Iterator<Item = ContributionLine> + 'a {
    trace.trajectories.iter().enumerate().map(move |(i, t)| ContributionLine {
        epoch: trace.epoch,
        index: i,
        context_id: t.context.id,
        terminal_reward: t.terminal_reward,
        advantage: trace.advantages.get(i).copied(),
        profile: trace.profiles.get(i).cloned().flatten(),
    })
}

pub fn train(args: &TrainArgs) -> anyhow::Result<Outcome> {
    let (cfg, checkpoint) = resolve_train(args)?;
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir)?;
    let params = checkpoint.params()?;
    let env = TrainEnv { schedule: cfg.schedule.build()?, mixture: cfg.data, reward: cfg.reward.build(&cfg.data)? };

    let mut dump = if cfg.dump_contributions {
        let path = dir.join(CONTRIBUTIONS_FILE);
        Some(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    } else {
        None
    };
    let mut dump_err: Option<io::Error> = None;
    let outcome = train_with_observer(&cfg.train, &env, &params, |trace| {
        let Some(w) = dump.as_mut() else { return };
        if dump_err.is_some() {
            return;
        }
        for line in contribution_lines(trace) {
            let text = serde_json::to_string(&line).expect("contribution line serializes");
            if let Err(e) = writeln!(w, "{text}") {
                dump_err = Some(e);
                return;
            }
        }
    })?;
    if let Some(e) = dump_err {
        return Err(anyhow::Error::new(e).context("writing contributions"));
    }
    if let Some(mut w) = dump {
        w.flush()?;
    }

    let log = outcome.log;
    let rows: Vec<CurveRow> = log.entries.iter().map(CurveRow::from).collect();
    write_curve(&dir.join(CURVE_FILE), &rows)?;
    if cfg.svg {
        let title =
            format!("{} (seed {})", crate::compare::method_label(cfg.train.method, cfg.train.beta), cfg.train.seed);
        let svg = learning_curve_svg(&title, &[(cfg.train.method.name().to_string(), rows.clone())]);
        fs::write(dir.join(SVG_FILE), svg)?;
    }
    let meta = RunMeta {
        version: VERSION.into(),
        seed: cfg.train.seed,
        epochs_completed: log.entries.len(),
        reward_queries: log.entries.last().map_or(0, |e| e.reward_queries),
        status: log.status.clone(),
        epochs: log.entries,
        config: cfg,
        checkpoint,
    };
    write_json(&dir.join(META_FILE), &meta)?;

    let last = rows.last().map_or(f64::NAN, |r| r.mean_reward);
    match &meta.status {
        RunStatus::Completed => {
            println!(
                "{}: {} epochs, {} reward queries, final mean reward {last:.5}",
                dir.display(),
                meta.epochs_completed,
                meta.reward_queries
            );
            Ok(Outcome::Success)
        }
        RunStatus::Diverged { epoch, reason } => {
            eprintln!("{}: diverged at epoch {epoch}: {reason}", dir.display());
            Ok(Outcome::Diverged)
        }
    }
}

pub fn compare(args: &CompareArgs) -> anyhow::Result<Outcome> {
    let runs = args.runs.iter().map(|d| RunSummary::load(d)).collect::<anyhow::Result<Vec<_>>>()?;
    let rule = match args.threshold {
        Some(t) if !t.is_finite() => return Err(Invalid("threshold must be finite".into()).into()),
        Some(t) => ThresholdRule::Fixed(t),
        None => ThresholdRule::Midpoint,
    };
    let result = compare_runs(&runs, rule)?;
    let text = render_text(&result);
    print!("{text}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_csv(&result, &out.join("compare_runs.csv"), &out.join("compare_pairs.csv"))?;
        fs::write(out.join("summary.txt"), &text)?;
        let series: Vec<(String, Vec<CurveRow>)> = runs
            .iter()
            .zip(&result.results)
            .map(|(r, res)| (format!("{} s{}", res.label, r.seed), r.curve.clone()))
            .collect();
        fs::write(out.join("compare.svg"), learning_curve_svg("mean reward vs reward queries", &series))?;
    }
    Ok(Outcome::Success)
}

pub fn verify(args: &VerifyArgs) -> anyhow::Result<Outcome> {
    let report = verify_suite(args.count, args.seed, args.corrupt)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.report {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "verify: {}/{} instances passed, counterexample detected: {}, {}",
                report.passed,
                report.instances,
                report.counterexample_detected,
                if report.success { "PASS" } else { "FAIL" }
            );
        }
        None => print!("{text}"),
    }
    Ok(if report.success { Outcome::Success } else { Outcome::VerificationFailed })
}

/// Profiles of `count` rollouts drawn exactly as the first training epoch
/// with the same seed would draw them.
pub fn profile_lines(
    cfg: &RunConfig,
    params: &DenoiserParams,
    count: usize,
    context: Option<usize>,
) -> anyhow::Result<Vec<ContributionLine>> {
    let schedule = cfg.schedule.build()?;
    let reward = cfg.reward.build(&cfg.data)?;
    if let Some(c) = context {
        if c >= cfg.data.modes {
            return Err(Invalid(format!("context {c} >= {} modes", cfg.data.modes)).into());
        }
    }
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream_rng(cfg.train.seed, Stream::Rollout, &[0, i as u64]);
        let drawn = rng.random_range(0..cfg.data.modes);
        let ctx = cfg.data.context(context.unwrap_or(drawn))?;
        let traj = rollout(params, &ctx, &schedule, &reward, &mut rng)?;
        let probe = RewardProbe { reward: &reward, params, schedule: &schedule };
        let profile =
            contribution_profile(&traj, cfg.train.similarity, cfg.train.window_size, cfg.train.weights, Some(probe))?;
        lines.push(ContributionLine {
            epoch: 0,
            index: i,
            context_id: ctx.id,
            terminal_reward: traj.terminal_reward,
            advantage: None,
            profile: Some(profile),
        });
    }
    Ok(lines)
}

pub fn dump_profile(args: &DumpProfileArgs) -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if !args.checkpoint.exists() {
        return Err(Invalid(format!("checkpoint {} does not exist", args.checkpoint.display())).into());
    }
    let checkpoint = Checkpoint::read(&args.checkpoint)?;
    args.credit.apply(&mut cfg);
    args.reward.apply(&mut cfg);
    set(&mut cfg.train.seed, args.seed);
    cfg.data = checkpoint.data;
    cfg.schedule = checkpoint.schedule;
    cfg.validate()?;
    let lines = profile_lines(&cfg, &checkpoint.params()?, args.count, args.context)?;

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => {
            ensure_parent(path)?;
            Box::new(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for line in &lines {
        writeln!(out, "{}", serde_json::to_string(line)?)?;
    }
    out.flush()?;
    Ok(Outcome::Success)
}

/// Default checkpoint location for a configuration.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint.json")
}
