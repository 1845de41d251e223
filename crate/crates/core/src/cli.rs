//! Command-line surface. Every command writes `manifest.json` into `--out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check_many, Tensor};
use crate::config::{Profile, RunConfig};
use crate::datagen::{
    class_episode, load_embeddings, mog_episode_sized, rng_from_seed, split_seed, synthetic_store, write_embeddings,
    DiscriminationSource, DumpedEpisode, Episode, EpisodeDump, EpisodeFileSource, EpisodeSource, MogSource,
};
use crate::error::{Error, Result};
use crate::eval::{
    avg_score_eval, ecdf_csv, exact_flow_verifier, greedy_labels, partition_table, EvalOptions, MetricsReport,
};
use crate::flows::Policy;
use crate::losses::{cd_loss, mc_loss, ncp_nll, reg_loss, uniform_labels};
use crate::model::{Activation, EncoderConfig, ModelParams};
use crate::partitions::{bell, canonicalize, reorder};
use crate::trainer::{train, write_history, Checkpoint, TrainState};

#[derive(Debug, Parser)]
#[command(name = "gfncp", version, about = "Amortized clustering with a flow-matched energy network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: available cores; 1 = serial reference).
    #[arg(long)]
    pub workers: Option<usize>,
    /// mog-desk | mog-full | embedding.
    #[arg(long)]
    pub profile: Option<Profile>,
    /// gfncp | ncp-baseline.
    #[arg(long)]
    pub objective: Option<crate::trainer::Objective>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and held-out episodes.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of training episodes to dump.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train a model (GFNCP or the NCP baseline).
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on episodes from a `gen-data` dump instead of the generator.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy NMI/ARI, MC and SDPP on held-out sets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out episodes from a `gen-data` dump.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also report top-k-of-samples average scores.
        #[arg(long)]
        avg_score: bool,
    },
    /// Draw assignments for one held-out set.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// SDPP/MC sweep with ECDF export, optionally against a second model.
    Consistency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Total variation between the model and the exact posterior on small sets.
    OracleCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        sets: usize,
    },
    /// Exact-flow checks for every size up to `--n`.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        rewards: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Finite-difference checks of every loss gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sample { common, .. }
            | Command::Consistency { common, .. }
            | Command::OracleCompare { common, .. }
            | Command::Verify { common, .. }
            | Command::GradCheck { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Sample { .. } => "sample",
            Command::Consistency { .. } => "consistency",
            Command::OracleCompare { .. } => "oracle-compare",
            Command::Verify { .. } => "verify",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

/// Parses `argv` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    input_hash: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    passed: bool,
    wall_clock_seconds: f64,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Ctx {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.out.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.cfg.train.seed
    }

    /// SHA-256 over the resolved config and every input file.
    fn input_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg)?);
        for p in &self.inputs {
            h.update(std::fs::read(p)?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn overrides(common: &Common) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(obj) = common.objective {
        let name = match obj {
            crate::trainer::Objective::Gfncp => "gfncp",
            crate::trainer::Objective::NcpBaseline => "ncp-baseline",
        };
        out.push(("objective".into(), name.into()));
    }
    Ok(out)
}

pub fn run(cmd: &Command) -> Result<bool> {
    let start = Instant::now();
    let common = cmd.common();
    let cfg = RunConfig::resolve(common.profile, common.config.as_deref(), &overrides(common)?)?;
    std::fs::create_dir_all(&common.out)?;
    let workers = common.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut ctx = Ctx { cfg, out: common.out.clone(), workers, inputs: Vec::new(), outputs: Vec::new() };
    if let Some(c) = &common.config {
        ctx.inputs.push(c.clone());
    }
    let passed = match cmd {
        Command::GenData { count, .. } => gen_data(&mut ctx, *count)?,
        Command::Train { data, resume, .. } => train_cmd(&mut ctx, data.as_deref(), resume.as_deref())?,
        Command::Eval { checkpoint, data, avg_score, .. } => eval_cmd(&mut ctx, checkpoint, data.as_deref(), *avg_score)?,
        Command::Sample { checkpoint, samples, .. } => sample_cmd(&mut ctx, checkpoint, *samples)?,
        Command::Consistency { checkpoint, baseline, .. } => consistency_cmd(&mut ctx, checkpoint, baseline.as_deref())?,
        Command::OracleCompare { checkpoint, n, sets, .. } => oracle_cmd(&mut ctx, checkpoint, *n, *sets)?,
        Command::Verify { n, rewards, tol, .. } => verify_cmd(&mut ctx, *n, *rewards, *tol)?,
        Command::GradCheck { episodes, points, step, tol, .. } => grad_check_cmd(&mut ctx, *episodes, *points, *step, *tol)?,
    };
    let manifest = Manifest {
        command: cmd.name(),
        seed: ctx.seed(),
        config: &ctx.cfg,
        input_hash: ctx.input_hash()?,
        inputs: ctx.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: ctx.outputs.clone(),
        passed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(ctx.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(passed)
}

fn embedding_store(ctx: &mut Ctx) -> Result<crate::datagen::EmbeddingStore> {
    let path = ctx
        .cfg
        .embeddings
        .clone()
        .ok_or_else(|| Error::Config("the embedding profile needs `embeddings = <file>`".into()))?;
    ctx.inputs.push(path.clone());
    load_embeddings(&path, Some(ctx.cfg.encoder.d_x))
}

fn training_source(ctx: &mut Ctx, data: Option<&Path>) -> Result<Box<dyn EpisodeSource>> {
    if let Some(path) = data {
        ctx.inputs.push(path.to_path_buf());
        return Ok(Box::new(EpisodeFileSource::new(read_dump(path)?)?));
    }
    Ok(match ctx.cfg.profile {
        Profile::Embedding => Box::new(DiscriminationSource {
            store: embedding_store(ctx)?,
            crp: ctx.cfg.crp.clone(),
            aug_std: ctx.cfg.aug_std,
        }),
        _ => Box::new(MogSource { crp: ctx.cfg.crp.clone(), sigma: ctx.cfg.sigma }),
    })
}

/// Held-out sets: fixed size `test_n`, seeded by `test_seed` only.
pub fn test_episodes(cfg: &RunConfig, store: Option<&crate::datagen::EmbeddingStore>) -> Result<Vec<Episode>> {
    (0..cfg.test_sets)
        .map(|i| {
            let seed = split_seed(cfg.test_seed, 0, i as u64);
            let mut rng = rng_from_seed(seed);
            let mut ep = match store {
                Some(s) => class_episode(s, &cfg.crp, cfg.test_n, &mut rng)?,
                None => mog_episode_sized(&cfg.crp, cfg.test_n, cfg.sigma, &mut rng)?,
            };
            ep.seed = Some(seed);
            Ok(ep)
        })
        .collect()
}

fn held_out(ctx: &mut Ctx, data: Option<&Path>) -> Result<Vec<Episode>> {
    if let Some(path) = data {
        ctx.inputs.push(path.to_path_buf());
        return read_dump(path);
    }
    match ctx.cfg.profile {
        Profile::Embedding => {
            let store = embedding_store(ctx)?;
            test_episodes(&ctx.cfg, Some(&store))
        }
        _ => test_episodes(&ctx.cfg, None),
    }
}

fn read_dump(path: &Path) -> Result<Vec<Episode>> {
    let dump: EpisodeDump = serde_json::from_slice(&std::fs::read(path)?)?;
    dump.episodes.iter().map(DumpedEpisode::to_episode).collect()
}

fn dump(seed: u64, cfg: &RunConfig, episodes: &[Episode]) -> Result<String> {
    let d = EpisodeDump {
        seed,
        config: serde_json::to_value(cfg)?,
        episodes: episodes.iter().map(DumpedEpisode::from).collect(),
    };
    Ok(serde_json::to_string(&d)?)
}

fn gen_data(ctx: &mut Ctx, count: usize) -> Result<bool> {
    if ctx.cfg.profile == Profile::Embedding && ctx.cfg.embeddings.is_none() {
        // No feature file given: write a synthetic class-structured one.
        let mut rng = rng_from_seed(split_seed(ctx.seed(), 3, 0));
        let store = synthetic_store(200, 20, ctx.cfg.encoder.d_x, 0.5, &mut rng)?;
        let path = ctx.out.join("embeddings.tsv");
        write_embeddings(&path, &store)?;
        ctx.outputs.push("embeddings.tsv".into());
        ctx.cfg.embeddings = Some(path);
    }
    let source = training_source(ctx, None)?;
    let train: Vec<Episode> = (0..count).map(|i| source.sample(split_seed(ctx.seed(), 0, i as u64))).collect::<Result<_>>()?;
    let test = held_out(ctx, None)?;
    let (train_json, test_json) = (dump(ctx.seed(), &ctx.cfg, &train)?, dump(ctx.cfg.test_seed, &ctx.cfg, &test)?);
    ctx.write("train.json", train_json)?;
    ctx.write("test.json", test_json)?;
    println!("wrote {} training and {} held-out episodes to {}", train.len(), test.len(), ctx.out.display());
    Ok(true)
}

fn train_cmd(ctx: &mut Ctx, data: Option<&Path>, resume: Option<&Path>) -> Result<bool> {
    let source = training_source(ctx, data)?;
    if ctx.cfg.profile == Profile::Embedding {
        ctx.cfg.encoder.d_x = source.point_dim();
    }
    let state = match resume {
        Some(path) => {
            ctx.inputs.push(path.to_path_buf());
            let ck = Checkpoint::load_matching(path, &ctx.cfg.encoder)?;
            ck.state
        }
        None => TrainState::new(ModelParams::init(&ctx.cfg.encoder, ctx.seed())?),
    };
    let mut train_cfg = ctx.cfg.train.clone();
    train_cfg.checkpoint_path = Some(train_cfg.checkpoint_path.unwrap_or_else(|| ctx.out.join("checkpoint.bin")));
    let mut log = |it: usize, _: &ModelParams| -> Result<()> {
        eprintln!("iteration {it}/{}", train_cfg.iterations);
        Ok(())
    };
    let out = train(&train_cfg, source.as_ref(), state, ctx.workers, Some(&mut log))?;
    let ck_path = train_cfg.checkpoint_path.clone().unwrap();
    Checkpoint::from_state(&out.state, &train_cfg).save(&ck_path)?;
    ctx.outputs.push(ck_path.display().to_string());
    write_history(&ctx.out.join("history.csv"), &out.history)?;
    ctx.outputs.push("history.csv".into());
    if let Some((it, best)) = &out.best {
        let best_state = TrainState { params: best.clone(), adam: out.state.adam.clone(), iteration: *it };
        Checkpoint::from_state(&best_state, &train_cfg).save(&ctx.out.join("best.bin"))?;
        ctx.outputs.push("best.bin".into());
    }
    let last = out.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("trained {} iterations; final batch loss {last:.4}", out.state.iteration);
    Ok(true)
}

fn load_model(ctx: &mut Ctx, path: &Path) -> Result<ModelParams> {
    ctx.inputs.push(path.to_path_buf());
    Ok(Checkpoint::load(path)?.state.params)
}

fn eval_cmd(ctx: &mut Ctx, checkpoint: &Path, data: Option<&Path>, avg_score: bool) -> Result<bool> {
    let params = load_model(ctx, checkpoint)?;
    ctx.cfg.encoder = params.config.clone();
    let episodes = held_out(ctx, data)?;
    let opts = EvalOptions { compute_mc: true, num_perms: ctx.cfg.num_perms, seed: ctx.seed() };
    let mut meta = serde_json::json!({ "seed": ctx.seed(), "checkpoint": checkpoint.display().to_string() });
    if avg_score {
        let (mut sn, mut sa) = (0.0, 0.0);
        for (i, ep) in episodes.iter().enumerate() {
            let mut rng = rng_from_seed(split_seed(ctx.seed(), 11, i as u64));
            let (n, a) = avg_score_eval(&params, ep, ctx.cfg.num_samples, ctx.cfg.top_k, &mut rng)?;
            sn += n;
            sa += a;
        }
        let k = episodes.len().max(1) as f64;
        meta["avg_score"] = serde_json::json!({ "nmi": sn / k, "ari": sa / k });
    }
    let report = MetricsReport::evaluate(&params, &episodes, opts, ctx.workers, meta)?;
    report.write(&ctx.out)?;
    ctx.outputs.extend(["metrics.json".to_string(), "metrics.csv".to_string()]);
    let sdpp: Vec<f64> = report.sets.iter().map(|s| s.sdpp).collect();
    ctx.write("ecdf.csv", ecdf_csv(&[("model", &sdpp)]))?;
    println!("NMI {:.4}  ARI {:.4}  MC {:.4}  median SDPP {:.4}", report.nmi.mean, report.ari.mean, report.mc.mean, report.sdpp.median);
    Ok(true)
}

fn sample_cmd(ctx: &mut Ctx, checkpoint: &Path, samples: usize) -> Result<bool> {
    let params = load_model(ctx, checkpoint)?;
    let mut cfg = ctx.cfg.clone();
    cfg.test_sets = 1;
    let ep = match cfg.profile {
        Profile::Embedding => {
            let store = embedding_store(ctx)?;
            test_episodes(&cfg, Some(&store))?.remove(0)
        }
        _ => test_episodes(&cfg, None)?.remove(0),
    };
    let policy = Policy::new(&params, &ep.points)?;
    let mut rng = rng_from_seed(split_seed(ctx.seed(), 5, 0));
    let draws = (0..samples)
        .map(|_| {
            let t = policy.sample_trajectory(&mut rng, None)?;
            Ok(serde_json::json!({ "order": t.order, "labels": t.labels_by_point(), "log_prob": t.log_prob }))
        })
        .collect::<Result<Vec<_>>>()?;
    let greedy = greedy_labels(&params, &ep)?;
    let out = serde_json::json!({
        "planted": ep.labels,
        "points": DumpedEpisode::from(&ep).points,
        "greedy": greedy,
        "samples": draws,
    });
    ctx.write("samples.json", serde_json::to_string_pretty(&out)?)?;
    println!("greedy assignment uses {} clusters (planted {})", canonicalize(&greedy).iter().max().map_or(0, |m| m + 1), ep.num_clusters());
    Ok(true)
}

fn consistency_cmd(ctx: &mut Ctx, checkpoint: &Path, baseline: Option<&Path>) -> Result<bool> {
    let episodes = held_out(ctx, None)?;
    let opts = EvalOptions { compute_mc: true, num_perms: ctx.cfg.num_perms.max(2), seed: ctx.seed() };
    let mut models = vec![("model", checkpoint)];
    if let Some(b) = baseline {
        models.push(("baseline", b));
    }
    let mut series: Vec<(&str, Vec<f64>)> = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut csv = String::from("series,set_id,mc,sdpp\n");
    for (name, path) in models {
        let params = load_model(ctx, path)?;
        let report = MetricsReport::evaluate(&params, &episodes, opts, ctx.workers, serde_json::Value::Null)?;
        for s in &report.sets {
            csv.push_str(&format!("{name},{},{},{}\n", s.set_id, s.mc, s.sdpp));
        }
        summary.insert(name.into(), serde_json::json!({ "mc_mean": report.mc.mean, "sdpp_median": report.sdpp.median, "sdpp_mean": report.sdpp.mean }));
        println!("{name}: MC {:.4}  median SDPP {:.4}", report.mc.mean, report.sdpp.median);
        series.push((name, report.sets.iter().map(|s| s.sdpp).collect()));
    }
    let cols: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (*n, v.as_slice())).collect();
    ctx.write("ecdf.csv", ecdf_csv(&cols))?;
    ctx.write("metrics.csv", csv)?;
    ctx.write("metrics.json", serde_json::to_string_pretty(&serde_json::Value::Object(summary))?)?;
    Ok(true)
}

fn oracle_cmd(ctx: &mut Ctx, checkpoint: &Path, n: usize, sets: usize) -> Result<bool> {
    let params = load_model(ctx, checkpoint)?;
    let mut cfg = ctx.cfg.clone();
    cfg.test_sets = sets;
    cfg.test_n = n;
    let episodes = test_episodes(&cfg, None)?;
    let mut rows = Vec::new();
    let mut csv = String::from("set_id,total_variation,exact_sum,model_sum\n");
    for (i, ep) in episodes.iter().enumerate() {
        let table = partition_table(&params, &ep.points, cfg.crp.alpha, cfg.sigma)?;
        let tv = table.total_variation();
        let (es, ms) = (table.exact.iter().sum::<f64>(), table.model_raw.iter().sum::<f64>());
        csv.push_str(&format!("{i},{tv},{es},{ms}\n"));
        rows.push(tv);
    }
    let mean = rows.iter().sum::<f64>() / rows.len().max(1) as f64;
    ctx.write("metrics.csv", csv)?;
    ctx.write(
        "metrics.json",
        serde_json::to_string_pretty(&serde_json::json!({ "n": n, "sets": sets, "partitions": bell(n), "mean_total_variation": mean }))?,
    )?;
    println!("mean total variation over {sets} sets of N = {n}: {mean:.4}");
    Ok(true)
}

fn verify_cmd(ctx: &mut Ctx, n_max: usize, rewards: usize, tol: f64) -> Result<bool> {
    let mut rng = rng_from_seed(ctx.seed());
    let mut reports = Vec::new();
    let mut ok = true;
    for n in 1..=n_max {
        for _ in 0..rewards {
            let reward: Vec<f64> = (0..bell(n)).map(|_| rand::Rng::gen_range(&mut rng, 0.01..10.0)).collect();
            let r = exact_flow_verifier(n, &reward, &mut rng)?;
            ok &= r.passed(tol);
            reports.push(r);
        }
        let worst = reports.iter().filter(|r| r.n == n).fold(0.0f64, |m, r| m.max(r.mc_error).max(r.order_error).max(r.reach_error));
        println!("N = {n}: worst deviation {worst:.3e} over {rewards} rewards");
    }
    ctx.write("verify.json", serde_json::to_string_pretty(&serde_json::json!({ "tolerance": tol, "passed": ok, "reports": reports }))?)?;
    println!("{}", if ok { "all exact-flow checks passed" } else { "exact-flow checks FAILED" });
    Ok(ok)
}

/// Finite-difference check of the four loss gradients on random small
/// episodes; returns the worst relative error per loss.
pub fn grad_check_suite(seed: u64, episodes: usize, points: usize, step: f64) -> Result<[f64; 4]> {
    let enc = EncoderConfig {
        d_x: 2,
        d_h: 3,
        d_g: 4,
        d_u: 3,
        h_hidden: vec![4],
        g_hidden: vec![4],
        u_hidden: vec![4],
        f_hidden: vec![4],
        activation: Activation::Tanh,
        online_mode: false,
        input_scale: 0.5,
    };
    let crp = crate::datagen::CrpConfig { alpha: 1.5, n_min: points, n_max: points, ..Default::default() };
    let mut worst = [0.0f64; 4];
    for e in 0..episodes {
        let params = ModelParams::init(&enc, split_seed(seed, 0, e as u64))?;
        let mut rng = rng_from_seed(split_seed(seed, 1, e as u64));
        let ep = mog_episode_sized(&crp, points, 2.0, &mut rng)?;
        let order = crate::losses::random_order(points, &mut rng);
        let visited = reorder(&ep.labels, &order);
        let negative = crate::partitions::to_point_order(&uniform_labels(points, &mut rng), &order);
        let tensors: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let x = &ep.points;
        let checks: [f64; 4] = [
            grad_check_many(|t, v| mc_loss(&params.bind(v)?, t.constant(x.clone()), &order, &visited), &tensors, step)?,
            grad_check_many(|t, v| cd_loss(&params.bind(v)?, t.constant(x.clone()), &ep.labels, &negative), &tensors, step)?,
            grad_check_many(|t, v| reg_loss(&params.bind(v)?, t.constant(x.clone()), &ep.labels), &tensors, step)?,
            grad_check_many(|t, v| ncp_nll(&params.bind(v)?, t.constant(x.clone()), &order, &visited), &tensors, step)?,
        ];
        for (w, c) in worst.iter_mut().zip(checks) {
            *w = w.max(c);
        }
    }
    Ok(worst)
}

fn grad_check_cmd(ctx: &mut Ctx, episodes: usize, points: usize, step: f64, tol: f64) -> Result<bool> {
    let worst = grad_check_suite(ctx.seed(), episodes, points, step)?;
    let names = ["mc_loss", "cd_loss", "reg_loss", "ncp_nll"];
    let ok = worst.iter().all(|&w| w < tol);
    let mut json = serde_json::Map::new();
    for (n, w) in names.iter().zip(worst) {
        println!("{n:<8} max relative error {w:.3e}");
        json.insert((*n).into(), serde_json::json!(w));
    }
    json.insert("tolerance".into(), serde_json::json!(tol));
    json.insert("passed".into(), serde_json::json!(ok));
    ctx.write("grad_check.json", serde_json::to_string_pretty(&serde_json::Value::Object(json))?)?;
    Ok(ok)
}
