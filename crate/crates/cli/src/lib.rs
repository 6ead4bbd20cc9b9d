//! The `oppo` command line: data generation, labeling, training,
//! evaluation and the comparison studies.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use oppo_baselines::{train_bc, train_dt_pseudo, train_return_conditioned, BaselinePolicy, RewardChannel};
use oppo_core::checkpoint::Checkpoint;
use oppo_core::config::RunConfig;
use oppo_core::data::{
    build_preference_dataset, generate_offline_dataset, load_dataset, load_preferences, save_dataset,
    save_preferences, OfflineDataset, TeacherMode,
};
use oppo_core::oppo::{oppo_train, TrainState};
use oppo_core::rundir::{latest_checkpoint, RunDir};
use oppo_core::{Error, Result};
use oppo_eval::plot::{projection_scatter_svg, score_bars_svg};
use oppo_eval::{
    ablation_oppo_a, alignment, embedding_report, embedding_table_csv, evaluate_context, feedback_sweep,
    parse_embedding_table, EvalReport, ZChoice,
};
use oppo_label_service::{LabelStore, SystemClock};

/// File a baseline run stores its reward channel in.
pub const REWARDS_FILE: &str = "rewards.json";

#[derive(Debug, Parser)]
#[command(name = "oppo", version, about = "Offline preference-guided policy optimization workbench")]
pub struct Cli {
    /// Root every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Generate an offline dataset directory.
    GenData(GenData),
    /// Label random pairs with the scripted teacher.
    GenPrefs(GenPrefs),
    /// Serve pairs to human annotators over HTTP.
    ServeLabels(ServeLabels),
    /// Train a model into a run directory.
    Train(Train),
    /// Score a trained run.
    Eval(Eval),
    /// Train and score one model per label amount.
    SweepFeedback(Sweep),
    /// Compare training with and without preference gradients into the encoder.
    Ablate(Ablate),
    /// Write the embedding table of a trained run.
    ExportEmbeddings(ExportEmbeddings),
    /// Render a report or embedding table as SVG.
    Plot(Plot),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the held-out size and seed from the config.
    #[arg(long)]
    pub heldout: bool,
}

#[derive(Debug, Args)]
pub struct GenPrefs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub n: Option<i64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeLabels {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the task snapshot and label log.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Algo {
    Oppo,
    DtPseudo,
    DtTrue,
    Bc,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long, value_enum)]
    pub algo: Algo,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Required by `oppo` and `dt_pseudo`.
    #[arg(long)]
    pub prefs: Option<PathBuf>,
    /// Overrides `optim.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset the run was trained on; required for oppo runs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `z_star`, `z_high`, `z_low` or `all`; ignored for baselines.
    #[arg(long, default_value = "all")]
    pub context: String,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Held-out dataset and labels for the alignment metrics.
    #[arg(long, requires = "heldout_prefs")]
    pub heldout: Option<PathBuf>,
    #[arg(long, requires = "heldout")]
    pub heldout_prefs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub amounts: Option<Vec<i64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportEmbeddings {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Plot {
    /// An evaluation report (score bars).
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub report: Option<PathBuf>,
    /// An embedding table (projection scatter).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Output paths created by the current verb, removed again if it fails.
struct Outputs {
    force: bool,
    created: Vec<PathBuf>,
    keep: bool,
}

impl Outputs {
    fn new(force: bool) -> Self {
        Self {
            force,
            created: Vec::new(),
            keep: false,
        }
    }

    /// Refuses an existing path unless forced, then claims it.
    fn claim(&mut self, path: &Path) -> Result<()> {
        if path.exists() {
            if !self.force {
                return Err(Error::Input(format!(
                    "{} already exists; pass --force to overwrite",
                    path.display()
                )));
            }
            if path.is_dir() {
                fs::remove_dir_all(path)?;
            } else {
                fs::remove_file(path)?;
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.created.push(path.to_path_buf());
        Ok(())
    }

    fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        self.claim(path)?;
        fs::write(path, contents)?;
        Ok(())
    }

    fn cleanup(&self) {
        if self.keep {
            return;
        }
        for p in &self.created {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

/// Parses `args` and runs the verb.
pub fn run(cli: Cli) -> Result<()> {
    let mut out = Outputs::new(cli.force);
    let result = dispatch(&cli, &mut out);
    if result.is_err() {
        out.cleanup();
    }
    result
}

fn dispatch(cli: &Cli, out: &mut Outputs) -> Result<()> {
    let p = |path: &Path| cli.workdir.join(path);
    match &cli.verb {
        Verb::GenData(a) => gen_data(a, &p, out),
        Verb::GenPrefs(a) => gen_prefs(a, &p, out),
        Verb::ServeLabels(a) => serve_labels(a, &p),
        Verb::Train(a) => train(a, &p, out),
        Verb::Eval(a) => eval(a, &p, out),
        Verb::SweepFeedback(a) => sweep(a, &p, out),
        Verb::Ablate(a) => ablate(a, &p, out),
        Verb::ExportEmbeddings(a) => export_embeddings(a, &p, out),
        Verb::Plot(a) => plot(a, &p, out),
    }
}

type Resolve<'a> = dyn Fn(&Path) -> PathBuf + 'a;

fn gen_data(a: &GenData, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let c = RunConfig::load(&p(&a.config))?;
    let (n, seed) = if a.heldout {
        (c.data.heldout_n_traj, c.data.heldout_seed)
    } else {
        (c.data.n_traj, c.data.seed)
    };
    let ds = generate_offline_dataset(&c.env_spec(), c.data.split, n, seed)?;
    let dir = p(&a.out);
    out.claim(&dir)?;
    save_dataset(&ds, &dir)?;
    println!("{} trajectories, content hash {}", ds.len(), ds.content_hash);
    Ok(())
}

fn gen_prefs(a: &GenPrefs, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let c = RunConfig::load(&p(&a.config))?;
    let mode: TeacherMode = match &a.mode {
        Some(m) => m.parse()?,
        None => c.preference.mode,
    };
    let ds = load_dataset(&p(&a.data), true)?;
    let prefs = build_preference_dataset(
        &ds,
        a.n.unwrap_or(c.preference.n_pairs),
        mode,
        c.preference.tie_eps,
        a.seed.unwrap_or(c.preference.seed),
    )?;
    let path = p(&a.out);
    out.claim(&path)?;
    save_preferences(&prefs, &path)?;
    println!("{} triples for dataset {}", prefs.len(), prefs.dataset_ref);
    Ok(())
}

fn serve_labels(a: &ServeLabels, p: &Resolve) -> Result<()> {
    let ds = load_dataset(&p(&a.data), false)?;
    let store = LabelStore::open_or_create(&p(&a.store), ds, a.pairs, a.seed, Arc::new(SystemClock))
        .map_err(|e| Error::Data(e.to_string()))?;
    let addr: SocketAddr = format!("{}:{}", a.bind, a.port)
        .parse()
        .map_err(|_| Error::Input(format!("invalid bind address {}:{}", a.bind, a.port)))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(oppo_label_service::serve(addr, store))?;
    Ok(())
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    phase: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = RunConfig::load(path)?;
    if let Some(s) = seed {
        c.optim.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn require_prefs(a: &Train) -> Result<&Path> {
    a.prefs
        .as_deref()
        .ok_or_else(|| Error::Input("this algorithm needs --prefs".into()))
}

fn train(a: &Train, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let c = load_config(&p(&a.config), a.seed)?;
    let with_oracle = a.algo == Algo::DtTrue;
    let ds = load_dataset(&p(&a.data), with_oracle)?;
    if c.env_spec() != ds.env {
        return Err(Error::Config("config env does not match the dataset".into()));
    }
    let prefs = match a.algo {
        Algo::Oppo | Algo::DtPseudo => Some(load_preferences(&p(require_prefs(a)?), &ds)?),
        _ => None,
    };
    let dir = p(&a.out);
    out.claim(&dir)?;
    let mut rd = RunDir::create(&dir, &c, true)?;
    let result = train_into(a.algo, &c, &ds, prefs.as_ref(), &mut rd);
    if let Err(e) = &result {
        if !e.is_validation() {
            // Keep the partial run for inspection.
            out.keep = true;
            rd.write_diagnostic(e)?;
        }
    }
    result?;
    rd.finish()?;
    println!("trained {} for {} steps into {}", format!("{:?}", a.algo).to_lowercase(), c.optim.steps, dir.display());
    Ok(())
}

fn train_into(
    algo: Algo,
    c: &RunConfig,
    ds: &OfflineDataset,
    prefs: Option<&oppo_core::data::PreferenceDataset>,
    rd: &mut RunDir,
) -> Result<()> {
    let rd = std::cell::RefCell::new(rd);
    let policy_log = &mut |r: &oppo_baselines::PolicyRecord| rd.borrow_mut().log(&Tagged { phase: "policy", record: r });
    let policy = match algo {
        Algo::Oppo => {
            let prefs = prefs.expect("checked by caller");
            oppo_train(
                ds,
                prefs,
                c,
                &mut |r| rd.borrow_mut().log(r),
                &mut |s: &TrainState| rd.borrow_mut().save_checkpoint(s.step, &s.to_checkpoint()).map(|_| ()),
            )?;
            return Ok(());
        }
        Algo::DtPseudo => {
            let prefs = prefs.expect("checked by caller");
            let p = train_dt_pseudo(
                ds,
                prefs,
                c,
                &mut |r| rd.borrow_mut().log(&Tagged { phase: "reward", record: r }),
                policy_log,
            )?;
            let channel = oppo_baselines::relabel_dataset(ds, p.reward_model.as_ref().expect("pseudo arm"))?;
            write_channel(rd.borrow().root(), &channel)?;
            p
        }
        Algo::DtTrue => {
            let channel = RewardChannel::true_rewards(ds)?;
            write_channel(rd.borrow().root(), &channel)?;
            train_return_conditioned(ds, &channel, c, policy_log)?
        }
        Algo::Bc => train_bc(ds, c, policy_log)?,
    };
    rd.borrow_mut().save_checkpoint(c.optim.steps, &policy.to_checkpoint())?;
    Ok(())
}

fn write_channel(root: &Path, channel: &RewardChannel) -> Result<()> {
    fs::write(root.join(REWARDS_FILE), serde_json::to_string(channel)?)?;
    Ok(())
}

/// The newest checkpoint of a run directory.
pub fn load_run(run: &Path) -> Result<(usize, Checkpoint)> {
    let (step, path) = latest_checkpoint(run)
        .map_err(|e| Error::load(run, e.to_string()))?
        .ok_or_else(|| Error::load(run, "no checkpoint in run directory"))?;
    Ok((step, Checkpoint::load(&path)?))
}

fn check_ref(expected: &str, ds: &OfflineDataset) -> Result<()> {
    if expected != ds.content_hash {
        return Err(Error::HashMismatch {
            expected: expected.to_string(),
            found: ds.content_hash.clone(),
        });
    }
    Ok(())
}

fn eval(a: &Eval, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let (step, ckpt) = load_run(&p(&a.run))?;
    let kind = ckpt.meta["kind"].as_str().unwrap_or_default().to_string();
    let config: RunConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
    let dataset_ref = ckpt.meta["dataset_ref"].as_str().unwrap_or_default().to_string();
    let n_episodes = a.episodes.unwrap_or(config.eval.n_episodes);
    let seeds = a.seeds.clone().unwrap_or_else(|| config.eval.seeds.clone());
    let mut report = EvalReport {
        config_hash: config.hash(),
        checkpoint_step: step,
        dataset_ref: dataset_ref.clone(),
        seeds: seeds.clone(),
        n_episodes,
        contexts: Vec::new(),
        preference_accuracy: None,
        distance_return_spearman: None,
    };
    if kind == "oppo" {
        let data = a
            .data
            .as_deref()
            .ok_or_else(|| Error::Input("evaluating an oppo run needs --data".into()))?;
        let ds = load_dataset(&p(data), true)?;
        check_ref(&dataset_ref, &ds)?;
        let bundle = TrainState::from_checkpoint(&ckpt)?.bundle;
        let choices = match a.context.as_str() {
            "all" => vec![ZChoice::ZStar, ZChoice::ZHigh, ZChoice::ZLow],
            "z_star" => vec![ZChoice::ZStar],
            "z_high" => vec![ZChoice::ZHigh],
            "z_low" => vec![ZChoice::ZLow],
            other => return Err(Error::Input(format!("unknown context `{other}`"))),
        };
        for choice in choices {
            let s = evaluate_context(&bundle, &ds, &choice, n_episodes, &seeds)?;
            report.contexts.push((choice.name().to_string(), s));
        }
        if let (Some(h), Some(hp)) = (&a.heldout, &a.heldout_prefs) {
            let heldout = load_dataset(&p(h), true)?;
            let hprefs = load_preferences(&p(hp), &heldout)?;
            let al = alignment(&bundle, &heldout, &hprefs)?;
            report.preference_accuracy = Some(al.preference_accuracy);
            report.distance_return_spearman = Some(al.distance_return_spearman);
        }
    } else {
        let policy = BaselinePolicy::from_checkpoint(&ckpt)?;
        if let Some(data) = &a.data {
            check_ref(&dataset_ref, &load_dataset(&p(data), false)?)?;
        }
        let s = policy.evaluate(n_episodes, &seeds)?;
        report.contexts.push((policy.kind.as_str().to_string(), s));
    }
    let path = p(&a.out);
    out.write(&path, report.to_csv()?)?;
    for (name, s) in &report.contexts {
        println!("{name}: {:.1} ± {:.1} over seeds {:?}", s.mean, s.std, seeds);
    }
    Ok(())
}

fn sweep(a: &Sweep, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let c = load_config(&p(&a.config), None)?;
    let path = p(&a.out);
    out.claim(&path)?;
    let rows = feedback_sweep(&c, a.amounts.as_deref().unwrap_or(&c.eval.amounts))?;
    let mut text = String::from("amount,dataset_hash,mean,std,per_seed\n");
    for r in &rows {
        let per: Vec<String> = r.score.per_seed.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&format!(
            "{},{},{:?},{:?},{}\n",
            r.amount,
            r.dataset_hash,
            r.score.mean,
            r.score.std,
            per.join(";")
        ));
        println!("{} labels: {:.1} ± {:.1}", r.amount, r.score.mean, r.score.std);
    }
    fs::write(&path, text)?;
    Ok(())
}

fn ablate(a: &Ablate, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let c = load_config(&p(&a.config), None)?;
    let path = p(&a.out);
    out.claim(&path)?;
    let rows = ablation_oppo_a(&c, &a.seeds)?;
    let mut text = String::from("seed,oppo,oppo_a\n");
    for r in &rows {
        text.push_str(&format!("{},{:?},{:?}\n", r.seed, r.oppo, r.oppo_a));
    }
    fs::write(&path, text)?;
    let n = rows.len() as f64;
    println!(
        "mean oppo {:.1}, oppo_a {:.1}",
        rows.iter().map(|r| r.oppo).sum::<f64>() / n,
        rows.iter().map(|r| r.oppo_a).sum::<f64>() / n
    );
    Ok(())
}

fn export_embeddings(a: &ExportEmbeddings, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let (_, ckpt) = load_run(&p(&a.run))?;
    let bundle = TrainState::from_checkpoint(&ckpt)?.bundle;
    let ds = load_dataset(&p(&a.data), true)?;
    check_ref(&bundle.dataset_ref, &ds)?;
    let rows = embedding_report(&bundle, &ds, a.n.unwrap_or(bundle.config.eval.n_embed_sample))?;
    out.write(&p(&a.out), embedding_table_csv(&rows)?)?;
    println!("{} embedding rows", rows.len());
    Ok(())
}

fn plot(a: &Plot, p: &Resolve, out: &mut Outputs) -> Result<()> {
    let svg = if let Some(report) = &a.report {
        let r = EvalReport::load(&p(report))?;
        let bars: Vec<(String, f64, f64)> = r.contexts.iter().map(|(n, s)| (n.clone(), s.mean, s.std)).collect();
        score_bars_svg(&format!("normalized score, step {}", r.checkpoint_step), &bars)
    } else {
        let path = p(a.embeddings.as_deref().expect("clap requires one input"));
        let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        projection_scatter_svg("context embeddings", &parse_embedding_table(&text)?)
    };
    out.write(&p(&a.out), svg)
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}
