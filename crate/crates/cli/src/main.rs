use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use beatsmith::dsp::FrontendConfig;
use beatsmith::ensemble::{ensemble, load_embedding, save_embedding, CombinerMode, EnsembleOptions, UpsampleMode};
use beatsmith::extract::{embed_clips, EmbeddingSource};
use beatsmith::fixtures::{generate_corpus, SyntheticCorpusSpec};
use beatsmith::mixture::{domain_totals, load_manifest, mixture_ratios, DatasetManifest, Domain, MixtureSpec, Sampler, WithinDomain};
use beatsmith::pretrain::{checkpoint_file_name, load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use beatsmith::probe::{run_probe, split_data, Metrics, ProbeConfig, SourceEmbeddings, TaskItem, TaskSpec};
use beatsmith::report::{build_table, load_records, render_csv, render_markdown, ResultRecord};
use beatsmith::{par, Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "beatsmith", version, about = "Toy masked-token audio encoders, embedding ensembles and probes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on one thread for bitwise-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (a file path for single-file `ensemble`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Domain totals, mixture ratios and sampling.
    Mixture {
        #[command(subcommand)]
        cmd: MixtureCmd,
    },
    /// Masked-token pretraining of a toy encoder.
    Pretrain(PretrainArgs),
    /// Writes one embedding file per clip.
    Embed(EmbedArgs),
    /// Aligns and combines embedding files from several sources.
    Ensemble(EnsembleArgs),
    /// Trains and evaluates a probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Renders metric files as a markdown and CSV table.
    Report(ReportArgs),
    /// Synthetic corpus and reference tables.
    Fixtures {
        #[command(subcommand)]
        cmd: FixturesCmd,
    },
}

#[derive(Subcommand, Debug)]
enum MixtureCmd {
    Ratios(RatiosArgs),
    Sample(SampleArgs),
}

#[derive(Args, Debug, Serialize)]
struct RatiosArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Dataset ids to exclude; repeatable.
    #[arg(long)]
    disable: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "speech-heavy")]
    spec: String,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Pick datasets within a domain uniformly instead of by hours.
    #[arg(long)]
    uniform_within_domain: bool,
    #[arg(long)]
    disable: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    mixture: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    refit_tokenizer_every: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EmbedArgs {
    #[arg(long, conflicts_with = "stand_in", required_unless_present = "stand_in")]
    checkpoint: Option<PathBuf>,
    /// Pooled log-mel frames instead of an encoder.
    #[arg(long)]
    stand_in: bool,
    /// Frames per stand-in embedding.
    #[arg(long, default_value_t = 25)]
    pool: usize,
    #[arg(long, conflicts_with = "clips", required_unless_present = "clips")]
    task: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    clips: Vec<PathBuf>,
    #[arg(long)]
    source_id: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum ModeArg {
    Concat,
    Average,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum UpsampleArg {
    Nearest,
    Linear,
}

#[derive(Args, Debug, Serialize)]
struct EnsembleArgs {
    /// Embedding files, or directories of per-clip files.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "concat")]
    mode: ModeArg,
    #[arg(long, value_enum)]
    upsample: Option<UpsampleArg>,
    /// Standardize each source before combining.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    emb_dir: PathBuf,
    /// Column name in reports; defaults to the embeddings' source id.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum FixturesCmd {
    Generate,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pretrain: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frontend: Option<FrontendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ensemble: Option<EnsembleOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixtures: Option<SyntheticCorpusSpec>,
}

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    global: &'a Global,
    args: &'a A,
    resolved: C,
}

#[derive(Serialize)]
struct ProbeOutput<'a> {
    task: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<&'a str>,
    system: &'a str,
    metric: &'a str,
    value: f64,
    count: usize,
    per_class: &'a [Option<f64>],
    best_epoch: usize,
    epochs_run: usize,
    probe: &'a ProbeConfig,
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("{what} {} not found", path.display())))
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| config_error("--out is required for this command"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_record<A: Serialize, C: Serialize>(dir: &Path, g: &Global, command: &str, args: &A, resolved: C) -> Result<()> {
    let rec = RunRecord { tool: "beatsmith", version: env!("CARGO_PKG_VERSION"), command, global: g, args, resolved };
    write_json(&dir.join("run.json"), &rec)
}

fn load_run_config(g: &Global) -> Result<RunConfig> {
    let Some(path) = &g.config else { return Ok(RunConfig::default()) };
    require_file(path, "config")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn manifest_with(path: &Path, disable: &[String]) -> Result<DatasetManifest> {
    require_file(path, "manifest")?;
    let mut m = load_manifest(path)?;
    for id in disable {
        m.set_enabled(id, false)?;
    }
    Ok(m)
}

fn cmd_ratios(g: &Global, a: &RatiosArgs) -> Result<()> {
    let m = manifest_with(&a.manifest, &a.disable)?;
    let totals = domain_totals(&m);
    let ratios = mixture_ratios(&m)?;
    println!("{:<8} {:>10} {:>7}", "domain", "hours", "ratio");
    for d in Domain::ALL {
        println!("{:<8} {:>10} {:>6.1}%", d.as_str(), totals[&d], 100.0 * ratios[&d]);
    }
    println!("{:<8} {:>10}", "total", totals.values().sum::<f64>());
    let pct = |d: Domain| format!("{:.1}", 100.0 * ratios[&d]);
    println!(
        "speech/music/sound = {}/{}/{}",
        pct(Domain::Speech),
        pct(Domain::Music),
        pct(Domain::Sound)
    );
    if let Some(dir) = &g.out {
        ensure_dir(dir)?;
        #[derive(Serialize)]
        struct Out<'a> {
            totals: &'a BTreeMap<Domain, f64>,
            ratios: &'a BTreeMap<Domain, f64>,
        }
        write_json(&dir.join("ratios.json"), &Out { totals: &totals, ratios: &ratios })?;
        write_record(dir, g, "mixture ratios", a, ())?;
    }
    Ok(())
}

fn cmd_sample(g: &Global, a: &SampleArgs) -> Result<()> {
    let m = manifest_with(&a.manifest, &a.disable)?;
    let spec = MixtureSpec::named(&a.spec)?;
    let within = if a.uniform_within_domain { WithinDomain::Uniform } else { WithinDomain::Hours };
    let sampler = Sampler::new(&m, &spec, within, g.seed.unwrap_or(0))?;
    let draws = sampler.draw_range(0, a.count);
    let mut lines = String::new();
    for c in &draws {
        lines.push_str(&format!("{}\t{}\t{}\n", c.domain, c.dataset_id, c.path.display()));
    }
    print!("{lines}");
    if let Some(dir) = &g.out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("sample.tsv"), &lines)?;
        write_record(dir, g, "mixture sample", a, &spec)?;
    }
    Ok(())
}

fn cmd_pretrain(g: &Global, rc: RunConfig, a: &PretrainArgs) -> Result<()> {
    let dir = out_dir(g)?.to_path_buf();
    let manifest = manifest_with(&a.manifest, &[])?;
    let mut trainer = if let Some(ck) = &a.resume {
        require_file(ck, "checkpoint")?;
        let mut t = Trainer::resume(load_checkpoint(ck)?, &manifest)?;
        if let Some(s) = a.steps {
            t.set_steps(s);
        }
        t
    } else {
        let mut cfg = rc.pretrain.unwrap_or_default();
        if let Some(fe) = rc.frontend {
            cfg.frontend = fe;
        }
        if let Some(v) = &a.preset {
            cfg.encoder = v.clone();
        }
        if let Some(v) = &a.mixture {
            cfg.mixture = v.clone();
        }
        if let Some(v) = a.steps {
            cfg.steps = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.codebook_size {
            cfg.codebook_size = v;
        }
        if let Some(v) = a.lr {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = a.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if let Some(v) = a.refit_tokenizer_every {
            cfg.refit_tokenizer_every = v;
        }
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Trainer::new(cfg, &manifest)?
    };
    ensure_dir(&dir)?;
    write_record(&dir, g, "pretrain", a, trainer.config())?;
    let steps = trainer.config().steps;
    let final_ckpt = trainer.run(|c| {
        let name = if c.step == steps { "final.obts".to_string() } else { checkpoint_file_name(c.step) };
        save_checkpoint(c, &dir.join(name))
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in final_ckpt.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    println!(
        "trained {} steps, final loss {:.4}, checkpoint {}",
        final_ckpt.step,
        final_ckpt.loss_history.last().copied().unwrap_or(f64::NAN),
        dir.join("final.obts").display()
    );
    Ok(())
}

fn stem_of(p: &Path) -> Result<String> {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| config_error(format!("{} has no file name", p.display())))
}

fn unique_stems(paths: &[&Path]) -> Result<Vec<String>> {
    let mut seen: HashMap<String, &Path> = HashMap::new();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let s = stem_of(p)?;
        if let Some(prev) = seen.insert(s.clone(), p) {
            return Err(config_error(format!(
                "{} and {} share the file stem {s:?}",
                prev.display(),
                p.display()
            )));
        }
        out.push(s);
    }
    Ok(out)
}

fn task_items(t: &TaskSpec) -> impl Iterator<Item = &TaskItem> {
    t.splits.train.iter().chain(&t.splits.valid).chain(&t.splits.test)
}

fn cmd_embed(g: &Global, rc: RunConfig, a: &EmbedArgs) -> Result<()> {
    let dir = out_dir(g)?.to_path_buf();
    let task = match &a.task {
        Some(p) => {
            require_file(p, "task")?;
            Some(TaskSpec::load(p)?)
        }
        None => None,
    };
    let clips: Vec<PathBuf> = match &task {
        Some(t) => task_items(t)
            .map(|i| {
                i.clip_path
                    .clone()
                    .ok_or_else(|| config_error("embed needs a task whose items give clip_path"))
            })
            .collect::<Result<_>>()?,
        None => a.clips.clone(),
    };
    let stems = unique_stems(&clips.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let source = match &a.checkpoint {
        Some(ck) => {
            require_file(ck, "checkpoint")?;
            let c = load_checkpoint(ck)?;
            let id = a
                .source_id
                .clone()
                .unwrap_or_else(|| format!("{}/{}", c.weights.config.preset, c.config.mixture));
            EmbeddingSource::Encoder { weights: c.weights, frontend: c.config.frontend, source_id: id }
        }
        None => EmbeddingSource::MelPool {
            frontend: rc.frontend.unwrap_or_default(),
            pool: a.pool,
            source_id: a.source_id.clone().unwrap_or_else(|| "mel-pool".into()),
        },
    };
    ensure_dir(&dir)?;
    write_record(&dir, g, "embed", a, source.source_id())?;
    let seqs = embed_clips(&source, &clips);
    for (seq, stem) in seqs.into_iter().zip(&stems) {
        save_embedding(&seq?, &dir.join(format!("{stem}.oemb")))?;
    }
    if let Some(mut t) = task {
        let stem_map: HashMap<PathBuf, String> = clips.iter().cloned().zip(stems.iter().cloned()).collect();
        for items in [&mut t.splits.train, &mut t.splits.valid, &mut t.splits.test] {
            for it in items.iter_mut() {
                let stem = &stem_map[it.clip_path.as_ref().expect("checked above")];
                it.clip_path = None;
                it.oemb_path = Some(PathBuf::from(format!("{stem}.oemb")));
            }
        }
        write_json(&dir.join("task.json"), &t)?;
    }
    println!("wrote {} embeddings from {} to {}", clips.len(), source.source_id(), dir.display());
    Ok(())
}

fn oemb_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "oemb") {
            stems.push(stem_of(&p)?);
        }
    }
    stems.sort();
    Ok(stems)
}

fn cmd_ensemble(g: &Global, rc: RunConfig, a: &EnsembleArgs) -> Result<()> {
    let out = g.out.clone().ok_or_else(|| config_error("--out is required for ensemble"))?;
    let mut opts = rc.ensemble.unwrap_or_default();
    if a.standardize {
        opts.standardize = true;
    }
    if let Some(u) = a.upsample {
        opts.upsample = match u {
            UpsampleArg::Nearest => UpsampleMode::Nearest,
            UpsampleArg::Linear => UpsampleMode::Linear,
        };
    }
    let mode = match a.mode {
        ModeArg::Concat => CombinerMode::Concatenate,
        ModeArg::Average => CombinerMode::Average,
    };
    for p in &a.inputs {
        if !p.exists() {
            return Err(config_error(format!("input {} not found", p.display())));
        }
    }
    let dirs = a.inputs.iter().filter(|p| p.is_dir()).count();
    if dirs == 0 {
        let seqs = a.inputs.iter().map(|p| load_embedding(p)).collect::<beatsmith::Result<Vec<_>>>()?;
        let combined = ensemble(&seqs, mode, &opts)?;
        save_embedding(&combined, &out)?;
        let rec_dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = format!("{}.run.json", out.file_name().map(|n| n.to_string_lossy()).unwrap_or_default());
        let rec = RunRecord { tool: "beatsmith", version: env!("CARGO_PKG_VERSION"), command: "ensemble", global: g, args: a, resolved: &opts };
        write_json(&rec_dir.join(name), &rec)?;
        println!("{}: N={} h={} ({})", out.display(), combined.len(), combined.dim(), combined.source_id);
        return Ok(());
    }
    if dirs != a.inputs.len() {
        return Err(config_error("ensemble inputs must be all files or all directories"));
    }
    let stems = oemb_stems(&a.inputs[0])?;
    if stems.is_empty() {
        return Err(Error::EmptyInput(format!("no .oemb files in {}", a.inputs[0].display())).into());
    }
    for d in &a.inputs[1..] {
        if oemb_stems(d)? != stems {
            return Err(config_error(format!(
                "{} and {} hold different clips",
                a.inputs[0].display(),
                d.display()
            )));
        }
    }
    ensure_dir(&out)?;
    write_record(&out, g, "ensemble", a, &opts)?;
    let results = par::map(&stems, |stem| -> beatsmith::Result<()> {
        let seqs = a
            .inputs
            .iter()
            .map(|d| load_embedding(&d.join(format!("{stem}.oemb"))))
            .collect::<beatsmith::Result<Vec<_>>>()?;
        save_embedding(&ensemble(&seqs, mode, &opts)?, &out.join(format!("{stem}.oemb")))
    });
    for r in results {
        r?;
    }
    let task = a.inputs[0].join("task.json");
    if task.is_file() {
        std::fs::copy(&task, out.join("task.json"))?;
    }
    println!("combined {} clips from {} sources into {}", stems.len(), a.inputs.len(), out.display());
    Ok(())
}

fn cmd_probe(g: &Global, rc: RunConfig, a: &ProbeArgs) -> Result<()> {
    let dir = out_dir(g)?.to_path_buf();
    require_file(&a.task, "task")?;
    let task = TaskSpec::load(&a.task)?;
    let mut cfg = rc.probe.unwrap_or_default();
    if let Some(v) = a.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if !a.emb_dir.is_dir() {
        return Err(config_error(format!("embedding directory {} not found", a.emb_dir.display())));
    }
    let load = |items: &[TaskItem]| -> Result<Vec<_>> {
        let paths: Vec<&Path> = items.iter().map(|i| i.path()).collect();
        unique_stems(&paths)?
            .iter()
            .map(|s| Ok(load_embedding(&a.emb_dir.join(format!("{s}.oemb")))?))
            .collect()
    };
    let src = SourceEmbeddings {
        name: String::new(),
        train: load(&task.splits.train)?,
        valid: load(&task.splits.valid)?,
        test: load(&task.splits.test)?,
    };
    let system = a.system.clone().unwrap_or_else(|| src.train[0].source_id.clone());
    let data = split_data(&src, &task)?;
    let (trained, m): (_, Metrics) = run_probe(&data, &task, &cfg)?;
    ensure_dir(&dir)?;
    write_record(&dir, g, "probe", a, &cfg)?;
    let out = ProbeOutput {
        task: &task.name,
        domain: task.domain.as_deref(),
        system: &system,
        metric: &m.metric,
        value: m.value,
        count: m.count,
        per_class: &m.per_class,
        best_epoch: trained.best_epoch,
        epochs_run: trained.epochs_run,
        probe: &cfg,
    };
    write_json(&dir.join("metrics.json"), &out)?;
    println!("{} / {}: {} = {:.4} on {} clips", task.name, system, m.metric, m.value, m.count);
    Ok(())
}

fn cmd_report(g: &Global, a: &ReportArgs) -> Result<()> {
    let mut records: Vec<ResultRecord> = Vec::new();
    for f in &a.files {
        require_file(f, "metrics file")?;
        records.extend(load_records(f)?);
    }
    let table = build_table(&records)?;
    let md = render_markdown(&table);
    print!("{md}");
    if let Some(dir) = &g.out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("report.md"), &md)?;
        std::fs::write(dir.join("report.csv"), render_csv(&table))?;
        write_record(dir, g, "report", a, ())?;
    }
    Ok(())
}

fn cmd_fixtures(g: &Global, rc: RunConfig) -> Result<()> {
    let dir = out_dir(g)?.to_path_buf();
    let mut spec = rc.fixtures.unwrap_or_default();
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    ensure_dir(&dir)?;
    let summary = generate_corpus(&spec, &dir)?;
    write_record(&dir, g, "fixtures generate", &(), &spec)?;
    println!("wrote {} clips to {} (digest {})", summary.clips.len(), dir.display(), summary.digest);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let rc = load_run_config(g)?;
    match &cli.command {
        Command::Mixture { cmd: MixtureCmd::Ratios(a) } => cmd_ratios(g, a),
        Command::Mixture { cmd: MixtureCmd::Sample(a) } => cmd_sample(g, a),
        Command::Pretrain(a) => cmd_pretrain(g, rc, a),
        Command::Embed(a) => cmd_embed(g, rc, a),
        Command::Ensemble(a) => cmd_ensemble(g, rc, a),
        Command::Probe(a) => cmd_probe(g, rc, a),
        Command::Report(a) => cmd_report(g, a),
        Command::Fixtures { cmd: FixturesCmd::Generate } => cmd_fixtures(g, rc),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Internal => 4,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.global.deterministic { par::sequential(|| dispatch(&cli)) } else { dispatch(&cli) };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
