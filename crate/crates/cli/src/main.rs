use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ouiqa::config::{Config, Resolved};
use ouiqa::data::{build_manifest, list_corpus, materialize, prepare_all, Manifest};
use ouiqa::distort::{degrade, sample_recipe, DistortionStep, Recipe, Registry};
use ouiqa::eval::{export_report, EvalReport, ScoreRow};
use ouiqa::features::extract_patch_features;
use ouiqa::imgproc::{load_image, save_image};
use ouiqa::losses::{select, LossConfig, RankingVariant};
use ouiqa::model::{
    load_checkpoint, numeric_check, random_batch, random_params, save_checkpoint, score_grid, Dims,
    GradCheck, Objective, Preset, ScorerParams,
};
use ouiqa::train::{log_header, log_line, score_image, train, TrainSettings};

/// A run finished but missed a requested threshold.
#[derive(Debug)]
struct ThresholdFailure(String);

impl std::fmt::Display for ThresholdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ThresholdFailure {}

#[derive(Parser)]
#[command(name = "ouiqa", version, about = "Opinion-unaware image quality assessment")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "OUIQA_CONFIG")]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=2`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Apply a distortion recipe to one image.
    Degrade(DegradeArgs),
    /// Build a manifest of degraded samples from a directory of clean images.
    Dataset(DatasetArgs),
    /// Train a scorer on a manifest.
    Train(TrainArgs),
    /// Score images with a trained checkpoint.
    Score(ScoreArgs),
    /// Correlate checkpoint scores with manifest references.
    Eval(EvalArgs),
    /// Score-distribution overlap between a high- and a low-quality set.
    Separate(SeparateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Inspect the resolved configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Dump the patch feature grid of an image as CSV.
    Features(FeaturesArgs),
    /// Write a corpus of synthetic clean images.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print every value with its origin.
    Show,
}

#[derive(Args)]
struct DegradeArgs {
    image: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Explicit steps as kind:level, applied in order.
    #[arg(long = "step", value_name = "KIND:LEVEL", conflicts_with = "neutral")]
    steps: Vec<String>,
    /// Apply the no-op recipe.
    #[arg(long)]
    neutral: bool,
    /// Recipe seed (sampling seed when no steps are given).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    sigma_off: Option<f64>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory of clean images (defaults to paths.corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output manifest (defaults to paths.manifest).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variants: Option<usize>,
    /// Also write every degraded crop as PNG into this directory.
    #[arg(long)]
    materialize: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output checkpoint (defaults to paths.checkpoint).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Training log CSV (defaults to paths.log, else next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    /// pair-of-pairs, pairwise or margin.
    #[arg(long)]
    ranking: Option<RankingVariant>,
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    no_embdist: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    images: Vec<PathBuf>,
    /// Patch side in pixels (defaults to data.crop_size / data.grid).
    #[arg(long)]
    patch: Option<usize>,
    /// Write CSV here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Exit with status 4 when SROCC falls below this value.
    #[arg(long)]
    min_srocc: Option<f64>,
    #[arg(long)]
    min_plcc: Option<f64>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    high: PathBuf,
    #[arg(long)]
    low: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Exit with status 4 when the overlap exceeds this value.
    #[arg(long)]
    max_overlap: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 4)]
    records: usize,
    #[arg(long, default_value_t = 4)]
    patches: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Check the configured model widths instead of a reduced custom shape.
    #[arg(long)]
    full: bool,
    /// Perturb the decision-layer gradient; the check should then fail.
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args)]
struct FeaturesArgs {
    image: PathBuf,
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 192)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn overrides(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| ouiqa::Error::Config(format!("--set `{s}` is not key=value")).into())
        })
        .collect()
}

fn need(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| ouiqa::Error::Config(format!("no {what} given (flag or paths section)")).into())
}

fn open_checkpoint(path: &Path) -> Result<ScorerParams> {
    let (p, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(p)
}

fn patch_size(cfg: &Config, flag: Option<usize>) -> usize {
    flag.unwrap_or(cfg.data.crop_size / cfg.data.grid)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(list_corpus(dir)?)
}

fn score_paths(params: &ScorerParams, paths: &[PathBuf], patch: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    paths
        .par_iter()
        .map(|p| {
            let img = load_image(p)?;
            score_image(params, &img, patch).with_context(|| format!("scoring {}", p.display()))
        })
        .collect()
}

fn cmd_degrade(cfg: &Config, a: DegradeArgs) -> Result<()> {
    let reg = Registry::builtin();
    let img = load_image(&a.image)?;
    let recipe = if a.neutral {
        Recipe::neutral(a.seed)
    } else if !a.steps.is_empty() {
        let steps = a.steps.iter().map(|s| DistortionStep::parse(s)).collect::<ouiqa::Result<Vec<_>>>()?;
        for s in &steps {
            reg.get(&s.kind)?;
        }
        Recipe::new(steps, a.seed)?
    } else {
        let max_steps = a.max_steps.unwrap_or(cfg.data.max_steps);
        let sigma = a.sigma_off.unwrap_or(cfg.data.sigma_off);
        sample_recipe(reg, a.seed, max_steps, sigma)?
    };
    let out = degrade(reg, &img, &recipe)?;
    save_image(&out, &a.out)?;
    println!("{}", serde_json::to_string(&recipe)?);
    println!("severity {}", recipe.severity);
    Ok(())
}

fn cmd_dataset(cfg: &Config, a: DatasetArgs) -> Result<()> {
    let corpus = need(a.corpus, &cfg.paths.corpus, "corpus directory")?;
    let out = need(a.out, &cfg.paths.manifest, "output manifest")?;
    let mut dc = cfg.dataset();
    if let Some(s) = a.seed {
        dc.master_seed = s;
    }
    if let Some(v) = a.variants {
        dc.variants = v;
    }
    eprintln!("master seed {}", dc.master_seed);
    let reg = Registry::builtin();
    let m = build_manifest(reg, &corpus, &dc)?;
    m.save(&out)?;
    if let Some(dir) = a.materialize {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        m.records.par_iter().try_for_each(|r| -> Result<()> {
            let img = materialize(reg, r, dc.crop_size)?;
            save_image(&img, dir.join(format!("{}.png", r.id.replace('#', "_"))))?;
            Ok(())
        })?;
    }
    println!(
        "{} records from {} images, {} skipped{}",
        m.records.len(),
        m.records.len() / dc.variants.max(1),
        m.header.skipped.len(),
        if m.header.skipped.is_empty() { String::new() } else { format!(": {}", m.header.skipped.join(", ")) }
    );
    Ok(())
}

fn cmd_train(cfg: &mut Config, a: TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.preset {
        cfg.model.preset = p;
    }
    if let Some(r) = a.ranking {
        cfg.loss.ranking = r;
    }
    cfg.loss.align &= !a.no_align;
    cfg.loss.embdist &= !a.no_embdist;
    cfg.validate()?;
    let manifest = need(a.manifest, &cfg.paths.manifest, "manifest")?;
    let out = need(a.out, &cfg.paths.checkpoint, "output checkpoint")?;
    let log_path = a.log.or_else(|| cfg.paths.log.clone()).unwrap_or_else(|| out.with_extension("log.csv"));
    eprintln!("training seed {}, master seed {}", cfg.train.seed, cfg.data.master_seed);

    let t0 = Instant::now();
    let m = Manifest::load(&manifest)?;
    let reg = Registry::builtin();
    let data = prepare_all(reg, &m.records, &cfg.prep())?;
    log::info!("prepared {} records in {:.1?}", data.len(), t0.elapsed());

    let mut params = ScorerParams::new(cfg.model.preset, cfg.dims()?, cfg.model.init_seed);
    let settings = TrainSettings {
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        hyper: cfg.adam(0),
        loss: cfg.loss.clone(),
        master_seed: m.header.config.master_seed,
        seed: cfg.train.seed,
    };
    let mut log_file = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log_file, "{}", log_header())?;
    let mut io_err = None;
    let (state, steps) = train(&mut params, &data, &settings, |r| {
        if let Err(e) = writeln!(log_file, "{}", log_line(r)) {
            io_err.get_or_insert(e);
        }
        log::debug!("epoch {} step {} total {:.5}", r.epoch, r.step, r.breakdown.total);
    })?;
    if let Some(e) = io_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    log_file.flush()?;
    save_checkpoint(&out, &params, Some(&state))?;
    let last = steps.last().map(|s| s.breakdown.total).unwrap_or(f64::NAN);
    println!(
        "{} steps over {} epochs in {:.1?}; final loss {last:.5}; checkpoint {}; log {}",
        steps.len(),
        cfg.train.epochs,
        t0.elapsed(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_score(cfg: &Config, a: ScoreArgs) -> Result<()> {
    if a.images.is_empty() {
        bail!(ouiqa::Error::InvalidArgument("no images to score".into()));
    }
    let ckpt = need(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let params = open_checkpoint(&ckpt)?;
    let scores = score_paths(&params, &a.images, patch_size(cfg, a.patch))?;
    let mut w = csv_writer(a.out.as_deref())?;
    writeln!(w, "path,q")?;
    for (p, (q, _)) in a.images.iter().zip(&scores) {
        writeln!(w, "{},{q}", csv_field(&p.to_string_lossy()))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: Option<&Path>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_eval(cfg: &Config, a: EvalArgs) -> Result<()> {
    let ckpt = need(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let manifest = need(a.manifest, &cfg.paths.manifest, "manifest")?;
    let params = open_checkpoint(&ckpt)?;
    let m = Manifest::load(&manifest)?;
    let reg = Registry::builtin();
    let prep = cfg.prep();
    let outs: Vec<(f64, Vec<f64>)> = m
        .records
        .par_iter()
        .map(|r| -> Result<(f64, Vec<f64>)> {
            let img = materialize(reg, r, prep.crop_size)?;
            let grid = extract_patch_features(&img, prep.grid, prep.grid)?;
            Ok(score_grid(&params, &grid)?)
        })
        .collect::<Result<_>>()?;
    let q: Vec<f64> = outs.iter().map(|o| o.0).collect();
    let reference: Vec<f64> = m.records.iter().map(|r| r.reference.unwrap_or(1.0 - r.severity)).collect();
    let mut report = EvalReport::correlation(&q, &reference)?;
    if m.records.iter().all(|r| r.reference.is_none()) {
        report.notes.push("reference = 1 - severity".into());
    }
    let rows: Vec<ScoreRow> = m
        .records
        .iter()
        .zip(&q)
        .map(|(r, &q)| ScoreRow {
            id: r.id.clone(),
            severity: Some(r.severity),
            q,
        })
        .collect();
    let emb: Vec<(String, Vec<f64>)> = m.records.iter().zip(outs).map(|(r, o)| (r.id.clone(), o.1)).collect();
    let srocc = report.srocc.unwrap_or(f64::NAN);
    let plcc = report.plcc.unwrap_or(f64::NAN);
    println!("n {} srocc {srocc:.4} plcc {plcc:.4}", report.n);
    if let Some(dir) = a.out_dir.or_else(|| cfg.paths.out_dir.clone()) {
        let files = export_report(&report, &rows, &emb, None, &dir)?;
        println!("report {}", files.report.display());
    }
    if let Some(t) = a.min_srocc.filter(|t| srocc < *t) {
        bail!(ThresholdFailure(format!("srocc {srocc:.4} below {t}")));
    }
    if let Some(t) = a.min_plcc.filter(|t| plcc < *t) {
        bail!(ThresholdFailure(format!("plcc {plcc:.4} below {t}")));
    }
    Ok(())
}

fn cmd_separate(cfg: &Config, a: SeparateArgs) -> Result<()> {
    let ckpt = need(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let params = open_checkpoint(&ckpt)?;
    let bins = a.bins.unwrap_or(cfg.eval.bins);
    let patch = patch_size(cfg, a.patch);
    let (hp, lp) = (images_in(&a.high)?, images_in(&a.low)?);
    let hs = score_paths(&params, &hp, patch)?;
    let ls = score_paths(&params, &lp, patch)?;
    let hq: Vec<f64> = hs.iter().map(|s| s.0).collect();
    let lq: Vec<f64> = ls.iter().map(|s| s.0).collect();
    let (report, ov) = EvalReport::separation(&hq, &lq, bins)?;
    let frac = ov.fraction;
    println!("overlap {frac:.4} ({bins} bins, {} high, {} low)", hq.len(), lq.len());
    if let Some(dir) = a.out_dir.or_else(|| cfg.paths.out_dir.clone()) {
        let rows: Vec<ScoreRow> = hp
            .iter()
            .zip(&hq)
            .map(|(p, &q)| (format!("high/{}", p.display()), q))
            .chain(lp.iter().zip(&lq).map(|(p, &q)| (format!("low/{}", p.display()), q)))
            .map(|(id, q)| ScoreRow { id, severity: None, q })
            .collect();
        let emb: Vec<(String, Vec<f64>)> = rows.iter().zip(hs.iter().chain(&ls)).map(|(r, s)| (r.id.clone(), s.1.clone())).collect();
        let files = export_report(&report, &rows, &emb, Some(&ov), &dir)?;
        println!("report {}", files.report.display());
    }
    if let Some(t) = a.max_overlap.filter(|t| frac >= *t) {
        bail!(ThresholdFailure(format!("overlap {frac:.4} not below {t}")));
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &Config, a: GradcheckArgs) -> Result<()> {
    let dims = if a.full {
        cfg.dims()?
    } else {
        Dims {
            k: ouiqa::features::FEATURE_DIM,
            h: 10,
            d: 6,
            d_text: 8,
        }
    };
    let preset = if a.full { cfg.model.preset } else { Preset::Custom };
    let loss = LossConfig {
        lambda_emb: cfg.loss.lambda_emb.max(0.5),
        ..cfg.loss.clone()
    };
    let mut worst: Option<(u64, Objective, GradCheck)> = None;
    for seed in a.seed..a.seed + a.seeds {
        let params = random_params(preset, dims, seed);
        let batch = random_batch(dims, a.records, a.patches, seed.wrapping_add(1000));
        let mut fb = batch.clone();
        ouiqa::model::forward(&params, &mut fb)?;
        let q: Vec<f64> = fb.iter().map(|r| r.output().map(|o| o.score)).collect::<ouiqa::Result<_>>()?;
        let d: Vec<f64> = batch.iter().map(|r| r.severity).collect();
        let sel = select(&q, &d, &loss, seed);
        for obj in Objective::ALL {
            let (_, mut g) = ouiqa::model::analytic_gradient(&params, &batch, &loss, obj, &sel)?;
            if a.corrupt {
                g.decision.w[0] = 1.5 * g.decision.w[0] + 1e-3;
            }
            let r = numeric_check(&params, &batch, &loss, obj, &sel, &g, a.eps)?;
            println!(
                "seed {seed} {:8} max rel err {:.3e} at {} ({} entries{})",
                obj.as_str(),
                r.max_rel_err,
                r.worst,
                r.checked,
                match obj {
                    Objective::RankNet if sel.rank.combos.is_empty() => ", no pair-of-pairs",
                    Objective::Edist if sel.emb.combos.is_empty() => ", no pair-of-pairs",
                    _ => "",
                }
            );
            if worst.as_ref().is_none_or(|w| r.max_rel_err > w.2.max_rel_err) {
                worst = Some((seed, obj, r));
            }
        }
    }
    let (seed, obj, r) = worst.ok_or_else(|| ouiqa::Error::InvalidArgument("--seeds must be at least 1".into()))?;
    println!("worst {:.3e} ({} seed {seed}, {})", r.max_rel_err, obj.as_str(), r.worst);
    if r.max_rel_err >= a.tol {
        bail!(ThresholdFailure(format!("max relative error {:.3e} not below {}", r.max_rel_err, a.tol)));
    }
    Ok(())
}

fn cmd_features(cfg: &Config, a: FeaturesArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let g = a.grid.unwrap_or(cfg.data.grid);
    print!("{}", extract_patch_features(&img, g, g)?.to_csv());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let files = ouiqa::synth::write_corpus(&a.out, a.count, a.size, a.seed)?;
    println!("{} images in {}", files.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    let Resolved { mut config, origins } = Config::resolve(cli.config.as_deref(), &overrides(&cli.sets)?)?;
    match cli.cmd {
        Cmd::Degrade(a) => cmd_degrade(&config, a),
        Cmd::Dataset(a) => cmd_dataset(&config, a),
        Cmd::Train(a) => cmd_train(&mut config, a),
        Cmd::Score(a) => cmd_score(&config, a),
        Cmd::Eval(a) => cmd_eval(&config, a),
        Cmd::Separate(a) => cmd_separate(&config, a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&config, a),
        Cmd::Config { action: ConfigAction::Show } => {
            print!("{}", Resolved { config, origins }.show());
            Ok(())
        }
        Cmd::Features(a) => cmd_features(&config, a),
        Cmd::Synth(a) => cmd_synth(a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ThresholdFailure>().is_some() {
        return 4;
    }
    match e.chain().find_map(|c| c.downcast_ref::<ouiqa::Error>()) {
        Some(he) if he.is_validation() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
