//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ouiqa::config::Config;
use ouiqa::data::{build_manifest, prepare_all, Manifest, ManifestRecord};
use ouiqa::distort::{apply_step, degrade, energy, laplacian_energy, sample_recipe, DistortionStep, Recipe, Registry, LEVELS};
use ouiqa::eval::{overlap, plcc, scores_from_csv, scores_to_csv, srocc, ScoreRow, DEFAULT_BINS};
use ouiqa::features::{extract_patch_features, FEATURE_DIM};
use ouiqa::imgproc::{load_image, random_crop, Image};
use ouiqa::losses::{
    align_loss, build_combos, cov_loss, edist_with, margin_loss, mreg_loss, pairwise_ranknet_loss, ranknet_loss,
    ranknet_with, edist_loss, LabelRule, LossConfig, Pair, PairSet, RankingVariant,
};
use ouiqa::model::{
    grad_check, load_checkpoint, random_batch, random_params, save_checkpoint, score_grid, Affine, AdamState,
    BatchRecord, Dims, Objective, Preset, ScorerParams,
};
use ouiqa::prompts::{load_embeddings, EmbeddingTable};
use ouiqa::rng::{derive_seed, SplitMix64};
use ouiqa::train::{train, write_log, StepRecord, TrainSettings};

const TRAIN_IMAGES: usize = 50;
const HELD_OUT_IMAGES: usize = 20;
const IMAGE_SIZE: usize = 192;
const HELD_OUT_MASTER_SEED: u64 = 99;
/// Real-world conditions of the qualitative sweep, mapped to registry kinds
/// before any training: haze, motion blur, flare, low light.
const SWEEP_KINDS: [&str; 4] = ["contrast-reduce", "motion-blur", "brightness-raise", "brightness-lower"];

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn main() {
    let mut r = Report { failed: 0 };
    gradient_correctness(&mut r);
    brute_force_oracles(&mut r);
    analytic_values(&mut r);
    metric_identities(&mut r);
    degradation_determinism(&mut r);
    match Toy::new() {
        Ok(toy) => toy.run_all(&mut r),
        Err(e) => r.line("toy pipeline", false, format!("setup failed: {e}")),
    }
    println!("{} criteria failed", r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}

fn gradient_correctness(r: &mut Report) {
    let t0 = Instant::now();
    let dims = Dims {
        k: FEATURE_DIM,
        h: 10,
        d: 6,
        d_text: 8,
    };
    let loss = LossConfig {
        lambda_emb: 0.5,
        ..LossConfig::default()
    };
    let mut worst = (0.0, String::new());
    let mut entries = 0;
    for seed in 0..20u64 {
        let params = random_params(Preset::Custom, dims, seed);
        let batch = random_batch(dims, 4, 4, seed + 1000);
        for obj in Objective::ALL {
            match grad_check(&params, &batch, 1e-4, &loss, obj, seed) {
                Ok(g) => {
                    entries += g.checked;
                    if g.max_rel_err > worst.0 {
                        worst = (g.max_rel_err, format!("{} seed {seed} {}", obj.as_str(), g.worst));
                    }
                }
                Err(e) => worst = (f64::INFINITY, format!("{} seed {seed}: {e}", obj.as_str())),
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    r.line(
        "gradient correctness",
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "worst relative error {:.2e} (< 1e-4) at {}; 20 seeds x 6 objectives, {entries} entries checked in {secs:.1} s (< 60 s)",
            worst.0, worst.1
        ),
    );
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn brute_force_oracles(r: &mut Report) {
    let mut rng = SplitMix64::new(2024);
    let mut worst: f64 = 0.0;
    for b in 0..200 {
        let n = 2 + rng.below(5) as usize;
        // every other batch sits on a coarse grid so tied gaps occur
        let draw = |rng: &mut SplitMix64| {
            let v = rng.next_f64();
            if b % 2 == 0 {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        };
        let q: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let d: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| unit((0..4).map(|_| rng.normal()).collect())).collect();
        let (t, tau) = (0.3 * rng.next_f64(), 0.2 + rng.next_f64());
        let diffs = [
            ranknet_loss(&q, &d, t, usize::MAX, 0).value - common::ranknet(&q, &d, t),
            mreg_loss(&q, &d).value - common::mreg(&q, &d),
            edist_loss(&emb, &q, t, tau, usize::MAX, 0).value - common::edist(&emb, &q, t, tau),
            pairwise_ranknet_loss(&q, &d, t).value - common::pairwise(&q, &d, t),
            margin_loss(&q, &d, t, 0.1).value - common::margin(&q, &d, t, 0.1),
        ];
        worst = diffs.iter().fold(worst, |w, x| w.max(x.abs()));
    }
    r.line(
        "brute-force loss oracles",
        worst <= 1e-10,
        format!("max |library - enumeration| {worst:.1e} (<= 1e-10) over 200 batches of 2..6, 5 pair-based losses"),
    );
}

fn two_pair_set(first: (usize, usize, f64), second: (usize, usize, f64), rule: LabelRule) -> ouiqa::losses::PairOfPairsSet {
    let pair = |(i, j, gap)| Pair { i, j, gap };
    let pairs = PairSet {
        pairs: vec![pair(first), pair(second)],
        threshold: 0.0,
    };
    build_combos(pairs, rule, usize::MAX, 0)
}

fn analytic_values(r: &mut Report) {
    let sp = |x: f64| (1.0 + x.exp()).ln();
    let e = std::f64::consts::E;
    let mut cases: Vec<(&str, f64, f64)> = Vec::new();

    let d = [0.0, 0.2, 0.1, 0.9];
    cases.push(("ranknet, equal scores", ranknet_loss(&[0.5; 4], &d, 0.1, usize::MAX, 0).value, LN_2));
    let set = two_pair_set((0, 1, 1.0), (2, 3, 0.2), LabelRule::LargerGap);
    cases.push((
        "ranknet, score gaps (6, 0)",
        ranknet_with(&[0.0, 6.0, 3.0, 3.0], &set).value,
        (sp(-6.0) + LN_2) / 2.0,
    ));
    cases.push(("mreg, q=(0,1) d=(1,0)", mreg_loss(&[0.0, 1.0], &[1.0, 0.0]).value, sp(-1.0)));
    cases.push(("mreg, q=(0,1) d=(0,1)", mreg_loss(&[0.0, 1.0], &[0.0, 1.0]).value, sp(1.0)));
    let set = two_pair_set((0, 1, 0.2), (2, 3, 0.6), LabelRule::SmallerGap);
    cases.push((
        "edist, identical embeddings",
        edist_with(&vec![vec![1.0, 0.0]; 4], 1.0, &set).value,
        (sp(-e) + sp(e)) / 2.0,
    ));
    let emb3 = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    cases.push(("cov, N=3 D=2", cov_loss(&emb3).map(|c| c.0).unwrap_or(f64::NAN), 1.0 / 72.0));
    let mut ident = Affine::zeros(2, 2);
    ident.w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    cases.push((
        "align, N=1",
        align_loss(&eye[..1], &eye[..1], &ident, 1.0).map(|a| a.value).unwrap_or(f64::NAN),
        0.0,
    ));
    cases.push((
        "align, N=2 at tau = ln 10",
        align_loss(&eye, &eye, &ident, 10f64.ln()).map(|a| a.value).unwrap_or(f64::NAN),
        -(10f64.exp() / (10f64.exp() + 1.0)).ln(),
    ));
    let s = [0.2, 0.4, 0.9];
    cases.push(("overlap, identical sets", overlap(&s, &s, 10).map(|o| o.fraction).unwrap_or(f64::NAN), 1.0));

    let worst = cases.iter().map(|c| (c.1 - c.2).abs()).fold(0.0, f64::max);
    let bad: Vec<&str> = cases.iter().filter(|c| !((c.1 - c.2).abs() <= 1e-9)).map(|c| c.0).collect();
    r.line(
        "analytic loss values",
        bad.is_empty(),
        format!("{} cases, max deviation {worst:.1e} (<= 1e-9){}", cases.len(), failures(&bad)),
    );
}

fn failures(bad: &[&str]) -> String {
    if bad.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", bad.join(", "))
    }
}

fn metric_identities(r: &mut Report) {
    let up = [0.1, 0.3, 0.35, 0.8, 1.2];
    let ref_up = [1.0, 2.0, 3.0, 4.0, 5.0];
    let ref_down = [5.0, 4.0, 3.0, 2.0, 1.0];
    let ok = |v: ouiqa::Result<f64>, want: f64| v.is_ok_and(|v| (v - want).abs() < 1e-12);
    let mut bad = Vec::new();
    if !(ok(srocc(&up, &ref_up), 1.0) && ok(srocc(&up, &ref_down), -1.0)) {
        bad.push("srocc +-1");
    }
    if !(ok(plcc(&ref_up, &ref_up), 1.0) && ok(plcc(&ref_up, &ref_down), -1.0)) {
        bad.push("plcc +-1");
    }
    if !ok(srocc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]), 0.8) {
        bad.push("srocc example 0.8");
    }
    let mut rng = SplitMix64::new(7);
    let mut violations = 0;
    for case in 0..1000 {
        let n = 3 + rng.below(30) as usize;
        let p: Vec<f64> = (0..n).map(|_| (rng.below(200) as f64 - 100.0) / 10.0).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let (a, b) = (0.1 + 5.0 * rng.next_f64(), 10.0 * rng.normal());
        let affine: Vec<f64> = p.iter().map(|x| a * x + b).collect();
        let cubic: Vec<f64> = p.iter().map(|x| x.powi(3) + x).collect();
        let s0 = srocc(&p, &q);
        let p0 = plcc(&p, &q);
        let held = match (s0, p0) {
            (Ok(s0), Ok(p0)) => {
                srocc(&cubic, &q).is_ok_and(|s| (s - s0).abs() < 1e-12)
                    && srocc(&affine, &q).is_ok_and(|s| (s - s0).abs() < 1e-12)
                    && plcc(&affine, &q).is_ok_and(|v| (v - p0).abs() < 1e-9)
            }
            // a constant draw is undefined before and after the transform
            (Err(_), _) | (_, Err(_)) => srocc(&cubic, &q).is_err(),
        };
        if !held {
            violations += 1;
            if violations == 1 {
                eprintln!("monotone-transform violation in case {case}");
            }
        }
    }
    if violations > 0 {
        bad.push("monotone-transform invariance");
    }
    r.line(
        "metric identities",
        bad.is_empty(),
        format!("+-1 identities, srocc example, {violations}/1000 invariance violations{}", failures(&bad)),
    );
}

fn bits(img: &Image) -> Vec<u32> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

fn degradation_determinism(r: &mut Report) {
    use rayon::prelude::*;
    let reg = Registry::builtin();
    let imgs: Vec<Image> = (0..10).map(|s| ouiqa::synth::synth_image(96, 96, 500 + s)).collect();
    let jobs: Vec<(usize, Recipe)> = (0..40u64)
        .map(|s| ((s % 10) as usize, sample_recipe(reg, s, 7, 0.3).expect("recipe")))
        .collect();
    let run = |threads: usize| -> Vec<Vec<u32>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
        pool.install(|| jobs.par_iter().map(|(i, rc)| bits(&degrade(reg, &imgs[*i], rc).expect("degrade"))).collect())
    };
    let first = run(1);
    let deterministic = first == run(1) && first == run(3);

    let rows_exact = reg.kinds().iter().all(|k| {
        (1..=LEVELS).all(|l| {
            k.level_params(l as f64)
                .is_ok_and(|p| p.iter().map(|(_, v)| v).collect::<Vec<_>>() == k.rows[l - 1])
        })
    });

    let mut sweep_ok = 0;
    for img in &imgs {
        let e: Vec<f64> = [4.0, 4.25, 4.5, 4.75, 5.0]
            .iter()
            .map(|&l| laplacian_energy(&apply_step(reg, img, &DistortionStep::new("motion-blur", l), 0).expect("blur")))
            .collect();
        if e.windows(2).all(|w| w[1] <= w[0]) {
            sweep_ok += 1;
        }
    }
    let mut kinds_ok = 0;
    for k in reg.kinds() {
        let monotone = imgs.iter().all(|img| {
            let e: Vec<f64> = (1..=LEVELS)
                .map(|l| energy(k.energy, &apply_step(reg, img, &DistortionStep::new(k.id.clone(), l as f64), 3).expect("step"), img))
                .collect();
            e.windows(2).all(|w| w[1] > w[0]) || e.windows(2).all(|w| w[1] < w[0])
        });
        kinds_ok += usize::from(monotone);
    }
    let n_kinds = reg.kinds().len();
    r.line(
        "degradation determinism and continuity",
        deterministic && rows_exact && sweep_ok == imgs.len() && kinds_ok == n_kinds,
        format!(
            "bit-identical over 2 runs and 1/3 workers: {deterministic}; integer levels equal table rows: {rows_exact}; \
             motion-blur sweep 4..5 nonincreasing Laplacian energy on {sweep_ok}/{} images; \
             declared energy monotone over levels 1..5 for {kinds_ok}/{n_kinds} kinds",
            imgs.len()
        ),
    );
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Toy {
    cfg: Config,
    _dir: tempfile::TempDir,
    held_dir: PathBuf,
    manifest: Manifest,
    held: Manifest,
    train_data: Vec<BatchRecord>,
    held_data: Vec<BatchRecord>,
    prep_secs: f64,
}

struct Run {
    params: ScorerParams,
    state: AdamState,
    log: Vec<StepRecord>,
    q: Vec<f64>,
    srocc: f64,
    plcc: f64,
    secs: f64,
}

impl Toy {
    fn new() -> ouiqa::Result<Self> {
        let t0 = Instant::now();
        let cfg = Config::load(&workspace_root().join("configs/toy.toml"))?;
        let dir = tempfile::tempdir().map_err(|e| ouiqa::Error::io(Path::new("tempdir"), e))?;
        let (train_dir, held_dir) = (dir.path().join("train"), dir.path().join("held"));
        ouiqa::synth::write_corpus(&train_dir, TRAIN_IMAGES, IMAGE_SIZE, 1)?;
        ouiqa::synth::write_corpus(&held_dir, HELD_OUT_IMAGES, IMAGE_SIZE, 2)?;
        let reg = Registry::builtin();
        let manifest = build_manifest(reg, &train_dir, &cfg.dataset())?;
        let mut held_cfg = cfg.dataset();
        held_cfg.master_seed = HELD_OUT_MASTER_SEED;
        let held = build_manifest(reg, &held_dir, &held_cfg)?;
        let prep = cfg.prep();
        let train_data = prepare_all(reg, &manifest.records, &prep)?;
        let held_data = prepare_all(reg, &held.records, &prep)?;
        Ok(Self {
            cfg,
            _dir: dir,
            held_dir,
            manifest,
            held,
            train_data,
            held_data,
            prep_secs: t0.elapsed().as_secs_f64(),
        })
    }

    fn train_with(&self, loss: LossConfig) -> ouiqa::Result<Run> {
        let t0 = Instant::now();
        let c = &self.cfg;
        let mut params = ScorerParams::new(c.model.preset, c.dims()?, c.model.init_seed);
        let settings = TrainSettings {
            batch_size: c.train.batch_size,
            epochs: c.train.epochs,
            hyper: c.adam(0),
            loss,
            master_seed: self.manifest.header.config.master_seed,
            seed: c.train.seed,
        };
        let (state, log) = train(&mut params, &self.train_data, &settings, |_| {})?;
        let q = self
            .held_data
            .iter()
            .map(|b| score_grid(&params, &b.features).map(|s| s.0))
            .collect::<ouiqa::Result<Vec<f64>>>()?;
        let reference: Vec<f64> = self.held.records.iter().map(|r| 1.0 - r.severity).collect();
        Ok(Run {
            srocc: srocc(&q, &reference)?,
            plcc: plcc(&q, &reference)?,
            params,
            state,
            log,
            q,
            secs: t0.elapsed().as_secs_f64(),
        })
    }

    fn run_all(&self, r: &mut Report) {
        let base = self.cfg.loss.clone();
        let variant = |align: bool, embdist: bool, ranking: RankingVariant| LossConfig {
            align,
            embdist,
            ranking,
            ..base.clone()
        };
        let primary = match self.train_with(variant(true, true, RankingVariant::PairOfPairs)) {
            Ok(run) => run,
            Err(e) => {
                r.line("toy training run", false, format!("training failed: {e}"));
                return;
            }
        };
        let total = self.prep_secs + primary.secs;
        r.line(
            "toy training run",
            primary.srocc >= 0.80 && primary.plcc >= 0.75 && total < 600.0,
            format!(
                "held-out SROCC {:.4} (>= 0.80), PLCC {:.4} (>= 0.75) on {} records; {} steps, {total:.1} s incl. data preparation (< 600 s)",
                primary.srocc,
                primary.plcc,
                self.held_data.len(),
                primary.log.len()
            ),
        );

        let srocc_of = |loss: LossConfig| self.train_with(loss).map(|x| x.srocc).unwrap_or(f64::NAN);
        let c1 = srocc_of(variant(false, false, RankingVariant::PairOfPairs));
        let c2 = srocc_of(variant(false, true, RankingVariant::PairOfPairs));
        let c3 = srocc_of(variant(true, false, RankingVariant::PairOfPairs));
        let c4 = primary.srocc;
        r.line(
            "ablation direction",
            c4 >= c3 && c3 >= c1 && c4 >= c2 && c2 >= c1,
            format!(
                "SROCC ranking only {c1:.4}, +embedding distance {c2:.4}, +alignment {c3:.4}, all {c4:.4}; \
                 need all >= +alignment >= ranking only and all >= +embedding distance >= ranking only"
            ),
        );

        let pairwise = srocc_of(variant(true, true, RankingVariant::Pairwise));
        let margin = srocc_of(variant(true, true, RankingVariant::Margin));
        r.line(
            "ranking-variant direction",
            c4 >= margin && margin >= pairwise,
            format!("SROCC pair-of-pairs {c4:.4} >= margin {margin:.4} >= pairwise RankNet {pairwise:.4}"),
        );

        self.separation(r, &primary);
        self.score_sweep(r, &primary);
        lambda_schedule(r, &primary, self.cfg.loss.lambda_emb);
        self.round_trips(r, &primary);
    }

    fn clean_crops(&self) -> ouiqa::Result<Vec<Image>> {
        let files = ouiqa::data::list_corpus(&self.held_dir)?;
        files
            .iter()
            .enumerate()
            .map(|(i, p)| random_crop(&load_image(p)?, self.cfg.data.crop_size, derive_seed(HELD_OUT_MASTER_SEED, 1000 + i as u64)))
            .collect()
    }

    fn score(&self, params: &ScorerParams, img: &Image) -> ouiqa::Result<f64> {
        let g = self.cfg.data.grid;
        Ok(score_grid(params, &extract_patch_features(img, g, g)?)?.0)
    }

    fn separation(&self, r: &mut Report, run: &Run) {
        let result = (|| -> ouiqa::Result<(f64, usize)> {
            let reg = Registry::builtin();
            let clean = self.clean_crops()?;
            let kinds = reg.kinds();
            let mut high = Vec::new();
            let mut low = Vec::new();
            for (i, img) in clean.iter().enumerate() {
                high.push(self.score(&run.params, img)?);
                let step = DistortionStep::new(kinds[i % kinds.len()].id.clone(), LEVELS as f64);
                let bad = apply_step(reg, img, &step, derive_seed(7, i as u64))?;
                low.push(self.score(&run.params, &bad)?);
            }
            Ok((overlap(&high, &low, DEFAULT_BINS)?.fraction, clean.len()))
        })();
        match result {
            Ok((frac, n)) => r.line(
                "separation",
                frac < 0.20,
                format!("histogram overlap {frac:.4} (< 0.20, {DEFAULT_BINS} bins) between {n} clean and {n} level-5 crops"),
            ),
            Err(e) => r.line("separation", false, format!("failed: {e}")),
        }
    }

    fn score_sweep(&self, r: &mut Report, run: &Run) {
        let result = (|| -> ouiqa::Result<(usize, usize, Vec<String>)> {
            let reg = Registry::builtin();
            let clean = self.clean_crops()?;
            let (mut ok, mut total) = (0, 0);
            let mut per_kind = Vec::new();
            for kind in SWEEP_KINDS {
                let mut kind_ok = 0;
                for (i, img) in clean.iter().take(10).enumerate() {
                    let q = (1..=LEVELS)
                        .map(|l| {
                            let out = apply_step(reg, img, &DistortionStep::new(kind, l as f64), derive_seed(11, i as u64))?;
                            self.score(&run.params, &out)
                        })
                        .collect::<ouiqa::Result<Vec<f64>>>()?;
                    let good = q.windows(2).filter(|w| w[1] <= w[0]).count();
                    kind_ok += good;
                    ok += good;
                    total += LEVELS - 1;
                }
                per_kind.push(format!("{kind} {kind_ok}/{}", 10 * (LEVELS - 1)));
            }
            Ok((ok, total, per_kind))
        })();
        match result {
            Ok((ok, total, per_kind)) => {
                let frac = ok as f64 / total as f64;
                r.line(
                    "monotonic score sweep",
                    frac >= 0.90,
                    format!("{ok}/{total} adjacent level pairs nonincreasing ({:.1}%, need >= 90%): {}", 100.0 * frac, per_kind.join(", ")),
                );
            }
            Err(e) => r.line("monotonic score sweep", false, format!("failed: {e}")),
        }
    }

    fn round_trips(&self, r: &mut Report, run: &Run) {
        let result = (|| -> ouiqa::Result<Vec<(&'static str, bool)>> {
            let dir = tempfile::tempdir().map_err(|e| ouiqa::Error::io(Path::new("tempdir"), e))?;
            let twice = |path: &Path, save: &dyn Fn(&Path) -> ouiqa::Result<()>, resave: &dyn Fn(&Path) -> ouiqa::Result<()>| -> ouiqa::Result<bool> {
                save(path)?;
                let first = std::fs::read(path).map_err(|e| ouiqa::Error::io(path, e))?;
                resave(path)?;
                Ok(first == std::fs::read(path).map_err(|e| ouiqa::Error::io(path, e))?)
            };

            let mut table = EmbeddingTable::new(self.cfg.model.d_text);
            for b in &self.held_data {
                table.insert(&b.id, b.prompt_emb.iter().map(|&v| v as f32).collect())?;
            }
            let width = table.width;
            let hrqe = twice(
                &dir.path().join("prompts.hrqe"),
                &|p| table.save(p),
                &|p| load_embeddings(p, Some(width))?.save(p),
            )?;

            let hrqm = twice(
                &dir.path().join("model.hrqm"),
                &|p| save_checkpoint(p, &run.params, Some(&run.state)),
                &|p| {
                    let (params, state) = load_checkpoint(p)?;
                    save_checkpoint(p, &params, state.as_ref())
                },
            )?;

            let manifest = twice(
                &dir.path().join("held.jsonl"),
                &|p| self.held.save(p),
                &|p| Manifest::load(p)?.save(p),
            )?;

            let rows: Vec<ScoreRow> = self
                .held
                .records
                .iter()
                .zip(&run.q)
                .map(|(rec, &q): (&ManifestRecord, &f64)| ScoreRow {
                    id: rec.id.clone(),
                    severity: Some(rec.severity),
                    q,
                })
                .collect();
            let write = |p: &Path, rows: &[ScoreRow]| -> ouiqa::Result<()> {
                std::fs::write(p, scores_to_csv(rows)?).map_err(|e| ouiqa::Error::io(p, e))
            };
            let csv = twice(
                &dir.path().join("scores.csv"),
                &|p| write(p, &rows),
                &|p| {
                    let text = std::fs::read_to_string(p).map_err(|e| ouiqa::Error::io(p, e))?;
                    write(p, &scores_from_csv(&text)?)
                },
            )?;
            Ok(vec![("HRQE", hrqe), ("HRQM", hrqm), ("manifest", manifest), ("scores CSV", csv)])
        })();
        match result {
            Ok(checks) => {
                let bad: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
                let names: Vec<&str> = checks.iter().map(|c| c.0).collect();
                r.line(
                    "file-format round-trips",
                    bad.is_empty(),
                    format!("save, load, save byte-identical for {}{}", names.join(", "), failures(&bad)),
                );
            }
            Err(e) => r.line("file-format round-trips", false, format!("failed: {e}")),
        }
    }
}

fn lambda_schedule(r: &mut Report, run: &Run, final_value: f64) {
    let result = (|| -> ouiqa::Result<(usize, usize, bool, f64)> {
        let dir = tempfile::tempdir().map_err(|e| ouiqa::Error::io(Path::new("tempdir"), e))?;
        let path = dir.path().join("train.log.csv");
        write_log(&path, &run.log)?;
        let mut reader = csv::Reader::from_path(&path).map_err(|e| ouiqa::Error::Format(e.to_string()))?;
        let header = reader.headers().map_err(|e| ouiqa::Error::Format(e.to_string()))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| ouiqa::Error::Format(format!("no column {name}")));
        let (ce, cl) = (col("epoch")?, col("lambda_emb")?);
        let mut first = Vec::new();
        let mut later = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| ouiqa::Error::Format(e.to_string()))?;
            let epoch: usize = rec[ce].parse().map_err(|_| ouiqa::Error::Format("epoch".into()))?;
            let lam: f64 = rec[cl].parse().map_err(|_| ouiqa::Error::Format("lambda_emb".into()))?;
            if epoch == 1 { first.push(lam) } else { later.push(lam) }
        }
        let zero = first.iter().all(|&l| l == 0.0);
        let increasing = later.windows(2).all(|w| w[1] > w[0]) && later.first().is_some_and(|&l| l > 0.0);
        Ok((first.len(), later.len(), zero && increasing, later.last().copied().unwrap_or(f64::NAN)))
    })();
    match result {
        Ok((n1, n2, ok, last)) => r.line(
            "lambda schedule",
            ok && n1 > 0 && n2 > 0,
            format!("training log: {n1} epoch-1 steps at 0, then {n2} strictly increasing steps ending at {last} (final value {final_value})"),
        ),
        Err(e) => r.line("lambda schedule", false, format!("failed: {e}")),
    }
}
