//! Subcommand bodies. Each returns the artifacts it wrote, relative to the output directory.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use debiasmf::bilevel::{closed_form_val_grad, estimated_exposure_matrix, train_with_hook, tune_weight_decay, BilevelConfig, Method, OptimizerKind};
use debiasmf::checks::{
    closed_form_check, hyper_instance, positive_only_hypergradient, sign_case, variance_study as run_variance,
    VarianceRow, VARIANCE_GAMMAS, VARIANCE_MS, VARIANCE_PS,
};
use debiasmf::data::{
    generate_base_ratings, generate_semi_synthetic, load_ratings, prepare_splits, read_ground_truth, read_rating_records,
    read_split_manifest, sample_relevance_test, write_ground_truth, write_ratings, write_split_manifest, BaseRatingsConfig, Dataset,
    ExposureRecipe, Interaction, PairUniverse, RelevanceRecipe, SplitAssignment, SynthConfig,
};
use debiasmf::estimators::{McSampling, DEFAULT_CLIP_FLOOR};
use debiasmf::exposure::PopularityTable;
use debiasmf::metrics::{evaluate as score, mean_user_pcc, MetricReport, DEFAULT_KS};
use debiasmf::model::Checkpoint;
use debiasmf::GroundTruth;

use crate::settings::Settings;

const DATA_CONFIG: &str = "data.cfg";

/// Layers `data.cfg` from the data directory underneath `s`.
pub fn with_data_defaults(s: Settings) -> Result<Settings> {
    let dir: PathBuf = s.require("data")?;
    let cfg = dir.join(DATA_CONFIG);
    if !cfg.exists() {
        return Ok(s);
    }
    let mut base = Settings::load(&cfg)?;
    base.overlay(s);
    Ok(base)
}

fn seed(s: &Settings) -> Result<u64> {
    s.get("seed", 0)
}

pub fn generate(s: &Settings, out: &Path) -> Result<Vec<String>> {
    let seed = seed(s)?;
    let threshold: f64 = s.get("threshold", 4.0)?;
    let active_fraction = s.get("active_fraction", 0.2)?;
    let hyper_fraction: f64 = s.get("hyper_fraction", 0.1)?;
    let hyper = (hyper_fraction > 0.0).then_some(hyper_fraction);

    let (ds, truth, test, mode, universe) = match s.get_opt::<PathBuf>("test_ratings")? {
        Some(test_path) => {
            let ratings: PathBuf = s.require("ratings")?;
            let ds = load_ratings(&ratings, threshold)?;
            let test = map_test_ratings(&ds, &test_path, threshold)?;
            (ds, None, test, "passthrough", PairUniverse::Observed)
        }
        None => {
            let base = match s.get_opt::<PathBuf>("ratings")? {
                Some(p) => load_ratings(&p, threshold)?,
                None => {
                    let d = BaseRatingsConfig::default();
                    let cfg = BaseRatingsConfig {
                        n_users: s.get("base_users", d.n_users)?,
                        n_items: s.get("base_items", d.n_items)?,
                        density: s.get("base_density", d.density)?,
                        positive_threshold: threshold,
                        ..d
                    };
                    generate_base_ratings(&cfg, seed)?
                }
            };
            let synth = synth_config(s)?;
            let (ds, truth) = generate_semi_synthetic::<f64>(&base, &synth, seed)?;
            let test = sample_relevance_test(&truth, s.get("test_items_per_user", 10)?, seed)?;
            (ds, Some(truth), test, "semi_synthetic", PairUniverse::Full)
        }
    };
    let splits = prepare_splits(&ds, test, active_fraction, hyper, seed)?;

    let mut artifacts = vec!["ratings.tsv".to_owned(), "splits.tsv".to_owned()];
    write_ratings(&ds, out.join("ratings.tsv"))?;
    write_split_manifest(&ds, &splits, out.join("splits.tsv"))?;
    if let Some(truth) = &truth {
        write_ground_truth(&ds, truth, out.join("ground_truth.tsv"))?;
        artifacts.push("ground_truth.tsv".into());
    }
    let universe = match universe {
        PairUniverse::Full => "full",
        PairUniverse::Observed => "observed",
    };
    fs::write(
        out.join(DATA_CONFIG),
        format!("mode={mode}\nthreshold={}\npair_universe={universe}\n", ds.positive_threshold()),
    )?;
    artifacts.push(DATA_CONFIG.into());
    println!(
        "{mode}: {} users, {} items, {} records ({} positive); train {}, unbiased val {}, hyper val {}, test {}",
        ds.n_users(),
        ds.n_items(),
        ds.interactions().len(),
        ds.n_positive(),
        splits.train.len(),
        splits.unbiased_val.len(),
        splits.hyper_val.len(),
        splits.test.len()
    );
    Ok(artifacts)
}

fn synth_config(s: &Settings) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let (RelevanceRecipe::FromRatings { scale, offset }, ExposureRecipe::Popularity { item_power, user_power, activity_floor, min_exposure }) =
        (d.relevance, d.exposure)
    else {
        unreachable!("default recipes are rating and popularity based")
    };
    let relevance = match s.get_opt::<f64>("gamma_const")? {
        Some(g) => RelevanceRecipe::Constant(g),
        None => RelevanceRecipe::FromRatings {
            scale: s.get("relevance_scale", scale)?,
            offset: s.get("relevance_offset", offset)?,
        },
    };
    let exposure = match s.get_opt::<f64>("m_const")? {
        Some(m) => ExposureRecipe::Constant(m),
        None => ExposureRecipe::Popularity {
            item_power: s.get("item_power", item_power)?,
            user_power: s.get("user_power", user_power)?,
            activity_floor: s.get("activity_floor", activity_floor)?,
            min_exposure: s.get("min_exposure", min_exposure)?,
        },
    };
    Ok(SynthConfig {
        min_user_interactions: s.get("min_user_interactions", d.min_user_interactions)?,
        min_item_interactions: s.get("min_item_interactions", d.min_item_interactions)?,
        max_users: s.get("max_users", d.max_users)?,
        max_items: s.get("max_items", d.max_items)?,
        relevance,
        exposure,
    })
}

/// Maps real test ratings onto the training ids; unknown ids are dropped.
fn map_test_ratings(ds: &Dataset, path: &Path, threshold: f64) -> Result<Vec<Interaction>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_rating_records(BufReader::new(file), path)?;
    let users: HashMap<&str, usize> = ds.user_ids().iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let items: HashMap<&str, usize> = ds.item_ids().iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut seen = HashSet::new();
    let mut test = Vec::new();
    let mut skipped = 0usize;
    for r in &records {
        match (users.get(r.user_id.as_str()), items.get(r.item_id.as_str())) {
            (Some(&u), Some(&i)) => {
                if !seen.insert((u, i)) {
                    bail!("{}:{}: duplicate test pair ({}, {})", path.display(), r.line, r.user_id, r.item_id);
                }
                test.push(Interaction::new(u, i, r.rating >= threshold));
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} test ratings with ids unseen in training", path.display());
    }
    if test.is_empty() {
        bail!("{}: no test ratings match the training ids", path.display());
    }
    Ok(test)
}

struct Data {
    ds: Dataset,
    splits: SplitAssignment,
    truth: Option<GroundTruth>,
}

fn load_data(s: &Settings) -> Result<Data> {
    let dir: PathBuf = s.require("data")?;
    let mut ds = load_ratings(dir.join("ratings.tsv"), s.get("threshold", 4.0)?)?;
    ds.pair_universe = s.get("pair_universe", PairUniverse::Full)?;
    let splits = read_split_manifest(&ds, dir.join("splits.tsv"))?;
    let gt = dir.join("ground_truth.tsv");
    let truth = if gt.exists() { Some(read_ground_truth(&ds, &gt)?) } else { None };
    Ok(Data { ds, splits, truth })
}

fn methods(s: &Settings, default: Vec<Method>) -> Result<Vec<Method>> {
    match s.raw("methods") {
        Some("all") => Ok(Method::ALL.to_vec()),
        _ => s.list("methods", default),
    }
}

fn bilevel_config(s: &Settings) -> Result<BilevelConfig> {
    let d = BilevelConfig::default();
    Ok(BilevelConfig {
        inner_lr: s.get("inner_lr", d.inner_lr)?,
        outer_lr: s.get("outer_lr", d.outer_lr)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        epochs: s.get("epochs", d.epochs)?,
        seed: seed(s)?,
        weight_decay: s.get("weight_decay", d.weight_decay)?,
        optimizer: s.get::<OptimizerKind>("optimizer", d.optimizer)?,
        dim: s.get("dim", d.dim)?,
        init_scale: s.get("init_scale", d.init_scale)?,
        clip_floor: s.get("clip_floor", d.clip_floor)?,
        ks: s.list("ks", d.ks)?,
        pcc_iterations: s.get("pcc_iterations", d.pcc_iterations)?,
    })
}

fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.as_str()).join(format!("seed_{seed}"))
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

pub fn train(s: &Settings, out: &Path) -> Result<Vec<String>> {
    let data = load_data(s)?;
    let base = bilevel_config(s)?;
    let methods = methods(s, vec![Method::Ubo])?;
    let seeds = s.list("seeds", vec![base.seed])?;
    let candidates: Vec<f64> = s.list("tune_weight_decay", vec![])?;
    let every: usize = s.get("checkpoint_every", 0)?;
    let mut artifacts = Vec::new();
    for &method in &methods {
        for &seed in &seeds {
            let mut cfg = BilevelConfig { seed, ..base.clone() };
            if !candidates.is_empty() {
                let sel = tune_weight_decay::<f64>(method, &data.ds, &data.splits, &cfg, &candidates)
                    .with_context(|| format!("tuning weight decay for {method}, seed {seed}"))?;
                println!("{method} seed {seed}: selected weight_decay={}", sel.best);
                cfg.weight_decay = sel.best;
            }
            let dir = run_dir(out, method, seed);
            fs::create_dir_all(&dir)?;
            let outcome = train_with_hook::<f64>(method, &data.ds, &data.splits, &cfg, data.truth.as_ref(), &mut |epoch, model, ex| {
                if every > 0 && epoch % every == 0 && epoch < cfg.epochs {
                    let path = dir.join(format!("checkpoint_epoch_{epoch}.bin"));
                    Checkpoint { model: model.clone(), exposure: ex.cloned() }.write(&path)?;
                    artifacts.push(relative(out, &path));
                }
                Ok(())
            })
            .with_context(|| format!("training {method} with seed {seed}"))?;

            let ckpt = dir.join("checkpoint.bin");
            Checkpoint { model: outcome.model, exposure: outcome.exposure }.write(&ckpt)?;
            let trace = dir.join("trace.jsonl");
            fs::write(&trace, outcome.trace.to_jsonl())?;
            artifacts.push(relative(out, &ckpt));
            artifacts.push(relative(out, &trace));
            if let Some(last) = outcome.trace.epochs().last() {
                let metrics: Vec<String> = last.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("{method} seed {seed}: epoch {} train_loss={:.6} {}", last.epoch, last.train_loss, metrics.join(" "));
            }
        }
    }
    Ok(artifacts)
}

/// Seeds with a `seed_<n>` directory under `dir`, ascending.
fn discover_seeds(dir: &Path) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(n) = name.to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|n| n.parse().ok()) {
            seeds.push(n);
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

pub fn evaluate(s: &Settings, out: &Path) -> Result<Vec<String>> {
    let data = load_data(s)?;
    let runs: PathBuf = s.get("runs", out.to_path_buf())?;
    let ks: Vec<usize> = s.list("ks", DEFAULT_KS.to_vec())?;
    let clip: f64 = s.get("clip_floor", DEFAULT_CLIP_FLOOR)?;
    let present: Vec<Method> = Method::ALL.into_iter().filter(|m| runs.join(m.as_str()).is_dir()).collect();
    let methods = methods(s, present)?;
    if methods.is_empty() {
        bail!("no trained runs under {}", runs.display());
    }
    let explicit_seeds: Option<Vec<u64>> = s.raw("seeds").map(|_| s.list("seeds", vec![])).transpose()?;
    let theta = PopularityTable::<f64>::from_pairs(data.ds.n_items(), &data.splits.train)?;

    let mut report = MetricReport::default();
    for &method in &methods {
        let seeds = match &explicit_seeds {
            Some(v) => v.clone(),
            None => discover_seeds(&runs.join(method.as_str()))?,
        };
        if seeds.is_empty() {
            bail!("no seeds trained for {method} under {}", runs.display());
        }
        for seed in seeds {
            let path = run_dir(&runs, method, seed).join("checkpoint.bin");
            if !path.exists() {
                bail!("missing checkpoint for {method} seed {seed}: {}", path.display());
            }
            let ckpt = Checkpoint::<f64>::read(&path)?;
            if ckpt.model.n_users() != data.ds.n_users() || ckpt.model.n_items() != data.ds.n_items() {
                bail!(
                    "checkpoint {} is {}x{} but the data is {}x{}",
                    path.display(),
                    ckpt.model.n_users(),
                    ckpt.model.n_items(),
                    data.ds.n_users(),
                    data.ds.n_items()
                );
            }
            let eval = score(&ckpt.model, &data.splits.test, &ks)?;
            report.push(method.as_str(), seed, &eval);
            if let Some(truth) = &data.truth {
                if let Some(est) = estimated_exposure_matrix(method, &ckpt.model, ckpt.exposure.as_ref(), &theta, clip) {
                    let pcc = mean_user_pcc(&est, truth.exposure_matrix(), truth.n_users(), truth.n_items())?;
                    report.push_value(method.as_str(), seed, "pcc", 0, pcc);
                }
            }
        }
    }
    report.add_summary();
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    fs::write(out.join("metrics.json"), report.to_json() + "\n")?;
    for r in report.rows.iter().filter(|r| r.seed.is_none() && r.metric.ends_with("_mean")) {
        println!("{:<9} {:>9}@{} {:.4}", r.method, r.metric.trim_end_matches("_mean"), r.k, r.value);
    }
    Ok(vec!["metrics.csv".into(), "metrics.json".into()])
}

pub fn variance_study(s: &Settings, out: &Path) -> Result<Vec<String>> {
    let gammas = s.list("gammas", VARIANCE_GAMMAS.to_vec())?;
    let ms = s.list("m_bars", VARIANCE_MS.to_vec())?;
    let ps = s.list("ps", VARIANCE_PS.to_vec())?;
    let n = s.get("samples", 1_000_000usize)?;
    let sampling: McSampling = s.get("sampling", McSampling::default())?;
    let rows = run_variance(&gammas, &ms, &ps, n, sampling, seed(s)?)?;
    let mut text = String::from(VarianceRow::CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(out.join("variance.csv"), text)?;
    let worst = rows.iter().map(VarianceRow::max_rel_err).fold(0.0, f64::max);
    println!("{} grid points, worst relative Monte Carlo error {worst:.4}", rows.len());
    Ok(vec!["variance.csv".into()])
}

pub fn grad_check(s: &Settings, out: &Path) -> Result<Vec<String>> {
    let seed = seed(s)?;
    let instances: u64 = s.get("instances", 20)?;
    let rtol: f64 = s.get("rtol", 1e-4)?;
    let zero_tol: f64 = s.get("zero_tol", 1e-12)?;
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    let mut report = |name: &str, ok: bool, detail: String| {
        lines.push(format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            failed.push(name.to_owned());
        }
    };

    for k in 0..instances {
        let inst = hyper_instance(seed + k, 5, 3)?;
        let c = inst.check(rtol)?;
        report(
            &format!("hypergradient[{}]", seed + k),
            c.passed,
            format!("worst rel err {:.3e} at {} (analytic {:.6e}, numeric {:.6e})", c.worst_rel_err, c.worst_index, c.analytic, c.numeric),
        );
    }

    let mut inst = hyper_instance(seed, 5, 3)?;
    inst.eta = 0.0;
    let worst = inst.analytic()?.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    report("zero-inner-rate", worst <= zero_tol, format!("max |grad| {worst:.3e}"));

    for k in 0..instances {
        let (analytic, _) = positive_only_hypergradient(seed + k)?;
        let worst = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        report(&format!("positive-only[{}]", seed + k), worst <= zero_tol, format!("max |grad| {worst:.3e}"));
    }

    for k in 0..instances {
        let c = closed_form_check(seed + k, rtol)?;
        report(
            &format!("closed-form[{}]", seed + k),
            c.passed,
            format!("analytic {:.6e}, numeric {:.6e}, rel err {:.3e}", c.analytic, c.numeric, c.worst_rel_err),
        );
    }

    let g = closed_form_val_grad(&sign_case())?;
    report("sign-case", g > 0.0, format!("d loss / d m_bar = {g:.6e}"));

    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(out.join("grad_check.txt"), &text)?;
    print!("{text}");
    if !failed.is_empty() {
        bail!("grad-check failed: {}", failed.join(", "));
    }
    Ok(vec!["grad_check.txt".into()])
}
