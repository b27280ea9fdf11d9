use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use treefield_core::sampling::{weak_accuracy_estimate, weak_agreement_monte_carlo};
use treefield_core::{
    connected_components, extract_skeleton_points, extract_surface_points, generate_case, knn_indices, load_case,
    read_volume, save_case, thin_3d, write_volume, Connectivity,
};
use treefield_field::{load_checkpoint, save_checkpoint, Model};
use treefield_pipeline::{
    build_cases, corrupt_case, evaluate_case, infer_full, train_with, write_history_csv, Case, InferOptions,
    InferenceResult, Timings,
};

use crate::config::Config;
use crate::{Cli, Command};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn need_dir(p: &Path) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(anyhow!("no such directory: {}", p.display())))
    }
}

fn need_file(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("no such file: {}", p.display())))
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.global.config {
        Some(p) => {
            need_file(p)?;
            Config::load(p).map_err(usage)?
        }
        None => Config::preset(cli.global.preset),
    }
    .with_seed(cli.global.seed);
    let seed = cli.global.seed;
    match cli.command {
        Command::Synth { out, count } => synth(&cfg, &out, count).map_err(runtime),
        Command::Corrupt { data, out, min_breaks, max_breaks } => {
            need_dir(&data)?;
            if min_breaks > max_breaks {
                return Err(usage(anyhow!("--min-breaks {min_breaks} exceeds --max-breaks {max_breaks}")));
            }
            corrupt(&cfg, &data, &out, (min_breaks, max_breaks), seed).map_err(runtime)
        }
        Command::Train { data, out, supervision, fusion, epochs } => {
            need_dir(&data)?;
            let mut cfg = cfg;
            if let Some(s) = supervision {
                cfg.train.supervision = s;
            }
            if let Some(f) = fusion {
                cfg.model.fusion = f;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate().map_err(usage)?;
            train(&cfg, &data, &out).map_err(runtime)
        }
        Command::Infer { model, case, out, chunk } => {
            need_file(&model)?;
            need_dir(&case)?;
            infer(&cfg, &model, &case, &out, chunk).map_err(runtime)
        }
        Command::Eval { case, pred, model, out } => {
            need_dir(&case)?;
            match (&pred, &model) {
                (Some(p), _) => need_dir(p)?,
                (None, Some(m)) => need_file(m)?,
                (None, None) => return Err(usage(anyhow!("eval needs --pred or --model"))),
            }
            eval(&cfg, &case, pred.as_deref(), model.as_deref(), &out).map_err(runtime)
        }
        Command::WeakAcc { data, count, queries, radius } => {
            if let Some(d) = &data {
                need_dir(d)?;
            }
            weak_acc(&cfg, data.as_deref(), count, queries, radius).map_err(runtime)
        }
        Command::Bench { out, model } => {
            if let Some(m) = &model {
                need_file(m)?;
            }
            bench(&cfg, &out, model.as_deref()).map_err(runtime)
        }
    }
}

fn case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(treefield_core::dataset::MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no case directories under {}", root.display());
    }
    Ok(dirs)
}

fn load_corrupted(dir: &Path) -> Result<Case> {
    let stored = load_case(dir).with_context(|| format!("loading {}", dir.display()))?;
    Case::from_stored(stored).with_context(|| format!("{} is not corrupted; run corrupt first", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn synth(cfg: &Config, out: &Path, count: usize) -> Result<()> {
    fs::create_dir_all(out)?;
    for i in 0..count {
        let case = generate_case(&cfg.synth.with_seed(cfg.synth.seed + i as u64))?;
        save_case(out.join(format!("case_{i:04}")), &case, None)?;
    }
    println!("wrote {count} cases to {}", out.display());
    Ok(())
}

/// Each case is corrupted under its own tree seed, or `seed + index` when a seed is given.
fn corrupt(cfg: &Config, data: &Path, out: &Path, breaks: (usize, usize), seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(out)?;
    for (i, dir) in case_dirs(data)?.iter().enumerate() {
        let stored = load_case(dir)?;
        let s = seed.map_or(stored.case.spec.seed, |s| s + i as u64);
        let case = corrupt_case(stored.case, breaks, cfg.train.min_nodes, s)?;
        let name = dir.file_name().ok_or_else(|| anyhow!("bad case path {}", dir.display()))?;
        save_case(out.join(name), &case.synthetic, Some((&case.corrupted, &case.records)))?;
        println!("{}: {} breaks", name.to_string_lossy(), case.records.len());
    }
    Ok(())
}

fn train(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let cases: Vec<Case> = case_dirs(data)?.iter().map(|d| load_corrupted(d)).collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let steps_per_epoch = cases.len().div_ceil(cfg.train.batch_size);
    let outcome = train_with(&cfg.train, &cfg.model, &cases, |r| {
        if (r.step + 1) % steps_per_epoch == 0 {
            eprintln!("epoch {} step {} total {:.4} repair {:.4}", r.epoch, r.step, r.total, r.loss_repair);
        }
    })?;
    save_checkpoint(&outcome.model, out.join("model.tfck"))?;
    write_history_csv(&outcome.history, out.join("history.csv"))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("checksum {:016x}", outcome.model.params.checksum());
    Ok(())
}

const PRED_FILES: [&str; 4] = ["repaired_tree.vvol", "repair_mask.vvol", "labeled_tree.vvol", "segments.vvol"];

fn run_inference(cfg: &Config, model: &Path, case: &Case, chunk: usize) -> Result<InferenceResult> {
    let model: Model<f32> = load_checkpoint(model)?;
    let opts = InferOptions { chunk, ..InferOptions::from_config(&cfg.train) };
    Ok(infer_full(&model, &case.corrupted, &case.synthetic.lung_mask, &opts)?)
}

fn infer(cfg: &Config, model: &Path, case_dir: &Path, out: &Path, chunk: usize) -> Result<()> {
    let case = load_corrupted(case_dir)?;
    let r = run_inference(cfg, model, &case, chunk)?;
    fs::create_dir_all(out)?;
    for (name, vol) in PRED_FILES.iter().zip([&r.repaired_tree, &r.repair_mask, &r.labeled_tree, &r.segment_volume]) {
        write_volume(vol, out.join(name))?;
    }
    write_json(&out.join("timings.json"), &serde_json::to_value(r.timings)?)?;
    println!("repaired {} voxels in {:.2}s", r.repair_mask.foreground_count(), r.timings.total);
    Ok(())
}

fn load_prediction(case: &Case, dir: &Path) -> Result<InferenceResult> {
    let read = |name: &str| read_volume(dir.join(name)).with_context(|| format!("reading {name}"));
    let repair_mask = read(PRED_FILES[1])?;
    Ok(InferenceResult {
        repaired_tree: case.corrupted.to_binary().union(&repair_mask)?,
        repair_mask,
        labeled_tree: read(PRED_FILES[2])?,
        segment_volume: read(PRED_FILES[3])?,
        timings: Timings::default(),
    })
}

fn eval(cfg: &Config, case_dir: &Path, pred: Option<&Path>, model: Option<&Path>, out: &Path) -> Result<()> {
    let case = load_corrupted(case_dir)?;
    let result = match (pred, model) {
        (Some(p), _) => load_prediction(&case, p)?,
        (None, Some(m)) => run_inference(cfg, m, &case, 4096)?,
        (None, None) => unreachable!("checked by the caller"),
    };
    let report = evaluate_case(&result, &case)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &report.to_json())?;
    println!(
        "cf1 {} dmf1 {} gdice {} ncc {} dice_tree {} dice_lung {}",
        report.cf1, report.dmf1, report.gdice, report.ncc, report.dice_tree, report.dice_lung
    );
    Ok(())
}

fn weak_acc(cfg: &Config, data: Option<&Path>, count: usize, queries: usize, radius: f64) -> Result<()> {
    let cases: Vec<Case> = match data {
        Some(d) => case_dirs(d)?.iter().map(|d| load_corrupted(d)).collect::<Result<_>>()?,
        None => build_cases(&cfg.synth, count, cfg.synth.seed, (1, 3), cfg.train.min_nodes)?,
    };
    println!("{:>5} {:>8} {:>9} {:>9} {:>8}", "case", "rho_d", "estimate", "empirical", "diff");
    let mut rows = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let est = weak_accuracy_estimate(&c.synthetic.complete_tree, &c.corrupted, radius)?;
        let emp = weak_agreement_monte_carlo(&c.synthetic.complete_tree, &c.corrupted, radius, queries, cfg.synth.seed + i as u64)?;
        println!("{i:>5} {:>8.5} {:>9.5} {:>9.5} {:>8.5}", est.rho_d, est.accuracy, emp, emp - est.accuracy);
        rows.push((est.accuracy, emp));
    }
    let n = rows.len() as f64;
    let (e, m) = rows.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1));
    println!("{:>5} {:>8} {:>9.5} {:>9.5} {:>8.5}", "mean", "", e / n, m / n, (m - e) / n);
    Ok(())
}

fn bench(cfg: &Config, out: &Path, model: Option<&Path>) -> Result<()> {
    let cases = build_cases(&cfg.synth, 1, cfg.synth.seed, (2, 2), cfg.train.min_nodes)?;
    let case = &cases[0];
    let tree = &case.corrupted;
    let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
        let t = Instant::now();
        f()?;
        Ok(t.elapsed().as_secs_f64())
    };
    let thin = time(&mut || {
        thin_3d(tree);
        Ok(())
    })?;
    let cc = time(&mut || {
        connected_components(tree, Connectivity::TwentySix);
        Ok(())
    })?;
    let surface = extract_surface_points(tree, cfg.train.n_s, 0)?;
    let skeleton = extract_skeleton_points(tree, cfg.train.n_k, 1)?;
    let knn = time(&mut || {
        knn_indices(&surface.coords, &skeleton.coords, cfg.model.k)?;
        Ok(())
    })?;
    let model: Model<f32> = match model {
        Some(m) => load_checkpoint(m)?,
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let result = infer_full(&model, tree, &case.synthetic.lung_mask, &InferOptions::from_config(&cfg.train))?;
    let report = json!({
        "dims": tree.dims(),
        "thin_3d": thin,
        "connected_components": cc,
        "knn": knn,
        "knn_queries": surface.len(),
        "knn_references": skeleton.len(),
        "inference": result.timings,
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
