use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use mllc_core::gradcheck;
use mllc_core::metrics::pseudo_label_accuracy;
use mllc_core::npy::{self, NpyData};
use mllc_core::refine::{refine as run_refine, RefineLayers};
use mllc_core::slg::Neighbors;
use mllc_core::synth::{generate, harness_paths, read_bundle, refine_instance, write_bundle, SynthDataset};
use mllc_core::train::{self as training, load_checkpoint, save_checkpoint, TrainMode, TrainRecord, CHECKPOINT_MANIFEST};
use mllc_core::{LabelMap, ProbMatrix};

use crate::config::ExperimentConfig;
use crate::{BenchArgs, CliError, Common, EvalArgs, RefineArgs, TrainArgs};

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("record serializes") + "\n";
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn runtime(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn load_dataset(cfg: &mut ExperimentConfig, data: Option<&PathBuf>) -> Result<SynthDataset, CliError> {
    match data {
        Some(dir) => {
            require(dir, "dataset bundle")?;
            let ds = read_bundle(dir)?;
            cfg.synth = ds.spec.clone();
            Ok(ds)
        }
        None => Ok(generate(&cfg.synth)?),
    }
}

pub fn synth(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let ds = generate(&cfg.synth)?;
    let manifest = write_bundle(&ds, &cfg.harness, &cfg.out_dir)?;
    cfg.echo(&cfg.out_dir)?;
    print_json(&json!({
        "command": "synth",
        "out_dir": cfg.out_dir,
        "train_images": ds.train.len(),
        "labeled_images": ds.labeled().count(),
        "val_images": ds.val.len(),
        "files": manifest.files.len(),
    }));
    Ok(())
}

fn load_flips(path: &Path, n: usize) -> Result<Vec<usize>, CliError> {
    let arr = npy::read(path)?;
    let raw: Vec<i64> = match arr.data {
        NpyData::I64(v) => v,
        NpyData::F64(_) => return Err(CliError::Invalid(format!("{}: flip indices must be integers", path.display()))),
    };
    raw.into_iter()
        .map(|i| {
            usize::try_from(i)
                .ok()
                .filter(|&i| i < n)
                .ok_or_else(|| CliError::Invalid(format!("flip index {i} outside 0..{n}")))
        })
        .collect()
}

#[derive(Serialize)]
struct RefineSummary {
    command: &'static str,
    n: usize,
    classes: usize,
    dim: usize,
    rounds: usize,
    isolated_nodes: usize,
    changed_labels: usize,
    accuracy_before: Option<f64>,
    accuracy_after: Option<f64>,
    flips: Option<usize>,
    corrected_flips: Option<f64>,
}

pub fn refine(a: &RefineArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    let (fp, pp, gt_path, flips_path) = match &a.harness {
        Some(dir) => {
            require(dir, "harness bundle")?;
            let [f, p, g, _, fl] = harness_paths(dir);
            (f, p, Some(g), Some(fl))
        }
        None => (
            a.features.clone().expect("clap requires features"),
            a.probs.clone().expect("clap requires probs"),
            a.gt.clone(),
            a.flips.clone(),
        ),
    };
    for (p, what) in [(&fp, "features file"), (&pp, "probs file")] {
        require(p, what)?;
    }
    let features = npy::load_features(&fp)?;
    let probs = npy::load_probs(&pp)?;
    let gate = match &a.gate {
        Some(g) => {
            require(g, "gate file")?;
            npy::load_probs(g)?
        }
        None => probs.clone(),
    };
    let (n, classes, dim) = (probs.n(), probs.classes(), features.dim());
    if features.n() != n {
        return Err(CliError::Invalid(format!("{} feature rows vs {n} probability rows", features.n())));
    }
    let gt = match &gt_path {
        Some(g) => {
            require(g, "ground-truth file")?;
            Some(npy::load_labels(g, classes)?)
        }
        None => None,
    };
    if gt.as_ref().is_some_and(|g| g.len() != n) {
        return Err(CliError::Invalid(format!("ground truth length differs from {n} rows")));
    }
    let flips = match &flips_path {
        Some(f) => {
            require(f, "flip list")?;
            Some(load_flips(f, n)?)
        }
        None => None,
    };

    let layers = match &a.checkpoint {
        Some(dir) => {
            require(&dir.join(CHECKPOINT_MANIFEST), "checkpoint")?;
            let ck = load_checkpoint(dir)?;
            cfg.train.refine.rounds = ck.teacher.refine.rounds();
            ck.teacher.refine
        }
        None => RefineLayers::identity_averaging(cfg.train.refine.rounds, classes, dim),
    };
    let out = run_refine(&features, &probs, &gate, &cfg.train.refine, &layers)?;
    let before = probs.to_labels();
    let after = out.pseudo_labels();
    let refined: &ProbMatrix = out.per_round_probs.last().expect("at least one round");

    let dir = &cfg.out_dir;
    cfg.echo(dir)?;
    npy::save_matrix(dir.join("refined_probs.npy"), refined.matrix())?;
    npy::save_matrix(
        dir.join("refined_features.npy"),
        out.per_round_features.last().expect("at least one round").matrix(),
    )?;
    npy::save_labels(dir.join("pseudo_labels.npy"), &after)?;

    let acc = |l: &LabelMap| -> Result<Option<f64>, CliError> {
        Ok(match &gt {
            Some(g) => Some(pseudo_label_accuracy(l, g, None)?.accuracy),
            None => None,
        })
    };
    let corrected_flips = match (&gt, &flips) {
        (Some(g), Some(f)) => pseudo_label_accuracy(&after, g, Some(f))?.corrected_flips,
        _ => None,
    };
    let summary = RefineSummary {
        command: "refine",
        n,
        classes,
        dim,
        rounds: cfg.train.refine.rounds,
        isolated_nodes: out.isolated_nodes,
        changed_labels: before.raw().iter().zip(after.raw()).filter(|(x, y)| x != y).count(),
        accuracy_before: acc(&before)?,
        accuracy_after: acc(&after)?,
        flips: flips.as_ref().map(Vec::len),
        corrected_flips,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    let ds = load_dataset(&mut cfg, a.data.as_ref())?;
    let dir = cfg.out_dir.clone();
    cfg.echo(&dir)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| runtime(&metrics_path, e))?);
    let mut write_err: Option<std::io::Error> = None;
    let outcome = training::train(&ds, &cfg.train, |rec: &TrainRecord| {
        if write_err.is_none() {
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(runtime(&metrics_path, e));
    }
    metrics.flush().map_err(|e| runtime(&metrics_path, e))?;

    let timing_path = dir.join("timing.jsonl");
    let mut timing = BufWriter::new(File::create(&timing_path).map_err(|e| runtime(&timing_path, e))?);
    for t in &outcome.timing {
        writeln!(timing, "{}", serde_json::to_string(t).expect("record serializes"))
            .map_err(|e| runtime(&timing_path, e))?;
    }
    timing.flush().map_err(|e| runtime(&timing_path, e))?;

    save_checkpoint(&dir.join("checkpoint"), &outcome.state, cfg.to_value())?;
    print_json(&json!({
        "command": "train",
        "mode": cfg.train.mode,
        "steps": outcome.state.step,
        "out_dir": dir,
        "final": outcome.final_eval,
    }));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    require(&a.checkpoint.join(CHECKPOINT_MANIFEST), "checkpoint")?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut common = a.common.clone();
    if common.out.is_none() {
        common.out = Some(a.checkpoint.join("eval"));
    }
    let mut cfg = common.resolve_from(Some(ck.config.clone()))?;
    let ds = load_dataset(&mut cfg, a.data.as_ref())?;
    let model = if a.student { &ck.student } else { &ck.teacher };
    let unlabelled: Vec<_> = ds.unlabeled().cloned().collect();
    let refine_cfg = (cfg.train.mode == TrainMode::Mllc).then_some(&cfg.train.refine);
    let rec = training::evaluate(model, &ds.val, &unlabelled, refine_cfg, ck.step)?;
    cfg.echo(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("eval.json"), &rec)?;
    print_json(&json!({
        "command": "eval",
        "model": if a.student { "student" } else { "teacher" },
        "miou": rec.miou,
        "per_class_iou": rec.per_class_iou,
        "pseudo_accuracy": rec.pseudo_accuracy,
        "step": rec.step,
    }));
    Ok(())
}

pub fn gradcheck(c: &Common) -> Result<(), CliError> {
    let cfg = c.resolve()?;
    let reports = gradcheck::run_all(cfg.gradcheck.configs, cfg.gradcheck.seed)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    cfg.echo(&cfg.out_dir)?;
    let doc = json!({
        "command": "gradcheck",
        "tolerance": gradcheck::FD_TOL,
        "epsilon": gradcheck::FD_EPS,
        "suites": reports,
        "passed": failed.is_empty(),
    });
    write_json(&cfg.out_dir.join("gradcheck.json"), &doc)?;
    print_json(&doc);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let mut cfg = a.common.resolve()?;
    let b = &mut cfg.bench;
    b.n = a.n.unwrap_or(b.n);
    b.dim = a.dim.unwrap_or(b.dim);
    b.classes = a.classes.unwrap_or(b.classes);
    b.repeats = a.repeats.unwrap_or(b.repeats);
    if b.repeats == 0 {
        return Err(CliError::Invalid("repeats must be at least 1".into()));
    }
    let b = cfg.bench.clone();
    let mut rcfg = cfg.train.refine.clone();
    rcfg.rounds = b.rounds;
    rcfg.k = Neighbors::K(b.k);
    rcfg.seed = b.seed;
    rcfg.validate()?;

    let t0 = Instant::now();
    let (features, probs) = refine_instance(b.n, b.dim, b.classes, b.seed)?;
    let layers = RefineLayers::identity_averaging(b.rounds, b.classes, b.dim);
    let instance_s = t0.elapsed().as_secs_f64();
    let mut times = Vec::with_capacity(b.repeats);
    for _ in 0..b.repeats {
        let t = Instant::now();
        let out = run_refine(&features, &probs, &probs, &rcfg, &layers)?;
        times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times.iter().cloned().fold(0.0, f64::max);
    cfg.echo(&cfg.out_dir)?;
    let doc: Value = json!({
        "command": "bench",
        "n": b.n,
        "k": b.k,
        "rounds": b.rounds,
        "dim": b.dim,
        "classes": b.classes,
        "repeats": b.repeats,
        "threads": rayon::current_num_threads(),
        "instance_s": instance_s,
        "refine_s": times,
        "mean_s": mean,
        "min_s": min,
        "max_s": max,
        "nodes_per_s": b.n as f64 / mean,
    });
    write_json(&cfg.out_dir.join("bench.json"), &doc)?;
    print_json(&doc);
    Ok(())
}
