use std::fs;
use std::path::{Path, PathBuf};

use mamba_home::bench::{loglog_slope, powers_of_two, routing_sweep, RoutingRow};
use mamba_home::gradcheck::module_suite;
use mamba_home::io::{load_checkpoint, read_labels, write_image, write_labels};
use mamba_home::metrics::{dsc_per_class, hd95_per_class, LabelVolume};
use mamba_home::network::{describe, Network};
use mamba_home::train::{evaluate_mdsc, predict, synth_volumes, train_loop, CheckpointPlan, VolumeSample};
use mamba_home::ParamStore;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Seed offset separating held-out volumes from the training set.
const HELD_OUT_SEED: u64 = 0x5eed_0f_e7a1;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

pub fn gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<(), CliError> {
    let reports = module_suite(cfg.seed, corrupt)?;
    println!("{:<8} {:>7} {:>12}  status", "module", "probes", "max_rel_err");
    let mut failed = Vec::new();
    for (name, report) in &reports {
        let ok = report.passed();
        println!(
            "{name:<8} {:>7} {:>12.3e}  {}",
            report.probes.len(),
            report.max_rel_err(),
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            if let Some(p) = report.worst() {
                println!("         worst: {}[{}] analytic {:e} numeric {:e}", p.name, p.index, p.analytic, p.numeric);
            }
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn bench(cfg: &RunConfig, csv_path: Option<&Path>) -> Result<(), CliError> {
    let b = &cfg.bench;
    let ns = powers_of_two(b.min_log2, b.max_log2);
    let rows = routing_sweep(&b.layer, &ns, b.global_cap, b.reps, cfg.seed)?;
    let path = match csv_path {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&cfg.out_dir)?;
            cfg.out_dir.join("bench.csv")
        }
    };
    let mut w = csv_writer(&path)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{:>8} {:>10} {:>14} {:>10}", "N", "wall_ms", "est_flops", "global_ms");
    for r in &rows {
        let global = r.global_ms.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!("{:>8} {:>10.3} {:>14} {:>10}", r.n, r.wall_ms, r.est_flops, global);
    }
    if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.wall_ms).collect();
        println!("log-log slope {:.3}", loglog_slope(&xs, &ys)?);
    }
    let flops_ok = rows.iter().all(|r: &RoutingRow| r.assign_flops <= r.global_assign_flops);
    println!("grouped assignment flops <= global: {flops_ok}");
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let net_cfg = cfg.network_config()?;
    let data = synth_volumes(cfg.seed, cfg.data.volumes, cfg.data.extent, net_cfg.classes)?;
    let mut store = ParamStore::new(cfg.seed);
    let net = Network::new(&mut store, net_cfg)?;
    create_dir(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join("checkpoint.json");
    let plan = CheckpointPlan {
        path: &checkpoint,
        every: cfg.train.checkpoint_every,
    };
    let total = cfg.train.total_steps(data.len());
    let report_every = (total / 10).max(1);
    let history = train_loop(&net, &mut store, &data, &cfg.train, Some(plan), |r| {
        if r.step % report_every == 0 || r.step + 1 == total {
            eprintln!("step {:>5}  lr {:.2e}  loss {:.4}  train mDSC {:.4}", r.step, r.lr, r.loss, r.train_mdsc);
        }
    })?;
    let history_path = cfg.out_dir.join("history.csv");
    fs::write(&history_path, history.to_csv())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", history_path.display())))?;
    let refs: Vec<&VolumeSample> = data.iter().collect();
    println!("train mDSC {:.4}", evaluate_mdsc(&net, &store, &refs)?);
    println!("wrote {} and {}", history_path.display(), checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    case_id: String,
    class: u8,
    dsc: f64,
    hd95: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    cases: usize,
    classes: usize,
    /// Mean foreground DSC.
    mdsc: f64,
    dsc_per_class: Vec<f64>,
    /// Mean over cases where both structures are present.
    hd95_per_class: Vec<Option<f64>>,
}

fn score(cases: &[(String, LabelVolume, LabelVolume, [f64; 3])], classes: usize) -> Result<(Vec<MetricRow>, Summary), CliError> {
    let mut rows = Vec::new();
    let mut dsc_sum = vec![0.0; classes];
    let mut hd_sum = vec![(0.0, 0usize); classes];
    for (id, pred, gt, spacing) in cases {
        pred.check_classes(classes)?;
        gt.check_classes(classes)?;
        for c in 1..classes as u8 {
            let dsc = dsc_per_class(pred, gt, c)?;
            let hd95 = hd95_per_class(pred, gt, c, *spacing)?;
            dsc_sum[c as usize] += dsc;
            if let Some(h) = hd95 {
                hd_sum[c as usize].0 += h;
                hd_sum[c as usize].1 += 1;
            }
            rows.push(MetricRow {
                case_id: id.clone(),
                class: c,
                dsc,
                hd95,
            });
        }
    }
    let n = cases.len() as f64;
    let dsc_per_class: Vec<f64> = dsc_sum[1..].iter().map(|s| s / n).collect();
    let summary = Summary {
        cases: cases.len(),
        classes,
        mdsc: dsc_per_class.iter().sum::<f64>() / dsc_per_class.len() as f64,
        dsc_per_class,
        hd95_per_class: hd_sum[1..].iter().map(|&(s, k)| (k > 0).then(|| s / k as f64)).collect(),
    };
    Ok((rows, summary))
}

pub enum EvalSource {
    Checkpoint(PathBuf),
    Pair { pred: PathBuf, gt: PathBuf, classes: Option<usize> },
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} not found: {}", path.display())))
    }
}

pub fn eval(cfg: &RunConfig, source: EvalSource) -> Result<(), CliError> {
    let (cases, classes) = match source {
        EvalSource::Checkpoint(path) => {
            require(&path, "checkpoint")?;
            let ck = load_checkpoint(&path)?;
            let net_cfg = ck.manifest.network.clone();
            let mut store = ParamStore::new(0);
            let net = Network::new(&mut store, net_cfg.clone())?;
            ck.restore(&mut store)?;
            let data = synth_volumes(cfg.seed ^ HELD_OUT_SEED, cfg.data.held_out, cfg.data.extent, net_cfg.classes)?;
            let refs: Vec<&VolumeSample> = data.iter().collect();
            let preds = predict(&net, &store, &refs)?;
            let cases = preds
                .into_iter()
                .zip(&data)
                .enumerate()
                .map(|(i, (p, s))| (format!("heldout{i}"), p, s.label.clone(), s.spacing))
                .collect::<Vec<_>>();
            (cases, net_cfg.classes)
        }
        EvalSource::Pair { pred, gt, classes } => {
            require(&pred, "prediction volume")?;
            require(&gt, "ground-truth volume")?;
            let (_, p) = read_labels(&pred)?;
            let (header, g) = read_labels(&gt)?;
            if p.dims != g.dims {
                return Err(CliError::Validation(format!("prediction dims {:?} differ from {:?}", p.dims, g.dims)));
            }
            let max_label = p.labels.iter().chain(&g.labels).copied().max().unwrap_or(0) as usize;
            let classes = classes.unwrap_or(max_label + 1).max(2);
            let id = gt.file_stem().map_or("case".into(), |s| s.to_string_lossy().into_owned());
            (vec![(id, p, g, header.axis_spacing())], classes)
        }
    };
    let (rows, summary) = score(&cases, classes)?;
    create_dir(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("metrics.csv");
    let mut w = csv_writer(&csv_path)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    let json_path = cfg.out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&json_path, &json).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json_path.display())))?;
    println!("{json}");
    Ok(())
}

pub fn describe_cmd(cfg: &RunConfig, extent: Option<[usize; 3]>) -> Result<(), CliError> {
    let summary = describe(&cfg.network_config()?, extent.unwrap_or(cfg.data.extent))?;
    println!("{summary}");
    Ok(())
}

pub fn synth(cfg: &RunConfig, count: Option<usize>) -> Result<(), CliError> {
    let classes = cfg.network_config()?.classes;
    let data = synth_volumes(cfg.seed, count.unwrap_or(cfg.data.volumes), cfg.data.extent, classes)?;
    let dir = cfg.out_dir.join("synth");
    create_dir(&dir)?;
    for (i, s) in data.iter().enumerate() {
        let [d, h, w] = s.spacing;
        write_image(&dir.join(format!("case{i}_image.vol")), s.dims(), [w, h, d], s.image.data())?;
        write_labels(&dir.join(format!("case{i}_label.vol")), [w, h, d], &s.label)?;
    }
    println!("wrote {} cases to {}", data.len(), dir.display());
    Ok(())
}
