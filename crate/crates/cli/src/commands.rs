//! Subcommand bodies.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use xmzsr::ablation::{matrix_rows, AblationRow};
use xmzsr::dataio::{generate_synthetic, write_class_embeddings, write_feature_table, Dataset, Protocol};
use xmzsr::losses::LossReport;
use xmzsr::retrieval::{evaluate, read_metrics_csv, write_metrics_csv, write_report_json, RetrievalReport};
use xmzsr::trainer::{fit, read_history_csv, write_history_csv, Checkpoint};
use xmzsr::{Error, Result};

use crate::config::RunConfig;

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Timestamps live here so every other output stays byte-identical.
#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    started_unix: u64,
    finished_unix: u64,
    version: &'static str,
}

fn write_meta(out: &Path, command: &str, started: u64) -> Result<()> {
    let meta = RunMeta {
        command,
        started_unix: started,
        finished_unix: unix_now(),
        version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(out.join(format!("{command}.meta.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    fs::write(cfg.out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let started = unix_now();
    ensure_dir(&cfg.out)?;
    let ds = generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?;
    let features = cfg.out.join("features.csv");
    let classes = cfg.out.join("classes.csv");
    write_feature_table(&features, ds.samples())?;
    write_class_embeddings(&classes, ds.embeddings())?;
    log::info!(
        "wrote {} samples to {} and {} classes to {}",
        ds.samples().len(),
        features.display(),
        ds.embeddings().len(),
        classes.display()
    );
    write_meta(&cfg.out, "gen-data", started)
}

fn log_dataset(ds: &Dataset) {
    let split = ds.split();
    log::info!(
        "dataset: {} samples, {} seen / {} unseen classes",
        ds.samples().len(),
        split.seen_classes.len(),
        split.unseen_classes.len()
    );
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let started = unix_now();
    ensure_dir(&cfg.out)?;
    let ds = cfg.dataset()?;
    log_dataset(&ds);
    let ckpt = fit(&ds, &cfg.train)?;
    let path = cfg.out.join("checkpoint.gtz");
    ckpt.save(&path)?;
    write_history_csv(&cfg.out.join("history.csv"), &ckpt.history)?;
    write_resolved_config(cfg)?;
    if let Some(last) = ckpt.history.last() {
        println!("trained {} epochs, final total loss {:.6}", ckpt.epoch, last.total);
    } else {
        println!("trained 0 epochs");
    }
    println!("checkpoint: {}", path.display());
    write_meta(&cfg.out, "train", started)
}

fn print_reports(reports: &[RetrievalReport]) {
    for r in reports {
        println!(
            "{:>3}  mAP {:.4}  P@100 {:.4}  P@200 {:.4}  mAP@200 {:.4}  ({} queries, gallery {})",
            r.protocol, r.map, r.p_at_100, r.p_at_200, r.map_at_200, r.num_queries, r.gallery_size
        );
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let started = unix_now();
    let ds = cfg.dataset()?;
    let ckpt = Checkpoint::load(&cfg.checkpoint_path(), &ds, &cfg.train)?;
    ensure_dir(&cfg.out)?;
    let mut reports = Vec::new();
    for &protocol in &cfg.eval.protocols {
        let report = evaluate(&ds, &ckpt.params, protocol, cfg.train.attention())?;
        write_report_json(&cfg.out.join(format!("report_{protocol}.json")), &report)?;
        reports.push(report);
    }
    write_metrics_csv(&cfg.out.join("metrics.csv"), &reports)?;
    print_reports(&reports);
    write_meta(&cfg.out, "eval", started)
}

pub fn slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

type RowOutcome = std::result::Result<(Vec<RetrievalReport>, Vec<LossReport>), String>;

fn run_row(cfg: &RunConfig, ds: &Dataset, row: &AblationRow) -> RowOutcome {
    let train = cfg.train_for(row);
    let inner = || -> Result<(Vec<RetrievalReport>, Vec<LossReport>)> {
        train.validate()?;
        let ckpt = fit(ds, &train)?;
        let reports = cfg
            .ablate
            .protocols
            .iter()
            .map(|&p| evaluate(ds, &ckpt.params, p, train.attention()))
            .collect::<Result<Vec<_>>>()?;
        Ok((reports, ckpt.history))
    };
    inner().map_err(|e| e.to_string())
}

fn flag_list(row: &AblationRow) -> String {
    row.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("+")
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let started = unix_now();
    let rows = matrix_rows(&cfg.ablate.extra_rows)?;
    let ds = cfg.dataset()?;
    log_dataset(&ds);
    let dir = cfg.out.join("ablation");
    ensure_dir(&dir)?;

    let outcomes: Mutex<Vec<Option<RowOutcome>>> = Mutex::new(rows.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.ablate.jobs.min(rows.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(row) = rows.get(i) else { break };
                log::info!("ablation row {:?} started", row.name);
                let outcome = run_row(cfg, &ds, row);
                if let Err(e) = &outcome {
                    log::error!("ablation row {:?} failed: {e}", row.name);
                }
                outcomes.lock().expect("no poisoned rows")[i] = Some(outcome);
            });
        }
    });
    let outcomes: Vec<RowOutcome> = outcomes
        .into_inner()
        .expect("no poisoned rows")
        .into_iter()
        .map(|o| o.expect("every row ran"))
        .collect();

    let mut table = csv::Writer::from_path(dir.join("table.csv")).map_err(csv_err)?;
    table
        .write_record(["row", "flags", "protocol", "mAP", "P@100", "P@200", "mAP@200", "status"])
        .map_err(csv_err)?;
    let mut long = csv::Writer::from_path(dir.join("long.csv")).map_err(csv_err)?;
    long.write_record(["row", "protocol", "metric", "value"]).map_err(csv_err)?;
    for (row, outcome) in rows.iter().zip(&outcomes) {
        match outcome {
            Ok((reports, history)) => {
                let row_dir = dir.join(slug(&row.name));
                ensure_dir(&row_dir)?;
                write_history_csv(&row_dir.join("history.csv"), history)?;
                for r in reports {
                    let m = r.metrics().map(|(_, v)| v.to_string());
                    let p = r.protocol.to_string();
                    table
                        .write_record([&row.name, &flag_list(row), &p, &m[0], &m[1], &m[2], &m[3], "ok"])
                        .map_err(csv_err)?;
                    for (name, v) in r.metrics() {
                        long.write_record([&row.name, &p, name, &v.to_string()]).map_err(csv_err)?;
                    }
                    println!("{:<28} {:>3}  mAP {:.4}  P@100 {:.4}  P@200 {:.4}  mAP@200 {:.4}", row.name, p, r.map, r.p_at_100, r.p_at_200, r.map_at_200);
                }
            }
            Err(e) => {
                for p in &cfg.ablate.protocols {
                    table
                        .write_record([&row.name, &flag_list(row), &p.to_string(), "", "", "", "", &format!("failed: {e}")])
                        .map_err(csv_err)?;
                }
                println!("{:<28} failed: {e}", row.name);
            }
        }
    }
    table.flush()?;
    long.flush()?;
    write_resolved_config(cfg)?;
    write_meta(&cfg.out, "ablate", started)
}

/// Gathers whatever results exist under the output directory into
/// long-format plot data.
pub fn report(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    let plots = out.join("plots");
    let history = out.join("history.csv");
    let metrics = out.join("metrics.csv");
    let ablation = out.join("ablation").join("long.csv");
    if !history.exists() && !metrics.exists() && !ablation.exists() {
        return Err(Error::MissingInput(out.clone()));
    }
    ensure_dir(&plots)?;
    let mut written: Vec<PathBuf> = Vec::new();

    if history.exists() {
        let h = read_history_csv(&history)?;
        let path = plots.join("loss_long.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["epoch", "component", "value"]).map_err(csv_err)?;
        for (i, r) in h.iter().enumerate() {
            let parts = [
                ("W", r.wasserstein),
                ("comp", r.compatibility),
                ("dom", r.domain),
                ("cls", r.classification),
                ("sem", r.semantic),
                ("total", r.total),
            ];
            for (name, v) in parts {
                w.write_record([&(i + 1).to_string(), name, &v.to_string()]).map_err(csv_err)?;
            }
        }
        w.flush()?;
        written.push(path);
        if let Some(last) = h.last() {
            println!("loss history: {} epochs, final total {:.6}", h.len(), last.total);
        }
    }

    let path = plots.join("metrics_long.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["source", "protocol", "metric", "value"]).map_err(csv_err)?;
    if metrics.exists() {
        for (p, m, v) in read_metrics_csv(&metrics)? {
            w.write_record(["eval", &p.to_string(), &m, &v.to_string()]).map_err(csv_err)?;
            println!("eval {p:>3} {m:<8} {v:.4}");
        }
    }
    if ablation.exists() {
        let mut rdr = csv::Reader::from_path(&ablation).map_err(csv_err)?;
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 4 {
                return Err(Error::Parse {
                    line: rec.position().map(|p| p.line()).unwrap_or(0),
                    msg: "ablation long.csv rows need 4 fields".into(),
                });
            }
            let protocol: Protocol = rec[1].parse()?;
            w.write_record([&rec[0], &protocol.to_string(), &rec[2], &rec[3]]).map_err(csv_err)?;
            if &rec[2] == "mAP" {
                println!("{:<28} {:>3} mAP {}", &rec[0], protocol, &rec[3]);
            }
        }
    }
    w.flush()?;
    written.push(path);
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}
