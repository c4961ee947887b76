//! Result files: per-round JSON lines, the summary table and plot series.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! crashed run never leaves a truncated file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedopt_core::metrics::Summary;
use fedopt_core::orchestrator::{FinetuneEpoch, RoundRecord, RunOutput};
use fedopt_core::records::{from_jsonl, to_jsonl};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FINETUNE_FILE: &str = "finetune.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> OutputError {
    OutputError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Paths of everything a run leaves in its output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub rounds: PathBuf,
    pub summary: PathBuf,
    pub finetune: PathBuf,
}

pub fn write_run(out_dir: &Path, config_text: &str, run: &RunOutput) -> Result<RunArtifacts, OutputError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let art = RunArtifacts {
        config: out_dir.join(CONFIG_FILE),
        rounds: out_dir.join(ROUNDS_FILE),
        summary: out_dir.join(SUMMARY_FILE),
        finetune: out_dir.join(FINETUNE_FILE),
    };
    write_atomic(&art.config, config_text.as_bytes())?;
    let rounds = to_jsonl(&run.rounds).map_err(|e| io_err(&art.rounds, e))?;
    write_atomic(&art.rounds, rounds.as_bytes())?;
    let trace: &[FinetuneEpoch] = run.finetune.as_ref().map_or(&[], |f| &f.trace);
    let finetune = to_jsonl(trace).map_err(|e| io_err(&art.finetune, e))?;
    write_atomic(&art.finetune, finetune.as_bytes())?;
    write_atomic(&art.summary, &summary_csv(run).map_err(|e| io_err(&art.summary, e))?)?;
    Ok(art)
}

fn best_of(rounds: &[RoundRecord], client: usize) -> Summary {
    let mut best = Summary {
        accuracy: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for c in rounds.iter().map(|r| &r.clients[client]) {
        best.accuracy = best.accuracy.max(c.accuracy);
        best.precision = best.precision.max(c.precision);
        best.recall = best.recall.max(c.recall);
        best.f1 = best.f1.max(c.f1);
    }
    best
}

/// One `client` row per client (best value of each metric over the rounds),
/// then the `naive_mean` row and, with a designated client, the `optimized`
/// row holding its post-fine-tune validation scores.
pub fn summary_csv(run: &RunOutput) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "strategy", "client_id", "accuracy", "precision", "recall", "f1"])?;
    let Some(first) = run.rounds.first() else {
        return Ok(w.into_inner().expect("in-memory writer"));
    };
    let strategy = first.aggregation.as_str();
    let designated = first.optimized_client;
    let bests: Vec<Summary> = (0..first.clients.len()).map(|k| best_of(&run.rounds, k)).collect();
    let row = |w: &mut csv::Writer<Vec<u8>>, label: &str, id: String, s: &Summary| {
        w.write_record([
            label.to_string(),
            strategy.to_string(),
            id,
            format!("{:.6}", s.accuracy),
            format!("{:.6}", s.precision),
            format!("{:.6}", s.recall),
            format!("{:.6}", s.f1),
        ])
    };
    for (k, s) in bests.iter().enumerate() {
        row(&mut w, "client", k.to_string(), s)?;
    }
    let naive: Vec<&Summary> = bests.iter().enumerate().filter(|(k, _)| Some(*k) != designated).map(|(_, s)| s).collect();
    if !naive.is_empty() {
        let n = naive.len() as f64;
        let mean = Summary {
            accuracy: naive.iter().map(|s| s.accuracy).sum::<f64>() / n,
            precision: naive.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: naive.iter().map(|s| s.recall).sum::<f64>() / n,
            f1: naive.iter().map(|s| s.f1).sum::<f64>() / n,
        };
        row(&mut w, "naive_mean", String::new(), &mean)?;
    }
    if let Some(k) = designated {
        let s = run.finetune.as_ref().map_or(bests[k], |f| f.best);
        row(&mut w, "optimized", k.to_string(), &s)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, OutputError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    from_jsonl(&text).map_err(|e| match e {
        fedopt_core::Error::Parse { line, message } => OutputError::Malformed {
            path: path.display().to_string(),
            line,
            message,
        },
        other => io_err(path, other),
    })
}

fn csv_bytes(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

/// Accuracy, per-class fraction and fine-tune series from a rounds file.
///
/// `finetune.jsonl` is picked up from the rounds file's directory when present.
pub fn plot_data(rounds_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let rounds: Vec<RoundRecord> = read_jsonl(rounds_path)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();

    let acc_rows = rounds
        .iter()
        .map(|r| {
            let opt = r.optimized_client.map(|k| format!("{:.6}", r.clients[k].accuracy)).unwrap_or_default();
            vec![r.round.to_string(), format!("{:.6}", r.naive_mean_accuracy), opt]
        })
        .collect();
    let path = out_dir.join("accuracy.csv");
    let bytes = csv_bytes(vec!["round".into(), "naive_mean_acc".into(), "optimized_acc".into()], acc_rows)
        .map_err(|e| io_err(&path, e))?;
    write_atomic(&path, &bytes)?;
    written.push(path);

    let classes = rounds.first().map_or(0, |r| r.classes);
    let mut header = vec!["round".to_string()];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    let frac_rows = rounds
        .iter()
        .map(|r| {
            let mut row = vec![r.round.to_string()];
            match (&r.optimized, r.optimized_client) {
                (Some(o), _) => row.extend(o.fractions.iter().map(|f| format!("{f:.6}"))),
                // A designated client without an agent trains on everything.
                (None, Some(k)) if r.sampled.contains(&k) => row.extend((0..classes).map(|_| "1.000000".to_string())),
                _ => row.extend((0..classes).map(|_| String::new())),
            }
            row
        })
        .collect();
    let path = out_dir.join("fractions.csv");
    let bytes = csv_bytes(header, frac_rows).map_err(|e| io_err(&path, e))?;
    write_atomic(&path, &bytes)?;
    written.push(path);

    let ft_path = rounds_path.parent().unwrap_or(Path::new(".")).join(FINETUNE_FILE);
    if ft_path.exists() {
        let trace: Vec<FinetuneEpoch> = read_jsonl(&ft_path)?;
        let rows = trace
            .iter()
            .map(|e| vec![e.epoch.to_string(), format!("{:.6}", e.train_loss), format!("{:.6}", e.val_accuracy)])
            .collect();
        let path = out_dir.join("finetune.csv");
        let bytes = csv_bytes(vec!["epoch".into(), "train_loss".into(), "finetune_acc".into()], rows)
            .map_err(|e| io_err(&path, e))?;
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
