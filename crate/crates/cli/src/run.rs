use std::fs;
use std::io::ErrorKind;

use anyhow::{Context, Result};
use serde::Serialize;

use ssmrec::data::{compute_stats, load_interactions};
use ssmrec::eval::{evaluate as eval_reps, EvalOptions, EvalReport};
use ssmrec::models::{forward, load_embeddings, save_embeddings, EmbeddingTable};
use ssmrec::theory::{run_suite, SuiteOptions};
use ssmrec::trainer::{train_with, TrainConfig};
use ssmrec::{exec, Exec};

use crate::artifacts::{invalid, load_config, prepare, Invalid, OutDir, Prepared};
use crate::{DataArgs, EvaluateArgs, TrainArgs, VerifyArgs};

pub const THREADS_ENV: &str = "SSMREC_THREADS";

/// 1 for bad user input, 2 for anything that went wrong while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<ssmrec::Error>() {
            return match e {
                ssmrec::Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => 1,
                e if e.is_validation() => 1,
                _ => 2,
            };
        }
    }
    2
}

pub fn apply_thread_cap() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| invalid(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    exec::configure_threads(threads)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn stats(args: &DataArgs) -> Result<u8> {
    let loaded = load_interactions(&args.input, args.format)?;
    print_json(&compute_stats(&loaded.dataset))?;
    Ok(0)
}

/// Test-split metrics; training and validation items are excluded from the
/// ranking.
pub fn test_report(cfg: &TrainConfig, prepared: &Prepared, emb: &EmbeddingTable, exec: Exec) -> ssmrec::Result<EvalReport> {
    let split = &prepared.split;
    let reps = forward(&cfg.model, emb, &split.train, exec)?;
    let opts = EvalOptions {
        k: cfg.top_k,
        similarity: cfg.test_similarity,
        groups: Some(&prepared.groups),
    };
    Ok(eval_reps(&reps, &split.train, Some(&split.validation), &split.test, opts, exec))
}

#[derive(Debug, Serialize)]
struct Summary {
    mean: f64,
    std: f64,
    values: Vec<f64>,
}

impl Summary {
    /// Sample standard deviation; zero for a single run.
    fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Serialize)]
struct Aggregate {
    seeds: Vec<u64>,
    k: usize,
    recall: Summary,
    ndcg: Summary,
    group_recall: Vec<Summary>,
}

pub fn train(args: &TrainArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let seeds = if args.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        args.seeds.clone()
    };
    let prepared = prepare(&args.data, &cfg)?;
    let mut out = OutDir::create(&args.out_dir)?;
    out.write_id_maps(&prepared)?;
    out.write_json("config.json", &cfg)?;
    out.write_json("data_stats.json", &prepared.stats)?;

    let mut reports = Vec::with_capacity(seeds.len());
    let mut csv = format!("seed,{}\n", EvalReport::CSV_HEADER);
    for &seed in &seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let outcome = train_with(&run_cfg, &prepared.split, Exec::default())
            .with_context(|| format!("training with seed {seed}"))?;
        let dir = format!("seed-{seed}");
        let checkpoint = format!("{dir}/embeddings.bin");
        fs::create_dir_all(out.path(&dir))?;
        save_embeddings(&out.path(&checkpoint), &outcome.embeddings)?;
        out.record(&checkpoint)?;
        let history_hash = out.write(&format!("{dir}/history.jsonl"), outcome.history.to_json_lines().as_bytes())?;
        let report = test_report(&run_cfg, &prepared, &outcome.embeddings, Exec::default())?;
        out.write_json(&format!("{dir}/report.json"), &report)?;
        eprintln!(
            "seed {seed}: best epoch {:?}, test recall@{} {:.4}, ndcg {:.4}, history {}",
            outcome.history.best_epoch,
            report.k,
            report.recall,
            report.ndcg,
            &history_hash[..12]
        );
        csv.push_str(&format!("{seed},{}\n", report.csv_row()));
        reports.push(report);
    }
    out.write("results.csv", csv.as_bytes())?;

    let groups = reports[0].group_recall.len();
    let aggregate = Aggregate {
        seeds: seeds.clone(),
        k: cfg.top_k,
        recall: Summary::of(reports.iter().map(|r| r.recall).collect()),
        ndcg: Summary::of(reports.iter().map(|r| r.ndcg).collect()),
        group_recall: (0..groups)
            .map(|g| Summary::of(reports.iter().map(|r| r.group_recall[g]).collect()))
            .collect(),
    };
    out.write_json("aggregate.json", &aggregate)?;
    print_json(&aggregate)?;
    out.finish("train", &args.data, &cfg, seeds)?;
    Ok(0)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let prepared = prepare(&args.data, &cfg)?;
    let emb = load_embeddings(&args.checkpoint)?;
    let (m, n) = (prepared.split.train.num_users(), prepared.split.train.num_items());
    if emb.num_users() != m || emb.num_items() != n {
        return Err(invalid(format!(
            "checkpoint has {} users and {} items but the prepared data has {m} and {n}",
            emb.num_users(),
            emb.num_items()
        )));
    }
    let report = test_report(&cfg, &prepared, &emb, Exec::default())?;
    print_json(&report)?;
    if let Some(dir) = &args.out_dir {
        let mut out = OutDir::create(dir)?;
        out.write_json("report.json", &report)?;
        out.write(
            "report.csv",
            format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()).as_bytes(),
        )?;
        out.finish("evaluate", &args.data, &cfg, vec![cfg.seed])?;
    }
    Ok(0)
}

pub fn verify(args: &VerifyArgs) -> Result<u8> {
    let opts = SuiteOptions {
        seed: args.seed,
        corrupt_gradient: args.corrupt_gradient,
        exec: Exec::default(),
    };
    let records = run_suite(args.suite, &opts)?;
    for r in &records {
        println!(
            "{} {:<32} max_error={:<12.3e} trials={:<8} {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.trials,
            r.detail
        );
    }
    if let Some(path) = &args.json {
        let mut text = serde_json::to_string_pretty(&records)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let failed = records.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", records.len());
        return Ok(3);
    }
    Ok(0)
}
