use anyhow::{Context, Result};

use ssmrec::exec::map_on_pool;
use ssmrec::losses::Similarity;
use ssmrec::models::RecommenderConfig;
use ssmrec::trainer::{train_with, TrainConfig};
use ssmrec::Exec;

use crate::artifacts::{invalid, load_config, prepare, OutDir};
use crate::run::test_report;
use crate::SweepArgs;

const SIMILARITY_GRID: [(Similarity, Similarity); 4] = [
    (Similarity::InnerProduct, Similarity::InnerProduct),
    (Similarity::InnerProduct, Similarity::Cosine),
    (Similarity::Cosine, Similarity::InnerProduct),
    (Similarity::Cosine, Similarity::Cosine),
];

const PROPAGATION_EXPONENTS: [(f64, f64); 3] = [(0.5, 0.0), (0.5, 0.5), (1.0, 0.0)];

/// One value on one axis: a label fragment and the edit it makes.
struct Setting {
    label: String,
    apply: Box<dyn Fn(&mut TrainConfig) + Sync>,
}

fn axis<T: Copy + Sync + 'static>(
    values: &[T],
    label: impl Fn(T) -> String,
    apply: impl Fn(&mut TrainConfig, T) + Copy + Sync + 'static,
) -> Vec<Setting> {
    values
        .iter()
        .map(|&v| Setting {
            label: label(v),
            apply: Box::new(move |c| apply(c, v)),
        })
        .collect()
}

fn axes(args: &SweepArgs) -> Vec<Vec<Setting>> {
    let mut out = Vec::new();
    if !args.temperatures.is_empty() {
        out.push(axis(&args.temperatures, |t| format!("tau={t}"), |c, t| c.loss.temperature = t));
    }
    if !args.l2_coeffs.is_empty() {
        out.push(axis(&args.l2_coeffs, |v| format!("l2={v}"), |c, v| {
            c.l2_coeff = v;
            c.loss.l2_coeff = 0.0;
        }));
    }
    if !args.learning_rates.is_empty() {
        out.push(axis(&args.learning_rates, |v| format!("lr={v}"), |c, v| c.learning_rate = v));
    }
    if !args.layers.is_empty() {
        out.push(axis(&args.layers, |k| format!("K={k}"), |c, k| c.model.layers = k));
    }
    if args.similarity_grid {
        out.push(axis(
            &SIMILARITY_GRID,
            |(tr, te)| format!("{}-{}", tr.short_name(), te.short_name()),
            |c, (tr, te)| {
                c.loss.similarity = tr;
                c.test_similarity = te;
            },
        ));
    }
    if args.propagation_grid {
        let mut presets = Vec::new();
        for user_side in [true, false] {
            for (a0, a1) in PROPAGATION_EXPONENTS {
                presets.push((user_side, a0, a1));
            }
        }
        out.push(axis(
            &presets,
            |(user_side, a0, a1)| format!("{}:{a0}:{a1}", if user_side { "user" } else { "item" }),
            |c, (user_side, a0, a1)| {
                c.model = if user_side {
                    RecommenderConfig::svdpp_user(a0, a1)
                } else {
                    RecommenderConfig::svdpp_item(a0, a1)
                };
            },
        ));
    }
    out
}

struct Point {
    label: String,
    config: TrainConfig,
}

/// Cartesian product in row-major order (the last axis varies fastest).
fn expand(base: &TrainConfig, axes: &[Vec<Setting>]) -> Vec<Point> {
    let mut points = vec![Point {
        label: String::new(),
        config: base.clone(),
    }];
    for ax in axes {
        let mut next = Vec::with_capacity(points.len() * ax.len());
        for p in &points {
            for s in ax {
                let mut config = p.config.clone();
                (s.apply)(&mut config);
                let label = if p.label.is_empty() {
                    s.label.clone()
                } else {
                    format!("{} {}", p.label, s.label)
                };
                next.push(Point { label, config });
            }
        }
        points = next;
    }
    if points[0].label.is_empty() {
        points[0].label = "base".into();
    }
    points
}

const CSV_HEADER: &str = "point,label,loss,model,alpha0,alpha1,layers,temperature,l2_coeff,learning_rate,\
train_similarity,test_similarity,status,best_epoch,validation_recall,recall,ndcg";

struct Row {
    status: String,
    best_epoch: Option<usize>,
    validation_recall: Option<f64>,
    recall: Option<f64>,
    ndcg: Option<f64>,
}

fn csv_row(index: usize, p: &Point, r: &Row) -> String {
    let c = &p.config;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let model = serde_json::to_value(c.model.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let (a0, a1) = c
        .model
        .effective_exponents()
        .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
    format!(
        "{index},{},{},{model},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        p.label,
        c.loss.kind.name(),
        a0,
        a1,
        c.model.layers,
        c.loss.temperature,
        c.effective_l2(),
        c.learning_rate,
        c.loss.similarity.short_name(),
        c.test_similarity.short_name(),
        r.status,
        r.best_epoch.map_or_else(String::new, |e| e.to_string()),
        opt(r.validation_recall),
        opt(r.recall),
        opt(r.ndcg),
    )
}

pub fn sweep(args: &SweepArgs) -> Result<u8> {
    if args.parallel == 0 {
        return Err(invalid("--parallel must be at least 1"));
    }
    let base = load_config(&args.config)?;
    let axes = axes(args);
    let size = axes.iter().map(Vec::len).try_fold(1usize, |acc, n| acc.checked_mul(n));
    match size {
        Some(n) if n <= args.max_points => {}
        _ => {
            return Err(invalid(format!(
                "grid has {} points, more than --max-points {}",
                size.map_or_else(|| "too many".into(), |n| n.to_string()),
                args.max_points
            )))
        }
    }
    let points = expand(&base, &axes);
    for p in &points {
        p.config.validate().with_context(|| format!("grid point {}", p.label))?;
    }

    let prepared = prepare(&args.data, &base)?;
    let mut out = OutDir::create(&args.out_dir)?;
    out.write_id_maps(&prepared)?;
    out.write_json("data_stats.json", &prepared.stats)?;

    // Concurrent points each get a sequential inner loop; results do not
    // depend on the choice.
    let inner = if args.parallel > 1 { Exec::Sequential } else { Exec::default() };
    let rows: Vec<Row> = map_on_pool(args.parallel, points.len(), |i| {
        let p = &points[i];
        let result = train_with(&p.config, &prepared.split, inner)
            .and_then(|o| Ok((test_report(&p.config, &prepared, &o.embeddings, inner)?, o)));
        match result {
            Ok((report, outcome)) => {
                eprintln!("{}: recall@{} {:.4}, ndcg {:.4}", p.label, report.k, report.recall, report.ndcg);
                Row {
                    status: "ok".into(),
                    best_epoch: outcome.history.best_epoch,
                    validation_recall: outcome.history.best_recall(),
                    recall: Some(report.recall),
                    ndcg: Some(report.ndcg),
                }
            }
            Err(e) => {
                eprintln!("{}: failed: {e}", p.label);
                Row {
                    status: match e {
                        ssmrec::Error::Divergence { .. } => "diverged".into(),
                        _ => "failed".into(),
                    },
                    best_epoch: None,
                    validation_recall: None,
                    recall: None,
                    ndcg: None,
                }
            }
        }
    });

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for (i, (p, r)) in points.iter().zip(&rows).enumerate() {
        csv.push_str(&csv_row(i, p, r));
        csv.push('\n');
    }
    out.write("sweep.csv", csv.as_bytes())?;
    print!("{csv}");
    out.finish("sweep", &args.data, &base, vec![base.seed])?;

    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} grid points did not finish", rows.len());
        return Ok(2);
    }
    Ok(0)
}
