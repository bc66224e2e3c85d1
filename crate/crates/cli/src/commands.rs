use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use citycond::data::Split;
use citycond::engine::{
    append_result, build_model, cap_per_city, evaluate as evaluate_samples, load_dataset,
    read_results, run_matrix, train as train_prepared, write_results, DataSource, ExperimentConfig,
    Prepared, Regime, RunStatus, Trained,
};
use citycond::report::{
    aggregate as aggregate_results, attention_csv, attention_report, read_table, render_structured,
    report as write_report, ReportFormat,
};
use citycond::{Error, Result};

use crate::{AggregateArgs, EvaluateArgs, ReportArgs, RunArgs, TransferArgs};

const RESULTS: &str = "results.ndjson";
const CONFIG: &str = "config.toml";
const CHECKPOINT: &str = "checkpoint.json";

/// Parameter values of a trained model, tied to the config that built it.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    seed: u64,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

/// Config file (or defaults), then overrides, then flags; validated.
fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    let (text, origin) = match &args.config {
        Some(p) => (
            std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?,
            p.clone(),
        ),
        None => (String::new(), PathBuf::from("<defaults>")),
    };
    // a config file that does not parse is a config problem, not a data one
    let mut cfg =
        ExperimentConfig::from_toml_with(&text, &args.overrides, &origin).map_err(|e| match e {
            Error::Parse { .. } => Error::config(e.to_string()),
            e => e,
        })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(frac) = args.frac {
        cfg.regime = Regime::Lowdata { frac };
    }
    if let Some(v) = args.variant {
        cfg.citycond.variant = v;
    }
    if let Some(b) = args.backbone {
        cfg.backbone.kind = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn generate_data(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    if cfg.data.source == DataSource::Dir {
        return Err(Error::config(
            "generate-data needs data.source = \"synthetic\" or \"trajectories\"",
        ));
    }
    let ds = load_dataset(&cfg.data)?;
    ds.save(&args.out)?;
    println!("wrote {} cities to {}", ds.cities.len(), args.out.display());
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    Prepared::new(&load_dataset(&cfg.data)?, &cfg.data)
}

/// Trains `cfg` and writes the record, resolved config and checkpoint.
fn run_one(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = prepare(cfg)?;
    let Trained { result, model } = train_prepared(cfg, &data)?;
    create_dir(out)?;
    write_results(&out.join(RESULTS), std::slice::from_ref(&result))?;
    write_file(&out.join(CONFIG), &cfg.to_toml_string()?)?;
    let ckpt = Checkpoint {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        names: model.store.iter().map(|(_, p)| p.name.clone()).collect(),
        values: model.store.values(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::Run(e.to_string()))?;
    write_file(&out.join(CHECKPOINT), &json)?;

    let headline = result
        .test
        .as_ref()
        .or(result.transfer.as_ref().map(|t| &t.post))
        .and_then(|m| m.primary());
    println!(
        "{} {:?} primary={}",
        result.run_id(),
        result.status,
        headline.map_or("--".into(), |v| v.to_string())
    );
    if let Some(t) = &result.transfer {
        let show =
            |m: &citycond::engine::Metrics| m.primary().map_or("--".into(), |v| v.to_string());
        println!(
            "{}->{} pre={} post={}",
            t.train_city,
            t.test_city,
            show(&t.pre),
            show(&t.post)
        );
    }
    if result.status == RunStatus::Diverged {
        return Err(Error::Run(format!(
            "{} diverged; record written to {}",
            result.run_id(),
            out.display()
        )));
    }
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<()> {
    run_one(&resolve(args)?, &args.out)
}

pub fn transfer(args: &TransferArgs) -> Result<()> {
    let mut cfg = resolve(&args.run)?;
    match (&mut cfg.regime, &args.source, &args.target) {
        (Regime::Crosscity { source, target, .. }, s, t) => {
            if let Some(s) = s {
                source.clone_from(s);
            }
            if let Some(t) = t {
                target.clone_from(t);
            }
        }
        (_, Some(s), Some(t)) => cfg.regime = Regime::crosscity(s, t),
        _ => {
            return Err(Error::Usage(
                "transfer needs --source and --target unless the config sets a crosscity regime"
                    .into(),
            ))
        }
    }
    cfg.validate()?;
    run_one(&cfg, &args.run.out)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(Error::Usage(format!(
                "unknown split {other:?} (train, val or test)"
            )))
        }
    };
    let cfg = ExperimentConfig::load(&args.run_dir.join(CONFIG), &[])?;
    let path = args.run_dir.join(CHECKPOINT);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    if ckpt.config_hash != cfg.hash() || ckpt.seed != cfg.seed {
        return Err(Error::data(format!(
            "{} was not produced by {}",
            path.display(),
            CONFIG
        )));
    }
    let data = prepare(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let sizes: Vec<usize> = model.store.iter().map(|(_, p)| p.tensor.numel()).collect();
    if names != ckpt.names || ckpt.values.iter().map(Vec::len).ne(sizes) {
        return Err(Error::data(format!(
            "{} does not match the model layout",
            path.display()
        )));
    }
    model.store.set_values(&ckpt.values);

    let cities = match &cfg.regime {
        Regime::Crosscity { target, .. } => {
            let c = data.cities.iter().position(|c| &c.name == target);
            vec![c.ok_or_else(|| Error::config(format!("unknown city {target:?}")))?]
        }
        _ => data.all_cities(),
    };
    let samples = cap_per_city(
        data.split_samples(split, &cities),
        cfg.train.max_eval_windows,
    );
    let metrics = evaluate_samples(&model, &data, &samples, false)?.metrics;
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Run(e.to_string()))?;
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    create_dir(&out)?;
    write_file(
        &out.join(format!("eval_{}.json", args.split)),
        &(json.clone() + "\n"),
    )?;
    println!("{json}");
    Ok(())
}

pub fn matrix(args: &RunArgs) -> Result<()> {
    let base = resolve(args)?;
    let configs = base.expand();
    for c in &configs {
        c.validate()?;
    }
    create_dir(&args.out)?;
    let path = args.out.join(RESULTS);
    let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let total = configs.len();
    let mut done = 0;
    let mut io_error = None;
    let results = run_matrix(&configs, |r| {
        done += 1;
        eprintln!("[{done}/{total}] {} {:?}", r.run_id(), r.status);
        if io_error.is_none() {
            io_error = append_result(&mut file, r)
                .and_then(|()| file.flush())
                .err();
        }
    });
    if let Some(e) = io_error {
        return Err(Error::io(&path, e));
    }
    let failed = results
        .iter()
        .filter(|r| r.status == RunStatus::Failed)
        .count();
    println!("wrote {} records to {}", results.len(), path.display());
    if failed > 0 {
        return Err(Error::Run(format!(
            "{failed} of {total} runs failed; see the error field of their records"
        )));
    }
    Ok(())
}

pub fn aggregate(args: &AggregateArgs) -> Result<()> {
    let mut results = Vec::new();
    for p in &args.results {
        results.extend(read_results(p)?);
    }
    let table = aggregate_results(&results)?;
    let attention = attention_report(&results, args.period, args.buckets)?;
    create_dir(&args.out)?;
    let path = args.out.join("aggregate.json");
    write_file(&path, &render_structured(&table)?)?;
    println!("wrote {} rows to {}", table.rows.len(), path.display());
    if attention.rows.is_empty() {
        for w in &attention.warnings {
            eprintln!("warning: {w}");
        }
    } else {
        let path = args.out.join("attention.csv");
        write_file(&path, &attention_csv(&attention))?;
        println!(
            "wrote {} attention rows to {}",
            attention.rows.len(),
            path.display()
        );
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let table = read_table(&args.table)?;
    for p in write_report(&table, format, &args.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
