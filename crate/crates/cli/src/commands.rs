use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde_json::json;

use rein_core::backbone;
use rein_core::evalkit::IouReport;
use rein_core::experiment::{adapt_da, assemble, evaluate, train_dg, ExperimentConfig};
use rein_core::model::{init_model, Model};
use rein_core::numeric::{checkpoint, ParamStore};
use rein_core::rein::count_trainable;
use rein_core::synthdata::{gen_pair, Dataset, Domain, LoadOptions, Split};
use rein_core::verify::{count_anchors, gradient_suite, matcher_suite, GRAD_TOLERANCE};
use rein_core::Error;

use crate::{Cli, Command};

/// Raised when a self-check does not hold.
#[derive(Debug)]
pub struct VerificationFailed(pub usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} verification check(s) failed", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_)) => 3,
        Some(Error::NonFinite(_)) => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(m) = cli.mode {
        c.model.mode = m;
    }
    if let Some(a) = cli.ablate {
        c.adapt.ablation = a;
    }
    c.sync();
    c.validate()?;
    Ok(c)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let d = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(
        &cfg.data_dir,
        LoadOptions {
            target_labels: false,
        },
    )
    .with_context(|| {
        format!(
            "loading dataset {} (run gen-data first)",
            cfg.data_dir.display()
        )
    })?;
    let labeled = Dataset::load(
        &cfg.data_dir,
        LoadOptions {
            target_labels: true,
        },
    )?;
    if train.spec.classes != cfg.data.classes || train.spec.size != cfg.data.size {
        return Err(Error::Config(format!(
            "dataset has {} classes at {}px, config expects {} at {}px",
            train.spec.classes, train.spec.size, cfg.data.classes, cfg.data.size
        ))
        .into());
    }
    Ok((train, labeled))
}

fn eval_both(
    cfg: &ExperimentConfig,
    labeled: &Dataset,
    params: &ParamStore,
) -> Result<(IouReport, IouReport)> {
    let model = Model::new(cfg.model)?;
    let s = evaluate(
        &model,
        &[params],
        &labeled.select(Domain::Source, Some(Split::Val)),
    )?;
    let t = evaluate(
        &model,
        &[params],
        &labeled.select(Domain::Target, Some(Split::Val)),
    )?;
    Ok((s, t))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => gen_data(cli),
        Command::TrainDg => cmd_train_dg(cli),
        Command::AdaptDa { checkpoint } => cmd_adapt_da(cli, checkpoint),
        Command::Eval { checkpoint } => cmd_eval(cli, checkpoint),
        Command::Verify => verify(cli),
        Command::ParamCount => param_count(cli),
        Command::Report => report(cli),
    }
}

fn gen_data(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    if let Ok(mut entries) = fs::read_dir(&dir) {
        if entries.next().is_some() && !cli.force {
            return Err(Error::Config(format!(
                "{} is not empty (pass --force to write into it)",
                dir.display()
            ))
            .into());
        }
    }
    let m = gen_pair(&cfg.data, cfg.n_source, cfg.n_target, &dir)?;
    info!("wrote {} samples to {}", m.rows.len(), dir.display());
    println!(
        "{} images ({} source, {} target) in {}",
        m.rows.len(),
        cfg.n_source,
        cfg.n_target,
        dir.display()
    );
    Ok(())
}

fn cmd_train_dg(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let out = out_dir(cli)?;
    let (train, labeled) = load_datasets(&cfg)?;
    let tag = format!("dg_{}", cfg.model.mode);
    write(&out.join(format!("config_{tag}.kv")), &cfg.to_kv())?;
    info!(
        "{tag}: {} iterations, batch {}",
        cfg.train.iterations, cfg.train.batch
    );
    let log_path = out.join(format!("metrics_{tag}.jsonl"));
    let mut log = create(&log_path)?;
    let params = train_dg(&cfg, &train, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = out.join(format!("{tag}.ckpt"));
    let bytes = checkpoint::save(&params, &ckpt)?;
    let (s, t) = eval_both(&cfg, &labeled, &params)?;
    s.write(&out, &format!("miou_{tag}_source"))?;
    t.write(&out, &format!("miou_{tag}_target"))?;
    let summary = json!({
        "command": "train-dg", "tag": tag, "mode": cfg.model.mode.to_string(), "seed": cfg.seed,
        "source_miou": s.miou, "target_miou": t.miou, "checkpoint_bytes": bytes,
    });
    write(
        &out.join(format!("summary_{tag}.json")),
        &summary.to_string(),
    )?;
    println!(
        "{tag}: source mIoU {:.2}, target mIoU {:.2}, checkpoint {}",
        100.0 * s.miou,
        100.0 * t.miou,
        ckpt.display()
    );
    Ok(())
}

fn cmd_adapt_da(cli: &Cli, ckpt: &Path) -> Result<()> {
    let cfg = config(cli)?;
    let out = out_dir(cli)?;
    let (train, labeled) = load_datasets(&cfg)?;
    let dg = assemble(&cfg.model, checkpoint::load(ckpt)?)?;
    let tag = format!("da_{}", cfg.adapt.ablation.to_string().replace(',', "+"));
    write(&out.join(format!("config_{tag}.kv")), &cfg.to_kv())?;
    info!(
        "{tag}: {} iterations, batch {}",
        cfg.adapt_iterations, cfg.adapt_batch
    );
    let log_path = out.join(format!("metrics_{tag}.jsonl"));
    let mut log = create(&log_path)?;
    let state = adapt_da(&cfg, &train, &dg, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let light = out.join(format!("{tag}.ckpt"));
    let bytes = checkpoint::save(&state.student, &light)?;
    let full_bytes = checkpoint::encode(&state.student_model()).len();
    let model = Model::new(cfg.model)?;
    let tv = labeled.select(Domain::Target, Some(Split::Val));
    let before = evaluate(&model, &[&dg], &tv)?;
    let after = evaluate(&model, &[&state.student_model()], &tv)?;
    after.write(&out, &format!("miou_{tag}_target"))?;
    let summary = json!({
        "command": "adapt-da", "tag": tag, "mode": cfg.model.mode.to_string(), "seed": cfg.seed,
        "ablation": cfg.adapt.ablation.to_string(), "dg_target_miou": before.miou, "target_miou": after.miou,
        "checkpoint_bytes": bytes, "full_checkpoint_bytes": full_bytes,
    });
    write(
        &out.join(format!("summary_{tag}.json")),
        &summary.to_string(),
    )?;
    println!(
        "{tag}: target mIoU {:.2} -> {:.2}; adaptation checkpoint {bytes} bytes ({:.1}% of full)",
        100.0 * before.miou,
        100.0 * after.miou,
        100.0 * bytes as f64 / full_bytes as f64
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, ckpt: &Path) -> Result<()> {
    let cfg = config(cli)?;
    let out = out_dir(cli)?;
    let (_, labeled) = load_datasets(&cfg)?;
    let params = assemble(&cfg.model, checkpoint::load(ckpt)?)?;
    let (s, t) = eval_both(&cfg, &labeled, &params)?;
    s.write(&out, "miou_eval_source")?;
    t.write(&out, "miou_eval_target")?;
    println!(
        "source mIoU {:.2}, target mIoU {:.2}",
        100.0 * s.miou,
        100.0 * t.miou
    );
    for (c, (a, b)) in s.per_class.iter().zip(&t.per_class).enumerate() {
        let f = |v: &Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        println!("  class {c}: source {} target {}", f(a), f(b));
    }
    Ok(())
}

fn verify(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let mut failures = 0;
    println!("parameter counts (m=100, r=16, c'=256):");
    for a in count_anchors() {
        let ok = a.matches();
        failures += usize::from(!ok);
        println!(
            "  N={:<2} c={:<4} computed {:>10}  rounds to {:<6} published {:<6} {}",
            a.layers,
            a.dim,
            a.computed,
            a.rounded(),
            a.published,
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    let m = matcher_suite(200, cfg.seed)?;
    let ok = m.passed == m.trials && m.permutation_gap < 1e-9;
    failures += usize::from(!ok);
    println!(
        "matcher: {}/{} exhaustive matches, permutation gap {:.1e} {}",
        m.passed,
        m.trials,
        m.permutation_gap,
        if ok { "ok" } else { "FAIL" }
    );
    println!("gradients (h=1e-5, tolerance {GRAD_TOLERANCE:e}):");
    for (name, r) in gradient_suite(&cfg.model, cfg.seed)? {
        failures += usize::from(!r.pass);
        let worst = r.worst().map_or(String::new(), |w| w.name.clone());
        println!(
            "  {name:<13} max rel {:.2e} (worst {worst}) {}",
            r.max_rel,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(VerificationFailed(failures).into());
    }
    println!("all checks passed");
    Ok(())
}

fn param_count(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let m = &cfg.model;
    let store = init_model(m, cfg.seed)?;
    let count = |pred: &dyn Fn(&str) -> bool| {
        store
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, p)| p.len())
            .sum::<usize>()
    };
    println!("mode {}", m.mode);
    println!("  backbone  {:>10}", m.backbone.param_count());
    println!("  head      {:>10}", m.head.param_count());
    println!(
        "  rein      {:>10}  (closed form)",
        count_trainable(&m.rein)
    );
    println!("  stored    {:>10}", store.numel());
    println!("  trainable {:>10}", store.numel_trainable());
    println!(
        "  non-backbone stored {}",
        count(&|n| !n.starts_with(backbone::PREFIX))
    );
    println!("published settings (m=100, r=16, c'=256):");
    for a in count_anchors() {
        println!(
            "  N={:<2} c={:<4} {:>10} -> {} (published {})",
            a.layers,
            a.dim,
            a.computed,
            a.rounded(),
            a.published
        );
    }
    Ok(())
}

fn report(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    let mut summaries = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(&out)
        .map_err(|e| Error::io(&out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    for p in &names {
        let Some(stem) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if stem.starts_with("summary_") && stem.ends_with(".json") {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?;
            summaries.push(v);
        }
    }
    let mut table =
        String::from("tag,command,mode,ablation,seed,source_miou,target_miou,dg_target_miou\n");
    for v in &summaries {
        let f = |k: &str| match &v[k] {
            serde_json::Value::Null => String::new(),
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f("tag"),
            f("command"),
            f("mode"),
            f("ablation"),
            f("seed"),
            f("source_miou"),
            f("target_miou"),
            f("dg_target_miou")
        ));
    }
    write(&out.join("report.csv"), &table)?;

    let mut curves = String::from("tag,iter,loss\n");
    for p in &names {
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(tag) = name
            .strip_prefix("metrics_")
            .and_then(|n| n.strip_suffix(".jsonl"))
        else {
            continue;
        };
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format {
                path: p.clone(),
                msg: e.to_string(),
            })?;
            let loss = if v["loss"].is_null() {
                &v["total"]
            } else {
                &v["loss"]
            };
            curves.push_str(&format!("{tag},{},{}\n", v["iter"], loss));
        }
    }
    write(&out.join("curves.csv"), &curves)?;
    print!("{table}");
    println!(
        "{} runs; curves in {}",
        summaries.len(),
        out.join("curves.csv").display()
    );
    Ok(())
}
