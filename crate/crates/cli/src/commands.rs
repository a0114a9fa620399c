use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stackdrive::datagen::generate_population;
use stackdrive::dataset::Dataset;
use stackdrive::learning::{adapt_driver, run_meta_training, LossRecord};
use stackdrive::planner::{
    episode_json, parse_override, receding_horizon_drive, render_svg, DriveMode, SimulatedDriver,
};
use stackdrive::{DriverTypeParams, UtilityTable, VehicleState};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{Cli, Command};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let out = cli.out.clone();
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData { types, seed, samples, policies } => {
            if let Some(seed) = seed {
                cfg.datagen.seed = seed;
                cfg.datagen.policies.seed = seed;
            }
            if let Some(n) = samples {
                cfg.datagen.samples_per_type = n;
            }
            if let Some(n) = policies {
                cfg.datagen.policies.count = n;
            }
            cfg.validate()?;
            gen_data(&cfg, &out, config, &types)
        }
        Command::MetaTrain { data, iters, seed, seed_sweep, first_order } => {
            if let Some(n) = iters {
                cfg.learning.max_outer_iters = n;
            }
            if let Some(seed) = seed {
                cfg.learning.seed = seed;
            }
            cfg.learning.first_order |= first_order;
            cfg.validate()?;
            let data = data.unwrap_or_else(|| out.join("data"));
            meta_train(&cfg, &out, config, &data, seed_sweep)
        }
        Command::Adapt { driver_type, meta, data, seed, adapt_iters, adapt_samples } => {
            if let Some(seed) = seed {
                cfg.learning.seed = seed;
            }
            if let Some(c) = adapt_iters {
                cfg.learning.adapt_iters = c;
            }
            if let Some(k) = adapt_samples {
                cfg.learning.adapt_sample_size = k;
            }
            cfg.validate()?;
            let meta = meta.unwrap_or_else(|| out.join("meta.json"));
            let data = data.unwrap_or_else(|| out.join("data"));
            adapt(&cfg, &out, config, driver_type, &meta, &data)
        }
        Command::Drive { driver_type, x0, mode, utility, overrides, schedule, seed, name } => {
            if let Some(m) = schedule {
                cfg.planner.schedule_mode = m;
            }
            if let Some(seed) = seed {
                cfg.planner.seed = seed;
            }
            cfg.validate()?;
            let request = DriveRequest {
                driver_type,
                x0: x0.unwrap_or_else(|| default_start(driver_type)),
                mode,
                utility,
                overrides,
                name,
            };
            drive(&cfg, &out, config, &request).map(|_| ())
        }
        Command::Eval { episodes } => {
            let dir = episodes.unwrap_or_else(|| out.join("episodes"));
            eval(&out, config, &dir)
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

/// Initial state used for each preset when none is given.
pub fn default_start(driver_type: u32) -> VehicleState {
    match driver_type {
        1 | 3 => VehicleState::new(0, 0, 0),
        _ => VehicleState::new(0, 1, 0),
    }
}

fn preset(id: u32) -> CliResult<DriverTypeParams> {
    DriverTypeParams::preset(id).ok_or(CliError::Core(stackdrive::Error::UnknownDriverType(id)))
}

pub fn dataset_path(dir: &Path, driver_type: u32) -> PathBuf {
    dir.join(format!("type_{driver_type}.jsonl"))
}

pub fn adapted_path(out: &Path, driver_type: u32) -> PathBuf {
    out.join("adapted").join(format!("type_{driver_type}.json"))
}

fn load_dataset(cfg: &RunConfig, dir: &Path, driver_type: u32) -> CliResult<(Dataset, PathBuf)> {
    let path = dataset_path(dir, driver_type);
    if !path.is_file() {
        return Err(CliError::missing(&path, "dataset not found; run gen-data first"));
    }
    let data = Dataset::load(&path, &cfg.scenario, driver_type)?;
    Ok((data, path))
}

fn load_table(cfg: &RunConfig, path: &Path) -> CliResult<UtilityTable> {
    if !path.is_file() {
        return Err(CliError::missing(path, "utility table not found"));
    }
    let (table, _) = UtilityTable::load(path)?;
    table.check_scenario(&cfg.scenario).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(table)
}

fn gen_data(cfg: &RunConfig, out: &Path, config: Option<&Path>, types: &[u32]) -> CliResult<()> {
    let params: Vec<DriverTypeParams> = types.iter().map(|&t| preset(t)).collect::<CliResult<_>>()?;
    let datasets = generate_population(&params, &cfg.scenario, &cfg.datagen, &cfg.solver)?;
    let dir = out.join("data");
    std::fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    for (id, data) in &datasets {
        let path = dataset_path(&dir, *id);
        data.save(&path)?;
        println!("type {id}: {} samples -> {}", data.len(), path.display());
        outputs.push(path);
    }
    RunManifest::new("gen-data", config, cfg.datagen.seed).write(out, "gen-data", &[], &outputs)?;
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[LossRecord], tracked: &[VehicleState]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string(), "overall".to_string()];
    header.extend(tracked.iter().map(|x| format!("state_{}_{}_{}", x.p, x.y, x.v)));
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![r.iter.to_string(), r.overall.to_string()];
        row.extend(r.per_state.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_sweep_csv(path: &Path, runs: &[Vec<LossRecord>], tracked: &[VehicleState]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iter".to_string(), "overall_mean".to_string(), "overall_std".to_string()];
    for x in tracked {
        let tag = format!("state_{}_{}_{}", x.p, x.y, x.v);
        header.push(format!("{tag}_mean"));
        header.push(format!("{tag}_std"));
    }
    w.write_record(&header)?;
    let iters = runs.first().map_or(0, Vec::len);
    for k in 0..iters {
        let overall: Vec<f64> = runs.iter().map(|h| h[k].overall).collect();
        let (m, s) = mean_std(&overall);
        let mut row = vec![(k + 1).to_string(), m.to_string(), s.to_string()];
        for j in 0..tracked.len() {
            let vals: Vec<f64> = runs.iter().filter_map(|h| h[k].per_state[j]).collect();
            if vals.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (m, s) = mean_std(&vals);
                row.extend([m.to_string(), s.to_string()]);
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn meta_train(cfg: &RunConfig, out: &Path, config: Option<&Path>, data_dir: &Path, sweep: Option<usize>) -> CliResult<()> {
    let mut datasets = BTreeMap::new();
    let mut inputs = Vec::new();
    for &id in &cfg.population.types {
        let (data, path) = load_dataset(cfg, data_dir, id)?;
        datasets.insert(id, data);
        inputs.push(path);
    }
    std::fs::create_dir_all(out)?;
    let tracked = &cfg.learning.tracked_states;
    let base = run_meta_training(&datasets, &cfg.population, &cfg.scenario, &cfg.learning, &cfg.solver)?;
    let meta_path = out.join("meta.json");
    let info = json!({"kind": "meta", "iters": cfg.learning.max_outer_iters, "seed": cfg.learning.seed});
    base.table.save(&meta_path, Some(info))?;
    let loss_path = out.join("meta_loss.csv");
    write_loss_csv(&loss_path, &base.history, tracked)?;
    let mut outputs = vec![meta_path.clone(), loss_path];
    if let (Some(first), Some(last)) = (base.history.first(), base.history.last()) {
        println!("loss {:.4} -> {:.4} over {} iterations", first.overall, last.overall, base.history.len());
    }
    println!("meta utility -> {}", meta_path.display());

    if let Some(n) = sweep.filter(|&n| n > 0) {
        let mut runs = vec![base.history];
        for k in 1..n as u64 {
            let learning = stackdrive::learning::LearnConfig { seed: cfg.learning.seed + k, ..cfg.learning.clone() };
            let run = run_meta_training(&datasets, &cfg.population, &cfg.scenario, &learning, &cfg.solver)?;
            runs.push(run.history);
        }
        for (k, h) in runs.iter().enumerate() {
            let p = out.join(format!("meta_loss_seed{}.csv", cfg.learning.seed + k as u64));
            write_loss_csv(&p, h, tracked)?;
            outputs.push(p);
        }
        let p = out.join("meta_sweep.csv");
        write_sweep_csv(&p, &runs, tracked)?;
        println!("seed sweep of {n} runs -> {}", p.display());
        outputs.push(p);
    }
    RunManifest::new("meta-train", config, cfg.learning.seed).write(out, "meta-train", &inputs, &outputs)?;
    Ok(())
}

fn adapt(cfg: &RunConfig, out: &Path, config: Option<&Path>, driver_type: u32, meta: &Path, data_dir: &Path) -> CliResult<()> {
    preset(driver_type)?;
    let table = load_table(cfg, meta)?;
    let (data, data_path) = load_dataset(cfg, data_dir, driver_type)?;
    let adapted = adapt_driver(&table, &data, &cfg.scenario, &cfg.learning, &cfg.solver)?;
    let path = adapted_path(out, driver_type);
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    let info = json!({
        "kind": "adapted",
        "driver_type": driver_type,
        "adapt_iters": cfg.learning.adapt_iters,
        "adapt_sample_size": cfg.learning.adapt_sample_size,
        "seed": cfg.learning.seed,
    });
    adapted.save(&path, Some(info))?;
    println!("type {driver_type} adapted -> {}", path.display());
    RunManifest::new("adapt", config, cfg.learning.seed).write(
        out,
        &format!("adapt-type{driver_type}"),
        &[meta.to_path_buf(), data_path],
        std::slice::from_ref(&path),
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DriveRequest {
    pub driver_type: u32,
    pub x0: VehicleState,
    pub mode: DriveMode,
    pub utility: String,
    pub overrides: Vec<String>,
    pub name: Option<String>,
}

fn mode_name(mode: DriveMode) -> &'static str {
    match mode {
        DriveMode::Shared => "shared",
        DriveMode::DriverOnly => "driver_only",
    }
}

/// Drives one episode and writes `<stem>.json` and `<stem>.svg`; returns the JSON path.
pub fn drive(cfg: &RunConfig, out: &Path, config: Option<&Path>, req: &DriveRequest) -> CliResult<PathBuf> {
    let params = preset(req.driver_type)?;
    let s = &cfg.scenario;
    if !s.in_bounds(req.x0) {
        return Err(CliError::Config(format!("initial state {} outside grid", req.x0)));
    }
    let overrides = req
        .overrides
        .iter()
        .map(|o| parse_override(o).map_err(|e| CliError::Config(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;

    let (table, label, inputs) = match (req.mode, req.utility.as_str()) {
        (DriveMode::DriverOnly, _) => (UtilityTable::for_scenario(s), "none".to_string(), vec![]),
        (_, "adapted") => {
            let p = adapted_path(out, req.driver_type);
            (load_table(cfg, &p)?, "adapted".into(), vec![p])
        }
        (_, "meta") => {
            let p = out.join("meta.json");
            (load_table(cfg, &p)?, "meta".into(), vec![p])
        }
        (_, file) => {
            let p = PathBuf::from(file);
            let label = p.file_stem().map_or("file".into(), |x| x.to_string_lossy().into_owned());
            (load_table(cfg, &p)?, label, vec![p])
        }
    };

    let seed = cfg.planner.seed;
    let mut driver = SimulatedDriver::new(params, s, seed).with_overrides(overrides);
    let log = receding_horizon_drive(&table, &mut driver, req.x0, s, req.mode, &cfg.planner, &cfg.solver)?;

    let mut doc = episode_json(&log, s, req.mode, Some(req.driver_type));
    let extra = json!({
        "utility": label,
        "seed": seed,
        "x0": req.x0,
        "schedule_mode": cfg.planner.schedule_mode,
        "overrides": req.overrides,
    });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }

    let stem = req.name.clone().unwrap_or_else(|| {
        let dev = if req.overrides.is_empty() { "" } else { "_dev" };
        format!("type{}_{}_{}_s{}{}", req.driver_type, mode_name(req.mode), label, seed, dev)
    });
    let dir = out.join("episodes");
    std::fs::create_dir_all(&dir)?;
    let json_path = dir.join(format!("{stem}.json"));
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc).expect("episode serializes") + "\n")?;
    std::fs::write(&svg_path, render_svg(&log, req.x0, s))?;

    let summary = stackdrive::planner::evaluate_episode(&log);
    println!(
        "type {} {} ({}): {} after {} steps, reward {:.3}",
        req.driver_type,
        mode_name(req.mode),
        label,
        if summary.reached_goal { "reached goal" } else { "did not reach goal" },
        summary.steps,
        summary.final_reward
    );
    RunManifest::new("drive", config, seed).write(out, &format!("drive-{stem}"), &inputs, &[json_path.clone(), svg_path])?;
    Ok(json_path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub driver_type: u64,
    pub mode: String,
    pub utility: String,
    pub seed: u64,
    pub deviations: usize,
    pub reached_goal: bool,
    pub steps: u64,
    pub final_reward: f64,
}

fn eval_row(doc: &Value) -> Option<EvalRow> {
    Some(EvalRow {
        driver_type: doc.get("driver_type")?.as_u64()?,
        mode: doc.get("mode")?.as_str()?.to_string(),
        utility: doc.get("utility")?.as_str()?.to_string(),
        seed: doc.get("seed")?.as_u64()?,
        deviations: doc.get("overrides").and_then(Value::as_array).map_or(0, Vec::len),
        reached_goal: doc.get("reached_goal")?.as_bool()?,
        steps: doc.pointer("/summary/steps")?.as_u64()?,
        final_reward: doc.pointer("/summary/final_reward")?.as_f64()?,
    })
}

/// Reads every episode document in `dir`, sorted by type, mode, utility, deviations, seed.
pub fn collect_rows(dir: &Path) -> CliResult<Vec<EvalRow>> {
    let mut rows = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&path)?;
                let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if let Some(row) = eval_row(&doc) {
                    rows.push(row);
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.driver_type, &a.mode, &a.utility, a.deviations, a.seed)
            .cmp(&(b.driver_type, &b.mode, &b.utility, b.deviations, b.seed))
            .then(a.final_reward.total_cmp(&b.final_reward))
    });
    Ok(rows)
}

fn eval(out: &Path, config: Option<&Path>, dir: &Path) -> CliResult<()> {
    let rows = collect_rows(dir)?;
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["type", "mode", "utility", "deviations", "seed", "reached_goal", "steps", "final_reward"])?;
    for r in &rows {
        w.write_record([
            r.driver_type.to_string(),
            r.mode.clone(),
            r.utility.clone(),
            r.deviations.to_string(),
            r.seed.to_string(),
            r.reached_goal.to_string(),
            r.steps.to_string(),
            r.final_reward.to_string(),
        ])?;
    }
    w.flush()?;

    let mut groups: BTreeMap<(u64, String, String, usize), Vec<&EvalRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.driver_type, r.mode.clone(), r.utility.clone(), r.deviations)).or_default().push(r);
    }
    let mut text = format!("{:<5} {:<12} {:<10} {:>4} {:>9} {:>10} {:>11}\n", "type", "mode", "utility", "dev", "reached", "mean steps", "mean reward");
    for ((t, mode, utility, dev), rs) in &groups {
        let n = rs.len() as f64;
        let reached = rs.iter().filter(|r| r.reached_goal).count();
        let steps = rs.iter().map(|r| r.steps as f64).sum::<f64>() / n;
        let reward = rs.iter().map(|r| r.final_reward).sum::<f64>() / n;
        text.push_str(&format!(
            "{t:<5} {mode:<12} {utility:<10} {dev:>4} {:>9} {steps:>10.2} {reward:>11.3}\n",
            format!("{reached}/{}", rs.len())
        ));
    }
    print!("{text}");
    let txt_path = out.join("eval.txt");
    std::fs::write(&txt_path, &text)?;
    let mut inputs: Vec<PathBuf> = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "json") {
                inputs.push(p);
            }
        }
    }
    RunManifest::new("eval", config, 0).write(out, "eval", &inputs, &[csv_path, txt_path])?;
    Ok(())
}
