use std::fs;
use std::path::{Path, PathBuf};

use jointcast::data::DataError;
use jointcast::eval::{compare_structures, run_benchmark, BenchReport, Dataset};
use jointcast::infer::{forecast_dcot, mirror_ensemble, mirror_ensemble_quantiles, HorizonForecast};
use jointcast::lemma::{eps_grid, lemma_grid, LemmaRow, StepKind};
use jointcast::model::Model;
use jointcast::train::{
    checkpoint_load, checkpoint_save, dump_batch, train_loop, write_loss_curve, TrainError,
};

use crate::config::{read_series, RunConfig, SynthKind};
use crate::{Cli, CliError, Command, DataArgs, EvalArgs, ForecastArgs, LemmaArgs, SynthArgs, TrainArgs};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    match cli.command {
        Command::Train(a) => cmd_train(cfg, a, &cli.out_dir),
        Command::Forecast(a) => cmd_forecast(cfg, a, &cli.out_dir),
        Command::Eval(a) => cmd_eval(cfg, a, &cli.out_dir),
        Command::Lemma(a) => cmd_lemma(cfg, a, &cli.out_dir),
        Command::Synth(a) => cmd_synth(cfg, a, &cli.out_dir),
    }
}

fn apply_data_args(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = Some(p.clone());
    }
    if !a.columns.is_empty() {
        cfg.data.columns = a.columns.clone();
    }
    if let Some(t) = &a.timestamp_column {
        cfg.data.timestamp = Some(t.clone());
    }
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs, out: &Path) -> Result<(), CliError> {
    apply_data_args(&mut cfg, &a.data);
    let t = &mut cfg.train;
    if let Some(v) = a.max_steps {
        t.max_steps = v;
        t.warmup_steps = t.warmup_steps.min(v);
    }
    if let Some(v) = a.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr_max = v;
        t.lr_min = t.lr_min.min(v);
    }
    if let Some(v) = a.context_len {
        t.context_len = v;
    }
    if let Some(v) = a.mask_ratio {
        t.mask_ratio = v;
        cfg.model.mask_ratio = v;
    }
    if let Some(v) = a.tail_mask_prob {
        t.tail_mask_prob = v;
    }
    if a.vanilla {
        cfg.model.u_shape = false;
    }
    cfg.model.validate().map_err(invalid)?;
    cfg.train.validate().map_err(invalid)?;

    let series = cfg.data.load()?;
    let data: Vec<Vec<f64>> = series.iter().map(|s| s.values().to_vec()).collect();
    ensure_dir(out)?;
    cfg.save(out)?;
    let result = match train_loop(&cfg.model, &cfg.train, &data) {
        Ok(r) => r,
        Err(TrainError::NonFiniteLoss { step, loss, batch }) => {
            let path = out.join("failed_batch.csv");
            dump_batch(&path, &batch).map_err(runtime)?;
            return Err(runtime(format!(
                "non-finite loss {loss} at step {step}; batch written to {}",
                path.display()
            )));
        }
        Err(TrainError::Data(m)) => return Err(invalid(format!("training data: {m}"))),
        Err(e) => return Err(runtime(e)),
    };
    let ckpt_path = out.join("model.ckpt");
    checkpoint_save(&result.checkpoint, &ckpt_path).map_err(runtime)?;
    write_loss_curve(out.join("loss.csv"), &result.curve).map_err(runtime)?;
    if let (Some(first), Some(last)) = (result.curve.first(), result.curve.last()) {
        log::info!("loss {:.5} -> {:.5}", first.loss, last.loss);
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let ckpt = checkpoint_load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Model::new(ckpt.model, ckpt.weights).map_err(runtime)
}

fn write_forecast_csv(
    path: &Path,
    quantiles: &HorizonForecast,
    point: &[f64],
) -> Result<(), CliError> {
    let mut text = String::from("step,level,value\n");
    for t in 0..quantiles.horizon() {
        for (k, a) in quantiles.levels().iter().enumerate() {
            text.push_str(&format!("{},{a},{}\n", t + 1, quantiles.level(k)[t]));
        }
        text.push_str(&format!("{},point,{}\n", t + 1, point[t]));
    }
    fs::write(path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn cmd_forecast(mut cfg: RunConfig, a: ForecastArgs, out: &Path) -> Result<(), CliError> {
    if let Some(h) = a.horizon {
        cfg.forecast.horizon = h;
    }
    if let Some(d) = a.dcot {
        cfg.forecast.dcot_points = d;
    }
    if !a.lookbacks.is_empty() {
        cfg.forecast.lookbacks = a.lookbacks.clone();
    }
    cfg.forecast.sort_quantiles |= a.sort;
    if cfg.forecast.horizon == 0 {
        return Err(invalid("horizon must be positive"));
    }
    let column = a
        .column
        .clone()
        .unwrap_or_else(|| cfg.data.columns.first().cloned().unwrap_or_else(|| "value".into()));
    let model = load_model(&a.checkpoint)?;
    let series = read_series(&a.input, &[column], cfg.data.timestamp.as_deref())?;
    let history = series[0].values();
    let f = &cfg.forecast;
    if let Some(&lb) = f.lookbacks.iter().find(|&&lb| lb > history.len()) {
        return Err(invalid(format!(
            "lookback {lb} exceeds history length {}",
            history.len()
        )));
    }

    let (mut quantiles, point) = if f.lookbacks.is_empty() {
        let q = forecast_dcot(&model, history, f.horizon, f.dcot_points).map_err(runtime)?;
        let p = q.median().map_err(runtime)?.to_vec();
        (q, p)
    } else {
        let q = mirror_ensemble_quantiles(&model, history, &f.lookbacks, f.horizon, f.dcot_points)
            .map_err(runtime)?;
        let p = mirror_ensemble(&model, history, &f.lookbacks, f.horizon, f.dcot_points)
            .map_err(runtime)?;
        (q, p)
    };
    if f.sort_quantiles {
        quantiles.sort_levels();
    }
    ensure_dir(out)?;
    cfg.save(out)?;
    let path = a.out.unwrap_or_else(|| out.join("forecast.csv"));
    write_forecast_csv(&path, &quantiles, &point)?;
    println!("{}", path.display());
    Ok(())
}

fn parse_ensembles(spec: &str) -> Result<Vec<Vec<usize>>, CliError> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|cell| {
            cell.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| invalid(format!("bad lookback `{v}` in --ensembles")))
                })
                .collect()
        })
        .collect()
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs, out: &Path) -> Result<(), CliError> {
    apply_data_args(&mut cfg, &a.data);
    if let Some(s) = a.seasonality {
        cfg.data.seasonality = s;
    }
    let p = &mut cfg.eval;
    if let Some(v) = a.lookback {
        p.lookback = v;
    }
    if let Some(v) = a.horizon {
        p.horizon = v;
    }
    if let Some(v) = a.stride {
        p.stride = v;
    }
    if !a.dcot_grid.is_empty() {
        p.dcot_grid = a.dcot_grid.clone();
    }
    if let Some(e) = &a.ensembles {
        p.ensembles = parse_ensembles(e)?;
    }
    p.score_components |= a.score_components;
    p.geometric |= a.geometric;
    if a.max_windows.is_some() {
        p.max_windows = a.max_windows;
    }
    p.validate().map_err(invalid)?;
    if cfg.data.seasonality == 0 {
        return Err(invalid("seasonality must be positive"));
    }

    let model = load_model(&a.checkpoint)?;
    let series = match &cfg.data.path {
        Some(path) => {
            let cols: Vec<&str> = cfg.data.columns.iter().map(String::as_str).collect();
            jointcast::data::load_csv(path, &cols, cfg.data.timestamp.as_deref()).map_err(|e| match e {
                DataError::Empty => runtime("insufficient data: dataset is empty"),
                other => runtime(format!("{}: {other}", path.display())),
            })?
        }
        None => cfg.data.load()?,
    };
    let datasets: Vec<Dataset> = series
        .iter()
        .map(|s| Dataset {
            name: s.name.clone(),
            values: s.values().to_vec(),
            seasonality: cfg.data.seasonality,
        })
        .collect();
    let levels = model.config.quantile_levels.clone();
    let report = run_benchmark(&model, &levels, &datasets, &cfg.eval).map_err(runtime)?;
    ensure_dir(out)?;
    cfg.save(out)?;
    report.write(out).map_err(runtime)?;
    if let Some(other) = &a.compare {
        let other = load_model(other)?;
        let other_report = run_benchmark(&other, &levels, &datasets, &cfg.eval).map_err(runtime)?;
        other_report.write(out.join("compare")).map_err(runtime)?;
        let (vanilla, u) = split_by_structure(&model, &report, &other, &other_report);
        let ablation = compare_structures(vanilla, u);
        let text = serde_json::to_string_pretty(&ablation).expect("report serialises");
        fs::write(out.join("ablation.json"), text).map_err(runtime)?;
    }
    for s in report.summaries.iter().filter(|s| s.dataset == "all") {
        println!(
            "{:<32} mse {:.6} mae {:.6} mase {} crps {}",
            s.cell,
            s.mse,
            s.mae,
            fmt_opt(s.mase),
            fmt_opt(s.crps)
        );
    }
    Ok(())
}

/// Orders a pair of reports as (vanilla, U-shape) when the structures differ.
fn split_by_structure<'a>(
    a: &Model,
    ra: &'a BenchReport,
    _b: &Model,
    rb: &'a BenchReport,
) -> (&'a BenchReport, &'a BenchReport) {
    if a.config.u_shape {
        (rb, ra)
    } else {
        (ra, rb)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn cmd_lemma(mut cfg: RunConfig, a: LemmaArgs, out: &Path) -> Result<(), CliError> {
    let l = &mut cfg.lemma;
    if !a.n_paths.is_empty() {
        l.n_paths = a.n_paths.clone();
    }
    if !a.horizons.is_empty() {
        l.horizons = a.horizons.clone();
    }
    if !a.eps.is_empty() {
        l.eps = a.eps.clone();
    }
    if let Some(v) = a.eps_points {
        l.eps_points = v;
    }
    if let Some(v) = a.trials {
        l.trials = v;
    }
    if a.uniform {
        l.steps = StepKind::Uniform;
    }
    if l.n_paths.is_empty() || l.horizons.is_empty() || l.trials == 0 {
        return Err(invalid("lemma grids and trials must be non-empty"));
    }
    if l.eps.is_empty() && l.eps_points == 0 {
        return Err(invalid("either eps or eps_points must be given"));
    }
    let mut rows: Vec<LemmaRow> = Vec::new();
    for &n in &l.n_paths {
        for &j in &l.horizons {
            let eps = if l.eps.is_empty() {
                eps_grid(n, j, l.steps, l.eps_points).map_err(invalid)?
            } else {
                l.eps.clone()
            };
            rows.extend(lemma_grid(&[n], &[j], &eps, l.trials, cfg.seed, l.steps).map_err(invalid)?);
        }
    }
    ensure_dir(out)?;
    cfg.save(out)?;
    let mut text = String::from("n_paths,horizon,eps,empirical,exact,pz_bound\n");
    for r in &rows {
        let exact = r.exact.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n_paths, r.horizon, r.eps, r.empirical, exact, r.pz_bound
        ));
    }
    let path = out.join("lemma.csv");
    fs::write(&path, text).map_err(runtime)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs, out: &Path) -> Result<(), CliError> {
    let s = &mut cfg.data.synthetic;
    if let Some(k) = a.kind.as_deref() {
        s.kind = match k {
            "sine" => SynthKind::Sine,
            "mixture" => SynthKind::Mixture,
            _ => SynthKind::Walk,
        };
    }
    if let Some(v) = a.n {
        s.n = v;
    }
    if let Some(v) = a.period {
        s.period = v;
    }
    if let Some(v) = a.amplitude {
        s.amplitude = v;
    }
    if let Some(v) = a.trend {
        s.trend = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    s.seed = cfg.seed;
    let series = s.generate()?;
    ensure_dir(out)?;
    cfg.save(out)?;
    let path: PathBuf = a.out.unwrap_or_else(|| out.join("synth.csv"));
    let mut text = String::from("t,value\n");
    for (t, v) in series.values().iter().enumerate() {
        text.push_str(&format!("{t},{v}\n"));
    }
    fs::write(&path, text).map_err(runtime)?;
    println!("{}", path.display());
    Ok(())
}
