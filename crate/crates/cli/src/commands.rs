use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use kvprune::diagnostics::layer_report;
use kvprune::report::{
    density_table, divergence_table, results_table, sidecar_json, step_table, sweep_rows, ResultsRow, Table,
};
use kvprune::svg::{bar_chart, line_chart, Series};
use kvprune::trace::{load_trace, save_trace};
use kvprune::{
    DecodeSource, DiagnosticsConfig, Error, PolicyKind, PruneConfig, ReplaySource, RunSettings, SynthSource, SynthSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{AnalyzeArgs, Common, CompareArgs, GenTraceArgs, PruneArgs, SimulateArgs, SweepArgs, SynthArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::UnknownName { .. }
            | Error::InvalidBudgetFraction(_)
            | Error::EmptyGrid
            | Error::InvalidSynthSpec(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<kvprune::TraceError> for CliError {
    fn from(e: kvprune::TraceError) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Layout of `--config` files. Every section is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthSpec,
    pub prune: PruneConfig,
    /// Budget as a fraction of the final sequence length.
    pub budget_fraction: f64,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            prune: PruneConfig::default(),
            budget_fraction: 0.3,
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn apply_synth(spec: &mut SynthSpec, a: &SynthArgs, seed: Option<u64>) {
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(text_tokens, visual_tokens, interleave, layers, heads, head_dim, steps, shift, spread, obs_rows);
    if let Some(s) = seed {
        spec.seed = s;
    }
}

fn apply_prune(cfg: &mut FileConfig, a: &PruneArgs, seed: Option<u64>) {
    let p = &mut cfg.prune;
    if let Some(v) = a.budget {
        cfg.budget_fraction = v;
    }
    if let Some(v) = a.ratio {
        p.cross_ratio = v;
    }
    if let Some(v) = a.recent {
        p.recent = v;
    }
    if let Some(v) = a.obs {
        p.obs_window = v;
    }
    if let Some(v) = a.n {
        p.smooth_n = v;
    }
    if let Some(v) = a.recency_bias {
        p.recency_bias = v;
    }
    if let Some(v) = a.head_mode {
        p.head_mode = v;
    }
    if let Some(v) = a.pool_width {
        p.pool_width = v;
    }
    p.widen_to_budget |= a.widen;
    p.smooth_baselines |= a.smooth_baselines;
    if let Some(s) = seed {
        p.seed = s;
    }
}

fn resolve(common: &Common) -> CliResult<FileConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    apply_synth(&mut cfg.synth, &common.synth, common.seed);
    apply_prune(&mut cfg, &common.prune, common.seed);
    Ok(cfg)
}

/// The replay input plus a description for the sidecar.
fn open_source(common: &Common, cfg: &FileConfig) -> CliResult<(Box<dyn DecodeSource>, serde_json::Value)> {
    match &common.trace {
        Some(path) => {
            let trace = load_trace(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let src = ReplaySource::new(trace, cfg.prune.seed)?;
            Ok((Box::new(src), json!({ "trace": path })))
        }
        None => {
            let src = SynthSource::new(&cfg.synth)?;
            Ok((Box::new(src), json!({ "synth": cfg.synth })))
        }
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

fn emit(out: Option<&Path>, csv: &str, sidecar: &serde_json::Value) -> CliResult {
    let meta = sidecar_json(sidecar)?;
    match out {
        Some(path) => {
            fs::write(path, csv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            write_file(&sidecar_path(path), &meta)
        }
        None => {
            io::stdout()
                .write_all(csv.as_bytes())
                .map_err(|e| CliError::Data(e.to_string()))?;
            eprint!("{meta}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn settings(policy: PolicyKind, cfg: &FileConfig) -> RunSettings {
    RunSettings {
        policy,
        budget_fraction: cfg.budget_fraction,
        cfg: cfg.prune.clone(),
    }
}

fn resolved_json(command: &str, cfg: &FileConfig, input: serde_json::Value, full_len: usize) -> CliResult<serde_json::Value> {
    let prune = settings(PolicyKind::Csp, cfg).resolve(full_len)?;
    Ok(json!({
        "command": command,
        "input": input,
        "budget_fraction": cfg.budget_fraction,
        "prune": prune,
    }))
}

pub fn gen_trace(a: GenTraceArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_synth(&mut cfg.synth, &a.synth, a.seed);
    let trace = SynthSource::new(&cfg.synth)?.trace().clone();
    save_trace(&trace, &a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let meta = json!({ "command": "gen-trace", "synth": cfg.synth, "output": a.out });
    write_file(&sidecar_path(&a.out), &sidecar_json(&meta)?)
}

pub fn simulate(a: SimulateArgs) -> CliResult {
    let cfg = resolve(&a.common)?;
    let (src, input) = open_source(&a.common, &cfg)?;
    let run = settings(a.policy, &cfg);
    let report = run.run(src.as_ref())?;
    if let Some(path) = &a.summary {
        write_file(path, &results_table(&[ResultsRow::new(&run, &report)]).to_csv())?;
    }
    let mut meta = resolved_json("simulate", &cfg, input, src.trace().final_len())?;
    meta["policy"] = json!(a.policy);
    emit(a.common.out.as_deref(), &step_table(&report).to_csv(), &meta)
}

pub fn compare(a: CompareArgs) -> CliResult {
    if a.policies.len() < 2 {
        return Err(CliError::Usage("compare needs at least two policies".into()));
    }
    let cfg = resolve(&a.common)?;
    let (src, input) = open_source(&a.common, &cfg)?;
    let mut joined = Table::default();
    let mut rows = Vec::new();
    for &policy in &a.policies {
        let run = settings(policy, &cfg);
        let report = run.run(src.as_ref())?;
        let t = step_table(&report);
        if joined.header.is_empty() {
            joined = t;
        } else {
            joined.append(t);
        }
        rows.push(ResultsRow::new(&run, &report));
    }
    if let Some(path) = &a.summary {
        write_file(path, &results_table(&rows).to_csv())?;
    }
    let mut meta = resolved_json("compare", &cfg, input, src.trace().final_len())?;
    meta["policies"] = json!(a.policies);
    emit(a.common.out.as_deref(), &joined.to_csv(), &meta)
}

pub fn sweep(a: SweepArgs) -> CliResult {
    let cfg = resolve(&a.common)?;
    let (src, input) = open_source(&a.common, &cfg)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &policy in &a.policies {
        let points = kvprune::sweep(src.as_ref(), a.axis, &a.grid, &settings(policy, &cfg))?;
        series.push(Series::new(
            policy.label(),
            points.iter().map(|p| (p.value, p.report.mean_recon_error())).collect(),
        ));
        rows.extend(sweep_rows(&points));
    }
    if let Some(path) = &a.plot {
        let title = format!("mean reconstruction error vs {}", a.axis);
        write_file(path, &line_chart(&title, &a.axis.to_string(), "mean recon error", &series))?;
    }
    let mut meta = resolved_json("sweep", &cfg, input, src.trace().final_len())?;
    meta["policies"] = json!(a.policies);
    meta["axis"] = json!(a.axis);
    meta["grid"] = json!(a.grid);
    emit(a.common.out.as_deref(), &results_table(&rows).to_csv(), &meta)
}

pub fn analyze(a: AnalyzeArgs) -> CliResult {
    let trace = load_trace(&a.trace).map_err(|e| CliError::Data(format!("{}: {e}", a.trace.display())))?;
    let mut diag = load_config(a.config.as_deref())?.diagnostics;
    if let Some(v) = a.bins {
        diag.bins = v;
    }
    if let Some(v) = a.epsilon {
        diag.epsilon = v;
    }
    if let Some(v) = a.obs {
        diag.obs_window = v;
    }
    if let Some(v) = a.recent {
        diag.recent = v;
    }
    let (report, curves) = layer_report(&trace, &diag)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    let dir = &a.out_dir;
    divergence_table(&report).write(dir.join("divergence.csv"))?;
    density_table(&curves).write(dir.join("density.csv"))?;
    let bars: Vec<(String, f64)> = report.per_layer.iter().map(|l| (l.layer.to_string(), l.js)).collect();
    write_file(&dir.join("js.svg"), &bar_chart("JS divergence per layer", "layer", "JS (nats)", &bars))?;
    for c in &curves {
        let series = [
            Series::new("intra", c.intra.grid.iter().copied().zip(c.intra.density.iter().copied()).collect()),
            Series::new("inter", c.inter.grid.iter().copied().zip(c.inter.density.iter().copied()).collect()),
        ];
        let title = format!("attention weight density, layer {}", c.layer);
        write_file(
            &dir.join(format!("kde_layer{}.svg", c.layer)),
            &line_chart(&title, "attention weight", "density", &series),
        )?;
    }
    let meta = json!({ "command": "analyze", "trace": a.trace, "diagnostics": diag });
    write_file(&dir.join("analyze.config.json"), &sidecar_json(&meta)?)
}
