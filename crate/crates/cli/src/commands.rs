use std::fmt::Write as _;
use std::path::Path;

use lvst_core::graph_views::{
    build_views, laplacian_basis, read_mask_csv, write_mask_csv, LaplacianBasis, RoadGraph, ViewMasks,
};
use lvst_core::numerics::OpKind;
use lvst_core::pipeline::{
    chronological_split, evaluate, ha_evaluate, load_checkpoint, load_readings, predict_windows, save_checkpoint,
    synth_generate, train, Dataset, HistoricalAverage, MetricsReport, Normalizer,
};
use lvst_core::stformer::{model_gradcheck, Model, ModelConfig, SpatialMasks, GRADCHECK_EPS};
use serde::Serialize;

use crate::{CliError, RunConfig};

pub const MASK_FILES: [(&str, &str); 3] =
    [("local", "m_local.csv"), ("global", "m_global.csv"), ("pivotal", "m_pivotal.csv")];
pub const BASIS_FILE: &str = "laplacian_basis.csv";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn read_graph(path: &Path) -> Result<RoadGraph, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read graph {}: {e}", path.display())))?;
    Ok(RoadGraph::parse(&text)?)
}

/// Builds masks, Laplacian basis and normalizer statistics from the training split.
pub fn preprocess(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let graph = read_graph(cfg.graph_path()?)?;
    let table = load_readings(cfg.readings_path()?)?;
    table.ensure_nodes(graph.n_nodes())?;
    let n = graph.n_nodes();
    let views = cfg.views(table.steps_per_day());
    views.validate(n)?;
    let splits = chronological_split(table.n_steps(), cfg.split(), cfg.t_in + cfg.t_out)?;
    let history = table.slice_steps(splits.train.clone());
    let normalizer = Normalizer::fit(&history)?;
    let masks = build_views(&graph, &history, &views)?;
    let basis = laplacian_basis(&graph, cfg.basis_k_for(n))?;

    let dir = cfg.masks_dir();
    std::fs::create_dir_all(&dir)?;
    for ((name, file), m) in MASK_FILES.iter().zip([&masks.local, &masks.global, &masks.pivotal]) {
        write_mask_csv(dir.join(file), name, m)?;
    }
    basis.write_csv(dir.join(BASIS_FILE))?;
    normalizer.write_json(dir.join(NORMALIZER_FILE))?;
    writeln!(
        out,
        "preprocess: N={n} steps={} filled_gaps={} train={:?} val={:?} test={:?} -> {}",
        table.n_steps(),
        table.filled_gaps,
        splits.train,
        splits.val,
        splits.test,
        dir.display()
    )?;
    Ok(())
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("missing artifact {} (run preprocess/train first)", path.display())))
    }
}

/// Readings plus preprocess artifacts.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg.masks_dir();
    for (_, file) in MASK_FILES {
        require(&dir.join(file))?;
    }
    require(&dir.join(BASIS_FILE))?;
    require(&dir.join(NORMALIZER_FILE))?;
    let table = load_readings(cfg.readings_path()?)?;
    let mut m = Vec::with_capacity(3);
    for (name, file) in MASK_FILES {
        let (found, mask) = read_mask_csv(dir.join(file))?;
        if found != name {
            return Err(CliError::Input(format!("{file} holds mask `{found}`, expected `{name}`")));
        }
        m.push(mask);
    }
    let pivotal = m.pop().expect("three masks");
    let global = m.pop().expect("three masks");
    let local = m.pop().expect("three masks");
    let masks = SpatialMasks::from_views(&ViewMasks { local, global, pivotal });
    let basis = LaplacianBasis::read_csv(dir.join(BASIS_FILE))?;
    let normalizer = Normalizer::read_json(dir.join(NORMALIZER_FILE))?;
    let splits = chronological_split(table.n_steps(), cfg.split(), cfg.t_in + cfg.t_out)?;
    Ok(Dataset::new(table, splits, normalizer, masks, basis.vectors, cfg.t_in, cfg.t_out)?)
}

pub fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    cfg.model(ds.n_nodes(), ds.basis.shape()[1], ds.table.steps_per_day())
}

pub fn train_cmd(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let mut model = Model::new(model_config(cfg, &ds), cfg.seed)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut log = String::from("epoch,train_mae,val_mae\n");
    let mut io_err = None;
    let report = train(&mut model, &ds, &cfg.train(), |e| {
        let val = e.val_mae.map_or(String::new(), |v| format!("{v:?}"));
        let _ = writeln!(log, "{},{:?},{val}", e.epoch, e.train_mae);
        if let Err(err) = writeln!(out, "epoch {:>3}  train_mae {:.6}  val_mae {val}", e.epoch, e.train_mae) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    std::fs::write(cfg.output_dir.join(TRAIN_LOG_FILE), log)?;
    let path = cfg.checkpoint_path();
    save_checkpoint(&path, &model)?;
    writeln!(
        out,
        "trained {} epochs ({} steps); kept epoch {}; checkpoint {}",
        report.epochs.len(),
        report.optimizer_steps,
        report.best_epoch,
        path.display()
    )?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn windows(self, ds: &Dataset) -> Vec<usize> {
        match self {
            Self::Train => ds.train_windows(),
            Self::Val => ds.val_windows(),
            Self::Test => ds.test_windows(),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: SplitName,
    model: &'a MetricsReport,
    ha_baseline: &'a MetricsReport,
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> Result<Model, CliError> {
    let path = cfg.checkpoint_path();
    require(&path)?;
    let model = load_checkpoint(&path)?;
    let c = &model.config;
    if c.n_nodes != ds.n_nodes() || c.k != ds.basis.shape()[1] || c.t_in != ds.t_in || c.t_out != ds.t_out {
        return Err(CliError::Input(format!(
            "checkpoint {} was trained for N={}, k={}, T={}, T′={}; data has N={}, k={}, T={}, T′={}",
            path.display(),
            c.n_nodes,
            c.k,
            c.t_in,
            c.t_out,
            ds.n_nodes(),
            ds.basis.shape()[1],
            ds.t_in,
            ds.t_out
        )));
    }
    Ok(model)
}

/// Writes `metrics_<split>.json` with model and historical-average metrics; returns the JSON.
pub fn evaluate_cmd(cfg: &RunConfig, split: SplitName, out: &mut dyn std::io::Write) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let windows = split.windows(&ds);
    let report = evaluate(&model, &ds, &windows)?;
    let ha = HistoricalAverage::fit(&ds.table, ds.splits.train.clone())?;
    let ha_report = ha_evaluate(&ha, &ds, &windows)?;
    let json = serde_json::to_string_pretty(&EvalOutput { split, model: &report, ha_baseline: &ha_report })
        .expect("metrics serialize")
        + "\n";
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join(format!("metrics_{}.json", split.label())), &json)?;
    out.write_all(json.as_bytes())?;
    Ok(json)
}

fn block_csv(header: &str, block: &[f64], n: usize) -> String {
    let mut s = format!("{header}\n");
    for row in block.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes `pred_w<start>.csv` and `truth_w<start>.csv` (T′ rows × N columns) per window,
/// plus head/time-averaged spatial attention per layer and branch when asked.
pub fn predict_cmd(
    cfg: &RunConfig,
    windows: &[usize],
    dump_attention: bool,
    out: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let span = ds.t_in + ds.t_out;
    let starts: Vec<usize> = if windows.is_empty() { vec![ds.splits.test.start] } else { windows.to_vec() };
    if let Some(&bad) = starts.iter().find(|&&s| s + span > ds.table.n_steps()) {
        return Err(CliError::Input(format!(
            "window start {bad} needs steps up to {}, readings have {}",
            bad + span,
            ds.table.n_steps()
        )));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let n = ds.n_nodes();
    let preds = predict_windows(&model, &ds, &starts)?;
    for (&start, pred) in starts.iter().zip(&preds) {
        let first = start + ds.t_in;
        let header = format!("# window start={start} first_target_step={first} horizon={} nodes={n}", ds.t_out);
        std::fs::write(cfg.output_dir.join(format!("pred_w{start}.csv")), block_csv(&header, pred, n))?;
        std::fs::write(cfg.output_dir.join(format!("truth_w{start}.csv")), block_csv(&header, &ds.raw_target(start), n))?;
        if dump_attention {
            let batch = ds.batch(&[start]);
            let maps = model.attention_maps(&batch.input, &ds.masks, &ds.basis)?;
            for (l, m) in maps.iter().enumerate() {
                for (name, t) in [("local", &m.local), ("global", &m.global), ("pivotal", &m.pivotal)] {
                    t.write_csv(cfg.output_dir.join(format!("attention_w{start}_l{l}_{name}.csv")))?;
                }
            }
        }
        writeln!(out, "window {start}: wrote pred_w{start}.csv")?;
    }
    Ok(())
}

/// Per-parameter-tensor gradient error on a tiny model (L=2, d=8, 2 heads of width 4, N=6, T=4, T′=2).
pub fn gradcheck_cmd(seed: u64, fault: Option<OpKind>, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let data = synth_generate(6, 2, seed)?;
    let cfg = RunConfig { t_in: 4, t_out: 2, ..RunConfig::default() };
    let ds = Dataset::prepare(data.table, &data.graph, cfg.split(), &cfg.views(288), 3, 4, 2)?;
    let model_cfg = ModelConfig {
        n_nodes: 6,
        d: 8,
        k: 3,
        t_in: 4,
        t_out: 2,
        steps_per_day: ds.table.steps_per_day(),
        layers: 2,
        spatial_heads: 2,
        temporal_heads: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(model_cfg, seed)?;
    let batch = ds.batch(&ds.train_windows()[..2]);
    let report = model_gradcheck(&model, &batch.input, &batch.target, &ds.masks, &ds.basis, GRADCHECK_EPS, fault)?;
    let mut worst: Option<(&str, f64)> = None;
    for g in &report {
        let ok = g.max_rel_err <= GRADCHECK_TOLERANCE;
        writeln!(out, "{:<28} {:>6} {:.3e} {}", g.name, g.scalars, g.max_rel_err, if ok { "ok" } else { "FAIL" })?;
        if worst.is_none_or(|(_, e)| g.max_rel_err > e) {
            worst = Some((&g.name, g.max_rel_err));
        }
    }
    let (name, err) = worst.expect("model has parameters");
    writeln!(out, "{} parameter groups; worst {name} {err:.3e} (tolerance {GRADCHECK_TOLERANCE:e})", report.len())?;
    if err <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(format!("{name} relative error {err:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

/// Writes `graph.txt` and `readings.csv` for a synthetic network.
pub fn synth_cmd(cfg: &RunConfig, nodes: usize, days: usize, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let data = synth_generate(nodes, days, cfg.seed)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("graph.txt"), data.graph.to_text())?;
    data.table.write_csv(cfg.output_dir.join("readings.csv"))?;
    writeln!(out, "synth: {nodes} nodes, {days} days -> {}", cfg.output_dir.display())?;
    Ok(())
}
