//! Experiment execution: builds the data, trains the selected method,
//! evaluates on a cadence, and writes plot-ready result files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bali::{init_model, BaliModel, BaliModelState, Prediction};
use crate::baselines::{AdamConfig, MapModel, MapModelState};
use crate::error::{Error, Result};
use crate::harness::config::{DatasetKind, ExperimentConfig, GridConfig, MethodName};
use crate::harness::data::{
    gen_sinc, gen_sines_trend, gen_two_moons, load_csv, Dataset, Standardizer, TaskKind,
};
use crate::harness::metrics;
use crate::network::{chain_specs, LayerSpec, LossHead, Targets};
use crate::streams;
use crate::tensor::{Matrix, RngStream};

/// Confidence bins used whenever calibration error is reported.
pub const ECE_BINS: usize = 15;

/// Grid predictions run in row blocks of this size to bound peak memory.
const GRID_CHUNK: usize = 1024;

/// One scored quantity at one evaluation point of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub split: usize,
    pub iteration: u64,
    pub metric: String,
    pub value: f64,
}

/// Everything a run produced. Wall-clock rows live apart from the metric
/// rows so metrics.csv stays byte-identical across repeated runs.
#[derive(Debug, Default)]
pub struct RunReport {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<MetricsRecord>,
    pub errors: Vec<String>,
}

/// Whichever model the method selected; gives the training loop and the
/// evaluators one interface.
#[derive(Clone, Debug)]
pub enum Model {
    Bali(Box<BaliModel>),
    Map(MapModel),
}

impl Model {
    pub fn train_step(&mut self, x: &Matrix, targets: &Targets) -> Result<()> {
        match self {
            Model::Bali(m) => m.train_step(x, targets).map(|_| ()),
            Model::Map(m) => m.train_step(x, targets).map(|_| ()),
        }
    }

    pub fn predict(&self, x: &Matrix, n_samples: usize) -> Result<Prediction> {
        match self {
            Model::Bali(m) => m.predict(x, n_samples),
            Model::Map(m) => m.predict(x, n_samples),
        }
    }

    pub fn state(&self) -> ModelState {
        match self {
            Model::Bali(m) => ModelState::Bali(Box::new(m.to_state())),
            Model::Map(m) => ModelState::Map(m.to_state()),
        }
    }
}

/// Serializable side of [`Model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ModelState {
    Bali(Box<BaliModelState>),
    Map(MapModelState),
}

impl ModelState {
    pub fn into_model(self) -> Result<Model> {
        match self {
            ModelState::Bali(s) => Ok(Model::Bali(Box::new(BaliModel::from_state(*s)?))),
            ModelState::Map(s) => Ok(Model::Map(MapModel::from_state(s)?)),
        }
    }
}

/// A trained model plus everything needed to score new data in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub input_standardizer: Standardizer,
    pub target_standardizer: Option<Standardizer>,
    pub model: ModelState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

struct CellData {
    train: Dataset,
    test: Dataset,
    x_train: Matrix,
    x_test: Matrix,
    train_targets_model: Targets,
    test_targets_model: Targets,
    in_std: Standardizer,
    tgt_std: Option<Standardizer>,
    out_dim: usize,
    head: LossHead,
}

/// Generates or loads the cell's data and standardizes it with statistics
/// fit on the training split only.
fn build_cell_data(config: &ExperimentConfig, seed: u64) -> Result<CellData> {
    let ds = &config.dataset;
    let (train, test) = match ds.kind {
        DatasetKind::Sinc => (
            gen_sinc(ds.train_n(), ds.noise(), &mut RngStream::new(seed, streams::DATA_GEN))?,
            gen_sinc(ds.test_n(), ds.noise(), &mut RngStream::new(seed, streams::DATA_GEN + 1))?,
        ),
        DatasetKind::SinesTrend => (
            gen_sines_trend(ds.train_n(), ds.noise(), &mut RngStream::new(seed, streams::DATA_GEN))?,
            gen_sines_trend(ds.test_n(), ds.noise(), &mut RngStream::new(seed, streams::DATA_GEN + 1))?,
        ),
        DatasetKind::TwoMoons => (
            gen_two_moons(ds.train_n(), ds.noise(), &mut RngStream::new(seed, streams::DATA_GEN))?,
            gen_two_moons(ds.test_n(), ds.noise(), &mut RngStream::new(seed, streams::DATA_GEN + 1))?,
        ),
        DatasetKind::Csv => {
            let path = ds.path.as_ref().expect("validated: csv config has a path");
            let table = load_csv(path)?;
            let all = Dataset::from_table(&table, &ds.targets, ds.task())?;
            all.split(ds.test_fraction, &mut RngStream::new(seed, streams::SPLIT))?
        }
    };

    let in_std = if ds.standardize_inputs {
        Standardizer::fit(train.x())
    } else {
        Standardizer::identity(train.input_dim())
    };
    let x_train = in_std.apply(train.x());
    let x_test = in_std.apply(test.x());

    let (train_targets_model, test_targets_model, tgt_std, out_dim) = match (train.targets(), test.targets()) {
        (Targets::Values(y_train), Targets::Values(y_test)) => {
            let tgt_std = if ds.standardize_targets { Some(Standardizer::fit(y_train)) } else { None };
            let apply = |y: &Matrix| tgt_std.as_ref().map_or_else(|| y.clone(), |s| s.apply(y));
            let dy = y_train.cols();
            (Targets::Values(apply(y_train)), Targets::Values(apply(y_test)), tgt_std, dy)
        }
        (Targets::Classes(train_c), Targets::Classes(test_c)) => {
            let max = train_c.iter().chain(test_c).copied().max().unwrap_or(0);
            (train.targets().clone(), test.targets().clone(), None, (max + 1).max(2))
        }
        _ => {
            return Err(Error::InvalidConfig("train and test splits carry different target kinds".into()));
        }
    };

    let head = match train.task() {
        TaskKind::Regression => LossHead::Gaussian,
        TaskKind::Classification => LossHead::SoftmaxCe,
    };

    Ok(CellData {
        train,
        test,
        x_train,
        x_test,
        train_targets_model,
        test_targets_model,
        in_std,
        tgt_std,
        out_dim,
        head,
    })
}

fn build_model(config: &ExperimentConfig, specs: &[LayerSpec], head: LossHead, seed: u64, n_train: usize) -> Result<Model> {
    match config.method.name {
        MethodName::Bali => {
            let cfg = config.method.bali_settings().to_bali_config(n_train);
            Ok(Model::Bali(Box::new(init_model(specs, head, cfg, seed)?)))
        }
        MethodName::Map => {
            let g = config.method.map_settings();
            let model = MapModel::new(specs, head, AdamConfig::new(g.lr, g.weight_decay), 0.0, g.noise_var, g.sigma_init, seed)?;
            Ok(Model::Map(model))
        }
        MethodName::Dropout => {
            let d = config.method.dropout_settings();
            let model = MapModel::new(specs, head, AdamConfig::new(d.lr, d.weight_decay), d.p, d.noise_var, d.sigma_init, seed)?;
            Ok(Model::Map(model))
        }
    }
}

/// Sample count used for final prediction surfaces (the method's own
/// reporting budget, as opposed to the cheaper periodic evaluations).
fn method_pred_samples(config: &ExperimentConfig) -> usize {
    match config.method.name {
        MethodName::Bali => config.method.bali_settings().pred_samples,
        MethodName::Map => 1,
        MethodName::Dropout => config.method.dropout_settings().pred_samples,
    }
}

fn default_metric_names(task: TaskKind) -> Vec<String> {
    match task {
        TaskKind::Regression => vec!["rmse".into(), "nll".into()],
        TaskKind::Classification => vec!["acc".into(), "nll".into(), "ece".into()],
    }
}

/// Mini-batch index dealer: full-batch budgets reuse the natural order,
/// smaller budgets reshuffle once per pass and keep the final short batch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: RngStream,
    batch: usize,
    full: bool,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Batcher {
        Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng: RngStream::new(seed, streams::SHUFFLE),
            batch: batch.max(1),
            full: batch >= n,
        }
    }

    fn next_indices(&mut self) -> Vec<usize> {
        if self.full {
            return self.order.clone();
        }
        if self.pos == 0 {
            self.rng.shuffle(&mut self.order);
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = if end == self.order.len() { 0 } else { end };
        idx
    }
}

fn gather(x: &Matrix, targets: &Targets, idx: &[usize]) -> (Matrix, Targets) {
    let bx = Matrix::from_fn(idx.len(), x.cols(), |i, j| x.get(idx[i], j));
    let bt = match targets {
        Targets::Values(m) => Targets::Values(Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j))),
        Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        Targets::Binary(b) => Targets::Binary(idx.iter().map(|&i| b[i]).collect()),
    };
    (bx, bt)
}

/// Scores one prediction against one split. Regression RMSE reports raw
/// units; regression NLL evaluates in model units and shifts by the
/// standardizer's log-Jacobian, which is the same thing.
fn split_metrics(
    model: &Model,
    x: &Matrix,
    raw: &Targets,
    standardized: &Targets,
    tgt_std: Option<&Standardizer>,
    names: &[String],
    eval_samples: usize,
) -> Result<Vec<(String, f64)>> {
    let pred = model.predict(x, eval_samples)?;
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let value = match (name.as_str(), &pred) {
            ("rmse", Prediction::Regression { mean, .. }) => {
                let Targets::Values(truth) = raw else {
                    return Err(Error::InvalidConfig("rmse needs real-valued targets".into()));
                };
                let de = tgt_std.map_or_else(|| mean.clone(), |s| s.invert(mean));
                metrics::rmse(&de, truth)?
            }
            ("nll", Prediction::Regression { samples, noise, .. }) => {
                let Targets::Values(truth) = standardized else {
                    return Err(Error::InvalidConfig("nll needs real-valued targets".into()));
                };
                metrics::regression_nll(samples, noise, truth, tgt_std.map_or(0.0, Standardizer::log_std_sum))?
            }
            ("acc", Prediction::Classification { probs, .. }) => {
                let Targets::Classes(labels) = raw else {
                    return Err(Error::InvalidConfig("acc needs class labels".into()));
                };
                metrics::accuracy(probs, labels)?
            }
            ("nll", Prediction::Classification { probs, .. }) => {
                let Targets::Classes(labels) = raw else {
                    return Err(Error::InvalidConfig("nll needs class labels".into()));
                };
                metrics::classification_nll(probs, labels)?
            }
            ("ece", Prediction::Classification { probs, .. }) => {
                let Targets::Classes(labels) = raw else {
                    return Err(Error::InvalidConfig("ece needs class labels".into()));
                };
                metrics::ece(probs, labels, ECE_BINS)?
            }
            ("auc", Prediction::Classification { probs, .. }) => {
                let Targets::Classes(labels) = raw else {
                    return Err(Error::InvalidConfig("auc needs class labels".into()));
                };
                if probs.cols() != 2 {
                    return Err(Error::InvalidConfig(format!(
                        "auc wants a binary problem, got {} classes",
                        probs.cols()
                    )));
                }
                let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, 1)).collect();
                let positives: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                metrics::auc(&scores, &positives)?
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "metric '{name}' does not apply to this prediction kind"
                )));
            }
        };
        out.push((name.clone(), value));
    }
    Ok(out)
}

struct CellOutput {
    records: Vec<MetricsRecord>,
    timings: Vec<MetricsRecord>,
}

fn run_cell(config: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<CellOutput> {
    let start = Instant::now();
    let data = build_cell_data(config, seed)?;
    let n_train = data.train.len();
    let specs = chain_specs(data.x_train.cols(), &config.model.hidden, data.out_dim, config.model.activation);
    let mut model = build_model(config, &specs, data.head, seed, n_train)?;

    let batch = config.method.batch_size(n_train);
    let total_iters = config.method.iterations();
    let eval_every = config
        .run
        .eval_every
        .unwrap_or_else(|| (10 * n_train as u64).div_ceil(batch as u64))
        .max(1);
    let split_id = match config.dataset.kind {
        DatasetKind::Csv => seed as usize,
        _ => 0,
    };
    let metric_names = if config.run.metrics.is_empty() {
        default_metric_names(data.train.task())
    } else {
        config.run.metrics.clone()
    };

    let mut records = Vec::new();
    let mut timings = Vec::new();
    let evaluate = |model: &Model, iteration: u64, records: &mut Vec<MetricsRecord>, timings: &mut Vec<MetricsRecord>| -> Result<()> {
        let splits = [
            ("train", &data.x_train, data.train.targets(), &data.train_targets_model),
            ("test", &data.x_test, data.test.targets(), &data.test_targets_model),
        ];
        for (split_name, x, raw, standardized) in splits {
            let values = split_metrics(
                model,
                x,
                raw,
                standardized,
                data.tgt_std.as_ref(),
                &metric_names,
                config.run.eval_samples,
            )?;
            for (name, value) in values {
                records.push(MetricsRecord {
                    seed,
                    split: split_id,
                    iteration,
                    metric: format!("{split_name}_{name}"),
                    value,
                });
            }
        }
        timings.push(MetricsRecord {
            seed,
            split: split_id,
            iteration,
            metric: "wall_time_s".into(),
            value: start.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    evaluate(&model, 0, &mut records, &mut timings)?;
    let mut batcher = Batcher::new(n_train, batch, seed);
    for iter in 1..=total_iters {
        let idx = batcher.next_indices();
        let (bx, bt) = gather(&data.x_train, &data.train_targets_model, &idx);
        model.train_step(&bx, &bt)?;
        if iter == total_iters || iter % eval_every == 0 {
            evaluate(&model, iter, &mut records, &mut timings)?;
        }
    }

    if let Some(dir) = out_dir {
        if let Some(grid) = &config.run.grid {
            write_grid(&dir.join(format!("grid_seed{seed}.csv")), &model, &data, grid, method_pred_samples(config))?;
        }
        if config.run.save_checkpoint {
            let checkpoint = Checkpoint {
                config: config.clone(),
                seed,
                input_standardizer: data.in_std.clone(),
                target_standardizer: data.tgt_std.clone(),
                model: model.state(),
            };
            checkpoint.save(&dir.join(format!("checkpoint_seed{seed}.json")))?;
        }
    }

    Ok(CellOutput { records, timings })
}

/// Runs every configured seed, isolating failures to their cell, and writes
/// metrics.csv, timing.csv, per-seed grid and checkpoint files, and
/// errors.txt under the output directory when one is set.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<RunReport> {
    config.validate()?;
    let seeds: Vec<u64> = seed_override.map_or_else(|| config.run.seeds.clone(), |s| vec![s]);
    let out_dir: Option<PathBuf> = out_override.map(Path::to_path_buf).or_else(|| config.run.out_dir.clone());
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut report = RunReport::default();
    for &seed in &seeds {
        match run_cell(config, seed, out_dir.as_deref()) {
            Ok(cell) => {
                report.records.extend(cell.records);
                report.timings.extend(cell.timings);
            }
            Err(e) => report.errors.push(format!("seed {seed}: {e}")),
        }
    }
    if let Some(dir) = &out_dir {
        write_records(&dir.join("metrics.csv"), &report.records)?;
        write_records(&dir.join("timing.csv"), &report.timings)?;
        if !report.errors.is_empty() {
            std::fs::write(dir.join("errors.txt"), report.errors.join("\n") + "\n")?;
        }
    }
    Ok(report)
}

fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::from("seed,split,iteration,metric,value\n");
    for r in records {
        text.push_str(&format!("{},{},{},{},{}\n", r.seed, r.split, r.iteration, r.metric, r.value));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Predicts over the configured lattice and writes mean and spread per
/// point in raw units: columns x,mean,std for 1-D regression and
/// x0,x1,mean,std (class-1 probability) for 2-D classification.
fn write_grid(path: &Path, model: &Model, data: &CellData, grid: &GridConfig, samples: usize) -> Result<()> {
    let axis = grid.axis();
    let mut text = String::new();
    match data.train.task() {
        TaskKind::Regression => {
            if data.train.input_dim() != 1 {
                return Err(Error::InvalidConfig("regression grids support 1-D inputs only".into()));
            }
            if data.out_dim != 1 {
                return Err(Error::InvalidConfig("regression grids support a single output column".into()));
            }
            text.push_str("x,mean,std\n");
            let raw = Matrix::from_fn(axis.len(), 1, |i, _| axis[i]);
            let (mean, std) = grid_regression(model, data, &raw, samples)?;
            for i in 0..axis.len() {
                text.push_str(&format!("{},{},{}\n", axis[i], mean.get(i, 0), std.get(i, 0)));
            }
        }
        TaskKind::Classification => {
            if data.train.input_dim() != 2 {
                return Err(Error::InvalidConfig("classification grids support 2-D inputs only".into()));
            }
            text.push_str("x0,x1,mean,std\n");
            let mut raw = Matrix::zeros(axis.len() * axis.len(), 2);
            for (i, a) in axis.iter().enumerate() {
                for (j, b) in axis.iter().enumerate() {
                    raw.set(i * axis.len() + j, 0, *a);
                    raw.set(i * axis.len() + j, 1, *b);
                }
            }
            let (mean, std) = grid_classification(model, data, &raw, samples)?;
            for i in 0..raw.rows() {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    raw.get(i, 0),
                    raw.get(i, 1),
                    mean.get(i, 0),
                    std.get(i, 0)
                ));
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn grid_regression(model: &Model, data: &CellData, raw: &Matrix, samples: usize) -> Result<(Matrix, Matrix)> {
    let mut mean = Matrix::zeros(raw.rows(), 1);
    let mut std = Matrix::zeros(raw.rows(), 1);
    let mut row = 0;
    while row < raw.rows() {
        let end = (row + GRID_CHUNK).min(raw.rows());
        let chunk = Matrix::from_fn(end - row, 1, |i, _| raw.get(row + i, 0));
        let x = data.in_std.apply(&chunk);
        let Prediction::Regression { mean: m, std: s, .. } = model.predict(&x, samples)? else {
            return Err(Error::InvalidConfig("regression grid got a classification prediction".into()));
        };
        let (m, s) = match &data.tgt_std {
            Some(t) => (t.invert(&m), t.invert_scale(&s)),
            None => (m, s),
        };
        for i in 0..end - row {
            mean.set(row + i, 0, m.get(i, 0));
            std.set(row + i, 0, s.get(i, 0));
        }
        row = end;
    }
    Ok((mean, std))
}

fn grid_classification(model: &Model, data: &CellData, raw: &Matrix, samples: usize) -> Result<(Matrix, Matrix)> {
    let mut mean = Matrix::zeros(raw.rows(), 1);
    let mut std = Matrix::zeros(raw.rows(), 1);
    let mut row = 0;
    while row < raw.rows() {
        let end = (row + GRID_CHUNK).min(raw.rows());
        let chunk = Matrix::from_fn(end - row, raw.cols(), |i, j| raw.get(row + i, j));
        let x = data.in_std.apply(&chunk);
        let Prediction::Classification { probs, prob_std, .. } = model.predict(&x, samples)? else {
            return Err(Error::InvalidConfig("classification grid got a regression prediction".into()));
        };
        if probs.cols() < 2 {
            return Err(Error::InvalidConfig("classification grid needs at least two classes".into()));
        }
        for i in 0..end - row {
            mean.set(row + i, 0, probs.get(i, 1));
            std.set(row + i, 0, prob_std.get(i, 1));
        }
        row = end;
    }
    Ok((mean, std))
}

/// Target column names an `eval` data file must carry for this config.
pub fn expected_targets(config: &ExperimentConfig) -> Vec<String> {
    match config.dataset.kind {
        DatasetKind::Csv => config.dataset.targets.clone(),
        DatasetKind::TwoMoons => vec!["label".into()],
        DatasetKind::Sinc | DatasetKind::SinesTrend => vec!["y".into()],
    }
}

/// Writes a dataset as CSV with feature headers x (1-D) or x0,x1,… and the
/// target headers `expected_targets` looks for (y… or label).
pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let d = data.input_dim();
    let mut headers: Vec<String> = if d == 1 {
        vec!["x".into()]
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    };
    match data.targets() {
        Targets::Values(y) => {
            if y.cols() == 1 {
                headers.push("y".into());
            } else {
                headers.extend((0..y.cols()).map(|j| format!("y{j}")));
            }
        }
        Targets::Classes(_) | Targets::Binary(_) => headers.push("label".into()),
    }
    let mut text = headers.join(",");
    text.push('\n');
    for i in 0..data.len() {
        let mut fields: Vec<String> = (0..d).map(|j| format!("{}", data.x().get(i, j))).collect();
        match data.targets() {
            Targets::Values(y) => fields.extend((0..y.cols()).map(|j| format!("{}", y.get(i, j)))),
            Targets::Classes(c) => fields.push(format!("{}", c[i])),
            Targets::Binary(b) => fields.push(format!("{}", b[i])),
        }
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Scores a checkpointed model on a dataset using the checkpoint's own
/// standardizers. Empty `metric_names` means the task's standard set.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    data: &Dataset,
    metric_names: &[String],
    eval_samples: usize,
) -> Result<Vec<(String, f64)>> {
    let model = checkpoint.model.clone().into_model()?;
    if data.input_dim() != checkpoint.input_standardizer.dim() {
        return Err(Error::Shape {
            context: "evaluate_checkpoint",
            detail: format!(
                "data has {} features but the model was trained on {}",
                data.input_dim(),
                checkpoint.input_standardizer.dim()
            ),
        });
    }
    let x = checkpoint.input_standardizer.apply(data.x());
    let standardized = match (data.targets(), &checkpoint.target_standardizer) {
        (Targets::Values(y), Some(s)) => Targets::Values(s.apply(y)),
        (t, _) => t.clone(),
    };
    let names = if metric_names.is_empty() {
        default_metric_names(data.task())
    } else {
        metric_names.to_vec()
    };
    split_metrics(
        &model,
        &x,
        data.targets(),
        &standardized,
        checkpoint.target_standardizer.as_ref(),
        &names,
        eval_samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn sinc_config(iterations: u64) -> ExperimentConfig {
        let text = format!(
            r#"
            [dataset]
            kind = "sinc"
            n = 24
            n_test = 16

            [model]
            hidden = [8]

            [method]
            name = "bali"

            [method.bali]
            iterations = {iterations}
            batch_size = 8
            pred_samples = 16

            [run]
            seeds = [3]
            eval_samples = 8
            "#
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn zero_iterations_evaluate_the_initialization_only() {
        let report = run_experiment(&sinc_config(0), None, None).unwrap();
        assert!(report.errors.is_empty(), "errors: {:?}", report.errors);
        assert!(!report.records.is_empty());
        assert!(report.records.iter().all(|r| r.iteration == 0), "only the initial evaluation may appear");
        let names: Vec<&str> = report.records.iter().map(|r| r.metric.as_str()).collect();
        assert!(names.contains(&"train_rmse") && names.contains(&"test_nll"), "defaults cover both splits");
    }

    #[test]
    fn records_follow_the_evaluation_cadence() {
        let config = sinc_config(7);
        // 24 points at batch 8: one pass is 3 iterations, so the cadence is 30.
        let report = run_experiment(&config, None, None).unwrap();
        assert!(report.errors.is_empty(), "errors: {:?}", report.errors);
        let mut iters: Vec<u64> = report.records.iter().map(|r| r.iteration).collect();
        iters.sort_unstable();
        iters.dedup();
        assert!(iters == [0, 7], "cadence 30 exceeds the budget, so only 0 and the final evaluation fire");
        assert!(report.timings.iter().all(|t| t.metric == "wall_time_s"));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let config = sinc_config(5);
        let a = run_experiment(&config, None, None).unwrap();
        let b = run_experiment(&config, None, None).unwrap();
        assert!(a.records == b.records, "metric records must not depend on wall time or ambient state");

        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_experiment(&config, Some(&out_a), None).unwrap();
        run_experiment(&config, Some(&out_b), None).unwrap();
        let file_a = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
        let file_b = std::fs::read_to_string(out_b.join("metrics.csv")).unwrap();
        assert!(file_a == file_b, "metrics.csv is part of the determinism contract");
        assert!(file_a.lines().next() == Some("seed,split,iteration,metric,value"));
    }

    #[test]
    fn sinc_grid_file_covers_the_requested_lattice() {
        let mut config = sinc_config(3);
        config.run.grid = Some(GridConfig { lo: -2.0, hi: 2.0, step: 0.01 });
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&config, Some(dir.path()), None).unwrap();
        assert!(report.errors.is_empty(), "errors: {:?}", report.errors);
        let grid = std::fs::read_to_string(dir.path().join("grid_seed3.csv")).unwrap();
        let lines: Vec<&str> = grid.lines().collect();
        assert!(lines.len() == 402, "header plus 401 lattice points, got {}", lines.len());
        assert!(lines[0] == "x,mean,std");
        for line in &lines[1..] {
            let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
            assert!(fields.len() == 3);
            assert!(fields.iter().all(|v| v.is_finite()), "grid row must be finite: {line}");
            assert!(fields[2] > 0.0, "predictive spread is positive everywhere");
        }
        let first: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
        let last: f64 = lines[401].split(',').next().unwrap().parse().unwrap();
        assert!(first == -2.0 && (last - 2.0).abs() < 1e-9, "grid spans [-2, 2]");
    }

    #[test]
    fn csv_runs_split_per_seed_and_map_method_trains() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("line.csv");
        let mut text = String::from("a,b,y\n");
        let mut rng = RngStream::new(5, 0);
        for _ in 0..40 {
            let a = rng.uniform(-1.0, 1.0);
            let b = rng.uniform(-1.0, 1.0);
            text.push_str(&format!("{},{},{}\n", a, b, 2.0 * a - b + 0.05 * rng.standard_normal()));
        }
        std::fs::write(&data_path, text).unwrap();

        let config_text = format!(
            r#"
            [dataset]
            kind = "csv"
            path = "{}"
            targets = ["y"]
            task = "regression"
            test_fraction = 0.2

            [model]
            hidden = [8]

            [method]
            name = "map"

            [method.map]
            iterations = 200
            lr = 0.05
            noise_var = 0.01

            [run]
            seeds = [0, 1]
            eval_samples = 4
            "#,
            data_path.display()
        );
        let config = ExperimentConfig::from_toml_str(&config_text).unwrap();
        let report = run_experiment(&config, None, None).unwrap();
        assert!(report.errors.is_empty(), "errors: {:?}", report.errors);
        let splits: Vec<usize> = report.records.iter().map(|r| r.split).collect();
        assert!(splits.contains(&0) && splits.contains(&1), "each seed trains its own split");
        let final_rmse: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.metric == "train_rmse" && r.iteration == 200)
            .map(|r| r.value)
            .collect();
        let initial_rmse: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.metric == "train_rmse" && r.iteration == 0)
            .map(|r| r.value)
            .collect();
        for (i, (first, last)) in initial_rmse.iter().zip(&final_rmse).enumerate() {
            assert!(last < first, "cell {i}: training must reduce rmse, {first} -> {last}");
        }
    }

    #[test]
    fn cell_errors_are_recorded_without_sinking_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("three.csv");
        let mut text = String::from("a,label\n");
        for i in 0..30 {
            text.push_str(&format!("{}.5,{}\n", i, i % 3));
        }
        std::fs::write(&data_path, text).unwrap();
        let config_text = format!(
            r#"
            [dataset]
            kind = "csv"
            path = "{}"
            targets = ["label"]
            task = "classification"

            [model]
            hidden = [4]

            [method]
            name = "map"

            [method.map]
            iterations = 1

            [run]
            seeds = [0, 1]
            metrics = ["auc"]
            "#,
            data_path.display()
        );
        let config = ExperimentConfig::from_toml_str(&config_text).unwrap();
        let out = dir.path().join("results");
        let report = run_experiment(&config, Some(&out), None).unwrap();
        assert!(report.errors.len() == 2, "auc on three classes fails every cell: {:?}", report.errors);
        assert!(report.records.is_empty());
        assert!(out.join("errors.txt").exists(), "failures land in errors.txt");
    }

    #[test]
    fn checkpoints_reload_and_reproduce_final_metrics() {
        let mut config = sinc_config(4);
        config.run.save_checkpoint = true;
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&config, Some(dir.path()), None).unwrap();
        assert!(report.errors.is_empty(), "errors: {:?}", report.errors);

        let checkpoint = Checkpoint::load(&dir.path().join("checkpoint_seed3.json")).unwrap();
        let test_data = gen_sinc(16, 0.1, &mut RngStream::new(3, streams::DATA_GEN + 1)).unwrap();
        let values = evaluate_checkpoint(&checkpoint, &test_data, &[], 8).unwrap();
        for (name, value) in values {
            let recorded = report
                .records
                .iter()
                .find(|r| r.iteration == 4 && r.metric == format!("test_{name}"))
                .expect("final test metric present");
            assert!(
                recorded.value == value,
                "checkpointed model must reproduce {name}: {} vs {value}",
                recorded.value
            );
        }
    }

    #[test]
    fn dataset_csv_roundtrip_is_exact() {
        let mut rng = RngStream::new(21, 0);
        let moons = gen_two_moons(12, 0.2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        write_dataset_csv(&moons, &path).unwrap();
        let table = load_csv(&path).unwrap();
        assert!(table.headers == ["x0", "x1", "label"]);
        let back = Dataset::from_table(&table, &["label".into()], TaskKind::Classification).unwrap();
        assert!(back.x().max_abs_diff(moons.x()) == 0.0, "shortest-roundtrip floats survive the file");
        assert!(back.targets() == moons.targets());
    }
}
