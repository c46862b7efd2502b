//! Orchestrates joint training per sampler, second-stage balancing per
//! method and evaluation, replicated over seeds, and writes the artifact
//! directory:
//!
//! ```text
//! manifest.toml          config, seeds and crate version
//! summary.csv            one row per (seed, sampler, method)
//! summary.md             medians over seeds, methods x samplers x splits
//! reports/seed<S>_<sampler>_<method>.csv   per-class evaluation reports
//! weight_norms.csv       per-class weight norms sorted by training count
//! tau_sweep.csv          tau sweep of every joint classifier
//! tau_selection.csv      selected and learned tau per (seed, sampler)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::balancing::{
    crt, learn_tau, lws_fit, ncm_fit, select_tau, tau_normalize, TauObjective,
};
use crate::data::{
    class_profile, generate_longtail, load_feature_dataset, ClassProfile, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::diagnostics::{tau_sweep, weight_norm_profile, TauSweepRow, WeightNormProfile};
use crate::harness::eval::{evaluate, fmt_pct, EvalReport};
use crate::head::{init_mlp, ClassifierHead};
use crate::sampling::SamplerKind;
use crate::training::train_head;

/// Train, validation (optional) and test sets of one replication.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

pub fn load_data(config: &ExperimentConfig, seed: u64) -> Result<Splits> {
    match &config.train_path {
        Some(train) => {
            let test = config
                .test_path
                .as_ref()
                .ok_or_else(|| Error::Config("train_path requires test_path".into()))?;
            Ok(Splits {
                train: load_feature_dataset(train)?,
                val: config.val_path.as_ref().map(load_feature_dataset).transpose()?,
                test: load_feature_dataset(test)?,
            })
        }
        None => {
            let (train, val, test) = generate_longtail(&config.synthetic(seed))?;
            Ok(Splits {
                train,
                val: Some(val),
                test,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TauRecord {
    pub val: Option<f64>,
    pub train: Option<f64>,
    pub learned: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub seed: u64,
    pub sampler: SamplerKind,
    pub methods: Vec<MethodOutcome>,
    pub norms: Vec<(Method, WeightNormProfile)>,
    pub sweep: Vec<TauSweepRow>,
    pub taus: TauRecord,
}

impl CellOutcome {
    pub fn report(&self, method: Method) -> Option<&EvalReport> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .and_then(|m| m.result.as_ref().ok())
    }

    pub fn norms(&self, method: Method) -> Option<&WeightNormProfile> {
        self.norms.iter().find(|(m, _)| *m == method).map(|(_, p)| p)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl ExperimentOutcome {
    pub fn cell(&self, seed: u64, sampler: SamplerKind) -> Option<&CellOutcome> {
        self.cells
            .iter()
            .find(|c| c.seed == seed && c.sampler == sampler)
    }
}

fn transform(backbone: &ClassifierHead, ds: &Dataset) -> Result<Dataset> {
    if backbone.hidden.is_empty() {
        return Ok(ds.clone());
    }
    let repr: Array2<f64> = backbone.represent(ds.features().view());
    ds.with_features(repr)
}

/// Everything a second-stage method needs, already mapped through the
/// frozen representation.
struct Stage<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    profile: &'a ClassProfile,
    joint: ClassifierHead,
    train: Dataset,
    val: Option<Dataset>,
    test: Dataset,
}

impl Stage<'_> {
    fn run(&self, method: Method, taus: &mut TauRecord) -> Result<(EvalReport, ClassifierHead)> {
        let head = match method {
            Method::Joint => self.joint.clone(),
            Method::Crt => crt(&self.train, &self.config.stage_two(self.seed))?,
            Method::Ncm => {
                let ncm = ncm_fit(&self.train, self.config.ncm_metric)?;
                let report = evaluate(&ncm, &self.test, self.profile)?;
                return Ok((report, ncm.to_head()));
            }
            Method::Tau => {
                let grid = self.config.tau_grid();
                let by_train = select_tau(&self.joint, &self.train, &grid, TauObjective::TrainClassAveraged)?;
                taus.train = Some(by_train.chosen);
                let chosen = match &self.val {
                    Some(val) => {
                        let sel = select_tau(&self.joint, val, &grid, TauObjective::ValTop1)?;
                        taus.val = Some(sel.chosen);
                        sel.chosen
                    }
                    None => by_train.chosen,
                };
                tau_normalize(&self.joint, chosen)?
            }
            Method::Lws => lws_fit(&self.joint, &self.train, &self.config.stage_two(self.seed))?,
            Method::LearnTau => {
                let tau = learn_tau(&self.joint, &self.train, &self.config.learn_tau(self.seed))?;
                taus.learned = Some(tau);
                tau_normalize(&self.joint, tau)?
            }
        };
        let report = evaluate(&head, &self.test, self.profile)?;
        Ok((report, head))
    }
}

fn run_cell(config: &ExperimentConfig, seed: u64, sampler: SamplerKind, data: &Splits) -> CellOutcome {
    let mut cell = CellOutcome {
        seed,
        sampler,
        methods: Vec::new(),
        norms: Vec::new(),
        sweep: Vec::new(),
        taus: TauRecord::default(),
    };
    let fail_all = |cell: &mut CellOutcome, e: &Error| {
        cell.methods = config
            .methods
            .iter()
            .map(|&method| MethodOutcome {
                method,
                result: Err(e.to_string()),
            })
            .collect();
    };
    let prepared = (|| -> Result<(ClassProfile, ClassifierHead, ClassifierHead)> {
        let profile = class_profile(&data.train, config.many_threshold, config.few_threshold)?;
        let hidden: Vec<usize> = (config.backbone_hidden > 0)
            .then_some(config.backbone_hidden)
            .into_iter()
            .collect();
        let init = init_mlp(data.train.dim(), &hidden, data.train.classes(), seed)?;
        let (joint, _) = train_head(&data.train, &config.stage_one(sampler, seed), Some(init))?;
        Ok((profile, joint.top(), joint))
    })();
    let (profile, top, full) = match prepared {
        Ok(v) => v,
        Err(e) => {
            fail_all(&mut cell, &e);
            return cell;
        }
    };
    let stage = (|| -> Result<Stage<'_>> {
        Ok(Stage {
            config,
            seed,
            profile: &profile,
            train: transform(&full, &data.train)?,
            val: data.val.as_ref().map(|v| transform(&full, v)).transpose()?,
            test: transform(&full, &data.test)?,
            joint: top.clone(),
        })
    })();
    let stage = match stage {
        Ok(s) => s,
        Err(e) => {
            fail_all(&mut cell, &e);
            return cell;
        }
    };

    if let Ok(sweep) = tau_sweep(&stage.joint, &stage.test, &profile, &config.sweep_grid()) {
        cell.sweep = sweep;
    }
    if !config.methods.contains(&Method::Joint) {
        if let Ok(p) = weight_norm_profile(&stage.joint, &profile) {
            cell.norms.push((Method::Joint, p));
        }
    }
    for &method in &config.methods {
        let mut taus = cell.taus;
        let result = stage.run(method, &mut taus);
        cell.taus = taus;
        let result = match result {
            Ok((report, head)) => {
                if let Ok(p) = weight_norm_profile(&head, &profile) {
                    cell.norms.push((method, p));
                }
                Ok(report.with_method(method.to_string()))
            }
            Err(e) => Err(e.to_string()),
        };
        cell.methods.push(MethodOutcome { method, result });
    }
    cell
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
}

/// Run the full grid and write the artifact directory. Individual
/// (seed, sampler, method) failures are recorded and do not stop the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let cells = pool.install(|| -> Result<Vec<CellOutcome>> {
        let data: Vec<Splits> = config
            .seeds
            .par_iter()
            .map(|&s| load_data(config, s))
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, SamplerKind)> = (0..config.seeds.len())
            .flat_map(|i| config.samplers.iter().map(move |&s| (i, s)))
            .collect();
        Ok(jobs
            .par_iter()
            .map(|&(i, sampler)| run_cell(config, config.seeds[i], sampler, &data[i]))
            .collect())
    })?;
    let outcome = ExperimentOutcome {
        dir: config.output_dir.clone(),
        cells,
    };
    write_artifacts(config, &outcome)?;
    Ok(outcome)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn write_artifacts(config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    let dir = &outcome.dir;
    let reports = dir.join("reports");
    if reports.exists() {
        fs::remove_dir_all(&reports)?;
    }
    fs::create_dir_all(&reports)?;

    let manifest = Manifest {
        tool: "longtail",
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    fs::write(
        dir.join("manifest.toml"),
        toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;

    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record([
        "seed", "sampler", "method", "status", "many", "medium", "few", "all", "class_avg", "n_eval", "error",
    ])?;
    let mut norms = csv::Writer::from_path(dir.join("weight_norms.csv"))?;
    norms.write_record(["seed", "sampler", "method", "rank", "class", "train_count", "norm"])?;
    let mut sweep = csv::Writer::from_path(dir.join("tau_sweep.csv"))?;
    sweep.write_record(["seed", "sampler", "tau", "many", "medium", "few", "all"])?;
    let mut taus = csv::Writer::from_path(dir.join("tau_selection.csv"))?;
    taus.write_record(["seed", "sampler", "tau_val", "tau_train", "tau_learned"])?;

    for cell in &outcome.cells {
        let (seed, sampler) = (cell.seed.to_string(), cell.sampler.to_string());
        for m in &cell.methods {
            match &m.result {
                Ok(r) => {
                    let name = format!("seed{}_{}_{}.csv", cell.seed, cell.sampler, m.method);
                    r.write_csv(fs::File::create(reports.join(name))?)?;
                    summary.write_record([
                        seed.clone(),
                        sampler.clone(),
                        m.method.to_string(),
                        "ok".into(),
                        opt(r.top1_many),
                        opt(r.top1_medium),
                        opt(r.top1_few),
                        format!("{:.4}", r.top1_all),
                        format!("{:.4}", r.class_avg),
                        r.n_eval.to_string(),
                        String::new(),
                    ])?;
                }
                Err(e) => summary.write_record([
                    seed.clone(),
                    sampler.clone(),
                    m.method.to_string(),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ])?,
            }
        }
        for (method, p) in &cell.norms {
            for (rank, ((class, count), norm)) in p.classes.iter().zip(&p.counts).zip(&p.norms).enumerate() {
                norms.write_record([
                    seed.clone(),
                    sampler.clone(),
                    method.to_string(),
                    rank.to_string(),
                    class.to_string(),
                    count.to_string(),
                    format!("{norm:.6}"),
                ])?;
            }
        }
        for row in &cell.sweep {
            sweep.write_record([
                seed.clone(),
                sampler.clone(),
                format!("{}", row.tau),
                opt(row.many),
                opt(row.medium),
                opt(row.few),
                format!("{:.4}", row.all),
            ])?;
        }
        let t = cell.taus;
        if t != TauRecord::default() {
            let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
            taus.write_record([seed.clone(), sampler.clone(), f(t.val), f(t.train), f(t.learned)])?;
        }
    }
    summary.flush()?;
    norms.flush()?;
    sweep.flush()?;
    taus.flush()?;

    let mut md = fs::File::create(dir.join("summary.md"))?;
    md.write_all(render_markdown(config, outcome).as_bytes())?;
    Ok(())
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Medians over seeds for every (method, sampler).
pub fn render_markdown(config: &ExperimentConfig, outcome: &ExperimentOutcome) -> String {
    let mut groups: BTreeMap<(Method, usize), Vec<&EvalReport>> = BTreeMap::new();
    let mut failures: BTreeMap<(Method, usize), usize> = BTreeMap::new();
    for cell in &outcome.cells {
        let si = config.samplers.iter().position(|&s| s == cell.sampler).unwrap_or(0);
        for m in &cell.methods {
            match &m.result {
                Ok(r) => groups.entry((m.method, si)).or_default().push(r),
                Err(_) => *failures.entry((m.method, si)).or_default() += 1,
            }
        }
    }
    let mut out = String::new();
    out.push_str(&format!(
        "# Long-tail experiment summary\n\nTop-1 accuracy (%), median over {} seed(s): {:?}.\n\n",
        config.seeds.len(),
        config.seeds
    ));
    out.push_str("| Method | Sampler | Many | Medium | Few | All | Runs |\n");
    out.push_str("|---|---|---:|---:|---:|---:|---:|\n");
    for &method in &config.methods {
        for (si, sampler) in config.samplers.iter().enumerate() {
            let reports = groups.get(&(method, si)).map(Vec::as_slice).unwrap_or(&[]);
            let split_median = |split: Split| {
                let mut v: Vec<f64> = reports.iter().filter_map(|r| r.split(split)).collect();
                median(&mut v)
            };
            let mut all: Vec<f64> = reports.iter().map(|r| r.top1_all).collect();
            let failed = failures.get(&(method, si)).copied().unwrap_or(0);
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {}{} |\n",
                method,
                sampler,
                fmt_pct(split_median(Split::Many)),
                fmt_pct(split_median(Split::Medium)),
                fmt_pct(split_median(Split::Few)),
                fmt_pct(median(&mut all)),
                reports.len(),
                if failed > 0 { format!(" ({failed} failed)") } else { String::new() },
            ));
        }
    }
    out
}

/// Directory listing helper used by callers that want the report files.
pub fn report_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("reports"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
