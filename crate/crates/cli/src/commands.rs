use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use fairexpo::clicksim::{self, ClickRecord, ExaminationModel, Intervention};
use fairexpo::dataset::{self, DatasetSplit, LetorRecord, PoolRecord, Query, QuerySampling};
use fairexpo::eval::{self, frontier, write_audit_csv, write_frontier_csv};
use fairexpo::policy::ScorerParams;
use fairexpo::trainer::{self, build_problems, sweep_problem, write_trace_csv, SweepResult};
use log::{info, warn};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::PrepareArgs;

pub enum Source {
    Synth,
    Letor(PathBuf),
    LetorSplit { train: PathBuf, validation: PathBuf, test: PathBuf },
}

impl Source {
    pub fn from_args(a: &PrepareArgs) -> Self {
        match (&a.letor, &a.letor_train, &a.letor_validation, &a.letor_test) {
            (Some(p), ..) => Source::Letor(p.clone()),
            (None, Some(t), Some(v), Some(s)) => {
                Source::LetorSplit { train: t.clone(), validation: v.clone(), test: s.clone() }
            }
            _ => Source::Synth,
        }
    }
}

const SPLITS: [&str; 3] = ["train", "validation", "test"];

pub struct Context {
    root: PathBuf,
    config: PipelineConfig,
}

fn require(path: &Path) -> Result<(), CliError> {
    std::fs::metadata(path).map(|_| ()).map_err(|e| CliError::input(path, e))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn model_name(lambda: f64) -> String {
    format!("lambda={lambda}.bin")
}

impl Context {
    pub fn new(root: &Path, config: PipelineConfig) -> Self {
        Self { root: root.to_path_buf(), config }
    }

    fn at(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn data_dir(&self) -> PathBuf {
        self.at(&self.config.paths.data)
    }

    fn logs_dir(&self) -> PathBuf {
        self.at(&self.config.paths.logs)
    }

    fn models_dir(&self) -> PathBuf {
        self.at(&self.config.paths.models)
    }

    fn reports_dir(&self) -> PathBuf {
        self.at(&self.config.paths.reports)
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.config, &self.root)
    }

    /// Exposure model used for evaluation and audits.
    fn exposure(&self) -> ExaminationModel {
        ExaminationModel::position_bias(self.config.trainer.exposure_eta)
    }

    fn load_split(&self, m: &mut Manifest) -> anyhow::Result<DatasetSplit> {
        let dir = self.data_dir();
        for name in ["meta.json", "train.jsonl", "validation.jsonl", "test.jsonl"] {
            let p = dir.join(name);
            require(&p)?;
            m.input(&p)?;
        }
        DatasetSplit::load(&dir).with_context(|| format!("loading dataset from {}", dir.display()))
    }

    fn load_logs(&self, path: &Path, m: &mut Manifest) -> anyhow::Result<Vec<ClickRecord>> {
        m.input(path)?;
        let f = File::open(path).map_err(|e| CliError::input(path, e))?;
        clicksim::read_click_log(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    }

    fn load_model(&self, path: &Path, m: &mut Manifest) -> anyhow::Result<ScorerParams> {
        m.input(path)?;
        ScorerParams::load(path).with_context(|| format!("loading model {}", path.display()))
    }

    fn save_model(&self, params: &ScorerParams, path: &Path, m: &mut Manifest) -> anyhow::Result<()> {
        create(path)?;
        params.save(path).with_context(|| format!("writing {}", path.display()))?;
        m.output(path)?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".json");
        m.output(Path::new(&sidecar))
    }

    fn logging_policy_path(&self) -> PathBuf {
        self.models_dir().join("logging.bin")
    }

    fn fit_logging_policy(&self, split: &DatasetSplit, m: &mut Manifest) -> anyhow::Result<ScorerParams> {
        let seed = self.config.sub_seed("logpolicy");
        m.seed("logpolicy", seed);
        let policy = clicksim::train_logging_policy(&split.train, self.config.clicksim.log_fraction, seed)
            .context("fitting the logging policy")?;
        self.save_model(&policy, &self.logging_policy_path(), m)?;
        Ok(policy)
    }

    /// The saved logging policy, or a freshly fitted one when none exists.
    fn logging_policy(&self, split: &DatasetSplit, m: &mut Manifest) -> anyhow::Result<ScorerParams> {
        let path = self.logging_policy_path();
        if path.exists() {
            self.load_model(&path, m)
        } else {
            info!("no logging policy at {}; fitting one", path.display());
            self.fit_logging_policy(split, m)
        }
    }

    /// 0-based index of the LETOR group attribute.
    fn attribute(&self) -> Result<usize, CliError> {
        self.config.dataset.letor.attribute_feature_id.map(|id| id - 1).ok_or_else(|| CliError::Schema {
            field: "dataset.letor.attribute_feature_id".into(),
            message: "required for LETOR input (or pass --attribute-id)".into(),
        })
    }

    pub fn prepare(&self, source: &Source) -> anyhow::Result<()> {
        if !matches!(source, Source::Synth) {
            self.attribute()?;
        }
        let mut m = self.manifest("prepare");
        let seed = self.config.sub_seed("dataset");
        m.seed("dataset", seed);
        let split = match source {
            Source::Synth => {
                m.param("source", "synth");
                dataset::synth_generate(&self.config.dataset.synth).context("generating synthetic data")?
            }
            Source::Letor(path) => {
                m.param("source", "letor");
                m.input(path)?;
                let l = &self.config.dataset.letor;
                let counts = [l.train_queries, l.validation_queries, l.test_queries];
                let pool = read_pool(path)?;
                let mut all = construct(&pool, counts.iter().sum(), seed, &self.config)?;
                let test = all.split_off(counts[0] + counts[1]);
                let validation = all.split_off(counts[0]);
                self.letor_split([all, validation, test])?
            }
            Source::LetorSplit { train, validation, test } => {
                m.param("source", "letor_split");
                let l = &self.config.dataset.letor;
                let counts = [l.train_queries, l.validation_queries, l.test_queries];
                let mut parts = Vec::new();
                for ((path, count), name) in [train, validation, test].into_iter().zip(counts).zip(SPLITS) {
                    m.input(path)?;
                    let pool = read_pool(path)?;
                    parts.push(construct(&pool, count, fairexpo::seed::derive(seed, name), &self.config)?);
                }
                let [a, b, c]: [Vec<Query>; 3] = parts.try_into().expect("three splits");
                self.letor_split([a, b, c])?
            }
        };
        let dir = self.data_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        split.save(&dir).with_context(|| format!("writing dataset to {}", dir.display()))?;
        for name in ["train.jsonl", "validation.jsonl", "test.jsonl", "meta.json"] {
            m.output(&dir.join(name))?;
        }
        m.param("feature_count", split.feature_count);
        m.param("group_count", split.group_count);
        m.param("queries", [split.train.len(), split.validation.len(), split.test.len()]);
        m.write(&dir, "prepare")?;
        info!(
            "wrote {} / {} / {} queries with {} features and {} groups to {}",
            split.train.len(),
            split.validation.len(),
            split.test.len(),
            split.feature_count,
            split.group_count,
            dir.display()
        );
        Ok(())
    }

    /// Groups from training-split thresholds, a common feature width, then
    /// optional z-scoring.
    fn letor_split(&self, [mut train, mut validation, mut test]: [Vec<Query>; 3]) -> anyhow::Result<DatasetSplit> {
        let attribute = self.attribute()?;
        let l = &self.config.dataset.letor;
        let width = [&train, &validation, &test]
            .iter()
            .flat_map(|qs| qs.iter().flat_map(|q| q.items.iter().map(|it| it.features.len())))
            .max()
            .unwrap_or(0);
        if attribute >= width {
            bail!("attribute feature id {} exceeds the feature width {width}", attribute + 1);
        }
        for it in [&mut train, &mut validation, &mut test]
            .into_iter()
            .flat_map(|qs| qs.iter_mut())
            .flat_map(|q| q.items.iter_mut())
        {
            it.features.resize(width, 0.0);
        }
        let values: Vec<f64> = train.iter().flat_map(|q| q.items.iter().map(|it| it.features[attribute])).collect();
        let thresholds = dataset::resolve_thresholds(&l.thresholds, &values).context("resolving group thresholds")?;
        let mut group_count = 0;
        for qs in [&mut train, &mut validation, &mut test] {
            for q in qs.iter_mut() {
                group_count = dataset::assign_groups(&mut q.items, attribute, &thresholds)?;
            }
        }
        info!("group thresholds on feature {}: {thresholds:?}", attribute + 1);
        let mut split = DatasetSplit {
            train,
            validation,
            test,
            feature_count: width,
            group_count,
            group_feature_ids: vec![attribute],
            standardization: None,
        };
        if l.standardize {
            dataset::standardize(&mut split);
        }
        split.validate().context("constructed split is inconsistent")?;
        Ok(split)
    }

    pub fn logpolicy(&self) -> anyhow::Result<()> {
        let mut m = self.manifest("logpolicy");
        let split = self.load_split(&mut m)?;
        self.fit_logging_policy(&split, &mut m)?;
        m.write(&self.models_dir(), "logpolicy")?;
        info!("wrote {}", self.logging_policy_path().display());
        Ok(())
    }

    pub fn simulate(&self) -> anyhow::Result<()> {
        let mut m = self.manifest("simulate");
        let split = self.load_split(&mut m)?;
        let policy = self.logging_policy(&split, &mut m)?;
        let c = &self.config.clicksim;
        let exam = c.exam();
        let dir = self.logs_dir();
        let mut summary = serde_json::Map::new();
        for (name, queries) in SPLITS.into_iter().zip([&split.train, &split.validation, &split.test]) {
            let seed = self.config.sub_seed(&format!("simulate/{name}"));
            m.seed(&format!("simulate/{name}"), seed);
            let records = match c.impressions {
                Some(n) => clicksim::simulate_clicks(queries, &policy, &exam, n, seed),
                None => clicksim::simulate_click_budget(queries, &policy, &exam, c.clicks, seed),
            }
            .with_context(|| format!("simulating {name} clicks"))?;
            let path = dir.join(format!("{name}.jsonl"));
            let mut w = create(&path)?;
            clicksim::write_click_log(&mut w, &records)?;
            w.flush()?;
            m.output(&path)?;
            let clicks = clicksim::total_clicks(&records);
            info!("{name}: {} impressions, {clicks} clicks", records.len());
            summary.insert(name.into(), serde_json::json!({ "impressions": records.len(), "clicks": clicks }));
        }
        m.param("logged", &summary);
        m.write(&dir, "simulate")?;
        print_json(&summary)
    }

    pub fn noise_cal(&self) -> anyhow::Result<()> {
        let mut m = self.manifest("noise-cal");
        let split = self.load_split(&mut m)?;
        let policy = self.logging_policy(&split, &mut m)?;
        let c = &self.config.clicksim;
        let plan = Intervention {
            planted_position: c.planted_k,
            fraction: c.intervention_fraction,
            impressions: c.intervention_impressions,
        };
        let seed = self.config.sub_seed("noise-cal");
        m.seed("noise-cal", seed);
        let est = clicksim::estimate_eps_minus(&split.train, &policy, &c.exam(), &plan, seed)
            .context("running the planted-item intervention")?;
        let dir = self.reports_dir();
        let path = dir.join("noise_cal.json");
        write_json(&path, &est)?;
        m.output(&path)?;
        m.write(&dir, "noise-cal")?;
        print_json(&est)
    }

    fn problems(&self, m: &mut Manifest) -> anyhow::Result<(DatasetSplit, trainer::Problem, trainer::Problem)> {
        let split = self.load_split(m)?;
        let logs = self.logs_dir();
        let train_logs = self.load_logs(&logs.join("train.jsonl"), m)?;
        let val_logs = self.load_logs(&logs.join("validation.jsonl"), m)?;
        let (train, validation) = build_problems(&split, &train_logs, &val_logs, &self.config.trainer)
            .context("folding click logs into training problems")?;
        Ok((split, train, validation))
    }

    pub fn train(&self, lambda: f64, out: Option<&Path>) -> anyhow::Result<()> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(CliError::Schema {
                field: "lambda".into(),
                message: format!("must be finite and >= 0, got {lambda}"),
            }
            .into());
        }
        let tag = format!("train_lambda={lambda}");
        let mut m = self.manifest(&tag);
        m.param("lambda", lambda);
        m.seed("trainer", self.config.trainer.seed);
        let (_, train, validation) = self.problems(&mut m)?;
        // a one-point sweep, so the run matches the same point of `sweep`
        let config = trainer::TrainConfig { lambda_grid: vec![lambda], ..self.config.trainer.clone() };
        let result = sweep_problem(&train, &validation, &config);
        let point = &result.points[0];
        let Some(params) = &point.params else {
            bail!("training failed: {}", point.error.as_deref().unwrap_or("unknown error"));
        };
        let model = out.map(Path::to_path_buf).unwrap_or_else(|| self.models_dir().join(model_name(lambda)));
        self.save_model(params, &model, &mut m)?;
        let reports = self.reports_dir();
        let trace = reports.join(format!("trace_lambda={lambda}.csv"));
        let mut w = create(&trace)?;
        write_trace_csv(&mut w, &point.trace)?;
        w.flush()?;
        m.output(&trace)?;
        let summary = serde_json::json!({
            "lambda": lambda,
            "seed": point.seed,
            "best_epoch": point.best_epoch,
            "validation": point.validation,
        });
        let report = reports.join(format!("{tag}.json"));
        write_json(&report, &summary)?;
        m.output(&report)?;
        m.write(model.parent().unwrap_or(&self.root), &tag)?;
        info!("wrote {}", model.display());
        print_json(&summary)
    }

    pub fn sweep(&self) -> anyhow::Result<()> {
        let mut m = self.manifest("sweep");
        m.seed("trainer", self.config.trainer.seed);
        let (split, train, validation) = self.problems(&mut m)?;
        let result = sweep_problem(&train, &validation, &self.config.trainer);
        let reports = self.reports_dir();
        let models = self.models_dir();

        let sweep_path = reports.join("sweep.json");
        write_json(&sweep_path, &result)?;
        m.output(&sweep_path)?;
        let trace = reports.join("trace.csv");
        let mut w = create(&trace)?;
        write_trace_csv(&mut w, &result.trace())?;
        w.flush()?;
        m.output(&trace)?;
        for p in &result.points {
            match &p.params {
                Some(params) => self.save_model(params, &models.join("sweep").join(model_name(p.lambda)), &mut m)?,
                None => warn!("lambda {} failed: {}", p.lambda, p.error.as_deref().unwrap_or("")),
            }
        }
        let Some(selected) = result.selected_point() else {
            m.write(&reports, "sweep")?;
            bail!("no lambda in the grid trained successfully");
        };
        self.save_model(
            selected.params.as_ref().expect("selected point is trained"),
            &models.join("selected.bin"),
            &mut m,
        )?;

        let eval_seed = self.config.sub_seed("eval");
        m.seed("eval", eval_seed);
        let rows =
            frontier(&result, &split.test, split.group_count, &self.exposure(), self.config.eval.mode(), eval_seed)?;
        let frontier_path = reports.join("frontier.csv");
        let mut w = create(&frontier_path)?;
        write_frontier_csv(&mut w, &rows)?;
        w.flush()?;
        m.output(&frontier_path)?;
        m.write(&reports, "sweep")?;

        if !result.constraint_satisfied {
            warn!("no lambda met delta {:?}; selected the least-disparity point", result.delta);
        }
        print_json(&serde_json::json!({
            "selected_lambda": selected.lambda,
            "constraint_satisfied": result.constraint_satisfied,
            "validation": selected.validation,
            "frontier": rows,
        }))
    }

    fn model_or_selected(&self, model: Option<&Path>) -> PathBuf {
        model.map(Path::to_path_buf).unwrap_or_else(|| self.models_dir().join("selected.bin"))
    }

    pub fn eval(&self, model: Option<&Path>) -> anyhow::Result<()> {
        let mut m = self.manifest("eval");
        let split = self.load_split(&mut m)?;
        let model = self.model_or_selected(model);
        let params = self.load_model(&model, &mut m)?;
        let seed = self.config.sub_seed("eval");
        m.seed("eval", seed);
        let mode = self.config.eval.mode();
        let exam = self.exposure();
        let report = eval::evaluate(&params, &split.test, split.group_count, &exam, mode, seed)?;
        let reports = self.reports_dir();
        let path = reports.join("eval.json");
        write_json(&path, &report)?;
        m.output(&path)?;

        let sweep_path = reports.join("sweep.json");
        if sweep_path.exists() {
            m.input(&sweep_path)?;
            let sweep: SweepResult = serde_json::from_reader(BufReader::new(File::open(&sweep_path)?))
                .with_context(|| format!("reading {}", sweep_path.display()))?;
            let rows = frontier(&sweep, &split.test, split.group_count, &exam, mode, seed)?;
            let path = reports.join("eval_frontier.csv");
            let mut w = create(&path)?;
            write_frontier_csv(&mut w, &rows)?;
            w.flush()?;
            m.output(&path)?;
        } else {
            info!("no sweep at {}; frontier skipped", sweep_path.display());
        }
        m.write(&reports, "eval")?;
        print_json(&report)
    }

    pub fn audit(&self, model: Option<&Path>, logs: Option<&Path>, eps_minus: Option<f64>) -> anyhow::Result<()> {
        let mut m = self.manifest("audit");
        let split = self.load_split(&mut m)?;
        let model = self.model_or_selected(model);
        let params = self.load_model(&model, &mut m)?;
        let logs = logs.map(Path::to_path_buf).unwrap_or_else(|| self.logs_dir().join("test.jsonl"));
        let records = self.load_logs(&logs, &mut m)?;
        let eps = eps_minus.unwrap_or(self.config.clicksim.eps_minus);
        m.param("eps_minus", eps);
        let queries: Vec<Query> =
            [&split.train, &split.validation, &split.test].into_iter().flatten().cloned().collect();
        let rows = eval::audit(&params, &queries, &records, split.group_count, &self.exposure(), Some(eps))?;
        let reports = self.reports_dir();
        let path = reports.join("audit.csv");
        let mut w = create(&path)?;
        write_audit_csv(&mut w, &rows)?;
        w.flush()?;
        m.output(&path)?;
        m.write(&reports, "audit")?;
        for r in rows.iter().filter(|r| r.qid == eval::AUDIT_AGGREGATE) {
            println!("{}-{} {}: {}", r.pair.0, r.pair.1, r.kind.as_str(), r.value);
        }
        Ok(())
    }
}

fn read_pool(path: &Path) -> anyhow::Result<Vec<PoolRecord>> {
    let f = File::open(path).map_err(|e| CliError::input(path, e))?;
    let records: Vec<LetorRecord> =
        dataset::parse_letor(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?;
    records
        .iter()
        .map(PoolRecord::from_letor)
        .collect::<Result<_, _>>()
        .with_context(|| format!("binarizing {}", path.display()))
}

fn construct(pool: &[PoolRecord], count: usize, seed: u64, config: &PipelineConfig) -> anyhow::Result<Vec<Query>> {
    let l = &config.dataset.letor;
    let sampling =
        QuerySampling { candidates: l.candidates, relevant: l.relevant, count, reuse_sources: l.reuse_sources };
    dataset::construct_queries(pool, &sampling, seed).context("constructing queries")
}
