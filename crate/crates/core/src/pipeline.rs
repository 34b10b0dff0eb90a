//! Staged experiment pipeline behind the command-line interface.
//!
//! Every stage reads its inputs from files in the output directory and
//! writes its products back there, so stages can be rerun individually and
//! inter-stage state is always inspectable. The enriched feature matrix is
//! exported once for inspection but downstream stages recompute it in memory
//! from `dataset.csv` and `plan.txt`; feature computation is deterministic,
//! so both views agree.
//!
//! Sub-seeds are derived from the experiment seed by component name, which
//! makes a full rerun with the same config byte-identical while keeping the
//! stages' random streams independent.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advtrain::{adversarial_train, AdvTrainConfig, AdvTrainInputs, Schedule};
use crate::attack::{CostModel, DatasetStats};
use crate::component_seed;
use crate::data::{split, Dataset, EntityIndex, SplitIndices, SplitWeeks};
use crate::error::{Error, Result};
use crate::features::{compute_features, EnrichedDataset, EnrichedRow, FeaturePlan};
use crate::gbdt::{GbdtModel, GbdtParams};
use crate::metrics::{evaluate, pauc_at_fpr, threshold_at_fpr, PaucNormalization, Scorer};
use crate::par;
use crate::propagate::{
    assign_estimators, usable_feature_columns, AttackPropagator, EstimatorConfig, EstimatorKind,
    Estimators,
};
use crate::search::{SearchConfig, SearchStrategy, Searcher};
use crate::synth::{generate, GeneratorConfig};

pub const DATASET_FILE: &str = "dataset.csv";
pub const PLAN_FILE: &str = "plan.txt";
pub const ENRICHED_FILE: &str = "enriched.csv";
pub const ESTIMATORS_FILE: &str = "estimators.txt";
pub const BASELINE_FILE: &str = "baseline.model";
pub const ROBUST_FILE: &str = "robust.model";
pub const BENCH_FILE: &str = "attack_bench.csv";
pub const TRACE_FILE: &str = "advtrain_trace.csv";
pub const EVAL_FILE: &str = "evaluation.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Cost caps swept by the attack benchmark.
pub const BENCH_CAPS: [f64; 5] = [7.0, 30.0, 49.0, 65.0, 82.0];

/// Cost caps swept by model evaluation; 0 means no attack.
pub const EVAL_CAPS: [f64; 7] = [0.0, 7.0, 30.0, 49.0, 65.0, 82.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Featurize,
    TrainEstimators,
    TrainBaseline,
    AttackBench,
    AdvTrain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Featurize,
        Stage::TrainEstimators,
        Stage::TrainBaseline,
        Stage::AttackBench,
        Stage::AdvTrain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Featurize => "featurize",
            Stage::TrainEstimators => "train-estimators",
            Stage::TrainBaseline => "train-baseline",
            Stage::AttackBench => "attack-bench",
            Stage::AdvTrain => "adv-train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "generate" => Ok(Stage::Generate),
            "featurize" => Ok(Stage::Featurize),
            "train-estimators" => Ok(Stage::TrainEstimators),
            "train-baseline" => Ok(Stage::TrainBaseline),
            "attack-bench" => Ok(Stage::AttackBench),
            "adv-train" => Ok(Stage::AdvTrain),
            "evaluate" => Ok(Stage::Evaluate),
            "report" => Ok(Stage::Report),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Everything a pipeline run needs, parsed from a sectioned key=value file.
/// Component seeds are derived from `seed` at run time, so the per-module
/// seed fields inside the nested configs are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Test positives attacked by attack-bench and evaluate; 0 means all.
    pub victims: usize,
    pub generator: GeneratorConfig,
    pub split: SplitWeeks,
    /// Feature plan file; the built-in plan when absent.
    pub plan_path: Option<PathBuf>,
    pub costs: CostModel,
    pub learner: GbdtParams,
    pub estimators: EstimatorConfig,
    /// Search settings for attack-bench and evaluate. The benchmark sweeps
    /// all strategies regardless of the configured one.
    pub search: SearchConfig,
    pub advtrain: AdvTrainConfig,
    /// Cost cap attacks are trained against.
    pub advtrain_cap: f64,
    /// Whether adversarial training may shift timestamps.
    pub advtrain_temporal: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            output_dir: PathBuf::from("out"),
            victims: 200,
            generator: GeneratorConfig::default(),
            split: SplitWeeks::default(),
            plan_path: None,
            costs: CostModel::default(),
            learner: GbdtParams::default(),
            estimators: EstimatorConfig::default(),
            search: SearchConfig {
                strategy: SearchStrategy::ScdGreedy,
                temporal: false,
                ..SearchConfig::default()
            },
            advtrain: AdvTrainConfig::default(),
            advtrain_cap: 65.0,
            advtrain_temporal: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses the sectioned key=value format. Unknown sections and keys are
    /// rejected rather than ignored; omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                if !KNOWN_SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("line {lineno}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
            cfg.set(&section, key.trim(), value.trim())
                .map_err(|e| prefix_line(lineno, e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("", _) => {
                return Err(Error::Config(format!("key {key:?} appears before any section")))
            }
            ("experiment", "seed") => self.seed = num(key, value)?,
            ("experiment", "output_dir") => self.output_dir = PathBuf::from(value),
            ("experiment", "victims") => self.victims = num(key, value)?,
            ("generator", "cards") => self.generator.n_cards = num(key, value)?,
            ("generator", "merchants") => self.generator.n_merchants = num(key, value)?,
            ("generator", "weeks") => self.generator.weeks = num(key, value)?,
            ("generator", "legit_rate") => self.generator.legit_rate = num(key, value)?,
            ("generator", "fraud_card_fraction") => {
                self.generator.fraud_card_fraction = num(key, value)?
            }
            ("generator", "fraud_burst_size") => self.generator.fraud_burst_size = num(key, value)?,
            ("generator", "target_fraud_rate") => {
                self.generator.target_fraud_rate = num(key, value)?
            }
            ("split", "train_weeks") => self.split.train = num(key, value)?,
            ("split", "validation_weeks") => self.split.validation = num(key, value)?,
            ("split", "test_weeks") => self.split.test = num(key, value)?,
            ("features", "plan") => {
                self.plan_path =
                    if value == "default" { None } else { Some(PathBuf::from(value)) }
            }
            ("costs", "network") => self.costs.network = num(key, value)?,
            ("costs", "geo") => self.costs.geo = num(key, value)?,
            ("costs", "temporal_max") => self.costs.temporal_max = num(key, value)?,
            ("costs", "amount_max") => self.costs.amount_max = num(key, value)?,
            ("costs", "card_reset") => self.costs.card_reset = num(key, value)?,
            ("costs", "card_switch") => self.costs.card_switch = num(key, value)?,
            ("learner", "rounds") => self.learner.n_rounds = num(key, value)?,
            ("learner", "learning_rate") => self.learner.learning_rate = num(key, value)?,
            ("learner", "max_depth") => self.learner.max_depth = num(key, value)?,
            ("learner", "lambda") => self.learner.lambda = num(key, value)?,
            ("learner", "min_child_weight") => self.learner.min_child_weight = num(key, value)?,
            ("learner", "bins") => self.learner.n_bins = num(key, value)?,
            ("learner", "feature_subsample") => self.learner.feature_subsample = num(key, value)?,
            ("learner", "early_stopping") => self.learner.early_stopping_rounds = num(key, value)?,
            ("learner", "pauc_alpha") => self.learner.pauc_alpha = num(key, value)?,
            ("estimators", "temporal") => self.estimators.temporal_enabled = boolean(key, value)?,
            ("estimators", "volume_threshold") => {
                self.estimators.volume_threshold = num(key, value)?
            }
            ("estimators", "r_min") => self.estimators.r_min = num(key, value)?,
            ("estimators", "q_max") => self.estimators.q_max = num(key, value)?,
            ("estimators", "train_pairs") => self.estimators.train_pairs = num(key, value)?,
            ("estimators", "val_pairs") => self.estimators.val_pairs = num(key, value)?,
            ("estimators", "rounds") => self.estimators.gbdt.n_rounds = num(key, value)?,
            ("search", "strategy") => self.search.strategy = SearchStrategy::parse(value)?,
            ("search", "norm_cap") => self.search.norm_cap = num(key, value)?,
            ("search", "budget") => self.search.budget = num(key, value)?,
            ("search", "random_iters") => self.search.random_iters = num(key, value)?,
            ("search", "bernoulli_p") => self.search.bernoulli_p = num(key, value)?,
            ("search", "grid_points") => self.search.grid_points = num(key, value)?,
            ("search", "temporal") => self.search.temporal = boolean(key, value)?,
            ("advtrain", "fraction") => self.advtrain.adversarial_fraction = num(key, value)?,
            ("advtrain", "schedule") => self.advtrain.schedule = parse_schedule(value)?,
            ("advtrain", "max_rounds") => self.advtrain.max_adv_rounds = num(key, value)?,
            ("advtrain", "stop_epsilon") => self.advtrain.stop_epsilon = num(key, value)?,
            ("advtrain", "stop_patience") => self.advtrain.stop_patience = num(key, value)?,
            ("advtrain", "boost_rounds") => self.advtrain.boost_rounds = num(key, value)?,
            ("advtrain", "augment") => self.advtrain.augment = boolean(key, value)?,
            ("advtrain", "cap") => self.advtrain_cap = num(key, value)?,
            ("advtrain", "temporal") => self.advtrain_temporal = boolean(key, value)?,
            (s, k) => return Err(Error::Config(format!("unknown key {k:?} in section [{s}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.advtrain_cap) {
            return Err(Error::Config(format!(
                "advtrain cap {} outside [0, 100]",
                self.advtrain_cap
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir is empty".into()));
        }
        Ok(())
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

const KNOWN_SECTIONS: [&str; 9] = [
    "experiment",
    "generator",
    "split",
    "features",
    "costs",
    "learner",
    "estimators",
    "search",
    "advtrain",
];

fn prefix_line(lineno: usize, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("line {lineno}: {msg}")),
        other => other,
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn parse_schedule(value: &str) -> Result<Schedule> {
    let norm = value.replace('_', "-");
    if norm == "on-convergence" {
        return Ok(Schedule::OnConvergence);
    }
    if let Some(k) = norm.strip_prefix("periodic:") {
        let k: usize = num("schedule period", k.trim())?;
        if k == 0 {
            return Err(Error::Config("schedule period must be positive".into()));
        }
        return Ok(Schedule::Periodic(k));
    }
    Err(Error::Config(format!(
        "schedule: expected on-convergence or periodic:<rounds>, got {value:?}"
    )))
}

/// Runs one stage and returns its one-line summary.
pub fn run_stage(config: &ExperimentConfig, stage: Stage) -> Result<String> {
    config.validate()?;
    match stage {
        Stage::Generate => run_generate(config),
        Stage::Featurize => run_featurize(config),
        Stage::TrainEstimators => run_train_estimators(config),
        Stage::TrainBaseline => run_train_baseline(config),
        Stage::AttackBench => run_attack_bench(config),
        Stage::AdvTrain => run_adv_train(config),
        Stage::Evaluate => run_evaluate(config),
        Stage::Report => run_report(config),
    }
}

fn require(path: &Path, produced_by: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{} (run {} first)",
            path.display(),
            produced_by.name()
        )))
    }
}

/// Dataset, plan, features, entity index, and split shared by all stages past
/// featurize.
struct World {
    ds: Dataset,
    enriched: EnrichedDataset,
    index: EntityIndex,
    splits: SplitIndices,
}

fn load_world(config: &ExperimentConfig) -> Result<World> {
    let dataset_path = config.artifact(DATASET_FILE);
    let plan_path = config.artifact(PLAN_FILE);
    require(&dataset_path, Stage::Generate)?;
    require(&plan_path, Stage::Featurize)?;
    let ds = Dataset::load_csv(&dataset_path)?;
    let plan = FeaturePlan::load(&plan_path)?;
    let enriched = compute_features(&ds, &plan)?;
    let index = EntityIndex::build(&ds);
    let splits = split(&ds, config.split)?;
    Ok(World { ds, enriched, index, splits })
}

fn run_generate(config: &ExperimentConfig) -> Result<String> {
    let mut gen = config.generator.clone();
    gen.seed = component_seed(config.seed, "synth");
    let ds = generate(&gen)?;
    fs::create_dir_all(&config.output_dir)?;
    let path = config.artifact(DATASET_FILE);
    ds.save_csv(&path)?;
    Ok(format!(
        "wrote {} ({} rows, fraud rate {:.4})",
        path.display(),
        ds.len(),
        ds.fraud_rate()
    ))
}

fn run_featurize(config: &ExperimentConfig) -> Result<String> {
    let dataset_path = config.artifact(DATASET_FILE);
    require(&dataset_path, Stage::Generate)?;
    let ds = Dataset::load_csv(&dataset_path)?;
    let plan = match &config.plan_path {
        Some(p) => {
            require(p, Stage::Featurize)?;
            FeaturePlan::load(p)?
        }
        None => FeaturePlan::default_plan(),
    };
    let enriched = compute_features(&ds, &plan)?;
    let plan_path = config.artifact(PLAN_FILE);
    plan.save(&plan_path)?;
    let enriched_path = config.artifact(ENRICHED_FILE);
    enriched.save_csv(&enriched_path)?;
    Ok(format!(
        "wrote {} and {} ({} features per row)",
        plan_path.display(),
        enriched_path.display(),
        plan.len()
    ))
}

fn run_train_estimators(config: &ExperimentConfig) -> Result<String> {
    let world = load_world(config)?;
    let mut est_config = config.estimators.clone();
    est_config.seed = component_seed(config.seed, "estimators");
    let estimators = assign_estimators(
        &world.ds,
        &world.enriched,
        &world.index,
        world.splits.train.clone(),
        world.splits.validation.clone(),
        &est_config,
    )?;
    let path = config.artifact(ESTIMATORS_FILE);
    estimators.save(&path)?;
    let mut counts = [0usize; 4];
    for p in &estimators.profiles {
        let slot = match p.kind {
            EstimatorKind::Exact => 0,
            EstimatorKind::Lookup => 1,
            EstimatorKind::Regression => 2,
            EstimatorKind::Discarded => 3,
        };
        counts[slot] += 1;
    }
    Ok(format!(
        "wrote {} ({} exact, {} lookup, {} regression, {} discarded)",
        path.display(),
        counts[0],
        counts[1],
        counts[2],
        counts[3]
    ))
}

fn gather_matrix(
    rows: &[EnrichedRow],
    range: Range<usize>,
    columns: &[usize],
) -> (Vec<Vec<f64>>, Vec<u8>) {
    let slice = &rows[range];
    let x = par::map_slice(slice, |row| {
        columns.iter().map(|&c| row.features[c]).collect::<Vec<f64>>()
    });
    let y = slice.iter().map(|row| row.base.label).collect();
    (x, y)
}

fn operating_threshold(model: &GbdtModel, rows: &[EnrichedRow], alpha: f64) -> Result<f64> {
    let scores = par::map_slice(rows, |row| model.score_enriched(row));
    let labels: Vec<u8> = rows.iter().map(|row| row.base.label).collect();
    threshold_at_fpr(&scores, &labels, alpha)
}

fn run_train_baseline(config: &ExperimentConfig) -> Result<String> {
    let world = load_world(config)?;
    let est_path = config.artifact(ESTIMATORS_FILE);
    require(&est_path, Stage::TrainEstimators)?;
    let estimators = Estimators::load(&est_path)?;
    let usable = usable_feature_columns(&world.enriched.plan, &estimators);
    if usable.is_empty() {
        return Err(Error::Model("no usable feature columns after estimator discards".into()));
    }

    let rows = &world.enriched.rows;
    let (x_train, y_train) = gather_matrix(rows, world.splits.train.clone(), &usable);
    let (x_val, y_val) = gather_matrix(rows, world.splits.validation.clone(), &usable);
    let mut params = config.learner.clone();
    params.seed = component_seed(config.seed, "learner");
    let mut model =
        GbdtModel::fit_classifier(&params, &x_train, &y_train, Some((&x_val, &y_val)))?;
    model.columns = Some(usable);

    let val_rows = &rows[world.splits.validation.clone()];
    let threshold = operating_threshold(&model, val_rows, params.pauc_alpha)?;
    model.threshold = Some(threshold);

    let scores = par::map_slice(val_rows, |row| model.score_enriched(row));
    let labels: Vec<u8> = val_rows.iter().map(|row| row.base.label).collect();
    let val_pauc = pauc_at_fpr(&scores, &labels, params.pauc_alpha, PaucNormalization::Ratio)?;

    let path = config.artifact(BASELINE_FILE);
    model.save(&path)?;
    Ok(format!(
        "wrote {} ({} trees, validation pAUC {:.4})",
        path.display(),
        model.n_trees(),
        val_pauc
    ))
}

fn sample_positives(rows: &[EnrichedRow], range: Range<usize>, k: usize, seed: u64) -> Vec<usize> {
    let positives: Vec<usize> = range.filter(|&i| rows[i].base.label == 1).collect();
    if k == 0 || k >= positives.len() {
        return positives;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, positives.len(), k)
        .into_iter()
        .map(|j| positives[j])
        .collect();
    picked.sort_unstable();
    picked
}

fn stored_threshold(model: &GbdtModel, which: &str) -> Result<f64> {
    model.threshold.ok_or_else(|| {
        Error::Model(format!("{which} model carries no operating threshold"))
    })
}

fn run_attack_bench(config: &ExperimentConfig) -> Result<String> {
    let world = load_world(config)?;
    let est_path = config.artifact(ESTIMATORS_FILE);
    let model_path = config.artifact(BASELINE_FILE);
    require(&est_path, Stage::TrainEstimators)?;
    require(&model_path, Stage::TrainBaseline)?;
    let estimators = Estimators::load(&est_path)?;
    let model = GbdtModel::load(&model_path)?;
    let threshold = stored_threshold(&model, "baseline")?;

    let propagator = AttackPropagator::new(&world.ds, &world.enriched, &world.index, &estimators)?;
    let stats = DatasetStats::from_dataset(&world.ds, world.splits.train.clone())?;
    let victims = sample_positives(
        &world.enriched.rows,
        world.splits.test.clone(),
        config.victims,
        component_seed(config.seed, "bench.victims"),
    );
    if victims.is_empty() {
        return Err(Error::Data("no positives in the test split".into()));
    }

    let strategies = [
        SearchStrategy::Random,
        SearchStrategy::ScdGreedy,
        SearchStrategy::ScdCostEfficient,
        SearchStrategy::Greedy,
    ];
    let mut csv = String::from("strategy,norm_cap,victims,successes,success_rate,mean_evals\n");
    for strategy in strategies {
        for cap in BENCH_CAPS {
            let search = SearchConfig {
                strategy,
                norm_cap: cap,
                seed: component_seed(config.seed, "bench.search"),
                ..config.search.clone()
            };
            let searcher =
                Searcher::new(&model, &propagator, &stats, config.costs.clone(), threshold, search)?;
            let results = searcher.attack_rows(&victims)?;
            let successes = results.iter().filter(|r| r.success).count();
            let rate = successes as f64 / results.len() as f64;
            let mean_evals =
                results.iter().map(|r| f64::from(r.evals)).sum::<f64>() / results.len() as f64;
            writeln!(
                csv,
                "{},{},{},{},{:.6},{:.6}",
                strategy.name(),
                cap,
                results.len(),
                successes,
                rate,
                mean_evals
            )
            .expect("string write");
        }
    }
    let path = config.artifact(BENCH_FILE);
    fs::write(&path, csv)?;
    Ok(format!(
        "wrote {} ({} strategies x {} caps, {} victims)",
        path.display(),
        strategies.len(),
        BENCH_CAPS.len(),
        victims.len()
    ))
}

fn run_adv_train(config: &ExperimentConfig) -> Result<String> {
    let world = load_world(config)?;
    let est_path = config.artifact(ESTIMATORS_FILE);
    let model_path = config.artifact(BASELINE_FILE);
    require(&est_path, Stage::TrainEstimators)?;
    require(&model_path, Stage::TrainBaseline)?;
    let estimators = Estimators::load(&est_path)?;
    let baseline = GbdtModel::load(&model_path)?;

    let stats = DatasetStats::from_dataset(&world.ds, world.splits.train.clone())?;
    let mut at = config.advtrain.clone();
    at.seed = component_seed(config.seed, "advtrain");
    at.search = SearchConfig {
        strategy: config.search.strategy,
        norm_cap: config.advtrain_cap,
        temporal: config.advtrain_temporal,
        seed: component_seed(config.seed, "advtrain.search"),
        ..config.search.clone()
    };
    at.pauc_alpha = config.learner.pauc_alpha;
    let inputs = AdvTrainInputs {
        ds: &world.ds,
        enriched: &world.enriched,
        index: &world.index,
        estimators: &estimators,
        stats: &stats,
        costs: config.costs.clone(),
        train: world.splits.train.clone(),
        val: world.splits.validation.clone(),
    };
    let (mut robust, trace) = adversarial_train(&baseline, &inputs, &at)?;

    let val_rows = &world.enriched.rows[world.splits.validation.clone()];
    let threshold = operating_threshold(&robust, val_rows, config.learner.pauc_alpha)?;
    robust.threshold = Some(threshold);
    robust.trained_norm_cap = Some(config.advtrain_cap);

    let model_out = config.artifact(ROBUST_FILE);
    robust.save(&model_out)?;
    let trace_out = config.artifact(TRACE_FILE);
    fs::write(&trace_out, trace.to_csv())?;
    let best = trace.best_round().map_or(0, |r| r + 1);
    Ok(format!(
        "wrote {} and {} ({} rounds, best round {})",
        model_out.display(),
        trace_out.display(),
        trace.rounds.len(),
        best
    ))
}

fn run_evaluate(config: &ExperimentConfig) -> Result<String> {
    let world = load_world(config)?;
    let est_path = config.artifact(ESTIMATORS_FILE);
    let baseline_path = config.artifact(BASELINE_FILE);
    let robust_path = config.artifact(ROBUST_FILE);
    require(&est_path, Stage::TrainEstimators)?;
    require(&baseline_path, Stage::TrainBaseline)?;
    require(&robust_path, Stage::AdvTrain)?;
    let estimators = Estimators::load(&est_path)?;
    let baseline = GbdtModel::load(&baseline_path)?;
    let robust = GbdtModel::load(&robust_path)?;

    let propagator = AttackPropagator::new(&world.ds, &world.enriched, &world.index, &estimators)?;
    let stats = DatasetStats::from_dataset(&world.ds, world.splits.train.clone())?;
    let clean = &world.enriched.rows[world.splits.test.clone()];
    let victims = sample_positives(
        &world.enriched.rows,
        world.splits.test.clone(),
        config.victims,
        component_seed(config.seed, "evaluate.victims"),
    );
    if victims.is_empty() {
        return Err(Error::Data("no positives in the test split".into()));
    }
    let alpha = config.learner.pauc_alpha;

    let mut csv = String::from(
        "model,train_cap,eval_cap,clean_pauc,adv_pauc,success_rate,recall_at_fpr\n",
    );
    for (name, model) in [("baseline", &baseline), ("robust", &robust)] {
        let threshold = stored_threshold(model, name)?;
        let train_cap = model.trained_norm_cap.unwrap_or(0.0);
        for cap in EVAL_CAPS {
            let report = if cap == 0.0 {
                evaluate(model, clean, &[], alpha, cap)?
            } else {
                let search = SearchConfig {
                    norm_cap: cap,
                    seed: component_seed(config.seed, "evaluate.search"),
                    ..config.search.clone()
                };
                let searcher = Searcher::new(
                    model,
                    &propagator,
                    &stats,
                    config.costs.clone(),
                    threshold,
                    search,
                )?;
                let results = searcher.attack_rows(&victims)?;
                let attacked: Vec<EnrichedRow> = victims
                    .iter()
                    .zip(&results)
                    .map(|(&row, r)| propagator.apply(row, &r.attack))
                    .collect::<Result<_>>()?;
                evaluate(model, clean, &attacked, alpha, cap)?
            };
            writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                name,
                train_cap,
                cap,
                report.clean_pauc,
                report.adversarial_pauc,
                report.success_rate,
                report.recall_at_fpr
            )
            .expect("string write");
        }
    }
    let path = config.artifact(EVAL_FILE);
    fs::write(&path, csv)?;
    Ok(format!(
        "wrote {} (2 models x {} caps, {} victims)",
        path.display(),
        EVAL_CAPS.len(),
        victims.len()
    ))
}

fn run_report(config: &ExperimentConfig) -> Result<String> {
    let sections = [
        ("attack bench", BENCH_FILE, Stage::AttackBench),
        ("adversarial training", TRACE_FILE, Stage::AdvTrain),
        ("evaluation", EVAL_FILE, Stage::Evaluate),
    ];
    let mut report = String::new();
    for (title, file, produced_by) in sections {
        let path = config.artifact(file);
        require(&path, produced_by)?;
        let csv = fs::read_to_string(&path)?;
        writeln!(report, "{title}").expect("string write");
        writeln!(report, "{}", "-".repeat(title.len())).expect("string write");
        report.push_str(&render_table(&csv));
        report.push('\n');
    }
    let path = config.artifact(REPORT_FILE);
    fs::write(&path, &report)?;
    Ok(format!("wrote {}", path.display()))
}

/// Renders CSV text as a space-aligned table.
fn render_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> =
        csv.lines().filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    let n_cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; n_cols];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:>width$}", width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_config() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.victims, 200);
        assert_eq!(cfg.advtrain_cap, 65.0);
        assert_eq!(cfg.search.strategy, SearchStrategy::ScdGreedy);
        assert!(!cfg.search.temporal);
        assert!(cfg.advtrain_temporal);
    }

    #[test]
    fn overrides_land_in_the_right_fields() {
        let text = "\
# experiment settings
[experiment]
seed = 99
output_dir = /tmp/run1
victims = 25

[generator]
cards = 123
weeks = 6.5

[split]
train_weeks = 3
validation_weeks = 2
test_weeks = 1

[features]
plan = plans/custom.txt

[costs]
card_switch = 55

[learner]
rounds = 40
pauc_alpha = 0.05

[estimators]
temporal = false
rounds = 33

[search]
strategy = scd_cost_efficient
budget = 700
temporal = true

[advtrain]
schedule = periodic:4
cap = 49
fraction = 0.1
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/run1"));
        assert_eq!(cfg.victims, 25);
        assert_eq!(cfg.generator.n_cards, 123);
        assert_eq!(cfg.generator.weeks, 6.5);
        assert_eq!(cfg.split, SplitWeeks { train: 3, validation: 2, test: 1 });
        assert_eq!(cfg.plan_path.as_deref(), Some(Path::new("plans/custom.txt")));
        assert_eq!(cfg.costs.card_switch, 55.0);
        assert_eq!(cfg.learner.n_rounds, 40);
        assert_eq!(cfg.learner.pauc_alpha, 0.05);
        assert!(!cfg.estimators.temporal_enabled);
        assert_eq!(cfg.estimators.gbdt.n_rounds, 33);
        assert_eq!(cfg.search.strategy, SearchStrategy::ScdCostEfficient);
        assert_eq!(cfg.search.budget, 700);
        assert!(cfg.search.temporal);
        assert_eq!(cfg.advtrain.schedule, Schedule::Periodic(4));
        assert_eq!(cfg.advtrain_cap, 49.0);
        assert_eq!(cfg.advtrain.adversarial_fraction, 0.1);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("[experiment]\nseed = notanumber\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("line 2")), "{err}");

        let err = ExperimentConfig::parse("[mystery]\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("unknown section")), "{err}");

        let err = ExperimentConfig::parse("[experiment]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("unknown key")), "{err}");

        let err = ExperimentConfig::parse("seed = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("before any section")), "{err}");

        let err = ExperimentConfig::parse("[search]\ntemporal = yes\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("true or false")), "{err}");

        let err = ExperimentConfig::parse("[advtrain]\nschedule = hourly\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("schedule")), "{err}");

        let err = ExperimentConfig::parse("[advtrain]\ncap = 120\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("outside")), "{err}");
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::parse(stage.name()).unwrap(), stage);
        }
        assert_eq!(Stage::parse("train_baseline").unwrap(), Stage::TrainBaseline);
        assert!(Stage::parse("deploy").is_err());
    }

    #[test]
    fn schedule_spellings() {
        assert_eq!(parse_schedule("on-convergence").unwrap(), Schedule::OnConvergence);
        assert_eq!(parse_schedule("on_convergence").unwrap(), Schedule::OnConvergence);
        assert_eq!(parse_schedule("periodic:3").unwrap(), Schedule::Periodic(3));
        assert!(parse_schedule("periodic:0").is_err());
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let text = format!(
            "\
[experiment]
seed = 11
output_dir = {}
victims = 6

[generator]
cards = 80
merchants = 12
weeks = 4
legit_rate = 3.0
fraud_card_fraction = 0.3
fraud_burst_size = 5.0
target_fraud_rate = 0.08

[split]
train_weeks = 2
validation_weeks = 1
test_weeks = 1

[learner]
rounds = 20
max_depth = 3
early_stopping = 5

[estimators]
volume_threshold = 3
train_pairs = 80
val_pairs = 30
rounds = 30

[search]
budget = 120
random_iters = 40
grid_points = 5

[advtrain]
schedule = periodic:2
max_rounds = 2
fraction = 0.5
boost_rounds = 10
cap = 30
temporal = false
",
            dir.display()
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn stages_chain_and_rerun_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());

        let err = run_stage(&cfg, Stage::Featurize).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");

        run_stage(&cfg, Stage::Generate).unwrap();
        run_stage(&cfg, Stage::Featurize).unwrap();
        run_stage(&cfg, Stage::TrainEstimators).unwrap();

        let err = run_stage(&cfg, Stage::AttackBench).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");

        run_stage(&cfg, Stage::TrainBaseline).unwrap();
        run_stage(&cfg, Stage::AttackBench).unwrap();
        run_stage(&cfg, Stage::AdvTrain).unwrap();
        run_stage(&cfg, Stage::Evaluate).unwrap();
        run_stage(&cfg, Stage::Report).unwrap();

        let bench = fs::read_to_string(cfg.artifact(BENCH_FILE)).unwrap();
        assert_eq!(bench.lines().count(), 21, "header plus 4 strategies x 5 caps");
        assert!(bench.starts_with("strategy,norm_cap,victims,successes,"));

        let eval = fs::read_to_string(cfg.artifact(EVAL_FILE)).unwrap();
        assert_eq!(eval.lines().count(), 15, "header plus 2 models x 7 caps");
        for line in eval.lines().skip(1).take(7) {
            assert!(line.starts_with("baseline,0,"), "baseline rows carry train cap 0: {line}");
        }
        assert!(eval.lines().nth(8).unwrap().starts_with("robust,30,"));

        let trace = fs::read_to_string(cfg.artifact(TRACE_FILE)).unwrap();
        assert!(trace.starts_with("round,clean_pauc,adversarial_pauc,"));
        assert!(trace.lines().count() >= 2);

        let report = fs::read_to_string(cfg.artifact(REPORT_FILE)).unwrap();
        assert!(report.contains("attack bench"));
        assert!(report.contains("evaluation"));

        let dataset_before = fs::read(cfg.artifact(DATASET_FILE)).unwrap();
        run_stage(&cfg, Stage::Generate).unwrap();
        assert_eq!(fs::read(cfg.artifact(DATASET_FILE)).unwrap(), dataset_before);

        run_stage(&cfg, Stage::AttackBench).unwrap();
        assert_eq!(fs::read_to_string(cfg.artifact(BENCH_FILE)).unwrap(), bench);

        run_stage(&cfg, Stage::Evaluate).unwrap();
        assert_eq!(fs::read_to_string(cfg.artifact(EVAL_FILE)).unwrap(), eval);
    }
}
