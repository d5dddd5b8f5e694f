//! Experiment configuration, framework dispatch, sweeps and CSV metrics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_idx, partition_clients, split_loaded, synth_domains, DomainSplit, SynthSpec};
use crate::error::{config, Error, Result};
use crate::hyper::HyperParams;
use crate::mfp::FusionSchedule;
use crate::nn::{init_network, LayerSpec, Network};
use crate::seed::{derive_seed, tag};
use crate::server::{
    assign_ratios, run_training, ClientProfile, Federation, LevelTable, LocalUpdate, RoundConfig,
};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DAPPERFL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Dapperfl,
    Fedavg,
    Feddrop,
    DapperflNoMfp,
    DapperflNoDar,
    DapperflNoMfpDar,
}

impl Framework {
    pub const ALL: [Framework; 6] = [
        Framework::Dapperfl,
        Framework::Fedavg,
        Framework::Feddrop,
        Framework::DapperflNoMfp,
        Framework::DapperflNoDar,
        Framework::DapperflNoMfpDar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Dapperfl => "dapperfl",
            Framework::Fedavg => "fedavg",
            Framework::Feddrop => "feddrop",
            Framework::DapperflNoMfp => "dapperfl_no_mfp",
            Framework::DapperflNoDar => "dapperfl_no_dar",
            Framework::DapperflNoMfpDar => "dapperfl_no_mfp_dar",
        }
    }

    fn local_update(self) -> LocalUpdate {
        match self {
            Framework::Dapperfl | Framework::DapperflNoDar => LocalUpdate::FusionPruning,
            Framework::DapperflNoMfp | Framework::DapperflNoMfpDar => LocalUpdate::UnfusedPruning,
            Framework::Fedavg => LocalUpdate::Dense,
            Framework::Feddrop => LocalUpdate::RandomDrop,
        }
    }

    fn uses_dar(self) -> bool {
        matches!(self, Framework::Dapperfl | Framework::DapperflNoMfp)
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Framework::ALL
            .into_iter()
            .find(|fw| fw.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown framework `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        OptimizerConfig {
            lr: hp.lr,
            momentum: hp.momentum,
            weight_decay: hp.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha0: f64,
    pub alpha_min: f64,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let s = FusionSchedule::default();
        FusionConfig {
            alpha0: s.alpha0,
            alpha_min: s.alpha_min,
            epsilon: s.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of leading convolution layers (IDX image data only).
    pub conv: Vec<usize>,
    pub kernel: usize,
    /// Widths of dense hidden layers before the predictor.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv: Vec::new(),
            kernel: 3,
            hidden: vec![64],
        }
    }
}

impl ModelConfig {
    /// Layer chain for inputs with `in_channels` features (or image
    /// channels, when convolutions are present) and `classes` outputs.
    pub fn layer_specs(&self, in_channels: usize, classes: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = in_channels;
        for &c in &self.conv {
            specs.push(LayerSpec::conv(width, c, self.kernel));
            width = c;
        }
        for &h in &self.hidden {
            specs.push(LayerSpec::dense(width, h));
            width = h;
        }
        specs.push(LayerSpec::predictor(width, classes));
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub domains: usize,
    pub classes: usize,
    pub dims: usize,
    pub samples_per_domain: usize,
    pub shift_strength: f64,
    pub class_sep: f64,
    pub base_noise: f64,
    pub standardize: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: 4,
            classes: 4,
            dims: 16,
            samples_per_domain: 600,
            shift_strength: 1.0,
            class_sep: 1.0,
            base_noise: 1.0,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDomain {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Idx(Vec<IdxDomain>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Fraction of a domain's train pool given to each client.
    pub proportion: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Synthetic(SyntheticConfig::default()),
            proportion: 0.2,
            test_fraction: 0.2,
        }
    }
}

/// Full experiment description. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub framework: Framework,
    pub rounds: usize,
    pub clients: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub fusion: FusionConfig,
    pub gamma: f64,
    pub level_rho: LevelTable,
    /// Overrides the level table with one ratio shared by every client.
    pub uniform_rho: Option<f64>,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Write measured wall time; when false the column is 0 so output is
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        ExperimentConfig {
            framework: Framework::Dapperfl,
            rounds: hp.rounds,
            clients: 10,
            participation: 1.0,
            local_epochs: hp.local_epochs,
            batch_size: hp.batch_size,
            optimizer: OptimizerConfig::default(),
            fusion: FusionConfig::default(),
            gamma: hp.gamma,
            level_rho: LevelTable::default(),
            uniform_rho: None,
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            seeds: vec![1],
            output: None,
            record_wall_time: false,
        }
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        config(format!("{key}: {msg}"))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.clients >= 1, "clients", "must be at least 1")?;
        check(
            self.participation == 1.0,
            "participation",
            "only full participation (1.0) is supported",
        )?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        let o = &self.optimizer;
        check(o.lr.is_finite() && o.lr >= 0.0, "optimizer.lr", "must be finite and nonnegative")?;
        check((0.0..1.0).contains(&o.momentum), "optimizer.momentum", "must lie in [0, 1)")?;
        check(
            o.weight_decay.is_finite() && o.weight_decay >= 0.0,
            "optimizer.weight_decay",
            "must be nonnegative",
        )?;
        let f = &self.fusion;
        check(f.alpha0 > 0.0 && f.alpha0 <= 1.0, "fusion.alpha0", "must lie in (0, 1]")?;
        check(
            f.alpha_min > 0.0 && f.alpha_min <= f.alpha0,
            "fusion.alpha_min",
            "must lie in (0, alpha0]",
        )?;
        check((0.0..1.0).contains(&f.epsilon), "fusion.epsilon", "must lie in [0, 1)")?;
        check(self.gamma.is_finite() && self.gamma >= 0.0, "gamma", "must be nonnegative")?;
        self.level_rho
            .validate()
            .map_err(|e| Error::Config(format!("level_rho: {e}")))?;
        if let Some(r) = self.uniform_rho {
            check((0.0..1.0).contains(&r), "uniform_rho", "must lie in [0, 1)")?;
        }
        check(
            self.model.kernel % 2 == 1,
            "model.kernel",
            "must be odd",
        )?;
        check(
            self.model.conv.iter().chain(&self.model.hidden).all(|&c| c > 0),
            "model",
            "layer widths must be positive",
        )?;
        let d = &self.dataset;
        check(
            d.proportion > 0.0 && d.proportion <= 1.0,
            "dataset.proportion",
            "must lie in (0, 1]",
        )?;
        check(
            d.test_fraction > 0.0 && d.test_fraction < 1.0,
            "dataset.test_fraction",
            "must lie in (0, 1)",
        )?;
        match &d.source {
            DataSource::Synthetic(s) => {
                check(s.domains >= 2, "dataset.source.synthetic.domains", "must be at least 2")?;
                check(s.classes >= 2, "dataset.source.synthetic.classes", "must be at least 2")?;
                check(s.dims >= 1, "dataset.source.synthetic.dims", "must be at least 1")?;
                check(
                    s.shift_strength.is_finite() && s.shift_strength >= 0.0,
                    "dataset.source.synthetic.shift_strength",
                    "must be nonnegative",
                )?;
                check(
                    self.model.conv.is_empty(),
                    "model.conv",
                    "convolutions need image data",
                )?;
            }
            DataSource::Idx(domains) => {
                check(!domains.is_empty(), "dataset.source.idx", "needs at least one domain")?;
            }
        }
        check(!self.seeds.is_empty(), "seeds", "must list at least one seed")?;
        Ok(())
    }

    /// Training hyperparameters for this config's framework.
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            local_epochs: self.local_epochs,
            rounds: self.rounds,
            batch_size: self.batch_size,
            gamma: if self.framework.uses_dar() { self.gamma } else { 0.0 },
            fusion: FusionSchedule {
                alpha0: self.fusion.alpha0,
                alpha_min: self.fusion.alpha_min,
                epsilon: self.fusion.epsilon,
            },
        }
    }

    /// Level table after framework rules and the uniform override.
    pub fn effective_levels(&self) -> LevelTable {
        match self.framework {
            Framework::Fedavg => LevelTable::uniform(0.0),
            Framework::Feddrop => {
                LevelTable::uniform(self.uniform_rho.unwrap_or_else(|| self.level_rho.max_rho()))
            }
            _ => match self.uniform_rho {
                Some(r) => LevelTable::uniform(r),
                None => self.level_rho.clone(),
            },
        }
    }

    /// Capability level of client `id`: clients cycle through levels 1..=5.
    pub fn client_level(id: usize) -> usize {
        id % LevelTable::LEVELS + 1
    }
}

/// Reads a JSON config. Unknown keys are rejected; missing keys take defaults.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Data, clients and initial model for one seed.
pub fn prepare_run(cfg: &ExperimentConfig, seed: u64) -> Result<(Federation, Network)> {
    let ds = &cfg.dataset;
    let domains: Vec<DomainSplit> = match &ds.source {
        DataSource::Synthetic(s) => {
            let mut spec = SynthSpec::shifted(
                s.domains,
                s.classes,
                s.dims,
                s.samples_per_domain,
                s.shift_strength,
                derive_seed(seed, &[tag::DATA, 0]),
            );
            spec.class_sep = s.class_sep;
            spec.base_noise = s.base_noise;
            spec.standardize = s.standardize;
            spec.test_fraction = ds.test_fraction;
            synth_domains(&spec, seed)?
        }
        DataSource::Idx(paths) => {
            let mut loaded = paths
                .iter()
                .map(|p| load_idx(&p.images, &p.labels))
                .collect::<Result<Vec<_>>>()?;
            if cfg.model.conv.is_empty() {
                loaded = loaded.iter().map(|d| d.flattened()).collect();
            }
            split_loaded(loaded, ds.test_fraction, seed)?
        }
    };
    let first = &domains[0].train;
    let shape = first.features.shape().to_vec();
    let classes = first.num_classes;
    let specs = cfg.model.layer_specs(shape[1], classes);
    let mut initial = init_network(&specs, derive_seed(seed, &[tag::INIT]))?;
    if shape.len() == 4 {
        initial = initial.with_input_hw(shape[2], shape[3]);
    }

    let pools: Vec<_> = domains.iter().map(|d| d.train.clone()).collect();
    let parts = partition_clients(&pools, cfg.clients, ds.proportion, seed)?;
    let mut clients: Vec<ClientProfile> = parts
        .into_iter()
        .enumerate()
        .map(|(id, data)| {
            ClientProfile::new(
                id,
                ExperimentConfig::client_level(id),
                data,
                derive_seed(seed, &[tag::CLIENT, id as u64]),
            )
        })
        .collect();
    assign_ratios(&mut clients, &cfg.effective_levels())?;
    let test_sets = domains.into_iter().map(|d| d.test).collect();
    Ok((Federation { clients, test_sets }, initial))
}

/// One CSV row: a single round of a single seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub framework: Framework,
    pub seed: u64,
    pub round: usize,
    pub alpha: f64,
    pub domain_accuracy: Vec<f64>,
    pub global_accuracy: f64,
    pub params: Vec<u64>,
    pub flops: Vec<u64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub model: Network,
    pub federation: Federation,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub runs: Vec<SeedRun>,
}

impl ExperimentOutput {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.runs.iter().flat_map(|r| r.rows.iter().cloned()).collect()
    }
}

/// Worker pool sized by `DAPPERFL_THREADS` (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`")))?;
        if n == 0 {
            return config(format!("{THREADS_ENV}: must be positive"));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (fed, initial) = prepare_run(cfg, seed)?;
    let round_cfg = RoundConfig {
        hyper: cfg.hyper_params(),
        update: cfg.framework.local_update(),
        parallel: true,
    };
    let outcome = run_training(&initial, &fed, &round_cfg)?;
    let mut elapsed = 0u128;
    let rows = outcome
        .records
        .iter()
        .map(|r| {
            elapsed += r.wall_ms;
            MetricsRow {
                framework: cfg.framework,
                seed,
                round: r.round,
                alpha: r.alpha,
                domain_accuracy: r.domain_accuracy.clone(),
                global_accuracy: r.global_accuracy,
                params: r.footprints.iter().map(|f| f.param_count).collect(),
                flops: r.footprints.iter().map(|f| f.flops).collect(),
                wall_ms: if cfg.record_wall_time { elapsed } else { 0 },
            }
        })
        .collect();
    Ok(SeedRun {
        seed,
        rows,
        model: outcome.model,
        federation: fed,
    })
}

/// Runs every seed of `cfg` and writes the CSV when `cfg.output` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let runs = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(cfg, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let out = ExperimentOutput { runs };
    if let Some(path) = &cfg.output {
        write_metrics_csv(path, &out.rows())?;
    }
    Ok(out)
}

/// Header for `domains` domains and `clients` clients.
pub fn csv_header(domains: usize, clients: usize) -> Vec<String> {
    let mut h: Vec<String> = ["framework", "seed", "round", "alpha"].map(String::from).to_vec();
    h.extend((0..domains).map(|d| format!("acc_domain_{d}")));
    h.push("acc_global".into());
    h.extend((0..clients).map(|c| format!("params_client_{c}")));
    h.extend((0..clients).map(|c| format!("flops_client_{c}")));
    h.push("wall_ms".into());
    h
}

impl MetricsRow {
    pub fn to_record(&self) -> Vec<String> {
        let mut r = vec![
            self.framework.to_string(),
            self.seed.to_string(),
            self.round.to_string(),
            self.alpha.to_string(),
        ];
        r.extend(self.domain_accuracy.iter().map(f64::to_string));
        r.push(self.global_accuracy.to_string());
        r.extend(self.params.iter().map(u64::to_string));
        r.extend(self.flops.iter().map(u64::to_string));
        r.push(self.wall_ms.to_string());
        r
    }
}

fn write_records<W: Write>(
    out: W,
    prefix_header: &[&str],
    rows: &[(Vec<String>, &MetricsRow)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (domains, clients) = rows
        .first()
        .map_or((0, 0), |(_, r)| (r.domain_accuracy.len(), r.params.len()));
    let mut header: Vec<String> = prefix_header.iter().map(|s| s.to_string()).collect();
    header.extend(csv_header(domains, clients));
    w.write_record(&header)?;
    for (prefix, row) in rows {
        let mut rec = prefix.clone();
        rec.extend(row.to_record());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes rows, sorted by (framework, seed, round), to CSV text.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.framework, r.seed, r.round));
    let tagged: Vec<_> = sorted.into_iter().map(|r| (Vec::new(), r)).collect();
    let mut buf = Vec::new();
    write_records(&mut buf, &[], &tagged)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)?)?;
    Ok(())
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha0,
    AlphaMin,
    Epsilon,
    Gamma,
    /// One pruning ratio shared by every client.
    Rho,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha0 => "alpha0",
            SweepParam::AlphaMin => "alpha_min",
            SweepParam::Epsilon => "epsilon",
            SweepParam::Gamma => "gamma",
            SweepParam::Rho => "rho",
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::Alpha0 => c.fusion.alpha0 = value,
            SweepParam::AlphaMin => c.fusion.alpha_min = value,
            SweepParam::Epsilon => c.fusion.epsilon = value,
            SweepParam::Gamma => c.gamma = value,
            SweepParam::Rho => c.uniform_rho = Some(value),
        }
        c.output = None;
        c
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepParam::Alpha0,
            SweepParam::AlphaMin,
            SweepParam::Epsilon,
            SweepParam::Gamma,
            SweepParam::Rho,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep parameter `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub param: SweepParam,
    pub points: Vec<(f64, ExperimentOutput)>,
}

/// One experiment per value with `param` overridden. Writes the combined
/// CSV (prefixed with `sweep_param,sweep_value`) to `cfg.output` if set.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<SweepOutput> {
    if values.is_empty() {
        return config("sweep needs at least one value");
    }
    let points = values
        .iter()
        .map(|&v| {
            let c = param.apply(cfg, v);
            c.validate()
                .map_err(|e| Error::Config(format!("sweep value {v}: {e}")))?;
            Ok((v, run_experiment(&c)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = SweepOutput { param, points };
    if let Some(path) = &cfg.output {
        fs::write(path, sweep_csv(&out)?)?;
    }
    Ok(out)
}

pub fn sweep_csv(out: &SweepOutput) -> Result<String> {
    let mut rows = Vec::new();
    let owned: Vec<(f64, Vec<MetricsRow>)> = out
        .points
        .iter()
        .map(|(v, o)| {
            let mut r = o.rows();
            r.sort_by_key(|r| (r.framework, r.seed, r.round));
            (*v, r)
        })
        .collect();
    for (v, rs) in &owned {
        for r in rs {
            rows.push((vec![out.param.name().to_string(), v.to_string()], r));
        }
    }
    let mut buf = Vec::new();
    write_records(&mut buf, &["sweep_param", "sweep_value"], &rows)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.clients, 10);
        assert_eq!(cfg.local_epochs, 5);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.weight_decay, 1e-5);
        assert_eq!(cfg.fusion.alpha0, 0.9);
        assert_eq!(cfg.fusion.alpha_min, 0.1);
        assert_eq!(cfg.fusion.epsilon, 0.2);
        assert_eq!(cfg.gamma, 0.01);
        assert_eq!(cfg.participation, 1.0);
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let err = parse_config_str(r#"{"gamma": -1}"#).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str(r#"{"gama": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let err = parse_config_str(r#"{"fusion": {"alpha": 0.5}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fusion") && msg.contains("alpha"), "{msg}");
    }

    #[test]
    fn framework_names_round_trip() {
        for fw in Framework::ALL {
            assert_eq!(fw.name().parse::<Framework>().unwrap(), fw);
        }
        assert!("fedprox".parse::<Framework>().is_err());
    }

    #[test]
    fn header_layout() {
        let h = csv_header(2, 2).join(",");
        assert_eq!(
            h,
            "framework,seed,round,alpha,acc_domain_0,acc_domain_1,acc_global,\
             params_client_0,params_client_1,flops_client_0,flops_client_1,wall_ms"
        );
    }
}
