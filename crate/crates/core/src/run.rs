//! The batch commands behind the `smat` binary: train, eval, sweep,
//! ablate and generate. Each writes its artifacts into an output
//! directory and embeds the resolved configuration in them.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::{ModelError, SmatModel};
use crate::nn::ParamStore;
use crate::seqio::{read_sequences, write_sequences, PointFormat, SeqIoError};
use crate::synthdata::{generate_dataset, sparsity_sweep, SweepTable, SynthError};
use crate::tracker::{evaluate, track_sequence, EvalSummary, Sequence, TemplateStrategy, TrackError};
use crate::training::{AdamW, MetricRecord, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint was made for config hash {found}, this config hashes to {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Numeric(TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl RunError {
    /// 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::HashMismatch { .. } | Self::Model(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SeqIoError> for RunError {
    fn from(e: SeqIoError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrackError> for RunError {
    fn from(e: TrackError) -> Self {
        match e {
            TrackError::Model(m) => Self::Model(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<SynthError> for RunError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Track(t) => t.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => Self::Model(m),
            TrainError::NoData => Self::Data(e.to_string()),
            other => Self::Numeric(other),
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, RunError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| RunError::Data(format!("{}: {e}", p.display())))?;
            Ok(text.parse()?)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Resolved configuration text.
    pub config: String,
    pub seed: u64,
    pub step: usize,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(|e| RunError::Data(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let f = File::open(path).map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| RunError::Data(format!("{}: {e}", path.display())))
    }

    /// The network this checkpoint holds, checked against `cfg`.
    pub fn model(&self, cfg: &RunConfig) -> Result<SmatModel, RunError> {
        let expected = cfg.model_hash();
        if expected != self.config_hash {
            return Err(RunError::HashMismatch {
                expected,
                found: self.config_hash.clone(),
            });
        }
        let mut model = SmatModel::new(&cfg.model()?, self.seed)?;
        if !model.params.layout_matches(&self.params) {
            return Err(RunError::Data("checkpoint parameters do not fit the configured network".into()));
        }
        model.params = self.params.clone();
        Ok(model)
    }

    /// The configuration stored in the checkpoint.
    pub fn run_config(&self) -> Result<RunConfig, RunError> {
        Ok(self.config.parse()?)
    }
}

fn header(cfg: &RunConfig, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.model_hash(),
        "seed": seed,
        "config": cfg.to_json(),
    })
}

fn read_file(path: &str) -> Result<Vec<Sequence>, RunError> {
    let f = File::open(path).map_err(|e| RunError::Data(format!("{path}: {e}")))?;
    Ok(read_sequences(std::io::BufReader::new(f))?)
}

pub fn training_data(cfg: &RunConfig) -> Result<Vec<Sequence>, RunError> {
    match cfg.path("train.data") {
        Some(p) => read_file(p),
        None => Ok(generate_dataset(&cfg.scenario()?, cfg.parse("train.sequences")?, cfg.parse("train.data_seed")?)?),
    }
}

pub fn eval_data(cfg: &RunConfig) -> Result<Vec<Sequence>, RunError> {
    match cfg.path("eval.data") {
        Some(p) => read_file(p),
        None => Ok(generate_dataset(&cfg.scenario()?, cfg.parse("eval.sequences")?, cfg.parse("eval.data_seed")?)?),
    }
}

/// Trains a fresh model in memory for `train.steps` steps.
pub fn train_model(
    cfg: &RunConfig,
    seed: u64,
    data: &[Sequence],
    on_record: impl FnMut(&MetricRecord),
) -> Result<Trainer, RunError> {
    let model = SmatModel::new(&cfg.model()?, seed)?;
    let mut trainer = Trainer::new(model, cfg.train(seed)?);
    trainer.run(data, cfg.parse("train.steps")?, on_record)?;
    Ok(trainer)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Writes `metrics.ndjson` (a header line with the resolved config, then
/// one record per step), `config.txt` and `checkpoint.json` into `out`.
/// With `resume` the optimizer state and step counter continue and the
/// new records are appended.
pub fn cmd_train(cfg: &RunConfig, seed: u64, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome, RunError> {
    fs::create_dir_all(out)?;
    let data = training_data(cfg)?;
    let metrics = out.join("metrics.ndjson");
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let model = ck.model(cfg)?;
            Trainer::with_optimizer(model, cfg.train(ck.seed)?, ck.optimizer)
        }
        None => Trainer::new(SmatModel::new(&cfg.model()?, seed)?, cfg.train(seed)?),
    };
    let seed = trainer.cfg.seed;
    let mut w = if resume.is_some() && metrics.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics)?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics)?);
        writeln!(w, "{}", header(cfg, seed))?;
        w
    };
    fs::write(out.join("config.txt"), format!("# config hash {}\n# seed {seed}\n{cfg}", cfg.model_hash()))?;
    let steps: usize = cfg.parse("train.steps")?;
    let mut io_err = None;
    let result = trainer.run(&data, steps, |r| {
        if let Err(e) = serde_json::to_writer(&mut w, r).map_err(std::io::Error::from).and_then(|_| writeln!(w)) {
            io_err.get_or_insert(e);
        }
    });
    w.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let records = result?;
    let checkpoint = out.join("checkpoint.json");
    Checkpoint {
        config_hash: cfg.model_hash(),
        config: cfg.to_string(),
        seed,
        step: trainer.opt.step,
        params: trainer.model.params.clone(),
        optimizer: trainer.opt.clone(),
    }
    .save(&checkpoint)?;
    Ok(TrainOutcome {
        records,
        checkpoint,
        metrics,
    })
}

/// Tracks the evaluation set; writes `results.ndjson` (header line, then
/// one record per frame) and `summary.txt`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, strategy: Option<TemplateStrategy>, out: &Path) -> Result<EvalSummary, RunError> {
    fs::create_dir_all(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model(cfg)?;
    let mut opts = cfg.track()?;
    if let Some(s) = strategy {
        opts.strategy = s;
    }
    let data = eval_data(cfg)?;
    let summary = evaluate(&data, &model, &opts)?;
    let mut w = BufWriter::new(File::create(out.join("results.ndjson"))?);
    let mut h = header(cfg, ck.seed);
    h["strategy"] = opts.strategy.to_string().into();
    writeln!(w, "{h}")?;
    summary.write_records(&mut w)?;
    w.flush()?;
    fs::write(
        out.join("summary.txt"),
        format!("{}\n# strategy {}\n# config hash {}\n{}", summary.table(), opts.strategy, cfg.model_hash(), commented(cfg)),
    )?;
    Ok(summary)
}

fn commented(cfg: &RunConfig) -> String {
    cfg.to_string().lines().map(|l| format!("# {l}\n")).collect()
}

/// Sparsity sweep with a trained model; writes `sweep.tsv` and `sweep.svg`.
pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<SweepTable, RunError> {
    fs::create_dir_all(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model(cfg)?;
    let opts = cfg.track()?;
    let counts: Vec<usize> = cfg.list("sweep.counts")?;
    let mut base = cfg.scenario()?;
    base.seed = cfg.parse("eval.data_seed")?;
    let table = sparsity_sweep(|s| track_sequence(s, &model, &opts), &base, &counts, cfg.parse("sweep.per_bucket")?)?;
    write_sweep(cfg, &table, out)?;
    Ok(table)
}

pub fn write_sweep(cfg: &RunConfig, table: &SweepTable, out: &Path) -> Result<(), RunError> {
    let mut tsv = format!("# config hash {}\n{}points\tsequences\tsuccess\tprecision\n", cfg.model_hash(), commented(cfg));
    for r in &table.rows {
        tsv += &format!("{}\t{}\t{:.4}\t{:.4}\n", r.points, r.sequences, r.success, r.precision);
    }
    if let Some(rho) = table.spearman() {
        tsv += &format!("# spearman {rho:.4}\n");
    }
    fs::write(out.join("sweep.tsv"), tsv)?;
    fs::write(out.join("sweep.svg"), sweep_svg(table, &cfg.to_string()))?;
    Ok(())
}

/// Success and Precision against point count on a log2 axis.
pub fn sweep_svg(table: &SweepTable, desc: &str) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = table.rows.iter().map(|r| (r.points.max(1) as f64).log2()).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| m + (x - x0) / span * (w - 2.0 * m);
    let py = |v: f64| h - m - v / 100.0 * (h - 2.0 * m);
    let esc = desc.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n<desc>{esc}</desc>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    s += &format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - m,
        r = w - m
    );
    for v in [0.0, 25.0, 50.0, 75.0, 100.0] {
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v}</text>\n", m - 4.0, py(v) + 4.0);
    }
    for (r, &x) in table.rows.iter().zip(&xs) {
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", px(x), h - m + 16.0, r.points);
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">target points in the first frame</text>\n", w / 2.0, h - 8.0);
    for (name, color, get) in [
        ("Success", "#1f77b4", (|r: &crate::synthdata::SweepRow| r.success) as fn(&_) -> f64),
        ("Precision", "#d62728", |r| r.precision),
    ] {
        let pts: Vec<String> = table.rows.iter().zip(&xs).map(|(r, &x)| format!("{:.1},{:.1}", px(x), py(get(r)))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" "));
        let y = if name == "Success" { m - 20.0 } else { m - 6.0 };
        s += &format!("<text x=\"{}\" y=\"{y}\" fill=\"{color}\">{name}</text>\n", w - m - 60.0);
    }
    s + "</svg>\n"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub success: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn variants(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant.as_str()) {
                v.push(&r.variant);
            }
        }
        v
    }

    /// Median `(success, precision)` over the seeds of one variant.
    pub fn median(&self, variant: &str) -> Option<(f64, f64)> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
        (!rows.is_empty()).then(|| (median(rows.iter().map(|r| r.success).collect()), median(rows.iter().map(|r| r.precision).collect())))
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<36} {:>8} {:>9}\n", "variant", "success", "precision");
        for v in self.variants() {
            let (su, pr) = self.median(v).expect("variant has rows");
            s += &format!("{v:<36} {su:>8.2} {pr:>9.2}\n");
        }
        s
    }
}

/// Trains and evaluates every variant of `ablate.variants` for
/// `ablate.seeds` seeds (`seed`, `seed + 1`, ...) under the same budget;
/// writes `ablation.tsv`.
pub fn cmd_ablate(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<AblationTable, RunError> {
    let variants = cfg.variants()?;
    if variants.is_empty() {
        return Err(ConfigError::EmptyMatrix.into());
    }
    let seeds: u64 = cfg.parse("ablate.seeds")?;
    let data = training_data(cfg)?;
    let eval = eval_data(cfg)?;
    let mut rows = Vec::new();
    for v in &variants {
        let name = v.iter().map(|(k, x)| format!("{k}={x}")).collect::<Vec<_>>().join(" ");
        let vc = cfg.with(v)?;
        for s in seed..seed + seeds.max(1) {
            let trainer = train_model(&vc, s, &data, |_| {})?;
            let summary = evaluate(&eval, &trainer.model, &vc.track()?)?;
            rows.push(AblationRow {
                variant: name.clone(),
                seed: s,
                success: summary.mean_success,
                precision: summary.mean_precision,
            });
        }
    }
    let table = AblationTable { rows };
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let mut tsv = format!("# config hash {}\n{}variant\tseed\tsuccess\tprecision\n", cfg.model_hash(), commented(cfg));
        for r in &table.rows {
            tsv += &format!("{}\t{}\t{:.4}\t{:.4}\n", r.variant, r.seed, r.success, r.precision);
        }
        fs::write(out.join("ablation.tsv"), tsv)?;
        fs::write(out.join("ablation.txt"), table.table())?;
    }
    Ok(table)
}

/// Writes the configured synthetic training set as a sequence file.
pub fn cmd_generate(cfg: &RunConfig, path: &Path, format: PointFormat) -> Result<usize, RunError> {
    let data = generate_dataset(&cfg.scenario()?, cfg.parse("train.sequences")?, cfg.parse("train.data_seed")?)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_sequences(&mut w, &data, format)?;
    w.flush()?;
    Ok(data.len())
}
