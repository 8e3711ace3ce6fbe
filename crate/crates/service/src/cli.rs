//! `twm` subcommands. Each writes its report to the given writer so the
//! binary and the tests share one implementation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use twm_core::actor::ActorConfig;
use twm_core::metrics::{c_index, km_curve, log_rank, median_split, KmCurve, LogRankResult, SurvivalGroup};
use twm_core::planner::{rollout, PlanConfig, PlanResult, RolloutPoint, Schedule};
use twm_core::policy::{format_feedback, ConstraintSet};
use twm_core::synthcohort::{
    export_cohort, generate_cohort, import_cohort, validate_cohort_file, Cohort, CohortSummary, PatientRecord,
    SyntheticDynamics,
};
use twm_core::training::{evaluate, split_patients, train, Checkpoint, EpochRecord, EvalSummary, TrainConfig};

use crate::state::read_file;
use crate::{load_constraints, reference_plan, ServiceConfig, ServiceError, ServiceState};

#[derive(Debug, Parser)]
#[command(name = "twm", version, about = "Treatment-conditioned latent world model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort file.
    Synth(SynthArgs),
    /// Check a cohort file and print its summary.
    Validate(ValidateArgs),
    /// Train a model and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Report C-index, Brier, latent L1, KM strata and log-rank on the validation split.
    Eval(EvalArgs),
    /// Search for the lowest-risk action from a patient's last visit.
    Plan(PlanArgs),
    /// Project a treatment schedule from a patient's last visit.
    Rollout(RolloutArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Standard deviation of the per-visit latent noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub latent_tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub token_width: usize,
    /// Seed of the noise stream; defaults to `--seed`.
    #[arg(long)]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// JSON file `{"actor": {...}, "train": {...}}`; omitted fields keep
    /// their defaults and the latent shape follows the cohort.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history file; defaults to the checkpoint path with extension
    /// `history.json`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate every patient instead of the recorded validation split.
    #[arg(long)]
    pub all: bool,
    /// Write the two KM curves as CSV.
    #[arg(long)]
    pub km_out: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PatientArgs {
    /// A patient record (one cohort line) as JSON, or a cohort file with `--id`.
    #[arg(long)]
    pub patient: PathBuf,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub patient: PatientArgs,
    /// Planning horizon in days.
    #[arg(long, default_value_t = 180.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// JSON constraint table; the built-in default when omitted.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub patient: PatientArgs,
    /// JSON array of `{"day": ..., "action": {...}}` on the patient's clock.
    #[arg(long)]
    pub schedule: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service configuration.
    #[arg(long)]
    pub config: PathBuf,
}

/// Runs one subcommand, writing human-readable or JSON output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), ServiceError> {
    match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Validate(a) => validate(&a, out),
        Command::Train(a) => train_command(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Plan(a) => plan(&a, out),
        Command::Rollout(a) => rollout_command(&a, out),
        Command::Serve(a) => serve(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_cohort_file(path: &Path) -> Result<Cohort, ServiceError> {
    import_cohort(path).map_err(|source| ServiceError::CohortFile {
        path: path.to_path_buf(),
        source,
    })
}

fn checkpoint_file(path: &Path) -> Result<(Vec<u8>, Checkpoint), ServiceError> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| ServiceError::Input(format!("{}: {e}", path.display())))?;
    let checkpoint = Checkpoint::from_json(text).map_err(|source| ServiceError::CheckpointFile {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((bytes, checkpoint))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), ServiceError> {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn json_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), ServiceError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(out, &text)
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let dynamics = SyntheticDynamics::reference(a.latent_tokens, a.token_width, a.noise, a.noise_seed.unwrap_or(a.seed));
    let cohort = generate_cohort(a.n, &dynamics, a.seed)?;
    export_cohort(&cohort, &a.out)?;
    let summary = validate_cohort_file(&a.out)?;
    emit(out, &format!("wrote {}\n{}", a.out.display(), summary_text(&summary)))
}

fn summary_text(s: &CohortSummary) -> String {
    format!(
        "patients {}\nvisits {}\npairs {}\nevents {}\nlatent {}x{}\n",
        s.patients, s.visits, s.pairs, s.events, s.latent_tokens, s.token_width
    )
}

fn validate(a: &ValidateArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let summary = validate_cohort_file(&a.cohort).map_err(|source| ServiceError::CohortFile {
        path: a.cohort.clone(),
        source,
    })?;
    emit(out, &summary_text(&summary))
}

/// Overlays `patch` onto `base`, object by object.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub actor: ActorConfig,
    pub train: TrainConfig,
}

/// Defaults with the cohort's latent shape, overlaid with the optional file.
pub fn train_settings(config: Option<&Path>, latent_tokens: usize, token_width: usize) -> Result<TrainSettings, ServiceError> {
    let defaults = TrainSettings {
        actor: ActorConfig {
            latent_tokens,
            width: token_width,
            ..ActorConfig::default()
        },
        train: TrainConfig::default(),
    };
    let mut value = serde_json::to_value(&defaults)?;
    if let Some(path) = config {
        let bytes = read_file(path)?;
        let patch: Value = serde_json::from_slice(&bytes).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(ServiceError::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| ServiceError::Config(format!("training settings: {e}")))
}

fn train_command(a: &TrainArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let cohort = read_cohort_file(&a.cohort)?;
    let settings = train_settings(a.config.as_deref(), cohort.latent_tokens, cohort.token_width)?;
    let outcome = train(&cohort, settings.actor, &settings.train)?;
    outcome.checkpoint(&settings.train).save(&a.out)?;
    let history_path = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.json"));
    let history = serde_json::to_string_pretty(&outcome.history)?;
    std::fs::write(&history_path, history + "\n").map_err(io_err(&history_path))?;
    let mut text = format!("wrote {}\nwrote {}\n", a.out.display(), history_path.display());
    if let Some(last) = outcome.history.last() {
        text.push_str(&epoch_line(last));
    }
    emit(out, &text)
}

fn epoch_line(e: &EpochRecord) -> String {
    let mut s = format!(
        "epoch {} total {:.6} latent {:.6} contrastive {:.6} brier {:.6} cox {:.6}",
        e.epoch, e.train_total, e.train.latent, e.train.contrastive, e.train.brier, e.train.cox
    );
    if let Some(v) = e.validation {
        s.push_str(&format!(" | validation latent {:.6}", v.latent_l1));
        if let Some(c) = v.c_index {
            s.push_str(&format!(" c-index {c:.6}"));
        }
    }
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataReport {
    /// Pairs with risk above the median.
    pub high: usize,
    pub low: usize,
    pub log_rank: Option<LogRankResult>,
    pub km_high: KmCurve,
    pub km_low: KmCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `validation` or `all`.
    pub split: String,
    pub patients: usize,
    pub checkpoint_hash: String,
    #[serde(flatten)]
    pub summary: EvalSummary,
    /// Risk strata from a median split; absent when a stratum is empty.
    pub strata: Option<StrataReport>,
}

/// Evaluates a checkpoint on the validation split recorded in its metadata,
/// or on every patient.
pub fn eval_report(cohort_path: &Path, checkpoint_path: &Path, all: bool) -> Result<EvalReport, ServiceError> {
    let cohort = read_cohort_file(cohort_path)?;
    let (bytes, checkpoint) = checkpoint_file(checkpoint_path)?;
    let model = checkpoint.to_model()?;
    let (split, patients) = match (&checkpoint.metadata.train_config, all) {
        (Some(cfg), false) => {
            let s = split_patients(&cohort, cfg.train_fraction, cfg.seed)?;
            ("validation", s.validation)
        }
        _ => ("all", (0..cohort.patients.len()).collect()),
    };
    let pairs = cohort.pairs_of(&patients);
    if pairs.is_empty() {
        return Err(ServiceError::Input("no visit pairs to evaluate".into()));
    }
    let ev = evaluate(&model, &pairs)?;
    let high = median_split(&ev.risks);
    let group = |want: bool, label: &str| {
        let idx: Vec<usize> = (0..high.len()).filter(|&i| high[i] == want).collect();
        SurvivalGroup {
            label: label.into(),
            times: idx.iter().map(|&i| ev.times[i]).collect(),
            events: idx.iter().map(|&i| ev.events[i]).collect(),
        }
    };
    let (hi, lo) = (group(true, "high"), group(false, "low"));
    let strata = if hi.times.is_empty() || lo.times.is_empty() {
        None
    } else {
        Some(StrataReport {
            high: hi.times.len(),
            low: lo.times.len(),
            km_high: km_curve(&hi.times, &hi.events)?,
            km_low: km_curve(&lo.times, &lo.events)?,
            log_rank: log_rank(&[hi, lo]).ok(),
        })
    };
    debug_assert_eq!(ev.summary.c_index, c_index(&ev.risks, &ev.times, &ev.events).ok());
    Ok(EvalReport {
        split: split.into(),
        patients: patients.len(),
        checkpoint_hash: crate::content_hash(&bytes),
        summary: ev.summary,
        strata,
    })
}

fn km_csv(strata: &StrataReport) -> String {
    let mut s = String::from("stratum,time,survival,lower,upper,at_risk,events\n");
    for (label, curve) in [("high", &strata.km_high), ("low", &strata.km_low)] {
        for line in curve.to_csv().lines().skip(1) {
            s.push_str(label);
            s.push(',');
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let report = eval_report(&a.cohort, &a.checkpoint, a.all)?;
    if let (Some(path), Some(strata)) = (&a.km_out, &report.strata) {
        std::fs::write(path, km_csv(strata)).map_err(io_err(path))?;
    }
    if a.json {
        return json_line(out, &report);
    }
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    let s = &report.summary;
    let mut text = format!(
        "split        {}\npatients     {}\npairs        {}\nlatent L1    {:.6}\nbrier        {}\nc-index      {}\n",
        report.split,
        report.patients,
        s.pairs,
        s.latent_l1,
        opt(s.brier),
        opt(s.c_index)
    );
    match &report.strata {
        Some(st) => {
            text.push_str(&format!("strata       high {} / low {}\n", st.high, st.low));
            match &st.log_rank {
                Some(lr) => text.push_str(&format!(
                    "log-rank     chi2 {:.6} df {} p {:.6}\n",
                    lr.statistic, lr.degrees_of_freedom, lr.p_value
                )),
                None => text.push_str("log-rank     n/a\n"),
            }
        }
        None => text.push_str("strata       n/a\n"),
    }
    emit(out, &text)
}

/// Reads a patient record, or the record `id` of a cohort file.
pub fn load_patient(path: &Path, id: Option<&str>) -> Result<PatientRecord, ServiceError> {
    match id {
        Some(id) => {
            let cohort = read_cohort_file(path)?;
            cohort
                .patients
                .into_iter()
                .find(|p| p.id == id)
                .ok_or_else(|| ServiceError::Input(format!("no patient {id:?} in {}", path.display())))
        }
        None => {
            let bytes = read_file(path)?;
            let record: PatientRecord =
                serde_json::from_slice(&bytes).map_err(|e| ServiceError::Input(format!("{}: {e}", path.display())))?;
            let (l, w) = record
                .visits
                .first()
                .map(|v| {
                    let s = v.latent.tokens().shape();
                    (s[0], s[1])
                })
                .ok_or_else(|| ServiceError::Input("patient has no visits".into()))?;
            record.validate(l, w)?;
            Ok(record)
        }
    }
}

fn load_model(path: &Path) -> Result<twm_core::actor::WorldModel, ServiceError> {
    Ok(checkpoint_file(path)?.1.to_model()?)
}

/// Plans from the patient's last visit with the reference agent.
pub fn plan_patient(a: &PlanArgs) -> Result<(PlanConfig, PlanResult), ServiceError> {
    let record = load_patient(&a.patient.patient, a.patient.id.as_deref())?;
    let model = load_model(&a.patient.checkpoint)?;
    let constraints = match &a.constraints {
        Some(p) => load_constraints(p)?,
        None => ConstraintSet::default(),
    };
    let last = record.visits.len() - 1;
    let config = PlanConfig {
        k: a.k,
        m: a.m,
        seed: a.seed,
        epsilon: a.epsilon,
        ..PlanConfig::default()
    };
    let result = reference_plan(
        &model,
        &record.visits[last].latent,
        &record.profile_at(last),
        a.dt,
        &constraints,
        &config,
    )?;
    Ok((config, result))
}

fn plan(a: &PlanArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let (config, result) = plan_patient(a)?;
    if a.json {
        return json_line(out, &result);
    }
    let text = format!(
        "a*           {}\nbest risk    {:.6}\np(1y)        {:.6}\niterations   {} (K={}, M={})\ncandidates   {}\n\n{}",
        result.a_star, result.best_risk, result.best_p_1y, result.iterations, config.k, config.m, result.candidates,
        format_feedback(&result.feedback)
    );
    emit(out, &text)
}

/// Rolls the schedule out from the patient's last visit.
pub fn rollout_patient(a: &RolloutArgs) -> Result<Vec<RolloutPoint>, ServiceError> {
    let record = load_patient(&a.patient.patient, a.patient.id.as_deref())?;
    let model = load_model(&a.patient.checkpoint)?;
    let bytes = read_file(&a.schedule)?;
    let schedule: Schedule =
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Input(format!("{}: {e}", a.schedule.display())))?;
    let last = record.visits.len() - 1;
    let z0 = record.visits[last].latent.clone().with_timestamp(Some(record.visits[last].day));
    Ok(rollout(&z0, &record.profile_at(last), &schedule, &model)?)
}

fn rollout_command(a: &RolloutArgs, out: &mut dyn Write) -> Result<(), ServiceError> {
    let trajectory = rollout_patient(a)?;
    if a.json {
        return json_line(out, &trajectory);
    }
    let mut text = format!("{:>4}  {:>10}  {:>8}  {:>10}  action\n", "step", "day", "p(1y)", "risk");
    for (i, p) in trajectory.iter().enumerate() {
        text.push_str(&format!("{:>4}  {:>10.1}  {:>8.4}  {:>10.4}  {}\n", i + 1, p.day, p.p_1y, p.r, p.action));
    }
    emit(out, &text)
}

fn serve(a: &ServeArgs) -> Result<(), ServiceError> {
    let config = ServiceConfig::load(&a.config)?;
    crate::init_tracing(&config.log_level);
    let state = Arc::new(ServiceState::load(&config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Server(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.bind)
            .await
            .map_err(|e| ServiceError::Server(format!("bind {}: {e}", config.bind)))?;
        crate::serve(listener, state).await
    })
}
