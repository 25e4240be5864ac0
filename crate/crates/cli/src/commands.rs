use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use multiangle::backend::{DecodeMode, DecodeOptions};
use multiangle::codec::{encode_output, parse_output};
use multiangle::harness::{
    aggregate_categories, eval_all_angles, explanation_feedback, rank_candidates, rank_dataset, risk_coverage,
    AngleReport, MetricConfig, Query, ScoreSheet,
};
use multiangle::ingest::{attach_context, attach_explanations, load_central_sentences, load_dataset, DatasetFormat, SentenceCorpus};
use multiangle::metrics::MetricKind;
use multiangle::par::Execution;
use multiangle::sampler::{enumerate_all_angles, interleave_round_robin, sample_training_pairs, write_pairs, SamplerConfig};
use multiangle::slots::{parse_angle_list, Angle, AnglePreset, Dataset, Instance, SlotRegistry};
use multiangle::Error;
use multiangle_service::AppState;

use crate::config::Settings;
use crate::{repl, Command, Failure};

pub fn run(command: Command, settings: &Settings) -> Result<(), Failure> {
    match command {
        Command::Encode(a) => encode(a, settings),
        Command::Parse(a) => parse(a, settings),
        Command::Sample(a) => sample(a, settings),
        Command::Eval(a) => eval(a, settings),
        Command::Rank(a) => rank(a, settings),
        Command::Feedback(a) => feedback(a, settings),
        Command::Report(a) => report(a),
        Command::Repl(a) => repl::run(a, settings),
        Command::Serve(a) => serve(a, settings),
    }
}

/// `key=value`, where key is a slot name or letter.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Source slot value, e.g. question="Which surface ...?" (repeatable)
    #[arg(long = "slots", alias = "slot", value_parser = parse_assignment)]
    pub slots: Vec<(String, String)>,
    /// Target slots, comma separated (names or letters)
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<String>,
    /// Expected target value; when given, the output line is printed too
    #[arg(long = "gold", value_parser = parse_assignment)]
    pub golds: Vec<(String, String)>,
}

fn encode(args: EncodeArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = &settings.registry;
    let query = Query::new(reg, args.slots.iter().map(|(k, v)| (k, v)), &args.targets)?;
    println!("{}", query.input(reg, settings.policy())?);
    if !args.golds.is_empty() {
        let mut values: Vec<(String, String)> =
            query.instance.values().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (k, v) in &args.golds {
            values.push((reg.resolve(k)?.name.clone(), v.clone()));
        }
        let full = Instance::new(reg, query.instance.id.clone(), values)?;
        println!("{}", encode_output(reg, &full, &query.angle, settings.policy())?);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Slots expected in the output, comma separated
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
    /// Raw model output; read from standard input when absent
    #[arg(long)]
    pub text: Option<String>,
}

fn parse(args: ParseArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = &settings.registry;
    let text = match args.text {
        Some(t) => t,
        None => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf.trim_end_matches(['\n', '\r']).to_string()
        }
    };
    let targets = args
        .targets
        .iter()
        .map(|t| reg.resolve(t).map(|d| d.name.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let parsed = parse_output(reg, &text, &targets);
    let out = serde_json::json!({"values": parsed.values, "missing": parsed.missing});
    println!("{out}");
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct AngleArgs {
    /// Angles such as "QM->AE,Q->A:2" (optional `:weight`)
    #[arg(long, conflicts_with = "preset")]
    pub angles: Option<String>,
    /// Named angle set: uqa-extractive, uqa-arc, uqa-race, arc, arc-da
    #[arg(long)]
    pub preset: Option<String>,
}

impl AngleArgs {
    fn resolve(&self, reg: &SlotRegistry) -> Result<Option<Vec<Angle>>, Failure> {
        if let Some(list) = &self.angles {
            return Ok(Some(parse_angle_list(reg, list)?));
        }
        if let Some(name) = &self.preset {
            let preset = AnglePreset::from_name(name).ok_or_else(|| {
                let known: Vec<&str> = AnglePreset::ALL.iter().map(|p| p.name()).collect();
                Failure::Input(format!("unknown preset `{name}` (known: {})", known.join(", ")))
            })?;
            return Ok(Some(preset.angles(reg)?));
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset file (line-delimited JSON)
    #[arg(long)]
    pub dataset: PathBuf,
    /// mc, da, challenge or instances [default: detected]
    #[arg(long)]
    pub format: Option<String>,
    /// Sentence corpus; adds a retrieved context slot
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sentences per retrieved context
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// CENTRAL sentences per question id; adds an explanation slot
    #[arg(long)]
    pub central: Option<PathBuf>,
}

fn parse_format(name: Option<&str>) -> Result<Option<DatasetFormat>, Failure> {
    name.map(|n| DatasetFormat::from_name(n).ok_or_else(|| Failure::Input(format!("unknown format `{n}`"))))
        .transpose()
}

fn prepare(
    path: &Path,
    format: Option<&str>,
    corpus: Option<&Path>,
    k: usize,
    central: Option<&Path>,
    settings: &Settings,
) -> Result<Dataset, Failure> {
    let reg = &settings.registry;
    let mut ds = load_dataset(reg, path, parse_format(format)?)?;
    if let Some(c) = corpus {
        ds = attach_context(reg, &ds, &SentenceCorpus::load(c)?, k, Execution::Parallel)?;
    }
    if let Some(c) = central {
        ds = attach_explanations(reg, &ds, &load_central_sentences(c)?, settings.seed)?;
    }
    Ok(ds)
}

impl DataArgs {
    fn load(&self, settings: &Settings) -> Result<Dataset, Failure> {
        prepare(
            &self.dataset,
            self.format.as_deref(),
            self.corpus.as_deref(),
            self.k,
            self.central.as_deref(),
            settings,
        )
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Greedy,
    Beam,
    Nucleus,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1)]
    pub beam_size: u32,
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 128)]
    pub max_tokens: u32,
    /// Sampling seed for nucleus decoding
    #[arg(long)]
    pub decode_seed: Option<u64>,
}

impl DecodeArgs {
    pub fn options(&self) -> Result<DecodeOptions, Failure> {
        let opts = DecodeOptions {
            mode: match self.mode {
                Mode::Greedy => DecodeMode::Greedy,
                Mode::Beam => DecodeMode::Beam,
                Mode::Nucleus => DecodeMode::Nucleus,
            },
            beam_size: self.beam_size,
            top_p: self.top_p,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.decode_seed,
        };
        opts.validate()?;
        Ok(opts)
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Dataset file; repeat to interleave several datasets equally
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub central: Option<PathBuf>,
    #[command(flatten)]
    pub angles: AngleArgs,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub max_resample_attempts: usize,
    /// Emit every applicable (instance, angle) pair instead of sampling
    #[arg(long)]
    pub all_angles: bool,
    /// Output file [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

fn sample(args: SampleArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = &settings.registry;
    let angles = args
        .angles
        .resolve(reg)?
        .ok_or_else(|| Failure::Input("sample needs --angles or --preset".into()))?;
    let config = SamplerConfig {
        epochs: args.epochs,
        seed: settings.seed,
        max_resample_attempts: args.max_resample_attempts,
        policy: settings.policy(),
    };
    let mut streams = Vec::new();
    for path in &args.datasets {
        let ds = prepare(
            path,
            args.format.as_deref(),
            args.corpus.as_deref(),
            args.k,
            args.central.as_deref(),
            settings,
        )?
        .with_angles(angles.clone());
        if args.all_angles {
            let e = enumerate_all_angles(reg, &ds, settings.policy())?;
            eprintln!("{}: {} pairs, {} inapplicable combinations", ds.name, e.pairs.len(), e.skipped);
            streams.push(e.pairs);
        } else {
            let run = sample_training_pairs(reg, &ds, &config, execution(args.sequential))?;
            eprintln!(
                "{}: {} pairs, {} instances skipped, {} redrawn",
                ds.name,
                run.pairs.len(),
                run.skipped_instances,
                run.resampled
            );
            streams.push(run.pairs);
        }
    }
    let pairs = if streams.len() == 1 {
        streams.pop().unwrap_or_default()
    } else {
        interleave_round_robin(streams)
    };
    match &args.out {
        Some(path) => write_pairs(reg, &pairs, create(path)?)?,
        None => write_pairs(reg, &pairs, std::io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub angles: AngleArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Metric for a target slot, e.g. answer=token_f1 (repeatable)
    #[arg(long = "metric", value_parser = parse_assignment)]
    pub metrics: Vec<(String, String)>,
    /// Text report file [default: standard output]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Line-delimited report records
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

fn write_report(report: &AngleReport, reg: &SlotRegistry, args: &EvalArgs, note: Option<&str>) -> Result<(), Failure> {
    let mut text = String::new();
    if let Some(n) = note {
        text.push_str(n);
        text.push('\n');
    }
    text.push_str(&report.render_table(reg));
    match &args.report {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => print!("{text}"),
    }
    if let Some(path) = &args.records {
        report.write_records(create(path)?)?;
    }
    Ok(())
}

fn eval(args: EvalArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = &settings.registry;
    let loaded = settings.load_backend()?;
    let angles = match args.angles.resolve(reg)? {
        Some(a) => a,
        None if !loaded.trained_angles.is_empty() => loaded.trained_angles.clone(),
        None => return Err(Failure::Input("eval needs --angles or --preset".into())),
    };
    let ds = args.data.load(settings)?.with_angles(angles);
    let mut metrics = MetricConfig::default();
    for (slot, kind) in &args.metrics {
        let kind = MetricKind::from_name(kind).ok_or_else(|| Failure::Input(format!("unknown metric `{kind}`")))?;
        metrics = metrics.with(&reg.resolve(slot)?.name, kind);
    }
    let opts = args.decode.options()?;
    match eval_all_angles(
        reg,
        &ds,
        loaded.backend.as_ref(),
        settings.policy(),
        &metrics,
        &opts,
        execution(args.sequential),
    ) {
        Ok(report) => write_report(&report, reg, &args, None),
        Err(Error::EvalInterrupted { partial, source }) => {
            write_report(&partial, reg, &args, Some(&format!("# partial: {source}")))?;
            Err(Failure::from(*source))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Slot value for a single query (repeatable)
    #[arg(long = "slots", alias = "slot", value_parser = parse_assignment, conflicts_with = "dataset")]
    pub slots: Vec<(String, String)>,
    /// Candidate answer (repeatable)
    #[arg(long = "candidate")]
    pub candidates: Vec<String>,
    /// Rank the options of every multiple-choice instance in a dataset
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Include the options slot in the model input
    #[arg(long)]
    pub include_m: bool,
    /// Risk-coverage curve output (dataset mode)
    #[arg(long, requires = "dataset")]
    pub curve: Option<PathBuf>,
}

fn rank(args: RankArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = &settings.registry;
    let loaded = settings.load_backend()?;
    let Some(path) = &args.dataset else {
        let mut values = Vec::new();
        for (k, v) in &args.slots {
            values.push((reg.resolve(k)?.name.clone(), v.clone()));
        }
        let inst = Instance::new(reg, "query", values)?;
        let ranking = rank_candidates(
            reg,
            &inst,
            &args.candidates,
            loaded.backend.as_ref(),
            args.include_m,
            settings.policy(),
        )?;
        for c in ranking {
            println!("{}\t{}\t{}", c.candidate, c.probability, c.logprob_sum);
        }
        return Ok(());
    };
    let ds = prepare(path, args.format.as_deref(), args.corpus.as_deref(), args.k, None, settings)?;
    let ranked = rank_dataset(
        reg,
        &ds,
        loaded.backend.as_ref(),
        args.include_m,
        settings.policy(),
        Execution::Parallel,
    )?;
    let mut graded = Vec::new();
    for r in &ranked {
        let top = &r.ranking[0];
        let mark = match r.correct {
            Some(true) => "correct",
            Some(false) => "wrong",
            None => "ungraded",
        };
        println!("{}\t{}\t{}\t{mark}", r.id, top.candidate, top.probability);
        if let Some(c) = r.correct {
            graded.push((top.probability, c));
        }
    }
    let right = graded.iter().filter(|(_, c)| *c).count();
    eprintln!("accuracy {right}/{}", graded.len());
    if let Some(curve) = &args.curve {
        let mut w = create(curve)?;
        writeln!(w, "coverage\taccuracy")?;
        for (cov, acc) in risk_coverage(&graded) {
            writeln!(w, "{cov}\t{acc}")?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct FeedbackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

fn feedback(args: FeedbackArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = &settings.registry;
    let loaded = settings.load_backend()?;
    let ds = args.data.load(settings)?;
    let opts = args.decode.options()?;
    let (mut same, mut flagged) = (0, 0);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for inst in &ds.instances {
        let o = explanation_feedback(reg, inst, loaded.backend.as_ref(), settings.policy(), &opts)?;
        same += usize::from(o.fed_back_answer.is_some() && o.direct_answer == o.fed_back_answer);
        flagged += usize::from(o.flag.is_some());
        serde_json::to_writer(&mut out, &o)?;
        writeln!(out)?;
    }
    eprintln!("unchanged answers {same}/{}, flagged {flagged}", ds.instances.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Score sheet: line-delimited {"id","model","score","incoherent","category"}
    #[arg(long)]
    pub sheet: PathBuf,
    /// Leave out categories with fewer questions
    #[arg(long, default_value_t = 5)]
    pub min_questions: usize,
    /// Print the report as JSON
    #[arg(long)]
    pub json: bool,
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let sheet = ScoreSheet::load(&args.sheet)?;
    if sheet.is_empty() {
        return Err(Failure::Input(format!("{}: empty score sheet", args.sheet.display())));
    }
    let report = aggregate_categories(&sheet, args.min_questions);
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Angles advertised by /api/meta
    #[command(flatten)]
    pub angles: AngleArgs,
}

fn serve(args: ServeArgs, settings: &Settings) -> Result<(), Failure> {
    let reg = settings.registry.clone();
    let loaded = settings.load_backend()?;
    let angles = args.angles.resolve(&reg)?.unwrap_or(loaded.trained_angles);
    let state = AppState::new(reg, loaded.backend)
        .with_angles(angles)
        .with_policy(settings.policy());
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving on http://{}", args.bind);
    runtime.block_on(multiangle_service::serve(args.bind, state))?;
    Ok(())
}
