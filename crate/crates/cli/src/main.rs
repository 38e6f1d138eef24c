mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use passe_core::audio::{read_wav, synth_corpus_with, write_wav, SynthOptions, WavFormat};
use passe_core::metrics::{
    default_sweep_grid, evaluate_set, parse_db, sweep_enroll_snr, write_aggregate_csv, write_sweep_csv,
    write_sweep_svg, EnrollmentChoice, Enhancer, EvalOptions, Identity, MetricReport, Oracle, PesqHook,
};
use passe_core::mixsim::{build_eval_set, load_eval_set, Corpus, EvalSetOptions};
use passe_core::model::{count_params, load_checkpoint};
use passe_core::train::{self, CheckpointEnhancer, ModelSize};
use passe_core::{Arch, FtjnfConfig, Sensor};
use serde_json::json;

use config::{split_overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "passe", version, about = "Own-voice speech enhancement with an in-ear microphone")]
#[command(after_help = "Any config key can be overridden with a dotted flag, e.g. --train.epochs 5.")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic two-sensor corpus.
    SynthCorpus(SynthArgs),
    /// Materialize an evaluation set from a corpus.
    Mix(MixArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Enhance one recording with a checkpoint.
    Enhance(EnhanceArgs),
    /// Score systems on an evaluation set.
    Evaluate(EvaluateArgs),
    /// Print the parameter count of an architecture.
    ParamCount(ParamCountArgs),
    /// SI-SDR on interferer-only items versus enrollment SNR.
    SweepEnrollSnr(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
}

#[derive(Args, Debug)]
struct MixArgs {
    /// Corpus manifest.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Outer-microphone recording.
    #[arg(long)]
    outer: PathBuf,
    /// In-ear recording, for two-channel models.
    #[arg(long)]
    inear: Option<PathBuf>,
    /// Enrollment utterance, for personalized models.
    #[arg(long)]
    enroll: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SystemArgs {
    /// Checkpoint as `name=path` or `path`; repeatable.
    #[arg(long = "ckpt")]
    ckpts: Vec<String>,
    /// Enrollment sensor for personalized checkpoints instead of the trained one.
    #[arg(long)]
    enroll_sensor: Option<Sensor>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    eval_set: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    systems: SystemArgs,
    /// Include the unprocessed outer mixture.
    #[arg(long)]
    identity: bool,
    /// Include the clean outer target.
    #[arg(long)]
    oracle: bool,
    /// Enrollment SNR in dB (`inf` is clean, `-inf` is noise only).
    #[arg(long, default_value = "inf", value_parser = parse_db, allow_hyphen_values = true)]
    enroll_snr: f64,
    /// Enroll with the interferer's utterance instead of the target's.
    #[arg(long)]
    interferer_enrollment: bool,
    /// External PESQ scorer, run as `<exe> <reference.wav> <degraded.wav>`.
    #[arg(long)]
    pesq: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParamCountArgs {
    #[arg(long)]
    arch: Arch,
    #[arg(long, default_value = "full", value_parser = parse_size)]
    size: ModelSize,
    /// List every tensor.
    #[arg(long)]
    breakdown: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    eval_set: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Personalized checkpoints, `name=path` or `path`; repeatable.
    #[arg(long = "ckpt")]
    ckpts: Vec<String>,
    /// Non-personalized checkpoints drawn as flat reference lines.
    #[arg(long = "reference")]
    references: Vec<String>,
    /// Comma-separated enrollment SNRs in dB.
    #[arg(long, value_delimiter = ',', value_parser = parse_db, allow_hyphen_values = true)]
    snrs: Vec<f64>,
    /// Enrollment sensors to sweep; defaults to each checkpoint's own.
    #[arg(long, value_delimiter = ',')]
    sensors: Vec<Sensor>,
}

fn parse_size(s: &str) -> Result<ModelSize, String> {
    match s {
        "full" => Ok(ModelSize::Full),
        "tiny" => Ok(ModelSize::Tiny),
        _ => Err(format!("unknown size `{s}` (expected full or tiny)")),
    }
}

/// Bad invocation or configuration; exits with 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<Usage>().is_some() {
        return (1, "usage");
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<passe_core::Error>() {
            use passe_core::mixsim::MixError;
            use passe_core::model::ModelError;
            use passe_core::train::TrainError;
            return match e {
                e if e.is_numeric() => (3, "numeric"),
                passe_core::Error::Train(TrainError::Config(_))
                | passe_core::Error::Mix(MixError::Config(_))
                | passe_core::Error::Model(ModelError::Config(_)) => (1, "usage"),
                _ => (2, "data"),
            };
        }
    }
    (2, "data")
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(args: Vec<String>) -> anyhow::Result<()> {
    let (rest, mut overrides) = split_overrides(args.clone()).map_err(|e| usage(e.to_string()))?;
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return Err(usage(line.trim_start_matches("error: ").to_string()));
        }
    };
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let mut path_flag = |key: &str, v: &Option<PathBuf>| {
        if let Some(p) = v {
            overrides.push((format!("paths.{key}"), toml_string(&p.to_string_lossy())));
        }
    };
    match &cli.cmd {
        Cmd::SynthCorpus(a) => {
            path_flag("out", &a.out);
            if let Some(n) = a.speakers {
                overrides.push(("synth.speakers".into(), n.to_string()));
            }
            if let Some(n) = a.utterances {
                overrides.push(("synth.utterances".into(), n.to_string()));
            }
        }
        Cmd::Mix(a) => {
            path_flag("corpus", &a.corpus);
            path_flag("out", &a.out);
        }
        Cmd::Train(a) => {
            path_flag("corpus", &a.corpus);
            path_flag("out", &a.out);
        }
        Cmd::Evaluate(a) => {
            path_flag("eval_set", &a.eval_set);
            path_flag("out", &a.out);
        }
        Cmd::SweepEnrollSnr(a) => {
            path_flag("eval_set", &a.eval_set);
            path_flag("out", &a.out);
        }
        Cmd::Enhance(_) | Cmd::ParamCount(_) => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides).map_err(|e| usage(format!("{e:#}")))?;
    let ctx = Ctx { cfg, argv: args };
    match cli.cmd {
        Cmd::SynthCorpus(_) => ctx.synth_corpus(),
        Cmd::Mix(_) => ctx.mix(),
        Cmd::Train(_) => ctx.train(),
        Cmd::Enhance(a) => ctx.enhance(a),
        Cmd::Evaluate(a) => ctx.evaluate(a),
        Cmd::ParamCount(a) => param_count(a),
        Cmd::SweepEnrollSnr(a) => ctx.sweep(a),
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

struct Ctx {
    cfg: RunConfig,
    argv: Vec<String>,
}

impl Ctx {
    fn required(&self, v: &Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
        v.clone().ok_or_else(|| usage(format!("missing --{flag} (or paths.{})", flag.replace('-', "_"))))
    }

    fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let out = self.required(&self.cfg.paths.out, "out")?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    /// Writes the resolved config and a provenance record into `dir`.
    fn provenance(&self, dir: &Path, command: &str, prefix: &str) -> anyhow::Result<()> {
        let record = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "argv": &self.argv[1..],
            "seed": self.cfg.seed,
            "config": &self.cfg,
        });
        let p = dir.join(format!("{prefix}provenance.json"));
        fs::write(&p, serde_json::to_string_pretty(&record)? + "\n").with_context(|| format!("writing {}", p.display()))?;
        let c = dir.join(format!("{prefix}config.toml"));
        fs::write(&c, self.cfg.to_toml()).with_context(|| format!("writing {}", c.display()))?;
        Ok(())
    }

    fn synth_corpus(&self) -> anyhow::Result<()> {
        let out = self.out_dir()?;
        let s = &self.cfg.synth;
        let opts = SynthOptions {
            utt_duration_s: s.utt_duration_s,
            noise_duration_s: s.noise_duration_s,
            n_directions: s.directions,
            ir_len: s.ir_len,
        };
        let manifest = synth_corpus_with(s.speakers, s.utterances, self.cfg.seed, &out, &opts)
            .map_err(passe_core::Error::from)?;
        self.provenance(&out, "synth-corpus", "")?;
        println!("{}", manifest.display());
        Ok(())
    }

    fn corpus(&self) -> anyhow::Result<Corpus> {
        let manifest = self.required(&self.cfg.paths.corpus, "corpus")?;
        Ok(Corpus::load(&manifest).map_err(passe_core::Error::from)?)
    }

    fn mix(&self) -> anyhow::Result<()> {
        let corpus = self.corpus()?;
        let out = self.out_dir()?;
        let e = &self.cfg.eval;
        let opts = EvalSetOptions {
            conditions: e.conditions.clone(),
            repeats: e.repeats,
            snr_range_db: e.snr_range_db,
            sir_range_db: e.sir_range_db,
            seed: self.cfg.seed,
            split: e.split,
        };
        let items = build_eval_set(&corpus, &out, &opts).map_err(passe_core::Error::from)?;
        self.provenance(&out, "mix", "")?;
        println!("{}", items.display());
        Ok(())
    }

    fn train(&self) -> anyhow::Result<()> {
        let corpus = self.corpus()?;
        let out = self.out_dir()?;
        self.provenance(&out, "train", "")?;
        let outcome = train::train(&self.cfg.train, &self.cfg.mix, &corpus, &out)?;
        let best = &outcome.epochs[outcome.best_epoch];
        println!(
            "best epoch {} (val loss {}), checkpoint {}",
            best.epoch,
            best.val_loss,
            out.join("model.ckpt").display()
        );
        Ok(())
    }

    fn enhance(&self, a: EnhanceArgs) -> anyhow::Result<()> {
        let ckpt = load_checkpoint(&a.ckpt).map_err(passe_core::Error::from)?;
        let read = |p: &Path| read_wav(p).map_err(passe_core::Error::from);
        let y_o = read(&a.outer)?;
        let y_i = a.inear.as_deref().map(read).transpose()?;
        let enroll = a.enroll.as_deref().map(read).transpose()?;
        let mut out = train::enhance(&ckpt, &y_o, y_i.as_ref(), enroll.as_ref())?;
        out.samples.resize(y_o.len(), 0.0);
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_wav(&out, &a.out, WavFormat::Float32).map_err(passe_core::Error::from)?;
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        self.provenance(dir, "enhance", &format!("{stem}."))?;
        Ok(())
    }

    fn evaluate(&self, a: EvaluateArgs) -> anyhow::Result<()> {
        let items_path = self.required(&self.cfg.paths.eval_set, "eval-set")?;
        let items = load_eval_set(&items_path).map_err(passe_core::Error::from)?;
        let out = self.out_dir()?;
        let mut systems: Vec<Box<dyn Enhancer>> = Vec::new();
        if a.identity {
            systems.push(Box::new(Identity));
        }
        if a.oracle {
            systems.push(Box::new(Oracle));
        }
        for spec in &a.systems.ckpts {
            let mut e = load_system(spec)?;
            if e.enroll_sensor.is_some() {
                e.enroll_sensor = a.systems.enroll_sensor.or(e.enroll_sensor);
            }
            systems.push(Box::new(e));
        }
        if systems.is_empty() {
            return Err(usage("nothing to evaluate: pass --identity, --oracle or --ckpt"));
        }
        let opts = EvalOptions {
            conditions: self.cfg.eval.conditions.clone(),
            enrollment: if a.interferer_enrollment {
                EnrollmentChoice::Interferer
            } else {
                EnrollmentChoice::Target { snr_db: a.enroll_snr }
            },
            pesq: a.pesq.map(|exe| PesqHook {
                exe,
                work_dir: out.join("pesq"),
            }),
        };
        let mut reports: Vec<MetricReport> = Vec::new();
        for sys in &systems {
            let rep = evaluate_set(sys.as_ref(), &items, &opts)?;
            let p = out.join(format!("{}.csv", sys.name()));
            rep.write_csv(&p).map_err(passe_core::Error::from)?;
            reports.push(rep);
        }
        let agg = out.join("aggregate.csv");
        write_aggregate_csv(&reports, &agg).map_err(passe_core::Error::from)?;
        self.provenance(&out, "evaluate", "")?;
        print!("{}", passe_core::metrics::aggregate_csv(&reports));
        Ok(())
    }

    fn sweep(&self, a: SweepArgs) -> anyhow::Result<()> {
        let items_path = self.required(&self.cfg.paths.eval_set, "eval-set")?;
        let items = load_eval_set(&items_path).map_err(passe_core::Error::from)?;
        let out = self.out_dir()?;
        if a.ckpts.is_empty() {
            return Err(usage("sweep-enroll-snr needs at least one --ckpt"));
        }
        let snrs = if a.snrs.is_empty() { default_sweep_grid() } else { a.snrs };
        let mut systems: Vec<CheckpointEnhancer> = Vec::new();
        for spec in &a.ckpts {
            let base = load_system(spec)?;
            if base.enroll_sensor.is_none() || a.sensors.is_empty() {
                if base.enroll_sensor.is_none() {
                    eprintln!("warning: {} is not personalized; skipping", base.name);
                }
                systems.push(base);
                continue;
            }
            for &s in &a.sensors {
                let mut e = load_system(spec)?;
                e.enroll_sensor = Some(s);
                systems.push(e);
            }
        }
        let refs: Vec<CheckpointEnhancer> = a.references.iter().map(|s| load_system(s)).collect::<anyhow::Result<_>>()?;
        let sys_dyn: Vec<&dyn Enhancer> = systems.iter().map(|s| s as &dyn Enhancer).collect();
        let ref_dyn: Vec<&dyn Enhancer> = refs.iter().map(|s| s as &dyn Enhancer).collect();
        let rows = sweep_enroll_snr(&sys_dyn, &ref_dyn, &items, &snrs)?;
        write_sweep_csv(&rows, out.join("sweep.csv")).map_err(passe_core::Error::from)?;
        write_sweep_svg(&rows, out.join("sweep.svg")).map_err(passe_core::Error::from)?;
        self.provenance(&out, "sweep-enroll-snr", "")?;
        print!("{}", passe_core::metrics::sweep_csv(&rows));
        Ok(())
    }
}

/// `name=path` or a bare path, named after its parent directory when the
/// file is called `model.ckpt`.
fn load_system(spec: &str) -> anyhow::Result<CheckpointEnhancer> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = if stem == "model" {
                p.parent()
                    .and_then(|d| d.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or(stem)
            } else {
                stem
            };
            (name, p)
        }
    };
    if name.is_empty() || name.contains([',', '/', '\\']) {
        bail!(Usage(format!("bad system name `{name}`")));
    }
    let ckpt = load_checkpoint(&path).map_err(passe_core::Error::from)?;
    Ok(CheckpointEnhancer::new(name, ckpt)?)
}

fn param_count(a: ParamCountArgs) -> anyhow::Result<()> {
    let cfg = match a.size {
        ModelSize::Full => FtjnfConfig::for_arch(a.arch),
        ModelSize::Tiny => FtjnfConfig::tiny(a.arch),
    };
    if a.breakdown {
        for p in cfg.param_layout() {
            let n: usize = p.shape.iter().product();
            println!("{}\t{:?}\t{n}", p.name, p.shape);
        }
    }
    println!("{}", count_params(&cfg));
    Ok(())
}
