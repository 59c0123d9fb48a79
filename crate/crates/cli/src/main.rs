//! `kvrefine`: every pipeline step as a subcommand. All artifacts live in
//! `--out` under fixed names, and each run leaves a `manifest-*.json` with the
//! digests of what it read and wrote.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kvrefine_core::eval::{
    ablation, ablation_checks, noise_sweep, pretrain, sweep_checks, Check, Lab, Report, Split, Splits,
};
use kvrefine_core::grpo::write_rl_csv;
use kvrefine_core::harness::{Config, Manifest};
use kvrefine_core::policy::{checkpoint, PolicyParams};
use kvrefine_core::synthdoc::io::{read_jsonl, write_jsonl, AnnotationRecord};
use kvrefine_core::synthdoc::{Document, FieldAnnotation, Schema, Source};
use kvrefine_core::tlr::{stage1_build, stage2_train_refiner, stage3_refine, Stage1Pair};
use kvrefine_core::{Error, Result};

const SPLITS: [&str; 4] = ["train", "test", "expert", "pretrain"];
const REFERENCE: &str = "reference.ckpt";
const STAGE1: &str = "stage1-pairs.jsonl";
const REFINER: &str = "refiner.ckpt";
const REFINED: &str = "refined.jsonl";
const STAGE3_REPORT: &str = "stage3-report.json";

#[derive(Parser)]
#[command(name = "kvrefine", version, about = "Noise-aware post-training lab for key-value extraction")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// key=value configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for every artifact this run reads or writes.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the corpus splits and their simulated pseudo labels.
    Gen,
    /// Corrupt train-split truth at a noise ratio.
    Noise {
        /// Defaults to `noise_ratio` from the configuration.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Train the reference policy on the clean pretraining split.
    Pretrain,
    /// Label refinement.
    Tlr {
        #[arg(value_enum)]
        stage: TlrStage,
        /// Annotation file to refine (stage3/all); defaults to the noisy file
        /// at `refine_ratio`.
        #[arg(long)]
        input: Option<String>,
    },
    /// Supervised fine-tuning.
    Sft(SftArgs),
    /// Preference RL on Refined Data.
    Rl(RlArgs),
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        params: String,
        /// Compare values without normalization.
        #[arg(long)]
        raw: bool,
    },
    /// SFT at each configured noise ratio plus on Refined Data, for every configured seed.
    Sweep {
        /// Exit nonzero if a trend check fails.
        #[arg(long)]
        check: bool,
    },
    /// Run the configured ablation grid for every configured seed.
    Ablate {
        #[arg(long)]
        check: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TlrStage {
    Stage1,
    Stage2,
    Stage3,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    /// Truth of the expert split.
    Clean,
    /// The noisy train file at `noise_ratio`.
    Noisy,
    /// Refined Data.
    Refined,
}

impl DataKind {
    fn name(self) -> &'static str {
        match self {
            DataKind::Clean => "clean",
            DataKind::Noisy => "noisy",
            DataKind::Refined => "refined",
        }
    }
}

#[derive(Args)]
struct SftArgs {
    #[arg(long, value_enum, default_value = "clean")]
    data: DataKind,
    /// Initial checkpoint in the output directory.
    #[arg(long, default_value = REFERENCE)]
    init: String,
    /// Enable prompt perturbation.
    #[arg(long = "dyn")]
    dyn_prompt: bool,
    /// Output stem; defaults to `sft-<data>[-dyn]`.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct RlArgs {
    #[arg(long, default_value = REFERENCE)]
    init: String,
    /// `token` or `sequence`; overrides the configuration.
    #[arg(long)]
    aggregation: Option<String>,
    /// Output stem; defaults to `rl-<aggregation>`.
    #[arg(long)]
    name: Option<String>,
}

/// Per-run state: the resolved configuration and the manifest being filled.
struct Run {
    cfg: Config,
    seed: u64,
    out: PathBuf,
    schema: Schema,
    manifest: Manifest,
    started: Instant,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(Error::config(format!("missing input {}", p.display())));
        }
        self.manifest.add_input(&self.out, name)?;
        Ok(p)
    }

    fn output(&mut self, name: &str) -> Result<()> {
        self.manifest.add_output(&self.out, name)
    }

    fn write_jsonl<T: serde::Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        write_jsonl(&self.path(name), items)?;
        self.output(name)
    }

    fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        std::fs::write(self.path(name), serde_json::to_string_pretty(value)? + "\n")?;
        self.output(name)
    }

    fn save_params(&mut self, name: &str, params: &PolicyParams) -> Result<()> {
        checkpoint::save(&self.path(name), params)?;
        self.output(name)
    }

    fn load_params(&mut self, name: &str) -> Result<PolicyParams> {
        let p = self.input(name)?;
        checkpoint::load(&p)
    }

    fn write_losses(&mut self, name: &str, losses: &[f64]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.path(name))?);
        writeln!(f, "step,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
        f.flush()?;
        drop(f);
        self.output(name)
    }

    fn split(&mut self, name: &str) -> Result<Split> {
        let docs: Vec<Document> = read_jsonl(&self.input(&format!("corpus-{name}.jsonl"))?)?;
        let records: Vec<AnnotationRecord> = read_jsonl(&self.input(&format!("pseudo-{name}.jsonl"))?)?;
        let pseudo = records.iter().map(|r| r.to_pseudo()).collect::<Result<Vec<_>>>()?;
        Split::from_parts(&self.schema, docs, pseudo)
    }

    fn splits(&mut self) -> Result<Splits> {
        Ok(Splits {
            train: self.split("train")?,
            test: self.split("test")?,
            expert: self.split("expert")?,
            pretrain: self.split("pretrain")?,
        })
    }

    /// A lab over the generated splits with `reference` as its anchor.
    fn lab(&mut self, reference: PolicyParams) -> Result<Lab> {
        let splits = self.splits()?;
        Lab::from_parts(&self.cfg.lab, self.seed, self.schema.clone(), splits, reference)
    }

    /// Annotations from a file, checked against the documents they claim to cover.
    fn annotations(&mut self, name: &str, docs: &[Document]) -> Result<Vec<Vec<FieldAnnotation>>> {
        let records: Vec<AnnotationRecord> = read_jsonl(&self.input(name)?)?;
        if records.len() != docs.len() || records.iter().zip(docs).any(|(r, d)| r.doc_id != d.doc_id) {
            return Err(Error::structural(format!("{name} does not match the train split")));
        }
        Ok(records.into_iter().map(|r| r.truth).collect())
    }

    fn finish(mut self, name: &str) -> Result<()> {
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        self.manifest.save(&self.path(&format!("manifest-{name}.json")))
    }
}

fn noisy_file(ratio: f64) -> String {
    format!("noisy-{ratio:.2}.jsonl")
}

/// The invocation minus global flags, so a manifest can be replayed against
/// another output directory.
fn replay_args() -> Vec<String> {
    let mut out = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--config" | "--seed" | "--out" => {
                args.next();
            }
            _ if ["--config=", "--seed=", "--out="].iter().any(|p| a.starts_with(p)) => {}
            _ => out.push(a),
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` means a `--check` trend check failed.
fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Cmd::Eval { raw: true, .. } = cli.cmd {
        cfg.set("raw", "true")?;
    }
    if let Cmd::Rl(RlArgs {
        aggregation: Some(a), ..
    }) = &cli.cmd
    {
        cfg.set("aggregation", a)?;
    }
    cfg.lab.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    let (subcommand, seeds) = match &cli.cmd {
        Cmd::Gen => ("gen", vec![cli.seed]),
        Cmd::Noise { .. } => ("noise", vec![cli.seed]),
        Cmd::Pretrain => ("pretrain", vec![cli.seed]),
        Cmd::Tlr { .. } => ("tlr", vec![cli.seed]),
        Cmd::Sft(_) => ("sft", vec![cli.seed]),
        Cmd::Rl(_) => ("rl", vec![cli.seed]),
        Cmd::Eval { .. } => ("eval", vec![cli.seed]),
        Cmd::Sweep { .. } => ("sweep", cfg.seeds.clone()),
        Cmd::Ablate { .. } => ("ablate", cfg.seeds.clone()),
    };
    let run = Run {
        manifest: Manifest::new(subcommand, replay_args(), cfg.dump(), seeds),
        seed: cli.seed,
        out: cli.out,
        schema: Schema::invoice(),
        cfg,
        started: Instant::now(),
    };
    match cli.cmd {
        Cmd::Gen => gen(run),
        Cmd::Noise { ratio } => noise(run, ratio),
        Cmd::Pretrain => pretrain_cmd(run),
        Cmd::Tlr { stage, input } => tlr(run, stage, input),
        Cmd::Sft(a) => sft(run, a),
        Cmd::Rl(a) => rl(run, a),
        Cmd::Eval { params, .. } => eval(run, &params),
        Cmd::Sweep { check } => sweep(run, check),
        Cmd::Ablate { check } => ablate(run, check),
    }
}

fn gen(mut run: Run) -> Result<bool> {
    let splits = Splits::generate(&run.schema, &run.cfg.lab, run.seed)?;
    for (name, split) in SPLITS
        .iter()
        .zip([&splits.train, &splits.test, &splits.expert, &splits.pretrain])
    {
        run.write_jsonl(&format!("corpus-{name}.jsonl"), &split.docs)?;
        let records: Vec<AnnotationRecord> = split
            .docs
            .iter()
            .zip(&split.pseudo)
            .map(|(d, p)| AnnotationRecord::from_pseudo(d, p))
            .collect();
        run.write_jsonl(&format!("pseudo-{name}.jsonl"), &records)?;
    }
    run.finish("gen")?;
    Ok(true)
}

fn noise(mut run: Run, ratio: Option<f64>) -> Result<bool> {
    let ratio = ratio.unwrap_or(run.cfg.noise_ratio);
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::key("ratio", format!("{ratio} outside [0, 1]")));
    }
    let train = run.split("train")?;
    let targets = train.noisy_targets(&run.schema, run.seed, ratio)?;
    let records: Vec<AnnotationRecord> = train
        .docs
        .iter()
        .zip(targets)
        .map(|(d, t)| AnnotationRecord::new(d, Source::Noisy, t))
        .collect();
    run.write_jsonl(&noisy_file(ratio), &records)?;
    run.finish(&format!("noise-{ratio:.2}"))?;
    Ok(true)
}

fn pretrain_cmd(mut run: Run) -> Result<bool> {
    let split = run.split("pretrain")?;
    let (params, log) = pretrain(&run.schema, &run.cfg.lab, run.seed, &split)?;
    run.save_params(REFERENCE, &params)?;
    run.write_losses("pretrain-loss.csv", &log.losses)?;
    run.finish("pretrain")?;
    Ok(true)
}

fn tlr(mut run: Run, stage: TlrStage, input: Option<String>) -> Result<bool> {
    let tcfg = run.cfg.lab.tlr_for(run.seed);
    if matches!(stage, TlrStage::Stage1 | TlrStage::All) {
        let expert = run.split("expert")?;
        let pairs = stage1_build(&run.schema, &expert.docs, &tcfg.stage1)?;
        run.write_jsonl(STAGE1, &pairs)?;
    }
    if matches!(stage, TlrStage::Stage2 | TlrStage::All) {
        let pairs: Vec<Stage1Pair> = read_jsonl(&run.input(STAGE1)?)?;
        let reference = run.load_params(REFERENCE)?;
        let replay_split = run.split("pretrain")?;
        let replay = replay_split.seq_pairs(&run.schema, &replay_split.truth())?;
        let (refiner, log) = stage2_train_refiner(&run.schema, &reference, &pairs, &replay, &tcfg.stage2)?;
        run.save_params(REFINER, &refiner)?;
        kvrefine_core::distill::write_loss_csv(&run.path("refiner-loss.csv"), &log)?;
        run.output("refiner-loss.csv")?;
    }
    if matches!(stage, TlrStage::Stage3 | TlrStage::All) {
        let refiner = run.load_params(REFINER)?;
        let train = run.split("train")?;
        let name = input.unwrap_or_else(|| noisy_file(run.cfg.lab.refine_ratio));
        let annotations = run.annotations(&name, &train.docs)?;
        let inputs: Vec<_> = train
            .docs
            .iter()
            .zip(annotations)
            .map(|(doc, annotations)| kvrefine_core::tlr::NoisyInput {
                doc: doc.clone(),
                annotations,
            })
            .collect();
        let (refined, report) = stage3_refine(&run.schema, &refiner, &inputs)?;
        run.write_jsonl(REFINED, &refined)?;
        run.write_json(STAGE3_REPORT, &report)?;
    }
    let stage = match stage {
        TlrStage::Stage1 => "stage1",
        TlrStage::Stage2 => "stage2",
        TlrStage::Stage3 => "stage3",
        TlrStage::All => "all",
    };
    run.finish(&format!("tlr-{stage}"))?;
    Ok(true)
}

fn sft(mut run: Run, args: SftArgs) -> Result<bool> {
    let name = args.name.clone().unwrap_or_else(|| {
        format!("sft-{}{}", args.data.name(), if args.dyn_prompt { "-dyn" } else { "" })
    });
    let init = run.load_params(&args.init)?;
    let lab = run.lab(init.clone())?;
    let (split, targets) = match args.data {
        DataKind::Clean => (&lab.expert, lab.expert.truth()),
        DataKind::Noisy => (&lab.train, run.annotations(&noisy_file(run.cfg.noise_ratio), &lab.train.docs)?),
        DataKind::Refined => (&lab.train, run.annotations(REFINED, &lab.train.docs)?),
    };
    let (params, log) = lab.sft(&init, split, &targets, args.dyn_prompt, &name)?;
    run.save_params(&format!("{name}.ckpt"), &params)?;
    run.write_losses(&format!("{name}-loss.csv"), &log.train.losses)?;
    if args.dyn_prompt {
        run.write_jsonl(&format!("{name}-perturbations.jsonl"), &log.perturbations)?;
    }
    run.finish(&format!("sft-{name}"))?;
    Ok(true)
}

fn rl(mut run: Run, args: RlArgs) -> Result<bool> {
    let aggregation = run.cfg.lab.grpo.aggregation;
    let name = args.name.clone().unwrap_or_else(|| {
        format!("rl-{}", run.cfg.get("aggregation").unwrap_or_default())
    });
    let init = run.load_params(&args.init)?;
    let lab = run.lab(init.clone())?;
    let targets = run.annotations(REFINED, &lab.train.docs)?;
    let (params, log) = lab.rl(&init, &targets, aggregation, &name)?;
    run.save_params(&format!("{name}.ckpt"), &params)?;
    write_rl_csv(&run.path(&format!("{name}-log.csv")), &log)?;
    run.output(&format!("{name}-log.csv"))?;
    run.finish(&format!("rl-{name}"))?;
    Ok(true)
}

fn eval(mut run: Run, params: &str) -> Result<bool> {
    let p = run.load_params(params)?;
    let lab = run.lab(p.clone())?;
    let report = lab.evaluate(&p)?;
    println!("fmr_micro={:.4} fmr_macro={:.4}", report.micro, report.macro_);
    let stem = Path::new(params)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| params.to_string());
    run.write_json(&format!("eval-{stem}.json"), &report)?;
    run.finish(&format!("eval-{stem}"))?;
    Ok(true)
}

/// Builds one lab per configured seed, each pretraining its own reference.
fn labs(run: &Run) -> Result<Vec<Lab>> {
    run.cfg.seeds.iter().map(|&s| Lab::new(&run.cfg.lab, s)).collect()
}

fn report_checks(run: &mut Run, name: &str, report: &Report, checks: &[Check]) -> Result<bool> {
    report.write_csv(&run.path(&format!("{name}.csv")))?;
    run.output(&format!("{name}.csv"))?;
    let mut summary = report.summary_json();
    summary["checks"] = serde_json::to_value(checks)?;
    run.write_json(&format!("{name}-summary.json"), &summary)?;
    for m in report.means() {
        println!("{:<24} {:.4} ({} runs)", m.condition, m.fmr_micro, m.runs);
    }
    for c in checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn sweep(mut run: Run, check: bool) -> Result<bool> {
    let mut labs = labs(&run)?;
    let ratios = run.cfg.ratios.clone();
    let report = noise_sweep(&mut labs, &ratios)?;
    let checks = sweep_checks(&report, &ratios, run.cfg.lab.refine_ratio);
    let ok = report_checks(&mut run, "sweep", &report, &checks)?;
    if report.rows.iter().any(|r| r.error.is_some()) {
        eprintln!("some runs failed; see sweep-summary.json");
    }
    run.finish("sweep")?;
    Ok(ok || !check)
}

fn ablate(mut run: Run, check: bool) -> Result<bool> {
    let mut labs = labs(&run)?;
    let report = ablation(&mut labs, &run.cfg.ablation);
    let checks = ablation_checks(&report);
    let ok = report_checks(&mut run, "ablation", &report, &checks)?;
    run.finish("ablate")?;
    Ok(ok || !check)
}
