use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ogan_lab::faceswap::Architecture;
use ogan_lab::harness::{
    report, run_arm, run_curve, run_plan, ArmSpec, AttackKind, DeskSettings, ExperimentPlan, SwapDirection, Workspace,
};
use ogan_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "ogan-lab", version, about = "Training-resistant attacks on miniature face-swap models")]
struct Cli {
    /// Output directory; each seed gets its own `seed<k>` subdirectory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file overriding the desk settings (resolution, sizes, configs).
    #[arg(long, global = true)]
    settings: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    #[value(name = "h128-mini")]
    H128Mini,
    #[value(name = "sae-mini")]
    SaeMini,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::H128Mini => Architecture::H128Mini,
            ArchArg::SaeMini => Architecture::SaeMini,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    B,
    C,
}

impl From<TargetArg> for SwapDirection {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::B => SwapDirection::AToB,
            TargetArg::C => SwapDirection::AToC,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    None,
    Pgd,
    Ogan,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::None => AttackKind::None,
            AttackArg::Pgd => AttackKind::Pgd,
            AttackArg::Ogan => AttackKind::Ogan,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackName {
    Pgd,
    Ogan,
}

#[derive(Args)]
struct ArmArgs {
    #[arg(long, value_enum, default_value = "ogan")]
    attack: AttackArg,
    #[arg(long, value_enum, default_value = "h128-mini")]
    arch: ArchArg,
    #[arg(long, value_enum, default_value = "b")]
    target: TargetArg,
    /// Train the victim on D'_A; without it the protected frames are left out.
    #[arg(long)]
    include_adversarial: bool,
    #[arg(long, default_value_t = 3000)]
    iterations: u64,
    /// Curve spacing; defaults to a single point at `iterations`.
    #[arg(long)]
    eval_every: Option<u64>,
}

impl ArmArgs {
    fn arm(&self) -> ArmSpec {
        let arm = ArmSpec::new(
            self.attack.into(),
            self.arch.into(),
            self.target.into(),
            self.include_adversarial,
            self.iterations,
        );
        match self.eval_every {
            Some(e) => arm.with_curve(e),
            None => arm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the three synthetic identities as frame directories.
    Synth,
    /// Train the model the attacks are built against.
    Pretrain {
        #[arg(long, value_enum, default_value = "h128-mini")]
        arch: ArchArg,
        #[arg(long, value_enum, default_value = "b")]
        target: TargetArg,
    },
    /// Build an attack and write the protected frames.
    Attack {
        #[arg(value_enum)]
        kind: AttackName,
    },
    /// Train a fresh victim for an arm.
    Retrain(ArmArgs),
    /// Score an arm's victim on the attacked sequence.
    Evaluate(ArmArgs),
    /// Score an arm at every `eval_every` iterations.
    Curve(ArmArgs),
    /// Render tables and image strips from a results directory.
    Report,
    /// Run every arm of a plan for every seed in it.
    Run {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Write the default desk plan as JSON.
    Plan {
        path: PathBuf,
    },
}

fn load_settings(path: Option<&Path>) -> Result<DeskSettings> {
    match path {
        None => Ok(DeskSettings::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let settings = load_settings(cli.settings.as_deref())?;
    let ws = || Workspace::new(&cli.out, cli.seed, &settings);
    match cli.command {
        Command::Synth => {
            let dir = ws()?.write_data()?;
            println!("wrote {}", dir.display());
        }
        Command::Pretrain { arch, target } => {
            let w = ws()?;
            let model = w.pretrained(arch.into(), target.into())?;
            println!("pretrained {} digest {}", model.arch(), model.digest()?);
        }
        Command::Attack { kind } => {
            let w = ws()?;
            let (kind, adv) = match kind {
                AttackName::Pgd => (AttackKind::Pgd, w.pgd()?),
                AttackName::Ogan => (AttackKind::Ogan, w.ogan()?.protected),
            };
            println!(
                "{kind}: {} protected frames in {} digest {}",
                adv.len(),
                w.attack_dir(kind).display(),
                ogan_lab::harness::samples_digest(&adv)
            );
        }
        Command::Retrain(a) => {
            let arm = a.arm();
            arm.validate()?;
            let rec = ws()?.victim(&arm.victim(), arm.retrain_iterations, &arm.eval_points())?;
            print_json(&rec)?;
        }
        Command::Evaluate(a) => print_json(&run_arm(&ws()?, &a.arm())?)?,
        Command::Curve(a) => {
            for p in run_curve(&ws()?, &a.arm())? {
                println!("{},{}", p.iteration, p.s_tmp);
            }
        }
        Command::Report => {
            let out = report(&cli.out)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.markdown.display());
        }
        Command::Run { plan } => {
            let plan = ExperimentPlan::load(&plan)?;
            let table = run_plan(&plan, &cli.out, |msg| eprintln!("{msg}"))?;
            let out = report(&cli.out)?;
            println!("wrote {}", out.markdown.display());
            for r in table.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("arm {} seed {} failed: {}", r.arm_id, r.seed, r.error.as_deref().unwrap_or(""));
            }
            return Ok(table.all_completed());
        }
        Command::Plan { path } => {
            ExperimentPlan::desk().save(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
