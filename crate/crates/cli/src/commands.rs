//! One function per subcommand. Each reads its inputs, calls the library
//! and records inputs, outputs and seeds in the run context.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use cbm_audit::atastreet::{
    self, default_lambdas, reference_cloud, sigma_for, sweep_scorer, xi, xi_exact, Direction,
    FrontierPoint, SweepConfig, XiConfig,
};
use cbm_audit::balance::{
    calibrate_scorer, is_admissible, BalanceKind, BalanceSpec, CalibrationConfig, Scorer,
};
use cbm_audit::counterfactual::{attack, GroundTruth, Imputer, ImputerSpec};
use cbm_audit::datagen::{generate, generate_twins, make_adversarial_case, split_pairs, GenConfig};
use cbm_audit::io::{self, format_f64};
use cbm_audit::milp::{Branching, SolveStatus};
use cbm_audit::pocock::{
    self, feasibility_search, pocock_run, ArrivalOrder, Feasibility, PocockConfig,
};
use cbm_audit::seeding;
use cbm_audit::trial::{estimation_error, mate, observe, Assignment, TrialPopulation};
use cbm_audit::SolverConfig;
use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::manifest::Context;

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic population (CSV plus schema sidecar).
    Gen(GenArgs),
    /// Write an equal-split assignment file.
    Assign(AssignArgs),
    /// Hide the counterfactual outcomes of a population under an assignment.
    Observe(ObserveArgs),
    /// MATE of an assignment (or its estimation error with --error).
    Mate(MateArgs),
    /// Spread of the estimation error under random equal-split assignment.
    Sigma(SigmaArgs),
    /// Imbalance score of an assignment and/or the score's calibration.
    Balance(BalanceArgs),
    /// Score and MATE of random equal-split assignments.
    Reference(ReferenceArgs),
    /// Worst-case MATE against imbalance across a multiplier sweep.
    Frontier(FrontierArgs),
    /// Worst-case deviation factor of a population.
    Xi(XiArgs),
    /// Fraction of the worst-case error a finished trial reached.
    Rho(RhoArgs),
    /// Most biased admissible assignment for a reconstructed trial.
    Attack(AttackArgs),
    /// Sequential minimization runs.
    PocockSim(PocockSimArgs),
    /// Search for an arrival order under which minimization yields a target.
    Feasibility(FeasibilityArgs),
    /// Worst-case deviation factor by population size.
    XiScaling(XiScalingArgs),
    /// Re-run a command from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Assign(_) => "assign",
            Command::Observe(_) => "observe",
            Command::Mate(_) => "mate",
            Command::Sigma(_) => "sigma",
            Command::Balance(_) => "balance",
            Command::Reference(_) => "reference",
            Command::Frontier(_) => "frontier",
            Command::Xi(_) => "xi",
            Command::Rho(_) => "rho",
            Command::Attack(_) => "attack",
            Command::PocockSim(_) => "pocock-sim",
            Command::Feasibility(_) => "feasibility",
            Command::XiScaling(_) => "xi-scaling",
            Command::Replay(_) => "replay",
        }
    }

    /// File next to which the manifest is written.
    pub fn primary_output(&self) -> Option<&Path> {
        match self {
            Command::Gen(a) => Some(&a.out),
            Command::Assign(a) => Some(&a.out),
            Command::Observe(a) => Some(&a.out),
            Command::Mate(a) => a.out.as_deref(),
            Command::Sigma(a) => a.out.as_deref(),
            Command::Balance(a) => a.out.as_deref(),
            Command::Reference(a) => Some(&a.out),
            Command::Frontier(a) => Some(&a.out),
            Command::Xi(a) => a.out.as_deref(),
            Command::Rho(a) => a.out.as_deref(),
            Command::Attack(a) => a.out.as_deref(),
            Command::PocockSim(a) => Some(&a.out),
            Command::Feasibility(a) => a.out.as_deref(),
            Command::XiScaling(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }

    pub fn run(&self, ctx: &mut Context) -> Result<()> {
        match self {
            Command::Gen(a) => gen(a, ctx),
            Command::Assign(a) => assign(a, ctx),
            Command::Observe(a) => observe_cmd(a, ctx),
            Command::Mate(a) => mate_cmd(a, ctx),
            Command::Sigma(a) => sigma(a, ctx),
            Command::Balance(a) => balance(a, ctx),
            Command::Reference(a) => reference(a, ctx),
            Command::Frontier(a) => frontier(a, ctx),
            Command::Xi(a) => xi_cmd(a, ctx),
            Command::Rho(a) => rho(a, ctx),
            Command::Attack(a) => attack_cmd(a, ctx),
            Command::PocockSim(a) => pocock_sim(a, ctx),
            Command::Feasibility(a) => feasibility(a, ctx),
            Command::XiScaling(a) => xi_scaling(a, ctx),
            Command::Replay(_) => unreachable!("replay is dispatched by main"),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationKind {
    Plain,
    /// Pairs of identical subjects (rows 2p and 2p+1).
    Twins,
    /// Identical pairs with opposite-sign individual effects; also writes
    /// `<out stem>.planted.json` with the witness and error bound.
    Planted,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PopulationKind::Plain)]
    pub kind: PopulationKind,
    #[arg(long, default_value_t = 4)]
    pub m_continuous: usize,
    #[arg(long, default_value_t = 6)]
    pub m_binary: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau0: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[arg(long)]
    pub nonlinear: bool,
    #[arg(long, default_value_t = 1.0)]
    pub plant_effect: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AssignArgs {
    /// Population whose size to use.
    #[arg(long, conflicts_with = "n", required_unless_present = "n")]
    pub pop: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Put one member of every consecutive pair in each group.
    #[arg(long)]
    pub split_pairs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ObserveArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long)]
    pub assignment: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MateArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long)]
    pub assignment: PathBuf,
    /// Print MATE minus ATE instead of MATE.
    #[arg(long)]
    pub error: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SigmaArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Enumerate all assignments when there are at most 10^4 of them.
    #[arg(long)]
    pub exact_if_small: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ScoreArgs {
    #[arg(long, default_value = "smd-l1")]
    pub score: BalanceKind,
    /// Comma-separated per-covariate weights (Pocock score only).
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Bins for discretizing continuous covariates (Pocock score).
    #[arg(long, default_value_t = 3)]
    pub bins: usize,
    /// Use covariates as given instead of standardizing them (SMD scores).
    #[arg(long)]
    pub raw: bool,
}

impl ScoreArgs {
    pub fn spec(&self) -> BalanceSpec {
        BalanceSpec {
            kind: self.score,
            weights: self.weights.clone(),
            standardize: !self.raw,
            bins: self.bins,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchingArg {
    MostFractional,
    PseudoCost,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 200_000)]
    pub node_budget: usize,
    #[arg(long, value_enum, default_value_t = BranchingArg::MostFractional)]
    pub branching: BranchingArg,
    /// Disable the primal heuristic.
    #[arg(long)]
    pub no_heuristic: bool,
}

impl SolverArgs {
    pub fn config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            node_budget: self.node_budget,
            branching: match self.branching {
                BranchingArg::MostFractional => Branching::MostFractional,
                BranchingArg::PseudoCost => Branching::PseudoCost,
            },
            incumbent_heuristic: !self.no_heuristic,
            seed,
            ..SolverConfig::default()
        }
    }
}

/// Multiplier grid.
#[derive(Debug, Clone, Serialize)]
#[serde(transparent)]
pub struct Lambdas(pub Vec<f64>);

/// `default` or a comma-separated ascending list.
fn parse_lambdas(s: &str) -> std::result::Result<Lambdas, String> {
    if s == "default" {
        return Ok(Lambdas(default_lambdas()));
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad lambda `{v}`: {e}"))
        })
        .collect::<std::result::Result<_, _>>()
        .map(Lambdas)
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct CalibArgs {
    #[arg(long, default_value_t = 0.02)]
    pub alpha_a: f64,
    /// Random assignments for the expected imbalance.
    #[arg(long, default_value_t = 10_000)]
    pub calib_draws: usize,
}

impl CalibArgs {
    fn config(&self, seed: u64, solver: SolverConfig) -> CalibrationConfig {
        CalibrationConfig {
            draws: self.calib_draws,
            seed,
            alpha_a: self.alpha_a,
            solver,
            ..CalibrationConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BalanceArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Assignment to score.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Also report expected and minimum imbalance.
    #[arg(long)]
    pub calibrate: bool,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FrontierArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value = "default", value_parser = parse_lambdas)]
    pub lambdas: Lambdas,
    #[arg(long, default_value = "max")]
    pub direction: Direction,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV `lambda,u,mate,status`.
    #[arg(long)]
    pub out: PathBuf,
    /// Full points including assignments, as read by `xi --frontier`.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct XiArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value = "default", value_parser = parse_lambdas)]
    pub lambdas: Lambdas,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value_t = 10_000)]
    pub sigma_draws: usize,
    /// Also enumerate exactly up to this many subjects.
    #[arg(long, default_value_t = 14)]
    pub exact_max_n: usize,
    /// Frontier JSON files from `frontier --json-out` (one per direction)
    /// instead of sweeping here.
    #[arg(long, num_args = 2, value_names = ["MAX", "MIN"])]
    pub frontier: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ImputerArgs {
    /// `knn:<k>` or `linear:<ridge penalty>`.
    #[arg(long, default_value = "knn:5", value_parser = parse_imputer)]
    pub imputer: ImputerSpec,
    /// Full population to use as a perfect imputer.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

fn parse_imputer(s: &str) -> std::result::Result<ImputerSpec, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let spec = match kind {
        "knn" => ImputerSpec::Knn {
            k: if arg.is_empty() {
                5
            } else {
                arg.parse().map_err(|e| format!("bad k: {e}"))?
            },
        },
        "linear" => ImputerSpec::Linear {
            ridge_penalty: if arg.is_empty() {
                0.0
            } else {
                arg.parse().map_err(|e| format!("bad ridge penalty: {e}"))?
            },
        },
        other => return Err(format!("unknown imputer `{other}`")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

impl ImputerArgs {
    fn build(&self, ctx: &mut Context) -> Result<Box<dyn Imputer>> {
        Ok(match &self.truth {
            Some(path) => Box::new(GroundTruth(load_pop(path, ctx)?)),
            None => Box::new(self.imputer.clone()),
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RhoArgs {
    /// Observed trial CSV (`id,<covariates>,t,yobs`).
    #[arg(long)]
    pub observed: PathBuf,
    #[command(flatten)]
    pub imputer: ImputerArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value = "default", value_parser = parse_lambdas)]
    pub lambdas: Lambdas,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub observed: PathBuf,
    #[command(flatten)]
    pub imputer: ImputerArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value = "max")]
    pub direction: Direction,
    #[arg(long, default_value = "default", value_parser = parse_lambdas)]
    pub lambdas: Lambdas,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the attack assignment as a one-line file.
    #[arg(long)]
    pub assignment_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct PocockArgs {
    /// Probability of following the smaller-imbalance group.
    #[arg(long, default_value_t = 1.0)]
    pub p0: f64,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Force the last arrivals into the deficient group to end equal-split.
    #[arg(long)]
    pub equal_split: bool,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    pub bins: usize,
}

impl PocockArgs {
    fn config(&self, seed: u64) -> PocockConfig {
        PocockConfig {
            p0: self.p0,
            weights: self.weights.clone(),
            warmup: self.warmup,
            seed,
            equal_split: self.equal_split,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PocockSimArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[command(flatten)]
    pub pocock: PocockArgs,
    #[arg(long, default_value_t = 1)]
    pub replays: usize,
    /// Comma-separated arrival order used for every replay; random per
    /// replay when absent.
    #[arg(long)]
    pub order: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV `replay,u,mate,forced,assignment`.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected final imbalance after each arrival of replay 0.
    #[arg(long)]
    pub trajectory_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub trajectory_draws: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FeasibilityArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[command(flatten)]
    pub pocock: PocockArgs,
    #[arg(long, default_value_t = 1_000_000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the found order (comma-separated).
    #[arg(long)]
    pub order_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct XiScalingArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, value_delimiter = ',', default_value = "40,80,160")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long, default_value = "default", value_parser = parse_lambdas)]
    pub lambdas: Lambdas,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub calib: CalibArgs,
    #[arg(long, default_value_t = 10_000)]
    pub sigma_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn load_pop(path: &Path, ctx: &mut Context) -> Result<TrialPopulation> {
    let pop = io::load_population(path, None)?;
    ctx.input(path);
    let sidecar = io::sidecar_path(path);
    if sidecar.exists() {
        ctx.input(&sidecar);
    }
    Ok(pop)
}

fn load_assignment(path: &Path, n: usize, ctx: &mut Context) -> Result<Assignment> {
    let a = io::read_assignment(path)?;
    ctx.input(path);
    if a.len() != n {
        bail!(cbm_audit::Error::InvalidInput(format!(
            "assignment has {} entries for {n} subjects",
            a.len()
        )));
    }
    Ok(a)
}

fn note_budget(ctx: &mut Context, points: &[FrontierPoint]) {
    if points
        .iter()
        .any(|p| p.status == SolveStatus::BudgetExceeded)
    {
        ctx.budget_exceeded = true;
    }
}

fn gen(a: &GenArgs, ctx: &mut Context) -> Result<()> {
    let config = GenConfig {
        n: a.n,
        m_continuous: a.m_continuous,
        m_binary: a.m_binary,
        beta_scale: a.beta_scale,
        tau0: a.tau0,
        gamma_scale: a.gamma_scale,
        noise_sd: a.noise_sd,
        nonlinear: a.nonlinear,
        plant_effect: a.plant_effect,
        coef_seed: a.seed,
        noise_seed: seeding::derive(a.seed, 1),
    };
    ctx.seed("coef_seed", config.coef_seed);
    ctx.seed("noise_seed", config.noise_seed);
    let pop = match a.kind {
        PopulationKind::Plain => generate(&config)?,
        PopulationKind::Twins => generate_twins(&config)?,
        PopulationKind::Planted => {
            let case = make_adversarial_case(&config)?;
            let path = a.out.with_extension("planted.json");
            ctx.emit_json(
                Some(&path),
                json!({
                    "witness": case.witness.to_string(),
                    "error_bound": case.error_bound,
                }),
            )?;
            case.population
        }
    };
    io::save_population(&pop, &a.out)?;
    ctx.wrote(&a.out);
    ctx.wrote(&io::sidecar_path(&a.out));
    Ok(())
}

fn assign(a: &AssignArgs, ctx: &mut Context) -> Result<()> {
    let n = match (&a.pop, a.n) {
        (Some(p), _) => load_pop(p, ctx)?.len(),
        (None, Some(n)) => n,
        (None, None) => unreachable!("clap requires one of --pop/--n"),
    };
    ctx.seed("seed", a.seed);
    let mut rng = seeding::rng(a.seed);
    let assignment = if a.split_pairs {
        if n % 2 != 0 {
            bail!(cbm_audit::Error::InvalidInput(
                "--split-pairs needs an even n".into()
            ));
        }
        split_pairs(n, &mut rng)
    } else {
        Assignment::random_equal_split(n, &mut rng)
    };
    ctx.write(&a.out, &io::assignment_to_line(&assignment))
}

fn observe_cmd(a: &ObserveArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    let assignment = load_assignment(&a.assignment, pop.len(), ctx)?;
    let obs = observe(&pop, &assignment)?;
    io::save_observed(&obs, &a.out)?;
    ctx.wrote(&a.out);
    ctx.wrote(&io::sidecar_path(&a.out));
    Ok(())
}

fn mate_cmd(a: &MateArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    let assignment = load_assignment(&a.assignment, pop.len(), ctx)?;
    let v = if a.error {
        estimation_error(&pop, &assignment)?
    } else {
        mate(&pop, &assignment)?
    };
    ctx.emit_line(a.out.as_deref(), &format_f64(v))
}

fn sigma(a: &SigmaArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    ctx.seed("seed", a.seed);
    let est = if a.exact_if_small {
        sigma_for(&pop, a.draws, a.seed)?
    } else {
        cbm_audit::trial::sigma_ate_mc(&pop, a.draws, a.seed)?
    };
    ctx.emit_json(a.out.as_deref(), serde_json::to_value(est)?)
}

fn balance(a: &BalanceArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    if a.assignment.is_none() && !a.calibrate {
        bail!(cbm_audit::Error::InvalidInput(
            "nothing to do: pass --assignment and/or --calibrate".into()
        ));
    }
    let scorer = Scorer::new(&pop, &a.score.spec())?;
    let mut out = json!({ "score": a.score.score.as_str() });
    let value = match &a.assignment {
        Some(p) => {
            let assignment = load_assignment(p, pop.len(), ctx)?;
            let v = scorer.score(&assignment)?;
            out["u"] = v.into();
            Some(v)
        }
        None => None,
    };
    if a.calibrate {
        ctx.seed("seed", a.seed);
        let calib = calibrate_scorer(&scorer, &a.calib.config(a.seed, a.solver.config(a.seed)))?;
        if !calib.u_min_certified {
            ctx.budget_exceeded = true;
        }
        if let Some(v) = value {
            out["admissible"] = is_admissible(v, &calib)?.into();
        }
        out["calibration"] = serde_json::to_value(calib)?;
    }
    ctx.emit_json(a.out.as_deref(), out)
}

fn reference(a: &ReferenceArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    ctx.seed("seed", a.seed);
    let scorer = Scorer::new(&pop, &a.score.spec())?;
    let cloud = reference_cloud(&pop, &scorer, a.draws, a.seed)?;
    ctx.write(&a.out, &io::reference_to_csv(&cloud)?)
}

fn sweep_config(
    score: &ScoreArgs,
    lambdas: &[f64],
    direction: Direction,
    solver: &SolverArgs,
    seed: u64,
) -> SweepConfig {
    SweepConfig {
        lambdas: lambdas.to_vec(),
        direction,
        spec: score.spec(),
        solver: solver.config(seed),
    }
}

fn frontier(a: &FrontierArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    ctx.seed("seed", a.seed);
    let scorer = Scorer::new(&pop, &a.score.spec())?;
    let cfg = sweep_config(&a.score, &a.lambdas.0, a.direction, &a.solver, a.seed);
    let points = sweep_scorer(&pop, &scorer, &cfg)?;
    note_budget(ctx, &points);
    ctx.write(&a.out, &io::frontier_to_csv(&points)?)?;
    if let Some(path) = &a.json_out {
        ctx.emit_json(
            Some(path),
            json!({
                "score": a.score.score.as_str(),
                "direction": a.direction.as_str(),
                "points": points,
            }),
        )?;
    }
    Ok(())
}

fn read_frontier(
    path: &Path,
    expected: Direction,
    ctx: &mut Context,
) -> Result<Vec<FrontierPoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ctx.input(path);
    let v: serde_json::Value = serde_json::from_str(&text).map_err(cbm_audit::Error::from)?;
    if v["direction"].as_str() != Some(expected.as_str()) {
        bail!(cbm_audit::Error::InvalidInput(format!(
            "{} is not a `{}` frontier",
            path.display(),
            expected.as_str()
        )));
    }
    Ok(serde_json::from_value(v["points"].clone()).map_err(cbm_audit::Error::from)?)
}

fn xi_cmd(a: &XiArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    ctx.seed("seed", a.seed);
    let scorer = Scorer::new(&pop, &a.score.spec())?;
    let solver = a.solver.config(a.seed);
    let calibration = calibrate_scorer(&scorer, &a.calib.config(a.seed, solver.clone()))?;
    let sigma = sigma_for(&pop, a.sigma_draws, a.seed)?;
    let (max_sweep, min_sweep) = match &a.frontier {
        Some(paths) => (
            read_frontier(&paths[0], Direction::Max, ctx)?,
            read_frontier(&paths[1], Direction::Min, ctx)?,
        ),
        None => {
            let sweep = |d| {
                sweep_scorer(
                    &pop,
                    &scorer,
                    &sweep_config(&a.score, &a.lambdas.0, d, &a.solver, a.seed),
                )
            };
            (sweep(Direction::Max)?, sweep(Direction::Min)?)
        }
    };
    for p in max_sweep.iter().chain(&min_sweep) {
        if p.assignment.len() != pop.len() {
            bail!(cbm_audit::Error::InvalidInput(
                "frontier was computed for another population".into()
            ));
        }
    }
    note_budget(ctx, &max_sweep);
    note_budget(ctx, &min_sweep);
    let mut report = xi(&calibration, &max_sweep, &min_sweep, &sigma)?;
    if pop.len() <= a.exact_max_n {
        report.exact = Some(xi_exact(
            &pop,
            &scorer,
            &calibration,
            sigma.sigma,
            a.exact_max_n,
        )?);
    }
    ctx.emit_json(a.out.as_deref(), serde_json::to_value(report)?)
}

fn load_observed(path: &Path, ctx: &mut Context) -> Result<cbm_audit::trial::ObservedTrial> {
    let obs = io::load_observed(path, None)?;
    ctx.input(path);
    let sidecar = io::sidecar_path(path);
    if sidecar.exists() {
        ctx.input(&sidecar);
    }
    Ok(obs)
}

fn rho(a: &RhoArgs, ctx: &mut Context) -> Result<()> {
    let obs = load_observed(&a.observed, ctx)?;
    let imputer = a.imputer.build(ctx)?;
    ctx.seed("seed", a.seed);
    let cfg = sweep_config(&a.score, &a.lambdas.0, Direction::Max, &a.solver, a.seed);
    let report = atastreet::rho(&obs, imputer.as_ref(), &cfg)?;
    note_budget(ctx, &report.contour);
    ctx.emit_json(a.out.as_deref(), serde_json::to_value(report)?)
}

fn attack_cmd(a: &AttackArgs, ctx: &mut Context) -> Result<()> {
    let obs = load_observed(&a.observed, ctx)?;
    let imputer = a.imputer.build(ctx)?;
    ctx.seed("seed", a.seed);
    let solver = a.solver.config(a.seed);
    let cfg = sweep_config(&a.score, &a.lambdas.0, a.direction, &a.solver, a.seed);
    let result = attack(
        &obs,
        imputer.as_ref(),
        &cfg,
        &a.calib.config(a.seed, solver),
    )?;
    if let Some(path) = &a.assignment_out {
        ctx.write(path, &io::assignment_to_line(&result.assignment))?;
    }
    ctx.emit_json(a.out.as_deref(), serde_json::to_value(result)?)
}

fn read_order(path: &Path, n: usize, ctx: &mut Context) -> Result<ArrivalOrder> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ctx.input(path);
    let order = text
        .trim()
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| cbm_audit::Error::InvalidInput(format!("bad order entry `{v}`: {e}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if order.len() != n {
        bail!(cbm_audit::Error::InvalidInput(format!(
            "order has {} entries for {n} subjects",
            order.len()
        )));
    }
    Ok(ArrivalOrder::new(order)?)
}

fn order_line(order: &ArrivalOrder) -> String {
    order
        .as_slice()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn pocock_population(pop: &TrialPopulation, bins: usize) -> Result<TrialPopulation> {
    Ok(pocock::discretize(pop, bins)?)
}

fn pocock_sim(a: &PocockSimArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    let disc = pocock_population(&pop, a.pocock.bins)?;
    ctx.seed("seed", a.seed);
    let fixed = match &a.order {
        Some(p) => Some(read_order(p, pop.len(), ctx)?),
        None => None,
    };
    let weights = a
        .pocock
        .weights
        .clone()
        .unwrap_or_else(|| vec![1.0; pop.m()]);
    let mut rows = Vec::with_capacity(a.replays);
    let mut first = None;
    for r in 0..a.replays {
        let replay_seed = seeding::derive(a.seed, r as u64);
        let order = match &fixed {
            Some(o) => o.clone(),
            None => ArrivalOrder::random(pop.len(), &mut seeding::rng(replay_seed)),
        };
        let run = pocock_run(&disc, &order, &a.pocock.config(replay_seed))?;
        let u = cbm_audit::balance::u_pocock(&disc, &run.assignment, &weights)?;
        let m = if run.assignment.n_treated() > 0 && run.assignment.n_control() > 0 {
            format_f64(mate(&pop, &run.assignment)?)
        } else {
            String::new()
        };
        rows.push(vec![
            r.to_string(),
            format_f64(u),
            m,
            run.forced.to_string(),
            run.assignment.to_string(),
        ]);
        if r == 0 {
            first = Some((order, run.assignment));
        }
    }
    ctx.write(
        &a.out,
        &io::table_to_csv(
            &["replay", "u", "mate", "forced", "assignment"],
            rows.into_iter(),
        )?,
    )?;
    if let (Some(path), Some((order, assignment))) = (&a.trajectory_out, first) {
        let points = pocock::trajectory(
            &disc,
            &order,
            &assignment,
            &weights,
            a.trajectory_draws,
            a.seed,
        )?;
        ctx.write(path, &io::trajectory_to_csv(&points)?)?;
    }
    Ok(())
}

fn feasibility(a: &FeasibilityArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    let disc = pocock_population(&pop, a.pocock.bins)?;
    let target = load_assignment(&a.target, pop.len(), ctx)?;
    ctx.seed("seed", a.seed);
    let out = match feasibility_search(&disc, &target, &a.pocock.config(a.seed), a.budget, a.seed)?
    {
        Feasibility::Found(found) => {
            if let Some(path) = &a.order_out {
                ctx.emit_line(Some(path), &order_line(&found.order))?;
            }
            json!({ "found": true, "result": found })
        }
        Feasibility::NotFound { expansions } => {
            ctx.budget_exceeded = true;
            json!({ "found": false, "expansions": expansions })
        }
    };
    ctx.emit_json(a.out.as_deref(), out)
}

fn xi_scaling(a: &XiScalingArgs, ctx: &mut Context) -> Result<()> {
    let pop = load_pop(&a.pop, ctx)?;
    ctx.seed("seed", a.seed);
    let solver = a.solver.config(a.seed);
    let config = XiConfig {
        spec: a.score.spec(),
        lambdas: a.lambdas.0.clone(),
        solver: solver.clone(),
        calibration: a.calib.config(a.seed, solver),
        sigma_draws: a.sigma_draws,
        seed: a.seed,
        exact_max_n: 0,
    };
    let rows = atastreet::xi_vs_population_size(&pop, &config, &a.sizes, a.replicates)?;
    ctx.write(&a.out, &io::scaling_to_csv(&rows)?)
}
