//! `branchcount`: runs the expansion, swap, counting and EPRB checks from the
//! command line and prints machine-readable reports.
//!
//! Exit codes: 0 when every check passes, 1 on bad input, 2 when a check
//! fails.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use branchcount::eprb::{
    chsh, embed_spin_state, joint_table, local_pad, marginal_pad, outcome_independence, parameter_independence,
    product_counting, required_pad, singlet_spin, EprbScenario, Factorization, Setting, Spin,
};
use branchcount::event_space::{build_swap_triple, forced_equalities};
use branchcount::expansion::{construct, validate};
use branchcount::hilbert::{random_projector, seeded_rng, tensor, Projection, StateVector, Tolerance, C64};
use branchcount::microprob::{count, embed_for_count, uniqueness_check};
use branchcount::Error;
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde_json::{json, Map, Value};

const TOL_ENV: &str = "BRANCHCOUNT_TOL";

#[derive(Parser, Debug)]
#[command(name = "branchcount", version, about = "Equiamplitude expansions and microstate counting")]
struct Cli {
    /// Relative tolerance for every numerical check (overrides BRANCHCOUNT_TOL).
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Output format; csv is only available for tables.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an n-element equiamplitude expansion and validate it.
    Expand {
        /// Dimension of the random state (taken from --state-file when given).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// JSON array of [re, im] pairs.
        #[arg(long)]
        state_file: Option<PathBuf>,
    },
    /// Build the swap triple for a pair of microstates and solve for the
    /// forced probability equalities.
    Swap {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        i: usize,
        #[arg(long, default_value_t = 1)]
        j: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Count microstates in a random projector for one n or a grid of n.
    Prob {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        projector_rank: usize,
        /// Comma-separated list of ensemble sizes.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        /// Seeds tried by the uniqueness check.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Count in the given dimension instead of padding it as needed.
        #[arg(long)]
        no_embed: bool,
    },
    /// Spin-pair checks at two settings per party (angles in degrees).
    Eprb {
        #[arg(long, value_enum)]
        state: PairState,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, default_value_t = 90.0, allow_negative_numbers = true)]
        aprime: f64,
        #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
        b: f64,
        #[arg(long, default_value_t = 135.0, allow_negative_numbers = true)]
        bprime: f64,
        /// Direction of Alice's factor for --state product.
        #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
        phi: f64,
        /// Direction of Bob's factor for --state product.
        #[arg(long, default_value_t = 120.0, allow_negative_numbers = true)]
        chi: f64,
        #[arg(long)]
        n: Option<usize>,
        /// Ensemble sizes for product-count (default: --n).
        #[arg(long)]
        na: Option<usize>,
        #[arg(long)]
        nb: Option<usize>,
        /// Extra local dimensions per party (default: smallest that fits).
        #[arg(long)]
        pad: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        check: EprbCheck,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PairState {
    Singlet,
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EprbCheck {
    Pi,
    Oi,
    Chsh,
    Table,
    ProductCount,
}

/// Failure of a command: bad input exits 1, a failed invariant exits 2.
#[derive(Debug)]
enum Failure {
    Input(String),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvariantViolation(_) => Failure::Invariant(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn input(msg: impl Into<String>) -> Failure {
    Failure::Input(msg.into())
}

/// A finished run: the payload and whether its checks passed.
struct Report {
    payload: Value,
    table: Option<Vec<Value>>,
    passed: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(report) => {
            if let Err(e) = emit(&report, cli.format) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: check failed");
                ExitCode::from(2)
            }
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn tolerance(flag: Option<f64>) -> Result<Tolerance, Failure> {
    let rel = match flag {
        Some(rel) => Some(rel),
        None => match std::env::var(TOL_ENV) {
            Ok(raw) => Some(raw.trim().parse::<f64>().map_err(|_| input(format!("{TOL_ENV}: not a number: {raw}")))?),
            Err(_) => None,
        },
    };
    match rel {
        Some(rel) => Ok(Tolerance::with_rel(rel)?),
        None => Ok(Tolerance::default()),
    }
}

fn run(cli: &Cli) -> Result<Report, Failure> {
    let tol = tolerance(cli.tol)?;
    let tabular = matches!(cli.command, Command::Prob { .. } | Command::Eprb { check: EprbCheck::Table, .. });
    if cli.format == Format::Csv && !tabular {
        return Err(input("csv output is only available for prob and eprb --check table"));
    }
    match &cli.command {
        Command::Expand { dim, n, seed, state_file } => cmd_expand(*dim, *n, *seed, state_file.as_deref(), &tol),
        Command::Swap { dim, n, i, j, seed } => cmd_swap(*dim, *n, *i, *j, *seed, &tol),
        Command::Prob { dim, n, seed, projector_rank, grid, trials, no_embed } => {
            let sizes = match (n, grid) {
                (_, Some(grid)) => grid.clone(),
                (Some(n), None) => vec![*n],
                (None, None) => return Err(input("prob needs --n or --grid")),
            };
            cmd_prob(*dim, &sizes, *seed, *projector_rank, *trials, !no_embed)
        }
        Command::Eprb { state, a, aprime, b, bprime, phi, chi, n, na, nb, pad, seed, check } => {
            let args = EprbArgs {
                state: *state,
                alice: [setting(*a)?, setting(*aprime)?],
                bob: [setting(*b)?, setting(*bprime)?],
                phi: setting(*phi)?,
                chi: setting(*chi)?,
                n: *n,
                na: *na,
                nb: *nb,
                pad: *pad,
                seed: *seed,
            };
            cmd_eprb(&args, *check, &tol)
        }
    }
}

fn setting(degrees: f64) -> Result<Setting, Failure> {
    Ok(Setting::from_degrees(degrees)?)
}

fn read_state(path: &std::path::Path) -> Result<StateVector, Failure> {
    let raw = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let pairs: Vec<[f64; 2]> =
        serde_json::from_str(&raw).map_err(|e| input(format!("{}: expected [[re, im], ...]: {e}", path.display())))?;
    Ok(StateVector::new(pairs.into_iter().map(|[re, im]| C64::new(re, im)).collect())?)
}

fn cmd_expand(
    dim: Option<usize>,
    n: usize,
    seed: u64,
    state_file: Option<&std::path::Path>,
    tol: &Tolerance,
) -> Result<Report, Failure> {
    let mut rng = seeded_rng(seed);
    let psi = match (state_file, dim) {
        (Some(path), dim) => {
            let psi = read_state(path)?;
            if let Some(dim) = dim.filter(|d| *d != psi.dim()) {
                return Err(input(format!("--dim {dim} disagrees with state file dimension {}", psi.dim())));
            }
            psi
        }
        (None, Some(dim)) => {
            if dim == 0 {
                return Err(input("--dim must be positive"));
            }
            StateVector::random(dim, &mut rng)
        }
        (None, None) => return Err(input("expand needs --dim or --state-file")),
    };
    let lam = construct(&psi, n, rng.random())?;
    let report = validate(&lam, tol);
    let payload = json!({
        "n": lam.n(),
        "dim": lam.dim(),
        "theta_log": lam.theta_log(),
        "checks": {
            "orthogonality": report.orthogonality,
            "equiamplitude": report.equiamplitude,
            "completeness": report.completeness,
        },
        "max_violation": report.max_violation(),
        "passed": report.all_passed(),
    });
    Ok(Report { payload, table: None, passed: report.all_passed() })
}

fn cmd_swap(dim: usize, n: usize, i: usize, j: usize, seed: u64, tol: &Tolerance) -> Result<Report, Failure> {
    if i == j {
        return Err(input(format!("invalid pair: i and j are both {i}")));
    }
    if dim < n + 1 {
        return Err(input(format!("swap needs dim >= n + 1 (dim {dim}, n {n})")));
    }
    let mut rng = seeded_rng(seed);
    let psi = StateVector::random(dim, &mut rng);
    let lam = construct(&psi, n, rng.random())?;
    // A single microstate has no partner; its class is trivially itself.
    let (residual, z_a, z_b) = if n == 1 {
        (0.0, None, None)
    } else {
        let triple = build_swap_triple(&lam, i, j, rng.random())?;
        (triple.composite_residual, Some(triple.z_a.norm()), Some(triple.z_b.norm()))
    };
    let forced = forced_equalities(&lam, rng.random())?;
    let passed = residual <= tol.rel && forced.single_class();
    let payload = json!({
        "n": n,
        "dim": dim,
        "i": i,
        "j": j,
        "residual": residual,
        "z_a_abs": z_a,
        "z_b_abs": z_b,
        "classes": forced.classes,
        "solution_dim": forced.solution_dim,
        "values": forced.values,
        "system_residual": forced.residual,
        "passed": passed,
    });
    Ok(Report { payload, table: None, passed })
}

fn cmd_prob(
    dim: usize,
    sizes: &[usize],
    seed: u64,
    rank: usize,
    trials: usize,
    embed: bool,
) -> Result<Report, Failure> {
    if dim == 0 {
        return Err(input("--dim must be positive"));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(input("ensemble sizes must be positive"));
    }
    if trials == 0 {
        return Err(input("--trials must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let p = random_projector(dim, rank, &mut rng)?;
    let psi = StateVector::random(dim, &mut rng);
    let mut rows = Vec::with_capacity(sizes.len());
    let mut passed = true;
    for &n in sizes {
        let row_seed = seed.wrapping_add(n as u64);
        let (c, unique, used_dim) = if embed {
            let (padded, state) = embed_for_count(&p, &psi, n)?;
            let c = count(&padded, &state, n, row_seed)?;
            (c, uniqueness_check(&padded, &state, n, trials, row_seed)?, padded.dim())
        } else {
            let c = count(&p, &psi, n, row_seed)?;
            (c, uniqueness_check(&p, &psi, n, trials, row_seed)?, dim)
        };
        let bound = 1.0 / n as f64;
        let ok = c.error() < bound && unique;
        passed &= ok;
        rows.push(json!({
            "n": n,
            "dim": used_dim,
            "m": c.m,
            "m_complement": c.m_complement,
            "cats": c.cats,
            "fraction": c.fraction(),
            "interval_low": c.interval.0,
            "interval_high": c.interval.1,
            "born": c.born,
            "error": c.error(),
            "bound": bound,
            "unique": unique,
            "passed": ok,
        }));
    }
    let payload = json!({
        "dim": dim,
        "projector_rank": rank,
        "trials": trials,
        "rows": rows,
        "passed": passed,
    });
    Ok(Report { payload, table: Some(rows), passed })
}

struct EprbArgs {
    state: PairState,
    alice: [Setting; 2],
    bob: [Setting; 2],
    phi: Setting,
    chi: Setting,
    n: Option<usize>,
    na: Option<usize>,
    nb: Option<usize>,
    pad: Option<usize>,
    seed: u64,
}

impl EprbArgs {
    fn spin(&self) -> StateVector {
        match self.state {
            PairState::Singlet => singlet_spin(),
            PairState::Product => tensor(&self.phi.eigenvector(Spin::Up), &self.chi.eigenvector(Spin::Up)),
        }
    }

    fn n(&self) -> Result<usize, Failure> {
        self.n.ok_or_else(|| input("this check needs --n"))
    }

    fn pairs(&self) -> Vec<(Setting, Setting)> {
        self.alice.iter().flat_map(|&a| self.bob.iter().map(move |&b| (a, b))).collect()
    }

    fn scenario(&self, pad: usize, n: usize) -> Result<EprbScenario, Failure> {
        let state = embed_spin_state(&self.spin(), pad)?;
        Ok(EprbScenario::new(state, pad, self.alice, self.bob, n, self.seed)?)
    }
}

fn cmd_eprb(args: &EprbArgs, check: EprbCheck, tol: &Tolerance) -> Result<Report, Failure> {
    let spin = args.spin();
    let (pad, report, table, passed) = match check {
        EprbCheck::Pi => {
            let n = args.n()?;
            let pad = match args.pad {
                Some(pad) => pad,
                None => marginal_pad(&spin, &args.alice, n)?,
            };
            let r = parameter_independence(&args.scenario(pad, n)?, tol)?;
            (Some(pad), serde_json::to_value(&r), None, r.passed)
        }
        EprbCheck::Oi => {
            let pad = args.pad.unwrap_or(0);
            let sc = args.scenario(pad, args.n.unwrap_or(1))?;
            let reports: Vec<_> = args.pairs().into_iter().map(|(a, b)| outcome_independence(&sc, a, b, tol)).collect();
            let all_factorize = reports.iter().all(|r| r.classification == Factorization::Factorizing);
            // An entangled state may still factorize at a particular pair.
            let passed = match args.state {
                PairState::Product => all_factorize,
                PairState::Singlet => !all_factorize,
            };
            (None, serde_json::to_value(&reports), None, passed)
        }
        EprbCheck::Chsh => {
            let n = args.n()?;
            let pad = match args.pad {
                Some(pad) => pad,
                None => required_pad(&spin, &args.pairs(), n)?,
            };
            let r = chsh(&args.scenario(pad, n)?)?;
            (Some(pad), serde_json::to_value(&r), None, r.within_bound == Some(true))
        }
        EprbCheck::Table => {
            let n = args.n()?;
            let (a, b) = (args.alice[0], args.bob[0]);
            let pad = match args.pad {
                Some(pad) => pad,
                None => required_pad(&spin, &[(a, b)], n)?,
            };
            let t = joint_table(&args.scenario(pad, n)?, a, b)?;
            let bound = 1.0 / n as f64;
            let passed = t.cells.iter().all(|c| (c.fraction - c.born).abs() < bound);
            let rows = t
                .cells
                .iter()
                .map(|c| {
                    json!({
                        "s": c.s,
                        "t": c.t,
                        "m": c.m,
                        "fraction": c.fraction,
                        "interval_low": c.interval.0,
                        "interval_high": c.interval.1,
                        "born": c.born,
                    })
                })
                .collect();
            (Some(pad), serde_json::to_value(&t), Some(rows), passed)
        }
        EprbCheck::ProductCount => {
            if args.state != PairState::Product {
                return Err(input("product-count needs --state product"));
            }
            let n_a = args.na.or(args.n).ok_or_else(|| input("product-count needs --na or --n"))?;
            let n_b = args.nb.or(args.n).ok_or_else(|| input("product-count needs --nb or --n"))?;
            let (a, b) = (args.alice[0], args.bob[0]);
            let (phi, chi) = (args.phi.eigenvector(Spin::Up), args.chi.eigenvector(Spin::Up));
            let (pad_a, pad_b) = match args.pad {
                Some(pad) => (pad, pad),
                None => (local_pad(&phi, a, n_a)?, local_pad(&chi, b, n_b)?),
            };
            let r = product_counting(&phi.embed(2 + pad_a)?, &chi.embed(2 + pad_b)?, a, b, n_a, n_b, args.seed, tol)?;
            let mut value = serde_json::to_value(&r);
            if let Ok(Value::Object(map)) = &mut value {
                map.insert("pad_a".into(), json!(pad_a));
                map.insert("pad_b".into(), json!(pad_b));
            }
            (None, value, None, r.passed)
        }
    };
    let report = report.map_err(|e| Failure::Invariant(e.to_string()))?;
    let degrees = |s: &Setting| s.degrees();
    let mut payload = Map::new();
    payload.insert("check".into(), serde_json::to_value(check_name(check)).expect("string"));
    payload.insert("state".into(), json!(state_name(args.state)));
    payload.insert(
        "settings".into(),
        json!({
            "a": degrees(&args.alice[0]),
            "aprime": degrees(&args.alice[1]),
            "b": degrees(&args.bob[0]),
            "bprime": degrees(&args.bob[1]),
        }),
    );
    if args.state == PairState::Product {
        payload.insert("factors".into(), json!({ "phi": args.phi.degrees(), "chi": args.chi.degrees() }));
    }
    payload.insert("n".into(), json!(args.n));
    payload.insert("pad".into(), json!(pad));
    payload.insert("seed".into(), json!(args.seed));
    payload.insert("report".into(), report);
    payload.insert("passed".into(), json!(passed));
    Ok(Report { payload: Value::Object(payload), table, passed })
}

fn check_name(check: EprbCheck) -> &'static str {
    match check {
        EprbCheck::Pi => "pi",
        EprbCheck::Oi => "oi",
        EprbCheck::Chsh => "chsh",
        EprbCheck::Table => "table",
        EprbCheck::ProductCount => "product-count",
    }
}

fn state_name(state: PairState) -> &'static str {
    match state {
        PairState::Singlet => "singlet",
        PairState::Product => "product",
    }
}

/// Rounds every float to 12 significant digits.
fn round_floats(value: &mut Value) {
    match value {
        Value::Number(num) if !num.is_i64() && !num.is_u64() => {
            if let Some(x) = num.as_f64() {
                let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
                if let Some(r) = serde_json::Number::from_f64(rounded) {
                    *num = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn csv_cell(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn emit(report: &Report, format: Format) -> Result<(), String> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match format {
        Format::Json => {
            let mut payload = report.payload.clone();
            round_floats(&mut payload);
            let text = serde_json::to_string_pretty(&payload).map_err(|e| e.to_string())?;
            writeln!(out, "{text}").map_err(|e| e.to_string())
        }
        Format::Csv => {
            let rows = report.table.as_ref().ok_or("no table to write")?;
            let mut writer = csv::Writer::from_writer(out);
            for (k, row) in rows.iter().enumerate() {
                let mut row = row.clone();
                round_floats(&mut row);
                let Value::Object(map) = row else { return Err("table row is not an object".into()) };
                if k == 0 {
                    writer.write_record(map.keys()).map_err(|e| e.to_string())?;
                }
                writer.write_record(map.values().map(csv_cell)).map_err(|e| e.to_string())?;
            }
            writer.flush().map_err(|e| e.to_string())
        }
    }
}
