//! Command-line front end: simulate extension orbits, search equilibria,
//! continue critical-manifold components, classify stability, verify the
//! topological ledger, and run the model smoke checks.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numeric error.

use clap::{Parser, Subcommand};
use holonome::critical::{self, NEWTON_MAX_ITER, NEWTON_TOL};
use holonome::flow::{self, IntegratorOptions, Method};
use holonome::geometry::{self, ScalarField, VectorField};
use holonome::mechsys::{MechSystem, PhasePoint};
use holonome::{stability, topology, Error};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "holonome",
    version,
    about = "Non-holonomic mechanics via the auxiliary constrained-Hamiltonian extension"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the extension flow and write a trajectory CSV.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Initial configuration, comma-separated.
        #[arg(long)]
        q: String,
        /// Initial momentum, comma-separated; defaults to zero.
        #[arg(long)]
        p: Option<String>,
        /// Project the initial momentum onto the physical leaf first.
        #[arg(long)]
        project_leaf: bool,
        #[arg(long, default_value_t = 10.0)]
        t_end: f64,
        /// rk45 (adaptive, default) or rk4 (fixed step).
        #[arg(long, default_value = "rk45")]
        method: String,
        #[arg(long, default_value_t = 1e-9)]
        rel_tol: f64,
        #[arg(long, default_value_t = 1e-12)]
        abs_tol: f64,
        /// Fixed step for rk4.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multistart search for the critical points of U, classified against C_Q.
    Equilibria {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 6)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue critical-manifold components from one or more seeds.
    Manifold {
        #[arg(long)]
        model: PathBuf,
        /// Seed configuration, comma-separated; repeatable.
        #[arg(long, required = true)]
        seed: Vec<String>,
        #[arg(long, default_value_t = 1e-2)]
        step: f64,
        #[arg(long, default_value_t = 100_000)]
        max_points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linearize at an equilibrium and run the resonance diagnostics.
    Stability {
        #[arg(long)]
        model: PathBuf,
        /// Equilibrium configuration on C_Q, comma-separated.
        #[arg(long)]
        q: String,
        #[arg(long, default_value_t = 3)]
        r_max: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the Poincare-polynomial ledger from a component report.
    Topology {
        /// JSON file with ambient_betti and components.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Projector/bracket/flag/conservation smoke suite for a model.
    Check {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    model: Option<String>,
    params: Vec<(String, f64)>,
    seeds: Vec<Vec<f64>>,
    tool_version: &'static str,
    wall_time_ms: u128,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Syntax { .. }
        | Error::UnknownIdentifier { .. }
        | Error::Config { .. }
        | Error::Dimension(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::OffCritical { .. } => 2,
        _ => 3,
    }
}

fn parse_vec(text: &str, n: usize, what: &str) -> Result<DVector<f64>, Error> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|_| Error::Config {
        line: None,
        msg: format!("{what}: expected comma-separated numbers, got `{text}`"),
    })?;
    if vals.len() != n {
        return Err(Error::Dimension(format!(
            "{what} has {} entries, model dimension is {n}",
            vals.len()
        )));
    }
    Ok(DVector::from_vec(vals))
}

fn load_model(path: &Path) -> Result<MechSystem, Error> {
    let text = std::fs::read_to_string(path)?;
    MechSystem::load_system(&text)
}

fn write_manifest(
    out: &Path,
    argv: &[String],
    sys: Option<&MechSystem>,
    model: Option<&Path>,
    seeds: Vec<Vec<f64>>,
    started: Instant,
) -> Result<(), Error> {
    let manifest = RunManifest {
        command: argv.to_vec(),
        model: model.map(|p| p.display().to_string()),
        params: sys
            .map(|s| {
                s.param_names
                    .iter()
                    .cloned()
                    .zip(s.param_values.iter().cloned())
                    .collect()
            })
            .unwrap_or_default(),
        seeds,
        tool_version: env!("CARGO_PKG_VERSION"),
        wall_time_ms: started.elapsed().as_millis(),
    };
    let path = manifest_path(out);
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    if let Ok(threads) = std::env::var("HOLONOME_THREADS") {
        if let Ok(nt) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(nt.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let started = Instant::now();
    match run(cli, &argv, started) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn run(cli: Cli, argv: &[String], started: Instant) -> Result<(), Error> {
    match cli.command {
        Command::Simulate {
            model,
            q,
            p,
            project_leaf,
            t_end,
            method,
            rel_tol,
            abs_tol,
            dt,
            out,
        } => {
            let sys = load_model(&model)?;
            let q = parse_vec(&q, sys.n, "--q")?;
            let p = match p {
                Some(text) => parse_vec(&text, sys.n, "--p")?,
                None => DVector::zeros(sys.n),
            };
            let mut x0 = PhasePoint { q, p };
            if project_leaf {
                x0 = sys.physical_leaf_project(&x0)?;
            }
            let method = match method.as_str() {
                "rk45" => Method::Rk45,
                "rk4" => Method::Rk4,
                other => {
                    return Err(Error::Config {
                        line: None,
                        msg: format!("unknown method `{other}` (rk45 or rk4)"),
                    })
                }
            };
            let opts = IntegratorOptions {
                method,
                dt,
                rel_tol,
                abs_tol,
                t_end,
                ..Default::default()
            };
            let traj = flow::simulate_extension(&sys, &x0, &opts)?;
            let mut buf = Vec::new();
            flow::export_phase_csv(&sys, &traj, &mut buf)?;
            std::fs::write(&out, buf)?;
            let seeds = vec![
                x0.q.iter().cloned().collect(),
                x0.p.iter().cloned().collect(),
            ];
            write_manifest(&out, argv, Some(&sys), Some(&model), seeds, started)?;
            println!(
                "wrote {} samples over t in [0, {}] to {}",
                traj.times.len(),
                t_end,
                out.display()
            );
            Ok(())
        }
        Command::Equilibria { model, grid, out } => {
            let sys = load_model(&model)?;
            let points = critical::find_u_critical_points(&sys, grid)?;
            std::fs::write(&out, serde_json::to_string_pretty(&points)?)?;
            write_manifest(&out, argv, Some(&sys), Some(&model), Vec::new(), started)?;
            println!("found {} critical points of U -> {}", points.len(), out.display());
            Ok(())
        }
        Command::Manifold {
            model,
            seed,
            step,
            max_points,
            out,
        } => {
            let sys = load_model(&model)?;
            let mut seeds = Vec::new();
            for s in &seed {
                seeds.push(parse_vec(s, sys.n, "--seed")?);
            }
            #[derive(Serialize)]
            struct ComponentRecord {
                model: String,
                params: Vec<(String, f64)>,
                component_id: usize,
                index: usize,
                closed: bool,
                arc_length: f64,
                nongeneric_boundary: bool,
                points: Vec<Vec<f64>>,
                residuals: Vec<f64>,
            }
            let params: Vec<(String, f64)> = sys
                .param_names
                .iter()
                .cloned()
                .zip(sys.param_values.iter().cloned())
                .collect();
            let mut records = Vec::new();
            for (id, s) in seeds.iter().enumerate() {
                let refined = critical::newton_refine(&sys, s, NEWTON_TOL, NEWTON_MAX_ITER)?;
                let comp = critical::continue_component(&sys, &refined, step, max_points)?;
                records.push(ComponentRecord {
                    model: sys.name.clone(),
                    params: params.clone(),
                    component_id: id,
                    index: comp.index,
                    closed: comp.closed,
                    arc_length: comp.arc_length,
                    nongeneric_boundary: comp.nongeneric_boundary,
                    points: comp.points.iter().map(|p| p.q.clone()).collect(),
                    residuals: comp.points.iter().map(|p| p.residual).collect(),
                });
            }
            std::fs::write(&out, serde_json::to_string_pretty(&records)?)?;
            // flat CSV variant next to the JSON
            let mut csv = String::from("component_id,point_index");
            for i in 1..=sys.n {
                csv.push_str(&format!(",q_{i}"));
            }
            csv.push_str(",residual\n");
            for rec in &records {
                for (pi, (point, res)) in rec.points.iter().zip(&rec.residuals).enumerate() {
                    csv.push_str(&format!("{},{}", rec.component_id, pi));
                    for v in point {
                        csv.push_str(&format!(",{v}"));
                    }
                    csv.push_str(&format!(",{res}\n"));
                }
            }
            std::fs::write(out.with_extension("csv"), csv)?;
            write_manifest(
                &out,
                argv,
                Some(&sys),
                Some(&model),
                seeds.iter().map(|s| s.iter().cloned().collect()).collect(),
                started,
            )?;
            for rec in &records {
                println!(
                    "component {}: index {}, {} points, closed = {}, arc length {:.6}",
                    rec.component_id,
                    rec.index,
                    rec.points.len(),
                    rec.closed,
                    rec.arc_length
                );
            }
            Ok(())
        }
        Command::Stability { model, q, r_max, out } => {
            let sys = load_model(&model)?;
            let q = parse_vec(&q, sys.n, "--q")?;
            let report = stability::stability_report(&sys, &q, r_max)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            write_manifest(
                &out,
                argv,
                Some(&sys),
                Some(&model),
                vec![q.iter().cloned().collect()],
                started,
            )?;
            println!(
                "classification: {:?}; frequencies: {:?}; index {}",
                report.classification, report.frequencies, report.index
            );
            Ok(())
        }
        Command::Topology { report, out } => {
            let text = std::fs::read_to_string(&report)?;
            let input: topology::TopologyInput = serde_json::from_str(&text)?;
            let verdict = topology::verdict(&input);
            let json = serde_json::to_string_pretty(&verdict)?;
            match &verdict.identity {
                topology::QPolynomialOutcome::Holds { q } => {
                    if q.is_zero() {
                        println!("identity holds, Q = 0");
                    } else {
                        println!("identity holds, Q coefficients {:?}", q.coeffs);
                    }
                }
                topology::QPolynomialOutcome::Violation { reason, .. } => {
                    println!("violation: {reason}");
                }
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, json)?;
                    write_manifest(&path, argv, None, None, Vec::new(), started)?;
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Check { model, out } => {
            let sys = load_model(&model)?;
            let report = run_checks(&sys)?;
            let all_passed = report.iter().all(|g| g.passed);
            for g in &report {
                println!("[{}] {}: {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail);
            }
            if let Some(path) = out {
                #[derive(Serialize)]
                struct CheckReport<'a> {
                    passed: bool,
                    groups: &'a [CheckGroup],
                }
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&CheckReport {
                        passed: all_passed,
                        groups: &report,
                    })?,
                )?;
                write_manifest(&path, argv, Some(&sys), Some(&model), Vec::new(), started)?;
            }
            if !all_passed {
                return Err(Error::NonFinite("model checks failed".into()));
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct CheckGroup {
    name: String,
    passed: bool,
    detail: String,
}

fn random_q(sys: &MechSystem, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(sys.n, |i, _| {
        if sys.periodic[i] {
            rng.gen_range(0.0..std::f64::consts::TAU)
        } else {
            rng.gen_range(-1.5..1.5)
        }
    })
}

/// Smoke suite: projector identities, phase-projector identities, the
/// generalized bracket against the extension field, the flag of W, and
/// short-horizon conservation plus descent monotonicity.
fn run_checks(sys: &MechSystem) -> Result<Vec<CheckGroup>, Error> {
    let mut groups = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x686f6c6f);

    // 1. configuration projectors
    let mut worst = 0.0f64;
    let mut rank_ok = true;
    for _ in 0..50 {
        let q = random_q(sys, &mut rng);
        let pp = sys.projectors(&q)?;
        let (idem, compl, sym) = pp.residuals();
        worst = worst.max(idem).max(compl).max(sym);
        rank_ok &= pp.rank() == sys.k();
    }
    groups.push(CheckGroup {
        name: "projectors".into(),
        passed: worst < 1e-10 && rank_ok,
        detail: format!("max residual {worst:.3e}, rank k = {rank_ok}"),
    });

    // 2. phase-space projector
    let j2n = geometry::standard_symplectic(sys.n);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = PhasePoint {
            q: random_q(sys, &mut rng),
            p: DVector::from_fn(sys.n, |_, _| rng.gen_range(-2.0..2.0)),
        };
        let asm = sys.assemble(&x)?;
        worst = worst.max((&asm.pi_v * &asm.pi_v - &asm.pi_v).abs().max());
        worst = worst.max((&asm.pi_v * &j2n - &j2n * asm.pi_v.transpose()).abs().max());
    }
    groups.push(CheckGroup {
        name: "phase projector".into(),
        passed: worst < 1e-9,
        detail: format!("max idempotence/skew residual {worst:.3e}"),
    });

    // 3. generalized bracket vs extension field
    struct HamField<'a> {
        sys: &'a MechSystem,
    }
    impl ScalarField for HamField<'_> {
        fn dim(&self) -> usize {
            2 * self.sys.n
        }
        fn eval(&self, x: &[f64]) -> holonome::Result<f64> {
            self.sys.hamiltonian(&PhasePoint::from_flat(x))
        }
        fn gradient(&self, x: &[f64]) -> holonome::Result<DVector<f64>> {
            let (dq, dp) = self.sys.grad_hamiltonian(&PhasePoint::from_flat(x))?;
            let n = self.sys.n;
            let mut g = DVector::zeros(2 * n);
            g.rows_mut(0, n).copy_from(&dq);
            g.rows_mut(n, n).copy_from(&dp);
            Ok(g)
        }
    }
    struct CoordField {
        dim: usize,
        idx: usize,
    }
    impl ScalarField for CoordField {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, x: &[f64]) -> holonome::Result<f64> {
            Ok(x[self.idx])
        }
        fn gradient(&self, x: &[f64]) -> holonome::Result<DVector<f64>> {
            let mut g = DVector::zeros(x.len());
            g[self.idx] = 1.0;
            Ok(g)
        }
    }
    let omega_inv = geometry::standard_symplectic(sys.n)
        .try_inverse()
        .expect("symplectic matrix invertible");
    let ham = HamField { sys };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = PhasePoint {
            q: random_q(sys, &mut rng),
            p: DVector::from_fn(sys.n, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let asm = sys.assemble(&x)?;
        let field = sys.extension_field(&x)?;
        let flat: Vec<f64> = x.flat().iter().cloned().collect();
        for idx in 0..2 * sys.n {
            let coord = CoordField { dim: 2 * sys.n, idx };
            let vb = geometry::v_bracket(&ham, &coord, &asm.pi_v, &omega_inv, &flat)?;
            worst = worst.max((vb - field[idx]).abs());
        }
    }
    groups.push(CheckGroup {
        name: "generalized bracket".into(),
        passed: worst < 1e-6,
        detail: format!("max |{{H, x^i}}_V - field_i| = {worst:.3e}"),
    });

    // 4. flag of the constraint distribution W (spanned by rho columns)
    let q0 = random_q(sys, &mut rng);
    let pp = sys.projectors(&q0)?;
    let cols: Vec<usize> = {
        // pick k independent columns of rho by greedy rank growth
        let mut chosen: Vec<usize> = Vec::new();
        for j in 0..sys.n {
            let mut trial = chosen.clone();
            trial.push(j);
            let cols: Vec<DVector<f64>> = trial.iter().map(|&c| pp.rho.column(c).into_owned()).collect();
            let m = DMatrix::from_fn(sys.n, cols.len(), |r, cc| cols[cc][r]);
            if holonome::linalg::rank(&m) == trial.len() {
                chosen = trial;
            }
            if chosen.len() == sys.k() {
                break;
            }
        }
        chosen
    };
    struct RhoColumn<'a> {
        sys: &'a MechSystem,
        col: usize,
    }
    impl VectorField for RhoColumn<'_> {
        fn dim(&self) -> usize {
            self.sys.n
        }
        fn eval(&self, q: &[f64]) -> holonome::Result<DVector<f64>> {
            let pp = self.sys.projectors(&DVector::from_column_slice(q))?;
            Ok(pp.rho.column(self.col).into_owned())
        }
    }
    let fields: Vec<RhoColumn> = cols.iter().map(|&col| RhoColumn { sys, col }).collect();
    let field_refs: Vec<&dyn VectorField> = fields.iter().map(|f| f as &dyn VectorField).collect();
    let flag = geometry::flag(&field_refs, q0.as_slice(), 4)?;
    groups.push(CheckGroup {
        name: "constraint flag".into(),
        passed: flag.ranks.first() == Some(&sys.k()),
        detail: format!(
            "ranks {:?}, degree {}, chow {}",
            flag.ranks, flag.degree, flag.chow
        ),
    });

    // 5. conservation over a short horizon
    let x0 = sys.physical_leaf_project(&PhasePoint {
        q: random_q(sys, &mut rng),
        p: DVector::from_fn(sys.n, |_, _| rng.gen_range(-1.0..1.0)),
    })?;
    let traj = flow::simulate_extension(
        sys,
        &x0,
        &IntegratorOptions {
            t_end: 5.0,
            ..Default::default()
        },
    )?;
    let h_drift = traj.monitor_drift("H").unwrap_or(f64::INFINITY);
    let l_drift = traj.monitor_drift("L").unwrap_or(f64::INFINITY);
    groups.push(CheckGroup {
        name: "conservation".into(),
        passed: h_drift < 1e-7 && l_drift < 1e-7,
        detail: format!("H drift {h_drift:.3e}, L drift {l_drift:.3e} over t in [0, 5]"),
    });

    // 6. descent monotonicity
    let traj = flow::descent_flow_q(
        sys,
        &random_q(sys, &mut rng),
        &IntegratorOptions {
            t_end: 20.0,
            ..Default::default()
        },
    )?;
    let u = traj.monitor("U").unwrap_or(&[]);
    let worst_rise = u
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    groups.push(CheckGroup {
        name: "descent monotonicity".into(),
        passed: worst_rise <= 1e-12,
        detail: format!("max U increase per step {worst_rise:.3e}"),
    });

    Ok(groups)
}
