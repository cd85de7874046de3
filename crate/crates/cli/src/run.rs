//! Subcommand dispatch and artifact writing.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use yosida::estimates::{
    apriori_bound, energy_identity_residual, family_bounds, lambda_convergence,
    lipschitz_dependence, write_reports_csv, EstimateReport, FamilyRow,
};
use yosida::noise::{path_seed, sample_path};
use yosida::operators::{check_assumptions, check_hemicontinuity, TOL_ASSUME};
use yosida::{integrator, Scheme};

use crate::config::{self, ConfigError, Experiment};

/// The hemicontinuity scan evaluates 4097 points per sample.
const HEMI_SAMPLES: usize = 64;
/// Relative tolerance of the per-path energy identity.
const ENERGY_IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckAssumptions,
    Solve,
    Converge,
    Estimates,
}

impl Command {
    pub const ALL: [Command; 4] = [
        Command::CheckAssumptions,
        Command::Solve,
        Command::Converge,
        Command::Estimates,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::CheckAssumptions => "check-assumptions",
            Command::Solve => "solve",
            Command::Converge => "converge",
            Command::Estimates => "estimates",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

impl Options {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        Options {
            config: config.into(),
            jobs: 1,
            out: None,
            seed_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    /// Directory holding the artifacts of this run.
    pub dir: PathBuf,
    pub summary: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Solver(#[from] yosida::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Solver(e) if e.is_numerical() => 3,
            RunError::Io { .. } => 1,
            _ => 2,
        }
    }
}

struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn write(
        &self,
        name: &str,
        f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let io = |source| RunError::Io {
            path: path.clone(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io)?);
        f(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

pub fn execute(cmd: Command, opts: &Options) -> Result<Outcome, RunError> {
    let mut exp = config::load(&opts.config)?;
    if let Some(seed) = opts.seed_override {
        exp.config.run.seed = seed;
    }
    let base = opts
        .out
        .clone()
        .unwrap_or_else(|| exp.config.output.dir.clone());
    let dir = base.join(cmd.name());
    fs::create_dir_all(&dir).map_err(|source| RunError::Io {
        path: dir.clone(),
        source,
    })?;
    let art = Artifacts { dir: dir.clone() };

    let mut summary = String::new();
    let _ = writeln!(summary, "command {}", cmd.name());
    let pass = match cmd {
        Command::CheckAssumptions => run_check(&exp, &art, &mut summary)?,
        Command::Solve => run_solve(&exp, &art, &mut summary)?,
        Command::Converge => run_converge(&exp, opts.jobs, &art, &mut summary)?,
        Command::Estimates => run_estimates(&exp, opts.jobs, &art, &mut summary)?,
    };
    let _ = writeln!(summary, "result {}", verdict(pass));
    art.write("summary.txt", |w| w.write_all(summary.as_bytes()))?;
    art.write("manifest.txt", |w| {
        w.write_all(manifest(&exp, cmd).as_bytes())
    })?;
    Ok(Outcome { pass, dir, summary })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Everything but the last line is a function of the config and seed.
fn manifest(exp: &Experiment, cmd: Command) -> String {
    let hash = Sha256::digest(exp.source.as_bytes());
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    let run = &exp.config.run;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!(
        "yosida-cli {}\nyosida {}\ncommand {}\nconfig_sha256 {hex}\nseed {}\npaths {}\ndt {:e}\nlambdas {:?}\ntimestamp {stamp}\n",
        env!("CARGO_PKG_VERSION"),
        yosida::VERSION,
        cmd.name(),
        run.seed,
        run.paths,
        run.dt,
        run.lambdas,
    )
}

fn run_check(exp: &Experiment, art: &Artifacts, summary: &mut String) -> Result<bool, RunError> {
    let run = &exp.config.run;
    let rep = check_assumptions(&exp.pair, &exp.triple, run.samples, run.seed)?;
    let hemi = check_hemicontinuity(
        &exp.pair,
        &exp.triple,
        run.samples.min(HEMI_SAMPLES),
        run.seed,
    )?;
    let rows = [
        (
            "joint_monotonicity",
            rep.min_joint_monotonicity_margin,
            rep.worst_scaled_joint,
            rep.worst_scaled_joint >= -TOL_ASSUME,
        ),
        (
            "coercivity",
            rep.min_coercivity_margin,
            rep.worst_scaled_coercivity,
            rep.worst_scaled_coercivity >= -TOL_ASSUME,
        ),
        (
            "growth",
            -rep.max_growth_violation,
            -rep.worst_scaled_growth,
            rep.worst_scaled_growth <= TOL_ASSUME,
        ),
        ("hemicontinuity", -hemi.worst_jump, f64::NAN, hemi.pass),
    ];
    art.write("assumptions.csv", |w| {
        writeln!(w, "check,margin,scaled_margin,tolerance,samples,seed,pass")?;
        for (name, margin, scaled, pass) in rows {
            let samples = if name == "hemicontinuity" {
                hemi.samples
            } else {
                rep.samples
            };
            writeln!(
                w,
                "{name},{margin:e},{scaled:e},{TOL_ASSUME:e},{samples},{},{pass}",
                run.seed
            )?;
        }
        Ok(())
    })?;
    for (name, margin, _, pass) in rows {
        let _ = writeln!(
            summary,
            "{name:<20} margin {margin:>12.5e}  {}",
            verdict(pass)
        );
    }
    Ok(rep.pass && hemi.pass)
}

fn run_solve(exp: &Experiment, art: &Artifacts, summary: &mut String) -> Result<bool, RunError> {
    let run = &exp.config.run;
    let noise = sample_path(path_seed(run.seed, 0), run.dt, exp.steps, exp.pair.modes())?;
    art.write("noise.bin", |w| noise.write_binary(w))?;
    let opts = exp.solver_options();
    let lambdas: Vec<Option<f64>> = match exp.scheme {
        Scheme::ImplicitReference => vec![None],
        _ => run.lambdas.iter().copied().map(Some).collect(),
    };
    let mut rows = Vec::new();
    let mut pass = true;
    for (j, lambda) in lambdas.iter().enumerate() {
        let path = integrator::solve(
            exp.scheme,
            &exp.pair,
            &exp.triple,
            lambda.unwrap_or(0.0),
            &run.x0,
            &noise,
            &opts,
        )?;
        let name = match lambda {
            Some(_) => format!("path_lambda_{j}"),
            None => "path_reference".to_string(),
        };
        art.write(&format!("{name}.csv"), |w| path.write_csv(w))?;
        art.write(&format!("{name}.bin"), |w| path.write_binary(w))?;
        let residual = energy_identity_residual(&path, &exp.triple)?;
        let scale = path
            .states
            .iter()
            .map(|x| exp.triple.h_norm(x).map(|v| v * v))
            .try_fold(1f64, |m, v| v.map(|v| m.max(v)))?;
        let ok = residual <= ENERGY_IDENTITY_TOL * scale;
        pass &= ok;
        let final_norm = exp.triple.h_norm(path.final_state())?;
        let _ = writeln!(
            summary,
            "{name:<16} lambda {:>10}  |X(T)|_H {final_norm:.6e}  energy identity {residual:.3e}  picard {}  {}",
            lambda.map_or("-".to_string(), |l| format!("{l:e}")),
            path.picard_iterations,
            verdict(ok)
        );
        rows.push((
            name,
            *lambda,
            final_norm,
            residual,
            path.picard_iterations,
            ok,
        ));
    }
    art.write("solve.csv", |w| {
        writeln!(
            w,
            "file,lambda,final_h_norm,energy_identity_residual,picard_iterations,pass"
        )?;
        for (name, lambda, norm, res, it, ok) in &rows {
            let l = lambda.map_or(String::new(), |l| format!("{l:e}"));
            writeln!(w, "{name},{l},{norm:e},{res:e},{it},{ok}")?;
        }
        Ok(())
    })?;
    Ok(pass)
}

fn run_converge(
    exp: &Experiment,
    jobs: usize,
    art: &Artifacts,
    summary: &mut String,
) -> Result<bool, RunError> {
    let cfg = exp.mc_config(jobs);
    let table = lambda_convergence(
        &exp.pair,
        &exp.triple,
        &exp.config.run.lambdas,
        &cfg,
        &exp.convergence_options(),
    )?;
    art.write("convergence.csv", |w| table.write_csv(w))?;
    let names = [
        "resolvent_defect",
        "sup_error",
        "drift_residual",
        "diffusion_residual",
    ];
    let _ = writeln!(summary, "drift residual norm: {}", table.drift_norm);
    for row in &table.rows {
        let c = row.columns();
        let _ = writeln!(
            summary,
            "lambda {:<10e} defect {:.4e}  sup error {:.4e}  drift {:.4e}  diffusion {:.4e}",
            row.lambda, c[0], c[1], c[2], c[3]
        );
    }
    for ((name, ratio), monotone) in names.iter().zip(table.ratios).zip(table.monotone) {
        let _ = writeln!(summary, "{name:<20} ratio {ratio:.4e}  monotone {monotone}");
    }
    let _ = writeln!(
        summary,
        "defect identity error {:.3e}",
        table.defect_identity_error
    );
    if let Some(r) = table.target_ratio {
        let _ = writeln!(summary, "target ratio {r:e}");
    }
    Ok(table.pass)
}

fn run_estimates(
    exp: &Experiment,
    jobs: usize,
    art: &Artifacts,
    summary: &mut String,
) -> Result<bool, RunError> {
    let run = &exp.config.run;
    let cfg = exp.mc_config(jobs);
    let mut reports: Vec<EstimateReport> = Vec::new();
    for &lambda in &run.lambdas {
        reports.extend(apriori_bound(&exp.pair, &exp.triple, lambda, &cfg)?);
    }
    let family = family_bounds(&exp.pair, &exp.triple, &run.lambdas, &cfg)?;
    art.write("family.csv", |w| write_family(w, &family))?;
    reports.extend(family.iter().flat_map(|r| r.reports.iter().cloned()));

    let mut pass = true;
    if let Some(alt) = &run.x0_alt {
        let lip = lipschitz_dependence(&exp.pair, &exp.triple, &run.x0, alt, &cfg)?;
        art.write("lipschitz.csv", |w| lip.write_csv(w))?;
        pass &= lip.pass;
        reports.push(lip.worst);
    }
    art.write("estimates.csv", |w| write_reports_csv(w, &reports))?;
    for r in &reports {
        pass &= r.pass;
        let _ = writeln!(
            summary,
            "{:<28} t {:<8.4} lambda {:<10e} lhs {:>12.5e}  rhs {:>12.5e}  margin {:>12.5e}  {}",
            r.name,
            r.t,
            r.lambda,
            r.lhs,
            r.rhs,
            r.margin,
            verdict(r.pass)
        );
    }
    Ok(pass)
}

fn write_family(w: &mut dyn Write, rows: &[FamilyRow]) -> std::io::Result<()> {
    writeln!(
        w,
        "lambda,sup_second_moment,sup_second_moment_time,v_energy,scaled_yosida_energy,yosida_energy,diffusion_energy,cap_sup,cap_v,cap_scaled_yosida,cap_diffusion"
    )?;
    for r in rows {
        writeln!(
            w,
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.lambda,
            r.sup_second_moment,
            r.sup_second_moment_time,
            r.v_energy,
            r.scaled_yosida_energy,
            r.yosida_energy,
            r.diffusion_energy,
            r.caps[0],
            r.caps[1],
            r.caps[2],
            r.caps[3]
        )?;
    }
    Ok(())
}

/// Output directory of `cmd` under `base`.
pub fn artifact_dir(base: &Path, cmd: Command) -> PathBuf {
    base.join(cmd.name())
}
