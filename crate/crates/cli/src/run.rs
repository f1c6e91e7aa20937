//! Subcommands and their mapping onto `hartree-core` operations.

use std::path::PathBuf;

use clap::ValueEnum;
use hartree_core::feynman_kac::{cgf_mc, max_stable_step, FkSolver};
use hartree_core::grid::{GridFunction, GridSpec, Role};
use hartree_core::hamiltonians::{heuristic_bridge, mollified_ilt_zero, pair_energy, scaled_pair_energy, trap_energy, Mollifier};
use hartree_core::montecarlo::{fingerprint, free_energy, tilted_free_energy, weighted_mean_occupation, McConfig};
use hartree_core::paths::{mean_occupation, sample_paths};
use hartree_core::potentials::{alpha_of_v, rescale_pair, trap_on_grid_floored, PairSpec, RadialPotential};
use hartree_core::rate_function::{evaluate_j, j_lower_bound};
use hartree_core::variational::{solve_chi_otimes, solve_gp, solve_hartree, VarOptions, VariationalResult};
use serde::Serialize;

use crate::config::{ExperimentConfig, TargetConfig};
use crate::output::{Results, RunWriter};
use crate::{ConfigError, Context, RunError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Sample one path ensemble and its mean occupation.
    Sample,
    /// Trap, pair and intersection-local-time energies of sampled ensembles.
    Energies,
    /// Cumulant generating functional of the configured tilt (PDE and MC).
    Cgf,
    /// Rate function of the configured target density.
    Rate,
    /// The variational formula with the configured tilt.
    Chi,
    /// Gross-Pitaevskii ground state.
    Gp,
    /// Hartree product-state energies over `n_list`.
    Hartree,
    /// Monte Carlo free energy over `n_list`.
    FreeEnergy,
    /// Monte Carlo tilted free energy over `n_list` against the variational value.
    Tilted,
    /// Weighted mean occupation against the variational minimizer over `n_list`.
    Lln,
    /// Variational value against Gross-Pitaevskii over `beta_list`.
    TrendGp,
    /// Hartree energies against Gross-Pitaevskii over `n_list`.
    TrendHartree,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        use Experiment::*;
        match self {
            Sample => "sample",
            Energies => "energies",
            Cgf => "cgf",
            Rate => "rate",
            Chi => "chi",
            Gp => "gp",
            Hartree => "hartree",
            FreeEnergy => "free-energy",
            Tilted => "tilted",
            Lln => "lln",
            TrendGp => "trend-gp",
            TrendHartree => "trend-hartree",
        }
    }
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub results: Results,
}

#[derive(Serialize)]
struct FingerprintKey<'a> {
    subcommand: Experiment,
    version: &'static str,
    config: &'a serde_json::Value,
}

/// The config as stored in `results.json`: everything except the output
/// location, which does not affect any number.
fn config_record(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    value.as_object_mut().expect("config is a table").remove("output");
    value
}

fn invalid(field: &str, message: impl std::fmt::Display) -> RunError {
    RunError::Config(ConfigError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    })
}

/// Runs `experiment` and writes `<output>/<name>-<fingerprint prefix>/`.
pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let plan = Plan::new(experiment, cfg)?;
    let record = config_record(cfg);
    let fp = fingerprint(&FingerprintKey {
        subcommand: experiment,
        version: env!("CARGO_PKG_VERSION"),
        config: &record,
    });
    let dir = cfg.output.join(format!("{}-{}", experiment.name(), &fp[..12]));
    let mut out = RunWriter::create(dir)?;
    plan.execute(&mut out)?;
    let (dir, results) = out.finish(experiment.name(), fp, record)?;
    Ok(RunOutput { dir, results })
}

/// Validated inputs shared by the subcommands.
struct Plan<'a> {
    experiment: Experiment,
    cfg: &'a ExperimentConfig,
    grid: GridSpec,
    dt_pde: f64,
    pair: Option<PairSpec>,
}

impl<'a> Plan<'a> {
    /// Checks every precondition of the selected subcommand up front.
    fn new(experiment: Experiment, cfg: &'a ExperimentConfig) -> Result<Self, RunError> {
        let grid = cfg.grid_spec()?;
        let dt_pde = cfg.dt_pde.unwrap_or_else(|| max_stable_step(&grid));
        let pair = cfg.pair_spec()?;
        let plan = Self {
            experiment,
            cfg,
            grid,
            dt_pde,
            pair,
        };
        let pde = || FkSolver::new(grid, cfg.beta, &cfg.init, dt_pde).map(|_| ()).map_err(|e| invalid("dt_pde", e));
        use Experiment::*;
        match experiment {
            Sample => {
                cfg.require_n_list()?;
            }
            Energies => {
                cfg.require_n_list()?;
                cfg.require_pair()?;
                Mollifier::new(cfg.dimension, plan.epsilon(), grid.spacing()).map_err(|e| invalid("epsilon", e))?;
            }
            Cgf => {
                pde()?;
                if cfg.replicas < 100 {
                    return Err(invalid("replicas", "the Monte Carlo check needs at least 100"));
                }
            }
            Rate => {
                if let TargetConfig::Tilted = cfg.rate.target {
                    pde()?;
                }
            }
            Chi => {
                plan.alpha()?;
                pde()?;
            }
            Gp => {
                plan.alpha()?;
            }
            Hartree | TrendHartree => {
                let pair = cfg.require_pair()?;
                for &n in cfg.require_n_list()? {
                    plan.hartree_potential(pair, n)?;
                }
                if experiment == TrendHartree {
                    alpha_of_v(&pair).map_err(|e| invalid("dimension", e))?;
                }
            }
            FreeEnergy | Tilted | Lln => {
                for &n in cfg.require_n_list()? {
                    plan.mc_config(n).validate().map_err(|e| invalid("n_list/replicas/dimension", e))?;
                }
                if experiment != FreeEnergy {
                    alpha_of_v(&plan.mc_pair()).map_err(|e| invalid("dimension", e))?;
                    pde()?;
                }
            }
            TrendGp => {
                if cfg.beta_list.is_empty() {
                    return Err(invalid("beta_list", "must not be empty"));
                }
                plan.alpha()?;
                for &beta in &cfg.beta_list {
                    FkSolver::new(grid, beta, &cfg.init, dt_pde).map_err(|e| invalid("beta_list", e))?;
                }
            }
        }
        Ok(plan)
    }

    fn epsilon(&self) -> f64 {
        self.cfg.epsilon.unwrap_or(4.0 * self.grid.spacing())
    }

    /// `alpha` from the config, else `α(v)` of the pair, else 0.
    fn alpha(&self) -> Result<f64, RunError> {
        match (self.cfg.alpha, self.pair) {
            (Some(a), _) => Ok(a),
            (None, Some(p)) if !p.is_zero() => alpha_of_v(&p).map_err(|e| invalid("alpha", e)),
            _ => Ok(0.0),
        }
    }

    /// The interaction used by the Monte Carlo subcommands; zero when absent.
    fn mc_pair(&self) -> PairSpec {
        self.pair
            .unwrap_or_else(|| PairSpec::ball(0.0, 1.0, self.cfg.dimension).expect("zero ball is valid"))
    }

    fn mc_config(&self, n: usize) -> McConfig {
        McConfig {
            n,
            beta: self.cfg.beta,
            trap: self.cfg.trap,
            pair: self.mc_pair(),
            init: self.cfg.init.clone(),
            grid: self.grid,
            dt: self.cfg.dt,
            replicas: self.cfg.replicas,
            seed: self.cfg.seed,
        }
    }

    fn hartree_potential(&self, pair: PairSpec, n: usize) -> Result<Box<dyn RadialPotential>, RunError> {
        let v: Box<dyn RadialPotential> = if self.cfg.rescaled && n > 1 {
            Box::new(rescale_pair(&pair, n).map_err(|e| invalid("pair", e))?)
        } else {
            Box::new(pair)
        };
        if n > 1 && self.grid.spacing() > 0.5 * v.support() {
            return Err(invalid(
                "grid.points",
                format!(
                    "spacing {} does not resolve the interaction range {} at N = {n}",
                    self.grid.spacing(),
                    v.support()
                ),
            ));
        }
        Ok(v)
    }

    fn execute(&self, out: &mut RunWriter) -> Result<(), RunError> {
        use Experiment::*;
        match self.experiment {
            Sample => self.sample(out),
            Energies => self.energies(out),
            Cgf => self.cgf(out),
            Rate => self.rate(out),
            Chi => self.chi(out),
            Gp => self.gp(out),
            Hartree => self.hartree(out).map(|_| ()),
            FreeEnergy => self.free_energy(out),
            Tilted => self.tilted(out),
            Lln => self.lln(out),
            TrendGp => self.trend_gp(out),
            TrendHartree => self.trend_hartree(out),
        }
    }

    fn sample(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let n = *cfg.n_list.last().expect("validated");
        let ens = sample_paths(n, cfg.beta, cfg.dt, &cfg.init, cfg.dimension, cfg.seed, 0).context("paths")?;
        let occ = mean_occupation(&ens, &self.grid).context("paths")?;
        out.value("n", n as f64);
        out.value("steps", ens.steps() as f64);
        out.value("dt", ens.dt());
        out.value("occupation_mass", occ.mass());
        out.dump("paths.csv", |w| ens.write_csv(w, true))?;
        out.dump("occupation.csv", |w| occ.write_csv(w))
    }

    fn energies(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let pair = cfg.require_pair()?;
        let eps = self.epsilon();
        let mut rows = Vec::new();
        for &n in &cfg.n_list {
            let ens = sample_paths(n, cfg.beta, cfg.dt, &cfg.init, cfg.dimension, cfg.seed, 0).context("paths")?;
            let h = trap_energy(&ens, &cfg.trap);
            let k = pair_energy(&ens, &pair).context("hamiltonians")?;
            let (k_scaled, direct, bridged) = if cfg.dimension >= 2 && n >= 2 {
                let b = heuristic_bridge(&ens, &pair, &self.grid).context("hamiltonians")?;
                (scaled_pair_energy(&ens, &pair).context("hamiltonians")?, b.direct, b.via_histogram)
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
            let ilt = if n >= 2 {
                mollified_ilt_zero(&ens, 0, 1, eps, &self.grid).context("hamiltonians")?
            } else {
                f64::NAN
            };
            out.value(format!("trap_energy.n{n}"), h);
            out.value(format!("pair_energy.n{n}"), k);
            rows.push(vec![n as f64, h, k, k_scaled, ilt, direct, bridged]);
        }
        out.value("epsilon", eps);
        out.table(
            "energies.csv",
            &["n", "trap_energy", "pair_energy", "scaled_pair_energy", "mollified_ilt_01", "bridge_direct", "bridge_histogram"],
            &rows,
        )
    }

    fn tilt(&self) -> Result<GridFunction, RunError> {
        self.cfg.tilt_function(self.grid).context("tilt")
    }

    fn cgf(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let f = self.tilt()?;
        let solver = FkSolver::new(self.grid, cfg.beta, &cfg.init, self.dt_pde).context("feynman_kac")?;
        let (lambda, rho) = solver.tilted(&f).context("feynman_kac")?;
        let (mc, se) = cgf_mc(&f, cfg.beta, &cfg.init, cfg.replicas, cfg.dt, cfg.seed).context("feynman_kac")?;
        out.value("value", lambda);
        out.value("value_mc", mc);
        out.value("value_mc_std_error", se);
        out.value("dt_pde", solver.dt());
        out.value("pde_steps", solver.steps() as f64);
        out.dump("tilted_occupation.csv", |w| rho.write_csv(w))
    }

    fn rate(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let rho = match &cfg.rate.target {
            TargetConfig::Tilted => {
                let solver = FkSolver::new(self.grid, cfg.beta, &cfg.init, self.dt_pde).context("feynman_kac")?;
                solver.tilted(&self.tilt()?).context("feynman_kac")?.1
            }
            TargetConfig::Gaussian { center, s } => {
                ExperimentConfig::gaussian_target(self.grid, center, *s).context("rate_function")?
            }
        };
        let res = evaluate_j(&rho, cfg.beta, &cfg.init, &self.grid, cfg.rate.tol, cfg.rate.max_iter).context("rate_function")?;
        let zero = GridFunction::zeros(self.grid, Role::Tilt);
        // Finite-trap bound with h = 0; skipped for hard walls touching the target.
        let bound = j_lower_bound(&rho, &zero, &cfg.trap, cfg.beta, &cfg.init, &self.grid).unwrap_or(f64::NAN);
        out.value("value", res.value);
        out.value("gap", res.gap);
        out.value("iterations", res.iterations as f64);
        out.value("trap_lower_bound", bound);
        out.flag("converged", res.converged);
        out.dump("target.csv", |w| rho.write_csv(w))?;
        out.dump("f_star.csv", |w| res.maximizer.write_csv(w))
    }

    fn record(&self, out: &mut RunWriter, res: &VariationalResult) -> Result<(), RunError> {
        out.value("value", res.value);
        out.value("residual", res.residual);
        out.value("iterations", res.iterations as f64);
        out.flag("converged", res.converged);
        out.diagnostics("", &res.diagnostics);
        let history: Vec<Vec<f64>> = res.history.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
        out.table("history.csv", &["iteration", "objective"], &history)?;
        out.dump("minimizer.csv", |w| res.minimizer.write_csv(w))
    }

    fn chi(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let alpha = self.alpha()?;
        let res = solve_chi_otimes(&self.tilt()?, &cfg.trap, alpha, cfg.beta, &cfg.init, &self.grid, &self.chi_options())
            .context("variational")?;
        out.value("alpha", alpha);
        for (i, v) in res.restart_values.iter().enumerate() {
            out.value(format!("restart.{i}"), *v);
        }
        self.record(out, &res)
    }

    fn chi_options(&self) -> VarOptions {
        VarOptions {
            dt_pde: Some(self.dt_pde),
            ..self.cfg.solver.clone()
        }
    }

    fn gp(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let alpha = self.alpha()?;
        let res = solve_gp(&self.cfg.trap, alpha, &self.grid, &self.cfg.solver).context("variational")?;
        out.value("alpha", alpha);
        self.record(out, &res)
    }

    /// Per-particle Hartree energies for each `N`, in list order.
    fn hartree(&self, out: &mut RunWriter) -> Result<Vec<f64>, RunError> {
        let cfg = self.cfg;
        let pair = cfg.require_pair()?;
        let mut rows = Vec::new();
        let mut values = Vec::new();
        let mut last = None;
        for &n in &cfg.n_list {
            let v = self.hartree_potential(pair, n)?;
            let res = solve_hartree(n, &cfg.trap, v.as_ref(), &self.grid, &cfg.solver).context("variational")?;
            out.value(format!("value.n{n}"), res.value);
            out.flag(format!("converged.n{n}"), res.converged);
            out.flag(format!("sweeps_nonincreasing.n{n}"), res.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            rows.push(vec![n as f64, res.value, res.iterations as f64, res.residual, f64::from(u8::from(res.converged))]);
            values.push(res.value);
            last = Some(res);
        }
        let res = last.expect("validated nonempty");
        out.diagnostics("last", &res.diagnostics);
        out.table("hartree.csv", &["n", "chi_hartree", "iterations", "last_change", "converged"], &rows)?;
        let sweeps: Vec<Vec<f64>> = res.history.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
        out.table("sweeps.csv", &["sweep", "energy_per_particle"], &sweeps)?;
        out.dump("minimizer.csv", |w| res.minimizer.write_csv(w))?;
        for (i, orbital) in res.orbitals.iter().enumerate() {
            out.dump(&format!("orbital_{i}.csv"), |w| orbital.write_csv(w))?;
        }
        Ok(values)
    }

    fn trend_hartree(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let pair = self.cfg.require_pair()?;
        let alpha = alpha_of_v(&pair).context("potentials")?;
        let values = self.hartree(out)?;
        let gp = solve_gp(&self.cfg.trap, alpha, &self.grid, &self.cfg.solver).context("variational")?;
        let diffs: Vec<f64> = values.iter().map(|v| (v - gp.value).abs()).collect();
        let rows: Vec<Vec<f64>> = self
            .cfg
            .n_list
            .iter()
            .zip(&values)
            .zip(&diffs)
            .map(|((n, v), d)| vec![*n as f64, *v, gp.value, *d])
            .collect();
        out.value("alpha", alpha);
        out.value("chi_gp", gp.value);
        out.value("first_gap", diffs[0]);
        out.value("last_gap", *diffs.last().expect("nonempty"));
        out.flag("finite", diffs.iter().all(|d| d.is_finite()));
        out.flag("weakly_decreasing", diffs.last() <= diffs.first());
        out.table("trend_hartree.csv", &["n", "chi_hartree", "chi_gp", "abs_gap"], &rows)
    }

    fn free_energy(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let mut rows = Vec::new();
        for &n in &cfg.n_list {
            let est = free_energy(&self.mc_config(n)).context("montecarlo")?;
            out.value(format!("value.n{n}"), est.value);
            out.value(format!("std_error.n{n}"), est.std_error);
            rows.push(vec![n as f64, est.value, est.std_error, est.effective_sample_size, est.zero_weights as f64]);
        }
        // Single-particle reference Λ(-W); exact for a vanishing interaction.
        let w = trap_on_grid_floored(&cfg.trap, self.grid);
        let minus_w = GridFunction::new(self.grid, w.values().iter().map(|v| -v).collect(), Role::Tilt).context("potentials")?;
        if let Ok(solver) = FkSolver::new(self.grid, cfg.beta, &cfg.init, self.dt_pde) {
            out.value("reference_cgf_minus_w", solver.cgf(&minus_w).context("feynman_kac")?);
        }
        out.table("free_energy.csv", &["n", "estimate", "std_error", "ess", "zero_weights"], &rows)
    }

    fn tilted(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let f = self.tilt()?;
        let alpha = alpha_of_v(&self.mc_pair()).context("potentials")?;
        let chi = solve_chi_otimes(&f, &cfg.trap, alpha, cfg.beta, &cfg.init, &self.grid, &self.chi_options())
            .context("variational")?;
        let mut rows = Vec::new();
        for &n in &cfg.n_list {
            let est = tilted_free_energy(&f, &self.mc_config(n)).context("montecarlo")?;
            out.value(format!("value.n{n}"), est.value);
            out.value(format!("std_error.n{n}"), est.std_error);
            rows.push(vec![n as f64, est.value, est.std_error, est.effective_sample_size, -chi.value]);
        }
        out.value("alpha", alpha);
        out.value("minus_chi", -chi.value);
        out.table("tilted.csv", &["n", "estimate", "std_error", "ess", "minus_chi"], &rows)
    }

    fn lln(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let alpha = alpha_of_v(&self.mc_pair()).context("potentials")?;
        let zero = GridFunction::zeros(self.grid, Role::Tilt);
        let chi = solve_chi_otimes(&zero, &cfg.trap, alpha, cfg.beta, &cfg.init, &self.grid, &self.chi_options())
            .context("variational")?;
        let mut rows = Vec::new();
        let mut dists = Vec::new();
        for &n in &cfg.n_list {
            let occ = weighted_mean_occupation(&self.mc_config(n)).context("montecarlo")?;
            let d = occ.density.l1_distance(&chi.minimizer).context("grid")?;
            // L1 size of the cellwise standard errors: the distance expected
            // from sampling noise alone is of this order.
            let noise: f64 = occ.std_error.iter().enumerate().map(|(i, se)| self.grid.node_weight(i) * se).sum();
            out.value(format!("l1.n{n}"), d);
            out.value(format!("noise_l1.n{n}"), noise);
            rows.push(vec![n as f64, d, noise, occ.estimate.effective_sample_size, occ.estimate.zero_weights as f64]);
            dists.push(d);
        }
        out.value("alpha", alpha);
        out.value("chi", chi.value);
        out.flag("last_below_first", dists.last() < dists.first());
        out.dump("phi_star_squared.csv", |w| chi.minimizer.write_csv(w))?;
        out.table("lln.csv", &["n", "l1_distance", "noise_l1", "ess", "zero_weights"], &rows)
    }

    fn trend_gp(&self, out: &mut RunWriter) -> Result<(), RunError> {
        let cfg = self.cfg;
        let alpha = self.alpha()?;
        let gp = solve_gp(&cfg.trap, alpha, &self.grid, &cfg.solver).context("variational")?;
        let zero = GridFunction::zeros(self.grid, Role::Tilt);
        let mut rows = Vec::new();
        for &beta in &cfg.beta_list {
            let chi = solve_chi_otimes(&zero, &cfg.trap, alpha, beta, &cfg.init, &self.grid, &self.chi_options())
                .context("variational")?;
            out.value(format!("chi.beta{beta}"), chi.value);
            rows.push(vec![beta, chi.value, gp.value, (chi.value - gp.value).abs()]);
        }
        out.value("alpha", alpha);
        out.value("chi_gp", gp.value);
        out.table("trend_gp.csv", &["beta", "chi_otimes", "chi_gp", "abs_gap"], &rows)
    }
}
