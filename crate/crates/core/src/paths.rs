//! Scenario simulation: Brownian driver, Gaussian factor, marked Poisson
//! jumps and default times.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{config, Error, Result};
use crate::grid::TimeGrid;
use crate::hazard::HazardModel;
use crate::model::{ModelConfig, ModelKind};
use crate::rng::RngSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub mark: f64,
}

/// Default times attached to a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DefaultTimes {
    pub tau: Vec<f64>,
    /// Terminal Gaussian `ξ = m_∞` (DGC); NaN in Cox mode.
    pub xi: Vec<f64>,
    /// `m_τ` drawn from the Gaussian bridge when `τ ≤ T`, NaN otherwise.
    pub factor_at_tau: Vec<f64>,
    pub client_theta: Option<Vec<f64>>,
}

/// A batch of simulated paths, stored path-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioBatch {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    brownian_increments: Vec<f64>,
    factor_m: Vec<f64>,
    pub tail_gaussian: Vec<f64>,
    pub bridge_gaussian: Vec<f64>,
    pub default_exponential: Vec<f64>,
    pub client_exponential: Vec<f64>,
    jump_offsets: Vec<usize>,
    jumps: Vec<Jump>,
    pub defaults: Option<DefaultTimes>,
}

struct PathScalars {
    tail: f64,
    bridge: f64,
    e: f64,
    e_client: f64,
    jumps: Vec<Jump>,
}

/// Simulates factor, Brownian increments, jumps and the auxiliary variables
/// used for default sampling. Path `p` uses stream `rng.stream_id + p`.
pub fn simulate_batch(model: &ModelConfig, grid: &TimeGrid, n_paths: usize, rng: RngSpec) -> Result<ScenarioBatch> {
    model.validate()?;
    if n_paths == 0 {
        return config("n_paths must be at least 1");
    }
    if (grid.horizon() - model.horizon).abs() > 1e-12 * model.horizon {
        return config(format!("grid horizon {} differs from model horizon {}", grid.horizon(), model.horizon));
    }
    let vol = model.vol();
    let ns = grid.n_steps();
    let nt = ns + 1;
    // per-step (Δt, ∫ς, ∫ς²)
    let steps: Vec<(f64, f64, f64)> = (0..ns)
        .map(|i| {
            let (a, b) = (grid.t(i), grid.t(i + 1));
            (b - a, vol.vol_integral(a, b), vol.var_between(a, b))
        })
        .collect();
    let horizon = grid.horizon();
    let jumps_cfg = model.jumps;

    let mut factor_m = vec![0.0; n_paths * nt];
    let mut brownian_increments = vec![0.0; n_paths * ns];
    let scalars: Vec<PathScalars> = factor_m
        .par_chunks_mut(nt)
        .zip(brownian_increments.par_chunks_mut(ns))
        .enumerate()
        .map(|(p, (m, db))| {
            let mut r = RngSpec::new(rng.master_seed, rng.stream_id.wrapping_add(p as u64)).rng();
            m[0] = 0.0;
            for (i, &(dt, c, dv)) in steps.iter().enumerate() {
                let z1: f64 = StandardNormal.sample(&mut r);
                let z2: f64 = StandardNormal.sample(&mut r);
                let sdt = dt.sqrt();
                // (ΔB, Δm) jointly Gaussian with Cov = ∫ς, Var Δm = ∫ς²
                let resid = (dv - c * c / dt).max(0.0).sqrt();
                db[i] = sdt * z1;
                m[i + 1] = m[i] + c / sdt * z1 + resid * z2;
            }
            let tail: f64 = StandardNormal.sample(&mut r);
            let bridge: f64 = StandardNormal.sample(&mut r);
            let e: f64 = Exp1.sample(&mut r);
            let e_client: f64 = Exp1.sample(&mut r);
            let mut jumps = Vec::new();
            if jumps_cfg.intensity > 0.0 {
                let mut t = 0.0;
                loop {
                    let w: f64 = Exp1.sample(&mut r);
                    t += w / jumps_cfg.intensity;
                    if t > horizon {
                        break;
                    }
                    let mark = jumps_cfg.marks.sample(&mut r);
                    jumps.push(Jump { time: t, mark });
                }
            }
            PathScalars { tail, bridge, e, e_client, jumps }
        })
        .collect();

    let mut jump_offsets = Vec::with_capacity(n_paths + 1);
    jump_offsets.push(0);
    let mut jumps = Vec::new();
    let mut tail_gaussian = Vec::with_capacity(n_paths);
    let mut bridge_gaussian = Vec::with_capacity(n_paths);
    let mut default_exponential = Vec::with_capacity(n_paths);
    let mut client_exponential = Vec::with_capacity(n_paths);
    for s in scalars {
        tail_gaussian.push(s.tail);
        bridge_gaussian.push(s.bridge);
        default_exponential.push(s.e);
        client_exponential.push(s.e_client);
        jumps.extend_from_slice(&s.jumps);
        jump_offsets.push(jumps.len());
    }

    Ok(ScenarioBatch {
        grid: grid.clone(),
        n_paths,
        seed: rng.master_seed,
        brownian_increments,
        factor_m,
        tail_gaussian,
        bridge_gaussian,
        default_exponential,
        client_exponential,
        jump_offsets,
        jumps,
        defaults: None,
    })
}

/// Attaches default times. DGC: `τ = Ψ(m_T + ν(T)·tail)`; Cox: `τ = Λ⁻¹(E)`.
pub fn sample_tau(mut batch: ScenarioBatch, model: &HazardModel) -> Result<ScenarioBatch> {
    batch.defaults = Some(default_times(&batch, model)?);
    Ok(batch)
}

/// Simulates a batch and samples its default times.
pub fn simulate_with_defaults(model: &HazardModel, grid: &TimeGrid, n_paths: usize, rng: RngSpec) -> Result<ScenarioBatch> {
    let batch = simulate_batch(model.config(), grid, n_paths, rng)?;
    sample_tau(batch, model)
}

fn default_times(batch: &ScenarioBatch, model: &HazardModel) -> Result<DefaultTimes> {
    let cfg = model.config();
    let grid = &batch.grid;
    let horizon = grid.horizon();
    let vol = cfg.vol();
    let n = batch.n_paths;
    let (tau, xi): (Vec<f64>, Vec<f64>) = match cfg.kind {
        ModelKind::Dgc => {
            let nu_t = vol.nu(horizon);
            let xi: Vec<f64> = (0..n).map(|p| batch.m(p)[grid.n_steps()] + nu_t * batch.tail_gaussian[p]).collect();
            let lo = xi.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            cfg.psi.check_increasing_on(lo, hi)?;
            let tau = xi.iter().map(|&x| cfg.psi.eval(x)).collect();
            (tau, xi)
        }
        ModelKind::Cox => {
            let tau = batch.default_exponential.iter().map(|&e| cfg.cox_hazard.inverse_cumulative(e)).collect();
            (tau, vec![f64::NAN; n])
        }
    };
    if let Some((p, &t)) = tau.iter().enumerate().find(|(_, &t)| !(t > 0.0)) {
        return Err(Error::Model(format!("default time on path {p} is not positive: {t}")));
    }
    let factor_at_tau = (0..n)
        .map(|p| {
            let t = tau[p];
            if t > horizon {
                return f64::NAN;
            }
            let i = grid.step_of(t);
            let m = batch.m(p);
            let (v0, v1, vt) = (vol.cum_var(grid.t(i)), vol.cum_var(grid.t(i + 1)), vol.cum_var(t));
            let w = (vt - v0) / (v1 - v0);
            let var = ((vt - v0) * (v1 - vt) / (v1 - v0)).max(0.0);
            m[i] + w * (m[i + 1] - m[i]) + var.sqrt() * batch.bridge_gaussian[p]
        })
        .collect();
    let client_theta = cfg
        .client_hazard
        .map(|rate| batch.client_exponential.iter().map(|&e| e / rate).collect());
    Ok(DefaultTimes { tau, xi, factor_at_tau, client_theta })
}

/// Ordered parallel map over paths.
pub fn par_paths<T, F>(n_paths: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    (0..n_paths).into_par_iter().map(&f).collect()
}

impl ScenarioBatch {
    pub fn n_times(&self) -> usize {
        self.grid.n_steps() + 1
    }

    /// Factor values `m_{t_0..t_N}` of path `p`.
    pub fn m(&self, p: usize) -> &[f64] {
        let nt = self.n_times();
        &self.factor_m[p * nt..(p + 1) * nt]
    }

    /// Brownian increments of path `p`, one per step.
    pub fn db(&self, p: usize) -> &[f64] {
        let ns = self.grid.n_steps();
        &self.brownian_increments[p * ns..(p + 1) * ns]
    }

    /// Jumps of path `p` in `(0, T]`, ordered in time.
    pub fn jumps(&self, p: usize) -> &[Jump] {
        &self.jumps[self.jump_offsets[p]..self.jump_offsets[p + 1]]
    }

    pub fn total_jumps(&self) -> usize {
        self.jumps.len()
    }

    fn defaults_ref(&self) -> &DefaultTimes {
        self.defaults.as_ref().expect("default times not sampled; call sample_tau first")
    }

    pub fn has_defaults(&self) -> bool {
        self.defaults.is_some()
    }

    pub fn tau(&self, p: usize) -> f64 {
        self.defaults_ref().tau[p]
    }

    pub fn factor_at_tau(&self, p: usize) -> f64 {
        self.defaults_ref().factor_at_tau[p]
    }

    /// Last grid index strictly before `τ` (`N` if `τ > T`). A default time on a
    /// grid point counts as falling inside the following step.
    pub fn last_alive_index(&self, p: usize) -> usize {
        let tau = self.tau(p);
        if tau > self.grid.horizon() {
            self.grid.n_steps()
        } else {
            self.grid.step_of(tau)
        }
    }

    pub fn client_theta(&self, p: usize) -> Option<f64> {
        self.defaults_ref().client_theta.as_ref().map(|v| v[p])
    }

    pub fn defaults_or_err(&self) -> Result<&DefaultTimes> {
        self.defaults
            .as_ref()
            .ok_or_else(|| Error::Precondition("default times have not been sampled".into()))
    }

    /// Writes `paths.csv` (one row per path and grid time) and `paths_summary.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("paths.csv"))?);
        writeln!(w, "path,step,t,m,dB")?;
        for p in 0..self.n_paths {
            let (m, db) = (self.m(p), self.db(p));
            for i in 0..self.n_times() {
                let d = if i < db.len() { format!("{:e}", db[i]) } else { String::new() };
                writeln!(w, "{p},{i},{:e},{:e},{d}", self.grid.t(i), m[i])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("paths_summary.csv"))?;
        w.write_record(["path", "tau", "xi", "m_tau", "theta", "n_jumps"])?;
        for p in 0..self.n_paths {
            let (tau, xi, mt, theta) = match &self.defaults {
                Some(d) => (
                    d.tau[p].to_string(),
                    d.xi[p].to_string(),
                    d.factor_at_tau[p].to_string(),
                    d.client_theta.as_ref().map(|v| v[p].to_string()).unwrap_or_default(),
                ),
                None => Default::default(),
            };
            w.write_record([p.to_string(), tau, xi, mt, theta, self.jumps(p).len().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
