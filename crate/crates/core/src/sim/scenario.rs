use std::io::Write;
use std::time::Instant;

use nalgebra::{DVector, Vector2, Vector3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::measure_position;
use super::plant::{invert_setpoints, step, PlantState, Setpoints};
use super::world::{sample_safety_obstacles, sample_safety_uniform, DiskBarrier};
use crate::barrier::{eval, evaluate_grid, noisy_eval, GaussianState, GridRow, SafetyEvaluation};
use crate::config::{BarrierKind, DatasetSource, FilterMode, InitialPosition, ScenarioConfig};
use crate::error::{Error, Result};
use crate::filter::{lie_derivatives_deg2, rectify, rectify_bounded, BarrierConstraint, DoubleIntegrator};
use crate::gp::{fit_hyperparameters, Dataset, FitOptions, GpModel};
use crate::kernel::Hyperparameters;

/// State coordinates the planar barrier depends on.
pub const PLANAR_INDICES: [usize; 2] = [0, 1];

/// Slack on min h in the exit-code contract (discrete stepping).
pub const INVARIANCE_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub u_nom: Vector3<f64>,
    pub u_rect: Vector3<f64>,
    /// The enforced barrier at the true state.
    pub h: f64,
    pub margin: f64,
    pub active: bool,
    pub setpoints: Setpoints,
    pub infeasible: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    /// Wall-clock seconds spent in each tick's filter pipeline. Kept out of
    /// the CSV so traces stay reproducible.
    pub tick_seconds: Vec<f64>,
}

pub const TRACE_COLUMNS: [&str; 20] = [
    "t", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z", "unom_x", "unom_y", "unom_z", "urect_x", "urect_y", "urect_z",
    "h_gp", "margin", "active", "roll", "pitch", "thrust", "infeasible",
];

/// Run statistics written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub min_h: f64,
    pub max_rectification: f64,
    pub ticks: usize,
    pub active_ticks: usize,
    pub infeasible_ticks: usize,
    pub tick_time_mean_us: f64,
    pub tick_time_max_us: f64,
}

impl RunSummary {
    /// No infeasible tick and h stayed above the discretization slack.
    pub fn is_safe(&self) -> bool {
        self.infeasible_ticks == 0 && self.min_h >= -INVARIANCE_SLACK
    }
}

impl TraceLog {
    /// `# seed=…` comment line, then the column header and one row per tick.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRACE_COLUMNS)?;
        for r in &self.rows {
            let mut rec: Vec<String> = Vec::with_capacity(TRACE_COLUMNS.len());
            rec.push(r.t.to_string());
            for v in [&r.position, &r.velocity, &r.u_nom, &r.u_rect] {
                rec.extend(v.iter().map(|x| x.to_string()));
            }
            rec.push(r.h.to_string());
            rec.push(r.margin.to_string());
            rec.push(u8::from(r.active).to_string());
            rec.push(r.setpoints.roll.to_string());
            rec.push(r.setpoints.pitch.to_string());
            rec.push(r.setpoints.thrust.to_string());
            rec.push(u8::from(r.infeasible).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        let times = &self.tick_seconds;
        let mean = if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        };
        RunSummary {
            min_h: self.rows.iter().map(|r| r.h).fold(f64::INFINITY, f64::min),
            max_rectification: self.rows.iter().map(|r| (r.u_rect - r.u_nom).norm()).fold(0.0, f64::max),
            ticks: self.rows.len(),
            active_ticks: self.rows.iter().filter(|r| r.active).count(),
            infeasible_ticks: self.rows.iter().filter(|r| r.infeasible).count(),
            tick_time_mean_us: mean * 1e6,
            tick_time_max_us: times.iter().copied().fold(0.0, f64::max) * 1e6,
        }
    }

    /// Largest planar distance from the origin along the trace.
    pub fn max_planar_radius(&self) -> f64 {
        self.rows.iter().map(|r| r.position.xy().norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub trace: TraceLog,
    /// The GP at the end of the run (after any online ingestion).
    pub model: GpModel,
    pub samples_ingested: usize,
}

impl ScenarioOutcome {
    /// Contour of the final h_gp over a box.
    pub fn contour(&self, cfg: &ScenarioConfig, lo: [f64; 2], hi: [f64; 2], resolution: usize) -> Result<Vec<GridRow>> {
        evaluate_grid(lo, hi, resolution, |x| eval(&self.model, &cfg.gcbf.weights, x))
    }
}

/// Initial dataset and (optionally fitted) model, drawing from `rng`.
pub fn build_model(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<GpModel> {
    let g = &cfg.gcbf;
    let (inputs, targets): (Vec<DVector<f64>>, Vec<f64>) = match &cfg.dataset_source {
        DatasetSource::Uniform { domain, n, y_lo, y_hi } => {
            let ds = sample_safety_uniform(domain, *n, *y_lo, *y_hi, rng)?;
            (ds.inputs().to_vec(), ds.targets().to_vec())
        }
        DatasetSource::DiskSamples {
            radius,
            domain,
            n,
            noise_std,
        } => DiskBarrier { radius: *radius }.sample(domain, *n, *noise_std, rng)?,
        DatasetSource::WorldSamples { points } => {
            let world = cfg
                .world
                .as_ref()
                .ok_or_else(|| Error::Config("world_samples source needs a world".into()))?;
            points
                .iter()
                .map(|p| {
                    let r = Vector2::from(*p);
                    (DVector::from_column_slice(p), sample_safety_obstacles(world, &r, rng))
                })
                .unzip()
        }
        DatasetSource::File { path } => {
            let (ds, _) = Dataset::load_csv(path, usize::MAX, 0.0)?;
            (ds.inputs().to_vec(), ds.targets().to_vec())
        }
        DatasetSource::Inline { inputs, targets } => {
            (inputs.iter().map(|p| DVector::from_column_slice(p)).collect(), targets.clone())
        }
    };
    let (ds, rejected) = Dataset::from_samples(2, inputs, targets, g.capacity, g.tau)?;
    if rejected > 0 {
        log::info!("{rejected} initial samples rejected by the τ-gate or capacity");
    }
    let mut model = GpModel::from_dataset(ds, g.hyperparameters.clone())?;
    if let Some(fit) = &g.fit {
        let opts = FitOptions {
            seed: rng.next_u64(),
            ..fit.clone()
        };
        let theta = fit_hyperparameters(&model, &opts)?;
        log::info!(
            "fitted hyperparameters: l = {:?}, σ_f² = {:.4e}, σ_y² = {:.4e}",
            theta.length_scales,
            theta.signal_variance,
            theta.noise_variance
        );
        model.set_hyperparameters(theta)?;
    }
    Ok(model)
}

/// Inverse residual above which a refit is rolled back: the maintained
/// inverse would no longer give trustworthy posterior variances.
pub const REFIT_MAX_RESIDUAL: f64 = 1e-8;

/// Swap in refitted hyperparameters unless the rebuilt inverse is too
/// ill-conditioned, in which case the previous ones stay.
fn refit_guarded(model: &mut GpModel, theta: Hyperparameters) -> Result<()> {
    let previous = model.theta().clone();
    if let Err(e) = model.set_hyperparameters(theta) {
        log::warn!("refit rejected: {e}");
        return Ok(());
    }
    let residual = model.inverse_residual();
    if residual > REFIT_MAX_RESIDUAL {
        log::warn!("refit rejected: inverse residual {residual:e}");
        model.set_hyperparameters(previous)?;
    }
    Ok(())
}

fn planar(v: &DVector<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[v[0], v[1]])
}

/// Barrier the filter enforces, evaluated on the planar marginal of the
/// measurement and lifted into the 6-D state.
fn filter_barrier(cfg: &ScenarioConfig, model: &GpModel, measured: &GaussianState) -> Result<SafetyEvaluation> {
    let e = match (&cfg.barrier, cfg.filter_mode) {
        (BarrierKind::Disk(d), _) => d.evaluate(&Vector2::new(measured.mean[0], measured.mean[1])),
        (BarrierKind::Gaussian, FilterMode::Deterministic) => eval(model, &cfg.gcbf.weights, &planar(&measured.mean))?,
        (BarrierKind::Gaussian, FilterMode::MomentMatched) => {
            noisy_eval(model, &cfg.gcbf.weights, &measured.marginal(&PLANAR_INDICES))?
        }
    };
    e.embed(6, &PLANAR_INDICES)
}

/// Enforced barrier at the true position, as logged.
fn true_barrier(cfg: &ScenarioConfig, model: &GpModel, r: &Vector3<f64>) -> Result<f64> {
    match &cfg.barrier {
        BarrierKind::Disk(d) => Ok(d.value(&r.xy())),
        BarrierKind::Gaussian => Ok(eval(model, &cfg.gcbf.weights, &DVector::from_column_slice(&[r.x, r.y]))?.value),
    }
}

fn initial_state(cfg: &ScenarioConfig, model: &GpModel) -> Result<PlantState> {
    let position = match &cfg.initial_state.position {
        InitialPosition::Fixed(p) => Vector3::from(*p),
        InitialPosition::Safest { domain, resolution, z } => {
            let grid = evaluate_grid(domain.lo, domain.hi, *resolution, |x| eval(model, &cfg.gcbf.weights, x))?;
            let best = grid
                .iter()
                .max_by(|a, b| a.h.total_cmp(&b.h))
                .expect("grid has at least four points");
            if best.h <= 0.0 {
                return Err(Error::Config("no grid point has positive h_gp to start from".into()));
            }
            Vector3::new(best.x, best.y, *z)
        }
    };
    PlantState::new(position, Vector3::from(cfg.initial_state.velocity))
}

/// The closed loop: measure, ingest, evaluate the barrier, assemble the
/// degree-2 constraint, rectify the nominal input, step the plant, log.
///
/// All randomness comes from one generator seeded with `cfg.seed`, so equal
/// configs give bit-identical traces. An infeasible tick applies u = 0 and
/// is flagged in the trace.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_model(cfg, &mut rng)?;
    let gains = cfg.gains.resolve()?;
    let plant = DoubleIntegrator::new(3);
    let mut state = initial_state(cfg, &model)?;
    if true_barrier(cfg, &model, &state.position)? <= 0.0 {
        log::warn!("initial state is outside the safe set");
    }

    let ticks = cfg.ticks();
    let mut trace = TraceLog {
        seed: cfg.seed,
        rows: Vec::with_capacity(ticks),
        tick_seconds: Vec::with_capacity(ticks),
    };
    let mut ingested = 0;
    let mut since_refit = 0;
    let mut guard_violations = 0usize;

    for _ in 0..ticks {
        let started = Instant::now();
        let measured = match &cfg.noise {
            Some(noise) => measure_position(&state, noise, &mut rng)?,
            None => GaussianState::deterministic(state.to_vector()),
        };

        if let (Some(online), Some(world)) = (&cfg.online, &cfg.world) {
            let x = planar(&measured.mean);
            if model.dataset().admits(&x) {
                let y = sample_safety_obstacles(world, &Vector2::new(x[0], x[1]), &mut rng);
                match model.try_add_sample(&x, y) {
                    Ok(true) => {
                        ingested += 1;
                        since_refit += 1;
                    }
                    Ok(false) => {}
                    Err(Error::NearDuplicate { pivot }) => log::debug!("sample skipped, pivot {pivot:e}"),
                    Err(e) => return Err(e),
                }
                if online.refit_every > 0 && since_refit >= online.refit_every && model.len() >= 2 {
                    since_refit = 0;
                    let opts = FitOptions {
                        seed: rng.next_u64(),
                        ..online.fit.clone()
                    };
                    let theta = fit_hyperparameters(&model, &opts)?;
                    log::info!("t = {:.2}: refit on {} samples gives {theta:?}", state.time, model.len());
                    refit_guarded(&mut model, theta)?;
                }
            }
        }

        let x = &measured.mean;
        let barrier = filter_barrier(cfg, &model, &measured)?;
        let lie = lie_derivatives_deg2(&barrier, &plant, x)?;
        let constraint = BarrierConstraint::degree2(&lie, barrier.value, &gains);
        let perceived = PlantState {
            position: Vector3::new(x[0], x[1], x[2]),
            velocity: Vector3::new(x[3], x[4], x[5]),
            time: state.time,
        };
        let u_nom = cfg.nominal.command(&perceived);
        let u_nom_d = DVector::from_column_slice(u_nom.as_slice());
        let result = match &cfg.input_bounds {
            Some(b) => rectify_bounded(&u_nom_d, &constraint.a, constraint.b, b),
            None => rectify(&u_nom_d, &constraint.a, constraint.b),
        };
        let (u_rect, active, margin, infeasible) = match result {
            Ok(r) => (Vector3::new(r.u_rect[0], r.u_rect[1], r.u_rect[2]), r.constraint_active, r.margin, false),
            Err(Error::Infeasible { b }) => {
                log::debug!("t = {:.2}: infeasible barrier constraint (b = {b:e}), holding zero input", state.time);
                (Vector3::zeros(), false, constraint.a.dot(&u_nom_d) - b, true)
            }
            Err(e) => return Err(e),
        };
        let setpoints = invert_setpoints(&u_rect, cfg.dynamics.yaw, cfg.dynamics.mass, cfg.dynamics.gravity)?;
        if !setpoints.within_small_angle() {
            if guard_violations == 0 {
                log::warn!(
                    "t = {:.2}: roll {:.3}, pitch {:.3} exceed the small-angle limit",
                    state.time,
                    setpoints.roll,
                    setpoints.pitch
                );
            }
            guard_violations += 1;
        }
        trace.tick_seconds.push(started.elapsed().as_secs_f64());

        let h = match (&cfg.noise, &cfg.barrier, cfg.filter_mode) {
            (None, _, FilterMode::Deterministic) => barrier.value,
            _ => true_barrier(cfg, &model, &state.position)?,
        };
        trace.rows.push(TraceRow {
            t: state.time,
            position: state.position,
            velocity: state.velocity,
            u_nom,
            u_rect,
            h,
            margin,
            active,
            setpoints,
            infeasible,
        });
        state = step(&state, &u_rect, cfg.dt)?;
    }
    if guard_violations > 0 {
        log::warn!("{guard_violations} ticks exceeded the small-angle limit");
    }
    Ok(ScenarioOutcome {
        trace,
        model,
        samples_ingested: ingested,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use std::path::Path;

    /// One inline sample at the origin, held or pushed from rest there.
    fn config(target: f64, nominal: &str, horizon: f64) -> ScenarioConfig {
        let text = format!(
            r#"{{
                "scenario": "custom", "dt": 0.01, "horizon": {horizon}, "seed": 3,
                "gcbf": {{
                    "weights": {{"mean_weight": 1.0, "variance_weight": 1.0}},
                    "tau": 0.0, "capacity": 10,
                    "hyperparameters": {{"length_scales": [0.5, 0.5], "signal_variance": 1.0, "noise_variance": 1e-4}}
                }},
                "gains": {{"poles": [-2.0, -3.0]}},
                "dataset_source": {{"inline": {{"inputs": [[0.0, 0.0]], "targets": [{target}]}}}},
                "nominal": {nominal},
                "initial_state": {{"position": {{"fixed": [0.0, 0.0, 1.0]}}}},
                "output_dir": "unused"
            }}"#
        );
        parse_config(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn interior_hold_is_never_rectified() {
        let out = run_scenario(&config(1.0, r#"{"policy": "hold"}"#, 2.0)).unwrap();
        assert_eq!(out.trace.rows.len(), 200);
        for r in &out.trace.rows {
            assert!(!r.active && !r.infeasible);
            assert_eq!(r.u_rect, r.u_nom);
            assert_eq!(r.position, Vector3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn push_is_filtered_and_slack_ticks_pass_through() {
        let cfg = config(1.0, r#"{"policy": "constant_push", "acceleration": [2.0, 0.5, 0.0]}"#, 10.0);
        let out = run_scenario(&cfg).unwrap();
        let s = out.trace.summary();
        assert!(s.active_ticks > 0);
        assert!(s.is_safe(), "{s:?}");
        let mut max_u: f64 = 0.0;
        for r in &out.trace.rows {
            if r.margin > 0.0 {
                assert_eq!(r.u_rect, r.u_nom);
            }
            // ‖ṙ(t)‖ ≤ ‖ṙ(0)‖ + t·max‖u‖ with ṙ(0) = 0.
            assert!(r.velocity.norm() <= r.t * max_u + 1e-12);
            max_u = max_u.max(r.u_rect.norm());
        }
    }

    #[test]
    fn infeasible_ticks_apply_zero_input() {
        // h < 0 at a symmetric peak: a = ∇h = 0 while b = −k0·h > 0.
        let cfg = config(-1.0, r#"{"policy": "constant_push", "acceleration": [1.0, 0.0, 0.0]}"#, 0.5);
        let out = run_scenario(&cfg).unwrap();
        let s = out.trace.summary();
        assert_eq!(s.infeasible_ticks, s.ticks);
        assert!(!s.is_safe());
        for r in &out.trace.rows {
            assert_eq!(r.u_rect, Vector3::zeros());
            assert_eq!(r.position, Vector3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn trace_csv_layout_and_determinism() {
        let cfg = config(1.0, r#"{"policy": "constant_push", "acceleration": [1.0, 1.0, 0.0]}"#, 1.0);
        let render = || {
            let mut buf = Vec::new();
            run_scenario(&cfg).unwrap().trace.write_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = render();
        assert_eq!(a, render());
        let mut lines = a.lines();
        assert_eq!(lines.next(), Some("# seed=3"));
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 100);
        assert!(rows.iter().all(|r| r.split(',').count() == TRACE_COLUMNS.len()));
    }
}
