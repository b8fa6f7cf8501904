//! Command implementations behind the `gcbf` binary. Each returns the
//! process exit code; argument parsing lives in the binary.

pub mod bench;
pub mod verify;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::barrier::{eval, evaluate_grid, write_grid_csv, GridRow};
use crate::config::{write_atomic, ScenarioConfig};
use crate::error::Result;
use crate::gp::GpModel;
use crate::sim::{build_model, run_scenario, RunSummary, ScenarioOutcome};

pub use bench::{run_bench, BenchReport};
pub use verify::{run_suite, Suite, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const TRACE_FILE: &str = "trace.csv";
const CONTOUR_FILE: &str = "contour.csv";
const SUMMARY_FILE: &str = "summary.json";
const BENCH_FILE: &str = "bench.csv";

/// Default contour box when the config has none.
const DEFAULT_CONTOUR: ([f64; 2], [f64; 2], usize) = ([-1.0, -1.0], [1.0, 1.0], 100);

fn contour_box(cfg: &ScenarioConfig) -> ([f64; 2], [f64; 2], usize) {
    cfg.contour
        .map(|c| (c.domain.lo, c.domain.hi, c.resolution))
        .unwrap_or(DEFAULT_CONTOUR)
}

fn contour_rows(cfg: &ScenarioConfig, model: &GpModel) -> Result<Vec<GridRow>> {
    let (lo, hi, res) = contour_box(cfg);
    evaluate_grid(lo, hi, res, |x| eval(model, &cfg.gcbf.weights, x))
}

/// Paths of the files a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trace: PathBuf,
    pub contour: PathBuf,
    pub summary: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            trace: dir.join(TRACE_FILE),
            contour: dir.join(CONTOUR_FILE),
            summary: dir.join(SUMMARY_FILE),
        }
    }
}

/// Trace, contour of the final h_gp, and summary, each written atomically.
pub fn write_run_artifacts(cfg: &ScenarioConfig, outcome: &ScenarioOutcome, dir: &Path) -> Result<(RunArtifacts, RunSummary)> {
    let paths = RunArtifacts::in_dir(dir);
    write_atomic(&paths.trace, |w| outcome.trace.write_csv(w))?;
    let rows = contour_rows(cfg, &outcome.model)?;
    write_atomic(&paths.contour, |w| write_grid_csv(&rows, w))?;
    let summary = outcome.trace.summary();
    write_atomic(&paths.summary, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok((paths, summary))
}

/// Run the scenario and export artifacts. Exit 0 iff no tick was infeasible
/// and the logged barrier never fell below the invariance slack.
pub fn cmd_run(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<i32> {
    let outcome = run_scenario(cfg)?;
    let dir = out.unwrap_or(&cfg.output_dir);
    let (paths, summary) = write_run_artifacts(cfg, &outcome, dir)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("trace written to {}", paths.trace.display());
    if outcome.samples_ingested > 0 {
        println!("{} samples ingested online, {} in the final model", outcome.samples_ingested, outcome.model.len());
    }
    Ok(if summary.is_safe() { EXIT_OK } else { EXIT_FAILURE })
}

/// Contour of the initial h_gp (no simulation).
pub fn cmd_grid(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = build_model(cfg, &mut rng)?;
    let rows = contour_rows(cfg, &model)?;
    let path = out.unwrap_or(&cfg.output_dir).join(CONTOUR_FILE);
    write_atomic(&path, |w| write_grid_csv(&rows, w))?;
    println!("contour written to {}", path.display());
    Ok(EXIT_OK)
}

pub fn cmd_verify(suites: &[Suite], seed: u64) -> Result<i32> {
    let mut ok = true;
    for &s in suites {
        let report = run_suite(s, seed)?;
        print!("{report}");
        ok &= report.passed();
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

pub fn cmd_bench(out: &Path, seed: u64) -> Result<i32> {
    let report = run_bench(seed)?;
    let path = out.join(BENCH_FILE);
    write_atomic(&path, |w| report.write_csv(w))?;
    println!("{:<20} {:>5} {:>14}", "case", "n", "median [µs]");
    for r in &report.rows {
        println!("{:<20} {:>5} {:>14.2}", r.case, r.n, r.seconds * 1e6);
    }
    println!(
        "rank-1 insert speedup over rebuild at N = 500: {:.1}x (required {:.0}x)",
        report.rank1_speedup,
        bench::MIN_RANK1_SPEEDUP
    );
    println!("results written to {}", path.display());
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
}
