//! Synthesis and rectification timings. Absolute numbers depend on the
//! machine; the assertable quantity is the rank-1 speedup over a rebuild.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::verify::random_model;
use crate::barrier::{eval, GcbfWeights};
use crate::error::Result;
use crate::filter::{ecbf_gains_from_poles, lie_derivatives_deg2, rectify, BarrierConstraint, DoubleIntegrator};
use crate::gp::{Dataset, GpModel};
use crate::sim::{DiskBarrier, PLANAR_INDICES};

/// Required speedup of a rank-1 insert over a full rebuild at N = 500.
pub const MIN_RANK1_SPEEDUP: f64 = 5.0;

const INSERTS_PER_REPEAT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub case: &'static str,
    pub n: usize,
    pub repeats: usize,
    /// Median seconds per operation.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub rank1_speedup: f64,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.rank1_speedup >= MIN_RANK1_SPEEDUP
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["case", "n", "repeats", "median_seconds"])?;
        for r in &self.rows {
            w.write_record([r.case.to_string(), r.n.to_string(), r.repeats.to_string(), r.seconds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn median_time(repeats: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..repeats)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

/// Full rebuild and rank-1 insert at N ∈ `sizes`.
pub fn synthesis_rows(sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in sizes {
        let model = random_model(&mut rng, 2, n)?;
        let repeats = if n >= 300 { 7 } else { 21 };
        let mut m = model.clone();
        rows.push(BenchRow {
            case: "full_rebuild",
            n,
            repeats,
            seconds: median_time(repeats, || m.rebuild().expect("rebuild of a valid model")),
        });
        // Grow a copy of the first n − k samples by the last k, one bordering
        // step at a time; the copy is made outside the timed region.
        let k = INSERTS_PER_REPEAT.min(n - 1);
        let ds = model.dataset();
        let (head, _) = Dataset::from_samples(2, ds.inputs()[..n - k].to_vec(), ds.targets()[..n - k].to_vec(), n, 0.0)?;
        let base = GpModel::from_dataset(head, model.theta().clone())?;
        let mut times: Vec<f64> = (0..repeats)
            .map(|_| {
                let mut m = base.clone();
                let s = Instant::now();
                for i in n - k..n {
                    m.try_add_sample(&ds.inputs()[i], ds.targets()[i]).expect("insert into a valid model");
                }
                s.elapsed().as_secs_f64() / k as f64
            })
            .collect();
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            case: "rank1_insert",
            n,
            repeats,
            seconds: times[times.len() / 2],
        });
    }
    Ok(rows)
}

/// One filter tick: evaluate h_gp, assemble the degree-2 constraint, rectify.
/// With N = 0 the GP is skipped and the analytic disk barrier stands in.
pub fn tick_row(n: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = if n > 0 { Some(random_model(&mut rng, 2, n)?) } else { None };
    let weights = GcbfWeights::new(1.0, 4.0)?;
    let gains = ecbf_gains_from_poles(-2.0, -2.0)?;
    let plant = DoubleIntegrator::new(3);
    let x = DVector::from_fn(6, |_, _| rng.random_range(-0.3..0.3));
    let u_nom = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let repeats = 101;
    let seconds = median_time(repeats, || {
        let e = match &model {
            Some(m) => eval(m, &weights, &DVector::from_column_slice(&[x[0], x[1]])).expect("eval"),
            None => DiskBarrier { radius: 0.35 }.evaluate(&Vector2::new(x[0], x[1])),
        };
        let e = e.embed(6, &PLANAR_INDICES).expect("embed");
        let lie = lie_derivatives_deg2(&e, &plant, &x).expect("lie");
        let c = BarrierConstraint::degree2(&lie, e.value, &gains);
        std::hint::black_box(rectify(&u_nom, &c.a, c.b).ok());
    });
    Ok(BenchRow {
        case: if n == 0 { "qp_only_tick" } else { "rectification_tick" },
        n,
        repeats,
        seconds,
    })
}

pub fn run_bench(seed: u64) -> Result<BenchReport> {
    let mut rows = synthesis_rows(&[50, 100, 200, 300, 500], seed)?;
    for n in [0, 100, 300] {
        rows.push(tick_row(n, seed)?);
    }
    let at = |case: &str| rows.iter().find(|r| r.case == case && r.n == 500).map(|r| r.seconds);
    let rank1_speedup = match (at("full_rebuild"), at("rank1_insert")) {
        (Some(full), Some(r1)) => full / r1.max(1e-12),
        _ => 0.0,
    };
    Ok(BenchReport { rows, rank1_speedup })
}
