//! Wall-clock comparison of the scalar closed form against Gram matrix plus
//! Frank–Wolfe.
//!
//! Cells are visited round-robin so slow drift in machine load spreads evenly
//! over all of them. Each sample times a calibrated batch of calls and reports
//! the mean time per call. Warmup rounds are discarded.

use std::collections::HashMap;
use std::hint::black_box;
use std::io::{Read, Write};
use std::time::Instant;

use pama_core::analysis::{BenchMethod, BenchRecord};
use pama_core::simplex::{gram_matrix, solve_closed_form, solve_gram_qp, FwOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::metrics::fmt_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub n_range: Vec<usize>,
    pub d_range: Vec<usize>,
    /// Recorded samples per cell.
    pub repeats: usize,
    /// Discarded samples per cell, taken before the recorded ones.
    pub warmup: usize,
    /// Target duration of one sample in seconds.
    pub sample_time: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n_range: vec![2, 4, 8],
            d_range: vec![100, 10_000, 1_000_000],
            repeats: 5,
            warmup: 1,
            sample_time: 2e-3,
            seed: 0,
        }
    }
}

impl BenchOptions {
    fn validate(&self) -> Result<()> {
        if self.n_range.is_empty() || self.d_range.is_empty() {
            return Err(CliError::Usage("bench ranges must not be empty".into()));
        }
        if self.n_range.contains(&0) || self.d_range.contains(&0) {
            return Err(CliError::Usage("bench sizes must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(CliError::Usage("bench needs at least one repeat".into()));
        }
        if !(self.sample_time > 0.0) {
            return Err(CliError::Usage("sample time must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Cell {
    method: BenchMethod,
    n: usize,
    d: usize,
}

/// Times every `(method, n, d)` cell and returns one record per recorded
/// sample, in round-robin order.
pub fn complexity_bench(opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    opts.validate()?;
    let max_n = *opts.n_range.iter().max().expect("non-empty");
    let max_d = *opts.d_range.iter().max().expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Shorter vectors are prefixes of one shared pool.
    let pool: Vec<Vec<f64>> = (0..max_n)
        .map(|_| (0..max_d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let scalars: Vec<f64> = (0..max_n).map(|_| rng.random_range(-5.0..5.0)).collect();

    let mut cells = Vec::new();
    for &n in &opts.n_range {
        for &d in &opts.d_range {
            cells.push(Cell {
                method: BenchMethod::ClosedForm,
                n,
                d,
            });
            cells.push(Cell {
                method: BenchMethod::GramPlusQp,
                n,
                d,
            });
        }
    }

    let run_once = |cell: Cell| -> Result<()> {
        match cell.method {
            BenchMethod::ClosedForm => {
                let sol = solve_closed_form(black_box(&scalars[..cell.n]))?;
                black_box(sol);
            }
            BenchMethod::GramPlusQp => {
                let rows: Vec<&[f64]> = pool[..cell.n].iter().map(|v| &v[..cell.d]).collect();
                let gram = gram_matrix(black_box(&rows))?;
                let sol = solve_gram_qp(&gram, FwOptions::default(), |_| {})?;
                black_box(sol);
            }
        }
        Ok(())
    };

    // The closed form ignores d, so its batch size is calibrated once per n.
    let key = |c: Cell| match c.method {
        BenchMethod::ClosedForm => (c.method, c.n, 0),
        BenchMethod::GramPlusQp => (c.method, c.n, c.d),
    };
    let mut iters: HashMap<(BenchMethod, usize, usize), u64> = HashMap::new();
    for &cell in &cells {
        if iters.contains_key(&key(cell)) {
            continue;
        }
        let mut k = 1u64;
        loop {
            let t0 = Instant::now();
            for _ in 0..k {
                run_once(cell)?;
            }
            let dt = t0.elapsed().as_secs_f64();
            if dt >= opts.sample_time / 4.0 || k >= 1 << 24 {
                let per_call = dt / k as f64;
                let target = (opts.sample_time / per_call.max(1e-12)).ceil() as u64;
                iters.insert(key(cell), target.clamp(1, 1 << 24));
                break;
            }
            k *= 4;
        }
    }

    let mut out = Vec::with_capacity(cells.len() * opts.repeats);
    for round in 0..opts.warmup + opts.repeats {
        for &cell in &cells {
            let k = iters[&key(cell)];
            let t0 = Instant::now();
            for _ in 0..k {
                run_once(cell)?;
            }
            let per_call = t0.elapsed().as_secs_f64() / k as f64;
            if round >= opts.warmup {
                out.push(BenchRecord::new(cell.method, cell.n, cell.d, per_call));
            }
        }
    }
    Ok(out)
}

/// Median wall time per `(method, n, d)` cell, in order of first appearance.
pub fn median_records(records: &[BenchRecord]) -> Vec<BenchRecord> {
    let mut order: Vec<(BenchMethod, usize, usize)> = Vec::new();
    let mut groups: HashMap<(BenchMethod, usize, usize), Vec<f64>> = HashMap::new();
    for r in records {
        let k = (r.method, r.n, r.d);
        groups
            .entry(k)
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(r.wall_time);
    }
    order
        .into_iter()
        .map(|k| {
            let mut ts = groups.remove(&k).expect("grouped");
            ts.sort_by(f64::total_cmp);
            let m = ts.len();
            let median = if m % 2 == 1 {
                ts[m / 2]
            } else {
                0.5 * (ts[m / 2 - 1] + ts[m / 2])
            };
            BenchRecord::new(k.0, k.1, k.2, median)
        })
        .collect()
}

pub const BENCH_HEADER: [&str; 4] = ["method", "n", "d", "wall_time_s"];

pub fn write_bench_csv<W: Write>(sink: W, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(BENCH_HEADER)?;
    for r in records {
        w.write_record([
            r.method.as_str().to_string(),
            r.n.to_string(),
            r.d.to_string(),
            fmt_f64(r.wall_time),
        ])?;
    }
    w.flush().map_err(|e| CliError::io("bench output", e))
}

pub fn read_bench_csv<R: Read>(source: R) -> Result<Vec<BenchRecord>> {
    let mut rdr = csv::Reader::from_reader(source);
    let header = rdr.headers()?.clone();
    if header.iter().ne(BENCH_HEADER) {
        return Err(CliError::Usage(format!("unexpected bench header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Usage(format!("bench row {}: bad {what}", i + 1));
        let method = BenchMethod::parse(&rec[0]).ok_or_else(|| bad("method"))?;
        let n = rec[1].parse().map_err(|_| bad("n"))?;
        let d = rec[2].parse().map_err(|_| bad("d"))?;
        let t: f64 = rec[3].parse().map_err(|_| bad("wall_time_s"))?;
        out.push(BenchRecord::new(method, n, d, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians_group_by_cell() {
        let rs = [
            BenchRecord::new(BenchMethod::ClosedForm, 2, 10, 3.0),
            BenchRecord::new(BenchMethod::GramPlusQp, 2, 10, 9.0),
            BenchRecord::new(BenchMethod::ClosedForm, 2, 10, 1.0),
            BenchRecord::new(BenchMethod::ClosedForm, 2, 10, 2.0),
            BenchRecord::new(BenchMethod::GramPlusQp, 2, 10, 7.0),
        ];
        let m = median_records(&rs);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].wall_time, 2.0);
        assert_eq!(m[1].wall_time, 8.0);
    }

    #[test]
    fn empty_ranges_are_rejected() {
        let opts = BenchOptions {
            n_range: vec![],
            ..BenchOptions::default()
        };
        assert!(complexity_bench(&opts).is_err());
    }
}
