//! Gauss-Legendre rules and a deterministic adaptive cubature over a 3D
//! parameter box.
//!
//! The cubature evaluates a vector-valued integrand (all coupling ranges in
//! one pass share the geometry work). Each cell is estimated with a tensor
//! Gauss-Legendre rule at two orders; the difference is the cell error.
//! Cells are refined worst-first with dyadic bisection of the relatively
//! longest edge. Cell ids are assigned in creation order and the final sum
//! runs over cells sorted by id with compensated accumulation, so the result
//! is independent of refinement history details and thread counts.

use crate::error::{Error, Result};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Newton iteration on P_n with Chebyshev-like initial guesses; accurate to
/// machine precision for the orders used here.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    let nf = n as f64;
    for i in 0..n {
        // initial guess (Abramowitz & Stegun 25.4.30 flavor)
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..100 {
            // evaluate P_n and P_n' via the recurrence
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        // weight
        let mut p0 = 1.0;
        let mut p1 = x;
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dp = nf * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((x, w));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// Integrate f over [a, b] with an n-point Gauss-Legendre rule.
pub fn integrate_gl<F: FnMut(f64) -> f64>(a: f64, b: f64, n: usize, mut f: F) -> f64 {
    let rule = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut sum = 0.0;
    let mut c = 0.0; // Kahan compensation
    for &(x, w) in &rule {
        let term = w * f(mid + half * x);
        let y = term - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum * half
}

#[derive(Clone, Copy, Debug)]
pub struct CubatureOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_evaluations: usize,
    pub max_depth: u32,
}

impl Default for CubatureOptions {
    fn default() -> Self {
        CubatureOptions {
            rel_tol: 1e-6,
            abs_tol: 0.0,
            max_evaluations: 20_000_000,
            max_depth: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CubatureResult {
    pub values: Vec<f64>,
    pub error_bounds: Vec<f64>,
    pub evaluations: usize,
    pub cells: usize,
    pub converged: bool,
}

impl CubatureResult {
    /// Largest error bound across components, for reporting.
    pub fn worst_error(&self) -> f64 {
        self.error_bounds.iter().cloned().fold(0.0, f64::max)
    }
}

struct Cell {
    lo: [f64; 3],
    hi: [f64; 3],
    integral: Vec<f64>,
    error: Vec<f64>,
    depth: u32,
    id: u64,
}

struct HeapEntry {
    priority: f64,
    id: u64,
    index: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority && self.id == other.id
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.id.cmp(&self.id))
    }
}

const N_LO: usize = 4;
const N_HI: usize = 7;

/// Adaptive cubature of a vector integrand over the parameter box
/// `[lo, hi]`. The integrand writes `dim` values per point (including any
/// coordinate-map Jacobian factor).
pub fn adaptive_cubature<F>(
    lo: [f64; 3],
    hi: [f64; 3],
    dim: usize,
    opts: &CubatureOptions,
    mut f: F,
) -> Result<CubatureResult>
where
    F: FnMut(&[f64; 3], &mut [f64]),
{
    let rule_lo = gauss_legendre(N_LO);
    let rule_hi = gauss_legendre(N_HI);
    let init_width = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];

    let mut evals: usize = 0;
    let mut buf = vec![0.0; dim];

    let eval_cell = |lo: [f64; 3],
                         hi: [f64; 3],
                         evals: &mut usize,
                         buf: &mut [f64],
                         f: &mut F|
     -> (Vec<f64>, Vec<f64>) {
        let mut i_lo = vec![0.0; dim];
        let mut i_hi = vec![0.0; dim];
        for (rule, acc) in [(&rule_lo, &mut i_lo), (&rule_hi, &mut i_hi)] {
            let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
            let half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1]), 0.5 * (hi[2] - lo[2])];
            let jac = half[0] * half[1] * half[2];
            for &(x0, w0) in rule.iter() {
                for &(x1, w1) in rule.iter() {
                    for &(x2, w2) in rule.iter() {
                        let u = [mid[0] + half[0] * x0, mid[1] + half[1] * x1, mid[2] + half[2] * x2];
                        f(&u, buf);
                        *evals += 1;
                        let w = w0 * w1 * w2 * jac;
                        for (a, &v) in acc.iter_mut().zip(buf.iter()) {
                            *a += w * v;
                        }
                    }
                }
            }
        }
        let err: Vec<f64> = i_hi.iter().zip(i_lo.iter()).map(|(h, l)| (h - l).abs()).collect();
        (i_hi, err)
    };

    let mut cells: Vec<Cell> = Vec::new();
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
    let mut next_id: u64 = 0;

    let mut totals = vec![0.0; dim];
    let mut tot_err = vec![0.0; dim];

    // Tolerance scale shared by all components: rel_tol is taken relative to
    // the largest component magnitude. A purely per-component relative
    // criterion can never be met when one component vanishes by symmetry
    // (its total is roundoff noise), and for vector integrands the consumers
    // combine components, so accuracy relative to the dominant one is what
    // matters.
    let tol_scale = |totals: &[f64]| -> f64 {
        let m = totals.iter().fold(0.0f64, |a, t| a.max(t.abs()));
        opts.abs_tol.max(opts.rel_tol * m).max(f64::MIN_POSITIVE)
    };

    let priority_of = |err: &[f64], totals: &[f64]| -> f64 {
        let scale = tol_scale(totals);
        err.iter().fold(0.0f64, |a, e| a.max(e / scale))
    };

    // root cell
    let (i0, e0) = eval_cell(lo, hi, &mut evals, &mut buf, &mut f);
    for k in 0..dim {
        totals[k] = i0[k];
        tot_err[k] = e0[k];
    }
    let p0 = priority_of(&e0, &totals);
    cells.push(Cell { lo, hi, integral: i0, error: e0, depth: 0, id: next_id });
    heap.push(HeapEntry { priority: p0, id: next_id, index: 0 });
    next_id += 1;

    let converged = |totals: &[f64], tot_err: &[f64]| -> bool {
        let scale = tol_scale(totals);
        tot_err.iter().all(|e| *e <= scale)
    };

    while !converged(&totals, &tot_err) {
        if evals >= opts.max_evaluations {
            break;
        }
        // pop the live entry with the worst priority
        let entry = loop {
            match heap.pop() {
                Some(e) => {
                    // stale entries carry an outdated priority; cells are
                    // never re-pushed so index identity suffices
                    if cells[e.index].id == e.id {
                        break Some(e);
                    }
                }
                None => break None,
            }
        };
        let Some(entry) = entry else {
            break;
        };
        let idx = entry.index;
        if cells[idx].depth >= opts.max_depth {
            // deepest cell still worst: nothing more to do
            break;
        }

        // split along the relatively longest edge
        let (c_lo, c_hi, depth) = (cells[idx].lo, cells[idx].hi, cells[idx].depth);
        let mut axis = 0;
        let mut best = -1.0;
        for a in 0..3 {
            let rel = if init_width[a] > 0.0 { (c_hi[a] - c_lo[a]) / init_width[a] } else { 0.0 };
            if rel > best {
                best = rel;
                axis = a;
            }
        }
        let mid = 0.5 * (c_lo[axis] + c_hi[axis]);

        for k in 0..dim {
            totals[k] -= cells[idx].integral[k];
            tot_err[k] -= cells[idx].error[k];
        }

        let mut hi_a = c_hi;
        hi_a[axis] = mid;
        let mut lo_b = c_lo;
        lo_b[axis] = mid;

        let (ia, ea) = eval_cell(c_lo, hi_a, &mut evals, &mut buf, &mut f);
        let (ib, eb) = eval_cell(lo_b, c_hi, &mut evals, &mut buf, &mut f);
        for k in 0..dim {
            totals[k] += ia[k] + ib[k];
            tot_err[k] += ea[k] + eb[k];
        }

        let pa = priority_of(&ea, &totals);
        let pb = priority_of(&eb, &totals);

        // child A replaces the parent slot, child B appends
        cells[idx] = Cell {
            lo: c_lo,
            hi: hi_a,
            integral: ia,
            error: ea,
            depth: depth + 1,
            id: next_id,
        };
        heap.push(HeapEntry { priority: pa, id: next_id, index: idx });
        next_id += 1;
        cells.push(Cell {
            lo: lo_b,
            hi: c_hi,
            integral: ib,
            error: eb,
            depth: depth + 1,
            id: next_id,
        });
        heap.push(HeapEntry { priority: pb, id: next_id, index: cells.len() - 1 });
        next_id += 1;
    }

    // reproducible final reduction: fixed order, compensated
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by_key(|&i| cells[i].id);
    let mut values = vec![0.0; dim];
    let mut errors = vec![0.0; dim];
    let mut comp = vec![0.0; dim];
    for &i in &order {
        for k in 0..dim {
            let y = cells[i].integral[k] - comp[k];
            let t = values[k] + y;
            comp[k] = (t - values[k]) - y;
            values[k] = t;
            errors[k] += cells[i].error[k];
        }
    }
    let final_scale = tol_scale(&values);
    let ok = errors.iter().all(|e| *e <= final_scale);

    Ok(CubatureResult {
        values,
        error_bounds: errors,
        evaluations: evals,
        cells: cells.len(),
        converged: ok,
    })
}

/// Scalar convenience wrapper that turns a non-converged result into a
/// convergence error carrying the best estimate.
pub fn adaptive_cubature_scalar<F>(
    lo: [f64; 3],
    hi: [f64; 3],
    opts: &CubatureOptions,
    mut f: F,
) -> Result<(f64, f64)>
where
    F: FnMut(&[f64; 3]) -> f64,
{
    let res = adaptive_cubature(lo, hi, 1, opts, |u, out| out[0] = f(u))?;
    if !res.converged {
        return Err(Error::Convergence {
            msg: format!(
                "cubature budget exhausted after {} evaluations over {} cells",
                res.evaluations, res.cells
            ),
            estimate: res.values[0],
            error_bound: res.error_bounds[0],
        });
    }
    Ok((res.values[0], res.error_bounds[0]))
}
