use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{LmiBlock, SdpError, SdpProblem, SdpSolution, SolveOptions, SolveStatus};

struct Compiled {
    c: DMatrix<f64>,
    g: Vec<(usize, DMatrix<f64>)>,
    margin: f64,
}

impl Compiled {
    fn from_block(b: &LmiBlock) -> Self {
        Self {
            c: b.f.constant_part().clone(),
            g: b.f.terms().map(|(k, m)| (k, m.clone())).collect(),
            margin: b.margin,
        }
    }

    fn n(&self) -> usize {
        self.c.nrows()
    }

    fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut f = self.c.clone();
        for (v, g) in &self.g {
            if y[*v] != 0.0 {
                f += g * y[*v];
            }
        }
        f
    }
}

/// Which barrier we are centring on.
#[derive(Clone, Copy, PartialEq)]
enum Phase {
    /// Variables `(y, s)`; slack `S_b = (s - margin) I - F_b(y)`.
    One { s_floor: f64 },
    /// Variables `y`; slack `S_b = -margin I - F_b(y)`.
    Two,
}

struct Barrier<'a> {
    blocks: &'a [Compiled],
    bounds: &'a [(f64, f64)],
    c: Vec<f64>,
    dim: usize,
    phase: Phase,
}

impl Barrier<'_> {
    fn nvars(&self) -> usize {
        match self.phase {
            Phase::One { .. } => self.dim + 1,
            Phase::Two => self.dim,
        }
    }

    /// Barrier parameter `m`: total number of logarithms.
    fn degree(&self) -> f64 {
        let mut m: usize = self.blocks.iter().map(Compiled::n).sum();
        for &(lo, hi) in self.bounds {
            m += lo.is_finite() as usize + hi.is_finite() as usize;
        }
        if let Phase::One { .. } = self.phase {
            m += 1;
        }
        m as f64
    }

    fn slack(&self, b: &Compiled, x: &[f64]) -> DMatrix<f64> {
        let shift = match self.phase {
            Phase::One { .. } => x[self.dim] - b.margin,
            Phase::Two => -b.margin,
        };
        let mut s = -b.eval(&x[..self.dim]);
        for i in 0..b.n() {
            s[(i, i)] += shift;
        }
        s
    }

    /// Objective plus barrier, or `None` outside the domain.
    fn value(&self, x: &[f64], t: f64) -> Option<f64> {
        let mut f = t * self.c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        for b in self.blocks {
            let chol = Cholesky::new(self.slack(b, x))?;
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            f -= logdet;
        }
        for (v, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_finite() {
                let d = x[v] - lo;
                if d <= 0.0 {
                    return None;
                }
                f -= d.ln();
            }
            if hi.is_finite() {
                let d = hi - x[v];
                if d <= 0.0 {
                    return None;
                }
                f -= d.ln();
            }
        }
        if let Phase::One { s_floor } = self.phase {
            let d = x[self.dim] - s_floor;
            if d <= 0.0 {
                return None;
            }
            f -= d.ln();
        }
        f.is_finite().then_some(f)
    }

    fn grad_hess(&self, x: &[f64], t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let nv = self.nvars();
        let mut g = DVector::from_iterator(nv, self.c.iter().map(|c| c * t));
        let mut h = DMatrix::zeros(nv, nv);
        let sidx = self.dim;
        for b in self.blocks {
            let n = b.n();
            let chol = Cholesky::new(self.slack(b, x))?;
            let sinv = chol.inverse();
            // dS/dy_v = -G_v, dS/ds = I
            let w: Vec<(usize, DMatrix<f64>)> =
                b.g.iter().map(|(v, gm)| (*v, &sinv * gm)).collect();
            for (a, (va, wa)) in w.iter().enumerate() {
                g[*va] += wa.trace();
                for (vb, wb) in w.iter().skip(a) {
                    let mut tr = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            tr += wa[(i, j)] * wb[(j, i)];
                        }
                    }
                    h[(*va, *vb)] += tr;
                    if va != vb {
                        h[(*vb, *va)] += tr;
                    }
                }
            }
            if let Phase::One { .. } = self.phase {
                g[sidx] -= sinv.trace();
                let sinv2 = &sinv * &sinv;
                h[(sidx, sidx)] += sinv2.trace();
                for (v, gm) in &b.g {
                    let tr = -(&sinv2 * gm).trace();
                    h[(*v, sidx)] += tr;
                    h[(sidx, *v)] += tr;
                }
            }
        }
        for (v, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_finite() {
                let d = x[v] - lo;
                g[v] -= 1.0 / d;
                h[(v, v)] += 1.0 / (d * d);
            }
            if hi.is_finite() {
                let d = hi - x[v];
                g[v] += 1.0 / d;
                h[(v, v)] += 1.0 / (d * d);
            }
        }
        if let Phase::One { s_floor } = self.phase {
            let d = x[sidx] - s_floor;
            g[sidx] -= 1.0 / d;
            h[(sidx, sidx)] += 1.0 / (d * d);
        }
        Some((g, h))
    }
}

fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut hr = h.clone();
        if reg > 0.0 {
            for i in 0..hr.nrows() {
                hr[(i, i)] += reg * scale;
            }
        }
        if let Some(ch) = Cholesky::<f64, Dyn>::new(hr) {
            let d = ch.solve(&(-g));
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
    }
    None
}

enum CenterOutcome {
    Centered(usize),
    Stalled(usize),
    /// Phase I reached a strictly feasible point and was told to stop there.
    EarlyExit(usize),
}

fn center(
    bar: &Barrier<'_>,
    x: &mut Vec<f64>,
    t: f64,
    max_newton: usize,
    early_exit: bool,
) -> CenterOutcome {
    let mut f = match bar.value(x, t) {
        Some(f) => f,
        None => return CenterOutcome::Stalled(0),
    };
    for it in 0..max_newton {
        if early_exit && x[bar.dim] < 0.0 {
            return CenterOutcome::EarlyExit(it);
        }
        let Some((g, h)) = bar.grad_hess(x, t) else {
            return CenterOutcome::Stalled(it);
        };
        let Some(dx) = newton_direction(&g, &h) else {
            return CenterOutcome::Stalled(it);
        };
        let slope = g.dot(&dx);
        if -slope / 2.0 <= 1e-10 {
            return CenterOutcome::Centered(it);
        }
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(ft) = bar.value(&trial, t) {
                if ft <= f + 0.25 * alpha * slope {
                    *x = trial;
                    f = ft;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                return CenterOutcome::Stalled(it);
            }
        }
    }
    CenterOutcome::Stalled(max_newton)
}

/// Largest eigenvalue of a symmetric matrix by Cholesky bisection:
/// `λ_max < μ` iff `μI - M` admits a Cholesky factorisation.
pub fn max_eig_bisection(m: &DMatrix<f64>, tol: f64) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r: f64 = (0..n).filter(|&j| j != i).map(|j| sym[(i, j)].abs()).sum();
        lo = lo.min(sym[(i, i)] - r);
        hi = hi.max(sym[(i, i)] + r);
    }
    // λ_max is at least the largest diagonal entry
    lo = lo.max((0..n).map(|i| sym[(i, i)]).fold(f64::NEG_INFINITY, f64::max));
    let pd = |mu: f64| {
        let mut s = -sym.clone();
        for i in 0..n {
            s[(i, i)] += mu;
        }
        Cholesky::new(s).is_some()
    };
    let mut hi = hi + tol.max(f64::EPSILON * hi.abs());
    while !pd(hi) {
        hi += (hi - lo).abs().max(tol) + 1.0;
    }
    let mut lo = lo - tol;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if pd(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn violation(blocks: &[Compiled], y: &[f64]) -> f64 {
    blocks
        .iter()
        .map(|b| max_eig_bisection(&b.eval(y), 1e-13) + b.margin)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn initial_point(bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
            (false, false) => 0.0,
            _ if lo < 0.0 && hi > 0.0 => {
                let room = (-lo).min(hi);
                if room > 1e-3 {
                    0.0
                } else {
                    0.5 * (lo + hi)
                }
            }
            (true, false) => lo + lo.abs().max(1.0),
            (false, true) => hi - hi.abs().max(1.0),
            (true, true) => lo + 0.5 * (hi - lo).min(lo.abs().max(1.0)),
        })
        .collect()
}

/// Solve an LMI problem with a two-phase barrier method.
///
/// Phase I minimises the common slack `s` with `F_b(y) + margin_b I ⪯ sI`;
/// without an objective it runs to the max-margin point. Phase II, only when
/// an objective is present, minimises `cᵀy` from that strictly feasible point.
pub fn solve(problem: &SdpProblem, opts: &SolveOptions) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    if !(opts.tol > 0.0) || opts.max_outer == 0 || opts.max_newton == 0 {
        return Err(SdpError::InvalidOption(format!(
            "tol {} max_outer {} max_newton {}",
            opts.tol, opts.max_outer, opts.max_newton
        )));
    }
    let blocks: Vec<Compiled> = problem
        .blocks
        .iter()
        .map(|b| {
            if opts.reduce_structural {
                Compiled::from_block(&b.reduced())
            } else {
                Compiled::from_block(b)
            }
        })
        .filter(|c| c.n() > 0)
        .collect();
    let dim = problem.dim;
    let y0 = initial_point(&problem.bounds);
    let objective_value = |y: &[f64]| {
        problem
            .objective
            .as_ref()
            .map(|c| c.iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
    };

    if blocks.is_empty() {
        return Ok(SdpSolution {
            status: SolveStatus::Feasible,
            violation: f64::NEG_INFINITY,
            objective: objective_value(&y0),
            y: y0,
            iterations: 0,
        });
    }

    // Phase I
    let v0 = violation(&blocks, &y0);
    let s0 = v0 + v0.abs().max(1.0) * 0.5;
    let s_floor = v0 - 1e4 * v0.abs().max(1.0);
    let mut c1 = vec![0.0; dim + 1];
    c1[dim] = 1.0;
    let bar1 = Barrier {
        blocks: &blocks,
        bounds: &problem.bounds,
        c: c1,
        dim,
        phase: Phase::One { s_floor },
    };
    let mut x: Vec<f64> = y0.iter().copied().chain(std::iter::once(s0)).collect();
    let m1 = bar1.degree();
    let stop_early = problem.objective.is_some() && !opts.max_margin;
    let mut t = 1.0 / v0.abs().max(1e-6);
    let mut iterations = 0;
    let mut phase1_done = false;
    let mut stalled = false;
    for _ in 0..opts.max_outer {
        match center(&bar1, &mut x, t, opts.max_newton, stop_early) {
            CenterOutcome::Centered(k) => iterations += k,
            CenterOutcome::EarlyExit(k) => {
                iterations += k;
                phase1_done = true;
                break;
            }
            CenterOutcome::Stalled(k) => {
                iterations += k;
                stalled = true;
                break;
            }
        }
        if stop_early && x[dim] < 0.0 {
            phase1_done = true;
            break;
        }
        if m1 / t <= opts.tol {
            phase1_done = true;
            break;
        }
        t *= 10.0;
    }
    let y1: Vec<f64> = x[..dim].to_vec();
    let viol1 = violation(&blocks, &y1);
    if viol1 >= 0.0 {
        let status = if phase1_done || (stalled && m1 / t <= opts.tol.sqrt()) {
            SolveStatus::Infeasible
        } else if stalled {
            SolveStatus::NumericalFailure
        } else {
            SolveStatus::MaxIter
        };
        log::debug!("sdp phase I ended with violation {viol1:.3e} ({status:?})");
        return Ok(SdpSolution {
            status,
            violation: viol1,
            objective: objective_value(&y1),
            y: y1,
            iterations,
        });
    }
    let Some(c) = problem.objective.clone() else {
        return Ok(SdpSolution {
            status: SolveStatus::Feasible,
            violation: viol1,
            objective: None,
            y: y1,
            iterations,
        });
    };

    // Phase II
    let bar2 = Barrier {
        blocks: &blocks,
        bounds: &problem.bounds,
        c,
        dim,
        phase: Phase::Two,
    };
    let mut y = y1.clone();
    if bar2.value(&y, 1.0).is_none() {
        // margin too thin to start from: hand back the phase I point
        return Ok(SdpSolution {
            status: SolveStatus::Feasible,
            violation: viol1,
            objective: objective_value(&y1),
            y: y1,
            iterations,
        });
    }
    let m2 = bar2.degree();
    let obj0 = objective_value(&y).unwrap_or(0.0).abs();
    let mut t = m2 / obj0.max(1e-6);
    let mut status = SolveStatus::MaxIter;
    for _ in 0..opts.max_outer {
        match center(&bar2, &mut y, t, opts.max_newton, false) {
            CenterOutcome::Centered(k) | CenterOutcome::EarlyExit(k) => iterations += k,
            CenterOutcome::Stalled(k) => {
                iterations += k;
                log::debug!("sdp phase II stalled at gap {:.3e}", m2 / t);
                status = SolveStatus::Feasible;
                break;
            }
        }
        if m2 / t <= opts.tol {
            status = SolveStatus::Feasible;
            break;
        }
        t *= 10.0;
    }
    let viol = violation(&blocks, &y);
    Ok(SdpSolution {
        status,
        violation: viol,
        objective: objective_value(&y),
        y,
        iterations,
    })
}
