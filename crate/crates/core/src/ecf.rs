//! Equivalent-circuit state estimation as a single equality-constrained QP.
//!
//! Every measurement device contributes linear residuals in
//! `x = [V^R; V^I]`; zero-injection buses contribute exact KCL rows `C x = 0`.
//! Buses that are neither measured nor zero-injection contribute nothing:
//! their unknown injection is a free slack that can always absorb their KCL
//! equation, so it is eliminated together with the equation.
//!
//! The minimizer solves the KKT system
//!
//! ```text
//! | 2H  Cᵀ | | x |   | -g |
//! | C   0  | | λ | = |  0 |
//! ```
//!
//! with one sparse `LDLᵀ` factorization and no initial guess.

use std::time::Instant;

use num_complex::Complex64;
use serde::Serialize;
use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::ldl::{diagonal, minimum_degree_order, LdlFactor, PivotRule};
use crate::measurements::{
    rtu_shunt_params, validate_measurement_set, FlowReading, MeasurementSet, ValidationIssue,
};
use crate::netmodel::{branch_current_form, injection_rows, AdmittanceBlocks, Network};
use crate::sparse::{inf_norm, mat_t_vec, mat_vec, rows_to_csr, weighted_gram, SparseRow};
use crate::synth::phasors;

/// Relative pivot floor below which the KKT matrix is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;
const MAX_REFINEMENT_STEPS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EcfError {
    #[error("no voltage phasor or anchor fixes the reference; the problem is not anchored")]
    AnchorMissing,
    #[error("invalid measurement set: {0:?}")]
    Invalid(ValidationIssue),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Re,
    Im,
}

/// Which scalar channel a residual row belongs to. `device` indexes the
/// matching list in the [`MeasurementSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    PmuVoltage,
    PmuCurrent,
    RtuInjection,
    RtuFlow,
    PmuFlow,
    Anchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Channel {
    pub kind: ChannelKind,
    pub device: usize,
    pub part: Part,
}

/// One weighted residual `weight * (row · x - rhs)²` of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRow {
    pub channel: Channel,
    pub row: SparseRow,
    pub rhs: f64,
    pub weight: f64,
}

impl ResidualRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.row.dot(x) - self.rhs
    }
}

/// `min xᵀHx + g·x + c0  s.t.  C x = 0`.
///
/// `H`, `g` and `c0` are the weighted objective multiplied by
/// `weight_scale` (the reciprocal of the largest weight), which leaves the
/// minimizer unchanged and keeps the KKT system near unit scale.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub n_bus: usize,
    pub h: CsMat<f64>,
    pub g: Vec<f64>,
    pub c0: f64,
    pub c: CsMat<f64>,
    /// Constraint row -> (zero-injection bus, real/imaginary KCL part).
    pub row_index: Vec<(usize, Part)>,
    /// Objective residuals, in channel order.
    pub residuals: Vec<ResidualRow>,
    pub weight_scale: f64,
}

impl QpProblem {
    pub fn n_state(&self) -> usize {
        2 * self.n_bus
    }

    pub fn n_constraints(&self) -> usize {
        self.c.rows()
    }

    /// Normalized objective `xᵀHx + g·x + c0`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let hx = mat_vec(&self.h, x);
        dot(x, &hx) + dot(&self.g, x) + self.c0
    }

    /// Objective in measurement weights, `Σ w r²`. Summed over the residual
    /// rows when they are present, which avoids the cancellation between
    /// `c0` and the other terms near a good fit.
    pub fn weighted_objective(&self, x: &[f64]) -> f64 {
        if self.residuals.is_empty() {
            return self.objective(x) / self.weight_scale;
        }
        self.residuals
            .iter()
            .map(|r| {
                let v = r.eval(x);
                r.weight * v * v
            })
            .sum()
    }

    pub fn constraint_violation(&self, x: &[f64]) -> f64 {
        inf_norm(&mat_vec(&self.c, x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn assemble_qp(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
) -> Result<QpProblem, EcfError> {
    let report = validate_measurement_set(net, ms);
    if let Some(issue) = report.structural().next() {
        return Err(EcfError::Invalid(issue.clone()));
    }
    if report.anchor_missing() {
        return Err(EcfError::AnchorMissing);
    }
    let n = net.n_bus();
    let inj = |bus| injection_rows(adm, bus).expect("validated bus index");
    let unit = |col: usize, v: f64| SparseRow::from_entries([(col, v)]);

    let mut res: Vec<ResidualRow> = Vec::new();
    let mut push = |kind, device, part, row: SparseRow, rhs: f64, weight: f64| {
        res.push(ResidualRow {
            channel: Channel { kind, device, part },
            row,
            rhs,
            weight,
        })
    };

    for (k, p) in ms.pmu.iter().enumerate() {
        let (yr, yi) = inj(p.bus);
        // Y_i x + z_I = -n
        push(ChannelKind::PmuCurrent, k, Part::Re, yr, -p.z_ir, p.w_i);
        push(ChannelKind::PmuCurrent, k, Part::Im, yi, -p.z_ii, p.w_i);
        push(
            ChannelKind::PmuVoltage,
            k,
            Part::Re,
            unit(p.bus, 1.0),
            p.z_vr,
            p.w_v,
        );
        push(
            ChannelKind::PmuVoltage,
            k,
            Part::Im,
            unit(n + p.bus, 1.0),
            p.z_vi,
            p.w_v,
        );
    }
    for (k, r) in ms.rtu.iter().enumerate() {
        let sp = rtu_shunt_params(r.z_vm, r.z_p, r.z_q).expect("validated magnitude");
        let (yr, yi) = inj(r.bus);
        // Y_i x + (G - jB) V_i = -n
        let re = yr.axpy(
            1.0,
            &SparseRow::from_entries([(r.bus, sp.g), (n + r.bus, sp.b)]),
        );
        let im = yi.axpy(
            1.0,
            &SparseRow::from_entries([(n + r.bus, sp.g), (r.bus, -sp.b)]),
        );
        push(ChannelKind::RtuInjection, k, Part::Re, re, 0.0, r.w);
        push(ChannelKind::RtuInjection, k, Part::Im, im, 0.0, r.w);
    }
    for (k, f) in ms.flows.iter().enumerate() {
        let (lr, li) = branch_current_form(net, f.branch, f.end)
            .expect("validated branch")
            .real_rows(n);
        match f.reading {
            FlowReading::Rtu {
                z_vm,
                z_pline,
                z_qline,
            } => {
                let sp = rtu_shunt_params(z_vm, z_pline, z_qline).expect("validated magnitude");
                let (from, to) = net.branch_ends(f.branch).expect("in service");
                let e = match f.end {
                    crate::netmodel::BranchEnd::From => from,
                    crate::netmodel::BranchEnd::To => to,
                };
                // I_line(x) - (G - jB) V_e = n
                let re = lr.axpy(-1.0, &SparseRow::from_entries([(e, sp.g), (n + e, sp.b)]));
                let im = li.axpy(-1.0, &SparseRow::from_entries([(n + e, sp.g), (e, -sp.b)]));
                push(ChannelKind::RtuFlow, k, Part::Re, re, 0.0, f.w);
                push(ChannelKind::RtuFlow, k, Part::Im, im, 0.0, f.w);
            }
            FlowReading::Pmu { z_ir, z_ii } => {
                push(ChannelKind::PmuFlow, k, Part::Re, lr, z_ir, f.w);
                push(ChannelKind::PmuFlow, k, Part::Im, li, z_ii, f.w);
            }
        }
    }
    if let Some(a) = &ms.anchor {
        push(
            ChannelKind::Anchor,
            0,
            Part::Re,
            unit(a.bus, 1.0),
            a.z_vr,
            a.weight,
        );
        push(
            ChannelKind::Anchor,
            0,
            Part::Im,
            unit(n + a.bus, 1.0),
            a.z_vi,
            a.weight,
        );
    }

    let max_w = res.iter().fold(0.0_f64, |m, r| m.max(r.weight));
    let weight_scale = if max_w > 0.0 { 1.0 / max_w } else { 1.0 };
    let scaled_w: Vec<f64> = res.iter().map(|r| r.weight * weight_scale).collect();
    let rows: Vec<SparseRow> = res.iter().map(|r| r.row.clone()).collect();
    let h = weighted_gram(&rows, &scaled_w, 2 * n);
    let mut g = vec![0.0; 2 * n];
    let mut c0 = 0.0;
    for (r, &w) in res.iter().zip(&scaled_w) {
        for &(col, v) in r.row.entries() {
            g[col] -= 2.0 * w * r.rhs * v;
        }
        c0 += w * r.rhs * r.rhs;
    }

    let mut c_rows = Vec::with_capacity(2 * ms.zi_buses.len());
    let mut row_index = Vec::with_capacity(2 * ms.zi_buses.len());
    for &z in &ms.zi_buses {
        let (yr, yi) = inj(z);
        c_rows.push(yr);
        c_rows.push(yi);
        row_index.push((z, Part::Re));
        row_index.push((z, Part::Im));
    }
    let c = rows_to_csr(&c_rows, 2 * n);

    Ok(QpProblem {
        n_bus: n,
        h,
        g,
        c0,
        c,
        row_index,
        residuals: res,
        weight_scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Optimal,
    Singular,
    AnchorMissing,
}

/// Recovered slack for one scalar channel. For injection devices this is the
/// current-source noise `n` of `Y_i x + (device current) + n = 0`; for flow
/// meters `I_line(x) - model = n`; for voltage channels `V - z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelNoise {
    pub channel: Channel,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateResult {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Weighted objective `Σ w r²` at `x`.
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: EstimateStatus,
    pub noise: Vec<ChannelNoise>,
    pub solve_time: f64,
    pub factorizations: usize,
}

impl EstimateResult {
    fn failed(
        status: EstimateStatus,
        n_state: usize,
        m: usize,
        solve_time: f64,
        factorizations: usize,
    ) -> Self {
        Self {
            x: vec![f64::NAN; n_state],
            lambda: vec![f64::NAN; m],
            objective: f64::NAN,
            kkt_residual: f64::INFINITY,
            status,
            noise: Vec::new(),
            solve_time,
            factorizations,
        }
    }
}

/// Builds the KKT matrix with the augmented block `2H + ρCᵀC`. On the
/// feasible set `Cx = 0` the extra term vanishes, so the solution is that of
/// the plain KKT system, while the leading block becomes positive definite
/// whenever the problem is observable.
fn augmented_kkt(qp: &QpProblem) -> (CsMat<f64>, Vec<f64>) {
    let n2 = qp.n_state();
    let m = qp.n_constraints();
    let h_diag = diagonal(&qp.h);
    let c_rows: Vec<SparseRow> = (0..m)
        .map(|r| {
            let view = qp.c.outer_view(r).unwrap();
            SparseRow::from_entries(view.iter().map(|(c, &v)| (c, v)))
        })
        .collect();
    let ctc = weighted_gram(&c_rows, &vec![1.0; m], n2);
    let ctc_diag = diagonal(&ctc);
    let max_h = h_diag.iter().fold(0.0_f64, |a, &b| a.max(b));
    let max_ctc = ctc_diag.iter().fold(0.0_f64, |a, &b| a.max(b));
    let rho = if max_ctc > 0.0 {
        2.0 * max_h.max(1e-300) / max_ctc
    } else {
        0.0
    };

    let mut tri = TriMat::new((n2 + m, n2 + m));
    for (&v, (r, c)) in qp.h.iter() {
        tri.add_triplet(r, c, 2.0 * v);
    }
    if rho > 0.0 {
        for (&v, (r, c)) in ctc.iter() {
            tri.add_triplet(r, c, rho * v);
        }
    }
    for (&v, (r, c)) in qp.c.iter() {
        tri.add_triplet(n2 + r, c, v);
        tri.add_triplet(c, n2 + r, v);
    }
    let k = tri.to_csc();

    let a_diag = diagonal(&k);
    let max_a = a_diag[..n2].iter().fold(0.0_f64, |a, &b| a.max(b));
    let mut scale = a_diag;
    for (r, row) in c_rows.iter().enumerate() {
        scale[n2 + r] = if max_a > 0.0 {
            row.norm_sq() / max_a
        } else {
            0.0
        };
    }
    (k, scale)
}

fn kkt_matvec(qp: &QpProblem, x: &[f64], lambda: &[f64]) -> Vec<f64> {
    let mut top: Vec<f64> = mat_vec(&qp.h, x).iter().map(|v| 2.0 * v).collect();
    let ct_l = mat_t_vec(&qp.c, lambda);
    for (t, v) in top.iter_mut().zip(ct_l) {
        *t += v;
    }
    top.extend(mat_vec(&qp.c, x));
    top
}

pub fn solve_qp(qp: &QpProblem) -> EstimateResult {
    let start = Instant::now();
    let n = qp.n_bus;
    let n2 = qp.n_state();
    let m = qp.n_constraints();

    let (k, scale) = augmented_kkt(qp);
    // Group each bus's (V^R, V^I) pair and each zero-injection bus's pair of
    // KCL rows; constraint groups go last.
    let mut group_of: Vec<usize> = (0..n2).map(|v| v % n).collect();
    let mut deferred = vec![false; n];
    let mut last_bus = None;
    for &(bus, _) in &qp.row_index {
        if last_bus != Some(bus) {
            deferred.push(true);
            last_bus = Some(bus);
        }
        group_of.push(deferred.len() - 1);
    }
    let perm = minimum_degree_order(&k, &group_of, &deferred);
    let mut signs = vec![1i8; n2];
    signs.resize(n2 + m, -1);
    let rule = PivotRule {
        signs,
        scale,
        rel_tol: PIVOT_TOLERANCE,
    };

    let factor = match LdlFactor::factor(&k, &perm, &rule) {
        Ok(f) => f,
        Err(_) => {
            return EstimateResult::failed(
                EstimateStatus::Singular,
                n2,
                m,
                start.elapsed().as_secs_f64(),
                1,
            )
        }
    };

    let mut rhs: Vec<f64> = qp.g.iter().map(|v| -v).collect();
    rhs.resize(rhs.len() + m, 0.0);
    let mut sol = factor.solve(&rhs);
    // Refine against the unaugmented system with the same factors.
    let residual_of = |sol: &[f64]| -> Vec<f64> {
        let kx = kkt_matvec(qp, &sol[..n2], &sol[n2..]);
        rhs.iter().zip(kx).map(|(b, v)| b - v).collect()
    };
    let mut r = residual_of(&sol);
    let mut rnorm = inf_norm(&r);
    for _ in 0..MAX_REFINEMENT_STEPS {
        let d = factor.solve(&r);
        let cand: Vec<f64> = sol.iter().zip(&d).map(|(s, d)| s + d).collect();
        let rc = residual_of(&cand);
        let rc_norm = inf_norm(&rc);
        if !(rc_norm < rnorm) {
            break;
        }
        sol = cand;
        r = rc;
        rnorm = rc_norm;
    }

    let x = sol[..n2].to_vec();
    let lambda = sol[n2..].to_vec();
    if !x.iter().chain(&lambda).all(|v| v.is_finite()) {
        return EstimateResult::failed(
            EstimateStatus::Singular,
            n2,
            m,
            start.elapsed().as_secs_f64(),
            1,
        );
    }
    let noise = qp
        .residuals
        .iter()
        .map(|rr| ChannelNoise {
            channel: rr.channel,
            value: noise_sign(rr.channel.kind) * rr.eval(&x),
            weight: rr.weight,
        })
        .collect();
    let objective = qp.weighted_objective(&x);
    let kkt = rnorm;
    EstimateResult {
        x,
        lambda,
        objective,
        kkt_residual: kkt,
        status: EstimateStatus::Optimal,
        noise,
        solve_time: start.elapsed().as_secs_f64(),
        factorizations: 1,
    }
}

fn noise_sign(kind: ChannelKind) -> f64 {
    match kind {
        ChannelKind::PmuCurrent | ChannelKind::RtuInjection => -1.0,
        _ => 1.0,
    }
}

/// `‖[2Hx + g + Cᵀλ; Cx]‖∞`.
pub fn kkt_residual(qp: &QpProblem, x: &[f64], lambda: &[f64]) -> f64 {
    let mut r = kkt_matvec(qp, x, lambda);
    for (ri, gi) in r.iter_mut().zip(&qp.g) {
        *ri += gi;
    }
    inf_norm(&r)
}

/// Assembles and solves in one call, mapping a missing anchor to a status.
pub fn estimate(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
) -> Result<EstimateResult, EcfError> {
    match assemble_qp(net, adm, ms) {
        Ok(qp) => Ok(solve_qp(&qp)),
        Err(EcfError::AnchorMissing) => Ok(EstimateResult::failed(
            EstimateStatus::AnchorMissing,
            2 * net.n_bus(),
            2 * ms.zi_buses.len(),
            0.0,
            0,
        )),
        Err(e) => Err(e),
    }
}

/// Evaluates every device equation at `x` directly from the measurements,
/// in the same channel order as [`assemble_qp`].
pub fn recover_noise_terms(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
    x: &[f64],
) -> Vec<ChannelNoise> {
    let v = phasors(x);
    let mut out = Vec::new();
    let mut push = |kind, device, value: Complex64, weight: f64| {
        out.push(ChannelNoise {
            channel: Channel {
                kind,
                device,
                part: Part::Re,
            },
            value: value.re,
            weight,
        });
        out.push(ChannelNoise {
            channel: Channel {
                kind,
                device,
                part: Part::Im,
            },
            value: value.im,
            weight,
        });
    };
    for (k, p) in ms.pmu.iter().enumerate() {
        let i_net = adm.row_form(p.bus).eval(&v);
        push(
            ChannelKind::PmuCurrent,
            k,
            -(i_net + Complex64::new(p.z_ir, p.z_ii)),
            p.w_i,
        );
        push(
            ChannelKind::PmuVoltage,
            k,
            v[p.bus] - Complex64::new(p.z_vr, p.z_vi),
            p.w_v,
        );
    }
    for (k, r) in ms.rtu.iter().enumerate() {
        let i_net = adm.row_form(r.bus).eval(&v);
        let sp = rtu_shunt_params(r.z_vm, r.z_p, r.z_q).expect("positive magnitude");
        let model = Complex64::new(sp.g, -sp.b) * v[r.bus];
        push(ChannelKind::RtuInjection, k, -(i_net + model), r.w);
    }
    for (k, f) in ms.flows.iter().enumerate() {
        let i_line = branch_current_form(net, f.branch, f.end)
            .expect("in service")
            .eval(&v);
        match f.reading {
            FlowReading::Rtu {
                z_vm,
                z_pline,
                z_qline,
            } => {
                let (from, to) = net.branch_ends(f.branch).expect("in service");
                let e = match f.end {
                    crate::netmodel::BranchEnd::From => from,
                    crate::netmodel::BranchEnd::To => to,
                };
                let sp = rtu_shunt_params(z_vm, z_pline, z_qline).expect("positive magnitude");
                push(
                    ChannelKind::RtuFlow,
                    k,
                    i_line - Complex64::new(sp.g, -sp.b) * v[e],
                    f.w,
                );
            }
            FlowReading::Pmu { z_ir, z_ii } => {
                push(
                    ChannelKind::PmuFlow,
                    k,
                    i_line - Complex64::new(z_ir, z_ii),
                    f.w,
                );
            }
        }
    }
    if let Some(a) = &ms.anchor {
        push(
            ChannelKind::Anchor,
            0,
            v[a.bus] - Complex64::new(a.z_vr, a.z_vi),
            a.weight,
        );
    }
    out
}
