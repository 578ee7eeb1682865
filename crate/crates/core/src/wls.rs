//! Polar-coordinate weighted least squares solved by Gauss–Newton.
//!
//! This is the conventional estimator: nonlinear `h(vm, va)`, repeated
//! linearization, zero-injection buses as heavily weighted `P = Q = 0`
//! pseudo-measurements. It can diverge and that is reported, not hidden.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::ldl::{minimum_degree_order, LdlFactor, PivotRule};
use crate::measurements::{FlowReading, MeasurementSet};
use crate::netmodel::{branch_current_form, AdmittanceBlocks, BranchEnd, Network, PhasorForm};
use crate::sparse::{inf_norm, weighted_gram, SparseRow};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolarState {
    pub vm: Vec<f64>,
    /// Radians.
    pub va: Vec<f64>,
    pub reference: usize,
}

impl PolarState {
    /// Unit magnitudes with every angle equal to the reference bus's case
    /// angle, so the estimate lives in the same angular frame as the case.
    pub fn flat(net: &Network) -> Self {
        let reference = net.slack_bus();
        let va_ref = net.buses[reference].va * PI / 180.0;
        Self {
            vm: vec![1.0; net.n_bus()],
            va: vec![va_ref; net.n_bus()],
            reference,
        }
    }

    pub fn from_case(net: &Network) -> Self {
        Self {
            vm: net.buses.iter().map(|b| b.vm).collect(),
            va: net.buses.iter().map(|b| b.va * PI / 180.0).collect(),
            reference: net.slack_bus(),
        }
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    /// `[V^R; V^I]`.
    pub fn to_rectangular(&self) -> Vec<f64> {
        let v = self.phasors();
        v.iter()
            .map(|c| c.re)
            .chain(v.iter().map(|c| c.im))
            .collect()
    }

    fn n(&self) -> usize {
        self.vm.len()
    }

    /// Column of `va[k]` in the Jacobian, `None` for the reference bus.
    fn va_col(&self, k: usize) -> Option<usize> {
        match k.cmp(&self.reference) {
            std::cmp::Ordering::Less => Some(k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(k - 1),
        }
    }

    fn vm_col(&self, k: usize) -> usize {
        self.n() - 1 + k
    }

    fn n_cols(&self) -> usize {
        2 * self.n() - 1
    }

    fn apply_step(&self, dx: &[f64], alpha: f64) -> Self {
        let mut next = self.clone();
        for k in 0..self.n() {
            if let Some(c) = self.va_col(k) {
                next.va[k] += alpha * dx[c];
            }
            next.vm[k] += alpha * dx[self.vm_col(k)];
        }
        next
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WlsInit {
    Flat,
    CaseData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    MaxIters,
    Nan,
    SingularGain,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WlsOptions {
    pub max_iters: usize,
    pub step_tol: f64,
    /// Pseudo-measurement weight as a multiple of the largest real weight.
    pub zi_weight_multiplier: f64,
    /// Step halving (at most four times) until the objective does not grow.
    pub line_search: bool,
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 20,
            step_tol: 1e-8,
            zi_weight_multiplier: 1e6,
            line_search: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WlsResult {
    pub state: PolarState,
    pub iterations: usize,
    pub converged: bool,
    pub divergence_reason: Option<DivergenceReason>,
    /// `‖JᵀW(z - h)‖∞` at the returned state.
    pub final_gradient_norm: f64,
    /// `Σ w (z - h)²`, pseudo-measurements included.
    pub objective: f64,
}

/// What a scalar channel measures.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelModel {
    Vm(usize),
    VRe(usize),
    VIm(usize),
    /// Real or imaginary part of `f(V)`.
    CurrentRe(PhasorForm),
    CurrentIm(PhasorForm),
    /// Real or imaginary part of `V_bus · conj(f(V))`.
    P(usize, PhasorForm),
    Q(usize, PhasorForm),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WlsChannel {
    pub model: ChannelModel,
    pub z: f64,
    pub w: f64,
    /// Zero-injection pseudo-measurement.
    pub pseudo: bool,
}

fn negated(form: &PhasorForm) -> PhasorForm {
    PhasorForm::new(form.terms().iter().map(|&(k, c)| (k, -c)).collect())
}

/// The measurement model shared by [`measurement_function`] and
/// [`measurement_jacobian`]. Injection currents and powers are in device
/// convention (the negated network injection), matching the synthesizer.
#[derive(Clone, Debug)]
pub struct WlsModel {
    pub channels: Vec<WlsChannel>,
}

impl WlsModel {
    pub fn new(
        net: &Network,
        adm: &AdmittanceBlocks,
        ms: &MeasurementSet,
        zi_weight_multiplier: f64,
    ) -> Self {
        let mut ch = Vec::new();
        let mut add = |model, z, w| {
            ch.push(WlsChannel {
                model,
                z,
                w,
                pseudo: false,
            })
        };
        for p in &ms.pmu {
            let dev = negated(&adm.row_form(p.bus));
            add(ChannelModel::VRe(p.bus), p.z_vr, p.w_v);
            add(ChannelModel::VIm(p.bus), p.z_vi, p.w_v);
            add(ChannelModel::CurrentRe(dev.clone()), p.z_ir, p.w_i);
            add(ChannelModel::CurrentIm(dev), p.z_ii, p.w_i);
        }
        for r in &ms.rtu {
            let dev = negated(&adm.row_form(r.bus));
            add(ChannelModel::Vm(r.bus), r.z_vm, r.w);
            add(ChannelModel::P(r.bus, dev.clone()), r.z_p, r.w);
            add(ChannelModel::Q(r.bus, dev), r.z_q, r.w);
        }
        for f in &ms.flows {
            let line = branch_current_form(net, f.branch, f.end).expect("validated branch");
            let (from, to) = net.branch_ends(f.branch).expect("validated branch");
            let e = match f.end {
                BranchEnd::From => from,
                BranchEnd::To => to,
            };
            match f.reading {
                FlowReading::Rtu {
                    z_vm,
                    z_pline,
                    z_qline,
                } => {
                    add(ChannelModel::Vm(e), z_vm, f.w);
                    add(ChannelModel::P(e, line.clone()), z_pline, f.w);
                    add(ChannelModel::Q(e, line), z_qline, f.w);
                }
                FlowReading::Pmu { z_ir, z_ii } => {
                    add(ChannelModel::CurrentRe(line.clone()), z_ir, f.w);
                    add(ChannelModel::CurrentIm(line), z_ii, f.w);
                }
            }
        }
        if let Some(a) = &ms.anchor {
            add(ChannelModel::VRe(a.bus), a.z_vr, a.weight);
            add(ChannelModel::VIm(a.bus), a.z_vi, a.weight);
        }
        let max_w = ch.iter().fold(0.0_f64, |m, c| m.max(c.w));
        let w_zi = zi_weight_multiplier * if max_w > 0.0 { max_w } else { 1.0 };
        for &z in &ms.zi_buses {
            let dev = negated(&adm.row_form(z));
            for model in [ChannelModel::P(z, dev.clone()), ChannelModel::Q(z, dev)] {
                ch.push(WlsChannel {
                    model,
                    z: 0.0,
                    w: w_zi,
                    pseudo: true,
                });
            }
        }
        Self { channels: ch }
    }

    pub fn evaluate(&self, st: &PolarState) -> Vec<f64> {
        let v = st.phasors();
        self.channels
            .iter()
            .map(|c| match &c.model {
                ChannelModel::Vm(b) => st.vm[*b],
                ChannelModel::VRe(b) => v[*b].re,
                ChannelModel::VIm(b) => v[*b].im,
                ChannelModel::CurrentRe(f) => f.eval(&v).re,
                ChannelModel::CurrentIm(f) => f.eval(&v).im,
                ChannelModel::P(b, f) => (v[*b] * f.eval(&v).conj()).re,
                ChannelModel::Q(b, f) => (v[*b] * f.eval(&v).conj()).im,
            })
            .collect()
    }

    /// Rows of `∂h/∂(va, vm)`, reference angle column removed.
    pub fn jacobian(&self, st: &PolarState) -> Vec<SparseRow> {
        let v = st.phasors();
        // dV_k/dva_k = j V_k, dV_k/dvm_k = V_k / vm_k
        let d_va = |k: usize| Complex64::i() * v[k];
        let d_vm = |k: usize| v[k] / st.vm[k];
        // complex derivatives of a phasor-valued channel, keyed by bus
        let form_grad = |f: &PhasorForm| -> BTreeMap<usize, (Complex64, Complex64)> {
            let mut m = BTreeMap::new();
            for &(k, c) in f.terms() {
                let e = m
                    .entry(k)
                    .or_insert((Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)));
                e.0 += c * d_va(k);
                e.1 += c * d_vm(k);
            }
            m
        };
        let to_row = |grad: BTreeMap<usize, (Complex64, Complex64)>, part: fn(Complex64) -> f64| {
            let mut entries = Vec::with_capacity(2 * grad.len());
            for (k, (ga, gm)) in grad {
                if let Some(col) = st.va_col(k) {
                    entries.push((col, part(ga)));
                }
                entries.push((st.vm_col(k), part(gm)));
            }
            SparseRow::from_entries(entries)
        };
        let single = |k: usize| BTreeMap::from([(k, (d_va(k), d_vm(k)))]);
        let power_grad = |b: usize, f: &PhasorForm| {
            // S = V_b conj(f): dS = dV_b conj(f) + V_b conj(df)
            let fv = f.eval(&v).conj();
            let mut g: BTreeMap<usize, (Complex64, Complex64)> = form_grad(f)
                .into_iter()
                .map(|(k, (a, m))| (k, (v[b] * a.conj(), v[b] * m.conj())))
                .collect();
            let e = g
                .entry(b)
                .or_insert((Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)));
            e.0 += d_va(b) * fv;
            e.1 += d_vm(b) * fv;
            g
        };
        let re: fn(Complex64) -> f64 = |c| c.re;
        let im: fn(Complex64) -> f64 = |c| c.im;
        self.channels
            .iter()
            .map(|c| match &c.model {
                ChannelModel::Vm(b) => SparseRow::from_entries([(st.vm_col(*b), 1.0)]),
                ChannelModel::VRe(b) => to_row(single(*b), re),
                ChannelModel::VIm(b) => to_row(single(*b), im),
                ChannelModel::CurrentRe(f) => to_row(form_grad(f), re),
                ChannelModel::CurrentIm(f) => to_row(form_grad(f), im),
                ChannelModel::P(b, f) => to_row(power_grad(*b, f), re),
                ChannelModel::Q(b, f) => to_row(power_grad(*b, f), im),
            })
            .collect()
    }

    fn weights(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.w).collect()
    }

    fn objective(&self, h: &[f64]) -> f64 {
        self.channels
            .iter()
            .zip(h)
            .map(|(c, hv)| c.w * (c.z - hv) * (c.z - hv))
            .sum()
    }

    fn gradient(&self, jac: &[SparseRow], h: &[f64], n_cols: usize) -> Vec<f64> {
        let mut g = vec![0.0; n_cols];
        for ((row, c), hv) in jac.iter().zip(&self.channels).zip(h) {
            let s = c.w * (c.z - hv);
            for &(col, v) in row.entries() {
                g[col] += s * v;
            }
        }
        g
    }
}

pub fn measurement_function(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
    st: &PolarState,
) -> Vec<f64> {
    WlsModel::new(net, adm, ms, WlsOptions::default().zi_weight_multiplier).evaluate(st)
}

pub fn measurement_jacobian(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
    st: &PolarState,
) -> Vec<SparseRow> {
    WlsModel::new(net, adm, ms, WlsOptions::default().zi_weight_multiplier).jacobian(st)
}

const GAIN_PIVOT_TOLERANCE: f64 = 1e-12;

pub fn estimate_wls(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
    init: WlsInit,
    opts: &WlsOptions,
) -> WlsResult {
    let model = WlsModel::new(net, adm, ms, opts.zi_weight_multiplier);
    let mut st = match init {
        WlsInit::Flat => PolarState::flat(net),
        WlsInit::CaseData => PolarState::from_case(net),
    };
    let n_cols = st.n_cols();
    let w = model.weights();
    let identity: Vec<usize> = (0..n_cols).collect();
    let mut perm: Option<Vec<usize>> = None;

    let mut iterations = 0;
    let mut reason = None;
    let mut converged = false;
    let mut h = model.evaluate(&st);
    while iterations < opts.max_iters {
        if !h.iter().all(|v| v.is_finite()) {
            reason = Some(DivergenceReason::Nan);
            break;
        }
        let jac = model.jacobian(&st);
        let gain = weighted_gram(&jac, &w, n_cols);
        let p = perm
            .get_or_insert_with(|| minimum_degree_order(&gain, &identity, &vec![false; n_cols]));
        let rule = PivotRule::positive_definite(&gain, GAIN_PIVOT_TOLERANCE);
        let factor = match LdlFactor::factor(&gain, p, &rule) {
            Ok(f) => f,
            Err(_) => {
                reason = Some(DivergenceReason::SingularGain);
                break;
            }
        };
        let dx = factor.solve(&model.gradient(&jac, &h, n_cols));
        iterations += 1;
        if !dx.iter().all(|v| v.is_finite()) {
            reason = Some(DivergenceReason::Nan);
            break;
        }
        let mut alpha = 1.0;
        let mut next = st.apply_step(&dx, alpha);
        let mut h_next = model.evaluate(&next);
        if opts.line_search {
            let current = model.objective(&h);
            for _ in 0..4 {
                if model.objective(&h_next) <= current {
                    break;
                }
                alpha *= 0.5;
                next = st.apply_step(&dx, alpha);
                h_next = model.evaluate(&next);
            }
        }
        st = next;
        h = h_next;
        if !st.vm.iter().chain(&st.va).all(|v| v.is_finite()) {
            reason = Some(DivergenceReason::Nan);
            break;
        }
        if alpha * inf_norm(&dx) < opts.step_tol {
            converged = true;
            break;
        }
    }
    if !converged && reason.is_none() {
        reason = Some(DivergenceReason::MaxIters);
    }
    let final_gradient_norm = if h.iter().all(|v| v.is_finite()) {
        inf_norm(&model.gradient(&model.jacobian(&st), &h, n_cols))
    } else {
        f64::NAN
    };
    WlsResult {
        objective: model.objective(&h),
        state: st,
        iterations,
        converged,
        divergence_reason: reason,
        final_gradient_norm,
    }
}
