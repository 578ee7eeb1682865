//! Evaluation metrics: optimization residual, measurement-space error and
//! state error.
//!
//! Each method is scored in its own measurement space. For a scalar channel
//! we record the measured side `m`, the estimate `e` and the true value `t`:
//!
//! * `res   = Σ w (m - e)² / n_meter`
//! * `mse_z = Σ w (e - t)² / n_meter`
//! * `mse_x = ‖x_est - x_true‖² / n_bus`
//!
//! For the ECF method the channels are currents and voltages; an RTU
//! channel's measured side is its linearized device current `(G - jB) V`
//! at the estimate, its estimate is the network current `-(Y x)_i` and its
//! truth is `-(Y x_true)_i`. Zero-injection rows are not channels.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::ecf::{ChannelKind, Part};
use crate::measurements::{rtu_shunt_params, FlowReading, MeasurementSet};
use crate::netmodel::{branch_current_form, AdmittanceBlocks, BranchEnd, Network};
use crate::synth::phasors;
use crate::wls::{ChannelModel, PolarState, WlsModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

fn check(left: usize, right: usize) -> Result<(), MetricsError> {
    if left == right {
        Ok(())
    } else {
        Err(MetricsError::LengthMismatch { left, right })
    }
}

fn weighted_mean_sq(a: &[f64], b: &[f64], w: &[f64]) -> Result<f64, MetricsError> {
    check(a.len(), b.len())?;
    check(a.len(), w.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

pub fn residual_metric(z: &[f64], z_est: &[f64], w: &[f64]) -> Result<f64, MetricsError> {
    weighted_mean_sq(z, z_est, w)
}

pub fn mse_z(z_est: &[f64], z_true: &[f64], w: &[f64]) -> Result<f64, MetricsError> {
    weighted_mean_sq(z_est, z_true, w)
}

/// Divided by the bus count, not the state length.
pub fn mse_x(x_est: &[f64], x_true: &[f64], n_bus: usize) -> Result<f64, MetricsError> {
    check(x_est.len(), x_true.len())?;
    let s: f64 = x_est
        .iter()
        .zip(x_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / n_bus as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ecf,
    Wls,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelValue {
    pub label: String,
    pub measured: f64,
    pub estimated: f64,
    pub truth: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub method: Method,
    pub res: f64,
    pub mse_z: f64,
    pub mse_x: f64,
    pub n_meter: usize,
    pub n_bus: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelValue>,
}

impl MetricsReport {
    pub fn new(
        method: Method,
        channels: Vec<ChannelValue>,
        x_est: &[f64],
        x_true: &[f64],
        n_bus: usize,
    ) -> Result<Self, MetricsError> {
        let m: Vec<f64> = channels.iter().map(|c| c.measured).collect();
        let e: Vec<f64> = channels.iter().map(|c| c.estimated).collect();
        let t: Vec<f64> = channels.iter().map(|c| c.truth).collect();
        let w: Vec<f64> = channels.iter().map(|c| c.weight).collect();
        Ok(Self {
            method,
            res: residual_metric(&m, &e, &w)?,
            mse_z: mse_z(&e, &t, &w)?,
            mse_x: mse_x(x_est, x_true, n_bus)?,
            n_meter: channels.len(),
            n_bus,
            channels,
        })
    }
}

fn part_label(part: Part) -> &'static str {
    match part {
        Part::Re => "re",
        Part::Im => "im",
    }
}

fn kind_label(kind: ChannelKind) -> &'static str {
    match kind {
        ChannelKind::PmuVoltage => "pmu_voltage",
        ChannelKind::PmuCurrent => "pmu_current",
        ChannelKind::RtuInjection => "rtu_injection",
        ChannelKind::RtuFlow => "rtu_flow",
        ChannelKind::PmuFlow => "pmu_flow",
        ChannelKind::Anchor => "anchor",
    }
}

/// ECF channels in the same order as the assembled objective.
pub fn ecf_channels(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
    x_est: &[f64],
    x_true: &[f64],
) -> Vec<ChannelValue> {
    let v = phasors(x_est);
    let vt = phasors(x_true);
    let mut out = Vec::new();
    let mut push =
        |kind: ChannelKind, id: String, m: Complex64, e: Complex64, t: Complex64, w: f64| {
            for (part, pick) in [(Part::Re, 0), (Part::Im, 1)] {
                let get = |c: Complex64| if pick == 0 { c.re } else { c.im };
                out.push(ChannelValue {
                    label: format!("{}[{}].{}", kind_label(kind), id, part_label(part)),
                    measured: get(m),
                    estimated: get(e),
                    truth: get(t),
                    weight: w,
                });
            }
        };
    let bus_id = |b: usize| format!("bus {}", net.buses[b].id);
    for p in &ms.pmu {
        let row = adm.row_form(p.bus);
        let (e, t) = (-row.eval(&v), -row.eval(&vt));
        push(
            ChannelKind::PmuCurrent,
            bus_id(p.bus),
            Complex64::new(p.z_ir, p.z_ii),
            e,
            t,
            p.w_i,
        );
        let zv = Complex64::new(p.z_vr, p.z_vi);
        push(
            ChannelKind::PmuVoltage,
            bus_id(p.bus),
            zv,
            v[p.bus],
            vt[p.bus],
            p.w_v,
        );
    }
    for r in &ms.rtu {
        let row = adm.row_form(r.bus);
        let sp = rtu_shunt_params(r.z_vm, r.z_p, r.z_q).expect("positive magnitude");
        let m = Complex64::new(sp.g, -sp.b) * v[r.bus];
        push(
            ChannelKind::RtuInjection,
            bus_id(r.bus),
            m,
            -row.eval(&v),
            -row.eval(&vt),
            r.w,
        );
    }
    for f in &ms.flows {
        let form = branch_current_form(net, f.branch, f.end).expect("in service");
        let (e, t) = (form.eval(&v), form.eval(&vt));
        let end = match f.end {
            BranchEnd::From => "from",
            BranchEnd::To => "to",
        };
        let id = format!("branch {} {}", f.branch + 1, end);
        match f.reading {
            FlowReading::Rtu {
                z_vm,
                z_pline,
                z_qline,
            } => {
                let (from, to) = net.branch_ends(f.branch).expect("in service");
                let bus = if f.end == BranchEnd::From { from } else { to };
                let sp = rtu_shunt_params(z_vm, z_pline, z_qline).expect("positive magnitude");
                push(
                    ChannelKind::RtuFlow,
                    id,
                    Complex64::new(sp.g, -sp.b) * v[bus],
                    e,
                    t,
                    f.w,
                );
            }
            FlowReading::Pmu { z_ir, z_ii } => push(
                ChannelKind::PmuFlow,
                id,
                Complex64::new(z_ir, z_ii),
                e,
                t,
                f.w,
            ),
        }
    }
    if let Some(a) = &ms.anchor {
        let z = Complex64::new(a.z_vr, a.z_vi);
        push(
            ChannelKind::Anchor,
            bus_id(a.bus),
            z,
            v[a.bus],
            vt[a.bus],
            a.weight,
        );
    }
    out
}

/// WLS channels (pseudo-measurements excluded), scored by `h`.
pub fn wls_channels(
    net: &Network,
    model: &WlsModel,
    est: &PolarState,
    truth: &PolarState,
) -> Vec<ChannelValue> {
    let h = model.evaluate(est);
    let ht = model.evaluate(truth);
    let bus_id = |b: &usize| net.buses[*b].id;
    model
        .channels
        .iter()
        .zip(h.iter().zip(&ht))
        .filter(|(c, _)| !c.pseudo)
        .map(|(c, (e, t))| {
            let label = match &c.model {
                ChannelModel::Vm(b) => format!("vm[bus {}]", bus_id(b)),
                ChannelModel::VRe(b) => format!("v[bus {}].re", bus_id(b)),
                ChannelModel::VIm(b) => format!("v[bus {}].im", bus_id(b)),
                ChannelModel::CurrentRe(_) => "current.re".to_string(),
                ChannelModel::CurrentIm(_) => "current.im".to_string(),
                ChannelModel::P(b, _) => format!("p[bus {}]", bus_id(b)),
                ChannelModel::Q(b, _) => format!("q[bus {}]", bus_id(b)),
            };
            ChannelValue {
                label,
                measured: c.z,
                estimated: *e,
                truth: *t,
                weight: c.w,
            }
        })
        .collect()
}
