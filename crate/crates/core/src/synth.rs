//! Ground truth and synthetic measurements.
//!
//! The true operating point is the voltage solution stored in the case file;
//! every current and power flow is derived from it through the admittance
//! model, so the truth is self-consistent by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::measurements::{
    Anchor, FlowKind, FlowMeas, FlowReading, MeasurementSet, PmuInjectionMeas, RtuInjectionMeas,
};
use crate::netmodel::{
    branch_current_form, detect_zero_injection_buses, AdmittanceBlocks, BranchEnd, Network,
};

/// Noise generator identification recorded in reports.
pub const RNG_ALGORITHM: &str =
    "ChaCha8Rng (rand_chacha 0.3, seed_from_u64) + StandardNormal (rand_distr 0.4)";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bus {0} has a non-positive voltage magnitude")]
    ZeroVm(u32),
    #[error("sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("plan conflict: {0}")]
    PlanConflict(String),
    #[error("malformed plan: {0}")]
    Json(#[from] serde_json::Error),
}

/// `x = [V^R; V^I]` from the case's stored magnitudes and angles.
pub fn true_state_from_case(net: &Network) -> Result<Vec<f64>, SynthError> {
    let n = net.n_bus();
    let mut x = vec![0.0; 2 * n];
    for (k, b) in net.buses.iter().enumerate() {
        if !(b.vm > 0.0) {
            return Err(SynthError::ZeroVm(b.id));
        }
        let (s, c) = (b.va * PI / 180.0).sin_cos();
        x[k] = b.vm * c;
        x[n + k] = b.vm * s;
    }
    Ok(x)
}

pub fn phasors(x: &[f64]) -> Vec<Complex64> {
    let n = x.len() / 2;
    (0..n).map(|k| Complex64::new(x[k], x[n + k])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTruth {
    pub branch: usize,
    pub end: BranchEnd,
    /// Current leaving the end bus into the line.
    pub current: Complex64,
    /// `V_end * conj(current)`.
    pub power: Complex64,
    pub vm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthBundle {
    pub x_true: Vec<f64>,
    /// Network-convention injection current `(Y V)_i`.
    pub inj: Vec<Complex64>,
    /// Both ends of every in-service branch, in branch order.
    pub flows: Vec<FlowTruth>,
}

impl TruthBundle {
    pub fn flow(&self, branch: usize, end: BranchEnd) -> Option<&FlowTruth> {
        self.flows
            .iter()
            .find(|f| f.branch == branch && f.end == end)
    }

    pub fn voltage(&self, bus: usize) -> Complex64 {
        let n = self.x_true.len() / 2;
        Complex64::new(self.x_true[bus], self.x_true[n + bus])
    }
}

pub fn compute_truth(net: &Network, adm: &AdmittanceBlocks, x_true: &[f64]) -> TruthBundle {
    let v = phasors(x_true);
    let inj = adm.currents(&v);
    let mut flows = Vec::new();
    for (k, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let (f, t) = net
            .branch_ends(k)
            .expect("in-service branch endpoints resolve");
        for (end, bus) in [(BranchEnd::From, f), (BranchEnd::To, t)] {
            let current = branch_current_form(net, k, end)
                .expect("in-service branch")
                .eval(&v);
            flows.push(FlowTruth {
                branch: k,
                end,
                current,
                power: v[bus] * current.conj(),
                vm: v[bus].norm(),
            });
        }
    }
    TruthBundle {
        x_true: x_true.to_vec(),
        inj,
        flows,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Pmu,
    Rtu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowPlan {
    pub branch: usize,
    pub end: BranchEnd,
    pub kind: FlowKind,
}

/// Device placement, in internal indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementPlan {
    pub devices: BTreeMap<usize, Device>,
    pub flows: Vec<FlowPlan>,
    pub anchor: Option<usize>,
}

/// JSON plan: bus ids map to device kinds; branches are 1-based case rows.
#[derive(Debug, Deserialize)]
struct PlanDocument {
    #[serde(deserialize_with = "devices_without_duplicates")]
    devices: Vec<(String, Device)>,
    #[serde(default)]
    flows: Vec<FlowPlan>,
    #[serde(default)]
    anchor: Option<u32>,
}

fn devices_without_duplicates<'de, D: Deserializer<'de>>(
    d: D,
) -> Result<Vec<(String, Device)>, D::Error> {
    struct V;
    impl<'de> Visitor<'de> for V {
        type Value = Vec<(String, Device)>;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map from bus id to device kind")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some(entry) = map.next_entry::<String, Device>()? {
                out.push(entry);
            }
            Ok(out)
        }
    }
    d.deserialize_map(V)
}

impl MeasurementPlan {
    pub fn from_json(net: &Network, text: &str) -> Result<Self, SynthError> {
        let doc: PlanDocument = serde_json::from_str(text)?;
        let mut plan = MeasurementPlan::default();
        for (key, dev) in doc.devices {
            let id: u32 = key
                .trim()
                .parse()
                .map_err(|_| SynthError::PlanConflict(format!("`{key}` is not a bus id")))?;
            let bus = net
                .index_of(id)
                .ok_or_else(|| SynthError::PlanConflict(format!("unknown bus {id}")))?;
            if plan.devices.insert(bus, dev).is_some() {
                return Err(SynthError::PlanConflict(format!(
                    "bus {id} has more than one device"
                )));
            }
        }
        for f in doc.flows {
            if f.branch == 0 || f.branch > net.branches.len() {
                return Err(SynthError::PlanConflict(format!(
                    "unknown branch {}",
                    f.branch
                )));
            }
            plan.flows.push(FlowPlan {
                branch: f.branch - 1,
                ..f
            });
        }
        if let Some(id) = doc.anchor {
            plan.anchor = Some(
                net.index_of(id)
                    .ok_or_else(|| SynthError::PlanConflict(format!("unknown anchor bus {id}")))?,
            );
        }
        Ok(plan)
    }

    pub fn to_json(&self, net: &Network) -> String {
        let devices: serde_json::Map<String, serde_json::Value> = self
            .devices
            .iter()
            .map(|(&b, d)| {
                (
                    net.buses[b].id.to_string(),
                    serde_json::to_value(d).unwrap(),
                )
            })
            .collect();
        let flows: Vec<FlowPlan> = self
            .flows
            .iter()
            .map(|f| FlowPlan {
                branch: f.branch + 1,
                ..f.clone()
            })
            .collect();
        let value = serde_json::json!({
            "devices": devices,
            "flows": flows,
            "anchor": self.anchor.map(|b| net.buses[b].id),
        });
        serde_json::to_string_pretty(&value).unwrap()
    }

    fn check(&self, net: &Network) -> Result<(), SynthError> {
        let mut seen = BTreeSet::new();
        for f in &self.flows {
            match net.branches.get(f.branch) {
                None => {
                    return Err(SynthError::PlanConflict(format!(
                        "unknown branch index {}",
                        f.branch
                    )))
                }
                Some(br) if !br.in_service => {
                    return Err(SynthError::PlanConflict(format!(
                        "branch {} is out of service",
                        f.branch + 1
                    )))
                }
                _ => {}
            }
            if !seen.insert((f.branch, f.end, f.kind == FlowKind::Pmu)) {
                return Err(SynthError::PlanConflict(format!(
                    "branch {} {:?} end metered twice",
                    f.branch + 1,
                    f.end
                )));
            }
        }
        if let Some(&bus) = self.devices.keys().find(|&&b| b >= net.n_bus()) {
            return Err(SynthError::PlanConflict(format!(
                "bus index {bus} out of range"
            )));
        }
        if matches!(self.anchor, Some(b) if b >= net.n_bus()) {
            return Err(SynthError::PlanConflict("anchor bus out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuiltinPlan {
    /// RTU at every bus with an injection (all non-zero-injection buses),
    /// one RTU flow meter on every in-service branch touching such a bus,
    /// and a slack-bus anchor.
    RtuAll,
    /// RTU injections only, no flows and no anchor.
    RtuOnly,
    /// PMU at buses 1 and 4, RTU at bus 5 (the five-bus example layout).
    Fig5,
    /// PMU at every bus.
    PmuAll,
}

impl BuiltinPlan {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "rtu-all" => Some(Self::RtuAll),
            "rtu-only" => Some(Self::RtuOnly),
            "fig5" => Some(Self::Fig5),
            "pmu-all" => Some(Self::PmuAll),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RtuAll => "rtu-all",
            Self::RtuOnly => "rtu-only",
            Self::Fig5 => "fig5",
            Self::PmuAll => "pmu-all",
        }
    }

    pub fn expand(self, net: &Network) -> Result<MeasurementPlan, SynthError> {
        let zi = detect_zero_injection_buses(net);
        let mut plan = MeasurementPlan::default();
        match self {
            Self::RtuAll | Self::RtuOnly => {
                for bus in (0..net.n_bus()).filter(|b| !zi.contains(b)) {
                    plan.devices.insert(bus, Device::Rtu);
                }
                if self == Self::RtuAll {
                    for (k, br) in net.branches.iter().enumerate() {
                        if !br.in_service {
                            continue;
                        }
                        let (f, t) = net.branch_ends(k).expect("in service");
                        let end = if plan.devices.contains_key(&f) {
                            BranchEnd::From
                        } else if plan.devices.contains_key(&t) {
                            BranchEnd::To
                        } else {
                            continue;
                        };
                        plan.flows.push(FlowPlan {
                            branch: k,
                            end,
                            kind: FlowKind::Rtu,
                        });
                    }
                    plan.anchor = Some(net.slack_bus());
                }
            }
            Self::Fig5 => {
                for (id, dev) in [(1, Device::Pmu), (4, Device::Pmu), (5, Device::Rtu)] {
                    let bus = net.index_of(id).ok_or_else(|| {
                        SynthError::PlanConflict(format!("fig5 plan needs bus {id}"))
                    })?;
                    plan.devices.insert(bus, dev);
                }
            }
            Self::PmuAll => {
                for bus in 0..net.n_bus() {
                    plan.devices.insert(bus, Device::Pmu);
                }
            }
        }
        Ok(plan)
    }
}

/// Draws a noisy measurement set for `plan` from `truth`.
///
/// Every scalar channel gets an independent `N(0, sigma²)` draw; channel
/// order is bus order for injection devices, then plan order for flows, then
/// the anchor. Weights are `1/sigma²` (1 when `sigma = 0`).
pub fn synthesize_measurements(
    net: &Network,
    truth: &TruthBundle,
    plan: &MeasurementPlan,
    sigma: f64,
    seed: u64,
) -> Result<MeasurementSet, SynthError> {
    if !(sigma >= 0.0) {
        return Err(SynthError::NegativeSigma(sigma));
    }
    plan.check(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = move || -> f64 {
        let e: f64 = StandardNormal.sample(&mut rng);
        sigma * e
    };
    let w = if sigma > 0.0 {
        1.0 / (sigma * sigma)
    } else {
        1.0
    };

    let mut ms = MeasurementSet::default();
    for (&bus, &dev) in &plan.devices {
        let v = truth.voltage(bus);
        // device convention: current and power drawn from the bus
        let i_dev = -truth.inj[bus];
        match dev {
            Device::Pmu => ms.pmu.push(PmuInjectionMeas {
                bus,
                z_vr: v.re + noise(),
                z_vi: v.im + noise(),
                z_ir: i_dev.re + noise(),
                z_ii: i_dev.im + noise(),
                w_v: w,
                w_i: w,
            }),
            Device::Rtu => {
                let s_dev = v * i_dev.conj();
                ms.rtu.push(RtuInjectionMeas {
                    bus,
                    z_vm: v.norm() + noise(),
                    z_p: s_dev.re + noise(),
                    z_q: s_dev.im + noise(),
                    w,
                })
            }
        }
    }
    for f in &plan.flows {
        let t = truth
            .flow(f.branch, f.end)
            .expect("plan checked against in-service branches");
        let reading = match f.kind {
            FlowKind::Rtu => FlowReading::Rtu {
                z_vm: t.vm + noise(),
                z_pline: t.power.re + noise(),
                z_qline: t.power.im + noise(),
            },
            FlowKind::Pmu => FlowReading::Pmu {
                z_ir: t.current.re + noise(),
                z_ii: t.current.im + noise(),
            },
        };
        ms.flows.push(FlowMeas {
            branch: f.branch,
            end: f.end,
            reading,
            w,
        });
    }
    if let Some(bus) = plan.anchor {
        // Magnitude from the bus's RTU reading when there is one, angle from
        // the case reference; otherwise a fresh magnitude reading.
        let vm = match ms.rtu.iter().find(|r| r.bus == bus) {
            Some(r) => r.z_vm,
            None => truth.voltage(bus).norm() + noise(),
        };
        let va = truth.voltage(bus).arg();
        ms.anchor = Some(Anchor {
            bus,
            z_vr: vm * va.cos(),
            z_vi: vm * va.sin(),
            weight: w,
        });
    }
    let measured: BTreeSet<usize> = plan.devices.keys().copied().collect();
    ms.zi_buses = detect_zero_injection_buses(net)
        .difference(&measured)
        .copied()
        .collect();
    Ok(ms)
}
