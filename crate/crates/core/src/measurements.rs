//! Measurement records and the linear circuit parameters they contribute.
//!
//! Sign conventions (fixed across the crate):
//!
//! * PMU injection currents and RTU injection powers are reported in device
//!   (load) convention: the current or power flowing from the bus into the
//!   metering device. At the true state `z_I = -(Y x)_i` and
//!   `z_P + j z_Q = -V_i conj((Y x)_i)`.
//! * Line-flow readings are taken at the metered end and describe what flows
//!   from that bus into the line.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{BranchEnd, Network};

#[derive(Debug, Error)]
pub enum MeasError {
    #[error("voltage magnitude {0} is not positive")]
    NonPositiveVoltage(f64),
    #[error("measurement references unknown or isolated bus {0}")]
    UnknownBus(u32),
    #[error("measurement references unknown branch {0}")]
    UnknownBranch(usize),
    #[error("malformed measurement document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmuInjectionMeas {
    pub bus: usize,
    pub z_vr: f64,
    pub z_vi: f64,
    pub z_ir: f64,
    pub z_ii: f64,
    pub w_v: f64,
    pub w_i: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtuInjectionMeas {
    pub bus: usize,
    pub z_vm: f64,
    pub z_p: f64,
    pub z_q: f64,
    pub w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Rtu,
    Pmu,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowReading {
    Rtu {
        z_vm: f64,
        z_pline: f64,
        z_qline: f64,
    },
    Pmu {
        z_ir: f64,
        z_ii: f64,
    },
}

impl FlowReading {
    pub fn kind(&self) -> FlowKind {
        match self {
            FlowReading::Rtu { .. } => FlowKind::Rtu,
            FlowReading::Pmu { .. } => FlowKind::Pmu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMeas {
    pub branch: usize,
    pub end: BranchEnd,
    pub reading: FlowReading,
    pub w: f64,
}

/// Pseudo voltage phasor pinning the global phase and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub bus: usize,
    pub z_vr: f64,
    pub z_vi: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementSet {
    pub pmu: Vec<PmuInjectionMeas>,
    pub rtu: Vec<RtuInjectionMeas>,
    pub flows: Vec<FlowMeas>,
    pub zi_buses: BTreeSet<usize>,
    pub anchor: Option<Anchor>,
}

impl MeasurementSet {
    /// True when some term fixes the absolute phase of the estimate.
    pub fn is_anchored(&self) -> bool {
        self.pmu.iter().any(|p| p.w_v > 0.0) || self.anchor.as_ref().is_some_and(|a| a.weight > 0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.pmu.is_empty() && self.rtu.is_empty() && self.flows.is_empty() && self.anchor.is_none()
    }
}

/// Conductance/susceptance of the RTU equivalent circuit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShuntParams {
    pub g: f64,
    pub b: f64,
}

impl ShuntParams {
    /// Model current `(G - jB) V` for a voltage `(vr, vi)`.
    pub fn current(&self, vr: f64, vi: f64) -> (f64, f64) {
        (self.g * vr + self.b * vi, self.g * vi - self.b * vr)
    }
}

pub fn rtu_shunt_params(z_vm: f64, z_p: f64, z_q: f64) -> Result<ShuntParams, MeasError> {
    if !(z_vm > 0.0) {
        return Err(MeasError::NonPositiveVoltage(z_vm));
    }
    let vm2 = z_vm * z_vm;
    Ok(ShuntParams {
        g: z_p / vm2,
        b: z_q / vm2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum RecordRef {
    Pmu(usize),
    Rtu(usize),
    Flow(usize),
    Anchor,
    ZiBus(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "issue")]
pub enum ValidationIssue {
    IndexOutOfRange { record: RecordRef, index: usize },
    BranchOutOfService { record: RecordRef, branch: usize },
    NegativeWeight { record: RecordRef },
    NonPositiveVoltage { record: RecordRef },
    NonFinite { record: RecordRef },
    DuplicateRecord { record: RecordRef },
    ZiConflict { bus: usize },
    AnchorMissing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn anchor_missing(&self) -> bool {
        self.issues.contains(&ValidationIssue::AnchorMissing)
    }

    /// Issues other than a missing anchor.
    pub fn structural(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues
            .iter()
            .filter(|i| **i != ValidationIssue::AnchorMissing)
    }
}

pub fn validate_measurement_set(net: &Network, ms: &MeasurementSet) -> ValidationReport {
    let n = net.n_bus();
    let mut issues = Vec::new();
    let check_bus = |issues: &mut Vec<ValidationIssue>, record, bus: usize| {
        if bus >= n {
            issues.push(ValidationIssue::IndexOutOfRange { record, index: bus });
        }
    };

    let mut seen = HashSet::new();
    for (k, p) in ms.pmu.iter().enumerate() {
        let record = RecordRef::Pmu(k);
        check_bus(&mut issues, record, p.bus);
        if p.w_v < 0.0 || p.w_i < 0.0 {
            issues.push(ValidationIssue::NegativeWeight { record });
        }
        if ![p.z_vr, p.z_vi, p.z_ir, p.z_ii, p.w_v, p.w_i]
            .iter()
            .all(|v| v.is_finite())
        {
            issues.push(ValidationIssue::NonFinite { record });
        }
        if !seen.insert(p.bus) {
            issues.push(ValidationIssue::DuplicateRecord { record });
        }
        if ms.zi_buses.contains(&p.bus) {
            issues.push(ValidationIssue::ZiConflict { bus: p.bus });
        }
    }

    seen.clear();
    for (k, r) in ms.rtu.iter().enumerate() {
        let record = RecordRef::Rtu(k);
        check_bus(&mut issues, record, r.bus);
        if r.w < 0.0 {
            issues.push(ValidationIssue::NegativeWeight { record });
        }
        if !(r.z_vm > 0.0) {
            issues.push(ValidationIssue::NonPositiveVoltage { record });
        }
        if ![r.z_vm, r.z_p, r.z_q, r.w].iter().all(|v| v.is_finite()) {
            issues.push(ValidationIssue::NonFinite { record });
        }
        if !seen.insert(r.bus) {
            issues.push(ValidationIssue::DuplicateRecord { record });
        }
        if ms.zi_buses.contains(&r.bus) {
            issues.push(ValidationIssue::ZiConflict { bus: r.bus });
        }
    }

    let mut seen_flows = HashSet::new();
    for (k, f) in ms.flows.iter().enumerate() {
        let record = RecordRef::Flow(k);
        match net.branches.get(f.branch) {
            None => issues.push(ValidationIssue::IndexOutOfRange {
                record,
                index: f.branch,
            }),
            Some(br) if !br.in_service => issues.push(ValidationIssue::BranchOutOfService {
                record,
                branch: f.branch,
            }),
            _ => {}
        }
        if f.w < 0.0 {
            issues.push(ValidationIssue::NegativeWeight { record });
        }
        let values: Vec<f64> = match f.reading {
            FlowReading::Rtu {
                z_vm,
                z_pline,
                z_qline,
            } => {
                if !(z_vm > 0.0) {
                    issues.push(ValidationIssue::NonPositiveVoltage { record });
                }
                vec![z_vm, z_pline, z_qline]
            }
            FlowReading::Pmu { z_ir, z_ii } => vec![z_ir, z_ii],
        };
        if !values.iter().chain([&f.w]).all(|v| v.is_finite()) {
            issues.push(ValidationIssue::NonFinite { record });
        }
        if !seen_flows.insert((f.branch, f.end, f.reading.kind())) {
            issues.push(ValidationIssue::DuplicateRecord { record });
        }
    }

    for &z in &ms.zi_buses {
        check_bus(&mut issues, RecordRef::ZiBus(z), z);
    }
    if let Some(a) = &ms.anchor {
        check_bus(&mut issues, RecordRef::Anchor, a.bus);
        if a.weight < 0.0 {
            issues.push(ValidationIssue::NegativeWeight {
                record: RecordRef::Anchor,
            });
        }
        if ![a.z_vr, a.z_vi, a.weight].iter().all(|v| v.is_finite()) {
            issues.push(ValidationIssue::NonFinite {
                record: RecordRef::Anchor,
            });
        }
    }
    if !ms.is_anchored() {
        issues.push(ValidationIssue::AnchorMissing);
    }
    ValidationReport { issues }
}

// ---------------------------------------------------------------------------
// JSON document form. Buses are referenced by external id and branches by
// their 1-based row number in the case file.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmuRecord {
    pub bus: u32,
    pub z_vr: f64,
    pub z_vi: f64,
    pub z_ir: f64,
    pub z_ii: f64,
    pub w_v: f64,
    pub w_i: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtuRecord {
    pub bus: u32,
    pub z_vm: f64,
    pub z_p: f64,
    pub z_q: f64,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FlowRecordReading {
    Rtu {
        z_vm: f64,
        z_pline: f64,
        z_qline: f64,
    },
    Pmu {
        z_ir: f64,
        z_ii: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub branch: usize,
    pub end: BranchEnd,
    #[serde(flatten)]
    pub reading: FlowRecordReading,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub bus: u32,
    pub z_vr: f64,
    pub z_vi: f64,
    pub weight: f64,
}

/// One measurement document per case, as read and written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDocument {
    pub pmu: Vec<PmuRecord>,
    pub rtu: Vec<RtuRecord>,
    pub flows: Vec<FlowRecord>,
    pub zi_buses: Vec<u32>,
    pub anchor: Option<AnchorRecord>,
    pub sigma: f64,
    pub seed: u64,
}

impl MeasurementDocument {
    pub fn from_set(net: &Network, ms: &MeasurementSet, sigma: f64, seed: u64) -> Self {
        let id = |k: usize| net.buses[k].id;
        Self {
            pmu: ms
                .pmu
                .iter()
                .map(|p| PmuRecord {
                    bus: id(p.bus),
                    z_vr: p.z_vr,
                    z_vi: p.z_vi,
                    z_ir: p.z_ir,
                    z_ii: p.z_ii,
                    w_v: p.w_v,
                    w_i: p.w_i,
                })
                .collect(),
            rtu: ms
                .rtu
                .iter()
                .map(|r| RtuRecord {
                    bus: id(r.bus),
                    z_vm: r.z_vm,
                    z_p: r.z_p,
                    z_q: r.z_q,
                    w: r.w,
                })
                .collect(),
            flows: ms
                .flows
                .iter()
                .map(|f| FlowRecord {
                    branch: f.branch + 1,
                    end: f.end,
                    reading: match f.reading {
                        FlowReading::Rtu {
                            z_vm,
                            z_pline,
                            z_qline,
                        } => FlowRecordReading::Rtu {
                            z_vm,
                            z_pline,
                            z_qline,
                        },
                        FlowReading::Pmu { z_ir, z_ii } => FlowRecordReading::Pmu { z_ir, z_ii },
                    },
                    w: f.w,
                })
                .collect(),
            zi_buses: ms.zi_buses.iter().map(|&k| id(k)).collect(),
            anchor: ms.anchor.as_ref().map(|a| AnchorRecord {
                bus: id(a.bus),
                z_vr: a.z_vr,
                z_vi: a.z_vi,
                weight: a.weight,
            }),
            sigma,
            seed,
        }
    }

    /// Resolves external references against `net`.
    pub fn to_set(&self, net: &Network) -> Result<MeasurementSet, MeasError> {
        let bus = |id: u32| net.index_of(id).ok_or(MeasError::UnknownBus(id));
        let branch = |row: usize| {
            if row >= 1 && row <= net.branches.len() {
                Ok(row - 1)
            } else {
                Err(MeasError::UnknownBranch(row))
            }
        };
        Ok(MeasurementSet {
            pmu: self
                .pmu
                .iter()
                .map(|p| {
                    Ok(PmuInjectionMeas {
                        bus: bus(p.bus)?,
                        z_vr: p.z_vr,
                        z_vi: p.z_vi,
                        z_ir: p.z_ir,
                        z_ii: p.z_ii,
                        w_v: p.w_v,
                        w_i: p.w_i,
                    })
                })
                .collect::<Result<_, MeasError>>()?,
            rtu: self
                .rtu
                .iter()
                .map(|r| {
                    Ok(RtuInjectionMeas {
                        bus: bus(r.bus)?,
                        z_vm: r.z_vm,
                        z_p: r.z_p,
                        z_q: r.z_q,
                        w: r.w,
                    })
                })
                .collect::<Result<_, MeasError>>()?,
            flows: self
                .flows
                .iter()
                .map(|f| {
                    Ok(FlowMeas {
                        branch: branch(f.branch)?,
                        end: f.end,
                        reading: match f.reading {
                            FlowRecordReading::Rtu {
                                z_vm,
                                z_pline,
                                z_qline,
                            } => FlowReading::Rtu {
                                z_vm,
                                z_pline,
                                z_qline,
                            },
                            FlowRecordReading::Pmu { z_ir, z_ii } => {
                                FlowReading::Pmu { z_ir, z_ii }
                            }
                        },
                        w: f.w,
                    })
                })
                .collect::<Result<_, MeasError>>()?,
            zi_buses: self
                .zi_buses
                .iter()
                .map(|&id| bus(id))
                .collect::<Result<_, _>>()?,
            anchor: self
                .anchor
                .as_ref()
                .map(|a| {
                    Ok::<_, MeasError>(Anchor {
                        bus: bus(a.bus)?,
                        z_vr: a.z_vr,
                        z_vi: a.z_vi,
                        weight: a.weight,
                    })
                })
                .transpose()?,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, MeasError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measurement document serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::parse_matpower_case;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn net() -> Network {
        parse_matpower_case(
            "mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0 0 0 1 1 0 0; 2 1 0 90 0 0 1 0.9 0 0];\n\
             mpc.gen = [1 0 100 0 0 1 100 1];\nmpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1];\n",
        )
        .unwrap()
    }

    fn pmu(bus: usize) -> PmuInjectionMeas {
        PmuInjectionMeas {
            bus,
            z_vr: 1.0,
            z_vi: 0.0,
            z_ir: 0.0,
            z_ii: 1.0,
            w_v: 1.0,
            w_i: 1.0,
        }
    }

    fn rtu(bus: usize) -> RtuInjectionMeas {
        RtuInjectionMeas {
            bus,
            z_vm: 0.9,
            z_p: 0.0,
            z_q: 0.9,
            w: 1.0,
        }
    }

    #[test]
    fn shunt_params_examples() {
        let p = rtu_shunt_params(1.0, 1.0, 0.5).unwrap();
        assert_eq!((p.g, p.b), (1.0, 0.5));
        let p = rtu_shunt_params(0.7, 0.0, 0.0).unwrap();
        assert_eq!((p.g, p.b), (0.0, 0.0));
        // -0.8 / 0.9025 and -0.3 / 0.9025
        let p = rtu_shunt_params(0.95, -0.8, -0.3).unwrap();
        assert!(close(p.g, -0.886_426_592_797_783_9));
        assert!(close(p.b, -0.332_409_972_299_168_96));
        assert!(matches!(
            rtu_shunt_params(0.0, 1.0, 1.0),
            Err(MeasError::NonPositiveVoltage(_))
        ));
        assert!(rtu_shunt_params(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn one_pmu_is_anchored() {
        let ms = MeasurementSet {
            pmu: vec![pmu(0)],
            ..Default::default()
        };
        assert!(validate_measurement_set(&net(), &ms).is_ok());
    }

    #[test]
    fn rtu_only_is_not_anchored() {
        let ms = MeasurementSet {
            rtu: vec![rtu(1)],
            ..Default::default()
        };
        let rep = validate_measurement_set(&net(), &ms);
        assert!(rep.anchor_missing());
        assert_eq!(rep.structural().count(), 0);
    }

    #[test]
    fn out_of_range_bus() {
        let ms = MeasurementSet {
            pmu: vec![pmu(2)],
            ..Default::default()
        };
        let rep = validate_measurement_set(&net(), &ms);
        assert!(rep.issues.contains(&ValidationIssue::IndexOutOfRange {
            record: RecordRef::Pmu(0),
            index: 2
        }));
    }

    #[test]
    fn duplicates_and_zi_conflicts() {
        let ms = MeasurementSet {
            pmu: vec![pmu(0), pmu(0)],
            rtu: vec![rtu(1)],
            zi_buses: BTreeSet::from([1]),
            ..Default::default()
        };
        let rep = validate_measurement_set(&net(), &ms);
        assert!(rep.issues.contains(&ValidationIssue::DuplicateRecord {
            record: RecordRef::Pmu(1)
        }));
        assert!(rep.issues.contains(&ValidationIssue::ZiConflict { bus: 1 }));
        assert!(!rep.anchor_missing());
    }

    #[test]
    fn flow_checks() {
        let mut n = net();
        let flow = FlowMeas {
            branch: 0,
            end: BranchEnd::From,
            reading: FlowReading::Rtu {
                z_vm: 0.0,
                z_pline: 0.0,
                z_qline: 0.0,
            },
            w: 1.0,
        };
        let ms = MeasurementSet {
            pmu: vec![pmu(0)],
            flows: vec![flow.clone(), FlowMeas { branch: 4, ..flow }],
            ..Default::default()
        };
        let rep = validate_measurement_set(&n, &ms);
        assert!(rep.issues.contains(&ValidationIssue::NonPositiveVoltage {
            record: RecordRef::Flow(0)
        }));
        assert!(rep.issues.contains(&ValidationIssue::IndexOutOfRange {
            record: RecordRef::Flow(1),
            index: 4
        }));
        n.branches[0].in_service = false;
        let rep = validate_measurement_set(&n, &ms);
        assert!(rep.issues.contains(&ValidationIssue::BranchOutOfService {
            record: RecordRef::Flow(0),
            branch: 0
        }));
    }

    #[test]
    fn document_round_trip_uses_external_ids() {
        let n = net();
        let ms = MeasurementSet {
            pmu: vec![pmu(0)],
            rtu: vec![rtu(1)],
            flows: vec![FlowMeas {
                branch: 0,
                end: BranchEnd::To,
                reading: FlowReading::Pmu {
                    z_ir: 0.1,
                    z_ii: -0.2,
                },
                w: 4.0,
            }],
            zi_buses: BTreeSet::new(),
            anchor: Some(Anchor {
                bus: 1,
                z_vr: 0.9,
                z_vi: 0.0,
                weight: 2.0,
            }),
        };
        let doc = MeasurementDocument::from_set(&n, &ms, 0.01, 7);
        let text = doc.to_json();
        assert!(text.contains("\"kind\": \"pmu\""));
        assert!(text.contains("\"branch\": 1"));
        let back = MeasurementDocument::from_json(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_set(&n).unwrap(), ms);
    }

    #[test]
    fn document_rejects_unknown_references() {
        let n = net();
        let mut doc = MeasurementDocument::from_set(&n, &MeasurementSet::default(), 0.0, 0);
        doc.zi_buses = vec![42];
        assert!(matches!(doc.to_set(&n), Err(MeasError::UnknownBus(42))));
    }

    #[test]
    fn model_current_identity() {
        // (G - jB)(Vr + jVi) expanded by hand
        let p = ShuntParams { g: 0.7, b: -0.4 };
        let v = num_complex::Complex64::new(0.98, -0.12);
        let i = num_complex::Complex64::new(p.g, -p.b) * v;
        let (ir, ii) = p.current(v.re, v.im);
        assert!(close(i.re, ir) && close(i.im, ii));
    }
}
