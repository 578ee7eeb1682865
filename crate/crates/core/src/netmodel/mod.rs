//! Network topology, MATPOWER case I/O and rectangular admittance operators.
//!
//! All electrical quantities are per unit on the case base after parsing.
//! Buses are indexed 0..n in file order with isolated (type 4) buses
//! removed; those are carried separately so a case can be written back out.

mod parse;
mod ybus;

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

pub use parse::{emit_matpower_case, parse_matpower_case};
pub use ybus::{
    branch_current_form, branch_current_rows, branch_pi, build_ybus, injection_rows,
    AdmittanceBlocks, BranchPi, PhasorForm,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("case text has no `mpc.{0}` assignment")]
    MissingTable(&'static str),
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("branch {0} references a bus that is missing or isolated")]
    UnknownBusReference(usize),
    #[error("generator row {0} references an unknown bus")]
    UnknownGenBus(usize),
    #[error("bus {0} has a non-positive voltage magnitude")]
    ZeroVm(u32),
    #[error("bus id {0} appears more than once")]
    DuplicateBus(u32),
    #[error("branch {0} connects a bus to itself")]
    SelfLoop(usize),
    #[error("case has no energized bus")]
    NoActiveBus,
    #[error("branch {0} is in service with r = x = 0")]
    SingularBranch(usize),
    #[error("bus index {index} out of range for {n} buses")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("branch index {index} out of range for {n} branches")]
    BranchOutOfRange { index: usize, n: usize },
    #[error("branch {0} is out of service")]
    BranchOutOfService(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    Pq,
    Pv,
    Slack,
    Isolated,
}

impl BusType {
    pub fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            1 => Some(BusType::Pq),
            2 => Some(BusType::Pv),
            3 => Some(BusType::Slack),
            4 => Some(BusType::Isolated),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
            BusType::Isolated => 4,
        }
    }
}

/// A bus row. Power and shunt quantities are per unit; `va` is in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub bus_type: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    pub va: f64,
    pub base_kv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub bus: u32,
    pub pg: f64,
    pub qg: f64,
    pub vg: f64,
    pub in_service: bool,
}

/// A pi-model branch. `tap` is the effective ratio (a file value of 0 is
/// stored as 1.0); `shift` is in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from_bus: u32,
    pub to_bus: u32,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    pub tap: f64,
    pub shift: f64,
    pub in_service: bool,
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum BranchEnd {
    From,
    To,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub isolated: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    index: HashMap<u32, usize>,
}

impl Network {
    /// Assembles and validates a network. Isolated buses may appear in
    /// `buses`; they are split off into [`Network::isolated`].
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        branches: Vec<Branch>,
    ) -> Result<Self, NetError> {
        let mut seen = BTreeSet::new();
        for b in &buses {
            if !seen.insert(b.id) {
                return Err(NetError::DuplicateBus(b.id));
            }
        }
        let (isolated, buses): (Vec<Bus>, Vec<Bus>) = buses
            .into_iter()
            .partition(|b| b.bus_type == BusType::Isolated);
        if buses.is_empty() {
            return Err(NetError::NoActiveBus);
        }
        for b in &buses {
            if !(b.vm > 0.0) {
                return Err(NetError::ZeroVm(b.id));
            }
        }
        let index: HashMap<u32, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
        for (k, g) in generators.iter().enumerate() {
            if !index.contains_key(&g.bus) && !isolated.iter().any(|b| b.id == g.bus) {
                return Err(NetError::UnknownGenBus(k));
            }
        }
        for (k, br) in branches.iter().enumerate() {
            if br.from_bus == br.to_bus {
                return Err(NetError::SelfLoop(k));
            }
            let known = |id: u32| index.contains_key(&id) || isolated.iter().any(|b| b.id == id);
            if !known(br.from_bus) || !known(br.to_bus) {
                return Err(NetError::UnknownBusReference(k));
            }
            if br.in_service
                && (!index.contains_key(&br.from_bus) || !index.contains_key(&br.to_bus))
            {
                return Err(NetError::UnknownBusReference(k));
            }
        }
        Ok(Self {
            base_mva,
            buses,
            isolated,
            generators,
            branches,
            index,
        })
    }

    /// Number of buses in the state (isolated buses excluded).
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Internal indices of a branch's endpoints. Only meaningful for branches
    /// whose endpoints are both energized (always true when in service).
    pub fn branch_ends(&self, k: usize) -> Option<(usize, usize)> {
        let br = self.branches.get(k)?;
        Some((self.index_of(br.from_bus)?, self.index_of(br.to_bus)?))
    }

    pub fn has_generator(&self, bus: usize) -> bool {
        let id = self.buses[bus].id;
        self.generators.iter().any(|g| g.in_service && g.bus == id)
    }

    /// Index of the first slack bus, falling back to bus 0.
    pub fn slack_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .unwrap_or(0)
    }
}

/// Buses with no in-service generator, no load and no shunt.
pub fn detect_zero_injection_buses(net: &Network) -> BTreeSet<usize> {
    (0..net.n_bus())
        .filter(|&i| {
            let b = &net.buses[i];
            b.pd == 0.0 && b.qd == 0.0 && b.gs == 0.0 && b.bs == 0.0 && !net.has_generator(i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bus(id: u32, pd: f64) -> Bus {
        Bus {
            id,
            bus_type: BusType::Pq,
            pd,
            qd: 0.0,
            gs: 0.0,
            bs: 0.0,
            vm: 1.0,
            va: 0.0,
            base_kv: 0.0,
        }
    }

    #[test]
    fn zero_injection_rule() {
        let net = Network::new(
            100.0,
            vec![bus(1, 0.0), bus(2, 0.000001), bus(3, 0.0)],
            vec![Generator {
                bus: 3,
                pg: 0.0,
                qg: 0.0,
                vg: 1.0,
                in_service: true,
            }],
            vec![],
        )
        .unwrap();
        assert_eq!(detect_zero_injection_buses(&net), BTreeSet::from([0]));
    }

    #[test]
    fn out_of_service_generator_does_not_count() {
        let g = Generator {
            bus: 1,
            pg: 0.0,
            qg: 0.0,
            vg: 1.0,
            in_service: false,
        };
        let net = Network::new(100.0, vec![bus(1, 0.0)], vec![g], vec![]).unwrap();
        assert!(detect_zero_injection_buses(&net).contains(&0));
    }

    #[test]
    fn isolated_buses_leave_the_state() {
        let mut iso = bus(9, 0.0);
        iso.bus_type = BusType::Isolated;
        iso.vm = 0.0;
        let net = Network::new(100.0, vec![bus(1, 0.1), iso, bus(2, 0.2)], vec![], vec![]).unwrap();
        assert_eq!(net.n_bus(), 2);
        assert_eq!(net.index_of(2), Some(1));
        assert_eq!(net.index_of(9), None);
        assert_eq!(net.isolated.len(), 1);
    }

    #[test]
    fn rejects_in_service_branch_to_isolated_bus() {
        let mut iso = bus(9, 0.0);
        iso.bus_type = BusType::Isolated;
        let br = Branch {
            from_bus: 1,
            to_bus: 9,
            r: 0.0,
            x: 0.1,
            b_charging: 0.0,
            tap: 1.0,
            shift: 0.0,
            in_service: true,
        };
        let err =
            Network::new(100.0, vec![bus(1, 0.1), iso], vec![], vec![br.clone()]).unwrap_err();
        assert_eq!(err, NetError::UnknownBusReference(0));
        let mut off = br;
        off.in_service = false;
        assert!(Network::new(
            100.0,
            vec![bus(1, 0.1), {
                let mut b = bus(9, 0.0);
                b.bus_type = BusType::Isolated;
                b
            }],
            vec![],
            vec![off]
        )
        .is_ok());
    }

    #[test]
    fn zero_vm_rejected() {
        let mut b = bus(4, 0.0);
        b.vm = 0.0;
        assert_eq!(
            Network::new(100.0, vec![b], vec![], vec![]).unwrap_err(),
            NetError::ZeroVm(4)
        );
    }
}
