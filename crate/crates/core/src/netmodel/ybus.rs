use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use sprs::CsMat;

use super::{Branch, BranchEnd, NetError, Network};
use crate::sparse::SparseRow;

/// Two-port admittances of a pi-model branch:
///
/// ```text
/// | I_f |   | yff  yft | | V_f |
/// | I_t | = | ytf  ytt | | V_t |
/// ```
///
/// with currents taken as leaving each terminal bus into the branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchPi {
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

pub fn branch_pi(br: &Branch) -> BranchPi {
    let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let tap = Complex64::from_polar(br.tap, br.shift * PI / 180.0);
    let ytt = ys + Complex64::new(0.0, br.b_charging / 2.0);
    BranchPi {
        yff: ytt / (tap * tap.conj()),
        yft: -ys / tap.conj(),
        ytf: -ys / tap,
        ytt,
    }
}

/// A complex linear function of the bus voltage phasors, `Σ c_k V_k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhasorForm {
    terms: Vec<(usize, Complex64)>,
}

impl PhasorForm {
    pub fn new(terms: Vec<(usize, Complex64)>) -> Self {
        Self { terms }
    }

    pub fn terms(&self) -> &[(usize, Complex64)] {
        &self.terms
    }

    pub fn eval(&self, v: &[Complex64]) -> Complex64 {
        self.terms.iter().map(|&(k, c)| c * v[k]).sum()
    }

    /// Real and imaginary parts as rows over `x = [V^R; V^I]` for `n` buses.
    pub fn real_rows(&self, n: usize) -> (SparseRow, SparseRow) {
        let re = SparseRow::from_entries(
            self.terms
                .iter()
                .flat_map(|&(k, c)| [(k, c.re), (n + k, -c.im)]),
        );
        let im = SparseRow::from_entries(
            self.terms
                .iter()
                .flat_map(|&(k, c)| [(k, c.im), (n + k, c.re)]),
        );
        (re, im)
    }
}

/// Real and imaginary parts of the bus admittance matrix, `Y = Gm + jBm`.
///
/// Both matrices are stored in CSR form with one shared sparsity pattern.
#[derive(Clone, Debug)]
pub struct AdmittanceBlocks {
    n: usize,
    gm: CsMat<f64>,
    bm: CsMat<f64>,
    shunt: Vec<Complex64>,
}

impl AdmittanceBlocks {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gm(&self) -> &CsMat<f64> {
        &self.gm
    }

    pub fn bm(&self) -> &CsMat<f64> {
        &self.bm
    }

    /// Bus shunt admittance in per unit.
    pub fn shunt(&self, bus: usize) -> Complex64 {
        self.shunt[bus]
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(
            self.gm.get(i, j).copied().unwrap_or(0.0),
            self.bm.get(i, j).copied().unwrap_or(0.0),
        )
    }

    /// Row `i` of `Y` as a phasor form.
    pub fn row_form(&self, i: usize) -> PhasorForm {
        let g = self.gm.outer_view(i).expect("row in range");
        let b = self.bm.outer_view(i).expect("row in range");
        PhasorForm::new(
            g.iter()
                .zip(b.iter())
                .map(|((k, &gv), (_, &bv))| (k, Complex64::new(gv, bv)))
                .collect(),
        )
    }

    /// `[[Gm, -Bm], [Bm, Gm]] x`, the stacked real form of `I = Y V`.
    pub fn apply_stacked(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(x.len(), 2 * n);
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let g = self.gm.outer_view(i).unwrap();
            let b = self.bm.outer_view(i).unwrap();
            for ((k, &gv), (_, &bv)) in g.iter().zip(b.iter()) {
                out[i] += gv * x[k] - bv * x[n + k];
                out[n + i] += bv * x[k] + gv * x[n + k];
            }
        }
        out
    }

    /// Complex injection currents `I = Y V`.
    pub fn currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n).map(|i| self.row_form(i).eval(v)).collect()
    }
}

/// Assembles `Y` from the pi-model of every in-service branch plus bus shunts.
pub fn build_ybus(net: &Network) -> Result<AdmittanceBlocks, NetError> {
    let n = net.n_bus();
    let mut acc: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    for (k, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        if br.r == 0.0 && br.x == 0.0 {
            return Err(NetError::SingularBranch(k));
        }
        let (f, t) = net.branch_ends(k).ok_or(NetError::UnknownBusReference(k))?;
        let pi = branch_pi(br);
        *acc.entry((f, f)).or_default() += pi.yff;
        *acc.entry((f, t)).or_default() += pi.yft;
        *acc.entry((t, f)).or_default() += pi.ytf;
        *acc.entry((t, t)).or_default() += pi.ytt;
    }
    let shunt: Vec<Complex64> = net
        .buses
        .iter()
        .map(|b| Complex64::new(b.gs, b.bs))
        .collect();
    for (i, &y) in shunt.iter().enumerate() {
        if y != Complex64::default() {
            *acc.entry((i, i)).or_default() += y;
        }
    }

    let mut indptr = vec![0usize; n + 1];
    let mut indices = Vec::with_capacity(acc.len());
    let mut gdata = Vec::with_capacity(acc.len());
    let mut bdata = Vec::with_capacity(acc.len());
    for (&(i, j), y) in &acc {
        indptr[i + 1] += 1;
        indices.push(j);
        gdata.push(y.re);
        bdata.push(y.im);
    }
    for i in 0..n {
        indptr[i + 1] += indptr[i];
    }
    let gm = CsMat::new((n, n), indptr.clone(), indices.clone(), gdata);
    let bm = CsMat::new((n, n), indptr, indices, bdata);
    Ok(AdmittanceBlocks { n, gm, bm, shunt })
}

/// Rows `(Y_i^R, Y_i^I)` over `x = [V^R; V^I]` giving the injection current
/// at bus `i`.
pub fn injection_rows(
    adm: &AdmittanceBlocks,
    bus: usize,
) -> Result<(SparseRow, SparseRow), NetError> {
    if bus >= adm.n() {
        return Err(NetError::IndexOutOfRange {
            index: bus,
            n: adm.n(),
        });
    }
    Ok(adm.row_form(bus).real_rows(adm.n()))
}

/// Current leaving the given end of branch `k` into the line, as a phasor form.
pub fn branch_current_form(
    net: &Network,
    k: usize,
    end: BranchEnd,
) -> Result<PhasorForm, NetError> {
    let br = net.branches.get(k).ok_or(NetError::BranchOutOfRange {
        index: k,
        n: net.branches.len(),
    })?;
    if !br.in_service {
        return Err(NetError::BranchOutOfService(k));
    }
    let (f, t) = net.branch_ends(k).ok_or(NetError::UnknownBusReference(k))?;
    let pi = branch_pi(br);
    Ok(match end {
        BranchEnd::From => PhasorForm::new(vec![(f, pi.yff), (t, pi.yft)]),
        BranchEnd::To => PhasorForm::new(vec![(f, pi.ytf), (t, pi.ytt)]),
    })
}

/// Rows over `x` giving the current leaving `end` of branch `k`.
pub fn branch_current_rows(
    net: &Network,
    adm: &AdmittanceBlocks,
    k: usize,
    end: BranchEnd,
) -> Result<(SparseRow, SparseRow), NetError> {
    Ok(branch_current_form(net, k, end)?.real_rows(adm.n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{parse_matpower_case, Bus, BusType};

    fn two_bus(tap: f64, shift: f64) -> Network {
        let bus = |id, vm| Bus {
            id,
            bus_type: BusType::Pq,
            pd: 0.0,
            qd: 0.0,
            gs: 0.0,
            bs: 0.0,
            vm,
            va: 0.0,
            base_kv: 0.0,
        };
        let br = Branch {
            from_bus: 1,
            to_bus: 2,
            r: 0.0,
            x: 0.1,
            b_charging: 0.0,
            tap,
            shift,
            in_service: true,
        };
        Network::new(100.0, vec![bus(1, 1.0), bus(2, 0.9)], vec![], vec![br]).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn two_bus_reactance() {
        let adm = build_ybus(&two_bus(1.0, 0.0)).unwrap();
        let g = adm.gm().to_dense();
        let b = adm.bm().to_dense();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(close(b[[0, 0]], -10.0) && close(b[[0, 1]], 10.0));
        assert!(close(b[[1, 0]], 10.0) && close(b[[1, 1]], -10.0));
    }

    #[test]
    fn two_bus_tap() {
        let adm = build_ybus(&two_bus(2.0, 0.0)).unwrap();
        assert!(close(adm.get(0, 0).im, -2.5));
        assert!(close(adm.get(0, 1).im, 5.0));
        assert!(close(adm.get(1, 0).im, 5.0));
        assert!(close(adm.get(1, 1).im, -10.0));
    }

    #[test]
    fn phase_shifter_is_not_symmetric() {
        let adm = build_ybus(&two_bus(1.0, 30.0)).unwrap();
        assert!((adm.get(0, 1) - adm.get(1, 0)).norm() > 1.0);
    }

    #[test]
    fn empty_network() {
        let mut net = two_bus(1.0, 0.0);
        net.branches[0].in_service = false;
        let adm = build_ybus(&net).unwrap();
        assert_eq!(adm.gm().nnz(), 0);
        assert_eq!(adm.bm().nnz(), 0);
    }

    #[test]
    fn zero_impedance_branch() {
        let mut net = two_bus(1.0, 0.0);
        net.branches[0].x = 0.0;
        assert_eq!(build_ybus(&net).unwrap_err(), NetError::SingularBranch(0));
    }

    #[test]
    fn injection_rows_two_bus() {
        let adm = build_ybus(&two_bus(1.0, 0.0)).unwrap();
        let x = [1.0, 0.9, 0.0, 0.0];
        let (r, i) = injection_rows(&adm, 0).unwrap();
        assert!(close(r.dot(&x), 0.0));
        assert!(close(i.dot(&x), -1.0));
        assert!(injection_rows(&adm, 2).is_err());
    }

    #[test]
    fn branch_rows_two_bus() {
        let net = two_bus(1.0, 0.0);
        let adm = build_ybus(&net).unwrap();
        let x = [1.0, 0.9, 0.0, 0.0];
        let (r, i) = branch_current_rows(&net, &adm, 0, BranchEnd::From).unwrap();
        assert!(close(r.dot(&x), 0.0) && close(i.dot(&x), -1.0));
        let flat = [1.0, 1.0, 0.2, 0.2];
        let (r, i) = branch_current_rows(&net, &adm, 0, BranchEnd::To).unwrap();
        assert!(close(r.dot(&flat), 0.0) && close(i.dot(&flat), 0.0));
    }

    #[test]
    fn branch_rows_reject_out_of_service() {
        let mut net = two_bus(1.0, 0.0);
        let adm = build_ybus(&net).unwrap();
        net.branches[0].in_service = false;
        assert_eq!(
            branch_current_rows(&net, &adm, 0, BranchEnd::From).unwrap_err(),
            NetError::BranchOutOfService(0)
        );
        assert!(branch_current_rows(&net, &adm, 3, BranchEnd::From).is_err());
    }

    #[test]
    fn shunt_entries_use_per_unit() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0 5 19 1 1 0 0];\nmpc.gen = [1 0 0 0 0 1 100 1];\nmpc.branch = [];\n";
        let net = parse_matpower_case(text).unwrap();
        let adm = build_ybus(&net).unwrap();
        assert!(close(adm.get(0, 0).re, 0.05) && close(adm.get(0, 0).im, 0.19));
    }
}
