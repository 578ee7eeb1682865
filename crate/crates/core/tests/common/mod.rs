#![allow(dead_code)]

use std::path::PathBuf;

use ecfse::netmodel::{build_ybus, parse_matpower_case, AdmittanceBlocks, Network};
use ecfse::synth::{compute_truth, true_state_from_case, TruthBundle};

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

pub struct Fixture {
    pub net: Network,
    pub adm: AdmittanceBlocks,
    pub truth: TruthBundle,
}

pub fn load(case: &str) -> Fixture {
    let text = std::fs::read_to_string(data_path(&format!("{case}.m"))).expect("fixture present");
    let net = parse_matpower_case(&text).expect("fixture parses");
    let adm = build_ybus(&net).expect("fixture admittances");
    let x = true_state_from_case(&net).unwrap();
    let truth = compute_truth(&net, &adm, &x);
    Fixture { net, adm, truth }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn rotate_state(x: &[f64], theta: f64) -> Vec<f64> {
    let n = x.len() / 2;
    let (s, c) = theta.sin_cos();
    let mut out = vec![0.0; 2 * n];
    for k in 0..n {
        out[k] = c * x[k] - s * x[n + k];
        out[n + k] = s * x[k] + c * x[n + k];
    }
    out
}

use ecfse::measurements::{FlowReading, MeasurementSet};
use num_complex::Complex64;

/// Rotates every phasor reading (PMU voltages and currents, PMU flows and
/// the anchor) by `theta`. Magnitude and power readings are unchanged.
pub fn rotate_measurements(ms: &MeasurementSet, theta: f64) -> MeasurementSet {
    let r = Complex64::from_polar(1.0, theta);
    let rot = |a: f64, b: f64| {
        let c = r * Complex64::new(a, b);
        (c.re, c.im)
    };
    let mut out = ms.clone();
    for p in &mut out.pmu {
        (p.z_vr, p.z_vi) = rot(p.z_vr, p.z_vi);
        (p.z_ir, p.z_ii) = rot(p.z_ir, p.z_ii);
    }
    for f in &mut out.flows {
        if let FlowReading::Pmu { z_ir, z_ii } = &mut f.reading {
            (*z_ir, *z_ii) = rot(*z_ir, *z_ii);
        }
    }
    if let Some(a) = &mut out.anchor {
        (a.z_vr, a.z_vi) = rot(a.z_vr, a.z_vi);
    }
    out
}

use ecfse::measurements::rtu_shunt_params;
use ecfse::netmodel::{branch_current_rows, injection_rows, BranchEnd};
use ecfse::sparse::SparseRow;
use nalgebra::{DMatrix, DVector};

/// Solves the un-eliminated problem with a dense LU: the state, one pair of
/// noise sources per device and one pair of free injections per unmeasured
/// non-zero-injection bus are all variables, and every device and bus
/// equation is an explicit equality constraint. Returns the state part.
pub fn full_formulation_state(
    net: &Network,
    adm: &AdmittanceBlocks,
    ms: &MeasurementSet,
) -> Vec<f64> {
    let n = net.n_bus();
    let n2 = 2 * n;
    let mut measured = vec![false; n];
    for p in &ms.pmu {
        measured[p.bus] = true;
    }
    for r in &ms.rtu {
        measured[r.bus] = true;
    }
    let unmeasured: Vec<usize> = (0..n)
        .filter(|&b| !measured[b] && !ms.zi_buses.contains(&b))
        .collect();
    let n_noise = 2 * (ms.pmu.len() + ms.rtu.len() + ms.flows.len());
    let nv = n2 + n_noise + 2 * unmeasured.len();

    // objective ½vᵀQv + qᵀv (Q = 2 Σ w aaᵀ, q = -2 Σ w b a)
    let mut q_mat = DMatrix::<f64>::zeros(nv, nv);
    let mut q_vec = DVector::<f64>::zeros(nv);
    let mut add_sq = |col: usize, target: f64, w: f64| {
        q_mat[(col, col)] += 2.0 * w;
        q_vec[col] -= 2.0 * w * target;
    };
    let mut cons: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let with = |row: &SparseRow, extra: &[(usize, f64)]| {
        let mut v: Vec<(usize, f64)> = row.entries().to_vec();
        v.extend_from_slice(extra);
        v
    };
    let mut next_noise = n2;
    for p in &ms.pmu {
        let (yr, yi) = injection_rows(adm, p.bus).unwrap();
        let (nr, ni) = (next_noise, next_noise + 1);
        next_noise += 2;
        add_sq(nr, 0.0, p.w_i);
        add_sq(ni, 0.0, p.w_i);
        add_sq(p.bus, p.z_vr, p.w_v);
        add_sq(n + p.bus, p.z_vi, p.w_v);
        cons.push((with(&yr, &[(nr, 1.0)]), -p.z_ir));
        cons.push((with(&yi, &[(ni, 1.0)]), -p.z_ii));
    }
    for r in &ms.rtu {
        let sp = rtu_shunt_params(r.z_vm, r.z_p, r.z_q).unwrap();
        let (yr, yi) = injection_rows(adm, r.bus).unwrap();
        let (nr, ni) = (next_noise, next_noise + 1);
        next_noise += 2;
        add_sq(nr, 0.0, r.w);
        add_sq(ni, 0.0, r.w);
        cons.push((
            with(&yr, &[(r.bus, sp.g), (n + r.bus, sp.b), (nr, 1.0)]),
            0.0,
        ));
        cons.push((
            with(&yi, &[(n + r.bus, sp.g), (r.bus, -sp.b), (ni, 1.0)]),
            0.0,
        ));
    }
    for f in &ms.flows {
        let (lr, li) = branch_current_rows(net, adm, f.branch, f.end).unwrap();
        let (nr, ni) = (next_noise, next_noise + 1);
        next_noise += 2;
        add_sq(nr, 0.0, f.w);
        add_sq(ni, 0.0, f.w);
        match f.reading {
            FlowReading::Rtu {
                z_vm,
                z_pline,
                z_qline,
            } => {
                let sp = rtu_shunt_params(z_vm, z_pline, z_qline).unwrap();
                let (a, b) = net.branch_ends(f.branch).unwrap();
                let e = if f.end == BranchEnd::From { a } else { b };
                cons.push((with(&lr, &[(e, -sp.g), (n + e, -sp.b), (nr, -1.0)]), 0.0));
                cons.push((with(&li, &[(n + e, -sp.g), (e, sp.b), (ni, -1.0)]), 0.0));
            }
            FlowReading::Pmu { z_ir, z_ii } => {
                cons.push((with(&lr, &[(nr, -1.0)]), z_ir));
                cons.push((with(&li, &[(ni, -1.0)]), z_ii));
            }
        }
    }
    if let Some(a) = &ms.anchor {
        add_sq(a.bus, a.z_vr, a.weight);
        add_sq(n + a.bus, a.z_vi, a.weight);
    }
    for &z in &ms.zi_buses {
        let (yr, yi) = injection_rows(adm, z).unwrap();
        cons.push((yr.entries().to_vec(), 0.0));
        cons.push((yi.entries().to_vec(), 0.0));
    }
    for (k, &b) in unmeasured.iter().enumerate() {
        let (yr, yi) = injection_rows(adm, b).unwrap();
        let col = n2 + n_noise + 2 * k;
        cons.push((with(&yr, &[(col, 1.0)]), 0.0));
        cons.push((with(&yi, &[(col + 1, 1.0)]), 0.0));
    }

    let m = cons.len();
    let mut kkt = DMatrix::<f64>::zeros(nv + m, nv + m);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&q_mat);
    let mut rhs = DVector::<f64>::zeros(nv + m);
    for i in 0..nv {
        rhs[i] = -q_vec[i];
    }
    for (r, (entries, b)) in cons.iter().enumerate() {
        for &(c, v) in entries {
            kkt[(nv + r, c)] += v;
            kkt[(c, nv + r)] += v;
        }
        rhs[nv + r] = *b;
    }
    let sol = kkt
        .full_piv_lu()
        .solve(&rhs)
        .expect("full formulation is nonsingular");
    sol.as_slice()[..n2].to_vec()
}

use ecfse::wls::{PolarState, WlsModel};

/// Moves one Jacobian column (non-reference angles, then magnitudes).
pub fn perturbed(st: &PolarState, col: usize, h: f64) -> PolarState {
    let n = st.vm.len();
    let mut s = st.clone();
    if col < n - 1 {
        let k = if col < st.reference { col } else { col + 1 };
        s.va[k] += h;
    } else {
        s.vm[col - (n - 1)] += h;
    }
    s
}

/// Largest `|J - J_fd| / max(|J_fd|, 1)` over all entries, with central
/// differences of step `1e-6`.
pub fn jacobian_fd_error(model: &WlsModel, st: &PolarState) -> f64 {
    let n_cols = 2 * st.vm.len() - 1;
    let step = 1e-6;
    let jac = model.jacobian(st);
    let mut worst: f64 = 0.0;
    for col in 0..n_cols {
        let hp = model.evaluate(&perturbed(st, col, step));
        let hm = model.evaluate(&perturbed(st, col, -step));
        for (r, row) in jac.iter().enumerate() {
            let fd = (hp[r] - hm[r]) / (2.0 * step);
            worst = worst.max((row.get(col) - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}
