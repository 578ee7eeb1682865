mod common;

use common::load;
use ecfse::measurements::{FlowKind, MeasurementSet};
use ecfse::netmodel::BranchEnd;
use ecfse::synth::{synthesize_measurements, BuiltinPlan, Device, FlowPlan, MeasurementPlan};
use ecfse::wls::{
    estimate_wls, measurement_function, ChannelModel, DivergenceReason, PolarState, WlsInit,
    WlsModel, WlsOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// PMUs, RTUs, both flow kinds and an anchor on case14.
fn mixed_set(f: &common::Fixture, sigma: f64, seed: u64) -> MeasurementSet {
    let mut plan = MeasurementPlan::default();
    for b in 0..f.net.n_bus() {
        if b == 6 {
            continue;
        }
        plan.devices
            .insert(b, if b % 3 == 0 { Device::Pmu } else { Device::Rtu });
    }
    for k in 0..f.net.branches.len() {
        plan.flows.push(FlowPlan {
            branch: k,
            end: if k % 2 == 0 {
                BranchEnd::From
            } else {
                BranchEnd::To
            },
            kind: if k % 4 < 2 {
                FlowKind::Rtu
            } else {
                FlowKind::Pmu
            },
        });
    }
    plan.anchor = Some(0);
    synthesize_measurements(&f.net, &f.truth, &plan, sigma, seed).unwrap()
}

fn random_state(f: &common::Fixture, rng: &mut ChaCha8Rng) -> PolarState {
    let mut st = PolarState::from_case(&f.net);
    for k in 0..f.net.n_bus() {
        st.vm[k] = rng.gen_range(0.85..1.15);
        if k != st.reference {
            st.va[k] = rng.gen_range(-0.6..0.6);
        }
    }
    st
}

#[test]
fn jacobian_matches_central_differences() {
    let f = load("case14");
    let ms = mixed_set(&f, 0.001, 1);
    let model = WlsModel::new(&f.net, &f.adm, &ms, 1e6);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        worst = worst.max(common::jacobian_fd_error(
            &model,
            &random_state(&f, &mut rng),
        ));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn power_rows_are_blind_to_uniform_rotation() {
    // with the reference moved away from bus 0's neighbourhood the row holds
    // every angle it depends on, so the angle entries sum to zero
    let f = load("case14");
    let ms = mixed_set(&f, 0.0, 1);
    let model = WlsModel::new(&f.net, &f.adm, &ms, 1e6);
    let mut st = PolarState::flat(&f.net);
    st.reference = 13;
    let jac = model.jacobian(&st);
    let n = f.net.n_bus();
    let mut checked = 0;
    for (c, row) in model.channels.iter().zip(&jac) {
        if let ChannelModel::P(bus, _) = c.model {
            if bus == 0 {
                let s: f64 = row
                    .entries()
                    .iter()
                    .filter(|e| e.0 < n - 1)
                    .map(|e| e.1)
                    .sum();
                assert!(s.abs() < 1e-12, "{s}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn noiseless_data_is_a_fixed_point() {
    for case in ["case5zi", "case14", "case118"] {
        let f = load(case);
        let ms = synthesize_measurements(
            &f.net,
            &f.truth,
            &BuiltinPlan::RtuAll.expand(&f.net).unwrap(),
            0.0,
            1,
        )
        .unwrap();
        let h = measurement_function(&f.net, &f.adm, &ms, &PolarState::from_case(&f.net));
        let model = WlsModel::new(&f.net, &f.adm, &ms, 1e6);
        for (c, v) in model.channels.iter().zip(&h) {
            assert!((c.z - v).abs() < 1e-9, "{case}");
        }
        let res = estimate_wls(
            &f.net,
            &f.adm,
            &ms,
            WlsInit::CaseData,
            &WlsOptions::default(),
        );
        assert!(res.converged && res.iterations <= 3, "{case}: {res:?}");
        assert!(common::max_abs_diff(&res.state.to_rectangular(), &f.truth.x_true) < 1e-6);
    }
}

#[test]
fn noisy_case14_converges_quickly() {
    let f = load("case14");
    for seed in 1..=10 {
        let ms = synthesize_measurements(
            &f.net,
            &f.truth,
            &BuiltinPlan::RtuAll.expand(&f.net).unwrap(),
            0.001,
            seed,
        )
        .unwrap();
        for init in [WlsInit::CaseData, WlsInit::Flat] {
            let res = estimate_wls(&f.net, &f.adm, &ms, init, &WlsOptions::default());
            assert!(res.converged && res.iterations <= 10);
        }
    }
}

#[test]
fn converged_solution_is_stationary() {
    // Without pseudo-measurements the weighted gradient is at rounding level.
    // With them it is dominated by weight-1e12 rows, so it is checked
    // relative to the largest weight.
    let f = load("case14");
    let ms = synthesize_measurements(
        &f.net,
        &f.truth,
        &BuiltinPlan::PmuAll.expand(&f.net).unwrap(),
        0.001,
        3,
    )
    .unwrap();
    let res = estimate_wls(&f.net, &f.adm, &ms, WlsInit::Flat, &WlsOptions::default());
    assert!(res.converged);
    assert!(
        res.final_gradient_norm < 1e-6,
        "{:e}",
        res.final_gradient_norm
    );

    let ms = mixed_set(&f, 0.001, 3);
    let res = estimate_wls(&f.net, &f.adm, &ms, WlsInit::Flat, &WlsOptions::default());
    let model = WlsModel::new(&f.net, &f.adm, &ms, 1e6);
    let max_w = model.channels.iter().fold(0.0_f64, |m, c| m.max(c.w));
    assert!(res.converged);
    assert!(res.final_gradient_norm / max_w < 1e-6);
}

#[test]
fn line_search_never_increases_the_objective() {
    let f = load("case118");
    let ms = synthesize_measurements(
        &f.net,
        &f.truth,
        &BuiltinPlan::RtuAll.expand(&f.net).unwrap(),
        0.001,
        2,
    )
    .unwrap();
    let mut last = f64::INFINITY;
    for k in 1..=6 {
        let opts = WlsOptions {
            max_iters: k,
            line_search: true,
            ..WlsOptions::default()
        };
        let res = estimate_wls(&f.net, &f.adm, &ms, WlsInit::Flat, &opts);
        assert!(res.objective <= last * (1.0 + 1e-12), "iteration {k}");
        last = res.objective;
        if res.converged {
            break;
        }
    }
}

#[test]
fn unmeasured_island_reports_singular_gain() {
    let f = load("case14");
    let mut plan = BuiltinPlan::RtuAll.expand(&f.net).unwrap();
    // drop every device and flow touching leaf bus 8, and the pseudo-measurement
    // of its only neighbour, zero-injection bus 7
    let leaf = f.net.index_of(8).unwrap();
    plan.devices.remove(&leaf);
    plan.flows.retain(|fl| {
        let (a, b) = f.net.branch_ends(fl.branch).unwrap();
        a != leaf && b != leaf
    });
    let mut ms = synthesize_measurements(&f.net, &f.truth, &plan, 0.001, 1).unwrap();
    assert!(ms.zi_buses.remove(&f.net.index_of(7).unwrap()));
    let res = estimate_wls(&f.net, &f.adm, &ms, WlsInit::Flat, &WlsOptions::default());
    assert_eq!(res.divergence_reason, Some(DivergenceReason::SingularGain));
}

#[test]
fn iteration_cap_is_reported() {
    let f = load("case118");
    let ms = synthesize_measurements(
        &f.net,
        &f.truth,
        &BuiltinPlan::RtuAll.expand(&f.net).unwrap(),
        0.001,
        2,
    )
    .unwrap();
    let opts = WlsOptions {
        max_iters: 1,
        ..WlsOptions::default()
    };
    let res = estimate_wls(&f.net, &f.adm, &ms, WlsInit::Flat, &opts);
    assert_eq!(res.divergence_reason, Some(DivergenceReason::MaxIters));
    assert_eq!(res.iterations, 1);
}
