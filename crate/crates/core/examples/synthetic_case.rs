//! Generates the bundled large test case, `data/case2000syn.m`.
//!
//! Buses are random points in the unit square joined by a minimum spanning
//! tree plus short extra links. Voltages follow smooth fields; zero-injection
//! buses get the voltages their neighbours force on them (a Kron solve), and
//! loads and generation are back-computed so the stored state is an exact
//! power-flow solution.
//!
//! ```text
//! cargo run --example synthetic_case -- [N] [SEED] [OUT]
//! ```

use std::f64::consts::PI;

use ecfse::netmodel::{build_ybus, emit_matpower_case, Branch, Bus, BusType, Generator, Network};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args
        .get(1)
        .map(|s| s.parse().expect("bus count"))
        .unwrap_or(2000);
    let seed: u64 = args
        .get(2)
        .map(|s| s.parse().expect("seed"))
        .unwrap_or(2000);
    let out = args
        .get(3)
        .cloned()
        .unwrap_or_else(|| "data/case2000syn.m".to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
    let dist =
        |a: usize, b: usize| ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();

    // Prim's tree on the complete graph.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    in_tree[0] = true;
    for j in 1..n {
        best[j] = (dist(0, j), 0);
    }
    for _ in 1..n {
        let (j, _) = (0..n)
            .filter(|&j| !in_tree[j])
            .map(|j| (j, best[j].0))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        in_tree[j] = true;
        edges.push((best[j].1, j));
        for k in 0..n {
            if !in_tree[k] {
                let d = dist(j, k);
                if d < best[k].0 {
                    best[k] = (d, j);
                }
            }
        }
    }
    // Meshing: link some buses to a near neighbour not already adjacent.
    let mut adjacent = std::collections::HashSet::new();
    for &(a, b) in &edges {
        adjacent.insert((a.min(b), a.max(b)));
    }
    for a in 0..n {
        if rng.gen::<f64>() > 0.4 {
            continue;
        }
        let mut near: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        near.sort_by(|&x, &y| dist(a, x).total_cmp(&dist(a, y)));
        if let Some(&b) = near[..6]
            .iter()
            .find(|&&b| !adjacent.contains(&(a.min(b), a.max(b))))
        {
            adjacent.insert((a.min(b), a.max(b)));
            edges.push((a, b));
        }
    }

    let branches: Vec<Branch> = edges
        .iter()
        .map(|&(a, b)| {
            let x = (3.0 * dist(a, b)).clamp(0.01, 0.15);
            let transformer = rng.gen::<f64>() < 0.05;
            Branch {
                from_bus: a as u32 + 1,
                to_bus: b as u32 + 1,
                r: x * rng.gen_range(0.1..0.35),
                x,
                b_charging: if transformer {
                    0.0
                } else {
                    x * rng.gen_range(0.2..1.0)
                },
                tap: if transformer {
                    rng.gen_range(0.95..1.05)
                } else {
                    1.0
                },
                shift: if transformer && rng.gen::<f64>() < 0.2 {
                    rng.gen_range(-6.0..6.0)
                } else {
                    0.0
                },
                in_service: true,
            }
        })
        .collect();

    // Bus roles: 0 slack, then about 12 % PV, 20 % zero-injection, 2 % shunts.
    #[derive(Clone, Copy, PartialEq)]
    enum Role {
        Slack,
        Pv,
        Zi,
        Pq,
    }
    let roles: Vec<Role> = (0..n)
        .map(|k| {
            let u: f64 = rng.gen();
            match k {
                0 => Role::Slack,
                _ if u < 0.12 => Role::Pv,
                _ if u < 0.32 => Role::Zi,
                _ => Role::Pq,
            }
        })
        .collect();
    let shunt: Vec<f64> = roles
        .iter()
        .map(|&r| {
            if r == Role::Pq && rng.gen::<f64>() < 0.025 {
                rng.gen_range(5.0..30.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 }
            } else {
                0.0
            }
        })
        .collect();

    let (s0, s1) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let vm_field =
        |p: (f64, f64)| 1.0 + 0.025 * (2.0 * PI * p.0 + s0).sin() * (PI * p.1 + s1).cos();
    let va_field = |p: (f64, f64)| {
        -18.0 * ((p.0 - pts[0].0).powi(2) + (p.1 - pts[0].1).powi(2)).sqrt()
            + 3.0 * (3.0 * p.1 + s0).sin()
    };
    let mut buses: Vec<Bus> = (0..n)
        .map(|k| {
            let p = pts[k];
            let jitter = if roles[k] == Role::Slack {
                0.0
            } else {
                rng.gen_range(-0.003..0.003)
            };
            Bus {
                id: k as u32 + 1,
                bus_type: match roles[k] {
                    Role::Slack => BusType::Slack,
                    Role::Pv => BusType::Pv,
                    _ => BusType::Pq,
                },
                pd: 0.0,
                qd: 0.0,
                gs: 0.0,
                bs: shunt[k] / 100.0,
                vm: if roles[k] == Role::Slack {
                    1.04
                } else {
                    vm_field(p) + jitter
                },
                va: va_field(p) - va_field(pts[0]),
                base_kv: 230.0,
            }
        })
        .collect();

    let mut net =
        Network::new(100.0, buses.clone(), vec![], branches.clone()).expect("valid topology");
    let adm = build_ybus(&net).expect("admittances");
    let v_of = |b: &Bus| Complex64::from_polar(b.vm, b.va * PI / 180.0);

    // Kron solve Y_zz V_z = -Y_zn V_n for the zero-injection buses.
    let zi: Vec<usize> = (0..n).filter(|&k| roles[k] == Role::Zi).collect();
    let mut pos = vec![usize::MAX; n];
    for (i, &z) in zi.iter().enumerate() {
        pos[z] = i;
    }
    let mut yzz = DMatrix::<Complex64>::zeros(zi.len(), zi.len());
    let mut rhs = DVector::<Complex64>::zeros(zi.len());
    for (i, &z) in zi.iter().enumerate() {
        for &(k, y) in adm.row_form(z).terms() {
            if pos[k] != usize::MAX {
                yzz[(i, pos[k])] += y;
            } else {
                rhs[i] -= y * v_of(&buses[k]);
            }
        }
    }
    let vz = yzz
        .lu()
        .solve(&rhs)
        .expect("zero-injection block is nonsingular");
    for (i, &z) in zi.iter().enumerate() {
        buses[z].vm = vz[i].norm();
        buses[z].va = vz[i].arg() * 180.0 / PI;
    }

    // Back out demand and generation from S = V conj(Y V).
    let v: Vec<Complex64> = buses.iter().map(v_of).collect();
    let mut gens = Vec::new();
    for k in 0..n {
        let s = v[k] * adm.row_form(k).eval(&v).conj();
        match roles[k] {
            Role::Zi => {}
            Role::Pq => {
                buses[k].pd = -s.re;
                buses[k].qd = -s.im;
            }
            Role::Slack | Role::Pv => {
                let pd = rng.gen_range(0.0..0.5);
                let qd = rng.gen_range(0.0..0.2);
                buses[k].pd = pd;
                buses[k].qd = qd;
                gens.push(Generator {
                    bus: k as u32 + 1,
                    pg: s.re + pd,
                    qg: s.im + qd,
                    vg: buses[k].vm,
                    in_service: true,
                });
            }
        }
    }
    net = Network::new(100.0, buses, gens, branches).expect("valid case");
    let mut text = emit_matpower_case(&net, "case2000syn");
    text.insert_str(
        text.find('\n').unwrap() + 1,
        &format!(
            "%CASE2000SYN  Synthetic {n}-bus network (generator seed {seed}); the bus\n\
             %   voltages are an exact power-flow solution for the stored injections.\n"
        ),
    );
    std::fs::write(&out, text).expect("write case file");
    eprintln!(
        "wrote {out}: {} buses, {} branches, {} zero-injection",
        n,
        net.branches.len(),
        zi.len()
    );
}
