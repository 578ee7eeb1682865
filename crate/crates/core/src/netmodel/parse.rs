use std::fmt::Write as _;

use super::{Branch, Bus, BusType, Generator, NetError, Network};

const BUS_COLS: usize = 10;
const GEN_COLS: usize = 8;
const BRANCH_COLS: usize = 11;

#[derive(Default)]
struct RawTable {
    rows: Vec<(usize, Vec<f64>)>,
}

enum State {
    Outside,
    Matrix { name: String },
    SkipUntil(char),
}

/// Parses the subset of the MATPOWER case format needed here: `mpc.baseMVA`,
/// `mpc.bus`, `mpc.gen` and `mpc.branch`. Other assignments are skipped.
pub fn parse_matpower_case(text: &str) -> Result<Network, NetError> {
    let mut base_mva = None;
    let mut tables: std::collections::HashMap<String, RawTable> = Default::default();
    let mut state = State::Outside;

    for (lineno0, raw_line) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = strip_comment(raw_line);
        let mut rest: &str = line;
        loop {
            match &mut state {
                State::Outside => {
                    let t = rest.trim();
                    let Some(assign) = t.strip_prefix("mpc.") else {
                        break;
                    };
                    let Some((lhs, rhs)) = assign.split_once('=') else {
                        break;
                    };
                    let name = lhs.trim().to_string();
                    let rhs = rhs.trim_start();
                    if let Some(body) = rhs.strip_prefix('[') {
                        state = State::Matrix { name };
                        rest = body;
                    } else if let Some(body) = rhs.strip_prefix('{') {
                        state = State::SkipUntil('}');
                        rest = body;
                    } else {
                        if name == "baseMVA" {
                            let v = rhs.trim_end().trim_end_matches(';').trim();
                            base_mva = Some(
                                v.parse::<f64>()
                                    .map_err(|_| NetError::MalformedRow(lineno))?,
                            );
                        }
                        break;
                    }
                }
                State::SkipUntil(close) => match rest.find(*close) {
                    Some(p) => {
                        rest = &rest[p + 1..];
                        state = State::Outside;
                    }
                    None => break,
                },
                State::Matrix { name } => {
                    let (segment, closed) = match rest.find(']') {
                        Some(p) => (&rest[..p], Some(p)),
                        None => (rest, None),
                    };
                    // Rows end at ';' and at the end of a line.
                    for piece in segment.split(';') {
                        let mut row = Vec::new();
                        for tok in piece.split(|c: char| c.is_whitespace() || c == ',') {
                            if tok.is_empty() {
                                continue;
                            }
                            row.push(parse_number(tok).ok_or(NetError::MalformedRow(lineno))?);
                        }
                        if !row.is_empty() {
                            tables
                                .entry(name.clone())
                                .or_default()
                                .rows
                                .push((lineno, row));
                        }
                    }
                    match closed {
                        Some(p) => {
                            tables.entry(name.clone()).or_default();
                            rest = &rest[p + 1..];
                            state = State::Outside;
                        }
                        None => break,
                    }
                }
            }
        }
    }

    let base_mva = base_mva.ok_or(NetError::MissingTable("baseMVA"))?;
    let bus_t = tables.remove("bus").ok_or(NetError::MissingTable("bus"))?;
    let gen_t = tables.remove("gen").ok_or(NetError::MissingTable("gen"))?;
    let br_t = tables
        .remove("branch")
        .ok_or(NetError::MissingTable("branch"))?;

    let mut buses = Vec::with_capacity(bus_t.rows.len());
    for (line, r) in &bus_t.rows {
        if r.len() < BUS_COLS {
            return Err(NetError::MalformedRow(*line));
        }
        let bus_type = BusType::from_code(r[1]).ok_or(NetError::MalformedRow(*line))?;
        buses.push(Bus {
            id: as_id(r[0]).ok_or(NetError::MalformedRow(*line))?,
            bus_type,
            pd: r[2] / base_mva,
            qd: r[3] / base_mva,
            gs: r[4] / base_mva,
            bs: r[5] / base_mva,
            vm: r[7],
            va: r[8],
            base_kv: r[9],
        });
    }

    let mut generators = Vec::with_capacity(gen_t.rows.len());
    for (line, r) in &gen_t.rows {
        if r.len() < GEN_COLS {
            return Err(NetError::MalformedRow(*line));
        }
        generators.push(Generator {
            bus: as_id(r[0]).ok_or(NetError::MalformedRow(*line))?,
            pg: r[1] / base_mva,
            qg: r[2] / base_mva,
            vg: r[5],
            in_service: r[7] > 0.0,
        });
    }

    let mut branches = Vec::with_capacity(br_t.rows.len());
    for (line, r) in &br_t.rows {
        if r.len() < BRANCH_COLS {
            return Err(NetError::MalformedRow(*line));
        }
        branches.push(Branch {
            from_bus: as_id(r[0]).ok_or(NetError::MalformedRow(*line))?,
            to_bus: as_id(r[1]).ok_or(NetError::MalformedRow(*line))?,
            r: r[2],
            x: r[3],
            b_charging: r[4],
            tap: if r[8] == 0.0 { 1.0 } else { r[8] },
            shift: r[9],
            in_service: r[10] > 0.0,
        });
    }

    Network::new(base_mva, buses, generators, branches)
}

/// Writes a network back out in canonical MATPOWER form. Columns not carried
/// by [`Network`] get neutral defaults.
pub fn emit_matpower_case(net: &Network, name: &str) -> String {
    let base = net.base_mva;
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = {name}");
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {base};");
    let _ = writeln!(s, "\n%% bus data");
    let _ = writeln!(
        s,
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin"
    );
    let _ = writeln!(s, "mpc.bus = [");
    for b in net.buses.iter().chain(&net.isolated) {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t{}\t1\t1.1\t0.9;",
            b.id,
            b.bus_type.code(),
            b.pd * base,
            b.qd * base,
            b.gs * base,
            b.bs * base,
            b.vm,
            b.va,
            b.base_kv
        );
    }
    let _ = writeln!(s, "];\n\n%% generator data");
    let _ = writeln!(
        s,
        "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin"
    );
    let _ = writeln!(s, "mpc.gen = [");
    for g in &net.generators {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t0\t0\t{}\t{}\t{}\t0\t0;",
            g.bus,
            g.pg * base,
            g.qg * base,
            g.vg,
            base,
            u8::from(g.in_service)
        );
    }
    let _ = writeln!(s, "];\n\n%% branch data");
    let _ = writeln!(
        s,
        "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax"
    );
    let _ = writeln!(s, "mpc.branch = [");
    for br in &net.branches {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t{}\t-360\t360;",
            br.from_bus,
            br.to_bus,
            br.r,
            br.x,
            br.b_charging,
            br.tap,
            br.shift,
            u8::from(br.in_service)
        );
    }
    let _ = writeln!(s, "];");
    s
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_number(tok: &str) -> Option<f64> {
    match tok {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

fn as_id(v: f64) -> Option<u32> {
    (v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as u32)
}
