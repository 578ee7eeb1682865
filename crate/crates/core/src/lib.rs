//! Power-system state estimation with an equivalent-circuit measurement
//! model, plus a polar weighted-least-squares baseline.
//!
//! Typical flow: parse a case ([`netmodel::parse_matpower_case`]), build the
//! admittances ([`netmodel::build_ybus`]), obtain a [`measurements::MeasurementSet`]
//! (read one or synthesize one with [`synth::synthesize_measurements`]) and
//! call [`ecf::estimate`] or [`wls::estimate_wls`].

pub mod cli;
pub mod ecf;
pub mod ldl;
pub mod measurements;
pub mod metrics;
pub mod netmodel;
pub mod sparse;
pub mod synth;
pub mod wls;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/measurements.md")]
    mod measurements {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/metrics_cli.md")]
    mod metrics_cli {}
}
