//! Finite-difference gradient checks for every layer and a tiny network.
//!
//! cargo run --release --example gradient_check [seeds]

use volnet::gradcheck::{layer_checks, network_check, worst, GradCheck};

fn report(label: &str, checks: &[GradCheck]) {
    let w = worst(checks).unwrap();
    println!("{label:<28} {:>5} checks  worst {:.2e}  ({} / {})", checks.len(), w.rel_error, w.case, w.tensor);
}

fn without_vanishing(checks: Vec<GradCheck>) -> Vec<GradCheck> {
    checks.into_iter().filter(|c| !c.case.contains("vanishing")).collect()
}

fn main() -> volnet::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let (mut l32, mut l32r, mut l64) = (vec![], vec![], vec![]);
    let (mut n32, mut n32f, mut n64) = (vec![], vec![], vec![]);
    for s in 0..seeds {
        l32.extend(layer_checks::<f32, f32>(s, 1e-2)?);
        l32r.extend(layer_checks::<f32, f64>(s, 1e-6)?);
        l64.extend(layer_checks::<f64, f64>(s, 1e-6)?);
        n32.extend(network_check::<f32, f64>(s, 1e-6)?);
        n32f.extend(network_check::<f32, f32>(s, 1e-2)?);
        n64.extend(network_check::<f64, f64>(s, 1e-6)?);
    }
    report("layers f32 (f32 differences)", &l32);
    report("layers f32 (f64 differences)", &l32r);
    report("layers f64", &l64);
    report("network f32 (f64 differences)", &n32);
    report("network f32 (f32 differences)", &without_vanishing(n32f));
    report("network f64", &n64);
    Ok(())
}
