//! Layer-by-layer shapes and parameter counts of the built-in presets.
//!
//! cargo run --release --example inspect_architectures [f0]

use volnet::arch::{band_widths, channel_rule, count_parameters, Preset};

fn main() -> volnet::Result<()> {
    let f0: Option<usize> = std::env::args().nth(1).and_then(|s| s.parse().ok());

    let proposed = Preset::Proposed4Roi.build(2, f0, 0.5)?;
    let first = proposed.pipelines[0].input.clone();
    println!("{} pipeline '{first}' (one of {}):", proposed.name, proposed.pipelines.len());
    for layer in proposed.trace()?.iter().filter(|l| l.name.starts_with(&first)) {
        println!("  {:<30} {:<16} {:>18} {:>7}", layer.name, layer.kind, format!("{:?}", layer.output_shape), layer.parameters);
    }

    println!("\ninception channel rule:");
    let mut n = f0.unwrap_or(8);
    for _ in 0..4 {
        println!("  {n:>3} -> {:>3}  bands {:?}", channel_rule(n), band_widths(n));
        n = channel_rule(n);
    }

    println!("\ntotals:");
    let mut totals = vec![];
    for preset in Preset::ALL {
        let total = count_parameters(&preset.build(2, f0, 0.5)?)?.total;
        println!("  {:<20} {total:>9}", preset.name());
        totals.push(total);
    }
    println!("\nalexnet-4roi / proposed-4roi = {:.2}", totals[3] as f64 / totals[0] as f64);
    Ok(())
}
