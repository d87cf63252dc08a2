//! Normal-approximation intervals for accuracies measured on small test sets,
//! next to Wilson score intervals for comparison.

use volnet::eval::{confidence_interval, wilson_interval, MetricWithCi, DEFAULT_THETA};

fn main() -> volnet::Result<()> {
    let table = [
        (0.933, 30),
        (0.9, 30),
        (0.867, 30),
        (0.833, 30),
        (0.8, 30),
        (0.733, 30),
        (0.667, 30),
        (0.62, 45),
        (0.689, 45),
    ];
    println!("{:>6} {:>4}  {:<28} wilson", "value", "n", "normal approximation");
    for (value, n) in table {
        let m = MetricWithCi::new(value, n, DEFAULT_THETA)?;
        let (lo, hi) = wilson_interval(value, n, DEFAULT_THETA)?;
        println!("{value:>6.3} {n:>4}  {:<28} [{lo:.3}, {hi:.3}]", m.summary());
    }

    // the half-width shrinks like 1/sqrt(n)
    for n in [15, 30, 60, 120, 240] {
        println!("acc 0.8, n = {n:>3}: ±{:.3}", confidence_interval(0.8, n, DEFAULT_THETA)?);
    }
    Ok(())
}
