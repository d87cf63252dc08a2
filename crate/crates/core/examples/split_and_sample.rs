//! Train/validation/test splitting, epoch accounting and class-balanced
//! sampling on an imbalanced cohort.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volnet::data::{epoch_plan, reshuffle_train_val, split_dataset, BalancedSampler, Label, Manifest, SubjectRecord};

fn main() -> volnet::Result<()> {
    let sizes = [(Label::AD, 53), (Label::MCI, 228), (Label::NC, 250)];
    let records = sizes
        .iter()
        .flat_map(|&(label, n)| {
            (0..n).map(move |i| SubjectRecord {
                subject_id: format!("{label}_{i:03}"),
                label,
                volumes: BTreeMap::new(),
            })
        })
        .collect();
    let manifest = Manifest::new(records)?;

    let split = split_dataset(&manifest, 0)?;
    println!("class  train  val  test");
    for (label, _) in sizes {
        let (tr, va, te) = split.sizes(label);
        println!("{:<5} {tr:>6} {va:>4} {te:>5}", label.name());
    }
    let next = reshuffle_train_val(&split, 1);
    println!("test set unchanged after reshuffle: {}", next.test == split.test);

    let n_train: usize = sizes.iter().map(|&(l, _)| split.sizes(l).0).sum();
    let (samples, iterations) = epoch_plan(n_train, 5, 15)?;
    println!("\n{n_train} training subjects, tau 5, eta 15: {samples} samples, {iterations} iterations per epoch");

    let mut offset = 0;
    let members: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&(l, _)| {
            let n = split.sizes(l).0;
            offset += n;
            (offset - n..offset).collect()
        })
        .collect();
    let sampler = BalancedSampler::new(members)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[sampler.draw(&mut rng).0] += 1;
    }
    let natural: Vec<f64> = sizes.iter().map(|&(l, _)| split.sizes(l).0 as f64 / n_train as f64).collect();
    println!("\nclass  natural  balanced");
    for (i, (label, _)) in sizes.iter().enumerate() {
        println!("{:<5} {:>8.3} {:>9.3}", label.name(), natural[i], counts[i] as f64 / draws as f64);
    }
    Ok(())
}
