//! Times one batched training step (forward + backward) for each 4-ROI preset.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volnet::arch::{count_parameters, Preset};
use volnet::model::Network;
use volnet::nn::{cross_entropy_batch, one_hot, Mode};
use volnet::Tensor;

fn main() -> volnet::Result<()> {
    let batch = 15;
    for preset in [Preset::Proposed4Roi, Preset::Alexnet4Roi] {
        let spec = preset.build(2, None, 0.5)?;
        println!("{preset}: {} parameters", count_parameters(&spec)?.total);
        let mut net = Network::<f32>::new(spec)?;
        let inputs: Vec<Tensor> = (0..4)
            .map(|p| Tensor::from_fn(&[batch, 1, 29, 29, 29], |i| ((i * 7 + p) % 13) as f32 / 13.0))
            .collect::<volnet::Result<_>>()?;
        let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        let target = one_hot::<f32>(&labels, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2 {
            let t = Instant::now();
            let pass = net.forward(&inputs, Mode::Train, &mut rng)?;
            let t_fwd = t.elapsed();
            let (loss, g) = cross_entropy_batch(&pass.probs, &target)?;
            let _grads = net.backward(&pass, &g)?;
            println!("  loss {loss:.4} forward {t_fwd:?} total {:?}", t.elapsed());
        }
    }
    Ok(())
}
