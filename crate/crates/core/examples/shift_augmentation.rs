//! Volume files and shift augmentation: a stored ROI carries a 2-voxel
//! margin, so every shifted 29³ window is a plain crop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volnet::data::{augment_shift, center_crop, decode_volume, draw_shift, encode_volume, shift_crop, PaddedRoi, Roi, PADDED_EXTENT};
use volnet::Tensor;

fn main() -> volnet::Result<()> {
    let e = PADDED_EXTENT;
    // a bright cube in one corner of the padded volume
    let volume = Tensor::from_fn(&[1, e, e, e], |i| {
        let (z, y, x) = (i / (e * e), (i / e) % e, i % e);
        if z < 8 && y < 8 && x < 8 {
            1.0
        } else {
            0.0
        }
    })?;

    let bytes = encode_volume(&volume);
    let header_end = bytes.iter().position(|&b| b == 0).unwrap();
    println!("vvol header: {:?}", String::from_utf8_lossy(&bytes[..header_end]));
    println!("payload {} bytes, round trip exact: {}", bytes.len() - header_end - 1, decode_volume(&bytes)? == volume);

    let roi = PaddedRoi::new(volume, "demo", Roi::SmriL)?;
    println!("\ncenter crop keeps {} bright voxels", center_crop(&roi)?.sum_f64());
    for shift in [[-2, -2, -2], [0, 0, 0], [2, 2, 2], [-2, 0, 2]] {
        println!("shift {shift:?}: {:>4} bright voxels", shift_crop(&roi, shift)?.sum_f64());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shifts: Vec<[i32; 3]> = (0..6).map(|_| draw_shift(&mut rng)).collect();
    println!("\nrandom shifts: {shifts:?}");
    let crop = augment_shift(&roi, &mut rng)?;
    println!("augmented crop shape {:?}", crop.shape());
    Ok(())
}
