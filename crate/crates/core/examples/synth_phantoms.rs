//! Write a synthetic phantom cohort and show what separates the classes.
//!
//! cargo run --release --example synth_phantoms [out_dir]

use volnet::data::{center_crop, generate_phantoms, read_volume, Label, PaddedRoi, PhantomConfig, Roi};

/// Central axial slice as characters, darkest to brightest.
fn ascii_slice(t: &volnet::Tensor, extent: usize) -> String {
    let ramp = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let z = extent / 2;
    let mut out = String::new();
    for y in 0..extent {
        for x in 0..extent {
            let v = t.data()[(z * extent + y) * extent + x].clamp(0.0, 0.999);
            out.push(ramp[(v * ramp.len() as f32) as usize]);
        }
        out.push('\n');
    }
    out
}

fn main() -> volnet::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("volnet-phantoms"),
    };
    let config = PhantomConfig {
        classes: PhantomConfig::classes_for(3)?,
        per_class: 16,
        ..Default::default()
    };
    let manifest = generate_phantoms(&config, &dir)?;
    println!("{} subjects written under {}", manifest.len(), dir.display());

    let by_label = manifest.ids_by_label();
    for (label, ids) in &by_label {
        let mut mean = 0.0;
        for id in ids {
            let path = &manifest.get(id).unwrap().volumes[&Roi::SmriL];
            mean += read_volume(path)?.sum_f64() / 33f64.powi(3);
        }
        println!("{:<4} mean sMRI intensity {:.4}", label.name(), mean / ids.len() as f64);
    }

    let id = &by_label[&Label::AD][0];
    let padded = PaddedRoi::new(read_volume(&manifest.get(id).unwrap().volumes[&Roi::SmriL])?, id.clone(), Roi::SmriL)?;
    println!("\n{id} smri_l, central slice of the 29^3 crop:\n{}", ascii_slice(&center_crop(&padded)?, 29));
    Ok(())
}
