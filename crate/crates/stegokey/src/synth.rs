//! Procedural sample images: smooth color gradients with soft shapes and a
//! mild sinusoidal texture. Good enough to exercise training, evaluation,
//! and the CLI without shipping a dataset; diverse enough that two random
//! images differ strongly.

use std::path::Path;

use ndarray::Array3;

use crate::backbone::ImagePlane;
use crate::error::Result;
use crate::rng::SeedStream;

/// Deterministic procedural image for `seed`.
pub fn synth_image(seed: u64, side: usize) -> ImagePlane {
    let s = SeedStream::new(seed);
    let corner = |i: u64, ch: u64| s.unit_f64(i * 3 + ch);
    let n = side as f64 - 1.0;

    let mut img = Array3::<f64>::zeros((3, side, side));
    for c in 0..3u64 {
        let (c00, c01, c10, c11) = (corner(0, c), corner(1, c), corner(2, c), corner(3, c));
        for y in 0..side {
            let fy = y as f64 / n.max(1.0);
            for x in 0..side {
                let fx = x as f64 / n.max(1.0);
                let top = c00 * (1.0 - fx) + c01 * fx;
                let bottom = c10 * (1.0 - fx) + c11 * fx;
                img[(c as usize, y, x)] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }

    // soft-edged shapes
    let shapes = 1 + s.bounded(100, 3);
    for k in 0..shapes {
        let sh = s.substream(10 + k);
        let cx = sh.unit_f64(0) * side as f64;
        let cy = sh.unit_f64(1) * side as f64;
        let rx = (0.08 + 0.25 * sh.unit_f64(2)) * side as f64;
        let ry = (0.08 + 0.25 * sh.unit_f64(3)) * side as f64;
        let color = [sh.unit_f64(4), sh.unit_f64(5), sh.unit_f64(6)];
        let rectangular = sh.bounded(7, 2) == 0;
        let softness = 1.5 + 3.0 * sh.unit_f64(8);
        for y in 0..side {
            for x in 0..side {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let dist = if rectangular {
                    dx.abs().max(dy.abs())
                } else {
                    (dx * dx + dy * dy).sqrt()
                };
                // smooth falloff crossing 0.5 coverage at dist = 1
                let alpha = 1.0 / (1.0 + (softness * (dist - 1.0) * 4.0).exp());
                if alpha > 1e-3 {
                    for c in 0..3 {
                        let v = img[(c, y, x)];
                        img[(c, y, x)] = v * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    // faint texture
    let tex = s.substream(99);
    let fx = 1.0 + tex.unit_f64(0) * 5.0;
    let fy = 1.0 + tex.unit_f64(1) * 5.0;
    let phase = tex.unit_f64(2) * std::f64::consts::TAU;
    let amp = 0.02 + 0.04 * tex.unit_f64(3);
    for y in 0..side {
        for x in 0..side {
            let t = amp
                * ((fx * x as f64 / side as f64 * std::f64::consts::TAU
                    + fy * y as f64 / side as f64 * std::f64::consts::TAU
                    + phase)
                    .sin());
            for c in 0..3 {
                img[(c, y, x)] += t;
            }
        }
    }

    ImagePlane::from_array(img).expect("finite synthetic image")
}

/// In-memory dataset of `count` images.
pub fn synth_dataset(seed: u64, count: usize, side: usize) -> Vec<ImagePlane> {
    let s = SeedStream::new(seed);
    (0..count).map(|i| synth_image(s.value(i as u64), side)).collect()
}

/// Writes `count` PNGs named `img_0000.png`.. into `dir`.
pub fn write_synth_dataset(dir: &Path, seed: u64, count: usize, side: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = SeedStream::new(seed);
    for i in 0..count {
        let img = synth_image(s.value(i as u64), side);
        crate::data_io::save_image(&dir.join(format!("img_{i:04}.png")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_deterministic_and_diverse() {
        let a = synth_image(5, 32);
        let b = synth_image(5, 32);
        assert_eq!(a, b);
        let c = synth_image(6, 32);
        let mean_abs = (a.data() - c.data()).iter().map(|v| v.abs()).sum::<f64>()
            / a.data().len() as f64;
        assert!(mean_abs > 0.05, "images too similar: {mean_abs}");
    }

    #[test]
    fn images_use_a_broad_value_range() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..10 {
            let img = synth_image(i, 32);
            lo = lo.min(img.data().iter().copied().fold(f64::INFINITY, f64::min));
            hi = hi.max(img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        assert!(lo < 0.15 && hi > 0.85, "range [{lo}, {hi}] too narrow");
    }
}
