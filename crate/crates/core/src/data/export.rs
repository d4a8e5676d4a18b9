use std::io::Write;
use std::path::Path;

use super::dataset::Dataset;
use crate::error::{Error, Modality, Result};

/// Writes every image as `id<I>_mod<A|B>_<k>.ppm` (modality A, RGB) or
/// `.pgm` (modality B, first channel), min-max scaled to 8 bits per image.
/// Returns the number of files written.
pub fn export_images(data: &Dataset, dir: &Path) -> Result<usize> {
    if data.channels() != 3 {
        return Err(Error::InvalidArgument("image export expects 3 channels".into()));
    }
    std::fs::create_dir_all(dir)?;
    let r = data.resolution();
    let plane = r * r;
    for i in 0..data.len() {
        let s = data.sample(i);
        let img = data.image(i);
        let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let q = |v: f64| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
        let (tag, ext) = match s.modality {
            Modality::Vis => ('A', "ppm"),
            Modality::Ir => ('B', "pgm"),
        };
        let path = dir.join(format!("id{}_mod{tag}_{}.{ext}", s.identity, s.shot));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match s.modality {
            Modality::Vis => {
                write!(f, "P6\n{r} {r}\n255\n")?;
                for p in 0..plane {
                    f.write_all(&[q(img[p]), q(img[plane + p]), q(img[2 * plane + p])])?;
                }
            }
            Modality::Ir => {
                write!(f, "P5\n{r} {r}\n255\n")?;
                f.write_all(&img[..plane].iter().map(|&v| q(v)).collect::<Vec<_>>())?;
            }
        }
        f.flush()?;
    }
    Ok(data.len())
}
