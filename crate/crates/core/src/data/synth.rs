//! Synthetic two-modality identity images.
//!
//! Each identity gets a prototype scene of random rectangles and ellipses.
//! Image `k` of an identity applies one shared jitter (shift, gain, stripe
//! phase) and is then rendered through the modality-A and modality-B
//! transforms, so the pairs are aligned the way simultaneous dual-camera
//! captures are.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Modality, Result};

/// Low-level appearance transform of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTransform {
    /// Output channel `o` is `sum_c mix[o][c] * input[c]`. Identical rows
    /// collapse color to a single intensity.
    pub mix: [[f64; 3]; 3],
    /// Added to every pixel.
    pub offset: f64,
    /// Amplitude of horizontal sinusoidal stripes added to every channel.
    pub pattern_amplitude: f64,
    /// Stripe period in pixels.
    pub pattern_period: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl ModalityTransform {
    /// Visible-like default: mild color mixing and a brightness lift.
    pub fn visible() -> Self {
        Self {
            mix: [[0.9, 0.1, 0.0], [0.05, 0.9, 0.05], [0.0, 0.1, 0.9]],
            offset: 0.1,
            pattern_amplitude: 0.0,
            pattern_period: 6.0,
            noise: 0.02,
        }
    }

    /// Infrared-like default: color collapse, inverted-ish intensity gain,
    /// stripes and sensor noise.
    pub fn infrared() -> Self {
        let w = [0.5, 0.3, 0.2];
        Self {
            mix: [w, w, w],
            offset: 0.6,
            pattern_amplitude: 0.1,
            pattern_period: 6.0,
            noise: 0.08,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = self.mix.iter().flatten().all(|v| v.is_finite())
            && self.offset.is_finite()
            && self.pattern_amplitude.is_finite();
        if !finite || !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.pattern_period > 0.0) {
            return Err(Error::Config("modality transform needs finite values, noise >= 0, period > 0".into()));
        }
        Ok(())
    }
}

/// Generator settings; the dataset is a pure function of this value.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_modality: usize,
    pub resolution: usize,
    /// Shape primitives per identity prototype.
    pub shapes: usize,
    pub modality_a: ModalityTransform,
    pub modality_b: ModalityTransform,
    /// Maximum absolute pixel shift of the per-image jitter.
    pub jitter: usize,
    pub seed: u64,
    /// Identity namespace; distinct namespaces never share identity ids.
    pub namespace: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 96,
            images_per_modality: 10,
            resolution: 32,
            shapes: 6,
            modality_a: ModalityTransform::visible(),
            modality_b: ModalityTransform::infrared(),
            jitter: 2,
            seed: 0,
            namespace: 0,
        }
    }
}

impl fmt::Display for SynthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} identities x {} images/modality at {}px (namespace {})",
            self.identities, self.images_per_modality, self.resolution, self.namespace
        )
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.images_per_modality == 0 || self.resolution < 4 || self.shapes == 0 {
            return Err(Error::Config(
                "identities, images per modality and shapes must be positive; resolution >= 4".into(),
            ));
        }
        if self.identities >= 1 << 20 || self.namespace >= 1 << 11 {
            return Err(Error::Config("identity count or namespace out of range".into()));
        }
        self.modality_a.validate()?;
        self.modality_b.validate()
    }
}

/// splitmix64 finalizer over a sequence of words.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

struct Prototype {
    background: [f64; 3],
    shapes: Vec<(Shape, [f64; 3])>,
}

impl Prototype {
    fn random(rng: &mut ChaCha8Rng, count: usize) -> Self {
        let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let background = color(rng).map(|c| 0.2 + 0.3 * c);
        let shapes = (0..count)
            .map(|_| {
                let s = if rng.gen_bool(0.5) {
                    let (x0, y0) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
                    Shape::Rect {
                        x0,
                        y0,
                        x1: (x0 + rng.gen_range(0.15..0.5)).min(1.0),
                        y1: (y0 + rng.gen_range(0.15..0.5)).min(1.0),
                    }
                } else {
                    Shape::Ellipse {
                        cx: rng.gen_range(0.1..0.9),
                        cy: rng.gen_range(0.1..0.9),
                        rx: rng.gen_range(0.08..0.3),
                        ry: rng.gen_range(0.08..0.3),
                    }
                };
                (s, color(rng))
            })
            .collect();
        Self { background, shapes }
    }

    /// RGB at normalized coordinates; later shapes paint over earlier ones.
    fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.background;
        for (s, col) in &self.shapes {
            let inside = match *s {
                Shape::Rect { x0, y0, x1, y1 } => u >= x0 && u <= x1 && v >= y0 && v <= y1,
                Shape::Ellipse { cx, cy, rx, ry } => {
                    let (du, dv) = ((u - cx) / rx, (v - cy) / ry);
                    du * du + dv * dv <= 1.0
                }
            };
            if inside {
                c = *col;
            }
        }
        c
    }
}

struct Jitter {
    dx: i64,
    dy: i64,
    gain: f64,
    phase: f64,
}

fn render(
    proto: &Prototype,
    jit: &Jitter,
    t: &ModalityTransform,
    res: usize,
    noise_rng: &mut ChaCha8Rng,
    out: &mut [f64],
) {
    let plane = res * res;
    let noise = (t.noise > 0.0).then(|| Normal::new(0.0, t.noise).expect("noise std"));
    for y in 0..res {
        let stripe = t.pattern_amplitude
            * (2.0 * std::f64::consts::PI * y as f64 / t.pattern_period + jit.phase).sin();
        for x in 0..res {
            let sx = (x as i64 - jit.dx).clamp(0, res as i64 - 1) as f64;
            let sy = (y as i64 - jit.dy).clamp(0, res as i64 - 1) as f64;
            let rgb = proto.color_at((sx + 0.5) / res as f64, (sy + 0.5) / res as f64);
            for (o, row) in t.mix.iter().enumerate() {
                let mixed: f64 = row.iter().zip(&rgb).map(|(m, c)| m * c).sum();
                let mut v = jit.gain * mixed + t.offset + stripe;
                if let Some(n) = &noise {
                    v += n.sample(noise_rng);
                }
                out[o * plane + y * res + x] = v;
            }
        }
    }
}

/// Renders the dataset described by `cfg`.
///
/// Samples are ordered by identity, then image index, then modality
/// (A before B).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let res = cfg.resolution;
    let img_len = 3 * res * res;
    let n = cfg.identities * cfg.images_per_modality * 2;
    let mut images = vec![0.0; n * img_len];
    let mut samples = Vec::with_capacity(n);
    let j = cfg.jitter as i64;
    for id in 0..cfg.identities {
        let gid = (cfg.namespace << 20) | id as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, cfg.namespace as u64, id as u64]));
        let proto = Prototype::random(&mut rng, cfg.shapes);
        for k in 0..cfg.images_per_modality {
            let jit = Jitter {
                dx: rng.gen_range(-j..=j),
                dy: rng.gen_range(-j..=j),
                gain: rng.gen_range(0.85..1.15),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            };
            for (m, t) in [(Modality::Vis, &cfg.modality_a), (Modality::Ir, &cfg.modality_b)] {
                let idx = samples.len();
                render(&proto, &jit, t, res, &mut rng, &mut images[idx * img_len..(idx + 1) * img_len]);
                samples.push(Sample {
                    identity: gid,
                    modality: m,
                    shot: k as u32,
                });
            }
        }
    }
    Dataset::new(3, res, images, samples)
}
