//! Labelled image sets: JSON storage, a seeded synthetic generator and
//! pair-flip label noise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::network::{FeatureMap, Shape3};
use crate::numkit::NormalStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub label: usize,
    /// Pixel-major, `height·width·channels` values.
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<FeatureMap> {
        FeatureMap::from_vec(self.shape(), self.samples[i].pixels.clone())
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.shape().len();
        if self.class_count < 2 {
            return Err(Error::Domain("dataset needs at least two classes".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.pixels.len() != len {
                return Err(Error::Shape {
                    expected: format!("{len} values ({})", self.shape()),
                    actual: format!("{} values in sample {i}", s.pixels.len()),
                });
            }
            if s.label >= self.class_count {
                return Err(Error::Domain(format!(
                    "sample {i} has label {} but only {} classes",
                    s.label, self.class_count
                )));
            }
            if !s.pixels.iter().all(|p| p.is_finite()) {
                return Err(Error::Domain(format!("sample {i} has a non-finite pixel")));
            }
        }
        Ok(())
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    /// `(first k, rest)`.
    pub fn split(&self, k: usize) -> (Dataset, Dataset) {
        let k = k.min(self.len());
        let head = Dataset {
            samples: self.samples[..k].to_vec(),
            ..self.clone()
        };
        let tail = Dataset {
            samples: self.samples[k..].to_vec(),
            ..self.clone()
        };
        (head, tail)
    }
}

pub fn load_json(bytes: &[u8]) -> Result<Dataset> {
    let d: Dataset = serde_json::from_slice(bytes).map_err(FormatError::from)?;
    d.validate()?;
    Ok(d)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    load_json(&std::fs::read(path)?)
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = serde_json::to_vec(data).map_err(FormatError::from)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub samples_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Bar brightness.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            samples_per_class: 50,
            noise: 0.5,
            contrast: 1.0,
            seed: 0,
        }
    }
}

pub const TOY_SIDE: usize = 8;
pub const TOY_CLASSES: usize = 4;
pub const TOY_TRAIN_SEED: u64 = 1;
pub const TOY_TEST_SEED: u64 = 2;
/// Noise level and correlation bound the bundled checkpoint was trained with.
pub const TOY_SIGMA: f64 = 0.25;
pub const TOY_RMAX: f64 = 0.2;

/// The bundled 200-sample training split.
pub fn toy_train() -> Dataset {
    toy_dataset(&ToyConfig {
        seed: TOY_TRAIN_SEED,
        ..ToyConfig::default()
    })
}

/// The bundled 100-sample test split.
pub fn toy_test() -> Dataset {
    toy_dataset(&ToyConfig {
        samples_per_class: 25,
        seed: TOY_TEST_SEED,
        ..ToyConfig::default()
    })
}

/// 8×8 single-channel images in four classes: a horizontal bar, a vertical
/// bar, the main diagonal and the anti-diagonal, each at a random offset,
/// plus Gaussian pixel noise. Samples are interleaved by class.
pub fn toy_dataset(cfg: &ToyConfig) -> Dataset {
    let n = TOY_SIDE;
    let mut rng = NormalStream::new(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.samples_per_class * TOY_CLASSES);
    for _ in 0..cfg.samples_per_class {
        for label in 0..TOY_CLASSES {
            let off = rng.next_index(n - 1);
            let shift = rng.next_index(5) as isize - 2;
            let mut pixels = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    let on = match label {
                        0 => y == off || y == off + 1,
                        1 => x == off || x == off + 1,
                        2 => x as isize - y as isize == shift,
                        _ => x as isize + y as isize - (n as isize - 1) == shift,
                    };
                    let v = if on { cfg.contrast } else { 0.0 };
                    pixels[y * n + x] = v + cfg.noise * rng.next_normal();
                }
            }
            samples.push(LabeledSample { label, pixels });
        }
    }
    Dataset {
        height: n,
        width: n,
        channels: 1,
        class_count: TOY_CLASSES,
        samples,
    }
}

/// Two classes split by the sign of `⟨w, x⟩` with a guaranteed margin.
pub fn separable_two_class(shape: Shape3, count: usize, margin: f64, seed: u64) -> Dataset {
    let mut rng = NormalStream::new(seed);
    let len = shape.len();
    let w: Vec<f64> = (0..len).map(|_| rng.next_normal()).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let samples = (0..count)
        .map(|i| {
            let label = i % 2;
            let mut x: Vec<f64> = (0..len).map(|_| 0.5 * rng.next_normal()).collect();
            let proj = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / norm;
            let sign = if label == 0 { 1.0 } else { -1.0 };
            let target = sign * (margin + 0.25 * rng.next_normal().abs());
            for (xi, wi) in x.iter_mut().zip(&w) {
                *xi += (target - proj) * wi / norm;
            }
            LabeledSample { label, pixels: x }
        })
        .collect();
    Dataset {
        height: shape.height,
        width: shape.width,
        channels: shape.channels,
        class_count: 2,
        samples,
    }
}

/// Flips each label `i` to `(i + 1) mod C` independently with probability
/// `p`. Returns the noisy copy and the number of flipped labels.
pub fn pair_flip(data: &Dataset, p: f64, seed: u64) -> Result<(Dataset, usize)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("noise rate must lie in [0, 1], got {p}")));
    }
    let mut rng = NormalStream::new(seed);
    let mut out = data.clone();
    let mut flipped = 0;
    for s in &mut out.samples {
        if rng.next_uniform() < p {
            s.label = (s.label + 1) % data.class_count;
            flipped += 1;
        }
    }
    Ok((out, flipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_deterministic_and_valid() {
        let a = toy_dataset(&ToyConfig::default());
        let b = toy_dataset(&ToyConfig::default());
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.len(), 200);
        let counts = (0..4).map(|c| a.samples.iter().filter(|s| s.label == c).count()).collect::<Vec<_>>();
        assert_eq!(counts, vec![50; 4]);
    }

    #[test]
    fn json_round_trip() {
        let d = toy_dataset(&ToyConfig {
            samples_per_class: 3,
            ..ToyConfig::default()
        });
        let bytes = serde_json::to_vec(&d).unwrap();
        assert_eq!(load_json(&bytes).unwrap(), d);
    }

    #[test]
    fn rejects_bad_label() {
        let mut d = toy_dataset(&ToyConfig {
            samples_per_class: 1,
            ..ToyConfig::default()
        });
        d.samples[0].label = 9;
        assert!(d.validate().is_err());
    }

    #[test]
    fn flip_rate() {
        let d = toy_dataset(&ToyConfig {
            samples_per_class: 2500,
            ..ToyConfig::default()
        });
        let (noisy, flipped) = pair_flip(&d, 0.45, 1).unwrap();
        let frac = flipped as f64 / d.len() as f64;
        assert!((frac - 0.45).abs() < 0.01, "{frac}");
        for (a, b) in d.samples.iter().zip(&noisy.samples) {
            assert!(b.label == a.label || b.label == (a.label + 1) % 4);
        }
        let (same, none) = pair_flip(&d, 0.0, 1).unwrap();
        assert_eq!((same, none), (d, 0));
    }

    #[test]
    fn separable_has_margin() {
        let d = separable_two_class(Shape3::new(2, 2, 1), 40, 1.0, 3);
        d.validate().unwrap();
        assert_eq!(d.samples.iter().filter(|s| s.label == 1).count(), 20);
    }
}
