use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Modality, Result};
use crate::tensor::Tensor;

/// Label of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub identity: u32,
    pub modality: Modality,
    /// Capture index within the identity; equal shots of A and B share jitter.
    pub shot: u32,
}

/// Images stored contiguously as `[n, channels, resolution, resolution]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    resolution: usize,
    images: Vec<f64>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(channels: usize, resolution: usize, images: Vec<f64>, samples: Vec<Sample>) -> Result<Self> {
        if channels == 0 || resolution == 0 || images.len() != samples.len() * channels * resolution * resolution {
            return Err(Error::Shape(format!(
                "{} values do not hold {} images of {channels}x{resolution}x{resolution}",
                images.len(),
                samples.len()
            )));
        }
        Ok(Self {
            channels,
            resolution,
            images,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn sample(&self, i: usize) -> Sample {
        self.samples[i]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Sample indices of one identity in one modality, in storage order.
    pub fn indices_of(&self, identity: u32, modality: Modality) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].identity == identity && self.samples[i].modality == modality)
            .collect()
    }

    /// Per identity, the `(vis, ir)` sample indices.
    pub fn index(&self) -> BTreeMap<u32, (Vec<usize>, Vec<usize>)> {
        let mut map: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            let e = map.entry(s.identity).or_default();
            match s.modality {
                Modality::Vis => e.0.push(i),
                Modality::Ir => e.1.push(i),
            }
        }
        map
    }

    /// Samples whose identity is in `ids`, in storage order.
    pub fn subset(&self, ids: &[u32]) -> Dataset {
        let keep: BTreeSet<u32> = ids.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.samples[i].identity)).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            channels: self.channels,
            resolution: self.resolution,
            images,
            samples: idx.iter().map(|&i| self.samples[i]).collect(),
        }
    }

    /// Stacks images into `[idx.len(), C, R, R]`, mirroring horizontally the
    /// ones whose `flip` entry is set (`flip` may be empty).
    pub fn batch(&self, idx: &[usize], flip: &[bool]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let r = self.resolution;
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for (b, &i) in idx.iter().enumerate() {
            let img = self.image(i);
            if flip.get(b).copied().unwrap_or(false) {
                for row in img.chunks_exact(r) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        Tensor::new(vec![idx.len(), self.channels, r, r], data)
    }
}
