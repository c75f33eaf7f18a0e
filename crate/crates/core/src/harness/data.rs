//! Synthetic identity patches whose identity lives in high-frequency texture.
//!
//! Each identity owns 2 to 4 plane waves with frequencies in the upper half
//! of the representable band (0.25 to 0.5 cycles per pixel). A sample draws
//! a random crop offset (a phase shift of every wave), a low-frequency
//! illumination ramp, and white noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Lower edge of the signature band in cycles per pixel.
pub const SIGNATURE_BAND_LOW: f64 = 0.25;
/// Nyquist frequency in cycles per pixel.
pub const SIGNATURE_BAND_HIGH: f64 = 0.5;
/// Largest crop offset in pixels along each axis.
pub const MAX_OFFSET: f64 = 4.0;
/// Labeled identities are redrawn until their signatures are at least this
/// far apart (cycles per pixel).
pub const MIN_SIGNATURE_DISTANCE: f64 = 0.06;
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wave {
    /// Cycles per pixel.
    pub frequency: f64,
    /// Radians.
    pub orientation: f64,
    pub phase: f64,
    pub amplitude: f64,
}

impl Wave {
    /// Frequency components `(fy, fx)` in cycles per pixel.
    pub fn components(&self) -> (f64, f64) {
        (
            self.frequency * self.orientation.sin(),
            self.frequency * self.orientation.cos(),
        )
    }
}

/// Texture signature of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentitySpec {
    pub identity: usize,
    pub waves: Vec<Wave>,
}

impl SyntheticIdentitySpec {
    pub fn random(identity: usize, rng: &mut impl Rng) -> Self {
        let n = rng.random_range(2..=4);
        let waves = (0..n)
            .map(|_| Wave {
                frequency: rng.random_range(SIGNATURE_BAND_LOW + 0.02..SIGNATURE_BAND_HIGH - 0.02),
                orientation: rng.random_range(0.0..PI),
                phase: rng.random_range(0.0..2.0 * PI),
                amplitude: rng.random_range(0.6..1.0),
            })
            .collect();
        SyntheticIdentitySpec { identity, waves }
    }

    /// Symmetric chamfer distance between the two sets of frequency vectors,
    /// treating `f` and `-f` as the same wave.
    pub fn distance(&self, other: &Self) -> f64 {
        fn one_way(a: &[Wave], b: &[Wave]) -> f64 {
            let total: f64 = a
                .iter()
                .map(|wa| {
                    let (ay, ax) = wa.components();
                    b.iter()
                        .map(|wb| {
                            let (by, bx) = wb.components();
                            let plus = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt();
                            let minus = ((ay + by).powi(2) + (ax + bx).powi(2)).sqrt();
                            plus.min(minus)
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            total / a.len() as f64
        }
        0.5 * (one_way(&self.waves, &other.waves) + one_way(&other.waves, &self.waves))
    }

    /// Renders a `(size, size, 1)` patch with the given nuisances.
    pub fn render(&self, size: usize, nuisance: &Nuisance, rng: &mut impl Rng) -> Result<Tensor> {
        let noise = Normal::new(0.0, nuisance.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
        let (oy, ox) = nuisance.offset;
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (yy, xx) = (y as f64 + oy, x as f64 + ox);
                let texture: f64 = self
                    .waves
                    .iter()
                    .map(|w| {
                        let (fy, fx) = w.components();
                        w.amplitude * (2.0 * PI * (fy * yy + fx * xx) + w.phase).cos()
                    })
                    .sum();
                data.push(texture + nuisance.illumination(y, x, size) + noise.sample(rng));
            }
        }
        Tensor::new(vec![size, size, 1], data)
    }
}

/// Per-sample nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    /// Crop offset `(dy, dx)` in pixels.
    pub offset: (f64, f64),
    /// Illumination `bias + gy * y/size + gx * x/size`.
    pub bias: f64,
    pub gradient: (f64, f64),
    pub noise_sigma: f64,
}

impl Nuisance {
    pub fn random(noise_sigma: f64, rng: &mut impl Rng) -> Self {
        Nuisance {
            offset: (
                rng.random_range(0..MAX_OFFSET as usize) as f64,
                rng.random_range(0..MAX_OFFSET as usize) as f64,
            ),
            bias: rng.random_range(-0.5..0.5),
            gradient: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            noise_sigma,
        }
    }

    fn illumination(&self, y: usize, x: usize, size: usize) -> f64 {
        let s = size as f64;
        self.bias + self.gradient.0 * y as f64 / s + self.gradient.1 * x as f64 / s
    }

    /// Box regression target: normalized crop offset, unit width and height
    /// (zero log-scale).
    pub fn box_target(&self) -> [f64; 4] {
        [
            self.offset.0 / MAX_OFFSET,
            self.offset.1 / MAX_OFFSET,
            0.0,
            0.0,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub patch: Tensor,
    /// `None` for unlabeled persons.
    pub identity: Option<usize>,
    pub nuisance: Nuisance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub patch_size: usize,
    pub gallery_per_id: usize,
    pub query_per_id: usize,
    /// Identities whose samples are used without labels during training.
    pub unlabeled_ids: usize,
    pub unlabeled_samples_per_id: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_ids: 8,
            samples_per_id: 16,
            patch_size: 16,
            gallery_per_id: 3,
            query_per_id: 3,
            unlabeled_ids: 8,
            unlabeled_samples_per_id: 4,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(2) {
            return Err(Error::OddDimension {
                dims: vec![self.patch_size, self.patch_size, 1],
            });
        }
        if self.n_ids < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 identities, got {}",
                self.n_ids
            )));
        }
        if self.gallery_per_id == 0 || self.query_per_id == 0 {
            return Err(Error::InvalidArgument(
                "gallery and query need a sample per identity".into(),
            ));
        }
        if self.gallery_per_id + self.query_per_id >= self.samples_per_id {
            return Err(Error::InvalidArgument(format!(
                "{} samples per identity leave none for training after {} gallery and {} query",
                self.samples_per_id, self.gallery_per_id, self.query_per_id
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn train_per_id(&self) -> usize {
        self.samples_per_id - self.gallery_per_id - self.query_per_id
    }
}

/// Disjoint train, gallery and query samples plus unlabeled training persons.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub identities: Vec<SyntheticIdentitySpec>,
    /// `train[id]` holds that identity's training samples.
    pub train: Vec<Vec<Sample>>,
    pub gallery: Vec<Sample>,
    pub query: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl Dataset {
    /// Every labeled sample: training, gallery and query.
    pub fn labeled_len(&self) -> usize {
        self.train.iter().map(Vec::len).sum::<usize>() + self.gallery.len() + self.query.len()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Sample> {
        self.train
            .iter()
            .flatten()
            .chain(&self.gallery)
            .chain(&self.query)
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut identities: Vec<SyntheticIdentitySpec> = Vec::with_capacity(spec.n_ids);
    for i in 0..spec.n_ids {
        let mut candidate = SyntheticIdentitySpec::random(i, &mut rng);
        let mut redraws = 0;
        while identities
            .iter()
            .any(|o| o.distance(&candidate) < MIN_SIGNATURE_DISTANCE)
        {
            redraws += 1;
            if redraws == MAX_REDRAWS {
                log::warn!(
                    "identity {i} kept within {MIN_SIGNATURE_DISTANCE} of another signature"
                );
                break;
            }
            candidate = SyntheticIdentitySpec::random(i, &mut rng);
        }
        identities.push(candidate);
    }
    let mut train = Vec::with_capacity(spec.n_ids);
    let mut gallery = Vec::new();
    let mut query = Vec::new();
    for id in &identities {
        let mut samples = (0..spec.samples_per_id)
            .map(|_| {
                let nuisance = Nuisance::random(spec.noise_sigma, &mut rng);
                Ok(Sample {
                    patch: id.render(spec.patch_size, &nuisance, &mut rng)?,
                    identity: Some(id.identity),
                    nuisance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        query.extend(samples.split_off(spec.samples_per_id - spec.query_per_id));
        gallery.extend(samples.split_off(samples.len() - spec.gallery_per_id));
        train.push(samples);
    }
    let mut unlabeled = Vec::new();
    for _ in 0..spec.unlabeled_ids {
        let id = SyntheticIdentitySpec::random(usize::MAX, &mut rng);
        for _ in 0..spec.unlabeled_samples_per_id {
            let nuisance = Nuisance::random(spec.noise_sigma, &mut rng);
            unlabeled.push(Sample {
                patch: id.render(spec.patch_size, &nuisance, &mut rng)?,
                identity: None,
                nuisance,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        identities,
        train,
        gallery,
        query,
        unlabeled,
    })
}

/// Background patch: illumination and noise, no texture.
pub fn noise_patch(size: usize, noise_sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let blank = SyntheticIdentitySpec {
        identity: usize::MAX,
        waves: Vec::new(),
    };
    let nuisance = Nuisance::random(noise_sigma.max(0.5), rng);
    blank.render(size, &nuisance, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_shapes() {
        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(ds.labeled_len(), 128);
        assert!(ds.labeled().all(|s| s.patch.dims() == [16, 16, 1]));
        assert_eq!(ds.gallery.len(), 24);
        assert_eq!(ds.query.len(), 24);
        assert!(ds.train.iter().all(|t| t.len() == 10));
        assert!(ds.unlabeled.iter().all(|s| s.identity.is_none()));
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = DatasetSpec::default();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert!(a
            .labeled()
            .zip(b.labeled())
            .all(|(x, y)| x.patch == y.patch));
        let c = generate_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
        assert!(a
            .labeled()
            .zip(c.labeled())
            .any(|(x, y)| x.patch != y.patch));
    }

    #[test]
    fn invalid_specs() {
        let odd = DatasetSpec {
            patch_size: 15,
            ..Default::default()
        };
        assert!(matches!(
            generate_dataset(&odd),
            Err(Error::OddDimension { .. })
        ));
        let one = DatasetSpec {
            n_ids: 1,
            ..Default::default()
        };
        assert!(generate_dataset(&one).is_err());
        let tight = DatasetSpec {
            samples_per_id: 6,
            ..Default::default()
        };
        assert!(generate_dataset(&tight).is_err());
    }

    #[test]
    fn signatures_are_separated() {
        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        for (i, a) in ds.identities.iter().enumerate() {
            assert_eq!(a.distance(a), 0.0);
            for b in &ds.identities[..i] {
                assert!(a.distance(b) >= MIN_SIGNATURE_DISTANCE);
            }
        }
    }

    #[test]
    fn signature_frequencies_in_upper_band() {
        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        for id in &ds.identities {
            assert!((2..=4).contains(&id.waves.len()));
            assert!(id
                .waves
                .iter()
                .all(|w| w.frequency > SIGNATURE_BAND_LOW && w.frequency < SIGNATURE_BAND_HIGH));
        }
    }
}
