//! Oracles for the synthetic identities and the retrieval metrics.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hfwave::harness::data::noise_patch;
use hfwave::harness::{generate_dataset, retrieval_metrics, DatasetSpec, SyntheticIdentitySpec};
use hfwave::numerics::Tensor;
use hfwave::wavelet;

/// Strongest DFT bin `(fy, fx)` in cycles per pixel, ignoring the low band
/// where illumination ramps live.
fn spectral_peak(patch: &Tensor, min_freq: f64) -> (f64, f64) {
    let n = patch.dims()[0];
    let x = patch.data();
    let mut best = (0.0, (0.0, 0.0));
    let half = n as isize / 2;
    for ky in -half + 1..=half {
        for kx in 0..=half {
            let (fy, fx) = (ky as f64 / n as f64, kx as f64 / n as f64);
            if (fy * fy + fx * fx).sqrt() < min_freq {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for xx in 0..n {
                    let a = -2.0 * PI * (fy * y as f64 + fx * xx as f64);
                    re += x[y * n + xx] * a.cos();
                    im += x[y * n + xx] * a.sin();
                }
            }
            let p = re * re + im * im;
            if p > best.0 {
                best = (p, (fy, fx));
            }
        }
    }
    best.1
}

/// Distance from a frequency to the nearest wave of the signature, with `f`
/// and `-f` identified.
fn distance_to_signature(f: (f64, f64), id: &SyntheticIdentitySpec) -> f64 {
    id.waves
        .iter()
        .map(|w| {
            let (wy, wx) = w.components();
            let plus = ((f.0 - wy).powi(2) + (f.1 - wx).powi(2)).sqrt();
            let minus = ((f.0 + wy).powi(2) + (f.1 + wx).powi(2)).sqrt();
            plus.min(minus)
        })
        .fold(f64::INFINITY, f64::min)
}

fn detail_energy(patch: &Tensor) -> f64 {
    let s = wavelet::forward(patch).unwrap();
    s.lh.sum_sq() + s.hl.sum_sq() + s.hh.sum_sq()
}

#[test]
fn samples_of_one_identity_share_signature_peaks() {
    for seed in 0..3 {
        let data = generate_dataset(&DatasetSpec {
            seed,
            ..DatasetSpec::default()
        })
        .unwrap();
        let n = data.spec.patch_size as f64;
        // One bin diagonally, plus rounding of off-grid frequencies.
        let tolerance = 2f64.sqrt() / n;
        for (id, samples) in data.identities.iter().zip(&data.train) {
            let (a, b) = (&samples[0], &samples[1]);
            assert_ne!(a.nuisance, b.nuisance);
            for s in [a, b] {
                let peak = spectral_peak(&s.patch, 0.2);
                let d = distance_to_signature(peak, id);
                assert!(
                    d <= tolerance,
                    "seed {seed} id {}: peak {peak:?} is {d:.3} from the signature",
                    id.identity
                );
            }
        }
    }
}

#[test]
fn signature_energy_sits_in_detail_subbands() {
    let data = generate_dataset(&DatasetSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let size = data.spec.patch_size;
    let background: f64 = (0..32)
        .map(|_| detail_energy(&noise_patch(size, data.spec.noise_sigma, &mut rng).unwrap()))
        .sum::<f64>()
        / 32.0;
    for s in data.labeled() {
        let d = detail_energy(&s.patch);
        assert!(
            d > 1.5 * background,
            "detail energy {d:.1} vs background {background:.1}"
        );
    }
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let (ids, per_id, dim, trials) = (8usize, 3usize, 16usize, 60usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| -> f64 { StandardNormal.sample(&mut rng) })
                    .collect()
            })
            .collect()
    };
    let labels: Vec<usize> = (0..ids * per_id).map(|i| i / per_id).collect();
    let mut hits = 0.0;
    for _ in 0..trials {
        let gallery = draw(labels.len());
        let queries = draw(labels.len());
        hits += retrieval_metrics(&gallery, &labels, &queries, &labels)
            .unwrap()
            .top1;
    }
    let n = (trials * labels.len()) as f64;
    let top1 = hits / trials as f64;
    let p = 1.0 / ids as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!(
        (top1 - p).abs() <= 4.0 * sigma,
        "top-1 {top1:.3}, chance {p:.3} +- {sigma:.3}"
    );
}
