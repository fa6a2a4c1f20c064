//! Seeded synthetic datasets: desk-scale surrogates with known class
//! structure for growing and pruning experiments, plus a Gaussian-mixture
//! task whose population discriminants have closed form.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn split_three(images: Vec<f64>, shape: Vec<usize>, labels: Vec<usize>) -> Result<Dataset> {
    let n = labels.len();
    let n_val = n * 15 / 100;
    let n_test = n * 15 / 100;
    let n_train = n - n_val - n_test;
    let sample: usize = shape[1..].iter().product();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;

    let mk = |range: std::ops::Range<usize>| -> Result<Split> {
        let mut data = Vec::with_capacity(range.len() * sample);
        let mut ls = Vec::with_capacity(range.len());
        for i in range {
            data.extend_from_slice(&images[i * sample..(i + 1) * sample]);
            ls.push(labels[i]);
        }
        let mut s = shape.clone();
        s[0] = ls.len();
        Ok(Split { images: Tensor::from_vec(s, data)?, labels: ls })
    };
    let ds = Dataset {
        train: mk(0..n_train)?,
        val: mk(n_train..n_train + n_val)?,
        test: mk(n_train + n_val..n)?,
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Isotropic Gaussian blobs: class `c` has mean `radius·e_{c mod dim}` and
/// unit variance. For two classes in two dimensions the top generalized
/// eigenvalue of the population pencil is |μ₁−μ₀|²/(4σ²).
pub fn gaussian_blobs(classes: usize, dim: usize, n: usize, radius: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("empty dataset requested".into()));
    }
    if classes == 0 || dim == 0 {
        return Err(Error::Contract("blobs need at least one class and one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let mean = if j == c % dim { radius } else { 0.0 };
            images.push(mean + gauss(&mut rng));
        }
        labels.push(c);
    }
    split_three(images, vec![n, 1, 1, dim], labels)
}

/// Images where channel 0 carries a class-dependent intensity pattern and
/// channel 1 is pure noise — the decoy channel carries no class signal at
/// all.
pub fn planted_channel_images(classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("empty dataset requested".into()));
    }
    let (h, w) = (6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 2 * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        // channel 0: class-scaled block pattern plus mild noise
        let scale = (c + 1) as f64 / classes as f64;
        for y in 0..h {
            for x in 0..w {
                let block = if (y / 2 + x / 2) % classes == c { 1.0 } else { 0.1 };
                images.push((scale * block + 0.05 * gauss(&mut rng)).clamp(0.0, 1.0));
            }
        }
        // channel 1: noise
        for _ in 0..h * w {
            images.push(rng.random_range(0.0..1.0));
        }
        labels.push(c);
    }
    split_three(images, vec![n, 2, h, w], labels)
}

/// Striped textures: the class sets the stripe orientation/frequency.
/// `flip` applies a random horizontal flip (the one augmentation used on
/// texture tasks).
pub fn striped_textures(classes: usize, n: usize, seed: u64, flip: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("empty dataset requested".into()));
    }
    let side = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = 0.9 + 0.25 * (c / 3) as f64;
        let flipped = flip && rng.random_range(0.0..1.0) < 0.5;
        for y in 0..side {
            for x in 0..side {
                let xx = if flipped { side - 1 - x } else { x } as f64;
                let yy = y as f64;
                let t = match c % 3 {
                    0 => yy,          // horizontal stripes
                    1 => xx,          // vertical stripes
                    _ => xx + yy,     // diagonal stripes
                };
                let v = 0.5 + 0.5 * (freq * t + phase).sin();
                images.push((v + 0.05 * gauss(&mut rng)).clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    split_three(images, vec![n, 1, side, side], labels)
}

/// Dispatch by task id: `gaussian-blobs`, `planted-channel-images`,
/// `striped-textures`.
pub fn synthetic(task_id: &str, n: usize, seed: u64) -> Result<Dataset> {
    match task_id {
        "gaussian-blobs" => gaussian_blobs(3, 8, n, 2.0, seed),
        "planted-channel-images" => planted_channel_images(3, n, seed),
        "striped-textures" => striped_textures(3, n, seed, true),
        other => Err(Error::Contract(format!("unknown synthetic task '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn unknown_task_and_empty_request_are_contract_errors() {
        assert!(synthetic("nonsense", 10, 0).is_err());
        assert!(synthetic("gaussian-blobs", 0, 0).is_err());
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let a = synthetic("striped-textures", 60, 5).unwrap();
        let b = synthetic("striped-textures", 60, 5).unwrap();
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.test.labels, b.test.labels);
    }

    #[test]
    fn blob_sample_eigenvalue_converges_to_population_value() {
        // 2 classes in 2 dims: means r·e0 and r·e1, unit variance.
        // Δ = r·(e1−e0), population top eigenvalue = |Δ|²/4 = r²/2.
        let r = 2.0;
        let ds = gaussian_blobs(2, 2, 10_000, r, 7).unwrap();
        // pool all splits back together for the estimate
        let mut all = ds.train.images.data().to_vec();
        all.extend_from_slice(ds.val.images.data());
        all.extend_from_slice(ds.test.images.data());
        let mut labels = ds.train.labels.clone();
        labels.extend_from_slice(&ds.val.labels);
        labels.extend_from_slice(&ds.test.labels);
        let n = labels.len();
        let x = Tensor::from_vec([n, 2], all).unwrap();
        let s = stats::scatter(&x, &labels).unwrap();
        let shrunk = stats::shrink(&s.sigma_w, 1e-9).unwrap();
        let spec = stats::generalized_eig(&s.sigma_b, &shrunk).unwrap();
        let want = r * r / 2.0;
        let got = spec.eigenvalues[0];
        assert!(
            (got - want).abs() / want < 0.05,
            "sample eigenvalue {got} vs population {want}"
        );
    }

    #[test]
    fn planted_channel_noise_channel_carries_no_signal() {
        let ds = planted_channel_images(3, 600, 3).unwrap();
        // class-conditional means of channel 1 are all ≈ 0.5
        let (h, w) = (6, 6);
        let sample = 2 * h * w;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (i, &l) in ds.train.labels.iter().enumerate() {
                if l == c {
                    for p in 0..h * w {
                        sum += ds.train.images.data()[i * sample + h * w + p];
                    }
                    count += h * w;
                }
            }
            let mean = sum / count as f64;
            assert!((mean - 0.5).abs() < 0.05, "noise channel mean {mean} for class {c}");
        }
    }
}
