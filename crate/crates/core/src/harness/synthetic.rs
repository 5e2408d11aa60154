//! Seeded clustered data standing in for real images at desk scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bimodal::PairedDataset;
use crate::embed::Dataset;
use crate::error::{Error, Result};

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Cluster centers uniform on the sphere of radius `separation`; point `i`
/// belongs to cluster `i % clusters` and is its center plus standard normal
/// noise.
pub fn generate_synthetic(
    n: usize,
    d_in: usize,
    clusters: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if clusters == 0 || n < clusters || d_in == 0 {
        return Err(Error::InvalidSize(format!(
            "need d_in >= 1 and 1 <= clusters <= n, got n={n} d_in={d_in} clusters={clusters}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| {
            let z = gaussian(&mut rng, d_in);
            let r = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            z.iter().map(|x| separation * x / r).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % clusters).collect();
    let points = labels
        .iter()
        .map(|&c| {
            let noise = gaussian(&mut rng, d_in);
            centers[c].iter().zip(noise).map(|(m, z)| m + z).collect()
        })
        .collect();
    Dataset::new(points, Some(labels))
}

/// Image side from [`generate_synthetic`]; text side `t_i = M x_i + noise z_i`
/// with `M` a fixed Gaussian map scaled by `1/sqrt(d_in)`.
pub fn generate_paired(
    n: usize,
    d_in: usize,
    text_dim: usize,
    clusters: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<PairedDataset> {
    if text_dim == 0 {
        return Err(Error::InvalidSize("text_dim must be >= 1".into()));
    }
    let image = generate_synthetic(n, d_in, clusters, separation, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    let scale = 1.0 / (d_in as f64).sqrt();
    let map: Vec<Vec<f64>> = (0..text_dim)
        .map(|_| {
            gaussian(&mut rng, d_in)
                .into_iter()
                .map(|x| x * scale)
                .collect()
        })
        .collect();
    let text = image
        .points()
        .iter()
        .map(|x| {
            map.iter()
                .map(|row| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + noise * z
                })
                .collect()
        })
        .collect();
    PairedDataset::new(image, Dataset::new(text, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_labels() {
        let ds = generate_synthetic(100, 5, 4, 3.0, 1).unwrap();
        let mut hist = [0; 4];
        for &l in ds.labels().unwrap() {
            hist[l] += 1;
        }
        assert_eq!(hist, [25; 4]);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate_synthetic(20, 3, 2, 2.0, 9).unwrap(),
            generate_synthetic(20, 3, 2, 2.0, 9).unwrap()
        );
        assert_ne!(
            generate_synthetic(20, 3, 2, 2.0, 9).unwrap(),
            generate_synthetic(20, 3, 2, 2.0, 10).unwrap()
        );
        assert_eq!(
            generate_paired(10, 3, 2, 2, 1.0, 0.1, 4).unwrap(),
            generate_paired(10, 3, 2, 2, 1.0, 0.1, 4).unwrap()
        );
    }

    #[test]
    fn single_cluster_without_separation_is_standard_noise() {
        let ds = generate_synthetic(4000, 2, 1, 0.0, 3).unwrap();
        assert!(ds.labels().unwrap().iter().all(|&l| l == 0));
        let n = ds.len() as f64;
        for t in 0..2 {
            let mean = ds.points().iter().map(|p| p[t]).sum::<f64>() / n;
            let var = ds
                .points()
                .iter()
                .map(|p| (p[t] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            assert!(mean.abs() < 4.0 / n.sqrt(), "{mean}");
            assert!((var - 1.0).abs() < 0.1, "{var}");
        }
    }

    #[test]
    fn centers_sit_at_the_separation_radius() {
        // with many points per cluster the cluster mean approaches the center
        let ds = generate_synthetic(6000, 3, 2, 5.0, 8).unwrap();
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = ds.points().iter().skip(c).step_by(2).collect();
            let mean: Vec<f64> = (0..3)
                .map(|t| members.iter().map(|p| p[t]).sum::<f64>() / members.len() as f64)
                .collect();
            let r = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 5.0).abs() < 0.1, "{r}");
        }
    }

    #[test]
    fn invalid_sizes() {
        assert!(generate_synthetic(3, 2, 4, 1.0, 0).is_err());
        assert!(generate_synthetic(3, 2, 0, 1.0, 0).is_err());
        assert!(generate_paired(4, 2, 0, 1, 1.0, 0.1, 0).is_err());
    }
}
