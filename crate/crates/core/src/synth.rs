//! Synthetic data: Gaussian feature blobs with a shifted OOD copy, and
//! embeddings on the unit sphere with a controlled prototype margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, Role};
use crate::error::{Result, VoltaError};
use crate::linalg::{dot, l2_normalize, norm, Mat64};
use crate::model::mix_seed;

const PLACEMENT_ATTEMPTS: usize = 100_000;
/// Rejection-sampling budget per emitted point.
pub const MAX_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// OOD samples drawn around each shifted mean.
    pub ood_per_class: usize,
    /// Minimum distance between any two means, in absolute units.
    pub separation: f64,
    pub std: f64,
    pub seed: u64,
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `count` orthonormal vectors by Gram–Schmidt on Gaussian draws.
pub fn random_orthonormal(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(VoltaError::invalid(format!(
            "{count} orthonormal vectors do not fit in {dim} dimensions"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(dim, rng);
        // two passes keep the result orthogonal to rounding level
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        if norm(&v) > 1e-6 {
            basis.push(l2_normalize(&v)?);
        }
    }
    Ok(basis)
}

fn place_means(spec: &BlobSpec, rng: &mut impl Rng) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let k = spec.classes;
    let scale = spec.separation / std::f64::consts::SQRT_2;
    if 2 * k <= spec.dim {
        let dirs = random_orthonormal(2 * k, spec.dim, rng)?;
        let scaled: Vec<Vec<f64>> = dirs
            .into_iter()
            .map(|d| d.into_iter().map(|x| x * scale).collect())
            .collect();
        let (id, ood) = scaled.split_at(k);
        return Ok((id.to_vec(), ood.to_vec()));
    }
    let half = spec.separation * k as f64;
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(2 * k);
    while placed.len() < 2 * k {
        let mut found = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-half..half)).collect();
            let far = placed.iter().all(|p| {
                let d2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 >= spec.separation * spec.separation
            });
            if far {
                placed.push(c);
                found = true;
                break;
            }
        }
        if !found {
            return Err(VoltaError::invalid(format!(
                "cannot place {} means {} apart in {} dimensions",
                2 * k,
                spec.separation,
                spec.dim
            )));
        }
    }
    let ood = placed.split_off(k);
    Ok((placed, ood))
}

/// In-distribution blobs and an OOD set around `K` further means, each at
/// least `separation` from every ID mean. Rows are grouped by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    if spec.classes == 0 || spec.dim == 0 || spec.per_class == 0 || spec.ood_per_class == 0 {
        return Err(VoltaError::Config("blob counts and dimension must be positive".into()));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite() && spec.std > 0.0 && spec.std.is_finite()) {
        return Err(VoltaError::Config("blob separation and std must be positive".into()));
    }
    let mut mean_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0));
    let (id_means, ood_means) = place_means(spec, &mut mean_rng)?;

    let sample = |means: &[Vec<f64>], count: usize, stream: u64, role: Role| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, stream));
        let mut data = Vec::with_capacity(means.len() * count * spec.dim);
        let mut labels = Vec::with_capacity(means.len() * count);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..count {
                data.extend(mean.iter().map(|m| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    m + spec.std * g
                }));
                labels.push(c);
            }
        }
        let features = Mat64::from_vec(labels.len(), spec.dim, data)?;
        FeatureDataset::new(features, labels, spec.classes, role)
    };
    Ok((
        sample(&id_means, spec.per_class, 1, Role::Train)?,
        sample(&ood_means, spec.ood_per_class, 2, Role::Ood)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationSpec {
    pub dim: usize,
    pub classes: usize,
    /// OOD points satisfy `max_k zᵀp_k ≤ 1 − margin`.
    pub margin: f64,
    /// ID points satisfy `zᵀp_y ≥ 1 − concentration` outside the tail.
    pub concentration: f64,
    /// Probability that an ID point is drawn from the unconstrained tail.
    pub tail_mass: f64,
    pub id_count: usize,
    pub ood_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedEmbeddings {
    /// Orthonormal rows.
    pub prototypes: Mat64,
    pub id: Mat64,
    pub id_labels: Vec<usize>,
    pub ood: Mat64,
}

/// Sphere embeddings around orthonormal prototypes with an enforced margin
/// to the OOD set. The ID sample depends only on `seed`, dimension, class
/// count, concentration, tail mass and count, so sweeping `margin` keeps it
/// fixed.
pub fn make_separated_embeddings(spec: &SeparationSpec) -> Result<SeparatedEmbeddings> {
    let (d, k) = (spec.dim, spec.classes);
    if k == 0 || d < 2 || k > d {
        return Err(VoltaError::Config(format!(
            "need 1 ≤ classes ≤ dim and dim ≥ 2, got {k} classes in {d} dimensions"
        )));
    }
    if !(0.0 < spec.concentration && spec.concentration < spec.margin && spec.margin < 1.0) {
        return Err(VoltaError::Config(
            "need 0 < concentration < margin < 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.tail_mass) {
        return Err(VoltaError::Config("tail mass must lie in [0, 1]".into()));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 10));
    let protos = random_orthonormal(k, d, &mut proto_rng)?;

    let target = 1.0 - spec.concentration / 2.0;
    let sigma = ((target.powi(-2) - 1.0) / (d - 1) as f64).sqrt();
    let mut id_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 11));
    let mut id = Vec::with_capacity(spec.id_count * d);
    let mut id_labels = Vec::with_capacity(spec.id_count);
    for i in 0..spec.id_count {
        let y = i % k;
        let p = &protos[y];
        let tail = spec.tail_mass > 0.0 && id_rng.random::<f64>() < spec.tail_mass;
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let g = gaussian_vec(d, &mut id_rng);
            let s = if tail { 3.0 * sigma } else { sigma };
            let v: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a + s * b).collect();
            let Ok(z) = l2_normalize(&v) else { continue };
            if tail || dot(&z, p) >= 1.0 - spec.concentration {
                accepted = Some(z);
                break;
            }
        }
        let z = accepted.ok_or_else(|| {
            VoltaError::Degenerate(format!("ID point {i} not accepted within {MAX_ATTEMPTS} attempts"))
        })?;
        id.extend(z);
        id_labels.push(y);
    }

    let mut ood_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 12));
    let mut ood = Vec::with_capacity(spec.ood_count * d);
    for i in 0..spec.ood_count {
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let Ok(z) = l2_normalize(&gaussian_vec(d, &mut ood_rng)) else { continue };
            let top = protos.iter().map(|p| dot(&z, p)).fold(f64::NEG_INFINITY, f64::max);
            if top <= 1.0 - spec.margin {
                accepted = Some(z);
                break;
            }
        }
        let z = accepted.ok_or_else(|| {
            VoltaError::Degenerate(format!("OOD point {i} not accepted within {MAX_ATTEMPTS} attempts"))
        })?;
        ood.extend(z);
    }

    Ok(SeparatedEmbeddings {
        prototypes: Mat64::from_rows(&protos)?,
        id: Mat64::from_vec(spec.id_count, d, id)?,
        id_labels,
        ood: Mat64::from_vec(spec.ood_count, d, ood)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec(sep: f64) -> BlobSpec {
        BlobSpec {
            classes: 5,
            dim: 16,
            per_class: 100,
            ood_per_class: 20,
            separation: sep,
            std: 1.0,
            seed: 9,
        }
    }

    fn nearest_mean_accuracy(ds: &FeatureDataset) -> f64 {
        let k = ds.classes();
        let d = ds.dim();
        let mut means = vec![vec![0.0; d]; k];
        let counts = ds.class_counts();
        for (row, &y) in ds.features().row_iter().zip(ds.labels()) {
            for (m, x) in means[y].iter_mut().zip(row) {
                *m += x / counts[y] as f64;
            }
        }
        let hits = ds
            .features()
            .row_iter()
            .zip(ds.labels())
            .filter(|(row, &y)| {
                let dist = |m: &Vec<f64>| m.iter().zip(*row).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (0..k).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))) == Some(y)
            })
            .count();
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn well_separated_blobs_are_nearest_mean_separable() {
        let (id, ood) = make_blobs(&blob_spec(10.0)).unwrap();
        assert_eq!((id.len(), ood.len()), (500, 100));
        assert!(nearest_mean_accuracy(&id) >= 0.999);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = make_blobs(&blob_spec(6.0)).unwrap();
        let b = make_blobs(&blob_spec(6.0)).unwrap();
        assert_eq!(a.0.to_binary().unwrap(), b.0.to_binary().unwrap());
        assert_eq!(a.1.to_binary().unwrap(), b.1.to_binary().unwrap());
    }

    #[test]
    fn random_placement_respects_separation() {
        let spec = BlobSpec { classes: 3, dim: 2, ..blob_spec(4.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (id, ood) = place_means(&spec, &mut rng).unwrap();
        for a in &id {
            for b in id.iter().chain(&ood) {
                if a != b {
                    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    assert!(d >= 4.0 - 1e-12);
                }
            }
        }
        let infeasible = BlobSpec { classes: 400, dim: 1, ..blob_spec(4.0) };
        assert!(make_blobs(&infeasible).is_err());
    }

    #[test]
    fn single_class_blob() {
        let (id, ood) = make_blobs(&BlobSpec { classes: 1, ..blob_spec(8.0) }).unwrap();
        assert_eq!(id.classes(), 1);
        assert!(ood.labels().iter().all(|&y| y == 0));
    }

    #[test]
    fn separated_embeddings_meet_constraints() {
        let spec = SeparationSpec {
            dim: 16,
            classes: 8,
            margin: 0.9,
            concentration: 0.05,
            tail_mass: 0.0,
            id_count: 200,
            ood_count: 200,
            seed: 3,
        };
        let e = make_separated_embeddings(&spec).unwrap();
        for (z, &y) in e.id.row_iter().zip(&e.id_labels) {
            assert!((norm(z) - 1.0).abs() < 1e-12);
            assert!(dot(z, e.prototypes.row(y)) >= 0.95);
        }
        for z in e.ood.row_iter() {
            let top = e.prototypes.row_iter().map(|p| dot(z, p)).fold(f64::MIN, f64::max);
            assert!(top <= 0.1);
        }
        let other = make_separated_embeddings(&SeparationSpec { margin: 0.3, ..spec.clone() }).unwrap();
        assert_eq!(other.id, e.id);
        assert!(make_separated_embeddings(&SeparationSpec { concentration: 0.95, ..spec }).is_err());
    }
}
