//! Query-patch similarity heat-maps and PCA by power iteration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diversity::pairwise_cosine;
use crate::error::{Error, Result};
use crate::image::write_gray8;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub grid_side: usize,
    pub query_index: usize,
    /// Cosine of every token against the query, row-major.
    pub values: Vec<f64>,
}

pub fn heatmap<T: Scalar>(tokens: &Tensor<T>, grid_side: usize, query: usize) -> Result<HeatMap> {
    let (k, _) = tokens.dims2()?;
    if k != grid_side * grid_side {
        return Err(Error::Dimension(format!(
            "{k} tokens do not fill a {grid_side}x{grid_side} grid"
        )));
    }
    if query >= k {
        return Err(Error::Contract(format!("query {query} is out of range for {k} tokens")));
    }
    let pair = |j: usize| Tensor::from_rows(&[tokens.row(query).to_vec(), tokens.row(j).to_vec()]);
    let values = (0..k)
        .map(|j| {
            if j == query {
                // a lone vector still has to be checked for zero norm
                pairwise_cosine(&pair(j)?).map(|_| 1.0)
            } else {
                pairwise_cosine(&pair(j)?).map(|c| c.data()[1])
            }
        })
        .collect::<Result<_>>()?;
    Ok(HeatMap {
        grid_side,
        query_index: query,
        values,
    })
}

/// Linear `[min, max] → [0, 255]`; a constant map renders as 128.
pub fn heatmap_pixels(map: &HeatMap) -> Vec<u8> {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    map.values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    grid_side: usize,
    query_index: usize,
    query_row: usize,
    query_col: usize,
    min: f64,
    max: f64,
    values: &'a [f64],
}

/// Writes an 8-bit PGM plus `<path>.json` naming the query cell and value range.
pub fn render_pgm(map: &HeatMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_gray8(path, map.grid_side, map.grid_side, &heatmap_pixels(map))?;
    let sidecar = Sidecar {
        grid_side: map.grid_side,
        query_index: map.query_index,
        query_row: map.query_index / map.grid_side,
        query_col: map.query_index % map.grid_side,
        min: map.values.iter().copied().fold(f64::INFINITY, f64::min),
        max: map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        values: &map.values,
    };
    let json_path = path.with_extension("json");
    fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Centered data in component coordinates, `[M × n]`.
    pub projected: Tensor<f64>,
    /// Unit eigenvectors of the covariance as rows, `[n × D]`.
    pub components: Tensor<f64>,
    /// Non-increasing eigenvalues.
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

pub const PCA_MAX_ITERS: usize = 1000;
pub const PCA_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt against `basis`, run twice for stability, then normalize; returns the pre-normalization length.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Mean-centers `x` and projects it onto the top `n_components` covariance
/// eigenvectors, found one at a time by power iteration on the deflated
/// covariance (up to 1000 iterations, or relative eigenvalue change < 1e-10).
pub fn pca_reduce<T: Scalar>(x: &Tensor<T>, n_components: usize) -> Result<Pca> {
    let (m, d) = x.dims2()?;
    if n_components == 0 || n_components > m.min(d) {
        return Err(Error::Contract(format!(
            "n_components {n_components} must be in 1..={}",
            m.min(d)
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("PCA input is not finite".into()));
    }
    let x: Tensor<f64> = x.cast();
    let mean = x.mean_rows()?.into_data();
    let centered: Vec<f64> = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, mu)| v - mu))
        .collect();
    let centered = Tensor::new(vec![m, d], centered)?;
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose()?.matmul(&centered)?.into_data();
    cov.iter_mut().for_each(|v| *v /= denom);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut values = Vec::with_capacity(n_components);
    let apply = |cov: &[f64], v: &[f64]| -> Vec<f64> { cov.chunks(d).map(|row| dot(row, v)).collect() };
    for c in 0..n_components {
        // deterministic start, nudged off any axis, kept orthogonal to found components
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + c * 13) % 11) as f64 * 0.1).collect();
        if orthonormalize(&mut v, &basis) < 1e-12 {
            for i in 0..d {
                v = (0..d).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
                if orthonormalize(&mut v, &basis) > 1e-12 {
                    break;
                }
            }
        }
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERS {
            let mut w = apply(&cov, &v);
            let next = dot(&w, &v);
            if orthonormalize(&mut w, &basis) < 1e-300 {
                // remaining covariance is zero along every unused direction
                break;
            }
            v = w;
            let converged = (next - lambda).abs() <= PCA_TOL * next.abs().max(f64::MIN_POSITIVE);
            lambda = next;
            if converged {
                break;
            }
        }
        lambda = dot(&apply(&cov, &v), &v).max(0.0);
        // deflate by the rank-one component
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        basis.push(v);
        values.push(lambda);
    }

    let mut order: Vec<usize> = (0..n_components).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let components = Tensor::new(
        vec![n_components, d],
        order.iter().flat_map(|&i| basis[i].iter().copied()).collect(),
    )?;
    let explained_variance = order.iter().map(|&i| values[i]).collect();
    let projected = centered.matmul(&components.transpose()?)?;
    Ok(Pca {
        projected,
        components,
        explained_variance,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn heatmap_examples() {
        let y = gaussian(9, 4, 1);
        let h = heatmap(&y, 3, 4).unwrap();
        assert_eq!(h.values.len(), 9);
        assert!((h.values[4] - 1.0).abs() < 1e-6);
        let same = Tensor::from_rows(&vec![vec![0.2, 0.4]; 4]).unwrap();
        assert!(heatmap(&same, 2, 1)
            .unwrap()
            .values
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(heatmap(&y, 3, 9).is_err());
        assert!(heatmap(&y, 2, 0).is_err());
    }

    #[test]
    fn heatmap_is_symmetric_and_scale_free() {
        let y = gaussian(16, 5, 2);
        let maps: Vec<_> = (0..16).map(|q| heatmap(&y, 4, q).unwrap()).collect();
        for q in 0..16 {
            for j in 0..16 {
                assert_eq!(maps[q].values[j], maps[j].values[q]);
            }
        }
        let mut scaled = y.clone();
        scaled.data_mut()[5..10].iter_mut().for_each(|v| *v *= 3.5);
        let a = heatmap(&y, 4, 0).unwrap();
        let b = heatmap(&scaled, 4, 0).unwrap();
        for (x, z) in a.values.iter().zip(&b.values) {
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn pixels_follow_linear_map() {
        let map = HeatMap {
            grid_side: 2,
            query_index: 1,
            values: vec![0.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(heatmap_pixels(&map), vec![0, 255, 255, 255]);
        let flat = HeatMap {
            grid_side: 2,
            query_index: 0,
            values: vec![0.3; 4],
        };
        assert_eq!(heatmap_pixels(&flat), vec![128; 4]);
    }

    #[test]
    fn render_writes_pgm_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let map = HeatMap {
            grid_side: 2,
            query_index: 3,
            values: vec![-1.0, 0.0, 0.5, 1.0],
        };
        let path = dir.path().join("m.pgm");
        render_pgm(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        let img = crate::image::read_image(&path).unwrap();
        let px: Vec<u8> = img.data().iter().map(|&v| crate::image::quantize(v)).collect();
        assert_eq!(px, heatmap_pixels(&map));
        let side: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(side["query_row"], 1);
        assert_eq!(side["query_col"], 1);

        let again = dir.path().join("n.pgm");
        render_pgm(&map, &again).unwrap();
        assert_eq!(bytes, fs::read(&again).unwrap());
    }

    fn check_orthonormal(p: &Pca) {
        let n = p.components.shape()[0];
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(p.components.row(i), p.components.row(j));
                assert!((got - want).abs() < 1e-8, "({i},{j}) = {got}");
            }
        }
    }

    #[test]
    fn line_data_has_one_component() {
        let x = Tensor::from_rows(
            &(0..20)
                .map(|i| vec![i as f64, 2.0 * i as f64 + 1.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let p = pca_reduce(&x, 2).unwrap();
        let total: f64 = p.explained_variance.iter().sum();
        assert!(p.explained_variance[0] / total > 1.0 - 1e-12);
        check_orthonormal(&p);
    }

    #[test]
    fn full_rank_reconstruction() {
        for (m, d) in [(30, 6), (5, 8), (12, 12)] {
            let x = gaussian(m, d, (m * d) as u64);
            let n = m.min(d);
            let p = pca_reduce(&x, n).unwrap();
            check_orthonormal(&p);
            assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
            let back = p.projected.matmul(&p.components).unwrap();
            for (r, row) in x.data().chunks(d).enumerate() {
                for (c, (v, mu)) in row.iter().zip(&p.mean).enumerate() {
                    assert!((back.data()[r * d + c] - (v - mu)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn isotropic_variances_are_close() {
        let p = pca_reduce(&gaussian(10_000, 4, 5), 4).unwrap();
        let mean = p.explained_variance.iter().sum::<f64>() / 4.0;
        assert!(
            p.explained_variance.iter().all(|v| (v - mean).abs() / mean < 0.1),
            "{:?}",
            p.explained_variance
        );
    }

    #[test]
    fn component_count_is_checked() {
        let x = gaussian(4, 3, 0);
        assert!(pca_reduce(&x, 0).is_err());
        assert!(pca_reduce(&x, 4).is_err());
        assert_eq!(pca_reduce(&x, 3).unwrap().projected.shape(), &[4, 3]);
    }
}
