//! k-means with k-means++ seeding and Lloyd iterations.

use das_numerics::{squared_distance, Real, SeededRng, Tensor};

use crate::error::{DasError, Result};

/// Squared distances from every sample to every centroid, `n × k`, via
/// `‖x‖² − 2x·c + ‖c‖²`.
fn all_distances(samples: &Tensor, centroids: &Tensor) -> Vec<f64> {
    let (n, d, k) = (samples.rows(), samples.cols(), centroids.rows());
    let mut cross = vec![0.0; n * k];
    f64::gemm(
        n,
        d,
        k,
        -2.0,
        samples.data(),
        d as isize,
        1,
        centroids.data(),
        1,
        d as isize,
        0.0,
        &mut cross,
        k as isize,
        1,
    );
    let xn: Vec<f64> = (0..n).map(|i| das_numerics::dot(samples.row(i), samples.row(i))).collect();
    let cn: Vec<f64> = (0..k).map(|j| das_numerics::dot(centroids.row(j), centroids.row(j))).collect();
    for i in 0..n {
        for j in 0..k {
            let v = &mut cross[i * k + j];
            *v = (*v + xn[i] + cn[j]).max(0.0);
        }
    }
    cross
}

fn plusplus(samples: &Tensor, k: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let n = samples.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n).map(|i| squared_distance(samples.row(i), samples.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = rng.weighted_index(&dist).ok_or_else(|| {
            DasError::Invalid(format!("k-means: only {} distinct samples for {k} centroids", chosen.len()))
        })?;
        chosen.push(next);
        let c = samples.row(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(samples.row(i), c));
        }
    }
    Ok(chosen)
}

/// `k` centroids of `samples` (rows). Empty clusters are reseeded to the
/// sample farthest from its current centroid.
pub fn kmeans(samples: &Tensor, k: usize, max_iters: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < k {
        return Err(DasError::InsufficientSamples { required: k, got: n });
    }
    let seeds = plusplus(samples, k, rng)?;
    let mut cdata = Vec::with_capacity(k * d);
    for &s in &seeds {
        cdata.extend_from_slice(samples.row(s));
    }
    let mut centroids = Tensor::matrix(k, d, cdata)?;
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let dist = all_distances(samples, &centroids);
        let mut changed = false;
        let mut own = vec![0.0; n];
        for i in 0..n {
            let row = &dist[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] < row[best] {
                    best = j;
                }
            }
            own[i] = row[best];
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(samples.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| own[a].total_cmp(&own[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                own[far] = 0.0;
                centroids.row_mut(c).copy_from_slice(samples.row(far));
                changed = true;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}
