//! Reconstruction metrics: RMSE against ground truth and misclassification
//! percentage of a two-cluster k-means water map.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::raster::GridImage;

/// `sqrt(sum (est - truth)^2 / (L_H * N_H))`.
pub fn rmse(est: &GridImage, truth: &GridImage) -> Result<f64> {
    if est.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            expected: truth.data.len(),
            got: est.data.len(),
            what: "rmse operands",
        });
    }
    let ss: f64 = est
        .data
        .iter()
        .zip(truth.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(libm::sqrt(ss / est.data.len() as f64))
}

/// Two-cluster k-means over per-pixel band vectors.
///
/// Lloyd-style alternation with a strengthened assignment step: pixels are
/// sorted by their projection onto the centroid axis and the cut with the
/// lowest total within-cluster SSE is chosen exhaustively (every k=2
/// partition induced by a separating hyperplane is such a cut). On 1-band
/// images this finds the globally optimal two-clustering. Initialization is
/// deterministic (extreme last-band pixels); after convergence the cluster
/// with the lower last-band (NIR) mean is labeled 0 (water convention).
pub fn kmeans2(img: &GridImage, max_iters: usize) -> Result<Vec<u8>> {
    let n = img.n_pixels();
    let l = img.bands;
    let nir = l - 1;
    let pixel = |p: usize| -> Vec<f64> { (0..l).map(|b| img.at(b, p)).collect() };
    let (mut lo, mut hi) = (0usize, 0usize);
    for p in 1..n {
        if img.at(nir, p) < img.at(nir, lo) {
            lo = p;
        }
        if img.at(nir, p) > img.at(nir, hi) {
            hi = p;
        }
    }
    if pixel(lo) == pixel(hi) {
        return Err(Error::InvalidArgument(String::from(
            "k-means needs at least two distinct pixel vectors",
        )));
    }
    let mut centroids = [pixel(lo), pixel(hi)];
    let mut labels = vec![0u8; n];
    for _ in 0..max_iters {
        // project on the centroid axis and sort
        let dir: Vec<f64> = (0..l).map(|b| centroids[1][b] - centroids[0][b]).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let proj: Vec<f64> = (0..n)
            .map(|p| (0..l).map(|b| img.at(b, p) * dir[b]).sum())
            .collect();
        order.sort_by(|&a, &b| proj[a].partial_cmp(&proj[b]).unwrap_or(core::cmp::Ordering::Equal));
        // prefix sums per band for O(n) SSE of every cut
        let mut pre_sum = vec![vec![0.0; n + 1]; l];
        let mut pre_sq = vec![0.0; n + 1];
        for (i, &p) in order.iter().enumerate() {
            let mut sq = 0.0;
            for b in 0..l {
                let v = img.at(b, p);
                pre_sum[b][i + 1] = pre_sum[b][i] + v;
                sq += v * v;
            }
            pre_sq[i + 1] = pre_sq[i] + sq;
        }
        let sse_of = |from: usize, to: usize| -> f64 {
            let count = (to - from) as f64;
            let mut mean_sq = 0.0;
            for prow in pre_sum.iter() {
                let s = prow[to] - prow[from];
                mean_sq += s * s;
            }
            (pre_sq[to] - pre_sq[from]) - mean_sq / count
        };
        let best_cut = (1..n)
            .min_by(|&a, &b| {
                let sa = sse_of(0, a) + sse_of(a, n);
                let sb = sse_of(0, b) + sse_of(b, n);
                sa.partial_cmp(&sb).unwrap_or(core::cmp::Ordering::Equal)
            })
            .expect("n >= 2");
        let mut new_labels = vec![0u8; n];
        for (i, &p) in order.iter().enumerate() {
            new_labels[p] = if i < best_cut { 0 } else { 1 };
        }
        let converged = new_labels == labels;
        labels = new_labels;
        for c in 0..2 {
            let (from, to) = if c == 0 { (0, best_cut) } else { (best_cut, n) };
            for b in 0..l {
                centroids[c][b] = (pre_sum[b][to] - pre_sum[b][from]) / (to - from) as f64;
            }
        }
        if converged {
            break;
        }
    }
    // canonicalize: label 0 = lower NIR mean
    let mut nir_mean = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for p in 0..n {
        let c = labels[p] as usize;
        nir_mean[c] += img.at(nir, p);
        counts[c] += 1;
    }
    let m0 = if counts[0] > 0 { nir_mean[0] / counts[0] as f64 } else { f64::INFINITY };
    let m1 = if counts[1] > 0 { nir_mean[1] / counts[1] as f64 } else { f64::INFINITY };
    if m0 > m1 {
        for v in &mut labels {
            *v = 1 - *v;
        }
    }
    Ok(labels)
}

/// Percentage of pixels whose k-means class differs between estimate and
/// truth (after label canonicalization).
pub fn misclassification(est: &GridImage, truth: &GridImage, max_iters: usize) -> Result<f64> {
    if est.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            expected: truth.data.len(),
            got: est.data.len(),
            what: "misclassification operands",
        });
    }
    let a = kmeans2(est, max_iters)?;
    let b = kmeans2(truth, max_iters)?;
    let diff = a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
    Ok(100.0 * diff as f64 / a.len() as f64)
}

/// Percentage of label disagreements against a known binary map.
pub fn map_disagreement(labels: &[u8], truth: &[u8]) -> Result<f64> {
    if labels.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: labels.len(),
            what: "label maps",
        });
    }
    let diff = labels.iter().zip(truth.iter()).filter(|(a, b)| a != b).count();
    Ok(100.0 * diff as f64 / labels.len() as f64)
}
