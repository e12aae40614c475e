use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `centroids`, lowest index on ties.
pub fn nearest(x: ArrayView1<f64>, centroids: &ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's k-means whose initial centroids are the data mean plus `k - 1`
/// distinct random points. Empty clusters keep their previous centroid, so
/// the objective never increases from its value at initialization.
pub fn kmeans_with_mean<R: Rng>(data: &ArrayView2<f64>, k: usize, iterations: usize, rng: &mut R) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centroids = Array2::zeros((k, d));
    let mean = data.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    centroids.row_mut(0).assign(&mean);
    let picks = sample(rng, n, (k - 1).min(n));
    for (slot, idx) in picks.iter().enumerate() {
        centroids.row_mut(slot + 1).assign(&data.row(idx));
    }
    // Fewer points than centroids: pad with the mean.
    for slot in (n + 1)..k {
        centroids.row_mut(slot).assign(&mean);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, x) in data.rows().into_iter().enumerate() {
            let (c, _) = nearest(x, &centroids.view());
            if c != assign[i] {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, x) in data.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assign[i]);
            row += &x;
            counts[assign[i]] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                let m = &sums.row(c) / n as f64;
                centroids.row_mut(c).assign(&m);
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}
