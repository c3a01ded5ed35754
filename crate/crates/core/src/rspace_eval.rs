//! Separability of labeled subsets in representation space: k-means
//! clustering, precision under the optimal cluster-to-subset assignment,
//! and the Calinski-Harabasz index.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoders::LatentRow;
use crate::error::{Error, Result};
use crate::seed;

/// `n` points of dimension `d` (row-major) with ground-truth labels `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Contract(format!(
                "{} values do not form {} points of dimension {dim}",
                data.len(),
                labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("point coordinates must be finite".into()));
        }
        let set = PointSet { dim, data, labels };
        let k = set.n_labels();
        let mut seen = vec![false; k];
        for &l in &set.labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!(
                "labels must cover 0..{k}; {missing} is missing"
            )));
        }
        Ok(set)
    }

    pub fn from_rows(rows: &[LatentRow]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.z.len());
        if rows.iter().any(|r| r.z.len() != dim) {
            return Err(Error::Contract("latent rows differ in dimension".into()));
        }
        Self::new(
            dim,
            rows.iter().flat_map(|r| r.z.iter().map(|&v| f64::from(v))).collect(),
            rows.iter().map(|r| r.label as usize).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    /// k x d, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
    pub restart: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            n_restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            seed,
        }
    }
}

/// Nearest centroid per point (ties go to the lower index) and the inertia.
fn assign(data: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    data.chunks(dim)
        .map(|p| {
            centroids
                .chunks(dim)
                .map(|c| sq_dist(p, c))
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |best, (j, d)| if d < best.1 { (j, d) } else { best },
                )
        })
        .unzip()
}

fn kmeans_pp(data: &[f64], dim: usize, k: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data.chunks(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    r -= w;
                    r < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.gen_range(0..n)
        };
        let c = data[pick * dim..(pick + 1) * dim].to_vec();
        for (w, p) in d2.iter_mut().zip(data.chunks(dim)) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn lloyd(data: &[f64], dim: usize, k: usize, cfg: &KMeansConfig, restart: usize) -> ClusterResult {
    let mut rng = seed::rng(seed::derive(cfg.seed, restart as u64));
    let mut centroids = kmeans_pp(data, dim, k, &mut rng);
    let (mut labels, mut dists) = assign(data, dim, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let scale = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
    let mut iterations = 1;
    while iterations < cfg.max_iter {
        // means of the current assignment
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.chunks(dim).zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in next[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                {
                    *c = s / counts[j] as f64;
                }
            }
        }
        // empty clusters take the point farthest from its centroid
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..labels.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    counts[j] = 1;
                    labels[i] = j;
                    dists[i] = 0.0;
                    next[j * dim..(j + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
                }
            }
        }
        let shift = sq_dist(&centroids, &next);
        let (new_labels, new_dists) = assign(data, dim, &next);
        let new_inertia: f64 = new_dists.iter().sum();
        debug_assert!(
            new_inertia <= inertia * (1.0 + 1e-9) + 1e-12,
            "inertia increased: {inertia} -> {new_inertia}"
        );
        let stable = new_labels == labels;
        centroids = next;
        labels = new_labels;
        dists = new_dists;
        inertia = new_inertia;
        iterations += 1;
        if stable || shift <= cfg.tol * scale {
            break;
        }
    }
    ClusterResult {
        labels,
        centroids,
        inertia,
        iterations,
        restart,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `n_restarts` by inertia.
pub fn kmeans(points: &PointSet, cfg: &KMeansConfig) -> Result<ClusterResult> {
    let n = points.len();
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::Contract(format!(
            "k-means needs n >= k >= 1 (n = {n}, k = {})",
            cfg.k
        )));
    }
    let runs: Vec<ClusterResult> = (0..cfg.n_restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(&points.data, points.dim, cfg.k, cfg, r))
        .collect();
    Ok(runs
        .into_iter()
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia).then(a.restart.cmp(&b.restart)))
        .unwrap())
}

/// Row = predicted cluster, column = ground-truth subset.
pub fn contingency(predicted: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predicted labels vs {} ground-truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Contract(format!("label out of range 0..{k}: ({p}, {t})")));
        }
        table[p][t] += 1;
    }
    Ok(table)
}

/// Maximum-weight perfect matching on a square table (Hungarian method with
/// potentials). Returns `assignment[row] = column`.
pub fn max_weight_assignment(table: &[Vec<usize>]) -> Vec<usize> {
    let n = table.len();
    let top = table.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| top - table[i][j] as i64;
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of points whose cluster maps to their subset under the optimal
/// one-to-one cluster-to-subset assignment.
pub fn precision(predicted: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Contract("precision of an empty labeling".into()));
    }
    let table = contingency(predicted, truth, k)?;
    let assignment = max_weight_assignment(&table);
    let matched: usize = assignment.iter().enumerate().map(|(i, &j)| table[i][j]).sum();
    Ok(matched as f64 / truth.len() as f64)
}

/// Calinski-Harabasz index `[B/(k-1)] / [W/(n-k)]`. Returns `+inf` when
/// the within-subset dispersion is zero.
pub fn calinski_harabasz(points: &PointSet, labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::Contract("one label per point required".into()));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    if k < 2 || n <= k {
        return Err(Error::Contract(format!(
            "Calinski-Harabasz needs k >= 2 and n > k (n = {n}, k = {k})"
        )));
    }
    let d = points.dim;
    let mut global = vec![0.0; d];
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, &x) in points.point(i).iter().enumerate() {
            global[c] += x;
            sums[l * d + c] += x;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    for j in 0..k {
        if counts[j] > 0 {
            sums[j * d..(j + 1) * d].iter_mut().for_each(|s| *s /= counts[j] as f64);
        }
    }
    let between: f64 = (0..k)
        .filter(|&j| counts[j] > 0)
        .map(|j| counts[j] as f64 * sq_dist(&sums[j * d..(j + 1) * d], &global))
        .sum();
    let within: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.point(i), &sums[l * d..(l + 1) * d]))
        .sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub precision: f64,
    /// CH of the ground-truth subsets (headline figure).
    pub ch_ground_truth: f64,
    /// CH of the k-means partition.
    pub ch_predicted: f64,
    pub inertia: f64,
}

/// k-means on `points`, then precision against the ground truth and CH
/// under both labelings.
pub fn evaluate_rspace(points: &PointSet, k: usize, seed: u64) -> Result<EvalMetrics> {
    let clusters = kmeans(points, &KMeansConfig::new(k, seed))?;
    let precision = precision(&clusters.labels, &points.labels, k.max(points.n_labels()))?;
    Ok(EvalMetrics {
        precision,
        ch_ground_truth: calinski_harabasz(points, &points.labels)?,
        ch_predicted: calinski_harabasz(points, &clusters.labels)?,
        inertia: clusters.inertia,
    })
}

/// Non-finite CH values serialize as the string `"inf"`.
pub mod ch_format {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad CH value {s:?}"))),
        }
    }
}

/// The per-(variant, experiment) metrics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub experiment: String,
    pub precision: f64,
    #[serde(with = "ch_format")]
    pub ch_ground_truth: f64,
    #[serde(with = "ch_format")]
    pub ch_predicted: f64,
    pub inertia: f64,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(variant: &str, experiment: &str, m: &EvalMetrics, k: usize, n: usize, seed: u64) -> Self {
        MetricsRecord {
            variant: variant.to_string(),
            experiment: experiment.to_string(),
            precision: m.precision,
            ch_ground_truth: m.ch_ground_truth,
            ch_predicted: m.ch_predicted,
            inertia: m.inertia,
            k,
            n,
            seed,
        }
    }

    pub fn metrics(&self) -> EvalMetrics {
        EvalMetrics {
            precision: self.precision,
            ch_ground_truth: self.ch_ground_truth,
            ch_predicted: self.ch_predicted,
            inertia: self.inertia,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("metrics serialize") + "\n";
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
    }
}

/// Projection of the points onto their two leading principal axes.
pub fn pca_2d(points: &PointSet) -> Vec<[f64; 2]> {
    let (n, d) = (points.len(), points.dim);
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|i| points.point(i)[c]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| {
            points
                .point(i)
                .iter()
                .zip(&mean)
                .map(|(x, m)| x - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks(d) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|c| 1.0 + c as f64 / d as f64).collect();
        for _ in 0..300 {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
            for u in &axes {
                let p: f64 = w.iter().zip(u).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        axes.push(v);
    }
    centered
        .chunks(d)
        .map(|row| {
            let proj = |k: usize| axes.get(k).map_or(0.0, |u| row.iter().zip(u).map(|(x, y)| x * y).sum());
            [proj(0), proj(1)]
        })
        .collect()
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939",
];

/// 2D PCA scatter of the r-space as a standalone SVG, colored by label.
pub fn pca_scatter_svg(points: &PointSet, title: &str) -> String {
    use std::fmt::Write as _;
    let xy = pca_2d(points);
    let (size, pad) = (480.0, 30.0);
    let bounds = |k: usize| {
        let lo = xy.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = xy.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (bounds(0), bounds(1));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    );
    for (p, &l) in xy.iter().zip(&points.labels) {
        let cx = pad + (p[0] - x0) / xs * (size - 2.0 * pad);
        let cy = size - pad - (p[1] - y0) / ys * (size - 2.0 * pad);
        writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\"/>",
            PALETTE[l % PALETTE.len()]
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
