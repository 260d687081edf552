//! Permutohedral lattice for approximate high-dimensional Gaussian filtering.
//!
//! Points are embedded into the hyperplane `sum(y) = 0` of `R^(d+1)`, splatted
//! onto the vertices of their enclosing lattice simplex with barycentric
//! weights, blurred with a `[1/4, 1/2, 1/4]` stencil along each of the `d+1`
//! lattice directions, and sliced back with the same weights. With the
//! embedding scale below, the effective kernel approximates
//! `exp(-0.5 |f_i - f_j|^2)` for unit-bandwidth features.

use std::collections::HashMap;
use std::f64::consts::PI;

const NONE: u32 = u32::MAX;

/// Default number of blur passes per lattice direction.
pub const DEFAULT_PASSES: usize = 10;

/// Halo vertices may grow the table to at most this multiple of the splatted vertices.
const HALO_GROWTH_CAP: usize = 16;
const HALO_MIN_CAP: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct PermutohedralLattice {
    dim: usize,
    passes: usize,
    n_points: usize,
    n_vertices: usize,
    /// `n_points x (dim + 1)` vertex indices.
    vertices: Vec<u32>,
    /// `n_points x (dim + 1)` barycentric weights.
    weights: Vec<f64>,
    /// `(dim + 1) x n_vertices x 2` neighbour indices, `NONE` when absent.
    neighbours: Vec<u32>,
    /// Rescales the blurred output to the mass of a peak-one Gaussian.
    norm: f64,
    /// Contribution of each point's own splat to its own slice, already scaled by `norm`.
    self_weights: Vec<f64>,
}

struct VertexTable {
    dim: usize,
    index: HashMap<Vec<i32>, u32>,
    keys: Vec<i32>,
}

impl VertexTable {
    fn insert(&mut self, key: &[i32]) -> u32 {
        if let Some(&idx) = self.index.get(key) {
            return idx;
        }
        let idx = self.index.len() as u32;
        self.index.insert(key.to_vec(), idx);
        self.keys.extend_from_slice(key);
        idx
    }

    fn len(&self) -> usize {
        self.index.len()
    }

    fn key(&self, v: usize) -> &[i32] {
        &self.keys[v * self.dim..(v + 1) * self.dim]
    }
}

/// Keys of the two neighbours of `key` along lattice direction `j`.
fn neighbour_keys(key: &[i32], j: usize, n1: &mut [i32], n2: &mut [i32]) {
    let d = key.len();
    for i in 0..d {
        n1[i] = key[i] - 1;
        n2[i] = key[i] + 1;
    }
    if j < d {
        n1[j] = key[j] + d as i32;
        n2[j] = key[j] - d as i32;
    }
}

impl PermutohedralLattice {
    /// Builds the lattice for `features` (`n x dim`, voxel-major), which must
    /// already be divided by the kernel bandwidths.
    pub fn new(features: &[f64], dim: usize) -> Self {
        Self::with_passes(features, dim, DEFAULT_PASSES)
    }

    /// Each blur pass along the `d+1` directions adds covariance `3/4 I` in
    /// lattice-scale units and splat plus slice add `1/4 I`, so `passes`
    /// blur passes on a lattice refined by `sqrt((3 passes + 1) / 4)` keep
    /// the unit variance while approaching a true Gaussian.
    pub fn with_passes(features: &[f64], dim: usize, passes: usize) -> Self {
        assert!(dim > 0 && features.len() % dim == 0);
        assert!(passes > 0);
        let d = dim;
        let d1 = d + 1;
        let n = features.len() / d;
        let refine = ((3 * passes + 1) as f64 / 4.0).sqrt();

        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64 * refine;
        let scale: Vec<f64> = (0..d)
            .map(|j| inv_std / (((j + 1) * (j + 2)) as f64).sqrt())
            .collect();

        let mut canonical = vec![0i32; d1 * d1];
        for i in 0..=d {
            for j in 0..=(d - i) {
                canonical[i * d1 + j] = i as i32;
            }
            for j in (d - i + 1)..=d {
                canonical[i * d1 + j] = i as i32 - d1 as i32;
            }
        }

        let mut table = VertexTable { dim: d, index: HashMap::with_capacity(n * d1), keys: Vec::new() };
        let mut vertices = vec![0u32; n * d1];
        let mut weights = vec![0f64; n * d1];

        let mut elevated = vec![0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0f64; d + 2];
        let mut key = vec![0i32; d];
        let down = 1.0 / d1 as f64;
        let up = d1 as f64;

        for p in 0..n {
            let f = &features[p * d..(p + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // nearest remainder-0 lattice point
            let mut sum = 0i32;
            for i in 0..=d {
                let v = down * elevated[i];
                let hi = v.ceil() * up;
                let lo = v.floor() * up;
                rem0[i] = if hi - elevated[i] < elevated[i] - lo { hi as i32 } else { lo as i32 };
                sum += rem0[i];
            }
            sum /= d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in (i + 1)..=d {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            // project back onto the hyperplane if the rounding left it
            for i in 0..=d {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=d {
                let v = (elevated[i] - rem0[i] as f64) * down;
                bary[(d as i32 - rank[i]) as usize] += v;
                bary[(d as i32 + 1 - rank[i]) as usize] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for r in 0..=d {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * d1 + rank[i] as usize];
                }
                vertices[p * d1 + r] = table.insert(&key);
                weights[p * d1 + r] = bary[r];
            }
        }

        // Halo: add every vertex a blur path can pass through, in blur order,
        // so no mass is dropped on its way between two occupied vertices.
        let splatted = table.len();
        let cap = splatted.saturating_mul(HALO_GROWTH_CAP).max(HALO_MIN_CAP);
        let mut complete = true;
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        'halo: for _ in 0..passes {
            for j in 0..=d {
                let current = table.len();
                for v in 0..current {
                    neighbour_keys(&table.key(v).to_vec(), j, &mut n1, &mut n2);
                    table.insert(&n1);
                    table.insert(&n2);
                    if table.len() > cap {
                        complete = false;
                        break 'halo;
                    }
                }
            }
        }

        let m = table.len();
        let mut neighbours = vec![NONE; d1 * m * 2];
        for j in 0..=d {
            for v in 0..m {
                neighbour_keys(table.key(v), j, &mut n1, &mut n2);
                let base = (j * m + v) * 2;
                neighbours[base] = table.index.get(&n1).copied().unwrap_or(NONE);
                neighbours[base + 1] = table.index.get(&n2).copied().unwrap_or(NONE);
            }
        }

        // Lattice vertices are the points of A_d (covolume sqrt(d+1)) whose
        // coordinates are all congruent mod d+1, an index (d+1)^(d-1)
        // sublattice; the embedding stretches feature space by inv_std.
        let cell = (d1 as f64).sqrt() * (d1 as f64).powi(d as i32 - 1) / inv_std.powi(d as i32);
        let norm = (2.0 * PI).powf(d as f64 / 2.0) / cell;

        let mut lattice = Self {
            dim,
            passes,
            n_points: n,
            n_vertices: m,
            vertices,
            weights,
            neighbours,
            norm,
            self_weights: Vec::new(),
        };
        lattice.self_weights = if complete {
            let response = lattice.impulse_response();
            (0..n)
                .map(|p| {
                    let mut s = 0.0;
                    for a in 0..d1 {
                        let ka = table.key(lattice.vertices[p * d1 + a] as usize);
                        for b in 0..d1 {
                            let kb = table.key(lattice.vertices[p * d1 + b] as usize);
                            let offset: Vec<i32> = kb.iter().zip(ka).map(|(x, y)| x - y).collect();
                            s += lattice.weights[p * d1 + a]
                                * lattice.weights[p * d1 + b]
                                * response.get(&offset).copied().unwrap_or(0.0);
                        }
                    }
                    s * lattice.norm
                })
                .collect()
        } else {
            (0..n).map(|p| lattice.point_self_weight(p)).collect()
        };
        lattice
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    /// Approximate `sum_j exp(-0.5 |f_i - f_j|^2) v_j` for every point `i`,
    /// including `j = i`. `values` is `n x channels`, point-major.
    pub fn filter(&self, values: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(values.len(), self.n_points * channels);
        let d1 = self.dim + 1;
        let m = self.n_vertices;

        let mut lat = vec![0.0; m * channels];
        for p in 0..self.n_points {
            let src = &values[p * channels..(p + 1) * channels];
            for r in 0..d1 {
                let v = self.vertices[p * d1 + r] as usize;
                let w = self.weights[p * d1 + r];
                for (dst, &s) in lat[v * channels..(v + 1) * channels].iter_mut().zip(src) {
                    *dst += w * s;
                }
            }
        }

        let mut next = vec![0.0; m * channels];
        for _ in 0..self.passes {
            for j in 0..d1 {
                for v in 0..m {
                    let base = (j * m + v) * 2;
                    let (a, b) = (self.neighbours[base], self.neighbours[base + 1]);
                    for c in 0..channels {
                        let mut acc = 0.5 * lat[v * channels + c];
                        if a != NONE {
                            acc += 0.25 * lat[a as usize * channels + c];
                        }
                        if b != NONE {
                            acc += 0.25 * lat[b as usize * channels + c];
                        }
                        next[v * channels + c] = acc;
                    }
                }
                std::mem::swap(&mut lat, &mut next);
            }
        }

        let mut out = vec![0.0; self.n_points * channels];
        for p in 0..self.n_points {
            let dst = &mut out[p * channels..(p + 1) * channels];
            for r in 0..d1 {
                let v = self.vertices[p * d1 + r] as usize;
                let w = self.weights[p * d1 + r] * self.norm;
                for (o, &s) in dst.iter_mut().zip(&lat[v * channels..(v + 1) * channels]) {
                    *o += w * s;
                }
            }
        }
        out
    }

    /// The part of [`filter`](Self::filter)'s output at point `p` that came
    /// from `p`'s own value.
    pub fn self_weight(&self, p: usize) -> f64 {
        self.self_weights[p]
    }

    /// Blur response of a unit impulse on the unbounded lattice, keyed by offset.
    fn impulse_response(&self) -> HashMap<Vec<i32>, f64> {
        let d = self.dim;
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        let mut mass: HashMap<Vec<i32>, f64> = HashMap::from([(vec![0; d], 1.0)]);
        for _ in 0..self.passes {
            for j in 0..=d {
                let mut next: HashMap<Vec<i32>, f64> = HashMap::with_capacity(mass.len() * 3);
                for (k, &val) in &mass {
                    neighbour_keys(k, j, &mut n1, &mut n2);
                    *next.entry(k.clone()).or_insert(0.0) += 0.5 * val;
                    *next.entry(n1.clone()).or_insert(0.0) += 0.25 * val;
                    *next.entry(n2.clone()).or_insert(0.0) += 0.25 * val;
                }
                mass = next;
            }
        }
        mass
    }

    /// Self weight by propagating the point's own splat through the actual
    /// (possibly incomplete) vertex table.
    fn point_self_weight(&self, p: usize) -> f64 {
        let d1 = self.dim + 1;
        let m = self.n_vertices;
        let mut mass: HashMap<u32, f64> = HashMap::new();
        for r in 0..d1 {
            *mass.entry(self.vertices[p * d1 + r]).or_insert(0.0) += self.weights[p * d1 + r];
        }
        for _ in 0..self.passes {
            for j in 0..d1 {
                let mut next: HashMap<u32, f64> = HashMap::with_capacity(mass.len() * 3);
                for (&v, &val) in &mass {
                    *next.entry(v).or_insert(0.0) += 0.5 * val;
                    let base = (j * m + v as usize) * 2;
                    for &nb in &self.neighbours[base..base + 2] {
                        if nb != NONE {
                            *next.entry(nb).or_insert(0.0) += 0.25 * val;
                        }
                    }
                }
                mass = next;
            }
        }
        let sliced: f64 = (0..d1)
            .map(|r| self.weights[p * d1 + r] * mass.get(&self.vertices[p * d1 + r]).copied().unwrap_or(0.0))
            .sum();
        sliced * self.norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_features(w: usize, h: usize, sigma: f64) -> Vec<f64> {
        (0..w * h)
            .flat_map(|i| [(i / h) as f64 / sigma, (i % h) as f64 / sigma])
            .collect()
    }

    fn brute(features: &[f64], dim: usize, values: &[f64]) -> Vec<f64> {
        let n = features.len() / dim;
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let sq: f64 = (0..dim)
                            .map(|k| (features[i * dim + k] - features[j * dim + k]).powi(2))
                            .sum();
                        (-0.5 * sq).exp() * values[j]
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn barycentric_weights_are_a_partition_of_unity() {
        let f = grid_features(7, 5, 1.3);
        let lat = PermutohedralLattice::new(&f, 2);
        for p in 0..lat.n_points() {
            let s: f64 = lat.weights[p * 3..p * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(lat.weights[p * 3..p * 3 + 3].iter().all(|&w| w >= -1e-12));
        }
    }

    #[test]
    fn constant_input_stays_constant_in_the_interior() {
        let sigma = 3.0;
        let f = grid_features(40, 40, sigma);
        let lat = PermutohedralLattice::new(&f, 2);
        let out = lat.filter(&vec![1.0; 1600], 1);
        let truth = brute(&f, 2, &vec![1.0; 1600]);
        // interior voxels, away from the boundary by several bandwidths
        let mut worst: f64 = 0.0;
        for x in 12..28 {
            for y in 12..28 {
                let i = x * 40 + y;
                worst = worst.max((out[i] / truth[i] - 1.0).abs());
            }
        }
        assert!(worst < 0.05, "relative mass error {worst}");
    }

    #[test]
    fn self_weight_matches_a_delta_filter() {
        let f = grid_features(6, 6, 1.0);
        let lat = PermutohedralLattice::new(&f, 2);
        for p in [0usize, 7, 20, 35] {
            let mut delta = vec![0.0; 36];
            delta[p] = 1.0;
            let out = lat.filter(&delta, 1);
            assert!((out[p] - lat.self_weight(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_filter_is_close_to_brute_force() {
        let f: Vec<f64> = (0..200).map(|i| i as f64 * 0.37).collect();
        let values: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.05).sin() + 1.5).collect();
        let lat = PermutohedralLattice::new(&f, 1);
        let out = lat.filter(&values, 1);
        let truth = brute(&f, 1, &values);
        for i in 20..180 {
            assert!((out[i] / truth[i] - 1.0).abs() < 0.05, "point {i}: {} vs {}", out[i], truth[i]);
        }
    }
}
