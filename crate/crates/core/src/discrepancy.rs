//! One-dimensional and sliced Wasserstein-1 distances between empirical
//! distributions.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::simulators::{Dataset, Matrix};

pub const DEFAULT_DIRECTIONS: usize = 100;

/// `K` unit vectors in `R^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    pub dim: usize,
    /// Row-major `K x p`.
    pub dirs: Vec<f64>,
}

impl DirectionSet {
    /// Normalized standard-normal draws.
    pub fn random(count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut dirs = Vec::with_capacity(count * dim);
        for _ in 0..count {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    dirs.extend(v.iter().map(|x| x / norm));
                    break;
                }
            }
        }
        Self { dim, dirs }
    }

    pub fn from_vectors(dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let mut dirs = Vec::new();
        for v in vectors {
            if v.len() != dim {
                return Err(Error::dim("direction", dim, v.len()));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Input("zero direction".into()));
            }
            dirs.extend(v.iter().map(|x| x / norm));
        }
        Ok(Self { dim, dirs })
    }

    pub fn len(&self) -> usize {
        self.dirs.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        &self.dirs[k * self.dim..(k + 1) * self.dim]
    }

    fn project(&self, k: usize, data: &Dataset) -> Vec<f64> {
        let w = self.direction(k);
        data.iter_rows().map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
    }
}

fn sort(v: &mut [f64]) {
    v.sort_by(f64::total_cmp);
}

/// W1 between two empirical distributions on the line.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    sort(&mut a);
    sort(&mut b);
    Ok(w1_sorted(&a, &b))
}

/// W1 of two sorted samples via the merged quantile grid.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    let mut total = 0.0;
    walk_coupling(n, m, |i, j, mass| total += mass * (a[i] - b[j]).abs());
    total
}

/// Visit the monotone coupling between `n` and `m` equally weighted atoms:
/// `f(i, j, mass)` for each segment of the merged quantile grid.
fn walk_coupling(n: usize, m: usize, mut f: impl FnMut(usize, usize, f64)) {
    // work in units of 1 / (n m) to keep the breakpoints exact
    let (n64, m64) = (n as u64, m as u64);
    let total = n64 * m64;
    let (mut i, mut j, mut t) = (0usize, 0usize, 0u64);
    while t < total {
        let next_a = (i as u64 + 1) * m64;
        let next_b = (j as u64 + 1) * n64;
        let next = next_a.min(next_b);
        f(i, j, (next - t) as f64 / total as f64);
        t = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
}

/// Average over directions of the projected W1 distance.
pub fn sliced_w(a: &Dataset, b: &Dataset, dirs: &DirectionSet) -> Result<f64> {
    Ok(SlicedTarget::new(b, dirs.clone())?.distance(a)?)
}

/// Per-direction projected W1 values.
pub fn sliced_w_terms(a: &Dataset, b: &Dataset, dirs: &DirectionSet) -> Result<Vec<f64>> {
    let target = SlicedTarget::new(b, dirs.clone())?;
    target.check(a)?;
    Ok((0..dirs.len())
        .map(|k| {
            let mut pa = dirs.project(k, a);
            sort(&mut pa);
            w1_sorted(&pa, &target.sorted[k])
        })
        .collect())
}

/// A fixed reference dataset with its projections sorted once, for repeated
/// distance evaluations against moving samples.
#[derive(Clone, Debug)]
pub struct SlicedTarget {
    dirs: DirectionSet,
    sorted: Vec<Vec<f64>>,
}

impl SlicedTarget {
    pub fn new(target: &Dataset, dirs: DirectionSet) -> Result<Self> {
        if target.rows == 0 {
            return Err(Error::Input("empty sample".into()));
        }
        if target.cols != dirs.dim {
            return Err(Error::dim("dataset columns", dirs.dim, target.cols));
        }
        if dirs.is_empty() {
            return Err(Error::Input("no directions".into()));
        }
        let sorted = (0..dirs.len())
            .map(|k| {
                let mut p = dirs.project(k, target);
                sort(&mut p);
                p
            })
            .collect();
        Ok(Self { dirs, sorted })
    }

    pub fn directions(&self) -> &DirectionSet {
        &self.dirs
    }

    fn check(&self, a: &Dataset) -> Result<()> {
        if a.rows == 0 {
            return Err(Error::Input("empty sample".into()));
        }
        if a.cols != self.dirs.dim {
            return Err(Error::dim("dataset columns", self.dirs.dim, a.cols));
        }
        Ok(())
    }

    pub fn distance(&self, a: &Dataset) -> Result<f64> {
        self.check(a)?;
        let k = self.dirs.len();
        let mut total = 0.0;
        for d in 0..k {
            let mut pa = self.dirs.project(d, a);
            sort(&mut pa);
            total += w1_sorted(&pa, &self.sorted[d]);
        }
        Ok(total / k as f64)
    }

    /// Distance and its (sub)gradient with respect to every entry of `a`.
    pub fn distance_and_grad(&self, a: &Dataset) -> Result<(f64, Matrix)> {
        self.check(a)?;
        let (k, n, p) = (self.dirs.len(), a.rows, a.cols);
        let mut grad = Matrix::zeros(n, p);
        let mut total = 0.0;
        let mut dproj = vec![0.0; n];
        for d in 0..k {
            let pa = self.dirs.project(d, a);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| pa[x].total_cmp(&pa[y]));
            let b = &self.sorted[d];
            dproj.iter_mut().for_each(|v| *v = 0.0);
            walk_coupling(n, b.len(), |i, j, mass| {
                let diff = pa[order[i]] - b[j];
                total += mass * diff.abs();
                dproj[order[i]] += mass * sign(diff);
            });
            let w = self.dirs.direction(d);
            for i in 0..n {
                if dproj[i] != 0.0 {
                    let row = grad.row_mut(i);
                    for c in 0..p {
                        row[c] += dproj[i] * w[c] / k as f64;
                    }
                }
            }
        }
        Ok((total / k as f64, grad))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Dataset {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn one_dimensional_examples() {
        assert_eq!(w1_1d(&[1.0, 5.0, 2.0], &[5.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(w1_1d(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 1.0);
        assert!(w1_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn unequal_sizes_use_quantile_coupling() {
        // {0, 1} vs {0, 0.5, 1}: quantile functions differ on [1/3, 1/2) by 0.5
        // and on [1/2, 2/3) by 0.5
        let w = w1_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        assert!((w - 1.0 / 6.0).abs() < 1e-15);
        // duplicating every atom leaves the distribution unchanged
        let w = w1_1d(&[0.3, 2.0, -1.0], &[0.3, 0.3, 2.0, 2.0, -1.0, -1.0]).unwrap();
        assert!(w.abs() < 1e-15);
    }

    #[test]
    fn sliced_examples() {
        let a = col(&[0.0, 1.5, 3.0]);
        let b = col(&[0.5, -1.0, 4.0, 2.0]);
        assert_eq!(sliced_w(&a, &a, &DirectionSet::random(5, 1, 1)).unwrap(), 0.0);
        let dirs = DirectionSet::from_vectors(1, &[vec![1.0], vec![-1.0]]).unwrap();
        let got = sliced_w(&a, &b, &dirs).unwrap();
        let want = w1_1d(&a.data, &b.data).unwrap();
        assert!((got - want).abs() < 1e-14);
        let two = Matrix::zeros(1, 2);
        assert!(matches!(sliced_w(&a, &two, &dirs), Err(Error::Dimension { .. })));
    }

    #[test]
    fn point_masses_give_expected_abs_cosine() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let dirs = DirectionSet::random(100_000, 2, 11);
        let got = sliced_w(&a, &b, &dirs).unwrap();
        let want = 2.0 / std::f64::consts::PI * 5.0;
        assert!((got - want).abs() / want <= 0.01, "{got} vs {want}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dirs = DirectionSet::random(7, 2, 5);
        let target = Matrix::from_rows(&[vec![0.1, 0.2], vec![1.0, -0.3], vec![0.4, 0.9]]).unwrap();
        let st = SlicedTarget::new(&target, dirs).unwrap();
        for a in [
            Matrix::from_rows(&[vec![0.3, 0.1], vec![-0.5, 0.7], vec![1.3, 0.2]]).unwrap(),
            Matrix::from_rows(&[vec![0.3, 0.1], vec![-0.5, 0.7]]).unwrap(),
        ] {
            let (v, g) = st.distance_and_grad(&a).unwrap();
            assert!((v - st.distance(&a).unwrap()).abs() < 1e-14);
            for idx in 0..a.data.len() {
                let h = 1e-7;
                let mut ap = a.clone();
                let mut am = a.clone();
                ap.data[idx] += h;
                am.data[idx] -= h;
                let fd = (st.distance(&ap).unwrap() - st.distance(&am).unwrap()) / (2.0 * h);
                assert!((fd - g.data[idx]).abs() < 1e-6, "{fd} vs {}", g.data[idx]);
            }
        }
    }

    #[test]
    fn doubling_directions_is_stable() {
        use crate::simulators::Model;
        let m = Model::GaussianLocation { dim: 3, sigma: 1.0 };
        let a = m.simulate(&[0.0, 0.0, 0.0], &m.draw_latents(200, 1)).unwrap();
        let b = m.simulate(&[0.5, -0.2, 0.1], &m.draw_latents(200, 2)).unwrap();
        let dirs = DirectionSet::random(200, 3, 4);
        let half = DirectionSet { dim: 3, dirs: dirs.dirs[..100 * 3].to_vec() };
        let terms = sliced_w_terms(&a, &b, &half).unwrap();
        let mean = terms.iter().sum::<f64>() / 100.0;
        let sd = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let full = sliced_w(&a, &b, &dirs).unwrap();
        assert!((full - mean).abs() <= 4.0 * sd / 10.0);
    }

    fn small_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..6).prop_flat_map(|n| {
            proptest::collection::vec(-5.0f64..5.0, n * 2).prop_map(move |v| Matrix::from_vec(n, 2, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn w1_translation(a in proptest::collection::vec(-10.0f64..10.0, 1..20), c in -5.0f64..5.0) {
            let b: Vec<f64> = a.iter().map(|x| x + c).collect();
            prop_assert!((w1_1d(&a, &b).unwrap() - c.abs()).abs() < 1e-9);
        }

        #[test]
        fn metric_axioms(a in small_dataset(), b in small_dataset(), c in small_dataset(), seed in 0u64..100) {
            let dirs = DirectionSet::random(8, 2, seed);
            let ab = sliced_w(&a, &b, &dirs).unwrap();
            let ba = sliced_w(&b, &a, &dirs).unwrap();
            let bc = sliced_w(&b, &c, &dirs).unwrap();
            let ac = sliced_w(&a, &c, &dirs).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
            let terms = sliced_w_terms(&a, &b, &dirs).unwrap();
            prop_assert!(ab <= terms.iter().cloned().fold(0.0, f64::max) + 1e-12);
        }

        #[test]
        fn row_permutation_invariance(a in small_dataset(), b in small_dataset(), seed in 0u64..100) {
            let dirs = DirectionSet::random(8, 2, seed);
            let mut rows: Vec<Vec<f64>> = a.iter_rows().map(<[f64]>::to_vec).collect();
            rows.reverse();
            let ar = Matrix::from_rows(&rows).unwrap();
            let x = sliced_w(&a, &b, &dirs).unwrap();
            let y = sliced_w(&ar, &b, &dirs).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
