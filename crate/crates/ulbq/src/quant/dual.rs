//! Two-term binary decomposition of a weight group.
//!
//! Approximates a group as `w ≈ α1·B1 + α2·B2` with `B1, B2 ∈ {±1}` and
//! scalar magnitudes per group, giving four reconstruction levels
//! `±α1 ± α2` at a 2-bit storage cost. Fitting alternates two exactly
//! solvable subproblems:
//!
//! * signs fixed → the magnitudes solve a 2×2 least-squares system;
//! * magnitudes fixed → each element picks the nearest of the four levels.
//!
//! Both half-steps are non-increasing in squared error, so the loop is run
//! from several deterministic starting points and the best result kept. One
//! starting point places the levels on the symmetric 2-bit grid
//! `{±a/3, ±a}` (a = max |w|), which makes the final fit at least as good
//! as symmetric round-to-nearest on every group, by construction.

use crate::tensor::{Scalar, Tensor};

use super::GroupLayout;

/// Iteration cap for one alternating-least-squares run.
pub const MAX_ALS_ITERS: u32 = 25;

/// Fitted decomposition of a single group.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBinaryGroup<T: Scalar> {
    /// Larger magnitude, canonicalized so `alpha1 >= alpha2 >= 0`.
    pub alpha1: T,
    pub alpha2: T,
    /// Signs for the first term, `+1` or `-1` (zero weights count as `+`).
    pub b1: Vec<i8>,
    /// Signs for the second term.
    pub b2: Vec<i8>,
    /// Alternating iterations the winning run used.
    pub iterations: u32,
}

impl<T: Scalar> DualBinaryGroup<T> {
    pub fn reconstruct(&self) -> Vec<T> {
        self.b1
            .iter()
            .zip(&self.b2)
            .map(|(&s1, &s2)| self.alpha1 * T::lit(s1 as f64) + self.alpha2 * T::lit(s2 as f64))
            .collect()
    }

    pub fn mse(&self, w: &[T]) -> T {
        let n = T::lit(w.len() as f64);
        let mut acc = T::zero();
        for (hat, &v) in self.reconstruct().iter().zip(w) {
            let d = *hat - v;
            acc = acc + d * d;
        }
        acc / n
    }
}

/// Decomposition of a full tensor, one [`DualBinaryGroup`] per group.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBinaryFit<T: Scalar> {
    pub layout: GroupLayout,
    pub groups: Vec<DualBinaryGroup<T>>,
}

impl<T: Scalar> DualBinaryFit<T> {
    pub fn reconstruct(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.layout.total());
        for g in &self.groups {
            out.extend(g.reconstruct());
        }
        out
    }
}

/// Fit every group of `w` under `layout`.
pub fn dual_binarize<T: Scalar>(w: &[T], layout: GroupLayout) -> DualBinaryFit<T> {
    assert_eq!(w.len(), layout.total(), "dual_binarize: {} weights for {layout:?}", w.len());
    let groups = w.chunks(layout.elems).map(dual_binarize_group).collect();
    DualBinaryFit { layout, groups }
}

/// Fit one group, trying each starting point and keeping the lowest-error
/// result (ties go to the earlier start, so the outcome is deterministic).
pub fn dual_binarize_group<T: Scalar>(w: &[T]) -> DualBinaryGroup<T> {
    assert!(!w.is_empty(), "dual_binarize_group: empty group");
    let a = w.iter().fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m });

    // Greedy residual start: α1 fits the signs of w, α2 fits what's left.
    let alpha1 = mean_abs(w);
    let b1: Vec<i8> = w.iter().map(|&v| sign_of(v)).collect();
    let resid: Vec<T> = w
        .iter()
        .zip(&b1)
        .map(|(&v, &s)| v - alpha1 * T::lit(s as f64))
        .collect();
    let alpha2 = mean_abs(&resid);
    let greedy = (alpha1, alpha2);

    // Symmetric-grid start, a heavier-tailed spread, and the best cell of
    // a coarse magnitude sweep. The sweep is what rescues one-sided groups
    // (e.g. all-positive weights), where the greedy start's basin can be a
    // poor local optimum.
    let starts = [
        greedy,
        (T::lit(2.0 / 3.0) * a, T::lit(1.0 / 3.0) * a),
        (a, a / T::lit(2.0)),
        coarse_sweep(w, a),
    ];

    let mut best: Option<DualBinaryGroup<T>> = None;
    for &(a1, a2) in &starts {
        let fit = refine(w, a1, a2);
        let better = match &best {
            None => true,
            Some(b) => fit.mse(w) < b.mse(w),
        };
        if better {
            best = Some(fit);
        }
    }
    best.expect("at least one start ran")
}

/// Best magnitude pair on a 41×41 grid over `[0, a]²`, scored with the
/// optimal (nearest-level) assignment at each cell. Swapping the two
/// magnitudes never changes the level set, so only `a2 <= a1` is scanned.
///
/// Starting the alternating refinement from this cell guarantees the final
/// fit is at least as good as a 41-point-per-axis exhaustive search: the
/// first least-squares half-step re-solves the magnitudes for the cell's
/// own assignment, which can only lower the error.
fn coarse_sweep<T: Scalar>(w: &[T], a: T) -> (T, T) {
    const STEPS: usize = 41;
    let mut best = (T::infinity(), (a, T::zero()));
    for i in 0..STEPS {
        for j in 0..=i {
            let a1 = a * T::lit(i as f64 / (STEPS - 1) as f64);
            let a2 = a * T::lit(j as f64 / (STEPS - 1) as f64);
            let mut sse = T::zero();
            for &v in w {
                let mut min = T::infinity();
                for level in [a1 + a2, a1 - a2, -a1 + a2, -a1 - a2] {
                    let d = (v - level) * (v - level);
                    if d < min {
                        min = d;
                    }
                }
                sse = sse + min;
            }
            if sse < best.0 {
                best = (sse, (a1, a2));
            }
        }
    }
    best.1
}

/// Run alternating least squares from one magnitude pair.
fn refine<T: Scalar>(w: &[T], mut a1: T, mut a2: T) -> DualBinaryGroup<T> {
    let n = w.len();
    let (mut b1, mut b2) = assign(w, a1, a2);
    let mut prev_err = sq_err(w, a1, a2, &b1, &b2);
    let mut iterations = 0u32;

    for it in 1..=MAX_ALS_ITERS {
        iterations = it;
        // Magnitudes: normal equations for [B1 B2] · [α1 α2]ᵀ = w.
        let mut s12 = 0i64;
        let mut r1 = T::zero();
        let mut r2 = T::zero();
        for i in 0..n {
            s12 += (b1[i] as i64) * (b2[i] as i64);
            r1 = r1 + T::lit(b1[i] as f64) * w[i];
            r2 = r2 + T::lit(b2[i] as f64) * w[i];
        }
        let nn = n as i64;
        if s12.abs() == nn {
            // B2 is ±B1: only the combined magnitude is identifiable.
            a1 = r1 / T::lit(n as f64);
            a2 = T::zero();
        } else {
            let det = T::lit((nn * nn - s12 * s12) as f64);
            let s12t = T::lit(s12 as f64);
            let nt = T::lit(n as f64);
            a1 = (nt * r1 - s12t * r2) / det;
            a2 = (nt * r2 - s12t * r1) / det;
        }

        // Signs: nearest of the four levels under the new magnitudes.
        let (n1, n2) = assign(w, a1, a2);
        let changed = n1 != b1 || n2 != b2;
        b1 = n1;
        b2 = n2;

        let err = sq_err(w, a1, a2, &b1, &b2);
        let improved = err < prev_err;
        prev_err = err;
        if !changed || !improved {
            break;
        }
    }

    canonicalize(a1, a2, b1, b2, iterations)
}

/// Nearest-of-four-levels assignment at fixed magnitudes. Ties resolve in
/// the fixed order (+,+), (+,-), (-,+), (-,-) so runs are reproducible.
fn assign<T: Scalar>(w: &[T], a1: T, a2: T) -> (Vec<i8>, Vec<i8>) {
    const SIGNS: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
    let mut b1 = Vec::with_capacity(w.len());
    let mut b2 = Vec::with_capacity(w.len());
    for &v in w {
        let mut best = (T::infinity(), SIGNS[0]);
        for &(s1, s2) in &SIGNS {
            let level = a1 * T::lit(s1 as f64) + a2 * T::lit(s2 as f64);
            let d = (v - level).abs();
            if d < best.0 {
                best = (d, (s1, s2));
            }
        }
        b1.push(best.1 .0);
        b2.push(best.1 .1);
    }
    (b1, b2)
}

fn sq_err<T: Scalar>(w: &[T], a1: T, a2: T, b1: &[i8], b2: &[i8]) -> T {
    let mut acc = T::zero();
    for i in 0..w.len() {
        let hat = a1 * T::lit(b1[i] as f64) + a2 * T::lit(b2[i] as f64);
        let d = w[i] - hat;
        acc = acc + d * d;
    }
    acc
}

/// Flip signs and swap terms so `alpha1 >= alpha2 >= 0`; the reconstruction
/// is unchanged because each flip is absorbed by its sign vector.
fn canonicalize<T: Scalar>(
    mut a1: T,
    mut a2: T,
    mut b1: Vec<i8>,
    mut b2: Vec<i8>,
    iterations: u32,
) -> DualBinaryGroup<T> {
    if a1 < T::zero() {
        a1 = -a1;
        for s in &mut b1 {
            *s = -*s;
        }
    }
    if a2 < T::zero() {
        a2 = -a2;
        for s in &mut b2 {
            *s = -*s;
        }
    }
    if a2 > a1 {
        std::mem::swap(&mut a1, &mut a2);
        std::mem::swap(&mut b1, &mut b2);
    }
    DualBinaryGroup { alpha1: a1, alpha2: a2, b1, b2, iterations }
}

fn mean_abs<T: Scalar>(w: &[T]) -> T {
    let mut acc = T::zero();
    for &v in w {
        acc = acc + v.abs();
    }
    acc / T::lit(w.len() as f64)
}

fn sign_of<T: Scalar>(v: T) -> i8 {
    if v < T::zero() {
        -1
    } else {
        1
    }
}

/// Traced counterpart: magnitudes as trainable leaves, signs frozen, so
/// calibration can fine-tune α1/α2 by backprop while the binary structure
/// stays fixed.
#[derive(Debug, Clone)]
pub struct DualBinaryParams<T: Scalar> {
    pub layout: GroupLayout,
    /// Per-group magnitudes, trainable. Shape `[groups]`.
    pub alpha1: Tensor<T>,
    pub alpha2: Tensor<T>,
    /// Sign matrices as `±1.0` constants. Shape `[total]`.
    pub b1: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> DualBinaryParams<T> {
    pub fn from_fit(fit: &DualBinaryFit<T>) -> DualBinaryParams<T> {
        let layout = fit.layout;
        let a1: Vec<T> = fit.groups.iter().map(|g| g.alpha1).collect();
        let a2: Vec<T> = fit.groups.iter().map(|g| g.alpha2).collect();
        let signs = |pick: fn(&DualBinaryGroup<T>) -> &Vec<i8>| -> Vec<T> {
            fit.groups
                .iter()
                .flat_map(|g| pick(g).iter().map(|&s| T::lit(s as f64)))
                .collect()
        };
        let alpha1 = Tensor::leaf(&[layout.groups], a1, true);
        let alpha2 = Tensor::leaf(&[layout.groups], a2, true);
        DualBinaryParams {
            layout,
            alpha1,
            alpha2,
            b1: Tensor::leaf(&[layout.total()], signs(|g| &g.b1), false),
            b2: Tensor::leaf(&[layout.total()], signs(|g| &g.b2), false),
        }
    }

    /// Traced reconstruction `α1·B1 + α2·B2` shaped to `shape`.
    pub fn weight(&self, shape: &[usize]) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.layout.total(), "weight: shape {shape:?} for {:?}", self.layout);
        let expand = |a: &Tensor<T>| a.repeat_each(self.layout.elems);
        let flat = expand(&self.alpha1)
            .mul(&self.b1)
            .add(&expand(&self.alpha2).mul(&self.b2));
        flat.reshape(shape)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.alpha1.clone(), self.alpha2.clone()]
    }

    /// Read the (possibly trained) magnitudes back into an eager fit.
    pub fn bake(&self) -> DualBinaryFit<T> {
        let a1 = self.alpha1.to_vec();
        let a2 = self.alpha2.to_vec();
        let b1 = self.b1.to_vec();
        let b2 = self.b2.to_vec();
        let groups = (0..self.layout.groups)
            .map(|g| {
                let span = g * self.layout.elems..(g + 1) * self.layout.elems;
                DualBinaryGroup {
                    alpha1: a1[g],
                    alpha2: a2[g],
                    b1: b1[span.clone()].iter().map(|&v| sign_of(v)).collect(),
                    b2: b2[span].iter().map(|&v| sign_of(v)).collect(),
                    iterations: 0,
                }
            })
            .collect();
        DualBinaryFit { layout: self.layout, groups }
    }
}
