//! B-spline sieve bases.
//!
//! [`BSplineBasis1D`] is a clamped B-spline basis on an interval, evaluated
//! with de Boor's triangular scheme. [`TensorBasis`] takes the Kronecker
//! product of one such basis per coordinate of the concatenated state history
//! `(s_0, ..., s_k)`, stage-major then dimension-major, with the first
//! coordinate outermost. [`PhiFeature`] places that vector in the block of a
//! one-hot action-history encoding.
//!
//! Callers clip inputs into the domain; evaluation outside it is an error.

use serde::{Deserialize, Serialize};

use crate::dtr::{DtrSpec, History, StateBox};
use crate::error::{PolarError, Result};

const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BSplineSpec", into = "BSplineSpec")]
pub struct BSplineBasis1D {
    degree: usize,
    lo: f64,
    hi: f64,
    interior_knots: Vec<f64>,
    knots: Vec<f64>,
}

/// Serialized description of a [`BSplineBasis1D`]; the knot vector is derived.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct BSplineSpec {
    degree: usize,
    lo: f64,
    hi: f64,
    interior_knots: Vec<f64>,
}

impl TryFrom<BSplineSpec> for BSplineBasis1D {
    type Error = PolarError;

    fn try_from(s: BSplineSpec) -> Result<Self> {
        Self::new(s.degree, s.lo, s.hi, s.interior_knots)
    }
}

impl From<BSplineBasis1D> for BSplineSpec {
    fn from(b: BSplineBasis1D) -> Self {
        Self {
            degree: b.degree,
            lo: b.lo,
            hi: b.hi,
            interior_knots: b.interior_knots,
        }
    }
}

impl BSplineBasis1D {
    pub fn new(degree: usize, lo: f64, hi: f64, interior_knots: Vec<f64>) -> Result<Self> {
        if degree == 0 {
            return Err(PolarError::Config(
                "B-spline degree must be at least 1".into(),
            ));
        }
        if !(lo < hi) {
            return Err(PolarError::Config(format!(
                "degenerate domain [{lo}, {hi}]"
            )));
        }
        let mut prev = lo;
        for &t in &interior_knots {
            if !(t > prev && t < hi) {
                return Err(PolarError::Config(format!(
                    "interior knots must be strictly increasing inside ({lo}, {hi})"
                )));
            }
            prev = t;
        }
        let mut basis = Self {
            degree,
            lo,
            hi,
            interior_knots,
            knots: Vec::new(),
        };
        basis.build_knots();
        Ok(basis)
    }

    /// Equally spaced interior knots.
    pub fn uniform(degree: usize, lo: f64, hi: f64, n_interior: usize) -> Result<Self> {
        let step = (hi - lo) / (n_interior + 1) as f64;
        let knots = (1..=n_interior).map(|i| lo + step * i as f64).collect();
        Self::new(degree, lo, hi, knots)
    }

    /// Basis with `size` functions: cubic when `size >= 4`, otherwise degree
    /// `size - 1`, with equally spaced interior knots.
    pub fn with_size(lo: f64, hi: f64, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(PolarError::Config(
                "a B-spline basis needs at least 2 functions".into(),
            ));
        }
        let degree = (size - 1).min(3);
        Self::uniform(degree, lo, hi, size - degree - 1)
    }

    fn build_knots(&mut self) {
        let p = self.degree;
        let mut knots = Vec::with_capacity(2 * (p + 1) + self.interior_knots.len());
        knots.extend(std::iter::repeat_n(self.lo, p + 1));
        knots.extend_from_slice(&self.interior_knots);
        knots.extend(std::iter::repeat_n(self.hi, p + 1));
        self.knots = knots;
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn size(&self) -> usize {
        self.degree + 1 + self.interior_knots.len()
    }

    fn check_domain(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < self.lo - DOMAIN_SLACK || x > self.hi + DOMAIN_SLACK {
            return Err(PolarError::Domain {
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(x.clamp(self.lo, self.hi))
    }

    fn span(&self, x: f64) -> usize {
        let n = self.size();
        if x >= self.hi {
            return n - 1;
        }
        // knots[p..=n] are non-decreasing; find i with knots[i] <= x < knots[i + 1]
        let p = self.degree;
        let upper = &self.knots[p + 1..=n];
        p + upper.partition_point(|&t| t <= x)
    }

    /// Index of the first non-zero function and the `degree + 1` values
    /// starting there.
    pub fn eval_nonzero(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        let x = self.check_domain(x)?;
        let p = self.degree;
        let i = self.span(x);
        let t = &self.knots;
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((i - p, values))
    }

    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let (start, nz) = self.eval_nonzero(x)?;
        let mut out = vec![0.0; self.size()];
        out[start..start + nz.len()].copy_from_slice(&nz);
        Ok(out)
    }
}

/// Free-function form of [`BSplineBasis1D::eval`].
pub fn eval_bspline_1d(basis: &BSplineBasis1D, x: f64) -> Result<Vec<f64>> {
    basis.eval(x)
}

/// Kronecker product of per-coordinate B-spline bases over a state history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBasis {
    dims: Vec<BSplineBasis1D>,
}

impl TensorBasis {
    pub fn new(dims: Vec<BSplineBasis1D>) -> Result<Self> {
        if dims.is_empty() {
            return Err(PolarError::Config(
                "tensor basis needs at least one dimension".into(),
            ));
        }
        Ok(Self { dims })
    }

    /// One basis per coordinate of the given boxes, each with `per_dim_size`
    /// functions.
    pub fn for_boxes(boxes: &[&StateBox], per_dim_size: usize) -> Result<Self> {
        let dims = boxes
            .iter()
            .flat_map(|b| (0..b.dim()).map(move |i| b.interval(i)))
            .map(|(lo, hi)| BSplineBasis1D::with_size(lo, hi, per_dim_size))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }

    /// Largest uniform per-coordinate size whose product stays within
    /// `budget`, with a floor of two functions per coordinate.
    pub fn with_budget(boxes: &[&StateBox], budget: usize) -> Result<Self> {
        let d: usize = boxes.iter().map(|b| b.dim()).sum();
        let mut size = 2usize;
        while (size + 1)
            .checked_pow(d as u32)
            .is_some_and(|l| l <= budget)
        {
            size += 1;
        }
        Self::for_boxes(boxes, size)
    }

    pub fn dims(&self) -> &[BSplineBasis1D] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims.len()
    }

    /// `L_k`.
    pub fn size(&self) -> usize {
        self.dims.iter().map(BSplineBasis1D::size).product()
    }

    /// `Υ(s̄)` for a flat coordinate vector.
    pub fn eval(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.dims.len() {
            return Err(PolarError::DimensionMismatch {
                expected: self.dims.len(),
                actual: coords.len(),
            });
        }
        let mut out = Vec::with_capacity(self.size());
        out.push(1.0);
        let mut next = Vec::with_capacity(self.size());
        for (basis, &x) in self.dims.iter().zip(coords) {
            let (start, nz) = basis.eval_nonzero(x)?;
            let n = basis.size();
            next.clear();
            next.resize(out.len() * n, 0.0);
            for (i, &o) in out.iter().enumerate() {
                if o == 0.0 {
                    continue;
                }
                for (j, &v) in nz.iter().enumerate() {
                    next[i * n + start + j] = o * v;
                }
            }
            std::mem::swap(&mut out, &mut next);
        }
        Ok(out)
    }

    /// `Υ(s̄)` for a state history given stage by stage.
    pub fn eval_states(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        self.eval(&flat)
    }
}

pub fn eval_state_features(tensor: &TensorBasis, coords: &[f64]) -> Result<Vec<f64>> {
    tensor.eval(coords)
}

/// Mixed-radix bijection between action histories `(a_0, ..., a_k)` and
/// `0..N_k`, with `a_0` most significant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionHistoryIndex {
    counts: Vec<usize>,
}

impl ActionHistoryIndex {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(PolarError::Config(
                "action counts must be non-empty and positive".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `N_k^{(A)}`.
    pub fn size(&self) -> usize {
        self.counts.iter().product()
    }

    /// Number of actions at the last stage covered by this index.
    pub fn last_count(&self) -> usize {
        *self.counts.last().expect("non-empty")
    }

    pub fn encode(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.counts.len() {
            return Err(PolarError::DimensionMismatch {
                expected: self.counts.len(),
                actual: actions.len(),
            });
        }
        let mut idx = 0;
        for (stage, (&a, &n)) in actions.iter().zip(&self.counts).enumerate() {
            if a >= n {
                return Err(PolarError::InvalidAction {
                    stage,
                    action: a,
                    n_actions: n,
                });
            }
            idx = idx * n + a;
        }
        Ok(idx)
    }

    /// Index of the history whose prefix is `prefix` and whose last action is
    /// `action`; prefixes sharing a parent are contiguous.
    pub fn encode_extended(&self, prefix: &[usize], action: usize) -> Result<usize> {
        let mut full = Vec::with_capacity(prefix.len() + 1);
        full.extend_from_slice(prefix);
        full.push(action);
        self.encode(&full)
    }

    pub fn decode(&self, mut idx: usize) -> Result<Vec<usize>> {
        if idx >= self.size() {
            return Err(PolarError::Config(format!(
                "action-history index {idx} out of range {}",
                self.size()
            )));
        }
        let mut out = vec![0; self.counts.len()];
        for (slot, &n) in out.iter_mut().zip(&self.counts).rev() {
            *slot = idx % n;
            idx /= n;
        }
        Ok(out)
    }
}

/// `φ = Υ ⊗ e_ā`, stored as the block index and the block contents.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiFeature {
    pub block: usize,
    pub n_blocks: usize,
    pub values: Vec<f64>,
}

impl PhiFeature {
    /// A plain dense feature vector (one block).
    pub fn dense(values: Vec<f64>) -> Self {
        Self {
            block: 0,
            n_blocks: 1,
            values,
        }
    }

    pub fn block_dim(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.n_blocks * self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let d = self.block_dim();
        out[self.block * d..(self.block + 1) * d].copy_from_slice(&self.values);
        out
    }

    pub fn dot(&self, other: &PhiFeature) -> f64 {
        if self.block != other.block {
            return 0.0;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

pub fn phi_features(
    tensor: &TensorBasis,
    index: &ActionHistoryIndex,
    coords: &[f64],
    actions: &[usize],
) -> Result<PhiFeature> {
    Ok(PhiFeature {
        block: index.encode(actions)?,
        n_blocks: index.size(),
        values: tensor.eval(coords)?,
    })
}

/// The per-stage sieve: a tensor basis over `s_0..=s_k` and the action-history
/// index over `a_0..=a_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFeatureMap {
    pub tensor: TensorBasis,
    pub actions: ActionHistoryIndex,
}

impl StageFeatureMap {
    pub fn new(tensor: TensorBasis, actions: ActionHistoryIndex) -> Self {
        Self { tensor, actions }
    }

    /// One map per stage with a uniform per-coordinate basis size.
    pub fn for_spec(spec: &DtrSpec, per_dim_size: usize) -> Result<Vec<Self>> {
        (0..spec.horizon())
            .map(|k| {
                Ok(Self::new(
                    TensorBasis::for_boxes(&spec.history_boxes(k), per_dim_size)?,
                    ActionHistoryIndex::new(spec.action_counts(k))?,
                ))
            })
            .collect()
    }

    /// One map per stage, sized by [`TensorBasis::with_budget`].
    pub fn with_budget(spec: &DtrSpec, budget: usize) -> Result<Vec<Self>> {
        (0..spec.horizon())
            .map(|k| {
                Ok(Self::new(
                    TensorBasis::with_budget(&spec.history_boxes(k), budget)?,
                    ActionHistoryIndex::new(spec.action_counts(k))?,
                ))
            })
            .collect()
    }

    pub fn basis_size(&self) -> usize {
        self.tensor.size()
    }

    pub fn n_action_histories(&self) -> usize {
        self.actions.size()
    }

    pub fn phi_dim(&self) -> usize {
        self.basis_size() * self.n_action_histories()
    }

    pub fn upsilon(&self, history: &History) -> Result<Vec<f64>> {
        self.tensor.eval_states(history.states())
    }

    pub fn phi(&self, history: &History, action: usize) -> Result<PhiFeature> {
        Ok(PhiFeature {
            block: self.actions.encode_extended(history.actions(), action)?,
            n_blocks: self.actions.size(),
            values: self.upsilon(history)?,
        })
    }

    /// `φ` reusing a precomputed `Υ`.
    pub fn phi_with(&self, upsilon: &[f64], prefix: &[usize], action: usize) -> Result<PhiFeature> {
        Ok(PhiFeature {
            block: self.actions.encode_extended(prefix, action)?,
            n_blocks: self.actions.size(),
            values: upsilon.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook Cox–de Boor recursion, independent of the triangular scheme.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64, n_basis: usize) -> f64 {
        if p == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            // the closing knot belongs to the last non-empty interval
            let last = i + 1 == n_basis;
            return if (a <= x && x < b) || (x == b && last && a < b) {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x, n_basis);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x, n_basis);
        }
        v
    }

    #[test]
    fn hat_functions_at_midpoint() {
        let b = BSplineBasis1D::uniform(1, 0.0, 1.0, 0).unwrap();
        assert_eq!(b.eval(0.5).unwrap(), vec![0.5, 0.5]);
        assert_eq!(b.eval(0.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(1.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn quadratic_matches_cox_de_boor() {
        let b = BSplineBasis1D::new(2, 0.0, 1.0, vec![0.5]).unwrap();
        assert_eq!(b.size(), 4);
        let got = b.eval(0.25).unwrap();
        for (i, g) in got.iter().enumerate() {
            let want = cox_de_boor(b.knots(), i, 2, 0.25, b.size());
            assert!((g - want).abs() < 1e-14, "{i}: {g} vs {want}");
        }
    }

    #[test]
    fn outside_domain_is_error() {
        let b = BSplineBasis1D::uniform(3, 0.0, 1.0, 2).unwrap();
        assert!(matches!(b.eval(1.1), Err(PolarError::Domain { .. })));
        assert!(b.eval(f64::NAN).is_err());
    }

    #[test]
    fn budget_sizing() {
        let unit = StateBox::unit(2);
        let t1 = TensorBasis::with_budget(&[&unit], 16).unwrap();
        assert_eq!(t1.size(), 16);
        assert_eq!(t1.dims()[0].degree(), 3);
        let t3 = TensorBasis::with_budget(&[&unit, &unit, &unit], 16).unwrap();
        assert_eq!(t3.size(), 64);
    }

    #[test]
    fn unit_size_bases_give_constant_feature() {
        // a product over zero-variance directions reduces to one column per dim
        let b = BSplineBasis1D::uniform(1, 0.0, 1.0, 0).unwrap();
        let t = TensorBasis::new(vec![b.clone(), b]).unwrap();
        assert_eq!(t.eval(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_matches_nested_loops() {
        let a = BSplineBasis1D::uniform(3, 0.0, 1.0, 1).unwrap();
        let b = BSplineBasis1D::uniform(2, -1.0, 2.0, 2).unwrap();
        let c = BSplineBasis1D::uniform(1, 0.0, 1.0, 0).unwrap();
        let t = TensorBasis::new(vec![a.clone(), b.clone(), c.clone()]).unwrap();
        let x = [0.37, 1.4, 0.81];
        let (va, vb, vc) = (
            a.eval(x[0]).unwrap(),
            b.eval(x[1]).unwrap(),
            c.eval(x[2]).unwrap(),
        );
        let mut want = Vec::new();
        for p in &va {
            for q in &vb {
                for r in &vc {
                    want.push(p * q * r);
                }
            }
        }
        let got = t.eval(&x).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!(t.eval(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn action_history_round_trip() {
        let idx = ActionHistoryIndex::new(vec![2, 3, 2]).unwrap();
        assert_eq!(idx.size(), 12);
        for i in 0..12 {
            assert_eq!(idx.encode(&idx.decode(i).unwrap()).unwrap(), i);
        }
        assert!(idx.encode(&[0, 3, 0]).is_err());
        assert_eq!(idx.encode_extended(&[1, 2], 1).unwrap(), 11);
    }

    #[test]
    fn phi_blocks() {
        let t = TensorBasis::for_boxes(&[&StateBox::unit(1)], 3).unwrap();
        let single = ActionHistoryIndex::new(vec![1]).unwrap();
        let phi = phi_features(&t, &single, &[0.3], &[0]).unwrap();
        assert_eq!(phi.to_dense(), t.eval(&[0.3]).unwrap());

        let two = ActionHistoryIndex::new(vec![2]).unwrap();
        let phi = phi_features(&t, &two, &[0.3], &[1]).unwrap();
        let ups = t.eval(&[0.3]).unwrap();
        // dense Kronecker with e_1 = (0, 1)
        let e = [0.0, 1.0];
        let want: Vec<f64> = e
            .iter()
            .flat_map(|ei| ups.iter().map(move |u| ei * u))
            .collect();
        assert_eq!(phi.to_dense(), want);
        assert!((phi.l1_norm() - 1.0).abs() < 1e-12);
        assert!(phi_features(&t, &two, &[0.3], &[2]).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_locality(
            degree in 1usize..4,
            n_interior in 0usize..6,
            x in 0.0f64..=1.0,
        ) {
            let b = BSplineBasis1D::uniform(degree, 0.0, 1.0, n_interior).unwrap();
            let v = b.eval(x).unwrap();
            prop_assert_eq!(v.len(), degree + 1 + n_interior);
            prop_assert!(v.iter().all(|&u| u >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().filter(|&&u| u != 0.0).count() <= degree + 1);
        }

        #[test]
        fn cox_de_boor_agreement(
            degree in 1usize..4,
            n_interior in 0usize..4,
            x in 0.0f64..=1.0,
        ) {
            let b = BSplineBasis1D::uniform(degree, 0.0, 1.0, n_interior).unwrap();
            let v = b.eval(x).unwrap();
            for (i, got) in v.iter().enumerate() {
                let want = cox_de_boor(b.knots(), i, degree, x, b.size());
                prop_assert!((got - want).abs() < 1e-12);
            }
        }

        #[test]
        fn phi_blocks_are_orthogonal(
            x in 0.0f64..=1.0, y in 0.0f64..=1.0, a in 0usize..4, b in 0usize..4,
        ) {
            let t = TensorBasis::for_boxes(&[&StateBox::unit(1)], 4).unwrap();
            let idx = ActionHistoryIndex::new(vec![2, 2]).unwrap();
            let pa = phi_features(&t, &idx, &[x], &idx.decode(a).unwrap()).unwrap();
            let pb = phi_features(&t, &idx, &[y], &idx.decode(b).unwrap()).unwrap();
            if a != b {
                prop_assert_eq!(pa.dot(&pb), 0.0);
                let dense: f64 = pa.to_dense().iter().zip(pb.to_dense()).map(|(u, v)| u * v).sum();
                prop_assert_eq!(dense, 0.0);
            }
        }
    }
}
