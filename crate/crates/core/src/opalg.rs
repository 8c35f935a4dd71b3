//! Interval-anchored operator algebra on the spin chain.
//!
//! Every operator is a dense complex matrix attached to a contiguous block
//! of sites. The basis convention is fixed once, here, and everything else
//! in the crate depends on it:
//!
//! * basis states of a support `[lo, hi]` are labeled by bitstrings read
//!   left to right, site `lo` being the most significant bit;
//! * bit value 0 corresponds to the Z eigenvalue +1 (spin up).
//!
//! Supports are always intervals, so embedding one operator into a larger
//! support is identity-tensoring on both sides and never needs a basis
//! permutation.

use crate::linalg::{self, C64, Mat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for validating the Hermiticity flag.
pub const HERMITICITY_RTOL: f64 = 1e-12;
/// A commutator result with norm below `ZERO_TOL_PER_DIM * dim` is reported
/// as a canonical zero.
pub const ZERO_TOL_PER_DIM: f64 = 1e-14;
/// Default cap on the number of sites that may be densified to the full
/// 2^N space.
pub const DEFAULT_DENSE_CAP: usize = 14;

#[derive(Debug, Error)]
pub enum OpalgError {
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: usize, hi: usize },
    #[error("interval [{lo}, {hi}] does not fit a chain of {n} sites")]
    OutOfChain { lo: usize, hi: usize, n: usize },
    #[error("matrix dimension {dim} does not match 2^{len} for support of length {len}")]
    DimensionMismatch { dim: usize, len: usize },
    #[error("operator flagged Hermitian but ‖M − M†‖ = {defect:.3e} exceeds {tol:.3e}")]
    NotHermitian { defect: f64, tol: f64 },
    #[error("support [{op_lo}, {op_hi}] not contained in target [{t_lo}, {t_hi}]")]
    SupportNotContained { op_lo: usize, op_hi: usize, t_lo: usize, t_hi: usize },
    #[error("dense materialization of {n} sites exceeds the cap of {cap}")]
    DenseCap { n: usize, cap: usize },
    #[error("operator sums over different chain lengths: {a} vs {b}")]
    ChainMismatch { a: usize, b: usize },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Closed interval of sites, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    lo: usize,
    hi: usize,
}

impl Interval {
    pub fn new(lo: usize, hi: usize) -> Result<Self, OpalgError> {
        if lo == 0 || hi < lo {
            return Err(OpalgError::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn site(i: usize) -> Self {
        Self { lo: i, hi: i }
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains_site(&self, i: usize) -> bool {
        self.lo <= i && i <= self.hi
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo.max(other.lo) <= self.hi.min(other.hi)
    }

    /// Smallest interval covering both; only meaningful when they intersect
    /// or are adjacent, which all callers guarantee.
    pub fn union(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    /// Number of lattice steps between the intervals; 0 when they intersect.
    pub fn dist(&self, other: &Interval) -> usize {
        if self.intersects(other) {
            0
        } else if self.hi < other.lo {
            other.lo - self.hi
        } else {
            self.lo - other.hi
        }
    }

    /// Clip to a chain of `n` sites. Returns `None` when nothing remains.
    /// Clipping is always explicit at call sites, never silent.
    pub fn clip(&self, n: usize) -> Option<Interval> {
        let lo = self.lo.max(1);
        let hi = self.hi.min(n);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    /// Fatten by `r` sites on each side and clip to the chain.
    pub fn fatten(&self, r: usize, n: usize) -> Interval {
        Interval {
            lo: self.lo.saturating_sub(r).max(1),
            hi: (self.hi + r).min(n),
        }
    }
}

/// Dense operator on the tensor factor of its support interval.
#[derive(Debug, Clone)]
pub struct LocalOperator {
    support: Interval,
    matrix: Mat,
    hermitian: bool,
}

impl LocalOperator {
    pub fn new(support: Interval, matrix: Mat) -> Result<Self, OpalgError> {
        let dim = 1usize << support.len();
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(OpalgError::DimensionMismatch { dim: matrix.nrows(), len: support.len() });
        }
        Ok(Self { support, matrix, hermitian: false })
    }

    /// Construct with the Hermiticity flag set; the flag is validated.
    pub fn hermitian(support: Interval, matrix: Mat) -> Result<Self, OpalgError> {
        let mut op = Self::new(support, matrix)?;
        let defect = linalg::hermiticity_defect(&op.matrix);
        let tol = HERMITICITY_RTOL * linalg::frobenius(&op.matrix).max(1e-300);
        if defect > tol && defect > 1e-300 {
            return Err(OpalgError::NotHermitian { defect, tol });
        }
        op.hermitian = true;
        Ok(op)
    }

    pub fn support(&self) -> Interval {
        self.support
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn is_hermitian_flagged(&self) -> bool {
        self.hermitian
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scaled(&self, c: f64) -> LocalOperator {
        LocalOperator {
            support: self.support,
            matrix: self.matrix.mapv(|z| z * c),
            hermitian: self.hermitian,
        }
    }

    pub fn add(&self, other: &LocalOperator) -> Result<LocalOperator, OpalgError> {
        let target = self.support.union(&other.support);
        let a = embed(self, target)?;
        let b = embed(other, target)?;
        Ok(LocalOperator {
            support: target,
            matrix: &a.matrix + &b.matrix,
            hermitian: self.hermitian && other.hermitian,
        })
    }

    /// Single-site Pauli Z at site `i`.
    pub fn pauli_z(i: usize) -> LocalOperator {
        let m = ndarray::arr2(&[
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)],
        ]);
        LocalOperator { support: Interval::site(i), matrix: m, hermitian: true }
    }

    /// Single-site Pauli X at site `i`.
    pub fn pauli_x(i: usize) -> LocalOperator {
        let m = ndarray::arr2(&[
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        ]);
        LocalOperator { support: Interval::site(i), matrix: m, hermitian: true }
    }

    /// Single-site Pauli Y at site `i`.
    pub fn pauli_y(i: usize) -> LocalOperator {
        let m = ndarray::arr2(&[
            [C64::new(0.0, 0.0), C64::new(0.0, -1.0)],
            [C64::new(0.0, 1.0), C64::new(0.0, 0.0)],
        ]);
        LocalOperator { support: Interval::site(i), matrix: m, hermitian: true }
    }
}

/// Tensor the operator with identities so it lives on `target`.
///
/// Supports are contiguous, so this is `I ⊗ M ⊗ I` in the fixed bit order
/// and the spectral norm is unchanged.
pub fn embed(op: &LocalOperator, target: Interval) -> Result<LocalOperator, OpalgError> {
    if !target.contains(&op.support) {
        return Err(OpalgError::SupportNotContained {
            op_lo: op.support.lo,
            op_hi: op.support.hi,
            t_lo: target.lo,
            t_hi: target.hi,
        });
    }
    if target == op.support {
        return Ok(op.clone());
    }
    let left_bits = op.support.lo - target.lo;
    let right_bits = target.hi - op.support.hi;
    let kd = op.dim();
    let ld = 1usize << left_bits;
    let rd = 1usize << right_bits;
    let dim = 1usize << target.len();
    let mut out = Mat::zeros((dim, dim));
    for l in 0..ld {
        let lbase = l << (op.support.len() + right_bits);
        for a in 0..kd {
            for b in 0..kd {
                let v = op.matrix[(a, b)];
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                let ra = lbase + (a << right_bits);
                let rb = lbase + (b << right_bits);
                for r in 0..rd {
                    out[(ra + r, rb + r)] = v;
                }
            }
        }
    }
    Ok(LocalOperator { support: target, matrix: out, hermitian: op.hermitian })
}

/// Commutator `[a, b]` on the union support, or a canonical zero.
///
/// Disjoint supports commute exactly and short-circuit. A computed result
/// whose max entry is below `ZERO_TOL_PER_DIM * dim` also collapses to zero.
pub fn commutator(a: &LocalOperator, b: &LocalOperator) -> Option<LocalOperator> {
    if !a.support.intersects(&b.support) {
        return None;
    }
    let target = a.support.union(&b.support);
    let ae = embed(a, target).expect("union contains operand");
    let be = embed(b, target).expect("union contains operand");
    let ab = linalg::matmul(&ae.matrix, &be.matrix);
    let ba = linalg::matmul(&be.matrix, &ae.matrix);
    let m = &ab - &ba;
    let dim = m.nrows() as f64;
    if linalg::max_abs(&m) <= ZERO_TOL_PER_DIM * dim {
        return None;
    }
    debug_assert!({
        let lhs = linalg::frobenius(&m);
        let bound = 2.0 * linalg::frobenius(&ae.matrix) * linalg::frobenius(&be.matrix);
        lhs <= bound * (1.0 + 1e-12) + 1e-300
    });
    Some(LocalOperator { support: target, matrix: m, hermitian: false })
}

/// Largest singular value; for flagged-Hermitian input, max |eigenvalue|.
pub fn spectral_norm(op: &LocalOperator) -> f64 {
    let norm = if op.hermitian {
        linalg::spectral_norm_hermitian(&op.matrix)
    } else {
        linalg::spectral_norm_general(&op.matrix)
    };
    norm.expect("dense eigensolver failed on a finite matrix")
}

/// Split into the Z-basis diagonal part and the rest. The parts sum back to
/// the input exactly, and the diagonal obeys the Schur bound
/// `‖diag(M)‖ ≤ ‖M‖`.
pub fn diagonal_split(op: &LocalOperator) -> (LocalOperator, LocalOperator) {
    let dim = op.dim();
    let mut d = Mat::zeros((dim, dim));
    let mut off = op.matrix.clone();
    for i in 0..dim {
        d[(i, i)] = op.matrix[(i, i)];
        off[(i, i)] = C64::new(0.0, 0.0);
    }
    let diag = LocalOperator { support: op.support, matrix: d, hermitian: op.hermitian };
    let offd = LocalOperator { support: op.support, matrix: off, hermitian: op.hermitian };
    (diag, offd)
}

/// Key addressing one local term inside an [`OperatorSum`]: the anchor site
/// and an integer tag (scale index for the diagonalization scheme, 0 for
/// bare Hamiltonian terms).
pub type TermKey = (u32, usize);

/// Sum of local operators over a chain of `n_sites` spins, keyed by
/// `(tag, anchor)`. Insertion with an existing key merges by matrix addition
/// (supports must then coincide).
#[derive(Debug, Clone, Default)]
pub struct OperatorSum {
    n_sites: usize,
    terms: std::collections::BTreeMap<TermKey, LocalOperator>,
}

impl OperatorSum {
    pub fn new(n_sites: usize) -> Self {
        Self { n_sites, terms: Default::default() }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn push(&mut self, tag: u32, anchor: usize, op: LocalOperator) -> Result<(), OpalgError> {
        if op.support.hi > self.n_sites {
            return Err(OpalgError::OutOfChain {
                lo: op.support.lo,
                hi: op.support.hi,
                n: self.n_sites,
            });
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry((tag, anchor)) {
            Entry::Vacant(v) => {
                v.insert(op);
            }
            Entry::Occupied(mut o) => {
                let merged = o.get().add(&op)?;
                o.insert(merged);
            }
        }
        Ok(())
    }

    pub fn get(&self, tag: u32, anchor: usize) -> Option<&LocalOperator> {
        self.terms.get(&(tag, anchor))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TermKey, &LocalOperator)> {
        self.terms.iter()
    }

    /// Sum of embeddings into the full 2^N space.
    pub fn to_dense(&self, cap: usize) -> Result<Mat, OpalgError> {
        if self.n_sites > cap {
            return Err(OpalgError::DenseCap { n: self.n_sites, cap });
        }
        let dim = 1usize << self.n_sites;
        let mut acc = Mat::zeros((dim, dim));
        for (_, op) in self.terms.iter() {
            let s = op.support;
            for a in 0..op.dim() {
                for b in 0..op.dim() {
                    let v = op.matrix[(a, b)];
                    if v == C64::new(0.0, 0.0) {
                        continue;
                    }
                    add_embedded_entry(&mut acc, self.n_sites, s, a, b, v);
                }
            }
        }
        Ok(acc)
    }

    /// Pointwise sum of two operator sums on the same chain; tags are kept.
    pub fn merged(&self, other: &OperatorSum) -> Result<OperatorSum, OpalgError> {
        if self.n_sites != other.n_sites {
            return Err(OpalgError::ChainMismatch { a: self.n_sites, b: other.n_sites });
        }
        let mut out = self.clone();
        for (&(tag, anchor), op) in other.terms.iter() {
            out.push(tag, anchor, op.clone())?;
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> OperatorSum {
        let mut out = OperatorSum::new(self.n_sites);
        for (&(tag, anchor), op) in self.terms.iter() {
            out.terms.insert((tag, anchor), op.scaled(c));
        }
        out
    }
}

fn add_embedded_entry(acc: &mut Mat, n_sites: usize, s: Interval, a: usize, b: usize, v: C64) {
    let right_bits = n_sites - s.hi;
    let left_bits = s.lo - 1;
    let ld = 1usize << left_bits;
    let rd = 1usize << right_bits;
    let klen = s.len();
    for l in 0..ld {
        let lbase = l << (klen + right_bits);
        let ra = lbase + (a << right_bits);
        let rb = lbase + (b << right_bits);
        for r in 0..rd {
            acc[(ra + r, rb + r)] += v;
        }
    }
}

/// Telescoped locality profile of a full-space operator around a base
/// interval: `t_r` is the norm of the layer supported on the r-fattening of
/// the base but not resolvable on the (r-1)-fattening.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailProfile {
    pub base: Interval,
    pub tail_norms: Vec<f64>,
}

impl TailProfile {
    /// Fitted decay rate per site from a least-squares line through
    /// `log t_r` over the layers above `floor`; `None` when fewer than two
    /// layers stand above the floor.
    pub fn decay_rate(&self, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .tail_norms
            .iter()
            .enumerate()
            .filter(|(_, &t)| t > floor)
            .map(|(r, &t)| (r as f64, t.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        (denom.abs() > 1e-30).then(|| -(n * sxy - sx * sy) / denom)
    }
}

/// Decompose a full-space operator into layers around `base` by telescoping
/// normalized partial traces, and record the layer norms.
///
/// Layer 0 is the trace onto the base itself; layer r is the trace onto the
/// r-fattening minus the trace onto the (r-1)-fattening. The layers sum back
/// to the operator exactly once the fattening covers the chain.
pub fn tail_profile(full: &Mat, n_sites: usize, base: Interval) -> TailProfile {
    let hermitian = linalg::hermiticity_defect(full) <= 1e-10 * linalg::frobenius(full).max(1e-300);
    let mut tail_norms = Vec::new();
    let mut prev: Option<Mat> = None;
    let mut r = 0usize;
    loop {
        let fat = base.fatten(r, n_sites);
        let reduced = linalg::normalized_partial_trace(full, n_sites, fat.lo(), fat.hi());
        let layer_dense = match &prev {
            None => linalg::embed_block(&reduced, n_sites, fat.lo(), fat.hi()),
            Some(p) => {
                let cur = linalg::embed_block(&reduced, n_sites, fat.lo(), fat.hi());
                &cur - p
            }
        };
        let norm = if hermitian {
            linalg::spectral_norm_hermitian(&layer_dense)
        } else {
            linalg::spectral_norm_general(&layer_dense)
        }
        .expect("norm of finite layer");
        tail_norms.push(norm);
        prev = Some(linalg::embed_block(&reduced, n_sites, fat.lo(), fat.hi()));
        if fat.lo() == 1 && fat.hi() == n_sites {
            break;
        }
        r += 1;
    }
    TailProfile { base, tail_norms }
}
