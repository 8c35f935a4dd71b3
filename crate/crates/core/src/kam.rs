//! Inductive quasi-diagonalization of the disordered chain.
//!
//! Scale by scale, the scheme assembles the local terms `F_i` at order m
//! from nested commutators of lower-scale generators, splits each into a
//! Z-diagonal part `D_i`, a resonant part kept as `W_res_i`, and a
//! non-resonant part `W_nonres_i`, and eliminates the latter through the
//! generator `A_i` obtained by dividing matrix elements by classical energy
//! differences. After `n*` scales,
//!
//! `e^A H e^{-A} = H0 + Σ_m J^m D^(m) + Σ_m J^m W^(m,res) + δH`,
//!
//! and the remainder `δH` is computed exactly on the full space by unitary
//! conjugation, never by series truncation.

use crate::linalg::{self, Mat};
use crate::model::{self, ChainParams, FieldRealization, ResonanceMap};
use crate::opalg::{self, Interval, LocalOperator, OperatorSum};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

/// Relative tolerance on the per-anchor elimination identity
/// `W_nonres + [A, H0] = 0`.
pub const ELIMINATION_RTOL: f64 = 1e-10;
/// Relative tolerance for anti-Hermiticity of generators.
pub const ANTIHERM_RTOL: f64 = 1e-12;
/// Unitarity tolerance for the dense `e^A`.
pub const UNITARITY_TOL: f64 = 1e-10;
/// Assembled per-anchor terms below `1e-16 * J^m` in Frobenius norm are
/// dropped and counted.
pub const DROP_FACTOR: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum KamError {
    #[error("scale {missing} required before scale {requested}")]
    MissingScale { missing: usize, requested: usize },
    #[error("internal consistency: {0}")]
    Inconsistency(String),
    #[error(transparent)]
    Opalg(#[from] opalg::OpalgError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Per-anchor operators of one scale; absent entries are exact zeros.
#[derive(Debug, Clone, Default)]
pub struct AnchorData {
    pub f: Option<LocalOperator>,
    pub d: Option<LocalOperator>,
    pub w_res: Option<LocalOperator>,
    pub w_nonres: Option<LocalOperator>,
    pub a: Option<LocalOperator>,
}

#[derive(Debug, Clone)]
pub struct ScaleData {
    pub m: usize,
    pub anchors: BTreeMap<usize, AnchorData>,
}

/// Norm bookkeeping for one `(m, i)` pair: the measured `‖F‖` against the
/// factorial-combinatorial envelope `m!^3 K^{m-1}`.
#[derive(Debug, Clone, Serialize)]
pub struct NormRecord {
    pub m: usize,
    pub anchor: usize,
    pub f_norm: f64,
    pub f_bound: f64,
    pub violated: bool,
    pub a_norm: f64,
    pub resonant: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub norm_table: Vec<NormRecord>,
    pub dropped_terms: usize,
    pub bound_violations: usize,
    pub max_elimination_residual: f64,
}

/// Dense full-space oracle data, present when the chain fits the cap.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    /// `H = H0 + J V` on the full space.
    pub h: Mat,
    /// `e^A` with `A = Σ_m J^m A^(m)` embedded.
    pub exp_a: Mat,
    /// `e^A H e^{-A}`.
    pub h_prime: Mat,
    /// `H0 + Σ J^m D^(m) + Σ J^m W^(m,res)` on the full space.
    pub pieces: Mat,
    /// `δH = h_prime - pieces`, exact.
    pub remainder: Mat,
    pub remainder_norm: f64,
    pub unitarity_defect: f64,
}

#[derive(Debug, Clone)]
pub struct KamOutput {
    pub n_star: usize,
    pub coupling: f64,
    pub delta: f64,
    pub scales: Vec<ScaleData>,
    pub resonance: ResonanceMap,
    pub h0: OperatorSum,
    pub v: OperatorSum,
    pub diagnostics: Diagnostics,
    pub dense: Option<DenseOracle>,
}

impl KamOutput {
    pub fn scale(&self, m: usize) -> &ScaleData {
        &self.scales[m - 1]
    }

    /// The generator `A = Σ_m J^m A^(m)` as an operator sum (tag = scale).
    pub fn generator(&self) -> OperatorSum {
        let mut sum = OperatorSum::new(self.h0.n_sites());
        for scale in &self.scales {
            let jm = self.coupling.powi(scale.m as i32);
            for (&i, data) in &scale.anchors {
                if let Some(a) = &data.a {
                    sum.push(scale.m as u32, i, a.scaled(jm)).expect("in chain");
                }
            }
        }
        sum
    }

    /// `H0 + Σ J^m D^(m) + Σ J^m W^(m,res)` as an operator sum.
    pub fn effective_pieces(&self) -> OperatorSum {
        let mut sum = self.h0.clone();
        for scale in &self.scales {
            let jm = self.coupling.powi(scale.m as i32);
            for (&i, data) in &scale.anchors {
                if let Some(d) = &data.d {
                    sum.push(scale.m as u32, i, d.scaled(jm)).expect("in chain");
                }
                if let Some(w) = &data.w_res {
                    sum.push(scale.m as u32, i, w.scaled(jm)).expect("in chain");
                }
            }
        }
        sum
    }

    /// Summary rows (scale, anchor, norms, flags) for serialization; the
    /// dense remainder itself is never serialized.
    pub fn norm_table(&self) -> &[NormRecord] {
        &self.diagnostics.norm_table
    }
}

/// Ordered compositions `(m_1, ..., m_k)` of `total` into `k` parts, each in
/// `[1, max_part]`, lexicographic.
fn compositions(total: usize, k: usize, max_part: usize) -> Vec<Vec<usize>> {
    fn rec(total: usize, k: usize, max_part: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 0 {
            if total == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        let lo = 1usize;
        let hi = max_part.min(total.saturating_sub(k - 1));
        for part in lo..=hi {
            prefix.push(part);
            rec(total - part, k - 1, max_part, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, k, max_part, &mut Vec::new(), &mut out);
    out
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product::<f64>().max(1.0)
}

struct TermSink {
    per_anchor: BTreeMap<usize, LocalOperator>,
    dropped: usize,
    drop_threshold: f64,
}

impl TermSink {
    fn add(&mut self, anchor: usize, op: LocalOperator, coeff: f64) -> Result<(), KamError> {
        let scaled = op.scaled(coeff);
        if linalg::frobenius(scaled.matrix()) < self.drop_threshold {
            self.dropped += 1;
            return Ok(());
        }
        use std::collections::btree_map::Entry;
        match self.per_anchor.entry(anchor) {
            Entry::Vacant(v) => {
                v.insert(scaled);
            }
            Entry::Occupied(mut o) => {
                let merged = o.get().add(&scaled)?;
                o.insert(merged);
            }
        }
        Ok(())
    }
}

/// Recursively extend the nested commutator with generators of scales
/// `comp[depth..]`, anchors constrained to overlap the running union
/// interval; finished branches are recorded under the minimal anchor.
#[allow(clippy::too_many_arguments)]
fn extend_nested(
    comp: &[usize],
    depth: usize,
    current: &LocalOperator,
    union: Interval,
    min_anchor: usize,
    coeff: f64,
    lower: &[ScaleData],
    params: &ChainParams,
    sink: &mut TermSink,
) -> Result<(), KamError> {
    if depth == comp.len() {
        sink.add(min_anchor, current.clone(), coeff)?;
        return Ok(());
    }
    let mp = comp[depth];
    let scale = &lower[mp - 1];
    // anchors whose scale-mp interval meets the union: [union.lo - mp R + 1, union.hi]
    let lo = union.lo().saturating_sub(mp * params.range - 1).max(1);
    let hi = union.hi().min(params.n_sites);
    for (&ip, data) in scale.anchors.range(lo..=hi) {
        let Some(a) = &data.a else { continue };
        let s_ip = params.scale_interval(ip, mp);
        if !s_ip.intersects(&union) {
            continue;
        }
        let Some(next) = opalg::commutator(a, current) else { continue };
        extend_nested(
            comp,
            depth + 1,
            &next,
            union.union(&s_ip),
            min_anchor.min(ip),
            coeff,
            lower,
            params,
            sink,
        )?;
    }
    Ok(())
}

/// Per-anchor `F^(m)_i` from the two nested-commutator sums.
///
/// The first sum starts from `-W^(m_1,nonres)_{i_1}`, the exact collapse of
/// the innermost `[A^(m_1), (H0)_{i_0}]` commutator summed over `i_0`; the
/// second starts from the bare perturbation terms. Enumeration order is
/// ascending k, then lexicographic compositions and anchor tuples, which
/// pins the floating-point summation order.
pub fn compute_f(
    m: usize,
    lower: &[ScaleData],
    v: &OperatorSum,
    params: &ChainParams,
) -> Result<(BTreeMap<usize, LocalOperator>, usize), KamError> {
    for mp in 1..m {
        if lower.len() < mp || lower[mp - 1].m != mp {
            return Err(KamError::MissingScale { missing: mp, requested: m });
        }
    }
    let mut sink = TermSink {
        per_anchor: BTreeMap::new(),
        dropped: 0,
        drop_threshold: DROP_FACTOR * params.coupling.powi(m as i32),
    };
    if m == 1 {
        for (&(_, anchor), vi) in v.iter() {
            sink.add(anchor, vi.clone(), 1.0)?;
        }
        let out = sink.per_anchor;
        return Ok((out, 0));
    }
    // first sum, collapsed: k = 2..m, parts sum to m
    for k in 2..=m {
        let coeff = -1.0 / factorial(k);
        for comp in compositions(m, k, m - 1) {
            let m1 = comp[0];
            let scale1 = &lower[m1 - 1];
            for (&i1, data) in &scale1.anchors {
                let Some(w) = &data.w_nonres else { continue };
                let union = params.scale_interval(i1, m1);
                extend_nested(&comp[1..], 0, w, union, i1, coeff, lower, params, &mut sink)?;
            }
        }
    }
    // second sum: k = 1..m-1, parts sum to m-1, applied to V
    for k in 1..=(m - 1) {
        let coeff = 1.0 / factorial(k);
        for comp in compositions(m - 1, k, m - 1) {
            for (&(_, i0), vi) in v.iter() {
                let union = vi.support();
                extend_nested(&comp, 0, vi, union, i0, coeff, lower, params, &mut sink)?;
            }
        }
    }
    // support containment: F^(m)_i lives inside S_i^(m)
    for (&i, op) in &sink.per_anchor {
        let s = params.scale_interval(i, m);
        if !s.contains(&op.support()) {
            return Err(KamError::Inconsistency(format!(
                "F^({m})_{i} escaped its interval: support [{}, {}] vs [{}, {}]",
                op.support().lo(),
                op.support().hi(),
                s.lo(),
                s.hi()
            )));
        }
    }
    let dropped = sink.dropped;
    Ok((sink.per_anchor, dropped))
}

/// Reference evaluation of `F^(m)_i` from the uncollapsed expansion, where
/// the innermost commutator runs over the on-site field terms explicitly.
/// Slow; retained for cross-checking the collapsed form.
pub fn compute_f_uncollapsed(
    m: usize,
    lower: &[ScaleData],
    h0: &OperatorSum,
    v: &OperatorSum,
    params: &ChainParams,
) -> Result<BTreeMap<usize, LocalOperator>, KamError> {
    assert!(m >= 2);
    let mut sink = TermSink {
        per_anchor: BTreeMap::new(),
        dropped: 0,
        drop_threshold: 0.0,
    };
    for k in 2..=m {
        let coeff = 1.0 / factorial(k);
        for comp in compositions(m, k, m - 1) {
            for (&(_, i0), h0_term) in h0.iter() {
                let union = h0_term.support();
                extend_nested(&comp, 0, h0_term, union, i0, coeff, lower, params, &mut sink)?;
            }
        }
    }
    for k in 1..=(m - 1) {
        let coeff = 1.0 / factorial(k);
        for comp in compositions(m - 1, k, m - 1) {
            for (&(_, i0), vi) in v.iter() {
                let union = vi.support();
                extend_nested(&comp, 0, vi, union, i0, coeff, lower, params, &mut sink)?;
            }
        }
    }
    Ok(sink.per_anchor)
}

/// Split `F_i` into `(D_i, W_res_i, W_nonres_i)` according to the resonance
/// decision for its interval. The three parts reconstruct `F_i` exactly;
/// the Schur bound `‖D‖ ≤ ‖F‖` and `‖W‖ ≤ 2‖F‖` are asserted.
pub fn split_f(
    f_i: &LocalOperator,
    resonant: bool,
) -> Result<(Option<LocalOperator>, Option<LocalOperator>, Option<LocalOperator>), KamError> {
    let (d, off) = opalg::diagonal_split(f_i);
    let f_norm = opalg::spectral_norm(&hermitize(f_i)?);
    let d_norm = opalg::spectral_norm(&hermitize(&d)?);
    let off_norm = opalg::spectral_norm(&hermitize(&off)?);
    if d_norm > f_norm * (1.0 + 1e-10) + 1e-14 {
        return Err(KamError::Inconsistency(format!(
            "diagonal part norm {d_norm:.3e} exceeds ‖F‖ = {f_norm:.3e}"
        )));
    }
    if off_norm > 2.0 * f_norm * (1.0 + 1e-10) + 1e-14 {
        return Err(KamError::Inconsistency(format!(
            "off-diagonal part norm {off_norm:.3e} exceeds 2‖F‖ = {:.3e}",
            2.0 * f_norm
        )));
    }
    let d = (linalg::max_abs(d.matrix()) > 0.0).then_some(d);
    let off = (linalg::max_abs(off.matrix()) > 0.0).then_some(off);
    Ok(match (resonant, off) {
        (true, off) => (d, off, None),
        (false, off) => (d, None, off),
    })
}

fn hermitize(op: &LocalOperator) -> Result<LocalOperator, KamError> {
    Ok(LocalOperator::hermitian(op.support(), op.matrix().clone())?)
}

/// Solve `W_nonres_i + [A_i, H0] = 0` on the support of `W_nonres_i`:
/// matrix elements divided by classical energy differences, zero diagonal.
///
/// Preconditions checked: every nonzero numerator sits over a denominator of
/// magnitude at least `2δ` (the interval was declared non-resonant), the
/// result is anti-Hermitian, and `‖A_i‖ ≤ (4/δ)‖F_i‖`.
pub fn solve_elimination(
    w_nonres: &LocalOperator,
    fields: &FieldRealization,
    delta: f64,
    f_norm: f64,
) -> Result<LocalOperator, KamError> {
    let support = w_nonres.support();
    let dim = w_nonres.dim();
    let wm = w_nonres.matrix();
    let w_scale = linalg::frobenius(wm);
    let numerator_floor = 1e-12 * (w_scale + 1e-300);
    let mut a = Mat::zeros((dim, dim));
    let energies: Vec<f64> = (0..dim).map(|idx| model::local_energy(fields, support, idx)).collect();
    for r in 0..dim {
        for c in 0..dim {
            if r == c {
                continue;
            }
            let num = wm[(r, c)];
            if num.norm() == 0.0 {
                continue;
            }
            let denom = energies[r] - energies[c];
            if num.norm() > numerator_floor && denom.abs() < 2.0 * delta - 1e-12 {
                return Err(KamError::Inconsistency(format!(
                    "elimination hit a resonant denominator |{denom:.3e}| < 2δ on a non-resonant interval [{}, {}]",
                    support.lo(),
                    support.hi()
                )));
            }
            a[(r, c)] = num / denom;
        }
    }
    let a_op = LocalOperator::new(support, a)?;
    // anti-Hermiticity: ‖A + A†‖ ≤ tol ‖A‖
    let anti = {
        let m = a_op.matrix();
        let md = linalg::dagger(m);
        linalg::frobenius(&(m + &md))
    };
    let a_scale = linalg::frobenius(a_op.matrix());
    if anti > ANTIHERM_RTOL * (a_scale + 1e-300) {
        return Err(KamError::Inconsistency(format!(
            "generator not anti-Hermitian: defect {anti:.3e} vs scale {a_scale:.3e}"
        )));
    }
    if delta > 0.0 {
        let a_norm = linalg::spectral_norm_general(a_op.matrix())?;
        let bound = 4.0 / delta * f_norm;
        if a_norm > bound * (1.0 + 1e-9) {
            return Err(KamError::Inconsistency(format!(
                "‖A_i‖ = {a_norm:.6e} exceeds (4/δ)‖F_i‖ = {bound:.6e}"
            )));
        }
    }
    Ok(a_op)
}

/// Residual of the elimination identity, relative to `‖W_nonres‖`.
pub fn elimination_residual(
    a: &LocalOperator,
    w_nonres: &LocalOperator,
    fields: &FieldRealization,
) -> f64 {
    let support = a.support();
    let dim = a.dim();
    let energies: Vec<f64> = (0..dim).map(|idx| model::local_energy(fields, support, idx)).collect();
    // [A, H0] restricted to the support is A(r,c) * (E_c - E_r)
    let mut resid = 0.0f64;
    for r in 0..dim {
        for c in 0..dim {
            let comm = a.matrix()[(r, c)] * (energies[c] - energies[r]);
            let d = w_nonres.matrix()[(r, c)] + comm;
            resid += d.norm_sqr();
        }
    }
    let w_norm = linalg::frobenius(w_nonres.matrix());
    resid.sqrt() / w_norm.max(1e-300)
}

/// Run the whole scheme: scales `1..=n*`, per-scale invariants validated,
/// norm surveillance recorded, dense oracle attached when `N` fits the cap.
pub fn run_scheme(params: &ChainParams, fields: &FieldRealization) -> Result<KamOutput, KamError> {
    let (h0, v) = model::build_hamiltonian(params, fields)?;
    let resonance = model::resonance_map(fields, params)?;
    let n_star = params.n_star();
    let delta = params.delta();
    let mut scales: Vec<ScaleData> = Vec::with_capacity(n_star);
    let mut diagnostics = Diagnostics::default();
    // K = 4 C1 R^2 / δ with C1 = 2 / ln(5/4)
    let c1 = 2.0 / (5.0f64 / 4.0).ln();
    let k_const = if delta > 0.0 { 4.0 * c1 * (params.range * params.range) as f64 / delta } else { f64::INFINITY };

    for m in 1..=n_star {
        let (f_map, dropped) = compute_f(m, &scales, &v, params)?;
        diagnostics.dropped_terms += dropped;
        let mut anchors: BTreeMap<usize, AnchorData> = BTreeMap::new();
        for (i, f_i) in f_map {
            let resonant = resonance.resonant(i, m);
            let f_i = hermitize(&f_i)?;
            let f_norm = opalg::spectral_norm(&f_i);
            let (d, w_res, w_nonres) = split_f(&f_i, resonant)?;
            let a = match &w_nonres {
                Some(w) => Some(solve_elimination(w, fields, delta, f_norm)?),
                None => None,
            };
            if let (Some(a_op), Some(w)) = (&a, &w_nonres) {
                let resid = elimination_residual(a_op, w, fields);
                diagnostics.max_elimination_residual = diagnostics.max_elimination_residual.max(resid);
                if resid > ELIMINATION_RTOL {
                    return Err(KamError::Inconsistency(format!(
                        "elimination residual {resid:.3e} at scale {m}, anchor {i}"
                    )));
                }
            }
            let f_bound = factorial(m).powi(3) * k_const.powi(m as i32 - 1);
            let a_norm = a.as_ref().map(|op| linalg::spectral_norm_general(op.matrix())).transpose()?.unwrap_or(0.0);
            let violated = f_norm > f_bound * (1.0 + 1e-9);
            if violated {
                diagnostics.bound_violations += 1;
            }
            diagnostics.norm_table.push(NormRecord {
                m,
                anchor: i,
                f_norm,
                f_bound,
                violated,
                a_norm,
                resonant,
            });
            anchors.insert(i, AnchorData { f: Some(f_i), d, w_res, w_nonres, a });
        }
        let scale = ScaleData { m, anchors };
        validate_scale(&scale, &resonance)?;
        scales.push(scale);
    }

    let mut output = KamOutput {
        n_star,
        coupling: params.coupling,
        delta,
        scales,
        resonance,
        h0,
        v,
        diagnostics,
        dense: None,
    };
    if params.n_sites <= params.caps.dense_cap {
        output.dense = Some(densify(&output, params)?);
    }
    Ok(output)
}

fn validate_scale(scale: &ScaleData, resonance: &ResonanceMap) -> Result<(), KamError> {
    for (&i, data) in &scale.anchors {
        let resonant = resonance.resonant(i, scale.m);
        if resonant && data.w_nonres.is_some() {
            return Err(KamError::Inconsistency(format!(
                "resonant anchor {i} at scale {} carries a non-resonant part",
                scale.m
            )));
        }
        if !resonant && data.w_res.is_some() {
            return Err(KamError::Inconsistency(format!(
                "non-resonant anchor {i} at scale {} carries a resonant part",
                scale.m
            )));
        }
        // exact three-way reconstruction
        if let Some(f) = &data.f {
            let mut acc = Mat::zeros((f.dim(), f.dim()));
            for part in [&data.d, &data.w_res, &data.w_nonres].into_iter().flatten() {
                let e = opalg::embed(part, f.support())?;
                acc = &acc + e.matrix();
            }
            let defect = linalg::frobenius(&(&acc - f.matrix()));
            if defect > 1e-13 * (1.0 + linalg::frobenius(f.matrix())) {
                return Err(KamError::Inconsistency(format!(
                    "F ≠ D + W_res + W_nonres at scale {}, anchor {i}: defect {defect:.3e}",
                    scale.m
                )));
            }
        }
        if let Some(a) = &data.a {
            for r in 0..a.dim() {
                if a.matrix()[(r, r)].norm() != 0.0 {
                    return Err(KamError::Inconsistency(format!(
                        "generator has a diagonal element at scale {}, anchor {i}",
                        scale.m
                    )));
                }
            }
        }
    }
    Ok(())
}

fn densify(output: &KamOutput, params: &ChainParams) -> Result<DenseOracle, KamError> {
    let cap = params.caps.dense_cap;
    let h0_dense = output.h0.to_dense(cap)?;
    let v_dense = output.v.to_dense(cap)?;
    let h = &h0_dense + &v_dense.mapv(|z| z * params.coupling);
    let a_dense = output.generator().to_dense(cap)?;
    let exp_a = linalg::exp_antihermitian(&a_dense)?;
    let defect = linalg::unitarity_defect(&exp_a);
    if defect > UNITARITY_TOL {
        return Err(KamError::Inconsistency(format!("e^A unitarity defect {defect:.3e}")));
    }
    let h_prime = conjugate_dense(&h, &exp_a, true);
    let pieces = output.effective_pieces().to_dense(cap)?;
    let remainder = &h_prime - &pieces;
    let remainder_norm = linalg::spectral_norm_hermitian(&remainder)?;
    Ok(DenseOracle {
        h,
        exp_a,
        h_prime,
        pieces,
        remainder,
        remainder_norm,
        unitarity_defect: defect,
    })
}

fn conjugate_dense(op: &Mat, exp_a: &Mat, forward: bool) -> Mat {
    if forward {
        let tmp = linalg::matmul(exp_a, op);
        linalg::matmul(&tmp, &linalg::dagger(exp_a))
    } else {
        let tmp = linalg::matmul(&linalg::dagger(exp_a), op);
        linalg::matmul(&tmp, exp_a)
    }
}

/// Reusable dense dressing `e^{±ad_A}` for one realization; unitarity is
/// verified once at construction.
#[derive(Debug, Clone)]
pub struct Dressing {
    exp_a: Mat,
    pub unitarity_defect: f64,
}

impl Dressing {
    pub fn new(generator: &OperatorSum, cap: usize) -> Result<Self, KamError> {
        let a_dense = generator.to_dense(cap)?;
        let exp_a = linalg::exp_antihermitian(&a_dense)?;
        let defect = linalg::unitarity_defect(&exp_a);
        if defect > UNITARITY_TOL {
            return Err(KamError::Inconsistency(format!("e^A unitarity defect {defect:.3e}")));
        }
        Ok(Self { exp_a, unitarity_defect: defect })
    }

    pub fn from_dense(exp_a: Mat) -> Self {
        let defect = linalg::unitarity_defect(&exp_a);
        Self { exp_a, unitarity_defect: defect }
    }

    pub fn exp_a(&self) -> &Mat {
        &self.exp_a
    }

    /// `e^{ad_A}(op) = e^A op e^{-A}`.
    pub fn forward(&self, op: &Mat) -> Mat {
        conjugate_dense(op, &self.exp_a, true)
    }

    /// `e^{-ad_A}(op) = e^{-A} op e^{A}`.
    pub fn backward(&self, op: &Mat) -> Mat {
        conjugate_dense(op, &self.exp_a, false)
    }
}

/// `e^{±A} op e^{∓A}` by dense matrix exponential of the embedded generator.
pub fn conjugate_exact(
    op: &Mat,
    generator: &OperatorSum,
    sign: i8,
    cap: usize,
) -> Result<Mat, KamError> {
    let dressing = Dressing::new(generator, cap)?;
    Ok(if sign >= 0 { dressing.forward(op) } else { dressing.backward(op) })
}

/// Exact remainder `δH = e^A H e^{-A} - (H0 + Σ J^m D + Σ J^m W_res)` on the
/// full space, with its norm and the `‖δH‖ / J^{n*+1}` scaling diagnostic.
pub fn remainder_exact(output: &KamOutput, params: &ChainParams) -> Result<(Mat, f64, f64), KamError> {
    let cap = params.caps.dense_cap;
    let h0_dense = output.h0.to_dense(cap)?;
    let v_dense = output.v.to_dense(cap)?;
    let h = &h0_dense + &v_dense.mapv(|z| z * params.coupling);
    let h_prime = conjugate_exact(&h, &output.generator(), 1, cap)?;
    let pieces = output.effective_pieces().to_dense(cap)?;
    let remainder = &h_prime - &pieces;
    let norm = linalg::spectral_norm_hermitian(&remainder)?;
    let scaled = norm / params.coupling.powi(output.n_star as i32 + 1);
    Ok((remainder, norm, scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, C64};
    use crate::model::{sample_fields, PerturbationSpec};

    fn params(n: usize, j: f64) -> ChainParams {
        ChainParams::new(n, 2, j, 0.5, 0.5).unwrap()
    }

    #[test]
    fn compositions_enumerate() {
        assert_eq!(compositions(3, 2, 2), vec![vec![1, 2], vec![2, 1]]);
        assert_eq!(compositions(2, 1, 1), Vec::<Vec<usize>>::new());
        assert_eq!(compositions(2, 2, 1), vec![vec![1, 1]]);
    }

    #[test]
    fn scale_one_is_the_perturbation() {
        let p = params(4, 0.05);
        let f = sample_fields(&p, 1);
        let (_, v) = model::build_hamiltonian(&p, &f).unwrap();
        let (fmap, _) = compute_f(1, &[], &v, &p).unwrap();
        for (&i, op) in &fmap {
            let vi = v.get(0, i).unwrap();
            assert_eq!(op.support(), vi.support());
            assert!(frobenius(&(op.matrix() - vi.matrix())) == 0.0);
        }
    }

    #[test]
    fn split_trivial_cases() {
        let z = LocalOperator::pauli_z(1);
        let (d, wr, wn) = split_f(&z, false).unwrap();
        assert!(d.is_some() && wr.is_none() && wn.is_none());
        let x = LocalOperator::pauli_x(1);
        let (d, wr, wn) = split_f(&x, true).unwrap();
        assert!(d.is_none() && wr.is_some() && wn.is_none());
        let zx = LocalOperator::pauli_z(1).add(&LocalOperator::pauli_x(1)).unwrap();
        let (d, wr, wn) = split_f(&zx, false).unwrap();
        assert!(d.is_some() && wr.is_none() && wn.is_some());
        assert!(frobenius(&(d.unwrap().matrix() - LocalOperator::pauli_z(1).matrix())) == 0.0);
        assert!(frobenius(&(wn.unwrap().matrix() - LocalOperator::pauli_x(1).matrix())) == 0.0);
    }

    #[test]
    fn elimination_single_site() {
        // V_i = X_i at h_i = 0.5: off-diagonal elements of A have magnitude 1
        let fields = FieldRealization {
            h: vec![0.5],
            seed: 0,
            rng_id: model::RNG_ID.into(),
        };
        let w = LocalOperator::pauli_x(1);
        let a = solve_elimination(&w, &fields, 0.3, 1.0).unwrap();
        assert!((a.matrix()[(0, 1)].norm() - 1.0).abs() < 1e-14);
        assert!((a.matrix()[(1, 0)].norm() - 1.0).abs() < 1e-14);
        assert!(elimination_residual(&a, &w, &fields) < 1e-14);
    }

    #[test]
    fn elimination_zero_gives_zero() {
        let fields = FieldRealization { h: vec![0.5], seed: 0, rng_id: model::RNG_ID.into() };
        let w = LocalOperator::new(Interval::site(1), Mat::zeros((2, 2))).unwrap();
        let a = solve_elimination(&w, &fields, 0.3, 0.0).unwrap();
        assert_eq!(frobenius(a.matrix()), 0.0);
    }

    #[test]
    fn elimination_commutator_on_full_space() {
        // [A, H0] + W = 0 verified densely for a random non-resonant interval
        let p = params(3, 0.05);
        let fields = FieldRealization {
            h: vec![0.91, 0.37, 0.62],
            seed: 0,
            rng_id: model::RNG_ID.into(),
        };
        let support = Interval::new(1, 2).unwrap();
        // Hermitian off-diagonal W on [1,2]
        let mut wm = Mat::zeros((4, 4));
        wm[(0, 3)] = C64::new(0.3, 0.1);
        wm[(3, 0)] = C64::new(0.3, -0.1);
        wm[(1, 2)] = C64::new(-0.2, 0.05);
        wm[(2, 1)] = C64::new(-0.2, -0.05);
        let w = LocalOperator::new(support, wm).unwrap();
        let a = solve_elimination(&w, &fields, 0.05, 1.0).unwrap();
        // dense commutator with the full H0
        let (h0, _) = model::build_hamiltonian(&p, &fields).unwrap();
        let h0d = h0.to_dense(14).unwrap();
        let mut asum = OperatorSum::new(3);
        asum.push(1, 1, a).unwrap();
        let ad = asum.to_dense(14).unwrap();
        let mut wsum = OperatorSum::new(3);
        wsum.push(1, 1, w).unwrap();
        let wd = wsum.to_dense(14).unwrap();
        let comm = &linalg::matmul(&ad, &h0d) - &linalg::matmul(&h0d, &ad);
        let resid = frobenius(&(&comm + &wd));
        assert!(resid < 1e-12 * frobenius(&wd), "residual {resid:.3e}");
    }

    #[test]
    fn scheme_at_tiny_coupling_is_trivial_in_the_limit() {
        // J -> 0 proxy: fully resonant override kills all elimination
        let mut p = params(4, 0.05);
        p.overrides.delta = Some(10.0); // everything resonant
        let f = sample_fields(&p, 3);
        let out = run_scheme(&p, &f).unwrap();
        for scale in &out.scales {
            for (_, data) in &scale.anchors {
                assert!(data.a.is_none());
                assert!(data.w_nonres.is_none());
            }
        }
        // nothing eliminated: e^A = 1 and H' = H exactly
        let dense = out.dense.as_ref().unwrap();
        assert!(frobenius(&(&dense.h_prime - &dense.h)) < 1e-12);
        assert!(dense.remainder_norm < 1e-12);
    }

    #[test]
    fn oracle_identity_small_chain() {
        let mut p = params(6, 0.05);
        p.overrides.n_star = Some(2);
        let f = sample_fields(&p, 17);
        let out = run_scheme(&p, &f).unwrap();
        let dense = out.dense.as_ref().unwrap();
        // identity holds by construction; recompute the conjugation
        // independently through conjugate_exact and compare
        let h_prime2 = conjugate_exact(&dense.h, &out.generator(), 1, 14).unwrap();
        let lhs = &h_prime2 - &(&dense.pieces + &dense.remainder);
        assert!(frobenius(&lhs) <= 1e-10 * frobenius(&dense.h), "defect {:.3e}", frobenius(&lhs));
        assert!(out.diagnostics.max_elimination_residual <= ELIMINATION_RTOL);
        // surveillance bound expected clean at desk scale
        assert_eq!(out.diagnostics.bound_violations, 0);
    }

    #[test]
    fn second_order_matches_brute_force_expansion() {
        // N=3, R=2, default preset, no resonances: the scale-2 coefficient
        // of e^{ad_A} H equals D2 + W2res densely, and F2 equals the
        // brute-force 1/2 [A1, V] when delta = 0
        let mut p = params(3, 0.05);
        p.overrides.n_star = Some(2);
        p.overrides.delta = Some(0.0);
        let f = FieldRealization {
            h: vec![0.83, 0.41, 0.66],
            seed: 0,
            rng_id: model::RNG_ID.into(),
        };
        let out = run_scheme(&p, &f).unwrap();
        let cap = 14;
        let h0d = out.h0.to_dense(cap).unwrap();
        let vd = out.v.to_dense(cap).unwrap();
        let mut a1 = OperatorSum::new(3);
        let mut a2 = OperatorSum::new(3);
        for (&i, data) in &out.scale(1).anchors {
            if let Some(a) = &data.a {
                a1.push(1, i, a.clone()).unwrap();
            }
        }
        for (&i, data) in &out.scale(2).anchors {
            if let Some(a) = &data.a {
                a2.push(2, i, a.clone()).unwrap();
            }
        }
        let a1d = a1.to_dense(cap).unwrap();
        let a2d = a2.to_dense(cap).unwrap();
        let comm = |x: &Mat, y: &Mat| &linalg::matmul(x, y) - &linalg::matmul(y, x);
        // G2 = 1/2 ad_{A1}^2 H0 + ad_{A1} V + ad_{A2} H0
        let g2 = &(&comm(&a1d, &comm(&a1d, &h0d)).mapv(|z| z * 0.5) + &comm(&a1d, &vd))
            + &comm(&a2d, &h0d);
        // scheme says G2 = D2 + W2res (densely)
        let mut d2w2 = OperatorSum::new(3);
        for (&i, data) in &out.scale(2).anchors {
            if let Some(d) = &data.d {
                d2w2.push(2, i, d.clone()).unwrap();
            }
            if let Some(w) = &data.w_res {
                d2w2.push(2, i, w.clone()).unwrap();
            }
        }
        let d2w2d = d2w2.to_dense(cap).unwrap();
        assert!(
            frobenius(&(&g2 - &d2w2d)) < 1e-11 * (1.0 + frobenius(&g2)),
            "G2 mismatch: {:.3e}",
            frobenius(&(&g2 - &d2w2d))
        );
        // F2 = 1/2 [A1, V] at delta = 0 (no resonant part, V has no diagonal)
        let mut f2 = OperatorSum::new(3);
        for (&i, data) in &out.scale(2).anchors {
            if let Some(fm) = &data.f {
                f2.push(2, i, fm.clone()).unwrap();
            }
        }
        let f2d = f2.to_dense(cap).unwrap();
        let half_comm = comm(&a1d, &vd).mapv(|z| z * 0.5);
        assert!(
            frobenius(&(&f2d - &half_comm)) < 1e-11 * (1.0 + frobenius(&f2d)),
            "F2 mismatch: {:.3e}",
            frobenius(&(&f2d - &half_comm))
        );
    }

    #[test]
    fn collapsed_matches_uncollapsed() {
        let mut p = params(5, 0.08);
        p.overrides.n_star = Some(3);
        let f = sample_fields(&p, 29);
        let out = run_scheme(&p, &f).unwrap();
        for m in 2..=3usize {
            let reference =
                compute_f_uncollapsed(m, &out.scales[..m - 1], &out.h0, &out.v, &p).unwrap();
            let (collapsed, _) = compute_f(m, &out.scales[..m - 1], &out.v, &p).unwrap();
            let all_anchors: std::collections::BTreeSet<usize> =
                reference.keys().chain(collapsed.keys()).copied().collect();
            for i in all_anchors {
                let dense = |map: &BTreeMap<usize, LocalOperator>| -> Mat {
                    map.get(&i)
                        .map(|op| {
                            let mut s = OperatorSum::new(5);
                            s.push(0, i, op.clone()).unwrap();
                            s.to_dense(14).unwrap()
                        })
                        .unwrap_or_else(|| Mat::zeros((32, 32)))
                };
                let d = frobenius(&(&dense(&reference) - &dense(&collapsed)));
                assert!(d < 1e-11, "anchor {i} scale {m} disagree by {d:.3e}");
            }
        }
    }

    #[test]
    fn dressing_inverse_pair_and_spectrum() {
        let p = params(4, 0.05);
        let f = sample_fields(&p, 5);
        let out = run_scheme(&p, &f).unwrap();
        let dense = out.dense.as_ref().unwrap();
        let gen = out.generator();
        let fwd = conjugate_exact(&dense.h, &gen, 1, 14).unwrap();
        let back = conjugate_exact(&fwd, &gen, -1, 14).unwrap();
        assert!(frobenius(&(&back - &dense.h)) < 1e-10 * frobenius(&dense.h));
        // unitary conjugation preserves the spectrum
        let ev_a = linalg::eigvalsh(&dense.h).unwrap();
        let ev_b = linalg::eigvalsh(&fwd).unwrap();
        for (a, b) in ev_a.iter().zip(ev_b.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // A = 0 leaves operators unchanged
        let id_gen = OperatorSum::new(4);
        let same = conjugate_exact(&dense.h, &id_gen, 1, 14).unwrap();
        assert!(frobenius(&(&same - &dense.h)) < 1e-13);
    }

    #[test]
    fn remainder_halves_with_coupling() {
        // fixed n* = 1, delta pinned small, non-resonant seed: halving J
        // shrinks the remainder by about 2^(n*+1) = 4
        let mut p1 = params(6, 0.04);
        p1.overrides.n_star = Some(1);
        p1.overrides.delta = Some(1e-9);
        let mut p2 = p1.clone();
        p2.coupling = 0.02;
        let f = sample_fields(&p1, 23);
        assert!(!model::resonance_map(&f, &p1).unwrap().any_resonant());
        let o1 = run_scheme(&p1, &f).unwrap();
        let o2 = run_scheme(&p2, &f).unwrap();
        let r1 = o1.dense.as_ref().unwrap().remainder_norm;
        let r2 = o2.dense.as_ref().unwrap().remainder_norm;
        let ratio = r1 / r2;
        assert!(
            ratio > 2.0 && ratio < 8.0,
            "remainder ratio {ratio:.3} not within a factor 2 of 4"
        );
    }

    #[test]
    fn transverse_preset_uses_scale_one_cartoon() {
        // n* = 1 with the pure transverse preset reproduces the first-order
        // generator: A^(1)_i matrix elements are V/(E - E')
        let mut p = ChainParams::new(3, 2, 0.05, 0.5, 0.5).unwrap();
        p.perturbation = PerturbationSpec::Transverse;
        p.range = 1;
        p.overrides.n_star = Some(1);
        let f = FieldRealization {
            h: vec![0.9, 0.45, 0.7],
            seed: 0,
            rng_id: model::RNG_ID.into(),
        };
        let out = run_scheme(&p, &f).unwrap();
        for (&i, data) in &out.scale(1).anchors {
            let a = data.a.as_ref().unwrap();
            let expect = 1.0 / (2.0 * f.h[i - 1]);
            assert!((a.matrix()[(0, 1)].norm() - expect).abs() < 1e-13);
        }
    }
}
