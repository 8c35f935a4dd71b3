//! The disordered chain: parameters, random fields, Hamiltonian terms, and
//! the resonance test at every scale.
//!
//! The Hamiltonian is `H = Σ_i (h_i Z_i + J V_i)` with fields `h_i` drawn
//! i.i.d. uniform on [0,1] and perturbation terms `V_i` supported on
//! `[i, i+R-1]`, clipped at the chain boundary. Scale-m intervals
//! `S_i = [i, i+mR-1]` are non-resonant when every signed subset sum of the
//! fields on the interval stays at least `delta` away from zero.

use crate::linalg;
use crate::opalg::{Interval, LocalOperator, OperatorSum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RNG_ID: &str = "chacha8-v1";
/// Exhaustive resonance enumeration refuses interval lengths above this
/// unless overridden; the meet-in-the-middle mode takes over beyond it.
pub const DEFAULT_ENUM_CAP: usize = 16;
pub const MITM_CAP: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("perturbation term at site {site} has norm {norm:.6} > 1")]
    PerturbationNorm { site: usize, norm: f64 },
    #[error("interval length {len} exceeds the enumeration cap {cap}; use the meet-in-the-middle mode")]
    EnumerationCap { len: usize, cap: usize },
    #[error("interval length {len} exceeds the meet-in-the-middle cap {cap}")]
    MitmCap { len: usize, cap: usize },
    #[error("bitstring length {got} does not match chain length {expect}")]
    LengthMismatch { got: usize, expect: usize },
    #[error(transparent)]
    Opalg(#[from] crate::opalg::OpalgError),
}

/// Capacity knobs; defaults keep every densified object desk-sized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Caps {
    /// Max chain length that may be materialized as a full 2^N matrix.
    pub dense_cap: usize,
    /// Max interval length for exhaustive resonance enumeration.
    pub enum_cap: usize,
    /// Max support length the local algebra will densify; larger clusters
    /// flag the realization as oversized.
    pub support_cap: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            dense_cap: crate::opalg::DEFAULT_DENSE_CAP,
            enum_cap: DEFAULT_ENUM_CAP,
            support_cap: crate::opalg::DEFAULT_DENSE_CAP,
        }
    }
}

/// Optional pins for quantities that are otherwise derived from `J`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Overrides {
    pub n_star: Option<usize>,
    pub delta: Option<f64>,
}

/// Built-in perturbation shapes, all rescaled so that `‖V_i‖ ≤ 1`.
#[derive(Debug, Clone)]
pub enum PerturbationSpec {
    /// `(X_i + X_i X_{i+1}) / 2` — the default.
    TransverseMixed,
    /// `X_i`.
    Transverse,
    /// `(X_i X_{i+1} + Y_i Y_{i+1}) / 2`.
    Hopping,
    /// Explicit per-site Hermitian templates; entry `k` is the term anchored
    /// at site `k+1`, already clipped by the caller.
    Custom(Vec<Option<LocalOperator>>),
}

impl PerturbationSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationSpec::TransverseMixed => "transverse-mixed",
            PerturbationSpec::Transverse => "transverse",
            PerturbationSpec::Hopping => "hopping",
            PerturbationSpec::Custom(_) => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "transverse-mixed" => Some(PerturbationSpec::TransverseMixed),
            "transverse" => Some(PerturbationSpec::Transverse),
            "hopping" => Some(PerturbationSpec::Hopping),
            _ => None,
        }
    }

    /// Minimal interaction range the preset needs.
    pub fn natural_range(&self) -> usize {
        match self {
            PerturbationSpec::Transverse => 1,
            PerturbationSpec::TransverseMixed | PerturbationSpec::Hopping => 2,
            PerturbationSpec::Custom(_) => 1,
        }
    }

    /// Build `V_i` for anchor `i` on a chain of `n` sites. Pauli strings
    /// sticking out past the boundary are dropped, so the boundary terms are
    /// shorter; `None` when nothing remains.
    pub fn materialize(&self, i: usize, n: usize) -> Result<Option<LocalOperator>, ModelError> {
        let op = match self {
            PerturbationSpec::TransverseMixed => {
                let x = LocalOperator::pauli_x(i).scaled(0.5);
                if i + 1 <= n {
                    let xx = pauli_product(&LocalOperator::pauli_x(i), &LocalOperator::pauli_x(i + 1));
                    Some(x.add(&xx.scaled(0.5))?)
                } else {
                    Some(x)
                }
            }
            PerturbationSpec::Transverse => Some(LocalOperator::pauli_x(i)),
            PerturbationSpec::Hopping => {
                if i + 1 <= n {
                    let xx = pauli_product(&LocalOperator::pauli_x(i), &LocalOperator::pauli_x(i + 1));
                    let yy = pauli_product(&LocalOperator::pauli_y(i), &LocalOperator::pauli_y(i + 1));
                    Some(xx.add(&yy)?.scaled(0.5))
                } else {
                    None
                }
            }
            PerturbationSpec::Custom(templates) => templates.get(i - 1).cloned().flatten(),
        };
        Ok(op)
    }
}

/// Product of two local operators on the union of their supports.
pub fn pauli_product(a: &LocalOperator, b: &LocalOperator) -> LocalOperator {
    let target = a.support().union(&b.support());
    let ae = crate::opalg::embed(a, target).expect("union contains support");
    let be = crate::opalg::embed(b, target).expect("union contains support");
    let m = linalg::matmul(ae.matrix(), be.matrix());
    LocalOperator::new(target, m).expect("dimensions match")
}

/// Static description of one disordered-chain experiment.
#[derive(Debug, Clone)]
pub struct ChainParams {
    pub n_sites: usize,
    pub range: usize,
    pub coupling: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub perturbation: PerturbationSpec,
    pub overrides: Overrides,
    pub caps: Caps,
}

impl ChainParams {
    pub fn new(
        n_sites: usize,
        range: usize,
        coupling: f64,
        beta: f64,
        epsilon: f64,
    ) -> Result<Self, ModelError> {
        let p = Self {
            n_sites,
            range,
            coupling,
            beta,
            epsilon,
            perturbation: PerturbationSpec::TransverseMixed,
            overrides: Overrides::default(),
            caps: Caps::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_sites == 0 {
            return Err(ModelError::InvalidParam("chain length must be positive".into()));
        }
        if self.range == 0 {
            return Err(ModelError::InvalidParam("range must be positive".into()));
        }
        if !(self.coupling > 0.0 && self.coupling < 1.0) {
            return Err(ModelError::InvalidParam(format!(
                "coupling J = {} must lie in (0, 1)",
                self.coupling
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(ModelError::InvalidParam(format!("beta = {} must lie in (0, 1)", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ModelError::InvalidParam(format!(
                "epsilon = {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if self.perturbation.natural_range() > self.range {
            return Err(ModelError::InvalidParam(format!(
                "perturbation '{}' needs range ≥ {}, got {}",
                self.perturbation.name(),
                self.perturbation.natural_range(),
                self.range
            )));
        }
        if let Some(d) = self.overrides.delta {
            if d < 0.0 {
                return Err(ModelError::InvalidParam("delta override must be ≥ 0".into()));
            }
        }
        if self.overrides.n_star == Some(0) {
            return Err(ModelError::InvalidParam("n_star override must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Resonance threshold `δ = J^β` unless pinned.
    pub fn delta(&self) -> f64 {
        self.overrides.delta.unwrap_or_else(|| self.coupling.powf(self.beta))
    }

    /// Expansion depth `n* = ⌊(ln(1/J))^{1-ε}⌋`, natural logarithm, at
    /// least 1, unless pinned.
    pub fn n_star(&self) -> usize {
        self.overrides.n_star.unwrap_or_else(|| {
            let v = (1.0 / self.coupling).ln().powf(1.0 - self.epsilon).floor();
            (v as usize).max(1)
        })
    }

    /// Scale-m interval anchored at `i`, clipped to the chain.
    pub fn scale_interval(&self, i: usize, m: usize) -> Interval {
        let hi = (i + m * self.range - 1).min(self.n_sites);
        Interval::new(i, hi).expect("anchor within chain")
    }
}

/// One sample of the random fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldRealization {
    pub h: Vec<f64>,
    pub seed: u64,
    pub rng_id: String,
}

/// Draw `N` uniform fields; deterministic for a given `(seed, rng_id)`.
pub fn sample_fields(params: &ChainParams, seed: u64) -> FieldRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = (0..params.n_sites).map(|_| rng.gen::<f64>()).collect();
    FieldRealization { h, seed, rng_id: RNG_ID.to_string() }
}

/// Redraw the fields outside `window` from an independent stream, keeping
/// the fields inside bit-identical. Used by the locality-of-event check.
pub fn resample_fields_outside(
    fields: &FieldRealization,
    window: Interval,
    seed: u64,
) -> FieldRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let h = fields
        .h
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let site = k + 1;
            let fresh: f64 = rng.gen();
            if window.contains_site(site) {
                v
            } else {
                fresh
            }
        })
        .collect();
    FieldRealization { h, seed, rng_id: format!("{RNG_ID}+resample") }
}

/// Assemble `H_0 = Σ h_i Z_i` and the unscaled perturbation `V = Σ V_i`.
/// The coupling multiplies `V` downstream.
pub fn build_hamiltonian(
    params: &ChainParams,
    fields: &FieldRealization,
) -> Result<(OperatorSum, OperatorSum), ModelError> {
    params.validate()?;
    let n = params.n_sites;
    let mut h0 = OperatorSum::new(n);
    let mut v = OperatorSum::new(n);
    for i in 1..=n {
        h0.push(0, i, LocalOperator::pauli_z(i).scaled(fields.h[i - 1]))?;
        if let Some(vi) = params.perturbation.materialize(i, n)? {
            let full = params.scale_interval(i, 1);
            if !full.contains(&vi.support()) || vi.support().lo() != i {
                return Err(ModelError::InvalidParam(format!(
                    "V_{i} must be supported on [{}, {}]",
                    full.lo(),
                    full.hi()
                )));
            }
            let norm = crate::opalg::spectral_norm(&vi);
            if norm > 1.0 + 1e-12 {
                return Err(ModelError::PerturbationNorm { site: i, norm });
            }
            let vi = LocalOperator::hermitian(vi.support(), vi.matrix().clone())?;
            v.push(0, i, vi)?;
        }
    }
    Ok((h0, v))
}

/// Classical energy `E(σ) = Σ h_i σ_i` of a spin configuration, `σ_i = ±1`.
pub fn classical_energy(fields: &FieldRealization, sigma: &[i8]) -> Result<f64, ModelError> {
    if sigma.len() != fields.h.len() {
        return Err(ModelError::LengthMismatch { got: sigma.len(), expect: fields.h.len() });
    }
    Ok(sigma.iter().zip(&fields.h).map(|(&s, &h)| h * s as f64).sum())
}

/// Energy of the basis state with index `idx` on the sites of `support`
/// (bit 0 of the label = spin up = +1), fields restricted to the support.
pub fn local_energy(fields: &FieldRealization, support: Interval, idx: usize) -> f64 {
    let len = support.len();
    let mut e = 0.0;
    for p in 0..len {
        let site = support.lo() + p;
        let bit = (idx >> (len - 1 - p)) & 1;
        let sigma = 1.0 - 2.0 * bit as f64;
        e += fields.h[site - 1] * sigma;
    }
    e
}

/// Outcome of one resonance decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceCheck {
    pub resonant: bool,
    /// Smallest |signed sum of fields| over the interval.
    pub min_value: f64,
    /// A minimizing sign vector over the (clipped) interval.
    pub argmin_eta: Vec<i8>,
}

fn min_signed_sum_exhaustive(h: &[f64]) -> (f64, Vec<i8>) {
    let len = h.len();
    let mut best = f64::INFINITY;
    let mut best_eta = vec![0i8; len];
    let mut eta = vec![0i8; len];
    // depth-first over {-1,0,1}^len with the first nonzero entry pinned to
    // +1: the sign flip eta -> -eta leaves |sum| unchanged.
    fn rec(
        h: &[f64],
        pos: usize,
        sum: f64,
        any: bool,
        eta: &mut Vec<i8>,
        best: &mut f64,
        best_eta: &mut Vec<i8>,
    ) {
        if pos == h.len() {
            if any {
                let v = sum.abs();
                if v < *best {
                    *best = v;
                    best_eta.copy_from_slice(eta);
                }
            }
            return;
        }
        eta[pos] = 0;
        rec(h, pos + 1, sum, any, eta, best, best_eta);
        eta[pos] = 1;
        rec(h, pos + 1, sum + h[pos], true, eta, best, best_eta);
        if any {
            eta[pos] = -1;
            rec(h, pos + 1, sum - h[pos], true, eta, best, best_eta);
        }
        eta[pos] = 0;
    }
    rec(h, 0, 0.0, false, &mut eta, &mut best, &mut best_eta);
    (best, best_eta)
}

fn min_signed_sum_mitm(h: &[f64]) -> (f64, Vec<i8>) {
    let len = h.len();
    let half = len / 2;
    let (left, right) = h.split_at(half);
    // all signed sums of one side, including the all-zero vector
    fn all_sums(h: &[f64]) -> Vec<(f64, Vec<i8>)> {
        let mut out = vec![(0.0, vec![0i8; h.len()])];
        for (k, &v) in h.iter().enumerate() {
            let mut next = Vec::with_capacity(out.len() * 3);
            for (s, eta) in &out {
                next.push((*s, eta.clone()));
                let mut e1 = eta.clone();
                e1[k] = 1;
                next.push((s + v, e1));
                let mut e2 = eta.clone();
                e2[k] = -1;
                next.push((s - v, e2));
            }
            out = next;
        }
        out
    }
    let lefts = all_sums(left);
    let mut rights = all_sums(right);
    rights.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    let mut best_eta = vec![0i8; len];
    for (ls, leta) in &lefts {
        let left_zero = leta.iter().all(|&e| e == 0);
        // nearest right sums to -ls
        let target = -ls;
        let idx = rights.partition_point(|r| r.0 < target);
        for j in idx.saturating_sub(2)..(idx + 2).min(rights.len()) {
            let (rs, reta) = &rights[j];
            if left_zero && reta.iter().all(|&e| e == 0) {
                continue;
            }
            let v = (ls + rs).abs();
            if v < best {
                best = v;
                best_eta[..left.len()].copy_from_slice(leta);
                best_eta[left.len()..].copy_from_slice(reta);
            }
        }
    }
    (best, best_eta)
}

/// Decide resonance of the scale-m interval anchored at `i` by exhaustive
/// enumeration of all sign vectors on the clipped interval. Resonant means
/// the smallest |signed field sum| falls below `delta`.
pub fn resonance_check(
    fields: &FieldRealization,
    i: usize,
    m: usize,
    delta: f64,
    range: usize,
    enum_cap: usize,
) -> Result<ResonanceCheck, ModelError> {
    let n = fields.h.len();
    let hi = (i + m * range - 1).min(n);
    let len = hi - i + 1;
    if len > enum_cap {
        return Err(ModelError::EnumerationCap { len, cap: enum_cap });
    }
    let slice = &fields.h[i - 1..hi];
    let (min_value, argmin_eta) = min_signed_sum_exhaustive(slice);
    Ok(ResonanceCheck { resonant: min_value < delta, min_value, argmin_eta })
}

/// Meet-in-the-middle variant for long intervals (sorted half-sums and a
/// nearest-neighbour merge); covers lengths up to [`MITM_CAP`].
pub fn resonance_check_mitm(
    fields: &FieldRealization,
    i: usize,
    m: usize,
    delta: f64,
    range: usize,
) -> Result<ResonanceCheck, ModelError> {
    let n = fields.h.len();
    let hi = (i + m * range - 1).min(n);
    let len = hi - i + 1;
    if len > MITM_CAP {
        return Err(ModelError::MitmCap { len, cap: MITM_CAP });
    }
    let slice = &fields.h[i - 1..hi];
    let (min_value, argmin_eta) = min_signed_sum_mitm(slice);
    Ok(ResonanceCheck { resonant: min_value < delta, min_value, argmin_eta })
}

/// Resonance decisions for every anchor and scale up to `n*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceMap {
    pub n_sites: usize,
    pub range: usize,
    pub n_star: usize,
    pub delta: f64,
    /// `entries[m-1][i-1]` is the decision for scale `m`, anchor `i`.
    pub entries: Vec<Vec<ResonanceCheck>>,
}

impl ResonanceMap {
    pub fn resonant(&self, i: usize, m: usize) -> bool {
        self.entries[m - 1][i - 1].resonant
    }

    pub fn check(&self, i: usize, m: usize) -> &ResonanceCheck {
        &self.entries[m - 1][i - 1]
    }

    pub fn scale_interval(&self, i: usize, m: usize) -> Interval {
        let hi = (i + m * self.range - 1).min(self.n_sites);
        Interval::new(i, hi).expect("anchor within chain")
    }

    pub fn any_resonant(&self) -> bool {
        self.entries.iter().any(|row| row.iter().any(|e| e.resonant))
    }

    fn assert_monotone(&self) {
        for m in 1..=self.n_star {
            for i in 1..=self.n_sites {
                if !self.resonant(i, m) {
                    continue;
                }
                let s = self.scale_interval(i, m);
                for mp in (m + 1)..=self.n_star {
                    for ip in 1..=self.n_sites {
                        let sp = self.scale_interval(ip, mp);
                        if sp.contains(&s) {
                            assert!(
                                self.resonant(ip, mp),
                                "resonance not monotone: S_{i}^({m}) resonant but S_{ip}^({mp}) ⊇ it is not"
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Run [`resonance_check`] for every anchor `i = 1..N` and scale
/// `m = 1..n*`; the cross-scale monotonicity of resonance is asserted on the
/// result.
pub fn resonance_map(fields: &FieldRealization, params: &ChainParams) -> Result<ResonanceMap, ModelError> {
    let n = params.n_sites;
    let n_star = params.n_star();
    let delta = params.delta();
    let mut entries = Vec::with_capacity(n_star);
    for m in 1..=n_star {
        let mut row = Vec::with_capacity(n);
        for i in 1..=n {
            row.push(resonance_check(fields, i, m, delta, params.range, params.caps.enum_cap)?);
        }
        entries.push(row);
    }
    let map = ResonanceMap { n_sites: n, range: params.range, n_star, delta, entries };
    map.assert_monotone();
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opalg::{spectral_norm, DEFAULT_DENSE_CAP};

    fn params(n: usize, j: f64) -> ChainParams {
        ChainParams::new(n, 2, j, 0.5, 0.5).unwrap()
    }

    #[test]
    fn fields_deterministic() {
        let p = params(8, 0.05);
        let a = sample_fields(&p, 7);
        let b = sample_fields(&p, 7);
        assert_eq!(a.h, b.h);
        let c = sample_fields(&p, 8);
        assert_ne!(a.h, c.h);
        assert!(a.h.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn fields_mean_converges() {
        let mut p = ChainParams::new(1, 2, 0.05, 0.5, 0.5).unwrap();
        p.perturbation = PerturbationSpec::Transverse;
        p.range = 1;
        p.validate().unwrap();
        let mean: f64 = (0..100_000).map(|s| sample_fields(&p, s).h[0]).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "uniform mean drifted: {mean}");
    }

    #[test]
    fn derived_quantities() {
        let p = params(8, 0.02);
        assert!((p.delta() - 0.02f64.powf(0.5)).abs() < 1e-15);
        // ln(50) ≈ 3.912, sqrt ≈ 1.978 → n* = 1
        assert_eq!(p.n_star(), 1);
        let mut p2 = params(8, 0.02);
        p2.overrides.n_star = Some(3);
        p2.overrides.delta = Some(0.125);
        assert_eq!(p2.n_star(), 3);
        assert_eq!(p2.delta(), 0.125);
        // n* clamps to 1 for J close to 1
        let p3 = params(8, 0.9);
        assert_eq!(p3.n_star(), 1);
    }

    #[test]
    fn hamiltonian_matches_enumeration() {
        let p = params(2, 0.05);
        let fields = FieldRealization { h: vec![0.5, 0.25], seed: 0, rng_id: RNG_ID.into() };
        let (h0, v) = build_hamiltonian(&p, &fields).unwrap();
        let dense = h0.to_dense(DEFAULT_DENSE_CAP).unwrap();
        let expect = [0.75, 0.25, -0.25, -0.75];
        for (i, &e) in expect.iter().enumerate() {
            assert!((dense[(i, i)].re - e).abs() < 1e-15);
        }
        // every V_i is Hermitian with norm ≤ 1
        for (_, vi) in v.iter() {
            assert!(spectral_norm(vi) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn boundary_perturbation_clipped() {
        let p = ChainParams::new(1, 2, 0.05, 0.5, 0.5).unwrap();
        let fields = sample_fields(&p, 1);
        let (_, v) = build_hamiltonian(&p, &fields).unwrap();
        let v1 = v.get(0, 1).unwrap();
        assert_eq!(v1.support(), Interval::site(1));
        assert!((spectral_norm(v1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn custom_norm_validation() {
        let mut p = params(2, 0.05);
        p.perturbation = PerturbationSpec::Custom(vec![
            Some(LocalOperator::pauli_x(1).scaled(1.5)),
            None,
        ]);
        let fields = sample_fields(&p, 1);
        assert!(matches!(
            build_hamiltonian(&p, &fields),
            Err(ModelError::PerturbationNorm { site: 1, .. })
        ));
    }

    #[test]
    fn classical_energy_cases() {
        let f = FieldRealization { h: vec![0.5, 0.25], seed: 0, rng_id: RNG_ID.into() };
        assert_eq!(classical_energy(&f, &[1, 1]).unwrap(), 0.75);
        assert_eq!(classical_energy(&f, &[1, -1]).unwrap(), 0.25);
        assert!(classical_energy(&f, &[1]).is_err());
        // single-site flip changes the energy by ±2 h_i
        let e0 = classical_energy(&f, &[1, 1]).unwrap();
        let e1 = classical_energy(&f, &[-1, 1]).unwrap();
        assert!((e0 - e1 - 2.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn resonance_check_examples() {
        let f = FieldRealization { h: vec![0.30, 0.65], seed: 0, rng_id: RNG_ID.into() };
        let c = resonance_check(&f, 1, 1, 0.1, 2, DEFAULT_ENUM_CAP).unwrap();
        assert!(!c.resonant);
        assert!((c.min_value - 0.30).abs() < 1e-15);

        let f = FieldRealization { h: vec![0.50, 0.55], seed: 0, rng_id: RNG_ID.into() };
        let c = resonance_check(&f, 1, 1, 0.1, 2, DEFAULT_ENUM_CAP).unwrap();
        assert!(c.resonant);
        assert!((c.min_value - 0.05).abs() < 1e-15);
        assert_eq!(c.argmin_eta.iter().map(|&e| e.abs()).sum::<i8>(), 2);

        // delta = 0 with generic positive fields: non-resonant
        let c = resonance_check(&f, 1, 1, 0.0, 2, DEFAULT_ENUM_CAP).unwrap();
        assert!(!c.resonant);
    }

    #[test]
    fn resonance_enumeration_cap() {
        let p = ChainParams::new(20, 2, 0.05, 0.5, 0.5).unwrap();
        let f = sample_fields(&p, 3);
        assert!(matches!(
            resonance_check(&f, 1, 9, 0.1, 2, DEFAULT_ENUM_CAP),
            Err(ModelError::EnumerationCap { len: 18, cap: 16 })
        ));
        // the meet-in-the-middle mode handles it and agrees with exhaustive
        // on a length the latter can reach
        let a = resonance_check(&f, 1, 6, 0.1, 2, DEFAULT_ENUM_CAP).unwrap();
        let b = resonance_check_mitm(&f, 1, 6, 0.1, 2).unwrap();
        assert_eq!(a.resonant, b.resonant);
        assert!((a.min_value - b.min_value).abs() < 1e-12);
    }

    #[test]
    fn resonance_map_monotone_and_single_eta() {
        let mut p = params(10, 0.05);
        p.overrides.n_star = Some(2);
        p.overrides.delta = Some(0.35);
        for seed in 0..20 {
            let f = sample_fields(&p, seed);
            let map = resonance_map(&f, &p).unwrap(); // asserts monotonicity internally
            for i in 1..=p.n_sites {
                if f.h[i - 1] < map.delta {
                    assert!(map.resonant(i, 1), "h_{i} below delta must force resonance");
                }
            }
        }
    }

    #[test]
    fn resonance_map_delta_zero() {
        let mut p = params(8, 0.05);
        p.overrides.delta = Some(0.0);
        let f = sample_fields(&p, 11);
        let map = resonance_map(&f, &p).unwrap();
        assert!(!map.any_resonant());
    }

    #[test]
    fn resample_outside_window_preserves_inside() {
        let p = params(12, 0.05);
        let f = sample_fields(&p, 5);
        let w = Interval::new(4, 8).unwrap();
        let g = resample_fields_outside(&f, w, 99);
        for i in 1..=12 {
            if w.contains_site(i) {
                assert_eq!(f.h[i - 1], g.h[i - 1]);
            } else {
                assert_ne!(f.h[i - 1], g.h[i - 1]);
            }
        }
    }

    #[test]
    fn mitm_matches_exhaustive_randomized() {
        let p = ChainParams::new(9, 3, 0.05, 0.5, 0.5).unwrap();
        for seed in 0..50 {
            let f = sample_fields(&p, seed);
            let a = resonance_check(&f, 1, 3, 0.2, 3, DEFAULT_ENUM_CAP).unwrap();
            let b = resonance_check_mitm(&f, 1, 3, 0.2, 3).unwrap();
            assert!(
                (a.min_value - b.min_value).abs() < 1e-12,
                "seed {seed}: {} vs {}",
                a.min_value,
                b.min_value
            );
        }
    }

    #[test]
    fn param_validation() {
        assert!(ChainParams::new(8, 2, 0.0, 0.5, 0.5).is_err());
        assert!(ChainParams::new(8, 2, 1.0, 0.5, 0.5).is_err());
        assert!(ChainParams::new(8, 2, 0.05, 0.0, 0.5).is_err());
        assert!(ChainParams::new(8, 0, 0.05, 0.5, 0.5).is_err());
        // default preset needs range 2
        assert!(ChainParams::new(8, 1, 0.05, 0.5, 0.5).is_err());
        let mut p = ChainParams::new(8, 2, 0.05, 0.5, 0.5).unwrap();
        p.perturbation = PerturbationSpec::Transverse;
        p.range = 1;
        assert!(p.validate().is_ok());
    }
}
