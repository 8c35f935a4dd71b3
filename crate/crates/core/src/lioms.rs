//! Resonant clusters and the dressed quasi-conserved spin operators.
//!
//! The resonant sites found by the diagonalization scheme are grouped into
//! clusters `T` (connected under distance < n*R), each carrying a cluster
//! Hamiltonian on the fattened interval `T~`. Joint diagonalization of the
//! cluster Hamiltonian with the surrounding Z operators produces one spin
//! operator per cluster site; everything off the resonant set keeps its bare
//! Z. Conjugating back through `e^{-ad_A}` yields the full set of N mutually
//! commuting dressed spins.

use crate::kam::{Dressing, KamOutput};
use crate::linalg::{self, C64, Mat};
use crate::model::{ChainParams, FieldRealization, ResonanceMap};
use crate::opalg::{self, Interval, LocalOperator, TailProfile};
use serde::Serialize;
use std::collections::BTreeSet;
use thiserror::Error;

/// Numerical tolerance on the cluster commutation invariants.
pub const CLUSTER_COMM_TOL: f64 = 1e-10;
/// Eigenvalues closer than this (relative to the spectral scale) are
/// treated as one degenerate group during eigenvector-bitstring matching.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Greedy matching accepts only overlaps at least this large; below it the
/// optimal assignment takes over.
pub const GREEDY_OVERLAP_MIN: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LiomError {
    #[error("cluster [{lo}, {hi}] needs {len} sites, above the support cap {cap}; realization is oversized")]
    Oversized { lo: usize, hi: usize, len: usize, cap: usize },
    #[error("chain of {n} sites exceeds the dense cap {cap}")]
    DenseCap { n: usize, cap: usize },
    #[error("eigenvector-bitstring matching degenerated on cluster [{lo}, {hi}] (sector {sector}); overlap rows: {overlaps:?}")]
    DegenerateCluster { lo: usize, hi: usize, sector: usize, overlaps: Vec<Vec<f64>> },
    #[error("cluster construction bug: {0}")]
    Construction(String),
    #[error(transparent)]
    Opalg(#[from] opalg::OpalgError),
    #[error(transparent)]
    Kam(#[from] crate::kam::KamError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// One resonant cluster: the covering interval of a connected component and
/// its fattening by `n*R - 1` on each side (clipped).
#[derive(Debug, Clone, Serialize)]
pub struct Cluster {
    pub t: Interval,
    pub t_tilde: Interval,
}

/// All resonant structure of one realization.
#[derive(Debug, Clone, Serialize)]
pub struct ResonantSet {
    /// Union of all resonant intervals.
    pub rtilde: BTreeSet<usize>,
    pub clusters: Vec<Cluster>,
    /// Union of the covering intervals `T`.
    pub r_set: BTreeSet<usize>,
}

impl ResonantSet {
    pub fn in_r(&self, site: usize) -> bool {
        self.r_set.contains(&site)
    }

    pub fn cluster_of(&self, site: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.t.contains_site(site))
    }
}

/// Group the resonant intervals into clusters: sites of the union are
/// connected when their distance is below `n*R`; each component is covered
/// by its smallest interval, then fattened.
pub fn build_resonant_set(resonance: &ResonanceMap, params: &ChainParams) -> ResonantSet {
    let n_star = resonance.n_star;
    let reach = n_star * params.range;
    let mut rtilde = BTreeSet::new();
    for m in 1..=n_star {
        for i in 1..=resonance.n_sites {
            if resonance.resonant(i, m) {
                let s = resonance.scale_interval(i, m);
                rtilde.extend(s.lo()..=s.hi());
            }
        }
    }
    let mut clusters = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for &site in &rtilde {
        match current {
            None => current = Some((site, site)),
            Some((lo, hi)) => {
                if site - hi < reach {
                    current = Some((lo, site));
                } else {
                    clusters.push((lo, hi));
                    current = Some((site, site));
                }
            }
        }
    }
    if let Some(pair) = current {
        clusters.push(pair);
    }
    let clusters: Vec<Cluster> = clusters
        .into_iter()
        .map(|(lo, hi)| {
            let t = Interval::new(lo, hi).expect("component nonempty");
            let t_tilde = t.fatten(reach - 1, params.n_sites);
            Cluster { t, t_tilde }
        })
        .collect();
    for pair in clusters.windows(2) {
        assert!(
            pair[0].t.dist(&pair[1].t) >= reach,
            "clusters closer than n*R: {:?} and {:?}",
            pair[0].t,
            pair[1].t
        );
    }
    let mut r_set = BTreeSet::new();
    for c in &clusters {
        r_set.extend(c.t.lo()..=c.t.hi());
    }
    ResonantSet { rtilde, clusters, r_set }
}

/// The cluster Hamiltonian on `T~`: field and resonant terms anchored inside
/// `T`, plus every diagonal term whose interval touches `T`.
pub fn build_e_alpha(
    cluster: &Cluster,
    kam: &KamOutput,
    fields: &FieldRealization,
) -> Result<LocalOperator, LiomError> {
    let target = cluster.t_tilde;
    let dim = 1usize << target.len();
    let mut acc = Mat::zeros((dim, dim));
    let mut add = |op: &LocalOperator, coeff: f64| -> Result<(), LiomError> {
        if !target.contains(&op.support()) {
            return Err(LiomError::Construction(format!(
                "cluster term on [{}, {}] escapes T~ = [{}, {}]",
                op.support().lo(),
                op.support().hi(),
                target.lo(),
                target.hi()
            )));
        }
        let e = opalg::embed(op, target)?;
        acc = &acc + &e.matrix().mapv(|z| z * coeff);
        Ok(())
    };
    for i in cluster.t.lo()..=cluster.t.hi() {
        add(&LocalOperator::pauli_z(i).scaled(fields.h[i - 1]), 1.0)?;
    }
    for scale in &kam.scales {
        let jm = kam.coupling.powi(scale.m as i32);
        for (&i, data) in &scale.anchors {
            if let Some(w) = &data.w_res {
                if cluster.t.contains_site(i) {
                    add(w, jm)?;
                }
            }
            if let Some(d) = &data.d {
                let s = kam.resonance.scale_interval(i, scale.m);
                if s.intersects(&cluster.t) {
                    add(d, jm)?;
                }
            }
        }
    }
    Ok(LocalOperator::hermitian(target, acc)?)
}

/// Numerically verify that cluster Hamiltonians mutually commute and commute
/// with every Z off the resonant set; returns the largest defect found.
pub fn validate_cluster_invariants(
    clusters: &[(Cluster, LocalOperator)],
    resonant: &ResonantSet,
) -> Result<f64, LiomError> {
    let mut worst = 0.0f64;
    for (idx, (cluster, e_op)) in clusters.iter().enumerate() {
        // [Z_i, E] for i inside T~ but off R
        for i in cluster.t_tilde.lo()..=cluster.t_tilde.hi() {
            if resonant.in_r(i) {
                continue;
            }
            if let Some(c) = opalg::commutator(&LocalOperator::pauli_z(i), e_op) {
                worst = worst.max(linalg::frobenius(c.matrix()));
            }
        }
        // neighbouring clusters with overlapping fattened intervals
        for (other_cluster, other_op) in clusters.iter().skip(idx + 1).map(|p| (&p.0, &p.1)) {
            if cluster.t_tilde.intersects(&other_cluster.t_tilde) {
                if let Some(c) = opalg::commutator(e_op, other_op) {
                    worst = worst.max(linalg::frobenius(c.matrix()));
                }
            }
        }
    }
    let scale = clusters
        .iter()
        .map(|(_, op)| linalg::frobenius(op.matrix()))
        .fold(1.0f64, f64::max);
    if worst > CLUSTER_COMM_TOL * scale {
        return Err(LiomError::Construction(format!(
            "cluster commutation defect {worst:.3e} above tolerance"
        )));
    }
    Ok(worst)
}

/// The spin operators of one cluster, all supported on `T~`.
#[derive(Debug, Clone)]
pub struct ClusterSpins {
    /// Block unitary on the `T~` factor diagonalizing the cluster
    /// Hamiltonian within each outer-Z sector.
    pub u: Mat,
    /// `tau'_{alpha,j}` for `j = 1..|T|`, indexed `j-1`.
    pub tau_primes: Vec<LocalOperator>,
}

fn lowdin_columns(vectors: &Mat, targets: &[usize]) -> Option<Mat> {
    // project the target basis vectors onto the span and orthonormalize
    let dim = vectors.nrows();
    let g = targets.len();
    let mut v = Mat::zeros((dim, g));
    for (c, &sigma) in targets.iter().enumerate() {
        // P|sigma> = sum_k |psi_k><psi_k|sigma>
        for k in 0..vectors.ncols() {
            let coeff = vectors[(sigma, k)].conj();
            for r in 0..dim {
                v[(r, c)] += vectors[(r, k)] * coeff;
            }
        }
    }
    let gram = linalg::matmul(&linalg::dagger(&v), &v);
    let (w, q) = linalg::eigh(&gram).ok()?;
    if w.iter().any(|&x| x < 1e-8) {
        return None;
    }
    // G^{-1/2} = Q diag(w^{-1/2}) Q†
    let mut qs = q.clone();
    for j in 0..g {
        let s = w[j].sqrt().recip();
        qs.column_mut(j).mapv_inplace(|z| z * s);
    }
    let inv_sqrt = linalg::matmul(&qs, &linalg::dagger(&q));
    Some(linalg::matmul(&v, &inv_sqrt))
}

/// Diagonalize one outer-Z sector block and return its unitary with columns
/// ordered by the matched bitstring.
fn match_sector(
    block: &Mat,
    cluster: &Cluster,
    sector: usize,
) -> Result<Mat, LiomError> {
    let dim = block.nrows();
    let (w, vecs) = linalg::eigh(block)?;
    let scale = w.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
    // overlap matrix: rows = eigenvectors, cols = bitstrings
    let overlaps: Vec<Vec<f64>> =
        (0..dim).map(|e| (0..dim).map(|s| vecs[(s, e)].norm_sqr()).collect()).collect();
    // greedy maximum matching
    let mut assignment = vec![usize::MAX; dim]; // eigenvector -> bitstring
    {
        let mut taken_e = vec![false; dim];
        let mut taken_s = vec![false; dim];
        let mut order: Vec<(usize, usize)> = (0..dim)
            .flat_map(|e| (0..dim).map(move |s| (e, s)))
            .collect();
        order.sort_by(|a, b| overlaps[b.0][b.1].total_cmp(&overlaps[a.0][a.1]).then(a.cmp(b)));
        for (e, s) in order {
            if !taken_e[e] && !taken_s[s] {
                taken_e[e] = true;
                taken_s[s] = true;
                assignment[e] = s;
            }
        }
    }
    let greedy_ok = (0..dim).all(|e| overlaps[e][assignment[e]] >= GREEDY_OVERLAP_MIN);
    if !greedy_ok {
        // optimal assignment on the scaled overlap matrix
        let weights = pathfinding::matrix::Matrix::from_fn(dim, dim, |(e, s)| {
            (overlaps[e][s] * 1e12) as i64
        });
        let (_, best) = pathfinding::prelude::kuhn_munkres(&weights);
        assignment = best;
    }
    // group degenerate eigenvalues and resolve each group by rotated
    // projections of its assigned bitstrings
    let mut u = Mat::zeros((dim, dim));
    let mut start = 0usize;
    while start < dim {
        let mut end = start + 1;
        while end < dim && (w[end] - w[end - 1]).abs() <= DEGENERACY_TOL * scale {
            end += 1;
        }
        let group: Vec<usize> = (start..end).collect();
        let targets: Vec<usize> = group.iter().map(|&e| assignment[e]).collect();
        if group.len() == 1 {
            let e = group[0];
            let s = assignment[e];
            if overlaps[e][s] < 1e-9 {
                return Err(LiomError::DegenerateCluster {
                    lo: cluster.t.lo(),
                    hi: cluster.t.hi(),
                    sector,
                    overlaps,
                });
            }
            // gauge: make the matched component real positive
            let anchor = vecs[(s, e)];
            let phase = if anchor.norm() > 0.0 { anchor.conj() / anchor.norm() } else { C64::new(1.0, 0.0) };
            for r in 0..dim {
                u[(r, s)] = vecs[(r, e)] * phase;
            }
        } else {
            let members = {
                let mut cols = Mat::zeros((dim, group.len()));
                for (c, &e) in group.iter().enumerate() {
                    for r in 0..dim {
                        cols[(r, c)] = vecs[(r, e)];
                    }
                }
                cols
            };
            let rotated = lowdin_columns(&members, &targets).ok_or_else(|| {
                LiomError::DegenerateCluster {
                    lo: cluster.t.lo(),
                    hi: cluster.t.hi(),
                    sector,
                    overlaps: overlaps.clone(),
                }
            })?;
            for (c, &s) in targets.iter().enumerate() {
                for r in 0..dim {
                    u[(r, s)] = rotated[(r, c)];
                }
            }
        }
        start = end;
    }
    Ok(u)
}

/// Jointly diagonalize the cluster Hamiltonian with the outer Z operators
/// and build the `|T|` spin operators.
///
/// The unitary is block-diagonal across the joint Z-eigenspaces of the
/// margin sites; inside each sector, eigenvectors are matched to
/// computational bitstrings by maximal overlap so that at weak coupling the
/// spins continuously deform the bare Z operators.
pub fn joint_diagonalize_cluster(
    cluster: &Cluster,
    e_alpha: &LocalOperator,
) -> Result<ClusterSpins, LiomError> {
    let t_tilde = cluster.t_tilde;
    let t = cluster.t;
    assert_eq!(e_alpha.support(), t_tilde);
    let total_bits = t_tilde.len();
    let core_bits = t.len();
    let left_bits = t.lo() - t_tilde.lo();
    let right_bits = t_tilde.hi() - t.hi();
    let dim = 1usize << total_bits;
    let core_dim = 1usize << core_bits;
    let sectors = 1usize << (left_bits + right_bits);
    let em = e_alpha.matrix();

    // precondition: E is block-diagonal over the outer-Z sectors
    let mut off_block = 0.0f64;
    for r in 0..dim {
        for c in 0..dim {
            let same_sector = (r >> right_bits << right_bits == c >> right_bits << right_bits)
                || sector_of(r, core_bits, right_bits) == sector_of(c, core_bits, right_bits);
            if sector_of(r, core_bits, right_bits) != sector_of(c, core_bits, right_bits) {
                off_block += em[(r, c)].norm_sqr();
            }
            let _ = same_sector;
        }
    }
    let off_block = off_block.sqrt();
    let e_scale = linalg::frobenius(em).max(1.0);
    if off_block > CLUSTER_COMM_TOL * e_scale {
        return Err(LiomError::Construction(format!(
            "cluster Hamiltonian not block-diagonal over margin sectors: defect {off_block:.3e}"
        )));
    }

    let mut u = Mat::zeros((dim, dim));
    for sec in 0..sectors {
        let left = sec >> right_bits;
        let right = sec & ((1 << right_bits) - 1);
        let row_of = |core: usize| (left << (core_bits + right_bits)) + (core << right_bits) + right;
        let mut block = Mat::zeros((core_dim, core_dim));
        for a in 0..core_dim {
            for b in 0..core_dim {
                block[(a, b)] = em[(row_of(a), row_of(b))];
            }
        }
        let ub = match_sector(&block, cluster, sec)?;
        for a in 0..core_dim {
            for b in 0..core_dim {
                u[(row_of(a), row_of(b))] = ub[(a, b)];
            }
        }
    }

    // tau'_{alpha,j} = U Z_{t.lo + j - 1} U† via column scaling by the label
    let mut tau_primes = Vec::with_capacity(core_bits);
    for j in 1..=core_bits {
        let site = t.lo() + j - 1;
        let bitpos = total_bits - 1 - (site - t_tilde.lo());
        let mut scaled = u.clone();
        for col in 0..dim {
            let sign = if (col >> bitpos) & 1 == 0 { 1.0 } else { -1.0 };
            scaled.column_mut(col).mapv_inplace(|z| z * sign);
        }
        let tp = linalg::matmul(&scaled, &linalg::dagger(&u));
        tau_primes.push(LocalOperator::hermitian(t_tilde, tp)?);
    }
    Ok(ClusterSpins { u, tau_primes })
}

fn sector_of(index: usize, core_bits: usize, right_bits: usize) -> usize {
    let left = index >> (core_bits + right_bits);
    let right = index & ((1 << right_bits) - 1);
    (left << right_bits) + right
}

/// One dressed spin and its bookkeeping.
#[derive(Debug, Clone)]
pub struct LiomEntry {
    pub site: usize,
    pub resonant: bool,
    /// `M_i`: the site itself off the resonant set, the fattened cluster
    /// interval on it.
    pub m_interval: Interval,
    pub tau_prime: LocalOperator,
    /// Dense dressed operator on the full chain.
    pub tau: Mat,
    pub tail: TailProfile,
}

#[derive(Debug)]
pub struct LiomSet {
    pub n_sites: usize,
    pub entries: Vec<LiomEntry>,
    pub clusters: Vec<(Cluster, LocalOperator)>,
    pub cluster_comm_defect: f64,
    pub dressing: Dressing,
}

impl LiomSet {
    pub fn tau(&self, site: usize) -> &Mat {
        &self.entries[site - 1].tau
    }
}

/// Build every `tau'_i`, dress through `e^{-ad_A}`, and attach intervals and
/// locality profiles.
pub fn assemble_and_dress(
    kam: &KamOutput,
    resonant: &ResonantSet,
    params: &ChainParams,
    fields: &FieldRealization,
) -> Result<LiomSet, LiomError> {
    let n = params.n_sites;
    if n > params.caps.dense_cap {
        return Err(LiomError::DenseCap { n, cap: params.caps.dense_cap });
    }
    for c in &resonant.clusters {
        if c.t_tilde.len() > params.caps.support_cap {
            return Err(LiomError::Oversized {
                lo: c.t_tilde.lo(),
                hi: c.t_tilde.hi(),
                len: c.t_tilde.len(),
                cap: params.caps.support_cap,
            });
        }
    }
    let mut clusters = Vec::with_capacity(resonant.clusters.len());
    for c in &resonant.clusters {
        let e_alpha = build_e_alpha(c, kam, fields)?;
        clusters.push((c.clone(), e_alpha));
    }
    let cluster_comm_defect = validate_cluster_invariants(&clusters, resonant)?;
    let mut cluster_spins = Vec::with_capacity(clusters.len());
    for (c, e_alpha) in &clusters {
        cluster_spins.push(joint_diagonalize_cluster(c, e_alpha)?);
    }

    let dressing = Dressing::new(&kam.generator(), params.caps.dense_cap)?;
    let mut entries = Vec::with_capacity(n);
    for site in 1..=n {
        let (tau_prime, m_interval, resonant_site) = match resonant.cluster_of(site) {
            Some(ci) => {
                let (c, _) = &clusters[ci];
                let j = site - c.t.lo();
                (cluster_spins[ci].tau_primes[j].clone(), c.t_tilde, true)
            }
            None => (LocalOperator::pauli_z(site), Interval::site(site), false),
        };
        // tau = e^{-ad_A}(tau') on the full space
        let tau = if tau_prime.support().len() == 1 && resonant.cluster_of(site).is_none() {
            // diagonal tau': scale columns of e^{A†} directly
            let diag: Vec<f64> = (0..1usize << n)
                .map(|idx| {
                    let bitpos = n - site;
                    if (idx >> bitpos) & 1 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect();
            backward_conjugate_diagonal(&dressing, &diag)
        } else {
            let mut sum = opalg::OperatorSum::new(n);
            sum.push(0, site, tau_prime.clone()).expect("in chain");
            let dense = sum.to_dense(params.caps.dense_cap)?;
            dressing.backward(&dense)
        };
        let tail = opalg::tail_profile(&tau, n, m_interval);
        entries.push(LiomEntry {
            site,
            resonant: resonant_site,
            m_interval,
            tau_prime,
            tau,
            tail,
        });
    }
    Ok(LiomSet {
        n_sites: n,
        entries,
        clusters,
        cluster_comm_defect,
        dressing,
    })
}

/// `e^{-A} diag e^{A}` using one matrix product: the diagonal factor is a
/// column scaling of `e^{-A} = (e^{A})†`.
fn backward_conjugate_diagonal(dressing: &Dressing, diag: &[f64]) -> Mat {
    let e = dressing.exp_a();
    let ed = linalg::dagger(e);
    let mut scaled = ed;
    for (c, &d) in diag.iter().enumerate() {
        scaled.column_mut(c).mapv_inplace(|z| z * d);
    }
    linalg::matmul(&scaled, e)
}

/// Structural interval checks: every site buried at least `n*R` inside an
/// (unclipped) fattened cluster interval belongs to the resonant set. The
/// distance is measured on the infinite lattice so that boundary clipping
/// does not enter.
pub fn check_interval_structure(resonant: &ResonantSet, params: &ChainParams) -> bool {
    let reach = (params
        .overrides
        .n_star
        .unwrap_or_else(|| params.n_star())
        * params.range) as isize;
    for c in &resonant.clusters {
        let lo_uncl = c.t.lo() as isize - (reach - 1);
        let hi_uncl = c.t.hi() as isize + (reach - 1);
        for i in 1..=params.n_sites {
            let i = i as isize;
            if i < lo_uncl || i > hi_uncl {
                continue;
            }
            let dist_to_compl = (i - (lo_uncl - 1)).min((hi_uncl + 1) - i);
            if dist_to_compl >= reach && !resonant.in_r(i as usize) {
                return false;
            }
        }
    }
    true
}

/// Per-site commutator norms against the quasi-conservation envelope.
#[derive(Debug, Clone, Serialize)]
pub struct ConservationRecord {
    pub site: usize,
    pub m_len: usize,
    pub comm_norm: f64,
    /// `|M_i| exp(-((1-beta)/4) (ln 1/J)^{2-eps})`, informational.
    pub envelope: f64,
    pub ratio: f64,
}

/// Exact `‖[H, tau_i]‖` for every site, with the unitary-invariance
/// cross-check `‖[H, tau_i]‖ = ‖[H', tau'_i]‖`.
pub fn quasi_conservation_report(
    lioms: &LiomSet,
    h: &Mat,
    h_prime: &Mat,
    params: &ChainParams,
) -> Result<Vec<ConservationRecord>, LiomError> {
    let envelope_rate =
        (1.0 - params.beta) / 4.0 * (1.0 / params.coupling).ln().powf(2.0 - params.epsilon);
    let mut out = Vec::with_capacity(lioms.entries.len());
    for entry in &lioms.entries {
        let comm = commutator_norm(h, &entry.tau)?;
        // cross-check through the primed pair
        let mut sum = opalg::OperatorSum::new(lioms.n_sites);
        sum.push(0, entry.site, entry.tau_prime.clone()).expect("in chain");
        let tau_prime_dense = sum.to_dense(params.caps.dense_cap)?;
        let comm_prime = commutator_norm(h_prime, &tau_prime_dense)?;
        let agree = (comm - comm_prime).abs() <= 1e-10 * comm.max(comm_prime).max(1e-12);
        if !agree {
            return Err(LiomError::Construction(format!(
                "unitary invariance broken at site {}: {comm:.6e} vs {comm_prime:.6e}",
                entry.site
            )));
        }
        let envelope = entry.m_interval.len() as f64 * (-envelope_rate).exp();
        out.push(ConservationRecord {
            site: entry.site,
            m_len: entry.m_interval.len(),
            comm_norm: comm,
            envelope,
            ratio: if envelope > 0.0 { comm / envelope } else { f64::INFINITY },
        });
    }
    Ok(out)
}

/// Spectral norm of `[a, b]` for Hermitian `a, b` with one matrix product:
/// the commutator is `M - M†` for `M = a b`.
pub fn commutator_norm(a: &Mat, b: &Mat) -> Result<f64, LiomError> {
    let m = linalg::matmul(a, b);
    let c = &m - &linalg::dagger(&m);
    // c is anti-Hermitian; i c is Hermitian with the same norm
    let ic = c.mapv(|z| z * C64::new(0.0, 1.0));
    Ok(linalg::spectral_norm_hermitian(&ic)?)
}
