//! Cross-cutting verification: every structural claim about the
//! construction becomes a reproducible pass/fail record, statistical claims
//! get Monte Carlo estimates with binomial error bars, and scaling claims
//! get log-log slope fits over coupling grids.

use crate::kam::{self, KamOutput};
use crate::linalg::{self, C64, Mat};
use crate::lioms::{self, LiomSet, ResonantSet};
use crate::model::{self, ChainParams};
use crate::opalg::Interval;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Kam(#[from] kam::KamError),
    #[error(transparent)]
    Lioms(#[from] lioms::LiomError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Opalg(#[from] crate::opalg::OpalgError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("scaling setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Emitted for trend inspection; never gates.
    Info,
    /// Dense check skipped for a stated capacity reason.
    Skipped,
}

/// Where the reference value of a check comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// An algebraic identity of the construction.
    ExactIdentity,
    /// A proven analytic bound or envelope.
    AnalyticBound,
    /// Generated by the exact-diagonalization oracle.
    OracleDerived,
    /// Monte Carlo estimate with binomial statistics.
    Statistical,
    /// Artifact plumbing (determinism, schema, capacity).
    Plumbing,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub status: CheckStatus,
    pub measured: Vec<f64>,
    pub reference: Option<f64>,
    pub tolerance: Option<f64>,
    pub provenance: Provenance,
    pub detail: String,
}

impl CheckResult {
    pub fn gate(id: &str, ok: bool, measured: f64, reference: f64, tol: f64, prov: Provenance, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            measured: vec![measured],
            reference: Some(reference),
            tolerance: Some(tol),
            provenance: prov,
            detail: detail.into(),
        }
    }

    pub fn info(id: &str, measured: Vec<f64>, prov: Provenance, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            status: CheckStatus::Info,
            measured,
            reference: None,
            tolerance: None,
            provenance: prov,
            detail: detail.into(),
        }
    }

    pub fn skipped(id: &str, reason: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            status: CheckStatus::Skipped,
            measured: vec![],
            reference: None,
            tolerance: None,
            provenance: Provenance::Plumbing,
            detail: reason.into(),
        }
    }

    pub fn is_fail(&self) -> bool {
        self.status == CheckStatus::Fail
    }
}

/// Unweighted least-squares line through `(x, y)`; returns
/// `(slope, intercept, slope standard error)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let stderr = (ss_res / dof / sxx).sqrt();
    (slope, intercept, stderr)
}

fn binom_sigma(p: f64, n: usize) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p * (1.0 - p) / n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Structure suite: oracle identities plus the dressed-spin properties of one
// realization.
// ---------------------------------------------------------------------------

/// Per-site summary row for reports.
#[derive(Debug, Clone, Serialize)]
pub struct SiteRow {
    pub site: usize,
    pub resonant: bool,
    pub m_lo: usize,
    pub m_hi: usize,
    pub comm_norm: f64,
    pub envelope: f64,
    pub tail_rate: Option<f64>,
}

#[derive(Debug)]
pub struct StructureOutcome {
    pub checks: Vec<CheckResult>,
    pub site_rows: Vec<SiteRow>,
    pub kam: KamOutput,
    pub lioms: Option<LiomSet>,
    pub resonant: ResonantSet,
}

impl StructureOutcome {
    pub fn all_pass(&self) -> bool {
        !self.checks.iter().any(CheckResult::is_fail)
    }
}

fn z_label(sigma: usize, site: usize, n: usize) -> f64 {
    if (sigma >> (n - site)) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Certified upper bounds on all pairwise `‖[tau_i, tau_j]‖` from the
/// eigenvector residuals `P_i = tau_i V - V Λ_i`:
///
/// `[tau_i, tau_j] V = P_i Λ_j - P_j Λ_i + tau_i P_j - tau_j P_i`
///
/// exactly, for the stored matrices, so each pair is bounded by
/// `(‖P_i‖(1+‖tau_j‖) + ‖P_j‖(1+‖tau_i‖)) / σ_min(V)`.
pub struct CommutationCertificate {
    pub p_norms: Vec<f64>,
    pub tau_norms: Vec<f64>,
    pub sigma_min: f64,
    /// Numeric labels `Re⟨v_σ|tau_i|v_σ⟩` per site and basis vector.
    pub labels: Vec<Vec<f64>>,
}

impl CommutationCertificate {
    pub fn pair_bound(&self, i: usize, j: usize) -> f64 {
        (self.p_norms[i] * (1.0 + self.tau_norms[j]) + self.p_norms[j] * (1.0 + self.tau_norms[i]))
            / self.sigma_min
    }

    pub fn max_pair_bound(&self) -> f64 {
        let n = self.p_norms.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max(self.pair_bound(i, j));
            }
        }
        worst
    }

    pub fn worst_pair(&self) -> (usize, usize) {
        let n = self.p_norms.len();
        let mut best = (0, 1);
        let mut worst = -1.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let b = self.pair_bound(i, j);
                if b > worst {
                    worst = b;
                    best = (i, j);
                }
            }
        }
        best
    }
}

/// Build the shared eigenbasis `V = e^{-A} (Π_α U_α)` and residuals.
pub fn commutation_certificate(
    lioms: &LiomSet,
    cluster_unitaries: &[(Interval, Mat)],
    tau_norms: Vec<f64>,
) -> Result<CommutationCertificate, VerifyError> {
    let n = lioms.n_sites;
    let dim = 1usize << n;
    let e_dag = linalg::dagger(lioms.dressing.exp_a());
    let v = if cluster_unitaries.is_empty() {
        e_dag
    } else {
        let mut u_hat = linalg::identity(dim);
        for (support, u) in cluster_unitaries {
            let embedded = linalg::embed_block(u, n, support.lo(), support.hi());
            u_hat = linalg::matmul(&u_hat, &embedded);
        }
        linalg::matmul(&e_dag, &u_hat)
    };
    let vtv_defect = linalg::unitarity_defect(&v);
    let sigma_min = (1.0 - vtv_defect).max(0.0).sqrt();
    let mut p_norms = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for site in 1..=n {
        let tau = lioms.tau(site);
        let tv = linalg::matmul(tau, &v);
        // P = tau V - V Λ with Λ the Z labels of the bitstrings
        let mut p = tv.clone();
        for col in 0..dim {
            let lam = z_label(col, site, n);
            for row in 0..dim {
                p[(row, col)] -= v[(row, col)] * lam;
            }
        }
        p_norms.push(linalg::frobenius(&p));
        // numeric labels: diag(V† (tau V))
        let mut lab = Vec::with_capacity(dim);
        for col in 0..dim {
            let mut acc = C64::new(0.0, 0.0);
            for row in 0..dim {
                acc += v[(row, col)].conj() * tv[(row, col)];
            }
            lab.push(acc.re);
        }
        labels.push(lab);
    }
    Ok(CommutationCertificate { p_norms, tau_norms, sigma_min, labels })
}

/// Run the full structural suite for one realization.
pub fn run_structure_suite(params: &ChainParams, seed: u64) -> Result<StructureOutcome, VerifyError> {
    let fields = model::sample_fields(params, seed);
    let kam_out = kam::run_scheme(params, &fields)?;
    let mut checks = Vec::new();

    // oracle identity: recompute the conjugation through an independent
    // dressing and compare with pieces + stored remainder
    let dense = kam_out
        .dense
        .as_ref()
        .expect("structure suite needs the dense oracle; raise caps.dense_cap");
    let h_scale = linalg::frobenius(&dense.h);
    let recomputed = kam::conjugate_exact(&dense.h, &kam_out.generator(), 1, params.caps.dense_cap)?;
    let identity_defect =
        linalg::frobenius(&(&recomputed - &(&dense.pieces + &dense.remainder))) / h_scale;
    checks.push(CheckResult::gate(
        "oracle.identity",
        identity_defect <= 1e-10,
        identity_defect,
        0.0,
        1e-10,
        Provenance::ExactIdentity,
        "relative defect of e^A H e^-A against assembled pieces plus remainder",
    ));
    checks.push(CheckResult::gate(
        "oracle.elimination",
        kam_out.diagnostics.max_elimination_residual <= kam::ELIMINATION_RTOL,
        kam_out.diagnostics.max_elimination_residual,
        0.0,
        kam::ELIMINATION_RTOL,
        Provenance::ExactIdentity,
        "max relative residual of W_nonres + [A, H0] over all scales and anchors",
    ));
    checks.push(CheckResult::gate(
        "oracle.unitarity",
        dense.unitarity_defect <= kam::UNITARITY_TOL,
        dense.unitarity_defect,
        0.0,
        kam::UNITARITY_TOL,
        Provenance::ExactIdentity,
        "Frobenius unitarity defect of e^A",
    ));
    let total = kam_out.diagnostics.norm_table.len().max(1);
    checks.push(CheckResult::info(
        "oracle.norm_surveillance",
        vec![kam_out.diagnostics.bound_violations as f64 / total as f64],
        Provenance::AnalyticBound,
        "fraction of local terms violating the factorial norm envelope (expected 0)",
    ));

    let resonant = lioms::build_resonant_set(&kam_out.resonance, params);
    let lioms_set = match lioms::assemble_and_dress(&kam_out, &resonant, params, &fields) {
        Ok(l) => l,
        Err(e @ lioms::LiomError::Oversized { .. }) | Err(e @ lioms::LiomError::DenseCap { .. }) => {
            checks.push(CheckResult::skipped("liom.dense_checks", format!("{e}")));
            return Ok(StructureOutcome {
                checks,
                site_rows: vec![],
                kam: kam_out,
                lioms: None,
                resonant,
            });
        }
        Err(e) => return Err(e.into()),
    };

    // spin spectra: eigenvalues ±1 with equal multiplicities
    let n = params.n_sites;
    let dim = 1usize << n;
    let mut tau_norms = Vec::with_capacity(n);
    let mut spectrum_defect = 0.0f64;
    let mut multiplicity_ok = true;
    for e in &lioms_set.entries {
        let w = linalg::eigvalsh(&e.tau)?;
        let m_plus = w.iter().filter(|&&x| x > 0.0).count();
        multiplicity_ok &= m_plus == dim / 2;
        let defect = w.iter().fold(0.0f64, |a, &x| a.max((x.abs() - 1.0).abs()));
        spectrum_defect = spectrum_defect.max(defect);
        tau_norms.push(w.iter().fold(0.0f64, |a, &x| a.max(x.abs())));
    }
    checks.push(CheckResult::gate(
        "liom.spectrum",
        spectrum_defect <= 1e-9 && multiplicity_ok,
        spectrum_defect,
        0.0,
        1e-9,
        Provenance::OracleDerived,
        "max eigenvalue distance from ±1; multiplicities must split evenly",
    ));

    // mutual commutation, certified over all pairs, spot-checked densely
    let cluster_unitaries: Vec<(Interval, Mat)> = lioms_set
        .clusters
        .iter()
        .zip(resonant.clusters.iter())
        .map(|((c, e_op), _)| {
            let spins = lioms::joint_diagonalize_cluster(c, e_op)?;
            Ok((c.t_tilde, spins.u))
        })
        .collect::<Result<_, lioms::LiomError>>()?;
    let cert = commutation_certificate(&lioms_set, &cluster_unitaries, tau_norms)?;
    let cert_max = cert.max_pair_bound();
    let (wi, wj) = cert.worst_pair();
    let direct = lioms::commutator_norm(lioms_set.tau(wi + 1), lioms_set.tau(wj + 1))?;
    let comm_max = cert_max.max(direct);
    checks.push(CheckResult::gate(
        "liom.commutation",
        comm_max <= 1e-10,
        comm_max,
        0.0,
        1e-10,
        Provenance::OracleDerived,
        format!("certified bound over all pairs; worst pair ({}, {}) measured densely at {direct:.3e}", wi + 1, wj + 1),
    ));

    // maximality: the joint eigenvalue tuples are pairwise distinct
    let mut label_defect = 0.0f64;
    let mut tuples: Vec<u64> = Vec::with_capacity(dim);
    for sigma in 0..dim {
        let mut bits = 0u64;
        for site in 1..=n {
            let lab = cert.labels[site - 1][sigma];
            let expect = z_label(sigma, site, n);
            label_defect = label_defect.max((lab - expect).abs());
            if lab < 0.0 {
                bits |= 1 << (site - 1);
            }
        }
        tuples.push(bits);
    }
    let distinct = {
        let mut t = tuples.clone();
        t.sort_unstable();
        t.windows(2).all(|w| w[0] != w[1])
    };
    checks.push(CheckResult::gate(
        "liom.maximality",
        distinct && label_defect <= 1e-9,
        label_defect,
        0.0,
        1e-9,
        Provenance::OracleDerived,
        "joint eigenvalue tuples of the spin family are pairwise distinct",
    ));

    // interval assignment: M_i = {i} off the resonant set, the fattened
    // cluster interval on it; buried sites belong to the resonant set
    let mut intervals_ok = true;
    for e in &lioms_set.entries {
        let expect = match resonant.cluster_of(e.site) {
            Some(ci) => resonant.clusters[ci].t_tilde,
            None => Interval::site(e.site),
        };
        intervals_ok &= e.m_interval == expect;
        intervals_ok &= e.m_interval.contains_site(e.site);
        if e.m_interval.len() > 1 {
            intervals_ok &= e.resonant;
        }
    }
    intervals_ok &= lioms::check_interval_structure(&resonant, params);
    checks.push(CheckResult::gate(
        "liom.intervals",
        intervals_ok,
        if intervals_ok { 1.0 } else { 0.0 },
        1.0,
        0.0,
        Provenance::ExactIdentity,
        "M_i assignment and buried-site membership in the resonant set",
    ));

    checks.push(CheckResult::gate(
        "liom.cluster_commutation",
        lioms_set.cluster_comm_defect <= lioms::CLUSTER_COMM_TOL,
        lioms_set.cluster_comm_defect,
        0.0,
        lioms::CLUSTER_COMM_TOL,
        Provenance::ExactIdentity,
        "cluster Hamiltonians commute mutually and with off-set Z operators",
    ));

    // quasi-conservation report (envelope is informational at desk coupling)
    let records = lioms::quasi_conservation_report(&lioms_set, &dense.h, &dense.h_prime, params)?;
    let max_ratio = records.iter().map(|r| r.ratio).fold(0.0f64, f64::max);
    checks.push(CheckResult::info(
        "liom.conservation_envelope",
        vec![max_ratio],
        Provenance::AnalyticBound,
        "max ‖[H, tau_i]‖ over the envelope |M_i| exp(-((1-β)/4)(ln 1/J)^{2-ε})",
    ));

    let site_rows: Vec<SiteRow> = lioms_set
        .entries
        .iter()
        .zip(records.iter())
        .map(|(e, r)| SiteRow {
            site: e.site,
            resonant: e.resonant,
            m_lo: e.m_interval.lo(),
            m_hi: e.m_interval.hi(),
            comm_norm: r.comm_norm,
            envelope: r.envelope,
            tail_rate: e.tail.decay_rate(1e-13),
        })
        .collect();

    Ok(StructureOutcome {
        checks,
        site_rows,
        kam: kam_out,
        lioms: Some(lioms_set),
        resonant,
    })
}

/// Locality of the resonant-set membership event: re-randomizing the fields
/// outside `[i - 2n*R + 1, i + 2n*R - 1]` never changes whether `i` is in
/// the resonant set.
pub fn locality_event_check(
    params: &ChainParams,
    seed: u64,
    trials: usize,
) -> Result<CheckResult, VerifyError> {
    let window_radius = 2 * params.n_star() * params.range;
    let mut mismatches = 0usize;
    for trial in 0..trials {
        let fields = model::sample_fields(params, seed.wrapping_add(trial as u64));
        let map = model::resonance_map(&fields, params)?;
        let rs = lioms::build_resonant_set(&map, params);
        let site = 1 + (trial % params.n_sites);
        let lo = site.saturating_sub(window_radius - 1).max(1);
        let hi = (site + window_radius - 1).min(params.n_sites);
        let window = Interval::new(lo, hi).expect("window valid");
        let re_fields = model::resample_fields_outside(&fields, window, seed ^ 0xabcd ^ trial as u64);
        let re_map = model::resonance_map(&re_fields, params)?;
        let re_rs = lioms::build_resonant_set(&re_map, params);
        if rs.in_r(site) != re_rs.in_r(site) {
            mismatches += 1;
        }
    }
    Ok(CheckResult::gate(
        "liom.locality_event",
        mismatches == 0,
        mismatches as f64,
        0.0,
        0.0,
        Provenance::ExactIdentity,
        format!("resonant-set membership under re-randomization outside a 2n*R window, {trials} trials"),
    ))
}

// ---------------------------------------------------------------------------
// Probability suite: Monte Carlo resonance statistics.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    pub anchor: usize,
    pub scale: usize,
    pub rate: f64,
    pub union_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailRow {
    pub len: usize,
    pub count: usize,
    pub survival: f64,
}

#[derive(Debug, Serialize)]
pub struct ProbabilityOutcome {
    pub checks: Vec<CheckResult>,
    pub rate_rows: Vec<RateRow>,
    pub tail_rows: Vec<TailRow>,
    pub site_in_r_rate: Vec<f64>,
    pub samples: usize,
}

impl ProbabilityOutcome {
    pub fn all_pass(&self) -> bool {
        !self.checks.iter().any(CheckResult::is_fail)
    }
}

/// Monte Carlo over disorder seeds: per-interval resonance rates against the
/// union bound, the single-field direction rate against its exact value,
/// the cluster-size tail, and the linear-in-delta law.
pub fn run_probability_suite(
    params: &ChainParams,
    num_samples: usize,
    seed0: u64,
) -> Result<ProbabilityOutcome, VerifyError> {
    assert!(num_samples >= 100, "statistics need at least 100 samples");
    let n = params.n_sites;
    let n_star = params.n_star();
    let delta = params.delta();
    let mut res_counts = vec![vec![0usize; n]; n_star];
    let mut single_eta_counts = vec![0usize; n];
    let mut in_r_counts = vec![0usize; n];
    let mut m_len_counts = vec![0usize; n + 1];
    let mut m_total = 0usize;
    for k in 0..num_samples {
        let fields = model::sample_fields(params, seed0.wrapping_add(k as u64));
        let map = model::resonance_map(&fields, params)?;
        for m in 1..=n_star {
            for i in 1..=n {
                if map.resonant(i, m) {
                    res_counts[m - 1][i - 1] += 1;
                }
            }
        }
        for i in 1..=n {
            if fields.h[i - 1] < delta {
                single_eta_counts[i - 1] += 1;
            }
        }
        let rs = lioms::build_resonant_set(&map, params);
        for site in 1..=n {
            if rs.in_r(site) {
                in_r_counts[site - 1] += 1;
            }
            let m_len = match rs.cluster_of(site) {
                Some(ci) => rs.clusters[ci].t_tilde.len(),
                None => 1,
            };
            m_len_counts[m_len] += 1;
            m_total += 1;
        }
    }

    let mut checks = Vec::new();
    let mut rate_rows = Vec::new();
    let mut worst_union_excess = f64::NEG_INFINITY;
    for m in 1..=n_star {
        for i in 1..=n {
            let rate = res_counts[m - 1][i - 1] as f64 / num_samples as f64;
            let len = params.scale_interval(i, m).len();
            let bound = (3f64.powi(len as i32) - 1.0) * 2.0 * delta;
            rate_rows.push(RateRow { anchor: i, scale: m, rate, union_bound: bound });
            let sigma = binom_sigma(rate.max(bound.min(0.5)), num_samples);
            let excess = rate - (bound + 3.0 * sigma);
            worst_union_excess = worst_union_excess.max(excess);
        }
    }
    checks.push(CheckResult::gate(
        "stats.union_bound",
        worst_union_excess <= 0.0,
        worst_union_excess,
        0.0,
        0.0,
        Provenance::AnalyticBound,
        "per-interval resonance rate ≤ (3^len - 1)·2δ + 3σ for every anchor and scale",
    ));

    // single direction η = e_i: the resonance event is exactly {h_i < δ}
    let mut worst_single = 0.0f64;
    for i in 1..=n {
        let rate = single_eta_counts[i - 1] as f64 / num_samples as f64;
        let sigma = binom_sigma(delta, num_samples);
        worst_single = worst_single.max((rate - delta).abs() / sigma.max(1e-300));
    }
    checks.push(CheckResult::gate(
        "stats.single_direction",
        worst_single <= 3.0,
        worst_single,
        0.0,
        3.0,
        Provenance::Statistical,
        "empirical Prob(h_i < δ) within 3σ of δ for every site",
    ));

    // fixed two-site direction: Prob(|h_i - h_{i+1}| < δ) ≤ 2δ + 3σ
    if n >= 2 {
        let mut count = 0usize;
        for k in 0..num_samples {
            let fields = model::sample_fields(params, seed0.wrapping_add(k as u64));
            if (fields.h[0] - fields.h[1]).abs() < delta {
                count += 1;
            }
        }
        let rate = count as f64 / num_samples as f64;
        let bound = 2.0 * delta;
        let sigma = binom_sigma(bound.min(0.5), num_samples);
        checks.push(CheckResult::gate(
            "stats.two_site_direction",
            rate <= bound + 3.0 * sigma,
            rate,
            bound,
            3.0 * sigma,
            Provenance::Statistical,
            "difference direction rate against the uniform-measure bound 2δ",
        ));
    }

    // cluster-size survival: monotone and log-linear within error bars
    let mut tail_rows = Vec::new();
    let lens: Vec<usize> = (1..=n).filter(|&l| m_len_counts[l] > 0).collect();
    for &l in &lens {
        let count: usize = (l..=n).map(|x| m_len_counts[x]).sum();
        tail_rows.push(TailRow { len: l, count, survival: count as f64 / m_total as f64 });
    }
    let monotone = tail_rows.windows(2).all(|w| w[1].survival <= w[0].survival + 1e-12);
    // The exponential-shape window starts at the smallest interior fattened
    // size 2 n*R (below it the survival is a structural plateau) and stops
    // short of the chain length (the last point is truncated by the finite
    // chain). Sites within one realization are correlated, so the error
    // bars use one effective sample per realization.
    let lo_len = 2 * n_star * params.range;
    let big: Vec<&TailRow> = tail_rows
        .iter()
        .filter(|r| r.len >= lo_len && r.len < n && r.count >= 25)
        .collect();
    let loglin_ok = if big.len() >= 3 {
        let xs: Vec<f64> = big.iter().map(|r| r.len as f64).collect();
        let ys: Vec<f64> = big.iter().map(|r| r.survival.ln()).collect();
        let (slope, intercept, _) = linear_fit(&xs, &ys);
        big.iter().all(|r| {
            let fit = intercept + slope * r.len as f64;
            let sigma_log = binom_sigma(r.survival, num_samples) / r.survival;
            (r.survival.ln() - fit).abs() <= 3.0 * sigma_log + 1e-3
        })
    } else {
        true // too few populated sizes to constrain a line
    };
    checks.push(CheckResult::gate(
        "stats.cluster_tail",
        monotone && loglin_ok,
        if monotone && loglin_ok { 1.0 } else { 0.0 },
        1.0,
        0.0,
        Provenance::Statistical,
        format!("survival of |M_j| monotone everywhere, log-linear on sizes {lo_len}..{}", n - 1),
    ));

    // informational: resonant-set membership rate against the asymptotic
    // envelope J^{β/2}
    let envelope = params.coupling.powf(params.beta / 2.0);
    let max_in_r = in_r_counts.iter().map(|&c| c as f64 / num_samples as f64).fold(0.0, f64::max);
    checks.push(CheckResult::info(
        "stats.in_r_rate",
        vec![max_in_r, envelope],
        Provenance::AnalyticBound,
        "max site rate of resonant-set membership vs the small-coupling envelope",
    ));

    Ok(ProbabilityOutcome {
        checks,
        rate_rows,
        tail_rows,
        site_in_r_rate: in_r_counts.iter().map(|&c| c as f64 / num_samples as f64).collect(),
        samples: num_samples,
    })
}

/// Scale-1 resonance rate for each δ of a grid, with the log-log slope
/// check: the law is linear, so the slope must sit at 1.
pub fn delta_linearity(
    params: &ChainParams,
    deltas: &[f64],
    num_samples: usize,
    seed0: u64,
) -> Result<(CheckResult, Vec<(f64, f64)>), VerifyError> {
    let n = params.n_sites;
    let mut rates = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let mut p = params.clone();
        p.overrides.delta = Some(d);
        let mut count = 0usize;
        for k in 0..num_samples {
            let fields = model::sample_fields(&p, seed0.wrapping_add(k as u64));
            for i in 1..=n {
                let c = model::resonance_check(&fields, i, 1, d, p.range, p.caps.enum_cap)?;
                if c.resonant {
                    count += 1;
                }
            }
        }
        rates.push(count as f64 / (num_samples * n) as f64);
    }
    let xs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = rates.iter().map(|r| r.ln()).collect();
    let (slope, _, stderr) = linear_fit(&xs, &ys);
    let check = CheckResult::gate(
        "stats.delta_slope",
        (slope - 1.0).abs() <= 0.2,
        slope,
        1.0,
        0.2,
        Provenance::Statistical,
        format!("log-log slope of resonance rate vs δ over {deltas:?} (stderr {stderr:.3})"),
    );
    Ok((check, deltas.iter().copied().zip(rates).collect()))
}

// ---------------------------------------------------------------------------
// Scaling suite: remainder / commutator / transport residual vs coupling.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingQuantity {
    Remainder,
    Commutator,
    TransportResidual,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingStudy {
    pub quantity: ScalingQuantity,
    pub n_star: usize,
    pub j_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub expected: f64,
    pub band: f64,
    pub pass: bool,
    pub seed: u64,
}

/// Measure one quantity across a 4-point geometric coupling grid with `n*`
/// and `δ` pinned, on a seed whose realization carries no resonances.
pub fn run_scaling_suite(
    params_base: &ChainParams,
    quantity: ScalingQuantity,
    seed: u64,
) -> Result<ScalingStudy, VerifyError> {
    let n_star = params_base
        .overrides
        .n_star
        .ok_or_else(|| VerifyError::Setup("scaling needs a pinned n*".into()))?;
    if params_base.overrides.delta.is_none() {
        return Err(VerifyError::Setup("scaling needs a pinned δ".into()));
    }
    let j0 = params_base.coupling;
    let j_grid: Vec<f64> = (0..4).map(|k| j0 / 2f64.powi(k)).collect();
    let fields = model::sample_fields(params_base, seed);
    {
        let map = model::resonance_map(&fields, params_base)?;
        if map.any_resonant() {
            return Err(VerifyError::Setup(format!(
                "seed {seed} fires a resonance under the pinned δ; pick another seed"
            )));
        }
    }
    let mut values = Vec::with_capacity(j_grid.len());
    for &j in &j_grid {
        let mut p = params_base.clone();
        p.coupling = j;
        let kam_out = kam::run_scheme(&p, &fields)?;
        let v = match quantity {
            ScalingQuantity::Remainder => {
                kam_out.dense.as_ref().expect("dense cap").remainder_norm
            }
            ScalingQuantity::Commutator => {
                let rs = lioms::build_resonant_set(&kam_out.resonance, &p);
                let lioms_set = lioms::assemble_and_dress(&kam_out, &rs, &p, &fields)?;
                let dense = kam_out.dense.as_ref().expect("dense cap");
                let records =
                    lioms::quasi_conservation_report(&lioms_set, &dense.h, &dense.h_prime, &p)?;
                records.iter().map(|r| r.comm_norm).fold(0.0, f64::max)
            }
            ScalingQuantity::TransportResidual => {
                let rs = lioms::build_resonant_set(&kam_out.resonance, &p);
                let cluster_ops: Vec<_> = rs
                    .clusters
                    .iter()
                    .map(|c| Ok((c.clone(), lioms::build_e_alpha(c, &kam_out, &fields)?)))
                    .collect::<Result<_, lioms::LiomError>>()?;
                let i_star = p.n_sites / 2;
                let cut = crate::transport::select_x(&rs.clusters, &p, i_star)?;
                let report = crate::transport::build_observable(
                    &kam_out,
                    &rs,
                    &cluster_ops,
                    &p,
                    &fields,
                    cut,
                )?;
                report.residual
            }
        };
        values.push(v);
    }
    let xs: Vec<f64> = j_grid.iter().map(|j| j.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (slope, _, stderr) = linear_fit(&xs, &ys);
    let expected = (n_star + 1) as f64;
    let band = 0.3;
    Ok(ScalingStudy {
        quantity,
        n_star,
        j_grid,
        values,
        slope,
        slope_stderr: stderr,
        expected,
        band,
        pass: (slope - expected).abs() <= band,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Matrix-analysis property: the Schur/Hadamard norm bound.
// ---------------------------------------------------------------------------

/// `‖B ∘ C‖ ≤ ‖B‖ max_i (Σ_j |C_ij|²)^{1/2}` over random complex pairs.
pub fn hadamard_property(trials: usize, max_dim: usize, seed: u64) -> Result<CheckResult, VerifyError> {
    assert!(trials >= 100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let dim = rng.gen_range(2..=max_dim);
        let rand_mat = |rng: &mut ChaCha8Rng| {
            Mat::from_shape_fn((dim, dim), |_| {
                C64::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0)
            })
        };
        let b = rand_mat(&mut rng);
        let c = rand_mat(&mut rng);
        let had = Mat::from_shape_fn((dim, dim), |(i, j)| b[(i, j)] * c[(i, j)]);
        let lhs = linalg::spectral_norm_general(&had)?;
        let b_norm = linalg::spectral_norm_general(&b)?;
        let row_max = (0..dim)
            .map(|i| (0..dim).map(|j| c[(i, j)].norm_sqr()).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        worst = worst.max(lhs - b_norm * row_max * (1.0 + 1e-12));
    }
    Ok(CheckResult::gate(
        "prop.hadamard",
        worst <= 0.0,
        worst,
        0.0,
        0.0,
        Provenance::AnalyticBound,
        format!("{trials} random pairs up to dimension {max_dim}; max bound excess"),
    ))
}

// ---------------------------------------------------------------------------
// Negative controls: a corrupted construction must fail its check.
// ---------------------------------------------------------------------------

/// Flip the sign of one generator term and re-run the oracle identity; the
/// check passes when the corrupted run FAILS.
pub fn negative_control_generator(params: &ChainParams, seed: u64) -> Result<CheckResult, VerifyError> {
    let fields = model::sample_fields(params, seed);
    let kam_out = kam::run_scheme(params, &fields)?;
    let dense = kam_out.dense.as_ref().expect("dense oracle");
    let mut corrupted = kam_out.generator();
    // find a nonzero generator term to flip
    let target = kam_out
        .scales
        .iter()
        .flat_map(|s| s.anchors.iter().map(move |(&i, d)| (s.m, i, d.a.clone())))
        .find(|(_, _, a)| a.is_some());
    let Some((m, i, Some(a))) = target else {
        return Err(VerifyError::Setup("realization has no generator term to corrupt".into()));
    };
    corrupted.push(m as u32, i, a.scaled(-2.0 * params.coupling.powi(m as i32))).map_err(kam::KamError::from)?;
    let recomputed = kam::conjugate_exact(&dense.h, &corrupted, 1, params.caps.dense_cap)?;
    let defect =
        linalg::frobenius(&(&recomputed - &(&dense.pieces + &dense.remainder))) / linalg::frobenius(&dense.h);
    Ok(CheckResult::gate(
        "control.corrupted_generator",
        defect > 1e-10,
        defect,
        0.0,
        1e-10,
        Provenance::Plumbing,
        format!("sign flip of A^({m})_{i} must break the oracle identity"),
    ))
}

/// Conjugate one dressed spin by a basis transposition and re-run the
/// commutation check; the control passes when commutation FAILS.
pub fn negative_control_tau(params: &ChainParams, seed: u64) -> Result<CheckResult, VerifyError> {
    let fields = model::sample_fields(params, seed);
    let kam_out = kam::run_scheme(params, &fields)?;
    let resonant = lioms::build_resonant_set(&kam_out.resonance, params);
    let mut lioms_set = lioms::assemble_and_dress(&kam_out, &resonant, params, &fields)?;
    let dim = 1usize << params.n_sites;
    // swap two basis states in tau_1
    let tau = &mut lioms_set.entries[0].tau;
    let (a, b) = (0usize, dim / 2 + 1);
    for r in 0..dim {
        let tmp = tau[(r, a)];
        tau[(r, a)] = tau[(r, b)];
        tau[(r, b)] = tmp;
    }
    for c in 0..dim {
        let tmp = tau[(a, c)];
        tau[(a, c)] = tau[(b, c)];
        tau[(b, c)] = tmp;
    }
    let mut worst = 0.0f64;
    for other in 2..=params.n_sites.min(4) {
        worst = worst.max(lioms::commutator_norm(&lioms_set.entries[0].tau, lioms_set.tau(other))?);
    }
    Ok(CheckResult::gate(
        "control.shuffled_tau",
        worst > 1e-10,
        worst,
        0.0,
        1e-10,
        Provenance::Plumbing,
        "a basis shuffle of one spin must break mutual commutation",
    ))
}
