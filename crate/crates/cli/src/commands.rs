//! Subcommand implementations. Realizations fan out over a rayon pool;
//! every result is collected by seed index and written by a single thread,
//! so the emitted bytes are independent of the parallelism degree.

use crate::config::RunConfig;
use crate::reports::{self, fmt_f64, CsvTable};
use anyhow::{Context, Result};
use qliom_core::verify::{CheckResult, CheckStatus};
use qliom_core::{kam, lioms, model, transport, verify};
use rayon::prelude::*;
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit-code contract: 0 all hard checks pass, 1 hard-check failure,
/// 2 configuration error, 3 capacity exclusions emptied a requested suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    CheckFailed,
    Empty,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::CheckFailed => 1,
            Outcome::Empty => 3,
        }
    }
}

fn in_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .context("build worker pool")?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SiteSummary {
    site: usize,
    resonant: bool,
    m_lo: usize,
    m_hi: usize,
    tail_norms: Vec<f64>,
}

#[derive(Serialize)]
struct BuildSummary {
    version: String,
    seed: u64,
    params: crate::config::ParamsConfig,
    fields: model::FieldRealization,
    resonance: model::ResonanceMap,
    norm_table: Vec<kam::NormRecord>,
    max_elimination_residual: f64,
    bound_violations: usize,
    dropped_terms: usize,
    remainder_norm: Option<f64>,
    remainder_scaled: Option<f64>,
    unitarity_defect: Option<f64>,
    oversized: bool,
    sites: Option<Vec<SiteSummary>>,
}

pub fn cmd_build(cfg: &RunConfig) -> Result<Outcome> {
    let params = cfg.params.to_chain_params()?;
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let seeds = cfg.seeds.seeds();
    let summaries: Vec<Result<BuildSummary>> = in_pool(cfg, || {
        seeds
            .par_iter()
            .map(|&seed| build_one(cfg, &params, seed))
            .collect()
    })?;
    let mut oversized_count = 0usize;
    for (seed, summary) in seeds.iter().zip(summaries) {
        let summary = summary?;
        if summary.oversized {
            oversized_count += 1;
        }
        reports::write_json(&out_dir.join(format!("build_seed{seed}.json")), &summary)?;
    }
    eprintln!(
        "build: {} realizations written to {} ({} oversized)",
        seeds.len(),
        out_dir.display(),
        oversized_count
    );
    Ok(Outcome::Ok)
}

fn build_one(cfg: &RunConfig, params: &qliom_core::ChainParams, seed: u64) -> Result<BuildSummary> {
    let fields = model::sample_fields(params, seed);
    let kam_out = kam::run_scheme(params, &fields)?;
    let resonant = lioms::build_resonant_set(&kam_out.resonance, params);
    let (oversized, sites) = match lioms::assemble_and_dress(&kam_out, &resonant, params, &fields) {
        Ok(lset) => {
            let rows = lset
                .entries
                .iter()
                .map(|e| SiteSummary {
                    site: e.site,
                    resonant: e.resonant,
                    m_lo: e.m_interval.lo(),
                    m_hi: e.m_interval.hi(),
                    tail_norms: e.tail.tail_norms.clone(),
                })
                .collect();
            (false, Some(rows))
        }
        Err(lioms::LiomError::Oversized { .. }) | Err(lioms::LiomError::DenseCap { .. }) => {
            (true, None)
        }
        Err(e) => return Err(e.into()),
    };
    let (remainder_norm, remainder_scaled, unitarity_defect) = match &kam_out.dense {
        Some(d) => (
            Some(d.remainder_norm),
            Some(d.remainder_norm / params.coupling.powi(kam_out.n_star as i32 + 1)),
            Some(d.unitarity_defect),
        ),
        None => (None, None, None),
    };
    Ok(BuildSummary {
        version: VERSION.into(),
        seed,
        params: cfg.params.clone(),
        fields,
        resonance: kam_out.resonance.clone(),
        norm_table: kam_out.diagnostics.norm_table.clone(),
        max_elimination_residual: kam_out.diagnostics.max_elimination_residual,
        bound_violations: kam_out.diagnostics.bound_violations,
        dropped_terms: kam_out.diagnostics.dropped_terms,
        remainder_norm,
        remainder_scaled,
        unitarity_defect,
        oversized,
        sites,
    })
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VerifyReport {
    version: String,
    params: crate::config::ParamsConfig,
    seeds: Vec<u64>,
    checks: Vec<NamedCheck>,
    failures: usize,
    skipped_realizations: usize,
}

#[derive(Serialize)]
struct NamedCheck {
    case: String,
    #[serde(flatten)]
    check: CheckResult,
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    let params = cfg.params.to_chain_params()?;
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let seeds = cfg.seeds.seeds();
    let outcomes: Vec<Result<verify::StructureOutcome>> = in_pool(cfg, || {
        seeds
            .par_iter()
            .map(|&seed| verify::run_structure_suite(&params, seed).map_err(Into::into))
            .collect()
    })?;

    let mut named: Vec<(String, CheckResult)> = Vec::new();
    let mut skipped_realizations = 0usize;
    let mut sites_csv = if cfg.formats.csv {
        Some(CsvTable::create(
            &out_dir,
            "verify_sites",
            &["seed", "site", "resonant", "m_lo", "m_hi", "comm_norm", "envelope", "tail_rate"],
        )?)
    } else {
        None
    };
    for (&seed, outcome) in seeds.iter().zip(outcomes) {
        let outcome = outcome?;
        if outcome.lioms.is_none() {
            skipped_realizations += 1;
        }
        for c in &outcome.checks {
            named.push((format!("seed{seed}/{}", c.id), c.clone()));
        }
        if let Some(table) = sites_csv.as_mut() {
            for row in &outcome.site_rows {
                table.row(&[
                    seed.to_string(),
                    row.site.to_string(),
                    row.resonant.to_string(),
                    row.m_lo.to_string(),
                    row.m_hi.to_string(),
                    fmt_f64(row.comm_norm),
                    fmt_f64(row.envelope),
                    row.tail_rate.map(fmt_f64).unwrap_or_default(),
                ])?;
            }
        }
    }
    if let Some(table) = sites_csv {
        table.finish()?;
    }

    // cross-realization checks on the first seed
    let seed0 = seeds[0];
    named.push((
        format!("seed{seed0}/liom.locality_event"),
        verify::locality_event_check(&params, seed0, 50)?,
    ));
    named.push(("suite/prop.hadamard".into(), verify::hadamard_property(500, 64, seed0)?));
    named.push((
        format!("seed{seed0}/control.corrupted_generator"),
        verify::negative_control_generator(&params, seed0)?,
    ));
    named.push((
        format!("seed{seed0}/control.shuffled_tau"),
        verify::negative_control_tau(&params, seed0)?,
    ));

    let failures = named.iter().filter(|(_, c)| c.is_fail()).count();
    let report = VerifyReport {
        version: VERSION.into(),
        params: cfg.params.clone(),
        seeds: seeds.clone(),
        checks: named
            .iter()
            .map(|(case, check)| NamedCheck { case: case.clone(), check: check.clone() })
            .collect(),
        failures,
        skipped_realizations,
    };
    if cfg.formats.json {
        reports::write_json(&out_dir.join("verify.json"), &report)?;
    }
    if cfg.formats.junit {
        reports::write_junit(&out_dir.join("verify.xml"), "verify", &named)?;
    }
    for (case, check) in &named {
        if check.status != CheckStatus::Pass {
            eprintln!("verify: {:?} {case} — {}", check.status, check.detail);
        }
    }
    eprintln!("verify: {} checks, {failures} failures, reports in {}", named.len(), out_dir.display());
    if failures > 0 {
        return Ok(Outcome::CheckFailed);
    }
    if skipped_realizations == seeds.len() {
        return Ok(Outcome::Empty);
    }
    Ok(Outcome::Ok)
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EnsembleReport {
    version: String,
    params: crate::config::ParamsConfig,
    samples: usize,
    seed0: u64,
    checks: Vec<NamedCheck>,
    site_in_r_rate: Vec<f64>,
    delta_grid: Vec<(f64, f64)>,
    failures: usize,
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<Outcome> {
    let params = cfg.params.to_chain_params()?;
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let seed0 = cfg.seeds.seeds()[0];
    let outcome = verify::run_probability_suite(&params, cfg.ensemble.samples, seed0)?;
    let (delta_check, delta_rows) = verify::delta_linearity(
        &params,
        &cfg.ensemble.deltas,
        cfg.ensemble.delta_samples,
        seed0,
    )?;

    let mut named: Vec<(String, CheckResult)> = outcome
        .checks
        .iter()
        .map(|c| (format!("ensemble/{}", c.id), c.clone()))
        .collect();
    named.push(("ensemble/stats.delta_slope".into(), delta_check));

    if cfg.formats.csv {
        let mut rates = CsvTable::create(&out_dir, "ensemble_rates", &["anchor", "scale", "rate", "union_bound"])?;
        for r in &outcome.rate_rows {
            rates.row(&[
                r.anchor.to_string(),
                r.scale.to_string(),
                fmt_f64(r.rate),
                fmt_f64(r.union_bound),
            ])?;
        }
        rates.finish()?;
        let mut tail = CsvTable::create(&out_dir, "ensemble_tail", &["len", "count", "survival"])?;
        for r in &outcome.tail_rows {
            tail.row(&[r.len.to_string(), r.count.to_string(), fmt_f64(r.survival)])?;
        }
        tail.finish()?;
        let mut dl = CsvTable::create(&out_dir, "ensemble_delta", &["delta", "rate"])?;
        for (d, r) in &delta_rows {
            dl.row(&[fmt_f64(*d), fmt_f64(*r)])?;
        }
        dl.finish()?;
    }

    let failures = named.iter().filter(|(_, c)| c.is_fail()).count();
    let report = EnsembleReport {
        version: VERSION.into(),
        params: cfg.params.clone(),
        samples: outcome.samples,
        seed0,
        checks: named
            .iter()
            .map(|(case, check)| NamedCheck { case: case.clone(), check: check.clone() })
            .collect(),
        site_in_r_rate: outcome.site_in_r_rate.clone(),
        delta_grid: delta_rows,
        failures,
    };
    if cfg.formats.json {
        reports::write_json(&out_dir.join("ensemble.json"), &report)?;
    }
    if cfg.formats.junit {
        reports::write_junit(&out_dir.join("ensemble.xml"), "ensemble", &named)?;
    }
    eprintln!(
        "ensemble: {} samples, {} checks, {failures} failures, reports in {}",
        outcome.samples,
        named.len(),
        out_dir.display()
    );
    Ok(if failures > 0 { Outcome::CheckFailed } else { Outcome::Ok })
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TransportRow {
    seed: u64,
    i_star: usize,
    x: usize,
    ell: usize,
    residual: f64,
    residual_primed: f64,
    o_norm: f64,
    o_prime_norm: f64,
    o_dprime_norm: f64,
    trace_shift: f64,
    o_norm_envelope: f64,
    residual_envelope: f64,
}

#[derive(Serialize)]
struct TransportReportDoc {
    version: String,
    params: crate::config::ParamsConfig,
    rows: Vec<TransportRow>,
    excluded: Vec<(u64, String)>,
}

enum TransportOne {
    Row(Box<TransportRow>),
    Excluded(String),
}

pub fn cmd_transport(cfg: &RunConfig) -> Result<Outcome> {
    let params = cfg.params.to_chain_params()?;
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let seeds = cfg.seeds.seeds();
    let i_star = cfg.transport.i_star.unwrap_or(params.n_sites / 2);
    let results: Vec<Result<TransportOne>> = in_pool(cfg, || {
        seeds
            .par_iter()
            .map(|&seed| transport_one(&params, seed, i_star))
            .collect()
    })?;
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (&seed, res) in seeds.iter().zip(results) {
        match res? {
            TransportOne::Row(r) => rows.push(*r),
            TransportOne::Excluded(reason) => excluded.push((seed, reason)),
        }
    }
    if cfg.formats.csv {
        let mut table = CsvTable::create(
            &out_dir,
            "transport",
            &[
                "seed", "i_star", "x", "ell", "residual", "residual_primed", "o_norm",
                "o_prime_norm", "o_dprime_norm", "trace_shift", "o_norm_envelope",
                "residual_envelope",
            ],
        )?;
        for r in &rows {
            table.row(&[
                r.seed.to_string(),
                r.i_star.to_string(),
                r.x.to_string(),
                r.ell.to_string(),
                fmt_f64(r.residual),
                fmt_f64(r.residual_primed),
                fmt_f64(r.o_norm),
                fmt_f64(r.o_prime_norm),
                fmt_f64(r.o_dprime_norm),
                fmt_f64(r.trace_shift),
                fmt_f64(r.o_norm_envelope),
                fmt_f64(r.residual_envelope),
            ])?;
        }
        table.finish()?;
    }
    let doc = TransportReportDoc {
        version: VERSION.into(),
        params: cfg.params.clone(),
        rows,
        excluded: excluded.clone(),
    };
    if cfg.formats.json {
        reports::write_json(&out_dir.join("transport.json"), &doc)?;
    }
    eprintln!(
        "transport: {} realizations, {} excluded, reports in {}",
        seeds.len(),
        excluded.len(),
        out_dir.display()
    );
    if doc.rows.is_empty() {
        return Ok(Outcome::Empty);
    }
    Ok(Outcome::Ok)
}

fn transport_one(params: &qliom_core::ChainParams, seed: u64, i_star: usize) -> Result<TransportOne> {
    let fields = model::sample_fields(params, seed);
    let kam_out = kam::run_scheme(params, &fields)?;
    let resonant = lioms::build_resonant_set(&kam_out.resonance, params);
    for c in &resonant.clusters {
        if c.t_tilde.len() > params.caps.support_cap {
            return Ok(TransportOne::Excluded(format!(
                "oversized cluster [{}, {}]",
                c.t_tilde.lo(),
                c.t_tilde.hi()
            )));
        }
    }
    let cluster_ops: Vec<_> = resonant
        .clusters
        .iter()
        .map(|c| Ok((c.clone(), lioms::build_e_alpha(c, &kam_out, &fields)?)))
        .collect::<Result<_, lioms::LiomError>>()?;
    let cut = match transport::select_x(&resonant.clusters, params, i_star) {
        Ok(c) => c,
        Err(transport::TransportError::NoAdmissibleCut) => {
            return Ok(TransportOne::Excluded("no admissible cut site".into()));
        }
        Err(e) => return Err(e.into()),
    };
    let report = transport::build_observable(&kam_out, &resonant, &cluster_ops, params, &fields, cut)?;
    Ok(TransportOne::Row(Box::new(TransportRow {
        seed,
        i_star,
        x: report.cut.x,
        ell: report.cut.ell,
        residual: report.residual,
        residual_primed: report.residual_primed,
        o_norm: report.o_norm,
        o_prime_norm: report.o_prime_norm,
        o_dprime_norm: report.o_dprime_norm,
        trace_shift: report.trace_shift,
        o_norm_envelope: report.o_norm_envelope,
        residual_envelope: report.residual_envelope,
    })))
}

// ---------------------------------------------------------------------------
// dynamics
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DynamicsSummary {
    version: String,
    seed: u64,
    i_star: usize,
    x: usize,
    ell: usize,
    residual: f64,
    o_norm: f64,
    t_max: f64,
    steps: usize,
    max_defect: f64,
    max_integrated: f64,
    budget_ok: bool,
    uniform_bound_ok: bool,
}

pub fn cmd_dynamics(cfg: &RunConfig) -> Result<Outcome> {
    let params = cfg.params.to_chain_params()?;
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;
    let seeds = cfg.seeds.seeds();
    let i_star = cfg.dynamics.i_star.unwrap_or(params.n_sites / 2);
    let mut failures = 0usize;
    let mut produced = 0usize;
    for &seed in &seeds {
        let one = transport_one(&params, seed, i_star)?;
        let TransportOne::Row(_) = &one else {
            eprintln!("dynamics: seed {seed} excluded");
            continue;
        };
        // rebuild the full report (transport_one only returns the summary row)
        let fields = model::sample_fields(&params, seed);
        let kam_out = kam::run_scheme(&params, &fields)?;
        let resonant = lioms::build_resonant_set(&kam_out.resonance, &params);
        let cluster_ops: Vec<_> = resonant
            .clusters
            .iter()
            .map(|c| Ok((c.clone(), lioms::build_e_alpha(c, &kam_out, &fields)?)))
            .collect::<Result<_, lioms::LiomError>>()?;
        let cut = transport::select_x(&resonant.clusters, &params, i_star)?;
        let report =
            transport::build_observable(&kam_out, &resonant, &cluster_ops, &params, &fields, cut)?;
        let psi0 = match cfg.dynamics.initial_state.as_str() {
            "random-product" => transport::random_product_state(params.n_sites, cfg.dynamics.state_seed),
            _ => transport::domain_wall_state(params.n_sites, i_star),
        };
        let dense = kam_out.dense.as_ref().expect("dense oracle required for dynamics");
        let trace = transport::dynamics_check(
            &dense.h,
            &report.j_e,
            &report.o,
            &psi0,
            cfg.dynamics.t_max,
            cfg.dynamics.steps,
        )?;
        if cfg.formats.csv {
            let mut table = CsvTable::create(
                &out_dir,
                &format!("dynamics_seed{seed}"),
                &["t", "j_inst", "integrated", "o_expect", "defect", "eps_quad"],
            )?;
            for k in 0..trace.t.len() {
                table.row(&[
                    fmt_f64(trace.t[k]),
                    fmt_f64(trace.j_inst[k]),
                    fmt_f64(trace.integrated[k]),
                    fmt_f64(trace.o_expect[k]),
                    fmt_f64(trace.defect[k]),
                    fmt_f64(trace.eps_quad[k]),
                ])?;
            }
            table.finish()?;
        }
        let budget_ok = (0..trace.t.len())
            .all(|k| trace.defect[k] <= trace.t[k] * report.residual + trace.eps_quad[k]);
        let max_defect = trace.defect.iter().copied().fold(0.0, f64::max);
        let max_integrated = trace.integrated.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let uniform_bound_ok =
            max_integrated <= 2.0 * report.o_norm + cfg.dynamics.t_max * report.residual;
        if !budget_ok || !uniform_bound_ok {
            failures += 1;
        }
        let summary = DynamicsSummary {
            version: VERSION.into(),
            seed,
            i_star,
            x: report.cut.x,
            ell: report.cut.ell,
            residual: report.residual,
            o_norm: report.o_norm,
            t_max: cfg.dynamics.t_max,
            steps: cfg.dynamics.steps,
            max_defect,
            max_integrated,
            budget_ok,
            uniform_bound_ok,
        };
        if cfg.formats.json {
            reports::write_json(&out_dir.join(format!("dynamics_seed{seed}.json")), &summary)?;
        }
        produced += 1;
    }
    eprintln!(
        "dynamics: {produced} traces, {failures} budget failures, reports in {}",
        out_dir.display()
    );
    if produced == 0 {
        return Ok(Outcome::Empty);
    }
    Ok(if failures > 0 { Outcome::CheckFailed } else { Outcome::Ok })
}

pub fn cmd_schema(out: &mut impl std::io::Write) -> Result<()> {
    let template = crate::config::schema_template();
    writeln!(out, "{}", serde_json::to_string_pretty(&template)?)?;
    Ok(())
}
