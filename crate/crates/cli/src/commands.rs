//! One function per subcommand. Each returns a report; side effects are
//! limited to the output paths it is given.

use std::fs;
use std::path::Path;

use latticeglm::artifact::{load_model, save_model, ModelArtifact, Payload};
use latticeglm::data::{ingest_csv, ingest_table, Ingested, Standardizer, Table as CsvTable};
use latticeglm::decomposition::{warm_start, Refinement};
use latticeglm::evaluation::{estimate_rho, waic, RgFlowReport};
use latticeglm::fit::{fit_model, predict as predict_rows, FittedModel, Params, PredictorRow};
use latticeglm::glm::FamilySpec;
use latticeglm::lattice::{build_bins, gamma_local, max_bins, BinStrategy, LatticeDim, LatticeSpec};
use latticeglm::simulate::{
    config_hash, residual_variance, run_regularization_comparison, run_replica_check, run_rg_flow,
};
use latticeglm::stacking::{ensemble_predict, fit_stacking, loo_loss, row_leverages, stack_weights};
use latticeglm::Error;

use crate::config::{Config, Experiment};
use crate::report::{num, num6, Report, Table};

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Builds lattice dimensions from data, refusing bin counts above the
/// sample-size bound unless `force` is set.
pub fn bin(cfg: &Config, force: bool) -> Result<Report, Error> {
    cfg.validate_bin()?;
    let path = cfg.data.path.as_deref().expect("validated");
    let table = CsvTable::read(path)?;
    let n = table.rows.len();
    let schema = cfg.data.schema();
    let p = schema
        .columns
        .values()
        .filter(|r| **r == latticeglm::data::ColumnRole::Feature)
        .count()
        + usize::from(schema.intercept);
    let mut report = Report::new("bin", cfg.to_toml());
    let mut dims: Vec<LatticeDim> = Vec::new();
    let mut out = Table::new(
        "lattice dimensions",
        &["dimension", "kind", "requested", "realized", "max_bins"],
    );
    for col in &cfg.bin.categorical {
        let j = table.column_index(col)?;
        let mut labels: Vec<String> = table
            .rows
            .iter()
            .map(|r| r[j].trim().to_string())
            .filter(|s| !is_missing(s))
            .collect();
        labels.sort();
        labels.dedup();
        let dim = LatticeDim::categorical(col.as_str(), labels)?;
        out.push(vec![
            col.clone(),
            "categorical".into(),
            "-".into(),
            dim.levels.to_string(),
            "-".into(),
        ]);
        dims.push(dim);
    }
    if !cfg.bin.levels.is_empty() {
        let d_cont = cfg.bin.levels.len();
        let bound = max_bins(n, p.max(1), d_cont, cfg.bin.safety)?;
        let over: Vec<String> = cfg
            .bin
            .levels
            .iter()
            .filter(|(_, &l)| l > bound)
            .map(|(c, l)| format!("{c} (L = {l})"))
            .collect();
        if !over.is_empty() {
            let msg = format!(
                "bins exceed the bound L ≤ {bound} for N = {n}, p = {p}, {d_cont} continuous dims, safety {}: {}",
                cfg.bin.safety,
                over.join(", ")
            );
            if !force {
                return Err(Error::InfeasibleLattice(format!("{msg}; pass --force to override")));
            }
            log::warn!("{msg}");
            report.note(format!("warning: {msg} (forced)"));
        }
        for (col, &levels) in &cfg.bin.levels {
            let j = table.column_index(col)?;
            let mut values = Vec::with_capacity(n);
            for (i, r) in table.rows.iter().enumerate() {
                if is_missing(&r[j]) {
                    continue;
                }
                let v: f64 = r[j].trim().parse().map_err(|_| Error::IngestError {
                    row: i + 1,
                    column: col.clone(),
                    message: format!("cannot parse `{}` as a number", r[j].trim()),
                })?;
                values.push(v);
            }
            let binned = build_bins(col, &values, levels, &BinStrategy::Quantile)?;
            out.push(vec![
                col.clone(),
                "binned-continuous".into(),
                binned.requested.to_string(),
                binned.realized.to_string(),
                bound.to_string(),
            ]);
            dims.push(binned.dim);
        }
        let worst = cfg.bin.levels.values().copied().max().unwrap_or(1);
        report.note(format!(
            "gamma_local at the largest requested L: {:.4}",
            gamma_local(n, p.max(1), worst, d_cont)
        ));
    }
    let lattice = LatticeSpec::new(dims)?;
    let text = lattice.to_toml()?;
    if let Some(dest) = &cfg.bin.output {
        fs::write(dest, &text)?;
        report.note(format!("lattice written to {}", dest.display()));
    }
    report.note(format!("N = {n}, p = {p}, cells = {}", lattice.cell_count()));
    report.tables.push(out);
    Ok(report)
}

/// Training data with optional z-scoring fit on it.
struct Prepared {
    ingested: Ingested,
    standardizer: Option<Standardizer>,
}

fn prepare(cfg: &Config, lattice: &LatticeSpec) -> Result<Prepared, Error> {
    let path = cfg.data.path.as_deref().expect("validated");
    let mut ingested = ingest_csv(path, &cfg.data.schema(), lattice)?;
    let standardizer = if cfg.data.standardize {
        let s = Standardizer::fit(&ingested.dataset);
        s.apply(&mut ingested.dataset)?;
        Some(s)
    } else {
        None
    };
    Ok(Prepared {
        ingested,
        standardizer,
    })
}

fn load_eval_data(
    path: &Path,
    artifact: &ModelArtifact,
    lattice: &LatticeSpec,
) -> Result<Ingested, Error> {
    let schema = artifact
        .schema
        .as_ref()
        .ok_or_else(|| Error::Config("artifact carries no input schema".into()))?;
    let mut ing = ingest_csv(path, schema, lattice)?;
    if let Some(s) = &artifact.standardizer {
        s.apply(&mut ing.dataset)?;
    }
    Ok(ing)
}

fn data_notes(report: &mut Report, label: &str, ing: &Ingested) {
    report.note(format!(
        "{label}: N = {}, p = {}, dropped rows with missing lattice values = {}",
        ing.dataset.n(),
        ing.dataset.p(),
        ing.dropped_missing
    ));
}

fn df_table(model: &FittedModel) -> Table {
    let mut t = Table::new("effective degrees of freedom", &["component", "df"]);
    for c in &model.diagnostics.df {
        t.push(vec![c.component.clone(), num6(c.df)]);
    }
    t.push(vec!["total".into(), num6(model.diagnostics.df_total)]);
    t
}

fn model_notes(report: &mut Report, model: &FittedModel) {
    let d = &model.diagnostics;
    report.note(format!(
        "family = {}, dispersion = {}, order = {}",
        model.family.family.name(),
        num6(model.family.dispersion),
        model.order()
    ));
    report.note(format!(
        "steps = {}, converged = {}, outer iterations = {}, train mean nll = {}, penalty = {}",
        d.steps,
        d.converged,
        d.outer_iterations,
        num6(d.train_nll),
        num6(d.penalty)
    ));
}

fn model_artifact(cfg: &Config, model: FittedModel, standardizer: Option<Standardizer>) -> ModelArtifact {
    let mut a = ModelArtifact::new(Payload::Model(Box::new(model)), config_hash(cfg));
    a.schema = Some(cfg.data.schema());
    a.standardizer = standardizer;
    a
}

pub fn fit(cfg: &Config, out: Option<&Path>) -> Result<Report, Error> {
    let lattice = cfg.validate_model(cfg.model.order)?;
    let prep = prepare(cfg, &lattice)?;
    let spec = cfg.model.spec(cfg.model.order);
    let model = fit_model(&prep.ingested.dataset, &lattice, &spec, cfg.model.family, &cfg.fit, None)?;
    let mut report = Report::new("fit", cfg.to_toml());
    data_notes(&mut report, "train", &prep.ingested);
    model_notes(&mut report, &model);
    report.tables.push(df_table(&model));
    let artifact = model_artifact(cfg, model, prep.standardizer);
    if let Some(out) = out {
        save_model(&artifact, out)?;
        report.note(format!("model written to {}", out.display()));
    }
    Ok(report)
}

pub fn eval(cfg: &Config, model_path: &Path) -> Result<Report, Error> {
    let artifact = load_model(model_path)?;
    let model = artifact.model()?;
    let mut problems = Vec::new();
    if cfg.data.path.is_none() {
        problems.push("data.path is required".to_string());
    }
    if cfg.eval.draws < latticeglm::evaluation::MIN_DRAWS {
        problems.push(format!(
            "eval.draws must be at least {}",
            latticeglm::evaluation::MIN_DRAWS
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let train = load_eval_data(cfg.data.path.as_deref().expect("checked"), &artifact, &model.lattice)?;
    let w = waic(model, &train.dataset, cfg.eval.draws, cfg.eval.seed)?;
    let mut report = Report::new("eval", cfg.to_toml());
    data_notes(&mut report, "train", &train);
    let mut t = Table::new("evaluation", &["metric", "value"]);
    t.push(vec!["waic".into(), num(w.total)]);
    t.push(vec!["waic_lppd_term".into(), num(w.lppd_term)]);
    t.push(vec!["waic_penalty_term".into(), num(w.penalty_term)]);
    t.push(vec!["train_mean_nll".into(), num(model.mean_nll(&train.dataset)?)]);
    if let Some(tp) = &cfg.data.test_path {
        let test = load_eval_data(tp, &artifact, &model.lattice)?;
        data_notes(&mut report, "test", &test);
        t.push(vec!["test_mean_nll".into(), num(model.mean_nll(&test.dataset)?)]);
    }
    report.tables.push(t);
    Ok(report)
}

/// Fits orders `0..=max_order`, each warm-started from the previous, and keeps
/// adding orders while the WAIC gap stays negative.
pub fn select_order(cfg: &Config, out: Option<&Path>) -> Result<Report, Error> {
    let kmax = cfg.select.max_order;
    let lattice = cfg.validate_model(kmax)?;
    let prep = prepare(cfg, &lattice)?;
    let data = &prep.ingested.dataset;
    let test = match &cfg.data.test_path {
        Some(tp) => {
            let mut ing = ingest_csv(tp, &cfg.data.schema(), &lattice)?;
            if let Some(s) = &prep.standardizer {
                s.apply(&mut ing.dataset)?;
            }
            Some(ing)
        }
        None => None,
    };
    let identity = Refinement::identity(lattice.d());
    let mut fits: Vec<FittedModel> = Vec::with_capacity(kmax + 1);
    let mut reports = Vec::with_capacity(kmax + 1);
    for k in 0..=kmax {
        let init = match fits.last() {
            Some(prev) => Some(Params {
                coefficients: warm_start(&prev.params.coefficients, &identity, k)?,
                intercept: prev.params.intercept.clone(),
            }),
            None => None,
        };
        let spec = cfg.model.spec(k);
        let model = fit_model(data, &lattice, &spec, cfg.model.family, &cfg.fit, init.as_ref())?;
        reports.push(waic(&model, data, cfg.eval.draws, cfg.eval.seed.wrapping_add(k as u64))?);
        fits.push(model);
    }
    let test_loss = fits
        .iter()
        .map(|m| test.as_ref().map(|t| m.mean_nll(&t.dataset)).transpose())
        .collect::<Result<Vec<_>, Error>>()?;
    let rho_hat = if kmax >= 1 { estimate_rho(&fits).ok() } else { None };
    let sigma2 = match cfg.model.family {
        latticeglm::glm::Family::Gaussian => residual_variance(&fits[kmax], data)?,
        _ => 1.0 / fits[kmax].fisher.wbar_global,
    };
    let counts = lattice.level_counts();
    let levels = if counts.is_empty() {
        1.0
    } else {
        (counts.iter().map(|&l| (l as f64).ln()).sum::<f64>() / counts.len() as f64).exp()
    };
    let flow = RgFlowReport::build(
        reports.iter().map(|w| w.total).collect(),
        test_loss,
        rho_hat,
        data.n() as f64 / sigma2,
        levels,
        lattice.d(),
    );
    let selected = flow.selected_order();
    let mut report = Report::new("select-order", cfg.to_toml());
    data_notes(&mut report, "train", &prep.ingested);
    if let Some(t) = &test {
        data_notes(&mut report, "test", t);
    }
    let mut t = Table::new(
        "order selection",
        &["K", "waic", "lppd_term", "penalty_term", "delta", "df_total", "test_mean_nll"],
    );
    for (k, (w, m)) in reports.iter().zip(&fits).enumerate() {
        t.push(vec![
            k.to_string(),
            num6(w.total),
            num6(w.lppd_term),
            num6(w.penalty_term),
            if k == 0 { "-".into() } else { num6(flow.delta[k - 1]) },
            num6(m.diagnostics.df_total),
            flow.test_loss[k].map_or("-".into(), num6),
        ]);
    }
    report.note(format!("selected order K = {selected}"));
    match (flow.rho_hat, flow.k_star, flow.bracket) {
        (Some(r), Some(ks), Some((lo, hi))) => report.note(format!(
            "rho_hat = {}, critical order K* = {} (bracket {lo}..{hi})",
            num6(r),
            num6(ks)
        )),
        (Some(r), _, _) => report.note(format!("rho_hat = {}, critical order undefined", num6(r))),
        _ => {}
    }
    report.tables.push(t);
    if let Some(out) = out {
        let model = fits.swap_remove(selected);
        save_model(&model_artifact(cfg, model, prep.standardizer), out)?;
        report.note(format!("selected model written to {}", out.display()));
    }
    Ok(report)
}

pub fn stack(cfg: &Config, out: Option<&Path>) -> Result<Report, Error> {
    let lattice = cfg.validate_stack()?;
    let schema = cfg.stack_schema();
    let ing = ingest_csv(cfg.stack.path.as_deref().expect("validated"), &schema, &lattice)?;
    let data = &ing.dataset;
    // Gaussian stacking compares predictors on a unit noise scale.
    let family = FamilySpec::new(cfg.stack.family, None)?;
    let sm = fit_stacking(&data.x, &data.y, &data.cells, &lattice, cfg.stack.order, family, &cfg.fit)?;
    let mut report = Report::new("stack", cfg.to_toml());
    data_notes(&mut report, "stack", &ing);
    let h1 = row_leverages(1, &data.cells);
    let mut losses = Table::new("leave-one-out loss", &["model", "loo_loss"]);
    for (j, name) in data.feature_names.iter().enumerate() {
        let eta: Vec<f64> = data.x.column(j).iter().copied().collect();
        losses.push(vec![name.clone(), num6(loo_loss(&family, &data.y, &eta, &h1))]);
    }
    losses.push(vec!["ensemble".into(), num6(sm.loo_loss)]);
    let mut cells: Vec<_> = data.cells.clone();
    cells.sort();
    cells.dedup();
    let mut header = vec!["cell"];
    header.extend(data.feature_names.iter().map(String::as_str));
    let mut weights = Table::new("local weights", &header);
    for cell in &cells {
        let mut row = vec![cell.to_string()];
        row.extend(stack_weights(&sm, cell)?.into_iter().map(num6));
        weights.push(row);
    }
    report.tables.push(weights);
    report.tables.push(losses);
    if let Some(out) = out {
        let mut a = ModelArtifact::new(Payload::Stacking(Box::new(sm)), config_hash(cfg));
        a.schema = Some(schema);
        save_model(&a, out)?;
        report.note(format!("stacking model written to {}", out.display()));
    }
    Ok(report)
}

pub fn simulate(cfg: &Config) -> Result<Report, Error> {
    cfg.validate_simulate()?;
    let s = &cfg.simulate;
    let mut report = Report::new("simulate", cfg.to_toml());
    match s.experiment {
        Experiment::Comparison => {
            let tab = run_regularization_comparison(&s.config, s.replications, s.seed)?;
            report.note(format!("seed = {}, config hash = {}", tab.seed, tab.config_hash));
            let mut summary = Table::new(
                "mean test log-likelihood improvement vs unregularized",
                &["scheme", "K", "mean_test_ll", "mean_improvement", "stderr"],
            );
            for r in &tab.summary {
                summary.push(vec![
                    r.scheme.clone(),
                    r.order.to_string(),
                    num6(r.mean_test_ll),
                    num6(r.mean_improvement),
                    num6(r.stderr_improvement),
                ]);
            }
            let mut rows = Table::new("replications", &["scheme", "K", "replication", "metric", "value"]);
            for r in &tab.rows {
                for (metric, v) in [("test_ll", r.test_ll), ("improvement", r.improvement)] {
                    rows.push(vec![
                        r.scheme.clone(),
                        r.order.to_string(),
                        r.replication.to_string(),
                        metric.into(),
                        num(v),
                    ]);
                }
            }
            report.tables.push(summary);
            report.machine = Some(rows);
        }
        Experiment::RgFlow => {
            let agg = run_rg_flow(&s.config, s.replications, s.seed)?;
            report.note(format!("seed = {}, config hash = {}", agg.seed, agg.config_hash));
            report.note(format!(
                "test loss strictly decreasing in K: {:.2} of replications; argmin inside the K* bracket: {:.2}",
                agg.frac_test_monotone, agg.frac_bracket_hit
            ));
            let mut summary = Table::new(
                "flow summary",
                &["K", "mean_waic", "mean_delta", "frac_delta_negative", "mean_test_loss"],
            );
            for k in 0..agg.mean_waic.len() {
                summary.push(vec![
                    k.to_string(),
                    num6(agg.mean_waic[k]),
                    if k == 0 { "-".into() } else { num6(agg.mean_delta[k - 1]) },
                    if k == 0 { "-".into() } else { format!("{:.2}", agg.frac_delta_negative[k - 1]) },
                    num6(agg.mean_test_loss[k]),
                ]);
            }
            let mut rows = Table::new("replications", &["scheme", "K", "replication", "metric", "value"]);
            let scheme = latticeglm::regularization::Scheme::GeneralizationPreserving.name();
            for (rep, r) in agg.reports.iter().enumerate() {
                for k in 0..r.waic.len() {
                    let mut push = |metric: &str, v: f64| {
                        rows.push(vec![scheme.clone(), k.to_string(), rep.to_string(), metric.into(), num(v)])
                    };
                    push("waic", r.waic[k]);
                    if k > 0 {
                        push("delta", r.delta[k - 1]);
                    }
                    if let Some(l) = r.test_loss[k] {
                        push("test_loss", l);
                    }
                }
            }
            report.tables.push(summary);
            report.machine = Some(rows);
        }
        Experiment::Replica => {
            let r = &s.replica;
            let check = run_replica_check(r.p, r.n, r.lambda2, r.sigma2, r.draws, s.seed)?;
            let mut t = Table::new("replica check", &["metric", "value"]);
            t.push(vec!["closed_form_df".into(), num(check.eq24)]);
            t.push(vec!["monte_carlo_df".into(), num(check.mc_mean)]);
            t.push(vec!["monte_carlo_stderr".into(), num(check.mc_stderr)]);
            t.push(vec![
                "relative_difference".into(),
                num((check.mc_mean - check.eq24).abs() / check.eq24),
            ]);
            t.push(vec!["gamma".into(), num(check.gamma)]);
            if check.near_critical {
                report.note("warning: p/N is near 1; the closed form is unreliable in this regime");
            }
            report.tables.push(t);
        }
    }
    Ok(report)
}

/// Scores rows of `data` with a saved model; returns the CSV text.
pub fn predict(model_path: &Path, data: &Path) -> Result<String, Error> {
    let artifact = load_model(model_path)?;
    let schema = artifact
        .schema
        .as_ref()
        .ok_or_else(|| Error::Config("artifact carries no input schema".into()))?;
    let table = CsvTable::read(data)?;
    let lattice = match &artifact.payload {
        Payload::Model(m) => &m.lattice,
        Payload::Stacking(s) => &s.lattice,
    };
    let mut ing = ingest_table(&table, schema, lattice, false)?;
    if let Some(s) = &artifact.standardizer {
        s.apply(&mut ing.dataset)?;
    }
    let ds = &ing.dataset;
    let scored: Vec<(f64, f64)> = match &artifact.payload {
        Payload::Model(m) => {
            let rows: Vec<PredictorRow> = (0..ds.n())
                .map(|i| PredictorRow {
                    x: ds.x.row(i).iter().copied().collect(),
                    cell: ds.cells[i].clone(),
                })
                .collect();
            predict_rows(m, &rows)?
        }
        Payload::Stacking(s) => ensemble_predict(s, &ds.x, &ds.cells)?
            .into_iter()
            .map(|e| (e, s.family.mean(e)))
            .collect(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(["row", "cell", "eta", "mean"]).map_err(io)?;
    for ((row, cell), (eta, mu)) in ing.source_rows.iter().zip(&ds.cells).zip(scored) {
        w.write_record([row.to_string(), cell.to_string(), num(eta), num(mu)])
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
