use std::io::{self, Write};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use shim_conformal::conformal::{evaluate, full_cp_point, split_from_model, split_model, PointRecord};
use shim_conformal::datagen::{
    generate as synthesize, load_csv, save_csv, select_lambda, train_calibration_split, write_csv, Dataset,
    Schema, SyntheticSpec,
};
use shim_conformal::taupath::{compute_tau_path, PathOptions};
use shim_conformal::{certify_kkt, fit as fit_model, FitConfig};

use crate::output::{emit, intervals_cell, write_json};
use crate::{
    BudgetArgs, ConformalArgs, Failure, FitArgs, Format, GenerateArgs, KinksArgs, Model, ModelArgs, OutputArgs,
    SourceArgs, SplitArgs, SyntheticArgs, TestArgs,
};

pub fn spec(a: &SyntheticArgs, rows: usize, seed: u64) -> SyntheticSpec {
    match a.model {
        Model::Planted => SyntheticSpec::planted(rows, a.m, a.zeta, seed),
        Model::ThreeTerm => SyntheticSpec::three_term(rows, a.m, a.zeta, a.coef, seed),
    }
}

fn schema(src: &SourceArgs) -> Result<Schema, Failure> {
    Ok(match &src.schema {
        Some(path) => Schema::load(path)?,
        None => Schema::binary(&src.response),
    })
}

/// Labeled rows, plus test rows when `test` is given.
fn load(src: &SourceArgs, test: Option<&TestArgs>) -> Result<(Dataset, Option<Dataset>), Failure> {
    let Some(path) = &src.data else {
        let extra = test.map_or(0, |t| t.test_points);
        let syn = &src.synthetic;
        let ds = synthesize(&spec(syn, syn.n + extra, syn.seed))?;
        if test.is_none() {
            return Ok((ds, None));
        }
        let (train, rest) = ds.split_at(syn.n)?;
        return Ok((train, Some(rest)));
    };
    let test_path = match test.map(|t| &t.test) {
        Some(None) => return Err(Failure::Config("--test is required together with --data".into())),
        Some(Some(p)) => p,
        None => {
            let train = load_csv(path, &schema(src)?)?;
            return Ok((train, None));
        }
    };
    let schema = schema(src)?;
    let train = load_csv(path, &schema)?;
    let rest = load_csv(test_path, &schema)?;
    if rest.feature_names != train.feature_names {
        return Err(shim_conformal::Error::Data(format!(
            "test columns {:?} differ from training columns {:?}",
            rest.feature_names, train.feature_names
        ))
        .into());
    }
    Ok((train, Some(rest)))
}

/// Fit settings, cross-validating λ on `train` when it is not given.
pub fn fit_config(m: &ModelArgs, train: &Dataset, seed: u64) -> Result<FitConfig, Failure> {
    let order = (m.max_order > 0).then_some(m.max_order);
    let mut cfg = FitConfig::new(1.0)
        .with_l2(m.l2)
        .with_max_order(order)
        .with_prune(!m.no_prune);
    cfg.lambda = match m.lambda {
        Some(l) => l,
        None => {
            let cv = select_lambda(train, m.folds, &cfg, None, seed)?;
            eprintln!("λ = {} from {}-fold cross-validation", cv.lambda, m.folds);
            cv.lambda
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

impl BudgetArgs {
    fn range(&self) -> Result<Option<(f64, f64)>, Failure> {
        match self.range.as_deref() {
            None => Ok(None),
            Some(&[lo, hi]) if lo < hi && lo.is_finite() && hi.is_finite() => Ok(Some((lo, hi))),
            Some(v) => Err(Failure::Config(format!("--range needs LO < HI, got {v:?}"))),
        }
    }

    /// Limits for one path, with the wall clock starting now.
    pub fn options(&self) -> PathOptions {
        PathOptions {
            max_kinks: None,
            node_budget: self.node_budget,
            deadline: self.time_budget.map(|s| Instant::now() + Duration::from_secs_f64(s)),
        }
    }

    fn validate(&self) -> Result<(), Failure> {
        match self.time_budget {
            Some(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Failure::Config(format!("--time-budget must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn generate(a: &GenerateArgs) -> Result<(), Failure> {
    let ds = synthesize(&spec(&a.synthetic, a.synthetic.n, a.synthetic.seed))?;
    match &a.out {
        Some(path) => save_csv(&ds, path)?,
        None => {
            let mut out = io::stdout().lock();
            write_csv(&ds, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TermRow {
    pattern: String,
    items: String,
    order: usize,
    coef: f64,
}

pub fn fit(a: &FitArgs) -> Result<(), Failure> {
    let (ds, _) = load(&a.source, None)?;
    let cfg = fit_config(&a.model, &ds, a.source.synthetic.seed)?;
    let state = fit_model(&ds.z, &ds.y, &cfg)?;
    let kkt = certify_kkt(&state, &ds.z, &cfg)?;
    eprintln!(
        "{} active terms, objective {}, max inactive correlation {} (λ = {}), KKT {}",
        state.active.len(),
        state.objective.total,
        kkt.max_inactive,
        cfg.lambda,
        if kkt.passed { "certified" } else { "NOT certified" }
    );
    let mut terms = state.active.clone();
    terms.sort_by(|x, y| x.pattern.cmp(&y.pattern));
    let rows: Vec<TermRow> = terms
        .iter()
        .map(|t| TermRow {
            pattern: t.pattern.label(&ds.feature_names),
            items: t.pattern.items().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
            order: t.pattern.order(),
            coef: t.coef,
        })
        .collect();
    emit(&rows, a.output.format, a.output.out.as_deref())
}

/// CSV form of a point record.
#[derive(Serialize)]
struct PointRow {
    id: usize,
    truth: f64,
    covered: bool,
    length: f64,
    hull_length: f64,
    prediction: Option<f64>,
    kinks: usize,
    nodes_visited: u64,
    clipped: bool,
    intervals: String,
}

fn emit_points(records: &[PointRecord], output: &OutputArgs) -> Result<(), Failure> {
    match output.format {
        Format::Jsonl => emit(records, Format::Jsonl, output.out.as_deref()),
        Format::Csv => {
            let rows: Vec<PointRow> = records
                .iter()
                .map(|r| PointRow {
                    id: r.id,
                    truth: r.truth,
                    covered: r.covered,
                    length: r.length,
                    hull_length: r.hull_length,
                    prediction: r.prediction,
                    kinks: r.kinks,
                    nodes_visited: r.nodes_visited,
                    clipped: r.clipped,
                    intervals: intervals_cell(&r.intervals),
                })
                .collect();
            emit(&rows, Format::Csv, output.out.as_deref())
        }
    }
}

fn finish(records: &[PointRecord], test: &TestArgs, output: &OutputArgs) -> Result<(), Failure> {
    let clipped = records.iter().filter(|r| r.clipped).count();
    if clipped > 0 {
        eprintln!("warning: {clipped} set(s) touch the search range boundary");
    }
    emit_points(records, output)?;
    let report = evaluate(records)?;
    eprintln!(
        "{} points: coverage {:.4}, mean length {:.4}, mean hull {:.4}, r2 {}",
        report.points,
        report.coverage,
        report.length,
        report.hull_length,
        report.r2.map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    if let Some(path) = &test.report {
        write_json(&report, path)?;
    }
    Ok(())
}

pub fn conformal(a: &ConformalArgs) -> Result<(), Failure> {
    a.budget.validate()?;
    let range = a.budget.range()?;
    let (train, test) = load(&a.source, Some(&a.test))?;
    let test = test.expect("test rows requested");
    let cfg = fit_config(&a.model, &train, a.source.synthetic.seed)?;
    // point predictions for r² come from the fit on the labeled rows alone
    let base = fit_model(&train.z, &train.y, &cfg)?;
    let results: Vec<Result<PointRecord, Failure>> = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let x = test.z.row(i);
            let (set, path) =
                full_cp_point(&train.z, &train.y, &x, &cfg, a.test.alpha, range, &a.budget.options())?;
            Ok(PointRecord::from_full(i, &set, &path, test.y[i], Some(base.predict(&x))))
        })
        .collect();
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    finish(&records, &a.test, &a.output)
}

pub fn split(a: &SplitArgs) -> Result<(), Failure> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(Failure::Config(format!("--train-fraction must be in (0, 1), got {}", a.train_fraction)));
    }
    let (labeled, test) = load(&a.source, Some(&a.test))?;
    let test = test.expect("test rows requested");
    let (tr, cal) = train_calibration_split(labeled.rows(), a.train_fraction, a.split_seed);
    if tr.is_empty() || cal.is_empty() {
        return Err(Failure::Config(format!(
            "{} labeled rows leave an empty training or calibration part",
            labeled.rows()
        )));
    }
    let train = labeled.select(&tr)?;
    let calib = labeled.select(&cal)?;
    let cfg = fit_config(&a.model, &train, a.source.synthetic.seed)?;
    let model = split_model(&train.z, &train.y, &cfg)?;
    let results: Vec<Result<PointRecord, Failure>> = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let res = split_from_model(&model, &calib.z, &calib.y, &test.z.row(i), a.test.alpha)?;
            Ok(PointRecord::from_split(i, &res, a.test.alpha, test.y[i]))
        })
        .collect();
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    finish(&records, &a.test, &a.output)
}

#[derive(Serialize)]
struct KinkRow {
    lambda: f64,
    zeta: f64,
    d: usize,
    seed: u64,
    kinks: usize,
    nodes_visited: u64,
    mean_nodes_per_step: f64,
}

pub fn kinks(a: &KinksArgs) -> Result<(), Failure> {
    let mut jobs = Vec::new();
    for &lambda in &a.lambda {
        for &zeta in &a.zeta {
            for &d in &a.depths {
                for seed in a.seed..a.seed + a.seeds {
                    jobs.push((lambda, zeta, d, seed));
                }
            }
        }
    }
    let results: Vec<Result<KinkRow, Failure>> = jobs
        .par_iter()
        .map(|&(lambda, zeta, d, seed)| {
            let ds = synthesize(&SyntheticSpec::planted(a.n + 1, a.m, zeta, seed))?;
            let (train, test) = ds.split_at(a.n)?;
            let z = train.z.with_test_row(&test.z.row(0))?;
            let lo = train.y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = train.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let cfg = FitConfig::new(lambda)
                .with_max_order((d > 0).then_some(d))
                .with_prune(!a.no_prune);
            let path = compute_tau_path(&z, &train.y, (lo, hi), &cfg)?;
            Ok(KinkRow {
                lambda,
                zeta,
                d,
                seed,
                kinks: path.kinks.len(),
                nodes_visited: path.stats.total_nodes,
                mean_nodes_per_step: path.stats.mean_nodes_per_step(),
            })
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    emit(&rows, a.output.format, a.output.out.as_deref())
}
