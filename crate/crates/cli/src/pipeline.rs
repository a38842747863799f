//! The stages behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context as _, Result};
use gdc::ebm::{constrain_with_diagnostics, rlhf_target, ContextDistribution, EbmForm, EbmTarget, FitDiagnostics, RlhfConfig};
use gdc::metrics::{ConsoleLogger, JsonlLogger, LoggerSet};
use gdc::oracle::{self, SequenceSpace};
use gdc::qrs::{self, kl_generator, tvd_generator, QrsConfig, ScoredPool};
use gdc::scorers::{ConstraintSpec, Feature};
use gdc::{AutoregressiveModel, Context, Tuner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

pub const BASE_FILE: &str = "base_model.json";
pub const TARGET_FILE: &str = "target.json";
pub const TUNED_FILE: &str = "tuned_model.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LogMode {
    Console,
    Jsonl,
    Both,
}

/// Verification did not pass; carries the written report path.
#[derive(Debug)]
pub struct VerificationFailed(pub PathBuf);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed; see {}", self.0.display())
    }
}

impl std::error::Error for VerificationFailed {}

pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub log: LogMode,
    pub verify: bool,
}

struct Stage {
    base: Arc<AutoregressiveModel>,
    target: EbmTarget,
    contexts: ContextDistribution,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }

    fn build_target(&self) -> Result<(Stage, Option<FitDiagnostics>)> {
        let cfg = &self.cfg;
        let base = Arc::new(cfg.model.build()?);
        let contexts = cfg.training_contexts()?;
        let conditional = !contexts.is_unconditional();
        let (target, fit) = match &cfg.rlhf {
            Some(r) => {
                let reward = r.reward.build(base.vocab(), base.t_max())?;
                let target = rlhf_target(
                    base.clone(),
                    &RlhfConfig {
                        reward,
                        beta_rlhf: r.beta,
                    },
                )?
                .with_conditional_features(conditional);
                (target, None)
            }
            None => {
                let spec = ConstraintSpec::new(cfg.build_features(base.vocab())?, cfg.target_moments.clone())?;
                constrain_with_diagnostics(base.clone(), &spec, &contexts, &cfg.lambda_fit)?
            }
        };
        Ok((
            Stage {
                base,
                target,
                contexts,
            },
            fit,
        ))
    }

    /// Builds the base, constrains it and writes the base, target and fit report.
    fn fit_stage(&self) -> Result<Stage> {
        self.prepare_out()?;
        let (stage, fit) = match self.build_target() {
            Ok(v) => v,
            Err(e) => {
                if let Some(inner @ (gdc::Error::Infeasible(_) | gdc::Error::NotConverged { .. })) =
                    e.downcast_ref::<gdc::Error>()
                {
                    write_json(&self.path("fit_report.json"), &json!({ "infeasible": inner.to_string() }))?;
                }
                return Err(e);
            }
        };
        stage.base.save(self.path(BASE_FILE))?;
        stage.target.save(self.path(TARGET_FILE), BASE_FILE)?;
        let form = match stage.target.form() {
            EbmForm::Pointwise => "pointwise",
            EbmForm::Exponential => "exponential",
        };
        let mut report = json!({
            "form": form,
            "features": stage.target.features().iter().map(Feature::name).collect::<Vec<_>>(),
            "lambda": stage.target.lambda(),
            "target_moments": self.cfg.target_moments,
        });
        if let Some(fit) = &fit {
            report["final_moments"] = json!(fit.final_moments);
            report["final_gap"] = json!(fit.final_gap);
            report["converged"] = json!(fit.converged);
            report["iterations"] = json!(fit.gap_norms.len());
            let mut w = csv::Writer::from_path(self.path("lambda_trajectory.csv"))?;
            let mut header = vec!["iteration".to_string(), "gap_norm".to_string()];
            header.extend(stage.target.features().iter().map(|f| format!("lambda_{}", f.name())));
            w.write_record(&header)?;
            for (i, (g, l)) in fit.gap_norms.iter().zip(&fit.lambda_trajectory).enumerate() {
                let mut row = vec![i.to_string(), g.to_string()];
                row.extend(l.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        write_json(&self.path("fit_report.json"), &report)?;
        Ok(stage)
    }

    pub fn fit_lambda(&self) -> Result<()> {
        let stage = self.fit_stage()?;
        println!(
            "target written to {} (lambda = {:?})",
            self.path(TARGET_FILE).display(),
            stage.target.lambda()
        );
        Ok(())
    }

    fn loggers(&self) -> Result<LoggerSet> {
        let mut set = LoggerSet::new();
        if matches!(self.log, LogMode::Console | LogMode::Both) {
            set.push(Box::new(ConsoleLogger::stdout()));
        }
        if matches!(self.log, LogMode::Jsonl | LogMode::Both) {
            set.push(Box::new(JsonlLogger::create(self.path(METRICS_FILE))?));
        }
        Ok(set)
    }

    fn tune_stage(&self, stage: &Stage) -> Result<AutoregressiveModel> {
        let mut tuner = Tuner::new(
            stage.base.clone_model(false),
            stage.target.clone(),
            stage.contexts.clone(),
            self.cfg.tuner.clone(),
        )?;
        let mut loggers = self.loggers()?;
        tuner.tune(&mut loggers)?;
        let model = tuner.into_model();
        model.save(self.path(TUNED_FILE))?;
        Ok(model)
    }

    pub fn tune(&self) -> Result<()> {
        let stage = self.fit_stage()?;
        let tuned = self.tune_stage(&stage)?;
        if self.verify {
            self.verify_tuned(&stage, &tuned, None)?;
        }
        Ok(())
    }

    pub fn experiment(&self) -> Result<()> {
        let stage = self.fit_stage()?;
        let tuned = self.tune_stage(&stage)?;
        let sweep = match &self.cfg.qrs {
            Some(_) => Some(self.qrs_stage(&stage.target, &tuned)?),
            None => None,
        };
        if self.verify {
            self.verify_tuned(&stage, &tuned, sweep.as_ref())?;
        }
        Ok(())
    }

    fn qrs_context(&self, target: &EbmTarget) -> Result<Context> {
        let q = self.cfg.qrs.as_ref().expect("qrs section");
        Ok(match &q.context {
            Some(c) => Context::new(c.clone()),
            None if target.is_conditional() => self.cfg.training_contexts()?.context(0).clone(),
            None => Context::empty(),
        })
    }

    /// Runs the β sweep and draws the samples file; returns the β values used.
    fn qrs_stage(&self, target: &EbmTarget, proposal: &AutoregressiveModel) -> Result<QrsSweep> {
        let q = self
            .cfg
            .qrs
            .as_ref()
            .ok_or_else(|| gdc::Error::InvalidConfig("config has no qrs section".into()))?;
        self.prepare_out()?;
        let context = self.qrs_context(target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
        let pool = ScoredPool::draw(target, proposal, &context, q.n_estimate, &mut rng)?;
        let z = pool.log_partition().exp();
        let scale = if q.beta_normalized { z } else { 1.0 };
        let betas: Vec<f64> = q.betas.iter().map(|b| b * scale).collect();
        let estimates = qrs::estimates_from_pool(&pool, &betas);
        qrs::save_estimates_csv(self.path("qrs_sweep.csv"), &estimates)?;

        let sample_beta = q.sample_beta.map(|b| b * scale).unwrap_or_else(|| betas.iter().cloned().fold(0.0, f64::max));
        let out = qrs::qrs_sample(
            target,
            proposal,
            &QrsConfig {
                beta: sample_beta,
                batch_size: q.batch_size,
                seed: q.seed,
            },
            &context,
            q.n_samples,
        )?;
        qrs::write_samples_csv(fs::File::create(self.path("qrs_samples.csv"))?, &out.accepted)?;

        let proposal_tvd = pool.proposal_divergence(tvd_generator).unwrap_or(f64::NAN);
        let proposal_kl = pool.proposal_divergence(kl_generator).unwrap_or(f64::NAN);
        let tradeoff: Vec<Value> = estimates
            .iter()
            .map(|e| {
                json!({
                    "beta": e.beta,
                    "acceptance_rate": e.acceptance_rate,
                    "tvd_gain": proposal_tvd - e.tvd_to_target,
                    "acceptance_times_gain": e.acceptance_rate * (proposal_tvd - e.tvd_to_target),
                })
            })
            .collect();
        write_json(
            &self.path("qrs_summary.json"),
            &json!({
                "context": context.text,
                "z_estimate": z,
                "proposal_tvd_to_target": proposal_tvd,
                "proposal_kl_to_target": proposal_kl,
                "sample_beta": sample_beta,
                "accepted": out.accepted.len(),
                "attempts": out.attempts,
                "acceptance_rate": out.acceptance_rate(),
                "tradeoff": tradeoff,
            }),
        )?;
        println!(
            "qrs: accepted {} of {} at beta {:.4e}; sweep written to {}",
            out.accepted.len(),
            out.attempts,
            sample_beta,
            self.path("qrs_sweep.csv").display()
        );
        Ok(QrsSweep { betas, context })
    }

    pub fn qrs(&self, target_path: Option<&Path>, model_path: Option<&Path>) -> Result<()> {
        let target_path = target_path.map(Path::to_path_buf).unwrap_or_else(|| self.path(TARGET_FILE));
        let target = EbmTarget::load(&target_path).with_context(|| format!("loading target {}", target_path.display()))?;
        let model_path = match model_path {
            Some(p) => p.to_path_buf(),
            None if self.path(TUNED_FILE).is_file() => self.path(TUNED_FILE),
            None => self.path(BASE_FILE),
        };
        let proposal = AutoregressiveModel::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
        let sweep = self.qrs_stage(&target, &proposal)?;
        if self.verify {
            let checks = vec![qrs_monotone_check(&target, &proposal, &sweep)?];
            finish_verification(&self.path("verification.json"), checks, json!({}))?;
        }
        Ok(())
    }

    fn verify_tuned(&self, stage: &Stage, tuned: &AutoregressiveModel, sweep: Option<&QrsSweep>) -> Result<()> {
        let v = &self.cfg.verify;
        let space = SequenceSpace::of(&*stage.base);
        let taus = &stage.contexts;
        let target = &stage.target;
        let base = &*stage.base;
        let mut checks = Vec::new();
        let kl_base = oracle::exact_kl(target, base, &space, taus)?;
        let kl_tuned = oracle::exact_kl(target, tuned, &space, taus)?;
        if let Some(max) = v.max_kl {
            checks.push(Check::below("kl_target_tuned", kl_tuned, max));
        }
        if let Some(min) = v.min_kl_reduction {
            checks.push(Check::above("kl_reduction_fraction", (kl_base - kl_tuned) / kl_base, min));
        }
        if let Some(min) = v.min_satisfaction {
            let booleans: Vec<Feature> = target.features().iter().filter(|f| f.is_boolean()).cloned().collect();
            let sat = oracle::exact_moments(tuned, &booleans, &space, taus)?;
            for (f, s) in booleans.iter().zip(sat) {
                checks.push(Check::above(&format!("satisfaction_{}", f.name()), s, min));
            }
        }
        if !v.held_out_improves.is_empty() {
            let held = self.cfg.held_out()?.expect("validated");
            let feats: Vec<Feature> = self
                .cfg
                .build_features(base.vocab())?
                .into_iter()
                .filter(|f| v.held_out_improves.iter().any(|n| n == f.name()))
                .collect();
            let before = oracle::exact_moments(base, &feats, &space, &held)?;
            let after = oracle::exact_moments(tuned, &feats, &space, &held)?;
            for ((f, b), a) in feats.iter().zip(before).zip(after) {
                checks.push(Check::above(&format!("held_out_{}_increase", f.name()), a - b, 0.0));
            }
        }
        if v.moments_move_toward_targets {
            let feats = target.features();
            let before = oracle::exact_moments(base, feats, &space, taus)?;
            let after = oracle::exact_moments(tuned, feats, &space, taus)?;
            for (((f, b), a), mu) in feats.iter().zip(before).zip(after).zip(&self.cfg.target_moments) {
                checks.push(Check::above(
                    &format!("moment_{}_gap_closed", f.name()),
                    (b - mu).abs() - (a - mu).abs(),
                    0.0,
                ));
            }
        }
        if v.qrs_tvd_monotone {
            if let Some(sweep) = sweep {
                checks.push(qrs_monotone_check(target, tuned, sweep)?);
            }
        }
        let summary = json!({
            "kl_target_base": kl_base,
            "kl_target_tuned": kl_tuned,
            "kl_tuned_base": oracle::exact_kl(tuned, base, &space, taus)?,
        });
        finish_verification(&self.path("verification.json"), checks, summary)
    }

    pub fn oracle(&self, target_path: Option<&Path>, model_path: Option<&Path>) -> Result<Value> {
        let (target, contexts) = match target_path {
            Some(p) => (EbmTarget::load(p)?, self.cfg.training_contexts()?),
            None => {
                let (stage, _) = self.build_target()?;
                (stage.target, stage.contexts)
            }
        };
        let base = target.base();
        let space = SequenceSpace::of(base);
        let feats = target.features();
        let mut per_context = Vec::new();
        for (ctx, tau) in contexts.entries() {
            per_context.push(json!({
                "context": ctx.text,
                "weight": tau,
                "log_partition": oracle::exact_log_partition(&target, &space, ctx)?,
            }));
        }
        let mut report = json!({
            "space_size": space.size().to_string(),
            "contexts": per_context,
            "target_moments": moment_map(feats, &oracle::exact_moments(&target, feats, &space, &contexts)?),
            "base_moments": moment_map(feats, &oracle::exact_moments(base, feats, &space, &contexts)?),
            "kl_target_base": oracle::exact_kl(&target, base, &space, &contexts)?,
            "tvd_target_base": oracle::exact_tvd(&target, base, &space, &contexts)?,
        });
        if target.form() == EbmForm::Exponential && self.cfg.rlhf.is_none() && !self.cfg.target_moments.is_empty() {
            let spec = ConstraintSpec::new(feats.to_vec(), self.cfg.target_moments.clone())?;
            match oracle::exact_lambda(base, &spec, &space, &contexts) {
                Ok(sol) => report["lambda_star"] = json!(sol.lambda),
                Err(e) => report["lambda_star_error"] = json!(e.to_string()),
            }
            report["lambda"] = json!(target.lambda());
        }
        if let Some(p) = model_path {
            let model = AutoregressiveModel::load(p)?;
            report["model"] = json!({
                "path": p.display().to_string(),
                "kl_target_model": oracle::exact_kl(&target, &model, &space, &contexts)?,
                "tvd_target_model": oracle::exact_tvd(&target, &model, &space, &contexts)?,
                "kl_model_base": oracle::exact_kl(&model, base, &space, &contexts)?,
                "moments": moment_map(feats, &oracle::exact_moments(&model, feats, &space, &contexts)?),
            });
        }
        self.prepare_out()?;
        write_json(&self.path("oracle_report.json"), &report)?;
        Ok(report)
    }
}

fn moment_map(features: &[Feature], values: &[f64]) -> Value {
    features.iter().zip(values).map(|(f, v)| (f.name().to_string(), json!(v))).collect::<serde_json::Map<_, _>>().into()
}

struct QrsSweep {
    betas: Vec<f64>,
    context: Context,
}

fn qrs_monotone_check(target: &EbmTarget, proposal: &AutoregressiveModel, sweep: &QrsSweep) -> Result<Check> {
    let space = SequenceSpace::of(proposal);
    let p = oracle::probability_table(target, &space, &sweep.context)?;
    let mut betas = sweep.betas.clone();
    betas.sort_by(f64::total_cmp);
    let mut worst_rise = 0.0f64;
    let mut prev = f64::INFINITY;
    for b in betas {
        let law = oracle::exact_qrs_law(target, proposal, b, &space, &sweep.context)?;
        let tvd = oracle::tvd_tables(&p, &law.probs);
        worst_rise = worst_rise.max(tvd - prev);
        prev = tvd;
    }
    Ok(Check::below("qrs_oracle_tvd_max_rise", worst_rise, 1e-12))
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    value: f64,
    threshold: f64,
    comparison: &'static str,
    passed: bool,
}

impl Check {
    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            comparison: "<",
            passed: value < threshold,
        }
    }

    fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            comparison: if threshold == 0.0 { ">" } else { ">=" },
            passed: if threshold == 0.0 { value > 0.0 } else { value >= threshold },
        }
    }
}

fn finish_verification(path: &Path, checks: Vec<Check>, mut summary: Value) -> Result<()> {
    let passed = checks.iter().all(|c| c.passed);
    for c in &checks {
        println!("{} {} = {:.6} (threshold {})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    summary["checks"] = serde_json::to_value(&checks)?;
    summary["passed"] = json!(passed);
    write_json(path, &summary)?;
    if passed {
        Ok(())
    } else {
        Err(VerificationFailed(path.to_path_buf()).into())
    }
}
