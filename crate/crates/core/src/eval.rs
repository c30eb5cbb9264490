//! Parameter-estimation metrics, multi-push inference and ablation reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::active::{lookahead_steps, StrategyConfig, StrategyKind};
use crate::dualfilter::{run_filter, CrossCovPolicy, FilterConfig, FilterMode, StepInfo};
use crate::error::{Error, Result};
use crate::gaussmath::{gaussian_entropy, Constraints, JointBelief};
use crate::nets::Models;
use crate::pushsim::{ObjectSpec, ParameterRanges};
use crate::rng::mix;
use crate::training::{collect_push, prior_block, window_init, PushProtocol};
use crate::{PARAM_DIM, POSE_DIM};

pub const PARAM_NAMES: [&str; PARAM_DIM] = ["mass", "mu", "com_x", "com_y", "i_z"];

/// Root-mean-square error divided by the width of `range`.
pub fn nrmse(estimates: &[f64], truths: &[f64], range: (f64, f64)) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::InvalidInput("need equally many estimates and truths (at least one)".into()));
    }
    let width = range.1 - range.0;
    if !(width > 0.0) {
        return Err(Error::ZeroRange);
    }
    let mse = estimates.iter().zip(truths).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / estimates.len() as f64;
    Ok(mse.sqrt() / width)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// A named filter variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Dual filter, vision and touch, active pushes.
    VtAddf,
    /// Dual filter, vision and touch, pushes chosen round-robin.
    VtDdfUniform,
    /// Dual filter, vision and touch, random pushes.
    VtDdfRandom,
    /// Dual filter, vision only.
    VDdf,
    /// Joint filter, vision and touch.
    VtJdf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::VtAddf, Variant::VtDdfUniform, Variant::VtDdfRandom, Variant::VDdf, Variant::VtJdf];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::VtAddf => "VT-ADDF",
            Variant::VtDdfUniform => "VT-DDF (uniform)",
            Variant::VtDdfRandom => "VT-DDF (random)",
            Variant::VDdf => "V-DDF",
            Variant::VtJdf => "VT-JDF",
        }
    }

    pub fn mode(&self) -> FilterMode {
        match self {
            Variant::VDdf => FilterMode::VisionOnly,
            Variant::VtJdf => FilterMode::Joint,
            _ => FilterMode::Dual,
        }
    }

    pub fn strategy(&self) -> StrategyKind {
        match self {
            Variant::VtAddf => StrategyKind::Active,
            Variant::VtDdfRandom => StrategyKind::Random,
            _ => StrategyKind::Uniform,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vt-addf" => Ok(Variant::VtAddf),
            "vt-ddf-uniform" => Ok(Variant::VtDdfUniform),
            "vt-ddf-random" => Ok(Variant::VtDdfRandom),
            "v-ddf" => Ok(Variant::VDdf),
            "vt-jdf" => Ok(Variant::VtJdf),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: FilterMode,
    pub strategy: StrategyKind,
    pub lookahead_frac: f64,
    pub freeze_encoding: bool,
    pub pushes: usize,
    /// Sigma points.
    pub c: usize,
    pub liu_west_a: f64,
    pub cross_cov: CrossCovPolicy,
    pub seed: u64,
    /// Effective-sample-size floor of the parameter weights (fraction of the sigma points).
    pub min_ess_frac: f64,
    pub protocol: PushProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::Dual,
            strategy: StrategyKind::Active,
            lookahead_frac: 0.5,
            freeze_encoding: true,
            pushes: 5,
            c: 50,
            liu_west_a: 0.01,
            cross_cov: CrossCovPolicy::Constant,
            seed: 0,
            min_ess_frac: 0.5,
            protocol: PushProtocol::default(),
        }
    }
}

impl EvalConfig {
    pub fn for_variant(variant: Variant, base: &EvalConfig) -> Self {
        Self { mode: variant.mode(), strategy: variant.strategy(), ..base.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::Config("need at least two sigma points".into()));
        }
        if !(self.lookahead_frac > 0.0) {
            return Err(Error::Config("lookahead fraction must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_ess_frac) {
            return Err(Error::Config("min_ess_frac must lie in [0, 1]".into()));
        }
        self.protocol.validate()
    }

    pub fn filter_config(&self, spec: &ObjectSpec) -> FilterConfig {
        let mut f = FilterConfig::new(Constraints::for_shape(&spec.shape));
        f.c = self.c;
        f.liu_west_a = self.liu_west_a;
        f.mode = self.mode;
        f.cross_cov = self.cross_cov;
        f.dt = self.protocol.dt;
        f.min_ess_frac = self.min_ess_frac;
        f
    }
}

/// Parameter belief at the end of one push.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushSummary {
    pub push: usize,
    pub param_mean: Vec<f64>,
    pub param_var: Vec<f64>,
    pub param_entropy: f64,
    pub steps: usize,
    pub weight_fallbacks: usize,
    pub projections: usize,
    pub psd_repairs: usize,
}

/// Result of inferring one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInference {
    pub shape: String,
    /// Ground truth in filter-state units.
    pub truth: Vec<f64>,
    /// Entry 0 is the prior; entry `p` the belief after push `p`.
    pub trace: Vec<PushSummary>,
    /// Every posterior mean satisfied the constraints.
    pub constraints_ok: bool,
}

impl ObjectInference {
    pub fn estimate(&self) -> &[f64] {
        &self.trace.last().expect("trace starts with the prior").param_mean
    }
}

fn summary(push: usize, mean: &[f64], cov: &DMatrix<f64>, infos: &[StepInfo]) -> PushSummary {
    PushSummary {
        push,
        param_mean: mean.to_vec(),
        param_var: (0..PARAM_DIM).map(|k| cov[(k, k)]).collect(),
        param_entropy: gaussian_entropy(cov),
        steps: infos.len(),
        weight_fallbacks: infos.iter().filter(|i| i.weight_fallback).count(),
        projections: infos.iter().filter(|i| i.projected).count(),
        psd_repairs: infos.iter().filter(|i| i.psd_repaired).count(),
    }
}

/// Runs `cfg.pushes` pushes on one object, each starting from the parameter posterior of the
/// previous one, and records the parameter belief after each.
pub fn infer_object(spec: &ObjectSpec, models: &Models, cfg: &EvalConfig, object_seed: u64) -> Result<ObjectInference> {
    cfg.validate()?;
    let fcfg = cfg.filter_config(spec);
    let mut block = prior_block(&ParameterRanges::table_one());
    let mut trace = vec![summary(0, &block.0, &block.1, &[])];
    let mut constraints_ok = true;
    let n = lookahead_steps(cfg.lookahead_frac, cfg.protocol.t_h, cfg.protocol.dt).max(1);
    for p in 0..cfg.pushes {
        let strategy = StrategyConfig {
            kind: cfg.strategy,
            n,
            m: cfg.protocol.affordances,
            seed: mix(object_seed, 0x5EED),
            freeze_encoding: cfg.freeze_encoding,
        };
        let push = collect_push(spec, models, &fcfg, &strategy, &cfg.protocol, &block, object_seed, p as u64)?;
        let traj = push.trajectory;
        if traj.len() < 2 {
            trace.push(summary(p + 1, &block.0, &block.1, &[]));
            continue;
        }
        let init = window_init(&traj, 0, &cfg.protocol, &block);
        let (beliefs, infos) = run_filter(models, &fcfg, &traj, &spec.shape, &init, mix(object_seed, p as u64))?;
        for b in &beliefs {
            let pm = b.param_mean();
            let inside = (0..PARAM_DIM).all(|k| {
                let (lo, hi) = (fcfg.constraints.lower[POSE_DIM + k], fcfg.constraints.upper[POSE_DIM + k]);
                pm[k] > lo && pm[k] < hi
            });
            constraints_ok &= inside;
        }
        let last: &JointBelief = beliefs.last().expect("nonempty");
        block = (last.param_mean().as_slice().to_vec(), last.param_cov());
        trace.push(summary(p + 1, &block.0, &block.1, &infos));
    }
    Ok(ObjectInference { shape: spec.shape.name.clone(), truth: spec.params.to_state().to_vec(), trace, constraints_ok })
}

/// NRMSE per parameter and overall for one evaluated variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseReport {
    pub label: String,
    pub mode: FilterMode,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub pushes: usize,
    pub objects: usize,
    pub per_param: [f64; PARAM_DIM],
    /// Standard deviation over objects of the per-object normalized absolute error.
    pub per_param_std: [f64; PARAM_DIM],
    /// Mean of the per-parameter values.
    pub overall: f64,
    pub overall_std: f64,
}

impl NrmseReport {
    /// Scores the final estimates of `results` (after `push` pushes when given).
    pub fn from_results(label: &str, cfg: &EvalConfig, results: &[ObjectInference], push: Option<usize>) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::InvalidInput("no results to score".into()));
        }
        let bounds = ParameterRanges::table_one().state_bounds();
        let est_at = |r: &ObjectInference| -> Vec<f64> {
            match push {
                Some(p) => r.trace[p.min(r.trace.len() - 1)].param_mean.clone(),
                None => r.estimate().to_vec(),
            }
        };
        let mut per_param = [0.0; PARAM_DIM];
        let mut per_param_std = [0.0; PARAM_DIM];
        let mut per_object_overall = vec![0.0; results.len()];
        for k in 0..PARAM_DIM {
            let est: Vec<f64> = results.iter().map(|r| est_at(r)[k]).collect();
            let truth: Vec<f64> = results.iter().map(|r| r.truth[k]).collect();
            per_param[k] = nrmse(&est, &truth, bounds[k])?;
            let width = bounds[k].1 - bounds[k].0;
            let errs: Vec<f64> = est.iter().zip(&truth).map(|(e, t)| (e - t).abs() / width).collect();
            for (o, e) in per_object_overall.iter_mut().zip(&errs) {
                *o += e / PARAM_DIM as f64;
            }
            per_param_std[k] = mean_std(&errs).1;
        }
        Ok(Self {
            label: label.to_string(),
            mode: cfg.mode,
            strategy: cfg.strategy,
            seed: cfg.seed,
            pushes: push.unwrap_or(cfg.pushes),
            objects: results.len(),
            per_param,
            per_param_std,
            overall: per_param.iter().sum::<f64>() / PARAM_DIM as f64,
            overall_std: mean_std(&per_object_overall).1,
        })
    }
}

/// Infers every object of `objects` with the variant's configuration.
pub fn evaluate(models: &Models, objects: &[ObjectSpec], cfg: &EvalConfig) -> Result<Vec<ObjectInference>> {
    objects.iter().enumerate().map(|(i, spec)| infer_object(spec, models, cfg, mix(cfg.seed, i as u64))).collect()
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: NrmseReport,
    pub results: Vec<ObjectInference>,
}

/// Evaluates each variant with its checkpoint. `checkpoint(variant)` returns the models to use.
pub fn run_ablation(
    variants: &[Variant],
    objects: &[ObjectSpec],
    base: &EvalConfig,
    mut checkpoint: impl FnMut(Variant) -> Result<Models>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let models = checkpoint(v)?;
        let cfg = EvalConfig::for_variant(v, base);
        let results = evaluate(&models, objects, &cfg)?;
        let report = NrmseReport::from_results(v.label(), &cfg, &results, None)?;
        log::info!("{}: overall NRMSE {:.3}", v.label(), report.overall);
        rows.push(AblationRow { variant: v, report, results });
    }
    Ok(rows)
}

/// Ablation table as CSV: one row per variant and parameter plus an overall row.
pub fn write_ablation_csv(rows: &[NrmseReport], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["variant", "seed", "pushes", "parameter", "nrmse", "std"])?;
    for r in rows {
        for k in 0..PARAM_DIM {
            wr.write_record([
                r.label.clone(),
                r.seed.to_string(),
                r.pushes.to_string(),
                PARAM_NAMES[k].to_string(),
                format!("{:.6}", r.per_param[k]),
                format!("{:.6}", r.per_param_std[k]),
            ])?;
        }
        wr.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.pushes.to_string(),
            "overall".to_string(),
            format!("{:.6}", r.overall),
            format!("{:.6}", r.overall_std),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// A CSV row of [`write_ablation_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub variant: String,
    pub seed: u64,
    pub pushes: usize,
    pub parameter: String,
    pub nrmse: f64,
    pub std: f64,
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationCsvRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Markdown table of `variant × parameter` NRMSE, mean ± std over the rows' seeds.
pub fn summarize(rows: &[AblationCsvRow]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut cols: Vec<&str> = PARAM_NAMES.to_vec();
    cols.push("overall");
    let mut out = String::new();
    let _ = writeln!(out, "| variant | {} |", cols.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(cols.len()));
    for v in variants {
        let cells: Vec<String> = cols
            .iter()
            .map(|c| {
                let vals: Vec<f64> = rows.iter().filter(|r| r.variant == v && r.parameter == *c).map(|r| r.nrmse).collect();
                let (m, s) = mean_std(&vals);
                if vals.len() > 1 {
                    format!("{m:.3} ± {s:.3}")
                } else {
                    format!("{m:.3}")
                }
            })
            .collect();
        let _ = writeln!(out, "| {v} | {} |", cells.join(" | "));
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Per-push convergence of one object: belief mean ± 2σ per parameter, truth dashed.
pub fn convergence_svg(title: &str, result: &ObjectInference) -> String {
    let (pw, ph, gap, left, top) = (220.0, 160.0, 30.0, 40.0, 40.0);
    let width = left + PARAM_DIM as f64 * (pw + gap);
    let height = top + ph + 50.0;
    let bounds = ParameterRanges::table_one().state_bounds();
    let pushes = result.trace.len().max(2) - 1;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, esc(title));
    for k in 0..PARAM_DIM {
        let x0 = left + k as f64 * (pw + gap);
        let (lo, hi) = bounds[k];
        let pad = 0.25 * (hi - lo);
        let (ylo, yhi) = (lo - pad, hi + pad);
        let px = |p: usize| x0 + pw * p as f64 / pushes as f64;
        let py = |v: f64| top + ph * (1.0 - ((v.clamp(ylo, yhi) - ylo) / (yhi - ylo)));
        let _ = writeln!(s, r##"<rect x="{x0:.1}" y="{top:.1}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x0 + 4.0, top - 6.0, PARAM_NAMES[k]);
        let upper: Vec<String> = result.trace.iter().map(|t| format!("{:.2},{:.2}", px(t.push), py(t.param_mean[k] + 2.0 * t.param_var[k].sqrt()))).collect();
        let lower: Vec<String> = result.trace.iter().rev().map(|t| format!("{:.2},{:.2}", px(t.push), py(t.param_mean[k] - 2.0 * t.param_var[k].sqrt()))).collect();
        let _ = writeln!(s, r##"<polygon points="{} {}" fill="#4a78c2" fill-opacity="0.25" stroke="none"/>"##, upper.join(" "), lower.join(" "));
        let mean: Vec<String> = result.trace.iter().map(|t| format!("{:.2},{:.2}", px(t.push), py(t.param_mean[k]))).collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##, mean.join(" "));
        let ty = py(result.truth[k]);
        let _ = writeln!(s, r##"<line x1="{x0:.1}" y1="{ty:.2}" x2="{:.1}" y2="{ty:.2}" stroke="#c0392b" stroke-dasharray="4 3"/>"##, x0 + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">push</text>"#, x0 + pw / 2.0, top + ph + 30.0);
        for p in 0..=pushes {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{p}</text>"#, px(p), top + ph + 14.0);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Mean per-push overall NRMSE of several variants as a line chart.
pub fn nrmse_by_push_svg(series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, top) = (520.0, 300.0, 50.0, 30.0);
    let (pw, ph) = (w - left - 150.0, h - top - 40.0);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(2).max(2) - 1;
    let ymax = series.iter().flat_map(|s| s.1.iter().cloned()).fold(0.0f64, f64::max).max(1e-6) * 1.1;
    let colors = ["#1f4e9c", "#c0392b", "#27ae60", "#8e44ad", "#d35400", "#555555"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>"##);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">overall NRMSE by push</text>"#);
    let _ = writeln!(s, r#"<text x="4" y="{:.1}">{ymax:.2}</text>"#, top + 4.0);
    let _ = writeln!(s, r#"<text x="4" y="{:.1}">0</text>"#, top + ph);
    for (i, (label, v)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(p, y)| format!("{:.2},{:.2}", left + pw * p as f64 / n as f64, top + ph * (1.0 - y / ymax)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{c}">{}</text>"#, left + pw + 10.0, top + 14.0 * (i + 1) as f64, esc(label));
    }
    s.push_str("</svg>\n");
    s
}

/// Overall NRMSE after each push (0 = prior).
pub fn nrmse_by_push(cfg: &EvalConfig, results: &[ObjectInference]) -> Result<Vec<f64>> {
    (0..=cfg.pushes).map(|p| NrmseReport::from_results("", cfg, results, Some(p)).map(|r| r.overall)).collect()
}
