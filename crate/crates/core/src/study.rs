//! The ablation study: per seed, one training run per filter configuration, held-out evaluation
//! of every variant, and the comparisons drawn from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::active::StrategyKind;
use crate::dualfilter::FilterMode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, nrmse_by_push, nrmse_by_push_svg, read_ablation_csv, summarize, write_ablation_csv, EvalConfig, NrmseReport, Variant};
use crate::geometry::default_library;
use crate::nets::Models;
use crate::pushsim::{generate_population, ParameterRanges};
use crate::training::{save_run, split_population, train, LossReport, TrainConfig};

/// A training run of the study. The random-push variant reuses the uniform run's models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingKind {
    DualActive,
    DualUniform,
    VisionOnly,
    Joint,
}

impl TrainingKind {
    pub const ALL: [TrainingKind; 4] = [TrainingKind::DualActive, TrainingKind::DualUniform, TrainingKind::VisionOnly, TrainingKind::Joint];

    pub fn name(&self) -> &'static str {
        match self {
            TrainingKind::DualActive => "dual-active",
            TrainingKind::DualUniform => "dual-uniform",
            TrainingKind::VisionOnly => "vision-only",
            TrainingKind::Joint => "joint",
        }
    }

    pub fn mode(&self) -> FilterMode {
        match self {
            TrainingKind::VisionOnly => FilterMode::VisionOnly,
            TrainingKind::Joint => FilterMode::Joint,
            _ => FilterMode::Dual,
        }
    }

    pub fn strategy(&self) -> StrategyKind {
        match self {
            TrainingKind::DualActive => StrategyKind::Active,
            _ => StrategyKind::Uniform,
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::VtAddf => TrainingKind::DualActive,
            Variant::VtDdfUniform | Variant::VtDdfRandom => TrainingKind::DualUniform,
            Variant::VDdf => TrainingKind::VisionOnly,
            Variant::VtJdf => TrainingKind::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    /// Population size (train, validation and held-out objects together).
    pub objects: usize,
    pub population_seed: u64,
    /// One full set of training runs and evaluations per seed.
    pub seeds: Vec<u64>,
    /// Fraction of the population used for training and validation; the rest is held out.
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            objects: 120,
            population_seed: 0,
            seeds: (0..5).collect(),
            train_fraction: 0.9,
            train: TrainConfig { epochs: 30, batch_size: 2, windows_per_push: 2, c: 24, val_windows: 2, ..Default::default() },
            eval: EvalConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("study needs at least one seed".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must lie in (0, 1)".into()));
        }
        self.train.validate()?;
        self.eval.validate()
    }
}

/// Loss curve of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub kind: TrainingKind,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub trainings: Vec<TrainingRecord>,
    pub reports: Vec<(Variant, NrmseReport)>,
    /// Overall NRMSE after each push (0 = prior) per variant.
    pub by_push: Vec<(Variant, Vec<f64>)>,
}

impl SeedResult {
    pub fn report(&self, v: Variant) -> Option<&NrmseReport> {
        self.reports.iter().find(|(x, _)| *x == v).map(|(_, r)| r)
    }

    pub fn training(&self, k: TrainingKind) -> Option<&LossReport> {
        self.trainings.iter().find(|t| t.kind == k).map(|t| &t.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub held_out: usize,
    pub seeds: Vec<SeedResult>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

impl StudyReport {
    /// Overall NRMSE of `v`, one value per seed.
    pub fn overall(&self, v: Variant) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.report(v)).map(|r| r.overall).collect()
    }

    pub fn overall_mean(&self, v: Variant) -> f64 {
        mean(&self.overall(v))
    }

    /// Spread of the overall NRMSE across seeds.
    pub fn overall_std(&self, v: Variant) -> f64 {
        std(&self.overall(v))
    }

    /// Seed-averaged validation curve of a training kind as `(pushes, loss)` per epoch.
    pub fn mean_val_curve(&self, k: TrainingKind) -> Vec<(usize, f64)> {
        let curves: Vec<&LossReport> = self.seeds.iter().filter_map(|s| s.training(k)).collect();
        let Some(n) = curves.iter().map(|c| c.epochs.len()).min() else {
            return Vec::new();
        };
        (0..n)
            .map(|e| {
                let pushes = curves[0].epochs[e].pushes;
                (pushes, mean(&curves.iter().map(|c| c.epochs[e].val.total).collect::<Vec<_>>()))
            })
            .collect()
    }

    /// Pushes the active and the uniform runs need for their seed-averaged validation loss to
    /// reach the uniform run's final value.
    pub fn pushes_to_uniform_final(&self) -> (Option<usize>, Option<usize>) {
        let uniform = self.mean_val_curve(TrainingKind::DualUniform);
        let active = self.mean_val_curve(TrainingKind::DualActive);
        let Some(&(_, target)) = uniform.last() else {
            return (None, None);
        };
        let reach = |c: &[(usize, f64)]| c.iter().find(|(_, v)| *v <= target).map(|(p, _)| *p);
        (reach(&active), reach(&uniform))
    }

    /// Seed-averaged per-push NRMSE of each variant.
    pub fn mean_by_push(&self) -> Vec<(Variant, Vec<f64>)> {
        Variant::ALL
            .iter()
            .filter_map(|&v| {
                let rows: Vec<&Vec<f64>> = self.seeds.iter().filter_map(|s| s.by_push.iter().find(|(x, _)| *x == v)).map(|(_, b)| b).collect();
                let n = rows.iter().map(|r| r.len()).min()?;
                Some((v, (0..n).map(|p| mean(&rows.iter().map(|r| r[p]).collect::<Vec<_>>())).collect()))
            })
            .collect()
    }

    /// Writes `ablation.csv`, `summary.md`, `nrmse_by_push.svg`, `validation.csv` and `study.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<NrmseReport> = self.seeds.iter().flat_map(|s| s.reports.iter().map(|(_, r)| r.clone())).collect();
        let csv_path = dir.join("ablation.csv");
        write_ablation_csv(&rows, std::fs::File::create(&csv_path)?)?;
        let mut md = summarize(&read_ablation_csv(&csv_path)?);
        let (a, u) = self.pushes_to_uniform_final();
        let fmt = |p: Option<usize>| p.map_or("not reached".to_string(), |p| p.to_string());
        md.push_str(&format!("\nPushes to reach the uniform run's final validation loss: active {}, uniform {}.\n", fmt(a), fmt(u)));
        std::fs::write(dir.join("summary.md"), md)?;
        let series: Vec<(String, Vec<f64>)> = self.mean_by_push().into_iter().map(|(v, b)| (v.label().to_string(), b)).collect();
        std::fs::write(dir.join("nrmse_by_push.svg"), nrmse_by_push_svg(&series))?;
        let mut wr = csv::Writer::from_path(dir.join("validation.csv"))?;
        wr.write_record(["training", "epoch", "pushes", "val_total"])?;
        for k in [TrainingKind::DualActive, TrainingKind::DualUniform] {
            for (e, (p, v)) in self.mean_val_curve(k).into_iter().enumerate() {
                wr.write_record([k.name().to_string(), e.to_string(), p.to_string(), v.to_string()])?;
            }
        }
        wr.flush()?;
        std::fs::write(dir.join("study.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Runs the whole study. Checkpoints and loss curves go to `out_dir/seed-<s>/<training>/` when
/// a directory is given.
pub fn run_study(cfg: &StudyConfig, out_dir: Option<&Path>) -> Result<StudyReport> {
    cfg.validate()?;
    let pop = generate_population(&ParameterRanges::table_one(), &default_library(), cfg.objects, cfg.population_seed)?;
    let (dev, held_out) = split_population(&pop, cfg.train_fraction, cfg.population_seed);
    if held_out.is_empty() || dev.len() < 2 {
        return Err(Error::Config("population too small for a held-out split".into()));
    }
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut trainings = Vec::new();
        let mut models: Vec<(TrainingKind, Models)> = Vec::new();
        for kind in TrainingKind::ALL {
            let tcfg = TrainConfig { seed, strategy: kind.strategy(), mode: kind.mode(), ..cfg.train.clone() };
            log::info!("seed {seed}: training {}", kind.name());
            let (m, report) = train(&dev, &tcfg)?;
            if let Some(dir) = out_dir {
                save_run(&dir.join(format!("seed-{seed}")).join(kind.name()), &m, &report)?;
            }
            trainings.push(TrainingRecord { kind, report });
            models.push((kind, m));
        }
        let mut reports = Vec::new();
        let mut by_push = Vec::new();
        for v in Variant::ALL {
            let kind = TrainingKind::for_variant(v);
            let m = &models.iter().find(|(k, _)| *k == kind).expect("every kind is trained").1;
            let ecfg = EvalConfig { seed, ..EvalConfig::for_variant(v, &cfg.eval) };
            let results = evaluate(m, &held_out, &ecfg)?;
            let report = NrmseReport::from_results(v.label(), &ecfg, &results, None)?;
            log::info!("seed {seed}: {} overall NRMSE {:.3}", v.label(), report.overall);
            by_push.push((v, nrmse_by_push(&ecfg, &results)?));
            reports.push((v, report));
        }
        seeds.push(SeedResult { seed, trainings, reports, by_push });
    }
    let report = StudyReport { config: cfg.clone(), held_out: held_out.len(), seeds };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}
