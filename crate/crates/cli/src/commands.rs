use std::path::Path;

use serde::Serialize;

use gradguide::experiments::{
    figure_adaptive, figure_guidance_comparison, figure_reward_panel, Panel, SubspaceProblem,
};
use gradguide::guidance::{target_y, GuidanceKind, GuidanceSpec};
use gradguide::io::{
    config_hash, read_model, stats_table, trajectory_table, write_atomic, write_dataset, write_metadata,
    write_model,
};
use gradguide::optimizer::{run_alg1, run_alg2, OptRunState};
use gradguide::rng::derive_seed;
use gradguide::sampler::{backward_sample, oracle_sample, oracle_target, SampleBatch, SamplerMode};
use gradguide::score::{fit_frozen_cov, fit_full_linear, fit_mean_only, fit_subspace, LinearScoreModel, ScoreClass};
use gradguide::verify::{all_passed, reports_csv, run_suite, summary_table};
use gradguide::{dataset::Dataset, Result};

use crate::config::{DatasetConfig, RunConfig};

/// Seed tags for the independent parts of a run.
const DATA: u64 = 0;
const OBJECTIVE: u64 = 1;
const SAMPLE: u64 = 2;
const OPTIMIZE: u64 = 3;

pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = config_hash(&cfg.canonical()?);
        Ok(Self { cfg, hash })
    }

    fn out(&self, name: &str) -> std::path::PathBuf {
        self.cfg.out.join(name)
    }

    fn needs_problem(&self) -> bool {
        matches!(self.cfg.dataset, DatasetConfig::Subspace { .. })
            || ScoreClass::parse(&self.cfg.model.class).ok() == Some(ScoreClass::Subspace)
    }

    fn data_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, DATA)
    }

    /// Dataset, its subspace structure when available, and the fitted (or loaded) model.
    fn setup(&self) -> Result<(Dataset, Option<SubspaceProblem>, LinearScoreModel)> {
        let (data, problem) = if self.needs_problem() {
            let p = self.cfg.dataset.subspace_problem(self.data_seed())?;
            (p.data.clone(), Some(p))
        } else {
            (self.cfg.dataset.load(self.data_seed())?, None)
        };
        let model = match &self.cfg.model.path {
            Some(p) => read_model(p)?,
            None => fit(&data, ScoreClass::parse(&self.cfg.model.class)?)?,
        };
        Ok((data, problem, model))
    }

    fn write_config_echo(&self) -> Result<()> {
        write_atomic(&self.out("config.toml"), self.cfg.canonical()?.as_bytes())
    }
}

fn fit(data: &Dataset, class: ScoreClass) -> Result<LinearScoreModel> {
    match class {
        ScoreClass::MeanOnly => Ok(fit_mean_only(data)),
        ScoreClass::FullLinear => fit_full_linear(data),
        ScoreClass::FrozenCov => fit_frozen_cov(data),
        ScoreClass::Subspace => fit_subspace(data, None),
    }
}

#[derive(Serialize)]
struct FitMeta<'a> {
    config_hash: &'a str,
    class: &'a str,
    samples: usize,
    dim: usize,
    latent_dim: Option<usize>,
}

pub fn cmd_fit(ctx: &Context) -> Result<()> {
    let (data, _, model) = ctx.setup()?;
    write_model(&ctx.out("model.toml"), &model)?;
    write_dataset(&ctx.out("dataset.csv"), &data, &ctx.hash)?;
    write_metadata(
        &ctx.out("model.meta.toml"),
        &FitMeta {
            config_hash: &ctx.hash,
            class: model.class().name(),
            samples: data.len(),
            dim: data.dim(),
            latent_dim: model.basis().map(|b| b.latent_dim()),
        },
    )?;
    ctx.write_config_echo()?;
    log::info!("fitted {} model on {} samples", model.class().name(), data.len());
    Ok(())
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    config_hash: &'a str,
    seed: u64,
    n_steps: usize,
    horizon: f64,
    batch: usize,
    mode: &'a str,
    y: f64,
}

pub fn cmd_sample(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let (_, problem, model) = ctx.setup()?;
    let schedule = cfg.noise_schedule()?;
    let dim = model.dim();
    let spec = match cfg.guidance.kind {
        GuidanceKind::None => GuidanceSpec {
            sigma: cfg.guidance.sigma,
            ..GuidanceSpec::none(dim)
        },
        kind => {
            let obj = cfg
                .objective
                .build(dim, problem.as_ref(), derive_seed(cfg.seed, OBJECTIVE))?;
            let g = obj.grad(&model.implied_mean())?;
            let y = match cfg.guidance.y {
                Some(y) => y,
                None => target_y(&model, &g, cfg.guidance.sigma, cfg.guidance.eta)?,
            };
            GuidanceSpec {
                kind,
                g,
                y,
                sigma: cfg.guidance.sigma,
                beta_rule: cfg.guidance.beta_rule,
                score_scale: cfg.guidance.score_scale,
            }
        }
    };
    let mut scfg = cfg.sampler.clone();
    scfg.seed = derive_seed(cfg.seed, SAMPLE);
    let batch: SampleBatch = match scfg.mode {
        SamplerMode::Sde => backward_sample(&model, &spec, &scfg, &schedule)?,
        SamplerMode::AnalyticOracle => oracle_sample(&oracle_target(&model, &spec)?, scfg.batch, scfg.seed)?,
    };
    let samples = Dataset::new(batch.samples.clone(), model.support_basis())?;
    write_dataset(&ctx.out("samples.csv"), &samples, &ctx.hash)?;
    stats_table(&batch.stats()).write(&ctx.out("sample_stats.csv"), &ctx.hash)?;
    write_metadata(
        &ctx.out("samples.meta.toml"),
        &SampleMeta {
            config_hash: &ctx.hash,
            seed: scfg.seed,
            n_steps: scfg.n_steps,
            horizon: scfg.horizon,
            batch: scfg.batch,
            mode: match scfg.mode {
                SamplerMode::Sde => "sde",
                SamplerMode::AnalyticOracle => "analytic_oracle",
            },
            y: spec.y,
        },
    )?;
    ctx.write_config_echo()
}

fn optimize(ctx: &Context, adaptive: bool) -> Result<OptRunState> {
    let cfg = &ctx.cfg;
    let (_, problem, model) = ctx.setup()?;
    let obj = cfg
        .objective
        .build(model.dim(), problem.as_ref(), derive_seed(cfg.seed, OBJECTIVE))?;
    let schedule = cfg.noise_schedule()?;
    let seed = derive_seed(cfg.seed, OPTIMIZE);
    if adaptive {
        let mut ocfg = cfg.optimizer.clone();
        ocfg.alg2.get_or_insert_with(Default::default);
        run_alg2(&model, &obj, &ocfg, &schedule, seed)
    } else {
        run_alg1(&model, &obj, &cfg.optimizer, &schedule, seed)
    }
}

fn write_trajectory(ctx: &Context, name: &str, state: &OptRunState) -> Result<()> {
    trajectory_table(state).write(&ctx.out(name), &ctx.hash)?;
    let last = state.final_record();
    println!(
        "rounds={} lambda={} eta={} final_value={} final_gap={}",
        state.round,
        state.params.lambda,
        state.params.eta,
        last.value,
        last.gap.map_or("n/a".to_string(), |g| g.to_string())
    );
    ctx.write_config_echo()
}

pub fn cmd_alg1(ctx: &Context) -> Result<()> {
    let state = optimize(ctx, false)?;
    write_trajectory(ctx, "alg1_trajectory.csv", &state)
}

pub fn cmd_alg2(ctx: &Context) -> Result<()> {
    let state = optimize(ctx, true)?;
    write_trajectory(ctx, "alg2_trajectory.csv", &state)
}

/// Returns whether every check passed.
pub fn cmd_verify(ctx: &Context) -> Result<bool> {
    let mut suite = ctx.cfg.verify.clone();
    suite.seed = ctx.cfg.seed;
    let reports = run_suite(&suite)?;
    let csv = format!("# config_hash={}\n{}", ctx.hash, reports_csv(&reports));
    write_atomic(&ctx.out("verify.csv"), csv.as_bytes())?;
    print!("{}", summary_table(&reports));
    ctx.write_config_echo()?;
    Ok(all_passed(&reports))
}

pub fn cmd_figures(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let problem = cfg.dataset.subspace_problem(ctx.data_seed())?;
    let fig = &cfg.figures;
    let seed = derive_seed(cfg.seed, OPTIMIZE);
    let write = |name: &str, t: gradguide::io::CsvTable| -> Result<()> {
        let path = ctx.out(name);
        t.write(&path, &ctx.hash)?;
        log::info!("wrote {}", display(&path));
        Ok(())
    };
    write("guidance_comparison.csv", figure_guidance_comparison(&problem, fig, seed)?)?;
    for panel in Panel::ALL {
        write(
            &format!("reward_{}.csv", panel.name()),
            figure_reward_panel(&problem, panel, fig, seed)?,
        )?;
    }
    write("adaptive.csv", figure_adaptive(&problem, fig, seed)?)?;
    ctx.write_config_echo()
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
