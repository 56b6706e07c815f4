use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use clue::baselines::{local_sensitivity, ufido_optimize, UfidoResult};
use clue::bnn::{run_sghmc, train_map, Head, Interval, MlpConfig, PosteriorEnsemble, SghmcSchedule};
use clue::checkpoint::MANIFEST;
use clue::clue::{clue_optimize, diverse_clues, display_tabular, saliency_image, ClueConfig, ClueResult, InitStrategy};
use clue::datasets::{make_moons, EncodedDataset};
use clue::dgm::{train_vae, train_vaeac, TrainLog, Vae, Vaeac};
use clue::evalfw::{
    build_ground_truth, knee_points, log_grid, nearest_neighbor_l2, pareto_curve, prepare_framework,
    real_data_eval, run_framework, AuxModelConfig, BnnInference, EvalRecord, FrameworkConfig, GroundTruth, KneePoint,
    Method, ParetoCurve, RejectionRule, Relevance, Track,
};
use clue::uncertainty::{Predictor, UncertaintyKind, UncertaintyReport};
use clue_tensor::Tensor;

use crate::config::{convention_of, RunConfig};
use crate::data::load_dataset;
use crate::error::{CliError, Result};
use crate::output::{num, opt, Ctx};
use crate::{Ablation, Cli, Command, DgmKind, ModelPaths, RelevanceArg, TrackArg};

const MAP_BATCH: usize = 128;
const MAP_LR: f64 = 1e-3;

fn name_of(c: &Command) -> &'static str {
    match c {
        Command::TrainBnn { .. } => "train-bnn",
        Command::TrainDgm { .. } => "train-dgm",
        Command::Uncertainty { .. } => "uncertainty",
        Command::Clue { .. } => "clue",
        Command::Sensitivity { .. } => "sensitivity",
        Command::Ufido { .. } => "ufido",
        Command::EvalFramework { .. } => "eval-framework",
        Command::EvalReal { .. } => "eval-real",
        Command::Ablate { which } => match which {
            Ablation::InitStrategy { .. } => "ablate-init-strategy",
            Ablation::DgmCapacity { .. } => "ablate-dgm-capacity",
            Ablation::LambdaY { .. } => "ablate-lambda-y",
            Ablation::DeterministicNn { .. } => "ablate-deterministic-nn",
        },
        Command::MoonsDemo { .. } => "moons-demo",
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let sub = name_of(&cli.command);
    let cfg = RunConfig::resolve(&cli.global, format!("{:?}", cli.command), sub)?;
    // checkpoints and the preset are checked before any output is written
    if let Some(p) = paths_of(&cli.command) {
        precheck(&cfg, &cli.command, p)?;
    } else if !matches!(cli.command, Command::MoonsDemo { .. }) {
        cfg.preset()?;
    }
    let ctx = Ctx::new(cfg, sub)?;
    let start = Instant::now();
    match &cli.command {
        Command::TrainBnn { deterministic, epochs } => train_bnn(&ctx, *deterministic, *epochs),
        Command::TrainDgm { kind } => train_dgm(&ctx, *kind),
        Command::Uncertainty { paths } => uncertainty(&ctx, paths),
        Command::Clue { paths, restarts } => clue_cmd(&ctx, paths, *restarts),
        Command::Sensitivity { paths } => sensitivity(&ctx, paths),
        Command::Ufido { paths, convention } => ufido(&ctx, paths, *convention),
        Command::EvalFramework {
            paths,
            method,
            grid,
            seeds,
            track,
            relevance,
        } => eval_framework(&ctx, paths, method, grid, *seeds, *track, *relevance),
        Command::EvalReal { paths } => eval_real(&ctx, paths),
        Command::Ablate { which } => match which {
            Ablation::InitStrategy { paths } => ablate_init(&ctx, paths),
            Ablation::DgmCapacity { paths, latent } => ablate_capacity(&ctx, paths, latent),
            Ablation::LambdaY { paths, values } => ablate_lambda_y(&ctx, paths, values),
            Ablation::DeterministicNn { paths, epochs } => ablate_deterministic(&ctx, paths, *epochs),
        },
        Command::MoonsDemo {
            n,
            noise,
            resolution,
            burn_in,
        } => moons_demo(&ctx, *n, *noise, *resolution, *burn_in),
    }?;
    eprintln!("{sub}: done in {:.1}s, outputs in {}", start.elapsed().as_secs_f64(), ctx.out().display());
    Ok(())
}

fn paths_of(c: &Command) -> Option<&ModelPaths> {
    match c {
        Command::Uncertainty { paths }
        | Command::Clue { paths, .. }
        | Command::Sensitivity { paths }
        | Command::Ufido { paths, .. }
        | Command::EvalFramework { paths, .. }
        | Command::EvalReal { paths } => Some(paths),
        Command::Ablate { which } => Some(match which {
            Ablation::InitStrategy { paths }
            | Ablation::DgmCapacity { paths, .. }
            | Ablation::LambdaY { paths, .. }
            | Ablation::DeterministicNn { paths, .. } => paths,
        }),
        _ => None,
    }
}

#[derive(Clone, Copy)]
enum Ckpt {
    Bnn,
    Vae,
    Vaeac,
    Gt,
}

fn ckpt_path(cfg: &RunConfig, p: &ModelPaths, which: Ckpt) -> PathBuf {
    let (given, name) = match which {
        Ckpt::Bnn => (&p.bnn, "bnn"),
        Ckpt::Vae => (&p.vae, "vae"),
        Ckpt::Vaeac => (&p.vaeac, "vaeac"),
        Ckpt::Gt => (&p.gt, "ground_truth"),
    };
    given.clone().unwrap_or_else(|| cfg.out.join(name))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.join(MANIFEST).exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "missing checkpoint {} (create it with `clue {hint}`)",
            path.display()
        )))
    }
}

fn precheck(cfg: &RunConfig, c: &Command, p: &ModelPaths) -> Result<()> {
    cfg.preset()?;
    let needs: &[Ckpt] = match c {
        Command::Uncertainty { .. } | Command::Sensitivity { .. } => &[Ckpt::Bnn],
        Command::Clue { .. } | Command::EvalReal { .. } => &[Ckpt::Bnn, Ckpt::Vae],
        Command::Ufido { .. } => &[Ckpt::Bnn, Ckpt::Vaeac],
        Command::EvalFramework { .. } => &[Ckpt::Gt],
        Command::Ablate { which } => match which {
            Ablation::DgmCapacity { .. } => &[Ckpt::Bnn],
            _ => &[Ckpt::Bnn, Ckpt::Vae],
        },
        _ => &[],
    };
    for &n in needs {
        let hint = match n {
            Ckpt::Bnn => "train-bnn",
            Ckpt::Vae => "train-dgm --kind vae",
            Ckpt::Vaeac => "train-dgm --kind vaeac",
            Ckpt::Gt => "train-dgm --kind ground-truth",
        };
        require(&ckpt_path(cfg, p, n), hint)?;
    }
    Ok(())
}

fn rng(ctx: &Ctx, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    r.set_stream(stream);
    r
}

fn mismatch(what: &str, expected: usize, got: usize) -> CliError {
    CliError::Usage(format!(
        "preset mismatch: {what} expects {expected} input features, the dataset has {got}"
    ))
}

fn load_bnn(ctx: &Ctx, p: &ModelPaths, ds: &EncodedDataset) -> Result<PosteriorEnsemble> {
    let bnn = PosteriorEnsemble::load(&ckpt_path(&ctx.cfg, p, Ckpt::Bnn))?;
    if bnn.input_dim() != ds.dim() {
        return Err(mismatch("the bnn checkpoint", bnn.input_dim(), ds.dim()));
    }
    Ok(bnn)
}

fn load_vae(ctx: &Ctx, p: &ModelPaths, ds: &EncodedDataset) -> Result<Vae> {
    let vae = Vae::load(&ckpt_path(&ctx.cfg, p, Ckpt::Vae))?;
    if vae.layout().width() != ds.dim() {
        return Err(mismatch("the vae checkpoint", vae.layout().width(), ds.dim()));
    }
    Ok(vae)
}

fn load_vaeac(ctx: &Ctx, p: &ModelPaths, ds: &EncodedDataset) -> Result<Vaeac> {
    let m = Vaeac::load(&ckpt_path(&ctx.cfg, p, Ckpt::Vaeac))?;
    if m.layout().width() != ds.dim() {
        return Err(mismatch("the vaeac checkpoint", m.layout().width(), ds.dim()));
    }
    Ok(m)
}

/// Test rows rejected by the preset policy, at most `max`.
fn rejected<P: Predictor + ?Sized>(
    ctx: &Ctx,
    model: &P,
    ds: &EncodedDataset,
    kind: UncertaintyKind,
    max: Option<usize>,
) -> Result<(Vec<usize>, Tensor)> {
    let policy = ctx.cfg.preset()?.rejection_policy()?.with_kind(kind);
    let xt = ds.x_test();
    let mut idx = Vec::new();
    for (i, r) in model.reports(&xt)?.iter().enumerate() {
        if policy.reject(r)? {
            idx.push(i);
        }
    }
    if let Some(m) = max {
        idx.truncate(m);
    }
    if idx.is_empty() {
        eprintln!("no test point exceeds the rejection threshold {}", policy.threshold);
    }
    let x = xt.select_rows(&idx);
    Ok((idx, x))
}

fn prediction(r: &UncertaintyReport) -> String {
    match r {
        UncertaintyReport::Classification { .. } => r.predicted_class().map(|c| c.to_string()).unwrap_or_default(),
        UncertaintyReport::Regression { mean, .. } => num(*mean),
    }
}

fn rows_to_tensor(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
    Ok(Tensor::matrix(rows, cols, data).map_err(clue::ClueError::from)?)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn train_bnn(ctx: &Ctx, deterministic: bool, epochs: usize) -> Result<()> {
    let preset = ctx.cfg.preset()?;
    let ds = load_dataset(&ctx.cfg)?;
    let mlp = preset.mlp(ds.dim(), &ds.target)?;
    let mut r = rng(ctx, 1);
    let bnn = if deterministic {
        train_map(&ds.x_train(), &ds.y_train(), &ds.target, &mlp, epochs, MAP_BATCH, MAP_LR, &mut r)?
    } else {
        run_sghmc(&ds.x_train(), &ds.y_train(), &ds.target, &mlp, &preset.sghmc(), &mut r)?
    };
    let mut meta = ctx.meta();
    meta["deterministic"] = deterministic.into();
    bnn.save(&ctx.path("bnn"), meta)?;

    let mut t = ctx.table("bnn_eval.csv", &["split", "metric", "value"])?;
    let (mu, sd) = ds.target.scale();
    for (split, x, y) in [("train", ds.x_train(), ds.y_train()), ("test", ds.x_test(), ds.y_test())] {
        let reports = bnn.reports(&x)?;
        let score = match ds.target.n_classes() {
            Some(_) => (
                "accuracy",
                mean(reports.iter().zip(&y).map(|(r, &t)| f64::from(u8::from(r.predicted_class() == Some(t as usize))))),
            ),
            None => (
                "rmse",
                mean(reports.iter().zip(&y).map(|(r, &t)| match r {
                    UncertaintyReport::Regression { mean, .. } => (mean - (t * sd + mu)).powi(2),
                    UncertaintyReport::Classification { .. } => f64::NAN,
                }))
                .sqrt(),
            ),
        };
        t.row(ctx.cfg.seed, &[split.into(), score.0.into(), num(score.1)])?;
        t.row(ctx.cfg.seed, &[split.into(), "mean_total_uncertainty".into(), num(mean(reports.iter().map(|r| r.total())))])?;
    }
    t.row(ctx.cfg.seed, &["-".into(), "ensemble_size".into(), bnn.len().to_string()])?;
    t.finish()
}

fn write_log(ctx: &Ctx, name: &str, log: &TrainLog) -> Result<()> {
    let mut t = ctx.table(name, &["epoch", "elbo", "smoothed_elbo"])?;
    for (i, (e, s)) in log.epoch_elbo.iter().zip(log.smoothed(10)).enumerate() {
        t.row(ctx.cfg.seed, &[i.to_string(), num(*e), num(s)])?;
    }
    t.finish()
}

fn train_dgm(ctx: &Ctx, kind: DgmKind) -> Result<()> {
    let preset = ctx.cfg.preset()?;
    let ds = load_dataset(&ctx.cfg)?;
    let x = ds.x_train();
    let mut r = rng(ctx, 2);
    match kind {
        DgmKind::Vae => {
            let (m, log) = train_vae(&x, preset.vae_config(ds.columns.clone()), &preset.dgm_train(), &mut r)?;
            m.save(&ctx.path("vae"), ctx.meta())?;
            write_log(ctx, "vae_train.csv", &log)
        }
        DgmKind::Vaeac => {
            let (m, log) = train_vaeac(&x, preset.vaeac_config(ds.columns.clone()), &preset.dgm_train(), &mut r)?;
            m.save(&ctx.path("vaeac"), ctx.meta())?;
            write_log(ctx, "vaeac_train.csv", &log)
        }
        DgmKind::GroundTruth => {
            let gt = build_ground_truth(&ds, &preset.ground_truth_config(), &mut r)?;
            gt.save(&ctx.path("ground_truth"))?;
            let (xs, _) = gt.sample(200, &mut r)?;
            let lp = gt.log_p(&xs, &mut r)?;
            ctx.write_json(
                "ground_truth.json",
                &serde_json::json!({
                    "x_width": gt.x_width(),
                    "task": gt.task(),
                    "mean_log_p_of_samples": mean(lp.iter().copied()),
                }),
            )
        }
    }
}

fn uncertainty(ctx: &Ctx, p: &ModelPaths) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let policy = ctx.cfg.preset()?.rejection_policy()?.with_kind(ctx.cfg.clue.uncertainty);
    let mut t = ctx.table(
        "uncertainty.csv",
        &["index", "target", "prediction", "total", "aleatoric", "epistemic", "rejected"],
    )?;
    let (mu, sd) = ds.target.scale();
    let y = ds.y_test();
    for (i, r) in bnn.reports(&ds.x_test())?.iter().enumerate() {
        let target = match ds.target.n_classes() {
            Some(_) => (y[i] as usize).to_string(),
            None => num(y[i] * sd + mu),
        };
        t.row(
            ctx.cfg.seed,
            &[
                i.to_string(),
                target,
                prediction(r),
                num(r.metric(UncertaintyKind::Total)),
                num(r.metric(UncertaintyKind::Aleatoric)),
                num(r.metric(UncertaintyKind::Epistemic)),
                policy.reject(r)?.to_string(),
            ],
        )?;
    }
    t.finish()
}

fn clue_cmd(ctx: &Ctx, p: &ModelPaths, restarts: Option<usize>) -> Result<()> {
    let preset = ctx.cfg.preset()?;
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let vae = load_vae(ctx, p, &ds)?;
    let mut c = ctx.cfg.clue.clone();
    if let Some(r) = restarts {
        c.restarts = r;
    }
    c.validate()?;
    let kind = c.uncertainty;
    let policy = preset.rejection_policy()?.with_kind(kind);
    let (idx, x0) = rejected(ctx, &bnn, &ds, kind, p.max_points)?;
    let mut r = rng(ctx, 3);
    // (test index, restart, result)
    let mut results: Vec<(usize, usize, ClueResult)> = Vec::new();
    if c.restarts > 1 {
        for (row, &i) in idx.iter().enumerate() {
            for (k, res) in diverse_clues(&vae, &bnn, &c, x0.row(row), Some(&policy), &mut r)?.into_iter().enumerate() {
                results.push((i, k, res));
            }
        }
    } else {
        for (res, &i) in clue_optimize(&vae, &bnn, &c, &x0, Some(&policy), &mut r)?.into_iter().zip(&idx) {
            results.push((i, 0, res));
        }
    }

    let seed = ctx.cfg.seed;
    let mut t = ctx.table(
        "clue.csv",
        &[
            "index",
            "restart",
            "h_before",
            "h_after",
            "delta_l1",
            "iterations",
            "best_iteration",
            "below_threshold",
            "prediction_before",
            "prediction_after",
        ],
    )?;
    for (i, k, res) in &results {
        t.row(
            seed,
            &[
                i.to_string(),
                k.to_string(),
                num(res.before.metric(kind)),
                num(res.after.metric(kind)),
                num(res.delta_l1()),
                res.iterations.to_string(),
                res.best_iteration.to_string(),
                res.below_threshold.map(|b| b.to_string()).unwrap_or_default(),
                prediction(&res.before),
                prediction(&res.after),
            ],
        )?;
    }
    t.finish()?;

    let latent: Vec<String> = (0..vae.config.latent_dim).map(|j| format!("z{j}")).collect();
    let mut header = vec!["index", "restart", "iteration", "loss"];
    header.extend(latent.iter().map(String::as_str));
    let mut t = ctx.table("latent_trajectories.csv", &header)?;
    for (i, k, res) in &results {
        for (it, (z, loss)) in res.z_trajectory.iter().zip(&res.loss_trajectory).enumerate() {
            let mut row = vec![i.to_string(), k.to_string(), it.to_string(), num(*loss)];
            row.extend(z.iter().map(|v| num(*v)));
            t.row(seed, &row)?;
        }
    }
    t.finish()?;

    if preset.schema.is_some() {
        let mut t = ctx.table(
            "clue_features.csv",
            &[
                "index",
                "restart",
                "column",
                "original",
                "counterfactual",
                "original_label",
                "counterfactual_label",
                "percentile_original",
                "percentile_counterfactual",
                "highlighted",
            ],
        )?;
        for (i, k, res) in &results {
            for f in display_tabular(&ds, &res.x0, &res.x_clue)? {
                t.row(
                    seed,
                    &[
                        i.to_string(),
                        k.to_string(),
                        f.column,
                        num(f.original),
                        num(f.counterfactual),
                        f.original_label.unwrap_or_default(),
                        f.counterfactual_label.unwrap_or_default(),
                        opt(f.percentile_original),
                        opt(f.percentile_counterfactual),
                        f.highlighted.to_string(),
                    ],
                )?;
            }
        }
        t.finish()
    } else {
        let mut t = ctx.table("saliency.csv", &["index", "restart", "pixel", "original", "counterfactual", "saliency"])?;
        for (i, k, res) in &results {
            let s = saliency_image(&res.x0, &res.x_clue)?;
            for (j, v) in s.iter().enumerate() {
                t.row(
                    seed,
                    &[i.to_string(), k.to_string(), j.to_string(), num(res.x0[j]), num(res.x_clue[j]), num(*v)],
                )?;
            }
        }
        t.finish()
    }
}

fn sensitivity(ctx: &Ctx, p: &ModelPaths) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let c = &ctx.cfg.sensitivity;
    let (idx, x0) = rejected(ctx, &bnn, &ds, c.uncertainty, p.max_points)?;
    let xc = local_sensitivity(&bnn, &x0, c)?;
    let h0 = bnn.metric_values(&x0, c.uncertainty)?;
    let hc = bnn.metric_values(&xc, c.uncertainty)?;
    let train = ds.x_train();
    let mut t = ctx.table(
        "sensitivity.csv",
        &["index", "eta", "h_before", "h_after", "delta_l1", "nn_l2_before", "nn_l2_after"],
    )?;
    for (row, &i) in idx.iter().enumerate() {
        t.row(
            ctx.cfg.seed,
            &[
                i.to_string(),
                num(c.eta),
                num(h0[row]),
                num(hc[row]),
                num(l1(x0.row(row), xc.row(row))),
                num(nearest_neighbor_l2(&train, x0.row(row))?),
                num(nearest_neighbor_l2(&train, xc.row(row))?),
            ],
        )?;
    }
    t.finish()
}

fn ufido(ctx: &Ctx, p: &ModelPaths, convention: Option<crate::ConventionArg>) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let vaeac = load_vaeac(ctx, p, &ds)?;
    let mut c = ctx.cfg.ufido.clone();
    if let Some(cv) = convention {
        c.convention = convention_of(cv);
    }
    let (idx, x0) = rejected(ctx, &bnn, &ds, c.uncertainty, p.max_points)?;
    let res: Vec<UfidoResult> = ufido_optimize(&vaeac, &bnn, &c, &x0, &mut rng(ctx, 4))?;
    let mut t = ctx.table(
        "ufido.csv",
        &["index", "lambda_b", "h_before", "h_after", "delta_l1", "kept_columns", "mask", "keep_probabilities"],
    )?;
    let join = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(" ");
    for (r, &i) in res.iter().zip(&idx) {
        t.row(
            ctx.cfg.seed,
            &[
                i.to_string(),
                num(c.lambda_b),
                num(r.before.metric(c.uncertainty)),
                num(r.after.metric(c.uncertainty)),
                num(r.delta_l1()),
                r.mask.iter().filter(|&&b| b == 1.0).count().to_string(),
                join(&r.mask),
                join(&r.rho),
            ],
        )?;
    }
    t.finish()
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Usage(format!("--grid expects lo:hi:n, got `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(bad());
    };
    let (lo, hi, n) = (
        lo.parse::<f64>().map_err(|_| bad())?,
        hi.parse::<f64>().map_err(|_| bad())?,
        n.parse::<usize>().map_err(|_| bad())?,
    );
    log_grid(lo, hi, n).map_err(|e| CliError::Usage(e.to_string()))
}

fn default_grid(m: Method) -> Vec<f64> {
    let g = match m {
        Method::Identity => return vec![1.0],
        Method::Clue => log_grid(0.3, 30.0, 5),
        Method::Ufido => log_grid(0.03, 3.0, 5),
        Method::Sensitivity => log_grid(0.03, 30.0, 7),
    };
    g.expect("valid default grid")
}

#[derive(Serialize)]
struct SeedKnees {
    seed: u64,
    knees: Vec<KneePoint>,
}

#[derive(Serialize)]
struct KneeReport {
    track: Track,
    relevance: Relevance,
    reference_methods: Vec<String>,
    per_seed: Vec<SeedKnees>,
    /// Mean knee-point distance per method over seeds.
    mean: BTreeMap<String, f64>,
}

#[allow(clippy::too_many_arguments)]
fn eval_framework(
    ctx: &Ctx,
    p: &ModelPaths,
    methods: &[String],
    grids: &[String],
    seeds: u64,
    track: TrackArg,
    relevance: RelevanceArg,
) -> Result<()> {
    let preset = ctx.cfg.preset()?;
    let methods: Vec<Method> = methods
        .iter()
        .map(|m| Method::from_str(m).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<_>>()?;
    if methods.is_empty() || seeds == 0 {
        return Err(CliError::Usage("need at least one method and one seed".into()));
    }
    let grids: Vec<Vec<f64>> = match grids.len() {
        0 => methods.iter().map(|&m| default_grid(m)).collect(),
        1 => vec![parse_grid(&grids[0])?; methods.len()],
        n if n == methods.len() => grids.iter().map(|g| parse_grid(g)).collect::<Result<_>>()?,
        n => {
            return Err(CliError::Usage(format!(
                "{n} grids for {} methods; give one grid or one per method",
                methods.len()
            )))
        }
    };
    let track = match track {
        TrackArg::Aleatoric => Track::Aleatoric,
        TrackArg::Epistemic => Track::Epistemic,
    };
    let relevance = match relevance {
        RelevanceArg::L1 => Relevance::L1,
        RelevanceArg::Logp => Relevance::LogP,
    };
    let gt = GroundTruth::load(&ckpt_path(&ctx.cfg, p, Ckpt::Gt))?;
    let f = &ctx.cfg.framework;
    let aux = |width| AuxModelConfig {
        latent_dim: preset.dgm.latent_dim,
        width,
        depth: preset.dgm.depth,
        train: preset.dgm_train(),
    };
    let mut ufido = ctx.cfg.ufido.clone();
    ufido.convention = f.ufido_convention;
    let fc = FrameworkConfig {
        n_train: f.n_train,
        n_test: f.n_test,
        track,
        rejection: RejectionRule::TopFraction(f.reject_fraction),
        bnn_depth: preset.bnn.depth,
        bnn_width: preset.bnn.width,
        inference: BnnInference::Sghmc(preset.sghmc()),
        vae: aux(preset.dgm.vae_width),
        vaeac: aux(preset.dgm.vaeac_width),
        clue: ctx.cfg.clue.clone(),
        ufido,
        eval_seed: f.eval_seed,
    };

    // one thread per seed; each seed owns its random stream
    let seed_list: Vec<u64> = (0..seeds).map(|s| ctx.cfg.seed + s).collect();
    let per_seed: Vec<Result<Vec<Vec<EvalRecord>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seed_list
            .iter()
            .map(|&seed| {
                let (gt, fc, methods, grids) = (&gt, &fc, &methods, &grids);
                scope.spawn(move || -> Result<Vec<Vec<EvalRecord>>> {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    r.set_stream(5);
                    let setup = prepare_framework(gt, fc, &mut r)?;
                    methods
                        .iter()
                        .zip(grids)
                        .map(|(&m, g)| Ok(run_framework(&setup, m, g, seed, &mut r)?))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Usage("worker thread panicked".into()))))
            .collect()
    });
    let per_seed: Vec<Vec<Vec<EvalRecord>>> = per_seed.into_iter().collect::<Result<_>>()?;

    let mut t = ctx.table("records.csv", &["method", "hyper", "metric", "value", "n_points"])?;
    for records in per_seed.iter().flatten().flatten() {
        for (name, v) in records.metric_values() {
            t.row(
                records.seed,
                &[records.method.to_string(), num(records.hyper), name.into(), num(v), records.dx_l1.len().to_string()],
            )?;
        }
    }
    t.finish()?;

    let mut t = ctx.table("curves.csv", &["method", "hyper", "informativeness", "relevance"])?;
    let mut knee_seeds = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let is_ref = |m: Method| matches!(m, Method::Clue | Method::Ufido);
    let any_ref = methods.iter().any(|&m| is_ref(m));
    for (seed, per_method) in seed_list.iter().zip(&per_seed) {
        let mut refs: Vec<ParetoCurve> = Vec::new();
        let mut others: Vec<ParetoCurve> = Vec::new();
        for (&m, records) in methods.iter().zip(per_method) {
            let curve = pareto_curve(records, track, relevance)?;
            for (h, (inf, rel)) in curve.hypers.iter().zip(&curve.points) {
                t.row(*seed, &[m.to_string(), num(*h), num(*inf), num(*rel)])?;
            }
            if is_ref(m) || !any_ref {
                refs.push(curve);
            } else {
                others.push(curve);
            }
        }
        let (_, knees) = knee_points(&refs, &others)?;
        for k in &knees {
            let e = sums.entry(k.method.clone()).or_insert((0.0, 0));
            e.0 += k.distance;
            e.1 += 1;
        }
        knee_seeds.push(SeedKnees { seed: *seed, knees });
    }
    t.finish()?;
    ctx.write_json(
        "knee.json",
        &KneeReport {
            track,
            relevance,
            reference_methods: methods
                .iter()
                .filter(|&&m| is_ref(m) || !any_ref)
                .map(|m| m.to_string())
                .collect(),
            per_seed: knee_seeds,
            mean: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        },
    )
}

fn eval_real(ctx: &Ctx, p: &ModelPaths) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let vae = load_vae(ctx, p, &ds)?;
    let kind = ctx.cfg.clue.uncertainty;
    let (_, x0) = rejected(ctx, &bnn, &ds, kind, p.max_points)?;
    if x0.rows() == 0 {
        return Err(clue::ClueError::Empty("rejected test points").into());
    }
    let train = ds.x_train();
    let mut r = rng(ctx, 6);
    let mut out: Vec<(&str, f64, Tensor)> = Vec::new();
    let res = clue_optimize(&vae, &bnn, &ctx.cfg.clue, &x0, None, &mut r)?;
    let data = res.into_iter().flat_map(|c| c.x_clue).collect();
    out.push(("clue", ctx.cfg.clue.lambda_x, rows_to_tensor(x0.rows(), x0.cols(), data)?));
    let mut sc = ctx.cfg.sensitivity.clone();
    sc.uncertainty = kind;
    out.push(("sensitivity", sc.eta, local_sensitivity(&bnn, &x0, &sc)?));
    let vaeac_path = ckpt_path(&ctx.cfg, p, Ckpt::Vaeac);
    if vaeac_path.join(MANIFEST).exists() {
        let vaeac = load_vaeac(ctx, p, &ds)?;
        let mut uc = ctx.cfg.ufido.clone();
        uc.uncertainty = kind;
        let res = ufido_optimize(&vaeac, &bnn, &uc, &x0, &mut r)?;
        let data = res.into_iter().flat_map(|c| c.x_c).collect();
        out.push(("ufido", uc.lambda_b, rows_to_tensor(x0.rows(), x0.cols(), data)?));
    }
    let mut t = ctx.table(
        "real.csv",
        &["method", "hyper", "n_points", "mean_delta_h", "mean_nn_l2", "mean_ratio", "ratio_points"],
    )?;
    for (m, h, xc) in out {
        let s = real_data_eval(&bnn, kind, &train, &x0, &xc)?;
        t.row(
            ctx.cfg.seed,
            &[
                m.into(),
                num(h),
                s.n_points.to_string(),
                num(s.mean_delta_h),
                num(s.mean_nn_distance),
                opt(s.mean_ratio),
                s.ratio_points.to_string(),
            ],
        )?;
    }
    t.finish()
}

/// Mean before/after uncertainty, share reduced, distance and iterations.
fn summarize(results: &[ClueResult], kind: UncertaintyKind) -> [String; 6] {
    let n = results.len();
    [
        n.to_string(),
        num(mean(results.iter().map(|r| r.before.metric(kind)))),
        num(mean(results.iter().map(|r| r.after.metric(kind)))),
        num(mean(results.iter().map(|r| f64::from(u8::from(r.uncertainty_drop(kind) > 0.0))))),
        num(mean(results.iter().map(ClueResult::delta_l1))),
        num(mean(results.iter().map(|r| r.iterations as f64))),
    ]
}

const SUMMARY: [&str; 6] = ["n_points", "mean_h_before", "mean_h_after", "fraction_reduced", "mean_delta_l1", "mean_iterations"];

fn ablate_init(ctx: &Ctx, p: &ModelPaths) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let vae = load_vae(ctx, p, &ds)?;
    let kind = ctx.cfg.clue.uncertainty;
    let (_, x0) = rejected(ctx, &bnn, &ds, kind, p.max_points)?;
    let mut header = vec!["init"];
    header.extend(SUMMARY);
    let mut t = ctx.table("ablate_init_strategy.csv", &header)?;
    for (name, init) in [("encoder_mean", InitStrategy::EncoderMean), ("origin", InitStrategy::Origin)] {
        let c = ClueConfig {
            init,
            ..ctx.cfg.clue.clone()
        };
        let res = clue_optimize(&vae, &bnn, &c, &x0, None, &mut rng(ctx, 7))?;
        let mut row = vec![name.to_string()];
        row.extend(summarize(&res, kind));
        t.row(ctx.cfg.seed, &row)?;
    }
    t.finish()
}

fn ablate_capacity(ctx: &Ctx, p: &ModelPaths, latent: &[usize]) -> Result<()> {
    let preset = ctx.cfg.preset()?;
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let kind = ctx.cfg.clue.uncertainty;
    let (x, xt) = (ds.x_train(), ds.x_test());
    let h0 = bnn.metric_values(&xt, kind)?;
    let mut t = ctx.table("ablate_dgm_capacity.csv", &["latent_dim", "mean_uncertainty_gap", "final_elbo"])?;
    for &l in latent {
        if l == 0 {
            return Err(CliError::Usage("latent sizes must be positive".into()));
        }
        let mut vc = preset.vae_config(ds.columns.clone());
        vc.latent_dim = l;
        let (vae, log) = train_vae(&x, vc, &preset.dgm_train(), &mut rng(ctx, 8))?;
        let hr = bnn.metric_values(&vae.reconstruct(&xt)?, kind)?;
        let gap = mean(h0.iter().zip(&hr).map(|(a, b)| (a - b).abs()));
        t.row(ctx.cfg.seed, &[l.to_string(), num(gap), opt(log.final_elbo())])?;
    }
    t.finish()
}

fn ablate_lambda_y(ctx: &Ctx, p: &ModelPaths, values: &[f64]) -> Result<()> {
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let vae = load_vae(ctx, p, &ds)?;
    let kind = ctx.cfg.clue.uncertainty;
    let (_, x0) = rejected(ctx, &bnn, &ds, kind, p.max_points)?;
    let mut header = vec!["lambda_y", "prediction_change"];
    header.extend(SUMMARY);
    let mut t = ctx.table("ablate_lambda_y.csv", &header)?;
    for &ly in values {
        let c = ClueConfig {
            lambda_y: ly,
            ..ctx.cfg.clue.clone()
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let res = clue_optimize(&vae, &bnn, &c, &x0, None, &mut rng(ctx, 9))?;
        // share of changed classes, or mean absolute change of the predictive mean
        let change = mean(res.iter().map(|r| match (&r.before, &r.after) {
            (UncertaintyReport::Regression { mean: a, .. }, UncertaintyReport::Regression { mean: b, .. }) => (a - b).abs(),
            _ => f64::from(u8::from(r.before.predicted_class() != r.after.predicted_class())),
        }));
        let mut row = vec![num(ly), num(change)];
        row.extend(summarize(&res, kind));
        t.row(ctx.cfg.seed, &row)?;
    }
    t.finish()
}

fn ablate_deterministic(ctx: &Ctx, p: &ModelPaths, epochs: usize) -> Result<()> {
    let preset = ctx.cfg.preset()?;
    let ds = load_dataset(&ctx.cfg)?;
    let bnn = load_bnn(ctx, p, &ds)?;
    let vae = load_vae(ctx, p, &ds)?;
    let mlp = preset.mlp(ds.dim(), &ds.target)?;
    let map = train_map(&ds.x_train(), &ds.y_train(), &ds.target, &mlp, epochs, MAP_BATCH, MAP_LR, &mut rng(ctx, 10))?;
    // a single network has no epistemic part; both models explain total uncertainty
    let kind = UncertaintyKind::Total;
    let c = ClueConfig {
        uncertainty: kind,
        ..ctx.cfg.clue.clone()
    };
    let mut header = vec!["model"];
    header.extend(SUMMARY);
    let mut t = ctx.table("ablate_deterministic_nn.csv", &header)?;
    for (name, model) in [("bnn", &bnn), ("deterministic", &map)] {
        let (_, x0) = rejected(ctx, model, &ds, kind, p.max_points)?;
        let res = clue_optimize(&vae, model, &c, &x0, None, &mut rng(ctx, 11))?;
        let mut row = vec![name.to_string()];
        row.extend(summarize(&res, kind));
        t.row(ctx.cfg.seed, &row)?;
    }
    t.finish()
}

fn moons_demo(ctx: &Ctx, n: usize, noise: f64, resolution: usize, burn_in: usize) -> Result<()> {
    if resolution < 2 || burn_in < 3 {
        return Err(CliError::Usage("--resolution must be >= 2 and --burn-in >= 3".into()));
    }
    let ds = make_moons(n, noise, ctx.cfg.seed)?;
    let (x, y) = (ds.x_train(), ds.y_train());
    let cfg = MlpConfig::new(2, 2, 64, Head::for_target(&ds.target))?;
    let schedule = SghmcSchedule {
        batch_size: 64,
        burn_in: Interval::Epochs(burn_in),
        estimation: Interval::Epochs(burn_in / 3),
        save_every: Interval::Epochs(5),
        n_samples: 40,
        resample_momentum: Interval::Epochs(2),
        gibbs_every: Interval::Epochs(10),
        ..SghmcSchedule::tabular()
    };
    let bnn = run_sghmc(&x, &y, &ds.target, &cfg, &schedule, &mut rng(ctx, 12))?;
    let seed = ctx.cfg.seed;

    let mut t = ctx.table("moons_train.csv", &["x1", "x2", "label"])?;
    for r in 0..x.rows() {
        t.row(seed, &[num(x.row(r)[0]), num(x.row(r)[1]), (y[r] as usize).to_string()])?;
    }
    t.finish()?;

    let (lo1, hi1, lo2, hi2) = (-2.5, 3.5, -2.0, 2.5);
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut data = Vec::with_capacity(resolution * resolution * 2);
    for j in 0..resolution {
        for i in 0..resolution {
            data.push(step(lo1, hi1, i));
            data.push(step(lo2, hi2, j));
        }
    }
    let grid = rows_to_tensor(resolution * resolution, 2, data)?;
    let mut t = ctx.table("moons_grid.csv", &["x1", "x2", "h_total", "h_aleatoric", "h_epistemic"])?;
    for (r, rep) in bnn.reports(&grid)?.iter().enumerate() {
        t.row(
            seed,
            &[
                num(grid.row(r)[0]),
                num(grid.row(r)[1]),
                num(rep.metric(UncertaintyKind::Total)),
                num(rep.metric(UncertaintyKind::Aleatoric)),
                num(rep.metric(UncertaintyKind::Epistemic)),
            ],
        )?;
    }
    t.finish()
}
