use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use weightscope::checkpoint::check_compatible;
use weightscope::engine;
use weightscope::expkit::data::{read_csv, to_csv};
use weightscope::expkit::{gen_blobs, gen_two_moons, make_regime_pair, train, with_label_noise};
use weightscope::expkit::{Init, RegimeKind, ShiftParams, TrainConfig};
use weightscope::interp::{interpolate_global, sweep};
use weightscope::metrics::{barrier, classify_regime, layerwise_scan};
use weightscope::prune::{compare_outcomes, straggler_prune, PruneConfig};
use weightscope::sharpness::{
    adaptive_avg_sharpness, asymptotic_check_objective, layerwise_sharpness, FdStep, NearZeroRule,
};
use weightscope::{
    rng, AlphaGrid, Checkpoint, LabeledBatch, ModelObjective, ModelSpec, Scaling, SharpnessConfig, SweepCurve,
    SweepKind,
};

use crate::manifest::{sha256_hex, RunManifest};
use crate::svg::{self, Series};
use crate::{
    AsymptoticArgs, CliError, Command, GenDataArgs, LayerwiseArgs, MakePairArgs, PairInputs, PruneArgs, ReportArgs,
    SharpnessArgs, SweepArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::MakePair(a) => make_pair(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Layerwise(a) => layerwise(a),
        Command::Sharpness(a) => sharpness(a),
        Command::AsymptoticCheck(a) => asymptotic(a),
        Command::Prune(a) => prune(a),
        Command::Report(a) => report(a),
    }
}

/// Prefix a library error with the flag it came from, keeping its exit code.
fn flagged(flag: &str) -> impl Fn(weightscope::Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        err.message = format!("--{flag}: {}", err.message);
        err
    }
}

fn parse<T: std::str::FromStr<Err = weightscope::Error>>(flag: &str, text: &str) -> Result<T> {
    text.parse().map_err(flagged(flag))
}

fn load_checkpoint(m: &mut RunManifest, flag: &str, path: &Path) -> Result<Checkpoint> {
    m.input(flag, path)?;
    Checkpoint::load(path).map_err(flagged(flag))
}

fn load_data(m: &mut RunManifest, flag: &str, path: &Path) -> Result<LabeledBatch> {
    m.input(flag, path)?;
    read_csv(path).map_err(flagged(flag))
}

fn dataset_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

struct Output<'a> {
    dir: &'a Path,
}

impl<'a> Output<'a> {
    fn create(dir: &'a Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("--out {}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    fn text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    fn json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("reports are plain data");
        self.text(name, &(text + "\n"))
    }

    /// JSON report with the manifest embedded under `"manifest"`.
    fn report(&self, name: &str, body: Value, m: &RunManifest) -> Result<()> {
        let mut body = body;
        body["manifest"] = m.to_json();
        self.json(name, &body)
    }

    fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(self.dir.join(name)).map_err(CliError::from)
    }

    fn manifest(&self, m: &RunManifest) -> Result<()> {
        self.json("manifest.json", &m.to_json())
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut m = RunManifest::new("gen-data");
    m.seed(a.seed)
        .set("kind", &a.kind)
        .set("n", a.n)
        .set("rotation", a.rotation)
        .set("translation", &a.translation)
        .set("ood_noise", a.ood_noise)
        .set("label_noise", a.label_noise);
    let shift = ShiftParams {
        rotation: a.rotation,
        translation: a.translation.clone(),
        noise_sigma: a.ood_noise,
    };
    let (mut bundle, classes) = match a.kind.as_str() {
        "moons" => {
            m.set("noise", a.noise);
            (gen_two_moons(a.n, a.noise, &shift, a.seed)?, 2)
        }
        "blobs" => {
            m.set("k", a.k).set("dims", a.dims).set("separation", a.separation);
            (gen_blobs(a.k, a.dims, a.separation, a.n, &shift, a.seed)?, a.k)
        }
        other => return Err(CliError::usage(format!("--kind: expected moons or blobs, got `{other}`"))),
    };
    if a.label_noise > 0.0 {
        let seed = rng::derive_seed(a.seed, "label-noise");
        bundle.train_id = with_label_noise(&bundle.train_id, a.label_noise, classes, seed).map_err(flagged("label-noise"))?;
    }

    let out = Output::create(&a.out)?;
    let mut splits = serde_json::Map::new();
    for (name, batch) in [
        ("train", &bundle.train_id),
        ("test_id", &bundle.test_id),
        ("test_ood", &bundle.test_ood),
    ] {
        let text = to_csv(batch);
        out.text(&format!("{name}.csv"), &text)?;
        splits.insert(
            name.into(),
            json!({ "rows": batch.len(), "sha256": sha256_hex(text.as_bytes()) }),
        );
    }
    out.report("bundle.json", json!({ "tag": bundle.tag, "shift": bundle.shift, "splits": splits }), &m)?;
    out.manifest(&m)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut m = RunManifest::new("train");
    let data = load_data(&mut m, "data", &a.data)?;
    let (spec, init) = match (&a.init, &a.arch) {
        (Some(path), arch) => {
            let start = load_checkpoint(&mut m, "init", path)?;
            if let Some(arch) = arch {
                let wanted = ModelSpec::parse(data.dim(), arch).map_err(flagged("arch"))?;
                if wanted != start.spec {
                    return Err(CliError::usage("--arch disagrees with the --init checkpoint"));
                }
            }
            (start.spec, Init::From(start.params))
        }
        (None, Some(arch)) => {
            m.set("init_scale", a.init_scale);
            let spec = ModelSpec::parse(data.dim(), arch).map_err(flagged("arch"))?;
            (spec, Init::Random { scale: a.init_scale })
        }
        (None, None) => return Err(CliError::usage("--arch is required without --init")),
    };
    m.seed(a.seed)
        .set("arch", &spec)
        .set("lr", a.lr)
        .set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("momentum", a.momentum);
    let cfg = TrainConfig::new(a.lr, a.epochs, a.batch_size, a.seed, init).with_momentum(a.momentum);
    let model = train(&spec, &data, &cfg)?;
    let (loss, acc) = engine::evaluate(&spec, &model.params, &data)?;

    let out = Output::create(&a.out)?;
    out.checkpoint("model.wsck", &model)?;
    out.report("train.json", json!({ "final_loss": loss, "final_acc": acc }), &m)?;
    out.manifest(&m)
}

fn make_pair(a: MakePairArgs) -> Result<()> {
    let kind: RegimeKind = parse("regime", &a.regime)?;
    let mut m = RunManifest::new("make-pair");
    m.seed(a.seed).set("regime", kind);
    let pair = make_regime_pair(kind, a.seed)?;
    m.set(
        "recipe",
        weightscope::expkit::regime::Recipe::for_regime(kind),
    );

    let out = Output::create(&a.out)?;
    out.checkpoint("theta0.wsck", &pair.theta0)?;
    out.checkpoint("theta1.wsck", &pair.theta1)?;
    out.text("train.csv", &to_csv(&pair.bundle.train_id))?;
    out.text("test_id.csv", &to_csv(&pair.bundle.test_id))?;
    out.text("test_ood.csv", &to_csv(&pair.bundle.test_ood))?;
    out.report(
        "pair.json",
        json!({
            "regime": kind,
            "verdict": pair.verdict,
            "attempt_seed": pair.attempt_seed,
            "attempts": pair.attempts,
            "tag": pair.bundle.tag,
        }),
        &m,
    )?;
    out.manifest(&m)
}

struct LoadedPair {
    theta0: Checkpoint,
    theta1: Checkpoint,
    data: LabeledBatch,
    grid: AlphaGrid,
    tag: String,
}

fn load_pair(m: &mut RunManifest, p: &PairInputs) -> Result<LoadedPair> {
    let theta0 = load_checkpoint(m, "theta0", &p.theta0)?;
    let theta1 = load_checkpoint(m, "theta1", &p.theta1)?;
    check_compatible(&theta0, &theta1).map_err(flagged("theta1"))?;
    let data = load_data(m, "data", &p.data)?;
    let grid = AlphaGrid::uniform(p.alphas).map_err(flagged("alphas"))?;
    m.set("alphas", p.alphas).set("xi", p.xi);
    Ok(LoadedPair {
        theta0,
        theta1,
        data,
        grid,
        tag: dataset_tag(&p.data),
    })
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut m = RunManifest::new("sweep");
    let p = load_pair(&mut m, &a.pair)?;
    m.set("delta", a.delta);
    let spec = &p.theta0.spec;
    let curve = sweep(spec, &p.theta0.params, &p.theta1.params, &p.grid, &p.data, SweepKind::Global, &p.tag)?;
    let (loss0, acc0) = engine::evaluate(spec, &p.theta0.params, &p.data)?;
    let (loss1, acc1) = engine::evaluate(spec, &p.theta1.params, &p.data)?;
    let report = barrier(&curve, loss0, loss1, a.delta).map_err(flagged("delta"))?;
    let verdict = classify_regime(&curve, acc0, a.pair.xi).map_err(flagged("xi"))?;

    let out = Output::create(&a.out)?;
    out.text("curve.csv", &curve.to_csv())?;
    out.report(
        "report.json",
        json!({
            "dataset": p.tag,
            "loss0": loss0,
            "loss1": loss1,
            "acc0": acc0,
            "acc1": acc1,
            "barrier": report,
            "verdict": verdict,
        }),
        &m,
    )?;
    out.manifest(&m)
}

fn layerwise(a: LayerwiseArgs) -> Result<()> {
    let mut m = RunManifest::new("layerwise");
    let p = load_pair(&mut m, &a.pair)?;
    let scan = layerwise_scan(&p.theta0.spec, &p.theta0.params, &p.theta1.params, &p.grid, &p.data, a.pair.xi)
        .map_err(flagged("xi"))?;

    let out = Output::create(&a.out)?;
    for (finding, curve) in scan.report.layers.iter().zip(&scan.curves) {
        out.text(&format!("layerwise_{}.csv", finding.layer), &curve.to_csv())?;
    }
    let stragglers: Vec<&str> = scan.report.stragglers().collect();
    out.report(
        "stragglers.json",
        json!({ "dataset": p.tag, "stragglers": stragglers, "report": scan.report }),
        &m,
    )?;
    out.manifest(&m)
}

fn rows(flag: &str, m: Option<usize>, data: &LabeledBatch) -> Result<usize> {
    match m {
        Some(0) => Err(CliError::usage(format!("--{flag} must be >= 1"))),
        Some(m) => Ok(m),
        None => Ok(data.len()),
    }
}

fn sharpness(a: SharpnessArgs) -> Result<()> {
    let mut m = RunManifest::new("sharpness");
    let theta1 = load_checkpoint(&mut m, "theta1", &a.theta1)?;
    let theta0 = match &a.theta0 {
        Some(path) => {
            let c = load_checkpoint(&mut m, "theta0", path)?;
            check_compatible(&c, &theta1).map_err(flagged("theta0"))?;
            Some(c)
        }
        None => None,
    };
    let data = load_data(&mut m, "data", &a.data)?;
    let scaling: Scaling = parse("scaling", &a.scaling)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::usage(format!("--alpha: {} is outside [0, 1]", a.alpha)));
    }
    if a.alpha > 0.0 && theta0.is_none() {
        return Err(CliError::usage("--alpha above 0 needs --theta0"));
    }
    let cfg = SharpnessConfig::new(rows("m", a.m, &data)?, a.seed)
        .with_rho(a.rho)
        .with_iters(a.iters)
        .with_scaling(scaling);
    m.seed(a.seed)
        .set("rho", a.rho)
        .set("iters", a.iters)
        .set("m", cfg.m)
        .set("scaling", scaling)
        .set("scope", &a.scope)
        .set("alpha", a.alpha);

    let spec = &theta1.spec;
    let base0 = theta0.as_ref().map_or(&theta1.params, |c| &c.params);
    let estimate = match a.scope.as_str() {
        "global" => {
            let point = interpolate_global(base0, &theta1.params, a.alpha)?;
            let mut est = adaptive_avg_sharpness(spec, &point, &data, &cfg)?;
            if theta0.is_some() {
                est.interpolation_alpha = Some(a.alpha);
            }
            est
        }
        scope => match scope.strip_prefix("layer:") {
            Some(layer) if !layer.is_empty() => {
                layerwise_sharpness(spec, base0, &theta1.params, layer, a.alpha, &data, &cfg).map_err(flagged("scope"))?
            }
            _ => return Err(CliError::usage(format!("--scope: expected global or layer:NAME, got `{scope}`"))),
        },
    };

    let out = Output::create(&a.out)?;
    out.report("sharpness.json", json!({ "estimate": estimate }), &m)?;
    out.manifest(&m)
}

fn asymptotic(a: AsymptoticArgs) -> Result<()> {
    let mut m = RunManifest::new("asymptotic-check");
    let ckpt = load_checkpoint(&mut m, "checkpoint", &a.checkpoint)?;
    let data = load_data(&mut m, "data", &a.data)?;
    let scaling: Scaling = parse("scaling", &a.scaling)?;
    let step = if a.fd_absolute {
        FdStep::Absolute(a.fd_step)
    } else {
        FdStep::Relative(a.fd_step)
    };
    let cfg = SharpnessConfig::new(rows("m", a.m, &data)?, a.seed)
        .with_iters(a.iters)
        .with_scaling(scaling);
    m.seed(a.seed)
        .set("rhos", &a.rhos)
        .set("iters", a.iters)
        .set("m", cfg.m)
        .set("scaling", scaling)
        .set("fd_step", step)
        .set("fd_cap", a.fd_cap);

    let objective = ModelObjective::new(&ckpt.spec, &data).map_err(flagged("data"))?;
    let table = asymptotic_check_objective(&objective, &ckpt.params, &a.rhos, &cfg, step, a.fd_cap)?;

    let mut csv = String::from("rho,s_mc,s_mc_stderr,s_taylor,ratio\n");
    for row in &table {
        let ratio = row.ratio.map(|r| format!("{r:?}")).unwrap_or_default();
        csv.push_str(&format!(
            "{:?},{:?},{:?},{:?},{ratio}\n",
            row.rho, row.s_mc, row.s_mc_stderr, row.s_taylor
        ));
    }
    let out = Output::create(&a.out)?;
    out.text("asymptotic.csv", &csv)?;
    out.manifest(&m)
}

fn prune(a: PruneArgs) -> Result<()> {
    let mut m = RunManifest::new("prune");
    let p = load_pair(&mut m, &a.pair)?;
    let cfg = PruneConfig {
        p: a.p,
        rho: a.rho,
        near_zero: NearZeroRule {
            tau_abs: a.tau_abs,
            tau_rel: a.tau_rel,
        },
        screen_iters: a.screen_iters,
        seed: a.seed,
        sharpness_iters: a.sharpness_iters,
        m: a.m,
    };
    m.seed(a.seed).set("prune", &cfg);
    let spec = &p.theta0.spec;
    let outcome = straggler_prune(&p.theta0.params, &p.theta1.params, spec, &p.data, &p.grid, &p.tag, &cfg)?;
    let (_, acc0) = engine::evaluate(spec, &p.theta0.params, &p.data)?;
    let (before, after) = compare_outcomes(&outcome, acc0, a.pair.xi)?;
    let pruned = Checkpoint::new(spec.clone(), outcome.pruned_theta1.clone())?.with_meta("role", "theta1_pruned");

    let out = Output::create(&a.out)?;
    out.text("curve_before.csv", &outcome.curve_before.to_csv())?;
    out.text("curve_after.csv", &outcome.curve_after.to_csv())?;
    out.checkpoint("pruned_theta1.wsck", &pruned)?;
    out.report(
        "masks.json",
        json!({
            "flagged_layers": outcome.flagged_layers,
            "zeroed_fraction": outcome.zeroed_fractions(),
            "masks": outcome.masks,
            "screens": outcome.screens,
            "verdict_before": before,
            "verdict_after": after,
        }),
        &m,
    )?;
    out.manifest(&m)
}

fn report(a: ReportArgs) -> Result<()> {
    if !a.label.is_empty() && a.label.len() != a.curve.len() {
        return Err(CliError::usage("--label must be given once per --curve or not at all"));
    }
    let mut m = RunManifest::new("report");
    m.set("title", &a.title).set("xi", a.xi).set("delta", a.delta);
    let mut curves: Vec<(String, SweepCurve)> = Vec::new();
    for (k, path) in a.curve.iter().enumerate() {
        let flag = format!("curve[{k}]");
        m.input(&flag, path)?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("--curve {}: {e}", path.display())))?;
        let label = a.label.get(k).cloned().unwrap_or_else(|| dataset_tag(path));
        let curve = SweepCurve::from_csv(&text, SweepKind::Global, &label)
            .map_err(|e| CliError::data(format!("--curve {}: {e}", path.display())))?;
        curves.push((label, curve));
    }
    let mut series = Vec::new();
    for (label, curve) in &curves {
        let (loss0, acc0) = curve.theta0_end();
        let (loss1, _) = curve.theta1_end();
        series.push(Series {
            label: label.clone(),
            curve,
            barrier: barrier(curve, loss0, loss1, a.delta).map_err(flagged("delta"))?,
            verdict: classify_regime(curve, acc0, a.xi).map_err(flagged("xi"))?,
        });
    }
    let manifest = serde_json::to_string(&m.to_json()).expect("manifest is plain data");
    let out = Output::create(&a.out)?;
    out.text("report.svg", &svg::render(&a.title, &series, &manifest))?;
    out.manifest(&m)
}
