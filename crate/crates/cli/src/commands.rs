use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde_json::json;

use cpak_core::attack::{tp_targeted, tp_untargeted, AttackConfig, AttackMode, PerturbedTokens};
use cpak_core::cav::{load_cav_set, save_cav_set, ProbeConfig};
use cpak_core::ffv::{channel_fv, faceted_fv, VisualizationConfig};
use cpak_core::freval::{embed, fit_gaussian, frechet_distance, EncoderModel, DEFAULT_EMBEDDING_LAYER};
use cpak_core::harness::{self, ExperimentConfig, RunOptions, Scale, PRESETS};
use cpak_core::model::{train, Architecture, TrainConfig, TrainedModel};
use cpak_core::synthdata::{
    default_classes, generate_dataset, make_concept_sets, ppm, random_concept_sets, ConceptCounts, ConceptSets, Dataset,
    TextureKind,
};
use cpak_core::tcav::{fit_cavs, significance};
use cpak_core::tensor::Tensor;

use crate::{ArchArg, Cli, Command, ScaleArg};

pub enum Failure {
    /// Bad flags or flag combinations; nothing was written.
    Usage(String),
    Domain(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome = Result<bool, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Runs one subcommand; `Ok(false)` means it completed but a check failed.
pub fn dispatch(cli: &Cli) -> Outcome {
    let v = cli.verbose;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainModel(a) => train_model(a, v),
        Command::MakeConcepts(a) => make_concepts(a),
        Command::TrainCav(a) => train_cav(a),
        Command::TcavScore(a) => tcav_score(a),
        Command::Attack(a) => attack(a),
        Command::Ffv(a) => ffv(a),
        Command::Fid(a) => fid(a),
        Command::Run(a) => run(a, v),
        Command::Replay(a) => replay(a),
        Command::Selftest(a) => Ok(crate::selftest::run(a.out.as_deref(), v)?),
    }
}

/// Writes a line to stdout; a reader that has gone away is not an error.
fn say(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn emit(value: serde_json::Value) {
    say(&serde_json::to_string_pretty(&value).expect("json"));
}

fn check_size(size: usize) -> Result<(), Failure> {
    if !(8..=256).contains(&size) || !size.is_multiple_of(4) {
        return Err(usage(format!("--size must be a multiple of 4 in 8..=256, got {size}")));
    }
    Ok(())
}

fn counts(scale: ScaleArg) -> ConceptCounts {
    match scale {
        ScaleArg::Desk => ConceptCounts::DESK,
        ScaleArg::Paper => ConceptCounts::PAPER,
    }
}

fn gen_data(a: &crate::GenData) -> Outcome {
    check_size(a.size)?;
    if a.per_class == 0 {
        return Err(usage("--per-class must be positive"));
    }
    let ds = generate_dataset(&default_classes(), a.per_class, (a.size, a.size), a.seed)?;
    ds.save(&a.out)?;
    emit(json!({ "images": ds.len(), "classes": ds.classes.len(), "out": a.out }));
    Ok(true)
}

fn train_model(a: &crate::TrainModel, verbose: bool) -> Outcome {
    check_size(a.size)?;
    if a.epochs == Some(0) {
        return Err(usage("--epochs must be positive"));
    }
    let ds = match &a.data {
        Some(dir) => Dataset::load(dir)?,
        None => generate_dataset(&default_classes(), a.per_class, (a.size, a.size), a.seed)?,
    };
    let arch = match a.arch {
        ArchArg::A => Architecture::SmallConvNetA,
        ArchArg::B => Architecture::SmallConvNetB,
    };
    let spec = arch.spec(&[3, ds.size.0, ds.size.1], ds.classes.len());
    let mut model = TrainedModel::build(spec, a.seed)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        seed: a.seed,
        epochs: a.epochs.unwrap_or(defaults.epochs),
        ..defaults
    };
    if verbose {
        eprintln!("training on {} images for {} epochs", ds.len(), cfg.epochs);
    }
    let report = train(&mut model, &ds.images, &ds.labels, &cfg)?;
    fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("model.cpak"))?;
    fs::write(a.out.join("train.json"), serde_json::to_vec_pretty(&report)?)?;
    emit(json!({ "model": a.out.join("model.cpak"), "accuracy": report.final_accuracy() }));
    Ok(true)
}

fn parse_concept(name: &str) -> Result<TextureKind, Failure> {
    name.parse::<TextureKind>().map_err(|e| usage(e.to_string()))
}

fn make_concepts(a: &crate::MakeConcepts) -> Outcome {
    check_size(a.size)?;
    let kind = parse_concept(&a.concept)?;
    let sets = make_concept_sets(kind, counts(a.scale), &default_classes(), (a.size, a.size), a.seed)?;
    sets.save(&a.out)?;
    emit(json!({
        "concept": kind.name(),
        "positives": sets.positives.len(),
        "negative_sets": sets.negatives.len(),
        "unrelated": sets.unrelated.len(),
    }));
    Ok(true)
}

fn positives(sets: &ConceptSets, tokens: Option<&Path>) -> anyhow::Result<Vec<Tensor>> {
    Ok(match tokens {
        Some(dir) => PerturbedTokens::load(dir)?.images,
        None => sets.positives.clone(),
    })
}

fn probe(seed: u64) -> ProbeConfig {
    ProbeConfig {
        seed,
        ..Default::default()
    }
}

fn train_cav(a: &crate::TrainCav) -> Outcome {
    let model = TrainedModel::load(&a.model)?;
    model.layer_index(&a.layer).map_err(|e| usage(e.to_string()))?;
    let sets = ConceptSets::load(&a.concepts)?;
    let split = model.split(&a.layer)?;
    let pos = split.features(&positives(&sets, a.tokens.as_deref())?)?;
    let neg = sets.negatives.iter().map(|n| split.features(n)).collect::<Result<Vec<_>, _>>()?;
    let cavs = fit_cavs(sets.concept.name(), &a.layer, &pos, &neg, &probe(a.seed))?;
    fs::create_dir_all(&a.out)?;
    save_cav_set(&cavs, &a.out.join("cavs.cpak"))?;
    let acc: Vec<f64> = cavs.iter().map(|c| c.accuracy).collect();
    emit(json!({ "cavs": cavs.len(), "accuracy": acc, "out": a.out.join("cavs.cpak") }));
    Ok(true)
}

fn tcav_score(a: &crate::TcavScore) -> Outcome {
    let model = TrainedModel::load(&a.model)?;
    model.layer_index(&a.layer).map_err(|e| usage(e.to_string()))?;
    let ds = Dataset::load(&a.data)?;
    let class = ds.class_by_name(&a.class).map_err(|e| usage(e.to_string()))?.clone();
    let sets = ConceptSets::load(&a.concepts)?;
    let pos = positives(&sets, a.tokens.as_deref())?;
    let random = random_concept_sets(
        sets.concept,
        &ds.classes,
        sets.negatives.len(),
        sets.positives.len(),
        ds.size,
        a.seed,
    )?;
    let inputs: Vec<Tensor> = ds
        .images
        .iter()
        .zip(&ds.labels)
        .filter(|(_, &l)| l == class.id)
        .map(|(x, _)| x.clone())
        .collect();
    let run = significance(
        &model,
        &a.layer,
        sets.concept.name(),
        &pos,
        &sets.negatives,
        &random,
        &inputs,
        class.id,
        &probe(a.seed),
    )?;
    fs::create_dir_all(&a.out)?;
    save_cav_set(&run.cavs, &a.out.join("cavs.cpak"))?;
    save_cav_set(&run.random_cavs, &a.out.join("random.cpak"))?;
    fs::write(a.out.join("tcav.json"), serde_json::to_vec_pretty(&run.result)?)?;
    emit(serde_json::to_value(&run.result)?);
    Ok(true)
}

fn attack(a: &crate::AttackCmd) -> Outcome {
    let cfg = AttackConfig {
        epsilon: a.epsilon,
        steps: a.steps,
        alpha: a.alpha.unwrap_or(a.epsilon / 4.0),
        layer: a.layer.clone(),
        mode: if a.target.is_some() {
            AttackMode::Targeted
        } else {
            AttackMode::Untargeted
        },
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model = TrainedModel::load(&a.model)?;
    model.layer_index(&a.layer).map_err(|e| usage(e.to_string()))?;
    let sets = ConceptSets::load(&a.concepts)?;
    let tokens = match &a.target {
        Some(dir) => tp_targeted(&model, &sets.positives, &ConceptSets::load(dir)?.positives, &cfg)?,
        None => tp_untargeted(&model, &sets.positives, &sets.unrelated, &cfg)?,
    };
    tokens.save(&a.out)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    emit(json!({
        "tokens": tokens.images.len(),
        "max_linf": tokens.linf.iter().cloned().fold(0.0, f64::max),
        "mean_initial": mean(&tokens.initial),
        "mean_final": mean(&tokens.final_),
    }));
    Ok(true)
}

fn ffv(a: &crate::Ffv) -> Outcome {
    let defaults = VisualizationConfig::default();
    let cfg = VisualizationConfig {
        steps: a.steps,
        seed: a.seed,
        facet_weight: a.facet_weight.unwrap_or(defaults.facet_weight),
        ..defaults
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model = TrainedModel::load(&a.model)?;
    model.layer_index(&a.layer).map_err(|e| usage(e.to_string()))?;
    let vis = match &a.cav {
        Some(path) => {
            let cavs = load_cav_set(path)?;
            let cav = cavs.first().context("empty CAV set")?;
            faceted_fv(&model, &a.layer, a.channel, cav, &cfg)?
        }
        None => channel_fv(&model, &a.layer, a.channel, &cfg)?,
    };
    vis.save(&a.out, "ffv")?;
    emit(json!({ "image": a.out.join("ffv.ppm"), "best_objective": vis.best_objective, "best_step": vis.best_step }));
    Ok(true)
}

fn read_images(dir: &Path) -> anyhow::Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    anyhow::ensure!(!paths.is_empty(), "no .ppm images in {}", dir.display());
    paths.iter().map(|p| Ok(ppm::read(p)?)).collect()
}

fn fid(a: &crate::Fid) -> Outcome {
    let encoder = EncoderModel::new(TrainedModel::load(&a.encoder)?, DEFAULT_EMBEDDING_LAYER)?;
    let sa = fit_gaussian(&embed(&encoder, &read_images(&a.a)?)?)?;
    let sb = fit_gaussian(&embed(&encoder, &read_images(&a.b)?)?)?;
    let d = frechet_distance(&sa, &sb)?;
    let out = json!({ "fid": d, "a": a.a, "b": a.b, "n_a": sa.n, "n_b": sb.n });
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("fid.json"), serde_json::to_vec_pretty(&out)?)?;
    emit(out);
    Ok(true)
}

fn run(a: &crate::Run, verbose: bool) -> Outcome {
    if a.list_presets {
        for p in PRESETS {
            say(p);
        }
        return Ok(true);
    }
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(|e| usage(e.to_string()))?,
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epsilon {
        cfg.attack.epsilon = e;
        cfg.attack.alpha = e / 4.0;
    }
    if let Some(s) = a.steps {
        cfg.attack.steps = s;
    }
    if let Some(l) = &a.layer {
        cfg.attack.layer = l.clone();
    }
    if let Some(s) = a.scale {
        cfg.scale = match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        };
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| usage("--out is required unless the config sets output_dir"))?;
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    let opts = RunOptions {
        out,
        cache: a.cache.clone(),
        verbose,
    };
    let result = harness::run(&cfg, &opts)?;
    for c in &result.claims {
        let configured = cfg.claims.contains(&c.id);
        eprintln!(
            "{} {}{}: {}",
            if c.passed { "pass" } else { "FAIL" },
            c.id,
            if configured { "" } else { " (informational)" },
            c.detail
        );
    }
    Ok(result.configured_claims_pass())
}

fn replay(a: &crate::Replay) -> Outcome {
    let dir = if a.results.is_file() {
        a.results.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        a.results.clone()
    };
    let report = harness::replay(&dir)?;
    for m in &report.mismatches {
        eprintln!("mismatch: {m}");
    }
    emit(serde_json::to_value(&report)?);
    Ok(report.ok())
}
