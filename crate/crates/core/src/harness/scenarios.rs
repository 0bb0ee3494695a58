use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::{ExperimentConfig, PairConfig, Scenario};
use super::tables::{FidTable, ScoreKind, ScoreRecord};
use super::{stage, AttackSummary, DreamReport, ExperimentResult, FidSet, Workspace};
use crate::attack::{gaussian_baseline, match_sigma, random_sign_baseline, tp_targeted, tp_untargeted, AttackConfig, PerturbedTokens};
use crate::cav::{fit_probe, save_cav_set, train_cav, Cav};
use crate::error::{Error, Result};
use crate::ffv::{cav_dream, channel_fv, faceted_fv, signature, Visualization, VisualizationConfig};
use crate::freval::{embed, fit_gaussian, frechet_distance, EncoderModel, DEFAULT_EMBEDDING_LAYER};
use crate::model::TrainedModel;
use crate::rng;
use crate::stats;
use crate::synthdata::{
    default_classes, generate_dataset, make_concept_sets, ppm, random_concept_sets, render_token, ConceptSets, Dataset,
    SyntheticClassSpec, TextureKind,
};
use crate::tcav::{check_disjoint, fit_cavs, fit_random_cavs, summarize, ClassGradients};
use crate::tensor::Tensor;

pub(super) const BASELINE: &str = "baseline";
pub(super) const GAUSSIAN: &str = "gaussian";
pub(super) const NOISE: &str = "noise";

pub(super) fn tp_tag(layer: &str) -> String {
    format!("tp-{layer}")
}

pub(super) fn self_tag(layer: &str) -> String {
    format!("self-{layer}")
}

/// Directory of the evaluation dataset.
pub(super) const EVAL_DIR: &str = "data/eval";

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    ws: &'a Workspace,
    verbose: bool,
    seeds: BTreeMap<String, u64>,
    classes: Vec<SyntheticClassSpec>,
}

impl Ctx<'_> {
    fn seed(&mut self, label: &str) -> u64 {
        let s = rng::derive_str(self.cfg.seed, label);
        self.seeds.insert(label.to_string(), s);
        s
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{}] {}", self.cfg.scenario.name(), msg.as_ref());
        }
    }

    fn size(&self) -> (usize, usize) {
        self.cfg.image_size()
    }

    fn class(&self, name: &str) -> Result<SyntheticClassSpec> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unknown class `{name}`")))
    }
}

/// A named set of (possibly perturbed) positive tokens.
struct Row {
    tag: String,
    tokens: PerturbedTokens,
    dir: String,
}

pub(super) fn execute(cfg: &ExperimentConfig, ws: &Workspace, verbose: bool) -> Result<ExperimentResult> {
    let mut ctx = Ctx {
        cfg,
        ws,
        verbose,
        seeds: BTreeMap::new(),
        classes: default_classes(),
    };
    let mut res = ExperimentResult {
        scenario: cfg.scenario,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seeds: BTreeMap::new(),
        scores: Vec::new(),
        attacks: Vec::new(),
        fid: None,
        fid_sets: Vec::new(),
        dream: None,
        claims: Vec::new(),
        artifacts: Vec::new(),
    };
    match cfg.scenario {
        Scenario::UntargetedTcav | Scenario::TargetedTcav | Scenario::Transfer => tcav_tables(&mut ctx, &mut res)?,
        Scenario::RelativeTcav => relative_tables(&mut ctx, &mut res)?,
        Scenario::FfvFid => ffv_fid(&mut ctx, &mut res)?,
    }
    res.seeds = ctx.seeds;
    Ok(res)
}

fn eval_data(ctx: &Ctx) -> Result<Dataset> {
    stage("eval-data", || {
        let ds = generate_dataset(&ctx.classes, ctx.cfg.data.eval_per_class, ctx.size(), ctx.cfg.data.eval_seed)?;
        ds.save(&ctx.ws.path(EVAL_DIR))?;
        Ok(ds)
    })
}

pub(super) fn class_inputs(ds: &Dataset, class: usize) -> Vec<Tensor> {
    ds.images
        .iter()
        .zip(&ds.labels)
        .filter(|(_, &l)| l == class)
        .map(|(x, _)| x.clone())
        .collect()
}

fn concept_sets(ctx: &mut Ctx, concept: TextureKind, label: &str) -> Result<ConceptSets> {
    let seed = ctx.seed(&format!("concepts/{label}"));
    let counts = ctx.cfg.counts();
    stage(&format!("concept-sets {label}"), || {
        let sets = make_concept_sets(concept, counts, &ctx.classes, ctx.size(), seed)?;
        sets.save(&ctx.ws.path(&format!("concepts/{label}")))?;
        Ok(sets)
    })
}

fn write_images(ws: &Workspace, dir: &str, images: &[Tensor]) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        ppm::write(&ws.path(&format!("{dir}/{i:05}.ppm")), img)?;
    }
    Ok(())
}

fn random_sets(ctx: &mut Ctx, concept: TextureKind, label: &str) -> Result<Vec<Vec<Tensor>>> {
    let seed = ctx.seed(&format!("random/{label}"));
    let counts = ctx.cfg.counts();
    stage(&format!("random-sets {label}"), || {
        let sets = random_concept_sets(concept, &ctx.classes, counts.negative_sets, counts.positives, ctx.size(), seed)?;
        for (i, s) in sets.iter().enumerate() {
            write_images(ctx.ws, &format!("concepts/{label}/random/{i}"), s)?;
        }
        Ok(sets)
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| stats::mean(xs))
}

fn persist_row(ctx: &Ctx, res: &mut ExperimentResult, pair: &str, tag: &str, tokens: PerturbedTokens) -> Result<Row> {
    let dir = format!("tokens/{pair}/{tag}");
    tokens.save(&ctx.ws.path(&dir))?;
    res.attacks.push(AttackSummary {
        pair: pair.to_string(),
        tag: tag.to_string(),
        tokens: dir.clone(),
        mean_linf: stats::mean(&tokens.linf),
        mean_initial: mean(&tokens.initial),
        mean_final: mean(&tokens.final_),
    });
    ctx.log(format!(
        "{pair} {tag}: mean linf {:.4}{}",
        stats::mean(&tokens.linf),
        match (mean(&tokens.initial), mean(&tokens.final_)) {
            (Some(a), Some(b)) => format!(", centroid distance {a:.3} -> {b:.3}"),
            _ => String::new(),
        }
    ));
    Ok(Row {
        tag: tag.to_string(),
        tokens,
        dir,
    })
}

fn attack_cfg(ctx: &mut Ctx, pair: &str, layer: &str, tag: &str) -> AttackConfig {
    AttackConfig {
        layer: layer.to_string(),
        seed: ctx.seed(&format!("attack/{pair}/{tag}")),
        ..ctx.cfg.attack.clone()
    }
}

fn gaussian_row(ctx: &mut Ctx, res: &mut ExperimentResult, pair: &str, positives: &[Tensor]) -> Result<Row> {
    let seed = ctx.seed(&format!("gaussian/{pair}"));
    let eps = ctx.cfg.attack.epsilon as f64;
    let tokens = stage("gaussian-baseline", || {
        let sigma = match_sigma(positives, eps, seed)?;
        gaussian_baseline(positives, sigma, seed)
    })?;
    persist_row(ctx, res, pair, GAUSSIAN, tokens)
}

/// Scores every row at every evaluation layer of `model`.
#[allow(clippy::too_many_arguments)]
fn score_rows(
    ctx: &Ctx,
    res: &mut ExperimentResult,
    model: &TrainedModel,
    role: &str,
    pair: &PairConfig,
    class: &SyntheticClassSpec,
    inputs: &[Tensor],
    sets: &ConceptSets,
    random: &[Vec<Tensor>],
    rows: &[Row],
) -> Result<()> {
    let concept = pair.concept.name();
    let tag = pair.tag();
    for layer in &ctx.cfg.eval_layers {
        stage(&format!("tcav {tag} {role} {layer}"), || {
            let split = model.split(layer)?;
            let grads = ClassGradients::compute(model, layer, inputs, class.id)?;
            let neg = sets.negatives.iter().map(|n| split.features(n)).collect::<Result<Vec<_>>>()?;
            let rnd = random.iter().map(|r| split.features(r)).collect::<Result<Vec<_>>>()?;
            let random_cavs = fit_random_cavs(layer, &neg, &rnd, &ctx.cfg.probe)?;
            let base = format!("cavs/{tag}/{role}/{layer}");
            let random_rel = format!("{base}/random.cpak");
            save_cav_set(&random_cavs, &ctx.ws.prepare(&random_rel)?)?;
            let mut baseline: Option<Vec<f64>> = None;
            for row in rows {
                let pos = split.features(&row.tokens.images)?;
                let cavs = fit_cavs(concept, layer, &pos, &neg, &ctx.cfg.probe)?;
                let rel = format!("{base}/{}.cpak", row.tag);
                save_cav_set(&cavs, &ctx.ws.prepare(&rel)?)?;
                let r = summarize(concept, &grads, &cavs, &random_cavs)?;
                let mut rec =
                    ScoreRecord::from_tcav(&r, &class.name, &row.tag, role, rel, random_rel.clone(), row.dir.clone());
                attach_baseline(&mut rec, &mut baseline)?;
                ctx.log(format!(
                    "{tag} {role} {layer} {:<12} score {:+.4} [{:+.4}, {:+.4}] random {:+.4} p {:.2e}",
                    row.tag, rec.score, rec.ci_lo, rec.ci_hi, rec.random_mean, rec.p
                ));
                res.scores.push(rec);
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Records the baseline's per-set scores, or tests a row against them.
pub(super) fn attach_baseline(rec: &mut ScoreRecord, baseline: &mut Option<Vec<f64>>) -> Result<()> {
    if rec.attack_tag == BASELINE {
        *baseline = Some(rec.per_set.clone());
    } else if let Some(b) = baseline {
        let t = stats::welch_t_test(&rec.per_set, b)?;
        rec.vs_baseline_t = Some(t.t);
        rec.vs_baseline_p = Some(t.p);
    }
    Ok(())
}

fn tcav_tables(ctx: &mut Ctx, res: &mut ExperimentResult) -> Result<()> {
    let cfg = ctx.cfg;
    ctx.log("provisioning models");
    let subject = stage("subject-model", || ctx.ws.provide_model("subject", &cfg.subject, &cfg.data))?;
    let transfer = match (&cfg.scenario, &cfg.transfer_subject) {
        (Scenario::Transfer, Some(src)) => Some(stage("transfer-model", || {
            ctx.ws.provide_model("transfer", src, &cfg.data)
        })?),
        _ => None,
    };
    let eval = eval_data(ctx)?;
    for pair in &cfg.pairs {
        let tag = pair.tag();
        let class = ctx.class(&pair.class)?;
        ctx.log(format!("pair {tag}"));
        let sets = concept_sets(ctx, pair.concept, pair.concept.name())?;
        let random = random_sets(ctx, pair.concept, pair.concept.name())?;
        let mut rows = vec![persist_row(ctx, res, &tag, BASELINE, PerturbedTokens::identity(&sets.positives))?];
        match cfg.scenario {
            Scenario::UntargetedTcav => {
                rows.push(gaussian_row(ctx, res, &tag, &sets.positives)?);
                for layer in cfg.all_attack_layers() {
                    let t = tp_tag(&layer);
                    let acfg = attack_cfg(ctx, &tag, &layer, &t);
                    let tokens = stage(&format!("attack {tag} {t}"), || {
                        tp_untargeted(&subject, &sets.positives, &sets.unrelated, &acfg)
                    })?;
                    rows.push(persist_row(ctx, res, &tag, &t, tokens)?);
                }
            }
            Scenario::TargetedTcav => {
                let target = pair.target_concept.expect("validated");
                let target_sets = concept_sets(ctx, target, target.name())?;
                check_disjoint(&sets.positives, &target_sets.positives)?;
                rows.push(gaussian_row(ctx, res, &tag, &sets.positives)?);
                for layer in cfg.all_attack_layers() {
                    let t = tp_tag(&layer);
                    let acfg = attack_cfg(ctx, &tag, &layer, &t);
                    let tokens = stage(&format!("attack {tag} {t}"), || {
                        tp_targeted(&subject, &sets.positives, &target_sets.positives, &acfg)
                    })?;
                    rows.push(persist_row(ctx, res, &tag, &t, tokens)?);
                    let s = self_tag(&layer);
                    let acfg = attack_cfg(ctx, &tag, &layer, &s);
                    let tokens = stage(&format!("attack {tag} {s}"), || {
                        tp_targeted(&subject, &sets.positives, &sets.positives, &acfg)
                    })?;
                    rows.push(persist_row(ctx, res, &tag, &s, tokens)?);
                }
            }
            Scenario::Transfer => {
                let seed = ctx.seed(&format!("noise/{tag}"));
                let noise = random_sign_baseline(&sets.positives, cfg.attack.epsilon, seed);
                rows.push(persist_row(ctx, res, &tag, NOISE, noise)?);
                for layer in cfg.all_attack_layers() {
                    let t = tp_tag(&layer);
                    let acfg = attack_cfg(ctx, &tag, &layer, &t);
                    let tokens = stage(&format!("attack {tag} {t}"), || {
                        tp_untargeted(&subject, &sets.positives, &sets.unrelated, &acfg)
                    })?;
                    rows.push(persist_row(ctx, res, &tag, &t, tokens)?);
                }
            }
            _ => unreachable!("magnitude scenarios only"),
        }
        let (model, role) = match &transfer {
            Some(m) => (m, "transfer"),
            None => (&subject, "subject"),
        };
        let inputs = class_inputs(&eval, class.id);
        score_rows(ctx, res, model, role, pair, &class, &inputs, &sets, &random, &rows)?;
    }
    Ok(())
}

/// Mean, 95% CI and one-sample test against zero of relative scores.
pub(super) fn relative_summary(per_set: &[f64]) -> Result<(f64, f64, f64, stats::TTest)> {
    let (lo, hi) = stats::mean_ci(per_set, 0.95)?;
    Ok((stats::mean(per_set), lo, hi, stats::one_sample_t_test(per_set, 0.0)?))
}

pub(super) fn relative_label(concept: &str, other: &str) -> String {
    format!("{concept}-vs-{other}")
}

fn relative_tables(ctx: &mut Ctx, res: &mut ExperimentResult) -> Result<()> {
    let cfg = ctx.cfg;
    let subject = stage("subject-model", || ctx.ws.provide_model("subject", &cfg.subject, &cfg.data))?;
    let eval = eval_data(ctx)?;
    let counts = cfg.counts();
    for pair in &cfg.pairs {
        let tag = pair.tag();
        let class = ctx.class(&pair.class)?;
        let sets = concept_sets(ctx, pair.concept, pair.concept.name())?;
        let mut rows = vec![persist_row(ctx, res, &tag, BASELINE, PerturbedTokens::identity(&sets.positives))?];
        for layer in cfg.all_attack_layers() {
            let t = tp_tag(&layer);
            let acfg = attack_cfg(ctx, &tag, &layer, &t);
            let tokens = stage(&format!("attack {tag} {t}"), || {
                tp_untargeted(&subject, &sets.positives, &sets.unrelated, &acfg)
            })?;
            rows.push(persist_row(ctx, res, &tag, &t, tokens)?);
        }
        let inputs = class_inputs(&eval, class.id);
        for &other in &pair.comparisons {
            let label = relative_label(pair.concept.name(), other.name());
            let seed = ctx.seed(&format!("comparison/{label}"));
            let flat = stage(&format!("comparison-sets {label}"), || {
                let flat = (0..(counts.negative_sets * counts.per_negative_set) as u64)
                    .into_par_iter()
                    .map(|i| render_token(other, ctx.size(), rng::derive(seed, i)))
                    .collect::<Result<Vec<_>>>()?;
                check_disjoint(&sets.positives, &flat)?;
                Ok(flat)
            })?;
            let comparison: Vec<Vec<Tensor>> = flat.chunks(counts.per_negative_set).map(<[Tensor]>::to_vec).collect();
            for (i, s) in comparison.iter().enumerate() {
                write_images(ctx.ws, &format!("concepts/{}/relative-{}/{i}", pair.concept.name(), other.name()), s)?;
            }
            for layer in &cfg.eval_layers {
                stage(&format!("relative {label} {layer}"), || {
                    let split = subject.split(layer)?;
                    let grads = ClassGradients::compute(&subject, layer, &inputs, class.id)?;
                    let others = comparison.iter().map(|s| split.features(s)).collect::<Result<Vec<_>>>()?;
                    let mut baseline = None;
                    for row in &rows {
                        let pos = split.features(&row.tokens.images)?;
                        let cavs = others
                            .par_iter()
                            .enumerate()
                            .map(|(i, o)| {
                                let mut c = fit_probe(pair.concept.name(), layer, &pos, o, &cfg.probe)?;
                                c.negative_index = Some(i);
                                Ok(c)
                            })
                            .collect::<Result<Vec<Cav>>>()?;
                        let rel = format!("cavs/{tag}/subject/{layer}/{}-vs-{}.cpak", row.tag, other.name());
                        save_cav_set(&cavs, &ctx.ws.prepare(&rel)?)?;
                        let per_set = cavs.iter().map(|c| grads.score(c)).collect::<Result<Vec<_>>>()?;
                        let (score, ci_lo, ci_hi, test) = relative_summary(&per_set)?;
                        let mut rec = ScoreRecord {
                            concept: label.clone(),
                            class: class.name.clone(),
                            class_id: class.id,
                            layer: layer.clone(),
                            attack_tag: row.tag.clone(),
                            model: "subject".into(),
                            kind: ScoreKind::Relative,
                            score,
                            ci_lo,
                            ci_hi,
                            t: test.t,
                            df: test.df,
                            p: test.p,
                            random_mean: 0.0,
                            per_set,
                            random_scores: Vec::new(),
                            vs_baseline_t: None,
                            vs_baseline_p: None,
                            n_inputs: grads.len(),
                            n_filtered: grads.n_filtered,
                            mean_probe_accuracy: stats::mean(&cavs.iter().map(|c| c.accuracy).collect::<Vec<_>>()),
                            probe_warnings: cavs.iter().filter(|c| c.warning).count(),
                            cavs: rel,
                            random_cavs: None,
                            tokens: row.dir.clone(),
                        };
                        attach_baseline(&mut rec, &mut baseline)?;
                        ctx.log(format!(
                            "{label} {layer} {:<12} relative {:+.4} [{:+.4}, {:+.4}] p {:.2e}",
                            row.tag, rec.score, rec.ci_lo, rec.ci_hi, rec.p
                        ));
                        res.scores.push(rec);
                    }
                    Ok(())
                })?;
            }
        }
    }
    Ok(())
}

/// FID conditions in table order.
pub const FID_CONDITIONS: [&str; 5] = ["FV", "FFV1", "FFV2", "Gaussian", "TP"];

fn flatten(sets: &[Vec<Tensor>]) -> Vec<Tensor> {
    sets.iter().flatten().cloned().collect()
}

fn ffv_fid(ctx: &mut Ctx, res: &mut ExperimentResult) -> Result<()> {
    let cfg = ctx.cfg;
    let subject = stage("subject-model", || ctx.ws.provide_model("subject", &cfg.subject, &cfg.data))?;
    let encoder_src = cfg.encoder.as_ref().expect("validated");
    let encoder = stage("encoder-model", || {
        EncoderModel::new(ctx.ws.provide_model("encoder", encoder_src, &cfg.data)?, DEFAULT_EMBEDDING_LAYER)
    })?;
    let pair = &cfg.pairs[0];
    let concept = pair.concept;
    let tag = pair.tag();
    let first = concept_sets(ctx, concept, &format!("{}-1", concept.name()))?;
    let second = concept_sets(ctx, concept, &format!("{}-2", concept.name()))?;
    let clean = persist_row(ctx, res, &tag, BASELINE, PerturbedTokens::identity(&first.positives))?;
    let gauss = gaussian_row(ctx, res, &tag, &first.positives)?;
    let t = tp_tag(&cfg.attack.layer);
    let acfg = attack_cfg(ctx, &tag, &cfg.attack.layer, &t);
    let tp = persist_row(
        ctx,
        res,
        &tag,
        &t,
        stage("attack", || tp_untargeted(&subject, &first.positives, &first.unrelated, &acfg))?,
    )?;
    let (neg1, neg2) = (flatten(&first.negatives), flatten(&second.negatives));

    // one CAV per condition and visualized layer
    let mut cavs: BTreeMap<(String, String), Cav> = BTreeMap::new();
    for layer in &cfg.eval_layers {
        let sources: [(&str, &[Tensor], &[Tensor]); 4] = [
            ("FFV1", &clean.tokens.images, &neg1),
            ("FFV2", &second.positives, &neg2),
            ("Gaussian", &gauss.tokens.images, &neg1),
            ("TP", &tp.tokens.images, &neg1),
        ];
        for (cond, pos, neg) in sources {
            let cav = stage(&format!("cav {cond} {layer}"), || {
                train_cav(&subject, layer, concept.name(), pos, neg, &cfg.probe)
            })?;
            save_cav_set(std::slice::from_ref(&cav), &ctx.ws.prepare(&format!("cavs/ffv/{cond}/{layer}.cpak"))?)?;
            cavs.insert((cond.to_string(), layer.clone()), cav);
        }
    }

    let vis_seed = ctx.seed("ffv/visualization");
    let mut jobs = Vec::new();
    for (li, layer) in cfg.eval_layers.iter().enumerate() {
        let channels = subject.layer_shape(layer)?[0];
        let n = cfg.ffv.max_channels.map_or(channels, |m| m.min(channels));
        jobs.extend((0..n).map(|ch| (li, layer.clone(), ch)));
    }
    ctx.log(format!("{} channels x {} conditions", jobs.len(), FID_CONDITIONS.len()));
    let rendered = stage("visualizations", || {
        jobs.par_iter()
            .map(|(li, layer, ch)| {
                let vcfg = VisualizationConfig {
                    seed: rng::derive(vis_seed, (*li as u64) << 32 | *ch as u64),
                    ..cfg.ffv.visualization.clone()
                };
                FID_CONDITIONS
                    .iter()
                    .map(|&cond| match cond {
                        "FV" => channel_fv(&subject, layer, *ch, &vcfg),
                        _ => faceted_fv(&subject, layer, *ch, &cavs[&(cond.to_string(), layer.clone())], &vcfg),
                    })
                    .collect::<Result<Vec<Visualization>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut sets: Vec<FidSet> = FID_CONDITIONS
        .iter()
        .map(|c| FidSet {
            condition: c.to_string(),
            images: Vec::new(),
        })
        .collect();
    for ((_, layer, ch), vis) in jobs.iter().zip(&rendered) {
        for (k, v) in vis.iter().enumerate() {
            let dir = format!("vis/{}", FID_CONDITIONS[k]);
            let stem = format!("{layer}_{ch:03}");
            v.save(&ctx.ws.path(&dir), &stem)?;
            sets[k].images.push(format!("{dir}/{stem}.ppm"));
        }
    }
    let images: Vec<Vec<Tensor>> = (0..FID_CONDITIONS.len())
        .map(|k| rendered.iter().map(|v| ppm::quantize(&v[k].image)).collect())
        .collect();
    res.fid = Some(stage("fid", || fid_table(&encoder, &images))?);
    res.fid_sets = sets;
    if let Some(f) = &res.fid {
        ctx.log(format!("FID matrix {:?}", f.matrix));
    }

    res.dream = Some(dream_check(ctx, &subject, &first, &neg1, &tp.tokens.images)?);
    Ok(())
}

/// Pairwise Fréchet distances between embedded image sets.
pub(super) fn fid_table(encoder: &EncoderModel, images: &[Vec<Tensor>]) -> Result<FidTable> {
    let stats = images
        .iter()
        .map(|set| fit_gaussian(&embed(encoder, set)?))
        .collect::<Result<Vec<_>>>()?;
    let n = stats.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = frechet_distance(&stats[i], &stats[j])?;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(FidTable {
        conditions: FID_CONDITIONS.iter().take(n).map(|c| c.to_string()).collect(),
        matrix,
    })
}

/// Mean plus two sample standard deviations.
pub(super) fn dream_threshold(random: &[f64]) -> f64 {
    stats::mean(random) + 2.0 * stats::variance(random).sqrt()
}

fn dream_check(
    ctx: &mut Ctx,
    subject: &TrainedModel,
    sets: &ConceptSets,
    negatives: &[Tensor],
    attacked: &[Tensor],
) -> Result<DreamReport> {
    let cfg = ctx.cfg;
    let layer = cfg.ffv.dream_layer.as_str();
    let concept = sets.concept;
    let seed = ctx.seed("dream");
    let random = random_sets(ctx, concept, "dream")?;
    stage("dream", || {
        let dcfg = VisualizationConfig {
            seed,
            ..cfg.ffv.dream.clone()
        };
        let mut named: Vec<(String, Cav)> = vec![
            ("clean".into(), train_cav(subject, layer, concept.name(), &sets.positives, negatives, &cfg.probe)?),
            ("attacked".into(), train_cav(subject, layer, concept.name(), attacked, negatives, &cfg.probe)?),
        ];
        for (i, r) in random.iter().take(cfg.ffv.dream_random).enumerate() {
            named.push((format!("random-{i}"), train_cav(subject, layer, "random", r, negatives, &cfg.probe)?));
        }
        let dreams = named
            .par_iter()
            .map(|(_, cav)| cav_dream(subject, layer, cav, &dcfg))
            .collect::<Result<Vec<_>>>()?;
        let mut images = BTreeMap::new();
        let mut ratios = Vec::new();
        for ((name, cav), d) in named.iter().zip(&dreams) {
            d.save(&ctx.ws.path("dream"), name)?;
            save_cav_set(std::slice::from_ref(cav), &ctx.ws.prepare(&format!("dream/{name}.cpak"))?)?;
            images.insert(name.clone(), format!("dream/{name}.ppm"));
            ratios.push(signature(&ppm::quantize(&d.image))?.ratio);
        }
        let random_ratios = ratios[2..].to_vec();
        let report = DreamReport {
            layer: layer.to_string(),
            concept: concept.name().to_string(),
            clean_ratio: ratios[0],
            attacked_ratio: ratios[1],
            threshold: dream_threshold(&random_ratios),
            random_ratios,
            images,
        };
        ctx.log(format!(
            "dream ratios: clean {:.3} attacked {:.3} threshold {:.3}",
            report.clean_ratio, report.attacked_ratio, report.threshold
        ));
        Ok(report)
    })
}
