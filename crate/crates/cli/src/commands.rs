use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use depthrnn_core::backbone::BackboneWeights;
use depthrnn_core::diagnostics::{self, CheckResult};
use depthrnn_core::eval::harness::{self, REPORT_COLUMNS};
use depthrnn_core::eval::{self, Dataset, EvalOutcome, Label, PredictionRecord, Split};
use depthrnn_core::experiment::{self, Datasets};
use depthrnn_core::recurrence::{self, CellMode, CellVariant, TRACE_COLUMNS};
use depthrnn_core::training;
use serde::Serialize;

use crate::config::RunConfig;

fn datasets(cfg: &RunConfig) -> Result<Datasets> {
    Ok(experiment::build_datasets(&cfg.experiment.data, cfg.seed)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_backbone(cfg: &RunConfig) -> Result<BackboneWeights> {
    let path = cfg.backbone_path();
    if !path.exists() {
        bail!(
            "backbone checkpoint {} not found; run `depthrnn pretrain` first",
            path.display()
        );
    }
    let bb = BackboneWeights::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if !bb.is_frozen() {
        bail!("backbone checkpoint {} is not frozen", path.display());
    }
    Ok(bb)
}

fn trainable_variant(mode: &str) -> Result<CellVariant> {
    match CellVariant::from_name(mode) {
        Some(v) if v != CellVariant::ForcedVanilla => Ok(v),
        _ => bail!("mode `{mode}` has no trainable cell"),
    }
}

/// The cell for `cfg.mode`; `None` means the plain backbone.
fn load_cell(cfg: &RunConfig) -> Result<Option<CellMode>> {
    match cfg.mode.as_str() {
        "vanilla" => Ok(None),
        "forced_vanilla" => Ok(Some(CellMode::ForcedVanilla)),
        mode => {
            let variant = trainable_variant(mode)?;
            let path = cfg.cell_path(mode);
            if !path.exists() {
                bail!(
                    "cell checkpoint {} not found; run `depthrnn finetune --mode {mode}` first",
                    path.display()
                );
            }
            let cell = CellMode::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if cell.variant() != variant {
                bail!(
                    "cell checkpoint {} holds `{}`, not `{mode}`",
                    path.display(),
                    cell.variant().name()
                );
            }
            Ok(Some(cell))
        }
    }
}

fn evaluate(bb: &BackboneWeights, cell: Option<&CellMode>, data: &Dataset) -> Result<EvalOutcome> {
    let out = match cell {
        None => eval::run_eval(&eval::VanillaModel { backbone: bb }, data)?,
        Some(mode) => eval::run_eval(&eval::RecurrentModel { backbone: bb, mode }, data)?,
    };
    Ok(out)
}

fn write_report(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    harness::write_report_rows(&mut w, outcome)?;
    w.flush()?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data = datasets(cfg)?;
    let dir = cfg.paths.out.join("data");
    std::fs::create_dir_all(&dir)?;
    for (name, d) in [("pretrain", &data.pretrain), ("finetune", &data.finetune), ("eval", &data.eval)] {
        d.write_jsonl(&dir.join(format!("{name}.jsonl")))?;
    }
    let (bb, steps) = experiment::pretrain(&cfg.experiment, &data.pretrain, cfg.seed)?;
    let path = cfg.backbone_path();
    bb.save(&path)?;
    training::write_steps_csv(&steps, &cfg.paths.out.join("pretrain.csv"))?;
    let last = steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps, final loss {last:.4}; backbone {} sha256 {}",
        steps.len(),
        path.display(),
        bb.sha256()
    );
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let variant = trainable_variant(&cfg.mode)?;
    let bb = load_backbone(cfg)?;
    let data = datasets(cfg)?;
    let (cell, record) = experiment::finetune_variant(&cfg.experiment, &bb, &data.finetune, variant, cfg.seed)?;
    let name = variant.name();
    let path = cfg.cell_path(name);
    cell.save(&path)?;
    record.write_csv(&cfg.paths.out.join(format!("train_{name}.csv")))?;
    write_json(&cfg.paths.out.join(format!("train_{name}.json")), &record)?;
    println!(
        "fine-tuned {name}: {} parameters, {} steps, final loss {:.4}; backbone unchanged ({})",
        cell.parameter_count(),
        record.steps.len(),
        record.steps.last().map(|s| s.loss).unwrap_or(f64::NAN),
        record.backbone_sha_after
    );
    Ok(())
}

fn print_outcome(o: &EvalOutcome) {
    for (split, r) in &o.splits {
        println!("{:<16} {:<12} acc {:.4} f1 {:.4}", o.model, split.name(), r.accuracy, r.f1);
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let bb = load_backbone(cfg)?;
    let cell = load_cell(cfg)?;
    let data = datasets(cfg)?;
    let outcome = evaluate(&bb, cell.as_ref(), &data.eval)?;
    write_json(&cfg.paths.out.join(format!("eval_{}.json", cfg.mode)), &outcome)?;
    write_report(&cfg.paths.out.join(format!("eval_{}.csv", cfg.mode)), &outcome)?;
    print_outcome(&outcome);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TracedPrompt {
    id: usize,
    split: Split,
    label: Label,
    prompt: Vec<usize>,
    vanilla_token: usize,
    vanilla_answer: Option<Label>,
    recurrent_token: usize,
    recurrent_answer: Option<Label>,
}

pub fn trace(cfg: &RunConfig) -> Result<()> {
    let bb = load_backbone(cfg)?;
    let cell = match load_cell(cfg)? {
        Some(CellMode::ForcedVanilla) | None => bail!("trace needs a trained cell mode, got `{}`", cfg.mode),
        Some(c) => c,
    };
    let data = datasets(cfg)?;
    let vanilla = evaluate(&bb, Some(&CellMode::ForcedVanilla), &data.eval)?;
    let recurrent = evaluate(&bb, Some(&cell), &data.eval)?;
    let ids = if cfg.trace.prompts.is_empty() {
        let mut d = harness::disagreements(&vanilla, &recurrent);
        d.truncate(cfg.trace.max_prompts);
        d
    } else {
        cfg.trace.prompts.clone()
    };
    if ids.is_empty() {
        bail!("no eval prompt where vanilla and `{}` give different answers", cfg.mode);
    }
    let by_id = |o: &EvalOutcome| -> HashMap<usize, PredictionRecord> {
        o.predictions.iter().map(|p| (p.id, p.clone())).collect()
    };
    let (pv, pr) = (by_id(&vanilla), by_id(&recurrent));
    let examples: HashMap<usize, _> = data.eval.examples.iter().map(|e| (e.id, e)).collect();

    let out = &cfg.paths.out;
    let mut wv = csv::Writer::from_path(out.join("trace_vanilla.csv"))?;
    let mut wh = csv::Writer::from_path(out.join("trace_recurrent.csv"))?;
    wv.write_record(TRACE_COLUMNS)?;
    wh.write_record(TRACE_COLUMNS)?;
    let mut prompts = Vec::with_capacity(ids.len());
    for id in ids {
        let ex = examples
            .get(&id)
            .with_context(|| format!("config field `trace.prompts`: no eval example with id {id}"))?;
        let tokens = ex.prompt_tokens(&data.eval.vocab);
        let (_, tv) = recurrence::depth_forward(&tokens, &bb, &CellMode::ForcedVanilla)?;
        let (_, th) = recurrence::depth_forward(&tokens, &bb, &cell)?;
        recurrence::write_trace_rows(&mut wv, &id.to_string(), &tv)?;
        recurrence::write_trace_rows(&mut wh, &id.to_string(), &th)?;
        prompts.push(TracedPrompt {
            id,
            split: ex.split,
            label: ex.label,
            prompt: tokens,
            vanilla_token: pv[&id].decoded_token,
            vanilla_answer: pv[&id].answer,
            recurrent_token: pr[&id].decoded_token,
            recurrent_answer: pr[&id].answer,
        });
    }
    wv.flush()?;
    wh.flush()?;
    write_json(&out.join("trace_prompts.json"), &prompts)?;
    println!("traced {} prompts with {}", prompts.len(), cfg.mode);
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationEntry {
    variant: String,
    trainable_params: usize,
    final_loss: Option<f64>,
    splits: std::collections::BTreeMap<Split, eval::EvalReport>,
    overall: eval::EvalReport,
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "variant",
    "trainable_params",
    "final_loss",
    "accuracy_random",
    "accuracy_popular",
    "accuracy_adversarial",
    "accuracy_all",
    "f1_all",
];

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let bb = load_backbone(cfg)?;
    let data = datasets(cfg)?;
    let vanilla = evaluate(&bb, None, &data.eval)?;
    let mut w = csv::Writer::from_path(cfg.paths.out.join("ablation.csv"))?;
    w.write_record(ABLATION_COLUMNS)?;
    let mut entries = Vec::new();
    for &variant in &cfg.experiment.variants {
        if variant == CellVariant::ForcedVanilla {
            bail!("config field `experiment.variants`: forced_vanilla is not trainable");
        }
        let (cell, record) = experiment::finetune_variant(&cfg.experiment, &bb, &data.finetune, variant, cfg.seed)?;
        let outcome = evaluate(&bb, Some(&cell), &data.eval)?;
        let acc = |s: Split| outcome.accuracy(s).map(|a| format!("{a:.6}")).unwrap_or_default();
        let final_loss = record.steps.last().map(|s| s.loss);
        w.write_record([
            variant.name().to_string(),
            cell.parameter_count().to_string(),
            final_loss.map(|l| format!("{l:.6e}")).unwrap_or_default(),
            acc(Split::Random),
            acc(Split::Popular),
            acc(Split::Adversarial),
            format!("{:.6}", outcome.overall.accuracy),
            format!("{:.6}", outcome.overall.f1),
        ])?;
        print_outcome(&outcome);
        entries.push(AblationEntry {
            variant: variant.name().into(),
            trainable_params: cell.parameter_count(),
            final_loss,
            splits: outcome.splits,
            overall: outcome.overall,
        });
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Ablation<'a> {
        seed: u64,
        vanilla: &'a std::collections::BTreeMap<Split, eval::EvalReport>,
        variants: Vec<AblationEntry>,
    }
    write_json(
        &cfg.paths.out.join("ablation.json"),
        &Ablation {
            seed: cfg.seed,
            vanilla: &vanilla.splits,
            variants: entries,
        },
    )?;
    print_outcome(&vanilla);
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    seed: u64,
    step: f64,
    tolerance: f64,
    max_rel_error: f64,
    pass: bool,
    checks: Vec<CheckResult>,
}

/// Returns whether every check met the tolerance; the report is written either way.
pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let g = &cfg.gradcheck;
    let mut checks = diagnostics::cell_gradient_checks(cfg.seed, g.instances, &g.dims, g.step)?;
    for &d in &g.dims {
        checks.push(diagnostics::recurrence_gradient_check(
            cfg.seed, g.instances, g.layers, d, g.seq, g.step,
        )?);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = max_rel_error <= g.tolerance;
    for c in &checks {
        println!(
            "{:<16} d={} instances={} coords={} max_rel={:.3e} max_abs={:.3e}",
            c.name, c.d, c.instances, c.coordinates, c.max_rel_error, c.max_abs_error
        );
    }
    write_json(
        &cfg.paths.out.join("gradcheck.json"),
        &GradcheckReport {
            seed: cfg.seed,
            step: g.step,
            tolerance: g.tolerance,
            max_rel_error,
            pass,
            checks,
        },
    )?;
    println!(
        "max relative error {max_rel_error:.3e} vs tolerance {:.1e}: {}",
        g.tolerance,
        if pass { "ok" } else { "exceeded" }
    );
    Ok(pass)
}
