use std::fs;
use std::path::Path;

use anyhow::Context;
use geonew::container::Container;
use geonew::data::{load_dataset, Dataset, Split, SAMPLE_MAGIC};
use geonew::train::{append_metrics, Evaluation, Prepared, Trainer};
use geonew::DenseMatrix;
use serde_json::json;

use crate::config::{write_json, TrainRunConfig};
use crate::error::{numerical, NumericalExt};
use crate::{EvalArgs, TrainArgs};

fn prepare(ds: &Dataset, split: Split) -> anyhow::Result<Vec<Prepared>> {
    ds.split(split).map(|s| Prepared::new(s).classify()).collect()
}

/// Mean `ζ` over samples that produced one.
fn mean_zeta(eval: &Evaluation) -> f64 {
    let z: Vec<f64> = eval.samples.iter().map(|s| s.zeta).filter(|z| z.is_finite()).collect();
    if z.is_empty() {
        f64::NAN
    } else {
        z.iter().sum::<f64>() / z.len() as f64
    }
}

fn summary(eval: &Evaluation) -> serde_json::Value {
    let row = eval.row(0, 0.0, 0.0);
    json!({
        "split": eval.split,
        "samples": eval.samples.len(),
        "eps_l2": row.eps_l2,
        "boundary_err": row.boundary_err,
        "conv_frac": row.conv_frac,
        "mean_newton_iters": row.mean_newton_iters,
    })
}

pub fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = TrainRunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    run.train.validate()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut resumed = match &args.resume {
        Some(ckpt) => {
            let t = Trainer::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            if t.config != run.train {
                log::warn!("resuming with the checkpoint's training configuration, not the one in {}", args.config.display());
            }
            log::info!("resuming at epoch {}, step {}", t.epochs_done, t.step);
            run.train = t.config.clone();
            Some(t)
        }
        None => None,
    };
    write_json(&args.out.join("config.json"), &run)?;

    let ds = load_dataset(&run.dataset, &run.train.features, None).classify()?;
    let train = prepare(&ds, Split::Train)?;
    let tests: Vec<(Split, Vec<Prepared>)> =
        [Split::TestId, Split::TestOod].into_iter().map(|s| prepare(&ds, s).map(|p| (s, p))).collect::<Result<_, _>>()?;
    let d_in = ds.d_in().context("dataset is empty")?;
    let mut trainer = match resumed.take() {
        Some(t) => {
            anyhow::ensure!(t.model.d_in == d_in, "checkpoint expects {} feature columns, dataset has {d_in}", t.model.d_in);
            t
        }
        None => Trainer::new(run.train.clone(), d_in)?,
    };

    let metrics = args.out.join("metrics.csv");
    let evaluate = |trainer: &Trainer, lr: f64| -> anyhow::Result<Vec<Evaluation>> {
        let mut out = Vec::new();
        for (split, samples) in tests.iter().filter(|(_, s)| !s.is_empty()) {
            let eval = trainer.evaluate(samples, *split).classify()?;
            append_metrics(&metrics, &[eval.row(trainer.epochs_done, mean_zeta(&eval), lr)])?;
            out.push(eval);
        }
        Ok(out)
    };

    let mut lr = trainer.lr_at(trainer.step, train.len());
    while trainer.epochs_done < trainer.config.epochs {
        let stats = trainer.train_epoch(&train).classify()?;
        lr = stats.lr;
        append_metrics(&metrics, &[stats.row()])?;
        let done = trainer.epochs_done;
        if trainer.config.checkpoint_every > 0 && done % trainer.config.checkpoint_every == 0 {
            trainer.save(&args.out.join("checkpoints").join(format!("epoch_{done:04}.gnwc")))?;
        }
        trainer.save(&args.out.join("checkpoint.gnwc"))?;
        if trainer.config.eval_every > 0 && done % trainer.config.eval_every == 0 && done < trainer.config.epochs {
            evaluate(&trainer, lr)?;
        }
    }
    trainer.save(&args.out.join("checkpoint.gnwc"))?;

    let evals = evaluate(&trainer, lr)?;
    let report = json!({
        "epochs": trainer.epochs_done,
        "step": trainer.step,
        "evaluations": evals.iter().map(summary).collect::<Vec<_>>(),
    });
    write_json(&args.out.join("summary.json"), &report)?;
    for e in &evals {
        let row = e.row(trainer.epochs_done, 0.0, 0.0);
        println!("{}: eps_l2 {:.4e} boundary_err {:e} conv {:.3}", e.split, row.eps_l2, row.boundary_err, row.conv_frac);
    }
    println!("checkpoint: {}", args.out.join("checkpoint.gnwc").display());
    if let Some(e) = evals.iter().find(|e| !e.all_converged()) {
        return Err(numerical(format!("Newton did not converge on every {} sample", e.split)));
    }
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let trainer = Trainer::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let ds = load_dataset(&args.dataset, &trainer.config.features, Some(&[args.split])).classify()?;
    let samples = prepare(&ds, args.split)?;
    anyhow::ensure!(!samples.is_empty(), "dataset has no {} samples", args.split);
    let eval = trainer.evaluate(&samples, args.split).classify()?;
    fs::create_dir_all(&args.out)?;
    append_metrics(&args.out.join("metrics.csv"), &[eval.row(trainer.epochs_done, mean_zeta(&eval), 0.0)])?;

    let fields = args.out.join("fields");
    fs::create_dir_all(&fields)?;
    let mut records = Vec::new();
    for (s, (e, sample)) in samples.iter().zip(eval.samples.iter().zip(ds.split(args.split))) {
        write_fields(&fields.join(format!("{}.gnwd", s.name)), e, &s.target, sample.n_sides)?;
        records.push(json!({
            "name": e.name,
            "n_sides": sample.n_sides,
            "eps_l2": e.eps_l2,
            "boundary_err": e.boundary_err,
            "converged": e.converged,
            "iterations": e.iterations,
            "residual_norm": e.residual_norm,
            "zeta": e.zeta,
        }));
    }
    let report = json!({
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "epoch": trainer.epochs_done,
        "summary": summary(&eval),
        "samples": records,
    });
    write_json(&args.out.join("eval.json"), &report)?;
    let row = eval.row(trainer.epochs_done, 0.0, 0.0);
    println!(
        "{}: {} samples, eps_l2 {:.4e}, boundary_err {:e}, conv {:.3}",
        args.split,
        samples.len(),
        row.eps_l2,
        row.boundary_err,
        row.conv_frac
    );
    if !eval.all_converged() {
        return Err(numerical(format!("Newton did not converge on every {} sample", args.split)));
    }
    Ok(())
}

/// Field dump: predicted and reference nodal values.
fn write_fields(path: &Path, e: &geonew::train::SampleEval, reference: &DenseMatrix, n_sides: usize) -> anyhow::Result<()> {
    let mut c = Container::new(json!({
        "name": e.name,
        "n_sides": n_sides,
        "fields": ["u_pred", "u_ref"],
        "eps_l2": e.eps_l2,
        "boundary_err": e.boundary_err,
        "converged": e.converged,
    }));
    c.push("u_pred", e.prediction.clone());
    c.push("u_ref", reference.clone());
    fs::write(path, c.encode(SAMPLE_MAGIC)).with_context(|| format!("writing {}", path.display()))
}
