//! One function per subcommand. Every command is deterministic under its
//! (config, seed) and reports through files in its --out directory.

use crate::config::FileConfig;
use ndarray::{ArrayD, Axis, IxDyn};
use poumor::dataset;
use poumor::error::{Error, Result};
use poumor::extension::{
    burgers_action, extend_transpose, gibbs_metric, restrict, solve_smooth_extension, DomainMask,
    SolveOpts,
};
use poumor::gating::EvalCtx;
use poumor::io::{self, Checkpoint};
use poumor::model::{ModelConfig, PouModel};
use poumor::spectral::{energy_spectrum, rms_csv, rms_fluctuations, spectrum_csv, Field, GridSpec};
use poumor::training::{
    fit, metrics_header, sample_weights, Dataset, FitState, MetricAccum, SeriesData, TrainConfig,
    VariationalParams,
};
use serde_json::json;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub struct GenDataArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub kind: Option<String>,
    pub count: Option<usize>,
    pub val_count: Option<usize>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub snapshots: Option<usize>,
    pub keep_fine: bool,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = FileConfig::load(args.config.as_deref())?.data;
    if let Some(k) = &args.kind {
        cfg.kind = k.clone();
    }
    if let Some(c) = args.count {
        cfg.count = c;
    }
    if let Some(v) = args.val_count {
        cfg.val_count = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(t) = args.snapshots {
        cfg.snapshots = t;
    }
    let manifest = dataset::save_dataset(&args.out, &cfg, args.keep_fine)?;
    println!(
        "wrote {} dataset ({} train / {} val) to {}",
        manifest.flavor,
        manifest.train,
        manifest.val,
        args.out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub objective: Option<String>,
    pub checkpoint_every: u64,
}

fn checkpoint_meta(step: u64, objective: &str, model: &ModelConfig, grid: &GridSpec) -> serde_json::Value {
    json!({
        "step": step,
        "objective": objective,
        "model": model,
        "grid": grid,
    })
}

fn write_state(
    path: &Path,
    state: &FitState,
    objective: &str,
    model: &ModelConfig,
    grid: &GridSpec,
) -> Result<()> {
    io::write_checkpoint(
        path,
        &Checkpoint {
            meta: checkpoint_meta(state.step, objective, model, grid),
            params: state.params.clone(),
            opt_m: state.m.clone(),
            opt_v: state.v.clone(),
        },
    )
}

fn model_from_meta(meta: &serde_json::Value) -> Result<(PouModel, String)> {
    let mc: ModelConfig = serde_json::from_value(meta["model"].clone())
        .map_err(|e| Error::format(format!("checkpoint model config: {e}")))?;
    let grid: GridSpec = serde_json::from_value(meta["grid"].clone())
        .map_err(|e| Error::format(format!("checkpoint grid: {e}")))?;
    let objective = meta["objective"].as_str().unwrap_or("least-squares").to_string();
    Ok((PouModel::build(mc, grid)?, objective))
}

/// Parameters for prediction: posterior means for an ELBO checkpoint, the
/// raw parameters otherwise.
fn eval_params(ck: &Checkpoint, objective: &str) -> Result<poumor::tape::ParamStore> {
    if objective == "elbo" {
        Ok(VariationalParams::from_flat(ck.params.clone())?.mean_params())
    } else {
        Ok(ck.params.clone())
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut tc: TrainConfig = file.train.clone();
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(l) = args.lr {
        tc.lr = l;
    }
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    if let Some(m) = args.max_steps {
        tc.max_steps = m;
    }
    if let Some(o) = &args.objective {
        tc.objective = o.clone();
    }
    tc.validate()?;
    let elbo = tc.objective == "elbo";

    let manifest = dataset::load_manifest(&args.data)?;
    let data = match manifest.flavor.as_str() {
        "pairs" => Dataset::Pairs(dataset::load_pairs(&args.data, &manifest, "train")?),
        "series" => {
            let mut series = Vec::with_capacity(manifest.train);
            for i in 0..manifest.train {
                series.push(dataset::load_series(&args.data, &manifest, "train", i)?);
            }
            Dataset::Series(SeriesData { series, mask: None })
        }
        other => return Err(Error::invalid(format!("cannot train on flavor '{other}'"))),
    };

    let model = PouModel::build(file.model.clone(), manifest.grid.clone())?;
    fs::create_dir_all(&args.out)?;
    let (mut state, fresh) = match &args.resume {
        Some(p) => {
            let ck = io::read_checkpoint(p)?;
            let saved: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
                .map_err(|e| Error::format(format!("checkpoint model config: {e}")))?;
            if saved != file.model {
                return Err(Error::invalid(
                    "checkpoint was written for a different model configuration",
                ));
            }
            let step = ck.meta["step"].as_u64().unwrap_or(0);
            (FitState::resume(ck.params, ck.opt_m, ck.opt_v, step)?, false)
        }
        None => {
            let init = model.init_params(tc.seed);
            let params = if elbo {
                VariationalParams::from_deterministic(&init, tc.init_sigma).0
            } else {
                init
            };
            (FitState::new(params), true)
        }
    };

    let csv_path = args.out.join("metrics.csv");
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    if fresh || csv.metadata()?.len() == 0 {
        writeln!(csv, "{}", metrics_header(&tc.objective))?;
    }

    let ck_path = args.out.join("checkpoint.pouf");
    let report = fit(&model, &data, &tc, &mut state, |row, st| {
        writeln!(csv, "{}", row.csv_line(&tc.objective))?;
        if args.checkpoint_every > 0 && st.step % args.checkpoint_every == 0 {
            write_state(&ck_path, st, &tc.objective, &file.model, &model.grid)?;
        }
        Ok(())
    });
    match report {
        Ok(report) => {
            write_state(&ck_path, &state, &tc.objective, &file.model, &model.grid)?;
            let last = report.rows.last();
            println!(
                "trained {} steps (loss {}){}",
                state.step,
                last.map(|r| r.loss).unwrap_or(f64::NAN),
                if report.stopped_early { ", stopped early" } else { "" }
            );
            Ok(())
        }
        Err(e) => {
            // keep the last good parameters reachable
            let _ = write_state(&ck_path, &state, &tc.objective, &file.model, &model.grid);
            Err(e)
        }
    }
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub split: String,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = io::read_checkpoint(&args.checkpoint)?;
    let (model, objective) = model_from_meta(&ck.meta)?;
    let params = eval_params(&ck, &objective)?;
    let manifest = dataset::load_manifest(&args.data)?;
    if manifest.grid != model.grid {
        return Err(Error::invalid("dataset grid does not match the checkpoint"));
    }
    let pairs = dataset::load_pairs(&args.data, &manifest, &args.split)?;
    let eval_mask = dataset::load_eval_mask(&args.data, &manifest)?;
    fs::create_dir_all(&args.out)?;

    let mut acc = MetricAccum::default();
    for s in &pairs {
        let ctx = EvalCtx {
            sample_gates: s.gates.as_ref(),
        };
        let pred = model.predict(&params, &s.input, &ctx)?;
        let mask = s.mask.as_ref().or(eval_mask.as_ref());
        acc.add(&pred.values, &s.target.values, mask);
    }
    let metrics = json!({
        "split": args.split,
        "samples": pairs.len(),
        "r2": acc.r2(),
        "wmape": acc.wmape(),
        "rel_rmse": acc.rel_rmse(),
    });
    fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("json"),
    )?;

    if model.config.gating.kind == "softmax" {
        let gates = model.gate_field(&params, &EvalCtx::default())?;
        io::write_field(&args.out.join("gates.pouf"), &gates)?;
    } else if let Some(first) = pairs.first() {
        if let Some(g) = &first.gates {
            io::write_array(&args.out.join("gates.pouf"), g)?;
        }
    }
    println!("{metrics}");
    Ok(())
}

pub struct RolloutArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

fn stack_fields(series: &[Field]) -> ArrayD<f64> {
    let mut shape = vec![series.len()];
    shape.extend_from_slice(series[0].values.shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (t, f) in series.iter().enumerate() {
        out.index_axis_mut(Axis(0), t).assign(&f.values);
    }
    out
}

fn mean_sigma(var: &Field) -> f64 {
    let n = var.values.len() as f64;
    var.values.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>() / n
}

pub fn cmd_rollout(args: &RolloutArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut rc = file.rollout.clone();
    if let Some(s) = args.steps {
        rc.steps = s;
    }
    if let Some(s) = args.samples {
        rc.samples = s;
    }
    if let Some(s) = args.seed {
        rc.seed = s;
    }
    let ck = io::read_checkpoint(&args.checkpoint)?;
    let (model, objective) = model_from_meta(&ck.meta)?;
    let manifest = dataset::load_manifest(&args.data)?;
    if manifest.flavor != "series" {
        return Err(Error::invalid("rollout needs a snapshot-series dataset"));
    }
    if manifest.grid != model.grid {
        return Err(Error::invalid("dataset grid does not match the checkpoint"));
    }
    if manifest.val == 0 {
        return Err(Error::invalid("rollout needs at least one validation series"));
    }
    let prob = model.config.probabilistic;
    let vp = if objective == "elbo" {
        Some(VariationalParams::from_flat(ck.params.clone())?)
    } else {
        None
    };
    fs::create_dir_all(&args.out)?;
    let ctx = EvalCtx::default();

    for s in 0..rc.samples {
        let series = dataset::load_series(&args.data, &manifest, "val", s % manifest.val)?;
        let u0 = &series[0];
        let theta = match &vp {
            Some(vp) => sample_weights(vp, rc.seed.wrapping_add(s as u64)),
            None => ck.params.clone(),
        };
        let dir = args.out.join(format!("sample{s:04}"));
        fs::create_dir_all(&dir)?;
        let mu_series: Vec<Field> = if prob {
            let traj = model.rollout_prob(&theta, u0, rc.steps, &ctx)?;
            let vars: Vec<Field> = traj.iter().map(|(_, v)| v.clone()).collect();
            io::write_array(&dir.join("var.pouf"), &stack_fields(&vars))?;
            traj.into_iter().map(|(m, _)| m).collect()
        } else {
            model.rollout(&theta, u0, rc.steps, &ctx)?
        };
        io::write_array(&dir.join("mu.pouf"), &stack_fields(&mu_series))?;
        let last = mu_series.last().expect("rollout returns the IC at least");
        fs::write(
            dir.join("spectra.csv"),
            spectrum_csv(&energy_spectrum(last)),
        )?;
        let ref_idx = rc.steps.min(series.len() - 1);
        fs::write(
            dir.join("reference_spectra.csv"),
            spectrum_csv(&energy_spectrum(&series[ref_idx])),
        )?;
        fs::write(dir.join("rms.csv"), rms_csv(&rms_fluctuations(&mu_series)?))?;
    }

    let meta = json!({
        "steps": rc.steps,
        "samples": rc.samples,
        "seed": rc.seed,
        "grid": model.grid,
        "channels": model.config.in_channels,
        "dt": model.config.solver.as_ref().map(|s| s.dt),
    });
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&meta).expect("json"),
    )?;

    if prob && manifest.has_ood {
        let ood = dataset::load_ood(&args.data, &manifest)?;
        let params = eval_params(&ck, &objective)?;
        let step_sigma = |ic: &Field| -> Result<f64> {
            let traj = model.rollout_prob(&params, ic, 1, &ctx)?;
            Ok(mean_sigma(&traj[1].1))
        };
        let s_in = step_sigma(&ood.in_dist)?;
        let s_ood = step_sigma(&ood.ood)?;
        let report = json!({
            "in_dist_mean_sigma": s_in,
            "ood_mean_sigma": s_ood,
            "ratio": if s_in > 0.0 { Some(s_ood / s_in) } else { None },
        });
        fs::write(
            args.out.join("ood_report.json"),
            serde_json::to_string_pretty(&report).expect("json"),
        )?;
    }
    println!(
        "rolled out {} samples for {} steps into {}",
        rc.samples,
        rc.steps,
        args.out.display()
    );
    Ok(())
}

pub struct ExtendArgs {
    pub data: Option<PathBuf>,
    pub split: String,
    pub index: usize,
    pub input: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub len: f64,
    pub out: PathBuf,
    pub cg_tol: f64,
    pub constraint_tol: f64,
    pub max_iters: Option<usize>,
    pub precondition: bool,
    pub gibbs_shell: Option<usize>,
}

fn squeeze_channel(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.ndim() >= 2 && a.shape().last() == Some(&1) {
        let last = a.ndim() - 1;
        a.index_axis(Axis(last), 0).to_owned()
    } else {
        a
    }
}

pub fn cmd_extend(args: &ExtendArgs) -> Result<()> {
    let (spatial, mask_arr, grid) = match (&args.data, &args.input, &args.mask) {
        (Some(dir), None, None) => {
            let manifest = dataset::load_manifest(dir)?;
            if !manifest.has_masks {
                return Err(Error::invalid("dataset samples carry no domain masks"));
            }
            let stem = format!("{}{:04}", args.split, args.index);
            let target = io::read_field(&dir.join(format!("{stem}.out.pouf")), &manifest.grid)?;
            let mask = io::read_array(&dir.join(format!("{stem}.mask.pouf")))?;
            (target.channel(0), mask, manifest.grid)
        }
        (None, Some(input), Some(mask)) => {
            let field = squeeze_channel(io::read_array(input)?);
            let mask = io::read_array(mask)?;
            let lens: Vec<f64> = mask.shape().iter().map(|_| args.len).collect();
            let grid = GridSpec::new(mask.shape(), &lens)?;
            (field, mask, grid)
        }
        _ => {
            return Err(Error::invalid(
                "pass either --data (with --split/--index) or both --input and --mask",
            ))
        }
    };
    if spatial.shape() != mask_arr.shape() {
        return Err(Error::Shape {
            op: "extend",
            lhs: spatial.shape().to_vec(),
            rhs: mask_arr.shape().to_vec(),
        });
    }
    let dm = DomainMask::new(grid.clone(), mask_arr.mapv(|v| v > 0.5))?;
    let ux = restrict(&spatial, &dm)?;
    let opts = SolveOpts {
        cg_tol: args.cg_tol,
        constraint_tol: args.constraint_tol,
        max_iters: args.max_iters,
        precondition: args.precondition,
    };
    fs::create_dir_all(&args.out)?;
    let result = match solve_smooth_extension(&ux, &dm, &opts) {
        Ok(r) => r,
        Err(e) => {
            if let Error::NotConverged { history, .. } = &e {
                let mut text = String::from("iter,residual\n");
                for (i, r) in history.iter().enumerate() {
                    text.push_str(&format!("{i},{r}\n"));
                }
                fs::write(args.out.join("residual_history.csv"), text)?;
            }
            return Err(e);
        }
    };
    let padded = extend_transpose(&ux, &dm)?;
    let as_field = |spatial: &ArrayD<f64>| -> Result<Field> {
        let mut shape = grid.n.clone();
        shape.push(1);
        Field::new(grid.clone(), spatial.clone().into_shape_clone(IxDyn(&shape)).unwrap())
    };
    let extended = as_field(&result.field)?;
    let padded_f = as_field(&padded)?;
    io::write_field(&args.out.join("extended.pouf"), &extended)?;
    io::write_field(&args.out.join("padded.pouf"), &padded_f)?;

    let shell = args
        .gibbs_shell
        .unwrap_or_else(|| grid.n.iter().min().copied().unwrap_or(4) / 4);
    let act_smooth = burgers_action(&extended)?;
    let act_padded = burgers_action(&padded_f)?;
    io::write_field(&args.out.join("action_smooth.pouf"), &act_smooth)?;
    io::write_field(&args.out.join("action_padded.pouf"), &act_padded)?;
    let g_smooth = gibbs_metric(&act_smooth, &dm, shell)?;
    let g_padded = gibbs_metric(&act_padded, &dm, shell)?;
    fs::write(
        args.out.join("gibbs.json"),
        serde_json::to_string_pretty(&json!({
            "cutoff_shell": shell,
            "smooth": g_smooth,
            "padded": g_padded,
        }))
        .expect("json"),
    )?;
    fs::write(
        args.out.join("diagnostics.json"),
        serde_json::to_string_pretty(&json!({
            "seminorm": result.seminorm,
            "iterations": result.iterations,
            "residual": result.residual,
            "constraint_residual": result.constraint_residual,
        }))
        .expect("json"),
    )?;
    println!(
        "extension: seminorm {:.6e}, gibbs smooth {:.4e} vs padded {:.4e}",
        result.seminorm, g_smooth, g_padded
    );
    Ok(())
}
