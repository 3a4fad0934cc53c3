use gfm_core::csv::indexed;
use gfm_core::density::GaussianMixture;
use gfm_core::distill;
use gfm_core::flowmatch::{self, fm_condition, Interpolant};
use gfm_core::geodesic::{self, Bounds, DiscretePath};
use gfm_core::metrics;
use gfm_core::nets::CorrectorNet;
use gfm_core::par;
use serde_json::{json, Map, Value};

use crate::config::{mode_name, Config};
use crate::error::CliError;
use crate::rundir::RunDir;

pub const TEACHER: &str = "teacher.gfnc";
pub const STUDENT: &str = "student.gfnc";

pub fn velocity_file(mode: Interpolant) -> String {
    format!("velocity_{}.gfnc", mode_name(mode))
}

pub fn samples_file(mode: Interpolant, nfe: usize) -> String {
    format!("samples_{}_nfe{nfe}.csv", mode_name(mode))
}

pub fn trajectories_file(mode: Interpolant, nfe: usize) -> String {
    format!("trajectories_{}_nfe{nfe}.csv", mode_name(mode))
}

fn header(fixed: &[&str], vectors: &[(&str, usize)]) -> Vec<String> {
    let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    for (p, n) in vectors {
        h.extend(indexed(p, *n));
    }
    h
}

fn padded_bounds(points: &[&[f64]]) -> Bounds {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..2 {
        let pad = 1.0 + 0.25 * (hi[k] - lo[k]);
        lo[k] -= pad;
        hi[k] += pad;
    }
    Bounds { lo, hi }
}

/// Direct node-based solve on the first training pairs, compared with the linear path and the grid oracle.
pub fn cmd_geodesic(cfg: &Config, run: &mut RunDir) -> Result<(), CliError> {
    let g = &cfg.geodesic;
    let density = cfg.ambient_density()?;
    let data = cfg.train_data()?;
    let pairs = &data[..g.pairs.min(data.len())];
    let dim = density.dim();
    let mut paths = Vec::new();
    let mut actions = Vec::new();
    let mut history = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let linear = DiscretePath::linear(&p.x0, &p.x1, g.segments)?;
        let opt = geodesic::optimize_path(&linear, &density, &g.solver)?;
        let oracle = match g.oracle_resolution {
            Some(res) if dim == 2 => {
                let bounds = g.bounds.unwrap_or_else(|| {
                    let pts: Vec<&[f64]> = linear.nodes().iter().chain(opt.path.nodes()).map(|v| v.as_slice()).collect();
                    padded_bounds(&pts)
                });
                Some(geodesic::grid_geodesic_oracle(&density, &p.x0, &p.x1, bounds, res)?)
            }
            _ => None,
        };
        let lin_action = geodesic::action(&linear, &density);
        let oracle_action = oracle.as_ref().map_or(f64::NAN, |o| o.action);
        actions.push(vec![i as f64, lin_action, opt.final_action(), oracle_action, opt.final_action() / oracle_action]);
        for (kind, nodes) in [(0.0, linear.nodes()), (1.0, opt.path.nodes())]
            .into_iter()
            .chain(oracle.as_ref().map(|o| (2.0, &o.points[..])))
        {
            for (j, x) in nodes.iter().enumerate() {
                paths.push([vec![i as f64, kind, j as f64], x.clone()].concat());
            }
        }
        for (it, a) in opt.history.iter().enumerate() {
            let resampled = if opt.resampled.contains(&it) { 1.0 } else { 0.0 };
            history.push(vec![i as f64, it as f64, *a, resampled]);
        }
    }
    run.write_csv("geodesic_paths.csv", &header(&["pair", "kind", "node"], &[("x", dim)]), paths)?;
    run.write_csv(
        "geodesic_actions.csv",
        &header(&["pair", "linear", "optimized", "oracle", "optimized_over_oracle"], &[]),
        actions,
    )?;
    run.write_csv("geodesic_history.csv", &header(&["pair", "iteration", "action", "resampled"], &[]), history)?;
    run.finish("geodesic")
}

/// Teacher-student distillation on the training pairs.
pub fn cmd_distill(cfg: &Config, run: &mut RunDir) -> Result<(), CliError> {
    let cd = cfg.distill_density()?;
    let data = cfg.distill_data()?;
    let out = distill::distill_run(&data, &cd, &cfg.distill)?;
    run.save_corrector(TEACHER, &out.teacher)?;
    run.save_corrector(STUDENT, &out.student)?;
    let h: Vec<String> = distill::EpochRecord::HEADER.iter().map(|s| s.to_string()).collect();
    run.write_csv("distill_history.csv", &h, out.history.iter().map(|r| r.row()))?;
    let final_action = out.history.last().map_or(out.initial_action, |r| r.action);
    run.write_csv(
        "distill_summary.csv",
        &header(&["initial_action", "final_action"], &[]),
        [vec![out.initial_action, final_action]],
    )?;
    run.finish("distill")
}

/// Flow matching in every configured mode; geodesic mode reads the distilled student.
pub fn cmd_train_fm(cfg: &Config, run: &mut RunDir) -> Result<(), CliError> {
    let data = cfg.train_data()?;
    for &mode in &cfg.flowmatch.modes {
        let student = match mode {
            Interpolant::Geodesic => Some(run.load_corrector(STUDENT, "distill")?),
            Interpolant::Linear => None,
        };
        let out = flowmatch::train_fm(&data, student.as_ref(), &cfg.flowmatch.for_mode(mode))?;
        run.save_velocity(&velocity_file(mode), &out.net)?;
        run.write_csv(
            &format!("fm_loss_{}.csv", mode_name(mode)),
            &header(&["step", "loss"], &[]),
            out.history.iter().enumerate().map(|(i, l)| vec![i as f64, *l]),
        )?;
    }
    run.finish("train-fm")
}

/// Integrates every trained velocity field from the test sources at each budget.
pub fn cmd_sample(cfg: &Config, run: &mut RunDir) -> Result<(), CliError> {
    let test = cfg.test_data()?;
    let s = &cfg.sample;
    for &mode in &cfg.flowmatch.modes {
        let net = run.load_velocity(&velocity_file(mode), "train-fm")?;
        let fcfg = cfg.flowmatch.for_mode(mode);
        let dim = net.dim();
        for &nfe in &s.nfe {
            let reports = par::try_collect(par::map_slice(&test, |p| {
                flowmatch::sample(&net, &p.x0, &fm_condition(&fcfg, &p.x0, &p.c1), nfe, s.method)
            }))?;
            let rows = reports
                .iter()
                .zip(&test)
                .enumerate()
                .map(|(i, (r, p))| [vec![i as f64], r.endpoint.clone(), p.x1.clone()].concat());
            run.write_csv(
                &samples_file(mode, nfe),
                &header(&["pair"], &[("pred", dim), ("truth", dim)]),
                rows,
            )?;
            let traj = reports.iter().take(s.trajectories).enumerate().flat_map(|(i, r)| {
                r.trajectory
                    .iter()
                    .enumerate()
                    .map(move |(k, x)| [vec![i as f64, k as f64], x.clone()].concat())
            });
            run.write_csv(
                &trajectories_file(mode, nfe),
                &header(&["pair", "state"], &[("x", dim)]),
                traj,
            )?;
        }
    }
    run.finish("sample")
}

fn split_rows(rows: &[Vec<f64>], skip: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    rows.iter()
        .map(|r| (r[skip..skip + dim].to_vec(), r[skip + dim..skip + 2 * dim].to_vec()))
        .unzip()
}

/// Trajectories grouped by their leading pair index.
fn group_trajectories(rows: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for r in rows {
        let i = r[0] as usize;
        if out.len() <= i {
            out.resize(i + 1, Vec::new());
        }
        out[i].push(r[2..].to_vec());
    }
    out
}

fn path_points(net: &CorrectorNet, x0: &[f64], x1: &[f64], nodes: usize) -> Result<Vec<Vec<f64>>, CliError> {
    (0..nodes)
        .map(|k| Ok(net.interpolant(x0, x1, k as f64 / (nodes - 1) as f64)?))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Metrics over whatever the run directory holds; writes `summary.json` and diagnostic CSVs.
pub fn cmd_eval(cfg: &Config, run: &mut RunDir) -> Result<(), CliError> {
    let density: GaussianMixture = cfg.ambient_density()?;
    let dim = density.dim();
    let mut summary = Map::new();
    let mut rmse = Map::new();
    let mut energy = Map::new();
    let mut smooth = Map::new();
    for &mode in &cfg.flowmatch.modes {
        let (mut r_mode, mut e_mode, mut s_mode) = (Map::new(), Map::new(), Map::new());
        for &nfe in &cfg.sample.nfe {
            let (_, rows) = run.read_csv(&samples_file(mode, nfe), "sample")?;
            let (pred, truth) = split_rows(&rows, 1, dim);
            r_mode.insert(nfe.to_string(), json!(metrics::endpoint_rmse(&pred, &truth)?));
            let ed = if pred.len() >= 2 { metrics::energy_distance(&pred, &truth)? } else { f64::NAN };
            e_mode.insert(nfe.to_string(), json!(ed));
            let (_, traj) = run.read_csv(&trajectories_file(mode, nfe), "sample")?;
            let stats: Vec<metrics::Smoothness> = group_trajectories(&traj)
                .iter()
                .filter(|t| t.len() >= 3)
                .map(|t| metrics::path_smoothness(t))
                .collect::<Result<_, _>>()?;
            if !stats.is_empty() {
                let ppl: Vec<f64> = stats.iter().map(|s| s.ppl).collect();
                let turning: Vec<f64> = stats.iter().map(|s| s.turning).collect();
                s_mode.insert(nfe.to_string(), json!({"ppl": mean(&ppl), "turning": mean(&turning)}));
            }
        }
        let key = mode_name(mode).to_owned();
        rmse.insert(key.clone(), Value::Object(r_mode));
        energy.insert(key.clone(), Value::Object(e_mode));
        smooth.insert(key, Value::Object(s_mode));
    }
    summary.insert("endpoint_rmse".into(), Value::Object(rmse));
    summary.insert("energy_distance".into(), Value::Object(energy));
    summary.insert("smoothness".into(), Value::Object(smooth));

    if run.has(&format!("{}/{STUDENT}", crate::rundir::CHECKPOINTS)) {
        let student = run.load_corrector(STUDENT, "distill")?;
        let linear = CorrectorNet::new(dim, vec![1], student.mlp().spec().activation, 0)?;
        let test = cfg.test_data()?;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = test
            .iter()
            .take(cfg.eval.pairs)
            .map(|p| (p.x0.clone(), p.x1.clone()))
            .collect();
        let grid = metrics::interior_grid(cfg.eval.residual_times);
        let lin = metrics::el_residual_curve(&linear, &density, &pairs, &grid)?;
        let stu = metrics::el_residual_curve(&student, &density, &pairs, &grid)?;
        let rows = (0..grid.len()).map(|k| {
            vec![
                grid[k],
                lin.el_residual[k],
                stu.el_residual[k],
                lin.reparam_residual[k],
                stu.reparam_residual[k],
                lin.func_deriv[k],
                stu.func_deriv[k],
            ]
        });
        run.write_csv(
            "eval_residual.csv",
            &header(
                &["t", "linear_el", "student_el", "linear_reparam", "student_reparam", "linear_func_deriv", "student_func_deriv"],
                &[],
            ),
            rows,
        )?;
        let n = cfg.eval.path_nodes;
        let mut lp_rows = Vec::new();
        let (mut lin_act, mut stu_act) = (Vec::new(), Vec::new());
        for (i, (x0, x1)) in pairs.iter().enumerate() {
            let lp_path = path_points(&linear, x0, x1, n)?;
            let sp_path = path_points(&student, x0, x1, n)?;
            let lr = metrics::relative_log_prob(&lp_path, &density)?;
            let sr = metrics::relative_log_prob(&sp_path, &density)?;
            lin_act.push(geodesic::polyline_action(&lp_path, &density));
            stu_act.push(geodesic::polyline_action(&sp_path, &density));
            for k in 0..n {
                lp_rows.push(vec![i as f64, k as f64, k as f64 / (n - 1) as f64, lr[k], sr[k]]);
            }
        }
        run.write_csv(
            "eval_log_prob.csv",
            &header(&["pair", "node", "t", "linear", "student"], &[]),
            lp_rows,
        )?;
        let (le, se) = (lin.mean_el_residual(), stu.mean_el_residual());
        let (lr, sr) = (lin.mean_reparam_residual(), stu.mean_reparam_residual());
        summary.insert(
            "residual".into(),
            json!({
                "linear_el": le,
                "student_el": se,
                "el_ratio": se / le,
                "linear_reparam": lr,
                "student_reparam": sr,
                "reparam_ratio": sr / lr,
                "skipped": lin.skipped + stu.skipped,
            }),
        );
        summary.insert(
            "path_action".into(),
            json!({"linear": mean(&lin_act), "student": mean(&stu_act)}),
        );
    }
    run.write_json("summary.json", &Value::Object(summary))?;
    run.finish("eval")
}

pub fn cmd_pipeline(cfg: &Config, run: &mut RunDir) -> Result<(), CliError> {
    cmd_geodesic(cfg, run)?;
    cmd_distill(cfg, run)?;
    cmd_train_fm(cfg, run)?;
    cmd_sample(cfg, run)?;
    cmd_eval(cfg, run)
}
