//! One function per subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use contra::baselines::{pcp_calibrate, rcp_calibrate, rcp_fit, PcpPredictor, RcpModel, RcpPredictor};
use contra::conformal::{
    region_boundary, ContraPredictor, Dispersion, LatentDiagnostics, RegionBoundary, Threshold, DEFAULT_DISPERSION_FACTOR,
};
use contra::data::{read_csv, split, split_pool, Dataset, Split};
use contra::eval::{run_on_dataset, ExperimentConfig, Method, MetricsReport};
use contra::export::{region_svg, write_boundary_csv, SvgLayer, VolumeRecord};
use contra::flow::{train_flow, FlowConfig, FlowModel};
use contra::geometry::VolumeEstimate;
use contra::mcqr::{mcqr_calibrate_nets, train_quantile_nets, McqrConfig, McqrPredictor, QuantileConfig, QuantilePair};
use contra::rescontra::{rescontra_calibrate, residuals_of, KernelRidge, ResContraBundle, ResContraSplit};
use contra::rng::{derive, derive_named};
use contra::{Error, Result};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Output of `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainedModel {
    Flow { model: FlowModel },
    Quantiles { nets: QuantilePair },
    Rcp { model: RcpModel },
    Residual { predictor: KernelRidge, flow: FlowModel },
}

/// Output of `calibrate`; input of `predict` and `diagnose`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PredictorFile {
    Contra(ContraPredictor),
    ResContra(ResContraBundle),
    Pcp(PcpPredictor),
    Rcp(RcpPredictor),
    Mcqr(McqrPredictor),
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn rows(ds: &Dataset, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
    (ds.x.select(Axis(0), idx), ds.y.select(Axis(0), idx))
}

fn load_split(cfg: &RunConfig) -> Result<(Dataset, Split)> {
    let ds = cfg.data()?.load()?;
    let s = split(ds.len(), &cfg.split_spec())?;
    Ok((ds, s))
}

fn flow_config(cfg: &RunConfig, stream: &str) -> FlowConfig {
    FlowConfig {
        seed: derive_named(cfg.method.seed, stream),
        ..cfg.method.flow.clone()
    }
}

fn quantile_config(cfg: &RunConfig) -> QuantileConfig {
    QuantileConfig {
        seed: derive_named(cfg.method.seed, "mcqr"),
        ..cfg.method.mcqr.quantile.clone()
    }
}

/// Predictor rows and residual-flow rows carved from the training block.
fn residual_rows(cfg: &RunConfig, train: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if train.len() < 2 {
        return Err(Error::Empty("training block too small to split for the residual flow".into()));
    }
    let first = ((train.len() as f64) * cfg.predictor_fraction()).round() as usize;
    split_pool(train, first.clamp(1, train.len() - 1), derive_named(cfg.split_spec().seed, "residual-split"))
}

pub fn generate(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let ds = cfg.data()?.load()?;
    let path = match out {
        Some(p) => p,
        None => cfg.output("data.csv")?,
    };
    ds.write_csv(&path)?;
    Ok(path)
}

fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let (ds, s) = load_split(cfg)?;
    let (xt, yt) = rows(&ds, &s.train);
    let m = &cfg.method;
    let trained = match m.name {
        Method::Contra | Method::Pcp => TrainedModel::Flow {
            model: train_flow(yt.view(), xt.view(), &flow_config(cfg, "flow"))?,
        },
        Method::Mcqr => TrainedModel::Quantiles {
            nets: train_quantile_nets(xt.view(), yt.view(), cfg.alpha, &quantile_config(cfg))?,
        },
        Method::Rcp => TrainedModel::Rcp {
            model: rcp_fit(xt.view(), yt.view(), &m.krr)?,
        },
        Method::ResContra => {
            let (d1, d2) = residual_rows(cfg, &s.train)?;
            let (x1, y1) = rows(&ds, &d1);
            let (x2, y2) = rows(&ds, &d2);
            let predictor = KernelRidge::fit(x1.view(), y1.view(), &m.krr)?;
            let r2 = residuals_of(&predictor, x2.view(), y2.view())?;
            let flow = train_flow(r2.view(), x2.view(), &flow_config(cfg, "residual-flow"))?;
            TrainedModel::Residual { predictor, flow }
        }
    };
    if let TrainedModel::Flow { model: flow } | TrainedModel::Residual { flow, .. } = &trained {
        write_loss_trace(&cfg.output("loss_trace.csv")?, &flow.meta.loss_trace)?;
    }
    let path = cfg.output("model.json")?;
    write_json(&path, &trained)?;
    Ok(path)
}

pub fn calibrate(cfg: &RunConfig, model_path: &Path) -> Result<PathBuf> {
    let trained: TrainedModel = read_json(model_path)?;
    let (ds, s) = load_split(cfg)?;
    let (xc, yc) = rows(&ds, &s.calibration);
    let alpha = cfg.alpha;
    let m = &cfg.method;
    let predictor = match (m.name, trained) {
        (Method::Contra, TrainedModel::Flow { model }) => {
            model.check_loaded()?;
            let p = ContraPredictor::calibrate(model, yc.view(), xc.view(), alpha)?;
            match p.diagnostics(DEFAULT_DISPERSION_FACTOR) {
                Ok(d) => {
                    if d.flag != Dispersion::Ok {
                        log::warn!("calibration latents look {:?} (median ratio {:.3})", d.flag, d.median_ratio);
                    }
                    write_json(&cfg.output("diagnostics.json")?, &d)?
                }
                Err(e) => log::warn!("latent diagnostics skipped: {e}"),
            }
            PredictorFile::Contra(p)
        }
        (Method::Pcp, TrainedModel::Flow { model }) => {
            model.check_loaded()?;
            let seed = derive_named(m.seed, "pcp");
            PredictorFile::Pcp(pcp_calibrate(model, xc.view(), yc.view(), m.pcp_samples, alpha, seed)?)
        }
        (Method::Rcp, TrainedModel::Rcp { model }) => PredictorFile::Rcp(rcp_calibrate(model, xc.view(), yc.view(), alpha)?),
        (Method::Mcqr, TrainedModel::Quantiles { nets }) => {
            let mc = McqrConfig {
                quantile: quantile_config(cfg),
                ..m.mcqr.clone()
            };
            PredictorFile::Mcqr(mcqr_calibrate_nets(nets, (xc.view(), yc.view()), alpha, &mc)?)
        }
        (Method::ResContra, TrainedModel::Residual { predictor, flow }) => {
            flow.check_loaded()?;
            let mut bundle = rescontra_calibrate(predictor, flow, (xc.view(), yc.view()), alpha)?;
            let (d1, d2) = residual_rows(cfg, &s.train)?;
            bundle.split = Some(ResContraSplit {
                predictor: d1,
                flow: d2,
                calibration: s.calibration.clone(),
            });
            PredictorFile::ResContra(bundle)
        }
        (name, _) => {
            return Err(Error::Config(format!(
                "{} does not hold a model for method {}",
                model_path.display(),
                name.label()
            )))
        }
    };
    let path = cfg.output("predictor.json")?;
    write_json(&path, &predictor)?;
    Ok(path)
}

/// Options for `predict`.
#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub x: Vec<Vec<f64>>,
    pub y: Option<Vec<Vec<f64>>>,
    pub out_dir: PathBuf,
    pub boundary_points: usize,
    pub volume_samples: usize,
    pub levels: Vec<f64>,
    pub scatter_samples: usize,
    pub seed: u64,
}

/// Rows of a headered numeric CSV with `cols` columns.
pub fn read_matrix(path: &Path, cols: usize) -> Result<Vec<Vec<f64>>> {
    let ds = read_csv(File::open(path)?, 0, cols, true)?;
    Ok(ds.y.rows().into_iter().map(|r| r.to_vec()).collect())
}

impl PredictorFile {
    pub fn input_dim(&self) -> usize {
        match self {
            PredictorFile::Contra(p) => p.model.p(),
            PredictorFile::ResContra(p) => p.flow.p(),
            PredictorFile::Pcp(p) => p.model.p(),
            PredictorFile::Rcp(p) => p.model.center.x_scaler.dim(),
            PredictorFile::Mcqr(p) => p.nets.lower[0].x_scaler.dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            PredictorFile::Contra(p) => p.model.q(),
            PredictorFile::ResContra(p) => p.flow.q(),
            PredictorFile::Pcp(p) => p.model.q(),
            PredictorFile::Rcp(p) => p.model.covariance.nrows(),
            PredictorFile::Mcqr(p) => p.nets.q(),
        }
    }

    pub fn contains(&self, x: &[f64], y: &[f64]) -> Result<bool> {
        match self {
            PredictorFile::Contra(p) => p.contains(x, y),
            PredictorFile::ResContra(p) => p.contains(x, y),
            PredictorFile::Pcp(p) => p.contains(x, y),
            PredictorFile::Rcp(p) => p.contains(x, y),
            PredictorFile::Mcqr(p) => Ok(p.region(x).contains(y)),
        }
    }
}

fn write_boundary(path: &Path, b: &RegionBoundary) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_boundary_csv(&mut f, b)?;
    f.flush()?;
    Ok(())
}

fn write_volume(path: &Path, x: &[f64], r: f64, alpha: f64, v: &VolumeEstimate, seed: u64) -> Result<()> {
    write_json(path, &VolumeRecord::new(x, r, alpha, v, seed))
}

/// Outlines of a CONTRA region at each requested coverage level.
fn level_outlines(p: &ContraPredictor, x: &[f64], levels: &[f64], m: usize, seed: u64) -> Result<Vec<(String, RegionBoundary)>> {
    let mut out = Vec::new();
    for &level in levels {
        let ball = p.ball_at(1.0 - level)?;
        if ball.radius == Threshold::Unbounded {
            log::warn!("coverage level {level} is unbounded with {} calibration rows; not drawn", p.calibration.n2());
            continue;
        }
        out.push((format!("{:.0}%", level * 100.0), region_boundary(&p.model, &ball, x, m, seed)?));
    }
    Ok(out)
}

fn write_svg(path: &Path, outlines: &[(String, RegionBoundary)], scatter: Option<ArrayView2<f64>>) -> Result<bool> {
    if outlines.is_empty() {
        return Ok(false);
    }
    let layers: Vec<SvgLayer> = outlines
        .iter()
        .map(|(label, boundary)| SvgLayer {
            label: label.clone(),
            boundary,
        })
        .collect();
    std::fs::write(path, region_svg(&layers, scatter)?)?;
    Ok(true)
}

#[derive(Debug, Serialize)]
struct RcpVolume<'a> {
    x: &'a [f64],
    center: Vec<f64>,
    threshold: Threshold,
    estimate: f64,
}

/// Writes per-input region artifacts into `opts.out_dir` and returns their paths.
pub fn predict(pred: &PredictorFile, opts: &PredictOptions) -> Result<Vec<PathBuf>> {
    let (p_dim, q_dim) = (pred.input_dim(), pred.output_dim());
    if let Some(x) = opts.x.iter().find(|x| x.len() != p_dim) {
        return Err(Error::shape("input width", p_dim, x.len()));
    }
    if let Some(ys) = &opts.y {
        if ys.len() != opts.x.len() {
            return Err(Error::shape("membership outputs", opts.x.len(), ys.len()));
        }
        if let Some(y) = ys.iter().find(|y| y.len() != q_dim) {
            return Err(Error::shape("output width", q_dim, y.len()));
        }
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let out = |name: String| opts.out_dir.join(name);
    let mut written = Vec::new();
    for (i, x) in opts.x.iter().enumerate() {
        let seed = derive(opts.seed, i as u64);
        match pred {
            PredictorFile::Contra(p) => {
                let Threshold::Bounded(r) = p.ball.radius else {
                    log::warn!("region at input {i} is the whole output space");
                    continue;
                };
                let path = out(format!("boundary_{i}.csv"));
                write_boundary(&path, &p.boundary(x, opts.boundary_points, seed)?)?;
                written.push(path);
                let path = out(format!("volume_{i}.json"));
                write_volume(&path, x, r, p.ball.alpha, &p.volume(x, opts.volume_samples, seed)?, seed)?;
                written.push(path);
                if q_dim == 2 {
                    let outlines = level_outlines(p, x, &opts.levels, opts.boundary_points, seed)?;
                    let scatter = match opts.scatter_samples {
                        0 => None,
                        n => Some(p.model.sample(x, n, derive_named(seed, "scatter"))?),
                    };
                    let path = out(format!("region_{i}.svg"));
                    if write_svg(&path, &outlines, scatter.as_ref().map(|s| s.view()))? {
                        written.push(path);
                    }
                }
            }
            PredictorFile::ResContra(p) => {
                let Threshold::Bounded(r) = p.ball.radius else {
                    log::warn!("region at input {i} is the whole output space");
                    continue;
                };
                let b = p.boundary(x, opts.boundary_points, seed)?;
                let path = out(format!("boundary_{i}.csv"));
                write_boundary(&path, &b)?;
                written.push(path);
                let path = out(format!("volume_{i}.json"));
                write_volume(&path, x, r, p.ball.alpha, &p.volume(x, opts.volume_samples, seed)?, seed)?;
                written.push(path);
                if q_dim == 2 {
                    let label = format!("{:.0}%", (1.0 - p.ball.alpha) * 100.0);
                    let path = out(format!("region_{i}.svg"));
                    write_svg(&path, &[(label, b)], None)?;
                    written.push(path);
                }
            }
            PredictorFile::Pcp(p) => {
                let Threshold::Bounded(s) = p.threshold else {
                    log::warn!("region at input {i} is the whole output space");
                    continue;
                };
                let path = out(format!("volume_{i}.json"));
                write_volume(&path, x, s, f64::NAN, &p.volume(x, opts.volume_samples, seed)?, seed)?;
                written.push(path);
            }
            PredictorFile::Rcp(p) => {
                let path = out(format!("volume_{i}.json"));
                let record = RcpVolume {
                    x,
                    center: p.center(x)?.to_vec(),
                    threshold: p.threshold,
                    estimate: p.volume(),
                };
                write_json(&path, &record)?;
                written.push(path);
            }
            PredictorFile::Mcqr(p) => {
                let path = out(format!("box_{i}.json"));
                write_json(&path, &p.region(x).to_json())?;
                written.push(path);
            }
        }
    }
    if let Some(ys) = &opts.y {
        let path = out("membership.csv".into());
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "index,contained")?;
        for (i, (x, y)) in opts.x.iter().zip(ys).enumerate() {
            writeln!(w, "{i},{}", pred.contains(x, y)?)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_predictor(path: &Path) -> Result<PredictorFile> {
    read_json(path)
}

pub fn diagnose(predictor_path: &Path, factor: f64) -> Result<LatentDiagnostics> {
    match load_predictor(predictor_path)? {
        PredictorFile::Contra(p) => p.diagnostics(factor),
        _ => Err(Error::Config("diagnose needs a CONTRA predictor file".into())),
    }
}

/// Runs the `[eval]` experiment on `[data]` if given, otherwise on the
/// experiment's own generator. Completed replications are written even when
/// a later one fails.
pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let ecfg: ExperimentConfig = cfg.eval.clone().ok_or_else(|| Error::Config("missing [eval] table".into()))?;
    let start = Instant::now();
    let ds = match &cfg.data {
        Some(d) => d.load()?,
        None => ecfg.generator.generate(ecfg.sizes.train + ecfg.sizes.calibration + ecfg.sizes.test, ecfg.data_seed)?,
    };
    let run = run_on_dataset(&ds, &ecfg)?;
    let report = MetricsReport::from_rows(ecfg, run.rows, start.elapsed().as_secs_f64());
    report.write_csv(&cfg.output("metrics.csv")?)?;
    report.write_json(&cfg.output("metrics.json")?)?;
    std::fs::write(cfg.output("table.txt")?, report.table())?;
    if let Some((rep, e)) = run.failure {
        log::error!("replication {rep} failed; completed rows are in {}", cfg.output_dir.display());
        return Err(e);
    }
    Ok(report)
}
