//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

mod common;

use std::time::Instant;

use common::{jacobian, log_abs_det, random_flow, ScorePipelines};
use contra::baselines::{pcp_calibrate, rcp_calibrate, rcp_fit, RcpModel, RcpPredictor};
use contra::conformal::{conformal_radius, contains_batch, ContraPredictor, LatentCalibration, Threshold};
use contra::data::Generator;
use contra::eval::{coverage_bound_trial, run_experiment, run_on_dataset, ExperimentConfig, Method, Sizes};
use contra::flow::{gaussian_matrix, train_flow, CouplingLayer, FlowConfig, FlowModel};
use contra::geometry::{ball_volume, hit_or_miss, Raster};
use contra::mcqr::{box_volume, mcqr_fit, train_quantile_nets, McqrConfig, QuantileConfig};
use contra::rescontra::{rescontra_fit, ConstantPredictor, KernelRidgeConfig, ResContraSplit};
use contra::rng::{derive, rng};
use contra::Result;
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

type Outcome = Result<(bool, String)>;

fn mixture_desk_flow() -> FlowConfig {
    FlowConfig {
        seed: 17,
        ..FlowConfig::default()
    }
}

/// 1. Coverage equals k/(n2+1) for every score pipeline.
fn coverage_oracle() -> Outcome {
    let pipes = ScorePipelines::fit(1);
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, method) in Method::ALL.into_iter().enumerate() {
        let t = coverage_bound_trial(99, 0.1, 20_000, derive(1, i as u64), |r, m| pipes.scores(method, r, m))?;
        ok &= t.expected == 0.9 && t.within(3.0);
        parts.push(format!("{method} {:.4}±{:.4}", t.mean, t.se));
    }
    Ok((ok, parts.join(", ")))
}

/// 2. Desk-scale mixture comparison.
fn mixture_desk() -> Outcome {
    let cfg = ExperimentConfig::default();
    let report = run_experiment(&cfg)?;
    let get = |m| report.method(m).expect("method in report");
    let (c, mc, rc) = (get(Method::Contra), get(Method::Mcqr), get(Method::Rcp));
    let ok = (0.88..=0.93).contains(&c.coverage_mean) && c.volume_mean < mc.volume_mean && c.volume_mean < rc.volume_mean;
    let line = report
        .summary
        .iter()
        .map(|s| format!("{} cov {:.3} vol {:.2}({:.2})", s.method, s.coverage_mean, s.volume_mean, s.volume_se))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, line))
}

/// 3. Inverse/forward agreement, log-determinants and NLL gradients.
fn flow_numerics() -> Outcome {
    let ds = Generator::Spiral { sd1: 0.2, sd2: 0.1 }.generate(600, 3)?;
    let cfg = FlowConfig {
        layers: 10,
        hidden: vec![32, 32],
        epochs: 20,
        seed: 4,
        ..FlowConfig::default()
    };
    let flow = train_flow(ds.y.view(), ds.x.view(), &cfg)?;
    let z = gaussian_matrix(1000, 2, 5);
    let x = gaussian_matrix(1000, 2, 6);
    let (y, _) = flow.forward_batch(z.view(), x.view())?;
    let (back, _) = flow.inverse_batch(y.view(), x.view())?;
    let roundtrip = (&back - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut logdet_err = 0.0f64;
    for q in [2, 3] {
        let f = random_flow(q, 2, 6, 40 + q as u64, 0.3);
        for i in 0..20 {
            let zi = gaussian_matrix(1, q, 50 + i).row(0).to_vec();
            let xi = gaussian_matrix(1, 2, 70 + i).row(0).to_vec();
            let (_, ld) = f.forward_with_logdet(&zi, &xi)?;
            let numeric = log_abs_det(jacobian(|v| f.forward(v, &xi).unwrap(), &zi, 1e-5));
            logdet_err = logdet_err.max((ld - numeric).abs() / ld.abs().max(1.0));
        }
    }

    let small = random_flow(2, 2, 4, 8, 0.3);
    let yb = gaussian_matrix(32, 2, 9);
    let xb = gaussian_matrix(32, 2, 10);
    let (_, grads) = small.nll_grad(yb.view(), xb.view())?;
    let analytic: Vec<f64> = grads.slices().concat();
    let base: Vec<f64> = small.param_slices().concat();
    let h = 1e-6;
    let mut grad_err = 0.0f64;
    for k in (0..base.len()).step_by(5) {
        let shifted = |d: f64| -> Result<f64> {
            let mut m = small.clone();
            set_param(&mut m, k, base[k] + d);
            m.nll(yb.view(), xb.view())
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        grad_err = grad_err.max((analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-3));
    }
    let ok = roundtrip < 1e-9 && logdet_err < 1e-5 && grad_err < 1e-4;
    Ok((ok, format!("roundtrip {roundtrip:.2e}, logdet rel {logdet_err:.2e}, grad rel {grad_err:.2e}")))
}

fn set_param(flow: &mut FlowModel, mut k: usize, v: f64) {
    for s in flow.param_slices_mut() {
        if k < s.len() {
            s[k] = v;
            return;
        }
        k -= s.len();
    }
}

fn identity_flow(q: usize) -> FlowModel {
    FlowModel::new(q, 1, &FlowConfig::default(), &mut rng(0)).unwrap()
}

fn fixed_ball(q: usize, r: f64) -> contra::conformal::ConformalBall {
    let cal = LatentCalibration::from_latents(Array2::from_elem((9, q), r / (q as f64).sqrt()));
    conformal_radius(&cal, 0.1).unwrap()
}

/// 4. Volume oracles.
fn volume_oracles() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let x = [0.3];
    let xrow = Array2::from_elem((1, 1), 0.3);
    for q in [2, 3, 4] {
        let r = 1.7;
        let flow = identity_flow(q);
        let ball = fixed_ball(q, r);
        let truth = ball_volume(q, r);
        let v = contra::conformal::region_volume(&flow, &ball, &x, 10_000, 1)?;
        let lo = vec![-r; q];
        let hi = vec![r; q];
        let mc = hit_or_miss(&lo, &hi, 200_000, 2 + q as u64, |p| contains_batch(&flow, &ball, p, xrow.view()))?;
        let exact = (v.estimate - truth).abs() <= 1e-12 * truth || v.within(truth, 3.0);
        ok &= exact && mc.within(truth, 3.0);
        parts.push(format!("q{q} {:.4}/{:.4} mc {:.3}±{:.3}", v.estimate, truth, mc.estimate, mc.std_error));
    }

    // constant-scale flow: y = diag(e^a) z + b
    let (a, b) = ([0.4, -0.9], [1.0, -2.0]);
    let l0 = CouplingLayer::constant(vec![0], vec![1], 1, &[a[1]], &[b[1]])?;
    let l1 = CouplingLayer::constant(vec![1], vec![0], 1, &[a[0]], &[b[0]])?;
    let flow = FlowModel::from_layers(2, 1, vec![l0, l1])?;
    let r = 2.0;
    let ball = fixed_ball(2, r);
    let truth = (a[0] + a[1]).exp() * ball_volume(2, r);
    let v = contra::conformal::region_volume(&flow, &ball, &x, 10_000, 3)?;
    let lo = [b[0] - r * a[0].exp(), b[1] - r * a[1].exp()];
    let hi = [b[0] + r * a[0].exp(), b[1] + r * a[1].exp()];
    let mc = hit_or_miss(&lo, &hi, 200_000, 4, |p| contains_batch(&flow, &ball, p, xrow.view()))?;
    let exact = (v.estimate - truth).abs() <= 1e-12 * truth || v.within(truth, 3.0);
    ok &= exact && mc.within(truth, 3.0);
    parts.push(format!("scaled {:.4}/{:.4} mc {:.3}±{:.3}", v.estimate, truth, mc.estimate, mc.std_error));

    // RCP ellipsoid
    let cov = ndarray::array![[2.0, 0.6, 0.1], [0.6, 1.0, -0.3], [0.1, -0.3, 0.5]];
    let model = RcpModel::new(ConstantPredictor { value: vec![1.0, 0.0, -1.0] }, cov)?;
    let pred = RcpPredictor {
        model,
        threshold: Threshold::Bounded(1.5),
    };
    let closed = pred.volume();
    let mc = pred.volume_mc(&[0.0], 200_000, 5)?;
    ok &= mc.within(closed, 3.0);
    parts.push(format!("rcp {closed:.4} mc {:.3}±{:.3}", mc.estimate, mc.std_error));
    Ok((ok, parts.join(", ")))
}

/// 5. MCQR box membership agrees with the score rule.
fn mcqr_equivalence() -> Outcome {
    let ds = Generator::Mixture.generate(2000, 11)?;
    let cfg = McqrConfig {
        quantile: QuantileConfig {
            hidden: vec![32],
            epochs: 30,
            seed: 12,
            ..QuantileConfig::default()
        },
        ..McqrConfig::default()
    };
    let (a, b) = (ds.x.slice(s![..1000, ..]), ds.y.slice(s![..1000, ..]));
    let (c, d) = (ds.x.slice(s![1000.., ..]), ds.y.slice(s![1000.., ..]));
    let pred = mcqr_fit((a, b), (c, d), 0.1, &cfg)?;
    let mut r = rng(13);
    let mut disagreements = 0;
    let mut volume_mismatch = 0;
    for _ in 0..10_000 {
        let x = [r.random_range(-8.0..8.0), r.random_range(-8.0..8.0)];
        let y = [r.random_range(-30.0..30.0), r.random_range(-30.0..30.0)];
        let region = pred.region(&x);
        let by_score = match pred.threshold {
            Threshold::Bounded(t) => pred.score(&x, &y) <= t,
            Threshold::Unbounded => true,
        };
        if region.contains(&y) != by_score {
            disagreements += 1;
        }
        let product: f64 = region.lower.iter().zip(&region.upper).map(|(l, u)| u - l).product();
        if !region.empty && box_volume(&region) != product {
            volume_mismatch += 1;
        }
    }
    Ok((
        disagreements == 0 && volume_mismatch == 0,
        format!("{disagreements} disagreements, {volume_mismatch} volume mismatches over 10000 points"),
    ))
}

fn bounding_box(points: ArrayView2<f64>, margin: f64) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points.rows() {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    for c in 0..2 {
        let w = hi[c] - lo[c];
        lo[c] -= margin * w;
        hi[c] += margin * w;
    }
    (lo, hi)
}

/// Trained mixture CONTRA and PCP predictors plus three test inputs.
struct MixtureFit {
    contra: ContraPredictor,
    pcp: contra::baselines::PcpPredictor,
    test_x: Vec<Vec<f64>>,
}

fn mixture_fit() -> Result<MixtureFit> {
    let ds = Generator::Mixture.generate(5000, 21)?;
    let (xt, yt) = (ds.x.slice(s![..3375, ..]), ds.y.slice(s![..3375, ..]));
    let (xc, yc) = (ds.x.slice(s![3375..4500, ..]), ds.y.slice(s![3375..4500, ..]));
    let flow = train_flow(yt, xt, &mixture_desk_flow())?;
    let contra = ContraPredictor::calibrate(flow.clone(), yc, xc, 0.1)?;
    let pcp = pcp_calibrate(flow, xc, yc, 40, 0.1, 22)?;
    let mut r = rng(23);
    let test_x = (0..3).map(|_| ds.x.row(r.random_range(4500..5000)).to_vec()).collect();
    Ok(MixtureFit { contra, pcp, test_x })
}

/// 6. The 90% CONTRA region is connected.
fn connectedness(fit: &MixtureFit) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, x) in fit.test_x.iter().enumerate() {
        let b = fit.contra.boundary(x, 512, 0)?;
        let (lo, hi) = bounding_box(b.points.view(), 0.05);
        let xrow = Array2::from_shape_vec((1, 2), x.clone()).unwrap();
        let raster = Raster::build(lo, hi, 300, 300, |p| fit.contra.contains_batch(p, xrow.view()))?;
        let components = raster.count_components();
        let samples = fit.pcp.samples(x)?;
        let (plo, phi) = bounding_box(samples.view(), 0.3);
        let pcp_raster = Raster::build(plo, phi, 300, 300, |p| fit.pcp.contains_at(x, p))?;
        ok &= components == 1 && raster.filled() > 0;
        parts.push(format!("x{i}: CONTRA {components}, PCP {}", pcp_raster.count_components()));
    }
    Ok((ok, parts.join(", ")))
}

/// 7. Boundary points lie on the latent sphere of radius r.
fn boundary_property(fit: &MixtureFit) -> Outcome {
    let r = fit.contra.ball.bounded_radius("boundary check")?;
    let mut worst = 0.0f64;
    for (i, x) in fit.test_x.iter().enumerate() {
        let b = fit.contra.boundary(x, 256, i as u64)?;
        let xrow = Array2::from_shape_vec((1, 2), x.clone()).unwrap();
        let (z, _) = fit.contra.model.inverse_batch(b.points.view(), xrow.view())?;
        for row in z.rows() {
            worst = worst.max((row.dot(&row).sqrt() - r).abs());
        }
    }
    Ok((worst < 1e-6, format!("max |‖z‖ − r| = {worst:.2e} over 768 points")))
}

/// 8. A flow fit to standard normal outputs recovers the χ₂ 90% radius.
fn chi_radius() -> Outcome {
    let (n, n2) = (3000, 1000);
    let x = gaussian_matrix(n + n2, 1, 31);
    let y = gaussian_matrix(n + n2, 2, 32);
    let cfg = FlowConfig {
        layers: 4,
        hidden: vec![32, 32],
        epochs: 50,
        seed: 33,
        ..FlowConfig::default()
    };
    let flow = train_flow(y.slice(s![..n, ..]), x.slice(s![..n, ..]), &cfg)?;
    let p = ContraPredictor::calibrate(flow, y.slice(s![n.., ..]), x.slice(s![n.., ..]), 0.1)?;
    let r = p.ball.bounded_radius("χ₂ check")?;
    let rel = (r - 2.1460).abs() / 2.1460;
    Ok((rel < 0.05, format!("radius {r:.4} (rel err {rel:.3})")))
}

/// Every numeric output of one small end-to-end run, serialized.
fn pipeline_fingerprint(seed: u64) -> Result<String> {
    let ds = Generator::Mixture.generate(700, seed)?;
    let flow_cfg = FlowConfig {
        layers: 3,
        hidden: vec![16],
        epochs: 5,
        seed: derive(seed, 1),
        ..FlowConfig::default()
    };
    let (xt, yt) = (ds.x.slice(s![..400, ..]), ds.y.slice(s![..400, ..]));
    let (xc, yc) = (ds.x.slice(s![400..600, ..]), ds.y.slice(s![400..600, ..]));
    let flow = train_flow(yt, xt, &flow_cfg)?;
    let contra = ContraPredictor::calibrate(flow.clone(), yc, xc, 0.1)?;
    let x0 = ds.x.row(650).to_vec();
    let boundary = contra.boundary(&x0, 64, seed)?;
    let volume = contra.volume(&x0, 500, seed)?;
    let pcp = pcp_calibrate(flow, xc, yc, 10, 0.1, derive(seed, 2))?;
    let pcp_volume = pcp.volume(&x0, 500, seed)?;
    let krr = KernelRidgeConfig::default();
    let rcp = rcp_calibrate(rcp_fit(xt, yt, &krr)?, xc, yc, 0.1)?;
    let q = QuantileConfig {
        hidden: vec![8],
        epochs: 5,
        seed: derive(seed, 3),
        ..QuantileConfig::default()
    };
    let nets = train_quantile_nets(xt, yt, 0.1, &q)?;
    let mcqr = mcqr_fit(
        (xt, yt),
        (xc, yc),
        0.1,
        &McqrConfig {
            quantile: q,
            ..McqrConfig::default()
        },
    )?;
    let split = ResContraSplit {
        predictor: (0..200).collect(),
        flow: (200..400).collect(),
        calibration: (400..600).collect(),
    };
    let res = rescontra_fit(ds.x.view(), ds.y.view(), split, 0.1, &krr, &flow_cfg)?;
    let exp = ExperimentConfig {
        sizes: Sizes {
            train: 300,
            calibration: 200,
            test: 100,
        },
        methods: Method::ALL.to_vec(),
        replications: 2,
        seed,
        flow: flow_cfg.clone(),
        residual_flow: flow_cfg,
        mcqr: McqrConfig {
            quantile: QuantileConfig {
                hidden: vec![8],
                epochs: 3,
                ..QuantileConfig::default()
            },
            ..McqrConfig::default()
        },
        pcp_samples: 10,
        volume_samples: 200,
        ..ExperimentConfig::default()
    };
    let mut rows = run_on_dataset(&ds, &exp)?.rows;
    for r in &mut rows {
        r.seconds = 0.0;
    }
    let all = serde_json::json!({
        "data": ds.y.as_slice(),
        "contra": contra,
        "boundary": boundary,
        "volume": volume,
        "pcp": pcp,
        "pcp_volume": pcp_volume,
        "rcp": rcp,
        "nets": nets,
        "mcqr": mcqr,
        "rescontra": res,
        "rows": rows,
    });
    Ok(serde_json::to_string(&all)?)
}

/// 9. Same seed, same bits.
fn determinism() -> Outcome {
    let a = pipeline_fingerprint(41)?;
    let b = pipeline_fingerprint(41)?;
    let c = pipeline_fingerprint(42)?;
    Ok((a == b && a != c, format!("{} bytes compared; a different seed differs: {}", a.len(), a != c)))
}

fn main() {
    // `cargo test -- <filter>` passes the filter here; run everything only
    // when no filter excludes this target.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok((true, detail)) => println!("PASS [{n}] {name} ({secs:.1}s): {detail}"),
            Ok((false, detail)) => {
                failed += 1;
                println!("FAIL [{n}] {name} ({secs:.1}s): {detail}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL [{n}] {name} ({secs:.1}s): error: {e}");
            }
        }
    };
    let t = Instant::now();
    report(1, "exchangeability coverage oracle", t, coverage_oracle());
    let t = Instant::now();
    report(2, "mixture desk-scale comparison", t, mixture_desk());
    let t = Instant::now();
    report(3, "flow numerics", t, flow_numerics());
    let t = Instant::now();
    report(4, "volume oracles", t, volume_oracles());
    let t = Instant::now();
    report(5, "MCQR membership equivalence", t, mcqr_equivalence());
    let t = Instant::now();
    match mixture_fit() {
        Ok(fit) => {
            report(6, "connected CONTRA regions", t, connectedness(&fit));
            let t = Instant::now();
            report(7, "boundary on the latent sphere", t, boundary_property(&fit));
        }
        Err(e) => {
            let msg = e.to_string();
            report(6, "connected CONTRA regions", t, Err(contra::Error::Config(msg.clone())));
            report(7, "boundary on the latent sphere", t, Err(contra::Error::Config(msg)));
        }
    }
    let t = Instant::now();
    report(8, "χ₂ calibration radius", t, chi_radius());
    let t = Instant::now();
    report(9, "bit-identical determinism", t, determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
