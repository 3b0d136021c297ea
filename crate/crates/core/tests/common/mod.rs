#![allow(dead_code)]

use contra::flow::{FlowConfig, FlowModel};
use contra::rng::rng;
use nalgebra::DMatrix;

/// An untrained flow with random conditioner outputs of size `scale`.
pub fn random_flow(q: usize, p: usize, layers: usize, seed: u64, scale: f64) -> FlowModel {
    let cfg = FlowConfig {
        layers,
        hidden: vec![16, 16],
        ..FlowConfig::default()
    };
    FlowModel::randomized(q, p, &cfg, &mut rng(seed), scale).unwrap()
}

/// Central-difference Jacobian of `f` at `v`, one row per output.
pub fn jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, v: &[f64], h: f64) -> DMatrix<f64> {
    let n = v.len();
    let m = f(v).len();
    let mut j = DMatrix::zeros(m, n);
    for c in 0..n {
        let mut up = v.to_vec();
        let mut dn = v.to_vec();
        up[c] += h;
        dn[c] -= h;
        let (a, b) = (f(&up), f(&dn));
        for r in 0..m {
            j[(r, c)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    j
}

pub fn log_abs_det(j: DMatrix<f64>) -> f64 {
    j.determinant().abs().ln()
}

/// Largest relative gap between an analytic and a finite-difference
/// gradient, with an absolute floor for near-zero entries.
pub fn max_rel_gap(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

use contra::baselines::{pcp_scores, rcp_fit, RcpModel};
use contra::conformal::latent_norms;
use contra::data::Generator;
use contra::eval::Method;
use contra::flow::train_flow;
use contra::mcqr::{mcqr_scores, train_quantile_nets, QuantileConfig, QuantilePair, WeightVector};
use contra::rescontra::{residuals_of, KernelRidge, KernelRidgeConfig};
use contra::rng::{derive, SeededRng};
use contra::Result;
use rand::Rng;

/// Small fitted models for every method. Scores computed with them on
/// fresh draws are exchangeable, which is all the coverage bound needs.
pub struct ScorePipelines {
    pub generator: Generator,
    pub flow: FlowModel,
    pub residual_predictor: KernelRidge,
    pub residual_flow: FlowModel,
    pub rcp: RcpModel,
    pub nets: QuantilePair,
    pub weights: WeightVector,
    pub pcp_k: usize,
    pub pcp_seed: u64,
}

impl ScorePipelines {
    pub fn fit(seed: u64) -> Self {
        let generator = Generator::Mixture;
        let ds = generator.generate(400, seed).unwrap();
        let flow_cfg = FlowConfig {
            layers: 2,
            hidden: vec![16],
            epochs: 20,
            batch_size: 100,
            seed: derive(seed, 1),
            ..FlowConfig::default()
        };
        let flow = train_flow(ds.y.view(), ds.x.view(), &flow_cfg).unwrap();
        let krr = KernelRidgeConfig::default();
        let residual_predictor = KernelRidge::fit(ds.x.view(), ds.y.view(), &krr).unwrap();
        let r = residuals_of(&residual_predictor, ds.x.view(), ds.y.view()).unwrap();
        let residual_flow = train_flow(r.view(), ds.x.view(), &FlowConfig { seed: derive(seed, 2), ..flow_cfg }).unwrap();
        let rcp = rcp_fit(ds.x.view(), ds.y.view(), &krr).unwrap();
        let qcfg = QuantileConfig {
            hidden: vec![16],
            epochs: 20,
            seed: derive(seed, 3),
            ..QuantileConfig::default()
        };
        let nets = train_quantile_nets(ds.x.view(), ds.y.view(), 0.1, &qcfg).unwrap();
        ScorePipelines {
            generator,
            flow,
            residual_predictor,
            residual_flow,
            rcp,
            nets,
            weights: WeightVector {
                lower: vec![1.0, 0.7],
                upper: vec![1.3, 1.0],
            },
            pcp_k: 40,
            pcp_seed: derive(seed, 4),
        }
    }

    /// `m` fresh i.i.d. conformity scores for `method`.
    pub fn scores(&self, method: Method, r: &mut SeededRng, m: usize) -> Result<Vec<f64>> {
        let ds = self.generator.generate(m, r.random())?;
        let (x, y) = (ds.x.view(), ds.y.view());
        Ok(match method {
            Method::Contra => latent_norms(&self.flow, y, x)?.to_vec(),
            Method::ResContra => {
                let res = residuals_of(&self.residual_predictor, x, y)?;
                latent_norms(&self.residual_flow, res.view(), x)?.to_vec()
            }
            Method::Pcp => pcp_scores(&self.flow, x, y, self.pcp_k, self.pcp_seed)?,
            Method::Rcp => self.rcp.scores(x, y)?,
            Method::Mcqr => mcqr_scores(&self.nets.predict(x), y, &self.weights),
        })
    }
}
