//! Toy bi-level experiment: the inner learner fits a diagonal Gaussian by
//! variational Bayes, the outer loop tunes per-dimension likelihood weights
//! for validation log-likelihood.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::data::{
    fmt_f64, gen_gaussian_toy, toy_train_variance, toy_val_variance, ToySizes, ToySplits,
};
use crate::models::{vb_fit_observed, DiagGaussian, MomentStats, VbSettings};
use crate::rng;
use crate::samplers::{tpe_suggest, SamplerState, TpeConfig, TrialRecord};
use crate::searchspace::{ParamDomain, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DidacticArm {
    /// One weight shared by every dimension.
    #[serde(rename = "global")]
    Global,
    /// One weight per dimension.
    #[serde(rename = "dimwise")]
    Dimwise,
    /// The per-dimension weights replaced by their arithmetic mean.
    #[serde(rename = "dimwise-averaged")]
    DimwiseAveraged,
}

impl DidacticArm {
    pub const ALL: [DidacticArm; 3] = [
        DidacticArm::Global,
        DidacticArm::Dimwise,
        DidacticArm::DimwiseAveraged,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DidacticArm::Global => "global",
            DidacticArm::Dimwise => "dimwise",
            DidacticArm::DimwiseAveraged => "dimwise-averaged",
        }
    }
}

impl fmt::Display for DidacticArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DidacticConfig {
    pub dim: usize,
    pub trials: usize,
    pub sizes: ToySizes,
    pub vb: VbSettings,
    /// Prior of every searched weight.
    pub weight_domain: ParamDomain,
    pub tpe: TpeConfig,
    /// Draw the test split from a third distribution instead of the
    /// validation distribution.
    pub distinct_test: bool,
    pub seed: u64,
}

impl Default for DidacticConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            trials: 300,
            sizes: ToySizes::default(),
            vb: VbSettings::default(),
            weight_domain: ParamDomain::LogUniform { lo: 1e-4, hi: 1e4 },
            tpe: TpeConfig::default(),
            distinct_test: false,
            seed: 0,
        }
    }
}

/// Summed per-dimension NLL after `step` updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllPoint {
    pub step: usize,
    /// On the training data.
    pub id_nll: f64,
    /// On the test data.
    pub ood_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: DidacticArm,
    /// Learned weights, one per dimension.
    pub weights: Vec<f64>,
    pub curve: Vec<NllPoint>,
    /// Validation NLL of the final fit.
    pub val_nll: f64,
}

impl ArmResult {
    pub fn final_point(&self) -> NllPoint {
        *self.curve.last().expect("curve includes step 0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DidacticResult {
    pub arms: Vec<ArmResult>,
    pub train_variance: Vec<f64>,
    pub val_variance: Vec<f64>,
}

impl DidacticResult {
    pub fn arm(&self, arm: DidacticArm) -> &ArmResult {
        self.arms
            .iter()
            .find(|a| a.arm == arm)
            .expect("every arm is run")
    }

    /// `arm,step,id_nll,ood_nll`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("arm,step,id_nll,ood_nll\n");
        for a in &self.arms {
            for p in &a.curve {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    a.arm,
                    p.step,
                    fmt_f64(p.id_nll),
                    fmt_f64(p.ood_nll)
                ));
            }
        }
        out
    }

    /// One row per dimension: `dim,train_var,val_var,<arm weights>`.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("dim,train_var,val_var");
        for a in &self.arms {
            out.push_str(&format!(",{}", a.arm));
        }
        out.push('\n');
        for i in 0..self.train_variance.len() {
            out.push_str(&format!(
                "{i},{},{}",
                fmt_f64(self.train_variance[i]),
                fmt_f64(self.val_variance[i])
            ));
            for a in &self.arms {
                out.push_str(&format!(",{}", fmt_f64(a.weights[i])));
            }
            out.push('\n');
        }
        out
    }
}

struct Problem {
    prior: DiagGaussian,
    train: MomentStats,
    val: MomentStats,
    test: MomentStats,
    vb: VbSettings,
}

impl Problem {
    fn fit(
        &self,
        weights: &[f64],
        mut observe: impl FnMut(usize, &DiagGaussian),
    ) -> Result<DiagGaussian, EngineError> {
        Ok(vb_fit_observed(
            &self.prior,
            &self.train,
            weights,
            self.vb,
            |s, q| observe(s, q),
        )?)
    }

    fn curve(&self, weights: &[f64]) -> Result<(Vec<NllPoint>, f64), EngineError> {
        let mut curve = Vec::with_capacity(self.vb.steps + 1);
        let q = self.fit(weights, |step, q| {
            curve.push(NllPoint {
                step,
                id_nll: self.train.nll_all(q).iter().sum(),
                ood_nll: self.test.nll_all(q).iter().sum(),
            })
        })?;
        Ok((curve, self.val.nll_all(&q).iter().sum()))
    }
}

fn weight_space(names: &[String], domain: ParamDomain) -> Result<SearchSpace, EngineError> {
    Ok(SearchSpace::from_dims(
        names.iter().map(|n| (n.as_str(), domain)),
    )?)
}

/// TPE over the weights named in `space`, maximizing validation
/// log-likelihood; returns the best assignment expanded to `d` weights.
fn search(
    problem: &Problem,
    cfg: &DidacticConfig,
    space: &SearchSpace,
    arm: u64,
) -> Result<Vec<f64>, EngineError> {
    let d = cfg.dim;
    let expand = |a: &crate::searchspace::ParamAssignment| -> Vec<f64> {
        let v: Vec<f64> = a.iter().map(|(_, v)| v).collect();
        if v.len() == 1 {
            vec![v[0]; d]
        } else {
            v
        }
    };
    let mut state = SamplerState::new();
    for t in 0..cfg.trials {
        let seed = rng::mix(&[cfg.seed, arm, t as u64]);
        let a = tpe_suggest(state.history(), space, &cfg.tpe, seed)?;
        let q = problem.fit(&expand(&a), |_, _| {})?;
        let val_nll: f64 = problem.val.nll_all(&q).iter().sum();
        let record = if val_nll.is_finite() {
            TrialRecord::completed(t, a, -val_nll, seed)
        } else {
            TrialRecord::failed(t, a, seed, "non-finite validation likelihood")
        };
        state.observe(record)?;
    }
    Ok(match state.best() {
        Some(best) => expand(&best.assignment),
        None => vec![0.0; d],
    })
}

/// Runs the three arms on one draw of the toy data. With zero trials every
/// weight is zero and every arm stays at the prior.
pub fn didactic_run(cfg: &DidacticConfig) -> Result<DidacticResult, EngineError> {
    let ToySplits { train, val, test } =
        gen_gaussian_toy(cfg.dim, cfg.sizes, cfg.seed, cfg.distinct_test)?;
    let problem = Problem {
        prior: DiagGaussian::standard(cfg.dim),
        train: MomentStats::from_matrix(&train)?,
        val: MomentStats::from_matrix(&val)?,
        test: MomentStats::from_matrix(&test)?,
        vb: cfg.vb,
    };
    let global_space = weight_space(&["w".to_string()], cfg.weight_domain)?;
    let dim_names: Vec<String> = (0..cfg.dim).map(|i| format!("w_{i}")).collect();
    let dim_space = weight_space(&dim_names, cfg.weight_domain)?;

    let global = search(&problem, cfg, &global_space, 0)?;
    let dimwise = search(&problem, cfg, &dim_space, 1)?;
    let mean = dimwise.iter().sum::<f64>() / cfg.dim as f64;
    let averaged = vec![mean; cfg.dim];

    let mut arms = Vec::with_capacity(3);
    for (arm, weights) in [
        (DidacticArm::Global, global),
        (DidacticArm::Dimwise, dimwise),
        (DidacticArm::DimwiseAveraged, averaged),
    ] {
        let (curve, val_nll) = problem.curve(&weights)?;
        arms.push(ArmResult {
            arm,
            weights,
            curve,
            val_nll,
        });
    }
    Ok(DidacticResult {
        arms,
        train_variance: (0..cfg.dim).map(toy_train_variance).collect(),
        val_variance: (0..cfg.dim).map(toy_val_variance).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(trials: usize, seed: u64) -> DidacticConfig {
        DidacticConfig {
            trials,
            seed,
            ..DidacticConfig::default()
        }
    }

    #[test]
    fn zero_trials_keep_every_arm_at_the_prior() {
        let r = didactic_run(&quick(0, 1)).unwrap();
        let start = r.arms[0].curve[0];
        for a in &r.arms {
            assert!(a.weights.iter().all(|w| *w == 0.0));
            for p in &a.curve {
                assert_eq!((p.id_nll, p.ood_nll), (start.id_nll, start.ood_nll));
            }
        }
    }

    #[test]
    fn output_tables_have_the_expected_shape() {
        let r = didactic_run(&quick(5, 2)).unwrap();
        let names: Vec<&str> = r.arms.iter().map(|a| a.arm.name()).collect();
        assert_eq!(names, ["global", "dimwise", "dimwise-averaged"]);
        assert_eq!(r.weights_csv().lines().count(), 1 + 10);
        assert_eq!(r.curves_csv().lines().count(), 1 + 3 * 301);
        assert!(r
            .arm(DidacticArm::Global)
            .weights
            .windows(2)
            .all(|w| w[0] == w[1]));
    }

    #[test]
    fn run_is_deterministic() {
        assert_eq!(
            didactic_run(&quick(20, 3)).unwrap(),
            didactic_run(&quick(20, 3)).unwrap()
        );
    }

    #[test]
    fn dimension_where_only_training_data_leaves_the_prior_gets_a_small_weight() {
        let r = didactic_run(&quick(150, 4)).unwrap();
        let w = &r.arm(DidacticArm::Dimwise).weights;
        // dims 0..3 match validation in training data: large weights pay off
        for i in 0..3 {
            assert!(w[3] < w[i], "{w:?}");
        }
        assert!(
            r.arm(DidacticArm::Dimwise).final_point().ood_nll
                < r.arm(DidacticArm::DimwiseAveraged).final_point().ood_nll
        );
    }
}
