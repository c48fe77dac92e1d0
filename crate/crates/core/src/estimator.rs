//! IP estimators: anything that turns a top-k MIP condition stack into an
//! estimate of the vessel integral projections.
//!
//! The trained generative model is not part of this crate. Its place is
//! taken by the [`IpEstimator`] trait and the baselines below, which are
//! chosen at run time through spec strings of the form
//! `name(:key=value(,key=value)*)?`:
//!
//! | spec | estimator |
//! |------|-----------|
//! | `oracle:gt=PATH` | [`OracleEstimator`] |
//! | `noisy-oracle:sigma=S,seed=N,gt=PATH` | [`NoisyOracleEstimator`], absolute σ |
//! | `noisy-oracle:sigma_rel=F,seed=N,gt=PATH` | σ = F · max of the ground truth |
//! | `topk-sum` / `topk-sum:alpha=A` | [`TopKSumEstimator`] |
//!
//! `gt` paths are resolved by the caller; this module only parses them.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::reconstruction::dot;
use crate::rng::{standard_normal, substream};
use crate::{Error, ProjectionStack, Result, TopKStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    /// Same inputs and parameters give bit-identical outputs.
    pub deterministic: bool,
    /// Needs the ground-truth stack as context.
    pub requires_ground_truth: bool,
    /// Each view's output depends only on that view's condition.
    pub view_independent: bool,
}

pub trait IpEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    /// Output matches `cond`'s geometry and is non-negative.
    fn estimate(&self, cond: &TopKStack, ctx: Option<&ProjectionStack>) -> Result<ProjectionStack>;
}

fn ground_truth<'a>(cond: &TopKStack, ctx: Option<&'a ProjectionStack>) -> Result<&'a ProjectionStack> {
    let gt = ctx.ok_or_else(|| Error::Estimator("estimator needs a ground-truth stack".into()))?;
    let g = cond.geometry();
    if gt.n_views() != g.n_views || gt.nu() != g.nu() || gt.nv() != g.nv() {
        return Err(Error::ShapeMismatch(format!(
            "ground truth is {}x{}x{}, condition is {}x{}x{}",
            gt.n_views(),
            gt.nv(),
            gt.nu(),
            g.n_views,
            g.nv(),
            g.nu()
        )));
    }
    Ok(gt)
}

/// Returns the ground truth unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEstimator;

impl IpEstimator for OracleEstimator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { deterministic: true, requires_ground_truth: true, view_independent: true }
    }

    fn estimate(&self, cond: &TopKStack, ctx: Option<&ProjectionStack>) -> Result<ProjectionStack> {
        Ok(ground_truth(cond, ctx)?.clone())
    }
}

/// Ground truth plus Gaussian noise, clipped at zero. The standard
/// deviation is `sigma`, or `sigma` times the ground-truth maximum when
/// `relative` is set.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracleEstimator {
    pub sigma: f64,
    pub seed: u64,
    pub relative: bool,
}

impl NoisyOracleEstimator {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be finite and non-negative, got {sigma}")));
        }
        Ok(Self { sigma, seed, relative: false })
    }

    pub fn relative(fraction: f64, seed: u64) -> Result<Self> {
        Ok(Self { relative: true, ..Self::new(fraction, seed)? })
    }

    /// Absolute standard deviation applied to `gt`.
    pub fn sigma_for(&self, gt: &ProjectionStack) -> f64 {
        if self.relative {
            self.sigma * gt.max_value() as f64
        } else {
            self.sigma
        }
    }
}

impl IpEstimator for NoisyOracleEstimator {
    fn name(&self) -> &str {
        "noisy-oracle"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { deterministic: true, requires_ground_truth: true, view_independent: true }
    }

    fn estimate(&self, cond: &TopKStack, ctx: Option<&ProjectionStack>) -> Result<ProjectionStack> {
        let gt = ground_truth(cond, ctx)?;
        let sigma = self.sigma_for(gt);
        if sigma == 0.0 {
            return Ok(gt.clone());
        }
        let mut rng = substream(self.seed, 2);
        let data = gt.data().iter().map(|&x| (x as f64 + sigma * standard_normal(&mut rng)).max(0.0) as f32).collect();
        ProjectionStack::new(gt.geometry().clone(), data)
    }
}

/// `alpha` times the sum of the top-k channels at each pixel.
#[derive(Debug, Clone, Copy)]
pub struct TopKSumEstimator {
    pub alpha: f64,
}

impl Default for TopKSumEstimator {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl TopKSumEstimator {
    /// Least-squares `alpha` for `cond` against `target`; 1 when the channel sum is zero.
    pub fn fit(cond: &TopKStack, target: &ProjectionStack) -> Result<Self> {
        let gt = ground_truth(cond, Some(target))?;
        let s: Vec<f64> = cond.channel_sum().data().iter().map(|&x| x as f64).collect();
        let t: Vec<f64> = gt.data().iter().map(|&x| x as f64).collect();
        let ss = dot(&s, &s);
        let alpha = if ss > 0.0 { dot(&s, &t) / ss } else { 1.0 };
        Ok(Self { alpha: alpha.max(0.0) })
    }
}

impl IpEstimator for TopKSumEstimator {
    fn name(&self) -> &str {
        "topk-sum"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { deterministic: true, requires_ground_truth: false, view_independent: true }
    }

    fn estimate(&self, cond: &TopKStack, _ctx: Option<&ProjectionStack>) -> Result<ProjectionStack> {
        let mut out = cond.channel_sum();
        let a = self.alpha.max(0.0);
        for x in out.data_mut() {
            *x = (a * *x as f64) as f32;
        }
        Ok(out)
    }
}

/// Parsed `name:key=value,...` spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub name: String,
    pub params: Vec<(String, String)>,
}

impl EstimatorSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |m: String| Error::Estimator(m);
        let (name, rest) = match spec.split_once(':') {
            Some((n, r)) => (n.trim(), Some(r)),
            None => (spec.trim(), None),
        };
        if name.is_empty() {
            return Err(bad(format!("empty estimator name in {spec:?}")));
        }
        let mut params: Vec<(String, String)> = Vec::new();
        if let Some(rest) = rest {
            for kv in rest.split(',') {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
                let k = k.trim();
                if k.is_empty() {
                    return Err(bad(format!("empty key in {spec:?}")));
                }
                if params.iter().any(|(p, _)| p == k) {
                    return Err(bad(format!("duplicate key {k:?}")));
                }
                params.push((k.to_owned(), v.trim().to_owned()));
            }
        }
        Ok(Self { name: name.to_owned(), params })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.params.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::Estimator(format!("unknown key {k:?} for estimator {:?}", self.name))),
            None => Ok(()),
        }
    }

    fn number<T: core::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Estimator(format!("bad value {v:?} for {key}"))))
            .transpose()
    }

    /// Builds the estimator. The `gt` key is accepted but left to the caller.
    pub fn build(&self) -> Result<Box<dyn IpEstimator>> {
        match self.name.as_str() {
            "oracle" => {
                self.check_keys(&["gt"])?;
                Ok(Box::new(OracleEstimator))
            }
            "noisy-oracle" => {
                self.check_keys(&["gt", "sigma", "sigma_rel", "seed"])?;
                let seed = self.number::<u64>("seed")?.unwrap_or(0);
                match (self.number::<f64>("sigma")?, self.number::<f64>("sigma_rel")?) {
                    (Some(_), Some(_)) => Err(Error::Estimator("give sigma or sigma_rel, not both".into())),
                    (None, Some(f)) => Ok(Box::new(NoisyOracleEstimator::relative(f, seed)?)),
                    (s, None) => Ok(Box::new(NoisyOracleEstimator::new(s.unwrap_or(0.0), seed)?)),
                }
            }
            "topk-sum" => {
                self.check_keys(&["alpha"])?;
                let alpha = self.number::<f64>("alpha")?.unwrap_or(1.0);
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::Estimator(format!("alpha must be finite and non-negative, got {alpha}")));
                }
                Ok(Box::new(TopKSumEstimator { alpha }))
            }
            other => Err(Error::Estimator(format!("unknown estimator {other:?}"))),
        }
    }
}
