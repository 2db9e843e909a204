// SPDX-License-Identifier: MIT OR Apache-2.0

//! Target functions and in-context prompts.
//!
//! A prompt holds `k` labelled context points and one query, all drawn from a
//! single target function. Everything is deterministic given a seed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A uniform distribution over a real interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    /// `U(-sigma, sigma)`.
    Symmetric { sigma: f64 },
    /// `U(lo, hi)`.
    Interval { lo: f64, hi: f64 },
}

impl Distribution {
    pub fn symmetric(sigma: f64) -> Result<Self> {
        let d = Self::Symmetric { sigma };
        d.validate()?;
        Ok(d)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        let d = Self::Interval { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Symmetric { sigma } if !(sigma.is_finite() && sigma > 0.0) => Err(invalid(
                "distribution",
                format!("sigma must be positive and finite, got {sigma}"),
            )),
            Self::Interval { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo < hi) => Err(
                invalid("distribution", format!("need lo < hi, got U({lo}, {hi})")),
            ),
            _ => Ok(()),
        }
    }

    /// Closed support `[lo, hi]`.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Self::Symmetric { sigma } => (-sigma, sigma),
            Self::Interval { lo, hi } => (lo, hi),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = self.support();
        rng.random_range(lo..hi)
    }

    /// Short label used in file names and CSV columns, e.g. `U(-2,2)`.
    pub fn label(&self) -> String {
        let (lo, hi) = self.support();
        format!("U({lo},{hi})")
    }
}

/// The kind of target function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionFamily {
    /// `Σ cᵢ xⁱ` with random coefficients.
    Polynomial { degree: usize },
    /// `1 / (1 + 25 x²)`.
    Runge,
    /// Partial sum `Σ_{n=1}^{n_max} aⁿ cos(bⁿ π x)`.
    Weierstrass { a: f64, b: f64, n_max: usize },
}

impl FunctionFamily {
    pub const LINEAR: Self = Self::Polynomial { degree: 1 };

    pub fn weierstrass_default() -> Self {
        Self::Weierstrass {
            a: 0.5,
            b: 3.0,
            n_max: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Weierstrass { a, b, n_max } = *self {
            if !(a > 0.0 && a < 1.0) || !(b > 1.0) || n_max == 0 {
                return Err(invalid(
                    "weierstrass parameters",
                    format!("need 0 < a < 1, b > 1, n_max >= 1; got a={a}, b={b}, n_max={n_max}"),
                ));
            }
        }
        Ok(())
    }

    /// Number of leading positions excluded from scoring: the first `n + 1`
    /// points cannot identify a degree-`n` polynomial. Non-polynomial targets
    /// use the linear setting.
    pub fn scoring_degree(&self) -> usize {
        match *self {
            Self::Polynomial { degree } => degree,
            _ => 1,
        }
    }
}

/// A concrete target function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub family: FunctionFamily,
    /// Ascending-power coefficients (`c₀ + c₁x + …`); polynomials only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<f64>,
}

impl FunctionSpec {
    pub fn polynomial(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(invalid("polynomial", "needs at least one coefficient"));
        }
        Ok(Self {
            family: FunctionFamily::Polynomial {
                degree: coefficients.len() - 1,
            },
            coefficients,
        })
    }

    /// `f(x) = a x + b`.
    pub fn linear(a: f64, b: f64) -> Self {
        Self {
            family: FunctionFamily::LINEAR,
            coefficients: vec![b, a],
        }
    }

    pub fn runge() -> Self {
        Self {
            family: FunctionFamily::Runge,
            coefficients: Vec::new(),
        }
    }

    pub fn weierstrass(a: f64, b: f64, n_max: usize) -> Result<Self> {
        let family = FunctionFamily::Weierstrass { a, b, n_max };
        family.validate()?;
        Ok(Self {
            family,
            coefficients: Vec::new(),
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval_function(self, x)
    }
}

pub fn eval_function(f: &FunctionSpec, x: f64) -> f64 {
    match f.family {
        FunctionFamily::Polynomial { .. } => f.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c),
        FunctionFamily::Runge => 1.0 / (1.0 + 25.0 * x * x),
        FunctionFamily::Weierstrass { a, b, n_max } => {
            let mut sum = 0.0;
            let mut an = 1.0;
            let mut bn = 1.0;
            for _ in 1..=n_max {
                an *= a;
                bn *= b;
                sum += an * (bn * PI * x).cos();
            }
            sum
        }
    }
}

/// Draws a target function. Polynomials need a coefficient distribution;
/// Runge and Weierstrass have fixed shapes and reject one.
pub fn sample_function_with(
    family: FunctionFamily,
    coefficients: Option<&Distribution>,
    rng: &mut impl Rng,
) -> Result<FunctionSpec> {
    family.validate()?;
    match (family, coefficients) {
        (FunctionFamily::Polynomial { degree }, Some(dist)) => {
            dist.validate()?;
            let coefficients = (0..=degree).map(|_| dist.sample(rng)).collect();
            Ok(FunctionSpec {
                family,
                coefficients,
            })
        }
        (FunctionFamily::Polynomial { .. }, None) => Err(invalid(
            "function sampling",
            "polynomial family needs a coefficient distribution",
        )),
        (_, Some(_)) => Err(invalid(
            "function sampling",
            format!("{family:?} has no random coefficients"),
        )),
        (_, None) => Ok(FunctionSpec {
            family,
            coefficients: Vec::new(),
        }),
    }
}

pub fn sample_function(
    family: FunctionFamily,
    coefficients: Option<&Distribution>,
    seed: u64,
) -> Result<FunctionSpec> {
    sample_function_with(family, coefficients, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One in-context prompt: `k` labelled context points followed by a query.
///
/// `xs` and `ys` both hold `k + 1` entries; the query's label is kept so the
/// prediction at every x position can be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBatch {
    pub function: FunctionSpec,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub context_length: usize,
}

impl PromptBatch {
    /// Builds a prompt from explicit inputs, labelling them exactly.
    pub fn from_inputs(function: FunctionSpec, xs: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("prompt", "needs at least the query input"));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(invalid("prompt", "inputs must be finite"));
        }
        let ys = xs.iter().map(|&x| eval_function(&function, x)).collect();
        let context_length = xs.len() - 1;
        Ok(Self {
            function,
            xs,
            ys,
            context_length,
        })
    }

    /// Number of x positions (context points plus the query).
    pub fn n_points(&self) -> usize {
        self.xs.len()
    }

    /// Interleaved scalar sequence `x₁, y₁, …, x_k, y_k, x_{k+1}`.
    pub fn tokens(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.xs.len() - 1);
        for (i, (&x, &y)) in self.xs.iter().zip(&self.ys).enumerate() {
            out.push(x);
            if i + 1 < self.xs.len() {
                out.push(y);
            }
        }
        out
    }

    pub fn seq_len(&self) -> usize {
        2 * self.xs.len() - 1
    }

    /// Sequence positions of the x tokens, where predictions are read.
    pub fn x_positions(&self) -> impl Iterator<Item = usize> {
        (0..self.xs.len()).map(|i| 2 * i)
    }

    /// Adds Gaussian label noise to every target. The prompt no longer
    /// satisfies `ys[i] == f(xs[i])` afterwards.
    pub fn add_label_noise(&mut self, std: f64, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid("label noise", e.to_string()))?;
        for y in &mut self.ys {
            *y += normal.sample(rng);
        }
        Ok(())
    }
}

pub fn sample_prompt_with(
    function: &FunctionSpec,
    inputs: &Distribution,
    k: usize,
    rng: &mut impl Rng,
) -> Result<PromptBatch> {
    inputs.validate()?;
    let xs = (0..=k).map(|_| inputs.sample(rng)).collect();
    PromptBatch::from_inputs(function.clone(), xs)
}

pub fn sample_prompt(
    function: &FunctionSpec,
    inputs: &Distribution,
    k: usize,
    seed: u64,
) -> Result<PromptBatch> {
    sample_prompt_with(function, inputs, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A function family together with its coefficient and input distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: FunctionFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Distribution>,
    pub inputs: Distribution,
}

impl TaskSpec {
    /// `f(x) = ax + b` with `a, b ~ U(-sigma, sigma)` and `x ~ U(-1, 1)`.
    pub fn linear(sigma: f64) -> Result<Self> {
        Ok(Self {
            family: FunctionFamily::LINEAR,
            coefficients: Some(Distribution::symmetric(sigma)?),
            inputs: Distribution::symmetric(1.0)?,
        })
    }

    /// Linear functions with coefficients drawn from `U(lo, hi)`.
    pub fn linear_interval(lo: f64, hi: f64) -> Result<Self> {
        Ok(Self {
            family: FunctionFamily::LINEAR,
            coefficients: Some(Distribution::interval(lo, hi)?),
            inputs: Distribution::symmetric(1.0)?,
        })
    }

    /// A fixed-shape family (Runge, Weierstrass) over `x ~ U(-sigma, sigma)`.
    pub fn fixed(family: FunctionFamily, sigma: f64) -> Result<Self> {
        Ok(Self {
            family,
            coefficients: None,
            inputs: Distribution::symmetric(sigma)?,
        })
    }

    /// The same family with the shift knob set to `sigma`: coefficients
    /// `U(-sigma, sigma)` for polynomials, inputs `U(-sigma, sigma)` otherwise.
    pub fn scaled(&self, sigma: f64) -> Result<Self> {
        match self.family {
            FunctionFamily::Polynomial { .. } => Ok(Self {
                coefficients: Some(Distribution::symmetric(sigma)?),
                ..self.clone()
            }),
            family => Self::fixed(family, sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.inputs.validate()?;
        if let Some(c) = &self.coefficients {
            c.validate()?;
        }
        match (self.family, self.coefficients.is_some()) {
            (FunctionFamily::Polynomial { .. }, false) => Err(invalid(
                "task",
                "polynomial family needs a coefficient distribution",
            )),
            (FunctionFamily::Polynomial { .. }, true) | (_, false) => Ok(()),
            (family, true) => Err(invalid(
                "task",
                format!("{family:?} has no random coefficients"),
            )),
        }
    }

    pub fn sample_function(&self, rng: &mut impl Rng) -> Result<FunctionSpec> {
        sample_function_with(self.family, self.coefficients.as_ref(), rng)
    }

    /// Samples a fresh function and a prompt with `k` context points from it.
    pub fn sample_prompt(&self, k: usize, rng: &mut impl Rng) -> Result<PromptBatch> {
        let f = self.sample_function(rng)?;
        sample_prompt_with(&f, &self.inputs, k, rng)
    }

    /// `count` prompts from a dedicated seed.
    pub fn sample_prompts(&self, count: usize, k: usize, seed: u64) -> Result<Vec<PromptBatch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_prompt(k, &mut rng)).collect()
    }

    /// Short human-readable label, e.g. `poly1 a~U(-2,2) x~U(-1,1)`.
    pub fn label(&self) -> String {
        let fam = match self.family {
            FunctionFamily::Polynomial { degree } => format!("poly{degree}"),
            FunctionFamily::Runge => "runge".to_string(),
            FunctionFamily::Weierstrass { .. } => "weierstrass".to_string(),
        };
        match &self.coefficients {
            Some(c) => format!("{fam} c~{} x~{}", c.label(), self.inputs.label()),
            None => format!("{fam} x~{}", self.inputs.label()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_moves_the_shift_knob() {
        let t = TaskSpec::linear(1.0).unwrap().scaled(2.5).unwrap();
        assert_eq!(t.coefficients, Some(Distribution::symmetric(2.5).unwrap()));
        assert_eq!(t.inputs, Distribution::symmetric(1.0).unwrap());
        let r = TaskSpec::fixed(FunctionFamily::Runge, 1.0).unwrap().scaled(3.0).unwrap();
        assert_eq!(r.inputs, Distribution::symmetric(3.0).unwrap());
        assert!(r.coefficients.is_none());
    }

    #[test]
    fn linear_eval() {
        assert_eq!(FunctionSpec::linear(1.0, 0.0).eval(0.5), 0.5);
    }

    #[test]
    fn runge_at_zero() {
        assert_eq!(FunctionSpec::runge().eval(0.0), 1.0);
    }

    #[test]
    fn weierstrass_partial_sum_at_zero() {
        // Σ_{n=1..5} 0.5ⁿ = 0.96875 since cos(0) = 1.
        let f = FunctionSpec::weierstrass(0.5, 3.0, 5).unwrap();
        assert!((f.eval(0.0) - 0.96875).abs() < 1e-15);
    }

    #[test]
    fn linear_support_and_determinism() {
        let d = Distribution::symmetric(1.0).unwrap();
        for seed in 0..200 {
            let f = sample_function(FunctionFamily::LINEAR, Some(&d), seed).unwrap();
            assert!(f.coefficients.iter().all(|c| c.abs() <= 1.0));
        }
        let a = sample_function(FunctionFamily::LINEAR, Some(&d), 5).unwrap();
        let b = sample_function(FunctionFamily::LINEAR, Some(&d), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_interval_rejected() {
        assert!(Distribution::interval(0.0, 0.0).is_err());
        assert!(Distribution::interval(1.0, 0.5).is_err());
        assert!(Distribution::symmetric(0.0).is_err());
    }

    #[test]
    fn coefficient_distribution_on_runge_rejected() {
        let d = Distribution::symmetric(1.0).unwrap();
        assert!(sample_function(FunctionFamily::Runge, Some(&d), 0).is_err());
        assert!(sample_function(FunctionFamily::LINEAR, None, 0).is_err());
    }

    #[test]
    fn zero_context_prompt_is_single_token() {
        let f = FunctionSpec::linear(1.0, 0.0);
        let p = sample_prompt(&f, &Distribution::symmetric(1.0).unwrap(), 0, 1).unwrap();
        assert_eq!(p.tokens().len(), 1);
        assert_eq!(p.context_length, 0);
    }

    #[test]
    fn prompt_layout() {
        let f = FunctionSpec::linear(2.0, 1.0);
        let p = PromptBatch::from_inputs(f, vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(p.tokens(), vec![0.0, 1.0, 1.0, 3.0, -1.0]);
        assert_eq!(p.x_positions().collect::<Vec<_>>(), vec![0, 2, 4]);
        assert_eq!(p.seq_len(), 5);
    }

    #[test]
    fn input_sampler_mean() {
        let d = Distribution::symmetric(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn label_noise_changes_targets() {
        let f = FunctionSpec::linear(1.0, 0.0);
        let mut p = PromptBatch::from_inputs(f, vec![0.1, 0.2]).unwrap();
        let clean = p.ys.clone();
        p.add_label_noise(0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(p.ys, clean);
    }
}
