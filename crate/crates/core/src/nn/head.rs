//! Output heads: the raw network output is split into per-dimension action
//! distributions followed by one baseline scalar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// One softmax head per action dimension, with the given number of bins.
    Categorical(Vec<usize>),
    /// `dims` independent Gaussian heads, each emitting `(mu, log_sigma)`.
    Gaussian(usize),
}

impl HeadLayout {
    /// Raw output width including the baseline.
    pub fn output_dim(&self) -> usize {
        match self {
            HeadLayout::Categorical(bins) => bins.iter().sum::<usize>() + 1,
            HeadLayout::Gaussian(dims) => 2 * dims + 1,
        }
    }

    pub fn action_dims(&self) -> usize {
        match self {
            HeadLayout::Categorical(bins) => bins.len(),
            HeadLayout::Gaussian(dims) => *dims,
        }
    }

    pub fn parse(&self, raw: &[f64]) -> Result<PolicyOutput> {
        check_len("policy output", self.output_dim(), raw.len())?;
        let baseline = raw[raw.len() - 1];
        if !baseline.is_finite() {
            return Err(Error::NonFinite("baseline"));
        }
        let heads = match self {
            HeadLayout::Categorical(bins) => {
                let mut offset = 0;
                let mut heads = Vec::with_capacity(bins.len());
                for &n in bins {
                    let probs = dist::softmax(&raw[offset..offset + n])?;
                    heads.push(Head::Categorical { probs });
                    offset += n;
                }
                heads
            }
            HeadLayout::Gaussian(dims) => (0..*dims)
                .map(|k| Head::Gaussian {
                    mu: raw[k],
                    log_sigma: raw[dims + k],
                })
                .collect(),
        };
        Ok(PolicyOutput {
            layout: self.clone(),
            heads,
            baseline,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<&[usize]> {
        match self {
            Action::Discrete(a) => Some(a),
            Action::Continuous(_) => None,
        }
    }

    pub fn continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(a) => Some(a),
            Action::Discrete(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Categorical { probs: Vec<f64> },
    Gaussian { mu: f64, log_sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    layout: HeadLayout,
    pub heads: Vec<Head>,
    pub baseline: f64,
}

impl PolicyOutput {
    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    /// Samples every head; the log-probability is summed over dimensions.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Action, f64) {
        match self.layout {
            HeadLayout::Categorical(_) => {
                let mut total = 0.0;
                let picks = self
                    .heads
                    .iter()
                    .map(|h| match h {
                        Head::Categorical { probs } => {
                            let (i, lp) = dist::categorical_sample(probs, rng);
                            total += lp;
                            i
                        }
                        Head::Gaussian { .. } => unreachable!("layout is categorical"),
                    })
                    .collect();
                (Action::Discrete(picks), total)
            }
            HeadLayout::Gaussian(_) => {
                let mut total = 0.0;
                let values = self
                    .heads
                    .iter()
                    .map(|h| match h {
                        Head::Gaussian { mu, log_sigma } => {
                            let (v, lp) = dist::gaussian_sample(*mu, *log_sigma, rng);
                            total += lp;
                            v
                        }
                        Head::Categorical { .. } => unreachable!("layout is gaussian"),
                    })
                    .collect();
                (Action::Continuous(values), total)
            }
        }
    }

    /// Most likely action (means for Gaussian heads).
    pub fn mode(&self) -> Action {
        match self.layout {
            HeadLayout::Categorical(_) => Action::Discrete(
                self.heads
                    .iter()
                    .map(|h| match h {
                        Head::Categorical { probs } => argmax(probs),
                        Head::Gaussian { .. } => unreachable!("layout is categorical"),
                    })
                    .collect(),
            ),
            HeadLayout::Gaussian(_) => Action::Continuous(
                self.heads
                    .iter()
                    .map(|h| match h {
                        Head::Gaussian { mu, .. } => *mu,
                        Head::Categorical { .. } => unreachable!("layout is gaussian"),
                    })
                    .collect(),
            ),
        }
    }

    fn check_action(&self, action: &Action) -> Result<()> {
        match (&self.layout, action) {
            (HeadLayout::Categorical(bins), Action::Discrete(a)) => {
                check_len("action dimensions", bins.len(), a.len())?;
                for (&i, &n) in a.iter().zip(bins) {
                    if i >= n {
                        return Err(Error::Usage(format!("action bin {i} out of range 0..{n}")));
                    }
                }
                Ok(())
            }
            (HeadLayout::Gaussian(dims), Action::Continuous(v)) => {
                check_len("action dimensions", *dims, v.len())
            }
            _ => Err(Error::Usage("action kind does not match policy heads".into())),
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        self.check_action(action)?;
        Ok(match action {
            Action::Discrete(a) => self
                .heads
                .iter()
                .zip(a)
                .map(|(h, &i)| match h {
                    Head::Categorical { probs } => probs[i].ln(),
                    Head::Gaussian { .. } => unreachable!(),
                })
                .sum(),
            Action::Continuous(v) => self
                .heads
                .iter()
                .zip(v)
                .map(|(h, &x)| match h {
                    Head::Gaussian { mu, log_sigma } => dist::gaussian_log_prob(x, *mu, *log_sigma),
                    Head::Categorical { .. } => unreachable!(),
                })
                .sum(),
        })
    }

    /// Summed entropy of the categorical heads (zero for Gaussian heads).
    pub fn entropy(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| match h {
                Head::Categorical { probs } => dist::categorical_entropy(probs),
                Head::Gaussian { .. } => 0.0,
            })
            .sum()
    }

    /// Adds `coef * d log pi(action) / d raw_output` into `d_raw`.
    pub fn add_log_prob_grad(&self, action: &Action, coef: f64, d_raw: &mut [f64]) -> Result<()> {
        self.check_action(action)?;
        check_len("output gradient", self.layout.output_dim(), d_raw.len())?;
        match action {
            Action::Discrete(a) => {
                let mut offset = 0;
                for (h, &chosen) in self.heads.iter().zip(a) {
                    let Head::Categorical { probs } = h else { unreachable!() };
                    for (j, &p) in probs.iter().enumerate() {
                        let indicator = if j == chosen { 1.0 } else { 0.0 };
                        d_raw[offset + j] += coef * (indicator - p);
                    }
                    offset += probs.len();
                }
            }
            Action::Continuous(v) => {
                let dims = v.len();
                for (k, (h, &x)) in self.heads.iter().zip(v).enumerate() {
                    let Head::Gaussian { mu, log_sigma } = *h else { unreachable!() };
                    let ls = dist::clamp_log_sigma(log_sigma);
                    let sigma = ls.exp();
                    let z = (x - mu) / sigma;
                    d_raw[k] += coef * z / sigma;
                    if (dist::LOG_SIGMA_MIN..=dist::LOG_SIGMA_MAX).contains(&log_sigma) {
                        d_raw[dims + k] += coef * (z * z - 1.0);
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds `coef * d entropy / d raw_output` into `d_raw`.
    pub fn add_entropy_grad(&self, coef: f64, d_raw: &mut [f64]) {
        let mut offset = 0;
        for h in &self.heads {
            if let Head::Categorical { probs } = h {
                let entropy = dist::categorical_entropy(probs);
                for (j, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        d_raw[offset + j] += coef * (-p * (p.ln() + entropy));
                    }
                }
                offset += probs.len();
            }
        }
    }

    pub fn add_baseline_grad(&self, coef: f64, d_raw: &mut [f64]) {
        let last = d_raw.len() - 1;
        d_raw[last] += coef;
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(layout: &HeadLayout, raw: &[f64], f: impl Fn(&PolicyOutput) -> f64, grad: &[f64]) {
        let h = 1e-6;
        for i in 0..raw.len() {
            let mut p = raw.to_vec();
            p[i] += h;
            let mut m = raw.to_vec();
            m[i] -= h;
            let fd = (f(&layout.parse(&p).unwrap()) - f(&layout.parse(&m).unwrap())) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "entry {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn categorical_log_prob_gradient() {
        let layout = HeadLayout::Categorical(vec![3, 2]);
        let raw = [0.1, -0.4, 0.7, 1.2, -0.3, 0.5];
        let out = layout.parse(&raw).unwrap();
        let action = Action::Discrete(vec![2, 0]);
        let mut d = vec![0.0; raw.len()];
        out.add_log_prob_grad(&action, 1.0, &mut d).unwrap();
        fd_check(&layout, &raw, |o| o.log_prob(&action).unwrap(), &d);

        let mut d = vec![0.0; raw.len()];
        out.add_entropy_grad(1.0, &mut d);
        fd_check(&layout, &raw, PolicyOutput::entropy, &d);
    }

    #[test]
    fn gaussian_log_prob_gradient() {
        let layout = HeadLayout::Gaussian(2);
        let raw = [0.3, -1.0, 0.2, -0.6, 0.9];
        let out = layout.parse(&raw).unwrap();
        let action = Action::Continuous(vec![1.1, -0.2]);
        let mut d = vec![0.0; raw.len()];
        out.add_log_prob_grad(&action, 1.0, &mut d).unwrap();
        fd_check(&layout, &raw, |o| o.log_prob(&action).unwrap(), &d);
    }

    #[test]
    fn clamped_log_sigma_has_no_gradient() {
        let layout = HeadLayout::Gaussian(1);
        let out = layout.parse(&[0.0, -9.0, 0.0]).unwrap();
        let mut d = vec![0.0; 3];
        out.add_log_prob_grad(&Action::Continuous(vec![0.001]), 1.0, &mut d)
            .unwrap();
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn sampled_log_prob_matches_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for layout in [HeadLayout::Categorical(vec![5, 5]), HeadLayout::Gaussian(3)] {
            let raw: Vec<f64> = (0..layout.output_dim()).map(|i| (i as f64 * 0.37).sin()).collect();
            let out = layout.parse(&raw).unwrap();
            for _ in 0..20 {
                let (a, lp) = out.sample(&mut rng);
                assert!((out.log_prob(&a).unwrap() - lp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_for_large_logits() {
        let layout = HeadLayout::Categorical(vec![4]);
        let out = layout.parse(&[1e4, -1e4, 3e3, 0.0, 0.0]).unwrap();
        let Head::Categorical { probs } = &out.heads[0] else { panic!() };
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn bad_actions_are_rejected() {
        let out = HeadLayout::Categorical(vec![5, 5]).parse(&[0.0; 11]).unwrap();
        assert!(out.log_prob(&Action::Discrete(vec![5, 0])).is_err());
        assert!(out.log_prob(&Action::Discrete(vec![1])).is_err());
        assert!(out.log_prob(&Action::Continuous(vec![0.0, 0.0])).is_err());
    }
}
