//! Alice, the goal encoder, Bob's goal-conditioned policy, Charlie, and a
//! flat policy for the non-hierarchical baseline.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::params::ParamCheckpoint;
use crate::nn::{
    Action, GoalInjection, GradientBuffer, HeadLayout, NetShape, Network, ParameterSet,
    PolicyOutput, Trace,
};

pub const DEFAULT_HIDDEN: usize = 64;

/// A network whose raw output is interpreted through a [`HeadLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    net: Network,
    heads: HeadLayout,
    pub params: ParameterSet,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: Vec<usize>,
        heads: HeadLayout,
        goal: Option<GoalInjection>,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = NetShape {
            input,
            hidden,
            output: heads.output_dim(),
            final_tanh: false,
            goal,
        };
        let net = Network::new(shape)?;
        let params = ParameterSet::init(net.layout().clone(), rng);
        Ok(Self { net, heads, params })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn heads(&self) -> &HeadLayout {
        &self.heads
    }

    pub fn forward(&self, input: &[f64], goal: Option<&[f64]>) -> Result<(PolicyOutput, Trace)> {
        let trace = self.net.forward(&self.params, input, goal)?;
        let out = self.heads.parse(trace.output())?;
        Ok((out, trace))
    }

    pub fn evaluate(&self, input: &[f64], goal: Option<&[f64]>) -> Result<PolicyOutput> {
        self.forward(input, goal).map(|(out, _)| out)
    }

    pub fn backward(
        &self,
        trace: &mut Trace,
        d_raw: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<Option<Vec<f64>>> {
        self.net.backward(&self.params, trace, d_raw, grads)
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer::zeros_like(&self.params)
    }

    fn to_file(&self, role: &str, mode: Option<EncoderMode>) -> PolicyFile {
        PolicyFile {
            role: role.to_string(),
            shape: self.net.shape().clone(),
            heads: Some(self.heads.clone()),
            mode,
            params: self.params.to_checkpoint(),
        }
    }

    fn from_file(file: PolicyFile, role: &str) -> Result<Self> {
        if file.role != role {
            return Err(Error::format(
                "policy file",
                format!("expected role `{role}`, found `{}`", file.role),
            ));
        }
        let heads = file
            .heads
            .ok_or_else(|| Error::format("policy file", "missing head layout"))?;
        let net = Network::new(file.shape)?;
        if heads.output_dim() != net.output_dim() {
            return Err(Error::format("policy file", "head layout does not match output width"));
        }
        let params = ParameterSet::from_checkpoint(file.params)?;
        if params.layout() != net.layout() {
            return Err(Error::format("policy file", "parameters do not match shape"));
        }
        Ok(Self { net, heads, params })
    }
}

/// On-disk form of one network: its shape, head layout and parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub role: String,
    pub shape: NetShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<EncoderMode>,
    pub params: ParamCheckpoint,
}

impl PolicyFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format("policy file", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("policy file {}", path.display()), e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub log_prob: f64,
    pub entropy: f64,
    pub baseline: f64,
}

fn decide<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> Decision {
    let (action, log_prob) = out.sample(rng);
    Decision {
        action,
        log_prob,
        entropy: out.entropy(),
        baseline: out.baseline,
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Task proposer `pi_A(s_t, s_0)`: one hidden layer over `[s_t, s_0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlicePolicy {
    pub net: PolicyNet,
    obs_dim: usize,
}

impl AlicePolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_bins: Vec<usize>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = PolicyNet::new(
            2 * obs_dim,
            vec![hidden],
            HeadLayout::Categorical(action_bins),
            None,
            rng,
        )?;
        Ok(Self { net, obs_dim })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn input(&self, s_t: &[f64], s_0: &[f64]) -> Result<Vec<f64>> {
        check_len("alice state", self.obs_dim, s_t.len())?;
        check_len("alice start state", self.obs_dim, s_0.len())?;
        Ok(concat(s_t, s_0))
    }

    pub fn act<R: Rng + ?Sized>(&self, s_t: &[f64], s_0: &[f64], rng: &mut R) -> Result<Decision> {
        let out = self.net.evaluate(&self.input(s_t, s_0)?, None)?;
        Ok(decide(&out, rng))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.to_file("alice", None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let net = PolicyNet::from_file(PolicyFile::load(path)?, "alice")?;
        let obs_dim = net.network().input_dim() / 2;
        Ok(Self { net, obs_dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// `E(s*, s_t) = phi(s*)`
    Absolute,
    /// `E(s*, s_t) = phi(s*) - phi(s_t)`
    Difference,
}

/// State embedding `phi` (one tanh hidden layer, linear output of width K)
/// and the goal encoder `E` built on it.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalEncoder {
    net: Network,
    pub params: ParameterSet,
    mode: EncoderMode,
}

impl GoalEncoder {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        k: usize,
        hidden: usize,
        mode: EncoderMode,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Network::new(NetShape::mlp(obs_dim, vec![hidden], k, false))?;
        let params = ParameterSet::init(net.layout().clone(), rng);
        Ok(Self { net, params, mode })
    }

    pub fn k(&self) -> usize {
        self.net.output_dim()
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.params, obs, None)?.into_output())
    }

    pub fn embed_traced(&self, obs: &[f64]) -> Result<Trace> {
        self.net.forward(&self.params, obs, None)
    }

    pub fn backward(&self, trace: &mut Trace, d_phi: &[f64], grads: &mut GradientBuffer) -> Result<()> {
        self.net.backward(&self.params, trace, d_phi, grads).map(|_| ())
    }

    pub fn encode(&self, target: &[f64], current: &[f64]) -> Result<Vec<f64>> {
        let target_phi = self.embed(target)?;
        self.encode_with(&target_phi, current)
    }

    /// Encodes against a precomputed `phi(s*)`.
    pub fn encode_with(&self, target_phi: &[f64], current: &[f64]) -> Result<Vec<f64>> {
        match self.mode {
            EncoderMode::Absolute => Ok(target_phi.to_vec()),
            EncoderMode::Difference => {
                let current_phi = self.embed(current)?;
                Ok(target_phi.iter().zip(&current_phi).map(|(a, b)| a - b).collect())
            }
        }
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer::zeros_like(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        PolicyFile {
            role: "encoder".into(),
            shape: self.net.shape().clone(),
            heads: None,
            mode: Some(self.mode),
            params: self.params.to_checkpoint(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = PolicyFile::load(path)?;
        if file.role != "encoder" {
            return Err(Error::format("policy file", "expected role `encoder`"));
        }
        let mode = file
            .mode
            .ok_or_else(|| Error::format("policy file", "encoder mode missing"))?;
        let net = Network::new(file.shape)?;
        let params = ParameterSet::from_checkpoint(file.params)?;
        if params.layout() != net.layout() {
            return Err(Error::format("policy file", "parameters do not match shape"));
        }
        Ok(Self { net, params, mode })
    }
}

/// Where Bob's goal comes from.
#[derive(Debug, Clone, Copy)]
pub enum GoalSource<'a> {
    /// A raw target observation `s*`, encoded first (self-play).
    Target(&'a [f64]),
    /// A K-vector used as-is (issued by Charlie).
    Raw(&'a [f64]),
}

/// Goal-conditioned policy `pi'_B(s_t, g)`: two tanh hidden layers with the
/// goal added into the second one through `wg`.
#[derive(Debug, Clone, PartialEq)]
pub struct BobPolicy {
    pub net: PolicyNet,
}

impl BobPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        k: usize,
        action_bins: Vec<usize>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = PolicyNet::new(
            obs_dim,
            vec![hidden, hidden],
            HeadLayout::Categorical(action_bins),
            Some(GoalInjection { dim: k, layer: 1 }),
            rng,
        )?;
        Ok(Self { net })
    }

    pub fn k(&self) -> usize {
        self.net.network().goal_dim().expect("bob takes a goal")
    }

    pub fn output(&self, s_t: &[f64], goal: &[f64]) -> Result<PolicyOutput> {
        check_len("bob goal", self.k(), goal.len())?;
        self.net.evaluate(s_t, Some(goal))
    }

    pub fn act_with_goal<R: Rng + ?Sized>(&self, s_t: &[f64], goal: &[f64], rng: &mut R) -> Result<Decision> {
        Ok(decide(&self.output(s_t, goal)?, rng))
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        encoder: &GoalEncoder,
        s_t: &[f64],
        goal: GoalSource<'_>,
        rng: &mut R,
    ) -> Result<Decision> {
        match goal {
            GoalSource::Target(target) => {
                let g = encoder.encode(target, s_t)?;
                self.act_with_goal(s_t, &g, rng)
            }
            GoalSource::Raw(g) => self.act_with_goal(s_t, g, rng),
        }
    }

    /// `log pi_B(a | s, E(s*, s))`, the imitation target for Alice's actions.
    pub fn imitation_log_prob(
        &self,
        encoder: &GoalEncoder,
        s_alice: &[f64],
        target: &[f64],
        action: &Action,
    ) -> Result<f64> {
        let g = encoder.encode(target, s_alice)?;
        self.output(s_alice, &g)?.log_prob(action)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.to_file("bob", None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let net = PolicyNet::from_file(PolicyFile::load(path)?, "bob")?;
        if net.network().goal_dim().is_none() {
            return Err(Error::format("policy file", "bob network has no goal input"));
        }
        Ok(Self { net })
    }
}

/// High-level controller `pi_C(s_t)`: one hidden layer, K Gaussian heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CharliePolicy {
    pub net: PolicyNet,
}

impl CharliePolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, k: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("goal dimension K must be positive".into()));
        }
        let net = PolicyNet::new(obs_dim, vec![hidden], HeadLayout::Gaussian(k), None, rng)?;
        Ok(Self { net })
    }

    pub fn k(&self) -> usize {
        self.net.heads().action_dims()
    }

    /// Samples a goal vector; returns `(goal, log_prob, baseline)`.
    pub fn act<R: Rng + ?Sized>(&self, s_t: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64, f64)> {
        let out = self.net.evaluate(s_t, None)?;
        let (action, log_prob) = out.sample(rng);
        let Action::Continuous(goal) = action else {
            unreachable!("charlie heads are gaussian")
        };
        Ok((goal, log_prob, out.baseline))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.to_file("charlie", None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            net: PolicyNet::from_file(PolicyFile::load(path)?, "charlie")?,
        })
    }
}

/// Non-hierarchical policy over the full observation (the REINFORCE baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPolicy {
    pub net: PolicyNet,
}

impl FlatPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_bins: Vec<usize>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = PolicyNet::new(
            obs_dim,
            vec![hidden, hidden],
            HeadLayout::Categorical(action_bins),
            None,
            rng,
        )?;
        Ok(Self { net })
    }

    pub fn act<R: Rng + ?Sized>(&self, s_t: &[f64], rng: &mut R) -> Result<Decision> {
        Ok(decide(&self.net.evaluate(s_t, None)?, rng))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.to_file("flat", None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            net: PolicyNet::from_file(PolicyFile::load(path)?, "flat")?,
        })
    }
}

/// Checks that Charlie emits goals Bob and the encoder understand.
pub fn check_goal_dims(charlie: &CharliePolicy, bob: &BobPolicy, encoder: &GoalEncoder) -> Result<()> {
    check_len("charlie goal dimension vs encoder K", encoder.k(), charlie.k())?;
    check_len("bob goal dimension vs encoder K", encoder.k(), bob.k())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Head;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn uniform_alice_has_max_entropy() {
        let mut r = rng();
        let mut alice = AlicePolicy::new(4, vec![6], 8, &mut r).unwrap();
        alice.net.params.get_mut("w_out").unwrap().fill(0.0);
        let d = alice.act(&[0.1; 4], &[0.2; 4], &mut r).unwrap();
        assert!((d.entropy - 6f64.ln()).abs() < 1e-12);
        assert!((d.log_prob - (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn alice_is_reproducible() {
        let mut r = rng();
        let alice = AlicePolicy::new(4, vec![6], 8, &mut r).unwrap();
        let a = alice.act(&[0.1; 4], &[0.0; 4], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = alice.act(&[0.1; 4], &[0.0; 4], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(alice.act(&[0.1; 3], &[0.0; 4], &mut r).is_err());
    }

    #[test]
    fn alice_action_frequencies_follow_head() {
        let mut r = rng();
        let alice = AlicePolicy::new(3, vec![4], 8, &mut r).unwrap();
        let s = [0.5, -0.2, 0.9];
        let s0 = [0.0, 0.3, -0.4];
        let out = alice.net.evaluate(&alice.input(&s, &s0).unwrap(), None).unwrap();
        let Head::Categorical { probs } = &out.heads[0] else { panic!() };
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let d = alice.act(&s, &s0, &mut r).unwrap();
            counts[d.action.discrete().unwrap()[0]] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn difference_encoder_identities() {
        let mut r = rng();
        let enc = GoalEncoder::new(5, 3, 8, EncoderMode::Difference, &mut r).unwrap();
        let a = obs(&mut r, 5);
        let b = obs(&mut r, 5);
        assert_eq!(enc.encode(&a, &a).unwrap(), vec![0.0; 3]);
        let ab = enc.encode(&a, &b).unwrap();
        let ba = enc.encode(&b, &a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn absolute_encoder_ignores_current_state() {
        let mut r = rng();
        let enc = GoalEncoder::new(5, 3, 8, EncoderMode::Absolute, &mut r).unwrap();
        let t = obs(&mut r, 5);
        let g1 = enc.encode(&t, &obs(&mut r, 5)).unwrap();
        let g2 = enc.encode(&t, &obs(&mut r, 5)).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1, enc.embed(&t).unwrap());
    }

    #[test]
    fn bob_target_call_is_encode_then_raw_call() {
        let mut r = rng();
        let enc = GoalEncoder::new(4, 2, 8, EncoderMode::Difference, &mut r).unwrap();
        let bob = BobPolicy::new(4, 2, vec![5, 5], 8, &mut r).unwrap();
        let s = obs(&mut r, 4);
        let target = obs(&mut r, 4);
        let via_target = bob
            .act(&enc, &s, GoalSource::Target(&target), &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let g = enc.encode(&target, &s).unwrap();
        let via_raw = bob
            .act(&enc, &s, GoalSource::Raw(&g), &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(via_target, via_raw);
        // at the target the goal vanishes
        let at_target = bob.output(&target, &enc.encode(&target, &target).unwrap()).unwrap();
        assert_eq!(at_target, bob.output(&target, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn bob_log_prob_sums_heads() {
        let mut r = rng();
        let bob = BobPolicy::new(4, 2, vec![5, 5], 8, &mut r).unwrap();
        let s = obs(&mut r, 4);
        let out = bob.output(&s, &[0.3, -0.1]).unwrap();
        let d = bob.act_with_goal(&s, &[0.3, -0.1], &mut r).unwrap();
        let a = d.action.discrete().unwrap();
        let expected: f64 = out
            .heads
            .iter()
            .zip(a)
            .map(|(h, &i)| match h {
                Head::Categorical { probs } => probs[i].ln(),
                _ => unreachable!(),
            })
            .sum();
        assert!((d.log_prob - expected).abs() < 1e-12);
        assert!(bob.act_with_goal(&s, &[0.0; 3], &mut r).is_err());
    }

    #[test]
    fn uniform_bob_imitation_log_prob() {
        let mut r = rng();
        let enc = GoalEncoder::new(4, 3, 8, EncoderMode::Absolute, &mut r).unwrap();
        let mut bob = BobPolicy::new(4, 3, vec![6], 8, &mut r).unwrap();
        bob.net.params.get_mut("w_out").unwrap().fill(0.0);
        let lp = bob
            .imitation_log_prob(&enc, &obs(&mut r, 4), &obs(&mut r, 4), &Action::Discrete(vec![2]))
            .unwrap();
        assert!((lp - (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn charlie_goal_bounds() {
        let mut r = rng();
        let mut charlie = CharliePolicy::new(6, 3, 8, &mut r).unwrap();
        assert_eq!(charlie.k(), 3);
        // push log sigma far above the clamp
        let b = charlie.net.params.get_mut("b_out").unwrap();
        b[3..6].fill(50.0);
        let s = obs(&mut r, 6);
        let out = charlie.net.evaluate(&s, None).unwrap();
        let mus: Vec<f64> = out
            .heads
            .iter()
            .map(|h| match h {
                Head::Gaussian { mu, .. } => *mu,
                _ => unreachable!(),
            })
            .collect();
        let bound = 6.0 * 2f64.exp();
        for _ in 0..5000 {
            let (g, lp, _) = charlie.act(&s, &mut r).unwrap();
            assert!(lp.is_finite());
            for (x, mu) in g.iter().zip(&mus) {
                assert!((x - mu).abs() <= bound);
            }
        }
    }

    #[test]
    fn goal_dimension_check() {
        let mut r = rng();
        let enc = GoalEncoder::new(4, 2, 8, EncoderMode::Difference, &mut r).unwrap();
        let bob = BobPolicy::new(4, 2, vec![5, 5], 8, &mut r).unwrap();
        let charlie = CharliePolicy::new(24, 2, 8, &mut r).unwrap();
        check_goal_dims(&charlie, &bob, &enc).unwrap();
        let wrong = CharliePolicy::new(24, 3, 8, &mut r).unwrap();
        assert!(check_goal_dims(&wrong, &bob, &enc).is_err());
    }

    #[test]
    fn files_round_trip() {
        let mut r = rng();
        let dir = tempfile::tempdir().unwrap();
        let enc = GoalEncoder::new(4, 2, 8, EncoderMode::Difference, &mut r).unwrap();
        let bob = BobPolicy::new(4, 2, vec![5, 5], 8, &mut r).unwrap();
        let alice = AlicePolicy::new(4, vec![5, 5], 8, &mut r).unwrap();
        let charlie = CharliePolicy::new(24, 2, 8, &mut r).unwrap();
        enc.save(&dir.path().join("e.json")).unwrap();
        bob.save(&dir.path().join("b.json")).unwrap();
        alice.save(&dir.path().join("a.json")).unwrap();
        charlie.save(&dir.path().join("c.json")).unwrap();
        assert_eq!(GoalEncoder::load(&dir.path().join("e.json")).unwrap(), enc);
        assert_eq!(BobPolicy::load(&dir.path().join("b.json")).unwrap(), bob);
        assert_eq!(AlicePolicy::load(&dir.path().join("a.json")).unwrap(), alice);
        assert_eq!(CharliePolicy::load(&dir.path().join("c.json")).unwrap(), charlie);
        assert!(BobPolicy::load(&dir.path().join("a.json")).is_err());
    }
}
