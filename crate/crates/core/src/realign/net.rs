//! The realigner `v`, its masking wrapper `u`, and the plain-value interface
//! used by trajectories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::intervene::PolicyKind;
use crate::models::TrainConfig;
use crate::ndcompute::{rng_for, Activation, LstmCell, Mlp, ParamStore, RecurrentState, Tape, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealignerArch {
    #[default]
    Feedforward,
    Recurrent,
}

impl FromStr for RealignerArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedforward" | "mlp" => Ok(Self::Feedforward),
            "recurrent" | "lstm" => Ok(Self::Recurrent),
            other => Err(Error::field("arch", format!("unknown realigner arch `{other}`"))),
        }
    }
}

impl fmt::Display for RealignerArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Feedforward => "feedforward",
            Self::Recurrent => "recurrent",
        })
    }
}

/// What the realigner reads at step `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `c̃_t`: ground truth on `S_t`, the base prediction `ĉ_0` elsewhere.
    #[default]
    Original,
    /// `κ_{t−1}` with the ground truth of `S_t` written back.
    PreviousOutput,
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "previous_output" | "previous-output" => Ok(Self::PreviousOutput),
            other => Err(Error::field("input_mode", format!("unknown input mode `{other}`"))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::PreviousOutput => "previous_output",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealignerConfig {
    pub arch: RealignerArch,
    pub input_mode: InputMode,
    pub hidden_layers: usize,
    /// `None` means `k`.
    pub hidden_width: Option<usize>,
    pub training_policy: PolicyKind,
    /// Selection units intervened per training trajectory; `None` means all.
    pub train_horizon: Option<usize>,
    /// Whether `bce(u(ĉ), c)` at step 0 enters the post-hoc loss.
    pub include_initial_step: bool,
    pub train: TrainConfig,
}

impl Default for RealignerConfig {
    fn default() -> Self {
        Self {
            arch: RealignerArch::Feedforward,
            input_mode: InputMode::Original,
            hidden_layers: 2,
            hidden_width: None,
            training_policy: PolicyKind::ucp(),
            train_horizon: None,
            include_initial_step: false,
            train: TrainConfig::default(),
        }
    }
}

impl RealignerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.hidden_layers) {
            return Err(Error::field("hidden_layers", "must be 1, 2 or 3"));
        }
        if self.hidden_width == Some(0) {
            return Err(Error::field("hidden_width", "must be >= 1"));
        }
        self.train.validate()
    }

    pub fn width_for(&self, num_concepts: usize) -> usize {
        self.hidden_width.unwrap_or(num_concepts).max(1)
    }
}

/// Layer stacks of `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum RealignerNet {
    Feedforward {
        mlp: Mlp,
    },
    /// A recurrent cell followed by a dense readout.
    Recurrent {
        cell: LstmCell,
        readout: Mlp,
    },
}

/// Tape handles of a recurrent realigner's `(hidden, cell)`.
pub type TapeState = Option<(Var, Var)>;

impl RealignerNet {
    pub fn new(store: &mut ParamStore, k: usize, cfg: &RealignerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.width_for(k);
        let mut rng = rng_for(seed, 0x2EA1);
        match cfg.arch {
            RealignerArch::Feedforward => {
                let mut dims = vec![k];
                dims.extend(std::iter::repeat_n(width, cfg.hidden_layers));
                dims.push(k);
                let mlp = Mlp::new(store, "v", &dims, Activation::Relu, Activation::Identity, &mut rng)?;
                Ok(Self::Feedforward { mlp })
            }
            RealignerArch::Recurrent => {
                let cell = LstmCell::new(store, "v.cell", k, width, &mut rng)?;
                let mut dims = vec![width];
                dims.extend(std::iter::repeat_n(width, cfg.hidden_layers - 1));
                dims.push(k);
                let readout = Mlp::new(store, "v.out", &dims, Activation::Relu, Activation::Identity, &mut rng)?;
                Ok(Self::Recurrent { cell, readout })
            }
        }
    }

    pub fn num_concepts(&self) -> usize {
        match self {
            Self::Feedforward { mlp } => mlp.in_dim(),
            Self::Recurrent { readout, .. } => readout.out_dim(),
        }
    }

    pub fn initial_state<'a>(&self, tape: &mut Tape<'a>) -> TapeState {
        match self {
            Self::Feedforward { .. } => None,
            Self::Recurrent { cell, .. } => Some(cell.initial_state(tape)),
        }
    }

    /// `sigmoid(v(input))`; recurrent nets thread `state`.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        input: Var,
        state: TapeState,
    ) -> Result<(Var, TapeState)> {
        let k = self.num_concepts();
        if tape.dim(input) != k {
            return Err(Error::shape("realigner input", &[k], &[tape.dim(input)]));
        }
        match self {
            Self::Feedforward { mlp } => {
                let z = mlp.forward(tape, store, input)?;
                Ok((tape.sigmoid(z), state))
            }
            Self::Recurrent { cell, readout } => {
                let st = match state {
                    Some(s) => s,
                    None => cell.initial_state(tape),
                };
                let (h, c) = cell.step(tape, store, st, input)?;
                let z = readout.forward(tape, store, h)?;
                Ok((tape.sigmoid(z), Some((h, c))))
            }
        }
    }

    /// Masked realignment `u`: ground truth on the mask, `v` elsewhere.
    pub fn realign<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        input: Var,
        mask: &[Option<f64>],
        state: TapeState,
    ) -> Result<(Var, TapeState)> {
        let (out, st) = self.forward(tape, store, input, state)?;
        Ok((tape.splice(out, mask)?, st))
    }
}

/// A trained (or freshly initialized) realigner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realigner {
    pub config: RealignerConfig,
    pub net: RealignerNet,
    pub params: ParamStore,
    /// Checksum of the base model this realigner was trained against.
    #[serde(default)]
    pub base_checksum: Option<String>,
}

impl Realigner {
    pub fn new(num_concepts: usize, config: RealignerConfig, seed: u64) -> Result<Self> {
        if num_concepts == 0 {
            return Err(Error::field("num_concepts", "must be >= 1"));
        }
        let mut params = ParamStore::new();
        let net = RealignerNet::new(&mut params, num_concepts, &config, seed)?;
        Ok(Self {
            config,
            net,
            params,
            base_checksum: None,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.net.num_concepts()
    }
}

/// Per-trajectory memory of a realigner (empty for feed-forward nets).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RealignState {
    pub recurrent: Option<RecurrentState>,
}

fn check_probs(input: &[f64], k: usize) -> Result<()> {
    if input.len() != k {
        return Err(Error::shape("realigner input", &[k], &[input.len()]));
    }
    if input.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::field("input", "concept probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// `κ = sigmoid(v(input))` and the next recurrent state.
pub fn crm_forward(
    realigner: &Realigner,
    input: &[f64],
    state: Option<&RecurrentState>,
) -> Result<(Vec<f64>, Option<RecurrentState>)> {
    check_probs(input, realigner.num_concepts())?;
    let mut tape = Tape::new();
    let x = tape.constant(input.to_vec());
    let st = match (&realigner.net, state) {
        (RealignerNet::Recurrent { .. }, Some(s)) => {
            let h = tape.constant(s.hidden.clone());
            let c = tape.constant(s.cell.clone());
            Some((h, c))
        }
        _ => None,
    };
    let (out, next) = realigner.net.forward(&mut tape, &realigner.params, x, st)?;
    let next = next.map(|(h, c)| RecurrentState {
        hidden: tape.value(h).to_vec(),
        cell: tape.value(c).to_vec(),
    });
    Ok((tape.value(out).to_vec(), next))
}

/// `u(c̃_t)`: `c̃_t` on `intervened`, `v(c̃_t)` elsewhere.
pub fn realign_masked(
    realigner: &Realigner,
    c_tilde: &[f64],
    intervened: &std::collections::BTreeSet<usize>,
    state: Option<&RecurrentState>,
) -> Result<(Vec<f64>, Option<RecurrentState>)> {
    let k = realigner.num_concepts();
    if let Some(&bad) = intervened.iter().find(|&&i| i >= k) {
        return Err(Error::IndexOutOfRange { index: bad, len: k });
    }
    let (mut out, next) = crm_forward(realigner, c_tilde, state)?;
    for &i in intervened {
        out[i] = c_tilde[i];
    }
    Ok((out, next))
}

/// Builds the realigner input for the current step.
pub fn realigner_input(mode: InputMode, c_tilde: &[f64], previous: Option<&[f64]>, mask: &[Option<f64>]) -> Vec<f64> {
    match (mode, previous) {
        (InputMode::PreviousOutput, Some(prev)) => prev.iter().zip(mask).map(|(p, m)| m.unwrap_or(*p)).collect(),
        _ => c_tilde.to_vec(),
    }
}

/// Anything that can update a concept vector during a trajectory.
pub trait ConceptRealigner: Sync {
    fn num_concepts(&self) -> usize;

    fn input_mode(&self) -> InputMode;

    /// Masked realignment of `input`: entries with `Some` in `mask` are
    /// returned unchanged as those values.
    fn realign(&self, input: &[f64], mask: &[Option<f64>], state: &mut RealignState) -> Result<Vec<f64>>;

    /// Identifies the realigner in cache keys and curve metadata.
    fn fingerprint(&self) -> String;
}

impl ConceptRealigner for Realigner {
    fn num_concepts(&self) -> usize {
        Realigner::num_concepts(self)
    }

    fn input_mode(&self) -> InputMode {
        self.config.input_mode
    }

    fn realign(&self, input: &[f64], mask: &[Option<f64>], state: &mut RealignState) -> Result<Vec<f64>> {
        let k = Realigner::num_concepts(self);
        if mask.len() != k {
            return Err(Error::shape("realign mask", &[k], &[mask.len()]));
        }
        let (mut out, next) = crm_forward(self, input, state.recurrent.as_ref())?;
        for (o, m) in out.iter_mut().zip(mask) {
            if let Some(v) = m {
                *o = *v;
            }
        }
        state.recurrent = next;
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        let cfg = serde_json::to_string(&self.config).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(self.params.checksum().as_bytes());
        h.update(cfg.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Returns its input: realignment switched off while keeping the code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityRealigner {
    pub num_concepts: usize,
}

impl ConceptRealigner for IdentityRealigner {
    fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    fn input_mode(&self) -> InputMode {
        InputMode::Original
    }

    fn realign(&self, input: &[f64], mask: &[Option<f64>], _state: &mut RealignState) -> Result<Vec<f64>> {
        check_probs(input, self.num_concepts)?;
        if mask.len() != self.num_concepts {
            return Err(Error::shape("realign mask", &[self.num_concepts], &[mask.len()]));
        }
        Ok(input.iter().zip(mask).map(|(v, m)| m.unwrap_or(*v)).collect())
    }

    fn fingerprint(&self) -> String {
        format!("identity-{}", self.num_concepts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn realigner(arch: RealignerArch) -> Realigner {
        Realigner::new(
            3,
            RealignerConfig {
                arch,
                ..RealignerConfig::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_half() {
        for arch in [RealignerArch::Feedforward, RealignerArch::Recurrent] {
            let mut r = realigner(arch);
            r.params
                .tensors_mut()
                .iter_mut()
                .for_each(|t| t.values.iter_mut().for_each(|v| *v = 0.0));
            let (k, _) = crm_forward(&r, &[0.2, 0.9, 0.4], None).unwrap();
            assert_eq!(k, vec![0.5; 3]);
        }
    }

    #[test]
    fn feedforward_ignores_state() {
        let r = realigner(RealignerArch::Feedforward);
        let s = RecurrentState::zeros(3);
        let a = crm_forward(&r, &[0.2, 0.9, 0.4], None).unwrap();
        let b = crm_forward(&r, &[0.2, 0.9, 0.4], Some(&s)).unwrap();
        assert_eq!(a.0, b.0);
        assert!(a.1.is_none());
    }

    #[test]
    fn recurrent_threads_state() {
        let r = realigner(RealignerArch::Recurrent);
        let (a, s1) = crm_forward(&r, &[0.2, 0.9, 0.4], None).unwrap();
        let (b, _) = crm_forward(&r, &[0.2, 0.9, 0.4], s1.as_ref()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn masking_examples() {
        let r = realigner(RealignerArch::Feedforward);
        let c = [1.0, 0.2, 0.9];
        let all: BTreeSet<usize> = (0..3).collect();
        assert_eq!(realign_masked(&r, &c, &all, None).unwrap().0, c.to_vec());
        let none = BTreeSet::new();
        assert_eq!(
            realign_masked(&r, &c, &none, None).unwrap().0,
            crm_forward(&r, &c, None).unwrap().0
        );
        let (v, _) = crm_forward(&r, &c, None).unwrap();
        let one: BTreeSet<usize> = [0].into_iter().collect();
        assert_eq!(realign_masked(&r, &c, &one, None).unwrap().0, vec![1.0, v[1], v[2]]);
        let bad: BTreeSet<usize> = [3].into_iter().collect();
        assert!(realign_masked(&r, &c, &bad, None).is_err());
        assert!(crm_forward(&r, &[0.1, 0.2], None).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(RealignerConfig {
            hidden_layers: 4,
            ..RealignerConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!("lstm".parse::<RealignerArch>().unwrap(), RealignerArch::Recurrent);
        assert_eq!(
            "previous_output".parse::<InputMode>().unwrap(),
            InputMode::PreviousOutput
        );
    }

    #[test]
    fn previous_output_input_rewrites_mask() {
        let mask = [Some(1.0), None, None];
        let v = realigner_input(
            InputMode::PreviousOutput,
            &[1.0, 0.3, 0.3],
            Some(&[0.4, 0.6, 0.7]),
            &mask,
        );
        assert_eq!(v, vec![1.0, 0.6, 0.7]);
        let v = realigner_input(InputMode::Original, &[1.0, 0.3, 0.3], Some(&[0.4, 0.6, 0.7]), &mask);
        assert_eq!(v, vec![1.0, 0.3, 0.3]);
    }
}
