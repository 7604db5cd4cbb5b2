use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::experts::fan_in_uniform;
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How router logits become expert weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `max(logit, 0)`, unnormalized; exact zeros skip experts.
    #[default]
    Relu,
    Softmax,
    /// Softmax over the two largest logits, zero elsewhere.
    Top2,
    /// ReLU gate with the cross-layer hidden state replaced by zeros.
    NoH,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [GateKind::Relu, GateKind::Softmax, GateKind::Top2, GateKind::NoH];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Relu => "relu",
            GateKind::Softmax => "softmax",
            GateKind::Top2 => "top2",
            GateKind::NoH => "no_h",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            GateKind::Relu => 0,
            GateKind::Softmax => 1,
            GateKind::Top2 => 2,
            GateKind::NoH => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }

    /// Whether the router sees the previous router's hidden state.
    pub fn uses_hidden(self) -> bool {
        self != GateKind::NoH
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown gate {s:?}; allowed values are relu, softmax, top2, no_h"
                ))
            })
    }
}

/// Indices of the two largest values, ties broken toward the lower index.
pub fn top2_indices(v: &[f32]) -> [usize; 2] {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut keep = [order[0], order[1]];
    keep.sort_unstable();
    keep
}

/// Applies `gate` to a logit vector.
pub fn apply_gate(tape: &mut Tape, logits: Var, gate: GateKind) -> Result<Var> {
    match gate {
        GateKind::Relu | GateKind::NoH => Ok(tape.relu(logits)),
        GateKind::Softmax => tape.softmax(logits, 0),
        GateKind::Top2 => {
            let m = tape.value(logits).numel();
            if m < 2 {
                return Err(Error::Config(format!("top2 gate needs at least 2 experts, got {m}")));
            }
            let keep = top2_indices(tape.value(logits).data());
            tape.masked_softmax(logits, &keep)
        }
    }
}

/// MLP router mapping `[gap(x), h]` to expert weights and a hidden state.
#[derive(Clone, Debug)]
pub struct DynamicRoutingModule {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub channels: usize,
    pub hidden: usize,
    pub experts: usize,
}

/// Output of one router evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    pub logits: Var,
    pub weights: Var,
    pub hidden: Var,
}

impl DynamicRoutingModule {
    pub fn declare<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        c_h: usize,
        m: usize,
        rng: &mut R,
    ) -> Self {
        let w_in = store.add(
            format!("{prefix}.w_in"),
            fan_in_uniform(&[c + c_h, c_h], c + c_h, rng),
        );
        let b_in = store.add(format!("{prefix}.b_in"), Tensor::zeros(&[c_h]));
        let w_out = store.add(format!("{prefix}.w_out"), fan_in_uniform(&[c_h, m], c_h, rng));
        let b_out = store.add(format!("{prefix}.b_out"), Tensor::zeros(&[m]));
        Self {
            w_in,
            b_in,
            w_out,
            b_out,
            channels: c,
            hidden: c_h,
            experts: m,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_in, self.b_in, self.w_out, self.b_out]
    }

    /// `hidden = relu(W_in·[gap(x), h_prev] + b_in)`,
    /// `logits = W_out·hidden + b_out`, weights = gate(logits).
    pub fn route(&self, tape: &mut Tape, p: &Bound, x: Var, h_prev: Var, gate: GateKind) -> Result<Routed> {
        if tape.shape(h_prev) != [self.hidden] {
            return dim_err(format!(
                "router hidden state must be [{}], got {:?}",
                self.hidden,
                tape.shape(h_prev)
            ));
        }
        let h_in = if gate.uses_hidden() {
            h_prev
        } else {
            tape.constant(Tensor::zeros(&[self.hidden]))
        };
        let pooled = tape.gap(x)?;
        let z = tape.concat(pooled, h_in, 0)?;
        let z = tape.reshape(z, &[1, self.channels + self.hidden])?;
        let hid = tape.matmul(z, p.var(self.w_in))?;
        let hid = tape.reshape(hid, &[self.hidden])?;
        let hid = tape.add(hid, p.var(self.b_in))?;
        let hidden = tape.relu(hid);
        let hrow = tape.reshape(hidden, &[1, self.hidden])?;
        let logits = tape.matmul(hrow, p.var(self.w_out))?;
        let logits = tape.reshape(logits, &[self.experts])?;
        let logits = tape.add(logits, p.var(self.b_out))?;
        let weights = apply_gate(tape, logits, gate)?;
        Ok(Routed {
            logits,
            weights,
            hidden,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_of(logits: &[f32], gate: GateKind) -> Result<Vec<f32>> {
        let mut t = Tape::new();
        let l = t.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
        let w = apply_gate(&mut t, l, gate)?;
        Ok(t.value(w).data().to_vec())
    }

    #[test]
    fn relu_gate_example() {
        assert_eq!(gate_of(&[-1.0, 0.5, 2.0], GateKind::Relu).unwrap(), vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn softmax_gate_example() {
        for w in gate_of(&[0.0, 0.0, 0.0], GateKind::Softmax).unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn top2_gate_example() {
        let w = gate_of(&[0.1, 0.3, 0.2], GateKind::Top2).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.524_979_2).abs() < 1e-6, "{}", w[1]);
        assert!((w[2] - 0.475_020_8).abs() < 1e-6, "{}", w[2]);
    }

    #[test]
    fn top2_needs_two_experts() {
        assert!(matches!(gate_of(&[1.0], GateKind::Top2), Err(Error::Config(_))));
    }

    #[test]
    fn top2_ties_prefer_lower_index() {
        assert_eq!(top2_indices(&[1.0, 1.0, 1.0]), [0, 1]);
        assert_eq!(top2_indices(&[0.0, 2.0, 2.0, 1.0]), [1, 2]);
    }

    #[test]
    fn gate_names_round_trip() {
        for g in GateKind::ALL {
            assert_eq!(g.name().parse::<GateKind>().unwrap(), g);
            assert_eq!(GateKind::from_tag(g.tag()), Some(g));
        }
        let err = "top1".parse::<GateKind>().unwrap_err().to_string();
        assert!(err.contains("relu") && err.contains("top2"), "{err}");
    }
}
