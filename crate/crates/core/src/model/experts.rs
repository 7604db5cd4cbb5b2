use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{dim_err, Result};
use crate::tensor::{Conv3dSpec, Tape, Tensor, Var};

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Position-wise linear map realised as a 1×1×1 convolution.
fn pointwise(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.conv3d(x, w, Some(b), Conv3dSpec::pointwise())
}

/// Channel-attention expert with a depthwise local-context convolution.
#[derive(Clone, Debug)]
pub struct AttentionExpert {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    /// Temperature is `exp(log_temp)`, so it stays positive.
    pub log_temp: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub local_w: ParamId,
    pub local_b: ParamId,
    pub channels: usize,
}

impl AttentionExpert {
    pub fn declare<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) -> Self {
        let proj = |store: &mut ParamStore, name: &str, rng: &mut R| {
            let w = store.add(format!("{prefix}.{name}.weight"), fan_in_uniform(&[c, c, 1, 1, 1], c, rng));
            let b = store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[c]));
            (w, b)
        };
        let (q_w, q_b) = proj(store, "q", rng);
        let (k_w, k_b) = proj(store, "k", rng);
        let (v_w, v_b) = proj(store, "v", rng);
        let log_temp = store.add(format!("{prefix}.log_temp"), Tensor::scalar(0.0));
        let (out_w, out_b) = proj(store, "out", rng);
        let local_w = store.add(
            format!("{prefix}.local.weight"),
            fan_in_uniform(&[c, 1, 3, 3, 3], 27, rng),
        );
        let local_b = store.add(format!("{prefix}.local.bias"), Tensor::zeros(&[c]));
        Self {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            log_temp,
            out_w,
            out_b,
            local_w,
            local_b,
            channels: c,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.q_w, self.q_b, self.k_w, self.k_b, self.v_w, self.v_b, self.log_temp, self.out_w,
            self.out_b, self.local_w, self.local_b,
        ]
    }

    /// Attention across channels: the C×C map costs O(C²·S) in the voxel
    /// count S.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let c = self.channels;
        if shape.len() != 4 || shape[0] != c {
            return dim_err(format!("attention expert expects [{c}, D, H, W], got {shape:?}"));
        }
        let s: usize = shape[1..].iter().product();
        if s == 0 {
            return dim_err("attention over an empty volume");
        }
        let q = pointwise(tape, x, p.var(self.q_w), p.var(self.q_b))?;
        let k = pointwise(tape, x, p.var(self.k_w), p.var(self.k_b))?;
        let v = pointwise(tape, x, p.var(self.v_w), p.var(self.v_b))?;
        let q = tape.reshape(q, &[c, s])?;
        let k = tape.reshape(k, &[c, s])?;
        let v = tape.reshape(v, &[c, s])?;
        let q = tape.l2_normalize_rows(q, 1e-12)?;
        let k = tape.l2_normalize_rows(k, 1e-12)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let temp = tape.exp(p.var(self.log_temp));
        let logits = tape.mul(logits, temp)?;
        let attn = tape.softmax(logits, 1)?;
        let y = tape.matmul(attn, v)?;
        let y = tape.reshape(y, &shape)?;
        let y = pointwise(tape, y, p.var(self.out_w), p.var(self.out_b))?;
        let local = tape.conv3d(
            y,
            p.var(self.local_w),
            Some(p.var(self.local_b)),
            Conv3dSpec::depthwise(3, c),
        )?;
        tape.add(y, local)
    }
}

/// Two-layer position-wise MLP, C → 2C → C with GELU.
#[derive(Clone, Debug)]
pub struct FfnExpert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl FfnExpert {
    pub fn declare<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) -> Self {
        let hidden = 2 * c;
        let w1 = store.add(
            format!("{prefix}.fc1.weight"),
            fan_in_uniform(&[hidden, c, 1, 1, 1], c, rng),
        );
        let b1 = store.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden]));
        let w2 = store.add(
            format!("{prefix}.fc2.weight"),
            fan_in_uniform(&[c, hidden, 1, 1, 1], hidden, rng),
        );
        let b2 = store.add(format!("{prefix}.fc2.bias"), Tensor::zeros(&[c]));
        Self {
            w1,
            b1,
            w2,
            b2,
            channels: c,
            hidden,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = pointwise(tape, x, p.var(self.w1), p.var(self.b1))?;
        let h = tape.gelu(h);
        pointwise(tape, h, p.var(self.w2), p.var(self.b2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BankKind {
    Attention,
    Ffn,
}

impl BankKind {
    pub fn label(self) -> &'static str {
        match self {
            BankKind::Attention => "att",
            BankKind::Ffn => "ffn",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Expert {
    Attention(AttentionExpert),
    Ffn(FfnExpert),
}

impl Expert {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Expert::Attention(e) => e.forward(tape, p, x),
            Expert::Ffn(e) => e.forward(tape, p, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Expert::Attention(e) => e.param_ids(),
            Expert::Ffn(e) => e.param_ids(),
        }
    }
}

/// M experts of one kind sharing input and output shapes.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub kind: BankKind,
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn declare<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: BankKind,
        c: usize,
        m: usize,
        rng: &mut R,
    ) -> Self {
        let experts = (0..m)
            .map(|i| {
                let name = format!("{prefix}.{i}");
                match kind {
                    BankKind::Attention => {
                        Expert::Attention(AttentionExpert::declare(store, &name, c, rng))
                    }
                    BankKind::Ffn => Expert::Ffn(FfnExpert::declare(store, &name, c, rng)),
                }
            })
            .collect();
        Self { kind, experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(Expert::param_ids).collect()
    }

    /// Weighted sum `Σ w[m]·E_m(x)`. Experts whose weight is exactly zero
    /// are not evaluated; with no active expert the result is a zero
    /// constant of `x`'s shape.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, x: Var, w: Var) -> Result<Var> {
        if tape.shape(w) != [self.len()] {
            return dim_err(format!(
                "bank of {} experts given weights of shape {:?}",
                self.len(),
                tape.shape(w)
            ));
        }
        let weights = tape.value(w).data().to_vec();
        let mut acc: Option<Var> = None;
        for (m, (e, &wm)) in self.experts.iter().zip(&weights).enumerate() {
            if wm == 0.0 {
                continue;
            }
            let y = e.forward(tape, p, x)?;
            let wv = tape.index(w, m)?;
            let term = tape.mul(y, wv)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => {
                let shape = tape.shape(x).to_vec();
                Ok(tape.constant(Tensor::zeros(&shape)))
            }
        }
    }
}
