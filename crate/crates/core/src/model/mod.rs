//! The dynamic-routing restoration network.
//!
//! A shallow 3×3×3 convolution lifts the single-channel input to `C`
//! feature channels, `N` dynamic routing blocks refine the features and a
//! final convolution maps them back to one channel, which is added to the
//! input (global residual). Each block holds an attention-expert bank and
//! an FFN-expert bank; a small router per bank picks the expert weights
//! from the pooled features and the previous router's hidden state.

mod checkpoint;
mod experts;
mod params;
mod router;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, network_from_bytes, save_checkpoint, CHECKPOINT_VERSION};
pub use experts::{AttentionExpert, BankKind, Expert, ExpertBank, FfnExpert};
pub use params::{Bound, ParamId, ParamStore};
pub use router::{apply_gate, top2_indices, DynamicRoutingModule, GateKind, Routed};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Conv3dSpec, Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels C.
    pub channels: usize,
    /// Experts per bank M.
    pub experts: usize,
    /// Dynamic routing blocks N.
    pub blocks: usize,
    /// Router hidden width C_h.
    pub router_hidden: usize,
    pub gate: GateKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            experts: 3,
            blocks: 3,
            router_hidden: 16,
            gate: GateKind::Relu,
        }
    }
}

impl ModelConfig {
    /// Single-expert baseline with the same width and depth.
    pub fn baseline(&self) -> Self {
        Self {
            experts: 1,
            gate: GateKind::Softmax,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("experts", self.experts),
            ("blocks", self.blocks),
            ("router_hidden", self.router_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.gate == GateKind::Top2 && self.experts < 2 {
            return Err(Error::Config(format!(
                "top2 gate needs at least 2 experts, model.experts = {}",
                self.experts
            )));
        }
        Ok(())
    }
}

/// Hidden state handed from one router to the next.
#[derive(Clone, Copy, Debug)]
pub struct RouterChainState {
    pub h: Var,
}

impl RouterChainState {
    pub fn zeros(tape: &mut Tape, width: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[width])),
        }
    }
}

/// Logits and gated weights emitted by one router during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteRecord {
    pub block: usize,
    pub bank: BankKind,
    pub logits: Vec<f32>,
    pub weights: Vec<f32>,
}

impl RouteRecord {
    /// Index of the largest weight, ties toward the lower index.
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// Pre-norm transformer block with routed attention and FFN banks.
#[derive(Clone, Debug)]
pub struct DynamicRoutingBlock {
    pub norm1_gain: ParamId,
    pub norm1_offset: ParamId,
    pub att_bank: ExpertBank,
    pub att_router: DynamicRoutingModule,
    pub norm2_gain: ParamId,
    pub norm2_offset: ParamId,
    pub ffn_bank: ExpertBank,
    pub ffn_router: DynamicRoutingModule,
    pub index: usize,
}

const NORM_EPS: f32 = 1e-5;

impl DynamicRoutingBlock {
    fn declare(store: &mut ParamStore, index: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, m, c_h) = (cfg.channels, cfg.experts, cfg.router_hidden);
        let p = format!("block{index}");
        let norm1_gain = store.add(format!("{p}.norm1.gain"), Tensor::full(&[c], 1.0));
        let norm1_offset = store.add(format!("{p}.norm1.offset"), Tensor::zeros(&[c]));
        let att_bank = ExpertBank::declare(store, &format!("{p}.att"), BankKind::Attention, c, m, rng);
        let att_router = DynamicRoutingModule::declare(store, &format!("{p}.att_router"), c, c_h, m, rng);
        let norm2_gain = store.add(format!("{p}.norm2.gain"), Tensor::full(&[c], 1.0));
        let norm2_offset = store.add(format!("{p}.norm2.offset"), Tensor::zeros(&[c]));
        let ffn_bank = ExpertBank::declare(store, &format!("{p}.ffn"), BankKind::Ffn, c, m, rng);
        let ffn_router = DynamicRoutingModule::declare(store, &format!("{p}.ffn_router"), c, c_h, m, rng);
        Self {
            norm1_gain,
            norm1_offset,
            att_bank,
            att_router,
            norm2_gain,
            norm2_offset,
            ffn_bank,
            ffn_router,
            index,
        }
    }

    fn record(&self, tape: &Tape, bank: BankKind, r: &Routed) -> RouteRecord {
        RouteRecord {
            block: self.index,
            bank,
            logits: tape.value(r.logits).data().to_vec(),
            weights: tape.value(r.weights).data().to_vec(),
        }
    }

    /// `u = x + fuse(att, norm1(x))`, `y = u + fuse(ffn, norm2(u))`, with
    /// the router chain threaded att → ffn.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        chain: RouterChainState,
        gate: GateKind,
    ) -> Result<(Var, RouterChainState, [RouteRecord; 2])> {
        let n1 = tape.layernorm(x, p.var(self.norm1_gain), p.var(self.norm1_offset), NORM_EPS)?;
        let ra = self.att_router.route(tape, p, n1, chain.h, gate)?;
        let fa = self.att_bank.fuse(tape, p, n1, ra.weights)?;
        let u = tape.add(x, fa)?;
        let n2 = tape.layernorm(u, p.var(self.norm2_gain), p.var(self.norm2_offset), NORM_EPS)?;
        let rf = self.ffn_router.route(tape, p, n2, ra.hidden, gate)?;
        let ff = self.ffn_bank.fuse(tape, p, n2, rf.weights)?;
        let y = tape.add(u, ff)?;
        let logs = [
            self.record(tape, BankKind::Attention, &ra),
            self.record(tape, BankKind::Ffn, &rf),
        ];
        Ok((y, RouterChainState { h: rf.hidden }, logs))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm1_gain, self.norm1_offset];
        ids.extend(self.att_bank.param_ids());
        ids.extend(self.att_router.param_ids());
        ids.extend([self.norm2_gain, self.norm2_offset]);
        ids.extend(self.ffn_bank.param_ids());
        ids.extend(self.ffn_router.param_ids());
        ids
    }
}

/// A labelled subset of parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub label: String,
    pub ids: Vec<ParamId>,
}

/// Result of [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub est: Var,
    /// One record per router in forward order: block 0 att, block 0 ffn, …
    pub routes: Vec<RouteRecord>,
}

/// The full network and its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    params: ParamStore,
    head_w: ParamId,
    head_b: ParamId,
    blocks: Vec<DynamicRoutingBlock>,
    tail_w: ParamId,
    tail_b: ParamId,
}

impl Network {
    /// Builds the network with parameters drawn from `seed`. The tail
    /// convolution starts at zero so the untrained network is the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let head_w = store.add("head.weight", experts::fan_in_uniform(&[c, 1, 3, 3, 3], 27, &mut rng));
        let head_b = store.add("head.bias", Tensor::zeros(&[c]));
        let blocks = (0..config.blocks)
            .map(|i| DynamicRoutingBlock::declare(&mut store, i, &config, &mut rng))
            .collect();
        let tail_w = store.add("tail.weight", Tensor::zeros(&[1, c, 3, 3, 3]));
        let tail_b = store.add("tail.bias", Tensor::zeros(&[1]));
        Ok(Self {
            config,
            params: store,
            head_w,
            head_b,
            blocks,
            tail_w,
            tail_b,
        })
    }

    /// Redraws every parameter from `seed`.
    pub fn init_parameters(&mut self, seed: u64) {
        let fresh = Self::new(self.config.clone(), seed).expect("config already validated");
        self.params = fresh.params;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[DynamicRoutingBlock] {
        &self.blocks
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn tail(&self) -> (ParamId, ParamId) {
        (self.tail_w, self.tail_b)
    }

    /// Expert parameters of each bank, one group per block and bank kind.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.blocks
            .iter()
            .flat_map(|b| {
                [(BankKind::Attention, &b.att_bank), (BankKind::Ffn, &b.ffn_bank)].map(|(k, bank)| {
                    ParamGroup {
                        label: format!("block{}.{}", b.index, k.label()),
                        ids: bank.param_ids(),
                    }
                })
            })
            .collect()
    }

    /// `est = low + tail(blocks(head(low)))` for `low` of shape `[1, D, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, low: Var) -> Result<ForwardOutput> {
        let shape = tape.shape(low).to_vec();
        match shape.as_slice() {
            [1, d, h, w] if *d >= 3 && *h >= 3 && *w >= 3 => {}
            _ => {
                return dim_err(format!(
                    "network input must be [1, D, H, W] with D, H, W >= 3, got {shape:?}"
                ))
            }
        }
        let gate = self.config.gate;
        let mut f = tape.conv3d(low, p.var(self.head_w), Some(p.var(self.head_b)), Conv3dSpec::same(3))?;
        let mut chain = RouterChainState::zeros(tape, self.config.router_hidden);
        let mut routes = Vec::with_capacity(2 * self.blocks.len());
        for block in &self.blocks {
            let (y, next, logs) = block.forward(tape, p, f, chain, gate)?;
            f = y;
            chain = next;
            routes.extend(logs);
        }
        let r = tape.conv3d(f, p.var(self.tail_w), Some(p.var(self.tail_b)), Conv3dSpec::same(3))?;
        let est = tape.add(low, r)?;
        Ok(ForwardOutput { est, routes })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, low: &Tensor) -> Result<(Tensor, Vec<RouteRecord>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(low.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok((tape.value(out.est).clone(), out.routes))
    }

    /// Replaces the parameters with `params`, which must match this
    /// network's layout.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let same_layout = params.len() == self.params.len()
            && self.params.ids().all(|id| {
                params.name(id) == self.params.name(id)
                    && params.get(id).shape() == self.params.get(id).shape()
            });
        if !same_layout {
            return dim_err("parameter layout does not match the network");
        }
        self.params = params;
        Ok(())
    }
}
