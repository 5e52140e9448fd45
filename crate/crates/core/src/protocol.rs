//! Client and server state machines for one U-shaped split step:
//!
//! ```text
//! client: x -> f -> cut -> Z_FWD ------------> server: lift -> g -> U_FWD
//! client: h -> CE (+ WCC) -> GRAD_U ---------> server: backprop g, lift; step -> GRAD_Z
//! client: fuse GRAD_Z with the WCC gradient, backprop cut and f; step
//! ```
//!
//! Labels and raw inputs stay on the client; the server sees only the cut
//! payload and the gradient with respect to its own output.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bottleneck::{init_projection_with, BasisInit, Channel1x1Codec, LiftbackMlp, ProjectionBasis};
use crate::data::{BatchSampler, Dataset};
use crate::error::{invalid, Error, Result};
use crate::linalg::{fnv1a64, RngStream, Tensor};
use crate::nn::{cross_entropy, Grads, Mode, Network, Optimizer, OptimizerRule, Tape};
use crate::transport::{decode, encode, Endpoint, MsgType, WireMessage};
use crate::wcc::{wcc_grad, wcc_loss, WccConfig};

/// `Z_FWD` frames carrying this step number are inference requests: the
/// server answers with `U_FWD` in eval mode and keeps no tape.
pub const EVAL_STEP: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LiftSpec {
    /// Multiply by `R` (no trainable parameters).
    Fixed,
    /// Two-layer MLP `k -> hidden -> d`.
    Learned { hidden: usize },
}

/// What crosses the cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CutSpec {
    /// The full `d`-dimensional activation.
    Raw,
    Projection {
        k: usize,
        #[serde(default)]
        init: BasisInit,
        lift: LiftSpec,
    },
    /// Learned 1x1 convolution codec at the requested compression ratio.
    Channel1x1 { cr: f64 },
}

impl CutSpec {
    /// Floats per sample on the cut for a head producing `feature_shape`.
    pub fn payload_width(&self, feature_shape: &[usize]) -> Result<usize> {
        let d: usize = feature_shape.iter().product();
        match *self {
            CutSpec::Raw => Ok(d),
            CutSpec::Projection { k, .. } => {
                if k == 0 || k > d {
                    return Err(invalid(format!("projection width k={k} must be in [1, d={d}]")));
                }
                Ok(k)
            }
            CutSpec::Channel1x1 { cr } => match feature_shape {
                [c, h, w] => Ok(crate::bottleneck::codec_channels(*c, cr) * h * w),
                s => Err(invalid(format!("1x1 codec needs a [C, H, W] cut, got {s:?}"))),
            },
        }
    }
}

/// Seeds for the cut components; the codec seed is shared by both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CutSeeds {
    pub basis: u64,
    pub lift: u64,
    pub codec: u64,
}

pub fn build_codec(feature_shape: &[usize], cr: f64, seed: u64) -> Result<Channel1x1Codec> {
    Channel1x1Codec::new(feature_shape, cr, &mut RngStream::new(seed))
}

fn with_batch(b: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(b);
    s.extend_from_slice(per_sample);
    s
}

fn flat(t: Tensor) -> Tensor {
    t.flatten_rows()
}

// ---------------------------------------------------------------- client

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    SentForward,
    AwaitCutGrad,
}

/// Trainable client parameters: head `f`, optional 1x1 encoder, tail `h`,
/// and their optimizer. Shared by all clients under a shared head.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub head: Network,
    pub codec: Option<Network>,
    pub tail: Network,
    pub optimizer: Optimizer,
}

impl ClientModel {
    pub fn new(head: Network, codec: Option<Network>, tail: Network, rule: OptimizerRule) -> Self {
        Self {
            head,
            codec,
            tail,
            optimizer: Optimizer::new(rule),
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.head.set_mode(mode);
        if let Some(c) = &mut self.codec {
            c.set_mode(mode);
        }
        self.tail.set_mode(mode);
    }

    /// All parameters in optimizer order: head, codec, tail.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.head.params();
        if let Some(c) = &self.codec {
            p.extend(c.params());
        }
        p.extend(self.tail.params());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn step(&mut self, head: &Grads, codec: Option<&Grads>, tail: &Grads) -> Result<()> {
        let mut ps = self.head.params_mut();
        let mut gs: Vec<&Tensor> = head.0.iter().collect();
        if let Some(c) = &mut self.codec {
            ps.extend(c.params_mut());
            gs.extend(codec.map(|g| g.0.iter()).into_iter().flatten());
        }
        ps.extend(self.tail.params_mut());
        gs.extend(tail.0.iter());
        self.optimizer.apply(&mut ps, &gs)
    }
}

#[derive(Debug)]
struct ClientPending {
    step: u64,
    labels: Vec<usize>,
    head_tape: Tape,
    codec_tape: Option<Tape>,
    z_tilde: Tensor,
    ce: f32,
    wcc: f32,
    wcc_grad: Option<Tensor>,
    tail_grads: Option<Grads>,
}

/// Losses of one completed client step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f32,
    pub wcc: f32,
    pub total: f32,
}

/// Per-client protocol state. Parameters live in a [`ClientModel`] passed
/// to each call, so several clients can take turns on one shared model.
#[derive(Debug)]
pub struct ClientState {
    id: u32,
    cut: CutSpec,
    basis: Option<ProjectionBasis>,
    wcc: WccConfig,
    phase: Phase,
    pending: Option<ClientPending>,
}

impl ClientState {
    pub fn new(id: u32, cut: CutSpec, wcc: WccConfig) -> Self {
        Self {
            id,
            cut,
            basis: None,
            wcc,
            phase: Phase::Idle,
            pending: None,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn basis(&self) -> Option<&ProjectionBasis> {
        self.basis.as_ref()
    }

    pub fn wcc(&self) -> WccConfig {
        self.wcc
    }

    /// Changes the compaction weight from the next step on.
    pub fn set_wcc(&mut self, wcc: WccConfig) {
        self.wcc = wcc;
    }

    pub fn needs_setup(&self) -> bool {
        matches!(self.cut, CutSpec::Projection { .. }) && self.basis.is_none()
    }

    /// Installs the basis carried by a `SETUP_R` frame.
    pub fn receive_setup(&mut self, msg: &WireMessage) -> Result<()> {
        if msg.msg_type != MsgType::SetupR {
            return Err(Error::Protocol(format!("expected SETUP_R, got {}", msg.msg_type.name())));
        }
        if msg.client_id != self.id {
            return Err(Error::Protocol(format!(
                "setup addressed to client {} delivered to {}",
                msg.client_id, self.id
            )));
        }
        let CutSpec::Projection { k, .. } = self.cut else {
            return Err(Error::Protocol("this cut does not use a projection basis".into()));
        };
        let h = msg.setup.ok_or_else(|| Error::Protocol("SETUP_R without header".into()))?;
        if h.k as usize != k {
            return Err(Error::Protocol(format!("basis has k={}, client expects {k}", h.k)));
        }
        let r = Tensor::new(vec![h.d as usize, h.k as usize], msg.payload.clone())?;
        self.basis = Some(ProjectionBasis::from_parts(r, h.seed)?);
        Ok(())
    }

    /// Head, optional codec and projection; returns `(z~, head tape, codec tape)`.
    fn cut_forward(&self, model: &mut ClientModel, x: &Tensor) -> Result<(Tensor, Tape, Option<Tape>)> {
        let (z, head_tape) = model.head.forward(x)?;
        let (z_tilde, codec_tape) = match (&self.cut, &mut model.codec) {
            (CutSpec::Raw, _) => (flat(z), None),
            (CutSpec::Projection { .. }, _) => {
                let basis = self
                    .basis
                    .as_ref()
                    .ok_or_else(|| Error::ProtocolOrder("no basis received before forward".into()))?;
                (basis.project(&flat(z))?, None)
            }
            (CutSpec::Channel1x1 { .. }, Some(codec)) => {
                let (c, t) = codec.forward(&z)?;
                (flat(c), Some(t))
            }
            (CutSpec::Channel1x1 { .. }, None) => {
                return Err(invalid("1x1 cut needs a codec encoder in the client model"))
            }
        };
        Ok((z_tilde, head_tape, codec_tape))
    }

    /// Steps 1-3: `z~ = cut(f(x))`, sent as `Z_FWD`.
    pub fn client_forward(
        &mut self,
        model: &mut ClientModel,
        x: &Tensor,
        labels: &[usize],
        step: u64,
    ) -> Result<WireMessage> {
        if self.phase != Phase::Idle {
            return Err(Error::ProtocolOrder(format!("forward in phase {:?}", self.phase)));
        }
        if step == EVAL_STEP {
            return Err(invalid("step number reserved for inference"));
        }
        if x.batch() != labels.len() {
            return Err(invalid(format!("{} inputs but {} labels", x.batch(), labels.len())));
        }
        let (z_tilde, head_tape, codec_tape) = self.cut_forward(model, x)?;
        let msg = WireMessage::from_tensor(MsgType::ZFwd, self.id, step, &z_tilde)?;
        self.pending = Some(ClientPending {
            step,
            labels: labels.to_vec(),
            head_tape,
            codec_tape,
            z_tilde,
            ce: 0.0,
            wcc: 0.0,
            wcc_grad: None,
            tail_grads: None,
        });
        self.phase = Phase::SentForward;
        Ok(msg)
    }

    fn check_reply(&self, msg: &WireMessage, want: MsgType, step: u64) -> Result<()> {
        if msg.msg_type != want {
            return Err(Error::Protocol(format!(
                "expected {}, got {}",
                want.name(),
                msg.msg_type.name()
            )));
        }
        if msg.client_id != self.id || msg.step != step {
            return Err(Error::Protocol(format!(
                "{} for client {} step {} does not match client {} step {step}",
                want.name(),
                msg.client_id,
                msg.step,
                self.id
            )));
        }
        Ok(())
    }

    /// Steps 7-13: tail, losses and `GRAD_U = dCE/du`.
    pub fn client_loss_and_backward_phase1(
        &mut self,
        model: &mut ClientModel,
        u_msg: &WireMessage,
    ) -> Result<WireMessage> {
        if self.phase != Phase::SentForward {
            return Err(Error::ProtocolOrder(format!("U_FWD in phase {:?}", self.phase)));
        }
        let step = self.pending.as_ref().expect("pending state in SentForward").step;
        self.check_reply(u_msg, MsgType::UFwd, step)?;
        let p = self.pending.as_mut().expect("checked above");
        let b = p.labels.len();
        if u_msg.batch as usize != b || u_msg.dim as usize != model.tail.input_len() {
            return Err(invalid(format!(
                "U_FWD is {}x{}, tail expects {b}x{}",
                u_msg.batch,
                u_msg.dim,
                model.tail.input_len()
            )));
        }
        let u = u_msg.tensor()?.reshape(&with_batch(b, model.tail.input_shape()))?;
        let (logits, tape) = model.tail.forward(&u)?;
        let (ce, dlogits) = cross_entropy(&logits, &p.labels)?;
        let mut tail_grads = model.tail.zero_grads();
        let grad_u = model.tail.backward_from_seed(&tape, &dlogits, &mut tail_grads)?;
        p.ce = ce;
        p.wcc = wcc_loss(&p.z_tilde, &p.labels)?;
        if self.wcc.is_active() {
            p.wcc_grad = Some(wcc_grad(&p.z_tilde, &p.labels)?);
        }
        p.tail_grads = Some(tail_grads);
        let msg = WireMessage::from_tensor(MsgType::GradU, self.id, p.step, &flat(grad_u))?;
        self.phase = Phase::AwaitCutGrad;
        Ok(msg)
    }

    /// Steps 18-20: fuse `GRAD_Z` with `lambda * dWCC/dz~`, backprop through
    /// the cut and `f`, and step the client optimizer.
    pub fn client_backward_phase2(&mut self, model: &mut ClientModel, grad_z_msg: &WireMessage) -> Result<StepLosses> {
        if self.phase != Phase::AwaitCutGrad {
            return Err(Error::ProtocolOrder(format!("GRAD_Z in phase {:?}", self.phase)));
        }
        let p = self.pending.as_ref().expect("pending state in AwaitCutGrad");
        self.check_reply(grad_z_msg, MsgType::GradZ, p.step)?;
        let b = p.labels.len();
        if grad_z_msg.batch as usize != b || grad_z_msg.dim as usize != p.z_tilde.row_len() {
            return Err(invalid(format!(
                "GRAD_Z is {}x{}, expected {b}x{}",
                grad_z_msg.batch,
                grad_z_msg.dim,
                p.z_tilde.row_len()
            )));
        }
        let p = self.pending.take().expect("checked above");
        let mut g = grad_z_msg.tensor()?;
        if let Some(w) = &p.wcc_grad {
            let lambda = self.wcc.lambda;
            for (a, &v) in g.data_mut().iter_mut().zip(w.data()) {
                *a += lambda * v;
            }
        }
        let head_shape = model.head.output_shape().to_vec();
        let mut codec_grads = None;
        let grad_z = match (&self.cut, &model.codec) {
            (CutSpec::Raw, _) => g,
            (CutSpec::Projection { .. }, _) => self.basis.as_ref().expect("checked at forward").backprop_projection(&g)?,
            (CutSpec::Channel1x1 { .. }, Some(codec)) => {
                let mut cg = codec.zero_grads();
                let tape = p.codec_tape.as_ref().expect("codec tape");
                let seed = g.reshape(&with_batch(b, codec.output_shape()))?;
                let gz = codec.backward_from_seed(tape, &seed, &mut cg)?;
                codec_grads = Some(cg);
                gz
            }
            (CutSpec::Channel1x1 { .. }, None) => unreachable!("rejected at forward"),
        };
        let seed = grad_z.reshape(&with_batch(b, &head_shape))?;
        let mut head_grads = model.head.zero_grads();
        model.head.backward_from_seed(&p.head_tape, &seed, &mut head_grads)?;
        let tail_grads = p.tail_grads.as_ref().expect("set in phase 1");
        model.step(&head_grads, codec_grads.as_ref(), tail_grads)?;
        self.phase = Phase::Idle;
        let total = crate::wcc::total_loss(p.ce, p.wcc, &self.wcc);
        Ok(StepLosses {
            ce: p.ce,
            wcc: p.wcc,
            total,
        })
    }

    /// Eval-mode cut payload for inference requests.
    pub fn infer_cut(&self, model: &mut ClientModel, x: &Tensor) -> Result<Tensor> {
        self.cut_forward(model, x).map(|(z, _, _)| z)
    }
}

// ---------------------------------------------------------------- server

/// Server-side map from the cut payload back to the backbone input.
#[derive(Debug, Clone)]
pub enum Lift {
    Identity,
    Fixed(ProjectionBasis),
    Learned(LiftbackMlp),
    Decoder(Network),
}

impl Lift {
    pub fn network(&self) -> Option<&Network> {
        match self {
            Lift::Learned(m) => Some(m.network()),
            Lift::Decoder(n) => Some(n),
            _ => None,
        }
    }

    fn network_mut(&mut self) -> Option<&mut Network> {
        match self {
            Lift::Learned(m) => Some(m.network_mut()),
            Lift::Decoder(n) => Some(n),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.network().map_or(0, |n| n.param_count())
    }
}

#[derive(Debug)]
struct ServerPending {
    client: u32,
    step: u64,
    batch: usize,
    lift_tape: Option<Tape>,
    backbone_tape: Tape,
}

/// Running per-client sums of server inputs and backbone outputs.
#[derive(Debug, Clone, Default)]
pub struct ActivationLog {
    sums: BTreeMap<u32, (usize, Vec<f64>, Vec<f64>)>,
}

impl ActivationLog {
    fn add(&mut self, client: u32, z_tilde: &Tensor, u: &Tensor) {
        let e = self
            .sums
            .entry(client)
            .or_insert_with(|| (0, vec![0.0; z_tilde.row_len()], vec![0.0; u.row_len()]));
        for i in 0..z_tilde.batch() {
            e.0 += 1;
            for (a, &v) in e.1.iter_mut().zip(z_tilde.row(i)) {
                *a += v as f64;
            }
            for (a, &v) in e.2.iter_mut().zip(u.row(i)) {
                *a += v as f64;
            }
        }
    }

    /// Mean backbone output per client, in client order.
    pub fn mean_outputs(&self) -> Vec<(u32, Vec<f64>)> {
        self.sums
            .iter()
            .map(|(&c, (n, _, s))| (c, s.iter().map(|v| v / *n as f64).collect()))
            .collect()
    }

    /// Mean server input (cut payload) per client.
    pub fn mean_inputs(&self) -> Vec<(u32, Vec<f64>)> {
        self.sums
            .iter()
            .map(|(&c, (n, s, _))| (c, s.iter().map(|v| v / *n as f64).collect()))
            .collect()
    }
}

#[derive(Debug)]
pub struct ServerState {
    backbone: Network,
    lift: Lift,
    optimizer: Optimizer,
    basis: Option<ProjectionBasis>,
    roster: BTreeSet<u32>,
    width: usize,
    pending: Option<ServerPending>,
    log: Option<ActivationLog>,
    log_from_step: u64,
}

/// Builds the server for `cut` over a head producing `feature_shape`, plus
/// the `SETUP_R` broadcast (one frame per rostered client) when the cut
/// uses a projection.
pub fn server_setup(
    backbone: Network,
    cut: &CutSpec,
    feature_shape: &[usize],
    roster: &[u32],
    rule: OptimizerRule,
    seeds: CutSeeds,
) -> Result<(ServerState, Vec<WireMessage>)> {
    let d: usize = feature_shape.iter().product();
    if backbone.input_len() != d {
        return Err(invalid(format!(
            "backbone consumes {} values per sample but the cut carries d={d}",
            backbone.input_len()
        )));
    }
    if roster.is_empty() {
        return Err(invalid("empty client roster"));
    }
    let width = cut.payload_width(feature_shape)?;
    let mut basis = None;
    let lift = match *cut {
        CutSpec::Raw => Lift::Identity,
        CutSpec::Projection { k, init, lift } => {
            let b = init_projection_with(d, k, &mut RngStream::new(seeds.basis), init)?;
            basis = Some(b.clone());
            match lift {
                LiftSpec::Fixed => Lift::Fixed(b),
                LiftSpec::Learned { hidden } => {
                    if hidden == 0 {
                        return Err(invalid("learned lift needs a positive hidden width"));
                    }
                    Lift::Learned(LiftbackMlp::new(k, hidden, d, &mut RngStream::new(seeds.lift))?)
                }
            }
        }
        CutSpec::Channel1x1 { cr } => Lift::Decoder(build_codec(feature_shape, cr, seeds.codec)?.decoder),
    };
    let broadcast = match &basis {
        Some(b) => roster
            .iter()
            .map(|&c| WireMessage::setup(c, b.matrix(), b.seed()))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok((
        ServerState {
            backbone,
            lift,
            optimizer: Optimizer::new(rule),
            basis,
            roster: roster.iter().copied().collect(),
            width,
            pending: None,
            log: None,
            log_from_step: 0,
        },
        broadcast,
    ))
}

impl ServerState {
    pub fn backbone(&self) -> &Network {
        &self.backbone
    }

    pub fn lift(&self) -> &Lift {
        &self.lift
    }

    pub fn basis(&self) -> Option<&ProjectionBasis> {
        self.basis.as_ref()
    }

    pub fn payload_width(&self) -> usize {
        self.width
    }

    /// Backbone then lift parameters (the server optimizer order).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.backbone.params();
        if let Some(n) = self.lift.network() {
            p.extend(n.params());
        }
        p
    }

    /// Accumulates per-client mean inputs/outputs of training steps
    /// numbered `from_step` or later.
    pub fn enable_activation_log(&mut self, from_step: u64) {
        self.log.get_or_insert_with(ActivationLog::default);
        self.log_from_step = from_step;
    }

    pub fn activation_log(&self) -> Option<&ActivationLog> {
        self.log.as_ref()
    }

    fn set_mode(&mut self, mode: Mode) {
        self.backbone.set_mode(mode);
        if let Some(n) = self.lift.network_mut() {
            n.set_mode(mode);
        }
    }

    fn lift_forward(&mut self, z_tilde: &Tensor) -> Result<(Tensor, Option<Tape>)> {
        let b = z_tilde.batch();
        Ok(match &mut self.lift {
            Lift::Identity => (z_tilde.clone(), None),
            Lift::Fixed(basis) => (basis.lift_fixed(z_tilde)?, None),
            Lift::Learned(mlp) => {
                let (y, t) = mlp.lift_learned(z_tilde)?;
                (y, Some(t))
            }
            Lift::Decoder(net) => {
                let x = z_tilde.clone().reshape(&with_batch(b, net.input_shape()))?;
                let (y, t) = net.forward(&x)?;
                (y, Some(t))
            }
        })
    }

    fn check_zfwd(&self, msg: &WireMessage) -> Result<Tensor> {
        if msg.msg_type != MsgType::ZFwd {
            return Err(Error::Protocol(format!("expected Z_FWD, got {}", msg.msg_type.name())));
        }
        if !self.roster.contains(&msg.client_id) {
            return Err(Error::Protocol(format!("client {} is not on the roster", msg.client_id)));
        }
        if msg.dim as usize != self.width {
            return Err(invalid(format!(
                "Z_FWD width {} does not match cut width {}",
                msg.dim, self.width
            )));
        }
        if msg.batch == 0 {
            return Err(invalid("empty batch"));
        }
        msg.tensor()
    }

    fn forward_u(&mut self, z_tilde: &Tensor) -> Result<(Tensor, Option<Tape>, Tape)> {
        let b = z_tilde.batch();
        let (z_hat, lift_tape) = self.lift_forward(z_tilde)?;
        let x = z_hat.reshape(&with_batch(b, self.backbone.input_shape()))?;
        let (u, tape) = self.backbone.forward(&x)?;
        Ok((flat(u), lift_tape, tape))
    }

    /// Steps 4-6: lift, backbone, reply with `U_FWD`. Inference requests
    /// (`step == EVAL_STEP`) run in eval mode and leave no pending state.
    pub fn server_process(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        let z_tilde = self.check_zfwd(msg)?;
        if msg.step == EVAL_STEP {
            self.set_mode(Mode::Eval);
            let out = self.forward_u(&z_tilde);
            self.set_mode(Mode::Train);
            let (u, _, _) = out?;
            return WireMessage::from_tensor(MsgType::UFwd, msg.client_id, msg.step, &u);
        }
        if let Some(p) = &self.pending {
            return Err(Error::ProtocolOrder(format!(
                "Z_FWD from client {} while step {} of client {} is open",
                msg.client_id, p.step, p.client
            )));
        }
        let (u, lift_tape, backbone_tape) = self.forward_u(&z_tilde)?;
        if let Some(log) = self.log.as_mut().filter(|_| msg.step >= self.log_from_step) {
            log.add(msg.client_id, &z_tilde, &u);
        }
        self.pending = Some(ServerPending {
            client: msg.client_id,
            step: msg.step,
            batch: z_tilde.batch(),
            lift_tape,
            backbone_tape,
        });
        WireMessage::from_tensor(MsgType::UFwd, msg.client_id, msg.step, &u)
    }

    /// Steps 14-17: backprop `dCE/du` through `g` and the lift, step the
    /// server optimizer, reply with `GRAD_Z = dCE/dz~`.
    pub fn server_backward(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        if msg.msg_type != MsgType::GradU {
            return Err(Error::Protocol(format!("expected GRAD_U, got {}", msg.msg_type.name())));
        }
        let p = match &self.pending {
            Some(p) if p.client == msg.client_id && p.step == msg.step => p,
            Some(p) => {
                return Err(Error::ProtocolOrder(format!(
                    "GRAD_U for client {} step {} but client {} step {} is open",
                    msg.client_id, msg.step, p.client, p.step
                )))
            }
            None => return Err(Error::ProtocolOrder("GRAD_U without a pending forward".into())),
        };
        let b = p.batch;
        if msg.batch as usize != b || msg.dim as usize != self.backbone.output_len() {
            return Err(invalid(format!(
                "GRAD_U is {}x{}, expected {b}x{}",
                msg.batch,
                msg.dim,
                self.backbone.output_len()
            )));
        }
        let p = self.pending.take().expect("checked above");
        let seed = msg.tensor()?.reshape(&with_batch(b, self.backbone.output_shape()))?;
        let mut bg = self.backbone.zero_grads();
        let g_hat = flat(self.backbone.backward_from_seed(&p.backbone_tape, &seed, &mut bg)?);
        let mut lift_grads = None;
        let g_tilde = match &self.lift {
            Lift::Identity => g_hat,
            Lift::Fixed(basis) => basis.project(&g_hat)?,
            Lift::Learned(mlp) => {
                let net = mlp.network();
                let mut lg = net.zero_grads();
                let g = net.backward_from_seed(p.lift_tape.as_ref().expect("lift tape"), &g_hat, &mut lg)?;
                lift_grads = Some(lg);
                g
            }
            Lift::Decoder(net) => {
                let mut lg = net.zero_grads();
                let s = g_hat.reshape(&with_batch(b, net.output_shape()))?;
                let g = net.backward_from_seed(p.lift_tape.as_ref().expect("lift tape"), &s, &mut lg)?;
                lift_grads = Some(lg);
                flat(g)
            }
        };
        let mut ps = self.backbone.params_mut();
        let mut gs: Vec<&Tensor> = bg.0.iter().collect();
        if let (Some(net), Some(lg)) = (self.lift.network_mut(), &lift_grads) {
            ps.extend(net.params_mut());
            gs.extend(lg.0.iter());
        }
        self.optimizer.apply(&mut ps, &gs)?;
        WireMessage::from_tensor(MsgType::GradZ, msg.client_id, msg.step, &g_tilde)
    }

    /// Dispatches a client frame to the matching server step.
    pub fn handle(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        match msg.msg_type {
            MsgType::ZFwd => self.server_process(msg),
            MsgType::GradU => self.server_backward(msg),
            t => Err(Error::Protocol(format!("server cannot handle {}", t.name()))),
        }
    }
}

/// Serves frames from `ep` until the peer disconnects, after first sending
/// the setup broadcast. Returns the final server state.
pub fn serve(mut server: ServerState, broadcast: &[WireMessage], ep: &mut dyn Endpoint) -> Result<ServerState> {
    for m in broadcast {
        ep.send(m)?;
    }
    loop {
        let msg = match ep.recv() {
            Ok(m) => m,
            Err(Error::Disconnected) => return Ok(server),
            Err(e) => return Err(e),
        };
        let reply = server.handle(&msg)?;
        ep.send(&reply)?;
    }
}

// ---------------------------------------------------------------- links

/// Request/response path from the clients to the server.
pub trait Link {
    fn exchange(&mut self, msg: &WireMessage) -> Result<WireMessage>;
}

/// Calls the server directly, still passing every frame through the codec.
pub struct DirectLink<'a> {
    pub server: &'a mut ServerState,
}

impl Link for DirectLink<'_> {
    fn exchange(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        let req = decode(&encode(msg)?)?;
        let reply = self.server.handle(&req)?;
        decode(&encode(&reply)?)
    }
}

/// Client end of a carrier connected to [`serve`].
pub struct EndpointLink<'a> {
    pub endpoint: &'a mut dyn Endpoint,
}

impl Link for EndpointLink<'_> {
    fn exchange(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        self.endpoint.send(msg)?;
        self.endpoint.recv()
    }
}

impl EndpointLink<'_> {
    /// Receives the setup frames the server sends on connect.
    pub fn receive_setup(&mut self, mut clients: Vec<&mut ClientState>) -> Result<()> {
        let n = clients.iter().filter(|c| c.needs_setup()).count();
        for _ in 0..n {
            let m = self.endpoint.recv()?;
            let c = clients
                .iter_mut()
                .find(|c| c.id == m.client_id)
                .ok_or_else(|| Error::Protocol(format!("setup for unknown client {}", m.client_id)))?;
            c.receive_setup(&m)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- traces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub msg_type: MsgType,
    /// Encoded frame length including the header.
    pub bytes: u64,
    pub payload_bytes: u64,
    /// FNV-1a of the encoded frame.
    pub checksum: u64,
}

impl MessageRecord {
    pub fn of(msg: &WireMessage) -> Result<Self> {
        let bytes = encode(msg)?;
        Ok(Self {
            msg_type: msg.msg_type,
            bytes: bytes.len() as u64,
            payload_bytes: 4 * msg.payload.len() as u64,
            checksum: fnv1a64(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub client: u32,
    pub batch: usize,
    pub messages: Vec<MessageRecord>,
    pub ce: f32,
    pub wcc: f32,
    pub total: f32,
    pub wall_ms: f64,
}

impl StepTrace {
    /// The message types in wire order; always `Z_FWD, U_FWD, GRAD_U, GRAD_Z`.
    pub fn message_types(&self) -> Vec<MsgType> {
        self.messages.iter().map(|m| m.msg_type).collect()
    }

    /// One JSON object for the trace log.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Digest over everything in the traces except wall times.
pub fn trace_digest(traces: &[StepTrace]) -> u64 {
    let mut bytes = Vec::new();
    for t in traces {
        bytes.extend_from_slice(&t.step.to_le_bytes());
        bytes.extend_from_slice(&t.client.to_le_bytes());
        bytes.extend_from_slice(&(t.batch as u64).to_le_bytes());
        for m in &t.messages {
            bytes.push(m.msg_type as u8);
            bytes.extend_from_slice(&m.bytes.to_le_bytes());
            bytes.extend_from_slice(&m.checksum.to_le_bytes());
        }
        for v in [t.ce, t.wcc, t.total] {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fnv1a64(&bytes)
}

/// Runs one full client step over `link` and records its trace.
pub fn run_step(
    link: &mut dyn Link,
    client: &mut ClientState,
    model: &mut ClientModel,
    x: &Tensor,
    labels: &[usize],
    step: u64,
) -> Result<StepTrace> {
    let t0 = Instant::now();
    let z = client.client_forward(model, x, labels, step)?;
    let u = link.exchange(&z)?;
    let gu = client.client_loss_and_backward_phase1(model, &u)?;
    let gz = link.exchange(&gu)?;
    let losses = client.client_backward_phase2(model, &gz)?;
    Ok(StepTrace {
        step,
        client: client.id,
        batch: labels.len(),
        messages: vec![
            MessageRecord::of(&z)?,
            MessageRecord::of(&u)?,
            MessageRecord::of(&gu)?,
            MessageRecord::of(&gz)?,
        ],
        ce: losses.ce,
        wcc: losses.wcc,
        total: losses.total,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

// ---------------------------------------------------------------- federation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadOwnership {
    /// One `(f, h)` updated in turn by every client.
    #[default]
    Shared,
    /// Independent `(f, h)` per client.
    PerClient,
}

/// A client with its data shard and batch order.
#[derive(Debug)]
pub struct Participant {
    pub state: ClientState,
    pub shard: Dataset,
    pub sampler: BatchSampler,
}

/// All clients plus their model(s).
#[derive(Debug)]
pub struct Federation {
    pub participants: Vec<Participant>,
    pub models: Vec<ClientModel>,
    pub ownership: HeadOwnership,
}

impl Federation {
    pub fn new(participants: Vec<Participant>, models: Vec<ClientModel>, ownership: HeadOwnership) -> Result<Self> {
        let want = match ownership {
            HeadOwnership::Shared => 1,
            HeadOwnership::PerClient => participants.len(),
        };
        if participants.is_empty() || models.len() != want {
            return Err(invalid(format!(
                "{:?} ownership over {} clients needs {want} models, got {}",
                ownership,
                participants.len(),
                models.len()
            )));
        }
        Ok(Self {
            participants,
            models,
            ownership,
        })
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn model_index(&self, client: usize) -> usize {
        match self.ownership {
            HeadOwnership::Shared => 0,
            HeadOwnership::PerClient => client,
        }
    }

    pub fn client_states_mut(&mut self) -> Vec<&mut ClientState> {
        self.participants.iter_mut().map(|p| &mut p.state).collect()
    }

    /// Installs setup frames delivered directly (no carrier).
    pub fn deliver_setup(&mut self, broadcast: &[WireMessage]) -> Result<()> {
        for m in broadcast {
            let m = decode(&encode(m)?)?;
            let p = self
                .participants
                .iter_mut()
                .find(|p| p.state.id == m.client_id)
                .ok_or_else(|| Error::Protocol(format!("setup for unknown client {}", m.client_id)))?;
            p.state.receive_setup(&m)?;
        }
        Ok(())
    }

    /// Eval-mode accuracy of client `client`'s model on `ds` via inference frames.
    pub fn evaluate(&mut self, link: &mut dyn Link, client: usize, ds: &Dataset, batch: usize) -> Result<f64> {
        let mi = self.model_index(client);
        let model = &mut self.models[mi];
        let state = &self.participants[client].state;
        model.set_mode(Mode::Eval);
        let res = (|| {
            let mut correct = 0usize;
            let idx: Vec<usize> = (0..ds.len()).collect();
            for chunk in idx.chunks(batch.max(1)) {
                let (x, y) = ds.batch(chunk)?;
                let z = state.infer_cut(model, &x)?;
                let req = WireMessage::from_tensor(MsgType::ZFwd, state.id, EVAL_STEP, &z)?;
                let u = link.exchange(&req)?;
                if u.msg_type != MsgType::UFwd || u.step != EVAL_STEP {
                    return Err(Error::Protocol("bad reply to inference request".into()));
                }
                let u = u.tensor()?.reshape(&with_batch(chunk.len(), model.tail.input_shape()))?;
                let logits = model.tail.predict(&u)?;
                for (i, &label) in y.iter().enumerate() {
                    let row = logits.row(i);
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                    correct += (arg == label) as usize;
                }
            }
            Ok(correct as f64 / ds.len().max(1) as f64)
        })();
        model.set_mode(Mode::Train);
        res
    }
}

/// Fail-stop abort: the error plus every trace completed before it.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub partial: Vec<StepTrace>,
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

/// Runs `rounds * |C|` sequential steps; step `t` (0-based, continuing
/// from `first_step`) belongs to client `t mod |C|`.
pub fn run_round_robin(
    link: &mut dyn Link,
    fed: &mut Federation,
    rounds: usize,
    batch: usize,
    first_step: u64,
) -> std::result::Result<Vec<StepTrace>, Aborted> {
    let n = fed.len();
    let mut traces = Vec::with_capacity(rounds * n);
    for i in 0..(rounds * n) as u64 {
        let t = first_step + i;
        let c = (t % n as u64) as usize;
        let mi = fed.model_index(c);
        let p = &mut fed.participants[c];
        let step = (|| {
            let idx = p.sampler.next_batch(batch);
            let (x, y) = p.shard.batch(&idx)?;
            run_step(link, &mut p.state, &mut fed.models[mi], &x, &y, t)
        })();
        match step {
            Ok(tr) => traces.push(tr),
            Err(error) => {
                return Err(Aborted {
                    error,
                    partial: traces,
                })
            }
        }
    }
    Ok(traces)
}

// ---------------------------------------------------------------- accounting

/// Cut-interface traffic: `z~` forward plus its gradient back.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommReport {
    pub floats_per_sample: u64,
    pub samples: u64,
    /// Payload bytes of `Z_FWD` and `GRAD_Z`.
    pub bytes: u64,
    /// `bytes / 2^30`.
    pub gib: f64,
    /// Frame headers of `Z_FWD` and `GRAD_Z` (trace-measured only).
    pub header_bytes: u64,
    /// Payload bytes of `U_FWD` and `GRAD_U`, reported separately.
    pub return_path_bytes: u64,
}

pub const GIB: f64 = (1u64 << 30) as f64;

/// `samples_per_epoch * epochs * 2k * 4` bytes.
pub fn comm_closed_form(k: u64, samples_per_epoch: u64, epochs: u64) -> CommReport {
    let samples = samples_per_epoch * epochs;
    let bytes = samples * 2 * k * 4;
    CommReport {
        floats_per_sample: 2 * k,
        samples,
        bytes,
        gib: bytes as f64 / GIB,
        header_bytes: 0,
        return_path_bytes: 0,
    }
}

/// Measured totals over recorded steps.
pub fn comm_from_traces(traces: &[StepTrace]) -> CommReport {
    let mut r = CommReport::default();
    let mut floats = 0u64;
    for t in traces {
        r.samples += t.batch as u64;
        for m in &t.messages {
            match m.msg_type {
                MsgType::ZFwd | MsgType::GradZ => {
                    r.bytes += m.payload_bytes;
                    r.header_bytes += m.bytes - m.payload_bytes;
                    floats += m.payload_bytes / 4;
                }
                MsgType::UFwd | MsgType::GradU => r.return_path_bytes += m.payload_bytes,
                MsgType::SetupR => {}
            }
        }
    }
    if r.samples > 0 {
        r.floats_per_sample = floats / r.samples;
    }
    r.gib = r.bytes as f64 / GIB;
    r
}
