//! One function per acceptance criterion. Each returns an [`Outcome`]; the
//! acceptance target prints them, the topical tests assert on them.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use splitcut::attacks::{gradient_match_inversion, mad_z_detector, GradientMatchConfig};
use splitcut::bottleneck::{init_projection, LiftbackMlp};
use splitcut::config::{AttackConfig, BottleneckKind, ExperimentConfig, TransportKind};
use splitcut::data::{synth_blobs, PoisonSpec};
use splitcut::nn::{cross_entropy, mse_loss, Conv2d, Dense, Layer, Network, Optimizer, OptimizerRule};
use splitcut::protocol::{comm_closed_form, run_step, trace_digest, ClientModel, ClientState, CutSpec, DirectLink, Link, StepTrace};
use splitcut::runner::run;
use splitcut::transport::{decode, encode, MsgType, SetupHeader, WireMessage};
use splitcut::wcc::{wcc_grad, WccConfig};
use splitcut::{RngStream, Tensor};

use super::*;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    fn new(pass: bool, detail: String, t0: Instant, limit: Duration) -> Self {
        let elapsed = t0.elapsed();
        let pass = pass && elapsed <= limit;
        let detail = if elapsed > limit {
            format!("{detail}; over the {:.0}s budget", limit.as_secs_f64())
        } else {
            detail
        };
        Self { pass, detail, elapsed }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ------------------------------------------------------------ 1. arithmetic

/// `(k, floats per sample, GiB to one decimal)` for d = 4096,
/// 50,000 samples per epoch and 100 epochs.
pub const COMM_TABLE: [(u64, u64, &str); 4] = [
    (4096, 8192, "152.6"),
    (512, 1024, "19.1"),
    (256, 512, "9.5"),
    (128, 256, "4.8"),
];

pub fn comm_table() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut rows = Vec::new();
    for (k, floats, gib) in COMM_TABLE {
        let r = comm_closed_form(k, 50_000, 100);
        let shown = format!("{:.1}", r.gib);
        ok &= r.floats_per_sample == floats && shown == gib && r.bytes == 50_000 * 100 * floats * 4;
        rows.push(format!("{}:{}", r.floats_per_sample, shown));
    }
    Outcome::new(ok, rows.join(" "), t0, secs(1))
}

// ------------------------------------------------------------ 2. projector

pub struct ProjectorStats {
    pub pairs: usize,
    pub orth: f64,
    pub idempotent: f64,
    pub residual: f64,
}

pub fn projector_stats(pairs: usize, seed: u64) -> ProjectorStats {
    let mut rng = RngStream::new(seed);
    let mut s = ProjectorStats {
        pairs,
        orth: 0.0,
        idempotent: 0.0,
        residual: 0.0,
    };
    for i in 0..pairs {
        let d = 1 + rng.below(64);
        let k = 1 + rng.below(d);
        let basis = init_projection(d, k, &mut RngStream::new(seed ^ (i as u64 + 1) << 8)).unwrap();
        let r = DMatrix::from_row_slice(d, k, &to64(basis.matrix()));
        let rtr = r.transpose() * &r;
        s.orth = s.orth.max((rtr - DMatrix::identity(k, k)).abs().max());
        let p = &r * r.transpose();
        s.idempotent = s.idempotent.max((&p * &p - &p).abs().max());
        let z = rand_tensor(&[5, d], -1.0, 1.0, &mut rng);
        let lifted = basis.lift_fixed(&basis.project(&z).unwrap()).unwrap();
        let resid = DMatrix::from_row_slice(5, d, &to64(&z.sub(&lifted).unwrap()));
        s.residual = s.residual.max((resid * &r).abs().max());
    }
    s
}

pub fn projector() -> Outcome {
    let t0 = Instant::now();
    let s = projector_stats(120, 2024);
    let ok = s.orth <= 1e-5 && s.idempotent <= 1e-5 && s.residual <= 1e-4;
    Outcome::new(
        ok,
        format!(
            "{} pairs: max|R'R-I|={:.1e} max|P^2-P|={:.1e} max|(z-zRR')R|={:.1e}",
            s.pairs, s.orth, s.idempotent, s.residual
        ),
        t0,
        secs(30),
    )
}

// ------------------------------------------------------------ 3. JL

/// Fraction of 100 random pairs whose scaled squared-distance ratio lies
/// in `[0.7, 1.3]` for the basis drawn from `seed`.
pub fn jl_fraction(seed: u64) -> f64 {
    let (d, k, pairs) = (1024, 256, 100);
    let basis = init_projection(d, k, &mut RngStream::new(seed)).unwrap();
    let r = to64(basis.matrix());
    let mut rng = RngStream::new(seed.wrapping_add(1 << 32));
    let mut inside = 0;
    for _ in 0..pairs {
        let diff: Vec<f64> = (0..d).map(|_| rng.standard_normal() - rng.standard_normal()).collect();
        let p = ref_matmul(&diff, &r, 1, d, k);
        let ratio = (d as f64 / k as f64) * p.iter().map(|v| v * v).sum::<f64>() / diff.iter().map(|v| v * v).sum::<f64>();
        if (0.7..=1.3).contains(&ratio) {
            inside += 1;
        }
    }
    inside as f64 / pairs as f64
}

pub fn jl() -> Outcome {
    let t0 = Instant::now();
    let fr: Vec<f64> = (0..10).map(|s| jl_fraction(100 + s)).collect();
    let worst = fr.iter().cloned().fold(1.0, f64::min);
    Outcome::new(worst >= 0.99, format!("10 seeds, worst in-band fraction {worst:.2}"), t0, secs(30))
}

// ------------------------------------------------------------ 4. gradients

/// Relative error between the analytic gradients of `sum(c * net(x))`
/// (input and every parameter) and central differences of the binary64
/// reference network.
pub fn network_grad_error(net: &mut Network, x: &Tensor, rng: &mut RngStream) -> f64 {
    let (y, tape) = net.forward(x).unwrap();
    let c = rand_tensor(y.shape(), -1.0, 1.0, rng);
    let mut grads = net.zero_grads();
    let gx = net.backward_from_seed(&tape, &c, &mut grads).unwrap();
    let reference = RefNet::of(net);
    let p = params64(net);
    let (x64, c64, b) = (to64(x), to64(&c), x.batch());
    let obj = |p: &[Vec<f64>], x: &[f64]| -> f64 {
        let (y, _) = reference.forward(p, x, b);
        y.iter().zip(&c64).map(|(a, b)| a * b).sum()
    };
    let mut analytic = to64(&gx);
    let mut numeric = central_diff(&|xx| obj(&p, xx), &x64, FD_STEP);
    for (i, g) in grads.0.iter().enumerate() {
        analytic.extend(to64(g));
        numeric.extend(central_diff(
            &|pp| {
                let mut q = p.clone();
                q[i] = pp.to_vec();
                obj(&q, &x64)
            },
            &p[i],
            FD_STEP,
        ));
    }
    rel_err(&analytic, &numeric)
}

fn single(shape: &[usize], layer: Layer) -> Network {
    Network::builder(shape).layer(layer).build().unwrap()
}

/// Keeps values at least `gap` away from zero so no difference straddles
/// the ReLU kink.
fn away_from_zero(mut t: Tensor, gap: f32) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

pub fn dense_instance(rng: &mut RngStream) -> f64 {
    let (b, i, o) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6));
    let bias = rng.below(2) == 0;
    let mut net = single(&[i], Layer::Dense(Dense::init(i, o, bias, rng)));
    let x = rand_tensor(&[b, i], -1.0, 1.0, rng);
    network_grad_error(&mut net, &x, rng)
}

pub fn conv_instance(rng: &mut RngStream) -> f64 {
    let (ic, oc) = (1 + rng.below(3), 1 + rng.below(3));
    let k = 1 + rng.below(3);
    let (stride, pad) = (1 + rng.below(2), rng.below(2));
    let (h, w) = (k + rng.below(4), k + rng.below(4));
    let bias = rng.below(2) == 0;
    let mut net = single(&[ic, h, w], Layer::Conv2d(Conv2d::init(ic, oc, k, stride, pad, bias, rng)));
    let x = rand_tensor(&[1 + rng.below(3), ic, h, w], -1.0, 1.0, rng);
    network_grad_error(&mut net, &x, rng)
}

pub fn relu_instance(rng: &mut RngStream) -> f64 {
    let n = 1 + rng.below(10);
    let mut net = single(&[n], Layer::Relu);
    let x = away_from_zero(rand_tensor(&[1 + rng.below(4), n], -1.0, 1.0, rng), 1e-2);
    network_grad_error(&mut net, &x, rng)
}

pub fn maxpool_instance(rng: &mut RngStream) -> f64 {
    let size = 2 + rng.below(2);
    let stride = 1 + rng.below(2);
    let c = 1 + rng.below(3);
    let (h, w) = (size + rng.below(4), size + rng.below(4));
    let mut net = single(&[c, h, w], Layer::MaxPool2d { size, stride });
    let x = rand_tensor(&[1 + rng.below(3), c, h, w], -1.0, 1.0, rng);
    network_grad_error(&mut net, &x, rng)
}

pub fn batchnorm_instance(rng: &mut RngStream) -> f64 {
    let c = 1 + rng.below(4);
    let mut bn = splitcut::nn::BatchNorm::new(c);
    for v in bn.gamma.data_mut().iter_mut().chain(bn.beta.data_mut()) {
        *v = (rng.uniform() * 2.0 - 1.0) as f32;
    }
    let (shape, x) = if rng.below(2) == 0 {
        let b = 3 + rng.below(4);
        (vec![c], rand_tensor(&[b, c], -2.0, 2.0, rng))
    } else {
        let (b, h, w) = (2 + rng.below(2), 1 + rng.below(3), 2 + rng.below(3));
        (vec![c, h, w], rand_tensor(&[b, c, h, w], -2.0, 2.0, rng))
    };
    let mut net = single(&shape, Layer::BatchNorm(bn));
    network_grad_error(&mut net, &x, rng)
}

pub fn reshape_instance(rng: &mut RngStream) -> f64 {
    let (c, h, w) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
    let mut net = Network::builder(&[c, h, w])
        .flatten()
        .reshape(&[h, c * w])
        .build()
        .unwrap();
    let x = rand_tensor(&[1 + rng.below(3), c, h, w], -1.0, 1.0, rng);
    network_grad_error(&mut net, &x, rng)
}

pub fn cross_entropy_instance(rng: &mut RngStream) -> f64 {
    let (b, c) = (1 + rng.below(5), 2 + rng.below(5));
    let logits = rand_tensor(&[b, c], -3.0, 3.0, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let num = central_diff(&|l| ref_cross_entropy(l, c, &labels), &to64(&logits), FD_STEP);
    rel_err(&to64(&g), &num)
}

pub fn mse_instance(rng: &mut RngStream) -> f64 {
    let n = 1 + rng.below(12);
    let p = rand_tensor(&[1, n], -1.0, 1.0, rng);
    let t = rand_tensor(&[1, n], -1.0, 1.0, rng);
    let (_, g) = mse_loss(&p, &t).unwrap();
    let t64 = to64(&t);
    let f = |x: &[f64]| x.iter().zip(&t64).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    rel_err(&to64(&g), &central_diff(&f, &to64(&p), FD_STEP))
}

pub fn wcc_instance(rng: &mut RngStream) -> f64 {
    let (b, k) = (2 + rng.below(8), 1 + rng.below(6));
    let classes = 1 + rng.below(3);
    let z = rand_tensor(&[b, k], -1.0, 1.0, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
    let g = wcc_grad(&z, &labels).unwrap();
    rel_err(&to64(&g), &central_diff(&|zz| ref_wcc(zz, k, &labels), &to64(&z), FD_STEP))
}

pub fn projection_instance(rng: &mut RngStream) -> f64 {
    let d = 1 + rng.below(32);
    let k = 1 + rng.below(d);
    let b = 1 + rng.below(4);
    let basis = init_projection(d, k, &mut rng.fork()).unwrap();
    let c = rand_tensor(&[b, k], -1.0, 1.0, rng);
    let z = rand_tensor(&[b, d], -1.0, 1.0, rng);
    let g = basis.backprop_projection(&c).unwrap();
    let (r, c64) = (to64(basis.matrix()), to64(&c));
    let f = |zz: &[f64]| ref_matmul(zz, &r, b, d, k).iter().zip(&c64).map(|(a, b)| a * b).sum::<f64>();
    rel_err(&to64(&g), &central_diff(&f, &to64(&z), FD_STEP))
}

pub fn learned_lift_instance(rng: &mut RngStream) -> f64 {
    let k = 1 + rng.below(6);
    let d = k + rng.below(8);
    let m = 1 + rng.below(8);
    let mlp = LiftbackMlp::new(k, m, d, &mut rng.fork()).unwrap();
    let mut net = mlp.network().clone();
    let x = rand_tensor(&[3 + rng.below(4), k], -1.0, 1.0, rng);
    network_grad_error(&mut net, &x, rng)
}

/// Error of the client's fused update `d(CE + lambda * WCC)/d(head, tail)`,
/// read off one SGD step with unit rate, against central differences of the
/// whole binary64 pipeline (head, projection, fixed lift, backbone, tail).
pub fn fused_client_instance(seed: u64) -> f64 {
    let lambda = 0.1f32;
    let k = 16;
    let mut t = toy(fixed_projection(k), lambda, OptimizerRule::sgd(1.0), seed);
    let (x, y) = toy_batches(1, seed ^ 0xabc).remove(0).remove(0);
    let (rh, rb, rt) = (
        RefNet::of(&t.model.head),
        RefNet::of(t.server.backbone()),
        RefNet::of(&t.model.tail),
    );
    let (ph, pb, pt) = (params64(&t.model.head), params64(t.server.backbone()), params64(&t.model.tail));
    let r = to64(basis_of(&t).matrix());
    let before: Vec<f64> = t.model.params().into_iter().flat_map(to64).collect();
    run_step(&mut DirectLink { server: &mut t.server }, &mut t.clients[0], &mut t.model, &x, &y, 0).unwrap();
    let after: Vec<f64> = t.model.params().into_iter().flat_map(to64).collect();
    let analytic: Vec<f64> = before.iter().zip(&after).map(|(a, b)| a - b).collect();

    let (x64, b, d) = (to64(&x), y.len(), 64);
    let nh = ph.len();
    let objective = |hp: &[Vec<f64>], tp: &[Vec<f64>]| -> f64 {
        let (z, _) = rh.forward(hp, &x64, b);
        let zt = ref_matmul(&z, &r, b, d, k);
        let zh = ref_lift(&zt, &r, b, d, k);
        let (u, _) = rb.forward(&pb, &zh, b);
        let (logits, _) = rt.forward(tp, &u, b);
        ref_cross_entropy(&logits, TOY_CLASSES, &y) + lambda as f64 * ref_wcc(&zt, k, &y)
    };
    let mut all: Vec<Vec<f64>> = ph.iter().chain(&pt).cloned().collect();
    let mut numeric = Vec::new();
    for i in 0..all.len() {
        let base = all[i].clone();
        numeric.extend(central_diff(
            &|v| {
                let mut q = all.clone();
                q[i] = v.to_vec();
                objective(&q[..nh], &q[nh..])
            },
            &base,
            FD_STEP,
        ));
        all[i] = base;
    }
    rel_err(&analytic, &numeric)
}

pub type GradFamily = (&'static str, fn(&mut RngStream) -> f64);

pub const GRAD_FAMILIES: [GradFamily; 11] = [
    ("dense", dense_instance),
    ("conv2d", conv_instance),
    ("relu", relu_instance),
    ("maxpool", maxpool_instance),
    ("batchnorm", batchnorm_instance),
    ("flatten/reshape", reshape_instance),
    ("cross_entropy", cross_entropy_instance),
    ("mse", mse_instance),
    ("wcc_grad", wcc_instance),
    ("backprop_projection", projection_instance),
    ("learned_lift", learned_lift_instance),
];

/// Worst error per family over `n` instances, plus the fused client gradient.
pub fn gradient_errors(n: usize) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = GRAD_FAMILIES
        .iter()
        .enumerate()
        .map(|(fi, (name, f))| {
            let mut rng = RngStream::new(7000 + fi as u64);
            (*name, (0..n).map(|_| f(&mut rng)).fold(0.0, f64::max))
        })
        .collect();
    out.push(("fused_client", (0..n as u64).map(|s| fused_client_instance(300 + s)).fold(0.0, f64::max)));
    out
}

pub fn gradients() -> Outcome {
    let t0 = Instant::now();
    let errs = gradient_errors(50);
    let worst = errs.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let ok = errs.iter().all(|(_, e)| *e <= GRAD_TOL);
    Outcome::new(
        ok,
        format!(
            "{} families x 50 instances, worst rel err {:.1e} ({})",
            errs.len(),
            worst.1,
            worst.0
        ),
        t0,
        secs(300),
    )
}

// ------------------------------------------------------------ 5. protocol

const TOY_STEPS: usize = 5;

fn bits(ts: &[&Tensor]) -> Vec<u32> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn apply_opt(opt: &mut Optimizer, nets: &mut [&mut Network], grads: &[&splitcut::nn::Grads]) {
    let mut ps: Vec<&mut Tensor> = Vec::new();
    for n in nets.iter_mut() {
        ps.extend(n.params_mut());
    }
    let gs: Vec<&Tensor> = grads.iter().flat_map(|g| g.0.iter()).collect();
    opt.apply(&mut ps, &gs).unwrap();
}

/// (a) Raw cut with lambda = 0 against plain U-shaped split learning
/// written directly on the network API. True when every loss and every
/// parameter agrees bit for bit.
pub fn plain_equivalence() -> (bool, String) {
    let rule = OptimizerRule::adam(1e-2);
    let seed = 5;
    let mut t = toy(CutSpec::Raw, 0.0, rule, seed);
    let mut rng = RngStream::new(seed);
    let (mut head, mut bb, mut tail) = (toy_head(&mut rng), toy_backbone(&mut rng), toy_tail(&mut rng));
    let (mut copt, mut sopt) = (Optimizer::new(rule), Optimizer::new(rule));
    let mut losses_equal = true;
    for (s, row) in toy_batches(TOY_STEPS, 99).iter().enumerate() {
        for (c, (x, y)) in row.iter().enumerate() {
            let step = (s * TOY_CLIENTS + c) as u64;
            let tr = run_step(&mut DirectLink { server: &mut t.server }, &mut t.clients[c], &mut t.model, x, y, step).unwrap();
            let (z, ht) = head.forward(x).unwrap();
            let (u, bt) = bb.forward(&z).unwrap();
            let (logits, tt) = tail.forward(&u).unwrap();
            let (ce, dl) = cross_entropy(&logits, y).unwrap();
            let mut tg = tail.zero_grads();
            let gu = tail.backward_from_seed(&tt, &dl, &mut tg).unwrap();
            let mut bg = bb.zero_grads();
            let gz = bb.backward_from_seed(&bt, &gu, &mut bg).unwrap();
            let mut hg = head.zero_grads();
            head.backward_from_seed(&ht, &gz, &mut hg).unwrap();
            apply_opt(&mut sopt, &mut [&mut bb], &[&bg]);
            apply_opt(&mut copt, &mut [&mut head, &mut tail], &[&hg, &tg]);
            losses_equal &= tr.ce.to_bits() == ce.to_bits();
        }
    }
    let mut reference = head.params();
    reference.extend(tail.params());
    let client_equal = bits(&t.model.params()) == bits(&reference);
    let server_equal = bits(&t.server.params()) == bits(&bb.params());
    (
        losses_equal && client_equal && server_equal,
        format!("losses {losses_equal}, client params {client_equal}, server params {server_equal}"),
    )
}

/// Encoded bytes of the four frames of one step.
pub fn step_frames(
    link: &mut dyn Link,
    client: &mut ClientState,
    model: &mut ClientModel,
    x: &Tensor,
    y: &[usize],
    step: u64,
) -> Vec<Vec<u8>> {
    let z = client.client_forward(model, x, y, step).unwrap();
    let u = link.exchange(&z).unwrap();
    let gu = client.client_loss_and_backward_phase1(model, &u).unwrap();
    let gz = link.exchange(&gu).unwrap();
    client.client_backward_phase2(model, &gz).unwrap();
    [z, u, gu, gz].iter().map(|m| encode(m).unwrap()).collect()
}

pub struct WireIdentity {
    pub steps: usize,
    /// Steps whose four frames matched byte for byte when forked from a
    /// common state.
    pub forked_identical: usize,
    /// Steps of two full runs whose frame types and lengths matched.
    pub layout_identical: usize,
    /// Steps of the full runs whose payload bytes differed.
    pub payload_diverged: usize,
}

/// (b) Wire bytes under lambda in {0, 0.1}.
pub fn wire_identity() -> WireIdentity {
    let rule = OptimizerRule::adam(1e-2);
    let cut = fixed_projection(16);
    let batches = toy_batches(TOY_STEPS, 31);
    let order: Vec<(usize, usize)> = (0..TOY_STEPS).flat_map(|s| (0..TOY_CLIENTS).map(move |c| (s, c))).collect();
    let mut forked_identical = 0;
    for fork in 0..order.len() {
        let mut runs = Vec::new();
        for lambda in [0.0f32, 0.1] {
            let mut t = toy(cut, 0.0, rule, 17);
            let mut last = Vec::new();
            for (i, &(s, c)) in order.iter().enumerate().take(fork + 1) {
                if i == fork {
                    t.clients[c].set_wcc(WccConfig::new(lambda).unwrap());
                }
                let (x, y) = &batches[s][c];
                last = step_frames(&mut DirectLink { server: &mut t.server }, &mut t.clients[c], &mut t.model, x, y, i as u64);
            }
            runs.push(last);
        }
        forked_identical += (runs[0] == runs[1]) as usize;
    }
    let full: Vec<Vec<Vec<Vec<u8>>>> = [0.0f32, 0.1]
        .iter()
        .map(|&lambda| {
            let mut t = toy(cut, lambda, rule, 17);
            order
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| {
                    let (x, y) = &batches[s][c];
                    step_frames(&mut DirectLink { server: &mut t.server }, &mut t.clients[c], &mut t.model, x, y, i as u64)
                })
                .collect()
        })
        .collect();
    let mut layout_identical = 0;
    let mut payload_diverged = 0;
    for (a, b) in full[0].iter().zip(&full[1]) {
        let same_layout = a.iter().zip(b).all(|(fa, fb)| fa.len() == fb.len() && fa[..25] == fb[..25]);
        layout_identical += same_layout as usize;
        payload_diverged += (a != b) as usize;
    }
    WireIdentity {
        steps: order.len(),
        forked_identical,
        layout_identical,
        payload_diverged,
    }
}

/// (c) Largest per-parameter gap between the two-optimizer protocol and a
/// single-chain oracle with one optimizer over all trainable parameters.
/// Largest parameter gap between the split run and one network trained on
/// the same batches, plus how far the split run moved from its start.
pub struct MonolithicGap {
    pub gap: f64,
    pub moved: f64,
}

fn max_gap(a: &[&Tensor], b: &[&Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64))
        .fold(0.0, f64::max)
}

pub fn monolithic_gap(lambda: f32) -> f64 {
    monolithic_run(fixed_projection(16), lambda, lambda).gap
}

/// Runs the protocol with compaction weight `lambda` on the toy setup and
/// a monolithic oracle with `oracle_lambda`. The oracle folds the cut into
/// the network: `Dense(R^T)` after the head, then either a frozen
/// `Dense(R)` or the learned lift MLP in front of the backbone.
pub fn monolithic_run(cut: CutSpec, lambda: f32, oracle_lambda: f32) -> MonolithicGap {
    let rule = OptimizerRule::adam(1e-2);
    let seed = 21;
    let CutSpec::Projection { k, lift, .. } = cut else {
        panic!("monolithic oracle needs a projection cut");
    };
    let mut t = toy(cut, lambda, rule, seed);
    let start: Vec<Tensor> = t.model.params().into_iter().cloned().collect();
    let r = basis_of(&t).matrix().clone();
    let mut rng = RngStream::new(seed);
    let (head, bb, tail) = (toy_head(&mut rng), toy_backbone(&mut rng), toy_tail(&mut rng));
    let (nh, nb, nt) = (head.params().len(), bb.params().len(), tail.params().len());
    let mut pre_layers = head.layers().to_vec();
    pre_layers.push(Layer::Flatten);
    pre_layers.push(Layer::Dense(Dense {
        weight: r.transpose().unwrap(),
        bias: None,
    }));
    let d: usize = TOY_FEATURE.iter().product();
    let (mut post_layers, frozen, nl) = match lift {
        LiftSpec::Fixed => (
            vec![Layer::Dense(Dense {
                weight: r.clone(),
                bias: None,
            })],
            1,
            0,
        ),
        LiftSpec::Learned { hidden } => {
            let mlp = LiftbackMlp::new(k, hidden, d, &mut RngStream::new(toy_seeds().lift)).unwrap();
            let n = mlp.network().params().len();
            (mlp.network().layers().to_vec(), 0, n)
        }
    };
    post_layers.push(Layer::Reshape(TOY_FEATURE.to_vec()));
    post_layers.extend(bb.layers().iter().cloned());
    post_layers.extend(tail.layers().iter().cloned());
    let mut pre = Network::new(vec![1, 8, 8], pre_layers).unwrap();
    let mut post = Network::new(vec![k], post_layers).unwrap();
    let mut opt = Optimizer::new(rule);
    for (s, row) in toy_batches(TOY_STEPS, 77).iter().enumerate() {
        for (c, (x, y)) in row.iter().enumerate() {
            let step = (s * TOY_CLIENTS + c) as u64;
            run_step(&mut DirectLink { server: &mut t.server }, &mut t.clients[c], &mut t.model, x, y, step).unwrap();
            let (zt, ptape) = pre.forward(x).unwrap();
            let (logits, qtape) = post.forward(&zt).unwrap();
            let (_, dl) = cross_entropy(&logits, y).unwrap();
            let mut qg = post.zero_grads();
            let mut g = post.backward_from_seed(&qtape, &dl, &mut qg).unwrap();
            if oracle_lambda != 0.0 {
                let w = wcc_grad(&zt, y).unwrap();
                for (a, &v) in g.data_mut().iter_mut().zip(w.data()) {
                    *a += oracle_lambda * v;
                }
            }
            let mut pg = pre.zero_grads();
            pre.backward_from_seed(&ptape, &g, &mut pg).unwrap();
            let mut ps: Vec<&mut Tensor> = pre.params_mut().into_iter().take(nh).collect();
            ps.extend(post.params_mut().into_iter().skip(frozen));
            let mut gs: Vec<&Tensor> = pg.0.iter().take(nh).collect();
            gs.extend(qg.0.iter().skip(frozen));
            opt.apply(&mut ps, &gs).unwrap();
        }
    }
    let oracle_pre = pre.params();
    let oracle_post = &post.params()[frozen..];
    let lift_params = &oracle_post[..nl];
    let mut oracle_client: Vec<&Tensor> = oracle_pre[..nh].to_vec();
    oracle_client.extend(&oracle_post[nl + nb..nl + nb + nt]);
    let mut oracle_server: Vec<&Tensor> = oracle_post[nl..nl + nb].to_vec();
    oracle_server.extend(lift_params);
    let now = t.model.params();
    let start: Vec<&Tensor> = start.iter().collect();
    MonolithicGap {
        gap: max_gap(&now, &oracle_client).max(max_gap(&t.server.params(), &oracle_server)),
        moved: max_gap(&now, &start),
    }
}

/// Small experiment config with `d = 64`, 3 clients and 5 rounds.
pub fn toy_config(transport: TransportKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        clients: 3,
        rounds: TOY_STEPS,
        batch: 8,
        cr: 4.0,
        wcc_lambda: 0.1,
        transport,
        addr: "127.0.0.1:0".into(),
        timeout_ms: 20_000,
        ..Default::default()
    };
    cfg.dataset.per_class = 20;
    cfg.model.head_channels = 1;
    cfg
}

pub fn strip_wall(traces: &[StepTrace]) -> Vec<StepTrace> {
    traces.iter().cloned().map(|t| StepTrace { wall_ms: 0.0, ..t }).collect()
}

/// (d) Trace digests of the direct, in-process and TCP carriers.
pub fn carrier_digests() -> (bool, Vec<u64>) {
    let outs: Vec<Vec<StepTrace>> = [TransportKind::Direct, TransportKind::Inproc, TransportKind::Tcp]
        .into_iter()
        .map(|tk| strip_wall(&run(&toy_config(tk)).unwrap().traces))
        .collect();
    let digests: Vec<u64> = outs.iter().map(|t| trace_digest(t)).collect();
    (outs[0] == outs[1] && outs[1] == outs[2], digests)
}

pub fn protocol() -> Outcome {
    let t0 = Instant::now();
    let (a, a_detail) = plain_equivalence();
    let w = wire_identity();
    let b = w.forked_identical == w.steps && w.layout_identical == w.steps;
    let learned = CutSpec::Projection {
        k: 16,
        init: Default::default(),
        lift: LiftSpec::Learned { hidden: 12 },
    };
    let gaps = [
        monolithic_gap(0.0),
        monolithic_gap(0.1),
        monolithic_run(learned, 0.0, 0.0).gap,
        monolithic_run(learned, 0.1, 0.1).gap,
    ];
    let control = monolithic_run(fixed_projection(16), 0.1, 0.0).gap;
    let c = gaps.iter().all(|&g| g <= 1e-6) && control > 1e-6;
    let (d, digests) = carrier_digests();
    Outcome::new(
        a && b && c && d,
        format!(
            "(a) {} [{a_detail}]; (b) {} forked {}/{} byte-identical, layout {}/{}; \
             (c) {} max gap {:.1e} fixed, {:.1e} learned (mismatched-lambda control {:.1e}); (d) {} digest {:016x}",
            pf(a),
            pf(b),
            w.forked_identical,
            w.steps,
            w.layout_identical,
            w.steps,
            pf(c),
            gaps[0].max(gaps[1]),
            gaps[2].max(gaps[3]),
            control,
            pf(d),
            digests[0]
        ),
        t0,
        secs(120),
    )
}

fn pf(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

// ------------------------------------------------------------ 6. utility

pub fn utility_ratios(seeds: &[u64]) -> Vec<(f64, f64)> {
    seeds
        .iter()
        .map(|&seed| {
            let base = ExperimentConfig {
                seed,
                ..Default::default()
            };
            assert_eq!(base.cut_dim(), 256);
            let raw = ExperimentConfig {
                bottleneck: BottleneckKind::Raw,
                ..base.clone()
            };
            let a_raw = run(&raw).unwrap().report.final_test_accuracy;
            let a_proj = run(&base).unwrap().report.final_test_accuracy;
            (a_raw, a_proj)
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn utility() -> Outcome {
    let t0 = Instant::now();
    let accs = utility_ratios(&[1, 2, 3]);
    let ratios: Vec<f64> = accs.iter().map(|(r, p)| p / r).collect();
    let m = median(&ratios);
    Outcome::new(
        m >= 0.9,
        format!(
            "median projection/raw accuracy {m:.3} over {}",
            accs.iter()
                .map(|(r, p)| format!("{p:.3}/{r:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        t0,
        secs(600),
    )
}

// ------------------------------------------------------------ 7. privacy

/// Masked decoder-attack MSE for raw, projection and projection with
/// compaction, in that order.
pub fn privacy_triple(seed: u64) -> [f64; 3] {
    let base = ExperimentConfig {
        seed,
        attack: Some(AttackConfig::default()),
        ..Default::default()
    };
    let cfgs = [
        ExperimentConfig {
            bottleneck: BottleneckKind::Raw,
            ..base.clone()
        },
        base.clone(),
        ExperimentConfig {
            wcc_lambda: 0.1,
            ..base
        },
    ];
    cfgs.map(|c| run(&c).unwrap().report.decoder_attack.unwrap().mean.mse_fg.unwrap())
}

pub struct NullSpaceCheck {
    /// Mean per-pixel energy of the truth outside the attacker's row space.
    pub floor: f64,
    pub attack_mse: f64,
}

/// Gradient matching against a linear head plus projection. Starting from
/// zero, the attack can only move within the row space of the composite
/// map, so its MSE is bounded below by the null-space energy measured here
/// with an SVD.
pub fn null_space_check(seed: u64) -> NullSpaceCheck {
    let mut rng = RngStream::new(seed);
    let (h, w, k) = (8, 8, 32);
    let head = Network::builder(&[1, h, w])
        .layer(Layer::Conv2d(Conv2d::init(1, 4, 3, 1, 1, false, &mut rng)))
        .build()
        .unwrap();
    let d = head.output_len();
    let basis = init_projection(d, k, &mut rng.fork()).unwrap();
    let n_in = h * w;
    let ds = synth_blobs(2, 2, h, w, 0.2, &mut rng).unwrap();
    let truth = ds.images().clone();

    let mut probe = head.clone();
    let eye = Tensor::new(vec![n_in, 1, h, w], Tensor::identity(n_in).into_data()).unwrap();
    let rows = basis.project(&probe.predict(&eye).unwrap().flatten_rows()).unwrap();
    let a = DMatrix::from_row_slice(n_in, k, &to64(&rows));
    let svd = a.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-6 * smax).count();
    let u = svd.u.unwrap().columns(0, rank).into_owned();

    let target = basis.project(&probe.predict(&truth).unwrap().flatten_rows()).unwrap();
    let cfg = GradientMatchConfig {
        iterations: 4000,
        lr: (1.0 / (smax * smax)) as f32,
        clone_lr: 0.0,
    };
    let out = gradient_match_inversion(&target, &head, Some(&basis), &cfg, None).unwrap();
    let mut floor = 0.0;
    let mut attack = 0.0;
    for i in 0..truth.batch() {
        let x = nalgebra::DVector::from_iterator(n_in, truth.row(i).iter().map(|&v| v as f64));
        let resid = &x - &u * (u.transpose() * &x);
        floor += resid.norm_squared();
        attack += truth
            .row(i)
            .iter()
            .zip(out.reconstruction.row(i))
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>();
    }
    let n = (truth.batch() * n_in) as f64;
    NullSpaceCheck {
        floor: floor / n,
        attack_mse: attack / n,
    }
}

pub fn privacy() -> Outcome {
    let t0 = Instant::now();
    let triples: Vec<[f64; 3]> = (1..=5).map(privacy_triple).collect();
    let ordered = triples.iter().filter(|t| t[0] < t[1] && t[1] <= t[2]).count();
    let ns = null_space_check(41);
    let ratio = ns.attack_mse / ns.floor;
    let bound = (0.95..=1.05).contains(&ratio);
    Outcome::new(
        ordered >= 4 && bound,
        format!(
            "ordering raw<proj<=proj+wcc in {ordered}/5 seeds; gradient-match mse/null-space floor {ratio:.4} ({:.5}/{:.5})",
            ns.attack_mse, ns.floor
        ),
        t0,
        secs(900),
    )
}

// ------------------------------------------------------------ 8. detector

/// Ten unit client vectors around a common direction, each tilted along its
/// own orthogonal axis. Benign tilts are evenly spaced over [4, 8] degrees
/// in a seeded order; the malicious client, if any, is tilted 60 degrees.
pub fn planted_vectors(seed: u64, malicious: Option<usize>) -> Vec<Vec<f64>> {
    let (dim, n) = (64, 10);
    let mut rng = RngStream::new(seed);
    let mut axes: Vec<Vec<f64>> = Vec::new();
    while axes.len() < n + 1 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        for a in &axes {
            let dot: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        axes.push(v.into_iter().map(|x| x / norm).collect());
    }
    let mut tilts: Vec<f64> = (0..n).map(|j| 4.0 + 4.0 * j as f64 / (n - 1) as f64).collect();
    rng.shuffle(&mut tilts);
    (0..n)
        .map(|i| {
            let th = if Some(i) == malicious { 60f64 } else { tilts[i] }.to_radians();
            axes[0].iter().zip(&axes[i + 1]).map(|(b, o)| th.cos() * b + th.sin() * o).collect()
        })
        .collect()
}

pub fn detector() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 1..=3u64 {
        let m = (seed * 3 % 10) as usize;
        let rep = mad_z_detector(&planted_vectors(seed, Some(m)), &[m]).unwrap();
        let benign = mad_z_detector(&planted_vectors(seed + 100, None), &[]).unwrap();
        ok &= rep.f1 == 1.0 && benign.flagged.is_empty();
        parts.push(format!("seed {seed}: f1 {:.2}, benign flags {}", rep.f1, benign.flagged.len()));
    }
    Outcome::new(ok, parts.join("; "), t0, secs(300))
}

/// Detector on full poisoned runs; reported for information.
pub fn pipeline_detection(seeds: &[u64]) -> Vec<(u64, f64, Vec<usize>, Vec<usize>)> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = ExperimentConfig {
                seed,
                rounds: 40,
                poison: Some(PoisonSpec::default()),
                ..Default::default()
            };
            let d = run(&cfg).unwrap().report.detection.unwrap();
            (seed, d.f1, d.flagged, d.truth)
        })
        .collect()
}

// ------------------------------------------------------------ 9. wire

/// Frozen frames, written out byte by byte from the frame layout.
pub fn golden_frames() -> Vec<(&'static str, &'static str, WireMessage)> {
    vec![
        (
            "setup_r",
            include_str!("../fixtures/wire/setup_r.hex"),
            WireMessage {
                msg_type: MsgType::SetupR,
                client_id: 1,
                step: 0,
                batch: 1,
                dim: 2,
                setup: Some(SetupHeader {
                    d: 2,
                    k: 1,
                    seed: 0x0102_0304_0506_0708,
                }),
                payload: vec![0.6, 0.8],
            },
        ),
        (
            "z_fwd",
            include_str!("../fixtures/wire/z_fwd.hex"),
            WireMessage {
                msg_type: MsgType::ZFwd,
                client_id: 7,
                step: 3,
                batch: 2,
                dim: 2,
                setup: None,
                payload: vec![1.0, -2.0, 0.5, 0.0],
            },
        ),
        (
            "u_fwd",
            include_str!("../fixtures/wire/u_fwd.hex"),
            WireMessage {
                msg_type: MsgType::UFwd,
                client_id: 0x0102_0304,
                step: u64::MAX,
                batch: 1,
                dim: 3,
                setup: None,
                payload: vec![1.5, 2.0, -0.25],
            },
        ),
        (
            "grad_u",
            include_str!("../fixtures/wire/grad_u.hex"),
            WireMessage {
                msg_type: MsgType::GradU,
                client_id: 2,
                step: 258,
                batch: 1,
                dim: 1,
                setup: None,
                payload: vec![3.0],
            },
        ),
        (
            "grad_z",
            include_str!("../fixtures/wire/grad_z.hex"),
            WireMessage {
                msg_type: MsgType::GradZ,
                client_id: 0,
                step: 1,
                batch: 0,
                dim: 4,
                setup: None,
                payload: vec![],
            },
        ),
    ]
}

pub fn unhex(s: &str) -> Vec<u8> {
    let digits: Vec<u8> = s
        .lines()
        .map(|l| l.split('#').next().unwrap())
        .flat_map(|l| l.bytes().filter(|b| b.is_ascii_hexdigit()))
        .collect();
    assert!(digits.len().is_multiple_of(2), "odd number of hex digits");
    digits
        .chunks(2)
        .map(|p| u8::from_str_radix(std::str::from_utf8(p).unwrap(), 16).unwrap())
        .collect()
}

/// Decodes `n` random or mutated frames; returns how many decoded and
/// whether every decoded frame re-encoded to its input.
pub fn fuzz_frames(n: usize, seed: u64) -> (usize, bool) {
    let mut rng = RngStream::new(seed);
    let seeds: Vec<Vec<u8>> = golden_frames().iter().map(|(_, h, _)| unhex(h)).collect();
    let mut decoded = 0;
    let mut roundtrip = true;
    for i in 0..n {
        let bytes: Vec<u8> = match i % 3 {
            0 => (0..rng.below(64)).map(|_| rng.below(256) as u8).collect(),
            1 => {
                let mut b = seeds[rng.below(seeds.len())].clone();
                for _ in 0..1 + rng.below(3) {
                    match rng.below(3) {
                        0 if !b.is_empty() => {
                            let j = rng.below(b.len());
                            b[j] = rng.below(256) as u8;
                        }
                        1 => {
                            let keep = rng.below(b.len() + 1);
                            b.truncate(keep);
                        }
                        _ => b.push(rng.below(256) as u8),
                    }
                }
                b
            }
            _ => {
                let mut b = b"SPL1".to_vec();
                b.push(rng.below(8) as u8);
                for _ in 0..20 {
                    b.push(rng.below(256) as u8);
                }
                let extra = rng.below(48);
                b.extend((0..extra).map(|_| rng.below(256) as u8));
                b
            }
        };
        if let Ok(m) = decode(&bytes) {
            decoded += 1;
            roundtrip &= encode(&m).map(|e| e == bytes).unwrap_or(false);
        }
    }
    (decoded, roundtrip)
}

pub fn wire() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    for (_, hex, expect) in golden_frames() {
        let bytes = unhex(hex);
        ok &= decode(&bytes).map(|m| m == expect).unwrap_or(false);
        ok &= encode(&expect).map(|e| e == bytes).unwrap_or(false);
    }
    let golden = ok;
    let fuzz = std::panic::catch_unwind(|| fuzz_frames(100_000, 9));
    let (fuzz_ok, detail) = match fuzz {
        Ok((dec, rt)) => (rt, format!("100000 fuzz frames without a panic, {dec} decoded, round trip {rt}")),
        Err(_) => (false, "decoder panicked during fuzzing".to_string()),
    };
    Outcome::new(
        golden && fuzz_ok,
        format!("5 golden frames {}; {detail}", pf(golden)),
        t0,
        secs(60),
    )
}
