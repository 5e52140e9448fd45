//! End-to-end experiments: data, models, protocol run, evaluation, attacks
//! and report files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attacks::{
    decoder_inversion, gradient_match_inversion, mad_z_detector, DetectionReport,
};
use crate::config::{BottleneckKind, DatasetKind, ExperimentConfig, TransportKind};
use crate::data::{apply_poison, dirichlet_partition, load_idx, synth_blobs, BatchSampler, Dataset, DetectSignal};
use crate::error::{invalid, Error, Result};
use crate::linalg::{fnv1a64, RngStream, Tensor};
use crate::metrics::ReconReport;
use crate::nn::{Mode, Network};
use crate::protocol::{
    build_codec, comm_closed_form, comm_from_traces, run_round_robin, serve, server_setup, trace_digest,
    ClientModel, ClientState, CommReport, CutSeeds, CutSpec, DirectLink, EndpointLink, Federation,
    HeadOwnership, Link, Participant, ServerState, StepTrace,
};
use crate::transport::{channel_pair, tcp_connect, tcp_listen, Endpoint, WireMessage};

/// Independent sub-seed for a named component.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut b = seed.to_le_bytes().to_vec();
    b.extend_from_slice(tag.as_bytes());
    fnv1a64(&b)
}

pub fn hex(v: u64) -> String {
    format!("{v:016x}")
}

/// Train/test split, per-client shards (already poisoned) and ground truth.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Vec<usize>>,
    pub client_data: Vec<Dataset>,
    pub malicious: Vec<usize>,
    pub dataset_hash: u64,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let s = cfg.seed;
    let ds = match cfg.dataset.kind {
        DatasetKind::Blobs => {
            let d = &cfg.dataset;
            synth_blobs(
                d.classes,
                d.per_class,
                d.height,
                d.width,
                d.spread,
                &mut RngStream::new(derive_seed(s, "data")),
            )?
        }
        DatasetKind::Idx => {
            let ds = load_idx(&cfg.dataset.images, &cfg.dataset.labels)?;
            let shape = ds.sample_shape();
            if shape[1] != cfg.dataset.height || shape[2] != cfg.dataset.width {
                return Err(Error::Config(format!(
                    "IDX images are {}x{} but dataset.height/width say {}x{}",
                    shape[1], shape[2], cfg.dataset.height, cfg.dataset.width
                )));
            }
            ds
        }
    };
    let dataset_hash = ds.hash();
    let (train, test) = ds.split(cfg.dataset.test_fraction, &mut RngStream::new(derive_seed(s, "split")))?;
    let shards = dirichlet_partition(&train, cfg.clients, cfg.alpha, &mut RngStream::new(derive_seed(s, "partition")))?;
    let mut client_data = shards
        .iter()
        .map(|idx| train.subset(idx))
        .collect::<Result<Vec<_>>>()?;
    let mut malicious = Vec::new();
    if let Some(p) = &cfg.poison {
        let mut rng = RngStream::new(derive_seed(s, "poison"));
        malicious = p.malicious_clients(cfg.clients, &mut rng);
        for &m in &malicious {
            client_data[m] = apply_poison(&client_data[m], p, &mut rng)?.0;
        }
    }
    Ok(Prepared {
        train,
        test,
        shards,
        client_data,
        malicious,
        dataset_hash,
    })
}

pub fn build_head(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Network> {
    let d = &cfg.dataset;
    let mut b = Network::builder(&[1, d.height, d.width]);
    for _ in 0..cfg.model.head_depth {
        b = b.conv2d(cfg.model.head_channels, 3, 1, 1, rng).relu().maxpool(2, 2);
    }
    b.build()
}

pub fn build_backbone(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<Network> {
    let [c, h, w] = cfg.feature_shape();
    let m = &cfg.model;
    let mut b = Network::builder(&[c, h, w]).conv2d(m.backbone_channels, 3, 1, 1, rng).relu();
    if h >= 2 && w >= 2 {
        b = b.maxpool(2, 2);
    }
    b.flatten().dense(m.backbone_hidden, rng).relu().build()
}

pub fn build_tail(cfg: &ExperimentConfig, classes: usize, rng: &mut RngStream) -> Result<Network> {
    Network::builder(&[cfg.model.backbone_hidden]).dense(classes, rng).build()
}

pub fn cut_seeds(cfg: &ExperimentConfig) -> CutSeeds {
    CutSeeds {
        basis: derive_seed(cfg.seed, "basis"),
        lift: derive_seed(cfg.seed, "lift"),
        codec: derive_seed(cfg.seed, "codec"),
    }
}

pub fn roster(cfg: &ExperimentConfig) -> Vec<u32> {
    (0..cfg.clients as u32).collect()
}

pub fn build_server(cfg: &ExperimentConfig) -> Result<(ServerState, Vec<WireMessage>)> {
    let backbone = build_backbone(cfg, &mut RngStream::new(derive_seed(cfg.seed, "backbone")))?;
    let (mut server, broadcast) = server_setup(
        backbone,
        &cfg.cut_spec(),
        &cfg.feature_shape(),
        &roster(cfg),
        cfg.optimizer_rule(),
        cut_seeds(cfg),
    )?;
    if let Some(p) = &cfg.poison {
        let window = p.detect_window.unwrap_or(cfg.rounds.div_ceil(4)).min(cfg.rounds);
        server.enable_activation_log(((cfg.rounds - window) * cfg.clients) as u64);
    }
    Ok((server, broadcast))
}

pub fn build_client_model(cfg: &ExperimentConfig, classes: usize, tag: &str) -> Result<ClientModel> {
    let head = build_head(cfg, &mut RngStream::new(derive_seed(cfg.seed, &format!("head{tag}"))))?;
    let tail = build_tail(cfg, classes, &mut RngStream::new(derive_seed(cfg.seed, &format!("tail{tag}"))))?;
    let codec = match cfg.cut_spec() {
        CutSpec::Channel1x1 { cr } => Some(build_codec(&cfg.feature_shape(), cr, cut_seeds(cfg).codec)?.encoder),
        _ => None,
    };
    Ok(ClientModel::new(head, codec, tail, cfg.optimizer_rule()))
}

pub fn build_federation(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Federation> {
    let classes = prepared.train.classes();
    let wcc = cfg.wcc()?;
    let cut = cfg.cut_spec();
    let participants = prepared
        .client_data
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            Ok(Participant {
                state: ClientState::new(i as u32, cut, wcc),
                shard: shard.clone(),
                sampler: BatchSampler::new(shard.len(), RngStream::new(derive_seed(cfg.seed, &format!("sampler{i}"))))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let models = match cfg.head_ownership {
        HeadOwnership::Shared => vec![build_client_model(cfg, classes, "")?],
        HeadOwnership::PerClient => (0..cfg.clients)
            .map(|i| build_client_model(cfg, classes, &format!("/{i}")))
            .collect::<Result<Vec<_>>>()?,
    };
    Federation::new(participants, models, cfg.head_ownership)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub round: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Accuracy of every client model: shards for train, the test split for
/// test, averaged over the distinct models in play.
pub fn evaluate_federation(fed: &mut Federation, link: &mut dyn Link, test: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let n = fed.len();
    let mut correct = 0.0;
    let mut total = 0usize;
    for c in 0..n {
        let shard = fed.participants[c].shard.clone();
        correct += fed.evaluate(link, c, &shard, batch)? * shard.len() as f64;
        total += shard.len();
    }
    let models: Vec<usize> = match fed.ownership {
        HeadOwnership::Shared => vec![0],
        HeadOwnership::PerClient => (0..n).collect(),
    };
    let mut test_acc = 0.0;
    if !test.is_empty() {
        for &c in &models {
            test_acc += fed.evaluate(link, c, test, batch)?;
        }
        test_acc /= models.len() as f64;
    }
    Ok((correct / total.max(1) as f64, test_acc))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub traces: Vec<StepTrace>,
    pub evaluations: Vec<EvalRow>,
}

/// Round-robin training with periodic evaluation.
pub fn train(cfg: &ExperimentConfig, prepared: &Prepared, fed: &mut Federation, link: &mut dyn Link) -> Result<TrainOutcome> {
    let mut out = TrainOutcome::default();
    let every = if cfg.eval_every == 0 { cfg.rounds.max(1) } else { cfg.eval_every };
    let mut done = 0;
    while done < cfg.rounds {
        let chunk = every.min(cfg.rounds - done);
        let first = (done * fed.len()) as u64;
        let traces = run_round_robin(link, fed, chunk, cfg.batch, first)?;
        out.traces.extend(traces);
        done += chunk;
        let (train_accuracy, test_accuracy) = evaluate_federation(fed, link, &prepared.test, cfg.batch.max(64))?;
        out.evaluations.push(EvalRow {
            round: done,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMatchSummary {
    pub report: ReconReport,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub method: String,
    pub cut_dim: usize,
    pub payload_width: usize,
    pub effective_cr: f64,
    pub evaluations: Vec<EvalRow>,
    pub final_test_accuracy: f64,
    pub steps: usize,
    pub trace_digest: String,
    pub comm: CommReport,
    pub comm_closed_form: CommReport,
    pub decoder_attack: Option<ReconReport>,
    pub gradient_match: Option<GradientMatchSummary>,
    pub detection: Option<DetectionReport>,
    pub trace: TraceSummary,
    /// Whole run, including data preparation and attacks.
    pub wall_ms: f64,
    /// Sum of per-step wall times.
    pub step_wall_ms: f64,
}

impl RunReport {
    /// Digest of every field except wall times.
    pub fn deterministic_digest(&self) -> Result<u64> {
        let mut r = self.clone();
        r.wall_ms = 0.0;
        r.step_wall_ms = 0.0;
        Ok(fnv1a64(serde_json::to_string(&r)?.as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Accuracy rows as CSV.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("round,train_accuracy,test_accuracy\n");
        for e in &self.evaluations {
            s.push_str(&format!("{},{:.6},{:.6}\n", e.round, e.train_accuracy, e.test_accuracy));
        }
        s
    }
}

pub fn method_label(cfg: &ExperimentConfig) -> String {
    match cfg.cut_spec() {
        CutSpec::Raw => "raw".into(),
        CutSpec::Projection { k, lift, .. } => {
            let l = match lift {
                crate::protocol::LiftSpec::Fixed => "fixed",
                crate::protocol::LiftSpec::Learned { .. } => "learned",
            };
            format!("projection-k{k}-{l}-wcc{}", cfg.wcc_lambda)
        }
        CutSpec::Channel1x1 { cr } => format!("learned-1x1-cr{cr}"),
    }
}

/// Everything a run produced, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub traces: Vec<StepTrace>,
    /// Victim images and their decoder reconstructions, `[n, C, H, W]`.
    pub reconstructions: Option<(Tensor, Tensor)>,
}

fn attack_phase(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    fed: &mut Federation,
) -> Result<(Option<ReconReport>, Option<GradientMatchSummary>, Option<(Tensor, Tensor)>)> {
    let Some(a) = &cfg.attack else {
        return Ok((None, None, None));
    };
    let test = &prepared.test;
    if test.len() <= a.victims {
        return Err(invalid(format!(
            "attack needs more than {} held-out images, have {}",
            a.victims,
            test.len()
        )));
    }
    let victim_idx: Vec<usize> = (0..a.victims).collect();
    let aux_idx: Vec<usize> = (a.victims..test.len()).collect();
    let (victims, _) = test.batch(&victim_idx)?;
    let (aux, _) = test.batch(&aux_idx)?;
    let mi = fed.model_index(0);
    let state = &fed.participants[0].state;
    let basis = state.basis().cloned();
    let model = &mut fed.models[mi];
    model.set_mode(Mode::Eval);
    let payloads = (|| -> Result<(Tensor, Tensor)> {
        Ok((state.infer_cut(model, &victims)?, state.infer_cut(model, &aux)?))
    })();
    model.set_mode(Mode::Train);
    let (observed, aux_payloads) = payloads?;
    let mut dec_report = None;
    let mut recon = None;
    if let Some(d) = &a.decoder {
        let mut dcfg = *d;
        dcfg.seed = derive_seed(cfg.seed, &format!("decoder{}", d.seed));
        let out = decoder_inversion(&observed, &victims, basis.as_ref(), &aux_payloads, &aux, &dcfg)?;
        dec_report = Some(out.report);
        recon = Some((victims.clone(), out.reconstructions));
    }
    let mut gm = None;
    if let Some(g) = &a.gradient_match {
        if matches!(cfg.bottleneck, BottleneckKind::Learned1x1) {
            return Err(Error::Config("gradient matching supports raw and projection cuts".into()));
        }
        let n = a.gm_victims.min(a.victims).max(1);
        let idx: Vec<usize> = (0..n).collect();
        let (truth, _) = test.batch(&idx)?;
        let target = Tensor::new(
            vec![n, observed.row_len()],
            observed.data()[..n * observed.row_len()].to_vec(),
        )?;
        let clone = if a.clone_from_victim {
            model.head.clone()
        } else {
            build_head(cfg, &mut RngStream::new(derive_seed(cfg.seed, "clone")))?
        };
        let out = gradient_match_inversion(&target, &clone, basis.as_ref(), g, Some(&truth))?;
        gm = Some(GradientMatchSummary {
            report: out.report.expect("truth supplied"),
            final_loss: out.final_loss,
        });
    }
    Ok((dec_report, gm, recon))
}

fn assemble(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    outcome: TrainOutcome,
    attacks: (Option<ReconReport>, Option<GradientMatchSummary>, Option<(Tensor, Tensor)>),
    detection: Option<DetectionReport>,
    t0: Instant,
) -> Result<RunOutput> {
    let cut = cfg.cut_spec();
    let fs = cfg.feature_shape();
    let width = cut.payload_width(&fs)?;
    let comm = comm_from_traces(&outcome.traces);
    let closed = comm_closed_form(width as u64, comm.samples, 1);
    if comm.bytes != closed.bytes {
        return Err(Error::ContractViolation(format!(
            "measured {} cut bytes but closed form gives {}",
            comm.bytes, closed.bytes
        )));
    }
    let effective_cr = match cut {
        CutSpec::Channel1x1 { cr } => {
            let k = crate::bottleneck::codec_channels(fs[0], cr);
            fs[0] as f64 / k as f64
        }
        _ => cfg.cut_dim() as f64 / width as f64,
    };
    let report = RunReport {
        config: cfg.clone(),
        config_hash: hex(cfg.hash()?),
        seed: cfg.seed,
        dataset_hash: hex(prepared.dataset_hash),
        method: method_label(cfg),
        cut_dim: cfg.cut_dim(),
        payload_width: width,
        effective_cr,
        final_test_accuracy: outcome.evaluations.last().map_or(0.0, |e| e.test_accuracy),
        evaluations: outcome.evaluations,
        steps: outcome.traces.len(),
        trace_digest: hex(trace_digest(&outcome.traces)),
        comm,
        comm_closed_form: closed,
        decoder_attack: attacks.0,
        gradient_match: attacks.1,
        detection,
        trace: summarize_trace(&outcome.traces),
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        step_wall_ms: outcome.traces.iter().map(|t| t.wall_ms).sum(),
    };
    Ok(RunOutput {
        report,
        traces: outcome.traces,
        reconstructions: attacks.2,
    })
}

fn detect(cfg: &ExperimentConfig, server: &ServerState, prepared: &Prepared) -> Result<Option<DetectionReport>> {
    let Some(log) = server.activation_log() else {
        return Ok(None);
    };
    let means = match cfg.poison.map(|p| p.signal).unwrap_or_default() {
        DetectSignal::BackboneOutput => log.mean_outputs(),
        DetectSignal::ServerInput => log.mean_inputs(),
    };
    let vectors: Vec<Vec<f64>> = means.into_iter().map(|(_, v)| v).collect();
    if vectors.len() < 3 {
        return Ok(None);
    }
    mad_z_detector(&vectors, &prepared.malicious).map(Some)
}

/// Runs a whole experiment in this process over the configured carrier.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prepared = prepare_data(cfg)?;
    let mut fed = build_federation(cfg, &prepared)?;
    let (mut server, broadcast) = build_server(cfg)?;
    let timeout = Some(Duration::from_millis(cfg.timeout_ms.max(1)));
    let (outcome, server) = match cfg.transport {
        TransportKind::Direct => {
            fed.deliver_setup(&broadcast)?;
            let out = train(cfg, &prepared, &mut fed, &mut DirectLink { server: &mut server })?;
            (out, server)
        }
        TransportKind::Inproc => {
            let (mut cep, mut sep) = channel_pair();
            cep.set_timeout(timeout);
            let handle = thread::spawn(move || serve(server, &broadcast, &mut sep));
            let out = drive_remote(cfg, &prepared, &mut fed, &mut cep);
            drop(cep);
            let server = join(handle)?;
            (out?, server)
        }
        TransportKind::Tcp => {
            let acceptor = tcp_listen(cfg.addr.as_str())?;
            let addr = acceptor.local_addr()?;
            let handle = thread::spawn(move || {
                let mut ep = acceptor.accept()?;
                serve(server, &broadcast, &mut ep)
            });
            let out = (|| {
                let mut ep = tcp_connect(addr)?;
                ep.set_timeout(timeout)?;
                drive_remote(cfg, &prepared, &mut fed, &mut ep)
            })();
            let server = join(handle)?;
            (out?, server)
        }
    };
    let detection = detect(cfg, &server, &prepared)?;
    let attacks = attack_phase(cfg, &prepared, &mut fed)?;
    assemble(cfg, &prepared, outcome, attacks, detection, t0)
}

fn join(handle: thread::JoinHandle<Result<ServerState>>) -> Result<ServerState> {
    handle
        .join()
        .map_err(|_| Error::Protocol("server thread panicked".into()))?
}

fn drive_remote(cfg: &ExperimentConfig, prepared: &Prepared, fed: &mut Federation, ep: &mut dyn Endpoint) -> Result<TrainOutcome> {
    let mut link = EndpointLink { endpoint: ep };
    link.receive_setup(fed.client_states_mut())?;
    train(cfg, prepared, fed, &mut link)
}

/// Server half of a two-process run: accepts one connection on `listen`,
/// serves until the clients disconnect, and returns the detection report
/// when poisoning is configured.
pub fn run_server_process(cfg: &ExperimentConfig, listen: &str) -> Result<Option<DetectionReport>> {
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    let (server, broadcast) = build_server(cfg)?;
    let acceptor = tcp_listen(listen)?;
    let mut ep = acceptor.accept()?;
    let server = serve(server, &broadcast, &mut ep)?;
    detect(cfg, &server, &prepared)
}

/// Client half of a two-process run.
pub fn run_client_process(cfg: &ExperimentConfig, connect: &str) -> Result<RunOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prepared = prepare_data(cfg)?;
    let mut fed = build_federation(cfg, &prepared)?;
    let mut ep = tcp_connect(connect)?;
    ep.set_timeout(Some(Duration::from_millis(cfg.timeout_ms.max(1))))?;
    let outcome = drive_remote(cfg, &prepared, &mut fed, &mut ep)?;
    drop(ep);
    let attacks = attack_phase(cfg, &prepared, &mut fed)?;
    assemble(cfg, &prepared, outcome, attacks, None, t0)
}

/// Binary PGM (one channel) or PPM (three channels) from `[C, H, W]` in `[0, 1]`.
pub fn write_pnm(path: impl AsRef<Path>, image: &[f32], channels: usize, height: usize, width: usize) -> Result<()> {
    if image.len() != channels * height * width {
        return Err(invalid("image size does not match its shape"));
    }
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::new();
    match channels {
        1 => {
            write!(out, "P5\n{width} {height}\n255\n")?;
            out.extend(image.iter().map(|&v| to_u8(v)));
        }
        3 => {
            write!(out, "P6\n{width} {height}\n255\n")?;
            let plane = height * width;
            for i in 0..plane {
                for c in 0..3 {
                    out.push(to_u8(image[c * plane + i]));
                }
            }
        }
        c => return Err(invalid(format!("cannot write a {c}-channel image as PNM"))),
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `report.json`, `metrics.csv`, `trace.jsonl`, attack CSVs and
/// reconstruction images under `dir`.
pub fn write_outputs(out: &RunOutput, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &[u8]| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("report.json", out.report.to_json()?.as_bytes())?;
    put("metrics.csv", out.report.metrics_csv().as_bytes())?;
    let mut lines = String::new();
    for t in &out.traces {
        lines.push_str(&t.to_json_line()?);
        lines.push('\n');
    }
    put("trace.jsonl", lines.as_bytes())?;
    if let Some(r) = &out.report.decoder_attack {
        put("decoder_attack.csv", r.to_csv().as_bytes())?;
    }
    if let Some(g) = &out.report.gradient_match {
        put("gradient_match.csv", g.report.to_csv().as_bytes())?;
    }
    if let Some(d) = &out.report.detection {
        put("detection.csv", d.to_csv().as_bytes())?;
    }
    if let Some((truth, recon)) = &out.reconstructions {
        let rdir = dir.join("recon");
        std::fs::create_dir_all(&rdir)?;
        let [_, c, h, w] = *truth.shape() else {
            return Err(invalid("reconstructions must be [n, C, H, W]"));
        };
        let per = c * h * w;
        let ext = if c == 1 { "pgm" } else { "ppm" };
        for i in 0..truth.batch().min(8) {
            for (tag, t) in [("truth", truth), ("recon", recon)] {
                let p = rdir.join(format!("{i:02}_{tag}.{ext}"));
                write_pnm(&p, &t.data()[i * per..(i + 1) * per], c, h, w)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Parses a `trace.jsonl` file.
pub fn read_trace(text: &str) -> Result<Vec<StepTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub clients: Vec<u32>,
    pub digest: String,
    pub comm: CommReport,
    pub mean_ce: f64,
    pub mean_wcc: f64,
    pub wire_table_ok: bool,
}

pub fn summarize_trace(traces: &[StepTrace]) -> TraceSummary {
    use crate::transport::MsgType::*;
    let mut clients: Vec<u32> = traces.iter().map(|t| t.client).collect();
    clients.sort_unstable();
    clients.dedup();
    let n = traces.len().max(1) as f64;
    TraceSummary {
        steps: traces.len(),
        clients,
        digest: hex(trace_digest(traces)),
        comm: comm_from_traces(traces),
        mean_ce: traces.iter().map(|t| t.ce as f64).sum::<f64>() / n,
        mean_wcc: traces.iter().map(|t| t.wcc as f64).sum::<f64>() / n,
        wire_table_ok: traces.iter().all(|t| t.message_types() == [ZFwd, UFwd, GradU, GradZ]),
    }
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    /// `100 * (acc - acc_base) / acc_base`.
    pub accuracy_delta_pct: f64,
    pub mse_ratio: Option<f64>,
    pub ssim_ratio: Option<f64>,
    pub mse_fg_ratio: Option<f64>,
    pub comm_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonAggregate {
    pub method: String,
    pub seeds: usize,
    pub accuracy_delta_pct: Spread,
    pub mse_ratio: Option<Spread>,
    pub ssim_ratio: Option<Spread>,
    pub mse_fg_ratio: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub aggregates: Vec<ComparisonAggregate>,
}

/// `x1.27`-style ratio cell.
pub fn format_ratio(r: f64) -> String {
    format!("\u{d7}{r:.2}")
}

/// Compares each method report with the baseline report of the same seed.
pub fn compare(baselines: &[RunReport], methods: &[RunReport]) -> Result<Comparison> {
    let mut rows = Vec::new();
    for m in methods {
        let b = baselines
            .iter()
            .find(|b| b.seed == m.seed)
            .ok_or_else(|| Error::MismatchedAxes(format!("no baseline for seed {}", m.seed)))?;
        if b.dataset_hash != m.dataset_hash {
            return Err(Error::MismatchedAxes(format!(
                "seed {}: dataset {} vs baseline {}",
                m.seed, m.dataset_hash, b.dataset_hash
            )));
        }
        let ratio = |a: Option<f64>, c: Option<f64>| Some(a? / c?);
        let da = m.decoder_attack.as_ref().map(|r| r.mean);
        let db = b.decoder_attack.as_ref().map(|r| r.mean);
        let base_acc = b.final_test_accuracy;
        rows.push(ComparisonRow {
            method: m.method.clone(),
            seed: m.seed,
            accuracy_delta_pct: if base_acc == 0.0 {
                0.0
            } else {
                100.0 * (m.final_test_accuracy - base_acc) / base_acc
            },
            mse_ratio: ratio(da.map(|x| x.mse), db.map(|x| x.mse)),
            ssim_ratio: ratio(da.map(|x| x.ssim), db.map(|x| x.ssim)),
            mse_fg_ratio: ratio(da.and_then(|x| x.mse_fg), db.and_then(|x| x.mse_fg)),
            comm_ratio: if m.comm.bytes == 0 {
                1.0
            } else {
                b.comm.bytes as f64 / m.comm.bytes as f64
            },
        });
    }
    let mut methods_seen: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods_seen.dedup();
    let mut uniq = Vec::new();
    for m in methods_seen {
        if !uniq.contains(&m) {
            uniq.push(m);
        }
    }
    let aggregates = uniq
        .into_iter()
        .map(|method| {
            let rs: Vec<&ComparisonRow> = rows.iter().filter(|r| r.method == method).collect();
            let col = |f: &dyn Fn(&ComparisonRow) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                Spread::of(&v)
            };
            ComparisonAggregate {
                seeds: rs.len(),
                accuracy_delta_pct: col(&|r| Some(r.accuracy_delta_pct)).expect("at least one row"),
                mse_ratio: col(&|r| r.mse_ratio),
                ssim_ratio: col(&|r| r.ssim_ratio),
                mse_fg_ratio: col(&|r| r.mse_fg_ratio),
                method,
            }
        })
        .collect();
    Ok(Comparison { rows, aggregates })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("method,seed,accuracy_delta_pct,mse_ratio,ssim_ratio,mse_fg_ratio,comm_ratio\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{},{},{},{:.6}\n",
                r.method,
                r.seed,
                r.accuracy_delta_pct,
                cell(r.mse_ratio),
                cell(r.ssim_ratio),
                cell(r.mse_fg_ratio),
                r.comm_ratio
            ));
        }
        s
    }

    /// Human-readable aggregate table.
    pub fn to_table(&self) -> String {
        let cell = |v: &Option<Spread>| match v {
            Some(s) => format!("{} [{}, {}]", format_ratio(s.mean), format_ratio(s.min), format_ratio(s.max)),
            None => "-".into(),
        };
        let mut s = String::from("method | seeds | acc delta % (mean [min, max]) | MSE ratio | SSIM ratio | fg MSE ratio\n");
        for a in &self.aggregates {
            let d = a.accuracy_delta_pct;
            s.push_str(&format!(
                "{} | {} | {:+.2} [{:+.2}, {:+.2}] | {} | {} | {}\n",
                a.method,
                a.seeds,
                d.mean,
                d.min,
                d.max,
                cell(&a.mse_ratio),
                cell(&a.ssim_ratio),
                cell(&a.mse_fg_ratio)
            ));
        }
        s
    }
}
