//! End-to-end traced runs of a model and their reports.
//!
//! A run keeps one enclave for the whole model: each layer reads the buffer
//! its predecessor wrote, and allocates fresh buffers for its own weights,
//! workspace and output. Per-layer counters are deltas over that layer.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{fc_streamed_from, Codec, WeightBlob};
use crate::enclave::{Enclave, EnclaveConfig, Memory, TraceEvent};
use crate::error::{Error, Result, SchemeKind};
use crate::im2col::{ConvBuffers, Im2colLayout};
use crate::layers::{maxpool, ConvLayerSpec};
use crate::model::{load_model, random_input, Architecture, Layer, Model};
use crate::partition::{
    min_feasible_budget, plan_channel, plan_yplane, select_scheme, ChannelPlan, ConvExecutor, Decision, FootprintModel,
    YPlanePlan,
};
use crate::tensor::{checksum, Shape3, Tensor3D};

/// Conv execution strategy for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Unmodified,
    #[serde(rename = "yplane")]
    YPlane,
    Channel,
    Hybrid,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Unmodified, Scheme::YPlane, Scheme::Channel, Scheme::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Unmodified => "unmodified",
            Scheme::YPlane => "yplane",
            Scheme::Channel => "channel",
            Scheme::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown scheme {s:?}, expected unmodified|yplane|channel|hybrid"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub enclave: EnclaveConfig,
    pub scheme: Scheme,
    pub fc_codec: Codec,
    pub workers: usize,
    /// Seeds the input tensor.
    pub seed: u64,
    pub record_trace: bool,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<PathBuf>, enclave: EnclaveConfig) -> Self {
        ExperimentConfig {
            model: model.into(),
            enclave,
            scheme: Scheme::Hybrid,
            fc_codec: Codec::Raw32,
            workers: 2,
            seed: 1,
            record_trace: false,
        }
    }

    pub fn footprint_model(&self) -> FootprintModel {
        FootprintModel::new(self.enclave.page_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub input_bytes: u64,
    pub im2col_bytes: u64,
    pub weight_bytes: u64,
    pub output_bytes: u64,
    /// Conv executor, fc codec, or `-`.
    pub scheme: String,
    pub partitions: usize,
    pub feasible: bool,
    /// Smallest footprint that would have fit, for infeasible layers.
    pub required_bytes: u64,
    pub faults: u64,
    pub evictions: u64,
    pub dirty_evictions: u64,
    pub cost_units: f64,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub scheme: Scheme,
    pub fc_codec: Codec,
    pub secure_bytes: u64,
    pub page_bytes: u64,
    pub layers: usize,
    pub infeasible_layers: usize,
    pub total_faults: u64,
    pub total_evictions: u64,
    pub total_cost: f64,
    pub min_budget_yplane: u64,
    pub min_budget_channel: u64,
    pub min_budget_hybrid: u64,
    pub output_checksum: u64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub layers: Vec<LayerReport>,
    pub summary: Summary,
    pub output: Vec<f32>,
    pub trace: Option<Vec<TraceEvent>>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let model = load_model(&cfg.model)?;
    run_model(&model, cfg)
}

/// Picks the conv executor for `scheme` at `budget`. Infeasible layers fall
/// back to the finest plan of the closest scheme and report the footprint
/// they needed.
pub fn choose_executor(
    scheme: Scheme,
    spec: &ConvLayerSpec,
    input: Shape3,
    budget: u64,
    fm: FootprintModel,
) -> Result<(ConvExecutor, Option<u64>)> {
    let finest_y = || YPlanePlan::with_rows(spec, input, 1, fm).map(ConvExecutor::YPlane);
    let finest_c = || ChannelPlan::with_group_size(spec, input, 1, fm).map(ConvExecutor::Channel);
    let required = |e: Error| match e {
        Error::InfeasibleBudget { required, .. } => Ok(required),
        other => Err(other),
    };
    Ok(match scheme {
        Scheme::Unmodified => (ConvExecutor::Unmodified, None),
        Scheme::YPlane => match plan_yplane(spec, input, budget, fm) {
            Ok(p) => (ConvExecutor::YPlane(p), None),
            Err(e) => (finest_y()?, Some(required(e)?)),
        },
        Scheme::Channel => match plan_channel(spec, input, budget, fm) {
            Ok(p) => (ConvExecutor::Channel(p), None),
            Err(e) => (finest_c()?, Some(required(e)?)),
        },
        Scheme::Hybrid => match select_scheme(spec, input, budget, fm) {
            Ok(choice) => (choice.decision.into(), None),
            Err(e) => {
                let need = required(e)?;
                if fm.yplane_min_bytes(spec, input)? <= fm.channel_min_bytes(spec, input)? {
                    (finest_y()?, Some(need))
                } else {
                    (finest_c()?, Some(need))
                }
            }
        },
    })
}

/// Runs `model` on a seeded input inside a fresh enclave. `cfg.model` is
/// not read.
pub fn run_model(model: &Model, cfg: &ExperimentConfig) -> Result<Experiment> {
    if cfg.workers == 0 {
        return Err(Error::Config("at least one decode worker is required".into()));
    }
    let fm = cfg.footprint_model();
    let budget = cfg.enclave.secure_bytes;
    let mut enclave = Enclave::new(cfg.enclave)?;
    if cfg.record_trace {
        enclave.enable_trace();
    }

    let mut cur = random_input(model.input, cfg.seed);
    let mut cur_buf = enclave.alloc(cur.shape().bytes(), "input");
    enclave.write(&cur_buf, 0, cur.shape().bytes())?;

    let mut reports = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let index = i + 1;
        let in_shape = cur.shape();
        let before = enclave.stats();
        let mut report = LayerReport {
            layer: index,
            kind: layer.desc().kind_name().to_string(),
            input_bytes: in_shape.bytes() as u64,
            im2col_bytes: 0,
            weight_bytes: 0,
            output_bytes: 0,
            scheme: "-".into(),
            partitions: 1,
            feasible: true,
            required_bytes: 0,
            faults: 0,
            evictions: 0,
            dirty_evictions: 0,
            cost_units: 0.0,
            checksum: 0,
        };
        let mut extra_cost = 0.0;

        let (out, out_buf) = match layer {
            Layer::Conv {
                layer: conv,
                activation,
            } => {
                let spec = &conv.spec;
                report.im2col_bytes = Im2colLayout::new(spec, in_shape)
                    .map_err(|e| e.at_layer(index))?
                    .bytes() as u64;
                report.weight_bytes = spec.weight_bytes() as u64;
                let (exec, required) =
                    choose_executor(cfg.scheme, spec, in_shape, budget, fm).map_err(|e| e.at_layer(index))?;
                report.scheme = exec.name().to_string();
                report.partitions = exec.partitions();
                if let Some(r) = required {
                    report.feasible = false;
                    report.required_bytes = r;
                }
                let out_shape = spec.output_shape(in_shape)?;
                let bufs = ConvBuffers {
                    input: cur_buf.clone(),
                    weights: enclave.alloc(spec.weight_bytes(), "weights"),
                    bias: spec.has_bias.then(|| enclave.alloc(spec.bias_len() * 4, "bias")),
                    output: enclave.alloc(out_shape.bytes(), "output"),
                };
                let out = exec
                    .run(conv, *activation, &cur, &mut enclave, &bufs)
                    .map_err(|e| e.at_layer(index))?;
                (out, bufs.output)
            }
            Layer::MaxPool(pool) => {
                let out = maxpool(&cur, pool).map_err(|e| e.at_layer(index))?;
                let buf = enclave.alloc(out.shape().bytes(), "pool");
                enclave.read(&cur_buf, 0, in_shape.bytes())?;
                enclave.write(&buf, 0, out.shape().bytes())?;
                (out, buf)
            }
            Layer::Activation(kind) => {
                let mut out = cur.clone();
                enclave.read(&cur_buf, 0, in_shape.bytes())?;
                enclave.write(&cur_buf, 0, in_shape.bytes())?;
                kind.apply_slice(out.data_mut());
                (out, cur_buf.clone())
            }
            Layer::Fc { layer: fc, activation } => {
                report.weight_bytes = 4 * fc.spec.weight_len() as u64;
                report.scheme = cfg.fc_codec.to_string();
                let blob = WeightBlob::encode(&fc.weights, cfg.fc_codec).map_err(|e| e.at_layer(index))?;
                let (r, buf) = fc_streamed_from(
                    cur.data(),
                    &cur_buf,
                    &blob,
                    fc.bias(),
                    &fc.spec,
                    &mut enclave,
                    cfg.workers,
                )
                .map_err(|e| e.at_layer(index))?;
                extra_cost = r.cost_units;
                let mut values = r.output;
                if let Some(a) = activation {
                    enclave.read(&buf, 0, values.len() * 4)?;
                    enclave.write(&buf, 0, values.len() * 4)?;
                    a.apply_slice(&mut values);
                }
                (
                    Tensor3D::from_vec(Shape3::new(fc.spec.out_features, 1, 1), values)?,
                    buf,
                )
            }
        };

        let delta = enclave.stats() - before;
        report.output_bytes = out.shape().bytes() as u64;
        report.faults = delta.faults;
        report.evictions = delta.evictions;
        report.dirty_evictions = delta.dirty_evictions;
        report.cost_units = delta.total_cost + extra_cost;
        report.checksum = checksum(out.data());
        reports.push(report);
        cur = out;
        cur_buf = out_buf;
    }

    let arch = model.architecture();
    let summary = Summary {
        model: model.name.clone(),
        scheme: cfg.scheme,
        fc_codec: cfg.fc_codec,
        secure_bytes: cfg.enclave.secure_bytes,
        page_bytes: cfg.enclave.page_bytes,
        layers: reports.len(),
        infeasible_layers: reports.iter().filter(|r| !r.feasible).count(),
        total_faults: reports.iter().map(|r| r.faults).sum(),
        total_evictions: reports.iter().map(|r| r.evictions).sum(),
        total_cost: reports.iter().map(|r| r.cost_units).sum(),
        min_budget_yplane: min_feasible_budget(&arch, SchemeKind::YPlane, fm)?,
        min_budget_channel: min_feasible_budget(&arch, SchemeKind::Channel, fm)?,
        min_budget_hybrid: min_feasible_budget(&arch, SchemeKind::Hybrid, fm)?,
        output_checksum: checksum(cur.data()),
    };
    let trace = cfg.record_trace.then(|| enclave.take_trace());
    Ok(Experiment {
        layers: reports,
        summary,
        output: cur.into_vec(),
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Config(format!(
                "unknown report format {s:?}, expected csv|markdown"
            ))),
        }
    }
}

/// CSV columns, in [`LayerReport`] field order.
pub const CSV_HEADER: [&str; 15] = [
    "layer",
    "type",
    "input_bytes",
    "im2col_bytes",
    "weight_bytes",
    "output_bytes",
    "scheme",
    "partitions",
    "feasible",
    "required_bytes",
    "faults",
    "evictions",
    "dirty_evictions",
    "cost_units",
    "checksum",
];

fn mib(bytes: u64) -> String {
    format!("{:.2}", bytes as f64 / (1u64 << 20) as f64)
}

pub fn emit_report(reports: &[LayerReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            if reports.is_empty() {
                w.write_record(CSV_HEADER).expect("in-memory write");
            }
            for r in reports {
                w.serialize(r).expect("in-memory write");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
        }
        ReportFormat::Markdown => {
            out.push_str("| Layer | Type | Input (MB) | im2col (MB) | Weights (MB) | Output (MB) | Scheme | Partitions | Faults | Evictions | Cost |\n");
            out.push_str("|---:|---|---:|---:|---:|---:|---|---:|---:|---:|---:|\n");
            for r in reports {
                let scheme = if r.feasible {
                    r.scheme.clone()
                } else {
                    format!("{} (infeasible, needs {} MB)", r.scheme, mib(r.required_bytes))
                };
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.1} |",
                    r.layer,
                    r.kind,
                    mib(r.input_bytes),
                    mib(r.im2col_bytes),
                    mib(r.weight_bytes),
                    mib(r.output_bytes),
                    scheme,
                    r.partitions,
                    r.faults,
                    r.evictions,
                    r.cost_units
                );
            }
        }
    }
    out
}

/// Reads back the CSV written by [`emit_report`].
pub fn parse_csv_report(text: &str) -> Result<Vec<LayerReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected report header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// One conv layer of [`plan_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub layer: usize,
    pub input: Shape3,
    pub output: Shape3,
    pub weight_bytes: u64,
    /// `unpartitioned`, `yplane`, `channel` or `infeasible`.
    pub decision: String,
    pub partitions: usize,
    pub unpartitioned_bytes: u64,
    pub yplane_min_bytes: u64,
    pub channel_min_bytes: u64,
    pub yplane_bytes: Option<u64>,
    pub channel_bytes: Option<u64>,
    pub chosen_bytes: Option<u64>,
}

/// The hybrid decision for every conv layer at `budget`.
pub fn plan_table(arch: &Architecture, budget: u64, fm: FootprintModel) -> Result<Vec<PlanRow>> {
    let mut rows = Vec::new();
    for (index, spec, input) in arch.conv_layers()? {
        let output = spec.output_shape(input)?;
        let mut row = PlanRow {
            layer: index,
            input,
            output,
            weight_bytes: spec.weight_bytes() as u64,
            decision: "infeasible".into(),
            partitions: 0,
            unpartitioned_bytes: fm.unpartitioned_bytes(&spec, input)?,
            yplane_min_bytes: fm.yplane_min_bytes(&spec, input)?,
            channel_min_bytes: fm.channel_min_bytes(&spec, input)?,
            yplane_bytes: None,
            channel_bytes: None,
            chosen_bytes: None,
        };
        match select_scheme(&spec, input, budget, fm) {
            Ok(choice) => {
                row.yplane_bytes = choice.reason.yplane_bytes;
                row.channel_bytes = choice.reason.channel_bytes;
                row.partitions = choice.decision.partitions();
                row.chosen_bytes = Some(match &choice.decision {
                    Decision::Unpartitioned => row.unpartitioned_bytes,
                    Decision::YPlane(p) => p.footprint_bytes,
                    Decision::Channel(p) => p.footprint_bytes,
                });
                row.decision = choice.decision.name().into();
            }
            Err(e) if e.is_infeasible() => {}
            Err(e) => return Err(e.at_layer(index)),
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Human-readable [`plan_table`].
pub fn explain_plan(arch: &Architecture, budget: u64, fm: FootprintModel) -> Result<String> {
    let opt = |b: Option<u64>| b.map_or_else(|| "-".to_string(), mib);
    let mut out = format!(
        "{} at {} MB secure memory, {}-byte pages\n\n",
        arch.name,
        mib(budget),
        fm.page_bytes
    );
    out.push_str("| Layer | Input | Output | Weights (MB) | Unpartitioned (MB) | Y-plane (MB) | Channel (MB) | Choice | Partitions |\n");
    out.push_str("|---:|---|---|---:|---:|---:|---:|---|---:|\n");
    for r in plan_table(arch, budget, fm)? {
        let choice = if r.decision == "infeasible" {
            format!(
                "infeasible (needs {} MB)",
                mib(r.yplane_min_bytes.min(r.channel_min_bytes))
            )
        } else {
            r.decision.clone()
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.layer,
            r.input,
            r.output,
            mib(r.weight_bytes),
            mib(r.unpartitioned_bytes),
            opt(r.yplane_bytes),
            opt(r.channel_bytes),
            choice,
            r.partitions
        );
    }
    Ok(out)
}
