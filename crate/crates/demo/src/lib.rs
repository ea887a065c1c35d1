//! WebAssembly bindings for the browser demo. Each exported function returns
//! a JSON string; the plain Rust functions behind them are usable natively.

use serde::Serialize;
use tee_cnn::codec::{compress_lossy, quantize_fp16, CodecReport};
use tee_cnn::experiment::{plan_table, PlanRow};
use tee_cnn::model::{random_input, Layer};
use tee_cnn::partition::{min_feasible_budget, plan_yplane, run_layer_traced, ConvExecutor};
use tee_cnn::{zoo, Architecture, Enclave, EnclaveConfig, FootprintModel, LayerDesc, SchemeKind, Shape3};
use wasm_bindgen::prelude::*;

const MIB: u64 = 1024 * 1024;
const PAGE: u64 = 4096;

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub mib: u64,
    pub unmodified: u64,
    pub yplane: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sweep {
    pub im2col_mib: f64,
    pub yplane_partitions: usize,
    pub points: Vec<SweepPoint>,
}

/// Evictions of the 4 MiB-im2col toy layer, unmodified vs y-plane, for
/// secure memory sizes 1..=max_mib. The y-plane plan is sized for 1 MiB and
/// reused at every size. Each run starts from a full enclave.
pub fn thrashing_sweep(max_mib: u64, seed: u64) -> tee_cnn::Result<Sweep> {
    let (spec, input) = zoo::thrash_toy();
    let arch = Architecture::new(
        "toy",
        input,
        vec![LayerDesc::conv(
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            spec.padding,
        )],
    )?;
    let model = arch.materialize_random(seed)?;
    let Layer::Conv { layer, .. } = &model.layers[0] else {
        unreachable!("toy model is a single conv")
    };
    let x = random_input(input, seed.wrapping_add(1));
    let plan = plan_yplane(&spec, input, MIB, FootprintModel::new(PAGE))?;
    let partitions = plan.partitions();
    let yplane = ConvExecutor::YPlane(plan);
    let run = |exec: &ConvExecutor, mib: u64| -> tee_cnn::Result<u64> {
        let mut e = Enclave::new(EnclaveConfig::new(mib * MIB, PAGE))?;
        e.fill_with_residue()?;
        Ok(run_layer_traced(exec, &mut e, layer, &x)?.1.evictions)
    };
    let points = (1..=max_mib.max(1))
        .map(|mib| {
            Ok(SweepPoint {
                mib,
                unmodified: run(&ConvExecutor::Unmodified, mib)?,
                yplane: run(&yplane, mib)?,
            })
        })
        .collect::<tee_cnn::Result<_>>()?;
    let out = spec.output_shape(input)?;
    Ok(Sweep {
        im2col_mib: (spec.in_channels * spec.kernel * spec.kernel * out.height * out.width * 4) as f64 / MIB as f64,
        yplane_partitions: partitions,
        points,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanExplorer {
    pub model: String,
    pub budget_bytes: u64,
    pub rows: Vec<PlanRow>,
    pub min_budget_yplane: u64,
    pub min_budget_channel: u64,
    pub min_budget_hybrid: u64,
}

/// Per-layer plan for a built-in model at the given secure memory size.
pub fn plan_explorer(model: &str, budget_mib: f64) -> tee_cnn::Result<PlanExplorer> {
    let arch = zoo::builtin(model).ok_or_else(|| tee_cnn::Error::Parse(format!("unknown model {model:?}")))?;
    let budget_bytes = (budget_mib.max(0.0) * MIB as f64).round() as u64;
    let fm = FootprintModel::new(PAGE);
    Ok(PlanExplorer {
        model: arch.name.clone(),
        budget_bytes,
        rows: plan_table(&arch, budget_bytes, fm)?,
        min_budget_yplane: min_feasible_budget(&arch, SchemeKind::YPlane, fm)?,
        min_budget_channel: min_feasible_budget(&arch, SchemeKind::Channel, fm)?,
        min_budget_hybrid: min_feasible_budget(&arch, SchemeKind::Hybrid, fm)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecPoint {
    pub codec: String,
    pub bits: u8,
    pub max_abs_error: f32,
    pub mean_abs_error: f64,
    pub payload_ratio: f64,
    pub total_ratio: f64,
    pub pages: u64,
}

/// Reconstruction error and size for fp16 and every lossy width, on `count`
/// weights drawn uniformly from [0, 1).
pub fn codec_error_vs_bits(count: usize, block_size: usize, seed: u64) -> tee_cnn::Result<Vec<CodecPoint>> {
    let weights = random_input(Shape3::new(1, 1, count.max(1)), seed).into_vec();
    let mut blobs = vec![(16u8, quantize_fp16(&weights))];
    for bits in 2..=10u8 {
        blobs.push((bits, compress_lossy(&weights, bits, block_size)?));
    }
    blobs
        .into_iter()
        .map(|(bits, blob)| {
            let report = CodecReport::measure(&weights, &blob, PAGE)?;
            let decoded = blob.decode()?;
            let mean = weights
                .iter()
                .zip(&decoded)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / weights.len() as f64;
            Ok(CodecPoint {
                codec: blob.codec.to_string(),
                bits,
                max_abs_error: report.max_abs_error,
                mean_abs_error: mean,
                payload_ratio: report.payload_ratio,
                total_ratio: report.total_ratio,
                pages: report.pages_required,
            })
        })
        .collect()
}

fn to_json<T: Serialize>(value: tee_cnn::Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = thrashingSweep)]
pub fn thrashing_sweep_json(max_mib: u32, seed: u32) -> Result<String, JsError> {
    to_json(thrashing_sweep(max_mib as u64, seed as u64))
}

#[wasm_bindgen(js_name = planExplorer)]
pub fn plan_explorer_json(model: &str, budget_mib: f64) -> Result<String, JsError> {
    to_json(plan_explorer(model, budget_mib))
}

#[wasm_bindgen(js_name = codecErrorVsBits)]
pub fn codec_error_vs_bits_json(count: u32, block_size: u32, seed: u32) -> Result<String, JsError> {
    to_json(codec_error_vs_bits(count as usize, block_size as usize, seed as u64))
}

#[wasm_bindgen(js_name = builtinModels)]
pub fn builtin_models() -> String {
    serde_json::to_string(&zoo::BUILTIN_NAMES).expect("static names")
}
