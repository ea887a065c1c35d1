//! Y-plane and channel partitioning of convolution layers.
//!
//! Both schemes run the layer as a sequence of rounds; each round expands a
//! slice of the input with im2col, multiplies it with (part of) the weights
//! and adds the result into the output.
//!
//! * **Y-plane**: a round owns a contiguous band of output rows across all
//!   channels, reads the input rows that band depends on, and needs the whole
//!   weight array. Weights bound the footprint.
//! * **Channel**: a round owns a group of input channels and the matching
//!   weight slice, and accumulates into the whole output. The output bounds
//!   the footprint.
//!
//! Footprints are counted in pages. Buffers are page aligned; a strided set
//! of `n` runs is charged `ceil(run/page) + 1` pages per run, capped at the
//! pages of the whole buffer, which bounds the resident set of any round as
//! well as the mix of two consecutive rounds that LRU keeps around.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::enclave::{BufferHandle, Enclave, Memory, PagingStats, Untraced, DEFAULT_PAGE_BYTES};
use crate::error::{Error, Result, SchemeKind};
use crate::im2col::{
    add_bias, conv2d_unmodified, gemm_dispatch, im2col_region, trace_im2col_region, ConvBuffers, RowMap,
};
use crate::layers::{check_conv_params, ActivationKind, ConvLayer, ConvLayerSpec};
use crate::model::Architecture;
use crate::tensor::{Shape3, Tensor3D};

/// Fixed overhead: one page for each of weights, bias, input, workspace and
/// output.
pub const OVERHEAD_PAGES: u64 = 5;

/// Page-granular footprint arithmetic for one page size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintModel {
    pub page_bytes: u64,
}

impl Default for FootprintModel {
    fn default() -> Self {
        FootprintModel {
            page_bytes: DEFAULT_PAGE_BYTES,
        }
    }
}

impl FootprintModel {
    pub fn new(page_bytes: u64) -> Self {
        FootprintModel { page_bytes }
    }

    fn pages(&self, bytes: usize) -> u64 {
        (bytes as u64).div_ceil(self.page_bytes)
    }

    /// Upper bound on pages touched by `runs` disjoint runs of `run_bytes`
    /// inside a page-aligned buffer of `total_bytes`.
    fn strided(&self, runs: usize, run_bytes: usize, total_bytes: usize) -> u64 {
        if runs == 0 || run_bytes == 0 {
            return 0;
        }
        (runs as u64 * (self.pages(run_bytes) + 1)).min(self.pages(total_bytes))
    }

    fn common(&self, spec: &ConvLayerSpec) -> u64 {
        self.pages(spec.weight_bytes()) + self.pages(spec.bias_len() * 4) + OVERHEAD_PAGES
    }

    /// Pages of one y-plane round producing output rows `out_rows`.
    pub fn yplane_round_pages(&self, spec: &ConvLayerSpec, input: Shape3, out_rows: &Range<usize>) -> u64 {
        let out = spec.output_shape(input).expect("validated shape");
        let in_rows = input_rows_unchecked(spec, input.height, out_rows);
        let rows = out_rows.len();
        let input_pages = self.strided(input.channels, in_rows.len() * input.width * 4, input.bytes());
        let ws_pages = self.pages(spec.patch_len() * rows * out.width * 4);
        let out_pages = self.strided(out.channels, rows * out.width * 4, out.bytes());
        self.common(spec) + input_pages + ws_pages + out_pages
    }

    /// Pages of one channel round over input channels `group`.
    pub fn channel_round_pages(&self, spec: &ConvLayerSpec, input: Shape3, group: &Range<usize>) -> u64 {
        let out = spec.output_shape(input).expect("validated shape");
        let g = group.len();
        let kk = spec.kernel * spec.kernel;
        let input_pages = self.strided(1, g * input.plane() * 4, input.bytes());
        let ws_pages = self.pages(g * kk * out.plane() * 4);
        let slice_pages = self.strided(1, out.channels * g * kk * 4, spec.weight_bytes());
        self.pages(out.bytes())
            + self.pages(spec.bias_len() * 4)
            + OVERHEAD_PAGES
            + input_pages
            + ws_pages
            + slice_pages
    }

    /// Footprint of the unpartitioned layer: everything resident at once.
    pub fn unpartitioned_bytes(&self, spec: &ConvLayerSpec, input: Shape3) -> Result<u64> {
        let out = spec.output_shape(input)?;
        Ok(self.yplane_round_pages(spec, input, &(0..out.height)) * self.page_bytes)
    }

    /// Smallest y-plane footprint (one output row per round).
    pub fn yplane_min_bytes(&self, spec: &ConvLayerSpec, input: Shape3) -> Result<u64> {
        let out = spec.output_shape(input)?;
        Ok(split_even(out.height, out.height)
            .iter()
            .map(|r| self.yplane_round_pages(spec, input, r))
            .max()
            .unwrap_or(0)
            * self.page_bytes)
    }

    /// Smallest channel footprint (one input channel per round).
    pub fn channel_min_bytes(&self, spec: &ConvLayerSpec, input: Shape3) -> Result<u64> {
        spec.output_shape(input)?;
        Ok(self.channel_round_pages(spec, input, &(0..1)) * self.page_bytes)
    }
}

/// Input rows `[in_lo, in_hi)` needed for output rows `[y_lo, y_hi)`.
///
/// `in_lo = max(0, y_lo*S - P)`, `in_hi = min(H, (y_hi-1)*S - P + K)`.
pub fn yplane_input_range(y_lo: usize, y_hi: usize, spec: &ConvLayerSpec, height: usize) -> Result<Range<usize>> {
    let out_h = spec
        .out_extent(height)
        .ok_or_else(|| Error::shape("y-plane range", format!("height >= kernel {}", spec.kernel), height))?;
    if y_lo >= y_hi || y_hi > out_h {
        return Err(Error::shape(
            "y-plane range",
            format!("0 <= y_lo < y_hi <= {out_h}"),
            format!("[{y_lo}, {y_hi})"),
        ));
    }
    Ok(input_rows_unchecked(spec, height, &(y_lo..y_hi)))
}

fn input_rows_unchecked(spec: &ConvLayerSpec, height: usize, rows: &Range<usize>) -> Range<usize> {
    let lo = (rows.start * spec.stride).saturating_sub(spec.padding).min(height);
    let hi = ((rows.end - 1) * spec.stride + spec.kernel)
        .saturating_sub(spec.padding)
        .min(height);
    lo..hi.max(lo)
}

/// `total` items cut into `parts` contiguous, near-equal ranges.
pub fn split_even(total: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, total.max(1));
    let (base, extra) = (total / parts, total % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// `total` items cut into chunks of `size` (the last may be shorter).
pub fn split_chunks(total: usize, size: usize) -> Vec<Range<usize>> {
    (0..total)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(total))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YPlanePlan {
    pub layer: ConvLayerSpec,
    pub input: Shape3,
    pub out_ranges: Vec<Range<usize>>,
    pub in_ranges: Vec<Range<usize>>,
    pub footprint_bytes: u64,
    pub page_bytes: u64,
}

impl YPlanePlan {
    /// Plan with explicit output-row partitions. They must tile `[0, outH)`.
    pub fn from_ranges(
        spec: &ConvLayerSpec,
        input: Shape3,
        ranges: Vec<Range<usize>>,
        fm: FootprintModel,
    ) -> Result<Self> {
        let out = spec.output_shape(input)?;
        check_tiling("y-plane partitions", &ranges, out.height)?;
        let in_ranges = ranges
            .iter()
            .map(|r| yplane_input_range(r.start, r.end, spec, input.height))
            .collect::<Result<Vec<_>>>()?;
        let footprint_pages = ranges
            .iter()
            .map(|r| fm.yplane_round_pages(spec, input, r))
            .max()
            .unwrap_or(0);
        Ok(YPlanePlan {
            layer: *spec,
            input,
            out_ranges: ranges,
            in_ranges,
            footprint_bytes: footprint_pages * fm.page_bytes,
            page_bytes: fm.page_bytes,
        })
    }

    /// `count` near-equal partitions.
    pub fn balanced(spec: &ConvLayerSpec, input: Shape3, count: usize, fm: FootprintModel) -> Result<Self> {
        let out = spec.output_shape(input)?;
        YPlanePlan::from_ranges(spec, input, split_even(out.height, count), fm)
    }

    /// Partitions of `rows` output rows each.
    pub fn with_rows(spec: &ConvLayerSpec, input: Shape3, rows: usize, fm: FootprintModel) -> Result<Self> {
        let out = spec.output_shape(input)?;
        YPlanePlan::from_ranges(spec, input, split_chunks(out.height, rows), fm)
    }

    pub fn partitions(&self) -> usize {
        self.out_ranges.len()
    }

    pub fn rows_per_partition(&self) -> usize {
        self.out_ranges.iter().map(Range::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub layer: ConvLayerSpec,
    pub input: Shape3,
    pub groups: Vec<Range<usize>>,
    pub footprint_bytes: u64,
    pub page_bytes: u64,
}

impl ChannelPlan {
    pub fn from_groups(
        spec: &ConvLayerSpec,
        input: Shape3,
        groups: Vec<Range<usize>>,
        fm: FootprintModel,
    ) -> Result<Self> {
        spec.output_shape(input)?;
        check_tiling("channel groups", &groups, spec.in_channels)?;
        let footprint_pages = groups
            .iter()
            .map(|g| fm.channel_round_pages(spec, input, g))
            .max()
            .unwrap_or(0);
        Ok(ChannelPlan {
            layer: *spec,
            input,
            groups,
            footprint_bytes: footprint_pages * fm.page_bytes,
            page_bytes: fm.page_bytes,
        })
    }

    pub fn balanced(spec: &ConvLayerSpec, input: Shape3, count: usize, fm: FootprintModel) -> Result<Self> {
        ChannelPlan::from_groups(spec, input, split_even(spec.in_channels, count), fm)
    }

    pub fn with_group_size(spec: &ConvLayerSpec, input: Shape3, size: usize, fm: FootprintModel) -> Result<Self> {
        ChannelPlan::from_groups(spec, input, split_chunks(spec.in_channels, size), fm)
    }

    pub fn partitions(&self) -> usize {
        self.groups.len()
    }
}

fn check_tiling(context: &'static str, ranges: &[Range<usize>], total: usize) -> Result<()> {
    let mut next = 0;
    for r in ranges {
        if r.start != next || r.end <= r.start {
            break;
        }
        next = r.end;
    }
    if next != total || ranges.iter().map(Range::len).sum::<usize>() != total {
        return Err(Error::shape(
            context,
            format!("contiguous non-empty ranges covering [0, {total})"),
            format!("{ranges:?}"),
        ));
    }
    Ok(())
}

/// Y-plane plan with the fewest near-equal partitions whose every round
/// fits `budget_bytes`.
pub fn plan_yplane(spec: &ConvLayerSpec, input: Shape3, budget_bytes: u64, fm: FootprintModel) -> Result<YPlanePlan> {
    let out = spec.output_shape(input)?;
    for count in 1..=out.height {
        let plan = YPlanePlan::balanced(spec, input, count, fm)?;
        if plan.footprint_bytes <= budget_bytes {
            return Ok(plan);
        }
    }
    Err(Error::InfeasibleBudget {
        scheme: SchemeKind::YPlane,
        required: fm.yplane_min_bytes(spec, input)?,
        budget: budget_bytes,
    })
}

/// Channel plan with the fewest near-equal groups that fit. The whole
/// output stays resident in every round.
pub fn plan_channel(spec: &ConvLayerSpec, input: Shape3, budget_bytes: u64, fm: FootprintModel) -> Result<ChannelPlan> {
    spec.output_shape(input)?;
    for count in 1..=spec.in_channels {
        let plan = ChannelPlan::balanced(spec, input, count, fm)?;
        if plan.footprint_bytes <= budget_bytes {
            return Ok(plan);
        }
    }
    Err(Error::InfeasibleBudget {
        scheme: SchemeKind::Channel,
        required: fm.channel_min_bytes(spec, input)?,
        budget: budget_bytes,
    })
}

/// Footprints weighed by [`select_scheme`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeComparison {
    pub budget_bytes: u64,
    pub unpartitioned_bytes: u64,
    pub yplane_min_bytes: u64,
    pub channel_min_bytes: u64,
    /// Footprint of the planned y-plane split, when one fits.
    pub yplane_bytes: Option<u64>,
    pub channel_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Decision {
    Unpartitioned,
    #[serde(rename = "yplane")]
    YPlane(YPlanePlan),
    Channel(ChannelPlan),
}

impl Decision {
    pub fn name(&self) -> &'static str {
        match self {
            Decision::Unpartitioned => "unpartitioned",
            Decision::YPlane(_) => "yplane",
            Decision::Channel(_) => "channel",
        }
    }

    pub fn partitions(&self) -> usize {
        match self {
            Decision::Unpartitioned => 1,
            Decision::YPlane(p) => p.partitions(),
            Decision::Channel(p) => p.partitions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeChoice {
    pub decision: Decision,
    pub reason: SchemeComparison,
}

/// Per-layer hybrid choice: unpartitioned when everything fits, otherwise
/// whichever feasible plan has the smaller footprint (y-plane on ties).
pub fn select_scheme(
    spec: &ConvLayerSpec,
    input: Shape3,
    budget_bytes: u64,
    fm: FootprintModel,
) -> Result<SchemeChoice> {
    let yplane = plan_yplane(spec, input, budget_bytes, fm).ok();
    let channel = plan_channel(spec, input, budget_bytes, fm).ok();
    let reason = SchemeComparison {
        budget_bytes,
        unpartitioned_bytes: fm.unpartitioned_bytes(spec, input)?,
        yplane_min_bytes: fm.yplane_min_bytes(spec, input)?,
        channel_min_bytes: fm.channel_min_bytes(spec, input)?,
        yplane_bytes: yplane.as_ref().map(|p| p.footprint_bytes),
        channel_bytes: channel.as_ref().map(|p| p.footprint_bytes),
    };
    let decision = if reason.unpartitioned_bytes <= budget_bytes {
        Decision::Unpartitioned
    } else {
        match (yplane, channel) {
            (Some(y), Some(c)) if c.footprint_bytes < y.footprint_bytes => Decision::Channel(c),
            (Some(y), _) => Decision::YPlane(y),
            (None, Some(c)) => Decision::Channel(c),
            (None, None) => {
                return Err(Error::InfeasibleBudget {
                    scheme: SchemeKind::Hybrid,
                    required: reason.yplane_min_bytes.min(reason.channel_min_bytes),
                    budget: budget_bytes,
                })
            }
        }
    };
    Ok(SchemeChoice { decision, reason })
}

fn layer_feasible(spec: &ConvLayerSpec, input: Shape3, budget: u64, scheme: SchemeKind, fm: FootprintModel) -> bool {
    match scheme {
        SchemeKind::YPlane => plan_yplane(spec, input, budget, fm).is_ok(),
        SchemeKind::Channel => plan_channel(spec, input, budget, fm).is_ok(),
        SchemeKind::Hybrid => select_scheme(spec, input, budget, fm).is_ok(),
    }
}

/// Smallest budget (a whole number of pages) at which every conv layer of
/// `arch` has a feasible plan under `scheme`, by binary search over the
/// planners. Feasibility is monotone in the budget.
pub fn min_feasible_budget(arch: &Architecture, scheme: SchemeKind, fm: FootprintModel) -> Result<u64> {
    let convs = arch.conv_layers()?;
    let all_fit = |pages: u64| {
        convs
            .iter()
            .all(|(_, spec, input)| layer_feasible(spec, *input, pages * fm.page_bytes, scheme, fm))
    };
    // everything resident always fits
    let mut hi = convs
        .iter()
        .map(|(_, spec, input)| fm.unpartitioned_bytes(spec, *input).map(|b| b / fm.page_bytes))
        .try_fold(1u64, |m, b| b.map(|b| m.max(b)))?;
    let mut lo = 0u64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if all_fit(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi * fm.page_bytes)
}

/// How a conv layer is executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "executor", rename_all = "lowercase")]
pub enum ConvExecutor {
    Unmodified,
    #[serde(rename = "yplane")]
    YPlane(YPlanePlan),
    Channel(ChannelPlan),
}

impl From<Decision> for ConvExecutor {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Unpartitioned => ConvExecutor::Unmodified,
            Decision::YPlane(p) => ConvExecutor::YPlane(p),
            Decision::Channel(p) => ConvExecutor::Channel(p),
        }
    }
}

impl ConvExecutor {
    pub fn name(&self) -> &'static str {
        match self {
            ConvExecutor::Unmodified => "unmodified",
            ConvExecutor::YPlane(_) => "yplane",
            ConvExecutor::Channel(_) => "channel",
        }
    }

    pub fn partitions(&self) -> usize {
        match self {
            ConvExecutor::Unmodified => 1,
            ConvExecutor::YPlane(p) => p.partitions(),
            ConvExecutor::Channel(p) => p.partitions(),
        }
    }

    /// Runs `layer` on `input`, reporting accesses to `mem`. `bufs` must have
    /// been allocated from the same `mem`.
    pub fn run(
        &self,
        layer: &ConvLayer,
        activation: Option<ActivationKind>,
        input: &Tensor3D,
        mem: &mut dyn Memory,
        bufs: &ConvBuffers,
    ) -> Result<Tensor3D> {
        match self {
            ConvExecutor::Unmodified => {
                let mut out = conv2d_unmodified(input, &layer.weights, layer.bias(), &layer.spec, mem, bufs)?;
                apply_activation(&mut out, activation, mem, &bufs.output)?;
                Ok(out)
            }
            ConvExecutor::YPlane(plan) => run_yplane(input, layer, activation, plan, mem, bufs),
            ConvExecutor::Channel(plan) => run_channel(input, layer, activation, plan, mem, bufs),
        }
    }
}

/// Applies an activation as a separate read-modify-write pass over a buffer.
pub(crate) fn apply_activation(
    out: &mut Tensor3D,
    activation: Option<ActivationKind>,
    mem: &mut dyn Memory,
    buf: &BufferHandle,
) -> Result<()> {
    let Some(act) = activation else { return Ok(()) };
    if mem.is_traced() {
        mem.read(buf, 0, out.shape().bytes())?;
        mem.write(buf, 0, out.shape().bytes())?;
    }
    act.apply_slice(out.data_mut());
    Ok(())
}

fn check_plan(spec: &ConvLayerSpec, plan_spec: &ConvLayerSpec, plan_input: Shape3, input: Shape3) -> Result<()> {
    if spec != plan_spec || plan_input != input {
        return Err(Error::shape(
            "partition plan",
            format!("plan for {plan_spec:?} on {plan_input}"),
            format!("{spec:?} on {input}"),
        ));
    }
    Ok(())
}

fn run_yplane(
    input: &Tensor3D,
    layer: &ConvLayer,
    activation: Option<ActivationKind>,
    plan: &YPlanePlan,
    mem: &mut dyn Memory,
    bufs: &ConvBuffers,
) -> Result<Tensor3D> {
    let spec = &layer.spec;
    check_plan(spec, &plan.layer, plan.input, input.shape())?;
    let out_shape = spec.output_shape(input.shape())?;
    check_conv_params(spec, &layer.weights, layer.bias())?;
    let (oh, ow) = (out_shape.height, out_shape.width);
    let kd = spec.patch_len();
    let ws = mem.alloc(kd * plan.rows_per_partition() * ow * 4, "im2col");
    let mut out = Tensor3D::zeros(out_shape);
    let plane = oh * ow;

    for rows in &plan.out_ranges {
        let cols = rows.len() * ow;
        let b = im2col_region(input, spec, rows.clone(), 0..spec.in_channels);
        if mem.is_traced() {
            trace_im2col_region(
                mem,
                &bufs.input,
                &ws,
                input.shape(),
                spec,
                rows.clone(),
                0..spec.in_channels,
            )?;
        }
        let mut part = vec![0.0f32; spec.out_channels * cols];
        let out_map = RowMap {
            buf: &bufs.output,
            base: rows.start * ow * 4,
            row_stride: plane * 4,
        };
        let maps = [RowMap::dense(&bufs.weights, kd), RowMap::dense(&ws, cols), out_map];
        gemm_dispatch(
            spec.out_channels,
            cols,
            kd,
            &layer.weights,
            b.data(),
            0.0,
            &mut part,
            mem,
            maps,
        )?;

        if mem.is_traced() {
            if let Some(bias_buf) = &bufs.bias {
                mem.read(bias_buf, 0, spec.bias_len() * 4)?;
            }
        }
        let data = out.data_mut();
        for (n, src) in part.chunks_exact(cols).enumerate() {
            let off = n * plane + rows.start * ow;
            let dst = &mut data[off..off + cols];
            dst.copy_from_slice(src);
            if let Some(bias) = layer.bias() {
                for v in dst.iter_mut() {
                    *v += bias[n];
                }
            }
            if let Some(act) = activation {
                act.apply_slice(dst);
            }
            if mem.is_traced() && (layer.bias.is_some() || activation.is_some()) {
                mem.read(&bufs.output, off * 4, cols * 4)?;
                mem.write(&bufs.output, off * 4, cols * 4)?;
            }
        }
    }
    Ok(out)
}

/// Weight slices for each channel group, packed contiguously: group `g` is
/// an `N x (|g|*K*K)` row-major block starting at `N * g.start * K*K`.
pub fn pack_channel_weights(spec: &ConvLayerSpec, weights: &[f32], groups: &[Range<usize>]) -> Vec<f32> {
    let kk = spec.kernel * spec.kernel;
    let kd = spec.patch_len();
    let mut packed = Vec::with_capacity(weights.len());
    for g in groups {
        for n in 0..spec.out_channels {
            packed.extend_from_slice(&weights[n * kd + g.start * kk..n * kd + g.end * kk]);
        }
    }
    packed
}

fn run_channel(
    input: &Tensor3D,
    layer: &ConvLayer,
    activation: Option<ActivationKind>,
    plan: &ChannelPlan,
    mem: &mut dyn Memory,
    bufs: &ConvBuffers,
) -> Result<Tensor3D> {
    let spec = &layer.spec;
    check_plan(spec, &plan.layer, plan.input, input.shape())?;
    let out_shape = spec.output_shape(input.shape())?;
    check_conv_params(spec, &layer.weights, layer.bias())?;
    let kk = spec.kernel * spec.kernel;
    let cols = out_shape.plane();
    let largest = plan.groups.iter().map(Range::len).max().unwrap_or(0);
    let ws = mem.alloc(largest * kk * cols * 4, "im2col");
    let packed = pack_channel_weights(spec, &layer.weights, &plan.groups);
    let mut out = Tensor3D::zeros(out_shape);

    for (round, g) in plan.groups.iter().enumerate() {
        let kd = g.len() * kk;
        let b = im2col_region(input, spec, 0..out_shape.height, g.clone());
        if mem.is_traced() {
            trace_im2col_region(
                mem,
                &bufs.input,
                &ws,
                input.shape(),
                spec,
                0..out_shape.height,
                g.clone(),
            )?;
        }
        let a_off = spec.out_channels * g.start * kk;
        let a = &packed[a_off..a_off + spec.out_channels * kd];
        let a_map = RowMap {
            buf: &bufs.weights,
            base: a_off * 4,
            row_stride: kd * 4,
        };
        let maps = [a_map, RowMap::dense(&ws, cols), RowMap::dense(&bufs.output, cols)];
        let beta = if round == 0 { 0.0 } else { 1.0 };
        gemm_dispatch(
            spec.out_channels,
            cols,
            kd,
            a,
            b.data(),
            beta,
            out.data_mut(),
            mem,
            maps,
        )?;
    }
    add_bias(&mut out, layer.bias(), mem, bufs)?;
    apply_activation(&mut out, activation, mem, &bufs.output)?;
    Ok(out)
}

fn run_maybe_traced(
    input: &Tensor3D,
    layer: &ConvLayer,
    exec: &ConvExecutor,
    enclave: Option<&mut Enclave>,
) -> Result<Tensor3D> {
    match enclave {
        Some(e) => run_layer_traced(exec, e, layer, input).map(|(out, _)| out),
        None => {
            let mut mem = Untraced::default();
            let bufs = ConvBuffers::alloc(&mut mem, &layer.spec, input.shape())?;
            exec.run(layer, None, input, &mut mem, &bufs)
        }
    }
}

/// Y-plane partitioned convolution, optionally traced through `enclave`.
pub fn conv2d_yplane(
    input: &Tensor3D,
    weights: &[f32],
    bias: Option<&[f32]>,
    plan: &YPlanePlan,
    enclave: Option<&mut Enclave>,
) -> Result<Tensor3D> {
    let layer = ConvLayer::new(plan.layer, weights.to_vec(), bias.map(<[f32]>::to_vec))?;
    run_maybe_traced(input, &layer, &ConvExecutor::YPlane(plan.clone()), enclave)
}

/// Channel partitioned convolution, optionally traced through `enclave`.
pub fn conv2d_channel(
    input: &Tensor3D,
    weights: &[f32],
    bias: Option<&[f32]>,
    plan: &ChannelPlan,
    enclave: Option<&mut Enclave>,
) -> Result<Tensor3D> {
    let layer = ConvLayer::new(plan.layer, weights.to_vec(), bias.map(<[f32]>::to_vec))?;
    run_maybe_traced(input, &layer, &ConvExecutor::Channel(plan.clone()), enclave)
}

/// Registers the layer's tensors with `enclave`, runs `exec` and returns the
/// output with the paging delta of the run.
pub fn run_layer_traced(
    exec: &ConvExecutor,
    enclave: &mut Enclave,
    layer: &ConvLayer,
    input: &Tensor3D,
) -> Result<(Tensor3D, PagingStats)> {
    let bufs = ConvBuffers::alloc(enclave, &layer.spec, input.shape())?;
    let before = enclave.stats();
    let out = exec.run(layer, None, input, enclave, &bufs)?;
    Ok((out, enclave.stats() - before))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::EnclaveConfig;
    use crate::layers::conv2d_direct;
    use crate::tensor::max_rel_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MB: u64 = 1 << 20;

    fn random_layer(rng: &mut ChaCha8Rng, spec: ConvLayerSpec, input: Shape3) -> (ConvLayer, Tensor3D) {
        let w = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = spec
            .has_bias
            .then(|| (0..spec.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x = Tensor3D::from_vec(input, (0..input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (ConvLayer::new(spec, w, b).unwrap(), x)
    }

    // Rows of the input an instrumented direct convolution reads when
    // restricted to the given output rows.
    fn touched_rows(spec: &ConvLayerSpec, h: usize, rows: Range<usize>) -> Range<usize> {
        let mut seen = std::collections::BTreeSet::new();
        for oy in rows {
            for ky in 0..spec.kernel {
                let iy = (oy * spec.stride + ky) as i64 - spec.padding as i64;
                if iy >= 0 && (iy as usize) < h {
                    seen.insert(iy as usize);
                }
            }
        }
        let lo = *seen.first().unwrap();
        let hi = *seen.last().unwrap() + 1;
        assert_eq!(seen.len(), hi - lo, "touched rows are contiguous");
        lo..hi
    }

    #[test]
    fn input_range_examples() {
        let spec = ConvLayerSpec::new(6, 1, 3, 1, 0);
        assert_eq!(yplane_input_range(0, 1, &spec, 5).unwrap(), 0..3);
        let spec = ConvLayerSpec::new(2, 2, 1, 1, 0);
        assert_eq!(yplane_input_range(2, 4, &spec, 6).unwrap(), 2..4);
        let spec = ConvLayerSpec::new(2, 2, 3, 2, 1);
        assert_eq!(
            yplane_input_range(1, 3, &spec, 7).unwrap(),
            touched_rows(&spec, 7, 1..3)
        );
        assert!(yplane_input_range(3, 3, &spec, 7).is_err());
        assert!(yplane_input_range(0, 5, &spec, 7).is_err());
    }

    #[test]
    fn input_range_matches_touched_rows_everywhere() {
        for (k, s, p) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 2, 2), (7, 1, 3), (2, 2, 0)] {
            let spec = ConvLayerSpec::new(1, 1, k, s, p);
            for h in k.max(1)..12 {
                let Some(oh) = spec.out_extent(h) else { continue };
                for lo in 0..oh {
                    for hi in lo + 1..=oh {
                        assert_eq!(
                            yplane_input_range(lo, hi, &spec, h).unwrap(),
                            touched_rows(&spec, h, lo..hi)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn split_helpers_tile() {
        assert_eq!(split_even(7, 3), vec![0..3, 3..5, 5..7]);
        assert_eq!(split_chunks(7, 3), vec![0..3, 3..6, 6..7]);
        assert_eq!(split_even(3, 10).len(), 3);
    }

    #[test]
    fn large_budget_gives_single_partition() {
        let spec = ConvLayerSpec::new(4, 8, 3, 1, 1);
        let input = Shape3::new(4, 16, 16);
        let fm = FootprintModel::default();
        let plan = plan_yplane(&spec, input, 64 * MB, fm).unwrap();
        assert_eq!(plan.out_ranges, vec![0..16]);
        let plan = plan_channel(&spec, input, 64 * MB, fm).unwrap();
        assert_eq!(plan.groups, vec![0..4]);
        let choice = select_scheme(&spec, input, 64 * MB, fm).unwrap();
        assert_eq!(choice.decision, Decision::Unpartitioned);
    }

    #[test]
    fn figure_one_layer_one_row_per_partition() {
        // 5x5x6 input, 3x3x6 kernel: outH = 3. A budget just above the
        // single-row footprint forces one row per partition.
        let spec = ConvLayerSpec::new(6, 1, 3, 1, 0);
        let input = Shape3::new(6, 5, 5);
        let fm = FootprintModel::new(64);
        let one = fm.yplane_min_bytes(&spec, input).unwrap();
        let two = YPlanePlan::with_rows(&spec, input, 2, fm).unwrap().footprint_bytes;
        assert!(one < two, "{one} {two}");
        let plan = plan_yplane(&spec, input, one, fm).unwrap();
        assert_eq!(plan.partitions(), 3);
        assert_eq!(plan.in_ranges, vec![0..3, 1..4, 2..5]);
        assert!(matches!(
            plan_yplane(&spec, input, one - 1, fm),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn footprints_shrink_with_more_partitions() {
        let spec = ConvLayerSpec::new(8, 16, 3, 1, 1);
        let input = Shape3::new(8, 40, 40);
        let fm = FootprintModel::new(512);
        let mut prev = u64::MAX;
        for count in 1..=40 {
            let f = YPlanePlan::balanced(&spec, input, count, fm).unwrap().footprint_bytes;
            assert!(f <= prev);
            assert!(f >= (spec.weight_bytes() as u64).next_multiple_of(512));
            prev = f;
        }
        let out_bytes = spec.output_shape(input).unwrap().bytes() as u64;
        let mut prev = u64::MAX;
        for count in 1..=8 {
            let f = ChannelPlan::balanced(&spec, input, count, fm).unwrap().footprint_bytes;
            assert!(f <= prev);
            assert!(f >= out_bytes);
            prev = f;
        }
    }

    #[test]
    fn yplane_equals_direct_for_every_partition_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ConvLayerSpec::new(3, 4, 3, 2, 1);
        let input = Shape3::new(3, 11, 9);
        let (layer, x) = random_layer(&mut rng, spec, input);
        let direct = conv2d_direct(&x, &layer.weights, layer.bias(), &spec).unwrap();
        let im2col = crate::im2col::conv2d_im2col(&x, &layer.weights, layer.bias(), &spec).unwrap();
        let oh = direct.height();
        for count in 1..=oh {
            let plan = YPlanePlan::balanced(&spec, input, count, FootprintModel::default()).unwrap();
            let out = conv2d_yplane(&x, &layer.weights, layer.bias(), &plan, None).unwrap();
            assert!(max_rel_diff(out.data(), direct.data()) <= 1e-5);
            if count == 1 {
                assert_eq!(out, im2col);
            }
        }
    }

    #[test]
    fn channel_equals_direct_for_every_group_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let spec = ConvLayerSpec::new(5, 3, 3, 1, 1);
        let input = Shape3::new(5, 7, 8);
        let (layer, x) = random_layer(&mut rng, spec, input);
        let direct = conv2d_direct(&x, &layer.weights, layer.bias(), &spec).unwrap();
        let im2col = crate::im2col::conv2d_im2col(&x, &layer.weights, layer.bias(), &spec).unwrap();
        for count in 1..=5 {
            let plan = ChannelPlan::balanced(&spec, input, count, FootprintModel::default()).unwrap();
            let out = conv2d_channel(&x, &layer.weights, layer.bias(), &plan, None).unwrap();
            assert!(max_rel_diff(out.data(), direct.data()) <= 1e-5);
            if count == 1 {
                assert_eq!(out, im2col);
            }
        }
    }

    #[test]
    fn plan_shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = ConvLayerSpec::new(2, 2, 3, 1, 1);
        let (layer, _) = random_layer(&mut rng, spec, Shape3::new(2, 6, 6));
        let plan = YPlanePlan::balanced(&spec, Shape3::new(2, 6, 6), 2, FootprintModel::default()).unwrap();
        let other = Tensor3D::zeros(Shape3::new(2, 8, 8));
        assert!(matches!(
            conv2d_yplane(&other, &layer.weights, layer.bias(), &plan, None),
            Err(Error::Shape { .. })
        ));
        assert!(
            YPlanePlan::from_ranges(&spec, Shape3::new(2, 6, 6), vec![0..2, 3..6], FootprintModel::default()).is_err()
        );
    }

    #[test]
    fn traced_outputs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let spec = ConvLayerSpec::new(4, 6, 3, 1, 1);
        let input = Shape3::new(4, 12, 12);
        let (layer, x) = random_layer(&mut rng, spec, input);
        let fm = FootprintModel::default();
        for exec in [
            ConvExecutor::Unmodified,
            ConvExecutor::YPlane(YPlanePlan::balanced(&spec, input, 4, fm).unwrap()),
            ConvExecutor::Channel(ChannelPlan::balanced(&spec, input, 3, fm).unwrap()),
        ] {
            let mut mem = Untraced::default();
            let bufs = ConvBuffers::alloc(&mut mem, &spec, input).unwrap();
            let plain = exec
                .run(&layer, Some(ActivationKind::Relu), &x, &mut mem, &bufs)
                .unwrap();
            let mut e = Enclave::new(EnclaveConfig::new(8 * 4096, 4096)).unwrap();
            let bufs = ConvBuffers::alloc(&mut e, &spec, input).unwrap();
            let traced = exec.run(&layer, Some(ActivationKind::Relu), &x, &mut e, &bufs).unwrap();
            assert_eq!(plain, traced, "{}", exec.name());
            assert!(e.stats().faults > 0);
        }
    }

    #[test]
    fn yplane_within_budget_does_not_thrash() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let spec = ConvLayerSpec::new(16, 32, 3, 1, 1);
        let input = Shape3::new(16, 48, 48);
        let (layer, x) = random_layer(&mut rng, spec, input);
        let fm = FootprintModel::default();
        let budget = 160 * 4096;
        let plan = plan_yplane(&spec, input, budget, fm).unwrap();
        assert!(plan.partitions() > 1);
        let mut e = Enclave::new(EnclaveConfig::new(budget, 4096)).unwrap();
        e.enable_trace();
        let (_, stats) = run_layer_traced(&ConvExecutor::YPlane(plan), &mut e, &layer, &x).unwrap();
        let trace = e.take_trace();
        let distinct = trace
            .iter()
            .map(|t| t.page)
            .collect::<std::collections::HashSet<_>>()
            .len() as u64;
        assert!(stats.evictions <= 2 * distinct, "{} vs {distinct}", stats.evictions);
        assert!(stats.faults <= 2 * distinct);
    }

    // Counts distinct (round, output page) pairs; a round starts with the
    // workspace write at offset 0.
    #[derive(Default)]
    struct RoundPages {
        labels: Vec<String>,
        round: usize,
        seen: std::collections::HashSet<(usize, usize)>,
    }

    impl Memory for RoundPages {
        fn alloc(&mut self, len: usize, label: &str) -> BufferHandle {
            self.labels.push(label.to_string());
            let mut u = Untraced::default();
            for _ in 1..self.labels.len() {
                u.alloc(0, "");
            }
            u.alloc(len, label)
        }

        fn access(
            &mut self,
            buf: &BufferHandle,
            offset: usize,
            len: usize,
            kind: crate::enclave::AccessKind,
        ) -> Result<()> {
            match self.labels[buf.id()].as_str() {
                "im2col" if offset == 0 && kind == crate::enclave::AccessKind::Write => self.round += 1,
                "output" => {
                    for page in offset / 4096..(offset + len).div_ceil(4096) {
                        self.seen.insert((self.round, page));
                    }
                }
                _ => {}
            }
            Ok(())
        }

        fn is_traced(&self) -> bool {
            true
        }
    }

    #[test]
    fn channel_rounds_retouch_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let spec = ConvLayerSpec::new(8, 8, 3, 1, 1).without_bias();
        let input = Shape3::new(8, 32, 32);
        let (layer, x) = random_layer(&mut rng, spec, input);
        let fm = FootprintModel::default();
        let out_pages = spec.output_shape(input).unwrap().bytes() / 4096;
        for groups in [1usize, 2, 4, 8] {
            let plan = ChannelPlan::balanced(&spec, input, groups, fm).unwrap();
            let mut mem = RoundPages::default();
            let bufs = ConvBuffers::alloc(&mut mem, &spec, input).unwrap();
            ConvExecutor::Channel(plan)
                .run(&layer, None, &x, &mut mem, &bufs)
                .unwrap();
            assert_eq!(mem.round, groups);
            assert_eq!(mem.seen.len(), groups * out_pages);
        }
    }

    #[test]
    fn scheme_selection_and_budget_search() {
        let fm = FootprintModel::default();
        // Large output, tiny weights: y-plane.
        let early = ConvLayerSpec::new(8, 8, 3, 1, 1);
        let early_in = Shape3::new(8, 128, 128);
        // Large weights, tiny output: channel.
        let late = ConvLayerSpec::new(256, 256, 3, 1, 1);
        let late_in = Shape3::new(256, 4, 4);
        let budget = 200 * 4096;
        let c = select_scheme(&early, early_in, budget, fm).unwrap();
        assert_eq!(c.decision.name(), "yplane");
        assert!(c.reason.channel_bytes.is_none());
        let c = select_scheme(&late, late_in, budget, fm).unwrap();
        assert_eq!(c.decision.name(), "channel");
        assert!(c.reason.yplane_bytes.is_none());
        assert!(select_scheme(&late, late_in, 4096 * 6, fm).unwrap_err().is_infeasible());

        let arch = Architecture::new(
            "pair",
            early_in,
            vec![
                crate::model::LayerDesc::conv(8, 8, 3, 1, 1),
                crate::model::LayerDesc::Maxpool(crate::layers::PoolSpec::new(32, 32)),
                crate::model::LayerDesc::conv(8, 256, 3, 1, 1),
                crate::model::LayerDesc::conv(256, 256, 3, 1, 1),
            ],
        )
        .unwrap();
        let y = min_feasible_budget(&arch, SchemeKind::YPlane, fm).unwrap();
        let c = min_feasible_budget(&arch, SchemeKind::Channel, fm).unwrap();
        let h = min_feasible_budget(&arch, SchemeKind::Hybrid, fm).unwrap();
        assert!(h <= y.min(c));
        // closed form: max over layers of the per-layer minimum
        let convs = arch.conv_layers().unwrap();
        let closed = |f: &dyn Fn(&ConvLayerSpec, Shape3) -> u64| convs.iter().map(|(_, s, i)| f(s, *i)).max().unwrap();
        assert_eq!(y, closed(&|s, i| fm.yplane_min_bytes(s, i).unwrap()));
        assert_eq!(c, closed(&|s, i| fm.channel_min_bytes(s, i).unwrap()));
        assert_eq!(
            h,
            closed(&|s, i| fm
                .yplane_min_bytes(s, i)
                .unwrap()
                .min(fm.channel_min_bytes(s, i).unwrap()))
        );
    }

    #[test]
    fn plans_serialise_for_explain() {
        let spec = ConvLayerSpec::new(2, 2, 3, 1, 1);
        let plan = YPlanePlan::balanced(&spec, Shape3::new(2, 6, 6), 2, FootprintModel::default()).unwrap();
        let json = serde_json::to_string(&Decision::YPlane(plan)).unwrap();
        assert!(
            json.contains("\"scheme\":\"yplane\"") && json.contains("out_ranges"),
            "{json}"
        );
    }
}
