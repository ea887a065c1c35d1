import init, { thrashingSweep, planExplorer, codecErrorVsBits, builtinModels } from "./pkg/tee_cnn_demo.js";

const $ = (id) => document.getElementById(id);
const MIB = 1024 * 1024;
const mb = (bytes) => (bytes == null ? "-" : (bytes / MIB).toFixed(2));

function table(headers, rows, rowClass) {
  const head = headers.map((h, i) => `<th class="${i === 0 ? "l" : ""}">${h}</th>`).join("");
  const body = rows
    .map((r, k) => `<tr class="${rowClass ? rowClass(k) : ""}">${r.map((c, i) => `<td class="${i === 0 ? "l" : ""}">${c}</td>`).join("")}</tr>`)
    .join("");
  return `<table><thead><tr>${head}</tr></thead><tbody>${body}</tbody></table>`;
}

// Line chart with a log10 y axis. series: [{ name, color, points: [[x, y]] }]
function chart(canvas, series, xLabel, yLabel) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, L = 70, R = 140, T = 20, B = 40;
  ctx.clearRect(0, 0, W, H);
  const pts = series.flatMap((s) => s.points).filter(([, y]) => y > 0);
  if (!pts.length) return;
  const xs = pts.map(([x]) => x), ys = pts.map(([, y]) => Math.log10(y));
  const x0 = Math.min(...xs), x1 = Math.max(...xs);
  const y0 = Math.floor(Math.min(...ys)), y1 = Math.ceil(Math.max(...ys)) || 1;
  const px = (x) => L + ((x - x0) / (x1 - x0 || 1)) * (W - L - R);
  const py = (y) => H - B - ((Math.log10(y) - y0) / (y1 - y0 || 1)) * (H - T - B);

  ctx.font = "12px system-ui";
  ctx.strokeStyle = "#ddd";
  ctx.fillStyle = "#444";
  for (let e = y0; e <= y1; e++) {
    const y = py(10 ** e);
    ctx.beginPath(); ctx.moveTo(L, y); ctx.lineTo(W - R, y); ctx.stroke();
    ctx.fillText(`1e${e}`, 8, y + 4);
  }
  for (const x of [...new Set(xs)]) ctx.fillText(String(x), px(x) - 4, H - B + 16);
  ctx.fillText(xLabel, (W - R) / 2, H - 6);
  ctx.save(); ctx.translate(14, T + 60); ctx.rotate(-Math.PI / 2); ctx.fillText(yLabel, -60, 40); ctx.restore();

  series.forEach((s, i) => {
    ctx.strokeStyle = s.color; ctx.fillStyle = s.color; ctx.lineWidth = 2;
    ctx.beginPath();
    s.points.filter(([, y]) => y > 0).forEach(([x, y], k) => (k ? ctx.lineTo(px(x), py(y)) : ctx.moveTo(px(x), py(y))));
    ctx.stroke();
    for (const [x, y] of s.points) if (y > 0) ctx.fillRect(px(x) - 3, py(y) - 3, 6, 6);
    ctx.fillText(s.name, W - R + 12, T + 16 + i * 18);
  });
  ctx.lineWidth = 1;
}

function status(text) { $("status").textContent = text; }

function timed(label, f) {
  status(`${label}...`);
  setTimeout(() => {
    const t = performance.now();
    try {
      f();
      status(`${label}: ${((performance.now() - t) / 1000).toFixed(2)} s`);
    } catch (e) {
      status(`${label} failed: ${e.message ?? e}`);
    }
  }, 10);
}

function runSweep() {
  timed("thrashing sweep", () => {
    const s = JSON.parse(thrashingSweep(Number($("sweep-max").value), 3));
    chart($("sweep-chart"), [
      { name: "unmodified", color: "#c0392b", points: s.points.map((p) => [p.mib, p.unmodified]) },
      { name: `y-plane (${s.yplane_partitions})`, color: "#2471a3", points: s.points.map((p) => [p.mib, p.yplane]) },
    ], "secure memory (MiB)", "evictions");
    $("sweep-table").innerHTML = table(
      ["MiB", "unmodified", "y-plane", "ratio"],
      s.points.map((p) => [p.mib, p.unmodified, p.yplane, (p.unmodified / Math.max(1, p.yplane)).toFixed(1)]),
    );
  });
}

function runPlan() {
  timed("plan", () => {
    const p = JSON.parse(planExplorer($("plan-model").value, Number($("plan-mib").value)));
    $("plan-summary").textContent =
      `${p.model} at ${mb(p.budget_bytes)} MiB. Smallest workable secure memory: ` +
      `hybrid ${mb(p.min_budget_hybrid)}, channel ${mb(p.min_budget_channel)}, y-plane ${mb(p.min_budget_yplane)} MiB.`;
    const shape = (s) => `${s.channels}x${s.height}x${s.width}`;
    $("plan-table").innerHTML = table(
      ["layer", "input", "output", "weights", "unpartitioned", "y-plane", "channel", "choice", "parts"],
      p.rows.map((r) => [r.layer, shape(r.input), shape(r.output), mb(r.weight_bytes), mb(r.unpartitioned_bytes),
        mb(r.yplane_bytes), mb(r.channel_bytes), r.decision, r.partitions]),
      (k) => (p.rows[k].chosen_bytes == null ? "over" : ""),
    );
  });
}

function runCodec() {
  timed("codec sweep", () => {
    const pts = JSON.parse(codecErrorVsBits(Number($("codec-count").value), Number($("codec-block").value), 5));
    const lossy = pts.filter((p) => p.codec !== "fp16");
    const fp16 = pts.find((p) => p.codec === "fp16");
    chart($("codec-chart"), [
      { name: "lossy max", color: "#c0392b", points: lossy.map((p) => [p.bits, p.max_abs_error]) },
      { name: "lossy mean", color: "#e59866", points: lossy.map((p) => [p.bits, p.mean_abs_error]) },
      { name: "fp16 max", color: "#2471a3", points: lossy.map((p) => [p.bits, fp16.max_abs_error]) },
    ], "bits per weight", "abs error");
    $("codec-table").innerHTML = table(
      ["codec", "max error", "mean error", "payload ratio", "total ratio", "pages"],
      pts.map((p) => [p.codec, p.max_abs_error.toExponential(2), p.mean_abs_error.toExponential(2),
        p.payload_ratio.toFixed(2), p.total_ratio.toFixed(2), p.pages]),
    );
  });
}

await init();
for (const name of JSON.parse(builtinModels())) $("plan-model").add(new Option(name, name, name === "vgg-large-desk", name === "vgg-large-desk"));
$("sweep-run").onclick = runSweep;
$("plan-run").onclick = runPlan;
$("codec-run").onclick = runCodec;
status("ready");
runPlan();
