// Loads the raw-ABI wasm module and drives the page. All result buffers are
// read directly from wasm linear memory as Float64Array views and copied
// before the next call.

let wasm = null;
let training = false;

const $ = (id) => document.getElementById(id);
const CLASS_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

async function load() {
  const res = await fetch("pushprune_demo.wasm");
  const { instance } = await WebAssembly.instantiate(await res.arrayBuffer(), {});
  wasm = instance.exports;
  init();
}

function f64s(ptr, len) {
  return new Float64Array(wasm.memory.buffer, ptr, len).slice();
}

function init() {
  training = false;
  const seed = Number($("seed").value) >>> 0;
  const classes = Number($("classes").value) >>> 0;
  wasm.demo_init(seed, classes, 900);
  drawScatter();
  refresh();
}

function refresh() {
  drawCov();
  drawBars($("powers"), f64s(wasm.demo_powers_ptr(), wasm.demo_cov_dim()), "#1f77b4");
  drawBars($("eigs"), f64s(wasm.demo_eigenvalues_ptr(), wasm.demo_cov_dim()), "#d62728");
  const acc = wasm.demo_val_accuracy();
  $("readout").textContent =
    `step ${wasm.demo_steps_done()} · val accuracy ${(100 * acc).toFixed(1)}% · ` +
    `${wasm.demo_params()} parameters`;
}

function drawScatter() {
  const ctx = $("scatter").getContext("2d");
  const W = $("scatter").width, H = $("scatter").height;
  ctx.clearRect(0, 0, W, H);
  const pts = f64s(wasm.demo_points_ptr(), wasm.demo_points_len());
  let xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
  for (let i = 0; i < pts.length; i += 3) {
    xmin = Math.min(xmin, pts[i]); xmax = Math.max(xmax, pts[i]);
    ymin = Math.min(ymin, pts[i + 1]); ymax = Math.max(ymax, pts[i + 1]);
  }
  const sx = (x) => 10 + (W - 20) * (x - xmin) / (xmax - xmin + 1e-9);
  const sy = (y) => H - 10 - (H - 20) * (y - ymin) / (ymax - ymin + 1e-9);
  for (let i = 0; i < pts.length; i += 3) {
    ctx.fillStyle = CLASS_COLORS[pts[i + 2] | 0];
    ctx.globalAlpha = 0.55;
    ctx.beginPath();
    ctx.arc(sx(pts[i]), sy(pts[i + 1]), 2.4, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.globalAlpha = 1;
}

function drawCov() {
  const d = wasm.demo_cov_dim();
  const cov = f64s(wasm.demo_cov_ptr(), d * d);
  const ctx = $("cov").getContext("2d");
  const W = $("cov").width;
  ctx.clearRect(0, 0, W, W);
  const cell = W / d;
  let vmax = 1e-12;
  for (const v of cov) vmax = Math.max(vmax, Math.abs(v));
  for (let i = 0; i < d; i++) {
    for (let j = 0; j < d; j++) {
      const v = cov[i * d + j] / vmax; // [-1, 1]
      // blue → white → red
      const r = v > 0 ? 255 : Math.round(255 * (1 + v));
      const b = v < 0 ? 255 : Math.round(255 * (1 - v));
      const g = Math.round(255 * (1 - Math.abs(v)));
      ctx.fillStyle = `rgb(${r},${g},${b})`;
      ctx.fillRect(j * cell, i * cell, cell - 1, cell - 1);
    }
  }
}

function drawBars(canvas, values, color) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height;
  ctx.clearRect(0, 0, W, H);
  const vmax = Math.max(1e-12, ...values);
  const bw = W / values.length;
  ctx.fillStyle = color;
  values.forEach((v, i) => {
    const h = Math.max(1, (H - 18) * v / vmax);
    ctx.fillRect(i * bw + 3, H - 14 - h, bw - 6, h);
  });
  ctx.fillStyle = "#444";
  ctx.font = "10px sans-serif";
  values.forEach((_, i) => ctx.fillText(String(i), i * bw + bw / 2 - 3, H - 3));
}

function trainLoop() {
  if (!training) return;
  wasm.demo_step(
    10,
    Number($("gamma").value),
    Number($("lambda").value),
    Number($("beta").value),
    Number($("lr").value),
  );
  refresh();
  requestAnimationFrame(trainLoop);
}

for (const id of ["classes", "gamma", "lambda", "beta", "lr", "rho", "step"]) {
  const span = $(`${id}_v`);
  const sync = () => (span.textContent = Number($(id).value).toFixed(id === "classes" ? 0 : 3));
  $(id).addEventListener("input", sync);
  sync();
}

$("btn_init").addEventListener("click", init);
$("btn_train").addEventListener("click", () => {
  training = true;
  $("btn_pause").disabled = false;
  trainLoop();
});
$("btn_pause").addEventListener("click", () => {
  training = false;
  $("btn_pause").disabled = true;
});
$("btn_prune").addEventListener("click", () => {
  training = false;
  wasm.demo_prune(Number($("rho").value), Number($("step").value));
  refresh();
});
$("btn_retrain").addEventListener("click", () => {
  training = false;
  wasm.demo_retrain(2, Number($("lr").value));
  refresh();
});

load();
