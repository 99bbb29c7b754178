// Plain-JS driver for the forgelab wasm playground. Expects the wasm-pack
// output in ./pkg (wasm-pack build crates/demo --target web --out-dir www/pkg).

import init, { Lab } from "./pkg/forgelab_demo.js";

const CLASS_COLORS = ["#53b1fd", "#f97066", "#4ade80", "#fbbf24", "#c084fc", "#22d3ee"];
const REGION_COLORS = ["#1d3a57", "#57262a", "#1d4430", "#574a1d", "#3d2a57", "#1d4c57"];

const el = (id) => document.getElementById(id);
const readout = el("readout");

let lab = null;
let running = false;
let records = [];
let points = null;

function options() {
  return {
    dataset: el("dataset").value,
    strategy: el("strategy").value,
    generations: +el("generations").value,
    epochs: +el("epochs").value,
    ascent_epochs: +el("ascent").value,
    threshold: +el("threshold").value,
    lr: +el("lr").value,
    ascent_scale: +el("scale").value,
    seed: +el("seed").value,
  };
}

function reset() {
  running = false;
  el("run").textContent = "run";
  try {
    lab = new Lab(JSON.stringify(options()));
  } catch (e) {
    readout.textContent = `error: ${e.message || e}`;
    lab = null;
    return;
  }
  records = [];
  points = JSON.parse(lab.points());
  el("probe-out").textContent = "";
  el("spec-out").textContent = "";
  clearCanvas("depth");
  clearCanvas("spec");
  drawBoundary();
  drawCurves();
  readout.textContent = "ready";
}

function clearCanvas(id) {
  const c = el(id);
  c.getContext("2d").clearRect(0, 0, c.width, c.height);
}

function drawBoundary() {
  if (!lab) return;
  const canvas = el("boundary");
  const ctx = canvas.getContext("2d");
  const res = 110;
  const grid = lab.boundary(res);
  const cell = canvas.width / res;
  for (let iy = 0; iy < res; iy++) {
    for (let ix = 0; ix < res; ix++) {
      ctx.fillStyle = REGION_COLORS[grid[iy * res + ix] % REGION_COLORS.length];
      ctx.fillRect(ix * cell, iy * cell, cell + 1, cell + 1);
    }
  }
  const ext = points.extent;
  const px = (x) => ((x + ext) / (2 * ext)) * canvas.width;
  const py = (y) => ((ext - y) / (2 * ext)) * canvas.height;
  for (const [x, y, label] of points.train) {
    ctx.fillStyle = CLASS_COLORS[label % CLASS_COLORS.length];
    ctx.beginPath();
    ctx.arc(px(x), py(y), 2.2, 0, Math.PI * 2);
    ctx.fill();
  }
  ctx.strokeStyle = "#0d1116";
  for (const [x, y, label] of points.test) {
    ctx.fillStyle = CLASS_COLORS[label % CLASS_COLORS.length];
    ctx.beginPath();
    ctx.rect(px(x) - 2.5, py(y) - 2.5, 5, 5);
    ctx.fill();
    ctx.stroke();
  }
}

function drawCurves() {
  const canvas = el("curves");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const o = options();
  const total = o.strategy === "normal" ? o.epochs : o.generations * o.epochs;
  const X = (e) => (e / Math.max(total - 1, 1)) * (canvas.width - 10) + 5;
  const Y = (a) => (1 - a) * (canvas.height - 14) + 7;

  // ascent windows
  ctx.fillStyle = "rgba(249,112,102,0.13)";
  for (let e = 0; e < total; e++) {
    if (e % o.epochs < o.ascent_epochs && o.strategy.startsWith("seal")) {
      ctx.fillRect(X(e) - 1, 0, X(e + 1) - X(e) + 1, canvas.height);
    }
  }
  // generation boundaries
  ctx.strokeStyle = "#2a3441";
  for (let g = 1; g * o.epochs < total; g++) {
    ctx.beginPath();
    ctx.moveTo(X(g * o.epochs), 0);
    ctx.lineTo(X(g * o.epochs), canvas.height);
    ctx.stroke();
  }
  const series = [
    ["train_acc", "#fbbf24"],
    ["test_acc", "#53b1fd"],
  ];
  for (const [key, color] of series) {
    ctx.strokeStyle = color;
    ctx.lineWidth = 1.6;
    ctx.beginPath();
    records.forEach((r, i) => {
      const x = X(r.epoch), y = Y(r[key]);
      if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
  // learning-rate trace
  const lrc = el("lrcanvas");
  const lctx = lrc.getContext("2d");
  lctx.clearRect(0, 0, lrc.width, lrc.height);
  lctx.strokeStyle = "#8294a8";
  lctx.beginPath();
  records.forEach((r, i) => {
    const x = (r.epoch / Math.max(total - 1, 1)) * (lrc.width - 10) + 5;
    const y = (1 - r.lr / o.lr) * (lrc.height - 8) + 4;
    if (i === 0) lctx.moveTo(x, y); else lctx.lineTo(x, y);
  });
  lctx.stroke();
}

function stepOnce() {
  if (!lab) return false;
  const out = JSON.parse(lab.step());
  if (!out.record) return false;
  records.push(out.record);
  const r = out.record;
  readout.textContent =
    `gen ${r.generation + 1} epoch ${r.epoch_in_gen + 1} [${r.phase}] ` +
    `lr ${r.lr.toExponential(2)} train ${(r.train_acc * 100).toFixed(1)}% ` +
    `test ${(r.test_acc * 100).toFixed(1)}%`;
  return true;
}

function loop() {
  if (!running) return;
  const alive = stepOnce();
  drawBoundary();
  drawCurves();
  if (!alive) {
    running = false;
    el("run").textContent = "run";
    readout.textContent += " — done";
    return;
  }
  requestAnimationFrame(loop);
}

function bars(canvasId, values, color, labels) {
  const canvas = el(canvasId);
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const max = Math.max(...values, 1e-12);
  const w = canvas.width / values.length;
  values.forEach((v, i) => {
    const h = (v / max) * (canvas.height - 18);
    ctx.fillStyle = color;
    ctx.fillRect(i * w + 1, canvas.height - 14 - h, w - 2, h);
    if (labels && labels[i] !== undefined) {
      ctx.fillStyle = "#8294a8";
      ctx.font = "10px system-ui";
      ctx.textAlign = "center";
      ctx.fillText(labels[i], i * w + w / 2, canvas.height - 3);
    }
  });
}

function runProbe() {
  if (!lab) return;
  readout.textContent = "probing…";
  setTimeout(() => {
    const p = JSON.parse(lab.probe());
    bars(
      "depth",
      p.depth_histogram,
      "#4ade80",
      p.depth_histogram.map((_, i) => (i < p.layer_names.length ? `d=${i + 1}` : "never"))
    );
    const accs = p.layer_names
      .map((n, i) => `${n} ${(p.layer_accuracy[i] * 100).toFixed(1)}%`)
      .join("   ");
    el("probe-out").textContent =
      `mean prediction depth ${p.mean_depth.toFixed(3)} over ${p.queries} queries (K=${p.k})\n` + accs;
    readout.textContent = "probe done";
  }, 20);
}

function runSpectrum() {
  if (!lab) return;
  readout.textContent = "computing dense Hessian…";
  setTimeout(() => {
    const s = JSON.parse(lab.spectrum(96));
    // log-magnitude bars over the sorted spectrum, negative part in red
    const vals = s.eigenvalues.map((v) => Math.log10(Math.abs(v) + 1e-12) + 12);
    const canvas = el("spec");
    const ctx = canvas.getContext("2d");
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    const max = Math.max(...vals);
    const w = canvas.width / vals.length;
    s.eigenvalues.forEach((v, i) => {
      const h = (vals[i] / max) * (canvas.height - 6);
      ctx.fillStyle = v < -s.tau ? "#f97066" : "#53b1fd";
      ctx.fillRect(i * w, canvas.height - h, Math.max(w - 0.4, 0.6), h);
    });
    el("spec-out").textContent =
      `max eigenvalue ${s.max_eigenvalue.toPrecision(5)}   ` +
      `negative fraction ${(s.fraction_negative * 100).toFixed(2)}%   ` +
      `(${s.param_count} parameters, tau=${s.tau.toExponential(2)})`;
    readout.textContent = "spectrum done";
  }, 20);
}

init().then(() => {
  reset();
  el("reset").onclick = reset;
  el("run").onclick = () => {
    if (!lab) return;
    running = !running;
    el("run").textContent = running ? "pause" : "run";
    if (running) loop();
  };
  el("step").onclick = () => {
    if (running || !lab) return;
    stepOnce();
    drawBoundary();
    drawCurves();
  };
  el("probe").onclick = runProbe;
  el("spectrum").onclick = runSpectrum;
  for (const id of ["dataset", "strategy", "generations", "epochs", "ascent", "threshold", "lr", "scale", "seed"]) {
    el(id).onchange = reset;
  }
});
