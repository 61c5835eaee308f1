// Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`.
import init, { stainPatch, fusedDensities, emaCurve } from "./pkg/fusion_demo.js";

const CENTERS = 5;
const PATCH = 32;
const BINS = 80;
const RANGE = [-5, 5];

const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);

function bindOutput(id, digits) {
  const show = () => { $(`${id}-v`).textContent = num(id).toFixed(digits); };
  show();
  $(id).addEventListener("input", show);
}

function guarded(fn) {
  return () => {
    try {
      fn();
      $("status").textContent = "";
    } catch (e) {
      $("status").textContent = String(e);
      $("status").className = "err";
    }
  };
}

function drawPatches() {
  const root = $("patches");
  root.replaceChildren();
  const shift = num("shift");
  const seed = Math.max(0, Math.floor(num("patch-seed")));
  for (let c = 0; c < CENTERS; c++) {
    const canvas = document.createElement("canvas");
    canvas.width = PATCH;
    canvas.height = PATCH;
    canvas.title = `center ${c}`;
    const rgba = stainPatch(c, c === 0 ? 0 : shift, seed, PATCH);
    canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), PATCH, PATCH), 0, 0);
    root.appendChild(canvas);
  }
}

function plot(canvas, series, xRange, colors) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const yMax = Math.max(1e-9, ...series.flat()) * 1.05;
  const pad = 30;
  ctx.strokeStyle = "#ccc";
  ctx.beginPath();
  ctx.moveTo(pad, h - pad);
  ctx.lineTo(w - 5, h - pad);
  ctx.moveTo(pad, 5);
  ctx.lineTo(pad, h - pad);
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.fillText(String(xRange[0]), pad, h - 10);
  ctx.fillText(String(xRange[1]), w - 30, h - 10);
  ctx.fillText(yMax.toFixed(2), 2, 12);
  series.forEach((ys, k) => {
    ctx.strokeStyle = colors[k];
    ctx.lineWidth = 2;
    ctx.beginPath();
    ys.forEach((y, i) => {
      const px = pad + ((w - pad - 5) * (i + 0.5)) / ys.length;
      const py = h - pad - ((h - pad - 5) * y) / yMax;
      if (i === 0) ctx.moveTo(px, py); else ctx.lineTo(px, py);
    });
    ctx.stroke();
  });
}

function drawDensities() {
  const d = fusedDensities(num("beta"), num("tmean"), num("tstd"), BINS, 7);
  const runs = [0, 1, 2].map((k) => Array.from(d.slice(k * BINS, (k + 1) * BINS)));
  plot($("density"), runs, RANGE, ["#1f77b4", "#d62728", "#2ca02c"]);
}

function drawEma() {
  const steps = num("steps");
  const c = emaCurve(num("mom"), steps, num("bs"), 2.0, 3);
  const observed = Array.from(c.slice(0, steps));
  const bound = Array.from(c.slice(steps));
  plot($("ema"), [bound, observed], [1, steps], ["#999", "#1f77b4"]);
}

await init();
for (const [id, digits] of [["shift", 1], ["beta", 2], ["tmean", 1], ["tstd", 1], ["mom", 2], ["steps", 0], ["bs", 0]]) {
  bindOutput(id, digits);
}
const patches = guarded(drawPatches);
const densities = guarded(drawDensities);
const ema = guarded(drawEma);
for (const id of ["shift", "patch-seed"]) $(id).addEventListener("input", patches);
for (const id of ["beta", "tmean", "tstd"]) $(id).addEventListener("input", densities);
for (const id of ["mom", "steps", "bs"]) $(id).addEventListener("input", ema);
patches();
densities();
ema();
