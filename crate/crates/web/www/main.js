import init, { steadyState, quantizationError, simulate } from "./pkg/microgrid_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c"];

function call(fn, ...args) {
  try {
    return { value: JSON.parse(fn(...args)) };
  } catch (e) {
    return { error: String(e) };
  }
}

function showError(el, msg) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "error";
  p.textContent = msg;
  el.appendChild(p);
}

function updateSteady() {
  const ratio = Number($("ss-ratio").value);
  $("ss-ratio-out").textContent = ratio;
  const loads = Uint8Array.from(document.querySelectorAll(".ss-load"), (c) => (c.checked ? 1 : 0));
  const r = call(steadyState, ratio, loads);
  const out = $("ss-result");
  if (r.error) return showError(out, r.error);
  const v = r.value;
  const rows = v.ibrs
    .map((o, i) => `<tr><td>${i + 1}</td><td>${o.p_w.toFixed(1)}</td><td>${o.q_var.toFixed(1)}</td>` +
      `<td>${o.v_v.toFixed(2)}</td><td>${o.delta_rad.toFixed(5)}</td></tr>`)
    .join("");
  out.innerHTML =
    `<p>frequency <output>${v.frequency_hz.toFixed(4)} Hz</output>, load <output>${v.load_w.toFixed(1)} W</output>, ` +
    `losses <output>${v.losses_w.toFixed(1)} W</output></p>` +
    `<table><tr><th>inverter</th><th>P (W)</th><th>Q (var)</th><th>|v| (V)</th><th>&delta; (rad)</th></tr>${rows}</table>`;
}

function drawHexagon(canvas, vectors, vdc, eps) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const scale = (0.42 * w) / ((2 / 3) * vdc);
  const px = ([d, q]) => [w / 2 + d * scale, h / 2 - q * scale];
  const outer = vectors.filter(([d, q]) => Math.hypot(d, q) > 1e-9).sort((a, b) => Math.atan2(a[1], a[0]) - Math.atan2(b[1], b[0]));
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  outer.forEach((p, i) => (i ? ctx.lineTo(...px(p)) : ctx.moveTo(...px(p))));
  ctx.closePath();
  ctx.stroke();
  ctx.fillStyle = "rgba(31,119,180,0.12)";
  for (const p of vectors) {
    ctx.beginPath();
    ctx.arc(...px(p), eps * scale, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.fillStyle = "#1f77b4";
  for (const p of vectors) {
    ctx.beginPath();
    ctx.arc(...px(p), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function runQuantization() {
  const vdc = Number($("q-vdc").value);
  const r = call(quantizationError, vdc, Number($("q-res").value));
  const out = $("q-result");
  if (r.error) return showError(out, r.error);
  const v = r.value;
  out.innerHTML =
    `<p>&epsilon; = <output>${v.epsilon_v.toFixed(3)} V</output>, hexagon circumradius over &radic;3 = ` +
    `<output>${v.analytic_v.toFixed(3)} V</output> (${v.vectors.length} distinct vectors). ` +
    `Shaded discs have radius &epsilon; and cover the hexagon.</p>`;
  drawHexagon($("q-canvas"), v.vectors, vdc, v.epsilon_v);
}

function plot(canvas, t, series, label) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = { l: 70, r: 10, t: 20, b: 25 };
  ctx.clearRect(0, 0, w, h);
  const skip = Math.min(Math.floor(t.length / 10), 100);
  const ys = series.flatMap((s) => s.slice(skip));
  let lo = Math.min(...ys);
  let hi = Math.max(...ys);
  if (hi - lo < 1e-9) { lo -= 1; hi += 1; }
  const x = (v) => pad.l + ((v - t[0]) / (t[t.length - 1] - t[0])) * (w - pad.l - pad.r);
  const y = (v) => h - pad.b - ((v - lo) / (hi - lo)) * (h - pad.t - pad.b);
  ctx.fillStyle = "#333";
  ctx.font = "12px system-ui";
  ctx.fillText(label, pad.l, 14);
  ctx.fillText(hi.toPrecision(6), 2, pad.t + 4);
  ctx.fillText(lo.toPrecision(6), 2, h - pad.b);
  ctx.fillText(`${t[t.length - 1].toFixed(2)} s`, w - 50, h - 6);
  series.forEach((s, i) => {
    ctx.strokeStyle = COLORS[i % COLORS.length];
    ctx.beginPath();
    for (let k = skip; k < s.length; k++) {
      const args = [x(t[k]), y(Math.min(hi, Math.max(lo, s[k])))];
      k === skip ? ctx.moveTo(...args) : ctx.lineTo(...args);
    }
    ctx.stroke();
  });
}

function runSimulation() {
  const status = $("sim-status");
  status.textContent = "running...";
  // let the status paint before the blocking call
  setTimeout(() => {
    const start = performance.now();
    const r = call(simulate, Number($("sim-duration").value), Number($("sim-ratio").value), $("sim-step").checked);
    if (r.error) {
      status.textContent = r.error;
      status.className = "error";
      return;
    }
    status.className = "";
    status.textContent = `${r.value.time_s.length} samples in ${((performance.now() - start) / 1000).toFixed(2)} s`;
    plot($("sim-p"), r.value.time_s, r.value.p_w, "P (W), inverters 1-3");
    plot($("sim-f"), r.value.time_s, r.value.f_hz, "frequency (Hz)");
  }, 20);
}

await init();
$("ss-ratio").addEventListener("input", updateSteady);
document.querySelectorAll(".ss-load").forEach((c) => c.addEventListener("change", updateSteady));
$("q-run").addEventListener("click", runQuantization);
$("sim-run").addEventListener("click", runSimulation);
updateSteady();
runQuantization();
