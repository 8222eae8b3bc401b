// Expects the wasm-bindgen output (target "web") in ./pkg.
import init, { limit_matrix, simulate, clt_histogram } from "./pkg/arxtrack_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

function modelJson() {
  return $("model").value;
}

function fmtMatrix(rows) {
  return rows.map((r) => r.map((v) => v.toFixed(6).padStart(12)).join(" ")).join("\n");
}

function showError(el, e) {
  el.innerHTML = "";
  const span = document.createElement("span");
  span.className = "err";
  span.textContent = String(e);
  el.appendChild(span);
}

function plotLines(canvas, series, { logY = false, title = "" } = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const pad = 36;
  const tr = (v) => (logY ? Math.log10(Math.max(v, 1e-12)) : v);
  let lo = Infinity, hi = -Infinity, n = 0;
  for (const s of series) {
    n = Math.max(n, s.values.length);
    for (const v of s.values) {
      const t = tr(v);
      if (Number.isFinite(t)) { lo = Math.min(lo, t); hi = Math.max(hi, t); }
    }
  }
  if (!(hi > lo)) { hi = lo + 1; }
  const x = (i) => pad + (i / Math.max(n - 1, 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((tr(v) - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.font = "12px system-ui";
  ctx.fillText(title, pad, pad - 8);
  ctx.fillText((logY ? "1e" : "") + hi.toFixed(2), 2, pad + 4);
  ctx.fillText((logY ? "1e" : "") + lo.toFixed(2), 2, h - pad);
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color || COLORS[k % COLORS.length];
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(s.label, w - pad - 120, pad + 16 + 14 * k);
  });
}

function plotHistogram(canvas, hist) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const pad = 36;
  const top = Math.max(...hist.counts, ...hist.expected, 1);
  const lo = hist.edges[0], hi = hist.edges[hist.edges.length - 1];
  const x = (v) => pad + ((v - lo) / (hi - lo)) * (w - 2 * pad);
  const y = (c) => h - pad - (c / top) * (h - 2 * pad);
  ctx.fillStyle = "#9ecae1";
  hist.counts.forEach((c, i) => {
    ctx.fillRect(x(hist.edges[i]) + 1, y(c), x(hist.edges[i + 1]) - x(hist.edges[i]) - 2, h - pad - y(c));
  });
  ctx.strokeStyle = "#d62728";
  ctx.beginPath();
  hist.expected.forEach((e, i) => {
    const xm = (x(hist.edges[i]) + x(hist.edges[i + 1])) / 2;
    i ? ctx.lineTo(xm, y(e)) : ctx.moveTo(xm, y(e));
  });
  ctx.stroke();
  ctx.fillStyle = "#333";
  ctx.font = "12px system-ui";
  ctx.fillText(lo.toString(), pad - 6, h - pad + 14);
  ctx.fillText(hi.toString(), w - pad - 6, h - pad + 14);
  ctx.fillText(`${hist.coordinate}: bars = sample, line = N(0,1)`, pad, pad - 8);
}

async function main() {
  await init();

  $("limit-run").onclick = () => {
    try {
      const r = JSON.parse(limit_matrix(modelJson()));
      $("limit-out").textContent =
        `Lambda =\n${fmtMatrix(r.matrices.lambda)}\n\nS =\n${fmtMatrix(r.matrices.s)}\n\n` +
        `det Lambda = ${r.det_lambda.toFixed(6)}\n` +
        `spectral radius of the B companion = ${r.spectral_radius.toFixed(4)}, truncation order ${r.truncation_order}\n` +
        `series cross-check: discrepancy ${r.cross_check.max_discrepancy.toExponential(2)} ` +
        `(tol ${r.cross_check.tol.toExponential(2)}) ${r.cross_check.pass ? "ok" : "FAILED"}`;
    } catch (e) {
      showError($("limit-out"), e);
    }
  };

  $("sim-run").onclick = () => {
    try {
      const r = JSON.parse(simulate(modelJson(), +$("sim-n").value, +$("sim-seed").value,
        $("sim-exc").checked, $("sim-wls").checked));
      plotLines($("sim-x"), r.x.map((v, i) => ({ label: `X_${i + 1}`, values: v })), { title: "state" });
      plotLines($("sim-err"), [
        { label: "|theta_hat - theta|^2", values: r.theta_error },
        { label: "tr(C_n - Delta_n)", values: r.cost_gap.map(Math.abs) },
      ], { logY: true, title: "estimation error and excess cost (log scale)" });
      const last = r.theta_error[r.theta_error.length - 1];
      $("sim-note").textContent = `final squared estimation error ${last.toExponential(3)}`;
    } catch (e) {
      showError($("sim-note"), e);
    }
  };

  $("clt-run").onclick = () => {
    $("clt-note").textContent = "running...";
    setTimeout(() => {
      try {
        const r = JSON.parse(clt_histogram(modelJson(), +$("clt-m").value, +$("clt-n").value, 2026,
          +$("clt-c").value, +$("clt-b").value, $("clt-wls").checked));
        plotHistogram($("clt"), r);
        $("clt-note").textContent =
          `mean ${r.mean.toFixed(3)}, variance ${r.variance.toFixed(3)}, KS ${r.ks.toFixed(3)}` +
          (r.failed_runs ? `, ${r.failed_runs} runs failed` : "");
      } catch (e) {
        showError($("clt-note"), e);
      }
    }, 10);
  };

  $("limit-run").click();
  $("sim-run").click();
}

main();
