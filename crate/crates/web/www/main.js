import init, { rate_curves, walk_samples, distortion_example } from "./pkg/dlmlab_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = { "-1": "#1b7837", "0": "#2166ac", "1": "#b2182b" };

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.innerHTML = `<span class="bad">${e.message ?? e}</span>`;
  }
}

function plotRates(svg, data) {
  const w = +svg.getAttribute("width"), h = +svg.getAttribute("height"), pad = 40;
  const lx = data.sigma_grid.map(Math.log10);
  const ly = data.rows.flatMap((r) => r.scores.filter((s) => s > 0).map(Math.log10));
  const [x0, x1] = [Math.min(...lx), Math.max(...lx)];
  const [y0, y1] = [Math.min(...ly), Math.max(...ly)];
  const sx = (v) => pad + ((v - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (v) => h - pad - ((v - y0) / (y1 - y0 || 1)) * (h - 2 * pad);
  let body = `<text x="${w / 2}" y="${h - 8}" text-anchor="middle">log10 noise level</text>`;
  body += `<text x="12" y="${h / 2}" transform="rotate(-90 12 ${h / 2})" text-anchor="middle">log10 score</text>`;
  for (const r of data.rows) {
    const pts = r.scores
      .map((s, i) => (s > 0 ? `${sx(lx[i])},${sy(Math.log10(s))}` : null))
      .filter(Boolean)
      .join(" ");
    body += `<polyline fill="none" stroke="${COLORS[r.delta_d] ?? "#555"}" points="${pts}"/>`;
  }
  svg.innerHTML = body;
}

function runRates() {
  const table = $("rate-table");
  guard(table, () => {
    const grid = new Float64Array($("rate-grid").value.split(",").map(Number));
    const data = JSON.parse(rate_curves($("rate-instance").value, $("rate-mech").value, grid));
    plotRates($("rate-plot"), data);
    const rows = data.rows
      .map((r) => {
        const slope = r.fitted_exponent === null ? "zero" : r.fitted_exponent.toFixed(3);
        const cls = r.passed ? "" : ' class="bad"';
        return `<tr${cls}><td>${r.state}</td><td>${r.h}</td><td>${r.y}</td><td>${r.delta_d}</td><td>${slope}</td></tr>`;
      })
      .join("");
    table.innerHTML = `<table><tr><th>state</th><th>position</th><th>token</th><th>distance change</th><th>fitted slope</th></tr>${rows}</table>`;
  });
}

function runWalk() {
  const out = $("walk-out");
  guard(out, () => {
    const data = JSON.parse(
      walk_samples(+$("walk-k").value, +$("walk-h").value, +$("walk-n").value, BigInt($("walk-seed").value))
    );
    out.textContent = data.map((s) => `${s.sequence.join(" ")}    p = ${s.prob.toExponential(3)}`).join("\n");
  });
}

function runB1() {
  const out = $("b1-out");
  guard(out, () => {
    const d = JSON.parse(distortion_example(+$("b1-sigma").value, +$("b1-alpha").value));
    out.textContent = [
      `distortion   ${d.distortion.toFixed(6)}`,
      `TV           ${d.tv.toFixed(6)}`,
      `KL(p||q)     ${d.kl_pq.toFixed(6)}`,
      `KL(q||p)     ${d.kl_qp.toFixed(6)}`,
    ].join("\n");
  });
}

await init();
$("rate-run").onclick = runRates;
$("walk-run").onclick = runWalk;
$("b1-run").onclick = runB1;
runRates();
runWalk();
runB1();
