import init, { solve_field, upsample_field, compare_estimators } from "./pkg/zo_meshopt_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function colour(t) {
  // blue -> white -> red
  const c = Math.max(0, Math.min(1, t));
  const r = c < 0.5 ? 2 * c : 1;
  const b = c < 0.5 ? 1 : 2 * (1 - c);
  const g = 1 - Math.abs(2 * c - 1);
  return `rgb(${Math.round(255 * r)},${Math.round(255 * (0.35 + 0.65 * g))},${Math.round(255 * b)})`;
}

// Each node is drawn as the cell of points closer to it than to its neighbours.
function drawField(canvas, field, { lines = true, vmax = null } = {}) {
  const ctx = canvas.getContext("2d");
  const xs = field.x_lines, ys = field.y_lines, v = field.values;
  const w = canvas.width, h = canvas.height;
  const top = vmax ?? Math.max(...v, 1e-12);
  const mid = (a, i) => (i <= 0 ? 0 : i >= a.length ? 1 : 0.5 * (a[i - 1] + a[i]));
  ctx.clearRect(0, 0, w, h);
  for (let j = 0; j < ys.length; j++) {
    for (let i = 0; i < xs.length; i++) {
      const x0 = mid(xs, i), x1 = mid(xs, i + 1);
      const y0 = mid(ys, j), y1 = mid(ys, j + 1);
      ctx.fillStyle = colour(0.5 + 0.5 * v[j * xs.length + i] / top);
      ctx.fillRect(x0 * w, (1 - y1) * h, (x1 - x0) * w + 1, (y1 - y0) * h + 1);
    }
  }
  if (lines) {
    ctx.strokeStyle = "rgba(0,0,0,0.35)";
    ctx.beginPath();
    for (const x of xs) { ctx.moveTo(x * w, 0); ctx.lineTo(x * w, h); }
    for (const y of ys) { ctx.moveTo(0, (1 - y) * h); ctx.lineTo(w, (1 - y) * h); }
    ctx.stroke();
  }
  return top;
}

function drawBars(canvas, series) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  const n = series[0].values.length;
  const top = Math.max(...series.flatMap((s) => s.values.map(Math.abs)), 1e-12);
  const slot = w / n, bar = slot / (series.length + 1);
  ctx.strokeStyle = "#888";
  ctx.beginPath(); ctx.moveTo(0, h / 2); ctx.lineTo(w, h / 2); ctx.stroke();
  series.forEach((s, k) => {
    ctx.fillStyle = s.colour;
    s.values.forEach((g, i) => {
      const len = (g / top) * (h / 2 - 4);
      ctx.fillRect(i * slot + (k + 0.5) * bar, h / 2 - Math.max(len, 0), bar - 1, Math.abs(len));
    });
  });
  series.forEach((s, k) => {
    ctx.fillStyle = s.colour;
    ctx.fillRect(8, 8 + 14 * k, 10, 10);
    ctx.fillStyle = "#222";
    ctx.fillText(s.name, 22, 17 + 14 * k);
  });
}

function guarded(fn) {
  return () => {
    try {
      $("status").textContent = "";
      fn();
    } catch (e) {
      $("status").textContent = String(e.message ?? e);
    }
  };
}

const runSolve = guarded(() => {
  const f = solve_field(num("solve-n"), num("solve-g"), num("solve-a"));
  drawField($("solve-canvas"), f);
});

const runUpsample = guarded(() => {
  const n = num("up-n"), g = num("up-g"), fine = num("up-f");
  const coarse = solve_field(n, g, 1.0);
  const top = drawField($("up-coarse"), coarse);
  drawField($("up-fine"), upsample_field(n, g, fine, 1.0), { lines: fine <= 33, vmax: top });
});

const runEstimate = guarded(() => {
  const c = compare_estimators(num("est-n"), num("est-g"), 0.9, num("est-b"), num("est-d"), BigInt(num("est-s")));
  const names = ["coordinate", "gaussian", "gauss_coord"];
  const colours = ["#d95f02", "#1b9e77", "#7570b3"];
  drawBars($("est-canvas"), [
    { name: "reference", colour: "#333", values: Array.from(c.exact) },
    ...names.map((name, k) => ({ name, colour: colours[k], values: Array.from(c.estimate(k)) })),
  ]);
  $("est-table").innerHTML =
    "<tr><th>estimator</th><th>solves</th><th>cosine to reference</th></tr>" +
    names.map((name, k) => `<tr><td>${name}</td><td>${c.solves(k)}</td><td>${c.cosine(k).toFixed(4)}</td></tr>`).join("");
});

await init();
$("solve-run").onclick = runSolve;
$("up-run").onclick = runUpsample;
$("est-run").onclick = runEstimate;
$("solve-g").oninput = runSolve;
$("up-g").oninput = runUpsample;
runSolve();
runUpsample();
runEstimate();
