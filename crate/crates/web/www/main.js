import init, { track_json, log_z_spread_json, twist_profile_json } from "./pkg/twisted_smc_web.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

const num = (id) => Number(document.getElementById(id).value);

function call(fn, ...args) {
  const out = JSON.parse(fn(...args));
  if (out.error) throw new Error(out.error);
  return out;
}

// Linear axes fitted to the given points, with a small margin.
function frame(canvas, xs, ys) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 40;
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 2 * pad);
  const sy = (y) => canvas.height - pad - ((y - y0) / (y1 - y0 || 1)) * (canvas.height - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, canvas.width - 2 * pad, canvas.height - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.fillText(x0.toPrecision(3), pad, canvas.height - pad + 14);
  ctx.fillText(x1.toPrecision(3), canvas.width - pad - 30, canvas.height - pad + 14);
  ctx.fillText(y0.toPrecision(3), 2, canvas.height - pad);
  ctx.fillText(y1.toPrecision(3), 2, pad + 4);
  return { ctx, sx, sy };
}

function line(f, pts, color, width = 1.5) {
  f.ctx.strokeStyle = color;
  f.ctx.lineWidth = width;
  f.ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? f.ctx.lineTo(f.sx(x), f.sy(y)) : f.ctx.moveTo(f.sx(x), f.sy(y))));
  f.ctx.stroke();
}

function dots(f, pts, color, r = 1.5) {
  f.ctx.fillStyle = color;
  for (const [x, y] of pts) {
    f.ctx.beginPath();
    f.ctx.arc(f.sx(x), f.sy(y), r, 0, 2 * Math.PI);
    f.ctx.fill();
  }
}

function legend(f, entries) {
  entries.forEach(([label, color], i) => {
    f.ctx.fillStyle = color;
    f.ctx.fillRect(60, 50 + 16 * i, 10, 10);
    f.ctx.fillStyle = "#222";
    f.ctx.fillText(label, 76, 59 + 16 * i);
  });
}

function runTrack() {
  const out = document.getElementById("tr-out");
  try {
    const r = call(track_json, num("tr-seed"), num("tr-t"), num("tr-q2"), num("tr-s1"), num("tr-s2"));
    const all = [...r.truth, ...r.estimate];
    const f = frame(document.getElementById("tr-canvas"), all.map((p) => p[0]), all.map((p) => p[1]));
    dots(f, r.measured.filter(([x, y]) => f.sx(x) > 0 && f.sy(y) > 0), "#bbb");
    line(f, r.truth, COLORS[0], 2);
    line(f, r.estimate, COLORS[1]);
    legend(f, [["true path", COLORS[0]], ["EKF estimate", COLORS[1]], ["measurements", "#bbb"]]);
    out.textContent = `RMSE ${r.rmse.toFixed(3)}, 95% consistency ${r.consistency.toFixed(3)}`;
  } catch (e) {
    out.textContent = e.message;
  }
}

function runSpread() {
  const out = document.getElementById("sp-out");
  out.textContent = "running...";
  setTimeout(() => {
    try {
      const rows = call(log_z_spread_json, num("sp-seed"), num("sp-t"), num("sp-reps"), num("sp-n"), num("sp-l"));
      const ns = [...new Set(rows.map((r) => r.n))];
      const xs = rows.map((r) => Math.log2(r.n) + (r.filter === "bspf" ? -0.08 : 0.08));
      const all = rows.flatMap((r) => r.log_z);
      const f = frame(document.getElementById("sp-canvas"), xs, all);
      rows.forEach((r, i) => dots(f, r.log_z.map((v) => [xs[i], v]), r.filter === "bspf" ? COLORS[0] : COLORS[1], 3));
      legend(f, [["standard (systematic)", COLORS[0]], ["twisted, mode (systematic)", COLORS[1]]]);
      out.textContent =
        "x axis: log2(particles)\n" +
        ns
          .map((n) => {
            const v = rows.filter((r) => r.n === n).map((r) => `${r.filter} var ${r.variance.toExponential(2)}`);
            return `n=${n}: ${v.join(", ")}`;
          })
          .join("\n");
    } catch (e) {
      out.textContent = e.message;
    }
  }, 10);
}

function runProfile() {
  const r = call(twist_profile_json, num("pr-seed"), num("pr-k"), num("pr-l"), num("pr-a"), num("pr-q"), num("pr-r"));
  const f = frame(document.getElementById("pr-canvas"), r.x, [0, 1]);
  r.curves.forEach((c, i) => line(f, r.x.map((x, j) => [x, c.phi[j]]), COLORS[i % COLORS.length]));
  legend(f, r.curves.map((c, i) => [`lookahead ${c.lookahead}`, COLORS[i % COLORS.length]]));
}

await init();
document.getElementById("tr-run").onclick = runTrack;
document.getElementById("sp-run").onclick = runSpread;
document.getElementById("pr-run").onclick = runProfile;
runTrack();
runProfile();
