import init, { groupBatch, loadTimelines, policyHits, randomSizes } from "./pkg/call_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

function call(fn, params, out) {
  try {
    return JSON.parse(fn(JSON.stringify(params)));
  } catch (e) {
    out.innerHTML = `<span class="err">${e.message ?? e}</span>`;
    return null;
  }
}

function drawGrouping() {
  $("g-theta-v").textContent = $("g-theta").value;
  const out = $("g-out");
  const v = call(groupBatch, {
    queries: num("g-queries"), clusters: num("g-clusters"), nprobe: num("g-nprobe"),
    repeat_prob: num("g-repeat"), theta: num("g-theta"), seed: num("g-seed"),
  }, out);
  if (!v) return;
  const n = v.sets.length;
  const order = $("g-exec").checked ? v.order : [...Array(n).keys()];
  const groupOf = new Map();
  v.groups.forEach((g, i) => g.members.forEach((q) => groupOf.set(q, i)));

  const c = $("g-canvas"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const cell = c.width / n;
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const s = v.matrix[order[i]][order[j]];
      const shade = Math.round(255 * (1 - s));
      ctx.fillStyle = `rgb(${shade},${shade},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
  if ($("g-exec").checked) {
    ctx.strokeStyle = "#d62728";
    ctx.lineWidth = 2;
    let start = 0;
    for (const g of v.groups) {
      ctx.strokeRect(start * cell, start * cell, g.members.length * cell, g.members.length * cell);
      start += g.members.length;
    }
  }
  const lines = [
    `${v.groups.length} groups from ${n} queries`,
    `mean J of adjacent queries: ${v.mean_adjacent_arrival.toFixed(3)} arrival, ${v.mean_adjacent_execution.toFixed(3)} grouped`,
    "",
    ...v.groups.map((g) => `group ${g.group_id}: [${g.members.join(", ")}]  ${g.union_clusters.length} clusters`
      + (g.prefetch.length ? `  prefetch ${g.prefetch.length}` : "")),
  ];
  out.textContent = lines.join("\n");
}

function drawTimeline(ctx, tl, top, height, scale, label) {
  const rows = tl.workers.length;
  const h = (height - 20) / rows;
  ctx.fillStyle = "#222";
  ctx.fillText(`${label}: makespan ${tl.makespan_ms.toFixed(1)} ms`, 4, top + 12);
  tl.workers.forEach((tasks, w) => {
    const y = top + 18 + w * h;
    for (const t of tasks) {
      ctx.fillStyle = COLORS[t.cluster % COLORS.length];
      ctx.fillRect(60 + t.start_ms * scale, y, (t.end_ms - t.start_ms) * scale - 1, h - 2);
    }
    ctx.fillStyle = "#555";
    ctx.fillText(`w${w}`, 4, y + h / 2 + 4);
  });
  ctx.strokeStyle = "#d62728";
  ctx.beginPath();
  ctx.moveTo(60 + tl.makespan_ms * scale, top + 16);
  ctx.lineTo(60 + tl.makespan_ms * scale, top + height);
  ctx.stroke();
}

function drawLoads() {
  const out = $("l-out");
  const sizes = $("l-sizes").value.split(/[\s,]+/).filter((s) => s.length).map(Number);
  const v = call(loadTimelines, {
    sizes_mb: sizes, threads: num("l-threads"), throughput_mb: num("l-tput"), overhead_ms: num("l-over"),
  }, out);
  if (!v) return;
  const c = $("l-canvas"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.font = "12px system-ui";
  const longest = Math.max(v.greedy.makespan_ms, v.round_robin.makespan_ms, 1e-9);
  const scale = (c.width - 80) / longest;
  drawTimeline(ctx, v.greedy, 0, c.height / 2, scale, "greedy");
  drawTimeline(ctx, v.round_robin, c.height / 2, c.height / 2, scale, "round-robin");
  const gain = 1 - v.greedy.makespan_ms / v.round_robin.makespan_ms;
  out.textContent = `greedy ${v.greedy.makespan_ms.toFixed(1)} ms, round-robin ${v.round_robin.makespan_ms.toFixed(1)} ms`
    + (isFinite(gain) ? ` (${(gain * 100).toFixed(1)}% shorter)` : "");
}

function randomize() {
  $("l-sizes").value = Array.from(randomSizes(num("l-count"), Math.floor(Math.random() * 1e9))).join(", ");
  drawLoads();
}

function drawPolicies() {
  const out = $("p-out");
  out.textContent = "running...";
  const series = call(policyHits, {
    queries: num("p-queries"), capacity: num("p-capacity"), nprobe: num("p-nprobe"),
    repeat_prob: num("p-repeat"), horizon: num("p-horizon"), window_length: num("p-window"),
    window_top_n: num("p-top"), seed: num("p-seed"),
  }, out);
  if (!series) return;
  const c = $("p-canvas"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.font = "12px system-ui";
  const left = 40, bottom = c.height - 20, w = c.width - left - 10, h = bottom - 10;
  const n = num("p-queries");
  ctx.strokeStyle = "#ccc";
  for (let y = 0; y <= 1.0001; y += 0.25) {
    const py = bottom - y * h;
    ctx.beginPath(); ctx.moveTo(left, py); ctx.lineTo(left + w, py); ctx.stroke();
    ctx.fillStyle = "#555"; ctx.fillText(y.toFixed(2), 4, py + 4);
  }
  series.forEach((s, k) => {
    ctx.strokeStyle = COLORS[k];
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.cumulative.forEach(([i, r], idx) => {
      const x = left + (i / n) * w, y = bottom - r * h;
      idx ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = COLORS[k];
    ctx.fillText(s.policy, left + 10 + k * 70, bottom + 15);
  });
  out.textContent = series.map((s) => `${s.policy.padEnd(5)} ${(s.hit_ratio * 100).toFixed(1)}%`).join("\n");
}

await init();
for (const id of ["g-queries", "g-clusters", "g-nprobe", "g-repeat", "g-theta", "g-seed", "g-exec"]) {
  $(id).addEventListener("input", drawGrouping);
}
for (const id of ["l-sizes", "l-threads", "l-tput", "l-over"]) {
  $(id).addEventListener("input", drawLoads);
}
$("l-random").addEventListener("click", randomize);
$("p-run").addEventListener("click", drawPolicies);
$("l-sizes").value = Array.from(randomSizes(20, 1)).join(", ");
drawGrouping();
drawLoads();
drawPolicies();
