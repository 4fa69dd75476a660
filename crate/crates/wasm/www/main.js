import init, { default_scenarios, tokenize, explore_grid, ensemble_trace } from "../pkg/abe_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function el(tag, attrs = {}, ...children) {
  const node = document.createElement(tag);
  Object.assign(node, attrs);
  node.append(...children);
  return node;
}

function run(render, call) {
  $("error").textContent = "";
  try {
    render(JSON.parse(call()));
  } catch (e) {
    $("error").textContent = String(e);
  }
}

function showTokens(result) {
  const out = $("tokens");
  out.replaceChildren();
  for (const t of result) {
    const line = el("p", {}, el("b", {}, `${t.model}: `));
    for (const p of t.pieces) line.append(el("span", { className: "piece", title: `id ${p.id}` }, p.surface));
    out.append(line);
  }
}

function showGrid(view) {
  const order = new Map();
  view.pops.forEach((p, i) => order.set(`${p.row},${p.col}`, [i + 1, p]));
  const table = el("table");
  const head = el("tr", {}, el("th", {}, "A \\ B"));
  for (const [s] of view.cols) head.append(el("th", {}, s));
  table.append(head);
  view.rows.forEach(([s], r) => {
    const tr = el("tr", {}, el("th", {}, s));
    view.cols.forEach((_, c) => {
      const hit = order.get(`${r},${c}`);
      const td = el("td");
      if (hit) {
        td.textContent = `#${hit[0]} ${hit[1].score.toFixed(3)}`;
        td.className = hit[1].agrees ? "agree" : "reject";
      }
      tr.append(td);
    });
    table.append(tr);
  });
  $("grid").replaceChildren(el("p", {}, `${view.pops.length} pops, stopped: ${view.stop}`), table);
}

function showTrace(trace) {
  const out = $("trace");
  out.replaceChildren();
  for (const step of trace.steps) {
    const lines = step.beam.map((item) => {
      const models = item.models
        .map((m, i) => `${"AB"[i]}${m.stalled ? " (stalled)" : ""}: ${m.tokens.join(" ")}`)
        .join("\n   ");
      return `${JSON.stringify(item.global)} ${item.score.toFixed(4)}\n   ${models}`;
    });
    out.append(el("h4", {}, `step ${step.t} (${step.pops} pops)`), el("pre", {}, lines.join("\n") || "(beam empty)"));
  }
  const results = trace.outputs.map(
    (o) => `${JSON.stringify(o.text)} ${o.score.toFixed(4)}${o.fallback ? " (fallback)" : ""}`,
  );
  out.append(el("h4", {}, "output"), el("pre", {}, results.join("\n")));
}

await init();
const [a, b] = default_scenarios();
$("model-a").value = a;
$("model-b").value = b;

$("run-tokenize").onclick = () =>
  run(showTokens, () => tokenize($("model-a").value, $("model-b").value, $("text").value));
$("run-grid").onclick = () =>
  run(showGrid, () => explore_grid($("model-a").value, $("model-b").value, num("weight"), num("k"), 200));
$("run-decode").onclick = () =>
  run(showTrace, () =>
    ensemble_trace($("model-a").value, $("model-b").value, num("weight"), num("beam"), num("max-len")),
  );
