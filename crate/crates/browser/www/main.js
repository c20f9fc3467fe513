// Expects the wasm-bindgen output in ./pkg (see the README).
import init, { lrSchedule, trainDemo, shapeSvg } from "./pkg/amn_browser.js";

const $ = (id) => document.getElementById(id);
let explanation = null;

function linePlot(values, width = 600, height = 160) {
  const max = Math.max(...values, 1e-12);
  const n = Math.max(values.length - 1, 1);
  const pts = values
    .map((v, i) => `${(i / n) * (width - 20) + 10},${height - 10 - (v / max) * (height - 20)}`)
    .join(" ");
  return `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}">
    <rect width="100%" height="100%" fill="#fff" stroke="#ccc"/>
    <polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="${pts}"/>
    <text x="12" y="20" font-size="11">max ${max.toPrecision(3)}</text></svg>`;
}

function showError(el, e) {
  el.innerHTML = `<pre class="err">${String(e.message ?? e)}</pre>`;
}

function plotSchedule() {
  try {
    const lr = lrSchedule(+$("lr-steps").value, +$("lr-init").value, +$("lr-warm").value);
    $("lr-plot").innerHTML = linePlot(Array.from(lr));
  } catch (e) {
    showError($("lr-plot"), e);
  }
}

function renderShape() {
  const i = +$("s-pick").value;
  try {
    $("s-plot").innerHTML = shapeSvg(JSON.stringify(explanation), i);
  } catch (e) {
    showError($("s-plot"), e);
  }
}

function train() {
  const opts = {
    relevant: +$("t-rel").value,
    irrelevant: +$("t-irr").value,
    epochs: +$("t-ep").value,
    seed: +$("t-seed").value,
    unit: $("t-unit").value,
  };
  $("status").textContent = "training...";
  // Let the status paint before the blocking call.
  setTimeout(() => {
    try {
      const r = JSON.parse(trainDemo(JSON.stringify(opts)));
      explanation = r.explanation;
      const rows = r.explanation.feature_weights
        .map((w) => {
          const cls = r.relevant.includes(w.feature) ? ' class="relevant"' : "";
          const sel = r.explanation.selected.includes(w.feature) ? "selected" : "";
          return `<tr${cls}><td>${w.feature}</td><td>${w.weight.toFixed(4)}</td><td>${sel}</td></tr>`;
        })
        .join("");
      $("t-out").innerHTML =
        `<p>test MSE ${r.test_loss.toFixed(5)} after ${r.epochs_run} epochs; planted channels in bold.</p>` +
        `<table><tr><th>feature</th><th>weight</th><th></th></tr>${rows}</table>` +
        `<p>validation loss per epoch</p>${linePlot(r.val_curve)}`;
      const pick = $("s-pick");
      pick.innerHTML = r.explanation.shape_functions
        .map((s, i) => `<option value="${i}">${s.rank}. ${s.feature}</option>`)
        .join("");
      pick.disabled = false;
      renderShape();
      $("status").textContent = "";
    } catch (e) {
      $("status").textContent = "";
      showError($("t-out"), e);
    }
  }, 20);
}

await init();
$("lr-go").onclick = plotSchedule;
$("t-go").onclick = train;
$("s-pick").onchange = renderShape;
plotSchedule();
