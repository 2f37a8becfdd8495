import init, { repair_tags, score, DemoModel } from "./pkg/chunkforge_demo.js";

const $ = (id) => document.getElementById(id);
const esc = (s) => String(s).replace(/[&<>]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;" })[c]);

function chunksHtml(chunks) {
  return '<div class="chunks">' + chunks
    .map((c) => `<span class="${c.label === "O" ? "O" : ""}">${esc(c.text)}<small>${esc(c.label)}</small></span>`)
    .join("") + "</div>";
}

function showRepair() {
  const r = JSON.parse(repair_tags($("tags").value));
  if (r.error) { $("repair-out").innerHTML = `<pre>${esc(r.error)}</pre>`; return; }
  const tags = r.repaired.map((t, i) => r.changed.includes(i) ? `<span class="fixed">${esc(t)}</span>` : esc(t));
  $("repair-out").innerHTML = `<pre>${tags.join(" ")}</pre>` + chunksHtml(r.chunks);
}

function showScore() {
  const r = JSON.parse(score($("score-in").value));
  $("score-out").textContent = r.error
    ? r.error
    : `${r.report}\nsegment F1 ${r.segment_f1.toFixed(2)}\n\n${r.lengths}`;
}

let model;

function showChunk() {
  const r = JSON.parse(model.chunk($("sentence").value));
  if (r.error) { $("chunk-out").innerHTML = `<pre>${esc(r.error)}</pre>`; return; }
  const rows = r.steps.map((s) => {
    const cands = s.candidates.map((c) =>
      `<div class="${c.end === s.end ? "pick" : ""}"><span class="bar" style="width:${Math.round(c.prob * 120)}px"></span> ` +
      `${c.prob.toFixed(3)} ${esc(c.text)}</div>`).join("");
    return `<tr><td>b=${s.begin}</td><td>${cands}</td><td>${esc(s.label)}</td></tr>`;
  });
  const chunks = r.steps.map((s) => ({ text: r.tokens.slice(s.begin, s.end + 1).join(" "), label: s.label }));
  $("chunk-out").innerHTML = chunksHtml(chunks) + `<pre>${r.tags.join(" ")}</pre>` +
    `<table class="trace"><tr><td>start</td><td>end candidates</td><td>label</td></tr>${rows.join("")}</table>`;
}

function trainSome() {
  $("train").disabled = true;
  let left = 10;
  const step = () => {
    const rows = JSON.parse(model.train(1));
    if (rows.error) { $("train-out").textContent = rows.error; return; }
    const e = rows[0];
    $("train-out").textContent = `epoch ${e.epoch}  loss ${e.loss.toFixed(3)}  F1 ${e.f1.toFixed(2)}  segment F1 ${e.segment_f1.toFixed(2)}`;
    showChunk();
    if (--left > 0) setTimeout(step, 0); else $("train").disabled = false;
  };
  step();
}

await init();
model = new DemoModel(1);
$("sentence").value = JSON.parse(model.samples())[0];
$("repair").onclick = showRepair;
$("score").onclick = showScore;
$("chunk").onclick = showChunk;
$("train").onclick = trainSome;
showRepair();
showScore();
showChunk();
$("status").textContent = "ready";
