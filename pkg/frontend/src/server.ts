/**
 * HTTP server for the two-phase rater study.
 *
 * Endpoints:
 *   POST /api/participants          -> { participant_id }
 *   GET  /api/tasks/next?participant=ID -> phase view or completion page data
 *   POST /api/responses             -> record one phase submission
 *   GET  /api/responses?participant=&task= -> stored snapshots (latest per pair)
 *   GET  /api/report                -> aggregated study report
 *   GET  /bundle/<path>             -> static images from the bundle directory
 *   GET  /                          -> minimal rater UI
 *
 * Blinding: Phase I payloads carry only the counterfactual image, the
 * question, and the counterfactual answer; no payload before submission
 * carries `hidden`, the original image (Phase I), or anything derived from
 * the original-position bit.
 */

import fs from "node:fs";
import http from "node:http";
import path from "node:path";

import { aggregate } from "./aggregate.js";
import { StudyStore } from "./store.js";
import type { DisplayedOrder, PhaseOne, PhaseTwo, StudyTask } from "./types.js";
import { parseBundle, validatePhaseOne, validatePhaseTwo } from "./types.js";

export interface ServerOptions {
  bundlePath: string;
  logPath: string;
}

const DISPLAYED_ORDER: DisplayedOrder = "a-left"; // bundle a/b order is already randomized

interface PhaseOneView {
  phase: 1;
  task_id: string;
  question_text: string;
  counterfactual_image_url: string;
  counterfactual_answer: string;
}

interface PhaseTwoView {
  phase: 2;
  task_id: string;
  question_text: string;
  image_left_url: string;
  image_right_url: string;
  answer_left: string;
  answer_right: string;
  displayed_order: DisplayedOrder;
}

function phaseOneView(task: StudyTask): PhaseOneView {
  const counterfactualIs = task.hidden.original_is === "a" ? "b" : "a";
  return {
    phase: 1,
    task_id: task.task_id,
    question_text: task.question_text,
    counterfactual_image_url:
      "/bundle/" + (counterfactualIs === "a" ? task.image_a_path : task.image_b_path),
    counterfactual_answer: counterfactualIs === "a" ? task.answer_a : task.answer_b,
  };
}

function phaseTwoView(task: StudyTask): PhaseTwoView {
  return {
    phase: 2,
    task_id: task.task_id,
    question_text: task.question_text,
    image_left_url: "/bundle/" + task.image_a_path,
    image_right_url: "/bundle/" + task.image_b_path,
    answer_left: task.answer_a,
    answer_right: task.answer_b,
    displayed_order: DISPLAYED_ORDER,
  };
}

function sendJson(res: http.ServerResponse, status: number, payload: unknown): void {
  const body = JSON.stringify(payload);
  res.writeHead(status, { "content-type": "application/json" });
  res.end(body);
}

async function readJsonBody(req: http.IncomingMessage): Promise<unknown> {
  const chunks: Buffer[] = [];
  for await (const chunk of req) chunks.push(chunk as Buffer);
  const text = Buffer.concat(chunks).toString("utf8");
  return text ? JSON.parse(text) : {};
}

export function createStudyServer(options: ServerOptions): http.Server {
  const bundle = parseBundle(fs.readFileSync(options.bundlePath, "utf8"));
  const bundleDir = path.dirname(path.resolve(options.bundlePath));
  const store = new StudyStore(bundle, options.logPath);

  return http.createServer(async (req, res) => {
    try {
      const url = new URL(req.url ?? "/", "http://localhost");
      if (req.method === "POST" && url.pathname === "/api/participants") {
        sendJson(res, 201, { participant_id: store.registerParticipant() });
        return;
      }
      if (req.method === "GET" && url.pathname === "/api/tasks/next") {
        handleNextTask(store, url, res);
        return;
      }
      if (req.method === "POST" && url.pathname === "/api/responses") {
        const body = await readJsonBody(req);
        handleSubmission(store, body, res);
        return;
      }
      if (req.method === "GET" && url.pathname === "/api/responses") {
        sendJson(res, 200, {
          responses: store.responsesFor(
            url.searchParams.get("participant") ?? undefined,
            url.searchParams.get("task") ?? undefined,
          ),
        });
        return;
      }
      if (req.method === "GET" && url.pathname === "/api/report") {
        sendJson(res, 200, aggregate(store.logLines(), store.bundle));
        return;
      }
      if (req.method === "GET" && url.pathname.startsWith("/bundle/")) {
        serveStatic(bundleDir, url.pathname.slice("/bundle/".length), res);
        return;
      }
      if (req.method === "GET" && (url.pathname === "/" || url.pathname === "/index.html")) {
        res.writeHead(200, { "content-type": "text/html" });
        res.end(RATER_PAGE);
        return;
      }
      sendJson(res, 404, { error: "not found" });
    } catch (err) {
      sendJson(res, 500, { error: String(err) });
    }
  });
}

function handleNextTask(store: StudyStore, url: URL, res: http.ServerResponse): void {
  const participant = url.searchParams.get("participant");
  if (!participant || !store.hasParticipant(participant)) {
    sendJson(res, 401, { error: "unknown participant; POST /api/participants first" });
    return;
  }
  const next = store.nextTask(participant);
  if (next === null) {
    sendJson(res, 200, { phase: "complete", message: "all available tasks answered" });
    return;
  }
  sendJson(res, 200, next.phase === 1 ? phaseOneView(next.task) : phaseTwoView(next.task));
}

function handleSubmission(store: StudyStore, body: unknown, res: http.ServerResponse): void {
  if (typeof body !== "object" || body === null) {
    sendJson(res, 400, { errors: [{ field: "", message: "body must be a JSON object" }] });
    return;
  }
  const { participant_id, task_id, phase1, phase2 } = body as {
    participant_id?: string;
    task_id?: string;
    phase1?: PhaseOne;
    phase2?: PhaseTwo;
  };
  if (!participant_id || !store.hasParticipant(participant_id)) {
    sendJson(res, 401, { error: "unknown participant" });
    return;
  }
  if (!task_id || !store.bundle.tasks.some((t) => t.task_id === task_id)) {
    sendJson(res, 404, { error: `task ${task_id} not in bundle` });
    return;
  }
  const existing = store.getResponse(participant_id, task_id);

  if (phase1 !== undefined && phase2 === undefined) {
    const errors = validatePhaseOne(phase1);
    if (errors.length > 0) {
      sendJson(res, 400, { errors });
      return;
    }
    if (existing !== undefined) {
      sendJson(res, 409, { error: "phase 1 already submitted for this task" });
      return;
    }
    store.appendResponse({
      task_id,
      participant_id,
      displayed_order: DISPLAYED_ORDER,
      phase1,
      timestamps: { phase1_at: new Date().toISOString() },
    });
    sendJson(res, 201, { recorded: "phase1" });
    return;
  }

  if (phase2 !== undefined && phase1 === undefined) {
    const errors = validatePhaseTwo(phase2);
    if (errors.length > 0) {
      sendJson(res, 400, { errors });
      return;
    }
    if (existing === undefined) {
      sendJson(res, 409, { error: "phase 2 requires a submitted phase 1 for this task" });
      return;
    }
    if (existing.phase2 !== undefined) {
      sendJson(res, 409, { error: "phase 2 already submitted for this task" });
      return;
    }
    store.appendResponse({
      ...existing,
      phase2,
      timestamps: { ...existing.timestamps, phase2_at: new Date().toISOString() },
    });
    sendJson(res, 201, { recorded: "phase2" });
    return;
  }

  sendJson(res, 400, {
    errors: [{ field: "", message: "submit exactly one of phase1 or phase2" }],
  });
}

function serveStatic(rootDir: string, relative: string, res: http.ServerResponse): void {
  const resolved = path.resolve(rootDir, relative);
  if (!resolved.startsWith(rootDir + path.sep)) {
    sendJson(res, 403, { error: "forbidden" });
    return;
  }
  if (!fs.existsSync(resolved) || !fs.statSync(resolved).isFile()) {
    sendJson(res, 404, { error: "no such file" });
    return;
  }
  const type = resolved.endsWith(".png") ? "image/png" : "application/octet-stream";
  res.writeHead(200, { "content-type": type });
  fs.createReadStream(resolved).pipe(res);
}

const RATER_PAGE = `<!doctype html>
<html>
<head>
<meta charset="utf-8">
<title>Image rating study</title>
<style>
  body { font-family: sans-serif; max-width: 640px; margin: 2rem auto; }
  img { width: 256px; image-rendering: pixelated; border: 1px solid #999; }
  .pair { display: flex; gap: 1rem; }
  fieldset { margin: 1rem 0; }
  button { padding: 0.4rem 1.2rem; }
</style>
</head>
<body>
<h1>Image rating study</h1>
<div id="app">Loading…</div>
<script>
let participant = localStorage.getItem("participant_id");

async function ensureParticipant() {
  if (participant) return;
  const res = await fetch("/api/participants", { method: "POST" });
  participant = (await res.json()).participant_id;
  localStorage.setItem("participant_id", participant);
}

async function loadNext() {
  await ensureParticipant();
  const res = await fetch("/api/tasks/next?participant=" + participant);
  render(await res.json());
}

function radio(name, options) {
  return options.map(o =>
    '<label><input type="radio" name="' + name + '" value="' + o + '"> ' + o + '</label>'
  ).join(" ");
}

function render(view) {
  const app = document.getElementById("app");
  if (view.phase === "complete") {
    app.innerHTML = "<p>All done — thank you for participating!</p>";
    return;
  }
  if (view.phase === 1) {
    app.innerHTML =
      "<h2>Phase I</h2>" +
      "<p><b>Question:</b> " + view.question_text + "</p>" +
      '<img src="' + view.counterfactual_image_url + '">' +
      "<p><b>Model answer:</b> " + view.counterfactual_answer + "</p>" +
      "<fieldset><legend>Is the answer correct?</legend>" + radio("answer_correct", ["yes","no","unsure"]) + "</fieldset>" +
      "<fieldset><legend>Does the picture look edited? (1 = very real … 5 = clearly edited)</legend>" + radio("realism", [1,2,3,4,5]) + "</fieldset>" +
      '<button onclick="submitPhase1(\\'' + view.task_id + '\\')">Submit</button>';
    return;
  }
  app.innerHTML =
    "<h2>Phase II</h2>" +
    "<p><b>Question:</b> " + view.question_text + "</p>" +
    '<div class="pair"><figure><img src="' + view.image_left_url + '"><figcaption>Image 1 — answer: ' + view.answer_left + "</figcaption></figure>" +
    '<figure><img src="' + view.image_right_url + '"><figcaption>Image 2 — answer: ' + view.answer_right + "</figcaption></figure></div>" +
    "<fieldset><legend>Which of the images is the original?</legend>" + radio("original_pick", ["a","b","unsure"]).replaceAll(">a<", ">Image 1<").replaceAll(">b<", ">Image 2<") + "</fieldset>" +
    "<fieldset><legend>Is the difference related to the question-critical object?</legend>" + radio("diff_on_critical", ["yes","no","unsure"]) + "</fieldset>" +
    "<fieldset><legend>Which pair (image, answer) is correct?</legend>" + radio("correct_pair", ["a","b","both","none"]).replaceAll(">a<", ">Image 1<").replaceAll(">b<", ">Image 2<") + "</fieldset>" +
    "<fieldset><legend>Revised: is the Phase I answer correct? (optional)</legend>" + radio("answer_correct_revised", ["yes","no","unsure"]) + "</fieldset>" +
    '<button onclick="submitPhase2(\\'' + view.task_id + '\\')">Submit</button>';
}

function picked(name) {
  const el = document.querySelector('input[name="' + name + '"]:checked');
  return el ? el.value : undefined;
}

async function submitPhase1(taskId) {
  const payload = {
    participant_id: participant, task_id: taskId,
    phase1: { answer_correct: picked("answer_correct"), realism: Number(picked("realism")) },
  };
  const res = await fetch("/api/responses", { method: "POST",
    headers: { "content-type": "application/json" }, body: JSON.stringify(payload) });
  if (res.ok) loadNext(); else alert(JSON.stringify(await res.json()));
}

async function submitPhase2(taskId) {
  const phase2 = {
    original_pick: picked("original_pick"),
    diff_on_critical: picked("diff_on_critical"),
    correct_pair: picked("correct_pair"),
  };
  const revised = picked("answer_correct_revised");
  if (revised) phase2.answer_correct_revised = revised;
  const res = await fetch("/api/responses", { method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify({ participant_id: participant, task_id: taskId, phase2 }) });
  if (res.ok) loadNext(); else alert(JSON.stringify(await res.json()));
}

loadNext();
</script>
</body>
</html>
`;
