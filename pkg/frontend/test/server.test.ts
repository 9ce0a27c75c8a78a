import fs from "node:fs";
import type http from "node:http";
import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { createStudyServer } from "../src/server.js";
import { makeBundle, writeBundleDir } from "./fixtures.js";

let server: http.Server;
let base: string;
let paths: { dir: string; bundlePath: string; logPath: string };
const bundle = makeBundle(10);

function listen(srv: http.Server): Promise<string> {
  return new Promise((resolve) => {
    srv.listen(0, "127.0.0.1", () => {
      const addr = srv.address();
      resolve(`http://127.0.0.1:${typeof addr === "object" && addr ? addr.port : 0}`);
    });
  });
}

async function register(): Promise<string> {
  const res = await fetch(`${base}/api/participants`, { method: "POST" });
  expect(res.status).toBe(201);
  return (await res.json()).participant_id;
}

async function nextTask(participant: string): Promise<any> {
  const res = await fetch(`${base}/api/tasks/next?participant=${participant}`);
  expect(res.status).toBe(200);
  return res.json();
}

async function submit(payload: unknown): Promise<Response> {
  return fetch(`${base}/api/responses`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(payload),
  });
}

const PHASE1 = { answer_correct: "yes", realism: 2 };
const PHASE2 = { original_pick: "a", diff_on_critical: "yes", correct_pair: "b" };

beforeEach(async () => {
  paths = writeBundleDir(bundle);
  server = createStudyServer({ bundlePath: paths.bundlePath, logPath: paths.logPath });
  base = await listen(server);
});

afterEach(() => {
  server.close();
  fs.rmSync(paths.dir, { recursive: true, force: true });
});

describe("task serving", () => {
  it("serves phase 1 first and phase 2 after submission", async () => {
    const participant = await register();
    const view1 = await nextTask(participant);
    expect(view1.phase).toBe(1);
    expect(view1.task_id).toBe("task_0000");

    expect((await submit({ participant_id: participant, task_id: view1.task_id, phase1: PHASE1 })).status).toBe(201);
    const view2 = await nextTask(participant);
    expect(view2.phase).toBe(2);
    expect(view2.task_id).toBe(view1.task_id);

    expect((await submit({ participant_id: participant, task_id: view1.task_id, phase2: PHASE2 })).status).toBe(201);
    const view3 = await nextTask(participant);
    expect(view3.phase).toBe(1);
    expect(view3.task_id).toBe("task_0001");
  });

  it("walks a 10-task bundle to completion", async () => {
    const participant = await register();
    for (let i = 0; i < 10; i++) {
      const view = await nextTask(participant);
      expect(view.phase).toBe(1);
      await submit({ participant_id: participant, task_id: view.task_id, phase1: PHASE1 });
      await submit({ participant_id: participant, task_id: view.task_id, phase2: PHASE2 });
    }
    const done = await nextTask(participant);
    expect(done.phase).toBe("complete");
  });

  it("rejects unknown participants", async () => {
    const res = await fetch(`${base}/api/tasks/next?participant=nobody`);
    expect(res.status).toBe(401);
  });

  it("caps each task at three raters", async () => {
    const single = makeBundle(1);
    const singlePaths = writeBundleDir(single);
    const singleServer = createStudyServer({
      bundlePath: singlePaths.bundlePath,
      logPath: singlePaths.logPath,
    });
    const singleBase = await listen(singleServer);
    try {
      const assigned: string[] = [];
      for (let i = 0; i < 4; i++) {
        const res = await fetch(`${singleBase}/api/participants`, { method: "POST" });
        const participant = (await res.json()).participant_id;
        const view = await (await fetch(`${singleBase}/api/tasks/next?participant=${participant}`)).json();
        assigned.push(view.phase === "complete" ? "complete" : view.task_id);
      }
      expect(assigned).toEqual(["task_0000", "task_0000", "task_0000", "complete"]);
    } finally {
      singleServer.close();
      fs.rmSync(singlePaths.dir, { recursive: true, force: true });
    }
  });
});

describe("blinding", () => {
  it("phase 1 payload exposes only the counterfactual image and answer", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    const raw = JSON.stringify(view);
    expect(raw).not.toContain("hidden");
    expect(raw).not.toContain("original");

    // task_0000 has original "a", so phase 1 must show image b and answer b
    const task = bundle.tasks[0];
    expect(view.counterfactual_image_url).toBe(`/bundle/${task.image_b_path}`);
    expect(view.counterfactual_answer).toBe(task.answer_b);
    expect(raw).not.toContain(task.image_a_path);
  });

  it("phase 2 payload shows both images but never the position bit", async () => {
    const participant = await register();
    const view1 = await nextTask(participant);
    await submit({ participant_id: participant, task_id: view1.task_id, phase1: PHASE1 });
    const view2 = await nextTask(participant);
    const raw = JSON.stringify(view2);
    expect(view2.image_left_url).toContain("_a.png");
    expect(view2.image_right_url).toContain("_b.png");
    expect(raw).not.toContain("hidden");
    expect(raw).not.toContain("original_is");
  });
});

describe("response recording", () => {
  it("rejects phase 2 before phase 1", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    const res = await submit({ participant_id: participant, task_id: view.task_id, phase2: PHASE2 });
    expect(res.status).toBe(409);
  });

  it("rejects duplicate submissions with a conflict status", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    await submit({ participant_id: participant, task_id: view.task_id, phase1: PHASE1 });
    expect((await submit({ participant_id: participant, task_id: view.task_id, phase1: PHASE1 })).status).toBe(409);
    await submit({ participant_id: participant, task_id: view.task_id, phase2: PHASE2 });
    expect((await submit({ participant_id: participant, task_id: view.task_id, phase2: PHASE2 })).status).toBe(409);
  });

  it("rejects out-of-range realism with field errors", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    const res = await submit({
      participant_id: participant,
      task_id: view.task_id,
      phase1: { answer_correct: "yes", realism: 7 },
    });
    expect(res.status).toBe(400);
    const body = await res.json();
    expect(body.errors.some((e: any) => e.field === "phase1.realism")).toBe(true);
  });

  it("rejects invalid enum values", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    await submit({ participant_id: participant, task_id: view.task_id, phase1: PHASE1 });
    const res = await submit({
      participant_id: participant,
      task_id: view.task_id,
      phase2: { ...PHASE2, original_pick: "c" },
    });
    expect(res.status).toBe(400);
    const body = await res.json();
    expect(body.errors.some((e: any) => e.field === "phase2.original_pick")).toBe(true);
  });

  it("rejects tasks outside the bundle", async () => {
    const participant = await register();
    const res = await submit({ participant_id: participant, task_id: "task_9999", phase1: PHASE1 });
    expect(res.status).toBe(404);
  });

  it("a phase 1 + phase 2 pair appends two log lines, both retrievable", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    await submit({ participant_id: participant, task_id: view.task_id, phase1: PHASE1 });
    await submit({ participant_id: participant, task_id: view.task_id, phase2: PHASE2 });

    const lines = fs.readFileSync(paths.logPath, "utf8").trim().split("\n").map((l) => JSON.parse(l));
    expect(lines).toHaveLength(2);
    expect(lines[0].phase2).toBeUndefined();
    expect(lines[1].phase2).toBeDefined();
    expect(lines[1].phase1).toEqual(lines[0].phase1);  // phase 1 never mutated
    expect(lines[1].timestamps.phase1_at).toBe(lines[0].timestamps.phase1_at);

    const res = await fetch(`${base}/api/responses?participant=${participant}&task=${view.task_id}`);
    const body = await res.json();
    expect(body.responses).toHaveLength(1);
    expect(body.responses[0].phase2).toBeDefined();
  });
});

describe("report and static serving", () => {
  it("serves the aggregate report", async () => {
    const participant = await register();
    const view = await nextTask(participant);
    await submit({ participant_id: participant, task_id: view.task_id, phase1: PHASE1 });
    await submit({ participant_id: participant, task_id: view.task_id, phase2: PHASE2 });

    const report = await (await fetch(`${base}/api/report`)).json();
    expect(report.counts.responses).toBe(1);
    expect(report.answer_correct.yes).toBe(1);
    // task_0000's original is "a" and PHASE2 picks "a"
    expect(report.original_identification.correct).toBe(1);
    expect(report.reference.identification.correct).toBeCloseTo(0.672, 6);
  });

  it("serves bundle images and blocks path traversal", async () => {
    const img = await fetch(`${base}/bundle/${bundle.tasks[0].image_a_path}`);
    expect(img.status).toBe(200);
    expect(img.headers.get("content-type")).toBe("image/png");

    const evil = await fetch(`${base}/bundle/../bundle.json`);
    expect([403, 404]).toContain(evil.status);
  });

  it("serves the rater page", async () => {
    const page = await fetch(`${base}/`);
    expect(page.status).toBe(200);
    expect(await page.text()).toContain("Image rating study");
  });
});
