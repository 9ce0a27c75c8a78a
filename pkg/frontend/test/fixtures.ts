import fs from "node:fs";
import os from "node:os";
import path from "node:path";

import type { StudyBundle, StudyResponse } from "../src/types.js";

/** 1x1 transparent PNG. */
const PNG_BYTES = Buffer.from(
  "iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mP8z8BQDwAEhQGAhKmMIQAAAABJRU5ErkJggg==",
  "base64",
);

export function makeBundle(taskCount = 10): StudyBundle {
  return {
    bundle_id: "study_test",
    tasks: Array.from({ length: taskCount }, (_, i) => ({
      task_id: `task_${String(i).padStart(4, "0")}`,
      image_a_path: `images/task_${String(i).padStart(4, "0")}_a.png`,
      image_b_path: `images/task_${String(i).padStart(4, "0")}_b.png`,
      question_text: "what color is the circle",
      answer_a: "red",
      answer_b: "blue",
      hidden: { original_is: i % 2 === 0 ? "a" : "b" as const },
    })),
  };
}

export function writeBundleDir(bundle: StudyBundle): { dir: string; bundlePath: string; logPath: string } {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "study-"));
  fs.mkdirSync(path.join(dir, "images"));
  for (const task of bundle.tasks) {
    fs.writeFileSync(path.join(dir, task.image_a_path), PNG_BYTES);
    fs.writeFileSync(path.join(dir, task.image_b_path), PNG_BYTES);
  }
  const bundlePath = path.join(dir, "bundle.json");
  fs.writeFileSync(bundlePath, JSON.stringify(bundle, null, 2));
  return { dir, bundlePath, logPath: path.join(dir, "responses.jsonl") };
}

export function response(partial: {
  task_id: string;
  participant_id: string;
  phase1: StudyResponse["phase1"];
  phase2?: StudyResponse["phase2"];
}): StudyResponse {
  return {
    displayed_order: "a-left",
    timestamps: { phase1_at: "2026-01-01T00:00:00Z", ...(partial.phase2 ? { phase2_at: "2026-01-01T00:01:00Z" } : {}) },
    ...partial,
  };
}
