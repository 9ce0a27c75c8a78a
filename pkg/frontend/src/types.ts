/**
 * Wire and log types for the two-phase rater study.
 *
 * The study bundle is produced by the evaluation pipeline; the only coupling
 * surface is that file plus the line-delimited response log written here.
 */

export type YesNoUnsure = "yes" | "no" | "unsure";
export type OriginalPick = "a" | "b" | "unsure";
export type CorrectPair = "a" | "b" | "both" | "none";
export type DisplayedOrder = "a-left" | "b-left";

export interface StudyTask {
  task_id: string;
  image_a_path: string;
  image_b_path: string;
  question_text: string;
  answer_a: string;
  answer_b: string;
  /** Server-side only; never sent to raters before submission. */
  hidden: { original_is: "a" | "b" };
}

export interface StudyBundle {
  bundle_id: string;
  tasks: StudyTask[];
}

export interface PhaseOne {
  answer_correct: YesNoUnsure;
  /** 1 = very real ... 5 = clearly edited. */
  realism: number;
}

export interface PhaseTwo {
  original_pick: OriginalPick;
  diff_on_critical: YesNoUnsure;
  correct_pair: CorrectPair;
  /** Optional Phase I revision after seeing both images; the Phase I record
   * itself is never mutated. */
  answer_correct_revised?: YesNoUnsure;
}

export interface StudyResponse {
  task_id: string;
  participant_id: string;
  displayed_order: DisplayedOrder;
  phase1: PhaseOne;
  phase2?: PhaseTwo;
  timestamps: { phase1_at: string; phase2_at?: string };
}

export interface FieldError {
  field: string;
  message: string;
}

const YES_NO_UNSURE: readonly string[] = ["yes", "no", "unsure"];
const ORIGINAL_PICKS: readonly string[] = ["a", "b", "unsure"];
const CORRECT_PAIRS: readonly string[] = ["a", "b", "both", "none"];

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

export function validatePhaseOne(body: unknown): FieldError[] {
  const errors: FieldError[] = [];
  if (!isRecord(body)) return [{ field: "phase1", message: "must be an object" }];
  if (!YES_NO_UNSURE.includes(body.answer_correct as string)) {
    errors.push({ field: "phase1.answer_correct", message: "must be yes|no|unsure" });
  }
  const realism = body.realism;
  if (typeof realism !== "number" || !Number.isInteger(realism) || realism < 1 || realism > 5) {
    errors.push({ field: "phase1.realism", message: "must be an integer in 1..5" });
  }
  return errors;
}

export function validatePhaseTwo(body: unknown): FieldError[] {
  const errors: FieldError[] = [];
  if (!isRecord(body)) return [{ field: "phase2", message: "must be an object" }];
  if (!ORIGINAL_PICKS.includes(body.original_pick as string)) {
    errors.push({ field: "phase2.original_pick", message: "must be a|b|unsure" });
  }
  if (!YES_NO_UNSURE.includes(body.diff_on_critical as string)) {
    errors.push({ field: "phase2.diff_on_critical", message: "must be yes|no|unsure" });
  }
  if (!CORRECT_PAIRS.includes(body.correct_pair as string)) {
    errors.push({ field: "phase2.correct_pair", message: "must be a|b|both|none" });
  }
  if (
    body.answer_correct_revised !== undefined &&
    !YES_NO_UNSURE.includes(body.answer_correct_revised as string)
  ) {
    errors.push({ field: "phase2.answer_correct_revised", message: "must be yes|no|unsure" });
  }
  return errors;
}

export function parseBundle(raw: string): StudyBundle {
  const data = JSON.parse(raw) as StudyBundle;
  if (typeof data.bundle_id !== "string" || !Array.isArray(data.tasks)) {
    throw new Error("malformed bundle: bundle_id and tasks are required");
  }
  for (const task of data.tasks) {
    if (
      typeof task.task_id !== "string" ||
      typeof task.image_a_path !== "string" ||
      typeof task.image_b_path !== "string" ||
      task.hidden?.original_is !== "a" && task.hidden?.original_is !== "b"
    ) {
      throw new Error(`malformed task in bundle: ${JSON.stringify(task).slice(0, 120)}`);
    }
  }
  return data;
}
