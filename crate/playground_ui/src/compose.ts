// Draft queries: slot resolution, validation and the raw input preview.

import type { AskRequest, SlotInfo } from "./api.js";

export const CONTEXT = "context";
export const SEP = " ; ";
export const NEXT_PROMPT = "What happens next?";

export interface Draft {
  slots: Record<string, string>;
  targets: string[];
}

export interface Issue {
  error: "unknown_slot" | "marker_collision" | "empty_value" | "empty_targets" | "overlapping_slots";
  detail: string;
}

export const marker = (slot: string): string => `$${slot}$`;

export class Registry {
  constructor(readonly slots: SlotInfo[]) {}

  /// Full name or single letter, case-insensitive.
  resolve(key: string): string | undefined {
    const k = key.trim();
    const byName = this.slots.find((s) => s.name === k.toLowerCase());
    if (byName) return byName.name;
    if ([...k].length === 1) return this.slots.find((s) => s.abbrev === k.toUpperCase())?.name;
    return undefined;
  }

  position(name: string): number {
    return this.slots.findIndex((s) => s.name === name);
  }
}

/// Problems the service would answer with a 400, in the order it checks them.
export function validate(reg: Registry, draft: Draft): Issue[] {
  const issues: Issue[] = [];
  const sources = new Set<string>();
  for (const [key, value] of Object.entries(draft.slots)) {
    const name = reg.resolve(key);
    if (!name) {
      issues.push({ error: "unknown_slot", detail: key });
      continue;
    }
    sources.add(name);
    if (value.trim() === "") {
      issues.push({ error: "empty_value", detail: name });
      continue;
    }
    const hit = reg.slots.map((s) => marker(s.name)).find((m) => value.includes(m));
    if (hit) issues.push({ error: "marker_collision", detail: `${name} contains ${hit}` });
  }
  const targets: string[] = [];
  for (const t of draft.targets) {
    const name = reg.resolve(t);
    if (!name) issues.push({ error: "unknown_slot", detail: t });
    else targets.push(name);
  }
  if (draft.targets.length === 0) issues.push({ error: "empty_targets", detail: "select at least one target" });
  for (const t of targets) {
    if (sources.has(t)) issues.push({ error: "overlapping_slots", detail: t });
  }
  return issues;
}

/// Sources in registry order with context last; targets as selected.
export function resolveDraft(reg: Registry, draft: Draft): AskRequest {
  const slots: Record<string, string> = {};
  for (const [k, v] of Object.entries(draft.slots)) slots[reg.resolve(k) ?? k] = v;
  return { slots, targets: draft.targets.map((t) => reg.resolve(t) ?? t) };
}

function sourceOrder(reg: Registry, names: string[]): string[] {
  const key = (n: string): [number, number] => [n === CONTEXT ? 1 : 0, reg.position(n)];
  return [...names].sort((a, b) => {
    const [ca, pa] = key(a);
    const [cb, pb] = key(b);
    return ca - cb || pa - pb;
  });
}

/// The exact model input the service builds under as_given order,
/// or undefined while the draft is invalid.
export function preview(reg: Registry, draft: Draft): string | undefined {
  if (validate(reg, draft).length > 0) return undefined;
  const req = resolveDraft(reg, draft);
  const parts = req.targets.map(marker);
  for (const s of sourceOrder(reg, Object.keys(req.slots))) parts.push(`${marker(s)} = ${req.slots[s]}`);
  return parts.join(SEP);
}

/// Appends an answer to a story question and asks for the next event.
export function continueStory(question: string, answer: string): string {
  const q = question.trim();
  let story = (q.endsWith(NEXT_PROMPT) ? q.slice(0, -NEXT_PROMPT.length) : q).trimEnd();
  if (story !== "" && !/[.!?]$/.test(story)) story += ".";
  let a = answer.trim();
  if (!/[.!?]$/.test(a)) a += ".";
  return story === "" ? `${a} ${NEXT_PROMPT}` : `${story} ${a} ${NEXT_PROMPT}`;
}
