// Client-side session: turn history, feed-back and one ask at a time.

import type { ApiClient, AskResponse, RankedCandidate } from "./api.js";
import { continueStory, NEXT_PROMPT, preview, Registry, resolveDraft, validate, type Draft } from "./compose.js";

/// One executed query, in the cli session-file layout.
export interface Turn {
  slots: Record<string, string>;
  targets: string[];
  raw_input: string;
  raw_output: string;
  parsed: Record<string, string>;
  missing: string[];
}

export function canFeedBack(turn: Turn | undefined, slot: string): boolean {
  return turn !== undefined && turn.parsed[slot] !== undefined && turn.parsed[slot].trim() !== "";
}

/// Next draft with `slot` from `turn` as a source. An answer to a story
/// question extends the story instead.
export function feedBack(turn: Turn, slot: string, draft: Draft): Draft {
  if (!canFeedBack(turn, slot)) throw new Error(`turn has no parsed ${slot}`);
  const value = turn.parsed[slot];
  const question = turn.slots.question;
  if (slot === "answer" && question?.trim().endsWith(NEXT_PROMPT)) {
    return { slots: { ...turn.slots, question: continueStory(question, value) }, targets: [...turn.targets] };
  }
  const slots = { ...draft.slots, [slot]: value };
  return { slots, targets: draft.targets.filter((t) => t !== slot) };
}

export interface Bar {
  candidate: string;
  probability: number;
  width: number;
}

export function candidateIssues(candidates: string[]): string[] {
  const issues: string[] = [];
  const trimmed = candidates.map((c) => c.trim());
  if (trimmed.length < 2) issues.push("enter at least two candidates");
  if (trimmed.some((c) => c === "")) issues.push("empty candidate");
  const dupes = trimmed.filter((c, i) => c !== "" && trimmed.indexOf(c) !== i);
  for (const d of new Set(dupes)) issues.push(`duplicate candidate: ${d}`);
  return issues;
}

/// Descending bars scaled to the largest probability.
export function rankBars(ranked: RankedCandidate[]): Bar[] {
  const sorted = [...ranked].sort((a, b) => b.probability - a.probability);
  const top = sorted[0]?.probability ?? 0;
  return sorted.map((r) => ({
    candidate: r.candidate,
    probability: r.probability,
    width: top > 0 ? r.probability / top : 0,
  }));
}

export class Session {
  private readonly turns: Turn[] = [];
  private inFlight = false;

  constructor(
    readonly client: ApiClient,
    readonly registry: Registry,
  ) {}

  static async open(client: ApiClient): Promise<Session> {
    const meta = await client.meta();
    return new Session(client, new Registry(meta.slots));
  }

  get history(): readonly Turn[] {
    return this.turns;
  }

  get pending(): boolean {
    return this.inFlight;
  }

  preview(draft: Draft): string | undefined {
    return preview(this.registry, draft);
  }

  async submit(draft: Draft): Promise<Turn> {
    if (this.inFlight) throw new Error("a query is already running");
    const issues = validate(this.registry, draft);
    if (issues.length > 0) throw new Error(issues.map((i) => `${i.error}: ${i.detail}`).join("; "));
    const req = resolveDraft(this.registry, draft);
    this.inFlight = true;
    let resp: AskResponse;
    try {
      resp = await this.client.ask(req);
    } finally {
      this.inFlight = false;
    }
    const turn: Turn = { slots: req.slots, targets: req.targets, ...resp };
    this.turns.push(turn);
    return turn;
  }

  async rank(slots: Record<string, string>, candidates: string[], includeM = false): Promise<Bar[]> {
    const issues = candidateIssues(candidates);
    if (issues.length > 0) throw new Error(issues.join("; "));
    const { slots: resolved } = resolveDraft(this.registry, { slots, targets: [] });
    return rankBars(await this.client.rank({ slots: resolved, candidates, include_m: includeM }));
  }

  /// JSON lines readable by the cli repl.
  exportJsonl(): string {
    return this.turns
      .map((t) =>
        JSON.stringify({
          slots: t.slots,
          targets: t.targets,
          raw_input: t.raw_input,
          raw_output: t.raw_output,
          parsed: t.parsed,
          missing: t.missing,
        }),
      )
      .map((l) => l + "\n")
      .join("");
  }
}
