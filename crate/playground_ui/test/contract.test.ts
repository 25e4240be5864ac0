// Runs against a live `multiangle serve` when the binary has been built.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { existsSync, mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { feedBack, Session } from "../src/session.js";

const bin = process.env.MULTIANGLE_BIN ?? resolve(__dirname, "../../target/debug/multiangle");

const items = [
  ["Which surface is best for rollerskating?", ["gravel", "sand", "blacktop"], 2, "smooth hard surfaces suit skates"],
  ["What do bees make?", ["honey", "milk", "silk"], 0, "bees turn nectar into honey"],
  ["Which animal barks?", ["cat", "dog", "owl"], 1, "dogs bark"],
  ["What melts in the sun?", ["ice", "stone", "glass"], 0, "ice melts when warmed"],
  ["What do plants need to grow?", ["sunlight", "plastic", "noise"], 0, "plants use sunlight to make food"],
] as const;

const options = (opts: readonly string[]) => opts.map((o, i) => `(${String.fromCharCode(65 + i)}) ${o}`).join(" ");

function freePort(): Promise<number> {
  return new Promise((ok) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as { port: number }).port;
      srv.close(() => ok(port));
    });
  });
}

describe.skipIf(!existsSync(bin))("live service", () => {
  let dir: string;
  let child: ChildProcess;
  let client: ApiClient;

  beforeAll(async () => {
    dir = mkdtempSync(join(tmpdir(), "playground-"));
    const data = join(dir, "data.jsonl");
    writeFileSync(
      data,
      items
        .map(([q, opts, key, e], i) =>
          JSON.stringify({ id: `i${i}`, slots: { question: q, mcoptions: options(opts), answer: opts[key], explanation: e } }),
        )
        .join("\n") + "\n",
    );
    const pairs = join(dir, "pairs.jsonl");
    const sample = spawnSync(bin, ["sample", "--dataset", data, "--angles", "QM->AE,QME->A,Q->A", "--all-angles", "--out", pairs]);
    expect(sample.status).toBe(0);
    const port = await freePort();
    child = spawn(bin, ["--backend", `toy:${pairs}`, "serve", "--bind", `127.0.0.1:${port}`], { stdio: "ignore" });
    client = new ApiClient(`http://127.0.0.1:${port}`);
    for (let i = 0; i < 100; i++) {
      try {
        await client.meta();
        return;
      } catch {
        await new Promise((r) => setTimeout(r, 50));
      }
    }
    throw new Error("service did not start");
  });

  afterAll(() => {
    child?.kill();
    if (dir) rmSync(dir, { recursive: true, force: true });
  });

  it("previews match echoed input and explanations feed back", async () => {
    const s = await Session.open(client);
    for (const [q, opts, key, e] of items) {
      const draft = { slots: { q, m: options(opts) }, targets: ["answer", "explanation"] };
      const first = await s.submit(draft);
      expect(first.raw_input).toBe(s.preview(draft));
      expect(first.parsed).toEqual({ answer: opts[key], explanation: e });

      const next = feedBack(first, "explanation", draft);
      const second = await s.submit(next);
      expect(second.raw_input).toBe(s.preview(next));
      expect(second.raw_input).toContain(`$explanation$ = ${first.parsed.explanation}`);
      expect(second.parsed.answer).toBe(opts[key]);
    }
    expect(s.history).toHaveLength(10);
  });

  it("ranks the memorized answer on top", async () => {
    const s = await Session.open(client);
    const [q, opts, key] = items[0];
    const bars = await s.rank({ question: q }, [...opts]);
    expect(bars[0].candidate).toBe(opts[key]);
    for (let i = 1; i < bars.length; i++) expect(bars[i - 1].probability).toBeGreaterThanOrEqual(bars[i].probability);
    expect(bars.reduce((t, b) => t + b.probability, 0)).toBeLessThanOrEqual(1 + 1e-9);
  });
});
