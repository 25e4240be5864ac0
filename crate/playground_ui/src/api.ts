// Typed client for the playground service endpoints.

export interface SlotInfo {
  name: string;
  abbrev: string;
}

export interface Meta {
  slots: SlotInfo[];
  angles: string[];
  backend: string;
  order: "as_given" | "scrambled";
}

export interface DecodeOptions {
  mode?: "greedy" | "beam" | "nucleus";
  beam_size?: number;
  top_p?: number;
  temperature?: number;
  max_tokens?: number;
  seed?: number | null;
}

export interface AskRequest {
  slots: Record<string, string>;
  targets: string[];
  decode?: DecodeOptions;
}

export interface AskResponse {
  raw_input: string;
  raw_output: string;
  parsed: Record<string, string>;
  missing: string[];
}

export interface RankRequest {
  slots: Record<string, string>;
  candidates: string[];
  include_m: boolean;
}

export interface RankedCandidate {
  candidate: string;
  probability: number;
  logprob: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly error: string,
    readonly detail: string,
  ) {
    super(`${status} ${error}: ${detail}`);
  }
}

export type Fetch = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: Fetch = (input, init) => fetch(input, init),
  ) {}

  private async call<T>(path: string, body?: unknown): Promise<T> {
    const init: RequestInit =
      body === undefined
        ? { method: "GET" }
        : { method: "POST", headers: { "content-type": "application/json" }, body: JSON.stringify(body) };
    const resp = await this.fetchImpl(this.baseUrl.replace(/\/$/, "") + path, init);
    const text = await resp.text();
    let json: unknown;
    try {
      json = JSON.parse(text);
    } catch {
      throw new ApiError(resp.status, "malformed_response", text.slice(0, 200));
    }
    if (!resp.ok) {
      const e = json as Partial<{ error: string; detail: string }>;
      throw new ApiError(resp.status, e.error ?? "http_error", e.detail ?? text);
    }
    return json as T;
  }

  meta(): Promise<Meta> {
    return this.call("/api/meta");
  }

  ask(req: AskRequest): Promise<AskResponse> {
    return this.call("/api/ask", req);
  }

  rank(req: RankRequest): Promise<RankedCandidate[]> {
    return this.call("/api/rank", req);
  }
}
