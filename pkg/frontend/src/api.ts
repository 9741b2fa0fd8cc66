import type { HealthResponse, LabelsResponse, PredictResponse } from "./types.js";

/** Service errors carry a user-presentable message and a machine code. */
export class ApiError extends Error {
  constructor(
    message: string,
    readonly code: string,
    readonly status: number | null,
  ) {
    super(message);
  }
}

interface ErrorBody {
  error?: { code?: string; message?: string };
}

async function errorFrom(res: Response): Promise<ApiError> {
  let body: ErrorBody = {};
  try {
    body = (await res.json()) as ErrorBody;
  } catch {
    // non-JSON error body; fall through to status-based messages
  }
  const code = body.error?.code ?? `http_${res.status}`;
  if (res.status === 413) {
    return new ApiError(
      body.error?.message ?? "Image too large for the server's upload limit",
      "upload_too_large",
      413,
    );
  }
  if (res.status === 400) {
    return new ApiError("That file does not look like a readable image", code, 400);
  }
  return new ApiError(body.error?.message ?? `Request failed (${res.status})`, code, res.status);
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  async predict(file: File | Blob, topK = 5, signal?: AbortSignal): Promise<PredictResponse> {
    const form = new FormData();
    form.append("image", file);
    let res: Response;
    try {
      res = await fetch(`${this.baseUrl}/api/predict?top_k=${topK}`, {
        method: "POST",
        body: form,
        signal,
      });
    } catch (err) {
      if (err instanceof DOMException && err.name === "AbortError") throw err;
      throw new ApiError("Prediction service is unreachable", "service_down", null);
    }
    if (!res.ok) throw await errorFrom(res);
    return (await res.json()) as PredictResponse;
  }

  async labels(): Promise<LabelsResponse> {
    const res = await fetch(`${this.baseUrl}/api/labels`);
    if (!res.ok) throw await errorFrom(res);
    return (await res.json()) as LabelsResponse;
  }

  async health(): Promise<HealthResponse> {
    const res = await fetch(`${this.baseUrl}/api/health`);
    if (!res.ok) throw await errorFrom(res);
    return (await res.json()) as HealthResponse;
  }
}
