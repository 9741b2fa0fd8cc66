import type { ApiClient } from "../src/api.js";
import { App } from "../src/app.js";
import type { ListingDraft, PredictResponse } from "../src/types.js";

export const FIVE_PREDICTIONS: PredictResponse = {
  predictions: [
    { class_name: "Falcon Roadster 2018", make: "Falcon", model_name: "Roadster", confidence: 0.6130000000000001 },
    { class_name: "Comet Hatchback 2020", make: "Comet", model_name: "Hatchback", confidence: 0.201 },
    { class_name: "Titan Pickup 2016", make: "Titan", model_name: "Pickup", confidence: 0.1 },
    { class_name: "Aurora Sedan 2019", make: "Aurora", model_name: "Sedan", confidence: 0.05 },
    { class_name: "Vega Coupe 2021", make: "Vega", model_name: "Coupe", confidence: 0.036 },
  ],
  model_version: "abc123def456",
  latency_ms: 12.5,
};

export interface StubApi {
  predict: (file: File | Blob, topK?: number, signal?: AbortSignal) => Promise<PredictResponse>;
  calls: { signal?: AbortSignal }[];
}

export function stubApi(
  impl: (signal?: AbortSignal) => Promise<PredictResponse>,
): StubApi {
  const calls: { signal?: AbortSignal }[] = [];
  return {
    calls,
    predict(_file: File | Blob, _topK?: number, signal?: AbortSignal) {
      calls.push({ signal });
      return impl(signal);
    },
  };
}

export function mountApp(
  api: StubApi,
  onDraft: (draft: ListingDraft) => void = () => {},
): App {
  const container = document.createElement("div");
  container.id = "app";
  document.body.replaceChildren(container);
  return new App(container, api as unknown as ApiClient, onDraft);
}

export function imageBlob(): Blob {
  return new Blob([new Uint8Array([137, 80, 78, 71])], { type: "image/png" });
}
