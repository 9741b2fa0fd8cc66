export interface Prediction {
  class_name: string;
  make: string;
  model_name: string;
  confidence: number;
}

export interface PredictResponse {
  predictions: Prediction[];
  model_version: string;
  latency_ms: number;
}

export interface LabelsResponse {
  num_classes: number;
  labels: string[];
}

export interface HealthResponse {
  status: string;
  model_version: string;
}

export type PredictionSource = "accepted_top1" | "accepted_alternative" | "manual";

export interface ListingDraft {
  make: string;
  model: string;
  source: PredictionSource;
  /** Raw confidence from the API payload; omitted for manual entries. */
  confidence?: number;
  class_name?: string;
  model_version?: string;
  image_name?: string;
}
