"""HTTP inference service for listing prefill.

Endpoints:
  POST /api/predict   multipart field "image", query top_k (default 5)
  GET  /api/labels    the class list the checkpoint was trained on
  GET  /api/health    {"status": "ok", "model_version": ...}

Prediction responses rank classes by softmax confidence. Class names
follow the "<Make> <Model ...> <Year>" convention: the make is the first
whitespace token and a trailing 4-digit year is stripped from the model
name. Requests are handled concurrently against read-only weights; no
uploaded image is persisted.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Query, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image

from .augment import AugmentationPolicy, eval_transform
from .backbones import FineTuneModel
from .trainer import load_checkpoint, policy_from_checkpoint

_YEAR_RE = re.compile(r"\s+(19|20)\d{2}$")

access_log = logging.getLogger("carid.serve.access")


@dataclass
class ServingModel:
    model: FineTuneModel
    class_names: list[str]
    policy: AugmentationPolicy  # eval-path policy: normalization + output size
    version: str

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


class UndecodableImage(ValueError):
    pass


class TopKOutOfRange(ValueError):
    pass


def parse_class_name(name: str) -> tuple[str, str]:
    """Split a class label into (make, model_name), dropping a trailing year."""
    stripped = _YEAR_RE.sub("", name.strip())
    make, _, model_name = stripped.partition(" ")
    return make, model_name.strip()


def load_artifact(path: Path | str) -> ServingModel:
    """Load a checkpoint for serving; the version tags the file contents."""
    path = Path(path)
    model, meta = load_checkpoint(path)
    model.eval()
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
    return ServingModel(
        model=model,
        class_names=list(meta["class_names"]),
        policy=policy_from_checkpoint(meta),
        version=digest,
    )


def _decode(image_bytes: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            return np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise UndecodableImage(str(exc)) from exc


def full_distribution(sm: ServingModel, image_bytes: bytes) -> np.ndarray:
    """Softmax over all classes for one image.

    Computed in float64 so confidences stay strictly positive even for
    confidently separated logits that would underflow in float32.
    """
    array = _decode(image_bytes)
    tensor = eval_transform(sm.policy, array).unsqueeze(0)
    sm.model.eval()
    with torch.no_grad():
        logits = sm.model(tensor)[0]
        probs = torch.softmax(logits.double(), dim=0)
    return probs.numpy()


def predict(sm: ServingModel, image_bytes: bytes, top_k: int = 5) -> dict:
    """Ranked predictions for one image; deterministic for identical bytes."""
    if not 1 <= top_k <= sm.num_classes:
        raise TopKOutOfRange(f"top_k must be in [1, {sm.num_classes}], got {top_k}")
    start = time.perf_counter()
    probs = full_distribution(sm, image_bytes)
    order = np.argsort(-probs, kind="stable")[:top_k]
    predictions = []
    for idx in order:
        name = sm.class_names[idx]
        make, model_name = parse_class_name(name)
        predictions.append({
            "class_name": name,
            "make": make,
            "model_name": model_name,
            "confidence": float(probs[idx]),
        })
    return {
        "predictions": predictions,
        "model_version": sm.version,
        "latency_ms": (time.perf_counter() - start) * 1000.0,
    }


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": {"code": code, "message": message}})


def create_app(sm: ServingModel, max_upload_mb: int = 10,
               cors_origins: tuple[str, ...] = ("*",)) -> FastAPI:
    app = FastAPI(title="carid", version=sm.version)
    app.add_middleware(
        CORSMiddleware, allow_origins=list(cors_origins),
        allow_methods=["*"], allow_headers=["*"],
    )
    max_bytes = max_upload_mb * 1024 * 1024

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        start = time.perf_counter()
        response = await call_next(request)
        access_log.info(json.dumps({
            "method": request.method,
            "path": request.url.path,
            "status": response.status_code,
            "duration_ms": round((time.perf_counter() - start) * 1000.0, 3),
        }))
        return response

    @app.get("/api/health")
    def health():
        return {"status": "ok", "model_version": sm.version}

    @app.get("/api/labels")
    def labels():
        return {"num_classes": sm.num_classes, "labels": sm.class_names}

    @app.post("/api/predict")
    async def predict_endpoint(image: UploadFile, top_k: int | None = Query(default=None)):
        data = await image.read()
        if len(data) > max_bytes:
            return _error(413, "upload_too_large",
                          f"upload exceeds the {max_upload_mb} MB limit")
        # default 5, capped to the class count; an explicit value must be in range
        effective_top_k = min(5, sm.num_classes) if top_k is None else top_k
        try:
            return predict(sm, data, effective_top_k)
        except TopKOutOfRange as exc:
            return _error(422, "top_k_out_of_range", str(exc))
        except UndecodableImage as exc:
            return _error(400, "undecodable_image", str(exc))

    return app


def main(checkpoint: Path | str, port: int = 8000, host: str = "127.0.0.1",
         max_upload_mb: int = 10) -> None:
    """Load the artifact and serve; startup fails fast on a bad checkpoint."""
    import uvicorn

    sm = load_artifact(checkpoint)
    app = create_app(sm, max_upload_mb=max_upload_mb)
    uvicorn.run(app, host=host, port=port, log_level="info")
