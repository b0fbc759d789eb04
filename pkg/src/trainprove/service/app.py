"""FastAPI application exposing one classifier as a black-box predict service.

Only predictions leave the process: labels by default, logits when the
request asks for them. Every error, including malformed JSON and schema
violations, is returned as ``{"error": {"code": ..., "message": ...}}``.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from trainprove.errors import TrainProveError
from trainprove.learner import MlpClassifier
from trainprove.service.schemas import ErrorResponse, Mode, ModelInfo, PredictRequest, PredictResponse


def _error(status: int, code: str, message: str) -> JSONResponse:
    body = ErrorResponse(error={"code": code, "message": message})
    return JSONResponse(status_code=status, content=body.model_dump())


def create_app(model: MlpClassifier) -> FastAPI:
    app = FastAPI(title="trainprove predict service", docs_url=None, redoc_url=None)
    # Served parameters are never mutated; keep a private copy anyway.
    served = model.copy()

    @app.exception_handler(RequestValidationError)
    async def _validation(request: Request, exc: RequestValidationError):
        errors = exc.errors()
        if any(
            e.get("type") == "json_invalid"
            or (e.get("type") == "model_attributes_type" and tuple(e.get("loc", ())) == ("body",))
            for e in errors
        ):
            return _error(400, "malformed_json", "request body is not valid JSON")
        parts = []
        for e in errors[:5]:
            loc = ".".join(str(p) for p in e.get("loc", ()) if p != "body")
            parts.append(f"{loc or 'body'}: {e.get('msg')}")
        return _error(422, "invalid_request", "; ".join(parts))

    @app.exception_handler(StarletteHTTPException)
    async def _http(request: Request, exc: StarletteHTTPException):
        code = {404: "not_found", 405: "method_not_allowed"}.get(exc.status_code, "http_error")
        return _error(exc.status_code, code, str(exc.detail))

    @app.exception_handler(TrainProveError)
    async def _domain(request: Request, exc: TrainProveError):
        return _error(422, exc.code, str(exc))

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception):
        return _error(500, "internal", f"{type(exc).__name__}: {exc}")

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/info", response_model=ModelInfo)
    def info():
        return ModelInfo(
            layer_dims=served.layer_dims,
            num_classes=served.num_classes,
            input_dim=served.input_dim,
        )

    @app.post("/predict", response_model=PredictResponse, response_model_exclude_none=True)
    def predict(req: PredictRequest):
        x = np.asarray(req.inputs, dtype=np.float64)
        if x.shape[1] != served.input_dim:
            return _error(
                422, "dimension_mismatch",
                f"model expects {served.input_dim} features, got {x.shape[1]}",
            )
        z = served.logits(x)
        labels = np.argmax(z, axis=1).tolist()
        if req.mode is Mode.LOGITS:
            return PredictResponse(labels=labels, logits=z.tolist())
        return PredictResponse(labels=labels)

    return app
