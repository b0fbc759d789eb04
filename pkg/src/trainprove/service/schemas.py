"""Request/response bodies for the ``POST /predict`` endpoint."""

from __future__ import annotations

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Mode(str, Enum):
    LABELS = "labels"
    LOGITS = "logits"


class PredictRequest(BaseModel):
    model_config = ConfigDict(allow_inf_nan=False, extra="forbid")

    inputs: List[List[float]] = Field(min_length=1)
    mode: Mode = Mode.LABELS

    @field_validator("inputs")
    @classmethod
    def _uniform_width(cls, rows):
        width = len(rows[0])
        if width == 0:
            raise ValueError("input vectors must be non-empty")
        for i, row in enumerate(rows):
            if len(row) != width:
                raise ValueError(f"input {i} has length {len(row)}, expected {width}")
        return rows


class PredictResponse(BaseModel):
    labels: List[int]
    logits: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.logits is not None and len(self.logits) != len(self.labels):
            raise ValueError("logits and labels disagree on row count")
        return self


class ErrorBody(BaseModel):
    code: str
    message: str


class ErrorResponse(BaseModel):
    error: ErrorBody


class ModelInfo(BaseModel):
    layer_dims: List[int]
    num_classes: int
    input_dim: int
