"""Request and response bodies for the HTTP endpoints.

Configs travel as full ExperimentConfig objects, so the service rejects a bad
config at request-parse time with a field-path error. Responses carry plain
row dicts; the CLI turns them into files without recomputing anything.
"""

from __future__ import annotations

from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from ..config import ExperimentConfig


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    seed: Optional[int] = None


class RunResponse(BaseModel):
    report: dict
    losses: list[dict]
    versions: list[dict]


class CompareRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    configs: list[ExperimentConfig] = Field(min_length=2)


class CompareResponse(BaseModel):
    rows: list[dict]


class TimelineRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig


class TimelineResponse(BaseModel):
    timeline: dict
    stats: dict


class SweepRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    axis: str
    values: list[Union[int, float, str]] = Field(min_length=1)
    seeds: Optional[list[int]] = None


class SweepResponse(BaseModel):
    rows: list[dict]
    summary: list[dict]


class HealthResponse(BaseModel):
    status: str
    version: str
    strategies: list[str]
