"""HTTP front for a diffusion prior, speaking the ``/denoise`` protocol.

Wraps any in-process prior (e.g. :class:`~trisplat.priors.MockPrior`) so the
trainer's :class:`~trisplat.priors.RemotePrior` can be exercised end to end.
A production server would put a real latent-diffusion model behind the same
routes.
"""

from __future__ import annotations

import logging

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import files
from .errors import InvalidArgument, PriorError
from .priors import DeltaPose, PriorQuery

log = logging.getLogger(__name__)


class DeltaPoseModel(BaseModel):
    d_azimuth: float
    d_elevation: float
    d_radius: float = 0.0


class DenoiseRequest(BaseModel):
    images: list[str] = Field(min_length=3, max_length=3, description="three base64 PNG renders")
    condition: str = Field(description="base64 PNG of the input view")
    t: int = Field(ge=0)
    delta_pose: DeltaPoseModel
    seed: int


class DenoiseResponse(BaseModel):
    noise_estimates: list[str]


class HealthResponse(BaseModel):
    status: str
    max_timestep: int


def decode_request(req: DenoiseRequest, alphas_cumprod=None) -> PriorQuery:
    """Wire request -> internal query (undoes the elevation sign flip)."""
    images = [files.unb64_png(s) for s in req.images]
    pose = DeltaPose(req.delta_pose.d_azimuth, -req.delta_pose.d_elevation, req.delta_pose.d_radius)
    kwargs = {} if alphas_cumprod is None else {"alphas_cumprod": alphas_cumprod}
    return PriorQuery(images, files.unb64_png(req.condition), req.t, pose, req.seed, **kwargs)


def create_app(prior) -> FastAPI:
    app = FastAPI(title="trisplat prior")
    schedule = getattr(prior, "alphas_cumprod", None)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", max_timestep=int(prior.max_timestep))

    @app.post("/denoise", response_model=DenoiseResponse)
    def denoise(req: DenoiseRequest):
        try:
            query = decode_request(req, schedule)
            response = prior.predict_noise(query)
        except InvalidArgument as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except PriorError as exc:
            log.warning("prior failed: %s", exc)
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        return DenoiseResponse(
            noise_estimates=[files.encode_tensor(np.asarray(e, dtype=np.float32)) for e in response.noise_estimates]
        )

    return app
