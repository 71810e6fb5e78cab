"""HTTP reward service for external RL trainers.

Endpoints::

    POST /v1/reward        {"response", "gold", "mode"} -> RewardBreakdown
    POST /v1/reward/batch  {"responses": [...], "golds": [...], "mode" | "modes"}
                           -> {"results": [RewardBreakdown, ...]}
    GET  /healthz
"""

from __future__ import annotations

import threading
import time
from typing import Literal

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from pydantic import BaseModel

from .rewards import MatchConfig, RewardBreakdown, total_reward
from .types import LabelSchema

Mode = Literal["reasoning", "direct"]


class RewardRequest(BaseModel):
    response: str
    gold: str
    mode: Mode


class BatchRewardRequest(BaseModel):
    responses: list[str]
    golds: list[str]
    mode: Mode | None = None
    modes: list[Mode] | None = None


def _json(body: str) -> Response:
    return Response(content=body, media_type="application/json")


def create_app(schema: LabelSchema | None = None, match: MatchConfig = MatchConfig()) -> FastAPI:
    app = FastAPI(title="promptgrid reward service")

    def score(response: str, gold: str, mode: str) -> RewardBreakdown:
        try:
            return total_reward(response, gold, mode, schema, match)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.get("/healthz")
    def healthz() -> dict[str, str]:
        return {"status": "ok"}

    @app.post("/v1/reward")
    def reward(req: RewardRequest) -> Response:
        return _json(score(req.response, req.gold, req.mode).to_json())

    @app.post("/v1/reward/batch")
    def reward_batch(req: BatchRewardRequest) -> Response:
        n = len(req.responses)
        if len(req.golds) != n:
            raise HTTPException(422, "responses and golds differ in length")
        if req.modes is not None:
            if len(req.modes) != n:
                raise HTTPException(422, "modes and responses differ in length")
            modes = list(req.modes)
        elif req.mode is not None:
            modes = [req.mode] * n
        else:
            raise HTTPException(422, "give either mode or modes")
        parts = [score(r, g, m).to_json() for r, g, m in zip(req.responses, req.golds, modes)]
        return _json('{"results":[' + ",".join(parts) + "]}")

    return app


def serve(
    host: str = "127.0.0.1",
    port: int = 8000,
    schema: LabelSchema | None = None,
    match: MatchConfig = MatchConfig(),
) -> None:
    uvicorn.run(create_app(schema, match), host=host, port=port, log_level="warning")


class BackgroundServer:
    """Run the service on a daemon thread; used by tests and scripts."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        schema: LabelSchema | None = None,
        match: MatchConfig = MatchConfig(),
    ):
        config = uvicorn.Config(
            create_app(schema, match), host=host, port=port, log_level="warning"
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def url(self) -> str:
        sock = self.server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        return f"http://{host}:{port}"

    def start(self, timeout: float = 10.0) -> "BackgroundServer":
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if time.monotonic() > deadline or not self.thread.is_alive():
                raise RuntimeError("reward server failed to start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=5)

    def __enter__(self) -> "BackgroundServer":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()
