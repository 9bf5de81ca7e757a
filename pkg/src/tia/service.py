"""HTTP service wrapping the core package for long-running training jobs.

Training runs take minutes to hours, so the service manages them as
background jobs: POST /train starts one, /jobs/{id} and /jobs/{id}/metrics
poll progress, and the remaining endpoints expose evaluation, diagnosis,
rendering and plotting over checkpoints and logs on the server's filesystem.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import asdict
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import report
from .checkpoint import CheckpointError
from .config import ConfigError, config_from_flat_dict
from .env import EnvConfig, EnvError
from .metrics import MetricsError, diagnose, load_metrics
from .trainer import DivergenceError, TrainerError, evaluate, train


class TrainRequest(BaseModel):
    config: dict = Field(default_factory=dict, description="flat config mapping, same keys as the config file")
    out_dir: str | None = None


class JobStatus(BaseModel):
    job_id: str
    state: str  # queued | running | done | failed | diverged
    env_step: int
    n_records: int
    out_dir: str | None
    error: str | None = None


class MetricsResponse(BaseModel):
    job_id: str
    records: list[dict]


class EvalRequest(BaseModel):
    checkpoint: str
    episodes: int = 10
    seed: int = 0
    env: dict | None = Field(default=None, description="EnvConfig field overrides, e.g. background_mode")


class EvalResponse(BaseModel):
    episodes: int
    mean_return: float
    std_return: float
    returns: list[float]


class DiagnoseRequest(BaseModel):
    log: str
    window: int = 10


class DiagnoseResponse(BaseModel):
    failure_flag: str
    evidence: dict
    remediation: str


class RenderRequest(BaseModel):
    checkpoint: str
    out_dir: str
    frames: int = 8
    seed: int = 0


class PlotRequest(BaseModel):
    logs: list[str]
    out_dir: str


class FilesResponse(BaseModel):
    files: list[str]


class _Job:
    def __init__(self, job_id: str, out_dir: str | None):
        self.job_id = job_id
        self.state = "queued"
        self.env_step = 0
        self.records: list[dict] = []
        self.out_dir = out_dir
        self.error: str | None = None
        self.lock = threading.Lock()

    def status(self) -> JobStatus:
        with self.lock:
            return JobStatus(
                job_id=self.job_id, state=self.state, env_step=self.env_step,
                n_records=len(self.records), out_dir=self.out_dir, error=self.error,
            )


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, _Job] = {}
        self._lock = threading.Lock()

    def create(self, config, out_dir: str | None) -> _Job:
        job = _Job(uuid.uuid4().hex[:12], out_dir)
        with self._lock:
            self._jobs[job.job_id] = job

        def on_record(record):
            with job.lock:
                job.records.append(asdict(record))
                job.env_step = record.env_step

        def work():
            with job.lock:
                job.state = "running"
            try:
                train(config, out_dir=out_dir, record_callback=on_record)
                with job.lock:
                    job.state = "done"
            except DivergenceError as exc:
                with job.lock:
                    job.state = "diverged"
                    job.error = str(exc)
            except Exception as exc:
                with job.lock:
                    job.state = "failed"
                    job.error = str(exc)

        threading.Thread(target=work, daemon=True).start()
        return job

    def get(self, job_id: str) -> _Job:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        return job

    def all(self) -> list[_Job]:
        with self._lock:
            return list(self._jobs.values())


def create_app() -> FastAPI:
    app = FastAPI(title="tia", description="task-informed abstraction training service")
    registry = JobRegistry()
    app.state.registry = registry

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/train", response_model=JobStatus)
    def start_train(req: TrainRequest) -> JobStatus:
        try:
            config = config_from_flat_dict(req.config)
        except ConfigError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return registry.create(config, req.out_dir).status()

    @app.get("/jobs", response_model=list[JobStatus])
    def list_jobs() -> list[JobStatus]:
        return [job.status() for job in registry.all()]

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job_status(job_id: str) -> JobStatus:
        return registry.get(job_id).status()

    @app.get("/jobs/{job_id}/metrics", response_model=MetricsResponse)
    def job_metrics(job_id: str, since: int = 0) -> MetricsResponse:
        job = registry.get(job_id)
        with job.lock:
            records = job.records[since:]
        return MetricsResponse(job_id=job_id, records=records)

    @app.post("/eval", response_model=EvalResponse)
    def run_eval(req: EvalRequest) -> EvalResponse:
        try:
            env_config = None
            if req.env is not None:
                from .trainer import _as_checkpoint

                base = asdict(_as_checkpoint(req.checkpoint).config.env)
                base.update(req.env)
                env_config = EnvConfig(**base)
            result = evaluate(req.checkpoint, env_config=env_config,
                              episodes=req.episodes, seed=req.seed)
        except (TrainerError, CheckpointError, EnvError, TypeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return EvalResponse(**result)

    @app.post("/diagnose", response_model=DiagnoseResponse)
    def run_diagnose(req: DiagnoseRequest) -> DiagnoseResponse:
        try:
            result = diagnose(load_metrics(req.log), req.window)
        except MetricsError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return DiagnoseResponse(failure_flag=result.failure_flag,
                                evidence=result.evidence, remediation=result.remediation)

    @app.post("/render", response_model=FilesResponse)
    def run_render(req: RenderRequest) -> FilesResponse:
        try:
            paths = report.render_report(req.checkpoint, req.out_dir,
                                         n_frames=req.frames, seed=req.seed)
        except (TrainerError, CheckpointError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return FilesResponse(files=[str(p) for p in paths])

    @app.post("/plot", response_model=FilesResponse)
    def run_plot(req: PlotRequest) -> FilesResponse:
        try:
            summary = report.plot(req.logs, req.out_dir)
        except MetricsError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        files = [str(summary["returns_plot"])]
        if summary.get("dissociation_plot"):
            files.append(str(summary["dissociation_plot"]))
        return FilesResponse(files=files)

    return app


app = create_app()
