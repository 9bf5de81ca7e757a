"""Metrics records, the line-per-record log format, the uninformed
mean-predictor reference, and failure-mode diagnosis.

The two failure taxonomy entries are operational definitions over the logged
mask coverage and reconstruction quality: type1 means the distractor model
took over reconstruction and the policy stayed at random-level returns; type2
means the task model took over and the distractor captures nothing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .config import NLL_FLOOR


class MetricsError(Exception):
    pass


@dataclass
class MetricsRecord:
    env_step: int
    variant: str
    episodic_return: float
    j_oj: float
    j_os: float
    j_r: float
    j_radv: float
    j_d: float
    j_ds: float
    j_inv: float
    total_task: float
    total_distractor: float
    task_reward_nll: float
    distractor_reward_nll: float | None
    mean_predictor_nll: float
    mask_coverage: float | None
    distractor_image_nll: float | None
    wall_time: float


RECORD_FIELDS = tuple(f.name for f in fields(MetricsRecord))


def append_record(path: str | Path, record: MetricsRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def load_metrics(path: str | Path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.is_file():
        raise MetricsError(f"metrics log not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            if set(data) != set(RECORD_FIELDS):
                raise MetricsError(f"{path}:{line_no}: record fields do not match the schema")
            records.append(MetricsRecord(**data))
    return records


def mean_predictor_nll(reward_history) -> float:
    """Average NLL of each reward scored against the running mean of all
    rewards before it (zero before any data), under a unit-variance Gaussian.

    This is the uninformed predictor every informed reward head should beat;
    its value can never drop below the per-element floor of ~0.9189.
    """
    rewards = np.asarray(reward_history, dtype=np.float64).reshape(-1)
    if rewards.size == 0:
        raise MetricsError("empty reward history")
    running_sum = np.concatenate([[0.0], np.cumsum(rewards)[:-1]])
    counts = np.arange(rewards.size, dtype=np.float64)
    means = np.divide(running_sum, counts, out=np.zeros_like(running_sum), where=counts > 0)
    nll = NLL_FLOOR + 0.5 * (rewards - means) ** 2
    return float(nll.mean())


def nll_against_mean(rewards, historical_mean: float) -> float:
    """NLL of a reward batch under the running historical mean; the logged
    mean-predictor curve."""
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if rewards.size == 0:
        raise MetricsError("empty reward history")
    return float((NLL_FLOOR + 0.5 * (rewards - historical_mean) ** 2).mean())


@dataclass
class DiagnosisReport:
    failure_flag: str  # none | type1 | type2
    evidence: dict
    remediation: str


REMEDIATION = {
    "none": "",
    "type1": (
        "Distractor model is taking over reconstruction: increase lambda_radv "
        "to dissociate it from reward, or decrease lambda_os."
    ),
    "type2": (
        "Task model is taking over reconstruction and the distractor captures "
        "nothing: increase lambda_os so the distractor learns more features."
    ),
}


def diagnose(records: list[MetricsRecord], window: int, *, mask_low: float = 0.05,
             mask_high: float = 0.95, nll_margin: float = 0.05,
             prefill_records: int = 5, band_sigma: float = 3.0) -> DiagnosisReport:
    """Classify the trailing `window` records of a training log.

    The random-policy band comes from the first `prefill_records` entries,
    which the trainer emits from random-action episodes before learning
    starts. Only logs from the two-model variant carry the mask statistics
    this taxonomy is defined over; anything else diagnoses as none.
    """
    if window < 5:
        raise MetricsError(f"window too short: need >= 5 records, got {window}")
    if window > len(records):
        raise MetricsError(f"window of {window} exceeds log length {len(records)}")
    tail = records[-window:]
    if any(r.mask_coverage is None for r in tail):
        return DiagnosisReport("none", {"reason": "log has no mask statistics"}, REMEDIATION["none"])

    coverage = float(np.mean([r.mask_coverage for r in tail]))
    returns = float(np.mean([r.episodic_return for r in tail]))
    solo_nll = float(np.mean([r.distractor_image_nll for r in tail]))

    prefill = records[: min(prefill_records, len(records))]
    band_mean = float(np.mean([r.episodic_return for r in prefill]))
    band_std = float(np.std([r.episodic_return for r in prefill]))
    band_high = band_mean + band_sigma * band_std

    evidence = {
        "window": window,
        "mean_mask_coverage": coverage,
        "mean_episodic_return": returns,
        "mean_distractor_image_nll": solo_nll,
        "random_band_mean": band_mean,
        "random_band_high": band_high,
    }
    if coverage < mask_low and returns <= band_high:
        return DiagnosisReport("type1", evidence, REMEDIATION["type1"])
    if coverage > mask_high and solo_nll > NLL_FLOOR + nll_margin:
        return DiagnosisReport("type2", evidence, REMEDIATION["type2"])
    return DiagnosisReport("none", evidence, REMEDIATION["none"])
