"""Many-episode evaluation with confidence intervals and the paired
with/without-pseudo-query ablation.

Episode i is a pure function of (master_seed, i): its stream seeds the
sampler and the augmenter, and every arm re-derives the same stream, so
the two ablation arms see bit-identical episodes and reports do not
depend on worker count or scheduling. Aggregation is a single-threaded
reduction in episode-index order.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .episodes import LabeledDataset, PqsPolicy, build_pseudo_query, sample_episode
from .errors import ParameterError
from .fewshot import Backbone, finetune, infer, pristine_state
from .imageaug import AugmentationConfig
from .losses import HyperParams
from .rng import RngStream

MODES = ("with_pqs", "no_finetune")
DESK_SCALE_EPISODES = 100

REPORT_KEYS = (
    "fingerprint",
    "mode",
    "n_way",
    "k_shot",
    "episodes",
    "mean",
    "ci95",
    "accuracies",
    "wall_seconds",
)


@dataclass(frozen=True)
class EpisodeShape:
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 15


@dataclass
class EvalReport:
    fingerprint: str
    mode: str
    n_way: int
    k_shot: int
    m_query: int
    episodes: int
    accuracies: list[float]
    mean: float
    ci95: float
    wall_seconds: float

    def to_json(self, include_timing: bool = False) -> str:
        """Canonical machine-readable form; timing is opt-in because wall
        time would break byte-for-byte report determinism."""
        payload = {
            "fingerprint": self.fingerprint,
            "mode": self.mode,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "episodes": self.episodes,
            "mean": self.mean,
            "ci95": self.ci95,
            "accuracies": self.accuracies,
            "wall_seconds": self.wall_seconds if include_timing else None,
        }
        return json.dumps(payload, indent=2) + "\n"

    def to_table(self) -> str:
        lines = [
            f"mode: {self.mode}",
            f"episode shape: {self.n_way}-way {self.k_shot}-shot, {self.m_query} queries/class",
            f"episodes: {self.episodes}",
            f"accuracy: {100.0 * self.mean:.2f}" + "±" + f"{100.0 * self.ci95:.2f}",
            f"wall_seconds: {self.wall_seconds:.2f}",
            f"fingerprint: {self.fingerprint}",
        ]
        return "\n".join(lines) + "\n"


def mean_and_ci95(values: list[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width 1.96*sd/sqrt(T)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("no values to aggregate")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size))


def config_fingerprint(
    hp: HyperParams,
    shape: EpisodeShape,
    mode: str,
    master_seed: int,
    episodes: int,
    dataset: LabeledDataset,
) -> str:
    payload = {
        "hp": asdict(hp),
        "shape": asdict(shape),
        "mode": mode,
        "master_seed": master_seed,
        "episodes": episodes,
        "dataset": dataset.fingerprint(),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def run_episode(
    bk: Backbone,
    dataset: LabeledDataset,
    hp: HyperParams,
    shape: EpisodeShape,
    mode: str,
    master_seed: int,
    index: int,
    policy: PqsPolicy | None = None,
    aug: AugmentationConfig | None = None,
) -> float:
    """Accuracy of one episode; pure in (master_seed, index)."""
    stream = RngStream(master_seed, (index,))
    ep = sample_episode(dataset, shape.n_way, shape.k_shot, shape.m_query, stream.child(0))
    if mode == "with_pqs":
        build_pseudo_query(ep, policy, aug, stream.child(1))
        state = finetune(bk, ep, hp)
    else:
        state = pristine_state(bk)
    return infer(state, ep, hp)


_WORKER: dict = {}


def _init_worker(snapshot: bytes, dataset, hp, shape, mode, master_seed, policy, aug):
    _WORKER.update(
        backbone=Backbone.from_bytes(snapshot),
        dataset=dataset,
        hp=hp,
        shape=shape,
        mode=mode,
        master_seed=master_seed,
        policy=policy,
        aug=aug,
    )


def _worker_episode(index: int) -> float:
    w = _WORKER
    return run_episode(
        w["backbone"], w["dataset"], w["hp"], w["shape"], w["mode"],
        w["master_seed"], index, w["policy"], w["aug"],
    )


def run_eval(
    bk: Backbone,
    target: LabeledDataset,
    hp: HyperParams,
    mode: str,
    master_seed: int,
    shape: EpisodeShape | None = None,
    episodes: int | None = None,
    workers: int = 1,
    policy: PqsPolicy | None = None,
    aug: AugmentationConfig | None = None,
) -> EvalReport:
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    if workers < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    shape = shape or EpisodeShape()
    count = episodes if episodes is not None else hp.episodes_count

    start = time.monotonic()
    if workers == 1:
        accuracies = [
            run_episode(bk, target, hp, shape, mode, master_seed, i, policy, aug)
            for i in range(count)
        ]
    else:
        init_args = (bk.to_bytes(), target, hp, shape, mode, master_seed, policy, aug)
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=init_args) as pool:
            accuracies = list(pool.map(_worker_episode, range(count)))
    wall = time.monotonic() - start

    mean, ci95 = mean_and_ci95(accuracies)
    return EvalReport(
        fingerprint=config_fingerprint(hp, shape, mode, master_seed, count, target),
        mode=mode,
        n_way=shape.n_way,
        k_shot=shape.k_shot,
        m_query=shape.m_query,
        episodes=count,
        accuracies=[float(a) for a in accuracies],
        mean=mean,
        ci95=ci95,
        wall_seconds=wall,
    )


@dataclass
class AblationResult:
    with_pqs: EvalReport
    no_finetune: EvalReport
    delta_mean: float
    delta_ci95: float

    def to_json(self) -> str:
        payload = {
            "with_pqs": {"mean": self.with_pqs.mean, "ci95": self.with_pqs.ci95},
            "no_finetune": {"mean": self.no_finetune.mean, "ci95": self.no_finetune.ci95},
            "paired_delta_mean": self.delta_mean,
            "paired_delta_ci95": self.delta_ci95,
            "episodes": self.with_pqs.episodes,
        }
        return json.dumps(payload, indent=2) + "\n"

    def to_table(self) -> str:
        lines = [
            f"with_pqs:    {100.0 * self.with_pqs.mean:.2f}" + "±" + f"{100.0 * self.with_pqs.ci95:.2f}",
            f"no_finetune: {100.0 * self.no_finetune.mean:.2f}" + "±" + f"{100.0 * self.no_finetune.ci95:.2f}",
            f"paired delta: {100.0 * self.delta_mean:.2f}" + "±" + f"{100.0 * self.delta_ci95:.2f}",
            f"episodes: {self.with_pqs.episodes} (matched pairs)",
        ]
        return "\n".join(lines) + "\n"


def ablate(
    bk: Backbone,
    target: LabeledDataset,
    hp: HyperParams,
    master_seed: int,
    shape: EpisodeShape | None = None,
    episodes: int | None = None,
    workers: int = 1,
    policy: PqsPolicy | None = None,
    aug: AugmentationConfig | None = None,
) -> AblationResult:
    """Both modes on identical episode streams; paired difference CI."""
    count = episodes if episodes is not None else DESK_SCALE_EPISODES
    with_r = run_eval(bk, target, hp, "with_pqs", master_seed, shape, count, workers, policy, aug)
    without_r = run_eval(bk, target, hp, "no_finetune", master_seed, shape, count, workers, policy, aug)
    deltas = [a - b for a, b in zip(with_r.accuracies, without_r.accuracies)]
    delta_mean, delta_ci = mean_and_ci95(deltas)
    return AblationResult(with_r, without_r, delta_mean, delta_ci)


def emit_report(
    report: EvalReport | AblationResult,
    fmt: str,
    path: str | Path,
    include_timing: bool = False,
) -> Path:
    path = Path(path)
    if fmt == "table":
        text = report.to_table()
    elif fmt == "json":
        if isinstance(report, EvalReport):
            text = report.to_json(include_timing=include_timing)
        else:
            text = report.to_json()
    else:
        raise ParameterError(f"format must be 'table' or 'json', got {fmt!r}")
    path.write_text(text)
    return path
