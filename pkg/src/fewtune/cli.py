"""Command-line entry point.

Subcommands: `synth` renders a synthetic dataset to PPM files,
`metatrain` trains a backbone episodically and snapshots it, `eval` runs
the episodic evaluation or the paired ablation, and `replay` re-runs a
saved run configuration. Exit codes: 0 success, 2 usage error, 3 data
error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .episodes import PqsPolicy, load_dataset, write_dataset
from .errors import ContractError, DataError, ParameterError
from .evalharness import EpisodeShape, ablate, emit_report, run_eval
from .fewshot import Backbone, BackboneSpec, meta_train
from .losses import HyperParams
from .rng import RngStream
from .synthetic import generate_synthetic, source_domain, target_domain

log = logging.getLogger("fewtune")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run; serialized next to outputs."""

    command: str = "eval"
    out: str = "out"
    seed: int = 0
    workers: int = 1
    data: str | None = None
    snapshot: str | None = None
    mode: str = "with_pqs"
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 15
    episodes: int = 600
    epochs: int = 100
    margin: float = 1.0
    s: float = 30.0
    m: float = 0.35
    lambda_pt: float = 1.0
    lr: float = 3e-4
    momentum: float = 0.9
    transductive: bool = True
    timing: bool = False
    # metatrain extras
    tasks_per_epoch: int = 300
    hidden: tuple[int, ...] = (128, 64)
    embed_dim: int = 32
    # synth extras
    preset: str = "source"
    tag: str | None = None
    classes: int | None = None
    images_per_class: int | None = None
    size: int | None = None
    pattern_offset: int | None = None
    palette_angle: float | None = None
    background: float | None = None
    contrast: float | None = None
    noise_sigma: float | None = None

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            episodes_count=self.episodes,
            finetune_epochs=self.epochs,
            triplet_margin=self.margin,
            lmm_scale=self.s,
            lmm_margin=self.m,
            ptloss_weight=self.lambda_pt,
            learning_rate=self.lr,
            momentum=self.momentum,
            transductive=self.transductive,
        )

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        payload["hidden"] = list(self.hidden)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        data["hidden"] = tuple(data.get("hidden", (128, 64)))
        return cls(**data)


def _hidden_widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad width list {text!r}") from exc


def _add_episode_flags(p: argparse.ArgumentParser):
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--m-query", type=int, default=15)


def _add_hp_flags(p: argparse.ArgumentParser):
    p.add_argument("--episodes", type=int, default=600, help="evaluation episode count")
    p.add_argument("--epochs", type=int, default=100, help="fine-tune epochs per episode")
    p.add_argument("--margin", type=float, default=1.0, help="triplet margin")
    p.add_argument("--s", type=float, default=30.0, help="cosine softmax scale")
    p.add_argument("--m", type=float, default=0.35, help="cosine margin")
    p.add_argument("--lambda-pt", type=float, default=1.0, dest="lambda_pt")
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--transductive", action=argparse.BooleanOptionalAction, default=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewtune")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="render a synthetic dataset as PPM files")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--preset", choices=("source", "target"), default="source")
    p_synth.add_argument("--tag", default=None)
    p_synth.add_argument("--classes", type=int, default=None)
    p_synth.add_argument("--images-per-class", type=int, default=None)
    p_synth.add_argument("--size", type=int, default=None)
    p_synth.add_argument("--pattern-offset", type=int, default=None)
    p_synth.add_argument("--palette-angle", type=float, default=None)
    p_synth.add_argument("--background", type=float, default=None)
    p_synth.add_argument("--contrast", type=float, default=None)
    p_synth.add_argument("--noise-sigma", type=float, default=None)

    p_meta = sub.add_parser("metatrain", help="episodic training, snapshot the backbone")
    p_meta.add_argument("--data", required=True)
    p_meta.add_argument("--out", required=True)
    p_meta.add_argument("--seed", type=int, default=0)
    p_meta.add_argument("--epochs", type=int, default=5)
    p_meta.add_argument("--tasks-per-epoch", type=int, default=300)
    p_meta.add_argument("--lr", type=float, default=0.01)
    p_meta.add_argument("--momentum", type=float, default=0.9)
    p_meta.add_argument("--hidden", type=_hidden_widths, default=(128, 64))
    p_meta.add_argument("--embed-dim", type=int, default=32)
    _add_episode_flags(p_meta)

    p_eval = sub.add_parser("eval", help="episodic evaluation or paired ablation")
    p_eval.add_argument("--snapshot", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--mode", choices=("with_pqs", "no_finetune", "ablate"), default="with_pqs")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--timing", action="store_true", help="include wall time in report.json")
    _add_episode_flags(p_eval)
    _add_hp_flags(p_eval)

    p_replay = sub.add_parser("replay", help="re-run a saved run_config.json")
    p_replay.add_argument("config")
    p_replay.add_argument("--out", default=None, help="override output directory")

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    data = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    return RunConfig(**data)


def cmd_synth(cfg: RunConfig) -> int:
    base = source_domain() if cfg.preset == "source" else target_domain()
    overrides = {
        key_to: getattr(cfg, key_from)
        for key_from, key_to in (
            ("tag", "tag"),
            ("classes", "n_classes"),
            ("images_per_class", "images_per_class"),
            ("size", "image_size"),
            ("pattern_offset", "pattern_offset"),
            ("palette_angle", "palette_angle"),
            ("background", "background"),
            ("contrast", "contrast"),
            ("noise_sigma", "noise_sigma"),
        )
        if getattr(cfg, key_from) is not None
    }
    spec = dataclasses.replace(base, **overrides)
    ds = generate_synthetic(spec, RngStream(cfg.seed))
    out = Path(cfg.out)
    write_dataset(ds, out)
    (out / "run_config.json").write_text(cfg.to_json())
    log.info("wrote %d classes x %d images to %s", spec.n_classes, spec.images_per_class, out)
    return 0


def cmd_metatrain(cfg: RunConfig) -> int:
    ds = load_dataset(cfg.data)
    sample = ds.images_for(ds.classes[0])[0]
    spec = BackboneSpec(
        input_dim=sample.channels * sample.height * sample.width,
        hidden=cfg.hidden,
        embed_dim=cfg.embed_dim,
    )
    bk = Backbone.create(spec, RngStream(cfg.seed, (0,)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    losses: list[float] = []

    def on_epoch(epoch: int, mean_loss: float):
        losses.append(mean_loss)
        log.info("epoch %d mean episodic loss %.4f", epoch, mean_loss)

    trained = meta_train(
        bk,
        ds,
        episodes_per_epoch=cfg.tasks_per_epoch,
        epochs=cfg.epochs,
        rng=RngStream(cfg.seed, (1,)),
        n_way=cfg.n_way,
        k_shot=cfg.k_shot,
        m_query=cfg.m_query,
        learning_rate=cfg.lr,
        momentum=cfg.momentum,
        on_epoch=on_epoch,
    )
    trained.save(out / "backbone.snap")
    (out / "metatrain_log.txt").write_text(
        "".join(f"{i} {loss!r}\n" for i, loss in enumerate(losses))
    )
    (out / "run_config.json").write_text(cfg.to_json())
    log.info("snapshot written to %s", out / "backbone.snap")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    bk = Backbone.load(cfg.snapshot)
    ds = load_dataset(cfg.data)
    hp = cfg.hyperparams()
    shape = EpisodeShape(cfg.n_way, cfg.k_shot, cfg.m_query)
    policy = PqsPolicy()
    if policy.is_fallback(cfg.k_shot):
        rule = policy.rule_for(cfg.n_way, cfg.k_shot)
        log.warning(
            "no sizing rule for k=%d; falling back to %d pseudo images per support sample",
            cfg.k_shot,
            rule.per_support,
        )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.mode == "ablate":
        result = ablate(bk, ds, hp, cfg.seed, shape, cfg.episodes, cfg.workers, policy)
        emit_report(result.with_pqs, "json", out / "report_with_pqs.json", include_timing=cfg.timing)
        emit_report(result.no_finetune, "json", out / "report_no_finetune.json", include_timing=cfg.timing)
        emit_report(result, "json", out / "ablation.json")
        emit_report(result, "table", out / "ablation.txt")
        log.info("paired delta %.4f (ci95 %.4f)", result.delta_mean, result.delta_ci95)
    else:
        report = run_eval(bk, ds, hp, cfg.mode, cfg.seed, shape, cfg.episodes, cfg.workers, policy)
        emit_report(report, "json", out / "report.json", include_timing=cfg.timing)
        emit_report(report, "table", out / "report.txt")
        log.info("accuracy %.4f (ci95 %.4f) over %d episodes", report.mean, report.ci95, report.episodes)
    (out / "run_config.json").write_text(cfg.to_json())
    return 0


def dispatch(cfg: RunConfig) -> int:
    if cfg.command == "synth":
        return cmd_synth(cfg)
    if cfg.command == "metatrain":
        return cmd_metatrain(cfg)
    if cfg.command == "eval":
        return cmd_eval(cfg)
    raise ParameterError(f"unknown command {cfg.command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "replay":
            cfg = RunConfig.from_json(Path(args.config).read_text())
            if args.out is not None:
                cfg = dataclasses.replace(cfg, out=args.out)
        else:
            cfg = _config_from_args(args)
        return dispatch(cfg)
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
