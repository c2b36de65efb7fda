"""Two-stage train / refine / evaluate workflow shared by the CLI and the ablation."""

from __future__ import annotations

import json
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acd import AcdConfig, InstanceSet, StabParams, acd_train, build_instances, predict_logits, predict_summaries, softmax_np
from .ccd import CcdConfig, DenoiserParams, PredictionRecord, ccd_train, predict_with_confidence, prior_from_logits
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import DatasetInfo, FrameRecord, load_dataset, load_manifest
from .errors import ConfigurationError, MissingDependencyError
from .metrics import (
    confidence_csv,
    confidence_instances,
    confidence_report,
    map_suite,
    metrics_csv,
    per_class_ap,
    summarize,
)
from .synthetic import SyntheticSpec, generate_frames

ACD_CKPT = "acd.ckpt"
CCD_CKPT = "ccd.ckpt"


def split(frames: Sequence[FrameRecord], name: str) -> list[FrameRecord]:
    return [f for f in frames if f.split == name]


def load_run_data(cfg: RunConfig) -> tuple[list[FrameRecord], DatasetInfo]:
    try:
        info = load_manifest(cfg.dataset)
        frames = load_dataset(cfg.dataset)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"dataset {cfg.dataset}: {exc}") from None
    if info is None or not frames:
        raise ConfigurationError(f"dataset {cfg.dataset} holds no frames")
    return frames, info


def _loss_csv(curve: Sequence[float]) -> str:
    return "epoch,loss\n" + "".join(f"{i + 1},{v:.17g}\n" for i, v in enumerate(curve))


def _write_meta(out: Path, stage: str, cfg: RunConfig) -> None:
    meta = {"stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed, "config": cfg.to_dict()}
    (out / f"run_meta_{stage}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise MissingDependencyError(f"{what} checkpoint not found at {path}")
    return path


def load_acd(out: Path) -> StabParams:
    return StabParams.from_state(load_checkpoint(_require(out / ACD_CKPT, "detector")))


def load_ccd(out: Path) -> DenoiserParams:
    return DenoiserParams.from_state(load_checkpoint(_require(out / CCD_CKPT, "diffusion")))


# -- stage helpers (in memory) ----------------------------------------------------


def fit_ccd(train: InstanceSet, acd: StabParams, K: int, cfg: CcdConfig, log=None) -> tuple[DenoiserParams, list[float]]:
    """Train the denoiser on the frozen detector's summaries and priors."""
    train = train.subset(np.flatnonzero(train.labels >= 0))
    f = prior_from_logits(predict_logits(train, acd))
    return ccd_train(predict_summaries(train, acd), f, train.labels, K, cfg, log=log)


def acd_predictions(test: InstanceSet, acd: StabParams) -> list[dict]:
    probs = softmax_np(predict_logits(test, acd))
    return [
        {"video_id": m["video_id"], "t": m["t"], "box": list(m["box"]), "scores": [float(v) for v in p], "source": "acd"}
        for m, p in zip(test.meta, probs)
    ]


def ccd_predictions(test: InstanceSet, acd: StabParams, denoiser: DenoiserParams, cfg: CcdConfig) -> list[PredictionRecord]:
    f = prior_from_logits(predict_logits(test, acd))
    return predict_with_confidence(predict_summaries(test, acd), f, denoiser, cfg.schedule(), N=cfg.N,
                                   seed=cfg.seed, meta=test.meta, acd_scores=f, rule=cfg.refine)


def _dump_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_json() if hasattr(r, "to_json") else r, sort_keys=True) + "\n")


def read_predictions(path: str | os.PathLike) -> list[dict]:
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read predictions {path}: {exc}") from None


# -- CLI stages -------------------------------------------------------------------


def _log(msg: str) -> None:
    print(msg, flush=True)


def train_stage(cfg: RunConfig, stage: str, log: Callable[[str], None] | None = _log) -> Path:
    frames, info = load_run_data(cfg)
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    train = build_instances(split(frames, "train"), cfg.L, cfg.P)
    if stage == "acd":
        params, curve = acd_train(train, info.K, cfg.acd(), log=log)
        save_checkpoint(out / ACD_CKPT, params.state())
    elif stage == "ccd":
        acd = load_acd(out)
        params, curve = fit_ccd(train, acd, info.K, cfg.ccd(), log=log)
        save_checkpoint(out / CCD_CKPT, params.state())
    else:
        raise ConfigurationError(f"stage must be acd or ccd, got {stage!r}")
    (out / f"{stage}_loss.csv").write_text(_loss_csv(curve))
    _write_meta(out, stage, cfg)
    return out


def _test_instances(cfg: RunConfig, frames) -> InstanceSet:
    return build_instances(split(frames, "test"), cfg.L, cfg.P, labelled=False, threshold=cfg.anchor_threshold)


def eval_stage(cfg: RunConfig, source: str, predictions: str | None = None) -> dict[str, float]:
    """Write predictions_<source>.jsonl, metrics_<source>.csv and (ccd) confidence.csv."""
    if source not in ("acd", "ccd"):
        raise ConfigurationError(f"source must be acd or ccd, got {source!r}")
    frames, info = load_run_data(cfg)
    test_frames = split(frames, "test")
    if not test_frames:
        raise ConfigurationError("dataset has no test split")
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    if predictions is not None:
        preds = read_predictions(predictions)
    else:
        acd = load_acd(out)
        if source == "ccd":
            denoiser = load_ccd(out)
            preds = ccd_predictions(_test_instances(cfg, frames), acd, denoiser, cfg.ccd())
        else:
            preds = acd_predictions(_test_instances(cfg, frames), acd)
        _dump_jsonl(out / f"predictions_{source}.jsonl", preds)
    table = per_class_ap(preds, test_frames, info.K)
    summary = summarize(table)
    (out / f"metrics_{source}.csv").write_text(metrics_csv(table, summary, info.class_names))
    if source == "ccd":
        rows = confidence_report(confidence_instances(preds, test_frames), info.class_names)
        (out / "confidence.csv").write_text(confidence_csv(rows))
    return summary


def confidence_stage(cfg: RunConfig) -> str:
    """Confidence table from the stored refined predictions (computed if absent)."""
    out = cfg.output_path
    path = out / "predictions_ccd.jsonl"
    if not path.is_file():
        eval_stage(cfg, "ccd")
    frames, info = load_run_data(cfg)
    rows = confidence_report(confidence_instances(read_predictions(path), split(frames, "test")), info.class_names)
    text = confidence_csv(rows)
    (out / "confidence.csv").write_text(text)
    return text


# -- ablation -----------------------------------------------------------------------

ABLATION_ROWS = ("backbone", "+temporal", "+spatial", "+STAB", "+CCD")
_MODE_OF = {"backbone": "none", "+temporal": "temporal", "+spatial": "spatial", "+STAB": "both"}


@dataclass
class AblationResult:
    summaries: dict[str, list[dict[str, float]]] = field(default_factory=dict)
    confidence: list = field(default_factory=list)  # ConfidenceInstance over all seeds

    def mean(self, row: str, key: str = "mAPmean") -> float:
        return float(np.mean([s[key] for s in self.summaries[row]]))


def run_ablation(seeds: Sequence[int] = (0, 1, 2), data: SyntheticSpec | None = None,
                 acd_cfg: AcdConfig | None = None, ccd_cfg: CcdConfig | None = None,
                 log: Callable[[str], None] | None = None) -> AblationResult:
    """Train every detector variant and the refinement stage on fresh data per seed."""
    data = data or SyntheticSpec()
    acd_cfg = acd_cfg or AcdConfig()
    ccd_cfg = ccd_cfg or CcdConfig()
    res = AblationResult({r: [] for r in ABLATION_ROWS})
    for seed in seeds:
        frames = generate_frames(replace(data, seed=seed))
        test_frames = split(frames, "test")
        train = build_instances(split(frames, "train"), acd_cfg.L, acd_cfg.P)
        test = build_instances(test_frames, acd_cfg.L, acd_cfg.P, labelled=False)
        for row, mode in _MODE_OF.items():
            params, _ = acd_train(train, data.K, replace(acd_cfg, mode=mode, seed=seed))
            res.summaries[row].append(map_suite(acd_predictions(test, params), test_frames, data.K))
            if log:
                log(f"seed {seed} {row}: {res.summaries[row][-1]['mAPmean']:.4f}")
        cc = replace(ccd_cfg, seed=seed)
        denoiser, _ = fit_ccd(train, params, data.K, cc)
        recs = ccd_predictions(test, params, denoiser, cc)
        res.summaries["+CCD"].append(map_suite(recs, test_frames, data.K))
        res.confidence.extend(confidence_instances(recs, test_frames))
        if log:
            log(f"seed {seed} +CCD: {res.summaries['+CCD'][-1]['mAPmean']:.4f}")
    return res
