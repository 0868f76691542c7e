"""Co-occurrence batch sampling and the two-stage training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .model import ModelParams, anchor_matrix, pool_images, project_anchors, save_checkpoint, visual_forward
from .objectives import EmbeddingBatch, LossConfig, loss_parts, total_loss
from .synthgen import Dataset

log = logging.getLogger(__name__)


class SamplerError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int | None = None  # None -> min(2 * C, len(split))
    min_instances_per_class: int = 2
    language_balance: bool = True
    seed: int = 0

    def resolve(self, dataset: Dataset) -> int:
        n = self.batch_size
        if n is None:
            n = min(2 * dataset.lexicon.num_classes, len(dataset))
        if n < 2:
            raise SamplerError(f"batch size {n} below 2")
        if n > len(dataset):
            raise SamplerError(f"batch size {n} exceeds the {len(dataset)} available samples")
        if self.min_instances_per_class < 1:
            raise SamplerError("min_instances_per_class must be positive")
        if n < self.min_instances_per_class:
            raise SamplerError(f"batch size {n} cannot hold {self.min_instances_per_class} instances of one class")
        return n


@dataclass(frozen=True)
class StageConfig:
    stage: str = "pretrain"
    lr: float = 1e-4
    epochs: int = 20
    split: str = "train"
    loss: LossConfig = field(default_factory=LossConfig)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


class BatchSampler:
    """Draws class-aligned batches with rotating languages.

    ``floor(N / m)`` distinct classes are drawn (at most ``C``), each with
    ``m`` instances.  Instance languages follow one rotation across the whole
    batch, so consecutive instances of a class come from different scripts
    and the per-language totals stay within one of each other.  Any slots
    left over are filled with unused samples of the chosen classes.
    """

    def __init__(self, dataset: Dataset, cfg: SamplerConfig, rng: np.random.Generator | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.batch_size = cfg.resolve(dataset)
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.languages = list(dataset.lexicon.languages)
        self.pools: dict[tuple[int, str], np.ndarray] = {}
        by_key: dict[tuple[int, str], list[int]] = {}
        for i, s in enumerate(dataset.samples):
            by_key.setdefault((s.semantic_id, s.language), []).append(i)
        self.pools = {k: np.array(v) for k, v in by_key.items()}
        per_class: dict[int, int] = {}
        for (y, _), idx in self.pools.items():
            per_class[y] = per_class.get(y, 0) + len(idx)
        m = cfg.min_instances_per_class
        self.classes = np.array(sorted(y for y, c in per_class.items() if c >= m))
        n_cls = min(self.batch_size // m, len(self.classes))
        if n_cls == 0:
            raise SamplerError(f"no class has the {m} instances a batch requires")
        self.n_classes = n_cls

    def __call__(self) -> np.ndarray:
        m = self.cfg.min_instances_per_class
        rng = self.rng
        classes = rng.choice(self.classes, size=self.n_classes, replace=False)
        used: set[int] = set()
        batch: list[int] = []
        offset = int(rng.integers(len(self.languages)))
        slot = 0
        for y in classes:
            for _ in range(m):
                if self.cfg.language_balance:
                    order = [self.languages[(offset + slot + k) % len(self.languages)]
                             for k in range(len(self.languages))]
                else:
                    order = list(rng.permutation(self.languages))
                idx = self._draw(int(y), order, used)
                if idx is None:
                    raise SamplerError(f"class {y} ran out of unused samples")
                used.add(idx)
                batch.append(idx)
                slot += 1
        remaining = self.batch_size - len(batch)
        if remaining:
            # top up with extra instances of the chosen classes; a new class would arrive alone
            chosen = set(int(y) for y in classes)
            free = np.array([i for (y, _), pool in sorted(self.pools.items()) if y in chosen
                             for i in pool if i not in used], dtype=np.int64)
            if len(free) < remaining:
                raise SamplerError(f"chosen classes have only {len(free)} spare samples for {remaining} slots")
            batch.extend(int(i) for i in rng.choice(free, size=remaining, replace=False))
        return np.array(batch, dtype=np.int64)

    def _draw(self, y: int, language_order: list[str], used: set[int]) -> int | None:
        for lang in language_order:
            pool = self.pools.get((y, lang))
            if pool is None:
                continue
            free = [i for i in pool if i not in used]
            if free:
                return int(free[int(self.rng.integers(len(free)))])
        return None


def make_batch(dataset: Dataset, cfg: SamplerConfig, rng: np.random.Generator) -> list:
    """One batch of samples (see :class:`BatchSampler`)."""
    idx = BatchSampler(dataset, cfg, rng)()
    return [dataset.samples[i] for i in idx]


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def append_step(self, rec: dict) -> None:
        if self.steps and rec["step"] <= self.steps[-1]["step"]:
            raise TrainingError("history step counter must increase")
        bad = [k for k, v in rec.items() if isinstance(v, float) and not math.isfinite(v)]
        if bad:
            raise TrainingError(f"non-finite values {bad} at step {rec['step']}")
        self.steps.append(rec)

    def extend(self, other: "TrainHistory") -> None:
        self.steps.extend(other.steps)
        self.evals.extend(other.evals)

    def write(self, path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"kind": "eval", **rec}, sort_keys=True) + "\n")


class _Encoded:
    """Per-split caches: pooled pixels and frozen anchors never change during training."""

    def __init__(self, dataset: Dataset, params: ModelParams):
        cfg = params.config
        self.pooled = pool_images(dataset.images(), cfg)
        self.labels = dataset.labels()
        self.languages = dataset.languages()
        pairs = sorted({(s.semantic_id, s.language) for s in dataset.samples})
        anchors = anchor_matrix(pairs, cfg.anchor, dataset.lexicon.languages)
        row = {p: i for i, p in enumerate(pairs)}
        self.anchors = anchors[[row[(s.semantic_id, s.language)] for s in dataset.samples]]


def train_stage(params: ModelParams, dataset: Dataset, stage: StageConfig, sampler_cfg: SamplerConfig,
                step_offset: int = 0,
                on_epoch: Callable[[ModelParams, int], dict] | None = None) -> tuple[ModelParams, TrainHistory]:
    """Run ``epochs * floor(|split| / N)`` AdamW steps on ``dataset.split(stage.split)``.

    ``params`` is updated in place and also returned.
    """
    data = dataset.split(stage.split)
    if len(data) == 0:
        raise TrainingError(f"split {stage.split!r} is empty")
    sampler = BatchSampler(data, sampler_cfg, np.random.default_rng([sampler_cfg.seed, hash_stage(stage.stage)]))
    n = sampler.batch_size
    steps_per_epoch = len(data) // n
    cache = _Encoded(data, params)
    opt = nc.AdamW(params.trainable(), lr=stage.lr, betas=stage.betas, eps=stage.eps,
                   weight_decay=stage.weight_decay)
    tau_node = params["log_temperature"]
    history = TrainHistory()
    step = step_offset
    for epoch in range(stage.epochs):
        for _ in range(steps_per_epoch):
            idx = sampler()
            opt.zero_grad()
            try:
                V = visual_forward(cache.pooled[idx], params)
                Z = project_anchors(cache.anchors[idx], params)
            except nc.DegenerateVectorError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            batch = EmbeddingBatch(V, Z, cache.labels[idx])
            loss = total_loss(batch, stage.loss, nc.exp(tau_node))
            nc.backward(loss)
            opt.step()
            params.clamp_temperature()
            parts = loss_parts(batch, stage.loss, params.tau)
            history.append_step({"step": step, "stage": stage.stage, "epoch": epoch,
                                 "loss": loss.item(), "itc": parts["itc"], "inv": parts["inv"],
                                 "tau": params.tau})
            step += 1
        if on_epoch is not None:
            snap = on_epoch(params, epoch)
            if snap:
                history.evals.append({"stage": stage.stage, "epoch": epoch, **snap})
    return params, history


def hash_stage(name: str) -> int:
    return sum(ord(c) * 31 ** i for i, c in enumerate(name)) % (2 ** 31)


@dataclass(frozen=True)
class Ablation:
    v2t: bool = True
    t2v: bool = True
    inv: bool = True
    finetune: bool = True

    def loss_config(self, lam: float, eps: float) -> LossConfig:
        if not (self.v2t or self.t2v or self.inv):
            raise ValueError("ablation disables every loss term")
        return LossConfig(lam=lam, eps=eps, use_v2t=self.v2t, use_t2v=self.t2v, use_inv=self.inv)

    def label(self) -> str:
        parts = [n for n, on in (("V2T", self.v2t), ("T2V", self.t2v), ("INV", self.inv)) if on]
        return "+".join(parts) + ("/FT" if self.finetune else "")


def run_two_stage(params: ModelParams, dataset: Dataset, pretrain: StageConfig, finetune: StageConfig,
                  sampler_cfg: SamplerConfig, ablation: Ablation = Ablation(), run_dir=None,
                  on_epoch=None) -> tuple[ModelParams, TrainHistory, list[Path]]:
    """Stage 1 on the clean split, then (unless ablated) stage 2 on the fine-tuning split.

    Loss switches from ``ablation`` override both stage configs.  With a
    ``run_dir`` a checkpoint is written after each stage and the step log
    goes to ``history.log``.
    """
    history = TrainHistory()
    checkpoints: list[Path] = []
    run_dir = Path(run_dir) if run_dir is not None else None
    stages = [("stage1", pretrain)]
    if ablation.finetune:
        stages.append(("stage2", finetune))
    for tag, stage in stages:
        stage = StageConfig(**{**_stage_fields(stage),
                               "loss": ablation.loss_config(stage.loss.lam, stage.loss.eps)})
        log.info("%s: %s, lr=%g, epochs=%d, split=%s", tag, ablation.label(), stage.lr, stage.epochs, stage.split)
        params, h = train_stage(params, dataset, stage, sampler_cfg,
                                step_offset=len(history.steps), on_epoch=on_epoch)
        history.extend(h)
        if run_dir is not None:
            ckpt = run_dir / f"{tag}.ckpt"
            save_checkpoint(params, ckpt, extra={"stage": stage.stage, "ablation": asdict(ablation)})
            checkpoints.append(ckpt)
    if run_dir is not None:
        history.write(run_dir / "history.log")
    return params, history, checkpoints


def _stage_fields(stage: StageConfig) -> dict:
    return {k: getattr(stage, k) for k in StageConfig.__dataclass_fields__}
