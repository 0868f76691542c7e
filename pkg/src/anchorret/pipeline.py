"""End-to-end steps shared by the command line and the acceptance suite."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evalmetrics import MetricsReport, characterize, pair_cosines, summarize
from .model import ModelParams, anchor_matrix, encode_images, init_params, project_anchors
from .quantsim import calibrate, cost_model, quantized_encode
from .retrieval import cross_pairs, eval_protocol, random_protocol
from .synthgen import Dataset, build_lexicon, generate_dataset, generate_in_memory
from .training import Ablation, TrainHistory, run_two_stage, train_stage

log = logging.getLogger(__name__)

# objective sets in report order; each yields a no-FT and an FT row
ABLATION_GRID = [
    (True, False, False), (True, False, True), (False, True, False), (False, True, True),
    (False, False, True), (True, True, False), (True, True, True),
]


def lexicon_for(cfg: RunConfig):
    return build_lexicon(cfg.lexicon.num_classes, cfg.lexicon.languages, cfg.lexicon.seed)


def generate(cfg: RunConfig, out_dir) -> Path:
    return generate_dataset(lexicon_for(cfg), out_dir, cfg.split_specs(), cfg.data.seed,
                            tuple(cfg.data.canvas))


def dataset_in_memory(cfg: RunConfig) -> Dataset:
    return generate_in_memory(lexicon_for(cfg), cfg.split_specs(), cfg.data.seed, tuple(cfg.data.canvas))


def fresh_params(cfg: RunConfig, seed: int | None = None) -> ModelParams:
    return init_params(cfg.model.init_seed if seed is None else seed, cfg.model_config())


def train(cfg: RunConfig, dataset: Dataset, run_dir=None, ablation: Ablation | None = None,
          seed: int | None = None) -> tuple[ModelParams, TrainHistory, list[Path]]:
    """Initialize and run both stages; ``seed`` (if given) replaces the init and sampler seeds."""
    params = fresh_params(cfg, seed)
    sampler = cfg.sampler_config()
    if seed is not None:
        sampler = type(sampler)(sampler.batch_size, sampler.min_instances_per_class,
                                sampler.language_balance, seed)
    return run_two_stage(params, dataset, cfg.stage_config("pretrain"), cfg.stage_config("finetune"),
                         sampler, ablation or cfg.ablation_flags(), run_dir)


def within_protocols(dataset: Dataset) -> list[str]:
    return [f"within:{l}" for l in dataset.lexicon.languages]


def evaluate(params: ModelParams, split: Dataset, protocols, k: int = 5,
             embeddings: np.ndarray | None = None) -> dict[str, dict]:
    out = {}
    for p in protocols:
        results, _ = eval_protocol(split, p, params, k=k, embeddings=embeddings)
        out[p] = summarize(results)
    return out


def mean_metric(per_protocol: dict[str, dict], key: str = "acc@1", prefix: str = "") -> float:
    vals = [m[key] for name, m in per_protocol.items() if name.startswith(prefix)]
    return float(np.mean(vals))


def random_baseline(params: ModelParams, split: Dataset, protocols, k: int = 5, seed: int = 0) -> dict[str, dict]:
    return {p: summarize(random_protocol(split, p, params, k=k, seed=seed)[0]) for p in protocols}


def split_geometry(params: ModelParams, split: Dataset, embeddings: np.ndarray | None = None) -> dict:
    """R/D statistics of the image embeddings plus positive/negative image-text cosine medians."""
    V = encode_images(split.images(), params) if embeddings is None else embeddings
    labels = split.labels()
    geo = characterize(V, labels).to_json()
    pairs = [(s.semantic_id, s.language) for s in split.samples]
    Z = project_anchors(anchor_matrix(pairs, params.config.anchor), params).value
    pos, neg = pair_cosines(V, Z, labels, labels)
    geo["median_positive_cosine"] = float(np.median(pos))
    geo["median_negative_cosine"] = float(np.median(neg))
    return geo


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def metrics_report(params: ModelParams, dataset: Dataset, split_name: str, protocols, k: int,
                   meta: dict) -> MetricsReport:
    split = dataset.split(split_name)
    report = MetricsReport(evaluate(params, split, protocols, k), split_geometry(params, split),
                           {**meta, "split": split_name, "protocols": list(protocols),
                            "dataset_seed": dataset.seed})
    report.check()
    return report


def cross_report(params: ModelParams, dataset: Dataset, split_name: str, k: int, meta: dict) -> MetricsReport:
    split = dataset.split(split_name)
    protocols = cross_pairs(dataset.lexicon.languages)
    per = evaluate(params, split, protocols, k)
    rand = random_baseline(params, split, protocols, k)
    avg = {key: float(np.mean([per[p][key] for p in protocols])) for key in ("acc@1", "acc@3", "acc@5", "mrr", "nes")}
    avg["n"] = int(sum(per[p]["n"] for p in protocols))
    per["average"] = avg
    for p in protocols:
        per[f"random/{p}"] = rand[p]
    return MetricsReport(per, None, {**meta, "split": split_name, "protocols": protocols,
                                     "dataset_seed": dataset.seed})


@dataclass
class QuantOutcome:
    qmodel: object
    float_metrics: dict
    quant_metrics: dict
    mean_cosine: float
    cost: dict


def quantize_and_compare(params: ModelParams, dataset: Dataset, split_name: str, calibration_size: int,
                         k: int = 5) -> QuantOutcome:
    calib = dataset.split("train").images()[:calibration_size]
    qmodel = calibrate(params, calib)
    split = dataset.split(split_name)
    images = split.images()
    vf = encode_images(images, params)
    vq = quantized_encode(images, qmodel)
    protocols = within_protocols(dataset)
    return QuantOutcome(qmodel, evaluate(params, split, protocols, k),
                        evaluate(params, split, protocols, k, embeddings=vq),
                        float(np.mean(np.sum(vf * vq, axis=1))), cost_model(params.config).to_json())


def run_ablation(cfg: RunConfig, dataset: Dataset, seeds, split_name: str = "ood_eval",
                 k: int = 5) -> list[dict]:
    """Every objective combination with and without stage 2, averaged over ``seeds``.

    Stage 1 is shared between a configuration's two rows: its checkpoint is
    evaluated, then stage 2 continues from it.  Since each stage seeds its
    own sampler and optimizer, this equals two separate runs.
    """
    split = dataset.split(split_name)
    protocols = within_protocols(dataset)
    rows = []
    for v2t, t2v, inv in ABLATION_GRID:
        acc = {False: [], True: []}
        for seed in seeds:
            ab = Ablation(v2t, t2v, inv, True)
            params = fresh_params(cfg, seed)
            sampler = cfg.sampler_config()
            sampler = type(sampler)(sampler.batch_size, sampler.min_instances_per_class,
                                    sampler.language_balance, seed)
            for ft in (False, True):
                stage = cfg.stage_config("finetune" if ft else "pretrain")
                stage = type(stage)(**{**{f: getattr(stage, f) for f in stage.__dataclass_fields__},
                                       "loss": ab.loss_config(cfg.loss.lam, cfg.loss.eps)})
                train_stage(params, dataset, stage, sampler)
                acc[ft].append(evaluate(params, split, protocols, k))
        for ft in (False, True):
            runs = acc[ft]
            row = {"v2t": v2t, "t2v": t2v, "inv": inv, "ft": ft, "seeds": list(seeds)}
            for key in ("acc@1", "mrr", "nes"):
                per_seed = [mean_metric(r, key) for r in runs]
                row[key] = float(np.mean(per_seed))
                row[f"{key}_per_seed"] = per_seed
            row["label"] = Ablation(v2t, t2v, inv, ft).label()
            log.info("ablation %-16s acc@1=%.4f", row["label"], row["acc@1"])
            rows.append(row)
    return rows
