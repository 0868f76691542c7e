"""Post-training int8 quantization of the visual tower and a linear cost model.

Weights and layer inputs use symmetric per-tensor scales (zero point 0).
Products accumulate in int32; biases and nonlinearities stay in float.
The cost model is deliberately non-physical: it only ranks precisions by
operand width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import VISUAL_LAYERS, ModelConfig, ModelParams, pool_images

QMAX = 127
SCALE_FLOOR = 1e-8
QUANT_FORMAT = "anchorret-qmodel/1"
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1

BYTES = {"float32": 4, "int8": 1}
# relative energy per MAC; int8 : float32 = 1 : 4 by assumption
ENERGY_PER_MAC = {"float32": 4.0, "int8": 1.0}


class AccumulatorOverflow(OverflowError):
    pass


@dataclass
class QuantTensor:
    values: np.ndarray  # int8
    scale: float
    zero_point: int = 0

    def dequantize(self) -> np.ndarray:
        return (self.values.astype(np.float64) - self.zero_point) * self.scale


def symmetric_scale(x: np.ndarray) -> float:
    return max(float(np.max(np.abs(x))) / QMAX if np.size(x) else 0.0, SCALE_FLOOR)


def quantize(x: np.ndarray, scale: float | None = None) -> QuantTensor:
    s = symmetric_scale(x) if scale is None else max(float(scale), SCALE_FLOOR)
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) / s), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q, s)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


@dataclass
class QuantizedModel:
    config: ModelConfig
    weights: list[QuantTensor]  # one per visual layer
    biases: list[np.ndarray]  # float
    input_scales: list[float]  # activation scale of each layer's input

    def weight_bytes(self) -> int:
        return sum(w.values.size for w in self.weights)


def _float_layers(pooled: np.ndarray, params: ModelParams) -> list[np.ndarray]:
    """Inputs seen by each visual layer on the float path."""
    inputs = []
    x = pooled
    for i, (w, b) in enumerate(VISUAL_LAYERS):
        inputs.append(x)
        x = x @ params[w].value + params[b].value
        if i < len(VISUAL_LAYERS) - 1:
            x = np.tanh(x)
    return inputs


def calibrate(params: ModelParams, calibration_images: np.ndarray) -> QuantizedModel:
    """Weight scales from max |w|, activation scales from max |x| on the calibration batch."""
    calibration_images = np.asarray(calibration_images)
    if calibration_images.shape[0] < 16:
        raise ValueError(f"calibration needs at least 16 images, got {calibration_images.shape[0]}")
    pooled = pool_images(calibration_images, params.config)
    inputs = _float_layers(pooled, params)
    weights = [quantize(params[w].value) for w, _ in VISUAL_LAYERS]
    biases = [params[b].value.copy() for _, b in VISUAL_LAYERS]
    return QuantizedModel(params.config, weights, biases, [symmetric_scale(x) for x in inputs])


def _int_matmul(xq: np.ndarray, wq: np.ndarray) -> np.ndarray:
    acc = xq.astype(np.int64) @ wq.astype(np.int64)
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise AccumulatorOverflow("int32 accumulator overflow in quantized matmul")
    return acc.astype(np.int32)


def max_accumulator(config: ModelConfig) -> int:
    """Worst-case |accumulator| over the visual layers: fan_in * 127 * 127."""
    return max(s[0] for n, s in config.layer_shapes().items() if n.startswith("vis_w")) * QMAX * QMAX


def quantized_encode(images: np.ndarray, qmodel: QuantizedModel) -> np.ndarray:
    """Unit-norm embeddings from the int8 path; one row per image."""
    x = pool_images(images, qmodel.config)
    n_layers = len(qmodel.weights)
    for i, (wq, b, sx) in enumerate(zip(qmodel.weights, qmodel.biases, qmodel.input_scales)):
        xq = quantize(x, sx).values
        acc = _int_matmul(xq, wq.values)
        x = acc.astype(np.float64) * (sx * wq.scale) + b
        if i < n_layers - 1:
            x = np.tanh(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ArithmeticError("quantized encoder produced a zero vector")
    return x / norms


@dataclass
class CostReport:
    layers: list[dict]
    pool_ops: int
    total_macs: int
    weight_bytes: dict[str, int]
    bias_bytes: int
    activation_bytes: dict[str, int]
    latency_ratio: float  # float32 / int8 under the linear model
    energy_ratio: float

    def to_json(self) -> dict:
        return {"layers": self.layers, "pool_ops": self.pool_ops, "total_macs": self.total_macs,
                "weight_bytes": self.weight_bytes, "bias_bytes": self.bias_bytes,
                "activation_bytes": self.activation_bytes, "latency_ratio": self.latency_ratio,
                "energy_ratio": self.energy_ratio}


def cost_model(config: ModelConfig) -> CostReport:
    """Per-image MACs and bytes for the visual tower.

    latency ~ MACs * bytes per operand; energy ~ MACs * energy per MAC.
    """
    shapes = config.layer_shapes()
    layers = []
    for w, b in VISUAL_LAYERS:
        fan_in, fan_out = shapes[w]
        layers.append({"name": w, "fan_in": fan_in, "fan_out": fan_out, "macs": fan_in * fan_out})
    h, w_ = config.canvas
    pool_ops = h * w_
    macs = sum(l["macs"] for l in layers)
    n_weights = sum(l["fan_in"] * l["fan_out"] for l in layers)
    acts = config.pooled_dim + sum(l["fan_out"] for l in layers)
    latency = {p: (macs + pool_ops) * BYTES[p] for p in BYTES}
    energy = {p: (macs + pool_ops) * ENERGY_PER_MAC[p] for p in BYTES}
    return CostReport(
        layers=layers, pool_ops=pool_ops, total_macs=macs,
        weight_bytes={p: n_weights * BYTES[p] for p in BYTES},
        bias_bytes=sum(shapes[b][0] for _, b in VISUAL_LAYERS) * BYTES["float32"],
        activation_bytes={p: acts * BYTES[p] for p in BYTES},
        latency_ratio=latency["float32"] / latency["int8"],
        energy_ratio=energy["float32"] / energy["int8"],
    )


def save_quantized(qmodel: QuantizedModel, path) -> None:
    """Header line with the scale table, then raw int8 weight blobs and float64 biases."""
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"{path} exists; model files are never overwritten")
    tensors, blobs = [], []
    for (wname, bname), wq, b in zip(VISUAL_LAYERS, qmodel.weights, qmodel.biases):
        wb = wq.values.astype(np.int8).tobytes()
        bb = b.astype("<f8").tobytes()
        tensors.append({"name": wname, "dtype": "int8", "shape": list(wq.values.shape),
                        "scale": wq.scale, "zero_point": wq.zero_point, "nbytes": len(wb)})
        tensors.append({"name": bname, "dtype": "<f8", "shape": list(b.shape), "nbytes": len(bb)})
        blobs += [wb, bb]
    header = {"format": QUANT_FORMAT, "config": qmodel.config.to_json(),
              "input_scales": qmodel.input_scales, "tensors": tensors}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_quantized(path) -> QuantizedModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != QUANT_FORMAT:
        raise ValueError(f"{path}: unknown quantized model format {header.get('format')!r}")
    body = raw[nl + 1:]
    offset = 0
    arrays = {}
    for t in header["tensors"]:
        chunk = body[offset:offset + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise ValueError(f"{path}: truncated blob for {t['name']}")
        arrays[t["name"]] = (np.frombuffer(chunk, dtype=t["dtype"]).reshape(t["shape"]), t)
        offset += t["nbytes"]
    weights, biases = [], []
    for wname, bname in VISUAL_LAYERS:
        arr, t = arrays[wname]
        weights.append(QuantTensor(arr.copy(), t["scale"], t["zero_point"]))
        biases.append(arrays[bname][0].astype(np.float64))
    return QuantizedModel(ModelConfig.from_json(header["config"]), weights, biases,
                          list(header["input_scales"]))
