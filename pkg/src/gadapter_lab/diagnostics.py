"""Feature-shift measurement, performance gaps, checkpoints, profiling.

Feature vectors are the last-layer virtual-node representations. To compare
two models' feature distributions, all vector coordinates are pooled into
one scalar population per model, binned over shared edges spanning the
joint range, smoothed, and scored with the Jensen-Shannon divergence
(natural log, so values live in [0, ln 2]).

Checkpoints are little-endian binary: magic, format version, backbone
config digest, a JSON metadata blob (kind, head type, fine-tuning spec),
then a count of (name, dtype, shape, raw float64 payload) records. Delta
checkpoints hold only the trainable tensors; overlaying one on the exact
pretrained backbone reproduces the fine-tuned model bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass
from statistics import median

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .model import Model
from .peft import PeftSpec, instrument, trainable_ratio
from .training import metric_is_higher_better

MAGIC = b"GADCKPT1"
FORMAT_VERSION = 1
_DTYPE_FLOAT64 = 0
CHECKPOINT_KINDS = ("full", "delta")


# ---------------------------------------------------------------------------
# Feature extraction and histograms.


@dataclass(frozen=True)
class FeatureSample:
    graph_id: str
    vector: np.ndarray  # [d], last-layer virtual-node state


@dataclass(frozen=True)
class DistributionHistogram:
    edges: np.ndarray  # [bins + 1], shared between compared pairs
    probs: np.ndarray  # [bins], sums to 1, every entry >= eps / bins
    eps: float


def extract_features(model: Model, dataset, chunk: int = 128) -> list[FeatureSample]:
    """One virtual-node vector per graph, inference mode, dataset order."""
    out: list[FeatureSample] = []
    for start in range(0, len(dataset), chunk):
        idx = list(range(start, min(start + chunk, len(dataset))))
        reps = model.graph_repr(dataset.collate(idx)).data
        for row, i in enumerate(idx):
            out.append(FeatureSample(dataset.graphs[i].id, reps[row].copy()))
    return out


def _pool(samples: list[FeatureSample]) -> np.ndarray:
    if not samples:
        raise DataError("cannot build a histogram from zero samples")
    return np.concatenate([np.asarray(s.vector, dtype=np.float64).ravel() for s in samples])


def shared_edges(a: list[FeatureSample], b: list[FeatureSample], bins: int = 100) -> np.ndarray:
    """Bin edges spanning the joint min/max of both pooled populations."""
    pooled = np.concatenate([_pool(a), _pool(b)])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:  # degenerate range: widen so the single value sits inside
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def build_histogram(
    samples: list[FeatureSample], bins: int = 100, eps: float = 1e-8, edges: np.ndarray | None = None
) -> DistributionHistogram:
    """Pool all coordinates, count per bin, and smooth.

    Smoothing mixes the empirical distribution with the uniform one:
    p = (1 - eps) * count/N + eps/bins, which keeps every bin at or above
    eps/bins regardless of sample count and sums to 1 exactly.
    """
    if bins < 10:
        raise ConfigError(f"bins={bins} too coarse; need at least 10")
    if eps <= 0.0:
        raise ConfigError("smoothing eps must be positive")
    values = _pool(samples)
    if edges is None:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
    else:
        edges = np.asarray(edges, dtype=np.float64)
        if edges.ndim != 1 or len(edges) != bins + 1:
            raise ConfigError(f"edges must have bins+1={bins + 1} entries, got {edges.shape}")
        # shared edges may come from another pairing; clamp so no mass is dropped
        values = np.clip(values, edges[0], edges[-1])
    counts, _ = np.histogram(values, bins=edges)
    probs = (1.0 - eps) * counts / values.size + eps / bins
    return DistributionHistogram(edges=edges, probs=probs, eps=eps)


def histogram_pair(
    a: list[FeatureSample], b: list[FeatureSample], bins: int = 100, eps: float = 1e-8
) -> tuple[DistributionHistogram, DistributionHistogram]:
    edges = shared_edges(a, b, bins)
    return build_histogram(a, bins, eps, edges), build_histogram(b, bins, eps, edges)


def js_divergence(p: DistributionHistogram, q: DistributionHistogram) -> float:
    """Jensen-Shannon divergence, natural log, in [0, ln 2]."""
    if not np.array_equal(p.edges, q.edges):
        raise ConfigError("histograms were built over different bin edges")
    pp, qq = p.probs, q.probs
    m = 0.5 * (pp + qq)
    kl_pm = float(np.sum(pp * np.log(pp / m)))
    kl_qm = float(np.sum(qq * np.log(qq / m)))
    return 0.5 * kl_pm + 0.5 * kl_qm


# ---------------------------------------------------------------------------
# Performance gaps.


def performance_gap(peft_results: dict, full_results: dict) -> float:
    """Mean oriented metric of a method minus full fine-tuning's.

    Both arguments map dataset name -> (metric name, value). RMSE values
    are negated so "negative gap = worse than full fine-tuning" holds for
    every metric.
    """
    missing = sorted(set(full_results) ^ set(peft_results))
    if missing:
        raise DataError(f"result sets disagree on datasets: {missing}")
    if not full_results:
        raise DataError("cannot compute a gap over zero datasets")

    def oriented(results):
        vals = []
        for key in sorted(results):
            metric, value = results[key]
            vals.append(value if metric_is_higher_better(metric) else -value)
        return float(np.mean(vals))

    return oriented(peft_results) - oriented(full_results)


# ---------------------------------------------------------------------------
# Checkpoints.


def _spec_to_json(spec: PeftSpec | None):
    return None if spec is None else dataclasses.asdict(spec)


def save_checkpoint(model: Model, mask=None, kind: str = "full") -> bytes:
    """Serialize the model (kind="full") or its trainable set (kind="delta").

    For deltas the trainable set comes from the mask if given, otherwise
    from the store's trainable flags. Byte-stable: saving twice yields
    identical bytes.
    """
    if kind not in CHECKPOINT_KINDS:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    if kind == "full":
        names = model.store.names()
    elif mask is not None:
        names = [n for n in model.store.names() if n in mask]
    else:
        names = model.store.trainable_names()
    digest = model.config.backbone_digest().encode()
    meta = json.dumps(
        {"kind": kind, "head_type": model.config.head_type, "peft": _spec_to_json(model.peft_spec)},
        sort_keys=True,
    ).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<I", len(digest)))
    parts.append(digest)
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        raw_name = name.encode()
        arr = model.param(name).data
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_FLOAT64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(data: bytes, backbone: Model) -> Model:
    """Overlay a checkpoint onto its backbone, in place.

    The backbone must match the stored config digest and arrive
    uninstrumented; a stored fine-tuning spec is re-installed before any
    tensors are assigned, so delta checkpoints rebuild their extra
    parameters and then overwrite exactly the trainable set.
    """
    cur = _Cursor(data)
    if cur.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    digest = cur.take(cur.u32()).decode()
    if digest != backbone.config.backbone_digest():
        raise CheckpointError(
            f"checkpoint was written for config digest {digest[:12]}..., "
            f"backbone has {backbone.config.backbone_digest()[:12]}..."
        )
    try:
        meta = json.loads(cur.take(cur.u32()).decode())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint metadata ({e})") from e
    kind = meta.get("kind")
    if kind not in CHECKPOINT_KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    if meta["head_type"] != backbone.config.head_type:
        backbone.reset_head(meta["head_type"])
    if meta.get("peft") is not None:
        instrument(backbone, PeftSpec(**meta["peft"]))
    count = cur.u32()
    known = set(backbone.store.names())
    for _ in range(count):
        name = cur.take(cur.u32()).decode()
        dtype_tag, rank = struct.unpack("<BB", cur.take(2))
        if dtype_tag != _DTYPE_FLOAT64:
            raise CheckpointError(f"parameter {name}: unknown dtype tag {dtype_tag}")
        shape = struct.unpack(f"<{rank}I", cur.take(4 * rank)) if rank else ()
        n_vals = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(cur.take(8 * n_vals), dtype="<f8").reshape(shape)
        if name not in known:
            raise CheckpointError(f"checkpoint names unknown parameter {name!r}")
        tensor = backbone.param(name)
        if tensor.shape != tuple(shape):
            raise CheckpointError(f"parameter {name}: stored shape {shape} != model shape {tensor.shape}")
        tensor.data = np.array(arr, dtype=np.float64, order="C")
    if cur.pos != len(data):
        raise CheckpointError(f"{len(data) - cur.pos} trailing bytes after the last record")
    return backbone


# ---------------------------------------------------------------------------
# Profiling.


def profile(model: Model, dataset, passes: int = 100, warmup: int = 5) -> dict:
    """Median single-graph forward latency plus storage footprint."""
    if len(dataset) == 0:
        raise DataError("cannot profile over an empty dataset")
    if passes < 100:
        raise ConfigError("profile needs at least 100 timed passes")
    batches = [dataset.collate([i % len(dataset)]) for i in range(warmup + passes)]
    run = model.graph_repr if model.config.head_type == "masked_node" else model.predict_batch
    times = []
    for i, batch in enumerate(batches):
        t0 = time.perf_counter()
        run(batch)
        elapsed = time.perf_counter() - t0
        if i >= warmup:
            times.append(elapsed * 1000.0)
    return {
        "ms_per_sample": float(median(times)),
        "checkpoint_bytes_full": len(save_checkpoint(model, kind="full")),
        "checkpoint_bytes_delta": len(save_checkpoint(model, kind="delta")),
        "gamma": trainable_ratio(model),
    }
