"""Parameter containers, the shared convolution block, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .errors import CheckpointError
from .rng import Rng

PRELU_INIT = 0.25


@dataclass
class ModelParams:
    """Learnable tensors plus normalization buffers of one network.

    ``params`` holds everything the optimizer updates (kernels, biases,
    norm scale/shift, PReLU slopes); ``buffers`` holds running mean and
    variance. Both are insertion-ordered, which fixes the manifest order.
    """

    kind: str
    config: object
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def manifest(self) -> list[dict]:
        out = []
        for group, tensors in (("param", self.params), ("buffer", self.buffers)):
            for name, t in tensors.items():
                out.append({"name": name, "group": group, "shape": list(t.shape)})
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for tensors in (self.params, self.buffers):
            for name, t in tensors.items():
                h.update(name.encode())
                h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind,
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.kind,
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


def add_block(p: ModelParams, name: str, cin: int, cout: int, rng: Rng, dtype) -> None:
    """Register a Norm -> 3x3 Conv -> PReLU block with He fan-in init."""
    p.params[f"{name}.bn.gamma"] = np.ones(cin, dtype=dtype)
    p.params[f"{name}.bn.beta"] = np.zeros(cin, dtype=dtype)
    p.params[f"{name}.conv.w"] = rng.normal((cout, cin, 3, 3), scale=np.sqrt(2.0 / (cin * 9))).astype(dtype)
    p.params[f"{name}.conv.b"] = np.zeros(cout, dtype=dtype)
    p.params[f"{name}.prelu.a"] = np.full(cout, PRELU_INIT, dtype=dtype)
    p.buffers[f"{name}.bn.running_mean"] = np.zeros(cin, dtype=dtype)
    p.buffers[f"{name}.bn.running_var"] = np.ones(cin, dtype=dtype)


def block_param_count(cin: int, cout: int) -> int:
    return 2 * cin + 9 * cin * cout + cout + cout


def block_forward(p: ModelParams, name: str, x, train: bool, stride: int = 1, update_stats: bool = True):
    P, B = p.params, p.buffers
    h, bn_cache = layers.batchnorm_forward(
        x,
        P[f"{name}.bn.gamma"],
        P[f"{name}.bn.beta"],
        B[f"{name}.bn.running_mean"],
        B[f"{name}.bn.running_var"],
        train=train,
        update_stats=update_stats,
    )
    h, conv_cache = layers.conv2d_forward(h, P[f"{name}.conv.w"], P[f"{name}.conv.b"], stride=stride, pad=1)
    h, act_cache = layers.prelu_forward(h, P[f"{name}.prelu.a"])
    return h, (bn_cache, conv_cache, act_cache)


def block_backward(name: str, dout, cache, grads: dict):
    bn_cache, conv_cache, act_cache = cache
    d, grads[f"{name}.prelu.a"] = layers.prelu_backward(dout, act_cache)
    d, grads[f"{name}.conv.w"], grads[f"{name}.conv.b"] = layers.conv2d_backward(d, conv_cache)
    d, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = layers.batchnorm_backward(d, bn_cache)
    return d


def ordered_grads(p: ModelParams, grads: dict) -> dict[str, np.ndarray]:
    """Re-key gradients into the parameter order, cast to the parameter dtype."""
    return {k: np.asarray(grads[k], dtype=v.dtype).reshape(v.shape) for k, v in p.params.items()}


# -- checkpoint files -------------------------------------------------------

def _config_to_json(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``<path>.json`` (meta + manifest) and ``<path>.raw`` (float32 LE payloads)."""
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        data = np.ascontiguousarray(t, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    path.with_suffix(".raw").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps({**meta, "tensors": manifest}, indent=2) + "\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    sidecar, raw = path.with_suffix(".json"), path.with_suffix(".raw")
    if not sidecar.is_file() or not raw.is_file():
        raise CheckpointError(f"checkpoint {path} is missing its .json or .raw file")
    meta = json.loads(sidecar.read_text())
    payload = raw.read_bytes()
    tensors = {}
    for entry in meta["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CheckpointError(f"{raw}: tensor {entry['name']} extends past end of payload")
        tensors[entry["name"]] = np.frombuffer(payload[lo:lo + n], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return tensors, meta


def save_model(p: ModelParams, path) -> None:
    tensors = {**p.params, **p.buffers}
    groups = {**{k: "param" for k in p.params}, **{k: "buffer" for k in p.buffers}}
    meta = {"kind": p.kind, "config": _config_to_json(p.config), "groups": groups}
    save_tensors(path, tensors, meta)


def load_model(path) -> ModelParams:
    from .adversary import DiscriminatorConfig
    from .segnet import GeneratorConfig

    tensors, meta = load_tensors(path)
    kind = meta.get("kind")
    cfg_cls = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig}.get(kind)
    if cfg_cls is None:
        raise CheckpointError(f"unknown model kind {kind!r} in {path}")
    raw_cfg = meta["config"]
    cfg = cfg_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw_cfg.items()})
    p = ModelParams(kind, cfg)
    for name, t in tensors.items():
        (p.params if meta["groups"][name] == "param" else p.buffers)[name] = t
    return p
