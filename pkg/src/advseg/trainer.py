"""Alternating adversarial training with Adam.

One iteration:

1. sample a batch of slice groups and reference slices;
2. generator forward (train mode), softmax probabilities;
3. discriminator step on ``[real pairs; predicted pairs]`` minimizing ``-L_d``;
4. generator step minimizing ``L_cls + lambda * surrogate`` where the
   surrogate is ``-L_g`` (default) or ``+L_g`` (``literal_sign=True``), with
   the adversarial gradient flowing through the frozen, just-updated
   discriminator into the generator's probabilities.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import layers
from .adversary import (
    DiscriminatorConfig,
    discriminator_backward,
    discriminator_forward,
    discriminator_loss,
    generator_adversarial_loss,
    init_discriminator,
    make_condition_pair,
)
from .errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeMismatchError
from .params import ModelParams, load_model, load_tensors, save_model, save_tensors
from .rng import STREAM_BATCHES, make_rng
from .segnet import GeneratorConfig, generator_backward, generator_forward, init_generator, softmax_cross_entropy
from .volume_store import load_labels, load_volume, normalize, slice_groups

log = logging.getLogger(__name__)

STATS_HEADER = ["iter", "l_cls", "l_gan_d", "l_gan_g", "l_total", "ms"]


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    total_iterations: int = 2000
    adversarial_weight: float = 0.01
    batch_size: int = 4
    k: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    checkpoint_interval: int = 500
    literal_sign: bool = False
    adversarial: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.adversarial_weight >= 0:
            raise ConfigError("adversarial_weight must be >= 0")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationStats:
    iter: int
    l_cls: float
    l_gan_d: float
    l_gan_g: float
    l_total: float
    ms: float
    d_fake_mean: float = float("nan")

    def key(self) -> tuple:
        """Everything except wall time, for determinism comparisons."""
        return (self.iter, self.l_cls, self.l_gan_d, self.l_gan_g, self.l_total, self.d_fake_mean)


def combined_loss(l_cls: float, l_gan_g: float, lam: float, literal_sign: bool = False) -> float:
    """``l_cls + lam * surrogate``; surrogate is ``-l_gan_g`` unless ``literal_sign``."""
    surrogate = l_gan_g if literal_sign else -l_gan_g
    if lam == 0:
        return l_cls
    return l_cls + lam * surrogate


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update, in place. ``t`` is the 1-based step index."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype)
    state.t = t
    return params, state


# -- data ---------------------------------------------------------------------

@dataclass
class Case:
    name: str
    image: np.ndarray   # normalized (D, H, W)
    labels: np.ndarray  # (D, H, W) uint8
    spacing: tuple


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def load_cases(data_dir, split: str = "train") -> list[Case]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    cases = []
    for entry in manifest.get(split, []):
        vol = load_volume(data_dir / entry["volume"])
        lab = load_labels(data_dir / entry["labels"])
        if vol.shape != lab.shape:
            raise ShapeMismatchError(f"case {entry['case']}: volume {vol.shape} vs labels {lab.shape}")
        norm, _ = normalize(vol)
        cases.append(Case(entry["case"], norm.voxels, lab.labels, vol.spacing))
    return cases


def sample_batch(cases: list[Case], batch_size: int, k: int, rng):
    """Pick ``batch_size`` (case, slice) pairs from the seeded stream."""
    xs, ys = [], []
    for _ in range(batch_size):
        c = cases[int(rng.integers(len(cases)))]
        i = int(rng.integers(c.image.shape[0]))
        idx = np.clip(np.arange(i - k, i + k + 1), 0, c.image.shape[0] - 1)
        xs.append(c.image[idx])
        ys.append(c.labels[i])
    return np.stack(xs), np.stack(ys).astype(np.int64)


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    generator: ModelParams
    discriminator: ModelParams | None
    stats: list[IterationStats]
    validation: list[tuple[int, float]] = field(default_factory=list)


class Trainer:
    def __init__(self, cases, gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, tcfg: TrainConfig,
                 validation_cases=None):
        if not cases:
            raise ConfigError("training dataset is empty")
        if gcfg.k != tcfg.k or dcfg.k != tcfg.k:
            raise ConfigError(f"k mismatch: generator {gcfg.k}, discriminator {dcfg.k}, train {tcfg.k}")
        for c in cases:
            if tuple(c.image.shape[1:]) != tuple(gcfg.input_size):
                raise ShapeMismatchError(
                    f"case {c.name} slices are {c.image.shape[1:]}, generator expects {gcfg.input_size}"
                )
        if tuple(dcfg.input_size) != tuple(gcfg.input_size):
            raise ConfigError("discriminator and generator input sizes differ")
        self.cases = cases
        self.validation_cases = validation_cases or []
        self.gcfg, self.dcfg, self.tcfg = gcfg, dcfg, tcfg
        dtype = np.dtype(tcfg.dtype)
        self.G = init_generator(gcfg, tcfg.seed, dtype)
        self.D = init_discriminator(dcfg, tcfg.seed, dtype) if tcfg.adversarial else None
        self.adam_g = AdamState()
        self.adam_d = AdamState()
        self.rng = make_rng(tcfg.seed, STREAM_BATCHES)
        self.iteration = 0
        self.stats: list[IterationStats] = []

    # one iteration -----------------------------------------------------------
    def step(self) -> IterationStats:
        cfg = self.tcfg
        t0 = time.perf_counter()
        x, y = sample_batch(self.cases, cfg.batch_size, cfg.k, self.rng)
        x = x.astype(self.G.dtype)
        t = self.iteration + 1

        logits, g_trace = generator_forward(self.G, x, "train")
        l_cls, dlogits = softmax_cross_entropy(logits, y)
        l_gan_d = l_gan_g = d_fake_mean = float("nan")

        if self.D is not None:
            prob = layers.softmax(logits, axis=1)
            u_real = make_condition_pair(x, y)
            u_fake = make_condition_pair(x, prob)
            u = np.concatenate([u_real, u_fake])
            B = x.shape[0]

            d_out, d_trace = discriminator_forward(self.D, u, "train")
            l_gan_d, g_real, g_fake = discriminator_loss(d_out[:B], d_out[B:])
            # minimize -L_d
            d_grads, _ = discriminator_backward(self.D, d_trace, -np.concatenate([g_real, g_fake]))
            adam_step(self.D.params, d_grads, self.adam_d, t, cfg)

            d_out, d_trace = discriminator_forward(self.D, u, "train", update_stats=False)
            d_fake = d_out[B:]
            d_fake_mean = float(d_fake.mean())
            l_gan_g, g_adv = generator_adversarial_loss(d_fake)
            if cfg.adversarial_weight != 0:
                sign = 1.0 if cfg.literal_sign else -1.0
                upstream = np.concatenate([np.zeros(B), sign * cfg.adversarial_weight * g_adv])
                _, du = discriminator_backward(self.D, d_trace, upstream)
                dprob = du[B:, -prob.shape[1]:]
                dlogits = dlogits + layers.softmax_backward(dprob, prob, axis=1).astype(dlogits.dtype)

        g_grads = generator_backward(self.G, g_trace, dlogits)
        adam_step(self.G.params, g_grads, self.adam_g, t, cfg)

        lam = cfg.adversarial_weight if self.D is not None else 0.0
        l_total = combined_loss(l_cls, l_gan_g if self.D is not None else 0.0, lam, cfg.literal_sign)
        self.iteration = t
        rec = IterationStats(t, l_cls, l_gan_d, l_gan_g, l_total, 1000.0 * (time.perf_counter() - t0), d_fake_mean)
        checked = [l_cls, l_total] + ([l_gan_d, l_gan_g] if self.D is not None else [])
        if not all(math.isfinite(v) for v in checked):
            raise NonFiniteLossError(
                f"non-finite loss at iteration {t}: l_cls={l_cls} l_gan_d={l_gan_d} l_gan_g={l_gan_g}"
            )
        self.stats.append(rec)
        return rec

    def validate(self) -> float:
        from .pipeline import predict_case_labels
        from .surfmetrics import volumetric_overlap_error

        voes = []
        for c in self.validation_cases:
            pred = predict_case_labels(self.G, c.image)
            voes.append(volumetric_overlap_error(pred, c.labels))
        return float(np.mean(voes)) if voes else float("nan")

    def run(self, iterations: int | None = None, out_dir=None) -> TrainResult:
        """Run up to ``total_iterations`` (or ``iterations`` more steps)."""
        cfg = self.tcfg
        end = cfg.total_iterations if iterations is None else self.iteration + iterations
        out = Path(out_dir) if out_dir is not None else None
        writer = None
        validation = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            stats_path = out / "stats.csv"
            fresh = self.iteration == 0 or not stats_path.exists()
            fh = open(stats_path, "w" if fresh else "a", newline="")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(STATS_HEADER)
        if self.validation_cases and self.iteration == 0:
            validation.append((0, self.validate()))
        if out is not None and self.iteration == 0:
            self.save_checkpoint(out / "checkpoints" / "iter_000000")
        try:
            while self.iteration < end:
                rec = self.step()
                if writer is not None:
                    writer.writerow([rec.iter] + [repr(float(getattr(rec, f))) for f in STATS_HEADER[1:]])
                if out is not None and cfg.checkpoint_interval and rec.iter % cfg.checkpoint_interval == 0:
                    self.save_checkpoint(out / "checkpoints" / f"iter_{rec.iter:06d}")
                    fh.flush()
                if rec.iter % 100 == 0:
                    log.info("iter %d l_cls %.4f l_gan_d %.4f l_gan_g %.4f", rec.iter, rec.l_cls, rec.l_gan_d, rec.l_gan_g)
        finally:
            if writer is not None:
                fh.close()
        if self.validation_cases:
            validation.append((self.iteration, self.validate()))
        if out is not None:
            save_model(self.G, out / "generator")
            if self.D is not None:
                save_model(self.D, out / "discriminator")
            if validation:
                with open(out / "validation.csv", "w", newline="") as vf:
                    w = csv.writer(vf)
                    w.writerow(["iter", "voe"])
                    w.writerows([(i, repr(v)) for i, v in validation])
        return TrainResult(self.G, self.D, self.stats, validation)

    # checkpoints ---------------------------------------------------------------
    def save_checkpoint(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_model(self.G, path / "generator")
        save_tensors(path / "adam_g", {**{f"m.{k}": v for k, v in self.adam_g.m.items()},
                                       **{f"v.{k}": v for k, v in self.adam_g.v.items()}}, {"t": self.adam_g.t})
        if self.D is not None:
            save_model(self.D, path / "discriminator")
            save_tensors(path / "adam_d", {**{f"m.{k}": v for k, v in self.adam_d.m.items()},
                                           **{f"v.{k}": v for k, v in self.adam_d.v.items()}}, {"t": self.adam_d.t})
        state = {
            "iteration": self.iteration,
            "rng_state": self.rng.state,
            "train_config": asdict(self.tcfg),
        }
        (path / "state.json").write_text(json.dumps(state, indent=2) + "\n")

    def load_checkpoint(self, path) -> None:
        path = Path(path)
        if not (path / "state.json").is_file():
            raise CheckpointError(f"{path} is not a training checkpoint")
        if np.dtype(self.tcfg.dtype) != np.float32:
            raise CheckpointError("exact resume requires float32 training (checkpoints store float32)")
        state = json.loads((path / "state.json").read_text())
        self.G = load_model(path / "generator")
        self.adam_g = _load_adam(path / "adam_g")
        if self.D is not None:
            self.D = load_model(path / "discriminator")
            self.adam_d = _load_adam(path / "adam_d")
        self.rng.state = state["rng_state"]
        self.iteration = state["iteration"]
        self.stats = []


def _load_adam(path) -> AdamState:
    tensors, meta = load_tensors(path)
    st = AdamState(t=meta["t"])
    for name, t in tensors.items():
        which, key = name.split(".", 1)
        (st.m if which == "m" else st.v)[key] = t
    return st


def train(data_dir, gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, tcfg: TrainConfig, out_dir=None,
          resume_from=None) -> TrainResult:
    """Train on the ``train`` split of a phantom dataset directory."""
    cases = load_cases(data_dir, "train")
    val = load_cases(data_dir, "validation")
    trainer = Trainer(cases, gcfg, dcfg, tcfg, val)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    return trainer.run(out_dir=out_dir)
