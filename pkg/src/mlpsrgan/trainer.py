"""Warm-up and adversarial training, checkpoints and volume upscaling."""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import nn
from . import tensor as T
from .data_io import SliceDataset, Volume, decode_rt, encode_rt
from .errors import ConfigError, NonFiniteError, ParseError
from .losses import (LossWeights, RandomConvExtractor, adversarial_d_loss, content_loss,
                     generator_total_loss)
from .resample import SLICE_FACTOR
from .tensor import AdamState, Tensor

HISTORY_FIELDS = ["iteration", "lr", "content", "perceptual", "adversarial_g",
                  "adversarial_d", "total"]
CKPT_MAGIC = b"MSRGCK01"


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 2e-4
    decay_start_epoch: int = 100
    decay_every: int = 50
    decay_factor: float = 0.5
    warmup_iters: int = 500
    epochs: int = 1
    # when positive, adversarial training stops after this many iterations
    # (epochs are then as many as needed)
    iters: int = 0
    seed: int = 0
    w_perceptual: float = 1.0
    w_content: float = 0.01
    w_adversarial: float = 0.005
    dtype: str = "float64"
    num_rmrdb: int = 1
    base_channels: int = 16
    disc_channels: int = 8
    input_h: int = 64
    input_w: int = 16
    patch: int = 4
    no_discriminator: bool = False
    holdout_fold: int = -1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected a boolean, got {v!r}")
        positive = ("batch_size", "lr", "decay_every", "decay_factor", "epochs", "num_rmrdb",
                    "base_channels", "disc_channels", "input_h", "input_w", "patch")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("decay_start_epoch", "warmup_iters", "iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.decay_factor > 1:
            raise ConfigError("decay_factor must not exceed 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.w_perceptual, self.w_content, self.w_adversarial)
        except ConfigError as exc:
            raise ConfigError(f"w_*: {exc}") from None

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def generator_config(self) -> nn.GeneratorConfig:
        return nn.GeneratorConfig(input_h=self.input_h, input_w=self.input_w,
                                  num_rmrdb=self.num_rmrdb, base_channels=self.base_channels,
                                  mixer=nn.MixerConfig(self.patch, self.patch))

    def discriminator_config(self) -> nn.DiscriminatorConfig:
        return nn.DiscriminatorConfig(base_channels=self.disc_channels)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> TrainConfig:
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        raw = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update({k: str(v) for k, v in (overrides or {}).items()})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict[str, str]) -> TrainConfig:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key: {key}")
            kwargs[key] = _convert(key, value, types[key])
        return cls(**kwargs)


def _convert(key: str, value: str, typ: str):
    try:
        if typ == "bool":
            v = value.lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return v in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value.strip("'\"")
    except ValueError:
        raise ConfigError(f"invalid value for config key {key}: {value!r}") from None


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Constant before ``decay_start_epoch``, then stepwise decay every ``decay_every`` epochs."""
    if epoch < config.decay_start_epoch:
        return config.lr
    k = 1 + (epoch - config.decay_start_epoch) // config.decay_every
    return config.lr * config.decay_factor ** k


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    g: dict[str, Tensor]
    d: dict[str, Tensor]
    adam_g: AdamState
    adam_d: AdamState
    iteration: int = 0
    extractor: Callable = field(default=None, repr=False)

    def __post_init__(self):
        if self.extractor is None:
            self.extractor = RandomConvExtractor(dtype=self.config.np_dtype)


Checkpoint = TrainState


def init_params(config: TrainConfig, seed: int | None = None):
    """Seeded generator and discriminator parameters."""
    seed = config.seed if seed is None else seed
    dtype = config.np_dtype
    g = nn.init_generator(config.generator_config(), np.random.default_rng([seed, 0]), dtype)
    d = nn.init_discriminator(config.discriminator_config(), np.random.default_rng([seed, 1]), dtype)
    return g, d


def init_state(config: TrainConfig) -> TrainState:
    g, d = init_params(config)
    return TrainState(config, g, d, AdamState(lr=config.lr), AdamState(lr=config.lr))


def _tracked(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.tracked}


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in _tracked(params).items():
        out[k] = v.grad if v.grad is not None else np.zeros_like(v.data)
    return out


def _zero(params: dict[str, Tensor]) -> None:
    for v in params.values():
        v.grad = None


def _frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data) for k, v in params.items()}


def _finite(name: str, value: float, iteration: int) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite {name} loss at iteration {iteration}")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def batch_indices(n: int, batch_size: int, seed: int, phase: int, step: int) -> np.ndarray:
    """Indices for global ``step`` of a phase; each epoch is a fresh seeded permutation."""
    nb = batches_per_epoch(n, batch_size)
    epoch, b = divmod(step, nb)
    perm = np.random.default_rng([seed, phase, epoch]).permutation(n)
    return perm[b * batch_size:(b + 1) * batch_size]


def _batch(lr_all: np.ndarray, hr_all: np.ndarray, idx: np.ndarray, dtype) -> tuple[Tensor, Tensor]:
    return Tensor(lr_all[idx].astype(dtype)), Tensor(hr_all[idx].astype(dtype))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def warmup_step(state: TrainState, lr_b: Tensor, hr_b: Tensor) -> dict:
    """One content-only generator update."""
    cfg = state.config
    _zero(state.g)
    sr = nn.generator_forward(lr_b, state.g, cfg.generator_config())
    loss = content_loss(sr, hr_b)
    value = float(loss.data)
    _finite("content", value, state.iteration)
    loss.backward()
    state.adam_g.lr = cfg.lr
    T.adam_step(_tracked(state.g), _grads(state.g), state.adam_g)
    state.iteration += 1
    return {"iteration": state.iteration, "lr": cfg.lr, "content": value, "total": value}


def train_step(state: TrainState, lr_b: Tensor, hr_b: Tensor, lr: float | None = None) -> dict:
    """One discriminator update followed by one generator update.

    The generator step sees the discriminator through untracked copies of its
    weights, so only generator parameters move.
    """
    cfg = state.config
    gcfg, dcfg = cfg.generator_config(), cfg.discriminator_config()
    lr = cfg.lr if lr is None else lr
    rec = {"iteration": state.iteration + 1, "lr": lr}

    if cfg.no_discriminator:
        _zero(state.g)
        sr = nn.generator_forward(lr_b, state.g, gcfg)
        total = content_loss(sr, hr_b)
        rec["content"] = rec["total"] = float(total.data)
        _finite("content", rec["content"], rec["iteration"])
        total.backward()
        state.adam_g.lr = lr
        T.adam_step(_tracked(state.g), _grads(state.g), state.adam_g)
        state.iteration += 1
        return rec

    # discriminator
    with T.no_grad():
        sr_fixed = nn.generator_forward(lr_b, state.g, gcfg)
    _zero(state.d)
    stats: dict[str, np.ndarray] = {}
    _, logit_hr = nn.discriminator_forward(hr_b, state.d, dcfg, training=True, stats_out=stats)
    for k, v in stats.items():
        state.d[k].data = v
    stats = {}
    _, logit_sr = nn.discriminator_forward(sr_fixed, state.d, dcfg, training=True, stats_out=stats)
    d_loss = adversarial_d_loss(logit_hr, logit_sr)
    rec["adversarial_d"] = float(d_loss.data)
    _finite("adversarial_d", rec["adversarial_d"], rec["iteration"])
    d_loss.backward()
    state.adam_d.lr = lr
    T.adam_step(_tracked(state.d), _grads(state.d), state.adam_d)
    for k, v in stats.items():
        state.d[k].data = v

    # generator
    frozen = _frozen(state.d)
    _zero(state.g)
    sr = nn.generator_forward(lr_b, state.g, gcfg)
    with T.no_grad():
        _, logit_hr = nn.discriminator_forward(hr_b, frozen, dcfg, training=True)
    _, logit_sr = nn.discriminator_forward(sr, frozen, dcfg, training=True)
    total, parts = generator_total_loss(sr, hr_b, logit_hr, logit_sr, state.extractor, cfg.weights)
    for name, value in parts.items():
        _finite(name, value, rec["iteration"])
    rec.update(parts)
    rec["total"] = float(total.data)
    _finite("total", rec["total"], rec["iteration"])
    total.backward()
    state.adam_g.lr = lr
    T.adam_step(_tracked(state.g), _grads(state.g), state.adam_g)
    state.iteration += 1
    return rec


def warmup_phase(state: TrainState, dataset: SliceDataset, iters: int | None = None,
                 log: Callable[[dict], None] | None = None) -> TrainState:
    """Content-only generator updates until ``state.iteration`` reaches the warm-up count."""
    cfg = state.config
    lr_all, hr_all = dataset.arrays()
    n = len(dataset)
    stop = cfg.warmup_iters if iters is None else min(cfg.warmup_iters, state.iteration + iters)
    while state.iteration < stop:
        idx = batch_indices(n, cfg.batch_size, cfg.seed, 0, state.iteration)
        rec = warmup_step(state, *_batch(lr_all, hr_all, idx, cfg.np_dtype))
        if log:
            log(rec)
    return state


def adversarial_iters(config: TrainConfig, n: int) -> int:
    nb = batches_per_epoch(n, config.batch_size)
    return config.iters if config.iters > 0 else config.epochs * nb


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

class History:
    """Per-iteration loss rows, optionally streamed to CSV."""

    def __init__(self, path=None, append: bool = False):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            exists = append and Path(path).exists()
            self._fh = open(path, "a" if exists else "w", newline="")
            self._writer = csv.DictWriter(self._fh, HISTORY_FIELDS)
            if not exists:
                self._writer.writeheader()

    def __call__(self, rec: dict) -> None:
        row = {k: rec.get(k, "") for k in HISTORY_FIELDS}
        row = {k: (repr(float(v)) if k != "iteration" and v != "" else v) for k, v in row.items()}
        self.rows.append(row)
        if self._fh:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

def train(dataset: SliceDataset, config: TrainConfig, out_dir=None,
          resume: TrainState | None = None, stop_at: int | None = None) -> tuple[TrainState, History]:
    """Warm-up then adversarial epochs.

    With ``out_dir`` the history CSV, ``warmup.ckpt``, one ``epoch_{e}.ckpt``
    per finished epoch and ``final.ckpt`` are written there. ``resume``
    continues from a checkpoint; ``stop_at`` halts after that global iteration.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    state = resume if resume is not None else init_state(config)
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    history = History(out / "history.csv" if out else None, append=resume is not None)
    stop = math.inf if stop_at is None else stop_at
    n = len(dataset)
    nb = batches_per_epoch(n, cfg.batch_size)
    lr_all, hr_all = dataset.arrays()
    try:
        if state.iteration < cfg.warmup_iters:
            warmup_phase(state, dataset, iters=int(min(stop, cfg.warmup_iters)) - state.iteration,
                         log=history)
            if out is not None and state.iteration == cfg.warmup_iters:
                save_checkpoint(out / "warmup.ckpt", state)
        total = cfg.warmup_iters + adversarial_iters(cfg, n)
        while state.iteration < min(total, stop):
            step = state.iteration - cfg.warmup_iters
            epoch = step // nb
            idx = batch_indices(n, cfg.batch_size, cfg.seed, 1, step)
            rec = train_step(state, *_batch(lr_all, hr_all, idx, cfg.np_dtype),
                             lr=lr_at_epoch(cfg, epoch))
            history(rec)
            done = state.iteration - cfg.warmup_iters
            if out is not None and (done % nb == 0):
                save_checkpoint(out / f"epoch_{done // nb - 1}.ckpt", state)
        if out is not None:
            save_checkpoint(out / "final.ckpt", state)
    finally:
        history.close()
    return state, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _blocks(state: TrainState) -> Iterator[tuple[str, np.ndarray]]:
    for prefix, params in (("g", state.g), ("d", state.d)):
        for k, v in params.items():
            yield f"{prefix}/{k}", v.data
    for prefix, adam in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
        yield f"{prefix}/step", np.array([adam.step], dtype=np.float64)
        yield f"{prefix}/lr", np.array([adam.lr], dtype=np.float64)
        for k in adam.m:
            yield f"{prefix}/m/{k}", adam.m[k]
            yield f"{prefix}/v/{k}", adam.v[k]


def encode_checkpoint(state: TrainState) -> bytes:
    buf = io.BytesIO()
    text = state.config.to_text().encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(text)) + text)
    buf.write(struct.pack("<Q", state.iteration))
    blocks = list(_blocks(state))
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        key = name.encode()
        blob = encode_rt(arr)
        buf.write(struct.pack("<H", len(key)) + key + struct.pack("<Q", len(blob)) + blob)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> TrainState:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("truncated", "checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ParseError("bad magic", "not a checkpoint")
    (tlen,) = struct.unpack("<I", take(4))
    config = TrainConfig.from_text(take(tlen).decode())
    (iteration,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        key = take(klen).decode()
        (blen,) = struct.unpack("<Q", take(8))
        blocks[key] = decode_rt(take(blen))[0]

    # rebuild from a fresh init so tracked flags and key order match
    g, d = init_params(config)
    for prefix, params in (("g", g), ("d", d)):
        for k, v in params.items():
            name = f"{prefix}/{k}"
            if name not in blocks:
                raise ParseError("missing block", name)
            if blocks[name].shape != v.shape:
                raise ParseError("bad block", f"{name} has shape {blocks[name].shape}")
            v.data = blocks[name]
    adams = []
    for prefix in ("adam_g", "adam_d"):
        st = AdamState(lr=float(blocks[f"{prefix}/lr"][0]), step=int(blocks[f"{prefix}/step"][0]))
        for key, arr in blocks.items():
            if key.startswith(f"{prefix}/m/"):
                name = key[len(prefix) + 3:]
                st.m[name] = arr
                st.v[name] = blocks[f"{prefix}/v/{name}"]
        adams.append(st)
    return TrainState(config, g, d, adams[0], adams[1], iteration)


def save_checkpoint(path, state: TrainState) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> TrainState:
    return decode_checkpoint(Path(path).read_bytes())


def blend_params(a: dict[str, Tensor], b: dict[str, Tensor], alpha: float) -> dict[str, Tensor]:
    """Weight-space interpolation ``(1 - alpha) * a + alpha * b``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"blend alpha must lie in [0, 1], got {alpha}")
    if a.keys() != b.keys():
        raise ConfigError("cannot blend parameter sets with different layouts")
    return {k: Tensor((1.0 - alpha) * a[k].data + alpha * b[k].data, tracked=a[k].tracked)
            for k in a}


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def upscale_slices(lr_slices: np.ndarray, params: dict[str, Tensor], config: TrainConfig,
                   chunk: int = 8) -> np.ndarray:
    """Generate ``(N, H, W*4)`` from ``(N, H, W)`` in fixed-size chunks, clamped to [0, 1]."""
    gcfg = config.generator_config()
    out = []
    with T.no_grad():
        for s in range(0, len(lr_slices), chunk):
            x = Tensor(lr_slices[s:s + chunk, None].astype(config.np_dtype))
            out.append(nn.generator_forward(x, params, gcfg).data[:, 0])
    return np.clip(np.concatenate(out).astype(np.float64), 0.0, 1.0)


def upscale_volume(lr_volume: Volume, checkpoint: TrainState, blend_with: TrainState | None = None,
                   alpha: float = 1.0) -> Volume:
    """Super-resolve the last axis of a volume slice by slice along the first axis.

    With ``blend_with`` (for instance the warm-up checkpoint) the generator
    weights are ``(1 - alpha) * blend_with + alpha * checkpoint``.
    """
    params = checkpoint.g
    if blend_with is not None:
        params = blend_params(blend_with.g, checkpoint.g, alpha)
    sr = upscale_slices(lr_volume.data, params, checkpoint.config)
    sx, sy, sz = lr_volume.spacing
    return Volume(sr, (sx, sy, sz / SLICE_FACTOR), lr_volume.source_id)
