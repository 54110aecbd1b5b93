"""Multi-resolution CrossNet: encoder, averaging bridges, BLSTM stacks, mask decoders."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .audio_io import AudioBuffer
from .dsp import StftConfig, quantize_window, stft
from .nn.checkpoint import load_arrays, save_arrays
from .nn.layers import BatchNorm, BiLSTMStacks, Linear, Module
from .nn.tensor import Tensor

log = logging.getLogger(__name__)

EPS = 1e-8
_DB = 10.0 / math.log(10.0)


@dataclass
class MrxConfig:
    window_ms: tuple = (32.0, 64.0, 256.0)
    sample_rate: int = 44100
    hidden: int = 512
    lstm_hidden: int = 256
    lstm_layers: int = 3
    num_stacks: int = 3
    num_sources: int = 3
    chunk_s: float = 9.0

    def __post_init__(self):
        self.window_ms = tuple(float(w) for w in self.window_ms)
        if not self.window_ms:
            raise ValueError("need at least one STFT resolution")
        sizes = self.window_sizes
        hop = self.hop_samples
        for w in sizes:
            if w % hop:
                raise ValueError(f"hop {hop} does not divide window {w}")

    @property
    def window_sizes(self) -> list[int]:
        return [quantize_window(w, self.sample_rate) for w in self.window_ms]

    @property
    def hop_samples(self) -> int:
        return max(1, min(self.window_sizes) // 4)

    def stft_configs(self) -> list[StftConfig]:
        return [StftConfig(w, self.hop_samples, self.sample_rate, ms) for w, ms in zip(self.window_sizes, self.window_ms)]

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_s * self.sample_rate))

    def to_json(self) -> dict:
        d = asdict(self)
        d["window_ms"] = list(self.window_ms)
        return d


TOY_CONFIG = dict(window_ms=(32.0, 64.0), sample_rate=8000, hidden=64, lstm_hidden=32)


class MrxModel(Module):
    def __init__(self, config: MrxConfig | None = None, seed: int = 0, dtype=np.float64):
        self.config = config or MrxConfig()
        self.dtype = np.dtype(dtype)
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.stfts = cfg.stft_configs()
        bins = [c.n_bins for c in self.stfts]
        self.enc_fc = [Linear(f, cfg.hidden, rng, dtype) for f in bins]
        self.enc_bn = [BatchNorm(cfg.hidden, dtype) for _ in bins]
        self.lstm = BiLSTMStacks(cfg.num_stacks, cfg.lstm_layers, cfg.hidden, cfg.lstm_hidden, rng, dtype)
        dec_in = cfg.hidden + 2 * cfg.lstm_hidden
        self.dec_fc1 = [Linear(dec_in, cfg.hidden, rng, dtype) for _ in bins]
        self.dec_bn1 = [BatchNorm(cfg.hidden, dtype) for _ in bins]
        self.dec_fc2 = [Linear(cfg.hidden, cfg.num_sources * f, rng, dtype) for f in bins]
        self.dec_bn2 = [BatchNorm(cfg.num_sources * f, dtype) for f in bins]

    # -- forward pieces -------------------------------------------------------

    def spectrograms(self, mixture: np.ndarray) -> list[np.ndarray]:
        """Complex STFTs ``(B, N, F_i)`` of ``mixture (B, L)``, one per resolution."""
        x = np.atleast_2d(np.asarray(mixture, dtype=np.float64))
        return [stft(x, c).bins for c in self.stfts]

    def encode(self, specs: list[np.ndarray]) -> Tensor:
        """Per-resolution FC+BN+tanh embeddings averaged into ``(B, N, hidden)``."""
        feats = []
        for spec, fc, bn in zip(specs, self.enc_fc, self.enc_bn):
            mag = Tensor(np.abs(spec).astype(self.dtype))
            feats.append(nn.tanh(bn(fc(mag))))
        return nn.mean_over(feats)

    def separate_masks(self, features: Tensor) -> list[Tensor]:
        """Masks per resolution, each ``(B, sources, N, F_i)`` and nonnegative."""
        lstm_out = nn.mean(self.lstm(features), axis=0)
        joint = nn.concat([features, lstm_out], axis=-1)
        masks = []
        for fc1, bn1, fc2, bn2, c in zip(self.dec_fc1, self.dec_bn1, self.dec_fc2, self.dec_bn2, self.stfts):
            h = nn.relu(bn1(fc1(joint)))
            # The last FC+BN is evaluated one source block at a time. Every block then
            # goes through identically shaped kernels, so permuting the source blocks
            # of the parameters permutes the masks bit for bit.
            per_source = []
            for s in range(self.config.num_sources):
                rows = slice(s * c.n_bins, (s + 1) * c.n_bins)
                z = nn.linear(h, fc2.weight[rows], fc2.bias[rows])
                z = nn.batchnorm(
                    z, bn2.gamma[rows], bn2.beta[rows], bn2.running_mean[rows], bn2.running_var[rows], bn2.training, bn2.momentum, bn2.eps
                )
                per_source.append(nn.relu(z))
            masks.append(nn.stack(per_source, axis=1))
        return masks

    def reconstruct(self, masks: list, specs: list[np.ndarray], length: int) -> Tensor:
        """Sum over resolutions of ``istft(mask * Y)``; returns ``(B, sources, length)``."""
        out = None
        for mask, spec, c in zip(masks, specs, self.stfts):
            mask = nn.as_tensor(mask)
            y = np.broadcast_to(spec[:, None], mask.shape)
            x = nn.masked_istft(mask, y, c, length)
            out = x if out is None else out + x
        return out

    def forward(self, mixture: np.ndarray) -> Tensor:
        x = np.atleast_2d(mixture)
        specs = self.spectrograms(x)
        return self.reconstruct(self.separate_masks(self.encode(specs)), specs, x.shape[-1])

    __call__ = forward

    # -- state ----------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, current in self.state_arrays():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing {name}")
            if arrays[name].shape != current.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model {current.shape}")
            current[...] = arrays[name]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def si_sdr_tensor(estimate: Tensor, reference: np.ndarray) -> Tensor:
    """Differentiable SI-SDR (dB) of a 1-D estimate against a fixed reference."""
    ref = np.asarray(reference, dtype=estimate.dtype)
    ref_energy = float(np.dot(ref, ref))
    alpha = nn.sum(estimate * ref) / ref_energy
    target = alpha * ref
    t_energy = nn.sum(nn.square(target))
    err_energy = nn.sum(nn.square(target - estimate))
    return (nn.log(t_energy) - nn.log(err_energy + EPS * t_energy)) * _DB


def separation_loss(estimates: Tensor, references: np.ndarray) -> Tensor:
    """Mean over chunks and sources of ``-SI-SDR``, or of the PES penalty for silent references.

    ``estimates``: ``(B, S, L)`` tensor; ``references``: ``(B, S, L)`` array.
    """
    terms = []
    b, s, _ = estimates.shape
    for i in range(b):
        for j in range(s):
            est = estimates[i, j]
            ref = references[i, j]
            if float(np.dot(ref, ref)) > EPS:
                terms.append(-si_sdr_tensor(est, ref))
            else:
                terms.append(nn.log(nn.mean(nn.square(est)) + EPS) * _DB)
    return nn.mean(nn.stack(terms))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    patience: int = 3
    seed: int = 0
    max_steps: int | None = None


@dataclass
class Trainer:
    """Owns the optimizer/schedule state so training can stop and resume exactly."""

    model: MrxModel
    config: TrainConfig = field(default_factory=TrainConfig)
    epoch: int = 0
    step_count: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.optimizer = nn.Adam(self.model.parameters(), lr=self.config.lr)
        self.schedule = nn.PlateauHalver(lr=self.config.lr, patience=self.config.patience)

    def step(self, mixtures: np.ndarray, stems: np.ndarray) -> float:
        self.model.train()
        self.optimizer.zero_grad()
        loss = separation_loss(self.model(mixtures), stems)
        loss.backward()
        self.optimizer.lr = self.schedule.lr
        self.optimizer.step()
        self.step_count += 1
        return loss.item()

    def run_epoch(self, data, val_data=None) -> dict:
        if not data:
            raise ValueError("training dataset is empty")
        rng = np.random.default_rng([self.config.seed, self.epoch])
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), self.config.batch_size):
            idx = order[start : start + self.config.batch_size]
            mix = np.stack([data[i][0] for i in idx])
            stems = np.stack([data[i][1] for i in idx])
            losses.append(self.step(mix, stems))
            if self.config.max_steps is not None and self.step_count >= self.config.max_steps:
                break
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(self.model, val_data) if val_data else train_loss
        record = {"epoch": self.epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "lr": self.schedule.lr}
        self.schedule.step(val_loss)
        self.epoch += 1
        self.history.append(record)
        log.info("epoch %d train %.4f val %.4f lr %.3g", record["epoch"], train_loss, val_loss, record["lr"])
        return record

    def fit(self, data, val_data=None, epochs: int | None = None) -> list:
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch(data, val_data)
            if self.config.max_steps is not None and self.step_count >= self.config.max_steps:
                break
        return self.history

    # resume support
    def save(self, path) -> None:
        arrays = self.model.state_arrays()
        state = self.optimizer.state
        if "m" in state:
            names = [n for n, _ in self.model.named_parameters()]
            arrays += [(f"adam.m.{n}", m) for n, m in zip(names, state["m"])]
            arrays += [(f"adam.v.{n}", v) for n, v in zip(names, state["v"])]
        header = {
            "model": self.model.config.to_json(),
            "dtype": self.model.dtype.name,
            "train": {
                "config": asdict(self.config),
                "epoch": self.epoch,
                "step_count": self.step_count,
                "adam_t": state.get("t", 0),
                "schedule": self.schedule.to_json(),
                "history": self.history,
            },
        }
        save_arrays(path, arrays, header)

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "Trainer":
        header, arrays = load_arrays(path)
        model = _model_from(header, arrays)
        tstate = header.get("train")
        if tstate is None:
            return cls(model, config or TrainConfig())
        trainer = cls(model, config or TrainConfig(**tstate["config"]))
        trainer.epoch = tstate["epoch"]
        trainer.step_count = tstate["step_count"]
        trainer.history = list(tstate["history"])
        trainer.schedule = nn.PlateauHalver.from_json(tstate["schedule"])
        if tstate["adam_t"]:
            names = [n for n, _ in model.named_parameters()]
            trainer.optimizer.state = {
                "t": tstate["adam_t"],
                "m": [arrays[f"adam.m.{n}"].astype(model.dtype) for n in names],
                "v": [arrays[f"adam.v.{n}"].astype(model.dtype) for n in names],
            }
        return trainer


def evaluate_loss(model: MrxModel, data) -> float:
    model.eval()
    with nn.no_grad():
        losses = [separation_loss(model(m[None]), s[None]).item() for m, s in data]
    model.train()
    return float(np.mean(losses))


def train(model: MrxModel, dataset, config: TrainConfig | None = None, val_dataset=None):
    """Train ``model`` in place on ``(mixture, stems)`` chunk pairs; returns ``(model, history)``."""
    trainer = Trainer(model, config or TrainConfig())
    trainer.fit(dataset, val_dataset)
    return model, trainer.history


# --------------------------------------------------------------------------
# inference and checkpoints
# --------------------------------------------------------------------------


def _forward_eval(model: MrxModel, x: np.ndarray) -> np.ndarray:
    with nn.no_grad():
        return model(x[None]).data[0].astype(np.float64)


def infer(model: MrxModel, mixture) -> list[AudioBuffer]:
    """Separate an arbitrary-length mixture.

    Inputs longer than one chunk are processed in chunk windows with 50 %
    overlap and cross-faded with triangular weights.
    """
    buf = mixture if isinstance(mixture, AudioBuffer) else AudioBuffer(mixture, model.config.sample_rate)
    x = buf.samples
    length = len(x)
    chunk = model.config.chunk_samples
    was_training = model.training
    model.eval()
    try:
        if length <= chunk:
            out = _forward_eval(model, x)
        else:
            hop = chunk // 2
            starts = list(range(0, length - chunk + 1, hop))
            if starts[-1] != length - chunk:
                starts.append(length - chunk)
            ramp = np.minimum(np.arange(chunk) + 1, chunk - np.arange(chunk)).astype(np.float64)
            out = np.zeros((model.config.num_sources, length))
            weight = np.zeros(length)
            for k, s in enumerate(starts):
                w = ramp.copy()
                if k == 0:
                    w[: chunk // 2] = w.max()
                if k == len(starts) - 1:
                    w[chunk // 2 :] = w.max()
                out[:, s : s + chunk] += _forward_eval(model, x[s : s + chunk]) * w
                weight[s : s + chunk] += w
            out /= weight
    finally:
        model.train(was_training)
    return [AudioBuffer(o, buf.sample_rate) for o in out]


def save_model(path, model: MrxModel) -> None:
    save_arrays(path, model.state_arrays(), {"model": model.config.to_json(), "dtype": model.dtype.name})


def _model_from(header: dict, arrays: dict) -> MrxModel:
    cfg = dict(header["model"])
    cfg["window_ms"] = tuple(cfg["window_ms"])
    model = MrxModel(MrxConfig(**cfg), dtype=header.get("dtype", "float32"))
    model.load_state_arrays(arrays)
    return model


def load_model(path) -> MrxModel:
    header, arrays = load_arrays(path)
    return _model_from(header, arrays)
