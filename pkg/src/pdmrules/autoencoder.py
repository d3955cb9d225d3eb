"""Residual 1D convolutional autoencoder: model, training loop, checkpoints.

The network is a stack of encoder blocks followed by a mirrored stack of
decoder blocks. Each block runs

    [channel resample] -> conv -> batch norm -> ReLU -> dropout
                       -> conv -> batch norm -> (+ skip)

where the optional resample adapts the channel count and the skip branch is
taken after it. Convolutions are same-padded, so the time length is
preserved end to end and the latent code has shape (latent_channels, length).
Block dilations grow exponentially (2, 4, 8, ...) to widen the receptive
field.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError, TrainingError
from .ingest import NormalizationStats, holdout_split
from .nn import Adam, BatchNorm1d, ChannelResample, Conv1d, Dropout, Parameter, ReLU

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PDMRULES"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    hidden_channels: int
    kernel_size: int
    dilation: int
    dropout: float

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.hidden_channels) < 1:
            raise ConfigError("block channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def has_resample(self) -> bool:
        return self.in_channels != self.out_channels


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int
    window_length: int
    num_blocks: int = 10
    hidden_channels: int = 30
    latent_channels: int = 32
    kernel_size: int = 3
    dropout: float = 0.2
    dilations: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.window_length < 1:
            raise ConfigError("input channels and window length must be positive")
        if self.num_blocks < 1:
            raise ConfigError(f"need at least one block per side, got {self.num_blocks}")
        if self.latent_channels < 1 or self.hidden_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dilations is not None:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
            if len(self.dilations) != self.num_blocks:
                raise ConfigError(
                    f"dilation schedule has {len(self.dilations)} entries "
                    f"for {self.num_blocks} blocks"
                )
            if any(d < 1 for d in self.dilations):
                raise ConfigError("dilations must be >= 1")

    def resolved_dilations(self) -> tuple[int, ...]:
        if self.dilations is not None:
            return self.dilations
        return tuple(2**i for i in range(1, self.num_blocks + 1))


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    epochs: int = 200
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val fraction must be in (0, 1), got {self.val_fraction}")


class ResidualBlock:
    def __init__(self, config: BlockConfig, rng):
        self.config = config
        self.resample = (
            ChannelResample(config.in_channels, config.out_channels, rng)
            if config.has_resample
            else None
        )
        self.conv1 = Conv1d(
            config.out_channels, config.hidden_channels, config.kernel_size, config.dilation, rng
        )
        self.bn1 = BatchNorm1d(config.hidden_channels)
        self.relu = ReLU()
        self.dropout = Dropout(config.dropout)
        self.conv2 = Conv1d(
            config.hidden_channels, config.out_channels, config.kernel_size, config.dilation, rng
        )
        self.bn2 = BatchNorm1d(config.out_channels)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        h = self.resample.forward(x) if self.resample is not None else x
        branch = self.conv1.forward(h)
        branch = self.bn1.forward(branch, train)
        branch = self.relu.forward(branch)
        branch = self.dropout.forward(branch, train, rng)
        branch = self.conv2.forward(branch)
        branch = self.bn2.forward(branch, train)
        return branch + h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = self.bn2.backward(dout)
        d = self.conv2.backward(d)
        d = self.dropout.backward(d)
        d = self.relu.backward(d)
        d = self.bn1.backward(d)
        d = self.conv1.backward(d)
        d_total = d + dout  # skip branch
        if self.resample is not None:
            return self.resample.backward(d_total)
        return d_total

    def layers(self):
        named = []
        if self.resample is not None:
            named.append(("resample", self.resample))
        named.extend(
            [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        )
        return named


def _block_plan(config: AutoencoderConfig) -> list[BlockConfig]:
    c, h, m, n = (
        config.in_channels,
        config.hidden_channels,
        config.latent_channels,
        config.num_blocks,
    )
    dils = config.resolved_dilations()
    plan = []
    for i in range(n):  # encoder
        plan.append(
            BlockConfig(
                in_channels=c if i == 0 else h,
                out_channels=m if i == n - 1 else h,
                hidden_channels=h,
                kernel_size=config.kernel_size,
                dilation=dils[i],
                dropout=config.dropout,
            )
        )
    for i in range(n):  # decoder
        plan.append(
            BlockConfig(
                in_channels=m if i == 0 else h,
                out_channels=c if i == n - 1 else h,
                hidden_channels=h,
                kernel_size=config.kernel_size,
                dilation=dils[i],
                dropout=config.dropout,
            )
        )
    return plan


class AutoencoderNet:
    """The block stack. Construction is deterministic given the config seed."""

    def __init__(self, config: AutoencoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        plan = _block_plan(config)
        n = config.num_blocks
        self.encoder = [ResidualBlock(bc, rng) for bc in plan[:n]]
        self.decoder = [ResidualBlock(bc, rng) for bc in plan[n:]]
        self.last_latent: np.ndarray | None = None
        self._parameters: list[Parameter] = []
        self._buffers: list[tuple[str, BatchNorm1d, str]] = []
        for side, blocks in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, block in enumerate(blocks):
                for layer_name, layer in block.layers():
                    prefix = f"{side}.{i}.{layer_name}"
                    for p in layer.parameters():
                        p.name = f"{prefix}.{p.name}"
                        self._parameters.append(p)
                    if isinstance(layer, BatchNorm1d):
                        for buf_name, _ in layer.buffers():
                            self._buffers.append((f"{prefix}.{buf_name}", layer, buf_name))

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected (batch, channels, length), got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model expects {self.config.in_channels} channels, input has {x.shape[1]}"
            )
        if x.shape[2] != self.config.window_length:
            raise ShapeError(
                f"model expects windows of length {self.config.window_length}, "
                f"input has {x.shape[2]}"
            )
        return x

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        h = self._check_input(x)
        for block in self.encoder:
            h = block.forward(h, train, rng)
        self.last_latent = h
        for block in self.decoder:
            h = block.forward(h, train, rng)
        return h

    def encode(self, x: np.ndarray) -> np.ndarray:
        h = self._check_input(x)
        for block in self.encoder:
            h = block.forward(h, train=False)
        return h

    def backward(self, d_recon: np.ndarray) -> np.ndarray:
        d = d_recon
        for block in reversed(self.decoder):
            d = block.backward(d)
        for block in reversed(self.encoder):
            d = block.backward(d)
        return d

    def parameters(self) -> list[Parameter]:
        return self._parameters

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value for p in self._parameters}
        for name, layer, buf_name in self._buffers:
            state[name] = getattr(layer, buf_name)
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(state) != set(own):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise FormatError(f"state mismatch: missing {missing}, unexpected {extra}")
        for p in self._parameters:
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise FormatError(
                    f"tensor {p.name} has shape {value.shape}, expected {p.value.shape}"
                )
            p.value[...] = value
        for name, layer, buf_name in self._buffers:
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != getattr(layer, buf_name).shape:
                raise FormatError(f"buffer {name} has unexpected shape {value.shape}")
            layer.set_buffer(buf_name, value)


@dataclass
class AutoencoderModel:
    """Everything needed to score new windows: net, config, stats, channel names."""

    config: AutoencoderConfig
    net: AutoencoderNet
    normalization: NormalizationStats
    channels: tuple[str, ...]


def reconstruction_error(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Sum of squared elementwise differences between a window and its reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    diff = x - x_hat
    return float(np.sum(diff * diff))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    net: AutoencoderNet
    curve: list[EpochStats]
    validation_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _batch_errors(net: AutoencoderNet, x: np.ndarray, batch_size: int) -> np.ndarray:
    errors = np.empty(x.shape[0])
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        recon = net.forward(xb, train=False)
        diff = recon - xb
        errors[start : start + xb.shape[0]] = (diff * diff).sum(axis=(1, 2))
    return errors


def train(windows, config: AutoencoderConfig, training: TrainingConfig) -> TrainResult:
    """Fit the autoencoder on normalized windows.

    The final ``val_fraction`` of windows (in temporal order) is held out; the
    returned validation errors feed threshold calibration. Deterministic for a
    fixed pair of seeds.
    """
    windows = list(windows)
    if not windows:
        raise DataError("no windows to train on")
    fit_windows, val_windows = holdout_split(windows, training.val_fraction)
    x_fit = np.stack([np.asarray(w.values, dtype=np.float64) for w in fit_windows])
    x_val = np.stack([np.asarray(w.values, dtype=np.float64) for w in val_windows])
    net = AutoencoderNet(config)
    if x_fit.shape[1] != config.in_channels or x_fit.shape[2] != config.window_length:
        raise ShapeError(
            f"windows have shape {x_fit.shape[1:]}, model expects "
            f"({config.in_channels}, {config.window_length})"
        )

    optimizer = Adam(
        net.parameters(), training.learning_rate, training.beta1, training.beta2, training.eps
    )
    rng = np.random.default_rng(training.seed)
    curve: list[EpochStats] = []
    n_fit = x_fit.shape[0]
    for epoch in range(1, training.epochs + 1):
        order = rng.permutation(n_fit)
        batch_losses = []
        for start in range(0, n_fit, training.batch_size):
            idx = order[start : start + training.batch_size]
            xb = x_fit[idx]
            recon = net.forward(xb, train=True, rng=rng)
            diff = recon - xb
            loss = float((diff * diff).sum() / xb.shape[0])
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch} (non-finite loss)")
            optimizer.zero_grad()
            net.backward(2.0 * diff / xb.shape[0])
            optimizer.step()
            batch_losses.append(loss)
        val_errors = _batch_errors(net, x_val, training.batch_size)
        if not np.all(np.isfinite(val_errors)):
            raise TrainingError(f"training diverged at epoch {epoch} (non-finite validation loss)")
        stats = EpochStats(epoch, float(np.mean(batch_losses)), float(val_errors.mean()))
        curve.append(stats)
        logger.debug(
            "epoch %d: train %.6g val %.6g", stats.epoch, stats.train_loss, stats.val_loss
        )
    return TrainResult(net, curve, _batch_errors(net, x_val, training.batch_size))


def save_model(model: AutoencoderModel, path) -> None:
    """Versioned binary checkpoint: magic, version, JSON header, raw float64 tensors."""
    state = model.net.state_dict()
    header = {
        "config": asdict(model.config),
        "channels": list(model.channels),
        "normalization": {
            "mean": [float(v) for v in model.normalization.mean],
            "std": [float(v) for v in model.normalization.std],
            "constant": [bool(v) for v in model.normalization.constant],
        },
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> AutoencoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None
    offset += header_len

    try:
        config_dict = dict(header["config"])
        if config_dict.get("dilations") is not None:
            config_dict["dilations"] = tuple(config_dict["dilations"])
        config = AutoencoderConfig(**config_dict)
        channels = tuple(header["channels"])
        norm = header["normalization"]
        manifest = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint header: {exc}") from None

    state: dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: checkpoint truncated at tensor {entry['name']!r}")
        state[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape)
        offset += nbytes

    net = AutoencoderNet(config)
    net.load_state(state)
    stats = NormalizationStats(
        np.array(norm["mean"], dtype=np.float64),
        np.array(norm["std"], dtype=np.float64),
        np.array(norm["constant"], dtype=bool),
    )
    return AutoencoderModel(config=config, net=net, normalization=stats, channels=channels)
