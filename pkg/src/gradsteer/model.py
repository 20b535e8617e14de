"""Small mask-based time-domain separator over a flat parameter vector.

Layout: strided conv encoder (no bias, SiLU) -> global layer norm ->
1x1 bottleneck -> ``n_blocks`` residual dilated conv blocks -> 1x1 mask
head with independent sigmoid masks per source -> masked encodings ->
shared transposed-conv decoder (no bias), trimmed to the input length.

The input is RMS-normalized first; with no bias on the encoder/decoder
path a zero mixture yields exactly zero estimates.

SiLU rather than ReLU keeps the loss smooth in the parameters, so central
finite differences agree with the analytic gradient without kink artifacts.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import reweight, signal
from .mixgen import WaveformBatch


class ModelError(ValueError):
    pass


class InputTooShort(ModelError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    enc_kernel: int = 17
    enc_stride: int = 8
    n_bases: int = 64
    n_blocks: int = 2
    hidden: int = 64
    n_sources: int = 2
    block_kernel: int = 3

    def __post_init__(self):
        counts = (self.enc_kernel, self.enc_stride, self.n_bases, self.n_blocks, self.hidden, self.n_sources)
        if min(counts) < 1:
            raise ModelError(f"all sizes must be >= 1: {self}")
        if self.enc_stride > self.enc_kernel:
            raise ModelError("enc_stride must not exceed enc_kernel")

    def shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        """Parameter names and shapes, in flat-vector order."""
        s = OrderedDict()
        s["encoder.weight"] = (self.n_bases, 1, self.enc_kernel)
        s["norm.gain"] = (self.n_bases,)
        s["norm.bias"] = (self.n_bases,)
        s["bottleneck.weight"] = (self.hidden, self.n_bases, 1)
        s["bottleneck.bias"] = (self.hidden,)
        for b in range(self.n_blocks):
            s[f"block{b}.conv.weight"] = (self.hidden, self.hidden, self.block_kernel)
            s[f"block{b}.conv.bias"] = (self.hidden,)
            s[f"block{b}.out.weight"] = (self.hidden, self.hidden, 1)
            s[f"block{b}.out.bias"] = (self.hidden,)
        s["mask.weight"] = (self.n_sources * self.n_bases, self.hidden, 1)
        s["mask.bias"] = (self.n_sources * self.n_bases,)
        s["decoder.weight"] = (self.n_bases, 1, self.enc_kernel)
        return s

    def n_params(self) -> int:
        return sum(math.prod(shape) for shape in self.shapes().values())


@dataclass
class SeparatorParams:
    """Flat parameter vector ``theta`` plus the manifest ``name -> (offset, shape)``."""

    theta: torch.Tensor
    config: ModelConfig

    @property
    def manifest(self) -> "OrderedDict[str, tuple[int, tuple[int, ...]]]":
        out, offset = OrderedDict(), 0
        for name, shape in self.config.shapes().items():
            out[name] = (offset, shape)
            offset += math.prod(shape)
        return out

    def views(self, theta: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        theta = self.theta if theta is None else theta
        return {name: theta[o : o + math.prod(shape)].view(shape) for name, (o, shape) in self.manifest.items()}

    def clone(self) -> "SeparatorParams":
        return SeparatorParams(self.theta.detach().clone(), self.config)


def _fan_in(name: str, shape: tuple[int, ...], config: ModelConfig) -> int:
    if name.startswith("norm."):
        return 0
    if name == "decoder.weight":
        return config.n_bases
    weight_shape = shape if name.endswith("weight") else config.shapes()[name.replace("bias", "weight")]
    return math.prod(weight_shape[1:])


def init_params(config: ModelConfig, seed: int, dtype=torch.float64) -> SeparatorParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gain 1, bias 0."""
    gen = torch.Generator().manual_seed(int(seed))
    chunks = []
    for name, shape in config.shapes().items():
        if name == "norm.gain":
            chunks.append(torch.ones(shape, dtype=torch.float64))
        elif name == "norm.bias":
            chunks.append(torch.zeros(shape, dtype=torch.float64))
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape, config))
            chunks.append((torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    theta = torch.cat([c.reshape(-1) for c in chunks]).to(dtype)
    return SeparatorParams(theta, config)


def _global_layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain[None, :, None] + bias[None, :, None]


def separate(params: SeparatorParams, mixtures: torch.Tensor, theta: torch.Tensor | None = None,
             return_masks: bool = False):
    """Batched forward pass: ``mixtures`` [B, T] -> estimates [B, N, T]."""
    cfg = params.config
    w = params.views(theta)
    x = mixtures
    if x.dim() == 1:
        x = x.unsqueeze(0)
    length = x.shape[-1]
    if length < cfg.enc_kernel:
        raise InputTooShort(f"input of {length} samples is shorter than the {cfg.enc_kernel}-sample kernel")
    frames = -(-(length - cfg.enc_kernel) // cfg.enc_stride) + 1
    padded = (frames - 1) * cfg.enc_stride + cfg.enc_kernel
    x = x / torch.sqrt((x * x).mean(-1, keepdim=True) + 1e-8)
    x = F.pad(x, (0, padded - length)).unsqueeze(1)

    enc = F.silu(F.conv1d(x, w["encoder.weight"], stride=cfg.enc_stride))
    h = _global_layer_norm(enc, w["norm.gain"], w["norm.bias"])
    h = F.conv1d(h, w["bottleneck.weight"], w["bottleneck.bias"])
    for b in range(cfg.n_blocks):
        dilation = 2**b
        pad = dilation * (cfg.block_kernel - 1) // 2
        y = F.conv1d(F.silu(h), w[f"block{b}.conv.weight"], w[f"block{b}.conv.bias"], padding=pad, dilation=dilation)
        h = h + F.conv1d(F.silu(y), w[f"block{b}.out.weight"], w[f"block{b}.out.bias"])
    masks = torch.sigmoid(F.conv1d(F.silu(h), w["mask.weight"], w["mask.bias"]))
    masks = masks.view(x.shape[0], cfg.n_sources, cfg.n_bases, -1)
    masked = (masks * enc.unsqueeze(1)).reshape(x.shape[0] * cfg.n_sources, cfg.n_bases, -1)
    out = F.conv_transpose1d(masked, w["decoder.weight"], stride=cfg.enc_stride)
    est = out.view(x.shape[0], cfg.n_sources, -1)[..., :length]
    return (est, masks) if return_masks else est


def forward(params: SeparatorParams, mixture) -> torch.Tensor:
    """Separate a single mixture [T] (or a batch [B, T]) into N estimates."""
    x = torch.as_tensor(np.asarray(mixture) if not isinstance(mixture, torch.Tensor) else mixture,
                        dtype=params.theta.dtype)
    est = separate(params, x)
    return est[0] if x.dim() == 1 else est


def unit_losses(params: SeparatorParams, batch: WaveformBatch, units: str = reweight.PER_EXAMPLE,
                theta: torch.Tensor | None = None, cap_db: float = signal.DEFAULT_CAP_DB):
    """Per-unit losses with autograd graph attached.

    Returns ``(losses, unit_classes, unit_mask)``; for per-source units the
    flattened order is example-major and each loss is the negative per-source
    SI-SDRi under the example's PIT assignment.
    """
    dtype = params.theta.dtype
    mix = torch.as_tensor(batch.mixtures, dtype=dtype)
    refs = torch.as_tensor(batch.sources, dtype=dtype)
    est = separate(params, mix, theta)
    gain, active, _ = signal.per_source_si_sdri(est, refs, mix, torch.as_tensor(batch.active), cap_db)
    labels = np.asarray(batch.labels)
    if units == reweight.PER_SOURCE:
        return -gain.reshape(-1), labels.reshape(-1), active.numpy().reshape(-1)
    per_example = -(gain.sum(-1) / active.sum(-1).to(gain.dtype))
    return per_example, labels[:, 0], np.ones(len(batch), dtype=bool)


def loss_and_grads(params: SeparatorParams, batch: WaveformBatch, pmf, units: str | None = None,
                   cap_db: float = signal.DEFAULT_CAP_DB):
    """Per-unit losses and the gradient of ``sum_i p_i L_i`` with ``p`` detached.

    ``pmf`` is either a fixed :class:`~gradsteer.reweight.BatchPMF` or a
    callable ``(losses, classes, mask) -> BatchPMF`` evaluated on the detached
    losses of this same forward pass.
    """
    if units is None:
        units = pmf.units if isinstance(pmf, reweight.BatchPMF) else reweight.PER_EXAMPLE
    theta = params.theta.detach().clone().requires_grad_(True)
    losses, classes, mask = unit_losses(params, batch, units, theta, cap_db)
    detached = losses.detach().cpu().numpy().astype(np.float64)
    if callable(pmf) and not isinstance(pmf, reweight.BatchPMF):
        pmf = pmf(detached, classes, mask)
    objective = reweight.weighted_objective(losses, pmf)
    (grad,) = torch.autograd.grad(objective, theta)
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteGradient("gradient has NaN or Inf entries")
    return detached, grad, pmf


# --- checkpoints ------------------------------------------------------------

_MAGIC = b"GSCKPT01"
_DTYPES = {"float64": (torch.float64, "<f8"), "float32": (torch.float32, "<f4")}


def write_blob(path, manifest: dict, tensors: list[torch.Tensor]) -> None:
    """Header (magic, u64 JSON length, JSON manifest) then raw little-endian payload."""
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for t in tensors:
            _, np_dtype = _DTYPES[str(t.dtype).replace("torch.", "")]
            f.write(t.detach().cpu().numpy().astype(np_dtype, copy=False).tobytes())


def read_blob(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    return json.loads(data[16 : 16 + n].decode("utf-8")), data[16 + n :]


def save_checkpoint(path, params: SeparatorParams, seed: int, epoch: int, extra: dict | None = None) -> None:
    dtype = str(params.theta.dtype).replace("torch.", "")
    manifest = {
        "kind": "separator",
        "config": asdict(params.config),
        "dtype": dtype,
        "layers": [{"name": n, "offset": o, "shape": list(s)} for n, (o, s) in params.manifest.items()],
        "seed": int(seed),
        "epoch": int(epoch),
        **(extra or {}),
    }
    write_blob(path, manifest, [params.theta])


def load_checkpoint(path) -> tuple[SeparatorParams, dict]:
    manifest, payload = read_blob(path)
    if manifest.get("kind") != "separator":
        raise ModelError(f"{path}: not a separator checkpoint")
    config = ModelConfig(**manifest["config"])
    torch_dtype, np_dtype = _DTYPES[manifest["dtype"]]
    theta = torch.from_numpy(np.frombuffer(payload, dtype=np_dtype).copy()).to(torch_dtype)
    if theta.numel() != config.n_params():
        raise ModelError(f"{path}: payload has {theta.numel()} values, config needs {config.n_params()}")
    return SeparatorParams(theta, config), manifest
