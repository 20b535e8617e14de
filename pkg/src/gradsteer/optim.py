"""Adam with fixed-threshold gradient-norm clipping, on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .model import NonFiniteGradient, read_blob, write_blob


class DimensionMismatch(ValueError):
    pass


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0

    @classmethod
    def zeros_like(cls, theta: torch.Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(theta), torch.zeros_like(theta), 0, **hyper)


def clip_grad_norm(g, max_norm: float) -> torch.Tensor:
    """Rescale ``g`` to L2 norm ``max_norm`` if it is larger; otherwise return it as is."""
    g = _t(g)
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if not bool(torch.isfinite(g).all()):
        raise NonFiniteGradient("cannot clip a non-finite gradient")
    norm = float(torch.linalg.vector_norm(g))
    if norm <= max_norm:
        return g
    return g * (max_norm / norm)


def adam_step(params, state: AdamState, delta) -> tuple[torch.Tensor, AdamState]:
    theta = _t(params)
    delta = _t(delta, theta)
    if delta.shape != theta.shape or state.m.shape != theta.shape:
        raise DimensionMismatch(f"params {tuple(theta.shape)}, delta {tuple(delta.shape)}, state {tuple(state.m.shape)}")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1 - state.beta1) * delta
    v = state.beta2 * state.v + (1 - state.beta2) * delta * delta
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_theta = theta - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new_theta, replace(state, m=m, v=v, step_count=t)


def sgd_step(params, lr: float, delta) -> torch.Tensor:
    """Plain ``theta - lr * delta``."""
    theta = _t(params)
    delta = _t(delta, theta)
    if delta.shape != theta.shape:
        raise DimensionMismatch(f"params {tuple(theta.shape)}, delta {tuple(delta.shape)}")
    return theta - lr * delta


def save_state(path, state: AdamState) -> None:
    manifest = {
        "kind": "adam",
        "dtype": str(state.m.dtype).replace("torch.", ""),
        "size": int(state.m.numel()),
        "step_count": state.step_count,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "clip_norm": state.clip_norm,
    }
    write_blob(path, manifest, [state.m, state.v])


def load_state(path) -> AdamState:
    manifest, payload = read_blob(path)
    if manifest.get("kind") != "adam":
        raise ValueError(f"{path}: not an optimizer state file")
    np_dtype, torch_dtype = ("<f8", torch.float64) if manifest["dtype"] == "float64" else ("<f4", torch.float32)
    flat = torch.from_numpy(np.frombuffer(payload, dtype=np_dtype).copy()).to(torch_dtype)
    n = manifest["size"]
    return AdamState(
        flat[:n].clone(), flat[n:].clone(), manifest["step_count"], manifest["lr"], manifest["beta1"],
        manifest["beta2"], manifest["eps"], manifest["clip_norm"],
    )
