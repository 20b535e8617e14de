"""Scale-invariant SDR metrics and the permutation-invariant separation loss.

All functions accept numpy arrays or torch tensors and return torch tensors.
Arrays are batched over leading dimensions; the last axis is time and, for
source sets, the second-to-last axis indexes the ``N`` source slots.
Inactive slots are all-zero references and are excluded from every mean.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

DEFAULT_CAP_DB = 60.0
ENERGY_EPS = 1e-12  # per sample; zero-reference threshold is ENERGY_EPS * T
MAX_EXHAUSTIVE_SOURCES = 6


class SignalError(ValueError):
    pass


class ZeroReference(SignalError):
    pass


class LengthMismatch(SignalError):
    pass


class AllSourcesInactive(SignalError):
    pass


@dataclass
class PitResult:
    """Outcome of a permutation search.

    ``permutation[..., j]`` is the estimate index assigned to reference ``j``.
    ``per_source_si_sdr`` holds NaN in inactive slots.
    """

    permutation: torch.Tensor
    per_source_si_sdr: torch.Tensor
    mean_si_sdr: torch.Tensor


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _energy(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(-1)


def _raw_si_sdr(est: torch.Tensor, ref: torch.Tensor, cap_db: float) -> torch.Tensor:
    # No validation: zero references give a finite, meaningless value that
    # callers mask out.
    ref_energy = _energy(ref)
    safe = torch.where(ref_energy > 0, ref_energy, torch.ones_like(ref_energy))
    rho = (est * ref).sum(-1) / safe
    target = rho.unsqueeze(-1) * ref
    tiny = torch.finfo(target.dtype).tiny
    ratio = (_energy(target) + tiny) / (_energy(target - est) + tiny)
    return (10.0 * torch.log10(ratio)).clamp(-cap_db, cap_db)


def si_sdr(estimate, reference, cap_db: float = DEFAULT_CAP_DB) -> torch.Tensor:
    """SI-SDR in dB of ``estimate`` against ``reference``, clamped to +/-``cap_db``.

    The reference is projected onto the estimate direction with the scalar
    ``rho = <est, ref> / ||ref||^2``, so any nonzero rescaling of the
    reference leaves the value unchanged.
    """
    est, ref = _as_tensor(estimate), _as_tensor(reference)
    if est.shape[-1] != ref.shape[-1]:
        raise LengthMismatch(f"estimate has {est.shape[-1]} samples, reference {ref.shape[-1]}")
    est, ref = torch.broadcast_tensors(est, ref.to(est.dtype))
    if bool((_energy(ref) < ENERGY_EPS * ref.shape[-1]).any()):
        raise ZeroReference("reference energy below threshold")
    return _raw_si_sdr(est, ref, cap_db)


@lru_cache(maxsize=None)
def _permutations(n: int) -> torch.Tensor:
    return torch.tensor(list(itertools.permutations(range(n))), dtype=torch.long)


def infer_active(references) -> torch.Tensor:
    ref = _as_tensor(references)
    return _energy(ref) >= ENERGY_EPS * ref.shape[-1]


def _check_sets(estimates, references, active):
    est, ref = _as_tensor(estimates), _as_tensor(references)
    if est.shape[-1] != ref.shape[-1]:
        raise LengthMismatch(f"estimates have {est.shape[-1]} samples, references {ref.shape[-1]}")
    if est.shape[-2] != ref.shape[-2]:
        raise ValueError(f"{est.shape[-2]} estimates for {ref.shape[-2]} references")
    ref = ref.to(est.dtype)
    if active is None:
        active = infer_active(ref)
    else:
        active = torch.as_tensor(np.asarray(active) if not isinstance(active, torch.Tensor) else active)
        active = active.to(torch.bool) & infer_active(ref)
    if bool((active.sum(-1) == 0).any()):
        raise AllSourcesInactive("every reference slot is inactive")
    return est, ref, active


def _pairwise(est: torch.Tensor, ref: torch.Tensor, cap_db: float) -> torch.Tensor:
    # [..., j (reference), k (estimate)]
    return _raw_si_sdr(est.unsqueeze(-3), ref.unsqueeze(-2), cap_db)


def _best_permutation(pair: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    n = pair.shape[-1]
    weights = active.to(pair.dtype)
    if n <= MAX_EXHAUSTIVE_SOURCES:
        perms = _permutations(n)
        rows = torch.arange(n)
        scores = (pair.detach()[..., rows, perms] * weights.unsqueeze(-2)).sum(-1)
        best = scores.argmax(-1)
        return perms[best]
    from scipy.optimize import linear_sum_assignment

    # Mean over a fixed active set is additive, so an assignment solve is exact.
    flat_pair = (pair.detach() * weights.unsqueeze(-1)).reshape(-1, n, n).cpu().numpy()
    out = np.empty((flat_pair.shape[0], n), dtype=np.int64)
    for b, mat in enumerate(flat_pair):
        rows, cols = linear_sum_assignment(mat, maximize=True)
        out[b, rows] = cols
    return torch.from_numpy(out).reshape(pair.shape[:-1])


def _masked_mean(values: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    zeroed = torch.where(active, values, torch.zeros_like(values))
    return zeroed.sum(-1) / active.sum(-1).to(values.dtype)


def pit_si_sdr(estimates, references, active=None, cap_db: float = DEFAULT_CAP_DB) -> PitResult:
    """Permutation-invariant SI-SDR maximizing the mean over active references."""
    est, ref, active = _check_sets(estimates, references, active)
    pair = _pairwise(est, ref, cap_db)
    perm = _best_permutation(pair, active)
    chosen = pair.gather(-1, perm.unsqueeze(-1)).squeeze(-1)
    per_source = torch.where(active, chosen, torch.full_like(chosen, float("nan")))
    return PitResult(perm, per_source, _masked_mean(chosen, active))


def per_source_si_sdri(
    estimates, references, mixture, active=None, cap_db: float = DEFAULT_CAP_DB
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-slot SI-SDR improvement under the PIT-optimal assignment.

    Returns ``(improvement, active, permutation)``; improvement is zero in
    inactive slots so it can be differentiated and masked safely.
    """
    est, ref, active = _check_sets(estimates, references, active)
    mix = _as_tensor(mixture).to(est.dtype)
    if mix.shape[-1] != est.shape[-1]:
        raise LengthMismatch(f"mixture has {mix.shape[-1]} samples, sources {est.shape[-1]}")
    pair = _pairwise(est, ref, cap_db)
    perm = _best_permutation(pair, active)
    chosen = pair.gather(-1, perm.unsqueeze(-1)).squeeze(-1)
    baseline = _raw_si_sdr(mix.unsqueeze(-2).expand_as(ref), ref, cap_db)
    gain = torch.where(active, chosen - baseline, torch.zeros_like(chosen))
    return gain, active, perm


def si_sdri(estimates, references, mixture, active=None, cap_db: float = DEFAULT_CAP_DB) -> torch.Tensor:
    """Mean SI-SDR improvement (dB) of the estimates over the raw mixture."""
    gain, active, _ = per_source_si_sdri(estimates, references, mixture, active, cap_db)
    return _masked_mean(gain, active)


def separation_loss(estimates, references, mixture, active=None, cap_db: float = DEFAULT_CAP_DB) -> torch.Tensor:
    """Per-example training loss: negative SI-SDRi."""
    return -si_sdri(estimates, references, mixture, active, cap_db)
