"""Decomposition, intensity and gradient losses.

The decomposition loss compares the measured state-distance matrix of every
layer with a target matrix that decays from 1 on the diagonal towards the
source-feature similarity ``mu`` in the corner. It can be evaluated on every
constrained pair or on a sampled support set (adjacent pairs plus a random
subset of the rest), which keeps the number of distance evaluations linear in
the number of transition states.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from contifuse.model import StateStack

EPS = 1e-8
MU_RANGE = (1e-4, 1.0 - 1e-4)

# ---------------------------------------------------------------------------
# evaluation counters


@dataclass
class GammaCounter:
    pairs: int = 0
    mu: int = 0

    @property
    def total(self) -> int:
        return self.pairs + self.mu


_active_counters: list[GammaCounter] = []


@contextlib.contextmanager
def count_gamma_evaluations() -> Iterator[GammaCounter]:
    """Count distance evaluations made inside the block."""
    counter = GammaCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record(kind: str) -> None:
    for c in _active_counters:
        setattr(c, kind, getattr(c, kind) + 1)


# ---------------------------------------------------------------------------
# distance metric


def pearson_channel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pearson correlation over the last two axes.

    A zero-variance map correlates 0 with anything.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] * a.shape[-2] < 2:
        raise ValueError("correlation needs at least two elements")
    a = a.flatten(-2)
    b = b.flatten(-2)
    a = a - a.mean(-1, keepdim=True)
    b = b - b.mean(-1, keepdim=True)
    cov = (a * b).sum(-1)
    var_a = (a * a).sum(-1)
    var_b = (b * b).sum(-1)
    return cov / torch.sqrt((var_a + EPS) * (var_b + EPS))


def _gamma(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"feature shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    return pearson_channel(x, y).mean(-1)


def gamma_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Channel-averaged Pearson correlation of two ``[B,] C x H x W`` features.

    Larger means closer; identical non-constant features give 1.
    """
    _record("pairs")
    return _gamma(x, y)


def ssim_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Channel-averaged global SSIM; ablation alternative to ``gamma_distance``."""
    _record("pairs")
    if x.shape != y.shape:
        raise ValueError(f"feature shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    c1, c2 = 0.01**2, 0.03**2
    xf, yf = x.flatten(-2), y.flatten(-2)
    mx, my = xf.mean(-1), yf.mean(-1)
    vx = ((xf - mx[..., None]) ** 2).mean(-1)
    vy = ((yf - my[..., None]) ** 2).mean(-1)
    cov = ((xf - mx[..., None]) * (yf - my[..., None])).mean(-1)
    ssim = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return ssim.mean(-1)


DISTANCES: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "pearson": gamma_distance,
    "ssim": ssim_distance,
}


def source_similarity(stack: StateStack) -> torch.Tensor:
    """Clamped, gradient-free similarity of the two source features, per sample."""
    _record("mu")
    with torch.no_grad():
        mu = _gamma(stack.visible, stack.infrared)
    return mu.detach().clamp(*MU_RANGE)


# ---------------------------------------------------------------------------
# decay functions and matrices


def _ops(x):
    if isinstance(x, torch.Tensor):
        return torch.log, torch.exp
    return np.log, np.exp


def gaussian_decay(p, mu, s):
    """exp(-p^2 / (2 sigma)) with sigma chosen so the value at p = s-1 is mu."""
    log, exp = _ops(mu)
    sigma = -((s - 1) ** 2) / (2 * log(mu))
    return exp(-(p**2) / (2 * sigma))


def linear_decay(p, mu, s):
    return 1 - p * (1 - mu) / (s - 1)


DECAYS = {"gaussian": gaussian_decay, "linear": linear_decay}


def decay_span(num_states: int, convention: str = "corner") -> int:
    """The ``s`` argument of the decay for a stack with K transition states.

    ``"corner"`` puts mu exactly at index distance K+1 (the source pair);
    ``"literal"`` passes s = K+1, which reaches mu one step earlier.
    """
    if convention == "corner":
        return num_states + 2
    if convention == "literal":
        return num_states + 1
    raise ValueError(f"unknown span convention {convention!r}")


def _decay_fn(decay):
    if callable(decay):
        return decay
    try:
        return DECAYS[decay]
    except KeyError:
        raise ValueError(f"unknown decay {decay!r}") from None


def build_target_matrix(num_states: int, mu, decay="gaussian", span: str = "corner"):
    """Target (K+2) x (K+2) matrix ``Omega(|i-j|, mu, s)``.

    ``mu`` may be a float (returns a numpy array) or a tensor of shape ``(B,)``
    (returns ``B x (K+2) x (K+2)``).
    """
    fn = _decay_fn(decay)
    n = num_states + 2
    s = decay_span(num_states, span)
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    if isinstance(mu, torch.Tensor):
        p = torch.as_tensor(dist, dtype=mu.dtype, device=mu.device)
        m = mu.reshape(-1, 1, 1)
        out = fn(p[None], m, s)
        return torch.where(p[None] == 0, torch.ones_like(out), out)
    out = fn(dist, float(mu), s)
    out[dist == 0] = 1.0
    return out


def build_distance_matrix(
    stack: StateStack, pairs: Sequence[tuple[int, int]] | None = None, distance: str = "pearson"
) -> torch.Tensor:
    """Measured ``B x (K+2) x (K+2)`` distance matrix.

    With ``pairs`` only those entries (and their mirrors) are evaluated; the
    rest are NaN.
    """
    gamma = DISTANCES[distance]
    n = len(stack)
    b = stack.visible.shape[0] if stack.visible.dim() == 4 else 1
    ref = stack.visible
    out = torch.full((b, n, n), float("nan"), dtype=ref.dtype, device=ref.device)
    if pairs is None:
        pairs = [(i, j) for i in range(n) for j in range(i + 1)]
    for i, j in pairs:
        g = gamma(stack[i], stack[j]).reshape(b)
        out[:, i, j] = g
        out[:, j, i] = g
    return out


# ---------------------------------------------------------------------------
# support decomposition sampling


@dataclass(frozen=True)
class ConstraintSet:
    num_states: int
    seed: int | None
    adjacent: tuple[tuple[int, int], ...]
    sampled: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        return self.adjacent + self.sampled

    def __len__(self) -> int:
        return len(self.adjacent) + len(self.sampled)

    def __iter__(self):
        return iter(self.pairs)


def adjacent_pairs(num_states: int) -> tuple[tuple[int, int], ...]:
    return tuple((i + 1, i) for i in range(num_states + 1))


def eligible_pool(num_states: int) -> list[tuple[int, int]]:
    """Non-adjacent pairs (u, v), u > v, touching neither source state."""
    k = num_states
    return [(u, v) for u in range(1, k + 1) for v in range(1, u - 1)]


def constrained_pairs(num_states: int) -> list[tuple[int, int]]:
    """Lower-triangle pairs of the full loss: no diagonal, no source corner."""
    n = num_states + 2
    return [(i, j) for i in range(n) for j in range(i) if (i, j) != (n - 1, 0)]


def sds_sample(seed: int, num_states: int) -> ConstraintSet:
    """Adjacent pairs plus up to K+1 distinct pairs drawn from the eligible pool."""
    if num_states < 1:
        raise ValueError("num_states must be >= 1")
    pool = eligible_pool(num_states)
    m = min(num_states + 1, len(pool))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=m, replace=False) if m else []
    return ConstraintSet(
        num_states=num_states,
        seed=seed,
        adjacent=adjacent_pairs(num_states),
        sampled=tuple(pool[i] for i in picks),
    )


def full_constraint_set(num_states: int) -> ConstraintSet:
    pairs = constrained_pairs(num_states)
    adj = adjacent_pairs(num_states)
    return ConstraintSet(num_states, None, adj, tuple(p for p in pairs if p not in adj))


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from integer keys, e.g. (run seed, step, layer)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# decomposition loss


def _pair_errors(stack, pairs, mu, decay, span, distance):
    """Squared target errors per pair, stacked as ``B x len(pairs)``."""
    gamma = DISTANCES[distance]
    k = stack.num_states
    fn = _decay_fn(decay)
    s = decay_span(k, span)
    errs = []
    for i, j in pairs:
        measured = gamma(stack[i], stack[j])
        target = fn(torch.as_tensor(float(abs(i - j)), dtype=mu.dtype), mu, s)
        errs.append((measured - target) ** 2)
    return torch.stack(errs, dim=-1)


def _layer_mus(stacks, mus):
    if mus is None:
        return [source_similarity(z) for z in stacks]
    if len(mus) != len(stacks):
        raise ValueError("need one mu per layer")
    return [torch.as_tensor(m, dtype=z.visible.dtype).detach().reshape(-1) for m, z in zip(mus, stacks)]


def decomposition_loss_full(
    stacks: Sequence[StateStack],
    decay="gaussian",
    mus=None,
    span: str = "corner",
    distance: str = "pearson",
) -> torch.Tensor:
    """Loss over every constrained entry, normalised by N (K^2 + 3K).

    Only the lower triangle is evaluated; it is doubled to cover both halves.
    ``mus`` optionally fixes the per-layer source similarities.
    """
    total = 0.0
    for z, mu in zip(stacks, _layer_mus(stacks, mus)):
        k = z.num_states
        e = _pair_errors(z, constrained_pairs(k), mu, decay, span, distance)
        total = total + 2.0 * e.sum(-1) / (k * k + 3 * k)
    return (total / len(stacks)).mean()


def decomposition_loss_sds(
    stacks: Sequence[StateStack],
    constraint_sets: Sequence[ConstraintSet],
    decay="gaussian",
    mus=None,
    span: str = "corner",
    distance: str = "pearson",
) -> torch.Tensor:
    """Mean squared error over the sampled pairs of each layer, averaged over layers."""
    if len(constraint_sets) != len(stacks):
        raise ValueError("need one constraint set per layer")
    total = 0.0
    for z, cs, mu in zip(stacks, constraint_sets, _layer_mus(stacks, mus)):
        if cs.num_states != z.num_states:
            raise ValueError("constraint set was sampled for a different K")
        e = _pair_errors(z, cs.pairs, mu, decay, span, distance)
        total = total + e.mean(-1)
    return (total / len(stacks)).mean()


# ---------------------------------------------------------------------------
# image losses

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sobel responses of a ``B x 1 x H x W`` tensor with reflect boundaries."""
    padded = F.pad(x, (1, 1, 1, 1), mode="reflect")
    kx = _SOBEL_X.to(x)[None, None]
    ky = _SOBEL_Y.to(x)[None, None]
    return F.conv2d(padded, kx), F.conv2d(padded, ky)


def gradient_magnitude(x: torch.Tensor) -> torch.Tensor:
    gx, gy = sobel(x)
    return gx.abs() + gy.abs()


def intensity_loss(fused, ir, vis) -> torch.Tensor:
    return F.mse_loss(fused, torch.maximum(ir, vis))


def gradient_loss(fused, ir, vis) -> torch.Tensor:
    target = torch.maximum(gradient_magnitude(ir), gradient_magnitude(vis))
    return F.mse_loss(gradient_magnitude(fused), target)


@dataclass(frozen=True)
class LossWeights:
    intensity: float = 15.0
    gradient: float = 15.0

    def __post_init__(self):
        if self.intensity < 0 or self.gradient < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(
    fused,
    ir,
    vis,
    stacks,
    weights: LossWeights = LossWeights(),
    mode: str = "sds",
    decay="gaussian",
    constraint_sets=None,
    mus=None,
    span: str = "corner",
    distance: str = "pearson",
) -> tuple[torch.Tensor, dict[str, float]]:
    """Decomposition + weighted intensity and gradient losses, with a float breakdown."""
    if mode == "sds":
        if constraint_sets is None:
            raise ValueError("sds mode needs one constraint set per layer")
        decom = decomposition_loss_sds(stacks, constraint_sets, decay, mus, span, distance)
    elif mode == "full":
        decom = decomposition_loss_full(stacks, decay, mus, span, distance)
    elif mode == "none":
        decom = fused.new_zeros(())
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    l_int = intensity_loss(fused, ir, vis)
    l_grad = gradient_loss(fused, ir, vis)
    loss = decom + weights.intensity * l_int + weights.gradient * l_grad
    breakdown = {
        "L_decom": float(decom.detach()),
        "L_int": float(l_int.detach()),
        "L_grad": float(l_grad.detach()),
        "L_all": float(loss.detach()),
    }
    return loss, breakdown


def analytic_sds_expectation(errors: np.ndarray, num_states: int) -> float:
    """Expected SDS loss of one layer given its full squared-error matrix.

    ``errors[i, j]`` is the squared error of pair (i, j), i > j.
    """
    adj = adjacent_pairs(num_states)
    pool = eligible_pool(num_states)
    m = min(num_states + 1, len(pool))
    adj_sum = sum(errors[i, j] for i, j in adj)
    pool_mean = float(np.mean([errors[i, j] for i, j in pool])) if pool else 0.0
    return (adj_sum + m * pool_mean) / (len(adj) + m)


def full_pair_count(num_layers: int, num_states: int) -> int:
    return num_layers * (num_states**2 + 3 * num_states) // 2


def sds_pair_count(num_layers: int, num_states: int) -> int:
    return num_layers * (num_states + 1 + min(num_states + 1, len(eligible_pool(num_states))))
