"""Reverse-mode gradients, a finite-difference verifier, and Adam.

``gradient`` differentiates any scalar objective built from torch primitives
over a named ParamSet. ``fd_check`` is the independent verification route:
it re-evaluates the objective in float64 and probes randomly chosen
coordinates with central differences, never consulting autograd internals.
``adam_step`` is the bias-corrected adaptive-moment update written out
explicitly so its arithmetic is pinned by tests rather than by an external
optimizer implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = ["ParamSet", "OptState", "gradient", "fd_check", "adam_step"]


class ParamSet:
    """Named tensors with fixed shapes, the unit optimizers act on.

    Accepts numpy arrays or torch tensors; stores float leaf tensors with
    requires_grad enabled. Shapes are immutable after construction.
    """

    def __init__(self, arrays: dict, dtype: torch.dtype | None = None):
        self._tensors: dict[str, torch.Tensor] = {}
        for name, arr in arrays.items():
            t = torch.as_tensor(arr)
            if dtype is not None:
                t = t.to(dtype)
            if not t.is_floating_point():
                raise ValueError(f"parameter {name!r} must be floating point")
            if not torch.isfinite(t).all():
                raise ValueError(f"parameter {name!r} contains non-finite values")
            t = t.detach().clone().requires_grad_(True)
            self._tensors[name] = t

    @classmethod
    def from_module(cls, module: torch.nn.Module, dtype: torch.dtype | None = None) -> "ParamSet":
        return cls({n: p.detach() for n, p in module.named_parameters()}, dtype=dtype)

    @classmethod
    def aliasing(cls, tensors: dict) -> "ParamSet":
        """Wrap existing leaf tensors without copying.

        In-place optimizer steps then mutate the originals, which is how a
        live torch module gets trained: pass dict(module.named_parameters()).
        Every tensor must already be a floating-point leaf with
        requires_grad set.
        """
        ps = cls.__new__(cls)
        ps._tensors = {}
        for name, t in tensors.items():
            if not isinstance(t, torch.Tensor) or not t.is_floating_point():
                raise ValueError(f"parameter {name!r} must be a floating-point tensor")
            if not (t.is_leaf and t.requires_grad):
                raise ValueError(f"parameter {name!r} must be a leaf tensor with requires_grad")
            ps._tensors[name] = t
        return ps

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def to_double(self) -> "ParamSet":
        return ParamSet({n: t.detach() for n, t in self._tensors.items()}, dtype=torch.float64)

    def detach_numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy().copy() for n, t in self._tensors.items()}


def _evaluate(objective, params: ParamSet) -> torch.Tensor:
    out = objective(params)
    if not isinstance(out, torch.Tensor):
        raise ValueError("objective must return a torch scalar built from the parameter set")
    if out.dim() != 0:
        raise ValueError(f"objective must be scalar, got shape {tuple(out.shape)}")
    return out


def gradient(objective, params: ParamSet) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of a scalar objective.

    ``objective`` is a callable taking the ParamSet and returning a scalar
    tensor computed from its entries. Parameters the objective does not
    touch get zero gradients. Raises if the objective detaches itself from
    every parameter (an unsupported/non-differentiable construction).
    """
    for _, t in params.items():
        t.grad = None
    out = _evaluate(objective, params)
    if out.grad_fn is None:
        raise ValueError("objective is not differentiable with respect to the parameters")
    out.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = (t.grad if t.grad is not None else torch.zeros_like(t)).detach().numpy().copy()
    return grads


def fd_check(
    objective,
    params: ParamSet,
    probe_count: int = 100,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error of autograd against central finite differences.

    Runs entirely in float64. ``probe_count`` coordinates are drawn (seeded)
    across all parameters; each is perturbed by +-h and the objective
    re-evaluated. Relative error per coordinate is
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-12).
    """
    p64 = params.to_double()
    grads = gradient(objective, p64)
    rng = np.random.default_rng(seed)
    names = p64.names()
    sizes = np.array([p64[n].numel() for n in names])
    total = int(sizes.sum())
    count = min(probe_count, total)
    flat_choices = rng.choice(total, size=count, replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in flat_choices:
            k = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[k - 1] if k else 0))
            t = p64[names[k]]
            view = t.view(-1)
            orig = view[local].item()
            view[local] = orig + h
            f_plus = float(_evaluate(objective, p64))
            view[local] = orig - h
            f_minus = float(_evaluate(objective, p64))
            view[local] = orig
            g_fd = (f_plus - f_minus) / (2 * h)
            g_ad = float(grads[names[k]].reshape(-1)[local])
            err = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-12)
            worst = max(worst, err)
    return worst


@dataclass
class OptState:
    """Adam accumulator state and hyperparameters.

    ``lr_overrides`` maps parameter-name prefixes to learning rates, so grid
    and MLP parameters can move at different speeds (defaults: 1e-2 for
    grids/tables, callers override MLP parameters down to 1e-3).
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    lr_overrides: dict = field(default_factory=dict)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def rate_for(self, name: str) -> float:
        for prefix, rate in self.lr_overrides.items():
            if name.startswith(prefix):
                return rate
        return self.lr


def adam_step(params: ParamSet, grads: dict, state: OptState) -> tuple[ParamSet, OptState]:
    """One bias-corrected Adam update, in place on ``params``.

    p -= lr * m_hat / (sqrt(v_hat) + eps), with
    m_hat = m / (1 - beta1^t), v_hat = v / (1 - beta2^t).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = torch.as_tensor(grads[name], dtype=p.dtype)
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {tuple(g.shape)} does not match parameter "
                    f"{name!r} shape {tuple(p.shape)}"
                )
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-state.rate_for(name))
    return params, state
