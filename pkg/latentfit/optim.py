"""
Adam with bias correction and a per-group step-decay schedule.

Parameters live in named groups (``"network"``, ``"codes"`` ...). Each group has
its own base learning rate; :meth:`AdamState.tick` advances the schedule clock
(one tick per epoch during training, one per iteration during fitting) and
halves the rate every ``decay_interval`` ticks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class ParamGroup:
    base_lr: float
    decay_factor: float = 0.5
    decay_interval: int = 500

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ValueError(f"Learning rate must be positive, got {self.base_lr}.")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"Decay factor must lie in (0, 1], got {self.decay_factor}.")
        if self.decay_interval < 1:
            raise ValueError(f"Decay interval must be at least 1, got {self.decay_interval}.")

    def lr_at(self, ticks: int) -> float:
        return self.base_lr * self.decay_factor ** (ticks // self.decay_interval)


@dataclass
class AdamState:
    groups: dict[str, ParamGroup]
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    ticks: int = 0
    betas: tuple[float, float] = BETAS
    eps: float = EPS

    def lr(self, group: str) -> float:
        return self.groups[group].lr_at(self.ticks)

    def tick(self) -> None:
        self.ticks += 1

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)

    def to_arrays(self, prefix: str = "adam/") -> dict[str, np.ndarray]:
        out = {}
        for key in sorted(self.first_moment):
            out[f"{prefix}m/{key}"] = self.first_moment[key]
            out[f"{prefix}v/{key}"] = self.second_moment[key]
            out[f"{prefix}t/{key}"] = np.array(self.steps[key], dtype=np.int64)
        return out

    def header(self) -> dict:
        return {
            "ticks": self.ticks,
            "betas": list(self.betas),
            "eps": self.eps,
            "groups": {
                name: {
                    "base_lr": g.base_lr,
                    "decay_factor": g.decay_factor,
                    "decay_interval": g.decay_interval,
                }
                for name, g in self.groups.items()
            },
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], header: dict, prefix: str = "adam/") -> AdamState:
        state = cls(
            groups={name: ParamGroup(**g) for name, g in header["groups"].items()},
            ticks=int(header["ticks"]),
            betas=tuple(header["betas"]),
            eps=float(header["eps"]),
        )
        for key, value in arrays.items():
            if not key.startswith(prefix):
                continue
            kind, name = key[len(prefix) :].split("/", 1)
            if kind == "m":
                state.first_moment[name] = np.array(value)
            elif kind == "v":
                state.second_moment[name] = np.array(value)
            elif kind == "t":
                state.steps[name] = int(value)
        return state


def adam_step(
    state: AdamState,
    params: dict[str, dict[str, np.ndarray]],
    grads: dict[str, dict[str, np.ndarray | None]],
) -> dict[str, dict[str, np.ndarray]]:
    """
    Update ``params[group][name]`` in place from ``grads[group][name]``.

    Entries whose gradient is ``None`` are frozen: neither they nor their
    moments change.
    """
    beta1, beta2 = state.betas
    for group, group_params in params.items():
        lr = state.lr(group)
        for name, value in group_params.items():
            grad = grads.get(group, {}).get(name)
            if grad is None:
                continue
            if grad.shape != value.shape:
                raise ValueError(f"Gradient for {group}/{name} has shape {grad.shape}, expected {value.shape}.")
            key = f"{group}/{name}"
            m = state.first_moment.get(key)
            if m is None:
                m = np.zeros_like(value)
                state.second_moment[key] = np.zeros_like(value)
                state.steps[key] = 0
            elif m.shape != value.shape:
                raise ValueError(f"Optimizer state for {key} has shape {m.shape}, expected {value.shape}.")
            v = state.second_moment[key]
            t = state.steps[key] + 1

            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            value -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)

            state.first_moment[key] = m
            state.second_moment[key] = v
            state.steps[key] = t
    return params


def group_gradients(grads: dict[str, np.ndarray | None]) -> dict[str, dict[str, np.ndarray | None]]:
    """Split tape gradients named ``"group/name"`` into the nested form :func:`adam_step` takes."""
    out: dict[str, dict[str, np.ndarray | None]] = {}
    for key, grad in grads.items():
        group, _, name = key.partition("/")
        if not name:
            raise ValueError(f"Gradient key {key!r} has no group prefix.")
        out.setdefault(group, {})[name] = grad
    return out
