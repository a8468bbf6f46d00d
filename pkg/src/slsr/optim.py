"""SGD with classical momentum and coupled L2 decay, plus the inverse LR policy."""
from __future__ import annotations

import contextlib
from typing import Iterable, MutableMapping

import torch


class NumericError(RuntimeError):
    pass


def inverse_lr(base_lr: float, gamma: float, power: float, i: int) -> float:
    """``base_lr * (1 + gamma * i) ** -power``."""
    if i < 0:
        raise ValueError("iteration must be >= 0")
    return base_lr * (1.0 + gamma * i) ** (-power)


@torch.no_grad()
def apply_sgd_update(named_params: Iterable[tuple[str, torch.Tensor]], buffers: MutableMapping[str, torch.Tensor],
                     lr: float, momentum: float, weight_decay: float) -> None:
    """In-place update ``v = mu * v + (g + wd * theta); theta -= lr * v``.

    Parameters without a gradient are skipped. The first step seeds the
    momentum buffer with the gradient itself.
    """
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        if weight_decay:
            g = g.add(p, alpha=weight_decay)
        if momentum:
            buf = buffers.get(name)
            if buf is None:
                buf = g.clone()
                buffers[name] = buf
            else:
                buf.mul_(momentum).add_(g)
            g = buf
        p.add_(g, alpha=-lr)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a private, seeded torch RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
