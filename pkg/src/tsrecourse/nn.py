"""Small torch helpers shared by the models: dtype, seeding, norms, checkpoints,
finite-difference gradient checks."""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(a) -> torch.Tensor:
    a = np.asarray(a, dtype=np.float64)
    if not a.flags.writeable:
        a = a.copy()
    return torch.as_tensor(a, dtype=DTYPE)


def safe_norm(x: torch.Tensor, dim=-1) -> torch.Tensor:
    """Euclidean norm whose gradient is defined as 0 at the origin."""
    sq = (x * x).sum(dim=dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> torch.Tensor:
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
    return t


@contextmanager
def single_thread():
    """Pin torch to one thread so reductions happen in a fixed order."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def state_to_json(module: torch.nn.Module) -> dict:
    return {
        name: {"shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
        for name, p in module.state_dict().items()
    }


def state_from_json(module: torch.nn.Module, obj: dict) -> None:
    state = {name: torch.tensor(v["data"], dtype=DTYPE).reshape(v["shape"]) for name, v in obj.items()}
    module.load_state_dict(state)


def write_json(path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def rel_error(a: torch.Tensor, b: torch.Tensor, scale: float = 0.0) -> float:
    num = float(torch.linalg.vector_norm(a - b))
    den = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)), scale)
    if den == 0.0:
        return 0.0
    return num / max(den, 1e-12)


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
                            h: float = 1e-5) -> dict[int, float]:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    Returns the relative error per parameter tensor (index into ``params``).
    Tensors whose true gradient is exactly zero are measured against the norm
    of the whole gradient, so rounding noise in their differences stays small.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    errors = {}
    scale = math.sqrt(sum(float((g ** 2).sum()) for g in grads if g is not None))
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            g = torch.zeros_like(p) if g is None else g
            num = torch.zeros_like(p)
            flat, nflat = p.view(-1), num.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = loss_fn().item()
                flat[j] = orig - h
                down = loss_fn().item()
                flat[j] = orig
                nflat[j] = (up - down) / (2 * h)
            errors[i] = rel_error(g, num, 0.0 if bool(g.any()) else scale)
    return errors


def check_finite(value: torch.Tensor, step: int, what: str) -> None:
    if not math.isfinite(float(value.detach())):
        raise DivergenceError(f"{what}: non-finite loss at step {step}")


class DivergenceError(RuntimeError):
    pass
