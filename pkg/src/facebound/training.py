"""Pieces shared by all trainers: optimizers, loss-curve logs, NaN guard."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import NumericalError

log = logging.getLogger(__name__)

# Independent RNG streams per trainer purpose.
STREAM_BATCH, STREAM_CONDITIONS, STREAM_AUGMENT, STREAM_HELDOUT = 11, 12, 13, 14


def single_threaded():
    """Parameter updates run on one thread so runs are bit-reproducible."""
    torch.set_num_threads(1)


def make_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def adam(params, cfg: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def freeze(net: torch.nn.Module) -> torch.nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def tensor(x, idx=None) -> torch.Tensor:
    a = x if idx is None else x[idx]
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


class CurveLog:
    """Append-only JSON Lines loss curve: one ``{step, loss_name, value}`` per line."""

    def __init__(self, path, every: int = 1):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.every = max(1, every)
        self._buf = []

    def record(self, step: int, values: dict, force: bool = False):
        if force or step % self.every == 0:
            for k, v in values.items():
                self._buf.append({"step": int(step), "loss_name": k, "value": float(v)})

    def flush(self):
        if self._buf:
            with self.path.open("a") as fh:
                fh.writelines(json.dumps(r) + "\n" for r in self._buf)
            self._buf = []


def read_curves(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def check_finite(step: int, losses: dict, dump_path, state: dict):
    """Abort with a diagnostic dump when any loss is NaN or infinite."""
    losses = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()}
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if not bad:
        return
    dump_path = Path(dump_path)
    dump_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"step": step, "losses": {k: float(v) for k, v in losses.items()}, **state}, dump_path)
    raise NumericalError(f"non-finite loss at step {step}: {bad}; diagnostic dump written to {dump_path}")


def rng_state(rngs: dict) -> dict:
    return {k: json.dumps(r.bit_generator.state) for k, r in rngs.items()}


def periodic_path(final: Path, step: int) -> Path:
    return final.with_name(f"{final.stem}_step{step:06d}{final.suffix}")


def curves_path(final: Path) -> Path:
    return final.with_suffix(".curves.jsonl")
