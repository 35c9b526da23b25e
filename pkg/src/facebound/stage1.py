"""Boundary prediction stage: estimator pre-training, semi-supervised
conditional boundary training and boundary inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses
from .config import RunConfig
from .datapipe import AU_INDEX, FaceArrays, PairPolicy, sample_pairs
from .errors import ConfigError, DataError, DependencyError
from .geometry import EXPR_DIM, POSE_DIM
from .models import Checkpoint, build_network, load_checkpoint, save_checkpoint
from .training import (
    STREAM_BATCH, STREAM_CONDITIONS, STREAM_HELDOUT, CurveLog, adam, check_finite,
    curves_path, freeze, make_rng, periodic_path, rng_state, single_threaded, tensor,
)

log = logging.getLogger(__name__)

_POSE_NAMES = ("yaw", "pitch", "roll")


@dataclass(frozen=True)
class ConditionRanges:
    pose_min: tuple
    pose_max: tuple
    expr_min: tuple
    expr_max: tuple

    def __post_init__(self):
        lo = np.r_[self.pose_min, self.expr_min]
        hi = np.r_[self.pose_max, self.expr_max]
        if len(self.pose_min) != POSE_DIM or len(self.expr_min) != EXPR_DIM or lo.shape != hi.shape:
            raise ConfigError("condition ranges need 3 pose and 17 expression bounds")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()) or (lo > hi).any():
            raise ConfigError("condition ranges must be finite with min <= max")

    @classmethod
    def from_arrays(cls, pose: np.ndarray, expr: np.ndarray) -> "ConditionRanges":
        if not len(pose):
            raise DataError("cannot estimate condition ranges from an empty set")
        pose, expr = np.asarray(pose, np.float64), np.asarray(expr, np.float64)
        return cls(tuple(pose.min(0)), tuple(pose.max(0)), tuple(expr.min(0)), tuple(expr.max(0)))

    def with_overrides(self, spec: str) -> "ConditionRanges":
        """Apply ``"yaw=-0.5:0.5,AU25=0:1"`` style overrides (normalized units)."""
        if not spec:
            return self
        pmin, pmax = list(self.pose_min), list(self.pose_max)
        emin, emax = list(self.expr_min), list(self.expr_max)
        for item in spec.split(","):
            try:
                name, rng = item.split("=")
                lo, hi = (float(v) for v in rng.split(":"))
            except ValueError as exc:
                raise ConfigError(f"bad condition range override {item!r}") from exc
            name = name.strip()
            if name in _POSE_NAMES:
                pmin[_POSE_NAMES.index(name)], pmax[_POSE_NAMES.index(name)] = lo, hi
            elif name.upper() in AU_INDEX:
                emin[AU_INDEX[name.upper()]], emax[AU_INDEX[name.upper()]] = lo, hi
            else:
                raise ConfigError(f"unknown condition dimension {name!r}")
        return ConditionRanges(tuple(pmin), tuple(pmax), tuple(emin), tuple(emax))

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("pose_min", "pose_max", "expr_min", "expr_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionRanges":
        return cls(*(tuple(d[k]) for k in ("pose_min", "pose_max", "expr_min", "expr_max")))


def sample_conditions(rng: np.random.Generator, ranges: ConditionRanges, n: int = 1):
    """Uniform draw per dimension; returns ``(n x 3, n x 17)`` arrays."""
    p = rng.uniform(ranges.pose_min, ranges.pose_max, size=(n, POSE_DIM))
    e = rng.uniform(ranges.expr_min, ranges.expr_max, size=(n, EXPR_DIM))
    return p, e


def _split_indices(data: FaceArrays):
    train = np.flatnonzero(data.split == "train")
    val = np.flatnonzero(data.split == "val")
    if not len(train):
        raise DataError("dataset has no training records")
    if not len(val):  # hold out the tail of the training split
        k = max(1, len(train) // 10)
        train, val = train[:-k] if len(train) > k else train, train[-k:]
    return train, val


@torch.no_grad()
def _estimator_metrics(f_p, f_e, data: FaceArrays, idx, batch=256) -> dict:
    modes = f_p.training, f_e.training
    f_p.eval(), f_e.eval()
    err_p, err_e = [], []
    for s in range(0, len(idx), batch):
        j = idx[s:s + batch]
        b = tensor(data.boundaries, j)
        err_p.append(f_p(b) - tensor(data.pose, j))
        err_e.append(f_e(b) - tensor(data.expression, j))
    f_p.train(modes[0]), f_e.train(modes[1])
    ep, ee = torch.cat(err_p), torch.cat(err_e)
    return {
        "mse_pose": float(ep.pow(2).mean()),
        "mse_expr": float(ee.pow(2).mean()),
        "mae_pose": [float(v) for v in ep.abs().mean(0)],
        "mae_expr": [float(v) for v in ee.abs().mean(0)],
    }


def _sq_error(pred, target):
    """Squared Euclidean error per sample, averaged over the batch."""
    return (pred - target).pow(2).sum(1).mean()


def pretrain_estimators(data: FaceArrays, cfg: RunConfig, seed: int | None = None, out_path=None) -> Path:
    """Fit the pose and expression estimators on (boundary, pose, expression) triples.

    Stops after ``cfg.max_steps`` or once validation MSE has not improved for
    ``cfg.patience`` evaluations. The checkpoint records final train and
    validation metrics.
    """
    seed = cfg.seed if seed is None else seed
    if not len(data):
        raise DataError("estimator dataset is empty")
    single_threaded()
    out_path = Path(out_path or cfg.ckpt_path("estimators"))
    mcfg = cfg.model_config()
    f_p, f_e = build_network("f_p", mcfg, seed), build_network("f_e", mcfg, seed)
    opt = adam(list(f_p.parameters()) + list(f_e.parameters()), cfg)
    train, val = _split_indices(data)
    rng = make_rng(seed, STREAM_BATCH)
    curves = CurveLog(curves_path(out_path), cfg.log_every)

    def save(path, step, history):
        metrics = {"train": _estimator_metrics(f_p, f_e, data, train), "val": _estimator_metrics(f_p, f_e, data, val)}
        save_checkpoint(path, "estimators", step, mcfg, {"f_p": f_p, "f_e": f_e},
                        rng_state({"batch": rng}), {**metrics, "history": history, "run_config_hash": cfg.hash()})
        return metrics

    history, best, bad, step = [], np.inf, 0, 0
    while step < cfg.max_steps:
        idx = rng.choice(train, size=cfg.batch_size)
        b = tensor(data.boundaries, idx)
        l_p = _sq_error(f_p(b), tensor(data.pose, idx))
        l_e = _sq_error(f_e(b), tensor(data.expression, idx))
        loss = l_p + l_e
        check_finite(step, {"pose": l_p, "expr": l_e}, out_path.with_suffix(".nan.pt"),
                     {"f_p": f_p.state_dict(), "f_e": f_e.state_dict(), "batch": idx})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        step += 1
        curves.record(step, {"sq_pose": l_p.item(), "sq_expr": l_e.item()})
        if step % cfg.ckpt_every == 0 or step == cfg.max_steps:
            m = _estimator_metrics(f_p, f_e, data, val)
            val_mse = m["mse_pose"] + m["mse_expr"]
            history.append({"step": step, "val_mse": val_mse})
            curves.record(step, {"val_mse": val_mse}, force=True)
            curves.flush()
            log.info("estimators step %d val_mse %.5f", step, val_mse)
            if cfg.keep_periodic and step % cfg.ckpt_every == 0:
                save(periodic_path(out_path, step), step, history)
            if val_mse < best - 1e-7:
                best, bad = val_mse, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    log.info("estimators plateaued at step %d", step)
                    break
    curves.flush()
    save(out_path, step, history)
    return out_path


# -- conditional boundary prediction -------------------------------------------------

def _pairs_for(data: FaceArrays, seed: int) -> np.ndarray:
    sampler = sample_pairs(data.records(), make_rng(seed, STREAM_BATCH), PairPolicy(split="train"))
    if not len(sampler):
        raise DataError("no same-identity training pairs differing in pose or expression")
    return sampler.index_pairs


@torch.no_grad()
def condition_error(enc, dec, f_p, data: FaceArrays, pairs, ranges: ConditionRanges, seed: int, n: int = 100) -> float:
    """Mean |F_p(decoded boundary) - requested pose| over ``n`` fixed random conditions."""
    rng = make_rng(seed, STREAM_HELDOUT)
    p, e = sample_conditions(rng, ranges, n)
    src = pairs[np.arange(n) % len(pairs), 0]
    b_r = dec(enc(tensor(data.boundaries, src)), tensor(p), tensor(e))
    return float((f_p(b_r) - tensor(p)).abs().mean())


def train_boundary_stage(data: FaceArrays, estimator_ckpt, cfg: RunConfig, seed: int | None = None,
                         out_path=None, pairs=None, use_regression: bool = True) -> Path:
    """Semi-supervised training of the boundary encoder/decoder.

    Every step decodes each source boundary twice: once with the target's own
    pose/expression (pixel L1 against the target boundary) and once with
    freshly sampled conditions that the frozen estimators must recover.
    Only the encoder and decoder are optimized. ``use_regression=False``
    skips the second decode entirely (reference run for ablations).
    """
    seed = cfg.seed if seed is None else seed
    single_threaded()
    if isinstance(estimator_ckpt, (str, Path)):
        if not Path(estimator_ckpt).exists():
            raise DependencyError(f"estimator checkpoint {estimator_ckpt} not found; train phase 'estimators' first")
        estimator_ckpt = load_checkpoint(estimator_ckpt, cfg.model_config())
    est = estimator_ckpt.require_stage("estimators")
    f_p, f_e = freeze(est.build("f_p")), freeze(est.build("f_e"))

    out_path = Path(out_path or cfg.ckpt_path("stage1"))
    mcfg = cfg.model_config()
    weights = cfg.loss_weights()
    enc, dec = build_network("enc", mcfg, seed), build_network("dec", mcfg, seed)
    opt = adam(list(enc.parameters()) + list(dec.parameters()), cfg)
    pairs = _pairs_for(data, seed) if pairs is None else np.asarray(pairs)
    if not len(pairs):
        raise DataError("no training pairs")
    tr = np.unique(pairs[:, 1])
    ranges = ConditionRanges.from_arrays(data.pose[tr], data.expression[tr]).with_overrides(cfg.condition_ranges)
    rng_batch, rng_cond = make_rng(seed, STREAM_BATCH + 100), make_rng(seed, STREAM_CONDITIONS)
    curves = CurveLog(curves_path(out_path), cfg.log_every)
    history = []

    def save(path, step, extra=None):
        meta = {"ranges": ranges.to_dict(), "history": history, "run_config_hash": cfg.hash(),
                "lambda1": weights.lambda1, **(extra or {})}
        save_checkpoint(path, "stage1", step, mcfg, {"enc": enc, "dec": dec, "f_p": f_p, "f_e": f_e},
                        rng_state({"batch": rng_batch, "conditions": rng_cond}), meta)

    def evaluate(step, pix_value):
        enc.eval(), dec.eval()
        with torch.no_grad():
            src, tgt = pairs[:, 0], pairs[:, 1]
            b_hat = dec(enc(tensor(data.boundaries, src)), tensor(data.pose, tgt), tensor(data.expression, tgt))
            pix_all = float(losses.pixel_boundary_loss(b_hat, tensor(data.boundaries, tgt)))
        cond = condition_error(enc, dec, f_p, data, pairs, ranges, seed)
        enc.train(), dec.train()
        history.append({"step": step, "pix_bound": pix_all, "cond_mae": cond})
        return pix_all

    step, last = 0, {}
    while step < cfg.max_steps:
        k = rng_batch.integers(len(pairs), size=cfg.batch_size)
        src, tgt = pairs[k, 0], pairs[k, 1]
        z = enc(tensor(data.boundaries, src))
        b_hat = dec(z, tensor(data.pose, tgt), tensor(data.expression, tgt))
        pix = losses.pixel_boundary_loss(b_hat, tensor(data.boundaries, tgt))
        if use_regression:
            p_r, e_r = (tensor(a) for a in sample_conditions(rng_cond, ranges, len(k)))
            b_r = dec(z, p_r, e_r)
            reg = losses.conditional_regression_loss(f_p(b_r), p_r, f_e(b_r), e_r)
        else:
            reg = torch.zeros(())
        total = losses.stage1_total(pix, reg, weights)
        last = {"pix_bound": pix.item(), "reg": reg.item(), "total": total.item()}
        check_finite(step, last, out_path.with_suffix(".nan.pt"),
                     {"enc": enc.state_dict(), "dec": dec.state_dict(), "pairs": torch.from_numpy(pairs[k])})
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        step += 1
        curves.record(step, last)
        if step % cfg.ckpt_every == 0:
            evaluate(step, last["pix_bound"])
            curves.flush()
            if cfg.keep_periodic:
                save(periodic_path(out_path, step), step)
            log.info("stage1 step %d %s", step, history[-1])
    if not history or history[-1]["step"] != step:
        evaluate(step, last.get("pix_bound"))
    curves.flush()
    save(out_path, step, {"final": last})
    return out_path


class BoundaryPredictor:
    """Frozen encoder/decoder pair loaded from a stage-1 checkpoint."""

    def __init__(self, ckpt: Checkpoint | str | Path):
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        self.ckpt = ckpt.require_stage("stage1")
        self.enc, self.dec = freeze(ckpt.build("enc")), freeze(ckpt.build("dec"))
        self.ranges = ConditionRanges.from_dict(ckpt.meta["ranges"])

    @torch.no_grad()
    def __call__(self, b_a: torch.Tensor, p_b: torch.Tensor, e_b: torch.Tensor) -> torch.Tensor:
        from .models import forward_boundary_autoencoder
        return forward_boundary_autoencoder(self.enc, self.dec, b_a, p_b, e_b)[1]


def predict_boundary(ckpt, b_a, p_b, e_b) -> np.ndarray:
    """Predict one ``H x W x 3`` target boundary from an ``H x W x 3`` source raster."""
    pred = ckpt if isinstance(ckpt, BoundaryPredictor) else BoundaryPredictor(ckpt)
    b = tensor(np.asarray(b_a).transpose(2, 0, 1)[None])
    out = pred(b, tensor(np.asarray(p_b)[None]), tensor(np.asarray(e_b)[None]))
    return out[0].numpy().transpose(1, 2, 0)
