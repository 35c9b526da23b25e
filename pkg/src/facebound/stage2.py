"""Disentangled synthesis stage: proxy recognizer stub, adversarial synthesis
training and face synthesis / end-to-end manipulation at inference."""

from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry as geo
from . import losses
from .config import RunConfig
from .datapipe import FaceArrays, PairPolicy, sample_pairs
from .errors import DataError, DependencyError
from .models import (
    Checkpoint, build_network, forward_discriminators, forward_synthesis, identity_features,
    load_checkpoint, save_checkpoint,
)
from .stage1 import BoundaryPredictor
from .training import (
    STREAM_AUGMENT, STREAM_BATCH, CurveLog, adam, check_finite, curves_path, freeze,
    make_rng, periodic_path, rng_state, single_threaded, tensor,
)

log = logging.getLogger(__name__)


# -- proxy recognizer stub ------------------------------------------------------------

def augment(x: torch.Tensor, rng: np.random.Generator, max_shift: int = 2) -> torch.Tensor:
    """Random integer translation (edge padded) and brightness jitter."""
    n, _, h, w = x.shape
    pad = F.pad(x, (max_shift,) * 4, mode="replicate")
    out = torch.empty_like(x)
    shifts = rng.integers(0, 2 * max_shift + 1, size=(n, 2))
    gains = rng.uniform(0.85, 1.15, size=n)
    for i in range(n):
        dy, dx = shifts[i]
        out[i] = pad[i, :, dy:dy + h, dx:dx + w]
    gain = torch.from_numpy(gains.astype(np.float32))[:, None, None, None]
    return ((out + 1) * gain - 1).clamp(-1, 1)


def _require_images(data: FaceArrays):
    if data.images is None or not len(data):
        raise DataError("dataset provides no face images")


@torch.no_grad()
def _accuracy(net, images, labels, batch=256) -> float:
    if not len(labels):
        return float("nan")
    hits = 0
    for s in range(0, len(labels), batch):
        _, logits = net(tensor(images[s:s + batch]))
        hits += int((logits.argmax(1).numpy() == labels[s:s + batch]).sum())
    return hits / len(labels)


def train_proxy_stub(data: FaceArrays, cfg: RunConfig, seed: int | None = None, out_path=None) -> Path:
    """Identity classifier whose pooled features stand in for a pretrained recognizer.

    Classes are the identities of the training split; validation accuracy is
    measured on validation records of those identities and drives plateau
    stopping.
    """
    seed = cfg.seed if seed is None else seed
    _require_images(data)
    single_threaded()
    train = np.flatnonzero(data.split == "train")
    classes = sorted(set(data.identity[train].tolist()))
    if len(classes) < 2:
        raise DataError(f"proxy training needs at least 2 identities, found {len(classes)}")
    lut = {c: i for i, c in enumerate(classes)}
    val = np.array([i for i in np.flatnonzero(data.split == "val") if data.identity[i] in lut], dtype=int)
    labels = np.array([lut.get(c, -1) for c in data.identity])

    out_path = Path(out_path or cfg.ckpt_path("proxy"))
    mcfg = cfg.model_config(id_classes=len(classes))
    net = build_network("proxy", mcfg, seed)
    opt = adam(net.parameters(), cfg)
    rng, rng_aug = make_rng(seed, STREAM_BATCH), make_rng(seed, STREAM_AUGMENT)
    curves = CurveLog(curves_path(out_path), cfg.log_every)
    history = []

    def metrics():
        net.eval()
        m = {"train_acc": _accuracy(net, data.images[train], labels[train]),
             "val_acc": _accuracy(net, data.images[val], labels[val]) if len(val) else None}
        net.train()
        return m

    def save(path, step):
        save_checkpoint(path, "proxy", step, mcfg, {"proxy": net}, rng_state({"batch": rng, "augment": rng_aug}),
                        {**metrics(), "classes": classes, "history": history, "run_config_hash": cfg.hash()})

    best, bad, step = -1.0, 0, 0
    net.train()
    while step < cfg.max_steps:
        idx = rng.choice(train, size=cfg.batch_size)
        x = augment(tensor(data.images, idx), rng_aug)
        _, logits = net(x)
        loss = F.cross_entropy(logits, torch.from_numpy(labels[idx]))
        check_finite(step, {"ce": loss}, out_path.with_suffix(".nan.pt"), {"proxy": net.state_dict()})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        step += 1
        curves.record(step, {"ce": loss.item()})
        if step % cfg.ckpt_every == 0:
            m = metrics()
            score = m["val_acc"] if m["val_acc"] is not None else m["train_acc"]
            history.append({"step": step, **m})
            curves.record(step, {"val_acc": score}, force=True)
            curves.flush()
            log.info("proxy step %d %s", step, m)
            if cfg.keep_periodic:
                save(periodic_path(out_path, step), step)
            if score > best + 1e-9:
                best, bad = score, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    curves.flush()
    save(out_path, step)
    return out_path


# -- synthesis training ---------------------------------------------------------------

def _load(ckpt, stage: str) -> Checkpoint:
    if ckpt is None:
        raise DependencyError(f"{stage} checkpoint required")
    if not isinstance(ckpt, Checkpoint):
        if not Path(ckpt).exists():
            raise DependencyError(f"{stage} checkpoint {ckpt} not found; train phase '{stage}' first")
        ckpt = load_checkpoint(ckpt)
    return ckpt.require_stage(stage)


@torch.no_grad()
def conditioning_boundaries(data: FaceArrays, pairs: np.ndarray, stage1_ckpt, source: str,
                            batch: int = 256) -> np.ndarray:
    """Boundary fed to the generator for each (source, target) pair."""
    if source == "ground_truth":
        return data.boundaries[pairs[:, 1]]
    pred = stage1_ckpt if isinstance(stage1_ckpt, BoundaryPredictor) else BoundaryPredictor(_load(stage1_ckpt, "stage1"))
    out = []
    for s in range(0, len(pairs), batch):
        src, tgt = pairs[s:s + batch, 0], pairs[s:s + batch, 1]
        out.append(pred(tensor(data.boundaries, src), tensor(data.pose, tgt), tensor(data.expression, tgt)).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + data.boundaries.shape[1:], np.float32)


@torch.no_grad()
def feature_gap(g_enc_i, proxy, images: torch.Tensor) -> float:
    """Mean squared distance between texture codes and proxy features."""
    f_i = g_enc_i(images)
    f_p, _ = identity_features(proxy, images)
    return float((f_i - f_p).pow(2).sum(1).mean())


def train_synthesis_stage(data: FaceArrays, stage1_ckpt, proxy_ckpt, cfg: RunConfig, seed: int | None = None,
                          out_path=None, pairs=None, heldout=None) -> Path:
    """Alternating discriminator / generator optimization of the synthesis networks.

    The conditioning boundary comes from the stage-1 predictor unless
    ``cfg.boundary_source == "ground_truth"``. Proxy and identity-preserving
    networks stay frozen. ``heldout`` indexes the faces used to track the
    texture/proxy feature gap at each checkpoint (default: validation split,
    else the first training sources).
    """
    seed = cfg.seed if seed is None else seed
    _require_images(data)
    single_threaded()
    proxy_ck = _load(proxy_ckpt, "proxy")
    if cfg.boundary_source == "predicted":
        stage1_ckpt = _load(stage1_ckpt, "stage1")
    proxy = freeze(proxy_ck.build("proxy"))
    if cfg.dip_checkpoint:
        d_ip = freeze(_load(cfg.dip_checkpoint, "proxy").build("proxy"))
    else:
        d_ip = freeze(copy.deepcopy(proxy))

    if pairs is None:
        sampler = sample_pairs(data.records(), make_rng(seed, STREAM_BATCH), PairPolicy(split="train"))
        pairs = sampler.index_pairs
    pairs = np.asarray(pairs)
    if not len(pairs):
        raise DataError("no training pairs for synthesis")
    cond = conditioning_boundaries(data, pairs, stage1_ckpt, cfg.boundary_source)
    heldout = np.flatnonzero(data.split == "val") if heldout is None else np.asarray(heldout, dtype=np.int64)
    if not len(heldout):
        heldout = np.unique(pairs[:, 0])
    heldout_images = tensor(data.images, heldout[:64])

    out_path = Path(out_path or cfg.ckpt_path("synth"))
    mcfg = proxy_ck.config
    if mcfg.hash() != cfg.model_config().hash():
        raise DependencyError("proxy checkpoint architecture does not match the run configuration")
    weights = cfg.loss_weights()
    gens = {n: build_network(n, mcfg, seed) for n in ("g_enc_b", "g_enc_i", "g_dec_i")}
    disc = build_network("d", mcfg, seed)
    opt_g = adam([p for n in gens.values() for p in n.parameters()], cfg)
    opt_d = adam(disc.parameters(), cfg)
    rng = make_rng(seed, STREAM_BATCH + 200)
    curves = CurveLog(curves_path(out_path), cfg.log_every)
    history, counters = [], {"d_steps": 0, "g_steps": 0}

    def save(path, step, extra=None):
        meta = {"history": history, "counters": dict(counters), "boundary_source": cfg.boundary_source,
                "margin_m": weights.margin_m, "run_config_hash": cfg.hash(), **(extra or {})}
        save_checkpoint(path, "synth", step, mcfg, {**gens, "d": disc, "proxy": proxy, "d_ip": d_ip},
                        rng_state({"batch": rng}), meta)

    def evaluate(step):
        for n in gens.values():
            n.eval()
        with torch.no_grad():
            _, _, fake = forward_synthesis(gens["g_enc_b"], gens["g_enc_i"], gens["g_dec_i"],
                                           tensor(cond), tensor(data.images, pairs[:, 0]))
            pix = float(losses.multiscale_pixel_loss(fake, tensor(data.images, pairs[:, 1])))
            l1 = float((fake - tensor(data.images, pairs[:, 1])).abs().mean())
        gap = feature_gap(gens["g_enc_i"], proxy, heldout_images)
        for n in gens.values():
            n.train()
        history.append({"step": step, "pix_mul": pix, "l1": l1, "feature_gap": gap})

    step, last = 0, {}
    while step < cfg.max_steps:
        k = rng.integers(len(pairs), size=cfg.batch_size)
        i_a, i_b, b = tensor(data.images, pairs[k, 0]), tensor(data.images, pairs[k, 1]), tensor(cond, k)

        # discriminator step
        with torch.no_grad():
            _, _, fake = forward_synthesis(gens["g_enc_b"], gens["g_enc_i"], gens["g_dec_i"], b, i_a)
        real_maps, fake_maps = forward_discriminators(disc, i_b, b), forward_discriminators(disc, fake, b)
        check_finite(step, {"d_real": sum(m.mean() for m in real_maps), "d_fake": sum(m.mean() for m in fake_maps)},
                     out_path.with_suffix(".nan.pt"),
                     {**{n: g.state_dict() for n, g in gens.items()}, "d": disc.state_dict(),
                      "pairs": torch.from_numpy(pairs[k])})
        d_loss, _ = losses.adversarial_losses(real_maps, fake_maps)
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()
        counters["d_steps"] += 1

        # generator step (discriminator weights held fixed)
        disc.requires_grad_(False)
        f_b, f_i, fake = forward_synthesis(gens["g_enc_b"], gens["g_enc_i"], gens["g_dec_i"], b, i_a)
        with torch.no_grad():
            f_p, _ = identity_features(proxy, i_a)
            ref = identity_features(d_ip, i_b)
            real_maps = forward_discriminators(disc, i_b, b)
        _, adv_g = losses.adversarial_losses(real_maps, forward_discriminators(disc, fake, b))
        thr = losses.feature_threshold_loss(f_i, f_p, weights.margin_m)
        pixmul = losses.multiscale_pixel_loss(fake, i_b)
        ip = losses.identity_preserving_loss(identity_features(d_ip, fake), ref)
        total = losses.stage2_total(adv_g, thr, pixmul, ip, weights)
        disc.requires_grad_(True)
        last = {"d_loss": d_loss.item(), "adv_g": adv_g.item(), "thr": thr.item(), "pix_mul": pixmul.item(),
                "ip": ip.item(), "total": total.item()}
        check_finite(step, last, out_path.with_suffix(".nan.pt"),
                     {**{n: g.state_dict() for n, g in gens.items()}, "d": disc.state_dict(),
                      "pairs": torch.from_numpy(pairs[k])})
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        counters["g_steps"] += 1
        step += 1
        curves.record(step, last)
        if step % cfg.ckpt_every == 0:
            evaluate(step)
            curves.flush()
            if cfg.keep_periodic:
                save(periodic_path(out_path, step), step)
            log.info("synth step %d %s", step, history[-1])
    if not history or history[-1]["step"] != step:
        evaluate(step)
    curves.flush()
    save(out_path, step, {"final": last})
    return out_path


# -- inference ------------------------------------------------------------------------

class Synthesizer:
    """Frozen synthesis networks loaded from a stage-2 checkpoint."""

    def __init__(self, ckpt):
        ckpt = _load(ckpt, "synth")
        self.ckpt = ckpt
        self.nets = [freeze(ckpt.build(n)) for n in ("g_enc_b", "g_enc_i", "g_dec_i")]

    @torch.no_grad()
    def __call__(self, i_a: torch.Tensor, b_hat: torch.Tensor) -> torch.Tensor:
        return forward_synthesis(*self.nets, b_hat, i_a)[2]


def _chw(x) -> torch.Tensor:
    return tensor(np.asarray(x).transpose(2, 0, 1)[None])


def synthesize_face(ckpt, i_a, b_hat) -> np.ndarray:
    """One ``H x W x 3`` face in [-1, 1] from an input face and a target boundary."""
    synth = ckpt if isinstance(ckpt, Synthesizer) else Synthesizer(ckpt)
    return synth(_chw(i_a), _chw(b_hat))[0].numpy().transpose(1, 2, 0)


def manipulate(stage1_ckpt, stage2_ckpt, i_a, landmarks: geo.LandmarkSet, p_b, e_b) -> np.ndarray:
    """Re-pose / re-express ``i_a``: rasterize, predict the target boundary, synthesize."""
    pred = stage1_ckpt if isinstance(stage1_ckpt, BoundaryPredictor) else BoundaryPredictor(stage1_ckpt)
    synth = stage2_ckpt if isinstance(stage2_ckpt, Synthesizer) else Synthesizer(stage2_ckpt)
    res = pred.ckpt.config.resolution
    p_b, e_b = geo.validate_pose(p_b), geo.validate_expression(e_b)
    b_a = geo.rasterize_boundary(landmarks, (res, res))
    b_hat = pred(_chw(b_a), tensor(np.asarray(p_b)[None]), tensor(np.asarray(e_b)[None]))
    return synth(_chw(i_a), b_hat)[0].numpy().transpose(1, 2, 0)
