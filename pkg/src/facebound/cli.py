"""``facebound`` command line: fixture generation, boundary rendering, the four
training phases, manipulation sweeps and metric evaluation.

Exit codes: 0 ok, 2 config/usage, 3 data, 4 dependency, 5 numerical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datapipe as dp
from . import evalsuite as ev
from . import geometry as geo
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DependencyError, FaceboundError
from .models import file_digest, load_checkpoint
from .stage1 import BoundaryPredictor, pretrain_estimators, train_boundary_stage
from .stage2 import Synthesizer, train_proxy_stub, train_synthesis_stage
from .training import tensor

log = logging.getLogger("facebound")

PHASE_FILES = {"estimators": "estimators", "boundary": "stage1", "proxy": "proxy", "synth": "synth"}
POSE_DIMS = ("yaw", "pitch", "roll")


# -- configuration ---------------------------------------------------------------------

def _num_workers() -> int:
    raw = os.environ.get("BM_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"BM_NUM_WORKERS must be an integer, got {raw!r}") from exc


def resolve_config(args) -> RunConfig:
    extra = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        extra[k.strip()] = v.strip()
    flags = {
        "seed": args.seed, "resolution": args.resolution, "max_steps": args.steps, "out_dir": args.out,
        "boundary_source": args.boundary_source, "margin_m": args.m,
        "manifest": getattr(args, "manifest", None),
    }
    cfg = load_config(args.config, **extra, **{k: v for k, v in flags.items() if v is not None})
    if not Path(cfg.ckpt_dir).is_absolute():
        cfg = cfg.replace(ckpt_dir=str(Path(cfg.out_dir) / cfg.ckpt_dir))
    return cfg


def _phase_ckpt(cfg: RunConfig, phase: str) -> Path:
    return cfg.ckpt_path(PHASE_FILES[phase])


def _require(cfg: RunConfig, phase: str) -> Path:
    path = _phase_ckpt(cfg, phase)
    if not path.exists():
        raise DependencyError(f"missing {phase} checkpoint {path}; run `facebound train --phase {phase}` first")
    return path


def _records(cfg: RunConfig):
    if not cfg.manifest:
        raise ConfigError("no manifest given (use --manifest or the manifest config key)")
    records, counts = dp.load_manifest(cfg.manifest)
    log.info("manifest %s: %s", cfg.manifest, counts)
    return records


# -- commands ----------------------------------------------------------------------------

def cmd_make_fixture(args, cfg: RunConfig) -> int:
    path = dp.make_toy_fixture(cfg.out_dir, n_identities=args.identities, per_illumination=args.per_illumination,
                               image_size=args.image_size, n_test_identities=args.test_identities, seed=cfg.seed)
    _, counts = dp.load_manifest(path)
    print(f"manifest: {path}")
    print("counts: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_render_boundary(args, cfg: RunConfig) -> int:
    """One boundary PNG per manifest record plus an ``index.jsonl``."""
    records = _records(cfg)
    out = Path(cfg.out_dir)
    (out / "boundaries").mkdir(parents=True, exist_ok=True)
    res = cfg.resolution
    lines = []
    for i, rec in enumerate(records):
        lms, n_clamped = dp.record_landmarks(rec)
        if n_clamped:
            log.warning("%s: %d landmark coordinates clamped into the crop", rec.landmarks_path, n_clamped)
        png = out / "boundaries" / f"{i:05d}_{rec.image_path.stem}.png"
        dp.save_png(png, dp.boundary_to_uint8(geo.rasterize_boundary(lms, (res, res))))
        lines.append({"image_path": str(rec.image_path), "boundary_path": str(png), "identity": rec.identity,
                      "split": rec.split, "pose": [float(v) for v in geo.pose_from_landmarks(lms)],
                      "sha256": file_digest(png)})
    index = out / "index.jsonl"
    index.write_text("".join(json.dumps(r) + "\n" for r in lines))
    print(f"rendered {len(lines)} boundaries at {res}x{res} -> {index}")
    return 0


def _final_summary(path: Path) -> str:
    ck = load_checkpoint(path)
    meta = ck.meta
    if ck.stage == "estimators":
        v = meta["val"]
        return f"val mse_pose={v['mse_pose']:.5f} mse_expr={v['mse_expr']:.5f}"
    if ck.stage == "proxy":
        return f"train_acc={meta['train_acc']:.3f} val_acc={meta['val_acc']}"
    return " ".join(f"{k}={v:.5f}" for k, v in meta.get("final", {}).items())


def cmd_train(args, cfg: RunConfig) -> int:
    phase = args.phase
    w = cfg.loss_weights()
    print(f"config {cfg.hash()}: lambda1={w.lambda1:g} alpha=({w.alpha1:g}, {w.alpha2:g}, {w.alpha3:g}) "
          f"m={w.margin_m:g} lr={cfg.lr:g} betas=({cfg.beta1:g}, {cfg.beta2:g}) resolution={cfg.resolution} "
          f"steps={cfg.max_steps} seed={cfg.seed}")
    out = _phase_ckpt(cfg, phase)
    if phase == "boundary":
        deps = {"estimators": _require(cfg, "estimators")}
    elif phase == "synth":
        deps = {"proxy": _require(cfg, "proxy")}
        if cfg.boundary_source == "predicted":
            deps["boundary"] = _require(cfg, "boundary")
    else:
        deps = {}
    records = _records(cfg)
    need_images = phase in ("proxy", "synth")
    data = dp.arrays_from_manifest(records, cfg.resolution, with_images=need_images, workers=_num_workers())
    if phase == "estimators":
        path = pretrain_estimators(data, cfg, out_path=out)
    elif phase == "boundary":
        path = train_boundary_stage(data, deps["estimators"], cfg, out_path=out)
    elif phase == "proxy":
        path = train_proxy_stub(data, cfg, out_path=out)
    else:
        path = train_synthesis_stage(data, deps.get("boundary"), deps["proxy"], cfg, out_path=out)
    print(f"{phase}: {_final_summary(path)}")
    print(f"checkpoint: {path} sha256={file_digest(path)}")
    return 0


def parse_grid(spec: str):
    """``"yaw=18.75:56.25:3.75"`` -> ``("yaw", [18.75, 22.5, ..., 56.25])`` (end inclusive)."""
    try:
        name, rng = spec.split("=")
        parts = [float(v) for v in rng.split(":")]
        if len(parts) == 1:
            parts = [parts[0], parts[0], 1.0]
        start, stop, step = parts
    except ValueError as exc:
        raise ConfigError(f"bad grid {spec!r}; expected NAME=START:STOP:STEP") from exc
    name = name.strip()
    if name not in POSE_DIMS and name.upper() not in dp.AU_INDEX:
        raise ConfigError(f"unknown grid dimension {name!r}")
    if step <= 0 or stop < start:
        raise ConfigError(f"grid {spec!r} needs step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    return name, [start + k * step for k in range(n)]


def _parse_aus(spec: str) -> np.ndarray:
    e = np.zeros(geo.EXPR_DIM)
    for item in filter(None, (spec or "").split(",")):
        try:
            k, v = item.split("=")
            e[dp.AU_INDEX[k.strip().upper()]] = float(v)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad AU assignment {item!r}") from exc
    return geo.validate_expression(e)


def _set_dim(p: np.ndarray, e: np.ndarray, name: str, value: float):
    p, e = p.copy(), e.copy()
    if name in POSE_DIMS:
        p[POSE_DIMS.index(name)] = value / 90.0
    else:
        e[dp.AU_INDEX[name.upper()]] = value
    return p, e


def cmd_sweep(args, cfg: RunConfig) -> int:
    pred = BoundaryPredictor(_require(cfg, "boundary"))
    synth = Synthesizer(_require(cfg, "synth"))
    res = synth.ckpt.config.resolution
    if pred.ckpt.config.resolution != res:
        raise DependencyError("stage-1 and stage-2 checkpoints use different resolutions")
    from PIL import Image
    try:
        with Image.open(args.image) as im:
            w, h = im.size
    except OSError as exc:
        raise DataError(f"cannot decode image {args.image}: {exc}") from exc
    img = dp.decode_and_normalize(args.image, res)
    lms, _ = geo.normalize_landmarks(geo.read_landmark_file(args.landmarks), (0, 0, w, h))
    p0, e0 = geo.pose_from_landmarks(lms), _parse_aus(args.au)
    cols = parse_grid(args.grid) if args.grid else None
    rows = parse_grid(args.expr_grid) if args.expr_grid else None
    b_a = geo.rasterize_boundary(lms, (res, res))
    tiles, index = [], []
    for r, rv in enumerate(rows[1] if rows else [None]):
        row = []
        for c, cv in enumerate(cols[1] if cols else [None]):
            p, e = p0, e0
            if rows:
                p, e = _set_dim(p, e, rows[0], rv)
            if cols:
                p, e = _set_dim(p, e, cols[0], cv)
            p, e = geo.validate_pose(p), geo.validate_expression(e)
            b_hat = pred(tensor(b_a.transpose(2, 0, 1)[None]), tensor(p[None]), tensor(e[None]))
            out = synth(tensor(img.transpose(2, 0, 1)[None]), b_hat)[0].numpy().transpose(1, 2, 0)
            row.append(dp.to_uint8(out))
            index.append({"row": r, "col": c, "pose": p.tolist(), "expression": e.tolist()})
        tiles.append(np.concatenate(row, axis=1))
    grid = np.concatenate(tiles, axis=0)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dp.save_png(out / "sweep.png", grid)
    (out / "sweep.json").write_text(json.dumps(
        {"grid": args.grid, "expr_grid": args.expr_grid, "resolution": res,
         "rows": len(tiles), "cols": len(index) // len(tiles), "tiles": index}, indent=2) + "\n")
    print(f"sweep: {len(index)} tiles ({len(tiles)} x {len(index) // len(tiles)}) -> {out / 'sweep.png'}")
    return 0


@torch.no_grad()
def _synthesize(pred, synth, data: dp.FaceArrays, src, tgt_pose, tgt_expr, batch=64) -> np.ndarray:
    out = []
    for s in range(0, len(src), batch):
        j = src[s:s + batch]
        b_hat = pred(tensor(data.boundaries, j), tensor(tgt_pose[s:s + batch]), tensor(tgt_expr[s:s + batch]))
        out.append(synth(tensor(data.images, j), b_hat).numpy())
    return np.concatenate(out)


def evaluate(metric: str, cfg: RunConfig, data: dp.FaceArrays, synth_path=None, max_pairs: int = 256) -> dict:
    """Rank-1 on frontalized probes, or FID between real and synthesized targets."""
    pred = BoundaryPredictor(_require(cfg, "boundary"))
    synth = Synthesizer(synth_path or _require(cfg, "synth"))
    proxy = synth.ckpt  # proxy weights travel with the synthesis checkpoint
    if metric == "rank1":
        first = {}
        for i, ident in enumerate(data.identity):
            first.setdefault(ident, i)
        g_idx = np.array(list(first.values()))
        p_idx = np.array([i for i in range(len(data)) if i not in set(g_idx)])
        if not len(p_idx):
            raise DataError("rank-1 evaluation needs at least one probe besides the gallery faces")
        gal_of = np.array([first[data.identity[i]] for i in p_idx])
        fake = _synthesize(pred, synth, data, p_idx, data.pose[gal_of], data.expression[gal_of])
        gallery = ev.embed_images(proxy, data.images[g_idx], identities=data.identity[g_idx])
        probes = ev.embed_images(proxy, fake, "synthesized", identities=data.identity[p_idx],
                                 buckets=[ev.pose_bucket(y) for y in data.yaw_deg[p_idx]])
        r = ev.rank1_accuracy(gallery, probes)
        return ev.make_report("rank1", r.value, r.buckets, r.n_gallery, r.n_probe, cfg.hash(),
                              bucket_counts=r.counts, margin_m=cfg.margin_m)
    pairs = dp.sample_pairs(data.records(), np.random.default_rng([cfg.seed, 21]),
                            dp.PairPolicy(split=data.split[0] if len(data) else "test")).index_pairs[:max_pairs]
    if len(pairs) < 2:
        raise DataError("FID needs at least 2 same-identity pairs in the evaluation split")
    fake = _synthesize(pred, synth, data, pairs[:, 0], data.pose[pairs[:, 1]], data.expression[pairs[:, 1]])
    real = ev.embed_images(proxy, data.images[pairs[:, 1]])
    synthesized = ev.embed_images(proxy, fake, "synthesized")
    value = ev.fid(real, synthesized)
    return ev.make_report("fid", value, {}, len(real), len(synthesized), cfg.hash(), margin_m=cfg.margin_m)


def cmd_eval(args, cfg: RunConfig) -> int:
    records = [r for r in _records(cfg) if r.split == args.split]
    if not records:
        raise DataError(f"manifest has no {args.split!r} records to evaluate")
    data = dp.arrays_from_manifest(records, cfg.resolution, workers=_num_workers())
    out = Path(cfg.out_dir)
    if args.m_sweep:
        try:
            margins = [float(v) for v in args.m_sweep.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad --m-sweep list {args.m_sweep!r}") from exc
        train = dp.arrays_from_manifest(_records(cfg), cfg.resolution, workers=_num_workers())
        reports = {}
        for m in margins:
            cfg_m = cfg.replace(margin_m=m)
            path = Path(cfg.ckpt_dir) / f"synth_m{m:g}.pt"
            train_synthesis_stage(train, _require(cfg, "boundary") if cfg.boundary_source == "predicted" else None,
                                  _require(cfg, "proxy"), cfg_m, out_path=path)
            reports[f"{m:g}"] = evaluate(args.metric, cfg_m, data, synth_path=path)
            print(f"m={m:g}: {args.metric}={reports[f'{m:g}']['value']:.4f}")
        dest = out / f"m_sweep_{args.metric}.json"
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
        print(f"m-sweep: {len(reports)} reports -> {dest}")
        return 0
    rep = evaluate(args.metric, cfg, data)
    dest = ev.write_report(out / f"{args.metric}_report.json", rep)
    print(json.dumps(rep, sort_keys=True))
    print(f"report: {dest}")
    return 0


# -- entry point --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--resolution", type=int, help="working resolution (power of two, 32-128)")
    common.add_argument("--steps", type=int, help="maximum optimizer steps")
    common.add_argument("--out", help="output directory (checkpoints live in <out>/<ckpt_dir>)")
    common.add_argument("--boundary-source", choices=("predicted", "ground_truth"))
    common.add_argument("--m", type=float, help="feature threshold margin")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="facebound", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", parents=[common], help="render the toy face dataset")
    p.add_argument("--identities", type=int, default=6)
    p.add_argument("--per-illumination", type=int, default=6)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--test-identities", type=int, default=2)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("prepare", parents=[common], help="render boundary images for a manifest")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_render_boundary)

    p = sub.add_parser("train", parents=[common], help="run one training phase")
    p.add_argument("--phase", required=True, choices=tuple(PHASE_FILES))
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="tile manipulations over a pose/expression grid")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--grid", help="pose or AU grid along columns, e.g. yaw=18.75:56.25:3.75 (degrees)")
    p.add_argument("--expr-grid", help="grid along rows, e.g. AU25=0:1:0.25")
    p.add_argument("--au", default="", help="base expression, e.g. AU25=0.4,AU45=0.2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="compute fid or rank1 and write a JSON report")
    p.add_argument("--metric", required=True, choices=("fid", "rank1"))
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--m-sweep", help="comma-separated margins; retrains synthesis per value")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except FaceboundError as exc:
        print(f"facebound: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"facebound: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
