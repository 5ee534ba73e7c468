"""Command-line entry point: latentface <command> [options]."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import renderer
from .data import load_corpus, load_image, save_pgm, save_png
from .errors import DataError, LatentFaceError, UsageError, VersionMismatchError
from .pipeline import latent_sequences
from .probe import FEATURE_DIM, emit_reports, eval_classification, extract_features, train_probe, verification_crossval
from .rdm import HEADS, Stage2Config, build_rdm_dataset, load_rdm, save_latent_pack, train_stage2, write_loss_csv
from .stage1 import ABLATIONS, Stage1Config, load_stage1, train_stage1

log = logging.getLogger("latentface")

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "out": "out",
    "stage1": {k: v for k, v in Stage1Config().to_dict().items() if k != "seed"},
    "stage2": {k: v for k, v in Stage2Config().to_dict().items() if k != "seed"},
    "synth": {"identities": 64, "frames": 16, "pairs_per_fold": 30},
    "probe": {"epochs": 20, "learning_rate": 1e-3, "folds": 10},
    "command": {},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where + key!r}")
        if key == "command":
            out[key] = dict(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_run_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    return _merge(DEFAULTS, raw)


def write_resolved(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def stage1_config(cfg: dict) -> Stage1Config:
    return Stage1Config(seed=int(cfg["seed"]), **cfg["stage1"])


def stage2_config(cfg: dict) -> Stage2Config:
    s2 = dict(cfg["stage2"])
    s2["widths"] = tuple(s2["widths"])
    return Stage2Config(seed=int(cfg["seed"]), **s2)


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentface", description=__doc__)
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="torch intra-op threads (fallback: LATENTFACE_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--identities", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--pairs-per-fold", type=int)

    t = sub.add_parser("train", help="train stage 1 (autoencoder) or stage 2 (identity diffusion)")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True, help="corpus root")
    t.add_argument("--stage1", help="stage-1 checkpoint (required for --stage 2)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ablate", help="comma list from: " + ",".join(ABLATIONS))

    r = sub.add_parser("render", help="reconstruct, frontalize and export canonical maps")
    r.add_argument("--stage1", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--pose", help="yaw,pitch,roll in degrees, optionally followed by tx,ty,tz")

    e = sub.add_parser("extract", help="write a 1024-d feature pack")
    _model_args(e)
    e.add_argument("--variant", choices=("fer", "verify"), default="fer")
    e.add_argument("--split", help="restrict to one split")

    q = sub.add_parser("probe", help="linear probe for expression classification")
    _model_args(q)
    q.add_argument("--task", choices=("fer",), default="fer")

    v = sub.add_parser("verify", help="10-fold pair verification")
    _model_args(v)

    c = sub.add_parser("check", help="gradient and invariant check suites")
    c.add_argument("suite", choices=("grad", "invariants", "all"))
    return p


def _model_args(p):
    p.add_argument("--stage1", required=True)
    p.add_argument("--rdm", required=True, help="directory holding rdm_texture.ckpt and rdm_shape.ckpt")
    p.add_argument("--data", required=True)


def resolve(args) -> dict:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.threads is not None:
        cfg["threads"] = args.threads
    elif cfg["threads"] is None and os.environ.get("LATENTFACE_THREADS"):
        try:
            cfg["threads"] = int(os.environ["LATENTFACE_THREADS"])
        except ValueError as exc:
            raise UsageError("LATENTFACE_THREADS must be an integer") from exc
    if args.cmd == "synth":
        for key, flag in (("identities", args.identities), ("frames", args.frames),
                          ("pairs_per_fold", args.pairs_per_fold)):
            if flag is not None:
                cfg["synth"][key] = flag
    if args.cmd == "train":
        section = cfg["stage1"] if args.stage == 1 else cfg["stage2"]
        for key, flag in (("epochs", args.epochs), ("batch_size", args.batch_size), ("learning_rate", args.lr)):
            if flag is not None:
                section[key] = flag
        if args.ablate:
            if args.stage != 1:
                raise UsageError("--ablate applies to --stage 1 only")
            for name in args.ablate.split(","):
                name = name.strip()
                if name not in ABLATIONS:
                    raise UsageError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
                cfg["stage1"][f"disable_{name}"] = True
    command = {k: v for k, v in vars(args).items() if k not in ("config", "seed", "out", "threads", "verbose")}
    cfg["command"] = command
    return cfg


# ---------------------------------------------------------------- commands

def _train_split(corpus, split="train"):
    entries = corpus.select(split)
    return entries if entries else corpus.select()


def cmd_synth(cfg: dict, out: Path) -> int:
    from .synth import gen_dataset

    s = cfg["synth"]
    if s["identities"] < 1 or s["frames"] < 1:
        raise UsageError("--identities and --frames must be >= 1")
    if s["pairs_per_fold"] < 1:
        raise UsageError("--pairs-per-fold must be >= 1")
    gen_dataset(s["identities"], s["frames"], cfg["seed"], out=out, n_pairs_per_fold=s["pairs_per_fold"])
    write_resolved(cfg, out)
    print(f"wrote {s['identities'] * s['frames']} images to {out}")
    return 0


def cmd_train(cfg: dict, args, out: Path) -> int:
    corpus = load_corpus(args.data)
    entries = _train_split(corpus)
    if args.stage == 1:
        s1 = stage1_config(cfg)
        write_resolved(cfg, out)
        images = corpus.load(entries)
        train_stage1(images, s1, out, progress=lambda ep, m: print(f"epoch {ep} total {m:.5f}", flush=True))
        print(f"wrote {out / 'last.ckpt'}")
        return 0
    if not args.stage1:
        raise UsageError("train --stage 2 requires --stage1 <checkpoint>")
    s2 = stage2_config(cfg)
    write_resolved(cfg, out)
    model, _, _ = load_stage1(args.stage1)
    images = corpus.load(entries)
    seqs = latent_sequences(model, images, [e.identity for e in entries])
    s1_hash = ckpt.file_hash(args.stage1)
    save_latent_pack(seqs, out / "latents.lfck", {"stage1_hash": s1_hash})
    for head in HEADS:
        examples = build_rdm_dataset(seqs, head, s2.n, s2.seed)
        _, rows = train_stage2(examples, head, s2, s1_hash, out / f"rdm_{head}.ckpt")
        write_loss_csv(rows, out / f"loss_{head}.csv")
        print(f"{head}: final loss {rows[-1]['loss']:.5f}", flush=True)
    return 0


def _pose_override(text: str) -> renderer.Pose:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --pose {text!r}") from exc
    if len(vals) not in (3, 6):
        raise UsageError("--pose takes 3 angles (degrees) or 3 angles and 3 translations")
    vals += [0.0] * (6 - len(vals))
    return renderer.Pose(*(math.radians(v) for v in vals[:3]), *vals[3:])


def depth_to_unit(depth: torch.Tensor) -> torch.Tensor:
    """Depth [0.9, 1.1] -> [0, 1] for 8-bit export."""
    return (depth - (renderer.DEPTH_CENTER - renderer.DEPTH_RANGE)) / (2 * renderer.DEPTH_RANGE)


def unit_to_depth(values) -> np.ndarray:
    return np.asarray(values) * (2 * renderer.DEPTH_RANGE) + (renderer.DEPTH_CENTER - renderer.DEPTH_RANGE)


@torch.no_grad()
def cmd_render(cfg: dict, args, out: Path) -> int:
    from .stage1 import forward_autoencode

    model, s1, _ = load_stage1(args.stage1)
    image = load_image(args.image)[None]
    res = forward_autoencode(image, model, s1)
    cam = renderer.Camera(model.arch.fov)
    out.mkdir(parents=True, exist_ok=True)
    save_png(res.recon.image[0], out / "recon.png")
    save_png(renderer.frontalize(res.albedo[0], res.depth[0], cam=cam), out / "frontal.png")
    save_png(res.albedo[0], out / "albedo.png")
    save_pgm(depth_to_unit(res.depth[0]), out / "depth.pgm")
    if args.pose:
        posed = renderer.render(res.albedo[0], res.depth[0], _pose_override(args.pose), renderer.NEUTRAL_LIGHT, cam)
        save_png(posed.image, out / "posed.png")
    write_resolved(cfg, out)
    print(f"wrote renders to {out}")
    return 0


def _load_models(args):
    model, _, _ = load_stage1(args.stage1)
    s1_hash = ckpt.file_hash(args.stage1)
    samplers = {}
    for head in HEADS:
        path = Path(args.rdm) / f"rdm_{head}.ckpt"
        samplers[head], meta = load_rdm(path)
        if meta.get("stage1_hash") and meta["stage1_hash"] != s1_hash:
            raise VersionMismatchError(f"{path} was trained on a different stage-1 checkpoint")
    return model, samplers


def _features(model, samplers, images, variant, cfg):
    feats = extract_features(images, model, samplers["texture"], samplers["shape"], variant,
                             seed=cfg["stage2"]["sample_seed"])
    if feats.shape[1] != FEATURE_DIM:
        raise DataError(f"feature dimension {feats.shape[1]} != {FEATURE_DIM}")
    return feats


def cmd_extract(cfg: dict, args, out: Path) -> int:
    model, samplers = _load_models(args)
    corpus = load_corpus(args.data)
    entries = corpus.select(args.split)
    if not entries:
        raise DataError(f"no images in split {args.split!r}")
    feats = _features(model, samplers, corpus.load(entries), args.variant, cfg)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"arch": "latentface-features", "variant": args.variant,
            "paths": [corpus.rel(e) for e in entries], "stage1_hash": ckpt.file_hash(args.stage1)}
    ckpt.save_checkpoint({"features": feats}, meta, out / "features.lfck")
    write_resolved(cfg, out)
    print(f"wrote {tuple(feats.shape)} features to {out / 'features.lfck'}")
    return 0


def _class_labels(corpus, entries):
    if corpus.labels is None:
        raise DataError("corpus has no labels.csv")
    labels = []
    for e in entries:
        row = corpus.label_for(e)
        if row is None:
            raise DataError(f"no label row for {corpus.rel(e)}")
        labels.append(int(row["class"]))
    return np.asarray(labels, dtype=np.int64)


def cmd_probe(cfg: dict, args, out: Path) -> int:
    model, samplers = _load_models(args)
    corpus = load_corpus(args.data)
    train_e, eval_e = corpus.select("train"), corpus.select("eval")
    if not train_e or not eval_e:
        raise DataError("probe needs both train and eval splits")
    y_tr, y_ev = _class_labels(corpus, train_e), _class_labels(corpus, eval_e)
    f_tr = _features(model, samplers, corpus.load(train_e), "fer", cfg)
    f_ev = _features(model, samplers, corpus.load(eval_e), "fer", cfg)
    n_classes = int(max(y_tr.max(), y_ev.max())) + 1
    p = cfg["probe"]
    head = train_probe(f_tr, y_tr, epochs=p["epochs"], lr=p["learning_rate"], seed=cfg["seed"], n_classes=n_classes)
    res = eval_classification(head, f_ev, y_ev, n_classes)
    emit_reports(out, {"accuracy": res["accuracy"], "macro_f1": res["macro_f1"]}, res["confusion"])
    write_resolved(cfg, out)
    print(f"accuracy {res['accuracy']:.4f} macro-F1 {res['macro_f1']:.4f}")
    return 0


def cmd_verify(cfg: dict, args, out: Path) -> int:
    model, samplers = _load_models(args)
    corpus = load_corpus(args.data)
    if not corpus.pairs:
        raise DataError("corpus has no pairs.csv")
    index, paths = {}, []
    pairs = []
    for row in corpus.pairs:
        ids = []
        for key in ("img_a", "img_b"):
            rel = row[key]
            if rel not in index:
                if not (corpus.root / rel).exists():
                    raise DataError(f"pair image {rel} not found")
                index[rel] = len(paths)
                paths.append(corpus.root / rel)
            ids.append(index[rel])
        pairs.append((ids[0], ids[1], int(row["same"])))
    images = torch.stack([load_image(p) for p in paths])
    feats = _features(model, samplers, images, "verify", cfg)
    p = cfg["probe"]
    report = verification_crossval(pairs, feats, seed=cfg["seed"], folds=p["folds"],
                                   epochs=p["epochs"], lr=p["learning_rate"])
    emit_reports(out, {"mean_accuracy": report.mean, "std_accuracy": report.std}, folds=report)
    write_resolved(cfg, out)
    print(f"verification accuracy {report.mean:.4f} +- {report.std:.4f}")
    return 0


def cmd_check(args) -> int:
    from .checks import run_suite

    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        if cfg["threads"]:
            torch.set_num_threads(int(cfg["threads"]))
        out = Path(cfg["out"])
        if args.cmd == "synth":
            return cmd_synth(cfg, out)
        if args.cmd == "train":
            return cmd_train(cfg, args, out)
        if args.cmd == "render":
            return cmd_render(cfg, args, out)
        if args.cmd == "extract":
            return cmd_extract(cfg, args, out)
        if args.cmd == "probe":
            return cmd_probe(cfg, args, out)
        if args.cmd == "verify":
            return cmd_verify(cfg, args, out)
        return cmd_check(args)
    except LatentFaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
