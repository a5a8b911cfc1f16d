"""Command-line entry point: ``remseg {synth,train,infer,eval}``.

Exit codes: 0 ok, 1 runtime/I-O failure, 2 usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import RemsegError, TrainingDivergedError

log = logging.getLogger("remseg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def code_version() -> str:
    """sha256 over the package sources, recorded in every run.json."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def env_seed(default: int = 0) -> int:
    val = os.environ.get("REM_SEED")
    return int(val) if val not in (None, "") else default


def write_run_json(out: Path, command: str, resolved: dict):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "code_version": code_version(), "config": resolved}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _resolve(root, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() or root is None else Path(root) / p


# -- synth -------------------------------------------------------------------


def _parse_resolution(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", " ").replace(",", " ").split()
    if len(parts) == 1:
        parts = parts * 2
    try:
        h, w = (int(v) for v in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use e.g. 64 or 64x64") from None
    return h, w


def _parse_concepts(text: str) -> list[tuple[str, str]]:
    combos = []
    for item in text.split(","):
        words = item.replace("-", " ").split()
        if len(words) != 2:
            raise argparse.ArgumentTypeError(f"concept {item!r} must be '<colour> <shape>'")
        combos.append((words[0], words[1]))
    return combos


def cmd_synth(args) -> int:
    from .synth import SynthSpec, synth_dataset

    out = _resolve(args.root, args.out)
    seed = args.seed if args.seed is not None else env_seed()
    spec = SynthSpec(
        n_clips=args.n_clips,
        num_frames=1 if args.modality == "image" else args.frames,
        resolution=args.resolution,
        combos=args.concepts,
        objects_per_clip=args.objects,
        refer_all=args.refer_all,
        modality=args.modality,
        split=args.split,
    )
    man = synth_dataset(spec, out, seed=seed)
    write_run_json(out, "synth", {"spec": asdict(spec), "seed": seed, "out": str(out)})
    print(f"wrote {len(man)} samples to {out / 'manifest.json'}")
    return EXIT_OK


# -- train -------------------------------------------------------------------


_RUN_KEYS = ("video_manifest", "image_manifest", "val_manifest", "autoencoder", "autoencoder_train", "denoiser", "init")


def cmd_train(args) -> int:
    import torch

    from .codec import AETrainConfig, load_autoencoder, save_autoencoder, train_toy_autoencoder
    from .data import load_manifest
    from .denoiser import DenoiserConfig, DenoiserNet
    from .training import TrainConfig, load_checkpoint, pretrain, save_checkpoint, train_stage1, train_stage2

    root = args.root
    cfg_path = _resolve(root, args.config)
    doc = json.loads(Path(cfg_path).read_text()) if cfg_path else {}
    run = {k: doc.pop(k) for k in _RUN_KEYS if k in doc}
    if args.stage:
        doc["stage"] = args.stage
    doc.setdefault("seed", env_seed())
    out = _resolve(root, args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc["log_path"] = str(out / "train.jsonl")
    doc["ckpt_path"] = str(out / "denoiser.ckpt")
    cfg = TrainConfig.from_dict(doc)
    torch.manual_seed(cfg.seed)

    manifests = {k: load_manifest(_resolve(root, run[k])) if run.get(k) else None
                 for k in ("video_manifest", "image_manifest", "val_manifest")}
    if manifests["video_manifest"] is None and manifests["image_manifest"] is None:
        raise RemsegError("config names neither video_manifest nor image_manifest")

    state = None
    if args.resume:
        state, net, _ = load_checkpoint(_resolve(root, args.resume))
    elif run.get("init"):
        _, net, _ = load_checkpoint(_resolve(root, run["init"]))
    else:
        net = DenoiserNet(DenoiserConfig(**run.get("denoiser", {"cnn_head": cfg.decoder == "cnn"})))

    if run.get("autoencoder"):
        ae_path = _resolve(root, run["autoencoder"])
        ae = load_autoencoder(ae_path)
    else:
        ae_cfg = AETrainConfig(**{**run.get("autoencoder_train", {}), "seed": cfg.seed})
        ae = train_toy_autoencoder([m for m in manifests.values() if m is not None], ae_cfg)
        ae_path = out / "autoencoder.bin"
        save_autoencoder(ae, ae_path)

    extra = {"autoencoder": os.path.relpath(Path(ae_path).resolve(), out.resolve()), "decoder": cfg.decoder}
    write_run_json(out, "train", {"train": cfg.to_dict(), **{k: v for k, v in run.items()},
                                  "autoencoder_path": str(ae_path), "resume": args.resume,
                                  "denoiser_config": net.config.to_dict()})
    if cfg.stage == "stage1":
        data = manifests["image_manifest"]
        if data is None:
            raise RemsegError("stage1 needs image_manifest")
        state = train_stage1(net, ae, data, cfg, state=state)
    elif cfg.stage == "stage2":
        if manifests["video_manifest"] is None:
            raise RemsegError("stage2 needs video_manifest")
        state = train_stage2(net, ae, manifests["video_manifest"], manifests["image_manifest"], cfg,
                             state=state, val_data=manifests["val_manifest"])
    else:
        data = manifests["video_manifest"] or manifests["image_manifest"]
        state = pretrain(net, ae, data, cfg, state=state)
    save_checkpoint(state, net, out / "denoiser.ckpt", extra)
    print(f"{cfg.stage}: step {state.step}, last loss {state.losses[-1] if state.losses else float('nan'):.6f}")
    return EXIT_OK


# -- infer / eval ------------------------------------------------------------


def _load_model(ckpt):
    from .codec import load_autoencoder
    from .training import load_checkpoint

    ckpt = Path(ckpt)
    if ckpt.is_dir():
        ckpt = ckpt / "denoiser.ckpt"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, net, meta = load_checkpoint(ckpt)
    ae_rel = meta.get("autoencoder")
    if not ae_rel:
        raise RemsegError(f"{ckpt}: sidecar does not name an autoencoder")
    ae = load_autoencoder(ckpt.parent / ae_rel)
    return net, ae, meta


def cmd_infer(args) -> int:
    from .data import VideoClip, read_frame
    from .inference import Segmenter, render_overlay, write_masks

    net, ae, meta = _load_model(_resolve(args.root, args.ckpt))
    frames_dir = _resolve(args.root, args.frames_dir)
    files = sorted(p for p in Path(frames_dir).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no frames in {frames_dir}")
    clip_id = Path(frames_dir).name
    clip = VideoClip(np.stack([read_frame(p) for p in files]), clip_id=clip_id)
    decoder = "cnn" if args.ablation == "cnn-head" else "vae"
    seg = Segmenter(net, ae, window=args.window, overlap=args.overlap, decoder=decoder)
    out = _resolve(args.root, args.out)
    for i, expr in enumerate(args.expr):
        masks = seg(clip, expr)
        write_masks(masks, out, clip_id, i)
        if args.overlay:
            render_overlay(clip, masks, out / clip_id / f"{i}_overlay")
    write_run_json(out, "infer", {**vars(args), "decoder": decoder, "n_frames": len(clip)})
    print(f"segmented {len(clip)} frames x {len(args.expr)} expressions into {out / clip_id}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import evaluate_dataset
    from .inference import Segmenter

    try:
        manifest = load_manifest(_resolve(args.root, args.manifest))
    except (RemsegError, OSError) as exc:
        print(f"error: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    net, ae, meta = _load_model(_resolve(args.root, args.ckpt))
    decoder = "cnn" if args.ablation == "cnn-head" else "vae"
    seg = Segmenter(net, ae, window=args.window, overlap=args.overlap, decoder=decoder)
    out = _resolve(args.root, args.out)
    name = args.name or Path(args.manifest).parent.name
    report = evaluate_dataset(seg, manifest, dataset=name, out_dir=out, decoder=decoder)
    write_run_json(out, "eval", {**vars(args), "decoder": decoder})
    print(report.summary())
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="remseg", description=__doc__.splitlines()[0])
    p.add_argument("--root", help="resolve relative paths against this directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic referral dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-clips", type=int, default=8)
    s.add_argument("--resolution", type=_parse_resolution, default=(64, 64))
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--concepts", type=_parse_concepts, default=None,
                   help="comma-separated '<colour> <shape>' pairs, e.g. 'red square,blue circle'")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--objects", type=int, default=1)
    s.add_argument("--refer-all", action="store_true")
    s.add_argument("--modality", choices=("video", "image"), default="video")
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run pretrain / stage1 / stage2")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", choices=("pretrain", "stage1", "stage2"))
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment a frame directory")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frames-dir", required=True)
    i.add_argument("--expr", required=True, action="append")
    i.add_argument("--out", required=True)
    i.add_argument("--window", type=int, default=8)
    i.add_argument("--overlap", type=int, default=None)
    i.add_argument("--overlay", action="store_true")
    i.add_argument("--ablation", choices=("none", "cnn-head"), default="none")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ablation", choices=("none", "cnn-head"), default="none")
    e.add_argument("--window", type=int, default=8)
    e.add_argument("--overlap", type=int, default=None)
    e.add_argument("--name", default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse has already printed usage
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        print(json.dumps({"step": exc.step, "lr": exc.lr, "batch": exc.batch_ids, "loss": str(exc.loss)}),
              file=sys.stderr)
        return EXIT_NUMERIC
    except (RemsegError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
