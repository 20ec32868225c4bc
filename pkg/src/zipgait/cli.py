"""Command-line entry point: ``zipgait <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, data_io, pipeline
from .errors import (AlignmentError, DegenerateSkeleton, IncompatibleCheckpoint, InvalidParameter, ParseError,
                     ShapeError, TrainingDiverged)
from .heat_skeleton import load_limbs, make_heat_sequence
from .net import DiffGait, NetConfig
from .pgi import stage_one_combine
from .recognition import RecognizerConfig, ZipGait, evaluate_retrieval

log = logging.getLogger("zipgait")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3
DATA_ERRORS = (ParseError, AlignmentError, IncompatibleCheckpoint, DegenerateSkeleton, ShapeError,
               InvalidParameter, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _canvas(text: str) -> list[int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text}") from exc
    return [h, w]


def _config(args, **overrides) -> dict:
    overrides.update({
        "seed": getattr(args, "seed", None),
        "heat.sigma": getattr(args, "sigma", None),
        "heat.canvas": getattr(args, "canvas", None),
        "heat.limbs": getattr(args, "limbs", None),
    })
    return data_io.load_config(getattr(args, "config", None), overrides)


def _write_run_info(out_dir: Path, command: str, cfg: dict, artifacts: list[str], **extra) -> None:
    info = {"command": command, "config_hash": data_io.config_hash(cfg), "seed": cfg["seed"],
            "version": __version__, "artifacts": sorted(artifacts), "config": cfg}
    info.update(extra)
    (out_dir / "run_info.json").write_text(data_io.dumps_json(info))


def _ckpt_meta(cfg: dict, kind: str, step: int, **extra) -> dict:
    meta = {"kind": kind, "step": step, "seed": cfg["seed"], "config": cfg,
            "config_hash": data_io.config_hash(cfg), "C": cfg["diffgait"]["C"]}
    meta.update(extra)
    return meta


def _diffgait_from_ckpt(ckpt: data_io.Checkpoint) -> DiffGait:
    model = DiffGait(NetConfig(C=ckpt.manifest["config"]["diffgait"]["C"]))
    ckpt.load_module("diffgait", model)
    model.eval()
    return model


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    jitter = cfg["synthetic"]["jitter"] if args.jitter is None else args.jitter
    manifest = pipeline.generate_dataset(out, args.identities, args.seqs_per_id, args.frames, cfg["seed"], jitter)
    n_seq = len(manifest.entries)
    print(f"identities={args.identities} sequences={n_seq} frames={n_seq * args.frames} "
          f"manifest={out / 'manifest.jsonl'}")
    return 0


def cmd_train_diffgait(args) -> int:
    cfg = _config(args, **{"diffgait.lr": args.lr})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = data_io.read_manifest(pipeline.resolve_manifest(args.data))
    records = pipeline.load_records(manifest, cfg)
    train, _, _ = pipeline.protocol_split(records, cfg, manifest)
    if any(r.silhouettes is None for r in train):
        raise ParseError(args.data, "DiffGait training needs silhouettes for every training sequence")
    steps = cfg["diffgait"]["steps"] if args.steps is None else args.steps
    model = pipeline.build_diffgait(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg["diffgait"]["lr"])
    start = 0
    if args.resume:
        ckpt = data_io.load_checkpoint(args.resume)
        if ckpt.manifest["config"]["diffgait"]["C"] != cfg["diffgait"]["C"]:
            raise IncompatibleCheckpoint(f"{args.resume}: channel width differs from the run config")
        ckpt.load_module("diffgait", model)
        ckpt.load_optimizer("adam", opt)
        start = int(ckpt.manifest["step"])
    log_path = out / "diffgait_loss.csv"
    try:
        losses = pipeline.train_diffgait(model, train, cfg, steps, opt, start, log_path)
    except TrainingDiverged as exc:
        print(f"TrainingDiverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ckpt_path = out / "diffgait.ckpt"
    data_io.save_checkpoint(ckpt_path, {"diffgait": model}, _ckpt_meta(cfg, "diffgait", start + steps),
                            {"adam": opt})
    _write_run_info(out, "train-diffgait", cfg, [ckpt_path.name, log_path.name], final_step=start + steps)
    print(f"steps {start + 1}-{start + steps} final_loss={losses[-1]:.6f} checkpoint={ckpt_path}")
    return 0


def cmd_sample(args) -> int:
    ckpt = data_io.load_checkpoint(args.ckpt)
    cfg = copy.deepcopy(ckpt.manifest["config"])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.weights is not None:
        cfg["pgi"]["weights"] = args.weights
    model = _diffgait_from_ckpt(ckpt)
    identity, sequence, skel = data_io.read_skeleton_json(args.skeletons)
    heat = make_heat_sequence(skel, load_limbs(cfg["heat"]["limbs"]), cfg["heat"]["sigma"], tuple(cfg["heat"]["canvas"]))
    keys = [pipeline.frame_key(identity, sequence, i) for i in range(len(heat))]
    preds = pipeline.multi_level_silhouettes(model, heat, keys, cfg, args.steps, args.eta)
    weights = cfg["pgi"]["weights"]
    if len(weights) != args.steps:
        weights = [0.0] * (args.steps - 1) + [1.0]
        log.warning("fusion weights do not match %d steps; using the last prediction only", args.steps)
    composite = stage_one_combine(torch.from_numpy(preds), weights).numpy()
    out = Path(args.out)
    (out / "png").mkdir(parents=True, exist_ok=True)
    data_io.save_array(out / "multilevel.npy", preds)
    data_io.save_array(out / "composite.npy", composite)
    data_io.save_array(out / "heat.npy", heat)
    artifacts = ["multilevel.npy", "composite.npy", "heat.npy"]
    for i in range(len(preds)):
        for k in range(preds.shape[1]):
            name = f"png/frame{i:04d}_step{k + 1}.png"
            data_io.save_png(out / name, preds[i, k, 0])
            artifacts.append(name)
        name = f"png/frame{i:04d}_composite.png"
        data_io.save_png(out / name, composite[i, 0])
        artifacts.append(name)
    run_cfg = dict(cfg, diffusion=dict(cfg["diffusion"], steps=args.steps, eta=args.eta),
                   pgi=dict(cfg["pgi"], weights=list(weights)))
    _write_run_info(out, "sample", run_cfg, artifacts, checkpoint=data_io.file_digest(args.ckpt))
    print(f"frames={len(preds)} steps={args.steps} eta={args.eta} out={out}")
    return 0


def cmd_train_zipgait(args) -> int:
    cfg = _config(args, **{"recognition.lr": args.lr})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dg_ckpt = data_io.load_checkpoint(args.diffgait_ckpt)
    diffgait = _diffgait_from_ckpt(dg_ckpt)
    cfg["diffgait"] = dg_ckpt.manifest["config"]["diffgait"]
    manifest = data_io.read_manifest(pipeline.resolve_manifest(args.data))
    records = pipeline.load_records(manifest, cfg)
    train, _, _ = pipeline.protocol_split(records, cfg, manifest)
    ids = sorted({r.identity for r in train})
    class_of = {ident: i for i, ident in enumerate(ids)}
    composites = pipeline.composites_for(diffgait, train, cfg)
    model = pipeline.build_zipgait(cfg, len(ids))
    opt = pipeline.make_sgd(model, cfg)
    steps = cfg["recognition"]["steps"] if args.steps is None else args.steps
    log_path = out / "zipgait_loss.csv"
    try:
        history = pipeline.train_zipgait(model, train, composites, cfg, steps, opt, class_of, 0, log_path)
    except TrainingDiverged as exc:
        print(f"TrainingDiverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ckpt_path = out / "zipgait.ckpt"
    meta = _ckpt_meta(cfg, "zipgait", steps, classes=ids, recognizer=model.cfg.to_dict())
    data_io.save_checkpoint(ckpt_path, {"zipgait": model, "diffgait": diffgait}, meta)
    _write_run_info(out, "train-zipgait", cfg, [ckpt_path.name, log_path.name],
                    diffgait_checkpoint=data_io.file_digest(args.diffgait_ckpt))
    print(f"steps={steps} final_loss={history[-1]['total']:.6f} checkpoint={ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = data_io.load_checkpoint(args.ckpt)
    if ckpt.manifest.get("kind") != "zipgait":
        raise IncompatibleCheckpoint(f"{args.ckpt}: expected a recognizer checkpoint")
    cfg = ckpt.manifest["config"]
    if args.config is not None:
        over = data_io.load_config(args.config)
        cfg = dict(cfg, data=over["data"])
    diffgait = _diffgait_from_ckpt(ckpt)
    model = ZipGait(RecognizerConfig(**ckpt.manifest["recognizer"]))
    ckpt.load_module("zipgait", model)
    manifest = data_io.read_manifest(pipeline.resolve_manifest(args.data))
    records = pipeline.load_records(manifest, cfg)
    _, gallery, probe = pipeline.protocol_split(records, cfg, manifest)
    composites = pipeline.composites_for(diffgait, gallery + probe, cfg)
    g_emb = pipeline.embed_records(model, gallery, composites)
    p_emb = pipeline.embed_records(model, probe, composites)
    result = evaluate_retrieval(g_emb, p_emb)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(data_io.dumps_json(result.to_dict()))
    emb_path = out.with_name(out.stem + "_embeddings.npy")
    data_io.save_array(emb_path, np.stack([e.parts for e in g_emb + p_emb]))
    sidecar = [{"id": e.label, "seq": e.seq, "view": e.view, "role": role}
               for role, group in (("gallery", g_emb), ("probe", p_emb)) for e in group]
    emb_path.with_suffix(".json").write_text(data_io.dumps_json(sidecar))
    info = {"config_hash": data_io.config_hash(cfg), "checkpoint": data_io.file_digest(args.ckpt),
            "artifacts": sorted([out.name, emb_path.name, emb_path.with_suffix(".json").name])}
    out.with_name(out.stem + "_run_info.json").write_text(data_io.dumps_json(info))
    print(f"{'metric':<8}{'value':>8}")
    for key in ("rank1", "rank5", "mAP", "mINP"):
        print(f"{key:<8}{getattr(result, key):>8.4f}")
    print(f"excluded probes: {result.excluded_probes}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zipgait", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def heat_flags(sp):
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--canvas", type=_canvas, help="HxW, e.g. 64x44")
        sp.add_argument("--limbs", help="limb table JSON")

    g = sub.add_parser("gen-data", help="write a synthetic walker dataset")
    g.add_argument("--identities", type=_positive_int, required=True)
    g.add_argument("--seqs-per-id", type=_positive_int, required=True)
    g.add_argument("--frames", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jitter", type=float, help="keypoint jitter in raw pixels")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-diffgait", help="train the skeleton-to-silhouette diffusion model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="continue from a DiffGait checkpoint")
    heat_flags(t)
    t.set_defaults(func=cmd_train_diffgait)

    s = sub.add_parser("sample", help="reconstruct multi-level silhouettes from a skeleton file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--skeletons", required=True)
    s.add_argument("--steps", type=_positive_int, default=5)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--weights", type=float, nargs="+")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    z = sub.add_parser("train-zipgait", help="train the recognizer with DiffGait frozen")
    z.add_argument("--config")
    z.add_argument("--data", required=True)
    z.add_argument("--diffgait-ckpt", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--steps", type=_positive_int)
    z.add_argument("--lr", type=float)
    z.add_argument("--seed", type=int)
    heat_flags(z)
    z.set_defaults(func=cmd_train_zipgait)

    e = sub.add_parser("eval", help="gallery/probe retrieval metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="override the data protocol stored in the checkpoint")
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"TrainingDiverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
