"""Command-line entry point: ``birf {train,render,eval,info}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from . import snapshot
from .data import Dataset, load_blender, load_nsvf, load_oracle_scene, oracle_splits
from .errors import BirfError, ConfigError, DatasetError
from .field import FieldModel
from .metrics import MetricReport
from .render import render_image, save_png
from .sampler import rebuild_occupancy
from .train import make_rngs, train

log = logging.getLogger("birf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def thread_limit(deterministic: bool):
    """Context limiting BLAS threads: 1 when deterministic, else ``BIRF_NUM_THREADS`` if set."""
    from threadpoolctl import threadpool_limits

    if deterministic:
        return threadpool_limits(1)
    env = os.environ.get("BIRF_NUM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"BIRF_NUM_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("BIRF_NUM_THREADS must be >= 1")
        return threadpool_limits(n)
    return contextlib.nullcontext()


def load_split(cfg: dict, split: str) -> Dataset:
    data = cfg["data"]
    bg = tuple(data["background"])
    if data["oracle"] is not None:
        if split not in ("train", "test"):
            raise DatasetError(f"oracle scenes provide train and test splits, not {split!r}")
        scene = load_oracle_scene(data["oracle"])
        scene.background = bg
        train_set, test_set = oracle_splits(scene, data["n_train"], data["n_test"], data["resolution"], data["seed"])
        return train_set if split == "train" else test_set
    loader = load_blender if data["format"] == "blender" else load_nsvf
    return loader(data["path"], split, bg, data["downscale"])


def evaluate_model(model: FieldModel, header: snapshot.SnapshotHeader, cfg: dict, dataset: Dataset):
    """Rebuild occupancy from the model and render every view; returns (report, images)."""
    tc = cfgmod.build_train_config(cfg)
    ev = cfg["eval"]
    occ = tc.make_occupancy()
    rebuild_occupancy(occ, model, ev["occ_rebuild_passes"], ev["occ_rebuild_seed"])
    n = len(dataset) if ev["max_views"] is None else min(len(dataset), ev["max_views"])
    report = MetricReport()
    images = []
    for i in range(n):
        img = render_image(model, occ, dataset.cameras[i], header.scene_transform, tc.step, header.background, ev["early_stop"])
        report.add(f"{dataset.split}_{i:03d}", img, dataset.images[i])
        images.append(img)
    return report, images


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("data", "oracle", args.oracle)
    put("data", "path", args.data)
    if args.data is not None and args.oracle is None:
        o["data"]["oracle"] = None
    if args.oracle is not None and args.data is None:
        o["data"]["path"] = None
    put("data", "format", args.format)
    put("data", "resolution", args.resolution)
    put("grid", "feature_dim", args.feature_dim)
    put("train", "iterations", args.iters)
    put("train", "seed", args.seed)
    put("train", "rays_per_batch", args.rays)
    put("train", "lambda_sparsity", args.sparsity)
    put("snapshot", "fp16", True if args.fp16 else None)
    if args.out is not None:
        o["out"] = args.out
    if args.deterministic:
        o["deterministic"] = True
    return o


def _run_config(args) -> dict:
    file_cfg = cfgmod.load_config(args.config) if args.config else None
    return cfgmod.resolve(file_cfg, _overrides(args), args.preset)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, out / "config.json")
    with thread_limit(cfg["deterministic"]):
        train_set = load_split(cfg, "train")
        test_set = load_split(cfg, "test")
        tc = cfgmod.build_train_config(cfg)
        m = cfg["model"]
        model = FieldModel.create(
            cfgmod.build_grid_config(cfg), make_rngs(tc.seed)["init"], m["hidden_width"], m["pe_freqs"], m["embedding_width"]
        )
        log.info("training %d iterations on %d views -> %s", tc.iterations, len(train_set), out)
        path = out / "model.birf"
        with open(out / "metrics.jsonl", "w") as fh:
            train(model, train_set, tc, test_set, log_file=fh, echo=not args.quiet)
            nbytes = snapshot.save(model, path, train_set.scene_transform, train_set.background, cfg["snapshot"]["fp16"])
            # score exactly what `birf eval` will see: the reloaded binary snapshot
            loaded, header = snapshot.load_with_header(path)
            report, _ = evaluate_model(loaded, header, cfg, test_set)
            final = {"event": "final_eval", "iter": tc.iterations, "psnr_eval": report.mean_psnr, "ssim_eval": report.mean_ssim}
            fh.write(json.dumps(final) + "\n")
    report.write(out / "eval_test.json")
    (out / "eval_test.txt").write_text(report.to_text())
    print(f"saved {path} ({nbytes} bytes); test PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def _snapshot_context(args) -> tuple[FieldModel, snapshot.SnapshotHeader, dict]:
    snap = Path(args.snapshot)
    if not snap.is_file():
        raise FileNotFoundError(f"snapshot {snap} not found")
    cfg_path = Path(args.config) if args.config else snap.parent / "config.json"
    if not cfg_path.is_file():
        raise ConfigError(f"run config {cfg_path} not found (pass --config)")
    cfg = cfgmod.validate(cfgmod.merge(cfgmod.FULL, cfgmod.load_config(cfg_path)))
    model, header = snapshot.load_with_header(snap)
    return model, header, cfg


def cmd_render(args) -> int:
    model, header, cfg = _snapshot_context(args)
    with thread_limit(cfg["deterministic"]):
        dataset = load_split(cfg, args.split)
        views = range(len(dataset)) if args.view is None else [args.view]
        if args.view is not None and not 0 <= args.view < len(dataset):
            raise ConfigError(f"--view {args.view} out of range for {len(dataset)} {args.split} views")
        out = Path(args.out) if args.out else Path(args.snapshot).parent / f"render_{args.split}"
        out.mkdir(parents=True, exist_ok=True)
        tc = cfgmod.build_train_config(cfg)
        occ = tc.make_occupancy()
        ev = cfg["eval"]
        rebuild_occupancy(occ, model, ev["occ_rebuild_passes"], ev["occ_rebuild_seed"])
        for i in views:
            img = render_image(model, occ, dataset.cameras[i], header.scene_transform, tc.step, header.background, ev["early_stop"])
            save_png(img, out / f"{args.split}_{i:03d}.png")
    print(f"rendered {len(views)} view(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, header, cfg = _snapshot_context(args)
    with thread_limit(cfg["deterministic"]):
        dataset = load_split(cfg, args.split)
        report, _ = evaluate_model(model, header, cfg, dataset)
    base = Path(args.out) if args.out else Path(args.snapshot).parent / f"eval_{args.split}"
    base.parent.mkdir(parents=True, exist_ok=True)
    report.write(base.with_suffix(".json"))
    base.with_suffix(".txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_info(args) -> int:
    h = snapshot.read_header(args.snapshot, verify=not args.no_verify)
    cfg = h.grid_config
    info = {
        "format_version": h.version,
        "mlp_dtype": "float16" if h.fp16 else "float32",
        "feature_dim": cfg.feature_dim,
        "levels_3d": [[lv.resolution, lv.table_size, "dense" if lv.is_dense else "hash"] for lv in cfg.levels_3d],
        "levels_2d": [[lv.resolution, lv.table_size, "dense" if lv.is_dense else "hash"] for lv in cfg.levels_2d],
        "density_mlp": [h.density_spec.input_width, h.density_spec.hidden_width, h.density_spec.hidden_layers, h.density_spec.output_width],
        "color_mlp": [h.color_spec.input_width, h.color_spec.hidden_width, h.color_spec.hidden_layers, h.color_spec.output_width],
        "scene_scale": h.scene_transform.scale,
        "scene_offset": list(h.scene_transform.offset),
        "background": list(h.background),
        "payload_crc32": f"{h.payload_crc32:08x}",
    }
    if args.json:
        size = snapshot.report_from_header(h)
        info["size"] = {"grid_bits": size.grid_bits, "grid_bytes": size.grid_bytes, "mlp_bytes": size.mlp_bytes,
                        "header_bytes": size.header_bytes, "total_bytes": size.total_bytes}
        print(json.dumps(info, indent=2))
    else:
        for k, v in info.items():
            print(f"{k:15s}: {v}")
        print(snapshot.report_from_header(h).to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="birf", description="Train and render binary radiance fields.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a snapshot")
    t.add_argument("--config", help="JSON run config; flags override its values")
    t.add_argument("--preset", choices=["full", "desk"], help="base settings (default: desk for oracle scenes, full otherwise)")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--oracle", help="built-in oracle scene (empty, single, spheres) or JSON scene file")
    src.add_argument("--data", help="dataset directory")
    t.add_argument("--format", choices=["blender", "nsvf"])
    t.add_argument("--resolution", type=int, help="oracle image size")
    t.add_argument("--feature-dim", type=int, help="features per grid entry (1, 2, 4 or 8)")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--rays", type=int, help="rays per batch")
    t.add_argument("--sparsity", type=float, help="sparsity loss weight")
    t.add_argument("--fp16", action="store_true", help="store MLP weights as float16")
    t.add_argument("--out", help="output directory")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    t.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("render", cmd_render, "render views from a snapshot"), ("eval", cmd_eval, "score a snapshot on a split")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("snapshot")
        s.add_argument("--config", help="run config (default: config.json next to the snapshot)")
        s.add_argument("--split", default="test")
        s.add_argument("--out")
        if name == "render":
            s.add_argument("--view", type=int, help="render only this view index")
        s.set_defaults(func=fn)

    i = sub.add_parser("info", help="print snapshot header and size breakdown")
    i.add_argument("snapshot")
    i.add_argument("--json", action="store_true")
    i.add_argument("--no-verify", action="store_true", help="skip the payload checksum")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"birf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"birf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BirfError, OSError, FloatingPointError) as exc:
        print(f"birf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
