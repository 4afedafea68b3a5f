"""Command line entry point: ``occfield <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .errors import ConfigurationError, InvalidParameterError, NumericalError, OutOfDomainError
from .io import (load_frameset, load_grid, read_json, read_pfm, save_frameset, save_grid,
                 sha256_file, write_depth_png, write_json, write_label_png, write_pfm)

log = logging.getLogger("occfield")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class RunManifest:
    """Provenance of one invocation: arguments, versions and artifact hashes."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.doc = {
            "command": command,
            "arguments": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"},
            "seed": getattr(args, "seed", None),
            "config": getattr(args, "config", None),
            "versions": {"occfield": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "inputs": {},
            "outputs": {},
        }

    def add_inputs(self, paths, root=None):
        self._add("inputs", paths, root)

    def add_outputs(self, paths, root=None):
        self._add("outputs", paths, root)

    def _add(self, key, paths, root):
        for p in paths:
            p = Path(p)
            if p.is_file():
                name = str(p.relative_to(root)) if root else str(p)
                self.doc[key][name] = sha256_file(p)

    def write(self, out_dir):
        write_json(Path(out_dir) / "manifest.json", self.doc)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _files(root):
    return sorted(p for p in Path(root).rglob("*") if p.is_file() and p.name not in (".lock", "manifest.json"))


def _load_config(path, default=None):
    if path is None:
        return default or {}
    d = read_json(path)
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return d


# -- commands --------------------------------------------------------------------

def cmd_synth(args, out: Path, manifest: RunManifest):
    from .io import save_rig
    from .synth import SceneSpec, synthesize

    spec = SceneSpec.from_dict(read_json(args.spec))
    fs, hold = synthesize(spec)
    written = save_frameset(out, fs)
    if hold is not None:
        save_frameset(out, hold, subdir="holdout", rig_name="holdout_rig.json")
    save_rig(out / "rig.json", fs.rig)
    write_json(out / "scene.json", spec.raw)
    manifest.add_inputs([args.spec])
    print(f"wrote {len(written)} files for {fs.num_frames} frames x {fs.num_cameras} cameras to {out}")


def _fit_config(args):
    from .optimizer import FitConfig

    d = _load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.steps is not None:
        d["steps"] = args.steps
    return FitConfig.from_dict(d)


def save_checkpoint(ckpt: Path, grid, cfg, steps: int):
    ckpt.mkdir(parents=True, exist_ok=True)
    save_grid(ckpt / "grid.occf", grid)
    write_json(ckpt / "config.json", cfg.to_dict())
    write_json(ckpt / "state.json", {"step": steps, "seed": cfg.seed, "format": "occf-1"})


def cmd_fit(args, out: Path, manifest: RunManifest):
    from .optimizer import fit

    cfg = _fit_config(args)
    fs = load_frameset(args.data)
    if cfg.loss.lam == 0:
        fs.labels = None
    grid = cfg.grid.build()
    every = max(1, cfg.steps // 20)

    def progress(step, row):
        if step % every == 0 or step == cfg.steps - 1:
            log.info("step %5d  L_pe %.5f  L_sem %.5f", step, row["L_pe"], row["L_sem"])

    res = fit(grid, fs, cfg, log_path=out / "loss.csv", progress=progress)
    save_checkpoint(out / "checkpoint", grid, cfg, res.steps)
    manifest.add_inputs(_files(args.data))
    if args.config:
        manifest.add_inputs([args.config])
    last = res.log[-1] if res.log else None
    print(f"fit {cfg.steps} steps; final L_pe {last['L_pe']:.5f}" if last else "fit 0 steps")


def _load_checkpoint(path):
    from .optimizer import FitConfig

    path = Path(path)
    grid_path = path / "grid.occf" if path.is_dir() else path
    if not grid_path.exists():
        raise ConfigurationError(f"no grid checkpoint at {path}")
    grid = load_grid(grid_path)
    cfg_path = grid_path.parent / "config.json"
    cfg = FitConfig.from_dict(read_json(cfg_path)) if cfg_path.exists() else None
    return grid, cfg, grid_path


def cmd_render(args, out: Path, manifest: RunManifest):
    from .objective import render_depth_image

    grid, _, gpath = _load_checkpoint(args.checkpoint)
    fs = load_frameset(args.data, subdir="holdout", rig_name="holdout_rig.json") if args.holdout \
        else load_frameset(args.data)
    frame = fs.key if args.frame is None else args.frame
    if not 0 <= frame < fs.num_frames or not 0 <= args.camera < fs.num_cameras:
        raise InvalidParameterError("frame or camera index out of range")
    cam = fs.camera_in_key(frame, args.camera)
    res = render_depth_image(grid, cam, semantics=grid.num_classes > 0)
    stem = out / f"f{frame:03d}_c{args.camera:02d}"
    write_pfm(f"{stem}_depth.pfm", res["depth"])
    write_depth_png(f"{stem}_depth.png", res["depth"])
    write_pfm(f"{stem}_opacity.pfm", res["opacity"])
    if "semantics" in res:
        from .fusion import label_palette, load_prompt_table

        pal = label_palette(load_prompt_table(args.table))
        labels = np.argmax(res["semantics"], -1).astype(np.uint8)
        write_label_png(f"{stem}_semantic.png", labels, {k: v["rgb"] for k, v in pal.items()})
        write_json(f"{stem}_semantic_palette.json", {str(k): v for k, v in pal.items()})
    manifest.add_inputs([gpath])
    print(f"rendered {stem}_depth.pfm (mean opacity {res['opacity'].mean():.3f})")


def _emit(out: Path, name: str, report, text: str):
    write_json(out / f"{name}.json", report)
    (out / f"{name}.txt").write_text(text)
    print(text, end="")


def cmd_eval_depth(args, out: Path, manifest: RunManifest):
    from .metrics import depth_metrics

    pred, gt = read_pfm(args.pred), read_pfm(args.gt)
    mask = None
    if args.opacity:
        mask = read_pfm(args.opacity) >= args.min_opacity
        manifest.add_inputs([args.opacity])
    rep = depth_metrics(pred, gt, clip=(args.clip_min, args.clip_max), mask=mask)
    manifest.add_inputs([args.pred, args.gt])
    _emit(out, "depth_metrics", rep.to_dict(), rep.to_text())


def cmd_eval_occ(args, out: Path, manifest: RunManifest):
    from .fusion import load_prompt_table
    from .metrics import extract_occupancy, occupancy_metrics
    from .synth import SceneSpec, voxelize_occupancy

    grid, _, gpath = _load_checkpoint(args.checkpoint)
    scene = SceneSpec.from_dict(read_json(args.scene))
    occ, gt = voxelize_occupancy(scene, grid, mode=args.voxelize)
    names = load_prompt_table(args.table).names() if grid.num_classes else {0: "occupied"}
    reports, text = [], []
    for th in args.threshold:
        pocc, plab = extract_occupancy(grid, th)
        if grid.num_classes == 0:
            plab = np.where(pocc, 0, 255).astype(np.uint8)
            gt_eval = np.where(occ, 0, 255).astype(np.uint8)
        else:
            gt_eval = gt
        rep = occupancy_metrics(plab, gt_eval)
        reports.append({"threshold": th, **rep.to_dict()})
        text.append(f"threshold {th:g}\n" + rep.to_text(names))
    manifest.add_inputs([gpath, args.scene])
    _emit(out, "occupancy_metrics", reports if len(reports) > 1 else reports[0], "\n".join(text))


def cmd_fuse_labels(args, out: Path, manifest: RunManifest):
    from .fusion import fuse_labels, load_mask_set, load_prompt_table

    table = load_prompt_table(args.table)
    paths = list(args.manifest)
    for d in args.manifest_dir or []:
        paths += sorted(Path(d).glob("*.json"))
    if not paths:
        raise InvalidParameterError("no mask manifests given")
    for p in paths:
        ms = load_mask_set(p, table)
        labels = fuse_labels(ms, table)
        write_label_png(out / f"{ms.image_id}_label.png", labels)
        manifest.add_inputs([p])
    print(f"fused {len(paths)} label maps into {out}")


def cmd_gradcheck(args, out: Path, manifest: RunManifest):
    from importlib import resources

    from .contraction import ContractionParams
    from .grid import OccupancyGrid
    from .optimizer import check_renderer_gradients, gradient_check
    from .photometric import LossConfig
    from .synth import SceneSpec, synthesize

    cfg = _load_config(args.config, {})
    if args.fixture:
        scene_doc = read_json(args.fixture)
        manifest.add_inputs([args.fixture])
    else:
        scene_doc = json.loads(resources.files("occfield").joinpath("data/scenes/gradcheck.json").read_text())
    fs, _ = synthesize(SceneSpec.from_dict(scene_doc))
    g = cfg.get("grid", {})
    params = ContractionParams(g.get("alpha", 2 / 3), tuple(g.get("inside_min", (-5, -5, -1))),
                               tuple(g.get("inside_max", (5, 5, 3))))
    grid = OccupancyGrid.create(tuple(g.get("dims", (12, 12, 6))), params, 0, args.mode)
    rng = np.random.default_rng(args.seed or 0)
    grid.opacity_raw[:] = rng.normal(-1.0, 1.0, grid.dims)
    loss = LossConfig.from_dict(cfg["loss"]) if "loss" in cfg else LossConfig()
    rend = check_renderer_gradients(mode=args.mode, seed=args.seed or 0)
    full = gradient_check(grid, fs, loss=loss, num_params=args.params, h=args.h,
                          seed=args.seed or 0, tolerance=args.tolerance)
    report = {"renderer": rend.to_dict(), "photometric": full.to_dict(), "mode": args.mode}
    text = (f"renderer   max rel err {rend.max_rel_error:.3e} over {rend.checked} params "
            f"({'pass' if rend.passed else 'FAIL'})\n"
            f"photometric max rel err {full.max_rel_error:.3e} over {full.checked} params, "
            f"{full.skipped_kinks} kinks skipped ({'pass' if full.passed else 'FAIL'})\n")
    _emit(out, "gradcheck", report, text)
    if not (rend.passed and full.passed):
        raise NumericalError("gradient check failed")


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occfield", description="Fit contracted occupancy grids to posed images.")
    p.add_argument("--version", action="version", version=f"occfield {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        return sp

    sp = common(sub.add_parser("synth", help="render a scene spec to frames on disk"))
    sp.add_argument("--spec", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("fit", help="fit a grid to a frame directory"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(func=cmd_fit)

    sp = common(sub.add_parser("render", help="render depth/semantics from a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="frame directory providing rig and poses")
    sp.add_argument("--camera", type=int, default=0)
    sp.add_argument("--frame", type=int, default=None)
    sp.add_argument("--holdout", action="store_true", help="use the held-out rig")
    sp.add_argument("--table", default=None, help="prompt table for the semantic palette")
    sp.set_defaults(func=cmd_render)

    sp = common(sub.add_parser("eval-depth", help="depth metrics of a PFM prediction"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--clip-min", type=float, default=0.1)
    sp.add_argument("--clip-max", type=float, default=80.0)
    sp.add_argument("--opacity", default=None,
                    help="rendered opacity PFM; pixels below --min-opacity are excluded")
    sp.add_argument("--min-opacity", type=float, default=1e-3)
    sp.set_defaults(func=cmd_eval_depth)

    sp = common(sub.add_parser("eval-occ", help="occupancy metrics against the scene oracle"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--threshold", type=float, nargs="+", default=[0.5])
    sp.add_argument("--voxelize", choices=("shell", "solid"), default="shell")
    sp.add_argument("--table", default=None, help="prompt table for class names")
    sp.set_defaults(func=cmd_eval_occ)

    sp = common(sub.add_parser("fuse-labels", help="fuse detection masks into label maps"))
    sp.add_argument("--manifest", nargs="*", default=[])
    sp.add_argument("--manifest-dir", nargs="*", default=None)
    sp.add_argument("--table", default=None, help="prompt table JSON (bundled table if omitted)")
    sp.set_defaults(func=cmd_fuse_labels)

    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    sp.add_argument("--fixture", default=None, help="scene spec (bundled fixture if omitted)")
    sp.add_argument("--params", type=int, default=200)
    sp.add_argument("--h", type=float, default=1e-3)
    sp.add_argument("--tolerance", type=float, default=5e-3)
    sp.add_argument("--mode", choices=("weight", "density"), default="weight")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help / --version
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out / ".lock"), timeout=0):
            manifest = RunManifest(args.command, args)
            args.func(args, out, manifest)
            manifest.add_outputs(_files(out), root=out)
            manifest.write(out)
    except Timeout:
        print(f"error: {out} is in use by another occfield process", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigurationError, InvalidParameterError, OutOfDomainError, FileNotFoundError,
            KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, OSError, RuntimeError) as e:
        print(f"failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
