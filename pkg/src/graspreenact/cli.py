"""Command-line entry point.

Every command accepts ``--config <json>``; explicit flags override config
keys.  Results are summarised as JSON on stdout.  Failures exit with status 1
and a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .grasp_net import DirectOptConfig, TrainConfig, load_weights, save_weights, train_grasp
from .pipeline import (DatasetConfig, PipelineError, ReenactConfig, evaluate, generate_synthetic_dataset,
                       load_grasp_dataset, load_scene, reenact, scene_meshes, write_result)
from .renderer import (TextureFitConfig, fit_texture, render_mask, save_mask_png, save_png, save_texture)

log = logging.getLogger("graspreenact")


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    cfg["_base"] = str(Path(path).parent)
    return cfg


def _path(cfg: dict, key: str, flag):
    """Flag value, else config value resolved against the config file's folder."""
    if flag is not None:
        return Path(flag)
    if key not in cfg:
        raise ValueError(f"missing required setting '{key}' (flag or config key)")
    return Path(cfg.get("_base", ".")) / cfg[key]


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2))


def cmd_reenact(args, cfg) -> dict:
    source = load_scene(_path(cfg, "source", args.source))
    target = load_scene(_path(cfg, "target", args.target))
    rc = dict(cfg.get("reenact", {}))
    rc["mode"] = _pick(args.mode, cfg, "mode", rc.get("mode", "direct"))
    rc["threads"] = _pick(args.threads, cfg, "threads", rc.get("threads", 1))
    rc["seed"] = _pick(args.seed, cfg, "seed", rc.get("seed", 0))
    config = ReenactConfig.from_dict(rc)
    weights = None
    if config.mode == "network":
        wpath = args.weights or (cfg.get("weights") and _path(cfg, "weights", None))
        if not wpath:
            raise PipelineError("inputs", "network mode needs trained grasp weights (--weights)")
        weights, _ = load_weights(wpath)
    result = reenact(source, target, config, weights)
    out = write_result(result, _path(cfg, "out", args.out), config.mode)
    return {"out": str(out), "mode": config.mode, "metrics": result.metrics}


def cmd_train(args, cfg) -> dict:
    dataset = load_grasp_dataset(_path(cfg, "dataset", args.dataset))
    tc = dict(cfg.get("train", {}))
    if args.seed is not None:
        tc["seed"] = args.seed
    config = TrainConfig.from_dict(tc)
    result = train_grasp(dataset, config)
    out = _path(cfg, "out", args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(out / "weights.json", result.params, result.critic)
    (out / "history.json").write_text(json.dumps(
        {"config": config.to_dict(), "history": result.history}, indent=2) + "\n")
    return {"out": str(out), "parameters": result.params.count(),
            "final_epoch": result.history[-1] if result.history else None}


def cmd_fit_texture(args, cfg) -> dict:
    scene = load_scene(_path(cfg, "scene", args.scene))
    fc = dict(cfg.get("fit", {}))
    if args.seed is not None:
        fc["seed"] = args.seed
    config = TextureFitConfig(**fc)
    threads = _pick(args.threads, cfg, "threads", 1)
    meshes = [m for m, _ in scene_meshes(scene)]
    c2 = scene.params.c2
    mask = render_mask(meshes, c2, scene.image_size, threads)
    result = fit_texture(meshes, c2, scene.composed_image(threads), mask, config, threads)
    out = _path(cfg, "out", args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_texture(result.textures[0], out / "hand.tex")
    save_texture(result.textures[1], out / "object.tex")
    report = {"loss": result.loss, "steps": len(result.history), "warnings": result.warnings}
    (out / "fit.json").write_text(json.dumps(report, indent=2) + "\n")
    return {"out": str(out), **report}


def cmd_gen_data(args, cfg) -> dict:
    dc = dict(cfg.get("dataset", {}))
    if "direct" in dc:
        dc["direct"] = DirectOptConfig(**dc["direct"])
    config = DatasetConfig(**dc)
    n = _pick(args.n_scenes, cfg, "n_scenes", 50)
    seed = _pick(args.seed, cfg, "seed", 0)
    out = _path(cfg, "out", args.out)
    manifest = generate_synthetic_dataset(int(n), int(seed), out, config)
    return {"out": str(out), "n_scenes": manifest["n_scenes"], "files": len(manifest["files"])}


def cmd_eval(args, cfg) -> dict:
    reference = load_scene(_path(cfg, "reference", args.reference))
    threads = _pick(args.threads, cfg, "threads", 1)
    report = evaluate(_path(cfg, "result", args.result), reference, threads)
    if args.out is not None or "out" in cfg:
        out = _path(cfg, "out", args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_render(args, cfg) -> dict:
    scene = load_scene(_path(cfg, "scene", args.scene))
    threads = _pick(args.threads, cfg, "threads", 1)
    from .renderer import rasterize

    meshes = scene_meshes(scene)
    img = rasterize(meshes, scene.params.c2, scene.image_size, threads)
    mask = render_mask(meshes, scene.params.c2, scene.image_size, threads)
    out = _path(cfg, "out", args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(img, out / "render.png")
    save_mask_png(mask, out / "mask.png")
    save_png(scene.composed_image(threads), out / "image.png")
    return {"out": str(out), "foreground_pixels": mask.count()}


COMMANDS = {
    "reenact": cmd_reenact,
    "train-grasp": cmd_train,
    "fit-texture": cmd_fit_texture,
    "gen-data": cmd_gen_data,
    "eval": cmd_eval,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graspreenact", description="Hand-object grasp reenactment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, mode=False, weights=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", help="output directory (or report path for eval)")
        p.add_argument("--threads", type=int, help="rasterizer threads")
        if mode:
            p.add_argument("--mode", choices=("network", "direct"))
        if weights:
            p.add_argument("--weights", help="grasp network weight file")
        return p

    p = common(sub.add_parser("reenact", help="give the target hand the source object"), mode=True, weights=True)
    p.add_argument("--source", help="source scene JSON")
    p.add_argument("--target", help="target scene JSON")
    p = common(sub.add_parser("train-grasp", help="train the grasp network on a generated dataset"))
    p.add_argument("--dataset", help="dataset manifest.json")
    p = common(sub.add_parser("fit-texture", help="fit face textures to a scene image"))
    p.add_argument("--scene", help="scene JSON")
    p = common(sub.add_parser("gen-data", help="generate synthetic grasp scenes"))
    p.add_argument("--n-scenes", type=int, help="number of scenes (default 50)")
    p = common(sub.add_parser("eval", help="score a reenactment output directory"))
    p.add_argument("--result", help="reenact output directory")
    p.add_argument("--reference", help="target scene JSON")
    p = common(sub.add_parser("render", help="render a scene"))
    p.add_argument("--scene", help="scene JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        _emit(COMMANDS[args.command](args, cfg))
    except Exception as exc:  # reported as JSON, not a traceback
        err = {"error": {"command": args.command, "type": type(exc).__name__,
                         "stage": getattr(exc, "stage", None),
                         "message": getattr(exc, "message", str(exc))}}
        print(json.dumps(err), file=sys.stderr)
        log.debug("failure", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
