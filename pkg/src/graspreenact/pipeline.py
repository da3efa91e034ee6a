"""Scene files, end-to-end reenactment, synthetic data and evaluation.

A scene is a JSON document::

    {
      "format": "graspreenact.scene/1",
      "hand_model": "hand_model.json",      # or "toy:<seed>"
      "hand_params": {"theta": [...45], "beta": [...10], "c1": {...}, "c2": {...}},
      "object_mesh": "object.obj",
      "object_texture": "object.tex",
      "hand_texture": "hand.tex",
      "background": "background.png",
      "image": "image.png",                 # optional, composed on load if absent
      "image_size": [256, 256]
    }

File references are relative to the scene file.  Meshes live in the hand's
model space; ``c2`` maps model space to pixels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compositor import InpaintConfig, align_wrist, inpaint_background, merge
from .geometry import (Mesh, SimilarityTransform, load_obj, make_primitive, quat_from_axis_angle,
                       quat_to_matrix, save_obj)
from .grasp_net import (DirectOptConfig, GraspDataset, GraspNetParams, GraspSample, direct_grasp_opt,
                        grasp_forward)
from .hand_model import SHAPE_DIM, HandModel, HandParams, lbs_forward, load_hand_model, make_toy_hand, save_hand_model
from .losses import ContactSpec, centroid_loss, contact_loss
from .renderer import (FaceTexture, Mask, RasterImage, load_mask_png, load_png, load_texture, rasterize,
                       render_mask, save_mask_png, save_png, save_texture)

log = logging.getLogger(__name__)

__all__ = [
    "SCENE_FORMAT",
    "PipelineError",
    "Scene",
    "load_scene",
    "save_scene",
    "scene_meshes",
    "render_scene",
    "place_object",
    "palm_anchor",
    "ReenactConfig",
    "ReenactResult",
    "reenact",
    "write_result",
    "DatasetConfig",
    "generate_synthetic_dataset",
    "load_grasp_dataset",
    "mask_iou",
    "evaluate",
    "sha256_file",
]

SCENE_FORMAT = "graspreenact.scene/1"
MANIFEST_FORMAT = "graspreenact.manifest/1"
REPORT_FORMAT = "graspreenact.report/1"
RESULT_FORMAT = "graspreenact.result/1"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


class _stage:
    """Re-raise anything escaping the block as a PipelineError naming it."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, PipelineError):
            return False
        raise PipelineError(self.name, f"{exc_type.__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True, eq=False)
class Scene:
    model: HandModel
    params: HandParams
    object_mesh: Mesh
    object_texture: FaceTexture
    hand_texture: FaceTexture
    background: RasterImage
    image_size: tuple
    image: RasterImage | None = None
    path: Path | None = None

    def __post_init__(self):
        size = tuple(int(s) for s in self.image_size)
        object.__setattr__(self, "image_size", size)
        if self.object_texture.n_faces != self.object_mesh.n_faces:
            raise PipelineError("scene", "object texture face count does not match the object mesh")
        if self.hand_texture.n_faces != len(self.model.faces):
            raise PipelineError("scene", "hand texture face count does not match the hand model")
        if self.background.shape != size:
            raise PipelineError("scene", f"background is {self.background.shape}, scene is {size}")
        if self.image is not None and self.image.shape != size:
            raise PipelineError("scene", f"image is {self.image.shape}, scene is {size}")

    def hand_mesh(self) -> Mesh:
        return lbs_forward(self.model, self.params.theta, self.params.beta)

    def composed_image(self, threads: int = 1) -> RasterImage:
        if self.image is not None:
            return self.image
        fg = render_scene(self, threads)
        mask = render_mask(scene_meshes(self), self.params.c2, self.image_size, threads)
        return merge(fg, self.background, mask)


def _load_model(ref: str, base: Path) -> HandModel:
    if ref.startswith("toy:"):
        return make_toy_hand(int(ref[4:]))
    return load_hand_model(base / ref)


def load_scene(path) -> Scene:
    path = Path(path)
    with _stage("load_scene"):
        doc = json.loads(path.read_text())
        if doc.get("format") != SCENE_FORMAT:
            raise PipelineError("load_scene", f"{path}: unsupported scene format {doc.get('format')!r}")
        base = path.parent
        missing = [doc[k] for k in ("object_mesh", "object_texture", "hand_texture", "background")
                   if not (base / doc[k]).is_file()]
        if not doc["hand_model"].startswith("toy:") and not (base / doc["hand_model"]).is_file():
            missing.append(doc["hand_model"])
        if missing:
            raise PipelineError("load_scene", f"{path}: missing files {missing}")
        image = load_png(base / doc["image"]) if doc.get("image") else None
        return Scene(
            model=_load_model(doc["hand_model"], base),
            params=HandParams.from_dict(doc["hand_params"]),
            object_mesh=load_obj(base / doc["object_mesh"]),
            object_texture=load_texture(base / doc["object_texture"]),
            hand_texture=load_texture(base / doc["hand_texture"]),
            background=load_png(base / doc["background"]),
            image_size=tuple(doc["image_size"]),
            image=image,
            path=path,
        )


def save_scene(scene: Scene, directory, hand_model_ref: str | None = None, write_image: bool = True) -> Path:
    """Write ``scene.json`` and its referenced files into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if hand_model_ref is None:
        save_hand_model(scene.model, d / "hand_model.json")
        hand_model_ref = "hand_model.json"
    save_obj(scene.object_mesh, d / "object.obj")
    save_texture(scene.object_texture, d / "object.tex")
    save_texture(scene.hand_texture, d / "hand.tex")
    save_png(scene.background, d / "background.png")
    doc = {
        "format": SCENE_FORMAT,
        "hand_model": hand_model_ref,
        "hand_params": scene.params.to_dict(),
        "object_mesh": "object.obj",
        "object_texture": "object.tex",
        "hand_texture": "hand.tex",
        "background": "background.png",
        "image_size": list(scene.image_size),
    }
    if write_image:
        save_png(scene.composed_image(), d / "image.png")
        doc["image"] = "image.png"
    (d / "scene.json").write_text(json.dumps(doc, indent=2) + "\n")
    return d / "scene.json"


def scene_meshes(scene: Scene, hand: Mesh | None = None, obj: Mesh | None = None):
    return [(hand or scene.hand_mesh(), scene.hand_texture), (obj or scene.object_mesh, scene.object_texture)]


def render_scene(scene: Scene, threads: int = 1) -> RasterImage:
    return rasterize(scene_meshes(scene), scene.params.c2, scene.image_size, threads)


# ---------------------------------------------------------------------------
# object placement


def palm_anchor(model: HandModel, hand_vertices) -> np.ndarray:
    """Mean of the contact vertices that are not fingertips."""
    tips = set(model.fingertip_indices)
    idx = [i for i in model.contact_indices if i not in tips] or list(model.contact_indices)
    return np.asarray(hand_vertices, dtype=np.float64)[idx].mean(axis=0)


def place_object(model: HandModel, hand: Mesh, obj: Mesh) -> Mesh:
    """Rest the object on the palm: centroid over the anchor, lowest point at its height.

    Offsets below 1e-12 are treated as zero so an already placed object is
    returned untouched.
    """
    anchor = palm_anchor(model, hand.vertices)
    v = obj.vertices
    c = v.mean(axis=0)
    offset = np.array([anchor[0] - c[0], anchor[1] - c[1], anchor[2] - v[:, 2].min()])
    if np.linalg.norm(offset) < 1e-12:
        return obj
    return obj.translated(offset)


# ---------------------------------------------------------------------------
# reenactment


@dataclass(frozen=True)
class ReenactConfig:
    mode: str = "direct"
    direct: DirectOptConfig = field(default_factory=DirectOptConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("direct", "network"):
            raise PipelineError("config", f"mode must be 'direct' or 'network', got {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ReenactConfig":
        d = dict(d)
        if "direct" in d:
            opt = dict(d["direct"])
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            d["direct"] = DirectOptConfig(**opt)
        if "inpaint" in d:
            d["inpaint"] = InpaintConfig(**d["inpaint"])
        known = {"mode", "direct", "inpaint", "threads", "seed"}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(eq=False)
class ReenactResult:
    theta: np.ndarray  # theta'
    hand: Mesh  # posed and wrist-aligned hand
    object: Mesh  # placed and wrist-aligned source object
    x_prime: RasterImage  # render of the new hand-object pair
    s_target: Mask  # mask of the original target meshes
    x_target_inpainted: RasterImage
    s: Mask  # mask of the new meshes
    final: RasterImage
    metrics: dict


def _contact_metrics(model, spec, hand_vertices, obj_vertices) -> dict:
    contacts = np.asarray(hand_vertices)[list(spec.vertex_indices)]
    d = np.sqrt(((contacts[:, None, :] - obj_vertices[None, :, :]) ** 2).sum(-1)).min(axis=1)
    offset = np.asarray(obj_vertices).mean(0) - np.asarray(hand_vertices).mean(0)
    return {"contact_mean": float(d.mean()), "contact_max": float(d.max()),
            "centroid_offset": float(np.linalg.norm(offset))}


def reenact(source: Scene, target: Scene, config: ReenactConfig | None = None,
            weights: GraspNetParams | None = None) -> ReenactResult:
    """Give the target hand the source object and composite the result."""
    config = config or ReenactConfig()
    model = target.model
    spec = ContactSpec.for_model(model)
    theta_tar = np.asarray(target.params.theta)
    beta = np.asarray(target.params.beta)
    c2 = target.params.c2
    threads = config.threads

    with _stage("inputs"):
        if config.mode == "network" and weights is None:
            raise PipelineError("inputs", "network mode needs trained grasp weights (--weights)")
        target_hand = target.hand_mesh()
        obj = place_object(model, target_hand, source.object_mesh)
        initial_contact = float(contact_loss(target_hand.vertices, spec, obj.vertices).data)

    with _stage("grasp"):
        if config.mode == "network":
            theta = np.array(grasp_forward(weights, theta_tar, obj.vertices).data)
        else:
            theta = direct_grasp_opt(theta_tar, model, beta, obj.vertices, spec, config.direct).theta

    with _stage("pose"):
        hand = lbs_forward(model, theta, beta)
        final_contact = float(contact_loss(hand.vertices, spec, obj.vertices).data)

    with _stage("align_wrist"):
        hand, obj = align_wrist(model, target_hand, hand, obj)

    with _stage("render"):
        new_meshes = [(hand, target.hand_texture), (obj, source.object_texture)]
        x_prime = rasterize(new_meshes, c2, target.image_size, threads)
        # the refinement stage is bypassed: x'' = x'

    with _stage("inpaint"):
        s_tar = render_mask(scene_meshes(target, target_hand), c2, target.image_size, threads)
        x_tar = target.composed_image(threads)
        x_tar_bg = inpaint_background(x_tar, s_tar, config.inpaint)

    with _stage("mask"):
        s = render_mask(new_meshes, c2, target.image_size, threads)

    with _stage("merge"):
        final = merge(x_prime, x_tar_bg, s)

    metrics = {"initial_contact": initial_contact, "final_contact": final_contact,
               "centroid_loss": float(centroid_loss(obj.vertices, hand.vertices).data),
               **_contact_metrics(model, spec, hand.vertices, obj.vertices)}
    return ReenactResult(theta, hand, obj, x_prime, s_tar, x_tar_bg, s, final, metrics)


RESULT_FILES = {
    "x_prime": "x_prime.png",
    "s_target": "mask_target.png",
    "x_target_inpainted": "x_target_inpainted.png",
    "s": "mask.png",
    "final": "final.png",
    "theta": "theta.json",
    "hand": "hand.obj",
    "object": "object.obj",
}


def write_result(result: ReenactResult, out_dir, mode: str) -> Path:
    out = Path(out_dir)
    with _stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        save_png(result.x_prime, out / RESULT_FILES["x_prime"])
        save_mask_png(result.s_target, out / RESULT_FILES["s_target"])
        save_png(result.x_target_inpainted, out / RESULT_FILES["x_target_inpainted"])
        save_mask_png(result.s, out / RESULT_FILES["s"])
        save_png(result.final, out / RESULT_FILES["final"])
        save_obj(result.hand, out / RESULT_FILES["hand"])
        save_obj(result.object, out / RESULT_FILES["object"])
        (out / RESULT_FILES["theta"]).write_text(json.dumps(
            {"format": RESULT_FORMAT, "mode": mode, "theta": [float(v) for v in result.theta],
             "metrics": result.metrics}, indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 256
    pixels_per_unit: float = 100.0
    contact_threshold: float = 0.05
    max_attempts: int = 20
    hand_seed: int = 0
    theta_std: float = 0.1
    direct: DirectOptConfig = field(default_factory=DirectOptConfig)


def random_object(rng) -> Mesh:
    """A box, sphere or cylinder of hand-compatible size, randomly turned about z."""
    kind = rng.choice(["box", "sphere", "cylinder"])
    if kind == "sphere":
        mesh = make_primitive("sphere", 16, rng.uniform(0.3, 0.5))
    elif kind == "box":
        size = rng.uniform(0.4, 0.8, size=3)
        res = tuple(int(r) for r in np.maximum(2, np.round(size / 0.1)))
        mesh = make_primitive("box", res, size)
    else:
        radius, height = rng.uniform(0.22, 0.38), rng.uniform(0.8, 1.4)
        mesh = make_primitive("cylinder", 32, (radius, height))
        lay = quat_to_matrix(quat_from_axis_angle([0, 1, 0], np.pi / 2))
        mesh = mesh.with_vertices(mesh.vertices @ lay.T)
    spin = quat_to_matrix(quat_from_axis_angle([0, 0, 1], rng.uniform(-0.5, 0.5)))
    return mesh.with_vertices(mesh.vertices @ spin.T)


def random_camera(rng, image_size: int, pixels_per_unit: float) -> SimilarityTransform:
    """Palm-facing view: flip about x (fingers up, palm toward the viewer), small tilt."""
    flip = quat_from_axis_angle([1, 0, 0], np.pi)
    tilt = quat_from_axis_angle([0, 1, 0], rng.uniform(-0.2, 0.2))
    w1, v1 = tilt[0], tilt[1:]
    w2, v2 = flip[0], flip[1:]
    q = np.concatenate([[w1 * w2 - v1 @ v2], w1 * v2 + w2 * v1 + np.cross(v1, v2)])
    # grasping hands are fists around the palm, which spans y in [-0.5, 0.5]
    centre = np.array([image_size / 2, image_size / 2 + 0.2 * pixels_per_unit])
    return SimilarityTransform(pixels_per_unit, tuple(centre + rng.uniform(-8, 8, size=2)), tuple(q))


def _random_texture(rng, n_faces: int, base, spread: float) -> FaceTexture:
    values = np.asarray(base) + rng.uniform(-spread, spread, size=(n_faces, 2, 2, 2, 3))
    return FaceTexture(values)


def make_synthetic_scene(rng, model: HandModel, config: DatasetConfig, spec: ContactSpec):
    """One scene whose hand grasps a random primitive; returns (scene, theta_init, contact)."""
    for _ in range(config.max_attempts):
        theta_init = rng.normal(0.0, config.theta_std, size=45)
        rest = lbs_forward(model, theta_init)
        # placed exactly as reenactment would, so self-reenactment is an identity
        obj = place_object(model, rest, random_object(rng))
        res = direct_grasp_opt(theta_init, model, None, obj.vertices, spec, config.direct)
        if res.contact < config.contact_threshold:
            break
    else:
        raise PipelineError("gen-data", f"no grasp under {config.contact_threshold} after "
                                        f"{config.max_attempts} attempts")
    size = config.image_size
    c2 = random_camera(rng, size, config.pixels_per_unit)
    skin = np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.08, 0.08, size=3)
    scene = Scene(
        model=model,
        params=HandParams(res.theta, np.zeros(SHAPE_DIM), c2=c2),
        object_mesh=obj,
        object_texture=_random_texture(rng, obj.n_faces, rng.uniform(0.1, 0.9, size=3), 0.1),
        hand_texture=_random_texture(rng, len(model.faces), skin, 0.05),
        background=RasterImage(np.broadcast_to(rng.uniform(0.0, 1.0, size=3), (size, size, 3))),
        image_size=(size, size),
    )
    return scene, theta_init, res.contact


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_synthetic_dataset(n_scenes: int, seed: int, output_dir,
                               config: DatasetConfig | None = None) -> dict:
    """Write ``n_scenes`` scenes plus ``manifest.json``; returns the manifest."""
    config = config or DatasetConfig()
    if n_scenes < 1:
        raise PipelineError("gen-data", "n_scenes must be at least 1")
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PipelineError("gen-data", f"cannot write to {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    model = make_toy_hand(config.hand_seed)
    spec = ContactSpec.for_model(model)
    save_hand_model(model, out / "hand_model.json")
    scenes = []
    for i in range(n_scenes):
        with _stage("gen-data"):
            scene, theta_init, contact = make_synthetic_scene(rng, model, config, spec)
            name = f"scene_{i:04d}"
            save_scene(scene, out / name, hand_model_ref="../hand_model.json")
            (out / name / "grasp.json").write_text(json.dumps(
                {"theta_init": [float(v) for v in theta_init],
                 "theta_gt": list(scene.params.theta), "contact": contact}, indent=2) + "\n")
            scenes.append({"name": name, "scene": f"{name}/scene.json", "contact": contact})
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": int(seed),
        "n_scenes": n_scenes,
        "contact_threshold": config.contact_threshold,
        "scenes": scenes,
        "files": [{"path": str(p.relative_to(out)), "sha256": sha256_file(p)} for p in files],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_grasp_dataset(manifest_path) -> GraspDataset:
    """Training pairs from a generated dataset.

    Sample ``i`` pairs the pose of scene ``i`` with the object of scene
    ``i + 1`` placed on its palm; the grasp poses of all scenes form the real
    distribution for the critic.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise PipelineError("dataset", f"{manifest_path}: not a dataset manifest")
    scenes = [load_scene(manifest_path.parent / s["scene"]) for s in manifest["scenes"]]
    model = scenes[0].model
    samples, real = [], []
    for i, scene in enumerate(scenes):
        other = scenes[(i + 1) % len(scenes)]
        obj = place_object(model, scene.hand_mesh(), other.object_mesh)
        samples.append(GraspSample(np.asarray(scene.params.theta), obj.vertices, np.asarray(scene.params.beta)))
        real.append(scene.params.theta)
    return GraspDataset(model, samples, np.asarray(real))


# ---------------------------------------------------------------------------
# evaluation


def mask_iou(a, b) -> float:
    a = np.asarray(getattr(a, "values", a)).astype(bool)
    b = np.asarray(getattr(b, "values", b)).astype(bool)
    if a.shape != b.shape:
        raise PipelineError("eval", "masks differ in size")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def evaluate(result_dir, reference: Scene, threads: int = 1) -> dict:
    """Check a reenactment output directory against the target scene."""
    d = Path(result_dir)
    missing = [name for name in RESULT_FILES.values() if not (d / name).is_file()]
    if missing:
        raise PipelineError("eval", f"missing artifacts in {d}: {missing}")
    with _stage("eval"):
        model = reference.model
        spec = ContactSpec.for_model(model)
        hand = load_obj(d / RESULT_FILES["hand"])
        obj = load_obj(d / RESULT_FILES["object"])
        s = load_mask_png(d / RESULT_FILES["s"])
        recomputed = render_mask([hand, obj], reference.params.c2, reference.image_size, threads)
        final = load_png(d / RESULT_FILES["final"]).rgb
        background = load_png(d / RESULT_FILES["x_target_inpainted"]).rgb
        outside = ~s.values.astype(bool)
        bg_err = float(np.abs(final - background)[outside].max()) if outside.any() else 0.0
        report = {
            "format": REPORT_FORMAT,
            **_contact_metrics(model, spec, hand.vertices, obj.vertices),
            "mask_iou": mask_iou(s, recomputed),
            "background_error": bg_err,
        }
    return report
