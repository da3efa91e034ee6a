"""Grasp manipulation network with object-conditioned pose normalisation.

The network maps a target hand pose (45 axis-angle values) and a source
object mesh to a new pose that grasps the object.  The object enters only
through the ``cog_norm`` layer, which standardises the pose features and
re-scales/shifts them with two small FC subnets of an object descriptor.

Training alternates a WGAN-GP critic over poses with generator updates on
contact + centroid + critic terms.  :func:`direct_grasp_opt` solves the same
contact problem per instance by gradient descent on the pose and serves as
the reference grasp oracle.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .hand_model import POSE_DIM, HandModel, pose_vertices
from .losses import ContactSpec, centroid_loss, contact_loss, critic_forward, gradient_penalty

log = logging.getLogger(__name__)

__all__ = [
    "GraspNetConfig",
    "GraspNetParams",
    "DiscriminatorParams",
    "TrainConfig",
    "GraspSample",
    "GraspDataset",
    "TrainResult",
    "TrainingError",
    "DirectOptConfig",
    "DirectOptResult",
    "DivergenceError",
    "baseline_config",
    "init_grasp_net",
    "init_critic",
    "object_descriptor",
    "cog_norm",
    "grasp_forward",
    "grasp_forward_batch",
    "train_critic_step",
    "train_grasp",
    "direct_grasp_opt",
    "grasp_objective",
    "save_weights",
    "load_weights",
]

WEIGHTS_FORMAT = "graspreenact.weights/1"

# Balancing constants of the joint reconstruction objective (hand 1, texture
# 0.01, refinement 0.1).  That stage trains image networks that are not part
# of this package; the values are kept for reference only.
RECONSTRUCTION_LOSS_WEIGHTS = {"object": 1.0, "texture": 0.01, "refinement": 0.1}


class TrainingError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, msg, last_theta):
        super().__init__(msg)
        self.last_theta = last_theta


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class GraspNetConfig:
    """Architecture of the grasp network.

    With ``use_cog_norm`` the pose path is
    ``FC(45->45) -> COG-Norm -> tanh -> FC(45->hidden) -> tanh ->
    FC(hidden->hidden) -> tanh -> FC(hidden->45)`` and the scale/shift
    subnets are ``descriptor -> FC(cond_hidden) -> tanh -> FC(45)``.
    Without it (the MLP-only baseline) the two subnets become plain feature
    stacks whose outputs are concatenated with the pose features.
    """

    pose_dim: int = POSE_DIM
    descriptor_dim: int = 64
    cond_hidden: int = 128
    hidden: int = 640
    use_cog_norm: bool = True
    eps: float = 1e-6


def baseline_config() -> GraspNetConfig:
    return GraspNetConfig(hidden=880, use_cog_norm=False)


def _layer_shapes(cfg: GraspNetConfig) -> dict[str, tuple]:
    P, D, C, H = cfg.pose_dim, cfg.descriptor_dim, cfg.cond_hidden, cfg.hidden
    shapes = {"desc.W": (3, D), "desc.b": (D,), "fc_in.W": (P, P), "fc_in.b": (P,)}
    cond = ("gamma", "alpha") if cfg.use_cog_norm else ("cond_a", "cond_b")
    for name in cond:
        shapes.update({f"{name}.0.W": (D, C), f"{name}.0.b": (C,),
                       f"{name}.1.W": (C, P), f"{name}.1.b": (P,)})
    trunk_in = P if cfg.use_cog_norm else 3 * P
    shapes.update({"fc1.W": (trunk_in, H), "fc1.b": (H,), "fc2.W": (H, H), "fc2.b": (H,),
                   "out.W": (H, P), "out.b": (P,)})
    return shapes


@dataclass
class GraspNetParams:
    config: GraspNetConfig
    arrays: dict[str, np.ndarray]

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def copy(self) -> "GraspNetParams":
        return GraspNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class DiscriminatorParams:
    layers: list  # (W, b) pairs, tanh between, last one linear to a scalar

    def count(self) -> int:
        return int(sum(W.size + b.size for W, b in self.layers))

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"critic.{i}.W"], out[f"critic.{i}.b"] = W, b
        return out

    @classmethod
    def from_dict(cls, arrays: dict) -> "DiscriminatorParams":
        n = len([k for k in arrays if k.endswith(".W")])
        return cls([(np.asarray(arrays[f"critic.{i}.W"]), np.asarray(arrays[f"critic.{i}.b"]))
                    for i in range(n)])

    def tensor_layers(self, requires_grad: bool = False):
        return [(Tensor(W, requires_grad), Tensor(b, requires_grad)) for W, b in self.layers]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_grasp_net(config: GraspNetConfig | None = None, seed: int = 0) -> GraspNetParams:
    config = config or GraspNetConfig()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _layer_shapes(config).items():
        fan_in = shape[0] if name.endswith(".W") else _layer_shapes(config)[name[:-1] + "W"][0]
        arrays[name] = _uniform(rng, fan_in, shape)
    if config.use_cog_norm:
        arrays["gamma.1.b"] = np.ones(config.pose_dim)  # start as plain standardisation
        arrays["alpha.1.b"] = np.zeros(config.pose_dim)
    return GraspNetParams(config, arrays)


def init_critic(hidden=(128, 128), seed: int = 0, pose_dim: int = POSE_DIM) -> DiscriminatorParams:
    rng = np.random.default_rng(seed)
    dims = [pose_dim, *hidden, 1]
    return DiscriminatorParams([(_uniform(rng, a, (a, b)), _uniform(rng, a, (b,)))
                                for a, b in zip(dims[:-1], dims[1:])])


# ---------------------------------------------------------------------------
# forward pass


def object_descriptor(object_vertices, params) -> Tensor:
    """Centre the vertices, map each with a shared affine layer, max-pool.

    Both steps are independent of vertex order, bit for bit.
    """
    v = ad.as_tensor(getattr(object_vertices, "vertices", object_vertices))
    if v.shape[0] == 0:
        raise ValueError("descriptor of an empty mesh")
    centred = v - ad.mean(v, axis=0, keepdims=True, exact=True)  # order-independent centroid
    feats = centred @ params["desc.W"] + params["desc.b"]
    return ad.tmax(feats, axis=0)


def _mlp2(x, params, name):
    h = ad.tanh(x @ params[f"{name}.0.W"] + params[f"{name}.0.b"])
    return h @ params[f"{name}.1.W"] + params[f"{name}.1.b"]


def cog_norm(theta, descriptor, params, eps: float = 1e-6) -> Tensor:
    """Standardise ``theta`` over its own elements, then scale/shift by the object.

    Per element: ``gamma(d)_i * (theta_i - mean) / std + alpha(d)_i`` with the
    population std.  When the std is below ``eps`` the standardised term is
    taken as zero, so a constant input returns ``alpha(d)`` exactly.
    """
    x = ad.as_tensor(theta)
    mu = ad.mean(x, axis=-1, keepdims=True)
    centred = x - mu
    var = ad.mean(ad.square(centred), axis=-1, keepdims=True)
    live = (np.sqrt(var.data) >= eps).astype(np.float64)
    sigma = ad.sqrt(var * live + (1.0 - live))
    z = centred / sigma * live
    gamma = _mlp2(descriptor, params, "gamma")
    alpha = _mlp2(descriptor, params, "alpha")
    return gamma * z + alpha


def _forward(params: dict, config: GraspNetConfig, theta, desc) -> Tensor:
    x = ad.as_tensor(theta) @ params["fc_in.W"] + params["fc_in.b"]
    if config.use_cog_norm:
        h = ad.tanh(cog_norm(x, desc, params, config.eps))
    else:
        a = _mlp2(desc, params, "cond_a")
        b = _mlp2(desc, params, "cond_b")
        lead = x.shape[:-1]
        h = ad.concat([x, a + np.zeros(lead + (config.pose_dim,)),
                       b + np.zeros(lead + (config.pose_dim,))], axis=-1)
    h = ad.tanh(h @ params["fc1.W"] + params["fc1.b"])
    h = ad.tanh(h @ params["fc2.W"] + params["fc2.b"])
    return h @ params["out.W"] + params["out.b"]


def _param_view(params):
    if isinstance(params, GraspNetParams):
        return params.config, params.tensors()
    config, tensors = params
    return config, tensors


def grasp_forward(params, theta_tar, object_mesh) -> Tensor:
    """New pose for one target pose and one source object.

    ``params`` is a :class:`GraspNetParams` or ``(config, dict of Tensors)``
    when gradients w.r.t. the weights are wanted.
    """
    config, p = _param_view(params)
    theta = ad.as_tensor(theta_tar)
    if theta.shape != (config.pose_dim,):
        raise ValueError(f"theta must have shape ({config.pose_dim},), got {theta.shape}")
    desc = object_descriptor(object_mesh, p)
    return _forward(p, config, theta, desc)


def grasp_forward_batch(params, thetas, objects) -> Tensor:
    config, p = _param_view(params)
    thetas = ad.as_tensor(thetas)
    if thetas.ndim != 2 or thetas.shape[1] != config.pose_dim:
        raise ValueError(f"thetas must be (B, {config.pose_dim})")
    desc = ad.stack([object_descriptor(o, p) for o in objects])
    return _forward(p, config, thetas, desc)


# ---------------------------------------------------------------------------
# objectives


def grasp_objective(model: HandModel, theta, object_vertices, spec: ContactSpec, beta=None):
    """(contact, centroid) losses of the hand posed by ``theta``."""
    verts = pose_vertices(model, theta, beta)
    return (contact_loss(verts, spec, object_vertices),
            centroid_loss(object_vertices, verts))


@dataclass(frozen=True)
class DirectOptConfig:
    iterations: int = 200
    lr: float = 0.05
    betas: tuple = (0.9, 0.999)
    divergence_limit: float = 1e6


@dataclass
class DirectOptResult:
    theta: np.ndarray
    loss: float
    initial_loss: float
    initial_contact: float
    contact: float
    history: list


def direct_grasp_opt(theta_init, model: HandModel, beta, object_vertices, spec: ContactSpec,
                     config: DirectOptConfig | None = None) -> DirectOptResult:
    """Adam on contact + centroid loss over the pose; returns the best iterate.

    The loss history records the loss evaluated at each iterate, so the
    best-so-far sequence is non-increasing by construction.
    """
    config = config or DirectOptConfig()
    obj = np.asarray(getattr(object_vertices, "vertices", object_vertices))
    theta = np.array(theta_init, dtype=np.float64)
    opt = Adam(config.lr, config.betas)
    best_theta, best_loss, best_contact = theta.copy(), math.inf, math.inf
    history = []
    initial = None
    for it in range(config.iterations + 1):
        leaf = Tensor(theta, requires_grad=True)
        c, m = grasp_objective(model, leaf, obj, spec, beta)
        total = c + m
        value = float(total.data)
        if initial is None:
            initial = (value, float(c.data))
        if value > config.divergence_limit:
            raise DivergenceError(f"grasp optimisation diverged at iteration {it} (loss {value:.3g})",
                                  best_theta)
        history.append(value)
        if value < best_loss:
            best_theta, best_loss, best_contact = theta.copy(), value, float(c.data)
        if it == config.iterations:
            break
        g = ad.backward(total)[leaf.id]
        theta = opt.step({"theta": theta}, {"theta": g})["theta"]
    return DirectOptResult(best_theta, best_loss, initial[0], initial[1], best_contact, history)


# ---------------------------------------------------------------------------
# training


@dataclass
class GraspSample:
    theta_tar: np.ndarray  # pose of the target hand
    object_vertices: np.ndarray  # source object, placed in the target hand frame
    beta: np.ndarray | None = None


@dataclass
class GraspDataset:
    model: HandModel
    samples: list
    real_thetas: np.ndarray  # (N, 45) poses drawn from the realistic grasp set
    spec: ContactSpec | None = None

    def contact_spec(self) -> ContactSpec:
        return self.spec or ContactSpec.for_model(self.model)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-5
    critic_lr: float = 1e-5
    betas: tuple = (0.5, 0.999)
    batch_size: int = 1
    n_critic: int = 5
    gp_lambda: float = 10.0
    adv_weight: float = 1.0
    critic_hidden: tuple = (128, 128)
    seed: int = 0
    net: GraspNetConfig = field(default_factory=GraspNetConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "net" in d:
            d["net"] = GraspNetConfig(**d["net"])
        for key in ("betas", "critic_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: GraspNetParams
    critic: DiscriminatorParams
    history: list  # one dict of mean loss terms per epoch


def _checked(term: str, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in loss term '{term}': {exc}") from None


def train_critic_step(critic: DiscriminatorParams, opt: Adam, real, fake, lam: float):
    """One critic update: minimise E[D(fake)] - E[D(real)] + penalty at ``fake``.

    Returns the new critic and (loss, penalty) before the update.
    """
    layers = critic.tensor_layers(requires_grad=True)
    wass = _checked("critic", lambda: ad.mean(critic_forward(layers, fake))
                    - ad.mean(critic_forward(layers, real)))
    gp = _checked("gradient_penalty", lambda: gradient_penalty(layers, fake, lam))
    loss = wass + gp
    gmap = ad.backward(loss)
    grads = {}
    for i, (W, b) in enumerate(layers):
        grads[f"critic.{i}.W"] = gmap.get(W.id, np.zeros(W.shape))
        grads[f"critic.{i}.b"] = gmap.get(b.id, np.zeros(b.shape))
    new = opt.step(critic.as_dict(), grads)
    return DiscriminatorParams.from_dict(new), float(loss.data), float(gp.data)


def train_grasp(dataset: GraspDataset, config: TrainConfig | None = None,
                init: GraspNetParams | None = None) -> TrainResult:
    """Alternate critic and generator updates for ``config.epochs`` epochs."""
    config = config or TrainConfig()
    if not dataset.samples:
        raise TrainingError("empty dataset")
    for i, s in enumerate(dataset.samples):
        if not (np.isfinite(s.theta_tar).all() and np.isfinite(s.object_vertices).all()):
            raise TrainingError(f"sample {i} holds non-finite pose or object values")
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_grasp_net(config.net, seed=config.seed)
    critic = init_critic(config.critic_hidden, seed=config.seed + 1, pose_dim=config.net.pose_dim)
    g_opt = Adam(config.lr, config.betas)
    d_opt = Adam(config.critic_lr, config.betas)
    spec = dataset.contact_spec()
    model = dataset.model
    real = np.asarray(dataset.real_thetas, dtype=np.float64)
    history = []
    n = len(dataset.samples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {"contact": 0.0, "centroid": 0.0, "adversarial": 0.0, "critic": 0.0, "penalty": 0.0}
        steps = 0
        for start in range(0, n, config.batch_size):
            batch = [dataset.samples[i] for i in order[start:start + config.batch_size]]
            thetas = np.stack([s.theta_tar for s in batch])
            objects = [s.object_vertices for s in batch]

            fake = grasp_forward_batch(params, thetas, objects).data
            for _ in range(config.n_critic):
                pick = rng.integers(0, len(real), size=len(batch))
                critic, d_loss, gp = train_critic_step(critic, d_opt, Tensor(real[pick]),
                                                       Tensor(fake), config.gp_lambda)

            p = params.tensors(requires_grad=True)
            out = grasp_forward_batch((params.config, p), thetas, objects)
            contact_terms, cent_terms = [], []
            for b, sample in enumerate(batch):
                c, m = _checked("contact/centroid", lambda: grasp_objective(
                    model, out[b], sample.object_vertices, spec, sample.beta))
                contact_terms.append(c)
                cent_terms.append(m)
            contact = ad.mean(ad.stack(contact_terms))
            cent = ad.mean(ad.stack(cent_terms))
            adv = _checked("adversarial", lambda: -ad.mean(critic_forward(critic.layers, out)))
            loss = contact + cent + config.adv_weight * adv
            gmap = ad.backward(loss)
            grads = {k: gmap.get(t.id, np.zeros(t.shape)) for k, t in p.items()}
            params = GraspNetParams(params.config, g_opt.step(params.arrays, grads))

            sums["contact"] += float(contact.data)
            sums["centroid"] += float(cent.data)
            sums["adversarial"] += float(adv.data)
            sums["critic"] += d_loss
            sums["penalty"] += gp
            steps += 1
        record = {k: v / steps for k, v in sums.items()}
        record["epoch"] = epoch
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
    return TrainResult(params, critic, history)


# ---------------------------------------------------------------------------
# weight files


def save_weights(path, params: GraspNetParams, critic: DiscriminatorParams | None = None) -> None:
    arrays = dict(params.arrays)
    if critic is not None:
        arrays.update(critic.as_dict())
    doc = {
        "format": WEIGHTS_FORMAT,
        "config": asdict(params.config),
        "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_weights(path) -> tuple[GraspNetParams, DiscriminatorParams | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: unsupported weight file format {doc.get('format')!r}")
    config = GraspNetConfig(**doc["config"])
    arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["arrays"].items()}
    net = {k: v for k, v in arrays.items() if not k.startswith("critic.")}
    expected = _layer_shapes(config)
    if set(net) != set(expected) or any(net[k].shape != s for k, s in expected.items()):
        raise ValueError(f"{path}: weights do not match the declared architecture")
    crit = {k: v for k, v in arrays.items() if k.startswith("critic.")}
    critic = DiscriminatorParams.from_dict(crit) if crit else None
    return GraspNetParams(config, {k: net[k] for k in expected}), critic
