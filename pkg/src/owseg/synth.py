"""Deterministic synthetic scenes with known ground truth.

Randomness comes from numpy's Philox counter-based bit generator seeded
with ``SceneSpec.seed``; the draw order inside :func:`generate` is fixed,
so a SceneSpec always produces bit-identical arrays on a given numpy release.

Class ids: known classes are ``1..K``, unknown classes ``K+1..K+U``.
Every pixel not covered by a region takes the ``background`` class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import canonicalize_instances
from .descriptors import DescriptorBank
from .errors import OverlappingRegions, OWSegError
from .io import ClassInfo

IGNORE_LABEL = 65535


@dataclass(frozen=True)
class ClassSpec:
    mean: tuple
    var: tuple  # per-dimension variance
    thing: bool = True


@dataclass(frozen=True)
class Region:
    cls: int
    shape: str  # "rect": (h0, w0, h1, w1) half-open; "disk": (ch, cw, radius)
    params: tuple

    def mask(self, height: int, width: int) -> np.ndarray:
        hh, ww = np.indices((height, width))
        if self.shape == "rect":
            h0, w0, h1, w1 = self.params
            return (hh >= h0) & (hh < h1) & (ww >= w0) & (ww < w1)
        if self.shape == "disk":
            ch, cw, r = self.params
            return (hh - ch) ** 2 + (ww - cw) ** 2 <= r**2
        raise OWSegError(f"unknown region shape {self.shape!r}")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    dim: int
    known: tuple
    unknown: tuple = ()
    regions: tuple = ()
    background: int = 1
    offset_noise: float = 0.0
    con_known_noise: float = 0.05
    con_unknown_norm: float = 0.3

    @property
    def num_known(self) -> int:
        return len(self.known)

    @property
    def known_ids(self) -> list[int]:
        return list(range(1, self.num_known + 1))

    @property
    def unknown_ids(self) -> list[int]:
        return list(range(self.num_known + 1, self.num_known + len(self.unknown) + 1))

    def class_spec(self, cid: int) -> ClassSpec:
        classes = list(self.known) + list(self.unknown)
        if not 1 <= cid <= len(classes):
            raise OWSegError(f"class id {cid} not defined")
        return classes[cid - 1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["known"] = tuple(ClassSpec(tuple(c["mean"]), tuple(c["var"]), c.get("thing", True))
                           for c in d["known"])
        d["unknown"] = tuple(ClassSpec(tuple(c["mean"]), tuple(c["var"]), c.get("thing", True))
                             for c in d.get("unknown", ()))
        d["regions"] = tuple(Region(int(r["cls"]), r["shape"], tuple(r["params"]))
                             for r in d.get("regions", ()))
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    semantic: np.ndarray
    instance: np.ndarray
    sem_features: np.ndarray
    con_features: np.ndarray
    offsets: np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def separated_means(rng: np.random.Generator, n: int, dim: int, separation: float) -> np.ndarray:
    """``n`` points in R^dim with pairwise distance >= ``separation``."""
    side = separation * max(2.0, n ** (1.0 / dim)) * 2.0
    out = []
    while len(out) < n:
        cand = rng.uniform(-side, side, size=dim)
        if all(np.linalg.norm(cand - m) >= separation for m in out):
            out.append(cand)
    return np.array(out)


def _layout(spec: SceneSpec):
    H, W = spec.height, spec.width
    sem = np.full((H, W), spec.background, dtype=np.int64)
    inst = np.zeros((H, W), dtype=np.int64)
    covered = np.zeros((H, W), dtype=bool)
    for j, region in enumerate(spec.regions, start=1):
        m = region.mask(H, W)
        if (m & covered).any():
            raise OverlappingRegions(f"region {j} overlaps an earlier region")
        covered |= m
        sem[m] = region.cls
        if spec.class_spec(region.cls).thing:
            inst[m] = j
    return sem, np.asarray(canonicalize_instances(inst))


def generate(spec: SceneSpec) -> Scene:
    """Render ground truth masks and decoder-like outputs for one scene."""
    rng = make_rng(spec.seed)
    sem, inst = _layout(spec)
    H, W, D = spec.height, spec.width, spec.dim
    n_classes = spec.num_known + len(spec.unknown)
    means = np.zeros((n_classes + 1, D))
    stds = np.zeros((n_classes + 1, D))
    for cid in range(1, n_classes + 1):
        c = spec.class_spec(cid)
        if len(c.mean) != D or len(c.var) != D:
            raise OWSegError(f"class {cid} parameters do not match dim {D}")
        means[cid] = c.mean
        stds[cid] = np.sqrt(c.var)

    directions = rng.standard_normal((n_classes + 1, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    z_sem = rng.standard_normal((H, W, D))
    sem_features = means[sem] + stds[sem] * z_sem

    known = sem <= spec.num_known
    z_dir = rng.standard_normal((H, W, D))
    z_norm = rng.standard_normal((H, W))
    z_unk = rng.standard_normal((H, W, D))
    v = directions[sem] + spec.con_known_noise * z_dir
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    # known norms sit just outside the unit sphere, where the objectosphere term is satisfied
    radius = 1.0 + np.abs(spec.con_known_noise * z_norm)
    con_known = v * radius[..., None]
    con_unknown = z_unk * (spec.con_unknown_norm / np.sqrt(D))
    con_features = np.where(known[..., None], con_known, con_unknown)

    grid = np.stack(np.indices((H, W)), axis=-1).astype(np.float64)
    offsets = np.zeros((H, W, 2))
    for j in np.unique(inst[inst > 0]):
        m = inst == j
        offsets[m] = grid[m].mean(axis=0) - grid[m]
    offsets += spec.offset_noise * rng.standard_normal((H, W, 2))
    return Scene(sem, inst, sem_features, con_features, offsets)


def anomaly_view(scene: Scene, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """(binary anomaly gt, instances restricted to unknown areas)."""
    anomaly = (scene.semantic > spec.num_known).astype(np.int64)
    inst = np.where(anomaly == 1, scene.instance, 0)
    return anomaly, np.asarray(canonicalize_instances(inst))


def open_world_view(scene: Scene, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Known area collapsed to label 0; unknown classes keep their ids."""
    sem = np.where(scene.semantic > spec.num_known, scene.semantic, 0)
    _, inst = anomaly_view(scene, spec)
    return sem, inst


def training_bank(scenes, spec: SceneSpec) -> DescriptorBank:
    """Frozen bank accumulated from the known-class pixels of ``scenes``.

    Row ``k`` holds class id ``k``; row 0 stays empty.
    """
    bank = DescriptorBank.empty(spec.num_known + 1, spec.dim, frozen=True)
    for scene in scenes:
        for k in spec.known_ids:
            m = scene.semantic == k
            if m.any():
                bank.accumulate(k, scene.sem_features[m])
    return bank


def class_table(spec: SceneSpec, task: str) -> list[ClassInfo]:
    """Class table for the ground-truth views written by the ``synth`` command.

    Anomaly-type tasks use 0 = known, 1 = anomaly; open-world tasks keep the
    unknown class ids with label 0 for the whole known area.
    """
    if task in ("anomaly", "os_panoptic"):
        classes = [ClassInfo(0, "known"), ClassInfo(1, "anomaly", thing=True)]
    else:
        classes = [ClassInfo(0, "known")]
        for cid in spec.unknown_ids:
            classes.append(ClassInfo(cid, f"unknown_{cid}", thing=spec.class_spec(cid).thing))
    return classes + [ClassInfo(IGNORE_LABEL, "ignore", ignore=True)]


def load_specs(path) -> list[SceneSpec]:
    """A scene document holds one SceneSpec object or a list of them."""
    doc = json.loads(Path(path).read_text())
    docs = doc if isinstance(doc, list) else doc.get("scenes", [doc])
    return [SceneSpec.from_dict(d) for d in docs]


def dump_specs(path, specs) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2) + "\n")


def demo_specs(seed: int = 0, num_images: int = 2, size: int = 48, dim: int = 8,
               sigma: float = 0.5, separation: float = 20.0) -> list[SceneSpec]:
    """A small stream: 3 known stuff/thing classes and 2 unknown thing classes.

    Class means are ``separation * sigma`` apart; every unknown object is a
    disk, placed at a seed-dependent position in each image.
    """
    rng = make_rng(seed)
    means = separated_means(rng, 5, dim, separation * sigma)
    var = (sigma**2,) * dim
    known = (
        ClassSpec(tuple(means[0]), var, thing=False),
        ClassSpec(tuple(means[1]), var, thing=False),
        ClassSpec(tuple(means[2]), var, thing=True),
    )
    unknown = (ClassSpec(tuple(means[3]), var), ClassSpec(tuple(means[4]), var))
    specs = []
    f = size / 48.0
    r = int(round(9 * f))
    for i in range(num_images):
        jitter = rng.integers(-2, 3, size=4)
        regions = (
            Region(2, "rect", (0, 0, int(8 * f), size)),
            Region(3, "rect", (size - int(8 * f), 0, size, int(14 * f))),
            Region(4, "disk", (int(20 * f) + int(jitter[0]), int(13 * f) + int(jitter[1]), r)),
            Region(5, "disk", (int(29 * f) + int(jitter[2]), int(35 * f) + int(jitter[3]), r)),
        )
        specs.append(SceneSpec(
            seed=seed * 1000 + i, height=size, width=size, dim=dim,
            known=known, unknown=unknown, regions=regions, background=1,
            offset_noise=0.5,
        ))
    return specs
