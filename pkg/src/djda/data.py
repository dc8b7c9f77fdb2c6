"""Synthetic multi-speaker data, dataset CSV I/O, LOSO folds and batching.

Synthetic construction (all draws from :class:`djda.rng.SplitMix64`):

* class means ``mu_m = class_separation / sqrt(2) * e_m`` so every pair of
  means is exactly ``class_separation`` apart; ``centroid`` is their average.
* per speaker ``j`` (in id order) the stream yields ``feature_dim`` normals
  for the offset direction, ``2 * c`` normals for the rotation plane inside
  the class subspace and one uniform for the angle. The offset has norm
  ``speaker_shift_scale``. The angle is ``+-rotation_angle * (0.5 + u / 2)``
  with the sign taken from ``u < 0.5``. Draws happen even when rotation is
  off, so toggling it does not change the offsets.
* then one block of ``k_total * c * n * feature_dim`` normals, ordered
  speaker, class, sample, coordinate.

A sample of class ``m`` from speaker ``j`` is
``centroid + R_j (mu_m - centroid + noise_sigma * z) + offset_j``.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractError, ValidationError
from .losses import Batch
from .rng import SplitMix64, derive_seed

UNLABELED = -1


@dataclass
class SynthSpec:
    c: int = 4
    k_total: int = 5
    samples_per_speaker_per_class: int = 30
    feature_dim: int = 20
    class_separation: float = 4.0
    speaker_shift_scale: float = 2.0
    speaker_rotation: bool = True
    rotation_angle: float = 1.0  # radians
    noise_sigma: float = 0.7
    seed: int = 7

    def validate(self):
        if self.c < 2:
            raise ValidationError(f"c must be >= 2, got {self.c}")
        if self.k_total < 3:
            raise ValidationError(f"k_total must be >= 3, got {self.k_total}")
        if self.samples_per_speaker_per_class < 1 or self.feature_dim < 1:
            raise ValidationError("sample and feature counts must be >= 1")
        if self.feature_dim < self.c:
            raise ValidationError(f"feature_dim ({self.feature_dim}) must be >= c ({self.c})")
        if self.class_separation <= 0 or self.noise_sigma <= 0:
            raise ValidationError("class_separation and noise_sigma must be > 0")
        if self.speaker_shift_scale < 0 or self.rotation_angle < 0:
            raise ValidationError("speaker_shift_scale and rotation_angle must be >= 0")
        return self


class Sample(NamedTuple):
    features: np.ndarray
    emotion: int  # -1 when unlabeled
    speaker: int
    domain: int = 0


@dataclass
class Dataset:
    x: np.ndarray
    emotion: np.ndarray
    speaker: np.ndarray
    c: int
    k: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.emotion = np.asarray(self.emotion, dtype=np.int64)
        self.speaker = np.asarray(self.speaker, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != len(self.emotion) or len(self.speaker) != len(self.emotion):
            raise ValidationError("x must be (n, d) with one emotion and speaker label per row")

    def __len__(self):
        return len(self.emotion)

    @property
    def feature_dim(self):
        return self.x.shape[1]

    @property
    def speaker_ids(self):
        return sorted(set(self.speaker.tolist()))

    @property
    def labeled(self):
        return bool(len(self)) and bool(np.all(self.emotion >= 0))

    @property
    def samples(self):
        return [Sample(self.x[i], int(self.emotion[i]), int(self.speaker[i])) for i in range(len(self))]

    def subset(self, mask):
        return Dataset(self.x[mask], self.emotion[mask], self.speaker[mask], self.c, self.k,
                       dict(self.provenance))


def plane_rotation(u, v, angle):
    """Rotation by ``angle`` in the plane spanned by orthonormal ``u``, ``v``."""
    d = u.size
    return (np.eye(d) + (math.cos(angle) - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + math.sin(angle) * (np.outer(v, u) - np.outer(u, v)))


def construction(spec: SynthSpec):
    """Means, per-speaker offsets and rotations, in generation order.

    Returns ``(means, centroid, offsets, rotations, rng)``; ``rng`` is
    positioned at the start of the noise block.
    """
    spec.validate()
    d, c = spec.feature_dim, spec.c
    rng = SplitMix64(spec.seed)
    means = np.zeros((c, d))
    means[np.arange(c), np.arange(c)] = spec.class_separation / math.sqrt(2.0)
    centroid = means.mean(axis=0)
    offsets, rotations = [], []
    for _ in range(spec.k_total):
        direction = rng.normal(d)
        offsets.append(spec.speaker_shift_scale * direction / np.linalg.norm(direction))
        plane = rng.normal(2 * c).reshape(2, c)
        u_draw = rng.uniform()
        if spec.speaker_rotation and spec.rotation_angle > 0:
            u = np.zeros(d)
            v = np.zeros(d)
            u[:c] = plane[0] / np.linalg.norm(plane[0])
            v[:c] = plane[1] - plane[1] @ u[:c] * u[:c]
            v /= np.linalg.norm(v)
            sign = 1.0 if u_draw < 0.5 else -1.0
            angle = sign * spec.rotation_angle * (0.5 + u_draw / 2.0)
            rotations.append(plane_rotation(u, v, angle))
        else:
            rotations.append(np.eye(d))
    return means, centroid, np.array(offsets), np.array(rotations), rng


def cell_means(spec: SynthSpec):
    """Noise-free mean of every (speaker, class) cell, shape ``(k_total, c, d)``."""
    means, centroid, offsets, rotations, _ = construction(spec)
    return np.array([[centroid + rotations[j] @ (means[m] - centroid) + offsets[j]
                      for m in range(spec.c)] for j in range(spec.k_total)])


def generate_synthetic(spec: SynthSpec) -> Dataset:
    means, centroid, offsets, rotations, rng = construction(spec)
    k, c, n, d = spec.k_total, spec.c, spec.samples_per_speaker_per_class, spec.feature_dim
    noise = rng.normal((k, c, n, d), scale=spec.noise_sigma)
    xs = []
    for j in range(k):
        for m in range(c):
            local = means[m] - centroid + noise[j, m]
            xs.append(centroid + local @ rotations[j].T + offsets[j])
    x = np.concatenate(xs)
    emotion = np.tile(np.repeat(np.arange(c), n), k)
    speaker = np.repeat(np.arange(k), c * n)
    return Dataset(x, emotion, speaker, c, k, {"synthetic": asdict(spec)})


# -- CSV ------------------------------------------------------------------
#
#   # djda-dataset c=<c> k=<k>          (optional declaration line)
#   speaker,emotion,f0,f1,...
#   <int>,<int>,<float>,...             (emotion -1 = unlabeled)


def save_dataset(dataset: Dataset, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# djda-dataset c={dataset.c} k={dataset.k}\n")
        fh.write(",".join(["speaker", "emotion"] + [f"f{i}" for i in range(dataset.feature_dim)]) + "\n")
        for i in range(len(dataset)):
            row = [str(int(dataset.speaker[i])), str(int(dataset.emotion[i]))]
            row += [repr(float(v)) for v in dataset.x[i]]
            fh.write(",".join(row) + "\n")


def _parse_declaration(line, lineno):
    decl = {}
    for tok in line.lstrip("#").split()[1:]:
        key, _, val = tok.partition("=")
        if key not in ("c", "k") or not val.isdigit():
            raise ValidationError(f"line {lineno}: bad declaration token {tok!r}")
        decl[key] = int(val)
    return decl


def load_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    decl = {}
    pos = 0
    if lines and lines[0].startswith("#"):
        decl = _parse_declaration(lines[0], 1)
        pos = 1
    if pos >= len(lines):
        raise ValidationError(f"{path}: missing header row")
    header = lines[pos].split(",")
    if header[:2] != ["speaker", "emotion"] or header[2:] != [f"f{i}" for i in range(len(header) - 2)]:
        raise ValidationError(f"line {pos + 1}: header must be speaker,emotion,f0,f1,...")
    dim = len(header) - 2
    xs, emotions, speakers = [], [], []
    for lineno, line in enumerate(lines[pos + 1:], start=pos + 2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != dim + 2:
            raise ValidationError(f"line {lineno}: expected {dim + 2} fields, got {len(cells)}")
        try:
            spk, emo = int(cells[0]), int(cells[1])
            feats = [float(v) for v in cells[2:]]
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in feats):
            raise ValidationError(f"line {lineno}: non-finite feature value")
        if emo < UNLABELED or spk < 0:
            raise ValidationError(f"line {lineno}: negative label")
        if "c" in decl and emo >= decl["c"]:
            raise ValidationError(f"line {lineno}: emotion {emo} >= declared c={decl['c']}")
        xs.append(feats)
        emotions.append(emo)
        speakers.append(spk)
    ids = sorted(set(speakers))
    k = decl.get("k", len(ids))
    # with a declaration the file may hold any subset of speakers 0..k-1
    if "k" in decl and ids and ids[-1] >= k:
        raise ValidationError(f"{path}: speaker id {ids[-1]} >= declared k={k}")
    if "k" not in decl and ids != list(range(len(ids))):
        raise ValidationError(f"{path}: speaker ids must be dense 0..k-1, got {ids}")
    c = decl.get("c", max(emotions, default=-1) + 1)
    x = np.array(xs, dtype=np.float64).reshape(len(xs), dim)
    return Dataset(x, emotions, speakers, c, k, {"file": str(path)})


def write_sidecar(spec: SynthSpec, path):
    with open(path, "w") as fh:
        json.dump({"synth_spec": asdict(spec), "prng": "splitmix64", "seed": spec.seed},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- LOSO -----------------------------------------------------------------


class TargetView:
    """Held-out speaker. Training code reads ``x``; labels only via ``eval_labels``."""

    def __init__(self, x, emotion, speaker_id):
        self.x = x
        self._emotion = emotion
        self.speaker_id = speaker_id

    def __len__(self):
        return self.x.shape[0]

    def eval_labels(self):
        if np.any(self._emotion < 0):
            raise ValidationError("labels required for evaluation")
        return self._emotion.copy()


@dataclass
class LosoFold:
    held_out_speaker: int
    source: Dataset  # speakers re-indexed densely; see source_speaker_ids
    target: TargetView
    source_speaker_ids: list
    source_index: np.ndarray  # row indices into the parent dataset
    target_index: np.ndarray


def make_fold(dataset: Dataset, held_out):
    if held_out not in dataset.speaker_ids:
        raise ValidationError(f"speaker {held_out} not in dataset")
    is_target = dataset.speaker == held_out
    src = dataset.subset(~is_target)
    ids = [s for s in dataset.speaker_ids if s != held_out]
    remap = {s: i for i, s in enumerate(ids)}
    src.speaker = np.array([remap[s] for s in src.speaker.tolist()], dtype=np.int64)
    src.k = len(ids)
    if np.any(src.emotion < 0):
        raise ValidationError("source speakers must carry emotion labels")
    target = TargetView(dataset.x[is_target], dataset.emotion[is_target], held_out)
    return LosoFold(held_out, src, target, ids, np.flatnonzero(~is_target), np.flatnonzero(is_target))


def loso_splits(dataset: Dataset):
    ids = dataset.speaker_ids
    if len(ids) < 3:
        raise ValidationError(f"LOSO needs at least 3 speakers, got {len(ids)}")
    if not dataset.labeled:
        raise ValidationError("LOSO needs a fully labeled dataset")
    return [make_fold(dataset, s) for s in ids]


def make_batches(fold: LosoFold, batch_size, seed, epoch):
    """One epoch of paired source/target batches.

    Source rows are shuffled once per ``(seed, epoch)`` and each appears
    exactly once; the last batch may be partial. Every batch carries
    ``batch_size`` target rows, cycling through a fresh permutation of the
    target when it is at least ``batch_size`` long and drawing with
    replacement otherwise.
    """
    if batch_size < 2:
        raise ContractError(f"batch_size must be >= 2, got {batch_size}")
    n_s, n_t = len(fold.source), len(fold.target)
    if n_s == 0 or n_t == 0:
        raise ContractError("fold has an empty source or target")
    rng = SplitMix64(derive_seed(seed, epoch, 0xBA7C))
    order = rng.permutation(n_s)
    n_batches = -(-n_s // batch_size)
    if n_t >= batch_size:
        reps = -(-n_batches * batch_size // n_t)
        t_order = np.concatenate([rng.permutation(n_t) for _ in range(reps)])
    else:
        t_order = rng.integers(n_t, n_batches * batch_size)
    src = fold.source
    batches = []
    for b in range(n_batches):
        idx = order[b * batch_size:(b + 1) * batch_size]
        t_idx = t_order[b * batch_size:(b + 1) * batch_size]
        batches.append(Batch(src.x[idx], src.emotion[idx], src.speaker[idx], fold.target.x[t_idx]))
    return batches
