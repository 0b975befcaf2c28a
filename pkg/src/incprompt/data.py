"""Disjoint-class task streams.

A :class:`TaskStream` is immutable. Training code gets at training images only
through :meth:`TaskStream.cursor`, which hands tasks out strictly in order and
refuses to reopen a finished one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ProtocolError

__all__ = [
    "LabeledDataset",
    "SplitSpec",
    "StreamCursor",
    "Task",
    "TaskStream",
    "load_image_folder",
    "split_classes",
    "synthetic_gaussian_tasks",
    "write_manifest",
]

SOURCES = ("synthetic", "image-folder", "builtin-small")


@dataclass(frozen=True)
class SplitSpec:
    num_tasks: int = 5
    classes_per_task: int = 2
    shuffle_seed: int = 0
    source: str = "synthetic"

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        if self.classes_per_task < 1:
            raise ConfigError("classes_per_task must be >= 1")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got {self.source!r}")


@dataclass(frozen=True)
class LabeledDataset:
    """Images are ``[n, H, W, C]`` float tensors; labels index ``class_names``."""

    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    class_names: tuple[str, ...]
    train_paths: tuple[str, ...] | None = None
    test_paths: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Task:
    """One task. ``*_y`` hold head indices; ``source_classes[i]`` names head index ``classes[i]``."""

    task_id: int
    classes: tuple[int, ...]
    source_classes: tuple[str, ...]
    train_x: torch.Tensor = field(repr=False)
    train_y: torch.Tensor = field(repr=False)
    test_x: torch.Tensor = field(repr=False)
    test_y: torch.Tensor = field(repr=False)
    train_paths: tuple[str, ...] | None = field(default=None, repr=False)
    test_paths: tuple[str, ...] | None = field(default=None, repr=False)


class TaskStream:
    def __init__(self, tasks: Sequence[Task], spec: SplitSpec | None = None):
        self._tasks = tuple(tasks)
        self.spec = spec
        seen: set[int] = set()
        for i, t in enumerate(self._tasks):
            if t.task_id != i:
                raise ConfigError(f"task at position {i} has task_id {t.task_id}")
            overlap = seen.intersection(t.classes)
            if overlap:
                raise ConfigError(f"task {i} reuses classes {sorted(overlap)}")
            seen.update(t.classes)

    def __len__(self):
        return len(self._tasks)

    @property
    def num_tasks(self) -> int:
        return len(self._tasks)

    @property
    def num_classes(self) -> int:
        return sum(len(t.classes) for t in self._tasks)

    def classes(self, task_id: int) -> tuple[int, ...]:
        return self._tasks[task_id].classes

    def seen_classes(self, upto: int) -> int:
        """Number of head indices introduced by tasks ``0..upto``."""
        return sum(len(t.classes) for t in self._tasks[: upto + 1])

    def test_split(self, task_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        t = self._tasks[task_id]
        return t.test_x, t.test_y

    def train_split(self, task_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw access to a task's training data. Sequential learners go through :meth:`cursor`."""
        t = self._tasks[task_id]
        return t.train_x, t.train_y

    def joint_train(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Union of every task's training data, for the joint-training reference."""
        xs, ys = zip(*(self.train_split(i) for i in range(self.num_tasks)))
        return torch.cat(xs), torch.cat(ys)

    def cursor(self) -> "StreamCursor":
        return StreamCursor(self)

    def task(self, task_id: int) -> Task:
        return self._tasks[task_id]


class StreamCursor:
    """Hands out training data one task at a time, never going back."""

    def __init__(self, stream: TaskStream):
        self._stream = stream
        self.current = 0
        self._open = False

    def train_data(self, task_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        if task_id != self.current:
            raise ProtocolError(
                f"training data for task {task_id} requested while the stream is at task {self.current}"
            )
        if task_id >= self._stream.num_tasks:
            raise ProtocolError(f"stream has only {self._stream.num_tasks} tasks")
        self._open = True
        return self._stream.train_split(task_id)

    def finish(self, task_id: int) -> None:
        if task_id != self.current or not self._open:
            raise ProtocolError(f"cannot finish task {task_id}; current task is {self.current}")
        self.current += 1
        self._open = False


def split_classes(dataset: LabeledDataset, spec: SplitSpec) -> TaskStream:
    """Randomly partition classes into ``spec.num_tasks`` disjoint groups.

    Head indices are assigned in task order, so task ``t`` owns indices
    ``[t * c, (t + 1) * c)``.
    """
    n_classes = len(dataset.class_names)
    need = spec.num_tasks * spec.classes_per_task
    if need > n_classes:
        raise ConfigError(
            f"{spec.num_tasks} tasks x {spec.classes_per_task} classes needs {need} classes, "
            f"dataset has {n_classes}"
        )
    rng = np.random.default_rng(spec.shuffle_seed)
    order = rng.permutation(n_classes)[:need]
    tasks = []
    for t in range(spec.num_tasks):
        src = order[t * spec.classes_per_task : (t + 1) * spec.classes_per_task]
        head = tuple(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        parts = {}
        for split in ("train", "test"):
            x = getattr(dataset, f"{split}_x")
            y = getattr(dataset, f"{split}_y")
            paths = getattr(dataset, f"{split}_paths")
            idx = np.flatnonzero(np.isin(y.numpy(), src))
            remap = {int(c): h for c, h in zip(src, head)}
            parts[f"{split}_x"] = x[idx]
            parts[f"{split}_y"] = torch.tensor([remap[int(c)] for c in y[idx]], dtype=torch.long)
            parts[f"{split}_paths"] = None if paths is None else tuple(paths[i] for i in idx)
        tasks.append(Task(t, head, tuple(dataset.class_names[c] for c in src), **parts))
    return TaskStream(tasks, spec)


def _render_basis(dim: int, pixels: int, rng: np.random.Generator) -> np.ndarray:
    if dim > pixels:
        raise ConfigError(f"latent dim {dim} exceeds image size {pixels}")
    q, _ = np.linalg.qr(rng.standard_normal((pixels, dim)))
    return q.T  # orthonormal rows


def synthetic_gaussian_tasks(
    num_tasks: int = 5,
    classes_per_task: int = 2,
    dim: int = 16,
    samples_per_class: int = 200,
    separation: float = 10.0,
    seed: int = 0,
    *,
    test_samples_per_class: int = 100,
    image_size: int = 16,
    channels: int = 1,
    noise: float = 1.0,
) -> TaskStream:
    """Gaussian blobs in a ``dim``-dimensional latent space, rendered as images.

    Class ``c`` is centred at ``separation * u_c`` for a random unit vector
    ``u_c``; samples add isotropic unit-scale noise. A fixed orthonormal linear
    map lays the latent vector out over the pixels, so classes stay linearly
    separable in image space exactly as far as they are in latent space.
    """
    if separation < 0:
        raise ConfigError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    n_classes = num_tasks * classes_per_task
    directions = rng.standard_normal((n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    basis = _render_basis(dim, image_size * image_size * channels, rng)

    def draw(per_class):
        z = means[:, None, :] + noise * rng.standard_normal((n_classes, per_class, dim))
        y = np.repeat(np.arange(n_classes), per_class)
        img = (z.reshape(-1, dim) @ basis).reshape(-1, image_size, image_size, channels)
        return torch.from_numpy(img).float(), torch.from_numpy(y).long()

    train_x, train_y = draw(samples_per_class)
    test_x, test_y = draw(test_samples_per_class)
    dataset = LabeledDataset(train_x, train_y, test_x, test_y,
                             tuple(f"class_{c:03d}" for c in range(n_classes)))
    return split_classes(dataset, SplitSpec(num_tasks, classes_per_task, seed, "synthetic"))


def load_image_folder(root: str | Path, image_size: int, channels: int = 3) -> LabeledDataset:
    """Read ``root/<split>/<class_name>/*.png`` for splits ``train`` and ``test``.

    Images are resized to ``image_size`` and scaled to ``[0, 1]``. Class
    names are taken from the ``train`` directory, sorted.
    """
    from PIL import Image

    root = Path(root)
    train_dir = root / "train"
    if not train_dir.is_dir() or not (root / "test").is_dir():
        raise ConfigError(f"{root} must contain train/ and test/ directories")
    class_names = tuple(sorted(p.name for p in train_dir.iterdir() if p.is_dir()))
    if not class_names:
        raise ConfigError(f"no class directories under {train_dir}")
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise ConfigError("channels must be 1 or 3 for image folders")

    def read(split):
        xs, ys, paths = [], [], []
        for label, name in enumerate(class_names):
            for path in sorted((root / split / name).glob("*.png")):
                with Image.open(path) as im:
                    im = im.convert(mode).resize((image_size, image_size))
                    arr = np.asarray(im, dtype=np.float32) / 255.0
                xs.append(arr.reshape(image_size, image_size, channels))
                ys.append(label)
                paths.append(str(path.relative_to(root)))
        if not xs:
            raise ConfigError(f"no .png images under {root / split}")
        return torch.from_numpy(np.stack(xs)), torch.tensor(ys, dtype=torch.long), tuple(paths)

    train_x, train_y, train_paths = read("train")
    test_x, test_y, test_paths = read("test")
    return LabeledDataset(train_x, train_y, test_x, test_y, class_names, train_paths, test_paths)


def write_manifest(stream: TaskStream, path: str | Path) -> None:
    """CSV ``path,label,task_id`` listing every sample; synthetic samples get ``<split>:<index>`` paths."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "task_id"])
        for t in range(stream.num_tasks):
            task = stream.task(t)
            for split in ("train", "test"):
                ys = getattr(task, f"{split}_y")
                paths = getattr(task, f"{split}_paths")
                for i, y in enumerate(ys.tolist()):
                    w.writerow([paths[i] if paths else f"{split}:{t}:{i}", y, t])
