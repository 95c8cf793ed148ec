"""Line-oriented scene files.

Layout::

    tsp3d-scene 1
    points <N>
    objects <M>
    <N lines: x y z r g b>
    <M lines: cx cy cz sx sy sz category color>
    description <words...>
    target <index>
    relevant <indices...>

Floats are written with ``repr`` so a write/read cycle is exact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import InvalidInput
from ..head import Box3D
from .scenes import GroundingSample, SceneObject

FORMAT_TAG = "tsp3d-scene"
FORMAT_VERSION = 1
SUFFIX = ".scene"


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def dumps_sample(sample):
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION}",
             f"points {len(sample.points)}",
             f"objects {len(sample.objects)}"]
    lines.extend(_fmt(row) for row in sample.points)
    for obj in sample.objects:
        lines.append(f"{_fmt(obj.box.center)} {_fmt(obj.box.size)} {obj.category} {obj.color}")
    lines.append("description " + " ".join(sample.description))
    lines.append(f"target {sample.target_idx}")
    lines.append("relevant " + " ".join(str(i) for i in sample.relevant_idxs))
    return "\n".join(lines) + "\n"


def _expect(line, key):
    parts = line.split()
    if not parts or parts[0] != key:
        raise InvalidInput(f"expected {key!r} line, got {line[:40]!r}")
    return parts[1:]


def loads_sample(text, sample_id=""):
    lines = text.splitlines()
    try:
        tag, version = lines[0].split()
        if tag != FORMAT_TAG or int(version) != FORMAT_VERSION:
            raise InvalidInput(f"unsupported header {lines[0]!r}")
        n = int(_expect(lines[1], "points")[0])
        m = int(_expect(lines[2], "objects")[0])
        pos = 3
        points = np.array([[float(v) for v in lines[pos + i].split()] for i in range(n)],
                          dtype=np.float64).reshape(n, 6)
        pos += n
        objects = []
        for i in range(m):
            parts = lines[pos + i].split()
            vals = [float(v) for v in parts[:6]]
            objects.append(SceneObject(Box3D(vals[:3], vals[3:6]), parts[6], parts[7]))
        pos += m
        description = _expect(lines[pos], "description")
        target = int(_expect(lines[pos + 1], "target")[0])
        relevant = [int(v) for v in _expect(lines[pos + 2], "relevant")]
    except (IndexError, ValueError) as exc:
        raise InvalidInput(f"malformed scene file: {exc}") from exc
    return GroundingSample(points, objects, description, target, relevant, sample_id=sample_id)


def write_sample(sample, path):
    Path(path).write_text(dumps_sample(sample))


def read_sample(path):
    path = Path(path)
    return loads_sample(path.read_text(), sample_id=path.stem)


def write_dataset(samples, directory):
    """One file per sample, named ``<index>_<sample_id>.scene``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = directory / f"{i:05d}_{s.sample_id or 'scene'}{SUFFIX}"
        write_sample(s, p)
        paths.append(p)
    return paths


def read_dataset(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInput(f"{directory} is not a directory")
    samples = []
    for p in sorted(directory.glob(f"*{SUFFIX}")):
        s = read_sample(p)
        s.sample_id = p.stem.split("_", 1)[1] if "_" in p.stem else p.stem
        samples.append(s)
    return samples


def samples_equal(a, b, tol=1e-9):
    """Coordinates and labels equal exactly, floats within ``tol``."""
    if a.description != b.description or a.target_idx != b.target_idx:
        return False
    if list(a.relevant_idxs) != list(b.relevant_idxs) or len(a.objects) != len(b.objects):
        return False
    if a.points.shape != b.points.shape or not np.allclose(a.points, b.points, rtol=0, atol=tol):
        return False
    for oa, ob in zip(a.objects, b.objects):
        if (oa.category, oa.color) != (ob.category, ob.color):
            return False
        if not np.allclose(oa.box.center + oa.box.size, ob.box.center + ob.box.size, rtol=0, atol=tol):
            return False
    return True
