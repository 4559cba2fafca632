"""Synthetic datasets, IDX parsing, validation splits and file formats."""
import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (DomainError, IdxCountMismatchError, IdxMagicError,
                     IdxTruncatedError, ParseError)
from .net import Mlp

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DomainError(f"features must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DomainError(f"{self.y.shape[0]} labels for {self.X.shape[0]} samples")
        if np.any(self.y < 0) or np.any(self.y >= self.num_classes):
            raise DomainError(f"labels must lie in 0..{self.num_classes - 1}")
        if not np.all(np.isfinite(self.X)):
            raise DomainError("features contain NaN or Inf")

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.num_classes)


def gen_blobs(seed, n_per_class, num_classes=3, dim=2, spread=1.0, center_box=5.0):
    """Gaussian clusters around centers drawn uniformly from [-center_box, center_box]^dim."""
    if num_classes < 2 or dim < 2:
        raise DomainError("blobs need num_classes >= 2 and dim >= 2")
    if n_per_class < 1 or spread < 0:
        raise DomainError("n_per_class must be >= 1 and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_box, center_box, size=(num_classes, dim))
    noise = rng.standard_normal((num_classes, n_per_class, dim))
    X = (centers[:, None, :] + spread * noise).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(X, y, num_classes)


def spiral_point(r, label, turns):
    """Noise-free point at radius ``r`` on the spiral of class ``label``."""
    angle = 2.0 * math.pi * turns * r + math.pi * label
    return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=-1)


def gen_spirals(seed, n_per_class, turns=1.0, noise=0.0, r_min=0.05):
    """Two interleaved spirals; radius drawn uniformly from [r_min, 1]."""
    if not turns > 0:
        raise DomainError(f"turns must be > 0, got {turns}")
    if n_per_class < 1 or noise < 0:
        raise DomainError("n_per_class must be >= 1 and noise >= 0")
    rng = np.random.default_rng(seed)
    parts, labels = [], []
    for c in (0, 1):
        r = rng.uniform(r_min, 1.0, size=n_per_class)
        pts = spiral_point(r, c, turns) + noise * rng.standard_normal((n_per_class, 2))
        parts.append(pts)
        labels.append(np.full(n_per_class, c))
    return Dataset(np.concatenate(parts), np.concatenate(labels), 2)


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, num_classes=None):
    """Parse a big-endian IDX image/label pair; pixels are scaled to [0, 1]."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise IdxTruncatedError(f"{images_path}: header shorter than 16 bytes")
    magic, count, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    if len(lab) < 8:
        raise IdxTruncatedError(f"{labels_path}: header shorter than 8 bytes")
    lmagic, lcount = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if count != lcount:
        raise IdxCountMismatchError(f"{count} images but {lcount} labels")
    size = count * rows * cols
    if len(img) - 16 < size:
        raise IdxTruncatedError(f"{images_path}: expected {size} pixel bytes, found {len(img) - 16}")
    if len(lab) - 8 < lcount:
        raise IdxTruncatedError(f"{labels_path}: expected {lcount} labels, found {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=size, offset=16)
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1 if count else 1
    return Dataset(X, y, k)


def split_indices(n, fraction, seed):
    """Uniform sample without replacement: returns ``(train_idx, val_idx)``, both sorted."""
    if not 0 < fraction < 1:
        raise DomainError(f"validation fraction must be in (0, 1), got {fraction}")
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise DomainError(f"fraction {fraction} of {n} samples leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_validation(data: Dataset, fraction, seed):
    """Return ``(train_remainder, validation)``."""
    train_idx, val_idx = split_indices(len(data), fraction, seed)
    return data.subset(train_idx), data.subset(val_idx)


# ---------------------------------------------------------------- datasets

def save_dataset_csv(data: Dataset, path):
    header = [f"f{i}" for i in range(data.dim)] + ["label"]
    rows = ([repr(float(v)) for v in x] + [int(c)] for x, c in zip(data.X, data.y))
    write_csv(path, header, rows)


def load_dataset_csv(path, num_classes=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[-1] != "label":
            raise ParseError(f"{path}: last column must be 'label'")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[:-1] != expected:
            raise ParseError(f"{path}: feature columns must be {expected}")
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                X.append([float(v) for v in row[:-1]])
                y.append(int(row[-1]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    X = np.array(X, dtype=np.float64).reshape(len(y), len(header) - 1)
    y = np.array(y, dtype=np.int64)
    if len(y) and y.min() < 0:
        raise ParseError(f"{path}: negative label")
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if len(y) else 1)
    return Dataset(X, y, max(k, 2))


# ---------------------------------------------------------------- models

def model_to_dict(net: Mlp):
    return {
        "widths": list(net.widths),
        "activation": net.activation,
        "weights": [w.ravel().tolist() for w in net.weights],
    }


def model_from_dict(obj):
    for key in ("widths", "activation", "weights"):
        if key not in obj:
            raise ParseError(f"model is missing field {key!r}")
    widths = obj["widths"]
    if not isinstance(widths, list) or len(widths) < 2 or not all(
            isinstance(w, int) and w >= 1 for w in widths):
        raise ParseError("field 'widths' must be a list of >= 2 positive integers")
    if obj["activation"] not in ("tanh", "relu"):
        raise ParseError(f"field 'activation' must be 'tanh' or 'relu', got {obj['activation']!r}")
    weights = obj["weights"]
    if not isinstance(weights, list) or len(weights) != len(widths) - 1:
        raise ParseError(f"field 'weights' must hold {len(widths) - 1} matrices")
    mats = []
    for l, flat in enumerate(weights, start=1):
        shape = (widths[l], widths[l - 1])
        if not isinstance(flat, list) or len(flat) != shape[0] * shape[1]:
            raise ParseError(f"field 'weights[{l - 1}]' must hold {shape[0] * shape[1]} "
                             f"values for a {shape[0]}x{shape[1]} layer")
        mats.append(np.array(flat, dtype=np.float64).reshape(shape))
    return Mlp(list(widths), obj["activation"], mats)


def save_model(net: Mlp, path):
    write_json(path, model_to_dict(net))


def load_model(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: top level must be an object")
    return model_from_dict(obj)


# ---------------------------------------------------------------- reports

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "value") and isinstance(obj.value, str):
        return obj.value
    return obj


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, header, rows):
    """Header row plus ``rows`` (sequences or dicts keyed by header)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(h, "") for h in header]
            writer.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- artifact bundles

def save_artifact(artifact, directory, config=None):
    """Write the bundle layout: config.json, teacher.json, s0.json, res_<i>.json, meta.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for stale in d.glob("res_*.json"):
        stale.unlink()
    if config is not None:
        write_json(d / "config.json", config.to_dict() if hasattr(config, "to_dict") else config)
    save_model(artifact.teacher, d / "teacher.json")
    save_model(artifact.s0, d / "s0.json")
    for i, r in enumerate(artifact.res_students, start=1):
        save_model(r, d / f"res_{i}.json")
    write_json(d / "meta.json", {
        "n": artifact.n,
        "th_energy": artifact.th_energy,
        "termination": artifact.termination,
        "teacher_val_energy": artifact.teacher_val_energy,
        "val_indices": [] if artifact.val_indices is None else artifact.val_indices,
        "records": [r.as_dict() for r in artifact.records],
    })


def load_artifact(directory):
    from .artifact import StageArtifact, StageRecord

    d = Path(directory)
    meta = read_json(d / "meta.json")
    for key in ("n", "th_energy"):
        if key not in meta:
            raise ParseError(f"{d / 'meta.json'}: missing field {key!r}")
    n = meta["n"]
    found = len(list(d.glob("res_*.json")))
    if found != n:
        raise ParseError(f"{d}: meta.n = {n} but {found} res_*.json files present")
    res = [load_model(d / f"res_{i}.json") for i in range(1, n + 1)]
    records = [StageRecord(**r) for r in meta.get("records", [])]
    val_idx = meta.get("val_indices")
    return StageArtifact(
        teacher=load_model(d / "teacher.json"),
        s0=load_model(d / "s0.json"),
        res_students=res,
        th_energy=float(meta["th_energy"]),
        termination=meta.get("termination", "energy"),
        records=records,
        teacher_val_energy=meta.get("teacher_val_energy"),
        val_indices=None if val_idx is None else np.asarray(val_idx, dtype=np.int64),
    )
