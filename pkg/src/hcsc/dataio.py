"""File formats: MNIST IDX input, the HCSC checkpoint container, PGM montages
and the metrics CSV.

HCSC container layout (all integers little-endian)::

    b"HCSC" | u32 version | u64 header length | header (UTF-8 JSON) | blobs

The header is indented, key-sorted JSON and lists every blob as
``{"name", "shape"}`` in payload order; blobs are raw little-endian float32.
"""
from dataclasses import dataclass
import json
import os
import re
import struct

import numpy as np

from .errors import (BadMagicError, DataFormatError, DimensionMismatchError, ShapeError,
                     SizeMismatchError, TruncatedPayloadError, VersionMismatchError)
from .model import HierarchicalModel, LayerConfig

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

CHECKPOINT_MAGIC = b"HCSC"
CHECKPOINT_VERSION = 1

METRICS_HEADER = "epoch,batch,layer,objective,recon_rel_err"


# ---------------------------------------------------------------------------
# IDX

def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise TruncatedPayloadError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: bad magic {found}, expected {magic}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayloadError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header
    if payload < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {payload} bytes, dimensions {dims} need {expected}")
    if payload > expected:
        raise DimensionMismatchError(
            f"{path}: payload has {payload} bytes, dimensions {dims} declare {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(path):
    """Read an IDX3 image file as float32 ``(N, 1, rows, cols)`` in [0, 1]."""
    raw = _read_idx(path, IDX_IMAGES_MAGIC, 3)
    return (raw.astype(np.float32) / np.float32(255.0))[:, None]


def load_idx_labels(path):
    """Read an IDX1 label file as an int64 array."""
    return _read_idx(path, IDX_LABELS_MAGIC, 1).astype(np.int64)


def write_idx_images(path, images_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images_u8.shape))
        f.write(images_u8.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    def subset(self, n):
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(data_dir, name):
    for candidate in (name, name.replace("-idx", ".idx"), name + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            if candidate.endswith(".gz"):
                raise FileNotFoundError(f"{path} is compressed; gunzip it first")
            return path
    raise FileNotFoundError(f"no {name} in {data_dir}")


def load_mnist(data_dir, split="train", limit=None):
    """Load a standard MNIST split from ``data_dir``."""
    img_name, lbl_name = _SPLIT_FILES[split]
    images = load_idx_images(_find(data_dir, img_name))
    labels = load_idx_labels(_find(data_dir, lbl_name))
    return Dataset(images, labels, split).subset(limit)


# ---------------------------------------------------------------------------
# checkpoint container

def write_container(path, header, tensors):
    """Write ``header`` (a JSON-able dict) and named float32 ``tensors``."""
    header = dict(header)
    header["tensors"] = [{"name": name, "shape": list(np.shape(t))} for name, t in tensors]
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(text)))
        f.write(text)
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_container(path):
    """Return ``(header, {name: array})`` from a container file."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not an HCSC container (magic {data[:4]!r})")
    if len(data) < 16:
        raise SizeMismatchError(f"{path}: truncated container preamble")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: container version {version}, this reader handles {CHECKPOINT_VERSION}")
    if len(data) < 16 + hlen:
        raise SizeMismatchError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise DataFormatError(f"{path}: unreadable container header ({exc})") from exc
    offset = 16 + hlen
    tensors = {}
    for entry in _blob_entries(path, header):
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise SizeMismatchError(
                f"{path}: blob {entry['name']!r} needs {nbytes} bytes, "
                f"{len(data) - offset} remain")
        tensors[entry["name"]] = (
            np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
            .astype(np.float32).reshape(shape))
        offset += nbytes
    if offset != len(data):
        raise SizeMismatchError(f"{path}: {len(data) - offset} trailing bytes after blobs")
    return header, tensors


def _blob_entries(path, header):
    entries = header.get("tensors", []) if isinstance(header, dict) else None
    if not isinstance(entries, list):
        raise DataFormatError(f"{path}: container header has no tensor list")
    for entry in entries:
        ok = (isinstance(entry, dict) and isinstance(entry.get("name"), str)
              and isinstance(entry.get("shape"), list)
              and all(type(d) is int and d >= 0 for d in entry["shape"]))
        if not ok:
            raise DataFormatError(f"{path}: malformed tensor entry {entry!r}")
    return entries


def model_header(model):
    return {
        "kind": "model",
        "depth": model.depth,
        "tied": model.tied,
        "image_channels": model.image_channels,
        "input_scale": model.input_scale,
        "seed": model.seed,
        "layers": [c.to_dict() for c in model.layers],
        "history": model.history_summary,
    }


def model_tensors(model):
    n = 1 if model.tied else model.depth
    out = []
    for i in range(n):
        out.append((f"A{i + 1}", model.A[i]))
        out.append((f"B{i + 1}", model.B[i]))
    return out


def save_checkpoint(path, model, classifier=None, extra=None):
    """Save a model (and optionally a classifier) to ``path``."""
    header = model_header(model)
    tensors = model_tensors(model)
    if classifier is not None:
        header["classifier"] = classifier.header()
        tensors += classifier.tensors()
    if extra:
        header["extra"] = extra
    write_container(path, header, tensors)


def model_from_container(header, tensors):
    if header.get("kind") != "model":
        raise BadMagicError(f"container holds {header.get('kind')!r}, not a model")
    try:
        layers = [LayerConfig(**c) for c in header["layers"]]
        depth, tied = int(header["depth"]), bool(header["tied"])
        image_channels, seed = int(header["image_channels"]), int(header["seed"])
        input_scale = float(header.get("input_scale", 1.0))
        for cfg in layers:
            cfg.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed model header: {exc!r}") from exc
    if depth != len(layers) or depth < 1:
        raise DataFormatError(f"header depth {depth} but {len(layers)} layer configs")
    n = 1 if tied else depth
    try:
        A = [tensors[f"A{i + 1}"] for i in range(n)]
        B = [tensors[f"B{i + 1}"] for i in range(n)]
    except KeyError as exc:
        raise SizeMismatchError(f"checkpoint is missing filter bank {exc}") from exc
    prev = image_channels
    for i in range(n):
        cfg = layers[i]
        want_a = (prev, cfg.scale_channels, cfg.kernel_h, cfg.kernel_w)
        want_b = (prev, cfg.detail_channels, cfg.kernel_h, cfg.kernel_w)
        if A[i].shape != want_a or B[i].shape != want_b:
            raise SizeMismatchError(
                f"layer {i + 1}: banks {A[i].shape}/{B[i].shape} do not match config "
                f"{want_a}/{want_b}")
        prev = cfg.scale_channels
    if tied:
        A, B = A * depth, B * depth
    return HierarchicalModel(
        layers=layers, A=A, B=B, tied=tied, image_channels=image_channels,
        input_scale=input_scale, seed=seed, history_summary=header.get("history", {}))


def load_checkpoint(path):
    """Load ``(model, classifier_or_None)`` from ``path``."""
    from .classifier import LogisticModel

    header, tensors = read_container(path)
    model = model_from_container(header, tensors)
    classifier = None
    if "classifier" in header:
        classifier = LogisticModel.from_container(header["classifier"], tensors)
    return model, classifier


def save_codes(path, encoding, labels=None, extra=None):
    """Store a batched encoding (one blob per layer and code type)."""
    header = {"kind": "codes", "depth": encoding.depth,
              "count": int(len(encoding.x[0])), "extra": extra or {}}
    tensors = []
    for i in range(encoding.depth):
        tensors.append((f"x{i + 1}", encoding.x[i]))
        tensors.append((f"u{i + 1}", encoding.u[i]))
    if labels is not None:
        tensors.append(("labels", np.asarray(labels, dtype=np.float32)))
    write_container(path, header, tensors)


def load_codes(path):
    from .inference import Encoding

    header, tensors = read_container(path)
    if header.get("kind") != "codes":
        raise BadMagicError(f"container holds {header.get('kind')!r}, not codes")
    depth = header["depth"]
    enc = Encoding(x=[tensors[f"x{i + 1}"] for i in range(depth)],
                   u=[tensors[f"u{i + 1}"] for i in range(depth)])
    labels = tensors.get("labels")
    return enc, (labels.astype(np.int64) if labels is not None else None)


# ---------------------------------------------------------------------------
# images

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+255\s")


def write_pgm(path, image_u8):
    image_u8 = np.asarray(image_u8, dtype=np.uint8)
    h, w = image_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image_u8.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise BadMagicError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    raster = data[m.end():]
    if len(raster) != w * h:
        raise SizeMismatchError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def to_gray(tile):
    """Min-max scale one 2-D tile to uint8; constant tiles map to mid-gray."""
    tile = np.asarray(tile, dtype=np.float64)
    lo, hi = tile.min(), tile.max()
    if hi <= lo:
        return np.full(tile.shape, 128, dtype=np.uint8)
    return np.round((tile - lo) / (hi - lo) * 255.0).astype(np.uint8)


def montage(tiles, cols=None, separator=0):
    """Tile 2-D arrays into one uint8 grid with 1-px separators.

    Each tile is normalized independently. ``cols`` defaults to 8 (or fewer
    when there are fewer tiles).
    """
    tiles = [np.asarray(t) for t in tiles]
    if not tiles:
        raise ShapeError("montage needs at least one tile")
    th, tw = tiles[0].shape
    if any(t.shape != (th, tw) for t in tiles):
        raise ShapeError("montage tiles must share one shape")
    cols = cols or min(8, len(tiles))
    rows = -(-len(tiles) // cols)
    grid = np.full((rows * (th + 1) + 1, cols * (tw + 1) + 1), separator, dtype=np.uint8)
    for k, t in enumerate(tiles):
        r, c = divmod(k, cols)
        y, x = 1 + r * (th + 1), 1 + c * (tw + 1)
        grid[y:y + th, x:x + tw] = to_gray(t)
    return grid


def bank_tiles(bank):
    """One tile per (code channel, output channel) of a filter bank, code channel major."""
    bank = np.asarray(bank)
    return [bank[r, c] for c in range(bank.shape[1]) for r in range(bank.shape[0])]


def export_montage(tensors, path, cols=None):
    """Write per-channel tiles of 2-D/3-D tensors (or filter banks) as one PGM."""
    tiles = []
    for t in tensors:
        t = np.asarray(t)
        if t.ndim == 4:
            tiles.extend(bank_tiles(t))
        elif t.ndim == 3:
            tiles.extend(list(t))
        elif t.ndim == 2:
            tiles.append(t)
        else:
            raise ShapeError(f"cannot tile a tensor of shape {t.shape}")
    grid = montage(tiles, cols)
    write_pgm(path, grid)
    return grid


# ---------------------------------------------------------------------------
# metrics

def write_metrics(path, records):
    """Write ``(epoch, batch, layer, objective, recon_rel_err)`` rows as CSV."""
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for epoch, batch, layer, objective, err in records:
            f.write(f"{epoch},{batch},{layer},{objective:.9g},{err:.9g}\n")


def read_metrics(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != METRICS_HEADER:
            raise BadMagicError(f"{path}: unexpected metrics header {header!r}")
        rows = []
        for line in f:
            e, b, l, o, r = line.strip().split(",")
            rows.append((int(e), int(b), int(l), float(o), float(r)))
    return rows
