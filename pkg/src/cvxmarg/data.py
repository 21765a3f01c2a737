"""Binary image ingestion, seeded corruption and the denoising experiment.

Random draws use ``numpy.random.Generator(PCG64(seed))`` and only its
``random()`` stream of doubles, so corrupted sets are reproducible
byte-for-byte for a given seed.
"""

from __future__ import annotations

import csv
import gzip
import io
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, ParseError
from .loss import Sample
from .model import ParameterSet, atomic_write_text, build_grid_model
from .polytope import build_constraints
from .trainer import TrainConfig, TrainTrace, infer_all, init_parameters, metrics_from_beliefs, train

log = logging.getLogger(__name__)

IDX_UBYTE = 0x08
METRIC_COLUMNS = ("classif", "regress", "l_log", "l_quad")
PAPER_COLUMN_NAMES = ("Classif.", "Regress.", "L_log", "L_quad")


@dataclass
class ImageSet:
    images: np.ndarray  # (N, H, W) uint8 in {0, 1}
    label: str = ""
    seed: int | None = None

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 3:
            raise InvalidArgument("images must have shape (N, H, W)")
        if imgs.size and not np.all((imgs == 0) | (imgs == 1)):
            raise InvalidArgument("images must be binary")
        self.images = imgs.astype(np.uint8)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


# -- IDX ----------------------------------------------------------------------


def read_idx(data: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX tensor (big-endian header)."""
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 4:
        raise ParseError("IDX file truncated in magic number at byte 0")
    zero, dtype, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise ParseError(f"bad IDX magic at byte 0: {data[:4].hex()}")
    if dtype != IDX_UBYTE:
        raise ParseError(f"unsupported IDX element type 0x{dtype:02x} at byte 2")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"IDX header truncated at byte {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != count:
        raise ParseError(
            f"IDX payload at byte {header} has {len(data) - header} bytes, header dims {dims} need {count}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    return struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


# -- text formats -------------------------------------------------------------


def _tokens(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        for tok in line.split():
            yield lineno, tok


def read_pbm(text: str) -> np.ndarray:
    """One or more concatenated plain (P1) PBM images of equal size."""
    toks = list(_tokens(text))
    images = []
    pos = 0
    while pos < len(toks):
        lineno, magic = toks[pos]
        if magic != "P1":
            raise ParseError(f"line {lineno}: expected P1 magic, got {magic!r}")
        if pos + 2 >= len(toks):
            raise ParseError(f"line {lineno}: truncated PBM header")
        try:
            w, h = int(toks[pos + 1][1]), int(toks[pos + 2][1])
        except ValueError as exc:
            raise ParseError(f"line {toks[pos + 1][0]}: bad PBM dimensions") from exc
        pos += 3
        # Plain PBM allows pixels without separating whitespace.
        pixels: list[int] = []
        while len(pixels) < w * h:
            if pos >= len(toks):
                raise ParseError(f"line {lineno}: PBM image needs {w * h} pixels, found {len(pixels)}")
            ln, tok = toks[pos]
            for ch in tok:
                if ch not in "01":
                    raise ParseError(f"line {ln}: non-binary PBM value {tok!r}")
                pixels.append(int(ch))
            pos += 1
        if len(pixels) != w * h:
            raise ParseError(f"line {ln}: too many pixels in PBM image")
        images.append(np.array(pixels, dtype=np.uint8).reshape(h, w))
    if not images:
        raise ParseError("line 1: no PBM image found")
    return _stack(images)


def read_csv_images(text: str) -> np.ndarray:
    """Rows of comma-separated 0/1 values; blank lines separate images."""
    images, rows = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line:
            if rows:
                images.append(rows)
                rows = []
            continue
        vals = [v.strip() for v in line.split(",")]
        if any(v not in ("0", "1") for v in vals):
            raise ParseError(f"line {lineno}: non-binary CSV value in {line!r}")
        if rows and len(vals) != len(rows[0]):
            raise ParseError(f"line {lineno}: row has {len(vals)} values, expected {len(rows[0])}")
        rows.append([int(v) for v in vals])
    if rows:
        images.append(rows)
    if not images:
        raise ParseError("line 1: no CSV image found")
    return _stack([np.array(im, dtype=np.uint8) for im in images])


def _stack(images) -> np.ndarray:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ParseError(f"images have differing dimensions {sorted(shapes)}")
    return np.stack(images)


def load_images(path, format: str | None = None, binarize_threshold: float | None = None) -> ImageSet:
    """Read binary images from an IDX, plain PBM or CSV file.

    IDX pixels are grayscale bytes and become 1 where ``pixel / 255``
    exceeds ``binarize_threshold``, which must be given for IDX input.
    PBM and CSV inputs must already be binary.
    """
    path = os.fspath(path)
    format = format or _guess_format(path)
    if format == "idx":
        if binarize_threshold is None:
            raise InvalidArgument("IDX input needs an explicit binarization threshold")
        with open(path, "rb") as fh:
            raw = read_idx(fh.read())
        if raw.ndim == 2:
            raw = raw[None]
        if raw.ndim != 3:
            raise ParseError(f"IDX tensor has {raw.ndim} dimensions, expected 3 for images")
        images = (raw.astype(np.float64) / 255.0 > binarize_threshold).astype(np.uint8)
    elif format == "pbm":
        with open(path) as fh:
            images = read_pbm(fh.read())
    elif format == "csv":
        with open(path) as fh:
            images = read_csv_images(fh.read())
    else:
        raise InvalidArgument(f"unknown image format {format!r}")
    return ImageSet(images, label=os.path.basename(path))


def _guess_format(path: str) -> str:
    name = path.lower().removesuffix(".gz")
    if name.endswith((".pbm", ".pnm")):
        return "pbm"
    if name.endswith(".csv"):
        return "csv"
    if name.endswith((".idx", "-ubyte", ".idx3-ubyte")) or "idx" in os.path.basename(name):
        return "idx"
    raise InvalidArgument(f"cannot infer image format of {path!r}; pass it explicitly")


def images_to_csv(images: np.ndarray) -> str:
    return "\n".join("\n".join(",".join(str(int(v)) for v in row) for row in im) + "\n" for im in images)


# -- corruption and synthetic data --------------------------------------------


def corrupt(images: ImageSet, rate: float, seed: int, always_flip: bool = False) -> ImageSet:
    """Replace each pixel, with probability ``rate``, by a uniform random bit.

    The effective flip probability is ``rate / 2``. With ``always_flip`` a
    selected pixel is inverted instead.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidArgument("rate must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = images.images.shape
    hit = rng.random(shape) < rate
    coin = (rng.random(shape) < 0.5).astype(np.uint8)
    replacement = 1 - images.images if always_flip else coin
    out = np.where(hit, replacement, images.images).astype(np.uint8)
    return ImageSet(out, label=f"{images.label}+noise{rate:g}", seed=seed)


def synthetic_shapes(n: int, height: int = 8, width: int = 8, seed: int = 0) -> ImageSet:
    """Seeded binary images of rectangles, bars, crosses and discs."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = np.zeros((n, height, width), dtype=np.uint8)
    rr, cc = np.mgrid[0:height, 0:width]
    for k in range(n):
        kind = int(rng.random() * 4)
        r0, c0 = int(rng.random() * (height - 2)), int(rng.random() * (width - 2))
        r1 = r0 + 2 + int(rng.random() * (height - r0 - 1))
        c1 = c0 + 2 + int(rng.random() * (width - c0 - 1))
        img = out[k]
        if kind == 0:
            img[r0:r1, c0:c1] = 1
        elif kind == 1:
            img[r0:r1, c0:c1] = 1
            img[r0 + 1 : r1 - 1, c0 + 1 : c1 - 1] = 0
        elif kind == 2:
            rc, ccn = (r0 + r1) // 2, (c0 + c1) // 2
            img[rc, c0:c1] = 1
            img[r0:r1, ccn] = 1
        else:
            cy, cx = (r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0
            rad = max(1.0, min(r1 - r0, c1 - c0) / 2.0)
            img[(rr - cy) ** 2 + (cc - cx) ** 2 <= rad**2] = 1
    return ImageSet(out, label=f"shapes{height}x{width}", seed=seed)


def make_samples(clean: ImageSet, noisy: ImageSet) -> list[Sample]:
    if clean.images.shape != noisy.images.shape:
        raise InvalidArgument("clean and noisy sets differ in shape")
    return [Sample(c.ravel(), n.ravel()) for c, n in zip(clean.images, noisy.images)]


# -- experiment ---------------------------------------------------------------


@dataclass
class ExperimentReport:
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    beliefs: dict[str, np.ndarray] = field(default_factory=dict)  # method -> (N, H, W) b(x_i = 1)
    params: dict[str, ParameterSet] = field(default_factory=dict)
    traces: dict[str, TrainTrace] = field(default_factory=dict)

    def metrics(self, method: str) -> dict[str, float]:
        for name, m in self.rows:
            if name == method:
                return m
        raise KeyError(method)


def _belief_images(graph, beliefs, shape) -> np.ndarray:
    starts = np.array([graph.offsets[graph.singleton_of[i]] for i in range(graph.num_hidden)])
    return np.stack([b[starts + 1].reshape(shape) for b in beliefs])


def run_experiment(
    train_set: ImageSet,
    test_set: ImageSet,
    noise_rate: float,
    loss_kinds=("log", "quad"),
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    always_flip: bool = False,
) -> ExperimentReport:
    """Corrupt, train one model per loss, and evaluate on both sets.

    Method labels are ``initial``, ``L_log`` and ``L_quad``, each suffixed
    by ``/train`` or ``/test``.
    """
    if len(train_set) == 0 or len(test_set) == 0:
        raise InvalidArgument("train and test sets must be nonempty")
    if train_set.shape != test_set.shape:
        raise InvalidArgument("train and test images differ in size")
    if isinstance(loss_kinds, str):
        loss_kinds = (loss_kinds,)
    shape = train_set.shape
    graph = build_grid_model(*shape)
    system = build_constraints(graph)
    splits = {
        "train": make_samples(train_set, corrupt(train_set, noise_rate, 2 * seed, always_flip)),
        "test": make_samples(test_set, corrupt(test_set, noise_rate, 2 * seed + 1, always_flip)),
    }
    report = ExperimentReport(
        metadata={
            "seed": seed,
            "noise_rate": noise_rate,
            "always_flip": always_flip,
            "height": shape[0],
            "width": shape[1],
            "n_train": len(train_set),
            "n_test": len(test_set),
            "train_label": train_set.label,
            "test_label": test_set.label,
            **{f"config.{k}": v for k, v in asdict(config).items() if k not in ("loss", "workers")},
        }
    )
    models = {"initial": init_parameters(graph)}
    for kind in loss_kinds:
        t0 = time.perf_counter()
        cfg = TrainConfig(**{**asdict(config), "loss": kind})
        params, trace = train(splits["train"], graph, system, cfg)
        log.info("trained L_%s in %.1fs", kind, time.perf_counter() - t0)
        models[f"L_{kind}"] = params
        report.params[f"L_{kind}"] = params
        report.traces[f"L_{kind}"] = trace
    for split in ("train", "test"):
        for name, params in models.items():
            beliefs = infer_all(splits[split], graph, system, params, config.inner_tol)
            method = f"{name}/{split}"
            report.rows.append((method, metrics_from_beliefs(graph, beliefs, splits[split])))
            report.beliefs[method] = _belief_images(graph, beliefs, shape)
    return report


def report_to_csv(report: ExperimentReport) -> str:
    out = io.StringIO()
    for key in sorted(report.metadata):
        out.write(f"# {key}={report.metadata[key]}\n")
    out.write("method," + ",".join(METRIC_COLUMNS) + "\n")
    for method, m in report.rows:
        out.write(method + "," + ",".join(f"{m[c]:.17g}" for c in METRIC_COLUMNS) + "\n")
    return out.getvalue()


def beliefs_to_csv(beliefs: dict[str, np.ndarray]) -> str:
    """Grayscale belief maps ``b(x_i = 1)``, one block of rows per image."""
    out = io.StringIO()
    for method, stack in beliefs.items():
        for k, img in enumerate(stack):
            out.write(f"# method={method} image={k}\n")
            for row in img:
                out.write(",".join(f"{v:.17g}" for v in row) + "\n")
            out.write("\n")
    return out.getvalue()


def emit_report(report: ExperimentReport, path, beliefs_path=None) -> None:
    """Write the metrics CSV and, next to it, the belief dump."""
    path = os.fspath(path)
    atomic_write_text(path, report_to_csv(report))
    if beliefs_path is None:
        root, ext = os.path.splitext(path)
        beliefs_path = f"{root}.beliefs{ext or '.csv'}"
    atomic_write_text(beliefs_path, beliefs_to_csv(report.beliefs))


def read_report(path) -> tuple[list[tuple[str, dict[str, float]]], dict[str, str]]:
    rows, meta = [], {}
    with open(path) as fh:
        body = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                body.append(line)
    for rec in csv.DictReader(body):
        rows.append((rec["method"], {c: float(rec[c]) for c in METRIC_COLUMNS}))
    return rows, meta
