"""X-conv descriptor network: forward pass, parameters, and persistence.

Each of the four X-conv layers lifts local neighbor offsets through a
small MLP, mixes the lifted features (concatenated with the neighbors'
features from the previous layer) with a learned per-point n-by-n
transform, and maps the result through a dense kernel. All input points
stay representatives at every layer; three per-point FC layers follow and
the 16-dim embedding is the average over points. A 2-way head on the
embedding scores descriptor quality.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cloud import NormalizedSegment
from .errors import NumericalBlowupError
from .validation import check_points

MODEL_MAGIC = b"ESM1"
FORMAT_VERSION = 1
QUALITY_CLASSES = 2

# (neighbors, dilation) per layer; fixed by the problem setup
DEFAULT_SCHEDULE = ((8, 1), (12, 3), (16, 3), (16, 4))
# channel widths sized to land near the 300K-parameter budget
DEFAULT_LIFT_CHANNELS = (8, 8, 16, 16)
DEFAULT_OUT_CHANNELS = (16, 32, 48, 64)
DEFAULT_FC_WIDTHS = (64, 32, 16)
DEFAULT_N_POINTS = 256


@dataclass(frozen=True)
class XConvLayerSpec:
    neighbors: int
    dilation: int
    lift_channels: int
    out_channels: int

    def __post_init__(self):
        if self.neighbors < 1 or self.dilation < 1:
            raise ValueError("neighbors and dilation must be >= 1")
        if self.lift_channels < 1 or self.out_channels < 1:
            raise ValueError("channel widths must be >= 1")

    @property
    def max_rank(self):
        return self.neighbors * self.dilation


@dataclass
class Descriptor:
    embedding: np.ndarray  # (embed_dim,)
    quality: float  # probability the descriptor retrieves a correct match

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("embedding contains non-finite values")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality must be in [0,1], got {self.quality}")


@dataclass
class DescriptorModel:
    layers: tuple[XConvLayerSpec, ...]
    fc_widths: tuple[int, ...]
    params: dict[str, np.ndarray]  # name -> float64 array, declaration order
    n_points: int = DEFAULT_N_POINTS
    dropout_rate: float = 0.5  # applied at the second FC layer, training only

    def __post_init__(self):
        max_rank = max(l.max_rank for l in self.layers) if self.layers else 0
        if max_rank > self.n_points - 1:
            raise ValueError(
                f"neighbors*dilation={max_rank} exceeds available non-self points"
            )
        expected = param_shapes(self.layers, self.fc_widths)
        got = {k: v.shape for k, v in self.params.items()}
        if got != dict(expected):
            raise ValueError("parameter dict does not match the architecture")

    @property
    def embed_dim(self):
        return self.fc_widths[-1] if self.fc_widths else 0

    @property
    def max_rank(self):
        return max(l.max_rank for l in self.layers) if self.layers else 0

    def copy(self) -> "DescriptorModel":
        return DescriptorModel(
            layers=self.layers,
            fc_widths=self.fc_widths,
            params={k: v.copy() for k, v in self.params.items()},
            n_points=self.n_points,
            dropout_rate=self.dropout_rate,
        )


def param_shapes(layers, fc_widths) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (serialization) order."""
    if not layers and not fc_widths:
        return []  # degenerate empty model: nothing to hang a head on
    shapes = []
    c_in = 0
    for i, layer in enumerate(layers):
        n, cl = layer.neighbors, layer.lift_channels
        pre = f"xconv{i}."
        shapes += [
            (pre + "lift_w1", (3, cl)),
            (pre + "lift_b1", (cl,)),
            (pre + "lift_w2", (cl, cl)),
            (pre + "lift_b2", (cl,)),
            (pre + "trans_w1", (3 * n, n * n)),
            (pre + "trans_b1", (n * n,)),
            (pre + "trans_w2", (n * n, n * n)),
            (pre + "trans_b2", (n * n,)),
            (pre + "kernel_w", (n * (cl + c_in), layer.out_channels)),
            (pre + "kernel_b", (layer.out_channels,)),
        ]
        c_in = layer.out_channels
    width = c_in
    for j, w in enumerate(fc_widths):
        shapes += [(f"fc{j}.w", (width, w)), (f"fc{j}.b", (w,))]
        width = w
    shapes += [("quality.w", (width, QUALITY_CLASSES)), ("quality.b", (QUALITY_CLASSES,))]
    return shapes


def init_model(
    seed: int = 0,
    layers=None,
    fc_widths=DEFAULT_FC_WIDTHS,
    n_points: int = DEFAULT_N_POINTS,
    dropout_rate: float = 0.5,
) -> DescriptorModel:
    """Fresh model; weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    if layers is None:
        layers = tuple(
            XConvLayerSpec(n, d, cl, co)
            for (n, d), cl, co in zip(
                DEFAULT_SCHEDULE, DEFAULT_LIFT_CHANNELS, DEFAULT_OUT_CHANNELS
            )
        )
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(layers, fc_widths):
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
        else:
            params[name] = np.zeros(shape)
    return DescriptorModel(
        layers=tuple(layers),
        fc_widths=tuple(fc_widths),
        params=params,
        n_points=n_points,
        dropout_rate=dropout_rate,
    )


def param_count(model: DescriptorModel) -> int:
    """Exact number of trainable scalars, quality head included."""
    return int(sum(p.size for p in model.params.values()))


# ------------------------------------------------------------ neighborhoods

def neighbor_order(points: np.ndarray, max_rank: int) -> np.ndarray:
    """First `max_rank` non-self neighbors of every point, canonically ordered.

    Order is by squared Euclidean distance with exact ties broken
    lexicographically by the neighbor's (x, y, z). Both keys are functions
    of coordinate values only, so the selection is invariant to input
    point order (duplicated points are interchangeable).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if max_rank > n - 1:
        raise ValueError(f"max_rank={max_rank} exceeds {n - 1} available neighbors")
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.fill_diagonal(d2, np.inf)
    lex = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    s = np.argsort(d2[:, lex], axis=1, kind="stable")[:, :max_rank]
    return lex[s].astype(np.int32)


def knn_neighborhood(points: np.ndarray, n: int, dilation: int) -> np.ndarray:
    """Dilated neighborhood: ranks dilation, 2*dilation, ..., n*dilation.

    Rank 1 is the nearest non-self neighbor; the point itself is excluded.
    """
    order = neighbor_order(points, n * dilation)
    return order[:, dilation - 1 :: dilation][:, :n]


def _layer_indices(orders: np.ndarray, layer: XConvLayerSpec) -> np.ndarray:
    d = layer.dilation
    return orders[..., d - 1 : layer.max_rank : d]


# ------------------------------------------------------------- forward pass

def xconv_layer(params, prefix, layer, local, idx, feats):
    """One X-conv application; `local` is the constant (B,P,n,3) offsets."""
    shape = local.data.shape
    b, p, n = shape[0], shape[1], shape[2]
    h = ad.elu(local @ params[prefix + "lift_w1"] + params[prefix + "lift_b1"])
    lifted = ad.elu(h @ params[prefix + "lift_w2"] + params[prefix + "lift_b2"])
    if feats is not None:
        fin = ad.concat([lifted, ad.gather_rows(feats, idx)], axis=-1)
    else:
        fin = lifted
    th = ad.elu(
        local.reshape(b, p, 3 * n) @ params[prefix + "trans_w1"]
        + params[prefix + "trans_b1"]
    )
    transform = (th @ params[prefix + "trans_w2"] + params[prefix + "trans_b2"]).reshape(
        b, p, n, n
    )
    mixed = transform @ fin
    flat = mixed.reshape(b, p, n * fin.data.shape[-1])
    return ad.elu(flat @ params[prefix + "kernel_w"] + params[prefix + "kernel_b"])


def xconv_forward(
    layer: XConvLayerSpec, weights: dict, points: np.ndarray, features=None
) -> np.ndarray:
    """Single-segment X-conv layer: (P, 3) points + (P, C_in) features -> (P, C_out).

    `weights` holds unprefixed arrays (lift_w1 ... kernel_b). The first
    layer takes features=None (coordinates only).
    """
    pts = check_points(points, "points")
    c_in = 0 if features is None else np.asarray(features).shape[-1]
    expected = layer.neighbors * (layer.lift_channels + c_in)
    if weights["kernel_w"].shape[0] != expected:
        raise ValueError(
            f"feature width {c_in} does not match kernel input {weights['kernel_w'].shape[0]}"
        )
    orders = neighbor_order(pts, layer.max_rank)[None]
    idx = _layer_indices(orders, layer)
    params = {f"x.{k}": ad.Tensor(np.asarray(v, dtype=np.float64)) for k, v in weights.items()}
    feats = None
    if features is not None:
        feats = ad.Tensor(np.asarray(features, dtype=np.float64)[None])
    local = ad.Tensor(pts[None][np.zeros((1, 1, 1), dtype=int), idx] - pts[None][:, :, None, :])
    out = xconv_layer(params, "x.", layer, local, idx, feats)
    return out.data[0]


def forward_embeddings(params, model, pts, orders, dropout_mask=None):
    """Embeddings for a batch of segments.

    params: dict name -> Tensor (grad-tracking decides train vs infer cost)
    pts: (B, P, 3) ndarray in the compute dtype
    orders: (B, P, max_rank) precomputed canonical neighbor indices
    dropout_mask: (B, 1, fc_widths[1]) inverted-dropout mask, or None
    Returns a (B, embed_dim) Tensor.
    """
    b = pts.shape[0]
    batch_ix = np.arange(b)[:, None, None]
    feats = None
    for i, layer in enumerate(model.layers):
        idx = _layer_indices(orders, layer)
        local = ad.Tensor(pts[batch_ix, idx] - pts[:, :, None, :])
        feats = xconv_layer(params, f"xconv{i}.", layer, local, idx, feats)
    x = feats
    last = len(model.fc_widths) - 1
    for j in range(len(model.fc_widths)):
        x = x @ params[f"fc{j}.w"] + params[f"fc{j}.b"]
        if j < last:
            x = ad.elu(x)
        if j == 1 and dropout_mask is not None:
            x = x * ad.Tensor(dropout_mask)
    return x.mean(axis=1)


def quality_logits(params, embeddings):
    return embeddings @ params["quality.w"] + params["quality.b"]


def quality_probability(model: DescriptorModel, embedding: np.ndarray) -> float:
    """Softmax probability of the 'good' class (index 1) for one embedding."""
    logits = embedding @ model.params["quality.w"] + model.params["quality.b"]
    logits = logits - logits.max()
    e = np.exp(logits)
    return float(e[1] / e.sum())


def make_dropout_mask(rng, batch_size, width, rate, dtype):
    """One inverted-dropout mask per segment, shared across its points."""
    keep = rng.random((batch_size, 1, width)) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def describe(
    model: DescriptorModel,
    seg: NormalizedSegment,
    mode: str = "infer",
    rng=None,
    dtype=np.float64,
) -> Descriptor:
    """Embed one normalized segment and score its quality.

    Inference is deterministic; train mode applies a dropout mask drawn
    from `rng`. Computation is float64 by default so permutation and
    translation invariance hold to tight tolerances.
    """
    if mode not in ("infer", "train"):
        raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
    pts = check_points(seg.points, "segment points")
    if pts.shape[0] != model.n_points:
        raise ValueError(f"expected {model.n_points} points, got {pts.shape[0]}")
    orders = neighbor_order(pts, model.max_rank)[None]
    params = {k: ad.Tensor(v.astype(dtype, copy=False)) for k, v in model.params.items()}
    mask = None
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        mask = make_dropout_mask(rng, 1, model.fc_widths[1], model.dropout_rate, dtype)
    emb = forward_embeddings(params, model, pts.astype(dtype)[None], orders, mask).data[0]
    if not np.all(np.isfinite(emb)):
        raise NumericalBlowupError("non-finite embedding")
    return Descriptor(
        embedding=emb.astype(np.float64), quality=quality_probability(model, emb)
    )


def describe_batch(model, segments, threads: int = 1, mode: str = "infer"):
    """Describe many segments; per-segment results are identical to describe()."""
    if threads <= 1 or len(segments) < 2:
        return [describe(model, s, mode=mode) for s in segments]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: describe(model, s, mode=mode), segments))


# -------------------------------------------------------------- persistence

def _header_words(model: DescriptorModel) -> list[int]:
    words = [FORMAT_VERSION, model.n_points, len(model.layers)]
    for l in model.layers:
        words += [l.neighbors, l.dilation, l.lift_channels, l.out_channels]
    words.append(len(model.fc_widths))
    words += list(model.fc_widths)
    words.append(QUALITY_CLASSES)
    return words


def save_model(model: DescriptorModel, path) -> None:
    """Write magic + little-endian u32 header + float64 weights, plus a JSON sidecar."""
    words = _header_words(model)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack(f"<{len(words)}I", *words))
        for name, _ in param_shapes(model.layers, model.fc_widths):
            fh.write(model.params[name].astype("<f8").tobytes())
    sidecar = {
        "format": MODEL_MAGIC.decode(),
        "version": FORMAT_VERSION,
        "n_points": model.n_points,
        "layers": [
            {
                "neighbors": l.neighbors,
                "dilation": l.dilation,
                "lift_channels": l.lift_channels,
                "out_channels": l.out_channels,
            }
            for l in model.layers
        ],
        "fc_widths": list(model.fc_widths),
        "quality_classes": QUALITY_CLASSES,
        "dropout_rate": model.dropout_rate,
        "param_count": param_count(model),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_header(fh, path):
    magic = fh.read(4)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")

    def u32():
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError(f"{path}: truncated header")
        return struct.unpack("<I", raw)[0]

    version = u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    n_points = u32()
    n_layers = u32()
    layers = tuple(
        XConvLayerSpec(u32(), u32(), u32(), u32()) for _ in range(n_layers)
    )
    fc_widths = tuple(u32() for _ in range(u32()))
    quality = u32()
    if quality != QUALITY_CLASSES:
        raise ValueError(f"{path}: unexpected quality head width {quality}")
    return n_points, layers, fc_widths


def load_model(path) -> DescriptorModel:
    with open(path, "rb") as fh:
        n_points, layers, fc_widths = _read_header(fh, path)
        params = {}
        for name, shape in param_shapes(layers, fc_widths):
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated weights at {name}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
    if trailing:
        raise ValueError(f"{path}: trailing bytes after weights")
    return DescriptorModel(
        layers=layers, fc_widths=fc_widths, params=params, n_points=n_points
    )
