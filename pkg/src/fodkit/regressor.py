"""Voxel-wise learned mapping from signal SH to FOD SH.

Models are small dense networks (a single affine layer or an MLP with ReLU
and dropout) applied independently at every voxel. Training draws random
patches of the volume, takes Adam steps on the mean squared coefficient
error and keeps the weights with the best validation loss.
"""
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import sphere_sh as shm
from .errors import (AbortedTrainingError, EmptyDatasetError, InvalidArgumentError,
                     VolumeFormatError)

N_FOD = 45
CHECKPOINT_MAGIC = b"FODKITM1"


@dataclass
class RegressionDataset:
    """Input SH volume, target FOD SH volume and the voxels that count."""
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    patch_size: int = 16

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, float)
        self.targets = np.asarray(self.targets, float)
        self.mask = np.asarray(self.mask, bool)
        if self.inputs.ndim != 4 or self.targets.ndim != 4:
            raise InvalidArgumentError("inputs and targets must be (X, Y, Z, C) arrays")
        if not (self.inputs.shape[:3] == self.targets.shape[:3] == self.mask.shape):
            raise InvalidArgumentError("inputs, targets and mask dims differ")
        if self.targets.shape[3] != N_FOD:
            raise InvalidArgumentError(f"targets need {N_FOD} coefficients")
        shm.order_from_ncoeffs(self.inputs.shape[3])
        if self.patch_size < 1:
            raise InvalidArgumentError("patch_size must be positive")

    @property
    def dims(self):
        return self.mask.shape

    @property
    def in_order(self):
        return shm.order_from_ncoeffs(self.inputs.shape[3])

    def voxels(self):
        return self.inputs[self.mask], self.targets[self.mask]


@dataclass
class ModelSpec:
    kind: str = "linear"
    hidden: tuple = ()
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("linear", "mlp"):
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        if self.kind == "linear" and self.hidden:
            raise InvalidArgumentError("a linear model has no hidden layers")
        if self.kind == "mlp" and not self.hidden:
            raise InvalidArgumentError("an mlp needs at least one hidden layer")
        if any(h < 1 for h in self.hidden):
            raise InvalidArgumentError("hidden widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``batch_mode`` "patch" takes one Adam step per sampled patch; "epoch"
    takes a single step on all patches drawn for a subject.
    """
    lr: float = 1e-4
    patches_per_subject: int = 128
    patch_size: int = 16
    batch_mode: str = "patch"
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.patches_per_subject < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("patches_per_subject and max_epochs must be >= 1")
        if self.batch_mode not in ("patch", "epoch"):
            raise InvalidArgumentError("batch_mode must be 'patch' or 'epoch'")

    def to_dict(self):
        return asdict(self)


@dataclass
class Model:
    spec: ModelSpec
    in_order: int
    params: list                 # [W0, b0, W1, b1, ...], W has shape (out, in)
    epoch: int = 0

    @property
    def n_in(self):
        return shm.n_coeffs(self.in_order)

    def copy(self):
        return Model(self.spec, self.in_order, [p.copy() for p in self.params], self.epoch)

    def layer_sizes(self):
        return [self.n_in, *self.spec.hidden, N_FOD]


def init_model(spec, in_order):
    """Glorot-uniform weights and zero biases, seeded by ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 11])
    sizes = [shm.n_coeffs(in_order), *spec.hidden, N_FOD]
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        params.append(rng.uniform(-lim, lim, size=(b, a)))
        params.append(np.zeros(b))
    return Model(spec, in_order, params)


def _check_input(model, x):
    x = np.asarray(x, float)
    if x.shape[-1] != model.n_in:
        raise InvalidArgumentError(f"input has {x.shape[-1]} coefficients, model expects {model.n_in}")
    return x


def forward(model, x, train=False, rng=None):
    """Map ``(..., R_in)`` inputs to ``(..., 45)`` outputs.

    Dropout is only active with ``train=True`` (inverted scaling).
    """
    x = _check_input(model, x)
    out, _ = _forward_cache(model, x.reshape(-1, model.n_in), train, rng)
    return out.reshape(x.shape[:-1] + (N_FOD,))


def _forward_cache(model, x, train, rng):
    h = x
    cache = []
    n_layers = len(model.params) // 2
    p = model.spec.dropout
    for i in range(n_layers):
        W, b = model.params[2 * i], model.params[2 * i + 1]
        z = h @ W.T + b
        if i == n_layers - 1:
            cache.append((h, None))
            h = z
            break
        a = np.maximum(z, 0.0)
        keep = None
        if train and p > 0:
            if rng is None:
                raise InvalidArgumentError("training-mode dropout needs an rng")
            keep = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * keep
        cache.append((h, (z > 0, keep)))
        h = a
    return h, cache


def l2_loss(pred, target):
    """Mean squared error over all voxels and coefficients."""
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape:
        raise InvalidArgumentError("pred and target shapes differ")
    if pred.size == 0:
        return 0.0
    return float(np.mean((pred - target) ** 2))


def loss_and_grads(model, x, y, train=False, rng=None):
    """L2 loss and its gradient with respect to every parameter."""
    x = _check_input(model, x).reshape(-1, model.n_in)
    y = np.asarray(y, float).reshape(-1, N_FOD)
    out, cache = _forward_cache(model, x, train, rng)
    diff = out - y
    loss = float(np.mean(diff ** 2))
    g = 2.0 * diff / diff.size
    grads = [None] * len(model.params)
    for i in range(len(cache) - 1, -1, -1):
        h, act = cache[i]
        if act is not None:
            relu_mask, keep = act
            if keep is not None:
                g = g * keep
            g = g * relu_mask
        grads[2 * i] = g.T @ h
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ model.params[2 * i]
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, state, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; returns ``state``."""
    if len(grads) != len(params):
        raise InvalidArgumentError("gradient list does not match parameters")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise InvalidArgumentError("gradient shape does not match parameter")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def _box_sums(mask, size):
    """Number of masked voxels in every clamped patch, indexed by origin."""
    c = np.pad(np.asarray(mask, np.int64), ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
    sx, sy, sz = size
    nx, ny, nz = (d - s + 1 for d, s in zip(mask.shape, size))
    x0, y0, z0 = np.ix_(np.arange(nx), np.arange(ny), np.arange(nz))
    x1, y1, z1 = x0 + sx, y0 + sy, z0 + sz
    return (c[x1, y1, z1] - c[x0, y1, z1] - c[x1, y0, z1] - c[x1, y1, z0]
            + c[x0, y0, z1] + c[x0, y1, z0] + c[x1, y0, z0] - c[x0, y0, z0])


def clamped_patch(dims, size):
    return tuple(min(int(size), int(d)) for d in dims)


def sample_patches(dataset, n=128, size=None, seed=0):
    """``n`` patch origins drawn uniformly among patches touching the mask.

    Patches larger than a volume edge are clamped to that edge.
    """
    size = dataset.patch_size if size is None else size
    psize = clamped_patch(dataset.dims, size)
    counts = _box_sums(dataset.mask, psize)
    valid = np.argwhere(counts > 0)
    if not len(valid):
        raise EmptyDatasetError("mask is empty")
    rng = np.random.default_rng([seed, 13])
    pick = rng.integers(0, len(valid), size=n)
    return [tuple(int(c) for c in valid[i]) for i in pick]


def _patch_voxels(dataset, origin, psize):
    sl = tuple(slice(o, o + s) for o, s in zip(origin, psize))
    m = dataset.mask[sl]
    return dataset.inputs[sl][m], dataset.targets[sl][m]


def evaluate(model, datasets):
    """Pooled eval-mode loss over the masked voxels of ``datasets``."""
    sq, count = 0.0, 0
    for ds in datasets:
        x, y = ds.voxels()
        if not len(x):
            continue
        d = forward(model, x) - y
        sq += float(np.sum(d ** 2))
        count += d.size
    if count == 0:
        raise EmptyDatasetError("validation data has no masked voxels")
    return sq / count


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self):
        return asdict(self)


def train(train_sets, val_sets, spec, cfg, val_loss_fn=None):
    """Train a model; returns ``(model, history)`` with best-validation weights.

    ``val_loss_fn(model, epoch)`` can replace the default validation loss.
    """
    train_sets, val_sets = list(train_sets), list(val_sets)
    if not train_sets or not val_sets:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    orders = {ds.in_order for ds in train_sets + val_sets}
    if len(orders) != 1:
        raise InvalidArgumentError("datasets disagree on the input SH order")
    model = init_model(spec, orders.pop())
    state = AdamState.zeros_like(model.params)
    hist = TrainHistory()
    best, best_loss, since = model.copy(), np.inf, 0
    drop_rng = np.random.default_rng([cfg.seed, 17])
    for epoch in range(cfg.max_epochs):
        losses = []
        for si, ds in enumerate(train_sets):
            psize = clamped_patch(ds.dims, cfg.patch_size)
            origins = sample_patches(ds, cfg.patches_per_subject, cfg.patch_size,
                                     seed=(cfg.seed * 1_000_003 + epoch) * 1009 + si)
            batches = [_patch_voxels(ds, o, psize) for o in origins]
            if cfg.batch_mode == "epoch":
                batches = [(np.concatenate([b[0] for b in batches]),
                            np.concatenate([b[1] for b in batches]))]
            for x, y in batches:
                with np.errstate(invalid="ignore", over="ignore"):
                    loss, grads = loss_and_grads(model, x, y, train=True, rng=drop_rng)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    hist.train_loss.append(float("nan"))
                    raise AbortedTrainingError(f"non-finite loss at epoch {epoch}",
                                               history=hist.to_dict())
                adam_step(model.params, state, grads, cfg.lr)
                losses.append(loss)
        model.epoch = epoch + 1
        val = val_loss_fn(model, epoch) if val_loss_fn else evaluate(model, val_sets)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(float(val))
        if not np.isfinite(val):
            raise AbortedTrainingError(f"non-finite validation loss at epoch {epoch}",
                                       history=hist.to_dict())
        if val < best_loss:
            best, best_loss, since = model.copy(), val, 0
            hist.best_epoch = epoch
        else:
            since += 1
            if since >= cfg.patience:
                hist.stopped_early = True
                break
    return best, hist


def _tile_origins(dim, window):
    if dim <= window:
        return [0]
    starts = list(range(0, dim - window + 1, window))
    if starts[-1] + window < dim:
        starts.append(dim - window)
    return starts


def predict_volume(model, inputs, mask=None, window=16):
    """Sliding-window inference; overlapping windows are averaged uniformly."""
    inputs = _check_input(model, inputs)
    dims = inputs.shape[:3]
    mask = np.ones(dims, bool) if mask is None else np.asarray(mask, bool)
    w = clamped_patch(dims, window)
    acc = np.zeros(dims + (N_FOD,))
    cnt = np.zeros(dims)
    for ox in _tile_origins(dims[0], w[0]):
        for oy in _tile_origins(dims[1], w[1]):
            for oz in _tile_origins(dims[2], w[2]):
                sl = (slice(ox, ox + w[0]), slice(oy, oy + w[1]), slice(oz, oz + w[2]))
                m = mask[sl]
                if not m.any():
                    continue
                sub = acc[sl]
                sub[m] += forward(model, inputs[sl][m])
                cnt[sl][m] += 1
    out = np.zeros_like(acc)
    hit = cnt > 0
    out[hit] = acc[hit] / cnt[hit][:, None]
    return out


def model_to_bytes(model):
    header = {
        "spec": model.spec.to_dict(),
        "in_order": model.in_order,
        "out_order": 8,
        "epoch": model.epoch,
        "shapes": [list(p.shape) for p in model.params],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb + payload


def model_from_bytes(buf):
    if buf[:8] != CHECKPOINT_MAGIC or len(buf) < 16:
        raise VolumeFormatError("not a model checkpoint")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen].decode())
        spec = ModelSpec(**{**header["spec"], "hidden": tuple(header["spec"]["hidden"])})
        shapes = [tuple(int(d) for d in s) for s in header["shapes"]]
        in_order, epoch = int(header["in_order"]), int(header.get("epoch", 0))
        if in_order < 0 or in_order % 2 or min((d for s in shapes for d in s), default=0) < 0:
            raise ValueError("negative or odd sizes")
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise VolumeFormatError(f"bad checkpoint header: {exc}") from exc
    pos = 16 + hlen
    params = []
    for s in shapes:
        n = int(np.prod(s))
        chunk = buf[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise VolumeFormatError("checkpoint payload truncated")
        params.append(np.frombuffer(chunk, dtype="<f8").astype(float).reshape(s))
        pos += 8 * n
    model = Model(spec, in_order, params, epoch)
    sizes = model.layer_sizes()
    expected = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        expected += [(b, a), (b,)]
    if [p.shape for p in params] != expected:
        raise VolumeFormatError("checkpoint shapes do not match the model spec")
    return model


def save_model(path, model):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
