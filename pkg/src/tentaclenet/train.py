"""End-to-end training with straight-through gradients and a plateau LR schedule.

The training graph runs in float32 with +-1 values standing in for bits;
``TentacleNetModel.finalize`` then packs everything for the XNOR path.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .bitcore import window_view
from .layers import network_forward, softmax

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 0.01
    factor: float = 0.1
    patience: int = 15
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    gamma_clamp: float = 1e-8
    momentum: float = 0.9
    tol: float = 1e-4
    bn_momentum: float = 0.1
    bn_recalibrate: bool = True

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("decay factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class LRScheduler:
    """Multiply the lr by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    patience: int = 15
    factor: float = 0.1
    tol: float = 1e-4
    best: float = float("inf")
    counter: int = 0

    def step(self, val_loss: float) -> LRScheduler:
        if not np.isfinite(val_loss):
            raise DivergenceError(f"validation loss is {val_loss}")
        if val_loss < self.best - self.tol:
            self.best = float(val_loss)
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.counter = 0
        return self


def lr_step(s: LRScheduler, val_loss: float) -> LRScheduler:
    return s.step(val_loss)


def ste_backward(upstream, pre_binarization) -> np.ndarray:
    """Hard-clip straight-through gradient of sign()."""
    g = np.asarray(upstream)
    x = np.asarray(pre_binarization)
    if g.shape != x.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {x.shape}")
    return np.where(np.abs(x) <= 1, g, 0).astype(g.dtype)


def cross_entropy_loss(logits, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} out of range")
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[label])


def _ce_batch(logits: np.ndarray, y: np.ndarray):
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(y)), y]))
    grad = softmax(z, axis=1)
    grad[np.arange(len(y)), y] -= 1
    return loss, (grad / len(y)).astype(np.float32)


def sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.float32(1), np.float32(-1))


# -- graph pieces: each forward returns (out, cache), each backward takes the cache


def conv_fwd(x, w, stride, pad, fill):
    f = w.shape[0]
    cols, ho, wo = window_view(x, w.shape[2], w.shape[3], stride, pad, fill)
    out = (cols @ w.reshape(f, -1).T).reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, w, stride, pad, ho, wo)


def conv_bwd(dout, cache, need_dx=True):
    cols, xshape, w, stride, pad, ho, wo = cache
    b, c, h, wd = xshape
    f, _, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (d2 @ w.reshape(f, -1)).reshape(b, ho, wo, c, kh, kw)
    dx = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, dw


def bn_fwd(x, bn, training, momentum, stats=None):
    eps = np.float32(bn.eps)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if stats is not None:
            stats.append((mean, var))
        if momentum:
            bn.mu = ((1 - momentum) * bn.mu + momentum * mean).astype(np.float32)
            bn.var = ((1 - momentum) * bn.var + momentum * var).astype(np.float32)
    else:
        mean, var = bn.mu, bn.var
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = bn.gamma[None, :, None, None] * xhat + bn.beta[None, :, None, None]
    return out.astype(np.float32), (xhat, inv, bn.gamma)


def bn_bwd(dout, cache):
    xhat, inv, gamma = cache
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dx = (
        inv[None, :, None, None]
        / m
        * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
    )
    return dx.astype(np.float32), dgamma, dbeta


def maxpool_fwd(x, k):
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    v = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(b, c, ho, wo, k * k)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, k)


def maxpool_bwd(dout, cache):
    (b, c, h, w), idx, k = cache
    ho, wo = dout.shape[2], dout.shape[3]
    g = np.zeros((b, c, ho, wo, k * k), dtype=np.float32)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
    dx = np.zeros((b, c, h, w), dtype=np.float32)
    dx[:, :, : ho * k, : wo * k] = g
    return dx


def binary_weights(master: np.ndarray):
    """sign(W) and per-filter alpha = mean |W|."""
    f = master.shape[0]
    alpha = np.abs(master).reshape(f, -1).mean(axis=1).astype(np.float32)
    return sign(master), alpha


def _act_fwd(y, binary):
    if binary:
        return sign(y), y
    return np.maximum(y, 0), y


def _act_bwd(d, pre, binary):
    if binary:
        return ste_backward(d, pre)
    return np.where(pre > 0, d, 0).astype(np.float32)


def forward(model, x: np.ndarray, training: bool, momentum: float = 0.1, stats=None):
    """Float forward of the whole network; returns logits and a backward cache."""
    binary = model.binary
    fill = -1.0 if binary else 0.0
    sh = model.shared
    z, c_conv = conv_fwd(x, sh.conv.weight, sh.conv.stride, sh.conv.pad, 0.0)
    z = z + sh.conv.bias[None, :, None, None]
    y, c_bn = bn_fwd(z, sh.bn, training, momentum, stats)
    a, pre = _act_fwd(y, binary)
    c_pool = None
    if sh.pool:
        a, c_pool = maxpool_fwd(a, sh.pool)
    shared_cache = (c_conv, c_bn, pre, c_pool)

    feats, tcaches = [], []
    for tentacle in model.tentacles:
        h = a
        lcaches = []
        for layer in tentacle:
            if binary:
                wb, alpha = binary_weights(layer.master)
            else:
                wb, alpha = layer.master, np.ones(layer.out_channels, np.float32)
            zc, c_conv = conv_fwd(h, wb, layer.stride, layer.pad, fill)
            z = zc * alpha[None, :, None, None]
            y, c_bn = bn_fwd(z, layer.bn, training, momentum, stats)
            if layer.binact:
                out, pre = _act_fwd(y, binary)
            else:
                out, pre = y, None
            c_pool = None
            if layer.pool:
                out, c_pool = maxpool_fwd(out, layer.pool)
            lcaches.append((c_conv, alpha, c_bn, pre, c_pool))
            h = out
        hshape = h.shape
        if model.spec.head_kind == "global_pool":
            f = h.mean(axis=(2, 3))
        else:
            f = h.reshape(h.shape[0], -1)
        feats.append(f)
        tcaches.append((lcaches, hshape))
    fin = np.concatenate(feats, axis=1)
    logits = fin @ model.fc.weight.T + model.fc.bias
    return logits, (x, shared_cache, tcaches, fin)


def backward(model, dlogits: np.ndarray, cache) -> list[np.ndarray]:
    """Gradients in the order of ``parameters(model)``."""
    binary = model.binary
    x, (c_conv0, c_bn0, pre0, c_pool0), tcaches, fin = cache
    g_fc_w = dlogits.T @ fin
    g_fc_b = dlogits.sum(axis=0)
    dfin = dlogits @ model.fc.weight
    width = model.spec.features

    tgrads = []
    da_shared = None
    for ti, (tentacle, (lcaches, hshape)) in enumerate(zip(model.tentacles, tcaches)):
        df = dfin[:, ti * width : (ti + 1) * width]
        if model.spec.head_kind == "global_pool":
            dh = np.broadcast_to(
                (df / (hshape[2] * hshape[3]))[:, :, None, None], hshape
            ).astype(np.float32)
        else:
            dh = df.reshape(hshape)
        grads = []
        for layer, (c_conv, alpha, c_bn, pre, c_pool) in zip(reversed(tentacle), reversed(lcaches)):
            if c_pool is not None:
                dh = maxpool_bwd(dh, c_pool)
            if pre is not None:
                dh = _act_bwd(dh, pre, binary)
            dz, dgamma, dbeta = bn_bwd(dh, c_bn)
            dzc = dz * alpha[None, :, None, None]
            dh, dwb = conv_bwd(dzc, c_conv)
            if binary:
                dw = ste_backward(dwb, layer.master)
            else:
                dw = dwb
            grads.append((dw, dgamma, dbeta))
        tgrads.append(list(reversed(grads)))
        da_shared = dh if da_shared is None else da_shared + dh

    if c_pool0 is not None:
        da_shared = maxpool_bwd(da_shared, c_pool0)
    dy = _act_bwd(da_shared, pre0, binary)
    dz0, dg0, db0 = bn_bwd(dy, c_bn0)
    _, dw0 = conv_bwd(dz0, c_conv0, need_dx=False)
    dbias0 = dz0.sum(axis=(0, 2, 3))

    out = [dw0, dbias0, dg0, db0]
    for grads in tgrads:
        for dw, dg, db in grads:
            out += [dw, dg, db]
    out += [g_fc_w, g_fc_b]
    return out


def _params(model):
    """(owner, attribute) pairs for every trainable array, in a fixed order."""
    sh = model.shared
    refs = [(sh.conv, "weight"), (sh.conv, "bias"), (sh.bn, "gamma"), (sh.bn, "beta")]
    for tentacle in model.tentacles:
        for layer in tentacle:
            refs += [(layer, "master"), (layer.bn, "gamma"), (layer.bn, "beta")]
    refs += [(model.fc, "weight"), (model.fc, "bias")]
    return refs


def parameters(model) -> list[np.ndarray]:
    return [getattr(o, a) for o, a in _params(model)]


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path) -> None:
        cols = ["epoch", "lr", "train_loss", "val_loss", "val_acc"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _batchnorms(model):
    return [model.shared.bn] + [layer.bn for t in model.tentacles for layer in t]


def recalibrate_bn(model, x, batch_size: int = 256) -> None:
    """Replace running statistics by the average batch statistics over ``x``.

    Weights stay frozen and every layer normalises with batch statistics, as
    in training, so the recorded averages match what the weights were fit to.
    """
    bns = _batchnorms(model)
    sums = [np.zeros((2, bn.channels), np.float64) for bn in bns]
    for s in range(0, len(x), batch_size):
        xb = x[s : s + batch_size]
        stats = []
        forward(model, xb, training=True, momentum=0.0, stats=stats)
        for acc, (m, v) in zip(sums, stats):
            acc[0] += m * len(xb)
            acc[1] += v * len(xb)
    for bn, acc in zip(bns, sums):
        bn.mu = (acc[0] / len(x)).astype(np.float32)
        bn.var = (acc[1] / len(x)).astype(np.float32)


def _eval_float(model, x, y, batch_size=256):
    losses, correct = [], 0
    for s in range(0, len(x), batch_size):
        logits, _ = forward(model, x[s : s + batch_size], training=False)
        loss, _ = _ce_batch(logits, y[s : s + batch_size])
        losses.append(loss * len(logits))
        correct += int((logits.argmax(axis=1) == y[s : s + batch_size]).sum())
    return float(sum(losses) / len(x)), 100.0 * correct / len(x)


def split_validation(x, y, fraction, rng):
    perm = rng.permutation(len(x))
    n_val = int(round(len(x) * fraction))
    if n_val == 0 or n_val >= len(x):
        return x, y, None, None
    tr, va = perm[:-n_val], perm[-n_val:]
    return x[tr], y[tr], x[va], y[va]


def train(model, x, y, cfg: TrainConfig, x_val=None, y_val=None, callback=None, on_step=None):
    """Train every block jointly; returns (finalized model, History).

    Without an explicit validation set, the last ``val_fraction`` of a seeded
    shuffle of the training data is held out. ``callback`` receives each
    history row, ``on_step`` the model after every optimizer step.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    history = History()
    if cfg.epochs == 0:
        return model.finalize(), history
    rng = np.random.default_rng(cfg.seed)
    if x_val is None:
        x, y, x_val, y_val = split_validation(x, y, cfg.val_fraction, rng)
    refs = _params(model)
    velocity = [np.zeros_like(getattr(o, a)) for o, a in refs]
    sched = LRScheduler(cfg.lr, cfg.patience, cfg.factor, cfg.tol)
    model.finalized = False

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            logits, cache = forward(model, x[idx], training=True, momentum=cfg.bn_momentum)
            loss, dlogits = _ce_batch(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            grads = backward(model, dlogits, cache)
            for (owner, attr), g, v in zip(refs, grads, velocity):
                v *= cfg.momentum
                v += g
                p = getattr(owner, attr) - np.float32(sched.lr) * v
                if model.binary and attr == "master":
                    p = np.clip(p, -1.0, 1.0)
                elif attr == "gamma":
                    p = np.where(np.abs(p) < cfg.gamma_clamp, np.copysign(cfg.gamma_clamp, p), p)
                setattr(owner, attr, p.astype(np.float32))
            if on_step is not None:
                on_step(model)
        train_loss = total / len(x)
        if cfg.bn_recalibrate:
            recalibrate_bn(model, x)
        if x_val is not None and len(x_val):
            val_loss, val_acc = _eval_float(model, x_val, y_val)
        else:
            val_loss, val_acc = train_loss, float("nan")
        row = {
            "epoch": epoch + 1,
            "lr": sched.lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        history.rows.append(row)
        log.debug("epoch %d lr %.3g train %.4f val %.4f acc %.2f", *row.values())
        if callback is not None:
            callback(row)
        sched.step(val_loss)
    return model.finalize(), history


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    per_class: dict[int, float]
    confusion: np.ndarray


def predict_logits(model, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return np.concatenate(
        [network_forward(model, x[s : s + batch_size]) for s in range(0, len(x), batch_size)]
    )


def evaluate(model, x, y, batch_size: int = 256) -> EvalResult:
    """Accuracy (%), mean cross-entropy and per-class accuracy on the inference path."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty dataset")
    logits = predict_logits(model, x, batch_size)
    loss, _ = _ce_batch(logits, y)
    pred = logits.argmax(axis=1)
    c = logits.shape[1]
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    per_class = {
        k: 100.0 * confusion[k, k] / confusion[k].sum() for k in range(c) if confusion[k].sum()
    }
    return EvalResult(100.0 * np.trace(confusion) / len(y), loss, per_class, confusion)
