"""cGAN training: losses, Adam, LR schedule, augmentation, sagittal slicing,
cross-validation folds, the per-fold loop and volume synthesis."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .nn import Discriminator, Generator
from .volume import HU_MAX, HU_MIN, Volume3D, require_same_grid

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "g_loss", "d_loss", "l1_term", "val_l1", "lr"]


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr0: float = 0.0002
    lr_hold_epochs: int = 400
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_l1: float = 100.0
    max_shift: int = 8
    seed: int = 0
    gan_mode: str = "bce"  # or "lsgan"
    # None = one pass over the training slices per epoch
    batches_per_epoch: int | None = None
    # None = every tissue slice of the validation volumes
    val_max_slices: int | None = None
    tissue_hu: float = -200.0

    def __post_init__(self):
        for name in ("batch_size", "lr0", "beta1", "beta2", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr_hold_epochs < 0 or self.max_shift < 0 or self.lambda_l1 < 0:
            raise ValueError("epochs, lr_hold_epochs, max_shift and lambda_l1 must be >= 0")
        if self.lr_hold_epochs > self.epochs:
            raise ValueError("lr_hold_epochs cannot exceed epochs")
        if self.gan_mode not in ("bce", "lsgan"):
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` for the hold period, then linear decay to 0 at ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.lr_hold_epochs:
        return cfg.lr0
    if epoch >= cfg.epochs:
        return 0.0
    return cfg.lr0 * ((cfg.epochs - epoch) / (cfg.epochs - cfg.lr_hold_epochs))


# -- Adam ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              cfg: TrainConfig) -> tuple[dict, OptimizerState]:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place and returns both."""
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    return params, state


# -- losses -----------------------------------------------------------------------

def _bce(z, target):
    """Per-pixel sigmoid cross-entropy on logits and its derivative."""
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    grad = 1.0 / (1.0 + np.exp(-z)) - target
    return loss, grad


def _lsq(z, target):
    d = z - target
    return d * d, 2.0 * d


def adversarial(z, target, mode="bce"):
    """Mean adversarial loss against a constant target and its gradient w.r.t. ``z``."""
    loss, grad = (_bce if mode == "bce" else _lsq)(z.astype(np.float64), float(target))
    return float(loss.mean()), (grad / z.size).astype(z.dtype)


def gan_losses(d_real, d_fake, g_output, ct_target, lambda_l1, mode="bce"):
    """Returns ``(g_loss, d_loss, l1_term)``."""
    for a in (d_real, d_fake, g_output, ct_target):
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite input to gan_losses")
    real, _ = adversarial(d_real, 1.0, mode)
    fake, _ = adversarial(d_fake, 0.0, mode)
    gen, _ = adversarial(d_fake, 1.0, mode)
    l1 = float(np.abs(g_output.astype(np.float64) - ct_target).mean())
    return gen + lambda_l1 * l1, 0.5 * (real + fake), l1


def l1_grad(g_output, ct_target):
    return (np.sign(g_output - ct_target) / g_output.size).astype(g_output.dtype)


# -- intensity normalisation and slicing ----------------------------------------------

def ct_normalize(hu):
    return np.clip((np.asarray(hu, dtype=np.float64) + 1000.0) / 2000.0, 0.0, 2.0)


def ct_denormalize(x):
    return np.asarray(x, dtype=np.float64) * 2000.0 - 1000.0


def mr_scale(vol: Volume3D) -> float:
    p99 = float(np.percentile(vol.values, 99))
    if p99 <= 0:
        raise ValueError("MR volume has no positive intensity")
    return p99


def mr_normalize(values, scale):
    return np.clip(np.asarray(values, dtype=np.float64) / scale, 0.0, 2.0)


@dataclass
class SliceSet:
    """Sagittal slices of one subject: mr (N, 3, ny, nz), ct (N, 1, ny, nz), normalised."""

    mr: np.ndarray
    ct: np.ndarray | None
    mr_scales: tuple
    tissue: np.ndarray  # per-slice flag: any CT voxel above the tissue threshold

    def __len__(self):
        return len(self.mr)


def mr_slices(mr: list[Volume3D]) -> tuple[np.ndarray, tuple]:
    if len(mr) != 3:
        raise ValueError(f"expected 3 MR echoes, got {len(mr)}")
    require_same_grid(*mr)
    scales = tuple(mr_scale(e) for e in mr)
    stack = np.stack([mr_normalize(e.values, s) for e, s in zip(mr, scales)], axis=1)
    return stack.astype(np.float32), scales


def extract_sagittal_slices(mr: list[Volume3D], ct: Volume3D, tissue_hu: float = -200.0) -> SliceSet:
    """One paired sample per x index: 3-channel MR and 1-channel CT, each (ny, nz)."""
    require_same_grid(*mr, ct)
    mr_arr, scales = mr_slices(mr)
    ct_arr = ct_normalize(ct.values)[:, None].astype(np.float32)
    tissue = (ct.values > tissue_hu).reshape(ct.dims[0], -1).any(axis=1)
    return SliceSet(mr_arr, ct_arr, scales, tissue)


# -- augmentation -------------------------------------------------------------------

MR_BACKGROUND = 0.0
CT_BACKGROUND = float(ct_normalize(-1000.0))


def shift2d(img, dy, dx, fill):
    """Shift the last two axes by integer offsets; vacated pixels take ``fill``."""
    out = np.full_like(img, fill)
    H, W = img.shape[-2:]
    src_r = slice(max(0, -dy), min(H, H - dy))
    dst_r = slice(max(0, dy), min(H, H + dy))
    src_c = slice(max(0, -dx), min(W, W - dx))
    dst_c = slice(max(0, dx), min(W, W + dx))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[..., dst_r, dst_c] = img[..., src_r, src_c]
    return out


def draw_shift(rng, max_shift):
    return tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))


def augment_shift(mr_slice, ct_slice, rng, max_shift=8, shift=None):
    """Apply one random (dy, dx) in [-max_shift, max_shift]^2 to both slices."""
    if mr_slice.shape[-2:] != ct_slice.shape[-2:]:
        raise ValueError("paired slices must share spatial dims")
    dy, dx = shift if shift is not None else draw_shift(rng, max_shift)
    return (shift2d(mr_slice, dy, dx, MR_BACKGROUND),
            shift2d(ct_slice, dy, dx, CT_BACKGROUND), (dy, dx))


# -- folds ---------------------------------------------------------------------------

@dataclass
class Fold:
    train: list
    val: list
    test: list


def make_folds(ids, k: int = 3, seed: int = 0, expected: int | None = 9) -> list[Fold]:
    """Seeded k-fold plan; each fold's non-test subjects split 2:1 into train:val."""
    ids = list(ids)
    if expected is not None and len(ids) != expected:
        raise ValueError(f"expected {expected} subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if not 2 <= k <= len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} subjects")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    groups = np.array_split(np.arange(len(ids)), k)
    plan = []
    for f in range(k):
        test = [order[i] for i in groups[f]]
        rest = [order[i] for g, grp in enumerate(groups) if g != f for i in grp]
        n_val = max(1, int(round(len(rest) / 3)))
        plan.append(Fold(train=rest[n_val:], val=rest[:n_val], test=test))
    return plan


# -- training ------------------------------------------------------------------------

@dataclass
class FoldResult:
    best_params: dict
    final_params: dict
    log: list  # rows keyed by LOG_COLUMNS
    initial_val_l1: float
    best_epoch: int
    best_val_l1: float


def _batches(rng, n, batch_size):
    """Endless stream of index batches drawn from successive permutations."""
    pool = []
    while True:
        while len(pool) < batch_size:
            pool.extend(rng.permutation(n).tolist())
        yield pool[:batch_size]
        del pool[:batch_size]


def generator_forward_batched(net: Generator, params, mr, chunk=8):
    out = [net.forward(params, mr[i:i + chunk]) for i in range(0, len(mr), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 1) + mr.shape[2:], dtype=mr.dtype)


def validation_l1(net, params, mr, ct) -> float:
    if len(mr) == 0:
        return float("nan")
    pred = generator_forward_batched(net, params, mr)
    return float(np.abs(pred.astype(np.float64) - ct).mean())


def discriminator_grads(dnet, dparams, mr, ct, fake, mode="bce"):
    real_in = np.concatenate([mr, ct], axis=1)
    fake_in = np.concatenate([mr, fake], axis=1)
    logits = dnet.forward(dparams, np.concatenate([real_in, fake_in]))
    n = len(mr)
    lr_, gr = adversarial(logits[:n], 1.0, mode)
    lf, gf = adversarial(logits[n:], 0.0, mode)
    grads, _ = dnet.backward(dparams, 0.5 * np.concatenate([gr, gf]))
    return grads, 0.5 * (lr_ + lf)


def generator_grads(gnet, dnet, gparams, dparams, mr, ct, lambda_l1, mode="bce", fake=None):
    """Generator gradients with the discriminator held fixed.

    Returns ``(grads, g_loss, l1_term, fake)``. Pass ``fake`` to reuse a forward
    pass already held in ``gnet``'s caches.
    """
    if fake is None:
        fake = gnet.forward(gparams, mr)
    logits = dnet.forward(dparams, np.concatenate([mr, fake], axis=1))
    adv, dlogits = adversarial(logits, 1.0, mode)
    _, dx = dnet.backward(dparams, dlogits, need_grads=False, need_dx=True)
    dfake = dx[:, 3:4]
    l1 = float(np.abs(fake.astype(np.float64) - ct).mean())
    if lambda_l1:
        dfake = dfake + lambda_l1 * l1_grad(fake, ct)
    grads, _ = gnet.backward(gparams, dfake)
    return grads, adv + lambda_l1 * l1, l1, fake


def _stack(sets, attr, mask_attr="tissue"):
    parts = [getattr(s, attr)[getattr(s, mask_attr)] for s in sets]
    return np.concatenate(parts) if parts else None


def _val_subset(mr, ct, limit):
    if limit is None or len(mr) <= limit:
        return mr, ct
    idx = np.linspace(0, len(mr) - 1, limit).round().astype(int)
    return mr[idx], ct[idx]


def train_fold(train_sets: list[SliceSet], val_sets: list[SliceSet], cfg: TrainConfig,
               gnet: Generator | None = None, dnet: Discriminator | None = None,
               progress=None) -> FoldResult:
    """Alternating D/G updates on shuffled batches of augmented tissue slices.

    Keeps the generator with the lowest validation L1 (normalised units) and
    the final one. ``progress`` is called with each finished log row.
    """
    gnet = gnet or Generator()
    dnet = dnet or Discriminator()
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    gparams = gnet.init_params(init_rng)
    dparams = dnet.init_params(init_rng)

    mr_tr, ct_tr = _stack(train_sets, "mr"), _stack(train_sets, "ct")
    mr_val, ct_val = _val_subset(_stack(val_sets, "mr"), _stack(val_sets, "ct"), cfg.val_max_slices)
    initial = validation_l1(gnet, gparams, mr_val, ct_val)
    best = dict(params={k: v.copy() for k, v in gparams.items()}, epoch=-1, val=initial)
    rows = []
    if cfg.epochs == 0:
        return FoldResult(best["params"], gparams, rows, initial, -1, initial)
    if mr_tr is None or len(mr_tr) == 0:
        raise ValueError("no training slices contain tissue")

    n = len(mr_tr)
    per_epoch = cfg.batches_per_epoch or int(np.ceil(n / cfg.batch_size))
    stream = _batches(data_rng, n, cfg.batch_size)
    gstate, dstate = OptimizerState(), OptimizerState()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        sums = np.zeros(3)
        for b in range(per_epoch):
            idx = next(stream)
            pairs = [augment_shift(mr_tr[i], ct_tr[i], data_rng, cfg.max_shift) for i in idx]
            mr = np.stack([p[0] for p in pairs])
            ct = np.stack([p[1] for p in pairs])

            fake = gnet.forward(gparams, mr)
            dgrads, d_loss = discriminator_grads(dnet, dparams, mr, ct, fake, cfg.gan_mode)
            adam_step(dparams, dgrads, dstate, lr, cfg)
            ggrads, g_loss, l1, _ = generator_grads(gnet, dnet, gparams, dparams, mr, ct,
                                                    cfg.lambda_l1, cfg.gan_mode, fake=fake)
            adam_step(gparams, ggrads, gstate, lr, cfg)
            if not (np.isfinite(g_loss) and np.isfinite(d_loss)):
                raise NumericalError(f"non-finite loss at epoch {epoch} batch {b}, slices {idx}")
            sums += (g_loss, d_loss, l1)
        val = validation_l1(gnet, gparams, mr_val, ct_val)
        row = dict(zip(LOG_COLUMNS, [epoch, *(sums / per_epoch), val, lr]))
        rows.append(row)
        if progress:
            progress(row)
        if val < best["val"]:
            best = dict(params={k: v.copy() for k, v in gparams.items()}, epoch=epoch, val=val)
    return FoldResult(best["params"], gparams, rows, initial, best["epoch"], best["val"])


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


# -- synthesis -------------------------------------------------------------------------

def synthesize_slices(gnet: Generator, params, mr_arr: np.ndarray, chunk=8) -> np.ndarray:
    """Generator output for normalised MR slices, zero-padded up to the divisor."""
    N, _, H, W = mr_arr.shape
    d = gnet.divisor
    ph, pw = -H % d, -W % d
    x = np.pad(mr_arr, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=MR_BACKGROUND)
    return generator_forward_batched(gnet, params, x, chunk)[:, :, :H, :W]


def synthesize_volume(params, mr: list[Volume3D], gnet: Generator | None = None) -> Volume3D:
    """Slice-wise inference reassembled on the MR grid, in HU."""
    gnet = gnet or Generator()
    shapes = gnet.param_shapes()
    if set(params) != set(shapes) or any(params[k].shape != shapes[k] for k in shapes):
        raise ValueError("checkpoint does not match the generator architecture")
    mr_arr, _ = mr_slices(mr)
    out = synthesize_slices(gnet, params, mr_arr)
    hu = np.clip(ct_denormalize(out[:, 0]), HU_MIN, HU_MAX)
    g = mr[0].grid
    return Volume3D(hu, g.spacing, g.origin, "HU")
