"""End-to-end toy pipeline on synthetic shape scenes.

Scenes are axis-aligned rectangles and discrete circles on a background;
class identity is the shape type and the image is the class color plus
Gaussian noise, so per-pixel evidence is ambiguous and context helps. The
model is a per-pixel encoder, a boundary branch, optionally the graph
reasoning block (residual), and a per-pixel classifier. Training is SGD with
momentum, weight decay, a poly learning-rate schedule, and the sum of
per-pixel cross-entropy and boundary binary cross-entropy (both weighted 1).

Everything is a pure function of the config: dataset, init, batch order and
therefore the whole metric history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .boundary import BN_EPS, BN_MOMENTUM, extract_gt_boundary
from .reasoning import BgrConfig
from .tensor import DomainError, reshape_hw_to_nodes

EVAL_BAND_RADIUS = 2  # boundary-band accuracy looks at a neighborhood, not a line

# class colors sit ~3.3-4.5 noise sigmas apart pairwise (sigma 0.1), so the
# per-pixel Bayes error is a few percent: learnable, with headroom for
# context aggregation to clean up the residual noise errors
PALETTE = np.array(
    [
        [0.25, 0.25, 0.25],
        [0.55, 0.37, 0.20],
        [0.20, 0.53, 0.43],
        [0.58, 0.55, 0.38],
        [0.42, 0.30, 0.56],
    ]
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    h: int = 48
    w: int = 48
    num_classes: int = 3
    n_train: int = 200
    n_val: int = 50
    iters: int = 2000
    lr0: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    model: str = "bgr"  # or "baseline"
    bgr: BgrConfig = field(default_factory=BgrConfig)
    boundary_radius: int = 1
    noise_sigma: float = 0.1
    eval_interval: int = 500

    def __post_init__(self):
        for name in ("h", "w", "n_train", "n_val", "iters", "batch", "boundary_radius"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise DomainError("need at least 2 classes")
        if not 0.0 < self.poly_power <= 1.0:
            raise DomainError("poly_power must be in (0, 1]")
        if self.lr0 <= 0:
            raise DomainError("lr0 must be > 0")
        if self.model not in ("baseline", "bgr"):
            raise DomainError(f"unknown model {self.model!r}")


@dataclass(frozen=True)
class SynthSample:
    image: np.ndarray  # (h, w, 3)
    labels: np.ndarray  # (h, w) integer class ids
    boundary_target: np.ndarray | None = None  # cached supervision mask
    boundary_radius: int = 1


@dataclass
class Metrics:
    miou: float
    per_class_iou: list
    boundary_band_acc: float
    seg_loss: float
    boundary_loss: float

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "boundary_band_acc": self.boundary_band_acc,
            "seg_loss": self.seg_loss,
            "boundary_loss": self.boundary_loss,
        }


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    bn_mean: np.ndarray  # (1, m) running statistics of the boundary branch
    bn_var: np.ndarray


@dataclass
class TrainResult:
    history: list[dict]
    final: Metrics
    state: ModelState


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------


def _palette(num_classes: int) -> np.ndarray:
    reps = -(-num_classes // len(PALETTE))
    colors = np.tile(PALETTE, (reps, 1))
    for r in range(1, reps):
        colors[r * len(PALETTE) : (r + 1) * len(PALETTE)] += 0.07 * r
    return np.clip(colors[:num_classes], 0.0, 1.0)


def _paint_shape(labels: np.ndarray, cls: int, rng: np.random.Generator) -> None:
    h, w = labels.shape
    if cls % 2 == 1:  # odd class ids are rectangles, even ones circles
        sh = int(rng.integers(4, max(5, h // 2)))
        sw = int(rng.integers(4, max(5, w // 2)))
        y0 = int(rng.integers(1, max(2, h - sh)))
        x0 = int(rng.integers(1, max(2, w - sw)))
        labels[y0 : min(y0 + sh, h - 1), x0 : min(x0 + sw, w - 1)] = cls
    else:
        r = int(rng.integers(3, max(4, min(h, w) // 4)))
        cy = int(rng.integers(r + 1, max(r + 2, h - r - 1)))
        cx = int(rng.integers(r + 1, max(r + 2, w - r - 1)))
        yy, xx = np.ogrid[:h, :w]
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls


def _make_sample(cfg: TrainConfig, rng: np.random.Generator, colors: np.ndarray) -> SynthSample:
    labels = np.zeros((cfg.h, cfg.w), dtype=np.int64)
    for attempt in range(100):
        for _ in range(int(rng.integers(2, 5))):
            cls = int(rng.integers(1, cfg.num_classes))
            _paint_shape(labels, cls, rng)
        # border ring forced to background: shapes always touch background,
        # so the boundary mask is never empty
        labels[0, :] = labels[-1, :] = 0
        labels[:, 0] = labels[:, -1] = 0
        if labels.any():
            break
    else:
        labels[cfg.h // 2, cfg.w // 2] = 1
    image = colors[labels] + rng.normal(0.0, cfg.noise_sigma, size=(cfg.h, cfg.w, 3))
    return SynthSample(
        image=image,
        labels=labels,
        boundary_target=extract_gt_boundary(labels, cfg.boundary_radius),
        boundary_radius=cfg.boundary_radius,
    )


def generate_dataset(cfg: TrainConfig) -> list[SynthSample]:
    """n_train + n_val seeded scenes, deterministic per config seed."""
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xD47A]))
    colors = _palette(cfg.num_classes)
    return [_make_sample(cfg, rng, colors) for _ in range(cfg.n_train + cfg.n_val)]


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------


def _uniform(rng, rows, cols, fan_in):
    return rng.uniform(-1.0, 1.0, size=(rows, cols)) / math.sqrt(fan_in)


def init_state(cfg: TrainConfig) -> ModelState:
    """Seeded parameters; graph-reasoning weights are always drawn so the two
    model modes share identical encoder/branch/classifier initialization."""
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xC0FE]))
    ce = cfg.bgr.hidden_dim
    params: dict[str, np.ndarray] = {
        "enc1_w": _uniform(rng, 3, ce, 3),
        "enc1_b": np.zeros((1, ce)),
        "enc2_w": _uniform(rng, ce, ce, ce),
        "enc2_b": np.zeros((1, ce)),
        "bnd_w1": _uniform(rng, ce, ce, ce),
        "bnd_b1": np.zeros((1, ce)),
        "bnd_gamma": np.ones((1, ce)),
        "bnd_beta": np.zeros((1, ce)),
        "bnd_w2": _uniform(rng, ce, 1, ce),
        "bnd_b2": np.zeros((1, 1)),
        "embed_w": _uniform(rng, ce, ce, ce),
        "embed_b": np.zeros((1, ce)),
    }
    for i in range(cfg.bgr.num_layers):
        params[f"gcn{i}_w"] = _uniform(rng, ce, ce, ce)
    params["proj_w"] = _uniform(rng, ce, ce, ce)
    params["proj_b"] = np.zeros((1, ce))
    params["cls_w"] = _uniform(rng, ce, cfg.num_classes, ce)
    params["cls_b"] = np.zeros((1, cfg.num_classes))
    return ModelState(params=params, bn_mean=np.zeros((1, ce)), bn_var=np.ones((1, ce)))


@dataclass
class SampleRun:
    tape: Tape
    param_nodes: dict[str, Node]
    logits: Node
    bscores: Node
    seg_loss: Node
    boundary_loss: Node
    total: Node
    batch_mean: np.ndarray | None
    batch_var: np.ndarray | None


def _build_forward(
    tape: Tape,
    stacked: np.ndarray,
    n_per_image: int,
    params: dict[str, np.ndarray],
    bn_mean: np.ndarray,
    bn_var: np.ndarray,
    cfg: TrainConfig,
    mode: str,
    training: bool,
):
    """Pixelwise stages run on the whole (B*N, c) stack; the graph block runs
    per image on row slices. Batch-norm statistics therefore cover the pixel
    axis across the batch."""
    total_n = stacked.shape[0]
    n_images = total_n // n_per_image
    used = ["enc1_w", "enc1_b", "enc2_w", "enc2_b", "bnd_w1", "bnd_b1", "bnd_gamma",
            "bnd_beta", "bnd_w2", "bnd_b2", "cls_w", "cls_b"]
    if mode == "bgr":
        used += ["embed_w", "embed_b", "proj_w", "proj_b"]
        used += [f"gcn{i}_w" for i in range(cfg.bgr.num_layers)]
    p = {k: tape.input(params[k], trainable=True) for k in used}
    x = tape.input(stacked)
    ones_col = tape.input(np.ones((total_n, 1)))
    ones_row = tape.input(np.ones((1, total_n)))

    feat = tape.relu(tape.affine(x, p["enc1_w"], p["enc1_b"], ones_col))
    feat = tape.relu(tape.affine(feat, p["enc2_w"], p["enc2_b"], ones_col))

    z = tape.affine(feat, p["bnd_w1"], p["bnd_b1"], ones_col)
    if training:
        mean = tape.scale(tape.matmul(ones_row, z), 1.0 / total_n)
        cent = tape.add(z, tape.matmul(ones_col, tape.scale(mean, -1.0)))
        var = tape.scale(tape.matmul(ones_row, tape.mul(cent, cent)), 1.0 / total_n)
        batch_mean, batch_var = mean.value.copy(), var.value.copy()
    else:
        mean = tape.input(bn_mean)
        var = tape.input(bn_var)
        cent = tape.add(z, tape.matmul(ones_col, tape.scale(mean, -1.0)))
        batch_mean = batch_var = None
    eps_row = tape.input(np.full((1, var.value.shape[1]), BN_EPS))
    prec = tape.rsqrt_clamp(tape.add(var, eps_row), 1e-30)
    # per-channel precision and gain fused at row level before broadcasting
    z = tape.add(
        tape.mul(cent, tape.matmul(ones_col, tape.mul(prec, p["bnd_gamma"]))),
        tape.matmul(ones_col, p["bnd_beta"]),
    )
    blogit = tape.affine(tape.relu(z), p["bnd_w2"], p["bnd_b2"], ones_col)
    bscores = tape.sigmoid(blogit)

    if mode == "bgr":
        kept = tape.stop_grad(bscores)  # boundary prior feeds the graph, no gradient back
        h1_all = tape.affine(feat, p["embed_w"], p["embed_b"], ones_col)
        hid = h1_all.value.shape[1]
        ones_img_col = tape.input(np.ones((n_per_image, 1)))
        ones_img_row = tape.input(np.ones((1, n_per_image)))
        reasoned = []
        for i in range(n_images):
            if n_images == 1:
                h1, scores = h1_all, kept
            else:
                h1 = tape.slice_rows(h1_all, i * n_per_image, (i + 1) * n_per_image)
                scores = tape.slice_rows(kept, i * n_per_image, (i + 1) * n_per_image)
            boosted = tape.row_scale(h1, tape.add(scores, ones_img_col))
            colsum_plain = tape.reshape(tape.matmul(ones_img_row, h1), (hid, 1))
            colsum_boost = tape.reshape(tape.matmul(ones_img_row, boosted), (hid, 1))
            deg = tape.add(tape.matmul(boosted, colsum_plain), tape.matmul(h1, colsum_boost))
            dinv = tape.rsqrt_clamp(deg, cfg.bgr.degree_epsilon)
            q11 = tape.row_scale(boosted, dinv)
            q21 = tape.row_scale(h1, dinv)
            # both branches q11 (q21^T .) + q21 (q11^T .) stacked into single
            # gemms; still inner-products-first, never an N x N buffer
            left_stack = tape.concat_cols([q11, q21])
            right_stack = tape.concat_cols([q21, q11])
            h_cur = h1
            for layer in range(cfg.bgr.num_layers):
                inner = tape.matmul(right_stack, h_cur, transpose_a=True)
                aggregated = tape.matmul(left_stack, inner)
                h_cur = tape.relu(tape.matmul(aggregated, p[f"gcn{layer}_w"]))
            reasoned.append(h_cur)
        h_out = reasoned[0] if n_images == 1 else tape.concat_rows(reasoned)
        proj = tape.affine(h_out, p["proj_w"], p["proj_b"], ones_col)
        feat = tape.add(feat, proj)

    logits = tape.affine(feat, p["cls_w"], p["cls_b"], ones_col)
    return p, logits, bscores, batch_mean, batch_var


def _boundary_target(sample: SynthSample, radius: int) -> np.ndarray:
    if sample.boundary_target is not None and radius == sample.boundary_radius:
        return sample.boundary_target
    return extract_gt_boundary(sample.labels, radius)


def run_batch(
    state: ModelState,
    samples: list[SynthSample],
    cfg: TrainConfig,
    mode: str,
    training: bool,
    want_grads: bool = False,
) -> SampleRun:
    """Forward (and optionally backward) over a batch; pure, state untouched.

    Losses are means over all pixels of the batch, which for same-size images
    equals the mean of per-image losses.
    """
    tape = Tape()
    stacked = np.concatenate([reshape_hw_to_nodes(s.image) for s in samples], axis=0)
    n_per_image = samples[0].labels.size
    p, logits, bscores, batch_mean, batch_var = _build_forward(
        tape, stacked, n_per_image, state.params, state.bn_mean, state.bn_var,
        cfg, mode, training,
    )
    labels = np.concatenate([s.labels.reshape(-1) for s in samples])
    seg = tape.softmax_ce(logits, labels)
    btarget = np.concatenate(
        [_boundary_target(s, cfg.boundary_radius) for s in samples]
    )
    bnd = tape.bce(bscores, btarget[:, None])
    total = tape.add(seg, bnd)
    if want_grads:
        tape.backward(total)
    return SampleRun(
        tape=tape,
        param_nodes=p,
        logits=logits,
        bscores=bscores,
        seg_loss=seg,
        boundary_loss=bnd,
        total=total,
        batch_mean=batch_mean,
        batch_var=batch_var,
    )


def run_sample(
    state: ModelState,
    sample: SynthSample,
    cfg: TrainConfig,
    mode: str,
    training: bool,
    want_grads: bool = False,
) -> SampleRun:
    """Single-image convenience wrapper around :func:`run_batch`."""
    return run_batch(state, [sample], cfg, mode, training, want_grads)


def model_forward(
    image: np.ndarray,
    state: ModelState,
    cfg: TrainConfig,
    mode: str,
    training: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-image forward; returns ((h, w, K) logits, flat boundary scores)."""
    sample = SynthSample(image=image, labels=np.zeros(image.shape[:2], dtype=np.int64))
    run = run_sample(state, sample, cfg, mode, training)
    if training and run.batch_mean is not None:
        state.bn_mean = BN_MOMENTUM * state.bn_mean + (1 - BN_MOMENTUM) * run.batch_mean
        state.bn_var = BN_MOMENTUM * state.bn_var + (1 - BN_MOMENTUM) * run.batch_var
    h, w, _ = image.shape
    logits = run.logits.value.reshape(h, w, cfg.num_classes)
    return logits, run.bscores.value[:, 0]


def total_loss(logits: np.ndarray, bscores: np.ndarray, labels: np.ndarray,
               boundary_radius: int = 1) -> float:
    """Softmax cross-entropy plus boundary BCE, both weighted 1."""
    tape = Tape()
    h, w = labels.shape
    lnode = tape.input(logits.reshape(h * w, -1))
    seg = tape.softmax_ce(lnode, labels.reshape(-1))
    target = extract_gt_boundary(labels, boundary_radius)
    bnd = tape.bce(tape.input(bscores[:, None]), target[:, None])
    return float(seg.value[0, 0] + bnd.value[0, 0])


def make_loss_fn(sample: SynthSample, cfg: TrainConfig, mode: str,
                 bn_mean: np.ndarray, bn_var: np.ndarray, training: bool = True):
    """Adapter for finite_diff_check: params dict -> (loss, grads)."""

    def f(params: dict[str, np.ndarray]):
        state = ModelState(params=params, bn_mean=bn_mean, bn_var=bn_var)
        run = run_sample(state, sample, cfg, mode, training, want_grads=True)
        grads = {k: node.grad for k, node in run.param_nodes.items()}
        return float(run.total.value[0, 0]), grads

    return f


# ----------------------------------------------------------------------
# training and evaluation
# ----------------------------------------------------------------------


def poly_lr(lr0: float, step: int, total: int, power: float) -> float:
    return lr0 * (1.0 - step / total) ** power


def evaluate(state: ModelState, cfg: TrainConfig, mode: str,
             samples: list[SynthSample]) -> Metrics:
    """Whole-set per-class IoU, boundary-band accuracy and mean losses."""
    k = cfg.num_classes
    inter = np.zeros(k)
    union = np.zeros(k)
    band_hits = 0
    band_total = 0
    seg_losses = []
    bnd_losses = []
    for sample in samples:
        run = run_sample(state, sample, cfg, mode, training=False)
        pred = run.logits.value.argmax(axis=1)
        gt = sample.labels.reshape(-1)
        for cls in range(k):
            p = pred == cls
            g = gt == cls
            inter[cls] += np.count_nonzero(p & g)
            union[cls] += np.count_nonzero(p | g)
        band = extract_gt_boundary(sample.labels, EVAL_BAND_RADIUS) > 0.5
        band_hits += int(np.count_nonzero((pred == gt) & band))
        band_total += int(np.count_nonzero(band))
        seg_losses.append(float(run.seg_loss.value[0, 0]))
        bnd_losses.append(float(run.boundary_loss.value[0, 0]))
    per_class = [float(inter[c] / union[c]) if union[c] > 0 else None for c in range(k)]
    present = [v for v in per_class if v is not None]
    return Metrics(
        miou=float(np.mean(present)) if present else 0.0,
        per_class_iou=per_class,
        boundary_band_acc=band_hits / band_total if band_total else 1.0,
        seg_loss=float(np.mean(seg_losses)),
        boundary_loss=float(np.mean(bnd_losses)),
    )


def train(cfg: TrainConfig) -> TrainResult:
    """SGD with momentum/weight decay under the poly schedule; deterministic
    per config. Raises DivergenceError on a non-finite loss."""
    data = generate_dataset(cfg)
    train_set, val_set = data[: cfg.n_train], data[cfg.n_train :]
    state = init_state(cfg)
    velocity = {k: np.zeros_like(v) for k, v in state.params.items()}
    batch_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xBA7C]))
    history: list[dict] = []

    def snapshot(step: int) -> Metrics:
        metrics = evaluate(state, cfg, cfg.model, val_set)
        history.append({"iter": step, **metrics.to_dict()})
        return metrics

    snapshot(0)
    for step in range(cfg.iters):
        lr = poly_lr(cfg.lr0, step, cfg.iters, cfg.poly_power)
        idx = batch_rng.integers(0, cfg.n_train, size=cfg.batch)
        run = run_batch(state, [train_set[i] for i in idx], cfg, cfg.model,
                        training=True, want_grads=True)
        loss = float(run.total.value[0, 0])
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at iteration {step} (seed {cfg.seed}, "
                f"model {cfg.model})"
            )
        state.bn_mean = BN_MOMENTUM * state.bn_mean + (1 - BN_MOMENTUM) * run.batch_mean
        state.bn_var = BN_MOMENTUM * state.bn_var + (1 - BN_MOMENTUM) * run.batch_var
        for key, node in run.param_nodes.items():
            grad = node.grad + cfg.weight_decay * state.params[key]
            velocity[key] = cfg.momentum * velocity[key] + grad
            state.params[key] = state.params[key] - lr * velocity[key]
        if (step + 1) % cfg.eval_interval == 0 and (step + 1) != cfg.iters:
            snapshot(step + 1)
    final = snapshot(cfg.iters)
    return TrainResult(history=history, final=final, state=state)
