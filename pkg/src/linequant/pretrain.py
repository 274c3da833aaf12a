"""Masked-label-prediction pre-training of the encoder.

Random stride-aligned patches of each line are filled with a constant, and
the encoder (plus projection head) is trained to predict the codebook label
of every patch. The masking probability follows a staged schedule, and the
loss optionally includes the non-masked patches with a small weight.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import model as _model
from . import tensorcore as tc
from .dataset import PATCH_STRIDE, LineSample
from .errors import ContractError, DataError, DegenerateWeightsError, PlanError
from .model import ModelParams
from .tensorcore import Tape, Tensor, backward


@dataclasses.dataclass(frozen=True)
class MaskingSchedule:
    """Stages of (start fraction of total iterations, masking probability)."""

    stages: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.stages:
            raise ContractError("schedule needs at least one stage")
        starts = [s for s, _ in self.stages]
        if starts[0] != 0.0:
            raise ContractError("first stage must start at fraction 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ContractError("stage start fractions must be strictly increasing")
        if any(not 0.0 <= p <= 1.0 for _, p in self.stages):
            raise ContractError("masking probabilities must lie in [0, 1]")

    @classmethod
    def constant(cls, p: float) -> "MaskingSchedule":
        return cls(((0.0, p),))

    @classmethod
    def progressive(cls) -> "MaskingSchedule":
        """20% from the start, 33% from 0.2 of training, 50% from 0.6."""
        return cls(((0.0, 0.20), (0.2, 0.33), (0.6, 0.50)))


def masking_probability(schedule: MaskingSchedule, iteration: int, total: int) -> float:
    """Probability of the latest stage whose start fraction has been reached."""
    if not 0 <= iteration < max(total, 1):
        raise ContractError(f"iteration {iteration} outside [0, {total})")
    fraction = iteration / total if total else 0.0
    p = schedule.stages[0][1]
    for start, stage_p in schedule.stages:
        if fraction >= start:
            p = stage_p
    return p


def lr_at(base: float, halving_points, iteration: int) -> float:
    """base * 0.5^(number of halving points passed)."""
    points = sorted(halving_points)
    passed = sum(1 for h in points if iteration >= h)
    return base * (0.5 ** passed)


def sample_mask(n_patches: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean plan with exactly round(p * n_patches) masked positions.

    Positions are drawn uniformly without replacement; ties in the count
    round half up so the realized fraction tracks p.
    """
    if n_patches < 1:
        raise ContractError("need at least one patch to mask")
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"masking probability {p} outside [0, 1]")
    count = int(np.floor(p * n_patches + 0.5))
    plan = np.zeros(n_patches, dtype=bool)
    if count:
        plan[rng.choice(n_patches, size=count, replace=False)] = True
    return plan


def apply_mask(image: np.ndarray, plan: np.ndarray, fill: float = 0.5) -> np.ndarray:
    """Fill the 8-pixel column band of every masked patch position."""
    plan = np.asarray(plan, dtype=bool)
    if image.ndim != 2:
        raise PlanError(f"expected an H x W image, got shape {image.shape}")
    if plan.shape != (image.shape[1] // PATCH_STRIDE,):
        raise PlanError(
            f"plan length {plan.shape} != floor(W/8) = {image.shape[1] // PATCH_STRIDE}"
        )
    out = image.copy()
    for i in np.flatnonzero(plan):
        out[:, i * PATCH_STRIDE:(i + 1) * PATCH_STRIDE] = fill
    return out


def pretrain_loss(logits: Tensor, labels, plan, w: float) -> Tensor:
    """Masked-patch CE plus w times non-masked-patch CE, each mean-reduced.

    logits: (T, k) or flattened (N, k); labels and plan align with rows.
    Rows can be pre-filtered to real (non-padded) positions by the caller.
    """
    labels = np.asarray(labels)
    plan = np.asarray(plan, dtype=bool)
    n = logits.shape[0]
    if labels.shape != (n,) or plan.shape != (n,):
        raise PlanError(
            f"lengths disagree: logits {n}, labels {labels.shape}, plan {plan.shape}"
        )
    if n == 0:
        raise DegenerateWeightsError("no positions to compute a loss over")
    masked = plan
    unmasked = ~plan
    loss = None
    if masked.any():
        loss = tc.cross_entropy(logits, labels, masked.astype(logits.data.dtype))
    if w != 0.0 and unmasked.any():
        unmasked_ce = tc.cross_entropy(logits, labels, unmasked.astype(logits.data.dtype))
        term = w * unmasked_ce
        loss = term if loss is None else loss + term
    if loss is None:
        # nothing masked and w == 0: the masked term is defined as zero
        loss = Tensor(np.zeros((), dtype=logits.data.dtype))
    return loss


# ---------------------------------------------------------------------------
# optimizer (shared with fine-tuning)


class Adam:
    """Adaptive moment estimation; state is created lazily per parameter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, named_params: dict[str, Tensor], lr: float) -> None:
        for name, p in named_params.items():
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[name] = st
            st["t"] += 1
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# the training loop


@dataclasses.dataclass(frozen=True)
class PretrainConfig:
    iterations: int
    batch_size: int = 16
    lr: float = 1e-3
    halve_at: tuple[int, ...] = ()
    schedule: MaskingSchedule = MaskingSchedule.constant(0.2)
    unmasked_weight: float = 0.0
    eval_interval: int = 100
    seed: int = 0
    mask_fill: float = 0.5

    def __post_init__(self):
        if self.unmasked_weight < 0:
            raise ContractError("unmasked loss weight must be >= 0")
        if any(h >= self.iterations for h in self.halve_at) and self.iterations > 0:
            raise ContractError("halving points must precede the final iteration")


class PretrainData:
    """Lines plus their label sequences; no augmentation enters this path."""

    def __init__(self, train: list[LineSample], heldout: list[LineSample],
                 label_store: dict[str, list[int]]):
        self.train = train
        self.heldout = heldout
        self.labels = label_store
        for sample in train + heldout:
            labels = label_store.get(sample.id)
            if labels is None:
                raise DataError(f"no labels for sample {sample.id}")
            expected = sample.image.shape[1] // PATCH_STRIDE
            if len(labels) != expected:
                raise DataError(
                    f"sample {sample.id}: {len(labels)} labels for "
                    f"{expected} patches"
                )

    @classmethod
    def from_corpus(cls, samples: list[LineSample],
                    label_store: dict[str, list[int]]) -> "PretrainData":
        """Train on the train split, hold out the val split for metrics."""
        train = [s for s in samples if s.split == "train"]
        heldout = [s for s in samples if s.split == "val"]
        if not train:
            raise DataError("pre-training corpus has no train split")
        return cls(train, heldout, label_store)


def _masked_batch(samples: list[LineSample], label_store, p: float, fill: float,
                  rng: np.random.Generator):
    """Collate, mask, and align labels; returns arrays ready for the model."""
    widths = [s.image.shape[1] for s in samples]
    w_max = max(widths)
    t_max = w_max // PATCH_STRIDE
    b = len(samples)
    images = np.zeros((b, 1, samples[0].image.shape[0], w_max), dtype=np.float32)
    patch_mask = np.zeros((b, t_max), dtype=bool)
    plans = np.zeros((b, t_max), dtype=bool)
    labels = np.zeros((b, t_max), dtype=np.int64)
    for i, s in enumerate(samples):
        n = s.image.shape[1] // PATCH_STRIDE
        plan = sample_mask(n, p, rng)
        images[i, 0, :, :s.image.shape[1]] = apply_mask(s.image, plan, fill)
        patch_mask[i, :n] = True
        plans[i, :n] = plan
        labels[i, :n] = label_store[s.id]
    return images, patch_mask, plans, labels


def _flat_loss(logits: Tensor, labels, plans, patch_mask, w: float) -> Tensor:
    """Restrict to real patch positions and apply the combined loss."""
    real = patch_mask.reshape(-1)
    if not real.any():
        raise DegenerateWeightsError("batch contains no real patch positions")
    b, t, k = logits.shape
    flat = tc.reshape(logits, (b * t, k))
    # padded rows carry zero weight in both CE terms, so no row slicing needed
    weights_m = (plans.reshape(-1) & real).astype(logits.data.dtype)
    weights_u = (~plans.reshape(-1) & real).astype(logits.data.dtype)
    labels_flat = labels.reshape(-1)
    loss = None
    if weights_m.any():
        loss = tc.cross_entropy(flat, labels_flat, weights_m)
    if w != 0.0 and weights_u.any():
        term = w * tc.cross_entropy(flat, labels_flat, weights_u)
        loss = term if loss is None else loss + term
    if loss is None:
        loss = Tensor(np.zeros((), dtype=logits.data.dtype))
    return loss


def _heldout_metrics(model: ModelParams, data: PretrainData, p: float, w: float,
                     fill: float, seed_key, batch_size: int) -> tuple[float, float]:
    """Loss and masked top-1 accuracy on the held-out slice, fixed masks."""
    rng = np.random.default_rng(seed_key)
    losses, weights = [], []
    hits = total = 0
    for lo in range(0, len(data.heldout), batch_size):
        chunk = data.heldout[lo:lo + batch_size]
        images, patch_mask, plans, labels = _masked_batch(chunk, data.labels, p, fill, rng)
        logits = _model.pretrain_forward(model, images, patch_mask)
        loss = _flat_loss(logits, labels, plans, patch_mask, w)
        losses.append(loss.item())
        weights.append(len(chunk))
        pred = logits.data.argmax(axis=-1)
        sel = plans & patch_mask
        hits += int((pred[sel] == labels[sel]).sum())
        total += int(sel.sum())
    loss = float(np.average(losses, weights=weights)) if losses else None
    acc = hits / total if total else None
    return loss, acc


def run_pretraining(config: PretrainConfig, data: PretrainData,
                    model: ModelParams) -> tuple[ModelParams, list[dict]]:
    """Optimize the encoder + head on masked label prediction.

    Returns the trained model (projection head still attached) and one
    metrics record per evaluation point:
    {"iter", "loss", "masked_acc", "p", "lr"}.
    """
    rng = np.random.default_rng(config.seed)
    adam = Adam()
    metrics: list[dict] = []
    n_train = len(data.train)
    total = config.iterations

    for iteration in range(total):
        p = masking_probability(config.schedule, iteration, total)
        lr = lr_at(config.lr, config.halve_at, iteration)
        idx = rng.integers(0, n_train, size=config.batch_size)
        chunk = [data.train[i] for i in idx]
        images, patch_mask, plans, labels = _masked_batch(
            chunk, data.labels, p, config.mask_fill, rng)
        with Tape() as tape:
            logits = _model.pretrain_forward(model, images, patch_mask)
            loss = _flat_loss(logits, labels, plans, patch_mask, config.unmasked_weight)
        backward(tape, loss)
        adam.step(model.named(), lr)
        model.clear_grads()

        is_eval = (iteration + 1) % config.eval_interval == 0 or iteration == total - 1
        if is_eval and data.heldout:
            held_loss, held_acc = _heldout_metrics(
                model, data, p, config.unmasked_weight, config.mask_fill,
                [config.seed, 0xE7A1, iteration], config.batch_size)
            metrics.append({
                "iter": iteration + 1,
                "loss": held_loss,
                "masked_acc": held_acc,
                "p": p,
                "lr": lr,
            })

    model.meta["iteration"] = total
    model.meta["rng_state"] = rng.bit_generator.state
    return model, metrics
