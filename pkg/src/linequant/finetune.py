"""Supervised fine-tuning of the full recognizer.

Two strategies: Full optimizes everything from the first step; DecoderStage
trains only the adapter and decoder for the first 20% of iterations (frozen
stem/encoder), then everything. Model selection tracks the checkpoint with
the lowest validation CER.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import evaluation, model as _model
from . import tensorcore as tc
from .dataset import Alphabet, AugmentationConfig, Batch, LineSample, batch
from .errors import ConfigurationError, ContractError, DataError
from .model import AdapterConfig, DecoderConfig, EncoderConfig, ModelParams
from .pretrain import Adam, lr_at
from .tensorcore import Tape, backward

FULL = "full"
DECODER_STAGE = "decoder_stage"

_ALL_GROUPS = frozenset({"stem", "encoder", "adapter", "decoder"})
_DECODER_GROUPS = frozenset({"adapter", "decoder"})


@dataclasses.dataclass(frozen=True)
class FinetuneConfig:
    iterations: int
    batch_size: int = 16
    lr: float = 3e-4
    halve_at: tuple[int, ...] = ()
    strategy: str = FULL
    decoder_stage_fraction: float = 0.2
    augmentation: AugmentationConfig = AugmentationConfig.identity()
    eval_interval: int = 200
    seed: int = 0
    max_len: int = 64

    def __post_init__(self):
        if self.strategy not in (FULL, DECODER_STAGE):
            raise ConfigurationError(f"unknown fine-tuning strategy {self.strategy!r}")
        if not 0.0 < self.decoder_stage_fraction < 1.0:
            raise ConfigurationError("decoder stage fraction must lie in (0, 1)")


@dataclasses.dataclass(frozen=True)
class InitSource:
    """Scratch, pre-trained encoder, or a full transferred model."""

    kind: str
    checkpoint: Path | None = None

    @classmethod
    def scratch(cls) -> "InitSource":
        return cls("scratch")

    @classmethod
    def pretrained_encoder(cls, checkpoint) -> "InitSource":
        return cls("pretrained_encoder", Path(checkpoint))

    @classmethod
    def transfer_full_model(cls, checkpoint) -> "InitSource":
        return cls("transfer_full_model", Path(checkpoint))


def trainable_selector(strategy: str, iteration: int, total: int,
                       fraction: float = 0.2) -> frozenset[str]:
    """Parameter groups receiving updates at this iteration."""
    if not 0 <= iteration < max(total, 1):
        raise ContractError(f"iteration {iteration} outside [0, {total})")
    if strategy == FULL:
        return _ALL_GROUPS
    if strategy == DECODER_STAGE:
        return _DECODER_GROUPS if iteration < fraction * total else _ALL_GROUPS
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def init_model(source: InitSource, enc: EncoderConfig, adp: AdapterConfig,
               dec: DecoderConfig, seed: int) -> ModelParams:
    """Build the recognizer, pulling weights from a checkpoint when asked.

    A pre-trained encoder supplies stem + encoder weights only; its
    projection head is discarded. A transferred model supplies everything.
    """
    mp = _model.build_model(enc, adp, dec, seed)
    if source.kind == "scratch":
        return mp
    ck = _model.load_checkpoint(source.checkpoint)
    if source.kind == "pretrained_encoder":
        if ck.encoder != enc:
            raise ConfigurationError(
                f"checkpoint encoder {ck.encoder} does not match requested {enc}"
            )
        _model.load_group_into(mp, ck, ("stem", "encoder"))
        return mp
    if source.kind == "transfer_full_model":
        for name, have, want in (("encoder", ck.encoder, enc),
                                 ("adapter", ck.adapter, adp),
                                 ("decoder", ck.decoder, dec)):
            if have != want:
                raise ConfigurationError(
                    f"checkpoint {name} config {have} does not match requested {want}"
                )
        _model.load_group_into(mp, ck, ("stem", "encoder", "adapter", "decoder"))
        return mp
    raise ConfigurationError(f"unknown init source {source.kind!r}")


def finetune_step(mp: ModelParams, collated: Batch, selected: frozenset[str],
                  lr: float, adam: Adam) -> float:
    """One teacher-forced CE step; only selected groups are touched.

    When the encoder is frozen, its forward runs outside the tape, so frozen
    tensors receive no gradients and accumulate no optimizer state.
    """
    encoder_trainable = "encoder" in selected or "stem" in selected
    if not encoder_trainable:
        memory_const = _model.encoder_forward(mp, collated.images, collated.patch_mask)
    inputs = collated.target_ids[:, :-1]
    labels = collated.target_ids[:, 1:]
    weights = collated.target_mask[:, 1:]
    with Tape() as tape:
        if encoder_trainable:
            states = _model.encoder_forward(mp, collated.images, collated.patch_mask)
        else:
            states = memory_const
        memory = _model.adapter_forward(mp, states)
        logits = _model.decoder_forward(mp, memory, inputs,
                                        memory_mask=collated.patch_mask)
        b, length, vocab = logits.shape
        flat = tc.reshape(logits, (b * length, vocab))
        loss = tc.cross_entropy(flat, labels.reshape(-1),
                                weights.reshape(-1).astype(logits.data.dtype))
    backward(tape, loss)
    adam.step(mp.named(selected), lr)
    mp.clear_grads()
    return loss.item()


@dataclasses.dataclass
class Corpus:
    train: list[LineSample]
    val: list[LineSample]
    alphabet: Alphabet


def run_finetuning(config: FinetuneConfig, corpus: Corpus, init: InitSource,
                   enc: EncoderConfig, dec: DecoderConfig,
                   adp: AdapterConfig | None = None) -> tuple[ModelParams, list[dict]]:
    """Train with augmentation on the train split, select on validation CER.

    Returns the best checkpoint (lowest val CER over all evaluation points)
    and one metrics record per evaluation:
    {"iter", "loss", "val_cer", "lr", "trainable"}.
    """
    if not corpus.train or not corpus.val:
        raise DataError("fine-tuning needs non-empty train and val splits")
    if config.strategy == DECODER_STAGE and init.kind == "scratch":
        raise ConfigurationError(
            "the decoder stage freezes the encoder, so it needs a pre-trained "
            "or transferred encoder, not a scratch init"
        )
    adp = adp or AdapterConfig(enc.dim, dec.dim)
    mp = init_model(init, enc, adp, dec, config.seed)
    adam = Adam()
    rng = np.random.default_rng(config.seed)
    metrics: list[dict] = []
    best_cer = float("inf")
    best = mp.copy()
    total = config.iterations
    last_loss = None  # no training step yet; serializes as JSON null

    def evaluate(iteration: int, selected) -> None:
        nonlocal best_cer, best
        report = evaluation.evaluate_model(mp, corpus.val, corpus.alphabet,
                                           max_len=config.max_len)
        metrics.append({
            "iter": iteration,
            "loss": last_loss,
            "val_cer": report.cer,
            "lr": lr_at(config.lr, config.halve_at, max(iteration - 1, 0)),
            "trainable": sorted(selected),
        })
        if report.cer < best_cer:
            best_cer = report.cer
            best = mp.copy()
            best.meta["iteration"] = iteration
            best.meta["rng_state"] = rng.bit_generator.state

    if total == 0:
        evaluate(0, ())
        return best, metrics

    for iteration in range(total):
        selected = trainable_selector(config.strategy, iteration, total,
                                      config.decoder_stage_fraction)
        lr = lr_at(config.lr, config.halve_at, iteration)
        idx = rng.integers(0, len(corpus.train), size=config.batch_size)
        collated = batch([corpus.train[i] for i in idx], corpus.alphabet,
                         augment_config=config.augmentation, rng=rng)
        last_loss = finetune_step(mp, collated, selected, lr, adam)
        if (iteration + 1) % config.eval_interval == 0 or iteration == total - 1:
            evaluate(iteration + 1, selected)
    return best, metrics
