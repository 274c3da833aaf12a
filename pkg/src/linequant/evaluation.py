"""Character error rate over corpus splits."""

from __future__ import annotations

import dataclasses
import json

from . import model as _model
from .dataset import Alphabet, Batch, LineSample, batch
from .errors import DataError
from .model import ModelParams


def edit_distance(a: str, b: str) -> int:
    """Minimal insertions + deletions + substitutions turning a into b."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(
                previous[j] + 1,                      # delete from a
                current[j - 1] + 1,                   # insert into a
                previous[j - 1] + (ca != cb),         # substitute
            ))
        previous = current
    return previous[-1]


@dataclasses.dataclass
class LineRecord:
    id: str
    ref: str
    hyp: str
    edits: int


@dataclasses.dataclass
class CerReport:
    total_edits: int
    total_ref_chars: int
    cer: float
    lines: list[LineRecord]

    def to_json(self) -> str:
        return json.dumps({
            "cer": self.cer,
            "total_edits": self.total_edits,
            "total_ref_chars": self.total_ref_chars,
            "lines": [dataclasses.asdict(r) for r in self.lines],
        }, ensure_ascii=False, sort_keys=True)


def cer(pairs, ids=None) -> CerReport:
    """Micro-averaged CER: sum of edits over sum of reference lengths."""
    pairs = list(pairs)
    records = []
    total_edits = 0
    total_chars = 0
    for i, (ref, hyp) in enumerate(pairs):
        if not ref:
            raise DataError(f"empty reference at pair {i}")
        edits = edit_distance(ref, hyp)
        total_edits += edits
        total_chars += len(ref)
        records.append(LineRecord(ids[i] if ids else str(i), ref, hyp, edits))
    rate = total_edits / total_chars if total_chars else 0.0
    return CerReport(total_edits, total_chars, rate, records)


def evaluate_model(mp: ModelParams, samples: list[LineSample], alphabet: Alphabet,
                   max_len: int = 64, batch_size: int = 32) -> CerReport:
    """Greedy-decode every line (no augmentation) and score the corpus CER."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    pairs = []
    ids = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        collated: Batch = batch(chunk, alphabet)
        hyps = _model.greedy_decode_batch(
            mp, collated.images, collated.patch_mask, alphabet, max_len)
        for s, hyp in zip(chunk, hyps):
            pairs.append((s.text, hyp))
            ids.append(s.id)
    return cer(pairs, ids)


def save_report(report: CerReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
        fh.write("\n")
