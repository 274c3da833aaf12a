"""Command-line pipeline: gen-data, fit-quantizer, label, pretrain, finetune,
eval, trigrams, plot.

Exit codes: 0 success, 2 bad config, 3 I/O failure, 4 insufficient data,
5 missing upstream artifact, 6 empty input.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import charts, dataset, evaluation, finetune, model, pretrain, quantizer
from .errors import (
    ConfigurationError,
    EmptyInputError,
    InsufficientDataError,
    LinequantError,
    MissingArtifactError,
)

THREADS_ENV = "LINEQUANT_THREADS"

_thread_limiter = None


# ---------------------------------------------------------------------------
# run config files: sectioned key=value, unknown keys rejected


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _emit_int_list(value) -> str:
    return ",".join(str(v) for v in value)


def _parse_schedule(text: str) -> tuple[tuple[float, float], ...]:
    stages = []
    for part in text.split(","):
        start, p = part.split(":")
        stages.append((float(start), float(p)))
    return tuple(stages)


def _emit_schedule(value) -> str:
    return ",".join(f"{repr(s)}:{repr(p)}" for s, p in value)


def _emit_float(value) -> str:
    return repr(float(value))


_SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "train": (int, 200, str),
        "val": (int, 40, str),
        "test": (int, 40, str),
        "text_len_min": (int, 3, str),
        "text_len_max": (int, 8, str),
        "alphabet": (str, "abcdefghijklmnopqrstuvwxyz", str),
        "font_seeds": (_parse_int_list, (11,), _emit_int_list),
        "seed": (int, 0, str),
        "glyph_width": (int, 24, str),
        "jitter_slant": (float, 0.06, _emit_float),
        "jitter_spacing": (int, 1, str),
        "jitter_thickness": (float, 0.3, _emit_float),
    },
    "quantizer": {
        "k": (int, 64, str),
        "max_iters": (int, 50, str),
        "tol": (float, 1e-4, _emit_float),
        "fit_lines": (int, 1000, str),
        "seed": (int, quantizer.DEFAULT_FX_SEED, str),
        "channels": (_parse_int_list, quantizer.DEFAULT_FX_CHANNELS, _emit_int_list),
        "feature_dim": (int, quantizer.DEFAULT_FX_DIM, str),
        "stem_checkpoint": (str, "", str),
    },
    "model": {
        "enc_preset": (str, "", str),
        "enc_layers": (int, 2, str),
        "enc_heads": (int, 4, str),
        "enc_dim": (int, 128, str),
        "stem_channels": (_parse_int_list, (8, 16, 32, 64), _emit_int_list),
        "dec_preset": (str, "", str),
        "dec_layers": (int, 2, str),
        "dec_heads": (int, 4, str),
        "dec_dim": (int, 64, str),
        "max_len": (int, 64, str),
        "seed": (int, 0, str),
    },
    "pretrain": {
        "iterations": (int, 200, str),
        "batch_size": (int, 16, str),
        "lr": (float, 1e-3, _emit_float),
        "halve_at": (_parse_int_list, (), _emit_int_list),
        "schedule": (_parse_schedule, ((0.0, 0.20), (0.2, 0.33), (0.6, 0.50)),
                     _emit_schedule),
        "unmasked_weight": (float, 0.0, _emit_float),
        "eval_interval": (int, 100, str),
        "seed": (int, 0, str),
        "mask_fill": (float, 0.5, _emit_float),
    },
    "finetune": {
        "iterations": (int, 200, str),
        "batch_size": (int, 16, str),
        "lr": (float, 3e-4, _emit_float),
        "halve_at": (_parse_int_list, (), _emit_int_list),
        "strategy": (str, finetune.FULL, str),
        "decoder_stage_fraction": (float, 0.2, _emit_float),
        "eval_interval": (int, 100, str),
        "seed": (int, 0, str),
        "max_len": (int, 32, str),
        "aug_noise": (float, 0.03, _emit_float),
        "aug_gamma": (float, 0.15, _emit_float),
        "aug_blur": (int, 2, str),
        "aug_shear": (float, 0.05, _emit_float),
        "aug_shift": (float, 1.5, _emit_float),
        "aug_occlusion": (float, 0.3, _emit_float),
        "aug_brightness": (float, 0.08, _emit_float),
    },
}


class RunConfig:
    """Fully-resolved typed view of a sectioned key=value config file."""

    def __init__(self, sections: dict[str, dict[str, object]]):
        self.sections = sections

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({
            section: {key: default for key, (_, default, _) in keys.items()}
            for section, keys in _SCHEMA.items()
        })

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise MissingArtifactError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                schema = _SCHEMA[section].get(key)
                if schema is None:
                    raise ConfigurationError(
                        f"unknown key {key!r} in section [{section}]"
                    )
                parse_fn = schema[0]
                try:
                    cfg.sections[section][key] = parse_fn(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigurationError(
                        f"bad value for {section}.{key}: {raw!r} ({exc})"
                    ) from None
        return cfg

    def emit(self) -> str:
        lines = []
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (_, _, emit_fn) in keys.items():
                lines.append(f"{key} = {emit_fn(self.sections[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.sections[section]


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    if getattr(args, "seed", None) is not None:
        for section in ("data", "quantizer", "model", "pretrain", "finetune"):
            cfg.sections[section]["seed"] = args.seed
    return cfg


def _snapshot(cfg: RunConfig, out_dir: Path) -> None:
    (out_dir / "config.resolved.ini").write_text(cfg.emit(), encoding="utf-8")


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out DIR is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# config -> module objects


def _corpus_spec(cfg: RunConfig) -> dataset.CorpusSpec:
    d = cfg["data"]
    return dataset.CorpusSpec(
        alphabet=d["alphabet"],
        train=d["train"], val=d["val"], test=d["test"],
        text_len=(d["text_len_min"], d["text_len_max"]),
        font_seeds=tuple(d["font_seeds"]),
        seed=d["seed"],
        glyph_width=d["glyph_width"],
        jitter=dataset.RenderJitter(
            slant=d["jitter_slant"],
            spacing=d["jitter_spacing"],
            thickness=d["jitter_thickness"],
        ),
    )


def _feature_extractor(cfg: RunConfig) -> quantizer.FeatureExtractor:
    q = cfg["quantizer"]
    if q["stem_checkpoint"]:
        return quantizer.FeatureExtractor.from_checkpoint(
            _require(q["stem_checkpoint"], "stem checkpoint"))
    return quantizer.FeatureExtractor.random_init(
        seed=q["seed"], channels=tuple(q["channels"]), out_dim=q["feature_dim"])


def _encoder_config(cfg: RunConfig) -> model.EncoderConfig:
    m = cfg["model"]
    if m["enc_preset"]:
        return model.encoder_preset(m["enc_preset"])
    return model.EncoderConfig(
        layers=m["enc_layers"], heads=m["enc_heads"], dim=m["enc_dim"],
        stem=model.StemConfig(channels=tuple(m["stem_channels"])))


def _decoder_config(cfg: RunConfig, alphabet_size: int) -> model.DecoderConfig:
    m = cfg["model"]
    if m["dec_preset"]:
        return model.decoder_preset(m["dec_preset"], alphabet_size,
                                    max_len=m["max_len"])
    return model.DecoderConfig(
        layers=m["dec_layers"], heads=m["dec_heads"], dim=m["dec_dim"],
        alphabet_size=alphabet_size, max_len=m["max_len"])


def _augmentation(cfg: RunConfig) -> dataset.AugmentationConfig:
    f = cfg["finetune"]
    return dataset.AugmentationConfig(
        noise_sigma=f["aug_noise"], gamma=f["aug_gamma"], blur=f["aug_blur"],
        shear=f["aug_shear"], shift=f["aug_shift"], occlusion=f["aug_occlusion"],
        brightness=f["aug_brightness"])


def _write_metrics(rows: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    manifest = dataset.make_corpus(_corpus_spec(cfg), out)
    _snapshot(cfg, out)
    print(manifest)
    return 0


def cmd_fit_quantizer(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    manifest = _require(args.manifest, "manifest")
    q = cfg["quantizer"]
    samples = dataset.load_manifest(manifest)
    if not samples:
        raise EmptyInputError(f"manifest {manifest} has no records")
    fx = _feature_extractor(cfg)
    rng = np.random.default_rng(q["seed"])
    order = rng.permutation(len(samples))[:q["fit_lines"]]
    features = np.concatenate(
        [quantizer.extract_features(samples[i].image, fx) for i in order], axis=0)
    codebook = quantizer.fit_kmeans(features, k=q["k"], max_iters=q["max_iters"],
                                    tol=q["tol"], seed=q["seed"])
    path = out / "codebook.lqkm"
    codebook.save(path)
    _snapshot(cfg, out)
    print(f"codebook {path} k={codebook.k} inertia={codebook.final_inertia:.6g}")
    return 0


def cmd_label(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    manifest = _require(args.manifest, "manifest")
    codebook = quantizer.Codebook.load(_require(args.codebook, "codebook"))
    fx = _feature_extractor(cfg)
    path = out / "labels.jsonl"
    count = quantizer.label_corpus(manifest, fx, codebook, path)
    _snapshot(cfg, out)
    print(f"labels {path} lines={count}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    manifest = _require(args.manifest, "manifest")
    labels = quantizer.load_label_store(_require(args.labels, "label store"))
    p = cfg["pretrain"]
    samples = dataset.load_manifest(manifest)
    data = pretrain.PretrainData.from_corpus(samples, labels)
    config = pretrain.PretrainConfig(
        iterations=p["iterations"], batch_size=p["batch_size"], lr=p["lr"],
        halve_at=tuple(p["halve_at"]),
        schedule=pretrain.MaskingSchedule(p["schedule"]),
        unmasked_weight=p["unmasked_weight"], eval_interval=p["eval_interval"],
        seed=p["seed"], mask_fill=p["mask_fill"])
    mp = model.build_pretrain_model(_encoder_config(cfg), cfg["quantizer"]["k"],
                                    seed=cfg["model"]["seed"])
    mp, metrics = pretrain.run_pretraining(config, data, mp)
    ckpt = out / "pretrain.lqck"
    model.save_checkpoint(mp, ckpt, iteration=mp.meta.get("iteration", 0),
                          rng_state=mp.meta.get("rng_state"))
    _write_metrics(metrics, out / "metrics.jsonl")
    _snapshot(cfg, out)
    print(f"checkpoint {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    manifest = _require(args.manifest, "manifest")
    f = cfg["finetune"]
    alphabet = dataset.Alphabet(cfg["data"]["alphabet"])
    corpus = finetune.Corpus(
        train=dataset.load_manifest(manifest, split="train"),
        val=dataset.load_manifest(manifest, split="val"),
        alphabet=alphabet)
    if args.init_encoder:
        init = finetune.InitSource.pretrained_encoder(
            _require(args.init_encoder, "pre-trained encoder checkpoint"))
    elif args.init_full:
        init = finetune.InitSource.transfer_full_model(
            _require(args.init_full, "transfer checkpoint"))
    else:
        init = finetune.InitSource.scratch()
    config = finetune.FinetuneConfig(
        iterations=f["iterations"], batch_size=f["batch_size"], lr=f["lr"],
        halve_at=tuple(f["halve_at"]), strategy=f["strategy"],
        decoder_stage_fraction=f["decoder_stage_fraction"],
        augmentation=_augmentation(cfg), eval_interval=f["eval_interval"],
        seed=f["seed"], max_len=f["max_len"])
    enc = _encoder_config(cfg)
    dec = _decoder_config(cfg, alphabet.vocab_size)
    best, metrics = finetune.run_finetuning(config, corpus, init, enc, dec)
    ckpt = out / "finetune.lqck"
    model.save_checkpoint(best, ckpt, iteration=best.meta.get("iteration", 0),
                          rng_state=best.meta.get("rng_state"),
                          extra_meta={"alphabet": alphabet.chars})
    _write_metrics(metrics, out / "metrics.jsonl")
    _snapshot(cfg, out)
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = _require(args.manifest, "manifest")
    mp = model.load_checkpoint(_require(args.checkpoint, "checkpoint"))
    chars = mp.meta.get("alphabet") or cfg["data"]["alphabet"]
    alphabet = dataset.Alphabet(chars)
    samples = dataset.load_manifest(manifest, split=args.split)
    if not samples:
        raise EmptyInputError(f"split {args.split!r} of {manifest} is empty")
    report = evaluation.evaluate_model(mp, samples, alphabet,
                                       max_len=cfg["finetune"]["max_len"])
    if args.out:
        out = _out_dir(args)
        evaluation.save_report(report, out / "cer_report.json")
        _snapshot(cfg, out)
    print(f"CER {report.cer:.4f}")
    return 0


def cmd_trigrams(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    manifest = _require(args.manifest, "manifest")
    store = quantizer.load_label_store(_require(args.labels, "label store"))
    samples = dataset.load_manifest(manifest)
    groups = quantizer.trigram_report(store, samples, top_n=args.top)
    crop_dir = out / "crops"
    crop_dir.mkdir(exist_ok=True)
    report = []
    for rank, group in enumerate(groups):
        crops = []
        for sample_id, position, crop in group.crops:
            rel = f"crops/t{rank:03d}_{sample_id}_{position}.pgm"
            dataset.write_pgm(out / rel, crop)
            crops.append({"id": sample_id, "patch": position, "image": rel})
        report.append({"trigram": list(group.trigram), "count": group.count,
                       "crops": crops})
    with open(out / "trigram_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _snapshot(cfg, out)
    print(f"trigram report: {len(report)} groups")
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    series = []
    for path in args.metrics:
        path = _require(path, "metrics file")
        xs, ys = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                if args.metric in row and row[args.metric] is not None:
                    xs.append(float(row["iter"]))
                    ys.append(float(row[args.metric]))
        if not xs:
            raise EmptyInputError(f"{path} has no {args.metric!r} values")
        series.append((Path(path).stem, xs, ys))
    if not series:
        raise EmptyInputError("no metrics files given")
    charts.write_line_chart(series, out / "chart.svg", out / "chart.csv",
                            xlabel="iteration", ylabel=args.metric)
    print(out / "chart.svg")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _apply_threads(args) -> None:
    global _thread_limiter
    threads = args.threads
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else None
    if threads is None:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        print("threadpoolctl unavailable; --threads ignored", file=sys.stderr)
        return
    _thread_limiter = threadpool_limits(limits=threads)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (sectioned key=value)")
    common.add_argument("--seed", type=int, help="override every section's seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int,
                        help=f"BLAS thread cap (default: ${THREADS_ENV})")

    parser = argparse.ArgumentParser(prog="linequant",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic corpus")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-quantizer", parents=[common],
                       help="fit the K-Means codebook on frozen features")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_fit_quantizer)

    p = sub.add_parser("label", parents=[common],
                       help="assign codebook labels to every line")
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("pretrain", parents=[common],
                       help="masked label prediction pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="supervised fine-tuning of the recognizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-encoder", help="pre-trained encoder checkpoint")
    p.add_argument("--init-full", help="full transfer-learning checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="compute corpus CER")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trigrams", parents=[common],
                       help="report identically-labeled patch trigrams")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_trigrams)

    p = sub.add_parser("plot", parents=[common],
                       help="line chart + CSV from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--metric", default="loss")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return 4
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 5
    except EmptyInputError as exc:
        print(f"empty input: {exc}", file=sys.stderr)
        return 6
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except LinequantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
