"""``mplssl`` command line: corpus, cluster, pretrain, adapt, params, probe, eval.

Settings come from an optional JSON config (``--config``) with sections
``model``, ``train``, ``adapter``, ``corpus``, ``cluster`` and ``probe``;
command-line flags override it. Exit codes: 0 success, 1 runtime failure,
2 configuration or validation failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, insert_adapters
from .checkpoint import frozen_hash, load_checkpoint, save_checkpoint
from .corpus import CorpusManifest, MixtureKind, build_corpus, source_waveforms
from .errors import ConfigurationError, InvalidInputError
from .labeler import cluster_corpus, load_label_store, save_label_store
from .model import FULL_SIZE, Model, ModelConfig, count_params, normalize_route
from .probe import ProbeConfig, run_retention_probe, run_se_probe, run_ss_probe
from .signal import write_wav
from .train import TrainConfig, build_dataset, evaluate_msp, prepare_model, pretrain

log = logging.getLogger("mplssl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.jsonl"
CODEBOOK = "codebook.bin"
LABELS = "labels"
ADAPTER_WIDTHS = (64, 128, 256, 512)


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_hash(directory) -> str:
    """Hash of every file under ``directory`` (relative names + contents)."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return cfg


def _pick(flag, section: dict, key: str, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _seed(args, cfg) -> int:
    seed = _pick(args.seed, cfg, "seed", None)
    if seed is None:
        raise ConfigurationError("a seed is required (--seed or \"seed\" in the config)")
    return int(seed)


def _threads(args, cfg) -> int:
    n = int(_pick(args.threads, cfg, "threads", 1))
    if n < 1:
        raise ConfigurationError("--threads must be >= 1")
    return 1 if os.environ.get("MPL_SSL_DETERMINISTIC") == "1" else n


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{what} not found: {p}")
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg.get("model", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad model section: {exc}") from exc


def _train_config(args, cfg: dict, seed: int, mode: str) -> TrainConfig:
    sec = dict(cfg.get("train", {}))
    sec.update({k: v for k, v in {"total_steps": args.steps, "peak_lr": args.lr,
                                  "batch_size": args.batch_size}.items() if v is not None})
    sec["seed"] = seed
    sec["mode"] = mode
    if getattr(args, "kinds", None):
        sec["kinds"] = parse_kinds(args.kinds)
    try:
        return TrainConfig(**sec)
    except TypeError as exc:
        raise ConfigurationError(f"bad train section: {exc}") from exc


def parse_kinds(text: str) -> tuple:
    by_name = {k.value.lower(): k.value for k in MixtureKind}
    by_name.update({k.name.lower(): k.value for k in MixtureKind})
    try:
        return tuple(by_name[k.strip().lower()] for k in text.split(",") if k.strip())
    except KeyError as exc:
        raise ConfigurationError(f"unknown mixture kind {exc.args[0]!r}") from exc


def _probe_config(args, cfg: dict, seed: int) -> ProbeConfig:
    sec = dict(cfg.get("probe", {}))
    if args.probe_steps is not None:
        sec["steps"] = args.probe_steps
    sec["seed"] = seed
    try:
        return ProbeConfig(**sec)
    except TypeError as exc:
        raise ConfigurationError(f"bad probe section: {exc}") from exc


def _manifest(args) -> CorpusManifest:
    return CorpusManifest.load(_need(args.manifest, "manifest"))


def _labels(args, manifest) -> dict:
    d = _need(args.labels, "label directory")
    try:
        return load_label_store(d, [r.id for r in manifest.records])
    except FileNotFoundError as exc:
        raise ConfigurationError(f"missing label file: {exc.filename}") from exc


def split_records(manifest: CorpusManifest, test_fraction: float):
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("--test-fraction must lie in (0, 1)")
    n_test = max(1, int(round(test_fraction * len(manifest.records))))
    return manifest.records[:-n_test], manifest.records[-n_test:]


# -- commands --------------------------------------------------------------------

def cmd_corpus(args, cfg) -> dict:
    sec = cfg.get("corpus", {})
    seed = _seed(args, cfg)
    n = int(_pick(args.n, sec, "n", 8))
    duration = float(_pick(args.duration, sec, "duration_s", 2.0))
    manifest = build_corpus(n, seed, duration, threads=_threads(args, cfg))
    out = _out(args, "corpus")
    manifest.save(out / MANIFEST)
    if not args.no_audio:
        sources = out / "sources"
        sources.mkdir(exist_ok=True)
        for rec in manifest.records:
            speech, noise = source_waveforms(rec, manifest.sample_rate)
            for sid, w in zip(rec.source_ids, speech):
                write_wav(sources / f"{sid}.wav", w)
            if noise is not None:
                write_wav(sources / f"{rec.noise_id}.wav", noise)
    return {"manifest": str(out / MANIFEST), "counts": manifest.counts,
            "manifest_sha256": file_hash(out / MANIFEST)}


def cmd_cluster(args, cfg) -> dict:
    sec = cfg.get("cluster", {})
    seed = _seed(args, cfg)
    manifest = _manifest(args)
    n_classes = int(_pick(args.classes, sec, "n_classes", cfg.get("model", {}).get("n_classes", 100)))
    iters = int(_pick(args.iters, sec, "max_iters", 50))
    codebook, labels = cluster_corpus(manifest, n_classes, iters, seed)
    out = _out(args, "labels")
    codebook.save(out / CODEBOOK)
    save_label_store(out / LABELS, labels)
    return {"codebook": str(out / CODEBOOK), "n_classes": n_classes, "n_records": len(labels),
            "codebook_sha256": file_hash(out / CODEBOOK), "labels_sha256": tree_hash(out / LABELS)}


def _train_and_save(args, cfg, model: Model, mode: str, extra: dict) -> dict:
    seed = _seed(args, cfg)
    manifest = _manifest(args)
    if args.test_fraction:
        train_records, _ = split_records(manifest, args.test_fraction)
        manifest = manifest.subset(train_records)
    tcfg = _train_config(args, cfg, seed, mode)
    data = build_dataset(manifest, _labels(args, manifest), model.cfg.n_classes, tcfg.kinds,
                         threads=_threads(args, cfg))
    out = _out(args, "run")
    before = frozen_hash(prepare_model(model, mode)) if mode == "adapter" else None
    result = pretrain(data, model, tcfg, out_dir=out)
    final = out / "final.ckpt"
    save_checkpoint(final, result.model, result.state, {"train_config": tcfg.to_json()})
    summary = {"checkpoint": str(final), "steps": result.state.step,
               "first_loss": result.trace[0]["loss"] if result.trace else None,
               "last_loss": result.trace[-1]["loss"] if result.trace else None,
               "checkpoint_sha256": file_hash(final), **extra}
    if before is not None:
        summary["frozen_hash_before"] = before
        summary["frozen_hash_after"] = frozen_hash(result.model)
        summary["frozen_unchanged"] = before == summary["frozen_hash_after"]
    return summary


def cmd_pretrain(args, cfg) -> dict:
    seed = _seed(args, cfg)
    mode = args.mode or cfg.get("train", {}).get("mode", "full")
    if mode == "adapter":
        raise ConfigurationError("use the 'adapt' command for adapter-mode training")
    if args.init:
        model, _, _ = load_checkpoint(_need(args.init, "checkpoint"))
        if args.heads == 2 and model.heads == 1:
            model = model.add_second_head(seed)
    else:
        model = Model.init(_model_config(cfg), seed=seed, heads=args.heads or 2)
    return _train_and_save(args, cfg, model, mode, {"heads": model.heads})


def cmd_adapt(args, cfg) -> dict:
    seed = _seed(args, cfg)
    model, _, _ = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    if not model.has_adapters:
        if not args.insert:
            raise ConfigurationError("checkpoint has no adapters; pass --insert to add them")
        hidden = int(_pick(args.hidden, cfg.get("adapter", {}), "hidden", 16))
        model = insert_adapters(model, AdapterConfig(hidden=hidden), seed=seed)
    if model.heads == 1:
        model = model.add_second_head(seed)
    return _train_and_save(args, cfg, model, "adapter", {"adapter_hidden": model.adapter_cfg.hidden})


def params_table(full: bool, hidden=ADAPTER_WIDTHS, cfg: ModelConfig | None = None) -> list:
    mcfg = FULL_SIZE if full else (cfg or ModelConfig())
    one = count_params(mcfg, heads=1)
    two = count_params(mcfg, heads=2)
    rows = [{"row": "backbone+1 head", "total": one.total, "trainable": one.trainable, "delta": 0},
            {"row": "backbone+2 heads", "total": two.total, "trainable": two.trainable,
             "delta": two.total - one.total}]
    for h in hidden:
        c = count_params(mcfg, adapters=AdapterConfig(hidden=h), heads=2, mode="adapter")
        rows.append({"row": f"adapter h={h}", "total": c.total, "trainable": c.trainable,
                     "delta": c.total - two.total,
                     "trainable_fraction": c.trainable / c.total})
    return rows


def format_table(rows: list) -> str:
    cols = ["row", "total", "trainable", "delta"]
    cells = [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cols, widths)))]
    for x in cells:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(x, widths))))
    return "\n".join(lines)


def cmd_params(args, cfg) -> dict:
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else ADAPTER_WIDTHS
    rows = params_table(args.full, hidden, None if args.full else _model_config(cfg))
    if not args.json_only:
        print(format_table(rows), file=sys.stderr)
    return {"config": "full" if args.full else "desk", "rows": rows}


def _probe_one(task: str, model, route, manifest, labels, pcfg, ckpt_id, test_fraction):
    train_records, test_records = split_records(manifest, test_fraction)
    if task == "ss":
        return run_ss_probe(model, route, train_records, test_records, pcfg, checkpoint_id=ckpt_id)
    if task == "se":
        return run_se_probe(model, route, train_records, test_records, pcfg, checkpoint_id=ckpt_id)
    if labels is None:
        raise ConfigurationError("the retention probe needs --labels")
    return run_retention_probe(model, route, train_records, test_records, labels, pcfg, checkpoint_id=ckpt_id)


def cmd_probe(args, cfg) -> dict:
    seed = _seed(args, cfg)
    ckpt = _need(args.checkpoint, "checkpoint")
    model, _, _ = load_checkpoint(ckpt)
    route = normalize_route(args.route or "I")
    manifest = _manifest(args)
    labels = _labels(args, manifest) if args.labels else None
    report = _probe_one(args.task, model, route, manifest, labels, _probe_config(args, cfg, seed),
                        file_hash(ckpt)[:16], args.test_fraction or 0.2)
    out = _out(args, "reports")
    path = out / f"{args.task}_route{route}.json"
    report.save(path)
    return report.to_json()


def cmd_eval(args, cfg) -> dict:
    ckpt = _need(args.checkpoint, "checkpoint")
    model, _, _ = load_checkpoint(ckpt)
    manifest = _manifest(args)
    _, test_records = split_records(manifest, args.test_fraction or 0.2)
    test = manifest.subset(test_records)
    data = build_dataset(test, _labels(args, test), model.cfg.n_classes, threads=_threads(args, cfg))
    result = {"checkpoint_id": file_hash(ckpt)[:16], "n_records": len(test_records),
              **evaluate_msp(model, data, seed=_seed(args, cfg))}
    _write_json(_out(args, "reports") / "eval.json", result)
    return result


COMMANDS = {"corpus": cmd_corpus, "cluster": cmd_cluster, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "params": cmd_params, "probe": cmd_probe, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--route", choices=["I", "II"])
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mplssl", description="Multi-label masked speech pre-training toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("corpus", parents=[common], help="build a synthetic mixture corpus")
    p.add_argument("--n", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--no-audio", action="store_true", help="skip the sources/*.wav fixtures")

    p = sub.add_parser("cluster", parents=[common], help="MFCC k-means pseudo labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--iters", type=int)

    for name, helptext in (("pretrain", "masked multi-label pre-training"),
                           ("adapt", "adapter-mode pre-training on a frozen backbone")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--kinds", help="comma-separated subset of Raw,Noisy,Overlapped,NoisyOverlapped")
        p.add_argument("--test-fraction", type=float, default=0.0,
                       help="hold out this tail fraction of the manifest")
        if name == "pretrain":
            p.add_argument("--mode", choices=["full", "finetune-unfrozen"])
            p.add_argument("--heads", type=int, choices=[1, 2])
            p.add_argument("--init", help="start from this checkpoint")
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--insert", action="store_true", help="insert adapters if absent")
            p.add_argument("--hidden", type=int)

    p = sub.add_parser("params", parents=[common], help="parameter-count table")
    p.add_argument("--full", action="store_true", help="full-size configuration")
    p.add_argument("--hidden", help="comma-separated adapter widths")
    p.add_argument("--json-only", action="store_true")

    p = sub.add_parser("probe", parents=[common], help="downstream probe report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=["ss", "se", "retention"], required=True)
    p.add_argument("--labels")
    p.add_argument("--probe-steps", type=int)
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("eval", parents=[common], help="masked-prediction accuracy on held-out records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--test-fraction", type=float)
    return parser


@contextlib.contextmanager
def _numerics():
    if os.environ.get("MPL_SSL_DETERMINISTIC") != "1":
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # env vars only help before numpy loads its BLAS
        yield
        return
    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        with _numerics():
            result = COMMANDS[args.command](args, cfg)
    except (ConfigurationError, InvalidInputError, FileNotFoundError, NotADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(type(x).__name__)


if __name__ == "__main__":
    sys.exit(main())
