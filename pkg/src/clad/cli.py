"""Command-line pipeline: synth -> prepare -> pretrain -> finetune -> evaluate / predict.

Every command reads one YAML run configuration and communicates with the
others only through files in the work directory::

    corpus/       synthetic or copied raw logs
    samples/      train/val/test CLADDS1 containers and manifest.json
    checkpoints/  pretrained.ckpt, finetuned-ema.ckpt
    reports/      pretrain_history.jsonl, history.jsonl, metrics.json, predictions.csv
    run_manifest.json

``CLAD_WORK_DIR`` overrides ``paths.work_dir`` from the configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from . import __version__
from .errors import CladError, ConfigError, MissingArtifactError

log = logging.getLogger("clad")

WORK_DIR_ENV = "CLAD_WORK_DIR"
MODEL_PRESETS = ("full", "desk", "tiny")


@dataclass
class SynthSection:
    n_windows: int = 2000
    window_size: int = 100
    anomaly_ratio: float = 0.1
    kinds: Optional[list] = None
    file_name: str = "synth.log"


@dataclass
class CompressorSection:
    # keep the reference cache across windows, compressing in window order
    carry_state: bool = False


@dataclass
class RunConfig:
    """Resolved run configuration; section dicts are validated by their module's dataclasses."""

    dataset: dict = field(default_factory=dict)
    synth: SynthSection = field(default_factory=SynthSection)
    compressor: CompressorSection = field(default_factory=CompressorSection)
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    deterministic: bool = False
    base_dir: str = "."  # directory relative paths resolve against

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping at the top level")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        d = dict(d)
        sections = {}
        for key, kind in (("synth", SynthSection), ("compressor", CompressorSection)):
            raw = d.pop(key, None) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            try:
                sections[key] = kind(**raw)
            except TypeError as exc:
                raise ConfigError(f"{key} section: {exc}") from exc
        for key in ("dataset", "model", "pretrain", "finetune", "paths"):
            if d.get(key) is None:
                d[key] = {}
            elif not isinstance(d[key], dict):
                raise ConfigError(f"section {key!r} must be a mapping")
        return cls(base_dir=str(base_dir), **sections, **d)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides=(), seed=None, deterministic=None) -> "RunConfig":
        """Read ``path`` (or start from defaults) and apply command-line overrides."""
        if path is None:
            data, base = {}, Path.cwd()
        else:
            p = Path(path)
            try:
                data = yaml.safe_load(p.read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
            base = p.resolve().parent
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping at the top level")
        apply_overrides(data, overrides)
        if seed is not None:
            data["seed"] = seed
        if deterministic:
            data["deterministic"] = True
        return cls.from_dict(data, base_dir=base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- resolution ----------------------------------------------------------

    @property
    def work_dir(self) -> Path:
        env = os.environ.get(WORK_DIR_ENV)
        raw = env if env else self.paths.get("work_dir", "work")
        return self._resolve(raw)

    def _resolve(self, raw) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def dir(self, name) -> Path:
        override = self.paths.get(name)
        return self._resolve(override) if override else self.work_dir / name

    def dataset_spec(self):
        from .ingest import DatasetSpec

        d = dict(self.dataset)
        d.setdefault("name", "synth")
        if "entry_file" in d:
            d["entry_file"] = str(self._resolve(d["entry_file"]))
        else:
            d["entry_file"] = str(self.dir("corpus") / self.synth.file_name)
            d.setdefault("window_size", self.synth.window_size)
        if d.get("label_table"):
            d["label_table"] = str(self._resolve(d["label_table"]))
        d["seed"] = self.seed
        try:
            return DatasetSpec(**d)
        except TypeError as exc:
            raise ConfigError(f"dataset section: {exc}") from exc

    def model_config(self):
        from .model import ModelConfig, desk_config, tiny_config

        d = dict(self.model)
        preset = d.pop("preset", "full")
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"model.preset must be one of {MODEL_PRESETS}")
        d["seed"] = self.seed
        build = {"full": ModelConfig, "desk": desk_config, "tiny": tiny_config}[preset]
        try:
            return build(**d)
        except TypeError as exc:
            raise ConfigError(f"model section: {exc}") from exc

    def pretrain_config(self):
        from .pretrain import PretrainConfig

        return _section(PretrainConfig, self.pretrain, "pretrain", seed=self.seed)

    def finetune_config(self):
        from .finetune import FinetuneConfig

        d = {k: v for k, v in self.finetune.items() if k != "from_pretrained"}
        return _section(FinetuneConfig, d, "finetune", seed=self.seed)

    @property
    def from_pretrained(self) -> bool:
        return bool(self.finetune.get("from_pretrained", True))


def _section(cls, d, name, **forced):
    d = dict(d)
    d.update(forced)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{name} section: {exc}") from exc


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {pair!r}: {exc}") from exc
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return cfg


# -- helpers -------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `clad {producer}` first")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _record_run(run: RunConfig, command: str, outputs) -> None:
    """Merge this command's outputs into run_manifest.json (no timestamps, so reruns are byte-identical)."""
    root = run.work_dir.resolve()
    path = root / "run_manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["version"] = __version__
    manifest["commands"][command] = {
        "config_hash": run.config_hash(),
        "seed": run.seed,
        "deterministic": run.deterministic,
        "outputs": {p.resolve().relative_to(root).as_posix(): _sha256(p) for p in outputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _load_split(run: RunConfig, name: str):
    from .compressor import read_container

    return read_container(_require(run.dir("samples") / f"{name}.cladds", "prepare"))


def set_determinism(seed: int, deterministic: bool) -> None:
    import numpy as np
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# -- commands ------------------------------------------------------------------

def cmd_synth(run: RunConfig) -> list:
    from .synthgen import generate_corpus, write_corpus

    s = run.synth
    corpus = generate_corpus(run.seed, s.n_windows, s.window_size, s.anomaly_ratio, s.kinds)
    out = run.dir("corpus")
    out.mkdir(parents=True, exist_ok=True)
    path = out / s.file_name
    try:
        write_corpus(path, corpus)
    except OSError as exc:
        raise ConfigError(f"cannot write corpus to {out}: {exc.strerror}") from exc
    log.info("wrote %d windows (%d anomalous) to %s", len(corpus), corpus.anomaly_count, path)
    return [path, path.with_suffix(".windows.csv")]


def cmd_prepare(run: RunConfig) -> list:
    from .compressor import CWBS1, write_container
    from .ingest import build_windows, split, write_manifest

    spec = run.dataset_spec()
    if not Path(spec.entry_file).exists():
        producer = "synth" if "entry_file" not in run.dataset else "prepare (check dataset.entry_file)"
        raise MissingArtifactError(f"{spec.entry_file} not found; run `clad {producer}` first")
    windows = build_windows(spec)
    codec = CWBS1(carry_state=run.compressor.carry_state)
    compressed = {w.window_id: codec.compress(w) for w in windows.windows}
    parts = split(windows.windows, spec)
    out = run.dir("samples")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    totals = {}
    for name, part in zip(SPLIT_NAMES, parts):
        cws = [compressed[w.window_id] for w in part]
        totals[name] = {"compressed_bytes": sum(len(c.stream) for c in cws),
                        "original_bytes": sum(c.original_byte_count for c in cws)}
        p = out / f"{name}.cladds"
        write_container(p, cws)
        paths.append(p)
    manifest = out / "manifest.json"
    write_manifest(manifest, spec, *parts, extra={"bytes": totals, "entry_file": Path(spec.entry_file).name})
    log.info("prepared %s", ", ".join(f"{n}={len(p)}" for n, p in zip(SPLIT_NAMES, parts)))
    return paths + [manifest]


def cmd_pretrain(run: RunConfig) -> list:
    from .model import CLAD, save_checkpoint
    from .pretrain import pretrain

    train = _load_split(run, "train")
    cfg = run.pretrain_config()
    model = CLAD(run.model_config())
    history = pretrain(model, [w.stream for w in train], cfg)
    ck, rep = run.dir("checkpoints"), run.dir("reports")
    ck.mkdir(parents=True, exist_ok=True)
    rep.mkdir(parents=True, exist_ok=True)
    path = ck / "pretrained.ckpt"
    save_checkpoint(path, model, "pretrained", extra={"epochs": cfg.epochs, "config_hash": run.config_hash()})
    hist = rep / "pretrain_history.jsonl"
    _write_jsonl(hist, history)
    return [path, hist]


def cmd_finetune(run: RunConfig) -> list:
    from .finetune import finetune
    from .model import CLAD, load_checkpoint, save_checkpoint

    train, val = _load_split(run, "train"), _load_split(run, "val")
    mcfg = run.model_config()
    if run.from_pretrained:
        src = _require(run.dir("checkpoints") / "pretrained.ckpt", "pretrain")
        model, _ = load_checkpoint(src, config=mcfg, expected_tag="pretrained")
    else:
        log.info("cold start: fine-tuning from random initialization")
        model = CLAD(mcfg)
    cfg = run.finetune_config()
    ck, rep = run.dir("checkpoints"), run.dir("reports")
    ck.mkdir(parents=True, exist_ok=True)
    rep.mkdir(parents=True, exist_ok=True)
    hist = rep / "history.jsonl"
    hist.write_text("")

    def on_epoch(rec):
        with open(hist, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    result = finetune(model, train, val, cfg, on_epoch=on_epoch)
    path = ck / "finetuned-ema.ckpt"
    save_checkpoint(path, model, "finetuned-ema", state_dict=result.best_state,
                    extra={"best_epoch": result.state.best_epoch, "best_score": result.state.best_score,
                           "config_hash": run.config_hash()})
    return [path, hist]


def _finetuned(run: RunConfig):
    from .model import load_checkpoint

    path = _require(run.dir("checkpoints") / "finetuned-ema.ckpt", "finetune")
    model, _ = load_checkpoint(path, expected_tag="finetuned-ema")
    return model


def cmd_evaluate(run: RunConfig) -> list:
    from .evaluate import evaluate_model

    model = _finetuned(run)
    test = _load_split(run, "test")
    rep = run.dir("reports")
    rep.mkdir(parents=True, exist_ok=True)
    preds = rep / "predictions.csv"
    report = evaluate_model(model, test, run.dataset_spec().name, predictions_csv=preds)
    metrics = rep / "metrics.json"
    report.write(metrics)
    print(f"precision {report.precision:.4f}  recall {report.recall:.4f}  f1 {report.f1:.4f}"
          f"  (tp {report.tp} fp {report.fp} fn {report.fn} tn {report.tn})")
    return [metrics, preds]


def cmd_predict(run: RunConfig, input_path=None, output=None) -> list:
    from .compressor import read_container
    from .evaluate import predict_windows, write_predictions

    model = _finetuned(run)
    src = Path(input_path) if input_path else run.dir("samples") / "test.cladds"
    windows = read_container(_require(src, "prepare"))
    preds, logits = predict_windows(model, windows, return_logits=True)
    if output:
        write_predictions(output, windows, preds, logits)
        return [Path(output)]
    for w, p in zip(windows, preds):
        print(f"{w.window_id},{int(p)}")
    return []


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="deterministic kernels and single-threaded math")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override a config key, e.g. finetune.epochs=5")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="clad", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic labeled corpus")
    sub.add_parser("prepare", parents=[common], help="window, split and compress a corpus")
    sub.add_parser("pretrain", parents=[common], help="masked feature pre-training")
    sub.add_parser("finetune", parents=[common], help="supervised fine-tuning")
    sub.add_parser("evaluate", parents=[common], help="score the fine-tuned model on the test split")
    p = sub.add_parser("predict", parents=[common], help="label windows from a CLADDS1 container")
    p.add_argument("--input", help="CLADDS1 file (default: samples/test.cladds)")
    p.add_argument("--output", help="CSV path (default: print window_id,prediction lines)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = RunConfig.load(args.config, args.set, args.seed, args.deterministic)
        set_determinism(run.seed, run.deterministic)
        run.work_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "predict":
            outputs = cmd_predict(run, args.input, args.output)
        else:
            outputs = globals()[f"cmd_{args.command}"](run)
        outputs = [p for p in outputs if Path(p).resolve().is_relative_to(run.work_dir.resolve())]
        _record_run(run, args.command, [Path(p) for p in outputs])
    except CladError as exc:
        print(f"clad: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
