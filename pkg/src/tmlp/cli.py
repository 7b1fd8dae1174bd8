"""Command-line entry point: ``tmlp run | validate-config | tokenize | list-experiments``.

Configuration layers, lowest to highest precedence: built-in defaults, preset,
TOML file, ``TMLP_*`` environment variables, command-line ``--key value``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .experiments import REGISTRY, run_experiment
from .experiments.context import CONTROL_THETAS, Context, Settings, bundled
from .experiments.report import file_sha256
from .lens import TunedLensConfig
from .model import LoadError, load_weights
from .tokenizer import BpeVocab, VocabError, encode, iter_encode, load_vocab

log = logging.getLogger("tmlp")

EXIT_OK, EXIT_EXPERIMENT, EXIT_CONFIG = 0, 1, 2
MAX_CONTEXT = 1024
PRESETS = {"paper": {}, "desk": {"sequence_count": 50}}
# experiments that read the evaluation corpus
CORPUS_FREE = {"knowledge_suite", "knowledge_extension", "kn_replication", "transplant", "garden_path"}


class ConfigError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass
class RunConfig:
    weights_path: str = ""
    vocab_path: str = field(default_factory=lambda: str(bundled("gpt2/vocab.json")))
    merges_path: str = field(default_factory=lambda: str(bundled("gpt2/merges.txt")))
    corpus_path: str = ""
    sequence_count: int = 500
    sequence_length: int = 1024
    lens_sequences: int = 100
    theta: float = 0.1
    exception_threshold: float = 1.0
    resamples: int = 10_000
    seed: int = 42
    bin_width: float = 0.05
    ig_steps: int = 20
    survey_tokens: int = 102_400
    reconstruct_tokens: int = 10_000
    random_init_seed: int = 0
    experiments: list[str] = field(default_factory=list)
    output_dir: str = "results"
    workers: int = 1
    preset: str = "paper"

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if not 1 <= self.sequence_length <= MAX_CONTEXT:
            raise ConfigError(f"sequence_length must be in [1, {MAX_CONTEXT}], got {self.sequence_length}")
        for name in ("sequence_count", "resamples", "ig_steps", "workers", "survey_tokens", "reconstruct_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lens_sequences < 0:
            raise ConfigError("lens_sequences must be non-negative")
        if self.theta <= 0 or self.bin_width <= 0:
            raise ConfigError("theta and bin_width must be positive")
        unknown = [e for e in self.experiments if e not in REGISTRY]
        if unknown:
            raise ConfigError(f"unknown experiments {unknown}; see `tmlp list-experiments`")
        if not self.experiments:
            return
        needed = {"weights_path": self.weights_path, "vocab_path": self.vocab_path, "merges_path": self.merges_path}
        if any(e not in CORPUS_FREE for e in self.experiments):
            needed["corpus_path"] = self.corpus_path
        for key, path in needed.items():
            if not path:
                raise ConfigError(f"{key} is required for the selected experiments")
            if not Path(path).is_file():
                raise ConfigError(f"{key}: no such file {path!r}")

    def settings(self) -> Settings:
        return Settings(theta=self.theta, exception_threshold=self.exception_threshold, resamples=self.resamples,
                        seed=self.seed, bin_width=self.bin_width, ig_steps=self.ig_steps, workers=self.workers,
                        survey_tokens=self.survey_tokens, random_init_seed=self.random_init_seed,
                        control_thetas=CONTROL_THETAS, reconstruct_tokens=self.reconstruct_tokens,
                        lens=TunedLensConfig(n_sequences=self.lens_sequences))

    def snapshot(self) -> dict:
        """Result-relevant settings; output location and worker count are excluded."""
        d = dataclasses.asdict(self)
        for k in ("output_dir", "workers", "experiments"):
            d.pop(k)
        for k in ("weights_path", "vocab_path", "merges_path", "corpus_path"):
            d[k] = Path(d[k]).name if d[k] else ""
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    ftype = FIELDS[name].type
    try:
        if ftype == "list[str]":
            if isinstance(value, str):
                return [v.strip() for v in value.split(",") if v.strip()]
            return [str(v) for v in value]
        if ftype == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if ftype == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {ftype}") from None


def _layer(values: dict, source: str) -> dict:
    out = {}
    for k, v in values.items():
        key = k.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{source}: unknown key {k!r}")
        out[key] = _coerce(key, v)
    return out


def read_config_file(path: str | Path) -> dict:
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    # allow bootstrap = {resamples = ..., seed = ...}
    boot = raw.pop("bootstrap", None)
    if isinstance(boot, dict):
        raw.update(boot)
    return _layer(raw, str(path))


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    found = {k[5:].lower(): v for k, v in environ.items() if k.startswith("TMLP_") and k[5:].lower() in FIELDS}
    return _layer(found, "environment")


def resolve_config(config_file=None, cli: dict | None = None, environ=None) -> RunConfig:
    file_values = read_config_file(config_file) if config_file else {}
    env_values = env_overrides(environ)
    cli_values = _layer({k: v for k, v in (cli or {}).items() if v is not None}, "command line")
    merged: dict = {}
    for layer in (file_values, env_values, cli_values):
        merged.update(layer)
    preset = merged.get("preset", "paper")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = {**PRESETS[preset], **merged}
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# corpus


def ingest_corpus(path: str | Path, config: RunConfig, vocab: BpeVocab, extra_sequences: int = 0):
    """Non-overlapping windows in file order from offset 0.

    Returns (evaluation windows, extra windows); the extra windows (used to fit
    the tuned lens) start right after the evaluation windows.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: invalid UTF-8 at byte {e.start}") from None
    n, length = config.sequence_count, config.sequence_length
    need = (n + extra_sequences) * length
    ids = list(itertools.islice(iter_encode(text, vocab), need))
    if len(ids) < n * length:
        raise CorpusError(f"{path}: {len(ids)} tokens available, {n * length} needed "
                          f"for {n} sequences of {length}")
    windows = [ids[i * length:(i + 1) * length] for i in range(len(ids) // length)]
    return windows[:n], windows[n:n + extra_sequences]


# ---------------------------------------------------------------------------
# run


def run(config: RunConfig) -> int:
    out_dir = Path(config.output_dir)
    manifest = {"config_hash": config.digest(), "config": config.snapshot(), "experiments": []}
    ctx = None
    if config.experiments:
        try:
            weights = load_weights(config.weights_path)
            vocab = load_vocab(config.vocab_path, config.merges_path)
            sequences, lens_seqs = [], []
            snapshot = {"config_hash": manifest["config_hash"], "weights_sha256": file_sha256(config.weights_path)}
            if any(e not in CORPUS_FREE for e in config.experiments):
                extra = config.lens_sequences if "lens_arc" in config.experiments else 0
                sequences, lens_seqs = ingest_corpus(config.corpus_path, config, vocab, extra)
                if "lens_arc" in config.experiments and len(lens_seqs) < config.lens_sequences:
                    raise CorpusError(f"{config.corpus_path}: only {len(lens_seqs)} windows left for the "
                                      f"tuned lens after the evaluation corpus, {config.lens_sequences} needed")
                snapshot["corpus_sha256"] = file_sha256(config.corpus_path)
                snapshot["corpus_tokens"] = sum(len(s) for s in sequences)
            ctx = Context(weights, sequences, config.settings(), vocab, lens_seqs, snapshot=snapshot)
            manifest["inputs"] = snapshot
        except (OSError, LoadError, VocabError, CorpusError) as e:
            log.error("input error: %s", e)
            return EXIT_CONFIG

    status = EXIT_OK
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in config.experiments:
        entry = {"name": name, "status": "ok", "files": []}
        log.info("running %s", name)
        try:
            reports = run_experiment(name, ctx)
        except Exception as e:  # report and continue with the next experiment
            log.exception("experiment %s failed", name)
            entry.update(status="error", error=f"{name}: {type(e).__name__}: {e}")
            status = EXIT_EXPERIMENT
            manifest["experiments"].append(entry)
            continue
        entry["runtime_seconds"] = round(reports[0].runtime_seconds, 3) if reports else 0.0
        for r in reports:
            for path in r.write(out_dir):
                entry["files"].append({"path": path.name, "sha256": file_sha256(path)})
        manifest["experiments"].append(entry)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return status


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file of RunConfig keys")
    for name in FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmlp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    _add_config_options(sub.add_parser("run", help="run the selected experiments"))
    _add_config_options(sub.add_parser("validate-config", help="resolve and check a configuration"))
    tok = sub.add_parser("tokenize", help="print BPE token ids of text")
    tok.add_argument("text", nargs="?", help="text to encode (default: stdin)")
    tok.add_argument("--vocab-path", default=str(bundled("gpt2/vocab.json")))
    tok.add_argument("--merges-path", default=str(bundled("gpt2/merges.txt")))
    sub.add_parser("list-experiments", help="list registered experiments")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.verb == "list-experiments":
        for e in REGISTRY.values():
            print(f"{e.name:28s} {e.summary}")
        return EXIT_OK
    if args.verb == "tokenize":
        try:
            vocab = load_vocab(args.vocab_path, args.merges_path)
        except (OSError, VocabError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        text = args.text if args.text is not None else sys.stdin.read()
        print(" ".join(str(i) for i in encode(text, vocab)))
        return EXIT_OK

    cli = {k: getattr(args, k) for k in FIELDS}
    try:
        config = resolve_config(args.config, cli)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.verb == "validate-config":
        print(json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True))
        return EXIT_OK
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
