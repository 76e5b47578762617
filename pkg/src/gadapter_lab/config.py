"""Experiment configuration: one JSON document drives every subcommand.

The document is parsed once, normalized (CLI overrides applied, seed
offsets folded in), and hashed; the resulting digest is embedded in every
CSV artifact and recorded in the run manifest so outputs always identify
the configuration that produced them. The digest covers everything except
the output directory, which changes where artifacts land but not what
they contain.

Sections (all optional at parse time; each subcommand demands the ones it
needs):

    out        output directory (string; --out overrides)
    gendata    {kind, count, n_range, seed, vocab, diameter_threshold, path}
    split      {source, ratios, seed}
    data       {train, val, test} JSON-lines paths
    structure  {s_bias, alpha, beta, unreachable}
    model      backbone fields (ModelConfig)
    pretrain   masked-node pretraining fields (TrainConfig)
    train      fine-tuning fields (TrainConfig)
    peft       list of fine-tuning method specs (PeftSpec)
    seeds      list of run seeds
    ablate     {r, structure} for the component/insertion sweep
    report     {bins, eps, profile_passes}

A --seed-offset K shifts gendata.seed, split.seed, pretrain.seed, and
every entry of seeds by K, and is folded in before the digest is taken.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .peft import PeftSpec
from .training import TrainConfig

_SECTIONS = (
    "out",
    "gendata",
    "split",
    "data",
    "structure",
    "model",
    "pretrain",
    "train",
    "peft",
    "seeds",
    "ablate",
    "report",
)
_GENDATA_KEYS = {"kind", "count", "n_range", "seed", "vocab", "diameter_threshold", "path"}
_SPLIT_KEYS = {"source", "ratios", "seed"}
_DATA_KEYS = {"train", "val", "test"}
_STRUCTURE_KEYS = {"s_bias", "alpha", "beta", "unreachable"}
_ABLATE_KEYS = {"r", "structure"}
_REPORT_KEYS = {"bins", "eps", "profile_passes"}

STRUCTURE_DEFAULTS = {"s_bias": "S1", "alpha": 0.5, "beta": 0.5, "unreachable": 0.0}
REPORT_DEFAULTS = {"bins": 100, "eps": 1e-8, "profile_passes": 100}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} option(s) {unknown}; allowed: {sorted(allowed)}")


def _build(section: str, cls, given: dict):
    try:
        return cls(**given)
    except TypeError as e:
        raise ConfigError(f"bad {section} section: {e}") from e


class ExperimentConfig:
    """Parsed, normalized experiment document plus its digest."""

    def __init__(self, payload: dict, out_override: str | None = None, seed_offset: int = 0):
        if not isinstance(payload, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = sorted(set(payload) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s) {unknown}; allowed: {list(_SECTIONS)}")
        payload = json.loads(json.dumps(payload))  # deep copy, JSON-clean
        if seed_offset:
            for section in ("gendata", "split", "pretrain"):
                if section in payload and "seed" in payload[section]:
                    payload[section]["seed"] += seed_offset
            if "seeds" in payload:
                payload["seeds"] = [s + seed_offset for s in payload["seeds"]]
        if out_override is not None:
            payload["out"] = str(out_override)
        if "out" not in payload:
            raise ConfigError("config needs an 'out' directory (or pass --out)")
        self.payload = payload
        self.out = Path(payload["out"])

        self.gendata = self._section("gendata", _GENDATA_KEYS)
        self.split = self._section("split", _SPLIT_KEYS)
        self.data = self._section("data", _DATA_KEYS)

        structure = dict(STRUCTURE_DEFAULTS)
        structure.update(self._section("structure", _STRUCTURE_KEYS) or {})
        self.structure = structure

        report = dict(REPORT_DEFAULTS)
        report.update(self._section("report", _REPORT_KEYS) or {})
        self.report = report

        self.ablate = self._section("ablate", _ABLATE_KEYS)
        self.model_config = _build("model", ModelConfig, payload["model"]) if "model" in payload else None
        self.train_config = _build("train", TrainConfig, payload["train"]) if "train" in payload else None
        self.pretrain_config = _build("pretrain", TrainConfig, payload["pretrain"]) if "pretrain" in payload else None
        if "peft" in payload:
            if not isinstance(payload["peft"], list) or not payload["peft"]:
                raise ConfigError("peft section must be a non-empty list of method specs")
            self.peft_specs = tuple(_build(f"peft[{i}]", PeftSpec, d) for i, d in enumerate(payload["peft"]))
        else:
            self.peft_specs = ()
        if "seeds" in payload:
            seeds = payload["seeds"]
            if not isinstance(seeds, list) or not seeds or len(set(seeds)) != len(seeds):
                raise ConfigError("seeds must be a non-empty list of distinct integers")
            self.seeds = tuple(int(s) for s in seeds)
        else:
            self.seeds = ()

    def _section(self, name: str, allowed: set[str]) -> dict | None:
        given = self.payload.get(name)
        if given is None:
            return None
        if not isinstance(given, dict):
            raise ConfigError(f"{name} section must be a JSON object")
        _check_keys(name, given, allowed)
        return given

    @property
    def digest(self) -> str:
        identity = {k: v for k, v in self.payload.items() if k != "out"}
        blob = json.dumps(identity, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def section_digest(self, *sections: str) -> str:
        """Digest over a subset of sections (e.g. what pretraining depends on)."""
        identity = {k: self.payload.get(k) for k in sorted(sections)}
        blob = json.dumps(identity, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def require(self, *sections: str) -> None:
        attr = {
            "model": self.model_config,
            "train": self.train_config,
            "pretrain": self.pretrain_config,
            "peft": self.peft_specs,
            "seeds": self.seeds,
        }
        for section in sections:
            present = attr[section] if section in attr else self.payload.get(section)
            if not present:
                raise ConfigError(f"this subcommand needs a '{section}' config section")


def load_config(path, out_override: str | None = None, seed_offset: int = 0) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return ExperimentConfig(payload, out_override=out_override, seed_offset=seed_offset)
