"""Run configuration and the in-memory stage runners used by the CLI and the tests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import Cohort, CohortConfig, PatchDataset, Split, generate_cohort, split_cohort
from .errors import ConfigError
from .metrics import EvalResult, evaluate
from .model import ModelConfig, ModelState, init_model
from .stage1 import Stage1Config, train_stage1
from .stage2 import Stage2Config, train_stage2
from .stage3 import Stage3Config, train_stage3
from .training import TrainReport

logger = logging.getLogger(__name__)

SEED_ENV = "ADAPT_SEED"
ALLOWED_M = (3, 4, 5, 6)


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from None


@dataclass
class RunConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    m: int = 4
    seed: int = 7
    split: tuple = (0.7, 0.1, 0.2)
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if self.m not in ALLOWED_M:
            raise ConfigError(f"m must be one of {ALLOWED_M}, got {self.m}")
        if self.stage3.j != self.stage2.j:
            raise ConfigError("stage2.j and stage3.j must agree")
        self.cohort_config().validate()
        self.model_config().validate()
        self.stage1.validate()
        self.stage2.validate()
        self.stage3.validate()

    def cohort_config(self) -> CohortConfig:
        """The cohort is drawn from the run's root seed."""
        return dataclasses.replace(self.cohort, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, m=self.m)

    def to_dict(self, include_output: bool = True) -> dict:
        out = {
            "cohort": self.cohort.to_dict(),
            "model": self.model.to_dict(),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "stage3": self.stage3.to_dict(),
            "m": self.m,
            "seed": self.seed,
            "split": list(self.split),
        }
        if include_output:
            out["output_dir"] = self.output_dir
        return out

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of everything that affects results (not the output dir)."""
        text = json.dumps(self.to_dict(include_output=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        if "cohort" in data:
            try:
                kw["cohort"] = CohortConfig.from_dict(data["cohort"])
            except (TypeError, AttributeError) as exc:
                raise ConfigError(f"bad cohort config: {exc}") from None
        for name, cls_ in (("model", ModelConfig), ("stage1", Stage1Config), ("stage2", Stage2Config), ("stage3", Stage3Config)):
            if name in data:
                kw[name] = _from_dict(cls_, data[name], name)
        for name in ("m", "seed"):
            if name in data:
                if not isinstance(data[name], int) or isinstance(data[name], bool):
                    raise ConfigError(f"{name} must be an integer")
                kw[name] = data[name]
        if "split" in data:
            kw["split"] = tuple(float(r) for r in data["split"])
        if "output_dir" in data:
            kw["output_dir"] = str(data["output_dir"])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> RunConfig:
        if path is None:
            cfg = cls()
            cfg.validate()
            return cfg
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_seed_override(self, cli_seed: int | None = None, env: dict | None = None) -> RunConfig:
        """Apply ``--seed`` or, failing that, the ``ADAPT_SEED`` environment variable."""
        env = os.environ if env is None else env
        if cli_seed is not None:
            return dataclasses.replace(self, seed=int(cli_seed))
        if env.get(SEED_ENV):
            try:
                seed = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
            logger.info("seed overridden by %s=%d", SEED_ENV, seed)
            return dataclasses.replace(self, seed=seed)
        return self


def training_patches(cohort: Cohort, split: Split) -> PatchDataset:
    """Labeled patches whose source bag is in the training split, plus the extra benign draws."""
    train_ids = {b.wsi_id for b in split.train}
    keep = np.array([w == "" or w in train_ids for w in cohort.patches.source_wsi], dtype=bool)
    return cohort.patches.subset(keep)


def held_out_patches(cohort: Cohort, split: Split) -> PatchDataset:
    """Labeled patches drawn from test bags (diagnostics only)."""
    test_ids = {b.wsi_id for b in split.test}
    keep = np.array([w in test_ids for w in cohort.patches.source_wsi], dtype=bool)
    return cohort.patches.subset(keep)


def make_data(cfg: RunConfig) -> tuple[Cohort, Split]:
    cohort = generate_cohort(cfg.cohort_config())
    return cohort, split_cohort(cohort.bags, cfg.split, cfg.seed)


def run_stage1(cfg: RunConfig, cohort: Cohort, split: Split) -> tuple[ModelState, TrainReport]:
    model = init_model(cfg.model_config(), cfg.seed)
    return train_stage1(training_patches(cohort, split), model, cfg.stage1, cfg.seed)


def run_stage2(cfg: RunConfig, split: Split, model: ModelState) -> tuple[ModelState, TrainReport]:
    return train_stage2(split.train, split.val, model, cfg.stage2, cfg.seed)


def run_stage3(cfg: RunConfig, split: Split, model: ModelState, stage3: Stage3Config | None = None) -> tuple[ModelState, TrainReport]:
    return train_stage3(split.train, split.val, model, stage3 or cfg.stage3, cfg.seed)


@dataclass
class PipelineResult:
    cohort: Cohort
    split: Split
    models: dict[int, ModelState]
    reports: dict[int, TrainReport]
    test: dict[int, EvalResult]


def run_all(cfg: RunConfig, stages=(1, 2, 3)) -> PipelineResult:
    """Generate, split and train the requested stages in memory; evaluate each on the test split."""
    cfg.validate()
    cohort, split = make_data(cfg)
    models, reports = {}, {}
    model = None
    for stage in sorted(stages):
        if stage == 1:
            model, reports[1] = run_stage1(cfg, cohort, split)
        elif stage == 2:
            model, reports[2] = run_stage2(cfg, split, model)
        elif stage == 3:
            model, reports[3] = run_stage3(cfg, split, model)
        models[stage] = model
    test = {s: evaluate(m, split.test, j=cfg.stage2.j) for s, m in models.items()}
    return PipelineResult(cohort, split, models, reports, test)
