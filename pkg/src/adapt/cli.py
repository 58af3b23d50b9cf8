"""Command-line front end.

A run directory holds every artifact of one pipeline::

    config.json                 resolved configuration, hash and seed
    cohort.bin, cohort.json     generated cohort and its summary
    stage{1,2,3}.ckpt           checkpoints, with stage{N}_log.csv training logs
    stage3_bce.ckpt             Stage-3 ablation trained without the attention loss
    importance.json, lemmas.json
    eval.json, eval_stage{N}.csv
    report/                     consolidated JSON, CSV and PNG bundle

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint, atomic_write, canonical_json, load_checkpoint, save_checkpoint
from .cohort import Cohort, load_cohort, save_cohort, split_cohort
from .errors import AdaptError, ConfigError, DependencyError
from .gradcheck import run_gradchecks, summarize
from .metrics import cross_activation, evaluate, low_attention_fraction
from .pipeline import RunConfig, held_out_patches, make_data, run_stage1, run_stage2, run_stage3
from .stage3 import batch_stats, prototype_importance, verify_lemma1, verify_lemma2

logger = logging.getLogger("adapt")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4
STAGE_ORDER = ("gen", "1", "2", "3", "eval")


class Run:
    """A resolved configuration bound to its output directory."""

    def __init__(self, cfg: RunConfig, out: Path, allow_mismatch: bool = False):
        self.cfg = cfg
        self.out = out
        self.allow_mismatch = allow_mismatch
        self.hash = cfg.config_hash()

    @property
    def stamp(self) -> str:
        return f"config_hash={self.hash} seed={self.cfg.seed}"

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, payload: dict) -> None:
        body = {"config_hash": self.hash, "seed": self.cfg.seed, **payload}
        atomic_write(self.path(name), json.dumps(json.loads(canonical_json(body)), indent=2, sort_keys=True) + "\n")

    def write_text(self, name: str, text: str) -> None:
        atomic_write(self.path(name), text)

    def _check_hash(self, found: str, what: str) -> None:
        if found == self.hash:
            return
        if not self.allow_mismatch:
            raise ConfigError(f"{what} was produced with config hash {found[:12]}, current config is {self.hash[:12]} (pass --allow-mismatch to proceed)")
        logger.warning("%s config hash %s differs from current %s; continuing", what, found[:12], self.hash[:12])

    def cohort(self) -> Cohort:
        path = self.path("cohort.bin")
        if not path.exists():
            raise DependencyError(f"{path} is missing: run the 'gen' stage first")
        meta = json.loads(self.path("cohort.json").read_text(encoding="utf-8"))
        self._check_hash(meta["config_hash"], "cohort")
        return load_cohort(path)

    def split(self):
        return split_cohort(self.cohort().bags, self.cfg.split, self.cfg.seed)

    def checkpoint(self, stage: int | str) -> Checkpoint:
        name = f"stage{stage}.ckpt"
        if not self.path(name).exists():
            raise DependencyError(f"{self.path(name)} is missing: stage {stage} must run first")
        ckpt = load_checkpoint(self.path(name))
        self._check_hash(ckpt.config_hash, f"stage-{stage} checkpoint")
        return ckpt

    def save_model(self, tag, model, report) -> None:
        save_checkpoint(self.path(f"stage{tag}.ckpt"), Checkpoint(model, self.hash, self.cfg.seed, report.summary))
        self.write_text(f"stage{tag}_log.csv", report.to_csv(self.stamp))


def resolve(args) -> Run:
    out = Path(args.out) if args.out else None
    if args.config is None and out is not None and (out / "config.json").exists():
        # a run directory's own config carries its hash alongside the fields
        data = json.loads((out / "config.json").read_text(encoding="utf-8"))
        data.pop("config_hash", None)
        cfg = RunConfig.from_dict(data)
    else:
        cfg = RunConfig.load(args.config)
    cfg = cfg.with_seed_override(args.seed)
    cfg = dataclasses.replace(cfg, output_dir=str(out) if out else cfg.output_dir)
    cfg.validate()
    return Run(cfg, Path(cfg.output_dir), getattr(args, "allow_mismatch", False))


def _write_config(run: Run) -> None:
    atomic_write(
        run.path("config.json"),
        json.dumps({**run.cfg.to_dict(include_output=False), "config_hash": run.hash}, indent=2, sort_keys=True) + "\n",
    )


# -- stages -------------------------------------------------------------------


def do_gen(run: Run) -> None:
    run.out.mkdir(parents=True, exist_ok=True)
    _write_config(run)
    cohort, split = make_data(run.cfg)
    save_cohort(run.path("cohort.bin"), cohort)
    run.write_json(
        "cohort.json",
        {
            "bags": len(cohort.bags),
            "labeled_patches": len(cohort.patches),
            "patch_classes": cohort.patches.class_counts(),
            "split": {k: len(v) for k, v in split.ids().items()},
            "grade_mix_note": "slide-level grade proportions are synthetic assumptions",
        },
    )
    logger.info("generated %d bags into %s", len(cohort.bags), run.out)


def do_train(run: Run, stage: int) -> None:
    cfg = run.cfg
    if stage == 1:
        cohort = run.cohort()
        split = split_cohort(cohort.bags, cfg.split, cfg.seed)
        model, report = run_stage1(cfg, cohort, split)
        run.save_model(1, model, report)
    elif stage == 2:
        prev = run.checkpoint(1).model
        model, report = run_stage2(cfg, run.split(), prev)
        run.save_model(2, model, report)
    elif stage == 3:
        prev = run.checkpoint(2).model
        split = run.split()
        model, report = run_stage3(cfg, split, prev)
        run.save_model(3, model, report)
        ablation, ab_report = run_stage3(cfg, split, prev, dataclasses.replace(cfg.stage3, use_attention_loss=False))
        run.save_model("3_bce", ablation, ab_report)
        write_importance(run, model, split.train)
        write_lemmas(run, model, split.train)
    else:
        raise ConfigError(f"unknown stage {stage}")
    logger.info("stage %d done: %s", stage, report.summary)


def write_importance(run: Run, model, bags) -> None:
    imp = prototype_importance(model, bags, run.cfg.stage3.j)
    run.write_json(
        "importance.json",
        {
            "j": run.cfg.stage3.j,
            "grades": {
                str(g): {"n_positive": v.n_positive, "ranking": [{"prototype": p, "score": s} for p, s in v.ranking]}
                for g, v in imp.items()
            },
        },
    )


def lemma_reports(run: Run, model, bags) -> dict:
    cfg = run.cfg.stage3
    lemma1 = verify_lemma1(model, bags, cfg)
    lemma2 = verify_lemma2(batch_stats(model, bags, cfg.j), cfg)
    return {"lemma1": lemma1, "lemma2": lemma2}


def write_lemmas(run: Run, model, bags) -> dict:
    reports = lemma_reports(run, model, bags)
    run.write_json("lemmas.json", reports)
    return reports


def do_eval(run: Run) -> None:
    cohort = run.cohort()
    split = split_cohort(cohort.bags, run.cfg.split, run.cfg.seed)
    j = run.cfg.stage2.j
    tags = [t for t in ("1", "2", "3", "3_bce") if run.path(f"stage{t}.ckpt").exists()]
    if not tags:
        raise DependencyError("no checkpoints to evaluate: stage 1 must run first")
    models = {t: run.checkpoint(t).model for t in tags}
    results = {t: evaluate(m, split.test, j=j) for t, m in models.items()}
    payload = {"split": "test", "threshold": 0.5, "j": j, "stages": {t: r.to_dict() for t, r in results.items()}}
    if "3" in models:
        m3 = models["3"]
        payload["low_attention"] = low_attention_fraction(m3, split.train, j=j)
        payload["cross_activation"] = cross_activation(m3, held_out_patches(cohort, split)).to_dict()
    for t, r in results.items():
        run.write_text(f"eval_stage{t}.csv", r.to_csv(run.stamp))
    run.write_json("eval.json", payload)
    logger.info("evaluated %s", ", ".join(f"stage{t} F1={r.macro_f1:.4f}" for t, r in results.items()))


def parse_stages(text: str) -> list[str]:
    stages = [s.strip() for s in text.split(",") if s.strip()]
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown or not stages:
        raise ConfigError(f"--stages takes a comma list from {','.join(STAGE_ORDER)}, got {text!r}")
    return sorted(set(stages), key=STAGE_ORDER.index)


def do_run(run: Run, stages: list[str]) -> None:
    for s in stages:
        if s == "gen":
            do_gen(run)
        elif s == "eval":
            do_eval(run)
        else:
            do_train(run, int(s))


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    do_gen(resolve(args))
    return EXIT_OK


def cmd_train(args) -> int:
    do_train(resolve(args), args.stage)
    return EXIT_OK


def cmd_eval(args) -> int:
    do_eval(resolve(args))
    return EXIT_OK


def cmd_run(args) -> int:
    do_run(resolve(args), parse_stages(args.stages))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import emit_report

    run = resolve(args)
    complete = emit_report(run.out)
    return EXIT_OK if complete else EXIT_DEPENDENCY


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.instances, seed=args.seed or 0)
    summary = summarize(results)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        atomic_write(Path(args.out) / "gradcheck.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ok = all(s["passed"] == s["instances"] for s in summary.values())
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_lemmas(args) -> int:
    run = resolve(args)
    model = run.checkpoint(3).model
    reports = write_lemmas(run, model, run.split().train)
    l1, l2 = reports["lemma1"], reports["lemma2"]
    print(f"lemma1: {l1['checked']} checks, holds={l1['holds']}, max_eps={l1['max_eps']:.3e}")
    print(f"lemma2: {len(l2['checks'])} checks, passed={l2['passed']}")
    return EXIT_OK if l1["holds"] and l2["passed"] else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapt", description="Prototype-based weakly supervised grading on synthetic cohorts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, run_flags=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration (defaults to <out>/config.json, then built-in defaults)")
        p.add_argument("--seed", type=int, help="root seed; overrides the config and ADAPT_SEED")
        p.add_argument("--out", help="run directory (defaults to the config's output_dir)")
        if run_flags:
            p.add_argument("--allow-mismatch", action="store_true", help="accept artifacts produced under a different config hash")
        p.set_defaults(func=func)
        return p

    add("gen", cmd_gen, "generate the synthetic cohort")
    add("train", cmd_train, "train one stage").add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    add("eval", cmd_eval, "evaluate every available checkpoint on the test split")
    add("report", cmd_report, "bundle a run directory into report/")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss", run_flags=False)
    p.add_argument("--instances", type=int, default=50)
    add("lemmas", cmd_lemmas, "check the attention-loss properties on the stage-3 checkpoint")
    add("run", cmd_run, "run several stages in order").add_argument("--stages", default=",".join(STAGE_ORDER))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except AdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
