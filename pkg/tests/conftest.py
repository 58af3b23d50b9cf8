import pytest
from hypothesis import HealthCheck, settings

from adapt.cohort import CohortConfig, generate_cohort, split_cohort
from adapt.model import ModelConfig
from adapt.pipeline import RunConfig, run_stage1, run_stage2, run_stage3
from adapt.stage1 import Stage1Config
from adapt.stage2 import Stage2Config
from adapt.stage3 import Stage3Config

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_cohort_config(**kw) -> CohortConfig:
    base = dict(n_wsis=60, patches_per_wsi=12, d_raw=6, pd_per_class=40, seed=3)
    base.update(kw)
    return CohortConfig(**base)


def small_run_config(**kw) -> RunConfig:
    return RunConfig(
        cohort=small_cohort_config(),
        model=ModelConfig(d_raw=6, d_hidden=8, d_latent=5),
        stage1=Stage1Config(epochs=6, phase1_epochs=2, phase3_epochs=1, batch_size=32, lr=3e-3),
        stage2=Stage2Config(epochs=3, lr=1e-3),
        stage3=Stage3Config(epochs=4, lr=3e-3),
        m=3,
        seed=kw.pop("seed", 3),
        **kw,
    )


@pytest.fixture(scope="session")
def small_cfg():
    return small_run_config()


@pytest.fixture(scope="session")
def small_cohort(small_cfg):
    cohort = generate_cohort(small_cfg.cohort_config())
    return cohort, split_cohort(cohort.bags, small_cfg.split, small_cfg.seed)


@pytest.fixture(scope="session")
def trained(small_cfg, small_cohort):
    """Small models after each stage, shared by the module tests (read-only)."""
    cohort, split = small_cohort
    m1, r1 = run_stage1(small_cfg, cohort, split)
    m2, r2 = run_stage2(small_cfg, split, m1)
    m3, r3 = run_stage3(small_cfg, split, m2)
    return {"models": {1: m1, 2: m2, 3: m3}, "reports": {1: r1, 2: r2, 3: r3}, "cohort": cohort, "split": split}


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
