import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The 20-scene overfit experiment, trained once and shared across modules."""
    from lqseg.experiments import OverfitConfig, run_overfit
    from lqseg.synthdata import generate_dataset, serialize_dataset

    out = tmp_path_factory.mktemp("overfit")
    cfg = OverfitConfig()
    cfg.train.out_dir = str(out / "run")
    result = run_overfit(cfg)
    dataset = out / "train.lqds"
    serialize_dataset(generate_dataset(cfg.n_scenes, image_size=cfg.train.image_size,
                                       seed=cfg.data_seed), dataset)
    return result, dataset


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail, seconds = results[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status} {title} ({seconds:.1f}s): {detail}")
