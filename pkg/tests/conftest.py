"""Session-scoped fixtures shared across the suite.

The expensive artifacts (pretrained encoders, the desk-scale dataset, the
trained separator runs) are built exactly once per session; the acceptance
tests reuse them and only time the phases they are responsible for.
"""

import time

import pytest

from mixscene import pipeline
from mixscene.cli import main as cli_main
from mixscene.config import RunConfig

MINI_CFG_TEXT = """\
# reduced-scale configuration for CLI round trips
per_combo = 6
embed_dim = 32
pretrain_epochs = 8
pretrain_pairs_per_class = 12
epochs = 3
batch_size = 8
seeds = 0,1,2
"""


def run_cli(*args):
    rc = cli_main([str(a) for a in args])
    assert rc == 0, f"cli {' '.join(str(a) for a in args)} exited {rc}"


@pytest.fixture(scope="session")
def desk_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def desk_world(desk_cfg):
    """Roster, frozen encoders, dataset splits, and prototypes at desk scale."""
    t0 = time.perf_counter()
    roster = pipeline.build_roster(desk_cfg)
    pairs = pipeline.make_single_class_pairs(desk_cfg, roster)
    encoders = pipeline.pretrain(desk_cfg, roster, pairs)
    splits = pipeline.make_data(desk_cfg, roster)
    table = pipeline.make_prototypes(desk_cfg, encoders, roster, pairs)
    return {
        "roster": roster,
        "pairs": pairs,
        "encoders": encoders,
        "splits": splits,
        "table": table,
        "setup_seconds": time.perf_counter() - t0,
    }


def _train_and_score(cfg, mode, seed, world):
    t0 = time.perf_counter()
    result = pipeline.train_run(cfg, mode, seed, world["splits"],
                                world["encoders"], world["roster"])
    metrics = pipeline.evaluate_model(cfg, result.model, world["encoders"],
                                      world["table"], world["splits"]["test"],
                                      world["roster"])
    return result, metrics, time.perf_counter() - t0


@pytest.fixture(scope="session")
def a2a_runs(desk_cfg, desk_world):
    """Three seeded desk-scale runs of the default alignment mode, timed."""
    runs = {}
    for seed in desk_cfg.seed_list():
        result, metrics, seconds = _train_and_score(desk_cfg, "A2A", seed, desk_world)
        runs[seed] = {"result": result, "metrics": metrics, "seconds": seconds}
    return runs


@pytest.fixture(scope="session")
def ablation(desk_cfg, desk_world, a2a_runs):
    """All four methods x three seeds; reuses the timed A2A runs."""
    from mixscene.metrics import aggregate

    per_seed = {}
    models = {}
    for seed in desk_cfg.seed_list():
        run = a2a_runs[seed]
        models[("A2A", seed)] = run["result"].model
        bucket = per_seed.setdefault(("ours", "A2A"), {})
        for name, value in run["metrics"].items():
            bucket.setdefault(name, []).append(value)
    for mode in ("baseline", "A2V", "A2A_plus_A2V"):
        method = "baseline" if mode == "baseline" else "ours"
        for seed in desk_cfg.seed_list():
            result, metrics, _ = _train_and_score(desk_cfg, mode, seed, desk_world)
            models[(mode, seed)] = result.model
            bucket = per_seed.setdefault((method, mode), {})
            for name, value in metrics.items():
                bucket.setdefault(name, []).append(value)
    report = aggregate(per_seed, desk_cfg.seed_list(), desk_cfg.config_hash(),
                       {"n_classes": len(desk_world["roster"].classes)})
    return {"per_seed": per_seed, "report": report, "models": models}


def run_full_cli_pipeline(cfg_path, root):
    """make-data -> pretrain -> 12 training runs -> evaluate, all via the CLI."""
    run_cli("make-data", "--config", cfg_path, "--out", f"{root}/data")
    run_cli("pretrain-encoders", "--config", cfg_path, "--out", f"{root}/enc")
    for mode in pipeline.MODES:
        for seed in (0, 1, 2):
            run_cli("train", "--config", cfg_path, "--data", f"{root}/data",
                    "--encoders", f"{root}/enc",
                    "--out", f"{root}/runs/{mode}/seed_{seed}",
                    "--mode", mode, "--seed", seed)
    run_cli("evaluate", "--config", cfg_path, "--data", f"{root}/data",
            "--encoders", f"{root}/enc", "--runs", f"{root}/runs",
            "--out", f"{root}/results")


@pytest.fixture(scope="session")
def mini_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "mini.cfg"
    path.write_text(MINI_CFG_TEXT)
    return str(path)


@pytest.fixture(scope="session")
def mini_runs(mini_cfg_path, tmp_path_factory):
    """The reduced-scale pipeline executed twice with identical inputs."""
    roots = []
    for tag in ("first", "second"):
        root = tmp_path_factory.mktemp(f"mini_{tag}")
        run_full_cli_pipeline(mini_cfg_path, str(root))
        roots.append(str(root))
    return {"config": mini_cfg_path, "roots": roots}
