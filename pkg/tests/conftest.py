"""Shared fixtures.

The 20-seed suite battery backs three acceptance criteria (trend,
selectivity, ablation ordering) and takes a few minutes, so it runs at
most once per session and every test reads from the same rows. The
training recipe under test is the out-of-box RunConfig one.
"""

import dataclasses
import time

import pytest

from clapopt import evaluation, synth, train
from clapopt.config import RunConfig
from clapopt.planner import init_frozen_weights

N_SUITE_SEEDS = 20
N_SCOPE_SEEDS = 10


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def weights(run_config):
    return init_frozen_weights(run_config.planner)


@pytest.fixture(scope="session")
def small_dataset(run_config):
    # one roadblock, generator labels; enough for unit-level training tests
    return synth.generate_roadblock(11, run_config.spec)


def _recipe(run_config: RunConfig, seed: int) -> train.TrainConfig:
    return dataclasses.replace(run_config.train, init_seed=seed)


@pytest.fixture(scope="session")
def suite_rows(weights, run_config):
    """Per-(seed, roadblock) metrics for frozen/full/random-d*/unconstrained.

    clap_seconds accumulates only the frozen-eval + full-CLAP path, the
    computation the trend criterion budgets.
    """
    rows = []
    clap_seconds = 0.0
    for seed in range(1, N_SUITE_SEEDS + 1):
        for ds in synth.generate_suite(seed, run_config.n_roadblocks, run_config.spec):
            tc = _recipe(run_config, seed)
            layer = tc.extract_layer

            t0 = time.perf_counter()
            frozen = evaluation.evaluate(weights, None, None, ds.test_frames)
            res = train.train_clap(weights, ds.train_frames, tc, variant="full")
            pa, pb = res.prompt_pair.prompt_a, res.prompt_pair.prompt_b
            clap = evaluation.evaluate(weights, pa, pb, ds.test_frames)
            clap_seconds += time.perf_counter() - t0

            rand = train.train_clap(weights, ds.train_frames, tc, variant="random_dir")
            clap_r = evaluation.evaluate(weights, rand.prompt_pair.prompt_a,
                                         rand.prompt_pair.prompt_b, ds.test_frames)
            uncon_prompt, _ = train.train_unconstrained(weights, ds.train_frames, tc)
            rows.append({
                "seed": seed,
                "roadblock": ds.roadblock_id,
                "frozen_hard": frozen.hard_ade,
                "frozen_normal": frozen.normal_ade,
                "full_hard": clap.hard_ade,
                "full_normal": clap.normal_ade,
                "random_hard": clap_r.hard_ade,
                # criterion-4 displacements, each against its own method's
                # baseline: CLAP vs h(P_A) (the quantity L_reg constrains),
                # unconstrained vs the frozen planner
                "disp_clap": evaluation.normal_rep_displacement(
                    weights, ds.test_frames, pa, pb, layer, reference="prompt_a"),
                "disp_uncon": evaluation.normal_rep_displacement(
                    weights, ds.test_frames, uncon_prompt, None, layer,
                    reference="frozen"),
            })
    return {"rows": rows, "clap_seconds": clap_seconds}


@pytest.fixture(scope="session")
def scope_rows(weights, run_config):
    """Merged vs per-roadblock hard ADE, one row per seed."""
    rows = []
    for seed in range(1, N_SCOPE_SEEDS + 1):
        suite = synth.generate_suite(seed, run_config.n_roadblocks, run_config.spec)
        report = evaluation.compare_scope(weights, suite, _recipe(run_config, seed))
        rows.append((report.per_roadblock_hard, report.merged_hard))
    return rows
