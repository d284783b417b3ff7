"""Acceptance gate: one test per primary criterion, at stated tolerances.

Each test registers a single PASS/FAIL line that the terminal summary
prints after the run. Timed criteria measure wall-clock on this machine;
the stated budgets assume one CPU core.
"""

import functools
import time

import numpy as np
import pytest
from click.testing import CliRunner

import conftest
from lfod.checkpoint import FINAL_CKPT_NAME, file_sha256
from lfod.cli import main as cli_main
from lfod.diffusion import DenoiseConfig, StridePolicy, build_schedule, denoise, ennoise
from lfod.metrics import ScoredSet, auroc, fpr_at_tpr, synth_benchmark
from lfod.network import LfdnConfig, init_params, lfdn_backward
from lfod.optim import AdamWState, adamw_update
from lfod.scoring import score_records
from lfod.training import TrainConfig, train
from helpers_grad import max_relative_gradient_error
from test_metrics import brute_force_auroc, sweep_fpr_at_tpr

# criterion 6 operating point: a sub-sigma shift keeps every AUROC off
# its ceiling, which is where the t-profile separates. t=5 beats t=1
# because the skip-step chain applies the denoiser several times (each
# pass removes another slice of the off-manifold offset) and score
# repeats average out the injected-noise variance that only exists for
# t > 1; t=100 decays because heavy noise makes the denoiser confuse
# mixture components. Margins at this point: t5-t1 +0.050, t5-t100
# +0.145, deterministic for fixed (config, seed, data).
SHAPE_SHIFT = 0.6
SHAPE_EPOCHS = 30
SHAPE_N_ID = 2048
SHAPE_REPEATS = 8


def criterion(num: int, title: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                conftest.ACCEPTANCE_LINES.append(f"FAIL [criterion {num}] {title}")
                raise
            conftest.ACCEPTANCE_LINES.append(f"PASS [criterion {num}] {title}")
        return wrapper
    return deco


@criterion(1, "gradient correctness: analytic vs central differences < 1e-4")
def test_gradient_correctness():
    started = time.time()
    cfg = LfdnConfig(input_dim=8, num_blocks=2)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(7)
    # zero-init output layers give zero gradients upstream; perturb all
    # tensors so every path carries signal
    for t in params.tensors.values():
        t += 0.05 * rng.standard_normal(size=t.shape)
    z = rng.standard_normal(size=(3, 8))
    z0 = rng.standard_normal(size=(3, 8))
    tsteps = np.array([1, 40, 100])

    worst = max_relative_gradient_error(params, z, tsteps, z0,
                                        h=1e-4, coords_per_tensor=10)
    elapsed = time.time() - started
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, f"gradient mismatch: {bad}"
    assert elapsed < 10.0, f"gradcheck took {elapsed:.1f}s"


@criterion(2, "perfect-oracle denoise recovers z0 within 1e-5 at all t")
def test_perfect_oracle_recovery():
    started = time.time()
    schedule = build_schedule()
    rng = np.random.default_rng(11)
    z0 = rng.standard_normal(size=24)
    oracle = lambda z, t: z0.copy()  # noqa: E731

    policies = [StridePolicy.random_uniform(), StridePolicy.fixed(1)]
    for t in (1, 5, 50, 100):
        for policy in policies:
            cfg = DenoiseConfig(t_start=t, stride_policy=policy,
                                eta=0.0, rng_seed=3)
            zt, _ = ennoise(z0, t, schedule, np.random.default_rng(5))
            recon = denoise(oracle, zt, t, cfg, schedule,
                            np.random.default_rng(9))
            err = float(np.max(np.abs(recon - z0)))
            assert err < 1e-5, f"t={t} {policy.describe()}: inf-norm {err:.2e}"
    elapsed = time.time() - started
    assert elapsed < 1.0, f"oracle denoise took {elapsed:.2f}s"


@criterion(3, "metric oracles: exact match on 100 random score sets")
def test_metric_oracles_exact():
    rng = np.random.default_rng(23)
    for case in range(100):
        n_id = int(rng.integers(1, 101))
        n_ood = int(rng.integers(1, 101))
        if rng.integers(2):  # ties matter: draw from a small integer grid
            id_scores = rng.integers(0, 12, size=n_id).astype(float)
            ood_scores = rng.integers(0, 12, size=n_ood).astype(float)
        else:
            id_scores = rng.standard_normal(n_id)
            ood_scores = rng.standard_normal(n_ood) + rng.uniform(0, 2)
        sset = ScoredSet.from_arrays(id_scores, ood_scores)
        target = float(rng.choice([0.5, 0.8, 0.95, 1.0]))

        assert auroc(sset) == brute_force_auroc(id_scores, ood_scores), \
            f"case {case}: auroc mismatch"
        assert fpr_at_tpr(sset, target) == \
            sweep_fpr_at_tpr(id_scores, ood_scores, target), \
            f"case {case}: fpr@tpr mismatch"


@criterion(4, "single-sample overfit: loss < 1e-3 within 500 steps at lr 1e-3")
def test_single_sample_overfit():
    # one frozen (z_t, t, z_0) triple: overfitting a single point is
    # guaranteed for a correct gradient, so this gates backprop + optimizer
    schedule = build_schedule()
    cfg = LfdnConfig(input_dim=16)
    params = init_params(cfg, seed=0)
    state = AdamWState.init(params)
    rng = np.random.default_rng(31)
    z0 = rng.standard_normal(size=(1, 16))
    t = np.array([10])
    zt, _ = ennoise(z0[0], 10, schedule, rng)
    zt = zt[None, :]

    reached = None
    for step in range(1, 501):
        loss, grads = lfdn_backward(params, zt, t, z0)
        if loss < 1e-3:
            reached = step
            break
        adamw_update(params, grads, state, 1e-3, 1e-4)
    assert reached is not None, "loss never dropped below 1e-3 in 500 steps"


@criterion(5, "end-to-end separation: MFsim >= 0.95, MSE >= 0.90, < 5 min")
def test_end_to_end_separation():
    started = time.time()
    id_train, id_test, ood_test = synth_benchmark(
        c=32, n_id=2048, n_ood=512, shift=6.0, seed=0)
    _, ckpt, _ = train(id_train, TrainConfig(epochs=30))

    heads = ("mse", "mfsim")
    rid = score_records(id_test, ckpt, heads)
    rood = score_records(ood_test, ckpt, heads)
    aurocs = {}
    for head in heads:
        sset = ScoredSet.from_arrays([getattr(r, head) for r in rid],
                                     [getattr(r, head) for r in rood])
        aurocs[head] = auroc(sset)
    elapsed = time.time() - started

    assert aurocs["mfsim"] >= 0.95, f"MFsim AUROC {aurocs['mfsim']:.4f} < 0.95"
    assert aurocs["mse"] >= 0.90, f"MSE AUROC {aurocs['mse']:.4f} < 0.90"
    assert elapsed < 300.0, f"end-to-end run took {elapsed:.0f}s"


@criterion(6, "timestep shape: MFsim AUROC t=5 > t=1 and t=5 > t=100")
def test_timestep_sensitivity_shape():
    id_train, id_test, ood_test = synth_benchmark(
        c=32, n_id=SHAPE_N_ID, n_ood=512, shift=SHAPE_SHIFT, seed=0)
    _, ckpt, _ = train(id_train, TrainConfig(epochs=SHAPE_EPOCHS))

    by_t = {}
    for t in (1, 5, 100):
        rid = score_records(id_test, ckpt, ("mfsim",), t=t,
                            repeats=SHAPE_REPEATS)
        rood = score_records(ood_test, ckpt, ("mfsim",), t=t,
                             repeats=SHAPE_REPEATS)
        by_t[t] = auroc(ScoredSet.from_arrays(
            [r.mfsim for r in rid], [r.mfsim for r in rood]))

    assert by_t[5] > by_t[1], \
        f"AUROC t=5 ({by_t[5]:.4f}) must exceed t=1 ({by_t[1]:.4f})"
    assert by_t[5] > by_t[100], \
        f"AUROC t=5 ({by_t[5]:.4f}) must exceed t=100 ({by_t[100]:.4f})"


@criterion(7, "determinism: hash-identical artifacts, independent of --threads")
def test_determinism(tmp_path):
    runner = CliRunner()

    def invoke(*args):
        result = runner.invoke(cli_main, [str(a) for a in args])
        assert result.exit_code == 0, result.output
        return result

    data = tmp_path / "data"
    invoke("synth", "--c", 16, "--n-id", 96, "--n-ood", 32, "--shift", 6,
           "--seed", 5, "--out", data)
    cfg = tmp_path / "run.toml"
    cfg.write_text("[train]\nepochs = 2\n")

    ckpt_hashes = []
    for run_dir in ("r1", "r2"):
        out = tmp_path / run_dir
        invoke("train", "--config", cfg, "--features", data / "id_train.lfod",
               "--out", out)
        ckpt_hashes.append(file_sha256(out / FINAL_CKPT_NAME))
    assert ckpt_hashes[0] == ckpt_hashes[1], "checkpoint hashes differ"

    csv_hashes = []
    for threads in (1, 4):
        out = tmp_path / f"scores_t{threads}.csv"
        invoke("score", "--features", data / "id_test.lfod",
               "--ckpt", tmp_path / "r1" / FINAL_CKPT_NAME,
               "--head", "mse", "--threads", threads, "--out", out)
        csv_hashes.append(file_sha256(out))
    assert csv_hashes[0] == csv_hashes[1], "score CSVs differ across --threads"
