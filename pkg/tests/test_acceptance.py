"""Acceptance criteria, one test each.

Every test records a single ``criterion N: PASS|FAIL ...`` line (shown in the
terminal summary) and then asserts. Run alone with
``pytest tests/test_acceptance.py -v``.
"""

import time
from functools import lru_cache

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import ACCEPTANCE_LINES, rel_err
from igsmri.cli import main, read_manifest
from igsmri.grid import fft2_unitary, ifft2_unitary
from igsmri.heads import classifier_from_segmenter, identity_head, init_head, train_head
from igsmri.igs import IgsConfig, dataset_loss, igs_run, mask_gradient
from igsmri.losses import LossSpec
from igsmri.oracle import exhaustive_greedy_run, exhaustive_greedy_step, fd_mask_gradient, rank_of_line
from igsmri.phantom import make_set
from igsmri.sampling import SamplingPattern, lines_budget
from igsmri.tasks import Task, baseline_pattern, evaluate, finetune, task_targets

SIZE = 64
EPOCHS = 60
SEEDS = range(5)


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1 ------------------------------------------------------------------------


def _instance(loss, kind, rng):
    """Two random 16x16 images, a matching target and a random 5-line pattern."""
    images = rng.uniform(0.1, 0.6, size=(2, 16, 16))
    head = identity_head() if kind == "identity" else init_head(kind, int(rng.integers(1 << 30)))
    if kind == "classifier":
        labels = rng.integers(0, 2, size=2)
        targets = np.stack([labels, 1 - labels], axis=-1).astype(float)
    elif loss in ("dice", "bce"):
        targets = (rng.uniform(size=(2, 16, 16)) < 0.3).astype(float)
    else:
        targets = rng.uniform(size=(2, 16, 16))
    lines = rng.choice(16, size=5, replace=False)
    return images, targets, SamplingPattern.from_indices(16, lines), head


# Random conv heads have many ReLU kinks; a small step keeps the central
# difference from straddling them.
FD_STEP = 1e-7


def test_criterion_1_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for loss in ("dice", "bce", "l1", "ssim"):
        for kind in ("identity", "segmenter", "classifier"):
            errs = []
            for _ in range(20):
                images, targets, pat, head = _instance(loss, kind, rng)
                spec = LossSpec(loss)
                errs.append(rel_err(mask_gradient(images, targets, pat, head, spec),
                                    fd_mask_gradient(images, targets, pat, head, spec, FD_STEP)))
            worst[(loss, kind)] = max(errs)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-3 and elapsed < 60
    record(1, ok, f"worst rel err {worst[top]:.2e} ({top[0]}/{top[1]}), {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_fft_suite():
    rng = np.random.default_rng(2)
    errs = {"round trip": 0.0, "linearity": 0.0, "parseval": 0.0, "adjoint": 0.0}
    for _ in range(50):
        shape = tuple(rng.integers(2, 24, size=2))
        x = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        y = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        a, b = rng.normal(size=2)
        fx = fft2_unitary(x)
        errs["round trip"] = max(errs["round trip"], np.max(np.abs(ifft2_unitary(fx) - x)))
        lin = fft2_unitary(a * x + b * y) - (a * fx + b * fft2_unitary(y))
        errs["linearity"] = max(errs["linearity"], np.max(np.abs(lin)))
        errs["parseval"] = max(errs["parseval"],
                               abs(np.sum(np.abs(fx) ** 2) - np.sum(np.abs(x) ** 2)))
        errs["adjoint"] = max(errs["adjoint"],
                              abs(np.vdot(y, fx) - np.vdot(ifft2_unitary(y), x)))
    ok = max(errs.values()) < 1e-10
    record(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_boundary_cases():
    l1 = LossSpec("l1")
    checks = []
    for seed in range(10):
        data = make_set(4, 16, 3000 + seed)
        x = data.images
        one, _ = igs_run(x, x, IgsConfig(1, l1, identity_head()))
        checks.append(one.indices == [8])
        full, trace = igs_run(x, x, IgsConfig(16, l1, identity_head()))
        full_loss = dataset_loss(x, x, np.ones(16), identity_head(), l1) / len(x)
        checks.append(full.cardinality == 16 and abs(trace.final_loss - full_loss) < 1e-10)
        small, _ = igs_run(x, x, IgsConfig(4, l1, identity_head()))
        large, _ = igs_run(x, x, IgsConfig(9, l1, identity_head()))
        checks.append(large.transition_log[:4] == small.transition_log)
    ok = all(checks)
    record(3, ok, f"{sum(checks)}/{len(checks)} checks over 10 seeded runs")
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_greedy_vs_oracle():
    start = time.perf_counter()
    l1, head = LossSpec("l1"), identity_head()
    top3 = transitions = close = 0
    for seed in range(30):
        x = make_set(3, 16, 4000 + seed).images
        pat, trace = igs_run(x, x, IgsConfig(4, l1, head))
        state = SamplingPattern.from_indices(16, [8])
        for line in pat.transition_log[1:]:
            _, table = exhaustive_greedy_step(x, x, state, head, l1)
            top3 += rank_of_line(table, line) <= 3
            transitions += 1
            state = SamplingPattern.from_indices(16, state.indices + [line])
        _, history = exhaustive_greedy_run(x, x, 4, head, l1)
        igs_final = dataset_loss(x, x, pat, head, l1)
        close += abs(igs_final - history[-1]) <= 0.1 * abs(history[-1])
    elapsed = time.perf_counter() - start
    ok = top3 >= 0.7 * transitions and close >= 27 and elapsed < 300
    record(4, ok, f"top-3 {top3}/{transitions}, final within 10% {close}/30, {elapsed:.1f}s")
    assert ok


# -- shared protocol ----------------------------------------------------------


def _sets(seed, lesion_prob):
    train = make_set(200, SIZE, 1000 + seed * 10000, lesion_prob)
    val = make_set(50, SIZE, 900000 + seed * 10000, lesion_prob)
    return train, val


def _scores(task, head, train, val, pattern, seed):
    tuned = finetune(head, task, train, pattern, EPOCHS, seed=seed)
    return evaluate(task, val, pattern, tuned).summary


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_reconstruction_direction():
    start = time.perf_counter()
    train, val = _sets(0, 0.5)
    budget = lines_budget(SIZE, 4)
    pat, _ = igs_run(train.images, train.images,
                     IgsConfig(budget, Task.RECON_SSIM.loss, identity_head()))
    ssim = {name: evaluate(Task.RECON_SSIM, val, p).summary["ssim"] for name, p in (
        ("igs", pat), ("center", baseline_pattern("center", SIZE, 4)),
        ("fastmri", baseline_pattern("fastmri", SIZE, 4, seed=0)))}
    elapsed = time.perf_counter() - start
    ok = (ssim["igs"] >= ssim["center"] - 0.002 and ssim["igs"] >= ssim["fastmri"] + 0.01
          and elapsed < 600)
    record(5, ok, "SSIM " + ", ".join(f"{k} {v:.4f}" for k, v in ssim.items())
           + f", {elapsed:.0f}s")
    assert ok


# -- 6 and 7 -------------------------------------------------------------------


@lru_cache(maxsize=None)
def _segmenter(seed):
    train, val = _sets(seed, 1.0)
    head = train_head(init_head("segmenter", seed), train.images, task_targets(Task.SEG, train),
                      Task.SEG.loss, epochs=EPOCHS, seed=seed).head
    return train, val, head


@lru_cache(maxsize=None)
def _seg_scores(seed, accel):
    """Fine-tuned validation Dice and SSIM for IGS, center and fastmri at one accel."""
    train, val, head = _segmenter(seed)
    budget = lines_budget(SIZE, accel)
    pat, _ = igs_run(train.images, task_targets(Task.SEG, train),
                     IgsConfig(budget, Task.SEG.loss, head))
    patterns = {"igs": pat, "center": baseline_pattern("center", SIZE, accel),
                "fastmri": baseline_pattern("fastmri", SIZE, accel, seed=seed)}
    return {name: _scores(Task.SEG, head, train, val, p, seed) for name, p in patterns.items()}


def test_criterion_6_segmentation_direction():
    start = time.perf_counter()
    dice = {a: {k: v["dice"] for k, v in _seg_scores(0, a).items()} for a in (4, 8, 16)}
    gap4 = dice[4]["igs"] - dice[4]["fastmri"]
    gap16 = dice[16]["igs"] - dice[16]["fastmri"]
    elapsed = time.perf_counter() - start
    ok = dice[16]["igs"] >= dice[16]["center"] and gap16 > gap4 and elapsed < 1800
    record(6, ok, f"x16 Dice igs {dice[16]['igs']:.4f} center {dice[16]['center']:.4f}; "
           f"x8 igs {dice[8]['igs']:.4f} center {dice[8]['center']:.4f}; "
           f"gap vs fastmri x4 {gap4:+.4f} x16 {gap16:+.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_7_task_and_image_quality_decouple():
    found, tried = None, []
    for seed in SEEDS:
        scores = _seg_scores(seed, 16)
        tried.append(seed)
        for other in ("center", "fastmri"):
            if (scores["igs"]["ssim"] < scores[other]["ssim"]
                    and scores["igs"]["dice"] > scores[other]["dice"]):
                found = (seed, other, scores["igs"], scores[other])
                break
        if found:
            break
    if found:
        seed, other, mine, theirs = found
        detail = (f"seed {seed}: igs SSIM {mine['ssim']:.4f} < {other} {theirs['ssim']:.4f}, "
                  f"Dice {mine['dice']:.4f} > {theirs['dice']:.4f}")
    else:
        detail = f"no pair on seeds {tried}"
    record(7, found is not None, detail)
    assert found is not None


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_classification():
    start = time.perf_counter()
    rows, ok = [], True
    for seed in SEEDS:
        train, val = _sets(seed, 0.5)
        seg = train_head(init_head("segmenter", seed), train.images, train.masks.astype(float),
                         Task.SEG.loss, epochs=EPOCHS, seed=seed).head
        cls = train_head(classifier_from_segmenter(seg), train.images,
                         task_targets(Task.CLS, train), Task.CLS.loss,
                         epochs=EPOCHS, seed=seed).head
        pat, _ = igs_run(train.images, task_targets(Task.CLS, train),
                         IgsConfig(lines_budget(SIZE, 4), Task.CLS.loss, cls))
        mine = _scores(Task.CLS, cls, train, val, pat, seed)["f1"]
        center = _scores(Task.CLS, cls, train, val,
                         baseline_pattern("center", SIZE, 4), seed)["f1"]
        ok &= mine >= center - 0.01
        rows.append(f"s{seed} {mine:.3f}/{center:.3f}")
    elapsed = time.perf_counter() - start
    record(8, ok, "F1 igs/center " + " ".join(rows) + f"; {elapsed:.0f}s")
    assert ok


# -- 9 ------------------------------------------------------------------------


def _invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res


def _outputs(manifest):
    fields = read_manifest(manifest)
    outs = {k[len("output."):]: v for k, v in fields.items() if k.startswith("output.")}
    stable = {k: v for k, v in fields.items()
              if k not in ("duration_s", "args", "flag.jobs")}
    return outs, stable


def test_criterion_9_replay_determinism(tmp_path):
    d = tmp_path
    runs = [
        (["phantom-gen", "--out", d / "data", "--count", 12, "--size", 16,
          "--lesion-prob", 1.0, "--seed", 9], d / "data" / "run.manifest"),
        (["head-train", "--data", d / "data", "--task", "seg", "--out", d / "h.igsd",
          "--epochs", 3, "--seed", 9], d / "h.igsd.manifest"),
        (["optimize", "--task", "seg", "--data", d / "data", "--head", d / "h.igsd",
          "--accel", 4, "--out", d / "p.txt", "--trace", d / "t.csv", "--jobs", 1],
         d / "p.txt.manifest"),
        (["eval", "--pattern", d / "p.txt", "--data", d / "data", "--task", "seg",
          "--head", d / "h.igsd", "--metrics-out", d / "m.csv", "--finetune-epochs", 2,
          "--train-data", d / "data", "--jobs", 1], d / "m.csv.manifest"),
        (["compare", "--pattern", d / "p.txt", "--generator", "center", "--generator",
          "fastmri", "--accel", 4, "--data", d / "data", "--task", "seg", "--head",
          d / "h.igsd", "--out", d / "c.csv", "--sweep-out", d / "s.csv",
          "--render-dir", d / "r", "--jobs", 1], d / "c.csv.manifest"),
        (["render", "--pattern", d / "p.txt", "--data", d / "data", "--what", "recon",
          "--out", d / "x.pgm"], d / "x.pgm.manifest"),
    ]
    failures = []
    for args, manifest in runs:
        _invoke(*args)
        outs, stable = _outputs(manifest)
        before = {p: open(p, "rb").read() for p in outs}
        for p in outs:
            open(p, "wb").close()
        extra = ["--jobs", 3] if "--jobs" in args else []
        _invoke("replay", "--manifest", manifest, *extra)
        outs2, stable2 = _outputs(manifest)
        after = {p: open(p, "rb").read() for p in outs2}
        if before != after or stable != stable2 or not before:
            failures.append(args[0])
    ok = not failures
    record(9, ok, f"{len(runs) - len(failures)}/{len(runs)} commands replay byte-identically"
           + (f"; failed: {failures}" if failures else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
