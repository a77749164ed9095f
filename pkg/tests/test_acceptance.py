"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with ``pytest tests/test_acceptance.py -v -s``).

The synthetic benchmark fixture lives in conftest: real singleton family plus
three generator families of three models (d=64, 500 train / 100 test per
class, seed 7), one extra holdout family never trained, task stream L=2,
full configuration with every component enabled.
"""

import time

import numpy as np
import pytest

from modelattrib import data_io, losses
from modelattrib import diffcore as dc
from modelattrib.data_io import (
    FormatError,
    load_checkpoint,
    read_features,
    save_checkpoint,
    write_features,
)
from modelattrib.hierarchy import AnchorSet, Taxonomy, compute_prototypes
from modelattrib.memory_bank import herding_select
from modelattrib.protocol import (
    ProtocolState,
    TrainConfig,
    default_tau_grid,
    resume_ep1,
    run_budget_sweep,
    run_component_ablation,
    run_ep1,
    run_tau_sweep_eval,
)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def ablation_results(bench_manifest, bench_config):
    t0 = time.perf_counter()
    results = run_component_ablation(
        bench_manifest, bench_config, ["replay", "l1", "l2", "lu"]
    )
    return dict(results), time.perf_counter() - t0


# ---------------------------------------------------------------------------
# criterion 1: gradient suite
# ---------------------------------------------------------------------------


def _random_instance(seed):
    gen = np.random.default_rng(seed)
    d = int(gen.integers(3, 7))
    h = int(gen.integers(3, 6))
    dl = int(gen.integers(4, 8))
    tax = Taxonomy()
    tax.register_classes(
        [
            ("real", "real", "2022-01-01"),
            ("a", "f1", "2022-02-01"),
            ("b", "f1", "2022-03-01"),
            ("c", "f2", "2022-04-01"),
        ]
    )
    tax.mark_real(0)
    head = dc.ProjectionHead.seeded(d, h, dl, gen)
    clf = dc.LinearClassifier(dl)
    clf.grow(4, gen)
    anchors = AnchorSet(dl)
    anchors.grow(4, 3, gen)
    n = int(gen.integers(6, 12))
    x = gen.normal(size=(n, d))
    y = gen.integers(0, 4, size=n)
    y[:4] = np.arange(4)  # every class present
    xr = gen.normal(size=(n, d))
    yr = gen.integers(0, 4, size=n)
    return gen, tax, head, clf, anchors, x, y, xr, yr


def _mix_indices(gen, y, n_pairs=6):
    ia, ib = [], []
    while len(ia) < n_pairs:
        i, j = int(gen.integers(y.size)), int(gen.integers(y.size))
        if y[i] != y[j]:
            ia.append(i)
            ib.append(j)
    return np.array(ia), np.array(ib), gen.uniform(0.05, 0.95, size=n_pairs)


def test_criterion_gradient_suite():
    """Analytic vs central finite differences, >= 20 instances per loss term."""
    tau = 0.65
    t0 = time.perf_counter()
    worst = {"cls": 0.0, "l1": 0.0, "l2": 0.0, "replay": 0.0, "lu": 0.0, "composite": 0.0}
    per_term_count = {k: 0 for k in worst}
    seed = 0
    while min(per_term_count.values()) < 20:
        seed += 1
        gen, tax, head, clf, anchors, x, y, xr, yr = _random_instance(seed)
        params = head.parameters() + clf.parameters() + anchors.parameters()
        ia, ib, betas = _mix_indices(gen, y)

        def mix_logits():
            z = head.forward(x)
            return clf.forward(losses.mix_latent_pairs(z, ia, ib, betas))

        # skip instances sitting on the hinge kink
        pmax = dc.softmax(mix_logits().value).max(axis=1)
        if np.any(np.abs(pmax - tau) <= 1e-3):
            continue

        builders = {
            "cls": lambda: losses.loss_cls(clf.forward(head.forward(x)), y),
            "l1": lambda: losses.loss_fine(compute_prototypes(head.forward(x), y, tax), anchors),
            "l2": lambda: losses.loss_coarse(
                compute_prototypes(head.forward(x), y, tax), anchors
            ),
            "replay": lambda: losses.loss_replay(xr, yr, head, clf),
            "lu": lambda: losses.loss_unseen(mix_logits(), tau),
            "composite": lambda: losses.total_loss(
                losses.loss_cls(clf.forward(head.forward(x)), y),
                losses.loss_fine(compute_prototypes(head.forward(x), y, tax), anchors),
                losses.loss_coarse(compute_prototypes(head.forward(x), y, tax), anchors),
                losses.loss_unseen(mix_logits(), tau),
                losses.loss_replay(xr, yr, head, clf),
                losses.LossWeights(),
            )[0],
        }
        for term, build in builders.items():
            rep = dc.grad_check(build, params, step=1e-4)
            worst[term] = max(worst[term], rep.max_rel_error)
            per_term_count[term] += 1
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-3 for v in worst.values()) and elapsed < 60.0
    detail = (
        ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
        + f"; {per_term_count['cls']} instances/term in {elapsed:.1f}s"
    )
    report("gradient suite", ok, detail)


# ---------------------------------------------------------------------------
# criterion 2: orthogonality suite
# ---------------------------------------------------------------------------


def test_criterion_orthogonality(bench_state):
    anchors = AnchorSet(256)
    gen = np.random.default_rng(3)
    for classes, fams in [(2, 2), (2, 1), (2, 0), (2, 1), (2, 0)]:
        anchors.grow(classes, fams, gen)
    grown_dev = max(anchors.fine_gram_deviation(), anchors.coarse_gram_deviation())

    trained = bench_state.anchors
    trained_dev = trained.fine_gram_deviation()
    norm_dev = max(
        np.max(np.abs(np.linalg.norm(trained.fine.values, axis=1) - 1.0)),
        np.max(np.abs(np.linalg.norm(trained.coarse.values, axis=1) - 1.0)),
    )
    ok = grown_dev <= 1e-9 and trained_dev <= 0.1 and norm_dev <= 1e-9
    report(
        "orthogonality suite",
        ok,
        f"grown ||Q^TQ-I||={grown_dev:.2e}, trained={trained_dev:.4f}, "
        f"norm dev={norm_dev:.2e}",
    )


# ---------------------------------------------------------------------------
# criterion 3: herding oracle
# ---------------------------------------------------------------------------


def test_criterion_herding_oracle():
    from tests.test_memory_bank import brute_force_herding

    mismatches = 0
    prefix_violations = 0
    for seed in range(50):
        gen = np.random.default_rng(1000 + seed)
        n = int(gen.integers(2, 13))
        d = int(gen.integers(2, 7))
        budget = int(gen.integers(1, n + 1))
        feats = gen.normal(size=(n, d))
        if herding_select(feats, budget) != brute_force_herding(feats, budget):
            mismatches += 1
        full = herding_select(feats, n)
        for b in range(1, n + 1):
            if herding_select(feats, b) != full[:b]:
                prefix_violations += 1
    ok = mismatches == 0 and prefix_violations == 0
    report(
        "herding oracle",
        ok,
        f"50 instances, {mismatches} oracle mismatches, {prefix_violations} prefix violations",
    )


# ---------------------------------------------------------------------------
# criterion 4: synthetic EP1 benchmark
# ---------------------------------------------------------------------------


def test_criterion_synthetic_benchmark(ablation_results):
    results, elapsed = ablation_results
    full = results["+lu"][-1]
    baseline = results["baseline"][-1]
    plus_l2 = results["+l2"][-1]
    checks = {
        "full avg >= 0.90": full.avg_acc >= 0.90,
        "full unseen >= 0.90": full.unseen_acc >= 0.90,
        "baseline >= 10 pts below full": baseline.avg_acc <= full.avg_acc - 0.10,
        "+lu raises unseen >= 15 pts over +l2": full.unseen_acc >= plus_l2.unseen_acc + 0.15,
        "runtime < 5 min": elapsed < 300.0,
    }
    detail = (
        f"full avg={full.avg_acc:.3f} unseen={full.unseen_acc:.3f}, "
        f"baseline avg={baseline.avg_acc:.3f}, +l2 unseen={plus_l2.unseen_acc:.3f}, "
        f"{elapsed:.0f}s"
    )
    report("synthetic EP1 benchmark", all(checks.values()), detail)
    for name, ok in checks.items():
        assert ok, name


# ---------------------------------------------------------------------------
# criterion 5: tau monotonicity sweep
# ---------------------------------------------------------------------------


def test_criterion_tau_monotonicity(bench_state, bench_manifest):
    rows = run_tau_sweep_eval(bench_state, bench_manifest, default_tau_grid())
    avg = [r[1] for r in rows]
    unseen = [r[2] for r in rows]
    seen_monotone = all(b <= a + 1e-12 for a, b in zip(avg, avg[1:]))
    unseen_monotone = all(b >= a - 1e-12 for a, b in zip(unseen, unseen[1:]))
    ok = seen_monotone and unseen_monotone
    report(
        "tau monotonicity sweep",
        ok,
        f"avg {avg[0]:.3f}->{avg[-1]:.3f} non-increasing={seen_monotone}, "
        f"unseen {unseen[0]:.3f}->{unseen[-1]:.3f} non-decreasing={unseen_monotone}",
    )


# ---------------------------------------------------------------------------
# criterion 6: bank-size trend
# ---------------------------------------------------------------------------


def test_criterion_bank_size_trend(bench_manifest, bench_config):
    results = run_budget_sweep(bench_manifest, bench_config, [5, 50, 150])
    finals = [hist[-1].avg_acc for _, hist in results]
    ok = all(b >= a - 1e-12 for a, b in zip(finals, finals[1:]))
    detail = ", ".join(f"B={b}: {h[-1].avg_acc:.3f}" for b, h in results)
    report("bank-size trend", ok, detail)


# ---------------------------------------------------------------------------
# criterion 7: determinism + checkpoint resume
# ---------------------------------------------------------------------------


def test_criterion_determinism_and_resume(bench_manifest, bench_config, bench_state, tmp_path):
    second = run_ep1(bench_manifest, bench_config)
    bits_equal = all(
        a.name == b.name and np.array_equal(a.values, b.values)
        for a, b in zip(bench_state.parameters(), second.parameters())
    )
    history_equal = [r.as_dict() for r in bench_state.history] == [
        r.as_dict() for r in second.history
    ]

    resume_ok = True
    for k in (1, 3):
        partial = run_ep1(bench_manifest, bench_config, until_task=k)
        ckpt = tmp_path / f"task{k}.ckpt"
        save_checkpoint(partial, ckpt)
        resumed = resume_ep1(load_checkpoint(ckpt), bench_manifest)
        metrics_match = [r.as_dict() for r in resumed.history] == [
            r.as_dict() for r in bench_state.history
        ]
        params_match = all(
            np.array_equal(a.values, b.values)
            for a, b in zip(resumed.parameters(), bench_state.parameters())
        )
        resume_ok = resume_ok and metrics_match and params_match

    ok = bits_equal and history_equal and resume_ok
    report(
        "determinism + resume",
        ok,
        f"straight runs bit-identical={bits_equal}, histories equal={history_equal}, "
        f"resume k in {{1,3}} metric-identical={resume_ok}",
    )


# ---------------------------------------------------------------------------
# criterion 8: format fuzzing
# ---------------------------------------------------------------------------


def _expect_structured_error(read_fn, path, payload) -> bool:
    path.write_bytes(payload)
    try:
        read_fn(path)
    except FormatError:
        return True
    except Exception:
        return False  # crash: wrong exception type escaped
    return False  # malformed input parsed silently


def test_criterion_format_fuzzing(tmp_path):
    gen = np.random.default_rng(77)

    feat_path = tmp_path / "base.ifab"
    write_features(
        feat_path,
        np.arange(3),
        np.zeros(3),
        gen.normal(size=(3, 4)).astype(np.float32),
    )
    feat_bytes = feat_path.read_bytes()

    state = ProtocolState.fresh(
        TrainConfig(latent_dim=8, hidden_dim=6, seed=1), feature_dim=4
    )
    state.bank.admit_class(0, gen.normal(size=(5, 4)))
    ckpt_path = tmp_path / "base.ckpt"
    save_checkpoint(state, ckpt_path)
    ckpt_bytes = ckpt_path.read_bytes()

    target = tmp_path / "fuzzed.bin"
    variants = 0
    failures = 0

    # feature file: truncation at every boundary
    for cut in range(len(feat_bytes)):
        variants += 1
        if not _expect_structured_error(read_features, target, feat_bytes[:cut]):
            failures += 1

    # feature file: header corruption (skip the free-form flags field)
    header_positions = [p for p in range(20)]
    while variants < len(feat_bytes) + 1900:
        pos = int(gen.choice(header_positions))
        val = int(gen.integers(256))
        if feat_bytes[pos] == val:
            continue
        mutated = bytearray(feat_bytes)
        mutated[pos] = val
        variants += 1
        if not _expect_structured_error(read_features, target, bytes(mutated)):
            failures += 1

    # checkpoint: truncation at every boundary (sampled to keep runtime down)
    cuts = np.unique(gen.integers(0, len(ckpt_bytes), size=3000))
    for cut in cuts:
        variants += 1
        if not _expect_structured_error(load_checkpoint, target, ckpt_bytes[: int(cut)]):
            failures += 1

    # checkpoint: random single-byte corruption anywhere
    while variants < 10_000:
        pos = int(gen.integers(len(ckpt_bytes)))
        val = int(gen.integers(256))
        if ckpt_bytes[pos] == val:
            continue
        mutated = bytearray(ckpt_bytes)
        mutated[pos] = val
        variants += 1
        if not _expect_structured_error(load_checkpoint, target, bytes(mutated)):
            failures += 1

    ok = failures == 0 and variants >= 10_000
    report("format fuzzing", ok, f"{variants} variants, {failures} unstructured outcomes")
