"""Acceptance criteria 1-10, each checked at its stated tolerance and time budget."""
import io
import json
import time
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
import pytest

import conftest
import oracles
from stigcn import ops
from stigcn.cli import main
from stigcn.data import curriculum_datasets, load_dataset, save_dataset, DataFormatError
from stigcn.graph import adjacency, build_topology, chebyshev_basis, normalized_laplacian, scaled_laplacian
from stigcn.metrics import pairwise_similarity, retrieval_eval
from stigcn.model import ablation_config, build_stigcn, count_params, preset_config, shape_trace
from stigcn.training import curriculum_train_config, evaluate, grad_check, train
from stigcn.weights import WeightFileError, load_weights, read_tensors, save_weights


class Criterion:
    """Times a block and records one pass/fail line whether or not it raises."""

    def __init__(self, number, title, budget):
        self.number, self.title, self.budget = number, title, budget
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        ok = exc_type is None and elapsed < self.budget
        line = (f"criterion {self.number:2d} {'PASS' if ok else 'FAIL'}  {self.title}: {self.detail} "
                f"[{elapsed:.2f}s / {self.budget:g}s]")
        conftest.ACCEPTANCE_LINES.append(line)
        print(line)
        if exc_type is None:
            assert elapsed < self.budget, line
        return False


def _cli_json(*argv):
    out = io.StringIO()
    with redirect_stdout(out), redirect_stderr(io.StringIO()):
        assert main(list(argv)) == 0
    return json.loads(out.getvalue())


def _random_connected(rng, n):
    edges = {(int(rng.integers(0, j)), j) for j in range(1, n)}
    for a, b in rng.integers(0, n, (n, 2)):
        if a != b:
            edges.add((int(min(a, b)), int(max(a, b))))
    return build_topology(sorted(edges), joint_count=n)


def test_criterion_01_parameter_count():
    with Criterion(1, "parameter count", 1.0) as c:
        total = _cli_json("inspect", "--preset", "ntu")["total_params"]
        c.detail = f"total_params {total:,} in [1.3M, 1.9M]"
        assert 1.3e6 <= total <= 1.9e6


def test_criterion_02_flops():
    with Criterion(2, "FLOPs", 1.0) as c:
        rep = _cli_json("inspect", "--preset", "ntu")
        c.detail = f"{rep['headline_gflops']:.3f} GFLOPs for {rep['input_shape']} in [2, 8]"
        assert rep["input_shape"] == [3, 300, 25, 2]
        assert 2 <= rep["headline_gflops"] <= 8


def test_criterion_03_chebyshev():
    with Criterion(3, "Chebyshev correctness", 5.0) as c:
        lh = scaled_laplacian(normalized_laplacian(adjacency(build_topology("ntu25")))).entries
        basis = chebyshev_basis(lh, 4)
        closed = max(np.abs(basis[r] - ref).max() for r, ref in oracles.chebyshev_closed_forms(lh).items())
        rng = np.random.default_rng(3)
        spectral = 0.0
        for n in list(range(2, 26)) * 2:
            for mode in ("fixed_two", "exact"):
                g = scaled_laplacian(normalized_laplacian(adjacency(_random_connected(rng, n))), mode).entries
                b = chebyshev_basis(g, 4)
                spectral = max(spectral, max(np.abs(b[r] - oracles.chebyshev_spectral(g, r)).max()
                                             for r in range(5)))
        c.detail = f"closed-form {closed:.1e} <= 1e-12, spectral {spectral:.1e} <= 1e-8"
        assert closed <= 1e-12 and spectral <= 1e-8


def test_criterion_04_shape_trace():
    with Criterion(4, "shape trace", 10.0) as c:
        trace = shape_trace(build_stigcn(preset_config("ntu")))
        c.detail = " -> ".join("x".join(map(str, s)) for s in trace["stages"]) + \
            f" -> {trace['features']} -> {trace['logits'][0]}"
        assert trace["stages"] == [(64, 300, 25), (64, 150, 25), (128, 75, 25), (256, 37, 25)]
        assert trace["features"] == 256 and trace["logits"] == (60,)


def test_criterion_05_gradient_check():
    with Criterion(5, "gradient check", 300.0) as c:
        report = grad_check(preset_config("tiny"), tolerance=1e-4)
        worst = max(r["max_rel_err"] for r in report["params"])
        c.detail = f"{report['param_count']} params, worst rel err {worst:.1e} <= 1e-4"
        assert report["passed"] and report["param_count"] > 0


def _inner(a, b):
    return float(np.sum(a * b))


def test_criterion_06_adjoint_and_linearity():
    with Criterion(6, "adjoint/linearity suites", 60.0) as c:
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n, ci, co, t, v = (int(a) for a in rng.integers(1, 6, 5))
            t += 1
            x, x2 = rng.standard_normal((2, n, ci, t, v))
            a, b = rng.standard_normal(2)
            wp = rng.standard_normal((co, ci))
            wt = rng.standard_normal((co, ci, 3))
            m = rng.standard_normal((v, v))
            dy = rng.standard_normal((n, co, t, v))
            dz = rng.standard_normal((n, ci, t, v))

            def rel(p, q):
                return abs(p - q) / max(1.0, abs(p))

            y = ops.pointwise_conv(x, wp)
            dx, dw, _ = ops.pointwise_conv_backward(dy, x, wp)
            errs = [rel(_inner(y, dy), _inner(x, dx)), rel(_inner(y, dy), _inner(wp, dw)),
                    np.abs(ops.pointwise_conv(a * x + b * x2, wp) - a * y - b * ops.pointwise_conv(x2, wp)).max()]
            y = ops.temporal_conv(x, wt)
            dx, dw, _ = ops.temporal_conv_backward(dy, x, wt)
            errs += [rel(_inner(y, dy), _inner(x, dx)), rel(_inner(y, dy), _inner(wt, dw)),
                     np.abs(ops.temporal_conv(a * x + b * x2, wt) - a * y - b * ops.temporal_conv(x2, wt)).max()]
            y = ops.graph_apply(x, m)
            dx, dm = ops.graph_apply_backward(dz, x, m)
            errs += [rel(_inner(y, dz), _inner(x, dx)), rel(_inner(y, dz), _inner(m, dm)),
                     np.abs(ops.graph_apply(a * x + b * x2, m) - a * y - b * ops.graph_apply(x2, m)).max()]
            y = ops.motion_sampling(x)
            errs += [rel(_inner(y, dz), _inner(x, ops.motion_sampling_backward(dz))),
                     np.abs(ops.motion_sampling(a * x + b * x2) - a * y - b * ops.motion_sampling(x2)).max()]
            g = ops.global_avg_pool(x)
            dg = rng.standard_normal(g.shape)
            errs.append(rel(_inner(g, dg), _inner(x, ops.global_avg_pool_backward(dg, x.shape))))
            p, idx = ops.max_pool_time(x)
            dp = rng.standard_normal(p.shape)
            errs.append(rel(_inner(p, dp), _inner(x, ops.max_pool_time_backward(dp, idx, t))))
            worst = max(worst, max(errs))
        c.detail = f"100 instances x 13 identities, worst {worst:.1e} <= 1e-10"
        assert worst <= 1e-10


def test_criterion_07_curriculum_training():
    with Criterion(7, "toy curriculum training", 600.0) as c:
        tr, te = curriculum_datasets(seed=0)
        cfg = curriculum_train_config()
        model = build_stigcn(preset_config("curriculum"), seed=cfg.seed)
        _, log = train(model, tr, cfg)
        train_acc = evaluate(model, tr)["top1"]
        test_acc = evaluate(model, te)["top1"]
        c.detail = (f"{cfg.epochs} epochs (<= 30), train {train_acc:.3f} >= 0.95, "
                    f"held-out {test_acc:.3f} >= 0.90")
        assert cfg.epochs <= 30 and len(log) == cfg.epochs
        assert train_acc >= 0.95 and test_acc >= 0.90


def test_criterion_08_retrieval_oracle():
    with Criterion(8, "retrieval oracle equivalence", 10.0) as c:
        checked, worst = 0, 0.0
        for seed in range(300):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 21))
            labels = rng.integers(0, 4, n)
            f = rng.standard_normal((n, int(rng.integers(1, 6))))
            if seed % 3 == 0:
                f = np.round(f)  # induce ties
            if not any(np.sum(labels == labels[q]) > 1 for q in range(n)):
                continue
            for metric in ("cosine", "euclidean"):
                res = retrieval_eval(f, labels, metric)
                ref_map, ref_cmc = oracles.brute_force_retrieval(pairwise_similarity(f, metric), labels)
                worst = max(worst, abs(res.mAP - ref_map), abs(res.cmc_rank1 - ref_cmc))
                checked += 1
        labels = np.array([0, 0, 1, 1, 2, 2])
        perfect = retrieval_eval(np.eye(3)[labels], labels)
        c.detail = (f"{checked} instances, worst {worst:.1e} <= 1e-12; "
                    f"perfect fixture mAP {perfect.mAP} CMC@1 {perfect.cmc_rank1}")
        assert worst <= 1e-12 and perfect.mAP == 1.0 and perfect.cmc_rank1 == 1.0


def test_criterion_09_serialization(tmp_path):
    with Criterion(9, "serialization", 10.0) as c:
        model = build_stigcn(preset_config("toy"), seed=9)
        x = np.random.default_rng(9).standard_normal((4, 3, 8, 5, 1)).astype(np.float32)
        model.forward(x)
        model.eval()
        wpath = tmp_path / "w.stig"
        save_weights(model, wpath)
        again = load_weights(wpath, preset_config("toy")).eval()
        assert np.array_equal(again.forward(x), model.forward(x))
        tr, _ = curriculum_datasets(train_per_class=3, test_per_class=1)
        dpath = tmp_path / "d.sksq"
        save_dataset(tr, dpath)
        back = load_dataset(dpath)
        assert back.X.tobytes() == tr.X.tobytes() and back.y.tolist() == tr.y.tolist()
        flips = 0
        for path, reader, err in ((wpath, read_tensors, WeightFileError), (dpath, load_dataset, DataFormatError)):
            good = path.read_bytes()
            for pos in np.unique(np.linspace(0, len(good) - 1, 200).astype(int)):
                bad = bytearray(good)
                bad[pos] ^= 0x01
                path.write_bytes(bytes(bad))
                with pytest.raises(err):
                    reader(path)
                flips += 1
            path.write_bytes(good)
        c.detail = f"weights and dataset bit-exact, {flips} single-byte flips all detected"


def test_criterion_10_ablation_ledger():
    with Criterion(10, "ablation ledger", 10.0) as c:
        base = preset_config("ntu")
        totals = [count_params(build_stigcn(ablation_config(base, k)))["total"] for k in "abcdef"]
        v2, n = base.topology.joint_count ** 2, len(base.block_channels)
        fuse = sum(ch * ch + 3 * ch for ch in base.block_channels)
        expected = [n * v2, n * v2, n * v2, fuse, fuse]
        deltas = [b - a for a, b in zip(totals, totals[1:])]
        c.detail = f"totals {totals}, deltas {deltas}"
        assert all(d > 0 for d in deltas) and deltas == expected
