"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 5-7 and 9 train the full protocol on the default bundle (12 keypoints, groups
[4,2,2,2,2], 300/100 train/test images per step) for three seeds; that takes about
40 minutes on one CPU core. Step-0 is trained once per seed and shared by every arm,
and its time is charged to every arm that uses it.
"""

import copy
import math
import statistics
import time

import numpy as np
import pytest
import torch

from ikl.heatmap import channel_softmax, spatial_softmax
from ikl.kanet import KANet, ka_forward
from ikl.losses import loss_gt, loss_ka_stage2, loss_kd_channel, loss_ksd
from ikl.metrics import AccuracyMatrix, average_transfer, maximal_transfer, mre, pck
from ikl.records import metric_records
from ikl.synthdata import ExemplarAccessError, KeypointSchedule, ProtocolData, SplitSizes, build_default_anatomy, make_split
from ikl.trainer import RunConfig, run_protocol, run_step, train_initial
from oracles import analytic_gradient, brute_average_transfer, brute_maximal_transfer, central_difference, relative_error

SEEDS = (0, 1, 2)
ARMS = ("finetune", "kamp_ksd_only", "lwf", "kamp")
# desk-scale training budget; see the README for how it was chosen
DESK = dict(optimizer="adam", lr=1e-3, epochs_total=30, epochs_stage1=10, epochs_initial=40, batch_size=16)


def _rand(*shape, seed):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


# -- criteria 1-4: numerical properties ------------------------------------------------------


def test_criterion_1_softmax_sums(verdict):
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        h = _rand(3, 32, 32, seed=i) * 5
        worst = max(worst, (spatial_softmax(h, "height").sum(-2) - 1).abs().max().item())
        worst = max(worst, (spatial_softmax(h, "width").sum(-1) - 1).abs().max().item())
        worst = max(worst, (spatial_softmax(h, "full2d").sum((-2, -1)) - 1).abs().max().item())
        worst = max(worst, (channel_softmax(h).sum(-3) - 1).abs().max().item())
    seconds = time.perf_counter() - start
    verdict(1, "softmax sums", worst < 1e-6 and seconds < 5, f"max deviation {worst:.1e}, {seconds:.2f}s")


def _kanet_conv1_case(trial):
    torch.manual_seed(trial)
    net = KANet(3, 2).double().eval()
    g = torch.Generator().manual_seed(1000 + trial)
    a, b = torch.rand(8, 8, generator=g, dtype=torch.float64), torch.rand(8, 8, generator=g, dtype=torch.float64)
    v = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    w0 = net.conv1.weight.detach().clone()
    idx = (slice(None), slice(None), slice(6, 9), slice(6, 9))

    def f(sub):
        w = w0.clone()
        w[idx] = sub
        return torch.func.functional_call(net, {"conv1.weight": w}, (a[None], b[None], v[None])).sum()

    return f, w0[idx].clone()


def _kanet_input_case(trial):
    torch.manual_seed(trial)
    net = KANet(2, 2, kernel=3).double().eval()
    g = torch.Generator().manual_seed(2000 + trial)
    a, b = torch.rand(5, 5, generator=g, dtype=torch.float64), torch.rand(5, 5, generator=g, dtype=torch.float64)
    v = torch.randn(2, 5, 5, generator=g, dtype=torch.float64)
    return (lambda x: ka_forward(net, a, b, x).square().sum()), v


def test_criterion_2_gradient_oracle(verdict):
    start = time.perf_counter()
    worst = {}
    for trial in range(20):
        target = _rand(2, 2, 6, 6, seed=100 + trial)
        x = _rand(2, 2, 6, 6, seed=200 + trial)
        cases = {
            "gt": (lambda s: loss_gt(s, target), x),
            "ksd": (lambda s: loss_ksd(s, target), x),
            "kd_channel": (lambda s: loss_kd_channel(s, target), x),
            "ka": (lambda s: loss_ka_stage2(s, target), x),
            "kanet_conv1": _kanet_conv1_case(trial),
            "kanet_input": _kanet_input_case(trial),
        }
        for name, (fn, point) in cases.items():
            err = relative_error(analytic_gradient(fn, point), central_difference(fn, point))
            worst[name] = max(worst.get(name, 0.0), err)
    seconds = time.perf_counter() - start
    ok = all(e < 1e-4 for e in worst.values()) and seconds < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, "finite-difference gradients, 20 instances each", ok, f"{detail}; {seconds:.1f}s")


def _matrix(kind, vals):
    a = AccuracyMatrix(kind)
    for k, v in vals.items():
        a[k] = v
    return a


def test_criterion_3_metric_oracles(verdict):
    start = time.perf_counter()
    fixtures = [
        mre([[1.0, 2.0], [3.0, 4.0]], [[1.0, 2.0], [3.0, 4.0]]) == 0.0,
        mre([[3.0, 4.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]) == 2.5,
        pck([[5.0, 5.0]], [[5.0, 5.0]], d=10) == 100.0,
        pck([[3.0, 4.0]], [[0.0, 0.0]], d=10, sigma=0.5) == 100.0,
        pck([[3.0, 4.0]], [[0.0, 0.0]], d=10, sigma=0.4) == 0.0,
        average_transfer(_matrix("pck", {(0, 0): 78.0, (1, 0): 80.0, (1, 1): 50.0}), 1) == 2.0,
        average_transfer(_matrix("mre", {(0, 0): 4.0, (1, 0): 3.5, (1, 1): 1.0}), 1) == 0.5,
        average_transfer(_matrix("pck", {(0, 0): 60.0, (1, 0): 60.0, (1, 1): 10.0}), 1) == 0.0,
        maximal_transfer({0: 52.0, 1: 39.0}, {0: 50.0, 1: 40.0}) == 2.0,
        maximal_transfer({0: 5.0}, {0: 5.0}) == 0.0,
        math.isclose(maximal_transfer({0: 1.7, 1: 3.1}, {0: 2.0, 1: 3.0}, "mre"), 0.3),
    ]
    rng = np.random.default_rng(11)
    brute_ok = True
    for i in range(50):
        kind = "pck" if i % 2 == 0 else "mre"
        sign = 1.0 if kind == "pck" else -1.0
        hi = 100.0 if kind == "pck" else 20.0
        n = int(rng.integers(2, 7))
        vals = {(r, c): float(rng.uniform(0, hi)) for r in range(n) for c in range(r + 1)}
        a = _matrix(kind, vals)
        brute_ok &= all(average_transfer(a, t) == brute_average_transfer(vals, t, sign) for t in range(1, n))
        k = int(rng.integers(1, 9))
        init = {j: float(rng.uniform(0, hi)) for j in range(k)}
        cur = {j: float(rng.uniform(0, hi)) for j in range(k)}
        brute_ok &= maximal_transfer(cur, init, kind) == brute_maximal_transfer(cur, init, sign)
    seconds = time.perf_counter() - start
    ok = all(fixtures) and brute_ok and seconds < 10
    verdict(3, "metric fixtures and brute force", ok, f"{sum(fixtures)}/{len(fixtures)} fixtures, brute force {'ok' if brute_ok else 'MISMATCH'}, {seconds:.2f}s")


def test_criterion_4_hand_values(verdict):
    ksd = loss_ksd(torch.zeros(1, 1, 2, 2, dtype=torch.float64), torch.zeros(1, 1, 2, 2, dtype=torch.float64)).item()
    kd = loss_kd_channel(torch.zeros(1, 2, 1, 1, dtype=torch.float64), torch.zeros(1, 2, 1, 1, dtype=torch.float64)).item()
    ok = abs(ksd - 4 * math.log(2)) <= 1e-9 and abs(kd - math.log(2)) <= 1e-9
    verdict(4, "uniform KSD = 4 ln 2, channel KD = ln 2", ok, f"ksd {ksd:.12f}, kd {kd:.12f}")


# -- criteria 5-7: trends on the default bundle ---------------------------------------------------


def default_bundle():
    graph = build_default_anatomy(12)
    schedule = KeypointSchedule.from_sizes([4, 2, 2, 2, 2], 12, seed=0)
    return make_split(graph, schedule, SplitSizes.uniform(5, train=300, test=100), seed=0)


@pytest.fixture(scope="module")
def desk(note):
    bundle = default_bundle()
    reports = {m: {} for m in ARMS}
    seconds = {m: 0.0 for m in ARMS}
    step0 = {}
    for seed in SEEDS:
        data = ProtocolData(bundle)
        data.begin_step(0)
        start = time.perf_counter()
        model0 = train_initial(data, RunConfig(method="finetune", **DESK), seed)
        elapsed = time.perf_counter() - start
        step0[seed] = elapsed
        for method in ARMS:
            start = time.perf_counter()
            reports[method][seed] = run_protocol(bundle, RunConfig(method=method, **DESK), seed, initial_model=copy.deepcopy(model0))
            seconds[method] += time.perf_counter() - start + elapsed
        for method in ARMS:
            r = reports[method][seed]
            note(f"seed {seed} {method:14s} step0 {r[0].overall:6.2f} final {r[-1].overall:6.2f} AT {r[-1].at:8.3f} MT {r[-1].mt:7.2f}")
    return {"bundle": bundle, "reports": reports, "seconds": seconds, "step0_seconds": sum(step0.values())}


def _median(values):
    return statistics.median(values)


def test_criterion_5_finetune_forgets(desk, verdict):
    runs = desk["reports"]["finetune"]
    drops = [runs[s][0].overall - runs[s][-1].overall for s in SEEDS]
    minutes = desk["seconds"]["finetune"] / 60
    ok = _median(drops) >= 10 and minutes < 15
    verdict(5, "finetune forgets", ok, f"median drop {_median(drops):.2f}pp (per seed {', '.join(f'{d:.2f}' for d in drops)}), {minutes:.1f} min")


def test_criterion_6_method_ordering(desk, verdict):
    rep = desk["reports"]
    aaa = {m: _median([rep[m][s][-1].overall for s in SEEDS]) for m in ARMS}
    at = {m: _median([rep[m][s][-1].at for s in SEEDS]) for m in ("kamp", "lwf")}
    # Step-0 is shared, so count it once per seed in the total
    minutes = (sum(desk["seconds"].values()) - (len(ARMS) - 1) * desk["step0_seconds"]) / 60
    checks = {
        "kamp>=ksd_only": aaa["kamp"] >= aaa["kamp_ksd_only"],
        "ksd_only>=lwf": aaa["kamp_ksd_only"] >= aaa["lwf"],
        "lwf>finetune": aaa["lwf"] > aaa["finetune"],
        "kamp-lwf>=1": aaa["kamp"] - aaa["lwf"] >= 1.0,
        "AT kamp>=lwf": at["kamp"] >= at["lwf"],
        "under 45 min": minutes < 45,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = ", ".join(f"{m} {v:.2f}" for m, v in aaa.items()) + f"; AT kamp {at['kamp']:.3f} lwf {at['lwf']:.3f}; {minutes:.1f} min"
    if failed:
        detail += "; failed: " + ", ".join(failed)
    verdict(6, "method ordering", not failed, detail)


def test_criterion_7_association_beats_old_model(desk, verdict):
    runs = desk["reports"]["kamp"]
    steps = range(1, len(runs[SEEDS[0]]))
    lines, ok = [], True
    for t in steps:
        ka = _median([runs[s][t].extras["ka_target_pck"] for s in SEEDS])
        old = _median([runs[s][t].extras["old_target_pck"] for s in SEEDS])
        ok &= ka >= old
        lines.append(f"step {t}: {ka:.1f} vs {old:.1f}")
    verdict(7, "association net PCK >= old model PCK on its target", ok, "; ".join(lines))


# -- criteria 8-9: contracts ------------------------------------------------------------------


TINY = dict(epochs_total=2, epochs_stage1=1, epochs_initial=2, batch_size=4)


@pytest.fixture(scope="module")
def small_bundle():
    g = build_default_anatomy(12)
    sch = KeypointSchedule.from_sizes([4, 2, 2, 2, 2], 12, seed=0)
    return make_split(g, sch, SplitSizes.uniform(5, train=8, test=4), seed=3, img_size=(64, 64))


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_criterion_8_exemplar_free_and_frozen(small_bundle, verdict, monkeypatch):
    import ikl.trainer as trainer

    cfg = RunConfig(method="kamp", **TINY)
    data = ProtocolData(small_bundle)
    data.begin_step(0)
    prev = train_initial(data, cfg, 0)
    before = _state(prev)

    captured = {}
    real = trainer.train_kanet

    def spy(*a, **kw):
        net, log = real(*a, **kw)
        captured["kanet"] = (net, _state(net))
        return net, log

    monkeypatch.setattr(trainer, "train_kanet", spy)
    model, artifacts = run_step(prev, data, 1, cfg, 0)
    old_model_stable = _same(before, _state(prev))
    kanet_stable = artifacts.kanet is captured["kanet"][0] and _same(captured["kanet"][1], _state(artifacts.kanet))
    student_moved = not _same(before, {k: v for k, v in _state(model).items() if k in before})
    blocked = []
    for call in (lambda: data.train(0), lambda: data.begin_step(0)):
        try:
            call()
            blocked.append(False)
        except ExemplarAccessError:
            blocked.append(True)
    ok = old_model_stable and kanet_stable and student_moved and all(blocked)
    detail = f"old model stable {old_model_stable}, KA-Net stable {kanet_stable}, step-0 data blocked {all(blocked)}"
    verdict(8, "exemplar-free and frozen snapshots", ok, detail)


def _records(method, seed, reports):
    return [row for r in reports for row in metric_records(method, seed, r)]


def test_criterion_9_determinism(small_bundle, desk, verdict):
    cfg = RunConfig(method="kamp", **TINY)
    small_same = _records("kamp", 5, run_protocol(small_bundle, cfg, 5)) == _records("kamp", 5, run_protocol(small_bundle, cfg, 5))
    # an independent rerun of one default-bundle arm, Step-0 included
    rerun = run_protocol(desk["bundle"], RunConfig(method="finetune", **DESK), SEEDS[0])
    desk_same = _records("finetune", SEEDS[0], rerun) == _records("finetune", SEEDS[0], desk["reports"]["finetune"][SEEDS[0]])
    verdict(9, "identical seeds give identical records", small_same and desk_same, f"small kamp run {small_same}, default-bundle finetune rerun {desk_same}")
