"""Acceptance criteria 1-9; every test prints one PASS/FAIL verdict line.

The verdict lines are also collected into the "acceptance criteria" section
of the pytest terminal summary.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from caepl import experiment, models, ops
from caepl.checkpoint import Checkpoint, load_checkpoint
from caepl.cli import main
from caepl.config import load_config, train_config
from caepl.layers import he_normal_init
from caepl.metrics import VOID, ConfusionMatrix
from caepl.reports import read_log_csv
from caepl.tensor import RngStream
from caepl.training import corrupt_salt_pepper, evaluate_autoencoder, evaluate_segmenter
from oracles import (conv2d_loop, confusion_loop, iou_sets, maxpool_loop, numeric_grad_check, t64,
                     tconv2d_scatter)
from test_models import _graph_check, _task_batch

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
DESK_RUNS = [{"name": "FCN", "variant": "fcn", "encoder_weights": False},
             {"name": "AE4L-FCN", "variant": "ae4l-fcn", "encoder_weights": True},
             {"name": "AE4L-FCN", "variant": "ae4l-fcn", "encoder_weights": False}]
SEEDS = (0, 1, 2)


def verdict(lines, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    lines.append(line)
    assert ok, line


def desk_config(**sets):
    return load_config(DESK, [f"{k}={v}" for k, v in sets.items()], env={})


@pytest.fixture(scope="module")
def desk_ae(tmp_path_factory):
    cfg = desk_config()
    out = tmp_path_factory.mktemp("desk_ae")
    t0 = time.perf_counter()
    res = experiment.run_train_ae(cfg, out, seed=0, variant="ae4l")
    return cfg, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_compare(tmp_path_factory):
    cfg = desk_config()
    cfg["compare"]["runs"] = DESK_RUNS
    cfg["compare"]["seeds"] = list(SEEDS)
    out = tmp_path_factory.mktemp("desk_compare")
    return cfg, out, experiment.run_compare(cfg, out)


# -- 1 -------------------------------------------------------------------------

def _op_checks(rng):
    """Loss closures over fresh float64 inputs for every differentiable op."""
    r = lambda *s: t64(rng.standard_normal(s), False)  # noqa: E731
    x, k, b = t64(rng.standard_normal((2, 3, 7, 5))), t64(rng.standard_normal((4, 3, 3, 3))), t64(rng.standard_normal(4))
    rc = r(2, 4, 4, 3)
    yield "conv2d", lambda: ops.tsum(ops.mul(ops.conv2d(x, k, b, stride=2, pad=1), rc)), [x, k, b]
    xt, kt, bt = t64(rng.standard_normal((2, 3, 3, 4))), t64(rng.standard_normal((3, 2, 4, 4))), t64(rng.standard_normal(2))
    rt = r(2, 2, 6, 8)
    yield "transposed_conv2d", lambda: ops.tsum(ops.mul(ops.transposed_conv2d(xt, kt, bt, stride=2), rt)), [xt, kt, bt]
    xp = t64(rng.permutation(64).reshape(1, 4, 4, 4) * 0.1)
    rp = r(1, 4, 2, 2)
    yield "max_pool2d", lambda: ops.tsum(ops.mul(ops.max_pool2d(xp), rp)), [xp]
    xb, g, be = t64(rng.standard_normal((3, 2, 3, 3))), t64(rng.standard_normal(2)), t64(rng.standard_normal(2))
    rb = r(3, 2, 3, 3)
    mm, mv = np.zeros(2), np.ones(2)
    yield "batch_norm", lambda: ops.tsum(ops.mul(ops.batch_norm(xb, g, be, mm, mv, True), rb)), [xb, g, be]
    xr = t64(rng.standard_normal((3, 7)))
    xr.data[np.abs(xr.data) < 1e-3] = 0.5
    rr = r(3, 7)
    yield "relu", lambda: ops.tsum(ops.mul(ops.relu(xr), rr)), [xr]
    xm = t64(rng.standard_normal((3, 7)) * 2)
    yield "modified_tanh", lambda: ops.tsum(ops.mul(ops.modified_tanh(xm), rr)), [xm]
    pm, tm = t64(rng.standard_normal((2, 3, 4))), rng.standard_normal((2, 3, 4))
    yield "mse", lambda: ops.mse(pm, tm), [pm]
    pb, tb = t64(rng.uniform(0.05, 0.95, (2, 3, 4))), rng.uniform(0, 1, (2, 3, 4))
    yield "bce", lambda: ops.binary_cross_entropy(pb, tb), [pb]
    z, y = t64(rng.standard_normal((2, 4, 3, 3))), rng.integers(0, 4, (2, 3, 3))
    y[0, 0, 0] = VOID
    yield "softmax_cross_entropy", lambda: ops.softmax_cross_entropy(z, y), [z]


def test_criterion_1_gradients(verdicts):
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, f, tensors in _op_checks(rng):
            worst[name] = max(worst.get(name, 0.0), numeric_grad_check(f, tensors, rng))
        x16, _ = _task_batch(seed, 16)
        ae = models.build_variant("ae4l", "toy")
        worst["toy AE4L"] = max(worst.get("toy AE4L", 0.0),
                                _graph_check(ae, x16, lambda out: ops.binary_cross_entropy(out, x16), rng))
        x64, y64 = _task_batch(seed, 64)
        for label, variant in (("toy FCN-8s", "fcn"), ("toy CAEPL", "ae4l-fcn")):
            model = models.build_variant(variant, "toy", num_classes=3)
            ratio = _graph_check(model, x64, lambda out: ops.softmax_cross_entropy(out, y64), rng)
            worst[label] = max(worst.get(label, 0.0), ratio)
    elapsed = time.perf_counter() - t0
    failing = [k for k, v in worst.items() if v > 1]
    ok = not failing and elapsed < 300
    detail = (f"{len(worst)} checks x {len(SEEDS)} seeds, worst |a-n|/(1e-4 max(|a|,|n|)+1e-8) = "
              f"{max(worst.values()):.3f} ({max(worst, key=worst.get)}), {elapsed:.0f}s"
              + (f"; failing: {', '.join(failing)}" if failing else ""))
    verdict(verdicts, 1, ok, detail)


# -- 2 -------------------------------------------------------------------------

def test_criterion_2_oracles(verdicts):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(100 + seed)
        for _ in range(8):
            n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
            k, stride, pad = int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(0, 3))
            h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
            h -= (h + 2 * pad - k) % stride
            w -= (w + 2 * pad - k) % stride
            x, kern, b = rng.standard_normal((n, cin, h, w)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
            got = ops.conv2d(t64(x), t64(kern), t64(b), stride, pad).data
            worst = max(worst, np.abs(got - conv2d_loop(x, kern, b, stride, pad)).max())

            s = int(rng.integers(1, 4))
            kt = s + 2 * int(rng.integers(0, 3))
            x = rng.standard_normal((n, cin, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
            kern, b = rng.standard_normal((cin, cout, kt, kt)), rng.standard_normal(cout)
            got = ops.transposed_conv2d(t64(x), t64(kern), t64(b), s).data
            worst = max(worst, np.abs(got - tconv2d_scatter(x, kern, b, s, (kt - s) // 2)).max())

            x = rng.standard_normal((n, cin, 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))))
            worst = max(worst, np.abs(ops.max_pool2d(t64(x)).data - maxpool_loop(x)).max())
    metrics_exact = True
    for seed in SEEDS:
        rng = np.random.default_rng(200 + seed)
        gt = rng.integers(0, 5, (16, 16))
        gt[rng.random((16, 16)) < 0.15] = VOID
        pred = rng.integers(0, 5, (16, 16))
        cm = ConfusionMatrix(5).accumulate(pred, gt)
        keep = gt != VOID
        ious = iou_sets(pred, gt, 5)
        vals = [v for v in ious if v is not None]
        metrics_exact &= np.array_equal(cm.counts, confusion_loop(pred, gt, 5))
        metrics_exact &= cm.pixel_accuracy() == np.sum(pred[keep] == gt[keep]) / keep.sum()
        metrics_exact &= all((v is None and np.isnan(c)) or c == v for c, v in zip(cm.per_class_iou(), ious))
        metrics_exact &= cm.mean_iou() == sum(vals) / len(vals)
    ok = worst <= 1e-10 and metrics_exact
    verdict(verdicts, 2, ok, f"max |kernel - loop oracle| = {worst:.2e} (tol 1e-10); "
                             f"confusion/pix_acc/mIoU exact vs brute force: {metrics_exact}")


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_transfer_identity(verdicts):
    ae = models.build_variant("ae4l", "toy").materialize()
    he_normal_init(ae, 11)
    rng = np.random.default_rng(5)
    for k, b in ae.buffers.items():
        b[...] = rng.uniform(0.5, 1.5, b.shape) if k.endswith("variance") else rng.standard_normal(b.shape)
    caepl = models.build_variant("ae4l-fcn", "toy").materialize()
    he_normal_init(caepl, 12)
    ckpt = Checkpoint.from_model(ae)
    models.transfer_encoder_weights(caepl, ckpt)
    x = rng.uniform(size=(10, 3, 32, 32)).astype(np.float32)
    diff = np.abs(models.encoder_submodel(caepl).forward(x).data - models.encoder_submodel(ae).forward(x).data).max()
    before = caepl.state_dict()
    models.transfer_encoder_weights(caepl, ckpt)
    idempotent = all(np.array_equal(v, caepl.state_dict()[k]) for k, v in before.items())
    verdict(verdicts, 3, diff <= 1e-6 and idempotent,
            f"max |encoder(CAEPL) - encoder(AE)| on 10 inputs = {diff:.2e} (tol 1e-6); idempotent: {idempotent}")


# -- 4 -------------------------------------------------------------------------

def test_criterion_4_denoising(desk_ae, verdicts):
    cfg, res, elapsed = desk_ae
    val = experiment.load_datasets(cfg)["val"]
    s = experiment.score_checkpoint(res["best"], val, cfg, "val")
    ratio = s["recon_mse"] / s["corrupted_mse"]
    verdict(verdicts, 4, ratio < 0.5 and elapsed < 1800,
            f"toy AE4L on synthetic 64x64 (200/50): recon MSE {s['recon_mse']:.5f} vs corrupted "
            f"{s['corrupted_mse']:.5f}, ratio {ratio:.3f} (< 0.5), {elapsed:.0f}s")


# -- 5 -------------------------------------------------------------------------

def test_criterion_5_salt_and_pepper(verdicts):
    img = np.full((1000, 1000), 0.5, np.float32)
    out = corrupt_salt_pepper(img, 0.5, 0.5, RngStream(0))
    hit = out != 0.5
    frac, white = hit.mean(), (out[hit] == 1).mean()
    ok = abs(frac - 0.5) <= 0.01 and abs(white - 0.5) <= 0.01
    verdict(verdicts, 5, ok, f"10^6 elements: corrupted {frac:.4f}, white among corrupted {white:.4f} (0.5 +- 0.01)")


# -- 6 -------------------------------------------------------------------------

def test_criterion_6_desk_matrix(desk_compare, verdicts):
    _, out, res = desk_compare
    header = (out / "summary.csv").read_text().splitlines()[0]
    shaped = header == ",".join(experiment.SUMMARY_HEADER)
    rows = res["rows"]
    complete = len(rows) == len(DESK_RUNS) * len(SEEDS)
    low = [f"{r['model']}/{r['encoder_weights']}/seed{r['seed']}={r['mean_iou']:.3f}"
           for r in rows if r["mean_iou"] < 0.5]
    deltas = "; ".join(f"{a['model']} weights={a['encoder_weights']}: mIoU {a['mean_iou']:.3f} "
                       f"delta {a['delta_mean_iou_vs_fcn']:+.3f}" for a in res["aggregate"])
    per_seed = " ".join(f"s{r['seed']}:{r['delta_mean_iou_vs_fcn']:+.3f}" for r in rows if r["model"] != "FCN")
    ok = shaped and complete and not low
    verdict(verdicts, 6, ok, f"{deltas}; per-seed deltas {per_seed}" + (f"; below 0.5: {', '.join(low)}" if low else ""))


# -- 7 -------------------------------------------------------------------------

def test_criterion_7_parameter_audit(verdicts):
    t0 = time.perf_counter()
    _, report, target = experiment.params_report("fcn", "full")
    rel = abs(report.total - target[2]) / target[2]
    search = experiment.search_report()
    match = search["matches"][0] if search["matches"] else None
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.005 and match is not None and elapsed < 60
    verdict(verdicts, 7, ok, f"FCN full total {report.total:,} vs {target[2]:,} ({100 * rel:.4f}%); "
                             f"AE4L search match {match} over {search['evaluated']} candidates; {elapsed:.1f}s")


# -- 8 -------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, capsys, verdicts):
    small = ["--set", "dataset.synthetic.size=32", "--set", "dataset.synthetic.n_train=10",
             "--set", "dataset.synthetic.n_val=5"]
    budgets = ["--set", "train_ae.lr=0.05", "--set", "train_ae.max_epochs=2", "--set", "train_fcn.lr=0.01",
               "--set", "train_fcn.max_epochs=2", "--set", "train_caepl.lr=0.01", "--set", "train_caepl.max_epochs=2"]
    compare_set = ["--set", "compare.seeds=[3]", "--set",
                   "compare.runs=[{name: FCN, variant: fcn}, {name: AE4L-FCN, variant: ae4l-fcn, encoder_weights: true}]"]
    files = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert main(["train-ae", "--variant", "ae4l", "--out", str(d / "ae"), *small, *budgets]) == 0
        assert main(["train-seg", "--variant", "ae4l-fcn", "--out", str(d / "seg"), *small, *budgets]) == 0
        assert main(["evaluate", "--config", str(d / "seg" / "config.yaml"), "--checkpoint", str(d / "seg" / "best.ckpt"),
                     "--out", str(d / "eval.csv")]) == 0
        assert main(["compare", "--out", str(d / "cmp"), *small, *budgets, *compare_set]) == 0
        files[rep] = {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*.csv"))}
    capsys.readouterr()
    same = files["a"].keys() == files["b"].keys() and all(files["a"][k] == files["b"][k] for k in files["a"])
    differing = [str(k) for k in files["a"] if files["a"][k] != files["b"].get(k)]
    verdict(verdicts, 8, same and len(files["a"]) >= 8,
            f"{len(files['a'])} log/score CSVs from train-ae, train-seg, evaluate, compare bitwise identical "
            f"across two runs: {same}" + (f"; differing: {', '.join(differing)}" if differing else ""))


# -- 9 -------------------------------------------------------------------------

def test_criterion_9_monitoring(desk_ae, desk_compare, verdicts):
    cfg, res, _ = desk_ae
    splits = experiment.load_datasets(cfg)
    problems = []
    worst = 0.0
    ae_dirs = [res["dir"]]
    _, out, _ = desk_compare
    ae_dirs += sorted(out.glob("seed_*/pretrain_*"))
    for d in ae_dirs:
        log = read_log_csv(d / "log.csv")
        ckpt = load_checkpoint(d / "best.ckpt")
        vals = log.column("val_loss")
        if log.best_epoch != int(np.nanargmin(vals)) + 1 or ckpt.metadata["epoch"] != log.best_epoch:
            problems.append(f"{d.name}: best epoch mismatch")
        tcfg = train_config(cfg, "train_ae", ckpt.metadata["seed"])
        val_loss, _, _ = evaluate_autoencoder(ckpt.build_model(), splits["val"], tcfg)
        worst = max(worst, abs(val_loss - log.best_row().val_loss))
    seg_dirs = [d for d in sorted(out.glob("seed_*/*")) if not d.name.startswith("pretrain_")]
    for d in seg_dirs:
        log = read_log_csv(d / "log.csv")
        ckpt = load_checkpoint(d / "best.ckpt")
        accs = log.column("val_acc")
        if log.best_epoch != int(np.nanargmax(accs)) + 1 or ckpt.metadata["epoch"] != log.best_epoch:
            problems.append(f"{d.parent.name}/{d.name}: best epoch mismatch")
        _, cm = evaluate_segmenter(ckpt.build_model(), splits["val"], num_classes=experiment.num_classes(cfg))
        worst = max(worst, abs(cm.pixel_accuracy() - log.best_row().val_acc))
    ok = not problems and worst <= 1e-6 and seg_dirs
    verdict(verdicts, 9, ok, f"{len(ae_dirs)} AE (min val_loss) + {len(seg_dirs)} segmentation (max val_acc) runs: "
                             f"best checkpoint epoch = monitored log row; max reload drift {worst:.2e} (tol 1e-6)"
                             + (f"; {'; '.join(problems)}" if problems else ""))
