"""Release acceptance gate.

One test per numbered release criterion.  Each test prints a single
machine-readable line

    [acceptance] criterion N (name): PASS|FAIL (detail)

and then asserts, so `pytest -s tests/test_acceptance.py` doubles as the
acceptance report.  Oracles here are written from scratch as scalar loops
so they share no code with the implementation under test.
"""

import dataclasses
import math
import re
import struct
import time
from collections import OrderedDict

import numpy as np
import pytest

from cardioseq import checkpoint as CK
from cardioseq import cli
from cardioseq import data as D
from cardioseq import layers as L
from cardioseq import model as M
from cardioseq import synthetic
from cardioseq import tensor as T
from cardioseq import training as TR
from cardioseq.errors import CheckpointError
from cardioseq.rng import DeterministicRng
from cardioseq.tensor import Tensor
from cardioseq.verify import run_gradcheck_suite


def _report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    line = f"[acceptance] criterion {num} ({name}): {status}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _sigm(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@pytest.fixture(scope="module")
def texture_data(tmp_path_factory):
    """The 51 ischemic / 43 non-ischemic synthetic texture dataset shared by
    the convergence and determinism criteria."""
    out = tmp_path_factory.mktemp("texture")
    manifest = synthetic.generate_texture_dataset(out, 51, 43, seed=3,
                                                  fmt="r96a")
    return manifest


class TestCriterion1GradientCorrectness:
    def test_gradcheck_all_components(self):
        start = time.monotonic()
        results = run_gradcheck_suite("all")
        elapsed = time.monotonic() - start
        worst = max(r.max_rel_error for r in results.values())
        ok = (len(results) >= 14 and worst < 1e-4 and elapsed < 120.0)
        _report(1, "gradient correctness", ok,
                f"{len(results)} components, max_rel_error={worst:.3e}, "
                f"{elapsed:.1f}s")


class TestCriterion2OracleEquivalence:
    """conv2d_same, pool2d, lstm_cell_step and self_attention_forward vs
    fresh scalar-loop re-implementations, 100 random instances each."""

    @staticmethod
    def conv_oracle(x, w, b):
        h, wd, cin = x.shape
        k, _, _, cout = w.shape
        pad = k // 2
        out = np.zeros((h, wd, cout))
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    acc = float(b[co])
                    for di in range(k):
                        for dj in range(k):
                            si, sj = i + di - pad, j + dj - pad
                            if 0 <= si < h and 0 <= sj < wd:
                                for ci in range(cin):
                                    acc += float(x[si, sj, ci]) * \
                                        float(w[di, dj, ci, co])
                    out[i, j, co] = acc
        return out

    @staticmethod
    def pool_oracle(x, kind, window, stride):
        h, wd, c = x.shape
        oh = (h - window) // stride + 1
        ow = (wd - window) // stride + 1
        out = np.zeros((oh, ow, c))
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    vals = [float(x[i * stride + di, j * stride + dj, ch])
                            for di in range(window) for dj in range(window)]
                    if kind == "max":
                        out[i, j, ch] = max(vals)
                    else:
                        acc = 0.0
                        for v in vals:
                            acc += v
                        out[i, j, ch] = acc / (window * window)
        return out

    @staticmethod
    def lstm_oracle(x, h, c, p):
        z = [float(v) for v in x] + [float(v) for v in h]
        hid = len(h)
        h_new = np.zeros(hid)
        c_new = np.zeros(hid)
        for u in range(hid):
            def gate(wn, bn):
                s = float(p[bn][u])
                for a in range(len(z)):
                    s += z[a] * float(p[wn][a, u])
                return s
            i = _sigm(gate("W_i", "b_i"))
            f = _sigm(gate("W_f", "b_f"))
            o = _sigm(gate("W_o", "b_o"))
            g = math.tanh(gate("W_g", "b_g"))
            c_new[u] = f * float(c[u]) + i * g
            h_new[u] = o * math.tanh(c_new[u])
        return h_new, c_new

    @staticmethod
    def attention_oracle(x, proj, width, scale):
        tn, d = x.shape
        def dense(wn, bn):
            w, b = proj[wn], proj[bn]
            out = np.zeros((tn, w.shape[1]))
            for t in range(tn):
                for a in range(w.shape[1]):
                    s = float(b[a])
                    for i in range(d):
                        s += float(x[t, i]) * float(w[i, a])
                    out[t, a] = s
            return out
        q, k, v = dense("Wq", "bq"), dense("Wk", "bk"), dense("Wv", "bv")
        dk, dv = q.shape[1], v.shape[1]
        wts = np.zeros((tn, tn))
        ctx = np.zeros((tn, dv))
        for t in range(tn):
            raw = np.zeros(tn)
            for u in range(tn):
                s = 0.0
                for a in range(dk):
                    s += q[t, a] * k[u, a]
                if scale:
                    s /= math.sqrt(dk)
                raw[u] = _sigm(s) if abs(t - u) <= width / 2 else 0.0
            tot = 0.0
            for u in range(tn):
                tot += raw[u]
            for u in range(tn):
                wts[t, u] = raw[u] / tot
            for a in range(dv):
                acc = 0.0
                for u in range(tn):
                    acc += wts[t, u] * v[u, a]
                ctx[t, a] = acc
        return ctx, wts

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(2001)
        worst = {"conv2d_same": 0.0, "pool2d": 0.0, "lstm_cell_step": 0.0,
                 "self_attention_forward": 0.0}

        for _ in range(100):
            h, w = rng.integers(2, 7, size=2)
            cin, cout = rng.integers(1, 4, size=2)
            k = int(rng.choice([1, 3, 5]))
            x = rng.standard_normal((h, w, cin))
            kern = rng.standard_normal((k, k, cin, cout))
            bias = rng.standard_normal(cout)
            got = T.conv2d_same(Tensor(x), Tensor(kern), Tensor(bias)).values
            want = self.conv_oracle(x, kern, bias)
            worst["conv2d_same"] = max(worst["conv2d_same"],
                                       np.abs(got - want).max())

        for n in range(100):
            d = int(rng.integers(2, 9))
            window = int(rng.integers(1, min(4, d) + 1))
            stride = int(rng.integers(1, 4))
            c = int(rng.integers(1, 4))
            kind = "max" if n % 2 == 0 else "avg"
            x = rng.standard_normal((d, d, c))
            got = T.pool2d(Tensor(x), kind, window, stride).values
            want = self.pool_oracle(x, kind, window, stride)
            worst["pool2d"] = max(worst["pool2d"], np.abs(got - want).max())

        for _ in range(100):
            d_in = int(rng.integers(1, 5))
            hid = int(rng.integers(1, 5))
            arrays = {}
            for gate in "ifog":
                arrays[f"W_{gate}"] = rng.standard_normal((d_in + hid, hid))
                arrays[f"b_{gate}"] = rng.standard_normal(hid)
            p = L.LstmCellParams(*(Tensor(arrays[f"W_{g}"]) for g in "ifog"),
                                 *(Tensor(arrays[f"b_{g}"]) for g in "ifog"))
            x = rng.standard_normal(d_in)
            h0 = rng.standard_normal(hid)
            c0 = rng.standard_normal(hid)
            h1, c1 = L.lstm_cell_step(Tensor(x), Tensor(h0), Tensor(c0), p)
            oh, oc = self.lstm_oracle(x, h0, c0, arrays)
            worst["lstm_cell_step"] = max(
                worst["lstm_cell_step"],
                np.abs(h1.values - oh).max(), np.abs(c1.values - oc).max())

        for _ in range(100):
            tn = int(rng.integers(1, 7))
            d = int(rng.integers(1, 5))
            dk = int(rng.integers(1, 4))
            dv = int(rng.integers(1, 5))
            width = int(rng.choice([0, 1, 2, 4, 100]))
            scale = bool(rng.integers(0, 2))
            x = rng.standard_normal((tn, d))
            proj = {"Wq": rng.standard_normal((d, dk)),
                    "bq": rng.standard_normal(dk),
                    "Wk": rng.standard_normal((d, dk)),
                    "bk": rng.standard_normal(dk),
                    "Wv": rng.standard_normal((d, dv)),
                    "bv": rng.standard_normal(dv)}
            p = L.SelfAttentionParams(
                query=L.DenseParams(Tensor(proj["Wq"]), Tensor(proj["bq"])),
                key=L.DenseParams(Tensor(proj["Wk"]), Tensor(proj["bk"])),
                value=L.DenseParams(Tensor(proj["Wv"]), Tensor(proj["bv"])),
                attention_width=width, scale_scores=scale)
            ctx, wts = L.self_attention_forward(Tensor(x), p)
            octx, owts = self.attention_oracle(x, proj, width, scale)
            worst["self_attention_forward"] = max(
                worst["self_attention_forward"],
                np.abs(ctx.values - octx).max(),
                np.abs(wts.values - owts).max())

        ok = all(v < 1e-10 for v in worst.values())
        detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
        _report(2, "oracle equivalence", ok, detail)


class TestCriterion3StructuralInvariants:
    def test_invariants(self):
        rng = np.random.default_rng(31)
        checks = {}

        worst = 0.0
        for _ in range(50):
            m = rng.standard_normal((20, 7)) * rng.uniform(0.5, 20.0)
            y = T.softmax(Tensor(m)).values
            worst = max(worst, np.abs(y.sum(axis=1) - 1.0).max())
        checks["softmax rows"] = worst < 1e-9

        cfg = M.tiny_config(M.Variant.CNN_BILSTM_ATTN)
        params = M.build_model(cfg, DeterministicRng(5), dtype=np.float64)
        img = Tensor(rng.standard_normal((cfg.input_size, cfg.input_size, 3)))
        probs, attn = M.model_forward(params, cfg, img, "eval")
        checks["model prob row"] = abs(float(probs.values.sum()) - 1.0) < 1e-9
        checks["attention rows"] = \
            np.abs(attn.values.sum(axis=1) - 1.0).max() < 1e-9

        fmap = Tensor(rng.standard_normal((4, 4, 8)))
        seq = M.feature_reshape(fmap, 8, 16)
        back = T.reshape(seq, (4, 4, 8))
        checks["feature_reshape round-trip"] = \
            np.array_equal(back.values, fmap.values)

        def cell(d_in, hid):
            return L.LstmCellParams(
                *(Tensor(rng.standard_normal((d_in + hid, hid)))
                  for _ in range(4)),
                *(Tensor(rng.standard_normal(hid)) for _ in range(4)))
        hid = 3
        p = L.BiLstmParams(cell(5, hid), cell(5, hid))
        xs = rng.standard_normal((6, 5))
        y = L.bilstm_forward(Tensor(xs), p).values
        y_rev = L.bilstm_forward(
            Tensor(xs[::-1].copy()),
            L.BiLstmParams(p.backward_cell, p.forward_cell)).values
        mirrored = np.concatenate(
            [y_rev[::-1][:, hid:], y_rev[::-1][:, :hid]], axis=1)
        checks["bilstm reversal duality"] = np.array_equal(y, mirrored)

        cfg1 = dataclasses.replace(cfg, seq_len=1, feat_dim=12)
        params1 = M.build_model(cfg1, DeterministicRng(6), dtype=np.float64)
        _, attn1 = M.model_forward(params1, cfg1, img, "eval")
        checks["seq_len=1 attention [[1]]"] = \
            np.array_equal(attn1.values, np.array([[1.0]]))

        ok = all(checks.values())
        detail = ", ".join(f"{k}: {'ok' if v else 'BAD'}"
                           for k, v in checks.items())
        _report(3, "structural invariants", ok, detail)


class TestCriterion4SyntheticConvergence:
    def test_convergence(self, texture_data):
        start = time.monotonic()
        entries = D.load_manifest(texture_data)
        split = D.split_dataset(entries, 65, seed=1)
        model_cfg = M.ModelConfig()
        train_cfg = TR.TrainConfig(max_epochs=30, batch_size=4, patience=30,
                                   seed=1)
        ckpt, records = TR.train(model_cfg, train_cfg, split)
        metrics, _ = TR.evaluate(ckpt, split.test)
        elapsed = time.monotonic() - start
        best_train = max(r.train_accuracy for r in records)
        ok = (len(records) <= 30 and best_train >= 0.95
              and metrics.accuracy is not None and metrics.accuracy >= 0.90
              and elapsed < 600.0)
        _report(4, "synthetic convergence", ok,
                f"train_acc={best_train:.4f} over {len(records)} epochs, "
                f"test_acc={metrics.accuracy:.4f}, {elapsed:.0f}s")


class TestCriterion5AblationFidelity:
    def test_ablation_report_matches_eval(self, tmp_path, capsys):
        manifest = synthetic.generate_texture_dataset(
            tmp_path / "data", 7, 6, seed=11, fmt="r96a")
        cfg = tmp_path / "ab.cfg"
        cfg.write_text(
            f"data.manifest = {manifest}\n"
            "data.train_count = 8\n"
            "train.max_epochs = 1\n"
            "train.batch_size = 4\n"
            "model.seq_len = 64\n"
            "model.feat_dim = 32\n"
            "model.lstm_hidden = 8\n"
            f"out_dir = {tmp_path / 'ab'}\n",
            encoding="utf-8")
        assert cli.main(["ablation", "--config", str(cfg)]) == 0
        capsys.readouterr()
        table = (tmp_path / "ab" / "metrics.txt").read_text()
        row_re = re.compile(
            r"^(cnn_only|cnn_lstm|cnn_bilstm_attn)\s+(\S+)\s+(\S+)\s+(\S+)\s*$",
            re.M)
        cells = {m.group(1): m.groups()[1:] for m in row_re.finditer(table)}
        counts = dict(re.findall(
            r"^counts (\S+): (TP=\d+ FP=\d+ FN=\d+ TN=\d+)$", table, re.M))
        ok = len(cells) == 3 and len(counts) == 3

        # independent recomputation: rebuild the split, evaluate each saved
        # checkpoint through cmd_eval on the held-out rows
        entries = D.load_manifest(manifest)
        split = D.split_dataset(entries, 8, seed=1)
        test_manifest = tmp_path / "test.csv"
        test_manifest.write_text(
            "path,label\n" +
            "".join(f"{e.resolved},{e.label}\n" for e in split.test),
            encoding="utf-8")
        for variant in ("cnn_only", "cnn_lstm", "cnn_bilstm_attn"):
            rc = cli.main(["eval",
                           "--checkpoint",
                           str(tmp_path / "ab" / f"model_{variant}.csq"),
                           "--manifest", str(test_manifest),
                           "--out", str(tmp_path / f"ev_{variant}")])
            printed = capsys.readouterr().out
            m = re.search(r"accuracy=(\S+) sensitivity=(\S+) "
                          r"specificity=(\S+)", printed)
            c = re.search(r"TP=\d+ FP=\d+ FN=\d+ TN=\d+", printed)
            ok &= (rc == 0 and m is not None and c is not None
                   and m.groups() == cells.get(variant)
                   and c.group(0) == counts.get(variant))

        # metric formulas against a brute-force confusion recount
        rng = np.random.default_rng(404)
        formulas = True
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            true = rng.integers(0, 2, size=n).tolist()
            pred = rng.integers(0, 2, size=n).tolist()
            got = TR.metrics_from_pairs(zip(true, pred))
            tp = sum(1 for t, p in zip(true, pred) if t == 1 and p == 1)
            fp = sum(1 for t, p in zip(true, pred) if t == 0 and p == 1)
            fn = sum(1 for t, p in zip(true, pred) if t == 1 and p == 0)
            tn = sum(1 for t, p in zip(true, pred) if t == 0 and p == 0)
            formulas &= (got.tp, got.fp, got.fn, got.tn) == (tp, fp, fn, tn)
            formulas &= got.accuracy == (tp + tn) / n
            formulas &= got.sensitivity == \
                (tp / (tp + fn) if tp + fn else None)
            formulas &= got.specificity == \
                (tn / (tn + fp) if tn + fp else None)
        ok &= formulas
        _report(5, "ablation fidelity", ok,
                f"3 rows vs cmd_eval, 1000-log recount "
                f"{'ok' if formulas else 'BAD'}")


class TestCriterion6Determinism:
    def test_two_runs_bitwise_identical(self, texture_data, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            f"data.manifest = {texture_data}\n"
            "data.train_count = 65\n"
            "train.max_epochs = 3\n"
            "train.batch_size = 4\n"
            "seed = 1\n",
            encoding="utf-8")
        for tag in ("a", "b"):
            assert cli.main(["train", "--config", str(cfg),
                             "--out", str(tmp_path / tag)]) == 0
        names = ("model.csq", "curves.csv", "misclassified.csv", "metrics.txt")
        same = [n for n in names
                if _read(tmp_path / "a" / n) == _read(tmp_path / "b" / n)]
        ok = len(same) == len(names)
        _report(6, "determinism", ok,
                f"{len(same)}/{len(names)} artifacts byte-identical")


class TestCriterion7Persistence:
    def test_roundtrip_predictions_and_corruption(self, tmp_path):
        cfg = M.tiny_config(M.Variant.CNN_BILSTM_ATTN)
        params = M.build_model(cfg, DeterministicRng(9))
        adam = TR.AdamState.fresh(params)
        arng = np.random.default_rng(9)
        for path in params.paths():
            adam.m[path] = arng.standard_normal(
                adam.m[path].shape).astype(np.float32)
            adam.v[path] = np.abs(arng.standard_normal(
                adam.v[path].shape)).astype(np.float32)
        adam.t = 17
        ckpt = TR.Checkpoint(cfg, params, 9, adam)

        p1, p2 = tmp_path / "a.csq", tmp_path / "b.csq"
        CK.save_checkpoint(ckpt, p1)
        loaded = CK.load_checkpoint(p1)
        CK.save_checkpoint(loaded, p2)
        bitwise = _read(p1) == _read(p2)

        rng = np.random.default_rng(17)
        preds = True
        for _ in range(10):
            img = Tensor(rng.standard_normal(
                (cfg.input_size, cfg.input_size, 3)).astype(np.float32))
            a, _ = M.model_forward(params, cfg, img, "eval")
            b, _ = M.model_forward(loaded.params, loaded.config, img, "eval")
            preds &= np.array_equal(a.values, b.values)

        raw = _read(p1)
        corrupt = {
            "bad magic": b"XXXX" + raw[4:],
            "bad version": raw[:4] + struct.pack("<I", 9) + raw[8:],
            "short header": raw[:6],
            "truncated payload": raw[:len(raw) // 2],
            "trailing bytes": raw + b"\x00",
        }
        rejected = 0
        for name, blob in corrupt.items():
            bad = tmp_path / "bad.csq"
            bad.write_bytes(blob)
            with pytest.raises(CheckpointError):
                CK.load_checkpoint(bad)
            rejected += 1
        with pytest.raises(CheckpointError):
            CK.load_checkpoint(tmp_path / "missing.csq")
        rejected += 1
        # config/tensor-table disagreement is also a load error
        other = M.tiny_config(M.Variant.CNN_LSTM)
        mangled = tmp_path / "mangled.csq"
        CK.save_checkpoint(TR.Checkpoint(other, params, 9), mangled)
        with pytest.raises(CheckpointError):
            CK.load_checkpoint(mangled)
        rejected += 1

        ok = bitwise and preds and rejected == 7
        _report(7, "persistence", ok,
                f"save-load-save bitwise={bitwise}, 10-input predictions "
                f"exact={preds}, {rejected}/7 corruptions rejected")


class TestCriterion8OptimizerChecks:
    def test_adam_l2_and_decay(self):
        rng = np.random.default_rng(88)
        theta0 = rng.standard_normal(5)
        grads = [rng.standard_normal(5) for _ in range(10)]
        lr = 0.01

        params = M.ModelParams(OrderedDict(
            [("w", Tensor(theta0.copy().astype(np.float64)))]))
        state = TR.AdamState.fresh(params)
        worst_adam = 0.0
        oracle = [(float(theta0[i]), 0.0, 0.0) for i in range(5)]
        for t, g in enumerate(grads, start=1):
            params["w"].grad = g.copy()
            TR.adam_step(state, params, lr)
            for i in range(5):
                th, m, v = oracle[i]
                gi = float(g[i])
                m = TR.BETA1 * m + (1.0 - TR.BETA1) * gi
                v = TR.BETA2 * v + (1.0 - TR.BETA2) * (gi * gi)
                mhat = m / (1.0 - TR.BETA1 ** t)
                vhat = v / (1.0 - TR.BETA2 ** t)
                th = th - lr * mhat / (math.sqrt(vhat) + TR.EPSILON)
                oracle[i] = (th, m, v)
                worst_adam = max(worst_adam,
                                 abs(float(params["w"].values[i]) - th))
        adam_ok = worst_adam < 1e-15

        cfg = M.tiny_config(M.Variant.CNN_BILSTM_ATTN)
        mp = M.build_model(cfg, DeterministicRng(12), dtype=np.float64)
        lam = 0.01
        with T.Tape() as tape:
            loss = TR.l2_penalty(mp, lam)
        tape.backward(loss)
        worst_l2 = 0.0
        for path, tensor in mp.weight_items():
            worst_l2 = max(worst_l2, np.abs(
                tensor.grad - 2.0 * lam * tensor.values).max())
        l2_ok = worst_l2 < 1e-10

        decay_ok = all(
            TR.effective_lr(base, 1e-6, 10 ** 6) == base * 0.5
            for base in (1e-4, 0.02, 1.0))

        ok = adam_ok and l2_ok and decay_ok
        _report(8, "optimizer and regularizer", ok,
                f"adam trace max diff={worst_adam:.2e}, "
                f"l2 grad max diff={worst_l2:.2e}, "
                f"lr halving exact={decay_ok}")
