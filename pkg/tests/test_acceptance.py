"""Acceptance criteria 1-10, one verdict line each.

Each test records ``criterion N: PASS|FAIL  <measurement>`` and then asserts
the same condition, so the summary at the end of the run and the pass/fail
status of the test always agree.  Run with ``-s`` to see the lines as they
happen; otherwise they are collected into the "acceptance criteria" section
of the terminal summary.
"""

import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from caet_swin import cli, container
from caet_swin.attention import LARGE, MSAParams, scaled_dot_product_attention
from caet_swin.cae import CAE, CAETrainConfig, cae_finetune, cae_pretrain, reconstruction_mse
from caet_swin.caet import CAETPath, pad_batch
from caet_swin.data import (VOLUME_MAGIC, Volume, VolumeSample, build_model_inputs, load_volume, resize_for_plan,
                            save_volume)
from caet_swin.errors import FormatError
from caet_swin.fusion import CAETSWinModel, fuse_forward
from caet_swin.gradcheck import run_suite
from caet_swin.plans import FULL, SCALED
from caet_swin.swin import SwinBlock, window_partition, window_reverse
from caet_swin.synthetic import synth_sample
from caet_swin.tensor import Tensor, no_grad
from caet_swin.training.checkpoint import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from caet_swin.training.metrics import bootstrap_ci, compute_metrics
from test_attention import naive_attention, naive_msa
from test_swin import region_oracle
from test_training import exhaustive_ci

CI_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "scaled-ci.json"


def verdict(record_property, n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    record_property("acceptance", line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_criterion_1_attention_oracles(record_property):
    rng = np.random.default_rng(0)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(25):
        n, m, d, dv = (int(v) for v in rng.integers(1, 9, size=4))
        q, k, v = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, dv))
        mask = np.where(rng.random((n, m)) < 0.3, -LARGE, 0.0)
        mask[np.arange(n), rng.integers(0, m, n)] = 0.0
        out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
        worst = max(worst, np.abs(out - naive_attention(q, k, v, mask)).max())
    for _ in range(25):
        n, d, h, dk = (int(v) for v in rng.integers(1, 9, size=4))
        p = MSAParams(d, h, dk, None, rng, dtype=np.float64)
        x = rng.standard_normal((n, d))
        worst = max(worst, np.abs(p(Tensor(x)).data - naive_msa(x, p)).max())
    dt = time.perf_counter() - t0
    verdict(record_property, 1, worst < 1e-6 and dt < 5,
            f"SDPA+MSA vs loops, 25 configs each: max abs err {worst:.2e} (<1e-6), {dt:.2f}s (<5s)")


def test_criterion_2_gradient_suite(record_property):
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    dt = time.perf_counter() - t0
    bad = [f"{n}={e:.1e}" for n, e, tol in results if not e < tol]
    prim = max(e for n, e, tol in results if tol == 1e-5)
    block = max(e for n, e, tol in results if tol == 1e-4)
    verdict(record_property, 2, not bad and dt < 120 and {tol for *_, tol in results} == {1e-5, 1e-4},
            f"{len(results)} checks, worst primitive {prim:.1e} (<1e-5), worst block {block:.1e} (<1e-4), "
            f"{dt:.1f}s (<120s){' failing: ' + ', '.join(bad) if bad else ''}")


def test_criterion_3_shifted_windows(record_property):
    rng = np.random.default_rng(3)
    errs = {}
    for H, M in ((14, 7), (8, 4)):
        blk = SwinBlock(6, 2, H, M, True, rng, dtype=np.float64)
        blk.rel_bias.data[...] = rng.standard_normal(blk.rel_bias.shape)
        x = rng.standard_normal((H, H, 6))
        errs[f"{H}x{H}/M={M}"] = np.abs(blk.attention(Tensor(x[None])).data[0] - region_oracle(blk, x)).max()
    roundtrip = all(
        np.array_equal(window_reverse(window_partition(Tensor(x), m), m, h, h).data, x)
        for h, m in ((14, 7), (8, 4), (56, 7), (4, 4))
        for x in [rng.standard_normal((2, h, h, 3))])
    verdict(record_property, 3, max(errs.values()) < 1e-6 and roundtrip,
            "masked SW-MSA vs per-region: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
            + f"; partition/reverse exact: {roundtrip}")


def test_criterion_4_full_dimensions(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    model = CAETSWinModel(FULL, rng).eval()
    checks = {}
    with no_grad():
        seq = rng.standard_normal((1, 25, 256)).astype(np.float32)
        t = model.caet(seq, np.ones((1, 25), bool)).data
        checks["CAET 25x256->32"] = t.shape == (1, 32)
        checks["CAET 3 blocks/5 heads/d_k 128"] = (len(model.caet.blocks) == 3
                                                   and model.caet.blocks[0].msa.h == 5
                                                   and model.caet.blocks[0].msa.head(0).d_k == 128)
        sw = model.swin
        x = Tensor(rng.random((1, 1, 224, 224)).astype(np.float32))
        tokens = sw.patch_embed(x)
        checks["SWin embed 56x56x128"] = tokens.shape == (1, 56, 56, 128)
        for stage in sw.stages:
            tokens = stage(tokens)
        checks["SWin last stage 7x7x1024"] = tokens.shape == (1, 7, 7, 1024)
        checks["SWin tokens 7x7x1024 after norm"] = sw.tokens(x).shape == (1, 7, 7, 1024)
        s = sw.forward_volumes([x.data]).data
        checks["SWin feature 1024"] = s.shape == (1, 1024)
        probs = fuse_forward(t, s, model.fusion).data
        checks["fusion 1056->2, sums to 1"] = (model.fusion.in_dim == 1056 and probs.shape == (1, 2)
                                              and abs(float(probs.sum()) - 1) <= 1e-6)
    dt = time.perf_counter() - t0
    bad = [k for k, v in checks.items() if not v]
    verdict(record_property, 4, not bad and dt < 60,
            f"{len(checks) - len(bad)}/{len(checks)} shape checks{' (failed: ' + ', '.join(bad) + ')' if bad else ''}"
            f", forward-only {dt:.1f}s (<60s)")


def test_criterion_5_padding_invariance(record_property):
    rng = np.random.default_rng(5)
    path = CAETPath(FULL.caet, rng, "GMP")
    feats, valid = pad_batch([rng.standard_normal((k, 256)).astype(np.float32) for k in (3, 11)], 25)
    with no_grad():
        ref = path(feats, valid).data
        same = 0
        for _ in range(10):
            noisy = feats.copy()
            noisy[~valid] = rng.standard_normal((int((~valid).sum()), 256)) * 100
            same += int(path(noisy, valid).data.tobytes() == ref.tobytes())
    verdict(record_property, 5, same == 10, f"bit-identical CAET output under padding garbage: {same}/10 trials")


def _synthetic_slices(n: int, seed: int) -> np.ndarray:
    out, i = [], 0
    while sum(len(c) for c in out) < n:
        vol, mask, ann = synth_sample(i, i % 2, 0.9, seed)
        c, _ = resize_for_plan(*build_model_inputs(VolumeSample(vol, mask, ann, i % 2)), SCALED)
        out.append(c)
        i += 1
    return np.concatenate(out)[:n]


def test_criterion_6_cae(record_property):
    x = _synthetic_slices(200, seed=11)
    perm = np.random.default_rng(6).permutation(len(x))
    train, held = x[perm[:160]], x[perm[160:]]
    model = CAE(SCALED.cae, np.random.default_rng(6))
    before = reconstruction_mse(model, held)
    cfg = CAETrainConfig(batch_size=16, lr_pretrain=1e-3, epochs_pretrain=10**6, max_steps=200, val_fraction=0.0,
                         lr_finetune=1e-3, epochs_finetune=1)
    cae_pretrain(model, train, cfg, 0)
    after = reconstruction_mse(model, held)
    reduction = 1 - after / before

    digest = {n: hashlib.sha256(p.data.tobytes()).hexdigest() for n, p in model.named_parameters()}
    cae_finetune(model, train, cfg, 1)
    changed = {n.rsplit(".", 1)[0] for n, p in model.named_parameters()
               if hashlib.sha256(p.data.tobytes()).hexdigest() != digest[n]}
    designated = {"encoder.convs.4", "encoder.fc", "decoder.fc", "decoder.convs.0"}
    verdict(record_property, 6, reduction >= 0.5 and changed == designated,
            f"held-out MSE {before:.2e} -> {after:.2e} in 200 steps ({reduction:.0%} reduction, need >=50%); "
            f"fine-tune changed {sorted(changed)}")


# --- criteria 7 and 9 share one cross-validation run ------------------------


@pytest.fixture(scope="module")
def cv_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    assert cli.main(["synth-gen", "--n", "20", "--sep", "0.9", "--seed", "7", "--out", str(root / "data")]) == 0
    runs = []
    for i in range(2):
        t0 = time.perf_counter()
        rc = cli.main(["crossval", "--config", str(CI_CONFIG), "--data", str(root / "data"),
                       "--out", str(root / f"run{i}")])
        runs.append({"rc": rc, "seconds": time.perf_counter() - t0, "dir": root / f"run{i}"})
    return runs


def test_criterion_7_synthetic_crossval(record_property, cv_runs):
    a, b = cv_runs
    assert a["rc"] == 0 and b["rc"] == 0
    blob_a = (a["dir"] / "metrics.json").read_bytes()
    blob_b = (b["dir"] / "metrics.json").read_bytes()
    report = json.loads(blob_a)
    acc = report["variants"]["CAET-SWin"]["accuracy"]
    slowest = max(a["seconds"], b["seconds"])
    verdict(record_property, 7, acc >= 80 and blob_a == blob_b and report["k"] == 10 and slowest < 900,
            f"CAET-SWin 10-fold accuracy {acc:.1f}% (>=80%), rerun metrics.json identical: {blob_a == blob_b}, "
            f"slowest run {slowest:.0f}s (<900s)")


def test_criterion_8_metrics(record_property):
    cases = [  # preds, labels, (acc, sens, spec) in percent
        ([1, 1, 0, 0, 1], [1, 0, 0, 1, 1], (60.0, 200 / 3, 50.0)),
        ([1, 0, 1, 0], [1, 0, 1, 0], (100.0, 100.0, 100.0)),
        ([0, 1, 0, 1], [1, 0, 1, 0], (0.0, 0.0, 0.0)),
        ([1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 0, 0], (500 / 6, 100.0, 200 / 3)),
        ([0, 0, 0, 1], [1, 1, 0, 0], (25.0, 0.0, 50.0)),
    ]
    worst = 0.0
    for preds, labels, expect in cases:
        r = compute_metrics(preds, labels)
        worst = max(worst, *(abs(g - e) for g, e in zip((r.accuracy, r.sensitivity, r.specificity), expect)))
    ci_ok = all(bootstrap_ci(acc, 10000, seed=s) == exhaustive_ci(acc)
                for acc in ([100.0, 0.0], [75.0, 50.0], [80.0, 90.0]) for s in (0, 1))
    verdict(record_property, 8, worst <= 1e-9 and ci_ok,
            f"{len(cases)} hand confusion cases, max err {worst:.1e} (<=1e-9); 2-fold CI equals enumeration: {ci_ok}")


def test_criterion_9_variants_share_schema(record_property, cv_runs):
    run = cv_runs[0]["dir"]
    report = json.loads((run / "metrics.json").read_text())
    variants = report["variants"]
    schemas = {name: sorted(v) for name, v in variants.items()}
    logs = [json.loads(l) for l in (run / "crossval.log").read_text().splitlines()]
    trained = {r.get("aggregation") for r in logs if r["phase"] == "caet"}
    swin_trained = any(r["phase"] == "swin" for r in logs)
    expected = {"CAET(GAP)", "CAET(Flatten)", "CAET(GMP)", "SWin", "CAET-SWin"}
    one_schema = len({tuple(s) for s in schemas.values()}) == 1
    verdict(record_property, 9, set(variants) == expected and one_schema and trained == {"GAP", "Flatten", "GMP"}
            and swin_trained,
            "variants " + ", ".join(f"{k} {variants[k]['accuracy']:.1f}%" for k in sorted(variants))
            + f"; one report schema: {one_schema}")


def test_criterion_10_containers(record_property, tmp_path):
    rng = np.random.default_rng(10)
    vol = Volume(rng.uniform(-1024, 3071, (3, 512, 512)).astype(np.float32))
    save_volume(tmp_path / "v.vol", vol)
    vol_ok = load_volume(tmp_path / "v.vol").data.tobytes() == vol.data.tobytes()
    model = CAETSWinModel(SCALED, rng)
    save_checkpoint(tmp_path / "m.ckpt", model.state_dict(), "caet-swin")
    _, tensors, _ = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = all(tensors[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    def variants(blob, magic):
        hlen = struct.unpack_from("<I", blob, 4)[0]
        header, payload = json.loads(blob[8:8 + hlen]), blob[8 + hlen:]

        def rebuild(h):
            raw = container.encode_header(h)
            return magic + struct.pack("<I", len(raw)) + raw + payload
        flipped = bytearray(blob)
        flipped[-1] ^= 0x55
        return {"bad-magic": b"ABCD" + blob[4:], "bad-version": rebuild(dict(header, format_version=99)),
                "bad-header": magic + struct.pack("<I", 3) + b"{x}" + payload,
                "truncated": blob[:-7], "checksum": bytes(flipped)}

    wrong = []
    for label, path, magic, reader in (("volume", tmp_path / "v.vol", VOLUME_MAGIC, load_volume),
                                       ("checkpoint", tmp_path / "m.ckpt", CHECKPOINT_MAGIC, load_checkpoint)):
        blob = path.read_bytes()
        cases = variants(blob, magic)
        hdr_len = struct.unpack_from("<I", blob, 4)[0]
        header = json.loads(blob[8:8 + hdr_len])
        if label == "volume":
            header["dims"] = [1 << 12] * 3
        else:
            first = sorted(header["tensors"])[0]
            header["tensors"][first]["shape"] = [1 << 40, 1 << 40]
        raw = container.encode_header(header)
        cases["dim-overflow"] = magic + struct.pack("<I", len(raw)) + raw + blob[8 + hdr_len:]
        for code, bad in cases.items():
            p = tmp_path / f"bad-{label}-{code}"
            p.write_bytes(bad)
            try:
                reader(p)
                wrong.append(f"{label}/{code}: accepted")
            except FormatError as exc:
                if exc.code != code:
                    wrong.append(f"{label}/{code}: got {exc.code}")
    verdict(record_property, 10, vol_ok and ckpt_ok and not wrong,
            f"volume roundtrip exact: {vol_ok}, checkpoint roundtrip exact: {ckpt_ok}, "
            f"12 corruptions mapped to their codes{': ' + '; '.join(wrong) if wrong else ''}")
