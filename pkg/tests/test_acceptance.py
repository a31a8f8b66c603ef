"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``verdict`` fixture; the lines
are printed together in the terminal summary.
"""
import math
import time

import mpmath as mp
import numpy as np
import pytest

from mlpsrgan import data_io as D
from mlpsrgan import evalstats as E
from mlpsrgan import losses as L
from mlpsrgan import metrics as M
from mlpsrgan import nn
from mlpsrgan import synthetic as S
from mlpsrgan import tensor as T
from mlpsrgan import trainer as TR
from mlpsrgan.cli import main
from mlpsrgan.errors import ParseError
from mlpsrgan.gradcheck import check_gradients
from mlpsrgan.resample import bicubic_upscale, degrade
from mlpsrgan.tensor import Tensor

LN2x2 = 2.0 * math.log(2.0)


def _proj(fn, shape, rng):
    r = Tensor(rng.normal(size=shape))
    return lambda: (fn() * r).sum()


# -- 1 ------------------------------------------------------------------------

def _gradient_cases(rng):
    """Yield (name, loss closure, leaves, max_probes, tolerance)."""
    a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)))
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))
    s = Tensor(rng.normal(size=(2, 3, 4)))
    elementwise = {
        "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b,
        "pow": lambda: a ** 3.0, "abs": lambda: T.absolute(s), "log": lambda: T.log(a),
        "exp": lambda: T.exp(s), "sqrt": lambda: T.sqrt(a), "leaky_relu": lambda: T.leaky_relu(s),
        "gelu": lambda: T.gelu(s), "sigmoid": lambda: T.sigmoid(3.0 * s),
        "clip": lambda: T.clip(s, -0.5, 0.5),
    }
    for name, fn in elementwise.items():
        yield name, _proj(fn, (2, 3, 4), rng), {"a": a, "b": b, "s": s}, None, 1e-4
    yield "sum", _proj(lambda: s.sum(axis=(0, 2)), (3,), rng), {"s": s}, None, 1e-4
    yield "mean", _proj(lambda: s.mean(axis=1, keepdims=True), (2, 1, 4), rng), {"s": s}, None, 1e-4
    yield "transpose", _proj(lambda: T.transpose(s, (2, 0, 1)), (4, 2, 3), rng), {"s": s}, None, 1e-4
    yield "reshape", _proj(lambda: s.reshape(6, 4), (6, 4), rng), {"s": s}, None, 1e-4
    yield "upsample", _proj(lambda: T.upsample_nearest2x(s), (2, 6, 8), rng), {"s": s}, None, 1e-4
    yield "concat", _proj(lambda: T.concat([a, s], axis=1), (2, 6, 4), rng), {"a": a, "s": s}, None, 1e-4

    m1 = Tensor(rng.normal(size=(2, 3, 4)))
    m2 = Tensor(rng.normal(size=(4, 5)))
    yield "matmul", _proj(lambda: T.matmul(m1, m2), (2, 3, 5), rng), {"a": m1, "b": m2}, None, 1e-4

    x = Tensor(rng.normal(size=(2, 2, 8, 6)))
    k = Tensor(rng.normal(size=(3, 2, 5, 5)))
    kb = Tensor(rng.normal(size=3))
    yield ("conv2d", _proj(lambda: T.conv2d(x, k, (2, 1), (2, 2), kb), (2, 3, 4, 6), rng),
           {"x": x, "k": k, "b": kb}, None, 1e-4)

    ln_x = Tensor(rng.normal(size=(3, 5)))
    ln_g = Tensor(rng.normal(size=5))
    ln_b = Tensor(rng.normal(size=5))
    yield ("layer_norm", _proj(lambda: T.layer_norm(ln_x, ln_g, ln_b), (3, 5), rng),
           {"x": ln_x, "g": ln_g, "b": ln_b}, None, 1e-4)

    mcfg = nn.MixerConfig(4, 4)
    mp_ = nn.init_mixer(rng, "m", 2, 8, 8, mcfg)
    mx = Tensor(rng.normal(size=(2, 8, 8)))
    leaves = {"x": mx, **{k_: v for k_, v in mp_.items() if k_.endswith((".w", ".g"))}}
    yield ("mixer", _proj(lambda: nn.mlp_mixer_block(mx, mp_, mcfg, "m"), (2, 8, 8), rng),
           leaves, 12, 1e-4)

    rp = nn.init_rmrdb(rng, "r", 2, 8, 8, mcfg)
    rx = Tensor(rng.normal(size=(2, 8, 8)))
    yield ("rmrdb", _proj(lambda: nn.rmrdb(rx, rp, mcfg, "r"), (2, 8, 8), rng),
           {"x": rx, "w0": rp["r.mixer.0.proj_in.w"], "w2": rp["r.mixer.2.channel_fc2.w"]}, 16, 1e-4)

    dp = {}
    nn._add_conv(dp, "d", rng, 1, 2, 5, np.float64)
    dx = Tensor(rng.normal(size=(1, 8, 4)))
    yield ("selective_downsample", _proj(lambda: nn.selective_downsample(dx, dp, "d"), (2, 4, 4), rng),
           {"x": dx, "w": dp["d.w"], "b": dp["d.b"]}, None, 1e-4)

    gcfg = nn.GeneratorConfig(input_h=8, input_w=4, base_channels=2, mixer=mcfg)
    gp = nn.init_generator(gcfg, rng)
    gx = Tensor(rng.random((1, 8, 4)))
    yield ("generator", _proj(lambda: nn.generator_forward(gx, gp, gcfg), (1, 8, 16), rng),
           {"x": gx, "stem": gp["stem.w"], "tok": gp["trunk.0.mixer.1.token_fc1.w"],
            "down": gp["down.1.w"], "out": gp["out_conv.w"]}, 10, 1e-4)

    dcfg = nn.DiscriminatorConfig(base_channels=2)
    dpar = nn.init_discriminator(dcfg, rng)
    ddx = Tensor(rng.random((2, 1, 16, 16)))
    d_leaves = {"x": ddx, "w0": dpar["body.0.w"], "w5": dpar["body.5.w"], "g3": dpar["body.3.bn.g"],
                "head": dpar["head.w"]}
    for training in (False, True):
        f = (lambda t: lambda: nn.discriminator_forward(ddx, dpar, dcfg, training=t)[1].sum())(training)
        yield f"discriminator(training={training})", f, d_leaves, 16, 1e-4

    cg = nn.GeneratorConfig(input_h=16, input_w=4, base_channels=2, mixer=mcfg)
    cgp = nn.init_generator(cg, rng)
    cdp = nn.init_discriminator(dcfg, rng)
    clr = Tensor(rng.random((2, 1, 16, 4)))
    chr_ = Tensor(rng.random((2, 1, 16, 16)))
    fe = L.RandomConvExtractor(seed=1)

    def composite():
        sr = nn.generator_forward(clr, cgp, cg)
        _, c_sr = nn.discriminator_forward(sr, cdp, dcfg, training=True)
        _, c_hr = nn.discriminator_forward(chr_, cdp, dcfg, training=True)
        return L.generator_total_loss(sr, chr_, c_hr, c_sr, fe)[0]

    yield ("composite_loss", composite,
           {"stem": cgp["stem.w"], "mix": cgp["trunk.0.mixer.0.channel_fc1.w"],
            "down": cgp["down.0.w"], "d0": cdp["body.0.w"]}, 8, 1e-3)


def test_criterion_1_gradient_correctness(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for name, f, leaves, probes, tol in _gradient_cases(rng):
        assert all(v.data.dtype == np.float64 for v in leaves.values())
        err = max(check_gradients(f, leaves, max_probes=probes).values())
        worst = max(worst, err)
        if not err < tol:
            failures.append(f"{name}={err:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120.0
    verdict(1, ok, f"worst rel err {worst:.2e}, {elapsed:.1f}s" + (f", failed {failures}" if failures else ""))
    assert not failures, failures
    assert elapsed < 120.0


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_shape_contract(verdict):
    rng = np.random.default_rng(0)
    big = nn.full_size_generator_config(1, base_channels=2)
    out_big = nn.generator_forward(Tensor(rng.random((1, 256, 64))), nn.init_generator(big, rng), big).shape
    small = nn.desk_generator_config(1, base_channels=4)
    out_small = nn.generator_forward(Tensor(rng.random((1, 64, 16))), nn.init_generator(small, rng),
                                     small).shape
    p = {}
    nn._add_conv(p, "d", rng, 3, 3, 5, np.float64)
    down = [nn.selective_downsample(Tensor(np.zeros((3, h, w))), p, "d").shape
            for h, w in ((16, 16), (64, 16), (1024, 256), (6, 5))]
    ok = (out_big == (1, 256, 256) and out_small == (1, 64, 64)
          and down == [(3, 8, 16), (3, 32, 16), (3, 512, 256), (3, 3, 5)])
    verdict(2, ok, f"{out_big}, {out_small}, downsample {down}")
    assert out_big == (1, 256, 256)
    assert out_small == (1, 64, 64)
    assert down == [(3, 8, 16), (3, 32, 16), (3, 512, 256), (3, 3, 5)]


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_parameter_scaling(verdict):
    counts = [nn.count_params(nn.init_generator(nn.desk_generator_config(n, base_channels=8),
                                                np.random.default_rng(n)))
              for n in (1, 3, 5)]
    ok = counts[1] - counts[0] == counts[2] - counts[1] > 0
    verdict(3, ok, f"counts {counts}, increment {counts[1] - counts[0]}")
    assert ok


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_loss_fixed_points(verdict):
    rng = np.random.default_rng(4)
    logits = Tensor(np.full(4, 0.37))
    g = float(L.adversarial_g_loss(logits, logits).data)
    d = float(L.adversarial_d_loss(logits, logits).data)
    hr = Tensor(rng.random((2, 1, 16, 16)))
    # equal constant logits for both sets; varying logits move the relativistic
    # terms away from the fixed point
    sym = Tensor(np.full(2, -0.8))
    total, _ = L.generator_total_loss(hr, hr, sym, sym, L.RandomConvExtractor())
    total = float(total.data)
    errs = (abs(g - LN2x2), abs(d - LN2x2), abs(total - 0.005 * LN2x2))
    ok = max(errs) <= 1e-9
    verdict(4, ok, f"g {g:.12f}, d {d:.12f}, total {total:.12f}")
    assert max(errs) <= 1e-9


# -- 5 ------------------------------------------------------------------------

def _haar_bruteforce(img):
    s = math.sqrt(2.0) / 2.0
    h, w = img.shape
    lo = np.array([[s * img[i, 2 * j] + s * img[i, 2 * j + 1] for j in range(w // 2)] for i in range(h)])
    hi = np.array([[s * img[i, 2 * j] - s * img[i, 2 * j + 1] for j in range(w // 2)] for i in range(h)])

    def cols(x, sign):
        return np.array([[s * x[2 * i, j] + sign * s * x[2 * i + 1, j] for j in range(w // 2)]
                         for i in range(h // 2)])
    return cols(lo, 1), (cols(lo, -1), cols(hi, 1), cols(hi, -1))


def test_criterion_5_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    ref = rng.integers(0, 200, size=(32, 32)).astype(float)
    psnr = M.psnr(ref + 16, ref, max_val=255)
    entropy = M.shannon_entropy(((np.arange(256) + 0.5) / 256).reshape(16, 16))
    sharp = M.sharpness(np.full((32, 32), 0.6))
    wl = M.wavelet_low(np.full((64, 64), 0.5), mode="periodization")

    haar_exact = True
    for size in (2, 8, 32):
        img = rng.integers(0, 256, size=(size, size)).astype(float)
        ll, det = M.dwt2(img, 1, mode="periodization")
        o_ll, o_det = _haar_bruteforce(img)
        haar_exact &= np.array_equal(ll, o_ll) and all(np.array_equal(x, y) for x, y in zip(det, o_det))

    energy_err = 0.0
    for order in (1, 2, 3, 4):
        img = rng.normal(size=(16, 16))
        a, det = M.dwt2(img, order, mode="periodization")
        e = np.sum(a ** 2) + sum(np.sum(b ** 2) for b in det)
        energy_err = max(energy_err, abs(e - np.sum(img ** 2)))

    checks = {"psnr": abs(psnr - 24.05) <= 0.01, "entropy": entropy == 8.0, "sharpness": sharp == 0.0,
              "wavelet_low": abs(wl - 1.25) <= 1e-9, "haar": haar_exact, "energy": energy_err <= 1e-9}
    verdict(5, all(checks.values()),
            f"psnr {psnr:.4f}, entropy {entropy}, sharpness {sharp}, wavelet_low {wl!r}, "
            f"haar exact {haar_exact}, energy err {energy_err:.1e}")
    assert all(checks.values()), checks


# -- 6 ------------------------------------------------------------------------

def _t_cdf_mp(t, nu):
    with mp.workdps(40):
        t, nu = mp.mpf(t), mp.mpf(nu)
        c = mp.gamma((nu + 1) / 2) / (mp.sqrt(nu * mp.pi) * mp.gamma(nu / 2))
        half = mp.quad(lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2), [0, abs(t)])
        return float(0.5 + half if t >= 0 else 0.5 - half)


def test_criterion_6_statistical_harness(verdict):
    same = [0.81, 0.77, 0.9, 0.64, 0.85]
    p_same = E.paired_t_test_log(same, same).p
    grid = [-12.0, -4.0, -2.1, -0.7, 0.0, 0.3, 1.5, 2.8, 6.0, 12.0]
    cdf_err = {df: max(abs(E.t_cdf(t, df) - _t_cdf_mp(t, df)) for t in grid) for df in (1, 5, 30)}
    ok = p_same == 1.0 and max(cdf_err.values()) < 1e-8
    verdict(6, ok, f"p(identical) {p_same}, max cdf err {max(cdf_err.values()):.1e}")
    assert p_same == 1.0
    assert max(cdf_err.values()) < 1e-8, cdf_err


# -- 7 ------------------------------------------------------------------------

def _content_on(state, lr_all, hr_all):
    gcfg = state.config.generator_config()
    dt = state.config.np_dtype
    with T.no_grad():
        sr = nn.generator_forward(Tensor(lr_all.astype(dt)), state.g, gcfg)
        return float(L.content_loss(sr, Tensor(hr_all.astype(dt))).data)


@pytest.mark.slow
def test_criterion_7_desk_training_run(verdict):
    t0 = time.perf_counter()
    hr = S.phantom_slices(40, seed=7, h=64, w=64)
    train_hr, held_hr = hr[:32], hr[32:]
    ds = D.SliceDataset([D.SlicePair(f"s{i}", "phantom", 0, degrade(h), h) for i, h in enumerate(train_hr)])
    cfg = TR.TrainConfig(base_channels=8, disc_channels=8, dtype="float32", batch_size=8, lr=2e-4,
                         warmup_iters=500, iters=200, seed=0)
    state = TR.init_state(cfg)
    lr_all, hr_all = ds.arrays()
    before = _content_on(state, lr_all, hr_all)
    TR.warmup_phase(state, ds)
    after = _content_on(state, lr_all, hr_all)

    nan_free = True
    try:
        state, history = TR.train(ds, cfg, resume=state)
        nan_free = all(math.isfinite(float(r[k])) for r in history.rows
                       for k in ("content", "perceptual", "adversarial_g", "adversarial_d"))
    except FloatingPointError:
        nan_free = False
    adversarial_done = state.iteration == 700

    held_lr = np.stack([degrade(h) for h in held_hr])
    sr = TR.upscale_slices(held_lr, state.g, cfg)
    psnr_gan = float(np.mean([M.psnr(s, h) for s, h in zip(sr, held_hr)]))
    psnr_bic = float(np.mean([M.psnr(bicubic_upscale(lo), h) for lo, h in zip(held_lr, held_hr)]))
    elapsed = time.perf_counter() - t0

    checks = {"content halved": after < 0.5 * before, "no NaN": nan_free and adversarial_done,
              "psnr": psnr_gan >= psnr_bic - 3.0, "runtime": elapsed < 900.0}
    verdict(7, all(checks.values()),
            f"content {before:.4f} -> {after:.4f}, held-out PSNR {psnr_gan:.2f} vs bicubic "
            f"{psnr_bic:.2f} dB, {elapsed:.0f}s")
    assert all(checks.values()), checks


# -- 8 ------------------------------------------------------------------------

def _pipeline(root, monkeypatch):
    (root / "vols").mkdir(parents=True)
    for i in range(2):
        D.save_nifti(root / "vols" / f"v{i}.nii", S.phantom_volume((5, 64, 64), seed=10 + i))
    monkeypatch.chdir(root)
    sets = ["--set", "dtype=float64", "--set", "base_channels=4", "--set", "disc_channels=2",
            "--set", "batch_size=2"]
    steps = [
        ["degrade", "--in", "vols", "--out", "deg"],
        ["train", "--manifest", "deg/manifest.jsonl", "--out", "run", "--warmup", "0", "--iters", "50",
         "--seed", "3", *sets],
        ["upscale", "--ckpt", "run/final.ckpt", "--manifest", "deg/manifest.jsonl", "--out", "sr"],
        ["metrics", "--gen", "sr", "--ref", "deg/hr", "--out", "metrics.csv"],
    ]
    codes = [main(argv) for argv in steps]
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_8_determinism(tmp_path, monkeypatch, verdict):
    codes_a, a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, b = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    rows = a.get("metrics.csv", b"").decode().count("\n") - 1
    ok = codes_a == codes_b == [0, 0, 0, 0] and not differing and rows > 0
    verdict(8, ok, f"{len(a)} files compared, {rows} metric rows, differing {differing}")
    assert codes_a == codes_b == [0, 0, 0, 0]
    assert "run/final.ckpt" in a and rows > 0
    assert not differing


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_format_robustness(verdict):
    rng = np.random.default_rng(9)
    vol = rng.normal(size=(5, 4, 3)).astype(np.float32)
    same_volume = True
    for datatype, cast in ((16, np.float32), (64, np.float64), (4, np.int16)):
        data = (vol * 100).astype(cast) if datatype == 4 else vol.astype(cast)
        native = D.decode_nifti1(D.encode_nifti1(data, (1.0, 1.0, 3.0), datatype=datatype, endian="<"))
        swapped = D.decode_nifti1(D.encode_nifti1(data, (1.0, 1.0, 3.0), datatype=datatype, endian=">"))
        same_volume &= np.array_equal(native[1], swapped[1]) and np.array_equal(native[1], data)
        same_volume &= tuple(native[0].pixdim) == tuple(swapped[0].pixdim)

    rt_exact = True
    for dtype in (np.float32, np.float64):
        arr = rng.normal(size=(3, 1, 4, 5)).astype(dtype)
        back, used = D.decode_rt(D.encode_rt(arr))
        rt_exact &= back.dtype == arr.dtype and back.tobytes() == arr.tobytes() and used > 0

    def kind(fn, buf):
        try:
            fn(buf)
        except ParseError as e:
            return e.kind
        return None

    good_nii = D.encode_nifti1(vol, (1.0, 1.0, 1.0))
    good_rt = D.encode_rt(vol)
    kinds = {
        "nifti truncated header": kind(D.decode_nifti1, good_nii[:200]),
        "nifti truncated payload": kind(D.decode_nifti1, good_nii[:-7]),
        "nifti bad magic": kind(D.decode_nifti1, good_nii[:344] + b"abc\0" + good_nii[348:]),
        "rt truncated": kind(D.decode_rt, good_rt[:-1]),
        "rt bad magic": kind(D.decode_rt, b"QQ01" + good_rt[4:]),
    }
    expected = {k: ("truncated" if "truncated" in k else "bad magic") for k in kinds}
    ok = same_volume and rt_exact and kinds == expected
    verdict(9, ok, f"native==swapped {same_volume}, rt bit-exact {rt_exact}, errors {kinds}")
    assert same_volume and rt_exact
    assert kinds == expected
