"""Acceptance lines, one per criterion, each driven through the shipped presets.

Every tolerance is pinned here.  Oracle values were computed independently
with mpmath and frozen.
"""

import json
import math

import numpy as np
import pytest

from ricprobe import HalfSpace, Sphere
from ricprobe.cli import run
from ricprobe.conformal import ConformalFactor, chart_ricci, conformal_flat_metric, transformed_curvature

pytestmark = pytest.mark.slow

# frozen oracles (mpmath, 30 digits, rounded to double)
EXP_M1 = 0.36787944117144233  # e^{-1}
LOCAL_TIME = 0.11283791670955126  # 2 sqrt(0.01 / pi)
TWO_OVER_SQRT_PI = 1.1283791670955126
COT_PI3 = 0.5773502691896258
# (2/3 + e^{-6T}/3 - e^{-4T}) / (2T) at T = 0.08 * 2^-j, j = 0..5
GRADIENT_CLOSED_FORM = [0.917367251218892, 0.959152059032997, 0.979761646310418,
                        0.989936935454651, 0.994983787608076, 0.997495890370567]

# pinned tolerances
HEAT_CI_MAX = 0.003
HEAT_CI_MULT = 2.0
LOCAL_TIME_REL = 0.05
RIC_S2_TOL = 0.10
RIC_S3_TOL = 0.15
RIC_OU_TOL = 0.10
VAR_FORM_CI_MULT = 3.0
PER_T_CI_MULT = 1.0
II_HEMI_TOL = 0.10
II_CAP_TOL = 0.09
MU_REL = 0.10
QB_PATHS = 10000
QB_ANNIHILATION = 1e-6
CHART_ORACLE_TOL = 1e-3


def _cli(tmp_path, cmd, preset, *extra):
    out = tmp_path / preset
    code = run([cmd, "--config", f"preset:{preset}", "--out", str(out), *extra])
    return code, out


def _load(out, name):
    return json.loads((out / name).read_text())


def test_01_heat_semigroup_oracle(tmp_path, criterion):
    code, out = _cli(tmp_path, "simulate", "heat-oracle")
    e = _load(out, "simulate.json")["terminal_coordinates"]
    v, c = e["value"][2], e["ci"][2]
    ok = code == 0 and abs(v - EXP_M1) <= HEAT_CI_MULT * c and c <= HEAT_CI_MAX
    assert criterion("1 heat oracle", ok,
                     f"P_T z = {v:.5f} +- {c:.2g} vs e^-1 = {EXP_M1:.5f} (tol {HEAT_CI_MULT} CI, CI <= {HEAT_CI_MAX})")


def test_02_local_time(tmp_path, criterion):
    code, out = _cli(tmp_path, "local-time", "local-time")
    d = _load(out, "local_time.json")
    v = d["estimate"]["value"]
    rel = abs(v - LOCAL_TIME) / LOCAL_TIME
    ok = code == 0 and d["n_paths"] == 200000 and d["n_steps"] == 4000 and rel <= LOCAL_TIME_REL
    assert criterion("2 local time", ok, f"E l_T = {v:.5f} vs {LOCAL_TIME:.5f}, rel {rel:.2%} (tol {LOCAL_TIME_REL:.0%})")


def test_03_ricci_on_spheres(tmp_path, criterion):
    _, out = _cli(tmp_path, "curvature", "sphere-ricci")
    d = _load(out, "ricci.json")
    g, v = d["fits"]["gradient"], d["fits"]["variance"]
    ok_g = abs(d["value"] - 1.0) <= RIC_S2_TOL
    cc = math.hypot(g["intercept_ci"], v["intercept_ci"])
    ok_v = abs(g["intercept"] - v["intercept"]) <= VAR_FORM_CI_MULT * cc
    per_T = d["per_T"]["gradient"]
    devs = [abs(e["value"] - ref) / e["ci"] for e, ref in zip(per_T, GRADIENT_CLOSED_FORM)]
    ok_t = max(devs) <= PER_T_CI_MULT
    _, out3 = _cli(tmp_path, "curvature", "sphere3-ricci")
    d3 = _load(out3, "ricci.json")
    ok3 = abs(d3["value"] - 2.0) <= RIC_S3_TOL
    ok = ok_g and ok_v and ok_t and ok3
    assert criterion("3 Ricci extraction", ok,
                     f"S^2 {d['value']:.4f} +- {d['ci']:.2g} (tol {RIC_S2_TOL}); variance form {v['intercept']:.3f}"
                     f" +- {v['intercept_ci']:.2g} within {VAR_FORM_CI_MULT} cc: {ok_v}; per-T max |dev|/CI"
                     f" {max(devs):.2f} (tol {PER_T_CI_MULT}); S^3 {d3['value']:.4f} (tol {RIC_S3_TOL})")


def test_04_bakry_emery_drift(tmp_path, criterion):
    _, out = _cli(tmp_path, "curvature", "halfspace-ou")
    d = _load(out, "ricci.json")
    ok = abs(d["value"] - 1.0) <= RIC_OU_TOL
    assert criterion("4 Bakry-Emery drift", ok, f"Ric_Z = {d['value']:.4f} +- {d['ci']:.2g} vs 1 (tol {RIC_OU_TOL})")


def test_05_second_fundamental_form(tmp_path, criterion):
    _, out = _cli(tmp_path, "second-form", "hemisphere")
    h = _load(out, "second_form.json")
    _, out = _cli(tmp_path, "second-form", "cap-pi3")
    c = _load(out, "second_form.json")
    ok = abs(h["value"]) <= II_HEMI_TOL and abs(c["value"] - COT_PI3) <= II_CAP_TOL
    q = c["fits"]["gradient_quadratic"]
    assert criterion("5 second fundamental form", ok,
                     f"hemisphere {h['value']:.4f} (tol {II_HEMI_TOL}); cap {c['value']:.4f} +- {c['ci']:.2g} vs"
                     f" cot(pi/3) = {COT_PI3:.4f} (tol {II_CAP_TOL}); quadratic-fit diagnostic"
                     f" {q['intercept']:.4f} +- {q['intercept_ci']:.2g}")


def test_06_mu_asymptotics(tmp_path, criterion):
    _, out = _cli(tmp_path, "check", "mu-interior")
    i = _load(out, "check_00-mu-interior.json")
    _, out = _cli(tmp_path, "check", "mu-boundary")
    b = _load(out, "check_00-mu-boundary.json")
    assert abs(b["target"] - TWO_OVER_SQRT_PI) < 1e-12
    ok = i["relative_error"] <= MU_REL and b["relative_error"] <= MU_REL
    assert criterion("6 mu asymptotics", ok,
                     f"interior {i['fit']['intercept']:.4f} vs K(x) = {i['target']:.4f}; boundary"
                     f" {b['fit']['intercept']:.4f} vs 2/sqrt(pi) = {TWO_OVER_SQRT_PI:.4f} (tol {MU_REL:.0%})")


@pytest.mark.parametrize("kind", ["sphere", "cap", "halfspace", "disk"])
def test_07_bismut_vs_fd(tmp_path, criterion, kind):
    code, out = _cli(tmp_path, "check", f"bismut-fd-{kind}")
    d = _load(out, "check_00-bismut-fd.json")
    m = _load(out, "manifest.json")
    T = m["config"]["run"]["T"]
    diff, tol = np.asarray(d["difference"]), np.asarray(d["tolerance"])
    ok = code == 0 and T == 0.5 and d["verdict"] == "PASS" and bool(np.all(diff <= tol))
    assert criterion(f"7 Bismut vs FD ({kind})", ok,
                     f"T = {T}, max |diff| {diff.max():.3g}, tolerance max(2 cc, 5%) min {tol.min():.3g}")


@pytest.mark.parametrize("kind", ["sphere", "cap", "halfspace", "disk"])
def test_08_q_bound(tmp_path, criterion, kind):
    code, out = _cli(tmp_path, "check", f"qbound-{kind}")
    d = _load(out, "check_00-q-bound.json")
    m = _load(out, "manifest.json")
    ok = (code == 0 and m["config"]["run"]["n_paths"] == QB_PATHS and d["fraction_passed"] == 1.0
          and d["annihilation"] <= QB_ANNIHILATION)
    assert criterion(f"8 Q bound ({kind})", ok,
                     f"{d['fraction_passed']:.0%} of {d['n_paths']} kept paths, {d['discards']} discarded;"
                     f" annihilation {d['annihilation']:.2g} (tol {QB_ANNIHILATION}) at {d['boundary_hits']} hits")


@pytest.mark.parametrize("preset", ["suite-sphere", "suite-cap"])
def test_09_inequality_suite(tmp_path, criterion, preset):
    code, out = _cli(tmp_path, "check", preset)
    v = _load(out, "manifest.json")["verdicts"]
    expected = {"grad1", "grad2", "pathspace-two-slot", "log-sobolev", "poincare"}
    ok = code == 0 and set(v) == expected and all(e["verdict"] == "PASS" for e in v.values())
    detail = ", ".join(f"{k} {e['verdict']}" for k, e in v.items())
    assert criterion(f"9 inequality suite ({preset})", ok, detail)


def test_09_negative_controls(tmp_path, criterion):
    code1, out1 = _cli(tmp_path, "check", "negative-controls")
    v1 = _load(out1, "manifest.json")["verdicts"]
    code2, out2 = _cli(tmp_path, "check", "negative-controls-sphere")
    v2 = _load(out2, "manifest.json")["verdicts"]
    p = _load(out2, "check_poincare-K0.json")
    g = _load(out1, "check_grad1-K0.json")
    ok = (code1 == 0 and code2 == 0 and v1["grad1-true"]["verdict"] == "PASS"
          and v1["grad1-K0"]["verdict"] == "FAIL" and v2["poincare-K0"]["verdict"] == "FAIL")
    assert criterion("9 negative controls", ok,
                     f"(2)-first K=0: {v1['grad1-K0']['verdict']} margin {g['margin']:+.4g} +- {g['margin_ci']:.2g};"
                     f" (5) K=0: {v2['poincare-K0']['verdict']} margin {p['margin']:+.4g} +- {p['margin_ci']:.2g};"
                     f" true-K control {v1['grad1-true']['verdict']}")


def test_10_martingale_isometry(tmp_path, criterion):
    code, out = _cli(tmp_path, "check", "isometry")
    parts, ok = [], code == 0
    for eps in ("0.01", "0.02"):
        d = _load(out, f"check_eps-{eps}.json")
        ok = ok and d["verdict"] == "PASS"
        parts.append(f"eps {eps}: {d['lhs']['value']:.5f} vs {d['rhs']['value']:.5f}")
    assert criterion("10 martingale isometry", ok, "; ".join(parts) + " (tol combined CI)")


def test_11_conformal_locality(tmp_path, criterion):
    code, out = _cli(tmp_path, "conformal", "conformal-sphere")
    d = _load(out, "conformal.json")
    ok_loc = code == 0 and d["agree"] and abs(d["difference"]) <= 2 * d["combined_ci"]
    # phi = 1: the formula leaves every tensor unchanged exactly
    S = Sphere(2)
    x = np.array([1.0, 0.0, 0.0])
    one = ConformalFactor(lambda y: np.ones(np.shape(y)[:-1]))
    ok_one = bool(np.array_equal(transformed_curvature(S, one, x).ric_phi_frame, np.eye(2)))
    # flat base with a Gaussian dip: each variant against the chart-FD oracle
    H = HalfSpace(2)
    phi = ConformalFactor.bump([0.0, 6.0], 0.3, 1.0)
    u = np.array([0.5, 6.4])
    metric = conformal_flat_metric(phi, 2)
    oracle = float(phi(u)) ** 2 * chart_ricci(metric, u)[0, 0]
    errs = {v: abs(transformed_curvature(H, phi, u, v).ric_phi_frame[0, 0] - oracle)
            for v in ("classical", "printed", "squared")}
    ok_fd = errs["classical"] <= CHART_ORACLE_TOL
    best = min(errs, key=errs.get)
    ok = ok_loc and ok_one and ok_fd and best == "classical"
    assert criterion("11 conformal locality", ok,
                     f"S^2 base {d['base']['value']:.4f} conformal {d['conformal']['value']:.4f} diff"
                     f" {d['difference']:+.2g} (2 cc = {2 * d['combined_ci']:.2g}); phi = 1 exact: {ok_one};"
                     f" chart oracle {oracle:.5f}, errors " + ", ".join(f"{k} {e:.2g}" for k, e in errs.items())
                     + f" (tol {CHART_ORACLE_TOL}); adjudicated: {best}")


def test_12_determinism(tmp_path, criterion):
    files = []
    for tag, extra in (("a", ["--workers", "1"]), ("b", ["--workers", "1"]), ("c", ["--workers", "8"])):
        out = tmp_path / tag
        for cmd, preset in (("curvature", "sphere-ricci"), ("check", "qbound-cap")):
            assert run([cmd, "--config", f"preset:{preset}", "--out", str(out / preset), *extra]) == 0
        files.append({p.relative_to(out): p.read_bytes() for p in out.rglob("*")
                      if p.is_file() and p.name != "manifest.json"})
    same_seed = files[0] == files[1]
    workers = files[0] == files[2]
    ok = same_seed and len(files[0]) >= 4 and workers
    assert criterion("12 determinism", ok,
                     f"{len(files[0])} report files byte-identical on re-run: {same_seed}; workers 1 vs 8: {workers}")
