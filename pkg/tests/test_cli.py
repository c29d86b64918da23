import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ma_plate.cli import (
    EXIT_INVALID,
    EXIT_NONCONVERGED,
    EXIT_OK,
    ParseError,
    compile_f,
    eval_scalar,
    parse_f,
    parse_grid,
    read_field_csv,
    read_profile_csv,
    resolve_growth,
    run,
    write_field_csv,
)
from ma_plate.discretization import ConfigurationError, DomainError, ScalarField, make_grid
from ma_plate.radial import RadialProfile, radial_energy


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def test_parse_f_examples():
    g = make_grid("unit_disk", 17)
    one = parse_f("1", g)
    assert isinstance(one, ScalarField) and np.all(one.vec == 1)
    prof = parse_f("2-r")
    assert isinstance(prof, RadialProfile)
    assert np.allclose(prof.values, 2 - prof.r_nodes)
    step = parse_f("eps_step:0.001")
    assert step.values[0] == 1e-3 and step.values[-1] == 1.0
    assert step.breakpoints == (0.5,)


def test_parse_f_kinds():
    assert compile_f("const:2.5")(0.3, 0.1) == 2.5
    assert compile_f("expr:x1^2 + x2")(2.0, 1.0) == 5.0
    assert compile_f("preset:decreasing").radial
    assert not compile_f("holomorphic").radial
    assert compile_f("exp(2*x1)*sin(x2) + log(3) - sqrt(abs(-4)) + pi/e")(0.0, 0.0) == pytest.approx(
        np.log(3) - 2 + np.pi / np.e)
    with pytest.raises(ConfigurationError):
        parse_f("x1 + r")


@pytest.mark.parametrize(
    "text, pos",
    [("1 +* 2", None), ("2**r", 1), ("foo(r)", 0), ("r + y", 4), ("", 0), ("exp(r, r)", 0), ("[1]", 0)],
)
def test_parse_errors_carry_position(text, pos):
    with pytest.raises(ParseError) as err:
        compile_f("expr:" + text)
    if pos is not None:
        assert err.value.pos == pos


def test_unknown_presets():
    with pytest.raises(ConfigurationError):
        compile_f("preset:banana")
    with pytest.raises(ConfigurationError):
        compile_f("spline:1")
    with pytest.raises(ConfigurationError):
        compile_f("eps_step:-1")
    with pytest.raises(ConfigurationError):
        resolve_growth("preset:banana")


def test_domain_errors():
    with pytest.raises(DomainError):
        compile_f("log(x1)")(np.array([-1.0]), np.array([0.0]))
    with pytest.raises(DomainError):
        compile_f("log(r - 0.5)").of_r(np.array([0.2]))
    # a singularity exactly at the origin is data, not an error
    assert np.isinf(compile_f("1/r").of_r(np.array([0.0]))[0])


def test_grid_and_scalars():
    assert parse_grid("disk:129") == ("unit_disk", 129)
    assert parse_grid("square:33") == ("unit_square", 33)
    with pytest.raises(ConfigurationError):
        parse_grid("disk129")
    assert eval_scalar("2^-3") == 0.125
    with pytest.raises(ConfigurationError):
        eval_scalar("r")


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(0.1, 5))
def test_expression_matches_python(a, b, c):
    fx = compile_f(f"expr:{a!r}*x1 - {b!r}*x2^2 + {c!r}/(1+r)")
    x1, x2 = np.array([0.3, -0.2]), np.array([0.1, 0.7])
    ref = a * x1 - b * x2 ** 2 + c / (1 + np.hypot(x1, x2))
    assert np.array_equal(fx(x1, x2), ref)


def test_field_csv_roundtrip(tmp_path):
    g = make_grid("unit_disk", 33)
    v = g.sample(lambda x, y: np.exp(x) * np.sin(3 * y) / 7)
    write_field_csv(tmp_path / "v.csv", v)
    w = read_field_csv(tmp_path / "v.csv")
    assert w.grid.n == 33 and np.array_equal(w.vec, v.vec)


def test_radial_command(tmp_path):
    assert run(["radial", "--f", "expr:2-r", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path)
    assert s["admissible"] is True and s["admissibility"] == "admissible"
    assert s["energy"] == pytest.approx(float(radial_energy(RadialProfile.from_function(lambda r: 2 - r))))
    lam = read_profile_csv(tmp_path / "lambda_profile.csv")
    assert lam.kind == "multiplier_lambda" and lam.m == 2001
    f = read_profile_csv(tmp_path / "f_profile.csv")
    assert np.allclose(f.values, 2 - f.r_nodes, rtol=0, atol=1e-15)


def test_radial_paraboloid(tmp_path):
    assert run(["radial", "--f", "const:1", "--m", "501", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path)
    assert s["energy"] == pytest.approx(2 * np.pi, abs=1e-6)
    assert s["lambda_at_0"] == pytest.approx(-2, abs=1e-9)


def test_radial_divergent_is_reported(tmp_path):
    assert run(["radial", "--f", "expr:r^-2.5", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path)
    assert s["admissible"] is False and s["admissibility"].startswith("fails(")


def test_check_compat(tmp_path):
    assert run(["check-compat", "--growth", "preset:incompatible-B", "--out", str(tmp_path)]) == EXIT_OK
    assert _summary(tmp_path)["verdict"] == "violated(first)"
    assert run(["check-compat", "--growth", "preset:compatible", "--out", str(tmp_path)]) == EXIT_OK
    assert _summary(tmp_path)["verdict"] == "compatible"
    assert run(["check-compat", "--growth", "preset:incompatible-S", "--out", str(tmp_path)]) == EXIT_OK
    assert _summary(tmp_path)["verdict"] == "violated(second)"


def test_solve_small(tmp_path):
    out = tmp_path / "a"
    assert run(["solve", "--f", "const:1", "--grid", "disk:33", "--out", str(out)]) == EXIT_OK
    s = _summary(out)
    assert s["converged"] is True
    assert s["gradient_check_rel_err"] < 1e-5
    assert s["radial_energy"] == pytest.approx(2 * np.pi, abs=1e-6)
    v = read_field_csv(out / "v.csv")
    assert v.grid.n == 33
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "outer,energy,violation" and len(trace) == s["outer_iters"] + 1


def test_determinism(tmp_path):
    args = ["solve", "--f", "expr:2-r", "--grid", "disk:33", "--seed", "5"]
    assert run(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert run(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    assert (tmp_path / "a" / "v.csv").read_bytes() == (tmp_path / "b" / "v.csv").read_bytes()


def test_nonconvergence_exit(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\ngrid = disk:33\n\n[solver]\nmax_outer = 1\nmax_inner = 1\n")
    status = run(["solve", "--config", str(cfg), "--f", "const:1", "--start", "scaled-paraboloid:2",
                  "--out", str(tmp_path / "o")])
    assert status == EXIT_NONCONVERGED
    assert _summary(tmp_path / "o")["converged"] is False


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nf = const:4\nm = 101\n")
    assert run(["radial", "--config", str(cfg), "--out", str(tmp_path / "c")]) == EXIT_OK
    assert _summary(tmp_path / "c")["energy"] == pytest.approx(8 * np.pi, rel=1e-8)
    assert run(["radial", "--config", str(cfg), "--f", "const:1", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert _summary(tmp_path / "d")["energy"] == pytest.approx(2 * np.pi, rel=1e-8)


@pytest.mark.parametrize(
    "ini",
    ["[run]\ncolour = red\n", "[solver]\nwarp = 9\n", "[extra]\na = 1\n", "[solver]\nmode = sideways\n"],
)
def test_bad_config(tmp_path, ini):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(ini)
    assert run(["radial", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INVALID


def test_invalid_inputs_exit_2(tmp_path, capsys):
    o = str(tmp_path)
    assert run(["radial", "--f", "expr:2-*r", "--out", o]) == EXIT_INVALID
    assert "position" in capsys.readouterr().err
    assert run(["solve", "--f", "log(x1)", "--grid", "disk:33", "--out", o]) == EXIT_INVALID
    assert run(["solve", "--grid", "annulus:33", "--out", o]) == EXIT_INVALID
    assert run(["check-compat", "--growth", "preset:nope", "--out", o]) == EXIT_INVALID
    assert run(["scaling", "--h-list", "0.1,0.2", "--out", o]) == EXIT_INVALID


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MA_PLATE_THREADS", "zero")
    assert run(["radial", "--out", str(tmp_path)]) == EXIT_INVALID
    monkeypatch.setenv("MA_PLATE_THREADS", "1")
    assert run(["radial", "--m", "101", "--out", str(tmp_path)]) == EXIT_OK


def test_family_command(tmp_path):
    assert run(["family", "--f", "preset:holomorphic", "--grid", "disk:65", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path)
    assert s["energy_spread"] < 0.01
    assert s["det_residual_core"] < 10 * s["h2"]
    assert len(list(tmp_path.glob("v_theta*.csv"))) == 4


def test_scaling_command_short(tmp_path):
    assert run(["scaling", "--h-list", "2^-3,2^-4,2^-5,2^-6", "--out", str(tmp_path)]) == EXIT_OK
    s = _summary(tmp_path)
    assert abs(s["slope"] - 3.5) < 0.15
    rows = (tmp_path / "scaling.csv").read_text().splitlines()
    assert rows[0] == "h,energy,ratio" and len(rows) == 5


def test_check_el_and_matching(tmp_path):
    assert run(["check-el", "--f", "expr:1+r^2", "--ns", "33,65", "--out", str(tmp_path / "e")]) == EXIT_OK
    assert _summary(tmp_path / "e")["interior_order"] > 1.5
    assert run(["matching", "--growth", "preset:paraboloid", "--grid", "disk:33", "--out", str(tmp_path / "m")]) == EXIT_OK
    s = _summary(tmp_path / "m")
    assert max(s["phi_residual"]) < 1e-6
    assert all(r > 1.8 for r in s["ratios"])


def test_argparse_rejects_unknown_command():
    with pytest.raises(SystemExit) as err:
        run(["fly"])
    assert err.value.code == 2
