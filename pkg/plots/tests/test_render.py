"""Rendering tests: every figure kind draws, errors name the problem, and
output bytes are stable across repeat runs."""

import csv

import pytest

from mdnfplots import FIGURE_KINDS, RenderError, main, render


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


@pytest.fixture
def fit_csv(tmp_path):
    header = ["iteration", "internal_objective", "tau_t", "external_elbo",
              "kl_exact", "wallclock_ms"]
    rows = []
    for i in range(40):
        ext = f"{-2.0 - 5.0 / (i + 1):.6f}" if i % 10 == 0 else ""
        kl = f"{5.0 / (i + 1):.6f}" if i % 10 == 0 else ""
        rows.append([i, f"{-3.0 - 8.0 / (i + 1):.6f}", "1.0", ext, kl,
                     f"{0.3 * i:.3f}"])
    return write_csv(tmp_path / "fit.csv", header, rows)


@pytest.fixture
def temp_csv(tmp_path):
    header = ["method", "tau", "tau_p", "seed", "final_elbo", "final_kl",
              "error"]
    rows = []
    for tau in (0.1, 1.0, 10.0):
        for tp in (0.1, 1.0):
            for seed in range(2):
                rows.append(["gs", tau, tp, seed, -2.5, 0.1 * tau + tp, ""])
    for tau in (1.0, 10.0):
        for seed in range(2):
            rows.append(["mdnf", tau, "", seed, -2.1, 0.03, ""])
    return write_csv(tmp_path / "temp.csv", header, rows)


@pytest.fixture
def algo_csv(tmp_path):
    header = ["algorithm", "b", "seed", "final_elbo", "final_kl", "error"]
    rows = []
    for algo in ("vif", "bvif"):
        for b in (1, 10):
            for seed in range(4):
                rows.append([algo, b, seed, -3.0 + 0.1 * seed + 0.02 * b,
                             0.5 - 0.02 * b, ""])
    return write_csv(tmp_path / "algo.csv", header, rows)


@pytest.fixture
def base_csv(tmp_path):
    header = ["alpha", "seed", "final_elbo", "final_kl", "error"]
    rows = [[a, s, -2.0, k, ""]
            for a, k in ((0.01, 0.03), (1.0, 0.2), (100.0, 1.3))
            for s, k in enumerate([k, k * 1.1, k * 0.9])]
    return write_csv(tmp_path / "base.csv", header, rows)


@pytest.fixture
def variance_csv(tmp_path):
    header = ["s", "repetitions", "mean", "std", "ratio"]
    rows = [[1, 100, -2.31, 0.012, 0.0052], [10, 100, -2.31, 0.004, 0.0017],
            [40, 100, -2.31, 0.0, 0.0]]
    return write_csv(tmp_path / "var.csv", header, rows)


KIND_FIXTURE = {"objective-gap": "fit_csv", "temp-heat": "temp_csv",
                "algo-box": "algo_csv", "base-box": "base_csv",
                "variance-bars": "variance_csv"}


class TestKinds:

    @pytest.mark.parametrize("kind", FIGURE_KINDS)
    def test_each_kind_renders_nonempty_png(self, kind, tmp_path, request):
        src = request.getfixturevalue(KIND_FIXTURE[kind])
        out = tmp_path / f"{kind}.png"
        assert render([src], kind, out) == str(out)
        assert out.stat().st_size > 1000

    @pytest.mark.parametrize("kind", FIGURE_KINDS)
    def test_repeat_render_is_byte_identical(self, kind, tmp_path, request):
        src = request.getfixturevalue(KIND_FIXTURE[kind])
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        render([src], kind, a)
        render([src], kind, b)
        assert a.read_bytes() == b.read_bytes()

    def test_svg_output_is_byte_identical(self, variance_csv, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        render([variance_csv], "variance-bars", a)
        render([variance_csv], "variance-bars", b)
        assert a.read_bytes() == b.read_bytes()

    def test_multiple_fit_csvs_overlay(self, fit_csv, tmp_path):
        other = tmp_path / "fit2.csv"
        other.write_text(open(fit_csv).read())
        out = tmp_path / "overlay.png"
        render([fit_csv, str(other)], "objective-gap", out)
        assert out.stat().st_size > 1000

    def test_error_rows_are_dropped(self, tmp_path):
        header = ["algorithm", "b", "seed", "final_elbo", "final_kl",
                  "error"]
        rows = [["vif", 1, 0, -2.0, 0.1, ""],
                ["vif", 1, 1, "", "", "ValueError: boom"],
                ["vif", 1, 2, -2.2, 0.2, ""]]
        src = write_csv(tmp_path / "algo.csv", header, rows)
        out = tmp_path / "out.png"
        render([src], "algo-box", out)
        assert out.stat().st_size > 1000

    def test_all_rows_failed_is_an_error(self, tmp_path):
        header = ["method", "tau", "tau_p", "seed", "final_elbo",
                  "final_kl", "error"]
        rows = [["gs", 1.0, 1.0, 0, "", "", "ValueError: bad cell"]]
        src = write_csv(tmp_path / "temp.csv", header, rows)
        with pytest.raises(RenderError, match="failed"):
            render([src], "temp-heat", tmp_path / "out.png")


class TestIntakeErrors:

    def test_unknown_kind(self, variance_csv, tmp_path):
        with pytest.raises(RenderError, match="unknown figure kind"):
            render([variance_csv], "pie", tmp_path / "out.png")

    def test_no_inputs(self, tmp_path):
        with pytest.raises(RenderError, match="at least one CSV"):
            render([], "algo-box", tmp_path / "out.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(RenderError):
            render([str(tmp_path / "nope.csv")], "algo-box",
                   tmp_path / "out.png")

    def test_zero_byte_file(self, tmp_path):
        src = tmp_path / "empty.csv"
        src.touch()
        with pytest.raises(RenderError, match="header"):
            render([str(src)], "algo-box", tmp_path / "out.png")

    def test_header_only_file(self, tmp_path):
        src = tmp_path / "hdr.csv"
        src.write_text("algorithm,b,seed,final_elbo,final_kl,error\n")
        with pytest.raises(RenderError, match="no data rows"):
            render([str(src)], "algo-box", tmp_path / "out.png")

    def test_missing_column_is_named(self, variance_csv, tmp_path):
        with pytest.raises(RenderError) as exc:
            render([variance_csv], "algo-box", tmp_path / "out.png")
        assert "final_elbo" in str(exc.value)
        assert "have:" in str(exc.value)

    def test_wrong_kind_for_fit_csv(self, fit_csv, tmp_path):
        with pytest.raises(RenderError, match="ratio"):
            render([fit_csv], "variance-bars", tmp_path / "out.png")


class TestMain:

    def test_success_exit_zero(self, variance_csv, tmp_path):
        out = tmp_path / "out.png"
        assert main([variance_csv, "--kind", "variance-bars",
                     "--out", str(out)]) == 0
        assert out.exists()

    def test_render_error_exit_one(self, variance_csv, tmp_path, capsys):
        code = main([variance_csv, "--kind", "algo-box",
                     "--out", str(tmp_path / "o.png")])
        assert code == 1
        assert "final_elbo" in capsys.readouterr().err

    def test_usage_error_exit_two(self, variance_csv, tmp_path):
        code = main([variance_csv, "--kind", "nope",
                     "--out", str(tmp_path / "o.png")])
        assert code == 2

    def test_help_exit_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "figure" in capsys.readouterr().out
