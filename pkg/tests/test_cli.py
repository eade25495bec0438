import json
import subprocess
import sys

import numpy as np
import pytest

from kernelcurves import cli
from kernelcurves.cli import UsageError, main, parse_args, parse_grid, parse_target
from kernelcurves.theory import FixedPointError


def test_parse_grid():
    np.testing.assert_allclose(parse_grid("4:512:log8"), [4, 8, 16, 32, 64, 128, 256, 512])
    assert parse_grid("0:10:lin3") == [0.0, 5.0, 10.0]
    assert parse_grid("4:512:log8", integer=True) == [4, 8, 16, 32, 64, 128, 256, 512]
    assert parse_grid("1,2,5") == [1.0, 2.0, 5.0]
    for bad in ["1:2", "1:2:geo4", "0:5:log3", "a,b"]:
        with pytest.raises(UsageError):
            parse_grid(bad)


def test_parse_target():
    assert parse_target("kernel:pprime=300") == {"kind": "kernel", "p_prime": 300}
    assert parse_target("pure:k=2,pprime=10") == {"kind": "pure", "degree": 2, "p_prime": 10}
    for bad in ["kernel", "pure:pprime=3", "rbf:pprime=1", "kernel:pprime=3,q=1"]:
        with pytest.raises(UsageError):
            parse_target(bad)


def test_spec_examples_parse():
    run = parse_args("spectrum --kernel ntk --depth 3 --dim 15 --kmax 60 --out s.csv".split())
    assert run.command == "spectrum" and run.params["dim"] == 15 and run.out == "s.csv"
    run = parse_args("theory --spectrum s.csv --target kernel:pprime=300 --lambda 0 --p 4:512:log16 --out c.csv".split())
    assert len(run.params["grid"]) == 16 and run.params["ridge"] == 0.0
    with pytest.raises(UsageError, match="--dim"):
        parse_args("spectrum --kernel ntk --depth 3 --kmax 60 --out s.csv".split())


def test_unknown_flag_and_missing_depth():
    with pytest.raises(UsageError):
        parse_args("spectrum --kernel ntk --depth 3 --dim 15 --out s.csv --colour red".split())
    with pytest.raises(UsageError, match="depth"):
        parse_args("spectrum --kernel ntk --dim 15 --out s.csv".split())


def test_config_file_merge(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kernel": "ntk", "depth": 2, "dim": 10, "kmax": 5}))
    run = parse_args(["spectrum", "--config", str(cfg), "--kmax", "9", "--out", "x.csv"])
    assert run.params["depth"] == 2 and run.params["kmax"] == 9
    cfg.write_text(json.dumps({"kernel": "ntk", "nonsense": 1}))
    with pytest.raises(UsageError, match="nonsense"):
        parse_args(["spectrum", "--config", str(cfg), "--out", "x.csv"])


def test_usage_exit_code(capsys):
    assert main(["spectrum", "--kernel", "ntk"]) == 1
    assert main([]) == 1


def test_spectrum_then_theory(tmp_path, capsys):
    s, c = tmp_path / "s.csv", tmp_path / "c.csv"
    assert main(f"spectrum --kernel ntk --depth 3 --dim 15 --kmax 30 --out {s}".split()) == 0
    assert main(f"theory --spectrum {s} --target kernel:pprime=300 --lambda 0 --p 4:512:log16 --out {c}".split()) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[-1].startswith("theory: E_total(p=512)=")
    lines = c.read_text().splitlines()
    assert len(lines) == 17
    assert lines[0].split(",")[2:4] == ["E_k0", "E_k1"] and len(lines[0].split(",")) == 2 + 31 + 4
    meta = json.loads((tmp_path / "c.csv.json").read_text())
    assert meta["run_config"]["params"]["target"] == {"kind": "kernel", "p_prime": 300}


def test_exit_codes_for_failures(tmp_path, monkeypatch, capsys):
    s, c = tmp_path / "s.csv", tmp_path / "c.csv"
    s.write_text("k,lambda,degeneracy\n0,0,1\n")
    assert main(f"theory --spectrum {s} --target kernel:pprime=3 --p 1,2 --out {c}".split()) == 1

    def boom(run):
        raise FixedPointError("bisection did not converge")

    monkeypatch.setitem(cli.RUNNERS, "theory", boom)
    assert main(f"theory --spectrum {s} --target kernel:pprime=3 --p 1,2 --out {c}".split()) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_experiment_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("KERNELCURVES_THREADS", "2")
    args = "experiment --kernel ntk --depth 2 --dim 6 --kmax 8 --target kernel:pprime=10 --p 4:32:log4 --trials 5 --seed 3 --out {}"
    assert main(args.format(tmp_path / "a.csv").split()) == 0
    assert main(args.format(tmp_path / "b.csv").split()) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    head = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert head[:3] == ["p", "mean_total", "std_total"] and head[-1] == "failed_trials"


def test_kpca_command(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((60, 5))
    Y = np.sign(X[:, :2])
    head = ",".join([f"x{i}" for i in range(5)] + ["y0", "y1"])
    rows = [",".join(f"{v:.17g}" for v in r) for r in np.hstack([X, Y])]
    (tmp_path / "d.csv").write_text(head + "\n" + "\n".join(rows) + "\n")
    out = tmp_path / "k.csv"
    code = main(f"kpca --kernel ntk --depth 3 --data {tmp_path / 'd.csv'} --p 5:40:lin4 --trials 3 --out {out}".split())
    assert code == 0
    assert (tmp_path / "k.class0.csv").exists() and (tmp_path / "k.class1.csv").exists()
    assert (tmp_path / "k.empirical.csv").read_text().startswith("p,mean_total,std_total,failed_trials")


def test_powerlaw_and_stages(tmp_path):
    assert main(f"powerlaw --a 2 --b 1.5 --p 100:1000:log5 --out {tmp_path / 'p.csv'}".split()) == 0
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "p,E_total,t,gamma,prefactor,flag"
    assert main(f"stages --kernel ntk --depth 10 --dim 30 --kmax 10 --level 2 --alpha 1e3,1e4 --out {tmp_path / 's.csv'}".split()) == 0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("alpha,ratio_k0")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "kernelcurves", "spectrum"], capture_output=True, text=True)
    assert res.returncode == 1
    assert "missing required" in res.stderr
