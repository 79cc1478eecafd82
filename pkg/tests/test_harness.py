import csv
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pytest  # noqa: E402
import yaml  # noqa: E402

from kindmarl.approx import load_arrays  # noqa: E402
from kindmarl.cli import main  # noqa: E402
from kindmarl.harness.config import ConfigError, load_config, parse_config  # noqa: E402
from kindmarl.harness.plotting import SEED_ALPHA, MetricsError, emit_plots, plot_reward_curves  # noqa: E402
from kindmarl.harness.report import (  # noqa: E402
    ComparisonError,
    RunSummary,
    compare_methods,
    percentage_difference,
    read_summary,
)
from kindmarl.harness.runner import (  # noqa: E402
    SUMMARY_HEADER,
    convergence_episode,
    episode_header,
    run_experiment,
    run_seed,
    step_header,
)

TINY = """\
schema_version: 1
name: {name}
env: cleanup
n_agents: 2
horizon: 20
episodes: 3
seeds: {seeds}
method: {method}
shaping:
  preset: advantageous
eicm:
  warmup: {warmup}
  batch_size: 8
  buffer_capacity: 200
agent:
  batch_size: 8
  learn_start: 8
  buffer_capacity: 200
  epsilon_decay_steps: 40
output_dir: {out}
per_step_csv: true
"""


def tiny(tmp_path, name="tiny", method="kindmarl", seeds="[0]", warmup=10, **extra):
    text = TINY.format(name=name, method=method, seeds=seeds, warmup=warmup, out=tmp_path)
    for key, value in extra.items():
        text += f"{key}: {value}\n"
    return text


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ----------------------------------------------------------------------

def test_minimal_config_gets_defaults():
    cfg = parse_config("env: cleanup\nmethod: ia\nseeds: [0]\n")
    assert (cfg.n_agents, cfg.horizon, cfg.episodes) == (5, 500, 200)
    assert cfg.shaping.trace_decay == 0.95 and cfg.shaping.discount == 0.99
    assert cfg.shaping.extrinsic_weight == 1.0 and cfg.shaping.intrinsic_weight == 1.0
    assert cfg.eicm.warmup == 1000 and cfg.eicm.q == 32 and cfg.eicm.impact_reference == "previous"
    assert (cfg.eicm.forward_weight, cfg.eicm.inverse_weight, cfg.eicm.moa_weight) == (0.5, 0.4, 0.1)
    assert cfg.agent.buffer_capacity == 50_000 and cfg.agent.batch_size == 64
    assert cfg.agent.target_sync == 500 and cfg.agent.learn_every == 4
    assert cfg.agent.discount == cfg.shaping.discount
    assert cfg.name == "cleanup-ia"


def test_env_specific_agent_counts():
    assert parse_config("env: harvest\nmethod: ia\nseeds: [0]\n").n_agents == 4
    matrix = parse_config("env: matrix\nmethod: ia\nseeds: [0]\nhorizon: 50\n")
    assert matrix.n_agents == 2 and matrix.horizon == 1


def test_baseline_intrinsic_weight_normalized_with_warning():
    with pytest.warns(UserWarning, match="intrinsic_weight"):
        cfg = parse_config("env: cleanup\nmethod: baseline\nseeds: [0]\nshaping:\n  intrinsic_weight: 1\n")
    assert cfg.shaping.intrinsic_weight == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert parse_config("env: cleanup\nmethod: baseline\nseeds: [0]\n").shaping.intrinsic_weight == 0.0


def test_trace_decay_out_of_range_names_key_and_line():
    text = "env: cleanup\nmethod: ia\nseeds: [0]\nshaping:\n  trace_decay: 1.5\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == "shaping.trace_decay"
    assert info.value.line == 5
    assert "shaping.trace_decay" in str(info.value)


@pytest.mark.parametrize(
    "text,path",
    [
        ("env: cleanup\nmethod: ia\nseeds: [0]\nbogus: 1\n", "bogus"),
        ("env: cleanup\nmethod: ia\nseeds: [0]\neicm:\n  q: -3\n", "eicm.q"),
        ("env: cleanup\nmethod: ia\nseeds: [0]\nagent:\n  lr: fast\n", "agent.lr"),
        ("env: cleanup\nmethod: kind\nseeds: [0]\n", "method"),
        ("env: traffic\nmethod: ia\nseeds: [0]\n", "env"),
        ("env: cleanup\nmethod: ia\n", "seeds"),
        ("env: cleanup\nmethod: ia\nseeds: []\n", "seeds"),
        ("env: cleanup\nseeds: [0]\n", "method"),
        ("env: cleanup\nmethod: ia\nseeds: [0]\nshaping:\n  envy_coeff: -1\n", "shaping.envy_coeff"),
        ("env: cleanup\nmethod: ia\nseeds: [0]\nn_agents: 3\nshaping:\n  guilt_coeff: [1, 2]\n", "shaping.guilt_coeff"),
        ("env: {name: cleanup, waste_threshold: 2}\nmethod: ia\nseeds: [0]\n", "env.waste_threshold"),
        ("env: cleanup\nmethod: ia\nseeds: [0]\nsweep:\n  - {trace_decay: 3}\n", "sweep[0].trace_decay"),
        ("env: cleanup\nmethod: ia\nseeds: [0]\nschema_version: 2\n", "schema_version"),
    ],
)
def test_config_errors_carry_key_path(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path


def test_preset_and_explicit_override():
    cfg = parse_config("env: cleanup\nmethod: ia\nseeds: [0]\nshaping:\n  preset: searched_ia\n")
    assert (cfg.shaping.envy_coeff, cfg.shaping.guilt_coeff) == (0.6, -0.2)
    cfg = parse_config("env: cleanup\nmethod: ia\nseeds: [0]\nshaping:\n  preset: searched_ia\n  guilt_coeff: 0.1\n")
    assert cfg.shaping.guilt_coeff == 0.1


def test_output_root_env_override(tmp_path, monkeypatch):
    cfg = parse_config(tiny(tmp_path / "a"))
    assert cfg.run_dir == tmp_path / "a" / "tiny"
    monkeypatch.setenv("KINDMARL_OUTPUT_ROOT", str(tmp_path / "b"))
    assert cfg.run_dir == tmp_path / "b" / "tiny"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


# -- runs ------------------------------------------------------------------------

def test_run_writes_outputs_and_echoes_config(tmp_path):
    text = tiny(tmp_path, seeds="[0, 1, 2]")
    [res] = run_experiment(parse_config(text))
    assert res.ok
    run_dir = tmp_path / "tiny"
    assert (run_dir / "config.yaml").read_text(encoding="utf-8") == text
    resolved = yaml.safe_load((run_dir / "resolved_config.yaml").read_text(encoding="utf-8"))
    assert resolved["eicm"]["moa_recurrent"] == 128 and resolved["shaping"]["guilt_coeff"] == 0.05
    assert parse_config(yaml.safe_dump(resolved)).shaping == parse_config(text).shaping
    rows = read_rows(run_dir / "summary.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2", "aggregate"]
    assert all(r["status"] == "ok" for r in rows)
    tails = [float(r["tail_mean_collective"]) for r in rows[:3]]
    assert float(rows[3]["tail_mean_collective"]) == pytest.approx(np.mean(tails))
    assert float(rows[3]["tail_std_collective"]) == pytest.approx(np.std(tails, ddof=1))
    for s in range(3):
        ckpt = load_arrays(run_dir / f"seed_{s}" / "checkpoint.kmck")
        assert "agent0.eicm.encoder.0" in ckpt and "agent1.dqn.online.5" in ckpt


def test_episode_rows_are_consistent(tmp_path):
    run_seed(parse_config(tiny(tmp_path)), 0, tmp_path / "s")
    episodes = read_rows(tmp_path / "s" / "episodes.csv")
    steps = read_rows(tmp_path / "s" / "steps.csv")
    assert len(episodes) == 3 and len(steps) == 60
    for row in episodes + steps:
        assert float(row["collective_extrinsic"]) == pytest.approx(float(row["e_0"]) + float(row["e_1"]))
    for ep in range(3):
        mine = [r for r in steps if r["episode"] == str(ep)]
        assert sum(float(r["r_1"]) for r in mine) == pytest.approx(float(episodes[ep]["r_1"]))


def test_pinned_csv_headers(tmp_path):
    assert episode_header(2) == [
        "seed", "episode", "steps", "collective_extrinsic",
        "e_0", "e_1", "i_0", "i_1", "r_0", "r_1", "d_0_1", "d_1_0",
        "forward_loss", "inverse_loss", "moa_loss", "td_loss", "epsilon",
    ]  # fmt: skip
    assert step_header(2) == [
        "seed", "episode", "step", "collective_extrinsic",
        "e_0", "e_1", "i_0", "i_1", "r_0", "r_1", "d_0_1", "d_1_0",
        "forward_loss", "inverse_loss", "moa_loss", "epsilon",
    ]  # fmt: skip
    assert SUMMARY_HEADER == [
        "run", "method", "env", "n_agents", "seed", "status", "tail_mean_collective",
        "tail_std_collective", "n_tail_episodes", "convergence_episode", "error",
    ]  # fmt: skip
    run_seed(parse_config(tiny(tmp_path)), 0, tmp_path / "s")
    first = (tmp_path / "s" / "episodes.csv").read_text(encoding="utf-8").splitlines()[0]
    assert first.split(",") == episode_header(2)


def test_same_seed_twice_is_byte_identical(tmp_path):
    cfg = parse_config(tiny(tmp_path))
    run_seed(cfg, 4, tmp_path / "a")
    run_seed(cfg, 4, tmp_path / "b")
    for name in ("episodes.csv", "steps.csv", "checkpoint.kmck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(tmp_path):
    cfg = parse_config(tiny(tmp_path))
    run_seed(cfg, 0, tmp_path / "a")
    run_seed(cfg, 1, tmp_path / "b")
    assert (tmp_path / "a" / "steps.csv").read_bytes() != (tmp_path / "b" / "steps.csv").read_bytes()


def test_ia_equals_kindmarl_while_warming_up(tmp_path):
    total = 3 * 20
    run_seed(parse_config(tiny(tmp_path, method="ia", warmup=total)), 0, tmp_path / "ia")
    run_seed(parse_config(tiny(tmp_path, method="kindmarl", warmup=total)), 0, tmp_path / "km")
    for name in ("episodes.csv", "steps.csv"):
        assert (tmp_path / "ia" / name).read_bytes() == (tmp_path / "km" / name).read_bytes()


def test_kindmarl_intentions_active_after_warmup(tmp_path):
    run_seed(parse_config(tiny(tmp_path, warmup=5)), 0, tmp_path / "km")
    steps = read_rows(tmp_path / "km" / "steps.csv")
    d = [float(r["d_0_1"]) for r in steps]
    assert all(x == 1.0 for x in d[:5])
    assert any(x < 1.0 for x in d[5:])
    assert all(0.0 <= x <= 1.0 for x in d)


def test_failing_seed_is_isolated(tmp_path, monkeypatch):
    import kindmarl.harness.runner as runner

    real = runner.run_seed

    def flaky(config, seed, out_dir=None):
        if seed == 1:
            raise FloatingPointError("boom")
        return real(config, seed, out_dir)

    monkeypatch.setattr(runner, "run_seed", flaky)
    [res] = run_experiment(parse_config(tiny(tmp_path, seeds="[0, 1]")))
    assert not res.ok
    rows = read_rows(tmp_path / "tiny" / "summary.csv")
    assert [r["status"] for r in rows] == ["ok", "failed", "partial"]
    assert "boom" in rows[1]["error"]
    assert rows[2]["n_tail_episodes"] == "1"


def test_seed_offset_and_sweep(tmp_path):
    text = tiny(tmp_path, seeds="[0]") + "sweep:\n  - {guilt_coeff: 0.0}\n  - {preset: searched_ia}\n"
    results = run_experiment(parse_config(text), seed_offset=5)
    assert len(results) == 2
    for res in results:
        assert [s.seed for s in res.seeds] == [5]
        assert (res.run_dir / "seed_5" / "episodes.csv").exists()
    assert yaml.safe_load((results[1].run_dir / "resolved_config.yaml").read_text())["shaping"]["envy_coeff"] == 0.6


def test_convergence_episode():
    assert convergence_episode(np.r_[np.zeros(20), np.ones(30)], window=5) == 24
    assert convergence_episode(np.ones(10)) == 9


# -- plots -----------------------------------------------------------------------

def test_three_seeds_give_three_translucent_and_one_opaque_trace():
    fig, ax = plt.subplots()
    curves = {s: np.random.default_rng(s).normal(size=30) for s in range(3)}
    seed_lines, mean_line = plot_reward_curves(ax, curves)
    assert len(ax.lines) == 4
    assert [line.get_alpha() for line in seed_lines] == [SEED_ALPHA] * 3
    assert mean_line.get_alpha() == 1.0
    np.testing.assert_allclose(mean_line.get_ydata(), np.mean(list(curves.values()), axis=0))
    plt.close(fig)


def test_single_seed_mean_equals_trace():
    fig, ax = plt.subplots()
    y = np.arange(10.0)
    [line], mean_line = plot_reward_curves(ax, {0: y})
    np.testing.assert_array_equal(line.get_ydata(), mean_line.get_ydata())
    plt.close(fig)


def test_emit_plots_writes_vector_files(tmp_path):
    run_experiment(parse_config(tiny(tmp_path, name="km", seeds="[0, 1]")))
    run_experiment(parse_config(tiny(tmp_path, name="ia", method="ia", seeds="[0, 1]")))
    paths = emit_plots(tmp_path)
    names = sorted(p.name for p in paths)
    assert names[0] == "comparison.svg" and len(names) == 3
    assert names[1].startswith("reward_ia") and names[2].startswith("reward_km")
    for p in paths:
        assert p.read_text(encoding="utf-8").lstrip().startswith("<?xml")
    assert emit_plots(tmp_path / "km", fmt="pdf")[0].read_bytes()[:4] == b"%PDF"


def test_emit_plots_empty_dir_errors_without_files(tmp_path):
    with pytest.raises(MetricsError):
        emit_plots(tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_emit_plots_unparseable_csv(tmp_path):
    (tmp_path / "run" / "seed_0").mkdir(parents=True)
    (tmp_path / "run" / "seed_0" / "episodes.csv").write_text("a,b\n1,2\n")
    with pytest.raises(MetricsError):
        emit_plots(tmp_path)


# -- comparison ------------------------------------------------------------------

def test_percentage_examples():
    assert round(percentage_difference(757.4, 401.6), 1) == 88.6
    assert percentage_difference(5.0, 5.0) == 0.0
    assert round(percentage_difference(678.5, 622.2), 1) == 9.0


def summary(method, mean, env="cleanup", seeds=(0, 1, 2)):
    return RunSummary(method, method, env, tuple(seeds), mean)


def test_compare_methods_table():
    cmp = compare_methods([summary("kindmarl", 757.4), summary("ia", 401.6), summary("baseline", 470.9)])
    assert round(cmp.percent[("kindmarl", "ia")], 1) == 88.6
    assert round(cmp.percent[("kindmarl", "baseline")], 1) == 60.8
    assert len(cmp.percent) == 6
    assert "kindmarl,ia,88.60" in cmp.format()


@pytest.mark.parametrize(
    "items",
    [
        [summary("a", 1.0), summary("b", 2.0, env="harvest")],
        [summary("a", 1.0), summary("b", 2.0, seeds=(0, 1))],
        [summary("a", 1.0)],
    ],
)
def test_compare_rejects_mismatched_inputs(items):
    with pytest.raises(ComparisonError):
        compare_methods(items)


def test_read_summary_round_trip(tmp_path):
    run_experiment(parse_config(tiny(tmp_path, seeds="[0, 1]")))
    s = read_summary(tmp_path / "tiny")
    assert s.method == "kindmarl" and s.env == "cleanup" and s.seeds == (0, 1)


# -- CLI -------------------------------------------------------------------------

def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_cli_validate_and_config_error(tmp_path, capsys):
    assert main(["validate", write(tmp_path, "ok.yaml", tiny(tmp_path))]) == 0
    bad = write(tmp_path, "bad.yaml", "env: cleanup\nmethod: ia\nseeds: [0]\nshaping:\n  trace_decay: 1.5\n")
    assert main(["validate", bad]) == 1
    assert "shaping.trace_decay" in capsys.readouterr().err


def test_cli_run_plot_compare(tmp_path, capsys):
    km = write(tmp_path, "km.yaml", tiny(tmp_path, name="km"))
    ia = write(tmp_path, "ia.yaml", tiny(tmp_path, name="ia", method="ia"))
    assert main(["run", km]) == 0
    assert (tmp_path / "km" / "plots" / "comparison.svg").exists()
    assert main(["run", ia, "--no-plots"]) == 0
    assert not (tmp_path / "ia" / "plots").exists()
    assert main(["plot", str(tmp_path), "--out", str(tmp_path / "figs")]) == 0
    assert (tmp_path / "figs" / "comparison.svg").exists()
    out = tmp_path / "cmp.csv"
    assert main(["compare", str(tmp_path / "km"), str(tmp_path / "ia" / "summary.csv"), "--out", str(out)]) == 0
    assert "percent_more" in out.read_text()


def test_cli_exit_codes_for_failures(tmp_path):
    assert main(["plot", str(tmp_path)]) == 2
    a = write(tmp_path, "a.yaml", tiny(tmp_path, name="a"))
    b = write(tmp_path, "b.yaml", tiny(tmp_path, name="b", seeds="[1]"))
    assert main(["run", a, "--no-plots"]) == 0
    assert main(["run", b, "--no-plots"]) == 0
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 3


def test_cli_oracle(capsys):
    assert main(["oracle", "--cases", "20"]) == 0
    assert capsys.readouterr().out.startswith("PASS")


def test_cli_seed_offset(tmp_path):
    cfg = write(tmp_path, "c.yaml", tiny(tmp_path, name="offset"))
    assert main(["run", cfg, "--seed-offset", "3", "--no-plots"]) == 0
    assert Path(tmp_path / "offset" / "seed_3" / "episodes.csv").exists()
